use serde::{Deserialize, Serialize};

use crate::entity::EntitySet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Articles carry at most this many image-caption pairs.
pub const MAX_PAIRS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Generated,
    Real,
}

impl Label {
    pub fn target(self) -> f32 {
        match self {
            Label::Real => 1.0,
            Label::Generated => 0.0,
        }
    }

    pub fn is_real(self) -> bool {
        self == Label::Real
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Label::Real),
            0 => Ok(Label::Generated),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Real => 1,
            Label::Generated => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCaptionPair {
    pub pair_id: String,
    /// `[n_c x d_text]` caption word embeddings.
    pub caption_words: Tensor<f32>,
    /// `[n_o x d_image]` object region features.
    pub object_feats: Tensor<f32>,
    pub caption_entities: EntitySet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArticleRecord {
    pub article_id: String,
    /// Sentence `i` is `[n_words_i x d_text]`.
    pub sentences: Vec<Tensor<f32>>,
    pub body_entities: EntitySet,
    pub pairs: Vec<ImageCaptionPair>,
    pub label: Label,
}

fn check_matrix(t: &Tensor<f32>, width: usize, what: &str) -> Result<()> {
    t.validate_feature().map_err(|e| Error::Validation(format!("{what}: {e}")))?;
    if t.rank() != 2 || t.cols() != width {
        return Err(Error::Validation(format!("{what}: shape {:?}, expected [n, {width}]", t.shape())));
    }
    Ok(())
}

impl ImageCaptionPair {
    pub fn validate(&self, d_text: usize, d_image: usize) -> Result<()> {
        check_matrix(&self.caption_words, d_text, &format!("pair {} caption", self.pair_id))?;
        check_matrix(&self.object_feats, d_image, &format!("pair {} objects", self.pair_id))
    }
}

impl ArticleRecord {
    pub fn validate(&self, d_text: usize, d_image: usize) -> Result<()> {
        let id = &self.article_id;
        if self.pairs.is_empty() || self.pairs.len() > MAX_PAIRS {
            return Err(Error::Validation(format!(
                "article {id}: has {} image-caption pairs, must have 1 to {MAX_PAIRS}",
                self.pairs.len()
            )));
        }
        if self.sentences.is_empty() {
            return Err(Error::Validation(format!("article {id}: no sentences")));
        }
        for (i, s) in self.sentences.iter().enumerate() {
            check_matrix(s, d_text, &format!("article {id} sentence {i}"))?;
        }
        for p in &self.pairs {
            p.validate(d_text, d_image)?;
        }
        Ok(())
    }

    pub fn d_text(&self) -> usize {
        self.sentences[0].cols()
    }

    pub fn d_image(&self) -> usize {
        self.pairs[0].object_feats.cols()
    }

    /// Two-level mean of raw word embeddings: words within a sentence, then sentences.
    pub fn mean_word_embedding(&self) -> Vec<f32> {
        let d = self.d_text();
        let mut acc = vec![0f32; d];
        for s in &self.sentences {
            for (a, v) in acc.iter_mut().zip(s.mean_rows().data()) {
                *a += v;
            }
        }
        let n = self.sentences.len() as f32;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}
