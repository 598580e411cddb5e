//! Forward pass: article encoding, object-by-word attention, indicator
//! fusion, the discriminator and noisy-OR aggregation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::params::DidanParams;
use crate::data::{ArticleRecord, ImageCaptionPair};
use crate::entity::compute_indicator;
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, NodeId, NormStats, PROB_EPS};
use crate::tensor::{Scalar, Tensor};

/// Which parts of the article reach the discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityAblation {
    /// `[article ‖ mean attended image ‖ indicator]`.
    #[default]
    Full,
    /// Visual slot holds the mean projected caption word; images unused.
    NoImages,
    /// Visual slot holds the mean projected object; indicator forced to 0.
    NoCaptions,
    /// `[article ‖ 0 ‖ 0]`.
    ArticlesOnly,
}

impl ModalityAblation {
    pub const ALL: [ModalityAblation; 4] =
        [ModalityAblation::Full, ModalityAblation::NoImages, ModalityAblation::NoCaptions, ModalityAblation::ArticlesOnly];

    pub fn name(self) -> &'static str {
        match self {
            ModalityAblation::Full => "full",
            ModalityAblation::NoImages => "no_images",
            ModalityAblation::NoCaptions => "no_captions",
            ModalityAblation::ArticlesOnly => "articles_only",
        }
    }

    fn uses_captions(self) -> bool {
        matches!(self, ModalityAblation::Full | ModalityAblation::NoImages)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; needs at least two pair rows.
    Train,
    /// Running statistics; pure.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub ablation: ModalityAblation,
    pub use_nei: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { mode: Mode::Eval, ablation: ModalityAblation::Full, use_nei: true }
    }

    pub fn train() -> Self {
        ForwardOptions { mode: Mode::Train, ..Self::eval() }
    }

    pub fn with_ablation(mut self, ablation: ModalityAblation, use_nei: bool) -> Self {
        self.ablation = ablation;
        self.use_nei = use_nei;
        self
    }

    /// The indicator value fed to the discriminator for this article/caption pair.
    pub fn indicator(&self, article: &ArticleRecord, pair: &ImageCaptionPair) -> f32 {
        if self.use_nei && self.ablation.uses_captions() {
            compute_indicator(&article.body_entities, &pair.caption_entities)
        } else {
            0.0
        }
    }
}

/// Graph handles for every trainable tensor.
#[derive(Clone, Copy, Debug)]
pub struct ParamNodes {
    pub w_art: NodeId,
    pub w_cap: NodeId,
    pub w_vis: NodeId,
    pub l1_w: NodeId,
    pub l1_b: NodeId,
    pub l2_w: NodeId,
    pub l2_b: NodeId,
    pub l3_w: NodeId,
    pub l3_b: NodeId,
}

impl ParamNodes {
    pub fn register<T: Scalar>(g: &mut Graph<T>, p: &DidanParams<T>) -> Self {
        ParamNodes {
            w_art: g.param("w_art", p.w_art.clone()),
            w_cap: g.param("w_cap", p.w_cap.clone()),
            w_vis: g.param("w_vis", p.w_vis.clone()),
            l1_w: g.param("l1.weight", p.l1_w.clone()),
            l1_b: g.param("l1.bias", p.l1_b.clone()),
            l2_w: g.param("l2.weight", p.l2_w.clone()),
            l2_b: g.param("l2.bias", p.l2_b.clone()),
            l3_w: g.param("l3.weight", p.l3_w.clone()),
            l3_b: g.param("l3.bias", p.l3_b.clone()),
        }
    }
}

/// One article paired with the image-caption pairs it is scored against,
/// either its own or a substituted set.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub article: &'a ArticleRecord,
    pub pairs: &'a [ImageCaptionPair],
    pub target: f32,
}

impl<'a> Example<'a> {
    pub fn own(article: &'a ArticleRecord) -> Self {
        Example { article, pairs: &article.pairs, target: article.label.target() }
    }
}

#[derive(Clone, Debug)]
pub struct PairNodes {
    /// `[n_c x n_o]` cosine similarities (full mode only).
    pub similarity: Option<NodeId>,
    /// `[n_c x n_o]` attention; each row is a distribution over objects.
    pub attention: Option<NodeId>,
    /// `[n_c x d_vse]` word-specific image representations.
    pub word_reps: Option<NodeId>,
    pub indicator: f32,
}

#[derive(Clone, Debug)]
pub struct BatchNodes<T: Scalar> {
    pub params: ParamNodes,
    pub article_reps: Vec<NodeId>,
    pub pairs: Vec<Vec<PairNodes>>,
    /// `[n_pairs x (2 d_vse + 1)]`.
    pub fused: NodeId,
    /// `[n_pairs x 1]` per-pair authenticity.
    pub pair_scores: NodeId,
    /// `[n_examples x 1]` per-article authenticity.
    pub article_scores: NodeId,
    pub groups: Vec<Range<usize>>,
    /// Observed batch statistics for the two normalization layers (train mode only).
    pub bn_stats: Vec<BatchStats<T>>,
}

fn matrix<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    t.cast()
}

fn check_dims<T: Scalar>(p: &DidanParams<T>, article: &ArticleRecord, pairs: &[ImageCaptionPair]) -> Result<()> {
    let d = p.dims;
    let bad_sentence = article.sentences.iter().find(|s| s.cols() != d.d_text);
    if let Some(s) = bad_sentence {
        return Err(Error::shape("encode_article", format!("word dim {} vs model d_text {}", s.cols(), d.d_text)));
    }
    for pair in pairs {
        if pair.caption_words.cols() != d.d_text || pair.object_feats.cols() != d.d_image {
            return Err(Error::shape(
                "attend_pair",
                format!(
                    "pair {}: caption dim {} / object dim {} vs model {} / {}",
                    pair.pair_id,
                    pair.caption_words.cols(),
                    pair.object_feats.cols(),
                    d.d_text,
                    d.d_image
                ),
            ));
        }
    }
    Ok(())
}

/// Article representation `[1 x d_vse]`. The projection is linear, so the
/// two-level word average is taken before projecting.
fn article_node<T: Scalar>(g: &mut Graph<T>, pn: &ParamNodes, article: &ArticleRecord) -> Result<NodeId> {
    let d = article.d_text();
    let mut acc = vec![T::zero(); d];
    for s in &article.sentences {
        for (a, &v) in acc.iter_mut().zip(matrix::<T>(s).mean_rows().data()) {
            *a = *a + v;
        }
    }
    let n = T::lit(article.sentences.len() as f64);
    let x = g.input(Tensor::row(acc.into_iter().map(|a| a / n).collect()));
    g.matmul(x, pn.w_art)
}

/// Attention subgraph for one pair; returns the pair nodes and the `[1 x d_vse]` visual slot.
fn visual_node<T: Scalar>(
    g: &mut Graph<T>,
    pn: &ParamNodes,
    dims: &super::ModelDims,
    pair: &ImageCaptionPair,
    ablation: ModalityAblation,
) -> Result<(NodeId, Option<NodeId>, Option<NodeId>, Option<NodeId>)> {
    match ablation {
        ModalityAblation::Full => {
            let words = g.input(matrix(&pair.caption_words));
            let objects = g.input(matrix(&pair.object_feats));
            let cap = g.matmul(words, pn.w_cap)?;
            let vis = g.matmul(objects, pn.w_vis)?;
            let sim = g.cosine_matrix(cap, vis)?;
            let attn = g.softmax_rows(sim);
            let reps = g.matmul(attn, vis)?;
            let v = g.mean_rows(reps);
            Ok((v, Some(sim), Some(attn), Some(reps)))
        }
        ModalityAblation::NoImages => {
            let mean = g.input(matrix(&pair.caption_words.mean_rows()));
            Ok((g.matmul(mean, pn.w_cap)?, None, None, None))
        }
        ModalityAblation::NoCaptions => {
            let mean = g.input(matrix(&pair.object_feats.mean_rows()));
            Ok((g.matmul(mean, pn.w_vis)?, None, None, None))
        }
        ModalityAblation::ArticlesOnly => Ok((g.input(Tensor::zeros(&[1, dims.d_vse])), None, None, None)),
    }
}

/// Builds the forward graph for a batch of examples. Every pair of every
/// example becomes one row of the discriminator batch.
pub fn build_batch_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &DidanParams<T>,
    examples: &[Example<'_>],
    opts: ForwardOptions,
) -> Result<BatchNodes<T>> {
    if examples.is_empty() {
        return Err(Error::Empty("forward batch"));
    }
    let pn = ParamNodes::register(g, params);
    let mut article_reps = Vec::with_capacity(examples.len());
    let mut pairs_out = Vec::with_capacity(examples.len());
    let mut fused_rows = Vec::new();
    let mut groups = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.pairs.is_empty() {
            return Err(Error::Validation(format!("article {} has no image-caption pairs", ex.article.article_id)));
        }
        check_dims(params, ex.article, ex.pairs)?;
        let art = article_node(g, &pn, ex.article)?;
        article_reps.push(art);
        let start = fused_rows.len();
        let mut pair_nodes = Vec::with_capacity(ex.pairs.len());
        for pair in ex.pairs {
            let indicator = opts.indicator(ex.article, pair);
            let (v, similarity, attention, word_reps) = visual_node(g, &pn, &params.dims, pair, opts.ablation)?;
            let b = g.input(Tensor::new(vec![1, 1], vec![T::lit(indicator as f64)])?);
            fused_rows.push(g.concat_last_axis(&[art, v, b])?);
            pair_nodes.push(PairNodes { similarity, attention, word_reps, indicator });
        }
        groups.push(start..fused_rows.len());
        pairs_out.push(pair_nodes);
    }
    let fused = g.concat_rows(&fused_rows)?;

    let mut bn_stats = Vec::new();
    let mut hidden = fused;
    for (w, b, bn) in [(pn.l1_w, pn.l1_b, &params.bn1), (pn.l2_w, pn.l2_b, &params.bn2)] {
        let z = g.matmul(hidden, w)?;
        let z = g.add(z, b)?;
        let a = g.relu(z);
        let stats = match opts.mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Fixed { mean: &bn.running_mean, var: &bn.running_var },
        };
        let (n, observed) = g.batchnorm(a, stats)?;
        bn_stats.extend(observed);
        hidden = n;
    }
    let logits = g.matmul(hidden, pn.l3_w)?;
    let logits = g.add(logits, pn.l3_b)?;
    let pair_scores = g.sigmoid(logits);
    let article_scores = g.noisy_or(pair_scores, &groups)?;
    Ok(BatchNodes { params: pn, article_reps, pairs: pairs_out, fused, pair_scores, article_scores, groups, bn_stats })
}

/// Appends the summed binary cross-entropy of the article scores.
pub fn batch_loss<T: Scalar>(g: &mut Graph<T>, nodes: &BatchNodes<T>, examples: &[Example<'_>]) -> Result<NodeId> {
    let targets: Vec<T> = examples.iter().map(|e| T::lit(e.target as f64)).collect();
    g.bce(nodes.article_scores, &targets)
}

#[derive(Clone, Debug)]
pub struct PairTrace<T: Scalar> {
    pub pair_id: String,
    pub indicator: f32,
    /// `[n_o x n_c]` object-by-word cosine similarities.
    pub similarity: Option<Tensor<T>>,
    /// `[n_o x n_c]`; each column sums to one.
    pub attention: Option<Tensor<T>>,
    /// `[n_c x d_vse]`.
    pub word_reps: Option<Tensor<T>>,
    /// `[1 x (2 d_vse + 1)]`.
    pub fused: Tensor<T>,
    pub score: T,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar> {
    pub article_id: String,
    /// `[1 x d_vse]`.
    pub article_rep: Tensor<T>,
    pub pairs: Vec<PairTrace<T>>,
    pub authenticity: T,
}

/// Extracts per-example traces from an evaluated batch graph.
pub fn traces<T: Scalar>(g: &Graph<T>, nodes: &BatchNodes<T>, examples: &[Example<'_>]) -> Vec<ForwardTrace<T>> {
    let fused = g.value(nodes.fused);
    let scores = g.value(nodes.pair_scores);
    let authenticity = g.value(nodes.article_scores);
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let pairs = nodes.groups[i]
                .clone()
                .zip(&nodes.pairs[i])
                .zip(ex.pairs)
                .map(|((row, pn), pair)| PairTrace {
                    pair_id: pair.pair_id.clone(),
                    indicator: pn.indicator,
                    similarity: pn.similarity.map(|s| g.value(s).transpose()),
                    attention: pn.attention.map(|a| g.value(a).transpose()),
                    word_reps: pn.word_reps.map(|w| g.value(w).clone()),
                    fused: Tensor::row(fused.row_slice(row).to_vec()),
                    score: scores.data()[row],
                })
                .collect();
            ForwardTrace {
                article_id: ex.article.article_id.clone(),
                article_rep: g.value(nodes.article_reps[i]).clone(),
                pairs,
                authenticity: authenticity.data()[i],
            }
        })
        .collect()
}

/// Full forward pass for one article. With `substituted` the article is
/// scored against those pairs instead of its own, and each indicator is
/// computed against this article's body entities.
pub fn forward_article<T: Scalar>(
    record: &ArticleRecord,
    params: &DidanParams<T>,
    substituted: Option<&[ImageCaptionPair]>,
    opts: ForwardOptions,
) -> Result<ForwardTrace<T>> {
    let ex = [Example { article: record, pairs: substituted.unwrap_or(&record.pairs), target: record.label.target() }];
    let mut g = Graph::new();
    let nodes = build_batch_graph(&mut g, params, &ex, opts)?;
    Ok(traces(&g, &nodes, &ex).pop().unwrap())
}

/// Article representation: every word projected, averaged within each
/// sentence, then across sentences. Returns `[1 x d_vse]`.
pub fn encode_article<T: Scalar>(record: &ArticleRecord, params: &DidanParams<T>) -> Result<Tensor<T>> {
    check_dims(params, record, &[])?;
    let mut g = Graph::new();
    let w = g.input(params.w_art.clone());
    let mut sentence_reps = Vec::with_capacity(record.sentences.len());
    for s in &record.sentences {
        let x = g.input(matrix(s));
        let proj = g.matmul(x, w)?;
        sentence_reps.push(g.mean_rows(proj));
    }
    let stacked = g.concat_rows(&sentence_reps)?;
    let a = g.mean_rows(stacked);
    Ok(g.value(a).clone())
}

#[derive(Clone, Debug)]
pub struct PairAttention<T: Scalar> {
    /// `[n_o x n_c]`.
    pub similarity: Tensor<T>,
    /// `[n_o x n_c]`, normalized over objects.
    pub attention: Tensor<T>,
    /// `[n_c x d_vse]`.
    pub word_reps: Tensor<T>,
}

pub fn attend_pair<T: Scalar>(pair: &ImageCaptionPair, params: &DidanParams<T>) -> Result<PairAttention<T>> {
    let d = params.dims;
    if pair.caption_words.cols() != d.d_text || pair.object_feats.cols() != d.d_image {
        return Err(Error::shape("attend_pair", format!("pair {} does not match model dims", pair.pair_id)));
    }
    let mut g = Graph::new();
    let pn = ParamNodes::register(&mut g, params);
    let (_, sim, attn, reps) = visual_node(&mut g, &pn, &d, pair, ModalityAblation::Full)?;
    let (sim, attn, reps) = (sim.unwrap(), attn.unwrap(), reps.unwrap());
    Ok(PairAttention {
        similarity: g.value(sim).transpose(),
        attention: g.value(attn).transpose(),
        word_reps: g.value(reps).clone(),
    })
}

/// Discriminator score of one pair given a precomputed article representation.
/// Only meaningful in eval mode: a single row cannot be batch-normalized.
pub fn score_pair<T: Scalar>(
    article_rep: &Tensor<T>,
    pair: &ImageCaptionPair,
    indicator: f32,
    params: &DidanParams<T>,
    opts: ForwardOptions,
) -> Result<T> {
    let d = params.dims;
    if article_rep.numel() != d.d_vse {
        return Err(Error::shape("score_pair", format!("article rep has {} values, d_vse {}", article_rep.numel(), d.d_vse)));
    }
    if indicator != 0.0 && indicator != 1.0 {
        return Err(Error::Validation(format!("indicator must be 0 or 1, got {indicator}")));
    }
    let mut g = Graph::new();
    let pn = ParamNodes::register(&mut g, params);
    let art = g.input(article_rep.clone().reshape(vec![1, d.d_vse])?);
    let (v, ..) = visual_node(&mut g, &pn, &d, pair, opts.ablation)?;
    let b = g.input(Tensor::new(vec![1, 1], vec![T::lit(indicator as f64)])?);
    let fused = g.concat_last_axis(&[art, v, b])?;
    let mut hidden = fused;
    for (w, bias, bn) in [(pn.l1_w, pn.l1_b, &params.bn1), (pn.l2_w, pn.l2_b, &params.bn2)] {
        let z = g.matmul(hidden, w)?;
        let z = g.add(z, bias)?;
        let a = g.relu(z);
        let stats = match opts.mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Fixed { mean: &bn.running_mean, var: &bn.running_var },
        };
        hidden = g.batchnorm(a, stats)?.0;
    }
    let z = g.matmul(hidden, pn.l3_w)?;
    let z = g.add(z, pn.l3_b)?;
    let s = g.sigmoid(z);
    Ok(g.value(s).data()[0])
}

/// Noisy-OR over pair scores, `1 - prod(1 - p_i)`, in log space with each
/// score clamped to at most `1 - 1e-7`.
pub fn aggregate_authenticity(pair_scores: &[f64]) -> Result<f64> {
    if pair_scores.is_empty() {
        return Err(Error::Empty("pair scores"));
    }
    let cap = 1.0 - PROB_EPS;
    let log_miss: f64 = pair_scores.iter().map(|&p| (-p.min(cap)).ln_1p()).sum();
    Ok(-log_miss.exp_m1())
}

/// Binary cross-entropy of one article score with the probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::entity::EntitySet;
    use crate::model::ModelDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f32> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn record(rng: &mut ChaCha8Rng, d_t: usize, d_i: usize, pairs: usize) -> ArticleRecord {
        ArticleRecord {
            article_id: "a".into(),
            sentences: (0..3).map(|i| mat(rng, i + 1, d_t)).collect(),
            body_entities: EntitySet::from_raw(["London"]),
            pairs: (0..pairs)
                .map(|j| ImageCaptionPair {
                    pair_id: format!("p{j}"),
                    caption_words: mat(rng, 2 + j, d_t),
                    object_feats: mat(rng, 3, d_i),
                    caption_entities: EntitySet::from_raw(if j == 0 { ["london"] } else { ["Paris"] }),
                })
                .collect(),
            label: Label::Real,
        }
    }

    fn toy() -> (ChaCha8Rng, DidanParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = DidanParams::init(ModelDims::new(6, 8, 4).with_hidden(16, 8), &mut rng);
        (rng, p)
    }

    #[test]
    fn aggregate_examples() {
        assert!((aggregate_authenticity(&[0.5, 0.5]).unwrap() - 0.75).abs() < 1e-12);
        assert!((aggregate_authenticity(&[0.9, 0.1, 0.5]).unwrap() - 0.955).abs() < 1e-12);
        assert!((aggregate_authenticity(&[0.37]).unwrap() - 0.37).abs() < 1e-12);
        assert!(aggregate_authenticity(&[]).is_err());
        assert!(aggregate_authenticity(&[1.0]).unwrap() < 1.0);
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.75, 0.0) - 4f64.ln()).abs() < 1e-12);
        assert!(bce_loss(1.0, 1.0) < 1e-6);
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn zero_network_scores_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = record(&mut rng, 6, 8, 1);
        let p = DidanParams::<f64>::zeros(ModelDims::new(6, 8, 4).with_hidden(5, 3));
        let t = forward_article(&r, &p, None, ForwardOptions::eval()).unwrap();
        assert_eq!(t.authenticity, 0.5);
        assert_eq!(t.pairs[0].score, 0.5);
    }

    #[test]
    fn duplicated_pairs_raise_the_score() {
        let (mut rng, p) = toy();
        let mut r = record(&mut rng, 6, 8, 1);
        let single = forward_article(&r, &p, None, ForwardOptions::eval()).unwrap().authenticity;
        r.pairs.push(r.pairs[0].clone());
        let double = forward_article(&r, &p, None, ForwardOptions::eval()).unwrap().authenticity;
        assert!((double - (1.0 - (1.0 - single).powi(2))).abs() < 1e-12);
        assert!(double > single);
    }

    #[test]
    fn article_encoding_weights_sentences_equally() {
        let mut p = DidanParams::<f64>::zeros(ModelDims::new(2, 2, 2));
        p.w_art = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = record(&mut rng, 2, 2, 1);
        let w = vec![0.25f32, -2.0];
        r.sentences = vec![Tensor::row(w.clone()), Tensor::from_rows(&[w.clone(), w.clone(), w.clone()]).unwrap()];
        let a = encode_article(&r, &p).unwrap();
        assert_eq!(a.data(), &[0.25, -2.0]);
    }

    #[test]
    fn batched_article_rep_matches_per_word_projection() {
        let (mut rng, p) = toy();
        let r = record(&mut rng, 6, 8, 2);
        let direct = encode_article(&r, &p).unwrap();
        let traced = forward_article(&r, &p, None, ForwardOptions::eval()).unwrap().article_rep;
        assert!(direct.max_abs_diff(&traced) < 1e-12);
    }

    #[test]
    fn single_object_gets_all_attention() {
        let (mut rng, p) = toy();
        let mut pair = record(&mut rng, 6, 8, 1).pairs.remove(0);
        pair.object_feats = mat(&mut rng, 1, 8);
        let att = attend_pair(&pair, &p).unwrap();
        assert!(att.attention.data().iter().all(|&a| a == 1.0));
        let projected = pair.object_feats.cast::<f64>();
        for l in 0..pair.caption_words.rows() {
            for c in 0..4 {
                let expect: f64 = (0..8).map(|k| projected.at(0, k) * p.w_vis.at(k, c)).sum();
                assert!((att.word_reps.at(l, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let (mut rng, p) = toy();
        let pair = record(&mut rng, 6, 8, 1).pairs.remove(0);
        let att = attend_pair(&pair, &p).unwrap();
        assert_eq!(att.attention.shape(), &[3, 2]);
        for l in 0..2 {
            let s: f64 = (0..3).map(|k| att.attention.at(k, l)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_column_with_zero_weights_is_inert() {
        let (mut rng, mut p) = toy();
        let r = record(&mut rng, 6, 8, 1);
        let b_row = p.dims.fused() - 1;
        for j in 0..p.dims.hidden1 {
            let idx = b_row * p.dims.hidden1 + j;
            p.l1_w.data_mut()[idx] = 0.0;
        }
        let a = encode_article(&r, &p).unwrap();
        let s0 = score_pair(&a, &r.pairs[0], 0.0, &p, ForwardOptions::eval()).unwrap();
        let s1 = score_pair(&a, &r.pairs[0], 1.0, &p, ForwardOptions::eval()).unwrap();
        assert_eq!(s0, s1);
        assert!(score_pair(&a, &r.pairs[0], 0.5, &p, ForwardOptions::eval()).is_err());
    }

    #[test]
    fn score_pair_composes_to_forward_article() {
        let (mut rng, p) = toy();
        let r = record(&mut rng, 6, 8, 3);
        let opts = ForwardOptions::eval();
        let t = forward_article(&r, &p, None, opts).unwrap();
        let a = encode_article(&r, &p).unwrap();
        let scores: Vec<f64> = r
            .pairs
            .iter()
            .map(|pair| score_pair(&a, pair, opts.indicator(&r, pair), &p, opts).unwrap())
            .collect();
        for (s, pt) in scores.iter().zip(&t.pairs) {
            assert!((s - pt.score).abs() < 1e-12);
        }
        assert!((aggregate_authenticity(&scores).unwrap() - t.authenticity).abs() < 1e-12);
        assert_eq!(t.pairs[0].indicator, 1.0);
        assert_eq!(t.pairs[1].indicator, 0.0);
    }

    #[test]
    fn ablations_zero_the_indicator_where_required() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = record(&mut rng, 6, 8, 1);
        for (ab, nei, expect) in [
            (ModalityAblation::Full, true, 1.0),
            (ModalityAblation::Full, false, 0.0),
            (ModalityAblation::NoImages, true, 1.0),
            (ModalityAblation::NoCaptions, true, 0.0),
            (ModalityAblation::ArticlesOnly, true, 0.0),
        ] {
            let opts = ForwardOptions::eval().with_ablation(ab, nei);
            assert_eq!(opts.indicator(&r, &r.pairs[0]), expect, "{ab:?}");
        }
    }

    #[test]
    fn articles_only_visual_slot_is_zero() {
        let (mut rng, p) = toy();
        let r = record(&mut rng, 6, 8, 1);
        let opts = ForwardOptions::eval().with_ablation(ModalityAblation::ArticlesOnly, true);
        let t = forward_article(&r, &p, None, opts).unwrap();
        let fused = t.pairs[0].fused.data();
        assert!(fused[4..].iter().all(|&v| v == 0.0));
        assert!(t.pairs[0].attention.is_none());
    }

    #[test]
    fn substituted_pairs_recompute_the_indicator() {
        let (mut rng, p) = toy();
        let a = record(&mut rng, 6, 8, 1);
        let mut b = record(&mut rng, 6, 8, 1);
        b.body_entities = EntitySet::from_raw(["Berlin"]);
        let t = forward_article(&b, &p, Some(&a.pairs), ForwardOptions::eval()).unwrap();
        assert_eq!(t.pairs[0].indicator, 0.0);
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let (mut rng, p) = toy();
        let r = record(&mut rng, 6, 8, 1);
        assert!(forward_article(&r, &p, None, ForwardOptions::train()).is_err());
        let r2 = record(&mut rng, 6, 8, 2);
        assert!(forward_article(&r2, &p, None, ForwardOptions::train()).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (mut rng, p) = toy();
        let r = record(&mut rng, 5, 8, 1);
        let err = forward_article(&r, &p, None, ForwardOptions::eval()).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "encode_article", .. }), "{err}");
    }
}
