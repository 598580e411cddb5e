//! The consistency detector: parameters, forward pass and batch scoring.

mod forward;
mod params;

pub use forward::{
    aggregate_authenticity, attend_pair, batch_loss, bce_loss, build_batch_graph, encode_article, forward_article,
    score_pair, traces, BatchNodes, Example, ForwardOptions, ForwardTrace, ModalityAblation, Mode, PairAttention,
    PairNodes, PairTrace, ParamNodes,
};
pub use params::{BnState, DidanParams, ModelDims, BN_MOMENTUM, OUTPUT_INIT_GAIN};

use crate::checkpoint::Checkpoint;
use crate::data::ArticleRecord;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::par;
use crate::tensor::Tensor;

/// Articles scoring at or above this are classified as human-written.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// A trained model together with the input configuration it was trained under.
#[derive(Clone, Debug)]
pub struct DidanDetector {
    pub params: DidanParams<f32>,
    pub ablation: ModalityAblation,
    pub use_nei: bool,
}

impl DidanDetector {
    pub fn new(params: DidanParams<f32>) -> Self {
        DidanDetector { params, ablation: ModalityAblation::Full, use_nei: true }
    }

    pub fn options(&self) -> ForwardOptions {
        ForwardOptions::eval().with_ablation(self.ablation, self.use_nei)
    }

    pub fn trace(&self, record: &ArticleRecord) -> Result<ForwardTrace<f32>> {
        forward_article(record, &self.params, None, self.options())
    }

    /// Authenticity of one article in eval mode.
    pub fn score(&self, record: &ArticleRecord) -> Result<f64> {
        Ok(self.trace(record)?.authenticity as f64)
    }

    /// Scores many articles. Each is an independent eval-mode graph, so the
    /// result does not depend on the thread count.
    pub fn score_all(&self, records: &[ArticleRecord]) -> Result<Vec<f64>> {
        par::map(records, |r| self.score(r)).into_iter().collect()
    }

    /// Eval-mode scores computed as one batched graph.
    pub fn score_batch(&self, records: &[ArticleRecord]) -> Result<Vec<f64>> {
        let examples: Vec<Example<'_>> = records.iter().map(Example::own).collect();
        let mut g = Graph::new();
        let nodes = build_batch_graph(&mut g, &self.params, &examples, self.options())?;
        Ok(g.value(nodes.article_scores).data().iter().map(|&v| v as f64).collect())
    }

    pub fn predict(&self, record: &ArticleRecord) -> Result<bool> {
        Ok(self.score(record)? >= DECISION_THRESHOLD)
    }

    /// Parameters plus the input configuration under `model.`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        let code = ModalityAblation::ALL.iter().position(|&a| a == self.ablation).unwrap();
        ck.insert("model.modality_ablation", Tensor::scalar(code as f32));
        ck.insert("model.use_nei", Tensor::scalar(if self.use_nei { 1.0 } else { 0.0 }));
        ck
    }

    /// Reads a detector; checkpoints without `model.` entries load as the full model with the indicator on.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let params = DidanParams::from_checkpoint(ck)?;
        let ablation = match ck.get("model.modality_ablation") {
            None => ModalityAblation::Full,
            Some(t) => {
                let code = t.data()[0];
                *ModalityAblation::ALL
                    .iter()
                    .enumerate()
                    .find(|(i, _)| *i as f32 == code)
                    .ok_or_else(|| Error::Validation(format!("unknown modality ablation code {code}")))?
                    .1
            }
        };
        let use_nei = ck.get("model.use_nei").is_none_or(|t| t.data()[0] != 0.0);
        Ok(DidanDetector { params, ablation, use_nei })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detector_checkpoint_keeps_input_configuration() {
        let params = DidanParams::init(ModelDims::new(3, 2, 2).with_hidden(4, 3), &mut ChaCha8Rng::seed_from_u64(0));
        let det = DidanDetector { params, ablation: ModalityAblation::NoCaptions, use_nei: false };
        let back = DidanDetector::from_checkpoint(&det.to_checkpoint()).unwrap();
        assert_eq!(back.ablation, ModalityAblation::NoCaptions);
        assert!(!back.use_nei);
        assert_eq!(back.params, det.params);
        let plain = DidanDetector::from_checkpoint(&det.params.to_checkpoint()).unwrap();
        assert_eq!(plain.ablation, ModalityAblation::Full);
        assert!(plain.use_nei);
    }
}
