//! Minibatch assembly with mismatch negatives and the optimization loop.

use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{ArticleRecord, ImageCaptionPair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{
    batch_loss, build_batch_graph, DidanDetector, DidanParams, Example, ForwardOptions, ModalityAblation, ModelDims,
    DECISION_THRESHOLD,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the training pool made of generated articles, in `[0, 1]`.
    pub generated_fraction: f64,
    pub use_mismatch: bool,
    pub use_nei: bool,
    pub modality_ablation: ModalityAblation,
    /// Mismatch negatives per real article; ignored unless `use_mismatch`.
    pub negatives_per_positive: usize,
    pub d_vse: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            generated_fraction: 0.5,
            use_mismatch: true,
            use_nei: true,
            modality_ablation: ModalityAblation::Full,
            negatives_per_positive: 1,
            d_vse: 512,
            hidden1: 512,
            hidden2: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.generated_fraction) {
            return bad(format!("generated_fraction must lie in [0, 1], got {}", self.generated_fraction));
        }
        if self.d_vse == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return bad("d_vse, hidden1 and hidden2 must be positive".into());
        }
        Ok(())
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions::train().with_ablation(self.modality_ablation, self.use_nei)
    }

    fn mismatch_k(&self) -> usize {
        if self.use_mismatch {
            self.negatives_per_positive
        } else {
            0
        }
    }
}

/// An article, the pairs it is scored against, and the resulting label.
#[derive(Clone, Copy, Debug)]
pub struct TrainExample<'a> {
    pub article: &'a ArticleRecord,
    pub pairs: &'a [ImageCaptionPair],
    /// The article whose pairs were borrowed, for mismatch negatives.
    pub donor: Option<&'a ArticleRecord>,
    pub target: f32,
}

impl<'a> TrainExample<'a> {
    pub fn own(article: &'a ArticleRecord) -> Self {
        TrainExample { article, pairs: &article.pairs, donor: None, target: article.label.target() }
    }

    pub fn as_example(&self) -> Example<'a> {
        Example { article: self.article, pairs: self.pairs, target: self.target }
    }
}

/// For every real article in `batch`, `k` negatives pairing it with the full
/// pair set of a uniformly chosen different article of the same batch.
pub fn sample_mismatch_negatives<'a, R: Rng + ?Sized>(
    batch: &[&'a ArticleRecord],
    k: usize,
    rng: &mut R,
) -> Result<Vec<TrainExample<'a>>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if batch.len() < 2 {
        return Err(Error::Config(format!("mismatch sampling needs at least 2 articles per batch, got {}", batch.len())));
    }
    let mut out = Vec::with_capacity(batch.len() * k);
    for (i, article) in batch.iter().enumerate() {
        if !article.label.is_real() {
            continue;
        }
        for _ in 0..k {
            let mut j = rng.random_range(0..batch.len() - 1);
            if j >= i {
                j += 1;
            }
            let donor = batch[j];
            out.push(TrainExample { article, pairs: &donor.pairs, donor: Some(donor), target: 0.0 });
        }
    }
    Ok(out)
}

/// Own-pair examples for every record followed by mismatch negatives when enabled.
pub fn build_batch<'a, R: Rng + ?Sized>(
    records: &[&'a ArticleRecord],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TrainExample<'a>>> {
    if records.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut out: Vec<TrainExample<'a>> = records.iter().map(|r| TrainExample::own(r)).collect();
    out.extend(sample_mismatch_negatives(records, config.mismatch_k(), rng)?);
    if out.iter().all(|e| e.target == 1.0) {
        warn!("batch of {} examples has only positives; there is no learning signal", out.len());
    } else if out.iter().all(|e| e.target == 0.0) {
        warn!("batch of {} examples has only negatives; there is no learning signal", out.len());
    }
    Ok(out)
}

/// Picks the training pool: every usable real article plus enough generated
/// ones that they make up `fraction` of the pool. If generated articles run
/// short, real articles are subsampled instead.
pub fn select_pool<'a, R: Rng + ?Sized>(
    records: &'a [ArticleRecord],
    fraction: f64,
    rng: &mut R,
) -> Vec<&'a ArticleRecord> {
    let mut real: Vec<usize> = (0..records.len()).filter(|&i| records[i].label.is_real()).collect();
    let mut generated: Vec<usize> = (0..records.len()).filter(|&i| !records[i].label.is_real()).collect();
    real.shuffle(rng);
    generated.shuffle(rng);
    let (n_real, n_gen) = if fraction <= 0.0 {
        (real.len(), 0)
    } else if fraction >= 1.0 {
        (0, generated.len())
    } else {
        let want_gen = (fraction / (1.0 - fraction) * real.len() as f64).round() as usize;
        if want_gen <= generated.len() {
            (real.len(), want_gen)
        } else {
            let n_real = ((1.0 - fraction) / fraction * generated.len() as f64).round() as usize;
            (n_real.min(real.len()), generated.len())
        }
    };
    let mut pool: Vec<usize> = real.into_iter().take(n_real).chain(generated.into_iter().take(n_gen)).collect();
    // Restore manifest order so the epoch shuffle alone decides batch composition.
    pool.sort_unstable();
    pool.into_iter().map(|i| &records[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    /// Loss averaged per example.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy, or the
    /// last epoch when no validation split is given.
    pub params: DidanParams<f32>,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub pool_size: usize,
}

impl TrainOutcome {
    pub fn detector(&self, config: &TrainConfig) -> DidanDetector {
        DidanDetector { params: self.params.clone(), ablation: config.modality_ablation, use_nei: config.use_nei }
    }
}

/// Splits shuffled indices into batches, folding a trailing singleton into the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() < 2) {
        let n = order.len();
        out.pop();
        let last = out.pop().unwrap();
        let start = n - last.len() - 1;
        out.push(&order[start..]);
    }
    out
}

/// Parameters plus optimizer state, suitable for resuming.
pub fn training_checkpoint(params: &DidanParams<f32>, adam: &Adam<f32>, epoch: usize) -> Checkpoint {
    let mut ck = params.to_checkpoint();
    ck.insert("adam.step", Tensor::scalar(adam.step_count() as f32));
    ck.insert("train.epoch", Tensor::scalar(epoch as f32));
    for (name, m, v) in adam.iter_moments() {
        ck.insert(format!("adam.m.{name}"), m.clone());
        ck.insert(format!("adam.v.{name}"), v.clone());
    }
    ck
}

/// Mean loss and accuracy of eval-mode scores on records with their own pairs.
pub fn evaluate_loss(detector: &DidanDetector, records: &[ArticleRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let scores = detector.score_all(records)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, &p) in records.iter().zip(&scores) {
        let y = r.label.target() as f64;
        loss += crate::model::bce_loss(p, y);
        correct += usize::from((p >= DECISION_THRESHOLD) == r.label.is_real());
    }
    let n = records.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains a detector end to end. Deterministic for a given seed: the single
/// generator drives initialization, pool selection, shuffling and donors.
///
/// When `checkpoint_dir` is set it is created if needed and `epoch_NNN.ddn`
/// is written there after every epoch.
pub fn train(
    train_records: &[ArticleRecord],
    val_records: Option<&[ArticleRecord]>,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train_records.first().ok_or(Error::Empty("training split"))?;
    let (d_text, d_image) = (first.d_text(), first.d_image());
    for r in train_records.iter().chain(val_records.into_iter().flatten()) {
        r.validate(d_text, d_image)?;
    }
    let dims = ModelDims::new(d_text, d_image, config.d_vse).with_hidden(config.hidden1, config.hidden2);

    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = DidanParams::<f32>::init(dims, &mut rng);
    let pool = select_pool(train_records, config.generated_fraction, &mut rng);
    if pool.len() < 2 {
        return Err(Error::Config(format!("training pool has {} articles, need at least 2", pool.len())));
    }
    info!(
        "training on {} articles ({} generated), {} epochs, batch {}",
        pool.len(),
        pool.iter().filter(|r| !r.label.is_real()).count(),
        config.epochs,
        config.batch_size
    );

    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let opts = config.forward_options();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, DidanParams<f32>)> = None;
    let mut order: Vec<usize> = (0..pool.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_examples = 0usize;
        let mut correct = 0usize;
        for (b, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
            let records: Vec<&ArticleRecord> = idx.iter().map(|&i| pool[i]).collect();
            let batch = build_batch(&records, config, &mut rng)?;
            let examples: Vec<Example<'_>> = batch.iter().map(TrainExample::as_example).collect();
            let mut g = Graph::new();
            let nodes = build_batch_graph(&mut g, &params, &examples, opts)?;
            let loss = batch_loss(&mut g, &nodes, &examples)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                let ids: Vec<&str> = records.iter().map(|r| r.article_id.as_str()).collect();
                return Err(Error::Numerical(format!(
                    "loss is {value} at epoch {epoch}, batch {b} (articles {})",
                    ids.join(", ")
                )));
            }
            let grads = g.backward(loss)?;
            adam.step(&mut params, &grads)?;
            params.bn1.update(&nodes.bn_stats[0]);
            params.bn2.update(&nodes.bn_stats[1]);
            if !params.is_finite() {
                return Err(Error::Numerical(format!("parameters became non-finite at epoch {epoch}, batch {b}")));
            }
            loss_sum += value;
            n_examples += examples.len();
            let scores = g.value(nodes.article_scores).data();
            correct += examples
                .iter()
                .zip(scores)
                .filter(|(e, &p)| (p as f64 >= DECISION_THRESHOLD) == (e.target == 1.0))
                .count();
        }
        let train_m = EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / n_examples as f64,
            accuracy: correct as f64 / n_examples as f64,
        };
        debug!("epoch {epoch}: train loss {:.5} acc {:.4}", train_m.loss, train_m.accuracy);
        metrics.push(train_m);

        let score = match val_records {
            Some(val) => {
                let det = DidanDetector { params: params.clone(), ablation: config.modality_ablation, use_nei: config.use_nei };
                let (loss, accuracy) = evaluate_loss(&det, val)?;
                info!("epoch {epoch}: val loss {loss:.5} acc {accuracy:.4}");
                metrics.push(EpochMetrics { epoch, split: "val".into(), loss, accuracy });
                accuracy
            }
            None => epoch as f64,
        };
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, params.clone()));
        }
        if let Some(dir) = checkpoint_dir {
            training_checkpoint(&params, &adam, epoch).save(&dir.join(format!("epoch_{epoch:03}.ddn")))?;
        }
    }

    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, 0),
    };
    Ok(TrainOutcome { params, best_epoch, metrics, pool_size: pool.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::entity::EntitySet;

    fn article(id: usize, label: Label) -> ArticleRecord {
        let v = id as f32 + 1.0;
        ArticleRecord {
            article_id: format!("a{id}"),
            sentences: vec![Tensor::row(vec![v, -v])],
            body_entities: EntitySet::from_raw([format!("e{id}")]),
            pairs: vec![ImageCaptionPair {
                pair_id: format!("a{id}-0"),
                caption_words: Tensor::row(vec![v, 0.5]),
                object_feats: Tensor::row(vec![1.0, v, 0.0]),
                caption_entities: EntitySet::from_raw([format!("e{id}")]),
            }],
            label,
        }
    }

    fn corpus(n: usize) -> Vec<ArticleRecord> {
        (0..n).map(|i| article(i, if i % 2 == 0 { Label::Real } else { Label::Generated })).collect()
    }

    #[test]
    fn two_article_batch_swaps_pairs() {
        let (a, b) = (article(0, Label::Real), article(1, Label::Real));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let neg = sample_mismatch_negatives(&[&a, &b], 1, &mut rng).unwrap();
        assert_eq!(neg.len(), 2);
        assert_eq!(neg[0].pairs[0].pair_id, "a1-0");
        assert_eq!(neg[1].pairs[0].pair_id, "a0-0");
        assert!(neg.iter().all(|e| e.target == 0.0));
        assert!(sample_mismatch_negatives(&[&a, &b], 0, &mut rng).unwrap().is_empty());
        assert!(sample_mismatch_negatives(&[&a], 1, &mut rng).is_err());
    }

    #[test]
    fn donor_is_never_self() {
        let recs: Vec<ArticleRecord> = (0..8).map(|i| article(i, Label::Real)).collect();
        let refs: Vec<&ArticleRecord> = recs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut seen = vec![[false; 8]; 8];
        for _ in 0..1000 {
            for e in sample_mismatch_negatives(&refs, 1, &mut rng).unwrap() {
                let donor = e.donor.unwrap();
                assert!(!std::ptr::eq(donor, e.article));
                let (i, j) = (refs.iter().position(|r| std::ptr::eq(*r, e.article)).unwrap(), refs.iter().position(|r| std::ptr::eq(*r, donor)).unwrap());
                seen[i][j] = true;
            }
        }
        for (i, row) in seen.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                assert_eq!(s, i != j, "({i},{j})");
            }
        }
    }

    #[test]
    fn generated_articles_get_no_mismatch_negatives() {
        let (a, g) = (article(0, Label::Real), article(1, Label::Generated));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neg = sample_mismatch_negatives(&[&a, &g], 3, &mut rng).unwrap();
        assert_eq!(neg.len(), 3);
        assert!(neg.iter().all(|e| e.article.article_id == "a0"));
    }

    #[test]
    fn batch_regimes() {
        let recs = corpus(4);
        let refs: Vec<&ArticleRecord> = recs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TrainConfig { use_mismatch: false, ..TrainConfig::default() };
        let b = build_batch(&refs, &cfg, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.iter().filter(|e| e.target == 1.0).count(), 2);
        assert!(b.iter().all(|e| e.donor.is_none()));
        let b = build_batch(&refs, &TrainConfig::default(), &mut rng).unwrap();
        assert_eq!(b.len(), 6);
        assert!(build_batch(&[], &cfg, &mut rng).is_err());
    }

    #[test]
    fn pool_respects_generated_fraction() {
        let recs = corpus(40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let count = |p: &[&ArticleRecord]| p.iter().filter(|r| !r.label.is_real()).count();
        let p0 = select_pool(&recs, 0.0, &mut rng);
        assert_eq!((p0.len(), count(&p0)), (20, 0));
        let p25 = select_pool(&recs, 0.25, &mut rng);
        assert_eq!((p25.len(), count(&p25)), (27, 7));
        let p50 = select_pool(&recs, 0.5, &mut rng);
        assert_eq!((p50.len(), count(&p50)), (40, 20));
        let p75 = select_pool(&recs, 0.75, &mut rng);
        assert_eq!((p75.len(), count(&p75)), (27, 20));
    }

    #[test]
    fn batching_avoids_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.01, "bogus": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"modality_ablation": "no_images", "epochs": 3}"#).unwrap();
        assert_eq!(c.modality_ablation, ModalityAblation::NoImages);
        assert_eq!(c.batch_size, 32);
        assert!(TrainConfig { batch_size: 1, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { generated_fraction: 1.5, ..c }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let recs = corpus(6);
        let cfg = TrainConfig { lr: 0.0, epochs: 3, batch_size: 4, d_vse: 3, hidden1: 5, hidden2: 4, ..TrainConfig::default() };
        let out = train(&recs, None, &cfg, None).unwrap();
        let fresh = DidanParams::<f32>::init(out.params.dims, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        assert_eq!(out.params.w_art, fresh.w_art);
        assert_eq!(out.params.l1_w, fresh.l1_w);
        assert_eq!(out.params.l3_b, fresh.l3_b);
    }

    #[test]
    fn training_is_deterministic_and_writes_checkpoints() {
        let recs = corpus(4);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, d_vse: 3, hidden1: 5, hidden2: 4, ..TrainConfig::default() };
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            train(&recs, Some(&recs), &cfg, Some(d.path())).unwrap();
        }
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("epoch_001.ddn")).unwrap();
        let (a, b) = (read(&dirs[0]), read(&dirs[1]));
        assert_eq!(a, b);
        let ck = Checkpoint::from_bytes(&a, Path::new("epoch_001.ddn")).unwrap();
        assert_eq!(ck.require("adam.step").unwrap().data(), &[1.0]);
        assert!(ck.get("adam.m.l1.weight").is_some());
    }
}
