//! Accuracy reports and the train-and-evaluate ablation grid.

use log::info;
use serde::{Deserialize, Serialize};

use crate::cca::{cca_score, fit_and_calibrate, CcaModel, DEFAULT_COMPONENTS, DEFAULT_RIDGE};
use crate::data::ArticleRecord;
use crate::error::{Error, Result};
use crate::model::{DidanDetector, ModalityAblation, DECISION_THRESHOLD};
use crate::par;
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// `None` when the class is absent.
    pub accuracy_real: Option<f64>,
    pub accuracy_generated: Option<f64>,
    /// `confusion[true][predicted]`, index 0 generated and 1 real.
    pub confusion: [[usize; 2]; 2],
    pub mean_score_real: Option<f64>,
    pub mean_score_generated: Option<f64>,
    pub threshold: f64,
}

impl EvalReport {
    /// Scores at or above `threshold` are predicted real.
    pub fn from_scores(scores: &[f64], is_real: &[bool], threshold: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("evaluation records"));
        }
        if scores.len() != is_real.len() {
            return Err(Error::shape("evaluate", format!("{} scores, {} labels", scores.len(), is_real.len())));
        }
        let mut confusion = [[0usize; 2]; 2];
        let mut sums = [0.0f64; 2];
        for (&s, &r) in scores.iter().zip(is_real) {
            let t = usize::from(r);
            confusion[t][usize::from(s >= threshold)] += 1;
            sums[t] += s;
        }
        let count = |t: usize| confusion[t][0] + confusion[t][1];
        let rate = |t: usize| (count(t) > 0).then(|| confusion[t][t] as f64 / count(t) as f64);
        let mean = |t: usize| (count(t) > 0).then(|| sums[t] / count(t) as f64);
        Ok(EvalReport {
            n: scores.len(),
            accuracy: (confusion[0][0] + confusion[1][1]) as f64 / scores.len() as f64,
            accuracy_real: rate(1),
            accuracy_generated: rate(0),
            confusion,
            mean_score_real: mean(1),
            mean_score_generated: mean(0),
            threshold,
        })
    }
}

fn labels(records: &[ArticleRecord]) -> Vec<bool> {
    records.iter().map(|r| r.label.is_real()).collect()
}

/// Eval-mode accuracy of a detector at the 0.5 threshold.
pub fn evaluate_accuracy(detector: &DidanDetector, records: &[ArticleRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let scores = detector.score_all(records)?;
    EvalReport::from_scores(&scores, &labels(records), DECISION_THRESHOLD)
}

/// Accuracy of the correlation baseline at its calibrated threshold.
pub fn evaluate_cca(model: &CcaModel, records: &[ArticleRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let scores = par::map(records, |r| cca_score(model, r)).into_iter().collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(&scores, &labels(records), model.threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub use_mismatch: bool,
    pub use_nei: bool,
    pub generated_fraction: f64,
    pub modality: ModalityAblation,
}

impl AblationCell {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            use_mismatch: self.use_mismatch,
            use_nei: self.use_nei,
            generated_fraction: self.generated_fraction,
            modality_ablation: self.modality,
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        format!(
            "mismatch={} nei={} generated={} modality={}",
            self.use_mismatch,
            self.use_nei,
            self.generated_fraction,
            self.modality.name()
        )
    }
}

/// The grid of cells to train. Every listed value of every axis is crossed
/// with every other; all cells share `base` (including its seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMatrix {
    pub base: TrainConfig,
    pub use_mismatch: Vec<bool>,
    pub use_nei: Vec<bool>,
    pub generated_fraction: Vec<f64>,
    pub modality: Vec<ModalityAblation>,
    pub include_cca: bool,
    pub cca_components: usize,
    pub cca_ridge: f64,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        AblationMatrix {
            base: TrainConfig::default(),
            use_mismatch: vec![true],
            use_nei: vec![true],
            generated_fraction: vec![0.5],
            modality: vec![ModalityAblation::Full],
            include_cca: false,
            cca_components: DEFAULT_COMPONENTS,
            cca_ridge: DEFAULT_RIDGE,
        }
    }
}

impl AblationMatrix {
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &use_mismatch in &self.use_mismatch {
            for &use_nei in &self.use_nei {
                for &generated_fraction in &self.generated_fraction {
                    for &modality in &self.modality {
                        out.push(AblationCell { use_mismatch, use_nei, generated_fraction, modality });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: AblationCell,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    /// Record counts of the train, validation and test splits.
    pub split_sizes: [usize; 3],
    pub cells: Vec<CellReport>,
    pub cca: Option<EvalReport>,
}

impl AblationReport {
    pub fn find(&self, pred: impl Fn(&AblationCell) -> bool) -> Option<&CellReport> {
        self.cells.iter().find(|c| pred(&c.cell))
    }
}

/// Trains and evaluates one detector per cell. Cells are independent and run
/// in parallel; each cell's result depends only on its own configuration.
pub fn run_ablation(
    matrix: &AblationMatrix,
    train_records: &[ArticleRecord],
    val_records: &[ArticleRecord],
    test_records: &[ArticleRecord],
) -> Result<AblationReport> {
    let cells = matrix.cells();
    if cells.is_empty() {
        return Err(Error::Config("ablation matrix has no cells".into()));
    }
    for c in &cells {
        c.config(&matrix.base).validate()?;
    }
    let results = par::map(&cells, |cell| -> Result<CellReport> {
        let cfg = cell.config(&matrix.base);
        let outcome = train(train_records, Some(val_records), &cfg, None)?;
        let report = evaluate_accuracy(&outcome.detector(&cfg), test_records)?;
        info!("{}: accuracy {:.4}", cell.label(), report.accuracy);
        Ok(CellReport { cell: *cell, best_epoch: outcome.best_epoch, report })
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let cca = if matrix.include_cca {
        let model = fit_and_calibrate(train_records, val_records, matrix.cca_components, matrix.cca_ridge)?;
        Some(evaluate_cca(&model, test_records)?)
    } else {
        None
    };
    Ok(AblationReport {
        seed: matrix.base.seed,
        split_sizes: [train_records.len(), val_records.len(), test_records.len()],
        cells,
        cca,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_half_scores_predict_real() {
        let r = EvalReport::from_scores(&[0.5; 4], &[true, false, false, false], 0.5).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert_eq!(r.accuracy_real, Some(1.0));
        assert_eq!(r.accuracy_generated, Some(0.0));
        assert_eq!(r.confusion, [[0, 3], [0, 1]]);
    }

    #[test]
    fn oracle_labels_score_perfectly() {
        let labels = [true, false, true, true, false];
        let scores: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let r = EvalReport::from_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.mean_score_real, Some(1.0));
        assert_eq!(r.confusion[0][0] + r.confusion[0][1] + r.confusion[1][0] + r.confusion[1][1], 5);
    }

    #[test]
    fn missing_class_has_no_rate() {
        let r = EvalReport::from_scores(&[0.9, 0.2], &[true, true], 0.5).unwrap();
        assert_eq!(r.accuracy_generated, None);
        assert_eq!(r.mean_score_generated, None);
        assert!(EvalReport::from_scores(&[], &[], 0.5).is_err());
    }

    #[test]
    fn matrix_crosses_every_axis() {
        let m = AblationMatrix {
            use_mismatch: vec![true, false],
            use_nei: vec![true, false],
            generated_fraction: vec![0.25, 0.5],
            modality: ModalityAblation::ALL.to_vec(),
            ..AblationMatrix::default()
        };
        let cells = m.cells();
        assert_eq!(cells.len(), 32);
        assert_eq!(cells[0].config(&m.base).seed, m.base.seed);
    }
}
