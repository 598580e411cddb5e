//! Canonical correlation baseline between article features and the
//! concatenated image and caption features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::checkpoint::Checkpoint;
use crate::data::ArticleRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_COMPONENTS: usize = 64;
pub const DEFAULT_RIDGE: f64 = 1e-3;
/// Guards the cosine denominator so a view equal to its training mean scores 0.
const SCORE_EPS: f64 = 1e-12;

/// One `(article, image ‖ caption)` view pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// One view pair per image-caption pair of `record`. The article view is the
/// two-level mean of raw word embeddings; the other view is the mean object
/// feature followed by the mean caption word.
pub fn build_views(record: &ArticleRecord) -> Vec<ViewPair> {
    let a: Vec<f64> = record.mean_word_embedding().into_iter().map(f64::from).collect();
    record
        .pairs
        .iter()
        .map(|p| {
            let b = p
                .object_feats
                .mean_rows()
                .data()
                .iter()
                .chain(p.caption_words.mean_rows().data())
                .map(|&v| v as f64)
                .collect();
            ViewPair { a: a.clone(), b }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcaModel {
    pub mean_a: DVector<f64>,
    pub mean_b: DVector<f64>,
    /// `[d_a x r]`; columns whiten the (regularized) article view.
    pub u: DMatrix<f64>,
    /// `[d_b x r]`.
    pub v: DMatrix<f64>,
    /// Canonical correlations, descending, within `[0, 1]`.
    pub rho: Vec<f64>,
    /// Scores at or above this are classified as real.
    pub threshold: f64,
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, n: usize, d: usize) -> DMatrix<f64> {
    let data: Vec<f64> = rows.flatten().collect();
    DMatrix::from_row_slice(n, d, &data)
}

fn inv_sqrt(c: &DMatrix<f64>, view: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > max * 1e-12) || !min.is_finite() {
        return Err(Error::Cca(format!(
            "{view} covariance is rank deficient (eigenvalues in [{min:.3e}, {max:.3e}]); increase the ridge"
        )));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Ridge-regularized CCA. Keeps `min(r, d_a, d_b)` components.
pub fn fit_cca(views: &[ViewPair], r: usize, ridge: f64) -> Result<CcaModel> {
    let first = views.first().ok_or(Error::Empty("cca views"))?;
    let (n, da, db) = (views.len(), first.a.len(), first.b.len());
    if r == 0 {
        return Err(Error::Cca("need at least one component".into()));
    }
    if n < r.min(da).min(db) + 1 || n < 2 {
        return Err(Error::Cca(format!("{n} samples is too few for {r} components")));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Cca(format!("ridge must be non-negative, got {ridge}")));
    }
    if views.iter().any(|v| v.a.len() != da || v.b.len() != db) {
        return Err(Error::shape("fit_cca", "view widths differ between samples"));
    }
    let a = stack(views.iter().map(|v| v.a.clone()), n, da);
    let b = stack(views.iter().map(|v| v.b.clone()), n, db);
    let mean_a = a.row_mean().transpose();
    let mean_b = b.row_mean().transpose();
    let ac = DMatrix::from_fn(n, da, |i, j| a[(i, j)] - mean_a[j]);
    let bc = DMatrix::from_fn(n, db, |i, j| b[(i, j)] - mean_b[j]);
    let scale = 1.0 / (n as f64 - 1.0);
    let caa = ac.transpose() * &ac * scale + DMatrix::identity(da, da) * ridge;
    let cbb = bc.transpose() * &bc * scale + DMatrix::identity(db, db) * ridge;
    let cab = ac.transpose() * &bc * scale;

    let wa = inv_sqrt(&caa, "article view")?;
    let wb = inv_sqrt(&cbb, "image-caption view")?;
    let t = &wa * cab * &wb;
    let svd = t.svd(true, true);
    let (uu, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let r = r.min(da).min(db).min(order.len());
    let keep = &order[..r];
    let u = &wa * DMatrix::from_fn(da, r, |i, j| uu[(i, keep[j])]);
    let v = &wb * DMatrix::from_fn(db, r, |i, j| vt[(keep[j], i)]);
    let rho = keep.iter().map(|&k| svd.singular_values[k].clamp(0.0, 1.0)).collect();
    Ok(CcaModel { mean_a, mean_b, u, v, rho, threshold: 0.0 })
}

impl CcaModel {
    pub fn components(&self) -> usize {
        self.rho.len()
    }

    fn project(&self, pair: &ViewPair) -> Result<(DVector<f64>, DVector<f64>)> {
        if pair.a.len() != self.mean_a.len() || pair.b.len() != self.mean_b.len() {
            return Err(Error::shape(
                "cca_score",
                format!(
                    "views of width {}/{} vs model {}/{}",
                    pair.a.len(),
                    pair.b.len(),
                    self.mean_a.len(),
                    self.mean_b.len()
                ),
            ));
        }
        let a = DVector::from_column_slice(&pair.a) - &self.mean_a;
        let b = DVector::from_column_slice(&pair.b) - &self.mean_b;
        Ok((self.u.tr_mul(&a), self.v.tr_mul(&b)))
    }

    /// Correlation-weighted cosine between the two projected views.
    pub fn score_views(&self, pair: &ViewPair) -> Result<f64> {
        let (pa, pb) = self.project(pair)?;
        let dot: f64 = self.rho.iter().zip(pa.iter().zip(pb.iter())).map(|(r, (x, y))| r * x * y).sum();
        Ok(dot / (pa.norm() * pb.norm() + SCORE_EPS))
    }

    pub fn predict(&self, record: &ArticleRecord) -> Result<bool> {
        Ok(cca_score(self, record)? >= self.threshold)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mat = |m: &DMatrix<f64>| {
            let rows: Vec<f32> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)] as f32)).collect();
            Tensor::new(vec![m.nrows(), m.ncols()], rows).unwrap()
        };
        let mut ck = Checkpoint::new();
        ck.insert("cca.mean_a", Tensor::row(f(self.mean_a.as_slice())));
        ck.insert("cca.mean_b", Tensor::row(f(self.mean_b.as_slice())));
        ck.insert("cca.u", mat(&self.u));
        ck.insert("cca.v", mat(&self.v));
        ck.insert("cca.rho", Tensor::row(f(&self.rho)));
        ck.insert("cca.threshold", Tensor::scalar(self.threshold as f32));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let vec = |n: &str| ck.require(n).map(|t| t.data().iter().map(|&x| x as f64).collect::<Vec<f64>>());
        let mat = |n: &str| -> Result<DMatrix<f64>> {
            let t = ck.require(n)?;
            if t.rank() != 2 {
                return Err(Error::Validation(format!("{n} must be a matrix, got shape {:?}", t.shape())));
            }
            let data: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
            Ok(DMatrix::from_row_slice(t.rows(), t.cols(), &data))
        };
        let model = CcaModel {
            mean_a: DVector::from_vec(vec("cca.mean_a")?),
            mean_b: DVector::from_vec(vec("cca.mean_b")?),
            u: mat("cca.u")?,
            v: mat("cca.v")?,
            rho: vec("cca.rho")?,
            threshold: vec("cca.threshold")?.first().copied().unwrap_or(0.0),
        };
        let r = model.rho.len();
        if model.u.nrows() != model.mean_a.len()
            || model.v.nrows() != model.mean_b.len()
            || model.u.ncols() != r
            || model.v.ncols() != r
        {
            return Err(Error::Validation("cca entries have inconsistent shapes".into()));
        }
        Ok(model)
    }
}

/// Mean of the pair scores of `record`.
pub fn cca_score(model: &CcaModel, record: &ArticleRecord) -> Result<f64> {
    let views = build_views(record);
    if views.is_empty() {
        return Err(Error::Validation(format!("article {} has no image-caption pairs", record.article_id)));
    }
    let mut total = 0.0;
    for v in &views {
        total += model.score_views(v)?;
    }
    Ok(total / views.len() as f64)
}

/// Threshold maximizing accuracy of the rule `score >= t => real`, returned
/// with that accuracy. Among equally good thresholds the midpoint of the
/// first optimal interval is chosen; an unbounded interval is closed one
/// unit beyond the extreme score.
pub fn calibrate_threshold(scores: &[f64], is_real: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != is_real.len() {
        return Err(Error::shape("calibrate_threshold", format!("{} scores, {} labels", scores.len(), is_real.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite calibration score".into()));
    }
    let n_real = is_real.iter().filter(|&&r| r).count();
    if n_real == 0 || n_real == scores.len() {
        return Err(Error::Cca("calibration split contains a single class".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Distinct values with per-value class counts.
    let mut values: Vec<(f64, usize, usize)> = Vec::new();
    for &i in &idx {
        match values.last_mut() {
            Some((v, r, g)) if *v == scores[i] => {
                if is_real[i] {
                    *r += 1
                } else {
                    *g += 1
                }
            }
            _ => values.push((scores[i], usize::from(is_real[i]), usize::from(!is_real[i]))),
        }
    }
    // Cut c places the threshold between values[c-1] and values[c];
    // correct = generated below the cut + real at or above it.
    let mut correct = Vec::with_capacity(values.len() + 1);
    let mut c = n_real;
    correct.push(c);
    for &(_, r, g) in &values {
        c = c + g - r;
        correct.push(c);
    }
    let best = *correct.iter().max().unwrap();
    let start = correct.iter().position(|&c| c == best).unwrap();
    let end = start + correct[start..].iter().take_while(|&&c| c == best).count() - 1;
    let lo = if start == 0 { values[0].0 - 1.0 } else { values[start - 1].0 };
    let hi = if end == values.len() { values[values.len() - 1].0 + 1.0 } else { values[end].0 };
    Ok(((lo + hi) / 2.0, best as f64 / scores.len() as f64))
}

/// Fits on the real articles of `train` and calibrates the threshold on `val`.
pub fn fit_and_calibrate(train: &[ArticleRecord], val: &[ArticleRecord], r: usize, ridge: f64) -> Result<CcaModel> {
    let views: Vec<ViewPair> = train.iter().filter(|x| x.label.is_real()).flat_map(build_views).collect();
    let mut model = fit_cca(&views, r, ridge)?;
    let scores = val.iter().map(|x| cca_score(&model, x)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = val.iter().map(|x| x.label.is_real()).collect();
    model.threshold = calibrate_threshold(&scores, &labels)?.0;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageCaptionPair, Label};
    use crate::entity::EntitySet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    /// Cholesky factor `L` with `L L^T = c`.
    fn cholesky(c: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = c.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    l[i][i] = (c[i][i] - s).sqrt();
                } else {
                    l[i][j] = (c[i][j] - s) / l[j][j];
                }
            }
        }
        l
    }

    /// Solves `L X = B` for lower-triangular `L`, column by column.
    fn forward_solve(l: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, m) = (l.len(), b[0].len());
        let mut x = vec![vec![0.0; m]; n];
        for col in 0..m {
            for i in 0..n {
                let s: f64 = (0..i).map(|k| l[i][k] * x[k][col]).sum();
                x[i][col] = (b[i][col] - s) / l[i][i];
            }
        }
        x
    }

    fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
    }

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    /// Canonical correlations from `eig(K K^T)` with `K = L_a^{-1} C_ab L_b^{-T}`.
    fn oracle_correlations(views: &[ViewPair], ridge: f64) -> Vec<f64> {
        let n = views.len() as f64;
        let (da, db) = (views[0].a.len(), views[0].b.len());
        let mean = |f: &dyn Fn(&ViewPair) -> &Vec<f64>, d: usize| -> Vec<f64> {
            (0..d).map(|j| views.iter().map(|v| f(v)[j]).sum::<f64>() / n).collect()
        };
        let (ma, mb) = (mean(&|v| &v.a, da), mean(&|v| &v.b, db));
        let cov = |x: &dyn Fn(&ViewPair) -> &Vec<f64>, mx: &[f64], y: &dyn Fn(&ViewPair) -> &Vec<f64>, my: &[f64], ridge: f64| {
            let (dx, dy) = (mx.len(), my.len());
            (0..dx)
                .map(|i| {
                    (0..dy)
                        .map(|j| {
                            let s: f64 = views.iter().map(|v| (x(v)[i] - mx[i]) * (y(v)[j] - my[j])).sum();
                            s / (n - 1.0) + if i == j { ridge } else { 0.0 }
                        })
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>()
        };
        let caa = cov(&|v| &v.a, &ma, &|v| &v.a, &ma, ridge);
        let cbb = cov(&|v| &v.b, &mb, &|v| &v.b, &mb, ridge);
        let cab = cov(&|v| &v.a, &ma, &|v| &v.b, &mb, 0.0);
        let la = cholesky(&caa);
        let lb = cholesky(&cbb);
        let x = forward_solve(&la, &cab); // L_a^{-1} C_ab
        let k = transpose(&forward_solve(&lb, &transpose(&x))); // (L_b^{-1} X^T)^T
        let kkt: Vec<Vec<f64>> =
            (0..da).map(|i| (0..da).map(|j| (0..db).map(|t| k[i][t] * k[j][t]).sum()).collect()).collect();
        jacobi_eigenvalues(kkt).into_iter().take(da.min(db)).map(|l| l.max(0.0).sqrt()).collect()
    }

    fn random_views(rng: &mut ChaCha8Rng, n: usize, da: usize, db: usize, coupling: f64) -> Vec<ViewPair> {
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..da.min(db)).map(|_| gauss(rng)).collect();
                let a = (0..da).map(|j| coupling * z.get(j).copied().unwrap_or(0.0) + gauss(rng)).collect();
                let b = (0..db).map(|j| coupling * z.get(j).copied().unwrap_or(0.0) + gauss(rng) + 0.3).collect();
                ViewPair { a, b }
            })
            .collect()
    }

    fn rec(words: Vec<Vec<f32>>, pairs: Vec<(Vec<f32>, Vec<f32>)>) -> ArticleRecord {
        ArticleRecord {
            article_id: "x".into(),
            sentences: words.into_iter().map(Tensor::row).collect(),
            body_entities: EntitySet::new(),
            pairs: pairs
                .into_iter()
                .enumerate()
                .map(|(i, (cap, obj))| ImageCaptionPair {
                    pair_id: i.to_string(),
                    caption_words: Tensor::row(cap),
                    object_feats: Tensor::row(obj),
                    caption_entities: EntitySet::new(),
                })
                .collect(),
            label: Label::Real,
        }
    }

    #[test]
    fn views_of_singletons() {
        let r = rec(vec![vec![1.0, 2.0]], vec![(vec![3.0, 4.0], vec![5.0])]);
        let v = build_views(&r);
        assert_eq!(v, vec![ViewPair { a: vec![1.0, 2.0], b: vec![5.0, 3.0, 4.0] }]);
        let r2 = rec(vec![vec![1.0, 2.0], vec![3.0, 0.0]], vec![(vec![0.0, 0.0], vec![1.0]), (vec![1.0, 1.0], vec![2.0])]);
        let v2 = build_views(&r2);
        assert_eq!(v2.len(), 2);
        assert_eq!(v2[0].a, v2[1].a);
        assert_eq!(v2[0].a, vec![2.0, 1.0]);
    }

    #[test]
    fn identical_views_are_perfectly_correlated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let views: Vec<ViewPair> = (0..200)
            .map(|_| {
                let a: Vec<f64> = (0..3).map(|_| gauss(&mut rng)).collect();
                ViewPair { b: a.clone(), a }
            })
            .collect();
        let m = fit_cca(&views, 1, 0.0).unwrap();
        assert!((m.rho[0] - 1.0).abs() < 1e-6, "{}", m.rho[0]);
    }

    #[test]
    fn independent_noise_has_low_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let views = random_views(&mut rng, 500, 2, 2, 0.0);
        let m = fit_cca(&views, 1, DEFAULT_RIDGE).unwrap();
        assert!(m.rho[0] < 0.2, "{}", m.rho[0]);
    }

    #[test]
    fn matches_eigen_oracle_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, da, db, ridge) in [(30, 3, 4, 0.0), (50, 6, 5, 1e-3), (20, 2, 6, 0.1), (45, 4, 4, 0.0)] {
            let views = random_views(&mut rng, n, da, db, 0.9);
            let m = fit_cca(&views, 6, ridge).unwrap();
            let oracle = oracle_correlations(&views, ridge);
            assert_eq!(m.rho.len(), oracle.len());
            for (x, y) in m.rho.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-6, "n={n}: {:?} vs {:?}", m.rho, oracle);
            }
        }
    }

    #[test]
    fn projections_whiten_the_regularized_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let views = random_views(&mut rng, 300, 4, 5, 0.7);
        let ridge = 1e-2;
        let m = fit_cca(&views, 4, ridge).unwrap();
        let n = views.len();
        let a = DMatrix::from_fn(n, 4, |i, j| views[i].a[j] - m.mean_a[j]);
        let caa = a.transpose() * &a / (n as f64 - 1.0) + DMatrix::identity(4, 4) * ridge;
        let w = m.u.transpose() * caa * &m.u;
        assert!((w - DMatrix::identity(4, 4)).abs().max() < 1e-4);
        assert!(m.rho.windows(2).all(|p| p[0] >= p[1]));
        assert!(m.rho.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }

    #[test]
    fn affine_maps_preserve_correlations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let views = random_views(&mut rng, 400, 3, 3, 0.8);
        let base = fit_cca(&views, 3, 0.0).unwrap();
        let map: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 2.0 } else { 0.3 * gauss(&mut rng) }).collect();
        let moved: Vec<ViewPair> = views
            .iter()
            .map(|v| ViewPair {
                a: (0..3).map(|i| (0..3).map(|j| map[i * 3 + j] * v.a[j]).sum::<f64>() + 5.0).collect(),
                b: v.b.clone(),
            })
            .collect();
        let other = fit_cca(&moved, 3, 0.0).unwrap();
        for (x, y) in base.rho.iter().zip(&other.rho) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn rank_deficiency_without_ridge_is_an_error() {
        let views: Vec<ViewPair> = (0..10).map(|i| ViewPair { a: vec![i as f64, 2.0 * i as f64], b: vec![1.0, i as f64] }).collect();
        assert!(matches!(fit_cca(&views, 1, 0.0), Err(Error::Cca(_))));
        assert!(fit_cca(&views, 1, 1e-3).is_ok());
        assert!(fit_cca(&views[..1], 1, 1e-3).is_err());
    }

    #[test]
    fn view_at_the_mean_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let views = random_views(&mut rng, 100, 2, 3, 0.9);
        let m = fit_cca(&views, 2, 1e-3).unwrap();
        let at_mean = ViewPair { a: m.mean_a.as_slice().to_vec(), b: m.mean_b.as_slice().to_vec() };
        assert_eq!(m.score_views(&at_mean).unwrap(), 0.0);
        let matched = views.iter().map(|v| m.score_views(v).unwrap()).sum::<f64>();
        let shuffled = views.iter().zip(views.iter().skip(1)).map(|(x, y)| m.score_views(&ViewPair { a: x.a.clone(), b: y.b.clone() }).unwrap()).sum::<f64>();
        assert!(matched / 100.0 > shuffled / 99.0);
    }

    #[test]
    fn threshold_examples() {
        let (t, acc) = calibrate_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        assert_eq!(acc, 1.0);
        let (_, acc) = calibrate_threshold(&[0.3; 5], &[true, true, true, false, false]).unwrap();
        assert!((acc - 0.6).abs() < 1e-12);
        let (t, acc) = calibrate_threshold(&[0.3; 4], &[true, false, false, false]).unwrap();
        assert!(t > 0.3);
        assert_eq!(acc, 0.75);
        assert!(calibrate_threshold(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = fit_cca(&random_views(&mut rng, 60, 3, 4, 0.5), 2, 1e-3).unwrap();
        m.threshold = 0.125;
        let back = CcaModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.rho.len(), 2);
        assert_eq!(back.threshold, 0.125);
        assert!((back.u.clone() - m.u.clone()).abs().max() < 1e-5 * m.u.abs().max());
    }
}
