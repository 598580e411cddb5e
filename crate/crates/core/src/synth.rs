//! Synthetic articles with a planted text-image consistency signal and a
//! Bayes-optimal reference classifier.
//!
//! A real article draws one latent `z`; its words, caption words and object
//! features are noisy linear images of `z`. A generated article keeps the
//! images and captions of `z` but writes its body from an independent `z'`.
//! Caption entities overlap the body's entities with probability `q_match`
//! (real) or `q_mismatch` (generated). Topics own disjoint entity vocabularies.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_feature_blob, write_manifest, ArticleRecord, ImageCaptionPair, Label, ManifestHeader, PairEntry, RecordEntry,
    MANIFEST_VERSION,
};
use crate::entity::EntitySet;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_articles: usize,
    pub d_text: usize,
    pub d_image: usize,
    pub latent_dim: usize,
    /// Word-level noise scale.
    pub sigma: f64,
    /// Caption word noise as a multiple of `sigma`.
    pub caption_noise: f64,
    /// Object feature noise as a multiple of `sigma`.
    pub object_noise: f64,
    /// Loading of the latent on object features; 0 makes images uninformative.
    pub object_signal: f64,
    /// Inclusive range of sentences per article.
    pub sentences: [usize; 2],
    pub words_per_sentence: usize,
    /// Inclusive range of words per caption.
    pub caption_words: [usize; 2],
    /// Inclusive range of objects per image.
    pub objects: [usize; 2],
    pub n_topics: usize,
    pub entities_per_topic: usize,
    pub body_entities: usize,
    pub q_match: f64,
    pub q_mismatch: f64,
    /// Probability of 1, 2 and 3 image-caption pairs.
    pub pair_distribution: [f64; 3],
    /// Train, validation and test shares.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_articles: 2000,
            d_text: 16,
            d_image: 16,
            latent_dim: 4,
            sigma: 1.0,
            caption_noise: 2.5,
            object_noise: 1.0,
            object_signal: 1.0,
            sentences: [3, 6],
            words_per_sentence: 4,
            caption_words: [3, 6],
            objects: [2, 5],
            n_topics: 8,
            entities_per_topic: 24,
            body_entities: 4,
            q_match: 0.95,
            q_mismatch: 0.05,
            pair_distribution: [0.608, 0.210, 0.182],
            split: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A small training set with a noisy content channel, where entity overlap
    /// carries most of the label information.
    pub fn entity_dominant() -> Self {
        SynthConfig { n_articles: 600, sigma: 1.5, q_match: 0.9, q_mismatch: 0.1, ..Self::default() }
    }

    /// The default config with object features that carry no latent signal.
    pub fn caption_only_signal() -> Self {
        SynthConfig { object_signal: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_articles < 2 {
            return bad("n_articles must be at least 2".into());
        }
        if self.latent_dim == 0 || self.latent_dim > self.d_text.min(self.d_image) {
            return bad(format!("latent_dim must be in 1..={}", self.d_text.min(self.d_image)));
        }
        if !(self.sigma > 0.0) || !(self.caption_noise > 0.0) || !(self.object_noise > 0.0) {
            return bad("noise scales must be positive".into());
        }
        if !self.object_signal.is_finite() {
            return bad("object_signal must be finite".into());
        }
        for (name, [lo, hi]) in [("sentences", self.sentences), ("caption_words", self.caption_words), ("objects", self.objects)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if self.words_per_sentence == 0 {
            return bad("words_per_sentence must be positive".into());
        }
        if !(0.0 <= self.q_mismatch && self.q_mismatch < self.q_match && self.q_match <= 1.0) {
            return bad(format!("need 0 <= q_mismatch < q_match <= 1, got {} and {}", self.q_mismatch, self.q_match));
        }
        if self.n_topics < 2 || self.body_entities == 0 || self.entities_per_topic < self.body_entities {
            return bad("need at least 2 topics and entities_per_topic >= body_entities > 0".into());
        }
        let p = self.pair_distribution;
        if p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!("pair_distribution must be a probability vector, got {p:?}"));
        }
        let s = self.split;
        if s.iter().any(|&x| !(x >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!("split must sum to 1, got {s:?}"));
        }
        Ok(())
    }

    /// Number of records per split, each rounded down to an even count so
    /// every split stays label-balanced.
    pub fn split_sizes(&self) -> [usize; 3] {
        let even = |x: f64| ((x * self.n_articles as f64).floor() as usize) & !1;
        let train = even(self.split[0]);
        let val = even(self.split[1]);
        [train, val, self.n_articles - train - val]
    }
}

/// One split of a generated dataset: the records plus the raw entity strings
/// that were normalized into them.
#[derive(Clone, Debug, Default)]
pub struct SynthSplit {
    pub name: String,
    pub records: Vec<ArticleRecord>,
    pub raw_body_entities: Vec<Vec<String>>,
    pub raw_caption_entities: Vec<Vec<Vec<String>>>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub train: SynthSplit,
    pub val: SynthSplit,
    pub test: SynthSplit,
}

impl SynthDataset {
    pub fn splits(&self) -> [&SynthSplit; 3] {
        [&self.train, &self.val, &self.test]
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `d x k` matrix with orthonormal columns.
fn loadings(rng: &mut ChaCha8Rng, d: usize, k: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, k, |_, _| gauss(rng));
    g.qr().q().columns(0, k).into_owned()
}

const SYLLABLES: [&str; 24] = [
    "ka", "ro", "vel", "in", "mar", "to", "lu", "sen", "da", "bri", "ol", "fen", "ta", "gor", "mi", "ash", "len",
    "du", "pra", "hol", "zi", "nor", "we", "cas",
];

fn capitalized(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn entity_name(rng: &mut ChaCha8Rng) -> String {
    let word = |n: usize, rng: &mut ChaCha8Rng| -> String {
        (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
    };
    let first = word(2, rng);
    let n_last = rng.random_range(2..4);
    let last = word(n_last, rng);
    format!("{} {}", capitalized(&first), capitalized(&last))
}

/// Surface variation that normalizes back to the same entity.
fn surface_form(name: &str, rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..5) {
        0 => name.to_string(),
        1 => name.to_uppercase(),
        2 => format!("{name}."),
        3 => name.replace(' ', "  "),
        _ => format!(" ({name}),"),
    }
}

/// Topic vocabularies with no name shared across topics.
fn entity_pools(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut used = BTreeSet::new();
    (0..cfg.n_topics)
        .map(|_| {
            let mut pool = Vec::with_capacity(cfg.entities_per_topic);
            while pool.len() < cfg.entities_per_topic {
                let n = entity_name(rng);
                if used.insert(n.to_lowercase()) {
                    pool.push(n);
                }
            }
            pool
        })
        .collect()
}

fn pair_count<R: Rng + ?Sized>(dist: &[f64; 3], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    if u < dist[0] {
        1
    } else if u < dist[0] + dist[1] {
        2
    } else {
        3
    }
}

struct Generator {
    cfg: SynthConfig,
    p_text: DMatrix<f64>,
    p_image: DMatrix<f64>,
    pools: Vec<Vec<String>>,
}

struct Generated {
    record: ArticleRecord,
    body_raw: Vec<String>,
    captions_raw: Vec<Vec<String>>,
}

impl Generator {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p_text = loadings(&mut rng, cfg.d_text, cfg.latent_dim);
        let p_image = loadings(&mut rng, cfg.d_image, cfg.latent_dim);
        let pools = entity_pools(cfg, &mut rng);
        Generator { cfg: cfg.clone(), p_text, p_image, pools }
    }

    /// `n` rows of `scale * P z + noise * eps`.
    fn rows(&self, rng: &mut ChaCha8Rng, p: &DMatrix<f64>, z: &DVector<f64>, scale: f64, noise: f64, n: usize) -> Tensor<f32> {
        let mean = p * z * scale;
        let d = p.nrows();
        let data = (0..n).flat_map(|_| (0..d).map(|j| mean[j] + noise * gauss(rng)).collect::<Vec<_>>()).map(|v| v as f32).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn article(&self, index: usize) -> Generated {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64 + 1);
        let label = if index % 2 == 0 { Label::Real } else { Label::Generated };
        let k = cfg.latent_dim;
        let z = DVector::from_fn(k, |_, _| gauss(&mut rng));
        let z_body = match label {
            Label::Real => z.clone(),
            Label::Generated => DVector::from_fn(k, |_, _| gauss(&mut rng)),
        };
        let n_sent = rng.random_range(cfg.sentences[0]..=cfg.sentences[1]);
        let sentences =
            (0..n_sent).map(|_| self.rows(&mut rng, &self.p_text, &z_body, 1.0, cfg.sigma, cfg.words_per_sentence)).collect();

        let topic = rng.random_range(0..cfg.n_topics);
        let pool = &self.pools[topic];
        let body_idx = rand::seq::index::sample(&mut rng, pool.len(), cfg.body_entities).into_vec();
        let body_raw: Vec<String> = body_idx.iter().map(|&i| surface_form(&pool[i], &mut rng)).collect();

        let q = if label.is_real() { cfg.q_match } else { cfg.q_mismatch };
        let n_pairs = pair_count(&cfg.pair_distribution, &mut rng);
        let article_id = format!("s{index:05}");
        let mut pairs = Vec::with_capacity(n_pairs);
        let mut captions_raw = Vec::with_capacity(n_pairs);
        for j in 0..n_pairs {
            let n_words = rng.random_range(cfg.caption_words[0]..=cfg.caption_words[1]);
            let n_obj = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
            let caption_words = self.rows(&mut rng, &self.p_text, &z, 1.0, cfg.sigma * cfg.caption_noise, n_words);
            let object_feats =
                self.rows(&mut rng, &self.p_image, &z, cfg.object_signal, cfg.sigma * cfg.object_noise, n_obj);
            let mut raw = Vec::new();
            if rng.random::<f64>() < q {
                let i = body_idx[rng.random_range(0..body_idx.len())];
                raw.push(surface_form(&pool[i], &mut rng));
            }
            // A distractor from another topic, which can never overlap the body.
            let other = (topic + rng.random_range(1..cfg.n_topics)) % cfg.n_topics;
            let d = &self.pools[other][rng.random_range(0..self.pools[other].len())];
            raw.push(surface_form(d, &mut rng));
            pairs.push(ImageCaptionPair {
                pair_id: format!("{article_id}-{j}"),
                caption_words,
                object_feats,
                caption_entities: EntitySet::from_raw(&raw),
            });
            captions_raw.push(raw);
        }
        let record =
            ArticleRecord { article_id, sentences, body_entities: EntitySet::from_raw(&body_raw), pairs, label };
        Generated { record, body_raw, captions_raw }
    }
}

/// Generates every split in memory. Each article has its own random stream,
/// so the output does not depend on the thread count.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let gen = Generator::new(config);
    let all = par::map_range(config.n_articles, |i| gen.article(i));
    let sizes = config.split_sizes();
    let mut it = all.into_iter();
    let mut take = |name: &str, n: usize| {
        let mut s = SynthSplit { name: name.into(), ..SynthSplit::default() };
        for g in it.by_ref().take(n) {
            s.records.push(g.record);
            s.raw_body_entities.push(g.body_raw);
            s.raw_caption_entities.push(g.captions_raw);
        }
        s
    };
    let train = take("train", sizes[0]);
    let val = take("val", sizes[1]);
    let test = take("test", sizes[2]);
    Ok(SynthDataset { config: config.clone(), train, val, test })
}

/// Paths written by [`write_synthetic`].
#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub config: PathBuf,
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl`, their blobs under
/// `blobs/` and the resolved config as `synth_config.json`.
pub fn write_synthetic(ds: &SynthDataset, out: &Path) -> Result<SynthPaths> {
    fs::create_dir_all(out.join("blobs")).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("synth_config.json");
    let echo = serde_json::to_string_pretty(&ds.config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&config_path, echo + "\n").map_err(|e| Error::io(&config_path, e))?;
    let mut paths = Vec::new();
    for split in ds.splits() {
        let entries = par::map_range(split.records.len(), |i| write_record(split, i, out));
        let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
        let header = ManifestHeader {
            version: MANIFEST_VERSION,
            d_text: ds.config.d_text,
            d_image: ds.config.d_image,
            split: split.name.clone(),
            metadata: Some(serde_json::json!({
                "source": "synthetic",
                "split_fractions": ds.config.split,
                "seed": ds.config.seed,
            })),
        };
        let path = out.join(format!("{}.jsonl", split.name));
        write_manifest(&path, &header, &entries)?;
        paths.push(path);
    }
    let [train, val, test]: [PathBuf; 3] = paths.try_into().unwrap();
    Ok(SynthPaths { train, val, test, config: config_path })
}

fn write_record(split: &SynthSplit, i: usize, out: &Path) -> Result<RecordEntry> {
    let r = &split.records[i];
    let rel = format!("blobs/{}", r.article_id);
    let dir = out.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let put = |name: String, t: &Tensor<f32>| -> Result<String> {
        write_feature_blob(t, &dir.join(&name))?;
        Ok(format!("{rel}/{name}"))
    };
    let sentences = r.sentences.iter().enumerate().map(|(s, t)| put(format!("s{s}.dff"), t)).collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(r.pairs.len());
    for (j, p) in r.pairs.iter().enumerate() {
        pairs.push(PairEntry {
            pair_id: p.pair_id.clone(),
            caption: put(format!("p{j}_caption.dff"), &p.caption_words)?,
            objects: put(format!("p{j}_objects.dff"), &p.object_feats)?,
            caption_entities: split.raw_caption_entities[i][j].clone(),
            caption_entity_types: None,
        });
    }
    Ok(RecordEntry {
        article_id: r.article_id.clone(),
        label: r.label,
        sentences,
        body_entities: split.raw_body_entities[i].clone(),
        body_entity_types: None,
        pairs,
    })
}

/// Log density of a zero-mean Gaussian with covariance `cov`, summed over
/// the columns of `x` (independent identically distributed latent dims).
fn gaussian_log_density(cov: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sol = chol.solve(x);
    let quad: f64 = x.iter().zip(sol.iter()).map(|(a, b)| a * b).sum();
    -0.5 * (quad + x.ncols() as f64 * log_det)
}

/// Monte Carlo estimate of the Bayes-optimal accuracy on the generating
/// distribution of `config`, with equal class priors.
///
/// Projecting each view on its loading matrix is lossless: the orthogonal
/// complement is pure noise with the same law under both classes, and with a
/// fixed sentence length the plain word mean is the sufficient statistic. So
/// the oracle works with per-view means in the latent space, one independent
/// Gaussian vector per latent dimension, plus the entity-overlap bits.
pub fn bayes_oracle_accuracy(config: &SynthConfig, n_mc: usize) -> Result<f64> {
    config.validate()?;
    if n_mc == 0 {
        return Err(Error::Empty("monte carlo samples"));
    }
    const CHUNK: usize = 1024;
    let chunks = n_mc.div_ceil(CHUNK);
    let correct = par::map_range(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0AC1_E5EE_D000_0000);
        rng.set_stream(c as u64);
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n_mc);
        (lo..hi).filter(|&i| oracle_sample(config, i % 2 == 0, &mut rng)).count()
    });
    Ok(correct.iter().sum::<usize>() as f64 / n_mc as f64)
}

/// Draws one article's sufficient statistics and reports whether the
/// likelihood-ratio rule labels it correctly (ties go to real).
fn oracle_sample(cfg: &SynthConfig, real: bool, rng: &mut ChaCha8Rng) -> bool {
    let k = cfg.latent_dim;
    let s2 = cfg.sigma * cfg.sigma;
    let n_sent = rng.random_range(cfg.sentences[0]..=cfg.sentences[1]);
    let n_pairs = pair_count(&cfg.pair_distribution, rng);
    let m = 1 + 2 * n_pairs;
    let mut loading = vec![0.0; m];
    let mut noise = vec![0.0; m];
    loading[0] = 1.0;
    noise[0] = s2 / (n_sent * cfg.words_per_sentence) as f64;
    for j in 0..n_pairs {
        let n_words = rng.random_range(cfg.caption_words[0]..=cfg.caption_words[1]);
        let n_obj = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
        loading[1 + 2 * j] = 1.0;
        noise[1 + 2 * j] = s2 * cfg.caption_noise.powi(2) / n_words as f64;
        loading[2 + 2 * j] = cfg.object_signal;
        noise[2 + 2 * j] = s2 * cfg.object_noise.powi(2) / n_obj as f64;
    }
    let lam = DVector::from_vec(loading);
    let cov_real = &lam * lam.transpose() + DMatrix::from_diagonal(&DVector::from_vec(noise.clone()));
    let mut cov_gen = cov_real.clone();
    for j in 1..m {
        cov_gen[(0, j)] = 0.0;
        cov_gen[(j, 0)] = 0.0;
    }
    // Sample x = lam * z + noise per latent dim, with the article view using its own latent if generated.
    let mut x = DMatrix::zeros(m, k);
    for d in 0..k {
        let z: f64 = gauss(rng);
        let z_body = if real { z } else { gauss(rng) };
        for i in 0..m {
            let latent = if i == 0 { z_body } else { z };
            x[(i, d)] = lam[i] * latent + noise[i].sqrt() * gauss(rng);
        }
    }
    let mut llr = gaussian_log_density(&cov_real, &x) - gaussian_log_density(&cov_gen, &x);
    let q = if real { cfg.q_match } else { cfg.q_mismatch };
    for _ in 0..n_pairs {
        let hit = rng.random::<f64>() < q;
        llr += if hit { (cfg.q_match / cfg.q_mismatch).ln() } else { ((1.0 - cfg.q_match) / (1.0 - cfg.q_mismatch)).ln() };
    }
    (llr >= 0.0) == real
}

/// A random record with the given shape, for tests and benchmarks.
pub fn random_record<R: Rng + ?Sized>(rng: &mut R, d_text: usize, d_image: usize, n_pairs: usize, label: Label) -> ArticleRecord {
    let mut mat = |r: usize, c: usize| {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let n_sent = 1 + (n_pairs % 3);
    let sentences = (0..n_sent).map(|s| mat(1 + s, d_text)).collect();
    let pairs = (0..n_pairs)
        .map(|j| ImageCaptionPair {
            pair_id: format!("p{j}"),
            caption_words: mat(2 + j % 2, d_text),
            object_feats: mat(3 - j % 2, d_image),
            caption_entities: EntitySet::from_raw(if j % 2 == 0 { ["Ada Lovelace"] } else { ["Alan Turing"] }),
        })
        .collect();
    ArticleRecord {
        article_id: "random".into(),
        sentences,
        body_entities: EntitySet::from_raw(["ada lovelace", "London"]),
        pairs,
        label,
    }
}
