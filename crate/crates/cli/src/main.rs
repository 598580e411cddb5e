use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use didan::cca::{self, CcaModel};
use didan::checkpoint::Checkpoint;
use didan::data::{load_manifest, ArticleRecord};
use didan::eval::{evaluate_accuracy, evaluate_cca, run_ablation, AblationMatrix};
use didan::model::DidanDetector;
use didan::synth::{bayes_oracle_accuracy, generate_synthetic, write_synthetic, SynthConfig};
use didan::trainer::{train, TrainConfig};

/// Detects machine-generated news by scoring article / image-caption consistency.
#[derive(Parser)]
#[command(name = "didan", version, about)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test manifests plus blobs).
    Synth {
        /// SynthConfig JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte Carlo Bayes-optimal accuracy for a synthetic configuration.
    Oracle {
        /// SynthConfig JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Monte Carlo sample count.
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector; writes model.ddn, metrics.jsonl and per-epoch checkpoints.
    Train {
        /// Training manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Validation manifest used to pick the best epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        /// TrainConfig JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy of a trained detector on a manifest.
    Eval(ModelInput),
    /// One JSON line per article with the article and per-pair scores.
    Score(ModelInput),
    /// Train and evaluate every cell of an ablation matrix.
    Ablate {
        /// JSON with a `data` source and an ablation `matrix`.
        #[arg(long)]
        matrix: PathBuf,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlation baseline.
    #[command(subcommand)]
    Cca(CcaCommand),
}

#[derive(Args)]
struct ModelInput {
    #[arg(long)]
    manifest: PathBuf,
    /// A .ddn file written by the matching fit or train command.
    #[arg(long)]
    model: PathBuf,
    /// Also write the output to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CcaCommand {
    /// Fit on the real articles of a manifest and calibrate on a validation manifest.
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest used to choose the decision threshold.
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value_t = cca::DEFAULT_COMPONENTS)]
        components: usize,
        #[arg(long, default_value_t = cca::DEFAULT_RIDGE)]
        ridge: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a fitted baseline.
    Eval(ModelInput),
}

/// Where an ablation run gets its data: either three manifests or a synthetic config.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    val: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synth: Option<SynthConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblateSpec {
    data: DataSpec,
    #[serde(default)]
    matrix: AblationMatrix,
}

/// Wraps errors from bad command-line input or config files.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<didan::Error>() {
            return match e {
                didan::Error::Config(_) => 1,
                didan::Error::Numerical(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| didan::Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| anyhow!(UsageError(format!("{}: {e}", path.display()))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `report.json` -> `report.config.json`.
fn echo_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

fn load_records(path: &Path) -> Result<Vec<ArticleRecord>> {
    let m = load_manifest(path)?;
    Ok(m.load_records()?)
}

fn print_line<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn load_detector(path: &Path) -> Result<DidanDetector> {
    Ok(DidanDetector::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("DIDAN_THREADS") else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("DIDAN_THREADS must be a positive integer, got {value:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!(e))?;
    #[cfg(not(feature = "parallel"))]
    log::debug!("DIDAN_THREADS={n} ignored: built without parallel support");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg: SynthConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = generate_synthetic(&cfg)?;
            let paths = write_synthetic(&ds, &out)?;
            print_line(&serde_json::json!({
                "train": paths.train,
                "val": paths.val,
                "test": paths.test,
                "config": paths.config,
                "sizes": cfg.split_sizes(),
            }))
        }
        Command::Oracle { config, samples, seed } => {
            let mut cfg: SynthConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let acc = bayes_oracle_accuracy(&cfg, samples)?;
            print_line(&serde_json::json!({ "oracle_accuracy": acc, "samples": samples }))
        }
        Command::Train { manifest, val, config, out, seed } => {
            let mut cfg: TrainConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let train_records = load_records(&manifest)?;
            let val_records = val.as_deref().map(load_records).transpose()?;
            let ckpt_dir = out.join("checkpoints");
            fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
            write_json(&out.join("train_config.json"), &cfg)?;
            let outcome = train(&train_records, val_records.as_deref(), &cfg, Some(&ckpt_dir))?;
            let mut lines = String::new();
            for m in &outcome.metrics {
                lines += &serde_json::to_string(m)?;
                lines.push('\n');
            }
            fs::write(out.join("metrics.jsonl"), lines)?;
            let model_path = out.join("model.ddn");
            outcome.detector(&cfg).to_checkpoint().save(&model_path)?;
            print_line(&serde_json::json!({
                "model": model_path,
                "best_epoch": outcome.best_epoch,
                "pool_size": outcome.pool_size,
                "final": outcome.metrics.last(),
            }))
        }
        Command::Eval(input) => {
            let records = load_records(&input.manifest)?;
            let det = load_detector(&input.model)?;
            let report = evaluate_accuracy(&det, &records)?;
            if let Some(out) = &input.out {
                write_json(out, &report)?;
                write_json(&echo_path(out), &serde_json::json!({
                    "manifest": input.manifest,
                    "model": input.model,
                    "modality_ablation": det.ablation,
                    "use_nei": det.use_nei,
                }))?;
            }
            print_line(&report)
        }
        Command::Score(input) => {
            let records = load_records(&input.manifest)?;
            let det = load_detector(&input.model)?;
            let mut lines = Vec::with_capacity(records.len());
            for r in &records {
                let t = det.trace(r)?;
                lines.push(serde_json::json!({
                    "article_id": t.article_id,
                    "p_A": t.authenticity,
                    "pairs": t.pairs.iter().map(|p| serde_json::json!({
                        "pair_id": p.pair_id,
                        "p_A^I": p.score,
                        "b_c": p.indicator,
                    })).collect::<Vec<_>>(),
                }));
            }
            if let Some(out) = &input.out {
                let text: String = lines.iter().map(|l| l.to_string() + "\n").collect();
                fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
                write_json(&echo_path(out), &serde_json::json!({ "manifest": input.manifest, "model": input.model }))?;
            }
            lines.iter().try_for_each(print_line)
        }
        Command::Ablate { matrix, out } => {
            let spec: AblateSpec = read_json::<Option<AblateSpec>>(Some(&matrix))?
                .ok_or_else(|| UsageError(format!("{}: empty matrix", matrix.display())))?;
            let base = matrix.parent().unwrap_or(Path::new("."));
            let (train_r, val_r, test_r) = match (&spec.data.synth, &spec.data.train, &spec.data.val, &spec.data.test) {
                (Some(cfg), None, None, None) => {
                    let ds = generate_synthetic(cfg)?;
                    (ds.train.records, ds.val.records, ds.test.records)
                }
                (None, Some(t), Some(v), Some(te)) => {
                    (load_records(&base.join(t))?, load_records(&base.join(v))?, load_records(&base.join(te))?)
                }
                _ => bail!(UsageError("matrix data must give either `synth` or all of `train`, `val` and `test`".into())),
            };
            let report = run_ablation(&spec.matrix, &train_r, &val_r, &test_r)?;
            write_json(&out, &report)?;
            write_json(&echo_path(&out), &spec)?;
            print_line(&report)
        }
        Command::Cca(CcaCommand::Fit { manifest, val, components, ridge, out }) => {
            let train_records = load_records(&manifest)?;
            let val_records = load_records(&val)?;
            let model = cca::fit_and_calibrate(&train_records, &val_records, components, ridge)?;
            model.to_checkpoint().save(&out)?;
            write_json(&echo_path(&out), &serde_json::json!({
                "manifest": manifest,
                "val": val,
                "components": components,
                "ridge": ridge,
            }))?;
            print_line(&serde_json::json!({
                "model": out,
                "components": model.components(),
                "rho": model.rho,
                "threshold": model.threshold,
            }))
        }
        Command::Cca(CcaCommand::Eval(input)) => {
            let model = CcaModel::from_checkpoint(&Checkpoint::load(&input.model)?)?;
            let records = load_records(&input.manifest)?;
            let report = evaluate_cca(&model, &records)?;
            if let Some(out) = &input.out {
                write_json(out, &report)?;
                write_json(&echo_path(out), &serde_json::json!({ "manifest": input.manifest, "model": input.model }))?;
            }
            print_line(&report)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
