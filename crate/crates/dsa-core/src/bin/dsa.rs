//! Pipeline driver: dataset synthesis → bias-only training → adversarial
//! augmentation → debiased training → fairness evaluation → heatmaps.
//!
//! Every subcommand validates inputs before writing anything, funnels all
//! randomness through `--seed`, and drops a manifest next to its outputs;
//! `rerun --manifest` replays a run byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dsa_core::attack::{run_attack, AttackConfig, LayerMode};
use dsa_core::biasonly::{train_bias_only, BiasOnlyConfig, EpochStats};
use dsa_core::checkpoint::{load_checkpoint, save_checkpoint};
use dsa_core::datagen::{generate, read_dataset, write_dataset, DatasetSpec};
use dsa_core::error::{DsaError, Result};
use dsa_core::fairmetrics::FairnessReport;
use dsa_core::heatmap::heatmap_ppm;
use dsa_core::manifest::RunManifest;
use dsa_core::trainer::{evaluate, train, TrainConfig, TrainEpochLog, TrainMode};
use dsa_core::vit::ViTConfig;

#[derive(Parser)]
#[command(name = "dsa", version, about = "Debiased self-attention training pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the spuriously correlated shape/tint benchmark.
    GenData(GenDataArgs),
    /// Train the frozen bias-only model (sensitive head + target unlearning).
    TrainBiasOnly(TrainBiasOnlyArgs),
    /// Adversarially perturb each example's most-attended patches.
    Attack(AttackArgs),
    /// Train a classifier: vanilla CE, attention masking, or full debiasing.
    Train(TrainArgs),
    /// Fairness report (accuracy, EO, DP, DBA, BA) per checkpoint.
    Eval(EvalArgs),
    /// Per-patch attention heatmaps as PPM images.
    Heatmap(HeatmapArgs),
    /// Replay a previous run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    /// P(s = y) per training class.
    #[arg(long, default_value_t = 0.95)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patch ids carrying the sensitive tint.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    spurious_patches: Vec<u16>,
}

/// Transformer geometry, shared by both training subcommands. Non-training
/// subcommands read the geometry from the checkpoint instead.
#[derive(Args)]
struct ModelArgs {
    /// Encoder blocks.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Attention heads per block.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Embedding width; feed-forward and head widths scale with it.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
}

impl ModelArgs {
    fn vit(&self) -> ViTConfig {
        ViTConfig {
            patch_size: self.patch_size,
            embed_dim: self.dim,
            num_layers: self.depth,
            num_heads: self.heads,
            ffn_hidden: 2 * self.dim,
            head_hidden: 4 * self.dim,
            ..ViTConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainBiasOnlyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-2)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// How the target task is unlearned: literal | grl.
    #[arg(long, default_value = "literal")]
    reversal_mode: String,
    #[arg(long, default_value_t = 1.0)]
    grl_lambda: f64,
    /// Ceiling on the maximized target CE (literal mode).
    #[arg(long, default_value_t = std::f64::consts::LN_2)]
    loss_t_cap: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    data: PathBuf,
    /// Frozen bias-only checkpoint steering the attack.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Patches perturbed per image.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Skip the [0,1] pixel projection after each step.
    #[arg(long)]
    no_project: bool,
    /// Combine losses without gradient surgery.
    #[arg(long)]
    no_pcgrad: bool,
    /// Rank patches by one layer's attention instead of the sum.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 32)]
    chunk: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// vanilla | am | dsa.
    #[arg(long, default_value = "vanilla")]
    mode: String,
    /// Index-paired adversarial dataset (dsa mode).
    #[arg(long)]
    adv_data: Option<PathBuf>,
    /// Frozen bias-only checkpoint (am mode).
    #[arg(long)]
    bias_model: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda3: f64,
    /// Alignment metric: mse | kl | at.
    #[arg(long, default_value = "at")]
    align: String,
    /// Attention rows aligned: all | cls.
    #[arg(long, default_value = "all")]
    align_rows: String,
    /// Patches masked per image (am mode).
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Mask fill (am mode): zero | mean.
    #[arg(long, default_value = "zero")]
    fill: String,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 3e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to score; repeat for a multi-row comparison.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    chunk: usize,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to visualize; repeat to compare models.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Example indices to render; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize])]
    index: Vec<usize>,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Training config plus the model geometry it trains, as stored in manifests.
/// `model` defaults so manifests written before the field existed still replay.
#[derive(Serialize, Deserialize)]
struct BiasSpec {
    #[serde(flatten)]
    cfg: BiasOnlyConfig,
    #[serde(default)]
    model: ViTConfig,
}

#[derive(Serialize, Deserialize)]
struct TrainSpec {
    #[serde(flatten)]
    cfg: TrainConfig,
    #[serde(default)]
    model: ViTConfig,
}

#[derive(Serialize, Deserialize)]
struct EvalSpec {
    chunk: usize,
}

#[derive(Serialize, Deserialize)]
struct HeatmapSpec {
    indices: Vec<usize>,
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => {
            let spec = DatasetSpec {
                n_train: a.n_train,
                n_test: a.n_test,
                rho: a.rho,
                seed: a.seed,
                spurious_patches: a.spurious_patches.clone(),
                ..DatasetSpec::default()
            };
            spec.validate()?;
            let outputs = prepare_out(&a.out, &["train.dsad", "test.dsad"])?;
            let m = RunManifest::new("gen-data", &spec, spec.seed)?;
            finish(m, &a.out, &outputs)
        }
        Cmd::TrainBiasOnly(a) => {
            let cfg = BiasOnlyConfig {
                epochs: a.epochs,
                lr: a.lr,
                batch: a.batch,
                clip: a.clip,
                mode: a.reversal_mode.parse()?,
                grl_lambda: a.grl_lambda,
                loss_t_cap: a.loss_t_cap,
                warmup_frac: a.warmup_frac,
                seed: a.seed,
            };
            cfg.validate()?;
            let spec = BiasSpec { cfg, model: a.model.vit() };
            spec.model.validate()?;
            let outputs = prepare_out(&a.out, &["bias.dsav", "bias_log.csv"])?;
            let m =
                RunManifest::new("train-bias-only", &spec, spec.cfg.seed)?.input("data", &a.data);
            finish(m, &a.out, &outputs)
        }
        Cmd::Attack(a) => {
            let cfg = AttackConfig {
                k: a.k,
                alpha: a.alpha,
                eta: a.eta,
                steps: a.steps,
                project: !a.no_project,
                pcgrad: !a.no_pcgrad,
                layer_mode: a.layer.map_or(LayerMode::SumAll, LayerMode::Single),
                chunk: a.chunk,
            };
            cfg.validate()?;
            let outputs = prepare_out(&a.out, &["adv.dsad", "attack_log.csv"])?;
            let m = RunManifest::new("attack", &cfg, 0)?
                .input("data", &a.data)
                .input("model", &a.model);
            finish(m, &a.out, &outputs)
        }
        Cmd::Train(a) => {
            let cfg = TrainConfig {
                mode: a.mode.parse()?,
                lambda1: a.lambda1,
                lambda2: a.lambda2,
                lambda3: a.lambda3,
                align_metric: a.align.parse()?,
                align_rows: a.align_rows.parse()?,
                k: a.k,
                fill: a.fill.parse()?,
                epochs: a.epochs,
                batch: a.batch,
                lr: a.lr,
                momentum: a.momentum,
                warmup_frac: a.warmup_frac,
                clip: a.clip,
                val_frac: a.val_frac,
                seed: a.seed,
            };
            cfg.validate()?;
            if cfg.mode == TrainMode::Dsa && a.adv_data.is_none() {
                return Err(DsaError::Config("--mode dsa needs --adv-data".into()));
            }
            if cfg.mode == TrainMode::Am && a.bias_model.is_none() {
                return Err(DsaError::Config("--mode am needs --bias-model".into()));
            }
            let spec = TrainSpec { cfg, model: a.model.vit() };
            spec.model.validate()?;
            let outputs = prepare_out(&a.out, &["model.dsav", "train_log.csv"])?;
            let mut m = RunManifest::new("train", &spec, spec.cfg.seed)?.input("data", &a.data);
            if let Some(p) = &a.adv_data {
                m = m.input("adv-data", p);
            }
            if let Some(p) = &a.bias_model {
                m = m.input("bias-model", p);
            }
            finish(m, &a.out, &outputs)
        }
        Cmd::Eval(a) => {
            let cfg = EvalSpec { chunk: a.chunk };
            let outputs = prepare_out(&a.out, &["eval.csv", "eval.json"])?;
            let mut m = RunManifest::new("eval", &cfg, 0)?.input("data", &a.data);
            for (i, p) in a.model.iter().enumerate() {
                m = m.input(&format!("model.{i:03}"), p);
            }
            finish(m, &a.out, &outputs)
        }
        Cmd::Heatmap(a) => {
            let cfg = HeatmapSpec { indices: a.index.clone() };
            let mut names = Vec::new();
            for (i, p) in a.model.iter().enumerate() {
                for &idx in &a.index {
                    names.push(format!("heatmap_{i:02}_{}_{idx}.ppm", stem(p)));
                }
            }
            let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let outputs = prepare_out(&a.out, &name_refs)?;
            let mut m = RunManifest::new("heatmap", &cfg, 0)?.input("data", &a.data);
            for (i, p) in a.model.iter().enumerate() {
                m = m.input(&format!("model.{i:03}"), p);
            }
            finish(m, &a.out, &outputs)
        }
        Cmd::Rerun(a) => {
            let m = RunManifest::read(&a.manifest)?;
            execute(&m.subcommand, &m.config, &m.inputs, &m.outputs)
        }
    }
}

/// Runs `execute`, then writes the manifest next to the outputs.
fn finish(mut m: RunManifest, out_dir: &Path, outputs: &[PathBuf]) -> Result<()> {
    for o in outputs {
        m = m.output(o);
    }
    let t0 = Instant::now();
    execute(&m.subcommand, &m.config, &m.inputs, &m.outputs)?;
    m.duration_secs = t0.elapsed().as_secs_f64();
    let path = out_dir.join(format!("{}.manifest.json", m.subcommand));
    m.write(&path)?;
    println!("manifest: {}", path.display());
    Ok(())
}

/// Shared by fresh runs and `rerun`: pure function of config + paths.
fn execute(
    sub: &str,
    config: &serde_json::Value,
    inputs: &BTreeMap<String, PathBuf>,
    outputs: &[PathBuf],
) -> Result<()> {
    match sub {
        "gen-data" => {
            let spec: DatasetSpec = from_value(config)?;
            let [train_out, test_out] = two(outputs)?;
            let (train_ds, test_ds) = generate(&spec)?;
            write_dataset(train_out, &train_ds)?;
            write_dataset(test_out, &test_ds)?;
            println!(
                "wrote {} train / {} test examples (rho = {})",
                train_ds.len(),
                test_ds.len(),
                spec.rho
            );
            Ok(())
        }
        "train-bias-only" => {
            let spec: BiasSpec = from_value(config)?;
            let [model_out, log_out] = two(outputs)?;
            let data = read_dataset(input(inputs, "data")?)?;
            let trained = train_bias_only(&spec.cfg, &spec.model, &data)?;
            save_checkpoint(model_out, &trained.params)?;
            write_csv(log_out, EpochStats::CSV_HEADER, trained.log.iter().map(|e| e.csv_row()))?;
            if let Some(last) = trained.log.last() {
                println!("bias-only: acc_s = {:.3}, acc_y = {:.3}", last.acc_s, last.acc_y);
            }
            Ok(())
        }
        "attack" => {
            let cfg: AttackConfig = from_value(config)?;
            let [adv_out, log_out] = two(outputs)?;
            let data = read_dataset(input(inputs, "data")?)?;
            let params = load_checkpoint(input(inputs, "model")?)?;
            let outcome = run_attack(&cfg, &params.cfg.clone(), &params, &data)?;
            write_dataset(adv_out, &outcome.adv)?;
            fs::write(log_out, outcome.sidecar_csv())?;
            println!(
                "attacked {} examples, sensitive-head flip rate {:.3}",
                outcome.adv.len(),
                outcome.flip_rate()
            );
            Ok(())
        }
        "train" => {
            let spec: TrainSpec = from_value(config)?;
            let cfg = &spec.cfg;
            let [model_out, log_out] = two(outputs)?;
            let data = read_dataset(input(inputs, "data")?)?;
            let adv = inputs.get("adv-data").map(read_dataset).transpose()?;
            let bias = inputs.get("bias-model").map(load_checkpoint).transpose()?;
            let out = train(cfg, &spec.model, &data, adv.as_ref(), bias.as_ref())?;
            save_checkpoint(model_out, &out.params)?;
            write_csv(log_out, TrainEpochLog::CSV_HEADER, out.log.iter().map(|e| e.csv_row()))?;
            let best = &out.log[out.best_epoch];
            println!(
                "{} training done; best epoch {} (val acc {})",
                cfg.mode,
                out.best_epoch,
                best.val_acc.map_or("NA".into(), |v| format!("{v:.3}")),
            );
            Ok(())
        }
        "eval" => {
            let cfg: EvalSpec = from_value(config)?;
            let [csv_out, json_out] = two(outputs)?;
            let data = read_dataset(input(inputs, "data")?)?;
            let models = model_inputs(inputs);
            if models.is_empty() {
                return Err(DsaError::Config("eval needs at least one --model".into()));
            }
            let labels = disambiguate(&models);
            let mut csv = String::from(FairnessReport::CSV_HEADER);
            csv.push('\n');
            let mut reports = Vec::new();
            for (path, label) in models.iter().zip(&labels) {
                let params = load_checkpoint(path)?;
                let r = evaluate(&params.cfg.clone(), &params, &data, cfg.chunk)?;
                csv.push_str(&r.csv_row(label));
                csv.push('\n');
                reports.push(serde_json::json!({ "label": label, "report": r }));
            }
            fs::write(csv_out, &csv)?;
            let mut body = serde_json::to_string_pretty(&reports)?;
            body.push('\n');
            fs::write(json_out, body)?;
            print!("{csv}");
            Ok(())
        }
        "heatmap" => {
            let cfg: HeatmapSpec = from_value(config)?;
            let data = read_dataset(input(inputs, "data")?)?;
            let models = model_inputs(inputs);
            if models.len() * cfg.indices.len() != outputs.len() {
                return Err(DsaError::Malformed {
                    what: "manifest",
                    detail: format!(
                        "{} heatmap outputs for {} models × {} indices",
                        outputs.len(),
                        models.len(),
                        cfg.indices.len()
                    ),
                });
            }
            let mut o = 0;
            for path in &models {
                let params = load_checkpoint(path)?;
                for &idx in &cfg.indices {
                    fs::write(&outputs[o], heatmap_ppm(&params.cfg.clone(), &params, &data, idx)?)?;
                    o += 1;
                }
            }
            println!("rendered {o} heatmaps");
            Ok(())
        }
        other => Err(DsaError::Malformed {
            what: "manifest",
            detail: format!("unknown subcommand {other:?}"),
        }),
    }
}

fn from_value<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
    Ok(serde_json::from_value(v.clone())?)
}

fn prepare_out(dir: &Path, names: &[&str]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    Ok(names.iter().map(|n| dir.join(n)).collect())
}

fn two(outputs: &[PathBuf]) -> Result<[&PathBuf; 2]> {
    match outputs {
        [a, b] => Ok([a, b]),
        _ => Err(DsaError::Malformed {
            what: "manifest",
            detail: format!("expected 2 outputs, found {}", outputs.len()),
        }),
    }
}

fn input<'a>(inputs: &'a BTreeMap<String, PathBuf>, role: &str) -> Result<&'a PathBuf> {
    inputs.get(role).ok_or_else(|| DsaError::Malformed {
        what: "manifest",
        detail: format!("missing input {role:?}"),
    })
}

/// Model paths in `model.NNN` key order.
fn model_inputs(inputs: &BTreeMap<String, PathBuf>) -> Vec<PathBuf> {
    inputs
        .iter()
        .filter(|(k, _)| k.starts_with("model."))
        .map(|(_, v)| v.clone())
        .collect()
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Row labels from file stems; clashes fall back to parent/stem.
fn disambiguate(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    paths
        .iter()
        .zip(&stems)
        .map(|(p, s)| {
            if stems.iter().filter(|t| *t == s).count() > 1 {
                match p.parent().and_then(Path::file_name) {
                    Some(parent) => format!("{}/{s}", parent.to_string_lossy()),
                    None => s.clone(),
                }
            } else {
                s.clone()
            }
        })
        .collect()
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
