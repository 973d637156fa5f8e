//! Subcommands. Every run resolves its configuration (built-in defaults, then
//! the `--config` JSON file, then flags), writes its outputs and a
//! [`RunManifest`] next to the primary output.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use tot_core::chain::DiscreteLatentChain;
use tot_core::eval::{
    baseline_suite, model_forecast_metrics, model_mcc, model_mixing_support, support_f1, window_starts,
    BaselineReport, MccReport,
};
use tot_core::model::{ModelConfig, TotModel};
use tot_core::objective::{LossBreakdown, SignMode};
use tot_core::operator_lab::{degenerate_chain, operator_lab};
use tot_core::risk::{risk_lab, Channel};
use tot_core::synthgen::{generate_dataset, Dataset, GenConfig, Preset};
use tot_core::train::{online_run, train_offline, TrainConfig, Trainer};

use crate::error::{CliError, CliResult};
use crate::formats::{self, write_file};
use crate::manifest::{content_hash, digest_file, manifest_path, InputDigest, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "tot", version, about = "Latent-variable time-series forecasting toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every named random stream (generation, init, training, eval).
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with optional `gen`, `model`, `train` and `baselines` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Primary output file; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub sign_mode: Option<SignModeArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SignModeArg {
    Verbatim,
    PenalizeBoth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (`.totd`).
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "a", ignore_case = true)]
        preset: PresetArg,
        /// Also export the series as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a model offline and write a checkpoint (`.totc`) plus a loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// MCC, forecast MSE/MAE and (for sparse mixing) support recovery as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Stream a series through the forecast-then-adapt protocol; writes a CSV.
    Online {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Adaptation steps after each arrival.
        #[arg(long, default_value_t = 1)]
        k_steps: usize,
        /// First row of the streamed segment.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Length of the streamed segment (default: to the end).
        #[arg(long)]
        len: Option<usize>,
        /// Write the adapted model here.
        #[arg(long)]
        ckpt_out: Option<PathBuf>,
    },
    /// Exact forecast risks on a finite latent chain (JSON).
    RiskLab {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        chain: ChainArgs,
        /// identity, bijection, independent, noisy or noisy:<p>.
        #[arg(long, default_value = "noisy")]
        channel: String,
    },
    /// Spectral recovery of the observation kernel of a finite chain (JSON).
    OperatorLab {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        chain: ChainArgs,
        /// Use a chain built to share an eigenvalue between latent states.
        #[arg(long)]
        degenerate: bool,
    },
    /// History-only, history+true-latent and history+estimated-latent
    /// forecasters with matched seeds (JSON, optional CSV).
    Baselines {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model providing the latent estimates; trained from the config if absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-run the command recorded in a manifest after checking its inputs.
    Replay { manifest: PathBuf },
}

#[derive(Debug, Clone, Args)]
pub struct ChainArgs {
    /// Chain specification JSON (`k`, `m`, `P_z`, `P_x`); random if absent.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
}

impl RunConfig {
    fn defaults(preset: Preset) -> Self {
        Self {
            gen: preset.config(0),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }

    fn seed(&self) -> u64 {
        self.train.seed
    }
}

/// Overlays `patch` onto `base`, rejecting keys the base does not have.
fn merge(base: &mut Value, patch: &Value, path: &str) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    // optional fields serialize as null in the base
                    Some(slot) if slot.is_object() => merge(slot, v, &sub)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(CliError::Json(format!("unknown field `{sub}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn section<T: serde::de::DeserializeOwned>(v: &Value, name: &str) -> CliResult<T> {
    serde_json::from_value(v[name].clone()).map_err(|e| CliError::Json(format!("{name}: {e}")))
}

/// Defaults, then the config file, then flags.
fn resolve(common: &Common, preset: Preset) -> CliResult<(RunConfig, Option<Value>)> {
    let mut value = serde_json::to_value(RunConfig::defaults(preset)).expect("defaults serialize");
    let file = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| CliError::Json(format!("{}: {e}", p.display())))?;
            if !patch.is_object() {
                return Err(CliError::Json(format!("{}: top level must be an object", p.display())));
            }
            merge(&mut value, &patch, "")?;
            Some(patch)
        }
        None => None,
    };
    let mut cfg = RunConfig {
        gen: section(&value, "gen")?,
        model: section(&value, "model")?,
        train: section(&value, "train")?,
        baselines: section(&value, "baselines")?,
    };
    if let Some(s) = common.seed {
        cfg.gen.seed = s;
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(m) = common.sign_mode {
        cfg.train.loss.sign_mode = match m {
            SignModeArg::Verbatim => SignMode::Verbatim,
            SignModeArg::PenalizeBoth => SignMode::PenalizeBoth,
        };
    }
    Ok((cfg, file))
}

/// Sets the model width from the data unless the config file pinned it.
fn fit_model_n(cfg: &mut RunConfig, file: &Option<Value>, n: usize) -> CliResult<()> {
    let pinned = file.as_ref().and_then(|f| f.get("model")).and_then(|m| m.get("n")).is_some();
    if pinned && cfg.model.n != n {
        return Err(CliError::Core(tot_core::Error::Config(format!(
            "model.n = {} but the dataset has {n} series",
            cfg.model.n
        ))));
    }
    cfg.model.n = n;
    Ok(())
}

fn preset_of(p: PresetArg) -> Preset {
    match p {
        PresetArg::A => Preset::A,
        PresetArg::B => Preset::B,
        PresetArg::C => Preset::C,
        PresetArg::D => Preset::D,
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn json_bytes<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Encode(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

struct Run {
    args: Vec<String>,
    subcommand: &'static str,
    started: Instant,
    started_unix_ms: u128,
    inputs: Vec<InputDigest>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn new(args: &[String], subcommand: &'static str) -> Self {
        Self {
            args: args.to_vec(),
            subcommand,
            started: Instant::now(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(digest_file(path)?);
        Ok(())
    }

    fn emit(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        write_file(path, bytes)?;
        self.artifacts.push(path.to_path_buf());
        Ok(())
    }

    fn finish(self, out: &Path, seed: u64, config: Value) -> CliResult<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            args: self.args,
            seed,
            content_hash: content_hash(&config, &self.inputs),
            config,
            inputs: self.inputs,
            artifacts: self.artifacts,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: self.started_unix_ms,
            wall_clock_ms: self.started.elapsed().as_millis(),
        };
        manifest.write(&manifest_path(out))
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn load_chain(args: &ChainArgs, seed: u64, run: &mut Run) -> CliResult<DiscreteLatentChain> {
    match &args.chain {
        Some(p) => {
            run.input(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let chain: DiscreteLatentChain =
                serde_json::from_str(&text).map_err(|e| CliError::Json(format!("{}: {e}", p.display())))?;
            chain.validate()?;
            Ok(chain)
        }
        None => {
            if args.k == 0 || args.m == 0 {
                return Err(CliError::Usage("--k and --m must be at least 1".into()));
            }
            Ok(DiscreteLatentChain::from_seed(args.k, args.m, seed))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub estimated: Vec<bool>,
    pub truth: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub range: [usize; 2],
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    pub mcc: Option<MccReport>,
    pub support: Option<SupportReport>,
}

/// Relative threshold on the mean absolute decoder Jacobian.
pub const SUPPORT_THRESHOLD: f64 = 0.1;

/// Metrics of `model` on the validation range of `ds`.
pub fn evaluate_model(model: &TotModel, ds: &Dataset) -> CliResult<EvalReport> {
    let n = model.config().n;
    if ds.n() != n {
        return Err(CliError::Core(tot_core::Error::Config(format!(
            "checkpoint expects {n} series but the dataset has {}",
            ds.n()
        ))));
    }
    let range = ds.validation_range();
    let (mse, mae) = model_forecast_metrics(model, &ds.x, range.clone())?;
    let windows = window_starts(range.clone(), model.config().window()).len();
    let mcc = match &ds.z {
        Some(z) => Some(model_mcc(model, &ds.x, z, range.clone())?),
        None => None,
    };
    let support = match (&ds.mixing.mask, &mcc) {
        (Some(truth), Some(m)) => {
            let estimated = model_mixing_support(model, &ds.x, range.clone(), &m.assignment, SUPPORT_THRESHOLD)?;
            let (precision, recall, f1) = support_f1(&estimated, truth);
            Some(SupportReport {
                threshold: SUPPORT_THRESHOLD,
                precision,
                recall,
                f1,
                estimated,
                truth: truth.clone(),
            })
        }
        _ => None,
    };
    Ok(EvalReport {
        n,
        range: [range.start, range.end],
        windows,
        mse,
        mae,
        mcc,
        support,
    })
}

fn train_cfg_with_epochs(cfg: &RunConfig, epochs: Option<usize>) -> TrainConfig {
    let mut t = cfg.train.clone();
    if let Some(e) = epochs {
        t.epochs = e;
    }
    t
}

/// Trains on the training range of `ds`, returning the trainer and per-epoch
/// losses.
pub fn train_on(trainer: &mut Trainer, ds: &Dataset, cfg: &TrainConfig) -> CliResult<Vec<LossBreakdown>> {
    let tr = ds.train_range();
    let x = ds.x.slice_rows(tr.start, tr.end - tr.start);
    Ok(train_offline(trainer, &x, cfg)?)
}

fn baseline_csv(r: &BaselineReport) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| CliError::Encode(e.to_string());
    w.write_record(["baseline_mse", "tot_mse", "oracle_mse", "gap_fraction"]).map_err(e)?;
    w.write_record([r.baseline_mse, r.tot_mse, r.oracle_mse, r.gap_fraction()].map(|v| v.to_string())).map_err(e)?;
    w.into_inner().map_err(|e| CliError::Encode(e.to_string()))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args(args: &[String]) -> CliResult<()> {
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli, args)
}

pub fn run(cli: Cli, args: &[String]) -> CliResult<()> {
    match cli.command {
        Command::Gen { common, preset, csv } => {
            let mut run = Run::new(args, "gen");
            let (cfg, _) = resolve(&common, preset_of(preset))?;
            let ds = generate_dataset(&cfg.gen)?;
            run.emit(&common.out, &formats::encode_dataset(&ds))?;
            if let Some(p) = csv {
                run.emit(&p, &formats::dataset_csv(&ds)?)?;
            }
            run.finish(&common.out, cfg.gen.seed, to_value(&cfg.gen))
        }
        Command::Train { common, data, resume, epochs } => {
            let mut run = Run::new(args, "train");
            let (mut cfg, file) = resolve(&common, Preset::A)?;
            run.input(&data)?;
            let ds = formats::load_dataset(&data)?;
            fit_model_n(&mut cfg, &file, ds.n())?;
            let tcfg = train_cfg_with_epochs(&cfg, epochs);
            let mut trainer = match &resume {
                Some(p) => {
                    run.input(p)?;
                    let ck = formats::load_checkpoint(p)?;
                    let t = Trainer::from_checkpoint(&ck, None)?;
                    if t.model.config().n != ds.n() {
                        return Err(CliError::Core(tot_core::Error::Config(format!(
                            "checkpoint expects {} series but the dataset has {}",
                            t.model.config().n,
                            ds.n()
                        ))));
                    }
                    cfg.model = t.model.config().clone();
                    t
                }
                None => Trainer::new(TotModel::new(cfg.model.clone())?, tcfg.seed),
            };
            let tr = ds.train_range();
            let windows = (tr.end - tr.start + 1).saturating_sub(cfg.model.window()).max(1);
            let first_epoch = (trainer.step() / windows.div_ceil(tcfg.batch_size) as u64) as usize;
            let history = train_on(&mut trainer, &ds, &tcfg)?;
            run.emit(&common.out, &formats::encode_checkpoint(&trainer.checkpoint()))?;
            run.emit(&sidecar(&common.out, ".losses.csv"), &formats::loss_csv(&history, first_epoch)?)?;
            let snapshot = serde_json::json!({ "model": cfg.model, "train": tcfg });
            run.finish(&common.out, tcfg.seed, snapshot)
        }
        Command::Eval { common, ckpt, data } => {
            let mut run = Run::new(args, "eval");
            let (cfg, _) = resolve(&common, Preset::A)?;
            run.input(&ckpt)?;
            run.input(&data)?;
            let ck = formats::load_checkpoint(&ckpt)?;
            let ds = formats::load_dataset(&data)?;
            let trainer = Trainer::from_checkpoint(&ck, None)?;
            let report = evaluate_model(&trainer.model, &ds)?;
            run.emit(&common.out, &json_bytes(&report)?)?;
            run.finish(&common.out, cfg.seed(), serde_json::json!({ "model": ck.model_config }))
        }
        Command::Online {
            common,
            ckpt,
            data,
            k_steps,
            start,
            len,
            ckpt_out,
        } => {
            let mut run = Run::new(args, "online");
            let (cfg, _) = resolve(&common, Preset::A)?;
            run.input(&ckpt)?;
            run.input(&data)?;
            let ck = formats::load_checkpoint(&ckpt)?;
            let ds = formats::load_dataset(&data)?;
            let mut trainer = Trainer::from_checkpoint(&ck, None)?;
            if start >= ds.len() {
                return Err(CliError::Usage(format!("--start {start} is past the end of a {}-step series", ds.len())));
            }
            let len = len.unwrap_or(ds.len() - start).min(ds.len() - start);
            let x = ds.x.slice_rows(start, len);
            let trace = online_run(&mut trainer, &x, &cfg.train, k_steps)?;
            run.emit(&common.out, &formats::online_csv(&trace)?)?;
            if let Some(p) = ckpt_out {
                run.emit(&p, &formats::encode_checkpoint(&trainer.checkpoint()))?;
            }
            let snapshot = serde_json::json!({ "train": cfg.train, "k_steps": k_steps, "start": start, "len": len });
            run.finish(&common.out, cfg.seed(), snapshot)
        }
        Command::RiskLab { common, chain, channel } => {
            let mut run = Run::new(args, "risk-lab");
            let (cfg, _) = resolve(&common, Preset::A)?;
            let ch = Channel::parse(&channel)
                .ok_or_else(|| CliError::Usage(format!("unknown channel `{channel}` (identity, bijection, independent, noisy, noisy:<p>)")))?;
            let c = load_chain(&chain, cfg.seed(), &mut run)?;
            let report = risk_lab(&c, ch)?;
            run.emit(&common.out, &json_bytes(&report)?)?;
            run.finish(&common.out, cfg.seed(), serde_json::json!({ "chain": c, "channel": ch.name() }))
        }
        Command::OperatorLab { common, chain, degenerate } => {
            let mut run = Run::new(args, "operator-lab");
            let (cfg, _) = resolve(&common, Preset::A)?;
            let c = if degenerate {
                degenerate_chain(chain.k, cfg.seed())
            } else {
                load_chain(&chain, cfg.seed(), &mut run)?
            };
            let result = operator_lab(&c)?;
            run.emit(&common.out, &json_bytes(&result)?)?;
            run.finish(&common.out, cfg.seed(), serde_json::json!({ "chain": c }))
        }
        Command::Baselines { common, data, ckpt, csv } => {
            let mut run = Run::new(args, "baselines");
            let (mut cfg, file) = resolve(&common, Preset::A)?;
            run.input(&data)?;
            let ds = formats::load_dataset(&data)?;
            if ds.z.is_none() {
                return Err(CliError::Core(tot_core::Error::Config("dataset has no ground-truth latents, the oracle forecaster is impossible".into())));
            }
            fit_model_n(&mut cfg, &file, ds.n())?;
            let model = match &ckpt {
                Some(p) => {
                    run.input(p)?;
                    let t = Trainer::from_checkpoint(&formats::load_checkpoint(p)?, None)?;
                    cfg.model = t.model.config().clone();
                    t.model
                }
                None => {
                    let mut t = Trainer::new(TotModel::new(cfg.model.clone())?, cfg.train.seed);
                    train_on(&mut t, &ds, &cfg.train)?;
                    t.model
                }
            };
            if model.config().n != ds.n() {
                return Err(CliError::Core(tot_core::Error::Config("checkpoint and dataset disagree on n".into())));
            }
            let b = &cfg.baselines;
            let bcfg = TrainConfig {
                epochs: b.epochs,
                batch_size: b.batch_size,
                learning_rate: b.learning_rate,
                seed: cfg.train.seed,
                ..TrainConfig::default()
            };
            let report = baseline_suite(&model, &ds.x, ds.z.as_ref(), ds.train_range(), ds.validation_range(), &b.hidden, &bcfg)?;
            #[derive(Serialize)]
            struct Out<'a> {
                #[serde(flatten)]
                report: &'a BaselineReport,
                gap_fraction: f64,
            }
            run.emit(&common.out, &json_bytes(&Out { report: &report, gap_fraction: report.gap_fraction() })?)?;
            if let Some(p) = csv {
                run.emit(&p, &baseline_csv(&report)?)?;
            }
            let snapshot = serde_json::json!({ "model": cfg.model, "train": cfg.train, "baselines": cfg.baselines });
            run.finish(&common.out, cfg.seed(), snapshot)
        }
        Command::Replay { manifest } => {
            let m = RunManifest::read(&manifest)?;
            for d in &m.inputs {
                let now = digest_file(&d.path)?;
                if now.sha256 != d.sha256 {
                    return Err(CliError::format(&d.path, "input changed since the manifest was written"));
                }
            }
            if m.args.get(1).map(String::as_str) == Some("replay") {
                return Err(CliError::Usage("a replay manifest cannot be replayed".into()));
            }
            run_args(&m.args)
        }
    }
}
