//! Command-line front end: `generate`, `train`, `eval` and
//! `export-latents`.
//!
//! Configuration is resolved as flags over an optional TOML file over
//! built-in defaults. Every command writes a run manifest holding the fully
//! resolved configuration next to its outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, LorenzConfig, Trial};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, DEFAULT_RIDGE_ALPHA};
use crate::model::{LangevinFlow, ModelConfig, Variant};
use crate::train::{self, TrainConfig, Trainer};

pub const RUN_MANIFEST: &str = "run_manifest.toml";

#[derive(Parser, Debug)]
#[command(name = "langevinflow", version, about = "Latent Langevin dynamics for spiking data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic Lorenz spiking dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write eval-mode latent trajectories as one table per trial.
    ExportLatents(ExportArgs),
}

/// TOML layout shared by all commands; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lorenz: LorenzConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_trials: Option<usize>,
    #[arg(long)]
    pub n_conditions: Option<usize>,
    #[arg(long)]
    pub n_neurons: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub rate_scale: Option<f64>,
    #[arg(long)]
    pub held_out_fraction: Option<f64>,
    #[arg(long)]
    pub forward_fraction: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Model variant, e.g. `full` or `baseline5_first_order`.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Continue from a checkpoint; its model config takes precedence.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub kl_weight_max: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Val,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Required unless `--oracle-rates` is given.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// When given, the checkpoint's model config must hash to the config
    /// resolved from this file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_RIDGE_ALPHA)]
    pub ridge_alpha: f64,
    /// Debug: score the ground-truth rates instead of a model.
    #[arg(long)]
    pub oracle_rates: bool,
}

#[derive(Args, Debug, Default)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory, one `trial_NNNN.tsv` per trial.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub split: Split,
    #[arg(long)]
    pub max_trials: Option<usize>,
}

/// Record of one command invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn build_id() -> String {
    format!(
        "{} {}",
        env!("CARGO_PKG_VERSION"),
        option_env!("LANGEVIN_BUILD_ID").unwrap_or("dev")
    )
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: RunConfig) -> Self {
        Self {
            command: command.into(),
            build: build_id(),
            seed,
            started_unix: now(),
            finished_unix: 0.0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config,
        }
    }

    fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.into(), path.display().to_string());
        self
    }

    fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.into(), path.display().to_string());
    }

    fn write(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now();
        let body = toml::to_string(&self).map_err(|e| Error::config(e.to_string()))?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::ExportLatents(a) => cmd_export_latents(&a),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn resolve_lorenz(a: &GenerateArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::load(a.config.as_deref())?;
    let l = &mut rc.lorenz;
    set(&mut l.seed, a.seed);
    set(&mut l.n_trials, a.n_trials);
    set(&mut l.n_conditions, a.n_conditions);
    set(&mut l.n_neurons, a.n_neurons);
    set(&mut l.n_steps, a.n_steps);
    set(&mut l.rate_scale, a.rate_scale);
    set(&mut l.held_out_fraction, a.held_out_fraction);
    set(&mut l.forward_fraction, a.forward_fraction);
    l.validate()?;
    Ok(rc)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let rc = resolve_lorenz(a)?;
    let manifest = RunManifest::new("generate", rc.lorenz.seed, rc.clone());
    let ds = data::make_dataset(&rc.lorenz)?;
    data::write_dataset(&a.out, &ds, Some(&rc.lorenz))?;
    let s = ds.summary();
    println!(
        "train trials {}  val trials {}  total spikes {}  mean rate {:.4} spikes/bin",
        s.n_train, s.n_val, s.total_spikes, s.mean_rate
    );
    let mut manifest = match &a.config {
        Some(c) => manifest.input("config", c),
        None => manifest,
    };
    manifest.output("dataset", &a.out);
    manifest.write(&a.out.join(RUN_MANIFEST))
}

fn dataset_dims(ds: &Dataset) -> Result<(usize, usize)> {
    let first = ds
        .train
        .first()
        .or(ds.val.first())
        .ok_or_else(|| Error::Data("dataset has no trials".into()))?;
    Ok((first.n_neurons(), first.held_in().len()))
}

/// Resolved model and train configs; data dimensions always win.
pub fn resolve_train(a: &TrainArgs, ds: &Dataset) -> Result<RunConfig> {
    let mut rc = RunConfig::load(a.config.as_deref())?;
    let (n, n_in) = dataset_dims(ds)?;
    let m = &mut rc.model;
    m.n_neurons = n;
    m.n_inputs = n_in;
    set(&mut m.variant, a.variant);
    set(&mut m.gamma, a.gamma);
    set(&mut m.kl_weight_max, a.kl_weight_max);
    set(&mut m.seed, a.seed);
    let t = &mut rc.train;
    set(&mut t.seed, a.seed);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.patience, a.patience);
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    rc.model.validate()?;
    rc.train.validate()?;
    Ok(rc)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let ds = data::read_dataset(&a.data)?;
    let mut rc = resolve_train(a, &ds)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = train::load_checkpoint(path)?;
            rc.model = ckpt.model.config.clone();
            Trainer::resume(ckpt, Some(rc.train.clone()))?
        }
        None => Trainer::new(LangevinFlow::new(rc.model.clone())?, rc.train.clone())?,
    };
    let mut manifest = RunManifest::new("train", rc.train.seed, rc.clone()).input("data", &a.data);
    if let Some(p) = &a.resume {
        manifest = manifest.input("resume", p);
    }
    if let Some(p) = &a.config {
        manifest = manifest.input("config", p);
    }
    info!(
        "training {} ({} parameters) on {} trials",
        rc.model.variant,
        trainer.model.n_params(),
        ds.train.len()
    );
    trainer.fit(&ds.train, &ds.val, Some(&a.out))?;
    println!(
        "epochs {}  steps {}  best val co-bps {:.4} (epoch {})",
        trainer.state.epoch, trainer.state.step, trainer.state.best_co_bps, trainer.state.best_epoch
    );
    for f in ["train_log.tsv", "best.lgvc", "last.lgvc", "model_card.txt"] {
        manifest.output(f, &a.out.join(f));
    }
    manifest.write(&a.out.join(RUN_MANIFEST))
}

fn split(ds: &Dataset, s: Split) -> &[Trial] {
    match s {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
    }
}

fn load_model(path: &Path, config: Option<&Path>, ds: &Dataset) -> Result<LangevinFlow> {
    let Some(cfg_path) = config else {
        return Ok(train::load_checkpoint(path)?.model);
    };
    let rc = resolve_train(
        &TrainArgs {
            config: Some(cfg_path.to_path_buf()),
            ..TrainArgs::default()
        },
        ds,
    )?;
    Ok(train::load_checkpoint_for(path, &rc.model)?.model)
}

/// Summary table: a `metric\tvalue` header then one row per metric.
pub fn report_table(r: &EvalReport) -> String {
    let mut s = String::from("metric\tvalue\n");
    for (k, v) in EvalReport::parse_text(&r.to_text()) {
        let _ = writeln!(s, "{k}\t{v}");
    }
    s
}

pub fn parse_report_table(text: &str) -> Result<BTreeMap<String, String>> {
    let mut lines = text.lines();
    if lines.next() != Some("metric\tvalue") {
        return Err(Error::Data("report table must start with `metric\\tvalue`".into()));
    }
    lines
        .map(|l| {
            l.split_once('\t')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Data(format!("malformed report row `{l}`")))
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let ds = data::read_dataset(&a.data)?;
    let trials = split(&ds, a.split);
    let report = if a.oracle_rates {
        let rates = trials
            .iter()
            .map(|t| {
                t.rates
                    .clone()
                    .ok_or_else(|| Error::Data("--oracle-rates needs ground-truth rates".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        metrics::evaluate_rates(&rates, trials, a.ridge_alpha)?
    } else {
        let ckpt = a
            .ckpt
            .as_deref()
            .ok_or_else(|| Error::config("--ckpt is required unless --oracle-rates is set"))?;
        metrics::evaluate(&load_model(ckpt, a.config.as_deref(), &ds)?, trials, a.ridge_alpha)?
    };
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&a.report, report_table(&report)).map_err(|e| Error::io(&a.report, e))?;
    let neurons = a.report.with_extension("neurons.tsv");
    fs::write(&neurons, report.to_tsv()).map_err(|e| Error::io(&neurons, e))?;
    println!("co_bps\t{:.6}", report.co_bps);

    let mut manifest = RunManifest::new("eval", 0, RunConfig::default()).input("data", &a.data);
    if let Some(c) = &a.ckpt {
        manifest = manifest.input("ckpt", c);
    }
    manifest.inputs.insert("split".into(), format!("{:?}", a.split).to_lowercase());
    manifest.inputs.insert("oracle_rates".into(), a.oracle_rates.to_string());
    manifest.inputs.insert("ridge_alpha".into(), a.ridge_alpha.to_string());
    manifest.output("report", &a.report);
    manifest.output("neurons", &neurons);
    manifest.write(&a.report.with_extension("manifest.toml"))?;
    Ok(report)
}

pub const LATENT_HEADER: &str = "t\tgroup\tindex\tz\tv";

/// One latent table: rows ordered by time then dimension.
pub fn latent_table(z: &crate::Tensor, v: &crate::Tensor, groups: usize) -> String {
    let d = z.cols();
    let per = d / groups.max(1);
    let mut s = String::from(LATENT_HEADER);
    s.push('\n');
    for t in 0..z.rows() {
        for j in 0..d {
            let _ = writeln!(s, "{t}\t{}\t{}\t{}\t{}", j / per, j % per, z.at(t, j), v.at(t, j));
        }
    }
    s
}

pub fn cmd_export_latents(a: &ExportArgs) -> Result<()> {
    let ds = data::read_dataset(&a.data)?;
    let ckpt = train::load_checkpoint(&a.ckpt)?;
    let model = ckpt.model;
    if !model.config.variant.has_latents() {
        return Err(Error::config(format!("variant {} has no latent trajectory", model.config.variant)));
    }
    let trials = split(&ds, a.split);
    let trials = &trials[..a.max_trials.unwrap_or(trials.len()).min(trials.len())];
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (i, p) in model.predict(trials)?.into_iter().enumerate() {
        let (Some(z), Some(v)) = (p.z, p.v) else {
            return Err(Error::Contract("prediction is missing latents".into()));
        };
        let path = a.out.join(format!("trial_{i:04}.tsv"));
        fs::write(&path, latent_table(&z, &v, model.config.groups)).map_err(|e| Error::io(&path, e))?;
    }
    println!("wrote {} latent tables to {}", trials.len(), a.out.display());
    let rc = RunConfig {
        model: model.config.clone(),
        ..RunConfig::default()
    };
    let mut manifest = RunManifest::new("export-latents", model.config.seed, rc)
        .input("data", &a.data)
        .input("ckpt", &a.ckpt);
    manifest.output("latents", &a.out);
    manifest.write(&a.out.join(RUN_MANIFEST))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        for args in [
            vec!["lf", "generate", "--out", "d", "--n-trials", "10"],
            vec!["lf", "train", "--data", "d", "--out", "o", "--variant", "baseline5_first_order"],
            vec!["lf", "eval", "--data", "d", "--report", "r.tsv", "--oracle-rates"],
            vec!["lf", "export-latents", "--data", "d", "--ckpt", "c", "--out", "o"],
        ] {
            Cli::try_parse_from(&args).unwrap();
        }
        assert!(Cli::try_parse_from(["lf", "train", "--data", "d", "--out", "o", "--variant", "nope"]).is_err());
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[lorenz]\nn_trials = 40\nn_conditions = 8\nn_neurons = 12\n").unwrap();
        let a = GenerateArgs {
            config: Some(path),
            n_neurons: Some(9),
            ..GenerateArgs::default()
        };
        let rc = resolve_lorenz(&a).unwrap();
        assert_eq!(rc.lorenz.n_trials, 40);
        assert_eq!(rc.lorenz.n_neurons, 9);
        assert_eq!(rc.lorenz.rho, LorenzConfig::default().rho);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[model]\nlatent_dims = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&path)), Err(Error::Config(_))));
    }

    #[test]
    fn report_table_round_trips() {
        let r = EvalReport {
            n_trials: 3,
            co_bps: 0.25,
            fp_bps: f64::NAN,
            rate_r2: None,
            psth_r2: 0.5,
            decode_r2: 0.75,
            nll: 12.0,
            per_neuron: Vec::new(),
        };
        let t = parse_report_table(&report_table(&r)).unwrap();
        assert_eq!(t["co_bps"], "0.250000");
        assert_eq!(t["fp_bps"], "nan");
        assert_eq!(t["rate_r2"], "none");
        assert_eq!(t.len(), 7);
    }

    #[test]
    fn latent_table_layout() {
        let z = crate::Tensor::matrix(2, 4, (0..8).map(f64::from).collect()).unwrap();
        let v = crate::Tensor::zeros(&[2, 4]);
        let s = latent_table(&z, &v, 2);
        let rows: Vec<&str> = s.lines().collect();
        assert_eq!(rows.len(), 1 + 2 * 4);
        assert_eq!(rows[4], "0\t1\t1\t3\t0");
        assert_eq!(rows[5], "1\t0\t0\t4\t0");
    }
}
