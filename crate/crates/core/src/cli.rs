//! Command-line front end: one JSON run configuration, `--set` overrides and
//! a handful of convenience flags; every command writes its resolved config.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{bail, Error, Result};
use crate::evaluation::{
    aggregate, plan, run_ablation, run_csp, run_plan, train_val_split, write_rows_csv,
    write_table_json, ResultRow, Scenario, DEFAULT_FILTERS,
};
use crate::explain::{class_psd, class_topomaps, export_embeddings, write_psd, write_topomaps, Lrp, DEFAULT_EPS};
use crate::miestim::ScorerConfig;
use crate::model::{checkpoint, Backbone, EncoderConfig, Model, ModelConfig};
use crate::signal::trialset::{self, default_class_names};
use crate::signal::{generate_cohort, CohortSpec, Trial};
use crate::training::{fit, write_history, LossWeights, TrainConfig, Variant};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const TRIALSET_FILE: &str = "trials.trialset";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

/// Encoder choices; input shape comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub backbone: Backbone,
    /// Backbone default when absent.
    pub base_depth: Option<usize>,
    pub depth_multiplier: Option<usize>,
    pub pools: Option<(usize, usize)>,
    pub dropout_rate: Option<f64>,
    pub scorers: ScorerConfig,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            backbone: Backbone::EegNet,
            base_depth: None,
            depth_multiplier: None,
            pools: None,
            dropout_rate: None,
            scorers: ScorerConfig::default(),
        }
    }
}

impl ModelSettings {
    pub fn resolve(&self, n_c: usize, n_t: usize, sample_rate: f64) -> ModelConfig {
        let mut e = EncoderConfig::new(self.backbone, n_c, n_t, sample_rate);
        if let Some(v) = self.base_depth {
            e.base_depth = v;
        }
        if let Some(v) = self.depth_multiplier {
            e.depth_multiplier = v;
        }
        if let Some(v) = self.pools {
            e.pools = v;
        }
        if let Some(v) = self.dropout_rate {
            e.dropout_rate = v;
        }
        ModelConfig {
            encoder: e,
            scorers: self.scorers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides both `cohort.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Trial set to read; a cohort is generated from `cohort` when absent.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub cohort: CohortSpec,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub scenario: Scenario,
    /// Variants run by `ablate`.
    pub variants: Vec<Variant>,
    pub baseline: Option<Baseline>,
    pub csp_filters: usize,
    pub lrp_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("out"),
            data: None,
            checkpoint: None,
            cohort: CohortSpec::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            scenario: Scenario::II,
            variants: Variant::ALL.to_vec(),
            baseline: None,
            csp_filters: DEFAULT_FILTERS,
            lrp_eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Csp,
}

#[derive(Debug, Parser)]
#[command(name = "midecomp", version, about = "Subject-invariant representation learning for multichannel time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "deepconvnet|eegnet")]
    pub backbone: Option<String>,
    #[arg(long, global = true, value_name = "1|2")]
    pub scenario: Option<String>,
    #[arg(long, global = true, value_name = "I|II|III|IV")]
    pub variant: Option<String>,
    /// Loss weights alpha,beta,gamma.
    #[arg(long, global = true, value_name = "A,B,C", allow_hyphen_values = true)]
    pub weights: Option<String>,
    /// Trial set file.
    #[arg(long, global = true, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Checkpoint manifest.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub baseline: Option<Baseline>,
    /// Override one config entry by dotted path, value as JSON (or a bare string).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort and write it as a trial set.
    Synth,
    /// Train one model on a trial set (7:1 train/validation split).
    Train,
    /// Evaluate under scenario 1 or 2.
    Eval,
    /// Run the ablation variants under one protocol.
    Ablate,
    /// Relevance topographies, embeddings and per-class PSD for a checkpoint.
    Explain,
    /// Feature embeddings of a checkpoint for external visualization.
    Export,
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn set_path(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(Config, "--set expects key=value, got {assignment:?}");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!(Config, "--set {key}: {} is not an object", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    bail!(Config, "--set with an empty key")
}

fn config_error(e: serde_json::Error) -> Error {
    Error::Config(format!("invalid run configuration: {e}"))
}

/// Defaults, then the config file, then `--set`, then the dedicated flags.
pub fn resolve_config(args: &GlobalArgs) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)?;
        let file: Value = serde_json::from_str(&text).map_err(config_error)?;
        merge(&mut doc, file);
    }
    for s in &args.set {
        set_path(&mut doc, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(config_error)?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(seed) = cfg.seed {
        cfg.cohort.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(b) = &args.backbone {
        cfg.model.backbone = b.parse()?;
    }
    if let Some(s) = &args.scenario {
        cfg.scenario = s.parse()?;
    }
    if let Some(v) = &args.variant {
        cfg.train.variant = v.parse()?;
        cfg.variants = vec![cfg.train.variant];
    }
    if let Some(w) = &args.weights {
        cfg.train.weights = w.parse::<LossWeights>()?;
    }
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(b) = args.baseline {
        cfg.baseline = Some(b);
    }
    cfg.train.validate()?;
    cfg.cohort.validate()?;
    if !(cfg.lrp_eps > 0.0) {
        bail!(Config, "lrp_eps must be positive");
    }
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(cfg.out.join(RESOLVED_CONFIG), text)?;
    Ok(())
}

fn load_trials(cfg: &RunConfig) -> Result<Vec<Trial>> {
    match &cfg.data {
        Some(p) => Ok(trialset::load(p)?.1),
        None => generate_cohort(&cfg.cohort),
    }
}

fn model_config(cfg: &RunConfig, trials: &[Trial]) -> Result<ModelConfig> {
    let Some(t) = trials.first() else {
        bail!(BatchSize, "no trials");
    };
    Ok(cfg.model.resolve(t.n_c(), t.n_t(), t.sample_rate()))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Model<f32>> {
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
    Ok(checkpoint::load(&path)?.1)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let trials = generate_cohort(&cfg.cohort)?;
    let path = cfg.out.join(TRIALSET_FILE);
    trialset::save(&path, &trials, &default_class_names())?;
    write_resolved(cfg)?;
    info!("wrote {} trials to {}", trials.len(), path.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let trials = load_trials(cfg)?;
    let mcfg = model_config(cfg, &trials)?;
    let (train, val) = train_val_split(&trials, cfg.train.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &trials[i]).collect::<Vec<_>>();
    write_resolved(cfg)?;
    let model = Model::<f32>::new(mcfg, cfg.train.seed)?;
    let r = fit(model, &pick(&train), &pick(&val), &cfg.train)?;
    checkpoint::save(&r.model, cfg.train.seed, r.best_epoch, &cfg.out.join(CHECKPOINT_FILE))?;
    write_history(create(&cfg.out.join(HISTORY_FILE))?, &r.history)?;
    let last = r.history.last().map_or(f64::NAN, |h| h.val_acc);
    info!("best epoch {}; final validation accuracy {last:.4}", r.best_epoch);
    Ok(())
}

fn write_results(cfg: &RunConfig, stem: &str, rows: Vec<ResultRow>) -> Result<()> {
    write_rows_csv(create(&cfg.out.join(format!("{stem}.csv")))?, &rows)?;
    let table = aggregate(rows)?;
    write_table_json(create(&cfg.out.join(format!("{stem}.json")))?, &table)?;
    println!("{stem}: mean {:.4} std {:.4}", table.mean, table.std);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let trials = load_trials(cfg)?;
    let p = plan(cfg.scenario, &trials, cfg.train.seed)?;
    write_resolved(cfg)?;
    let rows = match cfg.baseline {
        Some(Baseline::Csp) => run_csp(&trials, &p, cfg.csp_filters)?,
        None => run_plan(&trials, &p, &model_config(cfg, &trials)?, &cfg.train)?,
    };
    write_results(cfg, "results", rows)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let trials = load_trials(cfg)?;
    let p = plan(cfg.scenario, &trials, cfg.train.seed)?;
    write_resolved(cfg)?;
    let tables = run_ablation(&trials, &p, &model_config(cfg, &trials)?, &cfg.train, &cfg.variants)?;
    let rows: Vec<ResultRow> = tables.iter().flat_map(|(_, t)| t.rows.clone()).collect();
    for (v, t) in &tables {
        println!("variant {v}: mean {:.4} std {:.4}", t.mean, t.std);
    }
    write_rows_csv(create(&cfg.out.join("ablation.csv"))?, &rows)?;
    let summary: Vec<_> = tables
        .iter()
        .map(|(v, t)| serde_json::json!({ "variant": v, "table": t }))
        .collect();
    serde_json::to_writer_pretty(create(&cfg.out.join("ablation.json"))?, &summary)?;
    Ok(())
}

/// Writes exactly `topomap.csv`, `embeddings.csv` and `psd.csv`.
fn cmd_explain(cfg: &RunConfig) -> Result<()> {
    let model = load_checkpoint(cfg)?;
    let trials = load_trials(cfg)?;
    let refs: Vec<&Trial> = trials.iter().collect();
    let lrp = Lrp::new(&model, cfg.lrp_eps)?;
    write_topomaps(create(&cfg.out.join("topomap.csv"))?, &class_topomaps(&lrp, &model, &refs)?)?;
    export_embeddings(create(&cfg.out.join("embeddings.csv"))?, &model, &refs)?;
    write_psd(create(&cfg.out.join("psd.csv"))?, &class_psd(&refs)?)?;
    Ok(())
}

fn cmd_export(cfg: &RunConfig) -> Result<()> {
    let model = load_checkpoint(cfg)?;
    let trials = load_trials(cfg)?;
    let refs: Vec<&Trial> = trials.iter().collect();
    write_resolved(cfg)?;
    export_embeddings(create(&cfg.out.join("embeddings.csv"))?, &model, &refs)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    fs::create_dir_all(&cfg.out)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Explain => cmd_explain(&cfg),
        Command::Export => cmd_export(&cfg),
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
