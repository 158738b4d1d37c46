//! Subcommands of the `ecmt` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ecmt_core::data::{calibration_batches, gen_synthetic_mtl, split, DatasetSpec, MtlDataset, SplitSpec, Suite, VECTOR_DIM};
use ecmt_core::evaluation::{
    controllability_sweep, dirichlet_sample, mid_budget, write_report_csv, SweepSetup, DEFAULT_ALPHA_CLASSIFICATION,
    DEFAULT_PREFERENCE_COUNT, DEFAULT_REFERENCE_LOSS,
};
use ecmt_core::hv::{hypervolume_exact, hypervolume_mc, MAX_EXACT_DIMS};
use ecmt_core::optim::AdamConfig;
use ecmt_core::predictor::{collect_pairs, read_records_csv, train_predictor, write_records_csv, Predictor, PredictorHyper, DEFAULT_PAIRS};
use ecmt_core::search::{search, PreferenceQuery, SearchConfig, DEFAULT_CYCLES, DEFAULT_POOL_SIZE};
use ecmt_core::slimnet::{Architecture, SuperNet, WidthConfig, WidthList, WIDTH_STEP};
use ecmt_core::train::{train_supernet, write_history_csv, TrainOptions, TrainingRecipe};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::measure::{calibration_for, measure};

/// Hidden width of the vector-suite architecture.
pub const VECTOR_HIDDEN: usize = 32;
pub const DEFAULT_SAMPLES: usize = 2000;
pub const DEFAULT_MIN_WIDTH: f64 = 0.6;
/// Monte-Carlo samples used by `hv` beyond the exact dimension limit.
pub const HV_MC_SAMPLES: usize = 1_000_000;

#[derive(Debug, Parser)]
#[command(name = "ecmt", version, about = "Slimmable multi-task SuperNet training and preference-driven SubNet search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-task dataset.
    GenData(GenDataArgs),
    /// Train a SuperNet on the train split of a dataset.
    Train(TrainArgs),
    /// Measure sampled SubNets on the holdout split.
    CollectPairs(CollectPairsArgs),
    /// Fit the loss predictor on collected pairs.
    TrainPredictor(TrainPredictorArgs),
    /// Search a SubNet for a budget and task preferences.
    Search(SearchArgs),
    /// Measure one SubNet, or sweep preferences and report hypervolume.
    Eval(EvalArgs),
    /// Hypervolume of loss points.
    Hv(HvArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SuiteArg {
    Shapes,
    Vector,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataArgs {
    /// JSON file with any of the flag values; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub suite: Option<SuiteArg>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset file written by `gen-data`.
    #[arg(long = "data")]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint path; defaults to `<out>/supernet.ecmt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<f64>>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub rho: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectPairsArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long = "data")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPredictorArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Pairs CSV written by `collect-pairs`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Budget in MACs.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub prefs: Option<Vec<f64>>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Result JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long = "data")]
    pub dataset: Option<PathBuf>,
    /// SubNet JSON: a width config or a search result.
    #[arg(long)]
    pub subnet: Option<PathBuf>,
    /// Measure the uniform config at this ratio.
    #[arg(long)]
    pub width: Option<f64>,
    /// Sweep mode: predictor used by the search.
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Sweep budget in MACs; defaults to the midpoint of the MAC range.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub prefs_count: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "ref", value_delimiter = ',')]
    pub reference: Option<Vec<f64>>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (single SubNet) or directory (sweep).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HvArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// CSV of loss points, one per row; a non-numeric first row is a header.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long = "ref", value_delimiter = ',')]
    pub reference: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Dataset enabling /api/evaluate.
    #[arg(long = "data")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Allowed CORS origin; `*` allows any.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

/// Overlays the set flags on the JSON config file, if any.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T, CliError> {
    let mut merged = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
            serde_json::from_str::<serde_json::Value>(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?
        }
        None => serde_json::json!({}),
    };
    let Some(base) = merged.as_object_mut() else {
        return Err(CliError::usage("config must be a JSON object"));
    };
    if let serde_json::Value::Object(set) = serde_json::to_value(flags)? {
        for (k, v) in set {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| CliError::usage(format!("invalid config: {e}")))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::usage(format!("missing required --{flag}")))
}

fn load_dataset(path: &Path) -> Result<MtlDataset, CliError> {
    MtlDataset::load(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn load_net(path: &Path) -> Result<SuperNet, CliError> {
    SuperNet::load(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn load_predictor(path: &Path) -> Result<Predictor, CliError> {
    Predictor::load(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => print_line(&text)?,
    }
    Ok(())
}

/// Writes to stdout; a closed pipe is not an error.
fn print_line(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn architecture_for(data: &MtlDataset) -> Architecture {
    match data.spec.suite {
        Suite::Shapes => Architecture::shapes(data.tasks.clone()),
        Suite::Vector => Architecture::vector(VECTOR_DIM, VECTOR_HIDDEN, data.tasks.clone()),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::CollectPairs(a) => collect(a),
        Command::TrainPredictor(a) => fit_predictor(a),
        Command::Search(a) => run_search(a),
        Command::Eval(a) => eval(a),
        Command::Hv(a) => hv(a),
        Command::Serve(a) => crate::service::serve(a),
    }
}

fn gen_data(flags: GenDataArgs) -> Result<(), CliError> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let mut spec = match a.suite.unwrap_or(SuiteArg::Shapes) {
        SuiteArg::Shapes => DatasetSpec::shapes(a.samples.unwrap_or(DEFAULT_SAMPLES)),
        SuiteArg::Vector => DatasetSpec::vector(a.samples.unwrap_or(DEFAULT_SAMPLES)),
    };
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    let mut manifest = RunManifest::start("gen-data", flags.config.as_deref(), Some(seed), &out);
    let data = gen_synthetic_mtl(&spec, seed)?;
    data.save(&out)?;
    manifest.output(&out)?;
    manifest.finish()?;
    log::info!("wrote {} samples to {}", data.inputs.shape()[0], out.display());
    Ok(())
}

fn train(flags: TrainArgs) -> Result<(), CliError> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let data_path = required(a.dataset, "data")?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let widths = match a.widths {
        Some(w) => WidthList::new(w)?,
        None => WidthList::from_min(DEFAULT_MIN_WIDTH)?,
    };
    let defaults = TrainingRecipe::default();
    let recipe = TrainingRecipe {
        b: a.b.unwrap_or(defaults.b),
        lambda: a.lambda.unwrap_or(defaults.lambda),
        rho: a.rho.unwrap_or_default(),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        adam: AdamConfig { lr: a.lr.unwrap_or(defaults.adam.lr), ..defaults.adam },
        seed,
    };
    let data = load_dataset(&data_path)?;
    let (train_split, _) = split(&data, &SplitSpec::default())?;
    let mut net = SuperNet::new(architecture_for(&data), widths, seed)?;
    let report = train_supernet(&mut net, &train_split, &recipe, TrainOptions::default())?;

    std::fs::create_dir_all(&out)?;
    let mut manifest = RunManifest::start("train", flags.config.as_deref(), Some(seed), &out);
    manifest.input(&data_path)?;
    let ckpt = a.checkpoint.unwrap_or_else(|| out.join("supernet.ecmt"));
    net.save(&ckpt)?;
    let history = out.join("history.csv");
    write_history_csv(&history, &report.history)?;
    manifest.output(&ckpt)?;
    manifest.output(&history)?;
    manifest.finish()?;
    Ok(())
}

fn collect(flags: CollectPairsArgs) -> Result<(), CliError> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let net_path = required(a.net, "net")?;
    let data_path = required(a.dataset, "data")?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let net = load_net(&net_path)?;
    let data = load_dataset(&data_path)?;
    let (train_split, holdout) = split(&data, &SplitSpec::default())?;
    let calib = calibration_batches(&train_split, 32, 8)?;
    let records = collect_pairs(&net, a.pairs.unwrap_or(DEFAULT_PAIRS), &holdout, &calib, seed)?;
    let mut manifest = RunManifest::start("collect-pairs", flags.config.as_deref(), Some(seed), &out);
    manifest.input(&net_path)?;
    manifest.input(&data_path)?;
    write_records_csv(&out, &records)?;
    manifest.output(&out)?;
    manifest.finish()?;
    Ok(())
}

fn fit_predictor(flags: TrainPredictorArgs) -> Result<(), CliError> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let pairs = required(a.pairs, "pairs")?;
    let out = required(a.out, "out")?;
    let d = PredictorHyper::default();
    let hyper = PredictorHyper {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let records = read_records_csv(&pairs)?;
    let (predictor, report) = train_predictor(&records, &hyper)?;
    let mut manifest = RunManifest::start("train-predictor", flags.config.as_deref(), Some(hyper.seed), &out);
    manifest.input(&pairs)?;
    predictor.save(&out)?;
    manifest.output(&out)?;
    manifest.finish()?;
    write_json(None, &report)
}

fn run_search(flags: SearchArgs) -> Result<(), CliError> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let net_path = required(a.net, "net")?;
    let pred_path = required(a.predictor, "predictor")?;
    let query = PreferenceQuery { budget_macs: required(a.budget, "budget")?, preferences: required(a.prefs, "prefs")? };
    let cfg = SearchConfig {
        pool_size: a.pool.unwrap_or(DEFAULT_POOL_SIZE),
        cycles: a.cycles.unwrap_or(DEFAULT_CYCLES),
        eta: WIDTH_STEP,
        seed: a.seed.unwrap_or(0),
    };
    let net = load_net(&net_path)?;
    let predictor = load_predictor(&pred_path)?;
    let result = search(&net, &predictor, &query, &cfg)?;
    write_json(a.out.as_deref(), &result)?;
    if let Some(out) = &a.out {
        let mut manifest = RunManifest::start("search", flags.config.as_deref(), Some(cfg.seed), out);
        manifest.input(&net_path)?;
        manifest.input(&pred_path)?;
        manifest.output(out)?;
        manifest.finish()?;
    }
    Ok(())
}

/// Accepts either a bare width config or any object with a `config` field.
fn read_subnet(path: &Path) -> Result<WidthConfig, CliError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Subnet {
        Bare(WidthConfig),
        Wrapped { config: WidthConfig },
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
    Ok(match serde_json::from_str::<Subnet>(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))? {
        Subnet::Bare(c) | Subnet::Wrapped { config: c } => c,
    })
}

fn eval(flags: EvalArgs) -> Result<(), CliError> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let net_path = required(a.net, "net")?;
    let data_path = required(a.dataset, "data")?;
    let seed = a.seed.unwrap_or(0);
    let net = load_net(&net_path)?;
    let data = load_dataset(&data_path)?;
    let calib = calibration_for(&data)?;

    let single = match (&a.subnet, a.width) {
        (Some(_), Some(_)) => return Err(CliError::usage("--subnet and --width are mutually exclusive")),
        (Some(p), None) => Some(read_subnet(p)?),
        (None, Some(r)) => Some(net.uniform_config(r)),
        (None, None) => None,
    };
    let mut manifest = a.out.as_deref().map(|o| RunManifest::start("eval", flags.config.as_deref(), Some(seed), o));
    if let Some(m) = manifest.as_mut() {
        m.input(&net_path)?;
        m.input(&data_path)?;
    }
    if let Some(cfg) = single {
        let result = measure(&net, &cfg, &data, &calib)?;
        write_json(a.out.as_deref(), &result)?;
        if let (Some(mut m), Some(out)) = (manifest, a.out.as_deref()) {
            m.output(out)?;
            m.finish()?;
        }
        return Ok(());
    }

    let pred_path = a.predictor.ok_or_else(|| CliError::usage("eval needs --subnet, --width, or --predictor for a sweep"))?;
    let predictor = load_predictor(&pred_path)?;
    let tasks = net.task_count();
    let budget = match a.budget {
        Some(b) => b,
        None => mid_budget(&net)?,
    };
    let alpha = vec![a.alpha.unwrap_or(DEFAULT_ALPHA_CLASSIFICATION); tasks];
    let prefs = dirichlet_sample(&alpha, a.prefs_count.unwrap_or(DEFAULT_PREFERENCE_COUNT), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let setup = SweepSetup {
        data: &data,
        calib: &calib,
        reference: a.reference.unwrap_or_else(|| vec![DEFAULT_REFERENCE_LOSS; tasks]),
        search: SearchConfig {
            pool_size: a.pool.unwrap_or(DEFAULT_POOL_SIZE),
            cycles: a.cycles.unwrap_or(DEFAULT_CYCLES),
            eta: WIDTH_STEP,
            seed,
        },
        marginal_bins: 5,
    };
    let report = controllability_sweep(&net, &predictor, budget, &prefs, &setup)?;
    match a.out {
        Some(out) => {
            std::fs::create_dir_all(&out)?;
            let json = out.join("report.json");
            let csv = out.join("report.csv");
            write_json(Some(&json), &report)?;
            write_report_csv(&csv, &report)?;
            if let Some(mut m) = manifest {
                m.input(&pred_path)?;
                m.output(&json)?;
                m.output(&csv)?;
                m.out = out;
                m.finish()?;
            }
        }
        None => write_json(None, &report)?,
    }
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut points = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let parsed: Result<Vec<f64>, _> = row.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(p) => points.push(p),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(CliError::Domain(format!("{}: row {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(points)
}

#[derive(Serialize)]
struct HvOutput {
    hv: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stderr: Option<f64>,
    points: usize,
    reference: Vec<f64>,
}

fn hv(flags: HvArgs) -> Result<(), CliError> {
    let a = resolve(&flags, flags.config.as_deref())?;
    let path = required(a.points, "points")?;
    let reference = required(a.reference, "ref")?;
    let points = read_points(&path)?;
    let (value, stderr) = if reference.len() <= MAX_EXACT_DIMS {
        (hypervolume_exact(&points, &reference)?, None)
    } else {
        let est = hypervolume_mc(&points, &reference, HV_MC_SAMPLES, &mut ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(0)))?;
        (est.hv, Some(est.stderr))
    };
    print_line(&format!("{value:?}"))?;
    if let Some(se) = stderr {
        log::info!("Monte-Carlo standard error {se:e}");
    }
    if let Some(out) = &a.out {
        let mut manifest = RunManifest::start("hv", flags.config.as_deref(), a.seed, out);
        manifest.input(&path)?;
        write_json(Some(out), &HvOutput { hv: value, stderr, points: points.len(), reference })?;
        manifest.output(out)?;
        manifest.finish()?;
    }
    Ok(())
}
