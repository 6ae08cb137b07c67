//! Command-line front end.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for data errors
//! (including a failed gradient check).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::encode::{make_windows, write_samples_csv, EncodedDataset, Scale, StationIndex};
use crate::eval::{
    evaluate, evaluate_flat, export_paths, streams_for, sweep_windows, train_flat, train_hier, write_curves_csv,
    write_flat_metrics_csv, write_metrics_csv, write_paths_csv, write_sweep_csv, SWEEP_WINDOWS,
};
use crate::geo::GeoConfig;
use crate::hier::{load_model, save_model, SavedModel};
use crate::ingest::{clean_pipeline, flatten, parse_udr_csv, write_udr_csv, CleanConfig, Trajectory, DEFAULT_V_MAX_KMH};
use crate::nn::{layer_suite, model_check, LayerOrder, LrnParams, TrainConfig};
use crate::synth::{generate_population, generate_world, inject_anomalies_with, Injection, PopulationSpec, WorldSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Seed used when neither a flag nor the config file sets one.
pub const SEED_ENV: &str = "DEEPSPACE_SEED";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "deepspace", version, about = "Hierarchical next-location prediction from mobile usage records")]
struct Cli {
    /// Flat key=value file with defaults for any option; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic usage-record CSV.
    Generate(GenerateArgs),
    /// Drop dirty records and correct station switching.
    Clean(CleanArgs),
    /// Write supervised windows of a cleaned CSV.
    Encode(EncodeArgs),
    /// Train a hierarchical or flat model on the training split.
    Train(TrainArgs),
    /// Score a trained model on the test split.
    Eval(EvalArgs),
    /// Train and score both model kinds for several window lengths.
    Sweep(SweepArgs),
    /// Write true and predicted coordinates along one user's trajectory.
    ExportPaths(ExportArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Number of location areas.
    #[arg(long)]
    lacs: Option<usize>,
    /// Stations per location area.
    #[arg(long)]
    stations: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    records_per_day: Option<usize>,
    /// Probability of following the daily routine at each step.
    #[arg(long)]
    regularity: Option<f64>,
    /// Independent, uniformly distributed labels (with regularity 0).
    #[arg(long)]
    iid: bool,
    /// Fraction of eligible record pairs that receive a switching artifact.
    #[arg(long)]
    anomaly_rate: Option<f64>,
    /// Ground-truth CSV of injected artifacts.
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV (standard output when absent).
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CleanArgs {
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Speed limit in km/h for the overspeed rule.
    #[arg(long)]
    vmax: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Fine,
    Coarse,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Window length.
    #[arg(short = 'W', long = "window")]
    window: Option<usize>,
    #[arg(long, value_enum, default_value_t = ScaleArg::Fine)]
    scale: ScaleArg,
    /// Station index CSV (label, coarse label, area code, coordinates).
    #[arg(long, value_name = "FILE")]
    index: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Hierarchical,
    Flat,
}

#[derive(Args, Debug, Default)]
struct ModelOpts {
    /// Window length.
    #[arg(short = 'W', long = "window")]
    window: Option<usize>,
    /// Passes over the training stream.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Leading fraction of each user's records used for training.
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    /// Model file to write.
    #[arg(short, long, value_name = "FILE")]
    output: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Training-curve CSV.
    #[arg(long, value_name = "FILE")]
    curves: Option<PathBuf>,
    /// Update the fine models concurrently.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    model: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Comma-separated window lengths.
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<usize>>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(short, long, value_name = "FILE")]
    input: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    model: PathBuf,
    /// User (phone number); the first user when absent.
    #[arg(long)]
    user: Option<String>,
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

const CONFIG_KEYS: &[&str] = &[
    "seed",
    "window",
    "epochs",
    "learning_rate",
    "batch_size",
    "train_fraction",
    "kernel_width",
    "pool_width",
    "pool_stride",
    "lrn",
    "lrn_k",
    "lrn_n",
    "lrn_alpha",
    "lrn_beta",
    "layer_order",
    "mode",
    "windows",
    "vmax",
    "lacs",
    "stations",
    "days",
    "users",
    "records_per_day",
    "regularity",
    "anomaly_rate",
];

/// Parsed `key = value` file. Blank lines and lines starting with `#` are ignored.
#[derive(Debug, Default)]
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            let k = k.trim();
            if !CONFIG_KEYS.contains(&k) {
                return Err(CliError::Usage(format!("{}:{}: unknown key {k:?}", path.display(), n + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.0
            .get(key)
            .map(|v| v.parse().map_err(|_| CliError::Usage(format!("config: invalid value {v:?} for {key}"))))
            .transpose()
    }

    /// Flag, then config file, then `default`.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    /// Flag, then config file, then the seed environment variable, then 0.
    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.map(Ok).or_else(|| self.get::<u64>("seed").transpose()) {
            return s;
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}: invalid seed {v:?}"))),
            Err(_) => Ok(0),
        }
    }

    fn train_config(&self, o: &ModelOpts) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let mut cfg = TrainConfig {
            learning_rate: self.pick(o.learning_rate, "learning_rate", d.learning_rate)?,
            batch_size: self.pick(o.batch_size, "batch_size", d.batch_size)?,
            epochs: self.pick(o.epochs, "epochs", d.epochs)?,
            seed: self.seed(o.seed)?,
            window: self.pick(o.window, "window", d.window)?,
            train_fraction: self.pick(o.train_fraction, "train_fraction", d.train_fraction)?,
            net: d.net,
        };
        cfg.net.kernel_width = self.pick(None, "kernel_width", d.net.kernel_width)?;
        cfg.net.pool_width = self.pick(None, "pool_width", d.net.pool_width)?;
        cfg.net.pool_stride = self.pick(None, "pool_stride", d.net.pool_stride)?;
        let p = LrnParams::default();
        cfg.net.lrn = if self.pick(None, "lrn", true)? {
            Some(LrnParams {
                k: self.pick(None, "lrn_k", p.k)?,
                n_neighbors: self.pick(None, "lrn_n", p.n_neighbors)?,
                alpha: self.pick(None, "lrn_alpha", p.alpha)?,
                beta: self.pick(None, "lrn_beta", p.beta)?,
            })
        } else {
            None
        };
        cfg.net.order = match self.get::<String>("layer_order")?.as_deref() {
            None | Some("pool-then-norm") => LayerOrder::PoolThenNorm,
            Some("norm-then-pool") => LayerOrder::NormThenPool,
            Some(o) => return Err(CliError::Usage(format!("config: unknown layer_order {o:?}"))),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn create(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?))
}

/// Reads and cleans a usage-record CSV. Already-clean input passes through unchanged.
fn load_trajectories(path: &Path, clean: &CleanConfig) -> Result<Vec<Trajectory>> {
    let (records, rejected) = parse_udr_csv(open(path)?)?;
    if !rejected.is_empty() {
        eprintln!("{}: skipped {} malformed line(s)", path.display(), rejected.len());
    }
    Ok(clean_pipeline(records, clean))
}

fn clean_config(file: &FileConfig, vmax: Option<f64>) -> Result<CleanConfig> {
    CleanConfig::new(file.pick(vmax, "vmax", DEFAULT_V_MAX_KMH)?, GeoConfig::default())
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn generate(file: &FileConfig, a: &GenerateArgs) -> Result<()> {
    let seed = file.seed(a.seed)?;
    let spec = WorldSpec::new(file.pick(a.lacs, "lacs", 4)?, file.pick(a.stations, "stations", 10)?);
    let pop = PopulationSpec {
        users: file.pick(a.users, "users", 1)?,
        days: file.pick(a.days, "days", 23)?,
        per_day: file.pick(a.records_per_day, "records_per_day", 40)?,
        regularity: file.pick(a.regularity, "regularity", if a.iid { 0.0 } else { 0.9 })?,
        iid: a.iid,
    };
    let rate = file.pick(a.anomaly_rate, "anomaly_rate", 0.0)?;
    let vmax = file.pick(None, "vmax", DEFAULT_V_MAX_KMH)?;
    let world = generate_world(&spec, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let records = generate_population(&world, &pop, seed.wrapping_add(1)).map_err(|e| CliError::Usage(e.to_string()))?;
    let (records, truth) = inject_anomalies_with(&records, &world, rate, vmax, seed.wrapping_add(2))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut out = create(a.output.as_deref())?;
    write_udr_csv(&mut out, &records)?;
    out.flush()?;
    if let Some(p) = &a.truth {
        write_truth(create(Some(p))?, &truth)?;
    }
    eprintln!("generated {} records for {} user(s), {} injected anomalies", records.len(), pop.users, truth.len());
    Ok(())
}

fn write_truth(out: Box<dyn Write>, truth: &[Injection]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["position", "phonenum", "stime", "kind", "lacid", "longitude", "latitude"])?;
    for t in truth {
        w.write_record([
            t.position.to_string(),
            t.user.clone(),
            crate::ingest::format_timestamp(t.stime),
            format!("{:?}", t.kind),
            t.original_lacid.clone(),
            t.original.longitude.to_string(),
            t.original.latitude.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn clean(file: &FileConfig, a: &CleanArgs) -> Result<()> {
    let cfg = clean_config(file, a.vmax)?;
    let trajs = load_trajectories(&a.input, &cfg)?;
    let mut out = create(a.output.as_deref())?;
    write_udr_csv(&mut out, &flatten(&trajs))?;
    out.flush()?;
    Ok(())
}

fn write_index(out: Box<dyn Write>, index: &StationIndex) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "coarse_label", "lacid", "longitude", "latitude"])?;
    for (f, p) in index.points().iter().enumerate() {
        let c = index.coarse_of(f);
        w.write_record([f.to_string(), c.to_string(), index.lacid(c).to_string(), p.longitude.to_string(), p.latitude.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn encode(file: &FileConfig, a: &EncodeArgs) -> Result<()> {
    let w = file.pick(a.window, "window", TrainConfig::default().window)?;
    if w == 0 {
        return Err(CliError::Usage("window must be positive".into()));
    }
    let trajs = load_trajectories(&a.input, &clean_config(file, None)?)?;
    let ds = EncodedDataset::build(&trajs)?;
    let scale = match a.scale {
        ScaleArg::Fine => Scale::Fine,
        ScaleArg::Coarse => Scale::Coarse,
    };
    let samples: Vec<_> = ds
        .users
        .iter()
        .flat_map(|u| make_windows(if scale == Scale::Fine { &u.fine } else { &u.coarse }, w, scale))
        .collect();
    let mut out = create(a.output.as_deref())?;
    write_samples_csv(&mut out, &samples, w)?;
    out.flush()?;
    if let Some(p) = &a.index {
        write_index(create(Some(p))?, &ds.index)?;
    }
    Ok(())
}

fn mode(file: &FileConfig, flag: Option<Mode>) -> Result<Mode> {
    match flag {
        Some(m) => Ok(m),
        None => match file.get::<String>("mode")?.as_deref() {
            None | Some("hierarchical") => Ok(Mode::Hierarchical),
            Some("flat") => Ok(Mode::Flat),
            Some(m) => Err(CliError::Usage(format!("config: unknown mode {m:?}"))),
        },
    }
}

fn train(file: &FileConfig, a: &TrainArgs) -> Result<()> {
    let cfg = file.train_config(&a.model)?;
    let trajs = load_trajectories(&a.input, &clean_config(file, None)?)?;
    // the index covers every station, including those seen only in the test days
    let ds = EncodedDataset::build(&trajs)?;
    let (train, _) = streams_for(&ds, cfg.window, cfg.train_fraction)?;
    let (saved, curves) = match mode(file, a.mode)? {
        Mode::Hierarchical => {
            let (m, c) = train_hier(&ds.index, &train, &cfg, a.parallel)?;
            (SavedModel::Hier(m), c)
        }
        Mode::Flat => {
            let (m, c) = train_flat(&ds.index, &train, &cfg)?;
            (SavedModel::Flat(m), c)
        }
    };
    save_model(&a.output, &saved)?;
    if let Some(p) = &a.curves {
        let mut out = create(Some(p))?;
        write_curves_csv(&mut out, &curves)?;
        out.flush()?;
    }
    eprintln!("trained on {} events for {} pass(es)", train.len(), cfg.epochs);
    Ok(())
}

fn eval(file: &FileConfig, a: &EvalArgs) -> Result<()> {
    let saved = load_model(&a.model)?;
    let trajs = load_trajectories(&a.input, &clean_config(file, None)?)?;
    let ds = EncodedDataset::with_index(&trajs, saved.index().clone())?;
    let cfg = saved.cfg();
    let (_, test) = streams_for(&ds, cfg.window, cfg.train_fraction)?;
    let mut out = create(a.output.as_deref())?;
    match &saved {
        SavedModel::Hier(h) => write_metrics_csv(&mut out, cfg.window, &evaluate(h, &test)?)?,
        SavedModel::Flat(f) => write_flat_metrics_csv(&mut out, cfg.window, &evaluate_flat(f, &test)?)?,
    }
    out.flush()?;
    Ok(())
}

fn sweep(file: &FileConfig, a: &SweepArgs) -> Result<()> {
    let cfg = file.train_config(&a.model)?;
    let windows = match &a.windows {
        Some(w) => w.clone(),
        None => match file.get::<String>("windows")? {
            Some(s) => s
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| CliError::Usage(format!("config: invalid window {x:?}"))))
                .collect::<Result<_>>()?,
            None => SWEEP_WINDOWS.to_vec(),
        },
    };
    if windows.is_empty() || windows.contains(&0) {
        return Err(CliError::Usage("windows must be positive and non-empty".into()));
    }
    let trajs = load_trajectories(&a.input, &clean_config(file, None)?)?;
    let ds = EncodedDataset::build(&trajs)?;
    let rows = sweep_windows(&ds, &windows, &cfg)?;
    let mut out = create(a.output.as_deref())?;
    write_sweep_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn export(file: &FileConfig, a: &ExportArgs) -> Result<()> {
    let saved = load_model(&a.model)?;
    let trajs = load_trajectories(&a.input, &clean_config(file, None)?)?;
    let traj = match &a.user {
        Some(u) => trajs.iter().find(|t| &t.user == u).ok_or_else(|| CliError::Data(format!("no records for user {u}")))?,
        None => trajs.first().ok_or_else(|| CliError::Data("no records".into()))?,
    };
    let rows = match &saved {
        SavedModel::Hier(h) => export_paths(h, traj, &h.index)?,
        SavedModel::Flat(f) => export_paths(f, traj, &f.index)?,
    };
    let mut out = create(a.output.as_deref())?;
    write_paths_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if !(a.epsilon > 0.0) {
        return Err(CliError::Usage("epsilon must be positive".into()));
    }
    let mut worst = 0.0f64;
    let mut out = io::stdout().lock();
    for seed in 0..a.seeds {
        for (name, err) in layer_suite(seed, a.epsilon) {
            writeln!(out, "seed {seed} {name}: {err:.3e}")?;
            worst = worst.max(err);
        }
        let rep = model_check(seed, a.epsilon)?;
        writeln!(out, "seed {seed} full model: {:.3e} ({} checked, {} skipped)", rep.max_rel_error, rep.checked, rep.skipped)?;
        worst = worst.max(rep.max_rel_error);
    }
    writeln!(out, "max relative error {worst:.3e} (tolerance {:.1e})", a.tolerance)?;
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(CliError::Data(format!("gradient check failed: {worst:.3e} >= {:.1e}", a.tolerance)))
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = FileConfig::load(cli.config.as_deref()).and_then(|file| match &cli.command {
        Command::Generate(a) => generate(&file, a),
        Command::Clean(a) => clean(&file, a),
        Command::Encode(a) => encode(&file, a),
        Command::Train(a) => train(&file, a),
        Command::Eval(a) => eval(&file, a),
        Command::Sweep(a) => sweep(&file, a),
        Command::ExportPaths(a) => export(&file, a),
        Command::Gradcheck(a) => gradcheck(a),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            EXIT_DATA
        }
    }
}
