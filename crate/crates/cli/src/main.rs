use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use grappa::antoine::{AntoineParams, ParamRanges};
use grappa::dataio::{self, CurationConfig, FitOptions, Format, Split, VpDataset};
use grappa::metrics::{self, BinSpec, DEFAULT_K_FILTERS};
use grappa::model::GrappaModel;
use grappa::molgraph::parse_smiles;
use grappa::train::{self, TrainConfig};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "grappa", version, about = "Vapor-pressure prediction with a graph attention network and an Antoine head")]
struct Cli {
    /// Seed for every random choice; falls back to GRAPPA_SEED.
    #[arg(long, global = true, env = "GRAPPA_SEED")]
    seed: Option<u64>,
    /// Human-readable tables on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a raw dataset and drop Antoine-fit outliers.
    Curate(CurateArgs),
    /// Assign components to train/valid/test.
    Split(SplitArgs),
    /// Robust Antoine fit per component.
    FitAntoine(FitArgs),
    /// Two-phase training from a JSON config.
    Train(TrainArgs),
    /// Train every hyperparameter cell and rank by validation MAPE_i.
    GridSearch(GridArgs),
    /// Antoine parameters and vapor pressure for one molecule.
    Predict(PredictArgs),
    /// Boiling temperature at a given pressure.
    Boil(BoilArgs),
    /// Error scores of a model on a dataset.
    Evaluate(EvalArgs),
    /// Per-atom attention scores of the last message-passing layer.
    Attention(AttentionArgs),
    /// Binned error tables and hexbin grid as CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArg {
    /// Vapor-pressure data (.csv or .jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Override the format inferred from the extension.
    #[arg(long)]
    format: Option<Format>,
}

impl DataArg {
    fn load(&self, verbose: bool) -> Result<VpDataset> {
        let fmt = self.format.unwrap_or_else(|| Format::from_path(&self.data));
        let (ds, rejects) = dataio::load(&self.data, fmt)?;
        if verbose {
            for r in &rejects {
                eprintln!("rejected line {}: {}", r.line, r.reason);
            }
        }
        Ok(ds)
    }
}

#[derive(Args)]
struct CurateArgs {
    #[command(flatten)]
    input: DataArg,
    /// Curated data as CSV.
    #[arg(long)]
    out: PathBuf,
    /// Audit log as JSON lines.
    #[arg(long)]
    audit: Option<PathBuf>,
    #[arg(long, default_value_t = 250.0)]
    t_min: f64,
    #[arg(long, default_value_t = 600.0)]
    t_max: f64,
    #[arg(long, default_value_t = 1.0)]
    p_min: f64,
    #[arg(long, default_value_t = 1e7)]
    p_max: f64,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    input: DataArg,
    /// `component_id,split` CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VALID", "TEST"], default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: DataArg,
    /// Only this component.
    #[arg(long)]
    component: Option<String>,
}

#[derive(Args)]
struct SplitSource {
    #[command(flatten)]
    input: DataArg,
    /// Split labels from `grappa split`; computed from --seed when absent.
    #[arg(long)]
    split: Option<PathBuf>,
}

impl SplitSource {
    fn load(&self, seed: u64, verbose: bool) -> Result<VpDataset> {
        let mut ds = self.input.load(verbose)?;
        match &self.split {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ds.splits = dataio::read_split_csv(&text)?;
            }
            None => ds = dataio::split(&ds, seed, [0.8, 0.1, 0.1])?,
        }
        Ok(ds)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: SplitSource,
    /// Checkpoint of the best epoch.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Training configuration whose `grid` field lists the cells.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: SplitSource,
    /// Ranked results as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cells trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `grappa train`.
    #[arg(long)]
    model: PathBuf,
    /// Molecule as SMILES.
    #[arg(long)]
    smiles: String,
    /// Temperature in K.
    #[arg(long)]
    temp: Option<f64>,
    /// Pressure in Pa for a boiling temperature.
    #[arg(long)]
    pressure: Option<f64>,
}

#[derive(Args)]
struct BoilArgs {
    #[arg(long, requires = "smiles", conflicts_with = "params")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    smiles: Option<String>,
    /// Antoine A B C instead of a model.
    #[arg(long, num_args = 3, value_names = ["A", "B", "C"], allow_negative_numbers = true, required_unless_present = "model")]
    params: Option<Vec<f64>>,
    /// Pressure in Pa.
    #[arg(long)]
    pressure: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `grappa train`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: DataArg,
    /// Split labels; restricts the evaluation to --subset.
    #[arg(long, requires = "subset")]
    split: Option<PathBuf>,
    /// train, valid or test.
    #[arg(long, requires = "split")]
    subset: Option<Split>,
}

impl EvalArgs {
    fn load(&self, verbose: bool) -> Result<VpDataset> {
        let mut ds = self.input.load(verbose)?;
        if let (Some(path), Some(subset)) = (&self.split, self.subset) {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ds.splits = dataio::read_split_csv(&text)?;
            ds = ds.subset(subset);
        }
        if ds.is_empty() {
            bail!("no data points to evaluate");
        }
        Ok(ds)
    }
}

#[derive(Args)]
struct AttentionArgs {
    /// Checkpoint written by `grappa train`.
    #[arg(long)]
    model: PathBuf,
    /// Molecule as SMILES.
    #[arg(long)]
    smiles: String,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Directory for bins.csv, hexbin.csv and report.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON bin edges; omitted fields take their defaults.
    #[arg(long)]
    bins: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn load_model(path: &Path) -> Result<GrappaModel> {
    GrappaModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Value> {
    let verbose = cli.verbose;
    let seed = cli.seed;
    match cli.command {
        Command::Curate(a) => {
            let ds = a.input.load(verbose)?;
            let cfg = CurationConfig { t_min: a.t_min, t_max: a.t_max, p_min: a.p_min, p_max: a.p_max, ..CurationConfig::default() };
            let cur = dataio::curate(&ds, &cfg);
            cur.dataset.save_csv(&a.out)?;
            if let Some(path) = &a.audit {
                let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                cur.write_audit_jsonl(std::io::BufWriter::new(f))?;
            }
            if verbose {
                for e in &cur.audit {
                    eprintln!("{:>6} {:<24} {:?} {}", e.row.map_or("-".into(), |r| r.to_string()), e.component_id, e.rule, e.detail);
                }
            }
            Ok(json!({
                "input_points": ds.len(),
                "kept_points": cur.dataset.len(),
                "components": cur.dataset.components().len(),
                "audit": cur.audit,
                "conflicts": cur.conflicts,
            }))
        }
        Command::Split(a) => {
            let ds = a.input.load(verbose)?;
            let ratios = [a.ratios[0], a.ratios[1], a.ratios[2]];
            let out = dataio::split(&ds, seed.unwrap_or(0), ratios)?;
            let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            dataio::write_split_csv(&out, std::io::BufWriter::new(f))?;
            let count = |s: Split| out.splits.values().filter(|&&v| v == s).count();
            Ok(json!({
                "train": count(Split::Train),
                "valid": count(Split::Valid),
                "test": count(Split::Test),
            }))
        }
        Command::FitAntoine(a) => {
            let ds = a.input.load(verbose)?;
            let mut fits = Vec::new();
            for (id, idx) in ds.components() {
                if a.component.as_deref().is_some_and(|c| c != id) {
                    continue;
                }
                let pts: Vec<(f64, f64)> = idx.iter().map(|&i| (ds.points[i].temperature_k, ds.points[i].pressure_pa)).collect();
                fits.push(match dataio::robust_antoine_fit(&pts, &FitOptions::default()) {
                    Ok(f) => json!({
                        "component_id": id,
                        "points": pts.len(),
                        "A": f.params.a,
                        "B": f.params.b,
                        "C": f.params.c,
                        "huber_cost": f.cost,
                        "iterations": f.iterations,
                        "converged": f.converged,
                    }),
                    Err(e) => json!({ "component_id": id, "points": pts.len(), "error": e.to_string() }),
                });
            }
            if let Some(c) = &a.component {
                if fits.is_empty() {
                    bail!("component '{c}' not found");
                }
            }
            Ok(Value::Array(fits))
        }
        Command::Train(a) => {
            let cfg = train_config(a.config.as_deref(), seed)?;
            let ds = a.source.load(cfg.seed, verbose)?;
            let model = GrappaModel::new(cfg.arch.clone(), cfg.seed)?;
            let out = train::fit(model, &ds.subset(Split::Train), &ds.subset(Split::Valid), &cfg)?;
            out.best.save(&a.out)?;
            if let Some(path) = &a.history {
                let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                train::write_history_csv(&out.history, std::io::BufWriter::new(f))?;
            }
            if verbose {
                for h in &out.history {
                    eprintln!("{:>4} {:<5} lr {:.3e} loss {:.5} valid MAPE_i {:.3}%", h.epoch, h.phase, h.lr, h.train_loss, h.valid_mape_i);
                }
            }
            Ok(json!({
                "model": a.out,
                "epochs_run": out.history.len(),
                "best_epoch": out.best_epoch,
                "valid_MAPE_i": out.best_valid_mape_i,
                "trainable_parameters": out.best.trainable_parameter_count(),
            }))
        }
        Command::GridSearch(a) => {
            let cfg = train_config(a.config.as_deref(), seed)?;
            let ds = a.source.load(cfg.seed, verbose)?;
            let results = train::grid_search(&cfg, &ds.subset(Split::Train), &ds.subset(Split::Valid), a.jobs)?;
            if let Some(path) = &a.out {
                let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                train::write_grid_csv(&results, std::io::BufWriter::new(f))?;
            }
            if verbose {
                for r in &results {
                    eprintln!(
                        "{:>4}  layers {} heads {} hidden {} {:<11} {:>8.3}%",
                        r.rank, r.cell.gat_layers, r.cell.heads, r.cell.hidden_layers, r.cell.pooling, r.valid_mape_i
                    );
                }
            }
            Ok(serde_json::to_value(&results)?)
        }
        Command::Predict(a) => {
            let model = load_model(&a.model)?;
            Ok(serde_json::to_value(model.predict(&a.smiles, a.temp, a.pressure)?)?)
        }
        Command::Boil(a) => {
            let params = match (&a.params, &a.model, &a.smiles) {
                (Some(p), _, _) => {
                    let p = AntoineParams::new(p[0], p[1], p[2]);
                    if !ParamRanges::default().contains_open(&p) && verbose {
                        eprintln!("note: parameters lie outside the model's output ranges");
                    }
                    p
                }
                (None, Some(m), Some(s)) => load_model(m)?.predict_params(s)?,
                _ => bail!("either --params or --model with --smiles is required"),
            };
            let t = params.boiling_temperature(a.pressure)?;
            Ok(json!({
                "A": params.a,
                "B": params.b,
                "C": params.c,
                "pressure_Pa": a.pressure,
                "boiling_temperature_K": t,
            }))
        }
        Command::Evaluate(a) => {
            let model = load_model(&a.model)?;
            let ds = a.load(verbose)?;
            let (points, params) = metrics::predict_dataset(&model, &ds)?;
            let report = metrics::summarize(&points, &DEFAULT_K_FILTERS)?;
            let boiling = metrics::boiling_point_eval(&ds, &params);
            if verbose {
                eprintln!("points {}  components {}", report.points, report.components);
                eprintln!("MAE {:.4}  MSE {:.4}  MAPE_i {:.3}%", report.mae, report.mse, report.mape_i);
                for f in &report.mape_c {
                    eprintln!(
                        "MAPE_C (K>={}) over {} components: {}",
                        f.min_k,
                        f.components,
                        f.mape_c.map_or("-".into(), |v| format!("{v:.3}%"))
                    );
                }
            }
            Ok(json!({ "scores": report, "boiling_point": boiling }))
        }
        Command::Attention(a) => {
            let model = load_model(&a.model)?;
            let mol = parse_smiles(&a.smiles)?;
            let scores = model.attention(&a.smiles)?;
            let atoms: Vec<Value> = mol
                .atoms
                .iter()
                .zip(&scores)
                .enumerate()
                .map(|(i, (atom, s))| json!({ "index": i, "element": atom.element.symbol(), "score": s }))
                .collect();
            if verbose {
                for (i, (atom, s)) in mol.atoms.iter().zip(&scores).enumerate() {
                    eprintln!("{i:>3} {:<2} {s:.4}", atom.element.symbol());
                }
            }
            Ok(json!({ "smiles": a.smiles, "atoms": atoms }))
        }
        Command::Report(a) => {
            let model = load_model(&a.eval.model)?;
            let ds = a.eval.load(verbose)?;
            let spec: BinSpec = read_json(a.bins.as_deref())?;
            let (points, params) = metrics::predict_dataset(&model, &ds)?;
            let report = metrics::summarize(&points, &DEFAULT_K_FILTERS)?;
            let binned = metrics::binned_reports(&points, &spec);
            let boiling = metrics::boiling_point_eval(&ds, &params);
            fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
            let bins_path = a.out_dir.join("bins.csv");
            let hex_path = a.out_dir.join("hexbin.csv");
            let json_path = a.out_dir.join("report.json");
            metrics::write_bins_csv(&binned, fs::File::create(&bins_path)?)?;
            metrics::write_hexbin_csv(&binned.hexbin, fs::File::create(&hex_path)?)?;
            let full = json!({ "scores": report, "binned": binned, "boiling_point": boiling });
            fs::write(&json_path, serde_json::to_string_pretty(&full)?)?;
            Ok(json!({
                "scores": report,
                "files": [bins_path, hex_path, json_path],
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
