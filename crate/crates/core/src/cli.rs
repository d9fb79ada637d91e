//! Command-line front end: synthesize or ingest data, train, evaluate,
//! explain, compare explanation sets, and check gradients.
//!
//! Settings resolve as flag, then config file, then built-in default. The
//! `PIME_SEED` environment variable only supplies the default seed. Every
//! output directory receives a `config.json` with the effective settings.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::connectome::{ingest_dir, read_json, synth_dataset, write_json, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::explainer::{
    default_target_size, explain_dataset, frequency_csv, load_region_labels, stability,
    top_regions, Explanation, MctsConfig,
};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::model::{Checkpoint, ModelParams};
use crate::trainer::{
    cross_validate, evaluate, kfold_split, write_history_csv, EvalMetrics, TrainConfig,
    TrainState,
};

pub const SEED_ENV: &str = "PIME_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pime", version, about = "Prototype-based brain graph classification and explanation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-class dataset with planted regions
    Synth(SynthArgs),
    /// Convert a directory of BOLD CSV files into a dataset
    Ingest(IngestArgs),
    /// Train a model (with k-fold evaluation when folds > 1)
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Search for explanatory region subsets
    Explain(ExplainArgs),
    /// Pairwise Jaccard and Dice between region sets
    Stability(StabilityArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator spec; missing fields take defaults
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub timepoints: Option<usize>,
    #[arg(long)]
    pub subjects_per_class: Option<usize>,
    #[arg(long)]
    pub effect_size: Option<f64>,
    /// Comma-separated planted region indices
    #[arg(long, value_delimiter = ',')]
    pub planted: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Directory of `*.csv` recordings
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Preset {
    /// Widths 128/256/512, latent 64
    Paper,
    /// Widths 16/32/64, latent 8
    Tiny,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for checkpoint, history and reports
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with TrainConfig fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of cross-validation folds; 1 trains on everything only
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    /// Continue from the state saved in `--out`
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Write the metrics JSON here as well as to stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also report accuracy on each of this many stratified folds
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Regions kept per explanation [default: round(C·10/116), at least 4]
    #[arg(long)]
    pub target_size: Option<usize>,
    /// Search iterations per removal move
    #[arg(long, default_value_t = 20)]
    pub rollouts: usize,
    #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
    pub c_uct: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Region names, one per line or `index,name`
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Length of the top-region list
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Only explain these subject ids (comma-separated)
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<String>>,
    /// Accept a checkpoint that was never trained
    #[arg(long)]
    pub allow_untrained: bool,
}

#[derive(Args, Debug)]
pub struct StabilityArgs {
    /// Frequency CSVs, explanation JSONs, or plain integer lists
    #[arg(required = true, num_args = 2..)]
    pub files: Vec<PathBuf>,
    /// Regions taken from the top of each frequency table
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Directory for jaccard.csv and dice.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub graphs: usize,
    #[arg(long, default_value_t = 6)]
    pub nodes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 12)]
    pub coords: usize,
    /// Write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
        }),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    Ok(match flag.or(file) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_json_value(path: &Path) -> Result<Value> {
    let v: Value = read_json(path)?;
    if !v.is_object() {
        return Err(Error::InvalidArgument(format!(
            "{} must contain a JSON object",
            path.display()
        )));
    }
    Ok(v)
}

/// Overlays the keys of `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    if let (Value::Object(b), Value::Object(t)) = (base, top) {
        for (k, v) in t {
            b.insert(k, v);
        }
    }
}

fn bad_config(path: &Path, e: serde_json::Error) -> Error {
    Error::InvalidArgument(format!("{}: {e}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => run_synth(&a),
        Command::Ingest(a) => run_ingest(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a).map(|_| ()),
        Command::Explain(a) => run_explain(&a),
        Command::Stability(a) => run_stability(&a),
        Command::Gradcheck(a) => run_gradcheck_cmd(&a),
    }
}

pub fn effective_synth_spec(a: &SynthArgs) -> Result<SynthSpec> {
    let mut value = serde_json::to_value(SynthSpec::default()).expect("spec serializes");
    let mut file_seed = None;
    if let Some(path) = &a.spec {
        let file = read_json_value(path)?;
        file_seed = file.get("seed").and_then(Value::as_u64);
        merge(&mut value, file);
    }
    let mut spec: SynthSpec = serde_json::from_value(value)
        .map_err(|e| bad_config(a.spec.as_deref().unwrap_or(Path::new("spec")), e))?;
    spec.seed = match (a.seed, file_seed, env_seed()?) {
        (Some(s), _, _) | (None, Some(s), _) | (None, None, Some(s)) => s,
        (None, None, None) => spec.seed,
    };
    if let Some(v) = a.regions {
        spec.regions = v;
    }
    if let Some(v) = a.timepoints {
        spec.timepoints = v;
    }
    if let Some(v) = a.subjects_per_class {
        spec.subjects_per_class = v;
    }
    if let Some(v) = a.effect_size {
        spec.effect_size = v;
    }
    if let Some(v) = &a.planted {
        spec.planted_regions = v.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let spec = effective_synth_spec(a)?;
    let ds = synth_dataset(&spec)?;
    ds.save(&a.out)?;
    write_json(&a.out.join("config.json"), &spec)?;
    println!(
        "wrote {} recordings ({} regions) to {}",
        ds.len(),
        ds.regions(),
        a.out.display()
    );
    println!("planted regions: {:?}", spec.planted_regions);
    Ok(())
}

fn run_ingest(a: &IngestArgs) -> Result<()> {
    let ds = ingest_dir(&a.input)?;
    ds.save(&a.out)?;
    println!(
        "ingested {} recordings ({} regions, {} classes) into {}",
        ds.len(),
        ds.regions(),
        ds.num_classes,
        a.out.display()
    );
    Ok(())
}

pub fn effective_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let preset = match a.preset {
        Preset::Paper => TrainConfig::default(),
        Preset::Tiny => TrainConfig::tiny(),
    };
    let mut value = serde_json::to_value(preset).expect("config serializes");
    let mut file_seed = None;
    if let Some(path) = &a.config {
        let file = read_json_value(path)?;
        file_seed = file.get("seed").and_then(Value::as_u64);
        merge(&mut value, file);
    }
    let mut cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| bad_config(a.config.as_deref().unwrap_or(Path::new("config")), e))?;
    cfg.seed = resolve_seed(a.seed, file_seed)?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.folds {
        cfg.folds = v;
    }
    if let Some(v) = a.keep_ratio {
        cfg.keep_ratio = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESUME_FILE: &str = "resume.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CV_FILE: &str = "cv.json";

fn run_train(a: &TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    create_dir(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let resume_path = a.out.join(RESUME_FILE);

    let mut state = if a.resume {
        let mut s = TrainState::load(&ckpt_path, &resume_path)?;
        if let Some(e) = a.epochs {
            s.config.epochs = e;
        }
        s
    } else {
        TrainState::new(&effective_train_config(a)?, ds.regions(), ds.num_classes)?
    };
    if state.params.num_regions != ds.regions() {
        return Err(Error::InvalidData(format!(
            "saved state expects {} regions but the dataset has {}",
            state.params.num_regions,
            ds.regions()
        )));
    }
    let cfg = state.config.clone();
    write_json(&a.out.join("config.json"), &cfg)?;
    let graphs = ds.graphs(cfg.keep_ratio)?;

    if cfg.folds > 1 && !a.resume {
        let splits = kfold_split(&ds.labels(), cfg.folds, cfg.seed)?;
        let report = cross_validate(&graphs, ds.num_classes, &cfg, &splits)?;
        for f in &report.folds {
            eprintln!("fold {}: held-out accuracy {:.4}", f.fold, f.accuracy);
        }
        println!(
            "{}-fold accuracy {:.4} ± {:.4}",
            cfg.folds, report.mean_accuracy, report.std_accuracy
        );
        write_json(&a.out.join(CV_FILE), &report)?;
    }

    while state.epoch < cfg.epochs {
        state.run_epoch(&graphs, None)?;
        let r = state.history.epochs.last().expect("epoch recorded");
        eprintln!(
            "epoch {:>4} lr {:.2e} loss {:.5} train acc {:.3}",
            r.epoch, r.lr, r.loss.total, r.train_accuracy
        );
    }
    state.save(&ckpt_path, &resume_path)?;
    write_history_csv(&a.out.join(HISTORY_FILE), &state.history)?;
    println!(
        "trained {} epochs; checkpoint at {}",
        state.epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, ModelParams)> {
    let ckpt = Checkpoint::load(path)?;
    let params = ckpt.to_params()?;
    Ok((ckpt, params))
}

fn checkpoint_keep_ratio(ckpt: &Checkpoint) -> f64 {
    ckpt.header
        .train_config
        .as_ref()
        .and_then(|v| v.get("keep_ratio"))
        .and_then(Value::as_f64)
        .unwrap_or_else(|| TrainConfig::default().keep_ratio)
}

fn check_regions(params: &ModelParams, ds: &Dataset) -> Result<()> {
    if params.num_regions != ds.regions() {
        return Err(Error::InvalidData(format!(
            "checkpoint was trained on {} regions but the dataset has {}",
            params.num_regions,
            ds.regions()
        )));
    }
    if ds.recordings.iter().any(|r| r.label >= params.num_classes) {
        return Err(Error::InvalidData(format!(
            "dataset has labels outside the checkpoint's {} classes",
            params.num_classes
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct FoldAccuracy {
    pub fold: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: EvalMetrics,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<FoldAccuracy>,
}

pub fn run_eval(a: &EvalArgs) -> Result<EvalReport> {
    let (ckpt, params) = load_model(&a.checkpoint)?;
    let ds = Dataset::load(&a.dataset)?;
    check_regions(&params, &ds)?;
    let graphs = ds.graphs(checkpoint_keep_ratio(&ckpt))?;
    let metrics = evaluate(&params, &graphs)?;
    let mut folds = Vec::new();
    if let Some(k) = a.folds.filter(|&k| k > 1) {
        let seed = resolve_seed(a.seed, None)?;
        for (fold, (_, test)) in kfold_split(&ds.labels(), k, seed)?.into_iter().enumerate() {
            let correct = test
                .iter()
                .filter(|&&i| metrics.predictions[i] == graphs[i].label)
                .count();
            folds.push(FoldAccuracy {
                fold,
                count: test.len(),
                accuracy: correct as f64 / test.len() as f64,
            });
        }
    }
    let report = EvalReport { metrics, folds };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize)]
struct ExplainConfig<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    target_size: usize,
    rollouts: usize,
    c_uct: f64,
    seed: u64,
    top: usize,
    keep_ratio: f64,
    subjects: usize,
}

pub const FREQUENCY_FILE: &str = "frequency.csv";

fn run_explain(a: &ExplainArgs) -> Result<()> {
    let (ckpt, params) = load_model(&a.checkpoint)?;
    if ckpt.header.epoch == 0 && !a.allow_untrained {
        return Err(Error::InvalidData(format!(
            "{} holds untrained parameters (epoch 0); pass --allow-untrained to explain it anyway",
            a.checkpoint.display()
        )));
    }
    let mut ds = Dataset::load(&a.dataset)?;
    check_regions(&params, &ds)?;
    if let Some(ids) = &a.subjects {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| {
                ds.recordings
                    .iter()
                    .position(|r| &r.subject_id == id)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown subject {id}")))
            })
            .collect::<Result<_>>()?;
        ds = ds.subset(&idx);
    }
    let names = a.labels.as_deref().map(load_region_labels).transpose()?;
    let c = ds.regions();
    let target_size = a.target_size.unwrap_or_else(|| default_target_size(c));
    let seed = resolve_seed(a.seed, None)?;
    let keep_ratio = checkpoint_keep_ratio(&ckpt);
    let graphs = ds.graphs(keep_ratio)?;
    let ids: Vec<String> = ds.recordings.iter().map(|r| r.subject_id.clone()).collect();
    let cfg = MctsConfig {
        rollouts: a.rollouts,
        c_uct: a.c_uct,
    };
    let out = explain_dataset(
        &graphs,
        &ids,
        &params,
        target_size,
        &cfg,
        seed,
        names.as_deref(),
    )?;

    let dir = a.out.join("explanations");
    create_dir(&dir)?;
    for e in &out.explanations {
        let id = e.subject_id.as_deref().unwrap_or("subject");
        write_json(&dir.join(format!("{}.json", sanitize(id))), e)?;
    }
    let freq_path = a.out.join(FREQUENCY_FILE);
    fs::write(&freq_path, frequency_csv(&out.frequency)).map_err(|e| Error::io(&freq_path, e))?;
    let top = top_regions(&out.frequency, a.top);
    write_json(&a.out.join("top_regions.json"), &top)?;
    write_json(
        &a.out.join("config.json"),
        &ExplainConfig {
            checkpoint: &a.checkpoint,
            dataset: &a.dataset,
            target_size,
            rollouts: a.rollouts,
            c_uct: a.c_uct,
            seed,
            top: a.top,
            keep_ratio,
            subjects: ids.len(),
        },
    )?;
    println!(
        "explained {} subjects (target size {target_size}); top regions: {top:?}",
        out.explanations.len()
    );
    Ok(())
}

/// Reads a region set from a frequency CSV (top `top` rows), an explanation
/// JSON, or a list of integers separated by commas or whitespace.
pub fn read_region_set(path: &Path, top: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let e: Explanation = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        return Ok(e.retained_final);
    }
    if trimmed.starts_with("rank,region") {
        return text
            .lines()
            .enumerate()
            .skip(1)
            .filter(|(_, l)| !l.trim().is_empty())
            .take(top)
            .map(|(n, l)| {
                l.split(',')
                    .nth(1)
                    .and_then(|f| f.trim().parse().ok())
                    .ok_or_else(|| Error::parse(path, n + 1, "expected a region index in column 2"))
            })
            .collect();
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()) {
            if tok.is_empty() {
                continue;
            }
            out.push(tok.parse().map_err(|_| {
                Error::parse(path, n + 1, format!("{tok:?} is not a region index"))
            })?);
        }
    }
    Ok(out)
}

/// Symmetric matrix CSV with file stems as row and column labels.
pub fn matrix_csv(labels: &[String], m: &[Vec<f64>]) -> String {
    let mut out = String::from("set");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(m) {
        out.push_str(l);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub struct StabilityMatrices {
    pub labels: Vec<String>,
    pub jaccard: Vec<Vec<f64>>,
    pub dice: Vec<Vec<f64>>,
}

pub fn stability_matrices(files: &[PathBuf], top: usize) -> Result<StabilityMatrices> {
    let sets = files
        .iter()
        .map(|f| {
            let s = read_region_set(f, top)?;
            if s.is_empty() {
                return Err(Error::InvalidData(format!("{} has no regions", f.display())));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = sets.len();
    let mut jaccard = vec![vec![0.0; n]; n];
    let mut dice = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (jv, dv) = stability(&sets[i], &sets[j])?;
            jaccard[i][j] = jv;
            dice[i][j] = dv;
        }
    }
    let labels = files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned());
            let parent = f
                .parent()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned());
            match (parent, stem) {
                (Some(p), Some(s)) => format!("{p}/{s}"),
                (None, Some(s)) => s,
                _ => format!("set{i}"),
            }
            .replace(',', "_")
        })
        .collect();
    Ok(StabilityMatrices {
        labels,
        jaccard,
        dice,
    })
}

fn run_stability(a: &StabilityArgs) -> Result<()> {
    let m = stability_matrices(&a.files, a.top)?;
    let jaccard = matrix_csv(&m.labels, &m.jaccard);
    let dice = matrix_csv(&m.labels, &m.dice);
    println!("jaccard\n{jaccard}\ndice\n{dice}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        for (name, text) in [("jaccard.csv", &jaccard), ("dice.csv", &dice)] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn run_gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        graphs: a.graphs,
        nodes: a.nodes,
        seed: resolve_seed(a.seed, None)?,
        coords_per_tensor: a.coords,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.summary());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if report.passed {
        println!("all {} terms pass", report.terms.len());
        Ok(())
    } else {
        Err(Error::GradientMismatch {
            terms: report
                .terms
                .iter()
                .filter(|t| !t.passed)
                .map(|t| t.term.name().to_string())
                .collect(),
        })
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
