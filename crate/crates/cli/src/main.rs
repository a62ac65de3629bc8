//! `stdcl`: data generation, training, evaluation and gradient checking.
//!
//! Exit codes: 0 success, 2 usage or validation, 3 data or artifact
//! integrity, 4 numeric failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stdcl_core::contrast::ContrastError;
use stdcl_core::gradcheck::{registered_cases, run_cases};
use stdcl_core::train::embedding_silhouettes;
use stdcl_core::{
    evaluate, fit, generate_synthetic, load_dataset, write_dataset, Checkpoint, DataError, DataFormat, Dataset, Error,
    LossForm, OpKind, Real, RunConfig, RunManifest, SyntheticSpec, TensorError,
};

const EXIT_USAGE: u8 = 2;
const EXIT_INTEGRITY: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "stdcl", version, about = "Spatial-temporal decoupled contrastive learning for skeleton sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with controllable spatial and temporal motifs.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, clap::Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2)]
    spatial_motifs: usize,
    #[arg(long, default_value_t = 2)]
    temporal_motifs: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 8)]
    joints: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Output path; `.jsonl` selects JSON lines, anything else the binary format.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// TOML configuration file.
    #[arg(short, long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run the configuration recorded in a previous run's manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Train the classifier alone, without the decoupling head or banks.
    #[arg(long)]
    no_framework: bool,
    #[arg(long)]
    tau: Option<Real>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<Real>,
    #[arg(long)]
    lambda_spa: Option<Real>,
    #[arg(long)]
    lambda_tem: Option<Real>,
    #[arg(long, value_parser = parse_loss_form)]
    loss_form: Option<LossForm>,
    /// Disable finite-value checks during training.
    #[arg(long)]
    unchecked: bool,
    /// Also write both memory banks as TSV after training.
    #[arg(long)]
    export_banks: bool,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write spatial and temporal embeddings per instance as TSV.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Temporal motif count of a synthetic dataset; adds silhouettes grouped
    /// by spatial and by temporal motif.
    #[arg(long)]
    temporal_motifs: Option<usize>,
}

#[derive(Debug, clap::Args)]
struct GradcheckArgs {
    /// Restrict to one registered case.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flip the sign of one operation's backward rule.
    #[arg(long)]
    inject_fault: Option<String>,
}

fn parse_loss_form(s: &str) -> Result<LossForm, String> {
    match s {
        "exponentiated" => Ok(LossForm::Exponentiated),
        "literal" => Ok(LossForm::Literal),
        _ => Err(format!("unknown loss form {s:?}; expected exponentiated or literal")),
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Shape(_) => EXIT_USAGE,
            Error::Data(DataError::Parameter(_)) => EXIT_USAGE,
            Error::NonFinite { .. } => EXIT_NUMERIC,
            Error::Tensor(TensorError::NonFinite { .. } | TensorError::Domain { .. } | TensorError::Degenerate { .. }) => {
                EXIT_NUMERIC
            }
            Error::Contrast(ContrastError::NonFinite { .. } | ContrastError::Degenerate { .. }) => EXIT_NUMERIC,
            _ => EXIT_INTEGRITY,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Error::from(e).into()
    }
}

impl From<stdcl_core::CheckpointError> for Failure {
    fn from(e: stdcl_core::CheckpointError) -> Self {
        Error::from(e).into()
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: EXIT_INTEGRITY, message: format!("{}: {e}", path.display()) }
}

/// Parallelism cap from `STDCL_THREADS`. All commands currently run on one
/// thread, so the value is validated and reported only.
fn thread_cap() -> Result<Option<usize>, Failure> {
    match std::env::var("STDCL_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::usage(format!("STDCL_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = thread_cap().and_then(|cap| {
        if let Some(n) = cap {
            log::debug!("thread cap {n}");
        }
        match cli.command {
            Command::GenData(a) => gen_data(a),
            Command::Train(a) => train(a),
            Command::Eval(a) => eval(a),
            Command::Gradcheck(a) => gradcheck(a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        spatial_motifs: a.spatial_motifs,
        temporal_motifs: a.temporal_motifs,
        instances_per_class: a.per_class,
        noise_std: a.noise_std,
        joints: a.joints,
        frames: a.frames,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    write_dataset(&data, &a.output, DataFormat::from_path(&a.output))?;
    println!("wrote {} sequences ({} classes) to {}", data.len(), data.num_classes(), a.output.display());
    Ok(())
}

fn load(path: &Path, frames: Option<usize>) -> Result<Dataset, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("dataset {} does not exist", path.display())));
    }
    let data = load_dataset(path, DataFormat::from_path(path))?;
    Ok(match frames {
        Some(f) => data.resampled(f)?,
        None => data,
    })
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match (&a.config, &a.manifest) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(path)) => RunManifest::load(path)?.config,
        (None, None) => RunConfig::default(),
    };
    if let Some(p) = &a.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(p) = &a.eval_data {
        cfg.data.eval_path = Some(p.clone());
    }
    if a.no_framework {
        cfg.train.framework_enabled = false;
    }
    if a.unchecked {
        cfg.numeric.checked = false;
    }
    if let Some(v) = a.tau {
        cfg.contrast.tau = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.lambda_spa {
        cfg.train.lambda_spa = v;
    }
    if let Some(v) = a.lambda_tem {
        cfg.train.lambda_tem = v;
    }
    if let Some(v) = a.loss_form {
        cfg.contrast.loss_form = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&a)?;
    let data_path = cfg.data.path.clone().ok_or_else(|| Failure::usage("no dataset: set data.path or pass --data"))?;
    let data = load(&data_path, cfg.data.frames)?;
    let eval_data = match &cfg.data.eval_path {
        Some(p) => Some(load(p, cfg.data.frames)?),
        None => None,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;

    let outcome = fit(&data, &cfg, eval_data.as_ref(), Some(&a.out))?;
    let mut manifest = RunManifest::new("train", cfg);
    for (role, path) in &outcome.artifacts {
        manifest.artifacts.insert(role.clone(), path.display().to_string());
    }
    if a.export_banks {
        if let Some(banks) = &outcome.banks {
            for (role, bank, name) in
                [("spatial_bank", &banks.spatial, "spatial_bank.tsv"), ("temporal_bank", &banks.temporal, "temporal_bank.tsv")]
            {
                bank.export_tsv(&a.out.join(name)).map_err(Error::from)?;
                manifest.artifacts.insert(role.into(), name.into());
            }
        } else {
            log::warn!("--export-banks ignored: no banks without the framework");
        }
    }
    manifest.save(&a.out.join("manifest.json"))?;
    let last = outcome.epochs.last().map_or(Real::NAN, |e| e.accuracy);
    println!(
        "trained {} epochs ({} steps); final accuracy {:.4}; outputs in {}",
        outcome.epochs.len(),
        outcome.steps.len(),
        last,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let model = Checkpoint::load(&a.checkpoint)?.into_model()?;
    let data = load(&a.data, None)?;
    let data = if data.frames() != Some(model.spec().frames) { data.resampled(model.spec().frames)? } else { data };
    if data.joints() != model.spec().joints || data.num_classes() > model.spec().num_classes {
        return Err(Failure::usage(format!(
            "dataset has {} joints and {} classes; checkpoint expects {} joints and at most {} classes",
            data.joints(),
            data.num_classes(),
            model.spec().joints,
            model.spec().num_classes
        )));
    }
    let want_embeddings = a.embeddings.is_some() || a.temporal_motifs.is_some();
    if want_embeddings && model.stfd().is_none() {
        return Err(Failure::usage("checkpoint has no decoupling head; embeddings are unavailable"));
    }
    let report = evaluate(&data, &model, Some(want_embeddings))?;

    let mut columns: Vec<(String, String)> = vec![
        ("checkpoint".into(), a.checkpoint.display().to_string()),
        ("data".into(), a.data.display().to_string()),
        ("instances".into(), data.len().to_string()),
        ("accuracy".into(), report.accuracy.to_string()),
    ];
    println!("accuracy {:.4} over {} instances", report.accuracy, data.len());
    for (k, acc) in report.per_class.iter().enumerate() {
        if let Some(acc) = acc {
            println!("  class {k}: {acc:.4}");
        }
    }
    if let Some(pairs) = &report.embeddings {
        let by_label = embedding_silhouettes(pairs, |l| l);
        println!("silhouette by label: s {:.4}, t {:.4}", by_label.spatial, by_label.temporal);
        columns.push(("silhouette_s_label".into(), by_label.spatial.to_string()));
        columns.push(("silhouette_t_label".into(), by_label.temporal.to_string()));
        if let Some(b) = a.temporal_motifs.filter(|&b| b > 0) {
            let spa = embedding_silhouettes(pairs, |l| l / b);
            let tem = embedding_silhouettes(pairs, |l| l % b);
            println!(
                "s: by spatial motif {:.4}, by temporal motif {:.4}; t: by spatial motif {:.4}, by temporal motif {:.4}",
                spa.spatial, tem.spatial, spa.temporal, tem.temporal
            );
            columns.push(("silhouette_s_spatial_motif".into(), spa.spatial.to_string()));
            columns.push(("silhouette_s_temporal_motif".into(), tem.spatial.to_string()));
            columns.push(("silhouette_t_spatial_motif".into(), spa.temporal.to_string()));
            columns.push(("silhouette_t_temporal_motif".into(), tem.temporal.to_string()));
        }
        if let Some(path) = &a.embeddings {
            write_embeddings(path, pairs).map_err(|e| io_failure(path, e))?;
        }
    }

    let header = columns.iter().map(|c| c.0.as_str()).collect::<Vec<_>>().join(",");
    let row = columns.iter().map(|c| csv_field(&c.1)).collect::<Vec<_>>().join(",");
    match &a.csv {
        Some(path) => std::fs::write(path, format!("{header}\n{row}\n")).map_err(|e| io_failure(path, e))?,
        None => println!("{header}\n{row}"),
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_embeddings(path: &Path, pairs: &[stdcl_core::DecoupledPair]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let d = pairs.first().map_or(0, |p| p.s.len());
    write!(out, "index\tlabel")?;
    for i in 0..d {
        write!(out, "\ts{i}")?;
    }
    for i in 0..d {
        write!(out, "\tt{i}")?;
    }
    writeln!(out)?;
    for p in pairs {
        write!(out, "{}\t{}", p.dataset_index, p.label)?;
        for v in p.s.data().iter().chain(p.t.data()) {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let cases = registered_cases();
    if let Some(op) = &a.op {
        if !cases.iter().any(|c| c.name == op.as_str()) {
            let names: Vec<&str> = cases.iter().map(|c| c.name).collect();
            return Err(Failure::usage(format!("unknown case {op:?}; registered: {}", names.join(", "))));
        }
    }
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::usage(format!("unknown op {name:?} for --inject-fault")))?),
        None => None,
    };
    if a.instances == 0 {
        return Err(Failure::usage("--instances must be >= 1"));
    }
    let reports = run_cases(a.op.as_deref(), a.instances, a.seed, fault).map_err(Error::from)?;

    let mut failed = 0;
    for case in cases.iter().filter(|c| a.op.as_deref().is_none_or(|o| o == c.name)) {
        let prefix = format!("{}#", case.name);
        let mine: Vec<_> = reports.iter().filter(|r| r.case.starts_with(&prefix)).collect();
        let worst = mine.iter().map(|r| r.worst()).fold(0.0, Real::max);
        let mut blocks: Vec<&str> = mine.iter().flat_map(|r| r.failing_blocks()).collect();
        blocks.sort_unstable();
        blocks.dedup();
        if blocks.is_empty() {
            println!("PASS {:<14} worst rel-err {worst:.2e} < {:.0e} over {} instances", case.name, case.tolerance, mine.len());
        } else {
            failed += 1;
            let n_bad = mine.iter().filter(|r| !r.passed()).count();
            println!(
                "FAIL {:<14} worst rel-err {worst:.2e} >= {:.0e} in {n_bad}/{} instances; failing inputs: {}",
                case.name,
                case.tolerance,
                mine.len(),
                blocks.join(", ")
            );
        }
    }
    if failed > 0 {
        return Err(Failure { code: EXIT_NUMERIC, message: format!("{failed} gradient check case(s) failed") });
    }
    Ok(())
}
