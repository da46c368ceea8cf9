//! The `mambo` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a usage error (bad flags or invalid
//! parameter values), 2 on a data or file-format error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::backbone::{count_parameters, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{
    read_manifest_features, read_protocol, synth_generate, write_dataset, SynthSpec,
    DEFAULT_T_FIXED,
};
use crate::metrics::{
    best_avg, compute_eer, compute_min_tdcf, join_scores, read_scores, write_scores,
    CostCoefficients,
};
use crate::training::{score_features, train_run};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mambo", version, about = "Hybrid SSM/attention spoofing countermeasures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (features, manifest.txt, protocol.txt).
    Synth(SynthArgs),
    /// Train a model from an experiment config into a run directory.
    Train(TrainArgs),
    /// Score every utterance of a manifest with a checkpoint.
    Score(ScoreArgs),
    /// EER and optionally min t-DCF of one score file.
    Metrics(MetricsArgs),
    /// Best/Avg of EER (and min t-DCF) over several score files.
    Report(ReportArgs),
    /// Print a checkpoint's configuration and parameter count.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_bonafide: usize,
    #[arg(long)]
    n_spoof: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    local_magnitude: Option<f32>,
    #[arg(long)]
    local_frames: Option<usize>,
    #[arg(long)]
    local_dims: Option<usize>,
    #[arg(long)]
    global_magnitude: Option<f32>,
    #[arg(long)]
    global_dims: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
    /// Index of the first utterance stream; ids start at SYN_<offset>.
    #[arg(long, default_value_t = 0)]
    offset: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.seed` and `data.synth.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_T_FIXED)]
    t_fixed: usize,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long)]
    tdcf_c0: Option<f64>,
    #[arg(long)]
    tdcf_c1: Option<f64>,
    #[arg(long)]
    tdcf_c2: Option<f64>,
}

impl CostArgs {
    fn resolve(&self) -> Result<Option<CostCoefficients>, Failure> {
        match (self.tdcf_c0, self.tdcf_c1, self.tdcf_c2) {
            (None, None, None) => Ok(None),
            (Some(c0), Some(c1), Some(c2)) => CostCoefficients::new(c0, c1, c2)
                .map(Some)
                .map_err(|e| Failure::usage(format!("--tdcf-c0/--tdcf-c1/--tdcf-c2: {e}"))),
            _ => Err(Failure::usage(
                "--tdcf-c0, --tdcf-c1 and --tdcf-c2 must be given together",
            )),
        }
    }
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    protocol: PathBuf,
    #[command(flatten)]
    costs: CostArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// One score file per retained checkpoint.
    #[arg(long, num_args = 1.., required = true)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    protocol: PathBuf,
    #[command(flatten)]
    costs: CostArgs,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_DATA,
            message: format!("output: {e}"),
        }
    }
}

type CliResult = Result<(), Failure>;

/// Runs the tool on `args` (including the program name) and returns the
/// process exit code.
pub fn run_command<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Score(a) => score(a, out),
        Command::Metrics(a) => metrics(a, out),
        Command::Report(a) => report(a, out),
        Command::Inspect(a) => inspect(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> CliResult {
    let mut spec = SynthSpec::new(a.n_bonafide, a.n_spoof, a.seed);
    spec.offset = a.offset;
    macro_rules! apply {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { spec.$field = v; })* };
    }
    apply!(frames, dims, local_magnitude, local_frames, local_dims, global_magnitude, global_dims, noise);
    let data = synth_generate(&spec)?;
    write_dataset(&a.out, &data)?;
    writeln!(
        out,
        "wrote {} utterances ({} bonafide, {} spoof) to {}",
        data.utterances.len(),
        spec.n_bonafide,
        spec.n_spoof,
        a.out.display()
    )?;
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = ExperimentConfig::read(&a.config)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    let base = a.config.parent().unwrap_or(Path::new("")).to_path_buf();
    let run_dir = match (&a.out, &cfg.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => return Err(Failure::usage("--out is required when the config has no out_dir")),
    };
    let data_err = |name: &str, e: Error| -> Failure {
        let f = Failure::from(e);
        Failure {
            code: f.code,
            message: format!("{}: [data.{name}]: {}", a.config.display(), f.message),
        }
    };
    let train_set = cfg.data.load("train", &base).map_err(|e| data_err("train", e))?;
    let dev_set = cfg.data.load("dev", &base).map_err(|e| data_err("dev", e))?;

    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let resolved = run_dir.join("config.toml");
    if run_dir.join("run.log").exists() {
        return Err(Error::Format {
            path: run_dir.join("run.log"),
            detail: "a run already exists in this directory".into(),
        }
        .into());
    }
    fs::write(&resolved, cfg.emit()?).map_err(|e| Error::io(&resolved, e))?;

    if let Some(spec) = cfg.data.synth_spec("eval")? {
        let dir = run_dir.join("data").join("eval");
        write_dataset(&dir, &synth_generate(&spec)?)?;
        writeln!(out, "eval split written to {}", dir.display())?;
    }

    let log = train_run(&cfg.backbone, &cfg.train, &train_set, &dev_set, cfg.data.t_fixed, &run_dir)?;
    for e in &log.epochs {
        writeln!(out, "{}", e.log_line())?;
    }
    writeln!(
        out,
        "best_epoch={} stopped_early={} retained={}",
        log.best_epoch,
        log.stopped_early,
        log.retained.len()
    )?;
    Ok(())
}

fn score(a: ScoreArgs, out: &mut dyn Write) -> CliResult {
    if a.t_fixed == 0 {
        return Err(Failure::usage("--t-fixed must be at least 1"));
    }
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let model = ckpt.model()?;
    let items = read_manifest_features(&a.manifest)?;
    let scores = score_features(
        &model,
        &ckpt.params,
        items.iter().map(|(id, x)| (id.as_str(), x)),
        a.t_fixed,
    )
    .map_err(|e| Error::Format {
        path: a.manifest.clone(),
        detail: e.to_string(),
    })?;
    write_scores(&a.out, &scores)?;
    writeln!(out, "scored {} utterances into {}", scores.len(), a.out.display())?;
    Ok(())
}

struct FileMetrics {
    eer: f64,
    min_tdcf: Option<f64>,
}

fn evaluate_file(
    scores: &Path,
    protocol: &[crate::data::ProtocolEntry],
    protocol_path: &Path,
    costs: Option<&CostCoefficients>,
) -> Result<FileMetrics, Failure> {
    let raw = read_scores(scores)?;
    let as_format = |e: Error| Error::Format {
        path: scores.into(),
        detail: format!("against {}: {e}", protocol_path.display()),
    };
    let records = join_scores(&raw, protocol).map_err(as_format)?;
    let (eer, _) = compute_eer(&records).map_err(as_format)?;
    let min_tdcf = costs
        .map(|c| compute_min_tdcf(&records, c))
        .transpose()
        .map_err(as_format)?;
    Ok(FileMetrics { eer, min_tdcf })
}

fn metrics(a: MetricsArgs, out: &mut dyn Write) -> CliResult {
    let costs = a.costs.resolve()?;
    let protocol = read_protocol(&a.protocol)?;
    let m = evaluate_file(&a.scores, &protocol, &a.protocol, costs.as_ref())?;
    writeln!(out, "EER={:.2}", 100.0 * m.eer)?;
    if let Some(t) = m.min_tdcf {
        writeln!(out, "min_tDCF={t:.4}")?;
    }
    Ok(())
}

fn report(a: ReportArgs, out: &mut dyn Write) -> CliResult {
    let costs = a.costs.resolve()?;
    let protocol = read_protocol(&a.protocol)?;
    let rows = a
        .scores
        .iter()
        .map(|s| evaluate_file(s, &protocol, &a.protocol, costs.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let eers: Vec<f64> = rows.iter().map(|r| 100.0 * r.eer).collect();
    let tdcfs: Option<Vec<f64>> = rows.iter().map(|r| r.min_tdcf).collect();

    writeln!(
        out,
        "# {} score files; Best = minimum, Avg = mean over files, taken per metric independently",
        rows.len()
    )?;
    let header = if tdcfs.is_some() { "file\tEER(%)\tmin_tDCF" } else { "file\tEER(%)" };
    writeln!(out, "{header}")?;
    for (path, r) in a.scores.iter().zip(&rows) {
        match r.min_tdcf {
            Some(t) => writeln!(out, "{}\t{:.2}\t{t:.4}", path.display(), 100.0 * r.eer)?,
            None => writeln!(out, "{}\t{:.2}", path.display(), 100.0 * r.eer)?,
        }
    }
    let (eer_best, eer_avg) = best_avg(&eers)?;
    match tdcfs.map(|t| best_avg(&t)).transpose()? {
        Some((t_best, t_avg)) => {
            writeln!(out, "Best\t{eer_best:.2}\t{t_best:.4}")?;
            writeln!(out, "Avg\t{eer_avg:.2}\t{t_avg:.4}")?;
        }
        None => {
            writeln!(out, "Best\t{eer_best:.2}")?;
            writeln!(out, "Avg\t{eer_avg:.2}")?;
        }
    }
    Ok(())
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> CliResult {
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    #[derive(serde::Serialize)]
    struct Echo<'a> {
        backbone: &'a crate::backbone::BackboneConfig,
    }
    let text = toml::to_string(&Echo { backbone: &ckpt.config }).map_err(|e| Error::Format {
        path: a.checkpoint.clone(),
        detail: e.to_string(),
    })?;
    writeln!(out, "# {}", a.checkpoint.display())?;
    writeln!(out, "epoch = {}", ckpt.epoch)?;
    writeln!(out, "dev_loss = {:.7e}", ckpt.dev_loss)?;
    writeln!(out, "parameters = {}", count_parameters(&ckpt.config)?)?;
    write!(out, "\n{text}")?;
    Ok(())
}
