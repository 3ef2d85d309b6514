//! Command-line front end: dataset simulation, separation with traces,
//! training and test-set evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ivasep::error::Error;
use ivasep::eval::{analyze_channels, median, score_estimates, separate_item};
use ivasep::glu::archive::load_from_file;
use ivasep::iva::{auxiva_run, Algorithm, AuxIvaConfig};
use ivasep::mixsim::{make_dataset, DatasetManifest, Mixing, MixtureSpec, SourceKind, Split, SplitCounts};
use ivasep::post::{reconstruct, TraceReference};
use ivasep::source_models::SourceModel;
use ivasep::stft::{Stft, StftConfig, DEFAULT_FRAME_SIZE};
use ivasep::train::{train, TrainConfig};
use ivasep::unroll::Loss;
use ivasep::wav::{read_wav, write_wav, WavFormat};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_DEGENERATE: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "ivasep", version, about = "Blind source separation with AuxIVA and learned source models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multichannel dataset and its manifest.
    Simulate(SimulateArgs),
    /// Separate one multichannel WAV file.
    Separate(SeparateArgs),
    /// Train the weight network through unrolled AuxIVA-ISS.
    Train(TrainArgs),
    /// Score a model on the test split of a dataset.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Laplace,
    Gauss,
    Glu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlgoArg {
    Iss,
    Ip2,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Iss => Algorithm::Iss,
            AlgoArg::Ip2 => Algorithm::Ip2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Sisdr,
    Coherence,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Sisdr => Loss::SiSdr,
            LossArg::Coherence => Loss::Coherence,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Speech,
    SuperGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MixingArg {
    Instantaneous,
    Fir,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, env = "IVASEP_DATA")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub sources: usize,
    #[arg(long, default_value_t = 20)]
    pub items: usize,
    /// Explicit split sizes; otherwise 5 % each for val and test.
    #[arg(long, requires_all = ["val", "test"])]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
    #[arg(long, value_enum, default_value_t = MixingArg::Fir)]
    pub mixing: MixingArg,
    #[arg(long, default_value_t = 64)]
    pub taps: usize,
    /// FIR envelope decay in samples.
    #[arg(long, default_value_t = 12.0)]
    pub decay: f64,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, default_values_t = [-5.0, 5.0])]
    pub relative_snr: Vec<f64>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, default_values_t = [10.0, 30.0])]
    pub noise_snr: Vec<f64>,
    #[arg(long, conflicts_with = "noise_snr")]
    pub no_noise: bool,
    /// Synthetic source family, ignored with `--pool`.
    #[arg(long, value_enum, default_value_t = SourceArg::Speech)]
    pub source: SourceArg,
    /// Draw sources from a directory of mono WAV files.
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelOpts {
    #[arg(long, value_enum, default_value_t = ModelArg::Laplace)]
    pub model: ModelArg,
    #[arg(long, env = "IVASEP_WEIGHTS")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AlgoArg::Iss)]
    pub algo: AlgoArg,
    /// Defaults to 20, 50, 80 for 2, 3, 4 channels.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Defaults to the archive's frame size for GLU, else 4096.
    #[arg(long)]
    pub frame: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelOpts,
    /// Reference WAV per source; enables the per-iteration trace.
    #[arg(long, num_args = 1..)]
    pub refs: Vec<PathBuf>,
    /// Trace location, `trace.csv` in the output directory by default.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "IVASEP_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "IVASEP_WEIGHTS", default_value = "weights.ssma")]
    pub out: PathBuf,
    /// Line-JSON training log; next to the archive by default.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LossArg::Sisdr)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 10.0)]
    pub clip_percentile: f64,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Training excerpt length in seconds; whole items if omitted.
    #[arg(long)]
    pub sample_len: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_FRAME_SIZE)]
    pub frame: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    /// Block gradients through the network input inside the unrolled graph.
    #[arg(long)]
    pub stop_gradient: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "IVASEP_DATA")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelOpts,
    /// Loss label recorded in the table.
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Library error or a usage problem detected by the front end.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Lib(Error::Io(std::io::Error::other(e)))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(e) => match e {
                Error::Io(_) | Error::Wav(_) | Error::Json(_) => EXIT_IO,
                Error::SingularMatrix(_)
                | Error::NotPositiveDefinite
                | Error::NonFinite(_)
                | Error::NonFiniteGradient { .. }
                | Error::DegenerateBin { .. }
                | Error::ZeroReference
                | Error::SingularGram => EXIT_NUMERIC,
                Error::TrainingDegenerate { .. } => EXIT_DEGENERATE,
                _ => EXIT_USAGE,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Separate(a) => cmd_separate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let pair = |v: &[f64]| (v[0], v[1]);
    let spec = MixtureSpec {
        n_sources: a.sources,
        mixing: match a.mixing {
            MixingArg::Instantaneous => Mixing::Instantaneous,
            MixingArg::Fir => Mixing::ConvolutiveFir { taps: a.taps, decay: a.decay },
        },
        relative_snr_db: pair(&a.relative_snr),
        noise_snr_db: (!a.no_noise).then(|| pair(&a.noise_snr)),
        source_kind: match (&a.pool, a.source) {
            (Some(dir), _) => SourceKind::WavPool(dir.clone()),
            (None, SourceArg::Speech) => SourceKind::SyntheticSpeechLike,
            (None, SourceArg::SuperGaussian) => SourceKind::SuperGaussian,
        },
        duration_s: a.duration,
        sample_rate: a.sample_rate,
        seed: a.seed,
    };
    let counts = match (a.train, a.val, a.test) {
        (Some(train), Some(val), Some(test)) => SplitCounts { train, val, test },
        _ => SplitCounts::proportional(a.items),
    };
    if counts.total() == 0 {
        return usage("dataset would be empty");
    }
    make_dataset(&spec, counts, &a.out)?;
    Ok(())
}

/// Model and transform resolved from the shared flags for `m` channels.
struct Resolved {
    model: SourceModel,
    algo: Algorithm,
    iters: usize,
    stft: Stft,
}

fn resolve(opts: &ModelOpts, m: usize) -> CliResult<Resolved> {
    let algo = Algorithm::from(opts.algo);
    if algo == Algorithm::Ip2 && m != 2 {
        return usage(format!("ip2 needs exactly 2 channels, input has {m}"));
    }
    let (model, archive_frame) = match opts.model {
        ModelArg::Laplace => (SourceModel::Laplace, None),
        ModelArg::Gauss => (SourceModel::Gauss, None),
        ModelArg::Glu => {
            let Some(path) = &opts.weights else {
                return usage("--model glu requires --weights");
            };
            let params = load_from_file(path)?;
            let frame = 2 * (params.f_in - 1);
            (SourceModel::glu(params)?, Some(frame))
        }
    };
    let frame = match (opts.frame, archive_frame) {
        (Some(f), Some(a)) if f != a => return usage(format!("--frame {f} does not match the archive ({a})")),
        (f, a) => f.or(a).unwrap_or(DEFAULT_FRAME_SIZE),
    };
    let stft = Stft::new(StftConfig::new(frame)?);
    Ok(Resolved { model, algo, iters: opts.iters.unwrap_or_else(|| AuxIvaConfig::default_iters(m)), stft })
}

#[derive(Serialize)]
struct TraceRow {
    iter: usize,
    source: usize,
    si_sdr_db: f64,
}

pub fn cmd_separate(a: &SeparateArgs) -> CliResult<()> {
    let input = read_wav(&a.input)?;
    let m = input.channels.len();
    let r = resolve(&a.model, m)?;
    let len = input.channels.first().map_or(0, Vec::len);
    let reference = if a.refs.is_empty() {
        None
    } else {
        if a.refs.len() != m {
            return usage(format!("{} references given for {m} channels", a.refs.len()));
        }
        let refs = a
            .refs
            .iter()
            .map(|p| Ok(read_wav(p)?.channels.into_iter().next().unwrap_or_default()))
            .collect::<CliResult<Vec<_>>>()?;
        if refs.iter().any(|x| x.len() != len) {
            return usage("references must match the mixture length");
        }
        Some(TraceReference { stft: r.stft.clone(), refs, ref_channel: 0 })
    };
    let x = analyze_channels(&input.channels, &r.stft)?;
    let out = auxiva_run(&x, &AuxIvaConfig::new(r.algo, r.iters, r.model), reference.as_ref())?;
    let ests = reconstruct(&out.y, &x, &r.stft, 0, len)?;
    if ests.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("separated signals".into()).into());
    }
    fs::create_dir_all(&a.out)?;
    for (k, e) in ests.iter().enumerate() {
        write_wav(a.out.join(format!("source{k}.wav")), std::slice::from_ref(e), input.sample_rate, WavFormat::Float32)?;
    }
    if reference.is_some() {
        let path = a.trace.clone().unwrap_or_else(|| a.out.join("trace.csv"));
        let mut w = csv::Writer::from_path(path)?;
        for rec in &out.trace {
            for (source, &si_sdr_db) in rec.si_sdr.iter().flatten().enumerate() {
                w.serialize(TraceRow { iter: rec.iteration, source, si_sdr_db })?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let manifest = DatasetManifest::load(&a.data)?;
    let cfg = TrainConfig {
        loss: a.loss.into(),
        n_iters_unrolled: a.iters,
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        autoclip_percentile: a.clip_percentile,
        batch_size: a.batch,
        sample_length_s: a.sample_len,
        max_epochs: a.epochs,
        seed: a.seed,
        frame_size: a.frame,
        hidden: a.hidden,
        dropout_rate: a.dropout,
        stop_gradient_on_weights: a.stop_gradient,
        ..TrainConfig::default()
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let log = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    train(&manifest, &cfg, &a.out, Some(&log))?;
    Ok(())
}

/// One line of the evaluation table; the last line holds the medians.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub item: String,
    pub model: String,
    pub algo: String,
    pub loss: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub si_sdr_db: f64,
    pub si_sir_db: f64,
    pub input_si_sdr_db: f64,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let manifest = DatasetManifest::load(&a.data)?;
    let records: Vec<_> = manifest.split(a.split.into()).collect();
    let Some(first) = records.first() else {
        return usage("the selected split is empty");
    };
    let m = first.m;
    if records.iter().any(|r| r.m != m) {
        return usage("evaluation needs a constant channel count");
    }
    if m != 2 && a.model.model == ModelArg::Glu && a.model.algo != AlgoArg::Iss {
        return usage("GLU on more than two channels runs with iss only");
    }
    let r = resolve(&a.model, m)?;
    let loss = a.loss.map_or("-", |l| Loss::from(l).name()).to_string();
    let mut rows = Vec::with_capacity(records.len() + 1);
    for rec in &records {
        let item = manifest.load_item(rec)?;
        let ests = separate_item(&item, &r.model, r.algo, r.iters, &r.stft)?;
        let s = score_estimates(&ests, &item)?;
        rows.push(EvalRow {
            item: rec.id.clone(),
            model: r.model.name().into(),
            algo: r.algo.to_string(),
            loss: loss.clone(),
            m,
            si_sdr_db: s.mean_si_sdr(),
            si_sir_db: s.mean_si_sir(),
            input_si_sdr_db: s.mean_input_si_sdr(),
        });
    }
    let col = |f: fn(&EvalRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    let summary = EvalRow {
        item: "median".into(),
        si_sdr_db: col(|r| r.si_sdr_db),
        si_sir_db: col(|r| r.si_sir_db),
        input_si_sdr_db: col(|r| r.input_si_sdr_db),
        ..rows[0].clone()
    };
    rows.push(summary);
    write_table(&a.out, &rows)
}

fn write_table(path: &Path, rows: &[EvalRow]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
