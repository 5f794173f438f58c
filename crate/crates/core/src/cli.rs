//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 parse, 5 file format,
//! 6 scheme mismatch, 7 shape mismatch, 8 training divergence, 9 anything else.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{compare_layers, compression_ratio, layer_mse, occupancy, Method, QuantizedTensor};
use crate::error::{Error, Result};
use crate::gemm::{bench, write_bench_csv};
use crate::io::{load_matrix_any, save_matrix, sniff_magic};
use crate::qat::{train_model, DataMode, LossKind, Quantizer, StudentInit, TrainConfig};
use crate::r2q::{self, R2QTensor, R2Q_MAGIC};
use crate::rtn::{dequantize_rtn, RtnTensor, RTN_MAGIC};
use crate::sampling::{random_matrix, WeightDist};
use crate::tensor::{GroupScheme, Matrix};

/// Relative output paths are resolved against this directory when it is set.
pub const OUT_DIR_ENV: &str = "R2Q_OUT_DIR";

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_PARSE: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;
pub const EXIT_SCHEME: i32 = 6;
pub const EXIT_SHAPE: i32 = 7;
pub const EXIT_DIVERGENCE: i32 = 8;
pub const EXIT_OTHER: i32 = 9;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Parse { .. } => EXIT_PARSE,
        Error::Format(_) => EXIT_FORMAT,
        Error::SchemeMismatch { .. } | Error::UnsupportedScheme(_) => EXIT_SCHEME,
        Error::ShapeMismatch(_) => EXIT_SHAPE,
        Error::DivergenceDetected { .. } => EXIT_DIVERGENCE,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

#[derive(Parser, Debug)]
#[command(name = "r2q", version, about = "2-bit residual weight quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a random matrix.
    Gen(GenArgs),
    /// Quantize a matrix file to R2Q1 or RTN1.
    Quantize(QuantizeArgs),
    /// Expand an R2Q1 or RTN1 file back to a matrix.
    Dequantize(DequantizeArgs),
    /// Compare methods and group sizes on one or more matrices.
    Analyze(AnalyzeArgs),
    /// Time and count operations of the GEMM kernels.
    Bench(BenchArgs),
    /// Run the toy distillation experiment.
    Train(TrainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliMethod {
    R2q,
    Rtn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    R2q,
    Rtn,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Text,
    Long,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value = "gaussian")]
    pub dist: WeightDist,
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    /// R2QM binary or whitespace-separated text matrix.
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "r2q")]
    pub method: CliMethod,
    /// Elements per group; -1 for one group per row.
    #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
    pub group_size: i64,
    /// Bit width, RTN only.
    #[arg(long, default_value_t = 2)]
    pub k: u8,
}

#[derive(Args, Debug)]
pub struct DequantizeArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(short, long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Comma-separated group sizes.
    #[arg(long, default_value = "-1,64", value_delimiter = ',', allow_hyphen_values = true)]
    pub group_sizes: Vec<i64>,
    /// Comma-separated methods: r2q, 1bit, rtn, rtn-kN.
    #[arg(long, default_value = "r2q,rtn-k2", value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ReportFormat,
    /// Write here instead of stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated MxNxK triples.
    #[arg(long, default_value = "64x64x64,128x64x256", value_delimiter = ',')]
    pub dims: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "r2q")]
    pub method: TrainMethod,
    #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
    pub group_size: i64,
    #[arg(long, default_value_t = 2)]
    pub k: u8,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// kl or mse.
    #[arg(long, default_value = "kl")]
    pub loss: String,
    /// Reuse one batch for every step.
    #[arg(long)]
    pub fixed_batch: bool,
    /// Start the student from random weights instead of the teacher's.
    #[arg(long)]
    pub random_init: bool,
    /// Trace CSV destination; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Directory for the trained student's checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if p.is_relative() && !dir.is_empty() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn check_input(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("input '{}' not found", p.display()),
        )));
    }
    Ok(())
}

fn check_output(p: &Path) -> Result<PathBuf> {
    let p = out_path(p);
    if let Some(parent) = p.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("output directory '{}' does not exist", parent.display()),
            )));
        }
    }
    Ok(p)
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(p)?))
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad dims '{s}', expected MxNxK")))?;
    match parts[..] {
        [m, n, k] if m > 0 && n > 0 && k > 0 => Ok((m, n, k)),
        _ => Err(Error::InvalidArgument(format!("bad dims '{s}', expected MxNxK"))),
    }
}

/// The tensor `quantize` would write, built in memory.
pub fn quantize_matrix(m: &Matrix, method: CliMethod, group_size: i64, k: u8) -> Result<QuantizedTensor> {
    let scheme = GroupScheme::from_signed(group_size)?;
    let method = match method {
        CliMethod::R2q => Method::R2Q,
        CliMethod::Rtn => Method::Rtn { bits: k },
    };
    QuantizedTensor::quantize(m, scheme, method)
}

/// Dequantize an R2Q1 or RTN1 file, picking the format from its magic.
pub fn dequantize_file(path: &Path) -> Result<Matrix> {
    let magic = sniff_magic(path)?;
    if &magic == R2Q_MAGIC {
        Ok(r2q::dequantize(&R2QTensor::load(path)?))
    } else if &magic == RTN_MAGIC {
        Ok(dequantize_rtn(&RtnTensor::load(path)?))
    } else {
        Err(Error::Format(format!("unrecognized magic {magic:?}")))
    }
}

fn cmd_gen(a: &GenArgs, _out: &mut dyn Write) -> Result<()> {
    let dst = check_output(&a.output)?;
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::InvalidArgument("rows and cols must be positive".into()));
    }
    save_matrix(dst, &random_matrix(a.dist, a.rows, a.cols, a.scale, a.seed))
}

fn cmd_quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    check_input(&a.input)?;
    let dst = check_output(&a.output)?;
    let m = load_matrix_any(&a.input)?;
    let q = quantize_matrix(&m, a.method, a.group_size, a.k)?;
    match &q {
        QuantizedTensor::R2Q(t) => t.save(&dst)?,
        QuantizedTensor::Rtn(t) => t.save(&dst)?,
        QuantizedTensor::OneBit(_) => unreachable!("not offered on the command line"),
    }
    let report = layer_mse(std::slice::from_ref(&m), &[q.dequantize()])?;
    let cr = compression_ratio(m.rows(), m.cols(), q.scheme(), q.method())?;
    let hist = occupancy(&q);
    let fractions: Vec<String> = hist.level_fractions().iter().map(|f| format!("{f:.4}")).collect();
    writeln!(
        out,
        "method={} scheme={} shape={}x{} mse={:e} cr={:.6} dominant_share={:.4} empty_levels={:.4} levels=[{}]",
        q.method(),
        q.scheme(),
        m.rows(),
        m.cols(),
        report.mean,
        cr,
        hist.dominant_share(),
        hist.empty_fraction(),
        fractions.join(",")
    )?;
    Ok(())
}

fn cmd_dequantize(a: &DequantizeArgs, _out: &mut dyn Write) -> Result<()> {
    check_input(&a.input)?;
    let dst = check_output(&a.output)?;
    save_matrix(dst, &dequantize_file(&a.input)?)
}

fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    for p in &a.input {
        check_input(p)?;
    }
    let dst = a.output.as_deref().map(check_output).transpose()?;
    let schemes = a
        .group_sizes
        .iter()
        .map(|&g| GroupScheme::from_signed(g))
        .collect::<Result<Vec<_>>>()?;
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>>>()?;
    let layers = a
        .input
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            load_matrix_any(p).map(|m| (name, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = compare_layers(&layers, &schemes, &methods)?;
    let mut sink: Box<dyn Write + '_> = match &dst {
        Some(p) => Box::new(create(p)?),
        None => Box::new(&mut *out),
    };
    match a.format {
        ReportFormat::Csv => report.write_csv(&mut sink)?,
        ReportFormat::Text => report.write_text(&mut sink)?,
        ReportFormat::Long => report.write_long_csv(&mut sink)?,
    }
    sink.flush()?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let dst = a.output.as_deref().map(check_output).transpose()?;
    let dims = a.dims.iter().map(|d| parse_dims(d)).collect::<Result<Vec<_>>>()?;
    let rows = bench(&dims, a.reps, a.seed)?;
    match dst {
        Some(p) => {
            let mut f = create(&p)?;
            write_bench_csv(&mut f, &rows)?;
            f.flush()?;
        }
        None => write_bench_csv(out, &rows)?,
    }
    Ok(())
}

pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    Ok(TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        quantizer: match a.method {
            TrainMethod::R2q => Quantizer::R2Q,
            TrainMethod::Rtn => Quantizer::Rtn { bits: a.k },
            TrainMethod::None => Quantizer::None,
        },
        scheme: GroupScheme::from_signed(a.group_size)?,
        loss: a.loss.parse::<LossKind>()?,
        data: if a.fixed_batch { DataMode::Fixed } else { DataMode::Resample },
        init: if a.random_init { StudentInit::Random } else { StudentInit::FromTeacher },
        ..TrainConfig::default()
    })
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let dst = a.output.as_deref().map(check_output).transpose()?;
    let ckpt = a.checkpoint.as_deref().map(out_path);
    let cfg = train_config(a)?;
    let (trace, student) = train_model(&cfg)?;
    match dst {
        Some(p) => {
            let mut f = create(&p)?;
            trace.write_csv(&mut f)?;
            f.flush()?;
        }
        None => trace.write_csv(&mut *out)?,
    }
    if let Some(dir) = ckpt {
        student.save_checkpoint(dir)?;
    }
    Ok(())
}

/// Run a parsed command, writing reports to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::Dequantize(a) => cmd_dequantize(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Train(a) => cmd_train(a, out),
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
