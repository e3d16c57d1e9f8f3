//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 training aborted on
//! divergence, 3 self-check failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::admm::{train, AdmmConfig, IterationTrace};
use crate::baselines::{run_baseline, BaselineConfig, BaselineModel, BaselineTrace, OptimizerKind};
use crate::checks::{run_selfcheck, Fault};
use crate::data;
use crate::error::{Error, Result};
use crate::gcn::{gcn_train, sbm_graph, GcnConfig, GcnTrace, Graph, SbmSpec};
use crate::mlp::{Activation, Dataset, MlpArchitecture, Regularizer};
use crate::risk::{Reduction, RiskKind};
use crate::rng::Rng;
use crate::synthetic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_SELFCHECK: i32 = 3;

pub const CSV_HEADER: [&str; 9] = [
    "iter",
    "objective",
    "lagrangian",
    "residual_l2",
    "train_acc",
    "test_acc",
    "descent_ok",
    "ck",
    "wall_time_s",
];

/// Data directory value that selects the built-in synthetic task.
pub const BUILTIN_SEPARABLE: &str = "builtin:separable";
pub const BUILTIN_SBM: &str = "builtin:sbm";

#[derive(Parser, Debug)]
#[command(
    name = "dladmm",
    version,
    about = "Train MLPs and GCNs with dlADMM or gradient baselines",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write one CSV row per epoch.
    #[command(args_override_self = true)]
    Train {
        model: Model,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Run gradient checks, subproblem oracles and a short descent run.
    Selfcheck {
        /// Only the sub-second subset.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Mlp,
    Gcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Dladmm,
    Gd,
    Adagrad,
    Adadelta,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RiskArg {
    CrossEntropy,
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegArg {
    L1,
    L2,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Data directory (IDX files for mlp, graph bundle for gcn), or
    /// `builtin:separable` / `builtin:sbm`.
    #[arg(long)]
    pub data: Option<String>,
    /// Layer sizes including input and output, e.g. 784,200,200,10 (mlp).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Hidden layer widths (gcn).
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "dladmm")]
    pub optimizer: OptimizerArg,
    /// Learning rate for the gradient baselines.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// Hidden-layer penalty (`nu` for mlp, `mu` for gcn).
    #[arg(long, alias = "mu", default_value_t = 1.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "l2")]
    pub reg: RegArg,
    /// `relu` or `leaky:<slope>`.
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long, value_enum, default_value = "cross-entropy")]
    pub risk: RiskArg,
    #[arg(long, value_enum, default_value = "sum")]
    pub reduction: ReductionArg,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on a class-stratified subset of this many samples (mlp).
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record elapsed seconds (otherwise the column is 0).
    #[arg(long)]
    pub wall_time: bool,
    /// Re-check every backtracking certificate with full evaluations.
    #[arg(long)]
    pub audit: bool,
    /// key=value file with the same keys as the long flags; flags given on
    /// the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Splices `--config FILE` entries into the argument list right after the
/// model name so that explicit flags, coming later, override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut i = 0;
    while i < args.len() {
        if strs[i] == "--config" && i + 1 < args.len() {
            path = Some(PathBuf::from(&args[i + 1]));
            i += 2;
            continue;
        }
        if let Some(p) = strs[i].strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            i += 1;
            continue;
        }
        rest.push(args[i].clone());
        i += 1;
    }
    let Some(path) = path else { return Ok(rest) };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format {
                path: path.clone(),
                offset: n as u64 + 1,
                reason: format!("expected key=value, got {line:?}"),
            });
        };
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        if ["wall-time", "audit"].contains(&k.as_str()) {
            match v {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{k}"))),
                "false" | "0" | "no" => {}
                _ => return Err(Error::Argument(format!("{k} expects true or false, got {v:?}"))),
            }
        } else {
            injected.push(OsString::from(format!("--{k}")));
            injected.push(OsString::from(v));
        }
    }
    let at = rest
        .iter()
        .position(|a| a == "mlp" || a == "gcn")
        .map_or(rest.len(), |p| p + 1);
    rest.splice(at..at, injected);
    Ok(rest)
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        _ => s
            .strip_prefix("leaky:")
            .and_then(|v| v.parse().ok())
            .map(Activation::LeakyRelu)
            .ok_or_else(|| Error::Argument(format!("unknown activation {s:?} (use relu or leaky:<slope>)"))),
    }
}

fn optimizer_kind(o: OptimizerArg) -> Option<OptimizerKind> {
    match o {
        OptimizerArg::Dladmm => None,
        OptimizerArg::Gd => Some(OptimizerKind::Gd),
        OptimizerArg::Adagrad => Some(OptimizerKind::adagrad()),
        OptimizerArg::Adadelta => Some(OptimizerKind::adadelta()),
        OptimizerArg::Adam => Some(OptimizerKind::adam()),
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// One CSV row in the fixed column order.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub iter: usize,
    pub objective: f64,
    pub lagrangian: f64,
    pub residual_l2: Option<f64>,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub descent_ok: Option<bool>,
    pub ck: Option<f64>,
    pub wall_time_s: f64,
}

impl Row {
    fn fields(&self) -> [String; 9] {
        let opt = |v: Option<f64>| v.map(fmt_f).unwrap_or_default();
        [
            self.iter.to_string(),
            fmt_f(self.objective),
            fmt_f(self.lagrangian),
            opt(self.residual_l2),
            fmt_f(self.train_acc),
            opt(self.test_acc),
            self.descent_ok.map(|b| b.to_string()).unwrap_or_default(),
            opt(self.ck),
            fmt_f(self.wall_time_s),
        ]
    }
}

impl From<&IterationTrace> for Row {
    fn from(t: &IterationTrace) -> Self {
        Row {
            iter: t.iter,
            objective: t.objective,
            lagrangian: t.lagrangian,
            residual_l2: Some(t.residual_l2),
            train_acc: t.train_acc,
            test_acc: t.test_acc,
            descent_ok: Some(t.descent.satisfied),
            ck: Some(t.ck),
            wall_time_s: t.wall_time_s,
        }
    }
}

impl From<&GcnTrace> for Row {
    fn from(t: &GcnTrace) -> Self {
        Row {
            iter: t.iter,
            objective: t.objective,
            lagrangian: t.lagrangian,
            residual_l2: Some(t.residual_fro),
            train_acc: t.train_acc,
            test_acc: Some(t.test_acc),
            descent_ok: Some(t.descent.satisfied),
            ck: Some(t.ck),
            wall_time_s: t.wall_time_s,
        }
    }
}

fn baseline_row(t: &BaselineTrace, wall: f64) -> Row {
    Row {
        iter: t.epoch,
        objective: t.loss,
        lagrangian: t.loss,
        residual_l2: None,
        train_acc: t.train_acc,
        test_acc: t.test_acc,
        descent_ok: None,
        ck: None,
        wall_time_s: wall,
    }
}

struct CsvSink {
    writer: csv::Writer<Box<dyn Write>>,
    error: Option<Error>,
    path: PathBuf,
}

impl CsvSink {
    fn open(out: Option<&Path>) -> Result<Self> {
        let (inner, path): (Box<dyn Write>, PathBuf) = match out {
            Some(p) => (Box::new(File::create(p).map_err(|e| Error::io(p, e))?), p.to_path_buf()),
            None => (Box::new(io::stdout()), PathBuf::from("<stdout>")),
        };
        let mut sink = CsvSink { writer: csv::Writer::from_writer(inner), error: None, path };
        sink.write(CSV_HEADER.iter().map(|s| s.to_string()));
        Ok(sink)
    }

    fn write(&mut self, fields: impl IntoIterator<Item = String>) {
        if self.error.is_none() {
            if let Err(e) = self.writer.write_record(fields) {
                self.error = Some(Error::Data(format!("writing {}: {e}", self.path.display())));
            }
        }
    }

    fn row(&mut self, r: Row) {
        self.write(r.fields());
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn load_mlp_data(args: &TrainArgs, dir: &str, dims: &[usize]) -> Result<(Dataset, Option<Dataset>)> {
    let k = *dims.last().expect("validated");
    let (train, test) = if dir == BUILTIN_SEPARABLE {
        (synthetic::separable_task(args.seed), None)
    } else {
        let d = Path::new(dir);
        let train = data::load_idx_dataset(d, "train", k)?;
        let test = if d.join("t10k-images-idx3-ubyte").exists() {
            Some(data::load_idx_dataset(d, "t10k", k)?)
        } else {
            None
        };
        (train, test)
    };
    let train = match args.subsample {
        Some(n) => data::subsample(&train, n, &mut Rng::new(args.seed))?,
        None => train,
    };
    Ok((train, test))
}

fn load_gcn_graph(dir: &str, seed: u64) -> Result<Graph> {
    if dir == BUILTIN_SBM {
        sbm_graph(&SbmSpec::default(), &mut Rng::new(seed))
    } else {
        data::load_graph(dir)
    }
}

/// Outcome of a training command.
#[derive(Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_train_acc: Option<f64>,
    pub aborted: Option<Error>,
}

pub fn cmd_train(model: Model, args: &TrainArgs) -> Result<TrainSummary> {
    let dir = args
        .data
        .as_deref()
        .ok_or_else(|| Error::Argument("--data is required".into()))?;
    if args.epochs == 0 {
        return Err(Error::Argument("epochs must be at least 1".into()));
    }
    let activation = parse_activation(&args.activation)?;
    let reduction = match args.reduction {
        ReductionArg::Sum => Reduction::Sum,
        ReductionArg::Mean => Reduction::Mean,
    };
    let baseline = optimizer_kind(args.optimizer).map(|kind| {
        let mut c = BaselineConfig::new(kind, args.epochs, args.seed);
        if let Some(lr) = args.lr {
            c.learning_rate = lr;
        }
        c
    });
    if let Some(c) = &baseline {
        c.validate()?;
    }
    let start = std::time::Instant::now();
    let wall = |on: bool| if on { start.elapsed().as_secs_f64() } else { 0.0 };

    match model {
        Model::Mlp => {
            let dims = match (&args.layers, dir) {
                (Some(l), _) => l.clone(),
                (None, BUILTIN_SEPARABLE) => synthetic::SEPARABLE_LAYERS.to_vec(),
                (None, _) => return Err(Error::Argument("--layers is required for mlp".into())),
            };
            let mut arch = MlpArchitecture::new(dims);
            arch.activation = activation;
            arch.reduction = reduction;
            arch.risk = match args.risk {
                RiskArg::CrossEntropy => RiskKind::CrossEntropy,
                RiskArg::Squared => RiskKind::Squared,
            };
            arch.regularizer = match (args.lambda, args.reg) {
                (l, _) if l == 0.0 => Regularizer::None,
                (l, RegArg::L1) => Regularizer::L1(l),
                (l, RegArg::L2) => Regularizer::L2(l),
            };
            arch.validate()?;
            let (train_set, test_set) = load_mlp_data(args, dir, &arch.layer_dims)?;
            let mut sink = CsvSink::open(args.out.as_deref())?;
            let summary = if let Some(bc) = baseline {
                let model = BaselineModel::Mlp { arch: &arch, data: &train_set, test: test_set.as_ref() };
                let run = run_baseline(&bc, &model, &mut |t| sink.row(baseline_row(t, wall(args.wall_time))))?;
                TrainSummary {
                    epochs_run: run.traces.len(),
                    final_train_acc: run.traces.last().map(|t| t.train_acc),
                    aborted: run.aborted,
                }
            } else {
                let cfg = AdmmConfig {
                    rho: args.rho,
                    nu: args.nu,
                    epochs: args.epochs,
                    seed: args.seed,
                    audit: args.audit,
                    record_wall_time: args.wall_time,
                    ..Default::default()
                };
                let run = train(&arch, &train_set, test_set.as_ref(), &cfg, &mut |t| sink.row(Row::from(t)))?;
                TrainSummary {
                    epochs_run: run.traces.len(),
                    final_train_acc: run.traces.last().map(|t| t.train_acc),
                    aborted: run.aborted,
                }
            };
            sink.finish()?;
            Ok(summary)
        }
        Model::Gcn => {
            let graph = load_gcn_graph(dir, args.seed)?;
            let cfg = GcnConfig {
                hidden_dims: args.hidden.clone(),
                rho: args.rho,
                mu: args.nu,
                epochs: args.epochs,
                seed: args.seed,
                activation,
                reduction,
                audit: args.audit,
                record_wall_time: args.wall_time,
                ..Default::default()
            };
            cfg.validate()?;
            let mut sink = CsvSink::open(args.out.as_deref())?;
            let summary = if let Some(bc) = baseline {
                let model = BaselineModel::Gcn { graph: &graph, config: &cfg };
                let run = run_baseline(&bc, &model, &mut |t| sink.row(baseline_row(t, wall(args.wall_time))))?;
                TrainSummary {
                    epochs_run: run.traces.len(),
                    final_train_acc: run.traces.last().map(|t| t.train_acc),
                    aborted: run.aborted,
                }
            } else {
                let run = gcn_train(&graph, &cfg, &mut |t| sink.row(Row::from(t)))?;
                TrainSummary {
                    epochs_run: run.traces.len(),
                    final_train_acc: run.traces.last().map(|t| t.train_acc),
                    aborted: run.aborted,
                }
            };
            sink.finish()?;
            Ok(summary)
        }
    }
}

fn cmd_selfcheck(quick: bool, fault: Option<Fault>, out: &mut dyn Write) -> i32 {
    let results = run_selfcheck(quick, fault);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let _ = writeln!(
            out,
            "{:<width$}  {}  {}  ({:.2}s)",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.detail,
            r.seconds
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        let _ = writeln!(out, "all {} checks passed", results.len());
        EXIT_OK
    } else {
        let _ = writeln!(out, "failed: {}", failed.join(", "));
        EXIT_SELFCHECK
    }
}

/// Runs the tool with an explicit argument list (including the program
/// name) and returns the process exit code.
pub fn run(args: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match cli.command {
        Command::Selfcheck { quick, inject_fault } => {
            cmd_selfcheck(quick, inject_fault.map(|FaultArg::Gradient| Fault::Gradient), out)
        }
        Command::Train { model, args } => match cmd_train(model, &args) {
            Ok(s) => match s.aborted {
                Some(e) => {
                    let _ = writeln!(err, "training aborted after {} epochs: {e}", s.epochs_run);
                    EXIT_DIVERGED
                }
                None => {
                    if let Some(acc) = s.final_train_acc {
                        let _ = writeln!(err, "{} epochs, final train accuracy {acc:.4}", s.epochs_run);
                    }
                    EXIT_OK
                }
            },
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                EXIT_USAGE
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_entries_land_after_model_and_lose_to_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "# comment\nrho = 4\nwall_time = true\nepochs=3\n").unwrap();
        let args = expand_config(os(&["dladmm", "train", "mlp", "--config", p.to_str().unwrap(), "--epochs", "5"])).unwrap();
        let cli = Cli::try_parse_from(args).unwrap();
        let Command::Train { args, .. } = cli.command else { panic!() };
        assert_eq!(args.rho, 4.0);
        assert_eq!(args.epochs, 5);
        assert!(args.wall_time);
    }

    #[test]
    fn malformed_config_line_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        fs::write(&p, "rho 4\n").unwrap();
        let e = expand_config(os(&["dladmm", "train", "mlp", "--config", p.to_str().unwrap()])).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 1, .. }));
    }

    #[test]
    fn activation_spellings() {
        assert_eq!(parse_activation("relu").unwrap(), Activation::Relu);
        assert_eq!(parse_activation("leaky:0.1").unwrap(), Activation::LeakyRelu(0.1));
        assert!(parse_activation("tanh").is_err());
    }

    #[test]
    fn optional_columns_are_blank() {
        let r = baseline_row(&BaselineTrace { epoch: 3, loss: 0.5, train_acc: 1.0, test_acc: None }, 0.0);
        assert_eq!(r.fields().join(","), "3,0.5,0.5,,1,,,,0");
    }
}
