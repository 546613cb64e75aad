//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::curvature::{fisher_diag, natural_gradient, obd_saliency, obs_saliency, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::metanet::{build, ModelConfig, Variant};
use crate::mlp::FlatGradient;
use crate::suites::Suite;
use crate::taskgen::{
    generate_dataset, generate_example_with_net, read_dataset, split, write_atomic, write_dataset, Dataset, GenConfig,
    NormStats, DEFAULT_BATCH, DEFAULT_TARGET_POINTS,
};
use crate::trainer::{
    evaluate, load_checkpoint, report_csv, save_checkpoint, train, Checkpoint, RunReport, Splits, TrainConfig,
};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_FORMAT: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "gradmeta",
    version,
    about = "Metanetworks over sets of decomposed MLP gradients"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a curvature-estimation dataset (.gds).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch: usize,
        #[arg(long, default_value_t = DEFAULT_TARGET_POINTS)]
        target_points: usize,
        #[arg(long, default_value = "1,32,32,1", value_delimiter = ',')]
        dims: Vec<usize>,
    },
    /// Train a metanetwork; writes a checkpoint and a run report.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Train, validation and test sizes, taken in file order.
        #[arg(long, value_parser = parse_split)]
        split: [usize; 3],
        /// JSON with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Report path; defaults to the checkpoint path with a `.report.json` extension.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Test MSE of a checkpoint next to the standard estimator.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Overrides the split stored in the checkpoint.
        #[arg(long, value_parser = parse_split)]
        split: Option<[usize; 3]>,
    },
    /// Run a property suite; exit status 0 iff every property holds.
    Check {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Apply a curvature oracle to one stored example.
    Oracle {
        #[arg(value_enum)]
        op: OracleOp,
        #[arg(long)]
        grads: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-epoch loss curves of a run report as CSV.
    ExportCsv {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SuiteArg {
    Equivariance,
    Decomposition,
    Oracles,
    Separation,
    Degenerate,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Equivariance => Suite::Equivariance,
            SuiteArg::Decomposition => Suite::Decomposition,
            SuiteArg::Oracles => Suite::Oracles,
            SuiteArg::Separation => Suite::Separation,
            SuiteArg::Degenerate => Suite::Degenerate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleOp {
    FimDiag,
    NaturalGrad,
    Obd,
    Obs,
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

fn parse_split(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list(s)?
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected three sizes, got {}", v.len()))
}

/// Contents of the `--config` file of `train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// The model config to build; a `budget` refits the hidden width on `dims`.
    pub fn resolve_model(&self, dims: &[usize]) -> Result<ModelConfig> {
        match self.model.budget {
            Some(b) => {
                let mut c = ModelConfig::fit_budget(self.model.variant, dims, b)?;
                c.batch = self.model.batch;
                Ok(c)
            }
            None => Ok(self.model.clone()),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Header(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Header(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    model: PathBuf,
    variant: Variant,
    split: [usize; 3],
    test_count: usize,
    test_mse: f64,
    baseline_mse: f64,
    per_example: Vec<f64>,
    baseline_per_example: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct OracleOutput {
    op: OracleOp,
    index: usize,
    eps: Option<f64>,
    layer_dims: Vec<usize>,
    values: Vec<f64>,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no such file: {}", path.display()),
        )))
    }
}

fn normalize_split(ds: &Dataset, sizes: [usize; 3]) -> Result<NormStats> {
    let [train_split, _, _] = split(&ds.examples, sizes)?;
    NormStats::fit(train_split)
}

/// Runs one parsed command. `Ok(false)` means a suite reported a failure.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            count,
            seed,
            batch,
            target_points,
            dims,
        } => {
            let cfg = GenConfig {
                dims,
                batch,
                target_points,
                count,
                seed,
            };
            if cfg.dims.len() < 2 || cfg.dims.contains(&0) || batch == 0 || target_points == 0 {
                return Err(Error::Contract("dims, batch and target points must be positive".into()));
            }
            let examples = generate_dataset(&cfg)?;
            write_dataset(&out, &Dataset::new(&cfg, examples, None))?;
            info!("wrote {count} examples to {}", out.display());
        }
        Command::Train {
            data,
            split: sizes,
            config,
            out,
            seed,
            report,
        } => {
            require_file(&data)?;
            let run_cfg: RunConfig = match &config {
                Some(p) => {
                    require_file(p)?;
                    read_json(p)?
                }
                None => RunConfig::default(),
            };
            let ds = read_dataset(&data)?;
            let dims = ds.header.layer_dims.clone();
            let model_cfg = run_cfg.resolve_model(&dims)?;
            let train_cfg = TrainConfig {
                seed,
                ..run_cfg.train.clone()
            };
            let norm = normalize_split(&ds, sizes)?;
            let [tr, va, te] = split(&ds.examples, sizes)?;
            let model = build(&model_cfg, &dims, seed)?;
            info!(
                "training {} with {} parameters",
                model.variant().name(),
                model.num_params()
            );
            let (model, rep) = train(
                model,
                &Splits {
                    train: tr,
                    val: va,
                    test: te,
                },
                &norm,
                &train_cfg,
            )?;
            let ckpt = Checkpoint {
                model,
                norm: Some(norm),
                split: Some(sizes),
                adam: None,
            };
            save_checkpoint(&out, &ckpt)?;
            let report = report.unwrap_or_else(|| out.with_extension("report.json"));
            write_json(&report, &rep)?;
            println!(
                "best epoch {} val {:.6e} test {} baseline {}",
                rep.best_epoch,
                rep.best_val_mse,
                rep.test_mse.map_or("n/a".into(), |v| format!("{v:.6e}")),
                rep.baseline_test_mse.map_or("n/a".into(), |v| format!("{v:.6e}")),
            );
        }
        Command::Eval {
            data,
            model,
            report,
            split: sizes,
        } => {
            require_file(&data)?;
            require_file(&model)?;
            let ckpt = load_checkpoint(&model)?;
            let ds = read_dataset(&data)?;
            let sizes = sizes
                .or(ckpt.split)
                .ok_or_else(|| Error::Contract("checkpoint carries no split; pass --split".into()))?;
            let norm = match ckpt.norm.clone() {
                Some(n) => n,
                None => normalize_split(&ds, sizes)?,
            };
            let [_, _, te] = split(&ds.examples, sizes)?;
            let r = evaluate(&ckpt.model, te, &norm)?;
            println!("test_mse {:.6e} baseline_mse {:.6e}", r.mse, r.baseline_mse);
            write_json(
                &report,
                &EvalOutput {
                    model,
                    variant: ckpt.model.variant(),
                    split: sizes,
                    test_count: te.len(),
                    test_mse: r.mse,
                    baseline_mse: r.baseline_mse,
                    per_example: r.per_example,
                    baseline_per_example: r.baseline_per_example,
                },
            )?;
        }
        Command::Check { suite, seed } => {
            let suite = Suite::from(suite);
            let verdicts = suite.run(seed)?;
            let mut ok = true;
            for v in &verdicts {
                println!("{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
                ok &= v.passed;
            }
            if suite == Suite::Separation {
                let r = crate::suites::separation_report(8, seed)?;
                println!("mean (first)  {:?}", r.mean_first);
                println!("mean (second) {:?}", r.mean_second);
                println!("natural gradient (first)  {:?}", r.natural_first);
                println!("natural gradient (second) {:?}", r.natural_second);
            }
            return Ok(ok);
        }
        Command::Oracle {
            op,
            grads,
            index,
            eps,
            out,
        } => {
            require_file(&grads)?;
            if !(eps > 0.0 && eps.is_finite()) && matches!(op, OracleOp::NaturalGrad | OracleOp::Obs) {
                return Err(Error::Contract(format!("damping must be positive, got {eps}")));
            }
            let ds = read_dataset(&grads)?;
            let ex = ds.examples.get(index).ok_or_else(|| {
                Error::Contract(format!("index {index} out of range for {} examples", ds.examples.len()))
            })?;
            let flats: Vec<FlatGradient> = (0..ex.input.batch())
                .map(|i| ex.input.sample(i)?.expand())
                .collect::<Result<_>>()?;
            let theta = || -> Result<_> {
                let (regen, net) = generate_example_with_net(&ds.header.gen_config(), index)?;
                if regen.input != ex.input {
                    return Err(Error::Header(format!(
                        "example {index} does not match its recorded seed; cannot recover the network"
                    )));
                }
                Ok(net)
            };
            let values = match op {
                OracleOp::FimDiag => fisher_diag(&flats)?,
                OracleOp::NaturalGrad => natural_gradient(&ex.input.average_gradient()?, &flats, eps)?.into_data(),
                OracleOp::Obd => obd_saliency(&theta()?, &flats)?.into_data(),
                OracleOp::Obs => obs_saliency(&theta()?, &flats, eps)?.into_data(),
            };
            let uses_eps = matches!(op, OracleOp::NaturalGrad | OracleOp::Obs);
            write_json(
                &out,
                &OracleOutput {
                    op,
                    index,
                    eps: uses_eps.then_some(eps),
                    layer_dims: ds.header.layer_dims.clone(),
                    values,
                },
            )?;
        }
        Command::ExportCsv { report, out } => {
            require_file(&report)?;
            let r: RunReport = read_json(&report)?;
            write_atomic(&out, report_csv(&r).as_bytes())?;
        }
    }
    Ok(true)
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        e if e.is_format() => EXIT_FORMAT,
        _ => EXIT_FAILURE,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GRADMETA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Contract(format!("GRADMETA_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Contract(e.to_string()))
}

/// Parses `args`, runs the command and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = configure_threads().and_then(|()| run(cli));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
