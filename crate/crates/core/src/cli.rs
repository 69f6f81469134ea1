//! Command-line front end.
//!
//! Exit codes: 0 success, 1 input or usage error, 2 output written but some
//! fit did not converge (or a simulation cell exceeded its failure budget).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::credibility::{credibility_report, empirical_predictive_mse, predictive_mse_from_fit, PredictionTarget};
use crate::distributions::MixingKind;
use crate::error::{Error, Result};
use crate::glm::{fit_nb_glm, fit_poisson_glm};
use crate::panel::{linear_predictor, parse_panel_csv, ClaimPanel};
use crate::re::{fit_shared_re_with, Conditional, ReConfig, ReFit};
use crate::score::{bm_existence_report, nb_score_test, pinquet_statistic, ScoreTestResult};
use crate::sim::{run_study, Analysis, ExperimentOptions, StudyOptions};

#[derive(Debug, Parser)]
#[command(name = "ratekit", version, about = "Random-effect claim frequency models for experience rating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct OutputArgs {
    /// Write the result here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run manifest path [default: <output>.manifest.json, or stderr].
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a GLM or shared random-effect model to a panel CSV.
    Fit {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long, value_enum)]
        re_dist: Option<ReDistArg>,
        #[arg(long)]
        input: PathBuf,
        /// Gauss–Hermite nodes per policy.
        #[arg(long, default_value_t = 32)]
        nodes: usize,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Score tests for a shared random effect.
    Test {
        #[arg(long = "type", value_enum)]
        kind: TestArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Per-policy Bühlmann credibility from a random-effect fit.
    Credibility {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Refit without each policy's last period and report hold-out MSE.
        #[arg(long)]
        holdout_last: bool,
        /// What the held-out count is compared against.
        #[arg(long, value_enum, default_value_t = TargetArg::Buhlmann)]
        target: TargetArg,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Run a replicated simulation design.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        sigma2: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        tau2: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        #[arg(long, env = "RATEKIT_THREADS")]
        threads: Option<usize>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Poisson,
    Nb,
    PoissonRe,
    NbRe,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReDistArg {
    Gamma,
    Lognormal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TestArg {
    Pinquet,
    NbScore,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Buhlmann,
    PriorRate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Provenance written next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub input_digests: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
    pub output_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Run {
    args: Vec<String>,
    started: Instant,
    digests: BTreeMap<String, String>,
    seed: Option<u64>,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        self.digests.insert(path.display().to_string(), sha256_hex(&bytes));
        String::from_utf8(bytes).map_err(|_| Error::domain(format!("{} is not valid UTF-8", path.display())))
    }

    fn panel(&mut self, path: &Path) -> Result<ClaimPanel> {
        let text = self.read(path)?;
        parse_panel_csv(&text).map_err(|e| match e {
            Error::Parse { row, column, message } => Error::Parse {
                row,
                column,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    fn finish(self, out: &OutputArgs, body: &str) -> Result<()> {
        match &out.output {
            Some(p) => std::fs::write(p, body)?,
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(body.as_bytes())?;
                stdout.flush()?;
            }
        }
        let manifest = RunManifest {
            command_line: self.args,
            input_digests: self.digests,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            output_sha256: sha256_hex(body.as_bytes()),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        let path = out.manifest.clone().or_else(|| {
            out.output.as_ref().map(|p| {
                let mut s = p.clone().into_os_string();
                s.push(".manifest.json");
                PathBuf::from(s)
            })
        });
        match path {
            Some(p) => std::fs::write(p, json + "\n")?,
            None => eprintln!("{json}"),
        }
        Ok(())
    }
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn run() -> i32 {
    run_with_args(std::env::args_os())
}

pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let run = Run {
        args: args.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        started: Instant::now(),
        digests: BTreeMap::new(),
        seed: None,
    };
    match dispatch(cli.command, run) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, mut run: Run) -> Result<i32> {
    match cmd {
        Command::Fit {
            model,
            re_dist,
            input,
            nodes,
            out,
        } => {
            let re_kind = match (model, re_dist) {
                (ModelArg::PoissonRe | ModelArg::NbRe, None) => {
                    return Err(Error::domain("--re-dist {gamma|lognormal} is required for random-effect models"))
                }
                (ModelArg::Poisson | ModelArg::Nb, Some(_)) => {
                    return Err(Error::domain("--re-dist applies only to poisson-re and nb-re"))
                }
                (_, Some(ReDistArg::Gamma)) => Some(MixingKind::GammaMeanOne),
                (_, Some(ReDistArg::Lognormal)) => Some(MixingKind::LognormalMeanOne),
                (_, None) => None,
            };
            let panel = run.panel(&input)?;
            let (json, converged, status) = match (model, re_kind) {
                (ModelArg::Poisson, _) | (ModelArg::Nb, _) => {
                    let fit = if matches!(model, ModelArg::Poisson) {
                        fit_poisson_glm(&panel)?
                    } else {
                        fit_nb_glm(&panel)?
                    };
                    (fit.to_json()?, fit.converged, fit.status)
                }
                (m, Some(kind)) => {
                    let cond = if matches!(m, ModelArg::PoissonRe) { Conditional::Poisson } else { Conditional::Negbin };
                    let cfg = ReConfig {
                        nodes,
                        ..ReConfig::default()
                    };
                    let fit = fit_shared_re_with(&panel, cond, kind, &cfg)?;
                    (fit.to_json()?, fit.converged, fit.status)
                }
                _ => unreachable!("random-effect models carry a mixing law"),
            };
            run.finish(&out, &(json + "\n"))?;
            Ok(converged_code(converged, &status))
        }
        Command::Test { kind, input, level, out } => {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::domain(format!("--level must be in (0, 1), got {level}")));
            }
            let panel = run.panel(&input)?;
            let json = match kind {
                TestArg::Both => serde_json::to_string_pretty(&bm_existence_report(&panel, level)?)?,
                TestArg::Pinquet => {
                    let fit = fit_poisson_glm(&panel)?;
                    if !fit.converged {
                        return Err(Error::Estimation(format!("Poisson null fit: {}", fit.status)));
                    }
                    decision_json(pinquet_statistic(&panel, &linear_predictor(&panel, &fit.beta)?)?, level)?
                }
                TestArg::NbScore => decision_json(nb_score_test(&panel, &fit_nb_glm(&panel)?)?, level)?,
            };
            run.finish(&out, &(json + "\n"))?;
            Ok(0)
        }
        Command::Credibility {
            fit,
            input,
            holdout_last,
            target,
            out,
        } => {
            let fit_text = run.read(&fit)?;
            let re_fit: ReFit = serde_json::from_str(&fit_text).map_err(|e| {
                Error::domain(format!(
                    "{} is not a random-effect fit (need conditional, re_dist, sigma2, alpha): {e}",
                    fit.display()
                ))
            })?;
            let panel = run.panel(&input)?;
            let mut report = credibility_report(&panel, &re_fit)?;
            if holdout_last {
                let cfg = ReConfig {
                    nodes: if re_fit.quadrature_nodes > 0 { re_fit.quadrature_nodes } else { ReConfig::default().nodes },
                    ..ReConfig::default()
                };
                let mse = match target {
                    TargetArg::Buhlmann => empirical_predictive_mse(&panel, &re_fit, &cfg)?,
                    TargetArg::PriorRate => {
                        let train = panel.drop_last_periods(1)?;
                        let refit = fit_shared_re_with(&train, re_fit.conditional, re_fit.re_dist, &cfg)?;
                        predictive_mse_from_fit(&panel, &refit, PredictionTarget::PriorRate)?
                    }
                };
                report.predictive_mse = Some(mse);
            }
            if report.lambda_varies {
                eprintln!("note: rates vary within some policies; structural parameters use each policy's mean rate");
            }
            let mut body = report.to_csv()?;
            if let Some(mse) = report.predictive_mse {
                let footer = serde_json::json!({ "predictive_mse": mse, "target": target_name(target), "policies": panel.n_policies() });
                body.push_str(&format!("# {footer}\n"));
            }
            run.finish(&out, &body)?;
            Ok(0)
        }
        Command::Simulate {
            scenario,
            reps,
            seed,
            sigma2,
            tau2,
            alpha,
            k,
            level,
            threads,
            format,
            out,
        } => {
            let analysis: Analysis = scenario.parse()?;
            if reps == Some(0) {
                return Err(Error::domain("--reps must be positive"));
            }
            run.seed = Some(seed);
            let opts = StudyOptions {
                replications: reps,
                seed,
                sigma2,
                tau2,
                alpha,
                k,
                experiment: ExperimentOptions {
                    level,
                    ..ExperimentOptions::default()
                },
            };
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .map_err(|e| Error::domain(format!("cannot start {threads:?} threads: {e}")))?;
            let summary = pool.install(|| run_study(analysis, &opts))?;
            let body = match format {
                FormatArg::Csv => summary.to_csv(),
                FormatArg::Json => summary.to_json()? + "\n",
            };
            let flagged: Vec<_> = summary.cells.iter().filter(|c| c.flagged).collect();
            for c in &flagged {
                eprintln!(
                    "warning: {} cell k={} sigma2={} tau2={} alpha={} failed {}/{} replications (first: {})",
                    c.scenario,
                    c.k,
                    c.sigma2,
                    c.tau2,
                    c.alpha,
                    c.failures,
                    c.replications,
                    c.first_failure.as_deref().unwrap_or("-")
                );
            }
            run.finish(&out, &body)?;
            Ok(if flagged.is_empty() { 0 } else { 2 })
        }
    }
}

fn target_name(t: TargetArg) -> &'static str {
    match t {
        TargetArg::Buhlmann => "buhlmann",
        TargetArg::PriorRate => "prior-rate",
    }
}

fn converged_code(converged: bool, status: &str) -> i32 {
    if converged {
        0
    } else {
        eprintln!("warning: fit did not converge: {status}");
        2
    }
}

#[derive(Serialize)]
struct Decision {
    level: f64,
    reject: bool,
    #[serde(flatten)]
    result: ScoreTestResult,
}

fn decision_json(result: ScoreTestResult, level: f64) -> Result<String> {
    let reject = result.rejects(level);
    Ok(serde_json::to_string_pretty(&Decision { level, reject, result })?)
}
