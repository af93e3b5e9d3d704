//! Subcommand implementations: flag resolution (defaults < config file <
//! flags, with `NBELNET_SEED` overriding the seed), dispatch into the
//! library and deterministic JSON/CSV output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde::Deserialize;

use nbelnet::model::Penalty;
use nbelnet::selection;
use nbelnet::simulate::{
    self, cameron_trivedi_test, DesignKind, DispersionVariant, Experiment, ExperimentKind,
    ReplicationSummary, SimSpec,
};
use nbelnet::solver::{self, SolverConfig};
use nbelnet::theory::{self, TheoryConfig};
use nbelnet::debias;

use crate::io::{read_dataset, write_table};
use crate::jout::{render, JVal};
use crate::CliError;

const SCHEMA_VERSION: i64 = 1;

/// Optional JSON configuration mirroring the command-line flags; explicit
/// flags win over file values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    n: Option<usize>,
    p: Option<usize>,
    d_star: Option<usize>,
    beta_min: Option<f64>,
    beta_max: Option<f64>,
    design: Option<String>,
    clamp_l: Option<f64>,
    theta: Option<f64>,
    seed: Option<u64>,
    replicates: Option<usize>,
    lambda1: Option<f64>,
    lambda1_rate: Option<f64>,
    lambda2: Option<f64>,
    lambda2_coupled: Option<bool>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    zeta: Option<f64>,
    b_sup: Option<f64>,
    epsilon_n: Option<f64>,
    samples: Option<usize>,
    q: Option<f64>,
    lambda_node: Option<f64>,
    level: Option<f64>,
    variant: Option<String>,
    theta_pilot: Option<f64>,
    path: Option<usize>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::input(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::input(format!("{}: invalid config: {e}", p.display())))
        }
    }
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Ok(text) = std::env::var("NBELNET_SEED") {
        return text
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::input(format!("NBELNET_SEED='{text}' is not a u64")));
    }
    Ok(flag.or(file).unwrap_or(0))
}

fn parse_design(text: &str) -> Result<DesignKind<f64>, CliError> {
    if text == "iid" || text == "iid-gaussian" {
        return Ok(DesignKind::IidGaussian);
    }
    if text == "duplicated-pairs" {
        return Ok(DesignKind::DuplicatedPairs);
    }
    if let Some(rho) = text.strip_prefix("ar1:") {
        let rho: f64 = rho
            .parse()
            .map_err(|_| CliError::input(format!("bad ar1 correlation '{rho}'")))?;
        return Ok(DesignKind::Ar1(rho));
    }
    if let Some(rho) = text.strip_prefix("equicorrelated:") {
        let rho: f64 = rho
            .parse()
            .map_err(|_| CliError::input(format!("bad equicorrelated correlation '{rho}'")))?;
        return Ok(DesignKind::Equicorrelated(rho));
    }
    Err(CliError::input(format!(
        "unknown design '{text}' (expected iid, ar1:<rho>, equicorrelated:<rho> or duplicated-pairs)"
    )))
}

fn design_label(design: DesignKind<f64>) -> String {
    match design {
        DesignKind::IidGaussian => "iid".into(),
        DesignKind::Ar1(rho) => format!("ar1:{rho}"),
        DesignKind::Equicorrelated(rho) => format!("equicorrelated:{rho}"),
        DesignKind::DuplicatedPairs => "duplicated-pairs".into(),
    }
}

fn write_json(path: &Path, value: &JVal) -> Result<(), CliError> {
    std::fs::write(path, render(value))
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// shared flag groups

#[derive(Args, Debug)]
pub struct PenaltyFlags {
    /// l1 penalty strength.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Set lambda1 = RATE * sqrt(log p / n) instead of an absolute value.
    #[arg(long, value_name = "RATE", conflicts_with = "lambda1")]
    lambda1_rate: Option<f64>,
    /// l2 penalty strength.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Couple lambda2 = lambda1 / (8 B).
    #[arg(long, conflicts_with = "lambda2")]
    lambda2_coupled: bool,
}

impl PenaltyFlags {
    /// Resolves the penalty pair. `coupled_default` controls what happens
    /// when no lambda2 information is given: simulation experiments couple
    /// it to `lambda1/(8B)`, file-based fits default to 0.
    fn resolve(
        &self,
        file: &FileConfig,
        n: usize,
        p: usize,
        b_sup: f64,
        coupled_default: bool,
    ) -> Result<(Penalty<f64>, f64), CliError> {
        let rate = self.lambda1_rate.or(file.lambda1_rate);
        let lambda1 = match self.lambda1.or(file.lambda1) {
            Some(l1) => l1,
            None => {
                let rate = rate.unwrap_or(2.0);
                rate * ((p as f64).ln() / n as f64).sqrt()
            }
        };
        let coupled = self.lambda2_coupled || file.lambda2_coupled.unwrap_or(coupled_default);
        let lambda2 = match self.lambda2.or(file.lambda2) {
            Some(l2) => l2,
            None if coupled => lambda1 / (8.0 * b_sup),
            None => 0.0,
        };
        let pen = Penalty::new(lambda1, lambda2).map_err(CliError::from)?;
        Ok((pen, lambda1))
    }
}

#[derive(Args, Debug)]
pub struct SolverFlags {
    /// KKT tolerance declaring convergence.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap for the proximal solver.
    #[arg(long)]
    max_iter: Option<usize>,
}

impl SolverFlags {
    fn resolve(&self, file: &FileConfig) -> SolverConfig<f64> {
        let defaults = SolverConfig::<f64>::default();
        SolverConfig {
            tol: self.tol.or(file.tol).unwrap_or(defaults.tol),
            max_iter: self.max_iter.or(file.max_iter).unwrap_or(defaults.max_iter),
            ..defaults
        }
    }
}

#[derive(Args, Debug)]
pub struct SimFlags {
    /// Number of observations per replicate.
    #[arg(long)]
    n: Option<usize>,
    /// Number of covariates.
    #[arg(long)]
    p: Option<usize>,
    /// True support size.
    #[arg(long)]
    d_star: Option<usize>,
    /// Weakest nonzero |beta*|.
    #[arg(long)]
    beta_min: Option<f64>,
    /// Strongest nonzero |beta*| (equal to beta-min pins all magnitudes).
    #[arg(long)]
    beta_max: Option<f64>,
    /// Design family: iid, ar1:<rho>, equicorrelated:<rho>, duplicated-pairs.
    #[arg(long)]
    design: Option<String>,
    /// Covariate truncation bound before standardization.
    #[arg(long)]
    clamp_l: Option<f64>,
    /// NB dispersion.
    #[arg(long)]
    theta: Option<f64>,
    /// Master seed (NBELNET_SEED overrides).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo replicates.
    #[arg(long)]
    replicates: Option<usize>,
}

struct ResolvedSim {
    spec: SimSpec<f64>,
    replicates: usize,
}

impl SimFlags {
    fn resolve(&self, file: &FileConfig) -> Result<ResolvedSim, CliError> {
        let beta_min = self.beta_min.or(file.beta_min).unwrap_or(1.0);
        let design_text = self
            .design
            .clone()
            .or_else(|| file.design.clone())
            .unwrap_or_else(|| "iid".into());
        let spec = SimSpec {
            n: self.n.or(file.n).unwrap_or(200),
            p: self.p.or(file.p).unwrap_or(50),
            d_star: self.d_star.or(file.d_star).unwrap_or(3),
            beta_min,
            beta_max: self.beta_max.or(file.beta_max).unwrap_or(beta_min),
            design: parse_design(&design_text)?,
            clamp_l: self.clamp_l.or(file.clamp_l).unwrap_or(3.0),
            theta: self.theta.or(file.theta).unwrap_or(2.0),
            seed: resolve_seed(self.seed, file.seed)?,
        };
        spec.validate().map_err(CliError::from)?;
        Ok(ResolvedSim {
            spec,
            replicates: self.replicates.or(file.replicates).unwrap_or(100),
        })
    }
}

#[derive(Args, Debug)]
pub struct TheoryFlags {
    /// Cone slope zeta (> 1).
    #[arg(long)]
    zeta: Option<f64>,
    /// Sup-norm bound B on the true coefficients (default: beta-max).
    #[arg(long)]
    b_sup: Option<f64>,
    /// Cone slack epsilon_n.
    #[arg(long)]
    epsilon_n: Option<f64>,
    /// Sampling budget for the cone searches.
    #[arg(long)]
    samples: Option<usize>,
    /// Norm order for the lq oracle bound.
    #[arg(long)]
    q: Option<f64>,
}

impl TheoryFlags {
    fn resolve(
        &self,
        file: &FileConfig,
        b_default: f64,
        l_or_k: f64,
        seed: u64,
    ) -> Result<(TheoryConfig<f64>, f64), CliError> {
        let cfg = TheoryConfig::new(
            self.b_sup.or(file.b_sup).unwrap_or(b_default),
            l_or_k,
            self.epsilon_n.or(file.epsilon_n).unwrap_or(0.0),
            self.zeta.or(file.zeta).unwrap_or(3.0),
            self.samples.or(file.samples).unwrap_or(2048),
            seed,
        )
        .map_err(CliError::from)?;
        Ok((cfg, self.q.or(file.q).unwrap_or(2.0)))
    }
}

fn sim_config_echo(
    spec: &SimSpec<f64>,
    replicates: usize,
    pen: &Penalty<f64>,
    solver_cfg: &SolverConfig<f64>,
) -> BTreeMap<String, JVal> {
    let mut config = JVal::obj();
    config.insert("n".into(), JVal::Int(spec.n as i64));
    config.insert("p".into(), JVal::Int(spec.p as i64));
    config.insert("d_star".into(), JVal::Int(spec.d_star as i64));
    config.insert("beta_min".into(), JVal::Float(spec.beta_min));
    config.insert("beta_max".into(), JVal::Float(spec.beta_max));
    config.insert("design".into(), JVal::Str(design_label(spec.design)));
    config.insert("clamp_l".into(), JVal::Float(spec.clamp_l));
    config.insert("theta".into(), JVal::Float(spec.theta));
    config.insert("seed".into(), JVal::Int(spec.seed as i64));
    config.insert("replicates".into(), JVal::Int(replicates as i64));
    config.insert("lambda1".into(), JVal::Float(pen.lambda1));
    config.insert("lambda2".into(), JVal::Float(pen.lambda2));
    config.insert("tol".into(), JVal::Float(solver_cfg.tol));
    config.insert("max_iter".into(), JVal::Int(solver_cfg.max_iter as i64));
    config
}

fn theory_config_echo(config: &mut BTreeMap<String, JVal>, cfg: &TheoryConfig<f64>, q: f64) {
    config.insert("zeta".into(), JVal::Float(cfg.zeta));
    config.insert("b_sup".into(), JVal::Float(cfg.b_sup));
    config.insert("epsilon_n".into(), JVal::Float(cfg.epsilon_n));
    config.insert("samples".into(), JVal::Int(cfg.samples as i64));
    config.insert("q".into(), JVal::Float(q));
}

fn summary_json(
    command: &str,
    experiment: ExperimentKind,
    config: BTreeMap<String, JVal>,
    summary: &ReplicationSummary<f64>,
) -> JVal {
    let mut root = JVal::obj();
    root.insert("schema_version".into(), JVal::Int(SCHEMA_VERSION));
    root.insert("command".into(), JVal::Str(command.into()));
    root.insert("experiment".into(), JVal::Str(experiment.name().into()));
    root.insert("config".into(), JVal::Obj(config));
    root.insert("replicates".into(), JVal::Int(summary.replicates as i64));
    let mut metrics = JVal::obj();
    for (name, value) in &summary.metrics {
        metrics.insert(name.clone(), JVal::Float(*value));
    }
    root.insert("metrics".into(), JVal::Obj(metrics));
    JVal::Obj(root)
}

fn write_replicate_table(
    path: &Option<PathBuf>,
    summary: &ReplicationSummary<f64>,
) -> Result<(), CliError> {
    if let (Some(path), Some(table)) = (path, &summary.per_replicate) {
        write_table(path, &table.columns, table.rows.iter().cloned())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Input CSV with a 'y' column and numeric covariates.
    #[arg(long)]
    input: PathBuf,
    /// NB dispersion theta.
    #[arg(long)]
    theta: Option<f64>,
    #[command(flatten)]
    penalty: PenaltyFlags,
    #[command(flatten)]
    solver: SolverFlags,
    /// Warm-started path: this many lambda1 values geometrically spaced
    /// from the null-fit threshold down to the target lambda1.
    #[arg(long)]
    path: Option<usize>,
    /// Optional JSON config mirroring the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output JSON path.
    #[arg(long, default_value = "fit.json")]
    out: PathBuf,
}

pub fn run_fit(args: &FitArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let theta = args
        .theta
        .or(file.theta)
        .ok_or_else(|| CliError::input("--theta is required (or set it in --config)"))?;
    let data = read_dataset(&args.input, theta)?;
    let (pen, _) = args.penalty.resolve(
        &file,
        data.dataset.n(),
        data.dataset.p(),
        1.0,
        false,
    )?;
    let solver_cfg = args.solver.resolve(&file);

    let path_points = args.path.or(file.path);
    let mut path_json: Option<JVal> = None;
    let fit = match path_points {
        None => solver::fit(&data.dataset, &pen, &solver_cfg, None)?,
        Some(points) => {
            if points < 2 {
                return Err(CliError::input("--path needs at least 2 grid points"));
            }
            let zero = ndarray::Array1::zeros(data.dataset.p());
            let lambda_max = nbelnet::model::nb_score(&zero.view(), &data.dataset)?
                .iter()
                .fold(0.0f64, |a, &g| a.max(g.abs()));
            let grid: Vec<f64> = if pen.lambda1 >= lambda_max || lambda_max == 0.0 {
                vec![pen.lambda1]
            } else {
                let ratio = pen.lambda1 / lambda_max;
                (0..points)
                    .map(|i| lambda_max * ratio.powf(i as f64 / (points - 1) as f64))
                    .collect()
            };
            let fits = solver::fit_path(&data.dataset, &grid, pen.lambda2, &solver_cfg)?;
            let entries: Vec<JVal> = grid
                .iter()
                .zip(&fits)
                .map(|(&l1, f)| {
                    let mut e = JVal::obj();
                    e.insert("lambda1".into(), JVal::Float(l1));
                    e.insert("objective".into(), JVal::Float(f.objective_value));
                    e.insert("iterations".into(), JVal::Int(f.iterations as i64));
                    e.insert("converged".into(), JVal::Bool(f.converged));
                    e.insert(
                        "support_size".into(),
                        JVal::Int(f.beta.iter().filter(|&&b| b != 0.0).count() as i64),
                    );
                    JVal::Obj(e)
                })
                .collect();
            path_json = Some(JVal::Arr(entries));
            fits.into_iter().last().expect("nonempty path")
        }
    };
    let support = selection::support_and_signs(&fit.beta.view(), 0.0);

    let mut config = JVal::obj();
    config.insert(
        "input".into(),
        JVal::Str(args.input.display().to_string()),
    );
    config.insert("theta".into(), JVal::Float(theta));
    config.insert("lambda1".into(), JVal::Float(pen.lambda1));
    config.insert("lambda2".into(), JVal::Float(pen.lambda2));
    config.insert("tol".into(), JVal::Float(solver_cfg.tol));
    config.insert("max_iter".into(), JVal::Int(solver_cfg.max_iter as i64));
    if let Some(points) = path_points {
        config.insert("path".into(), JVal::Int(points as i64));
    }

    let mut root = JVal::obj();
    root.insert("schema_version".into(), JVal::Int(SCHEMA_VERSION));
    root.insert("command".into(), JVal::Str("fit".into()));
    root.insert("config".into(), JVal::Obj(config));
    if let Some(path) = path_json {
        root.insert("path".into(), path);
    }
    root.insert("beta".into(), JVal::floats(fit.beta.iter().copied()));
    root.insert(
        "covariates".into(),
        JVal::Arr(data.covariate_names.iter().cloned().map(JVal::Str).collect()),
    );
    root.insert("objective".into(), JVal::Float(fit.objective_value));
    root.insert("iterations".into(), JVal::Int(fit.iterations as i64));
    root.insert("converged".into(), JVal::Bool(fit.converged));
    root.insert(
        "kkt_max_violation".into(),
        JVal::Float(fit.kkt.max_violation),
    );
    root.insert(
        "support".into(),
        JVal::ints(support.h_hat.iter().map(|&j| j as i64)),
    );
    root.insert("lambda1".into(), JVal::Float(pen.lambda1));
    root.insert("lambda2".into(), JVal::Float(pen.lambda2));
    root.insert("theta".into(), JVal::Float(theta));
    write_json(&args.out, &JVal::Obj(root))?;

    if !fit.converged {
        return Err(CliError::non_convergence(format!(
            "fit did not reach KKT tolerance {} within {} iterations (max violation {})",
            solver_cfg.tol, solver_cfg.max_iter, fit.kkt.max_violation
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate & experiment shorthands

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Experiment: fit-error, oracle-check, sign-consistency,
    /// honest-selection or debias-coverage.
    #[arg(long, default_value = "fit-error")]
    experiment: String,
    #[command(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    penalty: PenaltyFlags,
    #[command(flatten)]
    solver: SolverFlags,
    #[command(flatten)]
    theory: TheoryFlags,
    /// Nodewise penalty for debias-coverage (default sqrt(log p / n)).
    #[arg(long)]
    lambda_node: Option<f64>,
    /// Confidence level for debias-coverage.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "summary.json")]
    out: PathBuf,
    /// Optional per-replicate CSV path.
    #[arg(long)]
    per_replicate: Option<PathBuf>,
}

struct BuiltExperiment {
    experiment: Experiment<f64>,
    config: BTreeMap<String, JVal>,
    spec: SimSpec<f64>,
    replicates: usize,
}

fn build_experiment(args: &SimulateArgs, kind: ExperimentKind) -> Result<BuiltExperiment, CliError> {
    let file = load_config(&args.config)?;
    let resolved = args.sim.resolve(&file)?;
    let spec = resolved.spec;
    let b_default = spec.beta_max.max(spec.beta_min).max(1e-12);
    let (pen, _) = args
        .penalty
        .resolve(&file, spec.n, spec.p, b_default, true)?;
    let solver_cfg = args.solver.resolve(&file);
    let mut config = sim_config_echo(&spec, resolved.replicates, &pen, &solver_cfg);
    config.insert("experiment".into(), JVal::Str(kind.name().into()));

    let experiment = match kind {
        ExperimentKind::FitError => Experiment::FitError {
            pen,
            solver: solver_cfg,
        },
        ExperimentKind::OracleCheck => {
            let (cfg, q) = args
                .theory
                .resolve(&file, b_default, spec.clamp_l, spec.seed)?;
            theory_config_echo(&mut config, &cfg, q);
            Experiment::OracleCheck {
                pen,
                solver: solver_cfg,
                theory: cfg,
                q,
            }
        }
        ExperimentKind::SignConsistency => Experiment::SignConsistency {
            pen,
            solver: solver_cfg,
            eta: 0.5,
        },
        ExperimentKind::HonestSelection => {
            let (cfg, q) = args
                .theory
                .resolve(&file, b_default, spec.clamp_l, spec.seed)?;
            theory_config_echo(&mut config, &cfg, q);
            Experiment::HonestSelection {
                pen,
                solver: solver_cfg,
                theory: cfg,
            }
        }
        ExperimentKind::DebiasCoverage => {
            let lambda_node = args.lambda_node.or(file.lambda_node).unwrap_or_else(|| {
                ((spec.p as f64).ln() / spec.n as f64).sqrt()
            });
            let level = args.level.or(file.level).unwrap_or(0.95);
            config.insert("lambda_node".into(), JVal::Float(lambda_node));
            config.insert("level".into(), JVal::Float(level));
            Experiment::DebiasCoverage {
                pen,
                solver: solver_cfg,
                lambda_node,
                level,
            }
        }
    };
    Ok(BuiltExperiment {
        experiment,
        config,
        spec,
        replicates: resolved.replicates,
    })
}

fn run_experiment_command(
    command: &str,
    args: &SimulateArgs,
    kind: ExperimentKind,
) -> Result<ReplicationSummary<f64>, CliError> {
    let built = build_experiment(args, kind)?;
    let summary = simulate::run_replications(
        &built.spec,
        &built.experiment,
        built.replicates,
        built.spec.seed,
    )?;
    let json = summary_json(command, kind, built.config, &summary);
    write_json(&args.out, &json)?;
    write_replicate_table(&args.per_replicate, &summary)?;
    Ok(summary)
}

pub fn run_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let kind = ExperimentKind::from_str(&args.experiment).map_err(CliError::from)?;
    let summary = run_experiment_command("simulate", args, kind)?;
    if kind == ExperimentKind::OracleCheck {
        check_compat_applicability(&summary)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct OracleCheckArgs {
    #[command(flatten)]
    inner: SimulateArgs,
}

fn check_compat_applicability(summary: &ReplicationSummary<f64>) -> Result<(), CliError> {
    let qualifying = summary
        .metrics
        .get("compat_qualifying")
        .copied()
        .unwrap_or(0.0);
    if qualifying == 0.0 {
        return Err(CliError::bound_inapplicable(
            "tau exceeded (1/2)e^-1 (or event E failed) in every replicate; \
             the compatibility-route bound never applied",
        ));
    }
    Ok(())
}

pub fn run_oracle_check(args: &OracleCheckArgs) -> Result<(), CliError> {
    let summary = run_experiment_command("oracle-check", &args.inner, ExperimentKind::OracleCheck)?;
    check_compat_applicability(&summary)
}

#[derive(Args, Debug)]
pub struct SignConsistencyArgs {
    #[command(flatten)]
    inner: SimulateArgs,
}

pub fn run_sign_consistency(args: &SignConsistencyArgs) -> Result<(), CliError> {
    run_experiment_command(
        "sign-consistency",
        &args.inner,
        ExperimentKind::SignConsistency,
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    inner: SimulateArgs,
}

pub fn run_select(args: &SelectArgs) -> Result<(), CliError> {
    run_experiment_command("select", &args.inner, ExperimentKind::HonestSelection)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// grouping

#[derive(Args, Debug)]
pub struct GroupingArgs {
    /// Input CSV; omit to fit one simulated replicate instead.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    penalty: PenaltyFlags,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "grouping.json")]
    out: PathBuf,
    /// Per-pair CSV path.
    #[arg(long)]
    per_pair: Option<PathBuf>,
}

pub fn run_grouping(args: &GroupingArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let solver_cfg = args.solver.resolve(&file);
    let mut config = JVal::obj();

    let (data, source) = match &args.input {
        Some(path) => {
            let theta = args
                .sim
                .theta
                .or(file.theta)
                .ok_or_else(|| CliError::input("--theta is required with --input"))?;
            config.insert("input".into(), JVal::Str(path.display().to_string()));
            config.insert("theta".into(), JVal::Float(theta));
            (read_dataset(path, theta)?.dataset, "csv")
        }
        None => {
            let resolved = args.sim.resolve(&file)?;
            let spec = resolved.spec;
            let rep = simulate::make_replicate(&spec, simulate::derive_seed(spec.seed, 0))?;
            config = sim_config_echo(&spec, 1, &Penalty::new(0.0, 0.0).unwrap(), &solver_cfg);
            config.remove("lambda1");
            config.remove("lambda2");
            (rep.data, "simulated")
        }
    };
    let (pen, _) = args
        .penalty
        .resolve(&file, data.n(), data.p(), 1.0, false)?;
    if !(pen.lambda2 > 0.0) {
        return Err(CliError::input(
            "grouping requires lambda2 > 0 (pass --lambda2)",
        ));
    }
    config.insert("lambda1".into(), JVal::Float(pen.lambda1));
    config.insert("lambda2".into(), JVal::Float(pen.lambda2));
    config.insert("tol".into(), JVal::Float(solver_cfg.tol));
    config.insert("max_iter".into(), JVal::Int(solver_cfg.max_iter as i64));
    config.insert("source".into(), JVal::Str(source.into()));

    let fit = solver::fit(&data, &pen, &solver_cfg, None)?;
    let slack = 10.0 * solver_cfg.tol;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut all_hold = true;
    let mut max_gap = f64::NEG_INFINITY;
    for k in 0..data.p() {
        for l in (k + 1)..data.p() {
            let bound = theory::grouping_bound(&fit.beta.view(), &data, &pen, k, l)?;
            let holds = bound.lhs <= bound.rhs + slack;
            all_hold &= holds;
            max_gap = max_gap.max(bound.lhs - bound.rhs);
            rows.push(vec![
                k as f64,
                l as f64,
                bound.rho_kl,
                bound.lhs,
                bound.rhs,
                if holds { 1.0 } else { 0.0 },
            ]);
        }
    }

    let mut root = JVal::obj();
    root.insert("schema_version".into(), JVal::Int(SCHEMA_VERSION));
    root.insert("command".into(), JVal::Str("grouping".into()));
    root.insert("config".into(), JVal::Obj(config));
    root.insert("pairs".into(), JVal::Int(rows.len() as i64));
    root.insert("all_hold".into(), JVal::Bool(all_hold));
    root.insert("max_gap".into(), JVal::Float(max_gap));
    root.insert("converged".into(), JVal::Bool(fit.converged));
    root.insert(
        "kkt_max_violation".into(),
        JVal::Float(fit.kkt.max_violation),
    );
    write_json(&args.out, &JVal::Obj(root))?;
    if let Some(path) = &args.per_pair {
        write_table(
            path,
            &["k", "l", "rho_kl", "lhs", "rhs", "holds"],
            rows.into_iter(),
        )?;
    }
    if !fit.converged {
        return Err(CliError::non_convergence(
            "grouping fit did not converge; the inequality is only certified at the KKT tolerance",
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// debias

#[derive(Args, Debug)]
pub struct DebiasArgs {
    /// Input CSV with a 'y' column and numeric covariates.
    #[arg(long)]
    input: PathBuf,
    /// NB dispersion theta.
    #[arg(long)]
    theta: Option<f64>,
    #[command(flatten)]
    penalty: PenaltyFlags,
    #[command(flatten)]
    solver: SolverFlags,
    /// Nodewise penalty (default sqrt(log p / n)).
    #[arg(long)]
    lambda_node: Option<f64>,
    /// Confidence level.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "debias.json")]
    out: PathBuf,
}

pub fn run_debias(args: &DebiasArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let theta = args
        .theta
        .or(file.theta)
        .ok_or_else(|| CliError::input("--theta is required (or set it in --config)"))?;
    let data = read_dataset(&args.input, theta)?;
    let (pen, _) = args
        .penalty
        .resolve(&file, data.dataset.n(), data.dataset.p(), 1.0, false)?;
    let solver_cfg = args.solver.resolve(&file);
    let lambda_node = args.lambda_node.or(file.lambda_node).unwrap_or_else(|| {
        ((data.dataset.p() as f64).ln() / data.dataset.n() as f64).sqrt()
    });
    let level = args.level.or(file.level).unwrap_or(0.95);

    let fit = solver::fit(&data.dataset, &pen, &solver_cfg, None)?;
    if !fit.converged {
        return Err(CliError::non_convergence(
            "fit did not converge; refusing to de-bias an uncertified estimate",
        ));
    }
    let theta_hat = debias::nodewise_inverse(&data.dataset, &fit.beta.view(), lambda_node)?;
    let result = debias::debias(&fit, &data.dataset, &theta_hat, level)?;
    let rewrite = debias::debias_kkt_rewrite_exact(&fit, &pen, &theta_hat, &data.dataset)?;
    let rewrite_gap = result
        .b_hat
        .iter()
        .zip(rewrite.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let mut config = JVal::obj();
    config.insert("input".into(), JVal::Str(args.input.display().to_string()));
    config.insert("theta".into(), JVal::Float(theta));
    config.insert("lambda1".into(), JVal::Float(pen.lambda1));
    config.insert("lambda2".into(), JVal::Float(pen.lambda2));
    config.insert("lambda_node".into(), JVal::Float(lambda_node));
    config.insert("level".into(), JVal::Float(level));
    config.insert("tol".into(), JVal::Float(solver_cfg.tol));
    config.insert("max_iter".into(), JVal::Int(solver_cfg.max_iter as i64));

    let mut root = JVal::obj();
    root.insert("schema_version".into(), JVal::Int(SCHEMA_VERSION));
    root.insert("command".into(), JVal::Str("debias".into()));
    root.insert("config".into(), JVal::Obj(config));
    root.insert(
        "covariates".into(),
        JVal::Arr(data.covariate_names.iter().cloned().map(JVal::Str).collect()),
    );
    root.insert("beta".into(), JVal::floats(fit.beta.iter().copied()));
    root.insert("b_hat".into(), JVal::floats(result.b_hat.iter().copied()));
    root.insert("se".into(), JVal::floats(result.se.iter().copied()));
    root.insert("ci_low".into(), JVal::floats(result.ci_low.iter().copied()));
    root.insert(
        "ci_high".into(),
        JVal::floats(result.ci_high.iter().copied()),
    );
    root.insert("level".into(), JVal::Float(level));
    root.insert("rewrite_gap".into(), JVal::Float(rewrite_gap));
    write_json(&args.out, &JVal::Obj(root))
}

// ---------------------------------------------------------------------------
// disp-test

#[derive(Args, Debug)]
pub struct DispTestArgs {
    /// Input CSV with a 'y' column and numeric covariates.
    #[arg(long)]
    input: PathBuf,
    /// Variant: linear, quadratic or both.
    #[arg(long, default_value = "both")]
    variant: String,
    /// Dispersion for the pilot mean fit (large = Poisson limit).
    #[arg(long)]
    theta_pilot: Option<f64>,
    #[command(flatten)]
    penalty: PenaltyFlags,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "disp-test.json")]
    out: PathBuf,
}

pub fn run_disp_test(args: &DispTestArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let variant_text = if args.variant == "both" {
        file.variant.clone().unwrap_or_else(|| args.variant.clone())
    } else {
        args.variant.clone()
    };
    let theta_pilot = args.theta_pilot.or(file.theta_pilot).unwrap_or(1e8);
    let data = read_dataset(&args.input, theta_pilot)?;
    // Unpenalized by default: the pilot fit targets the conditional mean.
    let lambda1 = args.penalty.lambda1.or(file.lambda1).unwrap_or(0.0);
    let lambda2 = args.penalty.lambda2.or(file.lambda2).unwrap_or(0.0);
    let pen = Penalty::new(lambda1, lambda2).map_err(CliError::from)?;
    let solver_cfg = args.solver.resolve(&file);
    let fit = solver::fit(&data.dataset, &pen, &solver_cfg, None)?;
    if !fit.converged {
        return Err(CliError::non_convergence(
            "pilot mean fit did not converge; cannot form mu_hat",
        ));
    }
    let mu_hat = data
        .dataset
        .linear_predictor(&fit.beta.view())
        .map_err(CliError::from)?
        .mapv(f64::exp);

    let mut tests = JVal::obj();
    let wanted: Vec<(&str, DispersionVariant)> = match variant_text.as_str() {
        "linear" => vec![("linear", DispersionVariant::Linear)],
        "quadratic" => vec![("quadratic", DispersionVariant::Quadratic)],
        "both" => vec![
            ("linear", DispersionVariant::Linear),
            ("quadratic", DispersionVariant::Quadratic),
        ],
        other => {
            return Err(CliError::input(format!(
                "unknown variant '{other}' (expected linear, quadratic or both)"
            )))
        }
    };
    for (name, variant) in wanted {
        let result = cameron_trivedi_test(&data.y, &mu_hat.view(), variant)?;
        let mut one = JVal::obj();
        one.insert("alpha_hat".into(), JVal::Float(result.alpha_hat));
        one.insert("t_stat".into(), JVal::Float(result.t_stat));
        one.insert("p_value".into(), JVal::Float(result.p_value));
        tests.insert(name.into(), JVal::Obj(one));
    }

    let mut config = JVal::obj();
    config.insert("input".into(), JVal::Str(args.input.display().to_string()));
    config.insert("variant".into(), JVal::Str(variant_text));
    config.insert("theta_pilot".into(), JVal::Float(theta_pilot));
    config.insert("lambda1".into(), JVal::Float(pen.lambda1));
    config.insert("lambda2".into(), JVal::Float(pen.lambda2));
    config.insert("tol".into(), JVal::Float(solver_cfg.tol));
    config.insert("max_iter".into(), JVal::Int(solver_cfg.max_iter as i64));

    let mut root = JVal::obj();
    root.insert("schema_version".into(), JVal::Int(SCHEMA_VERSION));
    root.insert("command".into(), JVal::Str("disp-test".into()));
    root.insert("config".into(), JVal::Obj(config));
    root.insert("pilot_converged".into(), JVal::Bool(fit.converged));
    root.insert("tests".into(), JVal::Obj(tests));
    write_json(&args.out, &JVal::Obj(root))
}
