//! `procova`: fit, plan, validate, simulate and subsample from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
//! failure, 64 command-line usage error.

mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use procova_mmrm::inference::{treatment_effect, vcov, VcovFlavor};
use procova_mmrm::power::{
    min_sample_size, power_curve, procova_standard_error, reduction_fraction, PlanningAssumptions,
};
use procova_mmrm::reml::fit_mmrm;
use procova_mmrm::simulation::{
    ess, psd_ordering_check, run_study, subsample_variance_study, taylor_n0_from_ess, write_replicates_csv,
    write_report_csv, Generator, ScenarioConfig, ScenarioKind, SubsampleOptions,
};
use procova_mmrm::trial_data::{load_dataset, score_outcome_correlations, TrialDataset};
use procova_mmrm::{Arm, CovarianceKind, ModelSpec};

use serde_json::json;

use output::{Artifact, Format, Meta};
use settings::{ArmFilter, EssSettings, FitSettings, Model, PowerSettings, SubsampleSettings, ValidateSettings};

pub const COMMANDS: [&str; 6] = ["fit", "power", "validate-scores", "simulate", "subsample-study", "ess"];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(procova_mmrm::Error),
}

impl From<procova_mmrm::Error> for CliError {
    fn from(e: procova_mmrm::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Lib(e) if e.is_validation() => 1,
            CliError::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "procova", version, about = "Prognostic-covariate-adjusted MMRM analysis and planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file of settings; a `[command]` section or top-level keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact; stdout when omitted.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulation studies.
    #[arg(long, global = true, env = "PROCOVA_WORKERS")]
    workers: Option<usize>,
    /// Format of the artifact printed to stdout.
    /// [default: json]
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit an MMRM and report the final-visit treatment effect.
    Fit(FitArgs),
    /// Power curve and minimal sample size for a prognostic-score-adjusted design.
    Power(PowerArgs),
    /// Per-visit correlation between prognostic scores and outcomes.
    ValidateScores(ValidateArgs),
    /// Monte Carlo operating characteristics of MMRM vs PROCOVA-MMRM.
    Simulate(SimulateArgs),
    /// Mean treatment-effect variance after repeated random participant removal.
    SubsampleStudy(SubsampleArgs),
    /// Effective sample size, control-arm size approximation and precision ordering.
    Ess(EssArgs),
}

#[derive(Args, Debug, Default)]
struct ColumnArgs {
    #[arg(long)]
    id_column: Option<String>,
    #[arg(long)]
    visit_column: Option<String>,
    #[arg(long)]
    arm_column: Option<String>,
    #[arg(long)]
    outcome_column: Option<String>,
    #[arg(long)]
    score_column: Option<String>,
    /// Baseline covariate columns (default: every `cov_*` column).
    #[arg(long, value_delimiter = ',')]
    covariate_columns: Option<Vec<String>>,
}

impl ColumnArgs {
    fn apply(self, map: &mut procova_mmrm::ColumnMap) {
        set(&mut map.id, self.id_column);
        set(&mut map.visit, self.visit_column);
        set(&mut map.arm, self.arm_column);
        set(&mut map.outcome, self.outcome_column);
        set(&mut map.score, self.score_column);
        if let Some(c) = self.covariate_columns {
            map.covariates = Some(c);
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Long-format CSV: one row per participant-visit.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<Model>,
    /// Baseline covariates to adjust for, by column name.
    #[arg(long, value_delimiter = ',')]
    adjust: Option<Vec<String>>,
    /// Covariance structures to try in order (us, toep, cs).
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<CovarianceKind>>,
    #[arg(long, value_parser = parse_vcov)]
    vcov: Option<VcovFlavor>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    columns: ColumnArgs,
}

fn parse_vcov(s: &str) -> Result<VcovFlavor, String> {
    match s {
        "sandwich" | "robust" => Ok(VcovFlavor::Sandwich),
        "model" => Ok(VcovFlavor::Model),
        other => Err(format!("unknown vcov {other:?} (sandwich, model)")),
    }
}

#[derive(Args, Debug)]
struct PowerArgs {
    #[arg(long)]
    dropout: Option<f64>,
    /// Standard-deviation inflation factor γ.
    #[arg(long)]
    gamma: Option<f64>,
    /// Outcome standard deviation σ.
    #[arg(long)]
    sigma: Option<f64>,
    /// Correlation deflation factor λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Validated score-outcome correlation R.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Target treatment effect β.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long)]
    target_power: Option<f64>,
    /// Curve range as start:end:step.
    #[arg(long)]
    n_range: Option<String>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    arm: Option<ArmFilter>,
    #[command(flatten)]
    columns: ColumnArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    #[arg(long, allow_hyphen_values = true)]
    effect: Option<f64>,
    #[arg(long)]
    correlation: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    n_per_arm: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug)]
struct SubsampleArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    correlation: Option<f64>,
    #[arg(long)]
    n_per_arm: Option<usize>,
    #[command(flatten)]
    columns: ColumnArgs,
}

#[derive(Args, Debug)]
struct EssArgs {
    #[arg(long)]
    v_benchmark: Option<f64>,
    #[arg(long)]
    v_new: Option<f64>,
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    n0: Option<f64>,
    #[arg(long)]
    f_prime: Option<f64>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    columns: ColumnArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn required<T>(value: Option<T>, name: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required setting --{name}")))
}

fn load_input(input: &Option<PathBuf>, columns: &procova_mmrm::ColumnMap) -> Result<TrialDataset<f64>, CliError> {
    let path = required(input.clone(), "input")?;
    Ok(load_dataset(&path, columns)?)
}

fn run(mut cli: Cli) -> Result<(), CliError> {
    let cfg = cli.config.as_deref();
    let globals = settings::load_globals(cfg)?;
    let seed_flag = cli.seed;
    cli.seed = cli.seed.or(globals.seed);
    cli.workers = cli.workers.or(globals.workers);
    let output_dir = cli.output.take().or(globals.output);
    let format = cli.format.or(globals.format).unwrap_or(Format::Json);
    let mut meta = Meta::new(cli.seed, cli.workers);
    let artifacts = match cli.command {
        Command::Fit(a) => {
            let mut s: FitSettings = settings::load(cfg, "fit")?;
            set_some(&mut s.input, a.input);
            set(&mut s.model, a.model);
            set(&mut s.adjust, a.adjust);
            set(&mut s.ladder, a.ladder);
            set(&mut s.vcov, a.vcov);
            set(&mut s.alpha, a.alpha);
            a.columns.apply(&mut s.columns);
            meta.command("fit", &s);
            fit(&s, &mut meta)?
        }
        Command::Power(a) => {
            let mut s: PowerSettings = settings::load(cfg, "power")?;
            set(&mut s.dropout, a.dropout);
            set(&mut s.gamma, a.gamma);
            set_some(&mut s.sigma, a.sigma);
            set(&mut s.lambda, a.lambda);
            set_some(&mut s.r, a.r);
            set(&mut s.alpha, a.alpha);
            set_some(&mut s.beta, a.beta);
            set(&mut s.target_power, a.target_power);
            if let Some(range) = a.n_range {
                (s.n_start, s.n_end, s.n_step) = parse_range(&range)?;
            }
            meta.command("power", &s);
            power(&s)?
        }
        Command::ValidateScores(a) => {
            let mut s: ValidateSettings = settings::load(cfg, "validate-scores")?;
            set_some(&mut s.input, a.input);
            set(&mut s.arm, a.arm);
            a.columns.apply(&mut s.columns);
            meta.command("validate-scores", &s);
            validate_scores(&s)?
        }
        Command::Simulate(a) => {
            let mut s: ScenarioConfig = settings::load(cfg, "simulate")?;
            set(&mut s.kind, a.scenario);
            set(&mut s.effect, a.effect);
            set(&mut s.correlation, a.correlation);
            set(&mut s.replicates, a.replicates);
            set(&mut s.n_per_arm, a.n_per_arm);
            set(&mut s.dropout, a.dropout);
            set(&mut s.seed, seed_flag);
            meta.seed = Some(s.seed);
            meta.command("simulate", &s);
            simulate(&s, cli.workers, &mut meta)?
        }
        Command::SubsampleStudy(a) => {
            let mut s: SubsampleSettings = settings::load(cfg, "subsample-study")?;
            set_some(&mut s.input, a.input);
            set(&mut s.fraction, a.fraction);
            set(&mut s.reps, a.reps);
            set(&mut s.alpha, a.alpha);
            set(&mut s.correlation, a.correlation);
            set(&mut s.n_per_arm, a.n_per_arm);
            set(&mut s.seed, seed_flag);
            a.columns.apply(&mut s.columns);
            meta.seed = Some(s.seed);
            meta.command("subsample-study", &s);
            subsample(&s, cli.workers)?
        }
        Command::Ess(a) => {
            let mut s: EssSettings = settings::load(cfg, "ess")?;
            set_some(&mut s.v_benchmark, a.v_benchmark);
            set_some(&mut s.v_new, a.v_new);
            set_some(&mut s.n, a.n);
            set_some(&mut s.n0, a.n0);
            set_some(&mut s.f_prime, a.f_prime);
            set_some(&mut s.input, a.input);
            a.columns.apply(&mut s.columns);
            meta.command("ess", &s);
            ess_report(&s)?
        }
    };
    output::emit(&artifacts, &meta, output_dir.as_deref(), format)
}

fn parse_range(s: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Usage(format!("--n-range expects start:end:step, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let p = |i: usize| parts[i].trim().parse::<usize>().map_err(|_| bad());
    Ok((p(0)?, p(1)?, p(2)?))
}

fn fit(s: &FitSettings, meta: &mut Meta) -> Result<Vec<Artifact>, CliError> {
    let data = load_input(&s.input, &s.columns)?;
    let mut indices = Vec::with_capacity(s.adjust.len());
    for name in &s.adjust {
        let idx = data.covariate_names().iter().position(|c| c == name).ok_or_else(|| {
            CliError::Lib(procova_mmrm::Error::Validation(format!("no baseline covariate column {name:?}")))
        })?;
        indices.push(idx);
    }
    let base = match s.model {
        Model::Procova => ModelSpec::procova(),
        Model::Unadjusted => ModelSpec::unadjusted(),
    };
    let spec = base.with_baseline(indices).with_ladder(s.ladder.clone());
    let fit = fit_mmrm(&data, &spec)?;
    meta.ladder(&fit);
    let effect = treatment_effect(&fit, s.vcov, s.alpha)?;
    let cov = vcov(&fit, s.vcov)?;
    let coefficients: Vec<_> = fit
        .column_labels()
        .iter()
        .enumerate()
        .map(|(j, label)| {
            json!({ "term": label, "estimate": fit.beta[j], "se": cov[(j, j)].sqrt() })
        })
        .collect();
    let mut table = String::from("term,estimate,se\n");
    for (j, label) in fit.column_labels().iter().enumerate() {
        table.push_str(&format!("{label},{},{}\n", fit.beta[j], cov[(j, j)].sqrt()));
    }
    let result = json!({
        "effect": effect,
        "structure": fit.structure,
        "participants": fit.n_participants,
        "observations": fit.n_observations,
        "covariance": (0..fit.psi.dim()).map(|i| (0..fit.psi.dim()).map(|j| fit.psi.as_matrix()[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "coefficients": coefficients,
    });
    Ok(vec![Artifact::json("effect.json", result), Artifact::csv("coefficients.csv", table)])
}

/// Reduction fraction always; curve and minimal n when σ and β are given.
fn power(s: &PowerSettings) -> Result<Vec<Artifact>, CliError> {
    let r = required(s.r, "r")?;
    if s.lambda == 1.0 && s.gamma == 1.0 {
        log::warn!("using λ = 1 and γ = 1; choose conservative planning factors for a real trial");
    }
    let reduction = reduction_fraction(s.lambda, r)?;
    let (Some(sigma), Some(beta)) = (s.sigma, s.beta) else {
        log::info!("--sigma and --beta not both given; reporting the reduction fraction only");
        return Ok(vec![Artifact::json("min_n.json", json!({ "reduction_fraction": reduction }))]);
    };
    let a = PlanningAssumptions { dropout: s.dropout, gamma: s.gamma, sigma, lambda: s.lambda, r, alpha: s.alpha, beta };
    let curve = power_curve(&a, s.n_start, s.n_end, s.n_step)?;
    let mut table = String::from("n,nu,power\n");
    for p in &curve {
        let nu = procova_standard_error(&a.with_n(p.n as f64))?;
        table.push_str(&format!("{},{nu},{}\n", p.n, p.power));
    }
    let min_n = min_sample_size(&a, s.target_power)?;
    let result = json!({
        "assumptions": a,
        "target_power": s.target_power,
        "min_sample_size": min_n,
        "reduction_fraction": reduction,
    });
    Ok(vec![Artifact::json("min_n.json", result), Artifact::csv("power_curve.csv", table)])
}

fn validate_scores(s: &ValidateSettings) -> Result<Vec<Artifact>, CliError> {
    let data = load_input(&s.input, &s.columns)?;
    let filter = match s.arm {
        ArmFilter::Control => Some(Arm::Control),
        ArmFilter::Treatment => Some(Arm::Treatment),
        ArmFilter::All => None,
    };
    let mut rows = Vec::new();
    let mut table = String::from("visit,label,n,r\n");
    for (t, r) in score_outcome_correlations(&data, filter).into_iter().enumerate() {
        let n = data
            .participants()
            .iter()
            .filter(|p| filter.is_none_or(|a| p.arm == a) && p.outcomes[t].is_some())
            .count();
        let label = &data.schedule().labels()[t];
        match r {
            Ok(r) => {
                table.push_str(&format!("{},{label},{n},{r}\n", t + 1));
                rows.push(json!({ "visit": t + 1, "label": label, "n": n, "r": r }));
            }
            Err(e) => {
                log::warn!("visit {}: {e}", t + 1);
                table.push_str(&format!("{},{label},{n},\n", t + 1));
                rows.push(json!({ "visit": t + 1, "label": label, "n": n, "r": null, "error": e.to_string() }));
            }
        }
    }
    Ok(vec![Artifact::json("score_validation.json", json!({ "visits": rows })), Artifact::csv("score_validation.csv", table)])
}

fn simulate(s: &ScenarioConfig, workers: Option<usize>, meta: &mut Meta) -> Result<Vec<Artifact>, CliError> {
    let report = run_study(s, workers)?;
    meta.ladder = Some(json!({
        "selected": "per replicate",
        "fallbacks": { "mmrm": report.mmrm.fallbacks, "procova": report.procova.fallbacks },
    }));
    let mut table = Vec::new();
    write_report_csv(&report, &[], &mut table)?;
    let mut raw = Vec::new();
    write_replicates_csv(&report, &mut raw)?;
    Ok(vec![
        Artifact::json("report.json", serde_json::to_value(&report).map_err(json_err)?),
        Artifact::csv("report.csv", String::from_utf8_lossy(&table).into_owned()),
        Artifact::csv("replicates.csv", String::from_utf8_lossy(&raw).into_owned()).secondary(),
    ])
}

fn subsample(s: &SubsampleSettings, workers: Option<usize>) -> Result<Vec<Artifact>, CliError> {
    let data = match &s.input {
        Some(_) => load_input(&s.input, &s.columns)?,
        None => {
            let cfg = ScenarioConfig { correlation: s.correlation, n_per_arm: s.n_per_arm, seed: s.seed, ..Default::default() };
            Generator::new(&cfg)?.generate(s.seed)?
        }
    };
    let opts = SubsampleOptions { fraction: s.fraction, reps: s.reps, seed: s.seed, alpha: s.alpha, ..Default::default() };
    let study = subsample_variance_study(&data, &opts, workers)?;
    let table = format!(
        "fraction,reps,failures,mean_variance,sd_variance,full_adjusted_variance,full_benchmark_variance,accurate\n{},{},{},{},{},{},{},{}\n",
        study.fraction,
        study.reps,
        study.failures,
        study.mean_variance,
        study.sd_variance,
        study.full_adjusted_variance,
        study.full_benchmark_variance,
        study.accurate
    );
    Ok(vec![
        Artifact::json("subsample.json", serde_json::to_value(&study).map_err(json_err)?),
        Artifact::csv("subsample.csv", table),
    ])
}

fn ess_report(s: &EssSettings) -> Result<Vec<Artifact>, CliError> {
    let mut result = serde_json::Map::new();
    let mut table = String::from("quantity,value\n");
    if s.v_benchmark.is_some() || s.v_new.is_some() || s.n.is_some() {
        let vb = required(s.v_benchmark, "v-benchmark")?;
        let vn = required(s.v_new, "v-new")?;
        let n = required(s.n, "n")?;
        let e = ess(vb, vn, n)?;
        result.insert("ess".into(), json!(e));
        table.push_str(&format!("ess,{e}\n"));
        if let (Some(n0), Some(fp)) = (s.n0, s.f_prime) {
            let approx = taylor_n0_from_ess(n0, n, e, vb, fp)?;
            result.insert("control_arm_size".into(), json!(approx));
            table.push_str(&format!("control_arm_size,{approx}\n"));
        }
    }
    if s.input.is_some() {
        let data = load_input(&s.input, &s.columns)?;
        let r = psd_ordering_check(&data, &ModelSpec::procova(), None)?;
        table.push_str(&format!(
            "precision_difference_min_eigenvalue,{}\nfull_variance,{}\ncomplete_case_variance,{}\n",
            r.min_eigenvalue, r.full_variance, r.complete_case_variance
        ));
        result.insert("precision_ordering".into(), serde_json::to_value(&r).map_err(json_err)?);
    }
    if result.is_empty() {
        return Err(CliError::Usage("give --v-benchmark/--v-new/--n and/or --input".into()));
    }
    Ok(vec![Artifact::json("ess.json", serde_json::Value::Object(result)), Artifact::csv("ess.csv", table)])
}

fn json_err(e: serde_json::Error) -> CliError {
    CliError::Lib(procova_mmrm::Error::Numerical(format!("serialization: {e}")))
}
