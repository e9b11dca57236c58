//! Monte Carlo operating characteristics of MMRM vs PROCOVA-MMRM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{treatment_effect, EffectEstimate, VcovFlavor};
use crate::reml::fit_mmrm;
use crate::trial_data::{ModelSpec, TrialDataset};

use super::scenario::{true_effect, Generator, ScenarioConfig, ScenarioKind, BASELINE_COVARIATES};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mmrm,
    ProcovaMmrm,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Mmrm => "MMRM",
            Method::ProcovaMmrm => "PROCOVA-MMRM",
        }
    }

    /// Analysis model used for this method in the given scenario.
    pub fn model_spec(self, kind: ScenarioKind) -> ModelSpec {
        let spec = match self {
            Method::Mmrm => ModelSpec::unadjusted(),
            Method::ProcovaMmrm => ModelSpec::procova(),
        };
        if kind == ScenarioKind::AdditionalCovariates {
            spec.with_baseline((0..BASELINE_COVARIATES).collect())
        } else {
            spec
        }
    }
}

/// One method's result on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub estimate: f64,
    pub variance: f64,
    pub df: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub reject: bool,
    pub structure: crate::covariance::CovarianceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    pub mmrm: Option<MethodOutcome>,
    pub procova: Option<MethodOutcome>,
    pub error: Option<String>,
}

impl ReplicateResult {
    pub fn succeeded(&self) -> bool {
        self.mmrm.is_some() && self.procova.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_estimate: f64,
    pub bias: f64,
    pub average_variance: f64,
    /// Variance of the estimates across replicates.
    pub empirical_variance: f64,
    pub coverage: f64,
    pub rejection_rate: f64,
    pub mean_df: f64,
    /// Replicates that fell back from the first covariance structure.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: ScenarioConfig,
    pub true_effect: f64,
    pub dropout_intercept: f64,
    pub score_outcome_correlation: f64,
    pub replicates: usize,
    pub failures: usize,
    pub mmrm: MethodSummary,
    pub procova: MethodSummary,
    /// PROCOVA-MMRM over MMRM average variance.
    pub variance_ratio: f64,
    #[serde(skip)]
    pub raw: Vec<ReplicateResult>,
}

impl SimulationReport {
    pub fn summaries(&self) -> [&MethodSummary; 2] {
        [&self.mmrm, &self.procova]
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of replicate `index`, a function of the base seed and index only.
pub fn replicate_seed(base: u64, index: usize) -> u64 {
    splitmix64(splitmix64(base) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn analyse(data: &TrialDataset<f64>, method: Method, kind: ScenarioKind, alpha: f64) -> Result<MethodOutcome> {
    let fit = fit_mmrm(data, &method.model_spec(kind))?;
    let e: EffectEstimate<f64> = treatment_effect(&fit, VcovFlavor::Sandwich, alpha)?;
    if !(e.estimate.is_finite() && e.variance.is_finite()) {
        return Err(Error::Numerical("non-finite treatment effect".into()));
    }
    Ok(MethodOutcome {
        estimate: e.estimate,
        variance: e.variance,
        df: e.df,
        ci_low: e.ci_low,
        ci_high: e.ci_high,
        reject: e.p_value < alpha,
        structure: fit.structure,
    })
}

fn run_replicate(gen: &Generator, index: usize) -> ReplicateResult {
    let cfg = gen.config();
    let seed = replicate_seed(cfg.seed, index);
    let mut out = ReplicateResult { index, seed, mmrm: None, procova: None, error: None };
    let data = match gen.generate(seed) {
        Ok(d) => d,
        Err(e) => {
            out.error = Some(format!("generation: {e}"));
            return out;
        }
    };
    for method in [Method::Mmrm, Method::ProcovaMmrm] {
        match analyse(&data, method, cfg.kind, cfg.alpha) {
            Ok(r) => match method {
                Method::Mmrm => out.mmrm = Some(r),
                Method::ProcovaMmrm => out.procova = Some(r),
            },
            Err(e) => {
                out.error = Some(format!("{}: {e}", method.label()));
                log::warn!("replicate {index} ({}): {e}", method.label());
            }
        }
    }
    out
}

/// Runs `f` on a dedicated pool with `workers` threads, or on the global
/// pool when `workers` is `None`.
pub(crate) fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::Config("workers must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn summarize(method: Method, outcomes: &[&MethodOutcome], truth: f64, first: crate::covariance::CovarianceKind) -> MethodSummary {
    let n = outcomes.len() as f64;
    let mean = |f: &dyn Fn(&MethodOutcome) -> f64| outcomes.iter().map(|o| f(o)).sum::<f64>() / n;
    let mean_estimate = mean(&|o| o.estimate);
    let empirical_variance = if outcomes.len() > 1 {
        outcomes.iter().map(|o| (o.estimate - mean_estimate).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MethodSummary {
        method,
        mean_estimate,
        bias: mean_estimate - truth,
        average_variance: mean(&|o| o.variance),
        empirical_variance,
        coverage: mean(&|o| f64::from(u8::from(o.ci_low <= truth && truth <= o.ci_high))),
        rejection_rate: mean(&|o| f64::from(u8::from(o.reject))),
        mean_df: mean(&|o| o.df),
        fallbacks: outcomes.iter().filter(|o| o.structure != first).count(),
    }
}

/// Simulates `config.replicates` trials, analyses each with both methods
/// and aggregates operating characteristics. Replicates where either
/// method fails are excluded; more than 1% failures is an error. The
/// report depends only on the configuration, not on `workers`.
pub fn run_study(config: &ScenarioConfig, workers: Option<usize>) -> Result<SimulationReport> {
    let gen = Generator::new(config)?;
    let truth = true_effect(config)?;
    let raw: Vec<ReplicateResult> =
        with_workers(workers, || (0..config.replicates).into_par_iter().map(|i| run_replicate(&gen, i)).collect())?;
    let ok: Vec<&ReplicateResult> = raw.iter().filter(|r| r.succeeded()).collect();
    let failures = raw.len() - ok.len();
    if failures as f64 > MAX_FAILURE_RATE * raw.len() as f64 || ok.is_empty() {
        return Err(Error::StudyQuality { failures, replicates: raw.len() });
    }
    let first = ModelSpec::DEFAULT_LADDER[0];
    let mmrm: Vec<&MethodOutcome> = ok.iter().filter_map(|r| r.mmrm.as_ref()).collect();
    let procova: Vec<&MethodOutcome> = ok.iter().filter_map(|r| r.procova.as_ref()).collect();
    let mmrm = summarize(Method::Mmrm, &mmrm, truth, first);
    let procova = summarize(Method::ProcovaMmrm, &procova, truth, first);
    let t = config.visits - 1;
    Ok(SimulationReport {
        config: config.clone(),
        true_effect: truth,
        dropout_intercept: gen.dropout_intercept(),
        score_outcome_correlation: gen.joint().score_outcome_correlation(t),
        replicates: raw.len(),
        failures,
        variance_ratio: procova.average_variance / mmrm.average_variance,
        mmrm,
        procova,
        raw,
    })
}

/// Table-shaped CSV: one row per method, preceded by `#` metadata lines.
pub fn write_report_csv<W: std::io::Write>(report: &SimulationReport, meta: &[(String, String)], mut w: W) -> Result<()> {
    for (k, v) in meta {
        writeln!(w, "# {k}: {v}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["method", "estimate", "bias", "average_variance", "coverage", "rejection_rate"])
        .map_err(csv_err)?;
    for s in report.summaries() {
        csv.write_record([
            s.method.label().to_string(),
            format!("{:.6}", s.mean_estimate),
            format!("{:.6}", s.bias),
            format!("{:.6}", s.average_variance),
            format!("{:.4}", s.coverage),
            format!("{:.4}", s.rejection_rate),
        ])
        .map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

/// Per-replicate audit trail.
pub fn write_replicates_csv<W: std::io::Write>(report: &SimulationReport, w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "index", "seed", "method", "estimate", "variance", "df", "ci_low", "ci_high", "reject", "structure", "error",
    ])
    .map_err(csv_err)?;
    for r in &report.raw {
        for (method, o) in [(Method::Mmrm, &r.mmrm), (Method::ProcovaMmrm, &r.procova)] {
            let mut row = vec![r.index.to_string(), r.seed.to_string(), method.label().to_string()];
            match o {
                Some(o) => row.extend([
                    o.estimate.to_string(),
                    o.variance.to_string(),
                    o.df.to_string(),
                    o.ci_low.to_string(),
                    o.ci_high.to_string(),
                    o.reject.to_string(),
                    o.structure.name().to_string(),
                ]),
                None => row.extend(std::iter::repeat_n(String::new(), 7)),
            }
            row.push(r.error.clone().unwrap_or_default());
            csv.write_record(&row).map_err(csv_err)?;
        }
    }
    csv.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
