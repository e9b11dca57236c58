//! Scenario configuration, joint covariance construction and trial generation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::normal_quantile;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, min_eigenvalue};
use crate::trial_data::{Arm, ParticipantRecord, TrialDataset, VisitSchedule};

/// Number of baseline covariates driving dropout (and, in the additional
/// covariates scenario, entering the analysis).
pub const BASELINE_COVARIATES: usize = 3;

/// Per-visit mean and standard deviation of the score shift in the
/// population-shift scenario (five visits).
pub const SHIFT_MEAN: [f64; 5] = [-0.3, -0.5, -1.0, -2.0, -2.5];
pub const SHIFT_SD: [f64; 5] = [3.0, 4.0, 6.0, 7.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Scores linearly related to outcomes; constant treatment effect.
    #[default]
    Linear,
    /// Linear plus three baseline covariates correlated with the outcome,
    /// adjusted for by both analyses.
    AdditionalCovariates,
    /// Analyst-visible scores perturbed by per-visit noise.
    Shifted,
    /// Treatment effect varies with the baseline covariates.
    Heterogeneous,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] =
        [ScenarioKind::Linear, ScenarioKind::AdditionalCovariates, ScenarioKind::Shifted, ScenarioKind::Heterogeneous];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Linear => "linear",
            ScenarioKind::AdditionalCovariates => "additional_covariates",
            ScenarioKind::Shifted => "shifted",
            ScenarioKind::Heterogeneous => "heterogeneous",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "linear" => Ok(ScenarioKind::Linear),
            "additional_covariates" | "covariates" => Ok(ScenarioKind::AdditionalCovariates),
            "shifted" => Ok(ScenarioKind::Shifted),
            "heterogeneous" => Ok(ScenarioKind::Heterogeneous),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Generator and study parameters for one simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub visits: usize,
    pub n_per_arm: usize,
    /// Treatment effect at the final visit.
    pub effect: f64,
    /// Score-outcome correlation at every visit.
    pub correlation: f64,
    /// Cumulative dropout by the final visit.
    pub dropout: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Common correlation between outcomes at different visits.
    pub visit_correlation: f64,
    /// Variance at the first visit as a fraction of the final-visit variance.
    pub first_visit_variance: f64,
    /// Effect and power at which the completers' two-sample test is calibrated.
    pub calibration_effect: f64,
    pub calibration_power: f64,
    /// Dropout log-odds per unit of each standardized baseline covariate.
    pub dropout_slope: f64,
    /// Correlation of each baseline covariate with the outcome
    /// (additional covariates scenario).
    pub covariate_correlation: f64,
    /// Final-visit effect change per unit of each baseline covariate
    /// (heterogeneous scenario).
    pub interaction: f64,
    pub alpha: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Linear,
            visits: 5,
            n_per_arm: 1000,
            effect: -1.2,
            correlation: 0.5,
            dropout: 0.30,
            replicates: 2500,
            seed: 1,
            visit_correlation: 0.75,
            first_visit_variance: 0.5,
            calibration_effect: 1.2,
            calibration_power: 0.8,
            dropout_slope: 0.4,
            covariate_correlation: 0.25,
            interaction: 0.1,
            alpha: 0.05,
        }
    }
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.visits == 0 {
            return bad("visits must be positive".into());
        }
        if self.kind == ScenarioKind::Shifted && self.visits != SHIFT_MEAN.len() {
            return bad(format!("the shifted scenario is defined for {} visits", SHIFT_MEAN.len()));
        }
        if self.n_per_arm < 2 {
            return bad("n_per_arm must be at least 2".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if !self.effect.is_finite() || !self.interaction.is_finite() || !self.dropout_slope.is_finite() {
            return bad("effect, interaction and dropout_slope must be finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.dropout > 0.0 && self.visits < 2 {
            return bad("dropout needs at least two visits".into());
        }
        if !(self.visit_correlation > -1.0 / (self.visits.max(2) - 1) as f64 && self.visit_correlation < 1.0) {
            return bad(format!("visit_correlation {} does not give a valid covariance", self.visit_correlation));
        }
        if !(self.first_visit_variance > 0.0) {
            return bad("first_visit_variance must be positive".into());
        }
        if !(self.calibration_effect > 0.0) || !(self.calibration_power > 0.0 && self.calibration_power < 1.0) {
            return bad("calibration_effect must be positive and calibration_power in (0, 1)".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} not in (0, 1)", self.alpha));
        }
        Ok(())
    }

    fn covariate_block(&self) -> usize {
        if self.kind == ScenarioKind::AdditionalCovariates {
            BASELINE_COVARIATES
        } else {
            0
        }
    }

    /// Final-visit outcome SD giving the configured power for a two-sample
    /// z-test on completers at the calibration effect.
    pub fn final_visit_sd(&self) -> f64 {
        let completers = self.n_per_arm as f64 * (1.0 - self.dropout);
        let z = normal_quantile(1.0 - self.alpha / 2.0) + normal_quantile(self.calibration_power);
        self.calibration_effect / z * (completers / 2.0).sqrt()
    }

    /// Treatment effect at zero-based visit `t` given covariates `z`.
    pub fn visit_effect(&self, t: usize, z: &[f64]) -> f64 {
        let ramp = (t + 1) as f64 / self.visits as f64;
        match self.kind {
            ScenarioKind::Heterogeneous => ramp * (self.effect + self.interaction * z.iter().sum::<f64>()),
            _ => ramp * self.effect,
        }
    }
}

/// Covariance of (outcomes, scores[, covariates]) for one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCovariance {
    matrix: DMatrix<f64>,
    visits: usize,
    covariates: usize,
    cross_scale: f64,
}

impl JointCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn visits(&self) -> usize {
        self.visits
    }

    pub fn covariates(&self) -> usize {
        self.covariates
    }

    /// Score-outcome correlation actually used (after any PD back-off).
    pub fn cross_scale(&self) -> f64 {
        self.cross_scale
    }

    pub fn outcome_block(&self) -> DMatrix<f64> {
        self.matrix.view((0, 0), (self.visits, self.visits)).into_owned()
    }

    pub fn score_block(&self) -> DMatrix<f64> {
        let t = self.visits;
        self.matrix.view((t, t), (t, t)).into_owned()
    }

    /// Cov(y, x).
    pub fn cross_block(&self) -> DMatrix<f64> {
        let t = self.visits;
        self.matrix.view((0, t), (t, t)).into_owned()
    }

    /// corr(x_t, y_t), zero-based visit.
    pub fn score_outcome_correlation(&self, t: usize) -> f64 {
        let v = self.visits;
        self.matrix[(t, v + t)] / (self.matrix[(t, t)] * self.matrix[(v + t, v + t)]).sqrt()
    }
}

/// Outcome block with linearly rising variances and common inter-visit
/// correlation; score block equal to it; cross block `c` times it, so that
/// corr(x_t, y_t) = c and E[y_t | x] = c·x_t. The additional covariates
/// scenario appends three independent unit-variance covariates with
/// cov(y_t, z_k) = ρ_z·sd(y_t) and cov(x, z) = 0.
pub fn build_joint_covariance(config: &ScenarioConfig) -> Result<JointCovariance> {
    config.validate()?;
    let c = config.correlation;
    if !(c.abs() < 1.0) {
        return Err(Error::Feasibility(format!("score-outcome correlation {c} must lie strictly inside (-1, 1)")));
    }
    let t = config.visits;
    let k = config.covariate_block();
    let final_var = config.final_visit_sd().powi(2);
    let sd: Vec<f64> = (0..t)
        .map(|s| {
            let frac = if t == 1 { 1.0 } else { s as f64 / (t - 1) as f64 };
            (final_var * (config.first_visit_variance + (1.0 - config.first_visit_variance) * frac)).sqrt()
        })
        .collect();
    let outcome = DMatrix::from_fn(t, t, |a, b| {
        let rho = if a == b { 1.0 } else { config.visit_correlation };
        rho * sd[a] * sd[b]
    });

    let assemble = |scale: f64| {
        let mut m = DMatrix::<f64>::zeros(2 * t + k, 2 * t + k);
        m.view_mut((0, 0), (t, t)).copy_from(&outcome);
        m.view_mut((t, t), (t, t)).copy_from(&outcome);
        let cross = &outcome * scale;
        m.view_mut((0, t), (t, t)).copy_from(&cross);
        m.view_mut((t, 0), (t, t)).copy_from(&cross.transpose());
        for j in 0..k {
            m[(2 * t + j, 2 * t + j)] = 1.0;
            for s in 0..t {
                let v = config.covariate_correlation * sd[s];
                m[(s, 2 * t + j)] = v;
                m[(2 * t + j, s)] = v;
            }
        }
        m
    };

    let mut scale = c;
    for _ in 0..200 {
        let m = assemble(scale);
        let floor = 1e-8 * m.diagonal().max();
        if min_eigenvalue(&m) > floor {
            if scale != c {
                log::warn!("joint covariance not PD at correlation {c}; backed off to {scale:.4}");
            }
            return Ok(JointCovariance { matrix: m, visits: t, covariates: k, cross_scale: scale });
        }
        scale *= 0.95;
    }
    Err(Error::Feasibility(format!("no positive-definite joint covariance near correlation {c}")))
}

/// Probability of having dropped out by the final visit when the per-visit
/// hazard on visits 2..T is logistic(η₀ + slope·Σz), z ~ N(0, I₃).
pub fn cumulative_dropout(eta0: f64, slope: f64, visits: usize) -> f64 {
    if visits < 2 {
        return 0.0;
    }
    let sd = slope.abs() * (BASELINE_COVARIATES as f64).sqrt();
    let at_risk = (visits - 1) as i32;
    let stay = |s: f64| (1.0 - logistic(eta0 + s)).powi(at_risk);
    if sd == 0.0 {
        return 1.0 - stay(0.0);
    }
    // trapezoid rule over ±10 sd; the integrand is smooth and the tails negligible
    let n = 4000;
    let h = 20.0 / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let u = -10.0 + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * (-0.5 * u * u).exp() * stay(u * sd);
    }
    1.0 - acc * h / (2.0 * std::f64::consts::PI).sqrt()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hazard intercept η₀ reaching the configured cumulative dropout.
/// Returns `-inf` for zero dropout.
pub fn calibrate_dropout(config: &ScenarioConfig) -> Result<f64> {
    config.validate()?;
    let target = config.dropout;
    if target == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let f = |eta: f64| cumulative_dropout(eta, config.dropout_slope, config.visits) - target;
    let (mut lo, mut hi) = (-40.0, 40.0);
    if !(f(lo) < 0.0 && f(hi) > 0.0) {
        return Err(Error::Calibration(format!("dropout target {target} not bracketed")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let eta = 0.5 * (lo + hi);
    if f(eta).abs() > 1e-9 {
        return Err(Error::Calibration(format!("bisection stalled at η₀ = {eta}")));
    }
    Ok(eta)
}

/// Everything the generator needs, precomputed once per study.
#[derive(Debug, Clone)]
pub struct Generator {
    config: ScenarioConfig,
    joint: JointCovariance,
    factor: DMatrix<f64>,
    eta0: f64,
}

impl Generator {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        let joint = build_joint_covariance(config)?;
        Self::with_joint(config, joint)
    }

    pub fn with_joint(config: &ScenarioConfig, joint: JointCovariance) -> Result<Self> {
        config.validate()?;
        if joint.visits() != config.visits || joint.covariates() != config.covariate_block() {
            return Err(Error::Shape("joint covariance does not match the scenario".into()));
        }
        let factor = cholesky(joint.matrix(), "joint covariance")?.l();
        let eta0 = calibrate_dropout(config)?;
        Ok(Self { config: config.clone(), joint, factor, eta0 })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn joint(&self) -> &JointCovariance {
        &self.joint
    }

    pub fn dropout_intercept(&self) -> f64 {
        self.eta0
    }

    /// One simulated trial: `n_per_arm` controls followed by `n_per_arm`
    /// treated participants, with monotone dropout and three baseline
    /// covariates named `cov_1..cov_3`.
    pub fn generate(&self, seed: u64) -> Result<TrialDataset<f64>> {
        let cfg = &self.config;
        let t = cfg.visits;
        let k = self.joint.covariates();
        let dim = 2 * t + k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut participants = Vec::with_capacity(2 * cfg.n_per_arm);
        let mut normals = DVector::<f64>::zeros(dim);
        for i in 0..2 * cfg.n_per_arm {
            let arm = if i < cfg.n_per_arm { Arm::Control } else { Arm::Treatment };
            normals.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let draw = &self.factor * &normals;
            let z: Vec<f64> = if k > 0 {
                draw.rows(2 * t, k).iter().copied().collect()
            } else {
                (0..BASELINE_COVARIATES).map(|_| rng.sample(StandardNormal)).collect()
            };
            let mut outcomes: Vec<Option<f64>> = (0..t)
                .map(|s| {
                    let shift = if arm == Arm::Treatment { cfg.visit_effect(s, &z) } else { 0.0 };
                    Some(draw[s] + shift)
                })
                .collect();
            let mut scores: Vec<f64> = draw.rows(t, t).iter().copied().collect();
            if cfg.kind == ScenarioKind::Shifted {
                for (s, x) in scores.iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *x += SHIFT_MEAN[s] + SHIFT_SD[s] * e;
                }
            }
            if self.eta0.is_finite() {
                let h = logistic(self.eta0 + cfg.dropout_slope * z.iter().sum::<f64>());
                for s in 1..t {
                    if rng.random::<f64>() < h {
                        outcomes[s..].iter_mut().for_each(|y| *y = None);
                        break;
                    }
                }
            }
            participants.push(ParticipantRecord {
                id: format!("S{:05}", i + 1),
                arm,
                outcomes,
                prognostic_scores: scores,
                baseline_covariates: z,
            });
        }
        let names = (1..=BASELINE_COVARIATES).map(|j| format!("cov_{j}")).collect();
        TrialDataset::new(VisitSchedule::numbered(t)?, participants, names)
    }
}

/// Draws one simulated trial.
pub fn generate_trial(config: &ScenarioConfig, joint: &JointCovariance, seed: u64) -> Result<TrialDataset<f64>> {
    Generator::with_joint(config, joint.clone())?.generate(seed)
}

/// Population average of Y(1) − Y(0) at the final visit. Exact for
/// constant-effect scenarios; a 10⁶-draw Monte Carlo average over the
/// covariate distribution for the heterogeneous scenario.
pub fn true_effect(config: &ScenarioConfig) -> Result<f64> {
    config.validate()?;
    if config.kind != ScenarioKind::Heterogeneous {
        return Ok(config.effect);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7275_655f_6566_6665);
    let draws = 1_000_000;
    let last = config.visits - 1;
    let mut z = [0.0; BASELINE_COVARIATES];
    let mut acc = 0.0;
    for _ in 0..draws {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        acc += config.visit_effect(last, &z);
    }
    Ok(acc / draws as f64)
}
