//! Repeated random participant removal: how much PROCOVA-MMRM variance is
//! left after discarding a fraction of the sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{treatment_effect, VcovFlavor};
use crate::reml::fit_mmrm;
use crate::trial_data::{subsample_participants, ModelSpec, TrialDataset};

use super::study::{replicate_seed, with_workers};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleOptions {
    /// Share of each arm retained.
    pub fraction: f64,
    pub reps: usize,
    pub seed: u64,
    /// Model refitted on every subsample.
    pub adjusted: ModelSpec,
    /// Model fitted once on the full data for comparison.
    pub benchmark: ModelSpec,
    pub alpha: f64,
}

impl Default for SubsampleOptions {
    fn default() -> Self {
        Self {
            fraction: 0.75,
            reps: 1000,
            seed: 1,
            adjusted: ModelSpec::procova(),
            benchmark: ModelSpec::unadjusted(),
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleStudy {
    pub fraction: f64,
    pub reps: usize,
    pub failures: usize,
    /// Mean sandwich variance of the adjusted treatment effect over subsamples.
    pub mean_variance: f64,
    pub sd_variance: f64,
    pub min_variance: f64,
    pub max_variance: f64,
    /// Adjusted model on the full data.
    pub full_adjusted_variance: f64,
    /// Benchmark model on the full data.
    pub full_benchmark_variance: f64,
    /// Whether the subsampled adjusted variance does not exceed the
    /// full-data benchmark variance.
    pub accurate: bool,
}

fn effect_variance(data: &TrialDataset<f64>, spec: &ModelSpec, alpha: f64) -> Result<f64> {
    let fit = fit_mmrm(data, spec)?;
    Ok(treatment_effect(&fit, VcovFlavor::Sandwich, alpha)?.variance)
}

pub fn subsample_variance_study(
    data: &TrialDataset<f64>,
    options: &SubsampleOptions,
    workers: Option<usize>,
) -> Result<SubsampleStudy> {
    if !(options.fraction > 0.0 && options.fraction <= 1.0) {
        return Err(Error::Range { name: "fraction", message: format!("{} not in (0, 1]", options.fraction) });
    }
    if options.reps == 0 {
        return Err(Error::Range { name: "reps", message: "at least one repetition required".into() });
    }
    let full_adjusted_variance = effect_variance(data, &options.adjusted, options.alpha)?;
    let full_benchmark_variance = effect_variance(data, &options.benchmark, options.alpha)?;

    let variances: Vec<Option<f64>> = if options.fraction == 1.0 {
        vec![Some(full_adjusted_variance); options.reps]
    } else {
        with_workers(workers, || {
            (0..options.reps)
                .into_par_iter()
                .map(|i| {
                    let sub = subsample_participants(data, options.fraction, replicate_seed(options.seed, i)).ok()?;
                    match effect_variance(&sub, &options.adjusted, options.alpha) {
                        Ok(v) => Some(v),
                        Err(e) => {
                            log::warn!("subsample {i}: {e}");
                            None
                        }
                    }
                })
                .collect()
        })?
    };
    let ok: Vec<f64> = variances.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::Study("every subsample fit failed".into()));
    }
    let n = ok.len() as f64;
    let mean_variance = ok.iter().sum::<f64>() / n;
    let sd_variance = if ok.len() > 1 {
        (ok.iter().map(|v| (v - mean_variance).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(SubsampleStudy {
        fraction: options.fraction,
        reps: options.reps,
        failures: options.reps - ok.len(),
        mean_variance,
        sd_variance,
        min_variance: ok.iter().copied().fold(f64::INFINITY, f64::min),
        max_variance: ok.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        full_adjusted_variance,
        full_benchmark_variance,
        accurate: mean_variance <= full_benchmark_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{Generator, ScenarioConfig};

    fn data() -> TrialDataset<f64> {
        let cfg = ScenarioConfig { n_per_arm: 150, ..Default::default() };
        Generator::new(&cfg).unwrap().generate(8).unwrap()
    }

    #[test]
    fn full_fraction_has_no_spread() {
        let d = data();
        let s = subsample_variance_study(&d, &SubsampleOptions { fraction: 1.0, reps: 4, ..Default::default() }, None)
            .unwrap();
        assert_eq!(s.mean_variance, s.full_adjusted_variance);
        assert_eq!(s.sd_variance, 0.0);
    }

    #[test]
    fn variance_grows_as_fraction_shrinks() {
        let d = data();
        let mut last = 0.0;
        for fraction in [0.9, 0.8, 0.7] {
            let s = subsample_variance_study(&d, &SubsampleOptions { fraction, reps: 40, ..Default::default() }, None)
                .unwrap();
            assert!(s.mean_variance > last, "{fraction}: {}", s.mean_variance);
            last = s.mean_variance;
        }
    }

    #[test]
    fn argument_checks() {
        let d = data();
        assert!(subsample_variance_study(&d, &SubsampleOptions { fraction: 0.0, ..Default::default() }, None).is_err());
        assert!(subsample_variance_study(&d, &SubsampleOptions { reps: 0, ..Default::default() }, None).is_err());
    }
}
