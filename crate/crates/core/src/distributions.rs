//! Standard normal and Student-t functions (f64). Normal tails come from
//! `libm::erfc` (full double precision); quantiles and the t distribution
//! from `statrs`.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Upper tail of Student-t with `df` degrees of freedom; the normal tail for infinite df.
pub fn t_sf(x: f64, df: f64) -> f64 {
    if df.is_infinite() {
        return normal_sf(x);
    }
    StudentsT::new(0.0, 1.0, df).expect("positive df").sf(x)
}

pub fn t_quantile(p: f64, df: f64) -> f64 {
    if df.is_infinite() {
        return normal_quantile(p);
    }
    StudentsT::new(0.0, 1.0, df).expect("positive df").inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabulated_quantiles() {
        // standard table values
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((normal_quantile(0.8) - 0.841_621_233_572_914_3).abs() < 1e-12);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-14);
        assert!((normal_cdf(-8.0) - 6.220_960_574_271_785e-16).abs() < 1e-27);
        assert!((t_quantile(0.975, 60.0) - 2.000_297_822_014_26).abs() < 1e-9);
        assert!((t_sf(2.0, 5.0) - 0.050_969_739_414_929_4).abs() < 1e-12);
    }
}
