//! Central-difference gradient verification.
//!
//! Small parameter sets are checked per scalar parameter; large ones through
//! random unit directions (>= 64) so a full check stays cheap. Relative error
//! uses the denominator max(|analytic|, |fd|, 1e-8).

use serde::Serialize;

use crate::rng::Rng;

pub fn rel_err_scalar(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

/// Central difference of f per scalar parameter.
pub fn central_diff_per_param(f: &dyn Fn(&[f64]) -> f64, p0: &[f64], eps: f64) -> Vec<f64> {
    let mut p = p0.to_vec();
    let mut out = Vec::with_capacity(p0.len());
    for i in 0..p0.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let hi = f(&p);
        p[i] = orig - eps;
        let lo = f(&p);
        p[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Max relative error between analytic gradients and per-parameter central
/// differences.
pub fn check_per_param(
    f: &dyn Fn(&[f64]) -> f64,
    p0: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(p0.len(), analytic.len());
    let fd = central_diff_per_param(f, p0, eps);
    analytic
        .iter()
        .zip(fd.iter())
        .fold(0.0f64, |m, (&a, &g)| m.max(rel_err_scalar(a, g)))
}

/// Max relative error over `n_dirs` random unit directions: compares the
/// directional derivative (f(p + eps d) - f(p - eps d)) / 2 eps against the
/// projection g . d. Components where `active` is false stay frozen.
pub fn check_directions(
    f: &dyn Fn(&[f64]) -> f64,
    p0: &[f64],
    analytic: &[f64],
    eps: f64,
    n_dirs: usize,
    rng: &mut Rng,
    active: Option<&[bool]>,
) -> f64 {
    assert_eq!(p0.len(), analytic.len());
    let n = p0.len();
    let mut worst = 0.0f64;
    let mut dir = vec![0.0f64; n];
    let mut plus = p0.to_vec();
    let mut minus = p0.to_vec();
    for _ in 0..n_dirs {
        let mut norm = 0.0;
        for (i, d) in dir.iter_mut().enumerate() {
            *d = if active.map_or(true, |a| a[i]) { rng.normal() } else { 0.0 };
            norm += *d * *d;
        }
        let norm = norm.sqrt().max(1e-300);
        let mut proj = 0.0;
        for i in 0..n {
            dir[i] /= norm;
            plus[i] = p0[i] + eps * dir[i];
            minus[i] = p0[i] - eps * dir[i];
            proj += analytic[i] * dir[i];
        }
        let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
        worst = worst.max(rel_err_scalar(proj, fd));
    }
    worst
}

/// Per-parameter-group max relative error between analytic and finite
/// differences, serialized as a CI artifact.
#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub eps: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

impl GradientReport {
    pub fn new(eps: f64) -> Self {
        GradientReport {
            eps,
            entries: Vec::new(),
            max_rel_err: 0.0,
        }
    }

    pub fn record(&mut self, name: impl Into<String>, err: f64) {
        self.entries.push(GradCheckEntry {
            name: name.into(),
            max_rel_err: err,
        });
        self.max_rel_err = self.max_rel_err.max(err);
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_closed_form() {
        let f = |p: &[f64]| p[0] * p[0];
        let fd = central_diff_per_param(&f, &[3.0], 1e-5);
        assert!((fd[0] - 6.0).abs() < 1e-9);
        assert!(check_per_param(&f, &[3.0], &[6.0], 1e-5) <= 1e-9);
    }

    #[test]
    fn zero_function_zero_error() {
        let f = |_: &[f64]| 0.0;
        let err = check_per_param(&f, &[1.0, -2.0], &[0.0, 0.0], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn directional_check_matches_full() {
        let f = |p: &[f64]| p.iter().map(|&x| x * x * x).sum::<f64>() / 3.0;
        let p0: Vec<f64> = (0..20).map(|i| 0.1 * i as f64 - 1.0).collect();
        let analytic: Vec<f64> = p0.iter().map(|&x| x * x).collect();
        let mut rng = Rng::new(1);
        let err = check_directions(&f, &p0, &analytic, 1e-5, 64, &mut rng, None);
        assert!(err <= 1e-7, "err {err:e}");
    }
}
