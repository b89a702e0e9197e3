//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is checking.

use rand::seq::index::sample;
use rand::Rng;

use super::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute difference below which a coordinate passes regardless of
    /// the relative error (both gradients are then numerically zero).
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter tensor.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let d = (a - n).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(n.abs())
    }
}

/// Compare the tape gradient of `loss(params)` with central differences.
///
/// `loss` receives a fresh tape and the parameters bound as trainable leaves
/// and must return a scalar.
pub fn check<F, R>(
    params: &[Tensor],
    loss: F,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let l = loss(&mut tape, &vars)?;
    tape.backward(l)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p)).collect();
        let l = loss(&mut t, &vs)?;
        Ok(t.value(l)[0])
    };

    let mut report = GradCheckReport::default();
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + cfg.step;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - cfg.step;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[pi][c];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if (a - numeric).abs() > cfg.abs_floor {
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= cfg.rel_tol {
                    report.failures.push(GradMismatch {
                        param: pi,
                        coord: c,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
