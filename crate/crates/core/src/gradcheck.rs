//! Central-difference verification of autodiff gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{FraError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that coordinates whose true
    /// gradient is ~0 are judged by absolute error.
    pub abs_floor: f64,
    /// Sample this many coordinates (stratified over parameter tensors); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub step: f64,
    pub tol: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CoordCheck>,
    pub coords: Vec<CoordCheck>,
    /// Sampled coordinates replaced because a ±step probe changed a piecewise
    /// branch, where no finite difference can match the derivative.
    pub branch_crossings: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// One objective evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grads: Option<Vec<Tensor>>,
    /// Identifies the smooth piece the point lies on; see [`Tape::branch_signature`].
    pub branch: u64,
}

impl Evaluation {
    pub fn smooth(value: f64, grads: Option<Vec<Tensor>>) -> Self {
        Evaluation { value, grads, branch: 0 }
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Candidate coordinates in checking order: all of them, or a seeded
/// round-robin over tensors when sampling.
fn pick_coords(params: &[Tensor], opts: &CheckOptions) -> Vec<(usize, usize)> {
    let total: usize = params.iter().map(Tensor::numel).sum();
    match opts.max_coords {
        Some(k) if k < total => {
            let want = (8 * k).min(total);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut seen = std::collections::BTreeSet::new();
            let mut out = Vec::with_capacity(want);
            let mut p = 0;
            let mut stalls = 0;
            while out.len() < want {
                let t = p % params.len();
                p += 1;
                let idx = rng.random_range(0..params[t].numel());
                if seen.insert((t, idx)) {
                    out.push((t, idx));
                    stalls = 0;
                } else {
                    stalls += 1;
                    if stalls > 10 * params.len() {
                        break;
                    }
                }
            }
            out
        }
        _ => params
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.numel()).map(move |i| (t, i)))
            .collect(),
    }
}

/// Compares the analytic gradient of `f` to central differences.
///
/// `f(params, with_grad)` evaluates the objective, returning one gradient
/// tensor per parameter when `with_grad`. `f` must be deterministic; two
/// evaluations at the same point that differ are reported as a contract error.
/// Coordinates whose probes land on a different branch are replaced by the
/// next candidate.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], opts: &CheckOptions) -> Result<CheckReport>
where
    F: FnMut(&[Tensor], bool) -> Result<Evaluation>,
{
    if !(opts.step > 0.0) {
        return Err(FraError::config(format!("finite-difference step must be > 0, got {}", opts.step)));
    }
    let base = f(params, true)?;
    let grads = base
        .grads
        .ok_or_else(|| FraError::contract("objective returned no gradients"))?;
    if grads.len() != params.len() {
        return Err(FraError::contract("gradient count differs from parameter count"));
    }
    let again = f(params, false)?;
    if base.value.to_bits() != again.value.to_bits() || base.branch != again.branch {
        return Err(FraError::contract(format!(
            "objective is non-deterministic: {:e} then {:e} at the same point",
            base.value, again.value
        )));
    }

    let target = opts.max_coords.unwrap_or(usize::MAX);
    let mut work = params.to_vec();
    let mut coords = Vec::new();
    let mut branch_crossings = 0;
    for (t, i) in pick_coords(params, opts) {
        if coords.len() == target {
            break;
        }
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + opts.step;
        let plus = f(&work, false)?;
        work[t].data_mut()[i] = orig - opts.step;
        let minus = f(&work, false)?;
        work[t].data_mut()[i] = orig;
        if plus.branch != base.branch || minus.branch != base.branch {
            branch_crossings += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * opts.step);
        let analytic = grads[t].data()[i];
        coords.push(CoordCheck {
            param: t,
            index: i,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric, opts.abs_floor),
        });
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let failures = coords
        .iter()
        .filter(|c| !(c.rel_err < opts.tol))
        .cloned()
        .collect();
    Ok(CheckReport {
        step: opts.step,
        tol: opts.tol,
        checked: coords.len(),
        max_rel_err,
        failures,
        coords,
        branch_crossings,
    })
}

/// Runs [`finite_diff_check`] on a scalar built on a fresh tape from the parameters.
pub fn check_tape_fn<B>(build: B, params: &[Tensor], opts: &CheckOptions) -> Result<CheckReport>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let f = |ps: &[Tensor], with_grad: bool| -> Result<Evaluation> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        let branch = tape.branch_signature();
        if !with_grad {
            return Ok(Evaluation { value, grads: None, branch });
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok(Evaluation {
            value,
            grads: Some(grads),
            branch,
        })
    };
    finite_diff_check(f, params, opts)
}
