//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever evaluates the function on untracked constants,
//! so it shares the forward kernels with the analytic side but none of the
//! backward closures.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Coordinates whose analytic and
/// numeric derivatives are both below this are compared in absolute terms.
/// Central differences at step 1e-5 on an O(1) loss carry roundoff near
/// 1e-11, so derivatives much smaller than this floor are not resolvable.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates in total, drawn uniformly without
    /// replacement over all inputs. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    /// Combines two reports, keeping the worse coordinate.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let worst = if other.max_rel_err > self.max_rel_err {
            other.worst
        } else {
            self.worst
        };
        GradCheckReport {
            checked: self.checked + other.checked,
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            worst,
        }
    }
}

fn scalar_of(v: &Var) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(Error::shape(
            "gradcheck",
            format!("function must return a scalar, got {:?}", v.shape()),
        ));
    }
    v.value().item()
}

/// Compares tape gradients of the scalar function `f` against central
/// differences at `inputs`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&vars)?;
    scalar_of(&loss)?;
    let grads = loss.backward()?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect::<Result<_>>()?;

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.numel();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = sample(&mut rng, total, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let eval = |input: usize, element: usize, delta: f64| -> Result<f64> {
        let consts: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == input {
                    let mut data = t.to_vec();
                    data[element] += delta;
                    Var::constant(Tensor::from_parts(t.shape().to_vec(), data))
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        scalar_of(&f(&consts)?)
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for flat in coords {
        let input = offsets.partition_point(|&o| o <= flat) - 1;
        let element = flat - offsets[input];
        let plus = eval(input, element, opts.step)?;
        let minus = eval(input, element, -opts.step)?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[input].data()[element];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(Mismatch {
                input,
                element,
                analytic: a,
                numeric,
                rel_err: err,
            });
        }
    }
    Ok(report)
}
