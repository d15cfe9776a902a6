//! Finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Location of the coordinate with the largest relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub coordinates: usize,
    /// Coordinates whose central stencil straddled a relu/clamp kink and
    /// were measured with a one-sided second-order stencil instead.
    pub one_sided: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the analytic gradient of `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Checks every coordinate of every input of a multi-input objective.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let (f0, sig0) = evaluate(&f, inputs)?;
    let (f0_again, _) = evaluate(&f, inputs)?;
    if f0.to_bits() != f0_again.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|v| grads.get(*v).expect("leaf gradient").clone())
            .collect::<Vec<_>>()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        one_sided: 0,
    };
    let mut probe = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..grad.numel() {
            let (numeric, one_sided) = numeric_derivative(&f, &mut probe, input, index, eps, f0, sig0)?;
            let a = grad.data()[index];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            report.one_sided += one_sided as usize;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(WorstCoordinate {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: value.shape().to_vec(),
        });
    }
    Ok((value.item(), tape.kink_signature()))
}

fn numeric_derivative<F>(
    f: &F,
    probe: &mut [Tensor],
    input: usize,
    index: usize,
    eps: f64,
    f0: f64,
    sig0: u64,
) -> Result<(f64, bool)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let base = probe[input].data()[index];
    let at = |offset: f64, probe: &mut [Tensor]| -> Result<(f64, u64)> {
        probe[input].data_mut()[index] = base + offset;
        let r = evaluate(f, probe);
        probe[input].data_mut()[index] = base;
        r
    };

    let mut h = eps;
    for _ in 0..4 {
        let (fp, sp) = at(h, probe)?;
        let (fm, sm) = at(-h, probe)?;
        if sp == sig0 && sm == sig0 {
            return Ok(((fp - fm) / (2.0 * h), h != eps));
        }
        // A kink lies inside the stencil: fall back to a second-order
        // one-sided stencil on the side that stays on the current piece.
        if sp == sig0 {
            let (fp2, sp2) = at(2.0 * h, probe)?;
            if sp2 == sig0 {
                return Ok(((-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * h), true));
            }
        }
        if sm == sig0 {
            let (fm2, sm2) = at(-2.0 * h, probe)?;
            if sm2 == sig0 {
                return Ok(((3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h), true));
            }
        }
        h /= 10.0;
    }
    let (fp, _) = at(eps, probe)?;
    let (fm, _) = at(-eps, probe)?;
    Ok(((fp - fm) / (2.0 * eps), false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 4.5, 0.0, -0.7]).unwrap();
        let err = grad_check(|t, v| t.sum(v), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::zeros(&[4]);
        let err = grad_check(
            |t, v| {
                let s = t.sigmoid(v)?;
                t.sum(s)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }

    #[test]
    fn detects_nondeterminism() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let x = Tensor::zeros(&[2]);
        let res = grad_check(
            |t, v| {
                let n = counter.fetch_add(1, Ordering::SeqCst) as f64;
                let s = t.sum(v)?;
                t.add_scalar(s, n)
            },
            &x,
            DEFAULT_EPS,
        );
        assert_eq!(res, Err(TensorError::NonDeterministic));
    }

    #[test]
    fn relu_kink_inside_stencil_is_handled() {
        // x[0] sits 1e-7 from the relu kink, well inside a 1e-5 stencil.
        let x = Tensor::new(&[2], vec![1e-7, 0.8]).unwrap();
        let report = grad_check_many(
            |t, v| {
                let r = t.relu(v[0])?;
                let sq = t.mul(r, r)?;
                let lin = t.mul_scalar(r, 3.0)?;
                let s = t.add(sq, lin)?;
                t.sum(s)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.one_sided, 1);
    }
}
