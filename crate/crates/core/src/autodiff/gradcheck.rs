//! Central finite-difference check of analytic gradients.

use super::{AdResult, Tape, Tensor, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst relative error over all coordinates of all leaves.
    pub max_rel_error: f64,
    /// `(leaf, coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compare the tape gradient of `f` against `(f(x+ε) − f(x−ε)) / 2ε` for
/// every coordinate of every leaf. The relative error of a coordinate is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `f` must be deterministic; it is re-evaluated on a fresh tape for every
/// perturbation.
pub fn grad_check<F>(f: F, leaves: &[Tensor], eps: f64) -> AdResult<GradCheck>
where
    F: Fn(&mut Tape, &[Value]) -> AdResult<Value>,
{
    let eval = |inputs: &[Tensor], with_grad: bool| -> AdResult<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vals = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<AdResult<Vec<_>>>()?;
        let loss = f(&mut tape, &vals)?;
        let value = tape.item(loss);
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vals.iter().map(|&v| tape.grad_tensor(v)).collect()))
    };

    let (_, analytic) = eval(leaves, true)?;
    let mut inputs = leaves.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    for li in 0..inputs.len() {
        for ci in 0..inputs[li].data.len() {
            let orig = inputs[li].data[ci];
            inputs[li].data[ci] = orig + eps;
            let (fp, _) = eval(&inputs, false)?;
            inputs[li].data[ci] = orig - eps;
            let (fm, _) = eval(&inputs, false)?;
            inputs[li].data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[li].data[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (li, ci);
            }
        }
    }
    Ok(report)
}
