//! Central finite-difference gradient checking.

use crate::error::{Result, TcnError};
use crate::tape::{Tape, Tid};
use crate::tensor::Tensor;

/// Outcome of a gradient check over one input tensor.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error across checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates excluded because the function is not smooth there
    /// (one-sided slopes disagree, e.g. a ReLU kink at exactly zero).
    pub skipped: usize,
}

/// Compares the backward-pass gradient of a scalar-valued `f` at `x` against
/// central finite differences, coordinate by coordinate.
///
/// Differences below `1e-6` absolute are treated as zero error; otherwise the
/// error is relative to the larger gradient magnitude.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Tid) -> Result<Tid>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(point.clone());
        let out = f(&mut tape, leaf)?;
        if tape.value(out).len() != 1 {
            return Err(TcnError::Shape(format!(
                "grad_check requires a scalar-valued function, got {:?}",
                tape.value(out).shape
            )));
        }
        Ok(tape.value(out).data[0])
    };

    let f0 = eval(x)?;

    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.constant(x.clone());
        let out = f(&mut tape, leaf)?;
        tape.backward(out)?;
        tape.grad(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape.clone()))
    };

    const ABS_FLOOR: f64 = 1e-6;
    const KINK_TOL: f64 = 1e-3;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        probe.data[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data[i] = orig;

        let right = (fp - f0) / h;
        let left = (f0 - fm) / h;
        if (right - left).abs() > KINK_TOL * right.abs().max(left.abs()).max(1.0) {
            report.skipped += 1;
            continue;
        }

        let fd = (fp - fm) / (2.0 * h);
        let an = analytic.data[i];
        let diff = (fd - an).abs();
        let err = if diff <= ABS_FLOOR {
            0.0
        } else {
            diff / fd.abs().max(an.abs())
        };
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    Ok(report)
}
