use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub type UnaryFn = fn(&mut Tape, Var) -> Result<Var>;

/// Relative errors are measured against `max(|analytic|, |numeric|, ABS_FLOOR)`
/// so that coordinates with vanishing gradient compare absolutely.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Forward and backward one-sided differences disagree: the function
    /// likely has a kink here and central differences are meaningless.
    pub kink_suspect: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FiniteDiffReport {
    pub coords: Vec<CoordinateCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares the tape gradient of `f` at `point` with central differences on
/// every coordinate.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_coords(f, point, &coords, step, tolerance)
}

/// As [`finite_diff_check`] restricted to the listed coordinates.
pub fn finite_diff_check_coords<F>(
    f: F,
    point: &Tensor,
    coords: &[usize],
    step: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) || !(tolerance > 0.0) {
        return Err(Error::config("step/tolerance", "must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let f0 = eval(point)?;
    let mut checks = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(&plus)?, eval(&minus)?);
        let numeric = (fp - fm) / (2.0 * step);
        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        let a = analytic.data()[i];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
        // One-sided differences of a smooth function differ by O(step·f'').
        let kink_suspect = (forward - backward).abs() > (100.0 * step).max(tolerance) * numeric.abs().max(1.0);
        checks.push(CoordinateCheck {
            index: i,
            analytic: a,
            numeric,
            rel_err,
            kink_suspect,
            pass: rel_err <= tolerance && !kink_suspect,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.pass);
    Ok(FiniteDiffReport {
        coords: checks,
        max_rel_err,
        passed,
    })
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
/// that every output coordinate contributes a distinct gradient.
pub fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect())?;
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

/// One finite-difference fixture per tape primitive: a name, a scalar
/// function of a `3×3` input, and the range inputs are drawn from.
pub fn primitive_cases() -> Vec<(&'static str, UnaryFn, (f64, f64))> {
    vec![
        (
            "matmul_left",
            |t, x| {
                let b = t.constant(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1])?);
                let y = t.matmul(x, b)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "matmul_right",
            |t, x| {
                let a = t.constant(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.3])?);
                let xs = t.slice_rows(x, 0, 2)?;
                let y = t.matmul(a, xs)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "add",
            |t, x| {
                let y = t.add(x, x)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "add_row",
            |t, x| {
                let r = t.slice_rows(x, 1, 2)?;
                let rs = t.tanh(r);
                let y = t.add_row(x, rs)?;
                let s = t.square(y);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
        (
            "subtract",
            |t, x| {
                let s = t.square(x);
                let s = t.scale(s, 0.1);
                let y = t.sub(x, s)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "multiply",
            |t, x| {
                let e = t.tanh(x);
                let y = t.mul(x, e)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "scale",
            |t, x| {
                let y = t.scale(x, -2.5);
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "add_scalar",
            |t, x| {
                let y = t.add_scalar(x, 0.7);
                let s = t.square(y);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
        (
            "concat_rows",
            |t, x| {
                let s = t.square(x);
                let y = t.concat(&[x, s], 0)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "concat_cols",
            |t, x| {
                let s = t.tanh(x);
                let y = t.concat(&[s, x], 1)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "slice_cols",
            |t, x| {
                let y = t.slice_cols(x, 1, 3)?;
                let s = t.square(y);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
        (
            "transpose",
            |t, x| {
                let y = t.transpose(x)?;
                let s = t.square(y);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
        (
            "reshape",
            |t, x| {
                let s = t.tanh(x);
                let y = t.reshape(s, &[1, 9])?;
                let q = t.square(y);
                weighted_sum(t, q)
            },
            (-2.0, 2.0),
        ),
        (
            "repeat_rows",
            |t, x| {
                let y = t.repeat_rows(x, 2)?;
                let s = t.tanh(y);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
        (
            "sum_groups",
            |t, x| {
                let r = t.reshape(x, &[9, 1])?;
                let y = t.sum_groups(r, 3)?;
                let s = t.square(y);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
        (
            "row_sums",
            |t, x| {
                let y = t.row_sums(x)?;
                let s = t.square(y);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
        (
            "mul_col",
            |t, x| {
                let c = t.slice_cols(x, 0, 1)?;
                let ct = t.tanh(c);
                let y = t.mul_col(x, ct)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "sum",
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            (-2.0, 2.0),
        ),
        (
            "mean",
            |t, x| {
                let s = t.tanh(x);
                let m = t.mean(s);
                Ok(t.square(m))
            },
            (-2.0, 2.0),
        ),
        (
            "mean_rows",
            |t, x| {
                let m = t.mean_rows(x)?;
                let s = t.square(m);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
        (
            "sigmoid",
            |t, x| {
                let y = t.sigmoid(x);
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "tanh",
            |t, x| {
                let y = t.tanh(x);
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "exp",
            |t, x| {
                let y = t.exp(x);
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "log",
            |t, x| {
                let y = t.log(x)?;
                weighted_sum(t, y)
            },
            (0.2, 2.0),
        ),
        (
            "softmax",
            |t, x| {
                let y = t.softmax(x)?;
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "square",
            |t, x| {
                let y = t.square(x);
                weighted_sum(t, y)
            },
            (-2.0, 2.0),
        ),
        (
            "clamp",
            |t, x| {
                let y = t.clamp(x, -5.0, 5.0);
                let s = t.square(y);
                weighted_sum(t, s)
            },
            (-2.0, 2.0),
        ),
    ]
}
