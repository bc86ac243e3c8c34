use crate::error::{numeric_err, shape_err, Result};
use crate::matcal::{damp_and_factor, DenseMatrix, LayerCalibration};

use super::grid::{QuantGrid, QuantizedMatrix};

fn check(w: &DenseMatrix, calib: &LayerCalibration, grid: &QuantGrid) -> Result<()> {
    if calib.dim() != w.rows() {
        return Err(shape_err!("calibration dim {} but W has {} rows", calib.dim(), w.rows()));
    }
    grid.validate(w.cols())
}

/// Sequential quantization with error feedback.
///
/// Input dims are processed in index order. After row `j` is rounded, the
/// rounding error is pushed onto the not-yet-quantized rows through the
/// damped inverse of the remaining block, which is then downdated to drop
/// row `j`. With a diagonal Gram no error is propagated and the result is
/// exactly RTN.
pub fn gptq_quantize(
    w: &DenseMatrix,
    calib: &LayerCalibration,
    grid: &QuantGrid,
    lambda_rel: f64,
) -> Result<QuantizedMatrix> {
    check(w, calib, grid)?;
    let d = w.rows();
    let p = w.cols();
    let mut hinv = damp_and_factor(calib, lambda_rel)?.inverse;
    let mut work = w.clone();
    let mut codes = vec![0i32; d * p];
    for j in 0..d {
        let pivot = hinv.get(j, j);
        if !(pivot > 0.0) {
            return Err(numeric_err!("inverse diagonal {j} is {pivot}"));
        }
        let mut err = vec![0.0; p];
        for c in 0..p {
            let code = grid.quantize_value(work.get(j, c), c);
            codes[j * p + c] = code;
            err[c] = (work.get(j, c) - grid.dequantize_value(code, c)) / pivot;
        }
        let col: Vec<f64> = (0..d).map(|i| hinv.get(i, j)).collect();
        for i in (j + 1)..d {
            let h = col[i];
            if h != 0.0 {
                for (v, e) in work.row_mut(i).iter_mut().zip(&err) {
                    *v -= h * e;
                }
            }
        }
        for i in (j + 1)..d {
            let f = col[i] / pivot;
            if f != 0.0 {
                for k in (j + 1)..d {
                    let v = hinv.get(i, k) - f * col[k];
                    hinv.set(i, k, v);
                }
            }
        }
    }
    QuantizedMatrix::new(d, p, codes, grid.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantEaseResult {
    pub quantized: QuantizedMatrix,
    /// `tr((W−Ŵ)ᵀH(W−Ŵ))` before the first update and after every
    /// coordinate visit, maintained incrementally by the solver.
    pub trace: Vec<f64>,
    pub sweeps_run: usize,
}

/// Cyclic coordinate descent on the grid-constrained objective
/// `tr((W−Ŵ)ᵀH(W−Ŵ))` with the undamped Gram.
///
/// Each visit moves `Ŵ_jk` to the grid point nearest the unconstrained
/// coordinate minimizer. Because the objective is a parabola in that
/// coordinate, the nearest grid point is the best grid point; a move is
/// applied only if it strictly lowers the objective, so rounding noise can
/// never raise it. Dims with `H_jj = 0` do not affect the objective and are
/// set to the RTN code.
pub fn quantease_sweep(
    w: &DenseMatrix,
    start: &QuantizedMatrix,
    calib: &LayerCalibration,
    grid: &QuantGrid,
    n_sweeps: usize,
) -> Result<QuantEaseResult> {
    check(w, calib, grid)?;
    if start.rows() != w.rows() || start.cols() != w.cols() || start.grid() != grid {
        return Err(shape_err!("start point does not match W and grid"));
    }
    let h = calib.gram();
    let d = w.rows();
    let p = w.cols();
    let mut q = start.clone();
    let mut w_hat = q.dequantize();
    let b = h.matmul(w);
    let mut hw_hat = h.matmul(&w_hat);
    let diff = w.sub(&w_hat);
    let mut objective = h.matmul(&diff).data().iter().zip(diff.data()).map(|(a, b)| a * b).sum::<f64>();
    let mut trace = Vec::with_capacity(1 + n_sweeps * d * p);
    trace.push(objective);
    let mut sweeps_run = 0;
    for _ in 0..n_sweeps {
        sweeps_run += 1;
        let mut changed = false;
        for k in 0..p {
            for j in 0..d {
                let hjj = h.get(j, j);
                let cur = w_hat.get(j, k);
                let code = if hjj > 0.0 {
                    let r = b.get(j, k) - hw_hat.get(j, k);
                    let target = cur + r / hjj;
                    let code = grid.quantize_value(target, k);
                    let delta = grid.dequantize_value(code, k) - cur;
                    let gain = hjj * delta * delta - 2.0 * delta * r;
                    if delta != 0.0 && gain < 0.0 {
                        objective += gain;
                        Some(code)
                    } else {
                        None
                    }
                } else {
                    let code = grid.quantize_value(w.get(j, k), k);
                    (code != q.code(j, k)).then_some(code)
                };
                if let Some(code) = code {
                    let delta = grid.dequantize_value(code, k) - cur;
                    q.set_code(j, k, code);
                    w_hat.set(j, k, cur + delta);
                    for i in 0..d {
                        let hij = h.get(i, j);
                        if hij != 0.0 {
                            let v = hw_hat.get(i, k) + hij * delta;
                            hw_hat.set(i, k, v);
                        }
                    }
                    changed = true;
                }
                trace.push(objective.max(0.0));
            }
        }
        if !changed {
            break;
        }
    }
    Ok(QuantEaseResult {
        quantized: q,
        trace,
        sweeps_run,
    })
}
