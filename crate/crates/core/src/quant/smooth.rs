use crate::error::{invalid, shape_err, Result};
use crate::matcal::DenseMatrix;

const FLOOR: f64 = 1e-8;

/// Per-input-channel migration scales `s_j = a_j^α / max|W_j,:|^(1−α)`.
///
/// Returns `s` and `diag(s)·W`; activations must be divided by `s` so that
/// `(X diag(s)⁻¹)(diag(s) W) = XW`.
pub fn smoothquant_scales(act_absmax: &[f64], w: &DenseMatrix, alpha: f64) -> Result<(Vec<f64>, DenseMatrix)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("alpha must be in [0, 1], got {alpha}"));
    }
    if act_absmax.len() != w.rows() {
        return Err(shape_err!("{} activation maxima for {} weight rows", act_absmax.len(), w.rows()));
    }
    let scales: Vec<f64> = act_absmax
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            let wmax = w.row(j).iter().fold(0.0f64, |m, v| m.max(v.abs())).max(FLOOR);
            (a.max(FLOOR).powf(alpha) / wmax.powf(1.0 - alpha)).max(FLOOR)
        })
        .collect();
    let mut scaled = w.clone();
    for (j, s) in scales.iter().enumerate() {
        scaled.row_mut(j).iter_mut().for_each(|v| *v *= s);
    }
    Ok((scales, scaled))
}
