//! Dense numeric core shared by the pruning and quantization solvers.
//!
//! Everything here works on the Gram matrix `H = XᵀX` of a layer's calibration
//! inputs; the activations `X` themselves are never kept around. The
//! layerwise objective for replacing weights `W` by `Ŵ` is
//! `‖XW − XŴ‖²_F = tr((W − Ŵ)ᵀ H (W − Ŵ))`.

mod dense;

pub use dense::{cholesky, cholesky_solve, dot, spd_inverse, DenseMatrix};

use crate::error::{invalid, numeric_err, shape_err, Result};

/// Default relative damping added to `H` before any inverse is taken.
pub const DEFAULT_LAMBDA_REL: f64 = 0.01;

/// Streaming Gram accumulator for one compressible linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    dim: usize,
    gram: DenseMatrix,
    n_tokens: usize,
    cross: Option<DenseMatrix>,
}

impl LayerCalibration {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gram: DenseMatrix::zeros(dim, dim),
            n_tokens: 0,
            cross: None,
        }
    }

    /// Builds a calibration directly from a known Gram matrix.
    pub fn from_gram(gram: DenseMatrix, n_tokens: usize) -> Result<Self> {
        if gram.rows() != gram.cols() {
            return Err(shape_err!("gram must be square, got {}x{}", gram.rows(), gram.cols()));
        }
        let mut gram = gram;
        gram.symmetrize();
        Ok(Self {
            dim: gram.rows(),
            gram,
            n_tokens,
            cross: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Cached `B = H·W`, if [`Self::cache_cross`] has been called since the
    /// last accumulation.
    pub fn cross(&self) -> Option<&DenseMatrix> {
        self.cross.as_ref()
    }

    /// Adds `XᵀX` for one batch of inputs (`X` is tokens × dim).
    pub fn accumulate(&mut self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.dim {
            return Err(shape_err!(
                "calibration batch has {} columns, layer input dim is {}",
                x.cols(),
                self.dim
            ));
        }
        let xtx = x.t_matmul(x);
        self.gram.add_assign(&xtx);
        self.gram.symmetrize();
        self.n_tokens += x.rows();
        self.cross = None;
        Ok(())
    }

    /// Merges a partial accumulation computed elsewhere.
    pub fn merge(&mut self, other: &LayerCalibration) -> Result<()> {
        if other.dim != self.dim {
            return Err(shape_err!("cannot merge dim {} into dim {}", other.dim, self.dim));
        }
        self.gram.add_assign(&other.gram);
        self.gram.symmetrize();
        self.n_tokens += other.n_tokens;
        self.cross = None;
        Ok(())
    }

    pub fn cache_cross(&mut self, w: &DenseMatrix) -> Result<()> {
        self.check_weights(w, "W")?;
        self.cross = Some(self.gram.matmul(w));
        Ok(())
    }

    /// `λ = lambda_rel · mean(diag H)`; falls back to `lambda_rel` itself when
    /// the Gram is entirely zero.
    pub fn damping(&self, lambda_rel: f64) -> f64 {
        let mean_diag = if self.dim == 0 {
            0.0
        } else {
            self.gram.trace() / self.dim as f64
        };
        if mean_diag > 0.0 {
            lambda_rel * mean_diag
        } else {
            lambda_rel
        }
    }

    pub fn damped_gram(&self, lambda: f64) -> DenseMatrix {
        let mut h = self.gram.clone();
        for i in 0..self.dim {
            let v = h.get(i, i);
            h.set(i, i, v + lambda);
        }
        h
    }

    /// Checks symmetry and positive semidefiniteness of the accumulated Gram.
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 {
            return Err(invalid!("calibration holds no tokens"));
        }
        let scale = self.gram.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                if (self.gram.get(i, j) - self.gram.get(j, i)).abs() > 1e-9 * scale {
                    return Err(numeric_err!("gram is not symmetric at ({i}, {j})"));
                }
            }
        }
        let tol = 1e-9 * self.gram.trace().abs().max(f64::MIN_POSITIVE) / self.dim.max(1) as f64;
        cholesky(&self.damped_gram(tol)).map_err(|e| {
            numeric_err!("gram is not positive semidefinite: {e}")
        })?;
        Ok(())
    }

    fn check_weights(&self, w: &DenseMatrix, name: &str) -> Result<()> {
        if w.rows() != self.dim {
            return Err(shape_err!(
                "{name} has {} rows but the calibration dim is {}",
                w.rows(),
                self.dim
            ));
        }
        Ok(())
    }
}

/// Functional form of [`LayerCalibration::accumulate`].
pub fn gram_accumulate(calib: &LayerCalibration, x: &DenseMatrix) -> Result<LayerCalibration> {
    let mut out = calib.clone();
    out.accumulate(x)?;
    Ok(out)
}

/// Cholesky factor and explicit inverse of `H + λI`.
#[derive(Debug, Clone)]
pub struct DampedFactor {
    pub dim: usize,
    pub lower_factor: DenseMatrix,
    pub lambda: f64,
    pub inverse: DenseMatrix,
}

pub fn damp_and_factor(calib: &LayerCalibration, lambda_rel: f64) -> Result<DampedFactor> {
    if !(lambda_rel > 0.0) {
        return Err(invalid!("lambda_rel must be positive, got {lambda_rel}"));
    }
    let lambda = calib.damping(lambda_rel);
    let damped = calib.damped_gram(lambda);
    let lower_factor = cholesky(&damped)?;
    let mut inverse = cholesky_solve(&lower_factor, &DenseMatrix::identity(calib.dim()));
    inverse.symmetrize();
    Ok(DampedFactor {
        dim: calib.dim(),
        lower_factor,
        lambda,
        inverse,
    })
}

/// `tr((W − Ŵ)ᵀ H (W − Ŵ))`, evaluated from the Gram alone.
pub fn reconstruction_error(calib: &LayerCalibration, w: &DenseMatrix, w_hat: &DenseMatrix) -> Result<f64> {
    calib.check_weights(w, "W")?;
    if w.shape() != w_hat.shape() {
        return Err(shape_err!(
            "W is {}x{} but Ŵ is {}x{}",
            w.rows(),
            w.cols(),
            w_hat.rows(),
            w_hat.cols()
        ));
    }
    Ok(gram_quadratic(calib.gram(), &w.sub(w_hat)))
}

/// `tr(Dᵀ H D)`, clamped at zero.
pub(crate) fn gram_quadratic(h: &DenseMatrix, diff: &DenseMatrix) -> f64 {
    let hd = h.matmul(diff);
    let v: f64 = hd.data().iter().zip(diff.data()).map(|(a, b)| a * b).sum();
    v.max(0.0)
}

/// Least-squares refit of `W` on the row support `keep`.
///
/// Minimizes the damped objective `tr((W − Ŵ)ᵀ(H + λI)(W − Ŵ))` over `Ŵ` with
/// rows outside `keep` fixed at zero:
/// `Ŵ_S = (H_SS + λI)⁻¹ (H_{S,:} W + λ W_S)`. As `λ → 0` this is the exact
/// constrained minimizer of the reconstruction error. Returns the `|S| × p`
/// block; see [`embed_rows`] to place it back into a full matrix.
pub fn refit_support(
    calib: &LayerCalibration,
    w: &DenseMatrix,
    keep: &[usize],
    lambda_rel: f64,
) -> Result<DenseMatrix> {
    calib.check_weights(w, "W")?;
    check_support(keep, calib.dim())?;
    let lambda = calib.damping(lambda_rel);
    let h = calib.gram();
    let mut h_ss = h.select(keep, keep);
    for i in 0..keep.len() {
        let v = h_ss.get(i, i);
        h_ss.set(i, i, v + lambda);
    }
    let mut rhs = h.select_rows(keep).matmul(w);
    rhs.axpy(lambda, &w.select_rows(keep));
    let l = cholesky(&h_ss).map_err(|e| numeric_err!("refit on support of size {}: {e}", keep.len()))?;
    let sol = cholesky_solve(&l, &rhs);
    sol.ensure_finite("refit_support")?;
    Ok(sol)
}

/// Places the rows of `block` at `support` inside a zero `dim × p` matrix.
pub fn embed_rows(block: &DenseMatrix, support: &[usize], dim: usize) -> DenseMatrix {
    assert_eq!(block.rows(), support.len());
    let mut out = DenseMatrix::zeros(dim, block.cols());
    for (i, &r) in support.iter().enumerate() {
        out.row_mut(r).copy_from_slice(block.row(i));
    }
    out
}

fn check_support(keep: &[usize], dim: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(invalid!("support must be nonempty"));
    }
    let mut seen = vec![false; dim];
    for &k in keep {
        if k >= dim {
            return Err(invalid!("support index {k} out of range for dim {dim}"));
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(invalid!("support index {k} repeated"));
        }
    }
    Ok(())
}
