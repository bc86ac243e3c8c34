use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::matcal::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScheme {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One scale per output column of `W`.
    PerChannel,
    PerTensor,
}

/// Uniform integer grid: `value = (code − zero_point) · scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub bits: u32,
    pub scheme: GridScheme,
    pub granularity: Granularity,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i32>,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantGrid {
    fn channel(&self, col: usize) -> usize {
        match self.granularity {
            Granularity::PerChannel => col,
            Granularity::PerTensor => 0,
        }
    }

    pub fn scale(&self, col: usize) -> f64 {
        self.scales[self.channel(col)]
    }

    pub fn zero_point(&self, col: usize) -> i32 {
        self.zero_points[self.channel(col)]
    }

    /// Nearest code, ties away from zero, clamped to the grid.
    pub fn quantize_value(&self, x: f64, col: usize) -> i32 {
        let c = self.channel(col);
        let q = (x / self.scales[c]).round() + f64::from(self.zero_points[c]);
        q.clamp(f64::from(self.q_min), f64::from(self.q_max)) as i32
    }

    pub fn dequantize_value(&self, code: i32, col: usize) -> f64 {
        let c = self.channel(col);
        f64::from(code - self.zero_points[c]) * self.scales[c]
    }

    /// Grid point closest to `x`.
    pub fn snap(&self, x: f64, col: usize) -> f64 {
        self.dequantize_value(self.quantize_value(x, col), col)
    }

    /// Checks the grid against a matrix with `cols` output columns.
    pub fn validate(&self, cols: usize) -> Result<()> {
        let n = match self.granularity {
            Granularity::PerChannel => cols,
            Granularity::PerTensor => 1,
        };
        if self.scales.len() != n || self.zero_points.len() != n {
            return Err(shape_err!("grid has {} scales, expected {n}", self.scales.len()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid!("grid scales must be positive and finite"));
        }
        if self.scheme == GridScheme::Symmetric && self.zero_points.iter().any(|&z| z != 0) {
            return Err(invalid!("symmetric grid with non-zero zero point"));
        }
        Ok(())
    }
}

/// Fits a grid to the range of `w` (per column or over the whole tensor).
pub fn fit_grid(w: &DenseMatrix, bits: u32, scheme: GridScheme, granularity: Granularity) -> Result<QuantGrid> {
    if !(2..=8).contains(&bits) {
        return Err(invalid!("bits must be in 2..=8, got {bits}"));
    }
    let (q_min, q_max) = match scheme {
        GridScheme::Symmetric => (-(1 << (bits - 1)), (1 << (bits - 1)) - 1),
        GridScheme::Asymmetric => (0, (1 << bits) - 1),
    };
    let ranges: Vec<(f64, f64)> = match granularity {
        Granularity::PerChannel => (0..w.cols())
            .map(|j| {
                let col = w.col(j);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect(),
        Granularity::PerTensor => {
            let lo = w.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = w.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            vec![(lo, hi)]
        }
    };
    let mut scales = Vec::with_capacity(ranges.len());
    let mut zero_points = Vec::with_capacity(ranges.len());
    for (lo, hi) in ranges {
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        match scheme {
            GridScheme::Symmetric => {
                let m = lo.abs().max(hi.abs());
                scales.push(if m > 0.0 { m / f64::from(q_max) } else { 1.0 });
                zero_points.push(0);
            }
            GridScheme::Asymmetric => {
                let span = hi - lo;
                let scale = if span > 0.0 {
                    span / f64::from(q_max - q_min)
                } else if lo != 0.0 {
                    lo.abs()
                } else {
                    1.0
                };
                let zp = (-lo / scale).round().clamp(f64::from(q_min), f64::from(q_max)) as i32;
                scales.push(scale);
                zero_points.push(zp);
            }
        }
    }
    Ok(QuantGrid {
        bits,
        scheme,
        granularity,
        scales,
        zero_points,
        q_min,
        q_max,
    })
}

/// Integer codes on a grid; `dequantize` gives the simulated weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<i32>,
    grid: QuantGrid,
}

impl QuantizedMatrix {
    pub fn new(rows: usize, cols: usize, codes: Vec<i32>, grid: QuantGrid) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(shape_err!("{} codes for a {rows}x{cols} matrix", codes.len()));
        }
        grid.validate(cols)?;
        if let Some(c) = codes.iter().find(|&&c| c < grid.q_min || c > grid.q_max) {
            return Err(invalid!("code {c} outside [{}, {}]", grid.q_min, grid.q_max));
        }
        Ok(Self { rows, cols, codes, grid })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn code(&self, r: usize, c: usize) -> i32 {
        self.codes[r * self.cols + c]
    }

    pub(crate) fn set_code(&mut self, r: usize, c: usize, code: i32) {
        self.codes[r * self.cols + c] = code;
    }

    pub fn grid(&self) -> &QuantGrid {
        &self.grid
    }

    pub fn dequantize(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |r, c| self.grid.dequantize_value(self.code(r, c), c))
    }
}

/// Round-to-nearest on a fitted grid.
pub fn rtn_quantize(w: &DenseMatrix, grid: &QuantGrid) -> Result<QuantizedMatrix> {
    grid.validate(w.cols())?;
    let codes = (0..w.rows())
        .flat_map(|r| (0..w.cols()).map(move |c| (r, c)))
        .map(|(r, c)| grid.quantize_value(w.get(r, c), c))
        .collect();
    QuantizedMatrix::new(w.rows(), w.cols(), codes, grid.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_scale_examples() {
        let w = DenseMatrix::from_rows(&[[-1.0, 0.0], [0.5, 0.0], [1.0, 0.0]]).unwrap();
        let g = fit_grid(&w, 4, GridScheme::Symmetric, Granularity::PerChannel).unwrap();
        assert_eq!((g.q_min, g.q_max), (-8, 7));
        assert!((g.scales[0] - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(g.scales[1], 1.0);
        let q = rtn_quantize(&w, &g).unwrap();
        assert!((0..3).all(|r| q.code(r, 1) == 0));
        assert_eq!(q.code(0, 0), -7);
        assert_eq!(q.code(2, 0), 7);
    }

    #[test]
    fn asymmetric_example() {
        let w = DenseMatrix::from_rows(&[[0.0], [10.0]]).unwrap();
        let g = fit_grid(&w, 8, GridScheme::Asymmetric, Granularity::PerChannel).unwrap();
        assert!((g.scales[0] - 10.0 / 255.0).abs() < 1e-15);
        assert_eq!(g.zero_points[0], 0);
        let q = rtn_quantize(&w, &g).unwrap();
        assert_eq!(q.codes(), &[0, 255]);
    }

    #[test]
    fn constant_asymmetric_columns_reproduce() {
        let w = DenseMatrix::from_rows(&[[3.0, -2.0], [3.0, -2.0]]).unwrap();
        let g = fit_grid(&w, 4, GridScheme::Asymmetric, Granularity::PerChannel).unwrap();
        assert_eq!(rtn_quantize(&w, &g).unwrap().dequantize(), w);
    }

    #[test]
    fn tie_rounds_away_from_zero() {
        let w = DenseMatrix::from_rows(&[[7.0], [0.5], [-0.5]]).unwrap();
        let g = fit_grid(&w, 4, GridScheme::Symmetric, Granularity::PerTensor).unwrap();
        assert_eq!(g.scales[0], 1.0);
        assert_eq!(rtn_quantize(&w, &g).unwrap().codes(), &[7, 1, -1]);
    }

    #[test]
    fn bits_are_checked() {
        let w = DenseMatrix::identity(2);
        assert!(fit_grid(&w, 1, GridScheme::Symmetric, Granularity::PerChannel).is_err());
        assert!(fit_grid(&w, 9, GridScheme::Symmetric, Granularity::PerChannel).is_err());
    }

    #[test]
    fn on_grid_values_are_exact() {
        let g = QuantGrid {
            bits: 4,
            scheme: GridScheme::Symmetric,
            granularity: Granularity::PerTensor,
            scales: vec![0.25],
            zero_points: vec![0],
            q_min: -8,
            q_max: 7,
        };
        let w = DenseMatrix::from_rows(&[[0.25, -2.0], [1.75, 0.0]]).unwrap();
        assert_eq!(rtn_quantize(&w, &g).unwrap().dequantize(), w);
    }
}
