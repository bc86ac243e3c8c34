use crate::error::{invalid, Result};
use crate::matcal::LayerCalibration;

use super::forward::Tap;
use super::model::ToyModel;

impl ToyModel {
    /// Streams `sequences` through the model and accumulates the Gram matrix
    /// of every requested tap, in the order given.
    pub fn calibrate(&self, sequences: &[Vec<usize>], taps: &[Tap]) -> Result<Vec<LayerCalibration>> {
        if sequences.is_empty() {
            return Err(invalid!("calibration needs at least one sequence"));
        }
        let mut calibs: Vec<Option<LayerCalibration>> = vec![None; taps.len()];
        for seq in sequences {
            let out = self.forward(seq, taps, None)?;
            for (slot, &tap) in calibs.iter_mut().zip(taps) {
                let x = out.tap(tap).expect("requested tap is captured");
                slot.get_or_insert_with(|| LayerCalibration::new(x.cols())).accumulate(x)?;
            }
        }
        Ok(calibs.into_iter().map(|c| c.expect("filled by first sequence")).collect())
    }
}
