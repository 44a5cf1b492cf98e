//! Nearest-neighbor lookup into the discrete state codebook.

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};

/// Quantize a unit vector to the closest codebook row.
///
/// With unit-norm rows and input, the maximal dot product is the nearest
/// neighbor in Euclidean distance on the sphere. Ties break toward the
/// lowest index.
pub fn quantize_state(e: &[f64], codebook: &Tensor) -> Result<(usize, Vec<f64>)> {
    let (k, d) = codebook.dims2()?;
    if e.len() != d {
        return Err(CoreError::Dimension(format!(
            "state vector has {} dims, codebook rows have {d}",
            e.len()
        )));
    }
    if k == 0 {
        return Err(CoreError::Dimension("empty codebook".into()));
    }
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (j, row) in codebook.data.chunks(d).enumerate() {
        let dot: f64 = row.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
        if dot > best_dot {
            best_dot = dot;
            best = j;
        }
    }
    Ok((best, codebook.data[best * d..(best + 1) * d].to_vec()))
}

/// Renormalize every codebook row onto the unit sphere (applied after
/// each optimizer step).
pub fn renormalize_codebook(codebook: &mut Tensor) {
    let d = *codebook.shape.last().unwrap();
    for row in codebook.data.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
}
