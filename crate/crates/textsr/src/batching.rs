//! Deterministic batching helpers shared by the training loops.

use candle_core::Tensor;
use rand::seq::SliceRandom;

use crate::error::Result;
use crate::rng::rng_for;

/// A permutation of `0..n` that depends only on `(seed, epoch)`.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15), "epoch-shuffle");
    order.shuffle(&mut rng);
    order
}

/// Selects rows of the leading (batch) dimension.
pub fn gather_batch(data: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(idx, indices.len(), data.device())?;
    Ok(data.index_select(&idx, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn shuffle_is_deterministic_and_epoch_dependent() {
        let a = shuffled_indices(100, 7, 0);
        let b = shuffled_indices(100, 7, 0);
        let c = shuffled_indices(100, 7, 1);
        let d = shuffled_indices(100, 8, 0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn gather_selects_rows() {
        let t = Tensor::arange(0f32, 12.0, &Device::Cpu)
            .unwrap()
            .reshape((4, 3))
            .unwrap();
        let picked = gather_batch(&t, &[2, 0]).unwrap();
        assert_eq!(picked.dims(), &[2, 3]);
        let v = picked.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![6.0, 7.0, 8.0, 0.0, 1.0, 2.0]);
        let _ = DType::F32;
    }
}
