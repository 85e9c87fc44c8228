//! Deterministic weight initialization.
//!
//! The backend's own random initializers pull from a global generator, which
//! would make checkpoints depend on construction order across the whole
//! process. Instead every model here is built with placeholder values and
//! then overwritten by this routine: one independent seeded stream per
//! parameter name, so a tensor's initial values depend only on
//! `(seed, name, shape)`.

use candle_nn::VarMap;

use crate::error::Result;
use crate::rng::{rand_uniform, rng_for};

/// Overwrites every variable in `varmap` in place.
///
/// Rules: names ending in `.bias` and names listed in `zeroed` become zero;
/// remaining rank-1 weights are normalization gains and become one; all
/// other weights draw from U(-b, b) with `b = 1/sqrt(fan_in)`, where fan_in
/// is the product of the non-leading dimensions.
pub fn init_weights(varmap: &VarMap, seed: u64, zeroed: &[&str]) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let shape = var.dims().to_vec();
        let dtype = var.dtype();
        let device = var.device().clone();
        let value = if name.ends_with(".bias") || zeroed.iter().any(|z| z == name) {
            candle_core::Tensor::zeros(shape.as_slice(), dtype, &device)?
        } else if shape.len() == 1 {
            candle_core::Tensor::ones(shape.as_slice(), dtype, &device)?
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = rng_for(seed, name);
            rand_uniform(&mut rng, -bound, bound, &shape, dtype, &device)?
        };
        var.set(&value)?;
    }
    Ok(())
}
