//! Small differentiable layers the denoiser is assembled from.
//!
//! Layer norm is written out from primitive ops on purpose: the fused
//! normalization kernel in our backend has no f64 backward, and the
//! finite-difference gradient checks in the test suite run the whole network
//! in f64.

use candle_core::{DType, Tensor, D};
use candle_nn::{ops, Init, Linear, Module, VarBuilder};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Normalizes the last dimension to zero mean / unit variance, then applies
/// a learned per-feature affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(size: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((size,), "weight", Init::Const(1.0))?;
        let bias = vb.get_with_hints((size,), "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    /// Input (..., C); normalizes over the trailing C.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let norm = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(norm
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }

    /// Input (B, C, H, W); normalizes over C at each spatial position.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let moved = x.permute((0, 2, 3, 1))?;
        let normed = self.forward(&moved)?;
        Ok(normed.permute((0, 3, 1, 2))?)
    }
}

/// (B, C, H, W) -> (B, H*W, C) token view for attention.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _n, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?.contiguous()?)
}

/// Scaled dot-product attention over token tensors.
///
/// `q`: (B, N, C), `k`/`v`: (B, M, C); returns (B, N, C). The head count
/// must divide C.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = q.dims3()?;
    let (_, m, _) = k.dims3()?;
    let hd = c / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((b, len, heads, hd))?.transpose(1, 2)?.contiguous()?)
    };
    let q = split(q, n)?;
    let k = split(k, m)?;
    let v = split(v, m)?;
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
    let attn = ops::softmax(&scores, D::Minus1)?;
    let out = attn.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((b, n, c))?.contiguous()?)
}

/// Pre-norm self-attention sublayer: `x + o(attn(ln(x)))`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    ln: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(channels: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(channels, vb.pp("ln"))?,
            q: candle_nn::linear(channels, channels, vb.pp("q"))?,
            k: candle_nn::linear(channels, channels, vb.pp("k"))?,
            v: candle_nn::linear(channels, channels, vb.pp("v"))?,
            o: candle_nn::linear(channels, channels, vb.pp("o"))?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln.forward(x)?;
        let out = attention(
            &self.q.forward(&h)?,
            &self.k.forward(&h)?,
            &self.v.forward(&h)?,
            self.heads,
        )?;
        Ok((x + self.o.forward(&out)?)?)
    }
}

/// Pre-norm cross-attention sublayer: queries from the feature map, keys and
/// values from projected guidance rows. No positional encoding is attached
/// to the guidance, so the sublayer is invariant to row order.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    ln: LayerNorm,
    guide: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(channels: usize, guide_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(channels, vb.pp("ln"))?,
            guide: candle_nn::linear(guide_dim, channels, vb.pp("guide"))?,
            q: candle_nn::linear(channels, channels, vb.pp("q"))?,
            k: candle_nn::linear(channels, channels, vb.pp("k"))?,
            v: candle_nn::linear(channels, channels, vb.pp("v"))?,
            o: candle_nn::linear(channels, channels, vb.pp("o"))?,
            heads,
        })
    }

    /// `x`: (B, N, C) tokens; `guide`: (B, L, guide_dim).
    pub fn forward(&self, x: &Tensor, guide: &Tensor) -> Result<Tensor> {
        let g = self.guide.forward(guide)?;
        let h = self.ln.forward(x)?;
        let out = attention(
            &self.q.forward(&h)?,
            &self.k.forward(&g)?,
            &self.v.forward(&g)?,
            self.heads,
        )?;
        Ok((x + self.o.forward(&out)?)?)
    }
}

/// Pre-norm feed-forward sublayer: `x + lin2(gelu(lin1(ln(x))))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    ln: LayerNorm,
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(channels: usize, expansion: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(channels, vb.pp("ln"))?,
            lin1: candle_nn::linear(channels, channels * expansion, vb.pp("lin1"))?,
            lin2: candle_nn::linear(channels * expansion, channels, vb.pp("lin2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln.forward(x)?;
        let h = self.lin2.forward(&self.lin1.forward(&h)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Keeps every even-indexed row and column: composed with a stride-1
/// convolution this equals the stride-2 convolution, but its backward is
/// exact for any input parity (the backend's strided conv backward derives
/// one shared output padding from the height, which breaks on feature maps
/// whose height and width disagree about it).
pub fn stride2_subsample(x: &Tensor) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    let dev = x.device();
    let rows: Vec<u32> = (0..h).step_by(2).map(|i| i as u32).collect();
    let cols: Vec<u32> = (0..w).step_by(2).map(|j| j as u32).collect();
    let rows = Tensor::from_vec(rows, h.div_ceil(2), dev)?;
    let cols = Tensor::from_vec(cols, w.div_ceil(2), dev)?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Nearest-neighbor resize to an explicit target size, built on gather-style
/// indexing so it differentiates and runs in any float dtype. Targets below
/// the source size select a nearest subsample, which keeps the decoder
/// usable on degenerate 1-pixel feature maps.
pub fn nearest_resize(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    let dev = x.device();
    let rows: Vec<u32> = (0..th).map(|i| (i * h / th) as u32).collect();
    let cols: Vec<u32> = (0..tw).map(|j| (j * w / tw) as u32).collect();
    let rows = Tensor::from_vec(rows, th, dev)?;
    let cols = Tensor::from_vec(cols, tw, dev)?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Sinusoidal embedding of integer timesteps: `dim/2` log-spaced frequencies
/// produce `[sin, cos]` pairs, so t = 0 maps to all-zero sines and all-one
/// cosines. Returns (B, dim). Not part of the autodiff graph.
pub fn timestep_embedding(
    ts: &[usize],
    dim: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                (-(10000f64).ln() * k as f64 / (half - 1) as f64).exp()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for &f in &freqs {
            data.push((t as f64 * f).sin());
        }
        for &f in &freqs {
            data.push((t as f64 * f).cos());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use candle_nn::{VarBuilder, VarMap};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn layer_norm_matches_scalar_oracle() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F64, &dev());
        let ln = LayerNorm::new(3, vb).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 4.0], (1, 3), &dev()).unwrap();
        let y = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // mean 7/3, var = ((1-7/3)^2+(2-7/3)^2+(4-7/3)^2)/3 = 14/9
        let mean = 7.0 / 3.0;
        let sd = (14.0f64 / 9.0 + LN_EPS).sqrt();
        for (got, x0) in y.iter().zip([1.0, 2.0, 4.0]) {
            assert!((got - (x0 - mean) / sd).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_backward_works_in_f64() {
        let w = Var::ones((4,), DType::F64, &dev()).unwrap();
        let b = Var::zeros((4,), DType::F64, &dev()).unwrap();
        let ln = LayerNorm {
            weight: w.as_tensor().clone(),
            bias: b.as_tensor().clone(),
        };
        let x = Var::from_tensor(
            &Tensor::from_vec(vec![0.5f64, -1.0, 2.0, 0.25], (1, 4), &dev()).unwrap(),
        )
        .unwrap();
        let y = ln.forward(x.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        assert!(grads.get(&x).is_some());
        assert!(grads.get(&w).is_some());
    }

    #[test]
    fn token_roundtrip_is_identity() {
        let x = Tensor::arange(0f64, 24.0, &dev())
            .unwrap()
            .reshape((1, 2, 3, 4))
            .unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.dims(), &[1, 12, 2]);
        let back = from_tokens(&t, 3, 4).unwrap();
        let diff = (&back - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    /// Single head, single query token: attention must equal the softmax-
    /// weighted average computed by hand.
    #[test]
    fn attention_matches_hand_oracle() {
        let q = Tensor::from_vec(vec![1.0f64, 0.0], (1, 1, 2), &dev()).unwrap();
        let k = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0], (1, 2, 2), &dev()).unwrap();
        let v = Tensor::from_vec(vec![10.0f64, 0.0, 0.0, 10.0], (1, 2, 2), &dev()).unwrap();
        let out = attention(&q, &k, &v, 1).unwrap();
        let got = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // scores = [1,0]/sqrt(2); softmax = e^s / sum
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        let w1 = 1.0 / (s.exp() + 1.0);
        assert!((got[0] - 10.0 * w0).abs() < 1e-12);
        assert!((got[1] - 10.0 * w1).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_preserved_for_constant_values() {
        // constant v rows make attention output exactly v regardless of scores
        let mut rng = crate::rng::rng_for(1, "attn-const");
        let q = crate::rng::randn(&mut rng, &[2, 5, 4], DType::F64, &dev()).unwrap();
        let k = crate::rng::randn(&mut rng, &[2, 3, 4], DType::F64, &dev()).unwrap();
        let v = Tensor::ones((2, 3, 4), DType::F64, &dev()).unwrap();
        let out = attention(&q, &k, &v, 2).unwrap();
        let diff = (out - Tensor::ones((2, 5, 4), DType::F64, &dev()).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn cross_attention_invariant_to_guide_row_order() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F64, &dev());
        let mca = CrossAttention::new(4, 5, 2, vb).unwrap();
        let mut rng = crate::rng::rng_for(2, "mca-perm");
        let x = crate::rng::randn(&mut rng, &[1, 6, 4], DType::F64, &dev()).unwrap();
        let g = crate::rng::randn(&mut rng, &[1, 3, 5], DType::F64, &dev()).unwrap();
        let perm = Tensor::from_vec(vec![2u32, 0, 1], 3, &dev()).unwrap();
        let g_perm = g.index_select(&perm, 1).unwrap();
        let a = mca.forward(&x, &g).unwrap();
        let b = mca.forward(&x, &g_perm).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "row order leaked into output: {diff}");
    }

    #[test]
    fn subsample_matches_strided_conv() {
        use candle_nn::{Conv2dConfig, VarMap};
        for (h, w) in [(4, 8), (5, 7), (1, 2), (2, 1)] {
            let varmap = VarMap::new();
            let vb = VarBuilder::from_varmap(&varmap, DType::F64, &dev());
            let c_s1 = candle_nn::conv2d(
                2,
                3,
                3,
                Conv2dConfig {
                    padding: 1,
                    ..Default::default()
                },
                vb.pp("c"),
            )
            .unwrap();
            crate::init::init_weights(&varmap, 3, &[]).unwrap();
            let c_s2 = candle_nn::Conv2d::new(
                c_s1.weight().clone(),
                c_s1.bias().cloned(),
                Conv2dConfig {
                    padding: 1,
                    stride: 2,
                    ..Default::default()
                },
            );
            let mut rng = crate::rng::rng_for(4, "sub-conv");
            let x = crate::rng::randn(&mut rng, &[1, 2, h, w], DType::F64, &dev()).unwrap();
            let a = stride2_subsample(&c_s1.forward(&x).unwrap()).unwrap();
            let b = c_s2.forward(&x).unwrap();
            assert_eq!(a.dims(), b.dims(), "{h}x{w}");
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12, "{h}x{w}");
        }
    }

    #[test]
    fn nearest_resize_doubles_and_halves() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 1, 2, 2), &dev()).unwrap();
        let up = nearest_resize(&x, 4, 4).unwrap();
        assert_eq!(up.dims(), &[1, 1, 4, 4]);
        let v = up.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 2.0);
        assert_eq!(v[15], 4.0);
        let same = nearest_resize(&x, 2, 2).unwrap();
        let diff = (&same - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
        // odd target from even source
        let odd = nearest_resize(&x, 3, 1).unwrap();
        assert_eq!(odd.dims(), &[1, 1, 3, 1]);
    }

    #[test]
    fn timestep_embedding_zero_and_shape() {
        let e = timestep_embedding(&[0, 1, 7], 8, DType::F64, &dev()).unwrap();
        assert_eq!(e.dims(), &[3, 8]);
        let row0 = e.get(0).unwrap().to_vec1::<f64>().unwrap();
        for s in &row0[..4] {
            assert_eq!(*s, 0.0);
        }
        for c in &row0[4..] {
            assert_eq!(*c, 1.0);
        }
        // distinct timesteps embed differently
        let r1 = e.get(1).unwrap().to_vec1::<f64>().unwrap();
        let r7 = e.get(2).unwrap().to_vec1::<f64>().unwrap();
        assert!(r1.iter().zip(&r7).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
