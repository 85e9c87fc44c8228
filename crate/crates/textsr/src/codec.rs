//! The latent autoencoder: a small convolutional codec that halves spatial
//! resolution, with an optional vector-quantization bottleneck applied on
//! the decoder side.
//!
//! `encode` always returns the continuous, tanh-bounded latent — that is
//! what the diffusion process trains on — and `decode` snaps it to the
//! nearest codebook entries (when a codebook is configured) before running
//! the decoder stack. Quantizing at decode time keeps the diffusion target
//! smooth while still letting the codebook clean up sampler error.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Conv2d, Conv2dConfig, Init, Module, Optimizer, ParamsAdamW, VarBuilder, VarMap};

use crate::error::{Error, Result};
use crate::types::{ImageRole, ImageTensor, LatentTensor};
use crate::unet::nn::{nearest_resize, stride2_subsample};

/// Weight of the commitment term inside the quantization loss.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LatentCodecConfig {
    pub image_channels: usize,
    pub hidden_channels: usize,
    pub latent_channels: usize,
    /// Number of codebook entries; 0 disables quantization entirely.
    pub codebook_size: usize,
}

impl Default for LatentCodecConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            hidden_channels: 64,
            latent_channels: 3,
            codebook_size: 512,
        }
    }
}

impl LatentCodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.hidden_channels == 0 || self.latent_channels == 0 {
            return Err(Error::InvalidConfig(
                "codec channel counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub struct LatentCodec {
    cfg: LatentCodecConfig,
    enc_in: Conv2d,
    enc_mid: Conv2d,
    enc_down: Conv2d,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Conv2d,
    dec_mid: Conv2d,
    dec_out: Conv2d,
    codebook: Option<Tensor>,
}

impl LatentCodec {
    pub fn new(cfg: LatentCodecConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let (ci, ch, cz) = (cfg.image_channels, cfg.hidden_channels, cfg.latent_channels);
        let codebook = if cfg.codebook_size > 0 {
            Some(vb.get_with_hints(
                (cfg.codebook_size, cz),
                "codebook.weight",
                Init::Const(0.0),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            enc_in: candle_nn::conv2d(ci, ch, 3, pad1, vb.pp("enc_in"))?,
            enc_mid: candle_nn::conv2d(ch, ch, 3, pad1, vb.pp("enc_mid"))?,
            enc_down: candle_nn::conv2d(ch, ch, 3, pad1, vb.pp("enc_down"))?,
            enc_out: candle_nn::conv2d(ch, cz, 3, pad1, vb.pp("enc_out"))?,
            dec_in: candle_nn::conv2d(cz, ch, 3, pad1, vb.pp("dec_in"))?,
            dec_up: candle_nn::conv2d(ch, ch, 3, pad1, vb.pp("dec_up"))?,
            dec_mid: candle_nn::conv2d(ch, ch, 3, pad1, vb.pp("dec_mid"))?,
            dec_out: candle_nn::conv2d(ch, ci, 3, pad1, vb.pp("dec_out"))?,
            codebook,
        })
    }

    pub fn build(
        cfg: LatentCodecConfig,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<(VarMap, Self)> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let codec = Self::new(cfg, vb)?;
        crate::init::init_weights(&varmap, seed, &[])?;
        Ok((varmap, codec))
    }

    pub fn config(&self) -> &LatentCodecConfig {
        &self.cfg
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    /// Image in [-1, 1] to continuous latent in (-1, 1); spatial dims halve
    /// and must be even.
    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        let (_b, c, h, w) = image.dims();
        if c != self.cfg.image_channels {
            return Err(Error::ShapeMismatch {
                what: "codec input channels",
                expected: vec![self.cfg.image_channels],
                got: vec![c],
            });
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::msg(format!(
                "codec input spatial dims must be even, got {h}x{w}"
            )));
        }
        let x = self.enc_in.forward(image.tensor())?.silu()?;
        let x = self.enc_mid.forward(&x)?.silu()?;
        let x = stride2_subsample(&self.enc_down.forward(&x)?)?.silu()?;
        let z = self.enc_out.forward(&x)?.tanh()?;
        LatentTensor::new(z)
    }

    /// Snaps each latent vector (one per spatial position) to its nearest
    /// codebook entry. Returns the straight-through estimate (values of the
    /// chosen entries, gradients of the input), the quantization loss
    /// (codebook + commitment terms), and the chosen indices as (B, H, W).
    pub fn quantize(&self, z: &LatentTensor) -> Result<(LatentTensor, Tensor, Tensor)> {
        let codebook = self.codebook.as_ref().ok_or_else(|| {
            Error::msg("quantize called on a codec built with codebook_size = 0")
        })?;
        let (b, c, h, w) = z.dims();
        let flat = z
            .tensor()
            .permute((0, 2, 3, 1))?
            .reshape((b * h * w, c))?
            .contiguous()?;
        // squared distances via (z - e)^2 = z^2 - 2 z.e + e^2
        let z_sq = flat.sqr()?.sum_keepdim(1)?; // (N, 1)
        let e_sq = codebook.sqr()?.sum_keepdim(1)?.t()?; // (1, K)
        let cross = flat.matmul(&codebook.t()?.contiguous()?)?; // (N, K)
        let dist = z_sq
            .broadcast_add(&e_sq)?
            .broadcast_sub(&(cross * 2.0)?)?;
        let indices = dist.detach().argmin(1)?; // (N,) u32
        let chosen = codebook.index_select(&indices, 0)?; // (N, C)

        let codebook_loss = (flat.detach() - &chosen)?.sqr()?.mean_all()?;
        let commit_loss = (&flat - chosen.detach())?.sqr()?.mean_all()?;
        let vq_loss = (codebook_loss + (commit_loss * COMMITMENT_WEIGHT)?)?;

        let q = chosen.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?;
        let st = (z.tensor() + (&q - z.tensor())?.detach())?;
        let indices = indices.reshape((b, h, w))?;
        Ok((LatentTensor::new(st)?, vq_loss, indices))
    }

    fn decoder_stack(&self, z: &Tensor) -> Result<Tensor> {
        let (_b, _c, h, w) = z.dims4()?;
        let x = self.dec_in.forward(z)?.silu()?;
        let x = self.dec_up.forward(&nearest_resize(&x, h * 2, w * 2)?)?.silu()?;
        let x = self.dec_mid.forward(&x)?.silu()?;
        Ok(self.dec_out.forward(&x)?)
    }

    /// Latent to image in [-1, 1]; spatial dims double. Quantizes first when
    /// a codebook is configured.
    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let (_b, c, _h, _w) = z.dims();
        if c != self.cfg.latent_channels {
            return Err(Error::ShapeMismatch {
                what: "codec latent channels",
                expected: vec![self.cfg.latent_channels],
                got: vec![c],
            });
        }
        let q = if self.codebook.is_some() {
            self.quantize(z)?.0
        } else {
            z.clone()
        };
        let out = self.decoder_stack(q.tensor())?.clamp(-1.0, 1.0)?;
        ImageTensor::new(out, ImageRole::Sr)
    }

    /// Reconstruction + quantization loss for one batch of images; the
    /// scalar stays attached to the graph for the optimizer.
    pub fn train_loss(&self, batch: &ImageTensor) -> Result<Tensor> {
        let z = self.encode(batch)?;
        let (q, vq_loss) = match self.codebook {
            Some(_) => {
                let (q, l, _) = self.quantize(&z)?;
                (q, Some(l))
            }
            None => (z, None),
        };
        let recon = self.decoder_stack(q.tensor())?;
        let l1 = (recon - batch.tensor())?.abs()?.mean_all()?;
        match vq_loss {
            Some(l) => Ok((l1 + l)?),
            None => Ok(l1),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Trains the codec on high-resolution images alone and returns the mean
/// loss per epoch. Batch order reshuffles deterministically each epoch.
pub fn train_codec(
    codec: &LatentCodec,
    varmap: &VarMap,
    images: &ImageTensor,
    cfg: &CodecTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let n = images.batch();
    if n == 0 {
        return Err(Error::EmptyDataset("codec training set".into()));
    }
    let mut opt = AdamW::new(
        varmap.all_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            ..Default::default()
        },
    )?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = crate::batching::shuffled_indices(n, cfg.seed, epoch as u64);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = crate::batching::gather_batch(images.tensor(), chunk)?;
            let batch = ImageTensor::new(batch, ImageRole::Hr)?;
            let loss = codec.train_loss(&batch)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch * n + batches,
                    loss_dm: value,
                    loss_recog: 0.0,
                });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}
