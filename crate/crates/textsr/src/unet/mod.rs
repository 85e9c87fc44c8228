//! The recognition-guided U-Net noise predictor.
//!
//! Four encoder stages, a middle stage, and four mirrored decoder stages
//! operate on the channel-concatenation of the noisy latent and the
//! low-resolution conditioning image. Every stage is a pair of residual
//! blocks; stages named in `sa_block_ids` follow each block with
//! self-attention over its spatial tokens, and stages named in
//! `rg_block_ids` (and their decoder mirrors) additionally cross-attend into
//! the recognizer's per-frame character distributions. Both sets default to
//! all four stages, and each can be restricted per stage without touching
//! anything else — guidance for ablation ledgers, self-attention to keep
//! shallow stages (whose token counts are largest) affordable on small
//! hosts. The middle stage always self-attends; its grid is 16x coarser, so
//! it costs little and keeps global mixing available at every setting.

pub mod layout;
pub mod nn;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Linear, Module, VarBuilder, VarMap};

use crate::error::{Error, Result};
use crate::schedule::NoisePredictor;
use crate::types::{ImageTensor, LatentTensor, RecognitionGuidance};
use nn::{
    from_tokens, nearest_resize, stride2_subsample, timestep_embedding, to_tokens, CrossAttention,
    FeedForward, LayerNorm, SelfAttention,
};

/// Hidden width multiplier inside every feed-forward sublayer.
pub const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GuidedUNetConfig {
    /// Width of the first stage; later stages scale it by `channel_mults`.
    pub base_channels: usize,
    /// Exactly four per-stage multipliers.
    pub channel_mults: Vec<usize>,
    pub num_heads: usize,
    /// Which stages (1..=4) cross-attend into the guidance, mirrored on the
    /// decoder side. Empty disables guidance entirely.
    pub rg_block_ids: Vec<usize>,
    /// Which stages (1..=4) self-attend over their spatial tokens, mirrored
    /// on the decoder side. The middle stage always self-attends. Shallow
    /// stages carry the most tokens, so dropping them from this list trades
    /// long-range mixing at fine scales for a large cut in time and memory.
    #[serde(default = "default_sa_block_ids")]
    pub sa_block_ids: Vec<usize>,
    pub latent_channels: usize,
    /// Channels of the conditioning image (3 for RGB).
    pub cond_channels: usize,
    /// Feature dimension of one guidance row.
    pub alphabet_size: usize,
}

fn default_sa_block_ids() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

impl Default for GuidedUNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 160,
            channel_mults: vec![1, 2, 2, 4],
            num_heads: 8,
            rg_block_ids: vec![1, 2, 3, 4],
            sa_block_ids: default_sa_block_ids(),
            latent_channels: 3,
            cond_channels: 3,
            alphabet_size: 37,
        }
    }
}

impl GuidedUNetConfig {
    pub fn widths(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| self.base_channels * m)
            .collect()
    }

    /// Dimension of the learned timestep embedding.
    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.channel_mults.len() != 4 {
            return Err(Error::InvalidConfig(format!(
                "channel_mults must list exactly 4 stages, got {}",
                self.channel_mults.len()
            )));
        }
        if self.channel_mults.iter().any(|&m| m == 0) {
            return Err(Error::InvalidConfig("channel_mults must be >= 1".into()));
        }
        if self.num_heads == 0 {
            return Err(Error::InvalidConfig("num_heads must be >= 1".into()));
        }
        for (i, w) in self.widths().iter().enumerate() {
            if w % self.num_heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "num_heads ({}) must divide stage {} width ({w})",
                    self.num_heads,
                    i + 1
                )));
            }
        }
        for (field, ids) in [
            ("rg_block_ids", &self.rg_block_ids),
            ("sa_block_ids", &self.sa_block_ids),
        ] {
            let mut seen = [false; 5];
            for &id in ids {
                if !(1..=4).contains(&id) {
                    return Err(Error::InvalidConfig(format!(
                        "{field} entries must be in 1..=4, got {id}"
                    )));
                }
                if seen[id] {
                    return Err(Error::InvalidConfig(format!("{field} repeats block {id}")));
                }
                seen[id] = true;
            }
        }
        if self.latent_channels == 0 || self.cond_channels == 0 {
            return Err(Error::InvalidConfig(
                "latent_channels and cond_channels must be >= 1".into(),
            ));
        }
        if self.alphabet_size < 2 {
            return Err(Error::InvalidConfig("alphabet_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Time-conditioned residual block.
#[derive(Debug, Clone)]
struct ResBlock {
    ln1: LayerNorm,
    conv1: Conv2d,
    temb: Linear,
    ln2: LayerNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(c_in: usize, c_out: usize, d_t: usize, vb: VarBuilder) -> Result<Self> {
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let skip = if c_in != c_out {
            Some(candle_nn::conv2d(
                c_in,
                c_out,
                1,
                Default::default(),
                vb.pp("skip"),
            )?)
        } else {
            None
        };
        Ok(Self {
            ln1: LayerNorm::new(c_in, vb.pp("ln1"))?,
            conv1: candle_nn::conv2d(c_in, c_out, 3, pad1, vb.pp("conv1"))?,
            temb: candle_nn::linear(d_t, c_out, vb.pp("temb"))?,
            ln2: LayerNorm::new(c_out, vb.pp("ln2"))?,
            conv2: candle_nn::conv2d(c_out, c_out, 3, pad1, vb.pp("conv2"))?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.ln1.forward_channels(x)?.silu()?)?;
        let tb = self.temb.forward(&temb.silu()?)?;
        let h = h.broadcast_add(&tb.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = self.conv2.forward(&self.ln2.forward_channels(&h)?.silu()?)?;
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?)
    }
}

/// Residual block, optionally followed by self-attention and by guidance
/// cross-attention. The attention sublayers run in token space.
#[derive(Debug, Clone)]
struct Rgrb {
    res: ResBlock,
    msa: Option<(SelfAttention, FeedForward)>,
    mca: Option<(CrossAttention, FeedForward)>,
}

impl Rgrb {
    fn new(
        c_in: usize,
        c_out: usize,
        attend: bool,
        guided: bool,
        cfg: &GuidedUNetConfig,
        vb: VarBuilder,
    ) -> Result<Self> {
        let msa = if attend {
            Some((
                SelfAttention::new(c_out, cfg.num_heads, vb.pp("msa"))?,
                FeedForward::new(c_out, FFN_EXPANSION, vb.pp("msa_ffn"))?,
            ))
        } else {
            None
        };
        let mca = if guided {
            Some((
                CrossAttention::new(c_out, cfg.alphabet_size, cfg.num_heads, vb.pp("mca"))?,
                FeedForward::new(c_out, FFN_EXPANSION, vb.pp("mca_ffn"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            res: ResBlock::new(c_in, c_out, cfg.time_dim(), vb.pp("res"))?,
            msa,
            mca,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, guide: &Tensor) -> Result<Tensor> {
        let x = self.res.forward(x, temb)?;
        if self.msa.is_none() && self.mca.is_none() {
            return Ok(x);
        }
        let (_b, _c, h, w) = x.dims4()?;
        let mut t = to_tokens(&x)?;
        if let Some((msa, ffn)) = &self.msa {
            t = msa.forward(&t)?;
            t = ffn.forward(&t)?;
        }
        if let Some((mca, ffn)) = &self.mca {
            t = mca.forward(&t, guide)?;
            t = ffn.forward(&t)?;
        }
        from_tokens(&t, h, w)
    }
}

struct EncStage {
    rgrb1: Rgrb,
    rgrb2: Rgrb,
    down: Conv2d,
}

struct DecStage {
    rgrb1: Rgrb,
    rgrb2: Rgrb,
    up: Conv2d,
}

struct Middle {
    res1: ResBlock,
    attn: SelfAttention,
    res2: ResBlock,
}

pub struct GuidedUNet {
    cfg: GuidedUNetConfig,
    time_lin1: Linear,
    time_lin2: Linear,
    encs: Vec<EncStage>,
    mid: Middle,
    decs: Vec<DecStage>,
    head_ln: LayerNorm,
    head_conv: Conv2d,
    dtype: DType,
    device: Device,
}

impl GuidedUNet {
    pub fn new(cfg: GuidedUNetConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let d_t = cfg.time_dim();
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };

        let time_lin1 = candle_nn::linear(d_t, d_t, vb.pp("time_embed").pp("lin1"))?;
        let time_lin2 = candle_nn::linear(d_t, d_t, vb.pp("time_embed").pp("lin2"))?;

        let mut encs = Vec::with_capacity(4);
        let mut c_prev = cfg.latent_channels + cfg.cond_channels;
        for i in 1..=4 {
            let c = widths[i - 1];
            let attend = cfg.sa_block_ids.contains(&i);
            let guided = cfg.rg_block_ids.contains(&i);
            let evb = vb.pp(format!("enc{i}"));
            encs.push(EncStage {
                rgrb1: Rgrb::new(c_prev, c, attend, guided, &cfg, evb.pp("rgrb1"))?,
                rgrb2: Rgrb::new(c, c, attend, guided, &cfg, evb.pp("rgrb2"))?,
                down: candle_nn::conv2d(c, c, 3, pad1, evb.pp("down"))?,
            });
            c_prev = c;
        }

        let c4 = widths[3];
        let mvb = vb.pp("mid");
        let mid = Middle {
            res1: ResBlock::new(c4, c4, d_t, mvb.pp("res1"))?,
            attn: SelfAttention::new(c4, cfg.num_heads, mvb.pp("attn"))?,
            res2: ResBlock::new(c4, c4, d_t, mvb.pp("res2"))?,
        };

        let mut decs = Vec::with_capacity(4);
        let mut prev_out = c4;
        for j in 1..=4 {
            let i = 5 - j;
            let c = widths[i - 1];
            let attend = cfg.sa_block_ids.contains(&i);
            let guided = cfg.rg_block_ids.contains(&i);
            let c_in = c + prev_out;
            let dvb = vb.pp(format!("dec{j}"));
            decs.push(DecStage {
                rgrb1: Rgrb::new(c_in, c, attend, guided, &cfg, dvb.pp("rgrb1"))?,
                rgrb2: Rgrb::new(c, c, attend, guided, &cfg, dvb.pp("rgrb2"))?,
                up: candle_nn::conv2d(c, c, 3, pad1, dvb.pp("up"))?,
            });
            prev_out = c;
        }

        let head_ln = LayerNorm::new(widths[0], vb.pp("head").pp("ln"))?;
        let head_conv = candle_nn::conv2d(
            widths[0],
            cfg.latent_channels,
            3,
            pad1,
            vb.pp("head").pp("conv"),
        )?;

        Ok(Self {
            cfg,
            time_lin1,
            time_lin2,
            encs,
            mid,
            decs,
            head_ln,
            head_conv,
            dtype: vb.dtype(),
            device: vb.device().clone(),
        })
    }

    /// Builds a fresh network with deterministic weights: a `VarMap` backs
    /// the parameters so they can be trained and checkpointed.
    pub fn build(cfg: GuidedUNetConfig, dtype: DType, device: &Device, seed: u64) -> Result<(VarMap, Self)> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let net = Self::new(cfg, vb)?;
        crate::init::init_weights(&varmap, seed, &["head.conv.weight"])?;
        Ok((varmap, net))
    }

    pub fn config(&self) -> &GuidedUNetConfig {
        &self.cfg
    }

    fn check_inputs(
        &self,
        z_t: &LatentTensor,
        x_lr: &ImageTensor,
        c_rg: &RecognitionGuidance,
        n_t: usize,
    ) -> Result<()> {
        let (bz, cz, hz, wz) = z_t.dims();
        let (bx, cx, hx, wx) = x_lr.dims();
        if cz != self.cfg.latent_channels {
            return Err(Error::ShapeMismatch {
                what: "latent channels",
                expected: vec![self.cfg.latent_channels],
                got: vec![cz],
            });
        }
        if cx != self.cfg.cond_channels || bx != bz || hx != hz || wx != wz {
            return Err(Error::ShapeMismatch {
                what: "conditioning image",
                expected: vec![bz, self.cfg.cond_channels, hz, wz],
                got: vec![bx, cx, hx, wx],
            });
        }
        let (bg, _l, a) = c_rg.dims();
        if bg != bz || a != self.cfg.alphabet_size {
            return Err(Error::ShapeMismatch {
                what: "recognition guidance",
                expected: vec![bz, self.cfg.alphabet_size],
                got: vec![bg, a],
            });
        }
        if n_t != bz {
            return Err(Error::msg(format!(
                "got {n_t} timesteps for a batch of {bz}"
            )));
        }
        Ok(())
    }

    /// Predicts the noise component of `z_t` with one timestep per batch
    /// element.
    pub fn forward_batch(
        &self,
        z_t: &LatentTensor,
        x_lr: &ImageTensor,
        c_rg: &RecognitionGuidance,
        ts: &[usize],
    ) -> Result<LatentTensor> {
        self.check_inputs(z_t, x_lr, c_rg, ts.len())?;
        if let Some(&bad) = ts.iter().find(|&&t| t == 0) {
            return Err(Error::TimestepOutOfRange { t: bad, t_max: 0 });
        }
        let temb = timestep_embedding(ts, self.cfg.time_dim(), self.dtype, &self.device)?;
        let temb = self.time_lin2.forward(&self.time_lin1.forward(&temb)?.silu()?)?;
        let guide = c_rg.tensor();

        let mut f = Tensor::cat(&[z_t.tensor(), x_lr.tensor()], 1)?;
        let mut skips = Vec::with_capacity(4);
        let mut pre_down = Vec::with_capacity(4);
        for enc in &self.encs {
            f = enc.rgrb1.forward(&f, &temb, guide)?;
            f = enc.rgrb2.forward(&f, &temb, guide)?;
            let (_b, _c, h, w) = f.dims4()?;
            pre_down.push((h, w));
            f = stride2_subsample(&enc.down.forward(&f)?)?;
            skips.push(f.clone());
        }

        f = self.mid.res1.forward(&f, &temb)?;
        {
            let (_b, _c, h, w) = f.dims4()?;
            let t = to_tokens(&f)?;
            let t = self.mid.attn.forward(&t)?;
            f = from_tokens(&t, h, w)?;
        }
        f = self.mid.res2.forward(&f, &temb)?;

        for (j, dec) in self.decs.iter().enumerate() {
            let i = 3 - j; // encoder mirror, 0-indexed
            f = Tensor::cat(&[&skips[i], &f], 1)?;
            f = dec.rgrb1.forward(&f, &temb, guide)?;
            f = dec.rgrb2.forward(&f, &temb, guide)?;
            let (th, tw) = pre_down[i];
            f = dec.up.forward(&nearest_resize(&f, th, tw)?)?;
        }

        let out = self
            .head_conv
            .forward(&self.head_ln.forward_channels(&f)?.silu()?)?;
        LatentTensor::new(out)
    }
}

impl NoisePredictor for GuidedUNet {
    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    fn predict(
        &self,
        z_t: &LatentTensor,
        x_lr: &ImageTensor,
        c_rg: &RecognitionGuidance,
        t: usize,
    ) -> Result<LatentTensor> {
        let b = z_t.dims().0;
        self.forward_batch(z_t, x_lr, c_rg, &vec![t; b])
    }
}
