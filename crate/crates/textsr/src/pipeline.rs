//! End-to-end training and inference: the latent diffusion loop that ties
//! the codec, recognizer, and guided denoiser together, plus the
//! super-resolution entry point used by the CLI and the evaluator.
//!
//! The codec is a fixed preprocessor here: latents are detached after
//! encoding and codec variables are never handed to the optimizer, so its
//! weights are bit-identical before and after any number of train steps.

use candle_core::Tensor;
use rand::Rng;
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};

use crate::batching::{gather_batch, shuffled_indices};
use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::imageops::bicubic_resize;
use crate::recognizer::{decode_text, Recognizer};
use crate::rng::{randn, rng_for, SeededRng};
use crate::schedule::{
    build_schedule, diffusion_loss, forward_marginal_batch, sample_loop, NoisePredictor,
    NoiseSchedule, SamplerKind, ScheduleKind,
};
use crate::types::{ImageRole, ImageTensor, LatentTensor};
use crate::unet::GuidedUNet;

/// Settings for the joint denoiser + recognizer training run and the
/// sampler it will be evaluated with. Defaults are the full-scale recipe;
/// [`TrainConfig::desk`] shrinks it to something a workstation finishes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Weight of the recognition-alignment term in the total loss.
    pub lambda_recog: f64,
    /// Diffusion steps in the forward process.
    pub t_max: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler: SamplerKind,
    /// Network evaluations per sampled image; at most `t_max`.
    pub sample_steps: usize,
    /// DDIM stochasticity; 0 is the deterministic sampler.
    pub eta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-6,
            epochs: 250,
            lambda_recog: 1.0,
            t_max: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampler: SamplerKind::Ddim,
            sample_steps: 200,
            eta: 0.0,
        }
    }
}

impl TrainConfig {
    /// Workstation-scale recipe: a short schedule, a few dozen epochs, and a
    /// learning rate tuned so the small synthetic corpus converges within
    /// hours on one CPU core. Batch size 8 keeps the attention activations
    /// retained for the backward pass inside a few gigabytes.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 3e-4,
            epochs: 20,
            t_max: 100,
            sample_steps: 25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda_recog.is_finite() && self.lambda_recog >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_recog must be >= 0, got {}",
                self.lambda_recog
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!(
                "eta must be in [0, 1], got {}",
                self.eta
            )));
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_max {
            return Err(Error::InvalidConfig(format!(
                "sample_steps must be in 1..={}, got {}",
                self.t_max, self.sample_steps
            )));
        }
        // Delegates beta-range checks.
        self.build_schedule().map(|_| ())
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.schedule, self.t_max, self.beta_start, self.beta_end)
    }
}

/// Scalar losses from one optimizer step, read out before the update.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub diffusion: f64,
    pub recognition: f64,
    pub total: f64,
}

/// Per-epoch means of [`StepLosses`], weighted by batch size.
#[derive(Debug, Clone, Copy)]
pub struct EpochLosses {
    pub diffusion: f64,
    pub recognition: f64,
    pub total: f64,
}

/// Optimizer state for the joint denoiser + recognizer objective. Holds the
/// two trainable variable sets; the codec never enters the optimizer.
pub struct Trainer<'a> {
    unet: &'a GuidedUNet,
    recognizer: &'a Recognizer,
    codec: &'a LatentCodec,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    opt: AdamW,
    rng: SeededRng,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        unet: &'a GuidedUNet,
        unet_vars: &VarMap,
        recognizer: &'a Recognizer,
        recog_vars: &VarMap,
        codec: &'a LatentCodec,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.build_schedule()?;
        let mut vars = unet_vars.all_vars();
        vars.extend(recog_vars.all_vars());
        if vars.is_empty() {
            return Err(Error::InvalidConfig("no trainable variables".into()));
        }
        // Decay-free AdamW: decoupled decay would silently shrink the frozen
        // recognizer alignment the guidance term is trying to build up.
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let rng = rng_for(seed, "diffusion-train");
        Ok(Self {
            unet,
            recognizer,
            codec,
            schedule,
            cfg,
            opt,
            rng,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// One optimizer step on a paired batch.
    ///
    /// Encodes HR into a detached latent, corrupts it at per-sample uniform
    /// timesteps, predicts the noise under recognition guidance from LR, and
    /// descends `diffusion + lambda * recognition`. With `lambda == 0` the
    /// total IS the diffusion loss (same graph node), not an approximation.
    pub fn train_step(&mut self, lr: &ImageTensor, hr: &ImageTensor) -> Result<StepLosses> {
        check_paired_batch(lr, hr)?;
        let b = lr.batch();

        let z0 = self.codec.encode(hr)?;
        let z0 = LatentTensor::new(z0.tensor().detach())?;
        let (zb, zc, zh, zw) = z0.dims();
        let ts: Vec<usize> = (0..b)
            .map(|_| self.rng.random_range(1..=self.schedule.t_max()))
            .collect();
        let eps = LatentTensor::new(randn(
            &mut self.rng,
            &[zb, zc, zh, zw],
            z0.tensor().dtype(),
            z0.tensor().device(),
        )?)?;
        let z_t = forward_marginal_batch(&z0, &ts, &eps, &self.schedule)?;

        // Guidance stays attached: the denoiser's loss backpropagates into
        // the recognizer through the cross-attention path.
        let c_rg = self.recognizer.recognize(lr)?;
        let pred = self.unet.forward_batch(&z_t, lr, &c_rg, &ts)?;
        let loss_dm = diffusion_loss(&eps, &pred)?;
        let loss_recog = self.recognizer.recog_loss(lr, hr)?;

        let lambda = self.cfg.lambda_recog;
        let total = if lambda == 0.0 {
            loss_dm.clone()
        } else {
            (&loss_dm + loss_recog.affine(lambda, 0.0)?)?
        };

        let losses = StepLosses {
            diffusion: scalar(&loss_dm)?,
            recognition: scalar(&loss_recog)?,
            total: scalar(&total)?,
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss_dm: losses.diffusion,
                loss_recog: losses.recognition,
            });
        }
        self.opt.backward_step(&total)?;
        self.step += 1;
        Ok(losses)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn check_paired_batch(lr: &ImageTensor, hr: &ImageTensor) -> Result<()> {
    let (lb, lc, lh, lw) = lr.dims();
    let (hb, hc, hh, hw) = hr.dims();
    if lb != hb || lc != hc || hh != 2 * lh || hw != 2 * lw {
        return Err(Error::ShapeMismatch {
            what: "paired batch (hr must be 2x lr)",
            expected: vec![lb, lc, 2 * lh, 2 * lw],
            got: vec![hb, hc, hh, hw],
        });
    }
    Ok(())
}

/// Full training loop over a stacked corpus. Batch order each epoch is a
/// pure function of `(seed, epoch)`, so reruns reproduce the loss curve
/// bit for bit. Returns per-epoch mean losses.
#[allow(clippy::too_many_arguments)]
pub fn train_diffusion(
    unet: &GuidedUNet,
    unet_vars: &VarMap,
    recognizer: &Recognizer,
    recog_vars: &VarMap,
    codec: &LatentCodec,
    lr_images: &ImageTensor,
    hr_images: &ImageTensor,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &EpochLosses),
) -> Result<Vec<EpochLosses>> {
    check_paired_batch(lr_images, hr_images)?;
    let n = lr_images.batch();
    if n == 0 {
        return Err(Error::EmptyDataset("diffusion training set".into()));
    }
    let mut trainer = Trainer::new(
        unet,
        unet_vars,
        recognizer,
        recog_vars,
        codec,
        cfg.clone(),
        seed,
    )?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(n, seed, epoch as u64);
        let (mut dm, mut rec, mut tot) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let lr_b = ImageTensor::new(gather_batch(lr_images.tensor(), chunk)?, ImageRole::Lr)?;
            let hr_b = ImageTensor::new(gather_batch(hr_images.tensor(), chunk)?, ImageRole::Hr)?;
            let s = trainer.train_step(&lr_b, &hr_b)?;
            let w = chunk.len() as f64;
            dm += s.diffusion * w;
            rec += s.recognition * w;
            tot += s.total * w;
        }
        let inv = 1.0 / n as f64;
        let e = EpochLosses {
            diffusion: dm * inv,
            recognition: rec * inv,
            total: tot * inv,
        };
        on_epoch(epoch, &e);
        curve.push(e);
    }
    Ok(curve)
}

/// Runs the reverse diffusion in latent space under recognition guidance
/// from the low-resolution input and decodes the result. Output is exactly
/// twice the input in both spatial dimensions.
#[allow(clippy::too_many_arguments)]
pub fn super_resolve(
    codec: &LatentCodec,
    recognizer: &Recognizer,
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    lr: &ImageTensor,
    sampler: SamplerKind,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<ImageTensor> {
    let c_rg = recognizer.recognize(lr)?;
    let z0 = sample_loop(net, lr, &c_rg, schedule, sampler, steps, eta, seed)?;
    codec.decode(&z0)
}

/// Anything that maps an LR image batch to an SR batch at 2x size.
/// `seed` fixes all sampler randomness; deterministic models ignore it.
pub trait SuperResolver {
    fn super_resolve(&self, lr: &ImageTensor, seed: u64) -> Result<ImageTensor>;
}

/// Anything that reads text off an image batch, one string per image.
pub trait TextReader {
    fn read_text(&self, images: &ImageTensor) -> Result<Vec<String>>;
}

impl TextReader for Recognizer {
    fn read_text(&self, images: &ImageTensor) -> Result<Vec<String>> {
        decode_text(&self.recognize(images)?, self.alphabet())
    }
}

/// The trained system packaged for evaluation: codec + recognizer +
/// denoiser plus the sampler settings they were trained for.
pub struct DiffusionSr<'a> {
    pub codec: &'a LatentCodec,
    pub recognizer: &'a Recognizer,
    pub net: &'a GuidedUNet,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub eta: f64,
}

impl SuperResolver for DiffusionSr<'_> {
    fn super_resolve(&self, lr: &ImageTensor, seed: u64) -> Result<ImageTensor> {
        super_resolve(
            self.codec,
            self.recognizer,
            self.net,
            self.schedule,
            lr,
            self.sampler,
            self.steps,
            self.eta,
            seed,
        )
    }
}

/// Classical baseline: cubic interpolation to 2x, no learning anywhere.
pub struct BicubicUpsampler;

impl SuperResolver for BicubicUpsampler {
    fn super_resolve(&self, lr: &ImageTensor, _seed: u64) -> Result<ImageTensor> {
        let (_b, _c, h, w) = lr.dims();
        let up = bicubic_resize(lr.tensor(), 2 * h, 2 * w)?;
        ImageTensor::new(up, ImageRole::Sr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentCodecConfig;
    use crate::recognizer::{Alphabet, RecognizerConfig};
    use crate::rng::rand_uniform;
    use crate::unet::GuidedUNetConfig;
    use candle_core::{DType, Device};

    const DT: DType = DType::F32;

    struct Rig {
        codec: LatentCodec,
        codec_vars: VarMap,
        recognizer: Recognizer,
        recog_vars: VarMap,
        unet: GuidedUNet,
        unet_vars: VarMap,
    }

    fn rig() -> Rig {
        let dev = Device::Cpu;
        let (codec_vars, codec) = LatentCodec::build(
            LatentCodecConfig {
                image_channels: 3,
                hidden_channels: 8,
                latent_channels: 3,
                codebook_size: 8,
            },
            DT,
            &dev,
            11,
        )
        .unwrap();
        let (recog_vars, recognizer) = Recognizer::build(
            RecognizerConfig {
                image_channels: 3,
                conv_channels: [8, 12, 16, 16],
                gru_hidden: 16,
                input_height: 16,
                input_width: 64,
                alphabet: Alphabet::alnum(),
            },
            DT,
            &dev,
            12,
        )
        .unwrap();
        let (unet_vars, unet) = GuidedUNet::build(
            GuidedUNetConfig {
                base_channels: 8,
                channel_mults: vec![1, 2, 2, 4],
                num_heads: 2,
                rg_block_ids: vec![1, 4],
                latent_channels: 3,
                cond_channels: 3,
                alphabet_size: Alphabet::alnum().size(),
                ..GuidedUNetConfig::default()
            },
            DT,
            &dev,
            13,
        )
        .unwrap();
        Rig {
            codec,
            codec_vars,
            recognizer,
            recog_vars,
            unet,
            unet_vars,
        }
    }

    fn cfg_tiny() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            epochs: 2,
            t_max: 20,
            sample_steps: 5,
            ..TrainConfig::default()
        }
    }

    fn pair(b: usize, h: usize, w: usize, seed: u64) -> (ImageTensor, ImageTensor) {
        let mut rng = rng_for(seed, "pipeline-test-images");
        let dev = Device::Cpu;
        let lr = rand_uniform(&mut rng, -1.0, 1.0, &[b, 3, h, w], DT, &dev).unwrap();
        let hr = rand_uniform(&mut rng, -1.0, 1.0, &[b, 3, 2 * h, 2 * w], DT, &dev).unwrap();
        (
            ImageTensor::new(lr, ImageRole::Lr).unwrap(),
            ImageTensor::new(hr, ImageRole::Hr).unwrap(),
        )
    }

    #[test]
    fn lambda_zero_total_is_exactly_the_diffusion_loss() {
        let r = rig();
        let cfg = TrainConfig {
            lambda_recog: 0.0,
            ..cfg_tiny()
        };
        let mut tr = Trainer::new(
            &r.unet,
            &r.unet_vars,
            &r.recognizer,
            &r.recog_vars,
            &r.codec,
            cfg,
            5,
        )
        .unwrap();
        let (lr, hr) = pair(2, 8, 16, 1);
        let s = tr.train_step(&lr, &hr).unwrap();
        assert_eq!(s.total, s.diffusion);
        assert!(s.recognition >= 0.0);
    }

    #[test]
    fn total_is_the_weighted_sum_with_no_hidden_terms() {
        let r = rig();
        let cfg = TrainConfig {
            lambda_recog: 0.7,
            ..cfg_tiny()
        };
        let mut tr = Trainer::new(
            &r.unet,
            &r.unet_vars,
            &r.recognizer,
            &r.recog_vars,
            &r.codec,
            cfg,
            5,
        )
        .unwrap();
        let (lr, hr) = pair(2, 8, 16, 1);
        let s = tr.train_step(&lr, &hr).unwrap();
        let expect = s.diffusion + 0.7 * s.recognition;
        assert!(
            (s.total - expect).abs() <= 1e-6 * expect.abs().max(1.0),
            "total {} vs {}",
            s.total,
            expect
        );
    }

    #[test]
    fn codec_weights_are_bit_identical_across_train_steps() {
        let r = rig();
        let snapshot = |vm: &VarMap| -> Vec<Vec<f32>> {
            let data = vm.data().lock().unwrap();
            let mut names: Vec<_> = data.keys().cloned().collect();
            names.sort();
            names
                .iter()
                .map(|n| data[n].flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .collect()
        };
        let before = snapshot(&r.codec_vars);
        let mut tr = Trainer::new(
            &r.unet,
            &r.unet_vars,
            &r.recognizer,
            &r.recog_vars,
            &r.codec,
            cfg_tiny(),
            7,
        )
        .unwrap();
        let (lr, hr) = pair(2, 8, 16, 2);
        for _ in 0..3 {
            tr.train_step(&lr, &hr).unwrap();
        }
        let after = snapshot(&r.codec_vars);
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "codec weights moved during diffusion training");
        }
        // Sanity: the trainable nets DID move.
        assert!(tr.steps_taken() == 3);
    }

    #[test]
    fn fixed_seed_reproduces_step_losses() {
        let losses = |seed: u64| {
            let r = rig();
            let mut tr = Trainer::new(
                &r.unet,
                &r.unet_vars,
                &r.recognizer,
                &r.recog_vars,
                &r.codec,
                cfg_tiny(),
                seed,
            )
            .unwrap();
            let (lr, hr) = pair(2, 8, 16, 3);
            let s = tr.train_step(&lr, &hr).unwrap();
            (s.diffusion, s.recognition, s.total)
        };
        assert_eq!(losses(9), losses(9));
        assert_ne!(losses(9).0, losses(10).0);
    }

    #[test]
    fn training_curve_is_deterministic() {
        let run = || {
            let r = rig();
            let (lr, hr) = pair(5, 8, 16, 4);
            let curve = train_diffusion(
                &r.unet,
                &r.unet_vars,
                &r.recognizer,
                &r.recog_vars,
                &r.codec,
                &lr,
                &hr,
                &cfg_tiny(),
                21,
                |_, _| {},
            )
            .unwrap();
            curve
                .iter()
                .map(|e| (e.diffusion, e.recognition, e.total))
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let r = rig();
        let mut tr = Trainer::new(
            &r.unet,
            &r.unet_vars,
            &r.recognizer,
            &r.recog_vars,
            &r.codec,
            cfg_tiny(),
            1,
        )
        .unwrap();
        let (lr, _) = pair(2, 8, 16, 5);
        let (_, hr_bad) = pair(2, 8, 20, 5);
        assert!(tr.train_step(&lr, &hr_bad).is_err());
        let (lr3, _) = pair(3, 8, 16, 5);
        let (_, hr2) = pair(2, 8, 16, 5);
        assert!(tr.train_step(&lr3, &hr2).is_err());
    }

    #[test]
    fn super_resolve_doubles_dims_and_is_deterministic_at_eta_zero() {
        let r = rig();
        let cfg = cfg_tiny();
        let sched = cfg.build_schedule().unwrap();
        let (lr, _) = pair(1, 8, 16, 6);
        let go = || {
            super_resolve(
                &r.codec,
                &r.recognizer,
                &r.unet,
                &sched,
                &lr,
                SamplerKind::Ddim,
                5,
                0.0,
                77,
            )
            .unwrap()
        };
        let a = go();
        assert_eq!(a.dims(), (1, 3, 16, 32));
        assert_eq!(a.role(), ImageRole::Sr);
        let av = a.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bv = go()
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(av.iter().zip(&bv).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bicubic_baseline_doubles_dims() {
        let (lr, _) = pair(2, 8, 16, 8);
        let sr = BicubicUpsampler.super_resolve(&lr, 0).unwrap();
        assert_eq!(sr.dims(), (2, 3, 16, 32));
        assert_eq!(sr.role(), ImageRole::Sr);
        let direct = bicubic_resize(lr.tensor(), 16, 32).unwrap();
        let d = (sr.tensor() - &direct)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn recognizer_reads_text_through_the_plugin_trait() {
        let r = rig();
        let (lr, _) = pair(3, 8, 16, 9);
        let texts = r.recognizer.read_text(&lr).unwrap();
        assert_eq!(texts.len(), 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda_recog: -0.1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            sample_steps: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            sample_steps: 2000,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            eta: 1.5,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            beta_end: 1.2,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::desk().validate().is_ok());
    }
}
