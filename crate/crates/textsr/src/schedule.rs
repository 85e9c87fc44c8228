//! Variance schedules, forward diffusion kernels, the training loss, and the
//! DDPM/DDIM reverse samplers.
//!
//! Everything here is pure tensor math, independent of any network. The
//! denoiser enters only through the [`NoisePredictor`] trait, which lets
//! tests drive the samplers with closed-form oracles.
//!
//! Conventions: timesteps are 1-based, `t in 1..=T`; `alpha_bar(0) = 1` so
//! the `t = 0` marginal is the identity. Schedule coefficients are computed
//! and stored in f64 and materialized in the latent's dtype at use time.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::rng::{randn, rng_for};
use crate::types::{ImageTensor, LatentTensor, RecognitionGuidance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::InvalidSchedule(format!(
                "unknown schedule kind `{other}` (expected linear|cosine)"
            ))),
        }
    }
}

/// Which variance the stochastic DDPM step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReverseVariance {
    /// The posterior variance `beta_tilde_t` (default).
    #[default]
    BetaTilde,
    /// The forward variance `beta_t`.
    Beta,
}

/// Precomputed `beta_t`, `alpha_t`, `alpha_bar_t`, `beta_tilde_t` for
/// `t = 1..=T`, stored 0-indexed internally.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
}

/// Builds a schedule of the given family.
///
/// For the linear family, betas are evenly spaced on
/// `[beta_start, beta_end]` inclusive. The cosine family derives betas from
/// the squared-cosine alpha-bar curve (offset 0.008, betas clipped at 0.999);
/// `beta_start`/`beta_end` are validated but do not shape the cosine curve.
pub fn build_schedule(
    kind: ScheduleKind,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidSchedule("T must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&beta_start) || beta_end >= 1.0 || beta_end < beta_start {
        return Err(Error::InvalidSchedule(format!(
            "require 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if t_max == 1 {
                vec![beta_start]
            } else {
                (0..t_max)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |u: f64| ((u / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            let mut prev = 1.0;
            (1..=t_max)
                .map(|t| {
                    let ab = f(t as f64) / f0;
                    let beta = (1.0 - ab / prev).clamp(0.0, 0.999);
                    prev *= 1.0 - beta;
                    beta
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, betas)
}

impl NoiseSchedule {
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("T must be >= 1".into()));
        }
        for (i, b) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::InvalidSchedule(format!(
                    "beta_{} = {b} outside [0, 1)",
                    i + 1
                )));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        // beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, abar_0 = 1.
        let mut beta_tildes = Vec::with_capacity(betas.len());
        for t in 1..=betas.len() {
            let ab_prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
            let ab = alpha_bars[t - 1];
            let bt = if 1.0 - ab == 0.0 {
                0.0
            } else {
                (1.0 - ab_prev) / (1.0 - ab) * betas[t - 1]
            };
            beta_tildes.push(bt);
        }
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            beta_tildes,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Total number of timesteps T.
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::TimestepOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t - 1]
    }

    /// Restricts the schedule to an ascending subsequence of timesteps so a
    /// DDPM sampler can walk it in `times.len()` steps: the respaced betas
    /// are `1 - abar(t_k) / abar(t_{k-1})`, which preserves the marginals at
    /// the kept steps.
    pub fn respace(&self, times: &[usize]) -> Result<NoiseSchedule> {
        let mut betas = Vec::with_capacity(times.len());
        let mut prev = 0;
        for &t in times {
            self.check_t(t)?;
            if t <= prev {
                return Err(Error::InvalidSchedule(
                    "respace times must be strictly increasing".into(),
                ));
            }
            betas.push(1.0 - self.alpha_bar(t) / self.alpha_bar(prev));
            prev = t;
        }
        NoiseSchedule::from_betas(self.kind, betas)
    }

    /// Writes the `t,beta,alpha,alpha_bar,beta_tilde` CSV.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "t,beta,alpha,alpha_bar,beta_tilde")?;
        for t in 1..=self.t_max() {
            writeln!(
                w,
                "{t},{},{},{},{}",
                self.beta(t),
                self.alpha(t),
                self.alpha_bar(t),
                self.beta_tilde(t)
            )?;
        }
        Ok(())
    }
}

fn check_same_shape(a: &LatentTensor, b: &LatentTensor, what: &'static str) -> Result<()> {
    if !a.shape_matches(b) {
        return Err(Error::ShapeMismatch {
            what,
            expected: a.tensor().dims().to_vec(),
            got: b.tensor().dims().to_vec(),
        });
    }
    Ok(())
}

/// `a * x + b * y` with f64 scalars materialized in x's dtype.
fn affine2(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    Ok(((x * a)? + (y * b)?)?)
}

/// Samples the forward marginal `q(z_t | z_0)`:
/// `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_marginal(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    sched.check_t(t)?;
    check_same_shape(z0, eps, "forward_marginal noise")?;
    let ab = sched.alpha_bar(t);
    LatentTensor::new(affine2(ab.sqrt(), z0.tensor(), (1.0 - ab).sqrt(), eps.tensor())?)
}

/// Forward marginal with one timestep per batch element, used by training.
pub fn forward_marginal_batch(
    z0: &LatentTensor,
    ts: &[usize],
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    check_same_shape(z0, eps, "forward_marginal noise")?;
    let (b, _, _, _) = z0.dims();
    if ts.len() != b {
        return Err(Error::msg(format!(
            "forward_marginal_batch: {} timesteps for batch of {b}",
            ts.len()
        )));
    }
    let mut c0 = Vec::with_capacity(b);
    let mut c1 = Vec::with_capacity(b);
    for &t in ts {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        c0.push(ab.sqrt());
        c1.push((1.0 - ab).sqrt());
    }
    let dev = z0.tensor().device();
    let dt = z0.tensor().dtype();
    let c0 = Tensor::from_vec(c0, (b, 1, 1, 1), dev)?.to_dtype(dt)?;
    let c1 = Tensor::from_vec(c1, (b, 1, 1, 1), dev)?.to_dtype(dt)?;
    let out = (z0.tensor().broadcast_mul(&c0)? + eps.tensor().broadcast_mul(&c1)?)?;
    LatentTensor::new(out)
}

/// One forward kernel step `q(z_t | z_{t-1})`:
/// `sqrt(1 - beta_t) * z_prev + sqrt(beta_t) * noise`.
pub fn forward_step(
    z_prev: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    sched.check_t(t)?;
    check_same_shape(z_prev, noise, "forward_step noise")?;
    let b = sched.beta(t);
    LatentTensor::new(affine2((1.0 - b).sqrt(), z_prev.tensor(), b.sqrt(), noise.tensor())?)
}

/// Mean squared error over all entries. Returns a scalar tensor so training
/// can backpropagate through it; read the value with `to_scalar`.
pub fn diffusion_loss(eps_true: &LatentTensor, eps_pred: &LatentTensor) -> Result<Tensor> {
    check_same_shape(eps_true, eps_pred, "diffusion_loss prediction")?;
    let d = (eps_true.tensor() - eps_pred.tensor())?;
    Ok(d.sqr()?.mean_all()?)
}

/// One stochastic reverse step `p(z_{t-1} | z_t)` with the default
/// `beta_tilde` variance. The final step (t = 1) adds no noise.
pub fn ddpm_step(
    z_t: &LatentTensor,
    eps_pred: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    ddpm_step_with_variance(z_t, eps_pred, t, sched, noise, ReverseVariance::BetaTilde)
}

pub fn ddpm_step_with_variance(
    z_t: &LatentTensor,
    eps_pred: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&LatentTensor>,
    variance: ReverseVariance,
) -> Result<LatentTensor> {
    sched.check_t(t)?;
    check_same_shape(z_t, eps_pred, "ddpm_step prediction")?;
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let eps_coef = if 1.0 - ab == 0.0 {
        0.0
    } else {
        (1.0 - alpha) / (1.0 - ab).sqrt()
    };
    let mean = affine2(
        1.0 / alpha.sqrt(),
        z_t.tensor(),
        -eps_coef / alpha.sqrt(),
        eps_pred.tensor(),
    )?;
    if t == 1 {
        return LatentTensor::new(mean);
    }
    let var = match variance {
        ReverseVariance::BetaTilde => sched.beta_tilde(t),
        ReverseVariance::Beta => sched.beta(t),
    };
    if var == 0.0 {
        return LatentTensor::new(mean);
    }
    let noise = noise.ok_or_else(|| {
        Error::msg("ddpm_step: noise required for a stochastic step (t > 1, variance > 0)")
    })?;
    check_same_shape(z_t, noise, "ddpm_step noise")?;
    LatentTensor::new((mean + (noise.tensor() * var.sqrt())?)?)
}

/// One DDIM step from `t` to `t_prev < t` (with `t_prev = 0` meaning the
/// clean latent). `eta = 0` is fully deterministic and consumes no noise.
///
/// Uses the x0-prediction `(z_t - sqrt(1-abar_t) * eps) / sqrt(abar_t)` and
/// the posterior-style variance `sigma = eta * sqrt((1-abar_prev)/(1-abar_t)
/// * (1 - abar_t/abar_prev))`.
pub fn ddim_step(
    z_t: &LatentTensor,
    eps_pred: &LatentTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&LatentTensor>,
) -> Result<LatentTensor> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::msg(format!(
            "ddim_step: t_prev ({t_prev}) must be < t ({t})"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::msg(format!("ddim_step: eta ({eta}) outside [0, 1]")));
    }
    check_same_shape(z_t, eps_pred, "ddim_step prediction")?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let x0 = affine2(
        1.0 / ab_t.sqrt(),
        z_t.tensor(),
        -(1.0 - ab_t).sqrt() / ab_t.sqrt(),
        eps_pred.tensor(),
    )?;
    let sigma = if eta == 0.0 || 1.0 - ab_t == 0.0 {
        0.0
    } else {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).sqrt()
    };
    let dir_coef = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = affine2(ab_prev.sqrt(), &x0, dir_coef, eps_pred.tensor())?;
    if sigma > 0.0 {
        let noise = noise
            .ok_or_else(|| Error::msg("ddim_step: noise required when eta > 0 and t_prev > 0"))?;
        check_same_shape(z_t, noise, "ddim_step noise")?;
        out = (out + (noise.tensor() * sigma)?)?;
    }
    LatentTensor::new(out)
}

/// The denoising network as the samplers see it.
pub trait NoisePredictor {
    fn latent_channels(&self) -> usize;
    fn predict(
        &self,
        z_t: &LatentTensor,
        x_lr: &ImageTensor,
        c_rg: &RecognitionGuidance,
        t: usize,
    ) -> Result<LatentTensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::msg(format!(
                "unknown sampler `{other}` (expected ddpm|ddim)"
            ))),
        }
    }
}

/// Uniformly spaced integer timesteps over [1, T], ascending, ending at T.
/// `t_i = round(i * T / steps)` for `i = 1..=steps`.
pub fn sample_times(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::msg("sample steps must be >= 1"));
    }
    if steps > t_max {
        return Err(Error::msg(format!(
            "sample steps ({steps}) exceed schedule length ({t_max})"
        )));
    }
    Ok((1..=steps)
        .map(|i| (2 * i * t_max + steps) / (2 * steps))
        .collect())
}

/// Runs the reverse process from a seeded standard-Gaussian `z_T` down to
/// `t = 0` and returns `z_0`. Consumes exactly `steps` network evaluations.
pub fn sample_loop(
    net: &dyn NoisePredictor,
    x_lr: &ImageTensor,
    c_rg: &RecognitionGuidance,
    sched: &NoiseSchedule,
    sampler: SamplerKind,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<LatentTensor> {
    let mut rng = rng_for(seed, "sample-loop");
    let dtype = x_lr.tensor().dtype();
    let device = x_lr.tensor().device().clone();
    let mut draw = move |shape: &[usize]| -> Result<Tensor> {
        randn(&mut rng, shape, dtype, &device)
    };
    sample_loop_with(net, x_lr, c_rg, sched, sampler, steps, eta, &mut draw)
}

/// [`sample_loop`] with an explicit noise source, so tests can count and
/// control every draw. The first draw is always `z_T`; further draws happen
/// only when a step is stochastic.
#[allow(clippy::too_many_arguments)]
pub fn sample_loop_with(
    net: &dyn NoisePredictor,
    x_lr: &ImageTensor,
    c_rg: &RecognitionGuidance,
    sched: &NoiseSchedule,
    sampler: SamplerKind,
    steps: usize,
    eta: f64,
    draw: &mut dyn FnMut(&[usize]) -> Result<Tensor>,
) -> Result<LatentTensor> {
    let times = sample_times(sched.t_max(), steps)?;
    let (b, _, h, w) = {
        let d = x_lr.tensor().dims();
        (d[0], d[1], d[2], d[3])
    };
    let shape = [b, net.latent_channels(), h, w];
    let mut z = LatentTensor::new(draw(&shape)?)?;
    match sampler {
        SamplerKind::Ddim => {
            for k in (1..=steps).rev() {
                let t = times[k - 1];
                let t_prev = if k >= 2 { times[k - 2] } else { 0 };
                let eps = net.predict(&z, x_lr, c_rg, t)?;
                let ab_t = sched.alpha_bar(t);
                let stochastic = eta > 0.0 && t_prev > 0 && 1.0 - ab_t > 0.0;
                let noise = if stochastic {
                    Some(LatentTensor::new(draw(&shape)?)?)
                } else {
                    None
                };
                z = ddim_step(&z, &eps, t, t_prev, sched, eta, noise.as_ref())?;
            }
        }
        SamplerKind::Ddpm => {
            let respaced = sched.respace(&times)?;
            for k in (1..=steps).rev() {
                let t_orig = times[k - 1];
                let eps = net.predict(&z, x_lr, c_rg, t_orig)?;
                let noise = if k > 1 && respaced.beta_tilde(k) > 0.0 {
                    Some(LatentTensor::new(draw(&shape)?)?)
                } else {
                    None
                };
                z = ddpm_step(&z, &eps, k, &respaced, noise.as_ref())?;
            }
        }
    }
    Ok(z)
}
