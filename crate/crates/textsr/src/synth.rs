//! Synthetic text-image corpus generator.
//!
//! Renders random strings from the recognizer alphabet onto 32x128 HR
//! canvases with an 8x8 bitmap font scaled 2x, then manufactures the paired
//! LR image through a configurable degradation: Gaussian blur, exact 2x box
//! downsample, and pixel noise. Both images are snapped to the 8-bit PNG
//! grid, so a generated corpus and its on-disk round trip are bit-identical.
//!
//! Everything is driven by one seeded stream per corpus: the same seed
//! always reproduces the same samples, byte for byte.

use candle_core::{DType, Device, Tensor};
use font8x8::{UnicodeFonts, BASIC_FONTS};
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageops::{box_down2, gaussian_blur, quantize8};
use crate::manifest::{Difficulty, PairedSample};
use crate::recognizer::Alphabet;
use crate::rng::{randn, rng_for, SeededRng};
use crate::types::{ImageRole, ImageTensor};

pub const HR_HEIGHT: usize = 32;
pub const HR_WIDTH: usize = 128;
const GLYPH: usize = 8;
const SCALE: usize = 2;
const CELL: usize = GLYPH * SCALE; // 16 px per character
/// Longest string that fits the canvas.
pub const MAX_LABEL_LEN: usize = HR_WIDTH / CELL;

/// How hard the LR images are to read. Per-sample strengths are drawn
/// uniformly from these closed ranges.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DegradationConfig {
    pub blur_sigma: (f64, f64),
    pub noise_std: (f64, f64),
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma: (0.3, 1.8),
            noise_std: (0.0, 0.10),
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let (slo, shi) = self.blur_sigma;
        let (nlo, nhi) = self.noise_std;
        if !(slo.is_finite() && shi.is_finite() && nlo.is_finite() && nhi.is_finite()) {
            return Err(Error::InvalidConfig("degradation params must be finite".into()));
        }
        if slo < 0.0 || slo > shi {
            return Err(Error::InvalidConfig(format!(
                "blur sigma range must satisfy 0 <= lo <= hi, got ({slo}, {shi})"
            )));
        }
        if nlo < 0.0 || nlo > nhi || nhi >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "noise std range must satisfy 0 <= lo <= hi < 1, got ({nlo}, {nhi})"
            )));
        }
        Ok(())
    }

    /// Position of a drawn strength inside its range, 0.5 when degenerate.
    fn frac(v: f64, (lo, hi): (f64, f64)) -> f64 {
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    }

    /// Buckets a drawn (sigma, noise) pair into thirds of the combined
    /// strength range.
    fn classify(&self, sigma: f64, noise: f64) -> Difficulty {
        let score = (Self::frac(sigma, self.blur_sigma) + Self::frac(noise, self.noise_std)) / 2.0;
        if score < 1.0 / 3.0 {
            Difficulty::Easy
        } else if score < 2.0 / 3.0 {
            Difficulty::Medium
        } else {
            Difficulty::Hard
        }
    }
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Foreground/background colors with enough luma contrast to read.
fn draw_colors(rng: &mut SeededRng) -> ([f64; 3], [f64; 3]) {
    let draw = |rng: &mut SeededRng| -> [f64; 3] {
        [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ]
    };
    for _ in 0..64 {
        let bg = draw(rng);
        let fg = draw(rng);
        if (luma(fg) - luma(bg)).abs() >= 0.6 {
            return (fg, bg);
        }
    }
    // Vanishingly rare; force maximal contrast against a fresh background.
    let bg = draw(rng);
    let v = if luma(bg) > 0.0 { -0.9 } else { 0.9 };
    ([v, v, v], bg)
}

/// Rasterizes `label` onto a fresh canvas. Returns channel-major host data.
fn render_hr(label: &str, fg: [f64; 3], bg: [f64; 3], rng: &mut SeededRng) -> Vec<f64> {
    let mut data = vec![0f64; 3 * HR_HEIGHT * HR_WIDTH];
    for c in 0..3 {
        data[c * HR_HEIGHT * HR_WIDTH..(c + 1) * HR_HEIGHT * HR_WIDTH].fill(bg[c]);
    }
    let len = label.chars().count();
    let margin = (HR_WIDTH - CELL * len) / 2;
    let max_jx = margin.min(4) as i64;
    let jx = rng.random_range(-max_jx..=max_jx);
    let jy = rng.random_range(-2i64..=2);
    let x0 = (margin as i64 + jx) as usize;
    let y0 = ((HR_HEIGHT - CELL) as i64 / 2 + jy) as usize;

    for (ci, ch) in label.chars().enumerate() {
        let glyph = BASIC_FONTS.get(ch).expect("alphabet glyphs checked up front");
        for (row, byte) in glyph.iter().enumerate() {
            for bit in 0..GLYPH {
                if byte & (1 << bit) == 0 {
                    continue;
                }
                // Bit 0 is the leftmost pixel of the row.
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let y = y0 + row * SCALE + dy;
                        let x = x0 + ci * CELL + bit * SCALE + dx;
                        for c in 0..3 {
                            data[(c * HR_HEIGHT + y) * HR_WIDTH + x] = fg[c];
                        }
                    }
                }
            }
        }
    }
    data
}

/// Generates `n` labeled LR/HR pairs. Labels draw uniformly from `alphabet`
/// with lengths in `length_range` (inclusive); degradation strengths draw
/// per sample from `degradation`. Deterministic in `seed`.
pub fn generate_synthetic(
    n: usize,
    alphabet: &Alphabet,
    length_range: (usize, usize),
    degradation: &DegradationConfig,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::InvalidConfig("corpus size must be at least 1".into()));
    }
    let (llo, lhi) = length_range;
    if llo == 0 || llo > lhi || lhi > MAX_LABEL_LEN {
        return Err(Error::InvalidConfig(format!(
            "label length range must satisfy 1 <= lo <= hi <= {MAX_LABEL_LEN}, got ({llo}, {lhi})"
        )));
    }
    degradation.validate()?;
    let symbols: Vec<char> = (1..alphabet.size())
        .map(|i| alphabet.char_at(i).expect("non-blank index"))
        .collect();
    if symbols.is_empty() {
        return Err(Error::InvalidConfig("alphabet has no drawable symbols".into()));
    }
    for &ch in &symbols {
        if BASIC_FONTS.get(ch).is_none() {
            return Err(Error::InvalidConfig(format!(
                "no glyph for alphabet character {ch:?}"
            )));
        }
    }

    let mut rng = rng_for(seed, "synthetic-corpus");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(llo..=lhi);
        let label: String = (0..len)
            .map(|_| symbols[rng.random_range(0..symbols.len())])
            .collect();
        let (fg, bg) = draw_colors(&mut rng);
        let host = render_hr(&label, fg, bg, &mut rng);
        let hr_full = Tensor::from_vec(host, (1, 3, HR_HEIGHT, HR_WIDTH), device)?;
        let hr_full = quantize8(&hr_full)?;

        let sigma = rng.random_range(degradation.blur_sigma.0..=degradation.blur_sigma.1);
        let noise_std = rng.random_range(degradation.noise_std.0..=degradation.noise_std.1);
        let mut lr = box_down2(&gaussian_blur(&hr_full, sigma)?)?;
        if noise_std > 0.0 {
            let noise = randn(&mut rng, lr.dims(), DType::F64, device)?;
            lr = (lr + (noise * noise_std)?)?;
        }
        let lr = quantize8(&lr.clamp(-1.0, 1.0)?)?;

        out.push(PairedSample::new(
            ImageTensor::new(lr.to_dtype(dtype)?, ImageRole::Lr)?,
            ImageTensor::new(hr_full.to_dtype(dtype)?, ImageRole::Hr)?,
            label,
            degradation.classify(sigma, noise_std),
        )?);
    }
    Ok(out)
}
