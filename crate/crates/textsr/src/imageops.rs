//! Image resampling and I/O helpers shared by the data synthesizer, the
//! recognizer front-end, the bicubic baseline, and the metrics module.
//!
//! Resampling runs on the host in f64 regardless of the tensor dtype. None of
//! these ops need gradients: they are applied to leaf data (dataset images)
//! before any trainable layer sees them.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::types::{ImageRole, ImageTensor};

/// Cubic convolution kernel with a = -0.5 (Catmull-Rom). Zero outside |d| < 2.
fn cubic_kernel(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d < 1.0 {
        (A + 2.0) * d * d * d - (A + 3.0) * d * d + 1.0
    } else if d < 2.0 {
        A * d * d * d - 5.0 * A * d * d + 8.0 * A * d - 4.0 * A
    } else {
        0.0
    }
}

/// Per-axis resample plan: for each output index, four clamped source taps
/// and their weights.
fn axis_taps(src_len: usize, dst_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            // Half-pixel centers: output pixel o samples the source at this
            // continuous coordinate.
            let pos = (o as f64 + 0.5) * scale - 0.5;
            let base = pos.floor();
            let frac = pos - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let tap = base as isize + k as isize - 1;
                idx[k] = tap.clamp(0, src_len as isize - 1) as usize;
                w[k] = cubic_kernel(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Flattens to f64 on the host; callers get values plus NCHW dims.
pub fn tensor_to_host(x: &Tensor) -> Result<(Vec<f64>, (usize, usize, usize, usize))> {
    let dims = x.dims4()?;
    let data = x
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok((data, dims))
}

fn host_to_tensor(
    data: Vec<f64>,
    dims: (usize, usize, usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, dims, device)?.to_dtype(dtype)?)
}

/// Separable bicubic resize of a (B, C, H, W) tensor to (B, C, th, tw).
/// Edge handling clamps source taps to the image border.
pub fn bicubic_resize(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    if th == 0 || tw == 0 {
        return Err(Error::Msg("resize target must be non-empty".into()));
    }
    let (src, (b, c, h, w)) = tensor_to_host(x)?;

    // Horizontal pass: (B, C, H, W) -> (B, C, H, tw).
    let cols = axis_taps(w, tw);
    let mut mid = vec![0f64; b * c * h * tw];
    for bc in 0..b * c {
        for i in 0..h {
            let row = &src[(bc * h + i) * w..(bc * h + i + 1) * w];
            let out = &mut mid[(bc * h + i) * tw..(bc * h + i + 1) * tw];
            for (o, (idx, wt)) in cols.iter().enumerate() {
                out[o] = row[idx[0]] * wt[0]
                    + row[idx[1]] * wt[1]
                    + row[idx[2]] * wt[2]
                    + row[idx[3]] * wt[3];
            }
        }
    }

    // Vertical pass: (B, C, H, tw) -> (B, C, th, tw).
    let rows = axis_taps(h, th);
    let mut dst = vec![0f64; b * c * th * tw];
    for bc in 0..b * c {
        let plane = &mid[bc * h * tw..(bc + 1) * h * tw];
        let out = &mut dst[bc * th * tw..(bc + 1) * th * tw];
        for (o, (idx, wt)) in rows.iter().enumerate() {
            for j in 0..tw {
                out[o * tw + j] = plane[idx[0] * tw + j] * wt[0]
                    + plane[idx[1] * tw + j] * wt[1]
                    + plane[idx[2] * tw + j] * wt[2]
                    + plane[idx[3] * tw + j] * wt[3];
            }
        }
    }

    host_to_tensor(dst, (b, c, th, tw), x.dtype(), x.device())
}

/// Bicubic resize for role-tagged images; the role carries over.
pub fn bicubic_resize_image(img: &ImageTensor, th: usize, tw: usize) -> Result<ImageTensor> {
    ImageTensor::new(bicubic_resize(img.tensor(), th, tw)?, img.role())
}

/// Separable Gaussian blur with edge clamping. `sigma == 0` is the identity.
/// The kernel radius is ceil(3 sigma).
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::Msg("blur sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for d in -radius..=radius {
        kernel.push((-(d as f64 * d as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= norm;
    }

    let (src, (b, c, h, w)) = tensor_to_host(x)?;
    let blur_axis = |input: &[f64], len: usize, stride: usize, lanes: usize, out: &mut [f64]| {
        // `lanes` independent 1-D signals of length `len`, each advancing by
        // `stride` between samples and starting at lane * lane_stride. For the
        // horizontal pass stride=1, for the vertical pass stride=w.
        for lane in 0..lanes {
            let base = if stride == 1 { lane * len } else { (lane / w) * (h * w) + lane % w };
            for i in 0..len {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let tap = (i as isize + k as isize - radius).clamp(0, len as isize - 1);
                    acc += input[base + tap as usize * stride] * wt;
                }
                out[base + i * stride] = acc;
            }
        }
    };

    let mut mid = vec![0f64; src.len()];
    blur_axis(&src, w, 1, b * c * h, &mut mid); // horizontal
    let mut dst = vec![0f64; src.len()];
    blur_axis(&mid, h, w, b * c * w, &mut dst); // vertical
    host_to_tensor(dst, (b, c, h, w), x.dtype(), x.device())
}

/// 2x2 mean downsample. Spatial dims must be even.
pub fn box_down2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::msg(format!(
            "box_down2 needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok(x.avg_pool2d(2)?)
}

/// Rec. 601 luma from an RGB tensor: (B, 3, H, W) -> (B, 1, H, W).
pub fn rgb_to_luma(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            what: "rgb_to_luma input",
            expected: vec![b, 3, h, w],
            got: vec![b, c, h, w],
        });
    }
    let r = x.narrow(1, 0, 1)?;
    let g = x.narrow(1, 1, 1)?;
    let b = x.narrow(1, 2, 1)?;
    Ok(((r * 0.299)? + (g * 0.587)? + (b * 0.114)?)?)
}

/// Map model range [-1, 1] to display range [0, 1], clamping overshoot.
pub fn to_unit(x: &Tensor) -> Result<Tensor> {
    Ok((((x + 1.0)? * 0.5)?).clamp(0.0, 1.0)?)
}

/// Map display range [0, 1] to model range [-1, 1].
pub fn from_unit(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 2.0)? - 1.0)?)
}

/// Snap values to the 8-bit grid used by PNG storage, so an in-memory image
/// and its save/load round trip are bit-identical.
pub fn quantize8(x: &Tensor) -> Result<Tensor> {
    let (data, dims) = tensor_to_host(x)?;
    let snapped: Vec<f64> = data
        .iter()
        .map(|v| {
            let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round();
            byte / 255.0 * 2.0 - 1.0
        })
        .collect();
    host_to_tensor(snapped, dims, x.dtype(), x.device())
}

/// Write a single [-1, 1] RGB image (batch of one) as an 8-bit PNG.
pub fn save_png(img: &ImageTensor, path: &std::path::Path) -> Result<()> {
    let (b, c, h, w) = img.dims();
    if b != 1 || c != 3 {
        return Err(Error::ShapeMismatch {
            what: "save_png input",
            expected: vec![1, 3, h, w],
            got: vec![b, c, h, w],
        });
    }
    let (data, _) = tensor_to_host(img.tensor())?;
    let mut bytes = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = data[(ch * h + i) * w + j].clamp(-1.0, 1.0);
                bytes.push(((v + 1.0) * 0.5 * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Load an RGB PNG as a batch-of-one [-1, 1] tensor with the given role.
pub fn load_png(
    path: &std::path::Path,
    role: ImageRole,
    dtype: DType,
    device: &Device,
) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0f64; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                data[(ch * h + i) * w + j] =
                    raw[(i * w + j) * 3 + ch] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    let t = host_to_tensor(data, (1, 3, h, w), dtype, device)?;
    ImageTensor::new(t, role)
}
