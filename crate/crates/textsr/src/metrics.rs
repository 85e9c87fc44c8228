//! Image fidelity and recognition metrics, and the evaluation harness that
//! scores a super-resolver plus text reader over a paired corpus.
//!
//! PSNR is computed jointly over RGB in the [0, 1] domain; SSIM on the
//! Rec.601 grayscale with the standard 11x11 Gaussian window (sigma 1.5,
//! K1 0.01, K2 0.03) averaged over valid window positions only. Both are
//! evaluated in f64 on the host so they can be checked against brute-force
//! oracles to tight tolerances.

use std::fmt;

use crate::error::{Error, Result};
use crate::imageops::tensor_to_host;
use crate::manifest::{Difficulty, PairedSample};
use crate::pipeline::{SuperResolver, TextReader};
use crate::types::ImageTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Identical images report this instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same_dims(a: &ImageTensor, b: &ImageTensor, what: &'static str) -> Result<()> {
    let (ab, ac, ah, aw) = a.dims();
    let (bb, bc, bh, bw) = b.dims();
    if (ab, ac, ah, aw) != (bb, bc, bh, bw) {
        return Err(Error::ShapeMismatch {
            what,
            expected: vec![ab, ac, ah, aw],
            got: vec![bb, bc, bh, bw],
        });
    }
    Ok(())
}

/// Values rescaled from the internal [-1, 1] convention to [0, 1].
fn unit_host(img: &ImageTensor) -> Result<Vec<f64>> {
    let (v, _) = tensor_to_host(img.tensor())?;
    Ok(v.iter().map(|x| (x + 1.0) * 0.5).collect())
}

/// Peak signal-to-noise ratio in dB over all channels jointly, capped at
/// [`PSNR_CAP_DB`]. Symmetric in its arguments.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_dims(a, b, "psnr operands")?;
    let av = unit_host(a)?;
    let bv = unit_host(b)?;
    let mse = av
        .iter()
        .zip(&bv)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / av.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Rec.601 grayscale planes in [0, 1], one `h*w` vector per batch element.
fn luma_planes(img: &ImageTensor) -> Result<Vec<Vec<f64>>> {
    let (b, c, h, w) = img.dims();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            what: "ssim operand channels",
            expected: vec![3],
            got: vec![c],
        });
    }
    let v = unit_host(img)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let base = i * 3 * plane;
        let (r, g, bl) = (base, base + plane, base + 2 * plane);
        out.push(
            (0..plane)
                .map(|p| 0.299 * v[r + p] + 0.587 * v[g + p] + 0.114 * v[bl + p])
                .collect(),
        );
    }
    Ok(out)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    for v in &mut g {
        *v /= s;
    }
    g
}

/// Structural similarity on grayscale, mean over all valid 11x11 window
/// positions and batch elements. Errors when the image is smaller than the
/// window. Symmetric in its arguments; identical images score exactly 1.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_dims(a, b, "ssim operands")?;
    let (_bn, _c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::msg(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let xs = luma_planes(a)?;
    let ys = luma_planes(b)?;
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in xs.iter().zip(&ys) {
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = g[dy] * g[dx];
                        let xv = x[(oy + dy) * w + ox + dx];
                        let yv = y[(oy + dy) * w + ox + dx];
                        mx += wgt * xv;
                        my += wgt * yv;
                        mxx += wgt * xv * xv;
                        myy += wgt * yv * yv;
                        // Parenthesized so the metric is bit-symmetric.
                        mxy += wgt * (xv * yv);
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Case-folds and strips everything that is not a letter or digit, so
/// "Hello!" and "hello" compare equal.
pub fn normalize_label(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Fraction of predictions that exactly match the ground truth after
/// [`normalize_label`] on both sides.
pub fn recognition_accuracy(pred: &[String], gt: &[String]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::msg(format!(
            "accuracy needs equal-length lists, got {} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset("recognition accuracy".into()));
    }
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| normalize_label(p) == normalize_label(g))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// One evaluated sample, in corpus order.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: usize,
    pub split: String,
    pub psnr: f64,
    pub ssim: f64,
    pub pred: String,
    pub gt: String,
    pub matched: bool,
}

/// Aggregates for one difficulty split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitStats {
    pub n: usize,
    pub accuracy: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

/// Scores grouped by difficulty, plus a pair-count-weighted average row
/// and the per-sample rows behind them.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub splits: Vec<(String, SplitStats)>,
    pub average: SplitStats,
    pub rows: Vec<EvalRow>,
}

fn stats_for(rows: &[&EvalRow]) -> SplitStats {
    let n = rows.len();
    let inv = 1.0 / n as f64;
    SplitStats {
        n,
        accuracy: rows.iter().filter(|r| r.matched).count() as f64 * inv,
        psnr_mean: rows.iter().map(|r| r.psnr).sum::<f64>() * inv,
        ssim_mean: rows.iter().map(|r| r.ssim).sum::<f64>() * inv,
    }
}

/// Runs the resolver over every pair, reads text off the SR output, and
/// aggregates fidelity plus recognition accuracy per difficulty split.
///
/// The average row is the pair-count-weighted mean of the split rows —
/// exactly, so disjoint splits account for the whole gap to the total.
/// Pairs without difficulty tags collapse the report to a single "all"
/// split (with a warning on stderr). An empty corpus is an error.
pub fn evaluate(
    resolver: &dyn SuperResolver,
    reader: &dyn TextReader,
    samples: &[PairedSample],
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let untagged = samples
        .iter()
        .any(|s| s.difficulty == Difficulty::Unknown);
    if untagged {
        eprintln!("warning: difficulty tags missing; reporting a single split");
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (id, s) in samples.iter().enumerate() {
        let sr = resolver.super_resolve(&s.lr, seed.wrapping_add(id as u64))?;
        let pred = reader
            .read_text(&sr)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::msg("text reader returned no prediction"))?;
        let matched = normalize_label(&pred) == normalize_label(&s.label);
        rows.push(EvalRow {
            id,
            split: if untagged {
                "all".to_string()
            } else {
                s.difficulty.to_string()
            },
            psnr: psnr(&sr, &s.hr)?,
            ssim: ssim(&sr, &s.hr)?,
            pred,
            gt: s.label.clone(),
            matched,
        });
    }

    let split_names: Vec<String> = if untagged {
        vec!["all".to_string()]
    } else {
        [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard]
            .iter()
            .map(|d| d.to_string())
            .filter(|name| rows.iter().any(|r| &r.split == name))
            .collect()
    };
    let splits: Vec<(String, SplitStats)> = split_names
        .into_iter()
        .map(|name| {
            let rs: Vec<&EvalRow> = rows.iter().filter(|r| r.split == name).collect();
            let st = stats_for(&rs);
            (name, st)
        })
        .collect();

    // Weighted recombination of the split rows, not a fresh pass over the
    // samples: the report promises these are consistent by construction.
    let n: usize = splits.iter().map(|(_, s)| s.n).sum();
    let inv = 1.0 / n as f64;
    let wsum = |f: fn(&SplitStats) -> f64| -> f64 {
        splits.iter().map(|(_, s)| s.n as f64 * f(s)).sum::<f64>() * inv
    };
    let average = SplitStats {
        n,
        accuracy: wsum(|s| s.accuracy),
        psnr_mean: wsum(|s| s.psnr_mean),
        ssim_mean: wsum(|s| s.ssim_mean),
    };
    Ok(EvalReport {
        splits,
        average,
        rows,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    /// Per-sample rows as CSV, header `id,split,psnr,ssim,pred,gt,match`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,split,psnr,ssim,pred,gt,match\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{}\n",
                r.id,
                r.split,
                r.psnr,
                r.ssim,
                csv_field(&r.pred),
                csv_field(&r.gt),
                r.matched
            ));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>6} {:>9} {:>9} {:>7}",
            "split", "n", "accuracy", "psnr", "ssim"
        )?;
        for (name, s) in &self.splits {
            writeln!(
                f,
                "{:<8} {:>6} {:>9.4} {:>9.2} {:>7.4}",
                name, s.n, s.accuracy, s.psnr_mean, s.ssim_mean
            )?;
        }
        write!(
            f,
            "{:<8} {:>6} {:>9.4} {:>9.2} {:>7.4}",
            "average", self.average.n, self.average.accuracy, self.average.psnr_mean,
            self.average.ssim_mean
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::BicubicUpsampler;
    use crate::rng::{rand_uniform, rng_for};
    use crate::types::ImageRole;
    use candle_core::{DType, Device, Tensor};
    use std::cell::Cell;

    fn img(data: Vec<f64>, c: usize, h: usize, w: usize, role: ImageRole) -> ImageTensor {
        let t = Tensor::from_vec(data, (1, c, h, w), &Device::Cpu).unwrap();
        ImageTensor::new(t, role).unwrap()
    }

    fn rand_img(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = rng_for(seed, "metrics-test");
        let t = rand_uniform(&mut rng, -1.0, 1.0, &[1, 3, h, w], DType::F64, &Device::Cpu).unwrap();
        ImageTensor::new(t, ImageRole::Hr).unwrap()
    }

    #[test]
    fn psnr_matches_direct_formula_and_caps() {
        let a = rand_img(8, 8, 1);
        let b = rand_img(8, 8, 2);
        let (av, _) = tensor_to_host(a.tensor()).unwrap();
        let (bv, _) = tensor_to_host(b.tensor()).unwrap();
        // Direct formula in the unit domain.
        let mse = av
            .iter()
            .zip(&bv)
            .map(|(x, y)| ((x - y) * 0.5) * ((x - y) * 0.5))
            .sum::<f64>()
            / av.len() as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        let got = psnr(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_is_symmetric_and_checks_shapes() {
        let a = rand_img(8, 8, 3);
        let b = rand_img(8, 8, 4);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let c = rand_img(8, 10, 5);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_is_one_for_identical_and_symmetric() {
        let a = rand_img(12, 16, 6);
        let b = rand_img(12, 16, 7);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        assert!(s < 1.0 && s > -1.0);
    }

    #[test]
    fn ssim_matches_constant_image_closed_form() {
        // Constant images: variances vanish, means survive. Internal values
        // -0.4 and 0.4 are 0.3 and 0.7 in the unit domain; luma of a gray
        // pixel is the pixel.
        let a = img(vec![-0.4; 3 * 121], 3, 11, 11, ImageRole::Hr);
        let b = img(vec![0.4; 3 * 121], 3, 11, 11, ImageRole::Hr);
        let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
        let expect = ((2.0 * 0.3 * 0.7 + c1) * c2) / ((0.3 * 0.3 + 0.7 * 0.7 + c1) * c2);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let a = rand_img(10, 16, 8);
        let b = rand_img(10, 16, 9);
        assert!(ssim(&a, &b).is_err());
        let a = rand_img(16, 10, 8);
        let b = rand_img(16, 10, 9);
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let a = rand_img(16, 32, 10);
        let mut rng = rng_for(11, "metrics-noise");
        let noise =
            rand_uniform(&mut rng, -0.3, 0.3, &[1, 3, 16, 32], DType::F64, &Device::Cpu).unwrap();
        let b = ImageTensor::new((a.tensor() + &noise).unwrap(), ImageRole::Sr).unwrap();
        assert!(ssim(&a, &b).unwrap() < ssim(&a, &a).unwrap());
    }

    #[test]
    fn accuracy_normalizes_case_and_punctuation() {
        let p = vec!["Hello!".to_string()];
        let g = vec!["hello".to_string()];
        assert_eq!(recognition_accuracy(&p, &g).unwrap(), 1.0);
        let p = vec!["hello".to_string(), "cat".to_string()];
        let g = vec!["hello".to_string(), "dog".to_string()];
        assert_eq!(recognition_accuracy(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_rejects_mismatched_or_empty_lists() {
        let p = vec!["a".to_string()];
        assert!(recognition_accuracy(&p, &[]).is_err());
        assert!(recognition_accuracy(&[], &[]).is_err());
    }

    /// Reader that replays scripted predictions in call order.
    struct Scripted {
        answers: Vec<String>,
        at: Cell<usize>,
    }

    impl TextReader for Scripted {
        fn read_text(&self, _images: &ImageTensor) -> crate::Result<Vec<String>> {
            let i = self.at.get();
            self.at.set(i + 1);
            Ok(vec![self.answers[i].clone()])
        }
    }

    fn sample(h: usize, w: usize, label: &str, d: Difficulty, seed: u64) -> PairedSample {
        let mut rng = rng_for(seed, "metrics-pairs");
        let dev = Device::Cpu;
        let lr = rand_uniform(&mut rng, -1.0, 1.0, &[1, 3, h, w], DType::F64, &dev).unwrap();
        let hr =
            rand_uniform(&mut rng, -1.0, 1.0, &[1, 3, 2 * h, 2 * w], DType::F64, &dev).unwrap();
        PairedSample::new(
            ImageTensor::new(lr, ImageRole::Lr).unwrap(),
            ImageTensor::new(hr, ImageRole::Hr).unwrap(),
            label.to_string(),
            d,
        )
        .unwrap()
    }

    #[test]
    fn evaluate_groups_by_split_and_weights_the_average_exactly() {
        let samples = vec![
            sample(8, 8, "one", Difficulty::Easy, 1),
            sample(8, 8, "two", Difficulty::Easy, 2),
            sample(8, 8, "three", Difficulty::Medium, 3),
            sample(8, 8, "four", Difficulty::Hard, 4),
        ];
        let reader = Scripted {
            answers: vec!["one".into(), "TWO!".into(), "x".into(), "four".into()],
            at: Cell::new(0),
        };
        let rep = evaluate(&BicubicUpsampler, &reader, &samples, 0).unwrap();
        assert_eq!(rep.rows.len(), 4);
        let names: Vec<&str> = rep.splits.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["easy", "medium", "hard"]);
        assert_eq!(rep.splits[0].1.n, 2);
        assert_eq!(rep.splits[0].1.accuracy, 1.0);
        assert_eq!(rep.splits[1].1.accuracy, 0.0);
        assert_eq!(rep.splits[2].1.accuracy, 1.0);
        // The weighted identity, exactly as the report computes it.
        let n_total: usize = rep.splits.iter().map(|(_, s)| s.n).sum();
        let expect = rep
            .splits
            .iter()
            .map(|(_, s)| s.n as f64 * s.accuracy)
            .sum::<f64>()
            / n_total as f64;
        assert_eq!(rep.average.accuracy, expect);
        assert_eq!(rep.average.n, 4);
    }

    #[test]
    fn evaluate_collapses_untagged_corpora_to_one_split() {
        let samples = vec![
            sample(8, 8, "a", Difficulty::Unknown, 5),
            sample(8, 8, "b", Difficulty::Easy, 6),
        ];
        let reader = Scripted {
            answers: vec!["a".into(), "b".into()],
            at: Cell::new(0),
        };
        let rep = evaluate(&BicubicUpsampler, &reader, &samples, 0).unwrap();
        assert_eq!(rep.splits.len(), 1);
        assert_eq!(rep.splits[0].0, "all");
        assert_eq!(rep.average.accuracy, 1.0);
    }

    #[test]
    fn evaluate_rejects_an_empty_corpus() {
        let reader = Scripted {
            answers: vec![],
            at: Cell::new(0),
        };
        assert!(matches!(
            evaluate(&BicubicUpsampler, &reader, &[], 0),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn csv_has_the_contract_header_and_escapes_fields() {
        let samples = vec![sample(8, 8, "he,llo", Difficulty::Easy, 7)];
        let reader = Scripted {
            answers: vec!["he\"llo".into()],
            at: Cell::new(0),
        };
        let rep = evaluate(&BicubicUpsampler, &reader, &samples, 0).unwrap();
        let csv = rep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "id,split,psnr,ssim,pred,gt,match");
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,easy,"));
        assert!(row.contains("\"he\"\"llo\""));
        assert!(row.contains("\"he,llo\""));
        assert!(row.ends_with(",true"));
        let table = rep.to_string();
        assert!(table.contains("average"));
    }
}
