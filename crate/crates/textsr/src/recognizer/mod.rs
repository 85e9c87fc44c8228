//! Compact CTC text recognizer that produces the guidance matrix for the
//! denoiser, the L1 consistency loss between low- and high-resolution reads,
//! and greedy text decoding.
//!
//! The network is a small conv stack that squeezes the image to a width-wise
//! sequence, a bidirectional GRU over that sequence, and a linear class head.
//! Inputs of any size are first resampled to a fixed input resolution so LR
//! and HR images share one set of weights.

pub mod ctc;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops;
use candle_nn::{
    conv2d, linear, Conv2d, Conv2dConfig, Linear, Module, Optimizer, VarBuilder, VarMap,
};

use crate::batching::{gather_batch, shuffled_indices};
use crate::error::{Error, Result};
use crate::imageops::bicubic_resize;
use crate::init::init_weights;
use crate::types::{ImageTensor, RecognitionGuidance};

pub use ctc::{ctc_loss_mean, BLANK};

/// Character set for recognition: a distinguished blank at index 0 followed
/// by the printable symbols. Lookups fold ASCII case.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Alphabet {
    /// Lowercase letters then digits; 37 classes including the blank.
    pub fn alnum() -> Self {
        let mut chars: Vec<char> = ('a'..='z').collect();
        chars.extend('0'..='9');
        Self { chars }
    }

    /// Class count including the blank.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    /// Class index for a character, folding case. Blank is never returned.
    pub fn index_of(&self, c: char) -> Option<usize> {
        let folded = c.to_lowercase().next().unwrap_or(c);
        self.chars.iter().position(|&a| a == folded).map(|i| i + 1)
    }

    /// Character for a non-blank class index.
    pub fn char_at(&self, idx: usize) -> Option<char> {
        if idx == BLANK {
            None
        } else {
            self.chars.get(idx - 1).copied()
        }
    }

    /// Class indices for a label. Any character outside the set is an error.
    pub fn encode(&self, label: &str) -> Result<Vec<usize>> {
        label
            .chars()
            .map(|ch| {
                self.index_of(ch).ok_or(Error::OutOfAlphabet {
                    label: label.to_string(),
                    ch,
                })
            })
            .collect()
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::alnum()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RecognizerConfig {
    pub image_channels: usize,
    /// Four conv stages; each halves the height, the first two also halve
    /// the width.
    pub conv_channels: [usize; 4],
    /// Hidden size per GRU direction.
    pub gru_hidden: usize,
    /// Every input is resampled to this size before the conv stack.
    pub input_height: usize,
    pub input_width: usize,
    pub alphabet: Alphabet,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            conv_channels: [32, 64, 96, 96],
            gru_hidden: 128,
            input_height: 32,
            input_width: 128,
            alphabet: Alphabet::alnum(),
        }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.gru_hidden == 0 {
            return Err(Error::InvalidConfig(
                "recognizer channels and hidden size must be nonzero".into(),
            ));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(
                "recognizer conv channels must be nonzero".into(),
            ));
        }
        if self.input_height % 16 != 0 || self.input_height == 0 {
            return Err(Error::InvalidConfig(format!(
                "recognizer input height must be a positive multiple of 16, got {}",
                self.input_height
            )));
        }
        if self.input_width % 4 != 0 || self.input_width == 0 {
            return Err(Error::InvalidConfig(format!(
                "recognizer input width must be a positive multiple of 4, got {}",
                self.input_width
            )));
        }
        if self.alphabet.size() < 2 {
            return Err(Error::InvalidConfig(
                "alphabet must contain at least one symbol beyond the blank".into(),
            ));
        }
        Ok(())
    }

    /// Output sequence length: the width after the two width-halving stages.
    pub fn seq_len(&self) -> usize {
        self.input_width / 4
    }

    /// Feature height entering the sequence collapse.
    fn final_height(&self) -> usize {
        self.input_height / 16
    }
}

/// One GRU direction with fused gate projections.
#[derive(Debug)]
struct GruDirection {
    ih: Linear, // input  -> 3H, gate order (reset, update, candidate)
    hh: Linear, // hidden -> 3H
    hidden: usize,
}

impl GruDirection {
    fn new(input: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            ih: linear(input, 3 * hidden, vb.pp("ih"))?,
            hh: linear(hidden, 3 * hidden, vb.pp("hh"))?,
            hidden,
        })
    }

    fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gi = self.ih.forward(x)?; // (B, 3H)
        let gh = self.hh.forward(h)?;
        let hn = self.hidden;
        let r = ops::sigmoid(&(gi.narrow(1, 0, hn)? + gh.narrow(1, 0, hn)?)?)?;
        let z = ops::sigmoid(&(gi.narrow(1, hn, hn)? + gh.narrow(1, hn, hn)?)?)?;
        let n = ((gi.narrow(1, 2 * hn, hn)? + (r * gh.narrow(1, 2 * hn, hn)?)?)?).tanh()?;
        // h' = (1 - z) * n + z * h
        let keep = z.affine(-1.0, 1.0)?;
        Ok(((keep * n)? + (z * h)?)?)
    }

    fn scan(&self, xs: &Tensor, reverse: bool) -> Result<Vec<Tensor>> {
        let (b, l, _) = xs.dims3()?;
        let mut h = Tensor::zeros((b, self.hidden), xs.dtype(), xs.device())?;
        let mut out = Vec::with_capacity(l);
        for i in 0..l {
            let t = if reverse { l - 1 - i } else { i };
            let x = xs.narrow(1, t, 1)?.squeeze(1)?;
            h = self.step(&x, &h)?;
            out.push(h.clone());
        }
        if reverse {
            out.reverse();
        }
        Ok(out)
    }
}

#[derive(Debug)]
struct BiGru {
    fwd: GruDirection,
    bwd: GruDirection,
}

impl BiGru {
    fn new(input: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fwd: GruDirection::new(input, hidden, vb.pp("fwd"))?,
            bwd: GruDirection::new(input, hidden, vb.pp("bwd"))?,
        })
    }

    /// (B, L, C) -> (B, L, 2H), forward and backward states concatenated.
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let f = Tensor::stack(&self.fwd.scan(xs, false)?, 1)?;
        let b = Tensor::stack(&self.bwd.scan(xs, true)?, 1)?;
        Ok(Tensor::cat(&[&f, &b], 2)?)
    }
}

/// The recognition model. Frozen-weight inference is pure; training mutates
/// weights through the owning `VarMap`.
#[derive(Debug)]
pub struct Recognizer {
    cfg: RecognizerConfig,
    convs: Vec<Conv2d>,
    collapse: Linear,
    gru: BiGru,
    head: Linear,
}

impl Recognizer {
    pub fn new(cfg: RecognizerConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let conv_cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut convs = Vec::with_capacity(4);
        let mut c_in = cfg.image_channels;
        for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
            convs.push(conv2d(c_in, c_out, 3, conv_cfg, vb.pp(format!("conv{}", i + 1)))?);
            c_in = c_out;
        }
        let c4 = cfg.conv_channels[3];
        let collapse_in = c4 * cfg.final_height();
        let collapse = linear(collapse_in, c4, vb.pp("collapse"))?;
        let gru = BiGru::new(c4, cfg.gru_hidden, vb.pp("gru"))?;
        let head = linear(2 * cfg.gru_hidden, cfg.alphabet.size(), vb.pp("head"))?;
        Ok(Self {
            cfg,
            convs,
            collapse,
            gru,
            head,
        })
    }

    /// Fresh model with deterministic weights from `seed`.
    pub fn build(
        cfg: RecognizerConfig,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<(VarMap, Self)> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let model = Self::new(cfg, vb)?;
        init_weights(&varmap, seed, &[])?;
        Ok((varmap, model))
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.cfg
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.cfg.alphabet
    }

    /// Raw class scores, (B, L, |A|). Resamples the input to the configured
    /// resolution when necessary; channel count must match.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.image_channels {
            return Err(Error::msg(format!(
                "recognizer expects {} image channels, got {c}",
                self.cfg.image_channels
            )));
        }
        let x = if (h, w) == (self.cfg.input_height, self.cfg.input_width) {
            x.clone()
        } else {
            bicubic_resize(x, self.cfg.input_height, self.cfg.input_width)?
        };

        let mut f = x;
        for (i, conv) in self.convs.iter().enumerate() {
            f = ops::silu(&conv.forward(&f)?)?;
            // First two stages pool both axes, the rest only the height, so
            // the sequence keeps a quarter of the input width.
            f = if i < 2 {
                f.max_pool2d((2, 2))?
            } else {
                f.max_pool2d((2, 1))?
            };
        }

        // (B, C, H', L) -> (B, C*H', L) -> (B, L, C*H') -> project to C.
        let (b, c4, fh, l) = f.dims4()?;
        let seq = f
            .reshape((b, c4 * fh, l))?
            .transpose(1, 2)?
            .contiguous()?;
        let seq = ops::silu(&self.collapse.forward(&seq)?)?;
        let seq = self.gru.forward(&seq)?;
        Ok(self.head.forward(&seq)?)
    }

    /// Per-position class distributions for an image batch.
    pub fn recognize(&self, x: &ImageTensor) -> Result<RecognitionGuidance> {
        let logits = self.forward_features(x.tensor())?;
        RecognitionGuidance::new(ops::softmax(&logits, D::Minus1)?)
    }

    /// L1 distance between the reads of a paired batch, summed over positions
    /// and classes, averaged over the batch. Zero iff the reads agree.
    pub fn recog_loss(&self, lr: &ImageTensor, hr: &ImageTensor) -> Result<Tensor> {
        if lr.batch() != hr.batch() {
            return Err(Error::msg(format!(
                "paired batch sizes differ: {} vs {}",
                lr.batch(),
                hr.batch()
            )));
        }
        let a = self.recognize(lr)?;
        let b = self.recognize(hr)?;
        guidance_l1(&a, &b)
    }
}

/// Sum of absolute differences over (L, |A|), averaged over the batch.
pub fn guidance_l1(a: &RecognitionGuidance, b: &RecognitionGuidance) -> Result<Tensor> {
    if a.dims() != b.dims() {
        let (b0, l0, a0) = a.dims();
        let (b1, l1, a1) = b.dims();
        return Err(Error::ShapeMismatch {
            what: "guidance pair",
            expected: vec![b0, l0, a0],
            got: vec![b1, l1, a1],
        });
    }
    let diff = (a.tensor() - b.tensor())?.abs()?;
    Ok(diff.sum(2)?.sum(1)?.mean(0)?)
}

/// Greedy CTC decode: per-position argmax, collapse repeats, drop blanks.
pub fn decode_text(g: &RecognitionGuidance, alphabet: &Alphabet) -> Result<Vec<String>> {
    let (b, l, k) = g.dims();
    if k != alphabet.size() {
        return Err(Error::msg(format!(
            "guidance has {k} classes but the alphabet has {}",
            alphabet.size()
        )));
    }
    let host = g
        .tensor()
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut text = String::new();
        let mut prev = usize::MAX;
        for t in 0..l {
            let row = &host[(bi * l + t) * k..(bi * l + t + 1) * k];
            let mut arg = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[arg] {
                    arg = i;
                }
            }
            if arg != prev && arg != BLANK {
                text.push(alphabet.char_at(arg).expect("index checked above"));
            }
            prev = arg;
        }
        out.push(text);
    }
    Ok(out)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RecognizerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// CTC training over a labeled image set. Labels are validated against the
/// alphabet before any weight is touched. Returns per-epoch mean losses.
pub fn train_recognizer(
    model: &Recognizer,
    varmap: &VarMap,
    images: &ImageTensor,
    labels: &[String],
    cfg: &RecognizerTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let n = images.batch();
    if n == 0 {
        return Err(Error::EmptyDataset("recognizer training set".into()));
    }
    if labels.len() != n {
        return Err(Error::msg(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig(
            "recognizer training needs nonzero epochs and batch size".into(),
        ));
    }
    let encoded: Vec<Vec<usize>> = labels
        .iter()
        .map(|s| model.alphabet().encode(s))
        .collect::<Result<_>>()?;

    // Resample once up front; the per-batch forward then skips its resize.
    let rc = model.config();
    let resized = bicubic_resize(images.tensor(), rc.input_height, rc.input_width)?;

    let params = candle_nn::ParamsAdamW {
        lr: cfg.learning_rate,
        // Decay fights CTC's logit sharpening and caps attainable confidence.
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = candle_nn::AdamW::new(varmap.all_vars(), params)?;

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(n, cfg.seed, epoch as u64);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_batch(&resized, chunk)?;
            let batch_labels: Vec<Vec<usize>> =
                chunk.iter().map(|&i| encoded[i].clone()).collect();
            let logits = model.forward_features(&batch)?;
            let loss = ctc_loss_mean(&logits, &batch_labels)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::msg(format!(
                    "non-finite recognizer loss at step {step}"
                )));
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
            step += 1;
        }
        let mean = total / batches as f64;
        curve.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, rng_from_seed};
    use crate::types::ImageRole;
    use rand::Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn tiny_cfg() -> RecognizerConfig {
        RecognizerConfig {
            conv_channels: [8, 12, 16, 16],
            gru_hidden: 24,
            ..Default::default()
        }
    }

    fn random_image(shape: [usize; 4], seed: u64, role: ImageRole) -> ImageTensor {
        let mut rng = rng_from_seed(seed);
        let t = randn(&mut rng, &shape, DType::F32, &dev()).unwrap();
        ImageTensor::new(t.clamp(-1.0, 1.0).unwrap(), role).unwrap()
    }

    #[test]
    fn alphabet_layout_and_fold() {
        let a = Alphabet::alnum();
        assert_eq!(a.size(), 37);
        assert_eq!(a.index_of('a'), Some(1));
        assert_eq!(a.index_of('z'), Some(26));
        assert_eq!(a.index_of('0'), Some(27));
        assert_eq!(a.index_of('9'), Some(36));
        assert_eq!(a.index_of('A'), Some(1)); // case folds
        assert_eq!(a.index_of('é'), None);
        assert_eq!(a.char_at(BLANK), None);
        assert_eq!(a.char_at(1), Some('a'));
        assert_eq!(a.encode("Cafe9").unwrap(), vec![3, 1, 6, 5, 36]);
        match a.encode("CAFÉ") {
            Err(Error::OutOfAlphabet { label, ch }) => {
                assert_eq!(label, "CAFÉ");
                assert_eq!(ch, 'É');
            }
            other => panic!("expected out-of-alphabet error, got {other:?}"),
        }
    }

    #[test]
    fn guidance_rows_sum_to_one_for_lr_and_hr_sizes() {
        let (_vm, model) = Recognizer::build(tiny_cfg(), DType::F32, &dev(), 3).unwrap();
        for (h, w, role) in [(16, 64, ImageRole::Lr), (32, 128, ImageRole::Hr)] {
            let img = random_image([2, 3, h, w], 7, role);
            let g = model.recognize(&img).unwrap();
            assert_eq!(g.dims(), (2, tiny_cfg().seq_len(), 37));
            g.validate_rows(1e-5).unwrap();
        }
    }

    #[test]
    fn recognize_is_deterministic() {
        let (_vm, model) = Recognizer::build(tiny_cfg(), DType::F32, &dev(), 3).unwrap();
        let (_vm2, model2) = Recognizer::build(tiny_cfg(), DType::F32, &dev(), 3).unwrap();
        let img = random_image([1, 3, 16, 64], 9, ImageRole::Lr);
        let a = model.recognize(&img).unwrap();
        let b = model2.recognize(&img).unwrap();
        let diff = (a.tensor() - b.tensor())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn guidance_l1_matches_brute_force() {
        let mut rng = rng_from_seed(17);
        let (b, l, k) = (3, 5, 4);
        let mk = |rng: &mut crate::rng::SeededRng| -> (Vec<f64>, RecognitionGuidance) {
            let mut data = vec![0f64; b * l * k];
            for row in 0..b * l {
                let mut s = 0.0;
                for i in 0..k {
                    let v: f64 = rng.random_range(0.01..1.0);
                    data[row * k + i] = v;
                    s += v;
                }
                for i in 0..k {
                    data[row * k + i] /= s;
                }
            }
            let t = Tensor::from_vec(data.clone(), (b, l, k), &dev()).unwrap();
            (data, RecognitionGuidance::new(t).unwrap())
        };
        let (da, ga) = mk(&mut rng);
        let (db, gb) = mk(&mut rng);
        let loss = guidance_l1(&ga, &gb).unwrap().to_scalar::<f64>().unwrap();
        let mut expect = 0.0;
        for i in 0..b * l * k {
            expect += (da[i] - db[i]).abs();
        }
        expect /= b as f64;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn guidance_l1_forced_example_and_self_distance() {
        // Single position, two classes, opposite one-hots: distance 2.
        let a = RecognitionGuidance::new(
            Tensor::from_vec(vec![1.0f64, 0.0], (1, 1, 2), &dev()).unwrap(),
        )
        .unwrap();
        let b = RecognitionGuidance::new(
            Tensor::from_vec(vec![0.0f64, 1.0], (1, 1, 2), &dev()).unwrap(),
        )
        .unwrap();
        let d = guidance_l1(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 2.0);

        let (_vm, model) = Recognizer::build(tiny_cfg(), DType::F32, &dev(), 5).unwrap();
        let img = random_image([2, 3, 16, 64], 21, ImageRole::Lr);
        let z = model
            .recog_loss(&img, &img.clone().with_role(ImageRole::Hr))
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(z, 0.0);
    }

    fn one_hot_guidance(rows: &[usize], k: usize) -> RecognitionGuidance {
        let l = rows.len();
        let mut data = vec![0f64; l * k];
        for (t, &c) in rows.iter().enumerate() {
            data[t * k + c] = 1.0;
        }
        RecognitionGuidance::new(Tensor::from_vec(data, (1, l, k), &dev()).unwrap()).unwrap()
    }

    #[test]
    fn decode_collapses_repeats_and_blanks() {
        let a = Alphabet::alnum();
        let idx = |c: char| a.index_of(c).unwrap();
        // h e _ l l l _ l o  ->  "hello"
        let rows = vec![
            idx('h'),
            idx('e'),
            BLANK,
            idx('l'),
            idx('l'),
            idx('l'),
            BLANK,
            idx('l'),
            idx('o'),
        ];
        let g = one_hot_guidance(&rows, a.size());
        assert_eq!(decode_text(&g, &a).unwrap(), vec!["hello".to_string()]);

        let blank_rows = vec![BLANK; 6];
        let g = one_hot_guidance(&blank_rows, a.size());
        assert_eq!(decode_text(&g, &a).unwrap(), vec![String::new()]);
    }

    #[test]
    fn decode_matches_independent_oracle() {
        // Re-derives the collapse rules from scratch and cross-checks 1000
        // random probability matrices.
        let a = Alphabet::alnum();
        let k = a.size();
        let mut rng = rng_from_seed(99);
        for case in 0..1000 {
            let l = rng.random_range(1..=12);
            let mut data = vec![0f64; l * k];
            for row in 0..l {
                let mut s = 0.0;
                for i in 0..k {
                    let v: f64 = rng.random_range(0.0..1.0);
                    data[row * k + i] = v;
                    s += v;
                }
                for i in 0..k {
                    data[row * k + i] /= s;
                }
            }
            let g = RecognitionGuidance::new(
                Tensor::from_vec(data.clone(), (1, l, k), &dev()).unwrap(),
            )
            .unwrap();
            let got = decode_text(&g, &a).unwrap().remove(0);

            // Oracle: explicit first-max scan, then pairwise walk that emits
            // a character only when it differs from its predecessor frame.
            let mut args = Vec::with_capacity(l);
            for row in 0..l {
                let slice = &data[row * k..(row + 1) * k];
                let mut best = 0usize;
                for i in 1..k {
                    if slice[i] > slice[best] {
                        best = i;
                    }
                }
                args.push(best);
            }
            let mut expect = String::new();
            for (i, &cls) in args.iter().enumerate() {
                if cls == BLANK {
                    continue;
                }
                if i > 0 && args[i - 1] == cls {
                    continue;
                }
                expect.push(a.char_at(cls).unwrap());
            }
            assert_eq!(got, expect, "case {case} args {args:?}");
        }
    }

    #[test]
    fn decode_is_per_sample_pure() {
        let (_vm, model) = Recognizer::build(tiny_cfg(), DType::F32, &dev(), 11).unwrap();
        let img = random_image([4, 3, 16, 64], 31, ImageRole::Lr);
        let texts = decode_text(&model.recognize(&img).unwrap(), model.alphabet()).unwrap();
        // Reverse the batch; the per-sample outputs must follow the rows.
        let rev: Vec<u32> = (0..4u32).rev().collect();
        let rev_idx = Tensor::from_vec(rev, (4,), &dev()).unwrap();
        let shuffled = ImageTensor::new(
            img.tensor().index_select(&rev_idx, 0).unwrap(),
            ImageRole::Lr,
        )
        .unwrap();
        let texts_rev =
            decode_text(&model.recognize(&shuffled).unwrap(), model.alphabet()).unwrap();
        let mut expect = texts.clone();
        expect.reverse();
        assert_eq!(texts_rev, expect);
    }

    #[test]
    fn training_rejects_bad_labels_before_touching_weights() {
        let (vm, model) = Recognizer::build(tiny_cfg(), DType::F32, &dev(), 13).unwrap();
        let img = random_image([1, 3, 32, 128], 41, ImageRole::Hr);
        let cfg = RecognizerTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let err = train_recognizer(
            &model,
            &vm,
            &img,
            &["CAFÉ".to_string()],
            &cfg,
            |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::OutOfAlphabet { .. }), "{err}");

        let empty = ImageTensor::new(
            Tensor::zeros((0, 3, 32, 128), DType::F32, &dev()).unwrap(),
            ImageRole::Hr,
        )
        .unwrap();
        assert!(train_recognizer(&model, &vm, &empty, &[], &cfg, |_, _| {}).is_err());
    }

    #[test]
    fn overfits_a_single_labeled_image() {
        // A short sequence head keeps the blank-dominated plateau brief.
        let cfg16 = RecognizerConfig {
            conv_channels: [8, 12, 16, 16],
            gru_hidden: 24,
            input_width: 64,
            ..Default::default()
        };
        let (vm, model) = Recognizer::build(cfg16, DType::F32, &dev(), 17).unwrap();
        let img = random_image([1, 3, 32, 128], 43, ImageRole::Hr);
        let cfg = RecognizerTrainConfig {
            epochs: 700,
            batch_size: 1,
            learning_rate: 5e-3,
            seed: 2,
        };
        let curve =
            train_recognizer(&model, &vm, &img, &["ab3".to_string()], &cfg, |_, _| {}).unwrap();
        assert!(
            curve.last().unwrap() < &0.1,
            "loss stayed at {}",
            curve.last().unwrap()
        );
        let texts = decode_text(&model.recognize(&img).unwrap(), model.alphabet()).unwrap();
        assert_eq!(texts, vec!["ab3".to_string()]);
        // The loss curve must trend down overall.
        assert!(curve.first().unwrap() > curve.last().unwrap());
    }
}
