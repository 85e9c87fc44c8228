//! Domain tensor types shared across the pipeline.
//!
//! Everything that flows between modules is a rank-4 image/latent tensor or a
//! rank-3 guidance matrix. The newtypes here pin the layout conventions once
//! ((B, C, H, W) for images and latents, (B, L, A) for guidance) so shape
//! errors surface at module boundaries instead of deep inside a forward pass.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// What an image tensor holds. Purely informational; used in diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageRole {
    Lr,
    Hr,
    Sr,
}

impl std::fmt::Display for ImageRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ImageRole::Lr => write!(f, "LR"),
            ImageRole::Hr => write!(f, "HR"),
            ImageRole::Sr => write!(f, "SR"),
        }
    }
}

/// An image batch: (B, C, H, W), values in [-1, 1].
#[derive(Debug, Clone)]
pub struct ImageTensor {
    data: Tensor,
    role: ImageRole,
}

impl ImageTensor {
    pub fn new(data: Tensor, role: ImageRole) -> Result<Self> {
        if data.dims().len() != 4 {
            return Err(Error::ShapeMismatch {
                what: "ImageTensor expects rank 4 (B, C, H, W)",
                expected: vec![4],
                got: data.dims().to_vec(),
            });
        }
        Ok(Self { data, role })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn role(&self) -> ImageRole {
        self.role
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// (H, W).
    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.dims();
        (h, w)
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    /// Re-tags the role without touching the data.
    pub fn with_role(self, role: ImageRole) -> Self {
        Self { data: self.data, role }
    }
}

/// A latent batch: (B, C_z, H, W). Spatial dims match the LR image.
#[derive(Debug, Clone)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.dims().len() != 4 {
            return Err(Error::ShapeMismatch {
                what: "LatentTensor expects rank 4 (B, C, H, W)",
                expected: vec![4],
                got: data.dims().to_vec(),
            });
        }
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.dims();
        (h, w)
    }

    pub fn shape_matches(&self, other: &LatentTensor) -> bool {
        self.0.dims() == other.0.dims()
    }
}

/// Per-position class-probability matrix produced by the recognizer:
/// (B, L, A) with each row a distribution over the alphabet.
#[derive(Debug, Clone)]
pub struct RecognitionGuidance(Tensor);

impl RecognitionGuidance {
    /// Wraps a probability tensor. Row normalization is the producer's
    /// contract (softmax outputs satisfy it); `validate_rows` checks it
    /// explicitly where a test or boundary needs the guarantee.
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.dims().len() != 3 {
            return Err(Error::ShapeMismatch {
                what: "RecognitionGuidance expects rank 3 (B, L, A)",
                expected: vec![3],
                got: probs.dims().to_vec(),
            });
        }
        Ok(Self(probs))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }

    pub fn seq_len(&self) -> usize {
        self.dims().1
    }

    pub fn alphabet_size(&self) -> usize {
        self.dims().2
    }

    /// Checks that every row sums to 1 within `tol`.
    pub fn validate_rows(&self, tol: f64) -> Result<()> {
        let sums = self
            .0
            .to_dtype(candle_core::DType::F64)?
            .sum(candle_core::D::Minus1)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        for (i, s) in sums.iter().enumerate() {
            if (s - 1.0).abs() > tol {
                return Err(Error::msg(format!(
                    "guidance row {i} sums to {s}, expected 1 within {tol}"
                )));
            }
        }
        Ok(())
    }
}
