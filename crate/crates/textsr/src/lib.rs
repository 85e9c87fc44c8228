//! Recognition-guided latent diffusion for scene-text image super-resolution.
//!
//! The crate turns a low-resolution crop of printed or scene text into a 2x
//! higher-resolution image by running a conditional diffusion model in the
//! latent space of a small convolutional autoencoder. A CTC text recognizer
//! reads the low-resolution input and its per-frame character distributions
//! steer the denoiser through cross-attention, so the sampler is pulled
//! toward images that spell the same string.
//!
//! Module map:
//! - [`schedule`]: variance schedules, forward diffusion, DDPM/DDIM samplers
//! - [`unet`]: the guided U-Net noise predictor
//! - [`codec`]: the latent autoencoder (optional vector quantization)
//! - [`recognizer`]: CTC recognizer, guidance extraction, text decoding
//! - [`pipeline`]: training loops and end-to-end super-resolution
//! - [`metrics`]: PSNR / SSIM / recognition accuracy and batch evaluation
//! - [`synth`]: deterministic synthetic text-crop corpus generation
//! - [`cli`]: the `textsr` command-line surface
//!
//! The [book](https://rust-lang.github.io/mdBook/) under `book/` walks
//! through the same modules with runnable examples; its snippets compile as
//! doc-tests of this crate.

pub mod batching;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod imageops;
pub mod init;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod recognizer;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod types;
pub mod unet;

pub use error::{Error, Result};

// Every fenced Rust block in the guide compiles and runs with the test
// suite, so the book cannot drift from the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(overview, "../../../book/src/overview.md");
    chapter!(schedules, "../../../book/src/schedules.md");
    chapter!(samplers, "../../../book/src/samplers.md");
    chapter!(codec, "../../../book/src/codec.md");
    chapter!(recognizer, "../../../book/src/recognizer.md");
    chapter!(denoiser, "../../../book/src/denoiser.md");
    chapter!(data, "../../../book/src/data.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
}
