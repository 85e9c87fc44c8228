//! The `textsr` command-line surface: one thin dispatcher that binds the
//! corpus generator, the three trainers, the sampler, and the evaluator.
//!
//! Logging (effective config, seed, progress) goes to stderr; command
//! payloads (CSV, tables, recognized text) go to stdout; every file artifact
//! lands under `--checkpoint-dir`. Re-running a command with identical
//! config and seed reproduces identical artifacts byte for byte.

use std::path::PathBuf;

use candle_core::{DType, Device};
use candle_nn::VarMap;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::codec::{train_codec, LatentCodec};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imageops::{load_png, save_png};
use crate::manifest::{load_manifest, split_samples, stack_samples, write_corpus, PairedSample};
use crate::metrics::{evaluate, recognition_accuracy};
use crate::pipeline::{
    super_resolve, train_diffusion, BicubicUpsampler, DiffusionSr, TextReader,
};
use crate::recognizer::{train_recognizer, Recognizer};
use crate::synth::generate_synthetic;
use crate::types::ImageRole;
use crate::unet::{layout, GuidedUNet, GuidedUNetConfig};

const DT: DType = DType::F32;

const USAGE: &str = "\
textsr — recognition-guided latent diffusion for text image super-resolution

USAGE: textsr <COMMAND> [FLAGS]

COMMANDS:
  synth             generate a synthetic paired corpus (train + holdout)
  train-codec       train the latent autoencoder on corpus HR images
  train-recognizer  train the text recognizer (CTC) on corpus HR images
  train-diffusion   train the guided denoiser, fine-tuning the recognizer
  sample            super-resolve LR images from a manifest to PNG files
  eval              score a resolver on a manifest (PSNR / SSIM / accuracy)
  recognize         read text from PNG files or from a manifest's LR side
  inspect-schedule  print the noise schedule as CSV on stdout
  count-params      report denoiser parameter counts by guidance placement
  help              show this text

GLOBAL FLAGS:
  --config <preset|file>  preset name (default, paper, desk) or a path to a
                          `key = value` file; file keys are applied on top
                          of the default preset
  --set <key=value>       override one config key; repeatable; applied after
                          the config file, so --set always takes precedence
  --seed <u64>            run seed; when omitted a random seed is drawn and
                          echoed so the run can be reproduced
  --checkpoint-dir <dir>  where checkpoints and outputs live (default: runs)

COMMAND FLAGS:
  --data <manifest>       JSONL manifest; defaults to the corpus written by
                          `synth` (train split for trainers, holdout split
                          for sample/eval/recognize)
  --resolver <name>       eval: `diffusion` (default) or `bicubic`
  --limit <n>             sample/eval: use only the first n pairs
  [files...]              recognize: PNG files as positional arguments

EXIT CODES: 0 success; 2 unknown command or flag (this text); 1 otherwise.";

/// Entry point for the `textsr` binary. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    dispatch(&args)
}

struct Invocation {
    command: String,
    config_spec: String,
    seed: Option<u64>,
    checkpoint_dir: PathBuf,
    overrides: Vec<(String, String)>,
    data: Option<PathBuf>,
    resolver: String,
    limit: Option<usize>,
    inputs: Vec<PathBuf>,
}

enum ParseOutcome {
    Run(Box<Invocation>),
    Help,
    /// Unknown command/flag or missing value: usage text, exit 2.
    Usage(String),
    /// Parseable shape but a bad value: one-line diagnostic, exit 1.
    Bad(String),
}

fn parse_args(args: &[String]) -> ParseOutcome {
    let mut it = args.iter();
    let command = match it.next() {
        None => return ParseOutcome::Usage("missing command".into()),
        Some(c) => c.clone(),
    };
    if command == "help" || command == "--help" || command == "-h" {
        return ParseOutcome::Help;
    }
    const COMMANDS: [&str; 9] = [
        "synth",
        "train-codec",
        "train-recognizer",
        "train-diffusion",
        "sample",
        "eval",
        "recognize",
        "inspect-schedule",
        "count-params",
    ];
    if !COMMANDS.contains(&command.as_str()) {
        return ParseOutcome::Usage(format!("unknown command '{command}'"));
    }
    let mut inv = Invocation {
        command,
        config_spec: "default".into(),
        seed: None,
        checkpoint_dir: PathBuf::from("runs"),
        overrides: vec![],
        data: None,
        resolver: "diffusion".into(),
        limit: None,
        inputs: vec![],
    };
    while let Some(arg) = it.next() {
        let mut value = |flag: &str| -> std::result::Result<String, ParseOutcome> {
            it.next()
                .cloned()
                .ok_or_else(|| ParseOutcome::Usage(format!("flag {flag} needs a value")))
        };
        match arg.as_str() {
            "--config" => match value("--config") {
                Ok(v) => inv.config_spec = v,
                Err(o) => return o,
            },
            "--seed" => match value("--seed") {
                Ok(v) => match v.parse() {
                    Ok(s) => inv.seed = Some(s),
                    Err(_) => return ParseOutcome::Bad(format!("--seed: not a u64: '{v}'")),
                },
                Err(o) => return o,
            },
            "--checkpoint-dir" => match value("--checkpoint-dir") {
                Ok(v) => inv.checkpoint_dir = PathBuf::from(v),
                Err(o) => return o,
            },
            "--set" => match value("--set") {
                Ok(v) => match v.split_once('=') {
                    Some((k, val)) => inv
                        .overrides
                        .push((k.trim().to_string(), val.trim().to_string())),
                    None => {
                        return ParseOutcome::Bad(format!("--set expects key=value, got '{v}'"))
                    }
                },
                Err(o) => return o,
            },
            "--data" => match value("--data") {
                Ok(v) => inv.data = Some(PathBuf::from(v)),
                Err(o) => return o,
            },
            "--resolver" => match value("--resolver") {
                Ok(v) => inv.resolver = v,
                Err(o) => return o,
            },
            "--limit" => match value("--limit") {
                Ok(v) => match v.parse() {
                    Ok(n) => inv.limit = Some(n),
                    Err(_) => return ParseOutcome::Bad(format!("--limit: not a count: '{v}'")),
                },
                Err(o) => return o,
            },
            other if other.starts_with('-') => {
                return ParseOutcome::Usage(format!("unknown flag '{other}'"))
            }
            other => inv.inputs.push(PathBuf::from(other)),
        }
    }
    ParseOutcome::Run(Box::new(inv))
}

/// Parses and runs one command line (without the program name).
pub fn dispatch(args: &[String]) -> i32 {
    let inv = match parse_args(args) {
        ParseOutcome::Run(inv) => inv,
        ParseOutcome::Help => {
            println!("{USAGE}");
            return 0;
        }
        ParseOutcome::Usage(msg) => {
            eprintln!("error: {msg}\n{USAGE}");
            return 2;
        }
        ParseOutcome::Bad(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    match execute(&inv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(inv: &Invocation) -> Result<()> {
    let mut cfg = RunConfig::load(&inv.config_spec)?;
    cfg.apply_overrides(&inv.overrides)?;
    cfg.validate()?;
    let seed = inv.seed.unwrap_or_else(rand::random::<u64>);
    // The effective settings every run is reproducible from.
    eprintln!("seed: {seed}");
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    let ctx = Ctx {
        cfg,
        seed,
        dir: inv.checkpoint_dir.clone(),
        device: Device::Cpu,
    };
    match inv.command.as_str() {
        "synth" => cmd_synth(&ctx),
        "train-codec" => cmd_train_codec(&ctx, inv),
        "train-recognizer" => cmd_train_recognizer(&ctx, inv),
        "train-diffusion" => cmd_train_diffusion(&ctx, inv),
        "sample" => cmd_sample(&ctx, inv),
        "eval" => cmd_eval(&ctx, inv),
        "recognize" => cmd_recognize(&ctx, inv),
        "inspect-schedule" => cmd_inspect_schedule(&ctx),
        "count-params" => cmd_count_params(&ctx),
        _ => unreachable!("command validated during parsing"),
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    dir: PathBuf,
    device: Device,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn manifest(&self, inv: &Invocation, split: &str) -> PathBuf {
        inv.data
            .clone()
            .unwrap_or_else(|| self.dir.join(format!("corpus/{split}/manifest.jsonl")))
    }

    fn load_pairs(&self, inv: &Invocation, split: &str) -> Result<Vec<PairedSample>> {
        let path = self.manifest(inv, split);
        let mut samples = load_manifest(&path, DT, &self.device)?;
        if let Some(n) = inv.limit {
            samples.truncate(n);
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no usable pairs in {}",
                path.display()
            )));
        }
        Ok(samples)
    }

    fn load_codec(&self) -> Result<LatentCodec> {
        let (vm, codec) = LatentCodec::build(self.cfg.codec.clone(), DT, &self.device, 0)?;
        load_checkpoint(&self.path("codec.ckpt"), "codec", &vm)?;
        Ok(codec)
    }

    fn load_recognizer(&self, file: &str) -> Result<(VarMap, Recognizer)> {
        let (vm, model) = Recognizer::build(self.cfg.recognizer.clone(), DT, &self.device, 0)?;
        load_checkpoint(&self.path(file), "recognizer", &vm)?;
        Ok((vm, model))
    }

    /// The guidance recognizer: fine-tuned weights when diffusion training
    /// has produced them, the pre-trained ones otherwise.
    fn load_guidance_recognizer(&self) -> Result<Recognizer> {
        let tuned = self.path("recognizer-tuned.ckpt");
        let file = if tuned.exists() {
            "recognizer-tuned.ckpt"
        } else {
            eprintln!("note: no fine-tuned recognizer found, using the pre-trained one");
            "recognizer.ckpt"
        };
        Ok(self.load_recognizer(file)?.1)
    }

    fn load_unet(&self) -> Result<GuidedUNet> {
        let (vm, unet) = GuidedUNet::build(self.cfg.unet.clone(), DT, &self.device, 0)?;
        load_checkpoint(&self.path("unet.ckpt"), "unet", &vm)?;
        Ok(unet)
    }
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let s = &ctx.cfg.synth;
    let samples = generate_synthetic(
        s.count,
        &ctx.cfg.recognizer.alphabet,
        (s.min_len, s.max_len),
        &s.degradation,
        ctx.seed,
        DT,
        &ctx.device,
    )?;
    let (train, holdout) = split_samples(samples, s.holdout, ctx.seed)?;
    let train_manifest = write_corpus(&train, &ctx.path("corpus/train"))?;
    println!("train: {} pairs at {}", train.len(), train_manifest.display());
    if holdout.is_empty() {
        println!("holdout: empty (synth.holdout = 0)");
    } else {
        let holdout_manifest = write_corpus(&holdout, &ctx.path("corpus/holdout"))?;
        println!(
            "holdout: {} pairs at {}",
            holdout.len(),
            holdout_manifest.display()
        );
    }
    Ok(())
}

fn cmd_train_codec(ctx: &Ctx, inv: &Invocation) -> Result<()> {
    let samples = ctx.load_pairs(inv, "train")?;
    let (_lr, hr, _labels, _) = stack_samples(&samples)?;
    let (vm, codec) = LatentCodec::build(ctx.cfg.codec.clone(), DT, &ctx.device, ctx.seed)?;
    let mut train_cfg = ctx.cfg.codec_train.clone();
    train_cfg.seed = ctx.seed;
    let curve = train_codec(&codec, &vm, &hr, &train_cfg, |epoch, loss| {
        eprintln!("codec epoch {epoch}: loss {loss:.6}");
    })?;
    let out = ctx.path("codec.ckpt");
    save_checkpoint(&out, "codec", &serde_json::to_value(&ctx.cfg.codec)?, &vm)?;
    println!(
        "codec trained for {} epochs, final loss {:.6}, saved to {}",
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_train_recognizer(ctx: &Ctx, inv: &Invocation) -> Result<()> {
    let samples = ctx.load_pairs(inv, "train")?;
    let (_lr, hr, labels, _) = stack_samples(&samples)?;
    let (vm, model) = Recognizer::build(ctx.cfg.recognizer.clone(), DT, &ctx.device, ctx.seed)?;
    let mut train_cfg = ctx.cfg.recog_train.clone();
    train_cfg.seed = ctx.seed;
    let curve = train_recognizer(&model, &vm, &hr, &labels, &train_cfg, |epoch, loss| {
        eprintln!("recognizer epoch {epoch}: loss {loss:.6}");
    })?;
    let out = ctx.path("recognizer.ckpt");
    save_checkpoint(
        &out,
        "recognizer",
        &serde_json::to_value(&ctx.cfg.recognizer)?,
        &vm,
    )?;
    println!(
        "recognizer trained for {} epochs, final loss {:.6}, saved to {}",
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_train_diffusion(ctx: &Ctx, inv: &Invocation) -> Result<()> {
    let samples = ctx.load_pairs(inv, "train")?;
    let (lr, hr, _labels, _) = stack_samples(&samples)?;
    let codec = ctx.load_codec()?;
    let (recog_vars, recognizer) = ctx.load_recognizer("recognizer.ckpt")?;
    let (unet_vars, unet) = GuidedUNet::build(ctx.cfg.unet.clone(), DT, &ctx.device, ctx.seed)?;
    let curve = train_diffusion(
        &unet,
        &unet_vars,
        &recognizer,
        &recog_vars,
        &codec,
        &lr,
        &hr,
        &ctx.cfg.train,
        ctx.seed,
        |epoch, e| {
            eprintln!(
                "diffusion epoch {epoch}: dm {:.6} recog {:.6} total {:.6}",
                e.diffusion, e.recognition, e.total
            );
        },
    )?;
    let unet_out = ctx.path("unet.ckpt");
    save_checkpoint(
        &unet_out,
        "unet",
        &serde_json::to_value(&ctx.cfg.unet)?,
        &unet_vars,
    )?;
    let recog_out = ctx.path("recognizer-tuned.ckpt");
    save_checkpoint(
        &recog_out,
        "recognizer",
        &serde_json::to_value(&ctx.cfg.recognizer)?,
        &recog_vars,
    )?;
    let last = curve.last().expect("epochs >= 1 is validated");
    println!(
        "diffusion trained for {} epochs, final dm {:.6} total {:.6}",
        curve.len(),
        last.diffusion,
        last.total
    );
    println!("saved {} and {}", unet_out.display(), recog_out.display());
    Ok(())
}

fn cmd_sample(ctx: &Ctx, inv: &Invocation) -> Result<()> {
    let samples = ctx.load_pairs(inv, "holdout")?;
    let codec = ctx.load_codec()?;
    let recognizer = ctx.load_guidance_recognizer()?;
    let unet = ctx.load_unet()?;
    let schedule = ctx.cfg.train.build_schedule()?;
    let out_dir = ctx.path("samples");
    std::fs::create_dir_all(&out_dir)?;
    for (i, s) in samples.iter().enumerate() {
        let sr = super_resolve(
            &codec,
            &recognizer,
            &unet,
            &schedule,
            &s.lr,
            ctx.cfg.train.sampler,
            ctx.cfg.train.sample_steps,
            ctx.cfg.train.eta,
            ctx.seed.wrapping_add(i as u64),
        )?;
        let path = out_dir.join(format!("{i:05}_sr.png"));
        save_png(&sr, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, inv: &Invocation) -> Result<()> {
    let samples = ctx.load_pairs(inv, "holdout")?;
    // Accuracy is read by the pre-trained recognizer, not the fine-tuned
    // guidance one: the judge must not move with the model under test.
    let (_vm, reader) = ctx.load_recognizer("recognizer.ckpt")?;
    let schedule = ctx.cfg.train.build_schedule()?;
    let report = match inv.resolver.as_str() {
        "bicubic" => evaluate(&BicubicUpsampler, &reader, &samples, ctx.seed)?,
        "diffusion" => {
            let codec = ctx.load_codec()?;
            let recognizer = ctx.load_guidance_recognizer()?;
            let unet = ctx.load_unet()?;
            let system = DiffusionSr {
                codec: &codec,
                recognizer: &recognizer,
                net: &unet,
                schedule: &schedule,
                sampler: ctx.cfg.train.sampler,
                steps: ctx.cfg.train.sample_steps,
                eta: ctx.cfg.train.eta,
            };
            evaluate(&system, &reader, &samples, ctx.seed)?
        }
        other => {
            return Err(Error::msg(format!(
                "--resolver must be 'diffusion' or 'bicubic', got '{other}'"
            )))
        }
    };
    println!("{report}");
    std::fs::create_dir_all(&ctx.dir)?;
    let csv_path = ctx.path(&format!("eval-{}.csv", inv.resolver));
    std::fs::write(&csv_path, report.to_csv())?;
    println!("rows: {}", csv_path.display());
    Ok(())
}

fn cmd_recognize(ctx: &Ctx, inv: &Invocation) -> Result<()> {
    let (_vm, model) = ctx.load_recognizer("recognizer.ckpt")?;
    if !inv.inputs.is_empty() {
        for path in &inv.inputs {
            let img = load_png(path, ImageRole::Hr, DT, &ctx.device)?;
            let text = model.read_text(&img)?.remove(0);
            println!("{}\t{}", path.display(), text);
        }
        return Ok(());
    }
    // No files given: read the manifest's LR side and score against labels.
    let samples = ctx.load_pairs(inv, "holdout")?;
    let mut preds = Vec::with_capacity(samples.len());
    let gts: Vec<String> = samples.iter().map(|s| s.label.clone()).collect();
    for s in &samples {
        preds.push(model.read_text(&s.lr)?.remove(0));
    }
    for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
        println!("{i:05}\t{g}\t{p}");
    }
    let acc = recognition_accuracy(&preds, &gts)?;
    println!("accuracy: {acc:.4} over {} samples", preds.len());
    Ok(())
}

fn cmd_inspect_schedule(ctx: &Ctx) -> Result<()> {
    let schedule = ctx.cfg.train.build_schedule()?;
    let mut out = std::io::stdout().lock();
    schedule.write_csv(&mut out)?;
    Ok(())
}

fn cmd_count_params(ctx: &Ctx) -> Result<()> {
    let with_blocks = |ids: &[usize]| -> GuidedUNetConfig {
        GuidedUNetConfig {
            rg_block_ids: ids.to_vec(),
            ..ctx.cfg.unet.clone()
        }
    };
    let p_none = layout::parameter_count(&with_blocks(&[]));
    let p_12 = layout::parameter_count(&with_blocks(&[1, 2]));
    let p_34 = layout::parameter_count(&with_blocks(&[3, 4]));
    let p_full = layout::parameter_count(&with_blocks(&[1, 2, 3, 4]));
    println!("guidance blocks  parameters      delta vs none");
    println!("none             {p_none:<15} 0");
    println!("{{1,2}}            {:<15} {}", p_12, p_12 - p_none);
    println!("{{3,4}}            {:<15} {}", p_34, p_34 - p_none);
    println!("{{1,2,3,4}}        {:<15} {}", p_full, p_full - p_none);
    let saving = (p_full - p_12) as f64 / p_full as f64;
    println!(
        "light version {{1,2}} saves {:.1}% of {{1,2,3,4}}",
        100.0 * saving
    );
    let configured = layout::parameter_count(&ctx.cfg.unet);
    println!(
        "configured rg_block_ids {:?}: {} parameters",
        ctx.cfg.unet.rg_block_ids, configured
    );
    Ok(())
}
