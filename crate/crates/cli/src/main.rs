//! `unclip` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use unclip::clip::retrieval_top1;
use unclip::config::{Config, PriorKind};
use unclip::data::{save_grid_png, CaptionTokens, Tokenizer};
use unclip::decoder::DecodeOptions;
use unclip::eval::{decode_and_score, guidance_sweep, svg_line_plot, sweep_csv, GaussianStats};
use unclip::manipulate::{self, LatentMode, ManipulateOptions, Models};
use unclip::numerics::Tensor;
use unclip::pipeline::{Pipeline, RunDir};
use unclip::prior::fit_pca;
use unclip::rng;

const OUT_ENV: &str = "UNCLIP_OUT_DIR";

#[derive(Parser)]
#[command(name = "unclip", version, about = "Desk-scale two-stage text-to-image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run directory (default: $UNCLIP_OUT_DIR or runs/default).
    #[arg(long)]
    run: Option<PathBuf>,
}

impl RunArgs {
    fn dir(&self) -> RunDir {
        let root = self.run.clone().unwrap_or_else(|| {
            std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs/default"), PathBuf::from)
        });
        RunDir::new(root)
    }

    fn open(&self) -> Result<Pipeline> {
        Ok(Pipeline::open(self.dir())?)
    }
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Starting point: desk or tiny.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// File of key = value lines applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut c = Config::preset(&self.preset)?;
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        for s in &self.sets {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            c.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        Ok(c)
    }
}

#[derive(Args, Clone)]
struct ManipArgs {
    /// DDIM steps for inversion and decoding.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG; a parameter manifest is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run directory and generate the datasets.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the contrastive encoder and report held-out retrieval.
    TrainClip {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the embedding-conditioned decoder.
    TrainDecoder {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the 16 to 32 upsampler.
    TrainUpsampler {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a prior (diffusion by default).
    TrainPrior {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<PriorKind>,
    },
    /// Text-to-image samples through prior, decoder and upsampler.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "prompt", required = true)]
        prompts: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<PriorKind>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoder variations of a held-out image.
    Variations {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[command(flatten)]
        manip: ManipArgs,
    },
    /// Interpolate between two held-out images.
    Interpolate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        a: usize,
        #[arg(long, default_value_t = 1)]
        b: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value = "endpoints", value_parser = parse_mode)]
        mode: LatentMode,
        #[command(flatten)]
        manip: ManipArgs,
    },
    /// Edit a held-out image along a caption-embedding difference.
    Textdiff {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Baseline caption (default: the image's own caption).
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = 0.5)]
        max_theta: f64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[command(flatten)]
        manip: ManipArgs,
    },
    /// Decode an image embedding truncated to its leading principal components.
    ProbePca {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Component counts; defaults to powers of two up to the retained count.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[command(flatten)]
        manip: ManipArgs,
    },
    /// Retrieval, CLIP-score and Fréchet metrics on held-out prompts.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 64)]
        prompts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoder guidance sweep with fixed prior samples.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        prompts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage in order, resuming from existing artifacts.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_kind(s: &str) -> Result<PriorKind, String> {
    s.parse().map_err(|e: unclip::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<LatentMode, String> {
    s.parse().map_err(|e: unclip::Error| e.to_string())
}

fn out_path(p: &Pipeline, out: &Option<PathBuf>, default: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| p.run.path(default))
}

fn write_manifest(image: &Path, lines: &[(&str, String)]) -> Result<()> {
    let text: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let path = image.with_extension("txt");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn held_image(p: &Pipeline, index: usize) -> Result<(Tensor<f32>, CaptionTokens)> {
    let held = p.heldout_data()?;
    let r = held.get(index).with_context(|| format!("index {index} outside the {} held-out records", held.len()))?;
    Ok((r.image.clone(), r.caption.clone()))
}

fn manip_opts(m: &ManipArgs) -> ManipulateOptions {
    ManipulateOptions {
        steps: m.steps,
        guidance: m.guidance,
        ..ManipulateOptions::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { run, config } => {
            let p = Pipeline::new(config.resolve()?, run.dir())?;
            p.gen_data()?;
            println!("{}", p.run.root.display());
        }
        Command::TrainClip { run } => {
            let p = run.open()?;
            let clip = p.train_clip()?;
            let held = p.heldout_data()?;
            let imgs: Vec<_> = held.iter().map(|r| r.image.clone()).collect();
            let caps: Vec<_> = held.iter().map(|r| r.caption.clone()).collect();
            println!("held-out top-1 retrieval {:.4}", retrieval_top1(&clip, &imgs, &caps)?);
        }
        Command::TrainDecoder { run } => {
            run.open()?.train_decoder()?;
        }
        Command::TrainUpsampler { run } => {
            run.open()?.train_upsampler()?;
        }
        Command::TrainPrior { run, kind } => {
            let p = run.open()?;
            p.train_prior(kind.unwrap_or(p.config.prior_kind))?;
        }
        Command::Sample {
            run,
            prompts,
            seed,
            kind,
            guidance,
            out,
        } => {
            let mut p = run.open()?;
            if let Some(k) = kind {
                p.config.prior_kind = k;
            }
            if let Some(g) = guidance {
                p.config.sample.decoder_guidance = g;
            }
            let sheet = p.sample(&prompts, seed)?;
            let out = out_path(&p, &out, "sample.png");
            save_grid_png(&out, &sheet.high_res, prompts.len().min(8))?;
            write_manifest(
                &out,
                &[
                    ("prompts", prompts.join(" | ")),
                    ("seed", seed.to_string()),
                    ("prior", p.config.prior_kind.to_string()),
                    ("decoder.guidance_scale", p.config.sample.decoder_guidance.to_string()),
                ],
            )?;
            println!("{}", out.display());
        }
        Command::Variations { run, index, n, eta, manip } => {
            let p = run.open()?;
            let (clip, decoder) = (p.clip()?, p.decoder()?);
            let (image, _) = held_image(&p, index)?;
            let models = Models { clip: &clip, decoder: &decoder };
            let mut r = rng::stream(manip.seed, "cli.variations");
            let mut frames = vec![image];
            frames.extend(manipulate::variations(models, &frames[0], eta, n, &manip_opts(&manip), &mut r)?);
            let out = out_path(&p, &manip.out, "variations.png");
            save_grid_png(&out, &frames, frames.len())?;
            write_manifest(&out, &[("index", index.to_string()), ("n", n.to_string()), ("eta", eta.to_string()), ("seed", manip.seed.to_string())])?;
            println!("{}", out.display());
        }
        Command::Interpolate { run, a, b, frames, mode, manip } => {
            let p = run.open()?;
            let (clip, decoder) = (p.clip()?, p.decoder()?);
            let ((x1, _), (x2, _)) = (held_image(&p, a)?, held_image(&p, b)?);
            let models = Models { clip: &clip, decoder: &decoder };
            let mut r = rng::stream(manip.seed, "cli.interpolate");
            let row = manipulate::interpolate(models, &x1, &x2, frames, mode, &manip_opts(&manip), &mut r)?;
            let out = out_path(&p, &manip.out, "interpolate.png");
            save_grid_png(&out, &row, row.len())?;
            write_manifest(&out, &[("a", a.to_string()), ("b", b.to_string()), ("frames", frames.to_string()), ("mode", format!("{mode:?}")), ("seed", manip.seed.to_string())])?;
            println!("{}", out.display());
        }
        Command::Textdiff { run, index, from, to, max_theta, frames, manip } => {
            let p = run.open()?;
            let (clip, decoder) = (p.clip()?, p.decoder()?);
            let (image, own) = held_image(&p, index)?;
            let from_caption = match &from {
                Some(t) => Tokenizer.encode(t)?,
                None => own,
            };
            let to_caption = Tokenizer.encode(&to)?;
            let thetas = manipulate::theta_grid(max_theta, frames);
            let models = Models { clip: &clip, decoder: &decoder };
            let mut r = rng::stream(manip.seed, "cli.textdiff");
            let diff = manipulate::text_diff(models, &image, &from_caption, &to_caption, &thetas, &manip_opts(&manip), &mut r)?;
            let out = out_path(&p, &manip.out, "textdiff.png");
            save_grid_png(&out, &diff.frames, diff.frames.len())?;
            write_manifest(
                &out,
                &[("index", index.to_string()), ("from", Tokenizer.decode(&from_caption)?), ("to", to), ("thetas", format!("{thetas:?}"))],
            )?;
            println!("{}", out.display());
        }
        Command::ProbePca { run, index, ks, manip } => {
            let p = run.open()?;
            let (clip, decoder) = (p.clip()?, p.decoder()?);
            let data = p.train_data()?;
            let z = clip.embed_images(&data.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
            let basis = fit_pca(&z, p.config.ar_prior.mse_fraction)?;
            let ks = if ks.is_empty() {
                let mut v: Vec<usize> = (0..).map(|i| 1 << i).take_while(|&k| k < basis.k).collect();
                v.push(basis.k);
                v
            } else {
                ks
            };
            let (image, _) = held_image(&p, index)?;
            let models = Models { clip: &clip, decoder: &decoder };
            let row = manipulate::pca_probe(models, &basis, &image, &ks, &manip_opts(&manip), manip.seed)?;
            let out = out_path(&p, &manip.out, "probe_pca.png");
            save_grid_png(&out, &row, row.len())?;
            write_manifest(&out, &[("index", index.to_string()), ("ks", format!("{ks:?}")), ("retained", basis.k.to_string())])?;
            println!("{}", out.display());
        }
        Command::Eval { run, prompts, seed, out } => {
            let p = run.open()?;
            let clip = p.clip()?;
            let decoder = p.decoder()?;
            let prior = p.prior(p.config.prior_kind)?;
            let held = p.heldout_data()?;
            let imgs: Vec<_> = held.iter().map(|r| r.image.clone()).collect();
            let caps: Vec<_> = held.iter().map(|r| r.caption.clone()).collect();
            let n = prompts.min(held.len());
            if n < 2 {
                bail!("need at least two held-out prompts");
            }
            let reference = GaussianStats::from_features(&clip.embed_images(&imgs)?)?;
            let opts = DecodeOptions {
                guidance: p.config.sample.decoder_guidance,
                eta: 0.0,
                steps: p.config.sample.decoder_steps,
            };
            let z_prior = prior.sample(&clip, &caps[..n], &p.config, &mut rng::stream(seed, "cli.eval.prior"))?;
            let z_text = clip.embed_texts(&caps[..n])?;
            let (_, with_prior) = decode_and_score(&decoder, &clip, Some(&z_prior), &caps[..n], &opts, &reference, seed)?;
            let (_, with_text) = decode_and_score(&decoder, &clip, Some(&z_text), &caps[..n], &opts, &reference, seed)?;
            let report = format!(
                "retrieval_top1 = {:.4}\nprior.clip_score = {:.4}\nprior.frechet = {:.4}\ntext_embedding.clip_score = {:.4}\ntext_embedding.frechet = {:.4}\n",
                retrieval_top1(&clip, &imgs, &caps)?,
                with_prior.clip_score,
                with_prior.frechet,
                with_text.clip_score,
                with_text.frechet
            );
            let out = out_path(&p, &out, "eval.txt");
            std::fs::write(&out, &report).with_context(|| format!("writing {}", out.display()))?;
            print!("{report}");
        }
        Command::Sweep { run, scales, prompts, seed, out } => {
            let p = run.open()?;
            let clip = p.clip()?;
            let decoder = p.decoder()?;
            let prior = p.prior(p.config.prior_kind)?;
            let held = p.heldout_data()?;
            let n = prompts.min(held.len());
            let caps: Vec<_> = held[..n].iter().map(|r| r.caption.clone()).collect();
            let imgs: Vec<_> = held.iter().map(|r| r.image.clone()).collect();
            let reference = GaussianStats::from_features(&clip.embed_images(&imgs)?)?;
            let z = prior.sample(&clip, &caps, &p.config, &mut rng::stream(seed, "cli.sweep.prior"))?;
            let rows = guidance_sweep(&decoder, &clip, Some(&z), &caps, &reference, &scales, p.config.sample.decoder_steps, seed)?;
            let out = out_path(&p, &out, "sweep.csv");
            sweep_csv(&out, &rows)?;
            let series = vec![("frechet".to_string(), rows.iter().map(|r| (r.scale, r.frechet)).collect())];
            let svg = out.with_extension("svg");
            std::fs::write(&svg, svg_line_plot(&series, "guidance scale", "toy Fréchet")).with_context(|| format!("writing {}", svg.display()))?;
            println!("{}", out.display());
        }
        Command::Pipeline { run, config } => {
            let p = Pipeline::new(config.resolve()?, run.dir())?;
            let t = std::time::Instant::now();
            let sheet = p.run_all()?;
            println!("{} ({:.1} s)", sheet.display(), t.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
