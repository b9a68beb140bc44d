//! Run directories, model checkpoints, and the staged training pipeline.
//! Every stage writes its artifact atomically and is skipped when the
//! artifact already exists, so an interrupted run resumes where it stopped.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, raw_entries, save_checkpoint, store_entries, NamedTensors, TensorMap};
use crate::clip::{train_clip, ClipModel};
use crate::config::{Config, PriorKind};
use crate::data::{generate_dataset, generate_unique, load_dataset, save_dataset, CaptionTokens, DatasetRecord, Tokenizer};
use crate::decoder::{train_decoder, train_upsampler, DecodeOptions, DecoderModel, UpsamplerModel};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::prior::{
    train_ar_prior, train_diffusion_prior, ArPriorModel, ArSampleOptions, DiffusionPriorModel, PcaBasis,
    PriorSampleOptions, QuantizerSpec,
};
use crate::rng;

const EMA: &str = "ema/";
const RAW: &str = "raw/";

/// Artifact layout of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.txt")
    }
    pub fn train_data(&self) -> PathBuf {
        self.path("train.ucld")
    }
    pub fn heldout_data(&self) -> PathBuf {
        self.path("heldout.ucld")
    }
    pub fn clip(&self) -> PathBuf {
        self.path("clip.uckp")
    }
    pub fn decoder(&self) -> PathBuf {
        self.path("decoder.uckp")
    }
    pub fn upsampler(&self) -> PathBuf {
        self.path("upsampler.uckp")
    }
    pub fn prior(&self, kind: PriorKind) -> PathBuf {
        self.path(&format!("prior_{kind}.uckp"))
    }
    pub fn timings(&self) -> PathBuf {
        self.path("timings.txt")
    }

    /// Appends one `stage seconds` line to the timing log.
    pub fn record_timing(&self, stage: &str, seconds: f64) -> Result<()> {
        use std::io::Write as _;
        let path = self.timings();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{stage} {seconds:.3}").map_err(|e| Error::io(&path, e))
    }

    /// Recorded stage timings, in the order they were written.
    pub fn read_timings(&self) -> Result<Vec<(String, f64)>> {
        let path = self.timings();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (stage, secs) = l.rsplit_once(' ').ok_or_else(|| Error::invalid("timings", l.to_string()))?;
                let secs = secs.parse().map_err(|_| Error::invalid("timings", l.to_string()))?;
                Ok((stage.to_string(), secs))
            })
            .collect()
    }

    /// Creates the directory and records the resolved config, refusing to
    /// mix artifacts from a different config.
    pub fn init(&self, config: &Config) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let text = config.to_text();
        let path = self.config();
        if path.exists() {
            let old = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if old != text {
                return Err(Error::invalid(
                    "run directory",
                    format!("{} holds a run with a different config", self.root.display()),
                ));
            }
            return Ok(());
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// The config recorded by `init`.
    pub fn load_config(&self) -> Result<Config> {
        let path = self.config();
        if !path.exists() {
            return Err(Error::invalid("run directory", format!("no run at {} (missing config.txt)", self.root.display())));
        }
        let mut c = Config::default();
        c.apply_file(&path)?;
        Ok(c)
    }
}

fn timed<T>(run: &RunDir, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = std::time::Instant::now();
    let out = f()?;
    run.record_timing(stage, start.elapsed().as_secs_f64())?;
    Ok(out)
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::invalid(
            "pipeline",
            format!("missing {} (run `{stage}` first)", path.display()),
        ))
    }
}

fn weights(store: &ParamStore<f32>, raw: &[Tensor<f32>]) -> NamedTensors {
    let mut out = store_entries(store, EMA);
    out.extend(raw_entries(store, raw, RAW));
    out
}

fn scalar(v: f64) -> Tensor<f32> {
    Tensor::from_vec(vec![v as f32])
}

fn f64s(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn f32s(v: &[f64]) -> Tensor<f32> {
    Tensor::from_vec(v.iter().map(|&x| x as f32).collect())
}

pub fn load_clip(config: &Config, path: &Path) -> Result<ClipModel> {
    require(path, "train-clip")?;
    let mut m = ClipModel::new(config.clip.clone(), config.seed)?;
    TensorMap::new(load_checkpoint(path)?).load_store(&mut m.store, EMA)?;
    Ok(m)
}

pub fn load_decoder(config: &Config, path: &Path) -> Result<DecoderModel> {
    require(path, "train-decoder")?;
    let mut m = DecoderModel::new(config.decoder.clone(), config.seed)?;
    TensorMap::new(load_checkpoint(path)?).load_store(&mut m.store, EMA)?;
    Ok(m)
}

pub fn load_upsampler(config: &Config, path: &Path) -> Result<UpsamplerModel> {
    require(path, "train-upsampler")?;
    let mut m = UpsamplerModel::new(config.upsampler.clone(), config.seed)?;
    TensorMap::new(load_checkpoint(path)?).load_store(&mut m.store, EMA)?;
    Ok(m)
}

fn ar_entries(m: &ArPriorModel, raw: &[Tensor<f32>]) -> NamedTensors {
    let mut out = weights(&m.store, raw);
    out.extend([
        ("stats/pca.mean".to_string(), m.pca.mean.clone()),
        ("stats/pca.components".to_string(), m.pca.components.clone()),
        ("stats/pca.eigenvalues".to_string(), Tensor::from_vec(m.pca.eigenvalues.clone())),
        ("stats/pca.k".to_string(), scalar(m.pca.k as f64)),
        ("stats/codes.min".to_string(), f32s(&m.quantizer.mins)),
        ("stats/codes.max".to_string(), f32s(&m.quantizer.maxs)),
        ("stats/dot.min".to_string(), f32s(&m.dot_quantizer.mins)),
        ("stats/dot.max".to_string(), f32s(&m.dot_quantizer.maxs)),
        ("stats/dot.values".to_string(), f32s(&m.dot_values)),
    ]);
    out
}

pub fn load_ar_prior(config: &Config, path: &Path) -> Result<ArPriorModel> {
    require(path, "train-prior --kind ar")?;
    let map = TensorMap::new(load_checkpoint(path)?);
    let pca = PcaBasis {
        mean: map.get("stats/pca.mean")?.clone(),
        components: map.get("stats/pca.components")?.clone(),
        eigenvalues: map.get("stats/pca.eigenvalues")?.data().to_vec(),
        k: map.scalar("stats/pca.k")? as usize,
    };
    let cfg = &config.ar_prior;
    let quantizer = QuantizerSpec::new(cfg.buckets, f64s(map.get("stats/codes.min")?), f64s(map.get("stats/codes.max")?))?;
    let dots = QuantizerSpec::new(cfg.dot_buckets, f64s(map.get("stats/dot.min")?), f64s(map.get("stats/dot.max")?))?;
    let mut m = ArPriorModel::from_stats(cfg.clone(), pca, quantizer, dots, f64s(map.get("stats/dot.values")?), config.seed)?;
    map.load_store(&mut m.store, EMA)?;
    Ok(m)
}

pub fn load_diffusion_prior(config: &Config, path: &Path) -> Result<DiffusionPriorModel> {
    require(path, "train-prior --kind diffusion")?;
    let map = TensorMap::new(load_checkpoint(path)?);
    let scale = map.scalar("stats/scale")? as f64;
    let mut m = DiffusionPriorModel::new(config.diffusion_prior.clone(), config.clip.embed_dim, scale, config.seed)?;
    map.load_store(&mut m.store, EMA)?;
    Ok(m)
}

/// Either trained prior.
pub enum Prior {
    Ar(ArPriorModel),
    Diffusion(DiffusionPriorModel),
}

impl Prior {
    /// Image embeddings [B, D] for `captions`.
    pub fn sample(&self, clip: &ClipModel, captions: &[CaptionTokens], config: &Config, rng: &mut rng::Rng) -> Result<Tensor<f32>> {
        let s = &config.sample;
        match self {
            Prior::Ar(m) => {
                let opts = ArSampleOptions {
                    temperature: s.ar_temperature,
                    guidance: s.prior_guidance,
                };
                m.sample_captions(clip, captions, &opts, rng)
            }
            Prior::Diffusion(m) => {
                let opts = PriorSampleOptions {
                    steps: s.prior_steps,
                    guidance: s.prior_guidance,
                    eta: 0.0,
                };
                Ok(m.sample_captions(clip, captions, &opts, rng)?.chosen)
            }
        }
    }
}

pub fn load_prior(config: &Config, run: &RunDir, kind: PriorKind) -> Result<Prior> {
    let path = run.prior(kind);
    Ok(match kind {
        PriorKind::Ar => Prior::Ar(load_ar_prior(config, &path)?),
        PriorKind::Diffusion => Prior::Diffusion(load_diffusion_prior(config, &path)?),
    })
}

/// Stage runner over one run directory.
pub struct Pipeline {
    pub config: Config,
    pub run: RunDir,
}

impl Pipeline {
    pub fn new(config: Config, run: RunDir) -> Result<Self> {
        run.init(&config)?;
        Ok(Self { config, run })
    }

    /// Opens an existing run with its recorded config.
    pub fn open(run: RunDir) -> Result<Self> {
        let config = run.load_config()?;
        Ok(Self { config, run })
    }

    pub fn gen_data(&self) -> Result<()> {
        let (train, held) = (self.run.train_data(), self.run.heldout_data());
        if !train.exists() {
            log::info!("generating {} training records", self.config.data.train_size);
            timed(&self.run, "gen-data", || {
                save_dataset(&train, &generate_dataset(self.config.data.train_size, self.config.seed))
            })?;
        }
        if !held.exists() {
            let records = generate_unique(self.config.data.heldout_size, self.config.seed ^ 0x4845_4c44, &HashSet::new())?;
            save_dataset(&held, &records)?;
        }
        Ok(())
    }

    pub fn train_data(&self) -> Result<Vec<DatasetRecord>> {
        require(&self.run.train_data(), "gen-data")?;
        load_dataset(&self.run.train_data())
    }

    pub fn heldout_data(&self) -> Result<Vec<DatasetRecord>> {
        require(&self.run.heldout_data(), "gen-data")?;
        load_dataset(&self.run.heldout_data())
    }

    pub fn train_clip(&self) -> Result<ClipModel> {
        let path = self.run.clip();
        if !path.exists() {
            let data = self.train_data()?;
            log::info!("training clip for {} steps", self.config.clip_optim.steps);
            let t = timed(&self.run, "clip", || train_clip(self.config.clip.clone(), &self.config.clip_optim, &data, self.config.seed))?;
            save_checkpoint(&path, &weights(&t.model.store, &t.raw))?;
        }
        load_clip(&self.config, &path)
    }

    pub fn clip(&self) -> Result<ClipModel> {
        load_clip(&self.config, &self.run.clip())
    }

    pub fn train_decoder(&self) -> Result<DecoderModel> {
        let path = self.run.decoder();
        if !path.exists() {
            let clip = self.clip()?;
            let data = self.train_data()?;
            log::info!("training decoder for {} steps", self.config.decoder_optim.steps);
            let t = timed(&self.run, "decoder", || {
                train_decoder(self.config.decoder.clone(), &self.config.decoder_optim, &data, &clip, self.config.seed)
            })?;
            save_checkpoint(&path, &weights(&t.model.store, &t.raw))?;
        }
        self.decoder()
    }

    pub fn decoder(&self) -> Result<DecoderModel> {
        load_decoder(&self.config, &self.run.decoder())
    }

    pub fn train_upsampler(&self) -> Result<UpsamplerModel> {
        let path = self.run.upsampler();
        if !path.exists() {
            let data = self.train_data()?;
            log::info!("training upsampler for {} steps", self.config.upsampler_optim.steps);
            let t = timed(&self.run, "upsampler", || {
                train_upsampler(self.config.upsampler.clone(), &self.config.upsampler_optim, &data, self.config.seed)
            })?;
            save_checkpoint(&path, &weights(&t.model.store, &t.raw))?;
        }
        self.upsampler()
    }

    pub fn upsampler(&self) -> Result<UpsamplerModel> {
        load_upsampler(&self.config, &self.run.upsampler())
    }

    pub fn train_prior(&self, kind: PriorKind) -> Result<Prior> {
        let path = self.run.prior(kind);
        if !path.exists() {
            let clip = self.clip()?;
            let data = self.train_data()?;
            let c = &self.config;
            match kind {
                PriorKind::Ar => {
                    log::info!("training ar prior for {} steps", c.ar_optim.steps);
                    let t = timed(&self.run, "prior_ar", || train_ar_prior(c.ar_prior.clone(), &c.ar_optim, &data, &clip, c.seed))?;
                    save_checkpoint(&path, &ar_entries(&t.model, &t.raw))?;
                }
                PriorKind::Diffusion => {
                    log::info!("training diffusion prior for {} steps", c.diffusion_optim.steps);
                    let t = timed(&self.run, "prior_diffusion", || {
                        train_diffusion_prior(c.diffusion_prior.clone(), &c.diffusion_optim, &data, &clip, c.seed)
                    })?;
                    let mut entries = weights(&t.model.store, &t.raw);
                    entries.push(("stats/scale".to_string(), scalar(t.model.scale as f64)));
                    save_checkpoint(&path, &entries)?;
                }
            }
        }
        self.prior(kind)
    }

    pub fn prior(&self, kind: PriorKind) -> Result<Prior> {
        load_prior(&self.config, &self.run, kind)
    }

    /// All stages in order, then a sample sheet for a few held-out captions.
    pub fn run_all(&self) -> Result<PathBuf> {
        self.gen_data()?;
        self.train_clip()?;
        self.train_decoder()?;
        self.train_upsampler()?;
        self.train_prior(self.config.prior_kind)?;
        let held = self.heldout_data()?;
        let prompts: Vec<String> = held.iter().take(8).map(|r| r.caption_text()).collect();
        let out = self.run.path("samples.png");
        let sheet = self.sample(&prompts, self.config.seed)?;
        crate::data::save_grid_png(&out, &sheet.high_res, prompts.len().min(8))?;
        Ok(out)
    }

    /// Text-to-image: prior, decoder, upsampler.
    pub fn sample(&self, prompts: &[String], seed: u64) -> Result<SampleSheet> {
        if prompts.is_empty() {
            return Err(Error::invalid("sample", "no prompts"));
        }
        let captions = prompts.iter().map(|p| Tokenizer.encode(p)).collect::<Result<Vec<_>>>()?;
        let clip = self.clip()?;
        let prior = self.prior(self.config.prior_kind)?;
        let decoder = self.decoder()?;
        let upsampler = self.upsampler()?;
        let s = &self.config.sample;
        let z = prior.sample(&clip, &captions, &self.config, &mut rng::stream(seed, "sample.prior"))?;
        let opts = DecodeOptions {
            guidance: s.decoder_guidance,
            eta: 0.0,
            steps: s.decoder_steps,
        };
        let low = decoder.decode(Some(&z), &captions, &opts, &mut rng::stream(seed, "sample.decoder"), None)?;
        let high = upsampler.upsample(&low, s.upsampler_steps, 0.0, &mut rng::stream(seed, "sample.upsampler"))?;
        Ok(SampleSheet {
            embeddings: z,
            low_res: low.unstack(),
            high_res: high.unstack(),
        })
    }
}

pub struct SampleSheet {
    pub embeddings: Tensor<f32>,
    pub low_res: Vec<Tensor<f32>>,
    pub high_res: Vec<Tensor<f32>>,
}
