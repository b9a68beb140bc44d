//! Flat `key = value` run configuration with namespaced keys.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::clip::ClipConfig;
use crate::decoder::{DecoderConfig, UpsamplerConfig};
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::prior::{ArPriorConfig, DiffusionPriorConfig};
use crate::train::OptimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Ar,
    Diffusion,
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(Self::Ar),
            "diffusion" => Ok(Self::Diffusion),
            _ => Err(Error::invalid("prior kind", format!("unknown kind {s:?} (ar|diffusion)"))),
        }
    }
}

impl Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ar => "ar",
            Self::Diffusion => "diffusion",
        })
    }
}

/// Values that can appear on the right of `=`.
trait ConfigValue: Sized {
    const EXPECTED: &'static str;
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty => $name:literal),*) => {$(
        impl ConfigValue for $t {
            const EXPECTED: &'static str = $name;
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_fromstr!(usize => "unsigned integer", u64 => "unsigned integer", bool => "boolean", ScheduleKind => "cosine|linear", PriorKind => "ar|diffusion");

impl ConfigValue for f64 {
    const EXPECTED: &'static str = "number";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Vec<usize> {
    const EXPECTED: &'static str = "comma-separated integers";
    fn parse_value(s: &str) -> Option<Self> {
        if s.trim().is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub train_size: usize,
    pub heldout_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSettings {
    pub decoder_steps: usize,
    pub decoder_guidance: f64,
    pub upsampler_steps: usize,
    pub prior_steps: usize,
    pub prior_guidance: f64,
    pub ar_temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data: DataSettings,
    pub clip: ClipConfig,
    pub clip_optim: OptimConfig,
    pub decoder: DecoderConfig,
    pub decoder_optim: OptimConfig,
    pub upsampler: UpsamplerConfig,
    pub upsampler_optim: OptimConfig,
    pub prior_kind: PriorKind,
    pub ar_prior: ArPriorConfig,
    pub ar_optim: OptimConfig,
    pub diffusion_prior: DiffusionPriorConfig,
    pub diffusion_optim: OptimConfig,
    pub sample: SampleSettings,
}

fn optim(steps: usize, batch_size: usize, lr: f64, ema_decay: f64) -> OptimConfig {
    OptimConfig {
        steps,
        batch_size,
        lr,
        weight_decay: 0.01,
        beta2: 0.99,
        warmup: (steps / 20).clamp(1, 100),
        grad_clip: 1.0,
        ema_decay,
    }
}

impl Default for Config {
    /// The standard desk-scale run.
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSettings {
                train_size: 8192,
                heldout_size: 256,
            },
            clip: ClipConfig::default(),
            clip_optim: optim(800, 64, 1e-3, 0.99),
            decoder: DecoderConfig::default(),
            decoder_optim: optim(6000, 32, 1e-3, 0.995),
            upsampler: UpsamplerConfig::default(),
            upsampler_optim: optim(1000, 16, 1e-3, 0.99),
            prior_kind: PriorKind::Diffusion,
            ar_prior: ArPriorConfig::default(),
            ar_optim: optim(1500, 64, 5e-4, 0.99),
            diffusion_prior: DiffusionPriorConfig::default(),
            diffusion_optim: optim(3000, 64, 5e-4, 0.99),
            sample: SampleSettings {
                decoder_steps: 50,
                decoder_guidance: 3.0,
                upsampler_steps: 25,
                prior_steps: 64,
                prior_guidance: 1.0,
                ar_temperature: 1.0,
            },
        }
    }
}

impl Config {
    /// Minimal iteration counts for smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.data = DataSettings {
            train_size: 256,
            heldout_size: 16,
        };
        for (o, steps) in [
            (&mut c.clip_optim, 30),
            (&mut c.decoder_optim, 20),
            (&mut c.upsampler_optim, 10),
            (&mut c.ar_optim, 20),
            (&mut c.diffusion_optim, 20),
        ] {
            o.steps = steps;
            o.batch_size = o.batch_size.min(16);
            o.warmup = 5;
            o.ema_decay = 0.9;
        }
        c.sample.decoder_steps = 10;
        c.sample.upsampler_steps = 5;
        c.sample.prior_steps = 10;
        c
    }

    /// `"desk"` or `"tiny"`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::invalid("config", format!("unknown preset {name:?} (desk|tiny)"))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_value(value).ok_or_else(|| Error::ConfigValue {
        key: key.to_string(),
        value: value.to_string(),
        expected: T::EXPECTED,
    })
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ ;)*) => {
        impl Config {
            /// Sets one namespaced key; unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse(key, value)?,)*
                    _ => return Err(Error::UnknownConfigKey(key.to_string())),
                }
                Ok(())
            }

            pub fn keys() -> &'static [&'static str] {
                &[$($key),*]
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "data.train_size" => data.train_size;
    "data.heldout_size" => data.heldout_size;

    "clip.embed_dim" => clip.embed_dim;
    "clip.image_channels" => clip.image_channels;
    "clip.text_width" => clip.text_width;
    "clip.text_depth" => clip.text_depth;
    "clip.text_heads" => clip.text_heads;
    "clip.steps" => clip_optim.steps;
    "clip.batch_size" => clip_optim.batch_size;
    "clip.lr" => clip_optim.lr;
    "clip.weight_decay" => clip_optim.weight_decay;
    "clip.beta2" => clip_optim.beta2;
    "clip.warmup" => clip_optim.warmup;
    "clip.grad_clip" => clip_optim.grad_clip;
    "clip.ema_decay" => clip_optim.ema_decay;

    "decoder.base_channels" => decoder.base_channels;
    "decoder.channel_multipliers" => decoder.channel_multipliers;
    "decoder.resblocks_per_stage" => decoder.resblocks_per_stage;
    "decoder.attention_resolutions" => decoder.attention_resolutions;
    "decoder.heads" => decoder.heads;
    "decoder.dropout" => decoder.dropout;
    "decoder.text_width" => decoder.text_width;
    "decoder.text_depth" => decoder.text_depth;
    "decoder.text_heads" => decoder.text_heads;
    "decoder.use_embedding" => decoder.use_embedding;
    "decoder.use_text" => decoder.use_text;
    "decoder.embed_drop" => decoder.embed_drop;
    "decoder.caption_drop" => decoder.caption_drop;
    "decoder.schedule" => decoder.schedule;
    "decoder.timesteps" => decoder.timesteps;
    "decoder.steps" => decoder_optim.steps;
    "decoder.batch_size" => decoder_optim.batch_size;
    "decoder.lr" => decoder_optim.lr;
    "decoder.weight_decay" => decoder_optim.weight_decay;
    "decoder.beta2" => decoder_optim.beta2;
    "decoder.warmup" => decoder_optim.warmup;
    "decoder.grad_clip" => decoder_optim.grad_clip;
    "decoder.ema_decay" => decoder_optim.ema_decay;
    "decoder.guidance_scale" => sample.decoder_guidance;
    "decoder.sample_steps" => sample.decoder_steps;

    "upsampler.base_channels" => upsampler.base_channels;
    "upsampler.channel_multipliers" => upsampler.channel_multipliers;
    "upsampler.resblocks_per_stage" => upsampler.resblocks_per_stage;
    "upsampler.schedule" => upsampler.schedule;
    "upsampler.timesteps" => upsampler.timesteps;
    "upsampler.crop" => upsampler.crop;
    "upsampler.blur_sigma" => upsampler.blur_sigma;
    "upsampler.blur_kernel" => upsampler.blur_kernel;
    "upsampler.steps" => upsampler_optim.steps;
    "upsampler.batch_size" => upsampler_optim.batch_size;
    "upsampler.lr" => upsampler_optim.lr;
    "upsampler.weight_decay" => upsampler_optim.weight_decay;
    "upsampler.beta2" => upsampler_optim.beta2;
    "upsampler.warmup" => upsampler_optim.warmup;
    "upsampler.grad_clip" => upsampler_optim.grad_clip;
    "upsampler.ema_decay" => upsampler_optim.ema_decay;
    "upsampler.sample_steps" => sample.upsampler_steps;

    "prior.kind" => prior_kind;
    "prior.ar.width" => ar_prior.width;
    "prior.ar.depth" => ar_prior.depth;
    "prior.ar.heads" => ar_prior.heads;
    "prior.ar.buckets" => ar_prior.buckets;
    "prior.ar.dot_buckets" => ar_prior.dot_buckets;
    "prior.ar.mse_fraction" => ar_prior.mse_fraction;
    "prior.ar.text_drop" => ar_prior.text_drop;
    "prior.ar.steps" => ar_optim.steps;
    "prior.ar.batch_size" => ar_optim.batch_size;
    "prior.ar.lr" => ar_optim.lr;
    "prior.ar.weight_decay" => ar_optim.weight_decay;
    "prior.ar.beta2" => ar_optim.beta2;
    "prior.ar.warmup" => ar_optim.warmup;
    "prior.ar.grad_clip" => ar_optim.grad_clip;
    "prior.ar.ema_decay" => ar_optim.ema_decay;
    "prior.ar.temperature" => sample.ar_temperature;
    "prior.diffusion.width" => diffusion_prior.width;
    "prior.diffusion.depth" => diffusion_prior.depth;
    "prior.diffusion.heads" => diffusion_prior.heads;
    "prior.diffusion.text_drop" => diffusion_prior.text_drop;
    "prior.diffusion.schedule" => diffusion_prior.schedule;
    "prior.diffusion.timesteps" => diffusion_prior.timesteps;
    "prior.diffusion.steps" => diffusion_optim.steps;
    "prior.diffusion.batch_size" => diffusion_optim.batch_size;
    "prior.diffusion.lr" => diffusion_optim.lr;
    "prior.diffusion.weight_decay" => diffusion_optim.weight_decay;
    "prior.diffusion.beta2" => diffusion_optim.beta2;
    "prior.diffusion.warmup" => diffusion_optim.warmup;
    "prior.diffusion.grad_clip" => diffusion_optim.grad_clip;
    "prior.diffusion.ema_decay" => diffusion_optim.ema_decay;
    "prior.diffusion.sample_steps" => sample.prior_steps;
    "prior.guidance_scale" => sample.prior_guidance;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::tiny();
        c.decoder.channel_multipliers = vec![1, 3];
        c.sample.decoder_guidance = 2.5;
        let mut back = Config::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(Config::keys().len(), c.entries().len());
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = Config::default();
        assert!(matches!(c.set("decoder.nope", "1"), Err(Error::UnknownConfigKey(_))));
        assert!(matches!(c.set("seed", "-1"), Err(Error::ConfigValue { .. })));
        assert!(c.apply_text("seed 4").is_err());
        c.apply_text("# comment\nseed = 9 # trailing\n\nprior.kind = ar").unwrap();
        assert_eq!((c.seed, c.prior_kind), (9, PriorKind::Ar));
    }
}
