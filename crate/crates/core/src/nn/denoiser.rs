use crate::error::{Error, Result};
use crate::nn::{timestep_embed_batch, Conv2d, Ctx, GroupNorm, Linear, MultiHeadAttention};
use crate::numerics::{ParamStore, Scalar, Var};
use crate::rng::Rng;

/// U-shaped convolutional denoiser layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resblocks_per_stage: usize,
    /// Feature-map sizes (side lengths) that get attention layers.
    pub attention_resolutions: Vec<usize>,
    /// Side length at which attention resolutions are interpreted.
    pub image_size: usize,
    /// Width of conditioning tokens; 0 disables cross-attention.
    pub cond_width: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl DenoiserConfig {
    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Side lengths of the feature maps at each level.
    pub fn feature_sizes(&self) -> Vec<usize> {
        (0..self.channel_multipliers.len()).map(|l| self.image_size >> l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::invalid("denoiser", msg));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return err("channel multipliers must be nonempty and positive".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return err("channel counts must be positive".into());
        }
        if self.resblocks_per_stage == 0 {
            return err("need at least one residual block per stage".into());
        }
        let levels = self.channel_multipliers.len();
        if self.image_size % (1 << (levels - 1)) != 0 {
            return err(format!("image size {} not divisible by 2^{}", self.image_size, levels - 1));
        }
        let sizes = self.feature_sizes();
        for r in &self.attention_resolutions {
            if !sizes.contains(r) {
                return err(format!("attention resolution {r} not among feature sizes {sizes:?}"));
            }
        }
        if !self.attention_resolutions.is_empty() {
            if self.heads == 0 {
                return err("attention needs at least one head".into());
            }
            for l in 0..levels {
                if self.channels(l) % self.heads != 0 {
                    return err(format!("{} channels not divisible by {} heads", self.channels(l), self.heads));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    dropout: f64,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups_for(cin))?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            time: Linear::new(store, &format!("{name}.time"), time_dim, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups_for(cout))?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
            dropout,
        })
    }

    fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>, emb: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.conv1.forward(cx, self.norm1.forward(cx, x)?.gelu())?;
        let b = emb.shape()[0];
        let c = h.shape()[1];
        let t = self.time.forward(cx, emb.gelu())?.reshape(&[b, c, 1, 1])?;
        let h = h.add(t)?;
        let h = cx.dropout(self.norm2.forward(cx, h)?.gelu(), self.dropout)?;
        let h = self.conv2.forward(cx, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(cx, x)?,
            None => x,
        };
        skip.add(h)
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: GroupNorm,
    attn: MultiHeadAttention,
}

impl AttnBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: usize,
        cond_width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cond = (cond_width > 0).then_some(cond_width);
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups_for(channels))?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), channels, heads, cond, true, rng)?,
        })
    }

    fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>, cond: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let seq = self.norm.forward(cx, x)?.reshape(&[b, c, hw])?.permute(&[0, 2, 1])?;
        let out = self.attn.forward(cx, seq, cond, false)?.permute(&[0, 2, 1])?.reshape(&s)?;
        x.add(out)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: Vec<ResBlock>,
    attn: Vec<Option<AttnBlock>>,
}

impl Stage {
    fn forward<'g, T: Scalar>(
        &self,
        cx: Ctx<'g, T>,
        mut h: Var<'g, T>,
        emb: Var<'g, T>,
        cond: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        for (res, attn) in self.res.iter().zip(&self.attn) {
            h = res.forward(cx, h, emb)?;
            if let Some(a) = attn {
                h = a.forward(cx, h, cond)?;
            }
        }
        Ok(h)
    }
}

/// Noise-predicting U-Net: `(x_t, t, extra embedding, conditioning tokens) -> eps`.
///
/// Conditioning tokens are cross-attended (as extra keys/values) wherever an
/// attention layer exists; `extra_emb` is added to the timestep embedding
/// after its MLP. With no attention resolutions the network is purely
/// convolutional and accepts any spatial size divisible by the downsampling
/// factor.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Stage>,
    downsample: Vec<Conv2d>,
    mid: Stage,
    up: Vec<Stage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let td = c.time_dim();
        let levels = c.channel_multipliers.len();
        let sizes = c.feature_sizes();
        let attn_at = |level: usize| c.attention_resolutions.contains(&sizes[level]);
        let attn_block = |store: &mut ParamStore<T>, n: String, ch: usize, on: bool, rng: &mut Rng| -> Result<_> {
            if on {
                AttnBlock::new(store, &n, ch, c.heads, c.cond_width, rng).map(Some)
            } else {
                Ok(None)
            }
        };

        let time1 = Linear::new(store, &format!("{name}.time1"), c.base_channels, td, rng);
        let time2 = Linear::new(store, &format!("{name}.time2"), td, td, rng);
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), c.in_channels, c.base_channels, 3, 1, rng);

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = c.base_channels;
        for l in 0..levels {
            let out = c.channels(l);
            let mut stage = Stage { res: vec![], attn: vec![] };
            for r in 0..c.resblocks_per_stage {
                let n = format!("{name}.down{l}.{r}");
                stage.res.push(ResBlock::new(store, &n, ch, out, td, c.dropout, rng)?);
                stage.attn.push(attn_block(store, format!("{n}.attn"), out, attn_at(l), rng)?);
                ch = out;
            }
            down.push(stage);
            if l + 1 < levels {
                downsample.push(Conv2d::new(store, &format!("{name}.downsample{l}"), ch, ch, 3, 2, rng));
            }
        }

        let deepest = attn_at(levels - 1);
        let mid = Stage {
            res: vec![
                ResBlock::new(store, &format!("{name}.mid.0"), ch, ch, td, c.dropout, rng)?,
                ResBlock::new(store, &format!("{name}.mid.1"), ch, ch, td, c.dropout, rng)?,
            ],
            attn: vec![attn_block(store, format!("{name}.mid.attn"), ch, deepest, rng)?, None],
        };

        let mut up = Vec::new();
        for l in (0..levels).rev() {
            let out = c.channels(l);
            let mut stage = Stage { res: vec![], attn: vec![] };
            for r in 0..c.resblocks_per_stage {
                let n = format!("{name}.up{l}.{r}");
                let cin = if r == 0 { ch + out } else { ch };
                stage.res.push(ResBlock::new(store, &n, cin, out, td, c.dropout, rng)?);
                stage.attn.push(attn_block(store, format!("{n}.attn"), out, attn_at(l), rng)?);
                ch = out;
            }
            up.push(stage);
        }

        let norm_out = GroupNorm::new(store, &format!("{name}.norm_out"), ch, groups_for(ch))?;
        let conv_out = Conv2d::zeros(store, &format!("{name}.conv_out"), ch, c.out_channels, 3);
        Ok(Self {
            config,
            time1,
            time2,
            conv_in,
            down,
            downsample,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn has_attention(&self) -> bool {
        !self.config.attention_resolutions.is_empty()
    }

    /// Timestep embedding after the MLP, shape [B, time_dim].
    pub fn time_embedding<'g, T: Scalar>(&self, cx: Ctx<'g, T>, t: &[usize]) -> Result<Var<'g, T>> {
        let raw = cx.g.constant(timestep_embed_batch(t, self.config.base_channels)?);
        let h = self.time1.forward(cx, raw)?.gelu();
        self.time2.forward(cx, h)
    }

    /// `x`: [B, in_channels, H, W]; `t`: one timestep per batch item;
    /// `extra_emb`: [B, time_dim]; `cond`: [B, M, cond_width].
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: Ctx<'g, T>,
        x: Var<'g, T>,
        t: &[usize],
        extra_emb: Option<Var<'g, T>>,
        cond: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let s = x.shape();
        let levels = self.config.channel_multipliers.len();
        let factor = 1 << (levels - 1);
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::invalid("denoiser", format!("input shape {s:?}")));
        }
        if self.has_attention() && (s[2] != self.config.image_size || s[3] != self.config.image_size) {
            return Err(Error::invalid(
                "denoiser",
                format!("attention layout fixed to {} pixels, got {s:?}", self.config.image_size),
            ));
        }
        if t.len() != s[0] {
            return Err(Error::invalid("denoiser", format!("{} timesteps for batch {}", t.len(), s[0])));
        }
        let mut emb = self.time_embedding(cx, t)?;
        if let Some(e) = extra_emb {
            emb = emb.add(e)?;
        }

        let mut h = self.conv_in.forward(cx, x)?;
        let mut skips = Vec::with_capacity(levels);
        for (l, stage) in self.down.iter().enumerate() {
            h = stage.forward(cx, h, emb, cond)?;
            skips.push(h);
            if l + 1 < levels {
                h = self.downsample[l].forward(cx, h)?;
            }
        }
        h = self.mid.forward(cx, h, emb, cond)?;
        for (i, stage) in self.up.iter().enumerate() {
            if i > 0 {
                h = h.upsample2x()?;
            }
            let skip = skips.pop().expect("skip per level");
            h = cx.g.concat(&[h, skip], 1)?;
            h = stage.forward(cx, h, emb, cond)?;
        }
        let h = self.norm_out.forward(cx, h)?.gelu();
        self.conv_out.forward(cx, h)
    }
}
