//! U-Net image encoder: a four-stage residual encoder with stride-2
//! downsampling, a mirrored decoder that upsamples with stride-2 transposed
//! convolutions and concatenates the matching encoder stage, and a 1x1 head
//! giving a dense `[D, H, W]` feature map.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Init, ParamStore, Tensor};

/// Row-major `[C, H, W]` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("image", format!("empty image {channels}x{height}x{width}")));
        }
        if values.len() != channels * height * width {
            return Err(Error::invalid(
                "image",
                format!("{} values for {channels}x{height}x{width}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(ImageGrid { channels, height, width, values })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        ImageGrid { channels, height, width, values: vec![v; channels * height * width] }
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.values[(c * self.height + row) * self.width + col]
    }

    pub fn at_mut(&mut self, c: usize, row: usize, col: usize) -> &mut f64 {
        &mut self.values[(c * self.height + row) * self.width + col]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.values.clone(), &[self.channels, self.height, self.width])
    }
}

/// Gather the feature columns of `map: [D, H, W]` at `(row, col)` pixels
/// into `[N, D]`, in input order.
pub fn sample_pixel_features(map: &Tensor, pixels: &[(usize, usize)]) -> Result<Tensor> {
    let [d, h, w] = *map.shape() else {
        return Err(Error::invalid("sample_pixel_features", format!("expected [D,H,W], got {:?}", map.shape())));
    };
    let mut idx = Vec::with_capacity(pixels.len() * d);
    for &(r, c) in pixels {
        if r >= h || c >= w {
            return Err(Error::invalid("sample_pixel_features", format!("pixel ({r}, {c}) outside {h}x{w}")));
        }
        idx.extend((0..d).map(|k| (k * h + r) * w + c));
    }
    map.gather_flat(&idx, &[pixels.len(), d])
}

/// Concatenate `[C_i, H, W]` maps along the channel axis.
fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let hw = &parts[0].shape()[1..];
    let mut c = 0;
    let mut flat = Vec::with_capacity(parts.len());
    for p in parts {
        if &p.shape()[1..] != hw {
            return Err(Error::shape("concat_channels", parts[0].shape(), p.shape()));
        }
        c += p.shape()[0];
        flat.push(p.reshape(&[1, p.len()])?);
    }
    Tensor::concat_last(&flat)?.reshape(&[c, hw[0], hw[1]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    None,
    /// Per-channel normalisation over the spatial axes with learned scale
    /// and shift.
    Instance,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width of each encoder stage.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub head_dim: usize,
    pub norm: Norm,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { in_channels: 1, channels: vec![16, 32, 64, 128], blocks_per_stage: 1, head_dim: 32, norm: Norm::Instance }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.head_dim == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("image net: in_channels, head_dim and blocks_per_stage must be >= 1".into()));
        }
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return Err(Error::Config(format!("image net needs 4 nonzero stage widths, got {:?}", self.channels)));
        }
        Ok(())
    }

    /// Height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

#[derive(Debug, Clone)]
struct ConvParams {
    w: String,
    b: Option<String>,
    spec: Conv2dSpec,
}

impl ConvParams {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, ci: usize, co: usize, k: usize, spec: Conv2dSpec) -> Result<Self> {
        let mut c = Self::unbiased(ps, rng, prefix, ci, co, k, spec)?;
        c.b = Some(ps.create(format!("{prefix}.b"), &[co], Init::BiasUniform { fan_in: ci * k * k }, rng)?);
        Ok(c)
    }

    /// No bias: used in front of a normalisation that would cancel it.
    fn unbiased(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, ci: usize, co: usize, k: usize, spec: Conv2dSpec) -> Result<Self> {
        let fan_in = ci * k * k;
        let w = ps.create(format!("{prefix}.w"), &[co, ci, k, k], Init::HeUniform { fan_in }, rng)?;
        Ok(ConvParams { w, b: None, spec })
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let b = self.b.as_deref().map(|b| ps.get(b)).transpose()?;
        x.conv2d(ps.get(&self.w)?, b, self.spec)
    }
}

#[derive(Debug, Clone)]
struct NormParams {
    scale: String,
    shift: String,
}

impl NormParams {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize, norm: Norm) -> Result<Option<Self>> {
        if norm == Norm::None {
            return Ok(None);
        }
        let scale = ps.create(format!("{prefix}.scale"), &[c], Init::Constant(1.0), rng)?;
        let shift = ps.create(format!("{prefix}.shift"), &[c], Init::Zeros, rng)?;
        Ok(Some(NormParams { scale, shift }))
    }
}

fn apply_norm(ps: &ParamStore, n: &Option<NormParams>, x: Tensor) -> Result<Tensor> {
    match n {
        None => Ok(x),
        Some(n) => x.instance_norm(NORM_EPS)?.channel_affine(ps.get(&n.scale)?, ps.get(&n.shift)?),
    }
}

/// `relu(norm(conv(relu(norm(conv(x))))) + skip(x))`; the skip is a 1x1
/// projection when the channel count changes. Convolutions carry a bias
/// only when normalisation is off.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: ConvParams,
    norm1: Option<NormParams>,
    conv2: ConvParams,
    norm2: Option<NormParams>,
    proj: Option<String>,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, ci: usize, co: usize, norm: Norm) -> Result<Self> {
        let same = Conv2dSpec::new(1, 1);
        let conv = if norm == Norm::None { ConvParams::new } else { ConvParams::unbiased };
        let conv1 = conv(ps, rng, &format!("{prefix}.conv1"), ci, co, 3, same)?;
        let norm1 = NormParams::new(ps, rng, &format!("{prefix}.norm1"), co, norm)?;
        let conv2 = conv(ps, rng, &format!("{prefix}.conv2"), co, co, 3, same)?;
        let norm2 = NormParams::new(ps, rng, &format!("{prefix}.norm2"), co, norm)?;
        let proj = if ci != co {
            Some(ps.create(format!("{prefix}.proj.w"), &[co, ci, 1, 1], Init::HeUniform { fan_in: ci }, rng)?)
        } else {
            None
        };
        Ok(ResBlock { conv1, norm1, conv2, norm2, proj })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = apply_norm(ps, &self.norm1, self.conv1.forward(ps, x)?)?.relu();
        let h = apply_norm(ps, &self.norm2, self.conv2.forward(ps, &h)?)?;
        let skip = match &self.proj {
            Some(w) => x.conv2d(ps.get(w)?, None, Conv2dSpec::new(1, 0))?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up_w: String,
    up_b: String,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    stem: ConvParams,
    /// Per stage: optional stride-2 downsampling conv, then residual blocks.
    encoder: Vec<(Option<ConvParams>, Vec<ResBlock>)>,
    decoder: Vec<DecoderStage>,
    head: ConvParams,
}

impl UNet {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let stem = ConvParams::new(ps, rng, &format!("{prefix}.stem"), cfg.in_channels, ch[0], 3, Conv2dSpec::new(1, 1))?;
        let mut encoder = Vec::new();
        for s in 0..ch.len() {
            let down = if s == 0 {
                None
            } else {
                Some(ConvParams::new(ps, rng, &format!("{prefix}.enc{s}.down"), ch[s - 1], ch[s], 3, Conv2dSpec::new(2, 1))?)
            };
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ResBlock::new(ps, rng, &format!("{prefix}.enc{s}.block{b}"), ch[s], ch[s], cfg.norm))
                .collect::<Result<Vec<_>>>()?;
            encoder.push((down, blocks));
        }
        let mut decoder = Vec::new();
        for s in (1..ch.len()).rev() {
            let p = format!("{prefix}.dec{s}");
            let up_w = ps.create(format!("{p}.up.w"), &[ch[s], ch[s - 1], 2, 2], Init::HeUniform { fan_in: ch[s] }, rng)?;
            let up_b = ps.create(format!("{p}.up.b"), &[ch[s - 1]], Init::BiasUniform { fan_in: ch[s] }, rng)?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| {
                    let ci = if b == 0 { 2 * ch[s - 1] } else { ch[s - 1] };
                    ResBlock::new(ps, rng, &format!("{p}.block{b}"), ci, ch[s - 1], cfg.norm)
                })
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderStage { up_w, up_b, blocks });
        }
        let head = ConvParams::new(ps, rng, &format!("{prefix}.head"), ch[0], cfg.head_dim, 1, Conv2dSpec::new(1, 0))?;
        Ok(UNet { cfg, stem, encoder, decoder, head })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.head_dim
    }

    /// Dense feature map `[head_dim, H, W]`.
    pub fn forward(&self, ps: &ParamStore, img: &ImageGrid) -> Result<Tensor> {
        let div = self.cfg.divisor();
        if img.channels != self.cfg.in_channels {
            return Err(Error::invalid(
                "unet",
                format!("{} input channels, expected {}", img.channels, self.cfg.in_channels),
            ));
        }
        if img.height % div != 0 || img.width % div != 0 {
            return Err(Error::invalid(
                "unet",
                format!("image {}x{} not divisible by {div}", img.height, img.width),
            ));
        }
        let mut x = self.stem.forward(ps, &img.to_tensor()?)?.relu();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (down, blocks) in &self.encoder {
            if let Some(d) = down {
                x = d.forward(ps, &x)?.relu();
            }
            for b in blocks {
                x = b.forward(ps, &x)?;
            }
            skips.push(x.clone());
        }
        skips.pop();
        for stage in &self.decoder {
            let up = x.conv_transpose2d(ps.get(&stage.up_w)?, Some(ps.get(&stage.up_b)?), Conv2dSpec::new(2, 0))?;
            x = concat_channels(&[up, skips.pop().expect("one skip per decoder stage")])?;
            for b in &stage.blocks {
                x = b.forward(ps, &x)?;
            }
        }
        self.head.forward(ps, &x)
    }
}
