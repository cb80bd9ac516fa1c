//! Per-modality encoders: a shared patch transformer over timestamps, a
//! unidirectional weather LSTM, and the day-of-year and delta embedders.

use crate::datamodel::{BANDS, WEATHER_CHANNELS};
use crate::error::{Error, Result};
use crate::masking::WeatherMask;
use crate::numerics::nn::{LayerNorm, Linear, ParamId, ParamStore, TransformerBlock};
use crate::numerics::{Bound, Graph, NodeId, RngStream, Scalar, Tensor};

/// Days used to normalize DOY and delta inputs.
pub const DOY_SCALE: f64 = 365.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub hidden: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch: 8,
            hidden: 64,
            vit_depth: 2,
            vit_heads: 4,
            ffn_mult: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.vit_heads == 0 || !self.hidden.is_multiple_of(self.vit_heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} attention heads",
                self.hidden, self.vit_heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn side(&self) -> usize {
        self.image_size / self.patch
    }

    /// Patches per image, G.
    pub fn grid(&self) -> usize {
        self.side() * self.side()
    }

    /// Values per flattened patch, 6·p².
    pub fn patch_dim(&self) -> usize {
        BANDS * self.patch * self.patch
    }
}

/// Splits a `6 × H × H` image into row-major patches of `6·p²` values
/// (band, then row, then column within the patch).
pub fn patchify(image: &[f32], size: usize, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || !size.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image side {size} not divisible by patch size {patch}"
        )));
    }
    if image.len() != BANDS * size * size {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: vec![image.len()],
            rhs: vec![BANDS, size, size],
        });
    }
    let side = size / patch;
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..side {
        for gx in 0..side {
            for b in 0..BANDS {
                for py in 0..patch {
                    let row = b * size * size + (gy * patch + py) * size + gx * patch;
                    out.extend_from_slice(&image[row..row + patch]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f32], size: usize, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || !size.is_multiple_of(patch) || patches.len() != BANDS * size * size {
        return Err(Error::Dimension {
            op: "unpatchify",
            lhs: vec![patches.len()],
            rhs: vec![BANDS, size, size],
        });
    }
    let side = size / patch;
    let mut out = vec![0.0; patches.len()];
    let mut k = 0;
    for gy in 0..side {
        for gx in 0..side {
            for b in 0..BANDS {
                for py in 0..patch {
                    let row = b * size * size + (gy * patch + py) * size + gx * patch;
                    out[row..row + patch].copy_from_slice(&patches[k..k + patch]);
                    k += patch;
                }
            }
        }
    }
    Ok(out)
}

/// Patchifies a whole `T × 6 × H × H` series into `[T·G, 6·p²]` rows.
pub fn patchify_series(images: &[f32], size: usize, patch: usize) -> Result<Vec<f32>> {
    let n = BANDS * size * size;
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks(n) {
        out.extend(patchify(img, size, patch)?);
    }
    Ok(out)
}

/// Vision transformer shared by every timestamp.
#[derive(Debug, Clone)]
pub struct Vit {
    embed: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Vit {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut RngStream, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let embed = Linear::new(store, rng, "vit.embed", cfg.patch_dim(), d)?;
        let pos = store.register(
            "vit.pos",
            Tensor::from_fn(&[cfg.grid(), d], |_| S::of(0.02 * rng.normal())),
        )?;
        let blocks = (0..cfg.vit_depth)
            .map(|i| TransformerBlock::new(store, rng, &format!("vit.block{i}"), d, cfg.vit_heads, cfg.ffn_mult))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, "vit.norm", d)?;
        Ok(Vit {
            embed,
            pos,
            blocks,
            norm,
        })
    }

    /// Encodes patch rows `[n, 6·p²]`. `positions[i]` is the patch index of
    /// row `i`; attention runs within consecutive runs of `group` rows (one
    /// timestamp each).
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        patches: NodeId,
        positions: &[usize],
        group: usize,
    ) -> Result<NodeId> {
        let x = self.embed.forward(g, p, patches)?;
        let pos = g.gather_rows(p.get(self.pos), positions)?;
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, p, x, group, false)?;
        }
        self.norm.forward(g, p, x)
    }
}

/// Row indices of the weather embedding matching each image DOY.
pub fn temporal_match(days: usize, doys: &[u16], start_doy: u16) -> Result<Vec<usize>> {
    doys.iter()
        .map(|&d| {
            (d as usize)
                .checked_sub(start_doy as usize)
                .filter(|&i| i < days)
                .ok_or_else(|| {
                    Error::Range(format!(
                        "DOY {d} outside weather span {start_doy}..{}",
                        start_doy as usize + days
                    ))
                })
        })
        .collect()
}

/// Unidirectional LSTM over daily weather with a per-day reconstruction head.
#[derive(Debug, Clone)]
pub struct WeatherEncoder {
    input: Linear,
    recurrent: ParamId,
    head: Linear,
    /// Channel means (row 0) and standard deviations (row 1); never trained.
    pub norm: ParamId,
    hidden: usize,
}

impl WeatherEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut RngStream, hidden: usize) -> Result<Self> {
        let input = Linear::new(store, rng, "weather.input", WEATHER_CHANNELS + 1, 4 * hidden)?;
        {
            let b = store.get_mut(input.b);
            for x in &mut b.data_mut()[hidden..2 * hidden] {
                *x = S::one();
            }
        }
        let recurrent = store.register(
            "weather.recurrent",
            crate::numerics::nn::xavier(rng, &[hidden, 4 * hidden], hidden, 4 * hidden),
        )?;
        let head = Linear::new(store, rng, "weather.head", hidden, WEATHER_CHANNELS)?;
        let mut norm = Tensor::zeros(&[2, WEATHER_CHANNELS]);
        for x in &mut norm.data_mut()[WEATHER_CHANNELS..] {
            *x = S::one();
        }
        let norm = store.register("weather.norm", norm)?;
        Ok(WeatherEncoder {
            input,
            recurrent,
            head,
            norm,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Normalized `[L, 5]` weather values.
    pub fn normalized<S: Scalar>(&self, g: &Graph<S>, p: &Bound, weather: &[f32]) -> Tensor<S> {
        let stats = g.value(p.get(self.norm)).data();
        let days = weather.len() / WEATHER_CHANNELS;
        Tensor::from_fn(&[days, WEATHER_CHANNELS], |i| {
            let c = i % WEATHER_CHANNELS;
            (S::of(weather[i] as f64) - stats[c]) / stats[WEATHER_CHANNELS + c]
        })
    }

    /// Hidden state per day, `[L, D]`. Masked days are zero-filled and flagged
    /// in a sixth indicator channel.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        weather: &[f32],
        mask: Option<&WeatherMask>,
    ) -> Result<NodeId> {
        let days = weather.len() / WEATHER_CHANNELS;
        if days == 0 {
            return Err(Error::Data("empty weather series".into()));
        }
        if let Some(m) = mask {
            if m.days.len() != days {
                return Err(Error::Dimension {
                    op: "weather_encode",
                    lhs: vec![days],
                    rhs: vec![m.days.len()],
                });
            }
        }
        let norm = self.normalized(g, p, weather);
        let width = WEATHER_CHANNELS + 1;
        let input = Tensor::from_fn(&[days, width], |i| {
            let (d, c) = (i / width, i % width);
            let masked = mask.is_some_and(|m| m.days[d]);
            match (c == WEATHER_CHANNELS, masked) {
                (true, m) => S::of(m as u8 as f64),
                (false, true) => S::zero(),
                (false, false) => norm.data()[d * WEATHER_CHANNELS + c],
            }
        });
        let x = g.constant(input);
        let xw = self.input.forward(g, p, x)?;
        g.lstm(xw, p.get(self.recurrent))
    }

    /// Per-day reconstruction of the normalized weather from hidden states.
    pub fn reconstruct<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, hidden: NodeId) -> Result<NodeId> {
        self.head.forward(g, p, hidden)
    }
}

fn scaled_column<S: Scalar>(values: impl Iterator<Item = f64>) -> Tensor<S> {
    let v: Vec<S> = values.map(|x| S::of(x / DOY_SCALE)).collect();
    let n = v.len();
    Tensor::new(vec![n, 1], v).expect("column")
}

/// `tanh(Linear(doy / 365))`.
#[derive(Debug, Clone)]
pub struct DoyEmbed {
    lin: Linear,
}

impl DoyEmbed {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut RngStream, hidden: usize) -> Result<Self> {
        Ok(DoyEmbed {
            lin: Linear::new(store, rng, "doy.lin", 1, hidden)?,
        })
    }

    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, doys: &[u16]) -> Result<NodeId> {
        if let Some(bad) = doys.iter().find(|&&d| !(1..=365).contains(&d)) {
            return Err(Error::Domain(format!("DOY {bad} outside [1, 365]")));
        }
        let x = g.constant(scaled_column(doys.iter().map(|&d| d as f64)));
        let y = self.lin.forward(g, p, x)?;
        Ok(g.tanh(y))
    }
}

/// `Linear(days / 365)`, no activation.
#[derive(Debug, Clone)]
pub struct DeltaEmbed {
    lin: Linear,
}

impl DeltaEmbed {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut RngStream, hidden: usize) -> Result<Self> {
        Ok(DeltaEmbed {
            lin: Linear::new(store, rng, "delta.lin", 1, hidden)?,
        })
    }

    pub fn embed<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, deltas: &[u32]) -> Result<NodeId> {
        let x = g.constant(scaled_column(deltas.iter().map(|&d| d as f64)));
        self.lin.forward(g, p, x)
    }
}
