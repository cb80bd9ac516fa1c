//! The assembled network for one pretraining framework.

use std::fmt;
use std::str::FromStr;

use crate::datamodel::WEATHER_CHANNELS;
use crate::encoders::{temporal_match, DeltaEmbed, DoyEmbed, EncoderConfig, Vit, WeatherEncoder};
use crate::error::{Error, Result};
use crate::forecast_decode::{Decoder, Forecaster};
use crate::fusion::{fuse_add, SequenceEncoder, TokenLayout};
use crate::masking::{MaskPlan, WeatherMask};
use crate::numerics::nn::{Linear, ParamStore};
use crate::numerics::{Bound, Graph, NodeId, RngStream, Scalar, Tensor};

/// The four pretraining frameworks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameworkKind {
    /// Single modality, masked reconstruction.
    SmMr,
    /// Multiple modalities, masked reconstruction of both.
    MmMr,
    /// Single modality, variable-step forecasting.
    SmVsf,
    /// Images plus weather, variable-step forecasting.
    CiVsf,
}

impl FrameworkKind {
    pub const ALL: [FrameworkKind; 4] = [
        FrameworkKind::SmMr,
        FrameworkKind::MmMr,
        FrameworkKind::SmVsf,
        FrameworkKind::CiVsf,
    ];

    pub fn uses_weather(self) -> bool {
        matches!(self, FrameworkKind::MmMr | FrameworkKind::CiVsf)
    }

    pub fn forecasts(self) -> bool {
        matches!(self, FrameworkKind::SmVsf | FrameworkKind::CiVsf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FrameworkKind::SmMr => "sm-mr",
            FrameworkKind::MmMr => "mm-mr",
            FrameworkKind::SmVsf => "sm-vsf",
            FrameworkKind::CiVsf => "ci-vsf",
        }
    }

    /// Upper-case label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            FrameworkKind::SmMr => "SM-MR",
            FrameworkKind::MmMr => "MM-MR",
            FrameworkKind::SmVsf => "SM-VSF",
            FrameworkKind::CiVsf => "CI-VSF",
        }
    }
}

impl fmt::Display for FrameworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrameworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FrameworkKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s) || k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown framework {s:?}; expected sm-mr, mm-mr, sm-vsf or ci-vsf"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub seq_depth: usize,
    pub seq_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            seq_depth: 2,
            seq_heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.encoder.hidden
    }
}

/// Whether masking removes image patches before the ViT or removes their
/// embeddings after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Pixels,
    Embeddings,
}

/// One image series with its daily weather, ready for the graph.
#[derive(Debug, Clone)]
pub struct SeriesInput<'a> {
    /// `[T·G, 6·p²]` patch rows.
    pub patches: &'a [f32],
    pub doys: &'a [u16],
    /// Daily weather from `start_doy`, `L × 5`.
    pub weather: &'a [f32],
    pub start_doy: u16,
}

/// Result of running the encoder stack over a series.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub layout: TokenLayout,
    /// Embedding series, one row per visible token in layout order.
    pub emb: NodeId,
    /// Per-day weather states `[days, D]` when the framework reads weather.
    pub weather: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub kind: FrameworkKind,
    pub vit: Vit,
    pub decoder: Decoder,
    pub doy: DoyEmbed,
    pub seq: SequenceEncoder,
    pub weather: Option<WeatherEncoder>,
    pub weather_head: Option<Linear>,
    pub delta: Option<DeltaEmbed>,
    pub forecaster: Option<Forecaster>,
}

impl Model {
    /// Registers every parameter of `kind` in `store`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &ModelConfig,
        kind: FrameworkKind,
        seed: u64,
    ) -> Result<Self> {
        config.encoder.validate()?;
        let d = config.hidden();
        let rng = RngStream::new(seed, "init");
        let vit = Vit::new(store, &mut rng.derive("vit"), &config.encoder)?;
        let decoder = Decoder::new(
            store,
            &mut rng.derive("decoder"),
            "decoder",
            d,
            config.encoder.patch_dim(),
        )?;
        let doy = DoyEmbed::new(store, &mut rng.derive("doy"), d)?;
        let seq = SequenceEncoder::new(
            store,
            &mut rng.derive("seq"),
            d,
            config.seq_depth,
            config.seq_heads,
            config.encoder.ffn_mult,
        )?;
        let weather = kind
            .uses_weather()
            .then(|| WeatherEncoder::new(store, &mut rng.derive("weather"), d))
            .transpose()?;
        let weather_head = (kind == FrameworkKind::MmMr)
            .then(|| {
                Linear::new(
                    store,
                    &mut rng.derive("mm-head"),
                    "mm.weather_head",
                    d,
                    WEATHER_CHANNELS,
                )
            })
            .transpose()?;
        let delta = kind
            .forecasts()
            .then(|| DeltaEmbed::new(store, &mut rng.derive("delta"), d))
            .transpose()?;
        let forecaster = kind
            .forecasts()
            .then(|| Forecaster::new(store, &mut rng.derive("forecaster"), d))
            .transpose()?;
        Ok(Model {
            config: config.clone(),
            kind,
            vit,
            decoder,
            doy,
            seq,
            weather,
            weather_head,
            delta,
            forecaster,
        })
    }

    /// Rebuilds the model around an existing store, checking that the stored
    /// parameter set is exactly the one `kind` expects.
    pub fn attach<S: Scalar>(store: &ParamStore<S>, config: &ModelConfig, kind: FrameworkKind) -> Result<Self> {
        let mut fresh = ParamStore::<S>::new();
        let model = Model::new(&mut fresh, config, kind, 0)?;
        let expected: Vec<&str> = fresh.iter().map(|(n, _)| n).collect();
        let found: Vec<&str> = store.iter().map(|(n, _)| n).filter(|n| is_model_param(n)).collect();
        if let Some(missing) = expected.iter().find(|n| store.by_name(n).is_none()) {
            return Err(Error::Compatibility(format!(
                "checkpoint lacks parameter `{missing}` required by {kind}"
            )));
        }
        if let Some(extra) = found.iter().find(|n| fresh.by_name(n).is_none()) {
            return Err(Error::Compatibility(format!(
                "checkpoint parameter `{extra}` does not belong to {kind}"
            )));
        }
        for (name, v) in fresh.iter() {
            let stored = store.by_name(name).expect("checked above");
            if stored.shape() != v.shape() {
                return Err(Error::Dimension {
                    op: "attach",
                    lhs: v.shape().to_vec(),
                    rhs: stored.shape().to_vec(),
                });
            }
        }
        if expected != found {
            return Err(Error::Compatibility(
                "checkpoint parameter order differs from the model".into(),
            ));
        }
        Ok(model)
    }

    pub fn side(&self) -> usize {
        self.config.encoder.side()
    }

    pub fn grid(&self) -> usize {
        self.config.encoder.grid()
    }

    /// Sets the weather normalization to per-channel means and deviations.
    pub fn set_weather_norm<S: Scalar>(&self, store: &mut ParamStore<S>, mean: [f64; 5], std: [f64; 5]) {
        if let Some(w) = &self.weather {
            let t = store.get_mut(w.norm);
            for c in 0..WEATHER_CHANNELS {
                t.data_mut()[c] = S::of(mean[c]);
                t.data_mut()[WEATHER_CHANNELS + c] = S::of(std[c].max(1e-6));
            }
        }
    }

    /// Encodes the image patches selected by `layout`.
    pub fn image_tokens<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        patches: NodeId,
        layout: &TokenLayout,
        mode: MaskMode,
    ) -> Result<NodeId> {
        let grid = self.grid();
        let rows = g.shape(patches)[0];
        if rows != layout.timestamps * grid {
            return Err(Error::Dimension {
                op: "image_tokens",
                lhs: g.shape(patches).to_vec(),
                rhs: vec![layout.timestamps, grid],
            });
        }
        match mode {
            MaskMode::Pixels => {
                let x = g.gather_rows(patches, &layout.grid_rows())?;
                self.vit
                    .encode(g, p, x, &layout.token_patches(), layout.per_timestamp())
            }
            MaskMode::Embeddings => {
                let positions: Vec<usize> = (0..rows).map(|i| i % grid).collect();
                let all = self.vit.encode(g, p, patches, &positions, grid)?;
                if layout.len() == rows {
                    Ok(all)
                } else {
                    g.gather_rows(all, &layout.grid_rows())
                }
            }
        }
    }

    /// Daily weather states for days `0..days`, or `None` when the framework
    /// never reads weather.
    pub fn weather_states<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        weather: &[f32],
        days: usize,
        mask: Option<&WeatherMask>,
    ) -> Result<Option<NodeId>> {
        let Some(enc) = &self.weather else { return Ok(None) };
        let available = weather.len() / WEATHER_CHANNELS;
        if days > available {
            return Err(Error::Range(format!(
                "weather needed for {days} days, series has {available}"
            )));
        }
        let truncated;
        let mask = match mask {
            Some(m) if m.days.len() != days => {
                truncated = WeatherMask {
                    days: m.days[..days.min(m.days.len())].to_vec(),
                    ratio: m.ratio,
                };
                Some(&truncated)
            }
            other => other,
        };
        enc.encode(g, p, &weather[..days * WEATHER_CHANNELS], mask).map(Some)
    }

    /// Rows of the weather states matching `doys`.
    pub fn matched_weather<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        states: Option<NodeId>,
        doys: &[u16],
        start_doy: u16,
    ) -> Result<Option<NodeId>> {
        let Some(states) = states else { return Ok(None) };
        let idx = temporal_match(g.shape(states)[0], doys, start_doy)?;
        g.gather_rows(states, &idx).map(Some)
    }

    /// Full encoder stack: image tokens, fusion, causal sequence encoder.
    /// Weather states cover days up to `weather_days` (at least through the
    /// last image).
    #[allow(clippy::too_many_arguments)]
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        input: &SeriesInput<'_>,
        plan: &MaskPlan,
        mode: MaskMode,
        weather_mask: Option<&WeatherMask>,
        weather_days: usize,
    ) -> Result<Encoded> {
        let t = input.doys.len();
        if plan.timestamps() != t || plan.locations() != self.grid() {
            return Err(Error::Dimension {
                op: "encode",
                lhs: vec![plan.timestamps(), plan.locations()],
                rhs: vec![t, self.grid()],
            });
        }
        let layout = TokenLayout::from_plan(plan);
        let patch_dim = self.config.encoder.patch_dim();
        let patches = g.constant(Tensor::from_f32(&[t * self.grid(), patch_dim], input.patches)?);
        let spatial = self.image_tokens(g, p, patches, &layout, mode)?;
        let weather = self.weather_states(g, p, input.weather, weather_days, weather_mask)?;
        let matched = self.matched_weather(g, weather, input.doys, input.start_doy)?;
        let doy = self.doy.embed(g, p, input.doys)?;
        let fused = fuse_add(g, spatial, matched, doy, &layout)?;
        let emb = self.seq.encode(g, p, fused, &layout)?;
        Ok(Encoded { layout, emb, weather })
    }

    /// Days of weather needed to cover the last image of `doys`.
    pub fn days_through(doys: &[u16], start_doy: u16) -> usize {
        doys.last().map_or(0, |&d| (d - start_doy) as usize + 1)
    }
}

/// Parameters owned by the pretrained model (as opposed to optimizer moments
/// or fine-tuning heads stored in the same checkpoint).
pub fn is_model_param(name: &str) -> bool {
    !name.starts_with("opt.") && !name.starts_with("head.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::patchify_series;
    use crate::masking::build_uniform_mask;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 8,
                patch: 4,
                hidden: 8,
                vit_depth: 1,
                vit_heads: 2,
                ffn_mult: 2,
            },
            seq_depth: 1,
            seq_heads: 2,
        }
    }

    #[test]
    fn framework_names_roundtrip() {
        for k in FrameworkKind::ALL {
            assert_eq!(k.as_str().parse::<FrameworkKind>().unwrap(), k);
            assert_eq!(k.label().parse::<FrameworkKind>().unwrap(), k);
        }
        assert!(matches!("vsf".parse::<FrameworkKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_sets_per_kind() {
        let names = |k| {
            let mut s = ParamStore::<f32>::new();
            Model::new(&mut s, &tiny_config(), k, 1).unwrap();
            s.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>()
        };
        let sm = names(FrameworkKind::SmMr);
        assert!(!sm.iter().any(|n| n.starts_with("weather") || n.starts_with("forecast")));
        assert!(names(FrameworkKind::MmMr).iter().any(|n| n == "mm.weather_head.w"));
        assert!(names(FrameworkKind::SmVsf).iter().any(|n| n.starts_with("forecast")));
        assert!(!names(FrameworkKind::SmVsf).iter().any(|n| n.starts_with("weather")));
        let ci = names(FrameworkKind::CiVsf);
        assert!(ci.iter().any(|n| n == "weather.norm") && ci.iter().any(|n| n == "delta.lin.w"));
        // one decoder and one ViT regardless of series length
        assert_eq!(ci.iter().filter(|n| n.starts_with("decoder.")).count(), 4);
        assert_eq!(ci.iter().filter(|n| n.as_str() == "vit.embed.w").count(), 1);
    }

    #[test]
    fn attach_enforces_kind() {
        let mut s = ParamStore::<f32>::new();
        Model::new(&mut s, &tiny_config(), FrameworkKind::SmMr, 1).unwrap();
        assert!(Model::attach(&s, &tiny_config(), FrameworkKind::SmMr).is_ok());
        assert!(matches!(
            Model::attach(&s, &tiny_config(), FrameworkKind::CiVsf),
            Err(Error::Compatibility(_))
        ));
        let mut c = ParamStore::<f32>::new();
        Model::new(&mut c, &tiny_config(), FrameworkKind::CiVsf, 1).unwrap();
        assert!(matches!(
            Model::attach(&c, &tiny_config(), FrameworkKind::SmMr),
            Err(Error::Compatibility(_))
        ));
    }

    fn series(t: usize, seed: u64) -> (Vec<f32>, Vec<u16>, Vec<f32>) {
        let mut rng = RngStream::new(seed, "series");
        let images: Vec<f32> = (0..t * 6 * 64).map(|_| rng.uniform() as f32).collect();
        let doys: Vec<u16> = (0..t).map(|i| 3 + 7 * i as u16).collect();
        let weather: Vec<f32> = (0..60 * 5).map(|_| rng.normal() as f32).collect();
        (patchify_series(&images, 8, 4).unwrap(), doys, weather)
    }

    #[test]
    fn encode_shapes_for_both_modes() {
        let mut s = ParamStore::<f64>::new();
        let m = Model::new(&mut s, &tiny_config(), FrameworkKind::CiVsf, 2).unwrap();
        let (patches, doys, weather) = series(4, 1);
        let input = SeriesInput {
            patches: &patches,
            doys: &doys,
            weather: &weather,
            start_doy: 1,
        };
        let plan = build_uniform_mask(4, 4, 0.5, 3).unwrap();
        for mode in [MaskMode::Pixels, MaskMode::Embeddings] {
            let mut g = Graph::new();
            let p = g.bind(&s, |_| true);
            let days = Model::days_through(&doys, 1);
            let e = m.encode(&mut g, &p, &input, &plan, mode, None, days).unwrap();
            assert_eq!(g.shape(e.emb), &[8, 8]);
            assert_eq!(g.shape(e.weather.unwrap()), &[days, 8]);
        }
    }

    #[test]
    fn plan_geometry_mismatch() {
        let mut s = ParamStore::<f64>::new();
        let m = Model::new(&mut s, &tiny_config(), FrameworkKind::SmMr, 2).unwrap();
        let (patches, doys, weather) = series(4, 1);
        let input = SeriesInput {
            patches: &patches,
            doys: &doys,
            weather: &weather,
            start_doy: 1,
        };
        let mut g = Graph::new();
        let p = g.bind(&s, |_| true);
        let plan = MaskPlan::none(3, 4);
        assert!(matches!(
            m.encode(&mut g, &p, &input, &plan, MaskMode::Pixels, None, 30),
            Err(Error::Dimension { .. })
        ));
    }
}
