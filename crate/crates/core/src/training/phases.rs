//! Loss graphs for the four pretraining phases.

use crate::datamodel::{Sample, WEATHER_CHANNELS};
use crate::error::{Error, Result};
use crate::forecast_decode::{next_step_targets, reconstruction_loss, LossScope};
use crate::masking::{MaskPlan, WeatherMask};
use crate::model::{FrameworkKind, MaskMode, Model, SeriesInput};
use crate::numerics::{Bound, Graph, NodeId, Scalar, Tensor};

/// A sample with its images already cut into patch rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: Sample,
    /// `[T·G, 6·p²]`.
    pub patches: Vec<f32>,
    pub patch_dim: usize,
    pub grid: usize,
}

impl Prepared {
    pub fn new(sample: Sample, patch: usize) -> Result<Self> {
        let patches = crate::encoders::patchify_series(&sample.images, sample.size, patch)?;
        let side = sample.size / patch;
        Ok(Prepared {
            sample,
            patches,
            patch_dim: crate::datamodel::BANDS * patch * patch,
            grid: side * side,
        })
    }

    fn image_rows(&self) -> usize {
        self.grid * self.patch_dim
    }

    /// Patch rows of images `range`.
    pub fn patch_slice(&self, range: std::ops::Range<usize>) -> &[f32] {
        &self.patches[range.start * self.image_rows()..range.end * self.image_rows()]
    }

    pub fn input(&self, range: std::ops::Range<usize>) -> SeriesInput<'_> {
        SeriesInput {
            patches: self.patch_slice(range.clone()),
            doys: &self.sample.doys[range],
            weather: &self.sample.weather,
            start_doy: self.sample.start_doy,
        }
    }
}

/// Graph nodes produced by one phase loss.
#[derive(Debug, Clone, Copy)]
pub struct PhaseGraph {
    pub loss: NodeId,
    /// Decoded patches, when the phase predicts images.
    pub prediction: Option<NodeId>,
    /// The target patches, when supplied as their own node.
    pub target: Option<NodeId>,
}

fn patch_tensor<S: Scalar>(data: &[f32], cols: usize) -> Result<Tensor<S>> {
    Tensor::from_f32(&[data.len() / cols, cols], data)
}

/// Masked image reconstruction with the ViT alone, each image on its own.
pub fn loss_1a<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    model: &Model,
    patches: &[f32],
    plan: &MaskPlan,
    scope: LossScope,
) -> Result<PhaseGraph> {
    let layout = crate::fusion::TokenLayout::from_plan(plan);
    let total = plan.timestamps() * plan.locations();
    let x = g.constant(patch_tensor(patches, model.config.encoder.patch_dim())?);
    let tokens = model.image_tokens(g, p, x, &layout, MaskMode::Pixels)?;
    let rows = layout.grid_rows();
    let decoded = model.decoder.decode(g, p, tokens, &rows, total)?;
    let loss = reconstruction_loss(g, decoded, x, &rows, scope)?;
    Ok(PhaseGraph {
        loss,
        prediction: Some(decoded),
        target: None,
    })
}

/// Masked reconstruction of every weather channel on every day.
pub fn loss_1b<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    model: &Model,
    weather: &[f32],
    mask: &WeatherMask,
) -> Result<PhaseGraph> {
    let enc = model
        .weather
        .as_ref()
        .ok_or_else(|| Error::Dependency(format!("{} has no weather encoder", model.kind)))?;
    let days = weather.len() / WEATHER_CHANNELS;
    let states = model
        .weather_states(g, p, weather, days, Some(mask))?
        .expect("weather encoder present");
    let recon = enc.reconstruct(g, p, states)?;
    let target = g.constant(enc.normalized(g, p, weather));
    let loss = g.mse(recon, target, None)?;
    Ok(PhaseGraph {
        loss,
        prediction: Some(recon),
        target: Some(target),
    })
}

/// Series reconstruction with embeddings masked after the ViT. MM-MR also
/// reconstructs the (normalized) weather at the image dates.
pub fn loss_1c<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    model: &Model,
    input: &SeriesInput<'_>,
    plan: &MaskPlan,
    weather_mask: Option<&WeatherMask>,
    scope: LossScope,
) -> Result<PhaseGraph> {
    let days = Model::days_through(input.doys, input.start_doy);
    let mask = if model.kind == FrameworkKind::MmMr {
        weather_mask
    } else {
        None
    };
    let enc = model.encode(g, p, input, plan, MaskMode::Embeddings, mask, days)?;
    let rows = enc.layout.grid_rows();
    let total = plan.timestamps() * plan.locations();
    let decoded = model.decoder.decode(g, p, enc.emb, &rows, total)?;
    let x = g.constant(patch_tensor(input.patches, model.config.encoder.patch_dim())?);
    let mut loss = reconstruction_loss(g, decoded, x, &rows, scope)?;
    if let (Some(head), Some(wenc)) = (&model.weather_head, &model.weather) {
        let pooled = g.group_mean(enc.emb, enc.layout.per_timestamp())?;
        let pred = head.forward(g, p, pooled)?;
        let norm = wenc.normalized(g, p, input.weather);
        let idx = crate::encoders::temporal_match(norm.rows(), input.doys, input.start_doy)?;
        let target: Vec<S> = idx.iter().flat_map(|&d| norm.row(d).to_vec()).collect();
        let target = g.constant(Tensor::new(vec![idx.len(), WEATHER_CHANNELS], target)?);
        let wloss = g.mse(pred, target, None)?;
        loss = g.add(loss, wloss)?;
    }
    Ok(PhaseGraph {
        loss,
        prediction: Some(decoded),
        target: None,
    })
}

/// Variable-step forecasting: every context image forecasts the next one and
/// the last forecasts the target. `target_patches` is the target image in
/// patch rows; it enters the graph only through the loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_2<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    model: &Model,
    input: &SeriesInput<'_>,
    target_doy: u16,
    target_patches: &[f32],
    plan: &MaskPlan,
    scope: LossScope,
    k_step_weight: f64,
) -> Result<PhaseGraph> {
    let (Some(forecaster), Some(delta)) = (&model.forecaster, &model.delta) else {
        return Err(Error::Compatibility(format!("{} does not forecast", model.kind)));
    };
    let c = input.doys.len();
    let grid = model.grid();
    let pd = model.config.encoder.patch_dim();
    let specs = next_step_targets(input.doys, target_doy)?;
    let days = (target_doy - input.start_doy) as usize + 1;
    let enc = model.encode(g, p, input, plan, MaskMode::Pixels, None, days)?;
    let target_doys: Vec<u16> = specs.iter().map(|s| s.target_doy).collect();
    let deltas: Vec<u32> = specs.iter().map(|s| s.delta).collect();
    let w = model.matched_weather(g, enc.weather, &target_doys, input.start_doy)?;
    let doy = model.doy.embed(g, p, &target_doys)?;
    let dl = delta.embed(g, p, &deltas)?;
    let fc = forecaster.forecast(g, p, enc.emb, w, doy, dl, &enc.layout.token_times())?;
    let rows = enc.layout.grid_rows();
    let decoded = model.decoder.decode(g, p, fc, &rows, c * grid)?;

    if target_patches.len() != grid * pd {
        return Err(Error::Dimension {
            op: "loss_2",
            lhs: vec![target_patches.len()],
            rhs: vec![grid, pd],
        });
    }
    let mut targets = Vec::with_capacity(c * grid * pd);
    targets.extend_from_slice(&input.patches[grid * pd..]);
    targets.extend_from_slice(target_patches);
    let target = g.variable(patch_tensor(&targets, pd)?);

    let mut weights = vec![S::one(); c * grid * pd];
    for x in &mut weights[(c - 1) * grid * pd..] {
        *x = S::of(k_step_weight);
    }
    if scope == LossScope::Unmasked {
        let mut keep = vec![false; c * grid];
        for &r in &rows {
            keep[r] = true;
        }
        for (r, k) in keep.iter().enumerate() {
            if !k {
                weights[r * pd..(r + 1) * pd].fill(S::zero());
            }
        }
    }
    let loss = g.mse(decoded, target, Some(weights))?;
    Ok(PhaseGraph {
        loss,
        prediction: Some(decoded),
        target: Some(target),
    })
}
