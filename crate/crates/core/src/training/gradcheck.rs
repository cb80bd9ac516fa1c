//! Finite-difference check of the complete CI-VSF objective in double
//! precision on a miniature world.

use super::phases::{loss_1b, loss_1c, loss_2, Prepared};
use super::weather_stats;
use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::forecast_decode::LossScope;
use crate::masking::{build_weather_mask, MaskPlan};
use crate::model::{FrameworkKind, Model, ModelConfig};
use crate::numerics::grad_check;
use crate::numerics::nn::ParamStore;
use crate::numerics::{Graph, RngStream};
use crate::synthworld::{gen_location, ClimateParams, WorldConfig};

/// Random directions probed per parameter tensor, besides the axis of its
/// largest gradient entry.
const DIRECTIONS: usize = 2;
const EPSILON: f64 = 1e-5;

/// Outcome for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub max_rel_error: f64,
    /// Directional derivatives compared.
    pub checks: usize,
    /// Parameter holding the worst coordinate.
    pub worst: String,
}

/// The model checked: 8×8 images, 4×4 patches, D = 16, C = 3.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 8,
            patch: 4,
            hidden: 16,
            vit_depth: 1,
            vit_heads: 2,
            ffn_mult: 2,
        },
        seq_depth: 1,
        seq_heads: 2,
    }
}

/// Sum of the 1b, 1c and phase-2 losses of a CI-VSF model, whose gradient
/// reaches every trained parameter.
fn objective(
    store: &ParamStore<f64>,
    model: &Model,
    prep: &Prepared,
    seed: u64,
    grads: bool,
) -> Result<(f64, Vec<Option<crate::numerics::Tensor<f64>>>)> {
    let c = 3;
    let s = &prep.sample;
    let input = prep.input(0..c);
    let plan = MaskPlan::none(c, model.grid());
    let mut g = Graph::<f64>::new();
    let p = g.bind(store, |n| n != "weather.norm");
    let days = s.days();
    let wmask = build_weather_mask(days, 0.5, seed)?;
    let a = loss_1b(&mut g, &p, model, &s.weather, &wmask)?.loss;
    let b = loss_1c(&mut g, &p, model, &input, &plan, None, LossScope::Full)?.loss;
    let target = c;
    let d = loss_2(
        &mut g,
        &p,
        model,
        &input,
        s.doys[target],
        prep.patch_slice(target..target + 1),
        &plan,
        LossScope::Full,
        1.0,
    )?
    .loss;
    let ab = g.add(a, b)?;
    let total = g.add(ab, d)?;
    let value = g.value(total).item();
    let grads = if grads {
        g.backward(total)?.params(&p)
    } else {
        Vec::new()
    };
    Ok((value, grads))
}

/// Builds a seeded miniature location and model, then compares analytic and
/// central-difference directional derivatives for every parameter tensor:
/// along seeded Gaussian directions and along its largest gradient entry.
pub fn ci_vsf_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let world = WorldConfig {
        size: 8,
        days: 60,
        field_block: 4,
        ..WorldConfig::default()
    };
    let sample = gen_location(&world, &ClimateParams::for_region(0, 1, seed), seed)?;
    let prep = Prepared::new(sample, 4)?;
    let cfg = check_config();
    let mut f32_store = ParamStore::<f32>::new();
    let model = Model::new(&mut f32_store, &cfg, FrameworkKind::CiVsf, seed)?;
    let (mean, std) = weather_stats(std::slice::from_ref(&prep));
    model.set_weather_norm(&mut f32_store, mean, std);
    let mut store = f32_store.cast::<f64>();

    let (_, grads) = objective(&store, &model, &prep, seed, true)?;
    let mut rng = RngStream::new(seed, "gradcheck/directions");
    let mut worst = (0.0f64, 0usize);
    let mut checks = 0;
    for (i, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let base = store.values_mut()[i].clone();
        let n = grad.len();
        let largest = (0..n).fold(0, |b, j| {
            if grad.data()[j].abs() > grad.data()[b].abs() {
                j
            } else {
                b
            }
        });
        let mut directions: Vec<Vec<f64>> = (0..DIRECTIONS)
            .map(|_| (0..n).map(|_| rng.normal()).collect())
            .collect();
        let mut unit = vec![0.0; n];
        unit[largest] = 1.0;
        directions.push(unit);
        for v in directions {
            let analytic: f64 = grad.data().iter().zip(&v).map(|(g, x)| g * x).sum();
            let err = grad_check(
                |t| {
                    for ((dst, &b), &x) in store.values_mut()[i].data_mut().iter_mut().zip(base.data()).zip(&v) {
                        *dst = b + t[0] * x;
                    }
                    objective(&store, &model, &prep, seed, false).map(|(f, _)| f)
                },
                &[analytic],
                &[0.0],
                EPSILON,
            )?;
            checks += 1;
            if err > worst.0 {
                worst = (err, i);
            }
        }
        store.values_mut()[i] = base;
    }
    let worst_name = store
        .iter()
        .nth(worst.1)
        .map(|(n, _)| n.to_string())
        .unwrap_or_default();
    Ok(GradcheckReport {
        seed,
        max_rel_error: worst.0,
        checks,
        worst: worst_name,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_within_threshold() {
        let r = ci_vsf_gradcheck(0).unwrap();
        assert!(r.checks > 100, "{r:?}");
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
