//! The forecaster that carries embeddings to a later date, and the shared
//! per-patch MLP decoder.

use std::str::FromStr;

use crate::encoders::unpatchify;
use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, ParamStore};
use crate::numerics::{Bound, Graph, NodeId, RngStream, Scalar, Tensor};

/// One forecast: the context embedding at index `source` is carried to
/// `target_doy`, `delta` days later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForecastSpec {
    pub source: usize,
    pub target_doy: u16,
    pub delta: u32,
}

/// `C` specs: every context image forecasts the next one, and the last
/// forecasts the target date.
pub fn next_step_targets(doys: &[u16], target_doy: u16) -> Result<Vec<ForecastSpec>> {
    if doys.len() < 2 {
        return Err(Error::Config(format!(
            "forecasting needs at least 2 context images, got {}",
            doys.len()
        )));
    }
    let last = *doys.last().unwrap_or(&0);
    if target_doy <= last {
        return Err(Error::Domain(format!(
            "target DOY {target_doy} is not after the last context DOY {last}"
        )));
    }
    let mut specs = Vec::with_capacity(doys.len());
    for (i, pair) in doys.windows(2).enumerate() {
        if pair[1] <= pair[0] {
            return Err(Error::Domain(format!("context DOYs out of order at index {}", i + 1)));
        }
        specs.push(ForecastSpec {
            source: i,
            target_doy: pair[1],
            delta: (pair[1] - pair[0]) as u32,
        });
    }
    specs.push(ForecastSpec {
        source: doys.len() - 1,
        target_doy,
        delta: (target_doy - last) as u32,
    });
    Ok(specs)
}

/// MLP applied to `source + weather(t_j) + doy(t_j) + delta`.
#[derive(Debug, Clone)]
pub struct Forecaster {
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl Forecaster {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut RngStream, dim: usize) -> Result<Self> {
        Ok(Forecaster {
            l1: Linear::new(store, rng, "forecast.l1", dim, 2 * dim)?,
            l2: Linear::new(store, rng, "forecast.l2", 2 * dim, 2 * dim)?,
            out: Linear::new(store, rng, "forecast.out", 2 * dim, dim)?,
        })
    }

    /// `source` is `[n, D]`. The per-spec addends are `[C, D]` each;
    /// `token_spec[i]` names the spec that token `i` belongs to. A missing
    /// weather addend counts as zero.
    #[allow(clippy::too_many_arguments)]
    pub fn forecast<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        source: NodeId,
        weather: Option<NodeId>,
        doy: NodeId,
        delta: NodeId,
        token_spec: &[usize],
    ) -> Result<NodeId> {
        let mut addend = g.add(doy, delta)?;
        if let Some(w) = weather {
            addend = g.add(w, addend)?;
        }
        let spread = g.gather_rows(addend, token_spec)?;
        let x = g.add(source, spread)?;
        let h = self.l1.forward(g, p, x)?;
        let h = g.tanh(h);
        let h = self.l2.forward(g, p, h)?;
        let h = g.tanh(h);
        self.out.forward(g, p, h)
    }
}

/// Which decoded slots enter the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossScope {
    /// Every patch, including zero-filled slots.
    #[default]
    Full,
    /// Only slots that received an embedding.
    Unmasked,
}

impl FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossScope::Full),
            "unmasked" => Ok(LossScope::Unmasked),
            _ => Err(Error::Config(format!("loss_scope must be full or unmasked, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for LossScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossScope::Full => "full",
            LossScope::Unmasked => "unmasked",
        })
    }
}

/// Per-patch MLP `D → 2D → 6·p²`, shared across timestamps.
#[derive(Debug, Clone)]
pub struct Decoder {
    l1: Linear,
    l2: Linear,
    dim: usize,
}

impl Decoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngStream,
        name: &str,
        dim: usize,
        patch_dim: usize,
    ) -> Result<Self> {
        Ok(Decoder {
            l1: Linear::new(store, rng, &format!("{name}.l1"), dim, 2 * dim)?,
            l2: Linear::new(store, rng, &format!("{name}.l2"), 2 * dim, patch_dim)?,
            dim,
        })
    }

    fn mlp<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let h = self.l1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, p, h)
    }

    /// Repopulates `tokens` at `rows` of a `total`-row patch grid, zero-fills
    /// the rest, and decodes every row. Returns `[total, 6·p²]`.
    pub fn decode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        tokens: NodeId,
        rows: &[usize],
        total: usize,
    ) -> Result<NodeId> {
        if g.shape(tokens)[0] != rows.len() || rows.iter().any(|&r| r >= total) {
            return Err(Error::Dimension {
                op: "decode",
                lhs: g.shape(tokens).to_vec(),
                rhs: vec![rows.len(), total],
            });
        }
        let visible = self.mlp(g, p, tokens)?;
        let placed = g.scatter_rows(visible, rows, total)?;
        if rows.len() == total {
            return Ok(placed);
        }
        // Zero slots all decode to the same patch: decode it once and spread it.
        let zero = g.constant(Tensor::zeros(&[1, self.dim]));
        let filler = self.mlp(g, p, zero)?;
        let mut empty = vec![S::one(); total];
        for &r in rows {
            empty[r] = S::zero();
        }
        let indicator = g.constant(Tensor::new(vec![total, 1], empty)?);
        let spread = g.matmul(indicator, filler)?;
        g.add(placed, spread)
    }
}

/// Mean squared error between decoded patches and target patches, over all
/// rows or only the populated ones.
pub fn reconstruction_loss<S: Scalar>(
    g: &mut Graph<S>,
    decoded: NodeId,
    target: NodeId,
    rows: &[usize],
    scope: LossScope,
) -> Result<NodeId> {
    match scope {
        LossScope::Full => g.mse(decoded, target, None),
        LossScope::Unmasked => {
            let a = g.gather_rows(decoded, rows)?;
            let b = g.gather_rows(target, rows)?;
            g.mse(a, b, None)
        }
    }
}

/// Folds `[T·G, 6·p²]` decoded patches into `T` images of `6 × H × H`.
pub fn fold_series<S: Scalar>(patches: &Tensor<S>, size: usize, patch: usize) -> Result<Vec<Vec<f32>>> {
    let per_image = crate::datamodel::BANDS * size * size;
    let flat = patches.to_f32();
    if !flat.len().is_multiple_of(per_image) {
        return Err(Error::Dimension {
            op: "fold_series",
            lhs: patches.shape().to_vec(),
            rhs: vec![per_image],
        });
    }
    flat.chunks(per_image).map(|c| unpatchify(c, size, patch)).collect()
}
