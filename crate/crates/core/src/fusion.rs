//! Additive fusion of image, weather and day-of-year embeddings, and the
//! forward-only temporal transformer that runs along each patch location.

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::nn::{LayerNorm, ParamStore, TransformerBlock};
use crate::numerics::{Bound, Graph, NodeId, RngStream, Scalar};

/// Where each visible token sits. Tokens are stored timestamp-major: all
/// visible patches of timestamp 0 (ascending patch index), then timestamp 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub timestamps: usize,
    pub locations: usize,
    /// `(t, g)` for every token, in storage order.
    pub tokens: Vec<(usize, usize)>,
}

impl TokenLayout {
    pub fn from_plan(plan: &MaskPlan) -> Self {
        let tokens = (0..plan.timestamps())
            .flat_map(|t| plan.unmasked_patches(t).into_iter().map(move |g| (t, g)))
            .collect();
        TokenLayout {
            timestamps: plan.timestamps(),
            locations: plan.locations(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens per timestamp; the layout always has equal counts.
    pub fn per_timestamp(&self) -> usize {
        self.tokens.len() / self.timestamps.max(1)
    }

    pub fn token_times(&self) -> Vec<usize> {
        self.tokens.iter().map(|&(t, _)| t).collect()
    }

    pub fn token_patches(&self) -> Vec<usize> {
        self.tokens.iter().map(|&(_, g)| g).collect()
    }

    /// Row of each token in the full `T·G` grid.
    pub fn grid_rows(&self) -> Vec<usize> {
        self.tokens.iter().map(|&(t, g)| t * self.locations + g).collect()
    }

    /// Tokens of timestamp `t`, as positions into the storage order.
    pub fn rows_of(&self, t: usize) -> std::ops::Range<usize> {
        let k = self.per_timestamp();
        t * k..(t + 1) * k
    }

    /// Location-major ordering: permutation from storage order to per-location
    /// sequences in ascending time, plus the common sequence length.
    pub fn location_major(&self) -> Result<(Vec<usize>, usize)> {
        let mut series: Vec<Vec<usize>> = vec![Vec::new(); self.locations];
        for (i, &(_, g)) in self.tokens.iter().enumerate() {
            series[g].push(i);
        }
        let len = series.first().map_or(0, Vec::len);
        if let Some(g) = series.iter().position(|s| s.len() != len) {
            return Err(Error::Invariant(format!(
                "location {g} has {} visible timestamps, location 0 has {len}",
                series[g].len()
            )));
        }
        Ok((series.concat(), len))
    }
}

/// `spatial[i] + per_timestamp[time of token i]`, where `per_timestamp` is the
/// sum of the matched weather and DOY embeddings, `[T, D]`.
pub fn fuse_add<S: Scalar>(
    g: &mut Graph<S>,
    spatial: NodeId,
    weather: Option<NodeId>,
    doy: NodeId,
    layout: &TokenLayout,
) -> Result<NodeId> {
    if g.shape(doy)[0] != layout.timestamps {
        return Err(Error::Dimension {
            op: "fuse_add",
            lhs: g.shape(doy).to_vec(),
            rhs: vec![layout.timestamps],
        });
    }
    let per_t = match weather {
        Some(w) => g.add(w, doy)?,
        None => doy,
    };
    let spread = g.gather_rows(per_t, &layout.token_times())?;
    g.add(spatial, spread)
}

/// Causal temporal transformer applied independently to every location.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl SequenceEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngStream,
        dim: usize,
        depth: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, rng, &format!("seq.block{i}"), dim, heads, ffn_mult))
            .collect::<Result<_>>()?;
        Ok(SequenceEncoder {
            blocks,
            norm: LayerNorm::new(store, "seq.norm", dim)?,
        })
    }

    /// Maps fused tokens (storage order) to the embedding series, same order.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        fused: NodeId,
        layout: &TokenLayout,
    ) -> Result<NodeId> {
        let (perm, len) = layout.location_major()?;
        let mut x = g.gather_rows(fused, &perm)?;
        for b in &self.blocks {
            x = b.forward(g, p, x, len, true)?;
        }
        let x = self.norm.forward(g, p, x)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &j) in perm.iter().enumerate() {
            inverse[j] = i;
        }
        g.gather_rows(x, &inverse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::build_uniform_mask;
    use crate::numerics::Tensor;

    fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn layout_follows_plan() {
        let plan = build_uniform_mask(4, 16, 0.5, 1).unwrap();
        let l = TokenLayout::from_plan(&plan);
        assert_eq!((l.len(), l.per_timestamp()), (32, 8));
        let (perm, len) = l.location_major().unwrap();
        assert_eq!(len, 2);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        for pair in perm.chunks(2) {
            let (t0, g0) = l.tokens[pair[0]];
            let (t1, g1) = l.tokens[pair[1]];
            assert_eq!(g0, g1);
            assert!(t0 < t1);
        }
    }

    #[test]
    fn unequal_series_is_invariant_violation() {
        let l = TokenLayout {
            timestamps: 2,
            locations: 2,
            tokens: vec![(0, 0), (1, 0)],
        };
        assert!(matches!(l.location_major(), Err(Error::Invariant(_))));
    }

    #[test]
    fn zero_addends_leave_spatial() {
        let l = TokenLayout::from_plan(&MaskPlan::none(3, 4));
        let mut rng = RngStream::new(1, "fuse");
        let mut g = Graph::<f64>::new();
        let s = g.constant(random(&mut rng, &[12, 5]));
        let z = g.constant(Tensor::zeros(&[3, 5]));
        let out = fuse_add(&mut g, s, Some(z), z, &l).unwrap();
        assert_eq!(g.value(out), g.value(s));
    }

    #[test]
    fn fusion_offset_constant_over_patches() {
        let mut rng = RngStream::new(2, "fuse");
        for seed in 0..20 {
            let plan = build_uniform_mask(4, 16, 0.5, seed).unwrap();
            let l = TokenLayout::from_plan(&plan);
            let mut g = Graph::<f64>::new();
            let s = g.constant(random(&mut rng, &[32, 6]));
            let w = g.constant(random(&mut rng, &[4, 6]));
            let d = g.constant(random(&mut rng, &[4, 6]));
            let out = fuse_add(&mut g, s, Some(w), d, &l).unwrap();
            let swapped = fuse_add(&mut g, s, Some(d), w, &l).unwrap();
            for t in 0..4 {
                let rows = l.rows_of(t);
                let diff = |i: usize| -> Vec<f64> {
                    let o = g.value(out).row(i);
                    o.iter().zip(g.value(s).row(i)).map(|(a, b)| a - b).collect()
                };
                let first = diff(rows.start);
                for i in rows {
                    for (a, b) in diff(i).iter().zip(&first) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
            assert_eq!(g.value(out), g.value(swapped));
        }
    }

    #[test]
    fn fuse_length_mismatch() {
        let l = TokenLayout::from_plan(&MaskPlan::none(3, 2));
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::zeros(&[6, 4]));
        let d = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(fuse_add(&mut g, s, None, d, &l), Err(Error::Dimension { .. })));
    }

    fn encoder(seed: u64) -> (ParamStore<f64>, SequenceEncoder) {
        let mut store = ParamStore::new();
        let enc = SequenceEncoder::new(&mut store, &mut RngStream::new(seed, "seq"), 8, 2, 4, 2).unwrap();
        (store, enc)
    }

    fn run(store: &ParamStore<f64>, enc: &SequenceEncoder, x: Tensor<f64>, l: &TokenLayout) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = g.bind(store, |_| false);
        let x = g.constant(x);
        let y = enc.encode(&mut g, &p, x, l).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn last_timestamp_perturbation_leaves_past() {
        let (store, enc) = encoder(3);
        let plan = build_uniform_mask(4, 16, 0.5, 7).unwrap();
        let l = TokenLayout::from_plan(&plan);
        let mut rng = RngStream::new(4, "x");
        let x = random(&mut rng, &[32, 8]);
        let base = run(&store, &enc, x.clone(), &l);
        let mut x2 = x;
        for v in &mut x2.data_mut()[24 * 8..] {
            *v += 10.0;
        }
        let changed = run(&store, &enc, x2, &l);
        assert_eq!(base.data()[..24 * 8], changed.data()[..24 * 8]);
        assert_ne!(base.data()[24 * 8..], changed.data()[24 * 8..]);
    }

    #[test]
    fn single_timestamp_runs() {
        let (store, enc) = encoder(5);
        let l = TokenLayout::from_plan(&MaskPlan::none(1, 4));
        let out = run(&store, &enc, random(&mut RngStream::new(1, "x"), &[4, 8]), &l);
        assert_eq!(out.shape(), &[4, 8]);
    }

    #[test]
    fn identical_location_sequences_identical_outputs() {
        for seed in 0..10 {
            let (store, enc) = encoder(seed);
            let l = TokenLayout::from_plan(&MaskPlan::none(3, 2));
            let mut rng = RngStream::new(seed, "x");
            let row: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[8])).collect();
            let x = Tensor::from_fn(&[6, 8], |i| row[i / 16].data()[i % 8]);
            let out = run(&store, &enc, x, &l);
            for t in 0..3 {
                assert_eq!(out.row(2 * t), out.row(2 * t + 1));
            }
        }
    }
}
