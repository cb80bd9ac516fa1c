//! Parameter registry and the small set of layers the model is built from.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, NodeId, RngStream, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites the value of an existing parameter, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Compatibility(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Dimension {
                op: "assign",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Uniform in ±√(6/(fan_in+fan_out)).
pub fn xavier<S: Scalar>(rng: &mut RngStream, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| S::of(rng.uniform_range(-bound, bound)))
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngStream,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), xavier(rng, &[fan_in, fan_out], fan_in, fan_out))?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, p.get(self.w))?;
        g.add_row(y, p.get(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(&format!("{name}.gamma"), Tensor::full(&[dim], S::one()))?;
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta))
    }
}

/// Pre-norm transformer block: attention then a GELU feed-forward, each
/// wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
    dim: usize,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut RngStream,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {dim} is not divisible by {heads} attention heads"
            )));
        }
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, ffn_mult * dim)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ffn_mult * dim, dim)?,
            heads,
            dim,
        })
    }

    /// `x` is `[n·group, dim]`; attention runs within each run of `group` rows.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: NodeId,
        group: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let h = self.ln1.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let q = g.slice_cols(qkv, 0, self.dim)?;
        let k = g.slice_cols(qkv, self.dim, self.dim)?;
        let v = g.slice_cols(qkv, 2 * self.dim, self.dim)?;
        let a = g.attention(q, k, v, self.heads, group, causal)?;
        let a = self.proj.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.ff1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, p, h)?;
        g.add(x, h)
    }
}
