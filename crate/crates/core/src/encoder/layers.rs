//! Post-norm transformer layers with optional bottleneck adapters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::Mat;

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal_mat(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    let dist = Normal::new(0.0, std).unwrap();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Dropout state for one forward pass; `None` rate or no RNG means eval mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn eval() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let n = g.value(x).len();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                g.mul_mask(x, mask)
            }
            _ => x,
        }
    }
}

/// Down-projection, GELU, zero-initialized up-projection, residual add.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, prefix: &str, hidden: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Adapter;
        Adapter {
            down_w: store.add(format!("{prefix}.down.weight"), normal_mat(hidden, bottleneck, INIT_STD, rng), g),
            down_b: store.add(format!("{prefix}.down.bias"), Mat::zeros(1, bottleneck), g),
            up_w: store.add(format!("{prefix}.up.weight"), Mat::zeros(bottleneck, hidden), g),
            up_b: store.add(format!("{prefix}.up.bias"), Mat::zeros(1, hidden), g),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = g.linear(x, self.down_w, self.down_b);
        let h = g.gelu(h);
        let h = g.linear(h, self.up_w, self.up_b);
        g.add(x, h)
    }

    pub fn param_count(hidden: usize, bottleneck: usize) -> usize {
        2 * hidden * bottleneck + bottleneck + hidden
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub name: String,
    pub heads: usize,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub adapter: Option<Adapter>,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        intermediate: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bb = ParamGroup::Backbone;
        let ln = ParamGroup::LayerNorm;
        let mut add = |suffix: &str, m: Mat, group| store.add(format!("{name}.{suffix}"), m, group);
        TransformerLayer {
            name: name.to_string(),
            heads,
            qkv_w: add("attn.qkv.weight", normal_mat(hidden, 3 * hidden, INIT_STD, rng), bb),
            qkv_b: add("attn.qkv.bias", Mat::zeros(1, 3 * hidden), bb),
            out_w: add("attn.out.weight", normal_mat(hidden, hidden, INIT_STD, rng), bb),
            out_b: add("attn.out.bias", Mat::zeros(1, hidden), bb),
            ln1_g: add("attn.norm.weight", Mat::from_vec(1, hidden, vec![1.0; hidden]), ln),
            ln1_b: add("attn.norm.bias", Mat::zeros(1, hidden), ln),
            ff1_w: add("ffn.in.weight", normal_mat(hidden, intermediate, INIT_STD, rng), bb),
            ff1_b: add("ffn.in.bias", Mat::zeros(1, intermediate), bb),
            ff2_w: add("ffn.out.weight", normal_mat(intermediate, hidden, INIT_STD, rng), bb),
            ff2_b: add("ffn.out.bias", Mat::zeros(1, hidden), bb),
            ln2_g: add("ffn.norm.weight", Mat::from_vec(1, hidden, vec![1.0; hidden]), ln),
            ln2_b: add("ffn.norm.bias", Mat::zeros(1, hidden), ln),
            adapter: None,
        }
    }

    pub fn add_adapter(&mut self, store: &mut ParamStore, hidden: usize, bottleneck: usize, rng: &mut ChaCha8Rng) {
        let prefix = format!("{}.adapter", self.name);
        self.adapter = Some(Adapter::new(store, &prefix, hidden, bottleneck, rng));
    }

    /// `x` is `T×H`; `key_keep[t]` marks positions that may be attended to.
    pub fn forward(&self, g: &mut Graph, x: NodeId, key_keep: &[bool], dropout: &mut Dropout) -> NodeId {
        let hidden = g.value(x).cols;
        let head_dim = hidden / self.heads;
        let qkv = g.linear(x, self.qkv_w, self.qkv_b);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * head_dim, head_dim);
            let k = g.slice_cols(qkv, hidden + h * head_dim, head_dim);
            let v = g.slice_cols(qkv, 2 * hidden + h * head_dim, head_dim);
            let scores = g.matmul_bt(q, k);
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, key_keep);
            heads.push(g.matmul(probs, v));
        }
        let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn = g.linear(attn, self.out_w, self.out_b);
        let attn = dropout.apply(g, attn);
        let x = g.add(x, attn);
        let x = g.layer_norm(x, self.ln1_g, self.ln1_b);

        let ff = g.linear(x, self.ff1_w, self.ff1_b);
        let ff = g.gelu(ff);
        let ff = g.linear(ff, self.ff2_w, self.ff2_b);
        let ff = dropout.apply(g, ff);
        let ff = match &self.adapter {
            Some(adapter) => adapter.forward(g, ff),
            None => ff,
        };
        let x = g.add(x, ff);
        g.layer_norm(x, self.ln2_g, self.ln2_b)
    }
}
