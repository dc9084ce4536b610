//! Pre-norm transformer encoder pieces expressed as graph operations.
//!
//! Parameter naming under a block prefix `p`:
//! `p.ln1`, `p.attn.{q,k,v,out}`, `p.ln2`, `p.ff.{fc1,fc2}`.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;

const MASKED_SCORE: f64 = -1e9;

/// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let w = g.param(store, &format!("{prefix}.weight"));
    let b = g.param(store, &format!("{prefix}.bias"));
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let gamma = g.param(store, &format!("{prefix}.gamma"));
    let beta = g.param(store, &format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta)
}

pub fn dropout(g: &mut Graph, x: NodeId, drop: Option<&mut Dropout<'_>>) -> NodeId {
    let Some(d) = drop else { return x };
    if d.p <= 0.0 {
        return x;
    }
    let keep = 1.0 - d.p;
    let dim = g.value(x).dim();
    let mask = Array2::from_shape_fn(dim, |_| {
        if d.rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

pub fn init_block<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize, ff_dim: usize) {
    store.init_layer_norm(&format!("{prefix}.ln1"), dim);
    for p in ["q", "k", "v", "out"] {
        store.init_linear(rng, &format!("{prefix}.attn.{p}"), dim, dim);
    }
    store.init_layer_norm(&format!("{prefix}.ln2"), dim);
    store.init_linear(rng, &format!("{prefix}.ff.fc1"), dim, ff_dim);
    store.init_linear(rng, &format!("{prefix}.ff.fc2"), ff_dim, dim);
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
///
/// When `key_valid` is given, attention scores towards invalid rows are
/// pushed to a large negative value before the softmax.
pub fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    n_heads: usize,
    key_valid: Option<&[bool]>,
) -> NodeId {
    let dim = g.value(x).ncols();
    let n = g.value(x).nrows();
    let head_dim = dim / n_heads;
    let q = linear(g, store, &format!("{prefix}.q"), x);
    let k = linear(g, store, &format!("{prefix}.k"), x);
    let v = linear(g, store, &format!("{prefix}.v"), x);
    let mask = key_valid.map(|valid| {
        let m = Array2::from_shape_fn((n, n), |(_, j)| if valid[j] { 0.0 } else { MASKED_SCORE });
        g.constant(m)
    });
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt);
        let mut scores = g.scale(raw, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m);
        }
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh));
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    linear(g, store, &format!("{prefix}.out"), cat)
}

/// `x + attn(ln1(x))` followed by `x + ff(ln2(x))`.
pub fn encoder_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    n_heads: usize,
    key_valid: Option<&[bool]>,
    mut drop: Option<&mut Dropout<'_>>,
) -> NodeId {
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x);
    let a = self_attention(g, store, &format!("{prefix}.attn"), h, n_heads, key_valid);
    let a = dropout(g, a, drop.as_deref_mut());
    let x = g.add(x, a);

    let h = layer_norm(g, store, &format!("{prefix}.ln2"), x);
    let f = linear(g, store, &format!("{prefix}.ff.fc1"), h);
    let f = g.gelu(f);
    let f = dropout(g, f, drop.as_deref_mut());
    let f = linear(g, store, &format!("{prefix}.ff.fc2"), f);
    let f = dropout(g, f, drop);
    g.add(x, f)
}

/// Zeroes the attention output projection and the second feed-forward layer
/// so that the block reduces to the identity map.
pub fn zero_block_residuals(store: &mut ParamStore, prefix: &str) {
    for name in [
        format!("{prefix}.attn.out.weight"),
        format!("{prefix}.attn.out.bias"),
        format!("{prefix}.ff.fc2.weight"),
        format!("{prefix}.ff.fc2.bias"),
    ] {
        if let Some(t) = store.get_mut(&name) {
            t.fill(0.0);
        }
    }
}
