use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{self, AttnLayout};
use super::{Array2, Graph, ParamId, ParamStore, Real, TensorError};

/// Single-head scaled dot-product attention `softmax(Q K^T / sqrt(d)) V`.
/// `mask` has `q.rows() * k.rows()` entries, `true` meaning excluded.
pub fn attention(q: &Array2, k: &Array2, v: &Array2, mask: Option<&[bool]>) -> Result<Array2, TensorError> {
    if q.cols() != k.cols() || k.rows() != v.rows() || v.cols() != q.cols() {
        return Err(TensorError::Shape(format!(
            "attention Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != q.rows() * k.rows() {
            return Err(TensorError::Shape("mask must be a x b".into()));
        }
    }
    let layout = AttnLayout::dense(q.rows(), k.rows(), 1, mask.map(<[bool]>::to_vec));
    if layout.has_degenerate_row() {
        return Err(TensorError::DegenerateMask);
    }
    Ok(kernels::attention_forward(q, k, v, &layout).0)
}

/// Projections of one multi-head attention sublayer (no biases).
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MhaParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            wq: store.add_uniform(format!("{prefix}.wq"), d, d, rng),
            wk: store.add_uniform(format!("{prefix}.wk"), d, d, rng),
            wv: store.add_uniform(format!("{prefix}.wv"), d, d, rng),
            wo: store.add_uniform(format!("{prefix}.wo"), d, d, rng),
        }
    }
}

/// `Concat(O_1..O_h) W_O` with `O_i` the attention of head `i` from rows of `x`
/// to rows of `c`, grouped according to `layout`.
pub fn multi_head_attention<'p, G: Graph<'p>>(g: &mut G, x: &G::T, c: &G::T, p: &MhaParams, layout: Rc<AttnLayout>) -> G::T {
    let wq = g.param(p.wq);
    let wk = g.param(p.wk);
    let wv = g.param(p.wv);
    let wo = g.param(p.wo);
    let q = g.matmul(x, &wq);
    let k = g.matmul(c, &wk);
    let v = g.matmul(c, &wv);
    let o = g.attention(&q, &k, &v, layout);
    g.matmul(&o, &wo)
}

/// Multi-head attention followed by a ReLU feed-forward block, each with a
/// residual connection and no normalization.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayerParams {
    pub mha: MhaParams,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

impl AttentionLayerParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, ff_hidden: usize, rng: &mut R) -> Self {
        let mha = MhaParams::init(store, &format!("{prefix}.mha"), d, rng);
        Self {
            mha,
            ff_w1: store.add_uniform(format!("{prefix}.ff.w1"), d, ff_hidden, rng),
            ff_b1: store.add_uniform_shape(format!("{prefix}.ff.b1"), d, 1, ff_hidden, rng),
            ff_w2: store.add_uniform(format!("{prefix}.ff.w2"), ff_hidden, d, rng),
            ff_b2: store.add_uniform_shape(format!("{prefix}.ff.b2"), ff_hidden, 1, d, rng),
        }
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [self.mha.wq, self.mha.wk, self.mha.wv, self.mha.wo, self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2]
    }
}

/// `X' = MHA(X, C) + X; out = FF(X') + X'`.
pub fn attention_layer<'p, G: Graph<'p>>(
    g: &mut G,
    x: &G::T,
    c: &G::T,
    p: &AttentionLayerParams,
    layout: Rc<AttnLayout>,
) -> G::T {
    let m = multi_head_attention(g, x, c, &p.mha, layout);
    let x1 = g.add(&m, x);
    let w1 = g.param(p.ff_w1);
    let b1 = g.param(p.ff_b1);
    let w2 = g.param(p.ff_w2);
    let b2 = g.param(p.ff_b2);
    let h = g.matmul(&x1, &w1);
    let h = g.add_row(&h, &b1);
    let h = g.relu(&h);
    let f = g.matmul(&h, &w2);
    let f = g.add_row(&f, &b2);
    g.add(&f, &x1)
}

/// Probability floor applied by [`cross_entropy`].
pub const CROSS_ENTROPY_FLOOR: Real = 1e-12;

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// `-ln p[target]` for a probability vector; a zero target probability is
/// clamped to [`CROSS_ENTROPY_FLOOR`] and counted in [`cross_entropy_clamp_count`].
pub fn cross_entropy(probabilities: &[Real], target: usize) -> Result<Real, TensorError> {
    if target >= probabilities.len() {
        return Err(TensorError::InvalidDistribution(format!(
            "target {target} out of range for {} classes",
            probabilities.len()
        )));
    }
    if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(TensorError::InvalidDistribution("negative or non-finite probability".into()));
    }
    let total: Real = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(TensorError::InvalidDistribution(format!("probabilities sum to {total}")));
    }
    let mut p = probabilities[target];
    if p < CROSS_ENTROPY_FLOOR {
        CLAMPED.fetch_add(1, Ordering::Relaxed);
        p = CROSS_ENTROPY_FLOOR;
    }
    Ok(-p.ln())
}

pub fn cross_entropy_clamp_count() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}
