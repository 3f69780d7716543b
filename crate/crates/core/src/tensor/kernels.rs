//! Forward and backward kernels shared by the eager evaluator and the tape.

use super::{Array2, Real};

/// Strided matrix view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl View {
    pub const fn rows(offset: usize, cols: usize) -> Self {
        Self { offset, row_stride: cols as isize, col_stride: 1 }
    }

    /// The transpose of a row-major block whose rows are `cols` long.
    pub const fn transposed(offset: usize, cols: usize) -> Self {
        Self { offset, row_stride: 1, col_stride: cols as isize }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    av: View,
    b: &[Real],
    bv: View,
    beta: Real,
    c: &mut [Real],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(bounds_ok(a, av, m, k) && bounds_ok(b, bv, k, n) && bounds_ok(c, cv, m, n));
    // SAFETY: the views were bounds-checked above (debug) and are constructed by
    // callers from the shapes of the slices they index.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride,
            av.col_stride,
            b.as_ptr().add(bv.offset),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride,
            cv.col_stride,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride,
            av.col_stride,
            b.as_ptr().add(bv.offset),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride,
            cv.col_stride,
        );
    }
}

fn bounds_ok(s: &[Real], v: View, rows: usize, cols: usize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    let last = v.offset as isize
        + (rows as isize - 1) * v.row_stride
        + (cols as isize - 1) * v.col_stride;
    last >= 0 && (last as usize) < s.len()
}

pub fn matmul(a: &Array2, b: &Array2) -> Array2 {
    assert_eq!(a.cols(), b.rows(), "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
    let mut out = Array2::zeros(a.rows(), b.cols());
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    gemm(m, k, n, 1.0, a.data(), View::rows(0, k), b.data(), View::rows(0, n), 0.0, out.data_mut(), View::rows(0, n));
    out
}

/// `a^T * g` accumulated into `acc` (shape a.cols x g.cols).
pub fn matmul_tn_acc(a: &Array2, g: &Array2, acc: &mut Array2) {
    let (k, m, n) = (a.rows(), a.cols(), g.cols());
    assert_eq!(g.rows(), k);
    assert_eq!(acc.shape(), (m, n));
    gemm(m, k, n, 1.0, a.data(), View::transposed(0, m), g.data(), View::rows(0, n), 1.0, acc.data_mut(), View::rows(0, n));
}

/// `g * b^T` accumulated into `acc` (shape g.rows x b.rows).
pub fn matmul_nt_acc(g: &Array2, b: &Array2, acc: &mut Array2) {
    let (m, n, k) = (g.rows(), b.rows(), g.cols());
    assert_eq!(b.cols(), k);
    assert_eq!(acc.shape(), (m, n));
    gemm(m, k, n, 1.0, g.data(), View::rows(0, k), b.data(), View::transposed(0, k), 1.0, acc.data_mut(), View::rows(0, n));
}

/// One group of a grouped attention call: query rows attend only to the
/// key/value rows of the same group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

/// Block-diagonal multi-head attention layout.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub groups: Vec<AttnGroup>,
    pub heads: usize,
    /// Per group, `q_len * kv_len` flags in row-major order, `true` = masked.
    pub mask: Option<Vec<bool>>,
    weight_offsets: Vec<usize>,
    weights_per_head: usize,
}

impl AttnLayout {
    pub fn new(groups: Vec<AttnGroup>, heads: usize, mask: Option<Vec<bool>>) -> Self {
        let mut weight_offsets = Vec::with_capacity(groups.len());
        let mut total = 0;
        for g in &groups {
            weight_offsets.push(total);
            total += g.q_len * g.kv_len;
        }
        if let Some(m) = &mask {
            assert_eq!(m.len(), total, "attention mask length mismatch");
        }
        Self { groups, heads, mask, weight_offsets, weights_per_head: total }
    }

    /// A single group covering all of `q` and `kv`.
    pub fn dense(q_rows: usize, kv_rows: usize, heads: usize, mask: Option<Vec<bool>>) -> Self {
        Self::new(
            vec![AttnGroup { q_start: 0, q_len: q_rows, kv_start: 0, kv_len: kv_rows }],
            heads,
            mask,
        )
    }

    /// Query row ranges of length `q_lens[i]` paired with key rows of length `kv_lens[i]`,
    /// both laid out consecutively.
    pub fn from_lengths(q_lens: &[usize], kv_lens: &[usize], heads: usize) -> Self {
        assert_eq!(q_lens.len(), kv_lens.len());
        let (mut q, mut kv) = (0, 0);
        let groups = q_lens
            .iter()
            .zip(kv_lens)
            .map(|(&ql, &kl)| {
                let g = AttnGroup { q_start: q, q_len: ql, kv_start: kv, kv_len: kl };
                q += ql;
                kv += kl;
                g
            })
            .collect();
        Self::new(groups, heads, None)
    }

    pub fn weights_len(&self) -> usize {
        self.weights_per_head * self.heads
    }

    /// True when some query row has every key masked.
    pub fn has_degenerate_row(&self) -> bool {
        let Some(mask) = &self.mask else { return false };
        self.groups.iter().zip(&self.weight_offsets).any(|(g, &off)| {
            (0..g.q_len).any(|r| {
                g.kv_len == 0 || mask[off + r * g.kv_len..off + (r + 1) * g.kv_len].iter().all(|&m| m)
            })
        })
    }
}

const MASK_FILL: Real = -1e30;

/// Grouped multi-head scaled dot-product attention.
///
/// Returns the output (rows of `q`, width d) and the softmax weights of every
/// (head, group) block, which the backward pass needs.
pub fn attention_forward(q: &Array2, k: &Array2, v: &Array2, layout: &AttnLayout) -> (Array2, Array2) {
    let d = q.cols();
    assert_eq!(k.cols(), d, "attention key width mismatch");
    assert_eq!(v.cols(), d, "attention value width mismatch");
    assert_eq!(k.rows(), v.rows(), "attention key/value row mismatch");
    assert!(layout.heads > 0 && d % layout.heads == 0, "width {d} not divisible by {} heads", layout.heads);
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mut weights = Array2::zeros(layout.weights_len(), 1);
    let mut out = Array2::zeros(q.rows(), d);
    for h in 0..layout.heads {
        for (gi, g) in layout.groups.iter().enumerate() {
            if g.q_len == 0 {
                continue;
            }
            let woff = h * layout.weights_per_head + layout.weight_offsets[gi];
            let w = &mut weights.data_mut()[woff..woff + g.q_len * g.kv_len];
            gemm(
                g.q_len,
                dh,
                g.kv_len,
                scale,
                q.data(),
                View::rows(g.q_start * d + h * dh, d),
                k.data(),
                View::transposed(g.kv_start * d + h * dh, d),
                0.0,
                w,
                View::rows(0, g.kv_len),
            );
            let mask = layout
                .mask
                .as_ref()
                .map(|m| &m[layout.weight_offsets[gi]..layout.weight_offsets[gi] + g.q_len * g.kv_len]);
            for r in 0..g.q_len {
                let row = &mut w[r * g.kv_len..(r + 1) * g.kv_len];
                if let Some(mask) = mask {
                    for (x, &masked) in row.iter_mut().zip(&mask[r * g.kv_len..(r + 1) * g.kv_len]) {
                        if masked {
                            *x = MASK_FILL;
                        }
                    }
                }
                softmax_in_place(row);
            }
            let w = &weights.data()[woff..woff + g.q_len * g.kv_len];
            gemm(
                g.q_len,
                g.kv_len,
                dh,
                1.0,
                w,
                View::rows(0, g.kv_len),
                v.data(),
                View::rows(g.kv_start * d + h * dh, d),
                0.0,
                out.data_mut(),
                View::rows(g.q_start * d + h * dh, d),
            );
        }
    }
    (out, weights)
}

/// Gradients of grouped attention with respect to q, k and v.
pub fn attention_backward(
    q: &Array2,
    k: &Array2,
    v: &Array2,
    weights: &Array2,
    layout: &AttnLayout,
    grad_out: &Array2,
) -> (Array2, Array2, Array2) {
    let d = q.cols();
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mut dq = Array2::zeros(q.rows(), d);
    let mut dk = Array2::zeros(k.rows(), d);
    let mut dv = Array2::zeros(v.rows(), d);
    let max_block = layout.groups.iter().map(|g| g.q_len * g.kv_len).max().unwrap_or(0);
    let mut ds = vec![0.0 as Real; max_block];
    for h in 0..layout.heads {
        for (gi, g) in layout.groups.iter().enumerate() {
            if g.q_len == 0 {
                continue;
            }
            let block = g.q_len * g.kv_len;
            let woff = h * layout.weights_per_head + layout.weight_offsets[gi];
            let w = &weights.data()[woff..woff + block];
            // dV += W^T dO
            gemm(
                g.kv_len,
                g.q_len,
                dh,
                1.0,
                w,
                View::transposed(0, g.kv_len),
                grad_out.data(),
                View::rows(g.q_start * d + h * dh, d),
                1.0,
                dv.data_mut(),
                View::rows(g.kv_start * d + h * dh, d),
            );
            // dW = dO V^T
            let ds = &mut ds[..block];
            gemm(
                g.q_len,
                dh,
                g.kv_len,
                1.0,
                grad_out.data(),
                View::rows(g.q_start * d + h * dh, d),
                v.data(),
                View::transposed(g.kv_start * d + h * dh, d),
                0.0,
                ds,
                View::rows(0, g.kv_len),
            );
            // dS = W * (dW - rowsum(dW * W)); masked weights are exactly zero.
            for r in 0..g.q_len {
                let wr = &w[r * g.kv_len..(r + 1) * g.kv_len];
                let dr = &mut ds[r * g.kv_len..(r + 1) * g.kv_len];
                let dot: Real = wr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, &p) in dr.iter_mut().zip(wr) {
                    *x = p * (*x - dot);
                }
            }
            // dQ += scale * dS K ; dK += scale * dS^T Q
            gemm(
                g.q_len,
                g.kv_len,
                dh,
                scale,
                ds,
                View::rows(0, g.kv_len),
                k.data(),
                View::rows(g.kv_start * d + h * dh, d),
                1.0,
                dq.data_mut(),
                View::rows(g.q_start * d + h * dh, d),
            );
            gemm(
                g.kv_len,
                g.q_len,
                dh,
                scale,
                ds,
                View::transposed(0, g.kv_len),
                q.data(),
                View::rows(g.q_start * d + h * dh, d),
                1.0,
                dk.data_mut(),
                View::rows(g.kv_start * d + h * dh, d),
            );
        }
    }
    (dq, dk, dv)
}

/// Numerically stable softmax; entries at or below the mask fill value become exactly 0.
pub fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        let e = if *x <= MASK_FILL { 0.0 } else { (*x - max).exp() };
        *x = e;
        sum += e;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// One softmax group over a contiguous range of logit rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PickGroup {
    pub row_start: usize,
    pub rows: usize,
    /// Flat index `row * cols + col` of the selected action, relative to the group.
    pub target: usize,
}

/// Softmax groups over a logits matrix, with masked entries excluded.
#[derive(Clone, Debug)]
pub struct PickLayout {
    pub groups: Vec<PickGroup>,
    /// One flag per logit entry (`true` = masked), aligned with the logits matrix.
    pub mask: Vec<bool>,
}

impl PickLayout {
    pub fn validate(&self, logits: &Array2) {
        assert_eq!(self.mask.len(), logits.len(), "pick mask length mismatch");
        let c = logits.cols();
        for g in &self.groups {
            assert!(g.row_start + g.rows <= logits.rows(), "pick group out of range");
            assert!(g.target < g.rows * c, "pick target out of range");
            assert!(!self.mask[g.row_start * c + g.target], "pick target is masked");
        }
    }
}

/// Per-group softmax of the unmasked logits. Masked entries get exactly 0.
pub fn group_softmax(logits: &Array2, groups: &[(usize, usize)], mask: &[bool]) -> Vec<Real> {
    let c = logits.cols();
    let mut probs = vec![0.0; logits.len()];
    for &(start, rows) in groups {
        let range = start * c..(start + rows) * c;
        let mut max = Real::NEG_INFINITY;
        for i in range.clone() {
            if !mask[i] {
                max = max.max(logits.data()[i]);
            }
        }
        let mut sum = 0.0;
        for i in range.clone() {
            if !mask[i] {
                let e = (logits.data()[i] - max).exp();
                probs[i] = e;
                sum += e;
            }
        }
        for p in &mut probs[range] {
            *p /= sum;
        }
    }
    probs
}

/// Negative log-probability of each group's target; returns (nll G x 1, probabilities).
pub fn pick_nll_forward(logits: &Array2, layout: &PickLayout) -> (Array2, Vec<Real>) {
    let spans: Vec<(usize, usize)> = layout.groups.iter().map(|g| (g.row_start, g.rows)).collect();
    let probs = group_softmax(logits, &spans, &layout.mask);
    let c = logits.cols();
    let mut out = Array2::zeros(layout.groups.len(), 1);
    for (i, g) in layout.groups.iter().enumerate() {
        let start = g.row_start * c;
        let mut max = Real::NEG_INFINITY;
        for j in start..start + g.rows * c {
            if !layout.mask[j] {
                max = max.max(logits.data()[j]);
            }
        }
        let mut sum = 0.0;
        for j in start..start + g.rows * c {
            if !layout.mask[j] {
                sum += (logits.data()[j] - max).exp();
            }
        }
        // log-sum-exp keeps the loss finite even when the target probability underflows
        out.data_mut()[i] = max + sum.ln() - logits.data()[start + g.target];
    }
    (out, probs)
}

pub fn pick_nll_backward(logits: &Array2, probs: &[Real], layout: &PickLayout, grad_out: &Array2) -> Array2 {
    let c = logits.cols();
    let mut g_logits = Array2::zeros(logits.rows(), c);
    for (i, g) in layout.groups.iter().enumerate() {
        let go = grad_out.data()[i];
        let start = g.row_start * c;
        let gl = g_logits.data_mut();
        for j in start..start + g.rows * c {
            gl[j] = go * probs[j];
        }
        gl[start + g.target] -= go;
    }
    g_logits
}
