//! Forward and reverse-mode passes of the attention forecaster.
//!
//! All matrices are row-major. Token activations are `T x d_model`; weight
//! matrices are stored `[in, out]` so a layer computes `y = x W + b`.

use super::params::{BlockOffsets, TransformerWeights};
use super::{TrainingSample, TransformerConfig};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// `out[m x n] = a[m x k] * b[k x n]`
#[inline]
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out[..m * n].fill(0.0);
    mm_acc(a, b, out, m, k, n);
}

/// `out[m x n] += a[m x k] * b[k x n]`
#[inline]
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    match n {
        16 => return mm_acc_fixed::<16>(a, b, out, m, k),
        32 => return mm_acc_fixed::<32>(a, b, out, m, k),
        _ => {}
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `mm_acc` with the row width fixed at compile time, so each output row
/// stays in registers across the reduction.
#[inline(never)]
fn mm_acc_fixed<const N: usize>(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize) {
    let b = &b[..k * N];
    for (i, row) in out[..m * N].chunks_exact_mut(N).enumerate() {
        let row: &mut [f64; N] = row.try_into().unwrap();
        let mut acc = *row;
        for (&s, brow) in a[i * k..(i + 1) * k].iter().zip(b.chunks_exact(N)) {
            let brow: &[f64; N] = brow.try_into().unwrap();
            for j in 0..N {
                acc[j] += s * brow[j];
            }
        }
        *row = acc;
    }
}

/// `out[m x n] += a[k x m]^T * b[k x n]`
#[inline]
fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out[cols x rows] = a[rows x cols]^T`
#[inline]
fn transpose(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

#[inline]
fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[inline]
fn sum_rows_into(x: &[f64], out: &mut [f64]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn softmax_rows(s: &mut [f64], n: usize) {
    for row in s.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Row-wise layer normalization; stores normalized values and inverse std.
fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], xhat: &mut [f64], rstd: &mut [f64], out: &mut [f64]) {
    let d = gamma.len();
    for (t, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[t * d + j] = h;
            out[t * d + j] = h * gamma[j] + beta[j];
        }
    }
}

/// Backward through layer normalization; writes `dx` (overwrites).
fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let d = gamma.len();
    let inv_d = 1.0 / d as f64;
    for t in 0..rstd.len() {
        let go = &dout[t * d..(t + 1) * d];
        let xh = &xhat[t * d..(t + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            dgamma[j] += go[j] * xh[j];
            dbeta[j] += go[j];
            let dxh = go[j] * gamma[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let r = rstd[t];
        for j in 0..d {
            let dxh = go[j] * gamma[j];
            dx[t * d + j] = r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
}

/// Cached activations of one block.
#[derive(Clone, Debug)]
struct BlockCache {
    input: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    concat: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    norm1: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    output: Vec<f64>,
}

impl BlockCache {
    fn new(c: &TransformerConfig) -> Self {
        let (t, d, dk, f) = (c.window, c.d_model, c.d_k(), c.mlp_hidden);
        Self {
            input: vec![0.0; t * d],
            q: vec![vec![0.0; t * dk]; c.heads],
            k: vec![vec![0.0; t * dk]; c.heads],
            v: vec![vec![0.0; t * dk]; c.heads],
            attn: vec![vec![0.0; t * t]; c.heads],
            concat: vec![0.0; t * d],
            xhat1: vec![0.0; t * d],
            rstd1: vec![0.0; t],
            norm1: vec![0.0; t * d],
            ff_pre: vec![0.0; t * f],
            ff_act: vec![0.0; t * f],
            xhat2: vec![0.0; t * d],
            rstd2: vec![0.0; t],
            output: vec![0.0; t * d],
        }
    }
}

/// Reusable buffers for forward/backward passes of one configuration.
#[derive(Clone, Debug)]
pub struct Workspace {
    tokens: Vec<f64>,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    head_pre: Vec<f64>,
    head_act: Vec<f64>,
    output: Vec<f64>,
    // scratch
    scratch_td: Vec<f64>,
    scratch_td2: Vec<f64>,
    scratch_tf: Vec<f64>,
    scratch_tt: Vec<f64>,
    scratch_tdk: Vec<f64>,
    scratch_tdk2: Vec<f64>,
    scratch_tdk3: Vec<f64>,
    scratch_dkt: Vec<f64>,
    d_tokens: Vec<f64>,
    d_tokens2: Vec<f64>,
    d_head: Vec<f64>,
    d_pooled: Vec<f64>,
}

impl Workspace {
    pub fn new(config: &TransformerConfig) -> Self {
        let (t, d, dk, f) = (config.window, config.d_model, config.d_k(), config.mlp_hidden);
        Self {
            tokens: vec![0.0; t * d],
            blocks: (0..config.blocks).map(|_| BlockCache::new(config)).collect(),
            pooled: vec![0.0; d],
            head_pre: vec![0.0; f],
            head_act: vec![0.0; f],
            output: vec![0.0; config.horizon],
            scratch_td: vec![0.0; t * d],
            scratch_td2: vec![0.0; t * d],
            scratch_tf: vec![0.0; t * f],
            scratch_tt: vec![0.0; t * t],
            scratch_tdk: vec![0.0; t * dk],
            scratch_tdk2: vec![0.0; t * dk],
            scratch_tdk3: vec![0.0; t * dk],
            scratch_dkt: vec![0.0; dk * t],
            d_tokens: vec![0.0; t * d],
            d_tokens2: vec![0.0; t * d],
            d_head: vec![0.0; f],
            d_pooled: vec![0.0; d],
        }
    }

    /// Output of the last forward pass.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Row-stochastic attention matrices (`T x T`) of the last forward pass.
    pub fn attention(&self, block: usize, head: usize) -> &[f64] {
        &self.blocks[block].attn[head]
    }
}

/// Transposed weight matrices used in the backward pass.
#[derive(Clone, Debug)]
pub struct Transposed {
    blocks: Vec<TransposedBlock>,
    head1: Vec<f64>,
    head2: Vec<f64>,
}

#[derive(Clone, Debug)]
struct TransposedBlock {
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    merge: Vec<f64>,
    ff1: Vec<f64>,
    ff2: Vec<f64>,
}

impl Transposed {
    pub fn new(weights: &TransformerWeights) -> Self {
        let c = weights.config();
        let (d, dk, f, h) = (c.d_model, c.d_k(), c.mlp_hidden, c.horizon);
        let p = weights.values();
        let o = &weights.layout().offsets;
        let tr = |off: usize, rows: usize, cols: usize| {
            let mut out = vec![0.0; rows * cols];
            transpose(&p[off..off + rows * cols], &mut out, rows, cols);
            out
        };
        Self {
            blocks: o
                .blocks
                .iter()
                .map(|b| TransposedBlock {
                    w_q: b.w_q.iter().map(|&off| tr(off, d, dk)).collect(),
                    w_k: b.w_k.iter().map(|&off| tr(off, d, dk)).collect(),
                    w_v: b.w_v.iter().map(|&off| tr(off, d, dk)).collect(),
                    merge: tr(b.merge_w, d, d),
                    ff1: tr(b.ff1_w, d, f),
                    ff2: tr(b.ff2_w, f, d),
                })
                .collect(),
            head1: tr(o.head1_w, d, f),
            head2: tr(o.head2_w, f, h),
        }
    }
}

fn check_sample(config: &TransformerConfig, sample: &TrainingSample) -> Result<()> {
    let expected = config.input_channels() * config.window;
    if sample.input.len() != expected {
        return Err(Error::ShapeMismatch(format!("input has {} values, expected {expected}", sample.input.len())));
    }
    if !sample.target.is_empty() && sample.target.len() != config.horizon {
        return Err(Error::ShapeMismatch(format!(
            "target has {} values, expected {}",
            sample.target.len(),
            config.horizon
        )));
    }
    Ok(())
}

/// Multi-head self-attention followed by the head merge, for one block.
fn attention_sublayer(p: &[f64], bo: &BlockOffsets, c: &TransformerConfig, cache: &mut BlockCache, merged: &mut [f64], kt: &mut [f64]) {
    let (t, d, dk) = (c.window, c.d_model, c.d_k());
    let scale = 1.0 / (dk as f64).sqrt();
    for h in 0..c.heads {
        mm(&cache.input, &p[bo.w_q[h]..bo.w_q[h] + d * dk], &mut cache.q[h], t, d, dk);
        mm(&cache.input, &p[bo.w_k[h]..bo.w_k[h] + d * dk], &mut cache.k[h], t, d, dk);
        mm(&cache.input, &p[bo.w_v[h]..bo.w_v[h] + d * dk], &mut cache.v[h], t, d, dk);
        transpose(&cache.k[h], kt, t, dk);
        let attn = &mut cache.attn[h];
        mm(&cache.q[h], kt, attn, t, dk, t);
        attn.iter_mut().for_each(|v| *v *= scale);
        softmax_rows(attn, t);
        // head output into its column slice of the concatenation
        for i in 0..t {
            let dst = &mut cache.concat[i * d + h * dk..i * d + (h + 1) * dk];
            dst.fill(0.0);
            for j in 0..t {
                let a = attn[i * t + j];
                let vrow = &cache.v[h][j * dk..(j + 1) * dk];
                for (o, &vv) in dst.iter_mut().zip(vrow) {
                    *o += a * vv;
                }
            }
        }
    }
    mm(&cache.concat, &p[bo.merge_w..bo.merge_w + d * d], merged, t, d, d);
    add_bias(merged, &p[bo.merge_b..bo.merge_b + d]);
}

fn block_forward(p: &[f64], bo: &BlockOffsets, c: &TransformerConfig, cache: &mut BlockCache, scratch_td: &mut [f64], scratch_td2: &mut [f64], kt: &mut [f64]) {
    let (t, d, f) = (c.window, c.d_model, c.mlp_hidden);
    attention_sublayer(p, bo, c, cache, scratch_td, kt);
    // residual
    for (m, x) in scratch_td.iter_mut().zip(&cache.input) {
        *m += x;
    }
    layer_norm(
        scratch_td,
        &p[bo.norm1_g..bo.norm1_g + d],
        &p[bo.norm1_b..bo.norm1_b + d],
        &mut cache.xhat1,
        &mut cache.rstd1,
        &mut cache.norm1,
    );
    mm(&cache.norm1, &p[bo.ff1_w..bo.ff1_w + d * f], &mut cache.ff_pre, t, d, f);
    add_bias(&mut cache.ff_pre, &p[bo.ff1_b..bo.ff1_b + f]);
    for (a, &u) in cache.ff_act.iter_mut().zip(&cache.ff_pre) {
        *a = gelu(u);
    }
    mm(&cache.ff_act, &p[bo.ff2_w..bo.ff2_w + f * d], scratch_td2, t, f, d);
    add_bias(scratch_td2, &p[bo.ff2_b..bo.ff2_b + d]);
    for (r, x) in scratch_td2.iter_mut().zip(&cache.norm1) {
        *r += x;
    }
    layer_norm(
        scratch_td2,
        &p[bo.norm2_g..bo.norm2_g + d],
        &p[bo.norm2_b..bo.norm2_b + d],
        &mut cache.xhat2,
        &mut cache.rstd2,
        &mut cache.output,
    );
}

/// Runs the network on one sample, caching activations in `ws`.
pub fn forward_cached<'w>(weights: &TransformerWeights, sample: &TrainingSample, ws: &'w mut Workspace) -> Result<&'w [f64]> {
    let c = weights.config();
    check_sample(c, sample)?;
    let (t, d, f, h) = (c.window, c.d_model, c.mlp_hidden, c.horizon);
    let cin = c.input_channels();
    let p = weights.values();
    let o = &weights.layout().offsets;

    // input projection: tokens[t][j] = sum_c X[c][t] W[c][j] + b[j]
    let w_in = &p[o.input_w..o.input_w + cin * d];
    mm_tn_zero(&sample.input, w_in, &mut ws.tokens, cin, t, d);
    add_bias(&mut ws.tokens, &p[o.input_b..o.input_b + d]);

    for (bi, bo) in o.blocks.iter().enumerate() {
        let (prev, rest) = ws.blocks.split_at_mut(bi);
        let cache = &mut rest[0];
        if bi == 0 {
            cache.input.copy_from_slice(&ws.tokens);
        } else {
            cache.input.copy_from_slice(&prev[bi - 1].output);
        }
        block_forward(p, bo, c, cache, &mut ws.scratch_td, &mut ws.scratch_td2, &mut ws.scratch_dkt);
    }

    let last = match ws.blocks.last() {
        Some(b) => &b.output,
        None => &ws.tokens,
    };
    ws.pooled.fill(0.0);
    sum_rows_into(last, &mut ws.pooled);
    let inv_t = 1.0 / t as f64;
    ws.pooled.iter_mut().for_each(|v| *v *= inv_t);

    mm(&ws.pooled, &p[o.head1_w..o.head1_w + d * f], &mut ws.head_pre, 1, d, f);
    add_bias(&mut ws.head_pre, &p[o.head1_b..o.head1_b + f]);
    for (a, &u) in ws.head_act.iter_mut().zip(&ws.head_pre) {
        *a = gelu(u);
    }
    mm(&ws.head_act, &p[o.head2_w..o.head2_w + f * h], &mut ws.output, 1, f, h);
    add_bias(&mut ws.output, &p[o.head2_b..o.head2_b + h]);

    if ws.output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("forward activations"));
    }
    Ok(&ws.output)
}

/// `out[m x n] = a[k x m]^T * b[k x n]`
#[inline]
fn mm_tn_zero(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    out.fill(0.0);
    mm_tn_acc(a, b, out, k, m, n);
}

/// Backpropagates `d_output` (gradient of the loss w.r.t. the network
/// output of the last forward pass) and accumulates into `grad`.
pub fn backward_accumulate(
    weights: &TransformerWeights,
    tr: &Transposed,
    sample: &TrainingSample,
    ws: &mut Workspace,
    d_output: &[f64],
    grad: &mut [f64],
) {
    let c = weights.config().clone();
    let (t, d, dk, f, h) = (c.window, c.d_model, c.d_k(), c.mlp_hidden, c.horizon);
    let cin = c.input_channels();
    let p = weights.values();
    let o = &weights.layout().offsets;

    // output head
    mm_tn_acc(&ws.head_act, d_output, &mut grad[o.head2_w..o.head2_w + f * h], 1, f, h);
    for (g, v) in grad[o.head2_b..o.head2_b + h].iter_mut().zip(d_output) {
        *g += v;
    }
    mm(d_output, &tr.head2, &mut ws.d_head, 1, h, f);
    for (dh, &u) in ws.d_head.iter_mut().zip(&ws.head_pre) {
        *dh *= gelu_grad(u);
    }
    mm_tn_acc(&ws.pooled, &ws.d_head, &mut grad[o.head1_w..o.head1_w + d * f], 1, d, f);
    for (g, v) in grad[o.head1_b..o.head1_b + f].iter_mut().zip(&ws.d_head) {
        *g += v;
    }
    mm(&ws.d_head, &tr.head1, &mut ws.d_pooled, 1, f, d);

    // mean pooling
    let inv_t = 1.0 / t as f64;
    for row in ws.d_tokens.chunks_exact_mut(d) {
        for (r, v) in row.iter_mut().zip(&ws.d_pooled) {
            *r = v * inv_t;
        }
    }

    let scale = 1.0 / (dk as f64).sqrt();
    for bi in (0..c.blocks).rev() {
        let bo = &o.blocks[bi];
        let tb = &tr.blocks[bi];
        let cache = &ws.blocks[bi];
        let (gamma2, gamma1) = (&p[bo.norm2_g..bo.norm2_g + d], &p[bo.norm1_g..bo.norm1_g + d]);

        // second layer norm: d_tokens -> d(residual 2) in scratch_td
        {
            let (dg, db) = split_two(grad, bo.norm2_g, bo.norm2_b, d);
            layer_norm_backward(&ws.d_tokens, &cache.xhat2, &cache.rstd2, gamma2, dg, db, &mut ws.scratch_td);
        }
        // feed-forward
        mm_tn_acc(&cache.ff_act, &ws.scratch_td, &mut grad[bo.ff2_w..bo.ff2_w + f * d], t, f, d);
        sum_rows_into(&ws.scratch_td, &mut grad[bo.ff2_b..bo.ff2_b + d]);
        mm(&ws.scratch_td, &tb.ff2, &mut ws.scratch_tf, t, d, f);
        for (g, &u) in ws.scratch_tf.iter_mut().zip(&cache.ff_pre) {
            *g *= gelu_grad(u);
        }
        mm_tn_acc(&cache.norm1, &ws.scratch_tf, &mut grad[bo.ff1_w..bo.ff1_w + d * f], t, d, f);
        sum_rows_into(&ws.scratch_tf, &mut grad[bo.ff1_b..bo.ff1_b + f]);
        // d(norm1) = residual path + feed-forward path
        ws.scratch_td2.copy_from_slice(&ws.scratch_td);
        mm_acc(&ws.scratch_tf, &tb.ff1, &mut ws.scratch_td2, t, f, d);

        // first layer norm -> d(residual 1) in scratch_td
        {
            let (dg, db) = split_two(grad, bo.norm1_g, bo.norm1_b, d);
            layer_norm_backward(&ws.scratch_td2, &cache.xhat1, &cache.rstd1, gamma1, dg, db, &mut ws.scratch_td);
        }

        // residual path into the block input
        ws.d_tokens2.copy_from_slice(&ws.scratch_td);

        // merge layer
        mm_tn_acc(&cache.concat, &ws.scratch_td, &mut grad[bo.merge_w..bo.merge_w + d * d], t, d, d);
        sum_rows_into(&ws.scratch_td, &mut grad[bo.merge_b..bo.merge_b + d]);
        // d(concat) in scratch_td2
        mm(&ws.scratch_td, &tb.merge, &mut ws.scratch_td2, t, d, d);

        for hh in 0..c.heads {
            // d(head out), T x dk
            for i in 0..t {
                ws.scratch_tdk[i * dk..(i + 1) * dk].copy_from_slice(&ws.scratch_td2[i * d + hh * dk..i * d + (hh + 1) * dk]);
            }
            let attn = &cache.attn[hh];
            // dV = A^T dO
            ws.scratch_tdk2.fill(0.0);
            mm_tn_acc(attn, &ws.scratch_tdk, &mut ws.scratch_tdk2, t, t, dk);
            // dA = dO V^T
            transpose(&cache.v[hh], &mut ws.scratch_dkt, t, dk);
            mm(&ws.scratch_tdk, &ws.scratch_dkt, &mut ws.scratch_tt, t, dk, t);
            // dS = A * (dA - rowsum(dA * A)), then fold in the 1/sqrt(dk) scale
            for i in 0..t {
                let arow = &attn[i * t..(i + 1) * t];
                let drow = &mut ws.scratch_tt[i * t..(i + 1) * t];
                let dot: f64 = arow.iter().zip(drow.iter()).map(|(a, g)| a * g).sum();
                for (g, &a) in drow.iter_mut().zip(arow) {
                    *g = a * (*g - dot) * scale;
                }
            }
            // dQ = dS K  (scratch_tdk), dK = dS^T Q (scratch_tdk3)
            mm(&ws.scratch_tt, &cache.k[hh], &mut ws.scratch_tdk, t, t, dk);
            ws.scratch_tdk3.fill(0.0);
            mm_tn_acc(&ws.scratch_tt, &cache.q[hh], &mut ws.scratch_tdk3, t, t, dk);

            mm_tn_acc(&cache.input, &ws.scratch_tdk, &mut grad[bo.w_q[hh]..bo.w_q[hh] + d * dk], t, d, dk);
            mm_tn_acc(&cache.input, &ws.scratch_tdk3, &mut grad[bo.w_k[hh]..bo.w_k[hh] + d * dk], t, d, dk);
            mm_tn_acc(&cache.input, &ws.scratch_tdk2, &mut grad[bo.w_v[hh]..bo.w_v[hh] + d * dk], t, d, dk);

            mm_acc(&ws.scratch_tdk, &tb.w_q[hh], &mut ws.d_tokens2, t, dk, d);
            mm_acc(&ws.scratch_tdk3, &tb.w_k[hh], &mut ws.d_tokens2, t, dk, d);
            mm_acc(&ws.scratch_tdk2, &tb.w_v[hh], &mut ws.d_tokens2, t, dk, d);
        }
        std::mem::swap(&mut ws.d_tokens, &mut ws.d_tokens2);
    }

    // input projection
    mm_acc_channels(&sample.input, &ws.d_tokens, &mut grad[o.input_w..o.input_w + cin * d], cin, t, d);
    sum_rows_into(&ws.d_tokens, &mut grad[o.input_b..o.input_b + d]);
}

/// `out[cin x d] += X[cin x T] * dE[T x d]`
#[inline]
fn mm_acc_channels(x: &[f64], de: &[f64], out: &mut [f64], cin: usize, t: usize, d: usize) {
    mm_acc(x, de, out, cin, t, d);
}

fn split_two(grad: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (left, right) = grad.split_at_mut(b);
    (&mut left[a..a + len], &mut right[..len])
}

/// Network output for one sample.
pub fn forward(weights: &TransformerWeights, sample: &TrainingSample) -> Result<Vec<f64>> {
    let mut ws = Workspace::new(weights.config());
    Ok(forward_cached(weights, sample, &mut ws)?.to_vec())
}

/// One block applied to a `T x d_model` token matrix.
pub fn attention_block(weights: &TransformerWeights, block: usize, x: &[f64]) -> Result<Vec<f64>> {
    let c = weights.config();
    let (t, d) = (c.window, c.d_model);
    if x.len() != t * d || block >= c.blocks {
        return Err(Error::ShapeMismatch(format!("expected {t}x{d} tokens for block {block}")));
    }
    let mut cache = BlockCache::new(c);
    cache.input.copy_from_slice(x);
    let mut s1 = vec![0.0; t * d];
    let mut s2 = vec![0.0; t * d];
    let mut kt = vec![0.0; c.d_k() * t];
    block_forward(weights.values(), &weights.layout().offsets.blocks[block], c, &mut cache, &mut s1, &mut s2, &mut kt);
    if cache.output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("attention block"));
    }
    Ok(cache.output)
}

/// Attention matrices and merged multi-head output of one block's attention
/// sublayer (before the residual), for inspection.
pub fn self_attention(weights: &TransformerWeights, block: usize, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let c = weights.config();
    let (t, d) = (c.window, c.d_model);
    if x.len() != t * d || block >= c.blocks {
        return Err(Error::ShapeMismatch(format!("expected {t}x{d} tokens for block {block}")));
    }
    let mut cache = BlockCache::new(c);
    cache.input.copy_from_slice(x);
    let mut merged = vec![0.0; t * d];
    let mut kt = vec![0.0; c.d_k() * t];
    attention_sublayer(weights.values(), &weights.layout().offsets.blocks[block], c, &mut cache, &mut merged, &mut kt);
    Ok((cache.attn, merged))
}

/// Values `V = X W_V` of one head, for inspection.
pub fn head_values(weights: &TransformerWeights, block: usize, head: usize, x: &[f64]) -> Vec<f64> {
    let c = weights.config();
    let (t, d, dk) = (c.window, c.d_model, c.d_k());
    let off = weights.layout().offsets.blocks[block].w_v[head];
    let mut v = vec![0.0; t * dk];
    mm(x, &weights.values()[off..off + d * dk], &mut v, t, d, dk);
    v
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Gradient of the mean batch MSE with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
    pub loss: f64,
}

/// Exact gradient of the mean over `batch` of per-sample MSE.
pub fn gradient(weights: &TransformerWeights, batch: &[TrainingSample]) -> Result<Gradients> {
    let mut ws = Workspace::new(weights.config());
    let tr = Transposed::new(weights);
    let mut grad = vec![0.0; weights.len()];
    let loss = accumulate_batch(weights, &tr, batch, &mut ws, &mut grad)?;
    Ok(Gradients { values: grad, loss })
}

/// Adds the batch-mean MSE gradient to `grad` and returns the batch-mean loss.
pub(crate) fn accumulate_batch(
    weights: &TransformerWeights,
    tr: &Transposed,
    batch: &[TrainingSample],
    ws: &mut Workspace,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let h = weights.config().horizon;
    let scale = 2.0 / (h as f64 * batch.len() as f64);
    let mut d_out = vec![0.0; h];
    let mut loss = 0.0;
    for sample in batch {
        if sample.target.len() != h {
            return Err(Error::ShapeMismatch(format!("target has {} values, expected {h}", sample.target.len())));
        }
        let out = forward_cached(weights, sample, ws)?;
        loss += mse_loss(out, &sample.target);
        for ((g, &o), &y) in d_out.iter_mut().zip(out).zip(&sample.target) {
            *g = scale * (o - y);
        }
        backward_accumulate(weights, tr, sample, ws, &d_out, grad);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("gradient"));
    }
    Ok(loss / batch.len() as f64)
}
