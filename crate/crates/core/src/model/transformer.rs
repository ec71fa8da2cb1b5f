use super::params::{BlockSlots, Parameters};
use super::real::{matmul, Real};
use super::{Embedding, ModelConfig, PredictionBatch};
use crate::error::{domain, Error, Result};
use crate::modring::{residue_angle, CirclePoint};

const LN_EPS: f64 = 1e-5;
/// √(2/π), for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Default)]
struct LayerTrace<T> {
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    h2: Vec<T>,
    pre: Vec<T>,
    /// `tanh(c(u + k u³))`, kept for the GELU derivative.
    gate: Vec<T>,
    act: Vec<T>,
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace<T> {
    batch: usize,
    seq: usize,
    tokens: Vec<usize>,
    angular: Vec<T>,
    layers: Vec<LayerTrace<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    pooled: Vec<T>,
}

impl<T> Trace<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, Default)]
struct Scratch<T> {
    x: Vec<T>,
    dx: Vec<T>,
    dh: Vec<T>,
    dqkv: Vec<T>,
    dctx: Vec<T>,
    dact: Vec<T>,
    dpooled: Vec<T>,
    dout: Vec<T>,
    tmp: Vec<T>,
}

/// Reusable buffers for forward/backward passes.
///
/// [`Workspace::forward`] records a trace; [`Workspace::backward`] consumes
/// the most recent one and fails with a usage error when there is none.
#[derive(Debug, Clone, Default)]
pub struct Workspace<T> {
    trace: Trace<T>,
    has_trace: bool,
    scratch: Scratch<T>,
}

/// Inference-only forward pass.
pub fn forward<T: Real>(
    params: &Parameters<T>,
    cfg: &ModelConfig,
    batch: &[&[u64]],
) -> Result<PredictionBatch> {
    Workspace::new().forward(params, cfg, batch)
}

fn reset<T: Real>(v: &mut Vec<T>, n: usize) {
    v.clear();
    v.resize(n, T::zero());
}

impl<T: Real> Workspace<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_trace(&self) -> bool {
        self.has_trace
    }

    pub fn trace(&self) -> Option<&Trace<T>> {
        self.has_trace.then_some(&self.trace)
    }

    /// Drops the recorded trace.
    pub fn clear(&mut self) {
        self.has_trace = false;
    }

    pub fn forward(
        &mut self,
        params: &Parameters<T>,
        cfg: &ModelConfig,
        batch: &[&[u64]],
    ) -> Result<PredictionBatch> {
        self.has_trace = false;
        if params.layout.total != cfg.param_count() {
            return domain("parameters were built for a different model configuration");
        }
        let n = cfg.seq_len;
        for (i, a) in batch.iter().enumerate() {
            if a.len() != n {
                return domain(format!("sample {i} has length {}, expected {n}", a.len()));
            }
            if let Some(&bad) = a.iter().find(|&&t| t >= cfg.q.get()) {
                return domain(format!("sample {i} holds residue {bad} >= q = {}", cfg.q));
            }
        }
        let b = batch.len();
        if b == 0 {
            return Ok(PredictionBatch::default());
        }
        let d = cfg.hidden_dim;
        let rows = b * n;
        let layout = params.layout.clone();
        let tr = &mut self.trace;
        let x = &mut self.scratch.x;
        tr.batch = b;
        tr.seq = n;

        // embedding
        tr.tokens.clear();
        tr.tokens.extend(batch.iter().flat_map(|a| a.iter().map(|&t| t as usize)));
        reset(x, rows * d);
        match cfg.embedding {
            Embedding::Angular => {
                reset(&mut tr.angular, rows * 2);
                for (r, &t) in tr.tokens.iter().enumerate() {
                    let p = CirclePoint::from_angle(residue_angle(t as u64, cfg.q));
                    tr.angular[2 * r] = T::of(p.x);
                    tr.angular[2 * r + 1] = T::of(p.y);
                }
                matmul(&tr.angular, false, params.slot(layout.embed_w), false, x, rows, 2, d, false);
                add_row_bias(x, params.slot(layout.embed_b.expect("angular bias")));
            }
            Embedding::Token => {
                let table = params.slot(layout.embed_w);
                for (r, &t) in tr.tokens.iter().enumerate() {
                    x[r * d..(r + 1) * d].copy_from_slice(&table[t * d..(t + 1) * d]);
                }
            }
        }
        if let Some(pos) = layout.pos {
            let table = params.slot(pos);
            for r in 0..rows {
                let p = r % n;
                for (xv, &pv) in x[r * d..(r + 1) * d].iter_mut().zip(&table[p * d..(p + 1) * d]) {
                    *xv += pv;
                }
            }
        }

        tr.layers.resize_with(cfg.layers, LayerTrace::default);
        tr.layers.truncate(cfg.layers);
        let tmp = &mut self.scratch.tmp;
        for (lt, bs) in tr.layers.iter_mut().zip(&layout.blocks) {
            block_forward(params, bs, cfg, b, x, lt);
        }

        // final norm, mean pool, head
        reset(&mut tr.lnf_xhat, rows * d);
        reset(&mut tr.lnf_rstd, rows);
        reset(tmp, rows * d);
        layer_norm(
            x,
            params.slot(layout.lnf_g),
            params.slot(layout.lnf_b),
            d,
            &mut tr.lnf_xhat,
            &mut tr.lnf_rstd,
            tmp,
        );
        reset(&mut tr.pooled, b * d);
        let inv_n = T::of(1.0 / n as f64);
        for s in 0..b {
            let out = &mut tr.pooled[s * d..(s + 1) * d];
            for t in 0..n {
                let r = s * n + t;
                for (o, &h) in out.iter_mut().zip(&tmp[r * d..(r + 1) * d]) {
                    *o += h;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv_n);
        }
        let mut out = vec![T::zero(); b * 2];
        matmul(&tr.pooled, false, params.slot(layout.head_w), false, &mut out, b, d, 2, false);
        add_row_bias(&mut out, params.slot(layout.head_b));
        self.has_trace = true;
        Ok(PredictionBatch {
            outputs: out
                .chunks_exact(2)
                .map(|o| CirclePoint::new(o[0].f64(), o[1].f64()))
                .collect(),
        })
    }

    /// Gradients of `Σ_i dout_i · (x'_i, y'_i)` with respect to every
    /// parameter, written into `grads` (overwritten, not accumulated).
    pub fn backward(
        &mut self,
        params: &Parameters<T>,
        cfg: &ModelConfig,
        dout: &[(f64, f64)],
        grads: &mut Parameters<T>,
    ) -> Result<()> {
        if !self.has_trace {
            return Err(Error::Usage("backward called without a forward trace".into()));
        }
        let tr = &self.trace;
        if dout.len() != tr.batch {
            return Err(Error::Usage(format!(
                "backward got {} output gradients for a traced batch of {}",
                dout.len(),
                tr.batch
            )));
        }
        if grads.layout.total != params.layout.total {
            return domain("gradient buffer layout does not match the parameters");
        }
        let layout = params.layout.clone();
        grads.fill_zero();
        let (b, n, d) = (tr.batch, tr.seq, cfg.hidden_dim);
        let rows = b * n;
        let sc = &mut self.scratch;

        // head
        reset(&mut sc.dout, b * 2);
        for (o, &(gx, gy)) in sc.dout.chunks_exact_mut(2).zip(dout) {
            o[0] = T::of(gx);
            o[1] = T::of(gy);
        }
        matmul(&tr.pooled, true, &sc.dout, false, grads.slot_mut(layout.head_w), d, b, 2, false);
        add_colsum(grads.slot_mut(layout.head_b), &sc.dout, 2);
        reset(&mut sc.dpooled, b * d);
        matmul(&sc.dout, false, params.slot(layout.head_w), true, &mut sc.dpooled, b, 2, d, false);

        // mean pool
        reset(&mut sc.dh, rows * d);
        let inv_n = T::of(1.0 / n as f64);
        for r in 0..rows {
            let s = r / n;
            for (o, &g) in sc.dh[r * d..(r + 1) * d].iter_mut().zip(&sc.dpooled[s * d..(s + 1) * d]) {
                *o = g * inv_n;
            }
        }
        reset(&mut sc.dx, rows * d);
        layer_norm_backward(
            &sc.dh,
            &tr.lnf_xhat,
            &tr.lnf_rstd,
            params.slot(layout.lnf_g),
            d,
            &mut sc.dx,
            grads,
            layout.lnf_g,
            layout.lnf_b,
        );

        for (lt, bs) in tr.layers.iter().zip(&layout.blocks).rev() {
            block_backward(params, bs, cfg, b, lt, sc, grads);
        }

        // embedding
        let dx = &sc.dx;
        if let Some(pos) = layout.pos {
            let g = grads.slot_mut(pos);
            for r in 0..rows {
                let p = r % n;
                for (o, &v) in g[p * d..(p + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
        }
        match cfg.embedding {
            Embedding::Angular => {
                matmul(&tr.angular, true, dx, false, grads.slot_mut(layout.embed_w), 2, rows, d, false);
                add_colsum(grads.slot_mut(layout.embed_b.expect("angular bias")), dx, d);
            }
            Embedding::Token => {
                let g = grads.slot_mut(layout.embed_w);
                for (r, &t) in tr.tokens.iter().enumerate() {
                    for (o, &v) in g[t * d..(t + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_row_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_colsum<T: Real>(dst: &mut [T], src: &[T], cols: usize) {
    debug_assert_eq!(dst.len(), cols);
    for row in src.chunks_exact(cols) {
        for (o, &v) in dst.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Row-wise layer norm: writes `xhat`, `1/σ` and `y = xhat·g + b`.
fn layer_norm<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
    xhat: &mut [T],
    rstd: &mut [T],
    y: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xh[i] = h;
            yr[i] = h * gain[i] + bias[i];
        }
    }
}

/// Adds `∂L/∂x` into `dx`, and `∂L/∂gain`, `∂L/∂bias` into `grads`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dx: &mut [T],
    grads: &mut Parameters<T>,
    g_slot: usize,
    b_slot: usize,
) {
    {
        let dg = grads.slot_mut(g_slot);
        for (dyr, xhr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
            for i in 0..d {
                dg[i] += dyr[i] * xhr[i];
            }
        }
    }
    add_colsum(grads.slot_mut(b_slot), dy, d);
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xhr = &xhat[r * d..(r + 1) * d];
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for i in 0..d {
            let g = dyr[i] * gain[i];
            mean_g += g;
            mean_gx += g * xhr[i];
        }
        mean_g *= inv_d;
        mean_gx *= inv_d;
        let rs = rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rs * (dyr[i] * gain[i] - mean_g - xhr[i] * mean_gx);
        }
    }
}

#[inline]
fn gelu_gate<T: Real>(u: T) -> T {
    (T::of(GELU_C) * (u + T::of(GELU_K) * u * u * u)).tanh_fast()
}

#[inline]
fn gelu_from_gate<T: Real>(u: T, t: T) -> T {
    T::of(0.5) * u * (T::one() + t)
}

#[inline]
fn gelu_grad_from_gate<T: Real>(u: T, t: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * u * u)
}

fn block_forward<T: Real>(
    params: &Parameters<T>,
    bs: &BlockSlots,
    cfg: &ModelConfig,
    b: usize,
    x: &mut [T],
    lt: &mut LayerTrace<T>,
) {
    let (n, d, f) = (cfg.seq_len, cfg.hidden_dim, cfg.mlp_dim());
    let rows = b * n;

    // attention sublayer
    reset(&mut lt.ln1_xhat, rows * d);
    reset(&mut lt.ln1_rstd, rows);
    reset(&mut lt.h1, rows * d);
    layer_norm(
        x,
        params.slot(bs.ln1_g),
        params.slot(bs.ln1_b),
        d,
        &mut lt.ln1_xhat,
        &mut lt.ln1_rstd,
        &mut lt.h1,
    );
    reset(&mut lt.qkv, rows * 3 * d);
    matmul(&lt.h1, false, params.slot(bs.qkv_w), false, &mut lt.qkv, rows, d, 3 * d, false);
    add_row_bias(&mut lt.qkv, params.slot(bs.qkv_b));
    reset(&mut lt.probs, b * cfg.heads * n * n);
    reset(&mut lt.ctx, rows * d);
    attention_forward(&lt.qkv, &mut lt.probs, &mut lt.ctx, b, n, d, cfg.heads);
    // x += ctx·Wo + bo
    matmul(&lt.ctx, false, params.slot(bs.out_w), false, x, rows, d, d, true);
    add_row_bias(x, params.slot(bs.out_b));

    // MLP sublayer
    reset(&mut lt.ln2_xhat, rows * d);
    reset(&mut lt.ln2_rstd, rows);
    reset(&mut lt.h2, rows * d);
    layer_norm(
        x,
        params.slot(bs.ln2_g),
        params.slot(bs.ln2_b),
        d,
        &mut lt.ln2_xhat,
        &mut lt.ln2_rstd,
        &mut lt.h2,
    );
    reset(&mut lt.pre, rows * f);
    matmul(&lt.h2, false, params.slot(bs.fc_w), false, &mut lt.pre, rows, d, f, false);
    add_row_bias(&mut lt.pre, params.slot(bs.fc_b));
    reset(&mut lt.gate, rows * f);
    reset(&mut lt.act, rows * f);
    for ((a, g), &u) in lt.act.iter_mut().zip(lt.gate.iter_mut()).zip(&lt.pre) {
        *g = gelu_gate(u);
        *a = gelu_from_gate(u, *g);
    }
    matmul(&lt.act, false, params.slot(bs.proj_w), false, x, rows, f, d, true);
    add_row_bias(x, params.slot(bs.proj_b));
}

/// Scaled dot-product attention over each sample's `n` positions.
fn attention_forward<T: Real>(
    qkv: &[T],
    probs: &mut [T],
    ctx: &mut [T],
    b: usize,
    n: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let stride = 3 * d;
    for s in 0..b {
        for h in 0..heads {
            let p = &mut probs[((s * heads + h) * n * n)..((s * heads + h + 1) * n * n)];
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for i in 0..n {
                let qi = &qkv[(s * n + i) * stride + qo..][..dh];
                let row = &mut p[i * n..(i + 1) * n];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    let kj = &qkv[(s * n + j) * stride + ko..][..dh];
                    let dot: T = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum();
                    row[j] = dot * scale;
                    if row[j] > max {
                        max = row[j];
                    }
                }
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                let inv = z.recip();
                row.iter_mut().for_each(|v| *v *= inv);
                let out = &mut ctx[(s * n + i) * d + qo..][..dh];
                for j in 0..n {
                    let w = row[j];
                    let vj = &qkv[(s * n + j) * stride + vo..][..dh];
                    for (o, &v) in out.iter_mut().zip(vj) {
                        *o += w * v;
                    }
                }
            }
        }
    }
}

fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    dctx: &[T],
    dqkv: &mut [T],
    b: usize,
    n: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let stride = 3 * d;
    let mut ds = vec![T::zero(); n * n];
    for s in 0..b {
        for h in 0..heads {
            let p = &probs[((s * heads + h) * n * n)..((s * heads + h + 1) * n * n)];
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            // dP and dV
            for i in 0..n {
                let dci = &dctx[(s * n + i) * d + qo..][..dh];
                for j in 0..n {
                    let vj = &qkv[(s * n + j) * stride + vo..][..dh];
                    ds[i * n + j] = dci.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                    let w = p[i * n + j];
                    let dvj = &mut dqkv[(s * n + j) * stride + vo..][..dh];
                    for (o, &g) in dvj.iter_mut().zip(dci) {
                        *o += w * g;
                    }
                }
            }
            // softmax backward, scaled
            for i in 0..n {
                let row_p = &p[i * n..(i + 1) * n];
                let row = &mut ds[i * n..(i + 1) * n];
                let dot: T = row.iter().zip(row_p).map(|(&a, &c)| a * c).sum();
                for j in 0..n {
                    row[j] = row_p[j] * (row[j] - dot) * scale;
                }
            }
            // dQ and dK
            for i in 0..n {
                for j in 0..n {
                    let g = ds[i * n + j];
                    if g == T::zero() {
                        continue;
                    }
                    let (qi_off, kj_off) = ((s * n + i) * stride + qo, (s * n + j) * stride + ko);
                    for c in 0..dh {
                        let kv = qkv[kj_off + c];
                        let qv = qkv[qi_off + c];
                        dqkv[qi_off + c] += g * kv;
                        dqkv[kj_off + c] += g * qv;
                    }
                }
            }
        }
    }
}

fn block_backward<T: Real>(
    params: &Parameters<T>,
    bs: &BlockSlots,
    cfg: &ModelConfig,
    b: usize,
    lt: &LayerTrace<T>,
    sc: &mut Scratch<T>,
    grads: &mut Parameters<T>,
) {
    let (n, d, f) = (cfg.seq_len, cfg.hidden_dim, cfg.mlp_dim());
    let rows = b * n;

    // MLP: x_out = x_mid + act·W2 + b2
    matmul(&lt.act, true, &sc.dx, false, grads.slot_mut(bs.proj_w), f, rows, d, false);
    add_colsum(grads.slot_mut(bs.proj_b), &sc.dx, d);
    reset(&mut sc.dact, rows * f);
    matmul(&sc.dx, false, params.slot(bs.proj_w), true, &mut sc.dact, rows, d, f, false);
    for ((g, &u), &t) in sc.dact.iter_mut().zip(&lt.pre).zip(&lt.gate) {
        *g *= gelu_grad_from_gate(u, t);
    }
    matmul(&lt.h2, true, &sc.dact, false, grads.slot_mut(bs.fc_w), d, rows, f, false);
    add_colsum(grads.slot_mut(bs.fc_b), &sc.dact, f);
    reset(&mut sc.dh, rows * d);
    matmul(&sc.dact, false, params.slot(bs.fc_w), true, &mut sc.dh, rows, f, d, false);
    layer_norm_backward(
        &sc.dh,
        &lt.ln2_xhat,
        &lt.ln2_rstd,
        params.slot(bs.ln2_g),
        d,
        &mut sc.dx,
        grads,
        bs.ln2_g,
        bs.ln2_b,
    );

    // attention: x_mid = x_in + ctx·Wo + bo
    matmul(&lt.ctx, true, &sc.dx, false, grads.slot_mut(bs.out_w), d, rows, d, false);
    add_colsum(grads.slot_mut(bs.out_b), &sc.dx, d);
    reset(&mut sc.dctx, rows * d);
    matmul(&sc.dx, false, params.slot(bs.out_w), true, &mut sc.dctx, rows, d, d, false);
    reset(&mut sc.dqkv, rows * 3 * d);
    attention_backward(&lt.qkv, &lt.probs, &sc.dctx, &mut sc.dqkv, b, n, d, cfg.heads);
    matmul(&lt.h1, true, &sc.dqkv, false, grads.slot_mut(bs.qkv_w), d, rows, 3 * d, false);
    add_colsum(grads.slot_mut(bs.qkv_b), &sc.dqkv, 3 * d);
    reset(&mut sc.dh, rows * d);
    matmul(&sc.dqkv, false, params.slot(bs.qkv_w), true, &mut sc.dh, rows, 3 * d, d, false);
    layer_norm_backward(
        &sc.dh,
        &lt.ln1_xhat,
        &lt.ln1_rstd,
        params.slot(bs.ln1_g),
        d,
        &mut sc.dx,
        grads,
        bs.ln1_g,
        bs.ln1_b,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for i in -40..=40 {
            let u = i as f64 * 0.1;
            let h = 1e-6;
            let gelu = |x: f64| gelu_from_gate(x, gelu_gate(x));
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad_from_gate(u, gelu_gate(u))).abs() < 1e-8, "u={u}");
        }
    }
}
