use std::time::{Duration, Instant};

use crate::error::{invalid, shape_err, Result};
use crate::matcal::{dot, DenseMatrix};

use super::model::{ActivationQuant, Params, ToyModel};

/// Activation capture points: the exact input matrix of a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tap {
    /// Normalized input shared by `attn_q`, `attn_k`, `attn_v`.
    AttnIn(usize),
    /// Concatenated head outputs feeding `attn_o`.
    AttnOut(usize),
    /// Normalized input shared by `mlp_gate` and `mlp_up`.
    MlpIn(usize),
    /// Gated activations feeding `mlp_down`.
    MlpDown(usize),
}

impl Tap {
    pub fn layer(self) -> usize {
        match self {
            Tap::AttnIn(l) | Tap::AttnOut(l) | Tap::MlpIn(l) | Tap::MlpDown(l) => l,
        }
    }
}

/// Per-layer key/value rows for every processed position.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    widths: Vec<usize>,
    len: usize,
}

impl KVCache {
    pub fn new(model: &ToyModel) -> Self {
        let widths: Vec<usize> = model.params.layers.iter().map(|b| b.attn_k.cols()).collect();
        Self {
            keys: vec![Vec::new(); widths.len()],
            values: vec![Vec::new(); widths.len()],
            widths,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every cached position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            for (l, w) in self.widths.iter().enumerate() {
                self.keys[l].truncate(len * w);
                self.values[l].truncate(len * w);
            }
            self.len = len;
        }
    }

    pub fn keys(&self, layer: usize) -> DenseMatrix {
        DenseMatrix::new(self.len, self.widths[layer], self.keys[layer].clone()).expect("cache rows are finite")
    }

    pub fn values(&self, layer: usize) -> DenseMatrix {
        DenseMatrix::new(self.len, self.widths[layer], self.values[layer].clone()).expect("cache rows are finite")
    }
}

/// Wall-clock split of a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BlockTimings {
    pub attention: Duration,
    pub mlp: Duration,
    pub other: Duration,
}

impl BlockTimings {
    pub fn total(&self) -> Duration {
        self.attention + self.mlp + self.other
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: DenseMatrix,
    pub taps: Vec<(Tap, DenseMatrix)>,
    pub timings: Option<BlockTimings>,
}

impl ForwardOutput {
    pub fn tap(&self, tap: Tap) -> Option<&DenseMatrix> {
        self.taps.iter().find(|(t, _)| *t == tap).map(|(_, m)| m)
    }
}

/// Saved activations for reverse-mode differentiation.
#[derive(Debug, Clone)]
pub struct Trace {
    tokens: Vec<usize>,
    layers: Vec<LayerTrace>,
    x_final: DenseMatrix,
    final_rinv: Vec<f64>,
    xf: DenseMatrix,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    x_in: DenseMatrix,
    attn_rinv: Vec<f64>,
    a: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    probs: Vec<DenseMatrix>,
    ctx: DenseMatrix,
    x_mid: DenseMatrix,
    mlp_rinv: Vec<f64>,
    b: DenseMatrix,
    g: DenseMatrix,
    u: DenseMatrix,
    m: DenseMatrix,
}

struct Timer {
    on: bool,
    acc: BlockTimings,
    last: Option<Instant>,
}

#[derive(Clone, Copy)]
enum Segment {
    Attention,
    Mlp,
    Other,
}

impl Timer {
    fn new(on: bool) -> Self {
        Self {
            on,
            acc: BlockTimings::default(),
            last: on.then(Instant::now),
        }
    }

    fn lap(&mut self, seg: Segment) {
        if !self.on {
            return;
        }
        let now = Instant::now();
        let dt = now - self.last.unwrap_or(now);
        self.last = Some(now);
        match seg {
            Segment::Attention => self.acc.attention += dt,
            Segment::Mlp => self.acc.mlp += dt,
            Segment::Other => self.acc.other += dt,
        }
    }
}

impl ToyModel {
    /// Runs the decoder over `tokens`, continuing from `cache` when given.
    ///
    /// Row `t` of the logits scores the token following position `t`. When a
    /// cache is passed, its keys/values are extended with the new positions.
    pub fn forward(&self, tokens: &[usize], taps: &[Tap], cache: Option<&mut KVCache>) -> Result<ForwardOutput> {
        self.forward_impl(tokens, taps, cache, false, None)
    }

    /// Same as [`Self::forward`] but records the attention/MLP/other split.
    pub fn forward_timed(&self, tokens: &[usize], cache: Option<&mut KVCache>) -> Result<ForwardOutput> {
        self.forward_impl(tokens, &[], cache, true, None)
    }

    /// Uncached forward that keeps every intermediate needed by
    /// [`Self::backward_trace`].
    pub fn forward_train(&self, tokens: &[usize]) -> Result<(DenseMatrix, Trace)> {
        let mut trace = Trace {
            tokens: tokens.to_vec(),
            layers: Vec::with_capacity(self.params.layers.len()),
            x_final: DenseMatrix::zeros(0, 0),
            final_rinv: Vec::new(),
            xf: DenseMatrix::zeros(0, 0),
        };
        let out = self.forward_impl(tokens, &[], None, false, Some(&mut trace))?;
        Ok((out.logits, trace))
    }

    /// Gradient of `Σ loss_grads ⊙ logits` with respect to every tensor.
    pub fn backward(&self, tokens: &[usize], loss_grads: &DenseMatrix) -> Result<Params> {
        let (_, trace) = self.forward_train(tokens)?;
        self.backward_trace(&trace, loss_grads)
    }

    fn check_tokens(&self, tokens: &[usize], offset: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid!("forward needs at least one token"));
        }
        if offset + tokens.len() > self.config.max_seq_len {
            return Err(invalid!(
                "context overflow: {} cached + {} new tokens exceeds max_seq_len {}",
                offset,
                tokens.len(),
                self.config.max_seq_len
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(invalid!("token id {bad} out of vocabulary ({})", self.config.vocab_size));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        tokens: &[usize],
        taps: &[Tap],
        mut cache: Option<&mut KVCache>,
        timing: bool,
        mut trace: Option<&mut Trace>,
    ) -> Result<ForwardOutput> {
        let p = &self.params;
        let cfg = &self.config;
        let offset = cache.as_ref().map_or(0, |c| c.len());
        self.check_tokens(tokens, offset)?;
        if let Some(&bad) = taps.iter().find(|t| t.layer() >= p.layers.len()) {
            return Err(invalid!("unknown tap {bad:?}: model has {} layers", p.layers.len()));
        }
        if let Some(c) = cache.as_ref() {
            if c.widths.len() != p.layers.len() {
                return Err(shape_err!("cache was built for a different model"));
            }
        }
        let t_len = tokens.len();
        let d = cfg.d_model;
        let hd = cfg.head_dim;
        let mut timer = Timer::new(timing);
        let mut tap_out = Vec::new();
        let mut capture = |tap: Tap, m: &DenseMatrix| {
            if taps.contains(&tap) {
                tap_out.push((tap, m.clone()));
            }
        };

        let mut x = DenseMatrix::zeros(t_len, d);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            for ((o, e), pe) in row
                .iter_mut()
                .zip(p.token_embedding.row(tok))
                .zip(p.positional_embedding.row(offset + t))
            {
                *o = e + pe;
            }
        }
        timer.lap(Segment::Other);

        for (l, block) in p.layers.iter().enumerate() {
            let x_in = x.clone();
            let (mut a, attn_rinv) = rms_norm(&x, &block.attn_norm, cfg.norm_eps);
            self.quantize_activations(&mut a);
            capture(Tap::AttnIn(l), &a);
            let q = a.matmul(&block.attn_q);
            let k = a.matmul(&block.attn_k);
            let v = a.matmul(&block.attn_v);
            let n_heads = block.attn_q.cols() / hd;
            let mut probs = trace.as_ref().map(|_| Vec::with_capacity(n_heads));
            let mut ctx = match cache.as_deref_mut() {
                Some(c) => {
                    c.keys[l].extend_from_slice(k.data());
                    c.values[l].extend_from_slice(v.data());
                    attend(&q, &c.keys[l], &c.values[l], offset, n_heads, hd, probs.as_mut())
                }
                None => attend(&q, k.data(), v.data(), 0, n_heads, hd, probs.as_mut()),
            };
            self.quantize_activations(&mut ctx);
            capture(Tap::AttnOut(l), &ctx);
            x.add_assign(&ctx.matmul(&block.attn_o));
            timer.lap(Segment::Attention);

            let x_mid = x.clone();
            let (mut b, mlp_rinv) = rms_norm(&x, &block.mlp_norm, cfg.norm_eps);
            self.quantize_activations(&mut b);
            capture(Tap::MlpIn(l), &b);
            let g = b.matmul(&block.mlp_gate);
            let u = b.matmul(&block.mlp_up);
            let mut m = DenseMatrix::zeros(t_len, g.cols());
            for ((o, &gv), &uv) in m.data_mut().iter_mut().zip(g.data()).zip(u.data()) {
                *o = silu(gv) * uv;
            }
            self.quantize_activations(&mut m);
            capture(Tap::MlpDown(l), &m);
            x.add_assign(&m.matmul(&block.mlp_down));
            timer.lap(Segment::Mlp);

            if let Some(tr) = trace.as_deref_mut() {
                tr.layers.push(LayerTrace {
                    x_in,
                    attn_rinv,
                    a,
                    q,
                    k,
                    v,
                    probs: probs.unwrap_or_default(),
                    ctx,
                    x_mid,
                    mlp_rinv,
                    b,
                    g,
                    u,
                    m,
                });
            }
        }
        if let Some(c) = cache {
            c.len += t_len;
        }

        let (xf, final_rinv) = rms_norm(&x, &p.final_norm, cfg.norm_eps);
        let logits = xf.matmul(&p.unembedding);
        timer.lap(Segment::Other);
        if let Some(tr) = trace {
            tr.x_final = x;
            tr.final_rinv = final_rinv;
            tr.xf = xf;
        }
        logits.ensure_finite("forward")?;
        Ok(ForwardOutput {
            logits,
            taps: tap_out,
            timings: timing.then_some(timer.acc),
        })
    }

    fn quantize_activations(&self, x: &mut DenseMatrix) {
        if self.act_quant == ActivationQuant::Int8PerToken {
            for r in 0..x.rows() {
                let row = x.row_mut(r);
                let absmax = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if absmax > 0.0 {
                    let scale = absmax / 127.0;
                    for v in row.iter_mut() {
                        *v = (*v / scale).round().clamp(-127.0, 127.0) * scale;
                    }
                }
            }
        }
    }

    /// Reverse pass over a saved trace. Activation fake-quantization is
    /// treated as identity (straight-through).
    pub fn backward_trace(&self, trace: &Trace, loss_grads: &DenseMatrix) -> Result<Params> {
        let p = &self.params;
        let cfg = &self.config;
        let t_len = trace.tokens.len();
        if loss_grads.shape() != (t_len, cfg.vocab_size) {
            return Err(shape_err!(
                "loss gradient is {}x{}, expected {}x{}",
                loss_grads.rows(),
                loss_grads.cols(),
                t_len,
                cfg.vocab_size
            ));
        }
        if !loss_grads.is_finite() {
            return Err(invalid!("loss gradient has non-finite entries"));
        }
        let mut grads = p.zeros_like();
        let hd = cfg.head_dim;

        grads.unembedding = trace.xf.t_matmul(loss_grads);
        let dxf = loss_grads.matmul_t(&p.unembedding);
        let mut dx = rms_norm_backward(
            &trace.x_final,
            &trace.final_rinv,
            &p.final_norm,
            &dxf,
            &mut grads.final_norm,
        );

        for (l, block) in p.layers.iter().enumerate().rev() {
            let lt = &trace.layers[l];
            let gb = &mut grads.layers[l];

            // MLP
            gb.mlp_down = lt.m.t_matmul(&dx);
            let dm = dx.matmul_t(&block.mlp_down);
            let mut dg = DenseMatrix::zeros(t_len, lt.g.cols());
            let mut du = DenseMatrix::zeros(t_len, lt.g.cols());
            for i in 0..dm.data().len() {
                let gv = lt.g.data()[i];
                let uv = lt.u.data()[i];
                let dmv = dm.data()[i];
                du.data_mut()[i] = dmv * silu(gv);
                dg.data_mut()[i] = dmv * uv * silu_grad(gv);
            }
            gb.mlp_gate = lt.b.t_matmul(&dg);
            gb.mlp_up = lt.b.t_matmul(&du);
            let mut db = dg.matmul_t(&block.mlp_gate);
            db.add_assign(&du.matmul_t(&block.mlp_up));
            let dmid = rms_norm_backward(&lt.x_mid, &lt.mlp_rinv, &block.mlp_norm, &db, &mut gb.mlp_norm);
            dx.add_assign(&dmid);

            // attention
            gb.attn_o = lt.ctx.t_matmul(&dx);
            let dctx = dx.matmul_t(&block.attn_o);
            let n_heads = block.attn_q.cols() / hd;
            let (dq, dk, dv) = attend_backward(&lt.q, &lt.k, &lt.v, &lt.probs, &dctx, n_heads, hd);
            gb.attn_q = lt.a.t_matmul(&dq);
            gb.attn_k = lt.a.t_matmul(&dk);
            gb.attn_v = lt.a.t_matmul(&dv);
            let mut da = dq.matmul_t(&block.attn_q);
            da.add_assign(&dk.matmul_t(&block.attn_k));
            da.add_assign(&dv.matmul_t(&block.attn_v));
            let din = rms_norm_backward(&lt.x_in, &lt.attn_rinv, &block.attn_norm, &da, &mut gb.attn_norm);
            dx.add_assign(&din);
        }

        for (t, &tok) in trace.tokens.iter().enumerate() {
            for (g, v) in grads.token_embedding.row_mut(tok).iter_mut().zip(dx.row(t)) {
                *g += v;
            }
            for (g, v) in grads.positional_embedding.row_mut(t).iter_mut().zip(dx.row(t)) {
                *g += v;
            }
        }
        if !grads.is_finite() {
            return Err(crate::error::numeric_err!("backward produced non-finite gradients"));
        }
        Ok(grads)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise `x / rms(x) ⊙ gain`; also returns `1 / rms` per row.
fn rms_norm(x: &DenseMatrix, gain: &DenseMatrix, eps: f64) -> (DenseMatrix, Vec<f64>) {
    let d = x.cols();
    let g = gain.row(0);
    let mut out = DenseMatrix::zeros(x.rows(), d);
    let mut rinv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = dot(row, row) / d as f64;
        let ri = 1.0 / (ms + eps).sqrt();
        rinv.push(ri);
        for ((o, &v), &gv) in out.row_mut(r).iter_mut().zip(row).zip(g) {
            *o = v * ri * gv;
        }
    }
    (out, rinv)
}

fn rms_norm_backward(
    x: &DenseMatrix,
    rinv: &[f64],
    gain: &DenseMatrix,
    dy: &DenseMatrix,
    dgain: &mut DenseMatrix,
) -> DenseMatrix {
    let d = x.cols();
    let g = gain.row(0);
    let mut dx = DenseMatrix::zeros(x.rows(), d);
    let mut dxhat = vec![0.0; d];
    for r in 0..x.rows() {
        let ri = rinv[r];
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mut proj = 0.0;
        for j in 0..d {
            let xhat = xr[j] * ri;
            dgain.data_mut()[j] += dyr[j] * xhat;
            dxhat[j] = dyr[j] * g[j];
            proj += dxhat[j] * xhat;
        }
        proj /= d as f64;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = ri * (dxhat[j] - xr[j] * ri * proj);
        }
    }
    dx
}

/// Causal multi-head attention of `q` (new rows) against all keys/values.
///
/// `keys`/`values` hold `offset + q.rows()` rows of width `n_heads·hd`;
/// query row `t` sees key rows `0..=offset + t`.
fn attend(
    q: &DenseMatrix,
    keys: &[f64],
    values: &[f64],
    offset: usize,
    n_heads: usize,
    hd: usize,
    mut probs: Option<&mut Vec<DenseMatrix>>,
) -> DenseMatrix {
    let t_len = q.rows();
    let width = n_heads * hd;
    let total = offset + t_len;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = DenseMatrix::zeros(t_len, width);
    let mut scores = vec![0.0; total];
    for h in 0..n_heads {
        let lo = h * hd;
        let hi = lo + hd;
        let mut p_head = probs.as_ref().map(|_| DenseMatrix::zeros(t_len, total));
        for t in 0..t_len {
            let n_keys = offset + t + 1;
            let qh = &q.row(t)[lo..hi];
            let mut max = f64::NEG_INFINITY;
            for (s, sc) in scores[..n_keys].iter_mut().enumerate() {
                *sc = dot(qh, &keys[s * width + lo..s * width + hi]) * scale;
                max = max.max(*sc);
            }
            let mut sum = 0.0;
            for sc in scores[..n_keys].iter_mut() {
                *sc = (*sc - max).exp();
                sum += *sc;
            }
            let out = &mut ctx.row_mut(t)[lo..hi];
            for (s, sc) in scores[..n_keys].iter_mut().enumerate() {
                *sc /= sum;
                let vs = &values[s * width + lo..s * width + hi];
                for (o, &v) in out.iter_mut().zip(vs) {
                    *o += *sc * v;
                }
            }
            if let Some(ph) = p_head.as_mut() {
                ph.row_mut(t)[..n_keys].copy_from_slice(&scores[..n_keys]);
            }
        }
        if let (Some(ps), Some(ph)) = (probs.as_deref_mut(), p_head) {
            ps.push(ph);
        }
    }
    ctx
}

fn attend_backward(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    probs: &[DenseMatrix],
    dctx: &DenseMatrix,
    n_heads: usize,
    hd: usize,
) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let t_len = q.rows();
    let width = n_heads * hd;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = DenseMatrix::zeros(t_len, width);
    let mut dk = DenseMatrix::zeros(t_len, width);
    let mut dv = DenseMatrix::zeros(t_len, width);
    let mut dp = vec![0.0; t_len];
    for (h, ph) in probs.iter().enumerate().take(n_heads) {
        let lo = h * hd;
        let hi = lo + hd;
        for t in 0..t_len {
            let n_keys = t + 1;
            let prow = &ph.row(t)[..n_keys];
            let dout = &dctx.row(t)[lo..hi];
            let mut weighted = 0.0;
            for s in 0..n_keys {
                dp[s] = dot(dout, &v.row(s)[lo..hi]);
                weighted += dp[s] * prow[s];
                let pv = prow[s];
                for (o, &g) in dv.row_mut(s)[lo..hi].iter_mut().zip(dout) {
                    *o += pv * g;
                }
            }
            for s in 0..n_keys {
                let ds = prow[s] * (dp[s] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let ks = &k.row(s)[lo..hi];
                for (o, &kv) in dq.row_mut(t)[lo..hi].iter_mut().zip(ks) {
                    *o += ds * kv;
                }
                let qt = &q.row(t)[lo..hi];
                for (o, &qv) in dk.row_mut(s)[lo..hi].iter_mut().zip(qt) {
                    *o += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}
