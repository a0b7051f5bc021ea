//! Incremental decoding on raw weight buffers: KV caches for attention
//! layers, fixed-size recurrent states for SSM layers.
//!
//! The graph forward in `forward.rs` is the reference; `decode_step` must
//! reproduce its logits position-for-position (the decode-equals-prefill
//! contract). Attention caches hold an optional shared prompt prefix behind
//! an `Arc` so a batch of completions for one prompt does not duplicate the
//! prompt KV in memory; the *accounting* (`state_bytes`) still follows the
//! per-sample law batch x len x 2 x D.

use std::sync::Arc;

use crate::error::{DlabError, Result};
use crate::models::{LayerKind, Model, ModelSpec};
use crate::tensor::linalg;

#[derive(Debug)]
struct KvPrefix {
    k: Vec<f64>,
    v: Vec<f64>,
    len: usize,
}

#[derive(Debug)]
enum LayerState {
    Attn {
        prefix: Arc<KvPrefix>,
        /// `[batch, cap, d_model]`, filled to `own_len` positions.
        own_k: Vec<f64>,
        own_v: Vec<f64>,
        own_len: usize,
        cap: usize,
    },
    /// `[batch, d_model, state]`
    V1 { h: Vec<f64> },
    /// `[batch, heads, state, head_dim]`
    V2 { s: Vec<f64> },
}

/// Per-layer decoding state plus scratch buffers. One decoding thread owns a
/// `DecodeState` exclusively; model weights are shared read-only.
#[derive(Debug)]
pub struct DecodeState {
    batch: usize,
    pos: usize,
    layers: Vec<LayerState>,
    /// a = -softplus(a_raw) per v1 layer, sigmoid(a_logit) per v2 layer.
    derived: Vec<Option<Vec<f64>>>,
    scratch: Scratch,
}

#[derive(Debug, Default)]
struct Scratch {
    x: Vec<f64>,
    xn: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    y: Vec<f64>,
    h1: Vec<f64>,
    delta: Vec<f64>,
    scores: Vec<f64>,
}

impl DecodeState {
    /// Fresh state for `batch` parallel samples with no cached prefix.
    pub fn new(model: &Model, batch: usize) -> Result<DecodeState> {
        if batch == 0 {
            return Err(DlabError::contract("decode batch must be >= 1"));
        }
        let spec = &model.spec;
        let empty = Arc::new(KvPrefix {
            k: Vec::new(),
            v: Vec::new(),
            len: 0,
        });
        let mut layers = Vec::with_capacity(spec.n_layers);
        let mut derived = Vec::with_capacity(spec.n_layers);
        for i in 0..spec.n_layers {
            match spec.layer_kinds[i] {
                LayerKind::Attention => {
                    let cap = spec.max_seq_len;
                    layers.push(LayerState::Attn {
                        prefix: empty.clone(),
                        own_k: vec![0.0; batch * cap * spec.d_model],
                        own_v: vec![0.0; batch * cap * spec.d_model],
                        own_len: 0,
                        cap,
                    });
                    derived.push(None);
                }
                LayerKind::SsmV1 => {
                    layers.push(LayerState::V1 {
                        h: vec![0.0; batch * spec.d_model * spec.state_size],
                    });
                    let a_raw = &model.params.get(&format!("layers.{i}.ssm1.a_raw"))?.data;
                    derived.push(Some(a_raw.iter().map(|&v| -linalg::softplus(v)).collect()));
                }
                LayerKind::SsmV2 => {
                    layers.push(LayerState::V2 {
                        s: vec![0.0; batch * spec.n_heads * spec.state_size * spec.head_dim],
                    });
                    let logits = &model.params.get(&format!("layers.{i}.ssm2.a_logit"))?.data;
                    derived.push(Some(logits.iter().map(|&v| linalg::sigmoid(v)).collect()));
                }
            }
        }
        Ok(DecodeState {
            batch,
            pos: 0,
            layers,
            derived,
            scratch: Scratch::default(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Tokens consumed so far (per sample).
    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Logical attention cache length for one sample (prompt + generated).
    pub fn cache_len(&self) -> usize {
        self.pos
    }

    /// Replicate a single-sample state across `n` samples. The accumulated
    /// KV becomes a shared read-only prefix; recurrent states are copied.
    pub fn broadcast(&self, model: &Model, n: usize) -> Result<DecodeState> {
        if self.batch != 1 {
            return Err(DlabError::contract(
                "broadcast requires a single-sample state",
            ));
        }
        let spec = &model.spec;
        let d = spec.d_model;
        let mut layers = Vec::with_capacity(self.layers.len());
        for ls in &self.layers {
            match ls {
                LayerState::Attn {
                    prefix,
                    own_k,
                    own_v,
                    own_len,
                    ..
                } => {
                    let plen = prefix.len + own_len;
                    let mut k = Vec::with_capacity(plen * d);
                    let mut v = Vec::with_capacity(plen * d);
                    k.extend_from_slice(&prefix.k[..prefix.len * d]);
                    v.extend_from_slice(&prefix.v[..prefix.len * d]);
                    k.extend_from_slice(&own_k[..own_len * d]);
                    v.extend_from_slice(&own_v[..own_len * d]);
                    let cap = spec.max_seq_len - plen;
                    layers.push(LayerState::Attn {
                        prefix: Arc::new(KvPrefix { k, v, len: plen }),
                        own_k: vec![0.0; n * cap * d],
                        own_v: vec![0.0; n * cap * d],
                        own_len: 0,
                        cap,
                    });
                }
                LayerState::V1 { h } => {
                    layers.push(LayerState::V1 { h: repeat_rows(h, n) });
                }
                LayerState::V2 { s } => {
                    layers.push(LayerState::V2 { s: repeat_rows(s, n) });
                }
            }
        }
        Ok(DecodeState {
            batch: n,
            pos: self.pos,
            layers,
            derived: self.derived.clone(),
            scratch: Scratch::default(),
        })
    }

    /// Measured footprint of the decode state under the per-sample
    /// accounting law: attention layers grow with cached length, SSM layers
    /// are constant.
    pub fn state_bytes(&self, spec: &ModelSpec) -> usize {
        let mut total = 0;
        for ls in &self.layers {
            total += match ls {
                LayerState::Attn { .. } => self.batch * self.pos * 2 * spec.d_model * 8,
                LayerState::V1 { .. } => self.batch * spec.d_model * spec.state_size * 8,
                LayerState::V2 { .. } => {
                    self.batch * spec.n_heads * spec.state_size * spec.head_dim * 8
                }
            };
        }
        total
    }
}

fn repeat_rows(row: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        out.extend_from_slice(row);
    }
    out
}

/// Projected decode-state bytes for a model at (batch, cached length);
/// the OOM accounting used by the benchmark harness.
pub fn projected_state_bytes(spec: &ModelSpec, batch: usize, len: usize) -> usize {
    let mut total = 0;
    for kind in &spec.layer_kinds {
        total += match kind {
            LayerKind::Attention => batch * len * 2 * spec.d_model * 8,
            LayerKind::SsmV1 => batch * spec.d_model * spec.state_size * 8,
            LayerKind::SsmV2 => batch * spec.n_heads * spec.state_size * spec.head_dim * 8,
        };
    }
    total
}

impl Model {
    /// Run the prompt through the decode path one token at a time; returns
    /// the state positioned after the prompt and the logits of its last
    /// token.
    pub fn prefill(&self, tokens: &[u32]) -> Result<(DecodeState, Vec<f64>)> {
        if tokens.is_empty() {
            return Err(DlabError::data("empty prompt"));
        }
        let mut state = DecodeState::new(self, 1)?;
        let mut logits = Vec::new();
        for &t in tokens {
            logits = self.decode_step(&mut state, &[t])?;
        }
        Ok((state, logits))
    }

    /// One decoding step for a batch of next tokens; returns logits
    /// `[batch * vocab]`. SSM state size is unchanged by the step; attention
    /// caches grow by one position.
    pub fn decode_step(&self, state: &mut DecodeState, next: &[u32]) -> Result<Vec<f64>> {
        let spec = &self.spec;
        let (b, d) = (state.batch, spec.d_model);
        if next.len() != b {
            return Err(DlabError::contract(format!(
                "decode_step got {} tokens for batch {b}",
                next.len()
            )));
        }
        if state.pos >= spec.max_seq_len {
            return Err(DlabError::contract(format!(
                "position {} exceeds max_seq_len {}",
                state.pos, spec.max_seq_len
            )));
        }
        if let Some(&bad) = next.iter().find(|&&t| t as usize >= spec.vocab_size) {
            return Err(DlabError::data(format!(
                "token id {bad} >= vocab_size {}",
                spec.vocab_size
            )));
        }
        // layer states must agree on the current position
        for ls in &state.layers {
            if let LayerState::Attn {
                prefix, own_len, ..
            } = ls
            {
                if prefix.len + own_len != state.pos {
                    return Err(DlabError::contract(format!(
                        "attention cache length {} does not match position {}",
                        prefix.len + own_len,
                        state.pos
                    )));
                }
            }
        }

        let tok = &self.params.get("embed.tok")?.data;
        let pos_emb = &self.params.get("embed.pos")?.data;
        let mut x = std::mem::take(&mut state.scratch.x);
        x.resize(b * d, 0.0);
        for (bi, &t) in next.iter().enumerate() {
            let trow = &tok[t as usize * d..(t as usize + 1) * d];
            let prow = &pos_emb[state.pos * d..(state.pos + 1) * d];
            let xr = &mut x[bi * d..(bi + 1) * d];
            for j in 0..d {
                xr[j] = trow[j] + prow[j];
            }
        }

        for i in 0..spec.n_layers {
            self.layer_step(state, i, &mut x)?;
        }

        let fw = &self.params.get("final_norm")?.data;
        let mut xn = std::mem::take(&mut state.scratch.xn);
        xn.clear();
        xn.extend_from_slice(&x);
        for row in xn.chunks_mut(d) {
            linalg::rmsnorm_row(row, fw, spec.rmsnorm_eps);
        }
        let head = &self.params.get("lm_head")?.data;
        let mut logits = vec![0.0; b * spec.vocab_size];
        linalg::matmul_nn(&xn, head, b, d, spec.vocab_size, &mut logits);

        state.scratch.x = x;
        state.scratch.xn = xn;
        state.pos += 1;
        Ok(logits)
    }

    fn layer_step(&self, state: &mut DecodeState, i: usize, x: &mut [f64]) -> Result<()> {
        let spec = &self.spec;
        let (b, d) = (state.batch, spec.d_model);
        let eps = spec.rmsnorm_eps;
        let norm1 = &self.params.get(&format!("layers.{i}.norm1"))?.data;
        let mut xn = std::mem::take(&mut state.scratch.xn);
        xn.clear();
        xn.extend_from_slice(x);
        for row in xn.chunks_mut(d) {
            linalg::rmsnorm_row(row, norm1, eps);
        }

        match spec.layer_kinds[i] {
            LayerKind::Attention => self.attn_step(state, i, &xn, x)?,
            LayerKind::SsmV1 => self.v1_step_batch(state, i, &xn, x)?,
            LayerKind::SsmV2 => self.v2_step_batch(state, i, &xn, x)?,
        }

        // MLP with its own pre-norm
        let norm2 = &self.params.get(&format!("layers.{i}.norm2"))?.data;
        xn.clear();
        xn.extend_from_slice(x);
        for row in xn.chunks_mut(d) {
            linalg::rmsnorm_row(row, norm2, eps);
        }
        let up = &self.params.get(&format!("layers.{i}.mlp.up"))?.data;
        let down = &self.params.get(&format!("layers.{i}.mlp.down"))?.data;
        let hid = spec.mlp_hidden;
        let mut h1 = std::mem::take(&mut state.scratch.h1);
        h1.resize(b * hid, 0.0);
        linalg::matmul_nn(&xn, up, b, d, hid, &mut h1);
        for v in h1.iter_mut() {
            *v = linalg::silu(*v);
        }
        linalg::matmul_nn_acc(&h1, down, b, hid, d, x);
        state.scratch.h1 = h1;
        state.scratch.xn = xn;
        Ok(())
    }

    fn attn_step(&self, state: &mut DecodeState, i: usize, xn: &[f64], x: &mut [f64]) -> Result<()> {
        let spec = &self.spec;
        let (b, d, hd, heads) = (state.batch, spec.d_model, spec.head_dim, spec.n_heads);
        let wq = &self.params.get(&format!("layers.{i}.attn.wq"))?.data;
        let wk = &self.params.get(&format!("layers.{i}.attn.wk"))?.data;
        let wv = &self.params.get(&format!("layers.{i}.attn.wv"))?.data;
        let wo = &self.params.get(&format!("layers.{i}.attn.wo"))?.data;

        let mut q = std::mem::take(&mut state.scratch.q);
        let mut k = std::mem::take(&mut state.scratch.k);
        let mut v = std::mem::take(&mut state.scratch.v);
        let mut y = std::mem::take(&mut state.scratch.y);
        let mut scores = std::mem::take(&mut state.scratch.scores);
        q.resize(b * d, 0.0);
        k.resize(b * d, 0.0);
        v.resize(b * d, 0.0);
        y.resize(b * d, 0.0);
        linalg::matmul_nn(xn, wq, b, d, d, &mut q);
        linalg::matmul_nn(xn, wk, b, d, d, &mut k);
        linalg::matmul_nn(xn, wv, b, d, d, &mut v);

        let LayerState::Attn {
            prefix,
            own_k,
            own_v,
            own_len,
            cap,
        } = &mut state.layers[i]
        else {
            return Err(DlabError::contract("layer state kind mismatch"));
        };
        if *own_len >= *cap {
            return Err(DlabError::contract("attention cache capacity exhausted"));
        }
        for bi in 0..b {
            let dst = (bi * *cap + *own_len) * d;
            own_k[dst..dst + d].copy_from_slice(&k[bi * d..(bi + 1) * d]);
            own_v[dst..dst + d].copy_from_slice(&v[bi * d..(bi + 1) * d]);
        }
        *own_len += 1;
        let total_len = prefix.len + *own_len;
        let scale = 1.0 / (hd as f64).sqrt();
        scores.resize(total_len, 0.0);
        for bi in 0..b {
            for h in 0..heads {
                let qh = &q[bi * d + h * hd..bi * d + (h + 1) * hd];
                for (t, sc) in scores.iter_mut().enumerate().take(prefix.len) {
                    let krow = &prefix.k[t * d + h * hd..t * d + (h + 1) * hd];
                    *sc = linalg::dot(qh, krow) * scale;
                }
                for t in 0..*own_len {
                    let krow = &own_k[(bi * *cap + t) * d + h * hd..(bi * *cap + t) * d + (h + 1) * hd];
                    scores[prefix.len + t] = linalg::dot(qh, krow) * scale;
                }
                linalg::softmax_row_inplace(&mut scores[..total_len]);
                let yh = &mut y[bi * d + h * hd..bi * d + (h + 1) * hd];
                yh.fill(0.0);
                for t in 0..prefix.len {
                    let w = scores[t];
                    if w != 0.0 {
                        let vrow = &prefix.v[t * d + h * hd..t * d + (h + 1) * hd];
                        for j in 0..hd {
                            yh[j] += w * vrow[j];
                        }
                    }
                }
                for t in 0..*own_len {
                    let w = scores[prefix.len + t];
                    if w != 0.0 {
                        let vrow =
                            &own_v[(bi * *cap + t) * d + h * hd..(bi * *cap + t) * d + (h + 1) * hd];
                        for j in 0..hd {
                            yh[j] += w * vrow[j];
                        }
                    }
                }
            }
        }
        linalg::matmul_nn_acc(&y, wo, b, d, d, x);
        state.scratch.q = q;
        state.scratch.k = k;
        state.scratch.v = v;
        state.scratch.y = y;
        state.scratch.scores = scores;
        Ok(())
    }

    fn v1_step_batch(&self, state: &mut DecodeState, i: usize, xn: &[f64], x: &mut [f64]) -> Result<()> {
        let spec = &self.spec;
        let (b, d, ns) = (state.batch, spec.d_model, spec.state_size);
        let wb = &self.params.get(&format!("layers.{i}.ssm1.wb"))?.data;
        let wc = &self.params.get(&format!("layers.{i}.ssm1.wc"))?.data;
        let wx = &self.params.get(&format!("layers.{i}.ssm1.wx"))?.data;
        let wo = &self.params.get(&format!("layers.{i}.ssm1.wo"))?.data;
        let w1 = &self.params.get(&format!("layers.{i}.ssm1.dt.w1"))?.data;
        let b1 = &self.params.get(&format!("layers.{i}.ssm1.dt.b1"))?.data;
        let w2 = &self.params.get(&format!("layers.{i}.ssm1.dt.w2"))?.data;
        let b2 = &self.params.get(&format!("layers.{i}.ssm1.dt.b2"))?.data;
        let a = state.derived[i]
            .as_ref()
            .ok_or_else(|| DlabError::contract("missing derived v1 decay"))?
            .clone();
        let hid = spec.dt_hidden();

        let mut bm = std::mem::take(&mut state.scratch.q);
        let mut cm = std::mem::take(&mut state.scratch.k);
        let mut xm = std::mem::take(&mut state.scratch.v);
        let mut y = std::mem::take(&mut state.scratch.y);
        let mut h1 = std::mem::take(&mut state.scratch.h1);
        let mut delta = std::mem::take(&mut state.scratch.delta);
        bm.resize(b * d, 0.0);
        cm.resize(b * d, 0.0);
        xm.resize(b * d, 0.0);
        y.resize(b * d, 0.0);
        h1.resize(b * hid, 0.0);
        delta.resize(b * d, 0.0);
        linalg::matmul_nn(xn, wb, b, d, d, &mut bm);
        linalg::matmul_nn(xn, wc, b, d, d, &mut cm);
        linalg::matmul_nn(xn, wx, b, d, d, &mut xm);
        // step-size head on the value stream
        linalg::matmul_nn(&xm, w1, b, d, hid, &mut h1);
        for bi in 0..b {
            for j in 0..hid {
                h1[bi * hid + j] = linalg::silu(h1[bi * hid + j] + b1[j]);
            }
        }
        linalg::matmul_nn(&h1, w2, b, hid, d, &mut delta);
        for bi in 0..b {
            for j in 0..d {
                let v = delta[bi * d + j] + b2[j];
                if v.is_nan() {
                    return Err(DlabError::numeric("NaN step size in v1 layer"));
                }
                delta[bi * d + j] = linalg::softplus(v);
            }
        }

        let LayerState::V1 { h } = &mut state.layers[i] else {
            return Err(DlabError::contract("layer state kind mismatch"));
        };
        let discretize_c = spec.v1_discretize_c;
        for bi in 0..b {
            for ch in 0..d {
                let g = ch / ns;
                let dt = delta[bi * d + ch];
                let xv = xm[bi * d + ch];
                let brow = &bm[bi * d + g * ns..bi * d + (g + 1) * ns];
                let crow = &cm[bi * d + g * ns..bi * d + (g + 1) * ns];
                let arow = &a[ch * ns..(ch + 1) * ns];
                let hrow = &mut h[(bi * d + ch) * ns..(bi * d + ch + 1) * ns];
                let mut acc = 0.0;
                for n in 0..ns {
                    let hv = (dt * arow[n]).exp() * hrow[n] + dt * brow[n] * xv;
                    hrow[n] = hv;
                    acc += crow[n] * hv;
                }
                y[bi * d + ch] = if discretize_c { acc * dt } else { acc };
            }
        }
        linalg::matmul_nn_acc(&y, wo, b, d, d, x);
        state.scratch.q = bm;
        state.scratch.k = cm;
        state.scratch.v = xm;
        state.scratch.y = y;
        state.scratch.h1 = h1;
        state.scratch.delta = delta;
        Ok(())
    }

    fn v2_step_batch(&self, state: &mut DecodeState, i: usize, xn: &[f64], x: &mut [f64]) -> Result<()> {
        let spec = &self.spec;
        let (b, d, ns, hd, heads) = (
            state.batch,
            spec.d_model,
            spec.state_size,
            spec.head_dim,
            spec.n_heads,
        );
        let wb = &self.params.get(&format!("layers.{i}.ssm2.wb"))?.data;
        let wc = &self.params.get(&format!("layers.{i}.ssm2.wc"))?.data;
        let wx = &self.params.get(&format!("layers.{i}.ssm2.wx"))?.data;
        let wo = &self.params.get(&format!("layers.{i}.ssm2.wo"))?.data;
        let a = state.derived[i]
            .as_ref()
            .ok_or_else(|| DlabError::contract("missing derived v2 decay"))?
            .clone();

        let proj = heads * ns;
        let mut bm = std::mem::take(&mut state.scratch.q);
        let mut cm = std::mem::take(&mut state.scratch.k);
        let mut xm = std::mem::take(&mut state.scratch.v);
        let mut y = std::mem::take(&mut state.scratch.y);
        bm.resize(b * proj, 0.0);
        cm.resize(b * proj, 0.0);
        xm.resize(b * d, 0.0);
        y.resize(b * d, 0.0);
        linalg::matmul_nn(xn, wb, b, d, proj, &mut bm);
        linalg::matmul_nn(xn, wc, b, d, proj, &mut cm);
        linalg::matmul_nn(xn, wx, b, d, d, &mut xm);

        let LayerState::V2 { s } = &mut state.layers[i] else {
            return Err(DlabError::contract("layer state kind mismatch"));
        };
        for bi in 0..b {
            for h in 0..heads {
                let ah = a[h];
                let bt = &bm[bi * proj + h * ns..bi * proj + (h + 1) * ns];
                let ct = &cm[bi * proj + h * ns..bi * proj + (h + 1) * ns];
                let xt = &xm[bi * d + h * hd..bi * d + (h + 1) * hd];
                let yh = &mut y[bi * d + h * hd..bi * d + (h + 1) * hd];
                yh.fill(0.0);
                let sh = &mut s[((bi * heads + h) * ns) * hd..((bi * heads + h) * ns + ns) * hd];
                for n in 0..ns {
                    let srow = &mut sh[n * hd..(n + 1) * hd];
                    let bn = bt[n];
                    let cn = ct[n];
                    for j in 0..hd {
                        let sv = ah * srow[j] + bn * xt[j];
                        srow[j] = sv;
                        yh[j] += cn * sv;
                    }
                }
            }
        }
        linalg::matmul_nn_acc(&y, wo, b, d, d, x);
        state.scratch.q = bm;
        state.scratch.k = cm;
        state.scratch.v = xm;
        state.scratch.y = y;
        Ok(())
    }
}

/// One v1 recurrence step on explicit buffers; the contract-level view of
/// what `decode_step` does inside a v1 layer. `h` is `[d, state]`, `b_t` and
/// `c_t` are grouped `[d / state * state] = [d]` projections, `delta_t` is
/// per-channel.
#[allow(clippy::too_many_arguments)]
pub fn ssm_v1_step(
    a: &[f64],
    h_prev: &[f64],
    x_t: &[f64],
    b_t: &[f64],
    c_t: &[f64],
    delta_t: &[f64],
    d: usize,
    ns: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if delta_t.iter().any(|v| v.is_nan()) {
        return Err(DlabError::numeric("NaN step size"));
    }
    if delta_t.iter().any(|&v| v < 0.0) {
        return Err(DlabError::contract("negative step size"));
    }
    let mut h = h_prev.to_vec();
    let mut y = vec![0.0; d];
    for ch in 0..d {
        let g = ch / ns;
        let dt = delta_t[ch];
        let mut acc = 0.0;
        for n in 0..ns {
            let idx = ch * ns + n;
            let hv = (dt * a[idx]).exp() * h[idx] + dt * b_t[g * ns + n] * x_t[ch];
            h[idx] = hv;
            acc += c_t[g * ns + n] * hv;
        }
        y[ch] = acc;
    }
    Ok((h, y))
}

/// One v2 recurrence step per head: S <- a S + B x^T, y = C^T S.
pub fn ssm_v2_step(
    a: f64,
    s_prev: &[f64],
    x_t: &[f64],
    b_t: &[f64],
    c_t: &[f64],
    ns: usize,
    hd: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&a) {
        return Err(DlabError::contract(format!("decay {a} outside (0, 1)")));
    }
    let mut s = s_prev.to_vec();
    let mut y = vec![0.0; hd];
    for n in 0..ns {
        let row = &mut s[n * hd..(n + 1) * hd];
        for j in 0..hd {
            let sv = a * row[j] + b_t[n] * x_t[j];
            row[j] = sv;
            y[j] += c_t[n] * sv;
        }
    }
    Ok((s, y))
}
