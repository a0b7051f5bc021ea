//! Graph-mode forward passes: full stacks for training, per-layer views for
//! the alignment stages (attention matrices and materialized SSM mixers).
//!
//! Batches are packed rows. `doc_ids` mark packing boundaries: attention is
//! masked to (causal AND same doc), recurrences reset at doc starts, and
//! positions restart inside each doc, so a packed document behaves exactly
//! like an unpacked one.

use crate::error::{DlabError, Result};
use crate::models::{GraphParams, LayerKind, Model};
use crate::tensor::Tensor;

/// Doc id marking padding positions.
pub const PAD_DOC: u32 = u32::MAX;

const NEG_MASK: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub rows: usize,
    pub len: usize,
    pub tokens: Vec<u32>,
    pub pos_ids: Vec<usize>,
    pub doc_ids: Vec<u32>,
}

impl TokenBatch {
    /// One row, one document, positions 0..len.
    pub fn single(tokens: &[u32]) -> TokenBatch {
        TokenBatch {
            rows: 1,
            len: tokens.len(),
            tokens: tokens.to_vec(),
            pos_ids: (0..tokens.len()).collect(),
            doc_ids: vec![0; tokens.len()],
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.tokens.len() != self.rows * self.len
            || self.pos_ids.len() != self.tokens.len()
            || self.doc_ids.len() != self.tokens.len()
        {
            return Err(DlabError::shape("token batch field lengths disagree"));
        }
        if self.len > model.spec.max_seq_len {
            return Err(DlabError::config(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.len, model.spec.max_seq_len
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= model.spec.vocab_size) {
            return Err(DlabError::data(format!(
                "token id {bad} >= vocab_size {}",
                model.spec.vocab_size
            )));
        }
        if let Some(&bad) = self.pos_ids.iter().find(|&&p| p >= model.spec.max_seq_len) {
            return Err(DlabError::config(format!(
                "position id {bad} >= max_seq_len {}",
                model.spec.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Additive causal mask restricted to same-doc attention: 0 where allowed,
/// a large negative constant otherwise.
pub fn causal_doc_mask(doc_ids: &[u32]) -> Tensor {
    let l = doc_ids.len();
    let mut m = vec![NEG_MASK; l * l];
    for t in 0..l {
        for s in 0..=t {
            if doc_ids[t] == doc_ids[s] && doc_ids[t] != PAD_DOC {
                m[t * l + s] = 0.0;
            }
        }
        if doc_ids[t] == PAD_DOC {
            // pad rows attend nowhere; let them see themselves so softmax
            // stays finite (outputs are loss-masked anyway)
            m[t * l + t] = 0.0;
        }
    }
    Tensor::from_vec(m, &[l, l]).expect("mask shape")
}

/// 0/1 lower-triangular same-doc mask (multiplicative form).
fn tril_doc_mask01(doc_ids: &[u32]) -> Tensor {
    let l = doc_ids.len();
    let mut m = vec![0.0; l * l];
    for t in 0..l {
        for s in 0..=t {
            if doc_ids[t] == doc_ids[s] && doc_ids[t] != PAD_DOC {
                m[t * l + s] = 1.0;
            }
        }
    }
    Tensor::from_vec(m, &[l, l]).expect("mask shape")
}

/// t-s exponent table, zero outside the allowed region (so exp() stays 1
/// there and the multiplicative mask can zero it without producing NaN).
fn lag_table(doc_ids: &[u32]) -> Tensor {
    let l = doc_ids.len();
    let mut m = vec![0.0; l * l];
    for t in 0..l {
        for s in 0..=t {
            if doc_ids[t] == doc_ids[s] && doc_ids[t] != PAD_DOC {
                m[t * l + s] = (t - s) as f64;
            }
        }
    }
    Tensor::from_vec(m, &[l, l]).expect("mask shape")
}

fn rmsnormed(model: &Model, gp: &GraphParams, name: &str, x: &Tensor) -> Result<Tensor> {
    x.rmsnorm(&gp.leaf(name)?, model.spec.rmsnorm_eps)
}

// ── attention ────────────────────────────────────────────────────────

/// Per-head causal attention matrices for one layer given its (pre-norm)
/// input row: softmax of scaled QK^T under the causal/doc mask. Rows sum to 1.
pub fn attention_matrix(
    model: &Model,
    gp: &GraphParams,
    layer: usize,
    x: &Tensor,
    doc_ids: &[u32],
) -> Result<Vec<Tensor>> {
    if model.spec.layer_kinds[layer] != LayerKind::Attention {
        return Err(DlabError::config(format!(
            "layer {layer} is not an attention layer"
        )));
    }
    let xn = rmsnormed(model, gp, &format!("layers.{layer}.norm1"), x)?;
    let q = xn.matmul(&gp.leaf(&format!("layers.{layer}.attn.wq"))?)?;
    let k = xn.matmul(&gp.leaf(&format!("layers.{layer}.attn.wk"))?)?;
    let mask = causal_doc_mask(doc_ids);
    attention_probs(model, &q, &k, &mask)
}

fn attention_probs(model: &Model, q: &Tensor, k: &Tensor, mask: &Tensor) -> Result<Vec<Tensor>> {
    let hd = model.spec.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(model.spec.n_heads);
    for h in 0..model.spec.n_heads {
        let qh = q.slice(1, h * hd, (h + 1) * hd)?;
        let kh = k.slice(1, h * hd, (h + 1) * hd)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale).add(mask)?;
        heads.push(scores.softmax_rows()?);
    }
    Ok(heads)
}

fn attention_mixer_out(
    model: &Model,
    gp: &GraphParams,
    layer: usize,
    xn: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    let q = xn.matmul(&gp.leaf(&format!("layers.{layer}.attn.wq"))?)?;
    let k = xn.matmul(&gp.leaf(&format!("layers.{layer}.attn.wk"))?)?;
    let v = xn.matmul(&gp.leaf(&format!("layers.{layer}.attn.wv"))?)?;
    let hd = model.spec.head_dim;
    let probs = attention_probs(model, &q, &k, mask)?;
    let mut outs = Vec::with_capacity(model.spec.n_heads);
    for (h, p) in probs.iter().enumerate() {
        let vh = v.slice(1, h * hd, (h + 1) * hd)?;
        outs.push(p.matmul(&vh)?);
    }
    Tensor::concat(1, &outs)?.matmul(&gp.leaf(&format!("layers.{layer}.attn.wo"))?)
}

// ── ssm v2 (multi-head, scalar decay) ────────────────────────────────

struct V2Proj {
    b: Tensor,
    c: Tensor,
    x: Tensor,
    a: Tensor,
}

fn v2_projections(_model: &Model, gp: &GraphParams, layer: usize, xn: &Tensor) -> Result<V2Proj> {
    Ok(V2Proj {
        b: xn.matmul(&gp.leaf(&format!("layers.{layer}.ssm2.wb"))?)?,
        c: xn.matmul(&gp.leaf(&format!("layers.{layer}.ssm2.wc"))?)?,
        x: xn.matmul(&gp.leaf(&format!("layers.{layer}.ssm2.wx"))?)?,
        a: gp.leaf(&format!("layers.{layer}.ssm2.a_logit"))?.sigmoid(),
    })
}

/// Per-head semiseparable mixer M[t,s] = a^(t-s) C_t.B_s on the lower
/// triangle (restricted to same doc).
fn v2_head_mixers(model: &Model, p: &V2Proj, doc_ids: &[u32]) -> Result<Vec<Tensor>> {
    let ns = model.spec.state_size;
    let lag = lag_table(doc_ids);
    let mask01 = tril_doc_mask01(doc_ids);
    let mut mixers = Vec::with_capacity(model.spec.n_heads);
    for h in 0..model.spec.n_heads {
        let bh = p.b.slice(1, h * ns, (h + 1) * ns)?;
        let ch = p.c.slice(1, h * ns, (h + 1) * ns)?;
        let ah = p.a.slice(0, h, h + 1)?;
        let ln_a = ah.log()?;
        let decay = lag.mul(&ln_a)?.exp().mul(&mask01)?;
        let gram = ch.matmul(&bh.transpose()?)?;
        mixers.push(decay.mul(&gram)?);
    }
    Ok(mixers)
}

fn v2_mixer_out(
    model: &Model,
    gp: &GraphParams,
    layer: usize,
    xn: &Tensor,
    doc_ids: &[u32],
) -> Result<Tensor> {
    let p = v2_projections(model, gp, layer, xn)?;
    let mixers = v2_head_mixers(model, &p, doc_ids)?;
    let hd = model.spec.head_dim;
    let mut outs = Vec::with_capacity(mixers.len());
    for (h, m) in mixers.iter().enumerate() {
        let xh = p.x.slice(1, h * hd, (h + 1) * hd)?;
        outs.push(m.matmul(&xh)?);
    }
    Tensor::concat(1, &outs)?.matmul(&gp.leaf(&format!("layers.{layer}.ssm2.wo"))?)
}

// ── ssm v1 (selective per-channel recurrence, grouped B/C) ───────────

struct V1Proj {
    b: Tensor,
    c: Tensor,
    x: Tensor,
    delta: Tensor,
    a: Tensor,
}

fn v1_projections(_model: &Model, gp: &GraphParams, layer: usize, xn: &Tensor) -> Result<V1Proj> {
    let x = xn.matmul(&gp.leaf(&format!("layers.{layer}.ssm1.wx"))?)?;
    let h1 = x
        .matmul(&gp.leaf(&format!("layers.{layer}.ssm1.dt.w1"))?)?
        .add(&gp.leaf(&format!("layers.{layer}.ssm1.dt.b1"))?)?
        .silu();
    let delta = h1
        .matmul(&gp.leaf(&format!("layers.{layer}.ssm1.dt.w2"))?)?
        .add(&gp.leaf(&format!("layers.{layer}.ssm1.dt.b2"))?)?
        .softplus();
    Ok(V1Proj {
        b: xn.matmul(&gp.leaf(&format!("layers.{layer}.ssm1.wb"))?)?,
        c: xn.matmul(&gp.leaf(&format!("layers.{layer}.ssm1.wc"))?)?,
        x,
        delta,
        a: gp.leaf(&format!("layers.{layer}.ssm1.a_raw"))?.softplus().neg(),
    })
}

/// Expand a `[L, D]` group-projected matrix row into `[D, state]` blocks:
/// channel d uses group row floor(d / state).
fn expand_groups(row: &Tensor, n_groups: usize, state: usize) -> Result<Tensor> {
    row.reshape(&[n_groups, 1, state])?
        .broadcast_to(&[n_groups, state, state])?
        .reshape(&[n_groups * state, state])
}

fn v1_mixer_out(
    model: &Model,
    gp: &GraphParams,
    layer: usize,
    xn: &Tensor,
    doc_ids: &[u32],
) -> Result<Tensor> {
    let spec = &model.spec;
    let (d, ns, groups) = (spec.d_model, spec.state_size, spec.n_groups());
    let l = xn.shape()[0];
    let p = v1_projections(model, gp, layer, xn)?;
    let mut h = Tensor::zeros(&[d, ns]);
    let mut ys = Vec::with_capacity(l);
    for t in 0..l {
        if t == 0 || doc_ids[t] != doc_ids[t - 1] {
            h = Tensor::zeros(&[d, ns]);
        }
        let delta_t = p.delta.slice(0, t, t + 1)?; // [1, D]
        let dcol = delta_t.reshape(&[d, 1])?;
        let decay = dcol.mul(&p.a)?.exp(); // exp(delta * a), in (0, 1]
        let bt = expand_groups(&p.b.slice(0, t, t + 1)?, groups, ns)?;
        let ct = expand_groups(&p.c.slice(0, t, t + 1)?, groups, ns)?;
        let xcol = p.x.slice(0, t, t + 1)?.reshape(&[d, 1])?;
        let inp = dcol.mul(&xcol)?.mul(&bt)?;
        h = decay.mul(&h)?.add(&inp)?;
        let mut y = ct.mul(&h)?.sum_axis(1)?.reshape(&[1, d])?;
        if spec.v1_discretize_c {
            y = y.mul(&delta_t)?;
        }
        ys.push(y);
    }
    Tensor::concat(0, &ys)?.matmul(&gp.leaf(&format!("layers.{layer}.ssm1.wo"))?)
}

/// Exact per-channel v1 mixers: M_d[t,s] = sum_n C[t,g,n] exp(a[d,n] *
/// (S_t - S_s)) * delta[s,d] * B[s,g,n], with S the per-channel cumulative
/// step size. Returned as D matrices of shape [L, L].
pub fn materialize_mixer_v1_channels(
    model: &Model,
    gp: &GraphParams,
    layer: usize,
    x: &Tensor,
    doc_ids: &[u32],
) -> Result<Vec<Tensor>> {
    if model.spec.layer_kinds[layer] != LayerKind::SsmV1 {
        return Err(DlabError::config(format!("layer {layer} is not ssm_v1")));
    }
    let spec = &model.spec;
    let (d, ns) = (spec.d_model, spec.state_size);
    let l = x.shape()[0];
    let xn = rmsnormed(model, gp, &format!("layers.{layer}.norm1"), x)?;
    let p = v1_projections(model, gp, layer, &xn)?;
    let cum = p.delta.cumsum(0)?; // [L, D]
    let mask01 = tril_doc_mask01(doc_ids);
    let mut out = Vec::with_capacity(d);
    for ch in 0..d {
        let g = ch / ns;
        // lag[t,s] = S_t - S_s for this channel, zeroed outside the causal
        // triangle *before* exp so masked entries stay finite (exp(0) = 1,
        // then multiplied away). On the triangle the exponent is <= 0.
        let cum_ch = cum.slice(1, ch, ch + 1)?; // [L, 1]
        let lag = cum_ch.sub(&cum_ch.reshape(&[1, l])?)?.mul(&mask01)?;
        let bg = p.b.slice(1, g * ns, (g + 1) * ns)?; // [L, ns]
        let cg = p.c.slice(1, g * ns, (g + 1) * ns)?;
        let delta_ch = p.delta.slice(1, ch, ch + 1)?.reshape(&[1, l])?; // [1, L] of delta[s, ch]
        let mut m = Tensor::zeros(&[l, l]);
        for n in 0..ns {
            let an = p.a.slice(0, ch, ch + 1)?.slice(1, n, n + 1)?; // [1,1]
            let decay = lag.mul(&an)?.exp().mul(&mask01)?;
            let cb = cg
                .slice(1, n, n + 1)?
                .matmul(&bg.slice(1, n, n + 1)?.reshape(&[1, l])?)?; // [L, L] outer
            m = m.add(&decay.mul(&cb)?)?;
        }
        let mut m = m.mul(&delta_ch)?; // scale column s by delta[s, ch]
        if spec.v1_discretize_c {
            let delta_t = p.delta.slice(1, ch, ch + 1)?; // [L, 1]
            m = m.mul(&delta_t)?;
        }
        out.push(m);
    }
    Ok(out)
}

/// The token-mixing matrix a layer applies to its value stream: per head for
/// attention and v2, per group (channel-averaged) for v1.
pub fn materialize_mixer(
    model: &Model,
    gp: &GraphParams,
    layer: usize,
    x: &Tensor,
    doc_ids: &[u32],
) -> Result<Vec<Tensor>> {
    match model.spec.layer_kinds[layer] {
        LayerKind::Attention => attention_matrix(model, gp, layer, x, doc_ids),
        LayerKind::SsmV2 => {
            let xn = rmsnormed(model, gp, &format!("layers.{layer}.norm1"), x)?;
            let p = v2_projections(model, gp, layer, &xn)?;
            v2_head_mixers(model, &p, doc_ids)
        }
        LayerKind::SsmV1 => {
            let spec = &model.spec;
            let (ns, groups) = (spec.state_size, spec.n_groups());
            let channels = materialize_mixer_v1_channels(model, gp, layer, x, doc_ids)?;
            let mut out = Vec::with_capacity(groups);
            for g in 0..groups {
                let mut acc = channels[g * ns].clone();
                for ch in g * ns + 1..(g + 1) * ns {
                    acc = acc.add(&channels[ch])?;
                }
                out.push(acc.scale(1.0 / ns as f64));
            }
            Ok(out)
        }
    }
}

// ── blocks and stacks ────────────────────────────────────────────────

/// One pre-norm decoder block (mixer + MLP, both with residuals) on a single
/// row. This is the unit stage 2 aligns.
pub fn block_forward(
    model: &Model,
    gp: &GraphParams,
    layer: usize,
    x: &Tensor,
    doc_ids: &[u32],
) -> Result<Tensor> {
    let xn = rmsnormed(model, gp, &format!("layers.{layer}.norm1"), x)?;
    let mixer = match model.spec.layer_kinds[layer] {
        LayerKind::Attention => {
            let mask = causal_doc_mask(doc_ids);
            attention_mixer_out(model, gp, layer, &xn, &mask)?
        }
        LayerKind::SsmV1 => v1_mixer_out(model, gp, layer, &xn, doc_ids)?,
        LayerKind::SsmV2 => v2_mixer_out(model, gp, layer, &xn, doc_ids)?,
    };
    let x = x.add(&mixer)?;
    let xn2 = rmsnormed(model, gp, &format!("layers.{layer}.norm2"), &x)?;
    let mlp = xn2
        .matmul(&gp.leaf(&format!("layers.{layer}.mlp.up"))?)?
        .silu()
        .matmul(&gp.leaf(&format!("layers.{layer}.mlp.down"))?)?;
    x.add(&mlp)
}

/// Embedding lookup (token + learned absolute position) as `[rows*len, D]`.
pub fn embed(model: &Model, gp: &GraphParams, batch: &TokenBatch) -> Result<Tensor> {
    batch.validate(model)?;
    let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
    let tok = gp.leaf("embed.tok")?.rows(&ids)?;
    let pos = gp.leaf("embed.pos")?.rows(&batch.pos_ids)?;
    tok.add(&pos)
}

pub struct ForwardTrace {
    /// layer_inputs[i] is the input to layer i; the last entry is the output
    /// of the final block (before the final norm). Shapes `[rows*len, D]`.
    pub layer_inputs: Vec<Tensor>,
    /// `[rows, len, vocab]`
    pub logits: Tensor,
}

pub fn forward_trace(model: &Model, gp: &GraphParams, batch: &TokenBatch) -> Result<ForwardTrace> {
    let x = embed(model, gp, batch)?;
    let l = batch.len;
    let mut rows: Vec<Tensor> = (0..batch.rows)
        .map(|r| x.slice(0, r * l, (r + 1) * l))
        .collect::<Result<_>>()?;
    let mut layer_inputs = Vec::with_capacity(model.spec.n_layers + 1);
    layer_inputs.push(stack_rows(&rows)?);
    for layer in 0..model.spec.n_layers {
        for (r, row) in rows.iter_mut().enumerate() {
            let docs = &batch.doc_ids[r * l..(r + 1) * l];
            *row = block_forward(model, gp, layer, row, docs)?;
        }
        layer_inputs.push(stack_rows(&rows)?);
    }
    let flat = layer_inputs.last().expect("at least embedding").clone();
    let normed = flat.rmsnorm(&gp.leaf("final_norm")?, model.spec.rmsnorm_eps)?;
    let logits = normed
        .matmul(&gp.leaf("lm_head")?)?
        .reshape(&[batch.rows, l, model.spec.vocab_size])?;
    Ok(ForwardTrace { layer_inputs, logits })
}

/// Logits `[rows, len, vocab]` for a token batch.
pub fn forward(model: &Model, gp: &GraphParams, batch: &TokenBatch) -> Result<Tensor> {
    Ok(forward_trace(model, gp, batch)?.logits)
}

fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    if rows.len() == 1 {
        Ok(rows[0].clone())
    } else {
        Tensor::concat(0, rows)
    }
}
