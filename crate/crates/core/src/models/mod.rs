//! Model zoo: attention teacher, the two SSM student layer families, hybrid
//! stacks, parameter storage, and initialization.
//!
//! Layer families:
//! - `Attention`: causal multi-head self-attention with learned absolute
//!   positions, pre-norm residual blocks, and a paired MLP.
//! - `SsmV1`: selective per-channel diagonal recurrence with grouped B/C
//!   (input-dependent step size), the hybrid-student layer.
//! - `SsmV2`: multi-head scalar-decay discrete-time recurrence, the
//!   pure-student layer.

pub mod decode;
pub mod forward;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DlabError, Result};
use crate::sampler::derive_rng;
use crate::tensor::checkpoint;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Attention,
    SsmV1,
    SsmV2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub layer_kinds: Vec<LayerKind>,
    pub n_heads: usize,
    pub head_dim: usize,
    /// SSM state size: N' for v1 (per-channel state), N_s for v2 (per-head).
    pub state_size: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub rmsnorm_eps: f64,
    /// Experiment flag: also scale the C readout by the step size in v1.
    #[serde(default)]
    pub v1_discretize_c: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(DlabError::config(format!(
                "d_model {} must equal n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.layer_kinds.len() != self.n_layers {
            return Err(DlabError::config(format!(
                "layer_kinds length {} != n_layers {}",
                self.layer_kinds.len(),
                self.n_layers
            )));
        }
        if self.state_size == 0 || self.d_model % self.state_size != 0 {
            return Err(DlabError::config(format!(
                "d_model {} must be divisible by state_size {}",
                self.d_model, self.state_size
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.mlp_hidden == 0 {
            return Err(DlabError::config("zero-sized model dimension"));
        }
        Ok(())
    }

    /// Number of v1 B/C groups over the flattened channel axis.
    pub fn n_groups(&self) -> usize {
        self.d_model / self.state_size
    }

    /// Hidden width of the v1 step-size MLP.
    pub fn dt_hidden(&self) -> usize {
        (self.d_model / 4).max(1)
    }

    /// Uniform attention stack (the teacher).
    pub fn attention(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        state_size: usize,
        max_seq_len: usize,
    ) -> ModelSpec {
        ModelSpec {
            vocab_size,
            d_model,
            n_layers,
            layer_kinds: vec![LayerKind::Attention; n_layers],
            n_heads,
            head_dim: d_model / n_heads,
            state_size,
            mlp_hidden: 2 * d_model,
            max_seq_len,
            rmsnorm_eps: 1e-5,
            v1_discretize_c: false,
        }
    }

    /// Same stack with every layer swapped to the given kind.
    pub fn with_kinds(&self, kinds: Vec<LayerKind>) -> ModelSpec {
        let mut s = self.clone();
        s.n_layers = kinds.len();
        s.layer_kinds = kinds;
        s
    }
}

/// Indices of attention layers kept in a hybrid stack: `keep` indices evenly
/// spaced over `n_layers` (e.g. 4 of 16 -> {0, 5, 10, 15}).
pub fn evenly_spaced_attention(n_layers: usize, keep: usize) -> Vec<usize> {
    if keep == 0 {
        return Vec::new();
    }
    if keep == 1 {
        return vec![0];
    }
    (0..keep)
        .map(|j| (j * (n_layers - 1) + (keep - 1) / 2) / (keep - 1))
        .collect()
}

// ── parameter storage ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter buffers with deterministic (insertion) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(DlabError::shape(format!(
                "parameter {name}: data length {} != shape {:?}",
                data.len(),
                shape
            )));
        }
        if self.index.contains_key(&name) {
            return Err(DlabError::contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| DlabError::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(DlabError::contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Copy a parameter value from another store (shapes must match).
    pub fn copy_from(&mut self, other: &ParamStore, name: &str) -> Result<()> {
        let src = other.get(name)?;
        let dst = self.get_mut(name)?;
        if dst.shape != src.shape {
            return Err(DlabError::shape(format!(
                "parameter {name}: shape {:?} != {:?}",
                dst.shape, src.shape
            )));
        }
        dst.data.copy_from_slice(&src.data);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// SHA-256 over names, shapes, and exact bit patterns; used to assert
    /// frozen-teacher contracts.
    pub fn digest(&self) -> String {
        let mut sorted: Vec<&ParamEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for e in sorted {
            h.update(e.name.as_bytes());
            for &d in &e.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &e.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn to_records(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), e.data.clone()))
            .collect()
    }
}

// ── model ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

pub fn layer_param_names(spec: &ModelSpec, i: usize) -> Vec<String> {
    let mut names = vec![
        format!("layers.{i}.norm1"),
        format!("layers.{i}.norm2"),
        format!("layers.{i}.mlp.up"),
        format!("layers.{i}.mlp.down"),
    ];
    match spec.layer_kinds[i] {
        LayerKind::Attention => {
            for w in ["wq", "wk", "wv", "wo"] {
                names.push(format!("layers.{i}.attn.{w}"));
            }
        }
        LayerKind::SsmV1 => {
            for w in ["wb", "wc", "wx", "wo"] {
                names.push(format!("layers.{i}.ssm1.{w}"));
            }
            for w in ["dt.w1", "dt.b1", "dt.w2", "dt.b2", "a_raw"] {
                names.push(format!("layers.{i}.ssm1.{w}"));
            }
        }
        LayerKind::SsmV2 => {
            for w in ["wb", "wc", "wx", "wo"] {
                names.push(format!("layers.{i}.ssm2.{w}"));
            }
            names.push(format!("layers.{i}.ssm2.a_logit"));
        }
    }
    names
}

/// Names of the mixer parameters trained by stage 1 for one layer.
pub fn mixer_param_names(spec: &ModelSpec, i: usize) -> Vec<String> {
    match spec.layer_kinds[i] {
        LayerKind::Attention => ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|w| format!("layers.{i}.attn.{w}"))
            .collect(),
        LayerKind::SsmV1 => {
            let mut v: Vec<String> = ["wb", "wc", "wx", "wo"]
                .iter()
                .map(|w| format!("layers.{i}.ssm1.{w}"))
                .collect();
            for w in ["dt.w1", "dt.b1", "dt.w2", "dt.b2", "a_raw"] {
                v.push(format!("layers.{i}.ssm1.{w}"));
            }
            v
        }
        LayerKind::SsmV2 => {
            let mut v: Vec<String> = ["wb", "wc", "wx", "wo"]
                .iter()
                .map(|w| format!("layers.{i}.ssm2.{w}"))
                .collect();
            v.push(format!("layers.{i}.ssm2.a_logit"));
            v
        }
    }
}

impl Model {
    /// Random initialization; deterministic in (spec, seed).
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = derive_rng(seed, "model-init", 0);
        let mut params = ParamStore::new();
        let d = spec.d_model;
        let scale = 0.02;
        // residual branches shrink with depth, the usual stacked-residual init
        let out_scale = scale / (2.0 * spec.n_layers as f64).sqrt();

        params.insert("embed.tok", vec![spec.vocab_size, d], normal(&mut rng, spec.vocab_size * d, scale))?;
        params.insert("embed.pos", vec![spec.max_seq_len, d], normal(&mut rng, spec.max_seq_len * d, scale))?;
        for i in 0..spec.n_layers {
            params.insert(format!("layers.{i}.norm1"), vec![d], vec![1.0; d])?;
            params.insert(format!("layers.{i}.norm2"), vec![d], vec![1.0; d])?;
            params.insert(
                format!("layers.{i}.mlp.up"),
                vec![d, spec.mlp_hidden],
                normal(&mut rng, d * spec.mlp_hidden, scale),
            )?;
            params.insert(
                format!("layers.{i}.mlp.down"),
                vec![spec.mlp_hidden, d],
                normal(&mut rng, spec.mlp_hidden * d, out_scale),
            )?;
            match spec.layer_kinds[i] {
                LayerKind::Attention => {
                    for w in ["wq", "wk", "wv"] {
                        params.insert(format!("layers.{i}.attn.{w}"), vec![d, d], normal(&mut rng, d * d, scale))?;
                    }
                    params.insert(format!("layers.{i}.attn.wo"), vec![d, d], normal(&mut rng, d * d, out_scale))?;
                }
                LayerKind::SsmV1 => {
                    init_ssm_v1(&mut params, &spec, i, &mut rng, scale, out_scale)?;
                }
                LayerKind::SsmV2 => {
                    for w in ["wb", "wc"] {
                        params.insert(
                            format!("layers.{i}.ssm2.{w}"),
                            vec![d, spec.n_heads * spec.state_size],
                            normal(&mut rng, d * spec.n_heads * spec.state_size, scale),
                        )?;
                    }
                    params.insert(format!("layers.{i}.ssm2.wx"), vec![d, d], normal(&mut rng, d * d, scale))?;
                    params.insert(format!("layers.{i}.ssm2.wo"), vec![d, d], normal(&mut rng, d * d, out_scale))?;
                    // spread of decay rates across heads, sigmoid(logit) in [0.6, 0.95]
                    let logits: Vec<f64> = (0..spec.n_heads)
                        .map(|h| {
                            let a = if spec.n_heads == 1 {
                                0.9
                            } else {
                                0.6 + 0.35 * h as f64 / (spec.n_heads - 1) as f64
                            };
                            (a / (1.0 - a)).ln()
                        })
                        .collect();
                    params.insert(format!("layers.{i}.ssm2.a_logit"), vec![spec.n_heads], logits)?;
                }
            }
        }
        params.insert("final_norm", vec![d], vec![1.0; d])?;
        params.insert("lm_head", vec![d, spec.vocab_size], normal(&mut rng, d * spec.vocab_size, scale))?;
        Ok(Model { spec, params })
    }

    pub fn save(&self, ckpt_path: &std::path::Path) -> Result<()> {
        checkpoint::write_checkpoint(ckpt_path, &self.params.to_records())?;
        let spec_path = ckpt_path.with_extension("spec.json");
        std::fs::write(&spec_path, serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(ckpt_path: &std::path::Path) -> Result<Model> {
        let spec_path = ckpt_path.with_extension("spec.json");
        let spec: ModelSpec = serde_json::from_str(&std::fs::read_to_string(&spec_path).map_err(
            |e| DlabError::data(format!("missing model spec sidecar {}: {e}", spec_path.display())),
        )?)?;
        spec.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, data) in checkpoint::read_checkpoint(ckpt_path)? {
            params.insert(name, shape, data)?;
        }
        let model = Model { spec, params };
        model.check_complete()?;
        Ok(model)
    }

    /// Every expected parameter present with the right shape.
    pub fn check_complete(&self) -> Result<()> {
        let d = self.spec.d_model;
        expect(&self.params, "embed.tok", &[self.spec.vocab_size, d])?;
        expect(&self.params, "embed.pos", &[self.spec.max_seq_len, d])?;
        expect(&self.params, "final_norm", &[d])?;
        expect(&self.params, "lm_head", &[d, self.spec.vocab_size])?;
        for i in 0..self.spec.n_layers {
            for name in layer_param_names(&self.spec, i) {
                self.params.get(&name)?;
            }
        }
        Ok(())
    }
}

fn init_ssm_v1(
    params: &mut ParamStore,
    spec: &ModelSpec,
    i: usize,
    rng: &mut ChaCha12Rng,
    scale: f64,
    out_scale: f64,
) -> Result<()> {
    let d = spec.d_model;
    let hid = spec.dt_hidden();
    for w in ["wb", "wc", "wx"] {
        params.insert(format!("layers.{i}.ssm1.{w}"), vec![d, d], normal(rng, d * d, scale))?;
    }
    params.insert(format!("layers.{i}.ssm1.wo"), vec![d, d], normal(rng, d * d, out_scale))?;
    params.insert(format!("layers.{i}.ssm1.dt.w1"), vec![d, hid], normal(rng, d * hid, scale))?;
    params.insert(format!("layers.{i}.ssm1.dt.b1"), vec![hid], vec![0.0; hid])?;
    // zero-initialized output layer: softplus(0) = ln 2, so the step size
    // starts at ln 2 and the effective decay at exp(-ln 2) = 1/2 with a = -1
    params.insert(format!("layers.{i}.ssm1.dt.w2"), vec![hid, d], vec![0.0; hid * d])?;
    params.insert(format!("layers.{i}.ssm1.dt.b2"), vec![d], vec![0.0; d])?;
    // a = -softplus(a_raw) = -1  =>  a_raw = ln(e - 1)
    let a_raw = (std::f64::consts::E - 1.0).ln();
    params.insert(
        format!("layers.{i}.ssm1.a_raw"),
        vec![d, spec.state_size],
        vec![a_raw; d * spec.state_size],
    )?;
    Ok(())
}

fn expect(params: &ParamStore, name: &str, shape: &[usize]) -> Result<()> {
    let e = params.get(name)?;
    if e.shape != shape {
        return Err(DlabError::shape(format!(
            "parameter {name}: shape {:?}, expected {:?}",
            e.shape, shape
        )));
    }
    Ok(())
}

fn normal(rng: &mut ChaCha12Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller; rand_distr would work too but this keeps the dependency
    // surface identical between init and sampling.
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        out.push(r * c * std);
        if out.len() < n {
            out.push(r * s * std);
        }
    }
    out
}

/// Leaf-tensor view of a parameter store for building graphs. Leaves are
/// cached so reuse of a weight inside one graph accumulates into one
/// gradient buffer.
pub struct GraphParams<'a> {
    store: &'a ParamStore,
    trainable: Option<&'a std::collections::BTreeSet<String>>,
    cache: std::cell::RefCell<HashMap<String, Tensor>>,
}

impl<'a> GraphParams<'a> {
    /// All parameters frozen (inference / teacher side of a loss).
    pub fn frozen(store: &'a ParamStore) -> Self {
        GraphParams {
            store,
            trainable: None,
            cache: Default::default(),
        }
    }

    /// Only the named parameters receive gradients.
    pub fn trainable(store: &'a ParamStore, set: &'a std::collections::BTreeSet<String>) -> Self {
        GraphParams {
            store,
            trainable: Some(set),
            cache: Default::default(),
        }
    }

    pub fn leaf(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.cache.borrow().get(name) {
            return Ok(t.clone());
        }
        let e = self.store.get(name)?;
        let requires_grad = self.trainable.map(|s| s.contains(name)).unwrap_or(false);
        let t = if requires_grad {
            Tensor::param(e.data.clone(), &e.shape)?
        } else {
            Tensor::from_vec(e.data.clone(), &e.shape)?
        };
        self.cache.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of all trainable leaves touched by the graph, in sorted
    /// name order (deterministic reduction downstream).
    pub fn grads(&self) -> Vec<(String, Vec<f64>)> {
        let cache = self.cache.borrow();
        let mut names: Vec<&String> = cache.keys().collect();
        names.sort();
        let mut out = Vec::new();
        for name in names {
            let t = &cache[name];
            if t.requires_grad() {
                let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
                out.push((name.clone(), g));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut spec = ModelSpec::attention(90, 48, 4, 3, 16, 512);
        spec.validate().unwrap();
        assert_eq!(spec.n_groups(), 3);
        spec.head_dim = 17;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn evenly_spaced_matches_paper_example() {
        assert_eq!(evenly_spaced_attention(16, 4), vec![0, 5, 10, 15]);
        assert_eq!(evenly_spaced_attention(4, 1), vec![0]);
        assert_eq!(evenly_spaced_attention(26, 6), vec![0, 5, 10, 15, 20, 25]);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::attention(90, 32, 2, 2, 16, 64);
        let a = Model::init(spec.clone(), 5).unwrap();
        let b = Model::init(spec, 5).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec = ModelSpec {
            layer_kinds: vec![LayerKind::Attention, LayerKind::SsmV1, LayerKind::SsmV2],
            n_layers: 3,
            ..ModelSpec::attention(90, 32, 3, 2, 16, 64)
        };
        let m = Model::init(spec, 9).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(m.params.digest(), back.params.digest());
        assert_eq!(back.spec.n_layers, 3);
    }

    #[test]
    fn v1_init_gives_half_decay() {
        let spec = ModelSpec {
            layer_kinds: vec![LayerKind::SsmV1],
            n_layers: 1,
            ..ModelSpec::attention(90, 32, 1, 2, 16, 64)
        };
        let m = Model::init(spec, 1).unwrap();
        let a_raw = m.params.get("layers.0.ssm1.a_raw").unwrap();
        let a = -crate::tensor::linalg::softplus(a_raw.data[0]);
        assert!((a + 1.0).abs() < 1e-12);
        // delta starts at ln 2 because the dt head is zero-initialized
        let w2 = m.params.get("layers.0.ssm1.dt.w2").unwrap();
        assert!(w2.data.iter().all(|&v| v == 0.0));
        let decay = (crate::tensor::linalg::softplus(0.0) * a).exp();
        assert!((decay - 0.5).abs() < 1e-12);
    }
}
