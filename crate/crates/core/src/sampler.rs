//! Batched stochastic generation with per-sample reproducible RNG streams.
//!
//! Every random draw in the repository flows through [`derive_rng`]: a
//! counter-style construction that keys an independent ChaCha stream off
//! (seed, label, index). Parallel workers therefore cannot perturb each
//! other's samples regardless of scheduling.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DlabError, Result};
use crate::models::Model;
use crate::tasks::tokenizer::{Tokenizer, EOS};
use crate::tasks::TemplateStyle;

/// Independent RNG stream for (seed, label, index): the 32-byte ChaCha key is
/// SHA-256 of the triple, so streams never collide or overlap.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(label.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

/// Top-k truncation setting; the paper's `top_k = -1` sentinel maps to `All`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum TopK {
    All,
    K(usize),
}

impl TryFrom<i64> for TopK {
    type Error = String;
    fn try_from(v: i64) -> std::result::Result<Self, String> {
        match v {
            -1 => Ok(TopK::All),
            k if k >= 1 => Ok(TopK::K(k as usize)),
            other => Err(format!("top_k must be -1 (all) or >= 1, got {other}")),
        }
    }
}

impl From<TopK> for i64 {
    fn from(v: TopK) -> i64 {
        match v {
            TopK::All => -1,
            TopK::K(k) => k as i64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    EosOnly,
    EosOrAnswerMarker,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: TopK,
    pub max_new_tokens: usize,
    pub stop: StopRule,
    pub seed: u64,
    /// Greedy mode: argmax decoding, the T -> 0 limit.
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.6,
            top_k: TopK::All,
            max_new_tokens: 192,
            stop: StopRule::EosOrAnswerMarker,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(DlabError::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(DlabError::config("max_new_tokens must be >= 1"));
        }
        Ok(())
    }

    /// Paper-style default temperature per student scale.
    pub fn default_temperature_for_scale(large: bool) -> f64 {
        if large {
            0.8
        } else {
            0.6
        }
    }
}

/// One sampled solution for one problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub problem_id: String,
    pub sample_index: u32,
    pub text: String,
    pub answer: Option<String>,
    pub correct: bool,
    pub tokens_generated: usize,
    #[serde(default)]
    pub gen_time_ms: f64,
}

/// A prompt ready for generation.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub problem_id: String,
    pub prompt_tokens: Vec<u32>,
    pub truth: String,
    pub style: TemplateStyle,
}

/// Draw one token from a logits row under temperature + top-k.
pub fn draw_token(logits: &[f64], temperature: f64, top_k: TopK, rng: &mut ChaCha12Rng) -> usize {
    let mut scaled: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, l / temperature))
        .collect();
    if let TopK::K(k) = top_k {
        scaled.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        scaled.truncate(k.max(1));
    }
    let mx = scaled
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scaled.iter().map(|&(_, v)| (v - mx).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return scaled[j].0;
        }
    }
    scaled.last().map(|&(i, _)| i).unwrap_or(0)
}

pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

fn completion_is_terminal(text: &str, style: TemplateStyle) -> bool {
    match style {
        TemplateStyle::Boxed => {
            if let Some(at) = text.rfind(crate::tasks::BOXED_MARKER) {
                text[at..].contains("I hope it is correct.")
            } else {
                false
            }
        }
        TemplateStyle::FinalAnswerIs => {
            if let Some(at) = text.rfind(crate::tasks::FINAL_ANSWER_MARKER) {
                text[at + crate::tasks::FINAL_ANSWER_MARKER.len()..].contains('\n')
            } else {
                false
            }
        }
    }
}

/// Generate one completion for (prompt, sample_index). Deterministic in
/// (config.seed, problem_id, sample_index) regardless of batching or threads.
pub fn sample_one(
    model: &Model,
    tok: &Tokenizer,
    prompt: &PromptSpec,
    cfg: &SamplingConfig,
    sample_index: u32,
) -> Result<CompletionRecord> {
    cfg.validate()?;
    if prompt.prompt_tokens.is_empty() {
        return Err(DlabError::data(format!(
            "empty prompt for problem {}",
            prompt.problem_id
        )));
    }
    let started = Instant::now();
    let mut rng = derive_rng(cfg.seed, &prompt.problem_id, sample_index as u64);
    let (mut state, mut logits) = model.prefill(&prompt.prompt_tokens)?;
    let mut generated: Vec<u32> = Vec::new();
    let mut text = String::new();
    for _ in 0..cfg.max_new_tokens {
        if state.pos() >= model.spec.max_seq_len {
            break;
        }
        let next = if cfg.greedy {
            argmax(&logits) as u32
        } else {
            draw_token(&logits, cfg.temperature, cfg.top_k, &mut rng) as u32
        };
        if next == EOS {
            break;
        }
        generated.push(next);
        text = tok.decode_text(&generated);
        if cfg.stop == StopRule::EosOrAnswerMarker && completion_is_terminal(&text, prompt.style) {
            break;
        }
        if state.pos() >= model.spec.max_seq_len {
            break;
        }
        logits = model.decode_step(&mut state, &[next])?;
    }
    let answer = crate::tasks::extract_answer(&text, prompt.style);
    let correct = crate::tasks::check(&prompt.truth, answer.as_deref());
    Ok(CompletionRecord {
        problem_id: prompt.problem_id.clone(),
        sample_index,
        text,
        answer,
        correct,
        tokens_generated: generated.len(),
        gen_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// `n_samples` stochastic completions for every prompt, embarrassingly
/// parallel over (problem, sample) with a deterministic merge order.
pub fn sample_batch(
    model: &Model,
    tok: &Tokenizer,
    prompts: &[PromptSpec],
    cfg: &SamplingConfig,
    n_samples: u32,
) -> Result<Vec<CompletionRecord>> {
    use rayon::prelude::*;
    cfg.validate()?;
    if n_samples == 0 {
        return Err(DlabError::config("n_samples must be >= 1"));
    }
    let jobs: Vec<(usize, u32)> = prompts
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| (0..n_samples).map(move |s| (pi, s)))
        .collect();
    jobs.par_iter()
        .map(|&(pi, s)| sample_one(model, tok, &prompts[pi], cfg, s))
        .collect()
}

/// Greedy decoding (acc@1 reporting).
pub fn greedy(
    model: &Model,
    tok: &Tokenizer,
    prompt: &PromptSpec,
    max_new_tokens: usize,
) -> Result<CompletionRecord> {
    let cfg = SamplingConfig {
        greedy: true,
        max_new_tokens,
        ..SamplingConfig::default()
    };
    sample_one(model, tok, prompt, &cfg, 0)
}

/// Greedy accuracy over a prompt set, parallel over problems.
pub fn greedy_accuracy(
    model: &Model,
    tok: &Tokenizer,
    prompts: &[PromptSpec],
    max_new_tokens: usize,
) -> Result<f64> {
    use rayon::prelude::*;
    let records: Vec<CompletionRecord> = prompts
        .par_iter()
        .map(|p| greedy(model, tok, p, max_new_tokens))
        .collect::<Result<_>>()?;
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(correct as f64 / prompts.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_rng_is_stable_and_distinct() {
        let mut a = derive_rng(1, "p-0", 0);
        let mut b = derive_rng(1, "p-0", 0);
        let mut c = derive_rng(1, "p-0", 1);
        let (x, y, z): (u64, u64, u64) = (a.gen(), b.gen(), c.gen());
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn temperature_never_changes_argmax() {
        for seed in 0..20u64 {
            let mut rng = derive_rng(seed, "argmax-inv", 0);
            let logits: Vec<f64> = (0..17).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let base = argmax(&logits);
            for t in [0.1, 0.5, 1.0, 3.0, 10.0] {
                let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
                assert_eq!(argmax(&scaled), base);
            }
        }
    }

    #[test]
    fn top_k_one_always_picks_argmax() {
        let logits = vec![0.1, 2.5, -1.0, 2.4];
        let mut rng = derive_rng(3, "topk", 0);
        for _ in 0..50 {
            assert_eq!(draw_token(&logits, 0.7, TopK::K(1), &mut rng), 1);
        }
    }

    #[test]
    fn top_k_serializes_as_minus_one_sentinel() {
        assert_eq!(serde_json::to_string(&TopK::All).unwrap(), "-1");
        assert_eq!(serde_json::to_string(&TopK::K(5)).unwrap(), "5");
        let all: TopK = serde_json::from_str("-1").unwrap();
        assert_eq!(all, TopK::All);
        assert!(serde_json::from_str::<TopK>("0").is_err());
    }

    #[test]
    fn draw_frequencies_match_softmax_within_3_sigma() {
        let logits = vec![0.0, 1.0, -0.5, 2.0, 0.25];
        let t = 0.8;
        let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
        let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let n = 100_000usize;
        let mut counts = vec![0usize; logits.len()];
        let mut rng = derive_rng(42, "freq", 0);
        for _ in 0..n {
            counts[draw_token(&logits, t, TopK::All, &mut rng)] += 1;
        }
        for (i, &p) in probs.iter().enumerate() {
            let sigma = (p * (1.0 - p) * n as f64).sqrt();
            let diff = (counts[i] as f64 - p * n as f64).abs();
            assert!(diff <= 3.0 * sigma, "token {i}: diff {diff}, 3sigma {}", 3.0 * sigma);
        }
    }

    #[test]
    fn terminal_detection() {
        assert!(completion_is_terminal(
            "## Step 1: 1 + 1 = 2\nThe final answer is 2\n",
            TemplateStyle::FinalAnswerIs
        ));
        assert!(!completion_is_terminal(
            "The final answer is 2",
            TemplateStyle::FinalAnswerIs
        ));
        assert!(completion_is_terminal(
            "Therefore, the final answer is: $\\boxed{2}$. I hope it is correct.",
            TemplateStyle::Boxed
        ));
    }
}
