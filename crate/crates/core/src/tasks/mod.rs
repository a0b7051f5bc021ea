//! Synthetic chain-of-thought arithmetic benchmark: problem generation,
//! prompt templates, chat rendering, answer extraction, and checking.

pub mod tokenizer;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DlabError, Result};
use crate::sampler::derive_rng;
use tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn salt(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
    pub answer: String,
    pub difficulty: usize,
    pub split: Split,
}

/// Ranges for the generator. Values stay within [0, value_cap] at every step
/// so the arithmetic never leaves two-digit territory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskGenConfig {
    pub difficulty_min: usize,
    pub difficulty_max: usize,
    pub start_min: i64,
    pub start_max: i64,
    pub operand_min: i64,
    pub operand_max: i64,
    pub value_cap: i64,
    pub mul_prob: f64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        TaskGenConfig {
            difficulty_min: 1,
            difficulty_max: 3,
            start_min: 2,
            start_max: 60,
            operand_min: 2,
            operand_max: 9,
            value_cap: 99,
            mul_prob: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    pub fn symbol(self) -> char {
        match self {
            ArithOp::Add => '+',
            ArithOp::Sub => '-',
            ArithOp::Mul => '*',
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a - b,
            ArithOp::Mul => a * b,
        }
    }
}

/// Deterministic problem generation: same (config, seed, count, split)
/// always produces the same problems; train and eval ids are disjoint by
/// construction.
pub fn generate_problems(
    cfg: &TaskGenConfig,
    seed: u64,
    count: usize,
    split: Split,
) -> Result<Vec<Problem>> {
    if count == 0 {
        return Err(DlabError::config("problem count must be positive"));
    }
    if cfg.difficulty_min == 0 || cfg.difficulty_min > cfg.difficulty_max {
        return Err(DlabError::config(format!(
            "empty difficulty range {}..={}",
            cfg.difficulty_min, cfg.difficulty_max
        )));
    }
    if cfg.start_max > cfg.value_cap || cfg.start_min < 0 || cfg.start_min > cfg.start_max {
        return Err(DlabError::config("start range must lie within [0, value_cap]"));
    }
    let mut rng = derive_rng(seed, &format!("task-gen-{}", split.salt()), 0);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let difficulty = rng.gen_range(cfg.difficulty_min..=cfg.difficulty_max);
        let start = rng.gen_range(cfg.start_min..=cfg.start_max);
        let mut value = start;
        let mut text = format!("Start with {start}.");
        for _ in 0..difficulty {
            let (op, operand) = pick_op(cfg, value, &mut rng);
            match op {
                ArithOp::Add => text.push_str(&format!(" Then add {operand}.")),
                ArithOp::Sub => text.push_str(&format!(" Then subtract {operand}.")),
                ArithOp::Mul => text.push_str(&format!(" Then multiply by {operand}.")),
            }
            value = op.apply(value, operand);
        }
        text.push_str(" What is the result?");
        out.push(Problem {
            id: format!("{}-{i:05}", split.salt()),
            prompt: text,
            answer: value.to_string(),
            difficulty,
            split,
        });
    }
    Ok(out)
}

fn pick_op(cfg: &TaskGenConfig, value: i64, rng: &mut impl Rng) -> (ArithOp, i64) {
    let can_mul = value >= 2 && value * 2 <= cfg.value_cap;
    if can_mul && rng.gen::<f64>() < cfg.mul_prob {
        let max_f = (cfg.value_cap / value).min(3);
        return (ArithOp::Mul, rng.gen_range(2..=max_f.max(2)));
    }
    let add_room = cfg.value_cap - value;
    let sub_room = value;
    let prefer_add = if add_room >= cfg.operand_min && sub_room >= cfg.operand_min {
        rng.gen::<bool>()
    } else {
        add_room >= cfg.operand_min
    };
    if prefer_add {
        let hi = cfg.operand_max.min(add_room);
        (ArithOp::Add, rng.gen_range(cfg.operand_min..=hi.max(cfg.operand_min)))
    } else {
        let hi = cfg.operand_max.min(sub_room);
        (ArithOp::Sub, rng.gen_range(cfg.operand_min..=hi.max(cfg.operand_min)))
    }
}

/// Parse a generated prompt back into (start value, operations). This is the
/// entry point of the independent arithmetic evaluator: it never looks at the
/// stored answer.
pub fn parse_prompt(prompt: &str) -> Result<(i64, Vec<(ArithOp, i64)>)> {
    let rest = prompt
        .strip_prefix("Start with ")
        .ok_or_else(|| DlabError::data(format!("unrecognized prompt: {prompt:?}")))?;
    let mut parts = rest.split('.');
    let start: i64 = parts
        .next()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| DlabError::data("prompt has no start value"))?;
    let mut ops = Vec::new();
    for part in parts {
        let part = part.trim();
        if part.is_empty() || part.starts_with("What is the result") {
            continue;
        }
        let (op, tail) = if let Some(t) = part.strip_prefix("Then add ") {
            (ArithOp::Add, t)
        } else if let Some(t) = part.strip_prefix("Then subtract ") {
            (ArithOp::Sub, t)
        } else if let Some(t) = part.strip_prefix("Then multiply by ") {
            (ArithOp::Mul, t)
        } else {
            return Err(DlabError::data(format!("unrecognized prompt clause: {part:?}")));
        };
        let operand: i64 = tail
            .trim()
            .parse()
            .map_err(|_| DlabError::data(format!("bad operand in clause {part:?}")))?;
        ops.push((op, operand));
    }
    Ok((start, ops))
}

/// Evaluate a parsed prompt, returning each intermediate step (lhs, op, rhs,
/// result) and the final value.
pub fn evaluate_steps(start: i64, ops: &[(ArithOp, i64)]) -> (Vec<(i64, ArithOp, i64, i64)>, i64) {
    let mut value = start;
    let mut steps = Vec::with_capacity(ops.len());
    for &(op, operand) in ops {
        let next = op.apply(value, operand);
        steps.push((value, op, operand, next));
        value = next;
    }
    (steps, value)
}

// ── prompt templates ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    Boxed,
    FinalAnswerIs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub style: TemplateStyle,
    pub system: String,
}

pub const MATH_SYSTEM_PROMPT: &str = "Solve the following math problem efficiently and clearly:\n\n- For simple problems (2 steps or fewer):\nProvide a concise solution with minimal explanation.\n\n- For complex problems (3 steps or more):\nUse this step-by-step format:\n\n## Step 1: [Concise description]\n[Brief explanation and calculations]\n\n## Step 2: [Concise description]\n[Brief explanation and calculations]\n\n...\n\nRegardless of the approach, always conclude with:\n\nTherefore, the final answer is: $\\boxed{answer}$. I hope it is correct.\n\nWhere [answer] is just the final number or expression that solves the problem.";

pub const GSM8K_SYSTEM_PROMPT: &str = "\n\nGiven the following problem, reason and give a final answer to the problem.\nYour response should end with \"The final answer is [answer]\" where [answer] is the response to the problem.\nProblem:";

pub const BOXED_MARKER: &str = "\\boxed{";
pub const FINAL_ANSWER_MARKER: &str = "The final answer is";

impl PromptTemplate {
    pub fn math_boxed() -> Self {
        PromptTemplate {
            style: TemplateStyle::Boxed,
            system: MATH_SYSTEM_PROMPT.to_string(),
        }
    }

    pub fn gsm8k() -> Self {
        PromptTemplate {
            style: TemplateStyle::FinalAnswerIs,
            system: GSM8K_SYSTEM_PROMPT.to_string(),
        }
    }

    pub fn with_system(style: TemplateStyle, system: impl Into<String>) -> Self {
        PromptTemplate {
            style,
            system: system.into(),
        }
    }

    /// Final line of a completion for this style.
    pub fn conclusion(&self, answer: &str) -> String {
        match self.style {
            TemplateStyle::Boxed => {
                format!("Therefore, the final answer is: $\\boxed{{{answer}}}$. I hope it is correct.")
            }
            TemplateStyle::FinalAnswerIs => format!("{FINAL_ANSWER_MARKER} {answer}"),
        }
    }
}

/// Deterministic chat rendering: system text, user problem, assistant marker.
pub fn render_chat(problem: &Problem, template: &PromptTemplate) -> String {
    format!(
        "{}{}\n{}{}\n{}",
        tokenizer::SYS_STR,
        template.system,
        tokenizer::USER_STR,
        problem.prompt,
        tokenizer::ASST_STR
    )
}

/// Token index where assistant output begins (= length of the rendered
/// system+user prefix, including the assistant marker).
pub fn assistant_boundary(problem: &Problem, template: &PromptTemplate, tok: &Tokenizer) -> Result<usize> {
    Ok(tok.encode(&render_chat(problem, template))?.len())
}

/// Reference chain-of-thought for a problem, recomputed by the independent
/// evaluator from the prompt text.
pub fn reference_cot(problem: &Problem, template: &PromptTemplate) -> Result<String> {
    let (start, ops) = parse_prompt(&problem.prompt)?;
    let (steps, value) = evaluate_steps(start, &ops);
    let mut out = String::new();
    for (i, (a, op, b, c)) in steps.iter().enumerate() {
        out.push_str(&format!("## Step {}: {} {} {} = {}\n", i + 1, a, op.symbol(), b, c));
    }
    out.push_str(&template.conclusion(&value.to_string()));
    Ok(out)
}

// ── answer extraction and checking ───────────────────────────────────

fn normalize_answer(raw: &str) -> String {
    let mut s = raw.trim();
    while let Some(t) = s.strip_suffix('.') {
        s = t.trim_end();
    }
    if let Some(t) = s.strip_prefix('$') {
        s = t.trim_start();
    }
    s.trim().to_string()
}

/// Last-match answer extraction per template style; `None` when no marker.
pub fn extract_answer(completion: &str, style: TemplateStyle) -> Option<String> {
    match style {
        TemplateStyle::Boxed => {
            let at = completion.rfind(BOXED_MARKER)?;
            let payload = &completion[at + BOXED_MARKER.len()..];
            let end = payload.find('}')?;
            Some(normalize_answer(&payload[..end]))
        }
        TemplateStyle::FinalAnswerIs => {
            let at = completion.rfind(FINAL_ANSWER_MARKER)?;
            let tail = &completion[at + FINAL_ANSWER_MARKER.len()..];
            let line = tail.lines().next().unwrap_or(tail);
            let ans = normalize_answer(line);
            if ans.is_empty() {
                None
            } else {
                Some(ans)
            }
        }
    }
}

/// Numeric-equality comparison after canonicalization; integer parse first,
/// exact string match as the fallback.
pub fn check(truth: &str, answer: Option<&str>) -> bool {
    let Some(answer) = answer else { return false };
    let a = normalize_answer(answer);
    let t = normalize_answer(truth);
    match (a.parse::<i64>(), t.parse::<i64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == t,
    }
}

/// SHA-256 over the JSONL serialization of a problem set.
pub fn problem_set_digest(problems: &[Problem]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in problems {
        hasher.update(serde_json::to_string(p)?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TaskGenConfig {
        TaskGenConfig::default()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_problems(&cfg(), 7, 1, Split::Train).unwrap();
        let b = generate_problems(&cfg(), 7, 1, Split::Train).unwrap();
        assert_eq!(a[0].prompt, b[0].prompt);
        assert_eq!(a[0].answer, b[0].answer);
    }

    #[test]
    fn digest_is_stable_for_fixed_seed() {
        let a = generate_problems(&cfg(), 11, 50, Split::Eval).unwrap();
        let b = generate_problems(&cfg(), 11, 50, Split::Eval).unwrap();
        assert_eq!(problem_set_digest(&a).unwrap(), problem_set_digest(&b).unwrap());
        let c = generate_problems(&cfg(), 12, 50, Split::Eval).unwrap();
        assert_ne!(problem_set_digest(&a).unwrap(), problem_set_digest(&c).unwrap());
    }

    #[test]
    fn difficulty_one_answer_verified_by_independent_evaluator() {
        let mut one = cfg();
        one.difficulty_min = 1;
        one.difficulty_max = 1;
        for p in generate_problems(&one, 3, 25, Split::Train).unwrap() {
            let (start, ops) = parse_prompt(&p.prompt).unwrap();
            assert_eq!(ops.len(), 1);
            let (_, value) = evaluate_steps(start, &ops);
            assert_eq!(value.to_string(), p.answer, "prompt {}", p.prompt);
        }
    }

    #[test]
    fn train_eval_ids_disjoint() {
        let train = generate_problems(&cfg(), 5, 40, Split::Train).unwrap();
        let eval = generate_problems(&cfg(), 5, 40, Split::Eval).unwrap();
        for t in &train {
            assert!(eval.iter().all(|e| e.id != t.id));
        }
    }

    #[test]
    fn empty_difficulty_range_rejected() {
        let mut bad = cfg();
        bad.difficulty_min = 3;
        bad.difficulty_max = 2;
        assert!(matches!(
            generate_problems(&bad, 1, 1, Split::Train),
            Err(DlabError::Config(_))
        ));
    }

    #[test]
    fn values_stay_within_cap() {
        for p in generate_problems(&cfg(), 99, 300, Split::Train).unwrap() {
            let (start, ops) = parse_prompt(&p.prompt).unwrap();
            let (steps, value) = evaluate_steps(start, &ops);
            for (_, _, _, mid) in steps {
                assert!((0..=cfg().value_cap).contains(&mid));
            }
            assert!((0..=cfg().value_cap).contains(&value));
            assert_eq!(p.difficulty, ops.len());
        }
    }

    #[test]
    fn extract_boxed_paper_format() {
        let text = "Therefore, the final answer is: $\\boxed{42}$. I hope it is correct.";
        assert_eq!(extract_answer(text, TemplateStyle::Boxed).as_deref(), Some("42"));
    }

    #[test]
    fn extract_final_answer_is_paper_format() {
        assert_eq!(
            extract_answer("The final answer is 7", TemplateStyle::FinalAnswerIs).as_deref(),
            Some("7")
        );
    }

    #[test]
    fn extract_absent_when_no_marker() {
        assert_eq!(extract_answer("I cannot solve this.", TemplateStyle::Boxed), None);
        assert_eq!(
            extract_answer("I cannot solve this.", TemplateStyle::FinalAnswerIs),
            None
        );
    }

    #[test]
    fn extraction_is_last_match() {
        let text = "$\\boxed{1}$ then later $\\boxed{2}$.";
        assert_eq!(extract_answer(text, TemplateStyle::Boxed).as_deref(), Some("2"));
        let text2 = "The final answer is 3\nThe final answer is 4";
        assert_eq!(
            extract_answer(text2, TemplateStyle::FinalAnswerIs).as_deref(),
            Some("4")
        );
    }

    #[test]
    fn check_canonicalizes_integers() {
        assert!(check("42", Some("42")));
        assert!(check("42", Some("042")));
        assert!(check("42", Some(" 42. ")));
        assert!(!check("42", Some("43")));
        assert!(!check("42", None));
    }

    #[test]
    fn render_chat_is_byte_stable_and_verbatim() {
        let p = &generate_problems(&cfg(), 1, 1, Split::Eval).unwrap()[0];
        let math = PromptTemplate::math_boxed();
        let a = render_chat(p, &math);
        let b = render_chat(p, &math);
        assert_eq!(a, b);
        assert!(a.contains("Therefore, the final answer is: $\\boxed{answer}$. I hope it is correct."));
        let gsm = PromptTemplate::gsm8k();
        assert!(render_chat(p, &gsm).contains("Your response should end with \"The final answer is [answer]\""));
    }

    #[test]
    fn assistant_boundary_is_prefix_length() {
        let p = &generate_problems(&cfg(), 1, 1, Split::Eval).unwrap()[0];
        let t = PromptTemplate::gsm8k();
        let tok = Tokenizer::new();
        let boundary = assistant_boundary(p, &t, &tok).unwrap();
        let rendered = tok.encode(&render_chat(p, &t)).unwrap();
        assert_eq!(boundary, rendered.len());
        // full doc = prefix + completion; boundary splits exactly there
        let cot = reference_cot(p, &t).unwrap();
        let full = tok.encode(&format!("{}{}", render_chat(p, &t), cot)).unwrap();
        assert_eq!(&full[..boundary], &rendered[..]);
    }

    #[test]
    fn reference_cot_roundtrip() {
        for style in [TemplateStyle::Boxed, TemplateStyle::FinalAnswerIs] {
            let t = match style {
                TemplateStyle::Boxed => PromptTemplate::math_boxed(),
                TemplateStyle::FinalAnswerIs => PromptTemplate::gsm8k(),
            };
            for p in generate_problems(&cfg(), 21, 50, Split::Train).unwrap() {
                let cot = reference_cot(&p, &t).unwrap();
                let got = extract_answer(&cot, style);
                assert!(check(&p.answer, got.as_deref()), "cot {cot:?}");
            }
        }
    }

    #[test]
    fn tokenizer_covers_all_rendered_text() {
        let tok = Tokenizer::new();
        for style in [PromptTemplate::math_boxed(), PromptTemplate::gsm8k()] {
            for p in generate_problems(&cfg(), 3, 20, Split::Train).unwrap() {
                let doc = format!("{}{}", render_chat(&p, &style), reference_cot(&p, &style).unwrap());
                tok.encode(&doc).unwrap();
            }
        }
    }
}
