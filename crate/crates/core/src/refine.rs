//! Text refinement: prompt construction, LLM invocation, output clean-up, a
//! deterministic rule-based refiner, and a seeded impaired-text corruptor.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, CompletionParams, Llm};
use crate::sir::ImpairmentClass;

pub const INPUT_SLOT: &str = "[impaired text]";
pub const CONDITION_SLOT: &str = "[impairment description]";

pub const WITHOUT_CLASS_TEMPLATE: &str = include_str!("../assets/prompts/refine_without_class.txt");
pub const WITH_CLASS_TEMPLATE: &str = include_str!("../assets/prompts/refine_with_class.txt");
pub const DYSARTHRIA_CONDITION: &str = include_str!("../assets/prompts/condition_dysarthria.txt");
pub const STUTTER_CONDITION: &str = include_str!("../assets/prompts/condition_stutter.txt");
pub const APHASIA_CONDITION: &str = include_str!("../assets/prompts/condition_aphasia.txt");

pub const FILLERS: [&str; 4] = ["uh", "um", "erm", "uhh"];

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("the healthy class cannot be used to corrupt text")]
    HealthyClassInvalid,
    #[error("refinement failed; raw response: {raw:?}")]
    RefinementFailed { raw: String },
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    WithClass,
    WithoutClass,
}

/// A template split around its slots, rendered by position so slot content
/// is never re-scanned.
#[derive(Debug, Clone, PartialEq)]
struct Template {
    before_condition: Option<String>,
    before_input: String,
    after_input: String,
}

impl Template {
    fn parse(body: &str, variant: PromptVariant) -> Result<Self, RefineError> {
        let count = |slot: &str| body.matches(slot).count();
        let want_condition = usize::from(variant == PromptVariant::WithClass);
        if count(INPUT_SLOT) != 1 || count(CONDITION_SLOT) != want_condition {
            return Err(RefineError::Template(format!(
                "{variant:?} template needs exactly one {INPUT_SLOT} and {want_condition} {CONDITION_SLOT}"
            )));
        }
        let (head, after_input) = body.split_once(INPUT_SLOT).expect("counted");
        let (before_condition, before_input) = match head.split_once(CONDITION_SLOT) {
            Some((a, b)) => (Some(a.to_string()), b.to_string()),
            None => (None, head.to_string()),
        };
        if variant == PromptVariant::WithClass && before_condition.is_none() {
            return Err(RefineError::Template(format!("{CONDITION_SLOT} must precede {INPUT_SLOT}")));
        }
        Ok(Self { before_condition, before_input, after_input: after_input.to_string() })
    }

    fn render(&self, condition: Option<&str>, input: &str) -> String {
        let mut out = String::new();
        if let (Some(pre), Some(cond)) = (&self.before_condition, condition) {
            out.push_str(pre);
            out.push_str(cond);
        }
        out.push_str(&self.before_input);
        out.push_str(input);
        out.push_str(&self.after_input);
        out
    }
}

/// The two refinement prompts plus a condition description per impairment.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    without_class: Template,
    with_class: Template,
    conditions: [String; 3],
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::from_texts(
            WITHOUT_CLASS_TEMPLATE,
            WITH_CLASS_TEMPLATE,
            [DYSARTHRIA_CONDITION, STUTTER_CONDITION, APHASIA_CONDITION],
        )
        .expect("bundled templates are valid")
    }
}

impl PromptTemplates {
    pub fn from_texts(without_class: &str, with_class: &str, conditions: [&str; 3]) -> Result<Self, RefineError> {
        Ok(Self {
            without_class: Template::parse(without_class, PromptVariant::WithoutClass)?,
            with_class: Template::parse(with_class, PromptVariant::WithClass)?,
            conditions: conditions.map(str::to_string),
        })
    }

    /// Reads overrides from a directory laid out like `assets/prompts`.
    pub fn from_dir(dir: &Path) -> Result<Self, RefineError> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| RefineError::Template(format!("{}: {e}", dir.join(name).display())))
        };
        Self::from_texts(
            &read("refine_without_class.txt")?,
            &read("refine_with_class.txt")?,
            [
                &read("condition_dysarthria.txt")?,
                &read("condition_stutter.txt")?,
                &read("condition_aphasia.txt")?,
            ],
        )
    }

    pub fn condition(&self, class: ImpairmentClass) -> Option<&str> {
        match class {
            ImpairmentClass::Healthy => None,
            c => Some(&self.conditions[c.index()]),
        }
    }

    /// Healthy, like no class at all, selects the class-free template.
    pub fn variant_for(class: Option<ImpairmentClass>) -> PromptVariant {
        match class {
            Some(c) if c.is_impaired() => PromptVariant::WithClass,
            _ => PromptVariant::WithoutClass,
        }
    }

    pub fn build(&self, impaired_text: &str, class: Option<ImpairmentClass>) -> Result<String, RefineError> {
        if impaired_text.trim().is_empty() {
            return Err(RefineError::EmptyInput);
        }
        Ok(match class.and_then(|c| self.condition(c)) {
            Some(condition) => self.with_class.render(Some(condition), impaired_text),
            None => self.without_class.render(None, impaired_text),
        })
    }
}

pub fn default_templates() -> &'static PromptTemplates {
    static TEMPLATES: OnceLock<PromptTemplates> = OnceLock::new();
    TEMPLATES.get_or_init(PromptTemplates::default)
}

/// Renders the bundled refinement prompt for `impaired_text`.
pub fn build_prompt(impaired_text: &str, class: Option<ImpairmentClass>) -> Result<String, RefineError> {
    default_templates().build(impaired_text, class)
}

/// The text in a rendered prompt's input slot.
pub fn extract_prompt_input(prompt: &str) -> &str {
    let start = match prompt.rfind("\nInput: ") {
        Some(i) => i + "\nInput: ".len(),
        None => prompt.rfind("Input:").map_or(0, |i| i + "Input:".len()),
    };
    let rest = &prompt[start..];
    rest.strip_suffix("\nOutput:").unwrap_or(rest)
}

/// Cleans an LLM response: unwraps a code fence, strips leading `Output:`
/// labels and collapses whitespace.
pub fn postprocess_completion(raw: &str) -> String {
    let mut text = raw.trim();
    if let Some(open) = text.find("```") {
        let after = &text[open + 3..];
        // Skip an info string such as ```text
        let body_start = after.find('\n').map_or(0, |i| i + 1);
        let body = &after[body_start..];
        text = match body.find("```") {
            Some(close) => &body[..close],
            None => body,
        };
    }
    let mut text = text.trim();
    loop {
        let lower = text.get(..7).map(str::to_ascii_lowercase);
        if lower.as_deref() == Some("output:") {
            text = text[7..].trim_start();
        } else {
            break;
        }
    }
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub refined_text: String,
    pub prompt_used: String,
    pub backend_id: String,
    pub latency_s: f64,
    pub class_used: Option<ImpairmentClass>,
}

/// Builds the prompt, asks the LLM, and cleans its answer.
pub fn refine_text(
    text: &str,
    class: Option<ImpairmentClass>,
    llm: &dyn Llm,
    templates: &PromptTemplates,
    params: &CompletionParams,
) -> Result<RefineOutcome, RefineError> {
    let prompt = templates.build(text, class)?;
    let start = Instant::now();
    let raw = match llm.complete(&prompt, params) {
        Ok(raw) => raw,
        Err(BackendError::EmptyCompletion { .. }) => return Err(RefineError::RefinementFailed { raw: String::new() }),
        Err(e) => return Err(e.into()),
    };
    let latency_s = start.elapsed().as_secs_f64();
    let refined_text = postprocess_completion(&raw);
    if refined_text.is_empty() {
        return Err(RefineError::RefinementFailed { raw });
    }
    Ok(RefineOutcome {
        refined_text,
        prompt_used: prompt,
        backend_id: llm.id().to_string(),
        latency_s,
        class_used: class.filter(|c| c.is_impaired()),
    })
}

fn is_dash(c: char) -> bool {
    matches!(c, '-' | '–' | '—')
}

/// Splits a token into its word core and trailing punctuation.
fn split_trailing(token: &str) -> (&str, &str) {
    let end = token
        .char_indices()
        .rev()
        .find(|&(_, c)| c.is_alphanumeric())
        .map_or(0, |(i, c)| i + c.len_utf8());
    token.split_at(end)
}

fn normalized(token: &str) -> String {
    token.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// "b-b-book" -> "book": every dash-separated part before the last is a
/// prefix of the last.
fn collapse_stutter_prefix(token: &str) -> String {
    let (core, tail) = split_trailing(token);
    let parts: Vec<&str> = core.split(is_dash).collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return token.to_string();
    }
    let last = parts[parts.len() - 1].to_lowercase();
    if parts[..parts.len() - 1].iter().all(|p| last.starts_with(&p.to_lowercase())) {
        format!("{}{tail}", parts[parts.len() - 1])
    } else {
        token.to_string()
    }
}

fn collapse_long_runs(token: &str) -> String {
    let chars: Vec<char> = token.chars().collect();
    let mut out = String::with_capacity(token.len());
    let mut i = 0;
    while i < chars.len() {
        let mut j = i;
        while j < chars.len() && chars[j] == chars[i] {
            j += 1;
        }
        let run = if chars[i].is_alphabetic() && j - i >= 3 { 1 } else { j - i };
        out.extend(std::iter::repeat_n(chars[i], run));
        i = j;
    }
    out
}

fn strip_ellipses(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '…' || (chars[i] == '.' && chars.get(i + 1) == Some(&'.')) {
            while i < chars.len() && (chars[i] == '.' || chars[i] == '…') {
                i += 1;
            }
            out.push(' ');
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

fn rule_pass(text: &str) -> String {
    // (1) stutter prefixes
    let tokens: Vec<String> = text.split_whitespace().map(collapse_stutter_prefix).collect();
    // (2) immediate duplicates
    let mut deduped: Vec<String> = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let key = normalized(&tok);
        if !key.is_empty() && deduped.last().is_some_and(|prev| normalized(prev) == key) {
            continue;
        }
        deduped.push(tok);
    }
    // (3) fillers, (4) character runs
    let kept: Vec<String> = deduped
        .into_iter()
        .filter(|tok| !FILLERS.contains(&normalized(tok).as_str()))
        .map(|tok| collapse_long_runs(&tok))
        .collect();
    // (5) ellipses and whitespace
    strip_ellipses(&kept.join(" ")).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Deterministic offline refiner.
///
/// Runs the pass list (stutter prefixes, duplicate words, fillers,
/// character runs, ellipses/whitespace) until the text stops changing, so
/// the result is a fixed point. Every pass applies to all classes.
pub fn rule_refine(text: &str, _class: Option<ImpairmentClass>) -> Result<String, RefineError> {
    if text.trim().is_empty() {
        return Err(RefineError::EmptyInput);
    }
    let mut current = text.to_string();
    loop {
        let next = rule_pass(&current);
        if next == current {
            return Ok(next);
        }
        current = next;
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "to", "of", "in", "on", "at", "for", "and", "or", "is", "are", "was", "be", "my", "me",
    "i", "it", "we", "you", "he", "she", "they", "this", "that", "with", "some", "please",
];

fn is_vowel(c: char) -> bool {
    matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Doubles the first vowel, or failing that the first sibilant.
fn stretch(word: &str) -> String {
    let pos = word
        .char_indices()
        .find(|&(_, c)| is_vowel(c))
        .or_else(|| word.char_indices().find(|&(_, c)| matches!(c.to_ascii_lowercase(), 's' | 'z')));
    match pos {
        Some((i, c)) => format!("{}{c}{}", &word[..i], &word[i..]),
        None => word.to_string(),
    }
}

/// Seeded rule-based simulation of impaired transcripts.
///
/// * stutter: ~30% of words get a doubled first-letter prefix (`b-b-book`),
///   ~10% are repeated;
/// * dysarthria: ~40% of words are stretched and split (`s-suun`) or
///   trailed by a pause;
/// * aphasia: ~20% of content words are dropped and fillers are inserted.
///
/// Output is never empty and depends only on `(intent, class, seed)`.
pub fn corrupt_text(intent: &str, class: ImpairmentClass, seed: u64) -> Result<String, RefineError> {
    if intent.trim().is_empty() {
        return Err(RefineError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<&str> = intent.split_whitespace().collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len() * 2);
    match class {
        ImpairmentClass::Healthy => return Err(RefineError::HealthyClassInvalid),
        ImpairmentClass::Stutter => {
            for w in &words {
                let repeat_sound = rng.random::<f64>() < 0.3;
                let repeat_word = rng.random::<f64>() < 0.1;
                if repeat_word {
                    out.push(w.to_string());
                }
                match w.chars().next() {
                    Some(first) if repeat_sound && first.is_alphabetic() => out.push(format!("{first}-{first}-{w}")),
                    _ => out.push(w.to_string()),
                }
            }
        }
        ImpairmentClass::Dysarthria => {
            for w in &words {
                let affected = rng.random::<f64>() < 0.4;
                let hyphenate = rng.random::<f64>() < 0.5;
                if !affected {
                    out.push(w.to_string());
                    continue;
                }
                let stretched = stretch(w);
                match w.chars().next() {
                    Some(first) if hyphenate && first.is_alphabetic() => out.push(format!("{first}-{stretched}")),
                    _ => out.push(format!("{stretched}...")),
                }
            }
        }
        ImpairmentClass::Aphasia => {
            for w in &words {
                let drop = rng.random::<f64>() < 0.2;
                let filler = rng.random::<f64>() < 0.15;
                let which = rng.random::<bool>();
                if filler {
                    out.push(if which { "uh".into() } else { "um".into() });
                }
                let content = w.chars().count() > 2 && !STOPWORDS.contains(&normalized(w).as_str());
                if !(drop && content) {
                    out.push(w.to_string());
                }
            }
            if out.iter().all(|t| FILLERS.contains(&t.as_str())) {
                out.push(words[0].to_string());
            }
        }
    }
    Ok(out.join(" "))
}
