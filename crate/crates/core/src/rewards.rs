//! Verifiable rewards: answer normalization, exact-match accuracy, format bonus
//! and their composite `total = r_acc + r_format`.

use serde::{Deserialize, Serialize};

use crate::types::RewardBreakdown;

/// Delimiters a well-formed response must use, plus the bonus it earns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormatSpec {
    pub think_open: String,
    pub think_close: String,
    pub answer_open: String,
    pub answer_close: String,
    pub format_bonus: f64,
}

impl Default for FormatSpec {
    fn default() -> Self {
        FormatSpec {
            think_open: "<think>".into(),
            think_close: "</think>".into(),
            answer_open: "<answer>".into(),
            answer_close: "</answer>".into(),
            format_bonus: 0.1,
        }
    }
}

impl FormatSpec {
    pub fn validate(&self) -> Result<(), String> {
        let delims = self.delimiters();
        if delims.iter().any(|d| d.is_empty()) {
            return Err("format delimiters must be nonempty".into());
        }
        for i in 0..delims.len() {
            for j in i + 1..delims.len() {
                if delims[i] == delims[j] {
                    return Err(format!("format delimiter `{}` used twice", delims[i]));
                }
            }
        }
        if !(self.format_bonus >= 0.0 && self.format_bonus.is_finite()) {
            return Err(format!("format_bonus {} must be finite and >= 0", self.format_bonus));
        }
        Ok(())
    }

    fn delimiters(&self) -> [&str; 4] {
        [
            &self.think_open,
            &self.think_close,
            &self.answer_open,
            &self.answer_close,
        ]
    }
}

const TRAILING_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', ')', ']', '}'];
const LEADING_PUNCT: &[char] = &['"', '\'', '(', '[', '{'];
const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Canonical form used for every answer comparison.
///
/// Case-folds, trims, drops wrapping punctuation and a leading article, collapses
/// whitespace, then rewrites numeric strings so `7`, `7.0` and `+7` coincide.
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    let stripped = lowered
        .trim_end_matches(|c: char| TRAILING_PUNCT.contains(&c) || c.is_whitespace())
        .trim_start_matches(|c: char| LEADING_PUNCT.contains(&c) || c.is_whitespace());
    let mut words: Vec<&str> = stripped.split_whitespace().collect();
    while words.len() > 1 && ARTICLES.contains(&words[0]) {
        words.remove(0);
    }
    let joined = words.join(" ");
    canonical_number(&joined).unwrap_or(joined)
}

fn canonical_number(s: &str) -> Option<String> {
    let body = s.strip_prefix('+').unwrap_or(s);
    let looks_numeric = !body.is_empty()
        && body
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | 'e' | 'E' | '+'))
        && body.chars().any(|c| c.is_ascii_digit());
    if !looks_numeric {
        return None;
    }
    let value: f64 = body.parse().ok()?;
    if !value.is_finite() {
        return None;
    }
    if value.fract() == 0.0 && value.abs() < 1e15 {
        // `as i64` also folds -0 into 0.
        Some(format!("{}", value as i64))
    } else {
        Some(format!("{value}"))
    }
}

/// 1 when the normalized strings agree, else 0.
pub fn accuracy_reward(predicted: &str, gold: &str) -> f64 {
    if normalize_answer(predicted) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

fn is_well_formed(transcript: &str, spec: &FormatSpec) -> bool {
    if spec
        .delimiters()
        .iter()
        .any(|d| transcript.matches(d).count() != 1)
    {
        return false;
    }
    let find = |d: &str| transcript.find(d).expect("counted above");
    let (to, tc, ao, ac) = (
        find(&spec.think_open),
        find(&spec.think_close),
        find(&spec.answer_open),
        find(&spec.answer_close),
    );
    let to_end = to + spec.think_open.len();
    let tc_end = tc + spec.think_close.len();
    let ao_end = ao + spec.answer_open.len();
    let ac_end = ac + spec.answer_close.len();
    if !(to_end <= tc && tc_end <= ao && ao_end <= ac) {
        return false;
    }
    transcript[..to].trim().is_empty()
        && transcript[tc_end..ao].trim().is_empty()
        && transcript[ac_end..].trim().is_empty()
}

/// `spec.format_bonus` for a single think block followed by a single answer block, else 0.
pub fn format_reward(transcript: &str, spec: &FormatSpec) -> f64 {
    if is_well_formed(transcript, spec) {
        spec.format_bonus
    } else {
        0.0
    }
}

/// Extracts the final answer: the answer block if present, the text after an
/// unclosed answer opener, or else the last nonempty line.
pub fn extract_answer<'a>(transcript: &'a str, spec: &FormatSpec) -> &'a str {
    if let Some(open) = transcript.find(&spec.answer_open) {
        let rest = &transcript[open + spec.answer_open.len()..];
        return match rest.find(&spec.answer_close) {
            Some(close) => rest[..close].trim(),
            None => rest.trim(),
        };
    }
    transcript
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
}

pub fn composite_reward(transcript: &str, gold: &str, spec: &FormatSpec) -> RewardBreakdown {
    let predicted = extract_answer(transcript, spec);
    RewardBreakdown::new(
        accuracy_reward(predicted, gold),
        format_reward(transcript, spec),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("  The Cat."), "cat");
        assert_eq!(normalize_answer("7.0"), "7");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("-0.0"), "0");
        assert_eq!(normalize_answer("2.50"), "2.5");
        assert_eq!(normalize_answer("A"), "a");
        assert_eq!(normalize_answer("a red  ball!"), "red ball");
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_reward("the cat", "Cat"), 1.0);
        assert_eq!(accuracy_reward("dog", "cat"), 0.0);
        assert_eq!(accuracy_reward("7", "7.0"), 1.0);
    }

    #[test]
    fn format_examples() {
        let spec = FormatSpec::default();
        assert_eq!(format_reward("<think>a</think><answer>b</answer>", &spec), 0.1);
        assert_eq!(format_reward("<think>a</think><answer>b", &spec), 0.0);
        assert_eq!(
            format_reward("<think>a</think><think>c</think><answer>b</answer>", &spec),
            0.0
        );
        assert_eq!(format_reward("<answer>b</answer><think>a</think>", &spec), 0.0);
        assert_eq!(format_reward("x<think>a</think><answer>b</answer>", &spec), 0.0);
        assert_eq!(
            format_reward(" <think>a</think>\n<answer>b</answer>\n", &spec),
            0.1
        );
    }

    #[test]
    fn composite_examples() {
        let spec = FormatSpec::default();
        let good = composite_reward("<think>look</think><answer>3</answer>", "3", &spec);
        assert_eq!(good.total, 1.1);
        assert_eq!(good.total, good.r_acc + good.r_format);
        let wrong = composite_reward("<think>look</think><answer>4</answer>", "3", &spec);
        assert_eq!(wrong.total, 0.1);
        let malformed = composite_reward("let me see\n3", "3", &spec);
        assert_eq!((malformed.r_acc, malformed.r_format, malformed.total), (1.0, 0.0, 1.0));
        let unclosed = composite_reward("<think>x</think><answer>3", "3", &spec);
        assert_eq!(unclosed.total, 1.0);
    }

    #[test]
    fn spec_validation() {
        assert!(FormatSpec::default().validate().is_ok());
        let mut dup = FormatSpec::default();
        dup.answer_open = dup.think_open.clone();
        assert!(dup.validate().is_err());
        let mut empty = FormatSpec::default();
        empty.think_close.clear();
        assert!(empty.validate().is_err());
    }

    fn inner_text() -> impl Strategy<Value = String> {
        "[a-z0-9 .,\n]{0,24}"
    }

    proptest! {
        #[test]
        fn total_is_bounded(t in "[<>a-z/0-9 ]{0,40}", gold in "[a-z0-9]{1,4}") {
            let spec = FormatSpec::default();
            let r = composite_reward(&t, &gold, &spec);
            prop_assert!(r.total >= 0.0 && r.total <= 1.0 + spec.format_bonus);
            prop_assert_eq!(r.total, r.r_acc + r.r_format);
        }

        #[test]
        fn accuracy_symmetric(a in "[ A-Za-z0-9.]{0,10}", b in "[ A-Za-z0-9.]{0,10}") {
            prop_assert_eq!(accuracy_reward(&a, &b), accuracy_reward(&b, &a));
        }

        #[test]
        fn format_ignores_block_content(x in inner_text(), y in inner_text()) {
            let spec = FormatSpec::default();
            let t = format!("<think>{x}</think><answer>{y}</answer>");
            prop_assert_eq!(format_reward(&t, &spec), spec.format_bonus);
        }

        #[test]
        fn normalization_idempotent(s in "[ A-Za-z0-9.,!?]{0,16}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once.clone());
        }
    }
}
