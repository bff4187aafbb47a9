//! Segments a numbered teacher response into question-answer pairs.
//!
//! An item starts on a line of the form `N.`, `N)` or `N:`, optionally in
//! bold (`**N.**`), and runs until the next item marker. Item `N` answers
//! the template's `N`-th sub-question.

use log::warn;

use crate::error::{Result, TeacherError};
use crate::templates::template;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedQa {
    /// `(question, answer)` in template order.
    pub pairs: Vec<(String, String)>,
    /// Fragments or questions that could not be paired.
    pub warnings: usize,
}

/// Item number and remaining text when `line` opens an item.
fn marker(line: &str) -> Option<(usize, &str)> {
    let s = line.trim_start();
    let s = s.strip_prefix("**").unwrap_or(s);
    let digits = s.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || digits > 2 {
        return None;
    }
    let rest = &s[digits..];
    let rest = rest.strip_prefix(['.', ')', ':'])?;
    let rest = rest.strip_prefix("**").unwrap_or(rest);
    if !(rest.is_empty() || rest.starts_with(char::is_whitespace)) {
        return None;
    }
    Some((s[..digits].parse().ok()?, rest.trim()))
}

pub fn parse_qa(raw: &str, template_id: u8) -> Result<ParsedQa> {
    let questions = &template(template_id)?.questions;
    let mut items: Vec<(usize, Vec<&str>)> = Vec::new();
    let mut preamble = false;
    for line in raw.lines() {
        match marker(line) {
            Some((n, rest)) => items.push((n, vec![rest])),
            None => match items.last_mut() {
                Some((_, body)) => body.push(line),
                None => preamble |= !line.trim().is_empty(),
            },
        }
    }
    let mut warnings = usize::from(preamble);
    let mut answers: Vec<Option<String>> = vec![None; questions.len()];
    for (n, body) in items {
        let text = body.join("\n").trim().to_string();
        match answers.get_mut(n.wrapping_sub(1)) {
            Some(slot @ None) if !text.is_empty() => *slot = Some(text),
            _ => warnings += 1,
        }
    }
    let mut pairs = Vec::new();
    for (q, a) in questions.iter().zip(answers) {
        match a {
            Some(a) => pairs.push((q.clone(), a)),
            None => warnings += 1,
        }
    }
    if pairs.is_empty() {
        return Err(TeacherError::Parse { raw: raw.to_string() });
    }
    if warnings > 0 {
        warn!("template {template_id}: {warnings} unpaired fragment(s)");
    }
    Ok(ParsedQa { pairs, warnings })
}

/// Numbered response text, the format [`parse_qa`] reads.
pub fn format_response<S: AsRef<str>>(answers: &[S]) -> String {
    answers
        .iter()
        .enumerate()
        .map(|(i, a)| format!("{}. {}", i + 1, a.as_ref()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers() {
        assert_eq!(marker("1. text"), Some((1, "text")));
        assert_eq!(marker("  **2.** bold"), Some((2, "bold")));
        assert_eq!(marker("3) x"), Some((3, "x")));
        assert_eq!(marker("4:"), Some((4, "")));
        assert_eq!(marker("20 nm wide"), None);
        assert_eq!(marker("1.5 microns"), None);
        assert_eq!(marker("plain"), None);
    }

    #[test]
    fn two_of_two_and_one_of_two() {
        let full = parse_qa("1. Smooth.\n2. No defects.", 4).unwrap();
        assert_eq!(full.pairs.len(), 2);
        assert_eq!(full.warnings, 0);
        assert_eq!(full.pairs[1].1, "No defects.");
        let half = parse_qa("1. Smooth surfaces throughout.", 4).unwrap();
        assert_eq!(half.pairs.len(), 1);
        assert_eq!(half.warnings, 1);
    }

    #[test]
    fn stray_fragments_are_counted() {
        let p = parse_qa("Sure, here you go.\n1. a\n7. b\n1. again", 4).unwrap();
        assert_eq!(p.pairs, vec![(template(4).unwrap().questions[0].clone(), "a".to_string())]);
        // preamble, out-of-range item, duplicate item, unanswered question
        assert_eq!(p.warnings, 4);
    }

    #[test]
    fn nothing_to_pair() {
        assert!(matches!(parse_qa("", 2), Err(TeacherError::Parse { .. })));
        assert!(matches!(parse_qa("no numbers here", 2), Err(TeacherError::Parse { .. })));
        assert!(matches!(parse_qa("1. x", 12), Err(TeacherError::UnknownTemplate(12))));
    }
}
