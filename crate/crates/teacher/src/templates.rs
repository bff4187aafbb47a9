use std::sync::OnceLock;

use mvaema_core::Category;
use serde::Deserialize;

use crate::error::{Result, TeacherError};

/// The pinned template file, embedded at build time.
pub const TEMPLATE_FILE: &str = include_str!("../templates/prompts.json");

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub id: u8,
    pub title: String,
    /// Body exactly as pinned, starting with the bold section title.
    pub body: String,
    /// The sub-questions answered one by one in a teacher response.
    pub questions: Vec<String>,
}

pub fn templates() -> &'static [PromptTemplate] {
    static CELL: OnceLock<Vec<PromptTemplate>> = OnceLock::new();
    CELL.get_or_init(|| serde_json::from_str(TEMPLATE_FILE).expect("embedded template file is valid JSON"))
}

pub fn template(id: u8) -> Result<&'static PromptTemplate> {
    templates().iter().find(|t| t.id == id).ok_or(TeacherError::UnknownTemplate(id))
}

/// The sentence naming the ground-truth class.
pub fn caption(category: Category) -> String {
    format!("This SEM image shows {}.", category.phrase())
}

/// Prompt text for template `id`. With `include_caption` the category
/// caption leads; without it (zero-shot classification) the body stands
/// alone.
pub fn render_prompt(id: u8, category: Category, include_caption: bool) -> Result<String> {
    let t = template(id)?;
    Ok(if include_caption {
        format!("{} {}", caption(category), t.body)
    } else {
        t.body.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_unique_templates() {
        let ids: Vec<u8> = templates().iter().map(|t| t.id).collect();
        assert_eq!(ids, (1..=10).collect::<Vec<_>>());
        for t in templates() {
            assert!(t.body.starts_with(&format!("**{}** -", t.title)), "{}", t.id);
            assert!(!t.questions.is_empty());
        }
    }

    #[test]
    fn caption_toggle() {
        let with = render_prompt(1, Category::Particles, true).unwrap();
        let without = render_prompt(1, Category::Particles, false).unwrap();
        assert!(without.starts_with("**Basics** - This image depicts a nanomaterial"));
        assert_eq!(with, format!("This SEM image shows particles. {without}"));
        assert!(matches!(render_prompt(11, Category::Films, true), Err(TeacherError::UnknownTemplate(11))));
        assert!(render_prompt(0, Category::Films, false).is_err());
    }
}
