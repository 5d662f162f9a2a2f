//! Versioned guideline sets and the prompts rendered from them.

mod guidelines;
mod templates;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use guidelines::{parse_guideline_list, render_guideline_list};
pub use templates::{PromptTemplates, BINARY_ANNOTATION, GUIDELINE_UPDATE, LEGAL_ANNOTATION, MULTICLASS_ANNOTATION};

use crate::corpus::Variable;
use templates::{fill, tidy};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("{template} template has {found} occurrences of {placeholder}")]
    Template {
        template: &'static str,
        placeholder: &'static str,
        found: usize,
    },
    #[error("template file: {0}")]
    TemplateFile(String),
    #[error("no guideline bullets recovered from reply: {raw:?}")]
    NoBullets { raw: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineBullet {
    pub text: String,
    pub origin_iteration: u32,
    #[serde(default)]
    pub origin_feedback_ids: Vec<String>,
}

/// How a synthesized guideline list is merged into the current codebook.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// The reply is the complete new bullet list.
    #[default]
    Replace,
    /// The reply's bullets are appended to the existing ones.
    AppendOnly,
}

/// One version of the guidelines for a variable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub variable: String,
    pub version: u32,
    pub preamble: String,
    pub options: String,
    pub bullets: Vec<GuidelineBullet>,
}

/// Renders the response-options block: one `Label:`/definition entry per
/// option when definitions exist, otherwise the bare option list. Any
/// reference codebook text follows.
pub fn render_options_block(variable: &Variable) -> String {
    let mut out = if variable.definitions.is_empty() {
        format!("Response options: {}", variable.response_options.join(", "))
    } else {
        variable
            .response_options
            .iter()
            .map(|o| match variable.definitions.get(o) {
                Some(def) => format!("Label: {o}\n\u{2022} Definition: {def}"),
                None => format!("Label: {o}"),
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    if let Some(reference) = variable.reference_codebook_text.as_deref().filter(|t| !t.trim().is_empty()) {
        out.push_str("\n\nCodebook definition:\n");
        out.push_str(reference.trim());
    }
    out
}

fn option_names(variable: &Variable) -> String {
    if variable.response_options.len() == 2 {
        variable.response_options.join(" or ")
    } else {
        variable.response_options.join(", ")
    }
}

/// Version 0: variable name and response options only, no bullets.
pub fn init_codebook(variable: &Variable, templates: &PromptTemplates) -> Codebook {
    let head = templates
        .annotation
        .split("{options}")
        .next()
        .unwrap_or_default();
    let names = option_names(variable);
    let preamble = tidy(&fill(head, &[("variable", &variable.name), ("option_names", &names)]));
    Codebook {
        variable: variable.name.clone(),
        version: 0,
        preamble,
        options: render_options_block(variable),
        bullets: Vec::new(),
    }
}

impl Codebook {
    pub fn bullet_texts(&self) -> Vec<String> {
        self.bullets.iter().map(|b| b.text.clone()).collect()
    }

    /// `"Guidelines:\n* a\n* b"`, or empty when there are no bullets.
    pub fn guidelines_section(&self) -> String {
        if self.bullets.is_empty() {
            String::new()
        } else {
            render_guideline_list(&self.bullet_texts())
        }
    }

    /// Appends genuinely new bullets (exact-text dedup) and bumps the version.
    pub fn apply_update(&self, new_bullets: &[String], iteration: u32, feedback_ids: &[String]) -> Codebook {
        let mut bullets = self.bullets.clone();
        let mut seen: HashSet<String> = bullets.iter().map(|b| b.text.clone()).collect();
        for text in new_bullets {
            let text = text.trim();
            if text.is_empty() || !seen.insert(text.to_string()) {
                continue;
            }
            bullets.push(GuidelineBullet {
                text: text.to_string(),
                origin_iteration: iteration,
                origin_feedback_ids: feedback_ids.to_vec(),
            });
        }
        Codebook {
            version: self.version + 1,
            bullets,
            ..self.clone()
        }
    }

    /// Takes `new_bullets` as the complete list; bullets already present keep
    /// their provenance, the rest are attributed to this update.
    pub fn replace_bullets(&self, new_bullets: &[String], iteration: u32, feedback_ids: &[String]) -> Codebook {
        let mut seen = HashSet::new();
        let bullets = new_bullets
            .iter()
            .map(|t| t.trim())
            .filter(|t| !t.is_empty() && seen.insert(t.to_string()))
            .map(|t| match self.bullets.iter().find(|b| b.text == t) {
                Some(existing) => existing.clone(),
                None => GuidelineBullet {
                    text: t.to_string(),
                    origin_iteration: iteration,
                    origin_feedback_ids: feedback_ids.to_vec(),
                },
            })
            .collect();
        Codebook {
            version: self.version + 1,
            bullets,
            ..self.clone()
        }
    }

    pub fn update(&self, mode: UpdateMode, new_bullets: &[String], iteration: u32, feedback_ids: &[String]) -> Codebook {
        match mode {
            UpdateMode::Replace => self.replace_bullets(new_bullets, iteration, feedback_ids),
            UpdateMode::AppendOnly => self.apply_update(new_bullets, iteration, feedback_ids),
        }
    }
}

/// Bullets added in `b` and removed from `a`, each in its codebook's order.
pub fn diff(a: &Codebook, b: &Codebook) -> (Vec<String>, Vec<String>) {
    let in_a: HashSet<&str> = a.bullets.iter().map(|x| x.text.as_str()).collect();
    let in_b: HashSet<&str> = b.bullets.iter().map(|x| x.text.as_str()).collect();
    let added = b
        .bullets
        .iter()
        .filter(|x| !in_a.contains(x.text.as_str()))
        .map(|x| x.text.clone())
        .collect();
    let removed = a
        .bullets
        .iter()
        .filter(|x| !in_b.contains(x.text.as_str()))
        .map(|x| x.text.clone())
        .collect();
    (added, removed)
}

/// The annotation prompt as (system, user) messages.
///
/// Everything before the `{narrative}` placeholder is the system message;
/// the placeholder and anything after it form the user message.
pub fn render_annotation_prompt(
    templates: &PromptTemplates,
    variable: &Variable,
    cb: &Codebook,
    narrative_text: &str,
) -> (String, String) {
    let (head, tail) = templates
        .annotation
        .split_once("{narrative}")
        .unwrap_or((templates.annotation.as_str(), ""));
    let names = option_names(variable);
    let guidelines = cb.guidelines_section();
    let system = tidy(&fill(
        head,
        &[
            ("variable", &cb.variable),
            ("option_names", &names),
            ("options", &cb.options),
            ("guidelines", &guidelines),
        ],
    ));
    let user = format!("{narrative_text}{}", fill(tail, &[("variable", &cb.variable)]));
    (system, user)
}

/// One error item as shown to the guideline-synthesis model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateError {
    pub narrative: String,
    pub model_label: String,
    pub correct_label: String,
    pub human_reasoning: String,
    pub span: String,
}

pub fn render_error_block(errors: &[UpdateError]) -> String {
    errors
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!(
                "### Error {}\nReport: {}\nModel label: {}\nCorrect label: {}\nHuman reasoning: {}\nSpan: {}",
                i + 1,
                e.narrative,
                e.model_label,
                e.correct_label,
                e.human_reasoning,
                e.span
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The guideline update prompt as (system, user) messages; the user message
/// starts at the paragraph holding `{guidelines}`.
pub fn render_update_prompt(
    templates: &PromptTemplates,
    variable: &Variable,
    cb: &Codebook,
    errors: &[UpdateError],
) -> (String, String) {
    let template = &templates.update;
    let split_at = template
        .find("{guidelines}")
        .map(|i| template[..i].rfind("\n\n").map_or(0, |nl| nl + 2))
        .unwrap_or(template.len());
    let (head, tail) = template.split_at(split_at);
    let names = option_names(variable);
    let guidelines = if cb.bullets.is_empty() {
        "(none)".to_string()
    } else {
        cb.bullets.iter().map(|b| format!("* {}", b.text)).collect::<Vec<_>>().join("\n")
    };
    let errors = render_error_block(errors);
    let values = [
        ("variable", cb.variable.as_str()),
        ("option_names", names.as_str()),
        ("guidelines", guidelines.as_str()),
        ("errors", errors.as_str()),
    ];
    (tidy(&fill(head, &values)), fill(tail, &values).trim().to_string())
}
