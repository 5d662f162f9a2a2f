//! Prompt templates for annotation and guideline synthesis.
//!
//! Templates are plain text with named placeholders. The annotation
//! template must contain `{options}`, `{guidelines}` and `{narrative}`
//! exactly once; the update template `{guidelines}` and `{errors}` exactly
//! once. `{variable}` may repeat, and `{option_names}` is optional in both.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CodebookError;
use crate::corpus::{Variable, VariableKind};

pub const BINARY_ANNOTATION: &str = "\
Instructions: You are an expert suicide caseworker and your job is to annotate reports with the {variable} variable. Do not read into the text and stick to the definition of variable strictly. If two reports are provided, use both reports to determine your response but only return one response for both reports with no additional text!
Provide the reasoning for your answer, the span of text that you used to generate your answer and your response using the response options only and return your answer in the following format: {'reason': 'reasoning', 'span': 'span of text', 'response': '1.0 or 0.0'}

{options}

{guidelines}

{narrative}";

pub const MULTICLASS_ANNOTATION: &str = "\
Instructions: You are an expert suicide caseworker trained to correctly categorize suicide reports by the {variable} variable.
You have to label each report with only one of the response options and return your answer in the following format: {reason: 'reasoning', span: 'span of text', label: '{option_names}'}, with the reason behind your answer, the span of text you used to determine your answer, and a label and no additional text.
If two reports are given, only return one answer using both reports using the format and make sure to provide which report you got the span from!

Classes:

{options}

{guidelines}

{narrative}";

pub const LEGAL_ANNOTATION: &str = "\
Instructions: You are an expert suicide caseworker trained to correctly categorize suicide reports by the victim's interaction with a lawyer or attorney.
You have to label each report with only one of the 3 interaction types and return your answer in the following format: {reason: 'reasoning', span: 'span of text', label: '{option_names}'}, with the reason behind your answer, the span of text you used to determine your answer, and a label and no additional text.
If two reports are given, only return one answer using both reports using the format and make sure to provide which report you got the span from!

Classes ({variable}):

{options}

{guidelines}

{narrative}";

pub const GUIDELINE_UPDATE: &str = "\
You are an expert suicide caseworker and your job is to curate a set of guidelines that will be used by another model to label suicide reports with the variable:{variable}. You will be shown the original set of guidelines, the report that was used to label the variable {variable}, the model's label, the correct human label, the human's reasoning, and the span of text that the human used from reports to decide their label. The label can be {option_names}. You have to return a set of new guidelines using this information which will be used to annotate {variable} for future reports. Keep the guidelines concise, and use the human reasoning, span, or other information from the report to update the guidelines, make sure to not lose out on information in the original set of guidelines but try not to have too much repetition. You have to return your answer in the following format with absolutely not additional text!: 'Guidelines: *..., *...'.

Original guidelines:
{guidelines}

Errors:
{errors}";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub annotation: String,
    pub update: String,
}

fn count(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

impl PromptTemplates {
    pub fn new(annotation: impl Into<String>, update: impl Into<String>) -> Result<Self, CodebookError> {
        let t = Self {
            annotation: annotation.into(),
            update: update.into(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Shipped defaults chosen by variable kind.
    pub fn for_variable(variable: &Variable) -> Self {
        let annotation = match variable.kind {
            VariableKind::Binary => BINARY_ANNOTATION,
            VariableKind::Multiclass => MULTICLASS_ANNOTATION,
        };
        Self {
            annotation: annotation.to_string(),
            update: GUIDELINE_UPDATE.to_string(),
        }
    }

    /// The three-class legal-interaction prompt.
    pub fn legal_interaction() -> Self {
        Self {
            annotation: LEGAL_ANNOTATION.to_string(),
            update: GUIDELINE_UPDATE.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), CodebookError> {
        let check = |name: &'static str, text: &str, exactly_once: &[&'static str]| {
            if count(text, "{variable}") == 0 {
                return Err(CodebookError::Template {
                    template: name,
                    placeholder: "{variable}",
                    found: 0,
                });
            }
            for p in exactly_once {
                let found = count(text, p);
                if found != 1 {
                    return Err(CodebookError::Template {
                        template: name,
                        placeholder: p,
                        found,
                    });
                }
            }
            Ok(())
        };
        check("annotation", &self.annotation, &["{options}", "{guidelines}", "{narrative}"])?;
        check("update", &self.update, &["{guidelines}", "{errors}"])
    }

    /// Parses a template file with `[annotation]` and `[update]` sections.
    pub fn parse(text: &str) -> Result<Self, CodebookError> {
        let mut annotation = None;
        let mut update = None;
        let mut current: Option<&mut Option<String>> = None;
        let mut buf = String::new();
        let flush = |slot: Option<&mut Option<String>>, buf: &mut String| {
            if let Some(slot) = slot {
                *slot = Some(buf.trim_matches('\n').to_string());
            }
            buf.clear();
        };
        for line in text.lines() {
            match line.trim() {
                "[annotation]" => {
                    flush(current.take(), &mut buf);
                    current = Some(&mut annotation);
                }
                "[update]" => {
                    flush(current.take(), &mut buf);
                    current = Some(&mut update);
                }
                _ => {
                    buf.push_str(line);
                    buf.push('\n');
                }
            }
        }
        flush(current, &mut buf);
        match (annotation, update) {
            (Some(a), Some(u)) => Self::new(a, u),
            _ => Err(CodebookError::TemplateFile(
                "template file needs [annotation] and [update] sections".into(),
            )),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        let text = std::fs::read_to_string(path).map_err(|e| CodebookError::TemplateFile(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_file_text(&self) -> String {
        format!("[annotation]\n{}\n\n[update]\n{}\n", self.annotation, self.update)
    }
}

/// Substitutes every `{name}` from `values` in a single pass, so inserted
/// text is never re-scanned; other braces are left untouched.
pub(crate) fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (name, value) in values {
            let token_len = name.len() + 2;
            if tail.len() >= token_len && tail[1..].starts_with(name) && tail[1 + name.len()..].starts_with('}') {
                out.push_str(value);
                rest = &tail[token_len..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// Collapses runs of blank lines left behind by empty sections.
pub(crate) fn tidy(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut blank_run = 0;
    for line in text.trim_end().lines() {
        if line.trim().is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
        } else {
            blank_run = 0;
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out.trim_end().to_string()
}
