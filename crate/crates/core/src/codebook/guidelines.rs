//! Parsing of synthesized guideline lists ("Guidelines: *..., *...").

use std::sync::OnceLock;

use regex::Regex;

use super::CodebookError;

fn prefix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"^[\s'"`]*(?i:guidelines)\s*:\s*"#).expect("prefix regex"))
}

fn star_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // a '*' at the start, or after whitespace or a comma, opens a bullet
    RE.get_or_init(|| Regex::new(r"(?:^|[\s,])\*+").expect("star regex"))
}

fn dash_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*-\s+").expect("dash regex"))
}

fn clean(item: &str) -> String {
    let t = item.trim();
    let t = t.trim_end_matches(|c: char| c == ',' || c.is_whitespace());
    let t = t.trim_end_matches(['\'', '"', '`']).trim();
    t.to_string()
}

/// Extracts bullet texts in order.
///
/// Accepts `*` bullets (inline or one per line), `-` bullets at line
/// starts, and, when no marker appears at all, one bullet per line. Text
/// before the first marker is not a bullet and is dropped.
pub fn parse_guideline_list(text: &str) -> Result<Vec<String>, CodebookError> {
    let body = match prefix_re().find(text) {
        Some(m) => &text[m.end()..],
        None => text,
    };

    let mut starts: Vec<(usize, usize)> = star_re()
        .find_iter(body)
        .map(|m| (m.start(), m.end()))
        .chain(dash_re().find_iter(body).map(|m| (m.start(), m.end())))
        .collect();
    starts.sort();

    let items: Vec<String> = if starts.is_empty() {
        body.lines().map(clean).collect()
    } else {
        starts
            .iter()
            .enumerate()
            .map(|(i, &(_, content_start))| {
                let end = starts.get(i + 1).map_or(body.len(), |next| next.0);
                clean(&body[content_start..end.max(content_start)])
            })
            .collect()
    };
    let bullets: Vec<String> = items.into_iter().filter(|s| !s.is_empty()).collect();
    if bullets.is_empty() {
        return Err(CodebookError::NoBullets { raw: text.to_string() });
    }
    Ok(bullets)
}

/// Renders bullets in the synthesis reply format `Guidelines: * a * b`.
pub fn render_guideline_list(bullets: &[String]) -> String {
    let mut out = String::from("Guidelines:");
    for b in bullets {
        out.push_str("\n* ");
        out.push_str(b);
    }
    out
}
