//! Rule-based sentence splitting.

use super::EmbedError;

const ABBREVIATIONS: &[&str] = &["dr.", "mr.", "mrs.", "ms.", "st.", "vs.", "e.g.", "i.e.", "approx."];

/// Fragments with fewer non-space characters merge into their neighbour.
const MIN_SENTENCE_CHARS: usize = 2;

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn ends_with_abbreviation(prefix: &str) -> bool {
    let word = prefix
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .to_lowercase();
    ABBREVIATIONS.iter().any(|a| word == *a || word.ends_with(&format!("({a}")))
}

fn non_space_len(s: &str) -> usize {
    s.chars().filter(|c| !c.is_whitespace()).count()
}

/// Splits after `.`, `!` or `?` when followed by whitespace and then an
/// uppercase letter or digit, except after a known abbreviation.
pub fn split_sentences(text: &str) -> Result<Vec<String>, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut cuts = Vec::new();
    for (pos, &(byte, c)) in chars.iter().enumerate() {
        if !is_terminator(c) {
            continue;
        }
        let mut j = pos + 1;
        if j >= chars.len() || !chars[j].1.is_whitespace() {
            continue;
        }
        while j < chars.len() && chars[j].1.is_whitespace() {
            j += 1;
        }
        let Some(&(_, next)) = chars.get(j) else { continue };
        if !(next.is_uppercase() || next.is_ascii_digit()) {
            continue;
        }
        let end = byte + c.len_utf8();
        if c == '.' && ends_with_abbreviation(&text[..end]) {
            continue;
        }
        cuts.push(end);
    }

    let mut pieces: Vec<&str> = Vec::new();
    let mut start = 0;
    for cut in cuts.into_iter().chain(std::iter::once(text.len())) {
        let piece = text[start..cut].trim();
        if !piece.is_empty() {
            pieces.push(piece);
        }
        start = cut;
    }

    let mut sentences: Vec<String> = Vec::new();
    let mut carry: Option<String> = None;
    for piece in pieces {
        let merged = match carry.take() {
            Some(prev) => format!("{prev} {piece}"),
            None => piece.to_string(),
        };
        if non_space_len(&merged) < MIN_SENTENCE_CHARS {
            carry = Some(merged);
        } else {
            sentences.push(merged);
        }
    }
    if let Some(rest) = carry {
        match sentences.last_mut() {
            Some(last) => {
                last.push(' ');
                last.push_str(&rest);
            }
            None => sentences.push(rest),
        }
    }
    Ok(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_on_terminators() {
        assert_eq!(split_sentences("A died. B found him.").unwrap(), vec!["A died.", "B found him."]);
        assert_eq!(split_sentences("One sentence").unwrap(), vec!["One sentence"]);
        assert_eq!(split_sentences("Why? Because! 3 left.").unwrap(), vec!["Why?", "Because!", "3 left."]);
    }

    #[test]
    fn abbreviations_suppress_split() {
        assert_eq!(
            split_sentences("Dr. Smith arrived. V left.").unwrap(),
            vec!["Dr. Smith arrived.", "V left."]
        );
        assert_eq!(
            split_sentences("V saw Mrs. Jones vs. Mr. Brown. E.g. Ms. Lee.").unwrap(),
            vec!["V saw Mrs. Jones vs. Mr. Brown.", "E.g. Ms. Lee."]
        );
        assert_eq!(split_sentences("Approx. 3 pills. St. Mary hospital.").unwrap().len(), 2);
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(split_sentences("It was 3 p.m. on site.").unwrap(), vec!["It was 3 p.m. on site."]);
    }

    #[test]
    fn short_fragments_merge_forward() {
        assert_eq!(split_sentences("! B went home.").unwrap(), vec!["! B went home."]);
        assert_eq!(split_sentences("A. B went home.").unwrap(), vec!["A.", "B went home."]);
        assert_eq!(split_sentences("V went home. X").unwrap(), vec!["V went home. X"]);
    }

    #[test]
    fn concatenated_reports_split_between_sections() {
        let s = split_sentences("CME Report: A died.\n\nLE Report: B found him.").unwrap();
        assert_eq!(s, vec!["CME Report: A died.", "LE Report: B found him."]);
    }

    #[test]
    fn whitespace_only_is_rejected() {
        assert!(matches!(split_sentences("  \n\t"), Err(EmbedError::EmptyText)));
    }

    proptest! {
        #[test]
        fn preserves_non_whitespace(text in "[A-Za-z0-9 .!?\n]{1,80}") {
            prop_assume!(!text.trim().is_empty());
            let sentences = split_sentences(&text).unwrap();
            prop_assert!(!sentences.is_empty());
            let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(strip(&sentences.join(" ")), strip(&text));
        }
    }
}
