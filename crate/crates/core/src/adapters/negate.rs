//! Rule-ordered polarity flips for the countered-conclusion mock.
//!
//! Rules are tried in order at each word position, scanning left to right;
//! the first match in a sentence is rewritten and the rest of that sentence
//! is left alone. Matching is on whole words and case-sensitive; trailing
//! punctuation on the last matched word is preserved.

/// `(from, to)` pairs, longest forms first.
pub const POLARITY_RULES: [(&str, &str); 10] = [
    ("should not", "should"),
    ("should", "should not"),
    ("would not", "would"),
    ("would", "would not"),
    ("will not", "will"),
    ("will", "will not"),
    ("I agree", "I disagree"),
    ("I disagree", "I agree"),
    ("is not", "is"),
    ("is", "is not"),
];

const TRAILING_PUNCT: &[char] = &[',', ';', ':', '.', '!', '?', '"', '\'', ')'];

#[derive(Debug, Clone, Copy)]
struct Word {
    start: usize,
    end: usize,
    core_end: usize,
}

fn words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                let token = &text[s..i];
                let core = token.trim_end_matches(TRAILING_PUNCT);
                out.push(Word {
                    start: s,
                    end: i,
                    core_end: s + core.len(),
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    out
}

fn ends_sentence(text: &str, w: &Word) -> bool {
    text[w.start..w.end].ends_with(['.', '!', '?'])
}

/// The first rule match in `sentence` as `(byte_start, byte_end, replacement)`.
fn first_match(text: &str, sentence: &[Word]) -> Option<(usize, usize, &'static str)> {
    for i in 0..sentence.len() {
        for (from, to) in POLARITY_RULES {
            let pattern: Vec<&str> = from.split(' ').collect();
            let Some(span) = sentence.get(i..i + pattern.len()) else {
                continue;
            };
            let last = pattern.len() - 1;
            let matches = span.iter().zip(&pattern).enumerate().all(|(k, (w, p))| {
                let token = if k == last {
                    &text[w.start..w.core_end]
                } else {
                    &text[w.start..w.end]
                };
                token == *p
            });
            if matches {
                return Some((span[0].start, span[last].core_end, to));
            }
        }
    }
    None
}

/// Apply at most one polarity flip per sentence.
pub fn negate(text: &str) -> String {
    let all = words(text);
    let mut edits = Vec::new();
    let mut sentence_start = 0;
    for (i, w) in all.iter().enumerate() {
        if ends_sentence(text, w) || i + 1 == all.len() {
            if let Some(edit) = first_match(text, &all[sentence_start..=i]) {
                edits.push(edit);
            }
            sentence_start = i + 1;
        }
    }
    let mut out = String::with_capacity(text.len() + 8 * edits.len());
    let mut cursor = 0;
    for (start, end, replacement) in edits {
        out.push_str(&text[cursor..start]);
        out.push_str(replacement);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    out
}
