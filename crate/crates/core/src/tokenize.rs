//! Whitespace-and-punctuation tokenizer with character offsets, plus an
//! approximate sentence splitter.
//!
//! Offsets are in bytes of the UTF-8 source text so that
//! `&text[tok.char_start..tok.char_end] == tok.surface` always holds.
//! The SQuAD-style character offsets used in corpus files are converted at the
//! boundary (see [`crate::corpus`]).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// Inclusive token-index interval.
pub type TokenRange = (usize, usize);

pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
                | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{00A1}'
        )
}

/// Split on Unicode whitespace, then peel leading and trailing punctuation
/// characters off each chunk as single-character tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut chunk_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = chunk_start.take() {
                split_chunk(text, s, i, &mut tokens);
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(i);
        }
    }
    if let Some(s) = chunk_start {
        split_chunk(text, s, text.len(), &mut tokens);
    }
    tokens
}

fn split_chunk(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let chunk = &text[start..end];
    let chars: Vec<(usize, char)> = chunk.char_indices().collect();
    let mut lo = 0;
    while lo < chars.len() && is_punct(chars[lo].1) {
        lo += 1;
    }
    if lo == chars.len() {
        // all punctuation: one token per character
        for &(off, c) in &chars {
            push(text, start + off, start + off + c.len_utf8(), out);
        }
        return;
    }
    let mut hi = chars.len();
    while hi > lo && is_punct(chars[hi - 1].1) {
        hi -= 1;
    }
    for &(off, c) in &chars[..lo] {
        push(text, start + off, start + off + c.len_utf8(), out);
    }
    let core_start = start + chars[lo].0;
    let core_end = if hi == chars.len() { end } else { start + chars[hi].0 };
    push(text, core_start, core_end, out);
    for &(off, c) in &chars[hi..] {
        push(text, start + off, start + off + c.len_utf8(), out);
    }
}

fn push(text: &str, s: usize, e: usize, out: &mut Vec<Token>) {
    out.push(Token {
        surface: text[s..e].to_string(),
        char_start: s,
        char_end: e,
    });
}

/// Sentence bounds as inclusive token ranges partitioning `tokens`.
///
/// A sentence ends at a `.`, `!` or `?` token that is followed by whitespace
/// and a token starting with an uppercase letter. Abbreviations are not
/// special-cased.
pub fn sentence_bounds(text: &str, tokens: &[Token]) -> Vec<TokenRange> {
    let mut bounds = Vec::new();
    if tokens.is_empty() {
        return bounds;
    }
    let mut start = 0;
    for i in 0..tokens.len() - 1 {
        let tok = &tokens[i];
        if !matches!(tok.surface.as_str(), "." | "!" | "?") {
            continue;
        }
        let next = &tokens[i + 1];
        let gap = &text[tok.char_end..next.char_start];
        let upper = next.surface.chars().next().is_some_and(char::is_uppercase);
        if !gap.is_empty() && upper {
            bounds.push((start, i));
            start = i + 1;
        }
    }
    bounds.push((start, tokens.len() - 1));
    bounds
}

/// Lowercased token surfaces, the form used for BLEU and question statistics.
pub fn lower_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .map(|t| t.surface.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(text: &str) -> Vec<String> {
        tokenize(text).into_iter().map(|t| t.surface).collect()
    }

    #[test]
    fn splits_edge_punctuation() {
        assert_eq!(
            surfaces("legend \"Venite Ad Me Omnes\". Next"),
            vec!["legend", "\"", "Venite", "Ad", "Me", "Omnes", "\"", ".", "Next"]
        );
        assert_eq!(surfaces("Building's gold"), vec!["Building's", "gold"]);
        assert_eq!(surfaces("(1837)"), vec!["(", "1837", ")"]);
        assert_eq!(surfaces("..."), vec![".", ".", "."]);
        assert_eq!(surfaces("  "), Vec::<String>::new());
    }

    #[test]
    fn offsets_reproduce_surface() {
        let text = "Atop the Main Building’s gold dome — a statue.";
        for t in tokenize(text) {
            assert_eq!(&text[t.char_start..t.char_end], t.surface);
        }
    }

    #[test]
    fn sentences_split_on_terminal_punct_and_capital() {
        let text = "It was built in 1858. The grotto is near. it continues! Done";
        let toks = tokenize(text);
        let b = sentence_bounds(text, &toks);
        let sents: Vec<String> = b
            .iter()
            .map(|&(s, e)| toks[s..=e].iter().map(|t| t.surface.as_str()).collect::<Vec<_>>().join(" "))
            .collect();
        assert_eq!(
            sents,
            vec![
                "It was built in 1858 .",
                "The grotto is near . it continues !",
                "Done"
            ]
        );
    }

    #[test]
    fn no_break_without_whitespace() {
        let text = "U.S.A is big";
        let toks = tokenize(text);
        assert_eq!(sentence_bounds(text, &toks), vec![(0, toks.len() - 1)]);
    }
}
