//! The single tokenization authority used for chunk sizes, the lexical
//! index, query parsing and answer metrics.
//!
//! Text is lowercased and split on whitespace and punctuation. Underscores
//! are word characters, so Tcl command names such as `place_pin` stay whole.
//! Underscores at the edges of a token are trimmed and punctuation tokens
//! are dropped.

/// Lowercased word tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            push_token(&mut tokens, &mut current);
        }
    }
    if !current.is_empty() {
        push_token(&mut tokens, &mut current);
    }
    tokens
}

fn push_token(tokens: &mut Vec<String>, current: &mut String) {
    let trimmed = current.trim_matches('_');
    if !trimmed.is_empty() {
        tokens.push(trimmed.to_string());
    }
    current.clear();
}

pub fn count_tokens(text: &str) -> usize {
    tokenize(text).len()
}
