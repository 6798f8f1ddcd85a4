use serde::{Deserialize, Serialize};

use crate::labels::Span;

/// A lowercased token and the byte interval it covers in the original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub span: Span,
}

/// Word tokenizer: runs of alphanumeric characters form one token, every other
/// non-whitespace character is a token of its own, whitespace separates. Output is
/// lowercased; offsets index the original text.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;

    let flush = |start: &mut Option<usize>, end: usize, tokens: &mut Vec<Token>| {
        if let Some(s) = start.take() {
            tokens.push(Token {
                text: text[s..end].to_lowercase(),
                span: Span::new(s, end),
            });
        }
    };

    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        flush(&mut word_start, i, &mut tokens);
        if !c.is_whitespace() {
            let end = i + c.len_utf8();
            tokens.push(Token {
                text: text[i..end].to_lowercase(),
                span: Span::new(i, end),
            });
        }
    }
    flush(&mut word_start, text.len(), &mut tokens);
    tokens
}
