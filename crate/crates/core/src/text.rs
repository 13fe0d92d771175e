//! Tokenization shared by the encoder, the reward-model features and the
//! mining guardrails.

/// Lowercase whitespace tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Distinct lowercase tokens in first-occurrence order.
pub fn distinct_tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tokens(text) {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// True when every character is an ASCII decimal digit.
pub fn is_numeric(word: &str) -> bool {
    !word.is_empty() && word.chars().all(|c| c.is_ascii_digit())
}
