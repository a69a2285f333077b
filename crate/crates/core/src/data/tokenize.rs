use crate::error::{Error, Result};

/// Splits math-mode LaTeX into tokens.
///
/// A backslash followed by letters is one command token (`\frac`, `\alpha`);
/// a backslash followed by any other character is a two-character token
/// (`\{`, `\,`). Every other non-whitespace character is its own token.
/// Whitespace only separates.
pub fn tokenize(latex: &str) -> Result<Vec<String>> {
    let bytes = latex.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < latex.len() {
        let c = latex[i..].chars().next().expect("in bounds");
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if c == '\\' {
            let start = i;
            i += 1;
            if i >= bytes.len() {
                return Err(Error::Tokenize { offset: start });
            }
            if bytes[i].is_ascii_alphabetic() {
                while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                    i += 1;
                }
            } else {
                i += latex[i..].chars().next().expect("in bounds").len_utf8();
            }
            tokens.push(latex[start..i].to_string());
            continue;
        }
        tokens.push(c.to_string());
        i += c.len_utf8();
    }
    Ok(tokens)
}

/// Joins tokens with single spaces, which [`tokenize`] splits back apart.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}
