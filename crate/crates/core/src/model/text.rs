use std::str::FromStr;

use super::{FormatError, ModelError};

/// A whitespace-delimited field with its 1-based column.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Token<'a> {
    pub text: &'a str,
    pub column: usize,
}

/// One non-empty line after comment stripping.
#[derive(Debug)]
pub(crate) struct Line<'a> {
    pub number: usize,
    pub tokens: Vec<Token<'a>>,
    /// Column just past the last character, used when a field is missing.
    pub end_column: usize,
}

impl<'a> Line<'a> {
    pub fn error(&self, column: usize, message: impl Into<String>) -> FormatError {
        FormatError::Syntax {
            line: self.number,
            column,
            message: message.into(),
        }
    }

    pub fn invalid(&self, source: ModelError) -> FormatError {
        FormatError::Invalid {
            line: self.number,
            source,
        }
    }

    pub fn token(&self, index: usize, what: &str) -> Result<Token<'a>, FormatError> {
        self.tokens
            .get(index)
            .copied()
            .ok_or_else(|| self.error(self.end_column, format!("missing field <{what}>")))
    }

    pub fn field<T: FromStr>(&self, index: usize, what: &str) -> Result<T, FormatError> {
        let tok = self.token(index, what)?;
        tok.text
            .parse()
            .map_err(|_| self.error(tok.column, format!("invalid <{what}> {:?}", tok.text)))
    }

    pub fn finite(&self, index: usize, what: &str) -> Result<f64, FormatError> {
        let value: f64 = self.field(index, what)?;
        if !value.is_finite() {
            return Err(self.error(self.tokens[index].column, format!("non-finite <{what}>")));
        }
        Ok(value)
    }

    pub fn expect_len(&self, len: usize) -> Result<(), FormatError> {
        if self.tokens.len() > len {
            let extra = self.tokens[len];
            return Err(self.error(extra.column, format!("unexpected field {:?}", extra.text)));
        }
        if self.tokens.len() < len {
            return Err(self.error(self.end_column, "missing fields"));
        }
        Ok(())
    }
}

/// Splits `input` into non-empty, comment-stripped lines.
pub(crate) fn lines(input: &str) -> impl Iterator<Item = Line<'_>> {
    input.lines().enumerate().filter_map(|(i, raw)| {
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let mut tokens = Vec::new();
        let mut start = None;
        for (byte, ch) in content.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    tokens.push(make_token(content, s, byte));
                }
            } else if start.is_none() {
                start = Some(byte);
            }
        }
        if let Some(s) = start {
            tokens.push(make_token(content, s, content.len()));
        }
        if tokens.is_empty() {
            return None;
        }
        Some(Line {
            number: i + 1,
            tokens,
            end_column: content.chars().count() + 1,
        })
    })
}

fn make_token(content: &str, start: usize, end: usize) -> Token<'_> {
    Token {
        text: &content[start..end],
        column: content[..start].chars().count() + 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_carry_columns_and_skip_comments() {
        let src = "# header\n\n  SCENE 1  a # trailing\n";
        let all: Vec<_> = lines(src).collect();
        assert_eq!(all.len(), 1);
        let line = &all[0];
        assert_eq!(line.number, 3);
        let cols: Vec<_> = line.tokens.iter().map(|t| (t.text, t.column)).collect();
        assert_eq!(cols, vec![("SCENE", 3), ("1", 9), ("a", 12)]);
    }
}
