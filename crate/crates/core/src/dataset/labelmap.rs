//! Label map: class names ↔ contiguous ids starting at 1.
//!
//! Text form is a sequence of blocks:
//!
//! ```text
//! item {
//!   name: "A"
//!   id: 1
//! }
//! ```

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    entries: Vec<LabelEntry>,
    by_name: HashMap<String, usize>,
}

/// Name of class `index` (0-based) in the default alphabet naming.
pub fn class_name(index: usize) -> String {
    if index < 26 {
        char::from(b'A' + index as u8).to_string()
    } else {
        format!("class{}", index + 1)
    }
}

impl LabelMap {
    /// Assigns ids 1..=n in the given order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let entries = names
            .iter()
            .enumerate()
            .map(|(i, n)| LabelEntry {
                name: n.as_ref().to_string(),
                id: i + 1,
            })
            .collect();
        LabelMap::from_entries(entries)
    }

    pub fn from_entries(mut entries: Vec<LabelEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        let mut by_name = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.name.is_empty() {
                return Err(Error::ValidationError(format!("label id {} has an empty name", e.id)));
            }
            if i > 0 && entries[i - 1].id == e.id {
                return Err(Error::ValidationError(format!("duplicate label id {}", e.id)));
            }
            if e.id != i + 1 {
                return Err(Error::ValidationError(format!(
                    "label ids must be contiguous from 1; found {} at position {}",
                    e.id,
                    i + 1
                )));
            }
            if by_name.insert(e.name.clone(), e.id).is_some() {
                return Err(Error::ValidationError(format!("duplicate label name {:?}", e.name)));
            }
        }
        Ok(LabelMap { entries, by_name })
    }

    /// The default A–Z map with ids 1–26.
    pub fn alphabet() -> Self {
        LabelMap::first_classes(26)
    }

    /// The first `n` default class names.
    pub fn first_classes(n: usize) -> Self {
        let names: Vec<String> = (0..n).map(class_name).collect();
        LabelMap::from_names(&names).expect("generated names are unique")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.entries.get(i))
            .map(|e| e.name.as_str())
    }

    pub fn require_id(&self, name: &str) -> Result<usize> {
        self.id_of(name).ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }
}

pub fn write_label_map(m: &LabelMap) -> String {
    let mut out = String::new();
    for e in &m.entries {
        let escaped = e.name.replace('\\', "\\\\").replace('"', "\\\"");
        out.push_str(&format!("item {{\n  name: \"{escaped}\"\n  id: {}\n}}\n", e.id));
    }
    out
}

#[derive(Debug, PartialEq)]
enum Token {
    Ident(String),
    Str(String),
    Colon,
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1;
    let err = |line: usize, message: String| Error::ParseError {
        line,
        element: "item".into(),
        message,
    };
    while let Some(&c) = chars.peek() {
        match c {
            '\n' => {
                line += 1;
                chars.next();
            }
            c if c.is_whitespace() || c == ',' || c == ';' => {
                chars.next();
            }
            '#' => {
                while chars.peek().is_some_and(|&c| c != '\n') {
                    chars.next();
                }
            }
            '{' => {
                chars.next();
                out.push((Token::Open, line));
            }
            '}' => {
                chars.next();
                out.push((Token::Close, line));
            }
            ':' => {
                chars.next();
                out.push((Token::Colon, line));
            }
            '"' | '\'' => {
                let quote = c;
                chars.next();
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None => return Err(err(line, "unterminated string".into())),
                        Some('\\') => match chars.next() {
                            Some(e) => s.push(e),
                            None => return Err(err(line, "unterminated escape".into())),
                        },
                        Some(ch) if ch == quote => break,
                        Some('\n') => return Err(err(line, "newline in string".into())),
                        Some(ch) => s.push(ch),
                    }
                }
                out.push((Token::Str(s), line));
            }
            c if c.is_alphanumeric() || c == '_' || c == '-' => {
                let mut s = String::new();
                while chars
                    .peek()
                    .is_some_and(|&c| c.is_alphanumeric() || c == '_' || c == '-')
                {
                    s.push(chars.next().unwrap());
                }
                out.push((Token::Ident(s), line));
            }
            other => return Err(err(line, format!("unexpected character {other:?}"))),
        }
    }
    Ok(out)
}

pub fn parse_label_map(text: &str) -> Result<LabelMap> {
    let tokens = tokenize(text)?;
    let mut it = tokens.into_iter().peekable();
    let mut entries = Vec::new();
    let err = |line: usize, message: &str| Error::ParseError {
        line,
        element: "item".into(),
        message: message.to_string(),
    };
    while let Some((tok, line)) = it.next() {
        if tok != Token::Ident("item".into()) {
            return Err(err(line, "expected `item`"));
        }
        match it.next() {
            Some((Token::Open, _)) => {}
            _ => return Err(err(line, "expected `{` after item")),
        }
        let mut name = None;
        let mut id = None;
        loop {
            let (tok, line) = it.next().ok_or_else(|| err(line, "unterminated item block"))?;
            let key = match tok {
                Token::Close => break,
                Token::Ident(k) => k,
                _ => return Err(err(line, "expected a field name")),
            };
            if !matches!(it.next(), Some((Token::Colon, _))) {
                return Err(err(line, "expected `:`"));
            }
            let (value, vline) = it.next().ok_or_else(|| err(line, "missing value"))?;
            match (key.as_str(), value) {
                ("name", Token::Str(s)) => name = Some(s),
                ("id", Token::Ident(s)) => {
                    id = Some(s.parse::<usize>().map_err(|_| err(vline, "id must be a nonnegative integer"))?)
                }
                ("display_name", Token::Str(_)) => {}
                (k, _) => return Err(err(vline, &format!("unexpected field or value for `{k}`"))),
            }
        }
        let name = name.ok_or_else(|| Error::SchemaError("item.name".into()))?;
        let id = id.ok_or_else(|| Error::SchemaError("item.id".into()))?;
        entries.push(LabelEntry { name, id });
    }
    LabelMap::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_blocks() {
        let text = write_label_map(&LabelMap::alphabet());
        assert!(text.starts_with("item {\n  name: \"A\"\n  id: 1\n}\n"));
        assert!(text.ends_with("item {\n  name: \"Z\"\n  id: 26\n}\n"));
        assert_eq!(parse_label_map(&text).unwrap(), LabelMap::alphabet());
    }

    #[test]
    fn single_entry_round_trip() {
        let m = LabelMap::from_names(&["hello \"world\""]).unwrap();
        assert_eq!(parse_label_map(&write_label_map(&m)).unwrap(), m);
    }

    #[test]
    fn accepts_single_line_and_single_quotes() {
        let m = parse_label_map("item { name: 'B' id: 2 } item { name: \"A\" id: 1 }").unwrap();
        assert_eq!(m.name_of(1), Some("A"));
        assert_eq!(m.id_of("B"), Some(2));
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = "item { name: \"A\" id: 3 }\nitem { name: \"B\" id: 3 }";
        assert!(matches!(parse_label_map(text), Err(Error::ValidationError(_))));
    }

    #[test]
    fn duplicate_name_and_gaps_rejected() {
        assert!(matches!(
            parse_label_map("item { name: \"A\" id: 1 } item { name: \"A\" id: 2 }"),
            Err(Error::ValidationError(_))
        ));
        assert!(matches!(
            parse_label_map("item { name: \"A\" id: 1 } item { name: \"B\" id: 3 }"),
            Err(Error::ValidationError(_))
        ));
        assert!(matches!(
            parse_label_map("item { name: \"\" id: 1 }"),
            Err(Error::ValidationError(_))
        ));
    }

    #[test]
    fn malformed_text() {
        assert!(matches!(parse_label_map("item { name: \"A\""), Err(Error::ParseError { .. })));
        assert!(matches!(parse_label_map("thing { }"), Err(Error::ParseError { .. })));
        assert!(matches!(parse_label_map("item { id: 1 }"), Err(Error::SchemaError(_))));
    }

    #[test]
    fn lookup() {
        let m = LabelMap::alphabet();
        assert_eq!(m.id_of("C"), Some(3));
        assert_eq!(m.name_of(26), Some("Z"));
        assert_eq!(m.name_of(0), None);
        assert!(matches!(m.require_id("Ω"), Err(Error::UnknownLabel(_))));
    }
}
