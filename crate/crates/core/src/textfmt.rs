//! Line-oriented declarative documents shared by recipes and filter
//! configurations.
//!
//! ```text
//! # comment
//! name: ours-v15
//! sd15 up-level1-repeat1-vit-block0-cross-q resize=nearest
//! ```
//!
//! A line whose first word ends in `:` is a header; any other non-blank,
//! non-comment line is an item made of whitespace-separated words.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Document {
    pub source_name: String,
    pub headers: Vec<Header>,
    pub items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub words: Vec<String>,
    pub line: usize,
}

impl Document {
    pub fn parse(source_name: &str, text: &str) -> Result<Self> {
        let mut doc = Document {
            source_name: source_name.to_string(),
            ..Default::default()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let first = line.split_whitespace().next().unwrap_or("");
            if let Some(key) = first.strip_suffix(':') {
                if key.is_empty() {
                    return Err(doc.error(i + 1, "header with empty key"));
                }
                let value = line[first.len()..].trim().to_string();
                doc.headers.push(Header {
                    key: key.to_ascii_lowercase(),
                    value,
                    line: i + 1,
                });
            } else {
                doc.items.push(Item {
                    words: line.split_whitespace().map(str::to_string).collect(),
                    line: i + 1,
                });
            }
        }
        Ok(doc)
    }

    pub fn error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Format {
            source_name: self.source_name.clone(),
            line,
            message: message.into(),
        }
    }

    /// The single value of header `key`, erroring on repeats.
    pub fn header(&self, key: &str) -> Result<Option<&Header>> {
        let mut found = self.headers.iter().filter(|h| h.key == key);
        let first = found.next();
        if let Some(dup) = found.next() {
            return Err(self.error(dup.line, format!("header `{key}` given twice")));
        }
        Ok(first)
    }

    pub fn reject_unknown_headers(&self, known: &[&str]) -> Result<()> {
        match self.headers.iter().find(|h| !known.contains(&h.key.as_str())) {
            Some(h) => Err(self.error(h.line, format!("unknown header `{}`", h.key))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_headers_items_and_comments() {
        let doc = Document::parse(
            "t",
            "# leading\nname: demo  # trailing\n\nsd15 up-level1-repeat2-res-out  resize=nearest\n",
        )
        .unwrap();
        assert_eq!(doc.headers.len(), 1);
        assert_eq!(doc.headers[0].value, "demo");
        assert_eq!(doc.items[0].words, ["sd15", "up-level1-repeat2-res-out", "resize=nearest"]);
        assert_eq!(doc.items[0].line, 4);
    }

    #[test]
    fn duplicate_and_unknown_headers() {
        let doc = Document::parse("t", "name: a\nname: b\nfoo: c\n").unwrap();
        assert!(doc.header("name").is_err());
        assert!(doc.reject_unknown_headers(&["name"]).is_err());
        assert!(Document::parse("t", ": x").is_err());
    }
}
