//! Prompt templates with `<obj>` and `<attr:NAME>` placeholders.
//!
//! Parsing happens on the raw string before tokenization, so the grammar is
//! independent of the backbone tokenizer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attribute::is_valid_attribute_name;
use crate::error::{Error, Result};

pub const OBJ_PLACEHOLDER: &str = "<obj>";
const ATTR_OPEN: &str = "<attr:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Literal(String),
    Obj,
    Attr(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    raw: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Parses and checks every attribute slot against `known` slot names.
    pub fn parse<S: AsRef<str>>(raw: &str, known: &[S]) -> Result<Self> {
        let template = Self::parse_syntax(raw)?;
        let mut offset = 0;
        for seg in &template.segments {
            if let Segment::Attr(name) = seg {
                if !known.iter().any(|k| k.as_ref() == name) {
                    return Err(Error::TemplateParse {
                        position: offset,
                        message: format!("unknown attribute `{name}`"),
                    });
                }
            }
            offset += seg.source_len();
        }
        Ok(template)
    }

    /// Parses placeholder syntax only; attribute names are not resolved.
    pub fn parse_syntax(raw: &str) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::TemplateParse {
                position: 0,
                message: "template is empty".into(),
            });
        }
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut seen_obj = false;
        let mut pos = 0;
        while pos < raw.len() {
            let rest = &raw[pos..];
            if rest.starts_with(OBJ_PLACEHOLDER) {
                if seen_obj {
                    return Err(Error::TemplateParse {
                        position: pos,
                        message: "template has more than one <obj> slot".into(),
                    });
                }
                seen_obj = true;
                flush(&mut literal, &mut segments);
                segments.push(Segment::Obj);
                pos += OBJ_PLACEHOLDER.len();
            } else if rest.starts_with(ATTR_OPEN) {
                let close = rest.find('>').ok_or_else(|| Error::TemplateParse {
                    position: pos,
                    message: "unterminated <attr:...> placeholder".into(),
                })?;
                let name = &rest[ATTR_OPEN.len()..close];
                if !is_valid_attribute_name(name) {
                    return Err(Error::TemplateParse {
                        position: pos,
                        message: format!("invalid attribute name `{name}`"),
                    });
                }
                flush(&mut literal, &mut segments);
                segments.push(Segment::Attr(name.to_string()));
                pos += close + 1;
            } else {
                let ch = rest.chars().next().expect("non-empty rest");
                literal.push(ch);
                pos += ch.len_utf8();
            }
        }
        flush(&mut literal, &mut segments);
        Ok(Self {
            raw: raw.to_string(),
            segments,
        })
    }

    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let raw: String = segments.iter().map(Segment::to_string).collect();
        let parsed = Self::parse_syntax(&raw)?;
        if parsed.segments != segments {
            return Err(Error::TemplateParse {
                position: 0,
                message: "segments do not round-trip (adjacent or placeholder-like literals)".into(),
            });
        }
        Ok(parsed)
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn has_obj(&self) -> bool {
        self.segments.iter().any(|s| matches!(s, Segment::Obj))
    }

    pub fn attr_names(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Attr(n) => Some(n.as_str()),
            _ => None,
        })
    }

    pub fn has_attrs(&self) -> bool {
        self.attr_names().next().is_some()
    }

    /// The same template with every attribute slot removed and whitespace
    /// collapsed: the identity-only prompt used by the first training stage.
    pub fn without_attrs(&self) -> Result<Self> {
        let text: String = self
            .segments
            .iter()
            .filter(|s| !matches!(s, Segment::Attr(_)))
            .map(Segment::to_string)
            .collect();
        let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
        Self::parse_syntax(&collapsed)
    }
}

fn flush(literal: &mut String, segments: &mut Vec<Segment>) {
    if !literal.is_empty() {
        segments.push(Segment::Literal(std::mem::take(literal)));
    }
}

impl Segment {
    fn source_len(&self) -> usize {
        match self {
            Segment::Literal(s) => s.len(),
            Segment::Obj => OBJ_PLACEHOLDER.len(),
            Segment::Attr(n) => ATTR_OPEN.len() + n.len() + 1,
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Literal(s) => f.write_str(s),
            Segment::Obj => f.write_str(OBJ_PLACEHOLDER),
            Segment::Attr(n) => write!(f, "{ATTR_OPEN}{n}>"),
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}
