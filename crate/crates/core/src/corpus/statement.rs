use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source of an external causal statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resource {
    /// Specific (grounded) GLUCOSE statement.
    #[serde(rename = "GLU-SPE")]
    GluSpe,
    /// General-rule GLUCOSE statement with placeholders.
    #[serde(rename = "GLU-GEN")]
    GluGen,
    #[serde(rename = "ATOMIC")]
    Atomic,
    /// Distantly labeled causal sentence; has no relation marker.
    #[serde(rename = "DISTANT")]
    Distant,
    /// Generated by [`crate::corpus::generate_synthetic`].
    #[serde(rename = "SYNTH")]
    Synth,
}

impl Resource {
    pub fn as_str(self) -> &'static str {
        match self {
            Resource::GluSpe => "GLU-SPE",
            Resource::GluGen => "GLU-GEN",
            Resource::Atomic => "ATOMIC",
            Resource::Distant => "DISTANT",
            Resource::Synth => "SYNTH",
        }
    }

    fn has_marker(self) -> bool {
        !matches!(self, Resource::Distant)
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Resource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GLU-SPE" => Ok(Resource::GluSpe),
            "GLU-GEN" => Ok(Resource::GluGen),
            "ATOMIC" => Ok(Resource::Atomic),
            "DISTANT" => Ok(Resource::Distant),
            "SYNTH" => Ok(Resource::Synth),
            other => Err(Error::InvalidConfig(format!("unknown resource {other:?}"))),
        }
    }
}

/// One external causal statement in original and model-input form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalStatement {
    pub resource: Resource,
    pub original: String,
    pub converted: String,
}

impl CausalStatement {
    pub fn new(resource: Resource, original: impl Into<String>) -> Result<Self> {
        let original = original.into();
        let converted = convert_statement(&original, resource)?;
        Ok(CausalStatement {
            resource,
            original,
            converted,
        })
    }
}

/// Byte ranges of every `>Relation>` marker.
fn find_markers(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'>' {
            if let Some(rel) = text[i + 1..].find('>') {
                let inner = &text[i + 1..i + 1 + rel];
                if !inner.is_empty() && !inner.contains(char::is_whitespace) {
                    out.push((i, i + rel + 2));
                    i += rel + 2;
                    continue;
                }
            }
        }
        i += 1;
    }
    out
}

fn ensure_period(mut s: String) -> String {
    if !s.ends_with('.') {
        s.push('.');
    }
    s
}

/// Rewrites a resource statement into its single-sentence model input.
///
/// The relation marker becomes `", "`, the second clause's first letter is
/// lowercased unless its first token is a placeholder containing `_`, and a
/// final period is added. `DISTANT` text only gets the period rule. Text
/// without a marker that already ends in a period is taken as converted and
/// returned unchanged.
pub fn convert_statement(original: &str, resource: Resource) -> Result<String> {
    let text = original.trim();
    if !resource.has_marker() {
        return Ok(ensure_period(text.to_string()));
    }
    let markers = find_markers(text);
    match markers.as_slice() {
        [] if text.ends_with('.') => Ok(text.to_string()),
        [] => Err(Error::MarkerNotFound(original.to_string())),
        [(start, end)] => {
            let left = text[..*start].trim_end();
            let right = text[*end..].trim_start();
            let first_token = right.split_whitespace().next().unwrap_or("");
            let right = if first_token.contains('_') {
                right.to_string()
            } else {
                lowercase_first_alpha(right)
            };
            Ok(ensure_period(format!("{left}, {right}")))
        }
        _ => Err(Error::MultipleMarkers(original.to_string())),
    }
}

fn lowercase_first_alpha(s: &str) -> String {
    match s.char_indices().find(|(_, c)| c.is_alphabetic()) {
        Some((i, c)) => {
            let mut out = String::with_capacity(s.len());
            out.push_str(&s[..i]);
            out.extend(c.to_lowercase());
            out.push_str(&s[i + c.len_utf8()..]);
            out
        }
        None => s.to_string(),
    }
}
