//! Prompt rendering for the remote-evaluator protocol.
//!
//! A template is a task question with bracketed uppercase placeholders, e.g.
//!
//! ```text
//! Is this sentence [SENTENCE1] grammatically correct? Respond ONLY with
//! "Yes" or "No". Note: [VAR].
//! ```
//!
//! `[VAR]` expands to the optimized fragment (the selected vocabulary words
//! joined by single spaces); the remaining placeholders are filled per
//! demonstration and per query. The rendered prompt is the demonstration
//! blocks, each with its own expanded note and answer, followed by the query
//! block with an empty answer.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::oracle::DiscreteAssignment;

/// Placeholder that expands to the optimized prompt fragment.
pub const VAR_PLACEHOLDER: &str = "[VAR]";

/// One labeled demonstration: placeholder substitutions plus its answer text.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DemoText {
    pub fields: BTreeMap<String, String>,
    pub answer: String,
}

/// The query sample: placeholder substitutions, no answer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryText {
    pub fields: BTreeMap<String, String>,
}

fn fill(template: &str, fields: &BTreeMap<String, String>, fragment: &str) -> Result<String> {
    let mut out = template.replace(VAR_PLACEHOLDER, fragment);
    for (key, value) in fields {
        out = out.replace(&alloc::format!("[{key}]"), value);
    }
    if let Some(name) = leftover_placeholder(&out) {
        return Err(Error::UnboundPlaceholder { name });
    }
    Ok(out)
}

/// First remaining `[UPPERCASE]` placeholder, if any.
fn leftover_placeholder(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_uppercase() || bytes[j].is_ascii_digit()) {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b']' {
                return Some(text[i + 1..j].to_string());
            }
        }
        i += 1;
    }
    None
}

/// Render the full prompt for one assignment.
///
/// `demo_texts` holds, per demonstration slot, the candidate list the
/// assignment indexes into; `vocab` must cover every token index.
pub fn render_prompt(
    template: &str,
    vocab: &[String],
    assignment: &DiscreteAssignment,
    demo_texts: &[Vec<DemoText>],
    query: &QueryText,
) -> Result<String> {
    if !template.contains(VAR_PLACEHOLDER) {
        return Err(Error::MissingVarPlaceholder {
            placeholder: VAR_PLACEHOLDER,
        });
    }
    for &j in &assignment.tokens {
        if j >= vocab.len() {
            return Err(Error::VocabMismatch {
                vocab: vocab.len(),
                index: j,
            });
        }
    }
    if demo_texts.len() != assignment.demos.len() {
        return Err(Error::LengthMismatch {
            expected: assignment.demos.len(),
            got: demo_texts.len(),
        });
    }
    let fragment = assignment
        .tokens
        .iter()
        .map(|&j| vocab[j].as_str())
        .collect::<Vec<_>>()
        .join(" ");

    let mut out = String::new();
    for (slot, candidates) in demo_texts.iter().enumerate() {
        let k = assignment.demos[slot];
        let demo = candidates.get(k).ok_or(Error::IndexOutOfBounds {
            kind: "demo",
            slot,
            index: k,
            bound: candidates.len(),
        })?;
        out.push_str(&fill(template, &demo.fields, &fragment)?);
        out.push_str(" Answer: ");
        out.push_str(&demo.answer);
        out.push('\n');
    }
    out.push_str(&fill(template, &query.fields, &fragment)?);
    out.push_str(" Answer:");
    Ok(out)
}
