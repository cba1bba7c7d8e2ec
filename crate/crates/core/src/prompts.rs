//! Prompt templates with `{{slot}}` markers.
//!
//! The built-in templates are compiled in from `prompts/*.txt`; a directory
//! holding files with the same names overrides them at runtime.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::TemplateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptKind {
    Judge,
    Rewrite,
    DecomposeStatic,
    DecomposeGuided,
    /// Minimal question-answering prompt for parametric answers.
    Answer,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::Judge,
        PromptKind::Rewrite,
        PromptKind::DecomposeStatic,
        PromptKind::DecomposeGuided,
        PromptKind::Answer,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::Judge => "judge.txt",
            PromptKind::Rewrite => "rewrite.txt",
            PromptKind::DecomposeStatic => "decompose_static.txt",
            PromptKind::DecomposeGuided => "decompose_guided.txt",
            PromptKind::Answer => "answer.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::Judge => include_str!("../prompts/judge.txt"),
            PromptKind::Rewrite => include_str!("../prompts/rewrite.txt"),
            PromptKind::DecomposeStatic => include_str!("../prompts/decompose_static.txt"),
            PromptKind::DecomposeGuided => include_str!("../prompts/decompose_guided.txt"),
            PromptKind::Answer => include_str!("../prompts/answer.txt"),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: PromptKind,
    pieces: Vec<Piece>,
    slots: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn parse(kind: PromptKind, text: &str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut slots = BTreeSet::new();
        let mut rest = text;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                pieces.push(Piece::Text(rest[..start].to_string()));
            }
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| TemplateError::Unterminated {
                template: kind.to_string(),
            })?;
            let name = after[..end].trim().to_string();
            slots.insert(name.clone());
            pieces.push(Piece::Slot(name));
            rest = &after[end + 2..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Self {
            kind,
            pieces,
            slots,
        })
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn slots(&self) -> &BTreeSet<String> {
        &self.slots
    }

    /// Fills every slot. Values are inserted verbatim and never re-scanned,
    /// so a value containing `{{` does not create new slots.
    pub fn render(&self, values: &HashMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let value = values.get(name.as_str()).ok_or_else(|| TemplateError::MissingSlot {
                        template: self.kind.to_string(),
                        slot: name.clone(),
                    })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// One template per [`PromptKind`].
#[derive(Debug, Clone)]
pub struct PromptCatalog {
    templates: HashMap<PromptKind, PromptTemplate>,
}

impl PromptCatalog {
    pub fn builtin() -> Self {
        let templates = PromptKind::ALL
            .iter()
            .map(|&k| {
                let t = PromptTemplate::parse(k, k.builtin()).expect("built-in templates parse");
                (k, t)
            })
            .collect();
        Self { templates }
    }

    /// Built-in templates, overridden by any same-named files in `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let mut catalog = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.as_ref().join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            catalog.templates.insert(kind, PromptTemplate::parse(kind, &text)?);
        }
        Ok(catalog)
    }

    pub fn get(&self, kind: PromptKind) -> &PromptTemplate {
        &self.templates[&kind]
    }

    pub fn render(
        &self,
        kind: PromptKind,
        values: &[(&str, String)],
    ) -> Result<String, TemplateError> {
        let map: HashMap<&str, String> = values.iter().cloned().collect();
        self.get(kind).render(&map)
    }
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}
