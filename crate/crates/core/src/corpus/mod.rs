//! Corpus objects in the DocRED layout and everything that turns them into
//! model inputs.

mod docred;
mod evidence;
mod flatten;
mod synth;
mod vocab;

pub use docred::{emit_docred, load_docred, parse_docred, to_docred_json, write_docred};
pub use evidence::evidence_vector;
pub use flatten::{flatten, FlatIndex, CLS, MARK, SEP};
pub use synth::{generate_synthetic, synthetic_relations, SynthSpec};
pub use vocab::{RelationVocab, Vocabulary, NA_ID, NA_NAME};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("document {doc}: malformed field `{field}`: {message}")]
    Malformed {
        doc: usize,
        field: String,
        message: String,
    },
    #[error("document {doc}: {message}")]
    Invalid { doc: usize, message: String },
    #[error("evidence sentence {index} out of range for {num_sentences} sentences")]
    EvidenceOutOfRange { index: usize, num_sentences: usize },
    #[error("document has no sentences")]
    NoSentences,
    #[error("synthetic corpus: {0}")]
    Synth(String),
}

/// One textual occurrence of an entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub sent_id: usize,
    /// `[start, end)` token offsets within the sentence.
    pub span: (usize, usize),
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub mentions: Vec<Mention>,
    pub entity_type: String,
}

impl Entity {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.mentions.iter().map(|m| m.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationFact {
    pub head: usize,
    pub tail: usize,
    pub relation: usize,
    /// Sorted, deduplicated sentence indices.
    pub evidence: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<Entity>,
    pub facts: Vec<RelationFact>,
}

impl Document {
    /// Checks the structural invariants; `doc` is used in error messages.
    pub fn validate(&self, doc: usize) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Invalid { doc, message };
        for (ei, e) in self.entities.iter().enumerate() {
            if e.mentions.is_empty() {
                return Err(invalid(format!("entity {ei} has no mentions")));
            }
            for m in &e.mentions {
                let Some(sent) = self.sentences.get(m.sent_id) else {
                    return Err(invalid(format!(
                        "entity {ei} mention sentence {} out of range ({} sentences)",
                        m.sent_id,
                        self.sentences.len()
                    )));
                };
                if m.span.0 >= m.span.1 || m.span.1 > sent.len() {
                    return Err(invalid(format!(
                        "entity {ei} mention span [{}, {}) invalid for sentence {} of length {}",
                        m.span.0,
                        m.span.1,
                        m.sent_id,
                        sent.len()
                    )));
                }
            }
        }
        let n = self.entities.len();
        for (fi, f) in self.facts.iter().enumerate() {
            if f.head >= n || f.tail >= n {
                return Err(invalid(format!(
                    "fact {fi} references entity {} but document has {n} entities",
                    f.head.max(f.tail)
                )));
            }
            if f.head == f.tail {
                return Err(invalid(format!("fact {fi} has head == tail ({})", f.head)));
            }
            if f.relation == NA_ID {
                return Err(invalid(format!("fact {fi} stores the NA relation")));
            }
            if let Some(&bad) = f.evidence.iter().find(|&&s| s >= self.sentences.len()) {
                return Err(invalid(format!(
                    "fact {fi} evidence sentence {bad} out of range ({} sentences)",
                    self.sentences.len()
                )));
            }
        }
        Ok(())
    }

    pub fn facts_for_pair(&self, head: usize, tail: usize) -> impl Iterator<Item = &RelationFact> {
        self.facts
            .iter()
            .filter(move |f| f.head == head && f.tail == tail)
    }

    /// All ordered pairs `(head, tail)` with `head != tail`, row-major.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.entities.len();
        (0..n)
            .flat_map(|h| (0..n).filter(move |&t| t != h).map(move |t| (h, t)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub documents: Vec<Document>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.documents
            .iter()
            .enumerate()
            .try_for_each(|(i, d)| d.validate(i))
    }

    pub fn num_facts(&self) -> usize {
        self.documents.iter().map(|d| d.facts.len()).sum()
    }
}
