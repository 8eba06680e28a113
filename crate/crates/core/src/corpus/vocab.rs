use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::flatten::{FlatIndex, CLS, MARK, SEP};
use super::Dataset;

/// Relation id reserved for "no relation"; doubles as the threshold class.
pub const NA_ID: usize = 0;
pub const NA_NAME: &str = "Na";

/// Bidirectional relation label map. Id 0 is always [`NA_NAME`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct RelationVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for RelationVocab {
    fn default() -> Self {
        Self::from_names(Vec::new())
    }
}

impl RelationVocab {
    /// Builds a map with `Na` at id 0 followed by `names` in order.
    pub fn from_names(names: Vec<String>) -> Self {
        let mut all = vec![NA_NAME.to_string()];
        all.extend(names.into_iter().filter(|n| n != NA_NAME));
        let index = all.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names: all, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Looks up `name`, registering it with the next free id if unseen.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

}

/// Token-to-id map for the context encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNK: &'static str = "[UNK]";
    pub const UNK_ID: usize = 0;

    /// Special tokens first, then corpus tokens in order of first appearance.
    pub fn from_datasets(datasets: &[&Dataset]) -> Self {
        let mut tokens: Vec<String> = [Self::UNK, CLS, SEP, MARK].iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for ds in datasets {
            for doc in &ds.documents {
                for tok in doc.sentences.iter().flatten() {
                    if !index.contains_key(tok) {
                        index.insert(tok.clone(), tokens.len());
                        tokens.push(tok.clone());
                    }
                }
            }
        }
        Self { tokens, index }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Self {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn encode(&self, flat: &FlatIndex) -> Vec<usize> {
        flat.flat_tokens.iter().map(|t| self.id(t)).collect()
    }
}

impl From<Vec<String>> for RelationVocab {
    fn from(names: Vec<String>) -> Self {
        Self::from_names(names)
    }
}

impl From<RelationVocab> for Vec<String> {
    fn from(v: RelationVocab) -> Self {
        v.names
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
