use serde::{Deserialize, Serialize};

use super::Document;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
/// Inserted before and after every mention.
pub const MARK: &str = "[MARK]";

/// Flat token sequence of a document with boundary and mention markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatIndex {
    pub flat_tokens: Vec<String>,
    /// Per sentence `[start, end)` in flat coordinates, markers included.
    pub sentence_spans: Vec<(usize, usize)>,
    /// Per entity, per mention: flat position of the opening marker.
    pub mention_positions: Vec<Vec<usize>>,
    /// For every flat position, the `(sentence, token)` it came from; `None`
    /// for `[CLS]`, `[SEP]` and markers.
    pub token_origin: Vec<Option<(usize, usize)>>,
}

impl FlatIndex {
    pub fn len(&self) -> usize {
        self.flat_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat_tokens.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_spans.len()
    }

    /// Sentence containing a flat position; `None` only for `[CLS]`/`[SEP]`.
    pub fn sentence_of(&self, pos: usize) -> Option<usize> {
        self.sentence_spans
            .iter()
            .position(|&(s, e)| (s..e).contains(&pos))
    }

    /// `true` for the document boundary tokens.
    pub fn is_special(&self, pos: usize) -> bool {
        pos == 0 || pos + 1 == self.flat_tokens.len()
    }

    /// Per flat position, the owning sentence.
    pub fn sentence_map(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for (si, &(s, e)) in self.sentence_spans.iter().enumerate() {
            out[s..e].iter_mut().for_each(|o| *o = Some(si));
        }
        out
    }
}

/// Builds the marker-annotated flat sequence
/// `[CLS] sent_0 ... sent_{L-1} [SEP]`.
///
/// At a token boundary, closing markers of mentions ending there come before
/// opening markers of mentions starting there, so adjacent mentions never
/// interleave. Mentions opening at the same token are ordered by
/// `(entity, mention)`.
pub fn flatten(doc: &Document) -> FlatIndex {
    let mut flat = vec![CLS.to_string()];
    let mut origin = vec![None];
    let mut spans = Vec::with_capacity(doc.sentences.len());
    let mut positions: Vec<Vec<usize>> = doc
        .entities
        .iter()
        .map(|e| vec![0; e.mentions.len()])
        .collect();

    for (si, sent) in doc.sentences.iter().enumerate() {
        let mut opening: Vec<Vec<(usize, usize)>> = vec![Vec::new(); sent.len() + 1];
        let mut closing = vec![0usize; sent.len() + 1];
        for (ei, e) in doc.entities.iter().enumerate() {
            for (mi, m) in e.mentions.iter().enumerate() {
                if m.sent_id == si {
                    opening[m.span.0].push((ei, mi));
                    closing[m.span.1] += 1;
                }
            }
        }
        let start = flat.len();
        for ti in 0..=sent.len() {
            for _ in 0..closing[ti] {
                flat.push(MARK.to_string());
                origin.push(None);
            }
            for &(ei, mi) in &opening[ti] {
                positions[ei][mi] = flat.len();
                flat.push(MARK.to_string());
                origin.push(None);
            }
            if ti < sent.len() {
                flat.push(sent[ti].clone());
                origin.push(Some((si, ti)));
            }
        }
        spans.push((start, flat.len()));
    }
    flat.push(SEP.to_string());
    origin.push(None);
    FlatIndex {
        flat_tokens: flat,
        sentence_spans: spans,
        mention_positions: positions,
        token_origin: origin,
    }
}
