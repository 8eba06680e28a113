use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Document};
use crate::gega::{select_evidence, GegaModel};
use crate::numerics::Tape;
use crate::scalar::Scalar;
use crate::{Error, Result};

const SILVER_FORMAT: &str = "gega-silver";

/// Teacher output for one labeled pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSilver {
    pub head: usize,
    pub tail: usize,
    /// Token importance over the flattened document.
    pub q: Vec<f64>,
    /// Sentences the teacher selected as evidence.
    pub evidence: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverDocument {
    pub title: String,
    pub pairs: Vec<PairSilver>,
}

/// Teacher annotations for a distantly supervised corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverAnnotation {
    pub format: String,
    pub documents: Vec<SilverDocument>,
}

impl SilverAnnotation {
    /// `title -> (head, tail) -> record`.
    pub fn index(&self) -> HashMap<&str, HashMap<(usize, usize), &PairSilver>> {
        self.documents
            .iter()
            .map(|d| (d.title.as_str(), d.pairs.iter().map(|p| ((p.head, p.tail), p)).collect()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("<silver>", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if s.format != SILVER_FORMAT {
            return Err(Error::Config(format!("silver: unexpected format `{}`", s.format)));
        }
        Ok(s)
    }
}

fn annotate<T: Scalar>(teacher: &GegaModel<T>, doc: &Document) -> Result<SilverDocument> {
    let labeled: Vec<(usize, usize)> = {
        let mut v: Vec<_> = doc.facts.iter().map(|f| (f.head, f.tail)).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut pairs = Vec::with_capacity(labeled.len());
    if !labeled.is_empty() {
        let mut tape = Tape::new();
        let bound = teacher.params.bind_frozen(&mut tape);
        if let Some(fwd) = teacher.forward(&mut tape, &bound, doc)? {
            let (n, ns) = (fwd.flat.len(), fwd.flat.num_sentences());
            let thresh = T::lit(teacher.config.gega.evi_thresh);
            for (row, &pair) in fwd.pairs.iter().enumerate() {
                if labeled.binary_search(&pair).is_err() {
                    continue;
                }
                let q = &tape.value(fwd.signals.q)[row * n..(row + 1) * n];
                let p = &tape.value(fwd.signals.p)[row * ns..(row + 1) * ns];
                pairs.push(PairSilver {
                    head: pair.0,
                    tail: pair.1,
                    q: q.iter().map(|v| v.as_f64()).collect(),
                    evidence: select_evidence(p, thresh),
                });
            }
        }
    }
    Ok(SilverDocument {
        title: doc.title.clone(),
        pairs,
    })
}

/// Teacher token importances and selected evidence for every labeled pair
/// of `distant`. Output order follows the corpus.
pub fn infer_silver<T: Scalar>(teacher: &GegaModel<T>, distant: &Dataset, workers: usize) -> Result<SilverAnnotation> {
    distant.validate()?;
    let documents = super::Workers::new(workers)?.install(|| {
        distant
            .documents
            .par_iter()
            .map(|d| annotate(teacher, d))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SilverAnnotation {
        format: SILVER_FORMAT.into(),
        documents,
    })
}
