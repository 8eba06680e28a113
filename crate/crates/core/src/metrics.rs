//! Relation F1, Ign-F1, evidence F1 and the official result file.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Document, RelationVocab, NA_ID};
use crate::{Error, Result};

/// One predicted relation triple with its evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub title: String,
    pub h_idx: usize,
    pub t_idx: usize,
    pub relation: usize,
    /// Ascending sentence ids.
    pub evidence: Vec<usize>,
    pub score: f64,
}

impl PredictionRecord {
    fn key(&self) -> (&str, usize, usize, usize) {
        (&self.title, self.h_idx, self.t_idx, self.relation)
    }
}

/// Micro precision / recall / F1 plus the counts behind them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
    /// Repeated prediction keys that were dropped.
    pub duplicates: usize,
    /// Set when there is no gold item, so recall is undefined (reported 0).
    pub gold_empty: bool,
}

impl Score {
    fn from_counts(correct: usize, predicted: usize, gold: usize, duplicates: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (precision, recall) = (ratio(correct, predicted), ratio(correct, gold));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
            duplicates,
            gold_empty: gold == 0,
        }
    }
}

type Triple = (String, usize, usize, usize);

fn gold_triples(gold: &Dataset) -> HashSet<Triple> {
    gold.documents
        .iter()
        .flat_map(|d| {
            d.facts
                .iter()
                .map(move |f| (d.title.clone(), f.head, f.tail, f.relation))
        })
        .collect()
}

fn pred_triples(predictions: &[PredictionRecord]) -> (HashSet<Triple>, usize) {
    let mut set = HashSet::with_capacity(predictions.len());
    let mut dup = 0;
    for p in predictions {
        let (t, h, tl, r) = p.key();
        if !set.insert((t.to_string(), h, tl, r)) {
            dup += 1;
        }
    }
    if dup > 0 {
        log::warn!("{dup} duplicate prediction triples ignored");
    }
    (set, dup)
}

/// Micro scores over exact `(title, head, tail, relation)` matches.
pub fn re_f1(predictions: &[PredictionRecord], gold: &Dataset) -> Score {
    let (pred, dup) = pred_triples(predictions);
    let gold = gold_triples(gold);
    let correct = pred.intersection(&gold).count();
    Score::from_counts(correct, pred.len(), gold.len(), dup)
}

/// Facts of a reference split, keyed by mention names.
#[derive(Debug, Clone, Default)]
pub struct TrainFacts {
    keys: HashSet<(String, String, usize)>,
}

impl TrainFacts {
    pub fn new(train: &Dataset) -> Self {
        let mut keys = HashSet::new();
        for d in &train.documents {
            for f in &d.facts {
                for hn in d.entities[f.head].names() {
                    for tn in d.entities[f.tail].names() {
                        keys.insert((hn.to_string(), tn.to_string(), f.relation));
                    }
                }
            }
        }
        Self { keys }
    }

    /// Whether some train fact with this relation shares a head name and a
    /// tail name with the given entities.
    pub fn contains(&self, doc: &Document, head: usize, tail: usize, relation: usize) -> bool {
        let (Some(h), Some(t)) = (doc.entities.get(head), doc.entities.get(tail)) else {
            return false;
        };
        h.names().any(|hn| {
            t.names()
                .any(|tn| self.keys.contains(&(hn.to_string(), tn.to_string(), relation)))
        })
    }
}

/// Like [`re_f1`] after removing every triple, predicted or gold, that
/// matches a fact of `train` by entity names and relation.
pub fn ign_f1(predictions: &[PredictionRecord], gold: &Dataset, train: &Dataset) -> Score {
    let train = TrainFacts::new(train);
    let docs: HashMap<&str, &Document> = gold.documents.iter().map(|d| (d.title.as_str(), d)).collect();
    let in_train = |t: &Triple| docs.get(t.0.as_str()).is_some_and(|d| train.contains(d, t.1, t.2, t.3));
    let (pred, dup) = pred_triples(predictions);
    let pred: HashSet<Triple> = pred.into_iter().filter(|t| !in_train(t)).collect();
    let gold: HashSet<Triple> = gold_triples(gold).into_iter().filter(|t| !in_train(t)).collect();
    let correct = pred.intersection(&gold).count();
    Score::from_counts(correct, pred.len(), gold.len(), dup)
}

/// Micro scores over `(title, head, tail, relation, sentence)` tuples. Only
/// tuples of correct triples can match, but evidence attached to wrong
/// triples still counts as predicted.
pub fn evi_f1(predictions: &[PredictionRecord], gold: &Dataset) -> Score {
    let mut pred = HashSet::new();
    let mut seen = HashSet::new();
    let mut dup = 0;
    for p in predictions {
        if !seen.insert(p.key()) {
            dup += 1;
            continue;
        }
        for &s in &p.evidence {
            pred.insert((p.title.clone(), p.h_idx, p.t_idx, p.relation, s));
        }
    }
    let gold: HashSet<_> = gold
        .documents
        .iter()
        .flat_map(|d| {
            d.facts.iter().flat_map(move |f| {
                f.evidence
                    .iter()
                    .map(move |&s| (d.title.clone(), f.head, f.tail, f.relation, s))
            })
        })
        .collect();
    let correct = pred.intersection(&gold).count();
    Score::from_counts(correct, pred.len(), gold.len(), dup)
}

/// The three scores together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub re: Score,
    pub ign: Score,
    pub evi: Score,
}

pub fn evaluate(predictions: &[PredictionRecord], gold: &Dataset, train: Option<&Dataset>) -> Report {
    let re = re_f1(predictions, gold);
    Report {
        re,
        ign: train.map_or(re, |t| ign_f1(predictions, gold, t)),
        evi: evi_f1(predictions, gold),
    }
}

impl std::fmt::Display for Report {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, s) in [("F1", self.re), ("Ign-F1", self.ign), ("Evi-F1", self.evi)] {
            writeln!(
                f,
                "{name:<7} P={:.4} R={:.4} F1={:.4} ({}/{} predicted, {} gold)",
                s.precision, s.recall, s.f1, s.correct, s.predicted, s.gold
            )?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct OfficialRecord {
    title: String,
    h_idx: usize,
    t_idx: usize,
    r: String,
    evidence: Vec<usize>,
    score: f64,
}

/// Sorts into the canonical `(title, h_idx, t_idx, relation)` order.
pub fn canonical_order(predictions: &mut [PredictionRecord]) {
    predictions.sort_by(|a, b| a.key().cmp(&b.key()));
}

/// Official result JSON: an array of `{title, h_idx, t_idx, r, evidence}`
/// (plus the decision `score`) in canonical order.
pub fn emit_official(predictions: &[PredictionRecord], relations: &RelationVocab) -> Result<String> {
    let mut sorted = predictions.to_vec();
    canonical_order(&mut sorted);
    let records = sorted
        .into_iter()
        .map(|p| {
            if p.relation == NA_ID || p.h_idx == p.t_idx {
                return Err(Error::Pipeline(format!(
                    "invalid prediction {} ({}, {}, {})",
                    p.title, p.h_idx, p.t_idx, p.relation
                )));
            }
            let r = relations
                .name(p.relation)
                .ok_or_else(|| Error::Pipeline(format!("relation id {} has no name", p.relation)))?
                .to_string();
            let evidence: BTreeSet<usize> = p.evidence.into_iter().collect();
            Ok(OfficialRecord {
                title: p.title,
                h_idx: p.h_idx,
                t_idx: p.t_idx,
                r,
                evidence: evidence.into_iter().collect(),
                score: p.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    serde_json::to_string_pretty(&records).map_err(|e| Error::json("<output>", e))
}

pub fn parse_official(text: &str, relations: &RelationVocab) -> Result<Vec<PredictionRecord>> {
    let records: Vec<OfficialRecord> = serde_json::from_str(text).map_err(|e| Error::json("<input>", e))?;
    records
        .into_iter()
        .map(|o| {
            let relation = relations
                .id(&o.r)
                .ok_or_else(|| Error::Pipeline(format!("unknown relation `{}` in result file", o.r)))?;
            Ok(PredictionRecord {
                title: o.title,
                h_idx: o.h_idx,
                t_idx: o.t_idx,
                relation,
                evidence: o.evidence,
                score: o.score,
            })
        })
        .collect()
}

pub fn write_official(path: impl AsRef<Path>, predictions: &[PredictionRecord], relations: &RelationVocab) -> Result<()> {
    let path = path.as_ref();
    let text = emit_official(predictions, relations)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_official(path: impl AsRef<Path>, relations: &RelationVocab) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_official(&text, relations).map_err(|e| match e {
        Error::Json { source, .. } => Error::json(path, source),
        other => other,
    })
}
