use std::collections::BTreeMap;

use rayon::prelude::*;

use super::Workers;
use crate::corpus::{Dataset, Document, Entity};
use crate::gega::{decide_relations, select_evidence, GegaModel};
use crate::metrics::PredictionRecord;
use crate::numerics::Tape;
use crate::scalar::Scalar;
use crate::Result;

/// Threshold-relative margins `[0, s_1 - s_0, ..., s_{k-1} - s_0]` over the
/// first `named` classes (classes without a relation name never fire).
pub fn relation_margins<T: Scalar>(scores: &[T], named: usize) -> Vec<T> {
    let th = scores[0];
    scores[..named.min(scores.len())].iter().map(|&s| s - th).collect()
}

/// Per-pair single-pass outputs of one document.
struct SinglePass<T> {
    pairs: Vec<(usize, usize)>,
    margins: Vec<Vec<T>>,
    evidence: Vec<Vec<usize>>,
}

fn single_pass<T: Scalar>(model: &GegaModel<T>, doc: &Document) -> Result<Option<SinglePass<T>>> {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let Some(fwd) = model.forward(&mut tape, &bound, doc)? else {
        return Ok(None);
    };
    let (c, ns) = (model.num_class(), fwd.flat.num_sentences());
    let named = model.relations.len();
    let thresh = T::lit(model.config.gega.evi_thresh);
    let scores = tape.value(fwd.scores);
    let p = tape.value(fwd.signals.p);
    let margins = (0..fwd.pairs.len())
        .map(|r| relation_margins(&scores[r * c..(r + 1) * c], named))
        .collect();
    let evidence = (0..fwd.pairs.len())
        .map(|r| select_evidence(&p[r * ns..(r + 1) * ns], thresh))
        .collect();
    Ok(Some(SinglePass {
        pairs: fwd.pairs,
        margins,
        evidence,
    }))
}

fn records<T: Scalar>(
    title: &str,
    pair: (usize, usize),
    margins: &[T],
    evidence: &[usize],
    cap: usize,
) -> impl Iterator<Item = PredictionRecord> {
    let title = title.to_string();
    let evidence = evidence.to_vec();
    let scored: Vec<(usize, f64)> = decide_relations(margins, cap)
        .into_iter()
        .map(|r| (r, margins[r].as_f64()))
        .collect();
    scored.into_iter().map(move |(r, score)| PredictionRecord {
        title: title.clone(),
        h_idx: pair.0,
        t_idx: pair.1,
        relation: r,
        evidence: evidence.clone(),
        score,
    })
}

/// Whole-document predictions for every ordered entity pair. Scores are
/// margins over the threshold class. Output follows corpus and pair order.
pub fn infer_single<T: Scalar>(model: &GegaModel<T>, data: &Dataset, workers: usize) -> Result<Vec<PredictionRecord>> {
    let cap = model.config.gega.num_labels_cap;
    let per_doc = Workers::new(workers)?.install(|| {
        data.documents
            .par_iter()
            .map(|doc| {
                let Some(sp) = single_pass(model, doc)? else {
                    return Ok(Vec::new());
                };
                Ok(sp
                    .pairs
                    .iter()
                    .enumerate()
                    .flat_map(|(r, &pair)| records(&doc.title, pair, &sp.margins[r], &sp.evidence[r], cap))
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_doc.into_iter().flatten().collect())
}

/// Keeps only the given sentences (in original order) and the entities that
/// still have mentions. Returns the document and the old-to-new entity map.
pub fn pseudo_document(doc: &Document, sentences: &[usize]) -> (Document, Vec<Option<usize>>) {
    let mut sent_map = vec![None; doc.sentences.len()];
    let mut kept = Vec::new();
    for (new, &old) in sentences.iter().enumerate() {
        sent_map[old] = Some(new);
        kept.push(doc.sentences[old].clone());
    }
    let mut entity_map = vec![None; doc.entities.len()];
    let mut entities = Vec::new();
    for (i, e) in doc.entities.iter().enumerate() {
        let mentions: Vec<_> = e
            .mentions
            .iter()
            .filter_map(|m| {
                sent_map[m.sent_id].map(|s| {
                    let mut m = m.clone();
                    m.sent_id = s;
                    m
                })
            })
            .collect();
        if !mentions.is_empty() {
            entity_map[i] = Some(entities.len());
            entities.push(Entity {
                mentions,
                entity_type: e.entity_type.clone(),
            });
        }
    }
    let pseudo = Document {
        title: doc.title.clone(),
        sentences: kept,
        entities,
        facts: Vec::new(),
    };
    (pseudo, entity_map)
}

fn fuse_document<T: Scalar>(model: &GegaModel<T>, doc: &Document) -> Result<Vec<PredictionRecord>> {
    let cap = model.config.gega.num_labels_cap;
    let Some(sp) = single_pass(model, doc)? else {
        return Ok(Vec::new());
    };
    let mut combined = sp.margins.clone();
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (r, ev) in sp.evidence.iter().enumerate() {
        if !ev.is_empty() {
            groups.entry(ev.as_slice()).or_default().push(r);
        }
    }
    for (ev, rows) in groups {
        let (pseudo, map) = pseudo_document(doc, ev);
        let Some(ps) = single_pass(model, &pseudo)? else {
            continue;
        };
        for r in rows {
            let (h, t) = sp.pairs[r];
            let (Some(h2), Some(t2)) = (map[h], map[t]) else {
                continue;
            };
            let Some(pr) = ps.pairs.iter().position(|&p| p == (h2, t2)) else {
                continue;
            };
            for (c, m) in combined[r].iter_mut().zip(&ps.margins[pr]) {
                *c += *m;
            }
        }
    }
    Ok(sp
        .pairs
        .iter()
        .enumerate()
        .flat_map(|(r, &pair)| records(&doc.title, pair, &combined[r], &sp.evidence[r], cap))
        .collect())
}

/// Fusion of whole-document scores with scores on an evidence-only
/// pseudo-document: per pair, margins of both runs are added. Pairs without
/// selected evidence, or whose entities vanish from the pseudo-document,
/// keep their single-run margins. Evidence is taken from the single run.
pub fn infer_fusion<T: Scalar>(model: &GegaModel<T>, data: &Dataset, workers: usize) -> Result<Vec<PredictionRecord>> {
    let per_doc = Workers::new(workers)?.install(|| {
        data.documents
            .par_iter()
            .map(|doc| fuse_document(model, doc))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_doc.into_iter().flatten().collect())
}
