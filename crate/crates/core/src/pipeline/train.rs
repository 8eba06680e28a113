use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{clip_gradients, linear_schedule, Adam};
use super::silver::{PairSilver, SilverAnnotation};
use super::{TrainConfig, TrainPhase, Workers};
use crate::corpus::{evidence_vector, flatten, Dataset, Document};
use crate::gega::GegaModel;
use crate::losses::{document_loss, EvidenceTargets, LossBundle};
use crate::numerics::{ParamGroup, Tape};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// One optimizer step of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_re: f64,
    pub l_er: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Where the evidence term of a phase gets its targets.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    /// Gold sentence evidence from the corpus.
    Gold,
    /// Teacher token importances.
    Silver(&'a SilverAnnotation),
    /// Relation labels only.
    None,
}

/// Relation labels per pair row and the evidence targets of one document.
pub fn pair_supervision<T: Scalar>(
    doc: &Document,
    num_class: usize,
    supervision: Supervision<'_>,
    silver: Option<&HashMap<(usize, usize), &PairSilver>>,
) -> Result<(Vec<Vec<usize>>, EvidenceTargets<T>)> {
    let pairs = doc.pairs();
    let mut positives = Vec::with_capacity(pairs.len());
    for &(h, t) in &pairs {
        let mut rels: Vec<usize> = doc.facts_for_pair(h, t).map(|f| f.relation).collect();
        rels.sort_unstable();
        rels.dedup();
        if let Some(&r) = rels.iter().find(|&&r| r >= num_class) {
            return Err(Error::Config(format!(
                "num_class: document `{}` uses relation id {r} but the model has {num_class} classes",
                doc.title
            )));
        }
        positives.push(rels);
    }
    let targets = match supervision {
        Supervision::None => EvidenceTargets::None,
        Supervision::Gold => {
            let ns = doc.sentences.len();
            let mut rows = Vec::new();
            for (row, &(h, t)) in pairs.iter().enumerate() {
                let lists: Vec<&[usize]> = doc.facts_for_pair(h, t).map(|f| f.evidence.as_slice()).collect();
                if let Some(z) = evidence_vector::<T>(&lists, ns)? {
                    rows.push((row, z));
                }
            }
            EvidenceTargets::Sentences(rows)
        }
        Supervision::Silver(_) => {
            let n = flatten(doc).len();
            let mut rows = Vec::new();
            for (row, &(h, t)) in pairs.iter().enumerate() {
                if positives[row].is_empty() {
                    continue;
                }
                let rec = silver.and_then(|m| m.get(&(h, t))).ok_or_else(|| {
                    Error::Pipeline(format!(
                        "no silver annotation for document `{}` pair ({h}, {t})",
                        doc.title
                    ))
                })?;
                if rec.q.len() != n {
                    return Err(Error::Pipeline(format!(
                        "silver annotation for document `{}` pair ({h}, {t}) covers {} tokens, document has {n}",
                        doc.title,
                        rec.q.len()
                    )));
                }
                rows.push((row, rec.q.iter().map(|&v| T::lit(v)).collect()));
            }
            EvidenceTargets::Tokens(rows)
        }
    };
    Ok((positives, targets))
}

struct DocPlan<T> {
    positives: Vec<Vec<usize>>,
    targets: EvidenceTargets<T>,
}

fn doc_gradients<T: Scalar>(
    model: &GegaModel<T>,
    doc: &Document,
    plan: &DocPlan<T>,
    lambda: T,
) -> Result<Option<(Vec<Vec<T>>, LossBundle)>> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let Some(fwd) = model.forward(&mut tape, &bound, doc)? else {
        return Ok(None);
    };
    let (loss, bundle) = document_loss(
        &mut tape,
        fwd.scores,
        fwd.signals.p,
        fwd.signals.q,
        &plan.positives,
        &plan.targets,
        lambda,
    )?;
    if !bundle.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            document: doc.title.clone(),
        });
    }
    let grads = tape.backward(loss)?;
    Ok(Some((model.params.collect_grads(&tape, &bound, &grads), bundle)))
}

/// Runs `cfg.epochs` epochs over `data`.
///
/// Documents are shuffled per epoch from `cfg.seed`; each batch averages its
/// per-document losses, `grad_accum` batches form one optimizer step. The
/// evidence term follows `supervision` and is skipped entirely when
/// `lambda == 0`. `on_log` sees every optimizer step.
pub fn train<T: Scalar>(
    model: &mut GegaModel<T>,
    data: &Dataset,
    supervision: Supervision<'_>,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    data.validate()?;
    let supervision = if cfg.lambda == 0.0 { Supervision::None } else { supervision };
    let index = match supervision {
        Supervision::Silver(s) => Some(s.index()),
        _ => None,
    };
    let num_class = model.num_class();
    let plans = data
        .documents
        .iter()
        .map(|d| {
            let silver = index.as_ref().and_then(|i| i.get(d.title.as_str()));
            pair_supervision::<T>(d, num_class, supervision, silver)
                .map(|(positives, targets)| DocPlan { positives, targets })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = data.documents.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(cfg.grad_accum);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = (total_steps as f64 * cfg.warmup_ratio).ceil() as usize;
    let lambda = T::lit(cfg.lambda);
    let phase = cfg.phase.loss_phase();

    let workers = Workers::new(cfg.workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut acc: Vec<Vec<T>> = model.params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for group in batches.chunks(cfg.grad_accum) {
            let mut sums = (0.0, 0.0, 0.0);
            let mut counted = 0usize;
            for batch in group {
                let results = {
                    let m: &GegaModel<T> = model;
                    workers.install(|| {
                        batch
                            .par_iter()
                            .map(|&i| doc_gradients(m, &data.documents[i], &plans[i], lambda))
                            .collect::<Vec<_>>()
                    })
                };
                let weight = T::one() / T::from_usize_lossy(batch.len() * cfg.grad_accum);
                for r in results {
                    let Some((grads, bundle)) = r.map_err(|e| match e {
                        Error::NonFiniteLoss { document, .. } => Error::NonFiniteLoss { step, document },
                        other => other,
                    })?
                    else {
                        continue;
                    };
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(g).for_each(|(a, &g)| *a += g * weight);
                    }
                    sums.0 += bundle.l_re;
                    sums.1 += bundle.l_er(phase);
                    sums.2 += bundle.total;
                    counted += 1;
                }
            }
            let grad_norm = clip_gradients(&mut acc, cfg.max_grad_norm);
            let factor = linear_schedule(step, total_steps, warmup);
            adam.step(&mut model.params, &acc, |g| {
                factor
                    * match g {
                        ParamGroup::Encoder => cfg.lr_encoder,
                        ParamGroup::Added => cfg.lr_added,
                    }
            });
            acc.iter_mut().flat_map(|a| a.iter_mut()).for_each(|v| *v = T::zero());
            let c = counted.max(1) as f64;
            let rec = LogRecord {
                step,
                epoch,
                l_re: sums.0 / c,
                l_er: sums.1 / c,
                total: sums.2 / c,
                grad_norm,
            };
            on_log(&rec);
            log.push(rec);
            step += 1;
        }
    }
    Ok(log)
}

/// Step 1: teacher on human-annotated data with gold sentence evidence.
pub fn train_teacher<T: Scalar>(
    model: &mut GegaModel<T>,
    annotated: &Dataset,
    cfg: &TrainConfig,
    on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    let cfg = TrainConfig {
        phase: TrainPhase::Teacher,
        ..cfg.clone()
    };
    train(model, annotated, Supervision::Gold, &cfg, on_log)
}

/// Step 3: student on distant data, distilling the teacher's token
/// importances. Every labeled pair must have a silver record.
pub fn train_student<T: Scalar>(
    model: &mut GegaModel<T>,
    distant: &Dataset,
    silver: &SilverAnnotation,
    cfg: &TrainConfig,
    on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    let cfg = TrainConfig {
        phase: TrainPhase::StudentDistill,
        ..cfg.clone()
    };
    train(model, distant, Supervision::Silver(silver), &cfg, on_log)
}

/// Step 4: continue the student on annotated data with gold evidence.
pub fn finetune_student<T: Scalar>(
    model: &mut GegaModel<T>,
    annotated: &Dataset,
    cfg: &TrainConfig,
    on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    let cfg = TrainConfig {
        phase: TrainPhase::StudentFinetune,
        ..cfg.clone()
    };
    train(model, annotated, Supervision::Gold, &cfg, on_log)
}

/// Writes one JSON object per line.
pub fn write_log(path: impl AsRef<Path>, records: &[LogRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}
