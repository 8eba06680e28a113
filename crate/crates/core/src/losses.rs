//! Adaptive-threshold relation loss, evidence KL objectives and their
//! weighted combination.

use serde::{Deserialize, Serialize};

use crate::corpus::NA_ID;
use crate::numerics::{NumericsError, Tape, Var};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Smoothing added to both sides of the KL log ratio.
pub const KL_EPS: f64 = 1e-10;

/// Which evidence objective a phase trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Gold sentence evidence, document-level KL.
    Teacher,
    /// Teacher token importances, token-level KL.
    Student,
}

/// Adaptive-threshold loss per row of `scores` (`pairs x classes`).
///
/// Class 0 is the threshold. For positives `P` and negatives `N` of a row:
/// `-sum_{r in P} log softmax_{P+TH}(s)_r - log softmax_{N+TH}(s)_TH`.
/// Returns `pairs x 1`.
pub fn atl_loss<T: Scalar>(tape: &mut Tape<T>, scores: Var, positives: &[Vec<usize>]) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != positives.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "atl_loss",
            expected: vec![positives.len(), shape.last().copied().unwrap_or(0)],
            actual: shape,
        }
        .into());
    }
    let (rows, classes) = (shape[0], shape[1]);
    let mut pos = vec![false; rows * classes];
    let mut counts = Vec::with_capacity(rows);
    for (r, labels) in positives.iter().enumerate() {
        let mut count = 0usize;
        for &l in labels {
            if l == NA_ID || l >= classes {
                return Err(Error::Config(format!(
                    "atl_loss: positive label {l} must lie in 1..{classes}"
                )));
            }
            if !pos[r * classes + l] {
                pos[r * classes + l] = true;
                count += 1;
            }
        }
        counts.push(T::from_usize_lossy(count));
    }
    let keep_pos: Vec<bool> = (0..rows * classes).map(|i| pos[i] || i % classes == NA_ID).collect();
    let keep_neg: Vec<bool> = pos.iter().map(|&p| !p).collect();

    let pos_logits = tape.where_mask(scores, &keep_pos, T::neg_infinity())?;
    let lse_pos = tape.logsumexp(pos_logits, 1)?;
    let counts = tape.constant(vec![rows, 1], counts)?;
    let lse_pos = tape.mul(lse_pos, counts)?;
    let pos_scores = tape.where_mask(scores, &pos, T::zero())?;
    let pos_sum = tape.sum(pos_scores, 1)?;
    let term_pos = tape.sub(lse_pos, pos_sum)?;

    let neg_logits = tape.where_mask(scores, &keep_neg, T::neg_infinity())?;
    let lse_neg = tape.logsumexp(neg_logits, 1)?;
    let th = tape.slice(scores, 1, NA_ID, NA_ID + 1)?;
    let term_neg = tape.sub(lse_neg, th)?;
    Ok(tape.add(term_pos, term_neg)?)
}

/// Row-wise `sum_j target_j log((target_j + eps) / (pred_j + eps))`.
///
/// `target` is used as given; callers detach it when it must not receive
/// gradient. Zero-target terms vanish, and equal rows give exactly zero.
pub fn kl_rows<T: Scalar>(tape: &mut Tape<T>, target: Var, pred: Var) -> Result<Var> {
    let (st, sp) = (tape.shape(target).to_vec(), tape.shape(pred).to_vec());
    if st != sp || st.len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "kl",
            expected: st,
            actual: sp,
        }
        .into());
    }
    let eps = T::lit(KL_EPS);
    let lt = tape.add_scalar(target, eps);
    let lt = tape.log(lt);
    let lp = tape.add_scalar(pred, eps);
    let lp = tape.log(lp);
    let diff = tape.sub(lt, lp)?;
    let terms = tape.mul(target, diff)?;
    Ok(tape.sum(terms, 1)?)
}

/// Document-level evidence loss `KL(z || p)` per row; `z` is gold.
pub fn er_doc_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, p: Var) -> Result<Var> {
    let z = tape.detach(z);
    kl_rows(tape, z, p)
}

/// Token-level evidence loss `KL(q_teacher || q_student)` per row. The
/// teacher side never receives gradient.
pub fn er_sent_loss<T: Scalar>(tape: &mut Tape<T>, q_teacher: Var, q_student: Var) -> Result<Var> {
    let t = tape.detach(q_teacher);
    kl_rows(tape, t, q_student)
}

/// `(1 - lambda) * l_re + lambda * l_er`; a missing ER term counts as zero.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, l_re: Var, l_er: Option<Var>, lambda: T) -> Result<Var> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::Config(format!("lambda: {lambda} outside [0, 1]")));
    }
    let re = tape.scale(l_re, T::one() - lambda);
    match l_er {
        None => Ok(re),
        Some(er) => {
            let er = tape.scale(er, lambda);
            Ok(tape.add(re, er)?)
        }
    }
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_re: f64,
    pub l_er_doc: f64,
    pub l_er_sent: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBundle {
    /// The ER term that entered `total` for `phase`.
    pub fn l_er(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Teacher => self.l_er_doc,
            Phase::Student => self.l_er_sent,
        }
    }
}

/// Evidence supervision for the pairs of one document.
#[derive(Debug, Clone)]
pub enum EvidenceTargets<T> {
    None,
    /// `(pair row, z over sentences)`.
    Sentences(Vec<(usize, Vec<T>)>),
    /// `(pair row, teacher q over tokens)`.
    Tokens(Vec<(usize, Vec<T>)>),
}

/// Per-document objective: mean ATL over all pairs, mean KL over supervised
/// pairs, combined with weight `lambda`.
pub fn document_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scores: Var,
    p: Var,
    q: Var,
    positives: &[Vec<usize>],
    targets: &EvidenceTargets<T>,
    lambda: T,
) -> Result<(Var, LossBundle)> {
    let atl = atl_loss(tape, scores, positives)?;
    let l_re = tape.mean(atl, 0)?;
    let mut bundle = LossBundle {
        l_re: tape.scalar(l_re).as_f64(),
        l_er_doc: 0.0,
        l_er_sent: 0.0,
        total: 0.0,
        lambda: lambda.as_f64(),
    };
    let (rows, src, width) = match targets {
        EvidenceTargets::None => (&[][..], p, 0),
        EvidenceTargets::Sentences(r) => (r.as_slice(), p, tape.shape(p)[1]),
        EvidenceTargets::Tokens(r) => (r.as_slice(), q, tape.shape(q)[1]),
    };
    let l_er = if rows.is_empty() {
        None
    } else {
        let idx: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let mut flat = Vec::with_capacity(rows.len() * width);
        for (pair, t) in rows {
            if t.len() != width {
                return Err(Error::Pipeline(format!(
                    "evidence target for pair row {pair} has length {}, expected {width}",
                    t.len()
                )));
            }
            flat.extend_from_slice(t);
        }
        let target = tape.constant(vec![rows.len(), width], flat)?;
        let pred = tape.gather_rows(src, &idx)?;
        let kl = match targets {
            EvidenceTargets::Tokens(_) => er_sent_loss(tape, target, pred)?,
            _ => er_doc_loss(tape, target, pred)?,
        };
        let m = tape.mean(kl, 0)?;
        match targets {
            EvidenceTargets::Tokens(_) => bundle.l_er_sent = tape.scalar(m).as_f64(),
            _ => bundle.l_er_doc = tape.scalar(m).as_f64(),
        }
        Some(m)
    };
    let total = total_loss(tape, l_re, l_er, lambda)?;
    bundle.total = tape.scalar(total).as_f64();
    Ok((total, bundle))
}
