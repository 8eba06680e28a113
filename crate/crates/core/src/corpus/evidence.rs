use super::CorpusError;
use crate::scalar::Scalar;

/// Normalized evidence indicator for one entity pair.
///
/// Sentences are marked if they are evidence for any of the pair's gold
/// relations (union over `evidence_lists`), and the indicator is divided by
/// its sum. Returns `Ok(None)` when the pair has no evidence at all.
pub fn evidence_vector<T: Scalar>(
    evidence_lists: &[&[usize]],
    num_sentences: usize,
) -> Result<Option<Vec<T>>, CorpusError> {
    if num_sentences == 0 {
        return Err(CorpusError::NoSentences);
    }
    let mut marked = vec![false; num_sentences];
    for &s in evidence_lists.iter().flat_map(|l| l.iter()) {
        if s >= num_sentences {
            return Err(CorpusError::EvidenceOutOfRange {
                index: s,
                num_sentences,
            });
        }
        marked[s] = true;
    }
    let count = marked.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let w = T::one() / T::from_usize_lossy(count);
    Ok(Some(
        marked
            .into_iter()
            .map(|m| if m { w } else { T::zero() })
            .collect(),
    ))
}
