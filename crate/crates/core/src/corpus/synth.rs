use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Document, Entity, Mention, RelationFact, RelationVocab};

/// Parameters of a planted-relation corpus.
///
/// Every fact `(h, t, r)` is signaled by exactly one evidence sentence that
/// contains a mention of `h`, then the trigger word of `r`, then a mention of
/// `t`, and no other entity mention. Trigger words appear nowhere else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_docs: usize,
    pub vocab_size: usize,
    pub num_relation_types: usize,
    pub sentences_per_doc: usize,
    pub entities_per_doc: usize,
    pub facts_per_doc: usize,
    pub sentence_len: usize,
    pub num_class: usize,
    /// Probability that a planted fact is missing from the labels.
    pub drop_rate: f64,
    /// Probability per document of one spurious label on a non-fact pair.
    pub spurious_rate: f64,
    /// Whether labels carry their evidence sentence.
    pub with_evidence: bool,
    pub title_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_docs: 50,
            vocab_size: 200,
            num_relation_types: 4,
            sentences_per_doc: 4,
            entities_per_doc: 4,
            facts_per_doc: 2,
            sentence_len: 6,
            num_class: 97,
            drop_rate: 0.0,
            spurious_rate: 0.0,
            with_evidence: true,
            title_prefix: "synth".into(),
        }
    }
}

/// Relation map `Na, R1, ..., Rk` matching [`generate_synthetic`] ids.
pub fn synthetic_relations(num_relation_types: usize) -> RelationVocab {
    RelationVocab::from_names((1..=num_relation_types).map(|r| format!("R{r}")).collect())
}

const MIN_FILLERS: usize = 8;

struct Lexicon {
    triggers: Vec<String>,
    names: Vec<String>,
    fillers: Vec<String>,
}

impl SynthSpec {
    fn check(&self) -> Result<Lexicon, CorpusError> {
        let bad = |m: String| Err(CorpusError::Synth(m));
        if self.num_docs == 0
            || self.vocab_size == 0
            || self.num_relation_types == 0
            || self.sentences_per_doc == 0
            || self.entities_per_doc == 0
        {
            return bad("num_docs, vocab_size, num_relation_types, sentences_per_doc and entities_per_doc must be positive".into());
        }
        if self.entities_per_doc < 2 {
            return bad("entities_per_doc must be at least 2".into());
        }
        if self.num_relation_types >= self.num_class {
            return bad(format!(
                "{} relation types do not fit in {} classes (class 0 is NA)",
                self.num_relation_types, self.num_class
            ));
        }
        if self.facts_per_doc >= self.sentences_per_doc {
            return bad(format!(
                "facts_per_doc ({}) must be below sentences_per_doc ({}) so unrelated mentions have a sentence",
                self.facts_per_doc, self.sentences_per_doc
            ));
        }
        let max_pairs = self.entities_per_doc * (self.entities_per_doc - 1) / 2;
        if self.facts_per_doc > max_pairs {
            return bad(format!("facts_per_doc exceeds the {max_pairs} unordered entity pairs"));
        }
        if self.entities_per_doc > (self.sentences_per_doc - self.facts_per_doc) * self.sentence_len {
            return bad("too many entities to place one mention each outside evidence sentences".into());
        }
        if self.sentence_len < 4 {
            return bad("sentence_len must be at least 4".into());
        }
        if !(0.0..=1.0).contains(&self.drop_rate) || !(0.0..=1.0).contains(&self.spurious_rate) {
            return bad("drop_rate and spurious_rate must lie in [0, 1]".into());
        }
        let k = self.num_relation_types;
        let name_pool = (2 * self.entities_per_doc).max(self.vocab_size.saturating_sub(k) / 4);
        let needed = k + name_pool + MIN_FILLERS;
        if self.vocab_size < needed {
            return bad(format!(
                "vocabulary of {} words cannot hold {k} triggers, {name_pool} names and {MIN_FILLERS} fillers without collisions",
                self.vocab_size
            ));
        }
        let fillers = self.vocab_size - k - name_pool;
        Ok(Lexicon {
            triggers: (0..k).map(|i| format!("t{i}")).collect(),
            names: (0..name_pool).map(|i| format!("e{i}")).collect(),
            fillers: (0..fillers).map(|i| format!("w{i}")).collect(),
        })
    }
}

/// Generates a planted corpus. The same spec always yields the same corpus.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset, CorpusError> {
    let lex = spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let documents = (0..spec.num_docs)
        .map(|i| generate_document(spec, &lex, &mut rng, i))
        .collect();
    Ok(Dataset { documents })
}

fn generate_document(spec: &SynthSpec, lex: &Lexicon, rng: &mut ChaCha8Rng, index: usize) -> Document {
    let (n_sent, n_ent, len) = (spec.sentences_per_doc, spec.entities_per_doc, spec.sentence_len);
    let mut sentences: Vec<Vec<String>> = (0..n_sent)
        .map(|_| (0..len).map(|_| lex.fillers.choose(rng).unwrap().clone()).collect())
        .collect();
    let names: Vec<String> = lex.names.choose_multiple(rng, n_ent).cloned().collect();
    let mut entities: Vec<Entity> = names
        .iter()
        .map(|_| Entity {
            mentions: Vec::new(),
            entity_type: "ENT".into(),
        })
        .collect();

    let mut sent_order: Vec<usize> = (0..n_sent).collect();
    sent_order.shuffle(rng);
    let (evidence_sents, free_sents) = sent_order.split_at(spec.facts_per_doc);
    let mut occupied: Vec<Vec<bool>> = vec![vec![false; len]; n_sent];

    let mut unordered: Vec<(usize, usize)> = (0..n_ent)
        .flat_map(|a| (a + 1..n_ent).map(move |b| (a, b)))
        .collect();
    unordered.shuffle(rng);

    let mut planted = Vec::new();
    for (&(a, b), &s) in unordered.iter().zip(evidence_sents) {
        let (h, t) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        let r = rng.gen_range(0..spec.num_relation_types);
        let mut slots: Vec<usize> = rand::seq::index::sample(rng, len, 3).into_vec();
        slots.sort_unstable();
        sentences[s][slots[0]] = names[h].clone();
        sentences[s][slots[1]] = lex.triggers[r].clone();
        sentences[s][slots[2]] = names[t].clone();
        for &x in &slots {
            occupied[s][x] = true;
        }
        entities[h].mentions.push(Mention {
            sent_id: s,
            span: (slots[0], slots[0] + 1),
            name: names[h].clone(),
        });
        entities[t].mentions.push(Mention {
            sent_id: s,
            span: (slots[2], slots[2] + 1),
            name: names[t].clone(),
        });
        planted.push(RelationFact {
            head: h,
            tail: t,
            relation: r + 1,
            evidence: vec![s],
        });
    }

    // Every entity gets a mention outside the evidence sentences: always for
    // entities not yet mentioned, with probability 1/2 otherwise.
    for e in 0..n_ent {
        if !entities[e].mentions.is_empty() && !rng.gen_bool(0.5) {
            continue;
        }
        let s = *free_sents.choose(rng).unwrap();
        let mut free: Vec<(usize, usize)> = (0..len).filter(|&x| !occupied[s][x]).map(|x| (s, x)).collect();
        if free.is_empty() {
            free = free_sents
                .iter()
                .flat_map(|&s| (0..len).map(move |x| (s, x)))
                .filter(|&(s, x)| !occupied[s][x])
                .collect();
        }
        let Some(&(s, x)) = free.choose(rng) else {
            continue;
        };
        occupied[s][x] = true;
        sentences[s][x] = names[e].clone();
        entities[e].mentions.push(Mention {
            sent_id: s,
            span: (x, x + 1),
            name: names[e].clone(),
        });
    }
    for e in &mut entities {
        e.mentions.sort_by_key(|m| (m.sent_id, m.span));
    }

    let mut facts: Vec<RelationFact> = planted
        .into_iter()
        .filter(|_| !(spec.drop_rate > 0.0 && rng.gen_bool(spec.drop_rate)))
        .collect();
    if spec.spurious_rate > 0.0 && rng.gen_bool(spec.spurious_rate) {
        let taken: Vec<(usize, usize)> = facts.iter().map(|f| (f.head, f.tail)).collect();
        let candidates: Vec<(usize, usize)> = (0..n_ent)
            .flat_map(|h| (0..n_ent).filter(move |&t| t != h).map(move |t| (h, t)))
            .filter(|p| !taken.contains(p))
            .collect();
        if let Some(&(h, t)) = candidates.choose(rng) {
            facts.push(RelationFact {
                head: h,
                tail: t,
                relation: rng.gen_range(1..=spec.num_relation_types),
                evidence: Vec::new(),
            });
        }
    }
    if !spec.with_evidence {
        facts.iter_mut().for_each(|f| f.evidence.clear());
    }
    facts.sort_by_key(|f| (f.head, f.tail, f.relation));

    Document {
        title: format!("{}-{}-{index}", spec.title_prefix, spec.seed),
        sentences,
        entities,
        facts,
    }
}
