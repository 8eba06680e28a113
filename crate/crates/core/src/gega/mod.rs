//! The graph-guided evidence attention chain on top of a context encoder.

mod ops;

pub use ops::{
    attention_concentration, decide_relations, entity_embed, entity_embeddings, multi_graphconv, pair_context,
    pair_signals, relation_scores, select_evidence, transformer_enc, EncStack, PairSignals, TokenLayout,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten, Document, FlatIndex, RelationVocab, Vocabulary};
use crate::encoder::{encode_windowed, EncoderConfig, ToyEncoder, TransformerLayer};
use crate::numerics::{init_uniform, Bound, DiffTensor, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GegaError {
    #[error("entity has no mentions")]
    NoMentions,
    #[error("expected {expected} heads, got {actual}")]
    Heads { expected: usize, actual: usize },
    #[error("graph convolution needs at least one layer")]
    NoGraphLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GegaConfig {
    pub num_heads: usize,
    pub gnn_layers: usize,
    pub enc_layers: usize,
    pub num_class: usize,
    pub num_labels_cap: usize,
    pub evi_thresh: f64,
    /// Number of blocks for the bilinear classifier; `None` picks
    /// `max(d_model / 64, 1)`.
    pub bilinear_groups: Option<usize>,
    pub ffn_dim: usize,
}

impl Default for GegaConfig {
    fn default() -> Self {
        Self {
            num_heads: 2,
            gnn_layers: 2,
            enc_layers: 3,
            num_class: 97,
            num_labels_cap: 4,
            evi_thresh: 0.2,
            bilinear_groups: None,
            ffn_dim: 128,
        }
    }
}

impl GegaConfig {
    pub fn groups(&self, d_model: usize) -> usize {
        self.bilinear_groups.unwrap_or((d_model / 64).max(1))
    }
}

/// Encoder plus chain configuration; everything needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gega: GegaConfig,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let (g, d) = (&self.gega, self.encoder.d_model);
        let err = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if g.num_heads == 0 || d % g.num_heads != 0 {
            return err("num_heads", format!("{} does not divide d_model {d}", g.num_heads));
        }
        if g.gnn_layers == 0 {
            return err("gnn_layers", "must be at least 1".into());
        }
        if g.enc_layers < 3 {
            return err("enc_layers", format!("must be at least 3, got {}", g.enc_layers));
        }
        if g.num_class < 2 {
            return err("num_class", "must be at least 2".into());
        }
        if g.num_labels_cap == 0 {
            return err("num_labels_cap", "must be positive".into());
        }
        if !(0.0..1.0).contains(&g.evi_thresh) {
            return err("evi_thresh", format!("{} outside [0, 1)", g.evi_thresh));
        }
        let groups = g.groups(d);
        if groups == 0 || d % groups != 0 {
            return err("bilinear_groups", format!("{groups} does not divide d_model {d}"));
        }
        if g.ffn_dim == 0 {
            return err("ffn_dim", "must be positive".into());
        }
        Ok(())
    }
}

/// Parameter handles of the chain after the encoder.
#[derive(Debug, Clone)]
pub struct GegaLayers {
    pub concentration_q: Vec<ParamId>,
    pub concentration_k: Vec<ParamId>,
    /// Per head, per sublayer.
    pub graph: Vec<Vec<ParamId>>,
    pub graph_out: ParamId,
    pub enc: Vec<TransformerLayer>,
    pub subject_w: ParamId,
    pub subject_b: ParamId,
    pub object_w: ParamId,
    pub object_b: ParamId,
    pub bilinear_w: ParamId,
    pub bilinear_b: ParamId,
}

/// A full model: configuration, vocabularies and parameters.
#[derive(Debug, Clone)]
pub struct GegaModel<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub relations: RelationVocab,
    pub params: ParamStore<T>,
    pub encoder: ToyEncoder,
    pub layers: GegaLayers,
}

/// Result of one document forward pass.
#[derive(Debug, Clone)]
pub struct DocForward {
    pub flat: FlatIndex,
    /// Ordered `(head, tail)` pairs, row-major.
    pub pairs: Vec<(usize, usize)>,
    /// `pairs x num_class`.
    pub scores: Var,
    pub signals: PairSignals,
}

impl<T: Scalar> GegaModel<T> {
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, relations: RelationVocab) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        if relations.len() > config.gega.num_class {
            return Err(Error::Config(format!(
                "num_class: {} relations (including Na) exceed num_class {}",
                relations.len(),
                config.gega.num_class
            )));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let encoder = ToyEncoder::new(&mut params, &mut rng, config.encoder.clone())?;

        let g = &config.gega;
        let d = config.encoder.d_model;
        let dh = d / g.num_heads;
        let added = ParamGroup::Added;
        let mut param = |params: &mut ParamStore<T>, name: String, shape: Vec<usize>, fan_in: usize| {
            params.add(name, added, init_uniform(&mut rng, shape, fan_in))
        };
        let concentration_q = (0..g.num_heads)
            .map(|i| param(&mut params, format!("gega.concentration.{i}.query"), vec![d, dh], d))
            .collect();
        let concentration_k = (0..g.num_heads)
            .map(|i| param(&mut params, format!("gega.concentration.{i}.key"), vec![d, dh], d))
            .collect();
        let graph = (0..g.num_heads)
            .map(|i| {
                (0..g.gnn_layers)
                    .map(|l| param(&mut params, format!("gega.graph.{i}.{l}"), vec![dh, dh], dh))
                    .collect()
            })
            .collect();
        let graph_out = param(&mut params, "gega.graph.out".into(), vec![d, d], d);
        let subject_w = param(&mut params, "gega.subject.weight".into(), vec![2 * d, d], 2 * d);
        let subject_b = param(&mut params, "gega.subject.bias".into(), vec![1, d], 2 * d);
        let object_w = param(&mut params, "gega.object.weight".into(), vec![2 * d, d], 2 * d);
        let object_b = param(&mut params, "gega.object.bias".into(), vec![1, d], 2 * d);
        let groups = g.groups(d);
        let k = d / groups;
        let bilinear_w = param(&mut params, "gega.bilinear.weight".into(), vec![groups * k * k, g.num_class], k * k);
        let bilinear_b = params.add(
            "gega.bilinear.bias",
            added,
            DiffTensor::zeros(vec![1, g.num_class])?,
        );
        let enc = (0..g.enc_layers)
            .map(|l| TransformerLayer::new(&mut params, &mut rng, &format!("gega.enc.{l}"), added, d, g.num_heads, g.ffn_dim, false))
            .collect();

        Ok(Self {
            config,
            vocab,
            relations,
            params,
            encoder,
            layers: GegaLayers {
                concentration_q,
                concentration_k,
                graph,
                graph_out,
                enc,
                subject_w,
                subject_b,
                object_w,
                object_b,
                bilinear_w,
                bilinear_b,
            },
        })
    }

    pub fn num_class(&self) -> usize {
        self.config.gega.num_class
    }

    /// Forward pass over one document. Returns `None` for documents with
    /// fewer than two entities.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, doc: &Document) -> Result<Option<DocForward>> {
        let pairs = doc.pairs();
        if pairs.is_empty() {
            return Ok(None);
        }
        let flat = flatten(doc);
        let ids = self.vocab.encode(&flat);
        let out = encode_windowed(&self.encoder, tape, bound, &ids)?;
        let h = out.hidden;
        let l = &self.layers;

        let ents = entity_embeddings(tape, h, &flat.mention_positions)?;
        let wq: Vec<Var> = l.concentration_q.iter().map(|&p| bound.var(p)).collect();
        let wk: Vec<Var> = l.concentration_k.iter().map(|&p| bound.var(p)).collect();
        let adj = attention_concentration(tape, h, &wq, &wk)?;
        let gw: Vec<Vec<Var>> = l.graph.iter().map(|ws| ws.iter().map(|&p| bound.var(p)).collect()).collect();
        let g = multi_graphconv(tape, h, &adj, &gw, bound.var(l.graph_out))?;
        let stack = transformer_enc(tape, bound, &l.enc, g)?;

        let layout = TokenLayout {
            num_tokens: flat.len(),
            sentence_spans: &flat.sentence_spans,
        };
        let signals = pair_signals(tape, stack.attention, &flat.mention_positions, &pairs, layout)?;
        let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let es = tape.gather_rows(ents, &heads)?;
        let eo = tape.gather_rows(ents, &tails)?;
        let cs = pair_context(tape, es, stack.hidden, signals.q, bound.var(l.subject_w), bound.var(l.subject_b))?;
        let co = pair_context(tape, eo, stack.hidden, signals.q, bound.var(l.object_w), bound.var(l.object_b))?;
        let groups = self.config.gega.groups(self.config.encoder.d_model);
        let scores = relation_scores(tape, cs, co, groups, bound.var(l.bilinear_w), bound.var(l.bilinear_b))?;
        Ok(Some(DocForward {
            flat,
            pairs,
            scores,
            signals,
        }))
    }
}

#[cfg(test)]
mod tests;
