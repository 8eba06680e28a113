use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CorpusError, Dataset, Document, Entity, Mention, RelationFact, RelationVocab, NA_NAME};
use crate::Error;

#[derive(Serialize)]
struct RawMentionOut<'a> {
    name: &'a str,
    sent_id: usize,
    pos: [usize; 2],
    #[serde(rename = "type")]
    entity_type: &'a str,
}

#[derive(Serialize)]
struct RawLabelOut<'a> {
    h: usize,
    t: usize,
    r: &'a str,
    evidence: &'a [usize],
}

#[derive(Serialize)]
struct RawDocOut<'a> {
    title: &'a str,
    sents: &'a [Vec<String>],
    #[serde(rename = "vertexSet")]
    vertex_set: Vec<Vec<RawMentionOut<'a>>>,
    labels: Vec<RawLabelOut<'a>>,
}

#[derive(Deserialize)]
struct RawMention {
    name: String,
    sent_id: usize,
    pos: Vec<usize>,
    #[serde(rename = "type", default)]
    entity_type: String,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, doc: usize, name: &str) -> Result<&'a Value, CorpusError> {
    obj.get(name).ok_or_else(|| CorpusError::Malformed {
        doc,
        field: name.to_string(),
        message: "missing".into(),
    })
}

fn malformed(doc: usize, field: impl Into<String>, message: impl ToString) -> CorpusError {
    CorpusError::Malformed {
        doc,
        field: field.into(),
        message: message.to_string(),
    }
}

fn parse_document(doc: usize, value: &Value, relations: &mut RelationVocab) -> Result<Document, CorpusError> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(doc, "<document>", "expected an object"))?;
    let title = match obj.get("title") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed(doc, "title", "expected a string")),
        None => String::new(),
    };
    let sentences: Vec<Vec<String>> =
        serde_json::from_value(field(obj, doc, "sents")?.clone()).map_err(|e| malformed(doc, "sents", e))?;
    let raw_entities: Vec<Vec<RawMention>> = serde_json::from_value(field(obj, doc, "vertexSet")?.clone())
        .map_err(|e| malformed(doc, "vertexSet", e))?;
    let mut entities = Vec::with_capacity(raw_entities.len());
    for (ei, raw) in raw_entities.into_iter().enumerate() {
        let entity_type = raw.first().map(|m| m.entity_type.clone()).unwrap_or_default();
        let mut mentions = Vec::with_capacity(raw.len());
        for m in raw {
            if m.pos.len() != 2 {
                return Err(malformed(
                    doc,
                    format!("vertexSet[{ei}].pos"),
                    format!("expected [start, end], got {:?}", m.pos),
                ));
            }
            mentions.push(Mention {
                sent_id: m.sent_id,
                span: (m.pos[0], m.pos[1]),
                name: m.name,
            });
        }
        entities.push(Entity {
            mentions,
            entity_type,
        });
    }

    let mut facts = Vec::new();
    if let Some(labels) = obj.get("labels") {
        let labels = labels
            .as_array()
            .ok_or_else(|| malformed(doc, "labels", "expected an array"))?;
        for (li, label) in labels.iter().enumerate() {
            let lo = label
                .as_object()
                .ok_or_else(|| malformed(doc, format!("labels[{li}]"), "expected an object"))?;
            let index = |key: &str| -> Result<usize, CorpusError> {
                lo.get(key)
                    .and_then(Value::as_u64)
                    .map(|v| v as usize)
                    .ok_or_else(|| malformed(doc, format!("labels[{li}].{key}"), "expected a non-negative integer"))
            };
            let head = index("h")?;
            let tail = index("t")?;
            let relation = match lo.get("r") {
                Some(Value::String(s)) if s == NA_NAME => {
                    return Err(malformed(doc, format!("labels[{li}].r"), "NA cannot be a stored fact"))
                }
                Some(Value::String(s)) => relations.intern(s),
                _ => return Err(malformed(doc, format!("labels[{li}].r"), "expected a relation name")),
            };
            let mut evidence: Vec<usize> = match lo.get("evidence") {
                None | Some(Value::Null) => Vec::new(),
                Some(v) => serde_json::from_value(v.clone())
                    .map_err(|e| malformed(doc, format!("labels[{li}].evidence"), e))?,
            };
            evidence.sort_unstable();
            evidence.dedup();
            facts.push(RelationFact {
                head,
                tail,
                relation,
                evidence,
            });
        }
    }
    let d = Document {
        title,
        sentences,
        entities,
        facts,
    };
    d.validate(doc)?;
    Ok(d)
}

/// Parses a JSON array of DocRED documents. Unseen relation names are
/// registered in `relations`.
pub fn parse_docred(text: &str, relations: &mut RelationVocab) -> Result<Dataset, Error> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::json("<input>", e))?;
    let docs = value
        .as_array()
        .ok_or_else(|| malformed(0, "<root>", "expected a JSON array of documents"))?;
    let documents = docs
        .iter()
        .enumerate()
        .map(|(i, d)| parse_document(i, d, relations))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { documents })
}

pub fn load_docred(path: impl AsRef<Path>, relations: &mut RelationVocab) -> Result<Dataset, Error> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_docred(&text, relations).map_err(|e| match e {
        Error::Json { source, .. } => Error::json(path, source),
        other => other,
    })
}

/// Serializes documents back to the DocRED schema.
pub fn to_docred_json(dataset: &Dataset, relations: &RelationVocab) -> Result<String, Error> {
    let mut out = Vec::with_capacity(dataset.documents.len());
    for (di, d) in dataset.documents.iter().enumerate() {
        let vertex_set = d
            .entities
            .iter()
            .map(|e| {
                e.mentions
                    .iter()
                    .map(|m| RawMentionOut {
                        name: &m.name,
                        sent_id: m.sent_id,
                        pos: [m.span.0, m.span.1],
                        entity_type: &e.entity_type,
                    })
                    .collect()
            })
            .collect();
        let labels = d
            .facts
            .iter()
            .map(|f| {
                let r = relations.name(f.relation).ok_or_else(|| CorpusError::Invalid {
                    doc: di,
                    message: format!("relation id {} has no name", f.relation),
                })?;
                Ok(RawLabelOut {
                    h: f.head,
                    t: f.tail,
                    r,
                    evidence: &f.evidence,
                })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        out.push(RawDocOut {
            title: &d.title,
            sents: &d.sentences,
            vertex_set,
            labels,
        });
    }
    serde_json::to_string(&out).map_err(|e| Error::json("<output>", e))
}

pub fn write_docred(path: impl AsRef<Path>, dataset: &Dataset, relations: &RelationVocab) -> Result<(), Error> {
    let path = path.as_ref();
    let text = to_docred_json(dataset, relations)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Alias of [`write_docred`] named after the round-trip contract
/// `load_docred(emit_docred(ds)) == ds`.
pub fn emit_docred(path: impl AsRef<Path>, dataset: &Dataset, relations: &RelationVocab) -> Result<(), Error> {
    write_docred(path, dataset, relations)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_DOC: &str = r#"[{
        "title": "Doc",
        "sents": [["Alice", "met", "Bob", "."], ["They", "talked", "."], ["Done", "."]],
        "vertexSet": [
            [{"name": "Alice", "sent_id": 0, "pos": [0, 1], "type": "PER"}],
            [{"name": "Bob", "sent_id": 0, "pos": [2, 3], "type": "PER"}]
        ],
        "labels": [{"h": 0, "t": 1, "r": "P1", "evidence": [1, 0]}]
    }]"#;

    #[test]
    fn loads_single_document() {
        let mut rel = RelationVocab::default();
        let ds = parse_docred(ONE_DOC, &mut rel).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.documents[0].facts.len(), 1);
        let f = &ds.documents[0].facts[0];
        assert_eq!((f.head, f.tail, f.relation), (0, 1, 1));
        assert_eq!(f.evidence, vec![0, 1]);
        assert_eq!(rel.name(1), Some("P1"));
    }

    #[test]
    fn missing_evidence_loads_empty() {
        let text = ONE_DOC.replace(r#", "evidence": [1, 0]"#, "");
        let ds = parse_docred(&text, &mut RelationVocab::default()).unwrap();
        assert!(ds.documents[0].facts[0].evidence.is_empty());
    }

    #[test]
    fn entity_out_of_range_is_rejected() {
        let text = ONE_DOC.replace(r#""t": 1"#, r#""t": 9"#);
        let err = parse_docred(&text, &mut RelationVocab::default()).unwrap_err();
        assert!(matches!(err, Error::Corpus(CorpusError::Invalid { doc: 0, .. })), "{err}");
    }

    #[test]
    fn malformed_field_names_document_and_field() {
        let text = ONE_DOC.replace(r#""pos": [2, 3]"#, r#""pos": [2]"#);
        match parse_docred(&text, &mut RelationVocab::default()).unwrap_err() {
            Error::Corpus(CorpusError::Malformed { doc, field, .. }) => {
                assert_eq!(doc, 0);
                assert_eq!(field, "vertexSet[1].pos");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mention_sentence_out_of_range_is_rejected() {
        let text = ONE_DOC.replace(r#""sent_id": 0, "pos": [2, 3]"#, r#""sent_id": 5, "pos": [2, 3]"#);
        assert!(parse_docred(&text, &mut RelationVocab::default()).is_err());
    }

    #[test]
    fn emit_then_load_round_trips() {
        let mut rel = RelationVocab::default();
        let ds = parse_docred(ONE_DOC, &mut rel).unwrap();
        let text = to_docred_json(&ds, &rel).unwrap();
        let mut rel2 = RelationVocab::default();
        let back = parse_docred(&text, &mut rel2).unwrap();
        assert_eq!(back, ds);
        assert_eq!(rel2, rel);
    }
}
