//! JSON-lines persistence for datasets, pairs, estimates, and attributions.
//!
//! Every artifact is one JSON object per line, so files stream, diff, and
//! concatenate cleanly. Pairs are stored by example id and re-resolved
//! against a dataset on load — the examples file (bases plus any derived
//! counterfactuals) is the single source of token data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionTable;
use crate::error::{CoreError, Result};
use crate::explain::EffectVector;
use crate::scm::{example_index, CounterfactualPair, Example, InterventionDescriptor, PairKind};

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| CoreError::io_at(path, e))?);
    for item in items {
        let line = serde_json::to_string(&item)
            .map_err(|e| CoreError::Format(format!("cannot serialize record: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).map_err(|e| CoreError::io_at(path, e))?);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            CoreError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    write_lines(path, examples)
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    read_lines(path)
}

/// A counterfactual pair stored by reference into an examples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub base_id: String,
    pub cf_id: String,
    pub concept: usize,
    pub target: crate::scm::ConceptValue,
    pub kind: PairKind,
}

impl PairRecord {
    pub fn from_pair(pair: &CounterfactualPair) -> Self {
        Self {
            base_id: pair.base.id.clone(),
            cf_id: pair.counterfactual.id.clone(),
            concept: pair.edit.concept,
            target: pair.edit.target,
            kind: pair.kind,
        }
    }
}

pub fn write_pairs(path: &Path, pairs: &[CounterfactualPair]) -> Result<()> {
    write_lines(path, pairs.iter().map(PairRecord::from_pair))
}

/// Reads a pairs file and resolves both sides against `examples`. An id
/// that the dataset does not contain is a file-consistency error.
pub fn read_pairs(path: &Path, examples: &[Example]) -> Result<Vec<CounterfactualPair>> {
    let records: Vec<PairRecord> = read_lines(path)?;
    let index = example_index(examples);
    records
        .into_iter()
        .map(|r| {
            let resolve = |id: &str| {
                index.get(id).cloned().ok_or_else(|| {
                    CoreError::Format(format!(
                        "{}: pair references example '{id}' absent from the dataset",
                        path.display()
                    ))
                })
            };
            Ok(CounterfactualPair {
                base: resolve(&r.base_id)?,
                counterfactual: resolve(&r.cf_id)?,
                edit: InterventionDescriptor { concept: r.concept, target: r.target },
                kind: r.kind,
            })
        })
        .collect()
}

/// One explainer's effect estimate for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRecord {
    pub pair_id: String,
    pub explainer: String,
    pub edit: InterventionDescriptor,
    pub delta: EffectVector,
}

pub fn write_estimates(path: &Path, records: &[EstimateRecord]) -> Result<()> {
    write_lines(path, records)
}

pub fn read_estimates(path: &Path) -> Result<Vec<EstimateRecord>> {
    read_lines(path)
}

/// One attribution row flattened for dumping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionRecord {
    pub example_id: String,
    pub predicted_class: usize,
    pub concept: Option<usize>,
    pub score: f64,
    pub token_scores: Vec<f64>,
}

pub fn write_attributions(path: &Path, tables: &[AttributionTable]) -> Result<()> {
    let records = tables.iter().flat_map(|table| {
        table.rows.iter().map(|row| AttributionRecord {
            example_id: table.example_id.clone(),
            predicted_class: table.predicted_class,
            concept: row.concept,
            score: row.score,
            token_scores: row.token_scores.clone(),
        })
    });
    write_lines(path, records)
}

pub fn read_attributions(path: &Path) -> Result<Vec<AttributionRecord>> {
    read_lines(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributionRow;
    use crate::scm::{build_true_pairs, generate_dataset, ConceptValue, ScmConfig};

    fn world() -> (ScmConfig, Vec<Example>, Vec<CounterfactualPair>) {
        let scm = ScmConfig::default();
        let examples = generate_dataset(&scm, 10, 900).unwrap();
        let pairs = build_true_pairs(&examples, &scm).unwrap();
        (scm, examples, pairs)
    }

    #[test]
    fn examples_round_trip_exactly() {
        let (_, examples, _) = world();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("examples.jsonl");
        write_examples(&path, &examples).unwrap();
        let back = read_examples(&path).unwrap();
        assert_eq!(examples, back);
    }

    #[test]
    fn pairs_round_trip_through_id_references() {
        let (_, examples, pairs) = world();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&path, &pairs).unwrap();
        // The counterfactual sides are derived examples, so the resolution
        // pool must contain them alongside the bases.
        let mut pool = examples.clone();
        pool.extend(pairs.iter().map(|p| p.counterfactual.clone()));
        let back = read_pairs(&path, &pool).unwrap();
        assert_eq!(pairs, back);
    }

    #[test]
    fn unresolvable_pair_reference_is_a_format_error() {
        let (_, examples, pairs) = world();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pairs(&path, &pairs[..3]).unwrap();
        // Resolving against the bases only: derived counterfactual ids with
        // edits (base != cf) are missing.
        let err = read_pairs(&path, &examples);
        assert!(matches!(err, Err(CoreError::Format(msg)) if msg.contains("absent")));
    }

    #[test]
    fn malformed_lines_name_the_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        std::fs::write(&path, "{\"id\": \"x\"}\nnot json\n").unwrap();
        let err = read_examples(&path);
        match err {
            Err(CoreError::Format(msg)) => {
                assert!(msg.contains("broken.jsonl:1"), "unexpected message: {msg}")
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = read_examples(Path::new("/nonexistent/examples.jsonl"));
        assert!(matches!(err, Err(CoreError::Io(_))));
    }

    #[test]
    fn concept_values_serialize_as_signed_integers() {
        let (_, examples, _) = world();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("examples.jsonl");
        write_examples(&path, &examples[..1]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let concepts = value["concepts"].as_array().unwrap();
        assert_eq!(concepts.len(), examples[0].concepts.len());
        for (json, concept) in concepts.iter().zip(&examples[0].concepts) {
            let expect = match concept {
                ConceptValue::Negative => -1,
                ConceptValue::Unknown => 0,
                ConceptValue::Positive => 1,
            };
            assert_eq!(json.as_i64(), Some(expect));
        }
        for field in ["id", "tokens", "concepts", "label", "u_seed", "v_seed"] {
            assert!(value.get(field).is_some(), "missing field {field}");
        }
    }

    #[test]
    fn estimates_round_trip_with_effect_vectors_as_arrays() {
        let (_, _, pairs) = world();
        let records: Vec<EstimateRecord> = pairs[..4]
            .iter()
            .map(|p| EstimateRecord {
                pair_id: p.pair_id(),
                explainer: "random".into(),
                edit: p.edit,
                delta: EffectVector::between(
                    &[0.3, 0.2, 0.2, 0.2, 0.1],
                    &[0.2, 0.2, 0.2, 0.2, 0.2],
                )
                .unwrap(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("estimates.jsonl");
        write_estimates(&path, &records).unwrap();
        assert_eq!(read_estimates(&path).unwrap(), records);
        let text = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(value["delta"].is_array(), "delta must serialize as a bare array");
        assert_eq!(value["delta"].as_array().unwrap().len(), 5);
    }

    #[test]
    fn attribution_tables_flatten_to_one_row_per_concept() {
        let tables = vec![AttributionTable {
            example_id: "ex000000".into(),
            predicted_class: 3,
            rows: vec![
                AttributionRow {
                    concept: Some(0),
                    target_score: 0.61,
                    score: 1.16,
                    raw_token_scores: vec![0.3, 0.86],
                    token_scores: vec![-1.0, 1.0],
                },
                AttributionRow {
                    concept: Some(1),
                    target_score: 0.61,
                    score: -0.2,
                    raw_token_scores: vec![-0.1, -0.1],
                    token_scores: vec![0.0, 0.0],
                },
            ],
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attributions.jsonl");
        write_attributions(&path, &tables).unwrap();
        let back = read_attributions(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].concept, Some(0));
        assert_eq!(back[0].score, 1.16);
        assert_eq!(back[1].token_scores, vec![0.0, 0.0]);
        assert!(back.iter().all(|r| r.example_id == "ex000000" && r.predicted_class == 3));
    }
}
