//! Evaluation of a trained model over a benchmark split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::interpreter::{CurriculumConstraints, ExecCache};
use crate::kbstore::{KnowledgeBase, Value, ValueSet};
use crate::learning::{parallel_map, PreparedExample};
use crate::nn::{EncodedQuestion, Model, NnError};
use crate::search::beam_decode;

fn precision_recall(pred: &ValueSet, gold: &ValueSet) -> (f64, f64) {
    if pred.is_empty() || gold.is_empty() {
        return (0.0, 0.0);
    }
    let overlap = pred.intersection(gold).count() as f64;
    (overlap / pred.len() as f64, overlap / gold.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    /// Canonical text of the top decoded program, if any.
    pub program: Option<String>,
    pub predicted: Vec<Value>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Expression count of the decoded program (0 when nothing decoded).
    pub complexity: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    pub avg_f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub avg_f1: f64,
    /// Fraction of questions answered exactly (F1 = 1).
    pub accuracy: f64,
    /// Keyed by decoded expression count: "0", "1", "2", "3+".
    pub per_complexity: BTreeMap<String, BucketStats>,
    pub per_question: Vec<QuestionResult>,
}

fn bucket_key(complexity: usize) -> String {
    if complexity >= 3 {
        "3+".to_string()
    } else {
        complexity.to_string()
    }
}

/// Decodes every question with the given beam and scores the top program's
/// denotation against gold. Averages are macro (per question); an empty
/// prediction scores zero precision and recall.
pub fn evaluate(
    model: &Model,
    kb: &KnowledgeBase,
    data: &[PreparedExample],
    constraints: &CurriculumConstraints,
    beam: usize,
    max_tokens: usize,
    workers: usize,
) -> Result<EvalReport, NnError> {
    let decoded = parallel_map(data.len(), workers, |i| {
        let q = EncodedQuestion {
            words: data[i].words.clone(),
            spans: data[i].spans.clone(),
        };
        let mut cache = ExecCache::default();
        beam_decode(model, kb, &q, beam.max(1), constraints, max_tokens, &mut cache)
    });

    let mut per_question = Vec::with_capacity(data.len());
    let (mut sum_p, mut sum_r, mut sum_f1, mut exact) = (0.0, 0.0, 0.0, 0usize);
    let mut buckets: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (ex, result) in data.iter().zip(decoded) {
        let beam = result?;
        let (program, predicted, complexity) = match beam.first() {
            Some(best) => (
                Some(best.program.text()),
                best.denotation.clone(),
                best.program.num_expressions(),
            ),
            None => (None, ValueSet::new(), 0),
        };
        let (p, r) = precision_recall(&predicted, &ex.answer);
        let f1 = crate::learning::reward_f1(&predicted, &ex.answer);
        sum_p += p;
        sum_r += r;
        sum_f1 += f1;
        if f1 == 1.0 {
            exact += 1;
        }
        let slot = buckets.entry(bucket_key(complexity)).or_default();
        slot.0 += 1;
        slot.1 += f1;
        per_question.push(QuestionResult {
            id: ex.id.clone(),
            program,
            predicted: predicted.into_iter().collect(),
            precision: p,
            recall: r,
            f1,
            complexity,
        });
    }
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        avg_precision: sum_p / n,
        avg_recall: sum_r / n,
        avg_f1: sum_f1 / n,
        accuracy: exact as f64 / n,
        per_complexity: buckets
            .into_iter()
            .map(|(k, (count, f1))| {
                (
                    k,
                    BucketStats {
                        count,
                        avg_f1: f1 / count as f64,
                    },
                )
            })
            .collect(),
        per_question,
    })
}
