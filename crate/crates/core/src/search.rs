//! Beam-search decoding constrained by code assistance, plus the per-question
//! pseudo-gold program cache.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::interpreter::{
    CurriculumConstraints, ExecCache, Function, Program, ProgramState, Token,
};
use crate::kbstore::{KnowledgeBase, ValueSet};
use crate::nn::{model::register_result_variable, EncodedQuestion, Model, NnError, NodeId};

pub const DEFAULT_MAX_TOKENS: usize = 30;

/// A finished beam item: the program, its model log-probability, and the
/// denotation computed while decoding it.
#[derive(Clone, Debug)]
pub struct DecodedProgram {
    pub program: Program,
    pub log_prob: f64,
    pub denotation: ValueSet,
}

#[derive(Clone)]
struct Branch {
    state: ProgramState,
    hidden: NodeId,
    last_emb: NodeId,
    keys: Vec<NodeId>,
    log_prob: f64,
    denotation: Option<Arc<ValueSet>>,
    finished: bool,
}

/// Standard beam search over the valid-token sets. Expression results are
/// executed as soon as `)` is emitted, registering a result variable keyed
/// by the decoder hidden state at that step. Deterministic: ties at equal
/// log-probability break lexicographically on the token sequence.
///
/// Returns up to `k` distinct finished programs, best first. The worst case
/// is the `Return`-only program, so the result is never empty.
pub fn beam_decode(
    model: &Model,
    kb: &KnowledgeBase,
    question: &EncodedQuestion,
    k: usize,
    constraints: &CurriculumConstraints,
    max_tokens: usize,
    exec_cache: &mut ExecCache,
) -> Result<Vec<DecodedProgram>, NnError> {
    assert!(k >= 1);
    let mut sess = model.encode(question, false, 0)?;
    let root = Branch {
        state: ProgramState::new(question.linked_store()),
        hidden: sess.dec_init,
        last_emb: sess.go_emb,
        keys: sess.base_keys.clone(),
        log_prob: 0.0,
        denotation: None,
        finished: false,
    };
    // worst-case tokens for one more expression plus the closing Return
    let expr_budget = if constraints.allowed_functions.contains(&Function::Filter) {
        7
    } else {
        6
    };

    let mut beam = vec![root];
    for _ in 0..=max_tokens {
        if beam.iter().all(|b| b.finished) {
            break;
        }
        let mut next: Vec<Branch> = Vec::new();
        for branch in &beam {
            if branch.finished {
                next.push(branch.clone());
                continue;
            }
            let mut valid: Vec<Token> = branch
                .state
                .valid_tokens(kb, constraints)
                .into_iter()
                .collect();
            if branch.state.tokens().len() + expr_budget > max_tokens {
                valid.retain(|t| *t != Token::Open);
            }
            debug_assert!(!valid.is_empty(), "code assistance left no valid token");
            let out = sess.decode_step(branch.hidden, branch.last_emb, &branch.keys, &valid)?;
            for (token, p) in valid.iter().zip(&out.probs) {
                let mut child = branch.clone();
                child.log_prob += p.max(f64::MIN_POSITIVE).ln();
                child.hidden = out.hidden;
                let executed = child
                    .state
                    .advance(kb, token, constraints, Some(exec_cache))
                    .expect("token came from valid_tokens");
                if let Some(result) = executed {
                    register_result_variable(&mut child.keys, out.hidden);
                    child.denotation = Some(result);
                }
                debug_assert_eq!(child.keys.len(), child.state.store().len());
                if *token == Token::Return {
                    child.finished = true;
                } else {
                    child.last_emb = sess.token_embedding(token, &child.keys)?;
                }
                next.push(child);
            }
        }
        next.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| a.state.tokens().cmp(b.state.tokens()))
        });
        next.truncate(k);
        beam = next;
    }

    let mut seen: BTreeMap<String, DecodedProgram> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for branch in beam.into_iter().filter(|b| b.finished) {
        let program = branch.state.program();
        let text = program.text();
        if !seen.contains_key(&text) {
            order.push(text.clone());
            seen.insert(
                text,
                DecodedProgram {
                    program,
                    log_prob: branch.log_prob,
                    denotation: branch
                        .denotation
                        .map(|d| (*d).clone())
                        .unwrap_or_default(),
                },
            );
        }
    }
    Ok(order.into_iter().map(|t| seen.remove(&t).unwrap()).collect())
}

/// Best program found so far for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub program: Program,
    pub reward: f64,
    pub length: usize,
}

/// Per-question best-program cache. Entries exist only with strictly
/// positive reward; replacement requires strictly higher reward, or equal
/// reward with strictly shorter length.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PseudoGoldCache {
    entries: BTreeMap<String, CacheEntry>,
}

impl PseudoGoldCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, question_id: &str) -> Option<&CacheEntry> {
        self.entries.get(question_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &CacheEntry)> {
        self.entries.iter()
    }

    /// Applies the improvement rule for each candidate. Returns true when
    /// the stored entry changed.
    pub fn update(&mut self, question_id: &str, candidates: &[(Program, f64)]) -> bool {
        let mut changed = false;
        for (program, reward) in candidates {
            if *reward <= 0.0 {
                continue;
            }
            let length = program.tokens.len();
            let better = match self.entries.get(question_id) {
                None => true,
                Some(cur) => {
                    *reward > cur.reward || (*reward == cur.reward && length < cur.length)
                }
            };
            if better {
                self.entries.insert(
                    question_id.to_string(),
                    CacheEntry {
                        program: program.clone(),
                        reward: *reward,
                        length,
                    },
                );
                changed = true;
            }
        }
        changed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::execute_program;
    use crate::kbstore::Value;
    use crate::nn::{ModelConfig, WordVocab};
    use std::collections::BTreeSet;

    fn kb0() -> KnowledgeBase {
        KnowledgeBase::from_triples([
            ("USA".into(), "city".into(), Value::entity("NYC")),
            ("USA".into(), "city".into(), Value::entity("SF")),
            ("NYC".into(), "pop".into(), Value::number(8.6)),
            ("SF".into(), "pop".into(), Value::number(0.9)),
            ("USA".into(), "capital".into(), Value::entity("DC")),
        ])
    }

    fn model() -> Model {
        let vocab = WordVocab::random(["who", "city", "of"].map(String::from), 8, 1);
        Model::new(
            ModelConfig {
                d_word: 8,
                d_hidden: 8,
                dropout: 0.5,
            },
            vocab,
            &BTreeSet::from(["city".to_string(), "pop".to_string(), "capital".to_string()]),
            2,
        )
    }

    fn question() -> EncodedQuestion {
        EncodedQuestion {
            words: ["who", "city", "of", "ENT"].map(String::from).to_vec(),
            spans: vec![(3, 3, "USA".to_string())],
        }
    }

    #[test]
    fn all_decoded_programs_execute() {
        let model = model();
        let kb = kb0();
        let c = CurriculumConstraints::unrestricted(3);
        let mut cache = ExecCache::new();
        let beams =
            beam_decode(&model, &kb, &question(), 20, &c, DEFAULT_MAX_TOKENS, &mut cache).unwrap();
        assert!(!beams.is_empty());
        let linked = question().linked_store();
        for b in &beams {
            let denot = execute_program(&kb, &linked, &b.program).unwrap();
            assert_eq!(denot, b.denotation);
            assert!(b.log_prob <= 0.0);
        }
        // distinct programs, sorted by log_prob descending
        let texts: BTreeSet<String> = beams.iter().map(|b| b.program.text()).collect();
        assert_eq!(texts.len(), beams.len());
        for w in beams.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
    }

    #[test]
    fn beam_is_deterministic() {
        let model = model();
        let kb = kb0();
        let c = CurriculumConstraints::unrestricted(3);
        let a = beam_decode(&model, &kb, &question(), 10, &c, 30, &mut ExecCache::new()).unwrap();
        let b = beam_decode(&model, &kb, &question(), 10, &c, 30, &mut ExecCache::new()).unwrap();
        let pa: Vec<(String, u64)> = a
            .iter()
            .map(|d| (d.program.text(), d.log_prob.to_bits()))
            .collect();
        let pb: Vec<(String, u64)> = b
            .iter()
            .map(|d| (d.program.text(), d.log_prob.to_bits()))
            .collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn wide_beam_returns_many_distinct_programs() {
        let model = model();
        let kb = kb0();
        let c = CurriculumConstraints::unrestricted(3);
        let beams = beam_decode(&model, &kb, &question(), 100, &c, 30, &mut ExecCache::new())
            .unwrap();
        assert!(beams.len() >= 50, "only {} programs", beams.len());
    }

    #[test]
    fn max_expressions_zero_returns_only() {
        let model = model();
        let kb = kb0();
        let c = CurriculumConstraints::unrestricted(0);
        let beams =
            beam_decode(&model, &kb, &question(), 5, &c, 30, &mut ExecCache::new()).unwrap();
        assert_eq!(beams.len(), 1);
        assert_eq!(beams[0].program.text(), "Return");
        assert!(beams[0].denotation.is_empty());
    }

    fn prog(text: &str) -> Program {
        Program::parse(text).unwrap()
    }

    #[test]
    fn cache_ignores_zero_reward() {
        let mut cache = PseudoGoldCache::new();
        assert!(!cache.update("q1", &[(prog("Return"), 0.0)]));
        assert!(cache.is_empty());
    }

    #[test]
    fn cache_prefers_shorter_at_equal_reward() {
        let mut cache = PseudoGoldCache::new();
        cache.update("q1", &[(prog("( Hop R1 city ) ( Hop R2 pop ) Return"), 0.5)]);
        assert!(cache.update("q1", &[(prog("( Hop R1 city ) Return"), 0.5)]));
        assert_eq!(cache.get("q1").unwrap().length, 6);
        // equal reward and length: incumbent kept
        assert!(!cache.update("q1", &[(prog("( Hop R1 capital ) Return"), 0.5)]));
        assert_eq!(cache.get("q1").unwrap().program, prog("( Hop R1 city ) Return"));
    }

    #[test]
    fn cache_reward_dominates_length() {
        let mut cache = PseudoGoldCache::new();
        cache.update("q1", &[(prog("( Hop R1 city ) ( Hop R2 pop ) Return"), 0.8)]);
        assert!(!cache.update("q1", &[(prog("Return"), 0.5)]));
        assert_eq!(cache.get("q1").unwrap().reward, 0.8);
        assert!(cache.update("q1", &[(prog("( Hop R1 city ) Return"), 0.9)]));
    }
}
