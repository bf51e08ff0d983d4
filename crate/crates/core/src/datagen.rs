//! Synthetic benchmark generation: a random typed KB, template questions
//! with gold answers computed by executing generator-known programs, a
//! surface-form lexicon, and ENT anonymization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpreter::{execute_program, Program, VariableStore};
use crate::kbstore::{KnowledgeBase, Value, ValueSet};

const ENT_TOKEN: &str = "ENT";

// surface-name word pool (entities are two-word combinations)
const NAME_WORDS: &[&str] = &[
    "zor", "mira", "tal", "ken", "vash", "oru", "lin", "dax", "pell", "sura",
    "nim", "gath", "rolo", "yed", "quin", "bren", "sil", "okto", "varn", "hale",
];

// relation words (one per property, also used in question text)
const REL_WORDS: &[&str] = &[
    "capital", "leader", "member", "ally", "port", "river", "anthem", "export",
    "neighbor", "founder", "branch", "patron", "size", "weight", "age", "height",
    "income", "rank", "depth", "score", "length", "budget", "yield", "density",
];

const DOMAIN_WORDS: &[&str] = &["geo", "civic", "trade", "lore"];
const TYPE_WORDS: &[&str] = &["place", "group", "person"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub entities: usize,
    pub properties: usize,
    pub max_out_degree: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            entities: 200,
            properties: 20,
            max_out_degree: 5,
            train: 300,
            valid: 100,
            test: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("benchmark spec sizes must be >= 1")]
    BadSpec,
    #[error("could not satisfy question templates after {0} retries")]
    Unsatisfiable(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

/// Surface text span -> entity id; forms are unique, lowercased,
/// whitespace-tokenized.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Lexicon {
    map: BTreeMap<String, String>,
    max_words: usize,
}

impl Lexicon {
    pub fn insert(&mut self, surface: &str, entity: &str) {
        let norm = surface.to_lowercase();
        self.max_words = self.max_words.max(norm.split_whitespace().count());
        self.map.insert(norm, entity.to_string());
    }

    pub fn get_words(&self, words: &[String]) -> Option<&str> {
        let key = words
            .iter()
            .map(|w| w.to_lowercase())
            .collect::<Vec<_>>()
            .join(" ");
        self.map.get(&key).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.map.iter()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = String::new();
        for (surface, entity) in &self.map {
            out.push_str(surface);
            out.push('\t');
            out.push_str(entity);
            out.push('\n');
        }
        std::fs::write(path, out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GenError> {
        let text = std::fs::read_to_string(path)?;
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (surface, entity) = line
                .split_once('\t')
                .ok_or_else(|| GenError::Format(format!("lexicon line {}: no tab", i + 1)))?;
            lex.insert(surface, entity);
        }
        Ok(lex)
    }
}

/// Greedy longest-match left-to-right entity linking plus ENT anonymization.
/// Each matched word is replaced by the ENT token; spans are inclusive word
/// ranges in the original sequence.
pub fn anonymize_and_link(
    question: &[String],
    lexicon: &Lexicon,
) -> (Vec<String>, Vec<(usize, usize, String)>) {
    let mut words = question.to_vec();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut matched = false;
        let max_len = lexicon.max_words.min(words.len() - i);
        for len in (1..=max_len).rev() {
            if let Some(entity) = lexicon.get_words(&question[i..i + len]) {
                let entity = entity.to_string();
                for w in words.iter_mut().skip(i).take(len) {
                    *w = ENT_TOKEN.to_string();
                }
                spans.push((i, i + len - 1, entity));
                i += len;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    (words, spans)
}

/// One question-answer pair. `gold_program` is generator provenance; the
/// trainer never reads it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub answer: Vec<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<(usize, usize, String)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_program: Option<String>,
}

impl Example {
    pub fn question_words(&self) -> Vec<String> {
        self.question.split_whitespace().map(String::from).collect()
    }

    pub fn answer_set(&self) -> ValueSet {
        self.answer.iter().cloned().collect()
    }
}

pub struct Benchmark {
    pub kb: KnowledgeBase,
    pub lexicon: Lexicon,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub spec: BenchmarkSpec,
}

#[derive(Clone, Copy, PartialEq)]
enum PropKind {
    EntityValued { dst_type: usize },
    NumberValued,
}

struct PropInfo {
    id: String,
    src_type: usize,
    kind: PropKind,
}

const NUM_TYPES: usize = 3;
const RETRY_LIMIT: usize = 200;

pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark, GenError> {
    if spec.entities < NUM_TYPES
        || spec.properties < 4
        || spec.max_out_degree < 1
        || spec.train < 1
        || spec.valid < 1
        || spec.test < 1
    {
        return Err(GenError::BadSpec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // entities: unique two-word surface names, typed round-robin
    let n_pool = NAME_WORDS.len();
    assert!(spec.entities <= n_pool * n_pool, "entity pool exhausted");
    let mut surfaces: Vec<String> = Vec::with_capacity(spec.entities);
    let mut entity_ids: Vec<String> = Vec::with_capacity(spec.entities);
    let mut lexicon = Lexicon::default();
    for i in 0..spec.entities {
        let (a, b) = (NAME_WORDS[i / n_pool], NAME_WORDS[i % n_pool]);
        let surface = format!("{a} {b}");
        let id = format!("m.{a}_{b}");
        lexicon.insert(&surface, &id);
        surfaces.push(surface);
        entity_ids.push(id);
    }
    let etype = |i: usize| i % NUM_TYPES;

    // properties: type-pure object populations, one relation word each
    assert!(spec.properties <= REL_WORDS.len(), "relation pool exhausted");
    let props: Vec<PropInfo> = (0..spec.properties)
        .map(|i| {
            let word = REL_WORDS[i];
            let src_type = rng.gen_range(0..NUM_TYPES);
            let kind = if i % 4 == 3 {
                PropKind::NumberValued
            } else {
                PropKind::EntityValued {
                    dst_type: rng.gen_range(0..NUM_TYPES),
                }
            };
            let domain = DOMAIN_WORDS[i % DOMAIN_WORDS.len()];
            let ty = TYPE_WORDS[src_type];
            PropInfo {
                id: format!("/{domain}/{ty}/{word}"),
                src_type,
                kind,
            }
        })
        .collect();
    let prop_word = |p: &PropInfo| p.id.rsplit('/').next().unwrap().to_string();

    // triples: each subject gets up to max_out_degree distinct properties
    let by_type: Vec<Vec<usize>> = (0..NUM_TYPES)
        .map(|t| (0..spec.entities).filter(|&i| etype(i) == t).collect())
        .collect();
    let mut triples: Vec<(String, String, Value)> = Vec::new();
    for e in 0..spec.entities {
        let mut candidates: Vec<usize> = (0..props.len())
            .filter(|&p| props[p].src_type == etype(e))
            .collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(spec.max_out_degree);
        for p in candidates {
            match props[p].kind {
                PropKind::NumberValued => {
                    let v = rng.gen_range(1..=999) as f64 / 10.0;
                    triples.push((entity_ids[e].clone(), props[p].id.clone(), Value::number(v)));
                }
                PropKind::EntityValued { dst_type } => {
                    let targets = &by_type[dst_type];
                    let fanout = rng.gen_range(1..=3usize);
                    let mut picked = BTreeSet::new();
                    for _ in 0..fanout {
                        picked.insert(targets[rng.gen_range(0..targets.len())]);
                    }
                    for t in picked {
                        triples.push((
                            entity_ids[e].clone(),
                            props[p].id.clone(),
                            Value::entity(entity_ids[t].clone()),
                        ));
                    }
                }
            }
        }
    }
    let kb = KnowledgeBase::from_triples(triples);

    // questions
    let total = spec.train + spec.valid + spec.test;
    let mut examples = Vec::with_capacity(total);
    for qi in 0..total {
        let ex = sample_question(qi, &kb, &surfaces, &entity_ids, &props, prop_word, &mut rng)?;
        examples.push(ex);
    }
    let valid_start = spec.train;
    let test_start = spec.train + spec.valid;
    let test = examples.split_off(test_start);
    let valid = examples.split_off(valid_start);
    let train = examples;

    // generation contract: every gold program executes to the gold answer
    for ex in train.iter().chain(&valid).chain(&test) {
        let words = ex.question_words();
        let (_, spans) = anonymize_and_link(&words, &lexicon);
        let linked =
            VariableStore::from_entity_links(spans.iter().map(|(_, _, e)| e.as_str()));
        let prog = Program::parse(ex.gold_program.as_ref().unwrap()).unwrap();
        let denot = execute_program(&kb, &linked, &prog).expect("gold program executes");
        debug_assert_eq!(denot, ex.answer_set());
    }

    Ok(Benchmark {
        kb,
        lexicon,
        train,
        valid,
        test,
        spec: spec.clone(),
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_question(
    qi: usize,
    kb: &KnowledgeBase,
    surfaces: &[String],
    entity_ids: &[String],
    props: &[PropInfo],
    prop_word: impl Fn(&PropInfo) -> String,
    rng: &mut ChaCha8Rng,
) -> Result<Example, GenError> {
    let id = format!("q{qi:04}");
    for _ in 0..RETRY_LIMIT {
        let template = rng.gen_range(0..100);
        let e = rng.gen_range(0..entity_ids.len());
        let eid = &entity_ids[e];
        let singleton: ValueSet = [Value::entity(eid.clone())].into();
        let Some(eprops) = kb.properties_of(eid) else { continue };
        let eprops: Vec<&String> = eprops.iter().collect();
        let pick = |rng: &mut ChaCha8Rng, list: &[&String]| -> String {
            (*list[rng.gen_range(0..list.len())]).clone()
        };
        let info = |pid: &str| props.iter().find(|p| p.id == pid).unwrap();
        let entity_valued: Vec<&String> = eprops
            .iter()
            .copied()
            .filter(|p| matches!(info(p).kind, PropKind::EntityValued { .. }))
            .collect();

        if template < 40 {
            // 1-hop: "what <p> of <E>"
            let p = pick(rng, &eprops);
            let answer = kb.forward(&singleton, &p);
            if answer.is_empty() {
                continue;
            }
            let question = format!("what {} of {}", prop_word(info(&p)), surfaces[e]);
            return Ok(Example {
                id,
                question,
                answer: answer.into_iter().collect(),
                entities: None,
                gold_program: Some(format!("( Hop R1 {p} ) Return")),
            });
        } else if template < 70 {
            // 2-hop
            if entity_valued.is_empty() {
                continue;
            }
            let p1 = pick(rng, &entity_valued);
            let mid = kb.forward(&singleton, &p1);
            let reach: Vec<String> = kb.reachable_properties(&mid).into_iter().collect();
            if reach.is_empty() {
                continue;
            }
            let p2 = reach[rng.gen_range(0..reach.len())].clone();
            let answer = kb.forward(&mid, &p2);
            if answer.is_empty() {
                continue;
            }
            let question = format!(
                "what {} of {} of {}",
                prop_word(info(&p2)),
                prop_word(info(&p1)),
                surfaces[e]
            );
            return Ok(Example {
                id,
                question,
                answer: answer.into_iter().collect(),
                entities: None,
                gold_program: Some(format!("( Hop R1 {p1} ) ( Hop R2 {p2} ) Return")),
            });
        } else if template < 85 {
            // Filter: "which <p1> of <A> with <p2> <B>"
            if entity_valued.is_empty() {
                continue;
            }
            let p1 = pick(rng, &entity_valued);
            let mid = kb.forward(&singleton, &p1);
            if mid.len() < 2 {
                continue;
            }
            let members: Vec<&Value> = mid.iter().collect();
            let m = members[rng.gen_range(0..members.len())];
            let Value::Entity(mid_ent) = m else { continue };
            let Some(mprops) = kb.properties_of(mid_ent) else { continue };
            let mprops: Vec<&String> = mprops
                .iter()
                .filter(|p| matches!(info(p).kind, PropKind::EntityValued { .. }))
                .collect();
            if mprops.is_empty() {
                continue;
            }
            let p2 = pick(rng, &mprops);
            let objs = kb.objects(mid_ent, &p2).unwrap();
            let targets: Vec<&Value> = objs.iter().collect();
            let Value::Entity(b) = targets[rng.gen_range(0..targets.len())] else {
                continue;
            };
            let b_idx = entity_ids.iter().position(|x| x == b).unwrap();
            let b_set: ValueSet = [Value::entity(b.clone())].into();
            let answer: ValueSet = mid
                .iter()
                .filter(|v| {
                    v.as_entity()
                        .and_then(|ent| kb.objects(ent, &p2))
                        .map(|objs| objs.iter().any(|o| b_set.contains(o)))
                        .unwrap_or(false)
                })
                .cloned()
                .collect();
            if answer.is_empty() {
                continue;
            }
            let question = format!(
                "which {} of {} with {} {}",
                prop_word(info(&p1)),
                surfaces[e],
                prop_word(info(&p2)),
                surfaces[b_idx]
            );
            return Ok(Example {
                id,
                question,
                answer: answer.into_iter().collect(),
                entities: None,
                gold_program: Some(format!("( Hop R1 {p1} ) ( Filter R3 R2 {p2} ) Return")),
            });
        } else {
            // ArgMax / ArgMin over a number-valued property
            if entity_valued.is_empty() {
                continue;
            }
            let p1 = pick(rng, &entity_valued);
            let mid = kb.forward(&singleton, &p1);
            if mid.len() < 2 {
                continue;
            }
            let reach: Vec<String> = kb
                .reachable_properties(&mid)
                .into_iter()
                .filter(|p| info(p).kind == PropKind::NumberValued)
                .collect();
            if reach.is_empty() {
                continue;
            }
            let p2 = reach[rng.gen_range(0..reach.len())].clone();
            let maximize = rng.gen_bool(0.5);
            let func = if maximize { "ArgMax" } else { "ArgMin" };
            let prog_text = format!("( Hop R1 {p1} ) ( {func} R2 {p2} ) Return");
            let prog = Program::parse(&prog_text).unwrap();
            let linked = VariableStore::from_entity_links([entity_ids[e].as_str()]);
            let Ok(answer) = execute_program(kb, &linked, &prog) else { continue };
            if answer.is_empty() {
                continue;
            }
            let adverb = if maximize { "most" } else { "least" };
            let question = format!(
                "which {} of {} has {} {}",
                prop_word(info(&p1)),
                surfaces[e],
                adverb,
                prop_word(info(&p2))
            );
            return Ok(Example {
                id,
                question,
                answer: answer.into_iter().collect(),
                entities: None,
                gold_program: Some(prog_text),
            });
        }
    }
    Err(GenError::Unsatisfiable(RETRY_LIMIT))
}

fn write_jsonl(path: &Path, examples: &[Example]) -> std::io::Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

fn read_jsonl(path: &Path) -> Result<Vec<Example>, GenError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| GenError::Format(e.to_string())))
        .collect()
}

impl Benchmark {
    /// Writes `kb.tsv`, `lexicon.tsv`, the three jsonl splits, and
    /// `spec.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), GenError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut kb_out = String::new();
        for (s, p, o) in self.kb.triples() {
            kb_out.push_str(&format!("{s}\t{p}\t{o}\n"));
        }
        std::fs::write(dir.join("kb.tsv"), kb_out)?;
        self.lexicon.save(dir.join("lexicon.tsv"))?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("valid.jsonl"), &self.valid)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        std::fs::write(
            dir.join("spec.json"),
            serde_json::to_string_pretty(&self.spec).expect("serializable"),
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, GenError> {
        let dir = dir.as_ref();
        let kb = KnowledgeBase::load_triples(dir.join("kb.tsv"))
            .map_err(|e| GenError::Format(e.to_string()))?;
        let lexicon = Lexicon::load(dir.join("lexicon.tsv"))?;
        let spec: BenchmarkSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json"))?)
                .map_err(|e| GenError::Format(e.to_string()))?;
        Ok(Benchmark {
            kb,
            lexicon,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            valid: read_jsonl(&dir.join("valid.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
            spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn anonymize_example() {
        let mut lex = Lexicon::default();
        lex.insert("meg", "m.meg");
        lex.insert("family guy", "m.family_guy");
        let (anon, spans) = anonymize_and_link(&words("who plays meg in family guy"), &lex);
        assert_eq!(anon.join(" "), "who plays ENT in ENT ENT");
        assert_eq!(
            spans,
            vec![
                (2, 2, "m.meg".to_string()),
                (4, 5, "m.family_guy".to_string())
            ]
        );
    }

    #[test]
    fn anonymize_no_match_and_idempotence() {
        let mut lex = Lexicon::default();
        lex.insert("new york", "m.ny");
        let q = words("who governs texas");
        let (anon, spans) = anonymize_and_link(&q, &lex);
        assert_eq!(anon, q);
        assert!(spans.is_empty());

        let (anon, spans) = anonymize_and_link(&words("visit new york today"), &lex);
        let (again, spans2) = anonymize_and_link(&anon, &lex);
        assert_eq!(anon, again);
        assert!(spans2.is_empty());
        assert_eq!(spans, vec![(1, 2, "m.ny".to_string())]);
    }

    #[test]
    fn longest_match_wins() {
        let mut lex = Lexicon::default();
        lex.insert("new york", "m.ny");
        lex.insert("new york city", "m.nyc");
        let (anon, spans) = anonymize_and_link(&words("i love new york city"), &lex);
        assert_eq!(anon.join(" "), "i love ENT ENT ENT");
        assert_eq!(spans, vec![(2, 4, "m.nyc".to_string())]);
    }

    #[test]
    fn benchmark_contract() {
        let spec = BenchmarkSpec {
            entities: 60,
            properties: 12,
            train: 40,
            valid: 10,
            test: 10,
            seed: 5,
            ..Default::default()
        };
        let bench = generate_benchmark(&spec).unwrap();
        let all: Vec<&Example> = bench
            .train
            .iter()
            .chain(&bench.valid)
            .chain(&bench.test)
            .collect();
        assert_eq!(all.len(), 60);
        let ids: BTreeSet<&String> = all.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), 60, "question ids must be distinct");
        let mut multi = 0usize;
        for ex in &all {
            assert!(!ex.answer.is_empty());
            let prog = Program::parse(ex.gold_program.as_ref().unwrap()).unwrap();
            let (_, spans) = anonymize_and_link(&ex.question_words(), &bench.lexicon);
            assert!(!spans.is_empty(), "every question links at least one entity");
            for (_, _, e) in &spans {
                assert!(bench.kb.entities().contains(e));
            }
            let linked =
                VariableStore::from_entity_links(spans.iter().map(|(_, _, e)| e.as_str()));
            let denot = execute_program(&bench.kb, &linked, &prog).unwrap();
            assert_eq!(denot, ex.answer_set());
            if prog.num_expressions() >= 2 {
                multi += 1;
            }
        }
        assert!(
            multi * 100 >= all.len() * 30,
            "only {multi}/60 multi-expression questions"
        );
    }

    #[test]
    fn determinism_and_round_trip() {
        let spec = BenchmarkSpec {
            entities: 30,
            properties: 8,
            train: 10,
            valid: 3,
            test: 3,
            seed: 9,
            ..Default::default()
        };
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        generate_benchmark(&spec).unwrap().save(dir1.path()).unwrap();
        generate_benchmark(&spec).unwrap().save(dir2.path()).unwrap();
        for name in ["kb.tsv", "lexicon.tsv", "train.jsonl", "valid.jsonl", "test.jsonl", "spec.json"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical seeds");
        }
        let loaded = Benchmark::load(dir1.path()).unwrap();
        assert_eq!(loaded.train.len(), 10);
        assert_eq!(loaded.kb.num_triples(), generate_benchmark(&spec).unwrap().kb.num_triples());
    }

    #[test]
    fn out_degree_bounded() {
        let spec = BenchmarkSpec {
            entities: 60,
            properties: 20,
            max_out_degree: 5,
            train: 1,
            valid: 1,
            test: 1,
            seed: 3,
            ..Default::default()
        };
        let bench = generate_benchmark(&spec).unwrap();
        for e in bench.kb.entities() {
            if let Some(props) = bench.kb.properties_of(e) {
                assert!(props.len() <= 5);
            }
        }
    }
}
