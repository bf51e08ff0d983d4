//! Weakly supervised training: iterative maximum likelihood over a
//! pseudo-gold program cache, followed by policy-gradient fine-tuning whose
//! candidate weights are augmented with the cached program.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{anonymize_and_link, Example, Lexicon};
use crate::interpreter::{CurriculumConstraints, ExecCache, Function, Program, Token};
use crate::kbstore::{KnowledgeBase, ValueSet};
use crate::nn::{Model, ModelConfig, NnError};
use crate::search::{beam_decode, CacheEntry, DecodedProgram, PseudoGoldCache};

/// Set-overlap F1 between predicted and gold denotations. An empty
/// prediction scores 0 even when gold is empty.
pub fn reward_f1(pred: &ValueSet, gold: &ValueSet) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let overlap = pred.intersection(gold).count() as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let precision = overlap / pred.len() as f64;
    let recall = overlap / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Iterative ML phase, then policy gradient with cache-augmented weights.
    Augmented,
    /// Iterative ML phase only.
    IterativeMl,
    /// Policy gradient from scratch, no pseudo-gold injection.
    PlainReinforce,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "augmented" => Ok(TrainMode::Augmented),
            "iml" | "iterative-ml" => Ok(TrainMode::IterativeMl),
            "plain" | "plain-reinforce" => Ok(TrainMode::PlainReinforce),
            other => Err(format!("unknown mode {other:?} (augmented|iml|plain)")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Pseudo-gold weight in the policy-gradient candidate distribution.
    pub alpha: f64,
    /// Decode-train iterations in the ML phase (split across stages).
    pub n_ml: usize,
    /// Iterations in the policy-gradient phase.
    pub n_rl: usize,
    /// Beam width for ML-phase exploration decodes.
    pub b_ml: usize,
    /// Beam width for policy-gradient decodes.
    pub b_rl: usize,
    /// ML epochs over the cache per decode sweep.
    pub epochs_per_ml_round: usize,
    pub batch_size: usize,
    /// Learning-rate schedule g_t = g0 * beta^(max(0, t - t_s) / m).
    pub g0: f64,
    pub beta: f64,
    pub m: f64,
    pub t_s: u64,
    /// Policy-gradient iterations at fixed g0 before decay starts.
    pub rl_warm_iterations: usize,
    /// Gradient passes over the decoded beams per policy-gradient
    /// iteration (1 = one update per decode sweep).
    pub rl_updates_per_iteration: usize,
    pub dropout: f64,
    pub d_word: usize,
    pub d_hidden: usize,
    pub seed: u64,
    pub curriculum: bool,
    /// ML iterations spent in the restricted first stage.
    pub stage1_iterations: usize,
    pub max_expressions: usize,
    pub enable_argminmax: bool,
    pub max_tokens: usize,
    /// Beam width for validation decodes in the log.
    pub eval_beam: usize,
    /// Log train/valid F1 every this many iterations (always on the last
    /// iteration of a phase); decodes for the log are the dominant cost of
    /// short iterations.
    pub eval_every: usize,
    /// Policy-gradient base learning rate; falls back to `g0`. The two
    /// phases want different rates: advantage-weighted gradients are an
    /// order of magnitude smaller than likelihood gradients.
    #[serde(default)]
    pub rl_g0: Option<f64>,
    /// Dropout for the re-initialized policy-gradient model; falls back to
    /// `dropout`.
    #[serde(default)]
    pub rl_dropout: Option<f64>,
    /// Batch size for policy-gradient updates; falls back to `batch_size`.
    #[serde(default)]
    pub rl_batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            n_ml: 12,
            n_rl: 6,
            b_ml: 32,
            b_rl: 5,
            epochs_per_ml_round: 8,
            batch_size: 32,
            g0: 0.001,
            beta: 0.5,
            m: 1000.0,
            t_s: 0,
            rl_warm_iterations: 200,
            rl_updates_per_iteration: 1,
            dropout: 0.5,
            d_word: 16,
            d_hidden: 16,
            seed: 0,
            curriculum: true,
            stage1_iterations: 10,
            max_expressions: 3,
            enable_argminmax: true,
            max_tokens: 30,
            eval_beam: 1,
            eval_every: 1,
            rl_g0: None,
            rl_dropout: None,
            rl_batch_size: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_word: self.d_word,
            d_hidden: self.d_hidden,
            dropout: self.dropout,
        }
    }

    /// Model configuration for the policy-gradient phase's fresh parameters.
    pub fn rl_model_config(&self) -> ModelConfig {
        ModelConfig {
            d_word: self.d_word,
            d_hidden: self.d_hidden,
            dropout: self.rl_dropout.unwrap_or(self.dropout),
        }
    }

    fn allowed_functions(&self) -> Vec<Function> {
        let mut funcs = vec![Function::Hop, Function::Filter];
        if self.enable_argminmax {
            funcs.push(Function::ArgMax);
            funcs.push(Function::ArgMin);
        }
        funcs
    }
}

/// g_t = g0 * beta^(max(0, t - t_s) / m)
pub fn lr_at(t: u64, cfg: &TrainConfig) -> f64 {
    let excess = t.saturating_sub(cfg.t_s) as f64;
    cfg.g0 * cfg.beta.powf(excess / cfg.m)
}

/// Normalized candidate weights for the policy gradient. Beam
/// probabilities are renormalized to sum to one; when a pseudo-gold
/// candidate is designated and `alpha > 0`, the distribution is scaled by
/// `1 - alpha` and the pseudo-gold receives an extra `alpha`.
pub fn reinforce_weights(probs: &[f64], pseudo_gold: Option<usize>, alpha: f64) -> Vec<f64> {
    let total: f64 = probs.iter().sum();
    let mut weights: Vec<f64> = if total > 0.0 {
        probs.iter().map(|p| p / total).collect()
    } else if probs.is_empty() {
        Vec::new()
    } else {
        vec![1.0 / probs.len() as f64; probs.len()]
    };
    if alpha > 0.0 {
        if let Some(idx) = pseudo_gold {
            for w in weights.iter_mut() {
                *w *= 1.0 - alpha;
            }
            weights[idx] += alpha;
        }
    }
    weights
}

/// B(x) = sum_j w_j * R_j
pub fn baseline(weights: &[f64], rewards: &[f64]) -> f64 {
    weights.iter().zip(rewards).map(|(w, r)| w * r).sum()
}

/// One curriculum stage: decode-time constraints, its share of ML
/// iterations, and whether Hop properties are narrowed per question to
/// those used by the previous stage's pseudo-gold program.
#[derive(Clone, Debug)]
pub struct StageSpec {
    pub constraints: CurriculumConstraints,
    pub iterations: usize,
    pub restrict_from_previous: bool,
}

pub fn curriculum_stages(cfg: &TrainConfig) -> Vec<StageSpec> {
    let full = CurriculumConstraints {
        allowed_functions: cfg.allowed_functions().into_iter().collect(),
        max_expressions: cfg.max_expressions,
        allowed_properties: None,
    };
    if !cfg.curriculum {
        return vec![StageSpec {
            constraints: full,
            iterations: cfg.n_ml,
            restrict_from_previous: false,
        }];
    }
    let stage1_iters = cfg.stage1_iterations.min(cfg.n_ml);
    let stage1 = StageSpec {
        constraints: CurriculumConstraints {
            allowed_functions: [Function::Hop].into(),
            max_expressions: cfg.max_expressions.min(2),
            allowed_properties: None,
        },
        iterations: stage1_iters,
        restrict_from_previous: false,
    };
    let stage2 = StageSpec {
        constraints: full,
        iterations: cfg.n_ml - stage1_iters,
        restrict_from_previous: true,
    };
    vec![stage1, stage2]
}

/// A question ready for the model: anonymized words, entity spans, gold
/// denotation. Gold programs in the source examples are never consulted.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub words: Vec<String>,
    pub spans: Vec<(usize, usize, String)>,
    pub answer: ValueSet,
}

pub fn prepare_examples(examples: &[Example], lexicon: &Lexicon) -> Vec<PreparedExample> {
    examples
        .iter()
        .map(|ex| {
            let raw = ex.question_words();
            let (words, spans) = match &ex.entities {
                Some(spans) => {
                    let mut words = raw.clone();
                    for (s, e, _) in spans {
                        for w in words.iter_mut().take(e + 1).skip(*s) {
                            *w = "ENT".to_string();
                        }
                    }
                    (words, spans.clone())
                }
                None => anonymize_and_link(&raw, lexicon),
            };
            PreparedExample {
                id: ex.id.clone(),
                words,
                spans,
                answer: ex.answer_set(),
            }
        })
        .collect()
}

/// Runs `f(i)` for `i in 0..n` on `workers` threads with round-robin index
/// assignment; results come back in index order, so the outcome is
/// independent of the worker count.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1);
    if workers == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let mut parts: Vec<Vec<(usize, &mut Option<T>)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, slot) in slots.iter_mut().enumerate() {
        parts[i % workers].push((i, slot));
    }
    let f = &f;
    std::thread::scope(|scope| {
        for part in parts {
            scope.spawn(move || {
                for (i, slot) in part {
                    *slot = Some(f(i));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub phase: String,
    pub train_f1: f64,
    pub valid_f1: f64,
    /// Fraction of training questions with a cached pseudo-gold program.
    pub cache_coverage: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub cache: PseudoGoldCache,
    pub log: Vec<LogEntry>,
    /// Model saved at the end of the ML phase (before re-initialization),
    /// when that phase ran.
    pub ml_model: Option<Model>,
}

fn encode_and_score(
    model: &Model,
    kb: &KnowledgeBase,
    ex: &PreparedExample,
    beam: usize,
    constraints: &CurriculumConstraints,
    max_tokens: usize,
) -> Result<Vec<DecodedProgram>, NnError> {
    let q = crate::nn::EncodedQuestion {
        words: ex.words.clone(),
        spans: ex.spans.clone(),
    };
    let mut exec_cache = ExecCache::default();
    beam_decode(model, kb, &q, beam, constraints, max_tokens, &mut exec_cache)
}

fn question_of(ex: &PreparedExample) -> crate::nn::EncodedQuestion {
    crate::nn::EncodedQuestion {
        words: ex.words.clone(),
        spans: ex.spans.clone(),
    }
}

/// Log probability of `program` under the current parameters without
/// dropout, used to score cache-injected candidates absent from the beam.
fn eval_log_prob(
    model: &Model,
    kb: &KnowledgeBase,
    ex: &PreparedExample,
    program: &Program,
    constraints: &CurriculumConstraints,
) -> Result<f64, NnError> {
    let lp = model.program_log_prob(kb, &question_of(ex), program, constraints, false, 0)?;
    Ok(lp.value)
}

fn hop_properties(program: &Program) -> std::collections::BTreeSet<String> {
    let mut props = std::collections::BTreeSet::new();
    let mut tokens = program.tokens.iter().peekable();
    while let Some(tok) = tokens.next() {
        if matches!(tok, Token::Func(Function::Hop)) {
            for t in tokens.by_ref() {
                match t {
                    Token::Prop(p) => {
                        props.insert(p.clone());
                        break;
                    }
                    Token::Close => break,
                    _ => {}
                }
            }
        }
    }
    props
}

pub struct Trainer {
    pub model: Model,
    pub cache: PseudoGoldCache,
    pub cfg: TrainConfig,
    adam: crate::nn::Adam,
    grads: crate::nn::Grads,
    step: u64,
    rng: ChaCha8Rng,
    rl_decay_start: Option<u64>,
    rl_iters_done: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let grads = crate::nn::Grads::zeros_like(&model.params);
        let adam = crate::nn::Adam::new(&model.params);
        Trainer {
            model,
            cache: PseudoGoldCache::default(),
            adam,
            grads,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7ea1)),
            rl_decay_start: None,
            cfg,
        rl_iters_done: 0,
        }
    }

    /// Swaps in fresh parameters and resets the optimizer and step counter;
    /// the pseudo-gold cache is kept.
    pub fn reset_model(&mut self, model: Model) {
        self.adam = crate::nn::Adam::new(&model.params);
        self.grads = crate::nn::Grads::zeros_like(&model.params);
        self.model = model;
        self.step = 0;
        self.rl_decay_start = None;
        self.rl_iters_done = 0;
    }

    pub fn set_cache(&mut self, cache: PseudoGoldCache) {
        self.cache = cache;
    }

    fn ml_lr(&self) -> f64 {
        lr_at(self.step, &self.cfg)
    }

    fn rl_lr(&self) -> f64 {
        let g0 = self.cfg.rl_g0.unwrap_or(self.cfg.g0);
        if self.rl_iters_done < self.cfg.rl_warm_iterations {
            g0
        } else {
            let start = self.rl_decay_start.unwrap_or(self.step);
            let cfg = TrainConfig { g0, t_s: start, ..self.cfg.clone() };
            lr_at(self.step, &cfg)
        }
    }

    /// Decode the training set with a wide beam, fold results into the
    /// pseudo-gold cache, then run ML epochs on the cached programs.
    pub fn ml_iteration(
        &mut self,
        kb: &KnowledgeBase,
        train: &[PreparedExample],
        stage: &StageSpec,
        per_question_props: Option<&BTreeMap<String, std::collections::BTreeSet<String>>>,
        workers: usize,
    ) -> Result<(), NnError> {
        let model = &self.model;
        let cfg = &self.cfg;
        let constraints_for = |ex: &PreparedExample| -> CurriculumConstraints {
            let mut c = stage.constraints.clone();
            if let Some(map) = per_question_props {
                if let Some(props) = map.get(&ex.id) {
                    c.allowed_properties = Some(props.clone());
                }
            }
            c
        };
        let decoded = parallel_map(train.len(), workers, |i| {
            encode_and_score(model, kb, &train[i], cfg.b_ml, &constraints_for(&train[i]), cfg.max_tokens)
        });
        for (ex, result) in train.iter().zip(decoded) {
            let beam = result?;
            let scored: Vec<(Program, f64)> = beam
                .into_iter()
                .map(|d| {
                    let r = reward_f1(&d.denotation, &ex.answer);
                    (d.program, r)
                })
                .collect();
            self.cache.update(&ex.id, &scored);
        }
        for _ in 0..self.cfg.epochs_per_ml_round {
            self.ml_epoch(kb, train)?;
        }
        Ok(())
    }

    /// One pass of teacher-forced ML over cached pseudo-gold programs.
    /// Curriculum constraints narrow only the exploration decode; gradients
    /// always normalize over the full program space so the model learns to
    /// discriminate among all properties and functions.
    fn ml_epoch(&mut self, kb: &KnowledgeBase, train: &[PreparedExample]) -> Result<(), NnError> {
        let c = CurriculumConstraints {
            allowed_functions: Function::ALL.into_iter().collect(),
            max_expressions: self.cfg.max_expressions,
            allowed_properties: None,
        };
        let cached: Vec<&PreparedExample> = train
            .iter()
            .filter(|ex| self.cache.get(&ex.id).is_some())
            .collect();
        for batch in cached.chunks(self.cfg.batch_size.max(1)) {
            self.grads.zero();
            let mut any = false;
            for ex in batch {
                let entry = self.cache.get(&ex.id).expect("filtered to cached").clone();
                let seed: u64 = self.rng.gen();
                let lp = self.model.program_log_prob(
                    kb,
                    &question_of(ex),
                    &entry.program,
                    &c,
                    true,
                    seed,
                )?;
                let scale = -1.0 / batch.len() as f64;
                lp.sess
                    .tape
                    .backward(lp.node, scale, &self.model.params, &mut self.grads);
                any = true;
            }
            if any {
                let lr = self.ml_lr();
                self.adam.step(&mut self.model.params, &self.grads, lr);
                self.step += 1;
            }
        }
        Ok(())
    }

    /// One policy-gradient iteration: decode with a small beam, update the
    /// cache, weight candidates (optionally augmented by the cached
    /// program), and apply advantage-weighted gradient ascent.
    pub fn rl_iteration(
        &mut self,
        kb: &KnowledgeBase,
        train: &[PreparedExample],
        constraints: &CurriculumConstraints,
        augment: bool,
        workers: usize,
    ) -> Result<(), NnError> {
        let model = &self.model;
        let cfg = &self.cfg;
        let decoded = parallel_map(train.len(), workers, |i| {
            encode_and_score(model, kb, &train[i], cfg.b_rl, constraints, cfg.max_tokens)
        });
        let mut beams: Vec<Vec<(Program, f64, f64)>> = Vec::with_capacity(train.len());
        for (ex, result) in train.iter().zip(decoded) {
            let beam = result?;
            let scored: Vec<(Program, f64, f64)> = beam
                .into_iter()
                .map(|d| {
                    let r = reward_f1(&d.denotation, &ex.answer);
                    (d.program, d.log_prob, r)
                })
                .collect();
            let for_cache: Vec<(Program, f64)> =
                scored.iter().map(|(p, _, r)| (p.clone(), *r)).collect();
            self.cache.update(&ex.id, &for_cache);
            beams.push(scored);
        }

        // advantage-weighted candidate set per question, fixed for this
        // iteration's gradient passes
        let mut prepared: Vec<Vec<(Program, f64)>> = Vec::with_capacity(train.len());
        for (qi, ex) in train.iter().enumerate() {
            let mut candidates = beams[qi].clone();
            let mut pseudo_idx = None;
            if augment && self.cfg.alpha > 0.0 {
                if let Some(entry) = self.cache.get(&ex.id) {
                    let entry: CacheEntry = entry.clone();
                    let text = entry.program.text();
                    match candidates.iter().position(|(p, _, _)| p.text() == text) {
                        Some(i) => pseudo_idx = Some(i),
                        None => {
                            let lp = eval_log_prob(&self.model, kb, ex, &entry.program, constraints)?;
                            candidates.push((entry.program, lp, entry.reward));
                            pseudo_idx = Some(candidates.len() - 1);
                        }
                    }
                }
            }
            let probs: Vec<f64> = candidates.iter().map(|(_, lp, _)| lp.exp()).collect();
            let rewards: Vec<f64> = candidates.iter().map(|(_, _, r)| *r).collect();
            let weights =
                reinforce_weights(&probs, pseudo_idx, if augment { self.cfg.alpha } else { 0.0 });
            let b = baseline(&weights, &rewards);
            prepared.push(
                candidates
                    .into_iter()
                    .enumerate()
                    .map(|(j, (program, _, _))| (program, weights[j] * (rewards[j] - b)))
                    .filter(|(_, coeff)| *coeff != 0.0)
                    .collect(),
            );
        }

        let batch_size = self.cfg.rl_batch_size.unwrap_or(self.cfg.batch_size).max(1);
        for _ in 0..self.cfg.rl_updates_per_iteration.max(1) {
            for chunk in (0..train.len()).collect::<Vec<_>>().chunks(batch_size) {
                self.grads.zero();
                let mut contributed = false;
                for &qi in chunk {
                    let ex = &train[qi];
                    for (program, coeff) in &prepared[qi] {
                        let seed: u64 = self.rng.gen();
                        let lp = self.model.program_log_prob(
                            kb,
                            &question_of(ex),
                            program,
                            constraints,
                            true,
                            seed,
                        )?;
                        let scale = -coeff / chunk.len() as f64;
                        lp.sess
                            .tape
                            .backward(lp.node, scale, &self.model.params, &mut self.grads);
                        contributed = true;
                    }
                }
                if contributed {
                    let lr = self.rl_lr();
                    self.adam.step(&mut self.model.params, &self.grads, lr);
                }
                self.step += 1;
            }
        }
        self.rl_iters_done += 1;
        if self.rl_iters_done == self.cfg.rl_warm_iterations && self.rl_decay_start.is_none() {
            self.rl_decay_start = Some(self.step);
        }
        Ok(())
    }

    /// Mean top-1 F1 of greedy/beam decodes over a split.
    pub fn mean_f1(
        &self,
        kb: &KnowledgeBase,
        data: &[PreparedExample],
        constraints: &CurriculumConstraints,
        beam: usize,
        workers: usize,
    ) -> Result<f64, NnError> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let model = &self.model;
        let cfg = &self.cfg;
        let decoded = parallel_map(data.len(), workers, |i| {
            encode_and_score(model, kb, &data[i], beam.max(1), constraints, cfg.max_tokens)
        });
        let mut total = 0.0;
        for (ex, result) in data.iter().zip(decoded) {
            let beam = result?;
            if let Some(best) = beam.first() {
                total += reward_f1(&best.denotation, &ex.answer);
            }
        }
        Ok(total / data.len() as f64)
    }
}

/// Word vocabulary covering both splits, with frozen random embeddings.
pub fn build_vocab(
    train: &[PreparedExample],
    valid: &[PreparedExample],
    cfg: &TrainConfig,
) -> crate::nn::WordVocab {
    crate::nn::WordVocab::random(
        train.iter().chain(valid).flat_map(|ex| ex.words.iter().cloned()),
        cfg.d_word,
        cfg.seed,
    )
}

/// ML phase: curriculum stages of decode-and-train iterations.
pub fn run_ml_phase(
    trainer: &mut Trainer,
    kb: &KnowledgeBase,
    train: &[PreparedExample],
    valid: &[PreparedExample],
    workers: usize,
    log: &mut Vec<LogEntry>,
) -> Result<(), NnError> {
    let cfg = trainer.cfg.clone();
    let stages = curriculum_stages(&cfg);
    let final_constraints = stages.last().expect("at least one stage").constraints.clone();
    let mut iteration = log.last().map(|e| e.iteration).unwrap_or(0);
    let mut prev_stage_props: Option<BTreeMap<String, std::collections::BTreeSet<String>>> = None;
    for stage in &stages {
        let per_q = if stage.restrict_from_previous {
            prev_stage_props.clone()
        } else {
            None
        };
        for si in 0..stage.iterations {
            trainer.ml_iteration(kb, train, stage, per_q.as_ref(), workers)?;
            iteration += 1;
            let every = cfg.eval_every.max(1);
            if iteration % every == 0 || si + 1 == stage.iterations {
                let train_f1 =
                    trainer.mean_f1(kb, train, &stage.constraints, cfg.eval_beam, workers)?;
                let valid_f1 =
                    trainer.mean_f1(kb, valid, &final_constraints, cfg.eval_beam, workers)?;
                log.push(LogEntry {
                    iteration,
                    phase: "ml".into(),
                    train_f1,
                    valid_f1,
                    cache_coverage: trainer.cache.len() as f64 / train.len().max(1) as f64,
                    lr: trainer.ml_lr(),
                });
            }
        }
        prev_stage_props = Some(
            train
                .iter()
                .filter_map(|ex| {
                    trainer
                        .cache
                        .get(&ex.id)
                        .map(|e| (ex.id.clone(), hop_properties(&e.program)))
                })
                .collect(),
        );
    }
    Ok(())
}

/// Policy-gradient phase over a fresh trainer (the caller decides what model
/// and cache it starts from).
pub fn run_rl_phase(
    trainer: &mut Trainer,
    kb: &KnowledgeBase,
    train: &[PreparedExample],
    valid: &[PreparedExample],
    augment: bool,
    workers: usize,
    log: &mut Vec<LogEntry>,
) -> Result<(), NnError> {
    let cfg = trainer.cfg.clone();
    let final_constraints = curriculum_stages(&cfg)
        .last()
        .expect("at least one stage")
        .constraints
        .clone();
    let mut iteration = log.last().map(|e| e.iteration).unwrap_or(0);
    for ri in 0..cfg.n_rl {
        trainer.rl_iteration(kb, train, &final_constraints, augment, workers)?;
        iteration += 1;
        let every = cfg.eval_every.max(1);
        if iteration % every == 0 || ri + 1 == cfg.n_rl {
            let train_f1 = trainer.mean_f1(kb, train, &final_constraints, cfg.eval_beam, workers)?;
            let valid_f1 = trainer.mean_f1(kb, valid, &final_constraints, cfg.eval_beam, workers)?;
            log.push(LogEntry {
                iteration,
                phase: "rl".into(),
                train_f1,
                valid_f1,
                cache_coverage: trainer.cache.len() as f64 / train.len().max(1) as f64,
                lr: trainer.rl_lr(),
            });
        }
    }
    Ok(())
}

/// Full weakly supervised run. Modes: `Augmented` = ML phase then
/// re-initialized policy-gradient phase with cache injection; `IterativeMl`
/// = ML phase only; `PlainReinforce` = policy gradient from scratch.
pub fn run_iml_reinforce(
    kb: &KnowledgeBase,
    train: &[PreparedExample],
    valid: &[PreparedExample],
    cfg: &TrainConfig,
    mode: TrainMode,
    workers: usize,
) -> Result<TrainOutcome, NnError> {
    let vocab = build_vocab(train, valid, cfg);
    let model = Model::new(cfg.model_config(), vocab.clone(), kb.properties(), cfg.seed);
    let mut trainer = Trainer::new(model, cfg.clone());
    let mut log = Vec::new();
    let mut ml_model = None;

    if mode != TrainMode::PlainReinforce {
        run_ml_phase(&mut trainer, kb, train, valid, workers, &mut log)?;
        ml_model = Some(Model::from_checkpoint(trainer.model.to_checkpoint()));
    }

    if mode != TrainMode::IterativeMl {
        // fresh random parameters for the policy-gradient phase; the cache
        // carries over
        let rl_model = Model::new(
            cfg.rl_model_config(),
            vocab,
            kb.properties(),
            cfg.seed.wrapping_add(0x5eed),
        );
        trainer.reset_model(rl_model);
        let augment = mode == TrainMode::Augmented;
        run_rl_phase(&mut trainer, kb, train, valid, augment, workers, &mut log)?;
    }

    Ok(TrainOutcome {
        model: trainer.model,
        cache: trainer.cache,
        log,
        ml_model,
    })
}
