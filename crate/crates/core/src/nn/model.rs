//! GRU encoder/decoder with dot-product attention and key-variable memory.
//!
//! The encoder runs over the anonymized question; each entity-linked span
//! contributes a memory entry whose key is the mean of hidden states over
//! the span. During decoding, every executed expression registers a new
//! variable keyed by the decoder hidden state at the step that closed it,
//! and the variable token immediately joins the decoder vocabulary with
//! that key as its embedding. All forward passes run on a [`Tape`], so
//! selecting a variable later backpropagates into the step that produced
//! its key.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{ParamStore, Tensor};
use super::tape::{NodeId, Tape};
use crate::interpreter::{
    CurriculumConstraints, ParseError, PrefixError, Program, ProgramState, Token, VariableStore,
};
use crate::kbstore::KnowledgeBase;

pub const UNK_WORD: &str = "<unk>";
pub const ENT_WORD: &str = "ENT";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_word: usize,
    pub d_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // desk-scale dims; the dropout rate follows the reference setup
        ModelConfig {
            d_word: 16,
            d_hidden: 16,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("entity span ({0}, {1}) out of range or overlapping")]
    BadSpan(usize, usize),
    #[error("unknown property `{0}`")]
    UnknownProperty(String),
    #[error("variable R{} has no memory entry", .0 + 1)]
    UnknownVariable(usize),
    #[error("program token `{token}` at step {step} is outside the valid set")]
    TokenNotValid { step: usize, token: String },
    #[error("decode_step called with an empty valid set")]
    EmptyValid,
    #[error("duplicate variable registration")]
    DuplicateVariable,
    #[error("ill-formed program: {0}")]
    Parse(#[from] ParseError),
    #[error("interpreter rejected program: {0}")]
    Prefix(#[from] PrefixError),
}

/// Fixed (non-trainable) word embeddings plus the lookup table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
    by_word: BTreeMap<String, usize>,
    embeddings: Vec<Vec<f64>>,
    d_word: usize,
    unk: usize,
}

impl WordVocab {
    /// Random embeddings (normal, stddev 0.1) for a word list; `ENT` and the
    /// unknown-word token are always included.
    pub fn random(words: impl IntoIterator<Item = String>, d_word: usize, seed: u64) -> Self {
        let mut set: BTreeSet<String> = words.into_iter().collect();
        set.insert(ENT_WORD.to_string());
        set.insert(UNK_WORD.to_string());
        let words: Vec<String> = set.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = words
            .iter()
            .map(|_| {
                (0..d_word)
                    .map(|_| super::params::truncated_normal(&mut rng, 0.1))
                    .collect()
            })
            .collect();
        Self::from_parts(words, embeddings, d_word)
    }

    /// Loads a `word v1 v2 ... vD` text file (one word per line).
    pub fn from_embedding_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut words = Vec::new();
        let mut embeddings: Vec<Vec<f64>> = Vec::new();
        let mut d_word = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let word = it.next().unwrap().to_string();
            let vec: Vec<f64> = it
                .map(|t| {
                    t.parse().map_err(|_| {
                        std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("line {}: bad float", i + 1),
                        )
                    })
                })
                .collect::<Result<_, _>>()?;
            match d_word {
                None => d_word = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("line {}: dimension mismatch", i + 1),
                    ))
                }
                _ => {}
            }
            words.push(word);
            embeddings.push(vec);
        }
        let d_word = d_word.unwrap_or(16);
        for extra in [ENT_WORD, UNK_WORD] {
            if !words.iter().any(|w| w == extra) {
                words.push(extra.to_string());
                embeddings.push(vec![0.0; d_word]);
            }
        }
        Ok(Self::from_parts(words, embeddings, d_word))
    }

    fn from_parts(words: Vec<String>, embeddings: Vec<Vec<f64>>, d_word: usize) -> Self {
        let by_word: BTreeMap<String, usize> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let unk = by_word[UNK_WORD];
        WordVocab {
            words,
            by_word,
            embeddings,
            d_word,
            unk,
        }
    }

    pub fn d_word(&self) -> usize {
        self.d_word
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.by_word
            .get(word)
            .or_else(|| self.by_word.get(word.to_lowercase().as_str()))
            .copied()
            .unwrap_or(self.unk)
    }

    pub fn is_known(&self, word: &str) -> bool {
        self.by_word.contains_key(word) || self.by_word.contains_key(word.to_lowercase().as_str())
    }

    pub fn embedding(&self, word: &str) -> &[f64] {
        &self.embeddings[self.lookup(word)]
    }

    pub fn unk_embedding(&self) -> &[f64] {
        &self.embeddings[self.unk]
    }
}

/// Builds the pre-projection property embedding for a structured id like
/// `/people/person/parents`: first `d_word` dims are the mean over
/// domain+type words, last `d_word` dims the mean over property words.
/// Returns `(vector, malformed)`; a malformed id falls back to UNK halves.
pub fn property_raw_embedding(vocab: &WordVocab, prop_id: &str) -> (Vec<f64>, bool) {
    let parts: Vec<&str> = prop_id.split('/').filter(|p| !p.is_empty()).collect();
    let words_of = |part: &str| -> Vec<String> {
        part.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_string())
            .collect()
    };
    let mean_emb = |words: &[String]| -> Vec<f64> {
        if words.is_empty() {
            return vocab.unk_embedding().to_vec();
        }
        let mut acc = vec![0.0; vocab.d_word()];
        for w in words {
            for (a, x) in acc.iter_mut().zip(vocab.embedding(w)) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|x| *x /= words.len() as f64);
        acc
    };
    if parts.len() == 3 {
        let mut domain_type = words_of(parts[0]);
        domain_type.extend(words_of(parts[1]));
        let prop_words = words_of(parts[2]);
        let mut out = mean_emb(&domain_type);
        out.extend(mean_emb(&prop_words));
        (out, false)
    } else {
        let mut out = vocab.unk_embedding().to_vec();
        out.extend_from_slice(vocab.unk_embedding());
        (out, true)
    }
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wc: usize,
    uc: usize,
    bc: usize,
}

#[derive(Clone, Debug)]
struct ParamIds {
    enc_proj: usize,
    enc: GruIds,
    dec: GruIds,
    out_w: usize,
    out_b: usize,
    prop_proj: usize,
    tok_open: usize,
    tok_close: usize,
    tok_return: usize,
    tok_go: usize,
    tok_hop: usize,
    tok_argmax: usize,
    tok_argmin: usize,
    tok_filter: usize,
}

fn add_gru(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> GruIds {
    let mut mat = |name: &str, rows: usize, cols: usize| {
        store.add(&format!("{prefix}.{name}"), Tensor::uniform_matrix(rows, cols, rng))
    };
    let wz = mat("wz", d_h, d_in);
    let uz = mat("uz", d_h, d_h);
    let wr = mat("wr", d_h, d_in);
    let ur = mat("ur", d_h, d_h);
    let wc = mat("wc", d_h, d_in);
    let uc = mat("uc", d_h, d_h);
    let bz = store.add(&format!("{prefix}.bz"), Tensor::zeros(vec![d_h]));
    let br = store.add(&format!("{prefix}.br"), Tensor::zeros(vec![d_h]));
    let bc = store.add(&format!("{prefix}.bc"), Tensor::zeros(vec![d_h]));
    GruIds {
        wz,
        uz,
        bz,
        wr,
        ur,
        br,
        wc,
        uc,
        bc,
    }
}

fn resolve_gru(store: &ParamStore, prefix: &str) -> GruIds {
    let id = |name: &str| store.id_of(&format!("{prefix}.{name}")).expect("gru param");
    GruIds {
        wz: id("wz"),
        uz: id("uz"),
        bz: id("bz"),
        wr: id("wr"),
        ur: id("ur"),
        br: id("br"),
        wc: id("wc"),
        uc: id("uc"),
        bc: id("bc"),
    }
}

/// Checkpoint container: everything needed to rebuild a model.
#[derive(Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub vocab: WordVocab,
    pub props: Vec<String>,
    pub params: ParamStore,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: WordVocab,
    pub props: Vec<String>,
    pub params: ParamStore,
    prop_index: HashMap<String, usize>,
    prop_raw: Vec<Vec<f64>>,
    ids: ParamIds,
}

impl Model {
    pub fn new(
        cfg: ModelConfig,
        vocab: WordVocab,
        properties: &BTreeSet<String>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (dw, dh) = (cfg.d_word, cfg.d_hidden);
        let enc_proj = params.add("enc.proj", Tensor::uniform_matrix(dh, dw, &mut rng));
        let enc = add_gru(&mut params, "enc.gru", dh, dh, &mut rng);
        let dec = add_gru(&mut params, "dec.gru", dh, dh, &mut rng);
        let out_w = params.add("out.w", Tensor::uniform_matrix(dh, 2 * dh, &mut rng));
        let out_b = params.add("out.b", Tensor::zeros(vec![dh]));
        let prop_proj = params.add("prop.proj", Tensor::uniform_matrix(dh, 2 * dw, &mut rng));
        let mut tok = |name: &str| {
            params.add(
                &format!("tok.{name}"),
                Tensor::truncated_normal_vector(dh, &mut rng),
            )
        };
        let ids = ParamIds {
            enc_proj,
            enc,
            dec,
            out_w,
            out_b,
            prop_proj,
            tok_open: tok("open"),
            tok_close: tok("close"),
            tok_return: tok("return"),
            tok_go: tok("go"),
            tok_hop: tok("hop"),
            tok_argmax: tok("argmax"),
            tok_argmin: tok("argmin"),
            tok_filter: tok("filter"),
        };
        let props: Vec<String> = properties.iter().cloned().collect();
        Self::assemble(cfg, vocab, props, params, ids)
    }

    fn assemble(
        cfg: ModelConfig,
        vocab: WordVocab,
        props: Vec<String>,
        params: ParamStore,
        ids: ParamIds,
    ) -> Self {
        let prop_index: HashMap<String, usize> =
            props.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        let mut warned = false;
        let prop_raw = props
            .iter()
            .map(|p| {
                let (raw, malformed) = property_raw_embedding(&vocab, p);
                if malformed && !warned {
                    eprintln!("warning: property id `{p}` is not domain/type/property; using UNK embedding");
                    warned = true;
                }
                raw
            })
            .collect();
        Model {
            cfg,
            vocab,
            props,
            params,
            prop_index,
            prop_raw,
            ids,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cfg: self.cfg,
            vocab: self.vocab.clone(),
            props: self.props.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        let ids = ParamIds {
            enc_proj: ckpt.params.id_of("enc.proj").expect("checkpoint param"),
            enc: resolve_gru(&ckpt.params, "enc.gru"),
            dec: resolve_gru(&ckpt.params, "dec.gru"),
            out_w: ckpt.params.id_of("out.w").unwrap(),
            out_b: ckpt.params.id_of("out.b").unwrap(),
            prop_proj: ckpt.params.id_of("prop.proj").unwrap(),
            tok_open: ckpt.params.id_of("tok.open").unwrap(),
            tok_close: ckpt.params.id_of("tok.close").unwrap(),
            tok_return: ckpt.params.id_of("tok.return").unwrap(),
            tok_go: ckpt.params.id_of("tok.go").unwrap(),
            tok_hop: ckpt.params.id_of("tok.hop").unwrap(),
            tok_argmax: ckpt.params.id_of("tok.argmax").unwrap(),
            tok_argmin: ckpt.params.id_of("tok.argmin").unwrap(),
            tok_filter: ckpt.params.id_of("tok.filter").unwrap(),
        };
        Self::assemble(ckpt.cfg, ckpt.vocab, ckpt.props, ckpt.params, ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> anyhow::Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(Self::from_checkpoint(serde_json::from_str(&json)?))
    }

    /// Runs the encoder and sets up a decode session. `dropout_seed` only
    /// matters in train mode (it drives mask sampling).
    pub fn encode(
        &self,
        question: &EncodedQuestion,
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<NnSession<'_>, NnError> {
        if question.words.is_empty() {
            return Err(NnError::EmptyInput);
        }
        let n = question.words.len();
        let mut last_end: Option<usize> = None;
        for &(start, end, _) in &question.spans {
            if start > end || end >= n {
                return Err(NnError::BadSpan(start, end));
            }
            if let Some(prev) = last_end {
                if start <= prev {
                    return Err(NnError::BadSpan(start, end));
                }
            }
            last_end = Some(end);
        }

        let mut sess = NnSession {
            model: self,
            tape: Tape::new(),
            enc_attn: Vec::new(),
            dec_init: 0,
            base_keys: Vec::new(),
            go_emb: 0,
            train_mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            param_nodes: HashMap::new(),
            prop_nodes: HashMap::new(),
        };

        let dh = self.cfg.d_hidden;
        let mut hidden = sess.tape.constant(vec![0.0; dh]);
        let mut states = Vec::with_capacity(n);
        for word in &question.words {
            let emb = sess.tape.constant(self.vocab.embedding(word).to_vec());
            let q = sess.tape.matvec(&self.params, self.ids.enc_proj, emb);
            let x = sess.dropout(q);
            hidden = sess.gru_cell(self.ids.enc, x, hidden);
            states.push(hidden);
        }
        sess.enc_attn = states.iter().map(|&h| sess_dropout(&mut sess, h)).collect();
        sess.base_keys = question
            .spans
            .iter()
            .map(|&(start, end, _)| sess.tape.mean(&states[start..=end]))
            .collect();
        sess.dec_init = hidden;
        sess.go_emb = sess.param_node(self.ids.tok_go);
        Ok(sess)
    }

    /// Teacher-forced log-probability of a complete program, with the loss
    /// node left on the session tape for `backward`.
    pub fn program_log_prob(
        &self,
        kb: &KnowledgeBase,
        question: &EncodedQuestion,
        program: &Program,
        constraints: &CurriculumConstraints,
        train_mode: bool,
        dropout_seed: u64,
    ) -> Result<LogProb<'_>, NnError> {
        program.expressions()?;
        let mut sess = self.encode(question, train_mode, dropout_seed)?;
        let mut state = ProgramState::new(question.linked_store());
        let mut hidden = sess.dec_init;
        let mut last_emb = sess.go_emb;
        let mut keys = sess.base_keys.clone();
        let mut total: Option<NodeId> = None;
        for (step, token) in program.tokens.iter().enumerate() {
            let valid: Vec<Token> = state.valid_tokens(kb, constraints).into_iter().collect();
            let pick = valid.iter().position(|t| t == token).ok_or_else(|| {
                NnError::TokenNotValid {
                    step,
                    token: token.to_string(),
                }
            })?;
            let out = sess.decode_step(hidden, last_emb, &keys, &valid)?;
            let lp = sess.tape.log_softmax_pick(out.logits, pick);
            total = Some(match total {
                None => lp,
                Some(acc) => sess.tape.add(acc, lp),
            });
            if state
                .advance(kb, token, constraints, None)
                .map_err(NnError::Prefix)?
                .is_some()
            {
                register_result_variable(&mut keys, out.hidden);
            }
            hidden = out.hidden;
            last_emb = sess.token_embedding(token, &keys)?;
        }
        let node = total.expect("well-formed program has at least Return");
        Ok(LogProb {
            value: sess.tape.scalar(node),
            node,
            sess,
        })
    }
}

/// Appends a freshly computed key, growing the decoder's variable
/// vocabulary by exactly one token (the returned one).
pub fn register_result_variable(keys: &mut Vec<NodeId>, key: NodeId) -> Token {
    keys.push(key);
    Token::Var(keys.len() - 1)
}

pub struct LogProb<'m> {
    pub value: f64,
    pub node: NodeId,
    pub sess: NnSession<'m>,
}

/// Anonymized question input: words (entity mentions replaced by `ENT`) and
/// inclusive entity spans in encounter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedQuestion {
    pub words: Vec<String>,
    pub spans: Vec<(usize, usize, String)>,
}

impl EncodedQuestion {
    /// One singleton entity-set variable per linked span, in span order.
    pub fn linked_store(&self) -> VariableStore {
        VariableStore::from_entity_links(self.spans.iter().map(|(_, _, e)| e.as_str()))
    }
}

pub struct StepOutput {
    /// New decoder hidden state (recurrent carry; also the memory key if
    /// this step closes an expression).
    pub hidden: NodeId,
    /// Stacked logits over the valid tokens, in the caller's order.
    pub logits: NodeId,
    /// Masked softmax over the valid tokens: sums to 1, zero elsewhere.
    pub probs: Vec<f64>,
}

pub struct NnSession<'m> {
    pub model: &'m Model,
    pub tape: Tape,
    pub enc_attn: Vec<NodeId>,
    pub dec_init: NodeId,
    pub base_keys: Vec<NodeId>,
    pub go_emb: NodeId,
    train_mode: bool,
    rng: ChaCha8Rng,
    param_nodes: HashMap<usize, NodeId>,
    prop_nodes: HashMap<usize, NodeId>,
}

// free fn so `encode` can call it while `sess.base_keys` is being built
fn sess_dropout(sess: &mut NnSession<'_>, x: NodeId) -> NodeId {
    sess.dropout(x)
}

impl<'m> NnSession<'m> {
    fn dropout(&mut self, x: NodeId) -> NodeId {
        let rate = self.model.cfg.dropout;
        if !self.train_mode || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.tape.mul_mask(x, mask)
    }

    fn param_node(&mut self, id: usize) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.tape.param(&self.model.params, id);
        self.param_nodes.insert(id, n);
        n
    }

    fn gru_cell(&mut self, ids: GruIds, x: NodeId, h: NodeId) -> NodeId {
        let p = &self.model.params;
        let wzx = self.tape.matvec(p, ids.wz, x);
        let uzh = self.tape.matvec(p, ids.uz, h);
        let bz = self.param_node(ids.bz);
        let z_pre = {
            let s = self.tape.add(wzx, uzh);
            self.tape.add(s, bz)
        };
        let z = self.tape.sigmoid(z_pre);
        let wrx = self.tape.matvec(p, ids.wr, x);
        let urh = self.tape.matvec(p, ids.ur, h);
        let br = self.param_node(ids.br);
        let r_pre = {
            let s = self.tape.add(wrx, urh);
            self.tape.add(s, br)
        };
        let r = self.tape.sigmoid(r_pre);
        let rh = self.tape.mul(r, h);
        let wcx = self.tape.matvec(p, ids.wc, x);
        let uch = self.tape.matvec(p, ids.uc, rh);
        let bc = self.param_node(ids.bc);
        let c_pre = {
            let s = self.tape.add(wcx, uch);
            self.tape.add(s, bc)
        };
        let c = self.tape.tanh(c_pre);
        // h' = (1 - z) * h + z * c
        let delta = self.tape.sub(c, h);
        let zd = self.tape.mul(z, delta);
        self.tape.add(h, zd)
    }

    /// Embedding used both to score a token and as the next decoder input:
    /// static tokens use their learned embeddings, properties their projected
    /// constructed embeddings, variables their memory keys.
    pub fn token_embedding(&mut self, token: &Token, keys: &[NodeId]) -> Result<NodeId, NnError> {
        use crate::interpreter::Function::*;
        let ids = &self.model.ids;
        Ok(match token {
            Token::Open => self.param_node(ids.tok_open),
            Token::Close => self.param_node(ids.tok_close),
            Token::Return => self.param_node(ids.tok_return),
            Token::Go => self.param_node(ids.tok_go),
            Token::Func(Hop) => self.param_node(ids.tok_hop),
            Token::Func(ArgMax) => self.param_node(ids.tok_argmax),
            Token::Func(ArgMin) => self.param_node(ids.tok_argmin),
            Token::Func(Filter) => self.param_node(ids.tok_filter),
            Token::Prop(p) => {
                let idx = *self
                    .model
                    .prop_index
                    .get(p)
                    .ok_or_else(|| NnError::UnknownProperty(p.clone()))?;
                if let Some(&n) = self.prop_nodes.get(&idx) {
                    n
                } else {
                    let raw = self.tape.constant(self.model.prop_raw[idx].clone());
                    let n = self
                        .tape
                        .matvec(&self.model.params, self.model.ids.prop_proj, raw);
                    self.prop_nodes.insert(idx, n);
                    n
                }
            }
            Token::Var(i) => *keys.get(*i).ok_or(NnError::UnknownVariable(*i))?,
        })
    }

    /// One decoder step: advance the GRU with the previous token's embedding,
    /// attend over encoder states, and score the valid tokens.
    pub fn decode_step(
        &mut self,
        hidden: NodeId,
        last_emb: NodeId,
        keys: &[NodeId],
        valid: &[Token],
    ) -> Result<StepOutput, NnError> {
        if valid.is_empty() {
            return Err(NnError::EmptyValid);
        }
        let x = self.dropout(last_emb);
        let u = self.gru_cell(self.model.ids.dec, x, hidden);
        let h_out = self.dropout(u);

        let enc = self.enc_attn.clone();
        let scores: Vec<NodeId> = enc.iter().map(|&e| self.tape.dot(h_out, e)).collect();
        let score_vec = self.tape.stack(&scores);
        let attn = self.tape.softmax(score_vec);
        let ctx = self.tape.weighted_sum(attn, &enc);
        let cat = self.tape.concat(h_out, ctx);
        let proj = self.tape.matvec(&self.model.params, self.model.ids.out_w, cat);
        let out_b = self.param_node(self.model.ids.out_b);
        let o = self.tape.add(proj, out_b);
        let o = self.dropout(o);

        let mut logit_ids = Vec::with_capacity(valid.len());
        for token in valid {
            let emb = self.token_embedding(token, keys)?;
            logit_ids.push(self.tape.dot(o, emb));
        }
        let logits = self.tape.stack(&logit_ids);
        let probs = {
            let xs = self.tape.value(logits);
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        };
        Ok(StepOutput {
            hidden: u,
            logits,
            probs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kbstore::Value;

    fn tiny_vocab() -> WordVocab {
        WordVocab::random(
            ["who", "city", "of", "pop", "most"].map(String::from),
            8,
            11,
        )
    }

    fn props() -> BTreeSet<String> {
        BTreeSet::from(["city".to_string(), "pop".to_string(), "capital".to_string()])
    }

    fn tiny_model() -> Model {
        Model::new(
            ModelConfig {
                d_word: 8,
                d_hidden: 8,
                dropout: 0.5,
            },
            tiny_vocab(),
            &props(),
            3,
        )
    }

    fn question() -> EncodedQuestion {
        EncodedQuestion {
            words: ["who", "city", "of", "ENT"].map(String::from).to_vec(),
            spans: vec![(3, 3, "USA".to_string())],
        }
    }

    fn kb0() -> KnowledgeBase {
        KnowledgeBase::from_triples([
            ("USA".into(), "city".into(), Value::entity("NYC")),
            ("USA".into(), "city".into(), Value::entity("SF")),
            ("NYC".into(), "pop".into(), Value::number(8.6)),
            ("SF".into(), "pop".into(), Value::number(0.9)),
            ("USA".into(), "capital".into(), Value::entity("DC")),
        ])
    }

    #[test]
    fn empty_input_rejected() {
        let model = tiny_model();
        let q = EncodedQuestion {
            words: vec![],
            spans: vec![],
        };
        assert!(matches!(model.encode(&q, false, 0), Err(NnError::EmptyInput)));
    }

    #[test]
    fn single_word_span_key_equals_state() {
        let model = tiny_model();
        let q = EncodedQuestion {
            words: vec!["who".to_string()],
            spans: vec![(0, 0, "USA".to_string())],
        };
        let sess = model.encode(&q, false, 0).unwrap();
        assert_eq!(sess.base_keys.len(), 1);
        // key is the mean over a single state, i.e. that state
        let key = sess.tape.value(sess.base_keys[0]).to_vec();
        let state = sess.tape.value(sess.dec_init).to_vec();
        assert_eq!(key, state);
    }

    #[test]
    fn no_spans_empty_memory() {
        let model = tiny_model();
        let q = EncodedQuestion {
            words: vec!["who".to_string(), "city".to_string()],
            spans: vec![],
        };
        let sess = model.encode(&q, false, 0).unwrap();
        assert!(sess.base_keys.is_empty());
    }

    #[test]
    fn two_spans_in_order() {
        let model = tiny_model();
        let q = EncodedQuestion {
            words: ["ENT", "of", "ENT"].map(String::from).to_vec(),
            spans: vec![(0, 0, "A".to_string()), (2, 2, "B".to_string())],
        };
        let sess = model.encode(&q, false, 0).unwrap();
        assert_eq!(sess.base_keys.len(), 2);
        assert_eq!(q.linked_store().len(), 2);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let model = tiny_model();
        let q = EncodedQuestion {
            words: ["a", "b", "c"].map(String::from).to_vec(),
            spans: vec![(0, 1, "A".to_string()), (1, 2, "B".to_string())],
        };
        assert!(matches!(model.encode(&q, false, 0), Err(NnError::BadSpan(..))));
    }

    #[test]
    fn masked_softmax_degenerate_and_normalized() {
        let model = tiny_model();
        let sess = &mut model.encode(&question(), false, 0).unwrap();
        let keys = sess.base_keys.clone();
        let out = sess
            .decode_step(sess.dec_init, sess.go_emb, &keys, &[Token::Return])
            .unwrap();
        assert!((out.probs[0] - 1.0).abs() < 1e-12);

        let valid = [
            Token::Open,
            Token::Return,
            Token::Prop("city".into()),
            Token::Var(0),
        ];
        let out = sess
            .decode_step(sess.dec_init, sess.go_emb, &keys, &valid)
            .unwrap();
        let sum: f64 = out.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_valid_rejected() {
        let model = tiny_model();
        let sess = &mut model.encode(&question(), false, 0).unwrap();
        assert!(matches!(
            sess.decode_step(sess.dec_init, sess.go_emb, &[], &[]),
            Err(NnError::EmptyValid)
        ));
    }

    #[test]
    fn eval_passes_are_bitwise_identical() {
        let model = tiny_model();
        let kb = kb0();
        let prog = Program::parse("( Hop R1 city ) Return").unwrap();
        let c = CurriculumConstraints::unrestricted(3);
        let a = model
            .program_log_prob(&kb, &question(), &prog, &c, false, 1)
            .unwrap()
            .value;
        let b = model
            .program_log_prob(&kb, &question(), &prog, &c, false, 2)
            .unwrap()
            .value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn log_prob_nonpositive_and_valid_token_enforced() {
        let model = tiny_model();
        let kb = kb0();
        let c = CurriculumConstraints::unrestricted(3);
        let lp = model
            .program_log_prob(
                &kb,
                &question(),
                &Program::parse("( Hop R1 city ) ( ArgMax R2 pop ) Return").unwrap(),
                &c,
                false,
                0,
            )
            .unwrap();
        assert!(lp.value <= 0.0);

        // property not reachable from R1 -> outside valid set at step 3
        let res = model.program_log_prob(
            &kb,
            &question(),
            &Program::parse("( Hop R1 pop ) Return").unwrap(),
            &c,
            false,
            0,
        );
        match res {
            Err(NnError::TokenNotValid { step: 3, .. }) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected invalid token error"),
        }
    }

    #[test]
    fn property_embedding_structure() {
        let vocab = WordVocab::random(
            ["people", "person", "parents", "a"].map(String::from),
            4,
            5,
        );
        let (raw, malformed) = property_raw_embedding(&vocab, "/people/person/parents");
        assert!(!malformed);
        assert_eq!(raw.len(), 8);
        let people = vocab.embedding("people").to_vec();
        let person = vocab.embedding("person").to_vec();
        let parents = vocab.embedding("parents").to_vec();
        for i in 0..4 {
            assert!((raw[i] - 0.5 * (people[i] + person[i])).abs() < 1e-12);
            assert!((raw[4 + i] - parents[i]).abs() < 1e-12);
        }

        let (raw, malformed) = property_raw_embedding(&vocab, "/a/a/a");
        assert!(!malformed);
        assert_eq!(&raw[..4], &raw[4..]);

        let (raw, _) = property_raw_embedding(&vocab, "/zz/yy/xx");
        let unk = vocab.unk_embedding();
        assert_eq!(&raw[..4], unk);
        assert_eq!(&raw[4..], unk);

        let (_, malformed) = property_raw_embedding(&vocab, "city");
        assert!(malformed);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        let kb = kb0();
        let c = CurriculumConstraints::unrestricted(3);
        let prog = Program::parse("( Hop R1 city ) Return").unwrap();
        let a = model
            .program_log_prob(&kb, &question(), &prog, &c, false, 0)
            .unwrap()
            .value;
        let b = loaded
            .program_log_prob(&kb, &question(), &prog, &c, false, 0)
            .unwrap()
            .value;
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
