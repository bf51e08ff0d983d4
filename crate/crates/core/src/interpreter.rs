//! Lisp-style program interpreter with code assistance.
//!
//! Programs are flat token sequences of parenthesized expressions ending in
//! `Return`. Each executed expression appends its denotation (an entity/value
//! set) to the variable store as a fresh variable. Code assistance
//! ([`ProgramState::valid_tokens`]) returns exactly the tokens that are
//! syntactically and semantically valid next, so that any rollout sampled
//! from it executes without error.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kbstore::{KnowledgeBase, Value, ValueSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Function {
    Hop,
    ArgMax,
    ArgMin,
    Filter,
}

impl Function {
    pub const ALL: [Function; 4] = [
        Function::Hop,
        Function::ArgMax,
        Function::ArgMin,
        Function::Filter,
    ];

    /// Number of variable arguments preceding the property argument.
    pub fn num_vars(self) -> usize {
        match self {
            Function::Filter => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Function::Hop => "Hop",
            Function::ArgMax => "ArgMax",
            Function::ArgMin => "ArgMin",
            Function::Filter => "Filter",
        }
    }
}

/// One program token. The derived order (variant rank, then payload) is the
/// canonical token order used for deterministic beam tie-breaking and for
/// laying out softmax logits.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Token {
    Open,
    Close,
    Return,
    Go,
    Func(Function),
    Prop(String),
    Var(usize),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Open => write!(f, "("),
            Token::Close => write!(f, ")"),
            Token::Return => write!(f, "Return"),
            Token::Go => write!(f, "GO"),
            Token::Func(func) => write!(f, "{}", func.name()),
            Token::Prop(p) => write!(f, "{p}"),
            Token::Var(i) => write!(f, "R{}", i + 1),
        }
    }
}

impl Token {
    /// Parses one canonical token. Variable tokens are `R1`, `R2`, ...;
    /// anything that is not punctuation, a keyword, or a variable is a
    /// property id.
    pub fn parse(s: &str) -> Result<Token, ParseError> {
        match s {
            "(" => Ok(Token::Open),
            ")" => Ok(Token::Close),
            "Return" => Ok(Token::Return),
            "GO" => Ok(Token::Go),
            "Hop" => Ok(Token::Func(Function::Hop)),
            "ArgMax" => Ok(Token::Func(Function::ArgMax)),
            "ArgMin" => Ok(Token::Func(Function::ArgMin)),
            "Filter" => Ok(Token::Func(Function::Filter)),
            _ => {
                if let Some(num) = s.strip_prefix('R') {
                    if let Ok(i) = num.parse::<usize>() {
                        if i >= 1 {
                            return Ok(Token::Var(i - 1));
                        }
                    }
                }
                if s.is_empty() {
                    Err(ParseError::Empty)
                } else {
                    Ok(Token::Prop(s.to_string()))
                }
            }
        }
    }
}

/// A parsed expression `( F var.. prop )`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Expression {
    pub func: Function,
    pub vars: Vec<usize>,
    pub prop: String,
}

/// A token sequence; well-formed iff it parses as `expr* Return`.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Program {
    pub tokens: Vec<Token>,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("empty token")]
    Empty,
    #[error("unexpected token `{0}` at position {1}")]
    Unexpected(String, usize),
    #[error("program truncated (missing Return)")]
    Truncated,
}

impl Program {
    pub fn new(tokens: Vec<Token>) -> Self {
        Program { tokens }
    }

    /// Parses the canonical space-separated text form, e.g.
    /// `( Hop R1 city ) Return`.
    pub fn parse(text: &str) -> Result<Program, ParseError> {
        let tokens = text
            .split_whitespace()
            .map(Token::parse)
            .collect::<Result<Vec<_>, _>>()?;
        let prog = Program { tokens };
        prog.expressions()?;
        Ok(prog)
    }

    /// Canonical text form; round-trips exactly through [`Program::parse`].
    pub fn text(&self) -> String {
        let parts: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        parts.join(" ")
    }

    /// Grammar check: splits the token stream into expressions. Errors on
    /// ill-formed sequences; variable existence is checked at execution.
    pub fn expressions(&self) -> Result<Vec<Expression>, ParseError> {
        let mut exprs = Vec::new();
        let mut it = self.tokens.iter().enumerate().peekable();
        loop {
            match it.next() {
                Some((_, Token::Return)) => {
                    return match it.next() {
                        None => Ok(exprs),
                        Some((i, t)) => Err(ParseError::Unexpected(t.to_string(), i)),
                    };
                }
                Some((_, Token::Open)) => {
                    let func = match it.next() {
                        Some((_, Token::Func(f))) => *f,
                        Some((i, t)) => return Err(ParseError::Unexpected(t.to_string(), i)),
                        None => return Err(ParseError::Truncated),
                    };
                    let mut vars = Vec::new();
                    for _ in 0..func.num_vars() {
                        match it.next() {
                            Some((_, Token::Var(v))) => vars.push(*v),
                            Some((i, t)) => return Err(ParseError::Unexpected(t.to_string(), i)),
                            None => return Err(ParseError::Truncated),
                        }
                    }
                    let prop = match it.next() {
                        Some((_, Token::Prop(p))) => p.clone(),
                        Some((i, t)) => return Err(ParseError::Unexpected(t.to_string(), i)),
                        None => return Err(ParseError::Truncated),
                    };
                    match it.next() {
                        Some((_, Token::Close)) => {}
                        Some((i, t)) => return Err(ParseError::Unexpected(t.to_string(), i)),
                        None => return Err(ParseError::Truncated),
                    }
                    exprs.push(Expression { func, vars, prop });
                }
                Some((i, t)) => return Err(ParseError::Unexpected(t.to_string(), i)),
                None => return Err(ParseError::Truncated),
            }
        }
    }

    pub fn num_expressions(&self) -> usize {
        self.tokens.iter().filter(|t| **t == Token::Close).count()
    }
}

/// Ordered variable denotations. Entity-linked variables come first, then
/// expression results in creation order. Entries are never mutated; the store
/// is a cheap copy-on-extend snapshot so beam branches never alias.
#[derive(Clone, Debug, Default)]
pub struct VariableStore {
    entries: Vec<Arc<ValueSet>>,
}

impl VariableStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entity_links<'a>(entities: impl IntoIterator<Item = &'a str>) -> Self {
        let entries = entities
            .into_iter()
            .map(|e| Arc::new(ValueSet::from([Value::entity(e)])))
            .collect();
        VariableStore { entries }
    }

    pub fn push(&mut self, denotation: Arc<ValueSet>) -> usize {
        self.entries.push(denotation);
        self.entries.len() - 1
    }

    pub fn get(&self, i: usize) -> Option<&Arc<ValueSet>> {
        self.entries.get(i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<ValueSet>> {
        self.entries.iter()
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("unknown variable R{}", .0 + 1)]
    UnknownVariable(usize),
    #[error("incomparable types for {func:?} over property `{prop}`")]
    IncomparableTypes { func: Function, prop: String },
    #[error("ill-formed program: {0}")]
    Parse(#[from] ParseError),
}

/// Per-question cache of executed expressions, keyed by the argument
/// denotations rather than variable indexes so beam branches share work.
#[derive(Default)]
pub struct ExecCache {
    map: HashMap<(Function, Vec<ValueSet>, String), Result<Arc<ValueSet>, ExecError>>,
}

impl ExecCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Executes one expression against the store without appending the result.
pub fn execute_expression(
    kb: &KnowledgeBase,
    store: &VariableStore,
    expr: &Expression,
) -> Result<Arc<ValueSet>, ExecError> {
    let arg = |i: usize| -> Result<&Arc<ValueSet>, ExecError> {
        store.get(expr.vars[i]).ok_or(ExecError::UnknownVariable(expr.vars[i]))
    };
    match expr.func {
        Function::Hop => Ok(Arc::new(kb.forward(arg(0)?, &expr.prop))),
        Function::Filter => {
            let r1 = arg(0)?.clone();
            let r2 = arg(1)?.clone();
            let mut out = ValueSet::new();
            for v in r1.iter() {
                if let Value::Entity(e) = v {
                    if let Some(objs) = kb.objects(e, &expr.prop) {
                        if objs.iter().any(|o| r2.contains(o)) {
                            out.insert(v.clone());
                        }
                    }
                }
            }
            Ok(Arc::new(out))
        }
        Function::ArgMax | Function::ArgMin => {
            let r = arg(0)?.clone();
            let maximize = expr.func == Function::ArgMax;
            // per-entity best comparable p-value; entities without one are excluded
            let mut bests: Vec<(Value, Value)> = Vec::new();
            let mut seen_number = false;
            let mut seen_date = false;
            for v in r.iter() {
                let Value::Entity(e) = v else { continue };
                let Some(objs) = kb.objects(e, &expr.prop) else { continue };
                let mut best: Option<Value> = None;
                for o in objs.iter() {
                    match o {
                        Value::Number(_) => seen_number = true,
                        Value::Date(_) => seen_date = true,
                        Value::Entity(_) => continue,
                    }
                    best = Some(match best {
                        None => o.clone(),
                        Some(b) => {
                            let keep_new = match o.cmp_comparable(&b) {
                                Some(ord) => {
                                    if maximize {
                                        ord == std::cmp::Ordering::Greater
                                    } else {
                                        ord == std::cmp::Ordering::Less
                                    }
                                }
                                None => {
                                    return Err(ExecError::IncomparableTypes {
                                        func: expr.func,
                                        prop: expr.prop.clone(),
                                    })
                                }
                            };
                            if keep_new {
                                o.clone()
                            } else {
                                b
                            }
                        }
                    });
                }
                if let Some(b) = best {
                    bests.push((v.clone(), b));
                }
            }
            if seen_number && seen_date {
                return Err(ExecError::IncomparableTypes {
                    func: expr.func,
                    prop: expr.prop.clone(),
                });
            }
            // global extremum over per-entity bests; all tied entities returned
            let mut global: Option<Value> = None;
            for (_, b) in &bests {
                global = Some(match global {
                    None => b.clone(),
                    Some(g) => {
                        let ord = b.cmp_comparable(&g).expect("single comparable type");
                        let keep_new = if maximize {
                            ord == std::cmp::Ordering::Greater
                        } else {
                            ord == std::cmp::Ordering::Less
                        };
                        if keep_new {
                            b.clone()
                        } else {
                            g
                        }
                    }
                });
            }
            let out: ValueSet = match global {
                None => ValueSet::new(),
                Some(g) => bests
                    .into_iter()
                    .filter(|(_, b)| *b == g)
                    .map(|(v, _)| v)
                    .collect(),
            };
            Ok(Arc::new(out))
        }
    }
}

fn execute_cached(
    kb: &KnowledgeBase,
    store: &VariableStore,
    expr: &Expression,
    cache: Option<&mut ExecCache>,
) -> Result<Arc<ValueSet>, ExecError> {
    match cache {
        None => execute_expression(kb, store, expr),
        Some(cache) => {
            let mut args = Vec::with_capacity(expr.vars.len());
            for &v in &expr.vars {
                match store.get(v) {
                    Some(s) => args.push((**s).clone()),
                    None => return Err(ExecError::UnknownVariable(v)),
                }
            }
            let key = (expr.func, args, expr.prop.clone());
            if let Some(hit) = cache.map.get(&key) {
                return hit.clone();
            }
            let res = execute_expression(kb, store, expr);
            cache.map.insert(key, res.clone());
            res
        }
    }
}

/// Executes a whole program left-to-right, appending result variables to a
/// copy of `linked`. Returns the last computed variable's denotation, or the
/// empty set for a zero-expression program.
pub fn execute_program(
    kb: &KnowledgeBase,
    linked: &VariableStore,
    program: &Program,
) -> Result<ValueSet, ExecError> {
    let exprs = program.expressions()?;
    let mut store = linked.clone();
    let mut last = ValueSet::new();
    for expr in &exprs {
        let result = execute_expression(kb, &store, expr)?;
        last = (*result).clone();
        store.push(result);
    }
    Ok(last)
}

/// Curriculum-stage restrictions on the program space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumConstraints {
    pub allowed_functions: BTreeSet<Function>,
    pub max_expressions: usize,
    /// When set, restricts `Hop`'s property slot only.
    pub allowed_properties: Option<BTreeSet<String>>,
}

impl CurriculumConstraints {
    pub fn unrestricted(max_expressions: usize) -> Self {
        CurriculumConstraints {
            allowed_functions: Function::ALL.into_iter().collect(),
            max_expressions,
            allowed_properties: None,
        }
    }

    pub fn functions(
        funcs: impl IntoIterator<Item = Function>,
        max_expressions: usize,
    ) -> Self {
        CurriculumConstraints {
            allowed_functions: funcs.into_iter().collect(),
            max_expressions,
            allowed_properties: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PrefixError {
    #[error("token `{0}` invalid at position {1} of prefix")]
    InvalidToken(String, usize),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Clone, Debug, PartialEq)]
enum Slot {
    TopLevel,
    ExpectFunc,
    ExpectVar { func: Function, got: Vec<usize> },
    ExpectProp { func: Function, vars: Vec<usize> },
    ExpectClose { func: Function, vars: Vec<usize>, prop: String },
    Finished,
}

/// Incremental decoding state: grammar position plus the evolving variable
/// store. Pure given (kb, constraints); cloning snapshots a beam branch.
#[derive(Clone, Debug)]
pub struct ProgramState {
    slot: Slot,
    expr_count: usize,
    store: VariableStore,
    tokens: Vec<Token>,
}

impl ProgramState {
    pub fn new(linked: VariableStore) -> Self {
        ProgramState {
            slot: Slot::TopLevel,
            expr_count: 0,
            store: linked,
            tokens: Vec::new(),
        }
    }

    pub fn finished(&self) -> bool {
        self.slot == Slot::Finished
    }

    pub fn store(&self) -> &VariableStore {
        &self.store
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn num_expressions(&self) -> usize {
        self.expr_count
    }

    pub fn program(&self) -> Program {
        Program::new(self.tokens.clone())
    }

    /// Properties valid in a property slot: reachable from the governing
    /// variable, intersected with the curriculum restriction for `Hop`.
    fn slot_properties(
        &self,
        kb: &KnowledgeBase,
        func: Function,
        var: usize,
        constraints: &CurriculumConstraints,
    ) -> BTreeSet<String> {
        let Some(denotation) = self.store.get(var) else {
            return BTreeSet::new();
        };
        let mut props = kb.reachable_properties(denotation);
        if func == Function::Hop {
            if let Some(allowed) = &constraints.allowed_properties {
                props.retain(|p| allowed.contains(p));
            }
        }
        props
    }

    /// Variables usable in var-slot `got.len()` of `func`: the slot that
    /// governs the property argument must see at least one valid property,
    /// so no offered variable leads to a dead end.
    fn slot_variables(
        &self,
        kb: &KnowledgeBase,
        func: Function,
        got: usize,
        constraints: &CurriculumConstraints,
    ) -> Vec<usize> {
        (0..self.store.len())
            .filter(|&v| {
                let governs_prop = got == 0; // property reachability is checked on the first var
                if governs_prop {
                    !self.slot_properties(kb, func, v, constraints).is_empty()
                } else {
                    true
                }
            })
            .collect()
    }

    fn viable_functions(
        &self,
        kb: &KnowledgeBase,
        constraints: &CurriculumConstraints,
    ) -> Vec<Function> {
        Function::ALL
            .into_iter()
            .filter(|f| constraints.allowed_functions.contains(f))
            .filter(|f| !self.slot_variables(kb, *f, 0, constraints).is_empty())
            .collect()
    }

    /// The exact set of tokens valid next. Never empty for a reachable state:
    /// `Return` is always available at top level, and `(` is only offered
    /// when some expression can complete.
    pub fn valid_tokens(
        &self,
        kb: &KnowledgeBase,
        constraints: &CurriculumConstraints,
    ) -> BTreeSet<Token> {
        match &self.slot {
            Slot::TopLevel => {
                let mut out = BTreeSet::from([Token::Return]);
                if self.expr_count < constraints.max_expressions
                    && !self.viable_functions(kb, constraints).is_empty()
                {
                    out.insert(Token::Open);
                }
                out
            }
            Slot::ExpectFunc => self
                .viable_functions(kb, constraints)
                .into_iter()
                .map(Token::Func)
                .collect(),
            Slot::ExpectVar { func, got } => self
                .slot_variables(kb, *func, got.len(), constraints)
                .into_iter()
                .map(Token::Var)
                .collect(),
            Slot::ExpectProp { func, vars } => self
                .slot_properties(kb, *func, vars[0], constraints)
                .into_iter()
                .map(Token::Prop)
                .collect(),
            Slot::ExpectClose { .. } => BTreeSet::from([Token::Close]),
            Slot::Finished => BTreeSet::new(),
        }
    }

    /// Consumes one token. Returns the executed expression's denotation when
    /// the token closes an expression (the result is also appended to the
    /// store). The token must come from [`Self::valid_tokens`].
    pub fn advance(
        &mut self,
        kb: &KnowledgeBase,
        token: &Token,
        constraints: &CurriculumConstraints,
        cache: Option<&mut ExecCache>,
    ) -> Result<Option<Arc<ValueSet>>, PrefixError> {
        let valid = self.valid_tokens(kb, constraints);
        if !valid.contains(token) {
            return Err(PrefixError::InvalidToken(token.to_string(), self.tokens.len()));
        }
        self.tokens.push(token.clone());
        match (&mut self.slot, token) {
            (Slot::TopLevel, Token::Return) => {
                self.slot = Slot::Finished;
                Ok(None)
            }
            (Slot::TopLevel, Token::Open) => {
                self.slot = Slot::ExpectFunc;
                Ok(None)
            }
            (Slot::ExpectFunc, Token::Func(f)) => {
                self.slot = Slot::ExpectVar {
                    func: *f,
                    got: Vec::new(),
                };
                Ok(None)
            }
            (Slot::ExpectVar { func, got }, Token::Var(v)) => {
                got.push(*v);
                if got.len() == func.num_vars() {
                    self.slot = Slot::ExpectProp {
                        func: *func,
                        vars: got.clone(),
                    };
                }
                Ok(None)
            }
            (Slot::ExpectProp { func, vars }, Token::Prop(p)) => {
                self.slot = Slot::ExpectClose {
                    func: *func,
                    vars: vars.clone(),
                    prop: p.clone(),
                };
                Ok(None)
            }
            (Slot::ExpectClose { func, vars, prop }, Token::Close) => {
                let expr = Expression {
                    func: *func,
                    vars: vars.clone(),
                    prop: prop.clone(),
                };
                let result = execute_cached(kb, &self.store, &expr, cache)?;
                self.store.push(result.clone());
                self.expr_count += 1;
                self.slot = Slot::TopLevel;
                Ok(Some(result))
            }
            _ => unreachable!("token was validated against the slot"),
        }
    }
}

/// `valid_tokens` over an explicit prefix: replays the prefix (executing
/// completed expressions), then reports the valid set.
pub fn valid_tokens(
    kb: &KnowledgeBase,
    linked: &VariableStore,
    prefix: &[Token],
    constraints: &CurriculumConstraints,
) -> Result<BTreeSet<Token>, PrefixError> {
    let mut state = ProgramState::new(linked.clone());
    for token in prefix {
        state.advance(kb, token, constraints, None)?;
    }
    Ok(state.valid_tokens(kb, constraints))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb0() -> KnowledgeBase {
        KnowledgeBase::from_triples([
            ("USA".into(), "city".into(), Value::entity("NYC")),
            ("USA".into(), "city".into(), Value::entity("SF")),
            ("NYC".into(), "pop".into(), Value::number(8.6)),
            ("SF".into(), "pop".into(), Value::number(0.9)),
            ("USA".into(), "capital".into(), Value::entity("DC")),
        ])
    }

    fn linked_usa() -> VariableStore {
        VariableStore::from_entity_links(["USA"])
    }

    fn set(vals: &[Value]) -> ValueSet {
        vals.iter().cloned().collect()
    }

    #[test]
    fn program_text_round_trip() {
        let text = "( Hop R1 city ) ( ArgMax R2 pop ) Return";
        let prog = Program::parse(text).unwrap();
        assert_eq!(prog.text(), text);
        assert_eq!(prog.num_expressions(), 2);
    }

    #[test]
    fn parse_rejects_ill_formed() {
        assert!(Program::parse("( Hop R1 city )").is_err()); // missing Return
        assert!(Program::parse("( Hop city R1 ) Return").is_err());
        assert!(Program::parse("Return (").is_err());
        assert!(Program::parse("( Filter R1 city ) Return").is_err()); // one var only
    }

    #[test]
    fn hop_executes() {
        let result = execute_program(
            &kb0(),
            &linked_usa(),
            &Program::parse("( Hop R1 city ) Return").unwrap(),
        )
        .unwrap();
        assert_eq!(result, set(&[Value::entity("NYC"), Value::entity("SF")]));
    }

    #[test]
    fn filter_executes() {
        // R1 = {USA}, R2 = {n:8.6}; Hop gives {NYC, SF}; Filter keeps NYC
        let mut linked = linked_usa();
        linked.push(Arc::new(set(&[Value::number(8.6)])));
        let result = execute_program(
            &kb0(),
            &linked,
            &Program::parse("( Hop R1 city ) ( Filter R3 R2 pop ) Return").unwrap(),
        )
        .unwrap();
        assert_eq!(result, set(&[Value::entity("NYC")]));
    }

    #[test]
    fn argmax_composes_with_hop() {
        let result = execute_program(
            &kb0(),
            &linked_usa(),
            &Program::parse("( Hop R1 city ) ( ArgMax R2 pop ) Return").unwrap(),
        )
        .unwrap();
        assert_eq!(result, set(&[Value::entity("NYC")]));
        let result = execute_program(
            &kb0(),
            &linked_usa(),
            &Program::parse("( Hop R1 city ) ( ArgMin R2 pop ) Return").unwrap(),
        )
        .unwrap();
        assert_eq!(result, set(&[Value::entity("SF")]));
    }

    #[test]
    fn argmax_ties_return_all() {
        let kb = KnowledgeBase::from_triples([
            ("A".into(), "v".into(), Value::number(2.0)),
            ("B".into(), "v".into(), Value::number(2.0)),
            ("C".into(), "v".into(), Value::number(1.0)),
        ]);
        let mut linked = VariableStore::new();
        linked.push(Arc::new(set(&[
            Value::entity("A"),
            Value::entity("B"),
            Value::entity("C"),
        ])));
        let result =
            execute_program(&kb, &linked, &Program::parse("( ArgMax R1 v ) Return").unwrap())
                .unwrap();
        assert_eq!(result, set(&[Value::entity("A"), Value::entity("B")]));
    }

    #[test]
    fn argmax_mixed_types_error() {
        let kb = KnowledgeBase::from_triples([
            ("A".into(), "v".into(), Value::number(2.0)),
            ("B".into(), "v".into(), Value::Date("2000-01-01".parse().unwrap())),
        ]);
        let mut linked = VariableStore::new();
        linked.push(Arc::new(set(&[Value::entity("A"), Value::entity("B")])));
        let err =
            execute_program(&kb, &linked, &Program::parse("( ArgMax R1 v ) Return").unwrap())
                .unwrap_err();
        assert!(matches!(err, ExecError::IncomparableTypes { .. }));
    }

    #[test]
    fn argmax_multivalued_entity_uses_own_best() {
        let kb = KnowledgeBase::from_triples([
            ("A".into(), "v".into(), Value::number(1.0)),
            ("A".into(), "v".into(), Value::number(5.0)),
            ("B".into(), "v".into(), Value::number(4.0)),
        ]);
        let mut linked = VariableStore::new();
        linked.push(Arc::new(set(&[Value::entity("A"), Value::entity("B")])));
        let result =
            execute_program(&kb, &linked, &Program::parse("( ArgMax R1 v ) Return").unwrap())
                .unwrap();
        assert_eq!(result, set(&[Value::entity("A")]));
    }

    #[test]
    fn argmax_ignores_entity_valued_objects() {
        let kb = KnowledgeBase::from_triples([
            ("A".into(), "v".into(), Value::entity("X")),
            ("B".into(), "v".into(), Value::number(1.0)),
        ]);
        let mut linked = VariableStore::new();
        linked.push(Arc::new(set(&[Value::entity("A"), Value::entity("B")])));
        let result =
            execute_program(&kb, &linked, &Program::parse("( ArgMax R1 v ) Return").unwrap())
                .unwrap();
        assert_eq!(result, set(&[Value::entity("B")]));
    }

    #[test]
    fn unknown_variable_errors() {
        let err = execute_program(
            &kb0(),
            &linked_usa(),
            &Program::parse("( Hop R9 city ) Return").unwrap(),
        )
        .unwrap_err();
        assert_eq!(err, ExecError::UnknownVariable(8));
    }

    #[test]
    fn return_only_is_empty() {
        let result =
            execute_program(&kb0(), &linked_usa(), &Program::parse("Return").unwrap()).unwrap();
        assert!(result.is_empty());
    }

    #[test]
    fn valid_tokens_at_start() {
        let c = CurriculumConstraints::unrestricted(3);
        let valid = valid_tokens(&kb0(), &linked_usa(), &[], &c).unwrap();
        assert_eq!(valid, BTreeSet::from([Token::Open, Token::Return]));
    }

    #[test]
    fn valid_tokens_after_open() {
        let c = CurriculumConstraints::unrestricted(3);
        let valid = valid_tokens(&kb0(), &linked_usa(), &[Token::Open], &c).unwrap();
        let funcs: BTreeSet<Token> = Function::ALL.into_iter().map(Token::Func).collect();
        assert_eq!(valid, funcs);
    }

    #[test]
    fn valid_tokens_hop_property_slot() {
        let c = CurriculumConstraints::unrestricted(3);
        let prefix = [Token::Open, Token::Func(Function::Hop), Token::Var(0)];
        let valid = valid_tokens(&kb0(), &linked_usa(), &prefix, &c).unwrap();
        assert_eq!(
            valid,
            BTreeSet::from([Token::Prop("capital".into()), Token::Prop("city".into())])
        );
    }

    #[test]
    fn empty_store_offers_return_only() {
        let c = CurriculumConstraints::unrestricted(3);
        let valid = valid_tokens(&kb0(), &VariableStore::new(), &[], &c).unwrap();
        assert_eq!(valid, BTreeSet::from([Token::Return]));
    }

    #[test]
    fn variable_without_reachable_props_not_offered() {
        // R1 = {n:8.6}: numbers have no outgoing edges, so Hop's var slot
        // must not offer it (and with no other variable, "(" is not offered)
        let mut linked = VariableStore::new();
        linked.push(Arc::new(set(&[Value::number(8.6)])));
        let c = CurriculumConstraints::unrestricted(3);
        let valid = valid_tokens(&kb0(), &linked, &[], &c).unwrap();
        assert_eq!(valid, BTreeSet::from([Token::Return]));
    }

    #[test]
    fn max_expressions_forces_return() {
        let c = CurriculumConstraints::functions([Function::Hop], 1);
        let prefix: Vec<Token> = Program::parse("( Hop R1 city ) Return")
            .unwrap()
            .tokens[..5]
            .to_vec();
        let valid = valid_tokens(&kb0(), &linked_usa(), &prefix, &c).unwrap();
        assert_eq!(valid, BTreeSet::from([Token::Return]));
    }

    #[test]
    fn constrained_functions_only() {
        let c = CurriculumConstraints::functions([Function::Hop], 2);
        let valid = valid_tokens(&kb0(), &linked_usa(), &[Token::Open], &c).unwrap();
        assert_eq!(valid, BTreeSet::from([Token::Func(Function::Hop)]));
    }

    #[test]
    fn allowed_properties_restrict_hop_only() {
        let mut c = CurriculumConstraints::unrestricted(3);
        c.allowed_properties = Some(BTreeSet::from(["capital".to_string()]));
        let prefix = [Token::Open, Token::Func(Function::Hop), Token::Var(0)];
        let valid = valid_tokens(&kb0(), &linked_usa(), &prefix, &c).unwrap();
        assert_eq!(valid, BTreeSet::from([Token::Prop("capital".into())]));
        // ArgMax's property slot is unrestricted
        let prefix = [Token::Open, Token::Func(Function::ArgMax), Token::Var(0)];
        let valid = valid_tokens(&kb0(), &linked_usa(), &prefix, &c).unwrap();
        assert_eq!(
            valid,
            BTreeSet::from([Token::Prop("capital".into()), Token::Prop("city".into())])
        );
    }

    #[test]
    fn invalid_prefix_is_contract_violation() {
        let c = CurriculumConstraints::unrestricted(3);
        let err = valid_tokens(&kb0(), &linked_usa(), &[Token::Close], &c).unwrap_err();
        assert!(matches!(err, PrefixError::InvalidToken(_, 0)));
    }

    #[test]
    fn exec_cache_shares_work() {
        let kb = kb0();
        let c = CurriculumConstraints::unrestricted(3);
        let mut cache = ExecCache::new();
        for _ in 0..2 {
            let mut state = ProgramState::new(linked_usa());
            for t in Program::parse("( Hop R1 city ) Return").unwrap().tokens {
                state.advance(&kb, &t, &c, Some(&mut cache)).unwrap();
            }
        }
        assert_eq!(cache.len(), 1);
    }
}
