//! C ABI over the parser core. Handles are opaque pointers; every fallible
//! call returns an `NsmStatus` and leaves a message for `nsm_last_error`.
//! Strings returned through out-params are heap-allocated and must be
//! released with `nsm_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nsm::datagen::{anonymize_and_link, Lexicon};
use nsm::interpreter::{execute_program, CurriculumConstraints, ExecCache, Program, VariableStore};
use nsm::kbstore::KnowledgeBase;
use nsm::nn::{EncodedQuestion, Model};
use nsm::search::beam_decode;

/// Result of every fallible call. `NSM_OK` is zero.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum NsmStatus {
    NsmOk = 0,
    NsmInvalidArgument = 1,
    NsmIoError = 2,
    NsmParseError = 3,
    NsmExecError = 4,
    NsmInternalError = 5,
}

/// Loaded triple store.
pub struct NsmKb(KnowledgeBase);
/// Surface-form-to-entity table for linking question text.
pub struct NsmLexicon(Lexicon);
/// Trained programmer checkpoint.
pub struct NsmModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call; never null.
#[no_mangle]
pub extern "C" fn nsm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, NsmStatus> {
    if ptr.is_null() {
        set_error(format!("{name} is null"));
        return Err(NsmStatus::NsmInvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        NsmStatus::NsmInvalidArgument
    })
}

fn guarded(f: impl FnOnce() -> NsmStatus) -> NsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            NsmStatus::NsmInternalError
        }
    }
}

fn out_string(slot: *mut *mut c_char, text: String) -> Result<(), NsmStatus> {
    let c = CString::new(text).map_err(|_| {
        set_error("result contains an interior NUL byte");
        NsmStatus::NsmInternalError
    })?;
    unsafe { *slot = c.into_raw() };
    Ok(())
}

/// Frees a string returned by this library. Null is a no-op.
#[no_mangle]
pub extern "C" fn nsm_string_free(s: *mut c_char) {
    if !s.is_null() {
        unsafe { drop(CString::from_raw(s)) };
    }
}

/// Loads a tab-separated triple file (`subject<TAB>property<TAB>object`).
#[no_mangle]
pub unsafe extern "C" fn nsm_kb_open(path: *const c_char, out: *mut *mut NsmKb) -> NsmStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return NsmStatus::NsmInvalidArgument;
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match KnowledgeBase::load_triples(path) {
            Ok(kb) => {
                *out = Box::into_raw(Box::new(NsmKb(kb)));
                NsmStatus::NsmOk
            }
            Err(e) => {
                set_error(e.to_string());
                NsmStatus::NsmIoError
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn nsm_kb_close(kb: *mut NsmKb) {
    if !kb.is_null() {
        drop(Box::from_raw(kb));
    }
}

#[no_mangle]
pub unsafe extern "C" fn nsm_kb_num_triples(kb: *const NsmKb) -> usize {
    if kb.is_null() {
        return 0;
    }
    (*kb).0.num_triples()
}

/// Loads a tab-separated `surface<TAB>entity` lexicon.
#[no_mangle]
pub unsafe extern "C" fn nsm_lexicon_open(
    path: *const c_char,
    out: *mut *mut NsmLexicon,
) -> NsmStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return NsmStatus::NsmInvalidArgument;
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Lexicon::load(path) {
            Ok(lex) => {
                *out = Box::into_raw(Box::new(NsmLexicon(lex)));
                NsmStatus::NsmOk
            }
            Err(e) => {
                set_error(e.to_string());
                NsmStatus::NsmIoError
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn nsm_lexicon_close(lex: *mut NsmLexicon) {
    if !lex.is_null() {
        drop(Box::from_raw(lex));
    }
}

/// Loads a checkpoint written by the trainer (JSON).
#[no_mangle]
pub unsafe extern "C" fn nsm_model_open(path: *const c_char, out: *mut *mut NsmModel) -> NsmStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return NsmStatus::NsmInvalidArgument;
        }
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Model::load(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(NsmModel(m)));
                NsmStatus::NsmOk
            }
            Err(e) => {
                set_error(e.to_string());
                NsmStatus::NsmIoError
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn nsm_model_close(model: *mut NsmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn render_values(values: impl IntoIterator<Item = impl std::fmt::Display>) -> String {
    let mut lines: Vec<String> = values.into_iter().map(|v| v.to_string()).collect();
    let text = lines.join("\n");
    lines.clear();
    text
}

/// Executes a program text against the KB. `entities` are the pre-linked
/// entity ids bound to the leading variables, in order. The denotation is
/// written to `out_values` as newline-joined value texts (empty string for
/// the empty set).
#[no_mangle]
pub unsafe extern "C" fn nsm_run_program(
    kb: *const NsmKb,
    program: *const c_char,
    entities: *const *const c_char,
    n_entities: usize,
    out_values: *mut *mut c_char,
) -> NsmStatus {
    guarded(|| {
        if kb.is_null() || out_values.is_null() {
            set_error("kb or out_values is null");
            return NsmStatus::NsmInvalidArgument;
        }
        let text = match utf8_arg(program, "program") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let mut linked: Vec<&str> = Vec::with_capacity(n_entities);
        for i in 0..n_entities {
            if entities.is_null() {
                set_error("entities is null but n_entities > 0");
                return NsmStatus::NsmInvalidArgument;
            }
            match utf8_arg(*entities.add(i), "entity") {
                Ok(e) => linked.push(e),
                Err(s) => return s,
            }
        }
        let program = match Program::parse(text) {
            Ok(p) => p,
            Err(e) => {
                set_error(e.to_string());
                return NsmStatus::NsmParseError;
            }
        };
        let store = VariableStore::from_entity_links(linked.iter().copied());
        match execute_program(&(*kb).0, &store, &program) {
            Ok(values) => match out_string(out_values, render_values(values)) {
                Ok(()) => NsmStatus::NsmOk,
                Err(s) => s,
            },
            Err(e) => {
                set_error(e.to_string());
                NsmStatus::NsmExecError
            }
        }
    })
}

/// Answers a whitespace-tokenized question: links entity mentions through
/// the lexicon, beam-decodes a program, executes it, and returns both the
/// best program text and its newline-joined denotation.
#[no_mangle]
pub unsafe extern "C" fn nsm_answer(
    model: *const NsmModel,
    kb: *const NsmKb,
    lexicon: *const NsmLexicon,
    question: *const c_char,
    beam: usize,
    out_program: *mut *mut c_char,
    out_values: *mut *mut c_char,
) -> NsmStatus {
    guarded(|| {
        if model.is_null() || kb.is_null() || lexicon.is_null() {
            set_error("model, kb, or lexicon is null");
            return NsmStatus::NsmInvalidArgument;
        }
        if out_program.is_null() || out_values.is_null() {
            set_error("out_program or out_values is null");
            return NsmStatus::NsmInvalidArgument;
        }
        let question = match utf8_arg(question, "question") {
            Ok(q) => q,
            Err(s) => return s,
        };
        let tokens: Vec<String> = question.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            set_error("question is empty");
            return NsmStatus::NsmInvalidArgument;
        }
        let (words, spans) = anonymize_and_link(&tokens, &(*lexicon).0);
        let encoded = EncodedQuestion { words, spans };
        let constraints = CurriculumConstraints::unrestricted(3);
        let mut cache = ExecCache::new();
        let decoded = match beam_decode(
            &(*model).0,
            &(*kb).0,
            &encoded,
            beam.max(1),
            &constraints,
            30,
            &mut cache,
        ) {
            Ok(d) => d,
            Err(e) => {
                set_error(e.to_string());
                return NsmStatus::NsmInternalError;
            }
        };
        let best = decoded.into_iter().next().expect("beam is never empty");
        if let Err(s) = out_string(out_program, best.program.text()) {
            return s;
        }
        match out_string(out_values, render_values(best.denotation)) {
            Ok(()) => NsmStatus::NsmOk,
            Err(s) => {
                nsm_string_free(*out_program);
                *out_program = ptr::null_mut();
                s
            }
        }
    })
}
