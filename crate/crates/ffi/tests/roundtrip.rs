//! Exercises the C surface the way a foreign caller would: everything goes
//! through raw pointers and the exported symbols.

use std::ffi::{c_char, CStr, CString};
use std::io::Write;
use std::ptr;

use nsm_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take_string(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    nsm_string_free(p);
    s
}

fn write_kb(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("kb.tsv");
    let mut f = std::fs::File::create(&path).unwrap();
    for (s, p, o) in [
        ("m.a", "/film/film/director", "m.d"),
        ("m.b", "/film/film/director", "m.d"),
        ("m.a", "/film/film/year", "n:1999"),
        ("m.b", "/film/film/year", "n:2004"),
    ] {
        writeln!(f, "{s}\t{p}\t{o}").unwrap();
    }
    path
}

#[test]
fn kb_and_program_execution() {
    let dir = tempfile::tempdir().unwrap();
    let kb_path = write_kb(dir.path());

    unsafe {
        let mut kb: *mut NsmKb = ptr::null_mut();
        let status = nsm_kb_open(c(kb_path.to_str().unwrap()).as_ptr(), &mut kb);
        assert!(status == NsmStatus::NsmOk);
        assert_eq!(nsm_kb_num_triples(kb), 4);

        let ent = c("m.a");
        let ents = [ent.as_ptr()];
        let mut out: *mut c_char = ptr::null_mut();
        let prog = c("( Hop R1 /film/film/director ) Return");
        let status = nsm_run_program(kb, prog.as_ptr(), ents.as_ptr(), 1, &mut out);
        assert!(status == NsmStatus::NsmOk);
        assert_eq!(take_string(out), "m.d");

        // ArgMax over a numeric property
        let ent_d = c("m.d");
        let ents = [ent_d.as_ptr()];
        let mut out: *mut c_char = ptr::null_mut();
        let prog = c(
            "( Hop R1 /film/film/director ) ( ArgMax R2 /film/film/year ) Return",
        );
        // R1 = {m.d} has no director edges, so the hop and argmax are empty
        let status = nsm_run_program(kb, prog.as_ptr(), ents.as_ptr(), 1, &mut out);
        assert!(status == NsmStatus::NsmOk);
        assert_eq!(take_string(out), "");

        nsm_kb_close(kb);
    }
}

#[test]
fn error_paths_set_messages() {
    unsafe {
        let mut kb: *mut NsmKb = ptr::null_mut();
        let status = nsm_kb_open(c("/nonexistent/kb.tsv").as_ptr(), &mut kb);
        assert!(status == NsmStatus::NsmIoError);
        let msg = CStr::from_ptr(nsm_last_error()).to_str().unwrap();
        assert!(!msg.is_empty());

        let status = nsm_kb_open(ptr::null(), &mut kb);
        assert!(status == NsmStatus::NsmInvalidArgument);

        // bad program text on a real KB
        let dir = tempfile::tempdir().unwrap();
        let kb_path = write_kb(dir.path());
        let status = nsm_kb_open(c(kb_path.to_str().unwrap()).as_ptr(), &mut kb);
        assert!(status == NsmStatus::NsmOk);
        let mut out: *mut c_char = ptr::null_mut();
        let prog = c("( Hop R1");
        let status = nsm_run_program(kb, prog.as_ptr(), ptr::null(), 0, &mut out);
        assert!(status == NsmStatus::NsmParseError);
        nsm_kb_close(kb);
    }
}

#[test]
fn model_answering_end_to_end() {
    // tiny untrained models still beam-decode deterministically; exercise
    // the full load -> link -> decode -> execute path through the ABI
    let dir = tempfile::tempdir().unwrap();
    let kb_path = write_kb(dir.path());

    let lex_path = dir.path().join("lexicon.tsv");
    std::fs::write(&lex_path, "alpha film\tm.a\nbeta film\tm.b\n").unwrap();

    let model_path = dir.path().join("model.json");
    {
        use nsm::learning::TrainConfig;
        use nsm::nn::{Model, WordVocab};
        let kb = nsm::kbstore::KnowledgeBase::load_triples(&kb_path).unwrap();
        let cfg = TrainConfig { d_word: 8, d_hidden: 8, ..Default::default() };
        let vocab = WordVocab::random(
            ["who", "directed", "ENT"].into_iter().map(str::to_string),
            8,
            1,
        );
        let model = Model::new(cfg.model_config(), vocab, kb.properties(), 1);
        model.save(&model_path).unwrap();
    }

    unsafe {
        let mut kb: *mut NsmKb = ptr::null_mut();
        assert!(nsm_kb_open(c(kb_path.to_str().unwrap()).as_ptr(), &mut kb) == NsmStatus::NsmOk);
        let mut lex: *mut NsmLexicon = ptr::null_mut();
        assert!(
            nsm_lexicon_open(c(lex_path.to_str().unwrap()).as_ptr(), &mut lex)
                == NsmStatus::NsmOk
        );
        let mut model: *mut NsmModel = ptr::null_mut();
        assert!(
            nsm_model_open(c(model_path.to_str().unwrap()).as_ptr(), &mut model)
                == NsmStatus::NsmOk
        );

        let q = c("who directed alpha film");
        let mut prog: *mut c_char = ptr::null_mut();
        let mut vals: *mut c_char = ptr::null_mut();
        let status = nsm_answer(model, kb, lex, q.as_ptr(), 5, &mut prog, &mut vals);
        assert!(status == NsmStatus::NsmOk);
        let prog = take_string(prog);
        let _vals = take_string(vals);
        assert!(prog.contains("Return"), "program was: {prog}");

        nsm_model_close(model);
        nsm_lexicon_close(lex);
        nsm_kb_close(kb);
    }
}
