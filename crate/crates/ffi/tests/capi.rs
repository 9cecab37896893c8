use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mdmt::data::{generate_corpus, DomainSpec, Lexicon, SplitSizes, SyntheticTaskSpec, Transform, Vocabulary};
use mdmt::model::{Checkpoint, Conditioning, DecodeConfig, ModelConfig, Preset, Provenance, TransformerModel};
use mdmt_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = mdmt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_spec() -> SyntheticTaskSpec {
    let sizes = SplitSizes {
        train: 20,
        dev: 5,
        test: 5,
    };
    SyntheticTaskSpec {
        base_vocab_size: 12,
        min_len: 2,
        max_len: 4,
        domains: vec![
            DomainSpec {
                name: "A".into(),
                transform: Transform::Identity,
                lexicon: Lexicon { start: 0, len: 6 },
                sizes,
            },
            DomainSpec {
                name: "B".into(),
                transform: Transform::Reverse,
                lexicon: Lexicon { start: 6, len: 6 },
                sizes,
            },
        ],
        general_lexicon: Lexicon { start: 0, len: 12 },
        general_sizes: sizes,
    }
}

/// Writes an untrained intervention model and its vocabulary.
fn fixture(dir: &Path) -> (PathBuf, PathBuf, Checkpoint, Vocabulary) {
    let corpus = generate_corpus(&tiny_spec(), 3).unwrap();
    let vocab = Vocabulary::build(&corpus.domain_names(), corpus.all_examples()).unwrap();
    let cfg = ModelConfig::from_preset(
        Preset::Micro,
        vocab.len(),
        vocab.num_domains(),
        Conditioning::AdditiveIntervention { mask_probability: 0.2 },
    );
    let checkpoint = Checkpoint {
        model: TransformerModel::new(cfg, 5).unwrap(),
        vocab_fingerprint: vocab.fingerprint(),
        provenance: Provenance {
            system: "combined-ints".into(),
            regime: "combined".into(),
            domain: None,
            seed: 5,
            virtual_epochs: 0,
            steps: 0,
            parent: None,
        },
    };
    let ckpt = dir.join("m.ckpt");
    let voc = dir.join("vocab.txt");
    checkpoint.save(&ckpt).unwrap();
    vocab.save(&voc).unwrap();
    (ckpt, voc, checkpoint, vocab)
}

#[test]
fn translate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, voc, checkpoint, vocab) = fixture(dir.path());
    let mut model: *mut MdmtModel = ptr::null_mut();
    let (cp, vp) = (c(ckpt.to_str().unwrap()), c(voc.to_str().unwrap()));
    assert_eq!(
        unsafe { mdmt_model_load(cp.as_ptr(), vp.as_ptr(), &mut model) },
        MdmtStatus::Ok
    );
    assert!(!model.is_null());

    let mut n = 0usize;
    assert_eq!(unsafe { mdmt_model_num_domains(model, &mut n) }, MdmtStatus::Ok);
    assert_eq!(n, 2);

    let src_words: Vec<String> = vocab.tokens()[vocab.len() - 3..].to_vec();
    let src = c(&src_words.join(" "));
    for (label, domain) in [(Some(1), Some(c("B"))), (None, None)] {
        let mut out: *mut c_char = ptr::null_mut();
        let dp = domain.as_ref().map_or(ptr::null(), |d| d.as_ptr());
        assert_eq!(
            unsafe { mdmt_model_translate(model, src.as_ptr(), dp, 1, &mut out) },
            MdmtStatus::Ok
        );
        let got = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
        unsafe { mdmt_string_free(out) };
        let ids = checkpoint
            .model
            .translate(&vocab.encode(&src_words), label, &DecodeConfig::default())
            .unwrap();
        assert_eq!(got, vocab.decode(&ids).join(" "));
    }

    let mut out: *mut c_char = ptr::null_mut();
    let bad = c("NOPE");
    assert_eq!(
        unsafe { mdmt_model_translate(model, src.as_ptr(), bad.as_ptr(), 1, &mut out) },
        MdmtStatus::UnknownLabel
    );
    assert!(out.is_null());
    assert!(last_error().contains("NOPE"));
    unsafe { mdmt_model_free(model) };
}

#[test]
fn vocabulary_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _, _, vocab) = fixture(dir.path());
    let mut tokens = vocab.tokens().to_vec();
    let n = tokens.len();
    tokens.swap(n - 1, n - 2);
    let other = dir.path().join("other.txt");
    std::fs::write(&other, tokens.join("\n") + "\n").unwrap();
    let mut model: *mut MdmtModel = ptr::null_mut();
    let (cp, vp) = (c(ckpt.to_str().unwrap()), c(other.to_str().unwrap()));
    assert_eq!(
        unsafe { mdmt_model_load(cp.as_ptr(), vp.as_ptr(), &mut model) },
        MdmtStatus::Format
    );
    assert!(model.is_null());
    assert!(last_error().contains("fingerprint"));
}

#[test]
fn scoring_entry_points() {
    let hyps = [c("the cat sat on the mat"), c("a b c")];
    let refs = [c("the cat is on the mat"), c("a b c")];
    let hp: Vec<*const c_char> = hyps.iter().map(|s| s.as_ptr()).collect();
    let rp: Vec<*const c_char> = refs.iter().map(|s| s.as_ptr()).collect();
    let mut score = -1.0;
    assert_eq!(
        unsafe { mdmt_corpus_bleu(hp.as_ptr(), rp.as_ptr(), 2, &mut score) },
        MdmtStatus::Ok
    );
    let want = mdmt::eval::corpus_bleu(
        &["the cat sat on the mat", "a b c"],
        &["the cat is on the mat", "a b c"],
    )
    .unwrap()
    .score;
    assert_eq!(score, want);
    assert_eq!(
        unsafe { mdmt_corpus_bleu(hp.as_ptr(), rp.as_ptr(), 0, &mut score) },
        MdmtStatus::InvalidArgument
    );

    let row = [50.0, 50.0, 50.0, 50.0, 49.9, 50.1, 50.0, 50.0];
    let mut sd = 0.0;
    assert_eq!(
        unsafe { mdmt_robustness_std(row.as_ptr(), row.len(), &mut sd) },
        MdmtStatus::Ok
    );
    assert!((sd - 0.053452).abs() < 1e-6);
}

#[test]
fn null_and_utf8_arguments() {
    let mut x = 0.0;
    assert_eq!(
        unsafe { mdmt_robustness_std(ptr::null(), 3, &mut x) },
        MdmtStatus::NullPointer
    );
    assert_eq!(
        unsafe { mdmt_corpus_bleu(ptr::null(), ptr::null(), 1, &mut x) },
        MdmtStatus::NullPointer
    );
    let bad = [0xffu8, 0xfe, 0];
    let p = bad.as_ptr().cast::<c_char>();
    let mut m: *mut MdmtModel = ptr::null_mut();
    assert_eq!(unsafe { mdmt_model_load(p, p, &mut m) }, MdmtStatus::InvalidUtf8);
    unsafe {
        mdmt_model_free(ptr::null_mut());
        mdmt_string_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(mdmt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libmdmt_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_header() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built; skipping C link test");
        return;
    };
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status();
    let Ok(status) = status else {
        eprintln!("no C compiler; skipping C link test");
        return;
    };
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C smoke exited with {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.ends_with("37.991784 0.075593\n"), "{text}");
}
