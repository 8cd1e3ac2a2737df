use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mspt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mspt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mspt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_tone(path: &Path, freq: f64, secs: f64) {
    let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    let n = (16000.0 * secs) as usize;
    for i in 0..n {
        let t = i as f64 / 16000.0;
        let v = 0.3 * (2.0 * std::f64::consts::PI * freq * t).sin() + 0.05 * (7.0 * t * 1000.0).sin();
        w.write_sample((v * i16::MAX as f64) as i16).unwrap();
    }
    w.finalize().unwrap();
}

const VOCAB: &str = "a\nb\nc\nd\ne\n";

fn transcripts() -> Vec<String> {
    let base = ["abc", "bcd", "cde", "dea", "eab", "aab", "bbc", "ccd", "dde", "eea", "ace", "bdb"];
    base.iter().map(|s| s.to_string()).collect()
}

/// Writes a transcript-only manifest and synthesizes it.
fn synth_corpus(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let mut m = String::new();
    for (i, t) in transcripts().iter().enumerate() {
        m.push_str(&format!("{name}{i:02}\tspk\t-\tfeat\t{t}\n"));
    }
    let manifest = dir.join(format!("{name}.tsv"));
    fs::write(&manifest, m).unwrap();
    let out = dir.join(name);
    ok(&["synth", "--manifest", p(&manifest), "--vocab", p(&dir.join("vocab.txt")), "--out", p(&out), "--seed", seed]);
    out.join("pairs.tsv")
}

fn stage_cfg(dir: &Path, name: &str, stage: &str, steps: usize) -> PathBuf {
    let path = dir.join(name);
    fs::write(
        &path,
        format!(
            "stage = {stage}\nbatch_size = 4\nmax_steps = {steps}\nwarmup_steps = 10\ncheckpoint_every = 2\n\
             avg_last_n = 3\nlog_every = 2\nmask_w = 2\nmodel.enc_layers = 1\nmodel.dec_layers = 1\n\
             model.d_model = 8\nmodel.heads = 2\nmodel.d_ff = 16\n"
        ),
    )
    .unwrap();
    path
}

fn setup() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("vocab.txt"), VOCAB).unwrap();
    tmp
}

#[test]
fn featurize_writes_one_file_per_utterance_and_is_deterministic() {
    let tmp = setup();
    let d = tmp.path();
    let mut m = String::new();
    for (i, f) in [300.0, 700.0, 1100.0].iter().enumerate() {
        let wav = d.join(format!("u{i}.wav"));
        write_tone(&wav, *f, 0.5);
        m.push_str(&format!("u{i}\tspk{}\tu{i}.wav\taudio\thello\n", i % 2));
    }
    fs::write(d.join("audio.tsv"), &m).unwrap();
    ok(&["featurize", "--manifest", p(&d.join("audio.tsv")), "--out", p(&d.join("f1"))]);
    ok(&["featurize", "--manifest", p(&d.join("audio.tsv")), "--out", p(&d.join("f2"))]);
    let manifest = fs::read_to_string(d.join("f1/feats.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(manifest.lines().all(|l| l.split('\t').nth(3) == Some("feat")));
    for i in 0..3 {
        let a = fs::read(d.join(format!("f1/u{i}.feat"))).unwrap();
        let b = fs::read(d.join(format!("f2/u{i}.feat"))).unwrap();
        assert_eq!(a, b);
        let f = mspt_core::frontend::read_features(&d.join(format!("f1/u{i}.feat"))).unwrap();
        assert_eq!(f.dim(), 320);
        assert_eq!(f.len(), (1 + (8000 - 400) / 160_usize).div_ceil(3));
    }

    m.push_str("u9\tspk0\tmissing.wav\taudio\t\n");
    fs::write(d.join("broken.tsv"), &m).unwrap();
    let out = mspt(&["featurize", "--manifest", p(&d.join("broken.tsv")), "--out", p(&d.join("f3"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("u9") && err.contains("1 of 4"), "{err}");
}

#[test]
fn three_stage_pipeline_decode_and_score() {
    let tmp = setup();
    let d = tmp.path();
    let pairs = synth_corpus(d, "syn", "1");
    let indomain = synth_corpus(d, "ind", "2");
    let vocab = d.join("vocab.txt");

    let ac = d.join("run_ac");
    let masks = d.join("masks.txt");
    ok(&[
        "train", "--config", p(&stage_cfg(d, "ac.cfg", "acoustic", 6)), "--manifest", p(&pairs), "--run", p(&ac),
        "--dump-masks", p(&masks),
    ]);
    assert!(ac.join("artifacts/M0/params.mskc").exists());
    assert_eq!(fs::read_to_string(ac.join("logs/train.log")).unwrap().lines().count(), 6 / 2);
    let mask_lines = fs::read_to_string(&masks).unwrap();
    assert_eq!(mask_lines.lines().count(), 12);
    assert!(mask_lines.lines().all(|l| l.split('\t').count() == 4));

    let post_cfg = stage_cfg(d, "pt.cfg", "posttrain", 4);
    let missing = mspt(&[
        "train", "--config", p(&post_cfg), "--manifest", p(&indomain), "--vocab", p(&vocab), "--run",
        p(&d.join("run_missing")), "--preset", "A1", "--init-from", p(&ac),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("M1"));

    let ling = d.join("run_ling");
    ok(&[
        "train", "--config", p(&stage_cfg(d, "ln.cfg", "linguistic", 6)), "--manifest", p(&pairs), "--vocab",
        p(&vocab), "--run", p(&ling), "--init", "M0", "--init-from", p(&ac), "--valid", p(&indomain),
    ]);
    assert!(ling.join("artifacts/M1/params.mskc").exists());
    assert_eq!(fs::read_to_string(ling.join("logs/valid.log")).unwrap().lines().count(), 1);

    let post = d.join("run_post");
    ok(&[
        "train", "--config", p(&post_cfg), "--manifest", p(&indomain), "--vocab", p(&vocab), "--run", p(&post),
        "--preset", "A1", "--init-from", p(&ling), "--init-from", p(&ac),
    ]);
    let again = mspt(&[
        "train", "--config", p(&post_cfg), "--manifest", p(&indomain), "--vocab", p(&vocab), "--run", p(&post),
    ]);
    assert_eq!(again.status.code(), Some(2), "existing runs are never overwritten");

    ok(&["average", "--run", p(&post), "--n", "2", "--out", p(&d.join("avg.mskc"))]);
    let decode = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "decode", "--run", p(&post), "--manifest", p(&indomain), "--vocab", p(&vocab), "--max-len", "8", "--out",
        ];
        let path = d.join(out);
        let path_s = path.to_str().unwrap().to_string();
        args.push(&path_s);
        args.extend_from_slice(extra);
        ok(&args);
        fs::read(&path).unwrap()
    };
    let beam4 = decode("beam4.tsv", &["--beam", "4"]);
    assert_eq!(beam4, decode("beam4b.tsv", &["--beam", "4"]));
    assert_eq!(decode("beam1.tsv", &["--beam", "1"]), decode("greedy.tsv", &["--greedy"]));
    let avg = decode("avg.tsv", &["--params", p(&d.join("avg.mskc"))]);
    assert_eq!(String::from_utf8(avg).unwrap().lines().count(), 12);

    let s1 = ok(&["score", "--ref", p(&indomain), "--hyp", p(&d.join("beam4.tsv"))]);
    let s2 = ok(&["score", "--ref", p(&indomain), "--hyp", p(&d.join("beam4.tsv"))]);
    assert_eq!(s1.stdout, s2.stdout);
    let last = String::from_utf8(s1.stdout).unwrap().lines().last().unwrap().to_string();
    assert!(last.starts_with("corpus\t"), "{last}");
}

#[test]
fn scoring_identical_files_gives_zero() {
    let tmp = setup();
    let d = tmp.path();
    fs::write(d.join("ref.txt"), "u1\tab c\nu2\tdd\n").unwrap();
    let out = ok(&["score", "--ref", p(&d.join("ref.txt")), "--hyp", p(&d.join("ref.txt"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().last().unwrap().ends_with("\t0.00"), "{text}");
    let out = ok(&["score", "--ref", p(&d.join("ref.txt")), "--hyp", p(&d.join("ref.txt")), "--mode", "word"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("corpus\t0\t0\t0\t3\t0.00"));

    fs::write(d.join("hyp.txt"), "u1\tab c\t-1.0\n").unwrap();
    let missing = mspt(&["score", "--ref", p(&d.join("ref.txt")), "--hyp", p(&d.join("hyp.txt"))]);
    assert_eq!(missing.status.code(), Some(2));
    let piece = mspt(&["score", "--ref", p(&d.join("ref.txt")), "--hyp", p(&d.join("ref.txt")), "--mode", "piece"]);
    assert_eq!(piece.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mspt(&["train"]).status.code(), Some(1));
    assert_eq!(mspt(&["score", "--ref", "a", "--hyp", "b", "--mode", "bytes"]).status.code(), Some(1));
    assert_eq!(mspt(&["--help"]).status.code(), Some(0));
}

#[test]
fn supervised_stage_without_vocab_is_a_usage_error() {
    let tmp = setup();
    let d = tmp.path();
    let pairs = synth_corpus(d, "syn", "1");
    let out = mspt(&[
        "train", "--config", p(&stage_cfg(d, "ln.cfg", "linguistic", 2)), "--manifest", p(&pairs), "--run",
        p(&d.join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_three() {
    let tmp = setup();
    let d = tmp.path();
    let pairs = synth_corpus(d, "syn", "1");
    let out = mspt(&[
        "train", "--config", p(&stage_cfg(d, "ln.cfg", "linguistic", 20)), "--manifest", p(&pairs), "--vocab",
        p(&d.join("vocab.txt")), "--run", p(&d.join("r")), "--set", "lr_scale=1e300", "--set", "adam_eps=1e-300",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn train_reruns_are_bit_identical() {
    let tmp = setup();
    let d = tmp.path();
    let pairs = synth_corpus(d, "syn", "1");
    let cfg = stage_cfg(d, "ln.cfg", "linguistic", 4);
    for run in ["r1", "r2"] {
        ok(&[
            "train", "--config", p(&cfg), "--manifest", p(&pairs), "--vocab", p(&d.join("vocab.txt")), "--run",
            p(&d.join(run)), "--seed", "5", "--workers", "1",
        ]);
    }
    for f in ["logs/train.log", "artifacts/M2/params.mskc", "checkpoints/step-00000004.mskc"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn quick_ablation_prints_a_table() {
    let out = ok(&["ablate", "--quick", "--seeds", "3", "--presets", "A0,A1,A2,A3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("seed\tpreset"));
    assert_eq!(text.lines().filter(|l| l.starts_with("3\t")).count(), 4);
    assert_eq!(text.lines().filter(|l| l.starts_with("# ")).count(), 3);
}
