use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vsam_core::MetricsReport;

fn vsam(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = vsam_cli::run(std::iter::once("vsam").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split_whitespace().find_map(|t| t.strip_prefix(key)?.strip_prefix('='))
}

const SMALL: [&str; 6] = ["--set", "synthetic_examples=300", "--set", "synthetic_train=200", "--epochs", "3"];

fn train_small(dir: &Path) -> (PathBuf, String) {
    let ckpt = dir.join("m.ckpt");
    let mut args = vec!["train", "--synthetic", "--seed", "3", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(SMALL);
    let (code, out, err) = vsam(&args);
    assert_eq!(code, 0, "{err}");
    (ckpt, out)
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vsam(&["frobnicate"]).0, 1);
    assert_eq!(vsam(&["train", "--synthetic", "--set", "no_such_key=1"]).0, 1);
    assert_eq!(vsam(&["train", "--synthetic"]).0, 1, "checkpoint path is required");
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let m = missing.to_str().unwrap();
    let (code, _, err) = vsam(&["stats", "--stances", m, "--bodies", m]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn header_only_stances_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&s, "Headline,Body ID,Stance\n").unwrap();
    std::fs::write(&b, "Body ID,articleBody\n0,text\n").unwrap();
    let (code, _, err) = vsam(&["stats", "--stances", s.to_str().unwrap(), "--bodies", b.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn gradcheck_lists_each_parameter_once() {
    let (code, out, _) = vsam(&["gradcheck"]);
    assert_eq!(code, 0);
    let names: Vec<&str> = out.lines().filter_map(|l| field(l, "param")).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    let summary = out.lines().last().unwrap();
    assert_eq!(field(summary, "tensors"), Some(names.len().to_string().as_str()));
    assert_eq!(field(summary, "passed"), field(summary, "tensors"));
}

#[test]
fn broken_backward_exits_three() {
    let (code, out, _) = vsam(&["gradcheck", "--inject-fault", "tanh"]);
    assert_eq!(code, 3);
    assert!(out.lines().any(|l| field(l, "status") == Some("fail")));
}

#[test]
fn oversized_gradcheck_is_refused() {
    assert_eq!(vsam(&["gradcheck", "--set", "latent_dim=16"]).0, 1);
}

#[test]
fn train_log_and_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, log) = train_small(dir.path());
    let epochs: Vec<&str> = log.lines().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(epochs.len(), 3);
    for l in &epochs {
        let kl: f64 = field(l, "kl").unwrap().parse().unwrap();
        assert!(kl >= 0.0, "{l}");
    }
    let last_f1 = field(epochs[2], "train_micro_f1").unwrap();

    let report = dir.path().join("report.txt");
    let mut args = vec![
        "eval", "--synthetic", "--seed", "3", "--checkpoint", ckpt.to_str().unwrap(),
        "--set", "eval_split=train", "--out", report.to_str().unwrap(),
    ];
    args.extend(&SMALL[..4]);
    let (code, out, err) = vsam(&args);
    assert_eq!(code, 0, "{err}");
    let text_report = MetricsReport::from_key_value(&out).unwrap();
    assert_eq!(format!("{:.2}", text_report.micro_f1()), last_f1);

    let json = std::fs::read_to_string(report.with_extension("json")).unwrap();
    assert_eq!(MetricsReport::from_json(&json).unwrap(), text_report);
    assert_eq!(std::fs::read_to_string(&report).unwrap(), out);
}

#[test]
fn eval_rejects_conflicting_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = train_small(dir.path());
    let (code, _, err) = vsam(&[
        "eval", "--synthetic", "--seed", "3", "--checkpoint", ckpt.to_str().unwrap(), "--set", "latent_dim=5",
    ]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, first) = train_small(dir.path());
    let echo = PathBuf::from(format!("{}.config", ckpt.display()));
    let again = dir.path().join("again.ckpt");
    let (code, second, err) = vsam(&["train", "--config", echo.to_str().unwrap(), "--checkpoint", again.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(first, second);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
}

/// Small FNC-1 style corpus plus a text embedding file over its words.
fn file_corpus(dir: &Path) -> [PathBuf; 3] {
    let words = ["alpha", "beta", "gamma", "delta", "rain", "sun", "moon", "star"];
    let stances = ["agree", "disagree", "discuss", "unrelated"];
    let mut s = String::from("Headline,Body ID,Stance\n");
    let mut b = String::from("Body ID,articleBody\n");
    for i in 0..24 {
        let _ = writeln!(s, "{} {},{},{}", words[i % 8], words[(i + 3) % 8], i % 6, stances[i % 4]);
    }
    for id in 0..6 {
        let _ = writeln!(b, "{id},\"{} {} {}\"", words[id], words[id + 1], words[(id + 2) % 8]);
    }
    let mut e = String::new();
    for (k, w) in words.iter().enumerate() {
        let v: Vec<String> = (0..4).map(|j| format!("{:.3}", ((k * 7 + j * 3) % 11) as f64 / 10.0 - 0.5)).collect();
        let _ = writeln!(e, "{w} {}", v.join(" "));
    }
    let paths = [dir.join("stances.csv"), dir.join("bodies.csv"), dir.join("emb.txt")];
    std::fs::write(&paths[0], s).unwrap();
    std::fs::write(&paths[1], b).unwrap();
    std::fs::write(&paths[2], e).unwrap();
    paths
}

#[test]
fn inspect_weights_and_sampling_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let [s, b, e] = file_corpus(dir.path());
    let ckpt = dir.path().join("f.ckpt");
    let p = |x: &PathBuf| x.to_str().unwrap().to_string();
    let common = [
        "--stances".to_string(), p(&s), "--bodies".into(), p(&b), "--embeddings".into(), p(&e),
        "--checkpoint".into(), p(&ckpt), "--set".into(), "embed_dim=4".into(),
    ];
    let with = |head: &[&str], tail: &[&str]| {
        let mut v: Vec<&str> = head.to_vec();
        v.extend(common.iter().map(String::as_str));
        v.extend(tail);
        vsam(&v)
    };
    let (code, _, err) = with(&["train"], &["--epochs", "2"]);
    assert_eq!(code, 0, "{err}");

    let inspect = |seed: &str, mode: &str| {
        let (code, out, err) = with(
            &["inspect", "--headline", "rain", "--body", "sun moon unknownword"],
            &["--seed", seed, "--predict-mode", mode, "--samples", "1"],
        );
        assert_eq!(code, 0, "{err}");
        out
    };
    let out = inspect("0", "mean");
    assert!(out.lines().any(|l| l.starts_with("rain") && l.ends_with("1.000000")));
    assert!(out.contains("attention_sum.headline=1.000"));
    assert!(out.contains("attention_sum.body=1.000"));
    assert!(out.contains("prob_sum=1.000"));

    let probs = |o: &str| o.lines().filter(|l| l.starts_with("prob.")).map(str::to_string).collect::<Vec<_>>();
    assert_eq!(probs(&inspect("1", "mean")), probs(&inspect("2", "mean")));
    assert_ne!(probs(&inspect("1", "sample")), probs(&inspect("2", "sample")));

    let (code, _, _) = with(&["inspect", "--headline", "", "--body", "sun"], &[]);
    assert_eq!(code, 2);
}

#[test]
fn stats_reports_counts_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let [s, b, _] = file_corpus(dir.path());
    let mut text = std::fs::read_to_string(&s).unwrap();
    text.push_str("orphan,99,agree\nodd,1,maybe\n");
    std::fs::write(&s, text).unwrap();
    let (code, out, err) = vsam(&["stats", "--stances", s.to_str().unwrap(), "--bodies", b.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let row: Vec<&str> = out.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row, ["train", "24", "6", "(25.00%)", "6", "(25.00%)", "6", "(25.00%)", "6", "(25.00%)"]);
    assert!(out.contains("rejected.train unknown_stance=1 unresolved_body=1 empty_text=0"));
}
