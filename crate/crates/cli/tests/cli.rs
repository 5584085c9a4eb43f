//! The `rescore` command line, driven in-process.

use std::fs;
use std::path::{Path, PathBuf};

use rescore_cli::run;
use serde_json::Value;

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }

    fn p(&self, name: &str) -> String {
        self.0.path().join(name).display().to_string()
    }

    fn path(&self) -> &Path {
        self.0.path()
    }
}

fn rescore(args: &[&str]) -> i32 {
    run(std::iter::once("rescore").chain(args.iter().copied()))
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// gen-data → train-mlm → pll → train-md → train-disc md-mwer →
/// search-beta → evaluate, at reduced size.
fn recipe(d: &Dir, seed: &str) {
    let p = |n| d.p(n);
    let steps = |s: &'static str| ["--steps", s, "--seed", seed];
    assert_eq!(
        rescore(&["gen-data", "--out", &p(""), "--seed", seed, "--train", "120", "--dev", "50", "--test", "50", "--text-sentences", "200"]),
        0
    );
    let mut a = vec!["train-mlm", "--text", &*p("text.txt").leak(), "--references", &*p("train.jsonl").leak()];
    let (vocab, mlm) = (p("vocab.txt"), p("mlm.json"));
    a.extend(["--vocab", &vocab, "--out", &mlm]);
    a.extend(steps("40"));
    assert_eq!(rescore(&a), 0);
    let (md_text, train, dev, test, pll) = (p("md_text.txt"), p("train.jsonl"), p("dev.jsonl"), p("test.jsonl"), p("pll.jsonl"));
    assert_eq!(
        rescore(&["pll", "--model", &mlm, "--text", &md_text, "--nbest", &train, "--nbest", &dev, "--nbest", &test, "--out", &pll]),
        0
    );
    let md = p("md.json");
    let mut a = vec!["train-md", "--model", &mlm, "--text", &md_text, "--pll", &pll, "--out", &md];
    a.extend(steps("40"));
    assert_eq!(rescore(&a), 0);
    let disc = p("disc.json");
    let mut a = vec!["train-disc", "--model", &md, "--nbest", &train, "--pll", &pll, "--objective", "md-mwer", "--out", &disc];
    a.extend(steps("10"));
    assert_eq!(rescore(&a), 0);
    let beta = p("beta.json");
    assert_eq!(rescore(&["search-beta", "--model", &disc, "--dev", &dev, "--out", &beta]), 0);
    let report = p("report.json");
    assert_eq!(rescore(&["evaluate", "--model", &disc, "--test", &test, "--beta-from", &beta, "--out", &report]), 0);
}

#[test]
fn recipe_script_runs_end_to_end_and_is_reproducible() {
    let (a, b) = (Dir::new(), Dir::new());
    recipe(&a, "7");
    recipe(&b, "7");

    let report = json(a.path().join("report.json"));
    let beta = json(a.path().join("beta.json"));
    assert_eq!(report["beta"], beta["beta"]);
    assert_eq!(report["tool"], "rescore");
    for k in ["wer", "cer", "first_pass_wer", "oracle_wer"] {
        assert!(report[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert!(report["oracle_wer"].as_f64() <= report["wer"].as_f64());
    assert_eq!(report["utterances"].as_array().unwrap().len(), 50);

    // byte-identical artifacts, except where the output paths are echoed
    for name in ["train.jsonl", "test.jsonl", "md_text.txt", "pll.jsonl", "mlm.json", "disc.json", "beta.json", "report.json"] {
        let x = fs::read_to_string(a.path().join(name)).unwrap();
        let y = fs::read_to_string(b.path().join(name)).unwrap();
        let x = x.replace(&a.path().display().to_string(), "<dir>");
        let y = y.replace(&b.path().display().to_string(), "<dir>");
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn artifacts_embed_their_config_and_seed() {
    let d = Dir::new();
    recipe(&d, "3");
    let sidecar = json(d.path().join("train.jsonl.meta.json"));
    assert_eq!(sidecar["generator"]["seed"], 3);
    assert_eq!(sidecar["provenance"]["seed"], 3);
    assert_eq!(json(d.path().join("pll.jsonl.meta.json"))["provenance"]["command"]["pll"]["max_seq_len"], 24);

    let ckpt = json(d.path().join("disc.json"));
    let meta = &ckpt["meta"];
    assert_eq!(meta["provenance"]["seed"], 3);
    assert_eq!(meta["training"]["objective"], "md-mwer");
    assert_eq!(meta["training"]["steps"], 10);
    assert_eq!(meta["parent"]["training"]["objective"], "md");

    let report = json(d.path().join("report.json"));
    assert!(report["config"]["command"]["evaluate"]["beta_from"].is_string());
    assert!(json(d.path().join("beta.json"))["meta"]["command"]["search-beta"].is_object());
}

#[test]
fn evaluate_at_zero_beta_gives_the_first_pass_wer() {
    let d = Dir::new();
    assert_eq!(rescore(&["gen-data", "--out", &d.p(""), "--train", "5", "--dev", "5", "--test", "40", "--text-sentences", "20"]), 0);
    let (vocab, text, m) = (d.p("vocab.txt"), d.p("text.txt"), d.p("m.json"));
    assert_eq!(rescore(&["train-mlm", "--text", &text, "--vocab", &vocab, "--steps", "0", "--out", &m]), 0);
    let (test, out) = (d.p("test.jsonl"), d.p("r.json"));
    assert_eq!(rescore(&["evaluate", "--model", &m, "--test", &test, "--beta", "0", "--out", &out]), 0);
    let r = json(&out);
    assert_eq!(r["wer"], r["first_pass_wer"]);
    assert_eq!(r["beta"], 0.0);
}

#[test]
fn annotate_adds_error_counts() {
    let d = Dir::new();
    let raw = d.p("raw.jsonl");
    fs::write(&raw, r#"{"id":"u1","ref":["a","b"],"hyps":[{"tokens":["a","b"],"score":1.0},{"tokens":["a"],"score":2.0}]}"#).unwrap();
    let out = d.p("ann.jsonl");
    assert_eq!(rescore(&["annotate", "--input", &raw, "--out", &out]), 0);
    let rec: Value = serde_json::from_str(fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(rec["eps"], serde_json::json!([0, 1]));
    assert!(PathBuf::from(format!("{out}.meta.json")).exists());
}

#[test]
fn each_failure_class_has_its_own_status() {
    let d = Dir::new();
    assert_eq!(rescore(&["frobnicate"]), 2);
    assert_eq!(rescore(&["evaluate", "--test", "x", "--beta", "0", "--out", "y"]), 2);
    assert_eq!(rescore(&["evaluate", "--model", &d.p("missing.json"), "--test", "x", "--beta", "0", "--out", "y"]), 4);

    let bad = d.p("bad.json");
    fs::write(&bad, "{").unwrap();
    assert_eq!(rescore(&["gen-data", "--config", &bad, "--out", &d.p("")]), 3);
    fs::write(&bad, r#"{"sub_rate": 2.0}"#).unwrap();
    assert_eq!(rescore(&["gen-data", "--config", &bad, "--out", &d.p("")]), 3);

    let corpus = d.p("c.jsonl");
    fs::write(&corpus, "not json\n").unwrap();
    assert_eq!(rescore(&["annotate", "--input", &corpus, "--out", &d.p("o.jsonl")]), 5);

    let not_ckpt = d.p("nc.json");
    fs::write(&not_ckpt, "{}").unwrap();
    fs::write(&corpus, "").unwrap();
    assert_eq!(rescore(&["evaluate", "--model", &not_ckpt, "--test", &corpus, "--beta", "0", "--out", &d.p("r.json")]), 6);
    // nothing is written on failure
    assert!(!d.path().join("r.json").exists());
}

#[test]
fn bench_writes_a_valid_report_and_rejects_short_checkpoints() {
    let d = Dir::new();
    assert_eq!(rescore(&["gen-data", "--out", &d.p(""), "--train", "5", "--dev", "5", "--test", "5", "--text-sentences", "20"]), 0);
    let (vocab, text) = (d.p("vocab.txt"), d.p("text.txt"));
    let (short, long) = (d.p("short.json"), d.p("long.json"));
    assert_eq!(rescore(&["train-mlm", "--text", &text, "--vocab", &vocab, "--steps", "0", "--out", &short]), 0);
    assert_eq!(rescore(&["train-mlm", "--text", &text, "--vocab", &vocab, "--steps", "0", "--max-len", "34", "--out", &long]), 0);

    let out = d.p("bench.json");
    let m_short = format!("s={short}");
    let m_long = format!("l={long}");
    assert_eq!(rescore(&["bench", "--model", &m_short, "--out", &out]), 6);
    assert_eq!(rescore(&["bench", "--model", "nolabel", "--out", &out]), 2);
    assert_eq!(rescore(&["bench", "--model", &m_long, "--iterations", "50", "--out", &out]), 3);
    assert!(!Path::new(&out).exists());

    assert_eq!(rescore(&["bench", "--model", &m_long, "--baseline", "l", "--seq-len", "4", "--seq-len", "8", "--out", &out]), 0);
    let report: rescore_cli::bench::LatencyReport = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    report.validate().unwrap();
    assert_eq!(report.entries.len(), 2);
    assert_eq!(report.config.batch_size, 5);
    assert_eq!(report.config.threads, 2);
    assert_eq!(report.entry("l", 4).unwrap().relative_pct, Some(0.0));
    assert!(report.meta["command"]["bench"].is_object());
}
