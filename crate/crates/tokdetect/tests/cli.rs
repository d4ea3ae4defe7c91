use std::io::Read;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tokdetect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokdetect")).args(args).env_remove("TOKDETECT_API_KEY").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CORPUS: &str = r#"{"id":"h1","text":"Hello there. General Kenobi!","source":"Human","genre":"news"}
{"id":"h2","text":"One two three.","source":"Human","genre":"essay"}
{"id":"g1","text":"Generated words here.","source":"Generator:m1","genre":"news"}
{"id":"h1","text":"Hello there. General Kenobi!","source":"Human","genre":"news"}
"#;

#[test]
fn stats_writes_grouped_csv() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, CORPUS).unwrap();
    let out = tokdetect(&["stats", "--corpus", s(&corpus), "--group-by", "source"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "group,n_samples,n_sentences,n_words,n_tokens");
    assert_eq!(lines[1], "ai,1,1,3,21");
    assert_eq!(lines[2], "human,2,3,7,42");
    assert!(String::from_utf8_lossy(&out.stderr).contains("1 duplicates"));
}

#[test]
fn unknown_flag_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = tokdetect(&["synth", "--out", s(&out_dir), "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    assert_eq!(tokdetect(&["train"]).status.code(), Some(2));
    assert_eq!(tokdetect(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_lines_fail_unless_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, format!("{CORPUS}{{not json\n[1, 2]\n")).unwrap();
    let out = tokdetect(&["stats", "--corpus", s(&corpus)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.jsonl:5:"));
    let out = tokdetect(&["stats", "--corpus", s(&corpus), "--skip-malformed"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 malformed"));
}

#[test]
fn missing_field_aborts_even_when_skipping() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, format!("{CORPUS}{{\"id\":\"x\",\"source\":\"Human\",\"genre\":\"news\"}}\n")).unwrap();
    let out = tokdetect(&["stats", "--corpus", s(&corpus), "--skip-malformed"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing field `text`"));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"seed": 5, "synth": {"samples_per_stratum": 3, "genres": ["essay"]}}"#).unwrap();
    let a = dir.path().join("a");
    let out = tokdetect(&["--config", s(&config), "synth", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["samples_per_stratum"], 3);

    let b = dir.path().join("b");
    let out = tokdetect(&["--config", s(&config), "--seed", "6", "synth", "--out", s(&b), "--samples-per-stratum", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(b.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 6);
    assert_eq!(manifest["config"]["samples_per_stratum"], 4);
    assert_eq!(std::fs::read_to_string(b.join("human__essay.jsonl")).unwrap().lines().count(), 4);

    std::fs::write(&config, r#"{"synth": {"samples": 3}}"#).unwrap();
    assert_eq!(tokdetect(&["--config", s(&config), "synth", "--out", s(&dir.path().join("c"))]).status.code(), Some(2));
    std::fs::write(&config, r#"{"sytnh": {}}"#).unwrap();
    assert_eq!(tokdetect(&["--config", s(&config), "synth", "--out", s(&dir.path().join("c"))]).status.code(), Some(2));
}

#[test]
fn same_seed_same_bytes_different_seed_different_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        assert_eq!(tokdetect(&["--seed", seed, "synth", "--out", s(&out), "--samples-per-stratum", "5"]).status.code(), Some(0));
        std::fs::read(out.join("alpha-7b__news.jsonl")).unwrap()
    };
    assert_eq!(run("1", "x"), run("1", "y"));
    assert_ne!(run("1", "x"), run("2", "z"));
}

#[test]
fn tokenize_counts_bytes_with_the_default_vocabulary() {
    let out = tokdetect(&["tokenize", "--text", "héllo", "--count"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "6");
    let out = tokdetect(&["tokenize", "--text", "ab"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "97 98");
}

#[test]
fn trained_vocabulary_is_used_for_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, CORPUS).unwrap();
    let vocab = dir.path().join("v.json");
    assert_eq!(tokdetect(&["train-vocab", "--corpus", s(&corpus), "--merges", "20", "--out", s(&vocab)]).status.code(), Some(0));
    let out = tokdetect(&["tokenize", "--vocab", s(&vocab), "--text", "Hello there", "--count"]);
    let n: usize = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!(n < 11);
}

#[test]
fn pipeline_with_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel);
    let ok = |args: &[&str]| {
        let out = tokdetect(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["synth", "--out", s(&p("corpus")), "--samples-per-stratum", "80"]);
    let manifest = p("corpus/manifest.json");
    ok(&["build-dataset", "--manifest", s(&manifest), "--recipe", "detect-one", "--target", "beta-8b", "--budget", "6000", "--out", s(&p("one"))]);
    ok(&[
        "build-dataset", "--manifest", s(&manifest), "--recipe", "detect-family", "--family", "alpha", "--members", "alpha-7b,alpha-13b",
        "--budget", "6000", "--out", s(&p("fam")),
    ]);
    ok(&["init-backbone", "--out", s(&p("bb.bin")), "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--max-seq-len", "512"]);
    for name in ["one", "fam"] {
        ok(&[
            "train", "--dataset", s(&p(name)), "--backbone", s(&p("bb.bin")), "--epochs", "1", "--batch-size", "8", "--out",
            s(&p(&format!("{name}.ckpt"))),
        ]);
    }
    let members = format!("{},{}", s(&p("one.ckpt")), s(&p("fam.ckpt")));
    ok(&["ensemble-eval", "--members", &members, "--dataset", s(&p("one/val.jsonl")), "--out", s(&p("ens"))]);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(p("ens/ensemble.json")).unwrap()).unwrap();
    assert_eq!(summary["spec"]["members"].as_array().unwrap().len(), 2);
    let attribution = std::fs::read_to_string(p("ens/attribution.csv")).unwrap();
    assert!(attribution.lines().count() > 1);
    let run: Value = serde_json::from_str(&std::fs::read_to_string(p("ens/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(run["outputs"].as_object().unwrap().len(), 4);

    // The checkpoint records where its backbone came from; a different
    // backbone is refused.
    ok(&["init-backbone", "--out", s(&p("other.bin")), "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--seed", "9"]);
    let out = tokdetect(&[
        "evaluate", "--checkpoint", s(&p("one.ckpt")), "--backbone", s(&p("other.bin")), "--dataset", s(&p("one")), "--out",
        s(&p("bad")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backbone"));
}

#[test]
fn generate_sends_bearer_token_and_resumes() {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let handle = std::thread::spawn(move || {
        let mut auth = Vec::new();
        for _ in 0..3 {
            let mut req = server.recv().unwrap();
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            assert_eq!(req.url(), "/v1/chat/completions");
            auth.push(req.headers().iter().find(|h| h.field.equiv("Authorization")).map(|h| h.value.to_string()));
            let reply = r#"{"choices":[{"message":{"content":"Similar blog:\nfresh   text"}}]}"#;
            req.respond(tiny_http::Response::from_string(reply)).unwrap();
        }
        auth
    });
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(&corpus, CORPUS).unwrap();
    let out = dir.path().join("gen.jsonl");
    let args = ["generate", "--template", "blogs", "--corpus", s(&corpus), "--endpoint", &url, "--model", "m2", "--out", s(&out)];
    let first = Command::new(env!("CARGO_BIN_EXE_tokdetect")).args(args).env("TOKDETECT_API_KEY", "sekret").output().unwrap();
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let auth = handle.join().unwrap();
    assert_eq!(auth, vec![Some(String::from("Bearer sekret")); 3]);
    let lines: Vec<Value> =
        std::fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l["text"] == "fresh text" && l["source"] == "Generator:m2"));

    // Every prompt is journaled as done: a second run makes no requests.
    let second = tokdetect(&args);
    assert_eq!(second.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&second.stdout).unwrap();
    assert_eq!(report["requested"], 0);
    assert_eq!(report["skipped_done"], 3);
}
