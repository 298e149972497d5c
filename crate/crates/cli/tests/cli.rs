use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patentner"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_stdin(args: &[&str], input: &str) -> Output {
    let mut child = bin()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Column corpus of `docs` documents, two sentences each.
fn corpus(docs: usize, offset: usize) -> String {
    let chems = ["acid", "benzene", "toluene", "ethanol", "NaCl"];
    let fillers = ["the", "was", "added", "to", "then", "stirred"];
    let mut out = String::new();
    for d in 0..docs {
        out.push_str("-DOCSTART-\n\n");
        for s in 0..2 {
            let i = offset + d * 2 + s;
            for j in 0..5 {
                if (i + j) % 3 == 0 {
                    out.push_str(&format!("{}\tB-M\n", chems[(i * 7 + j) % chems.len()]));
                } else {
                    out.push_str(&format!("{}\tO\n", fillers[(i + j * 5) % fillers.len()]));
                }
            }
            out.push('\n');
        }
    }
    out
}

const TINY: &str = r#"
seed = 4

[model]
use_contextual = false
word_dim = 8
char_embed_dim = 4
char_filter_count = 4
char_output_dim = 4
lstm_layers = 1
lstm_hidden = 6
dropout = [0.0]

[training]
learning_rate = 0.05
batch_size = 4
max_epochs = 6
patience = 6
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("train.txt"), corpus(6, 0)).unwrap();
        std::fs::write(f.path("dev.txt"), corpus(2, 3)).unwrap();
        std::fs::write(f.path("tiny.toml"), TINY).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, tr, dv, o) = (self.path("tiny.toml"), self.path("train.txt"), self.path("dev.txt"), self.path(out));
        let mut args = vec!["train", "--config", p(&cfg), "--train", p(&tr), "--dev", p(&dv), "--out", p(&o)];
        args.extend_from_slice(extra);
        run(&args)
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["tag", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn tokenize_prints_offsets() {
    let o = run_stdin(&["tokenize", "--mode", "general"], "2,5-dimethyl acid");
    assert!(o.status.success());
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines[0], "0\t1\t2");
    assert_eq!(lines.last().unwrap(), "13\t17\tacid");
    let o = run_stdin(&["tokenize"], "2,5-dimethyl acid");
    assert_eq!(stdout(&o), "0\t12\t2,5-dimethyl\n13\t17\tacid\n");
}

#[test]
fn tokenize_reads_rule_files() {
    let f = Fixture::new();
    std::fs::write(f.path("rules.toml"), "no_split = ['-']\n").unwrap();
    let rules = f.path("rules.toml");
    let o = run_stdin(&["tokenize", "--rules", p(&rules)], "2,5-dimethyl");
    assert_eq!(stdout(&o), "0\t1\t2\n1\t2\t,\n2\t12\t5-dimethyl\n");
    std::fs::write(f.path("bad.toml"), "nope = 1\n").unwrap();
    let bad = f.path("bad.toml");
    assert_eq!(run_stdin(&["tokenize", "--rules", p(&bad)], "x").status.code(), Some(2));
}

#[test]
fn stats_and_split() {
    let f = Fixture::new();
    std::fs::write(f.path("all.txt"), corpus(10, 0)).unwrap();
    let all = f.path("all.txt");
    let o = run(&["stats", "--corpus", p(&all)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stats: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(stats["documents"], 10);
    assert_eq!(stats["sentences"], 20);
    assert_eq!(stats["tokens"], 100);

    let out = f.path("split");
    let o = run(&["split", "--corpus", p(&all), "--out", p(&out), "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("train\t6 documents"), "{text}");
    assert!(text.contains("dev\t1 documents"), "{text}");
    assert!(text.contains("test\t3 documents"), "{text}");
    let again = f.path("split2");
    run(&["split", "--corpus", p(&all), "--out", p(&again), "--seed", "7"]);
    for name in ["train.txt", "dev.txt", "test.txt"] {
        assert_eq!(std::fs::read(out.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap());
    }
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.txt"), "acid B-M extra\n").unwrap();
    let bad = f.path("bad.txt");
    let o = run(&["stats", "--corpus", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.txt") && stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn train_tag_eval_round_trip() {
    let f = Fixture::new();
    let o = f.train("run", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("run/report.json")).unwrap()).unwrap();
    let best_f1 = report["best_dev_f1"].as_f64().unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 6);

    let (model, dev, pred) = (f.path("run/best.ckpt"), f.path("dev.txt"), f.path("pred.txt"));
    let o = run(&["tag", "--model", p(&model), "--in", p(&dev), "--columns", "--out", p(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (cm, errs) = (f.path("cm.csv"), f.path("errors.txt"));
    let o = run(&["eval", "--gold", p(&dev), "--pred", p(&pred), "--json", "--confusion", p(&cm), "--errors", p(&errs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(scores["micro"]["f1"].as_f64().unwrap(), best_f1);
    assert!(std::fs::read_to_string(&cm).unwrap().starts_with("gold\\pred,O,M"));

    let o = run(&["eval", "--gold", p(&dev), "--pred", p(&pred)]);
    assert!(stdout(&o).contains("Micro Avg."));
}

#[test]
fn tag_plain_text() {
    let f = Fixture::new();
    assert!(f.train("run", &[]).status.success());
    std::fs::write(f.path("sents.txt"), "The acid was added to benzene. Then stirred.\n").unwrap();
    let (model, sents) = (f.path("run/best.ckpt"), f.path("sents.txt"));
    let o = run(&["tag", "--model", p(&model), "--in", p(&sents)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| l.contains('\t')).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows[0].starts_with("The\t"));
    assert!(rows.iter().all(|r| ["O", "B-M", "I-M"].contains(&r.split('\t').nth(1).unwrap())));
}

#[test]
fn training_is_reproducible() {
    let f = Fixture::new();
    assert!(f.train("a", &["--seed", "9"]).status.success());
    assert!(f.train("b", &["--seed", "9"]).status.success());
    for name in ["best.ckpt", "last.ckpt", "report.json"] {
        assert_eq!(
            std::fs::read(f.path("a").join(name)).unwrap(),
            std::fs::read(f.path("b").join(name)).unwrap(),
            "{name}"
        );
    }
    assert!(f.train("c", &["--seed", "10"]).status.success());
    assert_ne!(std::fs::read(f.path("a/last.ckpt")).unwrap(), std::fs::read(f.path("c/last.ckpt")).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let f = Fixture::new();
    assert!(f.train("full", &[]).status.success());
    assert!(f.train("part", &["--max-epochs", "3", "--patience", "3"]).status.success());
    let o = f.train("part", &["--resume", "--max-epochs", "6", "--patience", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(f.path("full/report.json")).unwrap(),
        std::fs::read_to_string(f.path("part/report.json")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_names_the_file() {
    let f = Fixture::new();
    std::fs::write(f.path("broken.ckpt"), b"PNERCKPT\x01\x00").unwrap();
    let (model, dev) = (f.path("broken.ckpt"), f.path("dev.txt"));
    let o = run(&["tag", "--model", p(&model), "--in", p(&dev), "--columns"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("broken.ckpt"), "{}", stderr(&o));
}

#[test]
fn config_errors_are_usage_errors() {
    let f = Fixture::new();
    std::fs::write(f.path("unknown.toml"), "[model]\nword_dims = 3\n").unwrap();
    let cfg = f.path("unknown.toml");
    let o = run(&["train", "--config", p(&cfg), "--train", "x", "--dev", "y", "--out", "z"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("word_dims"), "{}", stderr(&o));
    std::fs::write(f.path("missing.toml"), "[paths]\ntrain = \"nowhere.txt\"\n").unwrap();
    let cfg = f.path("missing.toml");
    assert_eq!(run(&["train", "--config", p(&cfg)]).status.code(), Some(1));
    // contextual features are on by default and need a language model
    let (tr, dv, o) = (f.path("train.txt"), f.path("dev.txt"), f.path("o"));
    let out = run(&["train", "--train", p(&tr), "--dev", p(&dv), "--out", p(&o)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn language_model_feeds_the_tagger() {
    let f = Fixture::new();
    std::fs::write(
        f.path("lm.toml"),
        "[bilm]\nchar_embed_dim = 3\nchar_filters = [[3, 4]]\ntoken_projection_dim = 4\nlayer_dim = 4\n",
    )
    .unwrap();
    let (cfg, tr, lm) = (f.path("lm.toml"), f.path("train.txt"), f.path("lm.ckpt"));
    let o = run(&["train-bilm", "--config", p(&cfg), "--corpus", p(&tr), "--epochs", "2", "--seed", "1", "--out", p(&lm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("perplexity\t"));

    let cfg = TINY.replace("use_contextual = false", "use_contextual = true").replace("max_epochs = 6", "max_epochs = 2").replace("patience = 6", "patience = 2");
    std::fs::write(f.path("tiny.toml"), cfg).unwrap();
    let o = f.train("ctx", &["--bilm", p(&lm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (model, dev) = (f.path("ctx/best.ckpt"), f.path("dev.txt"));
    assert!(run(&["tag", "--model", p(&model), "--in", p(&dev), "--columns"]).status.success());
}

#[test]
fn pretrained_embeddings_are_loaded() {
    let f = Fixture::new();
    std::fs::write(f.path("vec.txt"), "3 4\nacid 1 0 0 0\nbenzene 0 1 0 0\nzzz 0 0 1 0\n").unwrap();
    let v = f.path("vec.txt");
    let o = f.train("emb", &["--embeddings", p(&v), "--restrict-embeddings"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("word_dim set to 4"));
    std::fs::write(f.path("badvec.txt"), "1 4\nacid 1 0\n").unwrap();
    let v = f.path("badvec.txt");
    let o = f.train("emb2", &["--embeddings", p(&v)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck", "--seed", "1"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let o = run(&["gradcheck", "--threshold", "1e-30"]);
    assert_eq!(o.status.code(), Some(3));
}
