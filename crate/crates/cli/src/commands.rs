use std::fmt::Write as _;
use std::io::Read;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use patentner_core::bilm::{train_bilm, BiLm};
use patentner_core::corpus::{
    build_vocabulary, corpus_stats, infer_scheme, normalize_long_tokens, parse_column_corpus,
    split_dataset, write_column_corpus, ColumnCorpus, LabelScheme, TaggedSentence, DOCSTART,
};
use patentner_core::embeddings::{align_to_vocab, load_embedding_text, load_embedding_text_filtered};
use patentner_core::eval::{confusion_matrix, error_listing, evaluate};
use patentner_core::model::{Model, ModelConfig};
use patentner_core::numerics::grad_check;
use patentner_core::textproc::{split_sentences, TokenizerKind};
use patentner_core::training::{dev_f1, train_from, Checkpoint, RawCheckpoint, TrainConfig, TrainReport};

use crate::config::{tokenizer, RunConfig};
use crate::{CliError, Command};

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Tokenize { mode, rules } => tokenize(tokenizer(mode, rules.as_deref())?),
        Command::Stats { corpus } => stats(&corpus),
        Command::Split {
            corpus,
            out,
            seed,
            ratios,
        } => split(&corpus, &out, seed, &ratios),
        Command::TrainBilm {
            config,
            corpus,
            text,
            epochs,
            seed,
            out,
        } => bilm(config.as_deref(), corpus, text, epochs, seed, out),
        Command::Train {
            config,
            train,
            dev,
            out,
            seed,
            bilm,
            embeddings,
            restrict_embeddings,
            max_epochs,
            patience,
            resume,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let args = TrainArgs {
                train: required(train.or(cfg.paths.train.clone()), "--train")?,
                dev: required(dev.or(cfg.paths.dev.clone()), "--dev")?,
                out: required(out.or(cfg.paths.out.clone()), "--out")?,
                bilm: bilm.or(cfg.paths.bilm.clone()),
                embeddings: embeddings.or(cfg.paths.embeddings.clone()),
                restrict_embeddings,
                seed: seed.or(cfg.seed),
                max_epochs,
                patience,
                resume,
            };
            run_train(cfg, args)
        }
        Command::Tag {
            model,
            input,
            out,
            columns,
            mode,
            rules,
        } => tag(&model, &input, out.as_deref(), columns, tokenizer(mode, rules.as_deref())?),
        Command::Eval {
            gold,
            pred,
            confusion,
            errors,
            error_limit,
            json,
        } => eval(&gold, &pred, confusion.as_deref(), errors.as_deref(), error_limit, json),
        Command::Gradcheck {
            seed,
            epsilon,
            threshold,
        } => gradcheck(seed, epsilon, threshold),
    }
}

fn required(path: Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| CliError::Usage(format!("{flag} is required (flag or config file)")))
}

fn in_file(path: &Path) -> impl Fn(patentner_core::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_corpus(path: &Path, scheme: &LabelScheme) -> CliResult<ColumnCorpus> {
    let corpus = parse_column_corpus(&read_text(path)?, scheme, true).map_err(in_file(path))?;
    if corpus.repairs > 0 {
        eprintln!("{}: repaired {} BIO transitions", path.display(), corpus.repairs);
    }
    Ok(corpus)
}

fn tokenize(kind: TokenizerKind) -> CliResult {
    let mut text = String::new();
    std::io::stdin()
        .read_to_string(&mut text)
        .map_err(|e| CliError::Data(format!("standard input: {e}")))?;
    let mut out = String::new();
    for t in kind.tokenize(&text) {
        let _ = writeln!(out, "{}\t{}\t{}", t.start, t.end, t.text);
    }
    print!("{out}");
    Ok(())
}

fn stats(path: &Path) -> CliResult {
    let text = read_text(path)?;
    let scheme = infer_scheme(&text).map_err(in_file(path))?;
    let corpus = read_corpus(path, &scheme)?;
    let stats = corpus_stats(&corpus.sentences, &scheme);
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(())
}

fn split(path: &Path, out: &Path, seed: u64, ratios: &[f64]) -> CliResult {
    let text = read_text(path)?;
    let scheme = infer_scheme(&text).map_err(in_file(path))?;
    let corpus = read_corpus(path, &scheme)?;
    let s = split_dataset(&corpus.sentences, (ratios[0], ratios[1], ratios[2]), seed)
        .map_err(in_file(path))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    for (name, part) in [("train", &s.train), ("dev", &s.dev), ("test", &s.test)] {
        write_text(&out.join(format!("{name}.txt")), &write_column_corpus(part, &scheme))?;
        let docs = corpus_stats(part, &scheme).documents;
        println!("{name}\t{docs} documents\t{} sentences", part.len());
    }
    Ok(())
}

fn text_sentences(text: &str, kind: &TokenizerKind) -> Vec<Vec<String>> {
    split_sentences(text)
        .iter()
        .map(|s| kind.tokenize(&s.text).into_iter().map(|t| t.text).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

fn bilm(
    config: Option<&Path>,
    corpus: Option<PathBuf>,
    text: bool,
    epochs: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let corpus = required(corpus.or(cfg.paths.corpus.clone()), "--corpus")?;
    let out = required(out.or(cfg.paths.out.clone()), "--out")?;
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let raw = read_text(&corpus)?;
    let sentences: Vec<Vec<String>> = if text {
        let kind = tokenizer(cfg.tokenizer.unwrap_or_default(), cfg.paths.rules.as_deref())?;
        text_sentences(&raw, &kind)
    } else {
        let scheme = infer_scheme(&raw).map_err(in_file(&corpus))?;
        read_corpus(&corpus, &scheme)?
            .sentences
            .iter()
            .map(|s| s.words().map(String::from).collect())
            .collect()
    };
    let trained = train_bilm(&sentences, cfg.bilm, epochs, seed)?;
    for (i, p) in trained.perplexities.iter().enumerate() {
        eprintln!("epoch {}\tperplexity {p:.4}", i + 1);
    }
    trained.bilm.to_raw()?.save(&out).map_err(in_file(&out))?;
    if let Some(p) = trained.perplexities.last() {
        println!("perplexity\t{p:.6}");
    }
    Ok(())
}

struct TrainArgs {
    train: PathBuf,
    dev: PathBuf,
    out: PathBuf,
    bilm: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    restrict_embeddings: bool,
    seed: Option<u64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    resume: bool,
}

fn override_limits(cfg: &mut TrainConfig, args: &TrainArgs) -> CliResult {
    if let Some(m) = args.max_epochs {
        cfg.max_epochs = m;
    }
    if let Some(p) = args.patience {
        cfg.patience = p;
    }
    Ok(cfg.validate()?)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(in_file(path))
}

fn run_train(cfg: RunConfig, args: TrainArgs) -> CliResult {
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let last_path = args.out.join("last.ckpt");
    let best_path = args.out.join("best.ckpt");

    let (current, best) = if args.resume {
        let mut last = load_checkpoint(&last_path)?;
        let Some(state) = last.training.as_mut() else {
            return Err(CliError::Data(format!("{}: no training state", last_path.display())));
        };
        override_limits(&mut state.config, &args)?;
        (last, Some(load_checkpoint(&best_path)?))
    } else {
        let mut tcfg = cfg.training.clone();
        if let Some(s) = args.seed {
            tcfg.seed = s;
        }
        override_limits(&mut tcfg, &args)?;
        let text = read_text(&args.train)? + "\n" + &read_text(&args.dev)?;
        let scheme = infer_scheme(&text).map_err(in_file(&args.train))?;
        let model = build_model(&cfg, &args, scheme, tcfg.seed)?;
        (Checkpoint::new(model, tcfg), None)
    };
    let model = &current.model;
    let normalize = |c: ColumnCorpus| -> Vec<TaggedSentence> {
        c.sentences
            .iter()
            .map(|s| normalize_long_tokens(s, model.config.max_token_len))
            .collect()
    };
    let train_set = model.prepare_all(&normalize(read_corpus(&args.train, &model.scheme)?))?;
    let dev_set = model.prepare_all(&normalize(read_corpus(&args.dev, &model.scheme)?))?;
    if dev_set.is_empty() {
        return Err(CliError::Data(format!("{}: development split is empty", args.dev.display())));
    }

    let mut score = |m: &Model| dev_f1(m, &dev_set);
    let mut save = |cur: &Checkpoint, best: &Checkpoint| {
        let p = &cur.training.as_ref().expect("training state").progress;
        if let Some(r) = p.epochs.last() {
            eprintln!("epoch {}\tloss {:.6}\tdev_f1 {:.6}", r.epoch, r.train_loss, r.dev_f1);
        }
        cur.save(&last_path)?;
        if best.training.as_ref().map(|t| t.progress.completed()) == Some(p.completed()) {
            best.save(&best_path)?;
        }
        Ok(ControlFlow::Continue(()))
    };
    let outcome = train_from(current, best, &train_set, &mut score, &mut save)?;
    outcome.best.save(&best_path).map_err(in_file(&best_path))?;
    outcome.last.save(&last_path).map_err(in_file(&last_path))?;
    let report: &TrainReport = &outcome.report;
    write_text(&args.out.join("report.json"), &(report.to_json() + "\n"))?;
    println!(
        "best epoch {}\tdev micro-F1 {:.6}\tstopped: {:?}",
        report.best_epoch, report.best_dev_f1, report.stop_reason
    );
    Ok(())
}

fn build_model(cfg: &RunConfig, args: &TrainArgs, scheme: LabelScheme, seed: u64) -> CliResult<Model> {
    let mut mcfg: ModelConfig = cfg.model.clone();
    let read = |p: &Path| -> CliResult<Vec<TaggedSentence>> {
        Ok(read_corpus(p, &scheme)?
            .sentences
            .iter()
            .map(|s| normalize_long_tokens(s, mcfg.max_token_len))
            .collect())
    };
    let train = read(&args.train)?;
    let dev = read(&args.dev)?;

    let bilm = match (&args.bilm, mcfg.use_contextual) {
        (Some(p), true) => {
            let raw = RawCheckpoint::load(p).map_err(in_file(p))?;
            Some(Arc::new(BiLm::from_raw(&raw).map_err(in_file(p))?))
        }
        (None, true) => {
            return Err(CliError::Usage(
                "contextual features need --bilm (or model.use_contextual = false)".into(),
            ))
        }
        (_, false) => None,
    };

    let (vocab, table) = match &args.embeddings {
        Some(path) => {
            let loaded = if args.restrict_embeddings {
                let words: std::collections::HashSet<String> = train
                    .iter()
                    .chain(&dev)
                    .flat_map(|s| s.words().flat_map(|w| [w.to_string(), w.to_lowercase()]))
                    .collect();
                load_embedding_text_filtered(path, &|w| words.contains(w))
            } else {
                load_embedding_text(path)
            }
            .map_err(in_file(path))?;
            if loaded.dim != mcfg.word_dim {
                eprintln!("note: word_dim set to {} from {}", loaded.dim, path.display());
                mcfg.word_dim = loaded.dim;
            }
            mcfg.use_pretrained_words = true;
            mcfg.pretrained_source = Some(path.display().to_string());
            let vocab = build_vocabulary(&train, &dev, &loaded.words);
            let table = align_to_vocab(&loaded, &vocab, seed);
            (vocab, Some(table))
        }
        None => {
            if mcfg.use_pretrained_words {
                return Err(CliError::Usage("model.use_pretrained_words needs --embeddings".into()));
            }
            (build_vocabulary(&train, &dev, &[]), None)
        }
    };
    Ok(Model::new(mcfg, scheme, vocab, table, bilm, seed)?)
}

/// First-column tokens of a column file; any further columns are ignored.
fn read_token_columns(text: &str) -> Vec<TaggedSentence> {
    let mut out = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut doc = 0usize;
    let mut doc_used = false;
    let flush = |words: &mut Vec<String>, doc: usize, out: &mut Vec<TaggedSentence>| {
        if !words.is_empty() {
            out.push(TaggedSentence::from_words(words, vec![0; words.len()], &format!("doc{doc}")));
            words.clear();
        }
    };
    for line in text.lines() {
        let t = line.trim();
        if t.is_empty() {
            flush(&mut words, doc, &mut out);
        } else if t.starts_with(DOCSTART) {
            flush(&mut words, doc, &mut out);
            if doc_used {
                doc += 1;
                doc_used = false;
            }
        } else if let Some(tok) = t.split_whitespace().next() {
            words.push(tok.to_string());
            doc_used = true;
        }
    }
    flush(&mut words, doc, &mut out);
    out
}

fn tag(model_path: &Path, input: &Path, out: Option<&Path>, columns: bool, kind: TokenizerKind) -> CliResult {
    let ckpt = load_checkpoint(model_path)?;
    let model = ckpt.model;
    let text = read_text(input)?;
    let mut sentences = if columns {
        read_token_columns(&text)
    } else {
        let mut all = Vec::new();
        for (d, block) in text.split("\n\n").filter(|b| !b.trim().is_empty()).enumerate() {
            for words in text_sentences(block, &kind) {
                all.push(TaggedSentence::from_words(&words, vec![0; words.len()], &format!("doc{d}")));
            }
        }
        all
    };
    for s in &mut sentences {
        let words: Vec<&str> = s.words().collect();
        s.tags = model.predict(&model.prepare_tokens(&words)?)?;
    }
    let rendered = write_column_corpus(&sentences, &model.scheme);
    match out {
        Some(p) => write_text(p, &rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn eval(
    gold_path: &Path,
    pred_path: &Path,
    confusion: Option<&Path>,
    errors: Option<&Path>,
    limit: usize,
    json: bool,
) -> CliResult {
    let gold_text = read_text(gold_path)?;
    let pred_text = read_text(pred_path)?;
    let scheme = infer_scheme(&format!("{gold_text}\n{pred_text}")).map_err(in_file(gold_path))?;
    let gold = read_corpus(gold_path, &scheme)?.sentences;
    // predictions are scored as written
    let pred: Vec<Vec<usize>> = parse_column_corpus(&pred_text, &scheme, false)
        .map_err(in_file(pred_path))?
        .sentences
        .into_iter()
        .map(|s| s.tags)
        .collect();
    let report = evaluate(&gold, &pred, &scheme)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
    }
    if let Some(p) = confusion {
        write_text(p, &confusion_matrix(&gold, &pred, &scheme)?.to_csv())?;
    }
    if let Some(p) = errors {
        let mut text = String::new();
        for e in error_listing(&gold, &pred, &scheme, limit)? {
            let _ = writeln!(text, "{}\t{}\t{}\t{}", e.sentence, e.document_id, e.errors, e.rendered);
        }
        write_text(p, &text)?;
    }
    Ok(())
}

fn gradcheck(seed: u64, epsilon: f64, threshold: f64) -> CliResult {
    let words = [
        "the", "acid", "was", "added", "to", "water", "benzene", "then", "stirred", "at",
        "room", "temperature", "and", "filtered", "yield", "of", "solid", "ethanol",
    ];
    let tags = [0, 1, 2, 0, 3, 4];
    let sentence: Vec<&str> = (0..6).map(|i| words[(i * 3 + seed as usize) % words.len()]).collect();
    let scheme = LabelScheme::new(vec!["G".into(), "M".into()])?;
    let corpus = [TaggedSentence::from_words(&words, vec![0; words.len()], "g")];
    let vocab = patentner_core::corpus::build_vocabulary_with(&corpus, &[], &[], 1);
    let cfg = ModelConfig {
        use_contextual: false,
        word_dim: 8,
        char_embed_dim: 4,
        char_filter_count: 4,
        char_output_dim: 4,
        lstm_hidden: 6,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, scheme, vocab, None, None, seed)?;
    let tagged = TaggedSentence::from_words(&sentence, tags.to_vec(), "g");
    let p = model.prepare(&tagged)?;
    let mut store = model.params.clone();
    let report = grad_check(&mut store, epsilon, |tape| {
        model.loss_on_tape(tape, &[&p], Some(seed))
    })?;
    println!(
        "coordinates {}\tmax relative error {:.3e}\tworst {:?}",
        report.coordinates, report.max_relative_error, report.worst
    );
    if report.max_relative_error < threshold {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {:.3e} >= {threshold:.1e}",
            report.max_relative_error
        )))
    }
}
