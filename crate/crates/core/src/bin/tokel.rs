//! Command-line driver for the token-level entity linking pipeline.
//!
//! Stages exchange artifacts through a directory whose `manifest.json`
//! records a SHA-256 per artifact, so every stage can verify its inputs
//! and reruns can be checked for bit-identical outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tokel::annotator::{annotate_corpus, read_annotated, write_annotated, MentionMatcher};
use tokel::config::KvConfig;
use tokel::corpus::{
    build_entity_vocab, collect_mention_stats, discount_nil, parse_corpus, EntityVocabulary,
    MentionTable,
};
use tokel::error::{Error, Result};
use tokel::evaluator::{ed_precision_at_1, extract_spans, strong_weak_f1, GoldSpan};
use tokel::fragmenter::{
    cap_per_entity, filter_fragments, fragment_corpus, read_fragments, split, write_fragments,
    Fragment, SettingPreset, TokenVocabulary,
};
use tokel::model::{
    encode, load_checkpoint, predict, save_checkpoint, score_entities, Checkpoint, CheckpointMeta,
    EncoderConfig, EncoderParams, EntityClassifier,
};
use tokel::pipeline::{atomic_write, PipelineManifest};
use tokel::trainer::{train, TrainConfig, TrainData};
use tokel::NIL_ID;

/// Environment variable naming the base directory that relative data
/// paths are resolved against.
const DATA_ROOT_VAR: &str = "TOKEL_DATA_ROOT";

#[derive(Parser)]
#[command(name = "tokel", about = "Token-level neural entity linking pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DirArg {
    /// Artifacts directory holding manifest.json.
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build entity/token vocabularies and the Nil-discounted mention table.
    Stats {
        #[command(flatten)]
        dir: DirArg,
        /// Corpus in JSON-lines form: {"doc_id", "tokens", "links"}.
        #[arg(long)]
        corpus: PathBuf,
        /// Entity vocabulary size (most frequent first).
        #[arg(long, default_value_t = 100_000)]
        entity_vocab_size: usize,
        /// Token vocabulary size.
        #[arg(long, default_value_t = 50_000)]
        token_vocab_size: usize,
        /// Number of frequent entities used to estimate the Nil prior.
        #[arg(long, default_value_t = 100)]
        nil_prior_k: usize,
    },
    /// Attach gold and weak annotations to a corpus.
    Annotate {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Cut annotated documents into training fragments and split them.
    Fragment {
        #[command(flatten)]
        dir: DirArg,
        /// Fragmentation preset: setting1 or setting2.
        #[arg(long, default_value = "setting2")]
        preset: String,
        /// Flat key=value file overriding preset fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validation fragments to hold out.
        #[arg(long, default_value_t = 0)]
        n_valid: usize,
        /// Test fragments to hold out.
        #[arg(long, default_value_t = 0)]
        n_test: usize,
    },
    /// Train the encoder and entity classifier.
    Train {
        #[command(flatten)]
        dir: DirArg,
        /// Flat key=value file with training and model hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a fragment split.
    Eval {
        #[command(flatten)]
        dir: DirArg,
        /// Which recorded split to score.
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoint path; defaults to the manifest's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Decision threshold on the per-entity sigmoid.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Link entities in whitespace-tokenized text from --text or stdin.
    Predict {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Resolves a possibly-relative path against `TOKEL_DATA_ROOT`.
fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_VAR) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_artifact(
    manifest: &mut PipelineManifest,
    dir: &Path,
    name: &str,
    relative: &str,
    body: &[u8],
) -> Result<()> {
    atomic_write(&dir.join(relative), body)?;
    manifest.record(dir, name, relative)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stats { dir, corpus, entity_vocab_size, token_vocab_size, nil_prior_k } => {
            let dir = resolve(&dir.dir);
            let docs = parse_corpus(open_reader(&resolve(&corpus))?)?;
            let entity_vocab =
                build_entity_vocab(&docs, entity_vocab_size, &std::collections::BTreeSet::new())?;
            let token_vocab = TokenVocabulary::build(
                docs.iter().flat_map(|d| d.tokens.iter().map(|t| t.as_str())),
                token_vocab_size,
            );
            let (raw_table, skipped) = collect_mention_stats(&docs, &entity_vocab);
            let table = discount_nil(&raw_table, nil_prior_k)?;
            if skipped.out_of_vocab_links > 0 {
                eprintln!(
                    "warning: {} links to out-of-vocabulary entities skipped",
                    skipped.out_of_vocab_links
                );
            }

            let mut manifest = PipelineManifest::load_or_default(&dir)?;
            let mut buf = Vec::new();
            entity_vocab.write_to(&mut buf)?;
            write_artifact(&mut manifest, &dir, "entity_vocab", "entity_vocab.tsv", &buf)?;
            buf.clear();
            token_vocab.write_to(&mut buf)?;
            write_artifact(&mut manifest, &dir, "token_vocab", "token_vocab.tsv", &buf)?;
            buf.clear();
            table.write_to(&mut buf)?;
            write_artifact(&mut manifest, &dir, "mention_table", "mention_table.tsv", &buf)?;
            manifest.save(&dir)?;
            println!(
                "stats: {} documents, {} entities, {} mention surfaces",
                docs.len(),
                entity_vocab.size() - 1,
                table.counts.len()
            );
            Ok(())
        }
        Command::Annotate { dir, corpus } => {
            let dir = resolve(&dir.dir);
            let mut manifest = PipelineManifest::load(&dir)?;
            let docs = parse_corpus(open_reader(&resolve(&corpus))?)?;
            let table = MentionTable::read_from(open_reader(&manifest.resolve(&dir, "mention_table")?)?)?;
            let matcher = MentionMatcher::from_patterns(table.counts.keys().map(|s| s.as_str()))?;
            let annotated = annotate_corpus(&docs, &matcher, &table)?;

            let mut buf = Vec::new();
            write_annotated(&mut buf, &annotated)?;
            write_artifact(&mut manifest, &dir, "annotated", "annotated.jsonl", &buf)?;
            manifest.save(&dir)?;
            let weak: usize = annotated
                .iter()
                .flat_map(|d| &d.annotations)
                .filter(|a| a.source == tokel::annotator::AnnotationSource::Weak)
                .count();
            println!("annotate: {} documents, {weak} weak annotations", annotated.len());
            Ok(())
        }
        Command::Fragment { dir, preset, config, seed, n_valid, n_test } => {
            let dir = resolve(&dir.dir);
            let mut manifest = PipelineManifest::load(&dir)?;
            let mut preset = SettingPreset::by_name(&preset)?;
            if let Some(path) = config {
                let kv = KvConfig::load(&resolve(&path))?;
                preset.apply_overrides(&kv)?;
            }
            let annotated = read_annotated(open_reader(&manifest.resolve(&dir, "annotated")?)?)?;
            let token_vocab =
                TokenVocabulary::read_from(open_reader(&manifest.resolve(&dir, "token_vocab")?)?)?;

            let mut freq = std::collections::BTreeMap::new();
            for doc in &annotated {
                for ann in doc.annotations.iter().filter(|a| a.is_gold()) {
                    for entity in ann.labels.keys() {
                        *freq.entry(entity.clone()).or_insert(0u64) += 1;
                    }
                }
            }
            let frags = fragment_corpus(&annotated, &preset, &token_vocab)?;
            let frags = filter_fragments(frags, &preset, &freq);
            let frags = match preset.per_entity_cap {
                Some(cap) => cap_per_entity(frags, cap, seed)?,
                None => frags,
            };
            let n_total = frags.len();
            let (train_f, valid_f, test_f) = split(frags, n_valid, n_test, seed)?;

            for (name, file, set) in [
                ("frags_train", "fragments.train.jsonl", &train_f),
                ("frags_valid", "fragments.valid.jsonl", &valid_f),
                ("frags_test", "fragments.test.jsonl", &test_f),
            ] {
                let mut buf = Vec::new();
                write_fragments(&mut buf, set)?;
                write_artifact(&mut manifest, &dir, name, file, &buf)?;
            }
            manifest.preset = Some(preset.name.clone());
            manifest.seed = Some(seed);
            manifest.save(&dir)?;
            println!(
                "fragment: {n_total} kept ({} train / {} valid / {} test)",
                train_f.len(),
                valid_f.len(),
                test_f.len()
            );
            Ok(())
        }
        Command::Train { dir, config, seed } => {
            let dir = resolve(&dir.dir);
            let mut manifest = PipelineManifest::load(&dir)?;
            let entity_vocab =
                EntityVocabulary::read_from(open_reader(&manifest.resolve(&dir, "entity_vocab")?)?)?;
            let token_vocab =
                TokenVocabulary::read_from(open_reader(&manifest.resolve(&dir, "token_vocab")?)?)?;
            let train_f = read_fragments(open_reader(&manifest.resolve(&dir, "frags_train")?)?)?;
            let valid_f = read_fragments(open_reader(&manifest.resolve(&dir, "frags_valid")?)?)?;

            let mut train_config = TrainConfig::default();
            let max_len = train_f
                .iter()
                .chain(&valid_f)
                .map(|f| f.token_ids.len())
                .max()
                .unwrap_or(1);
            let mut encoder_config = EncoderConfig::small(token_vocab.size(), max_len);
            if let Some(path) = &config {
                let kv = KvConfig::load(&resolve(path))?;
                let (model_kv, train_kv) = kv.partition(&["d", "n_layers", "n_heads", "max_len", "dropout"]);
                encoder_config.apply_overrides(&model_kv)?;
                train_config.apply_overrides(&train_kv)?;
            }
            if let Some(seed) = seed {
                train_config.seed = seed;
            }
            encoder_config.validate()?;

            let params = EncoderParams::init(&encoder_config, train_config.seed)?;
            let classifier =
                EntityClassifier::init(entity_vocab.size(), encoder_config.d, train_config.seed ^ 1)?;
            let meta = CheckpointMeta {
                encoder: encoder_config.clone(),
                kb_size: entity_vocab.size(),
                token_vocab_hash: token_vocab.content_hash(),
                entity_vocab_hash: entity_vocab.content_hash(),
                phase: "init".into(),
                step: 0,
            };

            let ckpt_dir = dir.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir)?;
            let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
            let id_of = |e: &str| entity_vocab.id_of(e);
            let data = TrainData { train: &train_f, valid: &valid_f, id_of: &id_of };
            let outcome = train(
                params,
                classifier,
                &data,
                &train_config,
                Some((&ckpt_dir, &meta)),
                Some(&mut log),
            )?;
            log.flush()?;

            let mut final_meta = meta;
            final_meta.phase = "final".into();
            final_meta.step = outcome.steps;
            let mut body = Vec::new();
            save_checkpoint_bytes(&mut body, &outcome.params, &outcome.classifier, &final_meta)?;
            write_artifact(&mut manifest, &dir, "checkpoint", "model.ckpt", &body)?;
            manifest.save(&dir)?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "train: {} steps, validation P {:.4} R {:.4} F1 {:.4}",
                    outcome.steps, last.precision, last.recall, last.f1
                );
            }
            Ok(())
        }
        Command::Eval { dir, split, checkpoint, threshold } => {
            let dir = resolve(&dir.dir);
            let manifest = PipelineManifest::load(&dir)?;
            let (ckpt, entity_vocab, _) = load_model(&dir, &manifest, checkpoint.as_deref())?;
            let frags = read_fragments(open_reader(
                &manifest.resolve(&dir, &format!("frags_{split}"))?,
            )?)?;

            let report = evaluate(&ckpt, &entity_vocab, &frags, threshold)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?);
            Ok(())
        }
        Command::Predict { dir, checkpoint, text, threshold } => {
            let dir = resolve(&dir.dir);
            let manifest = PipelineManifest::load(&dir)?;
            let (ckpt, entity_vocab, token_vocab) =
                load_model(&dir, &manifest, checkpoint.as_deref())?;

            let text = match text {
                Some(t) => t,
                None => {
                    let mut buf = String::new();
                    std::io::stdin().read_to_string(&mut buf)?;
                    buf
                }
            };
            let tokens: Vec<String> = text.split_whitespace().map(|t| t.to_lowercase()).collect();
            if tokens.is_empty() {
                return Ok(());
            }
            let token_ids: Vec<u32> = tokens.iter().map(|t| token_vocab.id_of(t)).collect();
            let (c, _) = encode(&ckpt.params, &token_ids, None)?;
            let all_ids = ckpt.classifier.all_entity_ids();
            let scores = score_entities(&ckpt.classifier, &all_ids, &c)?;
            let classes = predict(&scores, threshold);
            let probs = scores.probabilities();

            let stdout = std::io::stdout();
            let mut out = BufWriter::new(stdout.lock());
            for (i, (token, class)) in tokens.iter().zip(&classes).enumerate() {
                if *class == NIL_ID {
                    writeln!(out, "{token}\tO\t")?;
                } else {
                    let j = all_ids.iter().position(|id| id == class).unwrap();
                    let name = entity_vocab.entity_of(*class).map(|s| s.as_str()).unwrap_or("?");
                    writeln!(out, "{token}\t{name}\t{:.4}", probs[[i, j]])?;
                }
            }
            out.flush()?;
            Ok(())
        }
    }
}

fn save_checkpoint_bytes(
    out: &mut Vec<u8>,
    params: &EncoderParams,
    classifier: &EntityClassifier,
    meta: &CheckpointMeta,
) -> Result<()> {
    // Serialize through a temp file so the on-disk writer stays the single
    // source of truth for the format.
    let tmp = tempdir_path()?;
    save_checkpoint(&tmp, params, classifier, meta)?;
    *out = std::fs::read(&tmp)?;
    std::fs::remove_file(&tmp).ok();
    Ok(())
}

fn tempdir_path() -> Result<PathBuf> {
    let mut path = std::env::temp_dir();
    path.push(format!("tokel-ckpt-{}-{:x}", std::process::id(), std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_nanos()));
    Ok(path)
}

fn load_model(
    dir: &Path,
    manifest: &PipelineManifest,
    checkpoint: Option<&Path>,
) -> Result<(Checkpoint, EntityVocabulary, TokenVocabulary)> {
    let path = match checkpoint {
        Some(p) => resolve(p),
        None => manifest.resolve(dir, "checkpoint")?,
    };
    let ckpt = load_checkpoint(&path)?;
    let entity_vocab =
        EntityVocabulary::read_from(open_reader(&manifest.resolve(dir, "entity_vocab")?)?)?;
    let token_vocab =
        TokenVocabulary::read_from(open_reader(&manifest.resolve(dir, "token_vocab")?)?)?;
    ckpt.validate_hashes(&token_vocab.content_hash(), &entity_vocab.content_hash())?;
    Ok((ckpt, entity_vocab, token_vocab))
}

#[derive(serde::Serialize)]
struct EvalReport {
    strong: tokel::evaluator::PrfScores,
    weak: tokel::evaluator::PrfScores,
    ed_precision_at_1: f64,
    n_fragments: usize,
    n_gold_spans: usize,
}

fn evaluate(
    ckpt: &Checkpoint,
    entity_vocab: &EntityVocabulary,
    frags: &[Fragment],
    threshold: f64,
) -> Result<EvalReport> {
    let all_ids = ckpt.classifier.all_entity_ids();
    let name_of = |id| entity_vocab.entity_of(id).map(|s| s.as_str()).unwrap_or("?").to_string();

    let mut gold = Vec::new();
    let mut preds = Vec::new();
    let mut logits_by_frag = std::collections::BTreeMap::new();
    for fragment in frags {
        for ann in fragment.gold_annotations() {
            if let Some(entity) = ann.labels.keys().next() {
                if entity_vocab.id_of(entity).is_some() {
                    gold.push(GoldSpan {
                        doc_id: fragment.frag_id.clone(),
                        start: ann.start,
                        end: ann.end,
                        entity: entity.clone(),
                    });
                }
            }
        }
        let (c, _) = encode(&ckpt.params, &fragment.token_ids, None)?;
        let scores = score_entities(&ckpt.classifier, &all_ids, &c)?;
        preds.extend(extract_spans(&fragment.frag_id, &predict(&scores, threshold), name_of));
        logits_by_frag.insert(fragment.frag_id.clone(), scores);
    }

    let in_kb = |e: &str| entity_vocab.id_of(e).is_some();
    let report = strong_weak_f1(&gold, &preds, &in_kb)?;
    let p1 = ed_precision_at_1(
        &gold,
        |g| {
            let scores = logits_by_frag
                .get(&g.doc_id)
                .ok_or_else(|| Error::Data(format!("no logits for {}", g.doc_id)))?;
            Ok((
                scores.entity_ids.clone(),
                scores.logits.slice(ndarray::s![g.start..=g.end, ..]).to_owned(),
            ))
        },
        name_of,
    )?;
    Ok(EvalReport {
        strong: report.strong,
        weak: report.weak,
        ed_precision_at_1: p1,
        n_fragments: frags.len(),
        n_gold_spans: gold.len(),
    })
}
