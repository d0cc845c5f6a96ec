//! Command-line front end for the document translation lab.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use docflat::attention::Side;
use docflat::data::{
    load_parallel_corpus, make_pseudo_documents, parse_documents, plan_batches, Document,
    RawDocument, TokenId, Vocab, DOC_DELIMITER,
};
use docflat::eval::{
    contrastive_accuracy, corpus_bleu, document_attention_map, paired_bootstrap, read_contrastive,
    ups_benchmark, write_contrastive, BenchConfig, BenchRow,
};
use docflat::inference::{
    beam_search, iterative_decode, trailing_plan, DecodeConfig, LENGTH_ALPHA,
};
use docflat::model::{parse_key_values, ModelConfig, ModelParams, Variant};
use docflat::synth::{context_task, contrastive_examples, copy_corpus, ContextTaskConfig};
use docflat::training::{train_stage1, train_stage2, TrainConfig};
use docflat::Error;

#[derive(Parser)]
#[command(
    name = "docflat",
    version,
    about = "Document-level translation lab with flat-batch attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Context,
    Copy,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and the token-id corpus.
    PrepareData {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preceding sentences per pseudo-document in the preview file.
        #[arg(long, default_value_t = 3)]
        context: usize,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        /// Number of index tokens; defaults to the longest document.
        #[arg(long)]
        index_tokens: Option<usize>,
        #[arg(long, requires = "valid_tgt")]
        valid_src: Option<PathBuf>,
        #[arg(long, requires = "valid_src")]
        valid_tgt: Option<PathBuf>,
    },
    /// Train a sentence model (stage 1) or fine-tune a document model (stage 2).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Translate documents; with --sent-ckpt, decode in two passes.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sent_ckpt: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
        /// Decode each sentence of a batch to completion before the next.
        #[arg(long)]
        whole_sentences: bool,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Accuracy on a JSON-lines contrastive test set.
    ScoreContrastive {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Sentence-level self-attention matrix of one document.
    AttnMap {
        #[arg(long)]
        ckpt: PathBuf,
        /// Source side of the document.
        #[arg(long)]
        doc: PathBuf,
        /// Target side, needed for the decoder map.
        #[arg(long)]
        tgt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SideArg::Encoder)]
        side: SideArg,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Current sentence (0-based); defaults to the last one.
        #[arg(long)]
        sentence: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Training and decoding throughput on a synthetic corpus.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<Variant>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        docs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 22)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Corpus BLEU of a hypothesis file.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Paired bootstrap test of system A against system B.
    Significance {
        #[arg(long)]
        hyp_a: PathBuf,
        #[arg(long)]
        hyp_b: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a synthetic parallel corpus.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Context)]
        task: TaskArg,
        #[arg(long, default_value_t = 500)]
        docs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Core(Error::Data(format!("{}: {e}", path.display()))))
}

fn write_out(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn ids(s: &[TokenId]) -> String {
    s.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token-id corpus: a delimiter line per document, then one
/// `source ids<TAB>target ids` line per sentence.
fn corpus_to_ids(docs: &[Document]) -> String {
    let mut s = String::new();
    for d in docs {
        s.push_str(DOC_DELIMITER);
        s.push('\n');
        for (x, y) in d.source.iter().zip(&d.target) {
            let _ = writeln!(s, "{}\t{}", ids(x), ids(y));
        }
    }
    s
}

type Sentences = Vec<Vec<TokenId>>;

fn corpus_from_ids(text: &str, vocab: &Vocab) -> CliResult<Vec<Document>> {
    let mut docs: Vec<(Sentences, Sentences)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |what: &str| Error::Data(format!("corpus line {}: {what}", n + 1));
        if line.trim() == DOC_DELIMITER {
            docs.push((Vec::new(), Vec::new()));
            continue;
        }
        let doc = docs
            .last_mut()
            .ok_or_else(|| bad("sentence before the first delimiter"))?;
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected two tab-separated fields"))?;
        let parse = |f: &str| -> Result<Vec<TokenId>, Error> {
            f.split_whitespace()
                .map(|t| match t.parse::<TokenId>() {
                    Ok(id) if id < vocab.len() => Ok(id),
                    _ => Err(bad(&format!("token id {t:?} outside the vocabulary"))),
                })
                .collect()
        };
        doc.0.push(parse(a)?);
        doc.1.push(parse(b)?);
    }
    Ok(docs
        .into_iter()
        .enumerate()
        .map(|(i, (s, t))| Document::new(i, s, t))
        .collect::<Result<_, _>>()?)
}

fn vocab_for(explicit: Option<&Path>, ckpt: &Path) -> CliResult<Vocab> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt"),
    };
    if !path.exists() {
        return Err(usage(format!(
            "no vocabulary at {} (pass --vocab)",
            path.display()
        )));
    }
    Ok(Vocab::load(&path)?)
}

fn load_model(path: &Path, vocab: &Vocab) -> CliResult<(ModelConfig, ModelParams<f32>)> {
    let (cfg, params) = ModelParams::<f32>::load(path)?;
    if cfg.vocab_size != vocab.len() {
        return Err(Failure::Core(Error::Checkpoint(format!(
            "{} expects {} vocabulary entries, vocabulary has {}",
            path.display(),
            cfg.vocab_size,
            vocab.len()
        ))));
    }
    Ok((cfg, params))
}

/// Source-only documents; targets hold copies as placeholders.
fn source_documents(text: &str, vocab: &Vocab) -> CliResult<Vec<Document>> {
    let docs = parse_documents(text)?;
    if docs.is_empty() {
        return Err(Failure::Core(Error::Data(
            "input holds no documents".into(),
        )));
    }
    docs.into_iter()
        .enumerate()
        .map(|(i, source)| {
            let raw = RawDocument {
                doc_id: i,
                target: source.clone(),
                source,
            };
            Ok(vocab.encode_document(&raw)?)
        })
        .collect()
}

fn prepare_data(
    src: &Path,
    tgt: &Path,
    out: &Path,
    context: usize,
    min_freq: usize,
    index_tokens: Option<usize>,
    valid: Option<(&Path, &Path)>,
) -> CliResult {
    let raw = load_parallel_corpus(src, tgt)?;
    if raw.is_empty() {
        return Err(Failure::Core(Error::Data(
            "corpus holds no documents".into(),
        )));
    }
    let longest = raw.iter().map(|d| d.source.len()).max().unwrap_or(1);
    let n_index = index_tokens.unwrap_or(longest);
    let vocab = Vocab::build(&raw, min_freq, n_index)?;
    let docs: Vec<Document> = raw
        .iter()
        .map(|d| vocab.encode_document(d))
        .collect::<Result<_, _>>()?;
    fs::create_dir_all(out)?;
    vocab.save(out.join("vocab.txt"))?;
    fs::write(out.join("train.ids"), corpus_to_ids(&docs))?;
    if let Some((vs, vt)) = valid {
        let vraw = load_parallel_corpus(vs, vt)?;
        let vdocs: Vec<Document> = vraw
            .iter()
            .map(|d| vocab.encode_document(d))
            .collect::<Result<_, _>>()?;
        fs::write(out.join("valid.ids"), corpus_to_ids(&vdocs))?;
    }
    let mut preview = String::new();
    let mut n_pseudo = 0;
    for d in &docs {
        for pd in make_pseudo_documents(d, context, &vocab)? {
            n_pseudo += 1;
            let _ = writeln!(
                preview,
                "{}\t{}\t{}\t{}",
                pd.doc_id,
                pd.current_index,
                raw_tokens(&vocab, &pd.source),
                raw_tokens(&vocab, &pd.target_in)
            );
        }
    }
    fs::write(out.join("pseudo.txt"), preview)?;
    let sentences: usize = docs.iter().map(Document::len).sum();
    let summary = format!(
        "context = {context}\nmin_freq = {min_freq}\nindex_tokens = {n_index}\ndocuments = {}\nsentences = {sentences}\npseudo_documents = {n_pseudo}\nvocab = {}\n",
        docs.len(),
        vocab.len()
    );
    fs::write(out.join("prepare.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn raw_tokens(vocab: &Vocab, ids: &[TokenId]) -> String {
    ids.iter()
        .map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Model and training settings from defaults, a config file, then flags.
fn resolve_config(
    stage: u8,
    variant: Option<Variant>,
    file: Option<&Path>,
    seed: Option<u64>,
    vocab: &Vocab,
) -> CliResult<(ModelConfig, TrainConfig)> {
    let kv: Vec<(String, String)> = match file {
        Some(p) => parse_key_values(&read(p)?)?,
        None => Vec::new(),
    };
    let file_variant = kv
        .iter()
        .find(|(k, _)| k == "variant")
        .map(|(_, v)| v.parse::<Variant>())
        .transpose()?;
    let variant = match (variant, file_variant, stage) {
        (Some(v), _, _) | (None, Some(v), _) => v,
        (None, None, 1) => Variant::Sent2Sent,
        (None, None, _) => return Err(usage("stage 2 needs --variant")),
    };
    if stage == 1 && variant != Variant::Sent2Sent {
        return Err(usage(format!("stage 1 trains sent2sent, not {variant}")));
    }
    if stage == 2 && variant == Variant::Sent2Sent {
        return Err(usage("stage 2 trains a document variant"));
    }
    let mut cfg = ModelConfig::new(variant, vocab.len());
    let mut tcfg = if stage == 1 {
        TrainConfig::stage1()
    } else {
        TrainConfig::stage2()
    };
    for (k, v) in &kv {
        match k.as_str() {
            "variant" => {}
            "vocab_size" => {
                if v.parse::<usize>().ok() != Some(vocab.len()) {
                    return Err(Failure::Core(Error::Config(format!(
                        "vocab_size = {v} but the vocabulary has {} entries",
                        vocab.len()
                    ))));
                }
            }
            _ => {
                if !cfg.set(k, v)? && !tcfg.set(k, v)? {
                    return Err(Failure::Core(Error::Config(format!("unknown key {k:?}"))));
                }
            }
        }
    }
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    cfg.validate()?;
    tcfg.validate()?;
    Ok((cfg, tcfg))
}

#[allow(clippy::too_many_arguments)]
fn train(
    stage: u8,
    variant: Option<Variant>,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    init: Option<&Path>,
) -> CliResult {
    let vocab = Vocab::load(data.join("vocab.txt"))?;
    let (cfg, tcfg) = resolve_config(stage, variant, config, seed, &vocab)?;
    let train_docs = corpus_from_ids(&read(&data.join("train.ids"))?, &vocab)?;
    let valid_path = data.join("valid.ids");
    let valid_docs = if valid_path.exists() {
        corpus_from_ids(&read(&valid_path)?, &vocab)?
    } else {
        Vec::new()
    };
    fs::create_dir_all(out)?;
    fs::write(
        out.join("config.txt"),
        format!("{}{}", cfg.to_text(), tcfg.to_text()),
    )?;
    vocab.save(out.join("vocab.txt"))?;
    let mut log = fs::File::create(out.join("train.log.tsv"))?;
    let outcome = if stage == 1 {
        if init.is_some() {
            return Err(usage("--init applies to stage 2 only"));
        }
        train_stage1::<f32>(
            &train_docs,
            &valid_docs,
            &vocab,
            &cfg,
            &tcfg,
            Some(out),
            Some(&mut log),
        )?
    } else {
        let init = init.ok_or_else(|| usage("stage 2 needs --init <stage-1 checkpoint>"))?;
        let (_, s1) = load_model(init, &vocab)?;
        train_stage2(
            &s1,
            &train_docs,
            &valid_docs,
            &vocab,
            &cfg,
            &tcfg,
            Some(out),
            Some(&mut log),
        )?
    };
    outcome.averaged.save(&cfg, out.join("averaged.dflt"))?;
    outcome.best.save(&cfg, out.join("best.dflt"))?;
    if let Some(at) = outcome.diverged_at {
        return Err(Failure::Core(Error::NonFinite(format!(
            "training at update {at}; last good parameters saved"
        ))));
    }
    println!(
        "updates = {}\nearly_stopped = {}\nbest_valid = {}",
        outcome.updates, outcome.early_stopped, outcome.best_valid
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn translate(
    ckpt: &Path,
    sent_ckpt: Option<&Path>,
    input: &Path,
    beam: usize,
    batch: usize,
    max_len: usize,
    whole_sentences: bool,
    vocab: Option<&Path>,
    output: Option<&Path>,
) -> CliResult {
    if beam == 0 || batch == 0 || max_len == 0 {
        return Err(usage("--beam, --batch and --max-len must be positive"));
    }
    let vocab = vocab_for(vocab, ckpt)?;
    let (cfg, params) = load_model(ckpt, &vocab)?;
    let docs = source_documents(&read(input)?, &vocab)?;
    let dcfg = DecodeConfig {
        beam,
        max_len,
        alpha: LENGTH_ALPHA,
        whole_sentences,
    };
    let translations: Vec<Vec<Vec<TokenId>>> = match sent_ckpt {
        Some(p) => {
            let (scfg, sparams) = load_model(p, &vocab)?;
            iterative_decode(
                &docs,
                Some((&scfg, &sparams)),
                (&cfg, &params),
                &vocab,
                &dcfg,
                batch,
            )?
        }
        None if cfg.c_minus > 0 => {
            iterative_decode::<f32>(&docs, None, (&cfg, &params), &vocab, &dcfg, batch)?
        }
        None => {
            let mut flat = Vec::new();
            for plan in plan_batches(&docs, &vocab, 0, batch, None)? {
                flat.extend(beam_search(&cfg, &params, &plan, &vocab, &dcfg)?);
            }
            let mut it = flat.into_iter();
            docs.iter()
                .map(|d| it.by_ref().take(d.len()).collect())
                .collect()
        }
    };
    let mut text = String::new();
    for doc in translations {
        text.push_str(DOC_DELIMITER);
        text.push('\n');
        for s in doc {
            text.push_str(&vocab.decode(&s));
            text.push('\n');
        }
    }
    write_out(output, &text)
}

fn score_contrastive(ckpt: &Path, testset: &Path, batch: usize, vocab: Option<&Path>) -> CliResult {
    if batch == 0 {
        return Err(usage("--batch must be positive"));
    }
    let vocab = vocab_for(vocab, ckpt)?;
    let (cfg, params) = load_model(ckpt, &vocab)?;
    let f =
        fs::File::open(testset).map_err(|e| Error::Data(format!("{}: {e}", testset.display())))?;
    let examples = read_contrastive(BufReader::new(f))?;
    if examples.is_empty() {
        return Err(Failure::Core(Error::Data(
            "test set holds no examples".into(),
        )));
    }
    let report = contrastive_accuracy(&examples, &cfg, &params, &vocab, batch)?;
    print!("{}", report.to_text());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attn_map(
    ckpt: &Path,
    doc: &Path,
    tgt: Option<&Path>,
    side: SideArg,
    layer: usize,
    sentence: Option<usize>,
    batch: usize,
    vocab: Option<&Path>,
    output: Option<&Path>,
) -> CliResult {
    let vocab = vocab_for(vocab, ckpt)?;
    let (cfg, params) = load_model(ckpt, &vocab)?;
    let side = match side {
        SideArg::Encoder => Side::Encoder,
        SideArg::Decoder => Side::Decoder,
    };
    let docs = match tgt {
        Some(t) => {
            let raw = docflat::data::parse_parallel(&read(doc)?, &read(t)?)?;
            raw.iter()
                .map(|d| vocab.encode_document(d))
                .collect::<Result<Vec<_>, _>>()?
        }
        None if side == Side::Decoder => return Err(usage("the decoder map needs --tgt")),
        None => source_documents(&read(doc)?, &vocab)?,
    };
    let first = docs
        .first()
        .ok_or_else(|| Error::Data("no document in input".into()))?;
    let current = sentence.unwrap_or(first.len() - 1);
    if current >= first.len() {
        return Err(usage(format!(
            "--sentence {current} but the document has {} sentences",
            first.len()
        )));
    }
    let upto = Document::new(
        0,
        first.source[..=current].to_vec(),
        first.target[..=current].to_vec(),
    )?;
    let plan = trailing_plan(&upto, &cfg, &vocab, batch.max(1))?;
    let m = document_attention_map(&cfg, &params, &plan, plan.len() - 1, side, layer)?;
    write_out(output, &m.to_text())
}

fn config_overrides(file: Option<&Path>) -> CliResult<BTreeMap<String, String>> {
    Ok(match file {
        Some(p) => parse_key_values(&read(p)?)?.into_iter().collect(),
        None => BTreeMap::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn bench(
    variants: &[Variant],
    config: Option<&Path>,
    docs: usize,
    batch: usize,
    steps: usize,
    warmup: usize,
    trials: usize,
    seed: u64,
) -> CliResult {
    if docs == 0 || batch == 0 {
        return Err(usage("--docs and --batch must be positive"));
    }
    if trials == 0 || steps < warmup + trials {
        return Err(usage(format!(
            "--steps must be at least --warmup + --trials ({warmup} + {trials})"
        )));
    }
    let task = context_task(
        &ContextTaskConfig {
            docs,
            ..Default::default()
        },
        seed,
    );
    let raw: Vec<RawDocument> = task.into_iter().map(|t| t.doc).collect();
    let n_index = raw.iter().map(|d| d.source.len()).max().unwrap_or(1);
    let vocab = Vocab::build(&raw, 1, n_index)?;
    let corpus: Vec<Document> = raw
        .iter()
        .map(|d| vocab.encode_document(d))
        .collect::<Result<_, _>>()?;
    let overrides = config_overrides(config)?;
    let mut configs = Vec::new();
    for &v in variants {
        let mut cfg = ModelConfig::new(v, vocab.len());
        for (k, val) in &overrides {
            if k != "variant" && !cfg.set(k, val)? {
                return Err(Failure::Core(Error::Config(format!("unknown key {k:?}"))));
            }
        }
        cfg.validate()?;
        configs.push(cfg);
    }
    let bc = BenchConfig {
        warmup,
        trials,
        steps,
        seed,
        ..BenchConfig::default()
    };
    let rows = ups_benchmark(
        &configs,
        &|c| plan_batches(&corpus, &vocab, c.c_minus, batch, None),
        &vocab,
        &bc,
    )?;
    let mut text = format!("{}\n", BenchRow::HEADER);
    for r in rows {
        text.push_str(&r.to_tsv());
        text.push('\n');
    }
    write_out(None, &text)
}

/// Sentence lines of a plain-text file, skipping document delimiters.
fn sentences(path: &Path) -> CliResult<Vec<String>> {
    Ok(read(path)?
        .lines()
        .filter(|l| l.trim() != DOC_DELIMITER)
        .map(str::to_string)
        .collect())
}

fn make_synthetic(out: &Path, task: TaskArg, docs: usize, seed: u64) -> CliResult {
    if docs == 0 {
        return Err(usage("--docs must be positive"));
    }
    fs::create_dir_all(out)?;
    let raw = match task {
        TaskArg::Copy => copy_corpus(docs * 10, 10, 20, seed),
        TaskArg::Context => {
            let t = context_task(
                &ContextTaskConfig {
                    docs,
                    ..Default::default()
                },
                seed,
            );
            let mut f = fs::File::create(out.join("contrastive.jsonl"))?;
            write_contrastive(&mut f, &contrastive_examples(&t))?;
            t.into_iter().map(|d| d.doc).collect()
        }
    };
    let side = |pick: fn(&RawDocument) -> &Vec<Vec<String>>| {
        let mut s = String::new();
        for d in &raw {
            s.push_str(DOC_DELIMITER);
            s.push('\n');
            for sent in pick(d) {
                s.push_str(&sent.join(" "));
                s.push('\n');
            }
        }
        s
    };
    fs::write(out.join("train.src"), side(|d| &d.source))?;
    fs::write(out.join("train.tgt"), side(|d| &d.target))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::PrepareData {
            src,
            tgt,
            out,
            context,
            min_freq,
            index_tokens,
            valid_src,
            valid_tgt,
        } => {
            let valid = valid_src.as_deref().zip(valid_tgt.as_deref());
            prepare_data(&src, &tgt, &out, context, min_freq, index_tokens, valid)
        }
        Command::Train {
            stage,
            variant,
            config,
            data,
            out,
            seed,
            init,
        } => train(
            stage,
            variant,
            config.as_deref(),
            &data,
            &out,
            seed,
            init.as_deref(),
        ),
        Command::Translate {
            ckpt,
            sent_ckpt,
            input,
            beam,
            batch,
            max_len,
            whole_sentences,
            vocab,
            output,
        } => translate(
            &ckpt,
            sent_ckpt.as_deref(),
            &input,
            beam,
            batch,
            max_len,
            whole_sentences,
            vocab.as_deref(),
            output.as_deref(),
        ),
        Command::ScoreContrastive {
            ckpt,
            testset,
            batch,
            vocab,
        } => score_contrastive(&ckpt, &testset, batch, vocab.as_deref()),
        Command::AttnMap {
            ckpt,
            doc,
            tgt,
            side,
            layer,
            sentence,
            batch,
            vocab,
            output,
        } => attn_map(
            &ckpt,
            &doc,
            tgt.as_deref(),
            side,
            layer,
            sentence,
            batch,
            vocab.as_deref(),
            output.as_deref(),
        ),
        Command::Bench {
            variants,
            config,
            docs,
            batch,
            steps,
            warmup,
            trials,
            seed,
        } => bench(
            &variants,
            config.as_deref(),
            docs,
            batch,
            steps,
            warmup,
            trials,
            seed,
        ),
        Command::Bleu { hyp, reference } => {
            let b = corpus_bleu(&sentences(&hyp)?, &sentences(&reference)?)?;
            println!("BLEU = {b:.2}");
            Ok(())
        }
        Command::Significance {
            hyp_a,
            hyp_b,
            reference,
            resamples,
            seed,
        } => {
            let (a, b, r) = (
                sentences(&hyp_a)?,
                sentences(&hyp_b)?,
                sentences(&reference)?,
            );
            let p = paired_bootstrap(&a, &b, &r, resamples, seed)?;
            println!("bleu_a = {:.2}", corpus_bleu(&a, &r)?);
            println!("bleu_b = {:.2}", corpus_bleu(&b, &r)?);
            println!("p_value = {p:.4}");
            Ok(())
        }
        Command::MakeSynthetic {
            out,
            task,
            docs,
            seed,
        } => make_synthetic(&out, task, docs, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 4 } else { 3 })
        }
    }
}
