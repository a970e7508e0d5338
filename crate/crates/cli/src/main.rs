mod settings;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use spnmt::corpus::{dedupe, load_corpus, CorpusFormat, LoadOptions};
use spnmt::dense::{build_dense_index, DenseIndex, EmbeddingProvider, HashEmbedding};
use spnmt::harness::{
    adapt_nonparametric, corpus_bleu, evaluate_loss, examples_with_neighbors, finetune, token_accuracy, train, Example,
    ModelEmbedding, RetrievalIndex, RetrievalStrategy, Retriever, TrainOutcome,
};
use spnmt::idf::{build_idf, IdfTable, InvertedIndex};
use spnmt::memory::RetrievedBatch;
use spnmt::neighbors::{read_neighbor_sets, write_neighbor_sets};
use spnmt::ngram::{build_ngram_index, NGramIndex, RetrievalMode};
use spnmt::nn::{beam_decode, init_params, ModelConfig, ParamStore, Precision};
use spnmt::{Corpus, Split};

use settings::{DenseProvider, Settings};

#[derive(Parser)]
#[command(name = "spnmt", version, about = "Retrieval-augmented neural machine translation")]
struct Cli {
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Storage precision of freshly initialized parameters.
    #[arg(long, global = true, default_value = "double")]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a TSV or JSONL parallel file into a corpus snapshot.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input's extension.
        #[arg(long)]
        format: Option<CorpusFormat>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "default")]
        domain: String,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Extend the vocabulary of this snapshot so token ids stay shared.
        #[arg(long)]
        vocab_from: Option<PathBuf>,
        /// Drop malformed rows instead of failing.
        #[arg(long)]
        skip_bad: bool,
        /// Keep only the first copy of each (source, target).
        #[arg(long)]
        dedupe: bool,
    },
    /// IDF table and inverted index for sentence retrieval (JSON).
    BuildIdfIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Reduced n-gram index for IDF n-gram retrieval (JSON).
    BuildNgramIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Mean n-gram vectors for dense retrieval (binary).
    BuildDenseIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Encoder used when `dense_provider = model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump one neighbor set per query as JSONL.
    Retrieve {
        /// The retrieval corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the retrieval corpus itself.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<RetrievalStrategy>,
        #[arg(long, default_value = "train")]
        mode: RetrievalMode,
        /// Prebuilt index; built in memory when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        /// A query never retrieves the pair with its own id.
        #[arg(long)]
        exclude_self: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Include the matched n-grams of each neighbor.
        #[arg(long)]
        with_matches: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train from scratch; writes checkpoints and metrics.jsonl to --out.
    Train(TrainArgs),
    /// Decode a corpus snapshot to one line of tokens per sentence.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        memory: MemoryArgs,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Corpus BLEU, plus loss and token accuracy when a checkpoint is given.
    Evaluate {
        /// Pairs whose targets are the references.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Reference lines; an alternative to --corpus.
        #[arg(long, conflicts_with = "corpus")]
        references: Option<PathBuf>,
        /// Hypothesis lines; decoded from --checkpoint when absent.
        #[arg(long)]
        hypotheses: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        memory: MemoryArgs,
        /// Also write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Translate with neighbors from a new corpus; parameters stay untouched.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domain_corpus: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        strategy: Option<RetrievalStrategy>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Continue training a checkpoint on in-domain data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Neighbor sets of the training pairs; required unless the strategy is none.
    #[arg(long)]
    neighbors: Option<PathBuf>,
    #[arg(long)]
    dev_neighbors: Option<PathBuf>,
    /// Corpus the neighbor ids refer to; defaults to --train.
    #[arg(long)]
    retrieval_corpus: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<RetrievalStrategy>,
    #[arg(long)]
    out: PathBuf,
}

/// Where decode-time neighbors come from: a dump, retrieval on the fly
/// over --retrieval-corpus, or nowhere.
#[derive(Args)]
struct MemoryArgs {
    #[arg(long)]
    neighbors: Option<PathBuf>,
    #[arg(long)]
    retrieval_corpus: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<RetrievalStrategy>,
}

#[derive(Serialize, Deserialize)]
struct IdfIndexFile {
    idf: IdfTable,
    inverted: InvertedIndex,
}

#[derive(Serialize)]
struct EvalReport {
    sentences: usize,
    bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    token_accuracy: Option<f64>,
}

fn load_checkpoint(path: &Path) -> Result<(ParamStore, ModelConfig)> {
    let (store, meta) = ParamStore::load(path)?;
    let cfg = ModelConfig::from_text(&meta).with_context(|| format!("model description in {}", path.display()))?;
    Ok((store, cfg))
}

fn load_snapshot(path: &Path) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    serde_json::from_reader(r).with_context(|| format!("parsing {}", path.display()))
}

fn write_lines(path: Option<&Path>, lines: &[String]) -> Result<()> {
    let mut w: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    r.lines()
        .map(|l| Ok(l?.split_whitespace().map(str::to_string).collect()))
        .collect()
}

fn embedding_provider(
    settings: &Settings,
    corpus: &Corpus,
    checkpoint: Option<&Path>,
) -> Result<Arc<dyn EmbeddingProvider>> {
    Ok(match settings.dense_provider {
        DenseProvider::Hash => Arc::new(HashEmbedding::new(
            corpus.vocab.clone(),
            settings.dense_dim,
            settings.dense_seed,
        )),
        DenseProvider::Model => {
            let path = checkpoint.context("dense_provider = model needs --checkpoint")?;
            let (store, cfg) = load_checkpoint(path)?;
            Arc::new(ModelEmbedding::new(cfg, store))
        }
    })
}

fn build_retriever(
    settings: &Settings,
    corpus: Corpus,
    index: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<Retriever> {
    let cfg = settings.retrieval.clone();
    let provider = match cfg.strategy {
        RetrievalStrategy::DenseNgram => Some(embedding_provider(settings, &corpus, checkpoint)?),
        _ => None,
    };
    let Some(path) = index else {
        return Ok(Retriever::build(corpus, cfg, provider)?);
    };
    let index = match cfg.strategy {
        RetrievalStrategy::None => bail!("--index given but the strategy is none"),
        RetrievalStrategy::IdfSentence => {
            let f: IdfIndexFile = read_json(path)?;
            RetrievalIndex::Sentence(f.idf, f.inverted)
        }
        RetrievalStrategy::IdfNgram => RetrievalIndex::NGram(read_json::<NGramIndex>(path)?),
        RetrievalStrategy::DenseNgram => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let idx = DenseIndex::read_from(BufReader::new(f))?;
            RetrievalIndex::Dense(idx, provider.expect("dense provider"))
        }
    };
    Ok(Retriever::from_index(corpus, cfg, index)?)
}

/// Examples for `queries` with neighbors read from `neighbors`, resolved
/// against `retrieval`. A strategy other than none requires the file.
fn examples_from_dump(
    queries: &Corpus,
    neighbors: Option<&Path>,
    retrieval: &Corpus,
    strategy: RetrievalStrategy,
    flag: &str,
) -> Result<Vec<Example>> {
    let sets = match (strategy, neighbors) {
        (RetrievalStrategy::None, _) => None,
        (s, None) => bail!("retrieval strategy {s} needs a neighbor file ({flag})"),
        (_, Some(p)) => Some(read_neighbor_sets(p).with_context(|| format!("reading {}", p.display()))?),
    };
    Ok(examples_with_neighbors(queries, sets.as_deref(), retrieval)?)
}

/// Decode-time examples for `input` as described by `memory`.
fn decode_examples(
    settings: &Settings,
    input: &Corpus,
    memory: &MemoryArgs,
    checkpoint: Option<&Path>,
) -> Result<Vec<Example>> {
    let retrieval = memory.retrieval_corpus.as_deref().map(load_snapshot).transpose()?;
    match (&memory.neighbors, retrieval) {
        (Some(path), Some(r)) => Ok(examples_with_neighbors(input, Some(&read_neighbor_sets(path)?), &r)?),
        (Some(_), None) => bail!("--neighbors needs --retrieval-corpus to resolve pair ids"),
        (None, Some(r)) => {
            let retriever = build_retriever(settings, r, memory.index.as_deref(), checkpoint)?;
            input
                .pairs
                .iter()
                .map(|p| {
                    Ok(Example {
                        source: p.source.clone(),
                        target: p.target.clone(),
                        neighbors: retriever.batch(&p.source, RetrievalMode::Decode, None)?,
                    })
                })
                .collect()
        }
        (None, None) => Ok(examples_with_neighbors(input, None, input)?),
    }
}

fn check_vocab(cfg: &ModelConfig, corpus: &Corpus, what: &str) -> Result<()> {
    ensure!(
        corpus.vocab.len() <= cfg.vocab_size,
        "{what} has {} tokens but the model vocabulary holds {}; ingest it with --vocab-from",
        corpus.vocab.len(),
        cfg.vocab_size
    );
    Ok(())
}

fn max_out_len(settings: &Settings, cfg: &ModelConfig) -> usize {
    if settings.max_out_len == 0 {
        cfg.max_len
    } else {
        settings.max_out_len
    }
}

fn translate_all(
    settings: &Settings,
    store: &ParamStore,
    cfg: &ModelConfig,
    examples: &[Example],
    vocab: &spnmt::Vocab,
) -> Result<Vec<String>> {
    let cap = max_out_len(settings, cfg);
    examples
        .iter()
        .map(|e| {
            let batch: Option<&RetrievedBatch> = (!e.neighbors.is_empty()).then_some(&e.neighbors);
            let y = beam_decode(store, cfg, &e.source, batch, settings.beam, cap)?;
            Ok(vocab.decode(&y).join(" "))
        })
        .collect()
}

fn report_training(outcome: &TrainOutcome, out: &Path) {
    let dev_loss = outcome
        .retained
        .iter()
        .find(|(s, _)| *s == outcome.best_step)
        .map(|&(_, l)| l)
        .unwrap_or(f64::NAN);
    println!(
        "best checkpoint: step {} dev loss {dev_loss:.6} -> {}",
        outcome.best_step,
        out.join("best.ckpt").display()
    );
}

fn run_training(settings: &Settings, precision: Precision, args: &TrainArgs, base: Option<&Path>) -> Result<()> {
    let strategy = args.strategy.unwrap_or(settings.retrieval.strategy);
    let train_corpus = load_snapshot(&args.train)?;
    let dev_corpus = load_snapshot(&args.dev)?;
    let retrieval = match &args.retrieval_corpus {
        Some(p) => load_snapshot(p)?,
        None => train_corpus.clone(),
    };
    let train_set = examples_from_dump(
        &train_corpus,
        args.neighbors.as_deref(),
        &retrieval,
        strategy,
        "--neighbors",
    )?;
    let dev = examples_from_dump(
        &dev_corpus,
        args.dev_neighbors.as_deref(),
        &retrieval,
        strategy,
        "--dev-neighbors",
    )?;
    let outcome = match base {
        Some(path) => {
            let (store, cfg) = load_checkpoint(path)?;
            check_vocab(&cfg, &train_corpus, "training corpus")?;
            check_vocab(&cfg, &dev_corpus, "dev corpus")?;
            let before = store.checksum();
            let outcome = finetune(&cfg, &store, &train_set, &dev, &settings.train, Some(&args.out))?;
            log::info!(
                "base checksum {before:016x}, fine-tuned {:016x}",
                outcome.best.checksum()
            );
            outcome
        }
        None => {
            let mut cfg = settings.model.clone();
            if cfg.vocab_size == 0 {
                cfg.vocab_size = train_corpus.vocab.len().max(dev_corpus.vocab.len());
            }
            cfg.validate()?;
            check_vocab(&cfg, &train_corpus, "training corpus")?;
            check_vocab(&cfg, &dev_corpus, "dev corpus")?;
            let init = init_params(&cfg, settings.train.seed, precision)?;
            log::info!(
                "{} parameters, {} training examples",
                init.num_values(),
                train_set.len()
            );
            train(&cfg, init, &train_set, &dev, &settings.train, Some(&args.out))?
        }
    };
    report_training(&outcome, &args.out);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        settings.train.seed = seed;
    }
    match cli.command {
        Command::Ingest {
            input,
            format,
            output,
            domain,
            split,
            vocab_from,
            skip_bad,
            dedupe: dedup,
        } => {
            let format = match format {
                Some(f) => f,
                None => match input.extension().and_then(|e| e.to_str()) {
                    Some("tsv") => CorpusFormat::Tsv,
                    Some("jsonl") => CorpusFormat::Jsonl,
                    _ => bail!("cannot infer the format of {}; pass --format", input.display()),
                },
            };
            let opts = LoadOptions {
                skip_bad,
                base_vocab: vocab_from.as_deref().map(load_snapshot).transpose()?.map(|c| c.vocab),
                split: Some(split.into()),
            };
            let report = load_corpus(&input, format, &settings.tokenizer, &domain, &opts)?;
            let corpus = if dedup { dedupe(&report.corpus) } else { report.corpus };
            ensure!(!corpus.is_empty(), "{} holds no usable pairs", input.display());
            corpus.save(&output)?;
            println!(
                "{} pairs, {} tokens in vocabulary; skipped {} empty and {} malformed rows",
                corpus.len(),
                corpus.vocab.len(),
                report.skipped_empty,
                report.skipped_bad
            );
        }
        Command::BuildIdfIndex { corpus, output } => {
            let c = load_snapshot(&corpus)?;
            let file = IdfIndexFile {
                idf: build_idf(&c)?,
                inverted: InvertedIndex::build(&c),
            };
            write_json(&output, &file)?;
            println!("{} distinct source tokens over {} pairs", file.idf.len(), c.len());
        }
        Command::BuildNgramIndex { corpus, output } => {
            let c = load_snapshot(&corpus)?;
            let idx = build_ngram_index(&c, &settings.retrieval.ngram, &build_idf(&c)?)?;
            write_json(&output, &idx)?;
            for w in idx.widths() {
                println!("width {w}: {} distinct n-grams", idx.num_keys(w));
            }
        }
        Command::BuildDenseIndex {
            corpus,
            output,
            checkpoint,
        } => {
            let c = load_snapshot(&corpus)?;
            let provider = embedding_provider(&settings, &c, checkpoint.as_deref())?;
            let idx = build_dense_index(&c, provider.as_ref(), &settings.retrieval.ngram)?;
            let mut w =
                BufWriter::new(File::create(&output).with_context(|| format!("creating {}", output.display()))?);
            idx.write_to(&mut w)?;
            w.flush()?;
            for width in idx.widths() {
                println!("width {width}: {} vectors of dim {}", idx.len(width), idx.dim());
            }
        }
        Command::Retrieve {
            corpus,
            queries,
            strategy,
            mode,
            index,
            exclude_self,
            checkpoint,
            with_matches,
            output,
        } => {
            if let Some(s) = strategy {
                settings.retrieval.strategy = s;
            }
            let c = load_snapshot(&corpus)?;
            let q = match &queries {
                Some(p) => load_snapshot(p)?,
                None => c.clone(),
            };
            let retriever = build_retriever(&settings, c, index.as_deref(), checkpoint.as_deref())?;
            let sets = q
                .pairs
                .iter()
                .map(|p| {
                    let mut s = retriever.neighbor_set(&p.source, mode, exclude_self.then_some(p.id))?;
                    s.query_id = Some(p.id);
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            write_neighbor_sets(&output, &sets, with_matches)?;
            let total: usize = sets.iter().map(|s| s.len()).sum();
            println!("{} queries, {total} neighbors", sets.len());
        }
        Command::Train(args) => run_training(&settings, cli.precision, &args, None)?,
        Command::Finetune { checkpoint, train } => run_training(&settings, cli.precision, &train, Some(&checkpoint))?,
        Command::Translate {
            checkpoint,
            input,
            mut memory,
            output,
        } => {
            if let Some(s) = memory.strategy.take() {
                settings.retrieval.strategy = s;
            }
            let (store, cfg) = load_checkpoint(&checkpoint)?;
            let input = load_snapshot(&input)?;
            check_vocab(&cfg, &input, "input corpus")?;
            let examples = decode_examples(&settings, &input, &memory, Some(&checkpoint))?;
            let lines = translate_all(&settings, &store, &cfg, &examples, &input.vocab)?;
            write_lines(output.as_deref(), &lines)?;
        }
        Command::Evaluate {
            corpus,
            references,
            hypotheses,
            checkpoint,
            mut memory,
            output,
        } => {
            if let Some(s) = memory.strategy.take() {
                settings.retrieval.strategy = s;
            }
            let corpus = corpus.as_deref().map(load_snapshot).transpose()?;
            let refs: Vec<Vec<String>> = match (&references, &corpus) {
                (Some(p), _) => read_token_lines(p)?,
                (None, Some(c)) => c.pairs.iter().map(|p| c.vocab.decode(&p.target)).collect(),
                (None, None) => bail!("evaluate needs --corpus or --references"),
            };
            let model = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let examples = match (&model, &corpus) {
                (Some((_, cfg)), Some(c)) => {
                    check_vocab(cfg, c, "evaluation corpus")?;
                    Some(decode_examples(&settings, c, &memory, checkpoint.as_deref())?)
                }
                _ => None,
            };
            let hyps: Vec<Vec<String>> = match (&hypotheses, &model, &examples, &corpus) {
                (Some(p), ..) => read_token_lines(p)?,
                (None, Some((store, cfg)), Some(ex), Some(c)) => translate_all(&settings, store, cfg, ex, &c.vocab)?
                    .iter()
                    .map(|l| l.split_whitespace().map(str::to_string).collect())
                    .collect(),
                _ => bail!("evaluate needs --hypotheses, or --checkpoint with --corpus"),
            };
            ensure!(
                hyps.len() == refs.len(),
                "{} hypotheses for {} references",
                hyps.len(),
                refs.len()
            );
            let (loss, acc) = match (&model, &examples) {
                (Some((store, cfg)), Some(ex)) => (
                    Some(evaluate_loss(store, cfg, ex)?),
                    Some(token_accuracy(store, cfg, ex)?),
                ),
                _ => (None, None),
            };
            let report = EvalReport {
                sentences: refs.len(),
                bleu: corpus_bleu(&hyps, &refs)?,
                loss,
                token_accuracy: acc,
            };
            println!("{}", serde_json::to_string(&report)?);
            if let Some(p) = output {
                write_json(&p, &report)?;
            }
        }
        Command::Adapt {
            checkpoint,
            domain_corpus,
            input,
            strategy,
            output,
        } => {
            if let Some(s) = strategy {
                settings.retrieval.strategy = s;
            }
            let (store, cfg) = load_checkpoint(&checkpoint)?;
            let domain = load_snapshot(&domain_corpus)?;
            let input = load_snapshot(&input)?;
            check_vocab(&cfg, &domain, "domain corpus")?;
            check_vocab(&cfg, &input, "input corpus")?;
            let before = store.checksum();
            let provider = match settings.retrieval.strategy {
                RetrievalStrategy::DenseNgram => Some(embedding_provider(&settings, &domain, Some(&checkpoint))?),
                _ => None,
            };
            let adapter = adapt_nonparametric(&store, &cfg, domain, settings.retrieval.clone(), provider)?;
            let cap = max_out_len(&settings, &cfg);
            let lines = input
                .pairs
                .iter()
                .map(|p| {
                    Ok(input
                        .vocab
                        .decode(&adapter.translate(&p.source, settings.beam, cap)?)
                        .join(" "))
                })
                .collect::<Result<Vec<_>>>()?;
            drop(adapter);
            ensure!(store.checksum() == before, "parameters changed during adaptation");
            write_lines(output.as_deref(), &lines)?;
            eprintln!("parameter checksum {before:016x} unchanged");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
