//! `typolab`: drives the pipeline from corpus generation through figures.
//!
//! Exit codes: 0 success, 2 validation error (bad flags, template, or
//! config), 3 data error (missing/corrupt files, insufficient samples),
//! 4 model error (runtime failures like divergence or overlong sequences).

mod runall;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use typolab_core::corpus::{
    build_triplets, generate_corpus, read_word_defs, select_answerable, BuildOptions, CorpusError,
    PromptTemplate, TrainingSet, TripletDataset, Variant, WordDef,
};
use typolab_core::detector::{
    delta_stats, head_delta, layer_distribution, neuron_delta, score_variant, select_by_threshold,
    select_top_fraction, scores_to_csv, DetectorError, HeadScore, NeuronScore, RankBy,
    SelectionExport,
};
use typolab_core::harness::{
    ablation_report, accuracy_curve, evaluate_accuracy, AblationConfig, AccuracyRow,
    ExperimentReport, HarnessError, NamedDistribution, ReportSeeds, SelectionKind,
};
use typolab_core::model::{
    load_checkpoint, save_checkpoint, train_toy, AblationMask, FfnKind, Model, ModelConfig,
    ModelError, TrainOptions,
};
use typolab_core::plot::{accuracy_line, attention_map, delta_heatmap, layer_histogram};
use typolab_core::tokenizer::{TokenizerError, Vocab};

#[derive(Parser)]
#[command(name = "typolab", version, about = "Locate and ablate typo-handling units in a toy transformer")]
struct Cli {
    /// Worker cap for evaluation stages. Stages currently run on a single
    /// worker; larger values are accepted and capped.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum UnitKind {
    Neurons,
    Heads,
}

#[derive(Clone, Copy, ValueEnum)]
enum FfnArg {
    Gated,
    Plain,
}

impl From<FfnArg> for FfnKind {
    fn from(f: FfnArg) -> Self {
        match f {
            FfnArg::Gated => FfnKind::Gated,
            FfnArg::Plain => FfnKind::PlainGelu,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic definition corpus (TSV: word<TAB>definition).
    GenCorpus {
        /// Number of definitions to generate.
        #[arg(long, default_value_t = 1400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a byte-level BPE vocabulary on the rendered prompts.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Total vocabulary size including <bos> and the 256 byte tokens.
        #[arg(long, default_value_t = 800)]
        size: usize,
        /// Prompt template; must end with '{word}' in quotes.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy transformer to memorize the corpus, save a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 128)]
        d_model: usize,
        #[arg(long, default_value_t = 512)]
        d_ffn: usize,
        #[arg(long, default_value_t = 96)]
        max_seq: usize,
        #[arg(long, value_enum, default_value_t = FfnArg::Gated)]
        ffn: FfnArg,
        /// Disable learned absolute positional embeddings.
        #[arg(long)]
        no_pos_embedding: bool,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop early once probe accuracy reaches this.
        #[arg(long, default_value_t = 0.995)]
        target_accuracy: f64,
        /// Fail (exit 4) if final probe accuracy stays below this.
        #[arg(long)]
        min_accuracy: Option<f64>,
        #[arg(long, default_value_t = 1)]
        probe_every: usize,
        /// Probability of re-segmenting one definition word per sample draw.
        #[arg(long, default_value_t = 0.25)]
        seg_dropout: f64,
        /// Probability of injecting one random typo per sample draw.
        #[arg(long, default_value_t = 0.15)]
        typo_noise: f64,
        /// L1 coefficient on FFN post-activations (0 disables).
        #[arg(long, default_value_t = 0.0)]
        l1_neurons: f64,
        #[arg(long)]
        quiet: bool,
    },
    /// Build clean/typo/split triplets from definitions the model answers.
    BuildTriplets {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        template: Option<String>,
        /// Typos per prompt.
        #[arg(long, default_value_t = 1)]
        t: usize,
        /// Samples to keep (the k answerable prompts with highest answer
        /// likelihood).
        #[arg(long, default_value_t = 1000)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score units over a triplet dataset; emit CSV and a selection JSON.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long, value_enum)]
        kind: UnitKind,
        /// Select the top ceil(fraction * total) units.
        #[arg(long, conflicts_with = "threshold")]
        fraction: Option<f64>,
        /// Select every unit with delta >= threshold.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_selection: PathBuf,
    },
    /// Ablate a selection (identified, random, or loaded) and measure
    /// accuracy.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        /// Identify and ablate the top units of this kind.
        #[arg(long, value_enum, conflicts_with = "selection")]
        kind: Option<UnitKind>,
        /// Also run the equal-count random baseline row.
        #[arg(long)]
        random: bool,
        /// Ablate exactly the units in this selection JSON instead of
        /// identifying them.
        #[arg(long)]
        selection: Option<PathBuf>,
        /// Samples used for identification; the rest evaluate.
        #[arg(long, default_value_t = 100)]
        identify_n: usize,
        /// Top fraction to select (defaults: 0.005 neurons, 0.015 heads).
        #[arg(long)]
        fraction: Option<f64>,
        /// Relative-depth histogram bins in the report.
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an SVG figure plus a CSV holding exactly the plotted numbers.
    Plot {
        #[command(subcommand)]
        kind: PlotCmd,
    },
    /// Run the whole pipeline from one TOML config.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's out_dir.
        #[arg(long, env = "TYPOLAB_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PlotCmd {
    /// Selection share per relative-depth bin, from a report JSON.
    LayerHist {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, env = "TYPOLAB_OUT_DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value = "layer_hist")]
        stem: String,
    },
    /// Layer-by-index delta heatmap from a scores CSV, diverging around 0.
    DeltaHeatmap {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_enum)]
        kind: UnitKind,
        #[arg(long, env = "TYPOLAB_OUT_DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value = "delta_heatmap")]
        stem: String,
    },
    /// Per-head attention grids for one sample's clean/typo/split triple.
    AttentionMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, env = "TYPOLAB_OUT_DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value = "attention_map")]
        stem: String,
    },
    /// Accuracy against typo count, built fresh from a checkpoint + corpus.
    AccuracyCurve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        template: Option<String>,
        /// Answerable samples to build each point from.
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 4, 8, 16])]
        t_values: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "TYPOLAB_OUT_DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value = "accuracy_curve")]
        stem: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

/// Maps an error chain onto the documented exit codes. Wrapper variants
/// defer to their source so the innermost cause decides.
fn classify(cause: &(dyn std::error::Error + 'static)) -> Option<i32> {
    // Wrapper variants are declared transparent in the library, so they
    // impersonate the inner error in the chain; recurse into them by hand.
    if let Some(e) = cause.downcast_ref::<ModelError>() {
        return Some(match e {
            ModelError::Config(_) => 2,
            ModelError::Io(_) | ModelError::Checkpoint(_) => 3,
            _ => 4,
        });
    }
    if let Some(e) = cause.downcast_ref::<TokenizerError>() {
        return Some(match e {
            TokenizerError::VocabTooSmall { .. } => 2,
            _ => 3,
        });
    }
    if let Some(e) = cause.downcast_ref::<CorpusError>() {
        return match e {
            CorpusError::Template(_) | CorpusError::Options(_) => Some(2),
            CorpusError::Model(inner) => classify(inner),
            CorpusError::Tokenizer(inner) => classify(inner),
            CorpusError::Io(_) => Some(3),
            _ => Some(3),
        };
    }
    if let Some(e) = cause.downcast_ref::<DetectorError>() {
        return match e {
            DetectorError::Model(inner) => classify(inner),
            DetectorError::Corpus(inner) => classify(inner),
            _ => Some(3),
        };
    }
    if let Some(e) = cause.downcast_ref::<HarnessError>() {
        return match e {
            HarnessError::Detector(inner) => classify(inner),
            HarnessError::Corpus(inner) => classify(inner),
            HarnessError::Model(inner) => classify(inner),
            _ => Some(3),
        };
    }
    if cause.downcast_ref::<std::io::Error>().is_some()
        || cause.downcast_ref::<serde_json::Error>().is_some()
    {
        return Some(3);
    }
    if cause.downcast_ref::<toml::de::Error>().is_some() {
        return Some(2);
    }
    None
}

fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain().find_map(classify).unwrap_or(2)
}

fn parse_template(raw: &Option<String>) -> Result<PromptTemplate> {
    Ok(match raw {
        Some(s) => PromptTemplate::new(s)?,
        None => PromptTemplate::default(),
    })
}

fn read_corpus(path: &Path) -> Result<Vec<WordDef>> {
    read_word_defs(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).with_context(|| format!("loading vocab {}", path.display()))
}

fn load_model(path: &Path) -> Result<(Model<f32>, String)> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_triplets(path: &Path) -> Result<TripletDataset> {
    TripletDataset::load(path).with_context(|| format!("loading triplets {}", path.display()))
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn corpus_to_tsv(defs: &[WordDef], n: usize, seed: u64) -> String {
    let mut out = format!("# synthetic corpus: n={n} seed={seed}\n");
    for d in defs {
        out.push_str(&format!("{}\t{}\n", d.word, d.definition));
    }
    out
}

fn selection_json(export: &SelectionExport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(export)?;
    s.push('\n');
    Ok(s)
}

/// Parses rows of one kind back out of a scores CSV.
fn read_scores_csv(path: &Path, kind: UnitKind) -> Result<(Vec<NeuronScore>, Vec<HeadScore>)> {
    let raw =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = raw.lines();
    let header = lines.next().unwrap_or_default();
    if header != "kind,layer,index,s_clean,s_typo,s_split,delta" {
        bail!(CorpusError::DatasetFormat(format!("unexpected scores header {header:?}")));
    }
    let mut neurons = Vec::new();
    let mut heads = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            bail!(CorpusError::DatasetFormat(format!("scores line {}: {line:?}", i + 2)));
        }
        let parse = |j: usize| -> Result<f64> {
            cols[j]
                .parse::<f64>()
                .map_err(|e| CorpusError::DatasetFormat(format!("line {}: {e}", i + 2)).into())
        };
        let layer: usize = cols[1]
            .parse()
            .map_err(|e| CorpusError::DatasetFormat(format!("line {}: {e}", i + 2)))?;
        let index: usize = cols[2]
            .parse()
            .map_err(|e| CorpusError::DatasetFormat(format!("line {}: {e}", i + 2)))?;
        let (s_clean, s_typo, s_split, delta) = (parse(3)?, parse(4)?, parse(5)?, parse(6)?);
        match cols[0] {
            "neuron" => {
                neurons.push(NeuronScore { layer, neuron: index, s_clean, s_typo, s_split, delta })
            }
            "head" => heads.push(HeadScore { layer, head: index, s_clean, s_typo, s_split, delta }),
            other => bail!(CorpusError::DatasetFormat(format!("unknown unit kind {other:?}"))),
        }
    }
    match kind {
        UnitKind::Neurons if neurons.is_empty() => {
            bail!(CorpusError::DatasetFormat("no neuron rows in scores file".into()))
        }
        UnitKind::Heads if heads.is_empty() => {
            bail!(CorpusError::DatasetFormat("no head rows in scores file".into()))
        }
        _ => Ok((neurons, heads)),
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    match cli.command {
        Command::GenCorpus { n, seed, out } => cmd_gen_corpus(n, seed, &out),
        Command::BuildVocab { corpus, size, template, out } => {
            cmd_build_vocab(&corpus, size, &template, &out)
        }
        Command::Train {
            corpus,
            vocab,
            template,
            out,
            layers,
            heads,
            d_model,
            d_ffn,
            max_seq,
            ffn,
            no_pos_embedding,
            epochs,
            batch_size,
            lr,
            seed,
            target_accuracy,
            min_accuracy,
            probe_every,
            seg_dropout,
            typo_noise,
            l1_neurons,
            quiet,
        } => {
            let config = ModelConfig {
                n_layers: layers,
                n_heads: heads,
                d_model,
                d_ffn,
                vocab_size: 0, // set from the vocab file below
                max_seq,
                ffn_kind: ffn.into(),
                pos_embedding: !no_pos_embedding,
            };
            let opts = TrainOptions {
                epochs,
                batch_size,
                lr,
                seed,
                target_accuracy: Some(target_accuracy),
                min_accuracy,
                probe_every,
                l1_neurons,
                log: !quiet,
            };
            cmd_train(&corpus, &vocab, &template, &out, config, opts, seg_dropout, typo_noise)
        }
        Command::BuildTriplets { checkpoint, vocab, corpus, template, t, k, seed, out } => {
            cmd_build_triplets(&checkpoint, &vocab, &corpus, &template, t, k, seed, &out)
        }
        Command::Score { checkpoint, triplets, kind, fraction, threshold, out_csv, out_selection } => {
            cmd_score(&checkpoint, &triplets, kind, fraction, threshold, &out_csv, &out_selection)
        }
        Command::Ablate {
            checkpoint,
            vocab,
            triplets,
            kind,
            random,
            selection,
            identify_n,
            fraction,
            bins,
            seed,
            out,
        } => cmd_ablate(
            &checkpoint,
            &vocab,
            &triplets,
            kind,
            random,
            &selection,
            identify_n,
            fraction,
            bins,
            seed,
            &out,
        ),
        Command::Plot { kind } => cmd_plot(kind),
        Command::RunAll { config, out_dir } => runall::run(&config, out_dir),
    }
}

fn cmd_gen_corpus(n: usize, seed: u64, out: &Path) -> Result<()> {
    let defs = generate_corpus(n, seed);
    if defs.len() < n {
        eprintln!("note: corpus space is exhausted at {} definitions", defs.len());
    }
    write_text(out, &corpus_to_tsv(&defs, n, seed))?;
    println!("wrote {} definitions to {}", defs.len(), out.display());
    Ok(())
}

fn cmd_build_vocab(corpus: &Path, size: usize, template: &Option<String>, out: &Path) -> Result<()> {
    let defs = read_corpus(corpus)?;
    let template = parse_template(template)?;
    let texts: Vec<String> =
        defs.iter().map(|d| template.render(&d.definition, &d.word).text).collect();
    let vocab = Vocab::train(&texts, size)?;
    vocab.save(out)?;
    println!("trained vocab of {} tokens on {} prompts -> {}", vocab.len(), texts.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    corpus: &Path,
    vocab_path: &Path,
    template: &Option<String>,
    out: &Path,
    mut config: ModelConfig,
    opts: TrainOptions,
    seg_dropout: f64,
    typo_noise: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&seg_dropout)
        || !(0.0..=1.0).contains(&typo_noise)
        || seg_dropout + typo_noise > 1.0
    {
        bail!("augmentation rates must be in [0, 1] and sum to at most 1");
    }
    let defs = read_corpus(corpus)?;
    let template = parse_template(template)?;
    let vocab = load_vocab(vocab_path)?;
    config.vocab_size = vocab.len();
    config.validate()?;
    let data = TrainingSet::new(vocab, &template, &defs)?.with_augmentation(seg_dropout, typo_noise);
    let mut model = Model::<f32>::init(config, opts.seed)?;
    let stats = train_toy(&mut model, &data, &opts)?;
    let hash = save_checkpoint(&model, out)?;
    println!(
        "trained {} epochs ({} steps): loss {:.4}, greedy accuracy {:.4}",
        stats.epochs_run, stats.steps, stats.final_loss, stats.probe_accuracy
    );
    println!("checkpoint {} -> {}", &hash[..12], out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_build_triplets(
    checkpoint: &Path,
    vocab_path: &Path,
    corpus: &Path,
    template: &Option<String>,
    t: usize,
    k: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let vocab = load_vocab(vocab_path)?;
    if vocab.len() != model.config.vocab_size {
        bail!(
            "vocab file has {} tokens but the checkpoint was trained with {}",
            vocab.len(),
            model.config.vocab_size
        );
    }
    let defs = read_corpus(corpus)?;
    let template = parse_template(template)?;
    let outcome = select_answerable(&model, &vocab, &template, &defs, k)?;
    if outcome.insufficient() {
        bail!(HarnessError::InsufficientSamples { needed: k, available: outcome.answerable });
    }
    let opts = BuildOptions { t, seed, template, ..BuildOptions::default() };
    let dataset = build_triplets(&model, &vocab, &outcome.selected, &opts)?;
    for d in &dataset.meta.dropped {
        eprintln!("dropped sample {} ({}): {}", d.index, d.word, d.reason);
    }
    if dataset.samples.is_empty() {
        bail!(CorpusError::Empty);
    }
    dataset.save(out)?;
    println!(
        "built {} triplets at t={} ({} answerable of {} definitions, {} dropped) -> {}",
        dataset.meta.built,
        t,
        outcome.answerable,
        outcome.total,
        dataset.meta.dropped.len(),
        out.display()
    );
    Ok(())
}

fn cmd_score(
    checkpoint: &Path,
    triplets: &Path,
    kind: UnitKind,
    fraction: Option<f64>,
    threshold: Option<f64>,
    out_csv: &Path,
    out_selection: &Path,
) -> Result<()> {
    if fraction.is_none() && threshold.is_none() {
        bail!("pass exactly one of --fraction or --threshold");
    }
    if let Some(f) = fraction {
        if !(f > 0.0 && f <= 1.0) {
            bail!("--fraction must be in (0, 1], got {f}");
        }
    }
    let (model, hash) = load_model(checkpoint)?;
    let dataset = load_triplets(triplets)?;
    let clean = score_variant(&model, &dataset.instances(Variant::Clean))?;
    let typo = score_variant(&model, &dataset.instances(Variant::Typo))?;
    let split = score_variant(&model, &dataset.instances(Variant::Split))?;

    let method = if fraction.is_some() { "top_fraction" } else { "threshold" };
    let (csv, units) = match kind {
        UnitKind::Neurons => {
            let deltas = neuron_delta(&clean.neurons, &typo.neurons, &split.neurons)?;
            let stats = delta_stats(&deltas);
            println!(
                "neuron delta over {} units: mean {:+.6}, sd {:.6}",
                deltas.len(),
                stats.mean,
                stats.sd
            );
            let units = match fraction {
                Some(f) => select_top_fraction(&deltas, f, RankBy::Delta),
                None => select_by_threshold(&deltas, threshold.unwrap()),
            };
            (scores_to_csv(&deltas, &[]), units)
        }
        UnitKind::Heads => {
            let deltas = head_delta(&clean.heads, &typo.heads, &split.heads)?;
            let averaged = head_delta(&clean.heads_avg, &typo.heads_avg, &split.heads_avg)?;
            let stats = delta_stats(&deltas);
            let avg_stats = delta_stats(&averaged);
            println!(
                "head delta over {} units: mean {:+.6}, sd {:.6} (length-averaged: mean {:+.6}, sd {:.6})",
                deltas.len(),
                stats.mean,
                stats.sd,
                avg_stats.mean,
                avg_stats.sd
            );
            let units = match fraction {
                Some(f) => select_top_fraction(&deltas, f, RankBy::AbsDelta),
                None => select_by_threshold(&deltas, threshold.unwrap()),
            };
            (scores_to_csv(&[], &deltas), units)
        }
    };

    write_text(out_csv, &csv)?;
    let export = SelectionExport {
        kind: match kind {
            UnitKind::Neurons => "neuron".into(),
            UnitKind::Heads => "head".into(),
        },
        method: method.into(),
        fraction,
        threshold,
        t: dataset.meta.t,
        seed: dataset.meta.seed,
        checkpoint: hash,
        units,
    };
    write_text(out_selection, &selection_json(&export)?)?;
    println!(
        "selected {} units ({}) -> {}; scores -> {}",
        export.units.len(),
        method,
        out_selection.display(),
        out_csv.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    checkpoint: &Path,
    vocab_path: &Path,
    triplets: &Path,
    kind: Option<UnitKind>,
    random: bool,
    selection: &Option<PathBuf>,
    identify_n: usize,
    fraction: Option<f64>,
    bins: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (model, hash) = load_model(checkpoint)?;
    let vocab = load_vocab(vocab_path)?;
    let dataset = load_triplets(triplets)?;

    let report = if let Some(sel_path) = selection {
        let raw = std::fs::read_to_string(sel_path)
            .with_context(|| format!("reading selection {}", sel_path.display()))?;
        let export: SelectionExport = serde_json::from_str(&raw)?;
        let mask = match export.kind.as_str() {
            "neuron" => AblationMask { neurons: export.units.clone(), heads: vec![] },
            "head" => AblationMask { neurons: vec![], heads: export.units.clone() },
            other => bail!(CorpusError::DatasetFormat(format!("unknown selection kind {other:?}"))),
        };
        mask.validate(&model.config)?;
        let clean_insts = dataset.instances(Variant::Clean);
        let typo_insts = dataset.instances(Variant::Typo);
        let none = AblationMask::none();
        let rows = vec![
            AccuracyRow {
                condition: "unablated".into(),
                units: 0,
                clean_accuracy: evaluate_accuracy(&model, &vocab, &clean_insts, &none)?,
                typo_accuracy: evaluate_accuracy(&model, &vocab, &typo_insts, &none)?,
            },
            AccuracyRow {
                condition: format!("selection file ({} units)", export.units.len()),
                units: export.units.len(),
                clean_accuracy: evaluate_accuracy(&model, &vocab, &clean_insts, &mask)?,
                typo_accuracy: evaluate_accuracy(&model, &vocab, &typo_insts, &mask)?,
            },
        ];
        let distributions = vec![NamedDistribution {
            name: rows[1].condition.clone(),
            distribution: layer_distribution(&export.units, model.config.n_layers, bins),
        }];
        ExperimentReport {
            config: model.config.clone(),
            checkpoint: hash,
            seeds: ReportSeeds { build: dataset.meta.seed, experiment: seed, t: dataset.meta.t },
            rows,
            neuron_delta_stats: None,
            head_delta_stats: None,
            head_delta_stats_averaged: None,
            distributions,
            notes: vec![
                "selection loaded from file; evaluated on the full dataset (no identify split)"
                    .into(),
            ],
            wall_clock_secs: 0.0,
        }
    } else {
        let kind = match kind {
            Some(k) => k,
            None => bail!("pass --kind neurons|heads or --selection <file>"),
        };
        let mut kinds = vec![match kind {
            UnitKind::Neurons => SelectionKind::TypoNeurons,
            UnitKind::Heads => SelectionKind::TypoHeads,
        }];
        if random {
            kinds.push(match kind {
                UnitKind::Neurons => SelectionKind::RandomNeurons,
                UnitKind::Heads => SelectionKind::RandomHeads,
            });
        }
        let mut cfg = AblationConfig { identify_n, bins, seed, ..AblationConfig::default() };
        if let Some(f) = fraction {
            if !(f > 0.0 && f <= 1.0) {
                bail!("--fraction must be in (0, 1], got {f}");
            }
            cfg.neuron_fraction = f;
            cfg.head_fraction = f;
        }
        ablation_report(&model, &vocab, &dataset, &kinds, &cfg, &hash)?
    };

    report.validate()?;
    write_text(out, &report.to_json()?)?;
    print!("{}", report.text_table());
    println!("report -> {}", out.display());
    Ok(())
}

fn cmd_plot(kind: PlotCmd) -> Result<()> {
    match kind {
        PlotCmd::LayerHist { report, out_dir, stem } => {
            let raw = std::fs::read_to_string(&report)
                .with_context(|| format!("reading report {}", report.display()))?;
            let report = ExperimentReport::from_json(&raw)?;
            if report.distributions.is_empty() {
                bail!(CorpusError::DatasetFormat("report holds no layer distributions".into()));
            }
            let series: Vec<(&str, _)> = report
                .distributions
                .iter()
                .map(|nd| (nd.name.as_str(), &nd.distribution))
                .collect();
            let chart = layer_histogram(&series, "selection share by relative depth");
            save_chart(&chart, &out_dir, &stem)
        }
        PlotCmd::DeltaHeatmap { scores, kind, out_dir, stem } => {
            let (neurons, heads) = read_scores_csv(&scores, kind)?;
            let chart = match kind {
                UnitKind::Neurons => delta_heatmap(&neurons, "neuron delta by layer and index"),
                UnitKind::Heads => delta_heatmap(&heads, "head delta by layer and index"),
            };
            save_chart(&chart, &out_dir, &stem)
        }
        PlotCmd::AttentionMap { checkpoint, triplets, sample, layer, out_dir, stem } => {
            let (model, _) = load_model(&checkpoint)?;
            let dataset = load_triplets(&triplets)?;
            let Some(s) = dataset.samples.get(sample) else {
                bail!("sample index {sample} out of range ({} samples)", dataset.samples.len());
            };
            if layer >= model.config.n_layers {
                bail!("layer {layer} out of range ({} layers)", model.config.n_layers);
            }
            let mask = AblationMask::none();
            let mut panels = Vec::new();
            for (name, inst) in
                [("clean", &s.clean), ("typo", &s.typo), ("split", &s.split)]
            {
                let (_, trace) = model.forward_traced(&inst.tokens, &mask)?;
                panels.push((name, trace.attention[layer].mapv(|v| v as f64)));
            }
            let variants: Vec<(&str, &ndarray::Array3<f64>)> =
                panels.iter().map(|(n, a)| (*n, a)).collect();
            let title = format!("attention, layer {layer}, sample {sample} ({})", s.word);
            let chart = attention_map(&variants, &title);
            save_chart(&chart, &out_dir, &stem)
        }
        PlotCmd::AccuracyCurve {
            checkpoint,
            vocab,
            corpus,
            template,
            k,
            t_values,
            seed,
            out_dir,
            stem,
        } => {
            if t_values.first() != Some(&0) || !t_values.windows(2).all(|w| w[0] < w[1]) {
                bail!("--t-values must be strictly increasing and start at 0");
            }
            let (model, _) = load_model(&checkpoint)?;
            let vocab = load_vocab(&vocab)?;
            let defs = read_corpus(&corpus)?;
            let template = parse_template(&template)?;
            let outcome = select_answerable(&model, &vocab, &template, &defs, k)?;
            if outcome.insufficient() {
                bail!(HarnessError::InsufficientSamples { needed: k, available: outcome.answerable });
            }
            let base = BuildOptions { seed, template, ..BuildOptions::default() };
            let curve =
                accuracy_curve(&model, &vocab, &outcome.selected, &base, &t_values)?;
            for p in &curve {
                println!("t={:<3} accuracy {:.4} ({} samples)", p.t, p.accuracy, p.samples);
            }
            let chart = accuracy_line(&curve, "accuracy by typos per prompt");
            save_chart(&chart, &out_dir, &stem)
        }
    }
}

fn save_chart(chart: &typolab_core::plot::Chart, out_dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    chart.save(out_dir, stem)?;
    println!("wrote {0}/{1}.svg and {0}/{1}.csv", out_dir.display(), stem);
    Ok(())
}
