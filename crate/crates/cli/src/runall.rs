//! One-config pipeline: corpus -> vocab -> train -> triplets -> score ->
//! ablate -> figures, all into a single output directory with stable file
//! names so a re-run with the same config reproduces every data file
//! byte-for-byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use typolab_core::corpus::{
    build_triplets, generate_corpus, read_word_defs, select_answerable, BuildOptions,
    PromptTemplate, TrainingSet, WordDef,
};
use typolab_core::detector::{
    delta_stats, head_delta, neuron_delta, score_variant, select_top_fraction, scores_to_csv,
    RankBy, SelectionExport,
};
use typolab_core::harness::{
    ablation_report, accuracy_curve, AblationConfig, HarnessError, SelectionKind,
};
use typolab_core::model::{save_checkpoint, train_toy, AblationMask, FfnKind, Model, ModelConfig, TrainOptions};
use typolab_core::plot::{accuracy_line, attention_map, delta_heatmap, layer_histogram};
use typolab_core::tokenizer::Vocab;
use typolab_core::corpus::Variant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Prompt template override; the default asks for a quoted answer.
    pub template: Option<String>,
    pub corpus: CorpusCfg,
    pub vocab: VocabCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub triplets: TripletsCfg,
    pub score: ScoreCfg,
    pub ablate: AblateCfg,
    pub plots: PlotsCfg,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("typolab-run"),
            seed: 0,
            template: None,
            corpus: CorpusCfg::default(),
            vocab: VocabCfg::default(),
            model: ModelCfg::default(),
            train: TrainCfg::default(),
            triplets: TripletsCfg::default(),
            score: ScoreCfg::default(),
            ablate: AblateCfg::default(),
            plots: PlotsCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusCfg {
    /// Definitions to generate when no path is given.
    pub n: usize,
    /// Existing corpus file (TSV or JSONL); skips generation.
    pub path: Option<PathBuf>,
}

impl Default for CorpusCfg {
    fn default() -> Self {
        CorpusCfg { n: 1400, path: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabCfg {
    pub size: usize,
}

impl Default for VocabCfg {
    fn default() -> Self {
        VocabCfg { size: 800 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    /// "gated" or "plain".
    pub ffn: String,
    pub pos_embedding: bool,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            layers: 6,
            heads: 4,
            d_model: 128,
            d_ffn: 512,
            max_seq: 96,
            ffn: "gated".into(),
            pos_embedding: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub min_accuracy: Option<f64>,
    pub probe_every: usize,
    pub seg_dropout: f64,
    pub typo_noise: f64,
    /// L1 coefficient on FFN post-activations (0 disables).
    pub l1_neurons: f64,
    pub quiet: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            target_accuracy: 0.995,
            min_accuracy: None,
            probe_every: 1,
            seg_dropout: 0.25,
            typo_noise: 0.15,
            l1_neurons: 0.0,
            quiet: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletsCfg {
    /// Typo counts to build datasets for.
    pub t: Vec<usize>,
    pub k: usize,
}

impl Default for TripletsCfg {
    fn default() -> Self {
        TripletsCfg { t: vec![1, 16], k: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreCfg {
    pub neuron_fraction: f64,
    pub head_fraction: f64,
}

impl Default for ScoreCfg {
    fn default() -> Self {
        ScoreCfg { neuron_fraction: 0.005, head_fraction: 0.015 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateCfg {
    pub enabled: bool,
    pub identify_n: usize,
    pub random_baseline: bool,
    pub bins: usize,
}

impl Default for AblateCfg {
    fn default() -> Self {
        AblateCfg { enabled: true, identify_n: 100, random_baseline: true, bins: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotsCfg {
    pub enabled: bool,
    pub curve_t: Vec<usize>,
    /// Samples per curve point.
    pub curve_k: usize,
    pub attention_sample: usize,
    pub attention_layer: usize,
}

impl Default for PlotsCfg {
    fn default() -> Self {
        PlotsCfg {
            enabled: true,
            curve_t: vec![0, 1, 2, 4, 8, 16],
            curve_k: 100,
            attention_sample: 0,
            attention_layer: 0,
        }
    }
}

fn stage(name: &str) -> Instant {
    println!("==> {name}");
    Instant::now()
}

fn done(start: Instant) {
    println!("    done in {:.1}s", start.elapsed().as_secs_f64());
}

pub fn run(config_path: &Path, out_dir_override: Option<PathBuf>) -> Result<()> {
    let raw = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let mut cfg: PipelineConfig = toml::from_str(&raw)?;
    if let Some(dir) = out_dir_override {
        cfg.out_dir = dir;
    }
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let template = match &cfg.template {
        Some(raw) => PromptTemplate::new(raw)?,
        None => PromptTemplate::default(),
    };

    // Resolved config goes into the run directory so the whole run can be
    // replayed from its artifacts alone.
    let mut resolved = serde_json::to_string_pretty(&cfg)?;
    resolved.push('\n');
    std::fs::write(out.join("pipeline_config.json"), &resolved)?;

    let start = stage("corpus");
    let defs: Vec<WordDef> = match &cfg.corpus.path {
        Some(p) => read_word_defs(p)?,
        None => {
            let defs = generate_corpus(cfg.corpus.n, cfg.seed);
            let mut tsv = format!("# synthetic corpus: n={} seed={}\n", cfg.corpus.n, cfg.seed);
            for d in &defs {
                tsv.push_str(&format!("{}\t{}\n", d.word, d.definition));
            }
            std::fs::write(out.join("corpus.tsv"), &tsv)?;
            defs
        }
    };
    println!("    {} definitions", defs.len());
    done(start);

    let start = stage("vocab");
    let texts: Vec<String> =
        defs.iter().map(|d| template.render(&d.definition, &d.word).text).collect();
    let vocab = Vocab::train(&texts, cfg.vocab.size)?;
    vocab.save(&out.join("vocab.txt"))?;
    println!("    {} tokens", vocab.len());
    done(start);

    let start = stage("train");
    let ffn_kind = match cfg.model.ffn.as_str() {
        "gated" => FfnKind::Gated,
        "plain" => FfnKind::PlainGelu,
        other => bail!("model.ffn must be \"gated\" or \"plain\", got {other:?}"),
    };
    let config = ModelConfig {
        n_layers: cfg.model.layers,
        n_heads: cfg.model.heads,
        d_model: cfg.model.d_model,
        d_ffn: cfg.model.d_ffn,
        vocab_size: vocab.len(),
        max_seq: cfg.model.max_seq,
        ffn_kind,
        pos_embedding: cfg.model.pos_embedding,
    };
    config.validate()?;
    if !(0.0..=1.0).contains(&cfg.train.seg_dropout)
        || !(0.0..=1.0).contains(&cfg.train.typo_noise)
        || cfg.train.seg_dropout + cfg.train.typo_noise > 1.0
    {
        bail!("train.seg_dropout and train.typo_noise must be in [0, 1] and sum to at most 1");
    }
    let data = TrainingSet::new(vocab.clone(), &template, &defs)?
        .with_augmentation(cfg.train.seg_dropout, cfg.train.typo_noise);
    let opts = TrainOptions {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        seed: cfg.seed,
        target_accuracy: Some(cfg.train.target_accuracy),
        min_accuracy: cfg.train.min_accuracy,
        probe_every: cfg.train.probe_every,
        l1_neurons: cfg.train.l1_neurons,
        log: !cfg.train.quiet,
    };
    let mut model = Model::<f32>::init(config, cfg.seed)?;
    let stats = train_toy(&mut model, &data, &opts)?;
    let hash = save_checkpoint(&model, &out.join("model.ckpt"))?;
    println!(
        "    {} epochs, loss {:.4}, greedy accuracy {:.4}, checkpoint {}",
        stats.epochs_run,
        stats.final_loss,
        stats.probe_accuracy,
        &hash[..12]
    );
    done(start);

    let start = stage("select answerable");
    let outcome = select_answerable(&model, &vocab, &template, &defs, cfg.triplets.k)?;
    if outcome.insufficient() {
        bail!(HarnessError::InsufficientSamples {
            needed: cfg.triplets.k,
            available: outcome.answerable,
        });
    }
    println!("    {} answerable of {}, keeping {}", outcome.answerable, outcome.total, outcome.selected.len());
    done(start);

    for &t in &cfg.triplets.t {
        let start = stage(&format!("triplets t={t}"));
        let opts = BuildOptions { t, seed: cfg.seed, template: template.clone(), ..BuildOptions::default() };
        let dataset = build_triplets(&model, &vocab, &outcome.selected, &opts)?;
        for d in &dataset.meta.dropped {
            eprintln!("    dropped sample {} ({}): {}", d.index, d.word, d.reason);
        }
        dataset.save(&out.join(format!("triplets_t{t}.jsonl")))?;
        println!("    {} samples, {} dropped", dataset.meta.built, dataset.meta.dropped.len());
        done(start);

        let start = stage(&format!("score t={t}"));
        let clean = score_variant(&model, &dataset.instances(Variant::Clean))?;
        let typo = score_variant(&model, &dataset.instances(Variant::Typo))?;
        let split = score_variant(&model, &dataset.instances(Variant::Split))?;
        let neurons = neuron_delta(&clean.neurons, &typo.neurons, &split.neurons)?;
        let heads = head_delta(&clean.heads, &typo.heads, &split.heads)?;
        let n_stats = delta_stats(&neurons);
        let h_stats = delta_stats(&heads);
        println!(
            "    neuron delta mean {:+.6} sd {:.6}; head delta mean {:+.6} sd {:.6}",
            n_stats.mean, n_stats.sd, h_stats.mean, h_stats.sd
        );
        std::fs::write(out.join(format!("scores_t{t}_neurons.csv")), scores_to_csv(&neurons, &[]))?;
        std::fs::write(out.join(format!("scores_t{t}_heads.csv")), scores_to_csv(&[], &heads))?;
        let neuron_units = select_top_fraction(&neurons, cfg.score.neuron_fraction, RankBy::Delta);
        let head_units = select_top_fraction(&heads, cfg.score.head_fraction, RankBy::AbsDelta);
        for (name, kind, fraction, units) in [
            ("neurons", "neuron", cfg.score.neuron_fraction, &neuron_units),
            ("heads", "head", cfg.score.head_fraction, &head_units),
        ] {
            let export = SelectionExport {
                kind: kind.into(),
                method: "top_fraction".into(),
                fraction: Some(fraction),
                threshold: None,
                t,
                seed: cfg.seed,
                checkpoint: hash.clone(),
                units: units.clone(),
            };
            let mut json = serde_json::to_string_pretty(&export)?;
            json.push('\n');
            std::fs::write(out.join(format!("selection_t{t}_{name}.json")), json)?;
        }
        done(start);

        if cfg.ablate.enabled {
            let start = stage(&format!("ablate t={t}"));
            let mut kinds = vec![SelectionKind::TypoNeurons, SelectionKind::TypoHeads];
            if cfg.ablate.random_baseline {
                kinds.insert(1, SelectionKind::RandomNeurons);
                kinds.push(SelectionKind::RandomHeads);
            }
            let acfg = AblationConfig {
                identify_n: cfg.ablate.identify_n,
                neuron_fraction: cfg.score.neuron_fraction,
                head_fraction: cfg.score.head_fraction,
                bins: cfg.ablate.bins,
                seed: cfg.seed,
            };
            let report = ablation_report(&model, &vocab, &dataset, &kinds, &acfg, &hash)?;
            std::fs::write(out.join(format!("report_t{t}.json")), report.to_json()?)?;
            let table = report.text_table();
            std::fs::write(out.join(format!("report_t{t}.txt")), &table)?;
            print!("{table}");
            done(start);

            if cfg.plots.enabled {
                let series: Vec<(&str, _)> = report
                    .distributions
                    .iter()
                    .map(|nd| (nd.name.as_str(), &nd.distribution))
                    .collect();
                if !series.is_empty() {
                    layer_histogram(&series, "selection share by relative depth")
                        .save(&out, &format!("layer_hist_t{t}"))?;
                }
            }
        }

        if cfg.plots.enabled {
            delta_heatmap(&neurons, "neuron delta by layer and index")
                .save(&out, &format!("delta_heatmap_t{t}_neurons"))?;
            delta_heatmap(&heads, "head delta by layer and index")
                .save(&out, &format!("delta_heatmap_t{t}_heads"))?;
            if let Some(s) = dataset.samples.get(cfg.plots.attention_sample) {
                if cfg.plots.attention_layer < model.config.n_layers {
                    let mask = AblationMask::none();
                    let mut panels = Vec::new();
                    for (name, inst) in
                        [("clean", &s.clean), ("typo", &s.typo), ("split", &s.split)]
                    {
                        let (_, trace) = model.forward_traced(&inst.tokens, &mask)?;
                        panels.push((
                            name,
                            trace.attention[cfg.plots.attention_layer].mapv(|v| v as f64),
                        ));
                    }
                    let variants: Vec<(&str, &ndarray::Array3<f64>)> =
                        panels.iter().map(|(n, a)| (*n, a)).collect();
                    let title = format!(
                        "attention, layer {}, sample {} ({})",
                        cfg.plots.attention_layer, cfg.plots.attention_sample, s.word
                    );
                    attention_map(&variants, &title).save(&out, &format!("attention_map_t{t}"))?;
                }
            }
        }
    }

    if cfg.plots.enabled && !cfg.plots.curve_t.is_empty() {
        let start = stage("accuracy curve");
        if cfg.plots.curve_t.first() != Some(&0)
            || !cfg.plots.curve_t.windows(2).all(|w| w[0] < w[1])
        {
            bail!("plots.curve_t must be strictly increasing and start at 0");
        }
        let curve_defs: Vec<WordDef> =
            outcome.selected.iter().take(cfg.plots.curve_k).cloned().collect();
        let base = BuildOptions { seed: cfg.seed, template: template.clone(), ..BuildOptions::default() };
        let curve = accuracy_curve(&model, &vocab, &curve_defs, &base, &cfg.plots.curve_t)?;
        for p in &curve {
            println!("    t={:<3} accuracy {:.4} ({} samples)", p.t, p.accuracy, p.samples);
        }
        accuracy_line(&curve, "accuracy by typos per prompt").save(&out, "accuracy_curve")?;
        done(start);
    }

    println!("artifacts in {}", out.display());
    Ok(())
}
