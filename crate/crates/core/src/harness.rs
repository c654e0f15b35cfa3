//! End-to-end experiments: accuracy against typo count, unit ablation with
//! random baselines, and scoring split by whether typos broke the sample.
//!
//! Every experiment draws its randomness from streams derived from one
//! experiment seed, evaluates in fixed sample order, and records enough
//! metadata (seeds, checkpoint hash, config) for bit-exact replay. Wall
//! clock is kept out of the serialized report for the same reason.

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_triplets, evaluate_instance, BuildOptions, CorpusError, PromptInstance, TripletDataset,
    Variant, WordDef,
};
use crate::detector::{
    delta_stats, head_delta, layer_distribution, neuron_delta, score_variant, select_top_fraction,
    DeltaStats, DetectorError, HeadScore, LayerDistribution, NeuronScore, RankBy,
};
use crate::model::{AblationMask, Model, ModelConfig, ModelError, Scalar};
use crate::tokenizer::Vocab;
use crate::derive_seed;

// Stream tags for the per-experiment seed schedule.
const STREAM_SPLIT: u64 = 1;
const STREAM_RANDOM_UNITS: u64 = 2;
const STREAM_GROUP_UNDAMAGED: u64 = 3;
const STREAM_GROUP_DAMAGED: u64 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("need more samples: {needed} required, {available} available")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fraction of instances the model answers correctly under the given mask.
pub fn evaluate_accuracy<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    instances: &[&PromptInstance],
    mask: &AblationMask,
) -> Result<f64, HarnessError> {
    if instances.is_empty() {
        return Err(HarnessError::InsufficientSamples { needed: 1, available: 0 });
    }
    let mut correct = 0usize;
    for inst in instances {
        if evaluate_instance(model, vocab, inst, mask)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: usize,
    /// Greedy accuracy on the typo variant (equal to clean at t = 0).
    pub accuracy: f64,
    /// Samples that survived construction at this t.
    pub samples: usize,
}

/// Accuracy as a function of typo count. Each point rebuilds the triplets at
/// that t from the same definitions and build seed, so per-sample seeds (and
/// thus which words get hit) are shared across t values.
pub fn accuracy_curve<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    defs: &[WordDef],
    base: &BuildOptions,
    t_values: &[usize],
) -> Result<Vec<CurvePoint>, HarnessError> {
    assert!(t_values.windows(2).all(|w| w[0] < w[1]), "t values must be strictly increasing");
    assert_eq!(t_values.first(), Some(&0), "curve must include t = 0");
    let mask = AblationMask::none();
    let mut curve = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let opts = BuildOptions { t, ..base.clone() };
        let ds = build_triplets(model, vocab, defs, &opts)?;
        let insts = ds.instances(Variant::Typo);
        let accuracy = evaluate_accuracy(model, vocab, &insts, &mask)?;
        curve.push(CurvePoint { t, accuracy, samples: ds.samples.len() });
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    TypoNeurons,
    RandomNeurons,
    TypoHeads,
    RandomHeads,
}

impl SelectionKind {
    pub fn is_random(self) -> bool {
        matches!(self, SelectionKind::RandomNeurons | SelectionKind::RandomHeads)
    }

    pub fn is_neuron(self) -> bool {
        matches!(self, SelectionKind::TypoNeurons | SelectionKind::RandomNeurons)
    }
}

impl fmt::Display for SelectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionKind::TypoNeurons => "typo neurons",
            SelectionKind::RandomNeurons => "random neurons",
            SelectionKind::TypoHeads => "typo heads",
            SelectionKind::RandomHeads => "random heads",
        })
    }
}

/// One ablation run: which units were knocked out and what accuracy remained
/// on the held-out evaluation samples. Delta vectors are present when the
/// selection required scoring (the typo kinds), so reports can summarize
/// them without a second pass.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub condition: String,
    pub units: Vec<(usize, usize)>,
    pub clean_accuracy: f64,
    pub typo_accuracy: f64,
    /// Sample indices used to identify the selection, ascending.
    pub identify: Vec<usize>,
    /// Sample indices used for evaluation, ascending; disjoint from identify.
    pub eval: Vec<usize>,
    pub neuron_deltas: Option<Vec<NeuronScore>>,
    pub head_deltas: Option<Vec<HeadScore>>,
    /// Head deltas under the length-averaged concentration variant.
    pub head_deltas_averaged: Option<Vec<HeadScore>>,
}

/// Seed-reproducible disjoint split: `identify_n` samples for identification,
/// the rest for evaluation. Both halves come back ascending so later
/// reductions run in fixed order.
pub fn split_identify_eval(
    n: usize,
    identify_n: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), HarnessError> {
    if identify_n == 0 || identify_n >= n {
        return Err(HarnessError::InsufficientSamples { needed: identify_n + 1, available: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT)));
    let mut identify = order[..identify_n].to_vec();
    let mut eval = order[identify_n..].to_vec();
    identify.sort_unstable();
    eval.sort_unstable();
    Ok((identify, eval))
}

fn variant_instances<'a>(
    dataset: &'a TripletDataset,
    indices: &[usize],
    variant: Variant,
) -> Vec<&'a PromptInstance> {
    indices
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            match variant {
                Variant::Clean => &s.clean,
                Variant::Typo => &s.typo,
                Variant::Split => &s.split,
            }
        })
        .collect()
}

/// K distinct units drawn uniformly over the whole grid (identified units are
/// not excluded), ascending.
fn random_units(total: usize, width: usize, k: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_RANDOM_UNITS));
    let mut flat = rand::seq::index::sample(&mut rng, total, k).into_vec();
    flat.sort_unstable();
    flat.into_iter().map(|f| (f / width, f % width)).collect()
}

/// Runs one ablation condition: split the dataset, identify the selection on
/// the identify half (scored for the typo kinds, drawn uniformly at the same
/// cardinality for the random kinds), ablate it, and measure greedy accuracy
/// on the evaluation half for the clean and typo variants.
pub fn ablation_experiment<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    dataset: &TripletDataset,
    kind: SelectionKind,
    identify_n: usize,
    fraction: f64,
    seed: u64,
) -> Result<AblationOutcome, HarnessError> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1], got {fraction}");
    let (identify, eval) = split_identify_eval(dataset.samples.len(), identify_n, seed)?;

    let c = &model.config;
    let (total, width) =
        if kind.is_neuron() { (c.total_neurons(), c.d_ffn) } else { (c.total_heads(), c.n_heads) };
    let k = ((fraction * total as f64).ceil() as usize).min(total);

    let mut neuron_deltas = None;
    let mut head_deltas = None;
    let mut head_deltas_averaged = None;
    let units = if kind.is_random() {
        random_units(total, width, k, seed)
    } else {
        let clean = score_variant(model, &variant_instances(dataset, &identify, Variant::Clean))?;
        let typo = score_variant(model, &variant_instances(dataset, &identify, Variant::Typo))?;
        let split = score_variant(model, &variant_instances(dataset, &identify, Variant::Split))?;
        if kind.is_neuron() {
            let deltas = neuron_delta(&clean.neurons, &typo.neurons, &split.neurons)?;
            let units = select_top_fraction(&deltas, fraction, RankBy::Delta);
            neuron_deltas = Some(deltas);
            units
        } else {
            let deltas = head_delta(&clean.heads, &typo.heads, &split.heads)?;
            let averaged = head_delta(&clean.heads_avg, &typo.heads_avg, &split.heads_avg)?;
            let units = select_top_fraction(&deltas, fraction, RankBy::AbsDelta);
            head_deltas = Some(deltas);
            head_deltas_averaged = Some(averaged);
            units
        }
    };

    let mask = if kind.is_neuron() {
        AblationMask { neurons: units.clone(), heads: vec![] }
    } else {
        AblationMask { neurons: vec![], heads: units.clone() }
    };
    let clean_accuracy =
        evaluate_accuracy(model, vocab, &variant_instances(dataset, &eval, Variant::Clean), &mask)?;
    let typo_accuracy =
        evaluate_accuracy(model, vocab, &variant_instances(dataset, &eval, Variant::Typo), &mask)?;

    Ok(AblationOutcome {
        condition: format!("{kind} ({} units)", units.len()),
        units,
        clean_accuracy,
        typo_accuracy,
        identify,
        eval,
        neuron_deltas,
        head_deltas,
        head_deltas_averaged,
    })
}

/// The no-ablation row over the same evaluation split.
pub fn unablated_outcome<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    dataset: &TripletDataset,
    identify_n: usize,
    seed: u64,
) -> Result<AblationOutcome, HarnessError> {
    let (identify, eval) = split_identify_eval(dataset.samples.len(), identify_n, seed)?;
    let mask = AblationMask::none();
    let clean_accuracy =
        evaluate_accuracy(model, vocab, &variant_instances(dataset, &eval, Variant::Clean), &mask)?;
    let typo_accuracy =
        evaluate_accuracy(model, vocab, &variant_instances(dataset, &eval, Variant::Typo), &mask)?;
    Ok(AblationOutcome {
        condition: "unablated".into(),
        units: vec![],
        clean_accuracy,
        typo_accuracy,
        identify,
        eval,
        neuron_deltas: None,
        head_deltas: None,
        head_deltas_averaged: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub condition: String,
    pub units: usize,
    pub clean_accuracy: f64,
    pub typo_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDistribution {
    pub name: String,
    pub distribution: LayerDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSeeds {
    /// Seed the triplet dataset was built with.
    pub build: u64,
    /// Seed driving the experiment's own streams (splits, random draws).
    pub experiment: u64,
    pub t: usize,
}

/// Everything one experiment run produced. Serializes deterministically;
/// wall clock stays out of the JSON so replays compare byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ModelConfig,
    pub checkpoint: String,
    pub seeds: ReportSeeds,
    pub rows: Vec<AccuracyRow>,
    pub neuron_delta_stats: Option<DeltaStats>,
    pub head_delta_stats: Option<DeltaStats>,
    /// Stats under the length-averaged head concentration variant.
    pub head_delta_stats_averaged: Option<DeltaStats>,
    pub distributions: Vec<NamedDistribution>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    /// Rows must carry unique labels and accuracies inside [0, 1].
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.condition.as_str()) {
                return Err(HarnessError::InvalidReport(format!(
                    "duplicate condition label {:?}",
                    row.condition
                )));
            }
            for acc in [row.clean_accuracy, row.typo_accuracy] {
                if !(0.0..=1.0).contains(&acc) {
                    return Err(HarnessError::InvalidReport(format!(
                        "accuracy {acc} out of [0, 1] in row {:?}",
                        row.condition
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::InvalidReport(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(raw: &str) -> Result<Self, HarnessError> {
        let report: ExperimentReport =
            serde_json::from_str(raw).map_err(|e| HarnessError::InvalidReport(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    /// Fixed-width text rendering: the accuracy table, delta summaries, and
    /// layer distributions.
    pub fn text_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.condition.len())
            .chain(["condition".len()])
            .max()
            .unwrap_or(9);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}\n",
            "condition", "units", "clean", "typo"
        ));
        out.push_str(&"-".repeat(width + 24));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>6}  {:>6.3}  {:>6.3}\n",
                r.condition, r.units, r.clean_accuracy, r.typo_accuracy
            ));
        }
        let stats = [
            ("neuron delta", &self.neuron_delta_stats),
            ("head delta", &self.head_delta_stats),
            ("head delta (averaged)", &self.head_delta_stats_averaged),
        ];
        for (name, stat) in stats {
            if let Some(s) = stat {
                out.push_str(&format!(
                    "{name}: mean {:+.6}  sd {:.6}  min {:+.6}  max {:+.6}\n",
                    s.mean, s.sd, s.min, s.max
                ));
            }
        }
        for nd in &self.distributions {
            out.push_str(&format!("{} by relative depth:", nd.name));
            for bin in &nd.distribution.bins {
                out.push_str(&format!(
                    "  [{:.2},{:.2}) {:.1}%",
                    bin.depth.start, bin.depth.end, bin.percent
                ));
            }
            if !nd.distribution.defined {
                out.push_str("  (empty selection, percentages undefined)");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Samples used to identify selections; the rest evaluate.
    pub identify_n: usize,
    pub neuron_fraction: f64,
    pub head_fraction: f64,
    /// Layer histogram bins for the report's distributions.
    pub bins: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            identify_n: 100,
            neuron_fraction: 0.005,
            head_fraction: 0.015,
            bins: 10,
            seed: 0,
        }
    }
}

/// Runs the unablated baseline plus each requested condition over one shared
/// identify/evaluate split and assembles the report.
pub fn ablation_report<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    dataset: &TripletDataset,
    kinds: &[SelectionKind],
    cfg: &AblationConfig,
    checkpoint: &str,
) -> Result<ExperimentReport, HarnessError> {
    let start = Instant::now();
    let mut report = ExperimentReport {
        config: model.config.clone(),
        checkpoint: checkpoint.to_string(),
        seeds: ReportSeeds { build: dataset.meta.seed, experiment: cfg.seed, t: dataset.meta.t },
        rows: vec![],
        neuron_delta_stats: None,
        head_delta_stats: None,
        head_delta_stats_averaged: None,
        distributions: vec![],
        notes: vec![
            "random baselines draw uniformly over all units; identified units are not excluded"
                .into(),
        ],
        wall_clock_secs: 0.0,
    };

    let base = unablated_outcome(model, vocab, dataset, cfg.identify_n, cfg.seed)?;
    report.rows.push(AccuracyRow {
        condition: base.condition,
        units: 0,
        clean_accuracy: base.clean_accuracy,
        typo_accuracy: base.typo_accuracy,
    });

    for &kind in kinds {
        let fraction =
            if kind.is_neuron() { cfg.neuron_fraction } else { cfg.head_fraction };
        let outcome =
            ablation_experiment(model, vocab, dataset, kind, cfg.identify_n, fraction, cfg.seed)?;
        if let Some(deltas) = &outcome.neuron_deltas {
            report.neuron_delta_stats = Some(delta_stats(deltas));
        }
        if let Some(deltas) = &outcome.head_deltas {
            report.head_delta_stats = Some(delta_stats(deltas));
        }
        if let Some(deltas) = &outcome.head_deltas_averaged {
            report.head_delta_stats_averaged = Some(delta_stats(deltas));
        }
        if !kind.is_random() {
            report.distributions.push(NamedDistribution {
                name: outcome.condition.clone(),
                distribution: layer_distribution(
                    &outcome.units,
                    model.config.n_layers,
                    cfg.bins,
                ),
            });
        }
        report.rows.push(AccuracyRow {
            condition: outcome.condition,
            units: outcome.units.len(),
            clean_accuracy: outcome.clean_accuracy,
            typo_accuracy: outcome.typo_accuracy,
        });
    }

    report.validate()?;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Scores one sample group and histograms its top-fraction neuron selection
/// over relative depth.
pub fn group_distribution<S: Scalar>(
    model: &Model<S>,
    dataset: &TripletDataset,
    indices: &[usize],
    fraction: f64,
    bins: usize,
) -> Result<(LayerDistribution, Vec<(usize, usize)>), HarnessError> {
    let clean = score_variant(model, &variant_instances(dataset, indices, Variant::Clean))?;
    let typo = score_variant(model, &variant_instances(dataset, indices, Variant::Typo))?;
    let split = score_variant(model, &variant_instances(dataset, indices, Variant::Split))?;
    let deltas = neuron_delta(&clean.neurons, &typo.neurons, &split.neurons)?;
    let units = select_top_fraction(&deltas, fraction, RankBy::Delta);
    Ok((layer_distribution(&units, model.config.n_layers, bins), units))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageComparison {
    pub undamaged: LayerDistribution,
    pub damaged: LayerDistribution,
    /// Per-bin percent difference, damaged minus undamaged; zeros when either
    /// side's percentages are undefined.
    pub difference: Vec<f64>,
    pub group_size: usize,
    pub undamaged_units: Vec<(usize, usize)>,
    pub damaged_units: Vec<(usize, usize)>,
}

/// Splits the dataset by whether the typo variant still evaluates correctly,
/// draws `group_size` samples from each side, and compares the typo-neuron
/// layer distributions identified independently per group.
pub fn damage_comparison<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    dataset: &TripletDataset,
    group_size: usize,
    fraction: f64,
    bins: usize,
    seed: u64,
) -> Result<DamageComparison, HarnessError> {
    let part = crate::detector::partition_by_damage(model, vocab, dataset, group_size)?;
    let pick = |mut indices: Vec<usize>, stream: u64| -> Vec<usize> {
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stream)));
        indices.truncate(group_size);
        indices.sort_unstable();
        indices
    };
    let undamaged_idx = pick(part.undamaged, STREAM_GROUP_UNDAMAGED);
    let damaged_idx = pick(part.damaged, STREAM_GROUP_DAMAGED);

    let (undamaged, undamaged_units) =
        group_distribution(model, dataset, &undamaged_idx, fraction, bins)?;
    let (damaged, damaged_units) = group_distribution(model, dataset, &damaged_idx, fraction, bins)?;
    let difference = if undamaged.defined && damaged.defined {
        damaged
            .bins
            .iter()
            .zip(&undamaged.bins)
            .map(|(d, u)| d.percent - u.percent)
            .collect()
    } else {
        vec![0.0; bins]
    };
    Ok(DamageComparison {
        undamaged,
        damaged,
        difference,
        group_size,
        undamaged_units,
        damaged_units,
    })
}
