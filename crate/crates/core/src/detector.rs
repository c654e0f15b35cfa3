//! Responsibility scoring for FFN neurons and attention heads.
//!
//! Neuron score: mean post-activation value over each instance's marked
//! positions, then over instances. A causal model's activation at position p
//! equals the activation from running the prefix ending at p alone, so one
//! forward pass per instance suffices.
//!
//! Head score: per query row, the KL divergence (base 2) between the
//! attention distribution and uniform, normalized by its maximum log2(m) for
//! a row with m keys; rows are summed per sample and the sum averaged over
//! instances. A one-key row is necessarily one-hot and contributes 0, taking
//! the 0/0 at log2(1) as the limit of the constant-0 numerator. An averaged
//! variant (sum divided by row count) is computed alongside because the raw
//! sum grows with sequence length; the summed form is canonical.
//!
//! A unit's delta is s_typo - max(s_clean, s_split): positive for neurons
//! that fire on typos specifically, negative for heads that attend more
//! diffusely on typos. All accumulation is f64 in fixed sample order.

use std::cmp::Ordering;
use std::ops::Range;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{evaluate_instance, CorpusError, PromptInstance, TripletDataset};
use crate::model::{AblationMask, Model, ModelError, Scalar};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("score tensors disagree in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("no instances to score")]
    EmptyDataset,
    #[error("instance has no marked positions: {0:?}")]
    NoMarks(String),
    #[error(
        "damage partition too small: requested {requested} per group, \
         found {undamaged} undamaged and {damaged} damaged"
    )]
    InsufficientSamples { requested: usize, undamaged: usize, damaged: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Per-unit scores for one dataset variant, all f64-accumulated.
#[derive(Debug, Clone)]
pub struct VariantScores {
    /// Mean marked-position activation, `[layer][neuron]`.
    pub neurons: Array2<f64>,
    /// Mean per-sample summed attention concentration, `[layer][head]`.
    pub heads: Array2<f64>,
    /// As `heads`, but each sample's sum is divided by its row count.
    pub heads_avg: Array2<f64>,
    pub samples: usize,
}

/// Normalized KL divergence from uniform for one probability row:
/// D_KL(P || U_m) / log2(m) = 1 - H(P)/log2(m), which is 0 for uniform rows,
/// 1 for one-hot rows, and 0 by definition for m = 1.
pub fn normalized_kl(row: &[f64]) -> f64 {
    let m = row.len();
    if m <= 1 {
        return 0.0;
    }
    let log2m = (m as f64).log2();
    let mut entropy = 0.0;
    for &p in row {
        if p > 0.0 {
            entropy -= p * p.log2();
        }
    }
    (log2m - entropy) / log2m
}

/// Summed attention concentration per head for one sample's `[H, T, T]`
/// causal attention: row i holds a distribution over keys 0..=i.
pub fn head_sample_sums<S: Scalar>(attn: &Array3<S>) -> Vec<f64> {
    let (h_count, t_len, _) = attn.dim();
    let mut sums = vec![0.0f64; h_count];
    let mut row = Vec::with_capacity(t_len);
    for (h, sum) in sums.iter_mut().enumerate() {
        for i in 0..t_len {
            row.clear();
            row.extend((0..=i).map(|k| attn[[h, i, k]].to_f64()));
            *sum += normalized_kl(&row);
        }
    }
    sums
}

/// Scores one dataset variant with a single traced forward per instance.
pub fn score_variant<S: Scalar>(
    model: &Model<S>,
    instances: &[&PromptInstance],
) -> Result<VariantScores, DetectorError> {
    if instances.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    let c = &model.config;
    let mask = AblationMask::none();
    let mut neurons = Array2::<f64>::zeros((c.n_layers, c.d_ffn));
    let mut heads = Array2::<f64>::zeros((c.n_layers, c.n_heads));
    let mut heads_avg = Array2::<f64>::zeros((c.n_layers, c.n_heads));

    for inst in instances {
        if inst.marked.is_empty() {
            return Err(DetectorError::NoMarks(inst.text.clone()));
        }
        let (_, trace) = model.forward_traced(&inst.tokens, &mask)?;
        let inv_m = 1.0 / inst.marked.len() as f64;
        let t_len = inst.tokens.len() as f64;
        for l in 0..c.n_layers {
            let acts = &trace.neurons[l];
            for &p in &inst.marked {
                for j in 0..c.d_ffn {
                    neurons[[l, j]] += acts[[p, j]].to_f64() * inv_m;
                }
            }
            for (h, sum) in head_sample_sums(&trace.attention[l]).into_iter().enumerate() {
                heads[[l, h]] += sum;
                heads_avg[[l, h]] += sum / t_len;
            }
        }
    }

    let inv_n = 1.0 / instances.len() as f64;
    neurons *= inv_n;
    heads *= inv_n;
    heads_avg *= inv_n;
    Ok(VariantScores { neurons, heads, heads_avg, samples: instances.len() })
}

/// Mean marked-position activations, `[layer][neuron]`.
pub fn neuron_dataset_score<S: Scalar>(
    model: &Model<S>,
    instances: &[&PromptInstance],
) -> Result<Array2<f64>, DetectorError> {
    Ok(score_variant(model, instances)?.neurons)
}

/// Mean summed attention concentration, `[layer][head]` (canonical summed
/// form).
pub fn head_dataset_score<S: Scalar>(
    model: &Model<S>,
    instances: &[&PromptInstance],
) -> Result<Array2<f64>, DetectorError> {
    Ok(score_variant(model, instances)?.heads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub layer: usize,
    pub neuron: usize,
    pub s_clean: f64,
    pub s_typo: f64,
    pub s_split: f64,
    /// s_typo - max(s_clean, s_split), exactly as stored.
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub s_clean: f64,
    pub s_typo: f64,
    pub s_split: f64,
    /// s_typo - max(s_clean, s_split), exactly as stored.
    pub delta: f64,
}

/// Anything rankable by (layer, index) and delta.
pub trait ScoredUnit {
    fn key(&self) -> (usize, usize);
    fn delta(&self) -> f64;
}

impl ScoredUnit for NeuronScore {
    fn key(&self) -> (usize, usize) {
        (self.layer, self.neuron)
    }
    fn delta(&self) -> f64 {
        self.delta
    }
}

impl ScoredUnit for HeadScore {
    fn key(&self) -> (usize, usize) {
        (self.layer, self.head)
    }
    fn delta(&self) -> f64 {
        self.delta
    }
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>) -> Result<(), DetectorError> {
    for other in [b, c] {
        if a.shape() != other.shape() {
            return Err(DetectorError::ShapeMismatch(a.shape().to_vec(), other.shape().to_vec()));
        }
    }
    Ok(())
}

/// Elementwise deltas over the full neuron grid, ordered by (layer, neuron).
pub fn neuron_delta(
    clean: &Array2<f64>,
    typo: &Array2<f64>,
    split: &Array2<f64>,
) -> Result<Vec<NeuronScore>, DetectorError> {
    check_shapes(clean, typo, split)?;
    let mut out = Vec::with_capacity(clean.len());
    for ((layer, neuron), &s_clean) in clean.indexed_iter() {
        let s_typo = typo[[layer, neuron]];
        let s_split = split[[layer, neuron]];
        out.push(NeuronScore {
            layer,
            neuron,
            s_clean,
            s_typo,
            s_split,
            delta: s_typo - s_clean.max(s_split),
        });
    }
    Ok(out)
}

/// Elementwise deltas over the full head grid, ordered by (layer, head).
pub fn head_delta(
    clean: &Array2<f64>,
    typo: &Array2<f64>,
    split: &Array2<f64>,
) -> Result<Vec<HeadScore>, DetectorError> {
    check_shapes(clean, typo, split)?;
    let mut out = Vec::with_capacity(clean.len());
    for ((layer, head), &s_clean) in clean.indexed_iter() {
        let s_typo = typo[[layer, head]];
        let s_split = split[[layer, head]];
        out.push(HeadScore {
            layer,
            head,
            s_clean,
            s_typo,
            s_split,
            delta: s_typo - s_clean.max(s_split),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Highest delta first (typo neurons).
    Delta,
    /// Highest |delta| first (typo heads).
    AbsDelta,
}

fn rank_metric(unit: &impl ScoredUnit, by: RankBy) -> f64 {
    match by {
        RankBy::Delta => unit.delta(),
        RankBy::AbsDelta => unit.delta().abs(),
    }
}

/// The ceil(fraction * total) top units under the chosen metric, ranked
/// best first; ties fall back to (layer, index). `fraction` must be in
/// (0, 1].
pub fn select_top_fraction<T: ScoredUnit>(
    scores: &[T],
    fraction: f64,
    by: RankBy,
) -> Vec<(usize, usize)> {
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "selection fraction must be in (0, 1], got {fraction}"
    );
    let k = ((fraction * scores.len() as f64).ceil() as usize).min(scores.len());
    let mut order: Vec<&T> = scores.iter().collect();
    order.sort_by(|a, b| {
        rank_metric(*b, by)
            .partial_cmp(&rank_metric(*a, by))
            .unwrap_or(Ordering::Equal)
            .then(a.key().cmp(&b.key()))
    });
    order.into_iter().take(k).map(|u| u.key()).collect()
}

/// Every unit with delta >= threshold, best first with (layer, index)
/// tie-break. With threshold = min delta of a top-K selection over the same
/// scores, the result is a superset of that selection.
pub fn select_by_threshold<T: ScoredUnit>(scores: &[T], threshold: f64) -> Vec<(usize, usize)> {
    let mut hits: Vec<&T> = scores.iter().filter(|u| u.delta() >= threshold).collect();
    hits.sort_by(|a, b| {
        b.delta()
            .partial_cmp(&a.delta())
            .unwrap_or(Ordering::Equal)
            .then(a.key().cmp(&b.key()))
    });
    hits.into_iter().map(|u| u.key()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBin {
    /// Relative depth range covered by this bin.
    pub depth: Range<f64>,
    pub count: usize,
    /// Share of the selection in percent; 0 when the selection is empty.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub bins: Vec<LayerBin>,
    pub total: usize,
    /// False for an empty selection, whose percentages are undefined.
    pub defined: bool,
}

/// Histogram of a selection over relative depth layer/(n_layers - 1),
/// equal-width bins covering [0, 1]. A single-layer model maps to depth 0.
pub fn layer_distribution(
    selection: &[(usize, usize)],
    n_layers: usize,
    bins: usize,
) -> LayerDistribution {
    assert!(bins >= 1, "need at least one bin");
    assert!(n_layers >= 1, "need at least one layer");
    let mut counts = vec![0usize; bins];
    for &(layer, _) in selection {
        let depth = if n_layers == 1 { 0.0 } else { layer as f64 / (n_layers - 1) as f64 };
        let bin = ((depth * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    let total = selection.len();
    let defined = total > 0;
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| LayerBin {
            depth: i as f64 / bins as f64..(i + 1) as f64 / bins as f64,
            count,
            percent: if defined { 100.0 * count as f64 / total as f64 } else { 0.0 },
        })
        .collect();
    LayerDistribution { bins, total, defined }
}

/// Summary statistics of a delta population, for run reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

pub fn delta_stats<T: ScoredUnit>(scores: &[T]) -> DeltaStats {
    if scores.is_empty() {
        return DeltaStats { mean: 0.0, sd: 0.0, min: 0.0, max: 0.0 };
    }
    let n = scores.len() as f64;
    let mean = scores.iter().map(|u| u.delta()).sum::<f64>() / n;
    let var = scores.iter().map(|u| (u.delta() - mean).powi(2)).sum::<f64>() / n;
    let min = scores.iter().map(|u| u.delta()).fold(f64::INFINITY, f64::min);
    let max = scores.iter().map(|u| u.delta()).fold(f64::NEG_INFINITY, f64::max);
    DeltaStats { mean, sd: var.sqrt(), min, max }
}

/// Sample indices split by whether the typo variant still yields the right
/// answer under greedy decoding. Errors if either group ends up smaller than
/// `requested`.
#[derive(Debug, Clone, PartialEq)]
pub struct DamagePartition {
    pub undamaged: Vec<usize>,
    pub damaged: Vec<usize>,
}

pub fn partition_by_damage<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    dataset: &TripletDataset,
    requested: usize,
) -> Result<DamagePartition, DetectorError> {
    let mask = AblationMask::none();
    let mut undamaged = Vec::new();
    let mut damaged = Vec::new();
    for (i, sample) in dataset.samples.iter().enumerate() {
        if evaluate_instance(model, vocab, &sample.typo, &mask)? {
            undamaged.push(i);
        } else {
            damaged.push(i);
        }
    }
    if undamaged.len() < requested || damaged.len() < requested {
        return Err(DetectorError::InsufficientSamples {
            requested,
            undamaged: undamaged.len(),
            damaged: damaged.len(),
        });
    }
    Ok(DamagePartition { undamaged, damaged })
}

/// CSV rows for both unit kinds: `kind,layer,index,s_clean,s_typo,s_split,delta`.
/// Floats print in Rust's shortest round-trip form, so equal scores give
/// byte-identical files.
pub fn scores_to_csv(neurons: &[NeuronScore], heads: &[HeadScore]) -> String {
    let mut out = String::from("kind,layer,index,s_clean,s_typo,s_split,delta\n");
    for n in neurons {
        out.push_str(&format!(
            "neuron,{},{},{},{},{},{}\n",
            n.layer, n.neuron, n.s_clean, n.s_typo, n.s_split, n.delta
        ));
    }
    for h in heads {
        out.push_str(&format!(
            "head,{},{},{},{},{},{}\n",
            h.layer, h.head, h.s_clean, h.s_typo, h.s_split, h.delta
        ));
    }
    out
}

/// Selection export with enough metadata to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionExport {
    pub kind: String,
    pub method: String,
    pub fraction: Option<f64>,
    pub threshold: Option<f64>,
    pub t: usize,
    pub seed: u64,
    pub checkpoint: String,
    pub units: Vec<(usize, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_triplets, generate_corpus, BuildOptions, PromptTemplate, TripletDataset, Variant,
    };
    use crate::model::{FfnKind, ModelConfig};
    use crate::tokenizer::Vocab;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    struct Fixture {
        vocab: Vocab,
        model: Model<f32>,
        dataset: TripletDataset,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let defs = generate_corpus(24, 19);
            let template = PromptTemplate::default();
            let texts: Vec<String> = defs
                .iter()
                .map(|d| template.render(&d.definition, &d.word).text)
                .collect();
            let vocab = Vocab::train(&texts, 400).unwrap();
            let config = ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 32,
                d_ffn: 24,
                vocab_size: vocab.len(),
                max_seq: 160,
                ffn_kind: FfnKind::Gated,
                pos_embedding: true,
            };
            let model = Model::<f32>::init(config, 23).unwrap();
            let opts = BuildOptions { t: 2, seed: 6, ..BuildOptions::default() };
            let dataset = build_triplets(&model, &vocab, &defs[..6], &opts).unwrap();
            assert!(dataset.meta.built >= 5);
            Fixture { vocab, model, dataset }
        })
    }

    #[test]
    fn normalized_kl_hits_its_anchors() {
        for m in [2usize, 3, 8, 57] {
            let uniform = vec![1.0 / m as f64; m];
            assert!(normalized_kl(&uniform).abs() <= 1e-9, "uniform m={m}");
            let mut onehot = vec![0.0; m];
            onehot[m / 2] = 1.0;
            assert!((normalized_kl(&onehot) - 1.0).abs() <= 1e-9, "one-hot m={m}");
        }
        assert_eq!(normalized_kl(&[1.0]), 0.0);
        assert_eq!(normalized_kl(&[]), 0.0);
    }

    #[test]
    fn normalized_kl_stays_in_bounds_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..2000 {
            let m = rng.gen_range(1..40);
            let mut row: Vec<f64> = (0..m).map(|_| rng.gen::<f64>().max(1e-12)).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
            let v = normalized_kl(&row);
            assert!((-1e-12..=1.0 + 1e-12).contains(&v), "v={v} row={row:?}");
        }
    }

    #[test]
    fn head_sums_match_direct_summation_on_random_maps() {
        // Random causal attention maps over 8 tokens, checked against a
        // literal D_KL(P||U)/log2(m) summation.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h_count, t_len) = (3usize, 8usize);
        let mut attn = Array3::<f64>::zeros((h_count, t_len, t_len));
        for h in 0..h_count {
            for i in 0..t_len {
                let mut row: Vec<f64> = (0..=i).map(|_| rng.gen::<f64>() + 1e-6).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= sum);
                for (k, &p) in row.iter().enumerate() {
                    attn[[h, i, k]] = p;
                }
            }
        }
        let got = head_sample_sums(&attn);
        for (h, &sum) in got.iter().enumerate() {
            let mut expect = 0.0;
            for i in 1..t_len {
                let m = (i + 1) as f64;
                let mut kl = 0.0;
                for k in 0..=i {
                    let p = attn[[h, i, k]];
                    if p > 0.0 {
                        kl += p * (p * m).log2();
                    }
                }
                expect += kl / m.log2();
            }
            assert!((sum - expect).abs() < 1e-6, "head {h}: {sum} vs {expect}");
        }
    }

    #[test]
    fn neuron_scores_match_prefix_rerun_oracle() {
        let f = fixture();
        let mask = AblationMask::none();
        for sample in f.dataset.samples.iter().take(2) {
            for inst in [&sample.clean, &sample.typo, &sample.split] {
                let scores = neuron_dataset_score(&f.model, &[inst]).unwrap();
                let c = &f.model.config;
                let mut oracle = Array2::<f64>::zeros((c.n_layers, c.d_ffn));
                for &p in &inst.marked {
                    let (_, trace) =
                        f.model.forward_traced(&inst.tokens[..=p], &mask).unwrap();
                    for l in 0..c.n_layers {
                        for j in 0..c.d_ffn {
                            oracle[[l, j]] +=
                                trace.neurons[l][[p, j]].to_f64() / inst.marked.len() as f64;
                        }
                    }
                }
                let worst = scores
                    .iter()
                    .zip(oracle.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(worst < 1e-5, "prefix rerun disagrees by {worst}");
            }
        }
    }

    #[test]
    fn single_marked_position_is_that_activation() {
        let f = fixture();
        let sample = &f.dataset.samples[0];
        let mut inst = sample.clean.clone();
        let p = inst.answer_span.start;
        inst.marked = vec![p];
        let scores = neuron_dataset_score(&f.model, &[&inst]).unwrap();
        let (_, trace) = f.model.forward_traced(&inst.tokens, &AblationMask::none()).unwrap();
        for l in 0..f.model.config.n_layers {
            for j in 0..f.model.config.d_ffn {
                assert_eq!(scores[[l, j]], trace.neurons[l][[p, j]].to_f64());
            }
        }
    }

    #[test]
    fn duplicated_samples_do_not_move_the_mean() {
        let f = fixture();
        let inst = &f.dataset.samples[0].typo;
        let one = score_variant(&f.model, &[inst]).unwrap();
        let three = score_variant(&f.model, &[inst, inst, inst]).unwrap();
        let diff = |a: &Array2<f64>, b: &Array2<f64>| {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max)
        };
        assert!(diff(&one.neurons, &three.neurons) < 1e-12);
        assert!(diff(&one.heads, &three.heads) < 1e-12);
        assert_eq!(three.samples, 3);
    }

    #[test]
    fn identical_variants_zero_every_delta() {
        let f = fixture();
        let insts = f.dataset.instances(Variant::Clean);
        let s = score_variant(&f.model, &insts).unwrap();
        for n in neuron_delta(&s.neurons, &s.neurons, &s.neurons).unwrap() {
            assert_eq!(n.delta, 0.0);
        }
        for h in head_delta(&s.heads, &s.heads, &s.heads).unwrap() {
            assert_eq!(h.delta, 0.0);
        }
    }

    #[test]
    fn delta_arithmetic_is_exact() {
        let clean = Array2::from_shape_vec((1, 1), vec![0.2]).unwrap();
        let typo = Array2::from_shape_vec((1, 1), vec![0.9]).unwrap();
        let split = Array2::from_shape_vec((1, 1), vec![0.5]).unwrap();
        let scores = neuron_delta(&clean, &typo, &split).unwrap();
        assert_eq!(scores[0].delta, 0.4);
        assert_eq!(scores[0].layer, 0);
        assert_eq!(scores[0].neuron, 0);

        let bad = Array2::<f64>::zeros((2, 1));
        assert!(matches!(
            neuron_delta(&clean, &bad, &split),
            Err(DetectorError::ShapeMismatch(..))
        ));
    }

    fn toy_scores() -> Vec<NeuronScore> {
        // Deltas: (0,0)=0.5, (0,1)=-0.7, (1,0)=0.5, (1,1)=0.1
        [(0, 0, 0.5), (0, 1, -0.7), (1, 0, 0.5), (1, 1, 0.1)]
            .into_iter()
            .map(|(layer, neuron, delta)| NeuronScore {
                layer,
                neuron,
                s_clean: 0.0,
                s_typo: delta,
                s_split: 0.0,
                delta,
            })
            .collect()
    }

    #[test]
    fn top_fraction_matches_full_sort_and_breaks_ties_by_position() {
        let scores = toy_scores();
        assert_eq!(select_top_fraction(&scores, 0.25, RankBy::Delta), vec![(0, 0)]);
        // Tie between (0,0) and (1,0): position order decides.
        assert_eq!(
            select_top_fraction(&scores, 0.5, RankBy::Delta),
            vec![(0, 0), (1, 0)]
        );
        assert_eq!(
            select_top_fraction(&scores, 0.25, RankBy::AbsDelta),
            vec![(0, 1)]
        );
        let all = select_top_fraction(&scores, 1.0, RankBy::Delta);
        assert_eq!(all.len(), scores.len());

        // Full-sort oracle.
        let mut oracle: Vec<_> = scores.iter().map(|s| (s.delta, s.key())).collect();
        oracle.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
        });
        let oracle_keys: Vec<_> = oracle.into_iter().map(|(_, k)| k).collect();
        assert_eq!(all, oracle_keys);
    }

    #[test]
    fn threshold_selection_extends_top_k() {
        let scores = toy_scores();
        let top = select_top_fraction(&scores, 0.25, RankBy::Delta);
        let min_delta = scores
            .iter()
            .filter(|s| top.contains(&s.key()))
            .map(|s| s.delta)
            .fold(f64::INFINITY, f64::min);
        let thresholded = select_by_threshold(&scores, min_delta);
        assert!(thresholded.len() >= top.len());
        for k in &top {
            assert!(thresholded.contains(k));
        }
        assert!(select_by_threshold(&scores, f64::INFINITY).is_empty());
    }

    #[test]
    fn layer_histogram_counts_and_percentages() {
        let sel = vec![(0, 1), (0, 2), (0, 3)];
        let d = layer_distribution(&sel, 4, 5);
        assert!(d.defined);
        assert_eq!(d.bins[0].count, 3);
        assert_eq!(d.bins[0].percent, 100.0);
        assert!(d.bins[1..].iter().all(|b| b.count == 0));

        let empty = layer_distribution(&[], 4, 5);
        assert!(!empty.defined);
        assert!(empty.bins.iter().all(|b| b.count == 0 && b.percent == 0.0));

        // Recount oracle on a spread selection.
        let spread: Vec<(usize, usize)> = (0..8).map(|l| (l, 0)).collect();
        let d = layer_distribution(&spread, 8, 3);
        let recount: Vec<usize> = (0..3)
            .map(|b| {
                spread
                    .iter()
                    .filter(|&&(l, _)| {
                        let depth = l as f64 / 7.0;
                        let bin = ((depth * 3.0) as usize).min(2);
                        bin == b
                    })
                    .count()
            })
            .collect();
        let got: Vec<usize> = d.bins.iter().map(|b| b.count).collect();
        assert_eq!(got, recount);
        let pct: f64 = d.bins.iter().map(|b| b.percent).sum();
        assert!((pct - 100.0).abs() < 0.1);
    }

    #[test]
    fn damage_partition_agrees_with_regeneration() {
        let f = fixture();
        let part = partition_by_damage(&f.model, &f.vocab, &f.dataset, 0).unwrap();
        assert_eq!(
            part.undamaged.len() + part.damaged.len(),
            f.dataset.samples.len()
        );
        // Regeneration oracle via the uncached path.
        for (i, sample) in f.dataset.samples.iter().enumerate() {
            let inst = &sample.typo;
            let stop = f.vocab.token_id(b"'");
            let got = f
                .model
                .generate_greedy_uncached(
                    &inst.tokens[..inst.answer_span.start],
                    inst.answer_span.len() + 4,
                    stop,
                    &AblationMask::none(),
                )
                .unwrap();
            let correct = match f.vocab.decode(&got) {
                Ok(text) => text.trim() == sample.word,
                Err(_) => false,
            };
            assert_eq!(correct, part.undamaged.contains(&i), "sample {i}");
        }

        let n = f.dataset.samples.len();
        assert!(matches!(
            partition_by_damage(&f.model, &f.vocab, &f.dataset, n + 1),
            Err(DetectorError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn csv_export_is_stable_and_well_formed() {
        let f = fixture();
        let clean = score_variant(&f.model, &f.dataset.instances(Variant::Clean)).unwrap();
        let typo = score_variant(&f.model, &f.dataset.instances(Variant::Typo)).unwrap();
        let split = score_variant(&f.model, &f.dataset.instances(Variant::Split)).unwrap();
        let neurons = neuron_delta(&clean.neurons, &typo.neurons, &split.neurons).unwrap();
        let heads = head_delta(&clean.heads, &typo.heads, &split.heads).unwrap();
        let csv = scores_to_csv(&neurons, &heads);
        let csv2 = scores_to_csv(&neurons, &heads);
        assert_eq!(csv, csv2);

        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,layer,index,s_clean,s_typo,s_split,delta");
        assert_eq!(lines.len(), 1 + neurons.len() + heads.len());
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "neuron");
        assert_eq!(first[1].parse::<usize>().unwrap(), 0);
        let parsed: f64 = first[6].parse().unwrap();
        assert_eq!(parsed, neurons[0].delta);
    }

    #[test]
    fn delta_statistics_summarize_the_population() {
        let scores = toy_scores();
        let stats = delta_stats(&scores);
        assert!((stats.mean - 0.1).abs() < 1e-12);
        assert_eq!(stats.min, -0.7);
        assert_eq!(stats.max, 0.5);
        assert!(stats.sd > 0.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let f = fixture();
        assert!(matches!(
            score_variant::<f32>(&f.model, &[]),
            Err(DetectorError::EmptyDataset)
        ));
    }
}
