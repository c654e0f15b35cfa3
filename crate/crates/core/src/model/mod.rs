//! Instrumented decoder-only transformer.
//!
//! Pre-norm blocks: RMSNorm → causal multi-head attention → residual,
//! RMSNorm → FFN → residual, with a final RMSNorm before an untied
//! unembedding. No biases anywhere. Positional information comes from
//! learned absolute embeddings and can be disabled for symmetry tests.
//!
//! "Neuron" always means the FFN post-activation unit: `gelu(W_in·h)` for the
//! plain variant, `gelu(W_gate·h) ⊙ (W_up·h)` for the gated one. Those are
//! the values the trace records and ablation zeroes.

mod backward;
mod checkpoint;
mod forward;
mod generate;
mod math;
mod train;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
pub use generate::answer_log_likelihood;
pub use math::{argmax, gelu, gelu_derivative, log_softmax_row, softmax_slice, Scalar, RMS_EPS};
pub use train::{train_toy, TrainData, TrainOptions, TrainStats};

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("cannot run the model on an empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("{kind} ({layer}, {index}) out of range for this config")]
    UnitOutOfRange { kind: &'static str, layer: usize, index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training did not converge: accuracy {accuracy:.4} below required {required:.4}")]
    DidNotConverge { accuracy: f64, required: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// neuron = gelu(W_in · h)
    PlainGelu,
    /// neuron = gelu(W_gate · h) ⊙ (W_up · h)
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ffn_kind: FfnKind,
    /// Learned absolute positional embeddings. Disabled, the model is
    /// permutation-equivariant over prompt positions, which some oracle
    /// tests exploit.
    pub pos_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 8,
            d_model: 256,
            d_ffn: 1024,
            vocab_size: 2048,
            max_seq: 128,
            ffn_kind: FfnKind::Gated,
            pos_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ffn == 0 {
            return Err(ModelError::Config("all dimensions must be nonzero".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(ModelError::Config("vocab_size and max_seq must be nonzero".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn total_neurons(&self) -> usize {
        self.n_layers * self.d_ffn
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

#[derive(Debug, Clone)]
pub enum FfnWeights<S> {
    PlainGelu { w_in: Array2<S>, w_down: Array2<S> },
    Gated { w_gate: Array2<S>, w_up: Array2<S>, w_down: Array2<S> },
}

#[derive(Debug, Clone)]
pub struct LayerParams<S> {
    pub ln1: Array1<S>,
    pub wq: Array2<S>,
    pub wk: Array2<S>,
    pub wv: Array2<S>,
    pub wo: Array2<S>,
    pub ln2: Array1<S>,
    pub ffn: FfnWeights<S>,
}

#[derive(Debug, Clone)]
pub struct Params<S> {
    pub embed: Array2<S>,
    pub pos: Option<Array2<S>>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Array1<S>,
    pub unembed: Array2<S>,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: Params<S>,
}

/// Units to knock out during a forward pass. Neuron entries zero the FFN
/// post-activation column; head entries zero the full post-softmax attention
/// rows of that head (no renormalization), so the head contributes nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AblationMask {
    pub neurons: Vec<(usize, usize)>,
    pub heads: Vec<(usize, usize)>,
}

impl AblationMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty() && self.heads.is_empty()
    }

    pub fn normalize(&mut self) {
        self.neurons.sort_unstable();
        self.neurons.dedup();
        self.heads.sort_unstable();
        self.heads.dedup();
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        for &(layer, index) in &self.neurons {
            if layer >= config.n_layers || index >= config.d_ffn {
                return Err(ModelError::UnitOutOfRange { kind: "neuron", layer, index });
            }
        }
        for &(layer, index) in &self.heads {
            if layer >= config.n_layers || index >= config.n_heads {
                return Err(ModelError::UnitOutOfRange { kind: "head", layer, index });
            }
        }
        Ok(())
    }
}

/// What a forward pass actually computed, post-ablation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    /// Per layer: [n_heads, T, T] attention probabilities. Row i of an
    /// unablated head sums to 1 over columns 0..=i and is 0 above the
    /// diagonal; ablated heads are all zero.
    pub attention: Vec<Array3<S>>,
    /// Per layer: [T, d_ffn] FFN post-activation values.
    pub neurons: Vec<Array2<S>>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with N(0, 0.02) weights, residual output projections
    /// scaled down by sqrt(2·n_layers), norm gains at 1. Same seed, same
    /// model, bit for bit.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0f64, 0.02).expect("valid std");
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let resid = Normal::new(0.0f64, resid_std).expect("valid std");

        let fill2 = |rows: usize, cols: usize, dist: &Normal<f64>, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| S::from_f64(dist.sample(rng)))
        };

        let embed = fill2(config.vocab_size, config.d_model, &base, &mut rng);
        let pos = if config.pos_embedding {
            Some(fill2(config.max_seq, config.d_model, &base, &mut rng))
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let ln1 = Array1::from_elem(config.d_model, S::one());
            let wq = fill2(config.d_model, config.d_model, &base, &mut rng);
            let wk = fill2(config.d_model, config.d_model, &base, &mut rng);
            let wv = fill2(config.d_model, config.d_model, &base, &mut rng);
            let wo = fill2(config.d_model, config.d_model, &resid, &mut rng);
            let ln2 = Array1::from_elem(config.d_model, S::one());
            let ffn = match config.ffn_kind {
                FfnKind::PlainGelu => FfnWeights::PlainGelu {
                    w_in: fill2(config.d_model, config.d_ffn, &base, &mut rng),
                    w_down: fill2(config.d_ffn, config.d_model, &resid, &mut rng),
                },
                FfnKind::Gated => FfnWeights::Gated {
                    w_gate: fill2(config.d_model, config.d_ffn, &base, &mut rng),
                    w_up: fill2(config.d_model, config.d_ffn, &base, &mut rng),
                    w_down: fill2(config.d_ffn, config.d_model, &resid, &mut rng),
                },
            };
            layers.push(LayerParams { ln1, wq, wk, wv, wo, ln2, ffn });
        }
        let final_norm = Array1::from_elem(config.d_model, S::one());
        let unembed = fill2(config.d_model, config.vocab_size, &base, &mut rng);

        Ok(Model {
            config,
            params: Params { embed, pos, layers, final_norm, unembed },
        })
    }

    /// Zero-filled parameter set with this model's shapes; gradient buffer.
    pub fn zeros_like(&self) -> Params<S> {
        let c = &self.config;
        let layer = |ffn_kind: FfnKind| LayerParams {
            ln1: Array1::zeros(c.d_model),
            wq: Array2::zeros((c.d_model, c.d_model)),
            wk: Array2::zeros((c.d_model, c.d_model)),
            wv: Array2::zeros((c.d_model, c.d_model)),
            wo: Array2::zeros((c.d_model, c.d_model)),
            ln2: Array1::zeros(c.d_model),
            ffn: match ffn_kind {
                FfnKind::PlainGelu => FfnWeights::PlainGelu {
                    w_in: Array2::zeros((c.d_model, c.d_ffn)),
                    w_down: Array2::zeros((c.d_ffn, c.d_model)),
                },
                FfnKind::Gated => FfnWeights::Gated {
                    w_gate: Array2::zeros((c.d_model, c.d_ffn)),
                    w_up: Array2::zeros((c.d_model, c.d_ffn)),
                    w_down: Array2::zeros((c.d_ffn, c.d_model)),
                },
            },
        };
        Params {
            embed: Array2::zeros((c.vocab_size, c.d_model)),
            pos: if c.pos_embedding { Some(Array2::zeros((c.max_seq, c.d_model))) } else { None },
            layers: (0..c.n_layers).map(|_| layer(c.ffn_kind)).collect(),
            final_norm: Array1::zeros(c.d_model),
            unembed: Array2::zeros((c.d_model, c.vocab_size)),
        }
    }

    pub fn validate_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange { id: t, vocab: self.config.vocab_size });
            }
        }
        Ok(())
    }
}

impl Model<f32> {
    /// Exact lift to f64 for verification against finite differences.
    pub fn to_f64(&self) -> Model<f64> {
        fn up1(a: &Array1<f32>) -> Array1<f64> {
            a.mapv(|v| v as f64)
        }
        fn up2(a: &Array2<f32>) -> Array2<f64> {
            a.mapv(|v| v as f64)
        }
        Model {
            config: self.config.clone(),
            params: Params {
                embed: up2(&self.params.embed),
                pos: self.params.pos.as_ref().map(up2),
                layers: self
                    .params
                    .layers
                    .iter()
                    .map(|l| LayerParams {
                        ln1: up1(&l.ln1),
                        wq: up2(&l.wq),
                        wk: up2(&l.wk),
                        wv: up2(&l.wv),
                        wo: up2(&l.wo),
                        ln2: up1(&l.ln2),
                        ffn: match &l.ffn {
                            FfnWeights::PlainGelu { w_in, w_down } => FfnWeights::PlainGelu {
                                w_in: up2(w_in),
                                w_down: up2(w_down),
                            },
                            FfnWeights::Gated { w_gate, w_up, w_down } => FfnWeights::Gated {
                                w_gate: up2(w_gate),
                                w_up: up2(w_up),
                                w_down: up2(w_down),
                            },
                        },
                    })
                    .collect(),
                final_norm: up1(&self.params.final_norm),
                unembed: up2(&self.params.unembed),
            },
        }
    }
}

impl<S: Scalar> Params<S> {
    /// Flat views of every tensor in canonical order. The order is the
    /// checkpoint serialization order and the Adam state order.
    pub fn tensors(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = Vec::new();
        out.push(self.embed.as_slice().expect("standard layout"));
        if let Some(pos) = &self.pos {
            out.push(pos.as_slice().expect("standard layout"));
        }
        for l in &self.layers {
            out.push(l.ln1.as_slice().expect("standard layout"));
            for w in [&l.wq, &l.wk, &l.wv, &l.wo] {
                out.push(w.as_slice().expect("standard layout"));
            }
            out.push(l.ln2.as_slice().expect("standard layout"));
            match &l.ffn {
                FfnWeights::PlainGelu { w_in, w_down } => {
                    out.push(w_in.as_slice().expect("standard layout"));
                    out.push(w_down.as_slice().expect("standard layout"));
                }
                FfnWeights::Gated { w_gate, w_up, w_down } => {
                    out.push(w_gate.as_slice().expect("standard layout"));
                    out.push(w_up.as_slice().expect("standard layout"));
                    out.push(w_down.as_slice().expect("standard layout"));
                }
            }
        }
        out.push(self.final_norm.as_slice().expect("standard layout"));
        out.push(self.unembed.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        out.push(self.embed.as_slice_mut().expect("standard layout"));
        if let Some(pos) = &mut self.pos {
            out.push(pos.as_slice_mut().expect("standard layout"));
        }
        for l in &mut self.layers {
            out.push(l.ln1.as_slice_mut().expect("standard layout"));
            out.push(l.wq.as_slice_mut().expect("standard layout"));
            out.push(l.wk.as_slice_mut().expect("standard layout"));
            out.push(l.wv.as_slice_mut().expect("standard layout"));
            out.push(l.wo.as_slice_mut().expect("standard layout"));
            out.push(l.ln2.as_slice_mut().expect("standard layout"));
            match &mut l.ffn {
                FfnWeights::PlainGelu { w_in, w_down } => {
                    out.push(w_in.as_slice_mut().expect("standard layout"));
                    out.push(w_down.as_slice_mut().expect("standard layout"));
                }
                FfnWeights::Gated { w_gate, w_up, w_down } => {
                    out.push(w_gate.as_slice_mut().expect("standard layout"));
                    out.push(w_up.as_slice_mut().expect("standard layout"));
                    out.push(w_down.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out.push(self.final_norm.as_slice_mut().expect("standard layout"));
        out.push(self.unembed.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(S::zero());
        }
    }
}

/// (name, shape) of every tensor in canonical order for a config.
pub fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = config;
    let mut out = vec![("embed".to_string(), vec![c.vocab_size, c.d_model])];
    if c.pos_embedding {
        out.push(("pos".to_string(), vec![c.max_seq, c.d_model]));
    }
    for i in 0..c.n_layers {
        out.push((format!("layers.{i}.ln1"), vec![c.d_model]));
        out.push((format!("layers.{i}.wq"), vec![c.d_model, c.d_model]));
        out.push((format!("layers.{i}.wk"), vec![c.d_model, c.d_model]));
        out.push((format!("layers.{i}.wv"), vec![c.d_model, c.d_model]));
        out.push((format!("layers.{i}.wo"), vec![c.d_model, c.d_model]));
        out.push((format!("layers.{i}.ln2"), vec![c.d_model]));
        match c.ffn_kind {
            FfnKind::PlainGelu => {
                out.push((format!("layers.{i}.w_in"), vec![c.d_model, c.d_ffn]));
                out.push((format!("layers.{i}.w_down"), vec![c.d_ffn, c.d_model]));
            }
            FfnKind::Gated => {
                out.push((format!("layers.{i}.w_gate"), vec![c.d_model, c.d_ffn]));
                out.push((format!("layers.{i}.w_up"), vec![c.d_model, c.d_ffn]));
                out.push((format!("layers.{i}.w_down"), vec![c.d_ffn, c.d_model]));
            }
        }
    }
    out.push(("final_norm".to_string(), vec![c.d_model]));
    out.push(("unembed".to_string(), vec![c.d_model, c.vocab_size]));
    out
}

pub use forward::ForwardCache;
pub use generate::KvState;


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut c = ModelConfig::default();
        c.n_heads = 3; // 256 % 3 != 0
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        let mut c = ModelConfig::default();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = test_util::tiny_config(FfnKind::Gated);
        let a = Model::<f32>::init(cfg.clone(), 7).unwrap();
        let b = Model::<f32>::init(cfg.clone(), 7).unwrap();
        let c = Model::<f32>::init(cfg, 8).unwrap();
        for (ta, tb) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(*ta, tb);
        }
        let differs = a
            .params
            .tensors()
            .iter()
            .zip(c.params.tensors())
            .any(|(ta, tc)| ta.iter().zip(tc.iter()).any(|(x, y)| x != y));
        assert!(differs);
    }

    #[test]
    fn tensor_specs_match_actual_shapes() {
        for kind in [FfnKind::Gated, FfnKind::PlainGelu] {
            let cfg = test_util::tiny_config(kind);
            let model = Model::<f32>::init(cfg.clone(), 0).unwrap();
            let specs = tensor_specs(&cfg);
            let tensors = model.params.tensors();
            assert_eq!(specs.len(), tensors.len());
            for ((_, shape), t) in specs.iter().zip(tensors) {
                assert_eq!(shape.iter().product::<usize>(), t.len());
            }
        }
    }

    #[test]
    fn token_validation_errors() {
        let cfg = test_util::tiny_config(FfnKind::Gated);
        let model = Model::<f32>::init(cfg, 0).unwrap();
        assert!(matches!(
            model.validate_tokens(&[]),
            Err(ModelError::EmptySequence)
        ));
        assert!(matches!(
            model.validate_tokens(&vec![1; 17]),
            Err(ModelError::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(matches!(
            model.validate_tokens(&[1, 40]),
            Err(ModelError::TokenOutOfRange { id: 40, .. })
        ));
    }

    #[test]
    fn mask_validation_errors() {
        let cfg = test_util::tiny_config(FfnKind::Gated);
        let model = Model::<f32>::init(cfg, 0).unwrap();
        let mask = AblationMask { neurons: vec![(0, 24)], heads: vec![] };
        assert!(matches!(
            mask.validate(&model.config),
            Err(ModelError::UnitOutOfRange { kind: "neuron", .. })
        ));
        let mask = AblationMask { neurons: vec![], heads: vec![(2, 0)] };
        assert!(mask.validate(&model.config).is_err());
        let mut mask = AblationMask {
            neurons: vec![(1, 3), (0, 2), (1, 3)],
            heads: vec![(0, 1), (0, 1)],
        };
        mask.normalize();
        assert_eq!(mask.neurons, vec![(0, 2), (1, 3)]);
        assert_eq!(mask.heads, vec![(0, 1)]);
    }
}
