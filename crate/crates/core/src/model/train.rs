//! Adam training loop. Deterministic end to end: sample order, augmentation,
//! and every reduction happen in a fixed sequence derived from the run seed,
//! so two runs with the same seed produce bit-identical weights.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::math::{log_softmax_row, Scalar};
use super::{AblationMask, Model, ModelError};
use crate::derive_seed;
use crate::tokenizer::TokenId;

/// Source of training sequences. Implementations may augment per call (typo
/// noise, re-segmentation), keyed by `(epoch, idx, seed)` so augmentation is
/// replayable.
pub trait TrainData {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sequence(&self, epoch: usize, idx: usize, seed: u64) -> Vec<TokenId>;
    /// (prompt prefix, expected continuation, stop token) for greedy probing.
    fn probe(&self, idx: usize) -> (Vec<TokenId>, Vec<TokenId>, Option<TokenId>);
    fn probe_len(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop early once probe accuracy reaches this.
    pub target_accuracy: Option<f64>,
    /// Fail with DidNotConverge if the final probe accuracy is below this.
    pub min_accuracy: Option<f64>,
    /// Evaluate the probe every this many epochs (and always at the end).
    pub probe_every: usize,
    /// L1 coefficient on FFN post-activations; 0 disables. Concentrates
    /// features onto fewer units. The reported loss stays the data term.
    pub l1_neurons: f64,
    pub log: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            target_accuracy: Some(0.995),
            min_accuracy: None,
            probe_every: 1,
            l1_neurons: 0.0,
            log: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub epochs_run: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub probe_accuracy: f64,
}

/// Mean next-token cross-entropy over positions 0..T-1 predicting 1..T, and
/// its gradient on the logits.
fn lm_loss<S: Scalar>(logits: &Array2<S>, tokens: &[TokenId]) -> (f64, Array2<S>) {
    let t_len = tokens.len();
    let vocab = logits.ncols();
    let n_pred = (t_len - 1) as f64;
    let mut dlogits = Array2::<S>::zeros((t_len, vocab));
    let mut buf = Array1::<S>::zeros(vocab);
    let mut loss = 0.0f64;
    let inv = S::from_f64(1.0 / n_pred);
    for p in 0..t_len - 1 {
        log_softmax_row(logits.row(p), &mut buf);
        let target = tokens[p + 1] as usize;
        loss -= buf[target].to_f64();
        let mut drow = dlogits.row_mut(p);
        for (d, &lp) in drow.iter_mut().zip(buf.iter()) {
            *d = lp.exp() * inv;
        }
        drow[target] = drow[target] - inv;
    }
    (loss / n_pred, dlogits)
}

fn probe_accuracy<S: Scalar>(model: &Model<S>, data: &impl TrainData) -> Result<f64, ModelError> {
    let n = data.probe_len();
    if n == 0 {
        return Ok(0.0);
    }
    let mask = AblationMask::none();
    let mut correct = 0usize;
    for idx in 0..n {
        let (prefix, expected, stop) = data.probe(idx);
        let got = model.generate_greedy(&prefix, expected.len() + 4, stop, &mask)?;
        if got == expected {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

pub fn train_toy<S: Scalar>(
    model: &mut Model<S>,
    data: &impl TrainData,
    opts: &TrainOptions,
) -> Result<TrainStats, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Config("training data is empty".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(ModelError::Config("batch_size and epochs must be nonzero".into()));
    }
    if !opts.l1_neurons.is_finite() || opts.l1_neurons < 0.0 {
        return Err(ModelError::Config(format!(
            "l1_neurons must be finite and nonnegative, got {}",
            opts.l1_neurons
        )));
    }

    let n = data.len();
    let steps_per_epoch = n.div_ceil(opts.batch_size);
    let total_steps = steps_per_epoch * opts.epochs;
    let warmup = (total_steps / 20).max(10).min(total_steps);

    let mut grads = model.zeros_like();
    let mut m = model.zeros_like();
    let mut v = model.zeros_like();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);

    let mask = AblationMask::none();
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let mut last_loss = f64::NAN;
    let mut accuracy = 0.0f64;

    'outer: for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 0x0bad_5eed ^ epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut epoch_samples = 0usize;
        for batch in order.chunks(opts.batch_size) {
            grads.fill_zero();
            let inv_batch = S::from_f64(1.0 / batch.len() as f64);
            for &idx in batch {
                let tokens = data.sequence(epoch, idx, opts.seed);
                if tokens.len() < 2 {
                    return Err(ModelError::Config(format!(
                        "training sequence {idx} has fewer than 2 tokens"
                    )));
                }
                let (logits, cache) = model.forward_cached(&tokens, &mask)?;
                let (loss, mut dlogits) = lm_loss(&logits, &tokens);
                dlogits.mapv_inplace(|d| d * inv_batch);
                let l1 = S::from_f64(opts.l1_neurons) * inv_batch;
                model.backward_l1(&cache, &dlogits, &mut grads, false, l1)?;
                epoch_loss += loss;
                epoch_samples += 1;
            }

            step += 1;
            let progress = step as f64 / total_steps as f64;
            let lr = if step <= warmup {
                opts.lr * step as f64 / warmup as f64
            } else {
                let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                opts.lr * (0.1 + 0.9 * c)
            };
            let bc1 = 1.0 - b1.powi(step as i32);
            let bc2 = 1.0 - b2.powi(step as i32);
            for ((p, g), (ms, vs)) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(m.tensors_mut().into_iter().zip(v.tensors_mut()))
            {
                for i in 0..p.len() {
                    let gi = g[i].to_f64();
                    let mi = b1 * ms[i].to_f64() + (1.0 - b1) * gi;
                    let vi = b2 * vs[i].to_f64() + (1.0 - b2) * gi * gi;
                    ms[i] = S::from_f64(mi);
                    vs[i] = S::from_f64(vi);
                    let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                    p[i] = S::from_f64(p[i].to_f64() - update);
                }
            }
        }
        epochs_run = epoch + 1;
        last_loss = epoch_loss / epoch_samples as f64;

        let probe_now = (epoch + 1) % opts.probe_every.max(1) == 0 || epoch + 1 == opts.epochs;
        if probe_now {
            accuracy = probe_accuracy(model, data)?;
            if opts.log {
                eprintln!(
                    "epoch {:>3}: loss {:.4}, probe accuracy {:.3}",
                    epoch + 1,
                    last_loss,
                    accuracy
                );
            }
            if let Some(target) = opts.target_accuracy {
                if accuracy >= target {
                    break 'outer;
                }
            }
        } else if opts.log {
            eprintln!("epoch {:>3}: loss {:.4}", epoch + 1, last_loss);
        }
    }

    if let Some(required) = opts.min_accuracy {
        if accuracy < required {
            return Err(ModelError::DidNotConverge { accuracy, required });
        }
    }
    Ok(TrainStats { epochs_run, steps: step, final_loss: last_loss, probe_accuracy: accuracy })
}
