//! Incremental decoding with a per-layer key/value cache, plus the answer
//! log-likelihood used for scoring. Greedy only; the word-identification task
//! has a unique right answer, so sampling would just add noise.

use ndarray::{Array1, Array2, ArrayView1};
use std::ops::Range;

use super::math::{argmax, gelu, log_softmax_row, rmsnorm_row, softmax_slice, Scalar};
use super::{AblationMask, FfnWeights, Model, ModelError};
use crate::tokenizer::TokenId;

/// Grow-only key/value cache. `step` appends one position and returns that
/// position's logits; results are identical to a full forward pass over the
/// extended sequence (covered by an equivalence test).
pub struct KvState<S> {
    k: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
    len: usize,
}

impl<S: Scalar> KvState<S> {
    pub fn new(model: &Model<S>) -> Self {
        let c = &model.config;
        KvState {
            k: (0..c.n_layers).map(|_| Array2::zeros((c.max_seq, c.d_model))).collect(),
            v: (0..c.n_layers).map(|_| Array2::zeros((c.max_seq, c.d_model))).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<S: Scalar> Model<S> {
    /// Feeds a whole prefix through the batched forward pass, seeding the
    /// key/value cache in one set of GEMMs instead of per-token matvecs.
    /// Returns the last position's logits. The cache must be empty.
    pub fn prefill(
        &self,
        state: &mut KvState<S>,
        prefix: &[TokenId],
        mask: &AblationMask,
    ) -> Result<Array1<S>, ModelError> {
        if state.len != 0 {
            return Err(ModelError::Config("prefill requires an empty kv cache".into()));
        }
        let (logits, cache) = self.forward_cached(prefix, mask)?;
        let t_len = prefix.len();
        for (li, lc) in cache.layers.iter().enumerate() {
            state.k[li].slice_mut(ndarray::s![0..t_len, ..]).assign(&lc.k);
            state.v[li].slice_mut(ndarray::s![0..t_len, ..]).assign(&lc.v);
        }
        state.len = t_len;
        Ok(logits.row(t_len - 1).to_owned())
    }

    /// Runs one token at position `state.len()` and returns its logits row.
    pub fn step(
        &self,
        state: &mut KvState<S>,
        token: TokenId,
        mask: &AblationMask,
    ) -> Result<Array1<S>, ModelError> {
        let c = &self.config;
        if token as usize >= c.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, vocab: c.vocab_size });
        }
        let pos = state.len;
        if pos >= c.max_seq {
            return Err(ModelError::SequenceTooLong { len: pos + 1, max: c.max_seq });
        }
        let dh = c.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());

        let mut x = self.params.embed.row(token as usize).to_owned();
        if let Some(p) = &self.params.pos {
            x += &p.row(pos);
        }

        let mut h = Array1::<S>::zeros(c.d_model);
        for (li, layer) in self.params.layers.iter().enumerate() {
            rmsnorm_row(x.view(), layer.ln1.view(), h.view_mut());
            let q = h.dot(&layer.wq);
            let k_new = h.dot(&layer.wk);
            let v_new = h.dot(&layer.wv);
            state.k[li].row_mut(pos).assign(&k_new);
            state.v[li].row_mut(pos).assign(&v_new);

            let mut ctx = Array1::<S>::zeros(c.d_model);
            for head in 0..c.n_heads {
                if mask.heads.contains(&(li, head)) {
                    continue;
                }
                let lo = head * dh;
                let hi = lo + dh;
                let qh = q.slice(ndarray::s![lo..hi]);
                let mut scores: Vec<S> = (0..=pos)
                    .map(|j| {
                        let kh = state.k[li].row(j);
                        dot_slice(qh, kh.slice(ndarray::s![lo..hi])) * scale
                    })
                    .collect();
                softmax_slice(&mut scores);
                let mut ctx_h = ctx.slice_mut(ndarray::s![lo..hi]);
                for (j, &p) in scores.iter().enumerate() {
                    let vh = state.v[li].row(j);
                    let vh = vh.slice(ndarray::s![lo..hi]);
                    ctx_h.zip_mut_with(&vh, |c, &v| *c = *c + p * v);
                }
            }
            x += &ctx.dot(&layer.wo);

            rmsnorm_row(x.view(), layer.ln2.view(), h.view_mut());
            let ffn_out = match &layer.ffn {
                FfnWeights::PlainGelu { w_in, w_down } => {
                    let mut neuron = h.dot(w_in).mapv(gelu);
                    zero_masked(&mut neuron, &mask.neurons, li);
                    neuron.dot(w_down)
                }
                FfnWeights::Gated { w_gate, w_up, w_down } => {
                    let up = h.dot(w_up);
                    let mut neuron = h.dot(w_gate).mapv(gelu) * up;
                    zero_masked(&mut neuron, &mask.neurons, li);
                    neuron.dot(w_down)
                }
            };
            x += &ffn_out;
        }

        let mut xf = Array1::<S>::zeros(c.d_model);
        rmsnorm_row(x.view(), self.params.final_norm.view(), xf.view_mut());
        state.len = pos + 1;
        Ok(xf.dot(&self.params.unembed))
    }

    /// Greedy continuation of `prefix`. Stops before emitting `stop` (the
    /// stop token is consumed, not returned), at `max_new` tokens, or when
    /// the context window fills, whichever comes first. Argmax ties resolve
    /// to the lowest token id.
    pub fn generate_greedy(
        &self,
        prefix: &[TokenId],
        max_new: usize,
        stop: Option<TokenId>,
        mask: &AblationMask,
    ) -> Result<Vec<TokenId>, ModelError> {
        self.validate_tokens(prefix)?;
        mask.validate(&self.config)?;
        let mut state = KvState::new(self);
        let mut logits = self.prefill(&mut state, prefix, mask)?;
        let mut out = Vec::new();
        while out.len() < max_new {
            let next = argmax(logits.view()) as TokenId;
            if stop == Some(next) {
                break;
            }
            out.push(next);
            if out.len() == max_new || state.len == self.config.max_seq {
                break; // context window full; cannot compute further logits
            }
            logits = self.step(&mut state, next, mask)?;
        }
        Ok(out)
    }

    /// Same result as `generate_greedy`, recomputing the full forward pass
    /// per emitted token. Kept as the oracle the cached path is tested
    /// against.
    pub fn generate_greedy_uncached(
        &self,
        prefix: &[TokenId],
        max_new: usize,
        stop: Option<TokenId>,
        mask: &AblationMask,
    ) -> Result<Vec<TokenId>, ModelError> {
        let mut tokens = prefix.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && tokens.len() <= self.config.max_seq {
            let logits = self.logits(&tokens, mask)?;
            let next = argmax(logits.row(logits.nrows() - 1)) as TokenId;
            if stop == Some(next) {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

fn dot_slice<S: Scalar>(a: ArrayView1<S>, b: ArrayView1<S>) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + x * y;
    }
    acc
}

fn zero_masked<S: Scalar>(neuron: &mut Array1<S>, masked: &[(usize, usize)], layer: usize) {
    for &(l, idx) in masked {
        if l == layer {
            neuron[idx] = S::zero();
        }
    }
}

/// Mean log-probability of the answer tokens under teacher forcing: the
/// average over positions in `answer` of log P(tokens[p] | tokens[..p]).
/// `answer.start` must be ≥ 1 since position 0 has no conditioning prefix.
pub fn answer_log_likelihood<S: Scalar>(
    model: &Model<S>,
    tokens: &[TokenId],
    answer: Range<usize>,
    mask: &AblationMask,
) -> Result<f64, ModelError> {
    if answer.start == 0 || answer.end > tokens.len() || answer.start >= answer.end {
        return Err(ModelError::Config(format!(
            "answer span {answer:?} invalid for sequence of length {}",
            tokens.len()
        )));
    }
    let logits = model.logits(tokens, mask)?;
    let mut buf = Array1::zeros(model.config.vocab_size);
    let mut total = 0.0f64;
    for p in answer.clone() {
        log_softmax_row(logits.row(p - 1), &mut buf);
        total += buf[tokens[p] as usize].to_f64();
    }
    Ok(total / (answer.end - answer.start) as f64)
}

#[cfg(test)]
mod tests {
    use super::super::test_util::tiny_config;
    use super::super::FfnKind;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cached_steps_match_full_forward_logits() {
        let model = Model::<f32>::init(tiny_config(FfnKind::Gated), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let tokens: Vec<TokenId> = (0..10).map(|_| rng.gen_range(0..40)).collect();
        let mask = AblationMask { neurons: vec![(1, 4)], heads: vec![(0, 1)] };

        let full = model.logits(&tokens, &mask).unwrap();
        let mut state = KvState::new(&model);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = model.step(&mut state, tok, &mask).unwrap();
            for (a, b) in row.iter().zip(full.row(t).iter()) {
                assert!(
                    (a - b).abs() < 1e-4,
                    "position {t}: cached {a} vs full {b}"
                );
            }
        }
        assert_eq!(state.len(), 10);
    }

    #[test]
    fn prefill_agrees_with_stepwise_feeding() {
        let model = Model::<f32>::init(tiny_config(FfnKind::Gated), 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let tokens: Vec<TokenId> = (0..7).map(|_| rng.gen_range(0..40)).collect();
        let mask = AblationMask { neurons: vec![(0, 9)], heads: vec![(1, 1)] };

        let mut stepped = KvState::new(&model);
        let mut last = model.step(&mut stepped, tokens[0], &mask).unwrap();
        for &t in &tokens[1..] {
            last = model.step(&mut stepped, t, &mask).unwrap();
        }
        let mut filled = KvState::new(&model);
        let fast = model.prefill(&mut filled, &tokens, &mask).unwrap();
        assert_eq!(filled.len(), stepped.len());
        for (a, b) in fast.iter().zip(last.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
        // Continuations from either cache agree.
        let next_a = model.step(&mut filled, 3, &mask).unwrap();
        let next_b = model.step(&mut stepped, 3, &mask).unwrap();
        for (a, b) in next_a.iter().zip(next_b.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
        // Prefill refuses to clobber a warm cache.
        assert!(model.prefill(&mut filled, &tokens, &mask).is_err());
    }

    #[test]
    fn cached_and_uncached_greedy_agree() {
        let model = Model::<f32>::init(tiny_config(FfnKind::PlainGelu), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for trial in 0..10 {
            let len = rng.gen_range(1..6);
            let prefix: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..40)).collect();
            let stop = if trial % 2 == 0 { Some(7) } else { None };
            let mask = if trial % 3 == 0 {
                AblationMask { neurons: vec![(0, 2)], heads: vec![(1, 0)] }
            } else {
                AblationMask::none()
            };
            let fast = model.generate_greedy(&prefix, 8, stop, &mask).unwrap();
            let slow = model.generate_greedy_uncached(&prefix, 8, stop, &mask).unwrap();
            assert_eq!(fast, slow, "trial {trial}");
        }
    }

    #[test]
    fn greedy_respects_max_new_and_window() {
        let model = Model::<f32>::init(tiny_config(FfnKind::Gated), 25).unwrap();
        let out = model.generate_greedy(&[1, 2, 3], 4, None, &AblationMask::none()).unwrap();
        assert_eq!(out.len(), 4);
        // max_seq = 16, prefix 14: the window limits continuation length.
        let prefix: Vec<TokenId> = (0..14).map(|i| (i % 30) as TokenId).collect();
        let out = model.generate_greedy(&prefix, 10, None, &AblationMask::none()).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn greedy_tie_breaks_to_lower_token_id() {
        let mut model = Model::<f32>::init(tiny_config(FfnKind::Gated), 26).unwrap();
        // Make two vocab entries indistinguishable to the unembedding; argmax
        // must pick the lower id whenever these two tie for the top.
        let col = model.params.unembed.column(12).to_owned();
        model.params.unembed.column_mut(29).assign(&col);
        let mut state = KvState::new(&model);
        let logits = model.step(&mut state, 5, &AblationMask::none()).unwrap();
        assert_eq!(logits[12], logits[29]);
        if logits.iter().enumerate().all(|(i, &v)| v <= logits[12] || i == 12 || i == 29) {
            assert_eq!(argmax(logits.view()), 12);
        }
    }

    #[test]
    fn likelihood_matches_manual_computation() {
        let model = Model::<f32>::init(tiny_config(FfnKind::Gated), 27).unwrap();
        let tokens: Vec<TokenId> = vec![1, 4, 9, 16, 25];
        let mask = AblationMask::none();
        let ll = answer_log_likelihood(&model, &tokens, 2..5, &mask).unwrap();

        let logits = model.logits(&tokens, &mask).unwrap();
        let mut manual = 0.0f64;
        for p in 2..5usize {
            let row = logits.row(p - 1);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f32 = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
            manual += (row[tokens[p] as usize] - lse) as f64;
        }
        manual /= 3.0;
        assert!((ll - manual).abs() < 1e-5, "{ll} vs {manual}");
    }

    #[test]
    fn likelihood_rejects_bad_spans() {
        let model = Model::<f32>::init(tiny_config(FfnKind::Gated), 28).unwrap();
        let tokens: Vec<TokenId> = vec![1, 2, 3, 4];
        let mask = AblationMask::none();
        assert!(answer_log_likelihood(&model, &tokens, 0..2, &mask).is_err());
        assert!(answer_log_likelihood(&model, &tokens, 2..5, &mask).is_err());
        assert!(answer_log_likelihood(&model, &tokens, 3..3, &mask).is_err());
    }

    #[test]
    fn step_rejects_overflow_and_bad_tokens() {
        let model = Model::<f32>::init(tiny_config(FfnKind::Gated), 29).unwrap();
        let mut state = KvState::new(&model);
        assert!(matches!(
            model.step(&mut state, 99, &AblationMask::none()),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        for i in 0..16 {
            model.step(&mut state, (i % 8) as TokenId, &AblationMask::none()).unwrap();
        }
        assert!(matches!(
            model.step(&mut state, 1, &AblationMask::none()),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }
}
