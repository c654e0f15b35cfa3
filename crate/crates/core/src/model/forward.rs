//! Whole-sequence forward pass. One causal pass gives every prefix's
//! activations at once, which is what makes the per-prefix scoring formulas
//! affordable: the activation at position m given tokens 0..=m equals the
//! activation at m given the full sequence.

use ndarray::{s, Array1, Array2, Array3, Axis};

use super::math::{gelu, rmsnorm_row, softmax_slice, Scalar};
use super::{AblationMask, FfnWeights, ForwardTrace, Model, ModelError};
use crate::tokenizer::TokenId;

/// Everything backward needs, layer by layer. Holds post-ablation attention
/// and neuron values, so it doubles as the trace source.
pub struct ForwardCache<S> {
    pub(super) tokens: Vec<TokenId>,
    pub(super) mask: AblationMask,
    pub(super) layers: Vec<LayerCache<S>>,
    pub(super) x_last: Array2<S>,
    pub(super) inv_final: Array1<S>,
    pub(super) x_final: Array2<S>,
}

pub(super) struct LayerCache<S> {
    pub x_in: Array2<S>,
    pub h1: Array2<S>,
    pub inv1: Array1<S>,
    pub q: Array2<S>,
    pub k: Array2<S>,
    pub v: Array2<S>,
    /// [n_heads, T, T], post-softmax, post-ablation.
    pub attn: Array3<S>,
    pub ctx: Array2<S>,
    pub x_mid: Array2<S>,
    pub h2: Array2<S>,
    pub inv2: Array1<S>,
    pub ffn: FfnCache<S>,
}

pub(super) enum FfnCache<S> {
    PlainGelu {
        pre: Array2<S>,
        /// Post-ablation neuron values.
        neuron: Array2<S>,
    },
    Gated {
        gate_pre: Array2<S>,
        act: Array2<S>,
        up: Array2<S>,
        /// act ⊙ up, post-ablation.
        neuron: Array2<S>,
    },
}

impl<S> FfnCache<S> {
    pub(super) fn neuron(&self) -> &Array2<S> {
        match self {
            FfnCache::PlainGelu { neuron, .. } => neuron,
            FfnCache::Gated { neuron, .. } => neuron,
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Logits [T, vocab] for the whole sequence under `mask`.
    pub fn logits(&self, tokens: &[TokenId], mask: &AblationMask) -> Result<Array2<S>, ModelError> {
        Ok(self.forward_cached(tokens, mask)?.0)
    }

    /// Logits plus the activation trace the detectors consume.
    pub fn forward_traced(
        &self,
        tokens: &[TokenId],
        mask: &AblationMask,
    ) -> Result<(Array2<S>, ForwardTrace<S>), ModelError> {
        let (logits, cache) = self.forward_cached(tokens, mask)?;
        let trace = ForwardTrace {
            attention: cache.layers.iter().map(|l| l.attn.clone()).collect(),
            neurons: cache.layers.iter().map(|l| l.ffn.neuron().clone()).collect(),
        };
        Ok((logits, trace))
    }

    pub fn forward_cached(
        &self,
        tokens: &[TokenId],
        mask: &AblationMask,
    ) -> Result<(Array2<S>, ForwardCache<S>), ModelError> {
        self.validate_tokens(tokens)?;
        mask.validate(&self.config)?;
        let c = &self.config;
        let t_len = tokens.len();
        let dh = c.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());

        let mut x0 = Array2::<S>::zeros((t_len, c.d_model));
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = x0.row_mut(t);
            row.assign(&self.params.embed.row(tok as usize));
            if let Some(pos) = &self.params.pos {
                row += &pos.row(t);
            }
        }

        let mut x = x0;
        let mut layers = Vec::with_capacity(c.n_layers);
        for (li, layer) in self.params.layers.iter().enumerate() {
            let x_in = x.clone();

            let mut h1 = Array2::<S>::zeros((t_len, c.d_model));
            let mut inv1 = Array1::<S>::zeros(t_len);
            for t in 0..t_len {
                inv1[t] = rmsnorm_row(x_in.row(t), layer.ln1.view(), h1.row_mut(t));
            }

            let q = h1.dot(&layer.wq);
            let k = h1.dot(&layer.wk);
            let v = h1.dot(&layer.wv);

            let mut attn = Array3::<S>::zeros((c.n_heads, t_len, t_len));
            let mut ctx = Array2::<S>::zeros((t_len, c.d_model));
            for h in 0..c.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                if mask.heads.contains(&(li, h)) {
                    continue; // attention rows stay zero; head output is zero
                }
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|v| v * scale);
                let mut ah = attn.index_axis_mut(Axis(0), h);
                for i in 0..t_len {
                    let row = scores.row(i);
                    let mut probs: Vec<S> = row.iter().take(i + 1).copied().collect();
                    softmax_slice(&mut probs);
                    for (j, p) in probs.into_iter().enumerate() {
                        ah[(i, j)] = p;
                    }
                }
                let ctx_h = ah.dot(&vh);
                ctx.slice_mut(cols).assign(&ctx_h);
            }

            let attn_out = ctx.dot(&layer.wo);
            let x_mid = &x_in + &attn_out;

            let mut h2 = Array2::<S>::zeros((t_len, c.d_model));
            let mut inv2 = Array1::<S>::zeros(t_len);
            for t in 0..t_len {
                inv2[t] = rmsnorm_row(x_mid.row(t), layer.ln2.view(), h2.row_mut(t));
            }

            let (ffn_cache, ffn_out) = match &layer.ffn {
                FfnWeights::PlainGelu { w_in, w_down } => {
                    let pre = h2.dot(w_in);
                    let mut neuron = pre.mapv(gelu);
                    zero_masked_columns(&mut neuron, &mask.neurons, li);
                    let out = neuron.dot(w_down);
                    (FfnCache::PlainGelu { pre, neuron }, out)
                }
                FfnWeights::Gated { w_gate, w_up, w_down } => {
                    let gate_pre = h2.dot(w_gate);
                    let up = h2.dot(w_up);
                    let act = gate_pre.mapv(gelu);
                    let mut neuron = &act * &up;
                    zero_masked_columns(&mut neuron, &mask.neurons, li);
                    let out = neuron.dot(w_down);
                    (FfnCache::Gated { gate_pre, act, up, neuron }, out)
                }
            };
            x = &x_mid + &ffn_out;

            layers.push(LayerCache {
                x_in,
                h1,
                inv1,
                q,
                k,
                v,
                attn,
                ctx,
                x_mid,
                h2,
                inv2,
                ffn: ffn_cache,
            });
        }

        let x_last = x;
        let mut x_final = Array2::<S>::zeros((t_len, c.d_model));
        let mut inv_final = Array1::<S>::zeros(t_len);
        for t in 0..t_len {
            inv_final[t] =
                rmsnorm_row(x_last.row(t), self.params.final_norm.view(), x_final.row_mut(t));
        }
        let logits = x_final.dot(&self.params.unembed);

        let cache = ForwardCache {
            tokens: tokens.to_vec(),
            mask: mask.clone(),
            layers,
            x_last,
            inv_final,
            x_final,
        };
        Ok((logits, cache))
    }
}

fn zero_masked_columns<S: Scalar>(
    neuron: &mut Array2<S>,
    masked: &[(usize, usize)],
    layer: usize,
) {
    for &(l, idx) in masked {
        if l == layer {
            neuron.column_mut(idx).fill(S::zero());
        }
    }
}
