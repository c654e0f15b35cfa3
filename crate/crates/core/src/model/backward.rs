//! Hand-written reverse pass. Mirrors forward.rs step by step in reverse;
//! every formula here is pinned by the finite-difference suite, so changes to
//! one file must land in both.

use ndarray::{s, Array2, Axis};

use super::forward::{FfnCache, ForwardCache};
use super::math::{
    gelu_derivative, rmsnorm_row_backward, softmax_backward_slice, softmax_slice, Scalar,
};
use crate::tokenizer::TokenId;
use super::{FfnWeights, Model, ModelError, Params};

impl<S: Scalar> Model<S> {
    /// Accumulates parameter gradients for d(loss)/d(logits) into `grads`
    /// (which must have this model's shapes) and optionally returns the
    /// gradient with respect to the input embedding vectors, one row per
    /// position. Ablations recorded in the cache are respected exactly:
    /// gradients do not flow through zeroed units.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        dlogits: &Array2<S>,
        grads: &mut Params<S>,
        want_input_grads: bool,
    ) -> Result<Option<Array2<S>>, ModelError> {
        self.backward_l1(cache, dlogits, grads, want_input_grads, S::zero())
    }

    /// Same as `backward`, plus the subgradient of `l1 * sum(|post-activation|)`
    /// taken over every FFN unit at every position. The coefficient is applied
    /// per call, so a caller averaging over a batch must scale it along with
    /// `dlogits`. Ablated units carry zero activation and receive no penalty.
    pub fn backward_l1(
        &self,
        cache: &ForwardCache<S>,
        dlogits: &Array2<S>,
        grads: &mut Params<S>,
        want_input_grads: bool,
        l1: S,
    ) -> Result<Option<Array2<S>>, ModelError> {
        let c = &self.config;
        let t_len = cache.tokens.len();
        if dlogits.shape() != [t_len, c.vocab_size] {
            return Err(ModelError::Config(format!(
                "dlogits shape {:?} does not match [{t_len}, {}]",
                dlogits.shape(),
                c.vocab_size
            )));
        }
        let dh = c.head_dim();
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());

        // logits = x_final · U
        grads.unembed = &grads.unembed + &cache.x_final.t().dot(dlogits);
        let dx_final = dlogits.dot(&self.params.unembed.t());

        // final RMSNorm
        let mut dx = Array2::<S>::zeros((t_len, c.d_model));
        for t in 0..t_len {
            rmsnorm_row_backward(
                cache.x_last.row(t),
                self.params.final_norm.view(),
                cache.inv_final[t],
                dx_final.row(t),
                grads.final_norm.view_mut(),
                dx.row_mut(t),
            );
        }

        for li in (0..c.n_layers).rev() {
            let layer = &self.params.layers[li];
            let lc = &cache.layers[li];
            let g = &mut grads.layers[li];

            // x = x_mid + ffn_out; dx splits into the residual branch and
            // the FFN branch.
            let dffn_out = &dx;
            let (mut dneuron, dw_down_target): (Array2<S>, &mut Array2<S>) = match &layer.ffn {
                FfnWeights::PlainGelu { w_down, .. } => {
                    let dn = dffn_out.dot(&w_down.t());
                    let FfnWeights::PlainGelu { w_down: gw, .. } = &mut g.ffn else {
                        unreachable!("grads mirror params")
                    };
                    (dn, gw)
                }
                FfnWeights::Gated { w_down, .. } => {
                    let dn = dffn_out.dot(&w_down.t());
                    let FfnWeights::Gated { w_down: gw, .. } = &mut g.ffn else {
                        unreachable!("grads mirror params")
                    };
                    (dn, gw)
                }
            };
            *dw_down_target = &*dw_down_target + &lc.ffn.neuron().t().dot(dffn_out);

            // An ablated neuron is a hard zero: neither value nor gradient
            // passes through it.
            for &(l, idx) in &cache.mask.neurons {
                if l == li {
                    dneuron.column_mut(idx).fill(S::zero());
                }
            }

            if l1 > S::zero() {
                dneuron.zip_mut_with(lc.ffn.neuron(), |d, &v| {
                    if v > S::zero() {
                        *d = *d + l1;
                    } else if v < S::zero() {
                        *d = *d - l1;
                    }
                });
            }

            let dh2: Array2<S> = match (&layer.ffn, &lc.ffn, &mut g.ffn) {
                (
                    FfnWeights::PlainGelu { w_in, .. },
                    FfnCache::PlainGelu { pre, .. },
                    FfnWeights::PlainGelu { w_in: gw_in, .. },
                ) => {
                    let dpre = &dneuron * &pre.mapv(gelu_derivative);
                    *gw_in = &*gw_in + &lc.h2.t().dot(&dpre);
                    dpre.dot(&w_in.t())
                }
                (
                    FfnWeights::Gated { w_gate, w_up, .. },
                    FfnCache::Gated { gate_pre, act, up, .. },
                    FfnWeights::Gated { w_gate: gw_gate, w_up: gw_up, .. },
                ) => {
                    let dup = &dneuron * act;
                    let dact = &dneuron * up;
                    let dgate_pre = &dact * &gate_pre.mapv(gelu_derivative);
                    *gw_gate = &*gw_gate + &lc.h2.t().dot(&dgate_pre);
                    *gw_up = &*gw_up + &lc.h2.t().dot(&dup);
                    dgate_pre.dot(&w_gate.t()) + dup.dot(&w_up.t())
                }
                _ => unreachable!("cache and grads mirror params"),
            };

            // x_mid gets the residual path plus the RMSNorm path.
            let mut dx_mid = dx.clone();
            for t in 0..t_len {
                rmsnorm_row_backward(
                    lc.x_mid.row(t),
                    layer.ln2.view(),
                    lc.inv2[t],
                    dh2.row(t),
                    g.ln2.view_mut(),
                    dx_mid.row_mut(t),
                );
            }

            // x_mid = x_in + ctx · Wo
            let dattn_out = &dx_mid;
            g.wo = &g.wo + &lc.ctx.t().dot(dattn_out);
            let dctx = dattn_out.dot(&layer.wo.t());

            let mut dq = Array2::<S>::zeros((t_len, c.d_model));
            let mut dk = Array2::<S>::zeros((t_len, c.d_model));
            let mut dv = Array2::<S>::zeros((t_len, c.d_model));
            for h in 0..c.n_heads {
                if cache.mask.heads.contains(&(li, h)) {
                    continue; // head output was identically zero
                }
                let cols = s![.., h * dh..(h + 1) * dh];
                let ah = lc.attn.index_axis(Axis(0), h);
                let dctx_h = dctx.slice(cols);
                let vh = lc.v.slice(cols);
                let qh = lc.q.slice(cols);
                let kh = lc.k.slice(cols);

                let dattn = dctx_h.dot(&vh.t());
                dv.slice_mut(cols).assign(&ah.t().dot(&dctx_h));

                // softmax rows, then the 1/sqrt(dh) scale on scores
                let mut dz = Array2::<S>::zeros((t_len, t_len));
                let mut ds_buf: Vec<S> = vec![S::zero(); t_len];
                for i in 0..t_len {
                    let p_row = ah.row(i);
                    let p = &p_row.as_slice().expect("contiguous row")[..=i];
                    let dp_row = dattn.row(i);
                    let dp: Vec<S> = dp_row.iter().take(i + 1).copied().collect();
                    softmax_backward_slice(p, &dp, &mut ds_buf[..=i]);
                    for j in 0..=i {
                        dz[(i, j)] = ds_buf[j] * scale;
                    }
                }

                dq.slice_mut(cols).assign(&dz.dot(&kh));
                dk.slice_mut(cols).assign(&dz.t().dot(&qh));
            }

            g.wq = &g.wq + &lc.h1.t().dot(&dq);
            g.wk = &g.wk + &lc.h1.t().dot(&dk);
            g.wv = &g.wv + &lc.h1.t().dot(&dv);
            let dh1 = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());

            let mut dx_in = dx_mid.clone();
            for t in 0..t_len {
                rmsnorm_row_backward(
                    lc.x_in.row(t),
                    layer.ln1.view(),
                    lc.inv1[t],
                    dh1.row(t),
                    g.ln1.view_mut(),
                    dx_in.row_mut(t),
                );
            }
            dx = dx_in;
        }

        // x0 rows: embedding table rows plus positional rows.
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let mut row = grads.embed.row_mut(tok as usize);
            row += &dx.row(t);
        }
        if let Some(pos_grad) = &mut grads.pos {
            for t in 0..t_len {
                let mut row = pos_grad.row_mut(t);
                row += &dx.row(t);
            }
        }

        Ok(if want_input_grads { Some(dx) } else { None })
    }

    /// Gradient of the mean answer-token log-probability (teacher forcing,
    /// no ablation) with respect to each position's input embedding vector.
    /// `answer` indexes the answer tokens, so it must start at 1 or later:
    /// position p is predicted from row p - 1.
    pub fn answer_input_gradients(
        &self,
        tokens: &[TokenId],
        answer: std::ops::Range<usize>,
    ) -> Result<Array2<S>, ModelError> {
        if answer.start == 0 || answer.end > tokens.len() || answer.start >= answer.end {
            return Err(ModelError::Config(format!(
                "answer span {answer:?} invalid for sequence of length {}",
                tokens.len()
            )));
        }
        let mask = super::AblationMask::none();
        let (logits, cache) = self.forward_cached(tokens, &mask)?;
        let inv_n = S::from_f64(1.0 / answer.len() as f64);
        let mut dlogits = Array2::<S>::zeros((tokens.len(), self.config.vocab_size));
        for p in answer {
            // d(mean answer log-prob)/d(logits[p-1]) = (onehot - softmax) / n
            let row = p - 1;
            let mut probs: Vec<S> = logits.row(row).to_vec();
            softmax_slice(&mut probs);
            for (j, &pj) in probs.iter().enumerate() {
                dlogits[[row, j]] = dlogits[[row, j]] - pj * inv_n;
            }
            let target = tokens[p] as usize;
            dlogits[[row, target]] = dlogits[[row, target]] + inv_n;
        }
        let mut grads = self.zeros_like();
        let ig = self
            .backward(&cache, &dlogits, &mut grads, true)?
            .expect("input gradients were requested");
        Ok(ig)
    }

    /// L2 norm of `answer_input_gradients` per prompt position. Causality
    /// makes every entry past the last answer token exactly zero.
    pub fn input_gradients(
        &self,
        tokens: &[TokenId],
        answer: std::ops::Range<usize>,
    ) -> Result<Vec<f64>, ModelError> {
        let ig = self.answer_input_gradients(tokens, answer)?;
        Ok(ig
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .map(|&g| {
                        let g = g.to_f64();
                        g * g
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }
}
