//! Intention-aware query refinement and the language-enhanced temporal
//! encoder with its frozen stand-in backbone.

use ndgrad::ops::scaled_dot_attention;
use ndgrad::{Array, Scalar, Var};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::model::layers::{AttnP, LayerNormP, Linear, Mlp2, Session, LEAKY_SLOPE};
use crate::model::perception::{key_mask, SceneEncoding};
use crate::params::{ParamId, ParamStore};

/// Sinusoidal positional table [len, d] with the classic 10000 scale:
/// even channels sin(pos / 10000^(2k/d)), odd channels cos of the same.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Result<Array<T>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even dim, got {d}"
        )));
    }
    Ok(Array::from_fn(&[len, d], |i| {
        let pos = (i / d) as f64;
        let ch = i % d;
        let k = (ch / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * k / d as f64);
        T::from_f64(if ch % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Anchor queries and their refinement stages.
pub struct ModeQueries<T: Scalar> {
    /// Tiled anchors, [K_n, T, B, D]
    pub q: Var<T>,
    pub q_scene: Var<T>,
    pub q_spatial: Var<T>,
    /// Refined queries before temporal expansion, [K_n, T, B, D]
    pub q_mode: Var<T>,
    /// [t_f, K_n, B, D]; values repeat across t_f at this point
    pub q_mode_expanded: Var<T>,
}

/// Language-enhanced features.
pub struct LangFeatures<T: Scalar> {
    /// [B, T, D]
    pub t_llm: Var<T>,
    /// Raw backbone output, [B, T, W]
    pub hidden: Var<T>,
    pub t_enc_norm: Var<T>,
    pub n_enc_norm: Var<T>,
}

/// Frozen stand-in sequence backbone: a small pre-norm transformer with
/// seeded fixed weights. Parameters live under the `backbone.` namespace
/// and are registered non-trainable.
pub struct Backbone {
    pub width: usize,
    heads: usize,
    blocks: Vec<BackboneBlock>,
}

struct BackboneBlock {
    ln1: LayerNormP,
    attn: AttnP,
    ln2: LayerNormP,
    ff1: Linear,
    ff2: Linear,
}

impl Backbone {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, width: usize, heads: usize, blocks: usize) -> Result<Self> {
        let mut out = Vec::new();
        for i in 0..blocks {
            out.push(BackboneBlock {
                ln1: LayerNormP::build(store, &format!("backbone.{i}.ln1"), width, false)?,
                attn: AttnP::build(store, &format!("backbone.{i}.attn"), width, false)?,
                ln2: LayerNormP::build(store, &format!("backbone.{i}.ln2"), width, false)?,
                ff1: Linear::build(store, &format!("backbone.{i}.ff1"), width, 2 * width, false)?,
                ff2: Linear::build(store, &format!("backbone.{i}.ff2"), 2 * width, width, false)?,
            });
        }
        Ok(Backbone {
            width,
            heads,
            blocks: out,
        })
    }

    /// Deterministic forward; gradients flow through activations but never
    /// into the frozen weights (they are bound as constants).
    pub fn forward<T: Scalar>(&self, sess: &Session<T>, tokens: &Var<T>) -> Result<Var<T>> {
        let d = *tokens.shape().last().unwrap_or(&0);
        if d != self.width {
            return Err(Error::Config(format!(
                "backbone expects width {}, got {d}",
                self.width
            )));
        }
        let mut x = tokens.clone();
        for blk in &self.blocks {
            let n = blk.ln1.forward(sess, &x)?;
            let a = scaled_dot_attention(&n, &n, &n, &blk.attn.params(sess), self.heads, None)?;
            x = x.add(&a)?;
            let n = blk.ln2.forward(sess, &x)?;
            let f = blk.ff2.forward(sess, &blk.ff1.forward(sess, &n)?.leaky_relu(LEAKY_SLOPE)?)?;
            x = x.add(&f)?;
        }
        Ok(x)
    }
}

pub struct Memory {
    d: usize,
    heads: usize,
    t_f: usize,
    modes: usize,
    pub anchors: ParamId,
    stages: Vec<(AttnP, LayerNormP)>,
    tokenizer: Mlp2,
    pub backbone: Backbone,
    out_proj: Mlp2,
}

impl Memory {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        d: usize,
        heads: usize,
        t_hist: usize,
        t_f: usize,
        modes: usize,
        backbone_width: usize,
        backbone_seed: u64,
    ) -> Result<Self> {
        let anchors = store.normal("memory.anchors", &[modes, t_hist, d], 0.02, true)?;
        let stages = ["scene", "spatial", "mode"]
            .iter()
            .map(|s| {
                Ok((
                    AttnP::build(store, &format!("memory.refine.{s}"), d, true)?,
                    LayerNormP::build(store, &format!("memory.refine.{s}.ln"), d, true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let tokenizer = Mlp2::build(store, "memory.tokenizer", 2 * d, d, backbone_width, true)?;
        let saved = store.set_init_seed(backbone_seed);
        let backbone = Backbone::build(store, backbone_width, 4, 2)?;
        store.set_init_seed(saved);
        let out_proj = Mlp2::build(store, "memory.out_proj", backbone_width, d, d, true)?;
        Ok(Memory {
            d,
            heads,
            t_f,
            modes,
            anchors,
            stages,
            tokenizer,
            backbone,
            out_proj,
        })
    }

    /// One residual cross-attention refinement stage:
    /// q + LN(A(q, keys(+PE), values)), with rows lacking any valid key
    /// contributing exactly nothing.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn refine_stage<T: Scalar>(
        sess: &Session<T>,
        attn: &AttnP,
        ln: &LayerNormP,
        heads: usize,
        q: &Var<T>,
        keys: &Var<T>,
        values: &Var<T>,
        mask: Option<&Array<T>>,
        pe_on_keys: bool,
    ) -> Result<Var<T>> {
        let lk = keys.shape()[1];
        let d = *keys.shape().last().unwrap();
        let keys = if pe_on_keys {
            let pe = positional_encoding::<T>(lk, d)?.reshaped(vec![1, lk, d]).expect("pe shape");
            keys.add_b(&Var::constant(pe))?
        } else {
            keys.clone()
        };
        let a = scaled_dot_attention(q, &keys, values, &attn.params(sess), heads, mask)?;
        let a = sess.dropout(&a)?;
        let mut contrib = ln.forward(sess, &a)?;
        if let Some(m) = mask {
            contrib = contrib.mul_b(&Var::constant(crate::model::perception::row_any_mask(m)))?;
        }
        Ok(q.add(&contrib)?)
    }

    /// Three-stage refinement of the anchors against scene, lane, and
    /// neighbor context, then expansion across future steps.
    pub fn intention_refine<T: Scalar>(
        &self,
        sess: &Session<T>,
        batch: &Batch<T>,
        enc: &SceneEncoding<T>,
    ) -> Result<ModeQueries<T>> {
        self.intention_refine_with_order(sess, batch, enc, &[0, 1, 2])
    }

    /// Refinement with an explicit stage order (0 = scene, 1 = lanes,
    /// 2 = neighbors). The canonical order is [0, 1, 2]; other orders exist
    /// so tests can show the sequence is load-bearing.
    pub fn intention_refine_with_order<T: Scalar>(
        &self,
        sess: &Session<T>,
        batch: &Batch<T>,
        enc: &SceneEncoding<T>,
        order: &[usize; 3],
    ) -> Result<ModeQueries<T>> {
        let (k_n, b, t, d) = (self.modes, batch.b, batch.t_hist, self.d);

        // anchors [K_n,T,D] tiled over the batch -> fold (K_n*B) rows of T tokens
        let q0 = sess
            .var(self.anchors)
            .reshape(&[k_n, t, 1, d])?
            .expand(2, b)?;
        let fold = |x: &Var<T>| -> Result<Var<T>> {
            // [K_n, T, B, D] -> [(K_n*B), T, D]
            Ok(x.permute(&[0, 2, 1, 3])?.reshape(&[k_n * b, t, d])?)
        };
        let unfold = |x: &Var<T>| -> Result<Var<T>> {
            Ok(x.reshape(&[k_n, b, t, d])?.permute(&[0, 2, 1, 3])?)
        };
        let q_start = unfold(&fold(&q0)?)?; // canonical [K_n,T,B,D] view of the anchors
        let mut q = fold(&q0)?;

        let apply = |sess: &Session<T>, stage: usize, q: &Var<T>| -> Result<Var<T>> {
            let (attn, ln) = &self.stages[stage];
            match stage {
                0 => {
                    // t_rep: the scene state tiled across modes
                    let t_rep = enc
                        .s_enc
                        .permute(&[1, 0, 2])? // [B,T,D]
                        .reshape(&[1, b, t, d])?
                        .expand(0, k_n)?
                        .reshape(&[k_n * b, t, d])?;
                    Self::refine_stage(sess, attn, ln, self.heads, q, &t_rep, &t_rep, None, true)
                }
                1 => {
                    if batch.l_max == 0 {
                        return Ok(q.clone());
                    }
                    let lanes = enc
                        .l_enc
                        .permute(&[1, 0, 2])? // [B,L,D]
                        .reshape(&[1, b, batch.l_max, d])?
                        .expand(0, k_n)?
                        .reshape(&[k_n * b, batch.l_max, d])?;
                    let mask = tile_mask_modes(&key_mask(&batch.lane_mask, t), k_n);
                    Self::refine_stage(sess, attn, ln, self.heads, q, &lanes, &lanes, Some(&mask), true)
                }
                2 => {
                    if batch.n_max == 0 {
                        return Ok(q.clone());
                    }
                    let nbrs = enc
                        .n_enc
                        .reshape(&[1, b, batch.n_max, d])?
                        .expand(0, k_n)?
                        .reshape(&[k_n * b, batch.n_max, d])?;
                    let mask = tile_mask_modes(&key_mask(&batch.neighbor_mask, t), k_n);
                    // No positional term along the agent axis: neighbor
                    // order must not leak into the queries.
                    Self::refine_stage(sess, attn, ln, self.heads, q, &nbrs, &nbrs, Some(&mask), false)
                }
                other => Err(Error::Config(format!("unknown refine stage {other}"))),
            }
        };

        q = apply(sess, order[0], &q)?;
        let q_scene = unfold(&q)?;
        q = apply(sess, order[1], &q)?;
        let q_spatial = unfold(&q)?;
        q = apply(sess, order[2], &q)?;
        let q_mode = unfold(&q)?;

        let pooled = q_mode.mean_axis(1, false)?; // [K_n, B, D]
        let q_mode_expanded = pooled.reshape(&[1, k_n, b, d])?.expand(0, self.t_f)?;

        Ok(ModeQueries {
            q: q_start,
            q_scene,
            q_spatial,
            q_mode,
            q_mode_expanded,
        })
    }

    /// Normalization + projection into the backbone input space, the frozen
    /// backbone itself, and the output projection back to D.
    pub fn language_features<T: Scalar>(
        &self,
        sess: &Session<T>,
        batch: &Batch<T>,
        enc: &SceneEncoding<T>,
    ) -> Result<LangFeatures<T>> {
        let (b, t, d) = (batch.b, batch.t_hist, self.d);
        let t_norm = feature_norm(&enc.t_enc.reshape(&[b * t, d])?, None)?.reshape(&[b, t, d])?;

        let (n_norm, summary) = if batch.n_max > 0 {
            let n = batch.n_max;
            let w = batch.neighbor_mask.reshaped(vec![b * n, 1]).expect("w");
            let n_norm = feature_norm(&enc.n_enc.reshape(&[b * n, d])?, Some(&w))?;
            let n_norm = n_norm.reshape(&[b, n, d])?;
            // mask-weighted mean over agents
            let counts = Array::from_fn(&[b, 1], |bi| {
                let c = batch.neighbor_mask.data()[bi * n..(bi + 1) * n]
                    .iter()
                    .filter(|&&v| v != T::ZERO)
                    .count();
                if c == 0 {
                    T::ZERO
                } else {
                    T::from_f64(1.0 / c as f64)
                }
            });
            let summary = n_norm
                .mul_b(&Var::constant(
                    batch.neighbor_mask.reshaped(vec![b, n, 1]).expect("m"),
                ))?
                .sum_axis(1, false)?
                .mul_b(&Var::constant(counts))?;
            (n_norm, summary)
        } else {
            (
                Var::constant(Array::zeros(&[b, 0, d])),
                Var::constant(Array::zeros(&[b, d])),
            )
        };

        let tiled = summary.reshape(&[b, 1, d])?.expand(1, t)?;
        let tokens = ndgrad::ops::concat(&[&t_norm, &tiled], 2)?;
        let tokens = self.tokenizer.forward(sess, &tokens)?;
        let tokens = sess.dropout(&tokens)?;
        let hidden = self.backbone.forward(sess, &tokens)?;
        let t_llm = self.out_proj.forward(sess, &hidden)?;
        let t_llm = sess.dropout(&t_llm)?;
        Ok(LangFeatures {
            t_llm,
            hidden,
            t_enc_norm: t_norm,
            n_enc_norm: n_norm,
        })
    }
}

fn tile_mask_modes<T: Scalar>(mask: &Array<T>, k_n: usize) -> Array<T> {
    let shape = mask.shape();
    let (b, lq, lk) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(k_n * b * lq * lk);
    for _ in 0..k_n {
        out.extend_from_slice(mask.data());
    }
    Array::from_vec(vec![k_n * b, lq, lk], out).expect("mode mask tile")
}

/// Standardize each feature column over rows to zero mean and unit variance
/// (eps-stabilized). With `weights`, rows with zero weight are excluded from
/// the statistics and re-zeroed in the output.
pub fn feature_norm<T: Scalar>(x: &Var<T>, weights: Option<&Array<T>>) -> Result<Var<T>> {
    let r = x.shape()[0];
    let eps = 1e-6;
    match weights {
        None => {
            let mean = x.mean_axis(0, true)?;
            let centered = x.add_b(&mean.neg()?)?;
            let var = centered.square()?.mean_axis(0, true)?;
            let inv = var.add_scalar(eps)?.sqrt()?.recip()?;
            Ok(centered.mul_b(&inv)?)
        }
        Some(w) => {
            debug_assert_eq!(w.shape(), &[r, 1]);
            let count: f64 = w.data().iter().map(|&v| v.to_f64()).sum();
            let denom = 1.0 / count.max(1.0);
            let wv = Var::constant(w.clone());
            let mean = x.mul_b(&wv)?.sum_axis(0, true)?.scale(denom)?;
            let centered = x.add_b(&mean.neg()?)?;
            let var = centered.square()?.mul_b(&wv)?.sum_axis(0, true)?.scale(denom)?;
            let inv = var.add_scalar(eps)?.sqrt()?.recip()?;
            Ok(centered.mul_b(&inv)?.mul_b(&wv)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_closed_form_and_zero_position() {
        let pe = positional_encoding::<f64>(4, 6).unwrap();
        // position 0: sin terms 0, cos terms 1
        for ch in 0..6 {
            let expect = if ch % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.data()[ch], expect);
        }
        for pos in 0..4 {
            for ch in 0..6 {
                let k = (ch / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * k / 6.0);
                let expect = if ch % 2 == 0 { angle.sin() } else { angle.cos() };
                assert!((pe.data()[pos * 6 + ch] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pe_rejects_odd_dim() {
        assert!(positional_encoding::<f64>(4, 5).is_err());
    }

    #[test]
    fn feature_norm_constant_feature_is_zero() {
        let x = Var::constant(Array::from_fn(&[5, 3], |i| {
            if i % 3 == 0 {
                7.7
            } else {
                (i % 7) as f64
            }
        }));
        let y = feature_norm(&x, None).unwrap();
        for r in 0..5 {
            assert!(y.value().data()[r * 3].abs() < 1e-9, "constant column must normalize to zero");
        }
    }

    #[test]
    fn feature_norm_matches_two_pass_oracle() {
        let x_data: Vec<f64> = (0..20).map(|i| ((i * 13) % 7) as f64 * 0.5 - 1.0).collect();
        let x = Var::constant(Array::from_vec(vec![5, 4], x_data.clone()).unwrap());
        let y = feature_norm(&x, None).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..5).map(|r| x_data[r * 4 + c]).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            let inv = 1.0 / (var + 1e-6).sqrt();
            for r in 0..5 {
                let expect = (col[r] - mean) * inv;
                assert!((y.value().data()[r * 4 + c] - expect).abs() < 1e-12);
            }
        }
    }
}
