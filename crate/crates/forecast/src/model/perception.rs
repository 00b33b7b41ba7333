//! Scene perception: per-modality encoders and their fusion into the latent
//! scene state.
//!
//! Layouts follow the documented contracts: t_enc [B,T,D], n_enc [B,N,D],
//! l_enc [N_l,B,D], s_enc [T,B,D]. No positional encoding is applied along
//! the agent axis, so shuffling neighbors leaves s_enc (and everything
//! downstream) unchanged.

use ndgrad::ops::{conv2d, gru_step, scaled_dot_attention, Conv2dSpec};
use ndgrad::{Array, Scalar, Var};

use crate::batch::{Batch, LANE_FEAT_DIM};
use crate::error::Result;
use crate::model::layers::{AttnP, Conv2dP, GruP, LayerNormP, Mlp2, Session, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::scenes::STATE_DIM;

pub struct Perception {
    d: usize,
    heads: usize,
    tgt_embed: Mlp2,
    tgt_gru: GruP,
    nbr_embed: Mlp2,
    nbr_gru: GruP,
    lane_embed: Mlp2,
    gat: Vec<(AttnP, LayerNormP)>,
    bev_convs: Vec<(Conv2dP, Conv2dSpec)>,
    sa_target: (AttnP, LayerNormP),
    sa_neighbors: (AttnP, LayerNormP),
    sa_lanes: (AttnP, LayerNormP),
    ca_lanes: (AttnP, LayerNormP),
    ca_neighbors: (AttnP, LayerNormP),
}

pub struct SceneEncoding<T: Scalar> {
    /// [B, T, D]
    pub t_enc: Var<T>,
    /// [B, N, D]; fully-masked agents hold exact zero rows
    pub n_enc: Var<T>,
    /// [N_l, B, D]
    pub l_enc: Var<T>,
    /// [B, C', H', W']
    pub v_enc: Var<T>,
    /// [B, M, D] flattened BEV tokens
    pub v_tokens: Var<T>,
    /// [T, B, D]
    pub s_enc: Var<T>,
}

/// Conv plan: two kernel-4 layers then three kernel-3 layers; the first
/// four stride 2. Channel widths ramp up to the embedding dim.
fn bev_plan(d: usize) -> [(usize, usize, usize); 5] {
    let c0 = (d / 4).max(4);
    let c1 = (d / 2).max(8);
    // (out_channels, kernel, stride)
    [(c0, 4, 2), (c1, 4, 2), (d, 3, 2), (d, 3, 2), (d, 3, 1)]
}

impl Perception {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, d: usize, heads: usize) -> Result<Self> {
        let mut bev_convs = Vec::new();
        let mut c_in = 3;
        for (i, (c_out, k, s)) in bev_plan(d).into_iter().enumerate() {
            let conv = Conv2dP::build(store, &format!("perception.bev.{i}"), c_out, c_in, k, k, true)?;
            bev_convs.push((conv, Conv2dSpec::strided(s, 1)));
            c_in = c_out;
        }
        Ok(Perception {
            d,
            heads,
            tgt_embed: Mlp2::build(store, "perception.target.embed", STATE_DIM, d, d, true)?,
            tgt_gru: GruP::build(store, "perception.target.gru", d, d, true)?,
            nbr_embed: Mlp2::build(store, "perception.neighbor.embed", STATE_DIM, d, d, true)?,
            nbr_gru: GruP::build(store, "perception.neighbor.gru", d, d, true)?,
            lane_embed: Mlp2::build(store, "perception.lane.embed", LANE_FEAT_DIM, d, d, true)?,
            gat: (0..2)
                .map(|i| {
                    Ok((
                        AttnP::build(store, &format!("perception.lane.gat{i}"), d, true)?,
                        LayerNormP::build(store, &format!("perception.lane.gat{i}.ln"), d, true)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?,
            bev_convs,
            sa_target: (
                AttnP::build(store, "perception.sa.target", d, true)?,
                LayerNormP::build(store, "perception.sa.target.ln", d, true)?,
            ),
            sa_neighbors: (
                AttnP::build(store, "perception.sa.neighbor", d, true)?,
                LayerNormP::build(store, "perception.sa.neighbor.ln", d, true)?,
            ),
            sa_lanes: (
                AttnP::build(store, "perception.sa.lane", d, true)?,
                LayerNormP::build(store, "perception.sa.lane.ln", d, true)?,
            ),
            ca_lanes: (
                AttnP::build(store, "perception.fuse.lane", d, true)?,
                LayerNormP::build(store, "perception.fuse.lane.ln", d, true)?,
            ),
            ca_neighbors: (
                AttnP::build(store, "perception.fuse.neighbor", d, true)?,
                LayerNormP::build(store, "perception.fuse.neighbor.ln", d, true)?,
            ),
        })
    }

    pub fn forward<T: Scalar>(&self, sess: &Session<T>, batch: &Batch<T>) -> Result<SceneEncoding<T>> {
        let t_enc = self.encode_target(sess, batch)?;
        let n_enc = self.encode_neighbors(sess, batch)?;
        let l_enc_bt = self.encode_lanes(sess, batch)?;
        let (v_enc, v_tokens) = self.encode_bev(sess, batch)?;
        let s_enc = self.fuse_scene(sess, batch, &t_enc, &n_enc, &l_enc_bt)?;
        Ok(SceneEncoding {
            t_enc,
            n_enc,
            l_enc: l_enc_bt.permute(&[1, 0, 2])?,
            v_enc,
            v_tokens,
            s_enc,
        })
    }

    /// Per-frame MLP embedding then a masked GRU over history.
    pub fn encode_target<T: Scalar>(&self, sess: &Session<T>, batch: &Batch<T>) -> Result<Var<T>> {
        let emb = self.tgt_embed.forward(sess, &Var::constant(batch.target_hist.clone()))?;
        let (all, _) = masked_gru(sess, &self.tgt_gru, &emb, &batch.target_mask)?;
        Ok(all)
    }

    /// Per-agent temporal encoding; agents with no observed frame produce an
    /// exactly-zero row.
    pub fn encode_neighbors<T: Scalar>(&self, sess: &Session<T>, batch: &Batch<T>) -> Result<Var<T>> {
        let (b, n, t) = (batch.b, batch.n_max, batch.t_hist);
        if n == 0 {
            return Ok(Var::constant(Array::zeros(&[b, 0, self.d])));
        }
        let x = Var::constant(batch.neighbor_hist.clone()).reshape(&[b * n, t, STATE_DIM])?;
        let emb = self.nbr_embed.forward(sess, &x)?;
        let mask = batch
            .neighbor_frame_mask
            .reshaped(vec![b * n, t])
            .expect("mask reshape");
        let (_, last) = masked_gru(sess, &self.nbr_gru, &emb, &mask)?;
        // zero out padded/never-observed agents exactly
        let agent_mask = batch.neighbor_mask.reshaped(vec![b * n, 1]).expect("agent mask");
        Ok(last.mul_b(&Var::constant(agent_mask))?.reshape(&[b, n, self.d])?)
    }

    /// Lane nodes through an MLP then two graph-attention rounds over the
    /// per-polyline chain adjacency. Returns [B, L, D].
    pub fn encode_lanes<T: Scalar>(&self, sess: &Session<T>, batch: &Batch<T>) -> Result<Var<T>> {
        let (b, l) = (batch.b, batch.l_max);
        if l == 0 {
            return Ok(Var::constant(Array::zeros(&[b, 0, self.d])));
        }
        let mut x = self.lane_embed.forward(sess, &Var::constant(batch.lane_feat.clone()))?;
        let row = row_any_mask(&batch.lane_adj);
        for (attn, ln) in &self.gat {
            let a = scaled_dot_attention(&x, &x, &x, &attn.params(sess), self.heads, Some(&batch.lane_adj))?;
            let a = sess.dropout(&a)?;
            let contrib = ln.forward(sess, &a)?.mul_b(&Var::constant(row.clone()))?;
            x = x.add(&contrib)?;
        }
        // keep padded node rows exactly zero
        let node_mask = batch.lane_mask.reshaped(vec![b, l, 1]).expect("lane mask");
        Ok(x.mul_b(&Var::constant(node_mask))?)
    }

    /// CNN feature map plus its attention-ready token view.
    pub fn encode_bev<T: Scalar>(&self, sess: &Session<T>, batch: &Batch<T>) -> Result<(Var<T>, Var<T>)> {
        let mut x = Var::constant(batch.bev.clone());
        let n_layers = self.bev_convs.len();
        for (i, (conv, spec)) in self.bev_convs.iter().enumerate() {
            x = conv2d(&x, sess.var(conv.w), sess.var(conv.b), *spec)?;
            if i + 1 < n_layers {
                x = sess.dropout(&x.leaky_relu(LEAKY_SLOPE)?)?;
            }
        }
        let shape = x.shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let tokens = x.reshape(&[b, c, h * w])?.permute(&[0, 2, 1])?;
        Ok((x, tokens))
    }

    /// Self-attention within each modality, then the target's temporal
    /// tokens read lane and neighbor context via residual cross-attention.
    /// Empty modalities are bypassed entirely.
    pub fn fuse_scene<T: Scalar>(
        &self,
        sess: &Session<T>,
        batch: &Batch<T>,
        t_enc: &Var<T>,
        n_enc: &Var<T>,
        l_enc: &Var<T>,
    ) -> Result<Var<T>> {
        let (b, t) = (batch.b, batch.t_hist);
        let (sa_t, sa_t_ln) = &self.sa_target;
        let a = scaled_dot_attention(t_enc, t_enc, t_enc, &sa_t.params(sess), self.heads, None)?;
        let a = sess.dropout(&a)?;
        let mut s = t_enc.add(&sa_t_ln.forward(sess, &a)?)?;

        if batch.l_max > 0 {
            let (sa_l, sa_l_ln) = &self.sa_lanes;
            let lane_self_mask = outer_mask(&batch.lane_mask);
            let row = row_any_mask(&lane_self_mask);
            let la = scaled_dot_attention(l_enc, l_enc, l_enc, &sa_l.params(sess), self.heads, Some(&lane_self_mask))?;
            let la = sess.dropout(&la)?;
            let l_sa = l_enc.add(&sa_l_ln.forward(sess, &la)?.mul_b(&Var::constant(row))?)?;

            let (ca, ca_ln) = &self.ca_lanes;
            let key_mask = key_mask(&batch.lane_mask, t);
            let any = any_batch_mask(&batch.lane_mask, &[b, 1, 1]);
            let x = scaled_dot_attention(&s, &l_sa, &l_sa, &ca.params(sess), self.heads, Some(&key_mask))?;
            let x = sess.dropout(&x)?;
            s = s.add(&ca_ln.forward(sess, &x)?.mul_b(&Var::constant(any))?)?;
        }

        if batch.n_max > 0 {
            let (sa_n, sa_n_ln) = &self.sa_neighbors;
            let nbr_self_mask = outer_mask(&batch.neighbor_mask);
            let row = row_any_mask(&nbr_self_mask);
            let na = scaled_dot_attention(n_enc, n_enc, n_enc, &sa_n.params(sess), self.heads, Some(&nbr_self_mask))?;
            let na = sess.dropout(&na)?;
            let n_sa = n_enc.add(&sa_n_ln.forward(sess, &na)?.mul_b(&Var::constant(row))?)?;

            let (ca, ca_ln) = &self.ca_neighbors;
            let key_mask = key_mask(&batch.neighbor_mask, t);
            let any = any_batch_mask(&batch.neighbor_mask, &[b, 1, 1]);
            let x = scaled_dot_attention(&s, &n_sa, &n_sa, &ca.params(sess), self.heads, Some(&key_mask))?;
            let x = sess.dropout(&x)?;
            s = s.add(&ca_ln.forward(sess, &x)?.mul_b(&Var::constant(any))?)?;
        }

        Ok(s.permute(&[1, 0, 2])?)
    }
}

/// Masked GRU over the middle (time) axis of [R, T, D_in] with mask [R, T]:
/// unobserved frames carry the hidden state through unchanged. Returns all
/// per-step hiddens [R, T, D] and the final hidden [R, D].
///
/// Input projections for all gates and steps are batched into one matmul
/// and the z/r recurrent maps are fused; per matrix column this performs
/// the same accumulation order as a plain gru_step loop, so results are
/// bit-identical to it (asserted in tests).
pub fn masked_gru<T: Scalar>(
    sess: &Session<T>,
    gru: &GruP,
    x: &Var<T>,
    mask: &Array<T>,
) -> Result<(Var<T>, Var<T>)> {
    let shape = x.shape().to_vec();
    let (r, t) = (shape[0], shape[1]);
    let d = sess.var(gru.bz).shape()[0];
    let d_in = shape[2];

    let w_all = ndgrad::ops::concat(&[sess.var(gru.wz), sess.var(gru.wr), sess.var(gru.wh)], 1)?;
    let xw = x.reshape(&[r * t, d_in])?.matmul(&w_all)?.reshape(&[r, t, 3 * d])?;
    let u_zr = ndgrad::ops::concat(&[sess.var(gru.uz), sess.var(gru.ur)], 1)?;

    let mut h = Var::constant(Array::zeros(&[r, d]));
    let mut steps = Vec::with_capacity(t);
    for ti in 0..t {
        let xw_t = xw.index_axis(1, ti)?; // [R, 3d]
        let hu = h.matmul(&u_zr)?; // [R, 2d]
        let z = xw_t
            .narrow(1, 0, d)?
            .add(&hu.narrow(1, 0, d)?)?
            .add_bias(sess.var(gru.bz))?
            .sigmoid()?;
        let rg = xw_t
            .narrow(1, d, d)?
            .add(&hu.narrow(1, d, d)?)?
            .add_bias(sess.var(gru.br))?
            .sigmoid()?;
        let hc = xw_t
            .narrow(1, 2 * d, d)?
            .add(&rg.mul(&h)?.matmul(sess.var(gru.uh))?)?
            .add_bias(sess.var(gru.bh))?
            .tanh()?;
        let h_new = z.neg()?.add_scalar(1.0)?.mul(&h)?.add(&z.mul(&hc)?)?;

        let m = Array::from_fn(&[r, 1], |i| mask.data()[i * t + ti]);
        let keep = m.map(|v| T::ONE - v);
        h = h_new
            .mul_b(&Var::constant(m))?
            .add(&h.mul_b(&Var::constant(keep))?)?;
        steps.push(h.reshape(&[r, 1, d])?);
    }
    let refs: Vec<&Var<T>> = steps.iter().collect();
    let all = ndgrad::ops::concat(&refs, 1)?;
    Ok((all, h))
}

/// Reference masked GRU built from plain gru_step calls; the fused path
/// above must match it exactly.
pub fn masked_gru_reference<T: Scalar>(
    sess: &Session<T>,
    gru: &GruP,
    x: &Var<T>,
    mask: &Array<T>,
) -> Result<(Var<T>, Var<T>)> {
    let shape = x.shape().to_vec();
    let (r, t, d) = (shape[0], shape[1], sess.var(gru.bz).shape()[0]);
    let params = gru.params(sess);
    let mut h = Var::constant(Array::zeros(&[r, d]));
    let mut steps = Vec::with_capacity(t);
    for ti in 0..t {
        let x_t = x.index_axis(1, ti)?;
        let h_new = gru_step(&x_t, &h, &params)?;
        let m = Array::from_fn(&[r, 1], |i| mask.data()[i * t + ti]);
        let keep = m.map(|v| T::ONE - v);
        h = h_new
            .mul_b(&Var::constant(m))?
            .add(&h.mul_b(&Var::constant(keep))?)?;
        steps.push(h.reshape(&[r, 1, d])?);
    }
    let refs: Vec<&Var<T>> = steps.iter().collect();
    let all = ndgrad::ops::concat(&refs, 1)?;
    Ok((all, h))
}

/// mask [B,K] -> pairwise validity [B,K,K].
pub fn outer_mask<T: Scalar>(m: &Array<T>) -> Array<T> {
    let (b, k) = (m.shape()[0], m.shape()[1]);
    Array::from_fn(&[b, k, k], |i| {
        let bi = i / (k * k);
        let rest = i % (k * k);
        m.data()[bi * k + rest / k] * m.data()[bi * k + rest % k]
    })
}

/// mask [B,K] -> key mask [B,Lq,K] shared across query rows.
pub fn key_mask<T: Scalar>(m: &Array<T>, lq: usize) -> Array<T> {
    let (b, k) = (m.shape()[0], m.shape()[1]);
    Array::from_fn(&[b, lq, k], |i| m.data()[(i / (lq * k)) * k + i % k])
}

/// Per-query-row validity (any valid key) in a shape broadcastable over the
/// attention output, derived from a [B,Lq,K] or [B,K,K] mask.
pub fn row_any_mask<T: Scalar>(mask: &Array<T>) -> Array<T> {
    let (b, lq, k) = (mask.shape()[0], mask.shape()[1], mask.shape()[2]);
    Array::from_fn(&[b, lq, 1], |i| {
        let row = &mask.data()[i * k..(i + 1) * k];
        if row.iter().any(|&v| v != T::ZERO) {
            T::ONE
        } else {
            T::ZERO
        }
    })
}

/// 1 where the batch element has any valid entry, broadcast shape `shape`.
pub fn any_batch_mask<T: Scalar>(m: &Array<T>, shape: &[usize]) -> Array<T> {
    let (b, k) = (m.shape()[0], m.shape()[1]);
    debug_assert_eq!(shape[0], b);
    let per_b: Vec<T> = (0..b)
        .map(|bi| {
            if m.data()[bi * k..(bi + 1) * k].iter().any(|&v| v != T::ZERO) {
                T::ONE
            } else {
                T::ZERO
            }
        })
        .collect();
    let inner: usize = shape[1..].iter().product();
    Array::from_fn(shape, |i| per_b[i / inner])
}
