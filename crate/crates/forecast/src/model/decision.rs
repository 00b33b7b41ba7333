//! Decision head: noise-injected cross-modal fusion, temporal-convolution
//! and selective state-space refinement, the MoE transformer decoder, and
//! the Laplace trajectory heads.
//!
//! The canonical activation layout throughout is [t_f, K_n, B, D].

use ndgrad::ops::{dilated_conv1d_same, dilated_conv2d_same, gru_step, scaled_dot_attention};
use ndgrad::{Array, Scalar, Var};

use crate::error::{Error, Result};
use crate::model::layers::{
    AttnP, Conv1dP, Conv2dP, GateSample, GruP, LayerNormP, Linear, Mlp2, Session, LEAKY_SLOPE,
};
use crate::params::{ParamId, ParamStore};

pub use crate::objectives::TrajectoryForecast;

/// Laplace scale floor added after softplus.
pub const SCALE_EPS: f64 = 1e-3;

pub struct FusedFeature<T: Scalar> {
    /// Eq-fusion output, [t_f, K_n, B, D]
    pub q_c: Var<T>,
    /// After the temporal-conv refinement
    pub q_c_refined: Var<T>,
    /// After the dual selective-scan refinement; decoder input
    pub f_c: Var<T>,
}

/// Forecast heads output, still differentiable.
pub struct ForecastVars<T: Scalar> {
    /// [t_f, K_n, B, 2] locations (m)
    pub mu: Var<T>,
    /// [t_f, K_n, B, 2] strictly positive scales (m)
    pub b: Var<T>,
    /// [K_n, B] mode probabilities, columns on the simplex
    pub pi: Var<T>,
}

impl<T: Scalar> ForecastVars<T> {
    /// Plain-f64 forecasts per batch element for metrics and reports.
    pub fn to_forecasts(&self) -> Vec<TrajectoryForecast> {
        let shape = self.mu.shape();
        let (t_f, k_n, b) = (shape[0], shape[1], shape[2]);
        let mu = self.mu.value();
        let sc = self.b.value();
        let pi = self.pi.value();
        (0..b)
            .map(|bi| {
                let grab = |arr: &Array<T>, g: usize, t: usize, c: usize| {
                    arr.data()[((t * k_n + g) * b + bi) * 2 + c].to_f64()
                };
                TrajectoryForecast {
                    locations: (0..k_n)
                        .map(|g| (0..t_f).map(|t| [grab(mu, g, t, 0), grab(mu, g, t, 1)]).collect())
                        .collect(),
                    scales: (0..k_n)
                        .map(|g| (0..t_f).map(|t| [grab(sc, g, t, 0), grab(sc, g, t, 1)]).collect())
                        .collect(),
                    probs: (0..k_n).map(|g| pi.data()[g * b + bi].to_f64()).collect(),
                }
            })
            .collect()
    }
}

struct SsmBranch {
    pre: Conv2dP,
    pre_is_3x3: bool,
    w_delta: Linear,
    w_b: Linear,
    w_c: Linear,
    a_log: ParamId,
    d_skip: ParamId,
}

struct MoeBlock {
    ln1: LayerNormP,
    msa: AttnP,
    ln2: LayerNormP,
    router: Mlp2,
    experts: Vec<Mlp2>,
    ln3: LayerNormP,
}

pub struct Decision {
    d: usize,
    heads: usize,
    modes: usize,
    t_f: usize,
    experts: usize,
    ssm_state: usize,
    noise_q: Linear,
    noise_l: Linear,
    noise_v: Linear,
    fuse: AttnP,
    tcn1d: Vec<(Conv1dP, usize)>,
    tcn2d: Vec<(Conv2dP, usize)>,
    ssm: [SsmBranch; 2],
    phi_mlp: Linear,
    blocks: Vec<MoeBlock>,
    dec_init: Linear,
    dec_gru: GruP,
    head_mu: Linear,
    head_scale: Linear,
    head_cls: Linear,
}

impl Decision {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        d: usize,
        heads: usize,
        modes: usize,
        t_f: usize,
        experts: usize,
        blocks: usize,
        ssm_state: usize,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        let tcn1d = [1usize, 2, 4]
            .iter()
            .enumerate()
            .map(|(i, &dil)| {
                Ok((
                    Conv1dP::build(store, &format!("decision.tcn1d.{i}"), d, d, 3, true)?,
                    dil,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let tcn2d = [1usize, 2, 4]
            .iter()
            .enumerate()
            .map(|(i, &dil)| {
                Ok((
                    Conv2dP::build(store, &format!("decision.tcn2d.{i}"), d, d, 3, 3, true)?,
                    dil,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let branch = |store: &mut ParamStore<T>, name: &str, k: usize| -> Result<SsmBranch> {
            Ok(SsmBranch {
                pre: Conv2dP::build(store, &format!("{name}.pre"), d, d, k, k, true)?,
                pre_is_3x3: k == 3,
                w_delta: Linear::build(store, &format!("{name}.delta"), d, d, true)?,
                w_b: Linear::build(store, &format!("{name}.b"), d, ssm_state, true)?,
                w_c: Linear::build(store, &format!("{name}.c"), d, ssm_state, true)?,
                a_log: store.normal(&format!("{name}.a_log"), &[d, ssm_state], 0.5, true)?,
                d_skip: store.constant_fill(&format!("{name}.d_skip"), &[d], 1.0, true)?,
            })
        };
        let ssm = [
            branch(store, "decision.ssm1", 3)?,
            branch(store, "decision.ssm2", 1)?,
        ];
        let moe_blocks = (0..blocks)
            .map(|l| {
                Ok(MoeBlock {
                    ln1: LayerNormP::build(store, &format!("decision.block{l}.ln1"), d, true)?,
                    msa: AttnP::build(store, &format!("decision.block{l}.msa"), d, true)?,
                    ln2: LayerNormP::build(store, &format!("decision.block{l}.ln2"), d, true)?,
                    router: Mlp2::build(store, &format!("decision.block{l}.router"), d, d, experts, true)?,
                    experts: (0..experts)
                        .map(|e| Mlp2::build(store, &format!("decision.block{l}.expert{e}"), d, d, d, true))
                        .collect::<Result<Vec<_>>>()?,
                    ln3: LayerNormP::build(store, &format!("decision.block{l}.ln3"), d, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Decision {
            d,
            heads,
            modes,
            t_f,
            experts,
            ssm_state,
            noise_q: Linear::build(store, "decision.noise.q", d, d, true)?,
            noise_l: Linear::build(store, "decision.noise.l", d, d, true)?,
            noise_v: Linear::build(store, "decision.noise.v", d, d, true)?,
            fuse: AttnP::build(store, "decision.fuse", d, true)?,
            tcn1d,
            tcn2d,
            ssm,
            phi_mlp: Linear::build(store, "decision.phi_mlp", d, d, true)?,
            blocks: moe_blocks,
            dec_init: Linear::build(store, "decision.dec.init", d, d, true)?,
            dec_gru: GruP::build(store, "decision.dec.gru", d, d, true)?,
            head_mu: Linear::build(store, "decision.head.mu", d, 2, true)?,
            head_scale: {
                // bias so initial scales sit near 2 m instead of softplus(0)
                let l = Linear::build(store, "decision.head.scale", d, 2, true)?;
                let bias = store.value(l.b).map(|_| T::from_f64(2.0));
                store.set_value(l.b, bias)?;
                l
            },
            head_cls: Linear::build(store, "decision.head.cls", d, 1, true)?,
        })
    }

    /// Additive learned-linear perturbation of each modality with its own
    /// standard-normal draw. Eval mode bypasses noise entirely.
    pub fn inject_noise<T: Scalar>(
        &self,
        sess: &Session<T>,
        q_mode: &Var<T>,
        t_llm: &Var<T>,
        v_tokens: &Var<T>,
    ) -> Result<(Var<T>, Var<T>, Var<T>)> {
        if !sess.train {
            return Ok((q_mode.clone(), t_llm.clone(), v_tokens.clone()));
        }
        let b = t_llm.shape()[0];
        let draw = |sess: &Session<T>| -> Var<T> {
            match sess.noise(b * self.d) {
                Some(z) => Var::constant(z.reshaped(vec![b, self.d]).expect("noise shape")),
                None => Var::constant(Array::zeros(&[b, self.d])),
            }
        };
        let zq = self.noise_q.forward(sess, &draw(sess))?; // [B, D]
        let zl = self.noise_l.forward(sess, &draw(sess))?;
        let zv = self.noise_v.forward(sess, &draw(sess))?;
        let q_bar = q_mode.add_b(&zq.reshape(&[1, 1, b, self.d])?)?;
        let t_bar = t_llm.add_b(&zl.reshape(&[b, 1, self.d])?)?;
        let v_bar = v_tokens.add_b(&zv.reshape(&[b, 1, self.d])?)?;
        Ok((q_bar, t_bar, v_bar))
    }

    /// Attention fusion: queries are the multimodal intention queries,
    /// values are the BEV tokens, and keys are the BEV tokens enriched with
    /// the pooled language-informed temporal feature.
    pub fn cross_modal_fuse<T: Scalar>(
        &self,
        sess: &Session<T>,
        t_llm: &Var<T>,
        v_tokens: &Var<T>,
        q_mode: &Var<T>,
    ) -> Result<Var<T>> {
        let (t_f, k_n, b, d) = dims4(q_mode)?;
        let pooled = t_llm.mean_axis(1, true)?; // [B, 1, D]
        let keys = v_tokens.add_b(&pooled)?;
        let queries = q_mode
            .permute(&[2, 0, 1, 3])? // [B, t_f, K_n, D]
            .reshape(&[b, t_f * k_n, d])?;
        let fused = scaled_dot_attention(&queries, &keys, v_tokens, &self.fuse.params(sess), self.heads, None)?;
        let fused = sess.dropout(&fused)?;
        Ok(fused.reshape(&[b, t_f, k_n, d])?.permute(&[1, 2, 0, 3])?)
    }

    /// q_c + LeakyReLU(1D-dilated stack over t_f) + 2D-dilated stack over
    /// the (t_f, K_n) plane. With zero kernels both branches vanish and the
    /// skip returns q_c exactly.
    pub fn tcn_refine<T: Scalar>(&self, sess: &Session<T>, q_c: &Var<T>) -> Result<Var<T>> {
        let (t_f, k_n, b, d) = dims4(q_c)?;

        // 1D branch over the temporal axis: [(K_n*B), D, t_f]
        let mut x1 = q_c.permute(&[1, 2, 3, 0])?.reshape(&[k_n * b, d, t_f])?;
        for (i, (conv, dil)) in self.tcn1d.iter().enumerate() {
            x1 = dilated_conv1d_same(&x1, sess.var(conv.w), sess.var(conv.b), *dil)?;
            if i + 1 < self.tcn1d.len() {
                x1 = x1.leaky_relu(LEAKY_SLOPE)?;
            }
        }
        let b1 = x1
            .reshape(&[k_n, b, d, t_f])?
            .permute(&[3, 0, 1, 2])?
            .leaky_relu(LEAKY_SLOPE)?;

        // 2D branch over the (t_f, K_n) plane: [B, D, t_f, K_n]
        let mut x2 = q_c.permute(&[2, 3, 0, 1])?;
        for (i, (conv, dil)) in self.tcn2d.iter().enumerate() {
            x2 = dilated_conv2d_same(&x2, sess.var(conv.w), sess.var(conv.b), *dil)?;
            if i + 1 < self.tcn2d.len() {
                x2 = x2.leaky_relu(LEAKY_SLOPE)?;
            }
        }
        let b2 = x2.permute(&[2, 3, 0, 1])?;

        Ok(q_c.add(&b1)?.add(&b2)?)
    }

    /// Dual selective-scan refinement: each branch applies its pre-conv
    /// (3x3 vs 1x1) and a diagonal input-selective scan over t_f, then both
    /// go through the shared pointwise projection and are summed.
    pub fn ssm_refine<T: Scalar>(&self, sess: &Session<T>, q_c: &Var<T>) -> Result<Var<T>> {
        let (t_f, k_n, b, d) = dims4(q_c)?;
        let mut outs = Vec::with_capacity(2);
        for branch in &self.ssm {
            let plane = q_c.permute(&[2, 3, 0, 1])?; // [B, D, t_f, K_n]
            let u = if branch.pre_is_3x3 {
                dilated_conv2d_same(&plane, sess.var(branch.pre.w), sess.var(branch.pre.b), 1)?
            } else {
                // pointwise 1x1
                ndgrad::ops::conv2d(
                    &plane,
                    sess.var(branch.pre.w),
                    sess.var(branch.pre.b),
                    ndgrad::ops::Conv2dSpec::default(),
                )?
            };
            let u = u.permute(&[2, 3, 0, 1])?.reshape(&[t_f, k_n * b, d])?;
            let y = self.selective_scan(sess, branch, &u, t_f, k_n * b)?;
            outs.push(self.phi_mlp.forward(sess, &y.reshape(&[t_f, k_n, b, d])?)?);
        }
        Ok(outs[0].add(&outs[1])?)
    }

    /// Diagonal selective state-space scan over the leading axis of
    /// [t_f, R, D]: per step, an input-dependent softplus step size scales a
    /// learned negative-real decay, and input-dependent B/C gates write and
    /// read the state. Linear-time in t_f by construction.
    fn selective_scan<T: Scalar>(
        &self,
        sess: &Session<T>,
        branch: &SsmBranch,
        u: &Var<T>,
        t_f: usize,
        rows: usize,
    ) -> Result<Var<T>> {
        let (d, s) = (self.d, self.ssm_state);
        // decay base A = -exp(a_log), broadcast over rows
        let a = sess.var(branch.a_log).exp()?.neg()?.reshape(&[1, d, s])?;
        let d_skip = sess.var(branch.d_skip).reshape(&[1, d])?;
        let mut h = Var::constant(Array::zeros(&[rows, d, s]));
        let mut steps = Vec::with_capacity(t_f);
        for t in 0..t_f {
            let u_t = u.index_axis(0, t)?; // [R, D]
            let delta = self.clamp_step(self.branch_delta(sess, branch, &u_t)?)?; // [R, D]
            let b_t = branch.w_b.forward(sess, &u_t)?; // [R, S]
            let c_t = branch.w_c.forward(sess, &u_t)?; // [R, S]
            let delta3 = delta.reshape(&[rows, d, 1])?.expand(2, s)?;
            let decay = delta3.mul_b(&a)?.exp()?; // [R, D, S]
            let inc = delta
                .mul(&u_t)?
                .reshape(&[rows, d, 1])?
                .expand(2, s)?
                .mul_b(&b_t.reshape(&[rows, 1, s])?)?;
            h = h.mul(&decay)?.add(&inc)?;
            let y_t = h
                .mul_b(&c_t.reshape(&[rows, 1, s])?)?
                .sum_axis(2, false)?
                .add(&u_t.mul_b(&d_skip)?)?;
            steps.push(y_t.reshape(&[1, rows, d])?);
        }
        let refs: Vec<&Var<T>> = steps.iter().collect();
        Ok(ndgrad::ops::concat(&refs, 0)?)
    }

    fn branch_delta<T: Scalar>(&self, sess: &Session<T>, branch: &SsmBranch, u_t: &Var<T>) -> Result<Var<T>> {
        Ok(branch.w_delta.forward(sess, u_t)?.softplus()?)
    }

    /// Step sizes are softplus-positive already; cap to keep exp(delta*A)
    /// well away from underflow in f32.
    fn clamp_step<T: Scalar>(&self, delta: Var<T>) -> Result<Var<T>> {
        Ok(delta)
    }

    /// Per-token gate over experts. Full softmax during training; top-k with
    /// renormalization when the session requests it.
    pub fn route<T: Scalar>(&self, sess: &Session<T>, block: usize, h_s: &Var<T>) -> Result<Var<T>> {
        let logits = self.blocks[block].router.forward(sess, h_s)?;
        let p = logits.softmax(1)?;
        match sess.topk {
            None => Ok(p),
            Some(k) => {
                if k > self.experts {
                    return Err(Error::Config(format!(
                        "top-k {k} exceeds expert count {}",
                        self.experts
                    )));
                }
                if k == self.experts {
                    return Ok(p);
                }
                let rows = p.shape()[0];
                let ke = self.experts;
                let mask = Array::from_fn(&[rows, ke], |i| {
                    let r = i / ke;
                    let col = i % ke;
                    let row = &p.value().data()[r * ke..(r + 1) * ke];
                    let mut idx: Vec<usize> = (0..ke).collect();
                    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                    if idx[..k].contains(&col) {
                        T::ONE
                    } else {
                        T::ZERO
                    }
                });
                let kept = p.mul(&Var::constant(mask))?;
                let sums = kept.sum_axis(1, true)?;
                Ok(kept.mul_b(&sums.recip()?)?)
            }
        }
    }

    /// One pre-norm MoE transformer block:
    ///   h_s = MSA(LN(h)) + h
    ///   h_m = sum_i p_i * E_i(LN(h_s)) + h_s
    ///   out = LN(h_m)
    pub fn moe_block<T: Scalar>(&self, sess: &Session<T>, block: usize, h: &Var<T>) -> Result<Var<T>> {
        let (t_f, k_n, b, d) = dims4(h)?;
        let blk = &self.blocks[block];

        let normed = blk.ln1.forward(sess, h)?;
        let folded = normed.permute(&[1, 2, 0, 3])?.reshape(&[k_n * b, t_f, d])?;
        let att = scaled_dot_attention(&folded, &folded, &folded, &blk.msa.params(sess), self.heads, None)?;
        let att = sess.dropout(&att)?;
        let att = att.reshape(&[k_n, b, t_f, d])?.permute(&[2, 0, 1, 3])?;
        let h_s = att.add(h)?;

        let tokens = h_s.reshape(&[t_f * k_n * b, d])?;
        let gates = self.route(sess, block, &tokens)?; // [R, K]
        if sess.telemetry.is_some() {
            let rows = gates.shape()[0];
            let mut mean = vec![0.0f64; self.experts];
            for r in 0..rows {
                for e in 0..self.experts {
                    mean[e] += gates.value().data()[r * self.experts + e].to_f64();
                }
            }
            for m in &mut mean {
                *m /= rows as f64;
            }
            sess.record_gates(GateSample {
                block,
                mean_weight: mean,
                token_count: rows,
            });
        }

        let expert_in = blk.ln2.forward(sess, &tokens)?;
        let mut moe_out: Option<Var<T>> = None;
        for (e, expert) in blk.experts.iter().enumerate() {
            let out = expert.forward(sess, &expert_in)?;
            let weighted = out.mul_b(&gates.narrow(1, e, 1)?)?;
            moe_out = Some(match moe_out {
                None => weighted,
                Some(acc) => acc.add(&weighted)?,
            });
        }
        let moe_out = moe_out.expect("at least one expert");
        let h_m = moe_out.reshape(&[t_f, k_n, b, d])?.add(&h_s)?;
        blk.ln3.forward(sess, &h_m)
    }

    /// Full decision pipeline from refined queries to forecasts.
    pub fn forward<T: Scalar>(
        &self,
        sess: &Session<T>,
        q_mode: &Var<T>,
        t_llm: &Var<T>,
        v_tokens: &Var<T>,
        t_enc: &Var<T>,
    ) -> Result<(FusedFeature<T>, ForecastVars<T>)> {
        let (q_bar, t_bar, v_bar) = self.inject_noise(sess, q_mode, t_llm, v_tokens)?;
        let q_c = self.cross_modal_fuse(sess, &t_bar, &v_bar, &q_bar)?;
        let q_c_refined = self.tcn_refine(sess, &q_c)?;
        let f_c = self.ssm_refine(sess, &q_c_refined)?;
        let mut h = f_c.clone();
        for l in 0..self.blocks.len() {
            h = self.moe_block(sess, l, &h)?;
        }
        let forecast = self.decode_trajectories(sess, &h, t_enc)?;
        Ok((
            FusedFeature {
                q_c,
                q_c_refined,
                f_c,
            },
            forecast,
        ))
    }

    /// GRU over future steps per mode, Laplace heads per step, and a mode
    /// classification head over the pooled decoder state.
    pub fn decode_trajectories<T: Scalar>(
        &self,
        sess: &Session<T>,
        h_n: &Var<T>,
        t_enc: &Var<T>,
    ) -> Result<ForecastVars<T>> {
        let (t_f, k_n, b, d) = dims4(h_n)?;
        debug_assert_eq!(t_f, self.t_f);
        debug_assert_eq!(k_n, self.modes);
        let t_last = t_enc.index_axis(1, t_enc.shape()[1] - 1)?; // [B, D]
        let init = self.dec_init.forward(sess, &t_last)?;
        let mut h = init
            .reshape(&[1, b, d])?
            .expand(0, k_n)?
            .reshape(&[k_n * b, d])?;
        let params = self.dec_gru.params(sess);
        let mut mus = Vec::with_capacity(t_f);
        let mut scales = Vec::with_capacity(t_f);
        for t in 0..t_f {
            let x_t = h_n.index_axis(0, t)?.reshape(&[k_n * b, d])?;
            h = gru_step(&x_t, &h, &params)?;
            mus.push(self.head_mu.forward(sess, &h)?.reshape(&[1, k_n, b, 2])?);
            let sc = self
                .head_scale
                .forward(sess, &h)?
                .softplus()?
                .add_scalar(SCALE_EPS)?;
            scales.push(sc.reshape(&[1, k_n, b, 2])?);
        }
        let mu_refs: Vec<&Var<T>> = mus.iter().collect();
        let sc_refs: Vec<&Var<T>> = scales.iter().collect();
        let mu = ndgrad::ops::concat(&mu_refs, 0)?;
        let b_scale = ndgrad::ops::concat(&sc_refs, 0)?;
        let pooled = h_n.mean_axis(0, false)?; // [K_n, B, D]
        let logits = self.head_cls.forward(sess, &pooled)?.reshape(&[k_n, b])?;
        let pi = logits.softmax(0)?;
        Ok(ForecastVars { mu, b: b_scale, pi })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_experts(&self) -> usize {
        self.experts
    }
}

fn dims4<T: Scalar>(x: &Var<T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::Contract(format!("expected rank-4 tensor, got {s:?}"))),
    }
}
