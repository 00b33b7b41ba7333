//! Training: Adam with cosine-annealed learning rate, winner-takes-all
//! multitask losses, deterministic batch order, and loss logging.

use ndgrad::{Array, RngStream, Scalar, Tape, Var};

use crate::batch::{assemble, Batch};
use crate::config::{LossProfile, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ForecastVars, Session, WorldModel};
use crate::objectives::{LossReport, LossWeights};
use crate::params::{ParamId, ParamStore};
use crate::scenes::Scene;

// rng stream layout: shuffling uses epoch-indexed streams; forward passes
// use step-indexed streams offset far away
const STREAM_SHUFFLE_BASE: u64 = 1 << 20;
const STREAM_FORWARD_BASE: u64 = 1 << 24;

pub struct Adam<T: Scalar> {
    ids: Vec<ParamId>,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let ids = store.trainable_ids();
        let m = ids.iter().map(|&id| Array::zeros(store.value(id).shape())).collect();
        let v = ids.iter().map(|&id| Array::zeros(store.value(id).shape())).collect();
        Adam {
            ids,
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update over pre-clipped gradients aligned with `ids()`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Array<T>], lr: f64) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::Contract(format!(
                "adam: {} grads for {} params",
                grads.len(),
                self.ids.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_b1 = T::from_f64(1.0 - self.beta1);
        let one_b2 = T::from_f64(1.0 - self.beta2);
        for (i, (&id, g)) in self.ids.iter().zip(grads).enumerate() {
            let mv = Array::from_fn(g.shape(), |k| {
                self.m[i].data()[k] * b1 + g.data()[k] * one_b1
            });
            let vv = Array::from_fn(g.shape(), |k| {
                self.v[i].data()[k] * b2 + g.data()[k] * g.data()[k] * one_b2
            });
            let old = store.value(id).clone();
            let lr_t = T::from_f64(lr / bc1);
            let eps = T::from_f64(self.eps);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let updated = Array::from_fn(old.shape(), |k| {
                let vhat = (vv.data()[k] * inv_bc2).sqrt() + eps;
                old.data()[k] - lr_t * mv.data()[k] / vhat
            });
            store.set_value(id, updated)?;
            self.m[i] = mv;
            self.v[i] = vv;
        }
        Ok(())
    }
}

/// Cosine annealing from learning_rate down to eta_min over t_max epochs,
/// held at eta_min afterwards.
pub fn cosine_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let frac = (epoch.min(cfg.t_max)) as f64 / cfg.t_max as f64;
    cfg.eta_min + 0.5 * (cfg.learning_rate - cfg.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Clip gradients to a global L2 norm; returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Array<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.map(|v| v * scale);
        }
    }
    norm
}

/// Winner-takes-all multitask loss on one batch. Returns the scalar loss
/// var plus the numeric report.
pub fn compute_loss<T: Scalar>(
    cfg: &TrainConfig,
    forecast: &ForecastVars<T>,
    batch: &Batch<T>,
) -> Result<(Var<T>, LossReport)> {
    let (t_f, k_n, b) = (batch.t_f, cfg.modes, batch.b);
    let w = LossWeights::default();

    // ground truth as [t_f, B, 2]
    let gt = Var::constant(batch.future.clone()).permute(&[1, 0, 2])?;

    // winner mode per sample by ADE on values
    let mu = forecast.mu.value();
    let fut = batch.future.data();
    let mut winners = Vec::with_capacity(b);
    for bi in 0..b {
        let mut best = 0usize;
        let mut best_ade = f64::INFINITY;
        for g in 0..k_n {
            let mut acc = 0.0;
            for t in 0..t_f {
                let base = ((t * k_n + g) * b + bi) * 2;
                let dx = mu.data()[base].to_f64() - fut[(bi * t_f + t) * 2].to_f64();
                let dy = mu.data()[base + 1].to_f64() - fut[(bi * t_f + t) * 2 + 1].to_f64();
                acc += (dx * dx + dy * dy).sqrt();
            }
            if acc < best_ade {
                best_ade = acc;
                best = g;
            }
        }
        winners.push(best);
    }

    // select winner-mode trajectories: [t_f, B, 2]
    let mut mu_sel = Vec::with_capacity(b);
    let mut b_sel = Vec::with_capacity(b);
    for (bi, &g) in winners.iter().enumerate() {
        mu_sel.push(forecast.mu.narrow(1, g, 1)?.narrow(2, bi, 1)?);
        b_sel.push(forecast.b.narrow(1, g, 1)?.narrow(2, bi, 1)?);
    }
    let mu_refs: Vec<&Var<T>> = mu_sel.iter().collect();
    let b_refs: Vec<&Var<T>> = b_sel.iter().collect();
    let mu_w = ndgrad::ops::concat(&mu_refs, 2)?.reshape(&[t_f, b, 2])?;
    let b_w = ndgrad::ops::concat(&b_refs, 2)?.reshape(&[t_f, b, 2])?;

    let diff = mu_w.sub(&gt)?;
    let sq_norm = diff.square()?.sum_axis(2, false)?; // [t_f, B]
    let l_ade = sq_norm.add_scalar(1e-12)?.sqrt()?.mean_all()?;

    // classification against the winner index
    let onehot = Array::from_fn(&[k_n, b], |i| {
        if i / b == winners[i % b] {
            T::ONE
        } else {
            T::ZERO
        }
    });
    let picked = forecast.pi.mul(&Var::constant(onehot))?.sum_axis(0, false)?; // [B]
    let l_cls = picked.add_scalar(1e-12)?.ln()?.neg()?.mean_all()?;

    let (total, report) = match cfg.loss {
        LossProfile::Nuscenes => {
            // Laplace NLL on the winner mode: log(2b) + |y - mu| / b
            let log_term = b_w.scale(2.0)?.ln()?;
            let abs_term = diff.abs()?.div(&b_w)?;
            let l_reg = log_term.add(&abs_term)?.mean_all()?;
            let total = l_ade
                .add(&l_reg.scale(w.lambda1)?)?
                .add(&l_cls.scale(w.lambda2)?)?;
            let report = LossReport {
                profile: cfg.loss,
                total: total.value().first().to_f64(),
                regression: l_ade.value().first().to_f64(),
                nll: l_reg.value().first().to_f64(),
                classification: l_cls.value().first().to_f64(),
            };
            (total, report)
        }
        LossProfile::Rmse => {
            let l_mse = sq_norm.mean_all()?;
            let total = l_mse.scale(w.gamma1)?.add(&l_cls.scale(w.gamma2)?)?;
            let report = LossReport {
                profile: cfg.loss,
                total: total.value().first().to_f64(),
                regression: l_mse.value().first().to_f64(),
                nll: 0.0,
                classification: l_cls.value().first().to_f64(),
            };
            (total, report)
        }
    };
    Ok((total, report))
}

#[derive(Debug, Clone)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

/// CSV with header `epoch,lr,total,regression,nll,classification`.
pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,lr,total,regression,nll,classification\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.report.total, e.report.regression, e.report.nll, e.report.classification
        ));
    }
    out
}

/// Train in place. Deterministic for a fixed (config, corpus) pair: batch
/// order, dropout, and noise all derive from the config seed. Returns the
/// per-epoch loss log and the final rng stream counter.
pub fn train<T: Scalar>(model: &mut WorldModel<T>, scenes: &[Scene]) -> Result<(Vec<EpochLoss>, u64)> {
    if scenes.is_empty() {
        return Err(Error::Contract("train: empty corpus".into()));
    }
    let cfg = model.cfg.clone();
    let mut adam = Adam::new(&model.store);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(&cfg, epoch);
        let mut shuffle_rng = RngStream::new(cfg.seed, STREAM_SHUFFLE_BASE + epoch as u64);
        let order = shuffle_rng.permutation(scenes.len());
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let batch = assemble::<T>(&refs, &cfg)?;
            let tape = Tape::new();
            let sess: Session<T> = model.session_train(
                &tape,
                RngStream::new(cfg.seed, STREAM_FORWARD_BASE + global_step),
            );
            let output = model.forward(&sess, &batch)?;
            let (total, report) = compute_loss(&cfg, &output.forecast, &batch)?;
            if !report.total.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = tape.backward(&total)?;
            let mut grad_arrays: Vec<Array<T>> = adam
                .ids()
                .to_vec()
                .iter()
                .map(|&id| {
                    let var = sess.pv.var(id);
                    grads.get_or_zeros(var)
                })
                .collect();
            clip_global_norm(&mut grad_arrays, cfg.grad_clip);
            adam.step(&mut model.store, &grad_arrays, lr)?;

            sums.0 += report.total;
            sums.1 += report.regression;
            sums.2 += report.nll;
            sums.3 += report.classification;
            batches += 1;
            global_step += 1;
        }

        let n = batches as f64;
        log.push(EpochLoss {
            epoch,
            lr,
            report: LossReport {
                profile: cfg.loss,
                total: sums.0 / n,
                regression: sums.1 / n,
                nll: sums.2 / n,
                classification: sums.3 / n,
            },
        });
    }
    Ok((log, STREAM_FORWARD_BASE + global_step))
}
