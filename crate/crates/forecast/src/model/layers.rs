//! Thin layer wrappers binding ParamStore ids to ndgrad ops, plus the
//! per-forward Session (mode, rng, telemetry).

use std::cell::RefCell;

use ndgrad::ops::{dropout, AttentionParams, GruParams};
use ndgrad::{Array, RngStream, Scalar, Var};

use crate::error::Result;
use crate::params::{ParamId, ParamStore, ParamVars};

/// Per-forward context. Training mode turns dropout and noise injection on;
/// both draw from the session stream so a fixed seed fixes the pass.
pub struct Session<T: Scalar> {
    pub pv: ParamVars<T>,
    pub train: bool,
    pub rng: Option<RefCell<RngStream>>,
    pub telemetry: Option<RefCell<Vec<GateSample>>>,
    pub topk: Option<usize>,
    pub dropout_rate: f64,
}

impl<T: Scalar> Session<T> {
    pub fn eval(pv: ParamVars<T>, dropout_rate: f64) -> Self {
        Session {
            pv,
            train: false,
            rng: None,
            telemetry: None,
            topk: None,
            dropout_rate,
        }
    }

    pub fn train(pv: ParamVars<T>, dropout_rate: f64, rng: RngStream) -> Self {
        Session {
            pv,
            train: true,
            rng: Some(RefCell::new(rng)),
            telemetry: None,
            topk: None,
            dropout_rate,
        }
    }

    pub fn with_telemetry(mut self) -> Self {
        self.telemetry = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn with_topk(mut self, k: Option<usize>) -> Self {
        self.topk = k;
        self
    }

    pub fn var(&self, id: ParamId) -> &Var<T> {
        self.pv.var(id)
    }

    pub fn dropout(&self, x: &Var<T>) -> Result<Var<T>> {
        match (&self.rng, self.train) {
            (Some(rng), true) => Ok(dropout(x, self.dropout_rate, &mut rng.borrow_mut(), true)?),
            _ => Ok(x.clone()),
        }
    }

    /// A standard-normal draw vector [n], or None outside training.
    pub fn noise(&self, n: usize) -> Option<Array<T>> {
        match (&self.rng, self.train) {
            (Some(rng), true) => {
                let mut r = rng.borrow_mut();
                Some(Array::from_fn(&[n], |_| T::from_f64(r.normal())))
            }
            _ => None,
        }
    }

    pub fn record_gates(&self, sample: GateSample) {
        if let Some(t) = &self.telemetry {
            t.borrow_mut().push(sample);
        }
    }

    pub fn take_gates(&self) -> Vec<GateSample> {
        self.telemetry
            .as_ref()
            .map(|t| t.borrow_mut().drain(..).collect())
            .unwrap_or_default()
    }
}

/// Mean gate weight per expert over the tokens of one block forward.
#[derive(Debug, Clone)]
pub struct GateSample {
    pub block: usize,
    pub mean_weight: Vec<f64>,
    pub token_count: usize,
}

#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.xavier(&format!("{name}.w"), fan_in, fan_out, trainable)?,
            b: store.zeros(&format!("{name}.b"), &[fan_out], trainable)?,
        })
    }

    /// Applies to the last axis; leading axes are folded and restored.
    pub fn forward<T: Scalar>(&self, sess: &Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        let d_in = *shape.last().expect("linear input rank >= 1");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let out = x
            .reshape(&[rows, d_in])?
            .matmul(sess.var(self.w))?
            .add_bias(sess.var(self.b))?;
        let d_out = out.shape()[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        Ok(out.reshape(&out_shape)?)
    }
}

/// Two-layer MLP with LeakyReLU(0.01) between the layers.
#[derive(Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Mlp2 {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Mlp2 {
            l1: Linear::build(store, &format!("{name}.0"), d_in, d_hidden, trainable)?,
            l2: Linear::build(store, &format!("{name}.1"), d_hidden, d_out, trainable)?,
        })
    }

    pub fn forward<T: Scalar>(&self, sess: &Session<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.l1.forward(sess, x)?.leaky_relu(LEAKY_SLOPE)?;
        self.l2.forward(sess, &h)
    }
}

#[derive(Clone, Copy)]
pub struct LayerNormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormP {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, trainable: bool) -> Result<Self> {
        Ok(LayerNormP {
            gain: store.constant_fill(&format!("{name}.gain"), &[d], 1.0, trainable)?,
            bias: store.zeros(&format!("{name}.bias"), &[d], trainable)?,
        })
    }

    pub fn forward<T: Scalar>(&self, sess: &Session<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(x.layer_norm(sess.var(self.gain), sess.var(self.bias), LN_EPS)?)
    }
}

#[derive(Clone, Copy)]
pub struct AttnP {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnP {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, trainable: bool) -> Result<Self> {
        Ok(AttnP {
            wq: store.xavier(&format!("{name}.wq"), d, d, trainable)?,
            bq: store.zeros(&format!("{name}.bq"), &[d], trainable)?,
            wk: store.xavier(&format!("{name}.wk"), d, d, trainable)?,
            bk: store.zeros(&format!("{name}.bk"), &[d], trainable)?,
            wv: store.xavier(&format!("{name}.wv"), d, d, trainable)?,
            bv: store.zeros(&format!("{name}.bv"), &[d], trainable)?,
            wo: store.xavier(&format!("{name}.wo"), d, d, trainable)?,
            bo: store.zeros(&format!("{name}.bo"), &[d], trainable)?,
        })
    }

    pub fn params<T: Scalar>(&self, sess: &Session<T>) -> AttentionParams<T> {
        AttentionParams {
            wq: sess.var(self.wq).clone(),
            bq: sess.var(self.bq).clone(),
            wk: sess.var(self.wk).clone(),
            bk: sess.var(self.bk).clone(),
            wv: sess.var(self.wv).clone(),
            bv: sess.var(self.bv).clone(),
            wo: sess.var(self.wo).clone(),
            bo: sess.var(self.bo).clone(),
        }
    }
}

#[derive(Clone, Copy)]
pub struct GruP {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
}

impl GruP {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_h: usize,
        trainable: bool,
    ) -> Result<Self> {
        Ok(GruP {
            wz: store.xavier(&format!("{name}.wz"), d_in, d_h, trainable)?,
            uz: store.xavier(&format!("{name}.uz"), d_h, d_h, trainable)?,
            bz: store.zeros(&format!("{name}.bz"), &[d_h], trainable)?,
            wr: store.xavier(&format!("{name}.wr"), d_in, d_h, trainable)?,
            ur: store.xavier(&format!("{name}.ur"), d_h, d_h, trainable)?,
            br: store.zeros(&format!("{name}.br"), &[d_h], trainable)?,
            wh: store.xavier(&format!("{name}.wh"), d_in, d_h, trainable)?,
            uh: store.xavier(&format!("{name}.uh"), d_h, d_h, trainable)?,
            bh: store.zeros(&format!("{name}.bh"), &[d_h], trainable)?,
        })
    }

    pub fn params<T: Scalar>(&self, sess: &Session<T>) -> GruParams<T> {
        GruParams {
            wz: sess.var(self.wz).clone(),
            uz: sess.var(self.uz).clone(),
            bz: sess.var(self.bz).clone(),
            wr: sess.var(self.wr).clone(),
            ur: sess.var(self.ur).clone(),
            br: sess.var(self.br).clone(),
            wh: sess.var(self.wh).clone(),
            uh: sess.var(self.uh).clone(),
            bh: sess.var(self.bh).clone(),
        }
    }
}

#[derive(Clone, Copy)]
pub struct Conv2dP {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2dP {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        trainable: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kh * kw;
        let limit = (6.0 / (fan_in + c_out * kh * kw) as f64).sqrt();
        let mut rng = RngStream::new(store.seed(), store.len() as u64);
        let w = Array::from_fn(&[c_out, c_in, kh, kw], |_| T::from_f64(rng.uniform_in(-limit, limit)));
        Ok(Conv2dP {
            w: store.register(&format!("{name}.w"), w, trainable)?,
            b: store.zeros(&format!("{name}.b"), &[c_out], trainable)?,
        })
    }
}

#[derive(Clone, Copy)]
pub struct Conv1dP {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1dP {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        trainable: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k;
        let limit = (6.0 / (fan_in + c_out * k) as f64).sqrt();
        let mut rng = RngStream::new(store.seed(), store.len() as u64);
        let w = Array::from_fn(&[c_out, c_in, k], |_| T::from_f64(rng.uniform_in(-limit, limit)));
        Ok(Conv1dP {
            w: store.register(&format!("{name}.w"), w, trainable)?,
            b: store.zeros(&format!("{name}.b"), &[c_out], trainable)?,
        })
    }
}
