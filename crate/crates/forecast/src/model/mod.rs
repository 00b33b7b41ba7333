//! The full forecasting network: perception -> memory -> decision.

pub mod decision;
pub mod layers;
pub mod memory;
pub mod perception;

use ndgrad::{RngStream, Scalar, Tape};

use crate::batch::Batch;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::params::ParamStore;

pub use decision::{Decision, ForecastVars, FusedFeature, TrajectoryForecast};
pub use layers::{GateSample, Session};
pub use memory::{LangFeatures, Memory, ModeQueries};
pub use perception::{Perception, SceneEncoding};

pub struct ModelOutput<T: Scalar> {
    pub encoding: SceneEncoding<T>,
    pub queries: ModeQueries<T>,
    pub lang: LangFeatures<T>,
    pub fused: FusedFeature<T>,
    pub forecast: ForecastVars<T>,
}

pub struct WorldModel<T: Scalar> {
    pub cfg: TrainConfig,
    pub store: ParamStore<T>,
    pub perception: Perception,
    pub memory: Memory,
    pub decision: Decision,
}

impl<T: Scalar> WorldModel<T> {
    /// Build all parameters. Registration order is fixed, so (seed,
    /// backbone_seed) fully determines every weight. The frozen backbone
    /// draws from its own seed and is registered non-trainable.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let perception = Perception::build(&mut store, cfg.d_emb, cfg.heads)?;
        let memory = Memory::build(
            &mut store,
            cfg.d_emb,
            cfg.heads,
            cfg.t_hist,
            cfg.t_f,
            cfg.modes,
            cfg.backbone_width,
            cfg.backbone_seed,
        )?;
        let decision = Decision::build(
            &mut store,
            cfg.d_emb,
            cfg.heads,
            cfg.modes,
            cfg.t_f,
            cfg.experts,
            cfg.blocks,
            cfg.ssm_state,
        )?;
        Ok(WorldModel {
            cfg: cfg.clone(),
            store,
            perception,
            memory,
            decision,
        })
    }

    pub fn session_eval(&self) -> Session<T> {
        Session::eval(self.store.constants(), self.cfg.dropout).with_topk(self.cfg.topk)
    }

    pub fn session_train(&self, tape: &Tape<T>, rng: RngStream) -> Session<T> {
        Session::train(self.store.tracked(tape), self.cfg.dropout, rng)
    }

    pub fn forward(&self, sess: &Session<T>, batch: &Batch<T>) -> Result<ModelOutput<T>> {
        let encoding = self.perception.forward(sess, batch)?;
        let queries = self.memory.intention_refine(sess, batch, &encoding)?;
        let lang = self.memory.language_features(sess, batch, &encoding)?;
        let (fused, forecast) = self.decision.forward(
            sess,
            &queries.q_mode_expanded,
            &lang.t_llm,
            &encoding.v_tokens,
            &encoding.t_enc,
        )?;
        Ok(ModelOutput {
            encoding,
            queries,
            lang,
            fused,
            forecast,
        })
    }
}
