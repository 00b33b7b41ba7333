pub mod checkpoint;
pub mod eval;
pub mod train;

pub use checkpoint::{load, save, RngState};
pub use eval::{
    evaluate, evaluate_per_class, forecast_corpus, gate_divergence, gate_rows_csv, per_class_csv,
    per_scene_gate_vectors, route_stats, GateRow, MISS_THRESHOLD_M,
};
pub use train::{compute_loss, cosine_lr, loss_log_csv, train, Adam, EpochLoss};
