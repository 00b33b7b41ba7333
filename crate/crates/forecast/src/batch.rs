//! Batch assembly: pad heterogeneous scenes into dense tensors plus masks.
//! Padding happens here, never in the file format.

use ndgrad::{Array, Scalar};

use crate::config::TrainConfig;
use crate::corpus::ScenarioClass;
use crate::error::{Error, Result};
use crate::scenes::{rasterize_bev, AgentTrack, Scene, STATE_DIM};

/// Fixed per-feature input scaling applied to raw track states
/// [x, y, vx, vy, ax, ay, yaw] to keep embeddings well-conditioned.
pub const FEATURE_SCALE: [f64; STATE_DIM] = [
    0.1,
    0.1,
    0.1,
    0.1,
    0.25,
    0.25,
    std::f64::consts::FRAC_1_PI,
];

pub const LANE_FEAT_DIM: usize = 6;

pub struct Batch<T: Scalar> {
    pub b: usize,
    pub t_hist: usize,
    pub n_max: usize,
    pub l_max: usize,
    pub t_f: usize,
    pub target_hist: Array<T>,
    pub target_mask: Array<T>,
    pub neighbor_hist: Array<T>,
    pub neighbor_frame_mask: Array<T>,
    pub neighbor_mask: Array<T>,
    pub lane_feat: Array<T>,
    pub lane_mask: Array<T>,
    pub lane_adj: Array<T>,
    pub bev: Array<T>,
    pub future: Array<T>,
    pub labels: Vec<Option<ScenarioClass>>,
    pub scene_ids: Vec<String>,
}

fn scaled_states<T: Scalar>(track: &AgentTrack, out: &mut [T]) {
    for (t, (s, &m)) in track.states.iter().zip(&track.mask).enumerate() {
        for f in 0..STATE_DIM {
            out[t * STATE_DIM + f] = if m == 0 {
                T::ZERO
            } else {
                T::from_f64(s[f] * FEATURE_SCALE[f])
            };
        }
    }
}

/// Lane polylines flattened to nodes: every point is a node carrying its
/// scaled position, unit direction, segment length, and a constant channel.
/// Consecutive nodes of one polyline are adjacent (plus self loops).
fn lane_nodes(scene: &Scene) -> (Vec<[f64; LANE_FEAT_DIM]>, Vec<(usize, usize)>) {
    let mut feats = Vec::new();
    let mut edges = Vec::new();
    for lane in &scene.lanes {
        let base = feats.len();
        let n = lane.points.len();
        for (i, p) in lane.points.iter().enumerate() {
            let (next, prev) = (lane.points.get(i + 1), i.checked_sub(1).map(|j| lane.points[j]));
            let (dx, dy) = match (next, prev) {
                (Some(q), _) => (q[0] - p[0], q[1] - p[1]),
                (None, Some(q)) => (p[0] - q[0], p[1] - q[1]),
                (None, None) => (1.0, 0.0),
            };
            let len = (dx * dx + dy * dy).sqrt().max(1e-9);
            feats.push([p[0] * 0.1, p[1] * 0.1, dx / len, dy / len, len * 0.2, 1.0]);
            if i + 1 < n {
                edges.push((base + i, base + i + 1));
            }
        }
    }
    (feats, edges)
}

pub fn assemble<T: Scalar>(scenes: &[&Scene], cfg: &TrainConfig) -> Result<Batch<T>> {
    if scenes.is_empty() {
        return Err(Error::Contract("assemble: empty batch".into()));
    }
    let b = scenes.len();
    let t_hist = scenes[0].t_hist();
    let t_f = scenes[0].t_f();
    if t_hist != cfg.t_hist || t_f != cfg.t_f {
        return Err(Error::Config(format!(
            "corpus frames ({t_hist} hist, {t_f} future) do not match config ({}, {})",
            cfg.t_hist, cfg.t_f
        )));
    }
    for s in scenes {
        if s.t_hist() != t_hist || s.t_f() != t_f {
            return Err(Error::Contract(format!(
                "scene {} has inconsistent frame counts",
                s.scene_id
            )));
        }
    }

    let n_max = scenes.iter().map(|s| s.neighbors.len()).max().unwrap_or(0);
    let lane_data: Vec<(Vec<[f64; LANE_FEAT_DIM]>, Vec<(usize, usize)>)> =
        scenes.iter().map(|s| lane_nodes(s)).collect();
    let l_max = lane_data.iter().map(|(f, _)| f.len()).max().unwrap_or(0);

    let mut target_hist = vec![T::ZERO; b * t_hist * STATE_DIM];
    let mut target_mask = vec![T::ZERO; b * t_hist];
    let mut neighbor_hist = vec![T::ZERO; b * n_max * t_hist * STATE_DIM];
    let mut neighbor_frame_mask = vec![T::ZERO; b * n_max * t_hist];
    let mut neighbor_mask = vec![T::ZERO; b * n_max];
    let mut lane_feat = vec![T::ZERO; b * l_max * LANE_FEAT_DIM];
    let mut lane_mask = vec![T::ZERO; b * l_max];
    let mut lane_adj = vec![T::ZERO; b * l_max * l_max];
    let hw = cfg.bev_hw;
    let mut bev = vec![T::ZERO; b * 3 * hw * hw];
    let mut future = vec![T::ZERO; b * t_f * 2];
    let mut labels = Vec::with_capacity(b);
    let mut scene_ids = Vec::with_capacity(b);

    for (i, scene) in scenes.iter().enumerate() {
        scaled_states(
            &scene.target,
            &mut target_hist[i * t_hist * STATE_DIM..(i + 1) * t_hist * STATE_DIM],
        );
        for (t, &m) in scene.target.mask.iter().enumerate() {
            target_mask[i * t_hist + t] = if m != 0 { T::ONE } else { T::ZERO };
        }
        for (j, nb) in scene.neighbors.iter().enumerate() {
            let base = (i * n_max + j) * t_hist * STATE_DIM;
            scaled_states(nb, &mut neighbor_hist[base..base + t_hist * STATE_DIM]);
            for (t, &m) in nb.mask.iter().enumerate() {
                neighbor_frame_mask[(i * n_max + j) * t_hist + t] =
                    if m != 0 { T::ONE } else { T::ZERO };
            }
            if nb.mask.iter().any(|&m| m != 0) {
                neighbor_mask[i * n_max + j] = T::ONE;
            }
        }
        let (feats, edges) = &lane_data[i];
        for (k, f) in feats.iter().enumerate() {
            for (c, &v) in f.iter().enumerate() {
                lane_feat[(i * l_max + k) * LANE_FEAT_DIM + c] = T::from_f64(v);
            }
            lane_mask[i * l_max + k] = T::ONE;
            lane_adj[(i * l_max + k) * l_max + k] = T::ONE;
        }
        for &(u, v) in edges {
            lane_adj[(i * l_max + u) * l_max + v] = T::ONE;
            lane_adj[(i * l_max + v) * l_max + u] = T::ONE;
        }
        let raster = match &scene.bev {
            Some(r) if r.h == hw && r.w == hw && r.c == 3 => r.clone(),
            Some(r) => {
                return Err(Error::Config(format!(
                    "scene {} raster {}x{}x{} does not match configured 3x{hw}x{hw}",
                    scene.scene_id, r.c, r.h, r.w
                )))
            }
            None => rasterize_bev(scene, hw, hw, cfg.bev_m_per_px)?,
        };
        for (k, &v) in raster.data.iter().enumerate() {
            bev[i * 3 * hw * hw + k] = T::from_f64(v);
        }
        for (t, p) in scene.future.iter().enumerate() {
            future[(i * t_f + t) * 2] = T::from_f64(p[0]);
            future[(i * t_f + t) * 2 + 1] = T::from_f64(p[1]);
        }
        labels.push(scene.label);
        scene_ids.push(scene.scene_id.clone());
    }

    Ok(Batch {
        b,
        t_hist,
        n_max,
        l_max,
        t_f,
        target_hist: Array::from_vec(vec![b, t_hist, STATE_DIM], target_hist)?,
        target_mask: Array::from_vec(vec![b, t_hist], target_mask)?,
        neighbor_hist: Array::from_vec(vec![b, n_max, t_hist, STATE_DIM], neighbor_hist)?,
        neighbor_frame_mask: Array::from_vec(vec![b, n_max, t_hist], neighbor_frame_mask)?,
        neighbor_mask: Array::from_vec(vec![b, n_max], neighbor_mask)?,
        lane_feat: Array::from_vec(vec![b, l_max, LANE_FEAT_DIM], lane_feat)?,
        lane_mask: Array::from_vec(vec![b, l_max], lane_mask)?,
        lane_adj: Array::from_vec(vec![b, l_max, l_max], lane_adj)?,
        bev: Array::from_vec(vec![b, 3, hw, hw], bev)?,
        future: Array::from_vec(vec![b, t_f, 2], future)?,
        labels,
        scene_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, GenConfig};
    use ndgrad::RngStream;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            bev_hw: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn assembles_padded_tensors() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(1, 0);
        let scenes = generate_synthetic(&gen, 4, &mut rng);
        let refs: Vec<&Scene> = scenes.iter().collect();
        let batch = assemble::<f64>(&refs, &small_cfg()).unwrap();
        assert_eq!(batch.b, 4);
        assert_eq!(batch.target_hist.shape(), &[4, 5, STATE_DIM]);
        assert_eq!(batch.bev.shape(), &[4, 3, 16, 16]);
        assert_eq!(batch.future.shape(), &[4, 12, 2]);
        // padded neighbor slots are zero with zero mask
        for i in 0..4 {
            for j in scenes[i].neighbors.len()..batch.n_max {
                assert_eq!(batch.neighbor_mask.data()[i * batch.n_max + j], 0.0);
            }
        }
    }

    #[test]
    fn frame_count_mismatch_is_config_error() {
        let gen = GenConfig {
            t_f: 6,
            ..GenConfig::default()
        };
        let mut rng = RngStream::new(2, 0);
        let scenes = generate_synthetic(&gen, 1, &mut rng);
        let refs: Vec<&Scene> = scenes.iter().collect();
        assert!(assemble::<f64>(&refs, &small_cfg()).is_err());
    }

    #[test]
    fn lane_adjacency_stays_within_polylines() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(3, 0);
        let scenes = generate_synthetic(&gen, 1, &mut rng);
        let refs: Vec<&Scene> = scenes.iter().collect();
        let batch = assemble::<f64>(&refs, &small_cfg()).unwrap();
        let l = batch.l_max;
        let per_lane = scenes[0].lanes[0].points.len();
        // node 0 and the first node of the second polyline are not adjacent
        assert_eq!(batch.lane_adj.data()[per_lane], 0.0);
        assert_eq!(batch.lane_adj.data()[0], 1.0, "self loop expected");
        assert_eq!(batch.lane_adj.data()[1], 1.0, "chain edge expected");
        assert_eq!(batch.lane_adj.shape(), &[1, l, l]);
    }
}
