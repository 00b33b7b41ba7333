//! Evaluation: metric reports over a corpus, per-class breakdowns, and gate
//! telemetry export.

use std::collections::BTreeMap;

use ndgrad::Scalar;

use crate::batch::assemble;
use crate::corpus::ScenarioClass;
use crate::error::{Error, Result};
use crate::model::{TrajectoryForecast, WorldModel};
use crate::objectives::{metric_report, MetricReport};
use crate::scenes::Scene;

pub const MISS_THRESHOLD_M: f64 = 2.0;

/// Run the model over a corpus in eval mode (deterministic, noise and
/// dropout off) and collect per-scene forecasts with ground truth.
pub fn forecast_corpus<T: Scalar>(
    model: &WorldModel<T>,
    scenes: &[Scene],
) -> Result<(Vec<TrajectoryForecast>, Vec<Vec<[f64; 2]>>)> {
    let cfg = &model.cfg;
    let mut forecasts = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let batch = assemble::<T>(&refs, cfg)?;
        let sess = model.session_eval();
        let output = model.forward(&sess, &batch)?;
        forecasts.extend(output.forecast.to_forecasts());
        for s in chunk {
            gts.push(s.future.clone());
        }
    }
    Ok((forecasts, gts))
}

fn rmse_horizons(t_f: usize) -> Vec<usize> {
    let mut hs: Vec<usize> = [t_f / 4, t_f / 2, 3 * t_f / 4, t_f]
        .into_iter()
        .filter(|&h| h > 0)
        .collect();
    hs.dedup();
    hs
}

/// Metrics per Eqs-style definitions for every requested g, with RMSE rows
/// per quarter horizon.
pub fn evaluate<T: Scalar>(model: &WorldModel<T>, scenes: &[Scene], g_list: &[usize]) -> Result<MetricReport> {
    if g_list.is_empty() {
        return Err(Error::Contract("evaluate: empty g list".into()));
    }
    for &g in g_list {
        if g == 0 || g > model.cfg.modes {
            return Err(Error::Contract(format!(
                "evaluate: g={g} out of range for {} modes",
                model.cfg.modes
            )));
        }
    }
    let (forecasts, gts) = forecast_corpus(model, scenes)?;
    metric_report(&forecasts, &gts, g_list, MISS_THRESHOLD_M, &rmse_horizons(model.cfg.t_f))
}

/// Per-scenario-class breakdown; rows ordered by class.
pub fn evaluate_per_class<T: Scalar>(
    model: &WorldModel<T>,
    scenes: &[Scene],
    g_list: &[usize],
) -> Result<Vec<(ScenarioClass, MetricReport)>> {
    let (forecasts, gts) = forecast_corpus(model, scenes)?;
    let mut by_class: BTreeMap<ScenarioClass, (Vec<TrajectoryForecast>, Vec<Vec<[f64; 2]>>)> =
        BTreeMap::new();
    for ((f, gt), scene) in forecasts.into_iter().zip(gts).zip(scenes) {
        let class = scene.label.ok_or_else(|| {
            Error::Contract(format!("scene {} has no label for per-class eval", scene.scene_id))
        })?;
        let slot = by_class.entry(class).or_default();
        slot.0.push(f);
        slot.1.push(gt);
    }
    let mut out = Vec::new();
    for (class, (fs, gs)) in by_class {
        out.push((
            class,
            metric_report(&fs, &gs, g_list, MISS_THRESHOLD_M, &rmse_horizons(model.cfg.t_f))?,
        ));
    }
    Ok(out)
}

pub fn per_class_csv(rows: &[(ScenarioClass, MetricReport)]) -> String {
    let mut out = String::from("class,metric,g,value,n_samples\n");
    for (class, report) in rows {
        for r in &report.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                class, r.metric, r.g, r.value, r.n_samples
            ));
        }
    }
    out
}

/// One telemetry row: mean gate weight of one expert in one block over all
/// tokens of scenes sharing a scenario label.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRow {
    pub block: usize,
    pub expert: usize,
    pub scenario: String,
    pub mean_weight: f64,
    pub token_count: usize,
}

/// Scene-by-scene gate telemetry aggregated per (block, expert, scenario).
/// Gate vectors are accumulated in f64 and renormalized per token batch, so
/// per-(block, scenario) expert weights sum to 1 within 1e-9.
pub fn route_stats<T: Scalar>(model: &WorldModel<T>, scenes: &[Scene]) -> Result<Vec<GateRow>> {
    let mut acc: BTreeMap<(usize, usize, String), (f64, usize)> = BTreeMap::new();
    for scene in scenes {
        let refs = [scene];
        let batch = assemble::<T>(&refs, &model.cfg)?;
        let sess = model.session_eval().with_telemetry();
        let _ = model.forward(&sess, &batch)?;
        let label = scene
            .label
            .map(|c| c.to_string())
            .unwrap_or_else(|| "Unlabeled".to_string());
        for sample in sess.take_gates() {
            let total: f64 = sample.mean_weight.iter().sum();
            debug_assert!((total - 1.0).abs() < 1e-3, "gate means should sum near 1");
            for (e, &wt) in sample.mean_weight.iter().enumerate() {
                let entry = acc.entry((sample.block, e, label.clone())).or_insert((0.0, 0));
                // renormalize so per-(block, token) mass is exactly one
                entry.0 += wt / total * sample.token_count as f64;
                entry.1 += sample.token_count;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((block, expert, scenario), (mass, tokens))| GateRow {
            block,
            expert,
            scenario,
            mean_weight: mass / tokens as f64,
            token_count: tokens,
        })
        .collect())
}

/// CSV with header `block,expert,scenario,mean_weight,token_count`.
pub fn gate_rows_csv(rows: &[GateRow]) -> String {
    let mut out = String::from("block,expert,scenario,mean_weight,token_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.block, r.expert, r.scenario, r.mean_weight, r.token_count
        ));
    }
    out
}

/// Divergence of per-class mean gate vectors from the pooled mean, weighted
/// by class token mass. Used to check that gate distributions differ across
/// scenario classes beyond label-shuffling noise.
pub fn gate_divergence(per_scene: &[(String, Vec<f64>)]) -> f64 {
    if per_scene.is_empty() {
        return 0.0;
    }
    let k = per_scene[0].1.len();
    let mut pooled = vec![0.0; k];
    for (_, g) in per_scene {
        for (i, v) in g.iter().enumerate() {
            pooled[i] += v;
        }
    }
    let n = per_scene.len() as f64;
    for p in &mut pooled {
        *p /= n;
    }
    let mut by_class: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (label, g) in per_scene {
        let entry = by_class.entry(label).or_insert((vec![0.0; k], 0));
        for (i, v) in g.iter().enumerate() {
            entry.0[i] += v;
        }
        entry.1 += 1;
    }
    let mut stat = 0.0;
    for (_, (sum, count)) in by_class {
        let c = count as f64;
        let mut dist = 0.0;
        for i in 0..k {
            let d = sum[i] / c - pooled[i];
            dist += d * d;
        }
        stat += c / n * dist;
    }
    stat
}

/// Mean gate vector (over all blocks and tokens) per scene, tagged with its
/// label; the raw material for the divergence statistic.
pub fn per_scene_gate_vectors<T: Scalar>(
    model: &WorldModel<T>,
    scenes: &[Scene],
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let refs = [scene];
        let batch = assemble::<T>(&refs, &model.cfg)?;
        let sess = model.session_eval().with_telemetry();
        let _ = model.forward(&sess, &batch)?;
        let samples = sess.take_gates();
        let k = model.decision.num_experts();
        let mut mean = vec![0.0; k];
        for s in &samples {
            for (i, v) in s.mean_weight.iter().enumerate() {
                mean[i] += v;
            }
        }
        for m in &mut mean {
            *m /= samples.len().max(1) as f64;
        }
        let label = scene
            .label
            .map(|c| c.to_string())
            .unwrap_or_else(|| "Unlabeled".to_string());
        out.push((label, mean));
    }
    Ok(out)
}
