//! Training losses and evaluation metrics.
//!
//! The loss combiners and pointwise losses here are the reference (f64)
//! forms; the training loop mirrors them with tracked ops so gradients flow.
//! Metrics operate on plain forecasts and are oracle-checked to 1e-12.

use serde::Serialize;

use crate::config::LossProfile;
use crate::error::{Error, Result};

/// Multimodal forecast for one sample: per mode a trajectory of Laplace
/// (location, scale) pairs plus mode probabilities on the simplex.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryForecast {
    /// [mode][step] -> (x, y) location, meters
    pub locations: Vec<Vec<[f64; 2]>>,
    /// [mode][step] -> positive scales, meters
    pub scales: Vec<Vec<[f64; 2]>>,
    /// Probability per mode
    pub probs: Vec<f64>,
}

impl TrajectoryForecast {
    pub fn modes(&self) -> usize {
        self.locations.len()
    }

    /// Mode indices ordered by descending probability (stable on ties).
    pub fn ranked_modes(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].partial_cmp(&self.probs[a]).unwrap().then(a.cmp(&b)));
        idx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.5,
            gamma1: 1.0,
            gamma2: 1.0,
        }
    }
}

/// Per-step euclidean errors averaged over the horizon.
pub fn ade(traj: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    let t = traj.len().min(gt.len());
    if t == 0 {
        return 0.0;
    }
    traj.iter()
        .zip(gt)
        .take(t)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum::<f64>()
        / t as f64
}

/// Index of the mode closest to ground truth by ADE (winner-takes-all).
pub fn winner_mode(forecast: &TrajectoryForecast, gt: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_ade = f64::INFINITY;
    for (g, traj) in forecast.locations.iter().enumerate() {
        let a = ade(traj, gt);
        if a < best_ade {
            best_ade = a;
            best = g;
        }
    }
    best
}

/// Laplace negative log-likelihood log(2b) + |y-mu|/b, averaged over steps
/// and both coordinates of the winner-mode trajectory.
pub fn laplace_nll(mu: &[[f64; 2]], b: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if b.iter().flatten().any(|&v| v <= 0.0) {
        return Err(Error::Contract("laplace_nll: scale b must be positive".into()));
    }
    let t = mu.len().min(gt.len());
    let mut acc = 0.0;
    for i in 0..t {
        for c in 0..2 {
            acc += (2.0 * b[i][c]).ln() + (gt[i][c] - mu[i][c]).abs() / b[i][c];
        }
    }
    Ok(acc / (2 * t) as f64)
}

/// Cross-entropy against the winner mode: -log pi[winner], eps-clipped.
pub fn mode_cls_loss(probs: &[f64], winner: usize) -> f64 {
    -(probs[winner].max(1e-12)).ln()
}

/// Eq-style combination for the NLL profile: L_ade + l1*L_reg + l2*L_cls.
pub fn combined_loss_nuscenes(l_ade: f64, l_reg: f64, l_cls: f64, w: &LossWeights) -> f64 {
    l_ade + w.lambda1 * l_reg + w.lambda2 * l_cls
}

/// MSE-profile combination: g1*L_mse + g2*L_ce.
pub fn combined_loss_rmse(l_mse: f64, l_ce: f64, w: &LossWeights) -> f64 {
    w.gamma1 * l_mse + w.gamma2 * l_ce
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub profile: LossProfile,
    pub total: f64,
    /// ADE term (nuscenes) or MSE term (rmse profile)
    pub regression: f64,
    /// Laplace NLL term; zero under the rmse profile
    pub nll: f64,
    pub classification: f64,
}

// --- metrics ----------------------------------------------------------------

fn top_g_modes(f: &TrajectoryForecast, g: usize) -> Result<Vec<usize>> {
    if g < 1 {
        return Err(Error::Contract("metric: g must be >= 1".into()));
    }
    if g > f.modes() {
        return Err(Error::Contract(format!(
            "metric: g={g} exceeds available modes {}",
            f.modes()
        )));
    }
    Ok(f.ranked_modes().into_iter().take(g).collect())
}

/// Mean over samples of the minimum per-mode time-averaged error, over the
/// top-g modes by probability.
pub fn min_ade(forecasts: &[TrajectoryForecast], gts: &[Vec<[f64; 2]>], g: usize) -> Result<f64> {
    check_lengths(forecasts, gts)?;
    let mut total = 0.0;
    for (f, gt) in forecasts.iter().zip(gts) {
        let best = top_g_modes(f, g)?
            .into_iter()
            .map(|m| ade(&f.locations[m], gt))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / forecasts.len() as f64)
}

/// Mean over samples of the minimum final-step error over the top-g modes.
pub fn min_fde(forecasts: &[TrajectoryForecast], gts: &[Vec<[f64; 2]>], g: usize) -> Result<f64> {
    check_lengths(forecasts, gts)?;
    let mut total = 0.0;
    for (f, gt) in forecasts.iter().zip(gts) {
        let last = gt.len() - 1;
        let best = top_g_modes(f, g)?
            .into_iter()
            .map(|m| {
                let p = f.locations[m][last.min(f.locations[m].len() - 1)];
                ((p[0] - gt[last][0]).powi(2) + (p[1] - gt[last][1]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / forecasts.len() as f64)
}

/// Fraction of samples whose best final error exceeds theta_m.
pub fn miss_rate(
    forecasts: &[TrajectoryForecast],
    gts: &[Vec<[f64; 2]>],
    g: usize,
    theta_m: f64,
) -> Result<f64> {
    check_lengths(forecasts, gts)?;
    let mut misses = 0usize;
    for (f, gt) in forecasts.iter().zip(gts) {
        let last = gt.len() - 1;
        let best = top_g_modes(f, g)?
            .into_iter()
            .map(|m| {
                let p = f.locations[m][last.min(f.locations[m].len() - 1)];
                ((p[0] - gt[last][0]).powi(2) + (p[1] - gt[last][1]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        if best > theta_m {
            misses += 1;
        }
    }
    Ok(misses as f64 / forecasts.len() as f64)
}

/// Square root of the mean over samples of the per-sample minimum (over all
/// modes) mean squared displacement up to `horizon` steps.
pub fn rmse(forecasts: &[TrajectoryForecast], gts: &[Vec<[f64; 2]>], horizon: usize) -> Result<f64> {
    check_lengths(forecasts, gts)?;
    if horizon == 0 {
        return Err(Error::Contract("rmse: horizon must be >= 1".into()));
    }
    let mut total = 0.0;
    for (f, gt) in forecasts.iter().zip(gts) {
        if horizon > gt.len() {
            return Err(Error::Contract(format!(
                "rmse: horizon {horizon} exceeds future length {}",
                gt.len()
            )));
        }
        let best = (0..f.modes())
            .map(|m| {
                let traj = &f.locations[m];
                (0..horizon)
                    .map(|t| (traj[t][0] - gt[t][0]).powi(2) + (traj[t][1] - gt[t][1]).powi(2))
                    .sum::<f64>()
                    / horizon as f64
            })
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok((total / forecasts.len() as f64).sqrt())
}

fn check_lengths(forecasts: &[TrajectoryForecast], gts: &[Vec<[f64; 2]>]) -> Result<()> {
    if forecasts.is_empty() || forecasts.len() != gts.len() {
        return Err(Error::Contract(format!(
            "metric: {} forecasts vs {} ground truths",
            forecasts.len(),
            gts.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub g: usize,
    pub value: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, metric: &str, g: usize, value: f64, n: usize) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            g,
            value,
            n_samples: n,
        });
    }

    pub fn get(&self, metric: &str, g: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.g == g)
            .map(|r| r.value)
    }

    /// CSV with header `metric,g,value,n_samples`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,g,value,n_samples\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.metric, r.g, r.value, r.n_samples));
        }
        out
    }
}

/// The standard report: minADE/minFDE/MR for each requested g (theta_m for
/// MR), plus RMSE rows per horizon when requested.
pub fn metric_report(
    forecasts: &[TrajectoryForecast],
    gts: &[Vec<[f64; 2]>],
    g_list: &[usize],
    theta_m: f64,
    rmse_horizons: &[usize],
) -> Result<MetricReport> {
    if g_list.is_empty() && rmse_horizons.is_empty() {
        return Err(Error::Contract("metric_report: empty g list".into()));
    }
    let n = forecasts.len();
    let mut report = MetricReport::default();
    for &g in g_list {
        report.push("minADE", g, min_ade(forecasts, gts, g)?, n);
        report.push("minFDE", g, min_fde(forecasts, gts, g)?, n);
        report.push("MR", g, miss_rate(forecasts, gts, g, theta_m)?, n);
    }
    for &h in rmse_horizons {
        report.push("RMSE", h, rmse(forecasts, gts, h)?, n);
    }
    Ok(report)
}
