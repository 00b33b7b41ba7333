//! Corner-case corpus toolkit: TTC risk flagging, scenario classification,
//! frame-drop perturbation, imbalance splits, and a parametric synthetic
//! scene generator with labeled ground truth.

use std::collections::BTreeMap;
use std::fmt;

use ndgrad::RngStream;
use serde::{Deserialize, Serialize};

use crate::config::CurationConfig;
use crate::error::{Error, Result};
use crate::scenes::{AgentClass, AgentTrack, LanePolyline, Scene, STATE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioClass {
    Turning,
    UTurn,
    Congested,
    Braking,
    Acceleration,
    Common,
}

impl ScenarioClass {
    pub const ALL: [ScenarioClass; 6] = [
        ScenarioClass::Turning,
        ScenarioClass::UTurn,
        ScenarioClass::Congested,
        ScenarioClass::Braking,
        ScenarioClass::Acceleration,
        ScenarioClass::Common,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioClass::Turning => "Turning",
            ScenarioClass::UTurn => "UTurn",
            ScenarioClass::Congested => "Congested",
            ScenarioClass::Braking => "Braking",
            ScenarioClass::Acceleration => "Acceleration",
            ScenarioClass::Common => "Common",
        }
    }
}

impl fmt::Display for ScenarioClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScenarioClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioClass::ALL
            .iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown scenario class '{s}'")))
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Time to collision between two agents of the scene at t=0; index 0 is the
/// target, i >= 1 is neighbors[i-1]. Gap along the joining line divided by
/// the closing speed; +inf when not closing or either agent is unobserved.
pub fn compute_ttc(scene: &Scene, pair: (usize, usize)) -> f64 {
    let agent = |i: usize| -> Option<&[f64; STATE_DIM]> {
        if i == 0 {
            scene.target.current()
        } else {
            scene.neighbors.get(i - 1)?.current()
        }
    };
    let (Some(a), Some(b)) = (agent(pair.0), agent(pair.1)) else {
        return f64::INFINITY;
    };
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist <= 1e-9 {
        return 0.0;
    }
    let (ux, uy) = (dx / dist, dy / dist);
    let closing = (a[2] - b[2]) * ux + (a[3] - b[3]) * uy;
    if closing > 1e-9 {
        dist / closing
    } else {
        f64::INFINITY
    }
}

/// Minimum TTC between the target and any neighbor.
pub fn min_ttc(scene: &Scene) -> f64 {
    (1..=scene.neighbors.len())
        .map(|i| compute_ttc(scene, (0, i)))
        .fold(f64::INFINITY, f64::min)
}

/// Net signed yaw change over the target's observed history, accumulated
/// from wrapped per-step differences so U-turns survive the pi wrap.
fn net_yaw_change(track: &AgentTrack) -> f64 {
    let mut total = 0.0;
    let mut prev: Option<f64> = None;
    for (s, &m) in track.states.iter().zip(&track.mask) {
        if m == 0 {
            continue;
        }
        if let Some(p) = prev {
            total += wrap_angle(s[6] - p);
        }
        prev = Some(s[6]);
    }
    total
}

fn longitudinal_accel_extremes(track: &AgentTrack) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (s, &m) in track.states.iter().zip(&track.mask) {
        if m == 0 {
            continue;
        }
        let a_long = s[4] * s[6].cos() + s[5] * s[6].sin();
        lo = lo.min(a_long);
        hi = hi.max(a_long);
    }
    if lo.is_infinite() {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

fn agent_counts_at_t0(scene: &Scene) -> (usize, usize) {
    let mut veh = 0;
    let mut ped = 0;
    let mut bump = |t: &AgentTrack| {
        if t.current().is_some() {
            match t.class {
                AgentClass::Vehicle => veh += 1,
                AgentClass::Pedestrian => ped += 1,
                AgentClass::Cyclist => {}
            }
        }
    };
    bump(&scene.target);
    for n in &scene.neighbors {
        bump(n);
    }
    (veh, ped)
}

/// Deterministic rule-based classification. Precedence when several rules
/// fire: UTurn > Turning > Congested > Braking > Acceleration > Common.
pub fn classify_scenario(scene: &Scene, cfg: &CurationConfig) -> ScenarioClass {
    let yaw = net_yaw_change(&scene.target).abs();
    if yaw > cfg.yaw_uturn_rad {
        return ScenarioClass::UTurn;
    }
    if yaw > cfg.yaw_turn_rad {
        return ScenarioClass::Turning;
    }
    let (veh, ped) = agent_counts_at_t0(scene);
    if veh > cfg.congested_vehicles || ped > cfg.congested_pedestrians {
        return ScenarioClass::Congested;
    }
    let (a_min, a_max) = longitudinal_accel_extremes(&scene.target);
    if a_min < cfg.brake_accel_mps2 {
        return ScenarioClass::Braking;
    }
    if a_max > cfg.accel_mps2 {
        return ScenarioClass::Acceleration;
    }
    ScenarioClass::Common
}

/// Zero out `m` uniformly chosen observed history frames per track (states
/// and mask); the future is never touched. Any attached raster is dropped
/// since t=0 occupancy may change.
pub fn drop_frames(scene: &Scene, m: usize, rng: &mut RngStream) -> Result<Scene> {
    let hist = scene.t_hist();
    if m >= hist {
        return Err(Error::Contract(format!(
            "drop_frames: m={m} out of range for {hist} history frames"
        )));
    }
    if m == 0 {
        return Ok(scene.clone());
    }
    let mut out = scene.clone();
    out.bev = None;
    let mut drop_track = |track: &mut AgentTrack| {
        let observed: Vec<usize> = (0..track.frames()).filter(|&t| track.mask[t] != 0).collect();
        let k = m.min(observed.len());
        for pick in rng.choose_distinct(observed.len(), k) {
            let t = observed[pick];
            track.states[t] = [0.0; STATE_DIM];
            track.mask[t] = 0;
        }
    };
    drop_track(&mut out.target);
    for n in &mut out.neighbors {
        drop_track(n);
    }
    Ok(out)
}

/// Per-class scene counts for a training split. Classes not named keep zero
/// scenes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub counts: BTreeMap<ScenarioClass, usize>,
}

impl SplitSpec {
    /// Parse "Common=1000,Turning=40" style strings.
    pub fn parse(text: &str) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for item in text.split(',').filter(|s| !s.trim().is_empty()) {
            let (class, count) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("split spec item '{item}' missing '='")))?;
            let class: ScenarioClass = class.trim().parse()?;
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad count in '{item}'")))?;
            counts.insert(class, count);
        }
        Ok(SplitSpec { counts })
    }
}

/// Seeded per-class subsample with exact counts; scenes must be labeled.
/// Output preserves the input corpus order.
pub fn make_imbalance_splits(scenes: &[Scene], spec: &SplitSpec, seed: u64) -> Result<Vec<Scene>> {
    let mut by_class: BTreeMap<ScenarioClass, Vec<usize>> = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        let label = s.label.ok_or_else(|| {
            Error::Contract(format!("scene {} has no label; run curate first", s.scene_id))
        })?;
        by_class.entry(label).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (&class, &want) in &spec.counts {
        let available = by_class.get(&class).map_or(0, Vec::len);
        if want > available {
            return Err(Error::SplitShortfall {
                class: class.name().into(),
                requested: want,
                available,
            });
        }
        if want == 0 {
            continue;
        }
        let pool = &by_class[&class];
        let mut rng = RngStream::new(seed, class as u64 + 1);
        for pick in rng.choose_distinct(pool.len(), want) {
            keep.push(pool[pick]);
        }
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| scenes[i].clone()).collect())
}

pub fn class_counts(scenes: &[Scene]) -> BTreeMap<ScenarioClass, usize> {
    let mut counts = BTreeMap::new();
    for s in scenes {
        if let Some(label) = s.label {
            *counts.entry(label).or_insert(0) += 1;
        }
    }
    counts
}

// --- synthetic generation ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub t_hist: usize,
    pub t_f: usize,
    pub dt: f64,
    /// Standard deviation of the seeded noise added to future points (m).
    pub noise_std: f64,
    /// Yaw margin kept clear of every classification boundary (rad).
    pub margin_rad: f64,
    pub mix: Vec<(ScenarioClass, f64)>,
    pub curation: CurationConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            t_hist: 5,
            t_f: 12,
            dt: 0.5,
            noise_std: 0.05,
            margin_rad: 0.05,
            mix: vec![
                (ScenarioClass::Turning, 0.14),
                (ScenarioClass::UTurn, 0.08),
                (ScenarioClass::Congested, 0.12),
                (ScenarioClass::Braking, 0.14),
                (ScenarioClass::Acceleration, 0.12),
                (ScenarioClass::Common, 0.40),
            ],
            curation: CurationConfig::default(),
        }
    }
}

/// Constant-speed, constant-turn-rate state at time tau (target frame at
/// tau = 0: origin position, zero yaw).
fn arc_state(v: f64, omega: f64, tau: f64) -> [f64; STATE_DIM] {
    let yaw = omega * tau;
    let (x, y) = if omega.abs() < 1e-9 {
        (v * tau, 0.0)
    } else {
        let r = v / omega;
        (r * yaw.sin(), r * (1.0 - yaw.cos()))
    };
    let (vx, vy) = (v * yaw.cos(), v * yaw.sin());
    // centripetal only; longitudinal acceleration is zero on the arc
    let (ax, ay) = (-v * omega * yaw.sin(), v * omega * yaw.cos());
    [x, y, vx, vy, ax, ay, wrap_angle(yaw)]
}

/// Straight-line state with speed profile v(tau) = clamp(v0 + a*tau, vmin,
/// vmax); distance integrated with fixed substeps for determinism.
fn straight_state(v0: f64, a: f64, vmin: f64, vmax: f64, tau: f64) -> [f64; STATE_DIM] {
    let speed = |t: f64| (v0 + a * t).clamp(vmin, vmax);
    let steps = 200;
    let h = tau / steps as f64;
    let mut s = 0.0;
    for i in 0..steps {
        let t0 = h * i as f64;
        let t1 = h * (i + 1) as f64;
        s += 0.5 * (speed(t0) + speed(t1)) * h;
    }
    let v = speed(tau);
    let a_eff = if v <= vmin + 1e-12 || v >= vmax - 1e-12 { 0.0 } else { a };
    [s, 0.0, v, 0.0, a_eff, 0.0, 0.0]
}

struct PathSpec {
    kind: PathKind,
}

enum PathKind {
    Arc { v: f64, omega: f64 },
    Straight { v0: f64, a: f64, vmin: f64, vmax: f64 },
}

impl PathSpec {
    fn state(&self, tau: f64) -> [f64; STATE_DIM] {
        match self.kind {
            PathKind::Arc { v, omega } => arc_state(v, omega, tau),
            PathKind::Straight { v0, a, vmin, vmax } => straight_state(v0, a, vmin, vmax, tau),
        }
    }
}

fn const_velocity_track(
    id: u64,
    class: AgentClass,
    p0: [f64; 2],
    vel: [f64; 2],
    taus: &[f64],
) -> AgentTrack {
    let yaw = if vel[0] == 0.0 && vel[1] == 0.0 {
        0.0
    } else {
        vel[1].atan2(vel[0])
    };
    AgentTrack {
        id,
        class,
        states: taus
            .iter()
            .map(|&tau| {
                [
                    p0[0] + vel[0] * tau,
                    p0[1] + vel[1] * tau,
                    vel[0],
                    vel[1],
                    0.0,
                    0.0,
                    yaw,
                ]
            })
            .collect(),
        mask: vec![1; taus.len()],
    }
}

fn lane_from_path(id: u64, path: &PathSpec, taus_all: &[f64], lateral: f64) -> LanePolyline {
    let mut points = Vec::with_capacity(taus_all.len());
    for &tau in taus_all {
        let s = path.state(tau);
        let (nx, ny) = (-s[6].sin(), s[6].cos());
        let p = [s[0] + lateral * nx, s[1] + lateral * ny];
        if points.last() != Some(&p) {
            points.push(p);
        }
    }
    LanePolyline { id, points }
}

fn sample_class(mix: &[(ScenarioClass, f64)], rng: &mut RngStream) -> ScenarioClass {
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut draw = rng.uniform() * total;
    for &(c, w) in mix {
        draw -= w;
        if draw <= 0.0 {
            return c;
        }
    }
    mix.last().map(|&(c, _)| c).unwrap_or(ScenarioClass::Common)
}

/// Generate one labeled scene of the requested class in the target frame,
/// with classification margins enforced beyond every threshold band.
pub fn generate_scene(
    scene_id: String,
    class: ScenarioClass,
    cfg: &GenConfig,
    rng: &mut RngStream,
) -> Scene {
    let cur = &cfg.curation;
    let hist_window = (cfg.t_hist - 1) as f64 * cfg.dt;
    let margin = cfg.margin_rad;

    let path = match class {
        ScenarioClass::Turning => {
            let dyaw = rng.uniform_in(cur.yaw_turn_rad + margin, cur.yaw_uturn_rad - margin);
            let sign = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            PathSpec {
                kind: PathKind::Arc {
                    v: rng.uniform_in(4.0, 9.0),
                    omega: sign * dyaw / hist_window,
                },
            }
        }
        ScenarioClass::UTurn => {
            let dyaw = rng.uniform_in(cur.yaw_uturn_rad + margin, cur.yaw_uturn_rad + 0.7);
            let sign = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            PathSpec {
                kind: PathKind::Arc {
                    v: rng.uniform_in(2.0, 6.0),
                    omega: sign * dyaw / hist_window,
                },
            }
        }
        ScenarioClass::Braking => PathSpec {
            kind: PathKind::Straight {
                v0: rng.uniform_in(8.0, 13.0),
                a: rng.uniform_in(cur.brake_accel_mps2 - 2.0, cur.brake_accel_mps2 - 0.5),
                vmin: 0.3,
                vmax: 30.0,
            },
        },
        ScenarioClass::Acceleration => {
            let a = rng.uniform_in(cur.accel_mps2 + 0.5, cur.accel_mps2 + 2.0);
            // keep the speed profile un-clamped across the history window
            let v0 = rng.uniform_in(a * hist_window + 1.0, a * hist_window + 5.0);
            PathSpec {
                kind: PathKind::Straight {
                    v0,
                    a,
                    vmin: 0.3,
                    vmax: 60.0,
                },
            }
        }
        ScenarioClass::Congested => PathSpec {
            kind: PathKind::Straight {
                v0: rng.uniform_in(1.0, 3.0),
                a: 0.0,
                vmin: 0.1,
                vmax: 30.0,
            },
        },
        ScenarioClass::Common => PathSpec {
            kind: PathKind::Straight {
                v0: rng.uniform_in(5.0, 12.0),
                a: 0.0,
                vmin: 0.1,
                vmax: 30.0,
            },
        },
    };

    let hist_taus: Vec<f64> = (0..cfg.t_hist)
        .map(|i| (i as f64 - (cfg.t_hist - 1) as f64) * cfg.dt)
        .collect();
    let future_taus: Vec<f64> = (1..=cfg.t_f).map(|j| j as f64 * cfg.dt).collect();
    let all_taus: Vec<f64> = hist_taus.iter().chain(&future_taus).copied().collect();

    let target = AgentTrack {
        id: 0,
        class: AgentClass::Vehicle,
        states: hist_taus.iter().map(|&tau| path.state(tau)).collect(),
        mask: vec![1; cfg.t_hist],
    };

    let t0 = path.state(0.0);
    let speed0 = (t0[2] * t0[2] + t0[3] * t0[3]).sqrt();
    let mut neighbors = Vec::new();
    let mut next_id = 1u64;

    // Lead agent ahead of the target: close (TTC < risk threshold) for
    // corner classes, comfortably far for Common.
    {
        let v_lead = speed0 * rng.uniform_in(0.0, 0.25);
        let closing = (speed0 - v_lead).max(0.5);
        let ttc = if class == ScenarioClass::Common {
            rng.uniform_in(cur.ttc_risk_s + 1.0, cur.ttc_risk_s + 4.0)
        } else {
            rng.uniform_in(cur.ttc_risk_s * 0.5, cur.ttc_risk_s * 0.9)
        };
        let gap = closing * ttc;
        neighbors.push(const_velocity_track(
            next_id,
            AgentClass::Vehicle,
            [gap, 0.0],
            [v_lead, 0.0],
            &hist_taus,
        ));
        next_id += 1;
    }

    match class {
        ScenarioClass::Congested => {
            let ped_heavy = rng.uniform() < 0.4;
            if ped_heavy {
                let n_ped = cur.congested_pedestrians + 1 + rng.gen_range_usize(8);
                for _ in 0..n_ped {
                    let p0 = [rng.uniform_in(-18.0, 18.0), rng.uniform_in(-12.0, 12.0)];
                    let ang = rng.uniform_in(0.0, std::f64::consts::TAU);
                    let sp = rng.uniform_in(0.4, 1.5);
                    neighbors.push(const_velocity_track(
                        next_id,
                        AgentClass::Pedestrian,
                        p0,
                        [sp * ang.cos(), sp * ang.sin()],
                        &hist_taus,
                    ));
                    next_id += 1;
                }
            } else {
                // +1 extra beyond the strict threshold; the target also counts
                let n_veh = cur.congested_vehicles + 1 + rng.gen_range_usize(6);
                for i in 0..n_veh {
                    let lane_off = [-7.0, -3.5, 3.5, 7.0][i % 4];
                    let p0 = [rng.uniform_in(-30.0, 30.0), lane_off + rng.uniform_in(-0.4, 0.4)];
                    let sp = rng.uniform_in(0.5, 3.0);
                    neighbors.push(const_velocity_track(
                        next_id,
                        AgentClass::Vehicle,
                        p0,
                        [sp, 0.0],
                        &hist_taus,
                    ));
                    next_id += 1;
                }
            }
        }
        _ => {
            let extra = 2 + rng.gen_range_usize(4);
            for _ in 0..extra {
                let side = if rng.uniform() < 0.5 { -3.5 } else { 3.5 };
                let p0 = [rng.uniform_in(-20.0, 25.0), side + rng.uniform_in(-0.5, 0.5)];
                let sp = rng.uniform_in(0.6, 1.2) * speed0.max(2.0);
                neighbors.push(const_velocity_track(
                    next_id,
                    AgentClass::Vehicle,
                    p0,
                    [sp, 0.0],
                    &hist_taus,
                ));
                next_id += 1;
            }
        }
    }

    let lanes = vec![
        lane_from_path(0, &path, &all_taus, 0.0),
        lane_from_path(1, &path, &all_taus, 3.5),
        lane_from_path(2, &path, &all_taus, -3.5),
    ];

    let future: Vec<[f64; 2]> = future_taus
        .iter()
        .map(|&tau| {
            let s = path.state(tau);
            [
                s[0] + rng.normal_scaled(0.0, cfg.noise_std),
                s[1] + rng.normal_scaled(0.0, cfg.noise_std),
            ]
        })
        .collect();

    Scene {
        scene_id,
        target,
        neighbors,
        lanes,
        bev: None,
        future,
        label: Some(class),
    }
}

/// Kinematically consistent labeled corpus at desk scale. Deterministic for
/// a given (config, n, rng) triple.
pub fn generate_synthetic(cfg: &GenConfig, n: usize, rng: &mut RngStream) -> Vec<Scene> {
    (0..n)
        .map(|i| {
            let class = sample_class(&cfg.mix, rng);
            generate_scene(format!("syn-{i:06}"), class, cfg, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_scene(n_vehicles: usize, lead_speed: f64, lead_gap: f64) -> Scene {
        let cfg = GenConfig::default();
        let hist_taus: Vec<f64> = (0..5).map(|i| (i as f64 - 4.0) * 0.5).collect();
        let path = PathSpec {
            kind: PathKind::Straight {
                v0: 10.0,
                a: 0.0,
                vmin: 0.1,
                vmax: 30.0,
            },
        };
        let target = AgentTrack {
            id: 0,
            class: AgentClass::Vehicle,
            states: hist_taus.iter().map(|&t| path.state(t)).collect(),
            mask: vec![1; 5],
        };
        let mut neighbors = vec![const_velocity_track(
            1,
            AgentClass::Vehicle,
            [lead_gap, 0.0],
            [lead_speed, 0.0],
            &hist_taus,
        )];
        for i in 0..n_vehicles.saturating_sub(2) {
            neighbors.push(const_velocity_track(
                2 + i as u64,
                AgentClass::Vehicle,
                [-5.0 - i as f64 * 3.0, 3.5],
                [8.0, 0.0],
                &hist_taus,
            ));
        }
        Scene {
            scene_id: "t".into(),
            target,
            neighbors,
            lanes: vec![LanePolyline {
                id: 0,
                points: vec![[-20.0, 0.0], [40.0, 0.0]],
            }],
            bev: None,
            future: (1..=cfg.t_f).map(|j| [10.0 * 0.5 * j as f64, 0.0]).collect(),
            label: None,
        }
    }

    #[test]
    fn ttc_oracle_case_is_two_seconds() {
        // follower at 10 m/s, stationary leader 20 m ahead
        let s = straight_scene(2, 0.0, 20.0);
        assert_eq!(compute_ttc(&s, (0, 1)), 2.0);
    }

    #[test]
    fn diverging_agents_have_infinite_ttc() {
        let s = straight_scene(2, 15.0, 20.0);
        assert_eq!(compute_ttc(&s, (0, 1)), f64::INFINITY);
    }

    #[test]
    fn ttc_just_under_two_is_high_risk() {
        let s = straight_scene(2, 0.0, 19.0);
        let ttc = compute_ttc(&s, (0, 1));
        assert!((ttc - 1.9).abs() < 1e-12);
        assert!(ttc < CurationConfig::default().ttc_risk_s);
    }

    #[test]
    fn yaw_thresholds_classify_turn_and_uturn() {
        let cfg = CurationConfig::default();
        let gen = GenConfig::default();
        let mut rng = RngStream::new(1, 0);
        let turn = generate_scene("a".into(), ScenarioClass::Turning, &gen, &mut rng);
        assert_eq!(classify_scenario(&turn, &cfg), ScenarioClass::Turning);

        // |net yaw| = 0.75 rad crosses the 0.7 U-turn threshold
        let hist_taus: Vec<f64> = (0..5).map(|i| (i as f64 - 4.0) * 0.5).collect();
        let path = PathSpec {
            kind: PathKind::Arc {
                v: 5.0,
                omega: 0.75 / 2.0,
            },
        };
        let mut s = straight_scene(2, 0.0, 50.0);
        s.target.states = hist_taus.iter().map(|&t| path.state(t)).collect();
        assert_eq!(classify_scenario(&s, &cfg), ScenarioClass::UTurn);
    }

    #[test]
    fn thirty_six_vehicles_is_congested() {
        let s = straight_scene(36, 8.0, 30.0);
        let (veh, _) = agent_counts_at_t0(&s);
        assert_eq!(veh, 36);
        assert_eq!(
            classify_scenario(&s, &CurationConfig::default()),
            ScenarioClass::Congested
        );
    }

    #[test]
    fn braking_and_acceleration_thresholds() {
        let gen = GenConfig::default();
        let cfg = CurationConfig::default();
        let mut rng = RngStream::new(3, 0);
        let braking = generate_scene("b".into(), ScenarioClass::Braking, &gen, &mut rng);
        assert_eq!(classify_scenario(&braking, &cfg), ScenarioClass::Braking);
        let accel = generate_scene("c".into(), ScenarioClass::Acceleration, &gen, &mut rng);
        assert_eq!(classify_scenario(&accel, &cfg), ScenarioClass::Acceleration);
    }

    #[test]
    fn generator_classifier_round_trip_all_classes() {
        let gen = GenConfig::default();
        let cfg = CurationConfig::default();
        let mut rng = RngStream::new(42, 0);
        for seed_round in 0..20 {
            for class in ScenarioClass::ALL {
                let s = generate_scene(format!("{class}-{seed_round}"), class, &gen, &mut rng);
                assert_eq!(
                    classify_scenario(&s, &cfg),
                    class,
                    "round {seed_round} class {class}"
                );
            }
        }
    }

    #[test]
    fn drop_frames_identity_and_exact_count() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(5, 0);
        let s = generate_scene("d".into(), ScenarioClass::Common, &gen, &mut rng);
        let same = drop_frames(&s, 0, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            serde_json::to_string(&same).unwrap()
        );
        let dropped = drop_frames(&s, 1, &mut RngStream::new(1, 0)).unwrap();
        // exactly one of five history slots zeroed per track: 20% loss
        let zeroed = dropped.target.mask.iter().filter(|&&m| m == 0).count();
        assert_eq!(zeroed, 1);
        for n in &dropped.neighbors {
            assert_eq!(n.mask.iter().filter(|&&m| m == 0).count(), 1);
        }
        assert_eq!(dropped.future, s.future);
    }

    #[test]
    fn drop_frames_same_seed_same_indices() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(6, 0);
        let s = generate_scene("e".into(), ScenarioClass::Common, &gen, &mut rng);
        let a = drop_frames(&s, 2, &mut RngStream::new(9, 1)).unwrap();
        let b = drop_frames(&s, 2, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(a.target.mask, b.target.mask);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn drop_frames_out_of_range() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(7, 0);
        let s = generate_scene("f".into(), ScenarioClass::Common, &gen, &mut rng);
        assert!(drop_frames(&s, 5, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn split_identity_and_common_only() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(8, 0);
        let scenes = generate_synthetic(&gen, 60, &mut rng);
        let counts = class_counts(&scenes);
        let full_spec = SplitSpec {
            counts: counts.clone(),
        };
        let full = make_imbalance_splits(&scenes, &full_spec, 1).unwrap();
        assert_eq!(full.len(), scenes.len());
        let ids: Vec<_> = full.iter().map(|s| &s.scene_id).collect();
        let orig: Vec<_> = scenes.iter().map(|s| &s.scene_id).collect();
        assert_eq!(ids, orig, "full spec must be the identity split");

        let common_only = SplitSpec::parse(&format!("Common={}", counts[&ScenarioClass::Common])).unwrap();
        let co = make_imbalance_splits(&scenes, &common_only, 1).unwrap();
        assert!(co.iter().all(|s| s.label == Some(ScenarioClass::Common)));
    }

    #[test]
    fn split_exact_counts_and_reproducible() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(9, 0);
        let scenes = generate_synthetic(&gen, 120, &mut rng);
        let spec = SplitSpec::parse("Common=10,Turning=3").unwrap();
        let a = make_imbalance_splits(&scenes, &spec, 77).unwrap();
        let b = make_imbalance_splits(&scenes, &spec, 77).unwrap();
        let ids = |v: &[Scene]| v.iter().map(|s| s.scene_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let counts = class_counts(&a);
        assert_eq!(counts[&ScenarioClass::Common], 10);
        assert_eq!(counts[&ScenarioClass::Turning], 3);
        assert_eq!(counts.len(), 2);
    }

    #[test]
    fn split_shortfall_names_class() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(10, 0);
        let scenes = generate_synthetic(&gen, 20, &mut rng);
        let spec = SplitSpec::parse("UTurn=1000").unwrap();
        match make_imbalance_splits(&scenes, &spec, 0) {
            Err(Error::SplitShortfall { class, requested, .. }) => {
                assert_eq!(class, "UTurn");
                assert_eq!(requested, 1000);
            }
            other => panic!("expected shortfall, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn synthetic_corpus_serializes_losslessly() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(11, 0);
        let scenes = generate_synthetic(&gen, 12, &mut rng);
        let mut buf = Vec::new();
        for s in &scenes {
            buf.extend_from_slice(serde_json::to_string(s).unwrap().as_bytes());
            buf.push(b'\n');
        }
        let back = crate::scenes::parse_corpus_reader(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(
                serde_json::to_string(a).unwrap(),
                serde_json::to_string(b).unwrap()
            );
        }
    }

    #[test]
    fn common_scene_velocity_constant_and_corner_scenes_high_risk() {
        let gen = GenConfig::default();
        let mut rng = RngStream::new(12, 0);
        let common = generate_scene("c".into(), ScenarioClass::Common, &gen, &mut rng);
        let speeds: Vec<f64> = common
            .target
            .states
            .iter()
            .map(|s| (s[2] * s[2] + s[3] * s[3]).sqrt())
            .collect();
        for w in speeds.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9, "common speed must stay constant");
        }
        assert!(min_ttc(&common) > gen.curation.ttc_risk_s);

        let braking = generate_scene("b".into(), ScenarioClass::Braking, &gen, &mut rng);
        assert!(min_ttc(&braking) < gen.curation.ttc_risk_s);
    }
}
