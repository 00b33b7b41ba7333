//! Traffic scene data model, JSONL serialization, target-centric
//! normalization, and BEV rasterization.
//!
//! Corpus format: one scene JSON object per line, UTF-8. Field names:
//! scene_id, target, neighbors, lanes, bev (optional), future, label.
//! Track fields: id, class, states (arrays of [x,y,vx,vy,ax,ay,yaw]),
//! mask (0/1 per frame).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ScenarioClass;
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

/// Per-frame states cover frames -t_h-1..0; frame index t_hist-1 is t=0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u64,
    pub class: AgentClass,
    /// [x, y, vx, vy, ax, ay, yaw] per frame
    pub states: Vec<[f64; STATE_DIM]>,
    pub mask: Vec<u8>,
}

impl AgentTrack {
    pub fn frames(&self) -> usize {
        self.states.len()
    }

    pub fn observed_at(&self, t: usize) -> bool {
        self.mask.get(t).copied().unwrap_or(0) != 0
    }

    /// Last frame (t = 0) state, if observed.
    pub fn current(&self) -> Option<&[f64; STATE_DIM]> {
        let last = self.states.len().checked_sub(1)?;
        self.observed_at(last).then(|| &self.states[last])
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanePolyline {
    pub id: u64,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BevRaster {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub m_per_px: f64,
    pub origin: [f64; 2],
    pub data: Vec<f64>,
}

impl BevRaster {
    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data[(ch * self.h + row) * self.w + col]
    }

    fn set(&mut self, ch: usize, row: usize, col: usize, v: f64) {
        self.data[(ch * self.h + row) * self.w + col] = v;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub target: AgentTrack,
    pub neighbors: Vec<AgentTrack>,
    pub lanes: Vec<LanePolyline>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bev: Option<BevRaster>,
    pub future: Vec<[f64; 2]>,
    #[serde(default)]
    pub label: Option<ScenarioClass>,
}

impl Scene {
    pub fn t_hist(&self) -> usize {
        self.target.frames()
    }

    pub fn t_f(&self) -> usize {
        self.future.len()
    }
}

fn validate_track(track: &AgentTrack, line: usize, field: &'static str, frames: usize) -> Result<()> {
    if track.states.len() != track.mask.len() {
        return Err(Error::Schema {
            line,
            field,
            msg: format!(
                "states ({}) and mask ({}) lengths differ",
                track.states.len(),
                track.mask.len()
            ),
        });
    }
    if track.states.len() != frames {
        return Err(Error::Schema {
            line,
            field,
            msg: format!("expected {frames} frames, got {}", track.states.len()),
        });
    }
    for (t, (s, &m)) in track.states.iter().zip(&track.mask).enumerate() {
        if m > 1 {
            return Err(Error::Schema {
                line,
                field,
                msg: format!("mask[{t}] must be 0 or 1"),
            });
        }
        if m == 0 && s.iter().any(|&v| v != 0.0) {
            return Err(Error::Schema {
                line,
                field,
                msg: format!("masked-out frame {t} must hold exact zeros"),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema {
                line,
                field,
                msg: format!("non-finite state at frame {t}"),
            });
        }
    }
    Ok(())
}

pub fn validate_scene(scene: &Scene, line: usize) -> Result<()> {
    let frames = scene.target.frames();
    if frames == 0 {
        return Err(Error::Schema {
            line,
            field: "target",
            msg: "target track has no frames".into(),
        });
    }
    validate_track(&scene.target, line, "target", frames)?;
    for n in &scene.neighbors {
        validate_track(n, line, "neighbors", frames)?;
    }
    for lane in &scene.lanes {
        if lane.points.len() < 2 {
            return Err(Error::Schema {
                line,
                field: "lanes",
                msg: format!("lane {} has fewer than 2 points", lane.id),
            });
        }
        for w in lane.points.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Schema {
                    line,
                    field: "lanes",
                    msg: format!("lane {} has duplicate consecutive points", lane.id),
                });
            }
        }
    }
    if scene.future.is_empty() {
        return Err(Error::Schema {
            line,
            field: "future",
            msg: "future must be non-empty".into(),
        });
    }
    if let Some(bev) = &scene.bev {
        if bev.data.len() != bev.c * bev.h * bev.w {
            return Err(Error::Schema {
                line,
                field: "bev",
                msg: "data length does not match c*h*w".into(),
            });
        }
        if bev.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Schema {
                line,
                field: "bev",
                msg: "raster values must lie in [0, 1]".into(),
            });
        }
    }
    Ok(())
}

/// Parse a JSONL corpus; every error carries its 1-based line number. All
/// scenes must agree on history and future lengths.
pub fn parse_corpus(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_corpus_reader(BufReader::new(file))
}

pub fn parse_corpus_reader<R: BufRead>(reader: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Io {
            path: format!("<line {line_no}>"),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Json {
            line: line_no,
            msg: e.to_string(),
        })?;
        validate_scene(&scene, line_no)?;
        match dims {
            None => dims = Some((scene.t_hist(), scene.t_f())),
            Some((th, tf)) => {
                if scene.t_hist() != th {
                    return Err(Error::Schema {
                        line: line_no,
                        field: "target",
                        msg: format!("history length {} != corpus {}", scene.t_hist(), th),
                    });
                }
                if scene.t_f() != tf {
                    return Err(Error::Schema {
                        line: line_no,
                        field: "future",
                        msg: format!("future length {} != corpus t_f {}", scene.t_f(), tf),
                    });
                }
            }
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_corpus(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    for scene in scenes {
        let line = serde_json::to_string(scene).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
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

fn transform_state(s: &[f64; STATE_DIM], cx: f64, cy: f64, cos: f64, sin: f64, yaw0: f64) -> [f64; STATE_DIM] {
    let (x, y) = (s[0] - cx, s[1] - cy);
    [
        cos * x + sin * y,
        -sin * x + cos * y,
        cos * s[2] + sin * s[3],
        -sin * s[2] + cos * s[3],
        cos * s[4] + sin * s[5],
        -sin * s[4] + cos * s[5],
        wrap_angle(s[6] - yaw0),
    ]
}

/// Translate so the target's t=0 position is the origin and rotate so its
/// t=0 yaw points along +x. Masked frames stay exact zeros; any attached
/// raster is dropped (rasterize again in the new frame).
pub fn to_target_frame(scene: &Scene) -> Result<Scene> {
    let cur = scene.target.current().ok_or_else(|| {
        Error::Contract(format!(
            "scene {}: target has no observed frame at t=0",
            scene.scene_id
        ))
    })?;
    let (cx, cy, yaw0) = (cur[0], cur[1], cur[6]);
    let (sin, cos) = yaw0.sin_cos();

    let tx_track = |track: &AgentTrack| -> AgentTrack {
        let mut out = track.clone();
        for (s, &m) in out.states.iter_mut().zip(&track.mask) {
            if m != 0 {
                *s = transform_state(s, cx, cy, cos, sin, yaw0);
            }
        }
        out
    };

    let tx_point = |p: &[f64; 2]| -> [f64; 2] {
        let (x, y) = (p[0] - cx, p[1] - cy);
        [cos * x + sin * y, -sin * x + cos * y]
    };

    Ok(Scene {
        scene_id: scene.scene_id.clone(),
        target: tx_track(&scene.target),
        neighbors: scene.neighbors.iter().map(tx_track).collect(),
        lanes: scene
            .lanes
            .iter()
            .map(|l| LanePolyline {
                id: l.id,
                points: l.points.iter().map(tx_point).collect(),
            })
            .collect(),
        bev: None,
        future: scene.future.iter().map(tx_point).collect(),
        label: scene.label,
    })
}

fn world_to_px(x: f64, y: f64, raster: &BevRaster) -> Option<(usize, usize)> {
    let col = ((x - raster.origin[0]) / raster.m_per_px + raster.w as f64 / 2.0).floor();
    let row = (raster.h as f64 / 2.0 - (y - raster.origin[1]) / raster.m_per_px).floor();
    if col < 0.0 || row < 0.0 || col >= raster.w as f64 || row >= raster.h as f64 {
        None
    } else {
        Some((row as usize, col as usize))
    }
}

/// Integer Bresenham over pixel indices; endpoints outside the raster are
/// clipped by skipping out-of-range pixels.
fn draw_line(raster: &mut BevRaster, ch: usize, a: (isize, isize), b: (isize, isize)) {
    let (mut r0, mut c0) = a;
    let (r1, c1) = b;
    let dr = (r1 - r0).abs();
    let dc = (c1 - c0).abs();
    let sr = if r0 < r1 { 1 } else { -1 };
    let sc = if c0 < c1 { 1 } else { -1 };
    let mut err = dc - dr;
    loop {
        if r0 >= 0 && c0 >= 0 && (r0 as usize) < raster.h && (c0 as usize) < raster.w {
            raster.set(ch, r0 as usize, c0 as usize, 1.0);
        }
        if r0 == r1 && c0 == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 > -dr {
            err -= dr;
            c0 += sc;
        }
        if e2 < dc {
            err += dc;
            r0 += sr;
        }
    }
}

fn px_unclipped(x: f64, y: f64, raster: &BevRaster) -> (isize, isize) {
    let col = ((x - raster.origin[0]) / raster.m_per_px + raster.w as f64 / 2.0).floor() as isize;
    let row = (raster.h as f64 / 2.0 - (y - raster.origin[1]) / raster.m_per_px).floor() as isize;
    (row, col)
}

fn draw_footprint(raster: &mut BevRaster, ch: usize, x: f64, y: f64) {
    if let Some((r, c)) = world_to_px(x, y, raster) {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                if rr >= 0 && cc >= 0 && (rr as usize) < raster.h && (cc as usize) < raster.w {
                    raster.set(ch, rr as usize, cc as usize, 1.0);
                }
            }
        }
    }
}

/// Channel 0: lane polylines as 1-px segments; channel 1: neighbor
/// footprints; channel 2: target footprint. Deterministic; off-raster
/// geometry is clipped.
pub fn rasterize_bev(scene: &Scene, h: usize, w: usize, m_per_px: f64) -> Result<BevRaster> {
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("raster {h}x{w} below minimum 8x8")));
    }
    let mut raster = BevRaster {
        c: 3,
        h,
        w,
        m_per_px,
        origin: [0.0, 0.0],
        data: vec![0.0; 3 * h * w],
    };
    for lane in &scene.lanes {
        for seg in lane.points.windows(2) {
            let a = px_unclipped(seg[0][0], seg[0][1], &raster);
            let b = px_unclipped(seg[1][0], seg[1][1], &raster);
            // Skip segments entirely outside an expanded bound to keep the
            // Bresenham walk short.
            let bound = (h.max(w) as isize) * 4;
            if a.0.abs() > bound && b.0.abs() > bound || a.1.abs() > bound && b.1.abs() > bound {
                continue;
            }
            draw_line(&mut raster, 0, a, b);
        }
    }
    for n in &scene.neighbors {
        if let Some(s) = n.current() {
            draw_footprint(&mut raster, 1, s[0], s[1]);
        }
    }
    if let Some(s) = scene.target.current() {
        draw_footprint(&mut raster, 2, s[0], s[1]);
    }
    Ok(raster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ScenarioClass;

    fn track(states: Vec<[f64; STATE_DIM]>, mask: Vec<u8>) -> AgentTrack {
        AgentTrack {
            id: 0,
            class: AgentClass::Vehicle,
            states,
            mask,
        }
    }

    fn simple_scene() -> Scene {
        let states = vec![
            [0.0; STATE_DIM],
            [1.0, 2.0, 1.0, 0.5, 0.0, 0.0, 0.3],
            [2.0, 3.0, 1.0, 0.5, 0.1, 0.0, 0.4],
        ];
        Scene {
            scene_id: "s0".into(),
            target: track(states.clone(), vec![0, 1, 1]),
            neighbors: vec![track(
                vec![
                    [5.0, 5.0, -1.0, 0.0, 0.0, 0.0, 1.0],
                    [4.0, 5.0, -1.0, 0.0, 0.0, 0.0, 1.0],
                    [3.0, 5.0, -1.0, 0.0, 0.0, 0.0, 1.0],
                ],
                vec![1, 1, 1],
            )],
            lanes: vec![LanePolyline {
                id: 1,
                points: vec![[0.0, 0.0], [10.0, 0.0], [12.0, 2.0]],
            }],
            bev: None,
            future: vec![[3.0, 4.0], [4.0, 5.0]],
            label: Some(ScenarioClass::Common),
        }
    }

    #[test]
    fn empty_reader_gives_empty_corpus() {
        let scenes = parse_corpus_reader(std::io::Cursor::new("")).unwrap();
        assert!(scenes.is_empty());
    }

    #[test]
    fn corpus_roundtrip_reparses_equal() {
        let scenes = vec![simple_scene(), simple_scene()];
        let mut buf = Vec::new();
        for s in &scenes {
            buf.extend_from_slice(serde_json::to_string(s).unwrap().as_bytes());
            buf.push(b'\n');
        }
        let back = parse_corpus_reader(std::io::Cursor::new(buf.clone())).unwrap();
        assert_eq!(back.len(), 2);
        let mut buf2 = Vec::new();
        for s in &back {
            buf2.extend_from_slice(serde_json::to_string(s).unwrap().as_bytes());
            buf2.push(b'\n');
        }
        assert_eq!(buf, buf2);
    }

    #[test]
    fn inconsistent_future_len_names_future_and_line() {
        let a = simple_scene();
        let mut b = simple_scene();
        b.future.push([9.0, 9.0]);
        let text = format!(
            "{}\n{}\n",
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        match parse_corpus_reader(std::io::Cursor::new(text)) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "future");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn masked_frame_with_nonzero_state_rejected() {
        let mut s = simple_scene();
        s.target.states[0][0] = 1.0; // frame 0 is masked out
        let text = serde_json::to_string(&s).unwrap();
        assert!(matches!(
            parse_corpus_reader(std::io::Cursor::new(text)),
            Err(Error::Schema { field: "target", .. })
        ));
    }

    #[test]
    fn malformed_json_names_line() {
        let text = "{not json}\n";
        match parse_corpus_reader(std::io::Cursor::new(text)) {
            Err(Error::Json { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected json error, got {other:?}"),
        }
    }

    #[test]
    fn target_frame_definition_holds() {
        let s = simple_scene();
        let t = to_target_frame(&s).unwrap();
        let cur = t.target.current().unwrap();
        assert!(cur[0].abs() < 1e-12 && cur[1].abs() < 1e-12);
        assert!(cur[6].abs() < 1e-12);
    }

    #[test]
    fn target_frame_is_idempotent() {
        let s = simple_scene();
        let once = to_target_frame(&s).unwrap();
        let twice = to_target_frame(&once).unwrap();
        assert_eq!(
            serde_json::to_string(&once).unwrap(),
            serde_json::to_string(&twice).unwrap()
        );
    }

    #[test]
    fn target_frame_preserves_distances() {
        let s = simple_scene();
        let t = to_target_frame(&s).unwrap();
        let before = {
            let a = s.target.states[2];
            let b = s.neighbors[0].states[2];
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        let after = {
            let a = t.target.states[2];
            let b = t.neighbors[0].states[2];
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn unobserved_t0_is_contract_error() {
        let mut s = simple_scene();
        s.target.mask[2] = 0;
        s.target.states[2] = [0.0; STATE_DIM];
        assert!(matches!(to_target_frame(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn raster_channels_empty_without_geometry() {
        let mut s = simple_scene();
        s.lanes.clear();
        s.neighbors.clear();
        let r = rasterize_bev(&s, 16, 16, 0.5).unwrap();
        assert!(r.data[..2 * 16 * 16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_at_origin_lights_center() {
        let s = to_target_frame(&simple_scene()).unwrap();
        let r = rasterize_bev(&s, 16, 16, 0.5).unwrap();
        assert_eq!(r.get(2, 8, 8), 1.0);
    }

    #[test]
    fn lane_pixels_match_bresenham_oracle() {
        let s = to_target_frame(&simple_scene()).unwrap();
        let r = rasterize_bev(&s, 32, 32, 0.5).unwrap();
        let lit: usize = r.data[..32 * 32].iter().filter(|&&v| v > 0.0).count();

        // Independent textbook Bresenham on the same endpoint pixels.
        let mut oracle = std::collections::HashSet::new();
        for lane in &s.lanes {
            for seg in lane.points.windows(2) {
                let to_px = |p: [f64; 2]| -> (isize, isize) {
                    let col = (p[0] / 0.5 + 16.0).floor() as isize;
                    let row = (16.0 - p[1] / 0.5).floor() as isize;
                    (row, col)
                };
                let (mut r0, mut c0) = to_px(seg[0]);
                let (r1, c1) = to_px(seg[1]);
                let dr = (r1 - r0).abs();
                let dc = (c1 - c0).abs();
                let sr: isize = if r0 < r1 { 1 } else { -1 };
                let sc: isize = if c0 < c1 { 1 } else { -1 };
                let mut err = dc - dr;
                loop {
                    if (0..32).contains(&r0) && (0..32).contains(&c0) {
                        oracle.insert((r0, c0));
                    }
                    if r0 == r1 && c0 == c1 {
                        break;
                    }
                    let e2 = 2 * err;
                    if e2 > -dr {
                        err -= dr;
                        c0 += sc;
                    }
                    if e2 < dc {
                        err += dc;
                        r0 += sr;
                    }
                }
            }
        }
        assert_eq!(lit, oracle.len());
    }
}
