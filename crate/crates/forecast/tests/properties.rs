//! Property tests over the data model and metrics.

use forecast::corpus::ScenarioClass;
use forecast::objectives::{min_ade, min_fde, miss_rate, TrajectoryForecast};
use forecast::scenes::{to_target_frame, AgentClass, AgentTrack, LanePolyline, Scene};
use proptest::prelude::*;

fn arb_state() -> impl Strategy<Value = [f64; 7]> {
    (
        -100.0f64..100.0,
        -100.0f64..100.0,
        -20.0f64..20.0,
        -20.0f64..20.0,
        -5.0f64..5.0,
        -5.0f64..5.0,
        -3.1f64..3.1,
    )
        .prop_map(|(x, y, vx, vy, ax, ay, yaw)| [x, y, vx, vy, ax, ay, yaw])
}

fn arb_scene() -> impl Strategy<Value = Scene> {
    (
        proptest::collection::vec(arb_state(), 5),
        proptest::collection::vec(proptest::collection::vec(arb_state(), 5), 1..4),
        proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..6),
    )
        .prop_map(|(target_states, neighbor_states, lane_pts)| {
            let track = |states: Vec<[f64; 7]>, id: u64| AgentTrack {
                id,
                class: AgentClass::Vehicle,
                states,
                mask: vec![1; 5],
            };
            let mut points: Vec<[f64; 2]> = lane_pts.iter().map(|&(x, y)| [x, y]).collect();
            points.dedup();
            if points.len() < 2 {
                points = vec![[0.0, 0.0], [1.0, 1.0]];
            }
            Scene {
                scene_id: "prop".into(),
                target: track(target_states, 0),
                neighbors: neighbor_states
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| track(s, i as u64 + 1))
                    .collect(),
                lanes: vec![LanePolyline { id: 0, points }],
                bev: None,
                future: (1..=6).map(|t| [t as f64, 0.5 * t as f64]).collect(),
                label: Some(ScenarioClass::Common),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn target_frame_is_a_rigid_motion(scene in arb_scene()) {
        let t = to_target_frame(&scene).unwrap();
        // pairwise distances between all observed t=0 agents are preserved
        let pos = |s: &Scene| -> Vec<[f64; 2]> {
            std::iter::once(&s.target)
                .chain(&s.neighbors)
                .filter_map(|a| a.current().map(|c| [c[0], c[1]]))
                .collect()
        };
        let before = pos(&scene);
        let after = pos(&t);
        prop_assert_eq!(before.len(), after.len());
        for i in 0..before.len() {
            for j in (i + 1)..before.len() {
                let d0 = ((before[i][0] - before[j][0]).powi(2) + (before[i][1] - before[j][1]).powi(2)).sqrt();
                let d1 = ((after[i][0] - after[j][0]).powi(2) + (after[i][1] - after[j][1]).powi(2)).sqrt();
                prop_assert!((d0 - d1).abs() < 1e-9, "distance {d0} became {d1}");
            }
        }
        // relative yaw between target and each neighbor preserved
        let ty0 = scene.target.current().unwrap()[6];
        let ty1 = t.target.current().unwrap()[6];
        for (n0, n1) in scene.neighbors.iter().zip(&t.neighbors) {
            let wrap = |a: f64| {
                let mut a = a % std::f64::consts::TAU;
                if a > std::f64::consts::PI { a -= std::f64::consts::TAU; }
                if a <= -std::f64::consts::PI { a += std::f64::consts::TAU; }
                a
            };
            let r0 = wrap(n0.current().unwrap()[6] - ty0);
            let r1 = wrap(n1.current().unwrap()[6] - ty1);
            prop_assert!((wrap(r0 - r1)).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_roundtrip_is_lossless(scene in arb_scene()) {
        let line = serde_json::to_string(&scene).unwrap();
        let parsed = forecast::scenes::parse_corpus_reader(std::io::Cursor::new(format!("{line}\n"))).unwrap();
        prop_assert_eq!(parsed.len(), 1);
        prop_assert_eq!(serde_json::to_string(&parsed[0]).unwrap(), line);
    }

    #[test]
    fn metrics_monotone_in_g_and_bounded(
        offsets in proptest::collection::vec(0.0f64..10.0, 4..10),
        seedling in 0u64..1000,
    ) {
        let t_f = 8;
        let gt: Vec<[f64; 2]> = (0..t_f).map(|t| [t as f64, 0.0]).collect();
        let locations: Vec<Vec<[f64; 2]>> = offsets
            .iter()
            .map(|&off| gt.iter().map(|p| [p[0], p[1] + off]).collect())
            .collect();
        let k = locations.len();
        let probs: Vec<f64> = (0..k)
            .map(|i| 1.0 + ((seedling as usize + i * 7) % 5) as f64)
            .collect();
        let total: f64 = probs.iter().sum();
        let f = TrajectoryForecast {
            scales: locations.iter().map(|t| vec![[1.0, 1.0]; t.len()]).collect(),
            locations,
            probs: probs.into_iter().map(|p| p / total).collect(),
        };
        let fs = vec![f];
        let gts = vec![gt];
        let mut prev_ade = f64::INFINITY;
        let mut prev_fde = f64::INFINITY;
        let mut prev_mr = f64::INFINITY;
        for g in 1..=k {
            let ade = min_ade(&fs, &gts, g).unwrap();
            let fde = min_fde(&fs, &gts, g).unwrap();
            let mr = miss_rate(&fs, &gts, g, 2.0).unwrap();
            prop_assert!(ade <= prev_ade + 1e-12);
            prop_assert!(fde <= prev_fde + 1e-12);
            prop_assert!(mr <= prev_mr + 1e-12);
            prop_assert!((0.0..=1.0).contains(&mr));
            prev_ade = ade;
            prev_fde = fde;
            prev_mr = mr;
        }
    }
}
