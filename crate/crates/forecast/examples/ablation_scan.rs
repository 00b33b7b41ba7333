use forecast::config::TrainConfig;
use forecast::corpus::{generate_scene, GenConfig, ScenarioClass};
use forecast::model::WorldModel;
use forecast::runtime::{self, evaluate};
use forecast::scenes::Scene;
use ndgrad::RngStream;

fn corpus() -> (Vec<Scene>, Vec<Scene>) {
    let gen = GenConfig::default();
    let mut rng = RngStream::new(31, 0);
    let mut train = Vec::new();
    let plan = [
        (ScenarioClass::Common, 360),
        (ScenarioClass::Turning, 18),
        (ScenarioClass::UTurn, 12),
        (ScenarioClass::Braking, 18),
        (ScenarioClass::Acceleration, 12),
    ];
    for (class, count) in plan {
        for i in 0..count {
            train.push(generate_scene(format!("train-{class}-{i}"), class, &gen, &mut rng));
        }
    }
    let mut test = Vec::new();
    for class in [ScenarioClass::Turning, ScenarioClass::UTurn, ScenarioClass::Braking, ScenarioClass::Acceleration] {
        for i in 0..45 {
            test.push(generate_scene(format!("test-{class}-{i}"), class, &gen, &mut rng));
        }
    }
    (train, test)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let d_emb: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(24);
    let (train_scenes, test_scenes) = corpus();
    println!("epochs={epochs} d_emb={d_emb}");
    let mut wins = 0;
    for seed in [11u64, 12, 13, 14, 15] {
        let cfg = |experts: usize| TrainConfig {
            d_emb,
            heads: 4,
            modes: 5,
            experts,
            blocks: 2,
            t_hist: 5,
            t_f: 12,
            bev_hw: 16,
            backbone_width: 48,
            batch_size: 32,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let mut k4 = WorldModel::<f32>::new(&cfg(4)).unwrap();
        runtime::train(&mut k4, &train_scenes).unwrap();
        let a4 = evaluate(&k4, &test_scenes, &[5]).unwrap().get("minADE", 5).unwrap();
        let mut k1 = WorldModel::<f32>::new(&cfg(1)).unwrap();
        runtime::train(&mut k1, &train_scenes).unwrap();
        let a1 = evaluate(&k1, &test_scenes, &[5]).unwrap().get("minADE", 5).unwrap();
        let win = a4 < a1;
        if win { wins += 1; }
        println!("seed {seed}: K4 {a4:.3} vs K1 {a1:.3} -> {} ({:.0}s)", if win {"WIN"} else {"loss"}, t0.elapsed().as_secs_f64());
    }
    println!("wins: {wins}/5");
}
