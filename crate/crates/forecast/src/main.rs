use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use forecast::config::{FileConfig, LossProfile, TrainConfig};
use forecast::corpus::{
    class_counts, classify_scenario, drop_frames, generate_synthetic, make_imbalance_splits,
    min_ttc, GenConfig, ScenarioClass, SplitSpec,
};
use forecast::error::Result;
use forecast::model::WorldModel;
use forecast::runtime::{
    self, evaluate, evaluate_per_class, gate_rows_csv, loss_log_csv, per_class_csv, route_stats,
    RngState,
};
use forecast::scenes::{parse_corpus, write_corpus};
use ndgrad::RngStream;

#[derive(Parser)]
#[command(name = "forecast", version, about = "Motion forecasting harness and corpus toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// TrainConfig overrides; flag names match the JSON field names verbatim.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long = "learning_rate")]
    learning_rate: Option<f64>,
    #[arg(long = "t_max")]
    t_max: Option<usize>,
    #[arg(long = "eta_min")]
    eta_min: Option<f64>,
    #[arg(long = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long = "epochs")]
    epochs: Option<usize>,
    #[arg(long = "seed")]
    seed: Option<u64>,
    #[arg(long = "experts")]
    experts: Option<usize>,
    #[arg(long = "blocks")]
    blocks: Option<usize>,
    #[arg(long = "modes")]
    modes: Option<usize>,
    #[arg(long = "d_emb")]
    d_emb: Option<usize>,
    #[arg(long = "loss", value_parser = parse_loss)]
    loss: Option<LossProfile>,
    #[arg(long = "heads")]
    heads: Option<usize>,
    #[arg(long = "dropout")]
    dropout: Option<f64>,
    #[arg(long = "t_hist")]
    t_hist: Option<usize>,
    #[arg(long = "t_f")]
    t_f: Option<usize>,
    #[arg(long = "bev_hw")]
    bev_hw: Option<usize>,
    #[arg(long = "bev_m_per_px")]
    bev_m_per_px: Option<f64>,
    #[arg(long = "backbone_width")]
    backbone_width: Option<usize>,
    #[arg(long = "backbone_seed")]
    backbone_seed: Option<u64>,
    #[arg(long = "ssm_state")]
    ssm_state: Option<usize>,
    #[arg(long = "topk")]
    topk: Option<usize>,
    #[arg(long = "grad_clip")]
    grad_clip: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { cfg.$f = v; } )* };
        }
        set!(
            learning_rate,
            t_max,
            eta_min,
            batch_size,
            epochs,
            seed,
            experts,
            blocks,
            modes,
            d_emb,
            loss,
            heads,
            dropout,
            t_hist,
            t_f,
            bev_hw,
            bev_m_per_px,
            backbone_width,
            backbone_seed,
            ssm_state,
            grad_clip
        );
        if self.topk.is_some() {
            cfg.topk = self.topk;
        }
    }
}

/// CurationConfig overrides; flag names match the JSON field names.
#[derive(Args, Default)]
struct CurationOverrides {
    #[arg(long = "ttc_risk_s")]
    ttc_risk_s: Option<f64>,
    #[arg(long = "yaw_turn_rad")]
    yaw_turn_rad: Option<f64>,
    #[arg(long = "yaw_uturn_rad")]
    yaw_uturn_rad: Option<f64>,
    #[arg(long = "congested_vehicles")]
    congested_vehicles: Option<usize>,
    #[arg(long = "congested_pedestrians")]
    congested_pedestrians: Option<usize>,
    #[arg(long = "brake_accel_mps2", allow_hyphen_values = true)]
    brake_accel_mps2: Option<f64>,
    #[arg(long = "accel_mps2")]
    accel_mps2: Option<f64>,
}

impl CurationOverrides {
    fn apply(&self, cfg: &mut forecast::CurationConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            ttc_risk_s,
            yaw_turn_rad,
            yaw_uturn_rad,
            congested_vehicles,
            congested_pedestrians,
            brake_accel_mps2,
            accel_mps2
        );
    }
}

fn parse_loss(s: &str) -> std::result::Result<LossProfile, String> {
    s.parse::<LossProfile>().map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "t_hist", default_value_t = 5)]
        t_hist: usize,
        #[arg(long = "t_f", default_value_t = 12)]
        t_f: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        /// Class mix, e.g. "Common=0.4,Turning=0.2"; unnamed classes keep
        /// their default weights only when the flag is absent.
        #[arg(long)]
        mix: Option<String>,
        #[command(flatten)]
        curation: CurationOverrides,
    },
    /// Classify scenes, attach labels, and emit a per-class count report.
    Curate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        curation: CurationOverrides,
    },
    /// Zero out m random history frames per track.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drop: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Subsample per-class counts into a training split.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// e.g. "Common=1000,Turning=40"
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "loss_log")]
        loss_log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated mode counts, e.g. "5,10"
        #[arg(long, default_value = "5,10")]
        g: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "per_class")]
        per_class: Option<PathBuf>,
        /// Keep only the top-k gates at inference.
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Export per-(block, expert, scenario) gate telemetry.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mix(text: &str) -> Result<Vec<(ScenarioClass, f64)>> {
    let mut mix = Vec::new();
    for item in text.split(',').filter(|s| !s.trim().is_empty()) {
        let (class, weight) = item.split_once('=').ok_or_else(|| {
            forecast::Error::Config(format!("mix item '{item}' missing '='"))
        })?;
        mix.push((
            class.trim().parse()?,
            weight
                .trim()
                .parse::<f64>()
                .map_err(|_| forecast::Error::Config(format!("bad weight in '{item}'")))?,
        ));
    }
    Ok(mix)
}

fn parse_g_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| forecast::Error::Config(format!("bad g value '{s}'")))
        })
        .collect()
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(|e| forecast::Error::Io {
            path: p.display().to_string(),
            source: e,
        }),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            out,
            n,
            seed,
            t_hist,
            t_f,
            noise_std,
            mix,
            curation,
        } => {
            let mut gen = GenConfig {
                t_hist,
                t_f,
                noise_std,
                ..GenConfig::default()
            };
            curation.apply(&mut gen.curation);
            gen.curation.validate()?;
            if let Some(m) = mix {
                gen.mix = parse_mix(&m)?;
            }
            let mut rng = RngStream::new(seed, 0);
            let scenes = generate_synthetic(&gen, n, &mut rng);
            write_corpus(&out, &scenes)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
            Ok(())
        }
        Cmd::Curate {
            input,
            out,
            report,
            curation,
        } => {
            let mut cfg = forecast::CurationConfig::default();
            curation.apply(&mut cfg);
            cfg.validate()?;
            let mut scenes = parse_corpus(&input)?;
            let mut high_risk: std::collections::BTreeMap<ScenarioClass, usize> = Default::default();
            for scene in &mut scenes {
                let class = classify_scenario(scene, &cfg);
                scene.label = Some(class);
                if min_ttc(scene) < cfg.ttc_risk_s {
                    *high_risk.entry(class).or_insert(0) += 1;
                }
            }
            let counts = class_counts(&scenes);
            let mut csv = String::from("class,count,high_risk_count\n");
            for (class, count) in &counts {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    class,
                    count,
                    high_risk.get(class).copied().unwrap_or(0)
                ));
            }
            if let Some(out) = out {
                write_corpus(&out, &scenes)?;
            }
            write_or_print(&report, &csv)
        }
        Cmd::Perturb {
            input,
            out,
            drop,
            seed,
        } => {
            let scenes = parse_corpus(&input)?;
            let mut rng = RngStream::new(seed, 0);
            let perturbed: Result<Vec<_>> =
                scenes.iter().map(|s| drop_frames(s, drop, &mut rng)).collect();
            write_corpus(&out, &perturbed?)
        }
        Cmd::Split {
            input,
            out,
            spec,
            seed,
        } => {
            let scenes = parse_corpus(&input)?;
            let spec = SplitSpec::parse(&spec)?;
            let split = make_imbalance_splits(&scenes, &spec, seed)?;
            write_corpus(&out, &split)?;
            eprintln!("kept {} scenes", split.len());
            Ok(())
        }
        Cmd::Train {
            corpus,
            out,
            config,
            loss_log,
            train,
        } => {
            let mut cfg = match config {
                Some(path) => FileConfig::load(&path)?.train,
                None => TrainConfig::default(),
            };
            train.apply(&mut cfg);
            cfg.validate()?;
            let scenes = parse_corpus(&corpus)?;
            let mut model = WorldModel::<f32>::new(&cfg)?;
            let (log, next_stream) = runtime::train(&mut model, &scenes)?;
            runtime::save(
                &model,
                &RngState {
                    seed: cfg.seed,
                    next_stream,
                },
                &out,
            )?;
            if let Some(path) = loss_log {
                write_or_print(&Some(path), &loss_log_csv(&log))?;
            }
            if let Some(last) = log.last() {
                eprintln!(
                    "trained {} epochs; final loss {:.4} (lr {:.2e})",
                    log.len(),
                    last.report.total,
                    last.lr
                );
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            corpus,
            g,
            out,
            per_class,
            topk,
        } => {
            let (mut model, _) = runtime::load::<f32>(&checkpoint)?;
            if topk.is_some() {
                model.cfg.topk = topk;
                model.cfg.validate()?;
            }
            let scenes = parse_corpus(&corpus)?;
            let g_list = parse_g_list(&g)?;
            let report = evaluate(&model, &scenes, &g_list)?;
            write_or_print(&out, &report.to_csv())?;
            if let Some(path) = per_class {
                let rows = evaluate_per_class(&model, &scenes, &g_list)?;
                write_or_print(&Some(path), &per_class_csv(&rows))?;
            }
            Ok(())
        }
        Cmd::RouteStats {
            checkpoint,
            corpus,
            out,
        } => {
            let (model, _) = runtime::load::<f32>(&checkpoint)?;
            let scenes = parse_corpus(&corpus)?;
            let rows = route_stats(&model, &scenes)?;
            write_or_print(&out, &gate_rows_csv(&rows))
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
