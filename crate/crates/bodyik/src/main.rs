use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use bodyik::bodymodel::{generate_synthetic_model, load_model, params_to_mesh, save_model};
use bodyik::harness::files::{
    load_refiner_config, load_scenes, load_weights, save_scenes, save_weights, write_obj,
};
use bodyik::harness::report::{export_report, ReportFormat};
use bodyik::harness::{
    evaluate, run_roundtrip, synth_scenes, train_refiner, EvalOptions, TrainConfig,
};
use bodyik::refiner::{refine, RefinerConfig};
use bodyik::Error;

/// Skeleton-to-mesh pipeline: synthetic models and scenes, analytic IK
/// round trips, refiner training and evaluation.
#[derive(Parser)]
#[command(name = "bodyik", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic body model file.
    GenModel {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        vertices: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate ground-truth scenes for later runs.
    GenScenes {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        #[arg(long, default_value_t = 3)]
        persons: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// IK round trip over scenes: observed skeletons to parameters to
    /// meshes, reported against ground truth.
    Roundtrip {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Isotropic observation noise in meters.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the relation-aware refiner on scenes.
    TrainRefiner {
        #[arg(long)]
        model: PathBuf,
        /// Refiner architecture config JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Observation noise applied to the loaded scenes (meters).
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr_refiner: Option<f64>,
        #[arg(long)]
        lr_other: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate scenes with (optionally) a trained refiner.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
        /// Observation noise applied to the loaded scenes (meters).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for Wavefront OBJ dumps of the (refined) meshes.
        #[arg(long)]
        dump_obj: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    match run(cli) {
        Ok(()) => {
            eprintln!("done in {:.3}s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenModel {
            seed,
            vertices,
            out,
        } => {
            let model = generate_synthetic_model(seed, vertices)?;
            save_model(&model, &out)?;
            eprintln!(
                "wrote model ({} vertices, {} faces) to {}",
                model.vertex_count(),
                model.faces.len(),
                out.display()
            );
            Ok(())
        }
        Command::GenScenes {
            model,
            seed,
            scenes,
            persons,
            out,
        } => {
            let model = load_model(&model)?;
            let generated = synth_scenes(&model, seed, scenes, persons, 0.0)?;
            for scene in &generated {
                scene.validate(&model)?;
            }
            save_scenes(&generated, &out)?;
            eprintln!(
                "wrote {scenes} scenes x {persons} persons to {}",
                out.display()
            );
            Ok(())
        }
        Command::Roundtrip {
            model,
            scenes,
            noise,
            seed,
            report,
        } => {
            let model = load_model(&model)?;
            let loaded = load_scenes(&scenes, &model, noise, seed)?;
            let mut rows = Vec::new();
            for (idx, scene) in loaded.iter().enumerate() {
                let scene_report = run_roundtrip(&model, scene)?;
                rows.extend(scene_report.rows.into_iter().map(|mut r| {
                    r.scene = idx;
                    r
                }));
            }
            let full = bodyik::harness::report::ExperimentReport::new(
                json!({
                    "experiment": "roundtrip",
                    "scenes": loaded.len(),
                    "noise": noise,
                    "seed": seed,
                }),
                rows,
            );
            export_report(&full, &report, ReportFormat::Json)?;
            if let Some(agg) = full.aggregate("mpjpe_mm") {
                eprintln!("mpjpe mean {:.3} mm over {} persons", agg.mean, agg.count);
            }
            Ok(())
        }
        Command::TrainRefiner {
            model,
            config,
            scenes,
            epochs,
            seed,
            out_weights,
            report,
            noise,
            steps,
            lr_refiner,
            lr_other,
            batch_size,
        } => {
            let model = load_model(&model)?;
            let refiner_config = match config {
                Some(path) => load_refiner_config(&path)?,
                None => RefinerConfig::default(),
            };
            let loaded = load_scenes(&scenes, &model, noise, seed)?;
            let mut train_config = TrainConfig {
                max_steps: steps,
                ..TrainConfig::default()
            };
            if let Some(lr) = lr_refiner {
                train_config.lr_refiner = lr;
            }
            if let Some(lr) = lr_other {
                train_config.lr_other = lr;
            }
            if let Some(b) = batch_size {
                train_config.batch_size = b;
            }
            let (weights, train_report) =
                train_refiner(&model, &refiner_config, &loaded, epochs, seed, &train_config)?;
            save_weights(&weights, &out_weights)?;
            let json = serde_json::to_string_pretty(&train_report).map_err(|e| Error::Json {
                path: report.display().to_string(),
                source: e,
            })?;
            std::fs::write(&report, json + "\n").map_err(|e| Error::Io {
                path: report.display().to_string(),
                source: e,
            })?;
            if let (Some(first), Some(last)) = (
                train_report.first_mesh_loss(),
                train_report.last_mesh_loss(),
            ) {
                eprintln!(
                    "trained {} steps, mesh loss {first:.4} -> {last:.4}",
                    train_report.steps.len()
                );
            }
            Ok(())
        }
        Command::Eval {
            model,
            weights,
            scenes,
            report,
            format,
            noise,
            seed,
            dump_obj,
        } => {
            let model = load_model(&model)?;
            let loaded = load_scenes(&scenes, &model, noise, seed)?;
            let weights = weights.map(|p| load_weights(&p)).transpose()?;
            let (eval_report, stats) =
                evaluate(&model, weights.as_ref(), &loaded, &EvalOptions::default())?;
            export_report(&eval_report, &report, format.parse()?)?;
            if let Some(dir) = dump_obj {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?;
                dump_meshes(&model, weights.as_ref(), &loaded, &dir)?;
            }
            eprintln!(
                "evaluated {} scenes ({} refiner calls)",
                loaded.len(),
                stats.refiner_calls
            );
            Ok(())
        }
    }
}

/// Write per-person OBJ meshes (refined when weights are present).
fn dump_meshes(
    model: &bodyik::bodymodel::BodyModel,
    weights: Option<&bodyik::refiner::RefinerWeights>,
    scenes: &[bodyik::harness::Scene],
    dir: &std::path::Path,
) -> Result<(), Error> {
    use bodyik::harness::{init_person, FEATURE_PROVIDER_SEED};
    use bodyik::refiner::{
        assemble_tokens, forward, select_inference_contexts, FeatureProvider, Synthetic2dProvider,
    };

    for (scene_idx, scene) in scenes.iter().enumerate() {
        let inits: Vec<_> = scene
            .persons
            .iter()
            .map(|p| init_person(model, p))
            .collect::<Result<_, _>>()?;
        let observed: Vec<_> = scene.persons.iter().map(|p| p.observed.clone()).collect();
        for target in 0..inits.len() {
            let mesh = match weights {
                None => params_to_mesh(model, &inits[target].params)?.0,
                Some(w) => {
                    let provider = Synthetic2dProvider::new(w.config.feat_dim, FEATURE_PROVIDER_SEED);
                    let group = select_inference_contexts(target, &observed, w.config.max_persons);
                    let members: Vec<_> = group
                        .iter()
                        .map(|&i| {
                            let init2d = bodyik::losses::project_ortho(
                                &inits[i].joints_abs.root_relative(),
                                &bodyik::ik::C_INIT,
                            );
                            let features = provider
                                .person_features(&scene.persons[i].image_obs2d, &init2d);
                            (inits[i].params.clone(), features)
                        })
                        .collect();
                    let input = assemble_tokens(&members, &w.config)?;
                    let out = forward(w, &input, false)?;
                    let refined = refine(&inits[target].params, &out.deltas[0]);
                    params_to_mesh(model, &refined)?.0
                }
            };
            let path = dir.join(format!("scene{scene_idx:03}_person{target:02}.obj"));
            write_obj(&mesh, &path)?;
        }
    }
    Ok(())
}
