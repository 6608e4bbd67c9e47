//! Small refiner training run: eight synthetic persons, two hundred
//! optimizer steps, loss curve printed along the way. This is the overfit
//! sanity setting; see `evaluate_scenes` for held-out evaluation.
//!
//! ```sh
//! cargo run --release --example train_refiner_small
//! ```

use bodyik::bodymodel::generate_synthetic_model;
use bodyik::harness::{synth_scene, train_refiner, TrainConfig};
use bodyik::refiner::RefinerConfig;

fn main() -> bodyik::Result<()> {
    let model = generate_synthetic_model(0, 240)?;
    let scenes = vec![
        synth_scene(&model, 101, 3, 0.02)?,
        synth_scene(&model, 102, 3, 0.02)?,
        synth_scene(&model, 103, 2, 0.02)?,
    ];
    let config = RefinerConfig::desk_check();
    let train = TrainConfig::desk_overfit(200);

    println!(
        "training on {} persons, d_model {}, {} steps",
        scenes.iter().map(|s| s.persons.len()).sum::<usize>(),
        config.d_model,
        train.max_steps.unwrap()
    );
    let (weights, report) = train_refiner(&model, &config, &scenes, 1000, 5, &train)?;

    for step in report.steps.iter().step_by(20) {
        println!(
            "step {:>4}: mesh {:.4}  pose {:.4}  adv(G) {:.4}  adv(D) {:.4}",
            step.step, step.mesh, step.pose, step.adv_generator, step.adv_discriminator
        );
    }
    let first = report.first_mesh_loss().unwrap();
    let last = report.last_mesh_loss().unwrap();
    println!(
        "mesh loss {first:.4} -> {last:.4} ({:.0}% reduction)",
        (1.0 - last / first) * 100.0
    );
    println!(
        "trained tensors: {} ({} weights total)",
        weights.tensors().len(),
        weights.tensors().iter().map(|(_, t)| t.len()).sum::<usize>()
    );
    Ok(())
}
