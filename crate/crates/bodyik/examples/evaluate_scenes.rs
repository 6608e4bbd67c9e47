//! Full evaluation flow: synthesize scenes, run the IK initialization,
//! match predictions to ground truth and print the metric table, then
//! train a refiner on separate scenes and compare held-out metrics with
//! and without refinement.
//!
//! ```sh
//! cargo run --release --example evaluate_scenes
//! ```

use bodyik::bodymodel::generate_synthetic_model;
use bodyik::harness::{evaluate, synth_scenes, train_refiner, EvalOptions, TrainConfig};
use bodyik::refiner::RefinerConfig;

fn main() -> bodyik::Result<()> {
    let model = generate_synthetic_model(0, 240)?;
    let noise = 0.02;
    let heldout = synth_scenes(&model, 9000, 6, 3, noise)?;

    // Initialization-only metrics.
    let (report, _) = evaluate(&model, None, &heldout, &EvalOptions::default())?;
    println!("scene  f1     mpjpe   pa-mpjpe  mve      pck@150");
    for row in &report.rows {
        println!(
            "{:>5}  {:<5.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            row.scene,
            row.f1.unwrap(),
            row.mpjpe_mm.unwrap(),
            row.pa_mpjpe_mm.unwrap(),
            row.mve_mm.unwrap(),
            row.pck3d.unwrap()
        );
    }
    for metric in ["mpjpe_mm", "pa_mpjpe_mm", "mve_mm", "nmje_mm"] {
        let agg = report.aggregate(metric).unwrap();
        println!("{metric:>16}: mean {:.3}, median {:.3}", agg.mean, agg.median);
    }

    // Train on a disjoint set of scenes and evaluate the refinement.
    println!("\ntraining a desk refiner (this takes a few minutes) ...");
    let train_scenes = synth_scenes(&model, 500, 600, 3, noise)?;
    let config = RefinerConfig::desk_check();
    let (weights, _) = train_refiner(
        &model,
        &config,
        &train_scenes,
        10_000,
        11,
        &TrainConfig::desk_generalize(),
    )?;
    let (refined_report, stats) =
        evaluate(&model, Some(&weights), &heldout, &EvalOptions::default())?;
    let init = refined_report.aggregate("mpjpe_mm").unwrap().mean;
    let refined = refined_report.aggregate("mpjpe_refined_mm").unwrap().mean;
    println!(
        "held-out mpjpe: initialization {init:.2} mm, refined {refined:.2} mm \
         ({} refiner calls)",
        stats.refiner_calls
    );
    Ok(())
}
