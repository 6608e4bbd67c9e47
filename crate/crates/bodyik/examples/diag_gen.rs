use bodyik::bodymodel::generate_synthetic_model;
use bodyik::harness::{evaluate, synth_scenes, train_refiner, EvalOptions, TrainConfig};
use bodyik::losses::LossWeights;
use bodyik::refiner::RefinerConfig;

fn main() {
    let model = generate_synthetic_model(0, 240).unwrap();
    let noise = 0.02;
    let heldout = synth_scenes(&model, 9000, 10, 3, noise).unwrap();

    for (nscenes, steps, lr, meshw, mask, decay, batch, dmodel) in [
        (600usize, 3000usize, 1e-3, 0.05, false, 0.95, 16usize, 32usize),
        (600, 3000, 1e-3, 0.0, false, 0.95, 16, 32),
        (300, 2000, 1e-3, 0.05, true, 0.95, 16, 32),
        (600, 2000, 1e-3, 0.05, false, 0.97, 8, 64),
    ] {
        let train_scenes = synth_scenes(&model, 500, nscenes, 3, noise).unwrap();
        let cfg = RefinerConfig {
            d_model: dmodel,
            d_ff: dmodel * 4,
            ..RefinerConfig::desk_check()
        };
        let tc = TrainConfig {
            lr_refiner: lr,
            lr_other: 1e-4,
            lr_decay: decay,
            batch_size: batch,
            mask_inputs: mask,
            loss_weights: LossWeights { pose: 1.0, mesh: meshw, adv_generator: 0.0, adv_discriminator: 0.0, ..LossWeights::default() },
            max_steps: Some(steps),
            ..TrainConfig::default()
        };
        let (weights, report) = train_refiner(&model, &cfg, &train_scenes, 10_000, 11, &tc).unwrap();
        let (held_r, _) = evaluate(&model, Some(&weights), &heldout, &EvalOptions::default()).unwrap();
        let (train_r, _) = evaluate(&model, Some(&weights), &train_scenes[..10], &EvalOptions::default()).unwrap();
        println!(
            "scenes={nscenes} steps={steps} lr={lr} meshw={meshw} mask={mask} decay={decay} batch={batch} d={dmodel}: pose {:.4}->{:.4} | TRAIN {:.2}->{:.2} | HELD {:.2}->{:.2}",
            report.steps.first().unwrap().pose, report.steps.last().unwrap().pose,
            train_r.aggregate("mpjpe_mm").unwrap().mean,
            train_r.aggregate("mpjpe_refined_mm").unwrap().mean,
            held_r.aggregate("mpjpe_mm").unwrap().mean,
            held_r.aggregate("mpjpe_refined_mm").unwrap().mean,
        );
    }
}
