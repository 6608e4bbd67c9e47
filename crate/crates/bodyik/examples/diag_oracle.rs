use bodyik::autodiff::Tape;
use bodyik::bodymodel::tape::{tape_rel_joints, DiffFkContext};
use bodyik::bodymodel::{generate_synthetic_model, params_to_mesh, MeshParams};
use bodyik::harness::{init_person, synth_scenes};
use bodyik::ik::{Skeleton, C_INIT};
use bodyik::metrics::mpjpe;
use bodyik::rotmath::ROT6D_IDENTITY;
use ndarray::Array2;

fn main() {
    let model = generate_synthetic_model(0, 240).unwrap();
    let scenes = synth_scenes(&model, 9000, 10, 3, 0.02).unwrap();
    let ctx = DiffFkContext::new(&model);

    // Baseline + Oracle A: shrinkage toward the rest pose.
    for alpha in [0.0, 0.05, 0.1, 0.15, 0.2, 0.3] {
        let mut total = 0.0;
        let mut count = 0;
        for scene in &scenes {
            for person in &scene.persons {
                let init = init_person(&model, person).unwrap();
                let mut params = init.params.clone();
                for k in 0..24 {
                    for c in 0..6 {
                        params.theta[k][c] += alpha * (ROT6D_IDENTITY[c] - params.theta[k][c]);
                    }
                }
                let (_, joints) = params_to_mesh(&model, &params).unwrap();
                let shift = person.observed.root() - joints[0];
                let pred = Skeleton::new(std::array::from_fn(|k| joints[k] + shift));
                total += mpjpe(&pred, &person.gt_skeleton.abs3d);
                count += 1;
            }
        }
        println!("shrinkage alpha={alpha}: mpjpe {:.3}", total / count as f64);
    }

    // Oracle B: per-person optimization of theta against the 2D evidence
    // channel plus a proximity prior.
    for (steps, lr, lambda) in [(120usize, 0.01, 1.0), (200, 0.01, 0.3), (200, 0.02, 1.0), (300, 0.02, 3.0)] {
        let mut total = 0.0;
        let mut count = 0;
        for scene in &scenes {
            for person in &scene.persons {
                let init = init_person(&model, person).unwrap();
                let mut theta = init.params.theta_array();
                let mut camera = Array2::from_shape_fn((1, 3), |(_, c)| C_INIT[c]);
                let beta = init.params.beta_row();
                let evidence = Array2::from_shape_fn((24, 2), |(k, c)| person.image_obs2d[k][c]);
                let theta0 = theta.clone();
                let mut adam = bodyik::harness::Adam::new(&[(24, 6), (1, 3)]);
                for _ in 0..steps {
                    let mut tape = Tape::new();
                    let t = tape.leaf(theta.clone());
                    let cam = tape.leaf(camera.clone());
                    let b = tape.leaf(beta.clone());
                    let rel = tape_rel_joints(&mut tape, &ctx, t, b);
                    let proj = bodyik::losses::tape_project_ortho(&mut tape, rel, cam);
                    let ev = tape.leaf(evidence.clone());
                    let d = tape.sub(proj, ev);
                    let fit = tape.sum_squares(d);
                    let t0 = tape.leaf(theta0.clone());
                    let dt = tape.sub(t, t0);
                    let prior = tape.sum_squares(dt);
                    let prior_w = tape.scale(prior, lambda);
                    let loss = tape.add(fit, prior_w);
                    tape.backward(loss);
                    let gt = tape.grad(t).clone();
                    let gc = tape.grad(cam).clone();
                    adam.step(lr, &mut [&mut theta, &mut camera], &[gt, gc]);
                }
                let params = MeshParams {
                    theta: MeshParams::theta_from_array(&theta),
                    beta: init.params.beta,
                    camera: C_INIT,
                };
                let (_, joints) = params_to_mesh(&model, &params).unwrap();
                let shift = person.observed.root() - joints[0];
                let pred = Skeleton::new(std::array::from_fn(|k| joints[k] + shift));
                total += mpjpe(&pred, &person.gt_skeleton.abs3d);
                count += 1;
            }
        }
        println!("evidence-fit steps={steps} lr={lr} lambda={lambda}: mpjpe {:.3}", total / count as f64);
    }
}
