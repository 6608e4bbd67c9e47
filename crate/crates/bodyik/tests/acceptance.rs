//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers. Run with
//! `cargo test --test acceptance -- --nocapture`.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use bodyik::autodiff::finite_diff::{finite_diff_grad, grads_agree};
use bodyik::autodiff::Tape;
use bodyik::bodymodel::{
    forward_kinematics, generate_synthetic_model, BodyModel, MeshParams, NUM_JOINTS, NUM_SHAPE,
};
use bodyik::harness::{
    evaluate, run_roundtrip, synth_scene, synth_scenes, train_refiner, EvalOptions, TrainConfig,
};
use bodyik::ik::{solve_ik, Skeleton, C_INIT};
use bodyik::losses::{
    tape_loss_adv_discriminator, tape_loss_adv_generator, tape_loss_angle, tape_loss_mesh,
    tape_loss_pose, tape_loss_shape, Discriminator, SkeletonGT,
};
use bodyik::metrics::{mpjpe, nmje_nmve, pa_mpjpe, pck3d, PCK_THRESHOLD_MM};
use bodyik::refiner::{
    assemble_tokens, forward, mask_patches, refine, tape_forward, ParamDelta, RefinerConfig,
    RefinerWeights,
};
use bodyik::rotmath::{
    is_valid_rotation, max_abs_diff, rodrigues, rot6d_to_matrix, RotMat, Vec3,
};

fn desk_model() -> BodyModel {
    generate_synthetic_model(0, 600).unwrap()
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 0.1 {
            return v / v.norm();
        }
    }
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> RotMat {
    let axis = random_unit(rng);
    let angle = rng.random_range(0.0..max_angle);
    rodrigues(&axis, angle.cos(), angle.sin()).unwrap()
}

#[test]
fn c01_ik_round_trip_500_persons() {
    let started = Instant::now();
    let model = desk_model();
    let mut worst_joint = 0.0f64;
    let mut worst_rot = 0.0f64;
    for i in 0..500u64 {
        let scene = synth_scene(&model, 0xC1_0000 + i, 1, 0.0).unwrap();
        let person = &scene.persons[0];
        let solution = solve_ik(
            &model,
            &person.observed,
            &person.gt_twists,
            &person.gt_params.beta,
        )
        .unwrap();
        let gt_rot = person.gt_params.rotations().unwrap();
        let solved_rot: [RotMat; NUM_JOINTS] =
            std::array::from_fn(|k| rot6d_to_matrix(&solution.theta[k]).unwrap());
        let (joints, _) = forward_kinematics(&model, &solved_rot, &person.gt_params.beta);
        let shift = person.gt_skeleton.abs3d.root() - joints[0];
        for k in 0..NUM_JOINTS {
            let joint_err = (joints[k] + shift - person.gt_skeleton.abs3d.joints[k]).norm();
            worst_joint = worst_joint.max(joint_err);
            worst_rot = worst_rot.max(max_abs_diff(&solved_rot[k], &gt_rot[k]));
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(worst_joint < 1e-6, "joint error {worst_joint} m");
    assert!(worst_rot < 1e-5, "rotation element error {worst_rot}");
    assert!(elapsed < 10.0, "runtime {elapsed}s exceeds 10s");
    println!(
        "[PASS] criterion 1: IK round trip over 500 persons, max joint err {worst_joint:.2e} m, \
         max rotation err {worst_rot:.2e}, {elapsed:.2}s"
    );
}

#[test]
fn c02_twist_swing_recomposition() {
    let model = desk_model();
    let rest = model.rest_joints();
    let mut rng = ChaCha12Rng::seed_from_u64(0xC2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let r = random_rotation(&mut rng, std::f64::consts::PI);
        // Alternate synthetic axes with actual template bones.
        let bone = if i % 2 == 0 {
            random_unit(&mut rng) * rng.random_range(0.05..0.6)
        } else {
            let k = rng.random_range(1..NUM_JOINTS);
            let q = model.tree.parent(k).unwrap();
            rest[k] - rest[q]
        };
        let swing = bodyik::ik::swing_from_vectors(&bone, &(r * bone)).unwrap();
        let twist = swing.transpose() * r;
        worst = worst.max(max_abs_diff(&(swing * twist), &r));
        // The twist part must fix the bone axis.
        assert!((twist * bone - bone).norm() < 1e-9);
    }
    assert!(worst < 1e-9, "recomposition error {worst}");
    println!(
        "[PASS] criterion 2: swing-twist recomposition over 1000 rotations, max err {worst:.2e}"
    );
}

#[test]
fn c03_rotation_hand_cases() {
    // Quarter turn about z.
    let r = rodrigues(&Vector3::new(0.0, 0.0, 1.0), 0.0, 1.0).unwrap();
    let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    assert!(max_abs_diff(&r, &expected) < 1e-12);
    // Half turn about x.
    let r = rodrigues(&Vector3::new(1.0, 0.0, 0.0), -1.0, 0.0).unwrap();
    assert!(max_abs_diff(&r, &Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))) < 1e-12);
    // Swing x onto y.
    let r = bodyik::ik::swing_from_vectors(&Vector3::new(1.0, 0.0, 0.0), &Vector3::new(0.0, 1.0, 0.0))
        .unwrap();
    assert!(max_abs_diff(&r, &expected) < 1e-12);
    // Twist about a scaled axis; the length cancels.
    let r = bodyik::ik::twist_matrix(&Vector3::new(0.0, 0.0, 2.0), -1.0, 0.0).unwrap();
    assert!(max_abs_diff(&r, &Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0))) < 1e-12);

    // All rotation constructors keep orthonormality and det +1.
    let mut rng = ChaCha12Rng::seed_from_u64(0xC3);
    for _ in 0..500 {
        let r = random_rotation(&mut rng, std::f64::consts::PI);
        assert!(is_valid_rotation(&r, 1e-9));
    }
    println!("[PASS] criterion 3: rotation hand cases to 1e-12, invariants to 1e-9");
}

#[test]
fn c04_paper_constants() {
    assert_eq!(C_INIT, [0.9, 0.0, 0.0]);
    assert_eq!(NUM_JOINTS, 24);

    let default = RefinerConfig::default();
    assert_eq!(default.max_persons, 3);
    assert_eq!(default.d_token(), default.feat_dim + 19);
    assert_eq!(RefinerConfig::paper().d_token(), 2067);
    assert_eq!(default.mask_ratio_max, 0.3);

    // Masking stays inside [0, 0.3] empirically and rejects more.
    let cfg = RefinerConfig::default();
    let persons: Vec<_> = (0..3)
        .map(|_| (MeshParams::neutral(), Array2::zeros((NUM_JOINTS, cfg.feat_dim))))
        .collect();
    let input = assemble_tokens(&persons, &cfg).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(0xC4);
    for seed in 0..200 {
        let ratio = rng.random_range(0.0..=cfg.mask_ratio_max);
        let masked = mask_patches(&input, &cfg, seed, ratio).unwrap();
        let frac = masked.mask_flags.iter().filter(|&&f| f).count() as f64 / 72.0;
        assert!((0.0..=0.3).contains(&frac));
    }
    assert!(mask_patches(&input, &cfg, 0, 0.300001).is_err());

    assert_eq!(PCK_THRESHOLD_MM, 150.0);

    let train = TrainConfig::default();
    assert_eq!(train.lr_refiner, 5e-5);
    assert_eq!(train.lr_other, 1e-4);
    assert_eq!(train.lr_decay, 0.9);
    println!(
        "[PASS] criterion 4: constants C_init=[0.9,0,0], K=24, token width {} (2067 at 2048), \
         mask<=0.3, N=3, PCK 150mm, lr 5e-5/1e-4, decay 0.9",
        default.d_token()
    );
}

#[test]
fn c05_gradient_suite() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0xC5);
    let tol = 1e-4;
    let floor = 1e-3;

    // L_mesh and L_shape and L_angle: gradients w.r.t. predictions.
    for point in 0..20 {
        let gt_theta = Array2::from_shape_fn((NUM_JOINTS, 6), |_| rng.random_range(-1.0..1.0));
        let gt_beta = Array2::from_shape_fn((1, NUM_SHAPE), |_| rng.random_range(-1.0..1.0));
        let pred_theta = &gt_theta + &Array2::from_shape_fn((NUM_JOINTS, 6), |_| {
            rng.random_range(0.01..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        });
        let pred_beta = &gt_beta + &Array2::from_shape_fn((1, NUM_SHAPE), |_| {
            rng.random_range(0.01..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        });

        check_loss_grad(
            &format!("L_mesh point {point}"),
            &[pred_theta.clone(), pred_beta.clone()],
            tol,
            floor,
            |tape, vars| {
                let gt_t = tape.leaf(gt_theta.clone());
                let gt_b = tape.leaf(gt_beta.clone());
                tape_loss_mesh(tape, vars[0], vars[1], gt_t, gt_b)
            },
        );
        check_loss_grad(
            &format!("L_shape point {point}"),
            &[pred_beta.clone()],
            tol,
            floor,
            |tape, vars| {
                let gt_b = tape.leaf(gt_beta.clone());
                tape_loss_shape(tape, vars[0], gt_b)
            },
        );
        let gt_pairs = Array2::from_shape_fn((NUM_JOINTS, 2), |_| rng.random_range(-1.0..1.0));
        let pred_pairs = &gt_pairs + &Array2::from_shape_fn((NUM_JOINTS, 2), |_| {
            rng.random_range(0.01..0.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        });
        check_loss_grad(
            &format!("L_angle point {point}"),
            &[pred_pairs],
            tol,
            floor,
            |tape, vars| {
                let gt = tape.leaf(gt_pairs.clone());
                tape_loss_angle(tape, vars[0], gt)
            },
        );
    }

    // L_pose: gradients w.r.t. the relative joints and the camera.
    let model = desk_model();
    let gt = SkeletonGT::from_abs(
        &Skeleton::new(model.rest_joints()),
        &[0.9, 0.03, -0.04],
    );
    for point in 0..20 {
        let pred = Array2::from_shape_fn((NUM_JOINTS, 3), |_| rng.random_range(-0.8..0.8));
        let camera = Array2::from_shape_fn((1, 3), |_| rng.random_range(0.2..1.2));
        check_loss_grad(
            &format!("L_pose point {point}"),
            &[pred, camera],
            tol,
            floor,
            |tape, vars| {
                let gr = tape.leaf(gt.rel3d.to_array());
                let g2 = tape.leaf(gt.joints2d_array());
                tape_loss_pose(tape, vars[0], vars[1], gr, g2)
            },
        );
    }

    // Adversarial losses: gradients w.r.t. generator outputs and
    // discriminator weights.
    for point in 0..20u64 {
        let d_theta = Discriminator::new(NUM_JOINTS * 6, 0xA0 + point);
        let d_beta = Discriminator::new(NUM_SHAPE, 0xB0 + point);
        let theta = Array2::from_shape_fn((1, NUM_JOINTS * 6), |_| rng.random_range(-1.0..1.0));
        let beta = Array2::from_shape_fn((1, NUM_SHAPE), |_| rng.random_range(-1.0..1.0));
        check_loss_grad(
            &format!("L_adv(G) point {point}"),
            &[theta.clone(), beta.clone()],
            tol,
            floor,
            |tape, vars| {
                let dt = d_theta.vars(tape);
                let db = d_beta.vars(tape);
                tape_loss_adv_generator(tape, &dt, &db, vars[0], vars[1])
            },
        );

        // Discriminator loss w.r.t. its own weights.
        let real_theta = Array2::from_shape_fn((1, NUM_JOINTS * 6), |_| rng.random_range(-1.0..1.0));
        let real_beta = Array2::from_shape_fn((1, NUM_SHAPE), |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let dtv = d_theta.vars(&mut tape);
        let dbv = d_beta.vars(&mut tape);
        let ft = tape.leaf(theta.clone());
        let fb = tape.leaf(beta.clone());
        let rt = tape.leaf(real_theta.clone());
        let rb = tape.leaf(real_beta.clone());
        let loss = tape_loss_adv_discriminator(&mut tape, &dtv, &dbv, ft, fb, rt, rb);
        tape.backward(loss);
        // Probe a few coordinates of each weight tensor by FD.
        for (var, tensor, name) in [
            (dtv.w1, &d_theta.w1, "d_theta.w1"),
            (dtv.w2, &d_theta.w2, "d_theta.w2"),
            (dbv.w1, &d_beta.w1, "d_beta.w1"),
            (dbv.b1, &d_beta.b1, "d_beta.b1"),
        ] {
            let grad = tape.grad(var).clone();
            for _ in 0..3 {
                let r = rng.random_range(0..tensor.nrows());
                let c = rng.random_range(0..tensor.ncols());
                let fd = {
                    let eval = |delta: f64| {
                        let mut d_theta = d_theta.clone();
                        let mut d_beta = d_beta.clone();
                        let target: &mut Array2<f64> = match name {
                            "d_theta.w1" => &mut d_theta.w1,
                            "d_theta.w2" => &mut d_theta.w2,
                            "d_beta.w1" => &mut d_beta.w1,
                            _ => &mut d_beta.b1,
                        };
                        target[(r, c)] += delta;
                        bodyik::losses::loss_adv_discriminator(
                            &d_theta, &d_beta, &theta, &beta, &real_theta, &real_beta,
                        )
                    };
                    (eval(1e-5) - eval(-1e-5)) / 2e-5
                };
                assert!(
                    grads_agree(grad[(r, c)], fd, tol, floor),
                    "L_adv(D) {name}[{r},{c}] point {point}: {} vs {fd}",
                    grad[(r, c)]
                );
            }
        }
    }

    // Transformer forward at the desk-check width: a few coordinates of
    // every tensor against FD, at 20 random weight draws.
    let cfg = RefinerConfig {
        d_model: 32,
        d_ff: 64,
        layers: 2,
        heads: 4,
        feat_dim: 8,
        max_persons: 2,
        ..RefinerConfig::default()
    };
    for point in 0..20u64 {
        let mut weights = RefinerWeights::init(&cfg, 0xC5_00 + point).unwrap();
        weights.randomize_heads(0xC5_50 + point);
        let persons: Vec<(MeshParams, Array2<f64>)> = (0..2)
            .map(|p| {
                let mut params = MeshParams::neutral();
                for k in 0..NUM_JOINTS {
                    for c in 0..6 {
                        params.theta[k][c] += rng.random_range(-0.3..0.3);
                    }
                }
                params.camera = C_INIT;
                (
                    params,
                    Array2::from_shape_fn((NUM_JOINTS, cfg.feat_dim), |_| {
                        rng.random_range(-1.0..1.0) + p as f64 * 0.1
                    }),
                )
            })
            .collect();
        let input = assemble_tokens(&persons, &cfg).unwrap();

        let loss_of = |w: &RefinerWeights| -> f64 {
            let mut tape = Tape::new();
            let vars = w.vars(&mut tape);
            let run = tape_forward(&mut tape, &vars, &cfg, &input).unwrap();
            let mut total: Option<bodyik::autodiff::Var> = None;
            for out in run.person_outputs.iter().flatten() {
                let t = tape.sum_squares(out.0);
                let s = tape.sum_squares(out.1);
                let both = tape.add(t, s);
                total = Some(match total {
                    None => both,
                    Some(acc) => tape.add(acc, both),
                });
            }
            tape.scalar_value(total.unwrap())
        };

        let mut tape = Tape::new();
        let vars = weights.vars(&mut tape);
        let run = tape_forward(&mut tape, &vars, &cfg, &input).unwrap();
        let mut total: Option<bodyik::autodiff::Var> = None;
        for out in run.person_outputs.iter().flatten() {
            let t = tape.sum_squares(out.0);
            let s = tape.sum_squares(out.1);
            let both = tape.add(t, s);
            total = Some(match total {
                None => both,
                Some(acc) => tape.add(acc, both),
            });
        }
        tape.backward(total.unwrap());

        for (name, var) in vars.all() {
            let grad = tape.grad(var).clone();
            let idx = rng.random_range(0..grad.len());
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let analytic = grad[(r, c)];
            let fd = {
                let mut w = weights.clone();
                {
                    let mut tensors = w.tensors_mut();
                    let t = tensors.iter_mut().find(|(n, _)| *n == name).unwrap();
                    t.1[(r, c)] += 1e-5;
                }
                let plus = loss_of(&w);
                {
                    let mut tensors = w.tensors_mut();
                    let t = tensors.iter_mut().find(|(n, _)| *n == name).unwrap();
                    t.1[(r, c)] -= 2e-5;
                }
                let minus = loss_of(&w);
                (plus - minus) / 2e-5
            };
            assert!(
                grads_agree(analytic, fd, tol, floor),
                "transformer {name}[{r},{c}] point {point}: {analytic} vs {fd}"
            );
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient suite took {elapsed}s");
    println!(
        "[PASS] criterion 5: analytic gradients match finite differences (rel err < 1e-4) for \
         L_mesh, L_pose, L_adv(G), L_adv(D), L_angle, L_shape and the desk transformer, {elapsed:.1}s"
    );
}

fn check_loss_grad<F>(label: &str, inputs: &[Array2<f64>], tol: f64, floor: f64, build: F)
where
    F: Fn(&mut Tape, &[bodyik::autodiff::Var]) -> bodyik::autodiff::Var,
{
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss);
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| tape.grad(v).iter().copied().collect::<Vec<_>>())
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|a| a.iter().copied()).collect();
    let shapes: Vec<(usize, usize)> = inputs.iter().map(|a| a.dim()).collect();
    let fd = finite_diff_grad(
        |point| {
            let mut tape = Tape::new();
            let mut offset = 0;
            let vars: Vec<_> = shapes
                .iter()
                .map(|&(r, c)| {
                    let n = r * c;
                    let arr =
                        Array2::from_shape_vec((r, c), point[offset..offset + n].to_vec()).unwrap();
                    offset += n;
                    tape.leaf(arr)
                })
                .collect();
            let loss = build(&mut tape, &vars);
            tape.scalar_value(loss)
        },
        &flat,
        1e-5,
    );
    for i in 0..flat.len() {
        assert!(
            grads_agree(analytic[i], fd[i], tol, floor),
            "{label} coordinate {i}: analytic {} vs fd {}",
            analytic[i],
            fd[i]
        );
    }
}

#[test]
fn c06_metric_properties() {
    let model = desk_model();
    let base = Skeleton::new(model.rest_joints());
    let mut rng = ChaCha12Rng::seed_from_u64(0xC6);

    // PA-MPJPE never exceeds MPJPE over 1000 random noisy pairs.
    for _ in 0..1000 {
        let sigma = rng.random_range(0.005..0.2);
        let noisy = Skeleton::new(std::array::from_fn(|k| {
            base.joints[k]
                + Vector3::new(
                    rng.random_range(-sigma..sigma),
                    rng.random_range(-sigma..sigma),
                    rng.random_range(-sigma..sigma),
                )
        }));
        let pa = pa_mpjpe(&noisy, &base).unwrap();
        let mp = mpjpe(&noisy, &base);
        assert!(pa <= mp + 1e-9, "pa {pa} > mpjpe {mp}");
    }

    // Exact recovery under random similarity transforms.
    for _ in 0..100 {
        let s = rng.random_range(0.5..2.0);
        let r = random_rotation(&mut rng, std::f64::consts::PI);
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let transformed = Skeleton::new(std::array::from_fn(|k| r * base.joints[k] * s + t));
        let residual = pa_mpjpe(&base, &transformed).unwrap();
        assert!(residual < 1e-9, "similarity residual {residual} mm");
    }

    // Counting example: 23 of 24 joints inside the threshold.
    let mut pred = base.clone();
    pred.joints[10] += Vector3::new(0.2, 0.0, 0.0);
    let pck = pck3d(&pred, &base, PCK_THRESHOLD_MM, true);
    assert!((pck - 95.833).abs() < 1e-3, "pck {pck}");

    // Published normalization ratio: MPJPE 91.6 against NMJE 110.4.
    let implied_f1: f64 = 91.6 / 110.4;
    assert!((implied_f1 - 0.8297).abs() < 1e-3);
    let (nmje, _) = nmje_nmve(91.6, 86.7, implied_f1).unwrap();
    assert!((nmje - 110.4).abs() < 0.1);

    println!(
        "[PASS] criterion 6: pa<=mpjpe on 1000 pairs, similarity residual < 1e-9 mm, \
         pck 95.833, implied F1 {implied_f1:.4}"
    );
}

#[test]
fn c07_refiner_structural_invariants() {
    let cfg = RefinerConfig {
        feat_dim: 8,
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        ..RefinerConfig::default()
    };
    let mut weights = RefinerWeights::init(&cfg, 0xC7).unwrap();
    weights.randomize_heads(0xC70);
    let mut rng = ChaCha12Rng::seed_from_u64(0xC71);
    let person = |rng: &mut ChaCha12Rng| {
        let mut params = MeshParams::neutral();
        for k in 0..NUM_JOINTS {
            for c in 0..6 {
                params.theta[k][c] += rng.random_range(-0.3..0.3);
            }
        }
        params.camera = C_INIT;
        let features =
            Array2::from_shape_fn((NUM_JOINTS, 8), |_| rng.random_range(-1.0..1.0));
        (params, features)
    };
    let p0 = person(&mut rng);
    let p1 = person(&mut rng);
    let p2 = person(&mut rng);

    // Padding neutrality under a larger-N configuration.
    let mut cfg5 = cfg.clone();
    cfg5.max_persons = 5;
    let mut weights5 = weights.clone();
    weights5.config = cfg5.clone();
    let out3 = forward(
        &weights,
        &assemble_tokens(&[p0.clone(), p1.clone()], &cfg).unwrap(),
        false,
    )
    .unwrap();
    let out5 = forward(
        &weights5,
        &assemble_tokens(&[p0.clone(), p1.clone()], &cfg5).unwrap(),
        false,
    )
    .unwrap();
    let mut worst_pad = 0.0f64;
    for slot in 0..2 {
        for k in 0..NUM_JOINTS {
            for c in 0..6 {
                worst_pad = worst_pad
                    .max((out3.deltas[slot].theta[k][c] - out5.deltas[slot].theta[k][c]).abs());
            }
        }
    }
    assert!(worst_pad < 1e-9, "padding neutrality violated by {worst_pad}");

    // Person-slot permutation equivariance with positional embedding off.
    let abc = forward(
        &weights,
        &assemble_tokens(&[p0.clone(), p1.clone(), p2.clone()], &cfg).unwrap(),
        false,
    )
    .unwrap();
    let acb = forward(
        &weights,
        &assemble_tokens(&[p0.clone(), p2.clone(), p1.clone()], &cfg).unwrap(),
        false,
    )
    .unwrap();
    let mut worst_perm = 0.0f64;
    for (a, b) in [
        (&abc.deltas[0], &acb.deltas[0]),
        (&abc.deltas[1], &acb.deltas[2]),
        (&abc.deltas[2], &acb.deltas[1]),
    ] {
        for k in 0..NUM_JOINTS {
            for c in 0..6 {
                worst_perm = worst_perm.max((a.theta[k][c] - b.theta[k][c]).abs());
            }
        }
        for j in 0..NUM_SHAPE {
            worst_perm = worst_perm.max((a.beta[j] - b.beta[j]).abs());
        }
    }
    assert!(worst_perm < 1e-9, "permutation equivariance violated by {worst_perm}");

    // Zero delta refines to bit-identical parameters.
    let refined = refine(&p0.0, &ParamDelta::zeros());
    for k in 0..NUM_JOINTS {
        for c in 0..6 {
            assert_eq!(refined.theta[k][c].to_bits(), p0.0.theta[k][c].to_bits());
        }
    }
    assert_eq!(refined.beta, p0.0.beta);
    assert_eq!(refined.camera, p0.0.camera);

    // Five persons under N=3: exactly five refiner calls, each with the
    // two nearest contexts.
    let model = desk_model();
    let scene = synth_scene(&model, 0xC72, 5, 0.0).unwrap();
    let eval_cfg = RefinerConfig {
        feat_dim: 8,
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        ..RefinerConfig::default()
    };
    let eval_weights = RefinerWeights::init(&eval_cfg, 0).unwrap();
    let (_, stats) = evaluate(
        &model,
        Some(&eval_weights),
        &[scene.clone()],
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(stats.refiner_calls, 5);
    let observed: Vec<Skeleton> = scene.persons.iter().map(|p| p.observed.clone()).collect();
    for (_, target, group) in &stats.context_groups {
        assert_eq!(group[0], *target);
        assert_eq!(group.len(), 3);
        let mut dists: Vec<(f64, usize)> = observed
            .iter()
            .enumerate()
            .filter(|(i, _)| i != target)
            .map(|(i, s)| ((s.root() - observed[*target].root()).norm(), i))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(group[1], dists[0].1);
        assert_eq!(group[2], dists[1].1);
    }

    println!(
        "[PASS] criterion 7: padding neutrality {worst_pad:.2e}, permutation equivariance \
         {worst_perm:.2e}, zero-delta bit-exact, 5 calls with nearest contexts"
    );
}

#[test]
fn c08_training_sanity() {
    let started = Instant::now();
    let model = generate_synthetic_model(0, 240).unwrap();
    // Eight persons across three scenes.
    let scenes = vec![
        synth_scene(&model, 101, 3, 0.02).unwrap(),
        synth_scene(&model, 102, 3, 0.02).unwrap(),
        synth_scene(&model, 103, 2, 0.02).unwrap(),
    ];
    let cfg = RefinerConfig::desk_check();
    let tc = TrainConfig::desk_overfit(200);
    let (_, report_a) = train_refiner(&model, &cfg, &scenes, 1000, 5, &tc).unwrap();
    let (_, report_b) = train_refiner(&model, &cfg, &scenes, 1000, 5, &tc).unwrap();

    let first = report_a.first_mesh_loss().unwrap();
    let last = report_a.last_mesh_loss().unwrap();
    assert!(
        last <= 0.5 * first,
        "mesh loss {first} -> {last}, less than 50% reduction"
    );
    for (a, b) in report_a.steps.iter().zip(&report_b.steps) {
        assert_eq!(a.total.to_bits(), b.total.to_bits(), "non-deterministic training");
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "training sanity took {elapsed}s");
    println!(
        "[PASS] criterion 8: mesh loss {first:.3} -> {last:.3} \
         ({:.0}% reduction) in 200 steps, deterministic, {elapsed:.1}s",
        (1.0 - last / first) * 100.0
    );
}

#[test]
fn c09_refinement_beats_initialization() {
    let model = generate_synthetic_model(0, 240).unwrap();
    let noise = 0.02;
    let train_scenes = synth_scenes(&model, 500, 150, 3, noise).unwrap();
    let heldout = synth_scenes(&model, 9000, 10, 3, noise).unwrap();
    let cfg = RefinerConfig::desk_check();
    let tc = TrainConfig::desk_generalize();
    let (weights, _) = train_refiner(&model, &cfg, &train_scenes, 10_000, 11, &tc).unwrap();
    let (report, _) = evaluate(&model, Some(&weights), &heldout, &EvalOptions::default()).unwrap();
    let init = report.aggregate("mpjpe_mm").unwrap().mean;
    let refined = report.aggregate("mpjpe_refined_mm").unwrap().mean;
    assert!(
        refined < init,
        "refined mpjpe {refined:.3} mm not below initialization {init:.3} mm"
    );
    println!(
        "[PASS] criterion 9: held-out mpjpe {init:.2} mm -> {refined:.2} mm after refinement"
    );
}

#[test]
fn c10_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_bodyik");
    let model = dir.path().join("model.json");
    let scenes = dir.path().join("scenes.json");

    let run = |args: &[&str]| {
        let status = std::process::Command::new(bin)
            .args(args)
            .status()
            .expect("spawn bodyik");
        assert!(status.success(), "bodyik {args:?} failed");
    };
    run(&[
        "gen-model",
        "--seed",
        "0",
        "--vertices",
        "240",
        "--out",
        model.to_str().unwrap(),
    ]);
    run(&[
        "gen-scenes",
        "--model",
        model.to_str().unwrap(),
        "--seed",
        "3",
        "--scenes",
        "2",
        "--persons",
        "3",
        "--out",
        scenes.to_str().unwrap(),
    ]);
    let report_a = dir.path().join("a.json");
    let report_b = dir.path().join("b.json");
    for (report, _) in [(&report_a, 0), (&report_b, 1)] {
        run(&[
            "eval",
            "--model",
            model.to_str().unwrap(),
            "--scenes",
            scenes.to_str().unwrap(),
            "--noise",
            "0.02",
            "--seed",
            "9",
            "--report",
            report.to_str().unwrap(),
        ]);
    }
    let a = std::fs::read(&report_a).unwrap();
    let b = std::fs::read(&report_b).unwrap();
    assert_eq!(a, b, "eval reports differ between identical runs");
    assert!(!a.is_empty());
    println!(
        "[PASS] criterion 10: identical eval runs produced byte-identical {}-byte reports",
        a.len()
    );
}

#[test]
fn roundtrip_noise_zero_support() {
    // Supports criterion 1 at the harness level: a zero-noise round trip
    // reports sub-micrometer errors.
    let model = desk_model();
    let scene = synth_scene(&model, 0xAA, 3, 0.0).unwrap();
    let report = run_roundtrip(&model, &scene).unwrap();
    for row in &report.rows {
        assert!(row.mpjpe_mm.unwrap() < 1e-3);
    }
}
