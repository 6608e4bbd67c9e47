//! Refiner training: Adam over the encoder and output heads against the
//! mesh, pose and generator-adversarial terms, alternated with
//! discriminator updates on the four-term objective.
//!
//! Initialization parameters come from the IK over the scenes' noisy
//! skeletons; input-patch masking draws a fresh ratio in [0, 0.3] per
//! group. Single-threaded and deterministic per seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{derive_seed, Scene, FEATURE_PROVIDER_SEED};
use crate::autodiff::{Tape, Var};
use crate::bodymodel::tape::{tape_rel_joints, DiffFkContext};
use crate::bodymodel::{BodyModel, MeshParams, NUM_JOINTS, NUM_SHAPE};
use crate::error::{Error, Result};
use crate::ik::{solve_ik, C_INIT};
use crate::losses::{
    project_ortho, tape_loss_adv_discriminator, tape_loss_adv_generator, tape_loss_mesh,
    tape_loss_pose, Discriminator, LossWeights,
};
use crate::refiner::{
    assemble_tokens, mask_patches, tape_forward, FeatureProvider, RefinerConfig, RefinerWeights,
    Synthetic2dProvider,
};

/// Training hyperparameters. Defaults are the published ones: Adam,
/// refiner learning rate 5e-5, all other networks 1e-4, exponential decay
/// by 0.9 per epoch, batch size 64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_refiner: f64,
    pub lr_other: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Groups sampled per scene per epoch (default ⌈M/N⌉).
    pub groups_per_scene: Option<usize>,
    /// Random input-patch masking on/off.
    pub mask_inputs: bool,
    pub loss_weights: LossWeights,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_refiner: 5e-5,
            lr_other: 1e-4,
            lr_decay: 0.9,
            batch_size: 64,
            groups_per_scene: None,
            mask_inputs: true,
            loss_weights: LossWeights::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale overfit settings for the training sanity check: a
    /// handful of persons and a couple hundred steps. An epoch is a single
    /// step here, so the per-epoch decay is disabled and the rate raised;
    /// input masking is off (its corruption noise dominates at this data
    /// scale) and the stiff pose term is down-weighted. All four loss
    /// terms stay active.
    pub fn desk_overfit(max_steps: usize) -> Self {
        TrainConfig {
            lr_refiner: 2e-3,
            lr_other: 1e-4,
            lr_decay: 1.0,
            batch_size: 3,
            groups_per_scene: None,
            mask_inputs: false,
            loss_weights: LossWeights {
                pose: 0.2,
                ..LossWeights::default()
            },
            max_steps: Some(max_steps),
        }
    }

    /// Desk-scale settings tuned for held-out generalization rather than
    /// memorization: pose-dominant objective, large batches, gentle decay.
    pub fn desk_generalize() -> Self {
        TrainConfig {
            lr_refiner: 1e-3,
            lr_other: 1e-4,
            lr_decay: 0.95,
            batch_size: 16,
            groups_per_scene: None,
            mask_inputs: false,
            loss_weights: LossWeights {
                mesh: 0.05,
                adv_generator: 0.0,
                adv_discriminator: 0.0,
                ..LossWeights::default()
            },
            max_steps: Some(3000),
        }
    }
}

/// Loss components of one optimizer step (batch means).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub epoch: usize,
    pub mesh: f64,
    pub pose: f64,
    pub adv_generator: f64,
    pub adv_discriminator: f64,
    pub total: f64,
}

/// Serializable training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema: String,
    pub config: serde_json::Value,
    pub steps: Vec<StepLosses>,
}

impl TrainReport {
    pub fn first_mesh_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.mesh)
    }

    pub fn last_mesh_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.mesh)
    }
}

/// Plain Adam with bias correction, one slot per tensor.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// One update over tensors and their gradients, in slot order.
    pub fn step(&mut self, lr: f64, tensors: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(tensors.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            self.m[i] = &self.m[i] * self.beta1 + &(&grads[i] * (1.0 - self.beta1));
            self.v[i] = &self.v[i] * self.beta2 + &(grads[i].mapv(|g| g * g) * (1.0 - self.beta2));
            let m_hat = &self.m[i] / bc1;
            let v_hat = &self.v[i] / bc2;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + self.eps);
            **tensors.get_mut(i).unwrap() = &*tensors[i] - &(update * lr);
        }
    }
}

struct TrainPerson {
    params_init: MeshParams,
    features: Array2<f64>,
    theta_init: Array2<f64>,
    beta_init: Array2<f64>,
    gt_theta: Array2<f64>,
    gt_beta: Array2<f64>,
    gt_theta_flat: Array2<f64>,
    gt_rel: Array2<f64>,
    gt_2d: Array2<f64>,
}

fn prepare_person(
    model: &BodyModel,
    person: &super::ScenePerson,
    provider: &Synthetic2dProvider,
) -> Result<TrainPerson> {
    let solution = solve_ik(
        model,
        &person.observed,
        &person.gt_twists,
        &person.gt_params.beta,
    )?;
    let params_init = MeshParams {
        theta: solution.theta,
        beta: person.gt_params.beta,
        camera: C_INIT,
    };
    let rotations = params_init.rotations()?;
    let (init_joints, _) =
        crate::bodymodel::forward_kinematics(model, &rotations, &params_init.beta);
    let init_rel = crate::ik::Skeleton::new(init_joints).root_relative();
    let init2d = project_ortho(&init_rel, &C_INIT);
    Ok(TrainPerson {
        features: provider.person_features(&person.image_obs2d, &init2d),
        theta_init: params_init.theta_array(),
        beta_init: params_init.beta_row(),
        gt_theta: person.gt_params.theta_array(),
        gt_beta: person.gt_params.beta_row(),
        gt_theta_flat: person.gt_params.theta_flat(),
        gt_rel: person.gt_skeleton.rel3d.to_array(),
        gt_2d: person.gt_skeleton.joints2d_array(),
        params_init,
    })
}

/// Accumulated gradients over a mini-batch, in tensor-slot order.
struct GradAccumulator {
    grads: Vec<Array2<f64>>,
    count: usize,
}

impl GradAccumulator {
    fn new(shapes: &[(usize, usize)]) -> Self {
        GradAccumulator {
            grads: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            count: 0,
        }
    }

    fn add(&mut self, tape: &Tape, vars: &[Var]) {
        assert_eq!(vars.len(), self.grads.len());
        for (slot, var) in vars.iter().enumerate() {
            self.grads[slot] += tape.grad(*var);
        }
        self.count += 1;
    }

    fn take_mean(&mut self) -> Vec<Array2<f64>> {
        let n = self.count.max(1) as f64;
        let out = self.grads.iter().map(|g| g / n).collect();
        for g in &mut self.grads {
            g.fill(0.0);
        }
        self.count = 0;
        out
    }
}

/// Train the refiner (and its discriminators) on synthetic scenes.
///
/// Aborts with a numeric failure on divergence. Returns the trained
/// weights together with the per-step loss history.
pub fn train_refiner(
    model: &BodyModel,
    config: &RefinerConfig,
    scenes: &[Scene],
    epochs: usize,
    seed: u64,
    train: &TrainConfig,
) -> Result<(RefinerWeights, TrainReport)> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("training needs at least one scene".into()));
    }
    config.validate()?;
    let provider = Synthetic2dProvider::new(config.feat_dim, FEATURE_PROVIDER_SEED);
    let ctx = DiffFkContext::new(model);

    let prepared: Vec<Vec<TrainPerson>> = scenes
        .iter()
        .map(|scene| {
            scene
                .persons
                .iter()
                .map(|p| prepare_person(model, p, &provider))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    // Real-sample pool for the discriminators: every ground-truth person.
    let real_pool: Vec<(Array2<f64>, Array2<f64>)> = prepared
        .iter()
        .flatten()
        .map(|p| (p.gt_theta_flat.clone(), p.gt_beta.clone()))
        .collect();

    let mut weights = RefinerWeights::init(config, seed)?;
    let mut d_theta = Discriminator::new(NUM_JOINTS * 6, derive_seed(seed, 0xD0));
    let mut d_beta = Discriminator::new(NUM_SHAPE, derive_seed(seed, 0xD1));

    let refiner_shapes: Vec<(usize, usize)> =
        weights.tensors().iter().map(|(_, t)| t.dim()).collect();
    let disc_shapes = |d: &Discriminator| {
        vec![d.w1.dim(), d.b1.dim(), d.w2.dim(), d.b2.dim()]
    };
    let mut adam_refiner = Adam::new(&refiner_shapes);
    let mut adam_d_theta = Adam::new(&disc_shapes(&d_theta));
    let mut adam_d_beta = Adam::new(&disc_shapes(&d_beta));

    let mut acc_refiner = GradAccumulator::new(&refiner_shapes);
    let mut acc_d_theta = GradAccumulator::new(&disc_shapes(&d_theta));
    let mut acc_d_beta = GradAccumulator::new(&disc_shapes(&d_beta));

    let mut steps: Vec<StepLosses> = Vec::new();
    let mut step_counter = 0usize;
    let mut group_counter = 0u64;
    let mut batch_losses: Vec<(f64, f64, f64, f64)> = Vec::new();

    'training: for epoch in 0..epochs {
        let lr_r = train.lr_refiner * train.lr_decay.powi(epoch as i32);
        let lr_d = train.lr_other * train.lr_decay.powi(epoch as i32);

        for (scene_idx, persons) in prepared.iter().enumerate() {
            let groups = crate::refiner::sample_training_groups(
                persons.len(),
                config.max_persons,
                train.groups_per_scene,
                derive_seed(seed, 0x6000 + (epoch * scenes.len() + scene_idx) as u64),
            );
            for group in groups {
                let mut rng =
                    ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x7000 + group_counter));
                group_counter += 1;

                let members: Vec<&TrainPerson> = group.iter().map(|&i| &persons[i]).collect();
                let (gen_losses, fakes) = generator_pass(
                    &weights,
                    &d_theta,
                    &d_beta,
                    config,
                    train,
                    &ctx,
                    &members,
                    &mut acc_refiner,
                    &mut rng,
                )?;
                let disc_loss = discriminator_pass(
                    &d_theta,
                    &d_beta,
                    &fakes,
                    &real_pool,
                    &mut acc_d_theta,
                    &mut acc_d_beta,
                    &mut rng,
                )?;
                batch_losses.push((gen_losses.0, gen_losses.1, gen_losses.2, disc_loss));

                if batch_losses.len() >= train.batch_size {
                    apply_step(
                        &mut weights,
                        &mut d_theta,
                        &mut d_beta,
                        &mut adam_refiner,
                        &mut adam_d_theta,
                        &mut adam_d_beta,
                        &mut acc_refiner,
                        &mut acc_d_theta,
                        &mut acc_d_beta,
                        lr_r,
                        lr_d,
                    );
                    record_step(&mut steps, &mut batch_losses, &mut step_counter, epoch, train)?;
                    if train.max_steps.is_some_and(|m| step_counter >= m) {
                        break 'training;
                    }
                }
            }
        }
        // Flush a partial batch at epoch end.
        if !batch_losses.is_empty() {
            apply_step(
                &mut weights,
                &mut d_theta,
                &mut d_beta,
                &mut adam_refiner,
                &mut adam_d_theta,
                &mut adam_d_beta,
                &mut acc_refiner,
                &mut acc_d_theta,
                &mut acc_d_beta,
                lr_r,
                lr_d,
            );
            record_step(&mut steps, &mut batch_losses, &mut step_counter, epoch, train)?;
            if train.max_steps.is_some_and(|m| step_counter >= m) {
                break 'training;
            }
        }
    }

    weights.validate()?;
    let report = TrainReport {
        schema: "bodyik-train-report-v1".to_string(),
        config: json!({
            "epochs": epochs,
            "seed": seed,
            "scenes": scenes.len(),
            "lr_refiner": train.lr_refiner,
            "lr_other": train.lr_other,
            "lr_decay": train.lr_decay,
            "batch_size": train.batch_size,
            "mask_inputs": train.mask_inputs,
            "steps": steps.len(),
        }),
        steps,
    };
    Ok((weights, report))
}

/// One group's generator pass: forward, per-member losses, backward,
/// gradient accumulation. Returns (mesh, pose, adv) means and the refined
/// parameter values for the discriminator pass.
#[allow(clippy::too_many_arguments)]
fn generator_pass(
    weights: &RefinerWeights,
    d_theta: &Discriminator,
    d_beta: &Discriminator,
    config: &RefinerConfig,
    train: &TrainConfig,
    ctx: &DiffFkContext,
    members: &[&TrainPerson],
    acc: &mut GradAccumulator,
    rng: &mut ChaCha12Rng,
) -> Result<((f64, f64, f64), Vec<(Array2<f64>, Array2<f64>)>)> {
    let persons: Vec<(MeshParams, Array2<f64>)> = members
        .iter()
        .map(|m| (m.params_init.clone(), m.features.clone()))
        .collect();
    let mut input = assemble_tokens(&persons, config)?;
    if train.mask_inputs && config.mask_ratio_max > 0.0 {
        let ratio = rng.random_range(0.0..=config.mask_ratio_max);
        let mask_seed = rng.random::<u64>();
        input = mask_patches(&input, config, mask_seed, ratio)?;
    }

    let mut tape = Tape::new();
    let wvars = weights.vars(&mut tape);
    let dtv = d_theta.vars(&mut tape);
    let dbv = d_beta.vars(&mut tape);
    let run = tape_forward(&mut tape, &wvars, config, &input)?;

    let mut mesh_terms = Vec::new();
    let mut pose_terms = Vec::new();
    let mut adv_terms = Vec::new();
    let mut fakes = Vec::new();

    for (slot, member) in members.iter().enumerate() {
        let (theta_delta, sc_delta) = run.person_outputs[slot]
            .expect("assembled slots are occupied");
        let theta_init = tape.leaf(member.theta_init.clone());
        let theta_ref = tape.add(theta_init, theta_delta);
        let beta_delta = tape.slice_cols(sc_delta, 0, NUM_SHAPE);
        let cam_delta = tape.slice_cols(sc_delta, NUM_SHAPE, NUM_SHAPE + 3);
        let beta_init = tape.leaf(member.beta_init.clone());
        let beta_ref = tape.add(beta_init, beta_delta);
        let cam_init = tape.leaf(Array2::from_shape_fn((1, 3), |(_, c)| C_INIT[c]));
        let cam_ref = tape.add(cam_init, cam_delta);

        let gt_theta = tape.leaf(member.gt_theta.clone());
        let gt_beta = tape.leaf(member.gt_beta.clone());
        mesh_terms.push(tape_loss_mesh(
            &mut tape, theta_ref, beta_ref, gt_theta, gt_beta,
        ));

        let rel = tape_rel_joints(&mut tape, ctx, theta_ref, beta_ref);
        let gt_rel = tape.leaf(member.gt_rel.clone());
        let gt_2d = tape.leaf(member.gt_2d.clone());
        pose_terms.push(tape_loss_pose(&mut tape, rel, cam_ref, gt_rel, gt_2d));

        let theta_flat = tape.reshape(theta_ref, 1, NUM_JOINTS * 6);
        adv_terms.push(tape_loss_adv_generator(
            &mut tape, &dtv, &dbv, theta_flat, beta_ref,
        ));
        fakes.push((
            tape.value(theta_flat).clone(),
            tape.value(beta_ref).clone(),
        ));
    }

    let inv = 1.0 / members.len() as f64;
    let mesh_mean = mean_of(&mut tape, &mesh_terms, inv);
    let pose_mean = mean_of(&mut tape, &pose_terms, inv);
    let adv_mean = mean_of(&mut tape, &adv_terms, inv);

    let w = &train.loss_weights;
    let m_w = tape.scale(mesh_mean, w.mesh);
    let p_w = tape.scale(pose_mean, w.pose);
    let a_w = tape.scale(adv_mean, w.adv_generator);
    let mp = tape.add(m_w, p_w);
    let total = tape.add(mp, a_w);
    tape.backward(total);

    let ordered: Vec<Var> = wvars.all().into_iter().map(|(_, v)| v).collect();
    acc.add(&tape, &ordered);

    Ok((
        (
            tape.scalar_value(mesh_mean),
            tape.scalar_value(pose_mean),
            tape.scalar_value(adv_mean),
        ),
        fakes,
    ))
}

/// One group's discriminator pass on detached fakes and pool-sampled real
/// parameters; returns the mean four-term objective.
fn discriminator_pass(
    d_theta: &Discriminator,
    d_beta: &Discriminator,
    fakes: &[(Array2<f64>, Array2<f64>)],
    real_pool: &[(Array2<f64>, Array2<f64>)],
    acc_theta: &mut GradAccumulator,
    acc_beta: &mut GradAccumulator,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let dtv = d_theta.vars(&mut tape);
    let dbv = d_beta.vars(&mut tape);

    let mut terms = Vec::new();
    for (fake_theta, fake_beta) in fakes {
        let (real_theta, real_beta) = &real_pool[rng.random_range(0..real_pool.len())];
        let ft = tape.leaf(fake_theta.clone());
        let fb = tape.leaf(fake_beta.clone());
        let rt = tape.leaf(real_theta.clone());
        let rb = tape.leaf(real_beta.clone());
        terms.push(tape_loss_adv_discriminator(
            &mut tape, &dtv, &dbv, ft, fb, rt, rb,
        ));
    }
    let mean = mean_of(&mut tape, &terms, 1.0 / fakes.len() as f64);
    tape.backward(mean);

    acc_theta.add(&tape, &[dtv.w1, dtv.b1, dtv.w2, dtv.b2]);
    acc_beta.add(&tape, &[dbv.w1, dbv.b1, dbv.w2, dbv.b2]);
    Ok(tape.scalar_value(mean))
}

fn mean_of(tape: &mut Tape, terms: &[Var], inv: f64) -> Var {
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t);
    }
    tape.scale(total, inv)
}

#[allow(clippy::too_many_arguments)]
fn apply_step(
    weights: &mut RefinerWeights,
    d_theta: &mut Discriminator,
    d_beta: &mut Discriminator,
    adam_refiner: &mut Adam,
    adam_d_theta: &mut Adam,
    adam_d_beta: &mut Adam,
    acc_refiner: &mut GradAccumulator,
    acc_d_theta: &mut GradAccumulator,
    acc_d_beta: &mut GradAccumulator,
    lr_r: f64,
    lr_d: f64,
) {
    let grads = acc_refiner.take_mean();
    let mut tensors = weights.tensors_mut();
    let mut refs: Vec<&mut Array2<f64>> = tensors.iter_mut().map(|(_, t)| &mut **t).collect();
    adam_refiner.step(lr_r, &mut refs, &grads);

    let grads = acc_d_theta.take_mean();
    adam_d_theta.step(
        lr_d,
        &mut [
            &mut d_theta.w1,
            &mut d_theta.b1,
            &mut d_theta.w2,
            &mut d_theta.b2,
        ],
        &grads,
    );
    let grads = acc_d_beta.take_mean();
    adam_d_beta.step(
        lr_d,
        &mut [
            &mut d_beta.w1,
            &mut d_beta.b1,
            &mut d_beta.w2,
            &mut d_beta.b2,
        ],
        &grads,
    );
}

fn record_step(
    steps: &mut Vec<StepLosses>,
    batch: &mut Vec<(f64, f64, f64, f64)>,
    counter: &mut usize,
    epoch: usize,
    train: &TrainConfig,
) -> Result<()> {
    let n = batch.len() as f64;
    let mesh = batch.iter().map(|b| b.0).sum::<f64>() / n;
    let pose = batch.iter().map(|b| b.1).sum::<f64>() / n;
    let adv_g = batch.iter().map(|b| b.2).sum::<f64>() / n;
    let adv_d = batch.iter().map(|b| b.3).sum::<f64>() / n;
    batch.clear();
    let w = &train.loss_weights;
    let total =
        w.mesh * mesh + w.pose * pose + w.adv_generator * adv_g + w.adv_discriminator * adv_d;
    if !total.is_finite() {
        return Err(Error::NumericFailure(format!(
            "training diverged at step {} (loss {total})",
            *counter
        )));
    }
    steps.push(StepLosses {
        step: *counter,
        epoch,
        mesh,
        pose,
        adv_generator: adv_g,
        adv_discriminator: adv_d,
        total,
    });
    *counter += 1;
    Ok(())
}
