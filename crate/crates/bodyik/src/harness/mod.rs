//! Synthetic scenes and end-to-end experiments: round trips, refiner
//! training, evaluation, and all file I/O.
//!
//! Every randomized step draws from a stream derived from the master seed,
//! so runs with identical flags are reproducible bit for bit.

pub mod files;
pub mod report;
mod train;

pub use train::{train_refiner, Adam, StepLosses, TrainConfig, TrainReport};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::bodymodel::{params_to_mesh, BodyMesh, BodyModel, MeshParams, NUM_JOINTS, NUM_SHAPE};
use crate::error::{Error, Result};
use crate::ik::{canonicalize_pose, solve_ik, Skeleton, TwistAngles, C_INIT};
use crate::losses::{project_ortho, SkeletonGT};
use crate::metrics::{
    match_predictions, mpjpe, mve, nmje_nmve, pa_mpjpe, pck3d, MatchConfig, PCK_THRESHOLD_MM,
};
use crate::refiner::{
    assemble_tokens, forward, refine, select_inference_contexts, FeatureProvider, RefinerWeights,
    Synthetic2dProvider,
};
use crate::rotmath::{rodrigues, RotMat, Vec3};
use report::{ExperimentReport, ReportRow};

/// Per-joint pose sampling bound for synthetic persons (radians).
pub const MAX_POSE_ANGLE: f64 = std::f64::consts::PI / 3.0;

/// Seed of the fixed feature-encoding projection shared by training and
/// evaluation.
pub const FEATURE_PROVIDER_SEED: u64 = 1302;

/// Noise of the scene's 2D feature channel (normalized image units). The
/// channel stands in for image evidence: it observes the true 2D joints
/// independently of the 3D skeleton estimate, so refinement has a real
/// measurement to fuse.
pub const FEATURE_2D_NOISE: f64 = 0.005;

/// Deterministic per-entity stream seed derived from a master seed.
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One synthetic person: internally consistent ground truth plus the
/// noisy observations the pipeline actually sees — the estimated 3D
/// skeleton and the independently noised 2D joints behind the image
/// features.
#[derive(Debug, Clone)]
pub struct ScenePerson {
    pub gt_params: MeshParams,
    pub gt_skeleton: SkeletonGT,
    pub gt_twists: TwistAngles,
    pub observed: Skeleton,
    /// 2D joints as seen by the image-feature channel.
    pub image_obs2d: [[f64; 2]; NUM_JOINTS],
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub persons: Vec<ScenePerson>,
    pub noise_level: f64,
    pub seed: u64,
}

impl Scene {
    /// Ground-truth internal consistency: the stored skeleton is the FK of
    /// the stored parameters and the twists are their extraction.
    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        for (i, person) in self.persons.iter().enumerate() {
            let rotations = person.gt_params.rotations()?;
            let (joints, _) =
                crate::bodymodel::forward_kinematics(model, &rotations, &person.gt_params.beta);
            for k in 0..NUM_JOINTS {
                let fk_rel = joints[k] - joints[0];
                let gt_rel = person.gt_skeleton.rel3d.joints[k];
                if (fk_rel - gt_rel).norm() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "scene person {i}: skeleton is not the FK of its parameters (joint {k})"
                    )));
                }
            }
            let twists =
                crate::ik::extract_twist(model, &rotations, &person.gt_params.beta);
            for k in 0..NUM_JOINTS {
                let dc = (twists.cos_sin[k][0] - person.gt_twists.cos_sin[k][0]).abs();
                let ds = (twists.cos_sin[k][1] - person.gt_twists.cos_sin[k][1]).abs();
                if dc.max(ds) > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "scene person {i}: twists inconsistent at joint {k}"
                    )));
                }
            }
            person.gt_skeleton.validate()?;
        }
        Ok(())
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 {
            return v / n;
        }
    }
}

/// Generate one scene with `persons` people.
///
/// Shapes are uniform in [-2, 2], rotations are random axis-angle poses up
/// to [`MAX_POSE_ANGLE`] re-expressed in the solver's canonical root gauge,
/// roots are spread over the ground plane at least 0.3 m apart, and the
/// observed skeletons are the ground truth plus isotropic Gaussian noise.
pub fn synth_scene(
    model: &BodyModel,
    seed: u64,
    persons: usize,
    noise_level: f64,
) -> Result<Scene> {
    if persons == 0 {
        return Err(Error::InvalidInput("scene needs at least one person".into()));
    }
    let mut out = Vec::with_capacity(persons);
    for i in 0..persons {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64 + 1));
        let beta: [f64; NUM_SHAPE] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let raw: [RotMat; NUM_JOINTS] = std::array::from_fn(|_| {
            let axis = random_unit(&mut rng);
            let angle = rng.random_range(0.0..MAX_POSE_ANGLE);
            rodrigues(&axis, angle.cos(), angle.sin()).expect("unit axis")
        });
        let (solution, twists) = canonicalize_pose(model, &raw, &beta)?;
        let gt_params = MeshParams {
            theta: solution.theta,
            beta,
            camera: [
                rng.random_range(0.8..1.0),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ],
        };
        let rotations = gt_params.rotations()?;
        let (joints, _) = crate::bodymodel::forward_kinematics(model, &rotations, &beta);

        // Ground-plane placement; 1.2 m spacing with ±0.3 m jitter keeps
        // every pair at least 0.3 m apart.
        let root_target = Vector3::new(
            i as f64 * 1.2 + rng.random_range(-0.3..0.3),
            joints[0].y,
            rng.random_range(-0.5..0.5),
        );
        let offset = root_target - joints[0];
        let abs = Skeleton::new(std::array::from_fn(|k| joints[k] + offset));
        let gt_skeleton = SkeletonGT::from_abs(&abs, &gt_params.camera);

        let observed = if noise_level > 0.0 {
            let dist = Normal::new(0.0, noise_level).unwrap();
            Skeleton::new(std::array::from_fn(|k| {
                abs.joints[k]
                    + Vector3::new(
                        dist.sample(&mut rng),
                        dist.sample(&mut rng),
                        dist.sample(&mut rng),
                    )
            }))
        } else {
            abs.clone()
        };
        let feat_dist = Normal::new(0.0, FEATURE_2D_NOISE).unwrap();
        let image_obs2d = std::array::from_fn(|k| {
            [
                gt_skeleton.joints2d[k][0] + feat_dist.sample(&mut rng),
                gt_skeleton.joints2d[k][1] + feat_dist.sample(&mut rng),
            ]
        });

        out.push(ScenePerson {
            gt_params,
            gt_skeleton,
            gt_twists: twists,
            observed,
            image_obs2d,
        });
    }
    Ok(Scene {
        persons: out,
        noise_level,
        seed,
    })
}

/// Convenience: a batch of scenes with per-scene derived seeds.
pub fn synth_scenes(
    model: &BodyModel,
    seed: u64,
    scenes: usize,
    persons: usize,
    noise_level: f64,
) -> Result<Vec<Scene>> {
    (0..scenes)
        .map(|s| synth_scene(model, derive_seed(seed, 1000 + s as u64), persons, noise_level))
        .collect()
}

/// IK initialization of one observed person: parameters, posed mesh and the
/// absolute skeleton re-anchored at the observed pelvis.
pub struct PersonInit {
    pub params: MeshParams,
    pub mesh: BodyMesh,
    pub joints_abs: Skeleton,
    pub degenerate_joints: usize,
}

pub fn init_person(model: &BodyModel, person: &ScenePerson) -> Result<PersonInit> {
    let solution = solve_ik(
        model,
        &person.observed,
        &person.gt_twists,
        &person.gt_params.beta,
    )?;
    let params = MeshParams {
        theta: solution.theta,
        beta: person.gt_params.beta,
        camera: C_INIT,
    };
    let (mesh, joints) = params_to_mesh(model, &params)?;
    let shift = person.observed.root() - joints[0];
    let joints_abs = Skeleton::new(std::array::from_fn(|k| joints[k] + shift));
    Ok(PersonInit {
        params,
        mesh,
        joints_abs,
        degenerate_joints: solution.degenerate_count(),
    })
}

fn person_abs_skeleton(
    model: &BodyModel,
    params: &MeshParams,
    anchor_root: Vec3,
) -> Result<(BodyMesh, Skeleton)> {
    let (mesh, joints) = params_to_mesh(model, params)?;
    let shift = anchor_root - joints[0];
    Ok((
        mesh,
        Skeleton::new(std::array::from_fn(|k| joints[k] + shift)),
    ))
}

/// Round-trip experiment on one scene: IK from the observed skeletons with
/// ground-truth twists and shapes, then mesh metrics against the ground
/// truth. One report row per person.
pub fn run_roundtrip(model: &BodyModel, scene: &Scene) -> Result<ExperimentReport> {
    let mut rows = Vec::new();
    for (i, person) in scene.persons.iter().enumerate() {
        let init = init_person(model, person)?;
        let (gt_mesh, _) = params_to_mesh(model, &person.gt_params)?;
        rows.push(ReportRow {
            scene: 0,
            person: Some(i),
            mpjpe_mm: Some(mpjpe(&init.joints_abs, &person.gt_skeleton.abs3d)),
            pa_mpjpe_mm: Some(pa_mpjpe(&init.joints_abs, &person.gt_skeleton.abs3d)?),
            mve_mm: Some(mve(model, &init.mesh, &gt_mesh, true)?),
            pck3d: Some(pck3d(
                &init.joints_abs,
                &person.gt_skeleton.abs3d,
                PCK_THRESHOLD_MM,
                true,
            )),
            ik_degenerate_joints: Some(init.degenerate_joints),
            ..ReportRow::default()
        });
    }
    let config = json!({
        "experiment": "roundtrip",
        "persons": scene.persons.len(),
        "noise_level": scene.noise_level,
        "seed": scene.seed,
    });
    Ok(ExperimentReport::new(config, rows))
}

/// Evaluation options; defaults match the standard protocol.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub match_config: MatchConfig,
    pub pck_threshold_mm: f64,
    pub root_align_pck: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            match_config: MatchConfig::default(),
            pck_threshold_mm: PCK_THRESHOLD_MM,
            root_align_pck: true,
        }
    }
}

/// Bookkeeping of the refinement pass.
#[derive(Debug, Clone, Default)]
pub struct EvalStats {
    pub refiner_calls: usize,
    /// (scene, target, group) for every refiner invocation.
    pub context_groups: Vec<(usize, usize, Vec<usize>)>,
}

struct PairMetrics {
    mpjpe: f64,
    pa: f64,
    mve: f64,
    pck: f64,
}

fn matched_metrics(
    model: &BodyModel,
    pairs: &[(usize, usize)],
    preds: &[(BodyMesh, Skeleton)],
    gts: &[(BodyMesh, &SkeletonGT)],
    opts: &EvalOptions,
) -> Result<Vec<PairMetrics>> {
    pairs
        .iter()
        .map(|&(pi, gi)| {
            Ok(PairMetrics {
                mpjpe: mpjpe(&preds[pi].1, &gts[gi].1.abs3d),
                pa: pa_mpjpe(&preds[pi].1, &gts[gi].1.abs3d)?,
                mve: mve(model, &preds[pi].0, &gts[gi].0, true)?,
                pck: pck3d(
                    &preds[pi].1,
                    &gts[gi].1.abs3d,
                    opts.pck_threshold_mm,
                    opts.root_align_pck,
                ),
            })
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full evaluation over scenes: matching, metrics on the IK
/// initialization, and, when weights are given, metrics after refinement
/// with the closest-person context rule (one refiner call per person).
pub fn evaluate(
    model: &BodyModel,
    weights: Option<&RefinerWeights>,
    scenes: &[Scene],
    opts: &EvalOptions,
) -> Result<(ExperimentReport, EvalStats)> {
    let mut rows = Vec::new();
    let mut stats = EvalStats::default();
    let provider = weights
        .map(|w| Synthetic2dProvider::new(w.config.feat_dim, FEATURE_PROVIDER_SEED));

    for (scene_idx, scene) in scenes.iter().enumerate() {
        let inits: Vec<PersonInit> = scene
            .persons
            .iter()
            .map(|p| init_person(model, p))
            .collect::<Result<_>>()?;
        let gts: Vec<(BodyMesh, &SkeletonGT)> = scene
            .persons
            .iter()
            .map(|p| Ok((params_to_mesh(model, &p.gt_params)?.0, &p.gt_skeleton)))
            .collect::<Result<_>>()?;

        let pred_skeletons: Vec<Skeleton> =
            inits.iter().map(|i| i.joints_abs.clone()).collect();
        let gt_skeletons: Vec<Skeleton> = gts.iter().map(|(_, g)| g.abs3d.clone()).collect();
        let matching = match_predictions(&pred_skeletons, &gt_skeletons, &opts.match_config);

        let init_pairs: Vec<(BodyMesh, Skeleton)> = inits
            .iter()
            .map(|i| (i.mesh.clone(), i.joints_abs.clone()))
            .collect();
        let init_metrics = matched_metrics(model, &matching.pairs, &init_pairs, &gts, opts)?;

        let mut row = ReportRow {
            scene: scene_idx,
            f1: Some(matching.f1),
            mpjpe_mm: mean(init_metrics.iter().map(|m| m.mpjpe)),
            pa_mpjpe_mm: mean(init_metrics.iter().map(|m| m.pa)),
            mve_mm: mean(init_metrics.iter().map(|m| m.mve)),
            pck3d: mean(init_metrics.iter().map(|m| m.pck)),
            ik_degenerate_joints: Some(inits.iter().map(|i| i.degenerate_joints).sum()),
            ..ReportRow::default()
        };
        if matching.f1 > 0.0 {
            if let (Some(mp), Some(mv)) = (row.mpjpe_mm, row.mve_mm) {
                let (nmje, nmve) = nmje_nmve(mp, mv, matching.f1)?;
                row.nmje_mm = Some(nmje);
                row.nmve_mm = Some(nmve);
            }
        }

        if let (Some(weights), Some(provider)) = (weights, provider.as_ref()) {
            let observed: Vec<Skeleton> =
                scene.persons.iter().map(|p| p.observed.clone()).collect();
            let features: Vec<_> = scene
                .persons
                .iter()
                .zip(&inits)
                .map(|(p, init)| {
                    let init2d =
                        project_ortho(&init.joints_abs.root_relative(), &C_INIT);
                    provider.person_features(&p.image_obs2d, &init2d)
                })
                .collect();

            let mut refined_pairs = Vec::with_capacity(inits.len());
            for target in 0..inits.len() {
                let group =
                    select_inference_contexts(target, &observed, weights.config.max_persons);
                let members: Vec<_> = group
                    .iter()
                    .map(|&i| (inits[i].params.clone(), features[i].clone()))
                    .collect();
                let input = assemble_tokens(&members, &weights.config)?;
                let out = forward(weights, &input, false)?;
                let refined = refine(&inits[target].params, &out.deltas[0]);
                stats.refiner_calls += 1;
                stats.context_groups.push((scene_idx, target, group));
                refined_pairs.push(person_abs_skeleton(
                    model,
                    &refined,
                    observed[target].root(),
                )?);
            }
            let refined_metrics =
                matched_metrics(model, &matching.pairs, &refined_pairs, &gts, opts)?;
            row.mpjpe_refined_mm = mean(refined_metrics.iter().map(|m| m.mpjpe));
            row.pa_mpjpe_refined_mm = mean(refined_metrics.iter().map(|m| m.pa));
            row.mve_refined_mm = mean(refined_metrics.iter().map(|m| m.mve));
            row.pck3d_refined = mean(refined_metrics.iter().map(|m| m.pck));
            if matching.f1 > 0.0 {
                if let (Some(mp), Some(mv)) = (row.mpjpe_refined_mm, row.mve_refined_mm) {
                    let (nmje, nmve) = nmje_nmve(mp, mv, matching.f1)?;
                    row.nmje_refined_mm = Some(nmje);
                    row.nmve_refined_mm = Some(nmve);
                }
            }
        }
        rows.push(row);
    }

    let config = json!({
        "experiment": "eval",
        "scenes": scenes.len(),
        "refined": weights.is_some(),
        "match_gate_mm": opts.match_config.gate_mm,
        "pck_threshold_mm": opts.pck_threshold_mm,
    });
    Ok((ExperimentReport::new(config, rows), stats))
}
