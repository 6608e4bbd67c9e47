//! Seeded synthetic body model generator.
//!
//! Builds a stand-in model with the full topology contract: a humanoid
//! rest skeleton, per-joint vertex clusters, convex skinning weights, a
//! joint regressor that reproduces the skeleton joints exactly, coherent
//! shape blendshapes and a simple fan triangulation.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::{BodyModel, KinematicTree, NUM_JOINTS, NUM_SHAPE};
use crate::error::{Error, Result};
use crate::rotmath::Vec3;

/// Canonical rest skeleton (meters, y up). Bone lengths all fall inside
/// [0.05, 0.6] with margin for the per-seed jitter.
const BASE_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.00, 0.95, 0.00],   // pelvis
    [0.09, 0.90, 0.00],   // left_hip
    [-0.09, 0.90, 0.00],  // right_hip
    [0.00, 1.05, -0.01],  // spine1
    [0.10, 0.50, 0.00],   // left_knee
    [-0.10, 0.50, 0.00],  // right_knee
    [0.00, 1.18, -0.02],  // spine2
    [0.11, 0.10, 0.00],   // left_ankle
    [-0.11, 0.10, 0.00],  // right_ankle
    [0.00, 1.30, -0.01],  // spine3
    [0.12, 0.03, 0.12],   // left_foot
    [-0.12, 0.03, 0.12],  // right_foot
    [0.00, 1.45, 0.00],   // neck
    [0.07, 1.40, 0.00],   // left_collar
    [-0.07, 1.40, 0.00],  // right_collar
    [0.00, 1.60, 0.02],   // head
    [0.18, 1.42, 0.00],   // left_shoulder
    [-0.18, 1.42, 0.00],  // right_shoulder
    [0.45, 1.40, 0.00],   // left_elbow
    [-0.45, 1.40, 0.00],  // right_elbow
    [0.70, 1.40, 0.00],   // left_wrist
    [-0.70, 1.40, 0.00],  // right_wrist
    [0.78, 1.39, 0.00],   // left_hand
    [-0.78, 1.39, 0.00],  // right_hand
];

/// Deterministically generate a synthetic body model with `v` vertices.
pub fn generate_synthetic_model(seed: u64, v: usize) -> Result<BodyModel> {
    if v < 100 {
        return Err(Error::InvalidInput(format!(
            "synthetic model needs at least 100 vertices, got {v}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let tree = KinematicTree::standard();

    // Jittered rest skeleton; jitter small enough to keep bone lengths in
    // the contract range.
    let rest: Vec<Vec3> = BASE_JOINTS
        .iter()
        .map(|j| {
            Vector3::new(
                j[0] + rng.random_range(-0.005..0.005),
                j[1] + rng.random_range(-0.005..0.005),
                j[2] + rng.random_range(-0.005..0.005),
            )
        })
        .collect();

    // Distribute vertices over per-joint clusters.
    let base = v / NUM_JOINTS;
    let rem = v % NUM_JOINTS;
    let cluster_sizes: Vec<usize> = (0..NUM_JOINTS)
        .map(|k| base + usize::from(k < rem))
        .collect();

    let mut template = Array2::zeros((v, 3));
    let mut skin = Array2::zeros((v, NUM_JOINTS));
    let mut regressor = Array2::zeros((NUM_JOINTS, v));
    let mut faces = Vec::new();

    let mut idx = 0usize;
    for k in 0..NUM_JOINTS {
        let m = cluster_sizes[k];
        // Core vertices are placed in mirrored pairs about the joint so the
        // uniform regressor row reproduces the joint position exactly; they
        // are fully bound to joint k.
        let core = (3 * m / 5).max(2).min(m);
        let cluster_start = idx;
        let pairs = core / 2;
        for _ in 0..pairs {
            let r = Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
            for sgn in [1.0f64, -1.0] {
                let p: Vec3 = rest[k] + r * sgn;
                template[(idx, 0)] = p.x;
                template[(idx, 1)] = p.y;
                template[(idx, 2)] = p.z;
                skin[(idx, k)] = 1.0;
                regressor[(k, idx)] = 1.0 / core as f64;
                idx += 1;
            }
        }
        if core % 2 == 1 {
            template[(idx, 0)] = rest[k].x;
            template[(idx, 1)] = rest[k].y;
            template[(idx, 2)] = rest[k].z;
            skin[(idx, k)] = 1.0;
            regressor[(k, idx)] = 1.0 / core as f64;
            idx += 1;
        }
        // Blend vertices sit along the bone toward the parent and share
        // weight with it; the regressor ignores them.
        for _ in core..m {
            let (anchor, w) = match tree.parent(k) {
                Some(q) => {
                    let u = rng.random_range(0.1..0.5);
                    (rest[k] + (rest[q] - rest[k]) * u, rng.random_range(0.55..0.95))
                }
                None => (rest[k], 1.0),
            };
            let p = anchor
                + Vector3::new(
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                );
            template[(idx, 0)] = p.x;
            template[(idx, 1)] = p.y;
            template[(idx, 2)] = p.z;
            skin[(idx, k)] = w;
            if let Some(q) = tree.parent(k) {
                skin[(idx, q)] = 1.0 - w;
            }
            idx += 1;
        }
        // Fan triangulation of the cluster.
        for i in 1..m - 1 {
            faces.push([cluster_start, cluster_start + i, cluster_start + i + 1]);
        }
    }
    debug_assert_eq!(idx, v);

    // Blendshapes: each shape coefficient shifts whole clusters. Child
    // shifts stay close to the parent's so bones stretch mildly and never
    // collapse over the sampling range of beta.
    let root_shift = Normal::new(0.0, 0.004).unwrap();
    let bone_shift = Normal::new(0.0, 0.002).unwrap();
    let mut joint_dirs = vec![[Vector3::<f64>::zeros(); NUM_SHAPE]; NUM_JOINTS];
    for j in 0..NUM_SHAPE {
        joint_dirs[0][j] = Vector3::new(
            root_shift.sample(&mut rng),
            root_shift.sample(&mut rng),
            root_shift.sample(&mut rng),
        );
        for k in 1..NUM_JOINTS {
            let q = tree.parent(k).unwrap();
            joint_dirs[k][j] = joint_dirs[q][j]
                + Vector3::new(
                    bone_shift.sample(&mut rng),
                    bone_shift.sample(&mut rng),
                    bone_shift.sample(&mut rng),
                );
        }
    }
    let mut shape_dirs = Array3::zeros((v, 3, NUM_SHAPE));
    let mut offset = 0usize;
    for k in 0..NUM_JOINTS {
        for i in offset..offset + cluster_sizes[k] {
            for j in 0..NUM_SHAPE {
                shape_dirs[(i, 0, j)] = joint_dirs[k][j].x;
                shape_dirs[(i, 1, j)] = joint_dirs[k][j].y;
                shape_dirs[(i, 2, j)] = joint_dirs[k][j].z;
            }
        }
        offset += cluster_sizes[k];
    }

    let model = BodyModel {
        template_vertices: template,
        faces,
        shape_dirs,
        skin_weights: skin,
        joint_regressor: regressor,
        tree,
    };
    model.validate()?;
    Ok(model)
}
