//! Scene, config, checkpoint and mesh file I/O.
//!
//! Scene files hold ground truth only; observation noise is applied at
//! load time from explicit seeds. Weight checkpoints are JSON documents
//! tagged `bodyik-refiner-v1` with named tensors and a config header.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, Scene, ScenePerson};
use crate::bodymodel::{BodyMesh, BodyModel, MeshParams, NUM_JOINTS, NUM_SHAPE};
use crate::error::{Error, Result};
use crate::ik::{Skeleton, TwistAngles, C_INIT};
use crate::losses::SkeletonGT;
use crate::refiner::{RefinerConfig, RefinerWeights};

pub const WEIGHTS_FORMAT: &str = "bodyik-refiner-v1";

#[derive(Serialize, Deserialize)]
struct SceneFilePerson {
    joints3d: Vec<[f64; 3]>,
    joints2d: Vec<[f64; 2]>,
    theta6d: Vec<[f64; 6]>,
    beta: Vec<f64>,
    twists: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SceneFileScene {
    persons: Vec<SceneFilePerson>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    scenes: Vec<SceneFileScene>,
}

/// Write ground-truth scenes (absolute 3D joints in meters, 2D joints,
/// 6D pose, shape, twists) to one JSON document.
pub fn save_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    let file = SceneFile {
        scenes: scenes
            .iter()
            .map(|scene| SceneFileScene {
                persons: scene
                    .persons
                    .iter()
                    .map(|p| SceneFilePerson {
                        joints3d: p
                            .gt_skeleton
                            .abs3d
                            .joints
                            .iter()
                            .map(|j| [j.x, j.y, j.z])
                            .collect(),
                        joints2d: p.gt_skeleton.joints2d.to_vec(),
                        theta6d: p.gt_params.theta.to_vec(),
                        beta: p.gt_params.beta.to_vec(),
                        twists: p.gt_twists.cos_sin.to_vec(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn fixed<const N: usize, T: Copy>(v: &[T], what: &str) -> Result<[T; N]> {
    v.try_into()
        .map_err(|_| Error::InvalidInput(format!("{what}: expected {N} entries, got {}", v.len())))
}

/// Load scenes and apply isotropic observation noise of `noise_level`
/// meters, seeded per scene and person.
pub fn load_scenes(
    path: &Path,
    model: &BodyModel,
    noise_level: f64,
    noise_seed: u64,
) -> Result<Vec<Scene>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;

    file.scenes
        .iter()
        .enumerate()
        .map(|(scene_idx, scene)| {
            let persons = scene
                .persons
                .iter()
                .enumerate()
                .map(|(person_idx, p)| {
                    let joints3d: [[f64; 3]; NUM_JOINTS] = fixed(&p.joints3d, "joints3d")?;
                    let joints2d: [[f64; 2]; NUM_JOINTS] = fixed(&p.joints2d, "joints2d")?;
                    let theta: [[f64; 6]; NUM_JOINTS] = fixed(&p.theta6d, "theta6d")?;
                    let beta: [f64; NUM_SHAPE] = fixed(&p.beta, "beta")?;
                    let twists = TwistAngles {
                        cos_sin: fixed(&p.twists, "twists")?,
                    };
                    twists.validate()?;

                    let abs = Skeleton::new(std::array::from_fn(|k| {
                        Vector3::new(joints3d[k][0], joints3d[k][1], joints3d[k][2])
                    }));
                    abs.validate(model)?;
                    let gt_skeleton = SkeletonGT {
                        rel3d: abs.root_relative(),
                        abs3d: abs.clone(),
                        joints2d,
                    };
                    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                        noise_seed,
                        (scene_idx as u64) << 20 | person_idx as u64,
                    ));
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
                    // The 2D feature channel observes the stored 2D joints
                    // through its own noise, independent of the skeleton.
                    let feat_dist = Normal::new(0.0, super::FEATURE_2D_NOISE).unwrap();
                    let image_obs2d = std::array::from_fn(|k| {
                        [
                            joints2d[k][0] + feat_dist.sample(&mut rng),
                            joints2d[k][1] + feat_dist.sample(&mut rng),
                        ]
                    });
                    Ok(ScenePerson {
                        gt_params: MeshParams {
                            theta,
                            beta,
                            camera: C_INIT,
                        },
                        gt_skeleton,
                        gt_twists: twists,
                        observed,
                        image_obs2d,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Scene {
                persons,
                noise_level,
                seed: noise_seed,
            })
        })
        .collect()
}

pub fn save_refiner_config(config: &RefinerConfig, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(config).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_refiner_config(path: &Path) -> Result<RefinerConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let config: RefinerConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    config.validate()?;
    Ok(config)
}

#[derive(Serialize, Deserialize)]
struct TensorData {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    format: String,
    config: RefinerConfig,
    tensors: BTreeMap<String, TensorData>,
}

pub fn save_weights(weights: &RefinerWeights, path: &Path) -> Result<()> {
    let tensors = weights
        .tensors()
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                TensorData {
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                },
            )
        })
        .collect();
    let file = WeightsFile {
        format: WEIGHTS_FORMAT.to_string(),
        config: weights.config.clone(),
        tensors,
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_weights(path: &Path) -> Result<RefinerWeights> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: WeightsFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    if file.format != WEIGHTS_FORMAT {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint format '{}', expected '{WEIGHTS_FORMAT}'",
            file.format
        )));
    }
    let mut weights = RefinerWeights::init(&file.config, 0)?;
    for (name, tensor) in weights.tensors_mut() {
        let Some(stored) = file.tensors.get(&name) else {
            return Err(Error::InvalidInput(format!(
                "checkpoint is missing tensor '{name}'"
            )));
        };
        if stored.shape != [tensor.nrows(), tensor.ncols()]
            || stored.data.len() != tensor.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                stored.shape,
                tensor.dim()
            )));
        }
        *tensor = Array2::from_shape_vec((stored.shape[0], stored.shape[1]), stored.data.clone())
            .expect("validated shape");
    }
    weights.validate()?;
    Ok(weights)
}

/// Standard Wavefront OBJ dump of one mesh (1-based face indices).
pub fn write_obj(mesh: &BodyMesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..mesh.vertices.nrows() {
        out.push_str(&format!(
            "v {} {} {}\n",
            mesh.vertices[(i, 0)],
            mesh.vertices[(i, 1)],
            mesh.vertices[(i, 2)]
        ));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}
