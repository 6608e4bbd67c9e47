//! Deformable body model: shape blendshapes, kinematic-tree forward
//! kinematics, linear blend skinning and mesh-to-joint regression.
//!
//! The model is the differentiable map from parameters (per-joint 6D
//! rotations, shape coefficients, weak-perspective camera) to a posed mesh.
//! Licensed model assets are not shipped; [`generate_synthetic_model`]
//! produces a stand-in with the identical topology contract, and
//! [`file`] loads externally supplied models behind the same type.

mod file;
mod synthetic;
pub mod tape;

pub use file::{load_model, save_model};
pub use synthetic::generate_synthetic_model;

use nalgebra::Vector3;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::rotmath::{self, Rot6d, RotMat, Vec3, ROT6D_IDENTITY};

/// Number of body joints; fixed to align with the 24-joint pose layout.
pub const NUM_JOINTS: usize = 24;

/// Number of shape coefficients.
pub const NUM_SHAPE: usize = 10;

/// Joint-parent indices, root (pelvis) first with parent -1.
pub const PARENTS: [i32; NUM_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

/// Kinematic tree: parent indices plus joint names.
#[derive(Debug, Clone)]
pub struct KinematicTree {
    pub parents: [i32; NUM_JOINTS],
    pub names: Vec<String>,
}

impl KinematicTree {
    pub fn standard() -> Self {
        KinematicTree {
            parents: PARENTS,
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Parent of joint `k`, `None` for the root.
    pub fn parent(&self, k: usize) -> Option<usize> {
        let p = self.parents[k];
        (p >= 0).then_some(p as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let roots = self.parents.iter().filter(|&&p| p < 0).count();
        if roots != 1 || self.parents[0] != -1 {
            return Err(Error::InvalidModel(format!(
                "tree must have exactly one root at index 0, found {roots} roots"
            )));
        }
        for (k, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= k {
                return Err(Error::InvalidModel(format!(
                    "joint {k} has parent {p}; parents must precede children"
                )));
            }
        }
        Ok(())
    }
}

/// Rigid transform of one joint in world space after forward kinematics.
#[derive(Debug, Clone, Copy)]
pub struct GlobalTransform {
    pub rotation: RotMat,
    pub translation: Vec3,
}

/// Per-person body parameters: pose as 24 joint rotations in 6D form,
/// shape coefficients and a weak-perspective camera (scale, tx, ty).
#[derive(Debug, Clone, PartialEq)]
pub struct MeshParams {
    pub theta: [Rot6d; NUM_JOINTS],
    pub beta: [f64; NUM_SHAPE],
    pub camera: [f64; 3],
}

impl MeshParams {
    /// Rest pose, neutral shape, unit camera.
    pub fn neutral() -> Self {
        MeshParams {
            theta: [ROT6D_IDENTITY; NUM_JOINTS],
            beta: [0.0; NUM_SHAPE],
            camera: [1.0, 0.0, 0.0],
        }
    }

    /// Decode all joint rotations; a degenerate 6D entry fails the whole
    /// decode.
    pub fn rotations(&self) -> Result<[RotMat; NUM_JOINTS]> {
        let mut out = [RotMat::identity(); NUM_JOINTS];
        for (k, r) in self.theta.iter().enumerate() {
            out[k] = rotmath::rot6d_to_matrix(r)?;
        }
        Ok(out)
    }

    /// Pose as a 24×6 matrix.
    pub fn theta_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((NUM_JOINTS, 6), |(k, c)| self.theta[k][c])
    }

    /// Pose flattened row-major to 1×144, the discriminator input layout.
    pub fn theta_flat(&self) -> Array2<f64> {
        Array2::from_shape_fn((1, NUM_JOINTS * 6), |(_, i)| self.theta[i / 6][i % 6])
    }

    pub fn beta_row(&self) -> Array2<f64> {
        Array2::from_shape_fn((1, NUM_SHAPE), |(_, j)| self.beta[j])
    }

    pub fn camera_row(&self) -> Array2<f64> {
        Array2::from_shape_fn((1, 3), |(_, j)| self.camera[j])
    }

    pub fn theta_from_array(a: &Array2<f64>) -> [Rot6d; NUM_JOINTS] {
        std::array::from_fn(|k| std::array::from_fn(|c| a[(k, c)]))
    }
}

/// Posed triangle mesh.
#[derive(Debug, Clone)]
pub struct BodyMesh {
    /// V×3 vertex positions in meters.
    pub vertices: Array2<f64>,
    pub faces: Vec<[usize; 3]>,
}

/// The body model: template geometry, blendshapes, skinning weights,
/// mesh-to-joint regressor and the kinematic tree. Immutable after
/// construction; all operations borrow it read-only.
#[derive(Debug, Clone)]
pub struct BodyModel {
    /// V×3 template vertices (meters).
    pub template_vertices: Array2<f64>,
    pub faces: Vec<[usize; 3]>,
    /// V×3×10 vertex displacement per unit shape coefficient.
    pub shape_dirs: Array3<f64>,
    /// V×24 skinning weights; rows convex, at most 4 non-zeros.
    pub skin_weights: Array2<f64>,
    /// 24×V regressor mapping mesh vertices to joint positions.
    pub joint_regressor: Array2<f64>,
    pub tree: KinematicTree,
}

impl BodyModel {
    pub fn vertex_count(&self) -> usize {
        self.template_vertices.nrows()
    }

    /// Check every structural invariant of the model.
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        let v = self.vertex_count();
        if v < 100 {
            return Err(Error::InvalidModel(format!(
                "model must have at least 100 vertices, got {v}"
            )));
        }
        if self.shape_dirs.dim() != (v, 3, NUM_SHAPE) {
            return Err(Error::InvalidModel("shape_dirs dimensions".into()));
        }
        if self.skin_weights.dim() != (v, NUM_JOINTS) {
            return Err(Error::InvalidModel("skin_weights dimensions".into()));
        }
        if self.joint_regressor.dim() != (NUM_JOINTS, v) {
            return Err(Error::InvalidModel("joint_regressor dimensions".into()));
        }
        for (i, row) in self.skin_weights.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            let mut nnz = 0;
            for &w in row.iter() {
                if w < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "negative skin weight on vertex {i}"
                    )));
                }
                if w > 0.0 {
                    nnz += 1;
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!(
                    "skin weights of vertex {i} sum to {sum}"
                )));
            }
            if nnz > 4 {
                return Err(Error::InvalidModel(format!(
                    "vertex {i} has {nnz} > 4 skinning influences"
                )));
            }
        }
        for (k, row) in self.joint_regressor.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!(
                    "regressor row {k} sums to {sum}"
                )));
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i >= v) {
                return Err(Error::InvalidModel(format!(
                    "face {f} indexes out-of-range vertex"
                )));
            }
        }
        if self.template_vertices.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel("non-finite template vertex".into()));
        }
        let rest = self.rest_joints();
        for k in 1..NUM_JOINTS {
            let q = self.tree.parent(k).unwrap();
            let len = (rest[k] - rest[q]).norm();
            if len < 1e-6 {
                return Err(Error::InvalidModel(format!(
                    "zero-length bone between joints {q} and {k}"
                )));
            }
        }
        Ok(())
    }

    /// Rest joints of the neutral shape.
    pub fn rest_joints(&self) -> [Vec3; NUM_JOINTS] {
        regress_joints(&self.joint_regressor, &self.template_vertices)
    }

    /// Joint-level shape basis: 24×3×10 displacement of each rest joint per
    /// unit shape coefficient, precomputed from the vertex-level blendshapes
    /// through the regressor.
    pub fn joint_shape_dirs(&self) -> Array3<f64> {
        let v = self.vertex_count();
        let mut out = Array3::zeros((NUM_JOINTS, 3, NUM_SHAPE));
        for j in 0..NUM_SHAPE {
            for k in 0..NUM_JOINTS {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for i in 0..v {
                        acc += self.joint_regressor[(k, i)] * self.shape_dirs[(i, c, j)];
                    }
                    out[(k, c, j)] = acc;
                }
            }
        }
        out
    }
}

fn regress_joints(regressor: &Array2<f64>, vertices: &Array2<f64>) -> [Vec3; NUM_JOINTS] {
    let j = regressor.dot(vertices);
    std::array::from_fn(|k| Vector3::new(j[(k, 0)], j[(k, 1)], j[(k, 2)]))
}

/// Apply shape blendshapes: `vertices = template + Σ_j beta_j · shape_dirs[:,:,j]`
/// and regress the rest joints of the shaped body.
pub fn shaped_rest(model: &BodyModel, beta: &[f64; NUM_SHAPE]) -> (Array2<f64>, [Vec3; NUM_JOINTS]) {
    let mut vertices = model.template_vertices.clone();
    for j in 0..NUM_SHAPE {
        if beta[j] == 0.0 {
            continue;
        }
        for i in 0..model.vertex_count() {
            for c in 0..3 {
                vertices[(i, c)] += beta[j] * model.shape_dirs[(i, c, j)];
            }
        }
    }
    let joints = regress_joints(&model.joint_regressor, &vertices);
    (vertices, joints)
}

/// Forward kinematics down the tree.
///
/// Each joint's rotation is applied to its own bone offset: with `A_k` the
/// accumulated rotation `A_parent · R_k`, the joint lands at
/// `p_k = p_parent + A_k · (rest_k − rest_parent)`. The root keeps the rest
/// position and contributes `A_root = R_root`, so a root rotation pivots the
/// whole body about the rest pelvis.
pub fn forward_kinematics(
    model: &BodyModel,
    rotations: &[RotMat; NUM_JOINTS],
    beta: &[f64; NUM_SHAPE],
) -> ([Vec3; NUM_JOINTS], [GlobalTransform; NUM_JOINTS]) {
    let (_, rest) = shaped_rest(model, beta);
    forward_kinematics_from_rest(&model.tree, &rest, rotations)
}

/// FK given precomputed shaped rest joints.
pub fn forward_kinematics_from_rest(
    tree: &KinematicTree,
    rest: &[Vec3; NUM_JOINTS],
    rotations: &[RotMat; NUM_JOINTS],
) -> ([Vec3; NUM_JOINTS], [GlobalTransform; NUM_JOINTS]) {
    let mut transforms = [GlobalTransform {
        rotation: RotMat::identity(),
        translation: Vector3::zeros(),
    }; NUM_JOINTS];
    let mut joints = [Vector3::zeros(); NUM_JOINTS];

    transforms[0] = GlobalTransform {
        rotation: rotations[0],
        translation: rest[0],
    };
    joints[0] = rest[0];

    for k in 1..NUM_JOINTS {
        let q = tree.parent(k).expect("non-root joint has a parent");
        let accumulated = transforms[q].rotation * rotations[k];
        let offset = rest[k] - rest[q];
        let pos = joints[q] + accumulated * offset;
        transforms[k] = GlobalTransform {
            rotation: accumulated,
            translation: pos,
        };
        joints[k] = pos;
    }
    (joints, transforms)
}

/// Linear blend skinning: each shaped rest vertex is carried by the global
/// transforms of the joints it is bound to,
/// `v' = Σ_k w_k (A_k (v − rest_k) + p_k)`.
pub fn skin(
    model: &BodyModel,
    transforms: &[GlobalTransform; NUM_JOINTS],
    beta: &[f64; NUM_SHAPE],
) -> BodyMesh {
    let (shaped, rest) = shaped_rest(model, beta);
    let v = model.vertex_count();
    let mut out = Array2::zeros((v, 3));
    for i in 0..v {
        let vi = Vector3::new(shaped[(i, 0)], shaped[(i, 1)], shaped[(i, 2)]);
        let mut acc = Vector3::zeros();
        for k in 0..NUM_JOINTS {
            let w = model.skin_weights[(i, k)];
            if w == 0.0 {
                continue;
            }
            let t = &transforms[k];
            acc += w * (t.rotation * (vi - rest[k]) + t.translation);
        }
        out[(i, 0)] = acc.x;
        out[(i, 1)] = acc.y;
        out[(i, 2)] = acc.z;
    }
    BodyMesh {
        vertices: out,
        faces: model.faces.clone(),
    }
}

/// Full parameter-to-mesh map: decode 6D rotations, run FK, skin the mesh
/// and regress joints back from the posed vertices.
pub fn params_to_mesh(model: &BodyModel, params: &MeshParams) -> Result<(BodyMesh, [Vec3; NUM_JOINTS])> {
    let rotations = params.rotations()?;
    let (_, transforms) = forward_kinematics(model, &rotations, &params.beta);
    let mesh = skin(model, &transforms, &params.beta);
    let joints = regress_joints(&model.joint_regressor, &mesh.vertices);
    Ok((mesh, joints))
}
