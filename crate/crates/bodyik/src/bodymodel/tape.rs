//! Differentiable parameter-to-skeleton path on the autodiff tape.
//!
//! Rebuilds per-joint rotations from 6D coefficients (Gram-Schmidt), runs
//! the kinematic chain and emits the root-relative joints, all as tape
//! operations so the pose loss can backpropagate into both the pose and
//! shape parameters. Joint positions come straight from the chain here;
//! the regressor path is constructed to agree with it.

use ndarray::Array2;

use super::{BodyModel, NUM_JOINTS, NUM_SHAPE};
use crate::autodiff::{Tape, Var};

/// Precomputed model constants for the differentiable chain.
#[derive(Debug, Clone)]
pub struct DiffFkContext {
    /// Rest joints of the neutral shape, flattened to 72×1.
    rest0: Array2<f64>,
    /// Joint-level shape basis, 72×10.
    joint_dirs: Array2<f64>,
    parents: [i32; NUM_JOINTS],
}

impl DiffFkContext {
    pub fn new(model: &BodyModel) -> Self {
        let rest = model.rest_joints();
        let mut rest0 = Array2::zeros((NUM_JOINTS * 3, 1));
        for k in 0..NUM_JOINTS {
            for c in 0..3 {
                rest0[(k * 3 + c, 0)] = rest[k][c];
            }
        }
        let dirs = model.joint_shape_dirs();
        let mut joint_dirs = Array2::zeros((NUM_JOINTS * 3, NUM_SHAPE));
        for k in 0..NUM_JOINTS {
            for c in 0..3 {
                for j in 0..NUM_SHAPE {
                    joint_dirs[(k * 3 + c, j)] = dirs[(k, c, j)];
                }
            }
        }
        DiffFkContext {
            rest0,
            joint_dirs,
            parents: model.tree.parents,
        }
    }
}

/// 6D-to-rotation on the tape: Gram-Schmidt over the two encoded columns.
/// `theta_row` is 1×6; the result is a 3×3 rotation variable.
pub fn tape_rot6d(tape: &mut Tape, theta_row: Var) -> Var {
    let a1_row = tape.slice_cols(theta_row, 0, 3);
    let a2_row = tape.slice_cols(theta_row, 3, 6);
    let a1 = tape.transpose(a1_row);
    let a2 = tape.transpose(a2_row);
    let c1 = tape.normalize(a1);
    let proj_len = tape.dot(c1, a2);
    let proj = tape.mul_scalar_bcast(c1, proj_len);
    let resid = tape.sub(a2, proj);
    let c2 = tape.normalize(resid);
    let c3 = tape.cross(c1, c2);
    tape.concat_cols(&[c1, c2, c3])
}

/// Root-relative joints (24×3) from a 24×6 pose variable and a 1×10 shape
/// variable. Gradients flow into both.
pub fn tape_rel_joints(tape: &mut Tape, ctx: &DiffFkContext, theta: Var, beta: Var) -> Var {
    // Shaped rest joints: rest0 + joint_dirs · betaᵀ, kept as one 72×1
    // column whose per-joint 3×1 slices feed the chain.
    let rest0 = tape.leaf(ctx.rest0.clone());
    let dirs = tape.leaf(ctx.joint_dirs.clone());
    let beta_col = tape.transpose(beta);
    let shift = tape.matmul(dirs, beta_col);
    let rest = tape.add(rest0, shift);

    let rest_of = |tape: &mut Tape, k: usize| tape.slice_rows(rest, k * 3, k * 3 + 3);

    let mut accumulated: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut positions: Vec<Var> = Vec::with_capacity(NUM_JOINTS);

    for k in 0..NUM_JOINTS {
        let theta_row = tape.slice_rows(theta, k, k + 1);
        let rotation = tape_rot6d(tape, theta_row);
        if k == 0 {
            accumulated.push(rotation);
            // Root pinned at the origin: the output is root-relative.
            let origin = tape.leaf(Array2::zeros((3, 1)));
            positions.push(origin);
        } else {
            let q = ctx.parents[k] as usize;
            let acc = tape.matmul(accumulated[q], rotation);
            let rest_k = rest_of(tape, k);
            let rest_q = rest_of(tape, q);
            let offset = tape.sub(rest_k, rest_q);
            let step = tape.matmul(acc, offset);
            let pos = tape.add(positions[q], step);
            accumulated.push(acc);
            positions.push(pos);
        }
    }

    let rows: Vec<Var> = positions.iter().map(|&p| tape.transpose(p)).collect();
    tape.concat_rows(&rows)
}
