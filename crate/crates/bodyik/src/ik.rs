//! Analytic inverse kinematics via twist-and-swing decomposition.
//!
//! Each joint rotation is factored into a swing that rotates the template
//! bone onto the observed bone direction and a twist about the bone axis.
//! Swings follow from bone geometry in closed form; twist angles are inputs
//! (estimated upstream or extracted from reference rotations). Joints are
//! solved hierarchically in topological order, with every target bone first
//! expressed in its parent's accumulated frame.
//!
//! Joint positions alone leave the root rotation free: any root choice can
//! be absorbed by the level-1 joints without moving a single joint. The
//! solver pins that gauge deterministically by aligning the two
//! lowest-index pelvis bones (swing onto the first, closed-form twist fit
//! on the second). [`canonicalize_pose`] re-expresses an arbitrary rotation
//! set in this gauge so that solve round trips recover rotations exactly.

use nalgebra::Vector3;

use crate::bodymodel::{shaped_rest, BodyModel, MeshParams, NUM_JOINTS, NUM_SHAPE};
use crate::error::{Error, Result};
use crate::rotmath::{
    matrix_to_rot6d, rodrigues, skew, vee, Rot6d, RotMat, Vec3, ANGLE_PAIR_TOL, DEGENERACY_TOL,
};

/// Camera initialization used for every person during the IK step.
pub const C_INIT: [f64; 3] = [0.9, 0.0, 0.0];

/// Absolute 3D joint positions of one person, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joints: [Vec3; NUM_JOINTS],
}

impl Skeleton {
    pub fn new(joints: [Vec3; NUM_JOINTS]) -> Self {
        Skeleton { joints }
    }

    pub fn root(&self) -> Vec3 {
        self.joints[0]
    }

    /// Same skeleton shifted by a constant offset.
    pub fn translated(&self, offset: Vec3) -> Self {
        Skeleton {
            joints: std::array::from_fn(|k| self.joints[k] + offset),
        }
    }

    /// Root-relative copy (root at the origin).
    pub fn root_relative(&self) -> Self {
        self.translated(-self.root())
    }

    /// 24×3 matrix view of the joints.
    pub fn to_array(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((NUM_JOINTS, 3), |(k, c)| self.joints[k][c])
    }

    pub fn from_array(a: &ndarray::Array2<f64>) -> Self {
        Skeleton {
            joints: std::array::from_fn(|k| Vector3::new(a[(k, 0)], a[(k, 1)], a[(k, 2)])),
        }
    }

    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        if self.joints.iter().any(|j| !j.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput("non-finite skeleton joint".into()));
        }
        for k in 1..NUM_JOINTS {
            let q = model.tree.parent(k).unwrap();
            if (self.joints[k] - self.joints[q]).norm() <= 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "skeleton bone {q}->{k} shorter than 1e-6 m"
                )));
            }
        }
        Ok(())
    }
}

/// Per-joint twist angles stored as (cos, sin) pairs about the template
/// bone axes. The root entry is unused and fixed to (1, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct TwistAngles {
    pub cos_sin: [[f64; 2]; NUM_JOINTS],
}

impl TwistAngles {
    pub fn identity() -> Self {
        TwistAngles {
            cos_sin: [[1.0, 0.0]; NUM_JOINTS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, pair) in self.cos_sin.iter().enumerate() {
            let r = pair[0] * pair[0] + pair[1] * pair[1];
            if (r - 1.0).abs() > ANGLE_PAIR_TOL {
                return Err(Error::Precondition(format!(
                    "twist pair of joint {k} off the unit circle: cos²+sin² = {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Result of the hierarchical solve: 6D rotations plus per-joint flags for
/// bones that fell below the length tolerance and received the identity
/// fallback.
#[derive(Debug, Clone)]
pub struct IkSolution {
    pub theta: [Rot6d; NUM_JOINTS],
    pub degenerate: [bool; NUM_JOINTS],
}

impl IkSolution {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// Swing rotation taking direction `t` onto direction `p`: axis
/// `n = t×p / ‖t×p‖`, angle from the dot and cross magnitudes, rotation by
/// the Rodrigues formula.
///
/// Degenerate cases: parallel same-direction vectors give the identity;
/// antiparallel vectors give a half turn about a deterministic axis
/// perpendicular to `t` (the projection of global x, falling back to y).
pub fn swing_from_vectors(t: &Vec3, p: &Vec3) -> Result<RotMat> {
    let nt = t.norm();
    let np = p.norm();
    if nt < DEGENERACY_TOL || np < DEGENERACY_TOL {
        return Err(Error::Precondition(
            "swing_from_vectors requires non-zero vectors".into(),
        ));
    }
    let cross = t.cross(p);
    let denom = nt * np;
    let cos_a = (t.dot(p) / denom).clamp(-1.0, 1.0);
    let sin_a = cross.norm() / denom;
    if sin_a < DEGENERACY_TOL {
        if cos_a > 0.0 {
            return Ok(RotMat::identity());
        }
        let axis = antiparallel_fallback_axis(&(t / nt));
        return rodrigues(&axis, -1.0, 0.0);
    }
    rodrigues(&(cross / cross.norm()), cos_a, sin_a)
}

/// Deterministic unit axis perpendicular to `t_hat` for the 180° swing:
/// global x projected onto t's orthogonal complement, or y when x is
/// (nearly) aligned with t.
fn antiparallel_fallback_axis(t_hat: &Vec3) -> Vec3 {
    let x = Vector3::new(1.0, 0.0, 0.0);
    let proj = x - t_hat * t_hat.dot(&x);
    if proj.norm() >= DEGENERACY_TOL {
        return proj / proj.norm();
    }
    let y = Vector3::new(0.0, 1.0, 0.0);
    let proj = y - t_hat * t_hat.dot(&y);
    proj / proj.norm()
}

/// Twist rotation about (non-unit) axis `t` by the angle with the given
/// (cos, sin): `R = I + (s/‖t‖)[t]× + ((1−c)/‖t‖²)[t]×²`.
pub fn twist_matrix(t: &Vec3, c_phi: f64, s_phi: f64) -> Result<RotMat> {
    let n = t.norm();
    if n < DEGENERACY_TOL {
        return Err(Error::Precondition("twist axis is (near) zero".into()));
    }
    let circle = c_phi * c_phi + s_phi * s_phi;
    if (circle - 1.0).abs() > ANGLE_PAIR_TOL {
        return Err(Error::Precondition(format!(
            "twist (cos, sin) off the unit circle: {circle}"
        )));
    }
    let k = skew(t);
    Ok(RotMat::identity() + k * (s_phi / n) + k * k * ((1.0 - c_phi) / (n * n)))
}

/// Recover the (cos, sin) of a rotation `tw` known to fix the unit axis
/// `axis`: cosine from the trace, sine from the antisymmetric part.
fn twist_angle_about(tw: &RotMat, axis: &Vec3) -> [f64; 2] {
    let c = ((tw.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = vee(&((tw - tw.transpose()) / 2.0)).dot(axis);
    [c, s]
}

/// Hierarchical IK: recover all 24 joint rotations (6D) from an absolute
/// skeleton, per-joint twist angles and shape coefficients.
///
/// Bones shorter than the degeneracy tolerance are flagged and receive the
/// identity rotation; everything downstream still solves in the parent
/// frame that results.
pub fn solve_ik(
    model: &BodyModel,
    skeleton: &Skeleton,
    twists: &TwistAngles,
    beta: &[f64; NUM_SHAPE],
) -> Result<IkSolution> {
    twists.validate()?;
    let (_, rest) = shaped_rest(model, beta);
    let p = &skeleton.joints;

    let mut theta = [matrix_to_rot6d(&RotMat::identity()); NUM_JOINTS];
    let mut degenerate = [false; NUM_JOINTS];
    let mut accumulated = [RotMat::identity(); NUM_JOINTS];

    // Root gauge: swing the first pelvis bone onto its target, then the
    // closed-form twist about it that best aligns the second pelvis bone.
    let root = fit_root_rotation(
        &(rest[1] - rest[0]),
        &(rest[2] - rest[0]),
        &(p[1] - p[0]),
        &(p[2] - p[0]),
    )?;
    accumulated[0] = root;
    theta[0] = matrix_to_rot6d(&root);

    for k in 1..NUM_JOINTS {
        let q = model.tree.parent(k).unwrap();
        let template_bone = rest[k] - rest[q];
        let target_bone = p[k] - p[q];
        let rotation = if target_bone.norm() < DEGENERACY_TOL {
            degenerate[k] = true;
            RotMat::identity()
        } else {
            let local = accumulated[q].transpose() * target_bone;
            let swing = swing_from_vectors(&template_bone, &local)?;
            let twist = twist_matrix(&template_bone, twists.cos_sin[k][0], twists.cos_sin[k][1])?;
            swing * twist
        };
        accumulated[k] = accumulated[q] * rotation;
        theta[k] = matrix_to_rot6d(&rotation);
    }
    Ok(IkSolution { theta, degenerate })
}

/// Closed-form root fit: members of the one-parameter family of rotations
/// mapping `t1` onto `d1` are `rot(d̂1, ψ)·swing`; the alignment of the
/// second bone as a function of ψ is `A cos ψ + B sin ψ + const`, maximized
/// at `ψ* = atan2(B, A)`.
fn fit_root_rotation(t1: &Vec3, t2: &Vec3, d1: &Vec3, d2: &Vec3) -> Result<RotMat> {
    if d1.norm() < DEGENERACY_TOL || d2.norm() < DEGENERACY_TOL {
        return Err(Error::Precondition(
            "root fit requires non-degenerate pelvis bones".into(),
        ));
    }
    let swing = swing_from_vectors(t1, d1)?;
    let axis = d1 / d1.norm();
    let u = swing * t2;
    let d2_hat = d2 / d2.norm();
    let a_coef = d2_hat.dot(&u) - d2_hat.dot(&axis) * axis.dot(&u);
    let b_coef = d2_hat.dot(&axis.cross(&u));
    let norm = (a_coef * a_coef + b_coef * b_coef).sqrt();
    if norm < 1e-14 {
        // Second bone parallel to the first: no twist information.
        return Ok(swing);
    }
    Ok(rodrigues(&axis, a_coef / norm, b_coef / norm)? * swing)
}

/// Decompose each joint rotation into swing·twist about the shaped template
/// bone axis and return the twist (cos, sin) pairs. The root entry is fixed
/// to (1, 0). Inverse of the composition used by [`solve_ik`]:
/// re-composition reproduces the input rotations.
pub fn extract_twist(
    model: &BodyModel,
    rotations: &[RotMat; NUM_JOINTS],
    beta: &[f64; NUM_SHAPE],
) -> TwistAngles {
    let (_, rest) = shaped_rest(model, beta);
    let mut out = [[1.0, 0.0]; NUM_JOINTS];
    for k in 1..NUM_JOINTS {
        let q = model.tree.parent(k).unwrap();
        let bone = rest[k] - rest[q];
        let rotated = rotations[k] * bone;
        // Swing takes the bone onto its rotated image; the remainder fixes
        // the bone axis and is the twist.
        let swing =
            swing_from_vectors(&bone, &rotated).expect("model bones are non-degenerate");
        let twist = swing.transpose() * rotations[k];
        out[k] = twist_angle_about(&twist, &(bone / bone.norm()));
    }
    TwistAngles { cos_sin: out }
}

/// Re-express an arbitrary rotation set in the solver's canonical root
/// gauge: run FK, extract twists, solve. Joint positions are unchanged;
/// the returned rotations are exactly the ones a later solve of the same
/// skeleton recovers.
pub fn canonicalize_pose(
    model: &BodyModel,
    rotations: &[RotMat; NUM_JOINTS],
    beta: &[f64; NUM_SHAPE],
) -> Result<(IkSolution, TwistAngles)> {
    let (joints, _) = crate::bodymodel::forward_kinematics(model, rotations, beta);
    let twists = extract_twist(model, rotations, beta);
    let solution = solve_ik(model, &Skeleton::new(joints), &twists, beta)?;
    Ok((solution, twists))
}

/// Per-person parameter initialization: rotations from the IK solve, shape
/// passed through, camera fixed to [`C_INIT`].
pub fn init_params(
    model: &BodyModel,
    skeletons: &[Skeleton],
    twists: &[TwistAngles],
    betas: &[[f64; NUM_SHAPE]],
) -> Result<Vec<MeshParams>> {
    if skeletons.len() != twists.len() || skeletons.len() != betas.len() {
        return Err(Error::ShapeMismatch(format!(
            "init_params got {} skeletons, {} twist sets, {} betas",
            skeletons.len(),
            twists.len(),
            betas.len()
        )));
    }
    skeletons
        .iter()
        .zip(twists)
        .zip(betas)
        .map(|((skeleton, twist), beta)| {
            let solution = solve_ik(model, skeleton, twist, beta)?;
            Ok(MeshParams {
                theta: solution.theta,
                beta: *beta,
                camera: C_INIT,
            })
        })
        .collect()
}
