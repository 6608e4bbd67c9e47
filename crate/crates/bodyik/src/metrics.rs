//! Evaluation metrics: MPJPE (pelvis-aligned), PA-MPJPE (Procrustes),
//! MVE, 3DPCK, NMJE/NMVE and prediction-to-ground-truth matching.
//!
//! Skeletons and meshes are in meters everywhere in the library; metric
//! values are reported in millimeters, converted only at this boundary.

use nalgebra::{Matrix3, Vector3, SVD};

use crate::bodymodel::{BodyMesh, BodyModel, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::ik::Skeleton;
use crate::rotmath::{RotMat, Vec3};

/// Meters-to-millimeters conversion applied to every metric output.
pub const MM_PER_M: f64 = 1000.0;

/// Default 3DPCK threshold in millimeters.
pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// Default gating radius for prediction/ground-truth matching, millimeters.
pub const MATCH_GATE_MM: f64 = 250.0;

/// Mean per-joint position error in millimeters after moving the predicted
/// pelvis onto the ground-truth pelvis.
pub fn mpjpe(pred: &Skeleton, gt: &Skeleton) -> f64 {
    let shift = gt.joints[0] - pred.joints[0];
    let total: f64 = (0..NUM_JOINTS)
        .map(|k| (pred.joints[k] + shift - gt.joints[k]).norm())
        .sum();
    total / NUM_JOINTS as f64 * MM_PER_M
}

/// Result of the closed-form similarity alignment.
#[derive(Debug, Clone)]
pub struct ProcrustesAlignment {
    pub scale: f64,
    pub rotation: RotMat,
    pub translation: Vec3,
    pub aligned: Vec<Vec3>,
}

/// Least-squares similarity transform (scale, rotation, translation)
/// aligning `pred` onto `gt`, via SVD of the cross-covariance with
/// reflection correction: if the orthogonal factor would be a reflection,
/// the smallest singular direction is flipped.
pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3]) -> Result<ProcrustesAlignment> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "procrustes point counts {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    if n < 3 {
        return Err(Error::DegenerateAlignment(
            "procrustes needs at least 3 points".into(),
        ));
    }
    let nf = n as f64;
    let mu_p: Vec3 = pred.iter().sum::<Vec3>() / nf;
    let mu_g: Vec3 = gt.iter().sum::<Vec3>() / nf;

    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for i in 0..n {
        let p = pred[i] - mu_p;
        let g = gt[i] - mu_g;
        cov += g * p.transpose();
        var_p += p.norm_squared();
    }
    cov /= nf;
    var_p /= nf;
    if var_p < 1e-18 {
        return Err(Error::DegenerateAlignment(
            "prediction points are coincident".into(),
        ));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.ok_or_else(|| Error::NumericFailure("svd u".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NumericFailure("svd v_t".into()))?;
    let d = svd.singular_values;
    if d[1] < 1e-12 * d[0].max(1e-300) {
        return Err(Error::DegenerateAlignment(
            "point configuration has rank < 2".into(),
        ));
    }

    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s_diag[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = (d[0] * s_diag[0] + d[1] * s_diag[1] + d[2] * s_diag[2]) / var_p;
    let translation = mu_g - rotation * mu_p * scale;
    let aligned = pred
        .iter()
        .map(|p| rotation * p * scale + translation)
        .collect();
    Ok(ProcrustesAlignment {
        scale,
        rotation,
        translation,
        aligned,
    })
}

/// MPJPE after Procrustes alignment (no pelvis step), millimeters.
pub fn pa_mpjpe(pred: &Skeleton, gt: &Skeleton) -> Result<f64> {
    let alignment = procrustes_align(&pred.joints, &gt.joints)?;
    let total: f64 = alignment
        .aligned
        .iter()
        .zip(&gt.joints)
        .map(|(p, g)| (p - g).norm())
        .sum();
    Ok(total / NUM_JOINTS as f64 * MM_PER_M)
}

/// Mean per-vertex error in millimeters. With `align_pelvis` the predicted
/// mesh is first translated so that its regressed pelvis coincides with
/// the ground truth's (the convention used for mesh benchmarks).
pub fn mve(model: &BodyModel, pred: &BodyMesh, gt: &BodyMesh, align_pelvis: bool) -> Result<f64> {
    let v = pred.vertices.nrows();
    if gt.vertices.nrows() != v {
        return Err(Error::ShapeMismatch(format!(
            "mesh vertex counts {v} vs {}",
            gt.vertices.nrows()
        )));
    }
    let shift = if align_pelvis {
        regressed_pelvis(model, gt) - regressed_pelvis(model, pred)
    } else {
        Vector3::zeros()
    };
    let mut total = 0.0;
    for i in 0..v {
        let p = Vector3::new(
            pred.vertices[(i, 0)],
            pred.vertices[(i, 1)],
            pred.vertices[(i, 2)],
        );
        let g = Vector3::new(gt.vertices[(i, 0)], gt.vertices[(i, 1)], gt.vertices[(i, 2)]);
        total += (p + shift - g).norm();
    }
    Ok(total / v as f64 * MM_PER_M)
}

fn regressed_pelvis(model: &BodyModel, mesh: &BodyMesh) -> Vec3 {
    let mut p = Vector3::zeros();
    for i in 0..mesh.vertices.nrows() {
        let w = model.joint_regressor[(0, i)];
        if w != 0.0 {
            p += w * Vector3::new(
                mesh.vertices[(i, 0)],
                mesh.vertices[(i, 1)],
                mesh.vertices[(i, 2)],
            );
        }
    }
    p
}

/// Percentage of joints with error strictly below `threshold_mm`. With
/// `root_align` the prediction is pelvis-aligned first (the default
/// protocol); otherwise absolute positions are compared.
pub fn pck3d(pred: &Skeleton, gt: &Skeleton, threshold_mm: f64, root_align: bool) -> f64 {
    let shift = if root_align {
        gt.joints[0] - pred.joints[0]
    } else {
        Vector3::zeros()
    };
    let correct = (0..NUM_JOINTS)
        .filter(|&k| (pred.joints[k] + shift - gt.joints[k]).norm() * MM_PER_M < threshold_mm)
        .count();
    correct as f64 / NUM_JOINTS as f64 * 100.0
}

/// Matching configuration; the gate is the maximum pelvis distance for a
/// prediction to claim a ground truth.
#[derive(Debug, Clone, Copy)]
pub struct MatchConfig {
    pub gate_mm: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            gate_mm: MATCH_GATE_MM,
        }
    }
}

/// Outcome of prediction/ground-truth matching for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (prediction index, ground-truth index) pairs.
    pub pairs: Vec<(usize, usize)>,
    pub misses: usize,
    pub false_alarms: usize,
    pub f1: f64,
}

/// Greedy one-to-one matching by ascending pelvis distance within the gate.
/// Unmatched ground truths count as misses, unmatched predictions as false
/// alarms; F1 is 0 when undefined.
pub fn match_predictions(
    preds: &[Skeleton],
    gts: &[Skeleton],
    config: &MatchConfig,
) -> MatchResult {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let dist = (p.root() - g.root()).norm() * MM_PER_M;
            if dist <= config.gate_mm {
                candidates.push((dist, pi, gi));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used_pred = vec![false; preds.len()];
    let mut used_gt = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (_, pi, gi) in candidates {
        if !used_pred[pi] && !used_gt[gi] {
            used_pred[pi] = true;
            used_gt[gi] = true;
            pairs.push((pi, gi));
        }
    }
    let matched = pairs.len();
    let misses = gts.len() - matched;
    let false_alarms = preds.len() - matched;
    let precision = if preds.is_empty() {
        0.0
    } else {
        matched as f64 / preds.len() as f64
    };
    let recall = if gts.is_empty() {
        0.0
    } else {
        matched as f64 / gts.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MatchResult {
        pairs,
        misses,
        false_alarms,
        f1,
    }
}

/// Detection-normalized errors: (MPJPE / F1, MVE / F1).
pub fn nmje_nmve(mpjpe_matched: f64, mve_matched: f64, f1: f64) -> Result<(f64, f64)> {
    if f1 <= 0.0 || f1 > 1.0 {
        return Err(Error::UndefinedScore(format!(
            "normalization requires f1 in (0, 1], got {f1}"
        )));
    }
    Ok((mpjpe_matched / f1, mve_matched / f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::{
        forward_kinematics, generate_synthetic_model, params_to_mesh, skin, MeshParams, NUM_SHAPE,
    };
    use crate::rotmath::rodrigues;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rest_skeleton() -> Skeleton {
        let model = generate_synthetic_model(0, 600).unwrap();
        Skeleton::new(model.rest_joints())
    }

    fn noisy_copy(s: &Skeleton, rng: &mut impl Rng, sigma: f64) -> Skeleton {
        Skeleton::new(std::array::from_fn(|k| {
            s.joints[k]
                + Vector3::new(
                    rng.random_range(-sigma..sigma),
                    rng.random_range(-sigma..sigma),
                    rng.random_range(-sigma..sigma),
                )
        }))
    }

    fn random_rotation(rng: &mut impl Rng) -> RotMat {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0f64),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(-3.0..3.0f64);
        rodrigues(&axis, angle.cos(), angle.sin()).unwrap()
    }

    #[test]
    fn mpjpe_identical_is_zero() {
        let s = rest_skeleton();
        assert_eq!(mpjpe(&s, &s), 0.0);
    }

    #[test]
    fn mpjpe_single_joint_offset() {
        let gt = rest_skeleton();
        let mut pred = gt.clone();
        pred.joints[5] += Vector3::new(0.2, 0.0, 0.0);
        let expected = 200.0 / 24.0;
        assert!((mpjpe(&pred, &gt) - expected).abs() < 1e-9);
    }

    #[test]
    fn mpjpe_removes_constant_offset() {
        let gt = rest_skeleton();
        let pred = gt.translated(Vector3::new(1.0, -2.0, 0.5));
        assert!(mpjpe(&pred, &gt) < 1e-9);
    }

    #[test]
    fn procrustes_recovers_similarity_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let base = rest_skeleton();
        for _ in 0..50 {
            let s = rng.random_range(0.5..2.0);
            let r = random_rotation(&mut rng);
            let t = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let gt: Vec<Vec3> = base.joints.iter().map(|p| r * p * s + t).collect();
            let alignment = procrustes_align(&base.joints, &gt).unwrap();
            let residual: f64 = alignment
                .aligned
                .iter()
                .zip(&gt)
                .map(|(a, g)| (a - g).norm())
                .sum::<f64>()
                / gt.len() as f64;
            assert!(residual < 1e-9, "residual {residual}");
            assert!((alignment.scale - s).abs() < 1e-9);
        }
    }

    #[test]
    fn procrustes_identity_on_equal_sets() {
        let s = rest_skeleton();
        let a = procrustes_align(&s.joints, &s.joints).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-9);
        assert!((a.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(a.translation.norm() < 1e-9);
    }

    #[test]
    fn procrustes_beats_identity_transform() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let base = rest_skeleton();
        for _ in 0..100 {
            let noisy = noisy_copy(&base, &mut rng, 0.1);
            let alignment = procrustes_align(&noisy.joints, &base.joints).unwrap();
            let aligned_sq: f64 = alignment
                .aligned
                .iter()
                .zip(&base.joints)
                .map(|(a, g)| (a - g).norm_squared())
                .sum();
            let unaligned_sq: f64 = noisy
                .joints
                .iter()
                .zip(&base.joints)
                .map(|(a, g)| (a - g).norm_squared())
                .sum();
            assert!(aligned_sq <= unaligned_sq + 1e-12);
        }
    }

    #[test]
    fn procrustes_never_reflects() {
        // Mirror the points; the optimal orthogonal factor would be a
        // reflection and must be corrected to a proper rotation.
        let base = rest_skeleton();
        let mirrored: Vec<Vec3> = base
            .joints
            .iter()
            .map(|p| Vector3::new(-p.x, p.y, p.z))
            .collect();
        let alignment = procrustes_align(&base.joints, &mirrored).unwrap();
        assert!(alignment.rotation.determinant() > 0.0);
        assert!((alignment.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn procrustes_rejects_degenerate_configurations() {
        let line: Vec<Vec3> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        assert!(matches!(
            procrustes_align(&line, &line),
            Err(Error::DegenerateAlignment(_))
        ));
        let pair = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        assert!(procrustes_align(&pair, &pair).is_err());
    }

    #[test]
    fn pa_mpjpe_zero_under_rigid_transform() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let base = rest_skeleton();
        let r = random_rotation(&mut rng);
        let transformed = Skeleton::new(std::array::from_fn(|k| {
            r * base.joints[k] * 1.3 + Vector3::new(0.4, -0.2, 2.0)
        }));
        assert!(pa_mpjpe(&base, &transformed).unwrap() < 1e-9);
        assert!(pa_mpjpe(&base, &base).unwrap() < 1e-12);
    }

    #[test]
    fn pa_mpjpe_not_worse_than_mpjpe() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let base = rest_skeleton();
        for _ in 0..100 {
            let noisy = noisy_copy(&base, &mut rng, 0.08);
            let pa = pa_mpjpe(&noisy, &base).unwrap();
            let mp = mpjpe(&noisy, &base);
            assert!(pa <= mp + 1e-9, "pa {pa} vs mpjpe {mp}");
        }
    }

    #[test]
    fn mve_identical_meshes() {
        let model = generate_synthetic_model(0, 240).unwrap();
        let (mesh, _) = params_to_mesh(&model, &MeshParams::neutral()).unwrap();
        assert_eq!(mve(&model, &mesh, &mesh, true).unwrap(), 0.0);
    }

    #[test]
    fn mve_constant_offset_without_alignment() {
        let model = generate_synthetic_model(0, 240).unwrap();
        let (mesh, _) = params_to_mesh(&model, &MeshParams::neutral()).unwrap();
        let mut shifted = mesh.clone();
        for i in 0..shifted.vertices.nrows() {
            shifted.vertices[(i, 0)] += 0.010;
        }
        let err = mve(&model, &shifted, &mesh, false).unwrap();
        assert!((err - 10.0).abs() < 1e-9);
        // Pelvis alignment removes a pure translation entirely.
        assert!(mve(&model, &shifted, &mesh, true).unwrap() < 1e-9);
    }

    #[test]
    fn mve_rejects_vertex_count_mismatch() {
        let model = generate_synthetic_model(0, 240).unwrap();
        let other = generate_synthetic_model(0, 360).unwrap();
        let (a, _) = params_to_mesh(&model, &MeshParams::neutral()).unwrap();
        let (b, _) = params_to_mesh(&other, &MeshParams::neutral()).unwrap();
        assert!(mve(&model, &a, &b, false).is_err());
    }

    #[test]
    fn mve_alignment_differs_only_by_translation() {
        // Posed vs rest mesh: the aligned and unaligned errors differ by
        // the pelvis translation only when the pelvis shift is removed by
        // hand first.
        let model = generate_synthetic_model(0, 240).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let rot: [RotMat; NUM_JOINTS] = std::array::from_fn(|_| {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let a = rng.random_range(0.0..0.4f64);
            rodrigues(&axis, a.cos(), a.sin()).unwrap()
        });
        let (_, transforms) = forward_kinematics(&model, &rot, &[0.0; NUM_SHAPE]);
        let posed = skin(&model, &transforms, &[0.0; NUM_SHAPE]);
        let (restm, _) = params_to_mesh(&model, &MeshParams::neutral()).unwrap();

        // Remove the pelvis shift by translating the posed mesh by hand.
        let shift = regressed_pelvis(&model, &restm) - regressed_pelvis(&model, &posed);
        let mut translated = posed.clone();
        for i in 0..translated.vertices.nrows() {
            for c in 0..3 {
                translated.vertices[(i, c)] += shift[c];
            }
        }
        let aligned = mve(&model, &posed, &restm, true).unwrap();
        let manual = mve(&model, &translated, &restm, false).unwrap();
        assert!((aligned - manual).abs() < 1e-9);
    }

    #[test]
    fn pck_perfect_and_partial() {
        let gt = rest_skeleton();
        assert_eq!(pck3d(&gt, &gt, PCK_THRESHOLD_MM, true), 100.0);
        let mut pred = gt.clone();
        pred.joints[7] += Vector3::new(0.2, 0.0, 0.0); // 200 mm
        let got = pck3d(&pred, &gt, PCK_THRESHOLD_MM, true);
        assert!((got - 23.0 / 24.0 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn pck_zero_threshold_is_strict() {
        let gt = rest_skeleton();
        let mut pred = gt.clone();
        pred.joints[3] += Vector3::new(0.01, 0.0, 0.0);
        assert_eq!(pck3d(&pred, &gt, 0.0, false), 0.0);
    }

    #[test]
    fn matching_exact_lists() {
        let a = rest_skeleton();
        let b = a.translated(Vector3::new(1.0, 0.0, 0.0));
        let result = match_predictions(
            &[a.clone(), b.clone()],
            &[a.clone(), b.clone()],
            &MatchConfig::default(),
        );
        assert_eq!(result.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(result.f1, 1.0);
        assert_eq!(result.misses, 0);
        assert_eq!(result.false_alarms, 0);
    }

    #[test]
    fn matching_false_alarm() {
        let gt = rest_skeleton();
        let far = gt.translated(Vector3::new(5.0, 0.0, 0.0));
        let result = match_predictions(
            &[gt.clone(), far],
            &[gt.clone()],
            &MatchConfig::default(),
        );
        assert_eq!(result.pairs, vec![(0, 0)]);
        assert_eq!(result.false_alarms, 1);
        assert!((result.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_empty_predictions() {
        let gt = rest_skeleton();
        let result = match_predictions(&[], &[gt], &MatchConfig::default());
        assert_eq!(result.f1, 0.0);
        assert_eq!(result.misses, 1);
    }

    #[test]
    fn nmje_nmve_scaling() {
        assert_eq!(nmje_nmve(10.0, 20.0, 1.0).unwrap(), (10.0, 20.0));
        assert_eq!(nmje_nmve(10.0, 20.0, 0.5).unwrap(), (20.0, 40.0));
        assert!(matches!(
            nmje_nmve(10.0, 20.0, 0.0),
            Err(Error::UndefinedScore(_))
        ));
    }

    #[test]
    fn nmje_reproduces_published_ratio() {
        // Matched MPJPE 91.6 against normalized NMJE 110.4 implies a
        // detection F1 near 0.8297; inverting must agree within 0.1 mm.
        let implied_f1: f64 = 91.6 / 110.4;
        assert!((implied_f1 - 0.8297).abs() < 0.001);
        let (nmje, _) = nmje_nmve(91.6, 86.7, implied_f1).unwrap();
        assert!((nmje - 110.4).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn prop_pa_never_worse_than_mpjpe(seed in 0u64..300) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let base = rest_skeleton();
            let noisy = noisy_copy(&base, &mut rng, 0.15);
            let pa = pa_mpjpe(&noisy, &base).unwrap();
            let mp = mpjpe(&noisy, &base);
            prop_assert!(pa <= mp + 1e-9);
        }

        #[test]
        fn prop_pck_monotone_in_threshold(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let base = rest_skeleton();
            let noisy = noisy_copy(&base, &mut rng, 0.2);
            let mut last = 0.0f64;
            for t in [0.0, 50.0, 100.0, 150.0, 300.0, 1000.0] {
                let v = pck3d(&noisy, &base, t, true);
                prop_assert!(v + 1e-12 >= last);
                last = v;
            }
        }
    }
}
