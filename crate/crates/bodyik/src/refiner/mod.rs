//! Relation-aware transformer refinement over multi-person parameter
//! tokens.
//!
//! Up to N persons contribute K=24 tokens each; a token is the person's
//! image-feature slice for that joint concatenated with the joint's 6D
//! pose, the shape coefficients and the camera. Unoccupied person slots are
//! zero-filled and excluded from attention, so occupied outputs are
//! invariant to padding. Training randomly zeroes up to 30% of occupied
//! tokens; no positional embedding is used by default.

mod features;
mod net;

pub use features::{FeatureProvider, GapBroadcastProvider, Synthetic2dProvider};
pub use net::{
    forward, tape_forward, EncoderLayer, ForwardOutput, LayerNormParams, Linear, RefinerVars,
    RefinerWeights, TapeForward,
};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bodymodel::{MeshParams, NUM_JOINTS, NUM_SHAPE};
use crate::error::{Error, Result};
use crate::ik::Skeleton;
use crate::rotmath::Rot6d;

/// Widths of the per-token parameter slice: 6 (pose) + 10 (shape) + 3
/// (camera).
pub const PARAM_SLICE: usize = 19;

/// Architecture and input-layout configuration.
///
/// `d_token = feat_dim + 19`; with the full 2048-dim feature slice the
/// token width is 2067. Serialized field names follow the layout
/// convention (`N`, `K`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    /// Maximum persons per forward pass.
    #[serde(rename = "N")]
    pub max_persons: usize,
    /// Joints (tokens) per person.
    #[serde(rename = "K")]
    pub joints: usize,
    /// Image-feature slice width per token.
    pub feat_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Upper bound of the random input-patch masking ratio.
    pub mask_ratio_max: f64,
    pub use_positional_embedding: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            max_persons: 3,
            joints: NUM_JOINTS,
            feat_dim: 64,
            layers: 4,
            heads: 8,
            d_model: 128,
            d_ff: 512,
            mask_ratio_max: 0.3,
            use_positional_embedding: false,
        }
    }
}

impl RefinerConfig {
    /// Full-scale configuration: 2048-dim feature slices (token width
    /// 2067).
    pub fn paper() -> Self {
        RefinerConfig {
            feat_dim: 2048,
            ..RefinerConfig::default()
        }
    }

    /// Small configuration for gradient checks and fast training tests.
    pub fn desk_check() -> Self {
        RefinerConfig {
            d_model: 32,
            d_ff: 128,
            ..RefinerConfig::default()
        }
    }

    /// Token width: feature slice plus the 19 parameter values.
    pub fn d_token(&self) -> usize {
        self.feat_dim + PARAM_SLICE
    }

    /// Total sequence length.
    pub fn seq_len(&self) -> usize {
        self.max_persons * self.joints
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints != NUM_JOINTS {
            return Err(Error::InvalidInput(format!(
                "refiner joint count must be {NUM_JOINTS}, got {}",
                self.joints
            )));
        }
        if self.max_persons == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::InvalidInput("refiner sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio_max) {
            return Err(Error::InvalidInput(format!(
                "mask_ratio_max must lie in [0, 1], got {}",
                self.mask_ratio_max
            )));
        }
        Ok(())
    }
}

/// Token sequence plus occupancy and masking state.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerInput {
    /// (N·K)×d_token token matrix; unoccupied rows are all zero.
    pub tokens: Array2<f64>,
    /// Per-person-slot occupancy.
    pub pad_mask: Vec<bool>,
    /// Per-token masking flags set by [`mask_patches`].
    pub mask_flags: Vec<bool>,
}

impl RefinerInput {
    /// Per-token occupancy derived from the person slots.
    pub fn occupied_tokens(&self, joints: usize) -> Vec<bool> {
        let mut out = vec![false; self.pad_mask.len() * joints];
        for (slot, &occ) in self.pad_mask.iter().enumerate() {
            if occ {
                out[slot * joints..(slot + 1) * joints].fill(true);
            }
        }
        out
    }

    pub fn occupied_count(&self, joints: usize) -> usize {
        self.pad_mask.iter().filter(|&&o| o).count() * joints
    }
}

/// Build the token sequence for up to N persons. Token (i, k) is the
/// feature slice of joint k concatenated with that joint's 6D rotation and
/// the person's shape and camera; slots beyond the person count stay zero.
pub fn assemble_tokens(
    persons: &[(MeshParams, Array2<f64>)],
    config: &RefinerConfig,
) -> Result<RefinerInput> {
    config.validate()?;
    if persons.is_empty() || persons.len() > config.max_persons {
        return Err(Error::InvalidInput(format!(
            "assemble_tokens needs 1..={} persons, got {}",
            config.max_persons,
            persons.len()
        )));
    }
    let k = config.joints;
    let mut tokens = Array2::zeros((config.seq_len(), config.d_token()));
    let mut pad_mask = vec![false; config.max_persons];
    for (slot, (params, features)) in persons.iter().enumerate() {
        if features.dim() != (k, config.feat_dim) {
            return Err(Error::ShapeMismatch(format!(
                "person {slot} features must be {k}×{}, got {:?}",
                config.feat_dim,
                features.dim()
            )));
        }
        pad_mask[slot] = true;
        for joint in 0..k {
            let row = slot * k + joint;
            for c in 0..config.feat_dim {
                tokens[(row, c)] = features[(joint, c)];
            }
            let base = config.feat_dim;
            for c in 0..6 {
                tokens[(row, base + c)] = params.theta[joint][c];
            }
            for c in 0..NUM_SHAPE {
                tokens[(row, base + 6 + c)] = params.beta[c];
            }
            for c in 0..3 {
                tokens[(row, base + 6 + NUM_SHAPE + c)] = params.camera[c];
            }
        }
    }
    Ok(RefinerInput {
        tokens,
        pad_mask,
        mask_flags: vec![false; config.seq_len()],
    })
}

/// Randomly zero `⌊ratio · occupied⌋` occupied tokens (training-time input
/// masking). Padded tokens are never selected; selection is uniform
/// without replacement and deterministic per seed.
pub fn mask_patches(
    input: &RefinerInput,
    config: &RefinerConfig,
    seed: u64,
    ratio: f64,
) -> Result<RefinerInput> {
    if !(0.0..=config.mask_ratio_max).contains(&ratio) {
        return Err(Error::Precondition(format!(
            "mask ratio {ratio} outside [0, {}]",
            config.mask_ratio_max
        )));
    }
    let occupied: Vec<usize> = input
        .occupied_tokens(config.joints)
        .iter()
        .enumerate()
        .filter_map(|(i, &o)| o.then_some(i))
        .collect();
    let count = (ratio * occupied.len() as f64).floor() as usize;
    let mut out = input.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, occupied.len(), count);
    for pick in chosen.iter() {
        let row = occupied[pick];
        out.mask_flags[row] = true;
        for c in 0..config.d_token() {
            out.tokens[(row, c)] = 0.0;
        }
    }
    Ok(out)
}

/// Residual parameter update emitted by the refiner for one person.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta {
    pub theta: [Rot6d; NUM_JOINTS],
    pub beta: [f64; NUM_SHAPE],
    pub camera: [f64; 3],
}

impl ParamDelta {
    pub fn zeros() -> Self {
        ParamDelta {
            theta: [[0.0; 6]; NUM_JOINTS],
            beta: [0.0; NUM_SHAPE],
            camera: [0.0; 3],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.theta.iter().flatten().all(|&x| x == 0.0)
            && self.beta.iter().all(|&x| x == 0.0)
            && self.camera.iter().all(|&x| x == 0.0)
    }
}

/// Residual refinement: elementwise addition on the 6D pose coefficients,
/// shape and camera.
pub fn refine(init: &MeshParams, delta: &ParamDelta) -> MeshParams {
    MeshParams {
        theta: std::array::from_fn(|k| std::array::from_fn(|c| init.theta[k][c] + delta.theta[k][c])),
        beta: std::array::from_fn(|j| init.beta[j] + delta.beta[j]),
        camera: std::array::from_fn(|c| init.camera[c] + delta.camera[c]),
    }
}

/// Training-time person grouping: all persons at once when M ≤ N,
/// otherwise `count` (default ⌈M/N⌉) uniformly sampled size-N subsets so
/// different combinations are seen across epochs.
pub fn sample_training_groups(
    persons: usize,
    max_persons: usize,
    count: Option<usize>,
    seed: u64,
) -> Vec<Vec<usize>> {
    assert!(persons >= 1, "at least one person required");
    if persons <= max_persons {
        return vec![(0..persons).collect()];
    }
    let groups = count.unwrap_or(persons.div_ceil(max_persons));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..groups)
        .map(|_| {
            let mut idx: Vec<usize> =
                rand::seq::index::sample(&mut rng, persons, max_persons).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Inference-time context choice: the target plus the N−1 persons whose
/// pelvises are closest to the target's, ties broken toward lower indices.
/// Target first in the returned group.
pub fn select_inference_contexts(
    target: usize,
    skeletons: &[Skeleton],
    max_persons: usize,
) -> Vec<usize> {
    let root = skeletons[target].root();
    let mut others: Vec<(f64, usize)> = skeletons
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(i, s)| ((s.root() - root).norm(), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut group = vec![target];
    group.extend(others.iter().take(max_persons - 1).map(|(_, i)| *i));
    group
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::Rng;

    fn person(feat_dim: usize, fill: f64) -> (MeshParams, Array2<f64>) {
        let mut params = MeshParams::neutral();
        params.camera = crate::ik::C_INIT;
        (params, Array2::from_elem((NUM_JOINTS, feat_dim), fill))
    }

    #[test]
    fn token_widths() {
        assert_eq!(RefinerConfig::paper().d_token(), 2067);
        assert_eq!(RefinerConfig::default().d_token(), 83);
        let cfg = RefinerConfig::paper();
        let input = assemble_tokens(
            &[person(2048, 0.1), person(2048, 0.2), person(2048, 0.3)],
            &cfg,
        )
        .unwrap();
        assert_eq!(input.tokens.dim(), (72, 2067));
    }

    #[test]
    fn padding_rows_zero() {
        let cfg = RefinerConfig::default();
        let input = assemble_tokens(&[person(64, 0.5)], &cfg).unwrap();
        assert_eq!(input.pad_mask, vec![true, false, false]);
        for row in NUM_JOINTS..cfg.seq_len() {
            assert!(input.tokens.row(row).iter().all(|&x| x == 0.0));
        }
        // Occupied rows carry the camera slice at the tail.
        assert_eq!(input.tokens[(0, cfg.d_token() - 3)], 0.9);
    }

    #[test]
    fn assemble_rejects_bad_inputs() {
        let cfg = RefinerConfig::default();
        let too_many: Vec<_> = (0..4).map(|_| person(64, 0.0)).collect();
        assert!(assemble_tokens(&too_many, &cfg).is_err());
        assert!(assemble_tokens(&[], &cfg).is_err());
        let wrong_dim = vec![person(32, 0.0)];
        assert!(assemble_tokens(&wrong_dim, &cfg).is_err());
    }

    #[test]
    fn masking_counts_and_determinism() {
        let cfg = RefinerConfig::default();
        let input = assemble_tokens(
            &[person(64, 0.4), person(64, 0.5), person(64, 0.6)],
            &cfg,
        )
        .unwrap();

        let unchanged = mask_patches(&input, &cfg, 7, 0.0).unwrap();
        assert_eq!(unchanged, input);

        let masked = mask_patches(&input, &cfg, 7, 0.3).unwrap();
        let flagged = masked.mask_flags.iter().filter(|&&f| f).count();
        assert_eq!(flagged, 21); // ⌊0.3·72⌋
        for (row, &flag) in masked.mask_flags.iter().enumerate() {
            if flag {
                assert!(masked.tokens.row(row).iter().all(|&x| x == 0.0));
            }
        }
        assert_eq!(masked, mask_patches(&input, &cfg, 7, 0.3).unwrap());
        assert_ne!(
            masked.mask_flags,
            mask_patches(&input, &cfg, 8, 0.3).unwrap().mask_flags
        );
    }

    #[test]
    fn masking_never_touches_padding() {
        let cfg = RefinerConfig::default();
        let input = assemble_tokens(&[person(64, 0.4)], &cfg).unwrap();
        let masked = mask_patches(&input, &cfg, 3, 0.3).unwrap();
        assert_eq!(masked.mask_flags.iter().filter(|&&f| f).count(), 7); // ⌊0.3·24⌋
        for row in NUM_JOINTS..cfg.seq_len() {
            assert!(!masked.mask_flags[row]);
        }
    }

    #[test]
    fn masking_rejects_out_of_range_ratio() {
        let cfg = RefinerConfig::default();
        let input = assemble_tokens(&[person(64, 0.1)], &cfg).unwrap();
        assert!(mask_patches(&input, &cfg, 0, 0.31).is_err());
        assert!(mask_patches(&input, &cfg, 0, -0.01).is_err());
    }

    #[test]
    fn refine_is_elementwise_addition() {
        let init = MeshParams {
            theta: [[0.1; 6]; NUM_JOINTS],
            beta: [0.2; NUM_SHAPE],
            camera: [0.9, 0.0, 0.0],
        };
        let zero = ParamDelta::zeros();
        let same = refine(&init, &zero);
        assert_eq!(same, init);

        let mut delta = ParamDelta::zeros();
        delta.camera = [0.1, 0.05, -0.05];
        let refined = refine(&init, &delta);
        assert_eq!(refined.camera, [1.0, 0.05, -0.05]);

        // Additivity: refine(refine(x, a), b) == refine(x, a+b).
        let mut a = ParamDelta::zeros();
        a.theta[3][2] = 0.4;
        a.beta[1] = -0.3;
        let mut b = ParamDelta::zeros();
        b.theta[3][2] = 0.25;
        b.camera[0] = 0.05;
        let mut ab = ParamDelta::zeros();
        ab.theta[3][2] = 0.4 + 0.25;
        ab.beta[1] = -0.3;
        ab.camera[0] = 0.05;
        let lhs = refine(&refine(&init, &a), &b);
        let rhs = refine(&init, &ab);
        for k in 0..NUM_JOINTS {
            for c in 0..6 {
                assert!((lhs.theta[k][c] - rhs.theta[k][c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn training_groups() {
        assert_eq!(sample_training_groups(2, 3, None, 0), vec![vec![0, 1]]);
        let groups = sample_training_groups(5, 3, None, 11);
        assert_eq!(groups.len(), 2);
        for g in &groups {
            assert_eq!(g.len(), 3);
            assert!(g.iter().all(|&i| i < 5));
            assert!(g.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(groups, sample_training_groups(5, 3, None, 11));
        assert_eq!(sample_training_groups(7, 3, Some(5), 2).len(), 5);
    }

    #[test]
    fn inference_contexts() {
        let base = crate::bodymodel::generate_synthetic_model(0, 120)
            .unwrap()
            .rest_joints();
        let at = |x: f64| {
            Skeleton::new(std::array::from_fn(|k| base[k] + Vector3::new(x, 0.0, 0.0)))
        };
        let skeletons = vec![at(0.0), at(1.0), at(5.0), at(2.0)];
        assert_eq!(select_inference_contexts(0, &skeletons, 3), vec![0, 1, 3]);
        assert_eq!(select_inference_contexts(2, &skeletons, 3), vec![2, 3, 1]);

        let single = vec![at(0.0)];
        assert_eq!(select_inference_contexts(0, &single, 3), vec![0]);

        // Equidistant contexts: lower index wins.
        let tied = vec![at(0.0), at(1.0), at(-1.0), at(2.0)];
        assert_eq!(select_inference_contexts(0, &tied, 2), vec![0, 1]);
    }

    #[test]
    fn config_serde_field_names() {
        let cfg = RefinerConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"N\":3"));
        assert!(json.contains("\"K\":24"));
        assert!(json.contains("\"mask_ratio_max\":0.3"));
        let back: RefinerConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RefinerConfig::default();
        cfg.heads = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = RefinerConfig::default();
        cfg.mask_ratio_max = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RefinerConfig::default();
        cfg.joints = 17;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empirical_mask_fraction_within_bounds() {
        let cfg = RefinerConfig::default();
        let input = assemble_tokens(
            &[person(64, 0.4), person(64, 0.5), person(64, 0.6)],
            &cfg,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        for draw in 0..200 {
            let ratio = rng.random_range(0.0..=cfg.mask_ratio_max);
            let masked = mask_patches(&input, &cfg, draw, ratio).unwrap();
            let frac = masked.mask_flags.iter().filter(|&&f| f).count() as f64 / 72.0;
            assert!((0.0..=0.3).contains(&frac));
        }
    }
}
