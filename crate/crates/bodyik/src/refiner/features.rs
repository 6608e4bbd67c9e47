//! Image-feature providers.
//!
//! The refiner consumes K feature slices per person; how those slices are
//! produced is behind this trait. The harness hands every provider two 2D
//! skeletons: the joints as seen by the image-evidence channel and the
//! projection of the IK initialization. Encoding both keeps the
//! refinement a local correction of the reprojection residual. Both
//! built-ins push the five values `[u_ev, v_ev, u_init, v_init, 1]` per
//! joint through a fixed seeded random projection: one per joint, one
//! averaged over the person and broadcast to every token (the global-
//! average-pool analog).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::bodymodel::NUM_JOINTS;

const ENC_IN: usize = 5;

/// Source of per-joint feature slices for one person.
pub trait FeatureProvider {
    fn feat_dim(&self) -> usize;

    /// K×feat_dim features from the evidence 2D joints and the projected
    /// 2D joints of the current parameter initialization.
    fn person_features(
        &self,
        evidence2d: &[[f64; 2]; NUM_JOINTS],
        init2d: &[[f64; 2]; NUM_JOINTS],
    ) -> Array2<f64>;
}

fn encoding_matrix(feat_dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0 / (ENC_IN as f64).sqrt()).unwrap();
    Array2::from_shape_fn((ENC_IN, feat_dim), |_| dist.sample(&mut rng))
}

fn encode_row(projection: &Array2<f64>, inputs: [f64; ENC_IN], out: &mut [f64]) {
    for (c, slot) in out.iter_mut().enumerate() {
        *slot = (0..ENC_IN).map(|i| inputs[i] * projection[(i, c)]).sum();
    }
}

/// Per-joint encoding of the paired 2D positions.
#[derive(Debug, Clone)]
pub struct Synthetic2dProvider {
    projection: Array2<f64>,
}

impl Synthetic2dProvider {
    pub fn new(feat_dim: usize, seed: u64) -> Self {
        Synthetic2dProvider {
            projection: encoding_matrix(feat_dim, seed),
        }
    }
}

impl FeatureProvider for Synthetic2dProvider {
    fn feat_dim(&self) -> usize {
        self.projection.ncols()
    }

    fn person_features(
        &self,
        evidence2d: &[[f64; 2]; NUM_JOINTS],
        init2d: &[[f64; 2]; NUM_JOINTS],
    ) -> Array2<f64> {
        let mut out = Array2::zeros((NUM_JOINTS, self.feat_dim()));
        for k in 0..NUM_JOINTS {
            let inputs = [
                evidence2d[k][0],
                evidence2d[k][1],
                init2d[k][0],
                init2d[k][1],
                1.0,
            ];
            encode_row(
                &self.projection,
                inputs,
                out.row_mut(k).into_slice().expect("contiguous row"),
            );
        }
        out
    }
}

/// Person-level encoding broadcast to all K tokens: the mean joint pair is
/// encoded once and every token receives the same slice.
#[derive(Debug, Clone)]
pub struct GapBroadcastProvider {
    projection: Array2<f64>,
}

impl GapBroadcastProvider {
    pub fn new(feat_dim: usize, seed: u64) -> Self {
        GapBroadcastProvider {
            projection: encoding_matrix(feat_dim, seed),
        }
    }
}

impl FeatureProvider for GapBroadcastProvider {
    fn feat_dim(&self) -> usize {
        self.projection.ncols()
    }

    fn person_features(
        &self,
        evidence2d: &[[f64; 2]; NUM_JOINTS],
        init2d: &[[f64; 2]; NUM_JOINTS],
    ) -> Array2<f64> {
        let n = NUM_JOINTS as f64;
        let inputs = [
            evidence2d.iter().map(|j| j[0]).sum::<f64>() / n,
            evidence2d.iter().map(|j| j[1]).sum::<f64>() / n,
            init2d.iter().map(|j| j[0]).sum::<f64>() / n,
            init2d.iter().map(|j| j[1]).sum::<f64>() / n,
            1.0,
        ];
        let mut row = vec![0.0; self.feat_dim()];
        encode_row(&self.projection, inputs, &mut row);
        let mut out = Array2::zeros((NUM_JOINTS, self.feat_dim()));
        for k in 0..NUM_JOINTS {
            for c in 0..self.feat_dim() {
                out[(k, c)] = row[c];
            }
        }
        out
    }
}
