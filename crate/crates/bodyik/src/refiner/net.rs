//! The refiner network: a standard transformer encoder over the token
//! sequence with key/query padding masks, plus per-person output heads
//! emitting residual parameter updates.
//!
//! The forward pass is written once, on the autodiff tape; inference runs
//! the same graph and discards it. Output heads start at zero so an
//! untrained refiner is exactly the identity refinement.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::{ParamDelta, RefinerConfig, RefinerInput};
use crate::autodiff::{Tape, Var};
use crate::bodymodel::NUM_SHAPE;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Dense layer parameters: `weight` is in×out, `bias` 1×out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    fn xavier(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> Self {
        let dist = Normal::new(0.0, (2.0 / (fan_in + fan_out) as f64).sqrt()).unwrap();
        Linear {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array2::zeros((1, fan_out)),
        }
    }
}

/// Learned per-feature gain and bias of one layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array2<f64>,
    pub bias: Array2<f64>,
}

impl LayerNormParams {
    fn unit(d: usize) -> Self {
        LayerNormParams {
            gain: Array2::ones((1, d)),
            bias: Array2::zeros((1, d)),
        }
    }
}

/// One encoder block: multi-head self-attention and feed-forward, each
/// followed by residual + layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_attn: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln_ff: LayerNormParams,
}

/// All refiner parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerWeights {
    pub config: RefinerConfig,
    pub input_proj: Linear,
    /// Learned positional embedding, allocated only when enabled.
    pub pos_embedding: Option<Array2<f64>>,
    pub layers: Vec<EncoderLayer>,
    /// Per-token head for the 6D pose deltas.
    pub theta_head: Linear,
    /// Person-pooled head for the shape (10) and camera (3) deltas.
    pub shape_cam_head: Linear,
}

impl RefinerWeights {
    /// Seeded initialization. Encoder weights are Xavier normal; both
    /// output heads start at zero so the initial refinement is the
    /// identity.
    pub fn init(config: &RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = config.d_model;
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                wq: Linear::xavier(&mut rng, d, d),
                wk: Linear::xavier(&mut rng, d, d),
                wv: Linear::xavier(&mut rng, d, d),
                wo: Linear::xavier(&mut rng, d, d),
                ln_attn: LayerNormParams::unit(d),
                ff1: Linear::xavier(&mut rng, d, config.d_ff),
                ff2: Linear::xavier(&mut rng, config.d_ff, d),
                ln_ff: LayerNormParams::unit(d),
            })
            .collect();
        let pos_embedding = config.use_positional_embedding.then(|| {
            let dist = Normal::new(0.0, 0.02).unwrap();
            Array2::from_shape_fn((config.seq_len(), d), |_| dist.sample(&mut rng))
        });
        Ok(RefinerWeights {
            config: config.clone(),
            input_proj: Linear::xavier(&mut rng, config.d_token(), d),
            pos_embedding,
            layers,
            theta_head: Linear::zeros(d, 6),
            shape_cam_head: Linear::zeros(d, NUM_SHAPE + 3),
        })
    }

    /// Replace the zero output heads with small random values. Structural
    /// diagnostics (permutation/padding probes) need non-trivial outputs
    /// without training.
    pub fn randomize_heads(&mut self, seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.05).unwrap();
        self.theta_head.weight.mapv_inplace(|_| dist.sample(&mut rng));
        self.theta_head.bias.mapv_inplace(|_| dist.sample(&mut rng));
        self.shape_cam_head
            .weight
            .mapv_inplace(|_| dist.sample(&mut rng));
        self.shape_cam_head
            .bias
            .mapv_inplace(|_| dist.sample(&mut rng));
    }

    /// Named tensors in a stable order (checkpoint and optimizer layout).
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("input_proj.weight".into(), &self.input_proj.weight),
            ("input_proj.bias".into(), &self.input_proj.bias),
        ];
        if let Some(pos) = &self.pos_embedding {
            out.push(("pos_embedding".into(), pos));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let pairs: [(&str, &Array2<f64>); 12] = [
                ("attn.wq.weight", &layer.wq.weight),
                ("attn.wq.bias", &layer.wq.bias),
                ("attn.wk.weight", &layer.wk.weight),
                ("attn.wk.bias", &layer.wk.bias),
                ("attn.wv.weight", &layer.wv.weight),
                ("attn.wv.bias", &layer.wv.bias),
                ("attn.wo.weight", &layer.wo.weight),
                ("attn.wo.bias", &layer.wo.bias),
                ("ff1.weight", &layer.ff1.weight),
                ("ff1.bias", &layer.ff1.bias),
                ("ff2.weight", &layer.ff2.weight),
                ("ff2.bias", &layer.ff2.bias),
            ];
            for (name, tensor) in pairs {
                out.push((format!("layers.{i}.{name}"), tensor));
            }
            out.push((format!("layers.{i}.ln_attn.gain"), &layer.ln_attn.gain));
            out.push((format!("layers.{i}.ln_attn.bias"), &layer.ln_attn.bias));
            out.push((format!("layers.{i}.ln_ff.gain"), &layer.ln_ff.gain));
            out.push((format!("layers.{i}.ln_ff.bias"), &layer.ln_ff.bias));
        }
        out.push(("theta_head.weight".into(), &self.theta_head.weight));
        out.push(("theta_head.bias".into(), &self.theta_head.bias));
        out.push(("shape_cam_head.weight".into(), &self.shape_cam_head.weight));
        out.push(("shape_cam_head.bias".into(), &self.shape_cam_head.bias));
        out
    }

    /// Mutable view over the same tensors in the same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("input_proj.weight".into(), &mut self.input_proj.weight),
            ("input_proj.bias".into(), &mut self.input_proj.bias),
        ];
        if let Some(pos) = &mut self.pos_embedding {
            out.push(("pos_embedding".into(), pos));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn.wq.weight"), &mut layer.wq.weight));
            out.push((format!("layers.{i}.attn.wq.bias"), &mut layer.wq.bias));
            out.push((format!("layers.{i}.attn.wk.weight"), &mut layer.wk.weight));
            out.push((format!("layers.{i}.attn.wk.bias"), &mut layer.wk.bias));
            out.push((format!("layers.{i}.attn.wv.weight"), &mut layer.wv.weight));
            out.push((format!("layers.{i}.attn.wv.bias"), &mut layer.wv.bias));
            out.push((format!("layers.{i}.attn.wo.weight"), &mut layer.wo.weight));
            out.push((format!("layers.{i}.attn.wo.bias"), &mut layer.wo.bias));
            out.push((format!("layers.{i}.ff1.weight"), &mut layer.ff1.weight));
            out.push((format!("layers.{i}.ff1.bias"), &mut layer.ff1.bias));
            out.push((format!("layers.{i}.ff2.weight"), &mut layer.ff2.weight));
            out.push((format!("layers.{i}.ff2.bias"), &mut layer.ff2.bias));
            out.push((format!("layers.{i}.ln_attn.gain"), &mut layer.ln_attn.gain));
            out.push((format!("layers.{i}.ln_attn.bias"), &mut layer.ln_attn.bias));
            out.push((format!("layers.{i}.ln_ff.gain"), &mut layer.ln_ff.gain));
            out.push((format!("layers.{i}.ln_ff.bias"), &mut layer.ln_ff.bias));
        }
        out.push(("theta_head.weight".into(), &mut self.theta_head.weight));
        out.push(("theta_head.bias".into(), &mut self.theta_head.bias));
        out.push((
            "shape_cam_head.weight".into(),
            &mut self.shape_cam_head.weight,
        ));
        out.push(("shape_cam_head.bias".into(), &mut self.shape_cam_head.bias));
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        if self.input_proj.weight.dim() != (self.config.d_token(), d) {
            return Err(Error::ShapeMismatch("input projection".into()));
        }
        if self.layers.len() != self.config.layers {
            return Err(Error::ShapeMismatch("layer count".into()));
        }
        if let Some(pos) = &self.pos_embedding {
            if pos.dim() != (self.config.seq_len(), d) {
                return Err(Error::ShapeMismatch("positional embedding".into()));
            }
        }
        for (name, tensor) in self.tensors() {
            if tensor.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericFailure(format!("non-finite weight {name}")));
            }
        }
        Ok(())
    }

    /// Register every tensor as a differentiable tape leaf.
    pub fn vars(&self, tape: &mut Tape) -> RefinerVars {
        RefinerVars {
            input_proj: (
                tape.leaf(self.input_proj.weight.clone()),
                tape.leaf(self.input_proj.bias.clone()),
            ),
            pos_embedding: self.pos_embedding.as_ref().map(|p| tape.leaf(p.clone())),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    wq: (tape.leaf(l.wq.weight.clone()), tape.leaf(l.wq.bias.clone())),
                    wk: (tape.leaf(l.wk.weight.clone()), tape.leaf(l.wk.bias.clone())),
                    wv: (tape.leaf(l.wv.weight.clone()), tape.leaf(l.wv.bias.clone())),
                    wo: (tape.leaf(l.wo.weight.clone()), tape.leaf(l.wo.bias.clone())),
                    ln_attn: (
                        tape.leaf(l.ln_attn.gain.clone()),
                        tape.leaf(l.ln_attn.bias.clone()),
                    ),
                    ff1: (
                        tape.leaf(l.ff1.weight.clone()),
                        tape.leaf(l.ff1.bias.clone()),
                    ),
                    ff2: (
                        tape.leaf(l.ff2.weight.clone()),
                        tape.leaf(l.ff2.bias.clone()),
                    ),
                    ln_ff: (
                        tape.leaf(l.ln_ff.gain.clone()),
                        tape.leaf(l.ln_ff.bias.clone()),
                    ),
                })
                .collect(),
            theta_head: (
                tape.leaf(self.theta_head.weight.clone()),
                tape.leaf(self.theta_head.bias.clone()),
            ),
            shape_cam_head: (
                tape.leaf(self.shape_cam_head.weight.clone()),
                tape.leaf(self.shape_cam_head.bias.clone()),
            ),
        }
    }
}

/// Tape leaves of one layer's tensors.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub wq: (Var, Var),
    pub wk: (Var, Var),
    pub wv: (Var, Var),
    pub wo: (Var, Var),
    pub ln_attn: (Var, Var),
    pub ff1: (Var, Var),
    pub ff2: (Var, Var),
    pub ln_ff: (Var, Var),
}

/// Tape leaves of every refiner tensor, in [`RefinerWeights::tensors`]
/// order via [`RefinerVars::all`].
#[derive(Debug, Clone)]
pub struct RefinerVars {
    pub input_proj: (Var, Var),
    pub pos_embedding: Option<Var>,
    pub layers: Vec<LayerVars>,
    pub theta_head: (Var, Var),
    pub shape_cam_head: (Var, Var),
}

impl RefinerVars {
    /// Named leaves matching [`RefinerWeights::tensors`] order.
    pub fn all(&self) -> Vec<(String, Var)> {
        let mut out = vec![
            ("input_proj.weight".into(), self.input_proj.0),
            ("input_proj.bias".into(), self.input_proj.1),
        ];
        if let Some(pos) = self.pos_embedding {
            out.push(("pos_embedding".into(), pos));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn.wq.weight"), l.wq.0));
            out.push((format!("layers.{i}.attn.wq.bias"), l.wq.1));
            out.push((format!("layers.{i}.attn.wk.weight"), l.wk.0));
            out.push((format!("layers.{i}.attn.wk.bias"), l.wk.1));
            out.push((format!("layers.{i}.attn.wv.weight"), l.wv.0));
            out.push((format!("layers.{i}.attn.wv.bias"), l.wv.1));
            out.push((format!("layers.{i}.attn.wo.weight"), l.wo.0));
            out.push((format!("layers.{i}.attn.wo.bias"), l.wo.1));
            out.push((format!("layers.{i}.ff1.weight"), l.ff1.0));
            out.push((format!("layers.{i}.ff1.bias"), l.ff1.1));
            out.push((format!("layers.{i}.ff2.weight"), l.ff2.0));
            out.push((format!("layers.{i}.ff2.bias"), l.ff2.1));
            out.push((format!("layers.{i}.ln_attn.gain"), l.ln_attn.0));
            out.push((format!("layers.{i}.ln_attn.bias"), l.ln_attn.1));
            out.push((format!("layers.{i}.ln_ff.gain"), l.ln_ff.0));
            out.push((format!("layers.{i}.ln_ff.bias"), l.ln_ff.1));
        }
        out.push(("theta_head.weight".into(), self.theta_head.0));
        out.push(("theta_head.bias".into(), self.theta_head.1));
        out.push(("shape_cam_head.weight".into(), self.shape_cam_head.0));
        out.push(("shape_cam_head.bias".into(), self.shape_cam_head.1));
        out
    }
}

/// Per-person differentiable outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// For each person slot: `(theta_delta K×6, shape_cam_delta 1×13)`;
    /// `None` for unoccupied slots.
    pub person_outputs: Vec<Option<(Var, Var)>>,
    /// Attention maps per layer and head, in layer-major order.
    pub attention: Vec<Var>,
    /// The token-matrix leaf, for gradients w.r.t. the input.
    pub tokens: Var,
}

/// Encoder forward on the tape. Padded tokens are excluded from attention
/// as keys (masked softmax) and as queries (their attention output rows
/// are zeroed), so occupied outputs never depend on padding.
pub fn tape_forward(
    tape: &mut Tape,
    vars: &RefinerVars,
    config: &RefinerConfig,
    input: &RefinerInput,
) -> Result<TapeForward> {
    if input.tokens.dim() != (config.seq_len(), config.d_token()) {
        return Err(Error::ShapeMismatch(format!(
            "tokens must be {}×{}, got {:?}",
            config.seq_len(),
            config.d_token(),
            input.tokens.dim()
        )));
    }
    if input.pad_mask.len() != config.max_persons {
        return Err(Error::ShapeMismatch("pad mask length".into()));
    }
    let occupancy = input.occupied_tokens(config.joints);
    let d_head = config.d_model / config.heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let tokens = tape.leaf(input.tokens.clone());
    let projected = tape.matmul(tokens, vars.input_proj.0);
    let mut x = tape.add_broadcast_row(projected, vars.input_proj.1);
    if let Some(pos) = vars.pos_embedding {
        x = tape.add(x, pos);
    }

    let mut attention = Vec::new();
    for layer in &vars.layers {
        // Multi-head self-attention.
        let q = tape.matmul(x, layer.wq.0);
        let q = tape.add_broadcast_row(q, layer.wq.1);
        let k = tape.matmul(x, layer.wk.0);
        let k = tape.add_broadcast_row(k, layer.wk.1);
        let v = tape.matmul(x, layer.wv.0);
        let v = tape.add_broadcast_row(v, layer.wv.1);

        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let (c0, c1) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(q, c0, c1);
            let kh = tape.slice_cols(k, c0, c1);
            let vh = tape.slice_cols(v, c0, c1);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows_masked(scores, &occupancy);
            attention.push(probs);
            heads.push(tape.matmul(probs, vh));
        }
        let merged = tape.concat_cols(&heads);
        let out = tape.matmul(merged, layer.wo.0);
        let out = tape.add_broadcast_row(out, layer.wo.1);
        let out = tape.row_mask(out, &occupancy);
        let residual = tape.add(x, out);
        x = tape.layer_norm(residual, layer.ln_attn.0, layer.ln_attn.1, LN_EPS);

        // Feed-forward.
        let h1 = tape.matmul(x, layer.ff1.0);
        let h1 = tape.add_broadcast_row(h1, layer.ff1.1);
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, layer.ff2.0);
        let h2 = tape.add_broadcast_row(h2, layer.ff2.1);
        let h2 = tape.row_mask(h2, &occupancy);
        let residual = tape.add(x, h2);
        x = tape.layer_norm(residual, layer.ln_ff.0, layer.ln_ff.1, LN_EPS);
    }

    let person_outputs = (0..config.max_persons)
        .map(|slot| {
            input.pad_mask[slot].then(|| {
                let rows = tape.slice_rows(x, slot * config.joints, (slot + 1) * config.joints);
                let theta = tape.matmul(rows, vars.theta_head.0);
                let theta = tape.add_broadcast_row(theta, vars.theta_head.1);
                let pooled = tape.mean_rows(rows);
                let sc = tape.matmul(pooled, vars.shape_cam_head.0);
                let sc = tape.add_broadcast_row(sc, vars.shape_cam_head.1);
                (theta, sc)
            })
        })
        .collect();
    Ok(TapeForward {
        person_outputs,
        attention,
        tokens,
    })
}

/// Inference result: per-slot parameter deltas (zero for unoccupied slots)
/// and, optionally, the attention maps for inspection.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub deltas: Vec<ParamDelta>,
    pub attention: Vec<Array2<f64>>,
}

/// Pure inference forward: run the tape graph, extract values, drop the
/// graph. Non-finite activations are a numeric failure.
pub fn forward(
    weights: &RefinerWeights,
    input: &RefinerInput,
    export_attention: bool,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = weights.vars(&mut tape);
    let run = tape_forward(&mut tape, &vars, &weights.config, input)?;

    let mut deltas = Vec::with_capacity(weights.config.max_persons);
    for out in &run.person_outputs {
        match out {
            None => deltas.push(ParamDelta::zeros()),
            Some((theta, sc)) => {
                let tv = tape.value(*theta);
                let sv = tape.value(*sc);
                if tv.iter().any(|x| !x.is_finite()) || sv.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericFailure(
                        "non-finite refiner activation".into(),
                    ));
                }
                deltas.push(ParamDelta {
                    theta: std::array::from_fn(|k| std::array::from_fn(|c| tv[(k, c)])),
                    beta: std::array::from_fn(|j| sv[(0, j)]),
                    camera: std::array::from_fn(|c| sv[(0, NUM_SHAPE + c)]),
                });
            }
        }
    }
    let attention = if export_attention {
        run.attention
            .iter()
            .map(|&a| tape.value(a).clone())
            .collect()
    } else {
        Vec::new()
    };
    Ok(ForwardOutput { deltas, attention })
}
