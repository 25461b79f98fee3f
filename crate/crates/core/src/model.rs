//! Network definition: a small recurrent cell driven by the coarse
//! input, an additive seasonal branch built from periodic features, a
//! gated self-attention refinement over the latent vector, and a linear
//! head that emits the `K` sub-period values for each coarse step.
//!
//! Everything here is the *plain* forward pass used for inference and
//! evaluation; training replays the same computation on the gradient
//! tape (see [`crate::tape`] and [`crate::train`]). The two routes are
//! held together by tests asserting they produce equal losses.

use crate::features::FeatureSpec;
use crate::ingest::{Aggregation, NormalizationStats};
use crate::linalg::{layer_norm_rows, sigmoid, softmax_rows, Mat};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Epsilon inside the layer-norm variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Current checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("cannot read checkpoint {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse checkpoint {path}: {source}")]
    CheckpointParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint parameters do not match its config: {0}")]
    ShapeMismatch(String),
}

/// Recurrent cell flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Elman,
    #[default]
    Gru,
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "elman" => Ok(CellKind::Elman),
            "gru" => Ok(CellKind::Gru),
            other => Err(format!("unknown cell {other:?} (expected elman|gru)")),
        }
    }
}

/// Architecture hyper-parameters. `latent_width` is the recurrent
/// state size, `token_dim` the per-token embedding width inside the
/// attention block, `sub_periods` the number of fine steps per coarse
/// step, and `feat_width` the number of periodic feature columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_width: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub sub_periods: usize,
    pub feat_width: usize,
    pub use_fourier: bool,
    pub use_attention: bool,
    pub cell: CellKind,
}

impl Default for ModelConfig {
    /// Daily-resolution architecture with both branches on; the feature
    /// width matches the default daily-plus-weekly feature blocks.
    fn default() -> Self {
        ModelConfig {
            latent_width: 32,
            token_dim: 16,
            heads: 4,
            ffn_width: 32,
            sub_periods: 24,
            feat_width: 22,
            use_fourier: true,
            use_attention: true,
            cell: CellKind::Gru,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.latent_width == 0 {
            return fail("latent_width must be positive".into());
        }
        if self.sub_periods == 0 {
            return fail("sub_periods must be positive".into());
        }
        if self.use_attention {
            if self.token_dim == 0 || self.ffn_width == 0 {
                return fail("token_dim and ffn_width must be positive".into());
            }
            if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
                return fail(format!(
                    "token_dim {} must be divisible by heads {}",
                    self.token_dim, self.heads
                ));
            }
        }
        if self.use_fourier && self.feat_width == 0 {
            return fail("use_fourier requires feat_width > 0".into());
        }
        Ok(())
    }
}

/// Recurrent cell parameters. Inputs are scalar, so every
/// `input_weight` is a column vector. The GRU variant is much larger
/// than the Elman one, but a model holds exactly one instance, so the
/// size gap is irrelevant and boxing would only complicate the
/// per-tensor traversal.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cell", rename_all = "lowercase")]
pub enum RnnParams {
    Elman {
        state_weight: Mat,
        input_weight: Mat,
        bias: Mat,
    },
    Gru {
        update_state: Mat,
        update_input: Mat,
        update_bias: Mat,
        reset_state: Mat,
        reset_input: Mat,
        reset_bias: Mat,
        cand_state: Mat,
        cand_input: Mat,
        cand_bias: Mat,
    },
}

impl RnnParams {
    pub fn kind(&self) -> CellKind {
        match self {
            RnnParams::Elman { .. } => CellKind::Elman,
            RnnParams::Gru { .. } => CellKind::Gru,
        }
    }
}

/// Gated self-attention refinement over the latent vector. The latent
/// entries are treated as `L` tokens; token `l` is `z[l] * embed[l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub embed: Mat,
    pub query_proj: Mat,
    pub key_proj: Mat,
    pub value_proj: Mat,
    pub out_proj: Mat,
    pub norm1_scale: Mat,
    pub norm1_shift: Mat,
    pub ffn_w1: Mat,
    pub ffn_b1: Mat,
    pub ffn_w2: Mat,
    pub ffn_b2: Mat,
    pub norm2_scale: Mat,
    pub norm2_shift: Mat,
    pub readout: Mat,
    pub gate: Mat,
}

/// All learnable tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub rnn: RnnParams,
    /// Learned initial recurrent state (`L x 1`).
    pub init_state: Mat,
    /// Projection from periodic features to the latent space
    /// (`feat_width x L`).
    pub fourier_proj: Mat,
    /// Logits of the sub-period mixing weights (`1 x K`).
    pub agg_logits: Mat,
    pub attn: AttentionParams,
    /// Output head weight (`K x L`).
    pub head_weight: Mat,
    /// Output head bias (`K x 1`).
    pub head_bias: Mat,
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    m
}

impl ModelParams {
    /// Fresh parameters: weights uniform in `+-1/sqrt(fan_in)`, biases
    /// and the initial state zero, norm scales one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = cfg.latent_width;
        let d = cfg.token_dim;
        let k = cfg.sub_periods;
        // The cell sees the previous state and the scalar input
        // together, so both weight blocks share fan_in = L + 1.
        let rnn_fan = l + 1;
        let rnn = match cfg.cell {
            CellKind::Elman => RnnParams::Elman {
                state_weight: uniform_mat(&mut rng, l, l, rnn_fan),
                input_weight: uniform_mat(&mut rng, l, 1, rnn_fan),
                bias: Mat::zeros(l, 1),
            },
            CellKind::Gru => RnnParams::Gru {
                update_state: uniform_mat(&mut rng, l, l, rnn_fan),
                update_input: uniform_mat(&mut rng, l, 1, rnn_fan),
                update_bias: Mat::zeros(l, 1),
                reset_state: uniform_mat(&mut rng, l, l, rnn_fan),
                reset_input: uniform_mat(&mut rng, l, 1, rnn_fan),
                reset_bias: Mat::zeros(l, 1),
                cand_state: uniform_mat(&mut rng, l, l, rnn_fan),
                cand_input: uniform_mat(&mut rng, l, 1, rnn_fan),
                cand_bias: Mat::zeros(l, 1),
            },
        };
        let attn = AttentionParams {
            embed: uniform_mat(&mut rng, l, d, d),
            query_proj: uniform_mat(&mut rng, d, d, d),
            key_proj: uniform_mat(&mut rng, d, d, d),
            value_proj: uniform_mat(&mut rng, d, d, d),
            out_proj: uniform_mat(&mut rng, d, d, d),
            norm1_scale: Mat::filled(1, d, 1.0),
            norm1_shift: Mat::zeros(1, d),
            ffn_w1: uniform_mat(&mut rng, d, cfg.ffn_width, d),
            ffn_b1: Mat::zeros(1, cfg.ffn_width),
            ffn_w2: uniform_mat(&mut rng, cfg.ffn_width, d, cfg.ffn_width),
            ffn_b2: Mat::zeros(1, d),
            norm2_scale: Mat::filled(1, d, 1.0),
            norm2_shift: Mat::zeros(1, d),
            readout: uniform_mat(&mut rng, d, 1, d),
            gate: uniform_mat(&mut rng, l, l, l),
        };
        ModelParams {
            rnn,
            init_state: Mat::zeros(l, 1),
            fourier_proj: uniform_mat(&mut rng, cfg.feat_width.max(1), l, cfg.feat_width.max(1)),
            agg_logits: Mat::zeros(1, k),
            attn,
            head_weight: uniform_mat(&mut rng, k, l, l),
            head_bias: Mat::zeros(k, 1),
        }
    }

    /// Visits every tensor in a fixed order. The order defines the
    /// layout of [`flatten`](Self::flatten), the optimizer state, and
    /// the finite-difference probes in the tests.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(&'static str, &'a Mat)) {
        match &self.rnn {
            RnnParams::Elman { state_weight, input_weight, bias } => {
                f("rnn.state_weight", state_weight);
                f("rnn.input_weight", input_weight);
                f("rnn.bias", bias);
            }
            RnnParams::Gru {
                update_state,
                update_input,
                update_bias,
                reset_state,
                reset_input,
                reset_bias,
                cand_state,
                cand_input,
                cand_bias,
            } => {
                f("rnn.update_state", update_state);
                f("rnn.update_input", update_input);
                f("rnn.update_bias", update_bias);
                f("rnn.reset_state", reset_state);
                f("rnn.reset_input", reset_input);
                f("rnn.reset_bias", reset_bias);
                f("rnn.cand_state", cand_state);
                f("rnn.cand_input", cand_input);
                f("rnn.cand_bias", cand_bias);
            }
        }
        f("init_state", &self.init_state);
        f("fourier_proj", &self.fourier_proj);
        f("agg_logits", &self.agg_logits);
        f("attn.embed", &self.attn.embed);
        f("attn.query_proj", &self.attn.query_proj);
        f("attn.key_proj", &self.attn.key_proj);
        f("attn.value_proj", &self.attn.value_proj);
        f("attn.out_proj", &self.attn.out_proj);
        f("attn.norm1_scale", &self.attn.norm1_scale);
        f("attn.norm1_shift", &self.attn.norm1_shift);
        f("attn.ffn_w1", &self.attn.ffn_w1);
        f("attn.ffn_b1", &self.attn.ffn_b1);
        f("attn.ffn_w2", &self.attn.ffn_w2);
        f("attn.ffn_b2", &self.attn.ffn_b2);
        f("attn.norm2_scale", &self.attn.norm2_scale);
        f("attn.norm2_shift", &self.attn.norm2_shift);
        f("attn.readout", &self.attn.readout);
        f("attn.gate", &self.attn.gate);
        f("head_weight", &self.head_weight);
        f("head_bias", &self.head_bias);
    }

    /// Mutable twin of [`for_each_tensor`](Self::for_each_tensor),
    /// visiting tensors in the same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&'static str, &mut Mat)) {
        match &mut self.rnn {
            RnnParams::Elman { state_weight, input_weight, bias } => {
                f("rnn.state_weight", state_weight);
                f("rnn.input_weight", input_weight);
                f("rnn.bias", bias);
            }
            RnnParams::Gru {
                update_state,
                update_input,
                update_bias,
                reset_state,
                reset_input,
                reset_bias,
                cand_state,
                cand_input,
                cand_bias,
            } => {
                f("rnn.update_state", update_state);
                f("rnn.update_input", update_input);
                f("rnn.update_bias", update_bias);
                f("rnn.reset_state", reset_state);
                f("rnn.reset_input", reset_input);
                f("rnn.reset_bias", reset_bias);
                f("rnn.cand_state", cand_state);
                f("rnn.cand_input", cand_input);
                f("rnn.cand_bias", cand_bias);
            }
        }
        f("init_state", &mut self.init_state);
        f("fourier_proj", &mut self.fourier_proj);
        f("agg_logits", &mut self.agg_logits);
        f("attn.embed", &mut self.attn.embed);
        f("attn.query_proj", &mut self.attn.query_proj);
        f("attn.key_proj", &mut self.attn.key_proj);
        f("attn.value_proj", &mut self.attn.value_proj);
        f("attn.out_proj", &mut self.attn.out_proj);
        f("attn.norm1_scale", &mut self.attn.norm1_scale);
        f("attn.norm1_shift", &mut self.attn.norm1_shift);
        f("attn.ffn_w1", &mut self.attn.ffn_w1);
        f("attn.ffn_b1", &mut self.attn.ffn_b1);
        f("attn.ffn_w2", &mut self.attn.ffn_w2);
        f("attn.ffn_b2", &mut self.attn.ffn_b2);
        f("attn.norm2_scale", &mut self.attn.norm2_scale);
        f("attn.norm2_shift", &mut self.attn.norm2_shift);
        f("attn.readout", &mut self.attn.readout);
        f("attn.gate", &mut self.attn.gate);
        f("head_weight", &mut self.head_weight);
        f("head_bias", &mut self.head_bias);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, m| n += m.len());
        n
    }

    /// All parameters as one vector in tensor-visit order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each_tensor(|_, m| out.extend_from_slice(m.data()));
        out
    }

    /// Writes a flat vector (as produced by [`flatten`](Self::flatten))
    /// back into the tensors.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_tensor_mut(|_, m| {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter vector has wrong length");
    }

    /// Checks that every tensor has the shape `cfg` implies (used when
    /// loading weights from disk).
    pub fn validate_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.rnn.kind() != cfg.cell {
            return Err(ModelError::ShapeMismatch(format!(
                "cell kind {:?} does not match config {:?}",
                self.rnn.kind(),
                cfg.cell
            )));
        }
        let expected = ModelParams::init(cfg, 0);
        let mut shapes = Vec::new();
        expected.for_each_tensor(|name, m| shapes.push((name, m.shape())));
        let mut mismatch = None;
        let mut idx = 0;
        self.for_each_tensor(|name, m| {
            if mismatch.is_none() {
                let (exp_name, exp_shape) = shapes[idx];
                if name != exp_name || m.shape() != exp_shape {
                    mismatch = Some(format!(
                        "{name} has shape {:?}, expected {exp_name} {:?}",
                        m.shape(),
                        exp_shape
                    ));
                }
            }
            idx += 1;
        });
        match mismatch {
            Some(msg) => Err(ModelError::ShapeMismatch(msg)),
            None => Ok(()),
        }
    }
}

/// One recurrent transition driven by the scalar coarse input.
pub fn rnn_step(rnn: &RnnParams, h_prev: &Mat, x0: f64) -> Mat {
    match rnn {
        RnnParams::Elman { state_weight, input_weight, bias } => {
            let pre = state_weight.matmul(h_prev).add(&input_weight.scale(x0)).add(bias);
            pre.map(f64::tanh)
        }
        RnnParams::Gru {
            update_state,
            update_input,
            update_bias,
            reset_state,
            reset_input,
            reset_bias,
            cand_state,
            cand_input,
            cand_bias,
        } => {
            let u = update_state
                .matmul(h_prev)
                .add(&update_input.scale(x0))
                .add(update_bias)
                .map(sigmoid);
            let r = reset_state
                .matmul(h_prev)
                .add(&reset_input.scale(x0))
                .add(reset_bias)
                .map(sigmoid);
            let cand = cand_state
                .matmul(&r.hadamard(h_prev))
                .add(&cand_input.scale(x0))
                .add(cand_bias)
                .map(f64::tanh);
            // h = (1 - u) .* h_prev + u .* cand: a zero update gate
            // keeps the previous state untouched.
            h_prev.add(&u.hadamard(&cand.sub(h_prev)))
        }
    }
}

/// Collapses a `K x feat_width` periodic feature matrix into one latent
/// vector: project every sub-period row into the latent space, then mix
/// the rows with learned softmax weights.
pub fn fourier_project(proj: &Mat, agg_logits: &Mat, feats: &Mat) -> Mat {
    let projected = feats.matmul(proj); // K x L
    let weights = softmax_rows(agg_logits); // 1 x K
    weights.matmul(&projected).transpose() // L x 1
}

fn multi_head_attention(attn: &AttentionParams, heads: usize, tokens: &Mat) -> Mat {
    let d = tokens.cols();
    let dh = d / heads;
    let q = tokens.matmul(&attn.query_proj);
    let k = tokens.matmul(&attn.key_proj);
    let v = tokens.matmul(&attn.value_proj);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let scores = qh.matmul(&kh.transpose()).scale(scale);
        head_outs.push(softmax_rows(&scores).matmul(&vh));
    }
    let refs: Vec<&Mat> = head_outs.iter().collect();
    Mat::concat_cols(&refs).matmul(&attn.out_proj)
}

/// Gated residual self-attention over the latent entries. Returns the
/// refined latent vector (`L x 1`).
pub fn attention_block(attn: &AttentionParams, heads: usize, z: &Mat) -> Mat {
    assert_eq!(z.cols(), 1, "latent vector must be a column");
    // Token l is the embedding row scaled by its latent coordinate.
    let mut tokens = attn.embed.clone();
    for i in 0..tokens.rows() {
        let zi = z[(i, 0)];
        for j in 0..tokens.cols() {
            tokens[(i, j)] *= zi;
        }
    }
    let mixed = multi_head_attention(attn, heads, &tokens);
    let normed = layer_norm_rows(
        &tokens.add(&mixed),
        &attn.norm1_scale,
        &attn.norm1_shift,
        LAYER_NORM_EPS,
    );
    let hidden = normed.matmul(&attn.ffn_w1).add_row(&attn.ffn_b1).map(|v| v.max(0.0));
    let ffn = hidden.matmul(&attn.ffn_w2).add_row(&attn.ffn_b2);
    let refined = layer_norm_rows(
        &normed.add(&ffn),
        &attn.norm2_scale,
        &attn.norm2_shift,
        LAYER_NORM_EPS,
    );
    let delta = refined.matmul(&attn.readout); // L x 1
    let gate = attn.gate.matmul(z).map(sigmoid); // L x 1
    z.add(&gate.hadamard(&delta))
}

/// Linear head: `y = head_weight * z + head_bias` (`K x 1`).
pub fn output_head(params: &ModelParams, z_tilde: &Mat) -> Mat {
    params.head_weight.matmul(z_tilde).add(&params.head_bias)
}

/// Per-step intermediate values of a forward pass.
#[derive(Clone, Debug)]
pub struct LatentTrace {
    /// Recurrent states, one `L x 1` column per coarse step.
    pub h: Vec<Mat>,
    /// Seasonal-branch contributions (zero when the branch is off).
    pub fourier: Vec<Mat>,
    /// Fused latents `h + fourier`.
    pub z: Vec<Mat>,
    /// Latents after the attention refinement (equal to `z` when the
    /// attention block is off).
    pub z_tilde: Vec<Mat>,
    /// Predictions, one `K x 1` column per coarse step.
    pub y_hat: Vec<Mat>,
}

impl LatentTrace {
    pub fn len(&self) -> usize {
        self.y_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_hat.is_empty()
    }

    /// Final recurrent state, or `None` for an empty trace.
    pub fn last_state(&self) -> Option<&Mat> {
        self.h.last()
    }
}

/// Runs the model over a sequence of coarse inputs starting from the
/// learned initial state. `feats[t]` must hold the `K x feat_width`
/// periodic features of step `t`; it is ignored (and may be empty) when
/// the seasonal branch is off.
pub fn forward_sequence(
    params: &ModelParams,
    cfg: &ModelConfig,
    x0: &[f64],
    feats: &[Mat],
) -> LatentTrace {
    forward_sequence_with_state(params, cfg, x0, feats, &params.init_state)
}

/// [`forward_sequence`] from an explicit initial state (used when a
/// longer series is processed in chunks).
pub fn forward_sequence_with_state(
    params: &ModelParams,
    cfg: &ModelConfig,
    x0: &[f64],
    feats: &[Mat],
    h_init: &Mat,
) -> LatentTrace {
    if cfg.use_fourier {
        assert_eq!(feats.len(), x0.len(), "one feature matrix per step is required");
    }
    let mut trace = LatentTrace {
        h: Vec::with_capacity(x0.len()),
        fourier: Vec::with_capacity(x0.len()),
        z: Vec::with_capacity(x0.len()),
        z_tilde: Vec::with_capacity(x0.len()),
        y_hat: Vec::with_capacity(x0.len()),
    };
    let mut h_prev = h_init.clone();
    for (t, &x) in x0.iter().enumerate() {
        let h = rnn_step(&params.rnn, &h_prev, x);
        let f = if cfg.use_fourier {
            fourier_project(&params.fourier_proj, &params.agg_logits, &feats[t])
        } else {
            Mat::zeros(cfg.latent_width, 1)
        };
        let z = h.add(&f);
        let z_tilde = if cfg.use_attention {
            attention_block(&params.attn, cfg.heads, &z)
        } else {
            z.clone()
        };
        trace.y_hat.push(output_head(params, &z_tilde));
        h_prev = h.clone();
        trace.h.push(h);
        trace.fourier.push(f);
        trace.z.push(z);
        trace.z_tilde.push(z_tilde);
    }
    trace
}

/// Everything needed to reload and run a trained model: architecture,
/// feature recipe, normalization statistics, and weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub features: FeatureSpec,
    pub stats: NormalizationStats,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| ModelError::CheckpointParse {
            path: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(path, json).map_err(|e| ModelError::CheckpointIo {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::CheckpointIo {
            path: path.display().to_string(),
            source: e,
        })?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| ModelError::CheckpointParse {
                path: path.display().to_string(),
                source: e,
            })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::CheckpointVersion {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        ckpt.model.validate()?;
        ckpt.params.validate_shapes(&ckpt.model)?;
        Ok(ckpt)
    }
}
