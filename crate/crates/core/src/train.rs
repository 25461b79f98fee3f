//! Training: the composite loss, exact reverse-mode gradients through
//! the whole network, Adam with global-norm clipping, and the
//! truncated-backprop fit loop.
//!
//! The forward computation is replayed on a [`Tape`] with the same
//! numeric kernels as [`crate::model`], so the taped loss and the plain
//! loss agree to machine precision; a central finite-difference oracle
//! ([`fd_gradient`]) independently validates the analytic gradients.

use crate::features::FeatureSpec;
use crate::ingest::MultiResolutionDataset;
use crate::linalg::Mat;
use crate::model::{
    forward_sequence, LatentTrace, ModelConfig, ModelParams, RnnParams, LAYER_NORM_EPS,
};
use crate::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("training set is empty")]
    EmptyData,
}

/// Optimizer and loop hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Weight of the harmonic smoothness penalty on the feature
    /// projection.
    pub lambda_f: f64,
    pub epochs: usize,
    /// Chunk length for truncated backpropagation through time.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            lambda_f: 1e-4,
            epochs: 100,
            seq_len: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.lr <= 0.0 || self.lr.is_nan() {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.clip_norm <= 0.0 || self.clip_norm.is_nan() {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.lambda_f < 0.0 || self.lambda_f.is_nan() {
            return fail(format!("lambda_f must be non-negative, got {}", self.lambda_f));
        }
        if self.seq_len == 0 {
            return fail("seq_len must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        Ok(())
    }
}

/// Gradient of the loss, one tensor per parameter tensor (stored in a
/// parameter-shaped container so shapes match by construction).
#[derive(Clone, Debug)]
pub struct Gradients {
    tensors: ModelParams,
}

impl Gradients {
    fn from_flat(template: &ModelParams, flat: &[f64]) -> Gradients {
        let mut tensors = template.clone();
        tensors.assign_from_flat(flat);
        Gradients { tensors }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.flatten()
    }

    /// Gradient tensor for a named parameter (names as visited by
    /// [`ModelParams::for_each_tensor`]).
    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        let mut found = None;
        self.tensors.for_each_tensor(|n, m| {
            if n == name {
                found = Some(m);
            }
        });
        found
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.tensors.for_each_tensor(|_, m| sq += m.frob_norm_sq());
        sq.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.tensors.for_each_tensor(|_, m| ok &= m.all_finite());
        ok
    }

    fn scale_in_place(&mut self, factor: f64) {
        self.tensors.for_each_tensor_mut(|_, m| {
            for v in m.data_mut() {
                *v *= factor;
            }
        });
    }
}

/// Mean-over-periods squared error: `(1/T) sum_t ||y_hat_t - y_t||^2`.
/// The sum inside each period runs over all `K` sub-period values.
pub fn loss_data(trace: &LatentTrace, targets: &[Mat]) -> f64 {
    assert!(!trace.is_empty(), "loss needs at least one period");
    assert_eq!(trace.len(), targets.len(), "one target per period");
    let mut total = 0.0;
    for (y_hat, y) in trace.y_hat.iter().zip(targets) {
        total += y_hat.sub(y).frob_norm_sq();
    }
    let factor = 1.0 / trace.len() as f64;
    total * factor
}

/// Smoothness penalty on the feature projection: rows belonging to a
/// harmonic of order `k` are penalized with weight `k^2`, so fast
/// oscillations must earn their amplitude. `row_weights` carries the
/// harmonic order per row (see [`FeatureSpec::penalty_row_weights`]);
/// an empty weight vector (no periodic features) makes the penalty 0.
pub fn loss_harm(proj: &Mat, row_weights: &[f64], lambda: f64) -> f64 {
    if row_weights.is_empty() {
        return 0.0;
    }
    assert_eq!(row_weights.len(), proj.rows(), "one weight per projection row");
    let mut total = 0.0;
    for (i, w) in row_weights.iter().enumerate() {
        total += w * w * proj.row(i).iter().map(|v| v * v).sum::<f64>();
    }
    lambda * total
}

// ---------------------------------------------------------------------------
// Taped forward pass

enum TapedRnn {
    Elman {
        state_weight: NodeId,
        input_weight: NodeId,
        bias: NodeId,
    },
    Gru {
        update_state: NodeId,
        update_input: NodeId,
        update_bias: NodeId,
        reset_state: NodeId,
        reset_input: NodeId,
        reset_bias: NodeId,
        cand_state: NodeId,
        cand_input: NodeId,
        cand_bias: NodeId,
    },
}

struct TapedAttn {
    embed: NodeId,
    query_proj: NodeId,
    key_proj: NodeId,
    value_proj: NodeId,
    out_proj: NodeId,
    norm1_scale: NodeId,
    norm1_shift: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
    norm2_scale: NodeId,
    norm2_shift: NodeId,
    readout: NodeId,
    gate: NodeId,
}

struct TapedParams {
    rnn: TapedRnn,
    init_state: NodeId,
    fourier_proj: NodeId,
    agg_logits: NodeId,
    attn: TapedAttn,
    head_weight: NodeId,
    head_bias: NodeId,
    /// All parameter leaves in [`ModelParams::for_each_tensor`] order.
    ordered: Vec<NodeId>,
}

fn insert_params(tape: &mut Tape, params: &ModelParams) -> TapedParams {
    let mut ordered = Vec::new();
    let mut leaf = |tape: &mut Tape, m: &Mat| {
        let id = tape.leaf(m.clone());
        ordered.push(id);
        id
    };
    let rnn = match &params.rnn {
        RnnParams::Elman { state_weight, input_weight, bias } => TapedRnn::Elman {
            state_weight: leaf(tape, state_weight),
            input_weight: leaf(tape, input_weight),
            bias: leaf(tape, bias),
        },
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
        } => TapedRnn::Gru {
            update_state: leaf(tape, update_state),
            update_input: leaf(tape, update_input),
            update_bias: leaf(tape, update_bias),
            reset_state: leaf(tape, reset_state),
            reset_input: leaf(tape, reset_input),
            reset_bias: leaf(tape, reset_bias),
            cand_state: leaf(tape, cand_state),
            cand_input: leaf(tape, cand_input),
            cand_bias: leaf(tape, cand_bias),
        },
    };
    let init_state = leaf(tape, &params.init_state);
    let fourier_proj = leaf(tape, &params.fourier_proj);
    let agg_logits = leaf(tape, &params.agg_logits);
    let attn = TapedAttn {
        embed: leaf(tape, &params.attn.embed),
        query_proj: leaf(tape, &params.attn.query_proj),
        key_proj: leaf(tape, &params.attn.key_proj),
        value_proj: leaf(tape, &params.attn.value_proj),
        out_proj: leaf(tape, &params.attn.out_proj),
        norm1_scale: leaf(tape, &params.attn.norm1_scale),
        norm1_shift: leaf(tape, &params.attn.norm1_shift),
        ffn_w1: leaf(tape, &params.attn.ffn_w1),
        ffn_b1: leaf(tape, &params.attn.ffn_b1),
        ffn_w2: leaf(tape, &params.attn.ffn_w2),
        ffn_b2: leaf(tape, &params.attn.ffn_b2),
        norm2_scale: leaf(tape, &params.attn.norm2_scale),
        norm2_shift: leaf(tape, &params.attn.norm2_shift),
        readout: leaf(tape, &params.attn.readout),
        gate: leaf(tape, &params.attn.gate),
    };
    let head_weight = leaf(tape, &params.head_weight);
    let head_bias = leaf(tape, &params.head_bias);
    TapedParams { rnn, init_state, fourier_proj, agg_logits, attn, head_weight, head_bias, ordered }
}

fn taped_rnn_step(tape: &mut Tape, rnn: &TapedRnn, h_prev: NodeId, x0: f64) -> NodeId {
    match rnn {
        TapedRnn::Elman { state_weight, input_weight, bias } => {
            let wh = tape.matmul(*state_weight, h_prev);
            let wx = tape.scale(*input_weight, x0);
            let s = tape.add(wh, wx);
            let pre = tape.add(s, *bias);
            tape.tanh(pre)
        }
        TapedRnn::Gru {
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
            let gate_pre = |tape: &mut Tape, ws: NodeId, wi: NodeId, b: NodeId| {
                let wh = tape.matmul(ws, h_prev);
                let wx = tape.scale(wi, x0);
                let s = tape.add(wh, wx);
                tape.add(s, b)
            };
            let u_pre = gate_pre(tape, *update_state, *update_input, *update_bias);
            let u = tape.sigmoid(u_pre);
            let r_pre = gate_pre(tape, *reset_state, *reset_input, *reset_bias);
            let r = tape.sigmoid(r_pre);
            let rh = tape.hadamard(r, h_prev);
            let ch = tape.matmul(*cand_state, rh);
            let cx = tape.scale(*cand_input, x0);
            let cs = tape.add(ch, cx);
            let c_pre = tape.add(cs, *cand_bias);
            let cand = tape.tanh(c_pre);
            let diff = tape.sub(cand, h_prev);
            let ud = tape.hadamard(u, diff);
            tape.add(h_prev, ud)
        }
    }
}

fn taped_fourier(tape: &mut Tape, proj: NodeId, logits: NodeId, feats: NodeId) -> NodeId {
    let projected = tape.matmul(feats, proj);
    let weights = tape.softmax_rows(logits);
    let mixed = tape.matmul(weights, projected);
    tape.transpose(mixed)
}

fn taped_attention(tape: &mut Tape, attn: &TapedAttn, heads: usize, z: NodeId) -> NodeId {
    let d = tape.value(attn.embed).cols();
    let dh = d / heads;
    let tokens = tape.scale_rows(z, attn.embed);
    let q = tape.matmul(tokens, attn.query_proj);
    let k = tape.matmul(tokens, attn.key_proj);
    let v = tape.matmul(tokens, attn.value_proj);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(probs, vh));
    }
    let cat = tape.concat_cols(&head_outs);
    let mixed = tape.matmul(cat, attn.out_proj);
    let sum1 = tape.add(tokens, mixed);
    let normed = tape.layer_norm_rows(sum1, attn.norm1_scale, attn.norm1_shift, LAYER_NORM_EPS);
    let lin1 = tape.matmul(normed, attn.ffn_w1);
    let lin1b = tape.add_row(lin1, attn.ffn_b1);
    let hidden = tape.relu(lin1b);
    let lin2 = tape.matmul(hidden, attn.ffn_w2);
    let ffn = tape.add_row(lin2, attn.ffn_b2);
    let sum2 = tape.add(normed, ffn);
    let refined = tape.layer_norm_rows(sum2, attn.norm2_scale, attn.norm2_shift, LAYER_NORM_EPS);
    let delta = tape.matmul(refined, attn.readout);
    let gz = tape.matmul(attn.gate, z);
    let gate = tape.sigmoid(gz);
    let gd = tape.hadamard(gate, delta);
    tape.add(z, gd)
}

struct LossGraph {
    total: NodeId,
    data: NodeId,
    harm: NodeId,
    /// Final recurrent state of the chunk (for carrying across chunks).
    last_h: NodeId,
    params: TapedParams,
}

/// Records the whole forward pass plus the composite loss on a tape.
/// `h_init = None` starts from the learned initial state (which then
/// receives gradients); `Some(h)` continues from a detached carry.
#[allow(clippy::too_many_arguments)]
fn build_loss_graph(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    x0: &[f64],
    feats: &[Mat],
    targets: &[Mat],
    h_init: Option<&Mat>,
    penalty_weights: &[f64],
    lambda_f: f64,
) -> Result<LossGraph, TrainError> {
    assert!(!x0.is_empty(), "loss graph needs at least one period");
    assert_eq!(targets.len(), x0.len(), "one target per period");
    if cfg.use_fourier {
        assert_eq!(feats.len(), x0.len(), "one feature matrix per period");
    }
    let taped = insert_params(tape, params);
    let mut h_prev = match h_init {
        Some(h) => tape.leaf(h.clone()),
        None => taped.init_state,
    };
    let mut acc: Option<NodeId> = None;
    let mut last_h = h_prev;
    for (t, &x) in x0.iter().enumerate() {
        let h = taped_rnn_step(tape, &taped.rnn, h_prev, x);
        let z = if cfg.use_fourier {
            let feats_leaf = tape.leaf(feats[t].clone());
            let f = taped_fourier(tape, taped.fourier_proj, taped.agg_logits, feats_leaf);
            tape.add(h, f)
        } else {
            h
        };
        let z_tilde = if cfg.use_attention {
            taped_attention(tape, &taped.attn, cfg.heads, z)
        } else {
            z
        };
        let az = tape.matmul(taped.head_weight, z_tilde);
        let y_hat = tape.add(az, taped.head_bias);
        if !tape.value(y_hat).all_finite() {
            return Err(TrainError::NonFinite { step: t });
        }
        let target = tape.leaf(targets[t].clone());
        let r = tape.sub(y_hat, target);
        let sq = tape.sum_sq_scaled(r, 1.0);
        acc = Some(match acc {
            None => sq,
            Some(a) => tape.add(a, sq),
        });
        h_prev = h;
        last_h = h;
    }
    let data = tape.scale(acc.expect("non-empty sequence"), 1.0 / x0.len() as f64);
    let harm = if penalty_weights.is_empty() {
        tape.leaf(Mat::zeros(1, 1))
    } else {
        let sq: Vec<f64> = penalty_weights.iter().map(|w| w * w).collect();
        tape.weighted_row_sum_sq(taped.fourier_proj, &sq, lambda_f)
    };
    let total = tape.add(data, harm);
    if !tape.value(total).all_finite() {
        return Err(TrainError::NonFinite { step: x0.len() - 1 });
    }
    Ok(LossGraph { total, data, harm, last_h, params: taped })
}

/// Losses and gradients from one taped forward/backward pass.
#[derive(Debug)]
pub struct BackwardResult {
    pub loss: f64,
    pub loss_data: f64,
    pub loss_harm: f64,
    pub grads: Gradients,
}

/// Computes the composite loss over the full sequence (starting from
/// the learned initial state) and its exact gradient with respect to
/// every parameter tensor.
pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    x0: &[f64],
    feats: &[Mat],
    targets: &[Mat],
    penalty_weights: &[f64],
    train_cfg: &TrainConfig,
) -> Result<BackwardResult, TrainError> {
    let mut tape = Tape::new();
    let graph = build_loss_graph(
        &mut tape,
        params,
        cfg,
        x0,
        feats,
        targets,
        None,
        penalty_weights,
        train_cfg.lambda_f,
    )?;
    let grads = tape.backward(graph.total);
    let mut flat = Vec::with_capacity(params.n_params());
    for id in &graph.params.ordered {
        flat.extend_from_slice(grads.get(*id).data());
    }
    Ok(BackwardResult {
        loss: tape.value(graph.total)[(0, 0)],
        loss_data: tape.value(graph.data)[(0, 0)],
        loss_harm: tape.value(graph.harm)[(0, 0)],
        grads: Gradients::from_flat(params, &flat),
    })
}

/// Plain (untaped) composite loss; the reference for the
/// finite-difference oracle. Returns `(loss_data, loss_harm)`.
pub fn total_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    x0: &[f64],
    feats: &[Mat],
    targets: &[Mat],
    penalty_weights: &[f64],
    lambda_f: f64,
) -> (f64, f64) {
    let trace = forward_sequence(params, cfg, x0, feats);
    let ld = loss_data(&trace, targets);
    let lh = loss_harm(&params.fourier_proj, penalty_weights, lambda_f);
    (ld, lh)
}

/// Central finite differences of the composite loss over the flat
/// parameter vector. Independent of the tape: it only uses the plain
/// forward pass.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    x0: &[f64],
    feats: &[Mat],
    targets: &[Mat],
    penalty_weights: &[f64],
    lambda_f: f64,
    step: f64,
) -> Vec<f64> {
    let flat = params.flatten();
    let mut probe = params.clone();
    let mut grad = vec![0.0; flat.len()];
    let eval = |probe: &ModelParams| {
        let (ld, lh) = total_loss(probe, cfg, x0, feats, targets, penalty_weights, lambda_f);
        ld + lh
    };
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += step;
        probe.assign_from_flat(&plus);
        let f_plus = eval(&probe);
        let mut minus = flat.clone();
        minus[i] -= step;
        probe.assign_from_flat(&minus);
        let f_minus = eval(&probe);
        grad[i] = (f_plus - f_minus) / (2.0 * step);
    }
    grad
}

/// Scales all gradients by `clip_norm / norm` when the global L2 norm
/// exceeds `clip_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> f64 {
    assert!(clip_norm > 0.0, "clip_norm must be positive");
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale_in_place(clip_norm / norm);
    }
    norm
}

/// Adam first/second-moment accumulators over the flat parameter
/// vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> AdamState {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    let g = grads.flatten();
    let mut theta = params.flatten();
    assert_eq!(g.len(), theta.len(), "gradient/parameter size mismatch");
    assert_eq!(g.len(), state.m.len(), "optimizer state size mismatch");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..g.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    params.assign_from_flat(&theta);
}

/// One row of the loss history: the state before epoch 1 is recorded as
/// epoch 0, then one row after each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss_data: f64,
    pub loss_harm: f64,
    pub loss_total: f64,
}

/// Extracts the aligned training tensors from a dataset: normalized
/// coarse inputs, per-period feature matrices (empty when the seasonal
/// branch is off), and per-period target columns.
pub fn prepare_sequence(
    dataset: &MultiResolutionDataset,
    fspec: &FeatureSpec,
    use_fourier: bool,
) -> (Vec<f64>, Vec<Mat>, Vec<Mat>) {
    let x0 = dataset.x0_seq();
    let feats = if use_fourier {
        dataset.periods.iter().map(|p| fspec.matrix(p.index)).collect()
    } else {
        Vec::new()
    };
    let targets = dataset.periods.iter().map(|p| Mat::col_vec(&p.y)).collect();
    (x0, feats, targets)
}

/// Trains a freshly initialized model on the dataset with truncated
/// backpropagation: the sequence is split into chunks of `seq_len`
/// periods, the recurrent state is carried (detached) across chunks
/// within an epoch, and each chunk triggers one clipped Adam step. The
/// returned history holds the losses before training (epoch 0) and
/// after every epoch; `epochs = 0` returns the initial parameters with
/// an empty history.
pub fn fit(
    dataset: &MultiResolutionDataset,
    cfg: &ModelConfig,
    fspec: &FeatureSpec,
    train_cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<LossRecord>), TrainError> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if cfg.use_fourier {
        assert_eq!(
            cfg.feat_width,
            fspec.feat_width(),
            "model feat_width must match the feature spec"
        );
    }
    let (x0, feats, targets) = prepare_sequence(dataset, fspec, cfg.use_fourier);
    let penalty_weights = if cfg.feat_width != 0 && cfg.feat_width == fspec.feat_width() {
        fspec.penalty_row_weights()
    } else {
        Vec::new()
    };

    let mut params = ModelParams::init(cfg, train_cfg.seed);
    if train_cfg.epochs == 0 {
        return Ok((params, Vec::new()));
    }

    let record = |params: &ModelParams, epoch: usize| -> Result<LossRecord, TrainError> {
        let (ld, lh) =
            total_loss(params, cfg, &x0, &feats, &targets, &penalty_weights, train_cfg.lambda_f);
        let total = ld + lh;
        if !total.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        Ok(LossRecord { epoch, loss_data: ld, loss_harm: lh, loss_total: total })
    };

    let mut history = Vec::with_capacity(train_cfg.epochs + 1);
    history.push(record(&params, 0)?);
    let mut adam = AdamState::new(params.n_params());

    for epoch in 1..=train_cfg.epochs {
        let mut carry: Option<Mat> = None;
        let mut start = 0;
        while start < x0.len() {
            let end = (start + train_cfg.seq_len).min(x0.len());
            let chunk_feats = if cfg.use_fourier { &feats[start..end] } else { &feats[..] };
            let mut tape = Tape::new();
            let graph = build_loss_graph(
                &mut tape,
                &params,
                cfg,
                &x0[start..end],
                chunk_feats,
                &targets[start..end],
                carry.as_ref(),
                &penalty_weights,
                train_cfg.lambda_f,
            )
            .map_err(|_| TrainError::Diverged { epoch })?;
            carry = Some(tape.value(graph.last_h).clone());
            let node_grads = tape.backward(graph.total);
            let mut flat = Vec::with_capacity(params.n_params());
            for id in &graph.params.ordered {
                flat.extend_from_slice(node_grads.get(*id).data());
            }
            let mut grads = Gradients::from_flat(&params, &flat);
            if !grads.all_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            clip_gradients(&mut grads, train_cfg.clip_norm);
            adam_step(&mut params, &grads, &mut adam, train_cfg);
            start = end;
        }
        history.push(record(&params, epoch)?);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureSpec, HarmonicBlock};
    use crate::ingest::{MultiResolutionDataset, NormalizationStats, Period, SplitTag};
    use crate::model::CellKind;
    use chrono::NaiveDate;

    fn small_cfg(use_fourier: bool, use_attention: bool, cell: CellKind) -> ModelConfig {
        ModelConfig {
            latent_width: 4,
            token_dim: 4,
            heads: 2,
            ffn_width: 6,
            sub_periods: 3,
            feat_width: 4,
            use_fourier,
            use_attention,
            cell,
        }
    }

    fn small_fspec() -> FeatureSpec {
        FeatureSpec {
            blocks: vec![HarmonicBlock { period: 7.0, harmonics: 2 }],
            sub_periods: 3,
            phase0: 0.0,
        }
    }

    fn toy_instance(
        cfg: &ModelConfig,
        t_len: usize,
        seed: u64,
    ) -> (Vec<f64>, Vec<Mat>, Vec<Mat>) {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let fspec = small_fspec();
        let x0: Vec<f64> = (0..t_len).map(|_| rng.random_range(-1.5..1.5)).collect();
        let feats: Vec<Mat> =
            (0..t_len).map(|t| fspec.matrix(t as i64)).collect();
        let targets: Vec<Mat> = (0..t_len)
            .map(|_| {
                let mut m = Mat::zeros(cfg.sub_periods, 1);
                for v in m.data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                m
            })
            .collect();
        (x0, feats, targets)
    }

    #[test]
    fn loss_data_matches_hand_values() {
        // Perfect prediction -> 0; residual (3,4) -> 25; residuals
        // (1,0) and (0,2) across two periods -> 2.5.
        let make_trace = |preds: Vec<Mat>| LatentTrace {
            h: preds.iter().map(|_| Mat::zeros(1, 1)).collect(),
            fourier: preds.iter().map(|_| Mat::zeros(1, 1)).collect(),
            z: preds.iter().map(|_| Mat::zeros(1, 1)).collect(),
            z_tilde: preds.iter().map(|_| Mat::zeros(1, 1)).collect(),
            y_hat: preds,
        };
        let t = make_trace(vec![Mat::col_vec(&[1.0, 2.0])]);
        assert_eq!(loss_data(&t, &[Mat::col_vec(&[1.0, 2.0])]), 0.0);

        let t = make_trace(vec![Mat::col_vec(&[3.0, 4.0])]);
        assert!((loss_data(&t, &[Mat::col_vec(&[0.0, 0.0])]) - 25.0).abs() < 1e-12);

        let t = make_trace(vec![Mat::col_vec(&[1.0, 0.0]), Mat::col_vec(&[0.0, 2.0])]);
        let targets = [Mat::col_vec(&[0.0, 0.0]), Mat::col_vec(&[0.0, 0.0])];
        assert!((loss_data(&t, &targets) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn loss_harm_matches_hand_values() {
        let weights = [1.0, 1.0, 2.0, 2.0];
        assert_eq!(loss_harm(&Mat::zeros(4, 1), &weights, 1.0), 0.0);
        let ones = Mat::filled(4, 1, 1.0);
        assert!((loss_harm(&ones, &weights, 1.0) - 10.0).abs() < 1e-15);
        assert_eq!(loss_harm(&ones, &weights, 0.0), 0.0);
        assert_eq!(loss_harm(&ones, &[], 1.0), 0.0);
    }

    #[test]
    fn penalty_is_monotone_in_lambda() {
        let cfg = small_cfg(true, true, CellKind::Gru);
        let params = ModelParams::init(&cfg, 5);
        let (x0, feats, targets) = toy_instance(&cfg, 4, 17);
        let weights = small_fspec().penalty_row_weights();
        let mut prev = f64::NEG_INFINITY;
        for lambda in [0.0, 1e-4, 1e-2, 1.0, 10.0] {
            let (ld, lh) = total_loss(&params, &cfg, &x0, &feats, &targets, &weights, lambda);
            assert!(ld + lh >= prev);
            prev = ld + lh;
        }
    }

    #[test]
    fn taped_loss_equals_plain_loss() {
        for cell in [CellKind::Elman, CellKind::Gru] {
            for (uf, ua) in [(true, true), (true, false), (false, true), (false, false)] {
                let cfg = small_cfg(uf, ua, cell);
                let params = ModelParams::init(&cfg, 23);
                let (x0, feats, targets) = toy_instance(&cfg, 5, 41);
                let feats_in = if uf { feats.clone() } else { Vec::new() };
                let weights = small_fspec().penalty_row_weights();
                let tc = TrainConfig { lambda_f: 0.05, ..TrainConfig::default() };
                let res =
                    backward(&params, &cfg, &x0, &feats_in, &targets, &weights, &tc).unwrap();
                let (ld, lh) =
                    total_loss(&params, &cfg, &x0, &feats_in, &targets, &weights, tc.lambda_f);
                let scale = (ld + lh).abs().max(1.0);
                assert!(
                    (res.loss - (ld + lh)).abs() < 1e-12 * scale,
                    "cell {cell:?} flags ({uf},{ua}): {} vs {}",
                    res.loss,
                    ld + lh
                );
                assert!((res.loss_data - ld).abs() < 1e-12 * scale);
                assert!((res.loss_harm - lh).abs() < 1e-12 * scale);
            }
        }
    }

    fn check_gradients(cell: CellKind, use_fourier: bool, use_attention: bool) {
        let cfg = small_cfg(use_fourier, use_attention, cell);
        let params = ModelParams::init(&cfg, 77);
        let (x0, feats, targets) = toy_instance(&cfg, 4, 99);
        let feats_in = if use_fourier { feats } else { Vec::new() };
        let weights = small_fspec().penalty_row_weights();
        let tc = TrainConfig { lambda_f: 0.01, ..TrainConfig::default() };
        let res = backward(&params, &cfg, &x0, &feats_in, &targets, &weights, &tc).unwrap();
        let analytic = res.grads.flatten();
        let fd = fd_gradient(&params, &cfg, &x0, &feats_in, &targets, &weights, tc.lambda_f, 1e-6);
        assert_eq!(analytic.len(), fd.len());
        for (i, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
            // Relative agreement below 1e-4, with an absolute floor of
            // 1e-8 absorbing finite-difference roundoff on coordinates
            // whose gradient is itself tiny.
            let diff = (a - f).abs();
            let rel = diff / a.abs().max(f.abs()).max(1e-12);
            assert!(
                diff < 1e-8 || rel < 1e-4,
                "cell {cell:?} flags ({use_fourier},{use_attention}) coord {i}: \
                 analytic {a} vs fd {f} (rel {rel})"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_gru_full() {
        check_gradients(CellKind::Gru, true, true);
    }

    #[test]
    fn gradients_match_finite_differences_gru_no_fourier() {
        check_gradients(CellKind::Gru, false, true);
    }

    #[test]
    fn gradients_match_finite_differences_gru_no_attention() {
        check_gradients(CellKind::Gru, true, false);
    }

    #[test]
    fn gradients_match_finite_differences_gru_bare() {
        check_gradients(CellKind::Gru, false, false);
    }

    #[test]
    fn gradients_match_finite_differences_elman_full() {
        check_gradients(CellKind::Elman, true, true);
    }

    #[test]
    fn harmonic_gradient_is_closed_form() {
        // d loss_harm / d V[i,j] = 2 lambda w(i)^2 V[i,j].
        let cfg = small_cfg(true, false, CellKind::Elman);
        let params = ModelParams::init(&cfg, 3);
        let (x0, feats, targets) = toy_instance(&cfg, 2, 8);
        let weights = small_fspec().penalty_row_weights();
        let lambda = 0.5;
        let tc = TrainConfig { lambda_f: lambda, ..TrainConfig::default() };
        let with = backward(&params, &cfg, &x0, &feats, &targets, &weights, &tc).unwrap();
        let without = backward(
            &params,
            &cfg,
            &x0,
            &feats,
            &targets,
            &weights,
            &TrainConfig { lambda_f: 0.0, ..TrainConfig::default() },
        )
        .unwrap();
        let gw = with.grads.tensor("fourier_proj").unwrap();
        let go = without.grads.tensor("fourier_proj").unwrap();
        for i in 0..gw.rows() {
            for j in 0..gw.cols() {
                let expected = 2.0 * lambda * weights[i] * weights[i] * params.fourier_proj[(i, j)];
                let diff = gw[(i, j)] - go[(i, j)];
                assert!((diff - expected).abs() < 1e-10, "({i},{j}): {diff} vs {expected}");
            }
        }
    }

    #[test]
    fn backward_reports_non_finite_step() {
        let cfg = small_cfg(false, false, CellKind::Gru);
        let mut params = ModelParams::init(&cfg, 2);
        params.head_bias[(0, 0)] = f64::NAN;
        let (x0, _, targets) = toy_instance(&cfg, 3, 5);
        let err = backward(&params, &cfg, &x0, &[], &targets, &[], &TrainConfig::default())
            .unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0 }));
    }

    #[test]
    fn clip_scales_to_unit_norm() {
        let cfg = small_cfg(false, false, CellKind::Elman);
        let params = ModelParams::init(&cfg, 1);
        let mut flat = vec![0.0; params.n_params()];
        flat[0] = 3.0;
        flat[1] = 4.0;
        let mut grads = Gradients::from_flat(&params, &flat);
        let norm = clip_gradients(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped = grads.flatten();
        assert!((clipped[0] - 0.6).abs() < 1e-12);
        assert!((clipped[1] - 0.8).abs() < 1e-12);
        assert!(grads.global_norm() <= 1.0 + 1e-12);

        // Below the threshold nothing changes.
        let mut small = Gradients::from_flat(&params, &vec![1e-3; params.n_params()]);
        let before = small.flatten();
        clip_gradients(&mut small, 1.0);
        assert_eq!(small.flatten(), before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = small_cfg(false, false, CellKind::Elman);
        let mut params = ModelParams::init(&cfg, 1);
        let zero = vec![0.0; params.n_params()];
        params.assign_from_flat(&zero);
        let grads = Gradients::from_flat(&params, &vec![1.0; params.n_params()]);
        let tc = TrainConfig::default();
        let mut state = AdamState::new(params.n_params());
        adam_step(&mut params, &grads, &mut state, &tc);
        // m_hat = v_hat = 1 exactly after one step with g = 1, so the
        // update is -lr / (1 + eps).
        let expected = -tc.lr / (1.0 + tc.eps);
        for v in params.flatten() {
            assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = small_cfg(false, false, CellKind::Gru);
        let mut params = ModelParams::init(&cfg, 6);
        let before = params.flatten();
        let grads = Gradients::from_flat(&params, &vec![0.0; params.n_params()]);
        let mut state = AdamState::new(params.n_params());
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default());
        assert_eq!(params.flatten(), before);
    }

    #[test]
    fn clipping_is_inert_below_threshold() {
        let cfg = small_cfg(false, false, CellKind::Gru);
        let params = ModelParams::init(&cfg, 6);
        let flat: Vec<f64> = (0..params.n_params()).map(|i| 1e-4 * (i as f64 + 1.0)).collect();
        let grads = Gradients::from_flat(&params, &flat);
        let norm = grads.global_norm();

        let mut clipped = grads.clone();
        clip_gradients(&mut clipped, norm + 1.0);
        let tc = TrainConfig::default();
        let mut pa = params.clone();
        let mut pb = params.clone();
        let mut sa = AdamState::new(params.n_params());
        let mut sb = AdamState::new(params.n_params());
        adam_step(&mut pa, &grads, &mut sa, &tc);
        adam_step(&mut pb, &clipped, &mut sb, &tc);
        assert_eq!(pa.flatten(), pb.flatten());
    }

    fn toy_dataset(n: usize, k: usize, seed: u64) -> MultiResolutionDataset {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let periods = (0..n)
            .map(|t| {
                // Targets depend linearly on x0 plus a per-slot offset,
                // a problem the plain RNN can reduce loss on.
                let x0 = (t as f64 * 0.9).sin() + 0.1 * rng.random_range(-1.0..1.0);
                let y = (0..k).map(|s| 0.8 * x0 + 0.05 * s as f64).collect();
                Period { index: t as i64, x0, y, start }
            })
            .collect();
        MultiResolutionDataset {
            periods,
            sub_periods: k,
            stats: NormalizationStats { mean_x0: 0.0, std_x0: 1.0, mean_y: 0.0, std_y: 1.0 },
            split_tag: SplitTag::Train,
        }
    }

    #[test]
    fn fit_zero_epochs_returns_initial_params() {
        let cfg = small_cfg(true, true, CellKind::Gru);
        let ds = toy_dataset(10, cfg.sub_periods, 1);
        let tc = TrainConfig { epochs: 0, seed: 9, ..TrainConfig::default() };
        let (params, history) = fit(&ds, &cfg, &small_fspec(), &tc).unwrap();
        assert!(history.is_empty());
        assert_eq!(params, ModelParams::init(&cfg, 9));
    }

    #[test]
    fn fit_reduces_loss_on_linear_problem() {
        let cfg = small_cfg(false, false, CellKind::Gru);
        let ds = toy_dataset(40, cfg.sub_periods, 2);
        let tc = TrainConfig {
            epochs: 30,
            seq_len: 10,
            lr: 5e-3,
            lambda_f: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, history) = fit(&ds, &cfg, &small_fspec(), &tc).unwrap();
        assert_eq!(history.len(), tc.epochs + 1);
        assert_eq!(history[0].epoch, 0);
        assert_eq!(history.last().unwrap().epoch, tc.epochs);
        assert!(
            history.last().unwrap().loss_total < history[0].loss_total,
            "no descent: {} -> {}",
            history[0].loss_total,
            history.last().unwrap().loss_total
        );
    }

    #[test]
    fn fit_is_deterministic() {
        let cfg = small_cfg(true, true, CellKind::Gru);
        let ds = toy_dataset(20, cfg.sub_periods, 4);
        let tc = TrainConfig { epochs: 3, seq_len: 7, seed: 11, ..TrainConfig::default() };
        let (pa, ha) = fit(&ds, &cfg, &small_fspec(), &tc).unwrap();
        let (pb, hb) = fit(&ds, &cfg, &small_fspec(), &tc).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ha, hb);
    }

    #[test]
    fn fit_reports_divergence_with_epoch() {
        let cfg = small_cfg(false, true, CellKind::Gru);
        let ds = toy_dataset(12, cfg.sub_periods, 5);
        // An absurd learning rate overflows the quadratic loss within
        // the first epochs.
        let tc = TrainConfig { epochs: 5, seq_len: 4, lr: 1e200, seed: 1, ..TrainConfig::default() };
        match fit(&ds, &cfg, &small_fspec(), &tc) {
            Err(TrainError::Diverged { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
