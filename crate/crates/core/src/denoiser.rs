//! Graph-convolutional denoiser with per-block self-attention, plus the
//! frozen 2D-sequence context encoder that conditions it.
//!
//! The denoiser maps a noisy normalized pose (stacked `(J, 3)` row blocks)
//! to its estimate of the next cleaner pose. Conditioning enters twice:
//! spatio-temporal context features from the encoder are concatenated after
//! the start layer, and a sinusoidal step embedding is added to the full
//! working width so the network knows which diffusion step it is undoing.
//!
//! All layers are recorded on a [`Tape`], so the same builders serve
//! training (with gradients) and inference (forward only).

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::skeleton::{Dataset, Pose2D, Pose3D, SkeletonSpec};
use crate::tensor::{
    evaluate_with_gradients, BoundParams, ParamSet, Tape, Tensor, Value,
};
use crate::trainer::{adam_step, AdamConfig, AdamState};

/// Layer-norm variance guard used by every normalization in this module.
pub const LN_EPS: f64 = 1e-9;

// Distinct init streams so enabling an optional head never shifts the
// draws of another component.
const INIT_DENOISER: u64 = 0;
const INIT_ENCODER: u64 = 1;
const INIT_HEAD: u64 = 2;
const INIT_ZHEAD: u64 = 3;

// ── Step embedding ──────────────────────────────────────────────────────

/// Sinusoidal embedding of a diffusion step index as a `(1, dim)` row:
/// entry `2j` is `sin(k / 10000^(2j/dim))` and entry `2j+1` the matching
/// cosine. `dim` must be even so the pairs tile exactly.
pub fn step_embedding(k: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "step embedding width must be positive and even, got {dim}"
        )));
    }
    let mut data = vec![0.0; dim];
    for j in 0..dim / 2 {
        let arg = k as f64 / 10000f64.powf(2.0 * j as f64 / dim as f64);
        data[2 * j] = arg.sin();
        data[2 * j + 1] = arg.cos();
    }
    Tensor::new(&[1, dim], data)
}

/// A `(1, d)` row repeated `rows` times.
pub fn tile_rows(row: &Tensor, rows: usize) -> Result<Tensor> {
    if row.rows() != 1 {
        return Err(Error::invalid(format!(
            "tile_rows expects a single row, got {} rows",
            row.rows()
        )));
    }
    Tensor::new(&[rows, row.cols()], row.data().repeat(rows))
}

/// A whole matrix stacked `times` times along rows.
pub fn tile_blocks(block: &Tensor, times: usize) -> Result<Tensor> {
    if times == 0 {
        return Err(Error::invalid("tile_blocks needs at least one copy"));
    }
    Tensor::new(&[block.rows() * times, block.cols()], block.data().repeat(times))
}

// ── Skeleton adjacency ──────────────────────────────────────────────────

/// Symmetrically normalized adjacency `D^{-1/2} (A + I) D^{-1/2}` of the
/// kinematic tree, where `A` connects each joint to its parent.
pub fn normalized_adjacency(spec: &SkeletonSpec) -> Tensor {
    let j = spec.joint_count();
    let mut a = vec![0.0; j * j];
    for i in 0..j {
        a[i * j + i] = 1.0;
    }
    for (child, &parent) in spec.parents().iter().enumerate().skip(1) {
        a[child * j + parent] = 1.0;
        a[parent * j + child] = 1.0;
    }
    let deg: Vec<f64> = (0..j).map(|r| a[r * j..(r + 1) * j].iter().sum()).collect();
    for r in 0..j {
        for c in 0..j {
            a[r * j + c] /= (deg[r] * deg[c]).sqrt();
        }
    }
    Tensor::new(&[j, j], a).expect("square adjacency shape")
}

// ── Denoiser configuration and parameters ───────────────────────────────

/// Architecture sizes for the denoiser. The working width after context
/// concatenation is `2 * latent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub joints: usize,
    pub latent: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { joints: 17, latent: 128, blocks: 3, heads: 4 }
    }
}

impl DenoiserConfig {
    /// Working width of the residual blocks.
    pub fn width(&self) -> usize {
        2 * self.latent
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.latent == 0 || self.blocks == 0 || self.heads == 0 {
            return Err(Error::invalid("denoiser sizes must all be positive"));
        }
        if self.width() % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.width(),
                self.heads
            )));
        }
        Ok(())
    }
}

/// Denoiser weights keyed by stable names under the `g.` prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(&[rows, cols], data).expect("positive dims")
}

fn ones(cols: usize) -> Tensor {
    Tensor::new(&[1, cols], vec![1.0; cols]).expect("positive dims")
}

/// Fresh denoiser weights: uniform `±1/sqrt(fan_in)` matrices drawn in
/// declaration order from one dedicated stream, zero biases, unit
/// layer-norm gains. The draw order below is a compatibility contract;
/// reordering it would silently change every seeded initialization.
pub fn init_denoiser(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    config.validate()?;
    let mut rng = rng::stream(seed, tag::PARAM_INIT, INIT_DENOISER);
    let l = config.latent;
    let w = config.width();
    let mut p = ParamSet::new();
    p.insert("g.start.w", uniform_init(&mut rng, 3, l, 3))?;
    p.insert("g.start.b", Tensor::zeros(&[1, l])?)?;
    for i in 0..config.blocks {
        let pre = format!("g.blk{i}.");
        p.insert(format!("{pre}gcn1.w"), uniform_init(&mut rng, w, w, w))?;
        p.insert(format!("{pre}gcn1.b"), Tensor::zeros(&[1, w])?)?;
        p.insert(format!("{pre}gcn2.w"), uniform_init(&mut rng, w, w, w))?;
        p.insert(format!("{pre}gcn2.b"), Tensor::zeros(&[1, w])?)?;
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{pre}attn.{name}"), uniform_init(&mut rng, w, w, w))?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            p.insert(format!("{pre}attn.{name}"), Tensor::zeros(&[1, w])?)?;
        }
        p.insert(format!("{pre}attn.ln.g"), ones(w))?;
        p.insert(format!("{pre}attn.ln.b"), Tensor::zeros(&[1, w])?)?;
    }
    p.insert("g.final.w", uniform_init(&mut rng, w, 3, w))?;
    p.insert("g.final.b", Tensor::zeros(&[1, 3])?)?;
    Ok(DenoiserParams { config: config.clone(), params: p })
}

// ── Tape builders ───────────────────────────────────────────────────────

/// One graph-convolution layer `gelu(adj (x w) + b)` over stacked `(J, d)`
/// row blocks; `activate: false` leaves the affine output linear.
pub fn gcn_layer(
    tape: &mut Tape,
    adj: Value,
    x: Value,
    w: Value,
    b: Value,
    activate: bool,
) -> Result<Value> {
    let xw = tape.matmul(x, w)?;
    let mixed = tape.shared_left_matmul(adj, xw)?;
    let y = tape.broadcast_add(mixed, b)?;
    if activate {
        tape.gelu(y)
    } else {
        Ok(y)
    }
}

/// Multi-head self-attention over each `(J, width)` block of `x`, with a
/// residual connection and layer norm: `LN(x + MHA(x))`. Parameter names
/// are looked up under `prefix` (for example `g.blk0.attn.`).
fn attention(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: Value,
    joints: usize,
    heads: usize,
) -> Result<Value> {
    let (_, width) = tape.shape(x);
    let d_head = width / heads;
    let proj = |tape: &mut Tape, wn: &str, bn: &str| -> Result<Value> {
        let w = bound.get(&format!("{prefix}{wn}"))?;
        let b = bound.get(&format!("{prefix}{bn}"))?;
        let xw = tape.matmul(x, w)?;
        tape.broadcast_add(xw, b)
    };
    let q = proj(tape, "wq", "bq")?;
    let k = proj(tape, "wk", "bk")?;
    let v = proj(tape, "wv", "bv")?;
    let mut cat = None;
    for h in 0..heads {
        let qs = tape.slice_cols(q, h * d_head, d_head)?;
        let ks = tape.slice_cols(k, h * d_head, d_head)?;
        let vs = tape.slice_cols(v, h * d_head, d_head)?;
        let scores = tape.block_matmul_nt(qs, ks, joints)?;
        let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt())?;
        let weights = tape.softmax_rows(scaled)?;
        let head_out = tape.block_matmul_nn(weights, vs, joints)?;
        cat = Some(match cat {
            None => head_out,
            Some(prev) => tape.concat_cols(prev, head_out)?,
        });
    }
    let cat = cat.expect("at least one head");
    let wo = bound.get(&format!("{prefix}wo"))?;
    let bo = bound.get(&format!("{prefix}bo"))?;
    let proj_out = tape.matmul(cat, wo)?;
    let proj_out = tape.broadcast_add(proj_out, bo)?;
    let residual = tape.add(x, proj_out)?;
    let gain = bound.get(&format!("{prefix}ln.g"))?;
    let bias = bound.get(&format!("{prefix}ln.b"))?;
    tape.layer_norm(residual, gain, bias, LN_EPS)
}

/// One residual block: two graph convolutions, self-attention, then a skip
/// connection. Zeroing the block's layer-norm gain and bias makes the
/// whole block an exact identity, which keeps early training stable.
fn residual_block(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    adj: Value,
    v: Value,
    joints: usize,
    heads: usize,
) -> Result<Value> {
    let w1 = bound.get(&format!("{prefix}gcn1.w"))?;
    let b1 = bound.get(&format!("{prefix}gcn1.b"))?;
    let g1 = gcn_layer(tape, adj, v, w1, b1, true)?;
    let w2 = bound.get(&format!("{prefix}gcn2.w"))?;
    let b2 = bound.get(&format!("{prefix}gcn2.b"))?;
    let g2 = gcn_layer(tape, adj, g1, w2, b2, true)?;
    let attn = attention(tape, bound, &format!("{prefix}attn."), g2, joints, heads)?;
    tape.add(v, attn)
}

/// Records the full denoiser onto `tape`.
///
/// Inputs are stacked per pose: `h` is `(B*J, 3)` noisy coordinates,
/// `f_st` the matching `(B*J, latent)` context rows, and `f_d` the
/// `(B*J, width)` step-embedding rows (rows may mix different steps).
/// Returns the `(B*J, 3)` denoised coordinates.
pub fn denoiser_trunk(
    tape: &mut Tape,
    config: &DenoiserConfig,
    bound: &BoundParams,
    adj: Value,
    h: Value,
    f_st: Value,
    f_d: Value,
) -> Result<Value> {
    config.validate()?;
    let (rows, hc) = tape.shape(h);
    if hc != 3 || rows == 0 || rows % config.joints != 0 {
        return Err(Error::ShapeMismatch {
            op: "denoiser_trunk".into(),
            detail: format!("pose input ({rows}, {hc}) with {} joints", config.joints),
        });
    }
    if tape.shape(f_st) != (rows, config.latent) {
        return Err(Error::ShapeMismatch {
            op: "denoiser_trunk".into(),
            detail: format!(
                "context features {:?}, expected ({rows}, {})",
                tape.shape(f_st),
                config.latent
            ),
        });
    }
    if tape.shape(f_d) != (rows, config.width()) {
        return Err(Error::ShapeMismatch {
            op: "denoiser_trunk".into(),
            detail: format!(
                "step features {:?}, expected ({rows}, {})",
                tape.shape(f_d),
                config.width()
            ),
        });
    }
    let sw = bound.get("g.start.w")?;
    let sb = bound.get("g.start.b")?;
    let e = gcn_layer(tape, adj, h, sw, sb, true)?;
    let cat = tape.concat_cols(e, f_st)?;
    let mut v = tape.add(cat, f_d)?;
    for i in 0..config.blocks {
        v = residual_block(tape, bound, &format!("g.blk{i}."), adj, v, config.joints, config.heads)?;
    }
    let fw = bound.get("g.final.w")?;
    let fb = bound.get("g.final.b")?;
    gcn_layer(tape, adj, v, fw, fb, false)
}

impl DenoiserParams {
    /// One reverse step on a batch of normalized poses that share the same
    /// context features and step index. Forward only; no gradients kept.
    pub fn denoise_batch(
        &self,
        adj: &Tensor,
        poses: &[Pose3D],
        f_st: &Tensor,
        k: usize,
    ) -> Result<Vec<Pose3D>> {
        let j = self.config.joints;
        if poses.is_empty() {
            return Err(Error::invalid("denoise_batch needs at least one pose"));
        }
        for p in poses {
            if p.joint_count() != j {
                return Err(Error::ShapeMismatch {
                    op: "denoise_batch".into(),
                    detail: format!("pose has {} joints, expected {j}", p.joint_count()),
                });
            }
        }
        if f_st.shape() != [j, self.config.latent] {
            return Err(Error::ShapeMismatch {
                op: "denoise_batch".into(),
                detail: format!(
                    "context features {:?}, expected [{j}, {}]",
                    f_st.shape(),
                    self.config.latent
                ),
            });
        }
        let b = poses.len();
        let mut hdata = Vec::with_capacity(b * j * 3);
        for p in poses {
            hdata.extend(p.flat());
        }
        let h = Tensor::new(&[b * j, 3], hdata)?;
        let f_d = tile_rows(&step_embedding(k, self.config.width())?, b * j)?;
        let f_st_b = tile_blocks(f_st, b)?;

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params)?;
        let adj_v = tape.input(adj)?;
        let h_v = tape.input(&h)?;
        let st_v = tape.input(&f_st_b)?;
        let fd_v = tape.input(&f_d)?;
        let out = denoiser_trunk(&mut tape, &self.config, &bound, adj_v, h_v, st_v, fd_v)?;
        let data = tape.value(out);
        (0..b).map(|i| Pose3D::from_flat(&data[i * j * 3..(i + 1) * j * 3])).collect()
    }

    /// Single-pose convenience wrapper over [`DenoiserParams::denoise_batch`].
    pub fn denoise_step(
        &self,
        adj: &Tensor,
        pose: &Pose3D,
        f_st: &Tensor,
        k: usize,
    ) -> Result<Pose3D> {
        let mut out = self.denoise_batch(adj, std::slice::from_ref(pose), f_st, k)?;
        Ok(out.pop().expect("batch of one"))
    }
}

// ── Context encoder ─────────────────────────────────────────────────────

/// Architecture sizes for the 2D-sequence context encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoderConfig {
    pub joints: usize,
    pub latent: usize,
}

impl ContextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.latent == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        Ok(())
    }
}

/// Context encoder weights plus a freeze latch. Once frozen (after
/// pretraining) any further parameter update is rejected, so downstream
/// training cannot drift the conditioning features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoderParams {
    pub config: ContextEncoderConfig,
    pub params: ParamSet,
    pub frozen: bool,
}

/// Fresh unfrozen encoder weights from the encoder init stream.
pub fn init_encoder(config: &ContextEncoderConfig, seed: u64) -> Result<ContextEncoderParams> {
    config.validate()?;
    let mut rng = rng::stream(seed, tag::PARAM_INIT, INIT_ENCODER);
    let l = config.latent;
    let mut p = ParamSet::new();
    p.insert("enc.l1.w", uniform_init(&mut rng, 2, l, 2))?;
    p.insert("enc.l1.b", Tensor::zeros(&[1, l])?)?;
    p.insert("enc.l2.w", uniform_init(&mut rng, l, l, l))?;
    p.insert("enc.l2.b", Tensor::zeros(&[1, l])?)?;
    Ok(ContextEncoderParams { config: config.clone(), params: p, frozen: false })
}

/// Frame indices ordered by the frames' own coordinates (lexicographic
/// bit-level order). Pooling in this order makes the encoder output an
/// exact function of the frame multiset: permuting the input sequence
/// cannot change even the floating-point rounding of the mean.
fn canonical_frame_order(seq: &[Pose2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..seq.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = seq[a].joints().iter().flatten();
        let fb = seq[b].joints().iter().flatten();
        for (x, y) in fa.zip(fb) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    });
    order
}

/// Stacks `(J, 2)` frame blocks in the given order into one matrix.
fn stack_frames(seq: &[Pose2D], order: &[usize]) -> Result<Tensor> {
    let j = seq[0].joint_count();
    let mut data = Vec::with_capacity(order.len() * j * 2);
    for &f in order {
        for c in seq[f].joints() {
            data.extend_from_slice(c);
        }
    }
    Tensor::new(&[order.len() * j, 2], data)
}

/// Records the encoder body: two graph convolutions per frame followed by
/// a temporal mean over each sample's `frames` consecutive frame blocks.
/// `x` holds `(S*frames*J, 2)` rows; the result is `(S*J, latent)`.
fn record_encoder(
    tape: &mut Tape,
    bound: &BoundParams,
    adj: Value,
    x: Value,
    joints: usize,
    frames: usize,
) -> Result<Value> {
    let w1 = bound.get("enc.l1.w")?;
    let b1 = bound.get("enc.l1.b")?;
    let l1 = gcn_layer(tape, adj, x, w1, b1, true)?;
    let w2 = bound.get("enc.l2.w")?;
    let b2 = bound.get("enc.l2.b")?;
    let l2 = gcn_layer(tape, adj, l1, w2, b2, true)?;
    tape.block_mean(l2, joints, frames)
}

impl ContextEncoderParams {
    /// Encodes one 2D sequence into `(J, latent)` context features. The
    /// result depends only on the multiset of frames, not their order.
    pub fn encode(&self, adj: &Tensor, seq: &[Pose2D]) -> Result<Tensor> {
        self.config.validate()?;
        if seq.is_empty() {
            return Err(Error::invalid("context sequence must not be empty"));
        }
        for f in seq {
            if f.joint_count() != self.config.joints {
                return Err(Error::ShapeMismatch {
                    op: "encode_context".into(),
                    detail: format!(
                        "frame has {} joints, expected {}",
                        f.joint_count(),
                        self.config.joints
                    ),
                });
            }
        }
        if adj.shape() != [self.config.joints, self.config.joints] {
            return Err(Error::ShapeMismatch {
                op: "encode_context".into(),
                detail: format!("adjacency {:?}", adj.shape()),
            });
        }
        let order = canonical_frame_order(seq);
        let x = stack_frames(seq, &order)?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params)?;
        let adj_v = tape.input(adj)?;
        let x_v = tape.input(&x)?;
        let out = record_encoder(
            &mut tape,
            &bound,
            adj_v,
            x_v,
            self.config.joints,
            seq.len(),
        )?;
        Ok(tape.tensor(out))
    }

    /// Runs `update` against the weights unless the encoder is frozen.
    pub fn apply_update(
        &mut self,
        update: impl FnOnce(&mut ParamSet) -> Result<()>,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen("context encoder is frozen".into()));
        }
        update(&mut self.params)
    }
}

// ── Encoder pretraining ─────────────────────────────────────────────────

/// Pretraining hyperparameters for the context encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub latent: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Optional auxiliary head that classifies each joint's depth into
    /// this many bins (squared error between softmax probabilities and the
    /// one-hot bin). `None` disables the head entirely.
    pub z_bins: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { latent: 128, epochs: 30, batch: 64, lr: 1e-3, z_bins: None }
    }
}

/// Pretrains the context encoder on the train split by regressing each
/// sample's normalized 3D pose from pooled sequence features through a
/// shared per-joint linear head. The head (and the optional depth-bin
/// head) is discarded afterwards and the encoder returned frozen, along
/// with the per-epoch mean training loss.
pub fn pretrain_context(
    dataset: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ContextEncoderParams, Vec<f64>)> {
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::invalid("pretraining needs positive epochs and batch size"));
    }
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::invalid("pretraining learning rate must be positive"));
    }
    if dataset.train.is_empty() {
        return Err(Error::invalid("pretraining needs a non-empty train split"));
    }
    let joints = dataset.skeleton.joint_count();
    let frames = dataset.train[0].seq2d.len();
    if frames == 0 {
        return Err(Error::invalid("pretraining needs non-empty 2D sequences"));
    }
    for s in &dataset.train {
        if s.seq2d.len() != frames {
            return Err(Error::invalid("all training sequences must share a frame count"));
        }
    }
    let enc_config = ContextEncoderConfig { joints, latent: cfg.latent };
    let encoder = init_encoder(&enc_config, seed)?;
    let mut params = encoder.params.clone();
    {
        let mut rng = rng::stream(seed, tag::PARAM_INIT, INIT_HEAD);
        params.insert("head.w", uniform_init(&mut rng, cfg.latent, 3, cfg.latent))?;
        params.insert("head.b", Tensor::zeros(&[1, 3])?)?;
    }
    if let Some(bins) = cfg.z_bins {
        if bins < 2 {
            return Err(Error::invalid("depth-bin head needs at least two bins"));
        }
        let mut rng = rng::stream(seed, tag::PARAM_INIT, INIT_ZHEAD);
        params.insert("zhead.w", uniform_init(&mut rng, cfg.latent, bins, cfg.latent))?;
        params.insert("zhead.b", Tensor::zeros(&[1, bins])?)?;
    }

    let adj = normalized_adjacency(&dataset.skeleton);
    // Per-sample inputs and regression targets, canonical frame order.
    let mut frame_stacks = Vec::with_capacity(dataset.train.len());
    let mut targets = Vec::with_capacity(dataset.train.len());
    for s in &dataset.train {
        let order = canonical_frame_order(&s.seq2d);
        frame_stacks.push(stack_frames(&s.seq2d, &order)?);
        targets.push(dataset.norm_stats.normalize(&s.pose3d).flat());
    }
    // Depth-bin targets from the raw (millimeter) z range of the split.
    let z_targets: Option<Vec<Vec<usize>>> = cfg.z_bins.map(|bins| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &dataset.train {
            for c in s.pose3d.joints() {
                lo = lo.min(c[2]);
                hi = hi.max(c[2]);
            }
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        dataset
            .train
            .iter()
            .map(|s| {
                s.pose3d
                    .joints()
                    .iter()
                    .map(|c| (((c[2] - lo) / width) as usize).min(bins - 1))
                    .collect()
            })
            .collect()
    });

    let has_z = cfg.z_bins.is_some();
    let program = move |tape: &mut Tape, bound: &BoundParams, inputs: &[Value]| -> Result<Value> {
        let (adj_v, x, target) = (inputs[0], inputs[1], inputs[2]);
        let (rows, _) = tape.shape(target);
        let groups = tape.shape(x).0 / rows;
        let feat = record_encoder(tape, bound, adj_v, x, joints, groups)?;
        let pw = bound.get("head.w")?;
        let pb = bound.get("head.b")?;
        let pred = tape.matmul(feat, pw)?;
        let pred = tape.broadcast_add(pred, pb)?;
        let diff = tape.sub(pred, target)?;
        let ss = tape.sum_squares(diff)?;
        let mut loss = tape.scale(ss, 1.0 / (rows * 3) as f64)?;
        if has_z {
            let zw = bound.get("zhead.w")?;
            let zb = bound.get("zhead.b")?;
            let logits = tape.matmul(feat, zw)?;
            let logits = tape.broadcast_add(logits, zb)?;
            let probs = tape.softmax_rows(logits)?;
            let zdiff = tape.sub(probs, inputs[3])?;
            let zss = tape.sum_squares(zdiff)?;
            let zloss = tape.scale(zss, 1.0 / rows as f64)?;
            loss = tape.add(loss, zloss)?;
        }
        Ok(loss)
    };

    let mut state = AdamState::new(&params);
    let adam_cfg = AdamConfig::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut rng::stream(seed, tag::PRETRAIN, epoch as u64));
        let mut loss_sum = 0.0;
        let mut row_sum = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let b = chunk.len();
            let mut xdata = Vec::with_capacity(b * frames * joints * 2);
            let mut tdata = Vec::with_capacity(b * joints * 3);
            for &i in chunk {
                xdata.extend_from_slice(frame_stacks[i].data());
                tdata.extend_from_slice(&targets[i]);
            }
            let x = Tensor::new(&[b * frames * joints, 2], xdata)?;
            let target = Tensor::new(&[b * joints, 3], tdata)?;
            let mut inputs = vec![adj.clone(), x, target];
            if let (Some(bins), Some(zt)) = (cfg.z_bins, z_targets.as_ref()) {
                let mut onehot = vec![0.0; b * joints * bins];
                for (bi, &i) in chunk.iter().enumerate() {
                    for (jj, &bin) in zt[i].iter().enumerate() {
                        onehot[(bi * joints + jj) * bins + bin] = 1.0;
                    }
                }
                inputs.push(Tensor::new(&[b * joints, bins], onehot)?);
            }
            let (loss, grads) = evaluate_with_gradients(&program, &params, &inputs)?;
            adam_step(&mut params, &grads, &mut state, cfg.lr, &adam_cfg)?;
            loss_sum += loss * (b * joints) as f64;
            row_sum += b * joints;
        }
        epoch_losses.push(loss_sum / row_sum as f64);
    }

    let _ = params.split_prefix("head.");
    let _ = params.split_prefix("zhead.");
    Ok((
        ContextEncoderParams { config: enc_config, params, frozen: true },
        epoch_losses,
    ))
}
