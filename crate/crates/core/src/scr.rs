//! Scene-coordinate regression: an MLP mapping `[global ‖ local]` descriptors
//! to world coordinates, trained by minimising a robust reprojection loss.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DMatrixView, Matrix2x3, Point3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covis::ImageId;
use crate::geometry::{unproject, CameraIntrinsics, Keypoint, Pose, SceneCoordinate};
use crate::numeric::{pca_apply, AdamW, AdamWConfig, NumericError, PcaModel, RngStream};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScrError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset has no observations")]
    EmptyDataset,
    #[error("focus sampling needs ground-truth coordinates, none present")]
    FocusModeUnavailable,
    #[error("no pose for image {0}")]
    MissingPose(ImageId),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Compressed local descriptor attached to a keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptor {
    pub values: Vec<f64>,
    pub keypoint: Keypoint,
    pub image_id: ImageId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrArchitecture {
    pub global_dim: usize,
    pub local_dim: usize,
    pub width: usize,
    /// Hidden blocks after the input layer.
    pub hidden_blocks: usize,
    /// Whether hidden blocks add their input back (`h + relu(W h + b)`).
    pub residual: bool,
}

impl ScrArchitecture {
    pub fn input_dim(&self) -> usize {
        self.global_dim + self.local_dim
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.input_dim(), self.width)];
        shapes.extend(std::iter::repeat_n((self.width, self.width), self.hidden_blocks));
        shapes.push((self.width, 3));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<(), ScrError> {
        if self.input_dim() == 0 || self.width == 0 {
            return Err(ScrError::InvalidConfig("input and hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Maps network outputs to world coordinates: `center + scale * out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputScaling {
    pub center: Vector3<f64>,
    pub scale: f64,
}

impl OutputScaling {
    /// Centre and spread of the points each camera looks at `nominal_depth`
    /// units ahead.
    pub fn from_poses<'a>(poses: impl IntoIterator<Item = &'a Pose>, nominal_depth: f64) -> Self {
        let targets: Vec<Vector3<f64>> = poses
            .into_iter()
            .map(|p| p.camera_to_world(&Vector3::new(0.0, 0.0, nominal_depth)).coords)
            .collect();
        if targets.is_empty() {
            return Self {
                center: Vector3::zeros(),
                scale: 1.0,
            };
        }
        let center = targets.iter().sum::<Vector3<f64>>() / targets.len() as f64;
        let rms = (targets.iter().map(|t| (t - center).norm_squared()).sum::<f64>() / targets.len() as f64).sqrt();
        Self {
            center,
            scale: rms.max(1.0),
        }
    }
}

/// Fully connected regressor. Weights are stored per layer as column-major
/// `(in x out)` matrices followed by the bias, input layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct ScrModel {
    arch: ScrArchitecture,
    scaling: OutputScaling,
    params: Vec<f64>,
    local_pca: Option<PcaModel>,
}

impl ScrModel {
    /// Hidden layers use He-uniform initialisation; the output layer starts at
    /// zero, so an untrained model predicts the scaling centre everywhere.
    pub fn init(arch: ScrArchitecture, scaling: OutputScaling, rng: &mut RngStream) -> Self {
        let shapes = arch.layer_shapes();
        let mut params = Vec::with_capacity(arch.param_count());
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let last = l + 1 == shapes.len();
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if arch.residual && l > 0 {
                bound *= 0.5;
            }
            for _ in 0..fan_in * fan_out {
                params.push(if last { 0.0 } else { rng.random_range(-bound..=bound) });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            arch,
            scaling,
            params,
            local_pca: None,
        }
    }

    pub fn from_parts(
        arch: ScrArchitecture,
        scaling: OutputScaling,
        params: Vec<f64>,
        local_pca: Option<PcaModel>,
    ) -> Result<Self, ScrError> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(ScrError::DimensionMismatch {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        if let Some(p) = &local_pca {
            if p.out_dim() != arch.local_dim {
                return Err(ScrError::InvalidModel(format!(
                    "local PCA outputs {} dims, network expects {}",
                    p.out_dim(),
                    arch.local_dim
                )));
            }
        }
        if params.iter().any(|p| !p.is_finite()) || !scaling.scale.is_finite() {
            return Err(ScrError::InvalidModel("non-finite parameter".into()));
        }
        Ok(Self {
            arch,
            scaling,
            params,
            local_pca,
        })
    }

    pub fn architecture(&self) -> &ScrArchitecture {
        &self.arch
    }

    pub fn scaling(&self) -> &OutputScaling {
        &self.scaling
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn local_pca(&self) -> Option<&PcaModel> {
        self.local_pca.as_ref()
    }

    pub fn set_local_pca(&mut self, pca: Option<PcaModel>) {
        self.local_pca = pca;
    }

    pub fn round_to_f32(&mut self) {
        self.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
        self.scaling.center.iter_mut().for_each(|p| *p = *p as f32 as f64);
        self.scaling.scale = self.scaling.scale as f32 as f64;
        if let Some(p) = &mut self.local_pca {
            p.round_to_f32();
        }
    }

    /// Applies the stored local PCA (when present) to a raw local descriptor.
    pub fn compress_local(&self, raw: &[f64]) -> Result<Vec<f64>, ScrError> {
        match &self.local_pca {
            Some(p) => Ok(pca_apply(p, raw)?),
            None => Ok(raw.to_vec()),
        }
    }

    fn layer(&self, l: usize) -> (DMatrixView<'_, f64>, &[f64]) {
        let shapes = self.arch.layer_shapes();
        let mut off = 0;
        for &(i, o) in &shapes[..l] {
            off += i * o + o;
        }
        let (i, o) = shapes[l];
        let w = DMatrixView::from_slice(&self.params[off..off + i * o], i, o);
        (w, &self.params[off + i * o..off + i * o + o])
    }

    fn layer_count(&self) -> usize {
        self.arch.hidden_blocks + 2
    }
}

struct Activations {
    /// Pre-activations of the input and hidden layers.
    pre: Vec<DMatrix<f64>>,
    /// Hidden states after each of those layers.
    hidden: Vec<DMatrix<f64>>,
    out: DMatrix<f64>,
}

fn affine(x: &DMatrix<f64>, w: DMatrixView<'_, f64>, b: &[f64]) -> DMatrix<f64> {
    let mut y = x * w;
    for (mut col, bias) in y.column_iter_mut().zip(b) {
        col.add_scalar_mut(*bias);
    }
    y
}

fn forward(model: &ScrModel, x: &DMatrix<f64>) -> Activations {
    let n_layers = model.layer_count();
    let mut pre = Vec::with_capacity(n_layers - 1);
    let mut hidden = Vec::with_capacity(n_layers - 1);
    let (w, b) = model.layer(0);
    let a = affine(x, w, b);
    hidden.push(a.map(|v| v.max(0.0)));
    pre.push(a);
    for l in 1..n_layers - 1 {
        let (w, b) = model.layer(l);
        let a = affine(&hidden[l - 1], w, b);
        let mut h = a.map(|v| v.max(0.0));
        if model.arch.residual {
            h += &hidden[l - 1];
        }
        hidden.push(h);
        pre.push(a);
    }
    let (w, b) = model.layer(n_layers - 1);
    let out = affine(&hidden[n_layers - 2], w, b);
    Activations { pre, hidden, out }
}

/// Gradient of the loss with respect to all parameters given `d_out` (B x 3)
/// with respect to the raw network outputs.
fn backward(model: &ScrModel, x: &DMatrix<f64>, act: &Activations, d_out: &DMatrix<f64>) -> Vec<f64> {
    let n_layers = model.layer_count();
    let shapes = model.arch.layer_shapes();
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for &(i, o) in &shapes {
        offsets.push(off);
        off += i * o + o;
    }
    let mut grad = vec![0.0; model.params.len()];
    let write = |grad: &mut [f64], l: usize, input: &DMatrix<f64>, delta: &DMatrix<f64>| {
        let (i, o) = shapes[l];
        // Explicit transpose so the product goes through the blocked matrix kernel.
        let dw = input.transpose() * delta;
        grad[offsets[l]..offsets[l] + i * o].copy_from_slice(dw.as_slice());
        for (dst, col) in grad[offsets[l] + i * o..offsets[l] + i * o + o]
            .iter_mut()
            .zip(delta.column_iter())
        {
            *dst = col.sum();
        }
    };
    let last = n_layers - 1;
    write(&mut grad, last, &act.hidden[last - 1], d_out);
    let (w_out, _) = model.layer(last);
    let mut d_hidden = d_out * w_out.transpose();
    for l in (0..last).rev() {
        let mut delta = d_hidden.clone();
        delta.zip_apply(&act.pre[l], |d, a| {
            if a <= 0.0 {
                *d = 0.0
            }
        });
        let input = if l == 0 { x } else { &act.hidden[l - 1] };
        write(&mut grad, l, input, &delta);
        if l > 0 {
            let (w, _) = model.layer(l);
            let back = &delta * w.transpose();
            d_hidden = if model.arch.residual { d_hidden + back } else { back };
        }
    }
    grad
}

fn check_input(model: &ScrModel, global: &[f64], local: &[f64]) -> Result<(), ScrError> {
    if global.len() != model.arch.global_dim {
        return Err(ScrError::DimensionMismatch {
            expected: model.arch.global_dim,
            got: global.len(),
        });
    }
    if local.len() != model.arch.local_dim {
        return Err(ScrError::DimensionMismatch {
            expected: model.arch.local_dim,
            got: local.len(),
        });
    }
    Ok(())
}

fn to_world(model: &ScrModel, out: &DMatrix<f64>, row: usize) -> SceneCoordinate {
    let s = &model.scaling;
    Point3::new(
        s.center.x + s.scale * out[(row, 0)],
        s.center.y + s.scale * out[(row, 1)],
        s.center.z + s.scale * out[(row, 2)],
    )
}

/// Predicts the world coordinate for one compressed local descriptor
/// conditioned on a global descriptor.
pub fn predict_coordinate(local: &[f64], global: &[f64], model: &ScrModel) -> Result<SceneCoordinate, ScrError> {
    check_input(model, global, local)?;
    let x = DMatrix::from_fn(1, model.arch.input_dim(), |_, c| {
        if c < global.len() {
            global[c]
        } else {
            local[c - global.len()]
        }
    });
    Ok(to_world(model, &forward(model, &x).out, 0))
}

/// Batched prediction: every local descriptor conditioned on the same global one.
pub fn predict_batch(locals: &[Vec<f64>], global: &[f64], model: &ScrModel) -> Result<Vec<SceneCoordinate>, ScrError> {
    for l in locals {
        check_input(model, global, l)?;
    }
    let g = global.len();
    let x = DMatrix::from_fn(locals.len(), model.arch.input_dim(), |r, c| {
        if c < g {
            global[c]
        } else {
            locals[r][c - g]
        }
    });
    let out = forward(model, &x).out;
    Ok((0..locals.len()).map(|r| to_world(model, &out, r)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    ReprojectionOnly,
    WithGroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Random,
    Focus,
}

/// Robust reprojection loss settings (pixels unless noted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustLossParams {
    /// Residuals above this switch from the pure soft clamp to the blended
    /// 3-D distance term.
    pub switch_threshold: f64,
    /// Scale `c` of the soft clamp `c * tanh(r / c)`.
    pub clamp_scale: f64,
    /// Width over which the 3-D term is blended in above the threshold.
    pub blend_width: f64,
    /// Camera-frame depth (scene units) below which a prediction counts as behind the camera.
    pub min_depth: f64,
    /// Depth (scene units) of the fallback target on the keypoint ray when no
    /// ground truth is available.
    pub nominal_depth: f64,
    /// Pixels per scene unit of the ground-truth distance added to every
    /// supervised training row. Plays the role of depth supervision: the
    /// reprojection term alone leaves each prediction free to slide along its
    /// ray. Not part of [`robust_reproj_loss`].
    pub gt_weight: f64,
}

impl Default for RobustLossParams {
    fn default() -> Self {
        Self {
            switch_threshold: 50.0,
            clamp_scale: 50.0,
            blend_width: 50.0,
            min_depth: 0.1,
            nominal_depth: 10.0,
            gt_weight: 10.0,
        }
    }
}

/// Loss value and its gradient with respect to the predicted coordinate.
///
/// In front of the camera with residual `r <= switch_threshold` the loss is
/// `c * tanh(r / c)`. Above the threshold a 3-D distance to the target (ground
/// truth if given, otherwise the keypoint ray at `nominal_depth`) is blended in
/// with weight `min(1, (r - threshold) / blend_width)`, which keeps the loss
/// continuous at the threshold. Behind the camera the loss is the 3-D distance
/// alone.
pub fn robust_reproj_loss(
    pred: &SceneCoordinate,
    kp: Keypoint,
    pose: &Pose,
    k: &CameraIntrinsics,
    params: &RobustLossParams,
    gt: Option<&SceneCoordinate>,
) -> (f64, Vector3<f64>) {
    let target = || -> SceneCoordinate {
        match gt {
            Some(g) => *g,
            None => unproject(kp, params.nominal_depth, k, pose).expect("nominal depth is positive"),
        }
    };
    let distance_term = |t: SceneCoordinate| -> (f64, Vector3<f64>) {
        let diff = pred - t;
        let d = diff.norm();
        if d > 0.0 {
            (d, diff / d)
        } else {
            (0.0, Vector3::zeros())
        }
    };
    let pc = pose.world_to_camera(pred);
    if pc.z < params.min_depth {
        return distance_term(target());
    }
    let inv_z = 1.0 / pc.z;
    let e = Vector3::new(
        k.fx * pc.x * inv_z + k.cx - kp.u,
        k.fy * pc.y * inv_z + k.cy - kp.v,
        0.0,
    );
    let r = e.xy().norm();
    let c = params.clamp_scale;
    let th = (r / c).tanh();
    let clamp = c * th;
    if r == 0.0 {
        return (0.0, Vector3::zeros());
    }
    // d r / d pred = (e / r)^T * J_proj * R^T
    let j_proj = Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * pc.x * inv_z * inv_z,
        0.0,
        k.fy * inv_z,
        -k.fy * pc.y * inv_z * inv_z,
    );
    let dr_dcam = j_proj.tr_mul(&(e.xy() / r));
    let dr_dpred = pose.rotation() * dr_dcam;
    let d_clamp = 1.0 - th * th;
    if r <= params.switch_threshold {
        return (clamp, dr_dpred * d_clamp);
    }
    let (dist, d_dist) = distance_term(target());
    let excess = (r - params.switch_threshold) / params.blend_width;
    let (w, dw_dr) = if excess < 1.0 {
        (excess, 1.0 / params.blend_width)
    } else {
        (1.0, 0.0)
    };
    (clamp + w * dist, dr_dpred * (d_clamp + dw_dr * dist) + d_dist * w)
}

/// One training image: its conditioning descriptor and compressed local
/// observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScrImage {
    pub image_id: ImageId,
    pub global: Vec<f64>,
    pub keypoints: Vec<Keypoint>,
    pub locals: Vec<Vec<f64>>,
    pub gt: Vec<Option<SceneCoordinate>>,
    /// Indices (into the dataset) of covisible images whose descriptors may
    /// stand in for `global` under graph augmentation.
    pub neighbors: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScrDataset {
    pub images: Vec<ScrImage>,
}

impl ScrDataset {
    pub fn observation_count(&self) -> usize {
        self.images.iter().map(|i| i.keypoints.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferRow {
    pub image: u32,
    pub observation: u32,
    /// Image whose global descriptor conditions this row.
    pub global: u32,
}

/// Sampled training rows referencing observations of a dataset.
#[derive(Debug, Clone)]
pub struct TrainingBuffer<'a> {
    pub dataset: &'a ScrDataset,
    pub rows: Vec<BufferRow>,
    pub capacity: usize,
}

impl TrainingBuffer<'_> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScrTrainConfig {
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    /// Fraction of iterations spent linearly warming up the learning rate;
    /// the rest follows a cosine decay to `min_learning_rate`.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub loss: RobustLossParams,
    pub supervision: Supervision,
    pub sampling: Sampling,
    /// Probability that a buffer row is conditioned on a random covisible
    /// neighbor's descriptor instead of its own image's.
    pub graph_augmentation: f64,
    /// Standard deviation of Gaussian noise added to every compressed local
    /// descriptor entry at each training step.
    pub local_noise: f64,
    pub width: usize,
    pub hidden_blocks: usize,
    pub residual: bool,
    pub seed: u64,
}

impl Default for ScrTrainConfig {
    fn default() -> Self {
        Self {
            buffer_capacity: 1_000_000,
            batch_size: 8192,
            iterations: 5000,
            learning_rate: 3e-3,
            min_learning_rate: 1e-5,
            warmup_fraction: 0.05,
            weight_decay: 0.0,
            loss: RobustLossParams::default(),
            supervision: Supervision::WithGroundTruth,
            sampling: Sampling::Random,
            graph_augmentation: 0.0,
            local_noise: 0.0,
            width: 512,
            hidden_blocks: 3,
            residual: true,
            seed: 0,
        }
    }
}

impl ScrTrainConfig {
    pub fn validate(&self) -> Result<(), ScrError> {
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(ScrError::InvalidConfig(
                "batch size and buffer capacity must be >= 1".into(),
            ));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(ScrError::InvalidConfig(format!(
                "batch size {} exceeds buffer capacity {}",
                self.batch_size, self.buffer_capacity
            )));
        }
        let l = &self.loss;
        if !(l.switch_threshold > 0.0 && l.clamp_scale > 0.0 && l.blend_width > 0.0 && l.nominal_depth > 0.0) {
            return Err(ScrError::InvalidConfig("loss thresholds must be positive".into()));
        }
        if !(self.local_noise >= 0.0 && self.local_noise.is_finite()) {
            return Err(ScrError::InvalidConfig("local_noise must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.graph_augmentation) {
            return Err(ScrError::InvalidConfig("graph_augmentation must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(ScrError::InvalidConfig("warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lr_at(&self, it: usize) -> f64 {
        let warm = (self.warmup_fraction * self.iterations as f64).round() as usize;
        if it < warm {
            return self.learning_rate * (it + 1) as f64 / warm as f64;
        }
        let span = (self.iterations - warm).max(1) as f64;
        let t = (it - warm) as f64 / span;
        self.min_learning_rate
            + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Draws `buffer_capacity` observations with replacement. Random mode samples
/// uniformly over all observations; focus mode only over observations with a
/// ground-truth coordinate. With graph augmentation a row's conditioning
/// descriptor is swapped for a covisible neighbor's, so the regressor learns
/// to accept descriptors of nearby images as it will at query time.
pub fn fill_buffer<'a>(
    dataset: &'a ScrDataset,
    cfg: &ScrTrainConfig,
    rng: &mut RngStream,
) -> Result<TrainingBuffer<'a>, ScrError> {
    let mut pool = Vec::new();
    for (i, img) in dataset.images.iter().enumerate() {
        for o in 0..img.keypoints.len() {
            if cfg.sampling == Sampling::Random || img.gt.get(o).is_some_and(|g| g.is_some()) {
                pool.push(BufferRow {
                    image: i as u32,
                    observation: o as u32,
                    global: i as u32,
                });
            }
        }
    }
    if dataset.observation_count() == 0 {
        return Err(ScrError::EmptyDataset);
    }
    if pool.is_empty() {
        return Err(ScrError::FocusModeUnavailable);
    }
    let rows = (0..cfg.buffer_capacity)
        .map(|_| {
            let mut row = pool[rng.random_range(0..pool.len())];
            let neighbors = &dataset.images[row.image as usize].neighbors;
            if cfg.graph_augmentation > 0.0 && !neighbors.is_empty() && rng.random_bool(cfg.graph_augmentation) {
                row.global = neighbors[rng.random_range(0..neighbors.len())];
            }
            row
        })
        .collect();
    Ok(TrainingBuffer {
        dataset,
        rows,
        capacity: cfg.buffer_capacity,
    })
}

/// Per-row training target.
#[derive(Debug, Clone, Copy)]
pub struct RowTarget<'a> {
    pub keypoint: Keypoint,
    pub pose: &'a Pose,
    pub intrinsics: &'a CameraIntrinsics,
    pub gt: Option<SceneCoordinate>,
}

/// Mean robust loss over a minibatch and its gradient with respect to every
/// model parameter.
pub fn minibatch_gradient(
    model: &ScrModel,
    inputs: &DMatrix<f64>,
    targets: &[RowTarget<'_>],
    loss: &RobustLossParams,
) -> (f64, Vec<f64>) {
    let act = forward(model, inputs);
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut d_out = DMatrix::zeros(targets.len(), 3);
    for (r, t) in targets.iter().enumerate() {
        let pred = to_world(model, &act.out, r);
        let (mut l, mut g) = robust_reproj_loss(&pred, t.keypoint, t.pose, t.intrinsics, loss, t.gt.as_ref());
        if let (Some(gt), true) = (t.gt, loss.gt_weight > 0.0) {
            let diff = pred - gt;
            let d = diff.norm();
            l += loss.gt_weight * d;
            if d > 0.0 {
                g += diff * (loss.gt_weight / d);
            }
        }
        total += l;
        for c in 0..3 {
            d_out[(r, c)] = g[c] * model.scaling.scale / n;
        }
    }
    (total / n, backward(model, inputs, &act, &d_out))
}

#[derive(Debug, Clone)]
pub struct TrainedScr {
    pub model: ScrModel,
    pub loss_trace: Vec<f64>,
}

const GRAD_CHUNK: usize = 256;

/// Minibatch AdamW training over shuffled buffer rows. Minibatches are split
/// into fixed-size chunks whose gradients are summed in chunk order, so
/// results do not depend on the number of threads.
pub fn train_scr(
    buffer: &TrainingBuffer<'_>,
    cameras: &BTreeMap<ImageId, (Pose, CameraIntrinsics)>,
    cfg: &ScrTrainConfig,
) -> Result<TrainedScr, ScrError> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(ScrError::EmptyDataset);
    }
    let ds = buffer.dataset;
    let image_cams: Vec<&(Pose, CameraIntrinsics)> = ds
        .images
        .iter()
        .map(|img| cameras.get(&img.image_id).ok_or(ScrError::MissingPose(img.image_id)))
        .collect::<Result<_, _>>()?;
    let first = &ds.images[buffer.rows[0].image as usize];
    let arch = ScrArchitecture {
        global_dim: first.global.len(),
        local_dim: first.locals.first().map_or(0, |l| l.len()),
        width: cfg.width,
        hidden_blocks: cfg.hidden_blocks,
        residual: cfg.residual,
    };
    arch.validate()?;
    for img in &ds.images {
        for l in &img.locals {
            check_input_dims(&arch, &img.global, l)?;
        }
    }
    let scaling = OutputScaling::from_poses(image_cams.iter().map(|(p, _)| p), cfg.loss.nominal_depth);
    let root = RngStream::new(cfg.seed, "scr");
    let mut model = ScrModel::init(arch, scaling, &mut root.substream("init"));
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.params.len(),
    );
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut shuffle_rng = root.substream("shuffle");
    let mut noise_rng = root.substream("local-noise");
    let noise_dist = Normal::new(0.0, cfg.local_noise).expect("validated local_noise");
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0;
    let batch = cfg.batch_size.min(buffer.len());
    let use_gt = cfg.supervision == Supervision::WithGroundTruth;
    let mut loss_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        if cursor + batch > order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let rows: Vec<BufferRow> = order[cursor..cursor + batch].iter().map(|&i| buffer.rows[i]).collect();
        cursor += batch;
        // Drawn sequentially so the noise does not depend on the thread count.
        let noise: Vec<f64> = if cfg.local_noise > 0.0 {
            (0..batch * arch.local_dim)
                .map(|_| noise_dist.sample(&mut noise_rng))
                .collect()
        } else {
            Vec::new()
        };
        let chunks = batch.div_ceil(GRAD_CHUNK);
        let partial = par::map_range(chunks, |ci| {
            let start = ci * GRAD_CHUNK;
            let chunk = &rows[start..(start + GRAD_CHUNK).min(batch)];
            let x = DMatrix::from_fn(chunk.len(), arch.input_dim(), |r, c| {
                let row = chunk[r];
                if c < arch.global_dim {
                    ds.images[row.global as usize].global[c]
                } else {
                    let l = c - arch.global_dim;
                    let jitter = noise.get((start + r) * arch.local_dim + l).copied().unwrap_or(0.0);
                    ds.images[row.image as usize].locals[row.observation as usize][l] + jitter
                }
            });
            let targets: Vec<RowTarget<'_>> = chunk
                .iter()
                .map(|row| {
                    let img = &ds.images[row.image as usize];
                    let (pose, k) = image_cams[row.image as usize];
                    RowTarget {
                        keypoint: img.keypoints[row.observation as usize],
                        pose,
                        intrinsics: k,
                        gt: if use_gt {
                            img.gt.get(row.observation as usize).copied().flatten()
                        } else {
                            None
                        },
                    }
                })
                .collect();
            let (l, g) = minibatch_gradient(&model, &x, &targets, &cfg.loss);
            (l * chunk.len() as f64, g, chunk.len())
        });
        let mut grad = vec![0.0; model.params.len()];
        let mut loss = 0.0;
        for (l, g, n) in partial {
            loss += l;
            let w = n as f64 / batch as f64;
            for (dst, src) in grad.iter_mut().zip(g) {
                *dst += src * w;
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(ScrError::NonFiniteLoss { iteration: it });
        }
        opt.set_lr(cfg.lr_at(it));
        opt.step(&mut model.params, &grad).map_err(|e| match e {
            NumericError::NonFiniteGradient(_) => ScrError::NonFiniteLoss { iteration: it },
            other => other.into(),
        })?;
        loss_trace.push(loss);
        if it % 500 == 0 {
            log::debug!("scr iteration {it}: loss {loss:.4}");
        }
    }
    model.round_to_f32();
    Ok(TrainedScr { model, loss_trace })
}

fn check_input_dims(arch: &ScrArchitecture, global: &[f64], local: &[f64]) -> Result<(), ScrError> {
    if global.len() != arch.global_dim {
        return Err(ScrError::DimensionMismatch {
            expected: arch.global_dim,
            got: global.len(),
        });
    }
    if local.len() != arch.local_dim {
        return Err(ScrError::DimensionMismatch {
            expected: arch.local_dim,
            got: local.len(),
        });
    }
    Ok(())
}
