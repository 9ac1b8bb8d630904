//! Attention aggregation of dense visual features into global descriptors.
//!
//! Each image contributes `T` feature tokens of dimension `d_feat`. Two linear
//! layers act on every token: a projection to `d_proj` dimensions and a
//! scoring layer producing one logit per cluster. For every cluster the logits
//! are soft-normalised over the token positions and used to average the
//! projected tokens; the per-cluster averages are concatenated into the
//! intermediate descriptor (`clusters * d_proj` values). A PCA fitted after
//! training compresses it to the final L2-normalised global descriptor.
//!
//! Training pulls covisible images together and pushes unrelated ones apart with
//! an overlap-weighted contrastive loss: for unit descriptors with cosine `s`
//! and overlap `psi`,
//!
//! ```text
//! loss = psi * (1 - s)^2 + (1 - psi) * max(margin + s, 0)^2
//! ```
//!
//! Batches hold three equally sized bands of pairs: positives
//! (`psi > 0.5`), soft negatives (`0.25 <= psi <= 0.5`) and random
//! non-adjacent pairs (`psi = 0`). Gradients are derived by hand and checked
//! against finite differences in the tests.

use std::collections::{BTreeMap, BTreeSet};

#[cfg(test)]
use nalgebra::DVector;
use nalgebra::{DMatrix, DMatrixView};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covis::{CovisGraph, ImageId};
use crate::numeric::{dot, pca_apply, pca_fit, AdamW, AdamWConfig, NumericError, PcaModel, RngStream};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregatorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("descriptor norm {0:e} too small to normalise")]
    DegenerateDescriptor(f64),
    #[error("no features for image {0}")]
    MissingFeatures(ImageId),
    #[error("not enough {0} pairs to fill a band of size {1} (have {2})")]
    BandUnderflow(Band, usize, usize),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid feature map: {0}")]
    InvalidFeatures(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Positive,
    SoftNegative,
    Random,
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Band::Positive => "positive",
            Band::SoftNegative => "soft-negative",
            Band::Random => "random",
        })
    }
}

/// Dense per-image feature tokens (`T x d_feat`).
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureMap {
    pub image_id: ImageId,
    tokens: DMatrix<f64>,
}

impl VisualFeatureMap {
    pub fn new(image_id: ImageId, tokens: DMatrix<f64>) -> Result<Self, AggregatorError> {
        if tokens.nrows() == 0 {
            return Err(AggregatorError::InvalidFeatures("no tokens".into()));
        }
        if tokens.iter().any(|x| !x.is_finite()) {
            return Err(AggregatorError::InvalidFeatures("non-finite token value".into()));
        }
        Ok(Self { image_id, tokens })
    }

    pub fn tokens(&self) -> &DMatrix<f64> {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Source of per-image features. Implemented for in-memory maps; features
/// computed elsewhere (e.g. by a pretrained backbone) can be loaded from
/// descriptor files into such a map.
pub trait FeatureProvider: Sync {
    fn features(&self, id: ImageId) -> Option<&VisualFeatureMap>;
}

impl FeatureProvider for BTreeMap<ImageId, VisualFeatureMap> {
    fn features(&self, id: ImageId) -> Option<&VisualFeatureMap> {
        self.get(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatorDims {
    pub d_feat: usize,
    pub d_proj: usize,
    pub clusters: usize,
}

impl Default for AggregatorDims {
    fn default() -> Self {
        Self {
            d_feat: 768,
            d_proj: 128,
            clusters: 18,
        }
    }
}

impl AggregatorDims {
    pub fn output_dim(&self) -> usize {
        self.clusters * self.d_proj
    }

    pub fn param_count(&self) -> usize {
        (self.d_feat + 1) * (self.d_proj + self.clusters)
    }

    // Offsets of the four parameter blocks, in declared order.
    fn offsets(&self) -> [usize; 4] {
        let pw = 0;
        let pb = pw + self.d_feat * self.d_proj;
        let sw = pb + self.d_proj;
        let sb = sw + self.d_feat * self.clusters;
        [pw, pb, sw, sb]
    }
}

/// Projection and scoring layers. Parameters live in one flat vector:
/// projection weights (`d_feat x d_proj`, column-major), projection bias,
/// scoring weights (`d_feat x clusters`, column-major), scoring bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorModel {
    dims: AggregatorDims,
    params: Vec<f64>,
}

impl AggregatorModel {
    pub fn from_params(dims: AggregatorDims, params: Vec<f64>) -> Result<Self, AggregatorError> {
        if params.len() != dims.param_count() {
            return Err(AggregatorError::DimensionMismatch {
                expected: dims.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(AggregatorError::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self { dims, params })
    }

    /// Uniform initialisation in `[-1/sqrt(d_feat), 1/sqrt(d_feat)]`.
    pub fn init(dims: AggregatorDims, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (dims.d_feat as f64).sqrt();
        let params = (0..dims.param_count())
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { dims, params }
    }

    pub fn dims(&self) -> AggregatorDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn round_to_f32(&mut self) {
        self.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
    }

    fn proj_weights(&self) -> DMatrixView<'_, f64> {
        let [pw, pb, _, _] = self.dims.offsets();
        DMatrixView::from_slice(&self.params[pw..pb], self.dims.d_feat, self.dims.d_proj)
    }

    fn proj_bias(&self) -> &[f64] {
        let [_, pb, sw, _] = self.dims.offsets();
        &self.params[pb..sw]
    }

    fn score_weights(&self) -> DMatrixView<'_, f64> {
        let [_, _, sw, sb] = self.dims.offsets();
        DMatrixView::from_slice(&self.params[sw..sb], self.dims.d_feat, self.dims.clusters)
    }

    fn score_bias(&self) -> &[f64] {
        let [_, _, _, sb] = self.dims.offsets();
        &self.params[sb..]
    }

    /// Adds `delta` to the scoring bias of every cluster.
    pub fn shift_scores(&mut self, delta: f64) {
        let [_, _, _, sb] = self.dims.offsets();
        self.params[sb..].iter_mut().for_each(|b| *b += delta);
    }
}

struct ForwardCache {
    proj: DMatrix<f64>,
    attn: DMatrix<f64>,
    out: Vec<f64>,
}

fn check_dims(features: &VisualFeatureMap, model: &AggregatorModel) -> Result<(), AggregatorError> {
    if features.dim() != model.dims.d_feat {
        return Err(AggregatorError::DimensionMismatch {
            expected: model.dims.d_feat,
            got: features.dim(),
        });
    }
    Ok(())
}

fn add_row_bias(m: &mut DMatrix<f64>, bias: &[f64]) {
    for (mut col, b) in m.column_iter_mut().zip(bias) {
        col.add_scalar_mut(*b);
    }
}

fn forward(features: &VisualFeatureMap, model: &AggregatorModel) -> ForwardCache {
    let x = &features.tokens;
    let mut proj = x * model.proj_weights();
    add_row_bias(&mut proj, model.proj_bias());
    let mut attn = x * model.score_weights();
    add_row_bias(&mut attn, model.score_bias());
    for mut col in attn.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col.unscale_mut(sum);
    }
    // Row c of attn^T * proj is the attention-weighted token average for cluster c.
    let pooled = attn.tr_mul(&proj);
    let (c, d) = pooled.shape();
    let mut out = Vec::with_capacity(c * d);
    for row in pooled.row_iter() {
        out.extend(row.iter());
    }
    ForwardCache { proj, attn, out }
}

/// Intermediate (pre-PCA, unnormalised) descriptor of length `clusters * d_proj`,
/// laid out cluster by cluster.
pub fn aggregate(features: &VisualFeatureMap, model: &AggregatorModel) -> Result<Vec<f64>, AggregatorError> {
    check_dims(features, model)?;
    Ok(forward(features, model).out)
}

/// Gradients with respect to the projected tokens and the scoring logits of
/// one image, given `d loss / d out`, side by side as a `T x (d_proj + C)`
/// matrix. The weight gradient is `tokens^T` times this matrix.
fn backward_activations(model: &AggregatorModel, cache: &ForwardCache, d_out: &[f64]) -> DMatrix<f64> {
    let dims = model.dims;
    let g = DMatrix::from_row_slice(dims.clusters, dims.d_proj, d_out);
    let d_proj = &cache.attn * &g;
    let mut d_scores = &cache.proj * g.transpose();
    for (mut ds, a) in d_scores.column_iter_mut().zip(cache.attn.column_iter()) {
        let inner = ds.dot(&a);
        ds.add_scalar_mut(-inner);
        ds.component_mul_assign(&a);
    }
    let t = d_proj.nrows();
    let mut out = DMatrix::zeros(t, dims.d_proj + dims.clusters);
    out.columns_mut(0, dims.d_proj).copy_from(&d_proj);
    out.columns_mut(dims.d_proj, dims.clusters).copy_from(&d_scores);
    out
}

/// Adds the parameter gradient for a stack of images: `tokens` and `d_act`
/// hold the images' token rows and activation gradients in the same order.
fn accumulate_weight_gradient(model: &AggregatorModel, tokens: &DMatrix<f64>, d_act: &DMatrix<f64>, grad: &mut [f64]) {
    let dims = model.dims;
    // Explicit transpose so the product goes through the blocked matrix kernel.
    let d_w = tokens.transpose() * d_act;
    let [pw, pb, sw, sb] = dims.offsets();
    for (dst, src) in grad[pw..pb].iter_mut().zip(d_w.columns(0, dims.d_proj).iter()) {
        *dst += src;
    }
    for (dst, col) in grad[pb..sw].iter_mut().zip(d_act.columns(0, dims.d_proj).column_iter()) {
        *dst += col.sum();
    }
    for (dst, src) in grad[sw..sb]
        .iter_mut()
        .zip(d_w.columns(dims.d_proj, dims.clusters).iter())
    {
        *dst += src;
    }
    for (dst, col) in grad[sb..]
        .iter_mut()
        .zip(d_act.columns(dims.d_proj, dims.clusters).column_iter())
    {
        *dst += col.sum();
    }
}

/// Unit-norm global descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub image_id: ImageId,
    values: Vec<f64>,
}

impl GlobalDescriptor {
    pub fn from_unnormalized(image_id: ImageId, mut values: Vec<f64>) -> Result<Self, AggregatorError> {
        let norm = dot(&values, &values).sqrt();
        if !(norm >= 1e-12) {
            return Err(AggregatorError::DegenerateDescriptor(norm));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { image_id, values })
    }

    /// Wraps stored values as-is (e.g. when loading from disk). Fails unless
    /// the norm is within 1e-6 of one.
    pub fn from_stored(image_id: ImageId, values: Vec<f64>) -> Result<Self, AggregatorError> {
        let norm = dot(&values, &values).sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(AggregatorError::DegenerateDescriptor(norm));
        }
        Ok(Self { image_id, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &GlobalDescriptor) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// L2-normalised PCA projection of the intermediate descriptor.
pub fn global_descriptor(
    features: &VisualFeatureMap,
    model: &AggregatorModel,
    pca: &PcaModel,
) -> Result<GlobalDescriptor, AggregatorError> {
    let inter = aggregate(features, model)?;
    let reduced = pca_apply(pca, &inter)?;
    GlobalDescriptor::from_unnormalized(features.image_id, reduced)
}

/// Overlap-weighted contrastive loss for two unit descriptors.
pub fn mgcl_loss(g_i: &[f64], g_j: &[f64], psi: f64, margin: f64) -> f64 {
    mgcl_from_similarity(dot(g_i, g_j), psi, margin).0
}

/// Loss and its derivative with respect to the cosine similarity `s`.
pub fn mgcl_from_similarity(s: f64, psi: f64, margin: f64) -> (f64, f64) {
    let pos = 1.0 - s;
    let neg = (margin + s).max(0.0);
    let loss = psi * pos * pos + (1.0 - psi) * neg * neg;
    let d_s = -2.0 * psi * pos + 2.0 * (1.0 - psi) * neg;
    (loss, d_s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub i: ImageId,
    pub j: ImageId,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchPlan {
    pub positives: Vec<PairSample>,
    pub soft_negatives: Vec<PairSample>,
    pub randoms: Vec<PairSample>,
}

impl BatchPlan {
    pub fn pairs(&self) -> impl Iterator<Item = &PairSample> {
        self.positives.iter().chain(&self.soft_negatives).chain(&self.randoms)
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.soft_negatives.len() + self.randoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Overlap bands used for mining: positives have `psi > positive`, soft
/// negatives have `soft_low <= psi <= soft_high`, randoms are non-adjacent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandThresholds {
    pub positive: f64,
    pub soft_low: f64,
    pub soft_high: f64,
}

impl Default for BandThresholds {
    fn default() -> Self {
        Self {
            positive: 0.5,
            soft_low: 0.25,
            soft_high: 0.5,
        }
    }
}

/// Pre-sorted band membership of a graph, reused across batches.
#[derive(Debug, Clone)]
pub struct BatchMiner {
    positives: Vec<PairSample>,
    soft: Vec<PairSample>,
    randoms: Vec<(ImageId, ImageId)>,
}

impl BatchMiner {
    pub fn new(graph: &CovisGraph, bands: &BandThresholds) -> Self {
        let to_pair = |e: &crate::covis::Edge| PairSample {
            i: e.i,
            j: e.j,
            psi: e.psi,
        };
        Self {
            positives: graph
                .edges()
                .iter()
                .filter(|e| e.psi > bands.positive)
                .map(to_pair)
                .collect(),
            soft: graph
                .edges()
                .iter()
                .filter(|e| e.psi >= bands.soft_low && e.psi <= bands.soft_high)
                .map(to_pair)
                .collect(),
            randoms: graph.non_adjacent_pairs(),
        }
    }

    pub fn band_sizes(&self) -> (usize, usize, usize) {
        (self.positives.len(), self.soft.len(), self.randoms.len())
    }

    pub fn check(&self, b: usize) -> Result<(), AggregatorError> {
        for (band, n) in [
            (Band::Positive, self.positives.len()),
            (Band::SoftNegative, self.soft.len()),
            (Band::Random, self.randoms.len()),
        ] {
            if n < b {
                return Err(AggregatorError::BandUnderflow(band, b, n));
            }
        }
        Ok(())
    }

    /// Samples `b` pairs per band uniformly without replacement.
    pub fn sample(&self, b: usize, rng: &mut RngStream) -> Result<BatchPlan, AggregatorError> {
        self.check(b)?;
        let pick = |pool: &[PairSample], rng: &mut RngStream| -> Vec<PairSample> {
            sample(rng, pool.len(), b).into_iter().map(|i| pool[i]).collect()
        };
        let positives = pick(&self.positives, rng);
        let soft_negatives = pick(&self.soft, rng);
        let randoms = sample(rng, self.randoms.len(), b)
            .into_iter()
            .map(|k| {
                let (i, j) = self.randoms[k];
                PairSample { i, j, psi: 0.0 }
            })
            .collect();
        Ok(BatchPlan {
            positives,
            soft_negatives,
            randoms,
        })
    }
}

/// Mines one three-band batch with the default band thresholds.
pub fn mine_batch(graph: &CovisGraph, b: usize, rng: &mut RngStream) -> Result<BatchPlan, AggregatorError> {
    BatchMiner::new(graph, &BandThresholds::default()).sample(b, rng)
}

/// Mean loss over the batch pairs and its gradient with respect to all model
/// parameters. Descriptors are the L2-normalised intermediate descriptors.
///
/// Each distinct image is forwarded once; per-image gradients are summed in
/// ascending id order, so the result does not depend on scheduling.
pub fn mgcl_batch_gradient<P: FeatureProvider + ?Sized>(
    batch: &BatchPlan,
    features: &P,
    model: &AggregatorModel,
    margin: f64,
) -> Result<(f64, Vec<f64>), AggregatorError> {
    let mut grad = vec![0.0; model.params.len()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let ids: Vec<ImageId> = batch
        .pairs()
        .flat_map(|p| [p.i, p.j])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let maps: Vec<&VisualFeatureMap> = ids
        .iter()
        .map(|&id| features.features(id).ok_or(AggregatorError::MissingFeatures(id)))
        .collect::<Result<_, _>>()?;
    for m in &maps {
        check_dims(m, model)?;
    }

    struct Fwd {
        cache: ForwardCache,
        unit: Vec<f64>,
        norm: f64,
    }
    let fwd: Vec<Fwd> = par::map(&maps, |m| {
        let cache = forward(m, model);
        let norm = dot(&cache.out, &cache.out).sqrt();
        let unit = cache.out.iter().map(|v| v / norm).collect();
        Fwd { cache, unit, norm }
    });
    if let Some(f) = fwd.iter().find(|f| !(f.norm >= 1e-12)) {
        return Err(AggregatorError::DegenerateDescriptor(f.norm));
    }
    let index: BTreeMap<ImageId, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();

    let scale = 1.0 / batch.len() as f64;
    let dim = model.dims.output_dim();
    let mut d_unit = vec![vec![0.0; dim]; ids.len()];
    let mut loss = 0.0;
    for p in batch.pairs() {
        let (a, b) = (index[&p.i], index[&p.j]);
        let s = dot(&fwd[a].unit, &fwd[b].unit);
        let (l, d_s) = mgcl_from_similarity(s, p.psi, margin);
        loss += l * scale;
        let w = d_s * scale;
        for k in 0..dim {
            let (ua, ub) = (fwd[a].unit[k], fwd[b].unit[k]);
            d_unit[a][k] += w * ub;
            d_unit[b][k] += w * ua;
        }
    }

    let work: Vec<usize> = (0..ids.len()).collect();
    let per_image = par::map(&work, |&k| {
        let f = &fwd[k];
        let du = &d_unit[k];
        // Backprop through v / |v|: (du - u (u . du)) / |v|
        let proj = dot(du, &f.unit);
        let d_out: Vec<f64> = du.iter().zip(&f.unit).map(|(d, u)| (d - u * proj) / f.norm).collect();
        backward_activations(model, &f.cache, &d_out)
    });
    // Stack every image's rows so the weight gradient is one product.
    let rows: usize = maps.iter().map(|m| m.token_count()).sum();
    let mut tokens = DMatrix::zeros(rows, model.dims.d_feat);
    let mut d_act = DMatrix::zeros(rows, model.dims.d_proj + model.dims.clusters);
    let mut r = 0;
    for (m, d) in maps.iter().zip(&per_image) {
        let t = m.token_count();
        tokens.rows_mut(r, t).copy_from(&m.tokens);
        d_act.rows_mut(r, t).copy_from(d);
        r += t;
    }
    accumulate_weight_gradient(model, &tokens, &d_act, &mut grad);
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggTrainConfig {
    pub iterations: usize,
    /// Pairs per band; a batch holds `3 * band_size` pairs.
    pub band_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub bands: BandThresholds,
    pub dims: AggregatorDims,
    /// Output dimension of the PCA stage.
    pub descriptor_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AggTrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            iterations: 10_000,
            band_size: 21,
            learning_rate: 3e-3,
            margin: 0.5,
            bands: BandThresholds::default(),
            dims: AggregatorDims::default(),
            descriptor_dim: 256,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            seed: 0,
        }
    }
}

impl AggTrainConfig {
    /// Learning-rate profile for indoor scenes.
    pub fn indoor() -> Self {
        Self {
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AggregatorError> {
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(AggregatorError::InvalidConfig(format!(
                "margin {} outside (0, 1]",
                self.margin
            )));
        }
        let b = &self.bands;
        if !(0.0 <= b.soft_low && b.soft_low < b.soft_high && b.soft_high <= 1.0) {
            return Err(AggregatorError::InvalidConfig(
                "need 0 <= soft_low < soft_high <= 1".into(),
            ));
        }
        if self.band_size == 0 {
            return Err(AggregatorError::InvalidConfig("band_size must be >= 1".into()));
        }
        if self.dims.d_feat == 0 || self.dims.d_proj == 0 || self.dims.clusters == 0 {
            return Err(AggregatorError::InvalidConfig(
                "aggregator dimensions must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAggregator {
    pub model: AggregatorModel,
    pub pca: PcaModel,
    pub loss_trace: Vec<f64>,
}

/// Trains the aggregator on the graph's images, then fits the PCA stage on the
/// intermediate descriptors of every graph node. Parameters are rounded to
/// `f32` at the end so that saved models reload bit-identically.
pub fn train_aggregator<P: FeatureProvider + ?Sized>(
    features: &P,
    graph: &CovisGraph,
    cfg: &AggTrainConfig,
) -> Result<TrainedAggregator, AggregatorError> {
    cfg.validate()?;
    let miner = BatchMiner::new(graph, &cfg.bands);
    miner.check(cfg.band_size)?;
    for &id in graph.nodes() {
        if features.features(id).is_none() {
            return Err(AggregatorError::MissingFeatures(id));
        }
    }
    let root = RngStream::new(cfg.seed, "aggregator");
    let mut model = AggregatorModel::init(cfg.dims, &mut root.substream("init"));
    let mut opt = AdamW::new(cfg.adamw(), model.params.len());
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = miner.sample(cfg.band_size, &mut root.substream_indexed("batch", it as u64))?;
        let (loss, grad) = mgcl_batch_gradient(&batch, features, &model, cfg.margin)?;
        if !loss.is_finite() {
            return Err(AggregatorError::NonFiniteLoss { iteration: it });
        }
        opt.step(&mut model.params, &grad).map_err(|e| match e {
            NumericError::NonFiniteGradient(_) => AggregatorError::NonFiniteLoss { iteration: it },
            other => other.into(),
        })?;
        loss_trace.push(loss);
        if it % 500 == 0 {
            log::debug!("aggregator iteration {it}: loss {loss:.5}");
        }
    }
    model.round_to_f32();

    let maps: Vec<&VisualFeatureMap> = graph
        .nodes()
        .iter()
        .map(|&id| features.features(id).expect("checked above"))
        .collect();
    let inter = par::map(&maps, |m| forward(m, &model).out);
    let data = DMatrix::from_fn(inter.len(), cfg.dims.output_dim(), |r, c| inter[r][c]);
    let mut pca = pca_fit(&data, cfg.descriptor_dim)?;
    pca.round_to_f32();
    Ok(TrainedAggregator { model, pca, loss_trace })
}

/// Global descriptors for every image in `ids`, in the same order.
pub fn describe_all<P: FeatureProvider + ?Sized>(
    features: &P,
    ids: &[ImageId],
    model: &AggregatorModel,
    pca: &PcaModel,
) -> Result<Vec<GlobalDescriptor>, AggregatorError> {
    par::map(ids, |&id| {
        let f = features.features(id).ok_or(AggregatorError::MissingFeatures(id))?;
        global_descriptor(f, model, pca)
    })
    .into_iter()
    .collect()
}
