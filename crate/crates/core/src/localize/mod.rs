//! Test-time localization: retrieval, per-hypothesis scene-coordinate
//! prediction, robust PnP and hypothesis selection.

mod index;
mod pnp;

pub use index::{
    build_index, retrieve_topk, retrieve_topk_with, PqParams, ProductQuantizer, RetrievalIndex, SearchMode,
    PQ_MAX_CENTROIDS,
};
pub use pnp::{solve_pnp_ransac, Correspondence2D3D, PnpSolution, RansacConfig};

use thiserror::Error;

use crate::aggregator::{global_descriptor, AggregatorError, AggregatorModel, VisualFeatureMap};
use crate::covis::ImageId;
use crate::geometry::{CameraIntrinsics, Keypoint, Pose};
use crate::numeric::{NumericError, PcaModel};
use crate::par;
use crate::scr::{predict_batch, ScrError, ScrModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizeError {
    #[error("no descriptors to index")]
    EmptyInput,
    #[error("descriptor dimension {dim} is not divisible into {m} sub-blocks")]
    IndivisibleDimension { dim: usize, m: usize },
    #[error("k = {k} exceeds index size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("PnP needs at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("non-finite correspondence")]
    NonFiniteInput,
    #[error("no pose with enough inliers")]
    NoPose,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Scr(#[from] ScrError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Everything observed in a query image.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryObservation {
    pub features: VisualFeatureMap,
    pub keypoints: Vec<Keypoint>,
    /// Uncompressed local descriptors, one per keypoint.
    pub local_descriptors: Vec<Vec<f64>>,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalizationModels<'a> {
    pub aggregator: &'a AggregatorModel,
    pub pca: &'a PcaModel,
    pub scr: &'a ScrModel,
    /// Feed zeros instead of global descriptors (for regressors trained that way).
    pub zero_global: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisDiagnostic {
    /// `None` for the query's own descriptor.
    pub source: Option<ImageId>,
    pub inlier_count: usize,
    pub mean_inlier_residual: f64,
    pub solved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub pose: Pose,
    pub inlier_count: usize,
    pub mean_inlier_residual: f64,
    /// Index into `diagnostics`; 0 is the query's own descriptor.
    pub hypothesis: usize,
    pub diagnostics: Vec<HypothesisDiagnostic>,
}

/// Source image (`None` for the query itself) and conditioning vector.
pub type Hypothesis = (Option<ImageId>, Vec<f64>);

/// Conditioning vectors for a query: its own descriptor followed by those of
/// the top `k - 1` retrieved training images.
pub fn hypothesis_set(
    own: &crate::aggregator::GlobalDescriptor,
    index: &RetrievalIndex,
    k: usize,
) -> Result<Vec<Hypothesis>, LocalizeError> {
    if k == 0 {
        return Err(LocalizeError::InvalidConfig("k must be >= 1".into()));
    }
    let mut out = vec![(None, own.values().to_vec())];
    if k > 1 {
        for id in retrieve_topk(index, own, k - 1)? {
            let d = index.get(id).expect("retrieved id is indexed");
            out.push((Some(id), d.values().to_vec()));
        }
    }
    Ok(out)
}

/// Localizes one query with `k` conditioning hypotheses and keeps the pose with
/// the most inliers (ties: lower mean residual, then lower hypothesis index).
pub fn localize_query(
    query: &QueryObservation,
    models: &LocalizationModels<'_>,
    index: &RetrievalIndex,
    k: usize,
    cfg: &RansacConfig,
) -> Result<LocalizationResult, LocalizeError> {
    cfg.validate()?;
    if query.keypoints.len() != query.local_descriptors.len() {
        return Err(LocalizeError::DimensionMismatch {
            expected: query.keypoints.len(),
            got: query.local_descriptors.len(),
        });
    }
    let own = global_descriptor(&query.features, models.aggregator, models.pca)?;
    let hypotheses = if models.zero_global {
        vec![(None, vec![0.0; models.scr.architecture().global_dim])]
    } else {
        hypothesis_set(&own, index, k)?
    };
    let locals: Vec<Vec<f64>> = query
        .local_descriptors
        .iter()
        .map(|l| models.scr.compress_local(l))
        .collect::<Result<_, _>>()?;

    let outcomes = par::map(&hypotheses, |(_, g)| -> Result<Option<PnpSolution>, LocalizeError> {
        let coords = predict_batch(&locals, g, models.scr)?;
        let corr: Vec<Correspondence2D3D> = query
            .keypoints
            .iter()
            .zip(coords)
            .map(|(&keypoint, coordinate)| Correspondence2D3D { keypoint, coordinate })
            .collect();
        match solve_pnp_ransac(&corr, &query.intrinsics, cfg) {
            Ok(s) => Ok(Some(s)),
            Err(LocalizeError::NoPose) | Err(LocalizeError::TooFewCorrespondences(_)) => Ok(None),
            Err(e) => Err(e),
        }
    });

    let mut diagnostics = Vec::with_capacity(hypotheses.len());
    let mut best: Option<(usize, PnpSolution)> = None;
    for (h, ((source, _), outcome)) in hypotheses.iter().zip(outcomes).enumerate() {
        let sol = outcome?;
        diagnostics.push(HypothesisDiagnostic {
            source: *source,
            inlier_count: sol.map_or(0, |s| s.inlier_count),
            mean_inlier_residual: sol.map_or(f64::INFINITY, |s| s.mean_inlier_residual),
            solved: sol.is_some(),
        });
        if let Some(s) = sol {
            let wins = best.as_ref().is_none_or(|(_, b)| {
                s.inlier_count > b.inlier_count
                    || (s.inlier_count == b.inlier_count && s.mean_inlier_residual < b.mean_inlier_residual)
            });
            if wins {
                best = Some((h, s));
            }
        }
    }
    let (hypothesis, s) = best.ok_or(LocalizeError::NoPose)?;
    Ok(LocalizationResult {
        pose: s.pose,
        inlier_count: s.inlier_count,
        mean_inlier_residual: s.mean_inlier_residual,
        hypothesis,
        diagnostics,
    })
}
