//! End-to-end chain over a synthetic scene: covisibility graph, aggregator,
//! retrieval index, local PCA, scene-coordinate regressor and localization.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::aggregator::{
    describe_all, train_aggregator, AggregatorError, GlobalDescriptor, TrainedAggregator, VisualFeatureMap,
};
use crate::config::{ConfigError, PipelineConfig};
use crate::covis::{build_graph, corrupt_graph, CovisError, CovisGraph, ImageId, OverlapConfig};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::localize::{
    build_index, localize_query, LocalizationModels, LocalizationResult, LocalizeError, QueryObservation,
    RetrievalIndex,
};
use crate::numeric::{pca_apply, pca_fit, NumericError, PcaModel, RngStream};
use crate::par;
use crate::scr::{fill_buffer, train_scr, ScrDataset, ScrError, ScrImage, ScrModel, TrainedScr};
use crate::synthgen::{
    generate_scene, render_observations, RenderedImage, SceneCamera, SceneConfig, SynthError, SyntheticScene,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Covis(#[from] CovisError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Scr(#[from] ScrError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    /// Whether the failure comes from the optimisation or linear algebra rather
    /// than from malformed inputs.
    pub fn is_numerical(&self) -> bool {
        fn numeric(e: &NumericError) -> bool {
            matches!(e, NumericError::DegenerateData(..) | NumericError::NonFiniteGradient(_))
        }
        match self {
            Self::Numeric(e) => numeric(e),
            Self::Aggregator(AggregatorError::NonFiniteLoss { .. }) => true,
            Self::Aggregator(AggregatorError::Numeric(e)) => numeric(e),
            Self::Scr(ScrError::NonFiniteLoss { .. }) => true,
            Self::Scr(ScrError::Numeric(e)) => numeric(e),
            Self::Localize(LocalizeError::Numeric(e)) => numeric(e),
            _ => false,
        }
    }
}

/// Cameras with their rendered inputs (same order), plus the ids of images
/// that observe an aliased landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<SceneCamera>,
    pub images: Vec<RenderedImage>,
    pub aliased: Vec<ImageId>,
}

impl Dataset {
    pub fn from_scene(scene: &SyntheticScene, images: Vec<RenderedImage>) -> Self {
        Self {
            cameras: scene.cameras.clone(),
            images,
            aliased: scene.aliased_images(),
        }
    }

    pub fn train_cameras(&self) -> impl Iterator<Item = &SceneCamera> {
        self.cameras.iter().filter(|c| !c.is_query)
    }

    pub fn query_cameras(&self) -> impl Iterator<Item = &SceneCamera> {
        self.cameras.iter().filter(|c| c.is_query)
    }

    pub fn camera(&self, id: ImageId) -> Option<&SceneCamera> {
        self.cameras.iter().find(|c| c.image_id == id)
    }

    pub fn train_ids(&self) -> Vec<ImageId> {
        self.train_cameras().map(|c| c.image_id).collect()
    }

    pub fn query_ids(&self) -> Vec<ImageId> {
        self.query_cameras().map(|c| c.image_id).collect()
    }

    /// Query images that observe an aliased landmark.
    pub fn aliased_queries(&self) -> Vec<ImageId> {
        self.query_ids()
            .into_iter()
            .filter(|id| self.aliased.contains(id))
            .collect()
    }

    pub fn image(&self, id: ImageId) -> Option<&RenderedImage> {
        self.images.iter().find(|i| i.image_id == id)
    }

    pub fn feature_maps(&self) -> BTreeMap<ImageId, VisualFeatureMap> {
        self.images.iter().map(|i| (i.image_id, i.features.clone())).collect()
    }

    pub fn cameras(&self, ids: &[ImageId]) -> Vec<(ImageId, Pose, CameraIntrinsics)> {
        ids.iter()
            .filter_map(|id| self.camera(*id))
            .map(|c| (c.image_id, c.pose, c.intrinsics))
            .collect()
    }
}

pub fn synthesize(cfg: &SceneConfig) -> Result<Dataset, PipelineError> {
    let scene = generate_scene(cfg)?;
    let images = render_observations(&scene, cfg, &RngStream::new(cfg.seed, "render"));
    Ok(Dataset::from_scene(&scene, images))
}

/// Covisibility graph over the given cameras.
pub fn covis_stage(
    cameras: &[(ImageId, Pose, CameraIntrinsics)],
    cfg: &OverlapConfig,
    seed: u64,
) -> Result<CovisGraph, PipelineError> {
    Ok(build_graph(cameras, cfg, &RngStream::new(seed, "covis"))?)
}

/// Adds false edges to a graph (no-op for a zero fraction).
pub fn corrupt_stage(graph: &CovisGraph, fraction: f64, seed: u64) -> Result<CovisGraph, PipelineError> {
    Ok(corrupt_graph(graph, fraction, &mut RngStream::new(seed, "corrupt"))?)
}

/// Trained aggregator plus the retrieval index over the training images.
#[derive(Debug, Clone)]
pub struct AggregatorStage {
    pub aggregator: TrainedAggregator,
    pub train_descriptors: Vec<GlobalDescriptor>,
    pub index: RetrievalIndex,
}

pub fn aggregator_stage(
    features: &BTreeMap<ImageId, VisualFeatureMap>,
    graph: &CovisGraph,
    cfg: &PipelineConfig,
) -> Result<AggregatorStage, PipelineError> {
    let aggregator = train_aggregator(features, graph, &cfg.aggregator)?;
    let train_descriptors = describe_all(features, graph.nodes(), &aggregator.model, &aggregator.pca)?;
    let index = index_stage(train_descriptors.clone(), cfg)?;
    Ok(AggregatorStage {
        aggregator,
        train_descriptors,
        index,
    })
}

pub fn index_stage(descriptors: Vec<GlobalDescriptor>, cfg: &PipelineConfig) -> Result<RetrievalIndex, PipelineError> {
    let pq = cfg.retrieval.use_pq.then_some(cfg.retrieval.pq);
    Ok(build_index(descriptors, pq)?)
}

/// PCA for raw local descriptors, fitted on every training observation.
pub fn fit_local_pca(images: &[&RenderedImage], out_dim: usize) -> Result<PcaModel, PipelineError> {
    let rows: Vec<&Vec<f64>> = images.iter().flat_map(|i| i.local_descriptors.iter()).collect();
    let dim = rows.first().map(|r| r.len()).ok_or(NumericError::EmptyInput)?;
    let data = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
    let mut pca = pca_fit(&data, out_dim)?;
    pca.round_to_f32();
    Ok(pca)
}

/// Regression dataset: each image conditioned on its own global descriptor
/// (or zeros) with PCA-compressed local descriptors and ground truth. Graph
/// neighbors among `images` become augmentation candidates.
pub fn scr_dataset(
    images: &[&RenderedImage],
    globals: &BTreeMap<ImageId, Vec<f64>>,
    local_pca: &PcaModel,
    graph: Option<&CovisGraph>,
    zero_global: bool,
) -> Result<ScrDataset, PipelineError> {
    let position: BTreeMap<ImageId, u32> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.image_id, i as u32))
        .collect();
    let images = par::map(images, |img| -> Result<ScrImage, PipelineError> {
        let g = globals
            .get(&img.image_id)
            .ok_or_else(|| PipelineError::Data(format!("no global descriptor for image {}", img.image_id)))?;
        let locals = img
            .local_descriptors
            .iter()
            .map(|l| pca_apply(local_pca, l))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScrImage {
            image_id: img.image_id,
            global: if zero_global { vec![0.0; g.len()] } else { g.clone() },
            keypoints: img.keypoints.clone(),
            locals,
            gt: img.gt.iter().map(|g| Some(*g)).collect(),
            neighbors: graph.map_or_else(Vec::new, |g| {
                g.neighbors(img.image_id)
                    .iter()
                    .filter_map(|(n, _)| position.get(n).copied())
                    .collect()
            }),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(ScrDataset { images })
}

pub fn scr_stage(
    dataset: &ScrDataset,
    cameras: &BTreeMap<ImageId, (Pose, CameraIntrinsics)>,
    local_pca: &PcaModel,
    cfg: &PipelineConfig,
) -> Result<TrainedScr, PipelineError> {
    let mut rng = RngStream::new(cfg.scr.seed, "buffer");
    let buffer = fill_buffer(dataset, &cfg.scr, &mut rng)?;
    let mut trained = train_scr(&buffer, cameras, &cfg.scr)?;
    trained.model.set_local_pca(Some(local_pca.clone()));
    Ok(trained)
}

/// Outcome for one query: `None` when no pose could be found.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub image_id: ImageId,
    pub result: Option<LocalizationResult>,
}

pub fn query_observation(img: &RenderedImage, intrinsics: CameraIntrinsics) -> QueryObservation {
    QueryObservation {
        features: img.features.clone(),
        keypoints: img.keypoints.clone(),
        local_descriptors: img.local_descriptors.clone(),
        intrinsics,
    }
}

/// Localizes every query in order. `NoPose` becomes `None`; other errors abort.
pub fn localize_stage(
    queries: &[(QueryObservation, ImageId)],
    models: &LocalizationModels<'_>,
    index: &RetrievalIndex,
    cfg: &PipelineConfig,
) -> Result<Vec<QueryOutcome>, PipelineError> {
    let mut out = Vec::with_capacity(queries.len());
    for (q, id) in queries {
        let result = match localize_query(q, models, index, cfg.retrieval.k, &cfg.ransac) {
            Ok(r) => Some(r),
            Err(LocalizeError::NoPose) => None,
            Err(e) => return Err(e.into()),
        };
        out.push(QueryOutcome { image_id: *id, result });
    }
    Ok(out)
}

/// Which variant of the chain to run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Fraction of false edges added to the covisibility graph.
    pub corrupt_fraction: f64,
    /// Train and query the regressor with a zeroed global input.
    pub zero_global: bool,
}

/// Every artefact of one run.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub graph: CovisGraph,
    pub aggregator: AggregatorStage,
    pub scr: TrainedScr,
    pub outcomes: Vec<QueryOutcome>,
}

impl BenchmarkRun {
    pub fn scr_model(&self) -> &ScrModel {
        &self.scr.model
    }
}

/// Fits the local PCA on the training images and trains the regressor
/// conditioned on their global descriptors. The PCA is embedded in the model.
/// Without a graph there is no graph augmentation.
pub fn train_regressor(
    data: &Dataset,
    train_descriptors: &[GlobalDescriptor],
    graph: Option<&CovisGraph>,
    cfg: &PipelineConfig,
    zero_global: bool,
) -> Result<TrainedScr, PipelineError> {
    let train_ids = data.train_ids();
    let train_imgs: Vec<&RenderedImage> = train_ids.iter().filter_map(|id| data.image(*id)).collect();
    let local_pca = fit_local_pca(&train_imgs, cfg.features.local_dim)?;
    let globals: BTreeMap<ImageId, Vec<f64>> = train_descriptors
        .iter()
        .map(|d| (d.image_id, d.values().to_vec()))
        .collect();
    let ds = scr_dataset(&train_imgs, &globals, &local_pca, graph, zero_global)?;
    let cameras: BTreeMap<ImageId, (Pose, CameraIntrinsics)> = data
        .cameras(&train_ids)
        .into_iter()
        .map(|(id, p, k)| (id, (p, k)))
        .collect();
    scr_stage(&ds, &cameras, &local_pca, cfg)
}

/// Localizes every query camera of `data` in order.
pub fn localize_queries(
    data: &Dataset,
    models: &LocalizationModels<'_>,
    index: &RetrievalIndex,
    cfg: &PipelineConfig,
) -> Result<Vec<QueryOutcome>, PipelineError> {
    let queries: Vec<(QueryObservation, ImageId)> = data
        .query_cameras()
        .map(|c| {
            let img = data
                .image(c.image_id)
                .ok_or_else(|| PipelineError::Data(format!("no observations for query {}", c.image_id)))?;
            Ok((query_observation(img, c.intrinsics), c.image_id))
        })
        .collect::<Result<_, PipelineError>>()?;
    localize_stage(&queries, models, index, cfg)
}

/// Regressor training and localization on top of an existing aggregator stage.
pub fn regress_and_localize(
    data: &Dataset,
    graph: &CovisGraph,
    agg: &AggregatorStage,
    cfg: &PipelineConfig,
    zero_global: bool,
) -> Result<(TrainedScr, Vec<QueryOutcome>), PipelineError> {
    let scr = train_regressor(data, &agg.train_descriptors, Some(graph), cfg, zero_global)?;
    let models = LocalizationModels {
        aggregator: &agg.aggregator.model,
        pca: &agg.aggregator.pca,
        scr: &scr.model,
        zero_global,
    };
    let outcomes = localize_queries(data, &models, &agg.index, cfg)?;
    Ok((scr, outcomes))
}

/// The full chain: graph, aggregator, index, local PCA, regressor, localization.
pub fn run_benchmark(data: &Dataset, cfg: &PipelineConfig, opts: RunOptions) -> Result<BenchmarkRun, PipelineError> {
    cfg.validate()?;
    let train_ids = data.train_ids();
    let mut graph = covis_stage(&data.cameras(&train_ids), &cfg.covis, cfg.scene.seed)?;
    if opts.corrupt_fraction > 0.0 {
        graph = corrupt_stage(&graph, opts.corrupt_fraction, cfg.scene.seed)?;
    }
    let features = data.feature_maps();
    let agg = aggregator_stage(&features, &graph, cfg)?;
    let (scr, outcomes) = regress_and_localize(data, &graph, &agg, cfg, opts.zero_global)?;
    Ok(BenchmarkRun {
        graph,
        aggregator: agg,
        scr,
        outcomes,
    })
}
