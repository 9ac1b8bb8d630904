//! Pose-based overlap estimation and covisibility graphs.
//!
//! The overlap from image `i` to image `j` is the fraction of random
//! (pixel, depth) hypotheses in `i` whose back-projected 3-D points land inside
//! image `j` in front of its camera. The stored score is the mean of the two
//! directions, which makes it exactly symmetric.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, unproject, CameraIntrinsics, Keypoint, Pose};
use crate::numeric::RngStream;
use crate::par;

/// Image identifier.
pub type ImageId = u32;

/// Pixel slack allowed by the in-bounds test, absorbing round-off of the
/// unproject/project round trip.
const BOUNDS_SLACK: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovisError {
    #[error("duplicate image id {0}")]
    DuplicateImageId(ImageId),
    #[error("need at least two images, got {0}")]
    TooFewImages(usize),
    #[error("graph saturated: need {needed} non-adjacent pairs, only {available} remain")]
    GraphSaturated { needed: usize, available: usize },
    #[error("invalid overlap config: {0}")]
    InvalidConfig(String),
    #[error("invalid edge ({0}, {1}): {2}")]
    InvalidEdge(ImageId, ImageId, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlapConfig {
    pub samples_per_image: usize,
    pub depths_per_pixel: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub edge_threshold: f64,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        Self {
            samples_per_image: 100,
            depths_per_pixel: 10,
            depth_min: 0.5,
            depth_max: 20.0,
            edge_threshold: 0.2,
        }
    }
}

impl OverlapConfig {
    pub fn validate(&self) -> Result<(), CovisError> {
        if self.samples_per_image == 0 || self.depths_per_pixel == 0 {
            return Err(CovisError::InvalidConfig("sample counts must be >= 1".into()));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(CovisError::InvalidConfig(format!(
                "need 0 < depth_min < depth_max, got [{}, {}]",
                self.depth_min, self.depth_max
            )));
        }
        if !(0.0..=1.0).contains(&self.edge_threshold) {
            return Err(CovisError::InvalidConfig(format!(
                "edge_threshold {} outside [0, 1]",
                self.edge_threshold
            )));
        }
        Ok(())
    }
}

/// One hypothesis in image-relative units: pixel = (u_frac * width, v_frac * height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapSample {
    pub u_frac: f64,
    pub v_frac: f64,
    pub depth: f64,
}

/// Draws `samples_per_image` pixels, each with `depths_per_pixel` depths
/// uniform in `[depth_min, depth_max]`.
pub fn draw_samples(cfg: &OverlapConfig, rng: &mut RngStream) -> Vec<OverlapSample> {
    let mut out = Vec::with_capacity(cfg.samples_per_image * cfg.depths_per_pixel);
    for _ in 0..cfg.samples_per_image {
        let u_frac: f64 = rng.random();
        let v_frac: f64 = rng.random();
        for _ in 0..cfg.depths_per_pixel {
            let depth = rng.random_range(cfg.depth_min..=cfg.depth_max);
            out.push(OverlapSample { u_frac, v_frac, depth });
        }
    }
    out
}

/// Fraction of `samples`, placed in image `i`, that are visible in image `j`.
pub fn directional_overlap(
    pose_i: &Pose,
    k_i: &CameraIntrinsics,
    pose_j: &Pose,
    k_j: &CameraIntrinsics,
    samples: &[OverlapSample],
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| {
            let px = Keypoint::new(s.u_frac * k_i.width as f64, s.v_frac * k_i.height as f64);
            let Ok(x) = unproject(px, s.depth, k_i, pose_i) else {
                return false;
            };
            match project(&x, pose_j, k_j) {
                Ok(p) => k_j.contains(p, BOUNDS_SLACK),
                Err(_) => false,
            }
        })
        .count();
    hits as f64 / samples.len() as f64
}

/// Symmetrised overlap score in `[0, 1]`.
///
/// The same relative sample set is used in both directions, so the result
/// does not depend on argument order.
pub fn overlap_score(
    pose_i: &Pose,
    k_i: &CameraIntrinsics,
    pose_j: &Pose,
    k_j: &CameraIntrinsics,
    cfg: &OverlapConfig,
    rng: &mut RngStream,
) -> f64 {
    let samples = draw_samples(cfg, rng);
    let a = directional_overlap(pose_i, k_i, pose_j, k_j, &samples);
    let b = directional_overlap(pose_j, k_j, pose_i, k_i, &samples);
    0.5 * (a + b)
}

/// Rounds a score to the 6 decimals used by the graph file format.
pub fn quantize_psi(psi: f64) -> f64 {
    (psi * 1e6).round() / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: ImageId,
    pub j: ImageId,
    pub psi: f64,
}

/// Undirected weighted graph over image ids. Edges are stored with `i < j`
/// and sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct CovisGraph {
    nodes: Vec<ImageId>,
    edges: Vec<Edge>,
    lookup: BTreeMap<(ImageId, ImageId), usize>,
}

fn ordered(a: ImageId, b: ImageId) -> (ImageId, ImageId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl CovisGraph {
    pub fn new(nodes: Vec<ImageId>, edges: Vec<Edge>) -> Result<Self, CovisError> {
        let node_set: BTreeSet<ImageId> = nodes.iter().copied().collect();
        if node_set.len() != nodes.len() {
            let mut seen = BTreeSet::new();
            let dup = nodes.iter().find(|n| !seen.insert(**n)).copied().unwrap_or(0);
            return Err(CovisError::DuplicateImageId(dup));
        }
        let mut normalized = Vec::with_capacity(edges.len());
        let mut seen = BTreeSet::new();
        for e in edges {
            if e.i == e.j {
                return Err(CovisError::InvalidEdge(e.i, e.j, "self edge".into()));
            }
            if !(0.0..=1.0).contains(&e.psi) {
                return Err(CovisError::InvalidEdge(
                    e.i,
                    e.j,
                    format!("psi {} outside [0, 1]", e.psi),
                ));
            }
            if !node_set.contains(&e.i) || !node_set.contains(&e.j) {
                return Err(CovisError::InvalidEdge(e.i, e.j, "unknown node".into()));
            }
            let (i, j) = ordered(e.i, e.j);
            if !seen.insert((i, j)) {
                return Err(CovisError::InvalidEdge(i, j, "duplicate edge".into()));
            }
            normalized.push(Edge { i, j, psi: e.psi });
        }
        normalized.sort_by_key(|e| (e.i, e.j));
        let mut nodes = nodes;
        nodes.sort_unstable();
        let lookup = normalized
            .iter()
            .enumerate()
            .map(|(idx, e)| ((e.i, e.j), idx))
            .collect();
        Ok(Self {
            nodes,
            edges: normalized,
            lookup,
        })
    }

    pub fn nodes(&self) -> &[ImageId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn psi(&self, a: ImageId, b: ImageId) -> Option<f64> {
        self.lookup.get(&ordered(a, b)).map(|&i| self.edges[i].psi)
    }

    pub fn is_adjacent(&self, a: ImageId, b: ImageId) -> bool {
        self.lookup.contains_key(&ordered(a, b))
    }

    /// All unordered node pairs without an edge, sorted.
    pub fn non_adjacent_pairs(&self) -> Vec<(ImageId, ImageId)> {
        let mut out = Vec::new();
        for (a, &i) in self.nodes.iter().enumerate() {
            for &j in &self.nodes[a + 1..] {
                if !self.lookup.contains_key(&(i, j)) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, id: ImageId) -> Vec<(ImageId, f64)> {
        self.edges
            .iter()
            .filter_map(|e| {
                if e.i == id {
                    Some((e.j, e.psi))
                } else if e.j == id {
                    Some((e.i, e.psi))
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Evaluates every unordered pair and keeps those with `psi >= edge_threshold`.
///
/// Each pair draws from its own stream keyed by `(min id, max id)`, so the
/// result is independent of input order and of parallel scheduling.
pub fn build_graph(
    cameras: &[(ImageId, Pose, CameraIntrinsics)],
    cfg: &OverlapConfig,
    rng: &RngStream,
) -> Result<CovisGraph, CovisError> {
    cfg.validate()?;
    if cameras.len() < 2 {
        return Err(CovisError::TooFewImages(cameras.len()));
    }
    let mut sorted: Vec<&(ImageId, Pose, CameraIntrinsics)> = cameras.iter().collect();
    sorted.sort_by_key(|c| c.0);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CovisError::DuplicateImageId(w[0].0));
    }
    let mut pairs = Vec::with_capacity(sorted.len() * (sorted.len() - 1) / 2);
    for a in 0..sorted.len() {
        for b in a + 1..sorted.len() {
            pairs.push((a, b));
        }
    }
    let scores = par::map(&pairs, |&(a, b)| {
        let (ia, pa, ka) = sorted[a];
        let (ib, pb, kb) = sorted[b];
        let mut stream = rng.substream(&format!("pair/{ia}/{ib}"));
        overlap_score(pa, ka, pb, kb, cfg, &mut stream)
    });
    let edges = pairs
        .iter()
        .zip(scores)
        .filter(|(_, psi)| *psi >= cfg.edge_threshold)
        .map(|(&(a, b), psi)| Edge {
            i: sorted[a].0,
            j: sorted[b].0,
            psi: quantize_psi(psi),
        })
        .collect();
    CovisGraph::new(sorted.iter().map(|c| c.0).collect(), edges)
}

/// Adds `ceil(fraction * |E|)` false edges between uniformly chosen non-adjacent
/// pairs, each with psi uniform in `[0.5, 1.0]`. Existing edges are untouched.
pub fn corrupt_graph(
    graph: &CovisGraph,
    false_edge_fraction: f64,
    rng: &mut RngStream,
) -> Result<CovisGraph, CovisError> {
    if !(0.0..=1.0).contains(&false_edge_fraction) {
        return Err(CovisError::InvalidConfig(format!(
            "false_edge_fraction {false_edge_fraction} outside [0, 1]"
        )));
    }
    let needed = (false_edge_fraction * graph.edges.len() as f64).ceil() as usize;
    if needed == 0 {
        return Ok(graph.clone());
    }
    let candidates = graph.non_adjacent_pairs();
    if candidates.len() < needed {
        return Err(CovisError::GraphSaturated {
            needed,
            available: candidates.len(),
        });
    }
    let mut picked: Vec<usize> = sample(rng, candidates.len(), needed).into_vec();
    picked.sort_unstable();
    let mut edges = graph.edges.clone();
    for idx in picked {
        let (i, j) = candidates[idx];
        let psi = quantize_psi(rng.random_range(0.5..=1.0));
        edges.push(Edge { i, j, psi });
    }
    CovisGraph::new(graph.nodes.clone(), edges)
}
