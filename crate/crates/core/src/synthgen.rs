//! Deterministic synthetic scenes with controllable perceptual aliasing.
//!
//! Landmarks sit on walls of separated regions laid out along the x axis;
//! cameras move along a smooth path in front of them looking down +z.
//! Aliased landmark pairs share their appearance signature and their layout
//! relative to the region, so a regressor that only sees local appearance
//! cannot tell the two regions apart.

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::VisualFeatureMap;
use crate::covis::ImageId;
use crate::geometry::{project, CameraIntrinsics, Keypoint, Pose, SceneCoordinate};
use crate::numeric::{normalize_in_place, RngStream};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("infeasible scene config: {0}")]
    InfeasibleConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub landmark_count: usize,
    pub region_count: usize,
    /// Fraction of landmarks that belong to a signature-sharing pair.
    pub aliased_fraction: f64,
    pub camera_count: usize,
    /// Camera `i` is a query when `i % query_stride == query_offset`.
    pub query_stride: usize,
    pub query_offset: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    pub sigma_local: f64,
    pub sigma_feat: f64,
    /// Optional Gaussian pixel noise on rendered keypoints.
    pub pixel_noise: f64,
    pub tokens: usize,
    pub local_dim: usize,
    pub feat_dim: usize,
    pub region_width: f64,
    pub region_gap: f64,
    pub wall_depth: f64,
    pub wall_height: f64,
    pub depth_jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            landmark_count: 100,
            region_count: 5,
            aliased_fraction: 0.2,
            camera_count: 80,
            query_stride: 4,
            query_offset: 2,
            image_width: 640,
            image_height: 480,
            focal: 500.0,
            sigma_local: 0.001,
            sigma_feat: 0.1,
            pixel_noise: 0.0,
            tokens: 16,
            local_dim: 256,
            feat_dim: 768,
            region_width: 12.0,
            region_gap: 2.0,
            wall_depth: 10.0,
            wall_height: 6.0,
            depth_jitter: 1.0,
            seed: 20_240_917,
        }
    }
}

impl SceneConfig {
    /// The standard benchmark scene.
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn aliased_pair_count(&self) -> usize {
        (self.aliased_fraction * self.landmark_count as f64 / 2.0).round() as usize
    }

    fn pitch(&self) -> f64 {
        self.region_width + self.region_gap
    }

    fn region_sizes(&self) -> Vec<usize> {
        let base = self.landmark_count / self.region_count;
        let extra = self.landmark_count % self.region_count;
        (0..self.region_count).map(|r| base + usize::from(r < extra)).collect()
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SynthError> {
        CameraIntrinsics::centered(self.focal, self.image_width, self.image_height)
            .map_err(|e| SynthError::InfeasibleConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InfeasibleConfig(m.into()));
        if self.landmark_count == 0 || self.region_count == 0 || self.camera_count == 0 {
            return bad("counts must be >= 1");
        }
        if self.region_count > self.landmark_count {
            return bad("more regions than landmarks");
        }
        if !(0.0..=1.0).contains(&self.aliased_fraction) {
            return bad("aliased_fraction must lie in [0, 1]");
        }
        if self.tokens == 0 || self.local_dim == 0 || self.feat_dim == 0 {
            return bad("tokens and descriptor dims must be >= 1");
        }
        if self.query_stride == 0 || self.query_offset >= self.query_stride {
            return bad("query_offset must be below query_stride");
        }
        for (name, v) in [
            ("sigma_local", self.sigma_local),
            ("sigma_feat", self.sigma_feat),
            ("pixel_noise", self.pixel_noise),
            ("depth_jitter", self.depth_jitter),
            ("region_gap", self.region_gap),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.region_width > 0.0 && self.wall_height > 0.0 && self.wall_depth > self.depth_jitter + 1.0) {
            return bad("region geometry must be positive and walls in front of the cameras");
        }
        self.intrinsics()?;
        alias_plan(self).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u32,
    pub position: SceneCoordinate,
    /// Unit-norm appearance signature of length `local_dim`.
    pub signature: Vec<f64>,
    pub region: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCamera {
    pub image_id: ImageId,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub is_query: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub landmark: u32,
    pub keypoint: Keypoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub landmarks: Vec<Landmark>,
    /// One `feat_dim` signature per region.
    pub backgrounds: Vec<Vec<f64>>,
    pub cameras: Vec<SceneCamera>,
    /// Per camera, in camera order.
    pub observations: Vec<Vec<Observation>>,
    /// Landmark id pairs sharing a signature.
    pub aliased_pairs: Vec<(u32, u32)>,
}

impl SyntheticScene {
    pub fn train_cameras(&self) -> impl Iterator<Item = &SceneCamera> {
        self.cameras.iter().filter(|c| !c.is_query)
    }

    pub fn query_cameras(&self) -> impl Iterator<Item = &SceneCamera> {
        self.cameras.iter().filter(|c| c.is_query)
    }

    pub fn camera(&self, id: ImageId) -> Option<&SceneCamera> {
        self.cameras.iter().find(|c| c.image_id == id)
    }

    pub fn is_aliased(&self, landmark: u32) -> bool {
        self.aliased_pairs.iter().any(|&(a, b)| a == landmark || b == landmark)
    }

    /// Images observing at least one member of an aliased pair.
    pub fn aliased_images(&self) -> Vec<ImageId> {
        self.cameras
            .iter()
            .zip(&self.observations)
            .filter(|(_, obs)| obs.iter().any(|o| self.is_aliased(o.landmark)))
            .map(|(c, _)| c.image_id)
            .collect()
    }
}

/// `(source region, target region, pair count)` for each block of aliased
/// pairs. Pairs fill consecutive region pairs (0,1), (2,3), ...
fn alias_plan(cfg: &SceneConfig) -> Result<Vec<(usize, usize, usize)>, SynthError> {
    let mut left = cfg.aliased_pair_count();
    if left == 0 {
        return Ok(Vec::new());
    }
    if 2 * left > cfg.landmark_count {
        return Err(SynthError::InfeasibleConfig(format!(
            "{left} aliased pairs need more than {} landmarks",
            cfg.landmark_count
        )));
    }
    let sizes = cfg.region_sizes();
    let mut plan = Vec::new();
    let mut r = 0;
    while left > 0 && r + 1 < cfg.region_count {
        let take = left.min(sizes[r]).min(sizes[r + 1]);
        plan.push((r, r + 1, take));
        left -= take;
        r += 2;
    }
    if left > 0 {
        return Err(SynthError::InfeasibleConfig(format!(
            "{} regions cannot host {} aliased pairs",
            cfg.region_count,
            cfg.aliased_pair_count()
        )));
    }
    Ok(plan)
}

fn unit_gaussian(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize_in_place(&mut v);
    v
}

fn camera_pose(cfg: &SceneConfig, i: usize) -> Pose {
    let span = (cfg.region_count - 1) as f64 * cfg.pitch() + cfg.region_width;
    let t = if cfg.camera_count > 1 {
        i as f64 / (cfg.camera_count - 1) as f64
    } else {
        0.5
    };
    let x = -1.0 + (span + 2.0) * t;
    let fi = i as f64;
    let eye = Point3::new(x, 0.3 * (fi * 0.51).sin(), 0.5 * (fi * 0.29).sin());
    let target = Point3::new(x + 1.5 * (fi * 0.37).sin(), 0.4 * (fi * 0.23).sin(), cfg.wall_depth);
    Pose::look_at(&eye, &target, &Vector3::y())
        .expect("camera looks along +z")
        .canonical()
}

/// Builds landmarks, region backgrounds, cameras and exact observations.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    cfg.validate()?;
    let plan = alias_plan(cfg)?;
    let root = RngStream::new(cfg.seed, "scene");
    let mut rng = root.substream("landmarks");
    let sizes = cfg.region_sizes();
    let mut landmarks = Vec::with_capacity(cfg.landmark_count);
    let mut first_in_region = Vec::with_capacity(cfg.region_count);
    for (r, &n) in sizes.iter().enumerate() {
        first_in_region.push(landmarks.len());
        let x0 = r as f64 * cfg.pitch();
        for _ in 0..n {
            let position = Point3::new(
                x0 + rng.random_range(0.0..cfg.region_width),
                rng.random_range(-0.5..0.5) * cfg.wall_height,
                cfg.wall_depth
                    + if cfg.depth_jitter > 0.0 {
                        rng.random_range(-cfg.depth_jitter..cfg.depth_jitter)
                    } else {
                        0.0
                    },
            );
            landmarks.push(Landmark {
                id: landmarks.len() as u32,
                position,
                signature: unit_gaussian(cfg.local_dim, &mut rng),
                region: r,
            });
        }
    }

    let mut aliased_pairs = Vec::new();
    for (src, dst, count) in plan {
        // Most central landmarks of the source region are copied onto the
        // first landmarks of the target region, shifted by the region pitch.
        let centre = src as f64 * cfg.pitch() + cfg.region_width / 2.0;
        let mut src_ids: Vec<usize> = (first_in_region[src]..first_in_region[src] + sizes[src]).collect();
        src_ids.sort_by(|&a, &b| {
            (landmarks[a].position.x - centre)
                .abs()
                .total_cmp(&(landmarks[b].position.x - centre).abs())
                .then(a.cmp(&b))
        });
        let shift = Vector3::new((dst - src) as f64 * cfg.pitch(), 0.0, 0.0);
        for (k, &a) in src_ids.iter().take(count).enumerate() {
            let b = first_in_region[dst] + k;
            landmarks[b].position = landmarks[a].position + shift;
            landmarks[b].signature = landmarks[a].signature.clone();
            aliased_pairs.push((a as u32, b as u32));
        }
    }

    let mut bg_rng = root.substream("backgrounds");
    let backgrounds = (0..cfg.region_count)
        .map(|_| (0..cfg.feat_dim).map(|_| StandardNormal.sample(&mut bg_rng)).collect())
        .collect();

    let k = cfg.intrinsics()?;
    let cameras: Vec<SceneCamera> = (0..cfg.camera_count)
        .map(|i| SceneCamera {
            image_id: i as ImageId,
            pose: camera_pose(cfg, i),
            intrinsics: k,
            is_query: i % cfg.query_stride == cfg.query_offset,
        })
        .collect();
    let observations = cameras
        .iter()
        .map(|c| {
            landmarks
                .iter()
                .filter_map(|l| {
                    let kp = project(&l.position, &c.pose, &c.intrinsics).ok()?;
                    c.intrinsics.contains(kp, 0.0).then_some(Observation {
                        landmark: l.id,
                        keypoint: kp,
                    })
                })
                .collect()
        })
        .collect();
    Ok(SyntheticScene {
        landmarks,
        backgrounds,
        cameras,
        observations,
        aliased_pairs,
    })
}

/// Per-image rendered inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub image_id: ImageId,
    pub keypoints: Vec<Keypoint>,
    /// Unit-norm raw local descriptors, one per keypoint.
    pub local_descriptors: Vec<Vec<f64>>,
    pub features: VisualFeatureMap,
    /// Ground-truth coordinate per keypoint.
    pub gt: Vec<SceneCoordinate>,
}

/// Fixed seeded matrix lifting appearance signatures into feature space.
fn lift_matrix(cfg: &SceneConfig) -> DMatrix<f64> {
    let mut rng = RngStream::new(cfg.seed, "lift");
    DMatrix::from_fn(cfg.feat_dim, cfg.local_dim, |_, _| StandardNormal.sample(&mut rng))
}

fn region_at(cfg: &SceneConfig, x: f64) -> usize {
    let r = ((x + cfg.region_gap / 2.0) / cfg.pitch()).floor();
    r.clamp(0.0, (cfg.region_count - 1) as f64) as usize
}

/// Renders local descriptors and dense feature tokens for every camera. Each
/// image draws from its own substream of `rng`.
pub fn render_observations(scene: &SyntheticScene, cfg: &SceneConfig, rng: &RngStream) -> Vec<RenderedImage> {
    let lift = lift_matrix(cfg);
    let lifted: Vec<DVector<f64>> = par::map(&scene.landmarks, |l| &lift * DVector::from_column_slice(&l.signature));
    let idx: Vec<usize> = (0..scene.cameras.len()).collect();
    par::map(&idx, |&ci| {
        let cam = &scene.cameras[ci];
        let obs = &scene.observations[ci];
        let mut r = rng.substream_indexed("image", cam.image_id as u64);
        let local_noise = Normal::new(0.0, cfg.sigma_local).expect("validated sigma");
        let pixel_noise = Normal::new(0.0, cfg.pixel_noise).expect("validated sigma");
        let feat_noise = Normal::new(0.0, cfg.sigma_feat).expect("validated sigma");

        let mut keypoints = Vec::with_capacity(obs.len());
        let mut local_descriptors = Vec::with_capacity(obs.len());
        let mut gt = Vec::with_capacity(obs.len());
        for o in obs {
            let l = &scene.landmarks[o.landmark as usize];
            let mut d: Vec<f64> = l
                .signature
                .iter()
                .map(|s| {
                    s + if cfg.sigma_local > 0.0 {
                        local_noise.sample(&mut r)
                    } else {
                        0.0
                    }
                })
                .collect();
            normalize_in_place(&mut d);
            // Stored as f32 on disk; rounding here keeps the file and
            // in-memory paths identical.
            local_descriptors.push(d.into_iter().map(|x| x as f32 as f64).collect());
            let mut kp = o.keypoint;
            if cfg.pixel_noise > 0.0 {
                kp.u += pixel_noise.sample(&mut r);
                kp.v += pixel_noise.sample(&mut r);
            }
            keypoints.push(kp);
            gt.push(l.position);
        }

        let k = &cam.intrinsics;
        let strip = k.width as f64 / cfg.tokens as f64;
        let mut tokens = DMatrix::zeros(cfg.tokens, cfg.feat_dim);
        for t in 0..cfg.tokens {
            let centre = Keypoint::new((t as f64 + 0.5) * strip, k.height as f64 / 2.0);
            let ray = cam.pose.rotation() * k.ray(centre);
            let origin = cam.pose.center();
            let x_hit = origin.x + ray.x * (cfg.wall_depth - origin.z) / ray.z;
            let bg = &scene.backgrounds[region_at(cfg, x_hit)];
            let members: Vec<&Observation> = obs
                .iter()
                .filter(|o| o.keypoint.u >= t as f64 * strip && o.keypoint.u < (t + 1) as f64 * strip)
                .collect();
            for c in 0..cfg.feat_dim {
                let mut v = bg[c];
                if !members.is_empty() {
                    v += members.iter().map(|o| lifted[o.landmark as usize][c]).sum::<f64>() / members.len() as f64;
                }
                if cfg.sigma_feat > 0.0 {
                    v += feat_noise.sample(&mut r);
                }
                tokens[(t, c)] = v as f32 as f64;
            }
        }
        RenderedImage {
            image_id: cam.image_id,
            keypoints,
            local_descriptors,
            features: VisualFeatureMap::new(cam.image_id, tokens).expect("finite tokens"),
            gt,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covis::{build_graph, OverlapConfig};
    use crate::geometry::reprojection_residual;
    use crate::numeric::dot;
    use std::collections::BTreeSet;

    fn small() -> SceneConfig {
        SceneConfig {
            feat_dim: 32,
            local_dim: 16,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn standard_alias_cardinality_and_regions() {
        let s = generate_scene(&small()).unwrap();
        assert_eq!(s.aliased_pairs.len(), 10);
        for &(a, b) in &s.aliased_pairs {
            let (la, lb) = (&s.landmarks[a as usize], &s.landmarks[b as usize]);
            assert_ne!(la.region, lb.region);
            assert!(la
                .signature
                .iter()
                .zip(&lb.signature)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Every other pair of signatures differs.
        let aliased: BTreeSet<(u32, u32)> = s.aliased_pairs.iter().copied().collect();
        for i in 0..100u32 {
            for j in i + 1..100 {
                if !aliased.contains(&(i, j)) {
                    assert_ne!(s.landmarks[i as usize].signature, s.landmarks[j as usize].signature);
                }
            }
        }
        assert_eq!(s.train_cameras().count(), 60);
        assert_eq!(s.query_cameras().count(), 20);
    }

    #[test]
    fn no_aliasing_means_distinct_signatures() {
        let cfg = SceneConfig {
            aliased_fraction: 0.0,
            ..small()
        };
        let s = generate_scene(&cfg).unwrap();
        assert!(s.aliased_pairs.is_empty());
        for i in 0..s.landmarks.len() {
            for j in i + 1..s.landmarks.len() {
                assert_ne!(s.landmarks[i].signature, s.landmarks[j].signature);
            }
        }
    }

    #[test]
    fn infeasible_configs() {
        assert!(matches!(
            generate_scene(&SceneConfig {
                aliased_fraction: 1.0,
                region_count: 1,
                ..small()
            }),
            Err(SynthError::InfeasibleConfig(_))
        ));
        assert!(matches!(
            generate_scene(&SceneConfig {
                landmark_count: 0,
                ..small()
            }),
            Err(SynthError::InfeasibleConfig(_))
        ));
        // Full aliasing fits when regions pair up evenly.
        let s = generate_scene(&SceneConfig {
            aliased_fraction: 1.0,
            region_count: 4,
            ..small()
        })
        .unwrap();
        assert_eq!(s.aliased_pairs.len(), 50);
    }

    #[test]
    fn deterministic_and_exact_observations() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a, b);
        for (cam, obs) in a.cameras.iter().zip(&a.observations) {
            assert!(obs.len() >= 8, "camera {} sees {}", cam.image_id, obs.len());
            for o in obs {
                let l = &a.landmarks[o.landmark as usize];
                assert_eq!(project(&l.position, &cam.pose, &cam.intrinsics).unwrap(), o.keypoint);
                assert_eq!(
                    reprojection_residual(&l.position, o.keypoint, &cam.pose, &cam.intrinsics).unwrap(),
                    0.0
                );
            }
        }
        let ra = render_observations(&a, &small(), &RngStream::new(1, "render"));
        let rb = render_observations(&b, &small(), &RngStream::new(1, "render"));
        assert_eq!(ra, rb);
    }

    #[test]
    fn rendering_contents() {
        let cfg = SceneConfig {
            sigma_local: 0.0,
            ..small()
        };
        let s = generate_scene(&cfg).unwrap();
        let r = render_observations(&s, &cfg, &RngStream::new(2, "render"));
        for (img, obs) in r.iter().zip(&s.observations) {
            assert_eq!(img.features.token_count(), cfg.tokens);
            for (i, o) in obs.iter().enumerate() {
                assert_eq!(img.gt[i], s.landmarks[o.landmark as usize].position);
                assert_eq!(img.keypoints[i], o.keypoint);
            }
        }
        // Zero local noise: aliased partners yield identical descriptors.
        let mut by_landmark = std::collections::BTreeMap::new();
        for (img, obs) in r.iter().zip(&s.observations) {
            for (i, o) in obs.iter().enumerate() {
                by_landmark.insert(o.landmark, img.local_descriptors[i].clone());
            }
        }
        let mut checked = 0;
        for &(a, b) in &s.aliased_pairs {
            if let (Some(x), Some(y)) = (by_landmark.get(&a), by_landmark.get(&b)) {
                assert_eq!(x, y);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn descriptor_noise_keeps_identity() {
        let cfg = SceneConfig {
            sigma_local: 0.05,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg).unwrap();
        let r = render_observations(&s, &cfg, &RngStream::new(3, "render"));
        let mut all: Vec<(u32, &Vec<f64>)> = Vec::new();
        for (img, obs) in r.iter().zip(&s.observations) {
            for (i, o) in obs.iter().enumerate() {
                all.push((o.landmark, &img.local_descriptors[i]));
            }
        }
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
        for (i, a) in all.iter().enumerate().step_by(3) {
            for b in all.iter().skip(i + 1).step_by(5) {
                let c = dot(a.1, b.1);
                if a.0 == b.0 {
                    same += c;
                    ns += 1;
                } else if !s.aliased_pairs.contains(&(a.0.min(b.0), a.0.max(b.0))) {
                    diff += c;
                    nd += 1;
                }
            }
        }
        assert!(ns > 0 && nd > 0);
        assert!(same / ns as f64 > diff / nd as f64 + 0.3);
    }

    #[test]
    fn neighbours_share_edges_and_aliased_subset_exists() {
        let cfg = small();
        let s = generate_scene(&cfg).unwrap();
        let cams: Vec<_> = s.cameras.iter().map(|c| (c.image_id, c.pose, c.intrinsics)).collect();
        let g = build_graph(&cams, &OverlapConfig::default(), &RngStream::new(0, "covis")).unwrap();
        for w in s.cameras.windows(2) {
            let psi = g.psi(w[0].image_id, w[1].image_id).unwrap_or(0.0);
            assert!(psi >= 0.2, "{} - {}: {psi}", w[0].image_id, w[1].image_id);
        }
        let aliased = s.aliased_images();
        assert!(aliased.iter().any(|id| s.camera(*id).unwrap().is_query));
        assert!(aliased.len() < s.cameras.len());
    }
}
