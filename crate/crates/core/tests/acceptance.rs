//! Acceptance checks. Runs as a plain binary (`harness = false`) so that every
//! criterion prints exactly one ordered PASS/FAIL line; the process fails if
//! any criterion does.
//!
//! cargo test --release -p scrk-core --test acceptance

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use scrk_core::aggregator::{
    global_descriptor, mgcl_batch_gradient, mgcl_loss, AggregatorDims, AggregatorModel, BandThresholds, BatchMiner,
    BatchPlan, GlobalDescriptor, PairSample, VisualFeatureMap,
};
use scrk_core::config::PipelineConfig;
use scrk_core::covis::{overlap_score, CovisGraph, Edge, OverlapConfig};
use scrk_core::evalkit::{accuracy_at_thresholds, random_retrieval_median_error, recall_at_k, retrieval_median_error};
use scrk_core::geometry::pose_error;
use scrk_core::io::{self, DescriptorFile, DescriptorKind, ImageObservations, IoError, ResultRecord};
use scrk_core::localize::{solve_pnp_ransac, Correspondence2D3D, RansacConfig, SearchMode};
use scrk_core::pipeline::{covis_stage, run_benchmark, synthesize, BenchmarkRun, Dataset, RunOptions};
use scrk_core::scr::{
    minibatch_gradient, robust_reproj_loss, OutputScaling, RobustLossParams, RowTarget, ScrArchitecture, ScrModel,
};
use scrk_core::{CameraIntrinsics, ImageId, Keypoint, Pose, RngStream};

// Tolerances, pinned.
const FD_STEP: f64 = 1e-5;
const FD_MAX_REL: f64 = 1e-4;
const FD_REL_FLOOR: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-12;
const OVERLAP_TOL: f64 = 0.05;
const ORACLE_SAMPLES: usize = 1_000_000;
const PNP_EXACT_T: f64 = 1e-4;
const PNP_EXACT_R_DEG: f64 = 0.01;
const PNP_ROBUST_T: f64 = 0.05;
const PNP_ROBUST_R_DEG: f64 = 0.5;
const PNP_ROBUST_MIN_SUCCESS: usize = 95;
const E2E_T: f64 = 0.1;
const E2E_R_DEG: f64 = 1.0;
const E2E_MIN_ACCURACY: f64 = 0.90;
const ALIASING_MIN_GAP: f64 = 0.20;
const NOISY_MAX_DROP: f64 = 0.10;
const NOISY_CORRUPTION: f64 = 0.2;
const RETRIEVAL_K: usize = 10;
const RETRIEVAL_MAX_RATIO: f64 = 0.5;
const RANDOM_TRIALS: usize = 200;
const MINING_BATCHES: usize = 10_000;
const MINING_FAMILY_ALPHA: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_REL_FLOOR)
}

fn k_std() -> CameraIntrinsics {
    CameraIntrinsics::centered(500.0, 640, 480).unwrap()
}

// ------------------------------------------------------------------ 1

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst_agg: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    let mut worst_net: f64 = 0.0;

    let dims = AggregatorDims {
        d_feat: 8,
        d_proj: 4,
        clusters: 3,
    };
    for seed in 0..5u64 {
        let mut rng = RngStream::new(seed, "c1-agg");
        let feats: BTreeMap<ImageId, VisualFeatureMap> = (0..6)
            .map(|id| {
                let m = DMatrix::from_fn(5, dims.d_feat, |_, _| StandardNormal.sample(&mut rng));
                (id, VisualFeatureMap::new(id, m).unwrap())
            })
            .collect();
        let model = AggregatorModel::init(dims, &mut rng);
        let pair = |i, j, psi| PairSample { i, j, psi };
        let batch = BatchPlan {
            positives: vec![pair(0, 1, 0.9), pair(2, 3, 0.6)],
            soft_negatives: vec![pair(1, 2, 0.4), pair(3, 4, 0.3)],
            randoms: vec![pair(0, 5, 0.0), pair(1, 4, 0.0)],
        };
        let (_, grad) = mgcl_batch_gradient(&batch, &feats, &model, 0.5).unwrap();
        for (p, &g) in grad.iter().enumerate() {
            let mut plus = model.clone();
            plus.params_mut()[p] += FD_STEP;
            let mut minus = model.clone();
            minus.params_mut()[p] -= FD_STEP;
            let fd = (mgcl_batch_gradient(&batch, &feats, &plus, 0.5).unwrap().0
                - mgcl_batch_gradient(&batch, &feats, &minus, 0.5).unwrap().0)
                / (2.0 * FD_STEP);
            worst_agg = worst_agg.max(rel_err(g, fd));
        }
    }

    // Robust loss w.r.t. the predicted coordinate, one instance per regime:
    // clamp region, blend region, distance region, behind the camera, no target.
    let params = RobustLossParams::default();
    let pose = Pose::identity();
    let kk = k_std();
    let kp = Keypoint::new(350.0, 200.0);
    let gt = Point3::new(0.3, -0.4, 5.0);
    let cases = [
        (Point3::new(0.35, -0.35, 5.1), Some(gt)),
        (Point3::new(0.9, -0.4, 5.0), Some(gt)),
        (Point3::new(3.0, 1.0, 4.0), Some(gt)),
        (Point3::new(0.2, 0.1, -2.0), Some(gt)),
        (Point3::new(1.5, 0.5, 6.0), None),
    ];
    for (pred, target) in cases {
        let (_, g) = robust_reproj_loss(&pred, kp, &pose, &kk, &params, target.as_ref());
        for c in 0..3 {
            let mut a = pred;
            a[c] += FD_STEP;
            let mut b = pred;
            b[c] -= FD_STEP;
            let fd = (robust_reproj_loss(&a, kp, &pose, &kk, &params, target.as_ref()).0
                - robust_reproj_loss(&b, kp, &pose, &kk, &params, target.as_ref()).0)
                / (2.0 * FD_STEP);
            worst_loss = worst_loss.max(rel_err(g[c], fd));
        }
    }

    // Whole network through the minibatch loss.
    let arch = ScrArchitecture {
        global_dim: 3,
        local_dim: 5,
        width: 8,
        hidden_blocks: 2,
        residual: true,
    };
    let scaling = OutputScaling {
        center: Vector3::new(0.0, 0.0, 6.0),
        scale: 2.0,
    };
    // ReLU makes the loss piecewise smooth. An instance whose central
    // differences at FD_STEP and FD_STEP / 10 disagree straddles a kink, where
    // no derivative exists; it is skipped and counted.
    let mut checked = 0;
    let mut kinked = 0;
    let mut seed = 0u64;
    while checked < 5 && seed < 50 {
        let mut rng = RngStream::new(seed, "c1-net");
        seed += 1;
        let mut model = ScrModel::init(arch, scaling, &mut rng);
        for p in model.params_mut() {
            *p += 0.3 * rng.random::<f64>() - 0.15;
        }
        let x = DMatrix::from_fn(6, arch.input_dim(), |_, _| StandardNormal.sample(&mut rng));
        let targets: Vec<RowTarget<'_>> = (0..6)
            .map(|i| RowTarget {
                keypoint: Keypoint::new(280.0 + 15.0 * i as f64, 220.0 + 6.0 * i as f64),
                pose: &pose,
                intrinsics: &kk,
                gt: (i % 2 == 0).then(|| Point3::new(0.1 * i as f64, -0.2, 5.5)),
            })
            .collect();
        let fd = |p: usize, h: f64| {
            let mut a = model.clone();
            a.params_mut()[p] += h;
            let mut b = model.clone();
            b.params_mut()[p] -= h;
            (minibatch_gradient(&a, &x, &targets, &params).0 - minibatch_gradient(&b, &x, &targets, &params).0)
                / (2.0 * h)
        };
        let (_, grad) = minibatch_gradient(&model, &x, &targets, &params);
        let pairs: Vec<(f64, f64, f64)> = (0..model.params().len())
            .map(|p| (grad[p], fd(p, FD_STEP), fd(p, FD_STEP / 10.0)))
            .collect();
        if pairs.iter().any(|&(_, a, b)| rel_err(a, b) > 1e-3) {
            kinked += 1;
            continue;
        }
        checked += 1;
        for (g, f, _) in pairs {
            worst_net = worst_net.max(rel_err(g, f));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let worst = worst_agg.max(worst_loss).max(worst_net);
    outcome(
        worst < FD_MAX_REL && checked == 5 && secs < 60.0,
        format!(
            "max rel err aggregator {worst_agg:.2e} (5 instances), robust loss {worst_loss:.2e} (5 regimes), network {worst_net:.2e} ({checked} instances, {kinked} on a ReLU kink skipped) (< {FD_MAX_REL:.0e}); {secs:.1}s (< 60s)"
        ),
    )
}

// ------------------------------------------------------------------ 2

fn c2_loss_values() -> Outcome {
    let direct = |s: f64, psi: f64, tau: f64| psi * (1.0 - s).powi(2) + (1.0 - psi) * (tau + s).max(0.0).powi(2);
    let e1 = [0.6, 0.8];
    let cases = [
        (mgcl_loss(&e1, &e1, 1.0, 0.5), 0.0),
        (mgcl_loss(&[1.0, 0.0], &[0.0, 1.0], 0.0, 0.5), 0.25),
        (mgcl_loss(&[1.0, 0.0], &[-0.5, 0.75f64.sqrt()], 0.5, 0.5), 1.125),
    ];
    let mut worst_table: f64 = 0.0;
    for (got, want) in cases {
        worst_table = worst_table.max((got - want).abs());
    }
    let mut worst_direct: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let mut a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        for v in [&mut a, &mut b] {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        }
        let s: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let psi = rng.random_range(0.0..=1.0);
        worst_direct = worst_direct.max((mgcl_loss(&a, &b, psi, 0.5) - direct(s, psi, 0.5)).abs());
    }
    outcome(
        worst_table <= LOSS_TOL && worst_direct <= LOSS_TOL,
        format!("tabulated cases 0 / 0.25 / 1.125 max dev {worst_table:.1e}, direct evaluation max dev {worst_direct:.1e} (<= {LOSS_TOL:.0e})"),
    )
}

// ------------------------------------------------------------------ 3

/// Independent Monte-Carlo overlap: pixel and depth sampling, back-projection
/// and projection written out from the pinhole model.
fn oracle_overlap(a: &Pose, b: &Pose, k: &CameraIntrinsics, cfg: &OverlapConfig, rng: &mut ChaCha8Rng) -> f64 {
    let directional = |from: &Pose, to: &Pose, rng: &mut ChaCha8Rng| {
        let r_from = from.rotation();
        let c_from = from.translation();
        let r_to = to.rotation();
        let c_to = to.translation();
        let mut hits = 0usize;
        for _ in 0..ORACLE_SAMPLES {
            let u = rng.random::<f64>() * k.width as f64;
            let v = rng.random::<f64>() * k.height as f64;
            let d = rng.random_range(cfg.depth_min..=cfg.depth_max);
            let cam = Vector3::new((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d);
            let world = r_from * cam + c_from;
            let pc = r_to.transpose() * (world - c_to);
            if pc.z <= 0.0 {
                continue;
            }
            let pu = k.fx * pc.x / pc.z + k.cx;
            let pv = k.fy * pc.y / pc.z + k.cy;
            if (0.0..k.width as f64).contains(&pu) && (0.0..k.height as f64).contains(&pv) {
                hits += 1;
            }
        }
        hits as f64 / ORACLE_SAMPLES as f64
    };
    0.5 * (directional(a, b, rng) + directional(b, a, rng))
}

fn cam(roll_deg: f64, pitch_deg: f64, yaw_deg: f64, c: [f64; 3]) -> Pose {
    // Camera looks down +z with y down: yaw about y, pitch about x, roll about z.
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw_deg.to_radians());
    let pitch = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch_deg.to_radians());
    let roll = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll_deg.to_radians());
    Pose::from_parts(&(yaw * pitch * roll), Vector3::new(c[0], c[1], c[2]))
}

fn c3_overlap() -> Outcome {
    let t = Instant::now();
    let k = k_std();
    let cfg = OverlapConfig {
        samples_per_image: 2000,
        depths_per_pixel: 10,
        ..OverlapConfig::default()
    };
    let base = cam(0.0, 0.0, 0.0, [0.0, 0.0, 0.0]);
    let pairs = [
        ("shift x 1", cam(0.0, 0.0, 0.0, [1.0, 0.0, 0.0])),
        ("shift x 5", cam(0.0, 0.0, 0.0, [5.0, 0.0, 0.0])),
        ("forward 3", cam(0.0, 0.0, 0.0, [0.0, 0.0, 3.0])),
        ("yaw 20", cam(0.0, 0.0, 20.0, [0.0, 0.0, 0.0])),
        ("yaw 45 + shift", cam(0.0, 0.0, 45.0, [2.0, 0.0, 1.0])),
        ("back to back", cam(0.0, 0.0, 180.0, [0.0, 0.0, 0.0])),
        ("far apart", cam(0.0, 0.0, 0.0, [100.0, 0.0, 0.0])),
        ("pitch 15", cam(0.0, 15.0, 0.0, [0.0, 0.0, 0.0])),
        ("shift y 2, yaw -10", cam(0.0, 0.0, -10.0, [0.0, 2.0, 0.5])),
        ("roll 30", cam(30.0, 0.0, 0.0, [0.5, 0.0, 0.0])),
    ];
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut symmetric = true;
    for (i, (_, other)) in pairs.iter().enumerate() {
        let ours = overlap_score(&base, &k, other, &k, &cfg, &mut RngStream::new(i as u64, "c3"));
        let swapped = overlap_score(other, &k, &base, &k, &cfg, &mut RngStream::new(i as u64, "c3"));
        symmetric &= ours.to_bits() == swapped.to_bits();
        let truth = oracle_overlap(&base, other, &k, &cfg, &mut oracle_rng);
        worst = worst.max((ours - truth).abs());
    }
    let self_ok = pairs
        .iter()
        .all(|(_, p)| overlap_score(p, &k, p, &k, &cfg, &mut RngStream::new(9, "self")) == 1.0);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= OVERLAP_TOL && symmetric && self_ok && secs < 120.0,
        format!(
            "10 pairs max |score - oracle| {worst:.4} (<= {OVERLAP_TOL}), symmetric exact {symmetric}, self-overlap 1 {self_ok}; {secs:.1}s (< 120s)"
        ),
    )
}

// ------------------------------------------------------------------ 4

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let q = UnitQuaternion::from_scaled_axis(axis * 0.5);
    let c = Vector3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    Pose::from_parts(&q, c)
}

fn lift(pose: &Pose, kp: Keypoint, depth: f64, k: &CameraIntrinsics) -> Point3<f64> {
    let cam = Vector3::new((kp.u - k.cx) / k.fx * depth, (kp.v - k.cy) / k.fy * depth, depth);
    Point3::from(pose.rotation() * cam + pose.translation())
}

fn c4_pnp() -> Outcome {
    let t = Instant::now();
    let k = k_std();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_exact = (0.0f64, 0.0f64);
    let mut exact_ok = 0;
    for trial in 0..100u64 {
        let pose = random_pose(&mut rng);
        let corr: Vec<Correspondence2D3D> = (0..50)
            .map(|_| {
                let kp = Keypoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                Correspondence2D3D {
                    keypoint: kp,
                    coordinate: lift(&pose, kp, rng.random_range(4.0..12.0), &k),
                }
            })
            .collect();
        let cfg = RansacConfig {
            seed: trial,
            ..RansacConfig::default()
        };
        if let Ok(sol) = solve_pnp_ransac(&corr, &k, &cfg) {
            let e = pose_error(&sol.pose, &pose);
            worst_exact = (worst_exact.0.max(e.translation), worst_exact.1.max(e.rotation_deg));
            exact_ok += usize::from(e.within(PNP_EXACT_T, PNP_EXACT_R_DEG));
        }
    }
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut robust_ok = 0;
    for trial in 0..100u64 {
        let pose = random_pose(&mut rng);
        let mut corr = Vec::with_capacity(100);
        for i in 0..100 {
            let kp = Keypoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let depth = rng.random_range(4.0..12.0);
            if i < 40 {
                let x = lift(&pose, kp, depth, &k);
                let noisy = Keypoint::new(kp.u + noise.sample(&mut rng), kp.v + noise.sample(&mut rng));
                corr.push(Correspondence2D3D {
                    keypoint: noisy,
                    coordinate: x,
                });
            } else {
                // Outlier: a pixel paired with an unrelated point in the view volume.
                let other = Keypoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                corr.push(Correspondence2D3D {
                    keypoint: kp,
                    coordinate: lift(&pose, other, depth, &k),
                });
            }
        }
        let cfg = RansacConfig {
            seed: 1000 + trial,
            ..RansacConfig::default()
        };
        if let Ok(sol) = solve_pnp_ransac(&corr, &k, &cfg) {
            robust_ok += usize::from(pose_error(&sol.pose, &pose).within(PNP_ROBUST_T, PNP_ROBUST_R_DEG));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        exact_ok == 100 && robust_ok >= PNP_ROBUST_MIN_SUCCESS && secs < 120.0,
        format!(
            "noise-free {exact_ok}/100 within {PNP_EXACT_T:.0e}/{PNP_EXACT_R_DEG}deg (worst {:.1e}/{:.1e}deg); 60% outliers + 0.5px noise {robust_ok}/100 within {PNP_ROBUST_T}/{PNP_ROBUST_R_DEG}deg (>= {PNP_ROBUST_MIN_SUCCESS}); {secs:.1}s (< 120s)",
            worst_exact.0, worst_exact.1
        ),
    )
}

// ------------------------------------------------------------------ 5-8

struct Benchmark {
    data: Dataset,
    cfg: PipelineConfig,
    clean: BenchmarkRun,
    clean_secs: f64,
    ablation: BenchmarkRun,
    noisy: BenchmarkRun,
}

fn accuracy(data: &Dataset, run: &BenchmarkRun, subset: Option<&[ImageId]>) -> f64 {
    let keep = |id: &ImageId| subset.is_none_or(|s| s.contains(id));
    let estimates: Vec<(ImageId, Option<Pose>)> = run
        .outcomes
        .iter()
        .filter(|o| keep(&o.image_id))
        .map(|o| (o.image_id, o.result.as_ref().map(|r| r.pose)))
        .collect();
    let truths: Vec<(ImageId, Pose)> = data
        .query_cameras()
        .filter(|c| keep(&c.image_id))
        .map(|c| (c.image_id, c.pose))
        .collect();
    accuracy_at_thresholds(&estimates, &truths, &[(E2E_T, E2E_R_DEG)])
        .unwrap()
        .fractions[0]
}

fn query_descriptors(data: &Dataset, run: &BenchmarkRun) -> Vec<(GlobalDescriptor, Pose)> {
    let agg = &run.aggregator.aggregator;
    data.query_cameras()
        .map(|c| {
            let f = &data.image(c.image_id).unwrap().features;
            (global_descriptor(f, &agg.model, &agg.pca).unwrap(), c.pose)
        })
        .collect()
}

fn search_mode(cfg: &PipelineConfig) -> SearchMode {
    if cfg.retrieval.use_pq {
        SearchMode::Quantized
    } else {
        SearchMode::Exact
    }
}

fn recall5(b: &Benchmark, run: &BenchmarkRun) -> f64 {
    let train: BTreeMap<ImageId, Pose> = b.data.train_cameras().map(|c| (c.image_id, c.pose)).collect();
    recall_at_k(
        &run.aggregator.index,
        &query_descriptors(&b.data, run),
        &train,
        5,
        search_mode(&b.cfg),
    )
    .unwrap()
}

fn benchmark() -> Benchmark {
    let cfg = PipelineConfig::desk_benchmark();
    let data = synthesize(&cfg.scene).unwrap();
    let t = Instant::now();
    let clean = run_benchmark(&data, &cfg, RunOptions::default()).unwrap();
    let clean_secs = t.elapsed().as_secs_f64();
    let ablation = run_benchmark(
        &data,
        &cfg,
        RunOptions {
            zero_global: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let noisy = run_benchmark(
        &data,
        &cfg,
        RunOptions {
            corrupt_fraction: NOISY_CORRUPTION,
            ..RunOptions::default()
        },
    )
    .unwrap();
    Benchmark {
        data,
        cfg,
        clean,
        clean_secs,
        ablation,
        noisy,
    }
}

fn c5_end_to_end(b: &Benchmark) -> Outcome {
    let acc = accuracy(&b.data, &b.clean, None);
    let n = b.data.query_ids().len();
    outcome(
        acc >= E2E_MIN_ACCURACY && b.clean_secs < 1800.0,
        format!(
            "{:.1}% of {n} queries within {E2E_T}/{E2E_R_DEG}deg (>= {:.0}%), k = {}; {:.0}s (< 1800s)",
            100.0 * acc,
            100.0 * E2E_MIN_ACCURACY,
            b.cfg.retrieval.k,
            b.clean_secs
        ),
    )
}

fn c6_aliasing(b: &Benchmark) -> Outcome {
    let aliased = b.data.aliased_queries();
    let with = accuracy(&b.data, &b.clean, Some(&aliased));
    let without = accuracy(&b.data, &b.ablation, Some(&aliased));
    let gap = with - without;
    outcome(
        gap >= ALIASING_MIN_GAP - 1e-12,
        format!(
            "aliased subset ({} queries): global conditioning {:.1}%, zeroed global {:.1}%, gap {:.1} pp (>= {:.0})",
            aliased.len(),
            100.0 * with,
            100.0 * without,
            100.0 * gap,
            100.0 * ALIASING_MIN_GAP
        ),
    )
}

fn c7_noisy_graph(b: &Benchmark) -> Outcome {
    let clean = accuracy(&b.data, &b.clean, None);
    let noisy = accuracy(&b.data, &b.noisy, None);
    let r_clean = recall5(b, &b.clean);
    let r_noisy = recall5(b, &b.noisy);
    let acc_drop = clean - noisy;
    let recall_drop = r_clean - r_noisy;
    outcome(
        acc_drop < NOISY_MAX_DROP && recall_drop < NOISY_MAX_DROP,
        format!(
            "{:.0}% false edges ({} -> {}): accuracy {:.1}% -> {:.1}% (drop {:.1} pp < {:.0}), recall@5 {:.3} -> {:.3} (drop {:.1} pp < {:.0})",
            100.0 * NOISY_CORRUPTION,
            b.clean.graph.edges().len(),
            b.noisy.graph.edges().len(),
            100.0 * clean,
            100.0 * noisy,
            100.0 * acc_drop,
            100.0 * NOISY_MAX_DROP,
            r_clean,
            r_noisy,
            100.0 * recall_drop,
            100.0 * NOISY_MAX_DROP
        ),
    )
}

fn c8_retrieval(b: &Benchmark) -> Outcome {
    let train: BTreeMap<ImageId, Pose> = b.data.train_cameras().map(|c| (c.image_id, c.pose)).collect();
    let queries = query_descriptors(&b.data, &b.clean);
    let learned = retrieval_median_error(
        &b.clean.aggregator.index,
        &queries,
        &train,
        RETRIEVAL_K,
        search_mode(&b.cfg),
    )
    .unwrap()
    .at(RETRIEVAL_K)
    .unwrap();
    let poses: Vec<Pose> = queries.iter().map(|q| q.1).collect();
    let random = random_retrieval_median_error(
        &poses,
        &train,
        RETRIEVAL_K,
        RANDOM_TRIALS,
        &mut RngStream::new(8, "random-retrieval"),
    )
    .unwrap()
    .at(RETRIEVAL_K)
    .unwrap();
    outcome(
        learned <= RETRIEVAL_MAX_RATIO * random,
        format!(
            "median error @{RETRIEVAL_K}: learned {learned:.3}, random {random:.3}, ratio {:.3} (<= {RETRIEVAL_MAX_RATIO})",
            learned / random
        ),
    )
}

// ------------------------------------------------------------------ 9

/// Half-width of a two-sided binomial interval holding with probability at
/// least `1 - alpha` (Hoeffding).
fn binomial_half_width(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

fn band_frequencies(
    plans: &[BatchPlan],
    band: fn(&BatchPlan) -> &Vec<PairSample>,
) -> BTreeMap<(ImageId, ImageId), usize> {
    let mut counts = BTreeMap::new();
    for p in plans {
        for s in band(p) {
            *counts.entry((s.i.min(s.j), s.i.max(s.j))).or_insert(0) += 1;
        }
    }
    counts
}

fn uniform(counts: &BTreeMap<(ImageId, ImageId), usize>, pool: usize, per_batch: usize, batches: usize) -> (bool, f64) {
    // Every pool member is a separate test; Bonferroni keeps the family at 99%.
    let p = per_batch as f64 / pool as f64;
    let hw = binomial_half_width(batches, MINING_FAMILY_ALPHA / pool as f64);
    let mut worst: f64 = 0.0;
    let mut ok = counts.len() <= pool;
    for c in counts.values() {
        let dev = (*c as f64 / batches as f64 - p).abs();
        worst = worst.max(dev / hw);
        ok &= dev <= hw;
    }
    if counts.len() < pool {
        // Unseen members have frequency 0.
        worst = worst.max(p / hw);
        ok &= p <= hw;
    }
    (ok, worst)
}

fn c9_mining() -> Outcome {
    let cfg = PipelineConfig::desk_benchmark();
    let data = synthesize(&cfg.scene).unwrap();
    let graph = covis_stage(&data.cameras(&data.train_ids()), &cfg.covis, cfg.scene.seed).unwrap();
    let bands = BandThresholds::default();
    let b = cfg.aggregator.band_size;
    let miner = BatchMiner::new(&graph, &bands);
    let (n_pos, n_soft, n_rand) = miner.band_sizes();
    let mut rng = RngStream::new(9, "c9");
    let plans: Vec<BatchPlan> = (0..MINING_BATCHES)
        .map(|_| miner.sample(b, &mut rng).unwrap())
        .collect();
    let mut exact = true;
    for p in &plans {
        exact &= p.positives.len() == b && p.soft_negatives.len() == b && p.randoms.len() == b;
        exact &= p
            .positives
            .iter()
            .all(|s| s.psi > bands.positive && graph.psi(s.i, s.j) == Some(s.psi));
        exact &= p
            .soft_negatives
            .iter()
            .all(|s| (bands.soft_low..=bands.soft_high).contains(&s.psi) && graph.psi(s.i, s.j) == Some(s.psi));
        exact &= p
            .randoms
            .iter()
            .all(|s| s.psi == 0.0 && s.i != s.j && !graph.is_adjacent(s.i, s.j));
        for band in [&p.positives, &p.soft_negatives, &p.randoms] {
            let mut keys: Vec<_> = band.iter().map(|s| (s.i.min(s.j), s.i.max(s.j))).collect();
            keys.sort_unstable();
            keys.dedup();
            exact &= keys.len() == band.len();
        }
    }
    let (u_pos, w_pos) = uniform(&band_frequencies(&plans, |p| &p.positives), n_pos, b, MINING_BATCHES);
    let (u_soft, w_soft) = uniform(
        &band_frequencies(&plans, |p| &p.soft_negatives),
        n_soft,
        b,
        MINING_BATCHES,
    );
    let (u_rand, w_rand) = uniform(&band_frequencies(&plans, |p| &p.randoms), n_rand, b, MINING_BATCHES);

    // Ten positive edges, b = 1: each edge in 10% +- 1% of batches.
    let mut edges: Vec<Edge> = (0..10)
        .map(|i| Edge {
            i: 2 * i,
            j: 2 * i + 1,
            psi: 0.8,
        })
        .collect();
    edges.push(Edge { i: 0, j: 2, psi: 0.3 });
    let small = CovisGraph::new((0..20).collect(), edges).unwrap();
    let small_miner = BatchMiner::new(&small, &bands);
    let mut rng = RngStream::new(99, "c9-small");
    let mut counts = [0usize; 10];
    for _ in 0..MINING_BATCHES {
        let p = small_miner.sample(1, &mut rng).unwrap();
        counts[(p.positives[0].i / 2) as usize] += 1;
    }
    let ten_ok = counts
        .iter()
        .all(|c| (*c as f64 / MINING_BATCHES as f64 - 0.1).abs() <= 0.01);
    let pass = exact && u_pos && u_soft && u_rand && ten_ok;
    outcome(
        pass,
        format!(
            "{MINING_BATCHES} batches of 3x{b}: cardinalities/psi/no-repeat exact {exact}; band pools {n_pos}/{n_soft}/{n_rand}, worst deviation / 99% bound {w_pos:.2}/{w_soft:.2}/{w_rand:.2}; ten-edge check {counts:?} within 10% +- 1% {ten_ok}"
        ),
    )
}

// ------------------------------------------------------------------ 10

fn reduced_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk_benchmark();
    cfg.aggregator.iterations = 200;
    cfg.scr.iterations = 300;
    cfg.scr.buffer_capacity = 20_000;
    cfg.scr.batch_size = 512;
    cfg
}

fn artefact_bytes(run: &BenchmarkRun, dir: &Path) -> Vec<(&'static str, Vec<u8>)> {
    let agg = dir.join("agg.bin");
    let scr = dir.join("scr.bin");
    let index = dir.join("index.bin");
    let results = dir.join("results.txt");
    let graph = dir.join("graph.txt");
    io::write_aggregator(&agg, &run.aggregator.aggregator.model, &run.aggregator.aggregator.pca).unwrap();
    io::write_scr(&scr, &run.scr.model).unwrap();
    io::write_index(&index, &run.aggregator.index).unwrap();
    let records: Vec<ResultRecord> = run
        .outcomes
        .iter()
        .map(|o| ResultRecord::from_result(o.image_id, o.result.as_ref()))
        .collect();
    io::write_results(&results, &records).unwrap();
    io::write_graph(&graph, &run.graph).unwrap();
    vec![
        ("aggregator", std::fs::read(agg).unwrap()),
        ("regressor", std::fs::read(scr).unwrap()),
        ("index", std::fs::read(index).unwrap()),
        ("results", std::fs::read(results).unwrap()),
        ("graph", std::fs::read(graph).unwrap()),
    ]
}

fn c10_determinism() -> Outcome {
    let cfg = reduced_config();
    let data = synthesize(&cfg.scene).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (i, threads) in [0usize, 0, 1].into_iter().enumerate() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let run = pool
            .install(|| run_benchmark(&data, &cfg, RunOptions::default()))
            .unwrap();
        let sub = dir.path().join(format!("run{i}"));
        std::fs::create_dir(&sub).unwrap();
        runs.push(artefact_bytes(&run, &sub));
    }
    let mut differing = Vec::new();
    for other in &runs[1..] {
        for ((name, a), (_, b)) in runs[0].iter().zip(other) {
            if a != b && !differing.contains(name) {
                differing.push(*name);
            }
        }
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| *n).collect();
    outcome(
        differing.is_empty(),
        format!(
            "3 reduced runs (default pool twice, one thread once): {} byte-identical; differing: {differing:?}",
            names.join(", ")
        ),
    )
}

// ------------------------------------------------------------------ 11

fn round_trip<T, W, R>(path: &Path, value: &T, write: W, read: R) -> bool
where
    T: PartialEq,
    W: Fn(&Path, &T) -> Result<(), IoError>,
    R: Fn(&Path) -> Result<T, IoError>,
{
    write(path, value).unwrap();
    let first = std::fs::read(path).unwrap();
    let back = read(path).unwrap();
    write(path, &back).unwrap();
    back == *value && std::fs::read(path).unwrap() == first
}

fn version_rejected(path: &Path, binary: bool) -> bool {
    let mut bytes = std::fs::read(path).unwrap();
    if binary {
        let v = io::FORMAT_VERSION + 1;
        bytes[8..10].copy_from_slice(&v.to_le_bytes());
    } else {
        let text = String::from_utf8(bytes).unwrap();
        let (first, rest) = text.split_once('\n').unwrap();
        let bumped = first.replace(
            &format!(" v{}", io::FORMAT_VERSION),
            &format!(" v{}", io::FORMAT_VERSION + 1),
        );
        bytes = format!("{bumped}\n{rest}").into_bytes();
    }
    let bad = path.with_extension("bad");
    std::fs::write(&bad, bytes).unwrap();
    let err = match path.extension().and_then(|e| e.to_str()) {
        Some("dsc") => io::read_descriptors(&bad).err(),
        Some("agg") => io::read_aggregator(&bad).err(),
        Some("scr") => io::read_scr(&bad).err(),
        Some("idx") => io::read_index(&bad).err(),
        Some("graph") => io::read_graph(&bad).err(),
        Some("obs") => io::read_observations(&bad).err(),
        Some("res") => io::read_results(&bad).err(),
        _ => unreachable!(),
    };
    matches!(err, Some(IoError::UnsupportedVersion { .. }))
}

fn c11_formats() -> Outcome {
    let cfg = reduced_config();
    let data = synthesize(&cfg.scene).unwrap();
    let run = run_benchmark(&data, &cfg, RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name: &'static str, ok: bool| {
        if !ok {
            failed.push(name);
        }
    };

    let img = &data.images[0];
    let locals = DescriptorFile::from_rows(
        DescriptorKind::Local,
        (0..img.local_descriptors.len() as u32).collect(),
        &img.local_descriptors,
    );
    check(
        "descriptors",
        round_trip(&d("l.dsc"), &locals, io::write_descriptors, io::read_descriptors),
    );
    let agg = (
        run.aggregator.aggregator.model.clone(),
        run.aggregator.aggregator.pca.clone(),
    );
    check(
        "aggregator",
        round_trip(
            &d("m.agg"),
            &agg,
            |p, v| io::write_aggregator(p, &v.0, &v.1),
            io::read_aggregator,
        ),
    );
    check(
        "regressor",
        round_trip(&d("m.scr"), &run.scr.model, io::write_scr, io::read_scr),
    );
    check(
        "index+pq",
        round_trip(&d("i.idx"), &run.aggregator.index, io::write_index, io::read_index),
    );
    check(
        "graph",
        round_trip(&d("g.graph"), &run.graph, io::write_graph, io::read_graph),
    );
    let poses: Vec<(ImageId, Pose)> = data.cameras.iter().map(|c| (c.image_id, c.pose)).collect();
    let intr: Vec<(ImageId, CameraIntrinsics)> = data.cameras.iter().map(|c| (c.image_id, c.intrinsics)).collect();
    io::write_poses(&d("poses.txt"), &poses).unwrap();
    io::write_intrinsics(&d("intr.txt"), &intr).unwrap();
    let back = io::read_poses(&d("poses.txt"), &d("intr.txt")).unwrap();
    let same = back.len() == poses.len()
        && back.iter().zip(&data.cameras).all(|((id, p, k), c)| {
            *id == c.image_id
                && p.translation()
                    .iter()
                    .zip(c.pose.translation().iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
                && p.quaternion()
                    .coords
                    .iter()
                    .zip(c.pose.quaternion().coords.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
                && *k == c.intrinsics
        });
    check("poses+intrinsics", same);
    let obs: Vec<ImageObservations> = data
        .images
        .iter()
        .map(|i| ImageObservations {
            image_id: i.image_id,
            keypoints: i.keypoints.clone(),
            gt: i.gt.clone(),
        })
        .collect();
    check(
        "observations",
        round_trip(
            &d("o.obs"),
            &obs,
            |p, v| io::write_observations(p, v),
            io::read_observations,
        ),
    );
    let records: Vec<ResultRecord> = run
        .outcomes
        .iter()
        .map(|o| ResultRecord::from_result(o.image_id, o.result.as_ref()))
        .collect();
    check(
        "results",
        round_trip(&d("r.res"), &records, |p, v| io::write_results(p, v), io::read_results),
    );
    io::write_dataset(&d("scene"), &data).unwrap();
    check("scene directory", io::read_dataset(&d("scene")).unwrap() == data);

    let mut unrejected: Vec<&str> = Vec::new();
    for (file, binary) in [
        ("l.dsc", true),
        ("m.agg", true),
        ("m.scr", true),
        ("i.idx", true),
        ("g.graph", false),
        ("o.obs", false),
        ("r.res", false),
    ] {
        if !version_rejected(&d(file), binary) {
            unrejected.push(file);
        }
    }
    outcome(
        failed.is_empty() && unrejected.is_empty(),
        format!(
            "bitwise round trips failing: {failed:?}; version mismatch accepted by: {unrejected:?} (both must be empty)"
        ),
    )
}

fn main() {
    // Ignore libtest-style arguments such as `--nocapture` or a name filter.
    let t0 = Instant::now();
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let line = format!(
            "criterion {n:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        println!("{line}");
        results.push((n, name, o, t.elapsed()));
    };
    run(1, "gradient correctness", &c1_gradients);
    run(2, "loss unit values", &c2_loss_values);
    run(3, "overlap oracle", &c3_overlap);
    run(4, "pnp", &c4_pnp);
    let bench = benchmark();
    run(5, "end-to-end localization", &|| c5_end_to_end(&bench));
    run(6, "aliasing disambiguation", &|| c6_aliasing(&bench));
    run(7, "noisy-graph robustness", &|| c7_noisy_graph(&bench));
    run(8, "retrieval quality", &|| c8_retrieval(&bench));
    run(9, "batch mining", &c9_mining);
    run(10, "determinism", &c10_determinism);
    run(11, "formats", &c11_formats);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
