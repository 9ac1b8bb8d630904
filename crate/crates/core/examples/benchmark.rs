//! Runs the standard synthetic benchmark and prints accuracy for the full
//! model, the zero-global ablation and a corrupted covisibility graph.
//!
//! cargo run --release -p scrk-core --example benchmark [clean|ablation|noisy|all] [config.toml]

use std::collections::BTreeMap;
use std::time::Instant;

use scrk_core::aggregator::{global_descriptor, GlobalDescriptor};
use scrk_core::config::PipelineConfig;
use scrk_core::evalkit::{accuracy_at_thresholds, recall_at_k, retrieval_median_error};
use scrk_core::localize::SearchMode;
use scrk_core::pipeline::{run_benchmark, synthesize, BenchmarkRun, Dataset, RunOptions};
use scrk_core::{ImageId, Pose};

fn report(label: &str, data: &Dataset, run: &BenchmarkRun, subset: Option<&[ImageId]>) {
    let truths: Vec<(ImageId, Pose)> = data.query_cameras().map(|c| (c.image_id, c.pose)).collect();
    let keep = |id: &ImageId| subset.is_none_or(|s| s.contains(id));
    let results: Vec<(ImageId, Option<Pose>)> = run
        .outcomes
        .iter()
        .filter(|o| keep(&o.image_id))
        .map(|o| (o.image_id, o.result.as_ref().map(|r| r.pose)))
        .collect();
    let truths: Vec<(ImageId, Pose)> = truths.into_iter().filter(|t| keep(&t.0)).collect();
    let table = accuracy_at_thresholds(&results, &truths, &[(0.05, 0.5), (0.1, 1.0), (0.25, 2.0)]).unwrap();
    print!("{}", table.to_aligned_text(label));
    for o in &run.outcomes {
        if !keep(&o.image_id) {
            continue;
        }
        let truth = data.camera(o.image_id).unwrap().pose;
        match &o.result {
            Some(r) => {
                let e = scrk_core::geometry::pose_error(&r.pose, &truth);
                println!(
                    "  q{:>3} inl {:>3}/{:>3} hyp {} err {:.4} / {:.3}",
                    o.image_id,
                    r.inlier_count,
                    data.image(o.image_id).unwrap().keypoints.len(),
                    r.hypothesis,
                    e.translation,
                    e.rotation_deg
                );
            }
            None => println!("  q{:>3} no pose", o.image_id),
        }
    }
}

fn retrieval(data: &Dataset, run: &BenchmarkRun) {
    let agg = &run.aggregator;
    let queries: Vec<(GlobalDescriptor, Pose)> = data
        .query_cameras()
        .map(|c| {
            let f = &data.image(c.image_id).unwrap().features;
            (
                global_descriptor(f, &agg.aggregator.model, &agg.aggregator.pca).unwrap(),
                c.pose,
            )
        })
        .collect();
    let train: BTreeMap<ImageId, Pose> = data.train_cameras().map(|c| (c.image_id, c.pose)).collect();
    let curve = retrieval_median_error(&agg.index, &queries, &train, 10, SearchMode::Exact).unwrap();
    let recall = recall_at_k(&agg.index, &queries, &train, 5, SearchMode::Exact).unwrap();
    println!(
        "  retrieval median error @10 {:.3}, recall@5 {:.3}",
        curve.at(10).unwrap(),
        recall
    );
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let cfg = match std::env::args().nth(2) {
        Some(p) => PipelineConfig::load(std::path::Path::new(&p)).unwrap(),
        None => PipelineConfig::desk_benchmark(),
    };
    let data = synthesize(&cfg.scene).unwrap();
    let aliased = data.aliased_queries();
    println!("aliased queries: {aliased:?}");
    let runs: Vec<(&str, RunOptions)> = vec![
        ("clean", RunOptions::default()),
        (
            "ablation",
            RunOptions {
                zero_global: true,
                ..RunOptions::default()
            },
        ),
        (
            "noisy",
            RunOptions {
                corrupt_fraction: 0.2,
                ..RunOptions::default()
            },
        ),
    ];
    for (name, opts) in runs {
        if which != "all" && which != name {
            continue;
        }
        let t = Instant::now();
        let run = run_benchmark(&data, &cfg, opts).unwrap();
        println!(
            "{name}: {:.1}s, edges {}",
            t.elapsed().as_secs_f64(),
            run.graph.edges().len()
        );
        let l = &run.scr.loss_trace;
        println!("  scr loss start {:.3} end {:.3}", l[0], l[l.len() - 1]);
        let a = &run.aggregator.aggregator.loss_trace;
        println!(
            "  agg loss start {:.4} end {:.4}",
            a[..20].iter().sum::<f64>() / 20.0,
            a[a.len() - 20..].iter().sum::<f64>() / 20.0
        );
        retrieval(&data, &run);
        report(name, &data, &run, None);
        report(&format!("{name}/aliased"), &data, &run, Some(&aliased));
    }
}
