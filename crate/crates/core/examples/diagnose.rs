//! Stage timings and regressor accuracy on the standard scene.
//!
//! cargo run --release -p scrk-core --example diagnose [config.toml]

use std::time::Instant;

use scrk_core::aggregator::global_descriptor;
use scrk_core::config::PipelineConfig;
use scrk_core::localize::{retrieve_topk_with, SearchMode};
use scrk_core::numeric::median;
use scrk_core::pipeline::{aggregator_stage, covis_stage, synthesize, train_regressor};
use scrk_core::scr::predict_batch;

fn main() {
    let cfg = match std::env::args().nth(1) {
        Some(p) => PipelineConfig::load(std::path::Path::new(&p)).unwrap(),
        None => PipelineConfig::desk_benchmark(),
    };
    let t = Instant::now();
    let data = synthesize(&cfg.scene).unwrap();
    println!("synth {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let graph = covis_stage(&data.cameras(&data.train_ids()), &cfg.covis, cfg.scene.seed).unwrap();
    println!("covis {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    // Optional cache: AGG_CACHE=path reuses a saved aggregator and index.
    let agg = match std::env::var("AGG_CACHE") {
        Ok(p) if std::path::Path::new(&p).exists() => {
            let (model, pca) = scrk_core::io::read_aggregator(std::path::Path::new(&p)).unwrap();
            let descs = scrk_core::aggregator::describe_all(&data.feature_maps(), graph.nodes(), &model, &pca).unwrap();
            let index = scrk_core::pipeline::index_stage(descs.clone(), &cfg).unwrap();
            let aggregator = scrk_core::aggregator::TrainedAggregator {
                model,
                pca,
                loss_trace: vec![],
            };
            scrk_core::pipeline::AggregatorStage {
                aggregator,
                train_descriptors: descs,
                index,
            }
        }
        cache => {
            let agg = aggregator_stage(&data.feature_maps(), &graph, &cfg).unwrap();
            if let Ok(p) = cache {
                scrk_core::io::write_aggregator(std::path::Path::new(&p), &agg.aggregator.model, &agg.aggregator.pca)
                    .unwrap();
            }
            agg
        }
    };
    println!("agg {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let scr = train_regressor(&data, &agg.train_descriptors, Some(&graph), &cfg, false).unwrap();
    println!("scr {:.1}s", t.elapsed().as_secs_f64());
    let tr = &scr.loss_trace;
    for i in [0, tr.len() / 4, tr.len() / 2, 3 * tr.len() / 4, tr.len() - 1] {
        println!("  loss[{i}] {:.3}", tr[i]);
    }
    let model = &scr.model;
    let mut summary = Vec::new();
    for query in [false, true] {
        let mut errs = Vec::new();
        for cam in data.cameras.iter().filter(|c| c.is_query == query) {
            let img = data.image(cam.image_id).unwrap();
            let g = global_descriptor(&img.features, &agg.aggregator.model, &agg.aggregator.pca).unwrap();
            let locals: Vec<Vec<f64>> = img
                .local_descriptors
                .iter()
                .map(|l| model.compress_local(l).unwrap())
                .collect();
            let err = |g: &[f64]| -> Vec<f64> {
                let preds = predict_batch(&locals, g, model).unwrap();
                preds.iter().zip(&img.gt).map(|(p, g)| (p - g).norm()).collect()
            };
            let e = err(g.values());
            let aliased = data.aliased.contains(&cam.image_id);
            let mut line = format!(
                "  {} {:>3}{} own {:.4} (<0.1: {:>2}/{:>2})",
                if query { "q" } else { "t" },
                cam.image_id,
                if aliased { "*" } else { " " },
                median(&e),
                e.iter().filter(|x| **x < 0.1).count(),
                e.len()
            );
            if query {
                summary.push(e.clone());
                let ids = retrieve_topk_with(&agg.index, &g, 10, SearchMode::Exact).unwrap();
                for id in ids.iter().take(4) {
                    let d = agg.index.get(*id).unwrap();
                    let e = err(d.values());
                    let dist = (data.camera(*id).unwrap().pose.center() - cam.pose.center()).norm();
                    if *id == ids[0] {
                        summary.push(e.clone());
                    }
                    line += &format!(
                        " | {id:>2} d{dist:.1} {:.3} ({:>2})",
                        median(&e),
                        e.iter().filter(|x| **x < 0.1).count()
                    );
                }
            }
            println!("{line}");
            errs.extend(e);
        }
        println!(
            "{} overall median {:.4}",
            if query { "query" } else { "train" },
            median(&errs)
        );
    }
    let top1: Vec<f64> = summary.iter().skip(1).step_by(2).flatten().copied().collect();
    println!(
        "query via top-1 retrieved: median {:.4}, <0.05 {:.3}",
        median(&top1),
        top1.iter().filter(|x| **x < 0.05).count() as f64 / top1.len() as f64
    );
}
