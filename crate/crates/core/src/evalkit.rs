//! Localization accuracy tables and retrieval error curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::aggregator::GlobalDescriptor;
use crate::covis::ImageId;
use crate::geometry::{pose_error, Pose};
use crate::localize::{retrieve_topk_with, LocalizeError, RetrievalIndex, SearchMode};
use crate::numeric::{median, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("query ids do not align: result {result} vs truth {truth}")]
    IdMismatch { result: ImageId, truth: ImageId },
    #[error("{results} results for {truths} ground-truth poses")]
    CountMismatch { results: usize, truths: usize },
    #[error("no pose for training image {0}")]
    MissingTrainingPose(ImageId),
    #[error("no queries")]
    Empty,
    #[error(transparent)]
    Localize(#[from] LocalizeError),
}

/// `(translation, rotation in degrees)`.
pub type Threshold = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub thresholds: Vec<Threshold>,
    /// Success fraction per threshold, in [0, 1].
    pub fractions: Vec<f64>,
    pub query_count: usize,
}

impl ThresholdTable {
    /// Builds a table from given fractions (e.g. to render reference rows).
    pub fn from_fractions(thresholds: Vec<Threshold>, fractions: Vec<f64>, query_count: usize) -> Self {
        assert_eq!(thresholds.len(), fractions.len());
        Self {
            thresholds,
            fractions,
            query_count,
        }
    }

    pub fn average(&self) -> f64 {
        if self.fractions.is_empty() {
            return 0.0;
        }
        self.fractions.iter().sum::<f64>() / self.fractions.len() as f64
    }

    fn header(t: &Threshold) -> String {
        format!("{}m/{}deg", t.0, t.1)
    }

    /// Percentages with one decimal, columns aligned.
    pub fn to_aligned_text(&self, label: &str) -> String {
        let mut cols: Vec<String> = self.thresholds.iter().map(Self::header).collect();
        cols.push("Avg".into());
        let mut vals: Vec<String> = self.fractions.iter().map(|f| format!("{:.1}", 100.0 * f)).collect();
        vals.push(format!("{:.1}", 100.0 * self.average()));
        let widths: Vec<usize> = cols.iter().zip(&vals).map(|(c, v)| c.len().max(v.len())).collect();
        let lw = label.len().max("Method".len());
        let mut out = String::new();
        let _ = write!(out, "{:<lw$}", "Method");
        for (c, w) in cols.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        let _ = write!(out, "{label:<lw$}");
        for (v, w) in vals.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
        out
    }

    pub fn to_csv(&self, label: &str) -> String {
        let mut head = vec!["method".to_string()];
        head.extend(self.thresholds.iter().map(|t| format!("t{}_r{}", t.0, t.1)));
        head.push("average".into());
        let mut row = vec![label.to_string()];
        row.extend(self.fractions.iter().map(|f| format!("{}", 100.0 * f)));
        row.push(format!("{}", 100.0 * self.average()));
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

/// Fraction of queries whose estimate is within both bounds of each threshold.
/// `None` estimates count as failures everywhere.
pub fn accuracy_at_thresholds(
    results: &[(ImageId, Option<Pose>)],
    truths: &[(ImageId, Pose)],
    thresholds: &[Threshold],
) -> Result<ThresholdTable, EvalError> {
    if results.len() != truths.len() {
        return Err(EvalError::CountMismatch {
            results: results.len(),
            truths: truths.len(),
        });
    }
    let mut hits = vec![0usize; thresholds.len()];
    for ((rid, est), (tid, truth)) in results.iter().zip(truths) {
        if rid != tid {
            return Err(EvalError::IdMismatch {
                result: *rid,
                truth: *tid,
            });
        }
        if let Some(est) = est {
            let err = pose_error(est, truth);
            for (h, t) in hits.iter_mut().zip(thresholds) {
                if err.within(t.0, t.1) {
                    *h += 1;
                }
            }
        }
    }
    let n = results.len();
    let fractions = hits
        .iter()
        .map(|&h| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect();
    Ok(ThresholdTable {
        thresholds: thresholds.to_vec(),
        fractions,
        query_count: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalErrorCurve {
    pub k: Vec<usize>,
    pub median_error: Vec<f64>,
}

impl RetrievalErrorCurve {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k.iter().position(|&x| x == k).map(|i| self.median_error[i])
    }

    /// Two whitespace-separated columns: `k median_error`.
    pub fn to_text(&self) -> String {
        self.k
            .iter()
            .zip(&self.median_error)
            .map(|(k, e)| format!("{k} {e}\n"))
            .collect()
    }
}

/// For each `k <= k_max`: per-query median distance between the query camera
/// and its top-`k` retrieved training cameras, then the median over queries.
pub fn retrieval_median_error(
    index: &RetrievalIndex,
    queries: &[(GlobalDescriptor, Pose)],
    training_poses: &BTreeMap<ImageId, Pose>,
    k_max: usize,
    mode: SearchMode,
) -> Result<RetrievalErrorCurve, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_query: Vec<Vec<f64>> = Vec::with_capacity(queries.len());
    for (desc, pose) in queries {
        let ids = retrieve_topk_with(index, desc, k_max, mode)?;
        let dists = ids
            .iter()
            .map(|id| {
                training_poses
                    .get(id)
                    .map(|p| (p.center() - pose.center()).norm())
                    .ok_or(EvalError::MissingTrainingPose(*id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        per_query.push(dists);
    }
    let k: Vec<usize> = (1..=k_max).collect();
    let median_error = k
        .iter()
        .map(|&kk| {
            let meds: Vec<f64> = per_query.iter().map(|d| median(&d[..kk])).collect();
            median(&meds)
        })
        .collect();
    Ok(RetrievalErrorCurve { k, median_error })
}

/// Baseline curve for retrieval that ignores the query: each trial draws a
/// uniformly random ordering of the training images per query. The curve is
/// the mean over `trials` of the same median-of-medians statistic.
pub fn random_retrieval_median_error(
    query_poses: &[Pose],
    training_poses: &BTreeMap<ImageId, Pose>,
    k_max: usize,
    trials: usize,
    rng: &mut RngStream,
) -> Result<RetrievalErrorCurve, EvalError> {
    if query_poses.is_empty() || trials == 0 {
        return Err(EvalError::Empty);
    }
    if k_max == 0 || k_max > training_poses.len() {
        return Err(EvalError::Localize(LocalizeError::KTooLarge {
            k: k_max,
            size: training_poses.len(),
        }));
    }
    let train: Vec<&Pose> = training_poses.values().collect();
    let mut sums = vec![0.0; k_max];
    for _ in 0..trials {
        let per_query: Vec<Vec<f64>> = query_poses
            .iter()
            .map(|q| {
                rand::seq::index::sample(rng, train.len(), k_max)
                    .into_iter()
                    .map(|i| (train[i].center() - q.center()).norm())
                    .collect()
            })
            .collect();
        for (kk, sum) in sums.iter_mut().enumerate() {
            let meds: Vec<f64> = per_query.iter().map(|d| median(&d[..=kk])).collect();
            *sum += median(&meds);
        }
    }
    Ok(RetrievalErrorCurve {
        k: (1..=k_max).collect(),
        median_error: sums.into_iter().map(|s| s / trials as f64).collect(),
    })
}

/// Mean over queries of `|top-k retrieved ∩ k nearest training cameras| / k`.
pub fn recall_at_k(
    index: &RetrievalIndex,
    queries: &[(GlobalDescriptor, Pose)],
    training_poses: &BTreeMap<ImageId, Pose>,
    k: usize,
    mode: SearchMode,
) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for (desc, pose) in queries {
        let got = retrieve_topk_with(index, desc, k, mode)?;
        let mut by_dist: Vec<(f64, ImageId)> = training_poses
            .iter()
            .map(|(id, p)| ((p.center() - pose.center()).norm(), *id))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let truth: Vec<ImageId> = by_dist.iter().take(k).map(|x| x.1).collect();
        total += got.iter().filter(|id| truth.contains(id)).count() as f64 / k as f64;
    }
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localize::build_index;
    use crate::numeric::RngStream;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn at(x: f64) -> Pose {
        Pose::from_parts(&UnitQuaternion::identity(), Vector3::new(x, 0.0, 0.0))
    }

    #[test]
    fn random_baseline_uses_every_image_at_full_k() {
        let train: BTreeMap<ImageId, Pose> = (0..9).map(|i| (i, at(i as f64))).collect();
        let mut rng = RngStream::new(3, "baseline");
        let c = random_retrieval_median_error(&[at(0.0), at(8.0)], &train, 9, 5, &mut rng).unwrap();
        // Every ordering of all nine images has median distance 4 for both queries.
        assert!((c.at(9).unwrap() - 4.0).abs() < 1e-12);
        assert!(c.median_error.iter().all(|e| (0.0..=8.0).contains(e)));
        let mut rng = RngStream::new(3, "baseline");
        assert_eq!(
            random_retrieval_median_error(&[at(0.0), at(8.0)], &train, 9, 5, &mut rng).unwrap(),
            c
        );
        assert!(random_retrieval_median_error(&[at(0.0)], &train, 10, 1, &mut rng).is_err());
    }

    #[test]
    fn exact_estimates_and_strict_thresholds() {
        let truths: Vec<(ImageId, Pose)> = (0..4).map(|i| (i, at(i as f64))).collect();
        let exact: Vec<(ImageId, Option<Pose>)> = truths.iter().map(|(i, p)| (*i, Some(*p))).collect();
        let t = accuracy_at_thresholds(&exact, &truths, &[(0.25, 2.0), (0.5, 5.0)]).unwrap();
        assert_eq!(t.fractions, vec![1.0, 1.0]);

        let off = vec![(0, Some(at(0.3)))];
        let t = accuracy_at_thresholds(&off, &truths[..1], &[(0.25, 2.0), (0.5, 5.0)]).unwrap();
        assert_eq!(t.fractions, vec![0.0, 1.0]);

        let t = accuracy_at_thresholds(&[(0, None)], &truths[..1], &[(10.0, 180.0)]).unwrap();
        assert_eq!(t.fractions, vec![0.0]);

        assert_eq!(
            accuracy_at_thresholds(&[(1, None)], &truths[..1], &[(1.0, 1.0)]).unwrap_err(),
            EvalError::IdMismatch { result: 1, truth: 0 }
        );
    }

    #[test]
    fn nested_thresholds_are_monotone() {
        let mut rng = RngStream::new(0, "eval");
        let truths: Vec<(ImageId, Pose)> = (0..200).map(|i| (i, at(0.0))).collect();
        let results: Vec<(ImageId, Option<Pose>)> = (0..200)
            .map(|i| {
                let q = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, rng.random_range(0.0..0.2), 0.0));
                (
                    i,
                    (i % 7 != 0).then(|| Pose::from_parts(&q, Vector3::new(rng.random_range(0.0..1.0), 0.0, 0.0))),
                )
            })
            .collect();
        let t = accuracy_at_thresholds(&results, &truths, &[(0.1, 1.0), (0.25, 2.0), (0.5, 5.0), (5.0, 10.0)]).unwrap();
        assert!(t.fractions.windows(2).all(|w| w[0] <= w[1]));
        assert!((t.average() - t.fractions.iter().sum::<f64>() / 4.0).abs() < 1e-9);
    }

    #[test]
    fn table_rendering_reference_row() {
        let t = ThresholdTable::from_fractions(
            vec![(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)],
            vec![0.801, 0.898, 0.970],
            824,
        );
        assert_eq!(format!("{:.1}", 100.0 * t.average()), "89.0");
        let text = t.to_aligned_text("Ours");
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("80.1") && text.contains("89.8") && text.contains("97.0") && text.contains("89.0"));
        let csv = t.to_csv("Ours");
        assert!(csv.starts_with("method,t0.25_r2,t0.5_r5,t5_r10,average\n"));
    }

    fn random_desc(id: ImageId, rng: &mut RngStream) -> GlobalDescriptor {
        GlobalDescriptor::from_unnormalized(id, (0..8).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn identical_queries_give_zero_error_at_one() {
        let mut rng = RngStream::new(1, "c");
        let descs: Vec<GlobalDescriptor> = (0..20).map(|i| random_desc(i, &mut rng)).collect();
        let poses: BTreeMap<ImageId, Pose> = (0..20).map(|i| (i, at(i as f64))).collect();
        let idx = build_index(descs.clone(), None).unwrap();
        let queries: Vec<(GlobalDescriptor, Pose)> = descs.iter().map(|d| (d.clone(), poses[&d.image_id])).collect();
        let c = retrieval_median_error(&idx, &queries, &poses, 5, SearchMode::Exact).unwrap();
        assert_eq!(c.at(1), Some(0.0));
        assert_eq!(recall_at_k(&idx, &queries, &poses, 1, SearchMode::Exact).unwrap(), 1.0);
        assert_eq!(c.to_text().lines().count(), 5);
    }

    #[test]
    fn distance_ordered_retrieval_gives_monotone_curve() {
        // Descriptors on a circle arc ordered like camera positions along a line.
        let n = 30;
        let descs: Vec<GlobalDescriptor> = (0..n)
            .map(|i| {
                let a = i as f64 * 0.02;
                GlobalDescriptor::from_unnormalized(i, vec![a.cos(), a.sin()]).unwrap()
            })
            .collect();
        let poses: BTreeMap<ImageId, Pose> = (0..n).map(|i| (i, at(i as f64))).collect();
        let idx = build_index(descs.clone(), None).unwrap();
        let queries: Vec<(GlobalDescriptor, Pose)> = descs.iter().map(|d| (d.clone(), poses[&d.image_id])).collect();
        let c = retrieval_median_error(&idx, &queries, &poses, 10, SearchMode::Exact).unwrap();
        assert!(c.median_error.windows(2).all(|w| w[0] <= w[1]), "{:?}", c.median_error);
    }

    #[test]
    fn random_descriptors_match_pairwise_baseline() {
        let mut rng = RngStream::new(2, "rand");
        let n = 300;
        let descs: Vec<GlobalDescriptor> = (0..n).map(|i| random_desc(i, &mut rng)).collect();
        let poses: BTreeMap<ImageId, Pose> = (0..n).map(|i| (i, at(rng.random_range(0.0..50.0)))).collect();
        let idx = build_index(descs, None).unwrap();
        let queries: Vec<(GlobalDescriptor, Pose)> = (0..200)
            .map(|i| (random_desc(1000 + i, &mut rng), at(rng.random_range(0.0..50.0))))
            .collect();
        let c = retrieval_median_error(&idx, &queries, &poses, 10, SearchMode::Exact).unwrap();
        // Brute force: median over all query/training pairs.
        let all: Vec<f64> = queries
            .iter()
            .flat_map(|(_, q)| poses.values().map(move |p| (p.center() - q.center()).norm()))
            .collect();
        let baseline = median(&all);
        let got = c.at(10).unwrap();
        assert!((got - baseline).abs() < 0.15 * baseline, "{got} vs {baseline}");
    }
}
