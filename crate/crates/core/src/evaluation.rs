//! Verifier confusion counts and cluster safety margins computed from an
//! attempt log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    safety_margin, AlignError, FrameRef, PairClusterSet, RelativeTransformSample,
};
use crate::pipeline::{is_correct, verifier_metrics, AttemptRecord, Verdict, VerifierMetrics};
use crate::reloc::SceneId;
use crate::se3::RigidTransform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub a: SceneId,
    pub b: SceneId,
    pub attempts: usize,
    /// Attempts where the relocaliser proposed a pose.
    pub proposals: usize,
    /// Present when every proposal's correctness is known.
    pub verifier: Option<VerifierMetrics>,
    pub samples_added: usize,
    pub clusters: usize,
    pub correct_cluster: Option<usize>,
    pub largest_incorrect_cluster: Option<usize>,
    pub safety_margin: Option<i64>,
    /// Whether the largest cluster agrees with the ground truth.
    pub largest_is_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pairs: Vec<PairEvaluation>,
    /// Counts pooled over every pair.
    pub overall: Option<VerifierMetrics>,
    /// Unweighted means of the per-pair ratios, skipping undefined ones.
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_specificity: f64,
}

/// Truth for `aT_b` from global poses mapping each scene into a shared frame.
pub fn pair_truth(
    globals: &BTreeMap<SceneId, RigidTransform>,
    a: SceneId,
    b: SceneId,
) -> Option<RigidTransform> {
    Some(globals.get(&a)?.inverse().compose(globals.get(&b)?))
}

fn mean_defined(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Groups records by unordered scene pair. With `globals`, correctness is
/// recomputed from them; otherwise each record's own flag is used.
pub fn evaluate_records(
    records: &[AttemptRecord],
    globals: Option<&BTreeMap<SceneId, RigidTransform>>,
) -> Result<Evaluation, AlignError> {
    let mut by_pair: BTreeMap<(SceneId, SceneId), Vec<&AttemptRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.target.min(r.source_scene), r.target.max(r.source_scene));
        by_pair.entry(key).or_default().push(r);
    }
    let mut pairs = Vec::new();
    let mut pooled = Vec::new();
    for ((a, b), recs) in by_pair {
        let mut labelled = Vec::new();
        let mut unknown = false;
        let mut set = PairClusterSet::new(a, b);
        let mut proposals = 0;
        for r in &recs {
            let (Some(verdict), Some(t)) = (r.verdict, r.transform) else {
                continue;
            };
            proposals += 1;
            let transform = RigidTransform::from_array(&t)?;
            let correct = match globals {
                Some(g) => pair_truth(g, r.target, r.source_scene)
                    .map(|truth| is_correct(&transform, &truth)),
                None => r.correct,
            };
            match correct {
                Some(c) => labelled.push((verdict, c)),
                None => unknown = true,
            }
            if verdict == Verdict::Accepted {
                set.add_sample(RelativeTransformSample {
                    a: r.target,
                    b: r.source_scene,
                    transform,
                    frame: FrameRef {
                        scene: r.source_scene,
                        frame_index: r.frame_index,
                    },
                })?;
            }
        }
        pooled.extend(labelled.iter().copied());
        let verifier = (!unknown && !labelled.is_empty()).then(|| verifier_metrics(&labelled));
        let truth = globals.and_then(|g| pair_truth(g, a, b));
        let margin = match set.largest() {
            Some(_) => Some(safety_margin(&set, truth.as_ref())?),
            None => None,
        };
        pairs.push(PairEvaluation {
            a,
            b,
            attempts: recs.len(),
            proposals,
            verifier,
            samples_added: set.sample_count(),
            clusters: set.clusters.len(),
            correct_cluster: margin.map(|(m, _)| m.correct_size),
            largest_incorrect_cluster: margin.map(|(m, _)| m.largest_incorrect_size),
            safety_margin: margin.map(|(m, _)| m.margin),
            largest_is_correct: margin.and_then(|(_, agrees)| agrees),
        });
    }
    let metrics: Vec<&VerifierMetrics> = pairs.iter().filter_map(|p| p.verifier.as_ref()).collect();
    Ok(Evaluation {
        overall: (!pooled.is_empty()).then(|| verifier_metrics(&pooled)),
        mean_precision: mean_defined(metrics.iter().map(|m| m.precision)),
        mean_recall: mean_defined(metrics.iter().map(|m| m.recall)),
        mean_specificity: mean_defined(metrics.iter().map(|m| m.specificity)),
        pairs,
    })
}

fn pct(x: f64) -> String {
    if x.is_finite() {
        format!("{:.1}%", 100.0 * x)
    } else {
        "-".into()
    }
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(|| "-".into(), |v| v.to_string())
}

/// Aligned plain-text table, one row per pair plus an average row.
pub fn format_table(e: &Evaluation) -> String {
    let header = [
        "pair",
        "attempts",
        "proposals",
        "TP",
        "FP",
        "TN",
        "FN",
        "precision",
        "recall",
        "specificity",
        "samples",
        "correct",
        "incorrect",
        "margin",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for p in &e.pairs {
        let v = p.verifier;
        rows.push(vec![
            format!("{}-{}", p.a, p.b),
            p.attempts.to_string(),
            p.proposals.to_string(),
            opt(v.map(|m| m.tp)),
            opt(v.map(|m| m.fp)),
            opt(v.map(|m| m.tn)),
            opt(v.map(|m| m.fn_)),
            v.map_or("-".into(), |m| pct(m.precision)),
            v.map_or("-".into(), |m| pct(m.recall)),
            v.map_or("-".into(), |m| pct(m.specificity)),
            p.samples_added.to_string(),
            opt(p.correct_cluster),
            opt(p.largest_incorrect_cluster),
            opt(p.safety_margin),
        ]);
    }
    let mut avg = vec!["average".to_string()];
    avg.extend(std::iter::repeat_n("-".to_string(), 6));
    avg.extend([
        pct(e.mean_precision),
        pct(e.mean_recall),
        pct(e.mean_specificity),
    ]);
    avg.extend(std::iter::repeat_n("-".to_string(), 4));
    rows.push(avg);

    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| {
                if i == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::CandidateScore;

    fn record(
        attempt: usize,
        verdict: Verdict,
        t: RigidTransform,
        correct: Option<bool>,
    ) -> AttemptRecord {
        AttemptRecord {
            attempt,
            target: 1,
            source_scene: 0,
            frame_index: attempt as u64,
            score: CandidateScore::new(0.0, 0.0, 0.0),
            verdict: Some(verdict),
            mu: Some(0.01),
            coverage: Some(0.9),
            transform: Some(t.to_array()),
            correct,
        }
    }

    #[test]
    fn counts_and_margins() {
        let good = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let bad = RigidTransform::from_translation(-1.0, 0.0, 0.0);
        let records = vec![
            record(0, Verdict::Accepted, good, Some(true)),
            record(1, Verdict::Accepted, good, Some(true)),
            record(2, Verdict::Accepted, bad, Some(false)),
            record(3, Verdict::RejectedDepthDiff, bad, Some(false)),
            record(4, Verdict::RejectedCoverage, good, Some(true)),
        ];
        let e = evaluate_records(&records, None).unwrap();
        assert_eq!(e.pairs.len(), 1);
        let p = &e.pairs[0];
        assert_eq!((p.a, p.b), (0, 1));
        let v = p.verifier.unwrap();
        assert_eq!((v.tp, v.fp, v.tn, v.fn_), (2, 1, 1, 1));
        assert_eq!(p.samples_added, 3);
        assert_eq!(p.correct_cluster, Some(2));
        assert_eq!(p.largest_incorrect_cluster, Some(1));
        assert_eq!(p.safety_margin, Some(1));
        assert!((e.mean_precision - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_overrides_record_flags() {
        let t = RigidTransform::from_translation(0.3, 0.0, 0.0);
        let records = vec![record(0, Verdict::Accepted, t, Some(false))];
        let mut globals = BTreeMap::new();
        globals.insert(0, t);
        globals.insert(1, RigidTransform::identity());
        let e = evaluate_records(&records, Some(&globals)).unwrap();
        assert_eq!(e.pairs[0].verifier.unwrap().tp, 1);
        assert_eq!(e.pairs[0].largest_is_correct, Some(true));
    }

    #[test]
    fn unknown_correctness_leaves_metrics_out() {
        let records = vec![record(
            0,
            Verdict::Accepted,
            RigidTransform::identity(),
            None,
        )];
        let e = evaluate_records(&records, None).unwrap();
        assert!(e.pairs[0].verifier.is_none());
        assert!(e.overall.is_none());
        assert_eq!(e.pairs[0].safety_margin, Some(1));
        let table = format_table(&e);
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("pair"));
    }
}
