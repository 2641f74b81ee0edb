//! Per-class precision/recall/F, the count-weighted average F and the
//! isolated-error correction diagnostic.

use std::fmt::Write as _;
use std::ops::Range;

use serde_json::{json, Map, Value};

use crate::data::{class_distribution, ClassDistribution};
use crate::error::{Error, Result};
use crate::{Class, Labels};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: Class,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl ClassMetrics {
    /// Derives precision, recall and F from confusion counts. Any ratio with
    /// a zero denominator is 0.
    pub fn from_counts(class: Class, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        let f = ratio(2.0 * precision * recall, precision + recall);
        ClassMetrics {
            class,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f,
        }
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Human-readable notes for every metric that fell back to 0 because its
    /// denominator was zero.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.tp + self.fp == 0 {
            out.push(format!("{}: no positive predictions, precision set to 0", self.class));
        }
        if self.tp + self.fn_ == 0 {
            out.push(format!("{}: no positive ground truth, recall set to 0", self.class));
        }
        if self.precision + self.recall == 0.0 {
            out.push(format!("{}: precision and recall both 0, F set to 0", self.class));
        }
        out
    }
}

fn check_len(left_name: &'static str, left: usize, right_name: &'static str, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch {
            left_name,
            left,
            right_name,
            right,
        });
    }
    Ok(())
}

/// Confusion counts and derived metrics for each class, tallied
/// independently.
pub fn class_metrics(predictions: &[Labels], truth: &[Labels]) -> Result<[ClassMetrics; 3]> {
    check_len("predictions", predictions.len(), "truth", truth.len())?;
    Ok(Class::ALL.map(|class| {
        let k = class.index();
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (p, t) in predictions.iter().zip(truth) {
            match (p[k], t[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        ClassMetrics::from_counts(class, tp, fp, fn_, tn)
    }))
}

/// `sum_c F_c * n_c / sum_c n_c`, with `n_c` the ground-truth positive count
/// of each class.
pub fn weighted_avg_f(metrics: &[ClassMetrics; 3], counts: &ClassDistribution) -> Result<f64> {
    weighted_avg_f_values(metrics.map(|m| m.f), Class::ALL.map(|c| counts.count(c)))
}

pub fn weighted_avg_f_values(f: [f64; 3], counts: [usize; 3]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("weighted average F needs at least one positive ground-truth label"));
    }
    let num: f64 = f.iter().zip(counts).map(|(f, n)| f * n as f64).sum();
    Ok(num / total as f64)
}

/// Isolated baseline errors per class and how many of them the sequence
/// model got right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IsolatedErrors {
    pub count: [usize; 3],
    pub corrected: [usize; 3],
}

impl IsolatedErrors {
    /// Fraction corrected per class; `None` when the baseline made no
    /// isolated errors for that class.
    pub fn rates(&self) -> [Option<f64>; 3] {
        [0, 1, 2].map(|k| (self.count[k] > 0).then(|| self.corrected[k] as f64 / self.count[k] as f64))
    }
}

/// Counts positions where the baseline is wrong but both neighbours within
/// the same run are right, and how often the sequence model is right there.
/// `runs` are the contiguous index ranges of each sampled edge; the first and
/// last position of a run have no complete neighbourhood and never count.
pub fn isolated_errors(
    baseline: &[Labels],
    sequence: &[Labels],
    truth: &[Labels],
    runs: &[Range<usize>],
) -> Result<IsolatedErrors> {
    check_len("baseline", baseline.len(), "truth", truth.len())?;
    check_len("sequence", sequence.len(), "truth", truth.len())?;
    let mut out = IsolatedErrors::default();
    for run in runs {
        if run.end > truth.len() || run.start > run.end {
            return Err(Error::invalid(format!(
                "run {}..{} outside {} labels",
                run.start,
                run.end,
                truth.len()
            )));
        }
        if run.len() < 3 {
            continue;
        }
        for t in run.start + 1..run.end - 1 {
            for k in 0..3 {
                let ok = |i: usize| baseline[i][k] == truth[i][k];
                if !ok(t) && ok(t - 1) && ok(t + 1) {
                    out.count[k] += 1;
                    if sequence[t][k] == truth[t][k] {
                        out.corrected[k] += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn isolated_error_correction_rate(
    baseline: &[Labels],
    sequence: &[Labels],
    truth: &[Labels],
    runs: &[Range<usize>],
) -> Result<[Option<f64>; 3]> {
    Ok(isolated_errors(baseline, sequence, truth, runs)?.rates())
}

/// Per-class metrics and the weighted average F of one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: [ClassMetrics; 3],
    pub counts: ClassDistribution,
    pub avg_f: f64,
}

impl EvalReport {
    /// Weights come from the ground-truth positives of `truth`.
    pub fn evaluate(predictions: &[Labels], truth: &[Labels]) -> Result<Self> {
        let metrics = class_metrics(predictions, truth)?;
        let counts = class_distribution(truth.iter());
        let avg_f = weighted_avg_f(&metrics, &counts)?;
        Ok(EvalReport { metrics, counts, avg_f })
    }

    pub fn warnings(&self) -> Vec<String> {
        self.metrics.iter().flat_map(ClassMetrics::warnings).collect()
    }

    pub fn to_json_value(&self) -> Value {
        let mut map = Map::new();
        for m in &self.metrics {
            map.insert(
                m.class.tag().to_string(),
                json!({
                    "precision": m.precision,
                    "recall": m.recall,
                    "f": m.f,
                    "tp": m.tp,
                    "fp": m.fp,
                    "fn": m.fn_,
                    "tn": m.tn,
                }),
            );
        }
        map.insert("avg_f".into(), json!(self.avg_f));
        Value::Object(map)
    }

    /// Pretty-printed JSON with sorted keys and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json_value()).expect("report serializes");
        s.push('\n');
        s
    }

    /// Fixed-width table: one row per class, the average F on the first row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:>9} {:>7} {:>6} {:>7}", "Class", "Precision", "Recall", "F", "Avg. F");
        for (i, m) in self.metrics.iter().enumerate() {
            let avg = if i == 0 { format!("{:.4}", self.avg_f) } else { String::new() };
            let _ = writeln!(
                s,
                "{:<6} {:>9.4} {:>7.4} {:>6.4} {:>7}",
                m.class.tag(),
                m.precision,
                m.recall,
                m.f,
                avg
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn labels(rs: &[u8]) -> Vec<Labels> {
        rs.iter().map(|&b| [b == 1, false, false]).collect()
    }

    #[test]
    fn published_weighted_averages() {
        let a = weighted_avg_f_values([0.96, 0.88, 0.84], [857, 279, 354]).unwrap();
        assert_abs_diff_eq!(a, 0.916_510_067_114_094, epsilon = 1e-12);
        assert_eq!(format!("{a:.4}"), "0.9165");
        assert_eq!(format!("{a:.2}"), "0.92");
        let b = weighted_avg_f_values([0.92, 0.77, 0.76], [879, 403, 784]).unwrap();
        assert_abs_diff_eq!(b, 0.830_024_201_355_275_9, epsilon = 1e-12);
        assert_eq!(format!("{b:.4}"), "0.8300");
        assert_eq!(format!("{b:.2}"), "0.83");
    }

    #[test]
    fn equal_counts_give_plain_mean() {
        let a = weighted_avg_f_values([0.3, 0.6, 0.9], [5, 5, 5]).unwrap();
        assert_abs_diff_eq!(a, 0.6, epsilon = 1e-15);
        assert!(weighted_avg_f_values([0.3, 0.6, 0.9], [0, 0, 0]).is_err());
    }

    #[test]
    fn eight_of_ten() {
        let pred = labels(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0]);
        let truth = labels(&[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 1, 1]);
        let rs = class_metrics(&pred, &truth).unwrap()[0];
        assert_eq!((rs.tp, rs.fp, rs.fn_, rs.tn), (8, 2, 2, 0));
        assert_abs_diff_eq!(rs.precision, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(rs.recall, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(rs.f, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_and_identity() {
        let truth = labels(&[1, 0, 1, 1]);
        let none = labels(&[0, 0, 0, 0]);
        let rs = class_metrics(&none, &truth).unwrap()[0];
        assert_eq!((rs.precision, rs.recall, rs.f), (0.0, 0.0, 0.0));
        assert_eq!(rs.warnings().len(), 2);
        let same = class_metrics(&truth, &truth).unwrap()[0];
        assert_eq!((same.precision, same.recall, same.f), (1.0, 1.0, 1.0));
        assert!(same.warnings().is_empty());
        assert!(matches!(
            class_metrics(&truth[..3], &truth),
            Err(Error::LengthMismatch { left: 3, right: 4, .. })
        ));
    }

    #[test]
    fn isolated_basic() {
        let truth = labels(&[1, 1, 1, 1, 1]);
        let base = labels(&[1, 0, 1, 1, 1]);
        let r = isolated_error_correction_rate(&base, &truth, &truth, &[0..5]).unwrap();
        assert_eq!(r, [Some(1.0), None, None]);
        let r = isolated_error_correction_rate(&base, &base, &truth, &[0..5]).unwrap();
        assert_eq!(r[0], Some(0.0));
        // The same error at a run boundary is not isolated.
        let r = isolated_error_correction_rate(&base, &truth, &truth, &[0..1, 1..5]).unwrap();
        assert_eq!(r[0], None);
        assert!(isolated_errors(&base[..4], &truth, &truth, &[0..4]).is_err());
    }

    /// Independent enumeration: slide a length-3 window over each run and
    /// pattern-match correct/wrong/correct.
    fn brute_force(base: &[Labels], seq: &[Labels], truth: &[Labels], runs: &[Range<usize>]) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        for k in 0..3 {
            for run in runs {
                let idx: Vec<usize> = run.clone().collect();
                for w in idx.windows(3) {
                    let pat: Vec<bool> = w.iter().map(|&i| base[i][k] == truth[i][k]).collect();
                    if pat == [true, false, true] {
                        out[k].0 += 1;
                        out[k].1 += usize::from(seq[w[1]][k] == truth[w[1]][k]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn isolated_matches_enumeration_on_corridor() {
        use crate::data::{synth_corridor, synth_corruption_mask, SynthConfig};
        use rand::{Rng, SeedableRng};
        let cfg = SynthConfig {
            n_points: 100,
            ..Default::default()
        };
        let recs = synth_corridor(&cfg, 11).unwrap();
        let truth: Vec<Labels> = recs.iter().map(|r| r.labels).collect();
        let mask = synth_corruption_mask(&cfg, 11).unwrap();
        // Baseline flips every label at corrupted points plus a few random
        // extra errors; the "sequence" model fixes a random subset.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let base: Vec<Labels> = truth
            .iter()
            .zip(&mask)
            .map(|(t, &m)| t.map(|v| if m || rng.random_bool(0.05) { !v } else { v }))
            .collect();
        let seq: Vec<Labels> = base
            .iter()
            .zip(&truth)
            .map(|(b, t)| [0, 1, 2].map(|k| if rng.random_bool(0.7) { t[k] } else { b[k] }))
            .collect();
        let runs = [0..37, 37..100];
        let got = isolated_errors(&base, &seq, &truth, &runs).unwrap();
        let want = brute_force(&base, &seq, &truth, &runs);
        for k in 0..3 {
            assert_eq!((got.count[k], got.corrected[k]), want[k]);
        }
        assert!(got.count.iter().sum::<usize>() > 0);
    }

    #[test]
    fn report_formats() {
        let truth = vec![[true, false, true], [true, true, false], [false, false, true]];
        let pred = vec![[true, false, true], [false, true, false], [false, false, false]];
        let rep = EvalReport::evaluate(&pred, &truth).unwrap();
        let v: Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(v["RS"]["tp"], 1);
        assert_eq!(v["RS"]["fn"], 1);
        assert_eq!(v["MCB"]["f"], 1.0);
        assert!(v["avg_f"].is_f64());
        let table = rep.to_table();
        assert!(table.starts_with("Class  Precision  Recall      F  Avg. F\n"));
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().nth(1).unwrap().starts_with("RS"));
    }

    proptest! {
        #[test]
        fn avg_f_bounds_and_scaling(
            f in prop::array::uniform3(0.0f64..=1.0),
            n in prop::array::uniform3(0usize..1000),
            k in 1usize..50,
        ) {
            prop_assume!(n.iter().sum::<usize>() > 0);
            let a = weighted_avg_f_values(f, n).unwrap();
            let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-12 <= a && a <= hi + 1e-12);
            let scaled = weighted_avg_f_values(f, n.map(|c| c * k)).unwrap();
            prop_assert!((a - scaled).abs() < 1e-12);
        }

        #[test]
        fn metrics_permutation_invariant(
            rows in prop::collection::vec((prop::array::uniform3(any::<bool>()), prop::array::uniform3(any::<bool>())), 1..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (p, t): (Vec<Labels>, Vec<Labels>) = rows.iter().cloned().unzip();
            let m = class_metrics(&p, &t).unwrap();
            for c in &m {
                prop_assert_eq!(c.n(), rows.len());
            }
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p2, t2): (Vec<Labels>, Vec<Labels>) = shuffled.into_iter().unzip();
            prop_assert_eq!(class_metrics(&p2, &t2).unwrap(), m);
        }
    }
}
