//! Sequence-level confusion counts, metrics, threshold sweeps and ROC area.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::critic::top_n;
use crate::detector::SessionScores;
use crate::error::{invalid, Result};
use crate::sequencer::Label;

/// Positive = abnormal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Abnormal, Label::Abnormal) => self.tp += 1,
            (Label::Abnormal, Label::Normal) => self.fp += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
            (Label::Normal, Label::Abnormal) => self.fn_ += 1,
        }
    }
}

pub fn confusion(predicted: &BTreeMap<String, Label>, truth: &BTreeMap<String, Label>) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() || predicted.keys().ne(truth.keys()) {
        let missing = truth.keys().find(|k| !predicted.contains_key(*k));
        let extra = predicted.keys().find(|k| !truth.contains_key(*k));
        return Err(invalid(format!(
            "prediction and label session sets differ (first missing: {missing:?}, first unlabeled: {extra:?})"
        )));
    }
    let mut c = ConfusionCounts::default();
    for (sid, &p) in predicted {
        c.record(p, truth[sid]);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub fp_rate: f64,
    pub accuracy: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn metrics(c: &ConfusionCounts) -> MetricReport {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let fp_rate = ratio(c.fp, c.fp + c.tn);
    let accuracy = ratio(c.tp + c.tn, c.total());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    MetricReport { recall, precision, f1, fp_rate, accuracy, degenerate }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta_n: f64,
    pub n: usize,
    pub counts: ConfusionCounts,
}

impl SweepPoint {
    pub fn metrics(&self) -> MetricReport {
        metrics(&self.counts)
    }
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || invalid(format!("bad grid {text:?}"));
    let grid: Vec<f64> = if text.contains(':') {
        let parts: Vec<f64> = text.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| start + i as f64 * step).collect()
    } else {
        text.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|&t| !(t > 0.0 && t <= 100.0)) {
        return Err(bad());
    }
    Ok(grid)
}

/// Labels every session at each rank threshold from cached scores.
pub fn sweep(
    scores: &[SessionScores],
    truth: &BTreeMap<String, Label>,
    grid: &[f64],
    dim: usize,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(invalid("empty threshold grid"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("threshold grid must be ascending"));
    }
    let worst: Vec<(usize, Label)> = scores
        .iter()
        .map(|s| {
            let t = truth.get(&s.session_id).copied().ok_or_else(|| invalid(format!("no label for {}", s.session_id)))?;
            Ok((s.max_rank(), t))
        })
        .collect::<Result<_>>()?;
    if worst.len() != truth.len() {
        return Err(invalid("scored sessions and labels differ"));
    }
    Ok(grid
        .iter()
        .map(|&theta| {
            let n = top_n(theta, dim);
            let mut c = ConfusionCounts::default();
            for &(rank, t) in &worst {
                let p = if rank > n { Label::Abnormal } else { Label::Normal };
                c.record(p, t);
            }
            SweepPoint { theta_n: theta, n, counts: c }
        })
        .collect())
}

/// `(fp_rate, tp_rate)` per sweep point.
pub fn roc_points(points: &[SweepPoint]) -> Vec<(f64, f64)> {
    points
        .iter()
        .map(|p| {
            let m = p.metrics();
            (m.fp_rate, m.recall)
        })
        .collect()
}

/// Trapezoidal area under the ROC polyline through `(0,0)`, the points, and `(1,1)`.
pub fn roc_auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(invalid("no ROC points"));
    }
    if points.iter().any(|&(x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y)) {
        return Err(invalid("ROC coordinates must lie in [0, 1]"));
    }
    let mut pts = Vec::with_capacity(points.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(points);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum())
}

/// Best F1 over the sweep; earliest point wins ties.
pub fn best_point(points: &[SweepPoint]) -> Option<&SweepPoint> {
    points.iter().fold(None, |best: Option<&SweepPoint>, p| match best {
        Some(b) if b.metrics().f1 >= p.metrics().f1 => Some(b),
        _ => Some(p),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub metrics: MetricReport,
}

impl EvalReport {
    pub fn new(counts: ConfusionCounts) -> Self {
        EvalReport { counts, metrics: metrics(&counts) }
    }

    /// Aligned two-column table, percentages to two decimals.
    pub fn to_table(&self) -> String {
        let c = &self.counts;
        let m = &self.metrics;
        let mut s = String::new();
        let rows: [(&str, String); 9] = [
            ("TP", c.tp.to_string()),
            ("FP", c.fp.to_string()),
            ("TN", c.tn.to_string()),
            ("FN", c.fn_.to_string()),
            ("FP Rate", pct(m.fp_rate)),
            ("Recall", pct(m.recall)),
            ("Precision", pct(m.precision)),
            ("F1 Score", pct(m.f1)),
            ("Accuracy", pct(m.accuracy)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<10} {v:>10}");
        }
        if m.degenerate {
            s.push_str("(some ratios had zero denominators and are reported as 0)\n");
        }
        s
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("theta_n,n,tp,fp,tn,fn,f1\n");
    for p in points {
        let c = &p.counts;
        let _ = writeln!(s, "{},{},{},{},{},{},{:.6}", p.theta_n, p.n, c.tp, c.fp, c.tn, c.fn_, p.metrics().f1);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::EventScore;

    fn labels(v: &[(&str, Label)]) -> BTreeMap<String, Label> {
        v.iter().map(|(k, l)| (k.to_string(), *l)).collect()
    }

    #[test]
    fn confusion_cases() {
        use Label::*;
        let truth = labels(&[("a", Abnormal), ("b", Abnormal), ("c", Normal), ("d", Normal), ("e", Normal)]);
        assert_eq!(confusion(&truth, &truth).unwrap(), ConfusionCounts::new(2, 0, 3, 0));
        let blind = labels(&[("a", Normal), ("b", Normal), ("c", Normal), ("d", Normal), ("e", Normal)]);
        let c = confusion(&blind, &truth).unwrap();
        assert_eq!((c.tp, c.fp), (0, 0));
        let mut one = truth.clone();
        one.insert("c".into(), Abnormal);
        assert_eq!(confusion(&one, &truth).unwrap().fp, 1);
        let short = labels(&[("a", Normal)]);
        assert!(confusion(&short, &truth).is_err());
    }

    #[test]
    fn perfect_and_empty_metrics() {
        let m = metrics(&ConfusionCounts::new(2, 0, 3, 0));
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy, m.fp_rate), (1.0, 1.0, 1.0, 1.0, 0.0));
        assert!(!m.degenerate);
        let m = metrics(&ConfusionCounts::new(0, 0, 5, 0));
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.degenerate);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[(0.0, 1.0)]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[(0.0, 0.0)]).unwrap(), 0.5);
        assert!((roc_auc(&[(0.2, 0.8)]).unwrap() - 0.8).abs() < 1e-15);
        assert!((roc_auc(&[(0.2, 0.8), (0.2, 0.8), (0.0, 0.0)]).unwrap() - 0.8).abs() < 1e-15);
        assert!(roc_auc(&[]).is_err());
        assert!(roc_auc(&[(1.2, 0.5)]).is_err());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1:5:1").unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(parse_grid("1:100:1").unwrap().len(), 100);
        assert_eq!(parse_grid("7.5, 9").unwrap(), vec![7.5, 9.0]);
        assert!(parse_grid("0:10:1").is_err());
        assert!(parse_grid("5:1:1").is_err());
        assert!(parse_grid("").is_err());
    }

    fn scored(id: &str, ranks: &[usize]) -> SessionScores {
        SessionScores {
            session_id: id.into(),
            events: ranks.iter().enumerate().map(|(i, &r)| EventScore { pos: i + 1, key: 0, rank: r, prob: 0.1 }).collect(),
            has_unk: false,
        }
    }

    #[test]
    fn sweep_is_monotone_and_ends_blind() {
        use Label::*;
        let scores = vec![scored("a", &[1, 7]), scored("b", &[2, 1]), scored("c", &[10]), scored("d", &[1])];
        let truth = labels(&[("a", Abnormal), ("b", Normal), ("c", Abnormal), ("d", Normal)]);
        let grid = parse_grid("1:100:1").unwrap();
        let pts = sweep(&scores, &truth, &grid, 10).unwrap();
        for w in pts.windows(2) {
            assert!(w[1].counts.tp <= w[0].counts.tp && w[1].counts.fp <= w[0].counts.fp);
        }
        let last = pts.last().unwrap().counts;
        assert_eq!((last.tp, last.fp), (0, 0));
        let single = sweep(&scores, &truth, &[30.0], 10).unwrap();
        assert_eq!(single[0], pts[29]);
        assert!(sweep(&scores, &truth, &[], 10).is_err());
        assert!(sweep(&scores, &truth, &[5.0, 1.0], 10).is_err());
        let best = best_point(&pts).unwrap();
        assert_eq!(best.metrics().f1, 1.0);
    }

    #[test]
    fn table_and_csv() {
        let r = EvalReport::new(ConfusionCounts::new(16367, 2424, 197576, 471));
        let t = r.to_table();
        assert!(t.contains("Recall         97.20%"));
        assert!(t.contains("F1 Score       91.87%"));
        let csv = sweep_csv(&[SweepPoint { theta_n: 9.0, n: 2, counts: r.counts }]);
        assert!(csv.starts_with("theta_n,n,tp,fp,tn,fn,f1\n9,2,16367,2424,197576,471,0.918"));
    }
}
