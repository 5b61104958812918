//! Metrics, residual diagnostics by feature bucket, mask histograms and
//! CSV / JSON exports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ShiftRegion};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::train::TrainedModel;

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: (pred.len(), 1),
            rhs: (truth.len(), 1),
        });
    }
    if pred.is_empty() {
        return Err(Error::Argument("metric over zero rows".into()));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    mse(pred, truth).map(f64::sqrt)
}

/// Area under the ROC curve via the rank-sum statistic, ties get midranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(scores, labels)?;
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Argument("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric { op: "auc" });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&r| labels[r] == 1.0).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// A metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; absent for a single seed.
    pub std: Option<f64>,
    pub per_seed: Vec<f64>,
}

impl MetricReport {
    pub fn from_values(metric: impl Into<String>, per_seed: Vec<f64>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Argument("no per-seed values".into()));
        }
        let (mean, std) = mean_std(&per_seed);
        Ok(MetricReport {
            metric: metric.into(),
            mean,
            std,
            per_seed,
        })
    }
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Residual summary of one bucket. `mean` / `sd` are absent for empty
/// buckets (and `sd` for single-row buckets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean: Option<f64>,
    pub mean_abs: Option<f64>,
    pub sd: Option<f64>,
    /// Shift regions the bucket intersects; empty means unshifted.
    pub regions: Vec<ShiftRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBuckets {
    pub feature: String,
    pub edges: Vec<f64>,
    pub buckets: Vec<Bucket>,
}

/// Shift ranges used to tag buckets: `missing` is closed, `shift` is
/// `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftRanges {
    pub missing: (f64, f64),
    pub shift: (f64, f64),
}

/// `n` equal-width bucket edges over `[lo, hi]`.
pub fn equal_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Buckets `[e_k, e_k+1)` (the last one closed) plus open-ended buckets
/// below the first and above the last edge, so every row lands somewhere.
/// Residual is prediction minus truth.
pub fn residual_buckets(
    feature: &str,
    pred: &[f64],
    truth: &[f64],
    values: &[f64],
    edges: &[f64],
    ranges: Option<ShiftRanges>,
) -> Result<ResidualBuckets> {
    check_pair(pred, truth)?;
    if values.len() != pred.len() {
        return Err(Error::Dimension {
            op: "residual_buckets",
            lhs: (values.len(), 1),
            rhs: (pred.len(), 1),
        });
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Argument("bucket edges must be strictly increasing".into()));
    }
    let last = edges.len() - 1;
    let mut bounds = vec![(f64::NEG_INFINITY, edges[0])];
    bounds.extend(edges.windows(2).map(|w| (w[0], w[1])));
    bounds.push((edges[last], f64::INFINITY));
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); bounds.len()];
    for ((p, y), &v) in pred.iter().zip(truth).zip(values) {
        let slot = if v < edges[0] {
            0
        } else if v > edges[last] {
            bounds.len() - 1
        } else {
            // index of the first edge strictly greater than v, clamped so the
            // top edge belongs to the last inner bucket
            edges.partition_point(|&e| e <= v).min(last)
        };
        members[slot].push(p - y);
    }
    let n_buckets = bounds.len();
    let buckets = bounds
        .iter()
        .zip(members)
        .enumerate()
        .map(|(k, (&(lo, hi), res))| {
            let span = Span {
                lo,
                lo_closed: k > 0 && k < n_buckets - 1,
                hi,
                hi_closed: k == n_buckets - 2,
            };
            let count = res.len();
            let (mean, sd, mean_abs) = if count == 0 {
                (None, None, None)
            } else {
                let (m, s) = mean_std(&res);
                (Some(m), s, Some(res.iter().map(|r| r.abs()).sum::<f64>() / count as f64))
            };
            Bucket {
                lo,
                hi,
                count,
                mean,
                mean_abs,
                sd,
                regions: ranges.map(|r| regions_of(span, r)).unwrap_or_default(),
            }
        })
        .collect();
    Ok(ResidualBuckets {
        feature: feature.to_string(),
        edges: edges.to_vec(),
        buckets,
    })
}

/// Interval with per-end closedness.
#[derive(Clone, Copy)]
struct Span {
    lo: f64,
    lo_closed: bool,
    hi: f64,
    hi_closed: bool,
}

impl Span {
    fn intersects(self, other: Span) -> bool {
        let (lo, lo_closed) = match self.lo.total_cmp(&other.lo) {
            std::cmp::Ordering::Greater => (self.lo, self.lo_closed),
            std::cmp::Ordering::Less => (other.lo, other.lo_closed),
            std::cmp::Ordering::Equal => (self.lo, self.lo_closed && other.lo_closed),
        };
        let (hi, hi_closed) = match self.hi.total_cmp(&other.hi) {
            std::cmp::Ordering::Less => (self.hi, self.hi_closed),
            std::cmp::Ordering::Greater => (other.hi, other.hi_closed),
            std::cmp::Ordering::Equal => (self.hi, self.hi_closed && other.hi_closed),
        };
        lo < hi || (lo == hi && lo_closed && hi_closed)
    }
}

fn regions_of(bucket: Span, ranges: ShiftRanges) -> Vec<ShiftRegion> {
    let missing = Span {
        lo: ranges.missing.0,
        lo_closed: true,
        hi: ranges.missing.1,
        hi_closed: true,
    };
    let shift = Span {
        lo: ranges.shift.0,
        lo_closed: false,
        hi: ranges.shift.1,
        hi_closed: true,
    };
    let mut out = Vec::new();
    if bucket.intersects(missing) {
        out.push(ShiftRegion::Missingness);
    }
    if bucket.intersects(shift) {
        out.push(ShiftRegion::Distribution);
    }
    out
}

impl ResidualBuckets {
    /// Row-weighted mean |residual| over the buckets accepted by `pick`.
    pub fn mean_abs_where(&self, pick: impl Fn(&Bucket) -> bool) -> Option<f64> {
        let (sum, n) = self
            .buckets
            .iter()
            .filter(|b| pick(b))
            .filter_map(|b| b.mean_abs.map(|m| (m * b.count as f64, b.count)))
            .fold((0.0, 0usize), |(s, n), (bs, bn)| (s + bs, n + bn));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn total_count(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "lo,hi,count,mean,sd,mean_abs,regions").map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.buckets {
            let tags: Vec<&str> = b
                .regions
                .iter()
                .map(|r| match r {
                    ShiftRegion::Missingness => "missingness",
                    ShiftRegion::Distribution => "distribution",
                    ShiftRegion::None => "none",
                })
                .collect();
            let tags = if tags.is_empty() { "none".to_string() } else { tags.join("|") };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                b.lo,
                b.hi,
                b.count,
                opt(b.mean),
                opt(b.sd),
                opt(b.mean_abs),
                tags
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Observed-value histograms of one feature for the original training
/// rows, the test rows and the masked training rows, on shared bins.
/// Entries flagged missing are left out of each histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramComparison {
    pub feature: String,
    pub edges: Vec<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub masked_train: Vec<usize>,
}

fn histogram(values: impl Iterator<Item = f64>, edges: &[f64]) -> Vec<usize> {
    let mut counts = vec![0; edges.len() - 1];
    let last = edges.len() - 1;
    for v in values {
        if v < edges[0] || v > edges[last] {
            continue;
        }
        counts[edges.partition_point(|&e| e <= v).clamp(1, last) - 1] += 1;
    }
    counts
}

pub fn mask_histogram(
    train: &Dataset,
    test: &Dataset,
    masked_indicators: &Matrix,
    feature: &str,
    edges: &[f64],
) -> Result<HistogramComparison> {
    let j = train
        .feature_index(feature)
        .ok_or_else(|| Error::Schema(format!("unknown feature `{feature}`")))?;
    if test.feature_index(feature) != Some(j) {
        return Err(Error::Schema(format!("feature `{feature}` missing from test data")));
    }
    if masked_indicators.dim() != train.indicators.dim() {
        return Err(Error::Dimension {
            op: "mask_histogram",
            lhs: train.indicators.dim(),
            rhs: masked_indicators.dim(),
        });
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Argument("histogram edges must be strictly increasing".into()));
    }
    let observed = |d: &Dataset, ind: &Matrix| -> Vec<f64> {
        d.features
            .column(j)
            .iter()
            .zip(ind.column(j))
            .filter(|(_, &i)| i == 0.0)
            .map(|(&v, _)| v)
            .collect()
    };
    Ok(HistogramComparison {
        feature: feature.to_string(),
        edges: edges.to_vec(),
        train: histogram(observed(train, &train.indicators).into_iter(), edges),
        test: histogram(observed(test, &test.indicators).into_iter(), edges),
        masked_train: histogram(observed(train, masked_indicators).into_iter(), edges),
    })
}

/// Fraction of rows whose `values` fall in `range` (closed) that are
/// flagged in `indicator`. `None` when no row falls in the range.
pub fn mask_rate_in_range(values: &[f64], indicator: &[f64], range: (f64, f64), closed_lo: bool) -> Option<f64> {
    let (mut hit, mut n) = (0.0, 0usize);
    for (&v, &i) in values.iter().zip(indicator) {
        let inside = (if closed_lo { v >= range.0 } else { v > range.0 }) && v <= range.1;
        if inside {
            hit += i;
            n += 1;
        }
    }
    (n > 0).then(|| hit / n as f64)
}

/// `source` column (`train` / `test`) followed by the last hidden layer.
pub fn export_embeddings(model: &TrainedModel, train: &Dataset, test: &Dataset, path: &Path) -> Result<()> {
    let parts = [("train", model.embeddings(train)?), ("test", model.embeddings(test)?)];
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let dims = parts[0].1.ncols();
    let header: Vec<String> = std::iter::once("source".to_string())
        .chain((0..dims).map(|k| format!("e{k}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (source, emb) in &parts {
        for row in emb.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{source},{}", cells.join(",")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// 0/1 matrix with one column per feature.
pub fn write_mask_csv(path: &Path, names: &[&str], indicators: &Matrix) -> Result<()> {
    if names.len() != indicators.ncols() {
        return Err(Error::Dimension {
            op: "write_mask_csv",
            lhs: (names.len(), 1),
            rhs: indicators.dim(),
        });
    }
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "{}", names.join(",")).map_err(io)?;
    for row in indicators.rows() {
        let cells: Vec<&str> = row.iter().map(|&v| if v >= 0.5 { "1" } else { "0" }).collect();
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Metric name to report, serialized as `{name: {mean, std, per_seed}}`.
pub type Summary = BTreeMap<String, MetricReport>;

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Argument(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mse_and_rmse_basics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert_abs_diff_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_std_uses_n_minus_one() {
        let r = MetricReport::from_values("mse", vec![1.0, 3.0]).unwrap();
        assert_eq!(r.mean, 2.0);
        assert_abs_diff_eq!(r.std.unwrap(), 2f64.sqrt());
        assert_eq!(MetricReport::from_values("mse", vec![1.0]).unwrap().std, None);
    }

    #[test]
    fn single_bucket_mean_is_overall_mean() {
        let pred = [1.0, 2.0, 4.0];
        let truth = [0.0, 0.0, 0.0];
        let b = residual_buckets("x", &pred, &truth, &[0.1, 0.5, 0.9], &[0.0, 1.0], None).unwrap();
        assert_eq!(b.buckets.len(), 3);
        assert_abs_diff_eq!(b.buckets[1].mean.unwrap(), 7.0 / 3.0);
        assert_eq!(b.buckets[0].mean, None);
        assert_eq!(b.total_count(), 3);
    }

    #[test]
    fn edge_values_land_in_inner_buckets() {
        let v = [-1.0, 0.0, 0.5, 1.0, 2.0];
        let z = [0.0; 5];
        let b = residual_buckets("x", &z, &z, &v, &[0.0, 0.5, 1.0], None).unwrap();
        let counts: Vec<usize> = b.buckets.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![1, 1, 2, 1]);
        assert!(b.buckets.iter().filter_map(|b| b.mean).all(|m| m == 0.0));
    }

    #[test]
    fn buckets_tagged_by_region() {
        let ranges = ShiftRanges {
            missing: (-3.5, 0.0),
            shift: (0.0, 3.5),
        };
        let edges = equal_edges(-3.5, 3.5, 14);
        let b = residual_buckets("x1", &[0.0], &[0.0], &[0.0], &edges, Some(ranges)).unwrap();
        assert!(b.buckets[0].regions.is_empty());
        assert_eq!(b.buckets[1].regions, vec![ShiftRegion::Missingness]);
        // [0, 0.5) holds 0 (missing) and (0, 0.5) (shifted)
        assert_eq!(b.buckets[8].regions, vec![ShiftRegion::Missingness, ShiftRegion::Distribution]);
        assert_eq!(b.buckets[14].regions, vec![ShiftRegion::Distribution]);
        assert!(b.buckets[15].regions.is_empty());
    }

    #[test]
    fn histogram_masking() {
        let x = ndarray::arr2(&[[0.1], [0.6], [0.7]]);
        let d = Dataset::new(
            x,
            Matrix::zeros((3, 1)),
            None,
            vec![crate::data::FeatureMeta::numeric("x", 0.0)],
        )
        .unwrap();
        let none = mask_histogram(&d, &d, &Matrix::zeros((3, 1)), "x", &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(none.masked_train, none.train);
        let all = mask_histogram(&d, &d, &Matrix::ones((3, 1)), "x", &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(all.masked_train, vec![0, 0]);
        assert!(mask_histogram(&d, &d, &Matrix::ones((3, 1)), "y", &[0.0, 1.0]).is_err());
    }

    #[test]
    fn range_mask_rate() {
        let v = [-1.0, -0.5, 0.5, 1.0];
        let i = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(mask_rate_in_range(&v, &i, (-3.5, 0.0), true), Some(0.5));
        assert_eq!(mask_rate_in_range(&v, &i, (0.0, 3.5), false), Some(0.0));
        assert_eq!(mask_rate_in_range(&v, &i, (5.0, 6.0), true), None);
    }
}
