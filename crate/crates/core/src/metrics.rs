//! Face-alignment metrics: normalized mean error, failure rate, cumulative
//! error distribution and its area, with per-attribute breakdowns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{synth, Attribute};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkScheme, LandmarkSet, Point};

pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.1;
pub const DEFAULT_AUC_LIMIT: f64 = 0.1;
pub const DEFAULT_GRID_RESOLUTION: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    InterOcular,
    InterPupil,
    CustomPair,
}

/// Distance between the centroids of two landmark groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRule {
    pub kind: NormalizationKind,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl NormalizationRule {
    /// Outer eye corners: 36/45 for 68 points, 60/72 for WFLW.
    pub fn inter_ocular(scheme: LandmarkScheme) -> Result<Self> {
        let (a, b) = match scheme {
            LandmarkScheme::P68 => (36, 45),
            LandmarkScheme::P98 => (60, 72),
            LandmarkScheme::Synth(synth::SYNTH_LANDMARKS) => synth::OUTER_EYE_CORNERS,
            other => return Err(Error::invalid(format!("no inter-ocular convention for {other}"))),
        };
        Ok(Self {
            kind: NormalizationKind::InterOcular,
            first: vec![a],
            second: vec![b],
        })
    }

    /// Eye centroids: 36-41 / 42-47 for 68 points, 60-67 / 68-75 for WFLW.
    pub fn inter_pupil(scheme: LandmarkScheme) -> Result<Self> {
        let (first, second): (Vec<usize>, Vec<usize>) = match scheme {
            LandmarkScheme::P68 => ((36..42).collect(), (42..48).collect()),
            LandmarkScheme::P98 => ((60..68).collect(), (68..76).collect()),
            LandmarkScheme::Synth(synth::SYNTH_LANDMARKS) => (vec![0, 1, 2], vec![3, 4, 5]),
            other => return Err(Error::invalid(format!("no inter-pupil convention for {other}"))),
        };
        Ok(Self {
            kind: NormalizationKind::InterPupil,
            first,
            second,
        })
    }

    pub fn custom_pair(a: usize, b: usize) -> Self {
        Self {
            kind: NormalizationKind::CustomPair,
            first: vec![a],
            second: vec![b],
        }
    }

    pub fn for_kind(kind: NormalizationKind, scheme: LandmarkScheme) -> Result<Self> {
        match kind {
            NormalizationKind::InterOcular => Self::inter_ocular(scheme),
            NormalizationKind::InterPupil => Self::inter_pupil(scheme),
            NormalizationKind::CustomPair => Err(Error::invalid("custom pair rules need explicit indices")),
        }
    }

    pub fn normalizer(&self, gt: &LandmarkSet) -> Result<f64> {
        let centroid = |idx: &[usize]| -> Result<Point> {
            if idx.is_empty() {
                return Err(Error::invalid("empty landmark group in normalization rule"));
            }
            let mut x = 0.0;
            let mut y = 0.0;
            for &i in idx {
                let p = gt
                    .points()
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("landmark index {i} out of range for {}", gt.scheme())))?;
                x += p.x;
                y += p.y;
            }
            let n = idx.len() as f64;
            Ok(Point::new(x / n, y / n))
        };
        Ok(centroid(&self.first)?.distance(&centroid(&self.second)?))
    }
}

/// Mean point-to-point error of `pred` against `gt`, divided by the rule's
/// normalizing distance measured on `gt`.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, rule: &NormalizationRule) -> Result<f64> {
    if pred.scheme() != gt.scheme() {
        return Err(Error::invalid(format!(
            "prediction scheme {} does not match ground truth {}",
            pred.scheme(),
            gt.scheme()
        )));
    }
    let d = rule.normalizer(gt)?;
    if !(d > 0.0) {
        return Err(Error::ZeroNormalizer(String::new()));
    }
    let total: f64 = pred.points().iter().zip(gt.points()).map(|(p, g)| p.distance(g)).sum();
    Ok(total / gt.len() as f64 / d)
}

/// Fraction of errors strictly above `threshold`.
pub fn failure_rate(nmes: &[f64], threshold: f64) -> Result<f64> {
    if nmes.is_empty() {
        return Err(Error::invalid("failure rate of an empty error list"));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid("failure threshold must be positive"));
    }
    Ok(nmes.iter().filter(|&&e| e > threshold).count() as f64 / nmes.len() as f64)
}

/// Fraction of errors `<= e` for each grid threshold `e`.
pub fn ced(nmes: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if nmes.is_empty() || grid.is_empty() {
        return Err(Error::invalid("CED needs errors and thresholds"));
    }
    if grid[0] <= 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("CED grid must be positive and strictly increasing"));
    }
    Ok(ced_unchecked(nmes, grid))
}

fn ced_unchecked(nmes: &[f64], grid: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = nmes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    grid.iter()
        .map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / n))
        .collect()
}

/// `resolution` evenly spaced thresholds from 0 to `limit` inclusive.
pub fn uniform_grid(limit: f64, resolution: usize) -> Vec<f64> {
    let step = limit / (resolution - 1) as f64;
    (0..resolution)
        .map(|i| if i + 1 == resolution { limit } else { i as f64 * step })
        .collect()
}

/// Area under the CED over `[0, limit]` by the trapezoid rule on
/// `grid_resolution` uniform thresholds, divided by `limit`.
pub fn auc(nmes: &[f64], limit: f64, grid_resolution: usize) -> Result<f64> {
    if nmes.is_empty() {
        return Err(Error::invalid("AUC of an empty error list"));
    }
    if !(limit > 0.0) || grid_resolution < 2 {
        return Err(Error::invalid("AUC needs limit > 0 and at least two grid points"));
    }
    let grid = uniform_grid(limit, grid_resolution);
    let curve = ced_unchecked(nmes, &grid);
    let area: f64 = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok((area / limit).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub normalization: NormalizationKind,
    pub failure_threshold: f64,
    pub auc_limit: f64,
    pub grid_resolution: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            normalization: NormalizationKind::InterOcular,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            auc_limit: DEFAULT_AUC_LIMIT,
            grid_resolution: DEFAULT_GRID_RESOLUTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub n: usize,
    pub nme_mean: f64,
    pub failure_rate: f64,
    pub auc: f64,
    pub ced: Vec<(f64, f64)>,
}

impl SubsetReport {
    fn compute(nmes: &[f64], cfg: &MetricConfig) -> Result<Self> {
        let mut sorted = nmes.to_vec();
        sorted.sort_by(f64::total_cmp);
        let grid = uniform_grid(cfg.auc_limit, cfg.grid_resolution);
        Ok(Self {
            n: sorted.len(),
            nme_mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            failure_rate: failure_rate(&sorted, cfg.failure_threshold)?,
            auc: auc(&sorted, cfg.auc_limit, cfg.grid_resolution)?,
            ced: ced_unchecked(&sorted, &grid),
        })
    }
}

/// Per-sample error with the sample's attribute flags.
#[derive(Clone, Debug, PartialEq)]
pub struct NmeEntry {
    pub id: String,
    pub nme: f64,
    pub attributes: Option<BTreeSet<Attribute>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normalization: NormalizationKind,
    pub failure_threshold: f64,
    pub auc_limit: f64,
    pub n_evaluated: usize,
    /// Samples whose normalizing distance was zero.
    pub n_skipped: usize,
    pub overall: SubsetReport,
    pub per_subset: BTreeMap<Attribute, SubsetReport>,
}

impl EvalReport {
    /// Aggregates per-sample errors. The result does not depend on the order
    /// of `entries`: errors are sorted before any summation.
    pub fn aggregate(entries: &[NmeEntry], n_skipped: usize, cfg: &MetricConfig) -> Result<Self> {
        let all: Vec<f64> = entries.iter().map(|e| e.nme).collect();
        let overall = SubsetReport::compute(&all, cfg)?;
        let mut per_subset = BTreeMap::new();
        for attr in Attribute::ALL {
            let sub: Vec<f64> = entries
                .iter()
                .filter(|e| e.attributes.as_ref().is_some_and(|a| a.contains(&attr)))
                .map(|e| e.nme)
                .collect();
            if !sub.is_empty() {
                per_subset.insert(attr, SubsetReport::compute(&sub, cfg)?);
            }
        }
        Ok(Self {
            normalization: cfg.normalization,
            failure_threshold: cfg.failure_threshold,
            auc_limit: cfg.auc_limit,
            n_evaluated: entries.len(),
            n_skipped,
            overall,
            per_subset,
        })
    }

    /// One JSON record per scope (`all`, then each attribute), without CED
    /// curves.
    pub fn to_records(&self) -> String {
        #[derive(Serialize)]
        struct Rec<'a> {
            scope: &'a str,
            normalization: NormalizationKind,
            n: usize,
            n_skipped: usize,
            nme: f64,
            failure_rate: f64,
            failure_threshold: f64,
            auc: f64,
            auc_limit: f64,
        }
        let mut out = String::new();
        let scopes = std::iter::once(("all", &self.overall, self.n_skipped))
            .chain(self.per_subset.iter().map(|(a, r)| (a.as_str(), r, 0)));
        for (scope, r, skipped) in scopes {
            let rec = Rec {
                scope,
                normalization: self.normalization,
                n: r.n,
                n_skipped: skipped,
                nme: r.nme_mean,
                failure_rate: r.failure_rate,
                failure_threshold: self.failure_threshold,
                auc: r.auc,
                auc_limit: self.auc_limit,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Plain-text table in the layout of the usual WFLW comparison:
    /// one column per scope, rows NME (%), FR (%) and AUC.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(&str, &SubsetReport)> = vec![("Fullset", &self.overall)];
        cols.extend(self.per_subset.iter().map(|(a, r)| (a.as_str(), r)));
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "Metric");
        for (name, _) in &cols {
            let _ = write!(out, "{name:>14}");
        }
        out.push('\n');
        let rows: [(&str, fn(&SubsetReport) -> String); 4] = [
            ("NME (%)", |r| format!("{:.2}", r.nme_mean * 100.0)),
            ("FR (%)", |r| format!("{:.2}", r.failure_rate * 100.0)),
            ("AUC", |r| format!("{:.4}", r.auc)),
            ("n", |r| r.n.to_string()),
        ];
        for (label, f) in rows {
            let _ = write!(out, "{label:<16}");
            for (_, r) in &cols {
                let _ = write!(out, "{:>14}", f(r));
            }
            out.push('\n');
        }
        out
    }
}

/// Two-column CSV (`threshold,fraction`) for plotting.
pub fn ced_to_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in curve {
        let _ = writeln!(out, "{t},{f}");
    }
    out
}

pub fn ced_from_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "threshold,fraction")) => {}
        _ => return Err(Error::parse(1, "expected `threshold,fraction` header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::parse(i + 1, "expected two columns"))?;
            let t = a.trim().parse().map_err(|_| Error::parse(i + 1, format!("bad threshold {a:?}")))?;
            let f = b.trim().parse().map_err(|_| Error::parse(i + 1, format!("bad fraction {b:?}")))?;
            Ok((t, f))
        })
        .collect()
}

/// Median of a non-empty list; the mean of the two middle values for even
/// lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(points: &[(f64, f64)]) -> LandmarkSet {
        LandmarkSet::new(
            LandmarkScheme::Synth(points.len()),
            points.iter().map(|&(x, y)| Point::new(x, y)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_error() {
        let gt = lm(&[(0.0, 0.0), (3.0, 4.0), (1.0, 1.0)]);
        assert_eq!(nme(&gt, &gt, &NormalizationRule::custom_pair(0, 1)).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_custom_pair() {
        let gt = lm(&[(0.0, 0.0), (1.0, 0.0)]);
        let pred = lm(&[(0.0, 0.1), (1.0, 0.1)]);
        let e = nme(&pred, &gt, &NormalizationRule::custom_pair(0, 1)).unwrap();
        assert!((e - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_normalizer_is_reported() {
        let gt = lm(&[(2.0, 2.0), (2.0, 2.0)]);
        assert!(matches!(
            nme(&gt, &gt, &NormalizationRule::custom_pair(0, 1)),
            Err(Error::ZeroNormalizer(_))
        ));
    }

    #[test]
    fn scheme_mismatch_is_rejected() {
        let a = lm(&[(0.0, 0.0), (1.0, 0.0)]);
        let b = LandmarkSet::new(LandmarkScheme::Synth(3), vec![Point::new(0.0, 0.0); 3]).unwrap();
        assert!(nme(&a, &b, &NormalizationRule::custom_pair(0, 1)).is_err());
    }

    #[test]
    fn ocular_and_pupil_conventions() {
        let io = NormalizationRule::inter_ocular(LandmarkScheme::P68).unwrap();
        assert_eq!((io.first[0], io.second[0]), (36, 45));
        let ip = NormalizationRule::inter_pupil(LandmarkScheme::P68).unwrap();
        assert_eq!(ip.first, vec![36, 37, 38, 39, 40, 41]);
        assert_eq!(ip.second, vec![42, 43, 44, 45, 46, 47]);
        let w = NormalizationRule::inter_ocular(LandmarkScheme::P98).unwrap();
        assert_eq!((w.first[0], w.second[0]), (60, 72));
        assert!(NormalizationRule::inter_ocular(LandmarkScheme::P19).is_err());

        // a face whose eye centroids are closer than its outer corners
        let mut pts = vec![Point::new(0.0, 0.0); 68];
        for i in 36..42 {
            pts[i] = Point::new(10.0 + (i - 36) as f64, 0.0);
        }
        for i in 42..48 {
            pts[i] = Point::new(30.0 + (i - 42) as f64, 0.0);
        }
        let gt = LandmarkSet::new(LandmarkScheme::P68, pts).unwrap();
        // corners 36 at x = 10 and 45 at x = 33; centroids at 12.5 and 32.5
        assert_eq!(io.normalizer(&gt).unwrap(), 23.0);
        assert!((ip.normalizer(&gt).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn failure_rate_hand_count() {
        assert_eq!(failure_rate(&[0.0, 0.0, 0.0], 0.1).unwrap(), 0.0);
        assert_eq!(failure_rate(&[0.05, 0.15, 0.20, 0.08], 0.1).unwrap(), 0.5);
        assert_eq!(failure_rate(&[0.1], 0.1).unwrap(), 0.0);
        assert!(failure_rate(&[], 0.1).is_err());
    }

    #[test]
    fn ced_step() {
        assert_eq!(ced(&[0.05], &[0.04, 0.06]).unwrap(), vec![(0.04, 0.0), (0.06, 1.0)]);
        assert!(ced(&[0.05], &[0.06, 0.04]).is_err());
        assert!(ced(&[], &[0.1]).is_err());
    }

    #[test]
    fn auc_limits() {
        assert!((auc(&[0.0, 0.0], 0.1, 1000).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(auc(&[0.2, 0.5], 0.1, 1000).unwrap(), 0.0);
        let a = auc(&[0.05], 0.1, 1000).unwrap();
        assert!((a - 0.5).abs() < 1e-3, "{a}");
        let fine = auc(&[0.05], 0.1, 100_000).unwrap();
        assert!((fine - 0.5).abs() < (a - 0.5).abs() + 1e-12);
        assert!(auc(&[0.05], 0.1, 1).is_err());
    }

    #[test]
    fn report_is_order_invariant_and_has_subsets() {
        let e = |id: &str, v: f64, a: &[Attribute]| NmeEntry {
            id: id.into(),
            nme: v,
            attributes: Some(a.iter().copied().collect()),
        };
        let entries = vec![
            e("a", 0.03, &[Attribute::Pose]),
            e("b", 0.12, &[Attribute::Pose, Attribute::Blur]),
            e("c", 0.07, &[]),
            e("d", 0.01 + 0.02, &[Attribute::Blur]),
        ];
        let cfg = MetricConfig::default();
        let r1 = EvalReport::aggregate(&entries, 1, &cfg).unwrap();
        let mut rev = entries.clone();
        rev.reverse();
        let r2 = EvalReport::aggregate(&rev, 1, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.per_subset.len(), 2);
        assert_eq!(r1.per_subset[&Attribute::Pose].n, 2);
        assert_eq!(r1.overall.failure_rate, 0.25);
        assert_eq!(r1.to_records().lines().count(), 3);
        assert!(r1.to_table().contains("blur"));
    }

    #[test]
    fn ced_csv_round_trip() {
        let curve = vec![(0.0, 0.0), (0.05, 0.25), (0.1, 1.0)];
        assert_eq!(ced_from_csv(&ced_to_csv(&curve)).unwrap(), curve);
        assert!(ced_from_csv("a,b\n").is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
