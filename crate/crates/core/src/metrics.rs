//! Threshold-free detection metrics and the corruption report.
//!
//! Scores are oriented so that higher means more out-of-distribution, and OOD
//! samples are the positive class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::score::ScoreRecord;
use crate::{Error, Result};

pub const REPORT_HEADER: &str = "corruption,severity,metric,auroc,fpr95,n_id,n_ood";
pub const AVERAGE: &str = "AVERAGE";

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Input(format!("metrics need both score lists, got {} ID and {} OOD", id.len(), ood.len())));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::Input("scores contain NaN".into()));
    }
    Ok(())
}

/// Fraction of (ood, id) pairs with `ood > id`, ties counting one half.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut sorted = id.to_vec();
    sorted.sort_by(f64::total_cmp);
    // counts doubled so ties stay integral
    let mut twice: u128 = 0;
    for &o in ood {
        let below = sorted.partition_point(|&v| v < o);
        let not_above = sorted.partition_point(|&v| v <= o);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2.0 * id.len() as f64 * ood.len() as f64))
}

/// Decision threshold for a target true-positive rate: the largest OOD score
/// `t` with at least `tpr_target` of OOD scores `>= t`.
pub fn tpr_threshold(ood: &[f64], tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Input(format!("target TPR must be in (0, 1], got {tpr_target}")));
    }
    if ood.is_empty() {
        return Err(Error::Input("no OOD scores".into()));
    }
    let mut sorted = ood.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // smallest k with k / n >= target, robust to rounding in target * n
    let mut k = ((tpr_target * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / n as f64 >= tpr_target {
        k -= 1;
    }
    while (k as f64 / n as f64) < tpr_target {
        k += 1;
    }
    Ok(sorted[k - 1])
}

/// Fraction of ID scores at or above the threshold from [`tpr_threshold`].
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    check(id, ood)?;
    let t = tpr_threshold(ood, tpr_target)?;
    Ok(id.iter().filter(|&&v| v >= t).count() as f64 / id.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ll,
    Typicality,
    Nsd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ll, Metric::Typicality, Metric::Nsd];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ll => "ll",
            Metric::Typicality => "typicality",
            Metric::Nsd => "nsd",
        }
    }

    /// Higher-is-more-OOD score of one record. Flagged or missing values rank
    /// as maximally anomalous.
    pub fn oriented(self, r: &ScoreRecord) -> Option<f64> {
        let v = match self {
            Metric::Ll => -r.log_likelihood,
            Metric::Typicality => r.grad_norm,
            Metric::Nsd => r.nsd?,
        };
        Some(if v.is_finite() { v } else { f64::INFINITY })
    }

    /// Oriented scores of all records, or `None` when a record lacks this metric.
    pub fn oriented_all(self, records: &[ScoreRecord]) -> Option<Vec<f64>> {
        records.iter().map(|r| self.oriented(r)).collect()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown metric {s:?}; expected ll, typicality or nsd")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub corruption: String,
    /// `None` on the overall average rows.
    pub severity: Option<u8>,
    pub metric: Metric,
    /// `None` when the condition is absent.
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
}

impl ReportRow {
    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_else(|| "NA".into());
        let sev = self.severity.map(|s| s.to_string()).unwrap_or_else(|| "all".into());
        format!("{},{},{},{},{},{},{}", self.corruption, sev, self.metric, opt(self.auroc), opt(self.fpr95), self.n_id, self.n_ood)
    }
}

/// One OOD condition: corruption kind and severity with its scores, if present.
#[derive(Debug, Clone)]
pub struct Condition {
    pub corruption: String,
    pub severity: u8,
    pub records: Option<Vec<ScoreRecord>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-condition rows followed by per-severity and overall averages.
    pub rows: Vec<ReportRow>,
    /// Conditions that were missing and left out of the averages.
    pub absent: Vec<(String, u8)>,
}

impl EvalReport {
    pub fn row(&self, corruption: &str, severity: Option<u8>, metric: Metric) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.corruption == corruption && r.severity == severity && r.metric == metric)
    }

    /// Overall average row for `metric`.
    pub fn average(&self, metric: Metric) -> Option<&ReportRow> {
        self.row(AVERAGE, None, metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn average_row(label: &str, severity: Option<u8>, metric: Metric, rows: &[&ReportRow]) -> ReportRow {
    let present: Vec<&&ReportRow> = rows.iter().filter(|r| r.auroc.is_some()).collect();
    let avg = |f: fn(&ReportRow) -> Option<f64>| {
        (!present.is_empty()).then(|| mean(&present.iter().filter_map(|r| f(r)).collect::<Vec<_>>()))
    };
    ReportRow {
        corruption: label.to_string(),
        severity,
        metric,
        auroc: avg(|r| r.auroc),
        fpr95: avg(|r| r.fpr95),
        n_id: present.first().map(|r| r.n_id).unwrap_or(0),
        n_ood: present.iter().map(|r| r.n_ood).sum(),
    }
}

/// AUROC and FPR at 95% TPR of every available metric for every condition,
/// plus averages per severity and overall. Metrics missing from the ID
/// records (NSD without statistics) are skipped.
pub fn aggregate_report(id: &[ScoreRecord], conditions: &[Condition]) -> Result<EvalReport> {
    let metrics: Vec<Metric> = Metric::ALL.into_iter().filter(|m| m.oriented_all(id).is_some()).collect();
    let mut rows = Vec::new();
    let mut absent = Vec::new();
    for c in conditions {
        if !(1..=5).contains(&c.severity) {
            return Err(Error::Input(format!("severity must be 1..=5, got {}", c.severity)));
        }
        if c.records.is_none() {
            log::warn!("condition {}/{} is missing and left out of the averages", c.corruption, c.severity);
            absent.push((c.corruption.clone(), c.severity));
        }
        for &m in &metrics {
            let idv = m.oriented_all(id).expect("checked above");
            let (auroc_v, fpr_v, n_ood) = match c.records.as_deref().map(|r| (r.len(), m.oriented_all(r))) {
                Some((n, Some(ood))) => (Some(auroc(&idv, &ood)?), Some(fpr_at_tpr(&idv, &ood, 0.95)?), n),
                Some((_, None)) => {
                    return Err(Error::Input(format!("{}/{} lacks {m} scores", c.corruption, c.severity)));
                }
                None => (None, None, 0),
            };
            rows.push(ReportRow {
                corruption: c.corruption.clone(),
                severity: Some(c.severity),
                metric: m,
                auroc: auroc_v,
                fpr95: fpr_v,
                n_id: id.len(),
                n_ood,
            });
        }
    }
    let mut severities: Vec<u8> = conditions.iter().map(|c| c.severity).collect();
    severities.sort_unstable();
    severities.dedup();
    let mut averages = Vec::new();
    for &s in &severities {
        for &m in &metrics {
            let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.severity == Some(s) && r.metric == m).collect();
            averages.push(average_row(AVERAGE, Some(s), m, &sel));
        }
    }
    for &m in &metrics {
        let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.metric == m).collect();
        averages.push(average_row(AVERAGE, None, m, &sel));
    }
    rows.extend(averages);
    Ok(EvalReport { rows, absent })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ll: f64, gn: f64, nsd: Option<f64>) -> ScoreRecord {
        ScoreRecord { sample_id: String::new(), log_likelihood: ll, grad_norm: gn, nsd, flagged: false }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&[1.0, 2.0], &[3.0, 4.0], 0.95).unwrap(), 0.0);
        assert_eq!(tpr_threshold(&[3.0, 4.0, 5.0, 6.0], 0.95).unwrap(), 3.0);
        assert_eq!(fpr_at_tpr(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0], 0.95).unwrap(), 0.5);
        // exactly attainable target uses the exact rank
        assert_eq!(tpr_threshold(&[1.0, 2.0, 3.0, 4.0], 0.75).unwrap(), 2.0);
    }

    #[test]
    fn report_averages() {
        let id = vec![rec(-1.0, 1.0, None), rec(-2.0, 2.0, None)];
        let conds = vec![
            Condition { corruption: "a".into(), severity: 1, records: Some(vec![rec(-3.0, 0.5, None)]) },
            Condition { corruption: "b".into(), severity: 1, records: Some(vec![rec(-1.5, 3.0, None)]) },
            Condition { corruption: "c".into(), severity: 2, records: None },
        ];
        let r = aggregate_report(&id, &conds).unwrap();
        assert!(r.row("a", Some(1), Metric::Nsd).is_none());
        assert_eq!(r.row("a", Some(1), Metric::Ll).unwrap().auroc, Some(1.0));
        assert_eq!(r.row("b", Some(1), Metric::Ll).unwrap().auroc, Some(0.5));
        assert_eq!(r.average(Metric::Ll).unwrap().auroc, Some(0.75));
        assert_eq!(r.row(AVERAGE, Some(2), Metric::Ll).unwrap().auroc, None);
        assert_eq!(r.absent, vec![("c".to_string(), 2)]);
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert!(csv.contains("c,2,ll,NA,NA,2,0"));
        assert!(csv.contains("AVERAGE,all,typicality,"));
    }
}
