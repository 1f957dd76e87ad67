use std::fmt::Write as _;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::masks::MaskFamily;

pub const REPORT_VERSION: u32 = 1;

/// Infinite values (identical images) become the string "inf".
fn float<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn opt_float<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => float(x, s),
        None => s.serialize_str("skipped"),
    }
}

/// Scores of one (image, mask family, mode) combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    pub image_id: String,
    pub family: Option<MaskFamily>,
    pub mode: Option<String>,
    #[serde(serialize_with = "float")]
    pub psnr: f64,
    #[serde(serialize_with = "float")]
    pub ssim: f64,
    /// `None` when no perceptual backend was available.
    #[serde(serialize_with = "opt_float")]
    pub perceptual: Option<f64>,
    #[serde(serialize_with = "float")]
    pub internal_similarity: f64,
    /// PSNR of the degraded input against the ground truth.
    #[serde(serialize_with = "opt_float")]
    pub baseline_psnr: Option<f64>,
}

/// Means over a group of entries. `family == None` marks the overall row,
/// which averages the family rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub mode: Option<String>,
    pub family: Option<MaskFamily>,
    pub count: usize,
    #[serde(serialize_with = "float")]
    pub psnr: f64,
    #[serde(serialize_with = "float")]
    pub ssim: f64,
    #[serde(serialize_with = "opt_float")]
    pub perceptual: Option<f64>,
    #[serde(serialize_with = "float")]
    pub internal_similarity: f64,
    #[serde(serialize_with = "opt_float")]
    pub baseline_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub image_id: String,
    pub family: Option<MaskFamily>,
    pub mode: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub version: u32,
    pub entries: Vec<MetricEntry>,
    pub aggregates: Vec<Aggregate>,
    pub failure_count: usize,
    pub failures: Vec<Failure>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn mean_opt(values: Vec<Option<f64>>) -> Option<f64> {
    let all: Option<Vec<f64>> = values.into_iter().collect();
    all.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

fn aggregate<'a>(mode: Option<String>, family: Option<MaskFamily>, rows: impl Iterator<Item = &'a MetricEntry> + Clone) -> Aggregate {
    Aggregate {
        mode,
        family,
        count: rows.clone().count(),
        psnr: mean(rows.clone().map(|e| e.psnr)),
        ssim: mean(rows.clone().map(|e| e.ssim)),
        perceptual: mean_opt(rows.clone().map(|e| e.perceptual).collect()),
        internal_similarity: mean(rows.clone().map(|e| e.internal_similarity)),
        baseline_psnr: mean_opt(rows.map(|e| e.baseline_psnr).collect()),
    }
}

fn overall(mode: Option<String>, families: &[Aggregate]) -> Aggregate {
    Aggregate {
        mode,
        family: None,
        count: families.iter().map(|a| a.count).sum(),
        psnr: mean(families.iter().map(|a| a.psnr)),
        ssim: mean(families.iter().map(|a| a.ssim)),
        perceptual: mean_opt(families.iter().map(|a| a.perceptual).collect()),
        internal_similarity: mean(families.iter().map(|a| a.internal_similarity)),
        baseline_psnr: mean_opt(families.iter().map(|a| a.baseline_psnr).collect()),
    }
}

impl MetricReport {
    /// Builds per-(mode, family) means and a per-mode overall row that
    /// averages the family rows. Modes keep their order of first appearance.
    pub fn from_entries(entries: Vec<MetricEntry>, failures: Vec<Failure>) -> Self {
        let mut modes: Vec<Option<String>> = Vec::new();
        for e in &entries {
            if !modes.contains(&e.mode) {
                modes.push(e.mode.clone());
            }
        }
        let mut aggregates = Vec::new();
        for mode in modes {
            let of_mode = entries.iter().filter(|e| e.mode == mode);
            let mut fams: Vec<Aggregate> = MaskFamily::ALL
                .iter()
                .map(|&f| aggregate(mode.clone(), Some(f), of_mode.clone().filter(move |e| e.family == Some(f))))
                .filter(|a| a.count > 0)
                .collect();
            let untagged = aggregate(mode.clone(), None, of_mode.clone().filter(|e| e.family.is_none()));
            let all = if fams.is_empty() {
                untagged
            } else if untagged.count > 0 {
                // entries without a family count as one more group
                let mut groups = fams.clone();
                groups.push(untagged);
                overall(mode.clone(), &groups)
            } else {
                overall(mode.clone(), &fams)
            };
            aggregates.append(&mut fams);
            aggregates.push(all);
        }
        MetricReport {
            version: REPORT_VERSION,
            entries,
            aggregates,
            failure_count: failures.len(),
            failures,
        }
    }

    pub fn overall(&self, mode: Option<&str>) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.family.is_none() && a.mode.as_deref() == mode)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text table: one row per aggregate, then the failure count.
    pub fn to_table(&self) -> String {
        let fmt = |v: f64, digits: usize| {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v:.digits$}")
            }
        };
        let header = ["mode", "family", "n", "PSNR", "SSIM", "perceptual", "int.sim", "input PSNR"];
        let mut rows = vec![header.map(String::from).to_vec()];
        for a in &self.aggregates {
            rows.push(vec![
                a.mode.clone().unwrap_or_else(|| "-".into()),
                a.family.map_or("overall".to_string(), |f| f.to_string()),
                a.count.to_string(),
                fmt(a.psnr, 2),
                fmt(a.ssim, 4),
                a.perceptual.map_or("skipped".to_string(), |v| fmt(v, 4)),
                fmt(a.internal_similarity, 4),
                a.baseline_psnr.map_or("-".to_string(), |v| fmt(v, 2)),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, &w))| if c < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        let _ = writeln!(out, "failures: {}", self.failure_count);
        out
    }

    pub fn write(&self, json_path: &Path, table_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(table_path, self.to_table()).map_err(|e| Error::io(table_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, family: MaskFamily, psnr: f64) -> MetricEntry {
        MetricEntry {
            image_id: id.into(),
            family: Some(family),
            mode: Some("zerofill".into()),
            psnr,
            ssim: 0.5,
            perceptual: None,
            internal_similarity: 0.25,
            baseline_psnr: Some(10.0),
        }
    }

    #[test]
    fn empty_report_is_valid() {
        let r = MetricReport::from_entries(vec![], vec![]);
        assert!(r.aggregates.is_empty());
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["version"], 1);
        assert!(r.to_table().contains("failures: 0"));
    }

    #[test]
    fn family_and_overall_means() {
        let r = MetricReport::from_entries(
            vec![
                entry("a", MaskFamily::Irregular, 20.0),
                entry("b", MaskFamily::Irregular, 30.0),
                entry("a", MaskFamily::Box, 40.0),
            ],
            vec![],
        );
        assert_eq!(r.aggregates.len(), 3);
        assert_eq!(r.aggregates[0].psnr, 25.0);
        assert_eq!(r.aggregates[1].psnr, 40.0);
        // overall averages the family means, not the entries
        assert_eq!(r.overall(Some("zerofill")).unwrap().psnr, 32.5);
        assert_eq!(r.overall(Some("zerofill")).unwrap().count, 3);
    }

    #[test]
    fn single_entry_and_infinity() {
        let mut e = entry("a", MaskFamily::Box, f64::INFINITY);
        e.perceptual = Some(0.0);
        let r = MetricReport::from_entries(vec![e], vec![]);
        assert_eq!(r.aggregates[0].psnr, f64::INFINITY);
        assert_eq!(r.aggregates[0].perceptual, Some(0.0));
        let json = r.to_json();
        assert!(json.contains("\"inf\""));
        assert!(r.to_table().contains("inf"));
    }

    #[test]
    fn failures_are_counted() {
        let f = Failure {
            image_id: "x".into(),
            family: None,
            mode: None,
            error: "boom".into(),
        };
        let r = MetricReport::from_entries(vec![entry("a", MaskFamily::Box, 20.0)], vec![f]);
        assert_eq!(r.failure_count, 1);
        assert!(r.to_json().contains("boom"));
        assert!(r.to_table().contains("failures: 1"));
        assert!(r.to_json().contains("\"skipped\""));
    }
}
