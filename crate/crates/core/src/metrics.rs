//! Confusion-matrix accumulation and the precision-based aggregates: per-class
//! precision, AP, macro-F1 and size/frequency category APs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{io_err, CamsegError, Result};
use crate::palette::{ClassMap, Palette, IGNORE};

/// `counts[g * k + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(CamsegError::Metrics(format!(
                "{} counts for a {k}x{k} matrix",
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel whose ground truth is not [`IGNORE`].
    pub fn accumulate(&mut self, gt: &ClassMap, pred: &ClassMap) -> Result<()> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(CamsegError::Metrics(format!(
                "ground truth is {}x{} but prediction is {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            )));
        }
        let k = self.k;
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(CamsegError::Metrics(format!(
                    "label pair ({g}, {p}) outside {k} classes"
                )));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(CamsegError::Metrics(format!(
                "cannot merge {}-class and {}-class matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, g: usize) -> u64 {
        self.counts[g * self.k..(g + 1) * self.k].iter().sum()
    }

    fn col_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, p)).sum()
    }

    /// A class is present when it occurs in the ground truth or the predictions.
    pub fn present(&self, c: usize) -> bool {
        self.row_sum(c) > 0 || self.col_sum(c) > 0
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("gt\\pred");
        for n in names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for g in 0..self.k {
            s.push_str(&names[g]);
            for p in 0..self.k {
                s.push_str(&format!(",{}", self.get(g, p)));
            }
            s.push('\n');
        }
        s
    }
}

/// Percent precision per class; `None` for absent classes. A class with
/// ground truth but no predictions scores 0.
pub fn per_class_precision(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.k)
        .map(|c| {
            if !cm.present(c) {
                return None;
            }
            let col = cm.col_sum(c);
            Some(if col == 0 {
                0.0
            } else {
                100.0 * cm.get(c, c) as f64 / col as f64
            })
        })
        .collect()
}

/// Percent F1 per class; `None` for absent classes.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fp = cm.col_sum(c) - tp;
            let fneg = cm.row_sum(c) - tp;
            let denom = 2 * tp + fp + fneg;
            (denom > 0).then(|| 100.0 * 2.0 * tp as f64 / denom as f64)
        })
        .collect()
}

fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean over present classes.
pub fn average_precision(precisions: &[Option<f64>]) -> Result<f64> {
    mean_present(precisions.iter().copied())
        .ok_or_else(|| CamsegError::Metrics("every class is absent".into()))
}

/// Macro-F1 over present classes; 0 when nothing was counted.
pub fn f1_macro(cm: &ConfusionMatrix) -> f64 {
    mean_present(per_class_f1(cm)).unwrap_or(0.0)
}

/// Class-index groups along the size and frequency axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySpec {
    pub small: Vec<usize>,
    pub medium: Vec<usize>,
    pub large: Vec<usize>,
    pub frequent: Vec<usize>,
    pub common: Vec<usize>,
    pub rare: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SizeAxis {
    small: Vec<String>,
    medium: Vec<String>,
    large: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FrequencyAxis {
    frequent: Vec<String>,
    common: Vec<String>,
    rare: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryFile {
    size: SizeAxis,
    frequency: FrequencyAxis,
}

const BUNDLED_CATEGORIES: &[(&str, &str)] = &[
    ("cityscapes19", include_str!("../data/categories/cityscapes19.json")),
    ("toyscapes8", include_str!("../data/categories/toyscapes8.json")),
];

impl CategorySpec {
    /// Parses the JSON form, resolving class names against `palette`.
    pub fn parse(json: &str, palette: &Palette) -> Result<Self> {
        let file: CategoryFile = serde_json::from_str(json)?;
        let idx = |names: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    palette.index_of(n).ok_or_else(|| {
                        CamsegError::Metrics(format!("category lists unknown class {n:?}"))
                    })
                })
                .collect()
        };
        let spec = Self {
            small: idx(&file.size.small)?,
            medium: idx(&file.size.medium)?,
            large: idx(&file.size.large)?,
            frequent: idx(&file.frequency.frequent)?,
            common: idx(&file.frequency.common)?,
            rare: idx(&file.frequency.rare)?,
        };
        spec.validate(palette.len())?;
        Ok(spec)
    }

    pub fn bundled(name: &str, palette: &Palette) -> Result<Self> {
        let (_, json) = BUNDLED_CATEGORIES
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CamsegError::Metrics(format!("no bundled category spec {name:?}")))?;
        Self::parse(json, palette)
    }

    /// A bundled spec name or a path to a JSON file.
    pub fn resolve(spec: &str, palette: &Palette) -> Result<Self> {
        if BUNDLED_CATEGORIES.iter().any(|(n, _)| *n == spec) {
            return Self::bundled(spec, palette);
        }
        let text = std::fs::read_to_string(Path::new(spec)).map_err(io_err(spec))?;
        Self::parse(&text, palette)
    }

    /// Each axis must cover every class exactly once.
    pub fn validate(&self, k: usize) -> Result<()> {
        for (axis, groups) in [
            ("size", [&self.small, &self.medium, &self.large]),
            ("frequency", [&self.frequent, &self.common, &self.rare]),
        ] {
            let mut seen = vec![0u32; k];
            for &c in groups.iter().flat_map(|g| g.iter()) {
                if c >= k {
                    return Err(CamsegError::Metrics(format!("{axis} axis lists class {c} of {k}")));
                }
                seen[c] += 1;
            }
            if let Some(c) = seen.iter().position(|&n| n != 1) {
                return Err(CamsegError::Metrics(format!(
                    "{axis} axis covers class {c} {} times",
                    seen[c]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryAps {
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
    pub frequent: Option<f64>,
    pub common: Option<f64>,
    pub rare: Option<f64>,
}

impl CategoryAps {
    pub fn as_array(&self) -> [Option<f64>; 6] {
        [
            self.small,
            self.medium,
            self.large,
            self.frequent,
            self.common,
            self.rare,
        ]
    }
}

pub fn category_ap(precisions: &[Option<f64>], spec: &CategorySpec) -> CategoryAps {
    let m = |group: &[usize]| mean_present(group.iter().map(|&c| precisions.get(c).copied().flatten()));
    CategoryAps {
        small: m(&spec.small),
        medium: m(&spec.medium),
        large: m(&spec.large),
        frequent: m(&spec.frequent),
        common: m(&spec.common),
        rare: m(&spec.rare),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_precision: Vec<Option<f64>>,
    pub ap: f64,
    pub categories: CategoryAps,
    pub f1_macro: f64,
    pub absent: Vec<usize>,
}

pub const SUMMARY_COLUMNS: [&str; 7] = ["AP", "AP_S", "AP_M", "AP_L", "AP_F", "AP_C", "AP_R"];

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, spec: &CategorySpec) -> Result<Self> {
        let per_class_precision = per_class_precision(cm);
        let ap = average_precision(&per_class_precision)?;
        let categories = category_ap(&per_class_precision, spec);
        let absent = per_class_precision
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.is_none().then_some(c))
            .collect();
        Ok(Self {
            categories,
            ap,
            f1_macro: f1_macro(cm),
            absent,
            per_class_precision,
        })
    }

    /// AP followed by the six category values.
    pub fn summary_values(&self) -> [Option<f64>; 7] {
        let c = self.categories.as_array();
        [Some(self.ap), c[0], c[1], c[2], c[3], c[4], c[5]]
    }
}

pub(crate) fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(v) => format!("{v:.decimals$}"),
        None => "-".to_string(),
    }
}

/// Summary layout: `dataset,AP,AP_S,AP_M,AP_L,AP_F,AP_C,AP_R`. Absent values print as `-`.
pub fn summary_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = format!("dataset,{}\n", SUMMARY_COLUMNS.join(","));
    for (name, r) in rows {
        s.push_str(name);
        for v in r.summary_values() {
            s.push(',');
            s.push_str(&fmt_opt(v, 2));
        }
        s.push('\n');
    }
    s
}

/// Per-class layout: one column per class, precision in percent.
pub fn per_class_csv(rows: &[(String, MetricsReport)], names: &[String]) -> String {
    let mut s = format!("dataset,{}\n", names.join(","));
    for (name, r) in rows {
        s.push_str(name);
        for v in &r.per_class_precision {
            s.push(',');
            s.push_str(&fmt_opt(*v, 4));
        }
        s.push('\n');
    }
    s
}

/// Parses a CSV produced by [`summary_csv`] or [`per_class_csv`] into
/// per-row maps from column name to value (`None` for `-`).
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, BTreeMap<String, Option<f64>>)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CamsegError::Metrics("empty report".into()))?
        .split(',')
        .collect();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(CamsegError::Metrics(format!(
                "row {} has {} fields, header has {}",
                i + 1,
                fields.len(),
                header.len()
            )));
        }
        let mut map = BTreeMap::new();
        for (h, f) in header.iter().zip(&fields).skip(1) {
            let v = if *f == "-" {
                None
            } else {
                Some(f.parse::<f64>().map_err(|_| {
                    CamsegError::Metrics(format!("row {}: bad value {f:?} in column {h}", i + 1))
                })?)
            };
            map.insert(h.to_string(), v);
        }
        out.push((fields[0].to_string(), map));
    }
    Ok(out)
}
