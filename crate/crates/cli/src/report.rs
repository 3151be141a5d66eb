//! Evaluation reports: per-scene metric rows, per-method aggregates and their renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use zsldb::image::Image;
use zsldb::metrics::{mean, median};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metric columns in report order. PSNR and SSIM are pixelwise and only informational.
pub const METRICS: [&str; 4] = ["perceptual", "psnr", "ssim", "kernel_tv"];
pub const INFORMATIONAL: [&str; 2] = ["psnr", "ssim"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scene: String,
    pub method: String,
    pub perceptual: f64,
    #[serde(with = "extended_float")]
    pub psnr: f64,
    pub ssim: f64,
    /// Shift-aligned total-variation distance to the true kernel, when one is known.
    pub kernel_tv: Option<f64>,
}

impl Row {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "perceptual" => Some(self.perceptual),
            "psnr" => Some(self.psnr),
            "ssim" => Some(self.ssim),
            "kernel_tv" => self.kernel_tv,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub count: usize,
    #[serde(with = "extended_float")]
    pub mean: f64,
    #[serde(with = "extended_float")]
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub split: String,
    /// Methods in column order.
    pub methods: Vec<String>,
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    pub informational: Vec<String>,
    /// Checkpoint and per-method configuration fingerprints.
    pub fingerprints: BTreeMap<String, String>,
    pub runtime_secs: f64,
}

/// JSON has no infinities; PSNR of identical images is `+inf`, so non-finite values are
/// written as the strings `"inf"`, `"-inf"` and `"nan"`.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v.is_nan() => s.serialize_str("nan"),
            v if v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number, got `{other}`"))),
            },
        }
    }
}

/// Mean and median of every metric for every method, skipping rows where a metric is absent.
/// PSNR of identical images is `+inf` and propagates as such.
pub fn aggregate(methods: &[String], rows: &[Row]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for method in methods {
        for metric in METRICS {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| &r.method == method)
                .filter_map(|r| r.metric(metric))
                .collect();
            if values.is_empty() {
                continue;
            }
            out.push(Aggregate {
                method: method.clone(),
                metric: metric.to_string(),
                count: values.len(),
                mean: mean(&values),
                median: median(&values),
            });
        }
    }
    out
}

impl ExperimentReport {
    pub fn aggregate(&self, method: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.metric == metric)
    }

    /// Fixed-width table with one line per method, in the layout of the ablation tables.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>12} {:>9} {:>7} {:>10} {:>7}",
            "method", "perc. mean", "perc. median", "PSNR*", "SSIM*", "kernel TV", "scenes"
        );
        for m in &self.methods {
            let get = |metric: &str| self.aggregate(m, metric);
            let fmt = |a: Option<&Aggregate>, prec: usize| a.map_or("-".to_string(), |a| format!("{:.prec$}", a.mean));
            let p = get("perceptual");
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>12} {:>9} {:>7} {:>10} {:>7}",
                m,
                fmt(p, 4),
                p.map_or("-".to_string(), |a| format!("{:.4}", a.median)),
                fmt(get("psnr"), 2),
                fmt(get("ssim"), 3),
                fmt(get("kernel_tv"), 3),
                p.map_or(0, |a| a.count)
            );
        }
        let _ = writeln!(
            s,
            "\nperceptual: feature distance to the sharp image (lower is better)\n* pixelwise, informational only: sensitive to the misalignment a blind estimate may carry"
        );
        s
    }
}

/// Tiles images row-major into a grid with `gap` white pixels between cells. Every image must
/// have the size of the first one; missing cells stay white.
pub fn grid(rows: &[Vec<Image>], gap: usize) -> Image {
    let first = &rows.iter().flatten().next().expect("at least one image");
    let (h, w) = (first.height, first.width);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gh = rows.len() * h + (rows.len() - 1) * gap;
    let gw = cols * w + (cols - 1) * gap;
    let mut out = Image::filled(gh, gw, 3, 1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = img.at(y, x, ch.min(img.channels - 1));
                        out.set(r * (h + gap) + y, c * (w + gap) + x, ch, v);
                    }
                }
            }
        }
    }
    out
}
