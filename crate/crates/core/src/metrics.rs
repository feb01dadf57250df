//! Segmentation quality measures: per-class IoU, mIoU, confusion counts,
//! and accuracy at each taxonomy level.
//!
//! IoU is accumulated over a whole split, not averaged per image. A class
//! that appears in neither prediction nor ground truth has no defined IoU
//! and is skipped by the mean.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, IGNORE};
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::Tensor;

/// Intersection over union for one class between two masks.
///
/// Pixels labeled [`IGNORE`] in either mask are excluded. Returns `None`
/// when the class occurs in neither mask (the ratio 0/0 is undefined).
pub fn iou(pred: &Mask, truth: &Mask, class_id: u8) -> Result<Option<f64>> {
    if pred.h != truth.h || pred.w != truth.w {
        return Err(Error::invalid(format!(
            "iou: prediction is {}x{}, truth is {}x{}",
            pred.h, pred.w, truth.h, truth.w
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        if p == IGNORE || t == IGNORE {
            continue;
        }
        let in_p = p == class_id;
        let in_t = t == class_id;
        if in_p && in_t {
            inter += 1;
        }
        if in_p || in_t {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(None);
    }
    Ok(Some(inter as f64 / union as f64))
}

/// Running totals for one evaluation pass.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    num_classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
    gt_pixels: Vec<u64>,
    pred_pixels: Vec<u64>,
    /// counts[truth][pred], both non-ignore
    confusion: Vec<Vec<u64>>,
    num_samples: usize,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        MetricsAccumulator {
            num_classes,
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            gt_pixels: vec![0; num_classes],
            pred_pixels: vec![0; num_classes],
            confusion: vec![vec![0; num_classes]; num_classes],
            num_samples: 0,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    /// Folds one prediction/truth pair into the totals.
    pub fn add(&mut self, pred: &Mask, truth: &Mask) -> Result<()> {
        if pred.h != truth.h || pred.w != truth.w {
            return Err(Error::invalid(format!(
                "metrics: prediction is {}x{}, truth is {}x{}",
                pred.h, pred.w, truth.h, truth.w
            )));
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if p == IGNORE || t == IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.num_classes || t >= self.num_classes {
                return Err(Error::invalid(format!(
                    "metrics: label {} exceeds class count {}",
                    p.max(t),
                    self.num_classes
                )));
            }
            self.gt_pixels[t] += 1;
            self.pred_pixels[p] += 1;
            self.confusion[t][p] += 1;
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        self.num_samples += 1;
        Ok(())
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Fraction of pixels whose labels agree once both masks are mapped
    /// through `map` (identity for species).
    fn mapped_accuracy(&self, map: &[usize]) -> Result<f64> {
        let mut hit = 0u64;
        let mut total = 0u64;
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                total += n;
                if map[t] == map[p] {
                    hit += n;
                }
            }
        }
        if total == 0 {
            return Err(Error::invalid("metrics: no valid pixels were scored"));
        }
        Ok(hit as f64 / total as f64)
    }

    pub fn finish(&self, taxonomy: &Taxonomy) -> Result<MetricsReport> {
        if self.num_samples == 0 {
            return Err(Error::invalid("metrics: no samples were scored"));
        }
        if taxonomy.num_species() != self.num_classes {
            return Err(Error::invalid(format!(
                "metrics: taxonomy has {} species, accumulator was sized for {}",
                taxonomy.num_species(),
                self.num_classes
            )));
        }
        let per_class_iou = self.per_class_iou();
        let defined: Vec<f64> = per_class_iou.iter().filter_map(|v| *v).collect();
        if defined.is_empty() {
            return Err(Error::invalid("metrics: no valid pixels were scored"));
        }
        // Every class with a defined IoU counts toward the mean, including
        // classes flagged report_exclude; those are only listed separately.
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        let identity: Vec<usize> = (0..self.num_classes).collect();
        Ok(MetricsReport {
            class_names: taxonomy.species_names(),
            per_class_iou,
            gt_pixels: self.gt_pixels.clone(),
            pred_pixels: self.pred_pixels.clone(),
            miou,
            species_accuracy: self.mapped_accuracy(&identity)?,
            genus_accuracy: self.mapped_accuracy(&taxonomy.map_to(Level::Genus))?,
            taxon_accuracy: self.mapped_accuracy(&taxonomy.map_to(Level::Taxon))?,
            excluded_classes: taxonomy
                .species()
                .iter()
                .filter(|s| s.report_exclude)
                .map(|s| s.name.clone())
                .collect(),
            confusion: self.confusion.clone(),
            num_samples: self.num_samples,
        })
    }
}

/// Split-level evaluation summary, stable across serialization.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `None` marks classes absent from both predictions and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub gt_pixels: Vec<u64>,
    pub pred_pixels: Vec<u64>,
    pub miou: f64,
    pub species_accuracy: f64,
    pub genus_accuracy: f64,
    pub taxon_accuracy: f64,
    /// Names flagged report_exclude in the taxonomy. Informational; their
    /// IoU still participates in `miou`.
    pub excluded_classes: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub num_samples: usize,
}

/// Runs `predict` over every sample and scores it against the truth mask.
///
/// `samples` yields `(input, truth)` pairs; errors from the iterator or the
/// prediction closure abort the pass. Fails on an empty split.
pub fn evaluate<I, F>(samples: I, mut predict: F, taxonomy: &Taxonomy) -> Result<MetricsReport>
where
    I: IntoIterator<Item = Result<(Tensor<f32>, Mask)>>,
    F: FnMut(&Tensor<f32>) -> Result<Mask>,
{
    let mut acc = MetricsAccumulator::new(taxonomy.num_species());
    for sample in samples {
        let (input, truth) = sample?;
        let pred = predict(&input)?;
        acc.add(&pred, &truth)?;
    }
    acc.finish(taxonomy)
}

/// Writes the report as JSON plus a per-class CSV.
///
/// CSV columns: `class,iou,gt_pixels,pred_pixels,included`. Undefined IoU
/// becomes an empty field; `included` is false for report_exclude classes.
pub fn export_report(report: &MetricsReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::invalid(format!("metrics report to JSON: {e}")))?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;

    let mut csv = String::from("class,iou,gt_pixels,pred_pixels,included\n");
    for (i, name) in report.class_names.iter().enumerate() {
        let iou = report.per_class_iou[i]
            .map(|v| v.to_string())
            .unwrap_or_default();
        let included = !report.excluded_classes.contains(name);
        csv.push_str(&format!(
            "{name},{iou},{},{},{included}\n",
            report.gt_pixels[i], report.pred_pixels[i]
        ));
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, format!("metrics report: {e}")))
}
