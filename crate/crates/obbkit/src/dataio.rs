//! File formats: DOTA-style quadrilateral annotations, the scene JSON used
//! by the assignment tooling, detection JSON lines, and sweep CSVs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{AssignError, AssignmentResult, ProposalAssignment, ProposalLabel, SampleSet, ScoreRecord};
use crate::eval::{Detection, GtRecord};
use crate::geometry::{min_area_rect, GeometryError, Point, OBB};
use crate::loss::SweepRow;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scores(#[from] AssignError),
}

/// One DOTA annotation line: a quadrilateral, a category name, and the
/// difficulty flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DotaAnnotation {
    pub quad: [Point; 4],
    pub category: String,
    pub difficult: bool,
}

/// Parse annotation text. Data lines read
/// `x1 y1 x2 y2 x3 y3 x4 y4 category difficult` with any run of blanks as
/// the separator; lines whose first token is non-numeric (`imagesource:`,
/// `gsd:`, ...) are metadata and are skipped.
pub fn parse_dota(text: &str) -> Result<Vec<DotaAnnotation>, DataError> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        let Some(first) = tokens.first() else { continue };
        if first.parse::<f64>().is_err() {
            continue; // metadata line
        }
        if tokens.len() != 10 {
            return Err(DataError::Malformed {
                line,
                reason: format!("expected 10 fields, got {}", tokens.len()),
            });
        }
        let mut coords = [0.0f64; 8];
        for (i, tok) in tokens[..8].iter().enumerate() {
            let v: f64 = tok.parse().map_err(|_| DataError::Malformed {
                line,
                reason: format!("bad coordinate {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Malformed {
                    line,
                    reason: format!("non-finite coordinate {tok:?}"),
                });
            }
            coords[i] = v;
        }
        let difficult = match tokens[9] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::Malformed {
                    line,
                    reason: format!("difficult flag must be 0 or 1, got {other:?}"),
                })
            }
        };
        records.push(DotaAnnotation {
            quad: [
                Point::new(coords[0], coords[1]),
                Point::new(coords[2], coords[3]),
                Point::new(coords[4], coords[5]),
                Point::new(coords[6], coords[7]),
            ],
            category: tokens[8].to_string(),
            difficult,
        });
    }
    Ok(records)
}

/// Inverse of [`parse_dota`] for well-formed records.
pub fn serialize_dota(records: &[DotaAnnotation]) -> String {
    let mut out = String::new();
    for r in records {
        let q = &r.quad;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {}\n",
            q[0].x,
            q[0].y,
            q[1].x,
            q[1].y,
            q[2].x,
            q[2].y,
            q[3].x,
            q[3].y,
            r.category,
            r.difficult as u8
        ));
    }
    out
}

/// Category-name table; index order defines the class ids. Matching is
/// case-sensitive and exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn from_names(names: Vec<String>) -> Self {
        ClassTable { names }
    }

    /// One name per non-empty line.
    pub fn from_text(text: &str) -> Self {
        ClassTable {
            names: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        }
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Convert parsed annotations to ground-truth records, fitting the minimum
/// enclosing rectangle to each quadrilateral.
pub fn annotations_to_gts(
    annotations: &[DotaAnnotation],
    image_id: &str,
    classes: &ClassTable,
) -> Result<Vec<GtRecord>, DataError> {
    annotations
        .iter()
        .map(|ann| {
            let class_id = classes
                .id_of(&ann.category)
                .ok_or_else(|| DataError::UnknownCategory(ann.category.clone()))?;
            let obb = min_area_rect(&ann.quad)?;
            Ok(GtRecord { obb, class_id, image_id: image_id.to_string(), difficult: ann.difficult })
        })
        .collect()
}

/// Parse annotation text straight into ground-truth records.
pub fn parse_dota_gts(
    text: &str,
    image_id: &str,
    classes: &ClassTable,
) -> Result<Vec<GtRecord>, DataError> {
    annotations_to_gts(&parse_dota(text)?, image_id, classes)
}

/// Assignment scene: ground truths with classes, proposals, and optional
/// per-proposal score vectors whose last entry is the background score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gts: Vec<SceneGt>,
    pub proposals: Vec<SceneProposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGt {
    pub obb: OBB,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneProposal {
    pub obb: OBB,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<OBB> {
        self.gts.iter().map(|g| g.obb).collect()
    }

    pub fn gt_classes(&self) -> Vec<usize> {
        self.gts.iter().map(|g| g.class).collect()
    }

    pub fn proposal_boxes(&self) -> Vec<OBB> {
        self.proposals.iter().map(|p| p.obb).collect()
    }

    pub fn score_records(&self) -> Result<Option<Vec<ScoreRecord>>, DataError> {
        self.scores
            .as_ref()
            .map(|rows| {
                rows.iter()
                    .map(|raw| ScoreRecord::from_raw(raw).map_err(DataError::from))
                    .collect()
            })
            .transpose()
    }
}

pub fn read_scene_json(text: &str) -> Result<Scene, DataError> {
    Ok(serde_json::from_str(text)?)
}

pub fn write_scene_json(scene: &Scene) -> String {
    serde_json::to_string_pretty(scene).expect("scene serializes")
}

/// Assignment run output: per-proposal label names, match details, and the
/// sampled index sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignOutput {
    pub labels: Vec<String>,
    pub matched_gt: Vec<Option<usize>>,
    pub matched_iou: Vec<f64>,
    pub sample: SampleSet,
}

impl AssignOutput {
    pub fn new(result: &AssignmentResult, sample: SampleSet) -> Self {
        AssignOutput {
            labels: result.assignments.iter().map(|a| a.label.name().to_string()).collect(),
            matched_gt: result.assignments.iter().map(|a| a.matched_gt).collect(),
            matched_iou: result.assignments.iter().map(|a| a.matched_iou).collect(),
            sample,
        }
    }

    /// Rebuild the assignment, e.g. to re-sample under a different budget.
    pub fn to_assignment(&self) -> Result<AssignmentResult, DataError> {
        let n = self.labels.len();
        if self.matched_gt.len() != n || self.matched_iou.len() != n {
            return Err(DataError::Malformed {
                line: 0,
                reason: "labels, matched_gt and matched_iou lengths differ".into(),
            });
        }
        let assignments = self
            .labels
            .iter()
            .zip(&self.matched_gt)
            .zip(&self.matched_iou)
            .map(|((name, &gt), &iou)| {
                let label = ProposalLabel::from_name(name, gt).ok_or_else(|| {
                    DataError::Malformed { line: 0, reason: format!("bad label {name:?}") }
                })?;
                Ok(ProposalAssignment { label, matched_iou: iou, matched_gt: gt })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(AssignmentResult { assignments })
    }
}

/// One detection per line:
/// `{"image_id": ..., "class_id": ..., "score": ..., "obb": [cx,cy,w,h,theta]}`.
pub fn read_detections_jsonl(text: &str) -> Result<Vec<Detection>, DataError> {
    let mut dets = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(raw).map_err(|e| DataError::Malformed {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&det.score) {
            return Err(DataError::Malformed {
                line: idx + 1,
                reason: format!("score {} outside [0, 1]", det.score),
            });
        }
        dets.push(det);
    }
    Ok(dets)
}

pub fn write_detections_jsonl(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d).expect("detection serializes"));
        out.push('\n');
    }
    out
}

const CURVE_HEADER: &str = "theta_p,tlf,one_minus_iou";

/// Sweep rows as CSV text with 13 significant digits per value.
pub fn curve_csv_string(rows: &[SweepRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:.12e},{:.12e},{:.12e}\n", r.theta_p, r.tlf, r.one_minus_iou));
    }
    out
}

pub fn write_curve_csv(rows: &[SweepRow], path: &Path) -> Result<(), DataError> {
    fs::write(path, curve_csv_string(rows))?;
    Ok(())
}

pub fn read_curve_csv(text: &str) -> Result<Vec<SweepRow>, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CURVE_HEADER => {}
        _ => {
            return Err(DataError::Malformed {
                line: 1,
                reason: format!("expected header {CURVE_HEADER:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 3 {
            return Err(DataError::Malformed {
                line: idx + 1,
                reason: format!("expected 3 columns, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, DataError> {
            s.trim().parse().map_err(|_| DataError::Malformed {
                line: idx + 1,
                reason: format!("bad number {s:?}"),
            })
        };
        rows.push(SweepRow {
            theta_p: parse(fields[0])?,
            tlf: parse(fields[1])?,
            one_minus_iou: parse(fields[2])?,
        });
    }
    Ok(rows)
}
