//! Bounding-box annotations: one JSON object per line.
//!
//! ```text
//! {"image_id": "img1", "box_id": "b1", "box": [0.1, 0.1, 0.5, 0.6], "label": "car", "is_group_of": false}
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Result};

/// An axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub image_id: String,
    pub box_id: String,
    /// `[xmin, ymin, xmax, ymax]`, each in `[0, 1]`.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub label: String,
    #[serde(default)]
    pub is_group_of: bool,
}

impl BoundingBox {
    pub fn xmin(&self) -> f64 {
        self.bbox[0]
    }
    pub fn ymin(&self) -> f64 {
        self.bbox[1]
    }
    pub fn xmax(&self) -> f64 {
        self.bbox[2]
    }
    pub fn ymax(&self) -> f64 {
        self.bbox[3]
    }

    /// Area as a fraction of the full image.
    pub fn area(&self) -> f64 {
        (self.xmax() - self.xmin()).max(0.0) * (self.ymax() - self.ymin()).max(0.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.xmax().min(other.xmax()) - self.xmin().max(other.xmin());
        let h = self.ymax().min(other.ymax()) - self.ymin().max(other.ymin());
        w.max(0.0) * h.max(0.0)
    }

    /// Checks the record invariants; the message names the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        if self.box_id.is_empty() {
            return Err("empty box_id".into());
        }
        if self.label.is_empty() {
            return Err("empty label".into());
        }
        if let Some(v) = self.bbox.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(format!("coordinate {v} outside [0, 1]"));
        }
        if self.xmin() >= self.xmax() {
            return Err(format!("xmin {} must be < xmax {}", self.xmin(), self.xmax()));
        }
        if self.ymin() >= self.ymax() {
            return Err(format!("ymin {} must be < ymax {}", self.ymin(), self.ymax()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Any invalid record fails the whole load.
    #[default]
    Strict,
    /// Invalid records are skipped and reported.
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedAnnotations {
    pub boxes: Vec<BoundingBox>,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn load_annotations(path: &Path, mode: LoadMode) -> Result<LoadedAnnotations> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    parse_annotations(file, path, mode)
}

pub fn parse_annotations<R: Read>(reader: R, path: &Path, mode: LoadMode) -> Result<LoadedAnnotations> {
    let mut out = LoadedAnnotations::default();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<BoundingBox>(&line)
            .map_err(|e| e.to_string())
            .and_then(|b| b.validate().map(|_| b))
            .and_then(|b| {
                if seen.insert(b.box_id.clone()) {
                    Ok(b)
                } else {
                    Err(format!("duplicate box_id {:?}", b.box_id))
                }
            });
        match parsed {
            Ok(b) => out.boxes.push(b),
            Err(message) => out.diagnostics.push(Diagnostic { line: line_no, message }),
        }
    }
    if mode == LoadMode::Strict && !out.diagnostics.is_empty() {
        let first = out.diagnostics[0].clone();
        return Err(Error::Annotations {
            path: path.to_path_buf(),
            count: out.diagnostics.len(),
            first_line: first.line,
            first_message: first.message,
            diagnostics: out.diagnostics,
        });
    }
    for d in &out.diagnostics {
        log::warn!("{}: skipped record at {d}", path.display());
    }
    Ok(out)
}

/// Converts a detection CSV with the columns `ImageID`, `LabelName`, `XMin`,
/// `XMax`, `YMin`, `YMax` and optionally `IsGroupOf` (as published with
/// OpenImages box annotations). Box ids are `<image>_<row>`.
pub fn convert_detection_csv<R: Read>(reader: R) -> Result<Vec<BoundingBox>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::invalid(format!("csv header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::invalid(format!("csv is missing column {name}")));
    let (image, label) = (need("ImageID")?, need("LabelName")?);
    let (xmin, xmax, ymin, ymax) = (need("XMin")?, need("XMax")?, need("YMin")?, need("YMax")?);
    let group = col("IsGroupOf");

    let mut boxes = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::invalid(format!("csv line {line}: {e}")))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("csv line {line}: {e}")))
        };
        let image_id = rec.get(image).unwrap_or("").to_string();
        let b = BoundingBox {
            box_id: format!("{image_id}_{row}"),
            image_id,
            bbox: [num(xmin)?, num(ymin)?, num(xmax)?, num(ymax)?],
            label: rec.get(label).unwrap_or("").to_string(),
            is_group_of: group.and_then(|g| rec.get(g)).is_some_and(|v| v.trim() == "1"),
        };
        b.validate().map_err(|m| Error::invalid(format!("csv line {line}: {m}")))?;
        boxes.push(b);
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"image_id":"i1","box_id":"b1","box":[0.1,0.1,0.5,0.5],"label":"car","is_group_of":false}"#;

    fn parse(s: &str, mode: LoadMode) -> Result<LoadedAnnotations> {
        parse_annotations(s.as_bytes(), Path::new("ann.jsonl"), mode)
    }

    #[test]
    fn one_valid_line() {
        let got = parse(GOOD, LoadMode::Strict).unwrap();
        assert_eq!(got.boxes.len(), 1);
        assert_eq!(got.boxes[0].label, "car");
        assert!((got.boxes[0].area() - 0.16).abs() < 1e-12);
    }

    #[test]
    fn inverted_box_reports_line_one() {
        let bad = r#"{"image_id":"i1","box_id":"b1","box":[0.6,0.1,0.5,0.5],"label":"car","is_group_of":false}"#;
        match parse(bad, LoadMode::Strict) {
            Err(Error::Annotations { first_line, diagnostics, .. }) => {
                assert_eq!(first_line, 1);
                assert_eq!(diagnostics.len(), 1);
                assert!(diagnostics[0].message.contains("xmin"));
            }
            other => panic!("expected annotation error, got {other:?}"),
        }
    }

    #[test]
    fn strict_and_lenient_modes() {
        let text = [
            GOOD.to_string(),
            GOOD.replace("b1", "b2"),
            "{not json".to_string(),
            GOOD.replace("b1", "b3"),
        ]
        .join("\n");
        assert!(parse(&text, LoadMode::Strict).is_err());
        let got = parse(&text, LoadMode::Lenient).unwrap();
        assert_eq!(got.boxes.len(), 3);
        assert_eq!(got.diagnostics.len(), 1);
        assert_eq!(got.diagnostics[0].line, 3);
    }

    #[test]
    fn empty_input_is_empty() {
        let got = parse("", LoadMode::Strict).unwrap();
        assert!(got.boxes.is_empty());
        let got = parse("\n\n", LoadMode::Strict).unwrap();
        assert!(got.boxes.is_empty());
    }

    #[test]
    fn duplicate_box_ids_rejected() {
        let text = format!("{GOOD}\n{GOOD}");
        let got = parse(&text, LoadMode::Lenient).unwrap();
        assert_eq!(got.boxes.len(), 1);
        assert_eq!(got.diagnostics[0].line, 2);
    }

    #[test]
    fn group_of_defaults_false() {
        let text = r#"{"image_id":"i1","box_id":"b1","box":[0,0,1,1],"label":"crowd"}"#;
        assert!(!parse(text, LoadMode::Strict).unwrap().boxes[0].is_group_of);
    }

    #[test]
    fn converts_detection_csv() {
        let csv = "ImageID,Source,LabelName,Confidence,XMin,XMax,YMin,YMax,IsOccluded,IsTruncated,IsGroupOf\n\
                   img1,xclick,/m/0k4j,1,0.1,0.6,0.2,0.9,0,0,0\n\
                   img1,xclick,/m/01bjv,1,0.0,1.0,0.0,1.0,0,0,1\n";
        let boxes = convert_detection_csv(csv.as_bytes()).unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].bbox, [0.1, 0.2, 0.6, 0.9]);
        assert_eq!(boxes[0].box_id, "img1_0");
        assert!(boxes[1].is_group_of);
    }
}
