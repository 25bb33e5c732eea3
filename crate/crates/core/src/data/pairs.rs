//! Entailment-pair generation from box annotations.
//!
//! Within an image, the scene entails every box, and a larger box entails a
//! smaller one when enough of the smaller box lies inside it. Across
//! images, a scene also entails up to `K` boxes sampled from other images
//! that share a label with one of its own boxes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::annotations::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    SceneToBox,
    BoxToBox,
    CrossImage,
}

impl PairKind {
    pub const ALL: [PairKind; 3] = [PairKind::SceneToBox, PairKind::BoxToBox, PairKind::CrossImage];

    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::SceneToBox => "scene_to_box",
            PairKind::BoxToBox => "box_to_box",
            PairKind::CrossImage => "cross_image",
        }
    }
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PairKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pair kind {s:?}")))
    }
}

/// Directed parent-to-child entailment between two node ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntailmentPair {
    pub parent_id: String,
    pub child_id: String,
    pub kind: PairKind,
}

impl EntailmentPair {
    pub fn new(parent: impl Into<String>, child: impl Into<String>, kind: PairKind) -> Self {
        EntailmentPair {
            parent_id: parent.into(),
            child_id: child.into(),
            kind,
        }
    }
}

/// Knobs for pair generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairRules {
    /// Minimum fraction of the inner box that must lie inside the outer one.
    pub containment_threshold: f64,
    /// Boxes smaller than this fraction of the image are dropped.
    pub min_area_fraction: f64,
    /// Group-of boxes never act as the child of a box-to-box pair.
    pub drop_group_of_children: bool,
    /// Cross-image samples per (image, label).
    pub cross_image_k: usize,
    pub seed: u64,
}

impl Default for PairRules {
    fn default() -> Self {
        PairRules {
            containment_threshold: 0.8,
            min_area_fraction: 0.01,
            drop_group_of_children: true,
            cross_image_k: 1,
            seed: 0,
        }
    }
}

/// The outer side of a containment test.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    FullImage,
    Box(&'a BoundingBox),
}

/// Whether `inner` lies inside `outer` for at least `threshold` of its area.
/// A full image contains every one of its boxes.
pub fn containment(outer: Region<'_>, inner: &BoundingBox, threshold: f64) -> Result<bool> {
    let area = inner.area();
    if area <= 0.0 {
        return Err(Error::invalid(format!("box {} has zero area", inner.box_id)));
    }
    match outer {
        Region::FullImage => Ok(true),
        Region::Box(outer) => {
            if outer.image_id != inner.image_id {
                return Err(Error::invalid(format!(
                    "containment across images ({} vs {})",
                    outer.image_id, inner.image_id
                )));
            }
            Ok(outer.intersection_area(inner) / area >= threshold)
        }
    }
}

/// Drops boxes covering less than `min_area_fraction` of their image.
pub fn filter_boxes(boxes: &[BoundingBox], min_area_fraction: f64) -> Vec<BoundingBox> {
    boxes
        .iter()
        .filter(|b| b.area() >= min_area_fraction)
        .cloned()
        .collect()
}

/// Scene-to-box pairs for every box and box-to-box pairs for every
/// contained, strictly smaller box. Boxes of equal area never entail each other.
pub fn within_image_pairs(image_id: &str, boxes: &[BoundingBox], rules: &PairRules) -> Vec<EntailmentPair> {
    let mut sorted: Vec<&BoundingBox> = boxes.iter().collect();
    sorted.sort_by(|a, b| a.box_id.cmp(&b.box_id));

    let mut out: Vec<EntailmentPair> = sorted
        .iter()
        .map(|b| EntailmentPair::new(image_id, b.box_id.as_str(), PairKind::SceneToBox))
        .collect();
    for outer in &sorted {
        for inner in &sorted {
            if outer.box_id == inner.box_id || outer.area() <= inner.area() {
                continue;
            }
            if rules.drop_group_of_children && inner.is_group_of {
                continue;
            }
            // zero-area boxes were rejected at load time
            if containment(Region::Box(outer), inner, rules.containment_threshold).unwrap_or(false) {
                out.push(EntailmentPair::new(
                    outer.box_id.as_str(),
                    inner.box_id.as_str(),
                    PairKind::BoxToBox,
                ));
            }
        }
    }
    out
}

/// Boxes grouped by image and by label, sorted by id.
#[derive(Debug, Clone, Default)]
pub struct AnnotationIndex {
    by_image: BTreeMap<String, Vec<BoundingBox>>,
    by_label: BTreeMap<String, Vec<(String, String)>>,
}

impl AnnotationIndex {
    pub fn new(boxes: &[BoundingBox]) -> Self {
        let mut by_image: BTreeMap<String, Vec<BoundingBox>> = BTreeMap::new();
        let mut by_label: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for b in boxes {
            by_image.entry(b.image_id.clone()).or_default().push(b.clone());
            by_label
                .entry(b.label.clone())
                .or_default()
                .push((b.box_id.clone(), b.image_id.clone()));
        }
        for v in by_image.values_mut() {
            v.sort_by(|a, b| a.box_id.cmp(&b.box_id));
        }
        for v in by_label.values_mut() {
            v.sort();
        }
        AnnotationIndex { by_image, by_label }
    }

    pub fn images(&self) -> impl Iterator<Item = (&str, &[BoundingBox])> {
        self.by_image.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn boxes_of(&self, image_id: &str) -> &[BoundingBox] {
        self.by_image.get(image_id).map_or(&[], Vec::as_slice)
    }
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab","c") != ("a","bc")
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// For each label among the image's boxes, samples up to `k` boxes with that
/// label from other images, without replacement, and pairs the image with them.
pub fn cross_image_pairs(index: &AnnotationIndex, image_id: &str, k: usize, seed: u64) -> Vec<EntailmentPair> {
    if k == 0 {
        return Vec::new();
    }
    let labels: BTreeSet<&str> = index.boxes_of(image_id).iter().map(|b| b.label.as_str()).collect();
    let mut out = Vec::new();
    for label in labels {
        let candidates: Vec<&String> = index
            .by_label
            .get(label)
            .map(|v| v.iter().filter(|(_, img)| img != image_id).map(|(b, _)| b).collect())
            .unwrap_or_default();
        if candidates.len() < k {
            log::debug!(
                "image {image_id}: only {} cross-image candidates for label {label:?} (wanted {k})",
                candidates.len()
            );
        }
        let take = k.min(candidates.len());
        if take == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
            &seed.to_le_bytes(),
            image_id.as_bytes(),
            label.as_bytes(),
        ]));
        let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), take).into_vec();
        picked.sort_unstable();
        out.extend(
            picked
                .into_iter()
                .map(|i| EntailmentPair::new(image_id, candidates[i].as_str(), PairKind::CrossImage)),
        );
    }
    out
}

/// Counts of generated pairs by kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub scene_to_box: usize,
    pub box_to_box: usize,
    pub cross_image: usize,
    pub total: usize,
}

impl PairCounts {
    pub fn of(pairs: &[EntailmentPair]) -> Self {
        let mut c = PairCounts::default();
        for p in pairs {
            match p.kind {
                PairKind::SceneToBox => c.scene_to_box += 1,
                PairKind::BoxToBox => c.box_to_box += 1,
                PairKind::CrossImage => c.cross_image += 1,
            }
        }
        c.total = pairs.len();
        c
    }
}

/// Full pipeline: area filtering, within-image pairs and cross-image pairs,
/// in image-id order. Images are processed in parallel.
pub fn generate_pairs(boxes: &[BoundingBox], rules: &PairRules) -> Result<Vec<EntailmentPair>> {
    let kept = filter_boxes(boxes, rules.min_area_fraction);
    if kept.len() < boxes.len() {
        log::info!(
            "dropped {} box(es) below {:.3} of the image area",
            boxes.len() - kept.len(),
            rules.min_area_fraction
        );
    }
    let index = AnnotationIndex::new(&kept);
    let image_ids: HashSet<&str> = boxes.iter().map(|b| b.image_id.as_str()).collect();
    if let Some(b) = boxes.iter().find(|b| image_ids.contains(b.box_id.as_str())) {
        return Err(Error::invalid(format!(
            "box id {:?} collides with an image id",
            b.box_id
        )));
    }
    let images: Vec<(&str, &[BoundingBox])> = index.images().collect();
    let per_image: Vec<Vec<EntailmentPair>> = images
        .par_iter()
        .map(|(image_id, image_boxes)| {
            let mut pairs = within_image_pairs(image_id, image_boxes, rules);
            pairs.extend(cross_image_pairs(&index, image_id, rules.cross_image_k, rules.seed));
            pairs
        })
        .collect();
    Ok(per_image.into_iter().flatten().collect())
}

pub fn write_pairs_tsv(path: &Path, pairs: &[EntailmentPair]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.parent_id, p.child_id, p.kind)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_pairs_tsv(path: &Path) -> Result<Vec<EntailmentPair>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let kind = fields[2].parse::<PairKind>().map_err(|e| parse_err(e.to_string()))?;
        if fields[0] == fields[1] {
            return Err(parse_err("parent and child are the same node".into()));
        }
        out.push(EntailmentPair::new(fields[0], fields[1], kind));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn bx(image: &str, id: &str, b: [f64; 4], label: &str) -> BoundingBox {
        BoundingBox {
            image_id: image.into(),
            box_id: id.into(),
            bbox: b,
            label: label.into(),
            is_group_of: false,
        }
    }

    #[test]
    fn area_filter_threshold_is_inclusive() {
        let small = bx("i", "s", [0.0, 0.0, 0.05, 0.1], "x"); // 0.005
        let exact = bx("i", "e", [0.0, 0.0, 0.1, 0.1], "x"); // 0.01
        let kept = filter_boxes(&[small, exact.clone()], 0.01);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].box_id, "e");
        assert!(filter_boxes(&[], 0.01).is_empty());
        assert!((exact.area() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn containment_examples() {
        let outer = bx("i", "o", [0.0, 0.0, 1.0, 1.0], "a");
        let inner = bx("i", "n", [0.2, 0.2, 0.4, 0.4], "b");
        assert!(containment(Region::Box(&outer), &inner, 0.8).unwrap());
        assert!(containment(Region::FullImage, &inner, 0.8).unwrap());

        // inner [0,1]x[0,1] in a 1-wide strip: overlap fraction = outer xmax
        let unit = bx("i", "u", [0.0, 0.0, 0.5, 0.5], "b");
        let at_80 = bx("i", "o80", [0.0, 0.0, 0.4, 0.5], "a");
        let at_79 = bx("i", "o79", [0.0, 0.0, 0.395, 0.5], "a");
        assert!(containment(Region::Box(&at_80), &unit, 0.8).unwrap());
        assert!(!containment(Region::Box(&at_79), &unit, 0.8).unwrap());
    }

    #[test]
    fn containment_rejects_zero_area_and_cross_image() {
        let outer = bx("i", "o", [0.0, 0.0, 1.0, 1.0], "a");
        let flat = bx("i", "f", [0.2, 0.2, 0.2, 0.4], "b");
        assert!(containment(Region::Box(&outer), &flat, 0.8).is_err());
        let other = bx("j", "n", [0.2, 0.2, 0.4, 0.4], "b");
        assert!(containment(Region::Box(&outer), &other, 0.8).is_err());
    }

    #[test]
    fn within_image_nested_and_disjoint() {
        let b1 = bx("I", "b1", [0.0, 0.0, 0.5, 0.5], "car");
        let b2 = bx("I", "b2", [0.1, 0.1, 0.2, 0.2], "wheel");
        let b3 = bx("I", "b3", [0.6, 0.6, 0.9, 0.9], "tree");
        let got = within_image_pairs("I", &[b3, b2, b1], &PairRules::default());
        let want = vec![
            EntailmentPair::new("I", "b1", PairKind::SceneToBox),
            EntailmentPair::new("I", "b2", PairKind::SceneToBox),
            EntailmentPair::new("I", "b3", PairKind::SceneToBox),
            EntailmentPair::new("b1", "b2", PairKind::BoxToBox),
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn within_image_single_and_disjoint_pairs() {
        let b = bx("I", "b", [0.0, 0.0, 0.5, 0.5], "car");
        assert_eq!(
            within_image_pairs("I", &[b.clone()], &PairRules::default()),
            vec![EntailmentPair::new("I", "b", PairKind::SceneToBox)]
        );
        let c = bx("I", "c", [0.6, 0.6, 0.9, 0.9], "car");
        let got = within_image_pairs("I", &[b, c], &PairRules::default());
        assert!(got.iter().all(|p| p.kind == PairKind::SceneToBox));
    }

    #[test]
    fn equal_area_boxes_do_not_entail() {
        let a = bx("I", "a", [0.0, 0.0, 0.5, 0.5], "x");
        let b = bx("I", "b", [0.0, 0.0, 0.5, 0.5], "y");
        let got = within_image_pairs("I", &[a, b], &PairRules::default());
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn group_of_children_are_dropped_when_requested() {
        let big = bx("I", "big", [0.0, 0.0, 0.9, 0.9], "table");
        let mut crowd = bx("I", "crowd", [0.1, 0.1, 0.5, 0.5], "cups");
        crowd.is_group_of = true;
        let rules = PairRules::default();
        let got = within_image_pairs("I", &[big.clone(), crowd.clone()], &rules);
        assert!(!got.iter().any(|p| p.kind == PairKind::BoxToBox));
        let keep = PairRules {
            drop_group_of_children: false,
            ..rules
        };
        let got = within_image_pairs("I", &[big, crowd], &keep);
        assert!(got.contains(&EntailmentPair::new("big", "crowd", PairKind::BoxToBox)));
    }

    fn cross_fixture() -> AnnotationIndex {
        let mut boxes = vec![bx("I", "w0", [0.0, 0.0, 0.5, 0.5], "wheel")];
        for i in 0..5 {
            boxes.push(bx(&format!("J{i}"), &format!("d{i}"), [0.0, 0.0, 0.5, 0.5], "door"));
        }
        boxes.push(bx("J0", "w1", [0.5, 0.5, 0.9, 0.9], "wheel"));
        boxes.push(bx("K", "dk", [0.5, 0.5, 0.9, 0.9], "door"));
        AnnotationIndex::new(&boxes)
    }

    #[test]
    fn cross_image_forced_sample() {
        let idx = cross_fixture();
        let got = cross_image_pairs(&idx, "I", 1, 7);
        assert_eq!(got, vec![EntailmentPair::new("I", "w1", PairKind::CrossImage)]);
    }

    #[test]
    fn cross_image_k_zero_is_empty() {
        assert!(cross_image_pairs(&cross_fixture(), "I", 0, 7).is_empty());
    }

    #[test]
    fn cross_image_is_deterministic_and_excludes_own_image() {
        let idx = cross_fixture();
        let a = cross_image_pairs(&idx, "K", 2, 11);
        let b = cross_image_pairs(&idx, "K", 2, 11);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|p| p.child_id != "dk" && p.child_id.starts_with('d')));
        // scarce label: asks for 3 wheels but only one exists elsewhere
        assert_eq!(cross_image_pairs(&idx, "I", 3, 1).len(), 1);
    }

    #[test]
    fn tsv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        let pairs = vec![
            EntailmentPair::new("I", "b1", PairKind::SceneToBox),
            EntailmentPair::new("b1", "b2", PairKind::BoxToBox),
            EntailmentPair::new("I", "x", PairKind::CrossImage),
        ];
        write_pairs_tsv(&path, &pairs).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "I\tb1\tscene_to_box\nb1\tb2\tbox_to_box\nI\tx\tcross_image\n"
        );
        assert_eq!(read_pairs_tsv(&path).unwrap(), pairs);

        std::fs::write(&path, "a\tb\tscene_to_box\na\tb\n").unwrap();
        match read_pairs_tsv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn id_collision_is_rejected() {
        let boxes = vec![bx("I", "I", [0.0, 0.0, 0.5, 0.5], "x")];
        assert!(generate_pairs(&boxes, &PairRules::default()).is_err());
    }
}
