//! Per-node metadata: group tag, label and the labels a scene contains.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::annotations::BoundingBox;
use super::pairs::{EntailmentPair, PairKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeGroup {
    /// A full image.
    Scene,
    /// A box not contained in any other box.
    Object,
    /// A box contained in another box.
    Part,
}

impl NodeGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeGroup::Scene => "scene",
            NodeGroup::Object => "object",
            NodeGroup::Part => "part",
        }
    }
}

impl fmt::Display for NodeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(NodeGroup::Scene),
            "object" => Ok(NodeGroup::Object),
            "part" => Ok(NodeGroup::Part),
            other => Err(Error::invalid(format!("unknown node group {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: String,
    pub group: NodeGroup,
    /// Object label; `None` for scenes.
    pub label: Option<String>,
    /// Labels of the boxes inside a scene; empty for boxes.
    pub contains: BTreeSet<String>,
}

impl NodeInfo {
    pub fn is_scene(&self) -> bool {
        self.group == NodeGroup::Scene
    }

    /// The labels this node stands for in label-level comparisons.
    pub fn query_labels(&self) -> BTreeSet<String> {
        match &self.label {
            Some(l) => std::iter::once(l.clone()).collect(),
            None => self.contains.clone(),
        }
    }
}

/// Node metadata keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    nodes: BTreeMap<String, NodeInfo>,
}

impl Catalog {
    pub fn new(nodes: impl IntoIterator<Item = NodeInfo>) -> Self {
        Catalog {
            nodes: nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
        }
    }

    /// Scenes for every image, boxes tagged as parts when some box-to-box
    /// pair has them as the child.
    pub fn from_annotations(boxes: &[BoundingBox], pairs: &[EntailmentPair]) -> Self {
        let contained: BTreeSet<&str> = pairs
            .iter()
            .filter(|p| p.kind == PairKind::BoxToBox)
            .map(|p| p.child_id.as_str())
            .collect();
        let mut scenes: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
        let mut nodes = Vec::new();
        for b in boxes {
            scenes.entry(b.image_id.as_str()).or_default().insert(b.label.clone());
            nodes.push(NodeInfo {
                id: b.box_id.clone(),
                group: if contained.contains(b.box_id.as_str()) {
                    NodeGroup::Part
                } else {
                    NodeGroup::Object
                },
                label: Some(b.label.clone()),
                contains: BTreeSet::new(),
            });
        }
        nodes.extend(scenes.into_iter().map(|(id, contains)| NodeInfo {
            id: id.to_string(),
            group: NodeGroup::Scene,
            label: None,
            contains,
        }));
        Catalog::new(nodes)
    }

    pub fn get(&self, id: &str) -> Option<&NodeInfo> {
        self.nodes.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NodeInfo> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Group tag per node, for norm profiles.
    pub fn groups(&self) -> BTreeMap<String, String> {
        self.nodes
            .values()
            .map(|n| (n.id.clone(), n.group.to_string()))
            .collect()
    }

    /// Writes `id<TAB>group<TAB>label<TAB>contains` with `contains` comma-joined.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for n in self.nodes.values() {
            let contains: Vec<&str> = n.contains.iter().map(String::as_str).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                n.id,
                n.group,
                n.label.as_deref().unwrap_or(""),
                contains.join(",")
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut nodes = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            nodes.push(NodeInfo {
                id: f[0].to_string(),
                group: f[1].parse().map_err(|e: Error| err(e.to_string()))?,
                label: (!f[2].is_empty()).then(|| f[2].to_string()),
                contains: f[3].split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
            });
        }
        Ok(Catalog::new(nodes))
    }
}
