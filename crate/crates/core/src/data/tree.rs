//! Label-level hierarchy built from box-to-box pair statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotations::BoundingBox;
use super::pairs::{EntailmentPair, PairKind};
use crate::error::{Error, Result};

/// Support of one `parent_label -> child_label` edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    /// Number of box-to-box pairs with these labels.
    pub frequency: usize,
    /// Fraction of parent-label boxes containing at least one child-label box.
    pub proportion: f64,
}

pub type LabelEdge = (String, String);

/// Counts label edges over box-to-box pairs. Scene pairs carry no parent
/// label and are ignored.
pub fn edge_statistics(pairs: &[EntailmentPair], boxes: &[BoundingBox]) -> BTreeMap<LabelEdge, EdgeStats> {
    let label_of: HashMap<&str, &str> = boxes.iter().map(|b| (b.box_id.as_str(), b.label.as_str())).collect();
    let mut label_totals: HashMap<&str, usize> = HashMap::new();
    for b in boxes {
        *label_totals.entry(b.label.as_str()).or_default() += 1;
    }

    let mut frequency: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut parents_with_child: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
    for p in pairs.iter().filter(|p| p.kind == PairKind::BoxToBox) {
        let (Some(&pl), Some(&cl)) = (label_of.get(p.parent_id.as_str()), label_of.get(p.child_id.as_str())) else {
            log::warn!("pair {} -> {} has unresolvable labels; skipped", p.parent_id, p.child_id);
            continue;
        };
        *frequency.entry((pl, cl)).or_default() += 1;
        parents_with_child.entry((pl, cl)).or_default().insert(p.parent_id.as_str());
    }

    frequency
        .into_iter()
        .map(|((pl, cl), freq)| {
            let with_child = parents_with_child[&(pl, cl)].len();
            let proportion = with_child as f64 / label_totals[pl] as f64;
            (
                (pl.to_string(), cl.to_string()),
                EdgeStats {
                    frequency: freq,
                    proportion,
                },
            )
        })
        .collect()
}

/// Directed acyclic label graph used as retrieval ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HierarchyTree {
    edges: BTreeMap<LabelEdge, EdgeStats>,
    children: BTreeMap<String, BTreeSet<String>>,
    parents: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct TreeJson {
    edges: Vec<EdgeJson>,
}

#[derive(Serialize, Deserialize)]
struct EdgeJson {
    parent: String,
    child: String,
    frequency: usize,
    proportion: f64,
}

impl HierarchyTree {
    /// Builds a tree from explicit edges. Fails if they contain a cycle.
    pub fn from_edges(edges: impl IntoIterator<Item = (LabelEdge, EdgeStats)>) -> Result<Self> {
        let mut tree = HierarchyTree::default();
        for ((p, c), s) in edges {
            tree.insert(p, c, s);
        }
        if tree.topological_order().is_none() {
            return Err(Error::invalid("hierarchy edges contain a cycle"));
        }
        Ok(tree)
    }

    fn insert(&mut self, parent: String, child: String, stats: EdgeStats) {
        self.children.entry(parent.clone()).or_default().insert(child.clone());
        self.parents.entry(child.clone()).or_default().insert(parent.clone());
        self.edges.insert((parent, child), stats);
    }

    fn remove(&mut self, parent: &str, child: &str) {
        self.edges.remove(&(parent.to_string(), child.to_string()));
        if let Some(set) = self.children.get_mut(parent) {
            set.remove(child);
        }
        if let Some(set) = self.parents.get_mut(child) {
            set.remove(parent);
        }
    }

    pub fn edges(&self) -> &BTreeMap<LabelEdge, EdgeStats> {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Every label that appears on some edge.
    pub fn labels(&self) -> BTreeSet<&str> {
        self.edges
            .keys()
            .flat_map(|(p, c)| [p.as_str(), c.as_str()])
            .collect()
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.children.get(label).is_some_and(|s| !s.is_empty())
            || self.parents.get(label).is_some_and(|s| !s.is_empty())
    }

    fn reach(&self, labels: &BTreeSet<String>, adjacency: &BTreeMap<String, BTreeSet<String>>) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&str> = VecDeque::new();
        for l in labels {
            if self.contains_label(l) {
                queue.push_back(l);
            } else {
                log::debug!("label {l:?} is not in the hierarchy; ignored");
            }
        }
        while let Some(l) = queue.pop_front() {
            for next in adjacency.get(l).into_iter().flatten() {
                if seen.insert(next.clone()) {
                    queue.push_back(next);
                }
            }
        }
        for l in labels {
            seen.remove(l);
        }
        seen
    }

    /// Labels reachable below the inputs, excluding the inputs themselves.
    pub fn descendants(&self, labels: &BTreeSet<String>) -> BTreeSet<String> {
        self.reach(labels, &self.children)
    }

    /// Labels reachable above the inputs, excluding the inputs themselves.
    pub fn ancestors(&self, labels: &BTreeSet<String>) -> BTreeSet<String> {
        self.reach(labels, &self.parents)
    }

    /// Kahn's algorithm; `None` when a cycle exists.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let labels = self.labels();
        let mut indegree: BTreeMap<&str, usize> = labels.iter().map(|&l| (l, 0)).collect();
        for (_, c) in self.edges.keys() {
            *indegree.get_mut(c.as_str()).unwrap() += 1;
        }
        let mut ready: VecDeque<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&l, _)| l).collect();
        let mut order = Vec::with_capacity(labels.len());
        while let Some(l) = ready.pop_front() {
            order.push(l.to_string());
            for c in self.children.get(l).into_iter().flatten() {
                let d = indegree.get_mut(c.as_str()).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push_back(c);
                }
            }
        }
        (order.len() == labels.len()).then_some(order)
    }

    /// Some directed cycle as a list of edges, if one exists.
    fn find_cycle(&self) -> Option<Vec<LabelEdge>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        fn visit<'a>(
            tree: &'a HierarchyTree,
            node: &'a str,
            marks: &mut HashMap<&'a str, Mark>,
            stack: &mut Vec<&'a str>,
        ) -> Option<Vec<LabelEdge>> {
            marks.insert(node, Mark::Open);
            stack.push(node);
            for next in tree.children.get(node).into_iter().flatten() {
                match marks.get(next.as_str()) {
                    Some(Mark::Open) => {
                        let start = stack.iter().position(|&s| s == next).unwrap();
                        let mut path: Vec<&str> = stack[start..].to_vec();
                        path.push(next);
                        return Some(
                            path.windows(2)
                                .map(|w| (w[0].to_string(), w[1].to_string()))
                                .collect(),
                        );
                    }
                    Some(Mark::Done) => {}
                    None => {
                        if let Some(c) = visit(tree, next, marks, stack) {
                            return Some(c);
                        }
                    }
                }
            }
            stack.pop();
            marks.insert(node, Mark::Done);
            None
        }

        let mut marks = HashMap::new();
        for label in self.labels() {
            if !marks.contains_key(label) {
                let mut stack = Vec::new();
                if let Some(c) = visit(self, label, &mut marks, &mut stack) {
                    return Some(c);
                }
            }
        }
        None
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TreeJson {
            edges: self
                .edges
                .iter()
                .map(|((p, c), s)| EdgeJson {
                    parent: p.clone(),
                    child: c.clone(),
                    frequency: s.frequency,
                    proportion: s.proportion,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TreeJson = serde_json::from_str(text)?;
        HierarchyTree::from_edges(doc.edges.into_iter().map(|e| {
            (
                (e.parent, e.child),
                EdgeStats {
                    frequency: e.frequency,
                    proportion: e.proportion,
                },
            )
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        HierarchyTree::from_json(&text)
    }
}

/// Result of [`build_hierarchy_tree`].
#[derive(Debug, Clone)]
pub struct TreeBuild {
    pub tree: HierarchyTree,
    /// Edges removed to break cycles, in removal order.
    pub removed_for_cycles: Vec<LabelEdge>,
}

/// Keeps edges meeting both thresholds, then removes the weakest edge of
/// each remaining cycle until the graph is acyclic.
pub fn build_hierarchy_tree(
    stats: &BTreeMap<LabelEdge, EdgeStats>,
    freq_threshold: usize,
    prop_threshold: f64,
) -> TreeBuild {
    let mut tree = HierarchyTree::default();
    for ((p, c), s) in stats {
        if s.frequency >= freq_threshold && s.proportion >= prop_threshold {
            tree.insert(p.clone(), c.clone(), *s);
        }
    }
    let mut removed = Vec::new();
    while let Some(cycle) = tree.find_cycle() {
        let weakest = cycle
            .iter()
            .min_by(|a, b| {
                let (sa, sb) = (&tree.edges[*a], &tree.edges[*b]);
                sa.frequency
                    .cmp(&sb.frequency)
                    .then(sa.proportion.total_cmp(&sb.proportion))
                    .then(a.cmp(b))
            })
            .cloned()
            .expect("cycles are non-empty");
        log::warn!(
            "label cycle {:?}: removing weakest edge {} -> {}",
            cycle.iter().map(|(p, _)| p.as_str()).collect::<Vec<_>>(),
            weakest.0,
            weakest.1
        );
        tree.remove(&weakest.0, &weakest.1);
        removed.push(weakest);
    }
    TreeBuild {
        tree,
        removed_for_cycles: removed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(freq: usize, prop: f64) -> EdgeStats {
        EdgeStats {
            frequency: freq,
            proportion: prop,
        }
    }

    fn edge(p: &str, c: &str) -> LabelEdge {
        (p.to_string(), c.to_string())
    }

    fn set(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn bx(image: &str, id: &str, label: &str) -> BoundingBox {
        BoundingBox {
            image_id: image.into(),
            box_id: id.into(),
            bbox: [0.0, 0.0, 0.5, 0.5],
            label: label.into(),
            is_group_of: false,
        }
    }

    #[test]
    fn statistics_count_frequency_and_proportion() {
        // one bicycle containing two wheels, a second bicycle with none
        let boxes = vec![
            bx("i", "b1", "bicycle"),
            bx("i", "w1", "wheel"),
            bx("i", "w2", "wheel"),
            bx("j", "b2", "bicycle"),
        ];
        let pairs = vec![
            EntailmentPair::new("i", "b1", PairKind::SceneToBox),
            EntailmentPair::new("b1", "w1", PairKind::BoxToBox),
            EntailmentPair::new("b1", "w2", PairKind::BoxToBox),
        ];
        let s = edge_statistics(&pairs, &boxes);
        assert_eq!(s.len(), 1);
        let e = s[&edge("bicycle", "wheel")];
        assert_eq!(e.frequency, 2);
        assert_eq!(e.proportion, 0.5);
        assert!(edge_statistics(&[], &boxes).is_empty());
    }

    #[test]
    fn thresholds_keep_and_drop() {
        let mut s = BTreeMap::new();
        s.insert(edge("bicycle", "wheel"), stats(60, 0.40));
        s.insert(edge("car", "mirror"), stats(40, 0.40));
        s.insert(edge("person", "hat"), stats(60, 0.05));
        let t = build_hierarchy_tree(&s, 50, 0.10).tree;
        assert_eq!(t.edges().keys().cloned().collect::<Vec<_>>(), vec![edge("bicycle", "wheel")]);
        let empty = build_hierarchy_tree(&s, usize::MAX, 1.0).tree;
        assert!(empty.is_empty());
    }

    #[test]
    fn thresholds_are_inclusive() {
        let mut s = BTreeMap::new();
        s.insert(edge("a", "b"), stats(50, 0.10));
        assert_eq!(build_hierarchy_tree(&s, 50, 0.10).tree.edges().len(), 1);
    }

    #[test]
    fn cycles_lose_their_weakest_edge() {
        let mut s = BTreeMap::new();
        s.insert(edge("a", "b"), stats(90, 0.5));
        s.insert(edge("b", "c"), stats(70, 0.5));
        s.insert(edge("c", "a"), stats(60, 0.5));
        s.insert(edge("x", "x"), stats(80, 0.5));
        let built = build_hierarchy_tree(&s, 1, 0.0);
        assert!(built.tree.topological_order().is_some());
        assert_eq!(built.removed_for_cycles.len(), 2);
        assert!(built.removed_for_cycles.contains(&edge("c", "a")));
        assert!(built.removed_for_cycles.contains(&edge("x", "x")));
        assert_eq!(built.tree.edges().len(), 2);
    }

    #[test]
    fn descendants_and_ancestors() {
        let t = HierarchyTree::from_edges([
            (edge("car", "wheel"), stats(1, 1.0)),
            (edge("wheel", "tire"), stats(1, 1.0)),
        ])
        .unwrap();
        assert_eq!(t.descendants(&set(&["car"])), set(&["wheel", "tire"]));
        assert!(t.descendants(&set(&["tire"])).is_empty());
        assert_eq!(t.ancestors(&set(&["wheel"])), set(&["car"]));
        assert!(t.descendants(&set(&["unknown"])).is_empty());
    }

    #[test]
    fn from_edges_rejects_cycles() {
        assert!(HierarchyTree::from_edges([
            (edge("a", "b"), stats(1, 1.0)),
            (edge("b", "a"), stats(1, 1.0)),
        ])
        .is_err());
    }

    #[test]
    fn json_roundtrip() {
        let t = HierarchyTree::from_edges([
            (edge("car", "wheel"), stats(60, 0.4)),
            (edge("wheel", "tire"), stats(55, 0.125)),
        ])
        .unwrap();
        let text = t.to_json().unwrap();
        assert!(text.contains("\"edges\""));
        assert_eq!(HierarchyTree::from_json(&text).unwrap(), t);
    }
}
