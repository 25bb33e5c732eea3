//! Synthetic fixtures: a balanced node tree with known ground truth and a
//! generator of nested-box annotations.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BoundingBox, Catalog, EdgeStats, EntailmentPair, HierarchyTree, NodeGroup, NodeInfo, PairKind};

/// Balanced tree where every node is its own label. The root plays the
/// scene; its descendants are boxes.
#[derive(Debug, Clone)]
pub struct BalancedTree {
    pub ids: Vec<String>,
    pub depth: Vec<usize>,
    pub parent: Vec<Option<usize>>,
    /// Every (ancestor, descendant) pair.
    pub pairs: Vec<EntailmentPair>,
    /// Parent-to-child label edges between boxes.
    pub tree: HierarchyTree,
    pub catalog: Catalog,
}

impl BalancedTree {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Nodes with at least one child.
    pub fn internal_nodes(&self) -> Vec<usize> {
        let parents: BTreeSet<usize> = self.parent.iter().flatten().copied().collect();
        parents.into_iter().collect()
    }

    pub fn ancestors(&self, mut node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        while let Some(p) = self.parent[node] {
            out.push(p);
            node = p;
        }
        out
    }
}

/// `depth` levels below the root, `branching` children per node, ids in
/// breadth-first order (`n00`, `n01`, ...). Depth 3 and branching 3 give 40
/// nodes and 102 ancestor pairs.
pub fn balanced_tree(depth: usize, branching: usize) -> BalancedTree {
    let mut parent = vec![None];
    let mut level = vec![0usize];
    let mut frontier = vec![0usize];
    for d in 1..=depth {
        let mut next = Vec::new();
        for &p in &frontier {
            for _ in 0..branching {
                next.push(parent.len());
                parent.push(Some(p));
                level.push(d);
            }
        }
        frontier = next;
    }
    let n = parent.len();
    let width = (n.max(2) - 1).to_string().len().max(2);
    let ids: Vec<String> = (0..n).map(|i| format!("n{i:0width$}")).collect();

    let mut fixture = BalancedTree {
        ids,
        depth: level,
        parent,
        pairs: Vec::new(),
        tree: HierarchyTree::default(),
        catalog: Catalog::default(),
    };
    for node in 0..n {
        for a in fixture.ancestors(node) {
            let kind = if a == 0 { PairKind::SceneToBox } else { PairKind::BoxToBox };
            fixture.pairs.push(EntailmentPair::new(&fixture.ids[a], &fixture.ids[node], kind));
        }
    }
    fixture.pairs.sort_by(|a, b| (&a.parent_id, &a.child_id).cmp(&(&b.parent_id, &b.child_id)));

    let edges = (1..n).filter_map(|c| {
        let p = fixture.parent[c]?;
        (p != 0).then(|| {
            (
                (fixture.ids[p].clone(), fixture.ids[c].clone()),
                EdgeStats {
                    frequency: 1,
                    proportion: 1.0,
                },
            )
        })
    });
    fixture.tree = HierarchyTree::from_edges(edges).expect("a tree has no cycles");

    let nodes = (0..n).map(|i| {
        if i == 0 {
            NodeInfo {
                id: fixture.ids[0].clone(),
                group: NodeGroup::Scene,
                label: None,
                contains: fixture.ids[1..].iter().cloned().collect(),
            }
        } else {
            NodeInfo {
                id: fixture.ids[i].clone(),
                group: if fixture.depth[i] == 1 { NodeGroup::Object } else { NodeGroup::Part },
                label: Some(fixture.ids[i].clone()),
                contains: BTreeSet::new(),
            }
        }
    });
    fixture.catalog = Catalog::new(nodes);
    fixture
}

/// Object taxonomy for [`nested_annotations`]: (object, parts), where each
/// part lists its sub-parts. Parts are shared between objects.
const TAXONOMY: &[(&str, &[(&str, &[&str])])] = &[
    ("car", &[("wheel", &["tire"]), ("door", &["handle"]), ("window", &[])]),
    ("bicycle", &[("wheel", &["tire"]), ("seat", &[])]),
    ("person", &[("face", &["eye", "mouth"]), ("hand", &[])]),
    ("house", &[("door", &["handle"]), ("window", &[]), ("roof", &[])]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct NestedScenes {
    pub images: usize,
    /// At most this many objects per image (at least one).
    pub max_objects: usize,
    /// Chance that each part (and sub-part) of an object is annotated.
    pub part_probability: f64,
    pub seed: u64,
}

impl Default for NestedScenes {
    fn default() -> Self {
        NestedScenes {
            images: 60,
            max_objects: 3,
            part_probability: 0.8,
            seed: 0,
        }
    }
}

fn sub_box(outer: [f64; 4], rng: &mut ChaCha8Rng, frac: f64) -> [f64; 4] {
    let w = (outer[2] - outer[0]) * frac;
    let h = (outer[3] - outer[1]) * frac;
    let x = outer[0] + rng.random_range(0.0..=1.0) * (outer[2] - outer[0] - w);
    let y = outer[1] + rng.random_range(0.0..=1.0) * (outer[3] - outer[1] - h);
    [x, y, x + w, y + h]
}

/// Images holding side-by-side objects whose part boxes nest inside them.
/// Deterministic for a fixed configuration.
pub fn nested_annotations(config: &NestedScenes) -> Vec<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut boxes = Vec::new();
    for img in 0..config.images {
        let image_id = format!("img{img:04}");
        let objects = rng.random_range(1..=config.max_objects.max(1));
        let slot = 1.0 / objects as f64;
        let mut next_box = 0;
        let mut push = |bbox: [f64; 4], label: &str, boxes: &mut Vec<BoundingBox>| {
            boxes.push(BoundingBox {
                image_id: image_id.clone(),
                box_id: format!("{image_id}_b{next_box:02}"),
                bbox,
                label: label.to_string(),
                is_group_of: false,
            });
            next_box += 1;
        };
        for s in 0..objects {
            let (object, parts) = TAXONOMY[rng.random_range(0..TAXONOMY.len())];
            let x0 = s as f64 * slot;
            let obj = [x0 + 0.05 * slot, 0.05, x0 + 0.95 * slot, 0.95];
            push(obj, object, &mut boxes);
            // parts in disjoint horizontal bands of the object
            let band = (obj[3] - obj[1]) / parts.len() as f64;
            for (b, (part, subparts)) in parts.iter().enumerate() {
                if !rng.random_bool(config.part_probability) {
                    continue;
                }
                let region = [obj[0], obj[1] + b as f64 * band, obj[2], obj[1] + (b + 1) as f64 * band];
                let part_box = sub_box(region, &mut rng, 0.85);
                push(part_box, part, &mut boxes);
                let cols = subparts.len().max(1) as f64;
                for (k, sub) in subparts.iter().enumerate() {
                    if !rng.random_bool(config.part_probability) {
                        continue;
                    }
                    let w = (part_box[2] - part_box[0]) / cols;
                    let cell = [
                        part_box[0] + k as f64 * w,
                        part_box[1],
                        part_box[0] + (k + 1) as f64 * w,
                        part_box[3],
                    ];
                    push(sub_box(cell, &mut rng, 0.8), sub, &mut boxes);
                }
            }
        }
    }
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pairs, PairCounts, PairRules};

    #[test]
    fn balanced_tree_sizes() {
        let t = balanced_tree(3, 3);
        assert_eq!(t.len(), 40);
        assert_eq!(t.pairs.len(), 3 + 2 * 9 + 3 * 27);
        assert_eq!(t.internal_nodes().len(), 13);
        assert_eq!(t.catalog.len(), 40);
        // edges between boxes: 9 + 27
        assert_eq!(t.tree.edges().len(), 36);
        assert_eq!(t.ids[0], "n00");
        assert_eq!(t.ids[39], "n39");
        assert_eq!(t.ancestors(39), vec![12, 3, 0]);
    }

    #[test]
    fn nested_annotations_are_valid_and_deterministic() {
        let cfg = NestedScenes {
            images: 20,
            ..Default::default()
        };
        let a = nested_annotations(&cfg);
        assert_eq!(a, nested_annotations(&cfg));
        assert!(a.iter().all(|b| b.validate().is_ok()));
        let ids: BTreeSet<&str> = a.iter().map(|b| b.box_id.as_str()).collect();
        assert_eq!(ids.len(), a.len());
    }

    #[test]
    fn nested_annotations_yield_multi_level_pairs() {
        let boxes = nested_annotations(&NestedScenes::default());
        let rules = PairRules {
            cross_image_k: 0,
            ..Default::default()
        };
        let pairs = generate_pairs(&boxes, &rules).unwrap();
        let counts = PairCounts::of(&pairs);
        assert!(counts.scene_to_box > 0 && counts.box_to_box > 0);
        assert_eq!(counts.cross_image, 0);
        // object -> sub-part pairs skip a level
        let label = |id: &str| boxes.iter().find(|b| b.box_id == id).unwrap().label.as_str();
        assert!(pairs
            .iter()
            .filter(|p| p.kind == PairKind::BoxToBox)
            .any(|p| label(&p.parent_id) == "car" && label(&p.child_id) == "tire"));
        // the smallest sub-parts survive the area filter
        assert!(boxes.iter().all(|b| b.area() >= 0.01));
    }
}
