use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Counts over `bin_edges` shared by every group in the profile.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub bin_edges: Vec<f64>,
    pub groups: BTreeMap<String, NormSummary>,
}

/// Tangent-norm statistics per group. `groups` maps node id to group tag;
/// ids missing from the table are ignored.
pub fn norm_profile(table: &EmbeddingTable, groups: &BTreeMap<String, String>, bins: usize) -> Result<NormProfile> {
    let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (id, group) in groups {
        if let Some(i) = table.index_of(id) {
            by_group.entry(group.as_str()).or_default().push(table.tangent_norm(i));
        }
    }
    if by_group.is_empty() {
        return Err(Error::invalid("no grouped nodes found in the embedding table"));
    }
    let bins = bins.max(1);
    let hi = by_group.values().flatten().fold(0.0f64, |m, &v| m.max(v));
    let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
    let bin_edges = (0..=bins).map(|i| i as f64 * width).collect();

    let groups = by_group
        .into_iter()
        .map(|(group, norms)| {
            let n = norms.len() as f64;
            let mean = norms.iter().sum::<f64>() / n;
            let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let mut histogram = vec![0usize; bins];
            for &v in &norms {
                histogram[((v / width) as usize).min(bins - 1)] += 1;
            }
            let summary = NormSummary {
                count: norms.len(),
                mean,
                std: var.sqrt(),
                min: norms.iter().copied().fold(f64::INFINITY, f64::min),
                max: norms.iter().copied().fold(0.0, f64::max),
                histogram,
            };
            (group.to_string(), summary)
        })
        .collect();
    Ok(NormProfile { bin_edges, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SpaceKind;

    fn table() -> EmbeddingTable {
        let mut t = EmbeddingTable::zeros(vec!["a".into(), "b".into(), "c".into()], 2, SpaceKind::Hyperbolic).unwrap();
        t.row_mut(0).copy_from_slice(&[3.0, 4.0]);
        t.row_mut(1).copy_from_slice(&[1.0, 0.0]);
        t.row_mut(2).copy_from_slice(&[0.0, 3.0]);
        t
    }

    fn groups(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn single_node_group() {
        let p = norm_profile(&table(), &groups(&[("a", "scene")]), 4).unwrap();
        let s = &p.groups["scene"];
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.histogram, vec![0, 0, 0, 1]);
    }

    #[test]
    fn population_std() {
        let p = norm_profile(&table(), &groups(&[("b", "part"), ("c", "part"), ("a", "scene")]), 5).unwrap();
        let s = &p.groups["part"];
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(p.bin_edges.len(), 6);
        assert_eq!(s.histogram.iter().sum::<usize>(), 2);
    }

    #[test]
    fn zero_table_has_zero_means() {
        let t = EmbeddingTable::zeros(vec!["a".into(), "b".into()], 3, SpaceKind::Euclidean).unwrap();
        let p = norm_profile(&t, &groups(&[("a", "x"), ("b", "y")]), 3).unwrap();
        assert!(p.groups.values().all(|s| s.mean == 0.0 && s.histogram[0] == 1));
    }

    #[test]
    fn empty_groups_are_rejected() {
        assert!(norm_profile(&table(), &BTreeMap::new(), 3).is_err());
        assert!(norm_profile(&table(), &groups(&[("zz", "x")]), 3).is_err());
    }
}
