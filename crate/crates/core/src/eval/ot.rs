use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OTHER: &str = "other";

/// Normalized label histogram; the last bin is always [`OTHER`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    labels: Vec<String>,
    mass: Vec<f64>,
}

impl LabelDistribution {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Mass over `labels` (in that order) plus a trailing "other" bin.
    pub fn from_mass(labels: Vec<String>, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != labels.len() + 1 {
            return Err(Error::invalid(format!(
                "{} labels need {} masses, got {}",
                labels.len(),
                labels.len() + 1,
                mass.len()
            )));
        }
        if labels.iter().any(|l| l == OTHER) {
            return Err(Error::invalid("label list must not contain \"other\""));
        }
        if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::invalid("masses must be finite and nonnegative"));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("masses sum to {total}, expected 1")));
        }
        let mut labels = labels;
        labels.push(OTHER.to_string());
        Ok(LabelDistribution { labels, mass })
    }
}

/// Normalize `counts` over the query's hierarchy `labels`; counts for
/// labels outside that list go to "other".
pub fn label_distribution(labels: &[String], counts: &BTreeMap<String, usize>) -> Result<LabelDistribution> {
    let mut bins = vec![0usize; labels.len() + 1];
    let position: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    if position.len() != labels.len() {
        return Err(Error::invalid("duplicate labels in distribution"));
    }
    for (label, &n) in counts {
        let i = position.get(label.as_str()).copied().unwrap_or(labels.len());
        bins[i] += n;
    }
    let total: usize = bins.iter().sum();
    if total == 0 {
        return Err(Error::invalid("label counts are all zero"));
    }
    let mass = bins.iter().map(|&n| n as f64 / total as f64).collect();
    LabelDistribution::from_mass(labels.to_vec(), mass)
}

/// 1-D Wasserstein distance between histograms on bins 0..=m at unit
/// spacing: the sum of absolute CDF differences over the m gaps.
pub fn ot_distance(h: &LabelDistribution, r: &LabelDistribution) -> Result<f64> {
    if h.labels != r.labels {
        return Err(Error::invalid("label distributions are not aligned"));
    }
    Ok(cdf_distance(&h.mass, &r.mass))
}

pub(crate) fn cdf_distance(h: &[f64], r: &[f64]) -> f64 {
    let mut ch = 0.0;
    let mut cr = 0.0;
    let mut total = 0.0;
    for (a, b) in h.iter().zip(r).take(h.len().saturating_sub(1)) {
        ch += a;
        cr += b;
        total += (ch - cr).abs();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn dist(ls: &[&str], mass: &[f64]) -> LabelDistribution {
        LabelDistribution::from_mass(labels(ls), mass.to_vec()).unwrap()
    }

    #[test]
    fn distribution_examples() {
        let counts: BTreeMap<String, usize> = [("A".to_string(), 2), ("B".to_string(), 2)].into();
        let d = label_distribution(&labels(&["A", "B"]), &counts).unwrap();
        assert_eq!(d.mass(), &[0.5, 0.5, 0.0]);
        assert_eq!(d.labels().last().unwrap(), OTHER);

        let counts: BTreeMap<String, usize> = [("Z".to_string(), 4)].into();
        let d = label_distribution(&labels(&["A", "B"]), &counts).unwrap();
        assert_eq!(d.mass(), &[0.0, 0.0, 1.0]);

        let counts: BTreeMap<String, usize> = [("A".to_string(), 3), ("out".to_string(), 1)].into();
        let d = label_distribution(&labels(&["A"]), &counts).unwrap();
        assert_eq!(d.mass(), &[0.75, 0.25]);
    }

    #[test]
    fn all_zero_counts_are_rejected() {
        let counts: BTreeMap<String, usize> = [("A".to_string(), 0)].into();
        assert!(label_distribution(&labels(&["A"]), &counts).is_err());
        assert!(label_distribution(&labels(&["A"]), &BTreeMap::new()).is_err());
    }

    #[test]
    fn worked_distances() {
        let h = dist(&["A", "B"], &[0.2, 0.3, 0.5]);
        assert_eq!(ot_distance(&h, &h).unwrap(), 0.0);
        assert_eq!(ot_distance(&dist(&["A"], &[1.0, 0.0]), &dist(&["A"], &[0.0, 1.0])).unwrap(), 1.0);
        let d = ot_distance(&dist(&["A", "B"], &[0.5, 0.5, 0.0]), &dist(&["A", "B"], &[0.5, 0.0, 0.5])).unwrap();
        assert_eq!(d, 0.5);
    }

    #[test]
    fn misaligned_labels_are_rejected() {
        let h = dist(&["A", "B"], &[0.5, 0.5, 0.0]);
        let r = dist(&["B", "A"], &[0.5, 0.5, 0.0]);
        assert!(ot_distance(&h, &r).is_err());
        let r = dist(&["A"], &[1.0, 0.0]);
        assert!(ot_distance(&h, &r).is_err());
    }

    #[test]
    fn mass_must_be_a_distribution() {
        assert!(LabelDistribution::from_mass(labels(&["A"]), vec![0.5, 0.4]).is_err());
        assert!(LabelDistribution::from_mass(labels(&["A"]), vec![1.5, -0.5]).is_err());
        assert!(LabelDistribution::from_mass(labels(&["A"]), vec![1.0]).is_err());
        assert!(LabelDistribution::from_mass(labels(&["other"]), vec![1.0, 0.0]).is_err());
    }
}
