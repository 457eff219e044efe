use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let mut m = Self::new(classes);
        m.add_all(predictions, labels)?;
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add_all(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::param(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let c = self.classes();
        if let Some(bad) = predictions.iter().chain(labels).find(|&&x| x >= c) {
            return Err(Error::param(format!(
                "class {bad} out of range for {c} classes"
            )));
        }
        for (&p, &l) in predictions.iter().zip(labels) {
            self.counts[l][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::param("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        ratio(correct, self.total())
    }

    /// Each row divided by its sum; the diagonal is per-class recall.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&x| ratio(x, s)).collect()
            })
            .collect()
    }

    /// Each column divided by its sum; the diagonal is per-class precision.
    pub fn column_normalized(&self) -> Vec<Vec<f64>> {
        let c = self.classes();
        let sums: Vec<u64> = (0..c)
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect();
        self.counts
            .iter()
            .map(|row| row.iter().zip(&sums).map(|(&x, &s)| ratio(x, s)).collect())
            .collect()
    }

    pub fn recall(&self) -> Vec<f64> {
        let r = self.row_normalized();
        (0..self.classes()).map(|i| r[i][i]).collect()
    }

    pub fn precision(&self) -> Vec<f64> {
        let r = self.column_normalized();
        (0..self.classes()).map(|i| r[i][i]).collect()
    }
}

/// Zero for an empty denominator.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mean IoU over `parts` for one object. A part absent from both the
/// prediction and the ground truth counts as IoU 1.
pub fn instance_miou(predictions: &[u32], labels: &[u32], parts: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::param("prediction and label counts differ"));
    }
    if parts.is_empty() {
        return Err(Error::param("object category has no parts"));
    }
    let total: f64 = parts
        .iter()
        .map(|&part| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&p, &l) in predictions.iter().zip(labels) {
                let (a, b) = (p == part, l == part);
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / parts.len() as f64)
}

/// Instance and category averaged part IoU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartIou {
    /// Mean over instances.
    pub miou_i: f64,
    /// Mean over categories of the per-category instance mean.
    pub miou_c: f64,
}

/// `instances` holds `(category, instance mIoU)` pairs.
pub fn aggregate_part_iou(instances: &[(usize, f64)]) -> Result<PartIou> {
    if instances.is_empty() {
        return Err(Error::param("no instances to average"));
    }
    let miou_i = instances.iter().map(|&(_, v)| v).sum::<f64>() / instances.len() as f64;
    let cats = instances.iter().map(|&(c, _)| c + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); cats];
    for &(c, v) in instances {
        sums[c].0 += v;
        sums[c].1 += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .filter(|s| s.1 > 0)
        .map(|&(s, n)| s / n as f64)
        .collect();
    Ok(PartIou {
        miou_i,
        miou_c: means.iter().sum::<f64>() / means.len() as f64,
    })
}
