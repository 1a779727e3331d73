//! Probes on frozen features: cosine kNN with majority vote, and a softmax
//! linear classifier trained by full-batch gradient descent.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::FeatureSource;
use crate::tensor::{cosine, softmax_in_place};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProbeKind {
    Knn,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub accuracy: f64,
    /// `None` for classes absent from the test split.
    pub per_class: Vec<Option<f64>>,
    pub source: FeatureSource,
    pub layer: isize,
    pub train_count: usize,
    pub test_count: usize,
}

/// Features and labels of one split.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub features: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

fn check(train: Split<'_>, test: Split<'_>) -> Result<(usize, usize)> {
    if train.features.is_empty() || test.features.is_empty() {
        return Err(Error::Empty("probe split"));
    }
    for s in [train, test] {
        if s.features.len() != s.labels.len() {
            return Err(Error::Dimension {
                op: "probe",
                lhs: alloc::vec![s.features.len()],
                rhs: alloc::vec![s.labels.len()],
            });
        }
    }
    let dim = train.features[0].len();
    if let Some(f) = train.features.iter().chain(test.features).find(|f| f.len() != dim) {
        return Err(Error::Dimension {
            op: "probe",
            lhs: alloc::vec![dim],
            rhs: alloc::vec![f.len()],
        });
    }
    let classes = train.labels.iter().chain(test.labels).max().map_or(0, |m| m + 1);
    Ok((dim, classes))
}

fn report(kind: ProbeKind, predicted: &[usize], test: Split<'_>, classes: usize, train_count: usize) -> ProbeReport {
    let mut hit = alloc::vec![0usize; classes];
    let mut seen = alloc::vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(test.labels) {
        seen[t] += 1;
        hit[t] += (p == t) as usize;
    }
    ProbeReport {
        kind,
        accuracy: hit.iter().sum::<usize>() as f64 / test.labels.len() as f64,
        per_class: hit
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
        source: FeatureSource::Target,
        layer: -1,
        train_count,
        test_count: test.labels.len(),
    }
}

/// Majority vote among the `k` most cosine-similar training points. Equal
/// similarities rank the earlier training point first; tied votes go to the
/// smallest class id.
pub fn knn_probe(train: Split<'_>, test: Split<'_>, k: usize) -> Result<ProbeReport> {
    let (_, classes) = check(train, test)?;
    if k == 0 {
        return Err(Error::Config("k_nn must be at least 1".into()));
    }
    let k = k.min(train.features.len());
    let mut predicted = Vec::with_capacity(test.features.len());
    for q in test.features {
        let mut scored = train
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| Ok((cosine(q, f)?, i)))
            .collect::<Result<Vec<(f64, usize)>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = alloc::vec![0usize; classes];
        scored[..k].iter().for_each(|&(_, i)| votes[train.labels[i]] += 1);
        predicted.push((0..classes).fold(0, |best, c| if votes[c] > votes[best] { c } else { best }));
    }
    Ok(report(ProbeKind::Knn, &predicted, test, classes, train.features.len()))
}

/// Single linear layer with softmax cross-entropy. Features are
/// standardized with training-split statistics first.
pub fn linear_probe(train: Split<'_>, test: Split<'_>, epochs: usize, lr: f64) -> Result<ProbeReport> {
    let (dim, classes) = check(train, test)?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let n = train.features.len() as f64;
    let mut mean = alloc::vec![0.0; dim];
    let mut scale = alloc::vec![0.0; dim];
    for f in train.features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    for f in train.features {
        scale.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    scale.iter_mut().for_each(|s| *s = 1.0 / libm::sqrt(*s + 1e-8));
    let standardize = |f: &[f64]| -> Vec<f64> { f.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect() };
    let xs: Vec<Vec<f64>> = train.features.iter().map(|f| standardize(f)).collect();

    let mut w = alloc::vec![0.0; dim * classes];
    let mut b = alloc::vec![0.0; classes];
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + x.iter().enumerate().map(|(d, v)| v * w[d * classes + c]).sum::<f64>())
            .collect()
    };
    for _ in 0..epochs {
        let mut gw = alloc::vec![0.0; dim * classes];
        let mut gb = alloc::vec![0.0; classes];
        for (x, &y) in xs.iter().zip(train.labels) {
            let mut p = logits(&w, &b, x);
            softmax_in_place(&mut p)?;
            p[y] -= 1.0;
            for c in 0..classes {
                gb[c] += p[c] / n;
                for d in 0..dim {
                    gw[d * classes + c] += x[d] * p[c] / n;
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= lr * g);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= lr * g);
    }
    let predicted: Vec<usize> = test
        .features
        .iter()
        .map(|f| {
            let z = logits(&w, &b, &standardize(f));
            (0..classes).fold(0, |best, c| if z[c] > z[best] { c } else { best })
        })
        .collect();
    Ok(report(ProbeKind::Linear, &predicted, test, classes, train.features.len()))
}
