//! Frozen-feature probes, always paired with a random-init baseline.

use dmtj_core::model::{FeatureSource, Model};
use dmtj_core::probe::{knn_probe, linear_probe, ProbeKind, ProbeReport, Split};
use dmtj_core::Rng;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::config::ProbeConfig;
use crate::data::Labeled;
use crate::error::IoResult;

/// Mean-pooled last-layer features, in input order.
pub fn pooled(model: &Model, images: &Labeled, source: FeatureSource, pool: &rayon::ThreadPool) -> IoResult<Vec<Vec<f64>>> {
    let out = pool.install(|| {
        images
            .images
            .par_iter()
            .map(|img| model.pooled_features(img, source))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(out)
}

pub fn probe(
    model: &Model,
    train: &Labeled,
    test: &Labeled,
    cfg: &ProbeConfig,
    kind: ProbeKind,
    pool: &rayon::ThreadPool,
) -> IoResult<ProbeReport> {
    let a = pooled(model, train, cfg.source, pool)?;
    let b = pooled(model, test, cfg.source, pool)?;
    let tr = Split {
        features: &a,
        labels: &train.labels,
    };
    let te = Split {
        features: &b,
        labels: &test.labels,
    };
    let mut r = match kind {
        ProbeKind::Knn => knn_probe(tr, te, cfg.k_nn)?,
        ProbeKind::Linear => linear_probe(tr, te, cfg.linear_epochs, cfg.linear_lr)?,
    };
    r.source = cfg.source;
    Ok(r)
}

/// A freshly initialized model from the same config and seed.
pub fn baseline_model(model: &Model, seed: u64) -> IoResult<Model> {
    Ok(Model::new(&model.config, &mut Rng::seed_from_u64(seed))?)
}

/// The trained report and its random-init baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub trained: ProbeReport,
    pub baseline: ProbeReport,
}

impl ProbeOutcome {
    /// `key=value` lines.
    pub fn render(&self) -> String {
        let kind = match self.trained.kind {
            ProbeKind::Knn => "knn",
            ProbeKind::Linear => "linear",
        };
        let source = match self.trained.source {
            FeatureSource::Context => "context",
            FeatureSource::Target => "target",
        };
        let per_class = |r: &ProbeReport| {
            r.per_class
                .iter()
                .map(|a| a.map_or("na".to_string(), |v| format!("{v:.6}")))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "kind={kind}\nsource={source}\nlayer={}\ntrain_count={}\ntest_count={}\naccuracy={:.6}\nper_class={}\nbaseline_accuracy={:.6}\nbaseline_per_class={}\n",
            self.trained.layer,
            self.trained.train_count,
            self.trained.test_count,
            self.trained.accuracy,
            per_class(&self.trained),
            self.baseline.accuracy,
            per_class(&self.baseline),
        )
    }
}

pub fn probe_with_baseline(
    model: &Model,
    seed: u64,
    train: &Labeled,
    test: &Labeled,
    cfg: &ProbeConfig,
    kind: ProbeKind,
    pool: &rayon::ThreadPool,
) -> IoResult<ProbeOutcome> {
    Ok(ProbeOutcome {
        trained: probe(model, train, test, cfg, kind, pool)?,
        baseline: probe(&baseline_model(model, seed)?, train, test, cfg, kind, pool)?,
    })
}
