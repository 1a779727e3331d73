//! Dataset access. Pre-training takes [`Unlabeled`], which has no way to
//! reach labels; only [`Labeled`] (probe splits) carries them.

use dmtj_core::synthetic::{generate_synthetic, SyntheticShapesSpec};
use dmtj_core::Tensor;

use crate::config::DataSource;
use crate::corpus::load_raw_corpus;
use crate::error::{IoError, IoResult};

/// Images only.
#[derive(Debug, Clone, Copy)]
pub struct Unlabeled<'a> {
    images: &'a [Tensor],
}

impl<'a> Unlabeled<'a> {
    pub fn new(images: &'a [Tensor]) -> Self {
        Self { images }
    }

    pub fn images(&self) -> &'a [Tensor] {
        self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Images with class ids, for probes.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Labeled {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>) -> IoResult<Self> {
        if images.len() != labels.len() {
            return Err(IoError::Format(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(IoError::Format("empty dataset: probes need at least one labeled image".into()));
        }
        Ok(Self { images, labels })
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled::new(&self.images)
    }
}

fn synthetic(spec: &SyntheticShapesSpec, offset: u64, count: usize) -> IoResult<Labeled> {
    let spec = SyntheticShapesSpec {
        seed: spec.seed.wrapping_add(offset),
        ..spec.clone()
    };
    let set = generate_synthetic(&spec, count)?;
    Labeled::new(set.images, set.labels)
}

/// Pre-training images for `source`.
pub fn train_images(source: &DataSource) -> IoResult<Vec<Tensor>> {
    match source {
        DataSource::Synthetic {
            spec, train_count, ..
        } => Ok(generate_synthetic(spec, *train_count)?.images),
        DataSource::Corpus { train, .. } => Ok(load_raw_corpus(train)?.images),
    }
}

/// `(probe train, probe test)` splits for `source`.
pub fn probe_splits(source: &DataSource) -> IoResult<(Labeled, Labeled)> {
    match source {
        DataSource::Synthetic {
            spec,
            probe_train_count,
            probe_test_count,
            ..
        } => Ok((
            synthetic(spec, 1, *probe_train_count)?,
            synthetic(spec, 2, *probe_test_count)?,
        )),
        DataSource::Corpus {
            probe_train,
            probe_test,
            ..
        } => {
            let load = |p: &Option<std::path::PathBuf>, which: &str| -> IoResult<Labeled> {
                let p = p
                    .as_ref()
                    .ok_or_else(|| IoError::Format(format!("no {which} manifest configured")))?;
                let c = load_raw_corpus(p)?;
                let labels = match c.labels {
                    Some(l) => l,
                    None if c.images.is_empty() => Vec::new(),
                    None => {
                        return Err(IoError::Format(format!("{}: probe data needs label files", p.display())))
                    }
                };
                Labeled::new(c.images, labels)
            };
            Ok((load(probe_train, "probe_train")?, load(probe_test, "probe_test")?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_corpus;

    #[test]
    fn empty_manifest_refuses_probe() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        std::fs::write(&m, "").unwrap();
        let src = DataSource::Corpus {
            train: m.clone(),
            probe_train: Some(m.clone()),
            probe_test: Some(m),
        };
        assert!(train_images(&src).unwrap().is_empty());
        assert!(probe_splits(&src).is_err());
    }

    #[test]
    fn unlabeled_probe_corpus_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&dir.path().join("a.dmtj"), &[Tensor::zeros(&[1, 2, 2])]).unwrap();
        let m = dir.path().join("m.txt");
        std::fs::write(&m, "a.dmtj 0 1\n").unwrap();
        let src = DataSource::Corpus {
            train: m.clone(),
            probe_train: Some(m.clone()),
            probe_test: Some(m),
        };
        assert_eq!(train_images(&src).unwrap().len(), 1);
        assert!(probe_splits(&src).is_err());
    }

    #[test]
    fn synthetic_splits_are_disjoint_streams() {
        let src = crate::config::RunConfig::tiny().data;
        let (a, b) = probe_splits(&src).unwrap();
        assert_eq!(a.images.len(), 300);
        assert_ne!(a.images[0], b.images[0]);
        assert_ne!(train_images(&src).unwrap()[0], a.images[0]);
    }
}
