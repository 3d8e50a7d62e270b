//! Dataset flags to [`LabeledDataset`].

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fiwkit::datasets::{load_cifar10, load_mnist, subset, LabeledDataset};

use crate::args::{DataArgs, TestDataArgs};
use crate::manifest::RunManifest;

enum Source {
    Mnist(PathBuf, PathBuf),
    Cifar(Vec<PathBuf>),
}

fn scan_dir(dir: &Path) -> Result<Source> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let named = |key: &str| {
        files
            .iter()
            .find(|p| {
                p.file_name()
                    .is_some_and(|n| n.to_string_lossy().contains(key))
            })
            .cloned()
    };
    if let (Some(i), Some(l)) = (named("images"), named("labels")) {
        return Ok(Source::Mnist(i, l));
    }
    let batches: Vec<PathBuf> = files
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .cloned()
        .collect();
    if batches.is_empty() {
        bail!(
            "{} holds neither *images*/*labels* IDX files nor *.bin CIFAR batches",
            dir.display()
        );
    }
    Ok(Source::Cifar(batches))
}

fn load(source: Source, manifest: &mut RunManifest) -> Result<LabeledDataset> {
    match source {
        Source::Mnist(i, l) => {
            manifest.hash_input(&i)?;
            manifest.hash_input(&l)?;
            Ok(load_mnist(&i, &l)?)
        }
        Source::Cifar(batches) => {
            let mut out: Option<LabeledDataset> = None;
            for b in batches {
                manifest.hash_input(&b)?;
                let ds = load_cifar10(&b)?;
                out = Some(match out {
                    Some(acc) => acc.concat(ds)?,
                    None => ds,
                });
            }
            Ok(out.expect("at least one batch"))
        }
    }
}

fn pick(
    images: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    cifar: &[PathBuf],
    dir: Option<&PathBuf>,
) -> Result<Option<Source>> {
    let given = [images.is_some(), !cifar.is_empty(), dir.is_some()]
        .iter()
        .filter(|b| **b)
        .count();
    if given > 1 {
        bail!("give one data source: IDX files, CIFAR batches, or a directory");
    }
    Ok(match (images, labels) {
        (Some(i), Some(l)) => Some(Source::Mnist(i.clone(), l.clone())),
        _ if !cifar.is_empty() => Some(Source::Cifar(cifar.to_vec())),
        _ => dir.map(|d| scan_dir(d)).transpose()?,
    })
}

fn finish(ds: LabeledDataset, n: Option<usize>, seed: u64) -> Result<LabeledDataset> {
    Ok(match n {
        Some(n) => subset(&ds, n, seed)?,
        None => ds,
    })
}

impl DataArgs {
    pub fn load(&self, seed: u64, manifest: &mut RunManifest) -> Result<Option<LabeledDataset>> {
        match pick(
            &self.data_images,
            &self.data_labels,
            &self.cifar_batch,
            self.data.as_ref(),
        )? {
            Some(src) => Ok(Some(finish(load(src, manifest)?, self.subset, seed)?)),
            None => Ok(None),
        }
    }
}

impl TestDataArgs {
    pub fn load(&self, seed: u64, manifest: &mut RunManifest) -> Result<Option<LabeledDataset>> {
        match pick(
            &self.test_images,
            &self.test_labels,
            &self.test_cifar_batch,
            None,
        )? {
            Some(src) => Ok(Some(finish(load(src, manifest)?, self.test_subset, seed)?)),
            None => Ok(None),
        }
    }
}
