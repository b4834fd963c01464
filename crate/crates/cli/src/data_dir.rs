use std::path::{Path, PathBuf};

use dmoe_core::checkpoint::{load_dataset, save_dataset};
use dmoe_core::data::{jitter_dataset, load_mnist, synth_monophone, JitterMode, JitterSpec, LabeledDataset};
use dmoe_core::train::{PerEpochJitter, TrainingData};
use dmoe_core::{Error, Result, Rng};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{read_text, sha256_file, write_text};

pub const META: &str = "meta.json";
pub const TRAIN: &str = "train.ds";
pub const TRAIN_SOURCE: &str = "train_source.ds";
pub const TEST: &str = "test.ds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum JitterPolicy {
    /// One translation per training image, drawn once.
    Fixed,
    /// Fresh translations for every training epoch.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMeta {
    pub source: String,
    pub seed: u64,
    /// Training jitter; absent for data that is not jittered.
    pub jitter: Option<JitterPolicy>,
    pub max_offset: i32,
    pub train_examples: usize,
    pub test_examples: usize,
    pub dim: usize,
    pub classes: usize,
    /// File name to SHA-256.
    pub files: std::collections::BTreeMap<String, String>,
}

/// Seed for the test-set translations, derived from the data seed.
pub fn test_jitter_seed(seed: u64) -> u64 {
    Rng::substream(seed, &[1]).next_u64()
}

fn finish(out: &Path, mut meta: DataMeta, sets: &[(&str, &LabeledDataset)]) -> Result<DataMeta> {
    for (name, ds) in sets {
        let path = out.join(name);
        save_dataset(ds, json!({ "source": meta.source, "seed": meta.seed }), &path)?;
        meta.files.insert(name.to_string(), sha256_file(&path)?);
    }
    write_text(&out.join(META), &(serde_json::to_string_pretty(&meta).expect("meta") + "\n"))?;
    Ok(meta)
}

/// Jitters MNIST into `out`: `train.ds` and `test.ds` with one fixed
/// translation per image, plus the untranslated `train_source.ds` when the
/// training set is re-jittered every epoch.
pub fn prepare_mnist(mnist_dir: &Path, seed: u64, policy: JitterPolicy, out: &Path) -> Result<DataMeta> {
    let train = load_mnist(mnist_dir, true)?;
    let test = load_mnist(mnist_dir, false)?;
    let spec = JitterSpec::mnist(seed);
    let train_j = jitter_dataset(&train, &spec, JitterMode::FixedOnce)?;
    let test_j = jitter_dataset(&test, &JitterSpec::mnist(test_jitter_seed(seed)), JitterMode::FixedOnce)?;
    let meta = DataMeta {
        source: "mnist".into(),
        seed,
        jitter: Some(policy),
        max_offset: spec.max_offset,
        train_examples: train.len(),
        test_examples: test.len(),
        dim: train_j.dim(),
        classes: train.classes,
        files: Default::default(),
    };
    let mut sets = vec![(TRAIN, &train_j), (TEST, &test_j)];
    if policy == JitterPolicy::PerEpoch {
        sets.push((TRAIN_SOURCE, &train));
    }
    finish(out, meta, &sets)
}

pub fn prepare_speech(train_n: usize, test_n: usize, seed: u64, out: &Path) -> Result<DataMeta> {
    if train_n == 0 || test_n == 0 {
        return Err(Error::Config("speech splits need at least one example each".into()));
    }
    let all = synth_monophone(train_n + test_n, seed)?;
    let train = all.head(train_n);
    let test = all.subset(&(train_n..train_n + test_n).collect::<Vec<_>>());
    let meta = DataMeta {
        source: "synthetic-speech".into(),
        seed,
        jitter: None,
        max_offset: 0,
        train_examples: train.len(),
        test_examples: test.len(),
        dim: train.dim(),
        classes: train.classes,
        files: Default::default(),
    };
    finish(out, meta, &[(TRAIN, &train), (TEST, &test)])
}

/// A prepared data directory, loaded.
pub struct DataDir {
    pub path: PathBuf,
    pub meta: DataMeta,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    source: Option<LabeledDataset>,
}

impl DataDir {
    pub fn open(path: &Path) -> Result<DataDir> {
        let meta: DataMeta = serde_json::from_str(&read_text(&path.join(META))?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.join(META).display())))?;
        for (name, sum) in &meta.files {
            let actual = sha256_file(&path.join(name))?;
            if &actual != sum {
                return Err(Error::Data(format!("{name} checksum {actual} does not match {sum}")));
            }
        }
        let source = match meta.jitter {
            Some(JitterPolicy::PerEpoch) => Some(load_dataset(path.join(TRAIN_SOURCE))?),
            _ => None,
        };
        Ok(DataDir {
            path: path.to_path_buf(),
            train: load_dataset(path.join(TRAIN))?,
            test: load_dataset(path.join(TEST))?,
            meta,
            source,
        })
    }

    /// Training examples per epoch; per-epoch jitter draws from `data_seed`.
    pub fn training(&self, data_seed: u64) -> Box<dyn TrainingData + '_> {
        match &self.source {
            Some(source) => Box::new(PerEpochJitter {
                source,
                spec: JitterSpec::mnist(data_seed),
            }),
            None => Box::new(&self.train),
        }
    }

    pub fn split(&self, name: Split) -> &LabeledDataset {
        match name {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}
