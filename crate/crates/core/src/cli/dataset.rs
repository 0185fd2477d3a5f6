//! On-disk dataset layout written by `synth` and read by the other
//! commands: `volumes/<id>.nii.gz`, `masks/<id>.nii.gz` and `dataset.json`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_mask, read_volume};
use crate::phantoms::{generate, split_holdout, Cohort, PhantomSpec};
use crate::sampling::Subject;
use crate::volumes::{normalize_minmax, to_canonical};

pub const DATASET_FILE: &str = "dataset.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Which items of a dataset a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

impl Subset {
    fn contains(self, tag: SplitTag) -> bool {
        match self {
            Subset::All => true,
            Subset::Train => tag == SplitTag::Train,
            Subset::Val => tag == SplitTag::Val,
            Subset::Test => tag == SplitTag::Test,
        }
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            "all" => Ok(Subset::All),
            other => Err(Error::InvalidArgument(format!("unknown subset '{other}' (train, val, test, all)"))),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
            Subset::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub cohort: Cohort,
    /// Relative to the dataset directory.
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub split: SplitTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub shape: [usize; 3],
    pub noise_sigma: f64,
    pub split_fractions: [f64; 3],
    pub items: Vec<DatasetItem>,
}

/// A dataset manifest and the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthOptions {
    pub count: usize,
    pub seed: u64,
    pub cohorts: Vec<Cohort>,
    pub shape: [usize; 3],
    pub noise_sigma: f64,
    pub split: [f64; 3],
}

/// Spreads `count` over the cohorts; earlier cohorts get the remainder.
fn per_cohort(count: usize, cohorts: usize) -> Vec<usize> {
    (0..cohorts).map(|i| count / cohorts + usize::from(i < count % cohorts)).collect()
}

impl Dataset {
    /// Generates phantoms and writes them with their manifest into `root`.
    /// Returns the dataset and every file written.
    pub fn synthesize(root: &Path, options: &SynthOptions) -> Result<(Dataset, Vec<PathBuf>)> {
        if options.cohorts.is_empty() {
            return Err(Error::InvalidArgument("at least one cohort is required".into()));
        }
        if options.count == 0 {
            return Err(Error::InvalidArgument("count must be positive".into()));
        }
        let mut phantoms = Vec::with_capacity(options.count);
        for (&cohort, n) in options.cohorts.iter().zip(per_cohort(options.count, options.cohorts.len())) {
            let spec = PhantomSpec { seed: options.seed, shape: options.shape, cohort, noise_sigma: options.noise_sigma, count: n };
            phantoms.extend(generate(&spec)?);
        }
        let [ft, fv, fs] = options.split;
        let split = split_holdout(phantoms.len(), |i| phantoms[i].cohort, (ft, fv, fs), options.seed)?;
        let mut tags = vec![SplitTag::Train; phantoms.len()];
        for &i in &split.val {
            tags[i] = SplitTag::Val;
        }
        for &i in &split.test {
            tags[i] = SplitTag::Test;
        }

        let mut written = Vec::new();
        let mut items = Vec::with_capacity(phantoms.len());
        for (p, split) in phantoms.iter().zip(tags) {
            let volume = PathBuf::from("volumes").join(format!("{}.nii.gz", p.id));
            let mask = PathBuf::from("masks").join(format!("{}.nii.gz", p.id));
            let header = crate::io::header_for(&p.volume);
            crate::io::write_volume(&root.join(&volume), &p.volume, Some(&header))?;
            crate::io::write_mask(&root.join(&mask), &p.mask, &header)?;
            written.push(root.join(&volume));
            written.push(root.join(&mask));
            items.push(DatasetItem { id: p.id.clone(), cohort: p.cohort, volume, mask, split });
        }
        let manifest = DatasetManifest {
            version: DATASET_VERSION,
            seed: options.seed,
            shape: options.shape,
            noise_sigma: options.noise_sigma,
            split_fractions: options.split,
            items,
        };
        let path = root.join(DATASET_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok((Dataset { root: root.to_path_buf(), manifest }, written))
    }

    /// Opens a dataset from its directory or its manifest file.
    pub fn open(path: &Path) -> Result<Dataset> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(DATASET_FILE))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported dataset version {}",
                file.display(),
                manifest.version
            )));
        }
        Ok(Dataset { root, manifest })
    }

    pub fn items(&self, subset: Subset) -> Vec<&DatasetItem> {
        self.manifest.items.iter().filter(|i| subset.contains(i.split)).collect()
    }

    /// Loads, canonicalizes and normalizes the items of `subset`.
    pub fn load(&self, subset: Subset) -> Result<Vec<Subject>> {
        self.items(subset).into_iter().map(|item| self.load_item(item)).collect()
    }

    pub fn load_item(&self, item: &DatasetItem) -> Result<Subject> {
        let volume = read_volume(&self.root.join(&item.volume))?.volume;
        let mask = read_mask(&self.root.join(&item.mask))?;
        let (volume, mask, _) = to_canonical(&volume, Some(&mask))?;
        let volume = normalize_minmax(&volume);
        let mut subject = Subject::new(item.id.clone(), volume, mask.expect("mask was passed"))?;
        subject.cohort = Some(item.cohort);
        Ok(subject)
    }
}
