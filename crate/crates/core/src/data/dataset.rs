use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{generate_sample, read_sample, write_sample, DomainConfig, Sample};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub source_train: usize,
    pub source_val: usize,
    pub source_test: usize,
    pub target_val: usize,
    pub target_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            source_train: 200,
            source_val: 50,
            source_test: 50,
            target_val: 50,
            target_test: 50,
        }
    }
}

/// Input of `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub version: u32,
    pub image_size: usize,
    pub slices_per_volume: usize,
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub sizes: SplitSizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            version: 1,
            image_size: 64,
            slices_per_volume: 10,
            source: DomainConfig::source(),
            target: DomainConfig::target(),
            sizes: SplitSizes::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Validation(format!("data config version {} unsupported", self.version)));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::Validation("slices_per_volume must be ≥ 1".into()));
        }
        let s = &self.sizes;
        for (name, n) in [
            ("source_train", s.source_train),
            ("source_val", s.source_val),
            ("source_test", s.source_test),
            ("target_val", s.target_val),
            ("target_test", s.target_test),
        ] {
            if n == 0 {
                return Err(Error::Validation(format!("split size {name} must be ≥ 1")));
            }
        }
        if self.source.name == self.target.name {
            return Err(Error::Validation("source and target domains need distinct names".into()));
        }
        self.source.validate(self.image_size)?;
        self.target.validate(self.image_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub volume_id: u32,
    /// Paths relative to the dataset root, in slice order.
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub count: usize,
    pub volumes: Vec<VolumeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub config: DomainConfig,
    /// `"source"` or `"target"`.
    pub role: String,
    pub splits: BTreeMap<String, SplitEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    pub slices_per_volume: usize,
    pub domains: Vec<DomainEntry>,
}

impl DatasetManifest {
    pub fn domain(&self, name: &str) -> Result<&DomainEntry> {
        self.domains.iter().find(|d| d.config.name == name).ok_or_else(|| {
            Error::Validation(format!(
                "domain `{name}` not in manifest (have: {})",
                self.domains.iter().map(|d| d.config.name.as_str()).collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn domain_by_role(&self, role: &str) -> Result<&DomainEntry> {
        self.domains
            .iter()
            .find(|d| d.role == role)
            .ok_or_else(|| Error::Validation(format!("manifest has no {role} domain")))
    }

    /// Structural checks: counts agree with file lists, no file listed twice.
    pub fn check(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!("manifest version {} unsupported", self.version)));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.domains {
            for (split, e) in &d.splits {
                let n: usize = e.volumes.iter().map(|v| v.files.len()).sum();
                if n != e.count {
                    return Err(Error::Integrity(format!(
                        "{}/{split}: count {} but {n} files listed",
                        d.config.name, e.count
                    )));
                }
                for f in e.volumes.iter().flat_map(|v| &v.files) {
                    if !seen.insert(f.clone()) {
                        return Err(Error::Integrity(format!("file {f} listed twice")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.check()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Samples of one split in volume then slice order.
    pub fn load(&self, domain: &str, split: &str) -> Result<Vec<Sample>> {
        let d = self.manifest.domain(domain)?;
        let e = d.splits.get(split).ok_or_else(|| {
            Error::Validation(format!("domain `{domain}` has no `{split}` split"))
        })?;
        let mut out = Vec::with_capacity(e.count);
        for v in &e.volumes {
            for f in &v.files {
                let s = read_sample(&self.root.join(f), domain)?;
                if s.volume_id != v.volume_id {
                    return Err(Error::Integrity(format!(
                        "{f}: volume_id {} but manifest says {}",
                        s.volume_id, v.volume_id
                    )));
                }
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn load_role(&self, role: &str, split: &str) -> Result<Vec<Sample>> {
        let name = self.manifest.domain_by_role(role)?.config.name.clone();
        self.load(&name, split)
    }
}

/// Volume ids for consecutive splits, each volume holding up to
/// `per_volume` slices.
fn plan_split(first_volume: u32, count: usize, per_volume: usize) -> Vec<(u32, usize)> {
    let mut out = Vec::new();
    let mut left = count;
    let mut v = first_volume;
    while left > 0 {
        let n = left.min(per_volume);
        out.push((v, n));
        left -= n;
        v += 1;
    }
    out
}

/// Renders every split and writes samples plus `manifest.json` under `out`.
///
/// Source volumes are numbered train, then val, then test. The target domain
/// reuses the source val/test volume ids, so its samples are paired with the
/// source ones (same masks, different rendering); it has no train split.
pub fn generate_dataset(cfg: &DataConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let spv = cfg.slices_per_volume;
    let sz = &cfg.sizes;
    let train = plan_split(0, sz.source_train, spv);
    let val_start = train.len() as u32;
    let val = plan_split(val_start, sz.source_val, spv);
    let test_start = val_start + val.len() as u32;
    let test = plan_split(test_start, sz.source_test, spv);
    let tval = plan_split(val_start, sz.target_val, spv);
    let ttest = plan_split(test_start, sz.target_test, spv);

    let source_splits = [("train", train), ("val", val), ("test", test)];
    let target_splits = [("val", tval), ("test", ttest)];
    let mut domains = Vec::new();
    for (dom, role, splits) in [
        (&cfg.source, "source", &source_splits[..]),
        (&cfg.target, "target", &target_splits[..]),
    ] {
        let mut entry = DomainEntry {
            config: dom.clone(),
            role: role.into(),
            splits: BTreeMap::new(),
        };
        for (split, plan) in splits {
            let dir = out.join(&dom.name).join(split);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut volumes = Vec::new();
            for &(vid, n) in plan {
                let mut files = Vec::with_capacity(n);
                for s in 0..n as u32 {
                    let sample = generate_sample(dom, cfg.image_size, vid as u64, s)?;
                    let rel = format!("{}/{split}/v{vid:04}_s{s:03}.sdim", dom.name);
                    write_sample(&out.join(&rel), &sample)?;
                    files.push(rel);
                }
                volumes.push(VolumeEntry { volume_id: vid, files });
            }
            let count = volumes.iter().map(|v| v.files.len()).sum();
            entry.splits.insert(split.to_string(), SplitEntry { count, volumes });
        }
        domains.push(entry);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        image_size: cfg.image_size,
        slices_per_volume: spv,
        domains,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
