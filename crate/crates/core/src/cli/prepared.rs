//! The on-disk product of `prepare`: preprocessed `[0,1]` samples, the
//! split manifest, training-split channel statistics and patch locations.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Preprocess, RunConfig};
use crate::data::{
    crop_pad_square, extract_patches, ingest, read_samples, resize_bilinear, split_dataset, write_samples,
    ChannelStats, PatchRef, PatchSet, Sample, SplitManifest,
};
use crate::error::{Error, Result};

const SAMPLES_FILE: &str = "samples.bin";
const MANIFEST_FILE: &str = "manifest.txt";
const STATS_FILE: &str = "stats.txt";
const PATCHES_FILE: &str = "patches.csv";
const PATCHES_HEADER: &str = "split,source_id,row,col";

pub(crate) fn preprocess(s: &Sample, p: Preprocess) -> Result<Sample> {
    match p {
        Preprocess::Resize { height, width } => resize_bilinear(s, height, width),
        Preprocess::CropPad { side } => crop_pad_square(s, side),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    /// Every preprocessed sample, sorted by source id.
    pub samples: Vec<Sample>,
    pub manifest: SplitManifest,
    pub stats: ChannelStats,
    /// Training and validation patches over the training split images, in
    /// manifest order.
    pub patches: Option<(PatchSet, PatchSet)>,
}

impl PreparedData {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let mut raw = ingest(&cfg.data_dir)?;
        if raw.is_empty() {
            return Err(Error::data(format!("no image/mask pairs in {}", cfg.data_dir.display())));
        }
        if let Some(n) = cfg.limit {
            raw.truncate(n);
        }
        let samples = raw.iter().map(|s| preprocess(s, cfg.preprocess)).collect::<Result<Vec<_>>>()?;
        let c = samples[0].channels();
        if let Some(s) = samples.iter().find(|s| s.channels() != c) {
            return Err(Error::data(format!("{} has {} channels but {} has {c}", s.source_id, s.channels(), samples[0].source_id)));
        }
        // One generator per command; each stage takes its own derived seed.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (split_seed, patch_seed): (u64, u64) = (rng.random(), rng.random());
        let ids: Vec<String> = samples.iter().map(|s| s.source_id.clone()).collect();
        let manifest = split_dataset(&ids, cfg.split_ratios, split_seed)?;
        let mut data = Self {
            samples,
            manifest,
            stats: ChannelStats::identity(c),
            patches: None,
        };
        let train = data.split_samples("train");
        if train.is_empty() {
            return Err(Error::data("the training split is empty"));
        }
        data.stats = ChannelStats::compute(&train)?;
        if cfg.patched() {
            let all = extract_patches(&train, cfg.patch_size, cfg.patch_count, patch_seed)?;
            data.patches = Some(all.split_off(cfg.patch_val_fraction));
        }
        Ok(data)
    }

    pub fn channels(&self) -> usize {
        self.stats.channels()
    }

    /// Samples of one split, in manifest order.
    pub fn split_samples(&self, split: &str) -> Vec<Sample> {
        let by_id: HashMap<&str, &Sample> = self.samples.iter().map(|s| (s.source_id.as_str(), s)).collect();
        self.manifest
            .get(split)
            .unwrap_or_default()
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).map(|s| (*s).clone()))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_samples(&dir.join(SAMPLES_FILE), &self.samples)?;
        self.manifest.save(&dir.join(MANIFEST_FILE))?;
        std::fs::write(dir.join(STATS_FILE), format!("{}\n", self.stats))?;
        let path = dir.join(PATCHES_FILE);
        match &self.patches {
            Some((train, val)) => {
                let mut w = BufWriter::new(std::fs::File::create(&path)?);
                writeln!(w, "{PATCHES_HEADER}")?;
                writeln!(w, "# size={}", train.size)?;
                for (name, set) in [("train", train), ("val", val)] {
                    for p in &set.patches {
                        writeln!(w, "{name},{},{},{}", self.manifest.train[p.source], p.row, p.col)?;
                    }
                }
                w.flush()?;
            }
            None => {
                if path.exists() {
                    std::fs::remove_file(&path)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let samples_path = dir.join(SAMPLES_FILE);
        if !samples_path.exists() {
            return Err(Error::data(format!("{} holds no prepared data; run `mixseg prepare` first", dir.display())));
        }
        let samples = read_samples(&samples_path)?;
        let manifest = SplitManifest::load(&dir.join(MANIFEST_FILE))?;
        let stats: ChannelStats = std::fs::read_to_string(dir.join(STATS_FILE))?.trim().parse()?;
        let path = dir.join(PATCHES_FILE);
        let patches = if path.exists() {
            let index: HashMap<&str, usize> = manifest.train.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let mut size = 0;
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (n, line) in BufReader::new(std::fs::File::open(&path)?).lines().enumerate() {
                let line = line?;
                if n == 0 || line.is_empty() {
                    continue;
                }
                if let Some(s) = line.strip_prefix("# size=") {
                    size = s.parse().map_err(|_| Error::data(format!("{}: bad size line", path.display())))?;
                    continue;
                }
                let bad = || Error::data(format!("{} line {}: malformed patch {line:?}", path.display(), n + 1));
                let f: Vec<&str> = line.split(',').collect();
                let [split, id, row, col] = f[..] else { return Err(bad()) };
                let p = PatchRef {
                    source: *index.get(id).ok_or_else(bad)?,
                    row: row.parse().map_err(|_| bad())?,
                    col: col.parse().map_err(|_| bad())?,
                };
                match split {
                    "train" => train.push(p),
                    "val" => val.push(p),
                    _ => return Err(bad()),
                }
            }
            Some((PatchSet { size, patches: train }, PatchSet { size, patches: val }))
        } else {
            None
        };
        Ok(Self {
            samples,
            manifest,
            stats,
            patches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::Regime;
    use crate::data::synthetic::{blobs, write_pairs};

    fn config(dir: &Path, regime: Regime) -> RunConfig {
        let mut cfg = RunConfig::for_regime(regime);
        cfg.data_dir = dir.join("raw");
        cfg.output_dir = dir.join("out");
        cfg
    }

    #[test]
    fn skin_prepare_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        write_pairs(&tmp.path().join("raw"), &blobs(10, 20, 30, 0)).unwrap();
        let mut cfg = config(tmp.path(), Regime::Skin);
        cfg.preprocess = Preprocess::Resize { height: 16, width: 24 };
        let data = PreparedData::build(&cfg).unwrap();
        assert_eq!((data.manifest.train.len(), data.manifest.val.len(), data.manifest.test.len()), (7, 1, 2));
        assert!(data.samples.iter().all(|s| s.image.shape() == [16, 24, 1]));
        data.save(&cfg.cache_dir()).unwrap();
        let back = PreparedData::load(&cfg.cache_dir()).unwrap();
        assert_eq!(back, data);
        let manifest = std::fs::read(cfg.cache_dir().join(MANIFEST_FILE)).unwrap();
        PreparedData::build(&cfg).unwrap().save(&cfg.cache_dir()).unwrap();
        assert_eq!(std::fs::read(cfg.cache_dir().join(MANIFEST_FILE)).unwrap(), manifest);
    }

    #[test]
    fn patch_prepare_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        write_pairs(&tmp.path().join("raw"), &blobs(4, 30, 26, 1)).unwrap();
        let mut cfg = config(tmp.path(), Regime::Drive);
        cfg.preprocess = Preprocess::CropPad { side: 32 };
        cfg.patch_size = 16;
        cfg.patch_count = 50;
        let data = PreparedData::build(&cfg).unwrap();
        let (train, val) = data.patches.clone().unwrap();
        assert_eq!((train.len(), val.len()), (45, 5));
        assert_eq!(data.manifest.train.len(), 2);
        data.save(&cfg.cache_dir()).unwrap();
        assert_eq!(PreparedData::load(&cfg.cache_dir()).unwrap(), data);
    }

    #[test]
    fn missing_data_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("raw")).unwrap();
        let cfg = config(tmp.path(), Regime::Skin);
        assert_eq!(PreparedData::build(&cfg).unwrap_err().exit_code(), 2);
        assert_eq!(PreparedData::load(&cfg.cache_dir()).unwrap_err().exit_code(), 2);
    }
}
