use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Partition of source ids; patches inherit the split of their source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    fn lists(&self) -> [&Vec<String>; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// `split,source_id` lines after a `# seed=N` comment.
    pub fn to_text(&self) -> String {
        let mut out = format!("# seed={}\n", self.seed);
        for (name, list) in SPLIT_NAMES.iter().zip(self.lists()) {
            for id in list {
                out.push_str(&format!("{name},{id}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = SplitManifest::default();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(seed) = line.strip_prefix("# seed=") {
                m.seed = seed
                    .parse()
                    .map_err(|_| Error::data(format!("manifest line {}: bad seed", n + 1)))?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (split, id) = line
                .split_once(',')
                .ok_or_else(|| Error::data(format!("manifest line {}: expected split,source_id", n + 1)))?;
            if !seen.insert(id.to_string()) {
                return Err(Error::data(format!("manifest lists {id:?} twice")));
            }
            match split {
                "train" => m.train.push(id.into()),
                "val" => m.val.push(id.into()),
                "test" => m.test.push(id.into()),
                other => {
                    return Err(Error::data(format!("manifest line {}: unknown split {other:?}", n + 1)))
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Shuffles `ids` under `seed` and cuts it into train/val/test. Validation
/// gets `floor(n·r_val)` and test takes what is left after a train split of
/// `floor(n·r_train)`, raised to one when that would leave training empty.
pub fn split_dataset(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::data("source ids must be unique"));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sorted.len();
    let mut n_train = (n as f64 * ratios[0]).floor() as usize;
    if n_train == 0 && n > 0 && ratios[0] > 0.0 {
        n_train = 1;
    }
    let n_val = ((n as f64 * ratios[1]).floor() as usize).min(n - n_train);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(SplitManifest {
        seed,
        train: sorted,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ISIC_{i:07}")).collect()
    }

    #[test]
    fn skin_split_counts() {
        let m = split_dataset(&ids(2594), [0.7, 0.1, 0.2], 0).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (1815, 259, 520));
    }

    #[test]
    fn single_id_goes_to_train() {
        let m = split_dataset(&ids(1), [0.7, 0.1, 0.2], 5).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (1, 0, 0));
    }

    #[test]
    fn rejects_bad_ratios() {
        assert!(matches!(split_dataset(&ids(3), [0.7, 0.1, 0.1], 0), Err(Error::Config(_))));
        assert!(split_dataset(&ids(3), [1.2, -0.2, 0.0], 0).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = split_dataset(&ids(17), [0.5, 0.25, 0.25], 9).unwrap();
        let text = m.to_text();
        assert!(text.lines().nth(1).unwrap().starts_with("train,ISIC_"));
        assert_eq!(SplitManifest::parse(&text).unwrap(), m);
        assert!(SplitManifest::parse("val,a\ntrain,a\n").is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_deterministically(n in 0usize..300, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let r_train = a;
            let r_val = (1.0 - a) * b;
            let ratios = [r_train, r_val, 1.0 - r_train - r_val];
            let all = ids(n);
            let m = split_dataset(&all, ratios, seed).unwrap();
            prop_assert_eq!(&m, &split_dataset(&all, ratios, seed).unwrap());
            let mut union: Vec<String> = m.train.iter().chain(&m.val).chain(&m.test).cloned().collect();
            prop_assert_eq!(union.len(), n);
            union.sort();
            union.dedup();
            prop_assert_eq!(union, all);
        }
    }
}
