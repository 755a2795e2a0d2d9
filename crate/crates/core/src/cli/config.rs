//! Flat `key = value` run configuration with `[section]` headers.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{parse_bool, ArchitectureSpec};
use crate::error::{Error, Result};
use crate::metrics::{Averaging, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Whole dermoscopy images resized to 192×256.
    Skin,
    /// Retina images cropped/padded to 576×576 and cut into 48×48 patches.
    Drive,
    /// Retina images cropped/padded to 960×960 and cut into 48×48 patches.
    Chase,
}

impl Regime {
    pub fn key(self) -> &'static str {
        match self {
            Regime::Skin => "skin",
            Regime::Drive => "drive",
            Regime::Chase => "chase",
        }
    }

    pub fn dataset_name(self) -> &'static str {
        match self {
            Regime::Skin => "Skin",
            Regime::Drive => "DRIVE",
            Regime::Chase => "CHASE_DB1",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "skin" | "isic" => Ok(Regime::Skin),
            "drive" => Ok(Regime::Drive),
            "chase" | "chase_db1" => Ok(Regime::Chase),
            other => Err(Error::config(format!("unknown regime {other:?}; expected skin, drive or chase"))),
        }
    }
}

/// How raw images are brought to a common size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preprocess {
    Resize { height: usize, width: usize },
    CropPad { side: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub regime: Regime,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Preprocessed data; defaults to `<output_dir>/prepared`.
    pub cache_dir: Option<PathBuf>,

    pub arch: ArchitectureSpec,
    /// Taken from the prepared data when unset.
    pub in_channels: Option<usize>,

    pub preprocess: Preprocess,
    pub split_ratios: [f64; 3],
    /// Patch side; 0 trains on whole images.
    pub patch_size: usize,
    pub patch_count: usize,
    pub patch_val_fraction: f64,
    /// Caps the number of ingested pairs and of training/validation items.
    pub limit: Option<usize>,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub augment: bool,
    pub resume: bool,

    pub threshold: f64,
    pub averaging: Averaging,
    pub eval_stride: usize,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
}

/// Every key with its section, in the order a dumped config lists them.
pub const KEYS: [(&str, &str); 30] = [
    ("run", "regime"),
    ("run", "seed"),
    ("run", "data_dir"),
    ("run", "output_dir"),
    ("run", "cache_dir"),
    ("arch", "variant"),
    ("arch", "mix"),
    ("arch", "depth"),
    ("arch", "base_width"),
    ("arch", "in_channels"),
    ("arch", "out_channels"),
    ("arch", "kernel_sizes"),
    ("arch", "recurrence_steps"),
    ("arch", "per_branch_norm"),
    ("data", "preprocess"),
    ("data", "split"),
    ("data", "patch_size"),
    ("data", "patch_count"),
    ("data", "patch_val_fraction"),
    ("data", "limit"),
    ("train", "epochs"),
    ("train", "batch_size"),
    ("train", "lr"),
    ("train", "augment"),
    ("train", "resume"),
    ("eval", "threshold"),
    ("eval", "averaging"),
    ("eval", "stride"),
    ("eval", "checkpoint"),
    ("eval", "input"),
];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

impl RunConfig {
    pub fn for_regime(regime: Regime) -> Self {
        let (preprocess, patch_size, patch_count, batch_size, split_ratios) = match regime {
            Regime::Skin => (Preprocess::Resize { height: 192, width: 256 }, 0, 0, 4, [0.7, 0.1, 0.2]),
            Regime::Drive => (Preprocess::CropPad { side: 576 }, 48, 531_265, 32, [0.5, 0.0, 0.5]),
            Regime::Chase => (Preprocess::CropPad { side: 960 }, 48, 412_400, 32, [0.72, 0.0, 0.28]),
        };
        Self {
            regime,
            seed: 0,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            cache_dir: None,
            arch: ArchitectureSpec::default(),
            in_channels: None,
            preprocess,
            split_ratios,
            patch_size,
            patch_count,
            patch_val_fraction: 0.1,
            limit: None,
            epochs: 50,
            batch_size,
            lr: 0.001,
            augment: true,
            resume: false,
            threshold: DEFAULT_THRESHOLD,
            averaging: Averaging::Micro,
            eval_stride: 24,
            checkpoint: None,
            input: None,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("prepared"))
    }

    pub fn patched(&self) -> bool {
        self.patch_size > 0
    }

    /// Parses `text` then applies `overrides` on top. The regime is resolved
    /// first because it sets the defaults every other key refines.
    pub fn from_sources(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_config_text(text)?;
        for (k, v) in overrides {
            let key = k.replace('-', "_");
            if section_of(&key).is_none() {
                return Err(Error::config(format!("unknown option --{k}")));
            }
            pairs.push((key, v.clone()));
        }
        let regime = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "regime")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Regime::Skin);
        let mut cfg = Self::for_regime(regime);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_sources(&text, overrides)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::config(format!("{key}: cannot parse {v:?} as {what}"));
        let int = || v.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let real = || v.parse::<f64>().map_err(|_| bad("a number"));
        let boolean = || parse_bool(v).ok_or_else(|| bad("a boolean"));
        let optional_path = || (!v.is_empty() && v != "none").then(|| PathBuf::from(v));
        match key {
            "regime" => self.regime = v.parse()?,
            "seed" => self.seed = v.parse().map_err(|_| bad("a non-negative integer"))?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "cache_dir" => self.cache_dir = optional_path(),
            "in_channels" => self.in_channels = if v == "auto" { None } else { Some(int()?) },
            "preprocess" => self.preprocess = parse_preprocess(v).ok_or_else(|| bad("resize:HxW or crop_pad:SIDE"))?,
            "split" => {
                let parts: Vec<f64> = v.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("three comma-separated ratios"))?;
                self.split_ratios = parts.try_into().map_err(|_| bad("three comma-separated ratios"))?;
            }
            "patch_size" => self.patch_size = int()?,
            "patch_count" => self.patch_count = int()?,
            "patch_val_fraction" => self.patch_val_fraction = real()?,
            "limit" => self.limit = if v == "none" || v == "0" { None } else { Some(int()?) },
            "epochs" => self.epochs = int()?,
            "batch_size" => self.batch_size = int()?,
            "lr" => self.lr = real()?,
            "augment" => self.augment = boolean()?,
            "resume" => self.resume = boolean()?,
            "threshold" => self.threshold = real()?,
            "averaging" => self.averaging = v.parse()?,
            "stride" => self.eval_stride = int()?,
            "checkpoint" => self.checkpoint = optional_path(),
            "input" => self.input = optional_path(),
            _ => {
                if !self.arch.set(key, v)? {
                    return Err(Error::config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios {:?} must sum to 1", self.split_ratios)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} is outside [0,1]", self.threshold)));
        }
        if !(0.0..1.0).contains(&self.patch_val_fraction) {
            return Err(Error::config("patch_val_fraction must be in [0,1)"));
        }
        if self.patched() && self.eval_stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        let mut arch = self.arch.clone();
        arch.in_channels = self.in_channels.unwrap_or(arch.in_channels);
        arch.validate()
    }

    /// The architecture with the input channel count resolved.
    pub fn arch_for(&self, data_channels: usize) -> Result<ArchitectureSpec> {
        let mut arch = self.arch.clone();
        arch.in_channels = self.in_channels.unwrap_or(data_channels);
        if arch.in_channels != data_channels {
            return Err(Error::config(format!(
                "in_channels is {} but the prepared images have {data_channels} channels",
                arch.in_channels
            )));
        }
        arch.validate()?;
        Ok(arch)
    }
}

fn parse_preprocess(v: &str) -> Option<Preprocess> {
    let (kind, arg) = v.split_once(':')?;
    match kind {
        "resize" => {
            let (h, w) = arg.split_once(['x', '×'])?;
            Some(Preprocess::Resize {
                height: h.trim().parse().ok().filter(|&n| n > 0)?,
                width: w.trim().parse().ok().filter(|&n| n > 0)?,
            })
        }
        "crop_pad" => Some(Preprocess::CropPad {
            side: arg.trim().parse().ok().filter(|&n| n > 0)?,
        }),
        _ => None,
    }
}

/// `(key, value)` pairs in file order. Keys must exist and sit in their own
/// section, or before any section header.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(Error::config(format!("line {}: unknown section [{name}]", n + 1)));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
        let key = k.trim().to_string();
        let Some(home) = section_of(&key) else {
            return Err(Error::config(format!("line {}: unknown key {key:?}", n + 1)));
        };
        if let Some(s) = &section {
            if s != home {
                return Err(Error::config(format!(
                    "line {}: {key} belongs in [{home}], not [{s}]",
                    n + 1
                )));
            }
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    #[test]
    fn regime_defaults() {
        let skin = RunConfig::for_regime(Regime::Skin);
        assert_eq!(skin.preprocess, Preprocess::Resize { height: 192, width: 256 });
        assert_eq!((skin.batch_size, skin.epochs, skin.lr, skin.patch_size), (4, 50, 0.001, 0));
        let drive = RunConfig::for_regime(Regime::Drive);
        assert_eq!((drive.patch_size, drive.patch_count, drive.batch_size), (48, 531_265, 32));
        assert_eq!(drive.preprocess, Preprocess::CropPad { side: 576 });
        let chase = RunConfig::for_regime(Regime::Chase);
        assert_eq!((chase.patch_count, chase.preprocess), (412_400, Preprocess::CropPad { side: 960 }));
    }

    #[test]
    fn file_then_overrides() {
        let text = "\
# comment
[run]
regime = drive
seed = 7
[arch]
variant = attunet
mix = true
depth = 3   ; trailing comment
[train]
epochs = 5
";
        let cfg = RunConfig::from_sources(text, &[("epochs".into(), "2".into()), ("base-width".into(), "8".into())]).unwrap();
        assert_eq!(cfg.regime, Regime::Drive);
        assert_eq!(cfg.patch_size, 48);
        assert_eq!((cfg.seed, cfg.epochs), (7, 2));
        assert_eq!(cfg.arch.variant, Variant::AttUNet);
        assert!(cfg.arch.mix);
        assert_eq!((cfg.arch.depth, cfg.arch.base_width), (3, 8));
    }

    #[test]
    fn overriding_regime_resets_its_defaults() {
        let cfg = RunConfig::from_sources("regime = skin\n", &[("regime".into(), "chase".into())]).unwrap();
        assert_eq!(cfg.preprocess, Preprocess::CropPad { side: 960 });
    }

    #[test]
    fn unknown_and_misplaced_keys_are_rejected() {
        for text in ["bogus = 1\n", "[arch]\nepochs = 3\n", "[nowhere]\n", "depth\n"] {
            let err = RunConfig::from_sources(text, &[]).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text:?}: {err}");
        }
        assert!(RunConfig::from_sources("", &[("frobnicate".into(), "1".into())]).is_err());
        assert!(RunConfig::from_sources("split = 0.5,0.5,0.5\n", &[]).is_err());
    }

    #[test]
    fn preprocess_values() {
        assert_eq!(parse_preprocess("resize:48x64"), Some(Preprocess::Resize { height: 48, width: 64 }));
        assert_eq!(parse_preprocess("crop_pad:96"), Some(Preprocess::CropPad { side: 96 }));
        assert_eq!(parse_preprocess("resize:0x4"), None);
    }
}
