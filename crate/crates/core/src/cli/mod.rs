//! The `mixseg` command-line front end.

mod config;
mod prepared;

pub use config::{parse_config_text, Preprocess, Regime, RunConfig, KEYS};
pub use prepared::PreparedData;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arch::Network;
use crate::autograd::OpKind;
use crate::data::{load_image, normalize, save_mask, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::metrics::{binarize, MetricsReport, CONVENTIONS_NOTE};
use crate::tensor::Tensor;
use crate::train::{
    evaluate, predict_image, Checkpoint, EpochRecord, PatchSource, SampleSource, Tiling, TrainConfig, Trainer,
    BEST_CHECKPOINT, LAST_CHECKPOINT,
};

pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_HEADER: &str = "dataset,method,AC,SE,SP,PC,F1,JS";
pub const PREDICTIONS_DIR: &str = "predictions";

#[derive(Debug, Parser)]
#[command(name = "mixseg", version, about = "Mixed-kernel U-Net family segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest, preprocess, split and (for patch regimes) sample patches.
    Prepare(RunArgs),
    /// Train on the prepared data, writing history and checkpoints.
    Train(RunArgs),
    /// Score a checkpoint on the test split.
    Eval(RunArgs),
    /// Write binary masks for the image(s) given by `--input`.
    Predict(RunArgs),
    /// Finite-difference check of every backward rule, block and network.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration file (`key = value` lines with `[section]` headers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` overrides for any configuration key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = crate::gradcheck::GRADCHECK_SEEDS)]
    pub seeds: u64,
    #[arg(long, default_value_t = 5)]
    pub arch_seeds: u64,
    /// Skip the whole-network checks.
    #[arg(long)]
    pub skip_architectures: bool,
    /// Corrupt one op's backward rule (checker self-test).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

/// Splits `--key value`, `--key=value` and bare `--flag` tokens.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let Some(flag) = tokens[i].strip_prefix("--") else {
            return Err(Error::config(format!("expected --key value, found {:?}", tokens[i])));
        };
        if let Some((k, v)) = flag.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if i + 1 < tokens.len() && !tokens[i + 1].starts_with("--") {
            out.push((flag.to_string(), tokens[i + 1].clone()));
            i += 2;
        } else {
            out.push((flag.to_string(), "true".to_string()));
            i += 1;
        }
    }
    Ok(out)
}

impl RunArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut pairs = parse_overrides(&self.overrides)?;
        let mut config = self.config.clone();
        pairs.retain(|(k, v)| {
            if k == "config" {
                config = Some(PathBuf::from(v));
                false
            } else {
                true
            }
        });
        RunConfig::load(config.as_deref(), &pairs)
    }
}

/// Caps a source at its first `n` items.
struct Limited<'a> {
    inner: &'a dyn SampleSource,
    n: usize,
}

impl SampleSource for Limited<'_> {
    fn len(&self) -> usize {
        self.inner.len().min(self.n)
    }

    fn get(&self, index: usize) -> Sample {
        self.inner.get(index)
    }
}

fn limited<'a>(inner: &'a dyn SampleSource, limit: Option<usize>) -> Limited<'a> {
    Limited {
        inner,
        n: limit.unwrap_or(usize::MAX),
    }
}

pub fn cmd_prepare(cfg: &RunConfig, out: &mut dyn Write) -> Result<PreparedData> {
    let prepared = PreparedData::build(cfg)?;
    let dir = cfg.cache_dir();
    prepared.save(&dir)?;
    let m = &prepared.manifest;
    writeln!(
        out,
        "prepared {} images ({}) into {}: train {} / val {} / test {}",
        prepared.samples.len(),
        cfg.regime,
        dir.display(),
        m.train.len(),
        m.val.len(),
        m.test.len()
    )?;
    if let Some((train, val)) = &prepared.patches {
        writeln!(out, "patches: {} training, {} validation ({}×{})", train.len(), val.len(), train.size, train.size)?;
    }
    Ok(prepared)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_val_f1: f64,
    pub output_dir: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainSummary> {
    let data = PreparedData::load(&cfg.cache_dir())?;
    let arch = cfg.arch_for(data.channels())?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
        augment: cfg.augment.then(Default::default),
        threshold: cfg.threshold,
        output_dir: Some(cfg.output_dir.clone()),
    };
    let last = cfg.output_dir.join(LAST_CHECKPOINT);
    let mut trainer = if cfg.resume && last.exists() {
        let ckpt = Checkpoint::load(&last)?;
        if ckpt.spec != arch {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different architecture than the config describes",
                last.display()
            )));
        }
        writeln!(out, "resuming from {} at epoch {}", last.display(), ckpt.epoch)?;
        Trainer::resume(&ckpt, train_cfg)?
    } else {
        Trainer::new(Network::build(&arch, cfg.seed)?, train_cfg, Some(data.stats.clone()))?
    };
    writeln!(
        out,
        "training {} ({} parameters) for {} epochs, batch {}",
        arch.display_name(),
        trainer.net.parameter_count(),
        cfg.epochs,
        cfg.batch_size
    )?;

    let (train_images, val_images) = (data.split_samples("train"), data.split_samples("val"));
    let patch_sources = data
        .patches
        .as_ref()
        .map(|(t, v)| (PatchSource { samples: &train_images, patches: t }, PatchSource { samples: &train_images, patches: v }));
    let (train_src, val_src): (&dyn SampleSource, &dyn SampleSource) = match &patch_sources {
        Some((t, v)) => (t, v),
        None => (&train_images, &val_images),
    };
    let (train_src, val_src) = (limited(train_src, cfg.limit), limited(val_src, cfg.limit));
    while trainer.epoch < cfg.epochs {
        let r = trainer.run_epoch(&train_src, &val_src)?;
        let val = r.val.map_or("-".to_string(), |m| format!("{:.4}", m.f1));
        writeln!(out, "epoch {}/{} loss {:.6} lr {} val_F1 {val}", r.epoch, cfg.epochs, r.train_loss, r.lr)?;
    }
    Ok(TrainSummary {
        history: trainer.history.clone(),
        best_val_f1: trainer.best_val_f1,
        output_dir: cfg.output_dir.clone(),
    })
}

fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cfg.checkpoint {
        return Ok(p.clone());
    }
    [BEST_CHECKPOINT, LAST_CHECKPOINT]
        .iter()
        .map(|f| cfg.output_dir.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}; pass --checkpoint", cfg.output_dir.display())))
}

fn load_network(cfg: &RunConfig, channels: usize) -> Result<(Checkpoint, Network<f32>)> {
    let path = checkpoint_path(cfg)?;
    let ckpt = Checkpoint::load(&path)?;
    let arch = cfg.arch_for(channels)?;
    let mut net = Network::build(&arch, 0)?;
    ckpt.load_into(&mut net)?;
    Ok((ckpt, net))
}

fn tiling(cfg: &RunConfig) -> Tiling {
    if cfg.patched() {
        Tiling::Grid {
            size: cfg.patch_size,
            stride: cfg.eval_stride,
        }
    } else {
        Tiling::Whole
    }
}

/// Fixed-width result table in the six-column layout, four decimals.
pub fn format_table(dataset: &str, rows: &[(String, MetricsReport)], footer: &str) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max("Method".len()) + 2;
    let mut s = format!("Dataset: {dataset}\n{:<width$}", "Method");
    for c in MetricsReport::COLUMNS {
        s.push_str(&format!("{c:>8}"));
    }
    s.push('\n');
    for (method, r) in rows {
        s.push_str(&format!("{method:<width$}"));
        for v in r.values() {
            s.push_str(&format!("{v:>8.4}"));
        }
        s.push('\n');
    }
    s.push_str(footer);
    s.push('\n');
    s
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<MetricsReport> {
    let data = PreparedData::load(&cfg.cache_dir())?;
    let (ckpt, mut net) = load_network(cfg, data.channels())?;
    let norm = ckpt.norm.clone().unwrap_or_else(|| data.stats.clone());
    let test = data.split_samples("test");
    if test.is_empty() {
        return Err(Error::data("the test split is empty"));
    }
    let test_src = limited(&test, cfg.limit);
    let report = evaluate(&mut net, &test_src, Some(&norm), cfg.threshold, cfg.averaging, tiling(cfg), cfg.batch_size)?;
    let method = net.spec().display_name();
    let footer = format!(
        "{} test images, {} averaging, threshold {}. {CONVENTIONS_NOTE}",
        test_src.len(),
        match cfg.averaging {
            crate::metrics::Averaging::Micro => "micro",
            crate::metrics::Averaging::PerImage => "per-image",
        },
        cfg.threshold
    );
    write!(out, "{}", format_table(cfg.regime.dataset_name(), &[(method.clone(), report)], &footer))?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(RESULTS_FILE);
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    writeln!(f, "{},{method},{}", cfg.regime.dataset_name(), report.csv_fields())?;
    Ok(report)
}

fn prediction_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::data(format!("{} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && !p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with("_mask") || s.ends_with("_pred"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Writes `<stem>_pred.png` with values {0, 255} for every input image.
pub fn cmd_predict(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let input = cfg.input.as_ref().ok_or_else(|| Error::config("predict needs --input FILE_OR_DIR"))?;
    let files = prediction_inputs(input)?;
    let mut loaded = Vec::with_capacity(files.len());
    for f in &files {
        loaded.push(load_image(f)?);
    }
    let channels = loaded.first().map_or(cfg.in_channels.unwrap_or(cfg.arch.in_channels), |t| t.shape()[2]);
    let (ckpt, mut net) = load_network(cfg, channels)?;
    let dir = cfg.output_dir.join(PREDICTIONS_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::with_capacity(files.len());
    for (path, image) in files.iter().zip(loaded) {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let raw = Sample::new(image, Tensor::zeros(&[h, w, 1]), path.display().to_string())?;
        let mut s = prepared::preprocess(&raw, cfg.preprocess)?;
        if let Some(n) = &ckpt.norm {
            s = normalize(&s, n)?;
        }
        let prob = predict_image(&mut net, &s.image, tiling(cfg), cfg.batch_size)?;
        let mask = binarize(&prob, cfg.threshold)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let target = dir.join(format!("{stem}_pred.png"));
        save_mask(&target, &mask)?;
        writeln!(out, "{} -> {}", path.display(), target.display())?;
        written.push(target);
    }
    Ok(written)
}

pub fn cmd_gradcheck(opts: &GradcheckOptions, out: &mut dyn Write) -> Result<GradcheckReport> {
    let report = run_gradcheck(opts)?;
    writeln!(out, "{report}")?;
    if !report.passed() {
        let failed: Vec<&str> = report.items.iter().filter(|i| !i.passed).map(|i| i.name.as_str()).collect();
        return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(report)
}

pub fn run_command(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Prepare(a) => cmd_prepare(&a.load()?, out).map(drop),
        Command::Train(a) => cmd_train(&a.load()?, out).map(drop),
        Command::Eval(a) => cmd_eval(&a.load()?, out).map(drop),
        Command::Predict(a) => cmd_predict(&a.load()?, out).map(drop),
        Command::Gradcheck(a) => {
            let fault = a
                .fault
                .as_deref()
                .map(|f| OpKind::parse(f).ok_or_else(|| Error::config(format!("unknown op {f:?}"))))
                .transpose()?;
            let opts = GradcheckOptions {
                seeds: a.seeds,
                architecture_seeds: a.arch_seeds,
                fault,
                architectures: !a.skip_architectures,
                ..GradcheckOptions::default()
            };
            cmd_gradcheck(&opts, out).map(drop)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run_command(&cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn override_tokens() {
        let pairs = parse_overrides(&toks("--epochs 1 --mix=true --augment --limit 8")).unwrap();
        assert_eq!(
            pairs,
            vec![
                ("epochs".into(), "1".into()),
                ("mix".into(), "true".into()),
                ("augment".into(), "true".into()),
                ("limit".into(), "8".into()),
            ]
        );
        assert!(parse_overrides(&toks("epochs 1")).is_err());
    }

    #[test]
    fn clap_accepts_trailing_overrides() {
        let cli = Cli::try_parse_from(toks("mixseg train --config a.cfg --variant unet --mix true")).unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        assert_eq!(args.config, Some(PathBuf::from("a.cfg")));
        assert_eq!(args.overrides, toks("--variant unet --mix true"));
        let cfg = Cli::try_parse_from(toks("mixseg eval --regime drive --config x.cfg")).unwrap();
        let Command::Eval(args) = cfg.command else { panic!() };
        let pairs = parse_overrides(&args.overrides).unwrap();
        assert!(pairs.contains(&("config".into(), "x.cfg".into())));
    }

    #[test]
    fn exit_codes_for_usage_errors() {
        assert_eq!(main_with_args(toks("mixseg frobnicate")), 1);
        assert_eq!(main_with_args(toks("mixseg train --nonsense 3")), 1);
        assert_eq!(main_with_args(toks("mixseg --help")), 0);
    }

    #[test]
    fn table_layout() {
        let r = MetricsReport { ac: 0.94791, se: 0.5, sp: 1.0, pc: 0.25, f1: 2.0 / 3.0, js: 0.5 };
        let t = format_table("Skin", &[("MixU-Net".into(), r)], "note");
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Dataset: Skin");
        assert_eq!(lines[1], "Method          AC      SE      SP      PC      F1      JS");
        assert_eq!(lines[2], "MixU-Net    0.9479  0.5000  1.0000  0.2500  0.6667  0.5000");
        assert_eq!(lines[3], "note");
    }
}
