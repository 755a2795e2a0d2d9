//! Checkpoint file: magic `MIXSEG01`, a u64 length-prefixed UTF-8 header of
//! `key=value` lines, then a u32-counted table of name, shape and
//! little-endian f32 data.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::adam::OptimizerState;
use super::schedule::ScheduleState;
use crate::arch::{ArchitectureSpec, Network};
use crate::autograd::RunningStats;
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC_PREFIX: &[u8; 6] = b"MIXSEG";
const VERSION: &[u8; 2] = b"01";

/// Enough of a ChaCha8 generator to resume its stream exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_f1: f64,
    pub rng: RngState,
    pub schedule: ScheduleState,
    pub optimizer: OptimizerState<f32>,
    pub store: ParamStore<f32>,
    pub norm: Option<ChannelStats>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ckpt_err(format!("file is truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ckpt_err("tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = self
            .take(numel.checked_mul(4).ok_or_else(|| ckpt_err("tensor too large"))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn from_parts(
        net: &Network<f32>,
        epoch: usize,
        best_val_f1: f64,
        rng: &ChaCha8Rng,
        schedule: &ScheduleState,
        optimizer: &OptimizerState<f32>,
        norm: Option<&ChannelStats>,
    ) -> Self {
        let mut store = net.store().clone();
        store.zero_grads();
        Self {
            spec: net.spec().clone(),
            epoch,
            best_val_f1,
            rng: RngState::capture(rng),
            schedule: schedule.clone(),
            optimizer: optimizer.clone(),
            store,
            norm: norm.cloned(),
        }
    }

    fn header(&self) -> String {
        let mut lines: Vec<String> = self.spec.to_pairs().into_iter().map(|(k, v)| format!("arch.{k}={v}")).collect();
        let s = &self.schedule;
        let o = &self.optimizer;
        lines.extend([
            format!("epoch={}", self.epoch),
            format!("best_val_f1={:?}", self.best_val_f1),
            format!("rng.seed={}", hex(&self.rng.seed)),
            format!("rng.stream={}", self.rng.stream),
            format!("rng.word_pos={}", self.rng.word_pos),
            format!("schedule.lr={:?}", s.lr),
            format!("schedule.best_loss={:?}", s.best_loss),
            format!("schedule.epochs_since_improvement={}", s.epochs_since_improvement),
            format!("schedule.patience={}", s.patience),
            format!("schedule.factor={:?}", s.factor),
            format!("adam.lr={:?}", o.lr),
            format!("adam.step={}", o.step),
            format!("adam.beta1={:?}", o.beta1),
            format!("adam.beta2={:?}", o.beta2),
            format!("adam.eps={:?}", o.eps),
        ]);
        if let Some(n) = &self.norm {
            lines.push(format!("norm={n}"));
        }
        lines.join("\n")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC_PREFIX);
        out.extend_from_slice(VERSION);
        let header = self.header();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());

        let params = self.store.params();
        let running = self.store.running();
        let count = params.len() * 3 + running.len() * 2;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for p in params {
            put_tensor(&mut out, &format!("param:{}", p.name), p.value.shape(), p.value.data());
        }
        for (name, stats) in running {
            put_tensor(&mut out, &format!("running_mean:{name}"), &[stats.mean.len()], &stats.mean);
            put_tensor(&mut out, &format!("running_var:{name}"), &[stats.var.len()], &stats.var);
        }
        for (p, m) in params.iter().zip(&self.optimizer.m) {
            put_tensor(&mut out, &format!("adam.m:{}", p.name), m.shape(), m.data());
        }
        for (p, v) in params.iter().zip(&self.optimizer.v) {
            put_tensor(&mut out, &format!("adam.v:{}", p.name), v.shape(), v.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..6] != MAGIC_PREFIX {
            return Err(ckpt_err("not a checkpoint file (bad magic bytes)"));
        }
        if &bytes[6..8] != VERSION {
            return Err(ckpt_err(format!(
                "unsupported checkpoint version {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[6..8]),
                std::str::from_utf8(VERSION).unwrap()
            )));
        }
        let mut r = Reader { bytes, pos: 8 };
        let len = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(len)?).map_err(|_| ckpt_err("header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| ckpt_err(format!("bad header line {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| ckpt_err(format!("header lacks {k}")));
        fn num<N: std::str::FromStr>(k: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| ckpt_err(format!("header {k}={v} is malformed")))
        }
        let mut spec = ArchitectureSpec::default();
        for (k, v) in &kv {
            if let Some(key) = k.strip_prefix("arch.") {
                if !spec.set(key, v).map_err(|e| ckpt_err(e.to_string()))? {
                    return Err(ckpt_err(format!("unknown architecture key {key}")));
                }
            }
        }
        let schedule = ScheduleState {
            lr: num("schedule.lr", get("schedule.lr")?)?,
            best_loss: num("schedule.best_loss", get("schedule.best_loss")?)?,
            epochs_since_improvement: num(
                "schedule.epochs_since_improvement",
                get("schedule.epochs_since_improvement")?,
            )?,
            patience: num("schedule.patience", get("schedule.patience")?)?,
            factor: num("schedule.factor", get("schedule.factor")?)?,
        };
        let rng = RngState {
            seed: unhex(get("rng.seed")?).ok_or_else(|| ckpt_err("header rng.seed is malformed"))?,
            stream: num("rng.stream", get("rng.stream")?)?,
            word_pos: num("rng.word_pos", get("rng.word_pos")?)?,
        };
        let norm = kv.get("norm").map(|v| v.parse::<ChannelStats>()).transpose()?;

        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        let mut means: Vec<(String, Vec<f32>)> = Vec::new();
        let mut vars: Vec<Vec<f32>> = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            let (kind, rest) = name.split_once(':').ok_or_else(|| ckpt_err(format!("bad tensor name {name}")))?;
            match kind {
                "param" => {
                    store.add(rest, t);
                }
                "running_mean" => means.push((rest.to_string(), t.into_data())),
                "running_var" => vars.push(t.into_data()),
                "adam.m" => m.push(t),
                "adam.v" => v.push(t),
                _ => return Err(ckpt_err(format!("bad tensor name {name}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(ckpt_err(format!("{} trailing bytes after the tensor table", bytes.len() - r.pos)));
        }
        let n_params = store.params().len();
        if means.len() != vars.len() || m.len() != n_params || v.len() != n_params {
            return Err(ckpt_err("tensor table is incomplete"));
        }
        for ((name, mean), var) in means.into_iter().zip(vars) {
            let id = store.add_running(name, mean.len());
            store.running_mut()[id.0].1 = RunningStats { mean, var };
        }
        let optimizer = OptimizerState {
            lr: num("adam.lr", get("adam.lr")?)?,
            step: num("adam.step", get("adam.step")?)?,
            beta1: num("adam.beta1", get("adam.beta1")?)?,
            beta2: num("adam.beta2", get("adam.beta2")?)?,
            eps: num("adam.eps", get("adam.eps")?)?,
            m,
            v,
        };
        Ok(Self {
            spec,
            epoch: num("epoch", get("epoch")?)?,
            best_val_f1: num("best_val_f1", get("best_val_f1")?)?,
            rng,
            schedule,
            optimizer,
            store,
            norm,
        })
    }

    /// Writes via a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies parameters and running statistics into `net`, whose spec must
    /// match.
    pub fn load_into(&self, net: &mut Network<f32>) -> Result<()> {
        if net.spec() != &self.spec {
            let ours: BTreeMap<_, _> = self.spec.to_pairs().into_iter().collect();
            let diffs: Vec<String> = net
                .spec()
                .to_pairs()
                .into_iter()
                .filter(|(k, v)| ours.get(k) != Some(v))
                .map(|(k, v)| format!("{k}: checkpoint {} vs network {v}", ours[k]))
                .collect();
            return Err(ckpt_err(format!("architecture mismatch ({})", diffs.join("; "))));
        }
        let store = net.store_mut();
        if store.params().len() != self.store.params().len() || store.running().len() != self.store.running().len() {
            return Err(ckpt_err("checkpoint tensor count does not match the network"));
        }
        for (dst, src) in store.params_mut().iter_mut().zip(self.store.params()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(ckpt_err(format!(
                    "tensor {} {:?} does not match network tensor {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
            dst.grad = None;
        }
        for (dst, src) in store.running_mut().iter_mut().zip(self.store.running()) {
            if dst.0 != src.0 || dst.1.mean.len() != src.1.mean.len() {
                return Err(ckpt_err(format!("running statistics {} do not match {}", src.0, dst.0)));
            }
            dst.1 = src.1.clone();
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Network<f32>> {
        let mut net = Network::build(&self.spec, 0)?;
        self.load_into(&mut net)?;
        Ok(net)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
