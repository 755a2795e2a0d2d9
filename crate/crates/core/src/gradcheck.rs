//! Finite-difference verification of every backward rule, block and
//! architecture, at 64-bit precision.

use std::fmt;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::{ArchitectureSpec, Network, Variant};
use crate::autograd::{relative_error, BatchNormMode, Graph, OpKind, RunningStats, Var};
use crate::error::Result;
use crate::nn::{AttentionGate, Block, BlockSpec, Initializer, ParamStore, Session};
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_SEEDS: u64 = 20;
/// Smaller than the library default so probes rarely straddle a ReLU or
/// max-pool kink; roundoff stays far below the tolerance at 64-bit.
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seeds: u64,
    /// Seeds for the whole-network checks, which are far more expensive.
    pub architecture_seeds: u64,
    pub tolerance: f64,
    /// Corrupts this op's backward rule, to prove the checker notices.
    pub fault: Option<OpKind>,
    pub architectures: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: GRADCHECK_SEEDS,
            architecture_seeds: 5,
            tolerance: GRADCHECK_TOLERANCE,
            fault: None,
            architectures: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub kind: &'static str,
    pub seeds: u64,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub items: Vec<CheckItem>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.items {
            writeln!(
                f,
                "{} {:<6} {:<24} max_rel_err={:.3e} seeds={}",
                if i.passed { "PASS" } else { "FAIL" },
                i.kind,
                i.name,
                i.max_error,
                i.seeds
            )?;
        }
        let failed = self.items.iter().filter(|i| !i.passed).count();
        write!(
            f,
            "{} items, {failed} failed, tolerance {:e}, {:.1}s",
            self.items.len(),
            self.tolerance,
            self.seconds
        )
    }
}

type Forward<'a> = dyn Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + 'a;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Values bounded away from zero, for inputs that feed a ReLU directly.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values spaced well beyond the probe step, for max-pooling.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    use rand::seq::SliceRandom;
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Reduces a tensor-valued output to a scalar through fixed random weights
/// so that every output element carries a distinct gradient.
fn project(sess: &mut Session<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = sess.graph.value(y).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = sess.graph.constant(normal(&mut rng, &shape, 1.0));
    let yw = sess.graph.mul(y, w)?;
    sess.graph.sum(yw)
}

fn evaluate(store: &mut ParamStore<f64>, inputs: &[Tensor<f64>], forward: &Forward<'_>, seed: u64) -> Result<f64> {
    let mut sess = Session::new(store, BatchNormMode::Train).track_grads(false);
    let xs: Vec<Var> = inputs.iter().map(|t| sess.graph.constant(t.clone())).collect();
    let y = forward(&mut sess, &xs)?;
    let loss = project(&mut sess, y, seed)?;
    Ok(sess.graph.value(loss).data()[0])
}

/// Indices to probe: all of them, or a random subset of `limit`.
fn probes(rng: &mut ChaCha8Rng, n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Tensors whose true gradient is zero (a bias feeding batch norm) show
/// pure finite-difference roundoff, so each tensor's error is measured
/// against at least this fraction of the largest gradient in the case.
const RELATIVE_FLOOR: f64 = 1e-3;

fn relative_error_floored(a: &[f64], n: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let rel = relative_error(a, n);
    if floor > 0.0 {
        rel.min(norm(&diff) / norm(a).max(norm(n)).max(floor))
    } else {
        rel
    }
}

/// Largest per-tensor relative error over every input and parameter.
fn check_case(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    forward: &Forward<'_>,
    seed: u64,
    fault: Option<OpKind>,
    probe_limit: Option<usize>,
) -> Result<f64> {
    let mut analytic_store = store.clone();
    let mut graph = Graph::new();
    if let Some(op) = fault {
        graph.inject_backward_fault(op);
    }
    let input_grads: Vec<Tensor<f64>> = {
        let mut sess = Session::with_graph(graph, &mut analytic_store, BatchNormMode::Train);
        let xs: Vec<Var> = inputs.iter().map(|t| sess.graph.variable(t.clone())).collect();
        let y = forward(&mut sess, &xs)?;
        let loss = project(&mut sess, y, seed)?;
        sess.backward(loss)?;
        xs.iter()
            .zip(inputs)
            .map(|(&x, t)| sess.graph.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut scratch = store.clone();
    for (k, grad) in input_grads.iter().enumerate() {
        let idx = probes(&mut rng, grad.numel(), probe_limit);
        let mut perturbed = inputs.to_vec();
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = perturbed[k].data()[i];
            perturbed[k].data_mut()[i] = orig + FD_STEP;
            let up = evaluate(&mut scratch, &perturbed, forward, seed)?;
            perturbed[k].data_mut()[i] = orig - FD_STEP;
            let down = evaluate(&mut scratch, &perturbed, forward, seed)?;
            perturbed[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| grad.data()[i]).collect();
        pairs.push((analytic, numeric));
    }
    for p in 0..store.params().len() {
        let param = &analytic_store.params()[p];
        let grad = param.grad.clone().unwrap_or_else(|| Tensor::zeros(param.value.shape()));
        let idx = probes(&mut rng, grad.numel(), probe_limit);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.params()[p].value.data()[i];
            scratch.params_mut()[p].value.data_mut()[i] = orig + FD_STEP;
            let up = evaluate(&mut scratch, inputs, forward, seed)?;
            scratch.params_mut()[p].value.data_mut()[i] = orig - FD_STEP;
            let down = evaluate(&mut scratch, inputs, forward, seed)?;
            scratch.params_mut()[p].value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| grad.data()[i]).collect();
        pairs.push((analytic, numeric));
    }
    let scale = pairs.iter().map(|(a, _)| norm(a)).fold(0.0, f64::max);
    Ok(pairs
        .iter()
        .map(|(a, n)| relative_error_floored(a, n, RELATIVE_FLOOR * scale))
        .fold(0.0, f64::max))
}

/// One op applied to freshly drawn inputs.
fn op_case(op: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Forward<'static>>) {
    match op {
        OpKind::Conv2d => {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let inputs = vec![
                normal(rng, &[2, 5, 6, 3], 1.0),
                normal(rng, &[k, k, 3, 4], 0.5),
                normal(rng, &[4], 0.5),
            ];
            (inputs, Box::new(|s, x| s.graph.conv2d(x[0], x[1], x[2])))
        }
        OpKind::Concat => (
            vec![normal(rng, &[2, 3, 3, 2], 1.0), normal(rng, &[2, 3, 3, 1], 1.0), normal(rng, &[2, 3, 3, 3], 1.0)],
            Box::new(|s, x| s.graph.concat_channels(x)),
        ),
        OpKind::MaxPool2 => (vec![distinct(rng, &[2, 4, 6, 3])], Box::new(|s, x| s.graph.max_pool2(x[0]))),
        OpKind::Upsample2 => (vec![normal(rng, &[2, 3, 2, 2], 1.0)], Box::new(|s, x| s.graph.upsample2(x[0]))),
        OpKind::BatchNorm => (
            vec![
                normal(rng, &[3, 3, 3, 2], 1.0),
                normal(rng, &[2], 1.0),
                normal(rng, &[2], 1.0),
            ],
            Box::new(|s, x| {
                let mut stats = RunningStats::new(2);
                s.graph.batch_norm(x[0], x[1], x[2], &mut stats, BatchNormMode::Train)
            }),
        ),
        OpKind::Relu => (vec![away_from_zero(rng, &[4, 5])], Box::new(|s, x| s.graph.relu(x[0]))),
        OpKind::Sigmoid => (vec![normal(rng, &[4, 5], 2.0)], Box::new(|s, x| s.graph.sigmoid(x[0]))),
        OpKind::Add => (
            vec![normal(rng, &[2, 3, 3, 2], 1.0), normal(rng, &[2, 3, 3, 2], 1.0)],
            Box::new(|s, x| s.graph.add(x[0], x[1])),
        ),
        OpKind::Mul => (
            vec![normal(rng, &[2, 3, 3, 2], 1.0), normal(rng, &[2, 3, 3, 2], 1.0)],
            Box::new(|s, x| s.graph.mul(x[0], x[1])),
        ),
        OpKind::ScaleChannels => (
            vec![normal(rng, &[2, 3, 3, 4], 1.0), normal(rng, &[2, 3, 3, 1], 1.0)],
            Box::new(|s, x| s.graph.scale_channels(x[0], x[1])),
        ),
        OpKind::Sum => (vec![normal(rng, &[3, 4, 2], 1.0)], Box::new(|s, x| s.graph.sum(x[0]))),
        OpKind::Bce => {
            let probs = Tensor::from_fn(&[2, 3, 3, 1], |_| rng.random_range(0.05..0.95));
            let target = Tensor::from_fn(&[2, 3, 3, 1], |_| rng.random_range(0..2) as f64);
            (vec![probs], Box::new(move |s, x| s.graph.bce_loss(x[0], &target)))
        }
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

pub const CHECKED_OPS: [OpKind; 12] = [
    OpKind::Conv2d,
    OpKind::Concat,
    OpKind::MaxPool2,
    OpKind::Upsample2,
    OpKind::BatchNorm,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Add,
    OpKind::Mul,
    OpKind::ScaleChannels,
    OpKind::Sum,
    OpKind::Bce,
];

pub const BLOCK_NAMES: [&str; 5] = ["conv_block", "recurrent_block", "mix_conv_block", "mix_recurrent_block", "attention_gate"];

fn block_spec(name: &str) -> Result<BlockSpec> {
    let sizes = [1, 3, 5];
    match name {
        "conv_block" => Ok(BlockSpec::conv(2, 3)),
        "recurrent_block" => Ok(BlockSpec::recurrent(2, 3, 2)),
        "mix_conv_block" => BlockSpec::mix_conv(2, 4, &sizes),
        "mix_recurrent_block" => BlockSpec::mix_recurrent(2, 4, &sizes, 2),
        other => unreachable!("unknown block {other}"),
    }
}

fn randomize_affine(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    // Non-trivial γ and β so their gradients are exercised away from 1 and 0.
    for p in store.params_mut() {
        if p.name.ends_with(".gamma") {
            p.value = Tensor::from_fn(p.value.shape(), |_| rng.random_range(0.5..1.5));
        } else if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
            p.value = normal(rng, p.value.shape(), 0.3);
        }
    }
}

fn run_block(name: &str, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    if name == "attention_gate" {
        let gate = AttentionGate::build(&mut store, &mut init, "att", 3, 4, None);
        randomize_affine(&mut store, &mut rng);
        let inputs = vec![normal(&mut rng, &[2, 4, 4, 3], 1.0), normal(&mut rng, &[2, 4, 4, 4], 1.0)];
        let forward = move |s: &mut Session<'_, f64>, x: &[Var]| gate.forward(s, x[0], x[1]).map(|(out, _)| out);
        return check_case(&store, &inputs, &forward, seed, fault, None);
    }
    let spec = block_spec(name)?;
    let c_in = spec.in_channels;
    let block = Block::build(spec, &mut store, &mut init, "blk")?;
    randomize_affine(&mut store, &mut rng);
    let inputs = vec![normal(&mut rng, &[2, 4, 4, c_in], 1.0)];
    let forward = move |s: &mut Session<'_, f64>, x: &[Var]| block.forward(s, x[0]);
    check_case(&store, &inputs, &forward, seed, fault, None)
}

pub fn architecture_specs() -> Vec<ArchitectureSpec> {
    let mut out = Vec::new();
    for variant in [Variant::UNet, Variant::R2UNet, Variant::AttUNet] {
        for mix in [false, true] {
            let mut spec = ArchitectureSpec::new(variant, mix).with_size(2, 4).with_kernel_sizes(&[1, 3]);
            spec.recurrence_steps = 1;
            out.push(spec);
        }
    }
    out
}

fn run_architecture(spec: &ArchitectureSpec, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut net = Network::<f64>::build(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize_affine(net.store_mut(), &mut rng);
    let store = std::mem::take(net.store_mut());
    let inputs = vec![normal(&mut rng, &[2, 4, 4, 1], 1.0)];
    let target = Tensor::from_fn(&[2, 4, 4, 1], |_| rng.random_range(0..2) as f64);
    let forward = |s: &mut Session<'_, f64>, x: &[Var]| {
        let y = net.forward_in(s, x[0])?;
        s.graph.bce_loss(y, &target)
    };
    check_case(&store, &inputs, &forward, seed, fault, Some(24))
}

fn summarize(name: String, kind: &'static str, errors: Vec<f64>, tol: f64) -> CheckItem {
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    CheckItem {
        name,
        kind,
        seeds: errors.len() as u64,
        passed: errors.iter().all(|e| e.is_finite()) && max_error < tol,
        max_error,
    }
}

/// Runs every op, block and (optionally) architecture over the seeds.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut items = Vec::new();
    for op in CHECKED_OPS {
        let errors = (0..opts.seeds)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (inputs, forward) = op_case(op, &mut rng);
                check_case(&ParamStore::new(), &inputs, forward.as_ref(), seed, opts.fault, None)
            })
            .collect::<Result<Vec<_>>>()?;
        items.push(summarize(op.name().to_string(), "op", errors, opts.tolerance));
    }
    for name in BLOCK_NAMES {
        let errors = (0..opts.seeds).map(|seed| run_block(name, seed, opts.fault)).collect::<Result<Vec<_>>>()?;
        items.push(summarize(name.to_string(), "block", errors, opts.tolerance));
    }
    if opts.architectures {
        for spec in architecture_specs() {
            let errors = (0..opts.architecture_seeds)
                .map(|seed| run_architecture(&spec, seed, opts.fault))
                .collect::<Result<Vec<_>>>()?;
            items.push(summarize(spec.display_name(), "arch", errors, opts.tolerance));
        }
    }
    Ok(GradcheckReport {
        items,
        tolerance: opts.tolerance,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: Option<OpKind>) -> GradcheckReport {
        run_gradcheck(&GradcheckOptions {
            seeds: 2,
            architecture_seeds: 1,
            fault,
            ..GradcheckOptions::default()
        })
        .unwrap()
    }

    #[test]
    fn clean_build_passes_every_item() {
        let report = quick(None);
        assert!(report.items.len() >= 12 + 5 + 6);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let report = run_gradcheck(&GradcheckOptions {
            seeds: 1,
            architectures: false,
            fault: Some(OpKind::Sigmoid),
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!report.item("sigmoid").unwrap().passed);
        assert!(!report.item("attention_gate").unwrap().passed);
        assert!(report.item("conv2d").unwrap().passed);
        assert!(report.to_string().contains("FAIL op     sigmoid"));
    }
}
