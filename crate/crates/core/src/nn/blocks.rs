use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::params::{BnId, Initializer, ParamId, ParamStore, Session};

pub const DEFAULT_RECURRENCE_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Conv,
    Recurrent,
    MixConv,
    MixRecurrent,
}

impl BlockKind {
    pub fn is_mix(self) -> bool {
        matches!(self, BlockKind::MixConv | BlockKind::MixRecurrent)
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, BlockKind::Recurrent | BlockKind::MixRecurrent)
    }
}

/// Splits `total` filters across `kernel_sizes`: an equal share each, with
/// the remainder handed one by one to the smallest kernels.
pub fn split_filters(total: usize, kernel_sizes: &[usize]) -> Result<Vec<usize>> {
    let n = kernel_sizes.len();
    if n == 0 || total < n {
        return Err(Error::config(format!(
            "cannot split {total} filters across {n} kernel sizes"
        )));
    }
    let (share, rem) = (total / n, total % n);
    Ok((0..n).map(|i| share + usize::from(i < rem)).collect())
}

/// Declarative description of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Strictly increasing odd sizes; `[3]` for the plain kinds.
    pub kernel_sizes: Vec<usize>,
    /// Filters per kernel size, summing to `out_channels`.
    pub filters: Vec<usize>,
    /// Recurrent kinds only.
    pub recurrence_steps: usize,
    /// Normalize each branch before concatenation instead of once after.
    pub per_branch_norm: bool,
}

impl BlockSpec {
    pub fn conv(in_channels: usize, out_channels: usize) -> Self {
        Self::plain(BlockKind::Conv, in_channels, out_channels)
    }

    pub fn recurrent(in_channels: usize, out_channels: usize, steps: usize) -> Self {
        Self {
            recurrence_steps: steps,
            ..Self::plain(BlockKind::Recurrent, in_channels, out_channels)
        }
    }

    pub fn mix_conv(in_channels: usize, out_channels: usize, kernel_sizes: &[usize]) -> Result<Self> {
        Self::mix(BlockKind::MixConv, in_channels, out_channels, kernel_sizes, 0)
    }

    pub fn mix_recurrent(
        in_channels: usize,
        out_channels: usize,
        kernel_sizes: &[usize],
        steps: usize,
    ) -> Result<Self> {
        Self::mix(BlockKind::MixRecurrent, in_channels, out_channels, kernel_sizes, steps)
    }

    fn plain(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            kernel_sizes: vec![3],
            filters: vec![out_channels],
            recurrence_steps: 0,
            per_branch_norm: false,
        }
    }

    fn mix(
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        kernel_sizes: &[usize],
        steps: usize,
    ) -> Result<Self> {
        Ok(Self {
            kind,
            in_channels,
            out_channels,
            kernel_sizes: kernel_sizes.to_vec(),
            filters: split_filters(out_channels, kernel_sizes)?,
            recurrence_steps: steps,
            per_branch_norm: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("block channel counts must be positive"));
        }
        if self.kernel_sizes.is_empty()
            || self.kernel_sizes.iter().any(|k| k % 2 == 0)
            || self.kernel_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(format!(
                "kernel_sizes {:?} must be non-empty, odd and strictly increasing",
                self.kernel_sizes
            )));
        }
        if !self.kind.is_mix() && self.kernel_sizes != [3] {
            return Err(Error::config(format!(
                "{:?} blocks use a single 3×3 kernel, got {:?}",
                self.kind, self.kernel_sizes
            )));
        }
        if self.filters.len() != self.kernel_sizes.len()
            || self.filters.iter().sum::<usize>() != self.out_channels
            || self.filters.contains(&0)
        {
            return Err(Error::config(format!(
                "filters {:?} must give each of {:?} at least one filter and sum to {}",
                self.filters, self.kernel_sizes, self.out_channels
            )));
        }
        if self.kind.is_recurrent() && self.recurrence_steps < 1 {
            return Err(Error::config("recurrence_steps must be at least 1"));
        }
        Ok(())
    }
}

/// A same-padded convolution with bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: usize,
}

impl ConvLayer {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        size: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.weight"),
            init.kaiming(&[size, size, in_channels, out_channels]),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { kernel, bias, size }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        sess.conv(x, self.kernel, self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnId,
}

impl NormLayer {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let stats = store.add_running(name, channels);
        Self { gamma, beta, stats }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        sess.batch_norm(x, self.gamma, self.beta, self.stats)
    }
}

/// One conv → BN → ReLU stage. With several kernel sizes the convolutions
/// run in parallel on the same input and their outputs are concatenated by
/// ascending kernel size.
#[derive(Debug, Clone)]
pub struct ConvStage {
    pub branches: Vec<ConvLayer>,
    /// One entry, or one per branch when normalizing before concatenation.
    pub norms: Vec<NormLayer>,
}

impl ConvStage {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        kernel_sizes: &[usize],
        filters: &[usize],
        per_branch_norm: bool,
    ) -> Self {
        let single = kernel_sizes.len() == 1;
        let mut branches = Vec::with_capacity(kernel_sizes.len());
        let mut norms = Vec::new();
        for (&k, &m) in kernel_sizes.iter().zip(filters) {
            let conv_name = if single {
                format!("{name}.conv")
            } else {
                format!("{name}.conv{k}")
            };
            branches.push(ConvLayer::build(store, init, &conv_name, k, in_channels, m));
            if per_branch_norm && !single {
                norms.push(NormLayer::build(store, &format!("{name}.bn{k}"), m));
            }
        }
        if norms.is_empty() {
            norms.push(NormLayer::build(store, &format!("{name}.bn"), filters.iter().sum()));
        }
        Self { branches, norms }
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        if self.norms.len() == self.branches.len() && self.branches.len() > 1 {
            let mut outs = Vec::with_capacity(self.branches.len());
            for (conv, norm) in self.branches.iter().zip(&self.norms) {
                let y = conv.forward(sess, x)?;
                let y = norm.forward(sess, y)?;
                outs.push(sess.graph.relu(y)?);
            }
            return sess.graph.concat_channels(&outs);
        }
        let y = if let [conv] = self.branches.as_slice() {
            conv.forward(sess, x)?
        } else {
            let outs = self
                .branches
                .iter()
                .map(|conv| conv.forward(sess, x))
                .collect::<Result<Vec<_>>>()?;
            sess.graph.concat_channels(&outs)?
        };
        let y = self.norms[0].forward(sess, y)?;
        sess.graph.relu(y)
    }
}

#[derive(Debug, Clone)]
enum BlockBody {
    Double([ConvStage; 2]),
    Recurrent {
        projection: ConvLayer,
        layers: [ConvStage; 2],
    },
}

/// A conv, recurrent, mix conv or mix recurrent block.
///
/// Conv kinds apply two stages in sequence. Recurrent kinds first project the
/// input to `out_channels` with a 1×1 convolution `p`, then stack two
/// recurrent layers, each computing `h₀ = s(p)`, `h_τ = s(p + h_{τ−1})` for
/// τ = 1..t with one shared stage `s`, and add `p` to the result.
#[derive(Debug, Clone)]
pub struct Block {
    spec: BlockSpec,
    body: BlockBody,
}

impl Block {
    pub fn build<T: Scalar>(
        spec: BlockSpec,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
    ) -> Result<Self> {
        spec.validate()?;
        let stage = |store: &mut ParamStore<T>, init: &mut Initializer, tag: &str, c_in: usize| {
            ConvStage::build(
                store,
                init,
                &format!("{name}.{tag}"),
                c_in,
                &spec.kernel_sizes,
                &spec.filters,
                spec.per_branch_norm,
            )
        };
        let m = spec.out_channels;
        let body = if spec.kind.is_recurrent() {
            let projection =
                ConvLayer::build(store, init, &format!("{name}.proj"), 1, spec.in_channels, m);
            let first = stage(store, init, "rcl0", m);
            let second = stage(store, init, "rcl1", m);
            BlockBody::Recurrent {
                projection,
                layers: [first, second],
            }
        } else {
            let first = stage(store, init, "stage0", spec.in_channels);
            let second = stage(store, init, "stage1", m);
            BlockBody::Double([first, second])
        };
        Ok(Self { spec, body })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let channels = sess.graph.value(x).channels();
        if channels != self.spec.in_channels {
            return Err(Error::dim(format!(
                "{:?} block expects {} input channels, got {channels}",
                self.spec.kind, self.spec.in_channels
            )));
        }
        match &self.body {
            BlockBody::Double([a, b]) => {
                let y = a.forward(sess, x)?;
                b.forward(sess, y)
            }
            BlockBody::Recurrent { projection, layers } => {
                let p = projection.forward(sess, x)?;
                let mut h = p;
                for layer in layers {
                    h = recurrent_layer(sess, layer, h, self.spec.recurrence_steps)?;
                }
                sess.graph.add(p, h)
            }
        }
    }
}

fn recurrent_layer<T: Scalar>(
    sess: &mut Session<'_, T>,
    stage: &ConvStage,
    x: Var,
    steps: usize,
) -> Result<Var> {
    let mut h = stage.forward(sess, x)?;
    for _ in 0..steps {
        let s = sess.graph.add(x, h)?;
        h = stage.forward(sess, s)?;
    }
    Ok(h)
}

/// Additive attention gate: `α = σ(ψ(relu(W_g·g + W_x·x)))`, output `α ⊙ x`.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub gate: ConvLayer,
    pub skip: ConvLayer,
    pub psi: ConvLayer,
}

impl AttentionGate {
    /// `inter_channels` defaults to `max(1, skip_channels / 2)` when `None`.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        gate_channels: usize,
        skip_channels: usize,
        inter_channels: Option<usize>,
    ) -> Self {
        let inter = inter_channels.unwrap_or((skip_channels / 2).max(1));
        Self {
            gate: ConvLayer::build(store, init, &format!("{name}.wg"), 1, gate_channels, inter),
            skip: ConvLayer::build(store, init, &format!("{name}.wx"), 1, skip_channels, inter),
            psi: ConvLayer::build(store, init, &format!("{name}.psi"), 1, inter, 1),
        }
    }

    /// Returns `(gated skip features, α)`.
    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<'_, T>,
        gating: Var,
        skip: Var,
    ) -> Result<(Var, Var)> {
        let (gs, xs) = (sess.graph.value(gating).shape(), sess.graph.value(skip).shape());
        if gs.len() != xs.len() || gs[..gs.len() - 1] != xs[..xs.len() - 1] {
            return Err(Error::dim(format!(
                "attention gate: gating {gs:?} and skip {xs:?} are not spatially aligned"
            )));
        }
        let a = self.gate.forward(sess, gating)?;
        let b = self.skip.forward(sess, skip)?;
        let s = sess.graph.add(a, b)?;
        let s = sess.graph.relu(s)?;
        let logits = self.psi.forward(sess, s)?;
        let alpha = sess.graph.sigmoid(logits)?;
        Ok((sess.graph.scale_channels(skip, alpha)?, alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{BatchNormMode, OpKind};

    #[test]
    fn split_filter_cases() {
        assert_eq!(split_filters(64, &[1, 3, 5, 7]).unwrap(), vec![16; 4]);
        assert_eq!(split_filters(6, &[3, 5, 7]).unwrap(), vec![2, 2, 2]);
        assert_eq!(split_filters(7, &[3, 5, 7]).unwrap(), vec![3, 2, 2]);
        assert!(matches!(split_filters(2, &[3, 5, 7]), Err(Error::Config(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(BlockSpec::conv(1, 8).validate().is_ok());
        assert!(BlockSpec::recurrent(1, 8, 0).validate().is_err());
        assert!(BlockSpec::mix_conv(1, 8, &[3, 5, 7]).unwrap().validate().is_ok());
        assert!(BlockSpec::mix_conv(1, 8, &[5, 3]).unwrap().validate().is_err());
        assert!(BlockSpec::mix_conv(1, 8, &[3, 4]).unwrap().validate().is_err());
        let mut bad = BlockSpec::conv(1, 8);
        bad.kernel_sizes = vec![5];
        assert!(bad.validate().is_err());
    }

    fn run(block: &Block, store: &mut ParamStore<f64>, x: Tensor<f64>) -> (Tensor<f64>, Vec<OpKind>) {
        let mut sess = Session::new(store, BatchNormMode::Train);
        let xv = sess.graph.constant(x);
        let y = block.forward(&mut sess, xv).unwrap();
        let ops = sess.graph.records().iter().map(|r| r.op).collect();
        (sess.graph.value(y).clone(), ops)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let block = Block::build(BlockSpec::conv(2, 4), &mut store, &mut Initializer::new(1), "b").unwrap();
        let (y, _) = run(&block, &mut store, Tensor::zeros(&[1, 6, 6, 2]));
        assert_eq!(y.shape(), &[1, 6, 6, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let block = Block::build(BlockSpec::conv(2, 4), &mut store, &mut Initializer::new(1), "b").unwrap();
        let mut sess = Session::new(&mut store, BatchNormMode::Train);
        let x = sess.graph.constant(Tensor::zeros(&[1, 4, 4, 3]));
        assert!(matches!(block.forward(&mut sess, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn mix_conv_block_with_single_size_is_the_plain_block() {
        let x = Initializer::new(9).kaiming::<f64>(&[2, 5, 5, 3]);
        let mut s1 = ParamStore::new();
        let plain = Block::build(BlockSpec::conv(3, 6), &mut s1, &mut Initializer::new(4), "b").unwrap();
        let mut s2 = ParamStore::new();
        let mix = Block::build(
            BlockSpec::mix_conv(3, 6, &[3]).unwrap(),
            &mut s2,
            &mut Initializer::new(4),
            "b",
        )
        .unwrap();
        let shapes = |s: &ParamStore<f64>| {
            s.params().iter().map(|p| p.value.shape().to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(shapes(&s1), shapes(&s2));
        let (y1, ops1) = run(&plain, &mut s1, x.clone());
        let (y2, ops2) = run(&mix, &mut s2, x);
        assert_eq!(ops1, ops2);
        assert_eq!(y1, y2);
    }

    #[test]
    fn mix_branches_concatenate_by_kernel_size() {
        let mut store = ParamStore::<f32>::new();
        let spec = BlockSpec::mix_conv(64, 64, &[1, 3, 5, 7]).unwrap();
        assert_eq!(spec.filters, vec![16; 4]);
        let block = Block::build(spec, &mut store, &mut Initializer::new(0), "m").unwrap();
        let mut sess = Session::new(&mut store, BatchNormMode::Train);
        let x = sess.graph.constant(Tensor::full(&[1, 8, 8, 64], 0.1));
        let y = block.forward(&mut sess, x).unwrap();
        assert_eq!(sess.graph.value(y).shape(), &[1, 8, 8, 64]);
        let convs: Vec<Vec<usize>> = sess
            .graph
            .records()
            .iter()
            .filter(|r| r.op == OpKind::Conv2d)
            .take(4)
            .map(|r| r.output_shape.clone())
            .collect();
        assert_eq!(convs, vec![vec![1, 8, 8, 16]; 4]);
        let names: Vec<&str> = store.params().iter().take(8).map(|p| p.name.as_str()).collect();
        assert_eq!(names[0], "m.stage0.conv1.weight");
        assert_eq!(names[6], "m.stage0.conv7.weight");
    }

    #[test]
    fn recurrent_with_one_step_matches_hand_unroll() {
        // One step: h0 = s(p), h1 = s(p + h0), per layer; output p + layer2(layer1(p)).
        let mut store = ParamStore::<f64>::new();
        let block = Block::build(
            BlockSpec::recurrent(2, 3, 1),
            &mut store,
            &mut Initializer::new(5),
            "r",
        )
        .unwrap();
        let x = Initializer::new(6).kaiming::<f64>(&[2, 4, 4, 2]);
        let (y, ops) = run(&block, &mut store.clone(), x.clone());
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
        assert_eq!(ops.iter().filter(|&&o| o == OpKind::Conv2d).count(), 1 + 2 * 2);

        let BlockBody::Recurrent { projection, layers } = &block.body else {
            panic!("recurrent body expected");
        };
        let mut sess = Session::new(&mut store, BatchNormMode::Train);
        let xv = sess.graph.constant(x);
        let p = projection.forward(&mut sess, xv).unwrap();
        let mut h = p;
        for layer in layers {
            let h0 = layer.forward(&mut sess, h).unwrap();
            let s = sess.graph.add(h, h0).unwrap();
            h = layer.forward(&mut sess, s).unwrap();
        }
        let out = sess.graph.add(p, h).unwrap();
        assert_eq!(sess.graph.value(out), &y);
    }

    #[test]
    fn zero_psi_gate_halves_skip() {
        let mut store = ParamStore::<f64>::new();
        let gate = AttentionGate::build(&mut store, &mut Initializer::new(2), "att", 4, 4, None);
        let psi_w = store.param_mut(gate.psi.kernel);
        psi_w.value = Tensor::zeros(psi_w.value.shape());
        let mut sess = Session::new(&mut store, BatchNormMode::Train);
        let g = sess.graph.constant(Initializer::new(3).kaiming(&[1, 4, 4, 4]));
        let x = sess.graph.constant(Initializer::new(4).kaiming(&[1, 4, 4, 4]));
        let (y, alpha) = gate.forward(&mut sess, g, x).unwrap();
        assert!(sess.graph.value(alpha).data().iter().all(|&a| a == 0.5));
        let half = sess.graph.value(x).map(|v| v / 2.0);
        assert_eq!(sess.graph.value(y), &half);

        let short = sess.graph.constant(Tensor::zeros(&[1, 2, 2, 4]));
        assert!(matches!(gate.forward(&mut sess, short, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn per_branch_norm_adds_one_norm_per_branch() {
        let mut spec = BlockSpec::mix_conv(2, 6, &[3, 5, 7]).unwrap();
        spec.per_branch_norm = true;
        let mut store = ParamStore::<f64>::new();
        let block = Block::build(spec, &mut store, &mut Initializer::new(0), "p").unwrap();
        assert_eq!(store.running().len(), 6);
        let (y, _) = run(&block, &mut store, Initializer::new(1).kaiming(&[1, 8, 8, 2]));
        assert_eq!(y.shape(), &[1, 8, 8, 6]);
    }
}
