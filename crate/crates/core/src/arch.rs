//! U-Net, R2U-Net and Attention U-Net, each in a plain and a mix flavour.
//!
//! Level `i` of the encoder has `base_width · 2^i` channels. Every level but
//! the deepest is mirrored by a decoder level that upsamples the deeper
//! features (nearest neighbour, then a 3×3 conv stage halving channels),
//! optionally gates the skip features with an attention gate, concatenates
//! `[skip, upsampled]` and applies a block. A 1×1 convolution and a sigmoid
//! produce the mask probabilities.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{BatchNormMode, Var};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionGate, Block, BlockKind, BlockSpec, ConvLayer, ConvStage, Initializer, ParamStore,
    Session, DEFAULT_RECURRENCE_STEPS,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    UNet,
    R2UNet,
    AttUNet,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::UNet, Variant::R2UNet, Variant::AttUNet];

    pub fn key(self) -> &'static str {
        match self {
            Variant::UNet => "unet",
            Variant::R2UNet => "r2unet",
            Variant::AttUNet => "attunet",
        }
    }

    /// Display name as used in result tables, e.g. `MixR2U-Net`.
    pub fn display_name(self, mix: bool) -> String {
        let base = match self {
            Variant::UNet => "U-Net",
            Variant::R2UNet => "R2U-Net",
            Variant::AttUNet => "AttU-Net",
        };
        if mix {
            format!("Mix{base}")
        } else {
            base.to_string()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::config(format!("variant must be unet, r2unet or attunet, got {s:?}")))
    }
}

pub const DEFAULT_MIX_KERNELS: [usize; 4] = [1, 3, 5, 7];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub mix: bool,
    pub depth: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Used when `mix` is set.
    pub kernel_sizes: Vec<usize>,
    /// Used by R2U-Net.
    pub recurrence_steps: usize,
    pub per_branch_norm: bool,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            variant: Variant::UNet,
            mix: false,
            depth: 5,
            base_width: 64,
            in_channels: 1,
            out_channels: 1,
            kernel_sizes: DEFAULT_MIX_KERNELS.to_vec(),
            recurrence_steps: DEFAULT_RECURRENCE_STEPS,
            per_branch_norm: false,
        }
    }
}

impl ArchitectureSpec {
    pub fn new(variant: Variant, mix: bool) -> Self {
        Self {
            variant,
            mix,
            ..Self::default()
        }
    }

    pub fn with_size(mut self, depth: usize, base_width: usize) -> Self {
        self.depth = depth;
        self.base_width = base_width;
        self
    }

    pub fn with_channels(mut self, in_channels: usize, out_channels: usize) -> Self {
        self.in_channels = in_channels;
        self.out_channels = out_channels;
        self
    }

    pub fn with_kernel_sizes(mut self, sizes: &[usize]) -> Self {
        self.kernel_sizes = sizes.to_vec();
        self
    }

    pub fn display_name(&self) -> String {
        self.variant.display_name(self.mix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("in_channels and out_channels must be positive"));
        }
        if self.mix {
            if self.base_width < self.kernel_sizes.len() {
                return Err(Error::config(format!(
                    "base_width {} is smaller than the {} kernel sizes",
                    self.base_width,
                    self.kernel_sizes.len()
                )));
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
        }
        if self.variant == Variant::R2UNet && self.recurrence_steps < 1 {
            return Err(Error::config("recurrence_steps must be at least 1"));
        }
        Ok(())
    }

    /// Channel width of every encoder level.
    pub fn level_widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_width << i).collect()
    }

    /// Spatial dims must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn block_kind(&self) -> BlockKind {
        match (self.variant == Variant::R2UNet, self.mix) {
            (false, false) => BlockKind::Conv,
            (false, true) => BlockKind::MixConv,
            (true, false) => BlockKind::Recurrent,
            (true, true) => BlockKind::MixRecurrent,
        }
    }

    fn block_spec(&self, in_channels: usize, out_channels: usize) -> Result<BlockSpec> {
        let steps = self.recurrence_steps;
        let mut spec = match self.block_kind() {
            BlockKind::Conv => BlockSpec::conv(in_channels, out_channels),
            BlockKind::Recurrent => BlockSpec::recurrent(in_channels, out_channels, steps),
            BlockKind::MixConv => BlockSpec::mix_conv(in_channels, out_channels, &self.kernel_sizes)?,
            BlockKind::MixRecurrent => {
                BlockSpec::mix_recurrent(in_channels, out_channels, &self.kernel_sizes, steps)?
            }
        };
        spec.per_branch_norm = self.per_branch_norm;
        Ok(spec)
    }

    /// Flat `key=value` pairs, the form used by config and checkpoint files.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let sizes: Vec<String> = self.kernel_sizes.iter().map(usize::to_string).collect();
        vec![
            ("variant", self.variant.key().to_string()),
            ("mix", self.mix.to_string()),
            ("depth", self.depth.to_string()),
            ("base_width", self.base_width.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("out_channels", self.out_channels.to_string()),
            ("kernel_sizes", sizes.join(",")),
            ("recurrence_steps", self.recurrence_steps.to_string()),
            ("per_branch_norm", self.per_branch_norm.to_string()),
        ]
    }

    /// Applies one `key=value` pair; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::config(format!("{key}: cannot parse {value:?} as {what}"));
        let int = || value.trim().parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let boolean = || parse_bool(value).ok_or_else(|| bad("a boolean"));
        match key {
            "variant" => self.variant = value.trim().parse()?,
            "mix" => self.mix = boolean()?,
            "depth" => self.depth = int()?,
            "base_width" => self.base_width = int()?,
            "in_channels" => self.in_channels = int()?,
            "out_channels" => self.out_channels = int()?,
            "kernel_sizes" => {
                self.kernel_sizes = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("a comma-separated list of integers"))?
            }
            "recurrence_steps" => self.recurrence_steps = int()?,
            "per_branch_norm" => self.per_branch_norm = boolean()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse_bool(v: &str) -> Option<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Pairs encoder level `level` with the decoder level that consumes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipLink {
    pub encoder_level: usize,
    pub decoder_level: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    encoders: Vec<Block>,
    /// Indexed by decoder level (0 = shallowest).
    ups: Vec<ConvStage>,
    gates: Vec<AttentionGate>,
    decoders: Vec<Block>,
    head: ConvLayer,
    wiring: Vec<SkipLink>,
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    spec: ArchitectureSpec,
    store: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network; identical `(spec, seed)` give
    /// identical parameters.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let widths = spec.level_widths();
        let depth = spec.depth;

        let mut encoders = Vec::with_capacity(depth);
        for (i, &w) in widths.iter().enumerate() {
            let c_in = if i == 0 { spec.in_channels } else { widths[i - 1] };
            let block = Block::build(spec.block_spec(c_in, w)?, &mut store, &mut init, &format!("enc{i}"))?;
            encoders.push(block);
        }

        let mut ups: Vec<Option<ConvStage>> = vec![None; depth - 1];
        let mut gates: Vec<Option<AttentionGate>> = vec![None; depth - 1];
        let mut decoders: Vec<Option<Block>> = vec![None; depth - 1];
        let mut wiring = Vec::with_capacity(depth - 1);
        for i in (0..depth - 1).rev() {
            let (w, deeper) = (widths[i], widths[i + 1]);
            ups[i] = Some(ConvStage::build(
                &mut store,
                &mut init,
                &format!("up{i}"),
                deeper,
                &[3],
                &[w],
                false,
            ));
            if spec.variant == Variant::AttUNet {
                gates[i] = Some(AttentionGate::build(
                    &mut store,
                    &mut init,
                    &format!("att{i}"),
                    w,
                    w,
                    None,
                ));
            }
            decoders[i] = Some(Block::build(
                spec.block_spec(2 * w, w)?,
                &mut store,
                &mut init,
                &format!("dec{i}"),
            )?);
            wiring.push(SkipLink {
                encoder_level: i,
                decoder_level: i,
                channels: w,
            });
        }
        let head = ConvLayer::build(&mut store, &mut init, "head", 1, widths[0], spec.out_channels);

        let layout = Layout {
            encoders,
            ups: ups.into_iter().flatten().collect(),
            gates: gates.into_iter().flatten().collect(),
            decoders: decoders.into_iter().flatten().collect(),
            head,
            wiring,
        };
        Ok(Self {
            spec: spec.clone(),
            store,
            layout,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn wiring(&self) -> &[SkipLink] {
        &self.layout.wiring
    }

    pub fn attention_gate_count(&self) -> usize {
        self.layout.gates.len()
    }

    pub fn head(&self) -> &ConvLayer {
        &self.layout.head
    }

    /// Checks a `(b,h,w,c)` batch shape against the spec.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, h, w, c] = shape else {
            return Err(Error::dim(format!("network input must be (b,h,w,c), got {shape:?}")));
        };
        if c != self.spec.in_channels {
            return Err(Error::dim(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let f = self.spec.spatial_multiple();
        if h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!(
                "input {h}×{w} is not divisible by {f} (depth {}); pad to {}×{}",
                self.spec.depth,
                h.div_ceil(f) * f,
                w.div_ceil(f) * f
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `x` on `sess` and returns the
    /// probability map.
    pub fn forward_in(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.check_input(sess.graph.value(x).shape())?;
        self.layout.forward(sess, x)
    }

    /// Inference without gradient tracking.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let Network { store, layout, .. } = self;
        let mut sess = Session::new(store, mode).track_grads(false);
        let x = sess.graph.constant(batch.clone());
        let y = layout.forward(&mut sess, x)?;
        Ok(sess.graph.value(y).clone())
    }

    /// Train-mode forward pass, mean BCE against `target` and backward pass.
    /// Parameter gradients are left in the store; returns the loss.
    pub fn loss_and_grads(&mut self, batch: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        self.check_input(batch.shape())?;
        let Network { store, layout, .. } = self;
        let mut sess = Session::new(store, BatchNormMode::Train);
        let x = sess.graph.constant(batch.clone());
        let y = layout.forward(&mut sess, x)?;
        let loss = sess.graph.bce_loss(y, target)?;
        let value = sess.graph.value(loss).data()[0];
        sess.backward(loss)?;
        Ok(value)
    }
}

impl Layout {
    fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x;
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 {
                h = sess.graph.max_pool2(h)?;
            }
            h = enc.forward(sess, h)?;
            skips.push(h);
        }
        for i in (0..self.decoders.len()).rev() {
            let up = sess.graph.upsample2(h)?;
            let up = self.ups[i].forward(sess, up)?;
            let skip = match self.gates.get(i) {
                Some(gate) => gate.forward(sess, up, skips[i])?.0,
                None => skips[i],
            };
            let cat = sess.graph.concat_channels(&[skip, up])?;
            h = self.decoders[i].forward(sess, cat)?;
        }
        let logits = self.head.forward(sess, h)?;
        sess.graph.sigmoid(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_widths() {
        let spec = ArchitectureSpec::default();
        assert_eq!(spec.level_widths(), vec![64, 128, 256, 512, 1024]);
    }

    #[test]
    fn gate_count_and_wiring() {
        let spec = ArchitectureSpec::new(Variant::AttUNet, true).with_size(4, 4);
        let net = Network::<f32>::build(&spec, 0).unwrap();
        assert_eq!(net.attention_gate_count(), 3);
        let links: Vec<(usize, usize, usize)> = net
            .wiring()
            .iter()
            .map(|l| (l.encoder_level, l.decoder_level, l.channels))
            .collect();
        assert_eq!(links, vec![(2, 2, 16), (1, 1, 8), (0, 0, 4)]);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let err = Network::<f32>::build(&ArchitectureSpec::default().with_size(1, 8), 0).unwrap_err();
        assert!(err.to_string().contains("depth"));
        let spec = ArchitectureSpec::new(Variant::UNet, true).with_size(3, 2);
        assert!(Network::<f32>::build(&spec, 0).unwrap_err().to_string().contains("base_width"));
        assert!("vnet".parse::<Variant>().is_err());
    }

    #[test]
    fn indivisible_input_suggests_padding() {
        let spec = ArchitectureSpec::default().with_size(3, 4);
        let mut net = Network::<f32>::build(&spec, 0).unwrap();
        let err = net
            .forward(&Tensor::zeros(&[1, 10, 12, 1]), BatchNormMode::Eval)
            .unwrap_err();
        assert!(err.to_string().contains("pad to 12×12"), "{err}");
    }

    #[test]
    fn zero_head_gives_one_half() {
        let spec = ArchitectureSpec::new(Variant::R2UNet, true).with_size(2, 4);
        let mut net = Network::<f32>::build(&spec, 3).unwrap();
        let head = net.head().kernel;
        let p = net.store_mut().param_mut(head);
        p.value = Tensor::zeros(p.value.shape());
        let y = net
            .forward(&Tensor::full(&[1, 4, 4, 1], 0.3), BatchNormMode::Eval)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn spec_pairs_round_trip() {
        let mut spec = ArchitectureSpec::new(Variant::AttUNet, true).with_kernel_sizes(&[3, 5, 7]);
        spec.recurrence_steps = 3;
        let mut back = ArchitectureSpec::default();
        for (k, v) in spec.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, spec);
        assert!(!back.set("lr", "0.1").unwrap());
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ArchitectureSpec::new(Variant::UNet, true).with_size(3, 4);
        let a = Network::<f32>::build(&spec, 11).unwrap();
        let b = Network::<f32>::build(&spec, 11).unwrap();
        let c = Network::<f32>::build(&spec, 12).unwrap();
        assert_eq!(a.store(), b.store());
        assert_ne!(a.store(), c.store());
    }
}
