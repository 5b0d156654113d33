//! The residual channel attention network (RCAN) for joint
//! super-resolution and colour prediction of mosaic inputs, and its
//! texture-sensitive extension (TSRCAN): a shallow texture branch applied
//! to the intermediate RGB prediction whose activation maps are fused
//! back through a final convolution.
//!
//! Layer inventory (all convs carry a bias, all 3x3 convs use pad 1):
//!
//! - head: two 3x3 convs, `in -> c` then `c -> c`, no nonlinearity between;
//! - body: `g` residual groups, each `b` residual channel attention
//!   blocks followed by one 3x3 conv with a group-level skip, plus a long
//!   skip over the whole body;
//! - RCAB: `y = x + CA(conv(relu(conv(x))))` where the channel attention
//!   squeezes with global average pooling, bottlenecks `c -> c/r -> c`
//!   through 1x1 convs, and gates channels with a sigmoid;
//! - tail: one 3x3 conv producing 3 channels; compact mode first
//!   upsamples x4 with a sub-pixel conv (`c -> 3*16` channels, then
//!   depth-to-space);
//! - texture branch: 7x7 stride-2 conv (3 -> 64), batch norm, ReLU,
//!   3x3 stride-2 max pool, one residual block (two 3x3 convs with batch
//!   norm/ReLU and an identity skip), then one transposed conv
//!   (64 -> k, kernel 8, stride 4, pad 2) restoring the input extent for
//!   dims divisible by 4;
//! - fusion: 3x3 conv `(k+3) -> 3` over texture maps concatenated with
//!   the intermediate RGB.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{
    conv2d_output_dim, conv_transpose2d_output_dim, BatchNormState, BnMode, Tensor,
};

/// Texture-branch stem width (the first layers it mirrors are 64-wide).
pub const TN_STEM_CHANNELS: usize = 64;
/// Texture-branch transposed-conv geometry: kernel 8, stride 4, pad 2
/// restores the pre-branch extent for dims divisible by 4.
pub const TN_DECONV_KERNEL: usize = 8;
pub const TN_DECONV_STRIDE: usize = 4;
pub const TN_DECONV_PAD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// `[16, H, W]` zero-padded tensors; spatial dims preserved end to end.
    ZeroPadded,
    /// `[16, H/4, W/4]` compact tensors; the net upscales x4 before the tail.
    Compact,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputMode::ZeroPadded => write!(f, "zero_padded"),
            InputMode::Compact => write!(f, "compact"),
        }
    }
}

/// Which network a parameter store holds: the RCAN alone, or the full
/// texture-sensitive model. With equal seeds the RCAN parameters of both
/// are bit-identical (texture parameters are drawn afterwards).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Rcan,
    Tsrcan,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Rcan => write!(f, "rcan"),
            Arch::Tsrcan => write!(f, "tsrcan"),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// residual groups (g)
    pub groups: usize,
    /// residual channel attention blocks per group (b)
    pub blocks_per_group: usize,
    /// feature channels (c)
    pub channels: usize,
    /// channel-attention bottleneck reduction (r)
    pub reduction: usize,
    /// texture-branch output channels (k)
    pub texture_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: InputMode,
    pub compact_upscale: usize,
}

impl ModelConfig {
    /// Full-scale configuration: g=5, b=3, c=64, r=16, k=256.
    pub fn paper() -> Self {
        ModelConfig {
            arch: Arch::Tsrcan,
            groups: 5,
            blocks_per_group: 3,
            channels: 64,
            reduction: 16,
            texture_channels: 256,
            in_channels: 16,
            out_channels: 3,
            mode: InputMode::ZeroPadded,
            compact_upscale: 4,
        }
    }

    /// Desk-scale configuration: g=2, b=1, c=8, r=4, k=16.
    pub fn tiny() -> Self {
        ModelConfig {
            arch: Arch::Tsrcan,
            groups: 2,
            blocks_per_group: 1,
            channels: 8,
            reduction: 4,
            texture_channels: 16,
            in_channels: 16,
            out_channels: 3,
            mode: InputMode::ZeroPadded,
            compact_upscale: 4,
        }
    }

    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_mode(mut self, mode: InputMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 || self.blocks_per_group < 1 || self.texture_channels < 1 {
            return Err(Error::Config("g, b, k must all be >= 1".into()));
        }
        if self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "channels {} must be divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.out_channels != 3 {
            return Err(Error::Config("output is an RGB image (3 channels)".into()));
        }
        if self.mode == InputMode::Compact && self.compact_upscale != 4 {
            return Err(Error::Config("compact mode upscales by the 4x4 block size".into()));
        }
        Ok(())
    }
}

/// Ordered map of named parameter tensors plus the batch-norm running
/// statistics. Iteration order is creation order, which is fixed by the
/// architecture, so optimizer updates and checkpoints are deterministic.
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<f32>>,
    bn_names: Vec<String>,
    bn_states: HashMap<String, Mutex<BatchNormState<f32>>>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            tensors: Vec::new(),
            bn_names: Vec::new(),
            bn_states: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{}`", name)));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    fn insert_bn(&mut self, name: &str, channels: usize) -> Result<()> {
        if self.bn_states.contains_key(name) {
            return Err(Error::Config(format!("duplicate batch-norm name `{}`", name)));
        }
        self.bn_names.push(name.to_string());
        self.bn_states
            .insert(name.to_string(), Mutex::new(BatchNormState::new(channels)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", name)))
    }

    /// Replaces the payload of a parameter, keeping its gradient slot.
    pub fn set_data(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", name)))?;
        if data.len() != self.tensors[i].numel() {
            return Err(Error::dim(
                "set_data",
                format!("parameter `{}` has {} elements, got {}", name, self.tensors[i].numel(), data.len()),
            ));
        }
        self.tensors[i].data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
    }

    pub fn bn_state(&self, name: &str) -> Result<&Mutex<BatchNormState<f32>>> {
        self.bn_states
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown batch-norm state `{}`", name)))
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in &self.tensors {
            t.zero_grad();
        }
    }

    #[cfg(test)]
    pub(crate) fn empty_for_tests() -> Self {
        ParamStore::new()
    }

    #[cfg(test)]
    pub(crate) fn insert_for_tests(&mut self, name: &str, t: Tensor<f32>) {
        self.insert(name, t).expect("unique test parameter names");
    }

    /// Bit-exact copy with fresh gradient slots and copied running stats.
    pub fn deep_clone(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::param(t.shape().to_vec(), t.data().to_vec()).expect("same shape"))
                .expect("unique names");
        }
        for name in &self.bn_names {
            let st = self.bn_states[name].lock().expect("bn state poisoned").clone();
            out.bn_names.push(name.clone());
            out.bn_states.insert(name.clone(), Mutex::new(st));
        }
        out
    }
}

/// Whether a forward pass records gradients and updates batch-norm
/// running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

fn fetch(store: &ParamStore, name: &str, phase: Phase) -> Result<Tensor<f32>> {
    let t = store.get(name)?;
    Ok(match phase {
        Phase::Train => t.clone(),
        Phase::Eval => t.detach(),
    })
}

struct Init {
    rng: ChaCha20Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init { rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// He fan-in normal weights, zero bias.
    fn conv(&mut self, store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
        let fan_in = cin * k * k;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
        let w: Vec<f32> = (0..cout * cin * k * k)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        store.insert(&format!("{}.weight", name), Tensor::param(vec![cout, cin, k, k], w)?)?;
        store.insert(&format!("{}.bias", name), Tensor::param(vec![cout], vec![0.0; cout])?)?;
        Ok(())
    }

    /// Transposed conv: weight layout `[cin, cout, k, k]`, fan-in on the
    /// input side.
    fn deconv(&mut self, store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let fan_in = cin * k * k;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
        let w: Vec<f32> = (0..cin * cout * k * k)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        store.insert(&format!("{}.weight", name), Tensor::param(vec![cin, cout, k, k], w)?)?;
        store.insert(&format!("{}.bias", name), Tensor::param(vec![cout], vec![0.0; cout])?)?;
        Ok(())
    }

    fn batch_norm(&mut self, store: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
        store.insert(&format!("{}.gamma", name), Tensor::param(vec![channels], vec![1.0; channels])?)?;
        store.insert(&format!("{}.beta", name), Tensor::param(vec![channels], vec![0.0; channels])?)?;
        store.insert_bn(name, channels)
    }
}

/// Builds a freshly initialized parameter store for `config`.
///
/// Initialization is He fan-in normal from a seeded generator with zero
/// biases; the same seed yields a bit-identical store. The RCAN subset is
/// drawn first, so an [`Arch::Rcan`] store and an [`Arch::Tsrcan`] store
/// with the same seed share identical RCAN parameters.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let c = config.channels;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);

    init.conv(&mut store, "head.conv1", c, config.in_channels, 3)?;
    init.conv(&mut store, "head.conv2", c, c, 3)?;
    for g in 0..config.groups {
        for b in 0..config.blocks_per_group {
            let p = format!("body.g{}.b{}", g, b);
            init.conv(&mut store, &format!("{}.conv1", p), c, c, 3)?;
            init.conv(&mut store, &format!("{}.conv2", p), c, c, 3)?;
            init.conv(&mut store, &format!("{}.ca.reduce", p), c / config.reduction, c, 1)?;
            init.conv(&mut store, &format!("{}.ca.expand", p), c, c / config.reduction, 1)?;
        }
        init.conv(&mut store, &format!("body.g{}.conv", g), c, c, 3)?;
    }
    match config.mode {
        InputMode::ZeroPadded => {
            init.conv(&mut store, "tail.conv", config.out_channels, c, 3)?;
        }
        InputMode::Compact => {
            let u = config.compact_upscale;
            init.conv(&mut store, "up.conv", config.out_channels * u * u, c, 3)?;
            init.conv(&mut store, "tail.conv", config.out_channels, config.out_channels, 3)?;
        }
    }

    if config.arch == Arch::Tsrcan {
        init.conv(&mut store, "tn.stem.conv", TN_STEM_CHANNELS, config.out_channels, 7)?;
        init.batch_norm(&mut store, "tn.stem.bn", TN_STEM_CHANNELS)?;
        init.conv(&mut store, "tn.res.conv1", TN_STEM_CHANNELS, TN_STEM_CHANNELS, 3)?;
        init.batch_norm(&mut store, "tn.res.bn1", TN_STEM_CHANNELS)?;
        init.conv(&mut store, "tn.res.conv2", TN_STEM_CHANNELS, TN_STEM_CHANNELS, 3)?;
        init.batch_norm(&mut store, "tn.res.bn2", TN_STEM_CHANNELS)?;
        init.deconv(&mut store, "tn.deconv", TN_STEM_CHANNELS, config.texture_channels, TN_DECONV_KERNEL)?;
        init.conv(&mut store, "fusion.conv", config.out_channels, config.texture_channels + config.out_channels, 3)?;
    }
    Ok(store)
}

fn conv_layer(x: &Tensor<f32>, store: &ParamStore, name: &str, phase: Phase, stride: usize, pad: usize) -> Result<Tensor<f32>> {
    x.conv2d(
        &fetch(store, &format!("{}.weight", name), phase)?,
        &fetch(store, &format!("{}.bias", name), phase)?,
        stride,
        pad,
    )
}

fn bn_layer(x: &Tensor<f32>, store: &ParamStore, name: &str, phase: Phase) -> Result<Tensor<f32>> {
    let gamma = fetch(store, &format!("{}.gamma", name), phase)?;
    let beta = fetch(store, &format!("{}.beta", name), phase)?;
    let mut state = store.bn_state(name)?.lock().expect("bn state poisoned");
    let mode = match phase {
        Phase::Train => BnMode::Train,
        Phase::Eval => BnMode::Eval,
    };
    x.batch_norm2d(&gamma, &beta, &mut state, mode)
}

/// One residual channel attention block at `prefix`:
/// `y = x + CA(conv2(relu(conv1(x))))`.
pub fn rcab_forward(x: &Tensor<f32>, store: &ParamStore, prefix: &str, phase: Phase) -> Result<Tensor<f32>> {
    let u = conv_layer(x, store, &format!("{}.conv1", prefix), phase, 1, 1)?.relu()?;
    let u = conv_layer(&u, store, &format!("{}.conv2", prefix), phase, 1, 1)?;
    let squeezed = u.global_avg_pool()?;
    let gate = conv_layer(&squeezed, store, &format!("{}.ca.reduce", prefix), phase, 1, 0)?
        .relu()?;
    let gate = conv_layer(&gate, store, &format!("{}.ca.expand", prefix), phase, 1, 0)?
        .sigmoid()?;
    let attended = u.scale_channels(&gate)?;
    x.add(&attended)
}

/// The RCAN: head, residual groups with group skips and a long skip, and
/// the reconstruction tail (sub-pixel x4 upsample first in compact mode).
pub fn rcan_forward(
    x: &Tensor<f32>,
    store: &ParamStore,
    config: &ModelConfig,
    phase: Phase,
) -> Result<Tensor<f32>> {
    match x.shape() {
        [_, cin, _, _] if *cin == config.in_channels => {}
        _ => {
            return Err(Error::dim(
                "rcan_forward",
                format!("expected [N, {}, H, W], got {:?}", config.in_channels, x.shape()),
            ))
        }
    }
    let head = conv_layer(x, store, "head.conv1", phase, 1, 1)?;
    let head = conv_layer(&head, store, "head.conv2", phase, 1, 1)?;

    let mut feat = head.clone();
    for g in 0..config.groups {
        let group_in = feat.clone();
        for b in 0..config.blocks_per_group {
            feat = rcab_forward(&feat, store, &format!("body.g{}.b{}", g, b), phase)?;
        }
        feat = conv_layer(&feat, store, &format!("body.g{}.conv", g), phase, 1, 1)?;
        feat = group_in.add(&feat)?;
    }
    let body = head.add(&feat)?;

    match config.mode {
        InputMode::ZeroPadded => conv_layer(&body, store, "tail.conv", phase, 1, 1),
        InputMode::Compact => {
            let up = conv_layer(&body, store, "up.conv", phase, 1, 1)?
                .pixel_shuffle(config.compact_upscale)?;
            conv_layer(&up, store, "tail.conv", phase, 1, 1)
        }
    }
}

/// The texture branch: stride-2 stem, stride-2 max pool, one residual
/// block, and a transposed conv back to the input extent with `k`
/// channels. Requires spatial dims divisible by 4.
pub fn texture_forward(
    rgb: &Tensor<f32>,
    store: &ParamStore,
    config: &ModelConfig,
    phase: Phase,
) -> Result<Tensor<f32>> {
    let (h, w) = match *rgb.shape() {
        [_, c, h, w] if c == config.out_channels => (h, w),
        _ => {
            return Err(Error::dim(
                "texture_forward",
                format!("expected [N, {}, H, W], got {:?}", config.out_channels, rgb.shape()),
            ))
        }
    };
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::dim(
            "texture_forward",
            format!("spatial dims {}x{} must be divisible by 4", h, w),
        ));
    }
    let stem = conv_layer(rgb, store, "tn.stem.conv", phase, 2, 3)?;
    let stem = bn_layer(&stem, store, "tn.stem.bn", phase)?.relu()?;
    let pooled = stem.max_pool2d(3, 2, 1)?;

    let r = conv_layer(&pooled, store, "tn.res.conv1", phase, 1, 1)?;
    let r = bn_layer(&r, store, "tn.res.bn1", phase)?.relu()?;
    let r = conv_layer(&r, store, "tn.res.conv2", phase, 1, 1)?;
    let r = bn_layer(&r, store, "tn.res.bn2", phase)?;
    let block = pooled.add(&r)?.relu()?;

    block.conv_transpose2d(
        &fetch(store, "tn.deconv.weight", phase)?,
        &fetch(store, "tn.deconv.bias", phase)?,
        TN_DECONV_STRIDE,
        TN_DECONV_PAD,
    )
}

/// Output bundle of the full model.
pub struct TsrcanOutput {
    /// Intermediate RGB prediction (the RCAN output).
    pub sr_prime: Tensor<f32>,
    /// Final RGB prediction after texture fusion.
    pub sr: Tensor<f32>,
    /// Texture activation maps (`k` channels at output resolution).
    pub texture: Tensor<f32>,
}

/// Full model: `sr = CONV(TN(rcan(x)) (+) rcan(x))` where `(+)` is
/// channel concatenation. Returns the intermediate prediction for the
/// loss and the texture maps for inspection.
pub fn tsrcan_forward(
    x: &Tensor<f32>,
    store: &ParamStore,
    config: &ModelConfig,
    phase: Phase,
) -> Result<TsrcanOutput> {
    if config.arch != Arch::Tsrcan {
        return Err(Error::Config("store was built without the texture branch".into()));
    }
    let sr_prime = rcan_forward(x, store, config, phase)?;
    let texture = texture_forward(&sr_prime, store, config, phase)?;
    let fused = Tensor::concat_channels(&texture, &sr_prime)?;
    let sr = conv_layer(&fused, store, "fusion.conv", phase, 1, 1)?;
    Ok(TsrcanOutput { sr_prime, sr, texture })
}

/// Composite training loss: the smooth-L1 of both predictions against the
/// target, summed. Gradients flow through both branches.
pub fn loss(sr_prime: &Tensor<f32>, sr: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>> {
    sr_prime.smooth_l1(target)?.add(&sr.smooth_l1(target)?)
}

/// Symbolically traced shapes of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: [usize; 3],
    pub sr: [usize; 3],
    pub texture: Option<[usize; 3]>,
}

/// Computes the output shapes for an `[in_channels, h, w]` input without
/// running the network, using the same dimension formulas as the ops.
/// Errors when the texture branch cannot restore the spatial extent.
pub fn forward_shapes(config: &ModelConfig, h: usize, w: usize) -> Result<ShapeTrace> {
    config.validate()?;
    let (oh, ow) = match config.mode {
        InputMode::ZeroPadded => (h, w),
        InputMode::Compact => (h * config.compact_upscale, w * config.compact_upscale),
    };
    let texture = match config.arch {
        Arch::Rcan => None,
        Arch::Tsrcan => {
            let dim_err = || Error::dim("forward_shapes", format!("texture branch cannot process {}x{}", oh, ow));
            let trace = |d: usize| -> Result<usize> {
                let stem = conv2d_output_dim(d, 7, 2, 3).ok_or_else(dim_err)?;
                let pooled = conv2d_output_dim(stem, 3, 2, 1).ok_or_else(dim_err)?;
                conv_transpose2d_output_dim(pooled, TN_DECONV_KERNEL, TN_DECONV_STRIDE, TN_DECONV_PAD)
                    .ok_or_else(dim_err)
            };
            let (th, tw) = (trace(oh)?, trace(ow)?);
            if (th, tw) != (oh, ow) {
                return Err(Error::dim(
                    "forward_shapes",
                    format!("texture branch restores {}x{} from {}x{}; dims must be divisible by 4", th, tw, oh, ow),
                ));
            }
            Some([config.texture_channels, oh, ow])
        }
    };
    Ok(ShapeTrace {
        input: [config.in_channels, h, w],
        sr: [config.out_channels, oh, ow],
        texture,
    })
}

/// Closed-form parameter count of the layer inventory for `config`
/// (convs count `cout*cin*k*k + cout`, batch norms `2*channels`).
pub fn expected_param_count(config: &ModelConfig) -> usize {
    let c = config.channels;
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
    let rcab = 2 * conv(c, c, 3) + conv(c / config.reduction, c, 1) + conv(c, c / config.reduction, 1);
    let group = config.blocks_per_group * rcab + conv(c, c, 3);
    let mut total = conv(c, config.in_channels, 3) + conv(c, c, 3); // head
    total += config.groups * group;
    total += match config.mode {
        InputMode::ZeroPadded => conv(config.out_channels, c, 3),
        InputMode::Compact => {
            let u = config.compact_upscale;
            conv(config.out_channels * u * u, c, 3) + conv(config.out_channels, config.out_channels, 3)
        }
    };
    if config.arch == Arch::Tsrcan {
        let s = TN_STEM_CHANNELS;
        total += conv(s, config.out_channels, 7) + 2 * s; // stem + bn
        total += 2 * (conv(s, s, 3) + 2 * s); // residual block
        total += s * config.texture_channels * TN_DECONV_KERNEL * TN_DECONV_KERNEL + config.texture_channels;
        total += conv(config.out_channels, config.texture_channels + config.out_channels, 3);
    }
    total
}

const MANIFEST_NAME: &str = "manifest.txt";

/// Saves `store` as a checkpoint directory: one portable tensor file per
/// parameter and per running statistic, plus a key=value manifest with
/// the configuration and seed. The reload is bit-exact.
pub fn save_checkpoint(dir: impl AsRef<Path>, store: &ParamStore, config: &ModelConfig, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("params"))?;
    for (name, t) in store.iter() {
        io::write_tensor(dir.join("params").join(format!("{}.msrt", name)), &t.detach())?;
    }
    if !store.bn_names().is_empty() {
        std::fs::create_dir_all(dir.join("bn"))?;
        for name in store.bn_names() {
            let st = store.bn_state(name)?.lock().expect("bn state poisoned");
            let c = st.running_mean.len();
            io::write_tensor(
                dir.join("bn").join(format!("{}.mean.msrt", name)),
                &Tensor::from_vec(vec![c], st.running_mean.clone())?,
            )?;
            io::write_tensor(
                dir.join("bn").join(format!("{}.var.msrt", name)),
                &Tensor::from_vec(vec![c], st.running_var.clone())?,
            )?;
        }
    }
    let manifest = format!(
        "format=snapsr-checkpoint-v1\narch={}\ngroups={}\nblocks_per_group={}\nchannels={}\nreduction={}\ntexture_channels={}\nin_channels={}\nout_channels={}\nmode={}\ncompact_upscale={}\nseed={}\n",
        config.arch,
        config.groups,
        config.blocks_per_group,
        config.channels,
        config.reduction,
        config.texture_channels,
        config.in_channels,
        config.out_channels,
        config.mode,
        config.compact_upscale,
        seed,
    );
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<(ModelConfig, u64)> {
    let text = std::fs::read_to_string(path)?;
    let mut kv = HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let origin = path.display().to_string();
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::Parse { path: origin.clone(), msg: format!("missing key `{}`", k) })
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|e| Error::Parse { path: origin.clone(), msg: format!("{}: {}", k, e) })
    };
    if get("format")? != "snapsr-checkpoint-v1" {
        return Err(Error::Parse { path: origin.clone(), msg: "unknown checkpoint format".into() });
    }
    let arch = match get("arch")?.as_str() {
        "rcan" => Arch::Rcan,
        "tsrcan" => Arch::Tsrcan,
        other => return Err(Error::Parse { path: origin.clone(), msg: format!("unknown arch `{}`", other) }),
    };
    let mode = match get("mode")?.as_str() {
        "zero_padded" => InputMode::ZeroPadded,
        "compact" => InputMode::Compact,
        other => return Err(Error::Parse { path: origin.clone(), msg: format!("unknown mode `{}`", other) }),
    };
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|e| Error::Parse { path: origin.clone(), msg: format!("seed: {}", e) })?;
    Ok((
        ModelConfig {
            arch,
            groups: num("groups")?,
            blocks_per_group: num("blocks_per_group")?,
            channels: num("channels")?,
            reduction: num("reduction")?,
            texture_channels: num("texture_channels")?,
            in_channels: num("in_channels")?,
            out_channels: num("out_channels")?,
            mode,
            compact_upscale: num("compact_upscale")?,
        },
        seed,
    ))
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ParamStore, ModelConfig, u64)> {
    let dir = dir.as_ref();
    let (config, seed) = parse_manifest(&dir.join(MANIFEST_NAME))?;
    // Rebuild the architecture for names/shapes, then overwrite payloads.
    let mut store = build(&config, seed)?;
    for name in store.names.clone() {
        let t = io::read_tensor(dir.join("params").join(format!("{}.msrt", name)))?;
        let expected = store.get(&name)?.shape().to_vec();
        if t.shape() != expected {
            return Err(Error::Parse {
                path: dir.display().to_string(),
                msg: format!("parameter `{}` has shape {:?}, expected {:?}", name, t.shape(), expected),
            });
        }
        store.set_data(&name, t.data().to_vec())?;
    }
    for name in store.bn_names.clone() {
        let mean = io::read_tensor(dir.join("bn").join(format!("{}.mean.msrt", name)))?;
        let var = io::read_tensor(dir.join("bn").join(format!("{}.var.msrt", name)))?;
        let mut st = store.bn_state(&name)?.lock().expect("bn state poisoned");
        if mean.numel() != st.running_mean.len() || var.numel() != st.running_var.len() {
            return Err(Error::Parse {
                path: dir.display().to_string(),
                msg: format!("batch-norm `{}` stats have wrong length", name),
            });
        }
        st.running_mean.copy_from_slice(mean.data());
        st.running_var.copy_from_slice(var.data());
    }
    Ok((store, config, seed))
}

/// Spot-checks `coords` random parameter coordinates of the tiny model's
/// end-to-end gradient against central finite differences at `f32`.
/// Coordinates whose analytic gradient is below `1e-3` are skipped as
/// under the `f32` difference-quotient noise floor (the per-op `f64`
/// oracle covers zero-gradient correctness).
pub fn gradcheck_tiny(seed: u64, coords: usize) -> Result<crate::tensor::gradcheck::OpCheck> {
    use rand::Rng;
    let config = ModelConfig::tiny();
    let store = build(&config, seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (h, w) = (16usize, 16usize);
    let x = Tensor::from_vec(
        vec![1, config.in_channels, h, w],
        (0..config.in_channels * h * w)
            .map(|_| rng.random_range(0.0..1.0f32))
            .collect(),
    )?;
    let target = Tensor::from_vec(
        vec![1, 3, h, w],
        (0..3 * h * w).map(|_| rng.random_range(0.0..1.0f32)).collect(),
    )?;

    let eval_loss = |store: &ParamStore| -> Result<f64> {
        let out = tsrcan_forward(&x, store, &config, Phase::Train)?;
        Ok(loss(&out.sr_prime.detach(), &out.sr.detach(), &target)?.item()? as f64)
    };

    store.zero_grads();
    let out = tsrcan_forward(&x, &store, &config, Phase::Train)?;
    loss(&out.sr_prime, &out.sr, &target)?.backward()?;

    let names: Vec<String> = store.names().to_vec();
    let step = 3e-3f32;
    let mut check = crate::tensor::gradcheck::OpCheck {
        name: "tsrcan-tiny end-to-end".into(),
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut shadow = store.deep_clone();
    let mut attempts = 0;
    while check.checked < coords && attempts < coords * 50 {
        attempts += 1;
        let pi = rng.random_range(0..names.len());
        let name = &names[pi];
        let grad = store.get(name)?.grad_or_zeros();
        let ci = rng.random_range(0..grad.len());
        let analytic = grad[ci] as f64;
        if analytic.abs() < 1e-3 {
            continue;
        }
        let base = store.get(name)?.data().to_vec();
        let mut perturbed = base.clone();
        perturbed[ci] = base[ci] + step;
        shadow.set_data(name, perturbed.clone())?;
        let up = eval_loss(&shadow)?;
        perturbed[ci] = base[ci] - step;
        shadow.set_data(name, perturbed)?;
        let down = eval_loss(&shadow)?;
        shadow.set_data(name, base)?;
        let numeric = (up - down) / (2.0 * step as f64);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / denom;
        check.checked += 1;
        if rel > check.max_rel_err {
            check.max_rel_err = rel;
            check.worst = Some((pi, ci, analytic, numeric));
        }
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic_in_seed() {
        let config = ModelConfig::tiny();
        let a = build(&config, 42).unwrap();
        let b = build(&config, 42).unwrap();
        let c = build(&config, 43).unwrap();
        assert_eq!(a.names(), b.names());
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let differs = a
            .iter()
            .zip(c.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn rcan_subset_shared_across_archs() {
        let tsrcan = build(&ModelConfig::tiny(), 11).unwrap();
        let rcan = build(&ModelConfig::tiny().with_arch(Arch::Rcan), 11).unwrap();
        for (name, t) in rcan.iter() {
            assert_eq!(t.data(), tsrcan.get(name).unwrap().data(), "{}", name);
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for config in [
            ModelConfig::tiny(),
            ModelConfig::tiny().with_arch(Arch::Rcan),
            ModelConfig::tiny().with_mode(InputMode::Compact),
            ModelConfig::paper(),
        ] {
            let store = build(&config, 0).unwrap();
            assert_eq!(store.param_count(), expected_param_count(&config), "{:?}", config);
        }
    }

    #[test]
    fn paper_param_count_frozen() {
        // Closed-form sum over the layer inventory, computed once and
        // pinned: changing the architecture must break this test.
        assert_eq!(expected_param_count(&ModelConfig::paper()), 2_488_659);
    }

    #[test]
    fn minimal_config_builds_and_runs() {
        let config = ModelConfig {
            groups: 1,
            blocks_per_group: 1,
            ..ModelConfig::tiny()
        };
        let store = build(&config, 5).unwrap();
        let x = Tensor::zeros(vec![1, 16, 8, 8]);
        let out = tsrcan_forward(&x, &store, &config, Phase::Eval).unwrap();
        assert_eq!(out.sr.shape(), [1, 3, 8, 8]);
    }

    #[test]
    fn rcab_zero_weights_is_identity() {
        let config = ModelConfig::tiny();
        let mut store = build(&config, 3).unwrap();
        for name in ["body.g0.b0.conv1", "body.g0.b0.conv2", "body.g0.b0.ca.reduce", "body.g0.b0.ca.expand"] {
            let wname = format!("{}.weight", name);
            let n = store.get(&wname).unwrap().numel();
            store.set_data(&wname, vec![0.0; n]).unwrap();
        }
        let x = Tensor::from_vec(
            vec![1, 8, 4, 4],
            (0..128).map(|v| (v as f32).sin()).collect(),
        )
        .unwrap();
        let y = rcab_forward(&x, &store, "body.g0.b0", Phase::Eval).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rcab_preserves_shape() {
        let config = ModelConfig::tiny();
        let store = build(&config, 9).unwrap();
        let x = Tensor::from_vec(vec![2, 8, 6, 5], (0..480).map(|v| v as f32 * 0.01).collect()).unwrap();
        let y = rcab_forward(&x, &store, "body.g1.b0", Phase::Eval).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn channel_uniform_input_gets_uniform_attention() {
        // With per-channel-constant activations, channel attention weights
        // depend only on the channel, and the block output stays
        // per-channel constant.
        let config = ModelConfig::tiny();
        let store = build(&config, 21).unwrap();
        let n = 8usize; // spatial side
        let mut data = vec![0f32; 8 * n * n];
        for c in 0..8 {
            for p in 0..n * n {
                data[c * n * n + p] = 0.1 + c as f32 * 0.07;
            }
        }
        let x = Tensor::from_vec(vec![1, 8, n, n], data).unwrap();
        let y = rcab_forward(&x, &store, "body.g0.b0", Phase::Eval).unwrap();
        // Zero padding contaminates a 2-pixel rim through the two stacked
        // 3x3 convs; the clean interior must stay per-channel constant.
        for c in 0..8 {
            let plane = &y.data()[c * n * n..(c + 1) * n * n];
            let reference = plane[2 * n + 2];
            for yy in 2..n - 2 {
                for xx in 2..n - 2 {
                    assert!((plane[yy * n + xx] - reference).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_padded_shape_contract() {
        let config = ModelConfig::tiny();
        let store = build(&config, 1).unwrap();
        let x = Tensor::zeros(vec![1, 16, 32, 64]);
        let y = rcan_forward(&x, &store, &config, Phase::Eval).unwrap();
        assert_eq!(y.shape(), [1, 3, 32, 64]);
    }

    #[test]
    fn compact_mode_upscales_four_x() {
        let config = ModelConfig::tiny().with_mode(InputMode::Compact);
        let store = build(&config, 1).unwrap();
        let x = Tensor::zeros(vec![1, 16, 8, 16]);
        let y = rcan_forward(&x, &store, &config, Phase::Eval).unwrap();
        assert_eq!(y.shape(), [1, 3, 32, 64]);
    }

    #[test]
    fn texture_branch_restores_dims() {
        let config = ModelConfig::tiny();
        let store = build(&config, 2).unwrap();
        for (h, w) in [(16usize, 16usize), (32, 64), (24, 40)] {
            let rgb = Tensor::zeros(vec![1, 3, h, w]);
            let t = texture_forward(&rgb, &store, &config, Phase::Eval).unwrap();
            assert_eq!(t.shape(), [1, config.texture_channels, h, w]);
        }
        // non-multiple-of-4 dims are rejected
        let rgb = Tensor::zeros(vec![1, 3, 18, 16]);
        assert!(texture_forward(&rgb, &store, &config, Phase::Eval).is_err());
    }

    #[test]
    fn forward_shapes_paper_scale() {
        let trace = forward_shapes(&ModelConfig::paper(), 576, 1152).unwrap();
        assert_eq!(trace.input, [16, 576, 1152]);
        assert_eq!(trace.sr, [3, 576, 1152]);
        assert_eq!(trace.texture, Some([256, 576, 1152]));

        let compact = forward_shapes(&ModelConfig::paper().with_mode(InputMode::Compact), 144, 288).unwrap();
        assert_eq!(compact.sr, [3, 576, 1152]);
    }

    #[test]
    fn fusion_passthrough_reproduces_sr_prime() {
        let config = ModelConfig::tiny();
        let mut store = build(&config, 17).unwrap();
        let k = config.texture_channels;
        // fusion kernel: centre tap 1 on each sr' channel, zero elsewhere
        let mut wf = vec![0f32; 3 * (k + 3) * 9];
        for c in 0..3 {
            wf[(c * (k + 3) + k + c) * 9 + 4] = 1.0;
        }
        store.set_data("fusion.conv.weight", wf).unwrap();
        store.set_data("fusion.conv.bias", vec![0.0; 3]).unwrap();
        let x = Tensor::from_vec(
            vec![1, 16, 8, 8],
            (0..16 * 64).map(|v| ((v * 37) % 100) as f32 / 100.0).collect(),
        )
        .unwrap();
        let out = tsrcan_forward(&x, &store, &config, Phase::Eval).unwrap();
        assert_eq!(out.texture.shape(), [1, k, 8, 8]);
        for (a, b) in out.sr.data().iter().zip(out.sr_prime.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_values_and_structure() {
        let t = Tensor::from_vec(vec![1, 3, 2, 2], vec![0.5; 12]).unwrap();
        let zero = loss(&t, &t, &t).unwrap().item().unwrap();
        assert_eq!(zero, 0.0);

        let off = Tensor::from_vec(vec![1, 3, 2, 2], vec![1.0; 12]).unwrap();
        let l = loss(&off, &t, &t).unwrap().item().unwrap();
        assert!((l - 0.125).abs() < 1e-7);

        // Eq-style decomposition: the composite equals the sum of its terms.
        let a = Tensor::from_vec(vec![1, 3, 2, 2], (0..12).map(|v| v as f32 * 0.1).collect()).unwrap();
        let b = Tensor::from_vec(vec![1, 3, 2, 2], (0..12).map(|v| 1.2 - v as f32 * 0.05).collect()).unwrap();
        let composite = loss(&a, &b, &t).unwrap().item().unwrap();
        let t1 = a.smooth_l1(&t).unwrap().item().unwrap();
        let t2 = b.smooth_l1(&t).unwrap().item().unwrap();
        assert!((composite - (t1 + t2)).abs() < 1e-7);
    }

    #[test]
    fn loss_gradient_reaches_both_branches() {
        // An RCAN parameter receives gradient from both loss terms; the
        // fusion conv only from the second. Selectively detaching the sr
        // branch must therefore zero the fusion gradient but not the
        // head's.
        let config = ModelConfig::tiny();
        let store = build(&config, 23).unwrap();
        let x = Tensor::from_vec(
            vec![1, 16, 8, 8],
            (0..1024).map(|v| ((v * 13) % 50) as f32 / 50.0).collect(),
        )
        .unwrap();
        let target = Tensor::zeros(vec![1, 3, 8, 8]);

        store.zero_grads();
        let out = tsrcan_forward(&x, &store, &config, Phase::Train).unwrap();
        loss(&out.sr_prime, &out.sr, &target).unwrap().backward().unwrap();
        let head_full: Vec<f32> = store.get("head.conv1.weight").unwrap().grad_or_zeros();
        let fusion_full: Vec<f32> = store.get("fusion.conv.weight").unwrap().grad_or_zeros();
        assert!(head_full.iter().any(|&g| g != 0.0));
        assert!(fusion_full.iter().any(|&g| g != 0.0));

        store.zero_grads();
        let out = tsrcan_forward(&x, &store, &config, Phase::Train).unwrap();
        // only the sr' term: fusion conv is not on this path
        out.sr_prime.smooth_l1(&target).unwrap().backward().unwrap();
        let fusion_prime_only: Vec<f32> = store.get("fusion.conv.weight").unwrap().grad_or_zeros();
        assert!(fusion_prime_only.iter().all(|&g| g == 0.0));
        let head_prime_only: Vec<f32> = store.get("head.conv1.weight").unwrap().grad_or_zeros();
        assert!(head_prime_only.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic_and_untracked() {
        let config = ModelConfig::tiny();
        let store = build(&config, 31).unwrap();
        let x = Tensor::from_vec(
            vec![1, 16, 8, 8],
            (0..1024).map(|v| ((v * 7) % 19) as f32 / 19.0).collect(),
        )
        .unwrap();
        let a = tsrcan_forward(&x, &store, &config, Phase::Eval).unwrap();
        let b = tsrcan_forward(&x, &store, &config, Phase::Eval).unwrap();
        assert_eq!(a.sr.data(), b.sr.data());
        assert!(!a.sr.is_tracked());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join("snapsr_ckpt_test");
        let _ = std::fs::remove_dir_all(&dir);
        let config = ModelConfig::tiny();
        let store = build(&config, 77).unwrap();
        {
            let mut st = store.bn_state("tn.stem.bn").unwrap().lock().unwrap();
            st.running_mean[0] = 0.25;
            st.running_var[1] = 2.5;
        }
        save_checkpoint(&dir, &store, &config, 77).unwrap();
        let (loaded, config2, seed2) = load_checkpoint(&dir).unwrap();
        assert_eq!(config2, config);
        assert_eq!(seed2, 77);
        for ((na, ta), (nb, tb)) in store.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let st = loaded.bn_state("tn.stem.bn").unwrap().lock().unwrap();
        assert_eq!(st.running_mean[0], 0.25);
        assert_eq!(st.running_var[1], 2.5);
    }
}
