//! VGG-style fully convolutional network with FCN skip refinement.
//!
//! The trunk is a list of conv blocks, each followed by 2×2 max pooling, then
//! three head convolutions (`fc6_conv`, `fc7_conv`, `fc8_conv`) produce
//! coarse scores. Three transposed convolutions bring the scores back to
//! input resolution:
//!
//! ```text
//! fc8 ─ deconv_32 ─(+ score_pool4)─ deconv_16 ─(+ score_pool3)─ deconv_8
//! ```
//!
//! `score_pool4` reads the output of the second-to-last pooling stage and
//! `score_pool3` the one before it, matching VGG-FCN at full scale. The skip
//! adds only exist for enabled stages, and their score layers start at zero,
//! so enabling a stage does not change the output until it is trained.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid_config, invalid_input, invalid_state, Error, Result};
use crate::tensor::{bilinear_filter, load_checkpoint, save_checkpoint, Graph, Parameter, Scalar, Tensor, Var};
use crate::NUM_LANDMARKS;

/// Output-resolution refinement stages, coarse to fine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Stride32,
    Stride16,
    Stride8,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Stride32, Stage::Stride16, Stage::Stride8];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stride32 => "stride32",
            Stage::Stride16 => "stride16",
            Stage::Stride8 => "stride8",
        }
    }

    /// Skip fusions active when training at this stage.
    pub fn skips(self) -> Skips {
        Skips {
            pool4: self >= Stage::Stride16,
            pool3: self >= Stage::Stride8,
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid_config(format!("unknown stage {s:?}")))
    }
}

/// Which skip fusions are enabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Skips {
    pub pool4: bool,
    pub pool3: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcnConfig {
    /// `(convolutions, channels)` per block; every block ends in a max pool.
    pub blocks: Vec<(usize, usize)>,
    /// Kernel sizes of `fc6_conv` and `fc7_conv`.
    pub head_kernels: (usize, usize),
    pub head_width: usize,
    pub output_channels: usize,
    pub skips: Skips,
    pub input_channels: usize,
    /// Side length of training crops.
    pub input_size: usize,
    /// Whether the transposed convolutions start trainable. When off they
    /// stay fixed bilinear interpolation, as in FCN.
    pub learn_upsampling: bool,
}

impl FcnConfig {
    /// VGG-16 FCN at full size.
    pub fn full(input_channels: usize, output_channels: usize) -> Self {
        Self {
            blocks: vec![(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)],
            head_kernels: (7, 1),
            head_width: 4096,
            output_channels,
            skips: Skips::default(),
            input_channels,
            input_size: 352,
            learn_upsampling: false,
        }
    }

    /// Reduced network: three blocks of width 16/32/64 and a 3×3/1×1 head,
    /// trained on 64×64 crops.
    pub fn mini(input_channels: usize, output_channels: usize) -> Self {
        Self {
            blocks: vec![(2, 16), (2, 32), (3, 64)],
            head_kernels: (3, 1),
            head_width: 128,
            output_channels,
            skips: Skips::default(),
            input_channels,
            input_size: 64,
            learn_upsampling: false,
        }
    }

    /// Total downsampling factor of the trunk.
    pub fn total_stride(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(invalid_config("at least two conv blocks are needed"));
        }
        if self.blocks.iter().any(|&(n, w)| n == 0 || w == 0) {
            return Err(invalid_config("every block needs at least one conv and one channel"));
        }
        if self.skips.pool3 && self.blocks.len() < 3 {
            return Err(invalid_config("the pool3 skip needs at least three blocks"));
        }
        if ![NUM_LANDMARKS, crate::NUM_CLASSES].contains(&self.output_channels) {
            return Err(invalid_config(format!(
                "output channels must be {NUM_LANDMARKS} or {}, got {}",
                crate::NUM_CLASSES,
                self.output_channels
            )));
        }
        let (k6, k7) = self.head_kernels;
        if k6 % 2 == 0 || k7 % 2 == 0 {
            return Err(invalid_config("head kernels must be odd for same padding"));
        }
        if self.head_width == 0 || self.input_channels == 0 {
            return Err(invalid_config("head width and input channels must be positive"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.total_stride()) {
            return Err(invalid_config(format!(
                "input size {} not divisible by total stride {}",
                self.input_size,
                self.total_stride()
            )));
        }
        Ok(())
    }

    /// Parameterised layers in evaluation order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut cin = self.input_channels;
        for (b, &(count, width)) in self.blocks.iter().enumerate() {
            for i in 0..count {
                layers.push(LayerSpec::conv(format!("conv{}_{}", b + 1, i + 1), cin, width, 3));
                cin = width;
            }
        }
        let (k6, k7) = self.head_kernels;
        let out = self.output_channels;
        layers.push(LayerSpec::conv("fc6_conv", cin, self.head_width, k6));
        layers.push(LayerSpec::conv("fc7_conv", self.head_width, self.head_width, k7));
        layers.push(LayerSpec::conv("fc8_conv", self.head_width, out, 1));
        layers.push(LayerSpec::deconv("deconv_32", out, 2));
        let nb = self.blocks.len();
        if self.skips.pool4 {
            layers.push(LayerSpec::conv("score_pool4", self.blocks[nb - 2].1, out, 1));
        }
        layers.push(LayerSpec::deconv("deconv_16", out, 2));
        if self.skips.pool3 {
            layers.push(LayerSpec::conv("score_pool3", self.blocks[nb - 3].1, out, 1));
        }
        layers.push(LayerSpec::deconv("deconv_8", out, 1 << (nb - 2)));
        layers
    }

    pub fn to_text(&self) -> String {
        let blocks: Vec<String> = self.blocks.iter().map(|(n, w)| format!("{n}x{w}")).collect();
        let mut skips = Vec::new();
        if self.skips.pool4 {
            skips.push("pool4");
        }
        if self.skips.pool3 {
            skips.push("pool3");
        }
        format!(
            "blocks={}\nhead_kernels={},{}\nhead_width={}\noutput_channels={}\nskips={}\ninput_channels={}\ninput_size={}\nlearn_upsampling={}\n",
            blocks.join(","),
            self.head_kernels.0,
            self.head_kernels.1,
            self.head_width,
            self.output_channels,
            skips.join(","),
            self.input_channels,
            self.input_size,
            self.learn_upsampling
        )
    }

    /// Parses `key=value` lines; keys not given keep the mini defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let map = crate::pipeline::config::parse_key_values(text)?;
        Self::from_map(&map, "")
    }

    /// Reads keys under `prefix` (e.g. `"seg."`) from a parsed key=value map.
    pub fn from_map(map: &BTreeMap<String, String>, prefix: &str) -> Result<Self> {
        let mut cfg = Self::mini(3, crate::NUM_CLASSES);
        let get = |k: &str| map.get(&format!("{prefix}{k}")).map(String::as_str);
        let num = |k: &str, v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| invalid_config(format!("{prefix}{k}: expected an integer, got {v:?}")))
        };
        if let Some(v) = get("blocks") {
            cfg.blocks = v
                .split(',')
                .map(|b| {
                    let (n, w) = b
                        .trim()
                        .split_once('x')
                        .ok_or_else(|| invalid_config(format!("bad block {b:?}, expected NxW")))?;
                    Ok((num("blocks", n)?, num("blocks", w)?))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = get("head_kernels") {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| invalid_config("head_kernels expects two values"))?;
            cfg.head_kernels = (num("head_kernels", a)?, num("head_kernels", b)?);
        }
        if let Some(v) = get("head_width") {
            cfg.head_width = num("head_width", v)?;
        }
        if let Some(v) = get("output_channels") {
            cfg.output_channels = num("output_channels", v)?;
        }
        if let Some(v) = get("input_channels") {
            cfg.input_channels = num("input_channels", v)?;
        }
        if let Some(v) = get("input_size") {
            cfg.input_size = num("input_size", v)?;
        }
        if let Some(v) = get("learn_upsampling") {
            cfg.learn_upsampling = v
                .trim()
                .parse()
                .map_err(|_| invalid_config(format!("{prefix}learn_upsampling: expected true or false, got {v:?}")))?;
        }
        if let Some(v) = get("skips") {
            let mut skips = Skips::default();
            for s in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                match s {
                    "pool4" => skips.pool4 = true,
                    "pool3" => skips.pool3 = true,
                    other => return Err(invalid_config(format!("unknown skip {other:?}"))),
                }
            }
            cfg.skips = skips;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Same-padded convolution with bias.
    Conv { cin: usize, cout: usize, k: usize },
    /// Channel-preserving transposed convolution without bias.
    Deconv {
        channels: usize,
        k: usize,
        stride: usize,
        crop: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv { cin, cout, k },
        }
    }

    /// Upsampling by `factor`: kernel `2·factor`, crop `factor/2`, which maps
    /// `n` to exactly `factor·n`. A factor of one is a 1×1 identity.
    fn deconv(name: impl Into<String>, channels: usize, factor: usize) -> Self {
        let (k, crop) = if factor == 1 { (1, 0) } else { (2 * factor, factor / 2) };
        Self {
            name: name.into(),
            kind: LayerKind::Deconv {
                channels,
                k,
                stride: factor,
                crop,
            },
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cin, cout, k } => cout * cin * k * k + cout,
            LayerKind::Deconv { channels, k, .. } => channels * channels * k * k,
        }
    }

    fn is_score(&self) -> bool {
        self.name == "fc8_conv" || self.name.starts_with("score_")
    }
}

/// A built network: its configuration and named parameters.
#[derive(Clone, Debug)]
pub struct NetworkInstance<T> {
    config: FcnConfig,
    params: Vec<Parameter<T>>,
}

/// Graph handles produced by [`NetworkInstance::forward`].
pub struct ForwardPass {
    pub output: Var,
    params: Vec<Var>,
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::cast(rng.random_range(-bound..bound)))
}

fn init_layer<T: Scalar, R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Vec<Parameter<T>> {
    let mut params = zero_layer(spec);
    if let LayerKind::Conv { cin, cout, k } = spec.kind {
        if !spec.is_score() {
            params[0].tensor = he_uniform(&[cout, cin, k, k], cin * k * k, rng);
        }
    }
    params
}

/// Parameters of `spec` with zero convolutions and bilinear deconvolutions.
fn zero_layer<T: Scalar>(spec: &LayerSpec) -> Vec<Parameter<T>> {
    match spec.kind {
        LayerKind::Conv { cin, cout, k } => vec![
            Parameter::new(format!("{}.weight", spec.name), Tensor::zeros(&[cout, cin, k, k])),
            Parameter::new(format!("{}.bias", spec.name), Tensor::zeros(&[cout])),
        ],
        LayerKind::Deconv { channels, k, .. } => vec![Parameter::new(
            format!("{}.weight", spec.name),
            bilinear_filter(k, channels),
        )],
    }
}

fn fix_upsampling<T>(config: &FcnConfig, params: &mut [Parameter<T>]) {
    if !config.learn_upsampling {
        for p in params.iter_mut().filter(|p| p.name.starts_with("deconv_")) {
            p.trainable = false;
        }
    }
}

/// Builds a network: He-uniform trunk and head, zero score layers
/// (`fc8_conv`, `score_pool*`), bilinear transposed convolutions.
pub fn build_fcn<T: Scalar, R: Rng + ?Sized>(config: &FcnConfig, rng: &mut R) -> Result<NetworkInstance<T>> {
    config.validate()?;
    let mut params: Vec<Parameter<T>> = config.layers().iter().flat_map(|l| init_layer(l, rng)).collect();
    fix_upsampling(config, &mut params);
    Ok(NetworkInstance {
        config: config.clone(),
        params,
    })
}

impl<T: Scalar> NetworkInstance<T> {
    pub fn config(&self) -> &FcnConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("network has no parameter {name}"))
    }

    /// Records the network on `graph`. Trainable parameters become
    /// gradient-tracking leaves.
    pub fn forward(&self, graph: &mut Graph<T>, input: Var) -> Result<ForwardPass> {
        self.record(graph, input, true)
    }

    fn record(&self, graph: &mut Graph<T>, input: Var, track: bool) -> Result<ForwardPass> {
        let (c, h, w) = graph.value(input).dims3()?;
        if c != self.config.input_channels {
            return Err(invalid_input(format!(
                "network expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        let stride = self.config.total_stride();
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(invalid_input(format!(
                "input {h}x{w} not divisible by total stride {stride}"
            )));
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| graph.leaf(p.tensor.clone(), track && p.trainable))
            .collect();
        let conv = |g: &mut Graph<T>, x: Var, name: &str, relu: bool| -> Result<Var> {
            let wi = self.index(&format!("{name}.weight"));
            let k = self.params[wi].tensor.shape()[2];
            let y = g.conv2d(x, vars[wi], Some(vars[wi + 1]), 1, k / 2)?;
            Ok(if relu { g.relu(y) } else { y })
        };
        // Upsampling works on a one-pixel edge-replicated copy and crops the
        // extra `stride` pixels per side again, so the kernel sees no zero
        // border: a constant map upsamples to the same constant everywhere.
        let deconv = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
            let wi = self.index(&format!("{name}.weight"));
            let k = self.params[wi].tensor.shape()[2];
            let (stride, crop) = if k == 1 { (1, 0) } else { (k / 2, k / 4) };
            let padded = g.pad_edge(x, 1)?;
            g.conv_transpose2d(padded, vars[wi], stride, crop + stride)
        };

        let mut x = input;
        let mut pools = Vec::with_capacity(self.config.blocks.len());
        for (b, &(count, _)) in self.config.blocks.iter().enumerate() {
            for i in 0..count {
                x = conv(graph, x, &format!("conv{}_{}", b + 1, i + 1), true)?;
            }
            x = graph.maxpool2(x)?;
            pools.push(x);
        }
        x = conv(graph, x, "fc6_conv", true)?;
        x = conv(graph, x, "fc7_conv", true)?;
        x = conv(graph, x, "fc8_conv", false)?;

        let nb = pools.len();
        x = deconv(graph, x, "deconv_32")?;
        if self.config.skips.pool4 {
            let s = conv(graph, pools[nb - 2], "score_pool4", false)?;
            x = graph.crop_add(x, s)?;
        }
        x = deconv(graph, x, "deconv_16")?;
        if self.config.skips.pool3 {
            let s = conv(graph, pools[nb - 3], "score_pool3", false)?;
            x = graph.crop_add(x, s)?;
        }
        let output = deconv(graph, x, "deconv_8")?;
        Ok(ForwardPass { output, params: vars })
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let x = graph.constant(input.clone());
        let pass = self.record(&mut graph, x, false)?;
        Ok(graph.value(pass.output).clone())
    }

    /// Adds the gradients recorded on `graph` to the trainable parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, pass: &ForwardPass) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&pass.params) {
            if !p.trainable {
                continue;
            }
            let g = graph
                .grad(v)
                .ok_or_else(|| invalid_state(format!("no gradient reached trainable parameter {}", p.name)))?;
            p.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Enables the skip fusions of `stage`, adding zero-initialised score
    /// layers that do not exist yet. Existing parameters are kept.
    pub fn enable_stage(&mut self, stage: Stage) -> Result<()> {
        let mut cfg = self.config.clone();
        let want = stage.skips();
        cfg.skips.pool4 |= want.pool4;
        cfg.skips.pool3 |= want.pool3;
        cfg.validate()?;
        if cfg == self.config {
            return Ok(());
        }
        let mut old: BTreeMap<String, Parameter<T>> = self.params.drain(..).map(|p| (p.name.clone(), p)).collect();
        let mut params = Vec::new();
        for layer in cfg.layers() {
            // only score layers can be new here, and those start at zero
            for fresh in zero_layer::<T>(&layer) {
                params.push(old.remove(&fresh.name).unwrap_or(fresh));
            }
        }
        // new layers are score layers, which are always trainable
        self.params = params;
        self.config = cfg;
        Ok(())
    }

    /// Sets `trainable` on every parameter whose layer name matches. Returns
    /// the number of parameters selected; zero matches only logs a warning.
    pub fn set_trainable(&mut self, predicate: impl Fn(&str) -> bool) -> usize {
        let mut selected = 0;
        for p in &mut self.params {
            p.trainable = predicate(p.layer());
            selected += usize::from(p.trainable);
        }
        if selected == 0 {
            log::warn!("trainable-layer predicate matched no layers");
        }
        selected
    }

    /// Grows the first convolution by `extra_channels` zero-initialised input
    /// channels. The existing slice and all other parameters are unchanged;
    /// optimiser state starts afresh.
    pub fn expand_first_layer(&self, extra_channels: usize) -> Result<Self> {
        if self.config.input_channels != 3 {
            return Err(invalid_state(format!(
                "first layer already has {} input channels",
                self.config.input_channels
            )));
        }
        let mut out = self.clone();
        let first = out.config.layers()[0].name.clone();
        let p = out.param_mut(&format!("{first}.weight")).expect("first layer weight");
        let (cout, cin, kh, kw) = match p.tensor.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => unreachable!("conv weights are 4-d"),
        };
        let new_cin = cin + extra_channels;
        let per_in = kh * kw;
        let mut data = vec![T::zero(); cout * new_cin * per_in];
        for co in 0..cout {
            let src = &p.tensor.data()[co * cin * per_in..(co + 1) * cin * per_in];
            data[co * new_cin * per_in..co * new_cin * per_in + cin * per_in].copy_from_slice(src);
        }
        p.replace(Tensor::from_vec(&[cout, new_cin, kh, kw], data)?);
        out.params.iter_mut().for_each(Parameter::reset_state);
        out.config.input_channels = new_cin;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor<T>)> = self.params.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
        save_checkpoint(path, &named)
    }

    /// Loads parameter values by name; every parameter of the configured
    /// network must be present with the same shape.
    pub fn load(config: &FcnConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let mut stored: BTreeMap<String, Tensor<T>> = load_checkpoint(path)?.into_iter().collect();
        let mut params = Vec::new();
        for layer in config.layers() {
            for fresh in zero_layer::<T>(&layer) {
                let t = stored
                    .remove(&fresh.name)
                    .ok_or_else(|| invalid_input(format!("checkpoint lacks parameter {}", fresh.name)))?;
                if t.shape() != fresh.tensor.shape() {
                    return Err(invalid_input(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        fresh.name,
                        t.shape(),
                        fresh.tensor.shape()
                    )));
                }
                params.push(Parameter::new(fresh.name, t));
            }
        }
        fix_upsampling(config, &mut params);
        Ok(Self {
            config: config.clone(),
            params,
        })
    }
}

impl fmt::Display for FcnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
