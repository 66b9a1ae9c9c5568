//! Encoder/decoder F-CNN builders with SE blocks after every encoder and decoder block.
//!
//! All three families share the same skeleton: four encoder blocks (each
//! followed by 2×2 max pooling), a bottleneck, four decoder blocks and a 1×1
//! classifier. They differ in how decoders recover resolution:
//!
//! * `unet`: nearest upsampling, concatenation with the matching encoder output, convolutions.
//! * `sdnet`: max unpooling with the matching encoder's pooling indices, then the same skip
//!   concatenation and convolutions. A 1×1 projection is inserted before unpooling whenever the
//!   incoming channel count differs from the encoder level being unpooled.
//! * `densenet`: decodes like `unet`, but every block (encoder and decoder) is densely
//!   connected: each convolution sees the concatenation of the block input and all earlier
//!   outputs, and a 1×1 transition maps the final concatenation to the block width.
//!
//! Every convolution is followed by a ReLU; there is no normalization. The SE block of an
//! encoder acts on its pre-pool output, and the recalibrated map feeds both the pooling and the
//! skip connection. The bottleneck has no SE block.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kernels::PoolIndices;
use crate::se::{self, SeVariant, SeVars};
use crate::tensorfile::{self, EntryData, TensorEntry};
use crate::{init, Error, Graph, LabelMap, Result, Tensor, Var};

pub const NUM_LEVELS: usize = 4;
/// Required divisor of input height and width (four 2× poolings).
pub const SPATIAL_DIVISOR: usize = 1 << NUM_LEVELS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    #[default]
    Unet,
    Sdnet,
    Densenet,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [Self::Unet, Self::Sdnet, Self::Densenet];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unet => "unet",
            Self::Sdnet => "sdnet",
            Self::Densenet => "densenet",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Self::Unet),
            "sdnet" => Ok(Self::Sdnet),
            "densenet" => Ok(Self::Densenet),
            other => Err(Error::config(format!(
                "unknown architecture '{other}' (expected unet, sdnet or densenet)"
            ))),
        }
    }
}

/// Declarative description of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Encoder widths from full resolution down; decoders mirror them.
    pub block_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub num_classes: usize,
    pub se_variant: SeVariant,
    pub se_reduction: usize,
    pub input_channels: usize,
    pub conv_kernel: usize,
    pub preset: Option<String>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::desk(ArchKind::Unet, SeVariant::None)
    }
}

impl ArchSpec {
    /// Small preset used for the synthetic experiments: widths 8/16/32/64, 3×3 kernels.
    pub fn desk(kind: ArchKind, se_variant: SeVariant) -> Self {
        Self {
            kind,
            block_channels: vec![8, 16, 32, 64],
            bottleneck_channels: 64,
            num_classes: 4,
            se_variant,
            se_reduction: se::DEFAULT_REDUCTION,
            input_channels: 1,
            conv_kernel: 3,
            preset: Some("desk".into()),
        }
    }

    /// Full-size preset: every block 64 wide, 5×5 kernels, 28 output classes.
    pub fn paper_scale(kind: ArchKind, se_variant: SeVariant) -> Self {
        Self {
            kind,
            block_channels: vec![64; NUM_LEVELS],
            bottleneck_channels: 64,
            num_classes: 28,
            se_variant,
            se_reduction: se::DEFAULT_REDUCTION,
            input_channels: 1,
            conv_kernel: 5,
            preset: Some("paper".into()),
        }
    }

    pub fn preset(name: &str, kind: ArchKind, se_variant: SeVariant) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(kind, se_variant)),
            "paper" => Ok(Self::paper_scale(kind, se_variant)),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected desk or paper)"
            ))),
        }
    }

    pub fn with_variant(&self, se_variant: SeVariant) -> Self {
        Self {
            se_variant,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != NUM_LEVELS {
            return Err(Error::config(format!(
                "arch.block_channels must list {NUM_LEVELS} encoder widths, got {}",
                self.block_channels.len()
            )));
        }
        if self.block_channels.contains(&0) || self.bottleneck_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("arch.num_classes must be at least 2"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("arch.input_channels must be positive"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "arch.conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.se_reduction == 0 {
            return Err(Error::config("arch.se_reduction must be at least 1"));
        }
        if matches!(self.se_variant, SeVariant::Cse | SeVariant::Scse) {
            for &c in &self.block_channels {
                se::reduced_width(c, self.se_reduction)?;
                if self.se_reduction == 2 && c % 2 != 0 {
                    return Err(Error::config(format!(
                        "block width {c} must be even for {} with reduction 2",
                        self.se_variant
                    )));
                }
            }
        }
        Ok(())
    }

    /// Output widths of the eight SE sites: encoders 0..4, then decoders 0..4.
    pub fn se_site_channels(&self) -> Vec<usize> {
        self.block_channels
            .iter()
            .chain(&self.block_channels)
            .copied()
            .collect()
    }

    pub fn se_overhead(&self) -> Result<usize> {
        se::network_se_overhead(&self.se_site_channels(), self.se_variant, self.se_reduction)
    }
}

/// How SE weights are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SeInit {
    #[default]
    Glorot,
    /// All SE weights zero, making scSE an exact identity at construction.
    Zero,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct SeSite {
    channels: usize,
    squeeze: Option<usize>,
    excite: Option<usize>,
    spatial: Option<usize>,
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvLayer>,
    /// Present for densely connected blocks.
    transition: Option<ConvLayer>,
    se: Option<SeSite>,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    project: Option<ConvLayer>,
    block: Block,
}

#[derive(Clone, Debug)]
struct Layout {
    encoders: Vec<Block>,
    bottleneck: Block,
    /// Indexed by resolution level, 0 = full resolution.
    decoders: Vec<DecoderBlock>,
    classifier: ConvLayer,
}

/// A realized network: named parameter tensors plus the wiring that uses them.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

struct Builder {
    seed: u64,
    se_init: SeInit,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder {
    fn add(&mut self, name: String, value: Tensor) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize) -> ConvLayer {
        let wname = format!("{prefix}.weight");
        let w = init::glorot_for(&[cout, cin, kernel, kernel], self.seed, &wname);
        let weight = self.add(wname, w);
        let bias = self.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
        ConvLayer {
            weight,
            bias,
            padding: kernel / 2,
        }
    }

    fn se(&mut self, prefix: &str, spec: &ArchSpec, channels: usize) -> Result<Option<SeSite>> {
        if spec.se_variant == SeVariant::None {
            return Ok(None);
        }
        let se_prefix = format!("{prefix}.se");
        let p = match self.se_init {
            SeInit::Glorot => se::SeParams::init(
                spec.se_variant,
                channels,
                spec.se_reduction,
                self.seed,
                &se_prefix,
            )?,
            SeInit::Zero => se::SeParams::zeros(spec.se_variant, channels, spec.se_reduction)?,
        };
        let mut site = SeSite {
            channels,
            squeeze: None,
            excite: None,
            spatial: None,
        };
        for (name, t) in p.tensors() {
            let idx = self.add(format!("{se_prefix}.{name}"), t.clone());
            match name {
                "squeeze" => site.squeeze = Some(idx),
                "excite" => site.excite = Some(idx),
                _ => site.spatial = Some(idx),
            }
        }
        Ok(Some(site))
    }

    fn block(
        &mut self,
        prefix: &str,
        spec: &ArchSpec,
        cin: usize,
        cout: usize,
        dense: bool,
        with_se: bool,
    ) -> Result<Block> {
        let k = spec.conv_kernel;
        let (convs, transition) = if dense {
            let c0 = self.conv(&format!("{prefix}.conv0"), cin, cout, k);
            let c1 = self.conv(&format!("{prefix}.conv1"), cin + cout, cout, k);
            let t = self.conv(&format!("{prefix}.transition"), cin + 2 * cout, cout, 1);
            (vec![c0, c1], Some(t))
        } else {
            let c0 = self.conv(&format!("{prefix}.conv0"), cin, cout, k);
            let c1 = self.conv(&format!("{prefix}.conv1"), cout, cout, k);
            (vec![c0, c1], None)
        };
        let se = if with_se {
            self.se(prefix, spec, cout)?
        } else {
            None
        };
        Ok(Block {
            convs,
            transition,
            se,
        })
    }
}

/// Builds a network with seeded Glorot weights everywhere.
pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<Network> {
    build_network_with(spec, seed, SeInit::Glorot)
}

/// Builds a network; non-SE weights depend only on `(spec, seed)` and are
/// identical across SE variants.
pub fn build_network_with(spec: &ArchSpec, seed: u64, se_init: SeInit) -> Result<Network> {
    spec.validate()?;
    let mut b = Builder {
        seed,
        se_init,
        names: Vec::new(),
        params: Vec::new(),
    };
    let dense = spec.kind == ArchKind::Densenet;
    let ch = &spec.block_channels;

    let mut encoders = Vec::with_capacity(NUM_LEVELS);
    let mut cin = spec.input_channels;
    for (level, &cout) in ch.iter().enumerate() {
        encoders.push(b.block(&format!("enc{level}"), spec, cin, cout, dense, true)?);
        cin = cout;
    }
    let bottleneck = b.block(
        "bottleneck",
        spec,
        cin,
        spec.bottleneck_channels,
        false,
        false,
    )?;

    let mut decoders: Vec<Option<DecoderBlock>> = vec![None; NUM_LEVELS];
    let mut incoming = spec.bottleneck_channels;
    for level in (0..NUM_LEVELS).rev() {
        let prefix = format!("dec{level}");
        let width = ch[level];
        let (project, cin) = match spec.kind {
            ArchKind::Sdnet => {
                let project = (incoming != width)
                    .then(|| b.conv(&format!("{prefix}.project"), incoming, width, 1));
                (project, 2 * width)
            }
            ArchKind::Unet | ArchKind::Densenet => (None, incoming + width),
        };
        let block = b.block(&prefix, spec, cin, width, dense, true)?;
        decoders[level] = Some(DecoderBlock { project, block });
        incoming = width;
    }
    let classifier = b.conv("classifier", ch[0], spec.num_classes, 1);

    let layout = Layout {
        encoders,
        bottleneck,
        decoders: decoders.into_iter().map(|d| d.expect("built")).collect(),
        classifier,
    };
    let net = Network {
        spec: spec.clone(),
        names: b.names,
        params: b.params,
        layout,
    };
    net.check_se_sites()?;
    Ok(net)
}

impl Network {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    /// Indices of the SE weight tensors.
    pub fn se_param_indices(&self) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.contains(".se."))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Scalar count per layer (parameter names without their last segment), in build order.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.named_params() {
            let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
            match out.last_mut() {
                Some((last, n)) if last == layer => *n += t.len(),
                _ => out.push((layer.to_string(), t.len())),
            }
        }
        out
    }

    /// Records every parameter as a leaf, in parameter order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    fn check_se_sites(&self) -> Result<()> {
        let expected = self.spec.se_site_channels();
        let sites = self
            .layout
            .encoders
            .iter()
            .chain(self.layout.decoders.iter().map(|d| &d.block))
            .map(|b| b.se);
        for (site, &want) in sites.zip(&expected) {
            if let Some(site) = site {
                if site.channels != want {
                    return Err(Error::shape(format!(
                        "SE site built for {} channels sits on a {want}-channel block",
                        site.channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full forward pass from an `(N, Cin, H, W)` batch to `(N, K, H, W)` logits.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} parameter vars for a network with {} tensors",
                vars.len(),
                self.params.len()
            )));
        }
        let [_, c, h, w] = g.value(input).dims4()?;
        if c != self.spec.input_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        if h % SPATIAL_DIVISOR != 0 || w % SPATIAL_DIVISOR != 0 {
            return Err(Error::shape(format!(
                "input height and width must be divisible by {SPATIAL_DIVISOR}, got {h}x{w}"
            )));
        }
        let l = &self.layout;
        let mut skips = Vec::with_capacity(NUM_LEVELS);
        let mut indices: Vec<PoolIndices> = Vec::with_capacity(NUM_LEVELS);
        let mut x = input;
        for enc in &l.encoders {
            let u = self.block_forward(g, vars, enc, x)?;
            let (pooled, idx) = g.max_pool2d(u, 2)?;
            skips.push(u);
            indices.push(idx);
            x = pooled;
        }
        x = self.block_forward(g, vars, &l.bottleneck, x)?;
        for level in (0..NUM_LEVELS).rev() {
            let dec = &l.decoders[level];
            let up = match self.spec.kind {
                ArchKind::Sdnet => {
                    if let Some(p) = &dec.project {
                        x = conv_relu(g, vars, p, x)?;
                    }
                    g.max_unpool2d(x, &indices[level], 2)?
                }
                ArchKind::Unet | ArchKind::Densenet => g.upsample_nearest(x, 2)?,
            };
            let joined = g.concat_channels(&[up, skips[level]])?;
            x = self.block_forward(g, vars, &dec.block, joined)?;
        }
        let c = &l.classifier;
        g.conv2d(x, vars[c.weight], Some(vars[c.bias]), 1, c.padding)
    }

    fn block_forward(&self, g: &mut Graph, vars: &[Var], block: &Block, x: Var) -> Result<Var> {
        let u = match &block.transition {
            None => {
                let mut y = x;
                for c in &block.convs {
                    y = conv_relu(g, vars, c, y)?;
                }
                y
            }
            Some(t) => {
                let mut feats = vec![x];
                for c in &block.convs {
                    let joined = g.concat_channels(&feats)?;
                    feats.push(conv_relu(g, vars, c, joined)?);
                }
                let joined = g.concat_channels(&feats)?;
                conv_relu(g, vars, t, joined)?
            }
        };
        match &block.se {
            None => Ok(u),
            Some(site) => {
                let se_vars = SeVars::from_parts(
                    self.spec.se_variant,
                    site.channels,
                    site.squeeze.map(|i| vars[i]),
                    site.excite.map(|i| vars[i]),
                    site.spatial.map(|i| vars[i]),
                );
                se::se_forward(g, u, &se_vars)
            }
        }
    }

    /// Logits for a batch without keeping the graph.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g);
        let x = g.leaf(batch.clone());
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }

    /// Per-pixel argmax class for a batch, `[N, H, W]`.
    pub fn predict(&self, batch: &Tensor) -> Result<LabelMap> {
        argmax_channels(&self.logits(batch)?)
    }

    /// Writes every parameter to a tensor file, one entry per parameter name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<TensorEntry> = self
            .named_params()
            .map(|(n, t)| TensorEntry::new(n, EntryData::F64(t.clone())))
            .collect();
        tensorfile::write_tensor_file(path, &entries)
    }

    /// Replaces the parameters with the ones stored at `path`.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = tensorfile::read_tensor_file(path)?;
        self.load_entries(entries)
    }

    pub fn load_entries(&mut self, entries: Vec<TensorEntry>) -> Result<()> {
        if entries.len() != self.params.len() {
            let missing = self
                .names
                .iter()
                .find(|n| !entries.iter().any(|e| &e.name == *n));
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, network expects {}{}",
                entries.len(),
                self.params.len(),
                missing.map_or(String::new(), |m| format!(" (first missing: {m})"))
            )));
        }
        let mut loaded = Vec::with_capacity(entries.len());
        for (name, current) in self.names.iter().zip(&self.params) {
            let entry = entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::shape(format!("checkpoint lacks tensor {name}")))?;
            match &entry.data {
                EntryData::F64(t) if t.shape() == current.shape() => loaded.push(t.clone()),
                EntryData::F64(t) => {
                    return Err(Error::shape(format!(
                        "checkpoint tensor {name} has shape {:?}, network expects {:?}",
                        t.shape(),
                        current.shape()
                    )))
                }
                EntryData::U32(_) => {
                    return Err(Error::shape(format!(
                        "checkpoint tensor {name} holds u32 data"
                    )))
                }
            }
        }
        self.params = loaded;
        Ok(())
    }
}

fn conv_relu(g: &mut Graph, vars: &[Var], c: &ConvLayer, x: Var) -> Result<Var> {
    let y = g.conv2d(x, vars[c.weight], Some(vars[c.bias]), 1, c.padding)?;
    Ok(g.relu(y))
}

/// Class with the highest score at every pixel (first on ties).
pub fn argmax_channels(scores: &Tensor) -> Result<LabelMap> {
    let [n, k, h, w] = scores.dims4()?;
    let plane = h * w;
    let s = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if s[(b * k + c) * plane + p] > s[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    LabelMap::new(vec![n, h, w], out)
}
