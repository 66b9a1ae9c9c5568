//! Squeeze-and-excitation recalibration blocks.
//!
//! * **cSE** squeezes spatially (global average pooling), passes the channel
//!   descriptor through a bias-free `C -> C/r -> C` bottleneck with a ReLU in
//!   between, and rescales every channel by the sigmoid of the result.
//! * **sSE** squeezes along channels with a bias-free 1×1 convolution to a
//!   single map and rescales every pixel by its sigmoid.
//! * **scSE** adds the cSE and sSE outputs elementwise.
//!
//! Because sigmoid gates lie in `(0, 1)`, cSE and sSE never increase a
//! magnitude and scSE at most doubles it. With all weights zero every gate is
//! exactly `0.5`, so scSE starts out as the identity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{init, Error, Graph, Result, Tensor, Var};

pub const DEFAULT_REDUCTION: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeVariant {
    #[default]
    None,
    Cse,
    Sse,
    Scse,
}

impl SeVariant {
    pub const ALL: [SeVariant; 4] = [Self::None, Self::Cse, Self::Sse, Self::Scse];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Cse => "cse",
            Self::Sse => "sse",
            Self::Scse => "scse",
        }
    }

    fn has_channel_branch(self) -> bool {
        matches!(self, Self::Cse | Self::Scse)
    }

    fn has_spatial_branch(self) -> bool {
        matches!(self, Self::Sse | Self::Scse)
    }
}

impl fmt::Display for SeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cse" => Ok(Self::Cse),
            "sse" => Ok(Self::Sse),
            "scse" => Ok(Self::Scse),
            other => Err(Error::config(format!(
                "unknown SE variant '{other}' (expected none, cse, sse or scse)"
            ))),
        }
    }
}

/// Width of the cSE bottleneck, `floor(C / r)`.
pub fn reduced_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels < reduction {
        return Err(Error::config(format!(
            "SE block needs C >= r >= 1, got C = {channels}, r = {reduction}"
        )));
    }
    Ok(channels / reduction)
}

/// Learnable weights of one SE block. Only the tensors the variant uses are present.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams {
    pub variant: SeVariant,
    pub channels: usize,
    pub reduction: usize,
    /// `(C/r, C)`, applied first to the squeezed descriptor.
    pub squeeze: Option<Tensor>,
    /// `(C, C/r)`, maps the bottleneck back to one logit per channel.
    pub excite: Option<Tensor>,
    /// `(1, C, 1, 1)` projection onto a single spatial map.
    pub spatial: Option<Tensor>,
}

impl SeParams {
    fn with(
        variant: SeVariant,
        channels: usize,
        reduction: usize,
        mut make: impl FnMut(&'static str, &[usize]) -> Tensor,
    ) -> Result<Self> {
        let mut params = Self {
            variant,
            channels,
            reduction,
            squeeze: None,
            excite: None,
            spatial: None,
        };
        if variant.has_channel_branch() {
            let hidden = reduced_width(channels, reduction)?;
            params.squeeze = Some(make("squeeze", &[hidden, channels]));
            params.excite = Some(make("excite", &[channels, hidden]));
        }
        if variant.has_spatial_branch() {
            params.spatial = Some(make("spatial", &[1, channels, 1, 1]));
        }
        Ok(params)
    }

    /// All weights zero: every gate is `0.5`.
    pub fn zeros(variant: SeVariant, channels: usize, reduction: usize) -> Result<Self> {
        Self::with(variant, channels, reduction, |_, shape| {
            Tensor::zeros(shape)
        })
    }

    /// Seeded Glorot-uniform weights; `prefix` names the block (e.g. `enc0.se`).
    pub fn init(
        variant: SeVariant,
        channels: usize,
        reduction: usize,
        seed: u64,
        prefix: &str,
    ) -> Result<Self> {
        Self::with(variant, channels, reduction, |name, shape| {
            init::glorot_for(shape, seed, &format!("{prefix}.{name}"))
        })
    }

    /// Named weight tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        [
            ("squeeze", self.squeeze.as_ref()),
            ("excite", self.excite.as_ref()),
            ("spatial", self.spatial.as_ref()),
        ]
        .into_iter()
        .filter_map(|(n, t)| t.map(|t| (n, t)))
        .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records the weights on `g` as leaves.
    pub fn register(&self, g: &mut Graph) -> SeVars {
        SeVars {
            variant: self.variant,
            channels: self.channels,
            squeeze: self.squeeze.clone().map(|t| g.leaf(t)),
            excite: self.excite.clone().map(|t| g.leaf(t)),
            spatial: self.spatial.clone().map(|t| g.leaf(t)),
        }
    }

    /// Applies the block to a plain tensor (no gradient tracking needed by the caller).
    pub fn apply(&self, u: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(u.clone());
        let vars = self.register(&mut g);
        let y = se_forward(&mut g, x, &vars)?;
        Ok(g.value(y).clone())
    }
}

/// SE weights recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SeVars {
    pub variant: SeVariant,
    pub channels: usize,
    pub squeeze: Option<Var>,
    pub excite: Option<Var>,
    pub spatial: Option<Var>,
}

impl SeVars {
    /// Builds vars from weights that are already leaves on the graph.
    pub fn from_parts(
        variant: SeVariant,
        channels: usize,
        squeeze: Option<Var>,
        excite: Option<Var>,
        spatial: Option<Var>,
    ) -> Self {
        Self {
            variant,
            channels,
            squeeze,
            excite,
            spatial,
        }
    }
}

fn check_channels(g: &Graph, u: Var, vars: &SeVars) -> Result<()> {
    let [_, c, _, _] = g.value(u).dims4()?;
    if c != vars.channels {
        return Err(Error::shape(format!(
            "SE block built for {} channels applied to a {c}-channel map",
            vars.channels
        )));
    }
    Ok(())
}

/// Global average pooling: `z[n, k]` is the mean of channel `k` of sample `n`.
pub fn channel_squeeze(g: &mut Graph, u: Var) -> Result<Var> {
    g.spatial_mean(u)
}

/// Spatial squeeze, channel excitation.
pub fn cse_forward(g: &mut Graph, u: Var, vars: &SeVars) -> Result<Var> {
    check_channels(g, u, vars)?;
    let (Some(squeeze), Some(excite)) = (vars.squeeze, vars.excite) else {
        return Err(Error::config(format!(
            "cSE needs squeeze and excite weights ({} block given)",
            vars.variant
        )));
    };
    let z = channel_squeeze(g, u)?;
    let hidden = g.fully_connected(z, squeeze, None)?;
    let hidden = g.relu(hidden);
    let logits = g.fully_connected(hidden, excite, None)?;
    let gates = g.sigmoid(logits);
    g.channel_scale(u, gates)
}

/// Channel squeeze, spatial excitation.
pub fn sse_forward(g: &mut Graph, u: Var, vars: &SeVars) -> Result<Var> {
    check_channels(g, u, vars)?;
    let Some(spatial) = vars.spatial else {
        return Err(Error::config(format!(
            "sSE needs a spatial projection weight ({} block given)",
            vars.variant
        )));
    };
    let q = g.conv2d(u, spatial, None, 1, 0)?;
    let gates = g.sigmoid(q);
    g.pixel_scale(u, gates)
}

/// Concurrent block: `cse_forward(u) + sse_forward(u)`.
pub fn scse_forward(g: &mut Graph, u: Var, channel: &SeVars, spatial: &SeVars) -> Result<Var> {
    let a = cse_forward(g, u, channel)?;
    let b = sse_forward(g, u, spatial)?;
    g.add(a, b)
}

/// Dispatches on the variant; `none` returns `u` unchanged.
pub fn se_forward(g: &mut Graph, u: Var, vars: &SeVars) -> Result<Var> {
    match vars.variant {
        SeVariant::None => {
            check_channels(g, u, vars)?;
            Ok(u)
        }
        SeVariant::Cse => cse_forward(g, u, vars),
        SeVariant::Sse => sse_forward(g, u, vars),
        SeVariant::Scse => scse_forward(g, u, vars, vars),
    }
}

/// Number of weights an SE block adds to a block with `channels` outputs.
pub fn se_param_count(variant: SeVariant, channels: usize, reduction: usize) -> Result<usize> {
    let hidden = reduced_width(channels, reduction)?;
    Ok(match variant {
        SeVariant::None => 0,
        SeVariant::Cse => 2 * channels * hidden,
        SeVariant::Sse => channels,
        SeVariant::Scse => 2 * channels * hidden + channels,
    })
}

/// Total SE weights over all encoder/decoder blocks.
pub fn network_se_overhead(
    block_channels: &[usize],
    variant: SeVariant,
    reduction: usize,
) -> Result<usize> {
    if block_channels.is_empty() {
        return Err(Error::config("SE overhead needs at least one block"));
    }
    block_channels
        .iter()
        .map(|&c| se_param_count(variant, c, reduction))
        .sum()
}
