//! Finite-difference checks of every differentiable op, the SE blocks, both
//! losses and whole networks.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::gradcheck::{finite_diff_at, max_relative_error};
use crate::init::rng_for;
use crate::kernels::Activation;
use crate::se::{self, SeParams, SeVariant};
use crate::zoo::{self, ArchSpec};
use crate::{Error, Graph, LabelMap, Result, Tensor, Var};

/// Pass threshold for single layers, blocks and losses.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Pass threshold for end-to-end networks.
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Largest finite-difference step tried for networks.
pub const NETWORK_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradBlock {
    Conv,
    StridedConv,
    Linear,
    MaxPool,
    MaxUnpool,
    Upsample,
    Relu,
    Sigmoid,
    Softmax,
    Concat,
    SpatialMean,
    ChannelScale,
    PixelScale,
    Add,
    Mul,
    Cse,
    Sse,
    Scse,
    LossCe,
    LossDice,
}

impl GradBlock {
    pub const ALL: [GradBlock; 20] = [
        Self::Conv,
        Self::StridedConv,
        Self::Linear,
        Self::MaxPool,
        Self::MaxUnpool,
        Self::Upsample,
        Self::Relu,
        Self::Sigmoid,
        Self::Softmax,
        Self::Concat,
        Self::SpatialMean,
        Self::ChannelScale,
        Self::PixelScale,
        Self::Add,
        Self::Mul,
        Self::Cse,
        Self::Sse,
        Self::Scse,
        Self::LossCe,
        Self::LossDice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::StridedConv => "conv-strided",
            Self::Linear => "linear",
            Self::MaxPool => "pool",
            Self::MaxUnpool => "unpool",
            Self::Upsample => "upsample",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Softmax => "softmax",
            Self::Concat => "concat",
            Self::SpatialMean => "spatial-mean",
            Self::ChannelScale => "channel-scale",
            Self::PixelScale => "pixel-scale",
            Self::Add => "add",
            Self::Mul => "mul",
            Self::Cse => "cse",
            Self::Sse => "sse",
            Self::Scse => "scse",
            Self::LossCe => "loss-ce",
            Self::LossDice => "loss-dice",
        }
    }
}

impl fmt::Display for GradBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown gradient-check block '{s}'")))
    }
}

/// Worst relative error over the checked elements of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub subject: String,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.max_relative_error <= self.tolerance)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Uniform::new(lo, hi).expect("valid range");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Reduces a tensor to a scalar through fixed random weights so that every
/// output element gets a distinct upstream gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = rng_for(seed, "projection");
    let r = g.leaf(uniform(&shape, -1.0, 1.0, &mut rng));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Checks `build` w.r.t. each named input; `fraction` samples that share of
/// every tensor's elements (at least one), `None` checks all of them.
///
/// Perturbed evaluations replay the ReLU masks and pooling choices of the
/// unperturbed pass, so differences never straddle a kink.
fn check_graph(
    inputs: &[(String, Tensor)],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    eps: f64,
    fraction: Option<f64>,
    seed: u64,
) -> Result<Vec<GroupError>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let kinks = g.kinks();

    let mut groups = Vec::with_capacity(inputs.len());
    for (i, (name, tensor)) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match fraction {
            None => (0..tensor.len()).collect(),
            Some(f) => {
                let amount = ((tensor.len() as f64 * f).ceil() as usize).clamp(1, tensor.len());
                let mut rng = rng_for(seed, name);
                let mut picked = index::sample(&mut rng, tensor.len(), amount).into_vec();
                picked.sort_unstable();
                picked
            }
        };
        let analytic: Vec<f64> = indices
            .iter()
            .map(|&j| grads.wrt(vars[i]).data()[j])
            .collect();
        let mut eval_err = None;
        let eval = |probe: &Tensor| {
            let mut g = Graph::with_frozen_kinks(kinks.clone());
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(k, (_, t))| g.leaf(if k == i { probe.clone() } else { t.clone() }))
                .collect();
            match build(&mut g, &vars).and_then(|l| g.value(l).item()) {
                Ok(v) => v,
                Err(e) => {
                    eval_err.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let numeric = finite_diff_at(eval, tensor, &indices, eps);
        if let Some(e) = eval_err {
            return Err(e);
        }
        groups.push(GroupError {
            name: name.clone(),
            checked: indices.len(),
            max_relative_error: max_relative_error(&analytic, &numeric),
        });
    }
    Ok(groups)
}

fn named(pairs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn random_labels(shape: &[usize], k: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let dist = Uniform::new(0, k as u32).expect("k >= 1");
    let len = shape.iter().product();
    LabelMap::new(shape.to_vec(), (0..len).map(|_| dist.sample(rng)).collect())
        .expect("valid shape")
}

/// Checks one layer, SE block or loss on small random inputs.
pub fn check_block(block: GradBlock, seed: u64, eps: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = |shape: &[usize], rng: &mut ChaCha8Rng| uniform(shape, -1.0, 1.0, rng);
    let groups = match block {
        GradBlock::Conv | GradBlock::StridedConv => {
            let stride = if block == GradBlock::Conv { 1 } else { 2 };
            let inputs = named(vec![
                ("input", x(&[2, 3, 5, 5], &mut rng)),
                ("weight", x(&[4, 3, 3, 3], &mut rng)),
                ("bias", x(&[4], &mut rng)),
            ]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::Linear => {
            let inputs = named(vec![
                ("input", x(&[3, 5], &mut rng)),
                ("weight", x(&[4, 5], &mut rng)),
                ("bias", x(&[4], &mut rng)),
            ]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.fully_connected(v[0], v[1], Some(v[2]))?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::MaxPool => {
            let inputs = named(vec![("input", x(&[2, 2, 4, 6], &mut rng))]);
            check_graph(
                &inputs,
                |g, v| {
                    let (y, _) = g.max_pool2d(v[0], 2)?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::MaxUnpool => {
            let source = x(&[2, 2, 4, 4], &mut rng);
            let (_, indices) = crate::kernels::max_pool2d(&source, 2)?;
            let inputs = named(vec![("input", x(&[2, 2, 2, 2], &mut rng))]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.max_unpool2d(v[0], &indices, 2)?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::Upsample => {
            let inputs = named(vec![("input", x(&[1, 3, 3, 2], &mut rng))]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.upsample_nearest(v[0], 2)?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::Relu | GradBlock::Sigmoid => {
            let kind = if block == GradBlock::Relu {
                Activation::Relu
            } else {
                Activation::Sigmoid
            };
            let inputs = named(vec![("input", x(&[2, 3, 3, 3], &mut rng))]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.activation(kind, v[0]);
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::Softmax => {
            let inputs = named(vec![("input", uniform(&[2, 4, 3, 3], -3.0, 3.0, &mut rng))]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.softmax_channels(v[0])?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::Concat => {
            let inputs = named(vec![
                ("first", x(&[2, 2, 3, 3], &mut rng)),
                ("second", x(&[2, 3, 3, 3], &mut rng)),
            ]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.concat_channels(&[v[0], v[1]])?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::SpatialMean => {
            let inputs = named(vec![("input", x(&[2, 3, 4, 3], &mut rng))]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.spatial_mean(v[0])?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::ChannelScale => {
            let inputs = named(vec![
                ("input", x(&[2, 3, 3, 3], &mut rng)),
                ("gate", x(&[2, 3], &mut rng)),
            ]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.channel_scale(v[0], v[1])?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::PixelScale => {
            let inputs = named(vec![
                ("input", x(&[2, 3, 3, 3], &mut rng)),
                ("gate", x(&[2, 1, 3, 3], &mut rng)),
            ]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = g.pixel_scale(v[0], v[1])?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::Add | GradBlock::Mul => {
            let inputs = named(vec![
                ("lhs", x(&[2, 2, 3, 3], &mut rng)),
                ("rhs", x(&[2, 2, 3, 3], &mut rng)),
            ]);
            check_graph(
                &inputs,
                |g, v| {
                    let y = if block == GradBlock::Add {
                        g.add(v[0], v[1])?
                    } else {
                        g.mul(v[0], v[1])?
                    };
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::Cse | GradBlock::Sse | GradBlock::Scse => {
            let variant = match block {
                GradBlock::Cse => SeVariant::Cse,
                GradBlock::Sse => SeVariant::Sse,
                _ => SeVariant::Scse,
            };
            let channels = 6;
            let params = SeParams::init(variant, channels, se::DEFAULT_REDUCTION, seed, "block")?;
            let mut inputs = vec![("input".to_string(), x(&[2, channels, 4, 4], &mut rng))];
            for (name, t) in params.tensors() {
                inputs.push((name.to_string(), t.clone()));
            }
            let has_channel = params.squeeze.is_some();
            check_graph(
                &inputs,
                |g, v| {
                    let (squeeze, excite, spatial) = if has_channel {
                        (Some(v[1]), Some(v[2]), v.get(3).copied())
                    } else {
                        (None, None, Some(v[1]))
                    };
                    let vars = se::SeVars::from_parts(variant, channels, squeeze, excite, spatial);
                    let y = se::se_forward(g, v[0], &vars)?;
                    project(g, y, seed)
                },
                eps,
                None,
                seed,
            )?
        }
        GradBlock::LossCe => {
            let labels = random_labels(&[2, 3, 3], 4, &mut rng);
            let weights: Vec<f64> = (0..4).map(|c| 0.5 + 0.5 * c as f64).collect();
            let inputs = named(vec![(
                "logits",
                uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut rng),
            )]);
            check_graph(
                &inputs,
                |g, v| g.weighted_cross_entropy(v[0], &labels, &weights),
                eps,
                None,
                seed,
            )?
        }
        GradBlock::LossDice => {
            let labels = random_labels(&[2, 3, 3], 4, &mut rng);
            let probs =
                crate::kernels::softmax_channels(&uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut rng))?;
            let inputs = named(vec![("probs", probs)]);
            check_graph(&inputs, |g, v| g.soft_dice(v[0], &labels), eps, None, seed)?
        }
    };
    Ok(GradReport {
        subject: block.to_string(),
        tolerance: BLOCK_TOLERANCE,
        groups,
    })
}

/// Checks `mean(logits)` of a whole network w.r.t. a seeded sample of
/// `fraction` of every parameter tensor, on one random `size × size` image.
///
/// The network is evaluated at a generic point rather than at its
/// initialization: weights are redrawn uniformly in `±sqrt(6 / fan_in)` and
/// biases in `±0.1`. Zero biases with Glorot scaling shrink activations by
/// about `1/√2` per ReLU layer, and the resulting near-zero gradients and
/// pre-activations make finite differences unreliable.
pub fn check_network(
    spec: &ArchSpec,
    seed: u64,
    eps: f64,
    fraction: f64,
    size: usize,
) -> Result<GradReport> {
    let mut net = zoo::build_network(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut() {
        let bound = match p.shape() {
            [_] => 0.1,
            [_, rest @ ..] => (6.0 / rest.iter().product::<usize>() as f64).sqrt(),
            [] => unreachable!("parameters are never scalars"),
        };
        *p = uniform(p.shape(), -bound, bound, &mut rng);
    }
    let image = uniform(&[1, spec.input_channels, size, size], 0.0, 1.0, &mut rng);
    let inputs: Vec<(String, Tensor)> = net
        .named_params()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let groups = check_graph(
        &inputs,
        |g, v| {
            let x = g.leaf(image.clone());
            let logits = net.forward(g, v, x)?;
            Ok(g.mean(logits))
        },
        eps,
        Some(fraction),
        seed,
    )?;
    Ok(GradReport {
        subject: format!("{} {}", spec.kind, spec.se_variant),
        tolerance: NETWORK_TOLERANCE,
        groups,
    })
}
