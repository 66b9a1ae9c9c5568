//! Losses, SGD with momentum, the step schedule and the training loop.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SegmentationSample, Split};
use crate::metrics::{self, DiceReport};
use crate::zoo::{self, ArchKind, ArchSpec, Network};
use crate::{Error, Graph, LabelMap, Result, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays.
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub convergence_patience: usize,
    /// Weight of the soft Dice term; `None` picks the architecture default.
    pub loss_mix: Option<f64>,
    /// Median-frequency class weights when true, unit weights otherwise.
    pub balance_classes: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            momentum: 0.95,
            weight_decay: 1e-4,
            batch_size: 4,
            max_epochs: 30,
            convergence_patience: 5,
            loss_mix: None,
            balance_classes: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "train.{key} must be positive, got {v}"
                )));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("loss_mix", self.loss_mix.unwrap_or(0.0)),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "train.{key} must be non-negative, got {v}"
                )));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("train.momentum must be below 1"));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("max_epochs", self.max_epochs),
            ("convergence_patience", self.convergence_patience),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("train.{key} must be at least 1")));
            }
        }
        Ok(())
    }

    /// λ actually used for `kind`.
    pub fn loss_mix_for(&self, kind: ArchKind) -> f64 {
        self.loss_mix.unwrap_or_else(|| default_loss_mix(kind))
    }
}

/// 1 for sdnet, 0 for the others.
pub fn default_loss_mix(kind: ArchKind) -> f64 {
    match kind {
        ArchKind::Sdnet => 1.0,
        ArchKind::Unet | ArchKind::Densenet => 0.0,
    }
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / cfg.lr_decay_every) as i32;
    cfg.initial_lr * cfg.lr_decay_factor.powi(steps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::config(format!(
                "class weights must be positive: {weights:?}"
            )));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w_c = median(f) / f_c` over the global pixel frequencies `f`.
///
/// With an even number of classes the median is the mean of the two middle
/// frequencies.
pub fn median_frequency_weights(labels: &[&LabelMap], num_classes: usize) -> Result<ClassWeights> {
    if num_classes == 0 {
        return Err(Error::config("at least one class is required"));
    }
    let mut counts = vec![0u64; num_classes];
    for map in labels {
        map.check_range(num_classes)?;
        for &y in map.data() {
            counts[y as usize] += 1;
        }
    }
    if let Some(absent) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "class {absent} never occurs, so its median-frequency weight is undefined"
        )));
    }
    // frequencies share the total pixel count, so counts give the same ratios
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let mid = num_classes / 2;
    let median = if num_classes % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    ClassWeights::new(counts.iter().map(|&c| median / c as f64).collect())
}

/// Mean over pixels of `w_y · −log softmax(logits)_y`.
pub fn weighted_logistic_loss(
    g: &mut Graph,
    logits: Var,
    labels: &LabelMap,
    weights: &ClassWeights,
) -> Result<Var> {
    g.weighted_cross_entropy(logits, labels, weights.as_slice())
}

/// `1 − mean_c Dice_c(probs, labels)` with smoothing [`crate::kernels::DICE_EPS`].
pub fn soft_dice_loss(g: &mut Graph, probs: Var, labels: &LabelMap) -> Result<Var> {
    g.soft_dice(probs, labels)
}

/// `CE + λ · soft Dice`; with `λ = 0` only the cross-entropy node is built.
pub fn combined_loss(
    g: &mut Graph,
    logits: Var,
    labels: &LabelMap,
    weights: &ClassWeights,
    loss_mix: f64,
) -> Result<Var> {
    let ce = weighted_logistic_loss(g, logits, labels, weights)?;
    if loss_mix == 0.0 {
        return Ok(ce);
    }
    let probs = g.softmax_channels(logits)?;
    let dice = soft_dice_loss(g, probs, labels)?;
    let dice = g.scale(dice, loss_mix);
    g.add(ce, dice)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Tensor>,
    pub epoch: usize,
    pub lr: f64,
}

impl OptimState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            epoch: 0,
            lr,
        }
    }
}

/// `g' = g + wd·p; v ← m·v + g'; p ← p − lr·v`.
pub fn sgd_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(format!(
            "sgd: {} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "sgd: parameter {i} has shape {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pj, gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vj = momentum * *vj + (gj + weight_decay * *pj);
            *pj -= lr * *vj;
        }
    }
    state.lr = lr;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,val_dice";

/// Per-epoch log as CSV; floats use the shortest round-trip representation.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.lr, e.train_loss, e.val_loss, e.val_dice
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub class_weights: ClassWeights,
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_gradients(
    net: &Network,
    images: &Tensor,
    labels: &LabelMap,
    weights: &ClassWeights,
    loss_mix: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = net.register(&mut g);
    let x = g.leaf(images.clone());
    let logits = net.forward(&mut g, &vars, x)?;
    let loss = combined_loss(&mut g, logits, labels, weights, loss_mix)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| grads.take(v).expect("parameters are leaves"))
        .collect();
    Ok((value, grads))
}

/// Sample-weighted mean loss over a split, no updates.
pub fn split_loss(
    net: &Network,
    samples: &[SegmentationSample],
    weights: &ClassWeights,
    loss_mix: f64,
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let indices: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data::stack_batch(samples, chunk)?;
        let mut g = Graph::new();
        let vars = net.register(&mut g);
        let xv = g.leaf(x);
        let logits = net.forward(&mut g, &vars, xv)?;
        let loss = combined_loss(&mut g, logits, &y, weights, loss_mix)?;
        total += g.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Per-sample argmax predictions over a split.
pub fn predict_split(
    net: &Network,
    samples: &[SegmentationSample],
    batch_size: usize,
) -> Result<Vec<LabelMap>> {
    let indices: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data::stack_batch(samples, chunk)?;
        let pred = net.predict(&x)?;
        let [_, h, w]: [usize; 3] = pred.shape().try_into().expect("rank 3");
        for (i, plane) in pred.data().chunks(h * w).enumerate() {
            debug_assert!(i < chunk.len());
            out.push(LabelMap::new(vec![h, w], plane.to_vec())?);
        }
    }
    Ok(out)
}

/// Dice of the network's predictions on a split, background excluded.
pub fn evaluate_split(
    net: &Network,
    samples: &[SegmentationSample],
    batch_size: usize,
) -> Result<DiceReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let preds = predict_split(net, samples, batch_size)?;
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
    metrics::dice_report(&preds, &gts, net.spec().num_classes, true)
}

fn first_non_finite(net: &Network, grads: &[Tensor]) -> String {
    net.names()
        .iter()
        .zip(grads)
        .find(|(_, g)| !g.is_finite())
        .map_or_else(
            || "no parameter gradient is non-finite".to_string(),
            |(n, _)| format!("first non-finite parameter gradient: {n}"),
        )
}

/// Trains `net` in place and leaves it holding the best validation-epoch weights.
pub fn train_network(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let k = net.spec().num_classes;
    if data.num_classes != k {
        return Err(Error::config(format!(
            "dataset has {} classes, network predicts {k}",
            data.num_classes
        )));
    }
    let weights = if cfg.balance_classes {
        let labels: Vec<&LabelMap> = train.iter().map(|s| &s.label).collect();
        median_frequency_weights(&labels, k)?
    } else {
        ClassWeights::uniform(k)
    };
    let loss_mix = cfg.loss_mix_for(net.spec().kind);

    let mut state = OptimState::new(net.params(), cfg.initial_lr);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(cfg, epoch);
        state.epoch = epoch;
        state.lr = lr;
        let mut total = 0.0;
        for batch in data::batch_iterator(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let (x, y) = data::stack_batch(train, &batch)?;
            let (loss, grads) = loss_and_gradients(net, &x, &y, &weights, loss_mix)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    detail: format!("batch loss {loss}; {}", first_non_finite(net, &grads)),
                });
            }
            total += loss * batch.len() as f64;
            sgd_update(
                net.params_mut(),
                &grads,
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = split_loss(net, val, &weights, loss_mix, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        let val_dice = evaluate_split(net, val, cfg.batch_size)?.mean;
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_dice,
        });

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.params().to_vec()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.convergence_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    net.params_mut().clone_from_slice(&params);
    Ok(TrainReport {
        log,
        best_epoch,
        stopped_early,
        class_weights: weights,
    })
}

/// Builds the network for `spec` from `cfg.seed` and trains it.
pub fn train_loop(
    spec: &ArchSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    let mut net = zoo::build_network(spec, cfg.seed)?;
    let report = train_network(&mut net, data, cfg)?;
    Ok((net, report))
}
