//! Joint training of the aggregator, hypernetwork and classifier with a fresh
//! random ratio assignment per step, plus batch-norm recalibration and
//! evaluation of fixed configurations.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::gcn::AggregatorVars;
use crate::graph::{count_flops, RatioAssignment};
use crate::hypernet::GeneratorVars;
use crate::init::substream;
use crate::network::{bind_bn, forward, sample_ratios, validate_grid, BnStats, ForwardInputs, Supernet};
use crate::tensor::{Scalar, Sgd, SgdConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// Cosine decay to zero over the run.
    Cosine,
    /// ×0.1 at 50% and again at 75% of the run.
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub init_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub ratio_grid: Vec<f64>,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            init_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            ratio_grid: default_grid(),
            augment: Augment { crop: true, flip: true },
        }
    }
}

/// `{0.1, 0.2, …, 1.0}`.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.ratio_grid)?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch statistics".into()));
        }
        if !(self.init_lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(
                "init_lr and weight_decay must be non-negative and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let t = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        match self.lr_schedule {
            LrSchedule::Cosine => self.init_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
            LrSchedule::Step => {
                let drops = (t >= 0.5) as i32 + (t >= 0.75) as i32;
                self.init_lr * 0.1f64.powi(drops)
            }
        }
    }
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone, Default)]
pub struct TrainState<T> {
    pub opt: Sgd<T>,
}

/// Cross-entropy of the pruned network generated for `ratios`.
#[allow(clippy::too_many_arguments)]
pub fn supernet_loss<'t, T: Scalar>(
    net: &Supernet<T>,
    tape: &'t Tape<T>,
    ratios: &RatioAssignment,
    x: &Tensor<T>,
    labels: &[usize],
    agg: &AggregatorVars<'t, T>,
    gens: &[GeneratorVars<'t, T>],
    bn_affine: &BTreeMap<usize, (Var<'t, T>, Var<'t, T>)>,
    classifier: (Var<'t, T>, Var<'t, T>),
) -> Result<Var<'t, T>> {
    let weights = net.generate_on(tape, ratios, agg, gens)?;
    let inputs = ForwardInputs {
        graph: &net.graph,
        ratios,
        grid: &net.grid,
        weights: &weights,
        bn_affine,
        classifier,
    };
    let logits = forward(&inputs, tape.constant(x.clone()), BnStats::Batch, None)?;
    logits.softmax_cross_entropy(labels)
}

/// One optimization step at a fixed assignment. Updates the aggregator,
/// every generator, the classifier and the batch-norm affine terms of the
/// active width buckets; returns the loss before the update.
pub fn train_step<T: Scalar>(
    net: &mut Supernet<T>,
    state: &mut TrainState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    ratios: &RatioAssignment,
    sgd: SgdConfig,
) -> Result<f64> {
    let keys = net.bn_keys(ratios)?;
    let tape = Tape::new();
    let agg = net.aggregator.bind(&tape);
    let gens = net.hypernet.bind(&tape);
    let bn_affine = bind_bn(&tape, &net.bn, &keys, true);
    let classifier = (tape.param(net.classifier_w.clone()), tape.param(net.classifier_b.clone()));
    let loss = supernet_loss(net, &tape, ratios, x, labels, &agg, &gens, &bn_affine, classifier)?;
    let value = loss.value().data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss {value} at ratios {:?}",
            ratios.free_values(&net.graph)
        )));
    }
    let grads = tape.backward(loss)?;

    let agg_vars = agg.list();
    for ((name, t), v) in net.aggregator.tensors_mut().into_iter().zip(agg_vars) {
        state.opt.step(&name, t, &grads.wrt(v), sgd);
    }
    let gen_vars: Vec<_> = gens.iter().flat_map(|g| g.list()).collect();
    for ((name, t), v) in net.hypernet.tensors_mut().into_iter().zip(gen_vars) {
        state.opt.step(&name, t, &grads.wrt(v), sgd);
    }
    state.opt.step("classifier.w", &mut net.classifier_w, &grads.wrt(classifier.0), sgd);
    state.opt.step("classifier.b", &mut net.classifier_b, &grads.wrt(classifier.1), sgd);
    for key in &keys {
        let (scale, shift) = bn_affine[&key.0];
        let st = net.bn.get_mut(key).expect("key from bn_keys");
        let prefix = format!("bn.{}.{}", key.0, key.1);
        state.opt.step(&format!("{prefix}.scale"), &mut st.scale, &grads.wrt(scale), sgd);
        state.opt.step(&format!("{prefix}.shift"), &mut st.shift, &grads.wrt(shift), sgd);
    }
    // Parameters changed, so any recorded calibration is stale.
    net.set_calibrated(None);
    Ok(value)
}

/// Runs epochs `start_epoch..cfg.epochs`, calling `on_epoch(epoch, mean_loss)`
/// after each. Each epoch draws from its own seeded stream, so resuming from
/// a checkpoint reproduces an uninterrupted run apart from optimizer momentum.
pub fn train<T: Scalar>(
    net: &mut Supernet<T>,
    state: &mut TrainState<T>,
    train_split: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train_split.len() < 2 {
        return Err(Error::Data(format!(
            "training split has {} images; at least 2 are needed",
            train_split.len()
        )));
    }
    if train_split.classes != net.classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, network was built for {}",
            train_split.classes, net.classes
        )));
    }
    let steps_per_epoch = train_split.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut losses = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut rng = substream(cfg.seed, 0x7A1_0000 + epoch as u64);
        let batches = train_split.shuffled_batches(cfg.batch_size, &mut rng);
        let mut sum = 0.0;
        for (k, idx) in batches.iter().enumerate() {
            let ratios = sample_ratios(&mut rng, &net.graph, &net.grid);
            let (x, labels) = train_split.augmented_batch::<T>(idx, cfg.augment, &mut rng);
            let sgd = SgdConfig {
                lr: cfg.lr_at(epoch * steps_per_epoch + k, total),
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            sum += train_step(net, state, &x, &labels, &ratios, sgd)?;
        }
        let mean = sum / batches.len().max(1) as f64;
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}

/// Recomputes the moving statistics of the buckets used by `ratios` by
/// streaming `split` in order.
pub fn recalibrate_bn<T: Scalar>(
    net: &mut Supernet<T>,
    ratios: &RatioAssignment,
    split: &Dataset,
    batch_size: usize,
) -> Result<()> {
    if split.is_empty() {
        return Err(Error::Data("recalibration split is empty".into()));
    }
    let keys = net.bn_keys(ratios)?;
    let weights = net.generate_weights(ratios)?;
    for key in &keys {
        net.bn.get_mut(key).expect("key from bn_keys").reset_statistics();
    }
    for idx in split.sequential_batches(batch_size) {
        let (x, _) = split.batch::<T>(&idx);
        let tape = Tape::new();
        let bn_affine = bind_bn(&tape, &net.bn, &keys, false);
        let w: BTreeMap<_, _> = weights.iter().map(|(&k, v)| (k, tape.constant(v.clone()))).collect();
        let inputs = ForwardInputs {
            graph: &net.graph,
            ratios,
            grid: &net.grid,
            weights: &w,
            bn_affine: &bn_affine,
            classifier: (tape.constant(net.classifier_w.clone()), tape.constant(net.classifier_b.clone())),
        };
        forward(&inputs, tape.constant(x), BnStats::Fold(&mut net.bn), None)?;
    }
    net.set_calibrated(Some(ratios.clone()));
    Ok(())
}

/// Top-1 accuracy of the network generated for `ratios`, which must be the
/// configuration most recently recalibrated. Batches are evaluated in
/// parallel and the correct counts summed, so the result does not depend on
/// the thread count.
pub fn evaluate<T: Scalar>(
    net: &Supernet<T>,
    ratios: &RatioAssignment,
    split: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if net.calibrated_for() != Some(ratios) {
        return Err(Error::Uncalibrated(
            "batch-norm statistics were not recalibrated for this configuration".into(),
        ));
    }
    if split.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let keys = net.bn_keys(ratios)?;
    let weights = net.generate_weights(ratios)?;
    let correct: Vec<usize> = split
        .sequential_batches(batch_size)
        .par_iter()
        .map(|idx| -> Result<usize> {
            let (x, labels) = split.batch::<T>(idx);
            let tape = Tape::new();
            let bn_affine = bind_bn(&tape, &net.bn, &keys, false);
            let w: BTreeMap<_, _> = weights.iter().map(|(&k, v)| (k, tape.constant(v.clone()))).collect();
            let inputs = ForwardInputs {
                graph: &net.graph,
                ratios,
                grid: &net.grid,
                weights: &w,
                bn_affine: &bn_affine,
                classifier: (tape.constant(net.classifier_w.clone()), tape.constant(net.classifier_b.clone())),
            };
            let logits = forward(&inputs, tape.constant(x), BnStats::Moving(&net.bn), None)?.value();
            Ok(count_correct(&logits, &labels))
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / split.len() as f64)
}

/// Rows whose arg-max (lowest index on ties) equals the label.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &label)| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == label
        })
        .count()
}

/// Result of recalibrating and evaluating one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedConfigEval {
    pub ratios: RatioAssignment,
    pub accuracy: f64,
    pub flops: u64,
    pub recalibrated: bool,
}

/// Recalibrates on `recal` and evaluates on `eval`.
pub fn evaluate_config<T: Scalar>(
    net: &mut Supernet<T>,
    ratios: &RatioAssignment,
    recal: &Dataset,
    eval: &Dataset,
    batch_size: usize,
) -> Result<PrunedConfigEval> {
    recalibrate_bn(net, ratios, recal, batch_size)?;
    Ok(PrunedConfigEval {
        accuracy: evaluate(net, ratios, eval, batch_size)?,
        flops: count_flops(&net.graph, ratios)?,
        ratios: ratios.clone(),
        recalibrated: true,
    })
}
