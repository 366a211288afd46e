//! Training a pruned network from scratch with ordinary weights.
//!
//! The chosen configuration is materialized into a new graph whose channel
//! counts are the pruned widths, then trained with the same forward pass the
//! supernet uses, every node at ratio 1 and a single batch-norm bucket.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::{Container, Kind, TrainingMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gcn::AggregatorKind;
use crate::graph::{ModelGraph, NodeSpec, RatioAssignment};
use crate::init::{glorot, normal, substream};
use crate::network::{bind_bn, fresh_bn_states, forward, BnKey, BnStats, ForwardInputs, SupernetOptions};
use crate::tensor::{BatchNormState, Scalar, Tape, Tensor};
use crate::trainer::{count_correct, TrainConfig, TrainState};

/// Graph with every node's channel counts replaced by its pruned widths.
pub fn materialize(g: &ModelGraph, ratios: &RatioAssignment) -> Result<ModelGraph> {
    crate::hypernet::check_consistency(g, ratios)?;
    let nodes: Vec<NodeSpec> = (0..g.len())
        .map(|i| {
            let mut n = g.node(i).clone();
            n.in_channels = ratios.in_channels(g, i);
            n.out_channels = ratios.out_channels(g, i);
            n
        })
        .collect();
    let edges: Vec<(usize, usize)> = g.edges().iter().copied().collect();
    ModelGraph::from_parts(nodes, &edges)
}

const GRID: [f64; 1] = [1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct StaticNet<T: Scalar> {
    pub graph: ModelGraph,
    pub classes: usize,
    pub weights: BTreeMap<usize, Tensor<T>>,
    pub bn: BTreeMap<BnKey, BatchNormState<T>>,
    pub classifier_w: Tensor<T>,
    pub classifier_b: Tensor<T>,
}

impl<T: Scalar> StaticNet<T> {
    /// He-normal convolution weights, Glorot classifier.
    pub fn new(graph: ModelGraph, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("at least two classes are needed".into()));
        }
        let mut rng = substream(seed, 0x5747_1C00);
        let mut weights = BTreeMap::new();
        for i in graph.conv_nodes() {
            let n = graph.node(i);
            let shape = crate::hypernet::full_shape(n);
            let fan_in = shape[1] * shape[2] * shape[3];
            weights.insert(i, normal(&mut rng, &shape, (2.0 / fan_in as f64).sqrt()));
        }
        let width = graph.node(graph.sink()).out_channels;
        Ok(Self {
            classifier_w: glorot(&mut rng, width, classes),
            classifier_b: Tensor::zeros(&[classes]),
            bn: fresh_bn_states(&graph, &GRID),
            weights,
            classes,
            graph,
        })
    }

    fn keys(&self) -> Vec<BnKey> {
        self.graph.conv_nodes().into_iter().map(|i| (i, 0)).collect()
    }

    fn logits<'t>(&self, tape: &'t Tape<T>, x: &Tensor<T>, bn: BnStats<'_, T>, trainable: bool) -> Result<Logits<'t, T>> {
        let bind = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let weights: BTreeMap<usize, _> = self.weights.iter().map(|(&k, w)| (k, bind(w))).collect();
        let bn_affine = bind_bn(tape, &self.bn, &self.keys(), trainable);
        let classifier = (bind(&self.classifier_w), bind(&self.classifier_b));
        let ratios = RatioAssignment::full(&self.graph);
        let inputs = ForwardInputs {
            graph: &self.graph,
            ratios: &ratios,
            grid: &GRID,
            weights: &weights,
            bn_affine: &bn_affine,
            classifier,
        };
        let out = forward(&inputs, tape.constant(x.clone()), bn, None)?;
        Ok(Logits {
            out,
            weights,
            bn_affine,
            classifier,
        })
    }

    pub fn to_container(&self, meta: TrainingMeta) -> Container<T> {
        let mut tensors: Vec<(String, Tensor<T>)> =
            self.weights.iter().map(|(k, w)| (format!("conv.{k}.w"), w.clone())).collect();
        tensors.push(("classifier.w".into(), self.classifier_w.clone()));
        tensors.push(("classifier.b".into(), self.classifier_b.clone()));
        Container {
            kind: Kind::Static,
            hash: self.graph.description_hash(),
            meta,
            options: SupernetOptions {
                classes: self.classes,
                grid: GRID.to_vec(),
                aggregator: AggregatorKind::Graph,
                hidden_layer: false,
            },
            calibrated_for: None,
            tensors,
            bn: self.bn.clone(),
        }
    }

    /// `graph` is the materialized graph the container was written for.
    pub fn from_container(graph: &ModelGraph, c: &Container<T>) -> Result<Self> {
        c.check(graph, Kind::Static)?;
        let mut net = Self::new(graph.clone(), c.options.classes, 0)?;
        let mut dst: Vec<(String, &mut Tensor<T>)> =
            net.weights.iter_mut().map(|(k, w)| (format!("conv.{k}.w"), w)).collect();
        dst.push(("classifier.w".into(), &mut net.classifier_w));
        dst.push(("classifier.b".into(), &mut net.classifier_b));
        c.fill(dst)?;
        c.fill_bn(&mut net.bn)?;
        Ok(net)
    }
}

struct Logits<'t, T: Scalar> {
    out: crate::tensor::Var<'t, T>,
    weights: BTreeMap<usize, crate::tensor::Var<'t, T>>,
    bn_affine: BTreeMap<usize, (crate::tensor::Var<'t, T>, crate::tensor::Var<'t, T>)>,
    classifier: (crate::tensor::Var<'t, T>, crate::tensor::Var<'t, T>),
}

/// Same epoch structure, seeding and schedule as supernet training.
pub fn train_static<T: Scalar>(
    net: &mut StaticNet<T>,
    state: &mut TrainState<T>,
    train_split: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train_split.len() < 2 || train_split.classes != net.classes {
        return Err(Error::Data(format!(
            "training split needs at least 2 images of {} classes; got {} images of {} classes",
            net.classes,
            train_split.len(),
            train_split.classes
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
            let (x, labels) = train_split.augmented_batch::<T>(idx, cfg.augment, &mut rng);
            let sgd = crate::tensor::SgdConfig {
                lr: cfg.lr_at(epoch * steps_per_epoch + k, total),
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            let tape = Tape::new();
            let l = net.logits(&tape, &x, BnStats::Batch, true)?;
            let loss = l.out.softmax_cross_entropy(&labels)?;
            let value = loss.value().data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} in epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            for (node, w) in net.weights.iter_mut() {
                state.opt.step(&format!("conv.{node}.w"), w, &grads.wrt(l.weights[node]), sgd);
            }
            for (key, st) in net.bn.iter_mut() {
                let (s, b) = l.bn_affine[&key.0];
                state.opt.step(&format!("bn.{}.scale", key.0), &mut st.scale, &grads.wrt(s), sgd);
                state.opt.step(&format!("bn.{}.shift", key.0), &mut st.shift, &grads.wrt(b), sgd);
            }
            state.opt.step("classifier.w", &mut net.classifier_w, &grads.wrt(l.classifier.0), sgd);
            state.opt.step("classifier.b", &mut net.classifier_b, &grads.wrt(l.classifier.1), sgd);
            sum += value;
        }
        let mean = sum / batches.len().max(1) as f64;
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}

pub fn recalibrate_static<T: Scalar>(net: &mut StaticNet<T>, split: &Dataset, batch_size: usize) -> Result<()> {
    if split.is_empty() {
        return Err(Error::Data("recalibration split is empty".into()));
    }
    net.bn.values_mut().for_each(BatchNormState::reset_statistics);
    for idx in split.sequential_batches(batch_size) {
        let (x, _) = split.batch::<T>(&idx);
        let tape = Tape::new();
        let mut bn = net.bn.clone();
        net.logits(&tape, &x, BnStats::Fold(&mut bn), false)?;
        net.bn = bn;
    }
    Ok(())
}

pub fn evaluate_static<T: Scalar>(net: &StaticNet<T>, split: &Dataset, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let correct: Vec<usize> = split
        .sequential_batches(batch_size)
        .par_iter()
        .map(|idx| -> Result<usize> {
            let (x, labels) = split.batch::<T>(idx);
            let tape = Tape::new();
            let l = net.logits(&tape, &x, BnStats::Moving(&net.bn), false)?;
            Ok(count_correct(&l.out.value(), &labels))
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use crate::graph::{apply_ratio_sharing, bundled};

    fn data() -> Dataset {
        Dataset::synthetic(&SynthSpec {
            classes: 4,
            count: 400,
            size: 8,
            seed: 3,
            noise: 1.0,
        })
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 8,
            init_lr: 0.2,
            seed: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn materialized_widths_follow_ratios() {
        let g = bundled::load("mobilenet_v2_reduced").unwrap();
        let raw: Vec<f64> = (0..g.prunable().len()).map(|k| [0.5, 0.3][k % 2]).collect();
        let r = apply_ratio_sharing(&g, &raw).unwrap();
        let m = materialize(&g, &r).unwrap();
        for i in 0..g.len() {
            assert_eq!(m.node(i).out_channels, r.out_channels(&g, i));
        }
        assert_eq!(materialize(&g, &RatioAssignment::full(&g)).unwrap(), g);
        assert_eq!(
            crate::graph::count_flops(&m, &RatioAssignment::full(&m)).unwrap(),
            crate::graph::count_flops(&g, &r).unwrap()
        );
    }

    #[test]
    fn retraining_beats_chance_and_is_deterministic() {
        let g = bundled::load("mobilenet_v1_reduced").unwrap();
        let raw = vec![0.5; g.prunable().len()];
        let m = materialize(&g, &apply_ratio_sharing(&g, &raw).unwrap()).unwrap();
        let splits = data().split();
        let run = || {
            let mut net = StaticNet::<f32>::new(m.clone(), 4, 1).unwrap();
            train_static(&mut net, &mut TrainState::default(), &splits.train, &cfg(), 0, |_, _| {}).unwrap();
            recalibrate_static(&mut net, &splits.recalibration, 32).unwrap();
            let acc = evaluate_static(&net, &splits.evaluation, 32).unwrap();
            (net, acc)
        };
        let (a, acc) = run();
        let (b, acc_b) = run();
        assert_eq!(a, b);
        assert_eq!(acc, acc_b);
        let n = splits.evaluation.len() as f64;
        let chance = 0.25 + 3.0 * (0.25 * 0.75 / n).sqrt();
        assert!(acc >= chance, "accuracy {acc} vs chance bound {chance}");
    }

    #[test]
    fn container_round_trip() {
        let g = bundled::load("resnet_reduced").unwrap();
        let net = StaticNet::<f32>::new(g.clone(), 3, 4).unwrap();
        let meta = TrainingMeta { epochs_completed: 2, seed: 4 };
        let bytes = net.to_container(meta).to_bytes();
        let c = Container::<f32>::from_bytes(&bytes).unwrap();
        let back = StaticNet::from_container(&g, &c).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_container(meta).to_bytes(), bytes);
    }
}
