//! The pruned convolutional network built from a topology graph, and the
//! supernet that generates its weights.
//!
//! Every convolution is followed by batch normalization and ReLU, except that
//! convolutions feeding an add skip the ReLU; the add applies it after the
//! sum. The head is global average pooling and a linear classifier whose input
//! rows are cropped to the pruned width of the last node.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gcn::{self, AggregatorKind, AggregatorParams};
use crate::graph::{
    build_adjacency, channel_count, node_features, renormalize_adjacency, ModelGraph, OpType,
    RatioAssignment,
};
use crate::hypernet::{self, HypernetParams};
use crate::init::{glorot, substream};
use crate::tensor::{batch_norm, batch_norm_eval, BatchNormState, BnMode, Scalar, Tape, Tensor, Var};

/// `(conv node, grid index of its ratio)`.
pub type BnKey = (usize, usize);

/// Index of `ratio` in `grid`.
pub fn bucket(grid: &[f64], ratio: f64) -> Result<usize> {
    grid.iter()
        .position(|&g| (g - ratio).abs() < 1e-9)
        .ok_or_else(|| Error::InvalidArgument(format!("ratio {ratio} is not on the grid {grid:?}")))
}

/// Checks the invariants of a ratio grid: values in (0, 1], ascending, with 1.0.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    let ok = !grid.is_empty()
        && grid.iter().all(|&r| r > 0.0 && r <= 1.0)
        && grid.windows(2).all(|w| w[0] < w[1])
        && grid.last() == Some(&1.0);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "ratio grid {grid:?} must be ascending values in (0, 1] ending at 1.0"
        )))
    }
}

/// How batch normalization obtains its statistics during a forward pass.
pub enum BnStats<'a, T: Scalar> {
    /// Batch statistics, nothing recorded.
    Batch,
    /// Batch statistics folded into the moving averages.
    Fold(&'a mut BTreeMap<BnKey, BatchNormState<T>>),
    /// Moving statistics.
    Moving(&'a BTreeMap<BnKey, BatchNormState<T>>),
}

/// Tape-bound inputs of one forward pass.
pub struct ForwardInputs<'a, 't, T: Scalar> {
    pub graph: &'a ModelGraph,
    pub ratios: &'a RatioAssignment,
    pub grid: &'a [f64],
    /// Weight per convolution node.
    pub weights: &'a BTreeMap<usize, Var<'t, T>>,
    /// `(scale, shift)` per convolution node.
    pub bn_affine: &'a BTreeMap<usize, (Var<'t, T>, Var<'t, T>)>,
    /// Full classifier weight (base width × classes) and bias.
    pub classifier: (Var<'t, T>, Var<'t, T>),
}

/// Runs the pruned network on `x` and returns the logits. Raw convolution
/// outputs (before normalization) of the nodes in `capture` are copied out.
pub fn forward<'t, T: Scalar>(
    inputs: &ForwardInputs<'_, 't, T>,
    x: Var<'t, T>,
    mut bn: BnStats<'_, T>,
    mut capture: Option<&mut BTreeMap<usize, Tensor<T>>>,
) -> Result<Var<'t, T>> {
    let g = inputs.graph;
    let mut acts: Vec<Option<Var<'t, T>>> = vec![None; g.len()];
    for i in 0..g.len() {
        let spec = g.node(i);
        let input = |k: usize| -> Var<'t, T> {
            acts[g.producers(i)[k]].expect("producers run before consumers")
        };
        let out = match spec.op {
            OpType::NormalConv | OpType::DepthwiseConv => {
                let src = if g.producers(i).is_empty() { x } else { input(0) };
                let w = inputs
                    .weights
                    .get(&i)
                    .ok_or_else(|| Error::InvalidArgument(format!("no weight for node {i}")))?;
                let y = if spec.op == OpType::NormalConv {
                    src.conv2d(w, spec.stride, spec.padding())?
                } else {
                    src.depthwise_conv2d(w, spec.stride, spec.padding())?
                };
                if let Some(cap) = capture.as_deref_mut() {
                    if cap.contains_key(&i) {
                        cap.insert(i, (*y.value()).clone());
                    }
                }
                let (scale, shift) = inputs.bn_affine[&i];
                let key = (i, bucket(inputs.grid, inputs.ratios.get(i))?);
                let normed = match &mut bn {
                    BnStats::Batch => y.batch_norm_batch_stats(&scale, &shift, T::of(1e-5))?.0,
                    BnStats::Fold(states) => {
                        let state = states.get_mut(&key).ok_or_else(|| missing_state(key))?;
                        batch_norm(&y, &scale, &shift, state, BnMode::Recalibrate)?
                    }
                    BnStats::Moving(states) => {
                        let state = states.get(&key).ok_or_else(|| missing_state(key))?;
                        batch_norm_eval(&y, &scale, &shift, state)?
                    }
                };
                let feeds_add = g.consumers(i).iter().any(|&c| g.node(c).op == OpType::Add);
                if feeds_add {
                    normed
                } else {
                    normed.relu()
                }
            }
            OpType::Add => {
                let mut sum = input(0);
                for k in 1..g.producers(i).len() {
                    sum = sum.add(&input(k))?;
                }
                sum.relu()
            }
            OpType::Concat => {
                let parts: Vec<_> = (0..g.producers(i).len()).map(input).collect();
                Var::concat_channels(&parts)?
            }
        };
        acts[i] = Some(out);
    }
    let sink = g.sink();
    let features = acts[sink].expect("sink computed").global_avg_pool()?;
    let width = features.shape()[1];
    let (w, b) = inputs.classifier;
    let classes = b.shape()[0];
    let rows = Rc::new((0..width * classes).collect::<Vec<_>>());
    let w = w.gather(rows, &[width, classes])?;
    features.linear(&w, &b)
}

fn missing_state(key: BnKey) -> Error {
    Error::InvalidArgument(format!("no batch-norm state for node {} bucket {}", key.0, key.1))
}

/// Options fixed when a supernet is created.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetOptions {
    pub classes: usize,
    pub grid: Vec<f64>,
    pub aggregator: AggregatorKind,
    pub hidden_layer: bool,
}

/// Aggregator, hypernetwork, classifier and privatized batch-norm states.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet<T: Scalar> {
    pub graph: ModelGraph,
    pub grid: Vec<f64>,
    pub classes: usize,
    pub aggregator: AggregatorParams<T>,
    pub hypernet: HypernetParams<T>,
    pub classifier_w: Tensor<T>,
    pub classifier_b: Tensor<T>,
    pub bn: BTreeMap<BnKey, BatchNormState<T>>,
    a_hat: Tensor<T>,
    calibrated_for: Option<RatioAssignment>,
}

impl<T: Scalar> Supernet<T> {
    pub fn new(graph: ModelGraph, opts: &SupernetOptions, seed: u64) -> Result<Self> {
        validate_grid(&opts.grid)?;
        if opts.classes < 2 {
            return Err(Error::Config("at least two classes are needed".into()));
        }
        let mut rng = substream(seed, 0x5EED_0001);
        let aggregator = AggregatorParams::init(&mut rng, opts.aggregator);
        let hypernet = HypernetParams::init(&mut rng, &graph, opts.hidden_layer);
        let sink_width = graph.node(graph.sink()).out_channels;
        let classifier_w = glorot(&mut rng, sink_width, opts.classes);
        let bn = fresh_bn_states(&graph, &opts.grid);
        Ok(Self {
            a_hat: renormalize_adjacency(&build_adjacency(&graph)),
            graph,
            grid: opts.grid.clone(),
            classes: opts.classes,
            aggregator,
            hypernet,
            classifier_w,
            classifier_b: Tensor::zeros(&[opts.classes]),
            bn,
            calibrated_for: None,
        })
    }

    pub fn a_hat(&self) -> &Tensor<T> {
        &self.a_hat
    }

    pub fn calibrated_for(&self) -> Option<&RatioAssignment> {
        self.calibrated_for.as_ref()
    }

    pub(crate) fn set_calibrated(&mut self, ratios: Option<RatioAssignment>) {
        self.calibrated_for = ratios;
    }

    pub fn options(&self) -> SupernetOptions {
        SupernetOptions {
            classes: self.classes,
            grid: self.grid.clone(),
            aggregator: self.aggregator.kind,
            hidden_layer: self.hypernet.has_hidden_layer(),
        }
    }

    /// Normalized node features for `ratios` as an l×7 tensor.
    pub fn features(&self, ratios: &RatioAssignment) -> Tensor<T> {
        node_features(&self.graph, ratios).normalized()
    }

    /// Aggregated node embeddings (l×64) for `ratios`.
    pub fn embeddings(&self, ratios: &RatioAssignment) -> Result<Tensor<T>> {
        self.aggregator.aggregate(&self.a_hat, &self.features(ratios))
    }

    /// Embeddings and generated weights recorded on `tape`, with the
    /// aggregator and hypernetwork bound by the caller.
    pub fn generate_on<'t>(
        &self,
        tape: &'t Tape<T>,
        ratios: &RatioAssignment,
        agg: &gcn::AggregatorVars<'t, T>,
        gens: &[hypernet::GeneratorVars<'t, T>],
    ) -> Result<BTreeMap<usize, Var<'t, T>>> {
        let a = tape.constant(self.a_hat.clone());
        let f = tape.constant(self.features(ratios));
        let emb = gcn::aggregate(&a, &f, agg)?;
        let ws = hypernet::generate_all(&self.graph, &emb, ratios, gens, &self.hypernet.nodes)?;
        Ok(ws.into_iter().collect())
    }

    /// Generated convolution weights for `ratios` as plain tensors.
    pub fn generate_weights(&self, ratios: &RatioAssignment) -> Result<BTreeMap<usize, Tensor<T>>> {
        let tape = Tape::new();
        let agg = self.aggregator.bind(&tape);
        let gens = self.hypernet.bind(&tape);
        let ws = self.generate_on(&tape, ratios, &agg, &gens)?;
        Ok(ws.into_iter().map(|(k, v)| (k, (*v.value()).clone())).collect())
    }

    /// Batch-norm key of every convolution node under `ratios`.
    pub fn bn_keys(&self, ratios: &RatioAssignment) -> Result<Vec<BnKey>> {
        self.graph
            .conv_nodes()
            .into_iter()
            .map(|i| Ok((i, bucket(&self.grid, ratios.get(i))?)))
            .collect()
    }
}

/// One batch-norm state per convolution node and grid value.
pub fn fresh_bn_states<T: Scalar>(g: &ModelGraph, grid: &[f64]) -> BTreeMap<BnKey, BatchNormState<T>> {
    let mut out = BTreeMap::new();
    for i in g.conv_nodes() {
        for (k, &r) in grid.iter().enumerate() {
            out.insert((i, k), BatchNormState::new(channel_count(g.node(i).out_channels, r), k));
        }
    }
    out
}

/// Binds the `(scale, shift)` pair of each key as tracked parameters.
pub fn bind_bn<'t, T: Scalar>(
    tape: &'t Tape<T>,
    states: &BTreeMap<BnKey, BatchNormState<T>>,
    keys: &[BnKey],
    trainable: bool,
) -> BTreeMap<usize, (Var<'t, T>, Var<'t, T>)> {
    keys.iter()
        .map(|key| {
            let s = &states[key];
            let bind = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            (key.0, (bind(&s.scale), bind(&s.shift)))
        })
        .collect()
}

/// Uniform draw of each free ratio from `grid`, then ratio sharing.
pub fn sample_ratios(rng: &mut impl Rng, g: &ModelGraph, grid: &[f64]) -> RatioAssignment {
    let raw: Vec<f64> = g
        .prunable()
        .iter()
        .map(|_| grid[rng.random_range(0..grid.len())])
        .collect();
    crate::graph::apply_ratio_sharing(g, &raw).expect("grid values are valid ratios")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_ratio_sharing, bundled, parse_model_description};
    use crate::init::{seeded, uniform};

    pub(crate) fn grid() -> Vec<f64> {
        (1..=10).map(|k| k as f64 / 10.0).collect()
    }

    fn opts() -> SupernetOptions {
        SupernetOptions {
            classes: 4,
            grid: grid(),
            aggregator: AggregatorKind::Graph,
            hidden_layer: false,
        }
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&grid()).is_ok());
        assert!(validate_grid(&[0.5, 0.9]).is_err());
        assert!(validate_grid(&[0.5, 0.5, 1.0]).is_err());
        assert!(validate_grid(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn bucket_lookup() {
        assert_eq!(bucket(&grid(), 0.3).unwrap(), 2);
        assert_eq!(bucket(&grid(), 0.1 + 0.2).unwrap(), 2);
        assert!(bucket(&grid(), 0.35).is_err());
    }

    #[test]
    fn forward_shapes_for_every_bundled_reduced_graph() {
        for name in ["mobilenet_v1_reduced", "mobilenet_v2_reduced", "resnet_reduced"] {
            let g = bundled::load(name).unwrap();
            let net = Supernet::<f64>::new(g.clone(), &opts(), 1).unwrap();
            let r = sample_ratios(&mut seeded(2), &g, &net.grid);
            let ws = net.generate_weights(&r).unwrap();
            let tape = Tape::new();
            let weights = ws.iter().map(|(&k, v)| (k, tape.constant(v.clone()))).collect();
            let keys = net.bn_keys(&r).unwrap();
            let inputs = ForwardInputs {
                graph: &g,
                ratios: &r,
                grid: &net.grid,
                weights: &weights,
                bn_affine: &bind_bn(&tape, &net.bn, &keys, false),
                classifier: (tape.constant(net.classifier_w.clone()), tape.constant(net.classifier_b.clone())),
            };
            let x = tape.constant(uniform(&mut seeded(3), &[5, 3, 8, 8], 1.0));
            let logits = forward(&inputs, x, BnStats::Batch, None).unwrap();
            assert_eq!(logits.shape(), vec![5, 4], "{name}");
            assert!(logits.value().is_finite());
        }
    }

    #[test]
    fn sampled_ratios_respect_sharing_and_grid() {
        let g = bundled::load("mobilenet_v2_reduced").unwrap();
        let mut rng = seeded(4);
        for _ in 0..50 {
            let r = sample_ratios(&mut rng, &g, &grid());
            for (i, n) in g.nodes().iter().enumerate() {
                assert_eq!(r.get(i), r.get(n.ratio_group));
                assert!(bucket(&grid(), r.get(i)).is_ok());
            }
        }
    }

    #[test]
    fn eval_without_statistics_is_uncalibrated() {
        let g = parse_model_description("0 conv 3 4 1 3 8\nedges:\n").unwrap();
        let net = Supernet::<f64>::new(g.clone(), &opts(), 5).unwrap();
        let r = apply_ratio_sharing(&g, &[0.5]).unwrap();
        let ws = net.generate_weights(&r).unwrap();
        let tape = Tape::new();
        let weights = ws.iter().map(|(&k, v)| (k, tape.constant(v.clone()))).collect();
        let keys = net.bn_keys(&r).unwrap();
        let inputs = ForwardInputs {
            graph: &g,
            ratios: &r,
            grid: &net.grid,
            weights: &weights,
            bn_affine: &bind_bn(&tape, &net.bn, &keys, false),
            classifier: (tape.constant(net.classifier_w.clone()), tape.constant(net.classifier_b.clone())),
        };
        let x = tape.constant(uniform(&mut seeded(6), &[2, 3, 8, 8], 1.0));
        let err = forward(&inputs, x, BnStats::Moving(&net.bn), None).unwrap_err();
        assert!(matches!(err, Error::Uncalibrated(_)));
    }
}
