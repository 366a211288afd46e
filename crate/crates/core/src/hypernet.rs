//! Per-layer fully connected generators that emit convolution weights from
//! node embeddings, cropped to the pruned layer shape.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gcn::HIDDEN;
use crate::graph::{channel_count, ModelGraph, NodeSpec, OpType, RatioAssignment};
use crate::init::uniform;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One generator: optional 64→64 ReLU layer, then 64→(full weight count).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    pub hidden: Option<(Tensor<T>, Tensor<T>)>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone)]
pub struct GeneratorVars<'t, T: Scalar> {
    pub hidden: Option<(Var<'t, T>, Var<'t, T>)>,
    pub w: Var<'t, T>,
    pub b: Var<'t, T>,
}

/// Weight shape of the unpruned layer: `(Cout, Cin, K, K)`, or `(C, 1, K, K)`
/// for depthwise convolutions.
pub fn full_shape(spec: &NodeSpec) -> [usize; 4] {
    match spec.op {
        OpType::DepthwiseConv => [spec.out_channels, 1, spec.kernel, spec.kernel],
        _ => [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
    }
}

/// Flat indices of the leading `(cout, cin)` channel block inside the full
/// row-major weight.
pub fn crop_indices(full: [usize; 4], cout: usize, cin: usize) -> Vec<usize> {
    let kk = full[2] * full[3];
    let mut idx = Vec::with_capacity(cout * cin * kk);
    for o in 0..cout {
        for i in 0..cin {
            let base = (o * full[1] + i) * kk;
            idx.extend(base..base + kk);
        }
    }
    idx
}

impl<T: Scalar> GeneratorParams<T> {
    /// Uniform in ±1/√64, zero output bias.
    pub fn init(rng: &mut impl Rng, spec: &NodeSpec, hidden_layer: bool) -> Self {
        let out: usize = full_shape(spec).iter().product();
        let bound = 1.0 / (HIDDEN as f64).sqrt();
        let hidden = hidden_layer.then(|| (uniform(rng, &[HIDDEN, HIDDEN], bound), Tensor::zeros(&[HIDDEN])));
        Self {
            hidden,
            w: uniform(rng, &[HIDDEN, out], bound),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn output_len(&self) -> usize {
        self.b.len()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> GeneratorVars<'t, T> {
        GeneratorVars {
            hidden: self
                .hidden
                .as_ref()
                .map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone()))),
            w: tape.param(self.w.clone()),
            b: tape.param(self.b.clone()),
        }
    }
}

impl<'t, T: Scalar> GeneratorVars<'t, T> {
    pub fn list(&self) -> Vec<Var<'t, T>> {
        let mut out = Vec::new();
        if let Some((w, b)) = self.hidden {
            out.push(w);
            out.push(b);
        }
        out.push(self.w);
        out.push(self.b);
        out
    }

    fn trunk(&self, n_i: &Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.hidden {
            Some((w, b)) => Ok(n_i.linear(w, b)?.relu()),
            None => Ok(*n_i),
        }
    }

    /// The complete output vector `L` as a 1×P row.
    pub fn full_output(&self, n_i: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.trunk(n_i)?.linear(&self.w, &self.b)
    }

    /// Generates only the columns in `idx`. Equal elementwise to gathering
    /// `idx` from [`full_output`](Self::full_output), without computing the rest.
    fn cropped_output(&self, n_i: &Var<'t, T>, idx: &[usize]) -> Result<Var<'t, T>> {
        let h = self.trunk(n_i)?;
        let p = self.b.shape()[0];
        let rows = self.w.shape()[0];
        let mut w_idx = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            w_idx.extend(idx.iter().map(|&j| r * p + j));
        }
        let w = self.w.gather(Rc::new(w_idx), &[rows, idx.len()])?;
        let b = self.b.gather(Rc::new(idx.to_vec()), &[idx.len()])?;
        h.linear(&w, &b)
    }
}

/// Weights for one layer from its 1×64 embedding row, cropped to
/// `(channel_count(Cout, own_ratio), channel_count(Cin, producer_ratio), K, K)`.
/// Depthwise layers crop only the channel axis, by `own_ratio`.
pub fn generate_layer_weights<'t, T: Scalar>(
    n_i: &Var<'t, T>,
    gen: &GeneratorVars<'t, T>,
    spec: &NodeSpec,
    own_ratio: f64,
    producer_ratio: f64,
) -> Result<Var<'t, T>> {
    let cout = channel_count(spec.out_channels, own_ratio);
    let cin = match spec.op {
        OpType::DepthwiseConv => 1,
        _ => channel_count(spec.in_channels, producer_ratio),
    };
    generate_cropped(n_i, gen, spec, cout, cin)
}

/// As [`generate_layer_weights`] with explicit channel counts.
pub fn generate_cropped<'t, T: Scalar>(
    n_i: &Var<'t, T>,
    gen: &GeneratorVars<'t, T>,
    spec: &NodeSpec,
    cout: usize,
    cin: usize,
) -> Result<Var<'t, T>> {
    let full = full_shape(spec);
    if cout == 0 || cin == 0 || cout > full[0] || cin > full[1] {
        return Err(Error::InvalidArgument(format!(
            "crop ({cout}, {cin}) outside full weight shape {full:?}"
        )));
    }
    let shape = [cout, cin, full[2], full[3]];
    if cout == full[0] && cin == full[1] {
        return gen.full_output(n_i)?.reshape(&shape);
    }
    let idx = crop_indices(full, cout, cin);
    gen.cropped_output(n_i, &idx)?.reshape(&shape)
}

/// Generators for every convolution node (normal and depthwise).
#[derive(Debug, Clone, PartialEq)]
pub struct HypernetParams<T> {
    /// Convolution node ids, index-aligned with `generators`.
    pub nodes: Vec<usize>,
    pub generators: Vec<GeneratorParams<T>>,
}

impl<T: Scalar> HypernetParams<T> {
    pub fn init(rng: &mut impl Rng, g: &ModelGraph, hidden_layer: bool) -> Self {
        let nodes = g.conv_nodes();
        let generators = nodes
            .iter()
            .map(|&i| GeneratorParams::init(rng, g.node(i), hidden_layer))
            .collect();
        Self { nodes, generators }
    }

    pub fn has_hidden_layer(&self) -> bool {
        self.generators.first().is_some_and(|g| g.hidden.is_some())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<GeneratorVars<'t, T>> {
        self.generators.iter().map(|g| g.bind(tape)).collect()
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (&node, gen) in self.nodes.iter().zip(&self.generators) {
            if let Some((w, b)) = &gen.hidden {
                out.push((format!("hyper.{node}.hidden_w"), w));
                out.push((format!("hyper.{node}.hidden_b"), b));
            }
            out.push((format!("hyper.{node}.w"), &gen.w));
            out.push((format!("hyper.{node}.b"), &gen.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (&node, gen) in self.nodes.iter().zip(self.generators.iter_mut()) {
            if let Some((w, b)) = &mut gen.hidden {
                out.push((format!("hyper.{node}.hidden_w"), w));
                out.push((format!("hyper.{node}.hidden_b"), b));
            }
            out.push((format!("hyper.{node}.w"), &mut gen.w));
            out.push((format!("hyper.{node}.b"), &mut gen.b));
        }
        out
    }
}

/// Weights for every convolution node, as `(node, weight)` pairs in node order.
/// Verifies that each consumer's input width equals its producer's output
/// width after rounding.
pub fn generate_all<'t, T: Scalar>(
    g: &ModelGraph,
    embeddings: &Var<'t, T>,
    ratios: &RatioAssignment,
    gens: &[GeneratorVars<'t, T>],
    conv_nodes: &[usize],
) -> Result<Vec<(usize, Var<'t, T>)>> {
    let rows = embeddings.shape()[0];
    if rows != g.len() {
        return Err(Error::shape("generate_all", &embeddings.shape(), &[g.len(), HIDDEN]));
    }
    if ratios.len() != g.len() {
        return Err(Error::InvalidArgument(format!(
            "assignment covers {} nodes, graph has {}",
            ratios.len(),
            g.len()
        )));
    }
    check_consistency(g, ratios)?;
    let mut out = Vec::with_capacity(conv_nodes.len());
    for (&node, gen) in conv_nodes.iter().zip(gens) {
        let spec = g.node(node);
        let cout = ratios.out_channels(g, node);
        let cin = match spec.op {
            OpType::DepthwiseConv => 1,
            _ => ratios.in_channels(g, node),
        };
        let n_i = embeddings.row(node)?;
        out.push((node, generate_cropped(&n_i, gen, spec, cout, cin)?));
    }
    Ok(out)
}

/// Cross-layer channel agreement for an assignment.
pub fn check_consistency(g: &ModelGraph, ratios: &RatioAssignment) -> Result<()> {
    for i in 0..g.len() {
        let spec = g.node(i);
        let out = ratios.out_channels(g, i);
        let bad = match spec.op {
            OpType::DepthwiseConv => out != ratios.in_channels(g, i),
            OpType::Add => g.producers(i).iter().any(|&p| ratios.out_channels(g, p) != out),
            _ => false,
        };
        if bad {
            return Err(Error::Graph(format!(
                "node {i} receives {} channels but emits {out}; ratios violate the sharing rules",
                ratios.in_channels(g, i)
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::graph::{apply_ratio_sharing, bundled, parse_model_description};
    use crate::init::seeded;

    fn spec(op: OpType, cin: usize, cout: usize, k: usize) -> NodeSpec {
        NodeSpec {
            op,
            in_channels: cin,
            out_channels: cout,
            stride: 1,
            kernel: k,
            spatial_in: 8,
            ratio_group: 0,
        }
    }

    fn embedding(tape: &Tape<f64>, seed: u64) -> Var<'_, f64> {
        tape.constant(uniform(&mut seeded(seed), &[1, HIDDEN], 1.0))
    }

    #[test]
    fn crop_shape_examples() {
        let s = spec(OpType::NormalConv, 64, 128, 1);
        let gen = GeneratorParams::<f64>::init(&mut seeded(1), &s, false);
        let tape = Tape::new();
        let vars = gen.bind(&tape);
        let n = embedding(&tape, 2);
        let w = generate_layer_weights(&n, &vars, &s, 0.5, 1.0).unwrap();
        assert_eq!(w.shape(), vec![64, 64, 1, 1]);
        let full = generate_layer_weights(&n, &vars, &s, 1.0, 1.0).unwrap();
        assert_eq!(full.shape(), vec![128, 64, 1, 1]);
        assert_eq!(full.value().data(), vars.full_output(&n).unwrap().value().data());
    }

    #[test]
    fn cropped_block_is_prefix_of_full_output() {
        let s = spec(OpType::NormalConv, 6, 10, 3);
        for hidden in [false, true] {
            let gen = GeneratorParams::<f64>::init(&mut seeded(3), &s, hidden);
            let tape = Tape::new();
            let vars = gen.bind(&tape);
            let n = embedding(&tape, 4);
            let full = vars.full_output(&n).unwrap().value();
            for (ro, ri) in [(0.3, 0.5), (0.7, 1.0), (1.0, 0.2)] {
                let w = generate_layer_weights(&n, &vars, &s, ro, ri).unwrap().value();
                let (co, ci) = (w.shape()[0], w.shape()[1]);
                for o in 0..co {
                    for i in 0..ci {
                        for k in 0..9 {
                            assert_eq!(w.at(&[o, i, k / 3, k % 3]), full.data()[(o * 6 + i) * 9 + k]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_crops_channel_axis_only() {
        let s = spec(OpType::DepthwiseConv, 16, 16, 3);
        let gen = GeneratorParams::<f64>::init(&mut seeded(5), &s, false);
        assert_eq!(gen.output_len(), 16 * 9);
        let tape = Tape::new();
        let w = generate_layer_weights(&embedding(&tape, 6), &gen.bind(&tape), &s, 0.25, 0.9).unwrap();
        assert_eq!(w.shape(), vec![4, 1, 3, 3]);
    }

    #[test]
    fn chain_in_channels_follow_producer() {
        let g = parse_model_description("0 conv 16 32 1 3 8\n1 conv 32 64 1 3 8\nedges:\n0 1\n").unwrap();
        let hp = HypernetParams::<f64>::init(&mut seeded(7), &g, false);
        let tape = Tape::new();
        let gens = hp.bind(&tape);
        let emb = tape.constant(uniform(&mut seeded(8), &[2, HIDDEN], 1.0));
        let r = apply_ratio_sharing(&g, &[0.5, 1.0]).unwrap();
        let ws = generate_all(&g, &emb, &r, &gens, &hp.nodes).unwrap();
        assert_eq!(ws[1].1.shape(), vec![64, 16, 3, 3]);
    }

    #[test]
    fn full_ratios_reproduce_description_shapes() {
        let g = bundled::load("mobilenet_v1_reduced").unwrap();
        let hp = HypernetParams::<f64>::init(&mut seeded(9), &g, false);
        let tape = Tape::new();
        let gens = hp.bind(&tape);
        let emb = tape.constant(uniform(&mut seeded(10), &[g.len(), HIDDEN], 1.0));
        let ws = generate_all(&g, &emb, &RatioAssignment::full(&g), &gens, &hp.nodes).unwrap();
        for (node, w) in ws {
            assert_eq!(w.shape(), full_shape(g.node(node)).to_vec());
        }
    }

    // Independent per-layer shape enumeration from the description text.
    #[test]
    fn uniform_half_parameter_count_matches_enumeration() {
        let g = bundled::load("mobilenet_v1_like").unwrap();
        let r = apply_ratio_sharing(&g, &vec![0.5; g.prunable().len()]).unwrap();
        let mut expected = 0usize;
        let mut prev_out = 3usize;
        for line in bundled::MOBILENET_V1_LIKE.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line == "edges:" {
                break;
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 7 {
                continue;
            }
            let out: usize = t[3].parse().unwrap();
            let k: usize = t[5].parse().unwrap();
            let half = ((out as f64) / 2.0).round() as usize;
            expected += match t[1] {
                "conv" => half * prev_out * k * k,
                _ => half * k * k,
            };
            prev_out = half;
        }
        let total: usize = g
            .conv_nodes()
            .iter()
            .map(|&i| {
                let s = g.node(i);
                let cin = if s.op == OpType::DepthwiseConv { 1 } else { r.in_channels(&g, i) };
                r.out_channels(&g, i) * cin * s.kernel * s.kernel
            })
            .sum();
        assert_eq!(total, expected);
        assert_eq!(total as u64, crate::graph::count_params(&g, &r));
    }

    #[test]
    fn inconsistent_assignment_is_rejected() {
        let g = bundled::load("mobilenet_v1_reduced").unwrap();
        let hp = HypernetParams::<f64>::init(&mut seeded(11), &g, false);
        let tape = Tape::new();
        let gens = hp.bind(&tape);
        let emb = tape.constant(uniform(&mut seeded(12), &[g.len(), HIDDEN], 1.0));
        // depthwise node 1 at a different ratio than its producer
        let mut raw = vec![1.0; g.len()];
        raw[0] = 0.5;
        let bad = RatioAssignment::unshared(raw);
        assert!(matches!(generate_all(&g, &emb, &bad, &gens, &hp.nodes), Err(Error::Graph(_))));
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let s = spec(OpType::NormalConv, 4, 6, 3);
        for hidden in [false, true] {
            let gen = GeneratorParams::<f64>::init(&mut seeded(13), &s, hidden);
            let n = uniform::<f64>(&mut seeded(14), &[1, HIDDEN], 1.0);
            let probe = uniform::<f64>(&mut seeded(15), &[3, 2, 3, 3], 1.0);
            let mut params = vec![n];
            if let Some((w, b)) = &gen.hidden {
                params.push(w.clone());
                params.push(b.clone());
            }
            params.push(gen.w.clone());
            params.push(gen.b.clone());
            let res = gradcheck::check(&params, gradcheck::DEFAULT_STEP, |tape, vs| {
                let (hidden, rest) = if vs.len() == 5 { (Some((vs[1], vs[2])), &vs[3..]) } else { (None, &vs[1..]) };
                let vars = GeneratorVars { hidden, w: rest[0], b: rest[1] };
                let w = generate_layer_weights(&vs[0], &vars, &s, 0.5, 0.5)?;
                let sq = w.mul(&w)?;
                Ok(sq.mul(&tape.constant(probe.clone()))?.sum())
            })
            .unwrap();
            assert!(res.max_rel_error < 1e-4, "{res:?}");
        }
    }
}
