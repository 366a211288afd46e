//! Residual graph-convolution aggregator over node features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::FEATURE_WIDTH;
use crate::init::glorot;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const HIDDEN: usize = 64;
pub const BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorKind {
    /// Input projection followed by the residual GCN blocks.
    Graph,
    /// Input projection only; nodes never see their neighbours.
    NodeOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<T> {
    pub kind: AggregatorKind,
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    /// `(W⁽⁰⁾, W⁽¹⁾)` per block.
    pub blocks: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Aggregator parameters recorded on a tape.
#[derive(Clone)]
pub struct AggregatorVars<'t, T: Scalar> {
    pub kind: AggregatorKind,
    pub embed_w: Var<'t, T>,
    pub embed_b: Var<'t, T>,
    pub blocks: Vec<(Var<'t, T>, Var<'t, T>)>,
}

impl<'t, T: Scalar> AggregatorVars<'t, T> {
    /// Same order as [`AggregatorParams::tensors_mut`].
    pub fn list(&self) -> Vec<Var<'t, T>> {
        let mut out = vec![self.embed_w, self.embed_b];
        for &(w0, w1) in &self.blocks {
            out.push(w0);
            out.push(w1);
        }
        out
    }
}

impl<T: Scalar> AggregatorParams<T> {
    pub fn init(rng: &mut impl Rng, kind: AggregatorKind) -> Self {
        let embed_w = glorot(rng, FEATURE_WIDTH, HIDDEN);
        let blocks = (0..BLOCKS)
            .map(|_| (glorot(rng, HIDDEN, HIDDEN), glorot(rng, HIDDEN, HIDDEN)))
            .collect();
        Self {
            kind,
            embed_w,
            embed_b: Tensor::zeros(&[HIDDEN]),
            blocks,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> AggregatorVars<'t, T> {
        AggregatorVars {
            kind: self.kind,
            embed_w: tape.param(self.embed_w.clone()),
            embed_b: tape.param(self.embed_b.clone()),
            blocks: self
                .blocks
                .iter()
                .map(|(w0, w1)| (tape.param(w0.clone()), tape.param(w1.clone())))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("gcn.embed_w".to_string(), &self.embed_w),
            ("gcn.embed_b".to_string(), &self.embed_b),
        ];
        for (k, (w0, w1)) in self.blocks.iter().enumerate() {
            out.push((format!("gcn.block{k}.w0"), w0));
            out.push((format!("gcn.block{k}.w1"), w1));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("gcn.embed_w".to_string(), &mut self.embed_w),
            ("gcn.embed_b".to_string(), &mut self.embed_b),
        ];
        for (k, (w0, w1)) in self.blocks.iter_mut().enumerate() {
            out.push((format!("gcn.block{k}.w0"), w0));
            out.push((format!("gcn.block{k}.w1"), w1));
        }
        out
    }

    /// Forward pass on plain tensors.
    pub fn aggregate(&self, a_hat: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let a = tape.constant(a_hat.clone());
        let f = tape.constant(features.clone());
        let out = aggregate(&a, &f, &vars)?.value();
        Ok((*out).clone())
    }
}

/// Affine projection of l×7 features to the hidden width.
pub fn embed_features<'t, T: Scalar>(
    features: &Var<'t, T>,
    w: &Var<'t, T>,
    b: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    features.linear(w, b)
}

/// `Z = X + ReLU(Â·ReLU(Â·X·W0)·W1)`.
pub fn gcn_block<'t, T: Scalar>(
    a_hat: &Var<'t, T>,
    x: &Var<'t, T>,
    w0: &Var<'t, T>,
    w1: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (a_shape, x_shape) = (a_hat.shape(), x.shape());
    if a_shape.len() != 2 || a_shape[0] != a_shape[1] || x_shape.len() != 2 || x_shape[0] != a_shape[0] {
        return Err(Error::shape("gcn_block", &a_shape, &x_shape));
    }
    let h = a_hat.matmul(&x.matmul(w0)?)?.relu();
    let z = a_hat.matmul(&h.matmul(w1)?)?.relu();
    x.add(&z)
}

/// Node embeddings `N` (l×64); row `i` belongs to node `i`.
pub fn aggregate<'t, T: Scalar>(
    a_hat: &Var<'t, T>,
    features: &Var<'t, T>,
    vars: &AggregatorVars<'t, T>,
) -> Result<Var<'t, T>> {
    let mut x = embed_features(features, &vars.embed_w, &vars.embed_b)?;
    if vars.kind == AggregatorKind::Graph {
        for (w0, w1) in &vars.blocks {
            x = gcn_block(a_hat, &x, w0, w1)?;
        }
    }
    Ok(x)
}

/// Pairwise mean squared distance between embedding rows.
pub fn neighbor_distance_report<T: Scalar>(n: &Tensor<T>) -> Tensor<f64> {
    let (l, width) = (n.shape()[0], n.shape()[1]);
    let mut out = Tensor::zeros(&[l, l]);
    for i in 0..l {
        for j in i + 1..l {
            let d = n
                .row(i)
                .iter()
                .zip(n.row(j))
                .map(|(a, b)| {
                    let diff = a.as_f64() - b.as_f64();
                    diff * diff
                })
                .sum::<f64>()
                / width as f64;
            out.data_mut()[i * l + j] = d;
            out.data_mut()[j * l + i] = d;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::graph::{build_adjacency, bundled, node_features, renormalize_adjacency, RatioAssignment};
    use crate::init::{seeded, uniform};

    fn params(seed: u64) -> AggregatorParams<f64> {
        AggregatorParams::init(&mut seeded(seed), AggregatorKind::Graph)
    }

    fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn zero_projection_gives_bias_rows() {
        let tape = Tape::new();
        let f = tape.constant(uniform::<f64>(&mut seeded(1), &[5, FEATURE_WIDTH], 1.0));
        let b = Tensor::from_fn(&[HIDDEN], |i| i as f64);
        let out = embed_features(&f, &tape.constant(Tensor::zeros(&[FEATURE_WIDTH, HIDDEN])), &tape.constant(b.clone()))
            .unwrap()
            .value();
        for r in 0..5 {
            assert_eq!(out.row(r), b.data());
        }
    }

    #[test]
    fn identity_projection_keeps_features() {
        let tape = Tape::new();
        let feats = uniform::<f64>(&mut seeded(2), &[4, FEATURE_WIDTH], 1.0);
        let w = Tensor::from_fn(&[FEATURE_WIDTH, HIDDEN], |k| if k / HIDDEN == k % HIDDEN { 1.0 } else { 0.0 });
        let out = embed_features(&tape.constant(feats.clone()), &tape.constant(w), &tape.constant(Tensor::zeros(&[HIDDEN])))
            .unwrap()
            .value();
        for r in 0..4 {
            assert_eq!(&out.row(r)[..FEATURE_WIDTH], feats.row(r));
            assert!(out.row(r)[FEATURE_WIDTH..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embedding_matches_product_oracle() {
        let p = params(3);
        let feats = uniform::<f64>(&mut seeded(4), &[6, FEATURE_WIDTH], 1.0);
        let tape = Tape::new();
        let vars = p.bind(&tape);
        let got = embed_features(&tape.constant(feats.clone()), &vars.embed_w, &vars.embed_b).unwrap().value();
        let want = matmul(feats.data(), p.embed_w.data(), 6, FEATURE_WIDTH, HIDDEN);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_block_weights_are_identity() {
        let mut p = params(5);
        for (w0, w1) in &mut p.blocks {
            *w0 = Tensor::zeros(&[HIDDEN, HIDDEN]);
            *w1 = Tensor::zeros(&[HIDDEN, HIDDEN]);
        }
        let g = bundled::load("mobilenet_v2_reduced").unwrap();
        let a_hat = renormalize_adjacency(&build_adjacency(&g));
        let feats = node_features(&g, &RatioAssignment::full(&g)).normalized();
        let out = p.aggregate(&a_hat, &feats).unwrap();
        let mut node_only = p.clone();
        node_only.kind = AggregatorKind::NodeOnly;
        assert_eq!(out, node_only.aggregate(&a_hat, &feats).unwrap());
    }

    #[test]
    fn single_node_block() {
        let p = params(6);
        let x = uniform::<f64>(&mut seeded(7), &[1, HIDDEN], 1.0);
        let tape = Tape::new();
        let (w0, w1) = (&p.blocks[0].0, &p.blocks[0].1);
        let z = gcn_block(
            &tape.constant(Tensor::full(&[1, 1], 1.0)),
            &tape.constant(x.clone()),
            &tape.constant(w0.clone()),
            &tape.constant(w1.clone()),
        )
        .unwrap()
        .value();
        let h: Vec<f64> = matmul(x.data(), w0.data(), 1, HIDDEN, HIDDEN).iter().map(|v| v.max(0.0)).collect();
        let o: Vec<f64> = matmul(&h, w1.data(), 1, HIDDEN, HIDDEN).iter().map(|v| v.max(0.0)).collect();
        for k in 0..HIDDEN {
            assert!((z.data()[k] - (x.data()[k] + o[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn block_matches_stepwise_oracle() {
        let p = params(8);
        let l = 5;
        let mut rng = seeded(9);
        let mut a = Tensor::zeros(&[l, l]);
        for i in 0..l {
            for j in i + 1..l {
                if rng.random_bool(0.5) {
                    a.data_mut()[i * l + j] = 1.0;
                    a.data_mut()[j * l + i] = 1.0;
                }
            }
        }
        let a_hat = renormalize_adjacency(&a);
        let x = uniform::<f64>(&mut rng, &[l, HIDDEN], 1.0);
        let (w0, w1) = (&p.blocks[0].0, &p.blocks[0].1);
        let tape = Tape::new();
        let z = gcn_block(
            &tape.constant(a_hat.clone()),
            &tape.constant(x.clone()),
            &tape.constant(w0.clone()),
            &tape.constant(w1.clone()),
        )
        .unwrap()
        .value();
        let xw = matmul(x.data(), w0.data(), l, HIDDEN, HIDDEN);
        let h: Vec<f64> = matmul(a_hat.data(), &xw, l, l, HIDDEN).iter().map(|v| v.max(0.0)).collect();
        let hw = matmul(&h, w1.data(), l, HIDDEN, HIDDEN);
        let o: Vec<f64> = matmul(a_hat.data(), &hw, l, l, HIDDEN).iter().map(|v| v.max(0.0)).collect();
        for k in 0..l * HIDDEN {
            assert!((z.data()[k] - (x.data()[k] + o[k])).abs() < 1e-6);
        }
    }

    #[test]
    fn block_shape_mismatch() {
        let tape = Tape::new();
        let err = gcn_block(
            &tape.constant(Tensor::<f64>::zeros(&[3, 3])),
            &tape.constant(Tensor::zeros(&[4, HIDDEN])),
            &tape.constant(Tensor::zeros(&[HIDDEN, HIDDEN])),
            &tape.constant(Tensor::zeros(&[HIDDEN, HIDDEN])),
        );
        assert!(err.is_err());
    }

    #[test]
    fn v1_output_shape() {
        let g = bundled::load("mobilenet_v1_like").unwrap();
        let a_hat = renormalize_adjacency(&build_adjacency(&g));
        let feats = node_features(&g, &RatioAssignment::full(&g)).normalized();
        let out = params(10).aggregate(&a_hat, &feats).unwrap();
        assert_eq!(out.shape(), &[27, 64]);
    }

    #[test]
    fn permutation_equivariance() {
        use rand::seq::SliceRandom;
        let g = bundled::load("resnet_reduced").unwrap();
        let p = params(11);
        let a_hat = renormalize_adjacency(&build_adjacency(&g));
        let feats = node_features(&g, &RatioAssignment::full(&g)).normalized();
        let out = p.aggregate(&a_hat, &feats).unwrap();

        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.shuffle(&mut seeded(12));
        let pg = g.permuted(&perm);
        let pa = renormalize_adjacency(&build_adjacency(&pg));
        let pf = node_features(&pg, &RatioAssignment::full(&pg)).normalized();
        let pout = p.aggregate(&pa, &pf).unwrap();
        for i in 0..g.len() {
            for k in 0..HIDDEN {
                assert!((out.at(&[i, k]) - pout.at(&[perm[i], k])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = bundled::load("mobilenet_v2_reduced").unwrap();
        let a_hat = renormalize_adjacency(&build_adjacency::<f64>(&g));
        let feats = node_features(&g, &RatioAssignment::full(&g)).normalized::<f64>();
        let p = params(13);
        let probe = uniform::<f64>(&mut seeded(14), &[g.len(), HIDDEN], 1.0);
        let tensors: Vec<Tensor<f64>> = p.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let res = gradcheck::check(&tensors, gradcheck::DEFAULT_STEP, |tape, vs| {
            let vars = AggregatorVars {
                kind: AggregatorKind::Graph,
                embed_w: vs[0],
                embed_b: vs[1],
                blocks: vec![(vs[2], vs[3]), (vs[4], vs[5])],
            };
            let out = aggregate(&tape.constant(a_hat.clone()), &tape.constant(feats.clone()), &vars)?;
            Ok(out.mul(&tape.constant(probe.clone()))?.sum())
        })
        .unwrap();
        assert!(res.max_rel_error < 1e-4, "{res:?}");
    }

    #[test]
    fn distance_report_examples() {
        let same = Tensor::<f64>::full(&[3, HIDDEN], 0.7);
        assert!(neighbor_distance_report(&same).data().iter().all(|&v| v == 0.0));
        let e = Tensor::<f64>::from_fn(&[2, HIDDEN], |k| if k == 0 || k == HIDDEN + 1 { 1.0 } else { 0.0 });
        let d = neighbor_distance_report(&e);
        assert_eq!(d.data(), &[0.0, 0.03125, 0.03125, 0.0]);
    }

    #[test]
    fn distance_report_matches_double_loop() {
        let n = uniform::<f64>(&mut seeded(15), &[7, HIDDEN], 2.0);
        let d = neighbor_distance_report(&n);
        for i in 0..7 {
            for j in 0..7 {
                let mut acc = 0.0;
                for k in 0..HIDDEN {
                    acc += (n.at(&[i, k]) - n.at(&[j, k])).powi(2);
                }
                assert!((d.at(&[i, j]) - acc / HIDDEN as f64).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let mut rng = seeded(16);
        let p = params(17);
        for _ in 0..200 {
            let l = rng.random_range(1..12);
            let mut a = Tensor::zeros(&[l, l]);
            for i in 0..l {
                for j in i + 1..l {
                    if rng.random_bool(0.4) {
                        a.data_mut()[i * l + j] = 1.0;
                        a.data_mut()[j * l + i] = 1.0;
                    }
                }
            }
            let f = uniform::<f64>(&mut rng, &[l, FEATURE_WIDTH], 1.0);
            assert!(p.aggregate(&renormalize_adjacency(&a), &f).unwrap().is_finite());
        }
    }
}
