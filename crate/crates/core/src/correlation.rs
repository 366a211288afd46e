//! Pearson correlation between the filters of two convolution layers.
//!
//! Activations are flattened over every (image, row, column) position of a
//! probe batch, giving one sample vector per channel. Two correlation modes
//! exist: the textbook coefficient, and a literal variant that sums the
//! absolute normalized products without centering.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::RatioAssignment;
use crate::network::{bind_bn, forward, BnStats, ForwardInputs, Supernet};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// `Σ_{s,t} |F1·F2 / (σ1·σ2)|`, uncentered and unbounded.
    Paper,
    /// Mean-centered Pearson coefficient in [−1, 1].
    Standard,
}

impl CorrelationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Config(format!("unknown correlation mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Standard => "standard",
        }
    }
}

/// Activations of one layer: `positions × channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    pub layer: usize,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub source: String,
}

impl ActivationStack {
    /// From an N×C×H×W tensor.
    pub fn from_nchw<T: Scalar>(layer: usize, t: &Tensor<T>, source: impl Into<String>) -> Result<Self> {
        let &[n, c, h, w] = t.shape() else {
            return Err(Error::shape("activation stack", t.shape(), &[0, 0, 0, 0]));
        };
        if c == 0 {
            return Err(Error::InvalidArgument(format!("layer {layer} has no channels")));
        }
        let mut data = vec![0.0; n * h * w * c];
        for img in 0..n {
            for ch in 0..c {
                for p in 0..h * w {
                    data[(img * h * w + p) * c + ch] = t.data()[(img * c + ch) * h * w + p].as_f64();
                }
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation in layer {layer}")));
        }
        Ok(Self {
            layer,
            images: n,
            height: h,
            width: w,
            channels: c,
            data,
            source: source.into(),
        })
    }

    pub fn positions(&self) -> usize {
        self.images * self.height * self.width
    }

    pub fn channel(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(k).step_by(self.channels).copied()
    }

    fn mean_std(&self, k: usize) -> (f64, f64) {
        let n = self.positions() as f64;
        let mean = self.channel(k).sum::<f64>() / n;
        let var = self.channel(k).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// `m × n` matrix with `None` where a channel had zero variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Option<f64>>,
    pub skipped_rows: Vec<usize>,
    pub skipped_cols: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.cols + j]
    }
}

pub fn pearson_matrix(f1: &ActivationStack, f2: &ActivationStack, mode: CorrelationMode) -> Result<CorrelationMatrix> {
    if f1.positions() != f2.positions() || f1.height != f2.height || f1.width != f2.width {
        return Err(Error::shape(
            "pearson_matrix",
            &[f1.images, f1.height, f1.width],
            &[f2.images, f2.height, f2.width],
        ));
    }
    let s1: Vec<_> = (0..f1.channels).map(|k| f1.mean_std(k)).collect();
    let s2: Vec<_> = (0..f2.channels).map(|k| f2.mean_std(k)).collect();
    let skipped = |s: &[(f64, f64)]| (0..s.len()).filter(|&k| s[k].1 == 0.0).collect::<Vec<_>>();
    let (skipped_rows, skipped_cols) = (skipped(&s1), skipped(&s2));
    let centered_ss = |f: &ActivationStack, s: &[(f64, f64)]| -> Vec<f64> {
        (0..f.channels).map(|k| f.channel(k).map(|v| (v - s[k].0).powi(2)).sum()).collect()
    };
    let (ss1, ss2) = (centered_ss(f1, &s1), centered_ss(f2, &s2));
    let (m, c) = (f1.channels, f2.channels);
    let mut values = vec![None; m * c];
    for i in 0..m {
        let (mi, si) = s1[i];
        if si == 0.0 {
            continue;
        }
        for j in 0..c {
            let (mj, sj) = s2[j];
            if sj == 0.0 {
                continue;
            }
            let v = match mode {
                CorrelationMode::Paper => {
                    f1.channel(i).zip(f2.channel(j)).map(|(a, b)| (a * b / (si * sj)).abs()).sum::<f64>()
                }
                CorrelationMode::Standard => {
                    // Σda·db / √(Σda²·Σdb²) is exactly ±1 for identical or
                    // negated channels, since √(s²) = s in IEEE arithmetic.
                    let cross = f1.channel(i).zip(f2.channel(j)).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>();
                    (cross / (ss1[i] * ss2[j]).sqrt()).clamp(-1.0, 1.0)
                }
            };
            values[i * c + j] = Some(v);
        }
    }
    Ok(CorrelationMatrix {
        rows: m,
        cols: c,
        values,
        skipped_rows,
        skipped_cols,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Entries with `|value| > tau`, largest magnitude first.
pub fn high_corr_pairs(p: &CorrelationMatrix, tau: f64) -> Vec<Pair> {
    let mut out: Vec<Pair> = (0..p.rows)
        .flat_map(|i| (0..p.cols).map(move |j| (i, j)))
        .filter_map(|(i, j)| p.get(i, j).map(|value| Pair { i, j, value }))
        .filter(|pr| pr.value.abs() > tau)
        .collect();
    out.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()).then((a.i, a.j).cmp(&(b.i, b.j))));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub layers: (usize, usize),
    pub mode: CorrelationMode,
    pub threshold: f64,
    #[serde(skip)]
    pub matrix: CorrelationMatrix,
    pub pairs: Vec<Pair>,
    pub skipped_first: Vec<usize>,
    pub skipped_second: Vec<usize>,
    pub source: String,
}

impl CorrelationReport {
    pub fn build(f1: &ActivationStack, f2: &ActivationStack, mode: CorrelationMode, tau: f64) -> Result<Self> {
        let matrix = pearson_matrix(f1, f2, mode)?;
        Ok(Self {
            layers: (f1.layer, f2.layer),
            mode,
            threshold: tau,
            pairs: high_corr_pairs(&matrix, tau),
            skipped_first: matrix.skipped_rows.clone(),
            skipped_second: matrix.skipped_cols.clone(),
            matrix,
            source: f1.source.clone(),
        })
    }

    /// `i,j,value` for every reported pair.
    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("i,j,value\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{}\n", p.i, p.j, p.value));
        }
        s
    }

    /// Full matrix as `i,j,value`; unavailable entries are left empty.
    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("i,j,value\n");
        for i in 0..self.matrix.rows {
            for j in 0..self.matrix.cols {
                match self.matrix.get(i, j) {
                    Some(v) => s.push_str(&format!("{i},{j},{v}\n")),
                    None => s.push_str(&format!("{i},{j},\n")),
                }
            }
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Raw convolution outputs of `layers` for the probe batch `x`, using the
/// moving statistics of the recalibrated configuration.
pub fn capture_activations<T: Scalar>(
    net: &Supernet<T>,
    ratios: &RatioAssignment,
    layers: &[usize],
    x: &Tensor<T>,
    source: &str,
) -> Result<Vec<ActivationStack>> {
    for &l in layers {
        if l >= net.graph.len() || !net.graph.node(l).op.is_conv() {
            return Err(Error::InvalidArgument(format!("layer {l} is not a convolution node of the graph")));
        }
    }
    if net.calibrated_for() != Some(ratios) {
        return Err(Error::Uncalibrated(
            "batch-norm statistics were not recalibrated for this configuration".into(),
        ));
    }
    let keys = net.bn_keys(ratios)?;
    let weights = net.generate_weights(ratios)?;
    let tape = Tape::new();
    let w = weights.iter().map(|(&k, v)| (k, tape.constant(v.clone()))).collect();
    let inputs = ForwardInputs {
        graph: &net.graph,
        ratios,
        grid: &net.grid,
        weights: &w,
        bn_affine: &bind_bn(&tape, &net.bn, &keys, false),
        classifier: (tape.constant(net.classifier_w.clone()), tape.constant(net.classifier_b.clone())),
    };
    let mut cap: BTreeMap<usize, Tensor<T>> = layers.iter().map(|&l| (l, Tensor::zeros(&[0]))).collect();
    forward(&inputs, tape.constant(x.clone()), BnStats::Moving(&net.bn), Some(&mut cap))?;
    layers.iter().map(|&l| ActivationStack::from_nchw(l, &cap[&l], source)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcn::AggregatorKind;
    use crate::graph::{bundled, parse_model_description};
    use crate::init::{seeded, uniform};
    use crate::network::{sample_ratios, SupernetOptions};
    use crate::trainer::{default_grid, recalibrate_bn};
    use proptest::prelude::*;

    fn stack(layer: usize, c: usize, data_chw: Vec<f64>, hw: usize) -> ActivationStack {
        ActivationStack::from_nchw(layer, &Tensor::new(&[1, c, hw, hw], data_chw).unwrap(), "test").unwrap()
    }

    fn random_stack(seed: u64, c: usize, hw: usize) -> ActivationStack {
        let t = uniform::<f64>(&mut seeded(seed), &[1, c, hw, hw], 2.0);
        ActivationStack::from_nchw(0, &t, "test").unwrap()
    }

    /// Literal double loop over spatial positions, HWC indexing.
    fn paper_oracle(f1: &[f64], f2: &[f64], hw: usize, m: usize, n: usize) -> Vec<f64> {
        let sd = |f: &[f64], c: usize, k: usize| {
            let vals: Vec<f64> = (0..hw * hw).map(|p| f[p * c + k]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for s in 0..hw {
                    for t in 0..hw {
                        let p = s * hw + t;
                        acc += (f1[p * m + i] * f2[p * n + j] / (sd(f1, m, i) * sd(f2, n, j))).abs();
                    }
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn paper_mode_matches_literal_loop() {
        for seed in 0..10 {
            let (a, b) = (random_stack(seed, 2, 4), random_stack(seed + 100, 3, 4));
            let p = pearson_matrix(&a, &b, CorrelationMode::Paper).unwrap();
            let oracle = paper_oracle(&a.data, &b.data, 4, 2, 3);
            for (k, o) in oracle.iter().enumerate() {
                assert!((p.values[k].unwrap() - o).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn self_and_negated_channels() {
        let a = random_stack(1, 3, 5);
        let neg = ActivationStack {
            data: a.data.iter().map(|v| -v).collect(),
            ..a.clone()
        };
        let p = pearson_matrix(&a, &a, CorrelationMode::Standard).unwrap();
        let q = pearson_matrix(&a, &neg, CorrelationMode::Standard).unwrap();
        for k in 0..3 {
            assert_eq!(p.get(k, k), Some(1.0));
            assert_eq!(q.get(k, k), Some(-1.0));
        }
    }

    #[test]
    fn constant_channels_are_skipped() {
        let mut data = vec![0.0; 2 * 9];
        for (p, v) in data[9..].iter_mut().enumerate() {
            *v = p as f64;
        }
        data[..9].fill(3.0);
        let a = stack(0, 2, data, 3);
        let p = pearson_matrix(&a, &a, CorrelationMode::Standard).unwrap();
        assert_eq!(p.skipped_rows, vec![0]);
        assert_eq!(p.skipped_cols, vec![0]);
        assert_eq!(p.get(0, 1), None);
        assert_eq!(p.get(1, 0), None);
        assert_eq!(p.get(1, 1), Some(1.0));
        assert!(high_corr_pairs(&p, 0.8).iter().all(|pr| pr.i != 0 && pr.j != 0));
    }

    #[test]
    fn mismatched_spatial_dims_error() {
        let a = random_stack(1, 2, 4);
        let b = random_stack(2, 2, 3);
        assert!(pearson_matrix(&a, &b, CorrelationMode::Standard).is_err());
    }

    fn matrix(rows: usize, cols: usize, values: Vec<Option<f64>>) -> CorrelationMatrix {
        CorrelationMatrix {
            rows,
            cols,
            values,
            skipped_rows: vec![],
            skipped_cols: vec![],
        }
    }

    #[test]
    fn pair_threshold_is_strict() {
        assert!(high_corr_pairs(&matrix(2, 2, vec![Some(0.0); 4]), 0.8).is_empty());
        let p = matrix(1, 3, vec![Some(0.8), Some(-0.81), Some(0.9)]);
        let pairs = high_corr_pairs(&p, 0.8);
        assert_eq!(pairs.iter().map(|p| p.j).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn pairs_equal_naive_filter() {
        let t = uniform::<f64>(&mut seeded(9), &[12, 9], 1.0);
        let p = matrix(12, 9, t.data().iter().map(|&v| Some(v)).collect());
        for tau in [0.0, 0.3, 0.8, 0.95] {
            let got = high_corr_pairs(&p, tau);
            let mut naive = vec![];
            for i in 0..12 {
                for j in 0..9 {
                    if t.data()[i * 9 + j].abs() > tau {
                        naive.push((i, j));
                    }
                }
            }
            let mut got_set: Vec<_> = got.iter().map(|p| (p.i, p.j)).collect();
            got_set.sort();
            assert_eq!(got_set, naive);
            assert!(got.windows(2).all(|w| w[0].value.abs() >= w[1].value.abs()));
        }
    }

    #[test]
    fn report_files() {
        let a = random_stack(3, 3, 4);
        let r = CorrelationReport::build(&a, &a, CorrelationMode::Standard, 0.8).unwrap();
        assert!(r.pairs_csv().starts_with("i,j,value\n"));
        assert_eq!(r.matrix_csv().lines().count(), 10);
        let json: serde_json::Value = serde_json::from_str(&r.summary_json()).unwrap();
        assert_eq!(json["mode"], "standard");
        assert_eq!(json["threshold"], 0.8);
        let none = CorrelationReport::build(&a, &a, CorrelationMode::Standard, 1.1).unwrap();
        assert!(none.pairs.is_empty());
    }

    fn calibrated(graph: &str, seed: u64) -> (Supernet<f64>, RatioAssignment) {
        let g = match graph {
            "v1" => bundled::load("mobilenet_v1_reduced").unwrap(),
            text => parse_model_description(text).unwrap(),
        };
        let opts = SupernetOptions {
            classes: 4,
            grid: default_grid(),
            aggregator: AggregatorKind::Graph,
            hidden_layer: false,
        };
        let mut net = Supernet::<f64>::new(g.clone(), &opts, seed).unwrap();
        let r = sample_ratios(&mut seeded(seed), &g, &net.grid);
        let data = crate::data::Dataset::synthetic(&crate::data::SynthSpec {
            classes: 4,
            count: 16,
            size: 8,
            seed,
            noise: 1.0,
        });
        recalibrate_bn(&mut net, &r, &data, 8).unwrap();
        (net, r)
    }

    #[test]
    fn capture_is_deterministic_and_shaped() {
        let (net, r) = calibrated("v1", 1);
        let x = uniform::<f64>(&mut seeded(2), &[4, 3, 8, 8], 1.0);
        let a = capture_activations(&net, &r, &[2, 4], &x, "probe").unwrap();
        let b = capture_activations(&net, &r, &[2, 4], &x, "probe").unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].channels, r.out_channels(&net.graph, 2));
        assert_eq!(a[1].channels, r.out_channels(&net.graph, 4));
        assert!(capture_activations(&net, &r, &[99], &x, "probe").is_err());
    }

    #[test]
    fn zero_probe_through_first_conv_is_zero() {
        let (net, r) = calibrated("0 conv 3 4 1 3 8\nedges:\n", 3);
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let a = capture_activations(&net, &r, &[0], &x, "zeros").unwrap();
        assert!(a[0].data.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn standard_mode_properties(seed in 0u64..1000, m in 1usize..5, hw in 2usize..5,
                                    scale in 0.1f64..10.0, offset in -5.0f64..5.0) {
            let a = random_stack(seed, m, hw);
            let p = pearson_matrix(&a, &a, CorrelationMode::Standard).unwrap();
            for i in 0..m {
                prop_assert!((p.get(i, i).unwrap() - 1.0).abs() < 1e-12);
                for j in 0..m {
                    let v = p.get(i, j).unwrap();
                    prop_assert!(v.abs() <= 1.0 + 1e-9);
                    prop_assert!((v - p.get(j, i).unwrap()).abs() < 1e-12);
                }
            }
            let b = random_stack(seed + 7, m + 1, hw);
            let scaled = ActivationStack {
                data: a.data.iter().enumerate().map(|(k, v)| v * scale * (1 + k % m) as f64 + offset).collect(),
                ..a.clone()
            };
            let p1 = pearson_matrix(&a, &b, CorrelationMode::Standard).unwrap();
            let p2 = pearson_matrix(&scaled, &b, CorrelationMode::Standard).unwrap();
            for (x, y) in p1.values.iter().zip(&p2.values) {
                prop_assert!((x.unwrap() - y.unwrap()).abs() < 1e-6);
            }
            let q = pearson_matrix(&a, &b, CorrelationMode::Paper).unwrap();
            prop_assert!(q.values.iter().all(|v| v.unwrap() >= 0.0));
        }
    }
}
