use super::{ModelGraph, OpType, RatioAssignment};
use crate::tensor::{Scalar, Tensor};

pub const FEATURE_WIDTH: usize = 7;

/// Column order: type, in_channels, out_channels, stride, kernel,
/// weight_size, ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureMatrix {
    rows: Vec<[f64; FEATURE_WIDTH]>,
    scale: [f64; FEATURE_WIDTH],
}

impl NodeFeatureMatrix {
    /// Raw (unnormalized) feature rows.
    pub fn rows(&self) -> &[[f64; FEATURE_WIDTH]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// l×7 tensor fed to the aggregator. Channel and weight-size columns are
    /// divided by their maxima over the unpruned graph, stride and kernel by
    /// their graph maxima; type code and ratio pass through.
    pub fn normalized<T: Scalar>(&self) -> Tensor<T> {
        let l = self.rows.len();
        Tensor::from_fn(&[l, FEATURE_WIDTH], |k| {
            let (r, c) = (k / FEATURE_WIDTH, k % FEATURE_WIDTH);
            T::of(self.rows[r][c] / self.scale[c])
        })
    }
}

fn raw_rows(g: &ModelGraph, ratios: &RatioAssignment) -> Vec<[f64; FEATURE_WIDTH]> {
    (0..g.len())
        .map(|i| {
            let spec = g.node(i);
            let cin = ratios.in_channels(g, i) as f64;
            let cout = ratios.out_channels(g, i) as f64;
            let k2 = (spec.kernel * spec.kernel) as f64;
            let weight_size = match spec.op {
                OpType::NormalConv => cout * cin * k2,
                OpType::DepthwiseConv => cout * k2,
                OpType::Add | OpType::Concat => 0.0,
            };
            [
                f64::from(spec.op.code()),
                cin,
                cout,
                spec.stride as f64,
                spec.kernel as f64,
                weight_size,
                ratios.get(i),
            ]
        })
        .collect()
}

pub fn node_features(g: &ModelGraph, ratios: &RatioAssignment) -> NodeFeatureMatrix {
    let base = raw_rows(g, &RatioAssignment::full(g));
    let mut scale = [1.0; FEATURE_WIDTH];
    for c in 1..=5 {
        let max = base.iter().map(|r| r[c]).fold(0.0, f64::max);
        if max > 0.0 {
            scale[c] = max;
        }
    }
    NodeFeatureMatrix {
        rows: raw_rows(g, ratios),
        scale,
    }
}
