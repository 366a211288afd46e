use super::{ModelGraph, OpType, RatioAssignment};
use crate::error::{Error, Result};

/// Multiply-accumulates and weight count of one convolution node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub node: usize,
    pub macs: u64,
    pub params: u64,
}

/// Per-convolution costs. Adds and concatenations cost nothing.
pub fn layer_costs(g: &ModelGraph, ratios: &RatioAssignment) -> Result<Vec<LayerCost>> {
    let mut out = Vec::new();
    for i in 0..g.len() {
        let spec = g.node(i);
        if !spec.op.is_conv() {
            continue;
        }
        if spec.spatial_in == 0 {
            return Err(Error::Graph(format!(
                "node {i} has no spatial size; FLOPs need spatial_in in the description"
            )));
        }
        let hw = (spec.spatial_out() * spec.spatial_out()) as u64;
        let k2 = (spec.kernel * spec.kernel) as u64;
        let cout = ratios.out_channels(g, i) as u64;
        let params = match spec.op {
            OpType::NormalConv => cout * ratios.in_channels(g, i) as u64 * k2,
            _ => cout * k2,
        };
        out.push(LayerCost {
            node: i,
            macs: params * hw,
            params,
        });
    }
    Ok(out)
}

pub fn count_flops(g: &ModelGraph, ratios: &RatioAssignment) -> Result<u64> {
    Ok(layer_costs(g, ratios)?.iter().map(|c| c.macs).sum())
}

/// Convolution weights only; batch-norm affine terms and the classifier
/// head are not counted.
pub fn count_params(g: &ModelGraph, ratios: &RatioAssignment) -> u64 {
    (0..g.len())
        .filter(|&i| g.node(i).op.is_conv())
        .map(|i| {
            let spec = g.node(i);
            let k2 = (spec.kernel * spec.kernel) as u64;
            let cout = ratios.out_channels(g, i) as u64;
            match spec.op {
                OpType::NormalConv => cout * ratios.in_channels(g, i) as u64 * k2,
                _ => cout * k2,
            }
        })
        .sum()
}
