//! Topology graphs of convolutional networks.
//!
//! Every convolution, depthwise convolution, add and concatenation becomes a
//! node; batch normalization and ReLU are folded away. Node ids are listed in
//! dataflow order, so an edge `{i, j}` with `i < j` means node `i` feeds node `j`.

mod adjacency;
pub mod bundled;
mod features;
mod flops;
mod ratios;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use adjacency::{build_adjacency, renormalize_adjacency, spectral_norm};
pub use features::{node_features, NodeFeatureMatrix, FEATURE_WIDTH};
pub use flops::{count_flops, count_params, layer_costs, LayerCost};
pub use ratios::{apply_ratio_sharing, channel_count, parse_ratio_file, RatioAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpType {
    NormalConv,
    DepthwiseConv,
    Add,
    Concat,
}

impl OpType {
    /// Integer code used in the node-feature `type` column.
    pub fn code(self) -> u8 {
        match self {
            OpType::NormalConv => 0,
            OpType::DepthwiseConv => 1,
            OpType::Add | OpType::Concat => 2,
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, OpType::NormalConv | OpType::DepthwiseConv)
    }

    pub fn keyword(self) -> &'static str {
        match self {
            OpType::NormalConv => "conv",
            OpType::DepthwiseConv => "dwconv",
            OpType::Add => "add",
            OpType::Concat => "concat",
        }
    }

    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "conv" | "normal_conv" => OpType::NormalConv,
            "dwconv" | "depthwise_conv" => OpType::DepthwiseConv,
            "add" => OpType::Add,
            "concat" => OpType::Concat,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub op: OpType,
    pub in_channels: usize,
    pub out_channels: usize,
    /// 0 for non-convolution nodes.
    pub stride: usize,
    /// 1 for non-convolution nodes.
    pub kernel: usize,
    /// Square input resolution; 0 when unknown.
    pub spatial_in: usize,
    /// Index of the first node of the ratio-sharing group this node belongs to.
    pub ratio_group: usize,
}

impl NodeSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn spatial_out(&self) -> usize {
        if self.op.is_conv() && self.spatial_in > 0 {
            (self.spatial_in + 2 * self.padding() - self.kernel) / self.stride + 1
        } else {
            self.spatial_in
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    nodes: Vec<NodeSpec>,
    edges: BTreeSet<(usize, usize)>,
    prunable: Vec<usize>,
    producers: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeSpec {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Undirected edges as `(lower, higher)` index pairs.
    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Nodes whose ratio is a free search variable, in node order.
    pub fn prunable(&self) -> &[usize] {
        &self.prunable
    }

    pub fn producers(&self, i: usize) -> &[usize] {
        &self.producers[i]
    }

    pub fn consumers(&self, i: usize) -> &[usize] {
        &self.consumers[i]
    }

    /// Convolution nodes (normal and depthwise), in node order.
    pub fn conv_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.nodes[i].op.is_conv()).collect()
    }

    /// The node with no producers; it reads the network input.
    pub fn source(&self) -> usize {
        (0..self.len())
            .find(|&i| self.producers[i].is_empty())
            .expect("validated graph has a source")
    }

    /// The node with no consumers; it feeds the classifier head.
    pub fn sink(&self) -> usize {
        (0..self.len())
            .rev()
            .find(|&i| self.consumers[i].is_empty())
            .expect("validated graph has a sink")
    }

    pub fn input_channels(&self) -> usize {
        self.nodes[self.source()].in_channels
    }

    pub fn input_size(&self) -> usize {
        self.nodes[self.source()].spatial_in
    }

    /// Builds and validates a graph from node specs and directed edges.
    /// `ratio_group` fields of the input are ignored and recomputed.
    pub fn from_parts(nodes: Vec<NodeSpec>, edges: &[(usize, usize)]) -> Result<Self> {
        let lines: Vec<usize> = (1..=nodes.len()).collect();
        let edge_lines: Vec<usize> = (nodes.len() + 1..=nodes.len() + edges.len()).collect();
        build(nodes, edges, &lines, &edge_lines)
    }

    /// Canonical text form; `parse(emit(g)) == g`.
    pub fn emit(&self) -> String {
        let mut out = String::from("# id type in_ch out_ch stride kernel spatial_in\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i} {} {} {} {} {} {}",
                n.op.keyword(),
                n.in_channels,
                n.out_channels,
                n.stride,
                n.kernel,
                n.spatial_in
            );
        }
        out.push_str("edges:\n");
        for (a, b) in &self.edges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn description_hash(&self) -> [u8; 32] {
        Sha256::digest(self.emit().as_bytes()).into()
    }

    /// Relabels nodes by `perm` (new index of old node `i` is `perm[i]`).
    /// Only the topology and per-node specs are permuted; intended for
    /// equivariance checks, so dataflow validation is skipped.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        let mut nodes = vec![self.nodes[0].clone(); n];
        let mut producers = vec![Vec::new(); n];
        let mut consumers = vec![Vec::new(); n];
        for i in 0..n {
            let mut spec = self.nodes[i].clone();
            spec.ratio_group = perm[spec.ratio_group];
            nodes[perm[i]] = spec;
            producers[perm[i]] = self.producers[i].iter().map(|&p| perm[p]).collect();
            consumers[perm[i]] = self.consumers[i].iter().map(|&c| perm[c]).collect();
        }
        let edges = self
            .edges
            .iter()
            .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
            .collect();
        let mut prunable: Vec<usize> = self.prunable.iter().map(|&p| perm[p]).collect();
        prunable.sort_unstable();
        Self {
            nodes,
            edges,
            prunable,
            producers,
            consumers,
        }
    }
}

/// Parses the line-oriented model description format.
///
/// ```text
/// # comment
/// 0 conv 3 8 1 3 8        # id type in_ch out_ch stride kernel spatial_in
/// 1 dwconv 8 8 1 3 8
/// edges:
/// 0 1
/// ```
pub fn parse_model_description(text: &str) -> Result<ModelGraph> {
    let mut nodes = Vec::new();
    let mut node_lines = Vec::new();
    let mut edges = Vec::new();
    let mut edge_lines = Vec::new();
    let mut in_edges = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "edges:" {
            if in_edges {
                return Err(parse_err(line_no, "duplicate `edges:` section"));
            }
            in_edges = true;
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if in_edges {
            if tokens.len() != 2 {
                return Err(parse_err(line_no, "edge lines need exactly two node ids"));
            }
            let a = int(tokens[0], line_no, "edge endpoint")?;
            let b = int(tokens[1], line_no, "edge endpoint")?;
            edges.push((a, b));
            edge_lines.push(line_no);
        } else {
            if tokens.len() != 7 {
                return Err(parse_err(
                    line_no,
                    "node lines need 7 fields: id type in_ch out_ch stride kernel spatial_in",
                ));
            }
            let id = int(tokens[0], line_no, "node id")?;
            if id != nodes.len() {
                return Err(parse_err(
                    line_no,
                    format!("node id {id} out of sequence, expected {}", nodes.len()),
                ));
            }
            let op = OpType::parse(tokens[1])
                .ok_or_else(|| parse_err(line_no, format!("unknown op type `{}`", tokens[1])))?;
            nodes.push(NodeSpec {
                op,
                in_channels: int(tokens[2], line_no, "in_ch")?,
                out_channels: int(tokens[3], line_no, "out_ch")?,
                stride: int(tokens[4], line_no, "stride")?,
                kernel: int(tokens[5], line_no, "kernel")?,
                spatial_in: int(tokens[6], line_no, "spatial_in")?,
                ratio_group: id,
            });
            node_lines.push(line_no);
        }
    }
    if nodes.is_empty() {
        return Err(parse_err(text.lines().count().max(1), "no nodes defined"));
    }
    build(nodes, &edges, &node_lines, &edge_lines)
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn int(token: &str, line: usize, what: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| parse_err(line, format!("{what} `{token}` is not a non-negative integer")))
}

fn build(
    mut nodes: Vec<NodeSpec>,
    raw_edges: &[(usize, usize)],
    node_lines: &[usize],
    edge_lines: &[usize],
) -> Result<ModelGraph> {
    let n = nodes.len();
    for (i, spec) in nodes.iter().enumerate() {
        let line = node_lines[i];
        if spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(parse_err(line, "channel counts must be positive"));
        }
        if spec.op.is_conv() {
            if spec.stride == 0 {
                return Err(parse_err(line, "convolution stride must be at least 1"));
            }
            if spec.kernel == 0 || spec.kernel % 2 == 0 {
                return Err(parse_err(line, "convolution kernel must be odd"));
            }
        } else if spec.stride != 0 || spec.kernel != 1 {
            return Err(parse_err(line, "non-convolution nodes take stride 0 and kernel 1"));
        }
    }

    let mut edges = BTreeSet::new();
    let mut producers = vec![Vec::new(); n];
    let mut consumers = vec![Vec::new(); n];
    for (&(a, b), &line) in raw_edges.iter().zip(edge_lines) {
        if a >= n || b >= n {
            return Err(parse_err(line, format!("edge {a} {b} references a missing node")));
        }
        if a == b {
            return Err(parse_err(line, format!("self edge on node {a}")));
        }
        if a > b {
            return Err(parse_err(
                line,
                format!("edge {a} {b} points backwards; list producer before consumer"),
            ));
        }
        if !edges.insert((a, b)) {
            return Err(parse_err(line, format!("duplicate edge {a} {b}")));
        }
        producers[b].push(a);
        consumers[a].push(b);
    }

    for list in producers.iter_mut().chain(consumers.iter_mut()) {
        list.sort_unstable();
    }

    // Dataflow and channel wiring.
    let sources: Vec<usize> = (0..n).filter(|&i| producers[i].is_empty()).collect();
    if sources.len() != 1 {
        return Err(Error::Graph(format!(
            "expected exactly one input node, found {sources:?}"
        )));
    }
    let sinks: Vec<usize> = (0..n).filter(|&i| consumers[i].is_empty()).collect();
    if sinks.len() != 1 {
        return Err(Error::Graph(format!(
            "expected exactly one output node, found {sinks:?}"
        )));
    }
    for i in 0..n {
        let spec = &nodes[i];
        let line = node_lines[i];
        let prods = &producers[i];
        if prods.is_empty() && !spec.op.is_conv() {
            return Err(parse_err(line, "the input node must be a convolution"));
        }
        let wiring = |msg: String| parse_err(line, format!("inconsistent channel wiring: {msg}"));
        match spec.op {
            OpType::NormalConv | OpType::DepthwiseConv => {
                if prods.len() > 1 {
                    return Err(wiring(format!("convolution {i} has {} producers", prods.len())));
                }
                if let Some(&p) = prods.first() {
                    if nodes[p].out_channels != spec.in_channels {
                        return Err(wiring(format!(
                            "node {p} emits {} channels, node {i} expects {}",
                            nodes[p].out_channels, spec.in_channels
                        )));
                    }
                }
                if spec.op == OpType::DepthwiseConv && spec.in_channels != spec.out_channels {
                    return Err(wiring(format!("depthwise node {i} changes the channel count")));
                }
            }
            OpType::Add => {
                if prods.len() < 2 {
                    return Err(wiring(format!("add node {i} needs at least two inputs")));
                }
                for &p in prods {
                    if nodes[p].out_channels != spec.out_channels {
                        return Err(wiring(format!(
                            "add node {i} joins {} and {} channels",
                            nodes[p].out_channels, spec.out_channels
                        )));
                    }
                }
                if spec.in_channels != spec.out_channels {
                    return Err(wiring(format!("add node {i} must keep its width")));
                }
            }
            OpType::Concat => {
                if prods.len() < 2 {
                    return Err(wiring(format!("concat node {i} needs at least two inputs")));
                }
                let total: usize = prods.iter().map(|&p| nodes[p].out_channels).sum();
                if total != spec.in_channels || total != spec.out_channels {
                    return Err(wiring(format!(
                        "concat node {i} receives {total} channels but declares {}/{}",
                        spec.in_channels, spec.out_channels
                    )));
                }
            }
        }
        for &p in prods {
            let (out, inp) = (nodes[p].spatial_out(), spec.spatial_in);
            if out != 0 && inp != 0 && out != inp {
                return Err(parse_err(
                    line,
                    format!("node {p} produces {out}x{out} maps, node {i} expects {inp}x{inp}"),
                ));
            }
        }
    }

    // Connectivity over the undirected edge set.
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &u in producers[v].iter().chain(&consumers[v]) {
            if !seen[u] {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    if let Some(orphan) = seen.iter().position(|s| !s) {
        return Err(Error::Graph(format!("node {orphan} is disconnected")));
    }

    let groups = ratios::sharing_groups(&nodes, &producers)?;
    for (spec, g) in nodes.iter_mut().zip(&groups) {
        spec.ratio_group = *g;
    }
    let prunable = (0..n)
        .filter(|&i| groups[i] == i && nodes[i].op == OpType::NormalConv)
        .collect();

    Ok(ModelGraph {
        nodes,
        edges,
        prunable,
        producers,
        consumers,
    })
}
