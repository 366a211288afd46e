use super::{ModelGraph, NodeSpec, OpType};
use crate::error::{Error, Result};

/// Compression ratio per node, after sharing rules.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioAssignment {
    ratios: Vec<f64>,
}

impl RatioAssignment {
    /// Per-node values taken as-is, without the sharing rules.
    #[cfg(test)]
    pub(crate) fn unshared(ratios: Vec<f64>) -> Self {
        Self { ratios }
    }

    /// Every node at ratio 1.
    pub fn full(g: &ModelGraph) -> Self {
        Self {
            ratios: vec![1.0; g.len()],
        }
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn get(&self, node: usize) -> f64 {
        self.ratios[node]
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    /// Values at the prunable nodes, i.e. the free variables.
    pub fn free_values(&self, g: &ModelGraph) -> Vec<f64> {
        g.prunable().iter().map(|&i| self.ratios[i]).collect()
    }

    /// Output channel count of `node` under this assignment. Concatenations
    /// report the sum of their inputs.
    pub fn out_channels(&self, g: &ModelGraph, node: usize) -> usize {
        let spec = g.node(node);
        match spec.op {
            OpType::Concat => g
                .producers(node)
                .iter()
                .map(|&p| self.out_channels(g, p))
                .sum(),
            _ => channel_count(spec.out_channels, self.ratios[node]),
        }
    }

    /// Input channel count of `node`: what its producers emit, or the base
    /// input width for the source node.
    pub fn in_channels(&self, g: &ModelGraph, node: usize) -> usize {
        let prods = g.producers(node);
        match g.node(node).op {
            _ if prods.is_empty() => g.node(node).in_channels,
            OpType::Concat => self.out_channels(g, node),
            _ => self.out_channels(g, prods[0]),
        }
    }

    /// Applies the sharing rules to an arbitrary per-node vector: each node
    /// takes the value of its group leader. Idempotent.
    pub fn from_per_node(g: &ModelGraph, raw: &[f64]) -> Result<Self> {
        if raw.len() != g.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} per-node ratios, got {}",
                g.len(),
                raw.len()
            )));
        }
        check_range(raw)?;
        let mut ratios: Vec<f64> = g.nodes().iter().map(|n| raw[n.ratio_group]).collect();
        fix_concats(g, &mut ratios);
        Ok(Self { ratios })
    }
}

impl RatioAssignment {
    /// `node_id ratio` lines for every node.
    pub fn to_ratio_file(&self) -> String {
        let mut out = String::from("# node_id ratio\n");
        for (i, r) in self.ratios.iter().enumerate() {
            out.push_str(&format!("{i} {r}\n"));
        }
        out
    }
}

/// Reads a ratio file. Every node must be listed once, and the values must
/// already obey the sharing rules.
pub fn parse_ratio_file(g: &ModelGraph, text: &str) -> Result<RatioAssignment> {
    let mut raw: Vec<Option<f64>> = vec![None; g.len()];
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(err("ratio lines are `node_id ratio`".into()));
        }
        let id: usize = tokens[0]
            .parse()
            .map_err(|_| err(format!("`{}` is not a node id", tokens[0])))?;
        let r: f64 = tokens[1]
            .parse()
            .map_err(|_| err(format!("`{}` is not a number", tokens[1])))?;
        let slot = raw
            .get_mut(id)
            .ok_or_else(|| err(format!("node {id} does not exist; the graph has {} nodes", g.len())))?;
        if slot.is_some() {
            return Err(err(format!("node {id} listed twice")));
        }
        *slot = Some(r);
    }
    let raw: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::Config(format!("ratio file has no entry for node {i}"))))
        .collect::<Result<_>>()?;
    let shared = RatioAssignment::from_per_node(g, &raw)?;
    for (i, (&given, &want)) in raw.iter().zip(shared.ratios()).enumerate() {
        if (given - want).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "node {i} has ratio {given} but its sharing group requires {want}"
            )));
        }
    }
    Ok(shared)
}

/// Expands one raw value per prunable node into a full assignment.
pub fn apply_ratio_sharing(g: &ModelGraph, raw: &[f64]) -> Result<RatioAssignment> {
    if raw.len() != g.prunable().len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} prunable ratios, got {}",
            g.prunable().len(),
            raw.len()
        )));
    }
    check_range(raw)?;
    let mut per_node = vec![1.0; g.len()];
    for (&p, &r) in g.prunable().iter().zip(raw) {
        per_node[p] = r;
    }
    let mut ratios: Vec<f64> = g.nodes().iter().map(|n| per_node[n.ratio_group]).collect();
    fix_concats(g, &mut ratios);
    Ok(RatioAssignment { ratios })
}

/// `round(base·ratio)`, never below 1.
pub fn channel_count(base: usize, ratio: f64) -> usize {
    ((base as f64 * ratio).round() as usize).max(1)
}

fn check_range(raw: &[f64]) -> Result<()> {
    if let Some(bad) = raw.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "ratio {bad} outside (0, 1]"
        )));
    }
    Ok(())
}

/// A concatenation has no free ratio; report the fraction of its base width
/// that survives.
fn fix_concats(g: &ModelGraph, ratios: &mut [f64]) {
    for i in 0..g.len() {
        if g.node(i).op == OpType::Concat {
            let partial = RatioAssignment {
                ratios: ratios.to_vec(),
            };
            let kept: usize = g
                .producers(i)
                .iter()
                .map(|&p| partial.out_channels(g, p))
                .sum();
            ratios[i] = kept as f64 / g.node(i).out_channels as f64;
        }
    }
}

/// Groups nodes that must share one ratio. Depthwise convolutions join their
/// producer; every input of an add joins the add, which chains residual
/// stages together. Returns the leader (lowest index) of each node's group.
pub(super) fn sharing_groups(nodes: &[NodeSpec], producers: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut union = |a: usize, b: usize| {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            parent[hi] = lo;
        }
    };
    for i in 0..n {
        match nodes[i].op {
            OpType::DepthwiseConv => {
                if let Some(&p) = producers[i].first() {
                    union(i, p);
                }
            }
            OpType::Add => {
                for &p in &producers[i] {
                    union(i, p);
                }
            }
            _ => {}
        }
    }
    let leaders: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();

    for i in 0..n {
        let leader = leaders[i];
        if nodes[i].out_channels != nodes[leader].out_channels {
            return Err(Error::Graph(format!(
                "nodes {leader} and {i} share a ratio but have {} and {} output channels",
                nodes[leader].out_channels, nodes[i].out_channels
            )));
        }
        if nodes[leader].op == OpType::Concat && leader != i {
            return Err(Error::Graph(format!(
                "node {i} would share the derived ratio of concatenation {leader}"
            )));
        }
    }
    Ok(leaders)
}
