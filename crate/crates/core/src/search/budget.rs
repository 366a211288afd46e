use crate::error::{Error, Result};
use crate::graph::{apply_ratio_sharing, count_flops, ModelGraph};

/// FLOPs with prunable layers `< index` at `decided`, layer `index` at `a`
/// and the rest at `fill`.
pub fn flops_with(g: &ModelGraph, decided: &[f64], index: usize, a: f64, fill: f64) -> Result<u64> {
    let raw: Vec<f64> = (0..g.prunable().len())
        .map(|j| match j.cmp(&index) {
            std::cmp::Ordering::Less => decided[j],
            std::cmp::Ordering::Equal => a,
            std::cmp::Ordering::Greater => fill,
        })
        .collect();
    count_flops(g, &apply_ratio_sharing(g, &raw)?)
}

/// FLOPs with every prunable layer at the smallest grid value.
pub fn min_flops(g: &ModelGraph, grid: &[f64]) -> Result<u64> {
    count_flops(g, &apply_ratio_sharing(g, &vec![grid[0]; g.prunable().len()])?)
}

/// Errors if even the all-minimum configuration exceeds `budget`.
pub fn check_feasible(g: &ModelGraph, grid: &[f64], budget: u64) -> Result<()> {
    let min = min_flops(g, grid)?;
    if min > budget {
        return Err(Error::InfeasibleBudget { budget, minimum: min });
    }
    Ok(())
}

/// Largest action `≤ proposed` for layer `index` such that the remaining
/// layers at the grid minimum still fit the budget. A feasible proposal is
/// returned as is; otherwise the answer is the largest feasible grid value
/// below it.
pub fn enforce_budget(
    g: &ModelGraph,
    decided: &[f64],
    index: usize,
    proposed: f64,
    budget: u64,
    grid: &[f64],
) -> Result<f64> {
    let fits = |a: f64| -> Result<bool> { Ok(flops_with(g, decided, index, a, grid[0])? <= budget) };
    if fits(proposed)? {
        return Ok(proposed);
    }
    for &a in grid.iter().rev().filter(|&&a| a < proposed) {
        if fits(a)? {
            return Ok(a);
        }
    }
    Err(Error::Config(format!(
        "no ratio for prunable layer {index} fits the FLOPs budget {budget}"
    )))
}

/// Nearest grid value, lower one on ties.
pub fn snap_to_grid(a: f64, grid: &[f64]) -> f64 {
    let mut best = grid[0];
    for &v in grid {
        if (v - a).abs() < (best - a).abs() - 1e-12 {
            best = v;
        }
    }
    best
}

/// Snaps `a` to the grid, stepping down while the snapped value would break
/// the budget.
pub fn snap_feasible(
    g: &ModelGraph,
    decided: &[f64],
    index: usize,
    a: f64,
    budget: u64,
    grid: &[f64],
) -> Result<f64> {
    let snapped = snap_to_grid(a, grid);
    if flops_with(g, decided, index, snapped, grid[0])? <= budget {
        return Ok(snapped);
    }
    let below = grid.iter().copied().filter(|&v| v < snapped).fold(grid[0], f64::max);
    enforce_budget(g, decided, index, below, budget, grid)
}
