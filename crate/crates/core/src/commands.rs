//! Subcommand implementations behind the command-line front end. Each
//! returns the text to print and writes its artifacts under an output
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_supernet, save_supernet, write_bytes, TrainingMeta};
use crate::config::{load_model, ExperimentConfig};
use crate::correlation::{capture_activations, CorrelationMode, CorrelationReport};
use crate::data::{probe_indices, Splits};
use crate::error::{Error, Result};
use crate::gcn::neighbor_distance_report;
use crate::graph::{
    build_adjacency, count_flops, count_params, layer_costs, parse_ratio_file, renormalize_adjacency, ModelGraph,
    RatioAssignment,
};
use crate::network::Supernet;
use crate::retrain::{evaluate_static, materialize, recalibrate_static, train_static, StaticNet};
use crate::search::{search as run_search, AccuracyReward, SearchLogRow, StateEncoder};
use crate::trainer::{recalibrate_bn, train as run_train, TrainState};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSS_CSV: &str = "loss.csv";
pub const BEST_RATIOS: &str = "best_ratios.txt";
pub const SEARCH_LOG: &str = "search_log.csv";
pub const PROBE_IMAGES: usize = 64;

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_ratio_file(g: &ModelGraph, path: &Path) -> Result<RatioAssignment> {
    parse_ratio_file(g, &read_text(path)?)
}

fn splits(cfg: &ExperimentConfig) -> Result<Splits> {
    Ok(cfg.data.load()?.split())
}

/// Parses a description, prints its size and writes the renormalized
/// adjacency as a dense CSV.
pub fn transform(model: &str, out: &Path) -> Result<String> {
    let g = load_model(model)?;
    let a = renormalize_adjacency::<f64>(&build_adjacency(&g));
    let n = g.len();
    let mut csv = String::from("node");
    for j in 0..n {
        write!(csv, ",n{j}").unwrap();
    }
    csv.push('\n');
    for i in 0..n {
        write!(csv, "{i}").unwrap();
        for v in a.row(i) {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    write_text(&out.join("adjacency.csv"), &csv)?;
    Ok(format!("{} nodes, {} edges", n, g.edges().len()))
}

/// Trains the supernet and writes a checkpoint. With `resume` the
/// run continues from the epoch count stored in the existing checkpoint and
/// appends to the loss curve.
pub fn train(cfg: &ExperimentConfig, resume: bool, mut progress: impl FnMut(&str)) -> Result<String> {
    let g = cfg.load_model()?;
    let data = splits(cfg)?;
    let ckpt = cfg.out.join(CHECKPOINT);
    let loss_path = cfg.out.join(LOSS_CSV);
    let (mut net, start, mut csv) = if resume {
        let (net, meta) = load_supernet::<f32>(&ckpt, &g)?;
        if meta.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {}, configuration has seed {}",
                meta.seed, cfg.seed
            )));
        }
        let old = read_text(&loss_path)?;
        let kept: Vec<&str> = old.lines().take(1 + meta.epochs_completed).collect();
        (net, meta.epochs_completed, kept.join("\n") + "\n")
    } else {
        let net = Supernet::<f32>::new(g, &cfg.supernet_options(data.train.classes), cfg.seed)?;
        (net, 0, String::from("epoch,loss\n"))
    };
    if start >= cfg.train.epochs {
        return Ok(format!("checkpoint already has {start} epochs; nothing to do"));
    }
    let losses = run_train(&mut net, &mut TrainState::default(), &data.train, &cfg.train, start, |epoch, loss| {
        writeln!(csv, "{epoch},{loss}").unwrap();
        progress(&format!("epoch {epoch}: loss {loss:.4}"));
    })?;
    save_supernet(&ckpt, &net, TrainingMeta { epochs_completed: cfg.train.epochs, seed: cfg.seed })?;
    write_text(&loss_path, &csv)?;
    Ok(format!(
        "trained epochs {}..{}, final loss {:.4}",
        start,
        cfg.train.epochs,
        losses.last().copied().unwrap_or(f64::NAN)
    ))
}

/// Searches for the best configuration under the configured budget.
pub fn search(cfg: &ExperimentConfig, checkpoint: &Path, mut progress: impl FnMut(&str)) -> Result<String> {
    let g = cfg.load_model()?;
    let data = splits(cfg)?;
    let (mut net, _) = load_supernet::<f32>(checkpoint, &g)?;
    let mut scfg = cfg.search.clone();
    scfg.budget = cfg.budget.resolve(&g)?;
    let encoder = StateEncoder::from_supernet(&net);
    let mut reward = AccuracyReward {
        net: &mut net,
        recalibration: &data.recalibration,
        evaluation: &data.evaluation,
        batch_size: cfg.eval_batch_size,
    };
    let outcome = run_search(encoder, &scfg, &mut reward, |row| {
        if (row.episode + 1) % 25 == 0 {
            progress(&format!("episode {}: reward {:.4}", row.episode, row.reward));
        }
    })?;
    let mut log = SearchLogRow::csv_header(&g);
    log.push('\n');
    for row in &outcome.log {
        log.push_str(&row.csv_line());
        log.push('\n');
    }
    write_text(&cfg.out.join(SEARCH_LOG), &log)?;
    write_text(&cfg.out.join(BEST_RATIOS), &outcome.best.to_ratio_file())?;
    Ok(format!(
        "best accuracy {:.4} at episode {}, {} MACs (budget {})",
        outcome.best_reward, outcome.best_episode, outcome.best_flops, scfg.budget
    ))
}

/// Per-layer cost table for a description under a ratio file, or at full
/// width when no file is given.
pub fn flops(model: &str, ratio_file: Option<&Path>, out: &Path) -> Result<String> {
    let g = load_model(model)?;
    let ratios = match ratio_file {
        Some(p) => read_ratio_file(&g, p)?,
        None => RatioAssignment::full(&g),
    };
    let mut csv = String::from("node,op,in_channels,out_channels,kernel,stride,spatial_out,macs,params\n");
    let mut table = format!(
        "{:>5} {:<10} {:>6} {:>6} {:>3} {:>3} {:>4} {:>12} {:>10}\n",
        "node", "op", "in", "out", "k", "s", "hw", "MACs", "params"
    );
    for c in layer_costs(&g, &ratios)? {
        let n = g.node(c.node);
        let (cin, cout) = (ratios.in_channels(&g, c.node), ratios.out_channels(&g, c.node));
        let row = [
            c.node.to_string(),
            n.op.keyword().to_string(),
            cin.to_string(),
            cout.to_string(),
            n.kernel.to_string(),
            n.stride.to_string(),
            n.spatial_out().to_string(),
            c.macs.to_string(),
            c.params.to_string(),
        ];
        csv.push_str(&row.join(","));
        csv.push('\n');
        writeln!(
            table,
            "{:>5} {:<10} {:>6} {:>6} {:>3} {:>3} {:>4} {:>12} {:>10}",
            row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8]
        )
        .unwrap();
    }
    let total = count_flops(&g, &ratios)?;
    let params = count_params(&g, &ratios);
    writeln!(table, "total: {total} MACs, {params} params").unwrap();
    write_text(&out.join("flops.csv"), &csv)?;
    Ok(table)
}

/// Plot data: output channels per convolution for each ratio file, the
/// node-distance matrix of the aggregator embeddings and, when a search log
/// is given, the reward curve with its running best.
pub fn report(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    search_log: Option<&Path>,
    ratio_files: &[PathBuf],
) -> Result<String> {
    if ratio_files.is_empty() {
        return Err(Error::Config("report needs at least one ratio file".into()));
    }
    let g = cfg.load_model()?;
    let (net, _) = load_supernet::<f32>(checkpoint, &g)?;
    let mut channels = String::from("file,node,op,base_channels,ratio,channels\n");
    let mut distances = String::from("file,i,j,distance\n");
    for (k, path) in ratio_files.iter().enumerate() {
        let ratios = read_ratio_file(&g, path)?;
        for i in g.conv_nodes() {
            let n = g.node(i);
            writeln!(
                channels,
                "{k},{i},{},{},{},{}",
                n.op.keyword(),
                n.out_channels,
                ratios.get(i),
                ratios.out_channels(&g, i)
            )
            .unwrap();
        }
        let d = neighbor_distance_report(&net.embeddings(&ratios)?);
        let l = g.len();
        for i in 0..l {
            for j in 0..l {
                writeln!(distances, "{k},{i},{j},{}", d.data()[i * l + j]).unwrap();
            }
        }
    }
    write_text(&cfg.out.join("channels.csv"), &channels)?;
    write_text(&cfg.out.join("distances.csv"), &distances)?;
    let mut written = vec!["channels.csv", "distances.csv"];
    if let Some(p) = search_log {
        write_text(&cfg.out.join("reward_curve.csv"), &reward_curve(&read_text(p)?)?)?;
        written.push("reward_curve.csv");
    }
    Ok(format!("{} ratio file(s); wrote {}", ratio_files.len(), written.join(", ")))
}

fn reward_curve(log: &str) -> Result<String> {
    let mut lines = log.lines();
    match lines.next() {
        Some(h) if h.starts_with("episode,reward") => {}
        _ => return Err(Error::Parse { line: 1, msg: "not a search log".into() }),
    }
    let mut out = String::from("episode,reward,best_so_far\n");
    let mut best = f64::NEG_INFINITY;
    for (k, line) in lines.enumerate() {
        let mut cols = line.split(',');
        let bad = || Error::Parse { line: k + 2, msg: format!("malformed search log row `{line}`") };
        let episode: usize = cols.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let reward: f64 = cols.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        best = best.max(reward);
        writeln!(out, "{episode},{reward},{best}").unwrap();
    }
    Ok(out)
}

/// Which correlation analysis to run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrRequest {
    pub layers: (usize, usize),
    pub mode: CorrelationMode,
    pub tau: f64,
}

/// Filter correlation between two layers on a fixed probe of evaluation
/// images, after recalibrating for the given configuration.
pub fn analyze_corr(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    ratio_file: Option<&Path>,
    req: CorrRequest,
) -> Result<String> {
    let g = cfg.load_model()?;
    let (a, b) = req.layers;
    for l in [a, b] {
        if l >= g.len() || !g.node(l).op.is_conv() {
            return Err(Error::InvalidArgument(format!("layer {l} is not a convolution node of the graph")));
        }
    }
    let (ha, hb) = (g.node(a).spatial_out(), g.node(b).spatial_out());
    if ha != hb {
        return Err(Error::InvalidArgument(format!(
            "layers {a} and {b} have different spatial sizes ({ha} vs {hb}); pick layers of one resolution"
        )));
    }
    let data = splits(cfg)?;
    let (mut net, _) = load_supernet::<f32>(checkpoint, &g)?;
    let ratios = match ratio_file {
        Some(p) => read_ratio_file(&g, p)?,
        None => RatioAssignment::full(&g),
    };
    recalibrate_bn(&mut net, &ratios, &data.recalibration, cfg.eval_batch_size)?;
    let idx = probe_indices(data.evaluation.len(), PROBE_IMAGES, cfg.seed);
    let (x, _) = data.evaluation.batch::<f32>(&idx);
    let source = format!("{} evaluation images, seed {}", idx.len(), cfg.seed);
    let stacks = capture_activations(&net, &ratios, &[a, b], &x, &source)?;
    let report = CorrelationReport::build(&stacks[0], &stacks[1], req.mode, req.tau)?;
    let stem = format!("corr_{}_{a}_{b}", req.mode.name());
    write_text(&cfg.out.join(format!("{stem}_pairs.csv")), &report.pairs_csv())?;
    write_text(&cfg.out.join(format!("{stem}_matrix.csv")), &report.matrix_csv())?;
    write_text(&cfg.out.join(format!("{stem}_summary.json")), &report.summary_json())?;
    Ok(format!(
        "{} pairs above {} ({} mode); wrote {stem}_*",
        report.pairs.len(),
        req.tau,
        req.mode.name()
    ))
}

/// Trains the pruned architecture from scratch and reports its accuracy.
pub fn retrain(cfg: &ExperimentConfig, ratio_file: &Path, mut progress: impl FnMut(&str)) -> Result<String> {
    let g = cfg.load_model()?;
    let ratios = read_ratio_file(&g, ratio_file)?;
    let data = splits(cfg)?;
    let pruned = materialize(&g, &ratios)?;
    let mut net = StaticNet::<f32>::new(pruned, data.train.classes, cfg.seed)?;
    let mut csv = String::from("epoch,loss\n");
    train_static(&mut net, &mut TrainState::default(), &data.train, &cfg.train, 0, |epoch, loss| {
        writeln!(csv, "{epoch},{loss}").unwrap();
        progress(&format!("epoch {epoch}: loss {loss:.4}"));
    })?;
    recalibrate_static(&mut net, &data.recalibration, cfg.eval_batch_size)?;
    let accuracy = evaluate_static(&net, &data.evaluation, cfg.eval_batch_size)?;
    let meta = TrainingMeta { epochs_completed: cfg.train.epochs, seed: cfg.seed };
    write_bytes(&cfg.out.join("retrained.bin"), &net.to_container(meta).to_bytes())?;
    write_text(&cfg.out.join("retrain_loss.csv"), &csv)?;
    let summary = serde_json::json!({
        "accuracy": accuracy,
        "macs": count_flops(&g, &ratios)?,
        "params": count_params(&g, &ratios),
        "epochs": cfg.train.epochs,
        "seed": cfg.seed,
    });
    write_text(
        &cfg.out.join("retrain_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("json value serializes"),
    )?;
    Ok(format!("retrained accuracy {accuracy:.4}"))
}
