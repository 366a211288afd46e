use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use graphprune::checkpoint::TrainingMeta;
use graphprune::config::ExperimentConfig;
use graphprune::graph::{apply_ratio_sharing, bundled, count_flops, RatioAssignment};
use graphprune::network::{Supernet, SupernetOptions};
use graphprune::retrain::{evaluate_static, recalibrate_static, train_static, StaticNet};
use graphprune::trainer::{default_grid, TrainState};
use tempfile::TempDir;

const CONFIG: &str = "\
model = \"bundled:mobilenet_v1_reduced\"
out = \"run\"
seed = 4
[data]
synthetic = \"4,300,8,4\"
[train]
epochs = 2
[search]
episodes = 12
warmup_episodes = 4
budget_fraction = 0.5
";

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphprune"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let mut full = vec!["--config", "exp.toml", "--threads", "1"];
    full.extend_from_slice(args);
    let o = bin(dir, &full);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn transform_reports_bundled_counts() {
    let dir = tempfile::tempdir().unwrap();
    for (model, want, n) in [
        ("bundled:mobilenet_v1_like", "27 nodes, 26 edges", 27),
        ("bundled:mobilenet_v2_like", "62 nodes, 71 edges", 62),
    ] {
        let o = bin(dir.path(), &["transform", model, "--out", "t"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).trim(), want);
        let csv = read(dir.path(), "t/adjacency.csv");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), n + 1);
        assert!(lines[0].starts_with("node,n0,n1"));
        assert_eq!(lines[1].split(',').count(), n + 1);
    }
}

#[test]
fn transform_accepts_description_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.mg"), bundled::MOBILENET_V1_LIKE).unwrap();
    let o = bin(dir.path(), &["transform", "m.mg"]);
    assert_eq!(stdout(&o).trim(), "27 nodes, 26 edges");
}

#[test]
fn malformed_description_exits_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.mg"), "0 conv 3 8 1 3 8\n1 conv 8 x 1 3 8\nedges:\n0 1\n").unwrap();
    let o = bin(dir.path(), &["transform", "bad.mg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = workspace(CONFIG);
    // configuration problems
    let o = bin(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2), "missing --config");
    let o = bin(dir.path(), &["--config", "missing.toml", "train"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("typo.toml"), format!("{CONFIG}\n[extra]\nx = 1\n")).unwrap();
    assert_eq!(bin(dir.path(), &["--config", "typo.toml", "train"]).status.code(), Some(2));

    // data problems
    fs::create_dir(dir.path().join("empty")).unwrap();
    fs::write(
        dir.path().join("data.toml"),
        "model = \"bundled:mobilenet_v1_reduced\"\n[data]\ndir = \"empty\"\n",
    )
    .unwrap();
    let o = bin(dir.path(), &["--config", "data.toml", "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    // numeric failure: a divergent learning rate
    fs::write(
        dir.path().join("nan.toml"),
        CONFIG.replace("epochs = 2", "epochs = 2\ninit_lr = 1e30\nmomentum = 0.0"),
    )
    .unwrap();
    let o = bin(dir.path(), &["--config", "nan.toml", "train"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn train_writes_loss_curve_and_resume_continues() {
    let dir = workspace(CONFIG);
    ok(dir.path(), &["train"]);
    let loss = read(dir.path(), "run/loss.csv");
    let rows: Vec<&str> = loss.lines().collect();
    assert_eq!(rows[0], "epoch,loss");
    assert_eq!(rows.len(), 1 + 2);
    assert!(rows[1].starts_with("0,") && rows[2].starts_with("1,"));

    fs::write(dir.path().join("exp.toml"), CONFIG.replace("epochs = 2", "epochs = 3")).unwrap();
    ok(dir.path(), &["train", "--resume"]);
    let resumed = read(dir.path(), "run/loss.csv");
    let rows: Vec<&str> = resumed.lines().collect();
    assert_eq!(rows.len(), 1 + 3);
    assert!(resumed.starts_with(&loss));
    assert!(rows[3].starts_with("2,"));
    // nothing left to do
    let msg = ok(dir.path(), &["train", "--resume"]);
    assert!(msg.contains("nothing to do"));

    // a different seed refuses the checkpoint
    let o = bin(dir.path(), &["--config", "exp.toml", "--seed", "9", "train", "--resume"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn search_respects_budget_and_is_reproducible() {
    let dir = workspace(CONFIG);
    ok(dir.path(), &["train"]);
    ok(dir.path(), &["search"]);
    let log = read(dir.path(), "run/search_log.csv");
    assert!(log.starts_with("episode,reward,flops,noise,r"));
    assert_eq!(log.lines().count(), 1 + 12);

    let g = bundled::load("mobilenet_v1_reduced").unwrap();
    let full = count_flops(&g, &RatioAssignment::full(&g)).unwrap();
    let table = ok(dir.path(), &["flops", "bundled:mobilenet_v1_reduced", "--ratios", "run/best_ratios.txt", "--out", "run"]);
    let total: u64 = table
        .lines()
        .find_map(|l| l.strip_prefix("total: "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(total <= full / 2, "{total} > {}", full / 2);

    ok(dir.path(), &["--out", "again", "search", "--checkpoint", "run/checkpoint.bin"]);
    assert_eq!(read(dir.path(), "again/search_log.csv"), log);
    assert_eq!(read(dir.path(), "again/best_ratios.txt"), read(dir.path(), "run/best_ratios.txt"));
}

#[test]
fn flops_full_and_uniform_half() {
    let dir = tempfile::tempdir().unwrap();
    let g = bundled::load("mobilenet_v1_reduced").unwrap();
    let o = bin(dir.path(), &["flops", "bundled:mobilenet_v1_reduced"]);
    let full = count_flops(&g, &RatioAssignment::full(&g)).unwrap();
    assert!(stdout(&o).contains(&format!("total: {full} MACs")), "{}", stdout(&o));

    // shapes of the generated weights times output area
    let half = apply_ratio_sharing(&g, &vec![0.5; g.prunable().len()]).unwrap();
    fs::write(dir.path().join("half.txt"), half.to_ratio_file()).unwrap();
    let opts = SupernetOptions {
        classes: 4,
        grid: default_grid(),
        aggregator: graphprune::gcn::AggregatorKind::Graph,
        hidden_layer: false,
    };
    let net = Supernet::<f64>::new(g.clone(), &opts, 0).unwrap();
    let oracle: u64 = net
        .generate_weights(&half)
        .unwrap()
        .iter()
        .map(|(&i, w)| {
            let hw = g.node(i).spatial_out() as u64;
            w.len() as u64 * hw * hw
        })
        .sum();
    let o = bin(dir.path(), &["flops", "bundled:mobilenet_v1_reduced", "--ratios", "half.txt"]);
    assert!(stdout(&o).contains(&format!("total: {oracle} MACs")), "{}", stdout(&o));
    let csv = read(dir.path(), "flops.csv");
    assert_eq!(csv.lines().next().unwrap(), "node,op,in_channels,out_channels,kernel,stride,spatial_out,macs,params");
    let col_sum: u64 = csv.lines().skip(1).map(|l| l.split(',').nth(7).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(col_sum, oracle);

    // a ratio file missing a node
    let partial: String = half.to_ratio_file().lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("partial.txt"), partial).unwrap();
    let o = bin(dir.path(), &["flops", "bundled:mobilenet_v1_reduced", "--ratios", "partial.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no entry for node"), "{}", stderr(&o));
}

#[test]
fn report_emits_plot_data() {
    let dir = workspace(CONFIG);
    ok(dir.path(), &["train"]);
    ok(dir.path(), &["search"]);
    let g = bundled::load("mobilenet_v1_reduced").unwrap();
    fs::write(dir.path().join("full.txt"), RatioAssignment::full(&g).to_ratio_file()).unwrap();
    ok(dir.path(), &["report", "run/best_ratios.txt", "full.txt"]);

    let channels = read(dir.path(), "run/channels.csv");
    assert_eq!(channels.lines().next().unwrap(), "file,node,op,base_channels,ratio,channels");
    let convs = g.conv_nodes().len();
    assert_eq!(channels.lines().count(), 1 + 2 * convs);
    for row in channels.lines().skip(1).filter(|l| l.starts_with("1,")) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[3], cols[5], "full ratio keeps base channels");
    }

    let l = g.len();
    let dist = read(dir.path(), "run/distances.csv");
    assert_eq!(dist.lines().next().unwrap(), "file,i,j,distance");
    assert_eq!(dist.lines().count(), 1 + 2 * l * l);
    for row in dist.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        if cols[1] == cols[2] {
            assert_eq!(cols[3], "0");
        }
    }

    let curve = read(dir.path(), "run/reward_curve.csv");
    assert_eq!(curve.lines().count(), 1 + 12);

    let o = bin(dir.path(), &["--config", "exp.toml", "report"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_corr_modes_and_bounds() {
    let dir = workspace(CONFIG);
    ok(dir.path(), &["train"]);
    // nodes 3 and 5 share the 4×4 resolution in the reduced V1 description
    ok(dir.path(), &["analyze-corr", "--layers", "3,3", "--mode", "standard", "--tau", "1.1"]);
    let matrix = read(dir.path(), "run/corr_standard_3_3_matrix.csv");
    for row in matrix.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        if cols[0] == cols[1] && !cols[2].is_empty() {
            assert_eq!(cols[2], "1");
        }
    }
    assert_eq!(read(dir.path(), "run/corr_standard_3_3_pairs.csv"), "i,j,value\n");

    ok(dir.path(), &["analyze-corr", "--layers", "3,5", "--mode", "standard"]);
    ok(dir.path(), &["analyze-corr", "--layers", "3,5", "--mode", "paper"]);
    let std_summary = read(dir.path(), "run/corr_standard_3_5_summary.json");
    let paper_summary = read(dir.path(), "run/corr_paper_3_5_summary.json");
    assert!(std_summary.contains("\"mode\": \"standard\""));
    assert!(paper_summary.contains("\"mode\": \"paper\""));
    assert_ne!(
        read(dir.path(), "run/corr_standard_3_5_matrix.csv"),
        read(dir.path(), "run/corr_paper_3_5_matrix.csv")
    );

    let o = bin(dir.path(), &["--config", "exp.toml", "analyze-corr", "--layers", "1,3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(dir.path(), &["--config", "exp.toml", "analyze-corr", "--layers", "3,99"]);
    assert_eq!(o.status.code(), Some(2));
}

const RETRAIN_CONFIG: &str = "\
model = \"bundled:mobilenet_v1_reduced\"
out = \"run\"
seed = 2
[data]
synthetic = \"4,1000,8,2\"
[train]
epochs = 8
init_lr = 0.2
";

#[test]
fn retrain_beats_chance_and_is_deterministic() {
    let dir = workspace(RETRAIN_CONFIG);
    let g = bundled::load("mobilenet_v1_reduced").unwrap();
    let half = apply_ratio_sharing(&g, &vec![0.5; g.prunable().len()]).unwrap();
    fs::write(dir.path().join("half.txt"), half.to_ratio_file()).unwrap();
    let msg = ok(dir.path(), &["retrain", "--ratios", "half.txt"]);
    let acc: f64 = msg.trim().rsplit(' ').next().unwrap().parse().unwrap();
    // 1/C plus three binomial standard deviations over the evaluation split
    let n_eval = 1000.0 - 600.0 - 150.0;
    let bound = 0.25 + 3.0 * (0.25f64 * 0.75 / n_eval).sqrt();
    assert!(acc >= bound, "accuracy {acc} below {bound}");

    let first = fs::read(dir.path().join("run/retrained.bin")).unwrap();
    ok(dir.path(), &["--out", "again", "retrain", "--ratios", "half.txt"]);
    assert_eq!(fs::read(dir.path().join("again/retrained.bin")).unwrap(), first);
    assert_eq!(read(dir.path(), "again/retrain_loss.csv"), read(dir.path(), "run/retrain_loss.csv"));
}

#[test]
fn full_ratio_retrain_equals_plain_training() {
    let dir = workspace(&RETRAIN_CONFIG.replace("epochs = 8", "epochs = 2"));
    let g = bundled::load("mobilenet_v1_reduced").unwrap();
    fs::write(dir.path().join("full.txt"), RatioAssignment::full(&g).to_ratio_file()).unwrap();
    ok(dir.path(), &["retrain", "--ratios", "full.txt"]);

    let cfg = ExperimentConfig::from_file(&dir.path().join("exp.toml")).unwrap();
    let data = cfg.data.load().unwrap().split();
    let mut net = StaticNet::<f32>::new(g, 4, cfg.seed).unwrap();
    train_static(&mut net, &mut TrainState::default(), &data.train, &cfg.train, 0, |_, _| {}).unwrap();
    recalibrate_static(&mut net, &data.recalibration, cfg.eval_batch_size).unwrap();
    let acc = evaluate_static(&net, &data.evaluation, cfg.eval_batch_size).unwrap();
    let bytes = net.to_container(TrainingMeta { epochs_completed: 2, seed: cfg.seed }).to_bytes();
    assert_eq!(fs::read(dir.path().join("run/retrained.bin")).unwrap(), bytes);
    assert!(read(dir.path(), "run/retrain_summary.json").contains(&format!("\"accuracy\": {acc}")));
}
