use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use npnorm_cli::config::RunConfig;
use npnorm_cli::pipeline::{metrics_csv, MetricRow};
use npnorm_cli::report::{aggregate, bar_chart_svg, parse_metrics, report};

fn npnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npnorm")).args(args).output().expect("binary runs")
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

const QUICK: [&str; 4] = ["--set", "schedule.epochs=3", "--set", "context.M=2"];

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = npnorm(&["generate", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("90 subjects"));
    }
    assert_eq!(files(&a.join("cohort")), files(&b.join("cohort")));
}

#[test]
fn train_and_evaluate_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    assert!(npnorm(&["generate", "--out", o]).status.success());
    let mut train = vec!["train", "--out", o];
    train.extend(QUICK);
    let t = npnorm(&train);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let log1 = fs::read(out.join("model/trainlog.csv")).unwrap();
    assert!(npnorm(&train).status.success());
    assert_eq!(log1, fs::read(out.join("model/trainlog.csv")).unwrap());

    let mut eval = vec!["evaluate", "--out", o];
    eval.extend(QUICK);
    let e = npnorm(&eval);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let metrics = fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    let rows = parse_metrics(&metrics).unwrap();
    assert_eq!(rows.len(), 6);
    for method in ["np", "baseline"] {
        for group in ["group1", "group2", "group3"] {
            assert_eq!(rows.iter().filter(|r| r.method == method && r.group == group).count(), 1);
        }
    }
    assert!(rows.iter().all(|r| r.m == 2 && (0.0..=1.0).contains(&r.auc)));
    for g in ["group1", "group2", "group3"] {
        assert!(out.join(format!("eval/difference_{g}.npnt")).exists());
    }
    let scores = fs::read_to_string(out.join("eval/scores.csv")).unwrap();
    assert!(scores.starts_with("subject_id,label,summary,probability\n"));
    assert_eq!(scores.lines().count(), 1 + 36);

    let e2 = npnorm(&eval);
    assert!(e2.status.success());
    assert_eq!(metrics, fs::read_to_string(out.join("eval/metrics.csv")).unwrap());

    let rep = tmp.path().join("report");
    let r = npnorm(&["report", "--out", rep.to_str().unwrap(), o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    roxmltree::Document::parse(&fs::read_to_string(rep.join("auc.svg")).unwrap()).unwrap();
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let o = npnorm(&["train", "--out", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = npnorm(&["train", "--set", "context.N=3"]);
    assert_eq!(o.status.code(), Some(3));
    let o = npnorm(&["generate", "--set", "cohort.noise_std=-1"]);
    assert_eq!(o.status.code(), Some(3));
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"schedule": {"epochs": 5, "warmup": 2}}"#).unwrap();
    let o = npnorm(&["--config", cfg.to_str().unwrap(), "--dump-config"]);
    assert_eq!(o.status.code(), Some(3));
    let o = npnorm(&["report", "--out", tmp.path().to_str().unwrap(), missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dump_config_prints_every_default() {
    let o = npnorm(&["--dump-config"]);
    assert!(o.status.success());
    let dumped: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(dumped, RunConfig::default().finalize().unwrap().to_value());
}

/// Every design switch of the library, with a non-default value.
const SWITCHES: [(&str, &str); 26] = [
    ("novelty.sign", "\"signed\""),
    ("novelty.block", "\"max\""),
    ("novelty.top_fraction", "0.05"),
    ("novelty.gevd_population", "\"healthy_test\""),
    ("quantile.eps", "0.01"),
    ("context.M", "5"),
    ("prediction.K", "3"),
    ("prediction.L", "4"),
    ("prediction.mc_dropout", "false"),
    ("prediction.budget", "500"),
    ("schedule.epochs", "7"),
    ("schedule.lr_start", "0.005"),
    ("schedule.lr_end", "0.0001"),
    ("schedule.batch_size", "6"),
    ("schedule.n_mc", "2"),
    ("schedule.decay", "\"cosine\""),
    ("architecture.latent_dim", "4"),
    ("architecture.dropout", "0.3"),
    ("architecture.init_log_noise_var", "-1.0"),
    ("architecture.noise_init", "\"constant\""),
    ("architecture.conv_channels", "[4,8]"),
    ("split.train", "[40,2,2,2]"),
    ("cohort.random_effect_rank", "2"),
    ("cohort.correlation_length", "2.5"),
    ("cohort.covariate_correlation", "0.0"),
    ("analysis.baseline", "false"),
];

#[test]
fn config_switch_completeness() {
    let base = RunConfig::default().to_value();
    for (key, value) in SWITCHES {
        let o = npnorm(&["--set", &format!("{key}={value}"), "--dump-config"]);
        assert!(o.status.success(), "{key}: {}", String::from_utf8_lossy(&o.stderr));
        let dumped: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let pointer = format!("/{}", key.replace('.', "/"));
        let expected: serde_json::Value = serde_json::from_str(value).unwrap();
        assert_eq!(dumped.pointer(&pointer), Some(&expected), "{key}");
        assert_ne!(base.pointer(&pointer), Some(&expected), "{key} default equals the probe value");
    }
    // region masks are a path
    let o = npnorm(&["--set", "analysis.region_masks=/tmp/masks.json", "--dump-config"]);
    let dumped: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(dumped.pointer("/analysis/region_masks").unwrap(), "/tmp/masks.json");
}

#[test]
fn paper_shaped_config_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("paper.json");
    let spec = npnorm::cohort::CohortSpec::paper_shaped(0);
    fs::write(&cfg, serde_json::json!({ "cohort": spec, "split": { "train": [75, 5, 5, 5] } }).to_string()).unwrap();
    let o = npnorm(&["--config", cfg.to_str().unwrap(), "--dump-config"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = npnorm(&["generate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("p").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("255 subjects"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("voxels"));
}

fn row(run: &str, method: &str, group: &str, m: usize, auc: f64) -> MetricRow {
    MetricRow {
        run_id: run.into(),
        method: method.into(),
        group: group.into(),
        m,
        auc,
        auc_std: 0.0,
    }
}

#[test]
fn report_matches_hand_average() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = [
        vec![row("a", "np", "group1", 20, 0.75), row("a", "np", "group2", 20, 0.5), row("a", "baseline", "group1", 20, 0.625)],
        vec![row("b", "np", "group1", 20, 0.875), row("b", "np", "group2", 20, 0.25), row("b", "np", "group1", 1, 0.5)],
    ];
    let mut dirs = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let d = tmp.path().join(format!("run{i}"));
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("metrics.csv"), metrics_csv(r)).unwrap();
        dirs.push(d);
    }
    let agg = report(&dirs, &tmp.path().join("out")).unwrap();
    let find = |m: &str, k: usize, g: &str| agg.iter().find(|a| a.method == m && a.m == k && a.group == g).unwrap();
    assert_eq!(find("np", 20, "group1").auc_mean, (0.75 + 0.875) / 2.0);
    assert_eq!(find("np", 20, "group1").runs, 2);
    assert_eq!(find("np", 20, "group2").auc_mean, 0.375);
    assert_eq!(find("np", 20, "group2").auc_std, 0.125);
    assert_eq!(find("np", 1, "group1").runs, 1);
    assert_eq!(find("baseline", 20, "group1").auc_mean, 0.625);
    let summary = fs::read_to_string(tmp.path().join("out/summary.csv")).unwrap();
    assert!(summary.contains("np,20,group1,2,0.8125,0.0625\n"));

    fs::write(dirs[1].join("metrics.csv"), "run,auc\nb,0.5\n").unwrap();
    let err = report(&dirs, &tmp.path().join("out")).unwrap_err().to_string();
    assert!(err.contains("run1"), "{err}");
}

#[test]
fn svg_is_well_formed() {
    let single = aggregate(&[row("a", "np", "group1", 20, 0.8)]);
    let many = aggregate(&[
        row("a", "np", "group1", 20, 0.8),
        row("a", "np & co", "group<2>", 5, 0.6),
        row("b", "baseline", "group3", 20, 0.55),
    ]);
    for agg in [single, many] {
        let svg = bar_chart_svg(&agg);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(!svg.contains("href"));
    }
}
