use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
[market]
quotes_per_day = 70

[split]
test_days = 3
val_fraction = 0.25

[model]
d_r = 8
encoder_blocks = 1
decoder_blocks = 1
heads = 2
mlp_layers = 1
mlp_width = 8
ffn_mult = 1

[train.pretrain]
max_epochs = 2
batch_tasks = 4
context_range = [10, 30]
max_targets = 30
lr = 0.001

[train.finetune]
max_epochs = 1
context_range = [10, 30]
lr = 0.0001

[eval]
n_context = 30
n_list = [10, 30]
arb_k_grid = [-0.3, 0.3, 0.05]
"#;

fn volnp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volnp")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = volnp(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("exp.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let c = s(&cfg);
    let dir = |name: &str| -> PathBuf { root.join(name) };

    ok(&["gen-market", "--config", c, "--run-dir", s(&dir("gen")), "--days", "12", "--seed", "3"]);
    let market = dir("gen").join("market");
    assert_eq!(std::fs::read_dir(market.join("days")).unwrap().count(), 12);
    let m = manifest(&dir("gen"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 3);
    assert!(m["config"].as_str().unwrap().contains("n_days = 12"));

    ok(&["build-priors", "--config", c, "--run-dir", s(&dir("priors")), "--bundle", s(&market)]);
    let bundle = dir("priors").join("bundle");
    let first_day = std::fs::read_dir(bundle.join("days")).unwrap().next().unwrap().unwrap().path();
    assert!(first_day.join("sabr_surface.csv").exists());
    assert_eq!(
        std::fs::read(first_day.join("quotes.csv")).unwrap(),
        std::fs::read(market.join("days").join(first_day.file_name().unwrap()).join("quotes.csv")).unwrap()
    );

    ok(&["train", "--config", c, "--run-dir", s(&dir("pre")), "--stage", "pretrain", "--bundle", s(&bundle), "--seed", "1"]);
    let pre_ckpt = dir("pre").join("model.json");
    let log = std::fs::read_to_string(dir("pre").join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let pre_manifest = manifest(&dir("pre"));
    assert_eq!(pre_manifest["inputs"].as_array().unwrap().len(), 2);

    ok(&["train", "--config", c, "--run-dir", s(&dir("ft")), "--stage", "finetune", "--bundle", s(&bundle), "--init", s(&pre_ckpt)]);
    let ft_ckpt = dir("ft").join("model.json");
    let ft_spec = format!("FT={}", s(&ft_ckpt));

    let out = ok(&["evaluate", "--config", c, "--run-dir", s(&dir("eval")), "--bundle", s(&bundle), "--checkpoint", &ft_spec, "--models", "ssvi,gp"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("FT") && stdout.contains("SSVI") && stdout.contains("GP"));
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir("eval").join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
    assert_eq!(reports[0]["n_days"], 3);
    let counts: Vec<u64> = reports.as_array().unwrap().iter().map(|r| r["overall"]["count"].as_u64().unwrap()).collect();
    assert!(counts.iter().all(|&n| n == counts[0] && n > 0));

    ok(&["sweep", "--config", c, "--run-dir", s(&dir("sweep")), "--bundle", s(&bundle), "--checkpoint", &ft_spec]);
    let sweep = std::fs::read_to_string(dir("sweep").join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);

    ok(&["heatmap", "--config", c, "--run-dir", s(&dir("heat")), "--bundle", s(&bundle), "--models", "ssvi", "--k-edges", "-0.8,0,0.8", "--tau-edges", "0,1,3"]);
    let heat = std::fs::read_to_string(dir("heat").join("heatmap_SSVI.csv")).unwrap();
    assert!(heat.starts_with("k_lo,k_hi,tau_lo,tau_hi,rmse_bps,count"));
    assert_eq!(heat.lines().count(), 5);

    ok(&["arb-check", "--config", c, "--run-dir", s(&dir("arb")), "--bundle", s(&bundle), "--models", "ssvi", "--checkpoint", &ft_spec]);
    let arb = std::fs::read_to_string(dir("arb").join("arbitrage_summary.csv")).unwrap();
    assert_eq!(arb.lines().count(), 1 + 2 * 3);
    for line in arb.lines().filter(|l| l.starts_with("SSVI")) {
        assert_eq!(line.split(',').nth(4).unwrap(), "1");
    }

    let context = root.join("context.csv");
    std::fs::write(&context, "k,tau,vol\n-0.1,0.5,0.23\n0.0,0.5,0.2\n0.1,0.5,0.19\n0.0,1.0,0.21\n").unwrap();
    ok(&["reconstruct", "--run-dir", s(&dir("rec")), "--checkpoint", s(&ft_ckpt), "--context", s(&context), "--grid", "k:-0.5:0.5:0.025", "tau:0.1:2:0.1"]);
    let surface = std::fs::read_to_string(dir("rec").join("surface.csv")).unwrap();
    assert_eq!(surface.lines().count(), 1 + 41 * 20);
    assert!(surface.starts_with("k,tau,vol,std"));
}

#[test]
fn training_is_reproducible_from_the_same_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("exp.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let c = s(&cfg);
    ok(&["gen-market", "--config", c, "--run-dir", s(&root.join("gen")), "--days", "10"]);
    let market = root.join("gen/market");
    for run in ["a", "b"] {
        ok(&["train", "--config", c, "--run-dir", s(&root.join(run)), "--stage", "base", "--bundle", s(&market), "--epochs", "2", "--batch-tasks", "4"]);
    }
    assert_eq!(std::fs::read(root.join("a/model.json")).unwrap(), std::fs::read(root.join("b/model.json")).unwrap());
    assert_eq!(manifest(&root.join("a"))["inputs_sha256"], manifest(&root.join("b"))["inputs_sha256"]);
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope/model.json");
    let spec = format!("X={}", s(&missing));
    let out = volnp(&["evaluate", "--run-dir", s(&tmp.path().join("run")), "--bundle", s(tmp.path()), "--checkpoint", &spec]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("ConfigError") && err.contains(s(&missing)), "{err}");
    assert!(manifest(&tmp.path().join("run"))["status"].as_str().unwrap().starts_with("failed"));
}

#[test]
fn finetune_without_init_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen-market", "--run-dir", s(&tmp.path().join("gen")), "--days", "3", "--quotes-per-day", "30"]);
    let out = volnp(&["train", "--run-dir", s(&tmp.path().join("t")), "--stage", "finetune", "--bundle", s(&tmp.path().join("gen/market"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flags_and_bad_config_fail() {
    let out = volnp(&["evaluate", "--bundel", "x"]);
    assert!(!out.status.success());
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[modle]\nd_r = 3\n").unwrap();
    let out = volnp(&["gen-market", "--config", s(&cfg), "--run-dir", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("ConfigError"));
}

#[test]
fn help_documents_flags() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--stage", "--bundle", "--init", "--epochs", "--lr", "--batch-tasks", "--patience", "--seed", "--threads", "--config", "--out"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let out = ok(&["reconstruct", "--help"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("--grid"));
}

#[test]
fn runs_land_in_timestamped_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let out_root = tmp.path().join("runs");
    for _ in 0..2 {
        ok(&["gen-market", "--out", s(&out_root), "--days", "2", "--quotes-per-day", "20"]);
    }
    let dirs: Vec<_> = std::fs::read_dir(&out_root).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(dirs.len(), 2);
    assert!(dirs.iter().all(|d| d.contains("-gen-market")));
}

#[test]
fn ingest_splits_quote_file_by_date() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen-market", "--run-dir", s(&tmp.path().join("gen")), "--days", "2", "--quotes-per-day", "25"]);
    let mut rows = Vec::new();
    let mut header = String::new();
    let days = tmp.path().join("gen/market/days");
    let mut entries: Vec<_> = std::fs::read_dir(&days).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for d in &entries {
        let text = std::fs::read_to_string(d.join("quotes.csv")).unwrap();
        let mut lines = text.lines();
        header = lines.next().unwrap().to_string();
        rows.extend(lines.map(str::to_string));
    }
    let all = tmp.path().join("all.csv");
    std::fs::write(&all, format!("{header}\n{}\n", rows.join("\n"))).unwrap();
    ok(&["ingest", "--run-dir", s(&tmp.path().join("ing")), "--input", s(&all)]);
    let stats = std::fs::read_to_string(tmp.path().join("ing/ingest_stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 3);
    assert!(tmp.path().join("ing/bundle/days").read_dir().unwrap().count() == 2);
    let kept: usize = stats.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(kept, 50);
}
