use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use volnp_core::arbitrage::ArbitrageReport;
use volnp_core::eval::{
    arbitrage_by_day, error_heatmap, evaluate_models, sparsity_sweep, write_reports_csv, write_sweep_csv, GpAdapter,
    ModelAdapter, SabrAdapter, SsviAdapter, VolNpAdapter,
};
use volnp_core::market::{
    build_pretraining_surfaces, day_dir, generate_market, ingest_day_with_stats, load_bundle, read_quote_records,
    read_surface_csv, write_bundle, write_day_surfaces, write_quote_records, write_surface_csv, Generator, QUOTES_FILE,
};
use volnp_core::sabr::inclusive_range;
use volnp_core::train::{run_stage, split_days, write_log_jsonl, Stage};
use volnp_core::volnp::VolNp;
use volnp_core::{Coordinate, DayRecord, Quote, RawQuoteRecord};

use crate::config::{stage_name, FileConfig};
use crate::error::{CliError, CliResult, CoreContext, IoContext};
use crate::{Command, DaySet, EvalArgs, GeneratorArg, ModelArgs, Outcome, StageArg};

/// Paths a command reads, hashed into the manifest before it runs.
pub fn inputs(cmd: &Command) -> CliResult<Vec<PathBuf>> {
    let eval_inputs = |e: &EvalArgs| -> CliResult<Vec<PathBuf>> {
        let mut v = vec![e.bundle.clone()];
        for spec in &e.models.checkpoints {
            v.push(parse_checkpoint_spec(spec)?.1);
        }
        Ok(v)
    };
    Ok(match cmd {
        Command::GenMarket(_) => vec![],
        Command::Ingest(a) => vec![a.input.clone()],
        Command::BuildPriors(a) => vec![a.bundle.clone()],
        Command::Train(a) => std::iter::once(a.bundle.clone()).chain(a.init.clone()).collect(),
        Command::Evaluate(e) | Command::ArbCheck(e) => eval_inputs(e)?,
        Command::Sweep(s) => eval_inputs(&s.eval)?,
        Command::Heatmap(h) => eval_inputs(&h.eval)?,
        Command::Reconstruct(r) => std::iter::once(r.context.clone()).chain(r.checkpoint.clone()).collect(),
    })
}

pub fn execute(cmd: &Command, cfg: &FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let mut cfg = cfg.clone();
    match cmd {
        Command::GenMarket(a) => gen_market(a, &mut cfg, run_dir),
        Command::Ingest(a) => ingest(&a.input, &cfg, run_dir),
        Command::BuildPriors(a) => build_priors(a, &mut cfg, run_dir),
        Command::Train(a) => train(a, &mut cfg, run_dir),
        Command::Evaluate(e) => evaluate(e, &mut cfg, run_dir),
        Command::Sweep(s) => {
            if !s.n_list.is_empty() {
                cfg.eval.n_list = s.n_list.clone();
            }
            sweep(&s.eval, &mut cfg, run_dir)
        }
        Command::Heatmap(h) => {
            if !h.k_edges.is_empty() {
                cfg.eval.k_edges = h.k_edges.clone();
            }
            if !h.tau_edges.is_empty() {
                cfg.eval.tau_edges = h.tau_edges.clone();
            }
            heatmap(&h.eval, &mut cfg, run_dir)
        }
        Command::ArbCheck(e) => arb_check(e, &mut cfg, run_dir),
        Command::Reconstruct(r) => reconstruct(r, &cfg, run_dir),
    }
}

fn core<T>(r: volnp_core::Result<T>, what: impl FnOnce() -> String) -> CliResult<T> {
    r.context(what)
}

fn gen_market(a: &crate::GenMarketArgs, cfg: &mut FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let m = &mut cfg.market;
    if let Some(d) = a.days {
        m.n_days = d;
    }
    if let Some(s) = a.seed {
        m.seed = s;
    }
    if let Some(g) = a.generator {
        m.generator = match g {
            GeneratorArg::SsviRandom => Generator::SsviRandom,
            GeneratorArg::SabrMixture => Generator::SabrMixture,
        };
    }
    if let Some(q) = a.quotes_per_day {
        m.quotes_per_day = q;
    }
    if let Some(n) = a.noise_bps {
        m.noise_bps = n;
    }
    let days = core(generate_market(&cfg.market), || "generating market".into())?;
    let out = run_dir.join("market");
    core(write_bundle(&out, &days, cfg.market.rate), || out.display().to_string())?;
    log::info!("wrote {} synthetic days to {}", days.len(), out.display());
    Ok(Outcome { outputs: vec![out], seed: Some(cfg.market.seed), config: cfg.to_toml() })
}

fn ingest(input: &Path, cfg: &FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let records = core(read_quote_records(input), || input.display().to_string())?;
    let mut by_date: BTreeMap<chrono::NaiveDate, Vec<RawQuoteRecord>> = BTreeMap::new();
    for r in records {
        by_date.entry(r.date).or_default().push(r);
    }
    if by_date.is_empty() {
        return Err(CliError::Core {
            context: input.display().to_string(),
            source: volnp_core::Error::EmptyAfterFilter("no quote rows".into()),
        });
    }
    let bundle = run_dir.join("bundle");
    let stats_path = run_dir.join("ingest_stats.csv");
    let mut w = csv::Writer::from_path(&stats_path).map_err(|e| CliError::Io { path: stats_path.clone(), source: e.into() })?;
    let header = ["date", "total", "invalid", "illiquid", "out_of_range", "duplicate", "inversion_failed", "kept"];
    w.write_record(header).map_err(|e| CliError::Io { path: stats_path.clone(), source: e.into() })?;
    let mut kept_days = 0;
    for (id, (date, recs)) in by_date.iter().enumerate() {
        let dir = day_dir(&bundle, *date);
        fs::create_dir_all(&dir).at(&dir)?;
        core(write_quote_records(&dir.join(QUOTES_FILE), recs), || dir.display().to_string())?;
        let row = match ingest_day_with_stats(recs, &cfg.preprocess, id) {
            Ok((day, s)) => {
                core(write_surface_csv(&dir.join("ivs.csv"), &day.quotes), || dir.display().to_string())?;
                kept_days += 1;
                [s.total, s.invalid, s.illiquid, s.out_of_range, s.duplicate, s.inversion_failed, s.kept]
            }
            Err(e) => {
                log::warn!("{date}: {e}");
                [recs.len(), 0, 0, 0, 0, 0, 0]
            }
        };
        let mut fields = vec![date.to_string()];
        fields.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&fields).map_err(|e| CliError::Io { path: stats_path.clone(), source: e.into() })?;
    }
    w.flush().at(&stats_path)?;
    log::info!("ingested {} days ({} with usable quotes) into {}", by_date.len(), kept_days, bundle.display());
    Ok(Outcome { outputs: vec![bundle, stats_path], seed: None, config: cfg.to_toml() })
}

fn load(bundle: &Path, cfg: &FileConfig) -> CliResult<Vec<DayRecord>> {
    core(load_bundle(bundle, &cfg.preprocess), || format!("loading bundle {}", bundle.display()))
}

fn build_priors(a: &crate::BuildPriorsArgs, cfg: &mut FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    if let Some(b) = a.beta {
        cfg.priors.beta = b;
    }
    let days = load(&a.bundle, cfg)?;
    let days = build_pretraining_surfaces(days, &cfg.priors.grid, cfg.priors.beta);
    let out = run_dir.join("bundle");
    let mut with_prior = 0;
    for day in &days {
        let src = day_dir(&a.bundle, day.date).join(QUOTES_FILE);
        let dst_dir = day_dir(&out, day.date);
        fs::create_dir_all(&dst_dir).at(&dst_dir)?;
        fs::copy(&src, dst_dir.join(QUOTES_FILE)).at(&src)?;
        core(write_day_surfaces(&out, day), || dst_dir.display().to_string())?;
        with_prior += day.synthetic_surface.is_some() as usize;
    }
    log::info!("SABR priors built for {with_prior} of {} days", days.len());
    Ok(Outcome { outputs: vec![out], seed: None, config: cfg.to_toml() })
}

fn train(a: &crate::TrainArgs, cfg: &mut FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let stage = match a.stage {
        StageArg::Pretrain => Stage::Pretrain,
        StageArg::Finetune => Stage::Finetune,
        StageArg::Base => Stage::Base,
    };
    let mut tc = cfg.train_config(stage)?;
    if let Some(e) = a.epochs {
        tc.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    if let Some(b) = a.batch_tasks {
        tc.batch_tasks = b;
    }
    if let Some(p) = a.patience {
        tc.early_stop_patience = p;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    tc.validate().map_err(|e| CliError::config(e.to_string()))?;
    let table = toml::Table::try_from(&tc).map_err(|e| CliError::config(e.to_string()))?;
    match stage {
        Stage::Pretrain => cfg.train.pretrain = table,
        Stage::Finetune => cfg.train.finetune = table,
        Stage::Base => cfg.train.base = table,
    }

    let model = match (&a.init, stage) {
        (Some(path), _) => core(VolNp::load(path), || path.display().to_string())?,
        (None, Stage::Finetune) => return Err(CliError::config("finetune needs --init <checkpoint>")),
        (None, _) => {
            cfg.model.validate().map_err(|e| CliError::config(format!("[model]: {e}")))?;
            core(VolNp::new(cfg.model.clone(), tc.seed), || "initialising model".into())?
        }
    };
    let days = load(&a.bundle, cfg)?;
    let split = core(split_days(days, &cfg.split), || "splitting days".into())?;
    log::info!(
        "{} stage: {} train / {} validation days, {} parameters",
        stage_name(stage),
        split.train.len(),
        split.val.len(),
        model.params.num_parameters()
    );
    let outcome = core(run_stage(&split.train, model, &tc, &split.val), || format!("{} stage", stage_name(stage)))?;
    let ckpt = run_dir.join("model.json");
    let log_path = run_dir.join("train_log.jsonl");
    let summary_path = run_dir.join("summary.json");
    core(outcome.model.save(&ckpt), || ckpt.display().to_string())?;
    core(write_log_jsonl(&log_path, &outcome.log), || log_path.display().to_string())?;
    let summary = serde_json::json!({
        "stage": stage_name(stage),
        "best_epoch": outcome.best_epoch,
        "best_val_nll": outcome.best_val_nll,
        "epochs_run": outcome.log.len() - 1,
        "train_days": split.train.len(),
        "val_days": split.val.len(),
    });
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("json")).at(&summary_path)?;
    log::info!("best epoch {} with validation NLL {:.5}", outcome.best_epoch, outcome.best_val_nll);
    Ok(Outcome { outputs: vec![ckpt, log_path, summary_path], seed: Some(tc.seed), config: cfg.to_toml() })
}

pub fn parse_checkpoint_spec(spec: &str) -> CliResult<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        None if !spec.is_empty() => {
            let path = PathBuf::from(spec);
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "VolNP".into());
            Ok((name, path))
        }
        _ => Err(CliError::config(format!("bad --checkpoint {spec:?}; expected NAME=PATH"))),
    }
}

fn baseline(name: &str) -> CliResult<Box<dyn ModelAdapter>> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "sabr" => Box::new(SabrAdapter::default()),
        "ssvi" => Box::new(SsviAdapter),
        "gp" => Box::new(GpAdapter::default()),
        other => return Err(CliError::config(format!("unknown model {other:?}; expected sabr, ssvi or gp"))),
    })
}

fn adapters(m: &ModelArgs) -> CliResult<Vec<Box<dyn ModelAdapter>>> {
    let mut out = Vec::new();
    for spec in &m.checkpoints {
        let (name, path) = parse_checkpoint_spec(spec)?;
        if !path.exists() {
            return Err(CliError::config(format!("checkpoint {} does not exist", path.display())));
        }
        let model = core(VolNp::load(&path), || path.display().to_string())?;
        out.push(Box::new(VolNpAdapter { name, model }) as Box<dyn ModelAdapter>);
    }
    for name in &m.models {
        out.push(baseline(name)?);
    }
    if out.is_empty() {
        return Err(CliError::config("no models given; use --models and/or --checkpoint"));
    }
    Ok(out)
}

fn eval_days(e: &EvalArgs, cfg: &mut FileConfig) -> CliResult<Vec<DayRecord>> {
    if let Some(n) = e.n_context {
        cfg.eval.n_context = n;
    }
    if let Some(s) = e.seed {
        cfg.eval.seed = s;
    }
    let days = load(&e.bundle, cfg)?;
    Ok(match e.days {
        DaySet::All => days,
        DaySet::Test => core(split_days(days, &cfg.split), || "splitting days".into())?.test,
    })
}

fn refs(v: &[Box<dyn ModelAdapter>]) -> Vec<&dyn ModelAdapter> {
    v.iter().map(|b| b.as_ref()).collect()
}

fn evaluate(e: &EvalArgs, cfg: &mut FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let models = adapters(&e.models)?;
    let days = eval_days(e, cfg)?;
    let reports = core(evaluate_models(&refs(&models), &days, cfg.eval.n_context, cfg.eval.seed), || "evaluation".into())?;
    let json = run_dir.join("reports.json");
    let csv_path = run_dir.join("reports.csv");
    fs::write(&json, serde_json::to_string_pretty(&reports).expect("json")).at(&json)?;
    let f = fs::File::create(&csv_path).at(&csv_path)?;
    core(write_reports_csv(f, &reports), || csv_path.display().to_string())?;
    println!("{:<12} {:>10} {:>10} {:>8}", "model", "rmse_bps", "mae_bps", "points");
    for r in &reports {
        println!("{:<12} {:>10.2} {:>10.2} {:>8}", r.model_name, r.overall.rmse(), r.overall.mae(), r.overall.count);
    }
    Ok(Outcome { outputs: vec![json, csv_path], seed: Some(cfg.eval.seed), config: cfg.to_toml() })
}

fn sweep(e: &EvalArgs, cfg: &mut FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let models = adapters(&e.models)?;
    let days = eval_days(e, cfg)?;
    let rows = core(sparsity_sweep(&refs(&models), &days, &cfg.eval.n_list, cfg.eval.seed), || "sparsity sweep".into())?;
    let json = run_dir.join("sweep.json");
    let csv_path = run_dir.join("sweep.csv");
    fs::write(&json, serde_json::to_string_pretty(&rows).expect("json")).at(&json)?;
    let f = fs::File::create(&csv_path).at(&csv_path)?;
    core(write_sweep_csv(f, &rows), || csv_path.display().to_string())?;
    Ok(Outcome { outputs: vec![json, csv_path], seed: Some(cfg.eval.seed), config: cfg.to_toml() })
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn heatmap(e: &EvalArgs, cfg: &mut FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let models = adapters(&e.models)?;
    let days = eval_days(e, cfg)?;
    let mut outputs = Vec::new();
    for m in &models {
        let h = core(
            error_heatmap(m.as_ref(), &days, &cfg.eval.k_edges, &cfg.eval.tau_edges, cfg.eval.n_context, cfg.eval.seed),
            || format!("heatmap for {}", m.name()),
        )?;
        let path = run_dir.join(format!("heatmap_{}.csv", file_safe(m.name())));
        let f = fs::File::create(&path).at(&path)?;
        core(h.write_csv(f), || path.display().to_string())?;
        outputs.push(path);
    }
    Ok(Outcome { outputs, seed: Some(cfg.eval.seed), config: cfg.to_toml() })
}

fn arb_check(e: &EvalArgs, cfg: &mut FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let models = adapters(&e.models)?;
    let days = eval_days(e, cfg)?;
    let [lo, hi, step] = cfg.eval.arb_k_grid;
    let k_grid = inclusive_range(lo, hi, step);
    let summary_path = run_dir.join("arbitrage_summary.csv");
    let mut w = csv::Writer::from_path(&summary_path).map_err(|e| CliError::Io { path: summary_path.clone(), source: e.into() })?;
    let io = |e: csv::Error| CliError::Io { path: summary_path.clone(), source: e.into() };
    w.write_record(["model", "day_id", "n_slices", "clean_slices", "fraction_clean", "total_violation_width", "min_g", "error"])
        .map_err(io)?;
    let mut outputs = vec![summary_path.clone()];
    for m in &models {
        let per_day = arbitrage_by_day(m.as_ref(), &days, &k_grid, cfg.eval.n_context, cfg.eval.seed);
        let mut reports: BTreeMap<usize, ArbitrageReport> = BTreeMap::new();
        for (day_id, r) in per_day {
            let mut fields = vec![m.name().to_string(), day_id.to_string()];
            match r {
                Ok(rep) => {
                    let s = &rep.summary;
                    fields.extend([
                        s.n_slices.to_string(),
                        s.clean_slices.to_string(),
                        s.fraction_clean.to_string(),
                        s.total_violation_width.to_string(),
                        s.min_g.to_string(),
                        String::new(),
                    ]);
                    reports.insert(day_id, rep);
                }
                Err(err) => {
                    fields.extend(std::iter::repeat(String::new()).take(5));
                    fields.push(err.to_string());
                }
            }
            w.write_record(&fields).map_err(io)?;
        }
        let path = run_dir.join(format!("arbitrage_{}.json", file_safe(m.name())));
        fs::write(&path, serde_json::to_string_pretty(&reports).expect("json")).at(&path)?;
        outputs.push(path);
    }
    w.flush().at(&summary_path)?;
    Ok(Outcome { outputs, seed: Some(cfg.eval.seed), config: cfg.to_toml() })
}

/// `axis:lo:hi:step` to an inclusive grid.
pub fn parse_axis(spec: &str, axis: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::config(format!("bad grid spec {spec:?}; expected {axis}:lo:hi:step"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 4 || parts[0] != axis {
        return Err(bad());
    }
    let nums = parts[1..].iter().map(|p| p.parse::<f64>().map_err(|_| bad())).collect::<CliResult<Vec<_>>>()?;
    let (lo, hi, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || hi < lo || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok(inclusive_range(lo, hi, step))
}

fn reconstruct(r: &crate::ReconstructArgs, cfg: &FileConfig, run_dir: &Path) -> CliResult<Outcome> {
    let k_grid = parse_axis(&r.grid[0], "k")?;
    let tau_grid = parse_axis(&r.grid[1], "tau")?;
    if tau_grid.iter().any(|&t| t <= 0.0) {
        return Err(CliError::config("tau grid must be positive"));
    }
    let context: Vec<Quote> = core(read_surface_csv(&r.context), || r.context.display().to_string())?;
    let coords = tau_grid
        .iter()
        .flat_map(|&tau| k_grid.iter().map(move |&k| Coordinate::new(k, tau)))
        .collect::<volnp_core::Result<Vec<_>>>()
        .map_err(|e| CliError::config(e.to_string()))?;
    let out = run_dir.join("surface.csv");
    let mut w = csv::Writer::from_path(&out).map_err(|e| CliError::Io { path: out.clone(), source: e.into() })?;
    let io = |e: csv::Error| CliError::Io { path: out.clone(), source: e.into() };
    match (&r.checkpoint, &r.model) {
        (Some(path), _) => {
            let model = core(VolNp::load(path), || path.display().to_string())?;
            let preds = core(model.predict(&context, &coords), || "prediction".into())?;
            w.write_record(["k", "tau", "vol", "std"]).map_err(io)?;
            for (c, p) in coords.iter().zip(preds) {
                w.write_record([c.k.to_string(), c.tau.to_string(), p.mu.to_string(), p.std_dev().to_string()]).map_err(io)?;
            }
        }
        (None, Some(name)) => {
            let adapter = baseline(name)?;
            let fitted = core(adapter.fit_day(&context), || format!("fitting {}", adapter.name()))?;
            let vols = core(fitted.predict(&coords), || "prediction".into())?;
            w.write_record(["k", "tau", "vol"]).map_err(io)?;
            for (c, v) in coords.iter().zip(vols) {
                w.write_record([c.k.to_string(), c.tau.to_string(), v.to_string()]).map_err(io)?;
            }
        }
        (None, None) => return Err(CliError::config("reconstruct needs --checkpoint or --model")),
    }
    w.flush().at(&out)?;
    log::info!("wrote {} grid points to {}", coords.len(), out.display());
    Ok(Outcome { outputs: vec![out], seed: None, config: cfg.to_toml() })
}
