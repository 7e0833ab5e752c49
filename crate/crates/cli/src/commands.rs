use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde_json::json;

use qoecast::eval::{
    benchmark_latency, evaluate, evaluate_last_value, export_error_density, metrics_csv,
    rank_variants, ranking_table, MetricsReport,
};
use qoecast::explain::{attention_map, integrated_gradients, lime_local, Explanation, LimeConfig};
use qoecast::pipeline::{prepare_dataset, PipelineConfig};
use qoecast::seed::derive_seed;
use qoecast::serve::{run_stream, serve_tcp, Forecaster, ServeConfig, StreamState};
use qoecast::synthgen::{generate_traces, GeneratorConfig};
use qoecast::telemetry::{load_trace, write_trace, TraceFormat};
use qoecast::train::{run_variants_with, train_variant, TrainConfig};
use qoecast::{FeedbackPolicy, ModelBundle, PreparedDataset, VariantId};

use crate::args::*;
use crate::error::CliError;
use crate::manifest::RunDir;

pub const DEFAULT_SEED: u64 = 1;

/// Write to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

macro_rules! say {
    ($($t:tt)*) => {
        emit(&format!("{}\n", format_args!($($t)*)))?
    };
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_dataset(dir: &Path) -> Result<PreparedDataset, CliError> {
    PreparedDataset::load(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn load_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    ModelBundle::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn bundle_path(models: &Path, v: VariantId) -> PathBuf {
    models.join(format!("{v}.bundle"))
}

pub fn generate(cli: &Cli, args: &GenerateArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => read_toml::<GeneratorConfig>(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(d) = args.duration {
        config.duration_s = d;
    }
    if let Some(w) = args.window_s {
        config.window_s = w;
    }
    if args.traces == 0 {
        return Err(CliError::Usage("--traces must be at least 1".into()));
    }
    let mut run = RunDir::create(cli.out.as_deref(), "generate", config.seed)?;
    run.set_config(&json!({ "generator": config, "traces": args.traces, "format": format!("{:?}", args.format) }))?;
    let traces = generate_traces(&config, args.traces)?;
    let format: TraceFormat = args.format.into();
    for (i, trace) in traces.iter().enumerate() {
        let path = run.file(&format!("trace_{i:03}.{}", format.extension()));
        write_trace(trace, &path, format)?;
        run.record(&path);
        run.record(&qoecast::telemetry::labels_path(&path));
    }
    let dir = run.finish()?;
    say!("wrote {} traces to {}", traces.len(), dir.display());
    Ok(())
}

/// Trace files of a directory in name order, labels files excluded.
fn trace_files(dir: &Path) -> Result<Vec<(PathBuf, TraceFormat)>, CliError> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<(PathBuf, TraceFormat)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.to_string_lossy().ends_with(".labels.csv"))
        .filter_map(|p| TraceFormat::from_path(&p).map(|f| (p, f)))
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no trace files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn prepare(cli: &Cli, args: &PrepareArgs) -> Result<(), CliError> {
    let config = PipelineConfig {
        window_s: args.window_s,
        context: args.context,
        ..PipelineConfig::default()
    };
    let files = trace_files(&args.traces)?;
    let mut traces = Vec::with_capacity(files.len());
    for (path, format) in &files {
        let (trace, report) = load_trace(path, *format, args.tick_s)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if !report.skipped.is_empty() {
            log::warn!("{}: skipped {} rows", path.display(), report.skipped.len());
        }
        traces.push(trace);
    }
    let (dataset, report) = prepare_dataset(&traces, &config)?;
    let mut run = RunDir::create(
        cli.out.as_deref(),
        "prepare",
        cli.seed.unwrap_or(DEFAULT_SEED),
    )?;
    run.set_config(&json!({
        "pipeline": config,
        "tick_s": args.tick_s,
        "traces": files.iter().map(|(p, _)| p.display().to_string()).collect::<Vec<_>>(),
    }))?;
    dataset.save(&run.path)?;
    for name in ["dataset.json", "train.ndjson", "val.ndjson", "test.ndjson"] {
        let p = run.file(name);
        run.record(&p);
    }
    let dir = run.finish()?;
    let dropped: usize = report.traces.iter().map(|(_, d)| d.len()).sum();
    say!(
        "{} sequences (train {}, val {}, test {}), {dropped} windows dropped -> {}",
        report.sequences,
        dataset.split.train.len(),
        dataset.split.val.len(),
        dataset.split.test.len(),
        dir.display()
    );
    Ok(())
}

fn train_config(
    cli: &Cli,
    path: Option<&Path>,
    max_epochs: Option<usize>,
) -> Result<TrainConfig, CliError> {
    let mut config = match path {
        Some(p) => read_toml::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(m) = max_epochs {
        config.max_epochs = m;
    }
    config.validate()?;
    Ok(config)
}

pub fn train(cli: &Cli, args: &TrainArgs) -> Result<(), CliError> {
    let config = train_config(cli, args.config.as_deref(), args.max_epochs)?;
    let dataset = load_dataset(&args.data)?;
    let variants: Vec<VariantId> = match args.variant {
        Some(v) if !args.all => vec![v],
        _ => VariantId::ALL.to_vec(),
    };
    let mut run = RunDir::create(cli.out.as_deref(), "train", config.seed)?;
    run.set_config(&json!({ "train": config, "data": args.data, "variants": variants }))?;
    let summary = run_variants_with(&variants, &dataset, &config, &run.path, train_variant)?;
    for v in &variants {
        let b = bundle_path(&run.path, *v);
        if b.exists() {
            run.record(&b);
            run.record(&run.file(&format!("{v}.history.csv")));
        }
    }
    let summary_path = run.file("summary.csv");
    run.record(&summary_path);
    let failures = summary.failures();
    let dir = run.finish()?;
    emit(&summary.to_csv())?;
    say!("-> {}", dir.display());
    if failures > 0 {
        return Err(CliError::Internal(format!(
            "{failures} variant(s) failed to train"
        )));
    }
    Ok(())
}

fn evaluate_models(
    dataset: &PreparedDataset,
    models: &Path,
    variants: &[VariantId],
) -> Result<Vec<(ModelBundle, MetricsReport)>, CliError> {
    let mut out = Vec::new();
    for &v in variants {
        let path = bundle_path(models, v);
        if !path.exists() {
            if variants.len() == VariantId::ALL.len() {
                log::warn!("no bundle for {v} in {}", models.display());
                continue;
            }
            return Err(CliError::Data(format!("missing {}", path.display())));
        }
        let bundle = load_bundle(&path)?;
        let report = evaluate(&bundle, dataset)?;
        out.push((bundle, report));
    }
    if out.is_empty() {
        return Err(CliError::Data(format!(
            "no bundles in {}",
            models.display()
        )));
    }
    Ok(out)
}

fn last_value_line(dataset: &PreparedDataset) -> Result<String, CliError> {
    let (mae, rmse) = evaluate_last_value(dataset)?;
    Ok(format!("last-value baseline: RMSE {rmse:.3} MAE {mae:.3}"))
}

pub fn evaluate_cmd(cli: &Cli, args: &EvaluateArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    let variants = if args.variant.is_empty() {
        VariantId::ALL.to_vec()
    } else {
        args.variant.clone()
    };
    let mut run = RunDir::create(
        cli.out.as_deref(),
        "evaluate",
        cli.seed.unwrap_or(DEFAULT_SEED),
    )?;
    run.set_config(&json!({ "data": args.data, "models": args.models, "variants": variants }))?;
    let reports: Vec<MetricsReport> = evaluate_models(&dataset, &args.models, &variants)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let ranked = rank_variants(&reports);
    let path = run.file("metrics.csv");
    fs::write(&path, metrics_csv(&ranked))?;
    run.record(&path);
    let dir = run.finish()?;
    emit(&ranking_table(&ranked, ranked.len()))?;
    say!("{}", last_value_line(&dataset)?);
    say!("-> {}", dir.display());
    Ok(())
}

/// "gru_x beats lstm_x" lines for every pair present. Reported only.
fn gru_vs_lstm(reports: &[MetricsReport]) -> Vec<String> {
    let find = |name: &str| reports.iter().find(|r| r.variant_id.name() == name);
    reports
        .iter()
        .filter_map(|g| {
            let lstm = g
                .variant_id
                .name()
                .strip_prefix("gru_")
                .map(|rest| format!("lstm_{rest}"))?;
            let l = find(&lstm)?;
            let verdict = if g.rmse < l.rmse {
                "lower"
            } else {
                "not lower"
            };
            Some(format!(
                "{} RMSE {:.3} vs {} RMSE {:.3}: GRU {verdict}",
                g.variant_id, g.rmse, l.variant_id, l.rmse
            ))
        })
        .collect()
}

pub fn benchmark(cli: &Cli, args: &BenchmarkArgs) -> Result<(), CliError> {
    if args.batch == 0 || args.reps == 0 || args.bins == 0 {
        return Err(CliError::Usage(
            "--batch, --reps and --bins must be positive".into(),
        ));
    }
    let dataset = load_dataset(&args.data)?;
    let variants = if args.all {
        VariantId::ALL.to_vec()
    } else {
        args.variant.clone()
    };
    let config = train_config(cli, None, args.max_epochs)?;
    let mut run = RunDir::create(cli.out.as_deref(), "benchmark", config.seed)?;
    run.set_config(&json!({
        "data": args.data,
        "models": args.models,
        "variants": variants,
        "train": config,
        "latency": { "batch": args.batch, "warmup": args.warmup, "reps": args.reps },
        "bins": args.bins,
    }))?;
    let models = match &args.models {
        Some(m) => m.clone(),
        None => {
            let dir = run.file("models");
            let summary = run_variants_with(&variants, &dataset, &config, &dir, train_variant)?;
            for f in fs::read_dir(&dir)? {
                let p = f?.path();
                run.record(&p);
            }
            if summary.failures() > 0 {
                log::warn!("{} variant(s) failed to train", summary.failures());
            }
            dir
        }
    };
    let mut reports = Vec::new();
    for (bundle, mut report) in evaluate_models(&dataset, &models, &variants)? {
        let model = bundle.model()?;
        report.latency = Some(benchmark_latency(
            &model,
            args.batch,
            args.warmup,
            args.reps,
        )?);
        reports.push(report);
    }
    let ranked = rank_variants(&reports);
    let metrics = run.file("metrics.csv");
    fs::write(&metrics, metrics_csv(&ranked))?;
    run.record(&metrics);
    let table = ranking_table(&ranked, args.top);
    let rankings = run.file("rankings.txt");
    fs::write(&rankings, &table)?;
    run.record(&rankings);
    for p in export_error_density(&ranked, args.bins, &run.file("density"))? {
        run.record(&p);
    }
    let dir = run.finish()?;
    emit(&table)?;
    say!("{}", last_value_line(&dataset)?);
    for line in gru_vs_lstm(&ranked) {
        say!("{line}");
    }
    say!("-> {}", dir.display());
    Ok(())
}

pub fn explain(cli: &Cli, args: &ExplainArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&args.bundle)?;
    let dataset = load_dataset(&args.data)?;
    if bundle.scaler != dataset.scaler {
        return Err(CliError::Data(
            "bundle and dataset were scaled differently".into(),
        ));
    }
    let sample = dataset.split.test.get(args.index).ok_or_else(|| {
        CliError::Usage(format!(
            "--index {} outside test split of {}",
            args.index,
            dataset.split.test.len()
        ))
    })?;
    let model = bundle.model()?;
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let origin = Some(sample.origin);
    let doc = match args.method {
        MethodArg::Ig => {
            let a = integrated_gradients(&model, &sample.inputs, None, args.steps)?;
            Explanation::from_attribution(bundle.variant_id, origin, &a, args.top)
        }
        MethodArg::Attention => {
            let (_, map) = attention_map(&model, &sample.inputs)?;
            Explanation::from_attention(bundle.variant_id, origin, map)
        }
        MethodArg::Lime => {
            let config = LimeConfig {
                samples: args.samples,
                seed: derive_seed(seed, "lime"),
                ..LimeConfig::default()
            };
            let s = lime_local(&model, &sample.inputs, &config)?;
            Explanation::from_surrogate(bundle.variant_id, origin, &s, args.top)
        }
    };
    let mut run = RunDir::create(cli.out.as_deref(), "explain", seed)?;
    run.set_config(&json!({
        "bundle": args.bundle, "data": args.data, "index": args.index,
        "method": format!("{:?}", args.method).to_lowercase(), "steps": args.steps, "top": args.top, "samples": args.samples,
    }))?;
    let text = serde_json::to_string_pretty(&doc).map_err(CliError::internal)?;
    let path = run.file("explanation.json");
    fs::write(&path, format!("{text}\n"))?;
    run.record(&path);
    run.finish()?;
    say!("{text}");
    Ok(())
}

pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let config = ServeConfig {
        policy: FeedbackPolicy {
            reduce_bitrate_threshold: args.policy_bitrate,
            alert_threshold: args.policy_alert,
            hysteresis: args.hysteresis,
        },
        tick_ms: args.tick_ms,
        explain_on_alert: args.explain_on_alert,
        ..ServeConfig::default()
    };
    config.policy.validate()?;
    let bundle = load_bundle(&args.bundle)?;
    let forecaster = Arc::new(Forecaster::from_bundle(&bundle)?);
    if let Some(addr) = &args.listen {
        let listener =
            TcpListener::bind(addr).map_err(|e| CliError::Usage(format!("{addr}: {e}")))?;
        eprintln!("listening on {}", listener.local_addr()?);
        serve_tcp(listener, forecaster, config, args.max_connections)?;
        return Ok(());
    }
    let state = StreamState::new(forecaster, config)?;
    let stdout = io::stdout();
    let out = BufWriter::new(stdout.lock());
    let summary = match &args.input {
        Some(p) => {
            let f = File::open(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            run_stream(state, BufReader::new(f), out)?
        }
        None => run_stream(state, io::stdin().lock(), out)?,
    };
    io::stderr().flush()?;
    log::info!("{} forecasts, {} errors", summary.forecasts, summary.errors);
    Ok(())
}
