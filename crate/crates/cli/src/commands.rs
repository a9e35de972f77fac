use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dnas_core::data::{load_binary, synth_dataset, write_binary};
use dnas_core::error::Error;
use dnas_core::io::{write_atomic, write_json_atomic};
use dnas_core::latency::{build_lut, validate_additivity, BreakdownRow};
use dnas_core::network::materialize;
use dnas_core::space::build_space;
use dnas_core::supernet::{arch_log_prob, argmax_arch, sample_arch};
use dnas_core::trainer::{run_search, train_from_scratch, EpochMetrics};
use dnas_core::{
    ArchDescriptor, Dataset, LatencyModel, LatencyTable, LossMode, Normalization, Result, RetrainParams,
    SearchHyperParams, SearchSpace, SearchState32, SpaceConfig, SplitSpec, ThetaCheckpoint,
};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{
    AdditivityArgs, BenchLutArgs, DataArgs, LossModeArg, PredictArgs, ReportArgs, SampleArgs, SearchArgs,
    SynthDataArgs, TrainArgs,
};

pub const SPACE_FILE: &str = "space.json";
pub const THETA_FILE: &str = "theta.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const INDEX_FILE: &str = "index.json";
pub const METRICS_FILE: &str = "metrics.json";

/// A config path, or one of the bundled names.
pub fn load_space(spec: &str) -> Result<SearchSpace> {
    let cfg = match spec {
        "desk" => SpaceConfig::desk(),
        "imagenet" => SpaceConfig::imagenet(),
        path => SpaceConfig::load(path)?,
    };
    build_space(&cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(rand::random)
}

fn load_data(args: &DataArgs, space: &SearchSpace) -> Result<(Dataset, Normalization)> {
    let cfg = space.config();
    if args.data == "synth" {
        let ds = synth_dataset(cfg.num_classes, args.synth_per_class, cfg.input_resolution, args.synth_seed)?;
        let norm = Normalization::compute(&ds);
        return Ok((ds, norm));
    }
    let path = Path::new(&args.data);
    let ds = load_binary(path, cfg.num_classes, cfg.input_resolution)?;
    let norm = Normalization::load_or_compute(path, &ds)?;
    Ok((ds, norm))
}

fn load_table_for(space: &SearchSpace, path: &Path) -> Result<LatencyTable> {
    let table = LatencyTable::load(path)?;
    table.check_space(space)?;
    table.check_coverage(space)?;
    Ok(table)
}

pub fn bench_lut(args: BenchLutArgs) -> Result<()> {
    let space = load_space(&args.space)?;
    let table = build_lut(&space, args.repeats, args.warmup, &args.device_label)?;
    table.save(&args.out)?;
    if let Some(csv) = &args.csv {
        table.save_csv(csv)?;
    }
    let mut entries: Vec<_> = table.entries().filter(|(k, _)| !k.is_skip()).collect();
    entries.sort_by(|a, b| a.1.total_cmp(&b.1));
    println!(
        "{} entries covering {} searchable layers and {} fixed operators",
        table.len(),
        space.slots().len(),
        space.fixed_ops().count()
    );
    if let (Some(fast), Some(slow)) = (entries.first(), entries.last()) {
        println!("fastest: {} {:.3} us", fast.0, fast.1);
        println!("slowest: {} {:.3} us", slow.0, slow.1);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn search_hyper(args: &SearchArgs) -> Result<SearchHyperParams> {
    let mut h: SearchHyperParams = match &args.hyper {
        Some(p) => dnas_core::io::read_json(p)?,
        None => SearchHyperParams::default(),
    };
    if let Some(v) = args.epochs {
        h.epochs = v;
    }
    if let Some(v) = args.alpha {
        h.alpha = v;
    }
    if let Some(v) = args.beta {
        h.beta = v;
    }
    if let Some(v) = args.postpone {
        h.postpone = v;
    }
    if let Some(v) = args.theta_lr {
        h.theta_lr = v;
    }
    if let Some(v) = args.batch_size {
        h.batch_size = v;
    }
    if let Some(m) = args.loss_mode {
        h.loss_mode = match m {
            LossModeArg::Multiplicative => LossMode::Multiplicative,
            LossModeArg::Additive => LossMode::Additive,
            LossModeArg::LatencyOnly => LossMode::LatencyOnly,
        };
    }
    h.validate()?;
    Ok(h)
}

fn metrics_jsonl(rows: &[EpochMetrics]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("metrics serialize");
        out.push(b'\n');
    }
    out
}

pub fn search(args: SearchArgs) -> Result<()> {
    let space = load_space(&args.space)?;
    let table = load_table_for(&space, &args.lut)?;
    let hyper = search_hyper(&args)?;
    let (dataset, norm) = load_data(&args.data, &space)?;
    let seed = seed_or_random(args.seed);
    create_dir(&args.out)?;
    space.config().save(args.out.join(SPACE_FILE))?;
    write_json_atomic(args.out.join("hyper.json"), &hyper)?;

    let mut manifest = RunManifest::new("search", space.config_hash(), &args.out);
    manifest.seed = Some(seed);
    manifest.space_path = Some(PathBuf::from(SPACE_FILE));
    manifest.lut_path = Some(absolute(&args.lut));
    manifest.device_label = Some(table.device_label.clone());
    manifest.clone().finish()?;

    let out = args.out.clone();
    let mut on_epoch = |state: &SearchState32| -> Result<()> {
        state.checkpoint().save(out.join(THETA_FILE))?;
        write_atomic(out.join(METRICS_LOG), &metrics_jsonl(&state.history))?;
        if let Some(m) = state.history.last() {
            println!(
                "epoch {:>3} {:<7} tau {:.3} ce {:.4} E[lat] {:.1} us entropy {:.3}",
                m.epoch, m.phase, m.tau, m.ce, m.expected_lat_us, m.entropy_nats
            );
        }
        Ok(())
    };
    let state = run_search::<f32>(&space, &table, hyper, &dataset, &norm, seed, &mut on_epoch)?;
    let best = argmax_arch(&space, &state.supernet.theta())?;
    best.save(&space, args.out.join("most_likely_arch.json"))?;
    info!("search finished after {} epochs", state.epoch);
    manifest.finish()
}

/// Space and table paths recorded next to a checkpoint.
fn run_dir_defaults(theta: &Path) -> (Option<PathBuf>, Option<PathBuf>) {
    let dir = theta.parent().unwrap_or(Path::new("."));
    let manifest = RunManifest::load(dir).ok();
    let space = manifest
        .as_ref()
        .and_then(|m| m.space_path.clone())
        .map(|p| if p.is_relative() { dir.join(p) } else { p })
        .or_else(|| Some(dir.join(SPACE_FILE)).filter(|p| p.exists()));
    let lut = manifest.and_then(|m| m.lut_path);
    (space, lut)
}

#[derive(Serialize)]
struct SampleEntry {
    file: String,
    choices: Vec<String>,
    log_prob: f64,
    predicted_latency_us: Option<f64>,
    flops: usize,
    params: usize,
}

#[derive(Serialize)]
struct SampleIndex {
    theta: PathBuf,
    seed: u64,
    samples: Vec<SampleEntry>,
    most_likely: SampleEntry,
}

pub fn sample(args: SampleArgs) -> Result<()> {
    let (default_space, default_lut) = run_dir_defaults(&args.theta);
    let space_spec = match (&args.space, &default_space) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => p.display().to_string(),
        (None, None) => {
            return Err(Error::Config(format!(
                "no --space given and no {SPACE_FILE} next to {}",
                args.theta.display()
            )))
        }
    };
    let space = load_space(&space_spec)?;
    let ckpt = ThetaCheckpoint::load(&args.theta)?;
    let theta = ckpt.rows(&space)?;
    let model = match args.lut.clone().or(default_lut) {
        Some(p) => Some(LatencyModel::resolve(&load_table_for(&space, &p)?, &space)?),
        None => None,
    };
    let seed = seed_or_random(args.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    create_dir(&args.out)?;

    let describe = |arch: &ArchDescriptor, file: String, log_prob: f64| -> Result<SampleEntry> {
        let mut init = ChaCha8Rng::seed_from_u64(0);
        let net = materialize::<f32, _>(&space, arch, &mut init)?;
        Ok(SampleEntry {
            file,
            choices: arch.kinds(&space)?.iter().map(|k| k.to_string()).collect(),
            log_prob,
            predicted_latency_us: model.as_ref().map(|m| m.arch_latency(arch)).transpose()?,
            flops: net.flops(),
            params: net.param_count(),
        })
    };

    let mut samples = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let (arch, log_prob) = sample_arch(&space, &theta, &mut rng)?;
        let file = format!("arch_{i}.json");
        arch.save(&space, args.out.join(&file))?;
        samples.push(describe(&arch, file, log_prob)?);
    }
    samples.sort_by(|a, b| {
        let key = |e: &SampleEntry| e.predicted_latency_us.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b))
    });
    let best = argmax_arch(&space, &theta)?;
    let file = "most_likely_arch.json".to_string();
    best.save(&space, args.out.join(&file))?;
    let most_likely = describe(&best, file, arch_log_prob(&theta, &best)?)?;

    for s in &samples {
        match s.predicted_latency_us {
            Some(l) => println!("{}  log_prob {:.3}  {:.1} us  {}", s.file, s.log_prob, l, s.choices.join(",")),
            None => println!("{}  log_prob {:.3}  {}", s.file, s.log_prob, s.choices.join(",")),
        }
    }
    let index = SampleIndex {
        theta: absolute(&args.theta),
        seed,
        samples,
        most_likely,
    };
    write_json_atomic(args.out.join(INDEX_FILE), &index)?;

    let mut manifest = RunManifest::new("sample", space.config_hash(), &args.out);
    manifest.seed = Some(seed);
    manifest.lut_path = args.lut.as_deref().map(absolute);
    manifest.finish()
}

pub fn train(args: TrainArgs) -> Result<()> {
    let space = load_space(&args.space)?;
    let arch = ArchDescriptor::load(&space, &args.arch)?;
    let table = args.lut.as_deref().map(|p| load_table_for(&space, p)).transpose()?;
    let (dataset, norm) = load_data(&args.data, &space)?;
    let seed = seed_or_random(args.seed);
    let (train, test) = dnas_core::data::split(&dataset, SplitSpec { fraction: 0.8, seed })?;
    let params = RetrainParams {
        epochs: args.epochs,
        batch_size: args.batch_size,
        ..RetrainParams::default()
    };
    create_dir(&args.out)?;
    let (_, metrics) = train_from_scratch::<f32>(&space, &arch, &train, &test, &norm, &params, table.as_ref(), seed)?;
    write_json_atomic(args.out.join(METRICS_FILE), &metrics)?;
    println!("top1 {:.4}", metrics.top1);
    println!("params {}", metrics.param_count);
    println!("flops {}", metrics.flops);
    if let Some(p) = metrics.predicted_latency_us {
        println!("predicted latency {p:.1} us");
    }
    println!("measured latency {:.1} us", metrics.measured_latency_us);

    let mut manifest = RunManifest::new("train", space.config_hash(), &args.out);
    manifest.seed = Some(seed);
    manifest.lut_path = args.lut.as_deref().map(absolute);
    manifest.device_label = table.map(|t| t.device_label);
    manifest.finish()
}

fn breakdown_csv(rows: &[BreakdownRow]) -> String {
    let mut s = String::from("layer,kind,latency_us\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.layer, r.kind, r.latency_us));
    }
    s
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let space = load_space(&args.space)?;
    let table = load_table_for(&space, &args.lut)?;
    let arch = ArchDescriptor::load(&space, &args.arch)?;
    let model = LatencyModel::resolve(&table, &space)?;
    let rows = model.breakdown(&arch)?;
    for r in &rows {
        println!("{:<12} {:<14} {:>10.3}", r.layer, r.kind, r.latency_us);
    }
    println!("total {:.3} us", model.arch_latency(&arch)?);
    if let Some(csv) = &args.csv {
        write_atomic(csv, breakdown_csv(&rows).as_bytes())?;
    }
    Ok(())
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let row = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset,
                reason: e.to_string(),
            })?;
            rows.push(row);
        }
        offset += line.len() as u64;
    }
    Ok(rows)
}

pub fn report(args: ReportArgs) -> Result<()> {
    let rows = read_metrics_log(&args.run.join(METRICS_LOG))?;
    let mut csv = String::from("epoch,phase,tau,ce,expected_lat_us,entropy_nats\n");
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(out, "{:>5} {:<7} {:>8} {:>8} {:>12} {:>9}", "epoch", "phase", "tau", "ce", "E[lat] us", "entropy");
    for r in &rows {
        let _ = writeln!(
            out,
            "{:>5} {:<7} {:>8.4} {:>8.4} {:>12.2} {:>9.4}",
            r.epoch, r.phase, r.tau, r.ce, r.expected_lat_us, r.entropy_nats
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.phase, r.tau, r.ce, r.expected_lat_us, r.entropy_nats
        ));
    }
    if let Some(p) = &args.csv {
        write_atomic(p, csv.as_bytes())?;
    }
    Ok(())
}

pub fn additivity(args: AdditivityArgs) -> Result<()> {
    let space = load_space(&args.space)?;
    let table = load_table_for(&space, &args.lut)?;
    let seed = seed_or_random(args.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = validate_additivity(&table, &space, args.samples, args.tolerance, args.repeats, 2, &mut rng)?;
    for s in &report.samples {
        println!(
            "arch {:>2}  predicted {:>9.1} us  measured {:>9.1} us  rel err {:.3}",
            s.arch_id, s.predicted_us, s.measured_us, s.rel_err
        );
    }
    println!(
        "mean rel err {:.3}, max {:.3}, tolerance {} -> {}",
        report.mean_rel_err,
        report.max_rel_err,
        report.tolerance,
        if report.within_tolerance { "ok" } else { "exceeded" }
    );
    if let Some(p) = &args.out {
        write_json_atomic(p, &report)?;
    }
    Ok(())
}

pub fn synth_data(args: SynthDataArgs) -> Result<()> {
    let ds = synth_dataset(args.classes, args.per_class, args.resolution, args.seed)?;
    write_binary(&ds, &args.out)?;
    println!("wrote {} records to {}", ds.len(), args.out.display());
    Ok(())
}
