//! One function per subcommand. Each returns the JSON summary it prints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fasq_core::checkpoint::{load_checkpoint, load_lm, read_manifest, save_checkpoint, save_lm};
use fasq_core::config::RunConfig;
use fasq_core::evalkit::{roc_points, run_protocol, score_domain, ProtocolReport};
use fasq_core::experiment::{fresh_model, pretrain_lm, run_ablation, train_replicate, Benchmark, Lm, Suite};
use fasq_core::gradcheck::run_suite;
use fasq_core::synthdata::{load_split, save_split, Sample};
use fasq_core::textproto::Vocabulary;
use fasq_core::train::{data_hash, sha256_hex, LossReport, RunManifest};
use fasq_core::Model32;
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::plot;

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

/// Hash of the configuration with the output directory blanked.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    Ok(sha256_hex(serde_json::to_string(&c)?.as_bytes()))
}

fn load_benchmark(cfg: &RunConfig, dir: &Path) -> Result<Benchmark> {
    let (spec, meta) = load_split(&dir.join("meta"))?;
    if spec != cfg.data.meta {
        return Err(CliError::Runtime(format!("data at {} was generated with a different data.meta section", dir.display())));
    }
    let (heldout_spec, heldout) = load_split(&dir.join("heldout"))?;
    let mut names: Vec<PathBuf> = fs::read_dir(dir.join("targets"))?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    names.sort();
    let targets = names.iter().map(|p| load_split(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(Benchmark { meta, heldout_spec, heldout, targets })
}

/// Loads `--data` when given, else regenerates the benchmark from the config.
pub fn benchmark(cfg: &RunConfig, data: Option<&Path>) -> Result<Benchmark> {
    match data {
        Some(d) => load_benchmark(cfg, d),
        None => Ok(Benchmark::build(cfg)?),
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<Value> {
    let bench = Benchmark::build(cfg)?;
    let root = cfg.out_dir.join("data");
    save_split(&root.join("meta"), &cfg.data.meta, cfg.data.balanced, &bench.meta)?;
    save_split(&root.join("heldout"), &bench.heldout_spec, cfg.data.balanced, &bench.heldout)?;
    let mut targets = Vec::new();
    for (spec, samples) in &bench.targets {
        save_split(&root.join("targets").join(&spec.name), spec, cfg.data.balanced, samples)?;
        targets.push(json!({ "name": spec.name, "samples": samples.len(), "data_hash": data_hash(samples) }));
    }
    Ok(json!({
        "dir": root,
        "seed": cfg.seed,
        "meta": { "samples": bench.meta.len(), "data_hash": data_hash(&bench.meta) },
        "heldout": { "samples": bench.heldout.len(), "data_hash": data_hash(&bench.heldout) },
        "targets": targets,
    }))
}

pub fn pretrain(cfg: &RunConfig) -> Result<Value> {
    let vocab = Vocabulary::build();
    let ((lm, store), report) = pretrain_lm(cfg, &vocab)?;
    let dir = cfg.out_dir.join("lm");
    save_lm(&lm, &store, &vocab, &dir, serde_json::to_value(&report)?)?;
    if report.heldout_token_accuracy < cfg.lm_pretrain.target_accuracy {
        log::warn!(
            "language model reached {:.2}% held-out token accuracy, below the {:.2}% target",
            100.0 * report.heldout_token_accuracy,
            100.0 * cfg.lm_pretrain.target_accuracy
        );
    }
    Ok(json!({ "dir": dir, "report": report }))
}

/// Pretrained language model from `dir`, or a fresh pretraining run.
fn language_model(cfg: &RunConfig, vocab: &Vocabulary, dir: Option<&Path>) -> Result<Option<Lm>> {
    if !cfg.model_config().uses_lm() {
        return Ok(None);
    }
    match dir {
        Some(d) => {
            let (lm, store, lm_vocab, _) = load_lm::<f32>(d)?;
            if lm_vocab.tokens() != vocab.tokens() {
                return Err(CliError::Runtime(format!("language model at {} uses a different vocabulary", d.display())));
            }
            if lm.cfg != cfg.lm {
                return Err(CliError::Runtime(format!("language model at {} does not match the `lm` config section", d.display())));
            }
            Ok(Some((lm, store)))
        }
        None => {
            let (lm, report) = pretrain_lm(cfg, vocab)?;
            log::info!("pretrained language model: {:.2}% held-out token accuracy", 100.0 * report.heldout_token_accuracy);
            Ok(Some(lm))
        }
    }
}

/// Target-domain protocol plus the in-domain held-out split.
fn full_report(cfg: &RunConfig, models: &[(u64, &Model32)], bench: &Benchmark) -> Result<Value> {
    let targets = run_protocol(models, &bench.target_domains(), &cfg.eval)?;
    let in_domain = run_protocol(models, &[(bench.heldout_spec.name.clone(), bench.heldout.as_slice())], &cfg.eval)?;
    Ok(json!({ "targets": targets, "in_domain": in_domain }))
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, lm_dir: Option<&Path>) -> Result<Value> {
    let bench = benchmark(cfg, data)?;
    let vocab = Vocabulary::build();
    let lm = language_model(cfg, &vocab, lm_dir)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut log_file = BufWriter::new(File::create(cfg.out_dir.join("metrics.jsonl"))?);
    let mut io_err = None;
    let run = train_replicate(cfg, &bench, &vocab, lm.as_ref(), cfg.seed, |r| {
        if io_err.is_none() {
            let line = serde_json::to_string(r).map_err(CliError::from).and_then(|s| Ok(writeln!(log_file, "{s}")?));
            io_err = line.err();
        }
        if r.step % 50 == 0 {
            log::info!("step {} lr {:.2e} loss {:.4}", r.step, r.lr, r.total);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    log_file.flush()?;
    let ckpt = cfg.out_dir.join("checkpoint");
    save_checkpoint(&run.model, &ckpt, false, json!({ "seed": run.seed }))?;
    let metrics = full_report(cfg, &[(run.seed, &run.model)], &bench)?;
    let manifest = RunManifest {
        seed: run.seed,
        config_hash: config_hash(cfg)?,
        data_hash: data_hash(&bench.meta),
        lm_hash: run.model.lm_store().map(|s| s.content_hash()),
        model_hash: run.model.store.content_hash(),
        steps: run.summary.steps,
        final_loss: run.summary.trace.last().copied().unwrap_or_default(),
        metrics,
    };
    write_json(&cfg.out_dir.join("manifest.json"), &manifest)?;
    Ok(serde_json::to_value(&manifest)?)
}

fn checkpoint_seed(dir: &Path, fallback: u64) -> Result<u64> {
    let m = read_manifest(dir)?;
    Ok(m.extra.get("seed").and_then(Value::as_u64).unwrap_or(fallback))
}

pub fn eval(cfg: &RunConfig, data: Option<&Path>, checkpoints: &[PathBuf], untrained: bool) -> Result<Value> {
    let bench = benchmark(cfg, data)?;
    let vocab = Vocabulary::build();
    let mut models = Vec::new();
    if untrained {
        for seed in cfg.replicate_seeds() {
            models.push((seed, fresh_model(cfg, &vocab, None, seed)?));
        }
    } else {
        if checkpoints.is_empty() {
            return Err(CliError::Runtime("eval needs --checkpoint or --untrained".into()));
        }
        for (i, c) in checkpoints.iter().enumerate() {
            models.push((checkpoint_seed(c, i as u64)?, load_checkpoint::<f32>(c)?));
        }
    }
    let refs: Vec<(u64, &Model32)> = models.iter().map(|(s, m)| (*s, m)).collect();
    let report = full_report(cfg, &refs, &bench)?;
    write_json(&cfg.out_dir.join("eval.json"), &report)?;
    for key in ["in_domain", "targets"] {
        let p: ProtocolReport = serde_json::from_value(report[key].clone())?;
        eprintln!("{key}\n{}", p.seed_mean.to_table());
    }
    Ok(report)
}

pub fn ablate(cfg: &RunConfig, data: Option<&Path>, suite: &str) -> Result<Value> {
    let suite = Suite::parse(suite).map_err(|e| CliError::Config { path: "--suite".into(), message: e.to_string() })?;
    let bench = benchmark(cfg, data)?;
    let table = run_ablation(cfg, suite, &bench)?;
    let text = table.to_table();
    eprintln!("{text}");
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(format!("ablation-{}.txt", suite.name())), &text)?;
    write_json(&cfg.out_dir.join(format!("ablation-{}.json", suite.name())), &table)?;
    Ok(serde_json::to_value(&table)?)
}

/// Reads a PNG as an `H×W×3` buffer in `[0, 1]`, resized to `side`.
pub fn read_image(path: &Path, side: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.dimensions() == (side as u32, side as u32) {
        img
    } else {
        image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Triangle)
    };
    Ok(img.pixels().flat_map(|p| p.0).map(|v| v as f32 / 255.0).collect())
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, image_path: &Path, llm_free: bool) -> Result<Value> {
    let mut model = load_checkpoint::<f32>(checkpoint)?;
    let pixels = read_image(image_path, model.cfg.encoder.image_size)?;
    if llm_free {
        model.strip_lm();
    }
    let pred = model.predict(&pixels, !llm_free)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let cue_png = match &pred.cue_map {
        Some(map) => {
            let side = model.cfg.fusion.cue_grid;
            let p = cfg.out_dir.join("cue.png");
            plot::gray_map(map, side, (256 / side.max(1)).max(1) as u32).save(&p)?;
            Some(p)
        }
        None => None,
    };
    let answers: Vec<Value> = pred
        .answers
        .iter()
        .map(|(q, a)| json!({ "question_type": q, "question": q.question(), "answer": a.text, "option": a.option }))
        .collect();
    let out = json!({
        "image": image_path,
        "llm_free": llm_free,
        "fake_score": pred.fake_score,
        "answers": answers,
        "cue_map_png": cue_png,
    });
    write_json(&cfg.out_dir.join("infer.json"), &out)?;
    Ok(out)
}

fn read_losses(path: &Path) -> Result<Vec<LossReport>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Even split of live and spoof samples, `n` in total.
fn mixed_samples(samples: &[Sample], n: usize) -> Vec<&Sample> {
    let live = samples.iter().filter(|s| !s.is_spoof());
    let spoof = samples.iter().filter(|s| s.is_spoof());
    live.take(n / 2).chain(spoof.take(n - n / 2)).collect()
}

pub fn plot(cfg: &RunConfig, data: Option<&Path>, checkpoint: &Path, metrics: Option<&Path>, samples: usize) -> Result<Value> {
    let bench = benchmark(cfg, data)?;
    let model = load_checkpoint::<f32>(checkpoint)?;
    let dir = cfg.out_dir.join("plots");
    fs::create_dir_all(&dir)?;
    let mut curves = Vec::new();
    let mut domains = Vec::new();
    for (name, s) in bench.target_domains() {
        let set = score_domain(&model, s, &name)?;
        curves.push(roc_points(&set)?);
        domains.push(name);
    }
    let roc = dir.join("roc.png");
    plot::roc_chart(&curves).save(&roc)?;

    let side = model.cfg.encoder.image_size;
    let mut cells = Vec::new();
    for s in mixed_samples(&bench.heldout, samples) {
        let p = model.predict(&s.image, false)?;
        if let Some(map) = p.cue_map {
            cells.push((plot::rgb_image(&s.image, side), plot::gray_map(&map, model.cfg.fusion.cue_grid, 1)));
        }
    }
    let cue = if cells.is_empty() {
        None
    } else {
        let p = dir.join("cue_grid.png");
        plot::cue_grid(&cells, (side as u32).max(64)).save(&p)?;
        Some(p)
    };

    let metrics = metrics.map(Path::to_path_buf).or_else(|| {
        let p = checkpoint.parent()?.join("metrics.jsonl");
        p.exists().then_some(p)
    });
    let loss = match metrics {
        Some(m) => {
            let trace = read_losses(&m)?;
            let series = vec![
                trace.iter().map(|r| r.total).collect(),
                trace.iter().map(|r| r.terms.cls).collect(),
                trace.iter().map(|r| r.terms.content).collect(),
                trace.iter().map(|r| r.terms.style).collect(),
                trace.iter().map(|r| r.terms.cue).collect(),
            ];
            let p = dir.join("loss.png");
            plot::loss_chart(&series).save(&p)?;
            Some(p)
        }
        None => {
            log::warn!("no metrics.jsonl found; skipping the loss curve");
            None
        }
    };
    Ok(json!({
        "roc_png": roc,
        "roc_domains": domains,
        "roc_colors": plot::PALETTE.iter().take(curves.len()).collect::<Vec<_>>(),
        "cue_grid_png": cue,
        "loss_png": loss,
        "loss_series": ["total", "L_cls", "L_c", "L_s", "L_cue"],
    }))
}

pub fn gradcheck(cfg: &RunConfig, trials: usize) -> Result<Value> {
    let reports = run_suite(trials, cfg.seed)?;
    for r in &reports {
        eprintln!(
            "{:<14} {:>4} coords  max rel err {:.3e}  {}",
            r.component,
            r.checks.len(),
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    write_json(&cfg.out_dir.join("gradcheck.json"), &reports)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(json!({ "components": reports.len(), "passed": true, "report": cfg.out_dir.join("gradcheck.json") }))
}
