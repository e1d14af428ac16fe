use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crowdslam::dataset::{
    extract_samples, generate_dataset, read_episode, DatasetManifest, EpisodeRecord, ManifestEntry, Split,
    MANIFEST_FILE,
};
use crowdslam::metrics::{aggregate, evaluate_episode, EpisodeMetrics, EPISODE_HEADER, TABLE_HEADER};
use crowdslam::neuralnet::{load_weights, save_weights, train_predictor, PredictorKind, PredictorWeights};
use crowdslam::priors::PriorKind;
use crowdslam::slam::{run_sequence, Prediction, SlamResult};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{PriorChoice, RunConfig};
use crate::{plot as svg, CliError};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_manifest(data: &Path) -> Result<DatasetManifest, CliError> {
    DatasetManifest::load(&data.join(MANIFEST_FILE)).map_err(|e| CliError::Runtime(format!("{}: {e}", data.display())))
}

fn load_episode(data: &Path, entry: &ManifestEntry) -> Result<EpisodeRecord, CliError> {
    read_episode(&data.join(&entry.path)).map_err(|e| CliError::Runtime(format!("{}: {e}", entry.path)))
}

pub fn result_file(index: usize) -> String {
    format!("episode_{index:05}.json")
}

fn stream_file(index: usize) -> String {
    format!("episode_{index:05}.stream.jsonl")
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let m = generate_dataset(&config.sim, config.data.n_train, config.data.n_test, config.seeds.master, out)
        .map_err(CliError::runtime)?;
    println!(
        "wrote {} episodes ({} train, {} test, master seed {}) to {}",
        m.episodes.len(),
        m.n_train,
        m.n_test,
        m.master_seed,
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn predictor_kind(prior: PriorChoice) -> Result<PredictorKind, CliError> {
    match prior {
        PriorChoice::Mlp => Ok(PredictorKind::Mlp),
        PriorChoice::GatDet | PriorChoice::GatStoch => Ok(PredictorKind::Gat),
        other => Err(CliError::Validation(format!(
            "--prior: {other} has no network to train; use mlp, gat-det or gat-stoch"
        ))),
    }
}

pub fn train(config: &RunConfig, prior: PriorChoice, data: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let kind = predictor_kind(prior)?;
    let manifest = load_manifest(data)?;
    let entries: Vec<&ManifestEntry> = manifest.entries(Split::Train).collect();
    let mut samples = Vec::new();
    for e in entries {
        samples.extend(extract_samples(&load_episode(data, e)?, config.train.history_len));
    }
    let weights_path = out.unwrap_or_else(|| config.paths.weights_dir.join(format!("{kind}.json")));
    let loss_path = weights_path.with_extension("loss.csv");
    eprintln!("training {kind} on {} samples", samples.len());
    let outcome = train_predictor(kind, &samples, &config.train, config.seeds.train).map_err(CliError::runtime)?;
    if let Some(parent) = weights_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let written = save_weights(&outcome.weights, &weights_path)
        .map_err(CliError::runtime)
        .and_then(|()| write_loss_curve(&outcome.loss_curve, &loss_path));
    if let Err(e) = written {
        let _ = fs::remove_file(&weights_path);
        let _ = fs::remove_file(&loss_path);
        return Err(e);
    }
    println!(
        "final loss {:.6e}; weights {} ; loss curve {}",
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
        weights_path.display(),
        loss_path.display()
    );
    Ok(())
}

fn write_loss_curve(curve: &[f64], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(CliError::runtime)?;
    w.write_record(["epoch", "loss"]).map_err(CliError::runtime)?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)
}

/// Loads the network a prior needs and checks it against the config.
pub fn build_prior(config: &RunConfig, weights: Option<PathBuf>) -> Result<PriorKind, CliError> {
    let choice = config.prior.kind;
    let Some(stem) = choice.network() else {
        return Ok(match choice {
            PriorChoice::None => PriorKind::NoPrior,
            _ => PriorKind::Cvm,
        });
    };
    let path = weights.unwrap_or_else(|| config.paths.weights_dir.join(format!("{stem}.json")));
    let expected = if stem == "mlp" { PredictorKind::Mlp } else { PredictorKind::Gat };
    let w = load_weights(&path, Some(expected)).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if w.history_len() != config.train.history_len {
        return Err(CliError::Validation(format!(
            "{}: weights use history length {}, train.history_len is {}",
            path.display(),
            w.history_len(),
            config.train.history_len
        )));
    }
    let kind = match w {
        PredictorWeights::Mlp(m) => PriorKind::SingleAgentMlp(Arc::new(m)),
        PredictorWeights::Gat(g) if choice == PriorChoice::GatDet => PriorKind::DeterministicGat(Arc::new(g)),
        PredictorWeights::Gat(g) => PriorKind::StochasticGat(Arc::new(g), config.prior.stochastic(config.seeds.rollout)),
    };
    kind.validate().map_err(|e| CliError::Validation(format!("prior: {e}")))?;
    Ok(kind)
}

#[derive(Serialize)]
struct StreamRecord<'a> {
    step: usize,
    ped_id: u32,
    mu: &'a [nalgebra::Vector2<f64>],
    sigma: &'a [crowdslam::Cov2],
}

fn write_stream(predictions: &[Prediction], path: &Path) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(CliError::runtime)?;
    let mut w = BufWriter::new(file);
    for p in predictions {
        let (Some(mu), Some(sigma)) = (&p.velocity_mean, &p.velocity_cov) else {
            continue;
        };
        let rec = StreamRecord {
            step: p.step,
            ped_id: p.ped_id,
            mu,
            sigma,
        };
        serde_json::to_writer(&mut w, &rec).map_err(CliError::runtime)?;
        w.write_all(b"\n").map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)
}

fn run_one(
    config: &RunConfig,
    kind: &PriorKind,
    data: &Path,
    entry: &ManifestEntry,
    dir: &Path,
) -> Result<(), CliError> {
    let episode = load_episode(data, entry)?;
    let result = run_sequence(&episode, kind, &config.slam).map_err(CliError::runtime)?;
    result.save(&dir.join(result_file(entry.index))).map_err(CliError::runtime)?;
    if matches!(kind, PriorKind::StochasticGat(..)) {
        write_stream(&result.predictions, &dir.join(stream_file(entry.index)))?;
    }
    Ok(())
}

pub fn run(config: &RunConfig, data: &Path, weights: Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    let kind = build_prior(config, weights)?;
    let manifest = load_manifest(data)?;
    let dir = out.join(config.prior.kind.label());
    create_dir(&dir)?;
    let entries: Vec<&ManifestEntry> = manifest.entries(Split::Test).collect();
    let outcomes: Vec<(usize, Result<(), CliError>)> = entries
        .par_iter()
        .map(|e| {
            let r = run_one(config, &kind, data, e, &dir);
            if r.is_err() {
                let _ = fs::remove_file(dir.join(result_file(e.index)));
                let _ = fs::remove_file(dir.join(stream_file(e.index)));
            }
            (e.index, r)
        })
        .collect();
    let mut failed = 0;
    for (index, r) in &outcomes {
        if let Err(e) = r {
            failed += 1;
            eprintln!("episode {index}: {e}");
        }
    }
    println!(
        "{}: {} of {} episodes written to {}",
        config.prior.kind,
        outcomes.len() - failed,
        outcomes.len(),
        dir.display()
    );
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} episode(s) failed")));
    }
    Ok(())
}

/// Method directories under `results`, known priors first in table order.
fn method_dirs(results: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let rd = fs::read_dir(results).map_err(|e| CliError::Runtime(format!("{}: {e}", results.display())))?;
    let mut dirs: Vec<(String, PathBuf)> = rd
        .filter_map(Result::ok)
        .filter(|d| d.path().is_dir())
        .map(|d| (d.file_name().to_string_lossy().into_owned(), d.path()))
        .collect();
    let rank = |name: &str| PriorChoice::from_label(name).map_or(usize::MAX, |c| c as usize);
    dirs.sort_by(|a, b| rank(&a.0).cmp(&rank(&b.0)).then_with(|| a.0.cmp(&b.0)));
    Ok(dirs)
}

pub fn eval(config: &RunConfig, data: &Path, results: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(data)?;
    let entries: Vec<&ManifestEntry> = manifest.entries(Split::Test).collect();
    let episodes: Vec<EpisodeRecord> = entries
        .par_iter()
        .map(|e| load_episode(data, e))
        .collect::<Result<_, _>>()?;
    let horizon = config.metrics.horizon.unwrap_or(config.slam.horizon);
    let mut reports = Vec::new();
    let mut missing: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (method, dir) in method_dirs(results)? {
        let scored: Vec<Result<Option<EpisodeMetrics>, CliError>> = entries
            .par_iter()
            .zip(&episodes)
            .map(|(e, ep)| {
                let path = dir.join(result_file(e.index));
                if !path.exists() {
                    return Ok(None);
                }
                let r = SlamResult::load(&path).map_err(|err| CliError::Runtime(format!("{}: {err}", path.display())))?;
                evaluate_episode(&r, ep, &config.metrics)
                    .map(Some)
                    .map_err(|err| CliError::Runtime(format!("{}: {err}", path.display())))
            })
            .collect();
        let mut metrics = Vec::new();
        for (e, s) in entries.iter().zip(scored) {
            match s? {
                Some(m) => metrics.push(m),
                None => missing.entry(method.clone()).or_default().push(e.index),
            }
        }
        if !metrics.is_empty() {
            reports.push(aggregate(&method, horizon, &metrics));
        }
    }
    for (method, idx) in &missing {
        eprintln!("warning: {method} is missing {} episode(s): {idx:?}", idx.len());
    }
    if reports.is_empty() {
        return Err(CliError::Runtime(format!("no results under {}", results.display())));
    }
    create_dir(out)?;
    let table = out.join("table.csv");
    let mut w = csv::Writer::from_path(&table).map_err(CliError::runtime)?;
    w.write_record(TABLE_HEADER).map_err(CliError::runtime)?;
    for r in &reports {
        w.write_record(r.table_row()).map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)?;
    let per = out.join("episodes.csv");
    let mut w = csv::Writer::from_path(&per).map_err(CliError::runtime)?;
    w.write_record(EPISODE_HEADER).map_err(CliError::runtime)?;
    for r in &reports {
        for row in r.episode_rows() {
            w.write_record(row).map_err(CliError::runtime)?;
        }
    }
    w.flush().map_err(CliError::runtime)?;
    println!("{}", TABLE_HEADER.join(" | "));
    for r in &reports {
        println!("{}", r.table_row().join(" | "));
    }
    println!("wrote {} and {}", table.display(), per.display());
    Ok(())
}

pub fn plot(
    result_path: &Path,
    data: &Path,
    episode: Option<usize>,
    step: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let result = SlamResult::load(result_path).map_err(|e| CliError::Runtime(format!("{}: {e}", result_path.display())))?;
    let manifest = load_manifest(data)?;
    let entry = match episode {
        Some(i) => manifest
            .episodes
            .iter()
            .find(|e| e.index == i)
            .ok_or_else(|| CliError::Validation(format!("--episode: no episode {i} in the manifest")))?,
        None => manifest
            .episodes
            .iter()
            .find(|e| e.seed == result.seed)
            .ok_or_else(|| CliError::Validation(format!("no episode with seed {} in the manifest", result.seed)))?,
    };
    let ep = load_episode(data, entry)?;
    if ep.seed != result.seed {
        return Err(CliError::Validation(format!(
            "--episode: episode {} has seed {}, result has seed {}",
            entry.index, ep.seed, result.seed
        )));
    }
    let doc = svg::render(&result, &ep, step).map_err(CliError::Validation)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, doc).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}
