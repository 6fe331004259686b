use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use maskopt::classifier::{accuracy, load_weights, save_weights, train_with_log};
use maskopt::detector::{read_detections, write_detections};
use maskopt::evalkit::{evaluate, pr_csv, ScoredBox};
use maskopt::io::{encode_pgm_scaled, write_atomic};
use maskopt::synthdata::{generate_dataset, image_file_name, load_dataset, save_dataset, write_json, Dataset, Split};

use crate::config::{detect_settings, synth_settings, train_settings, ConfigFile};
use crate::experiment::{ablation_csv, forward_counts, run_ablation, run_split, AblationRun, Method, RunSpec};
use crate::{AblateArgs, DetectArgs, EvalArgs, Failure, SynthArgs, TrainArgs};

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = ConfigFile::load_opt(a.config.as_deref())?;
    let (mut spec, n) = synth_settings(&cfg)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if n < 10 {
        return Err(Failure::Config(format!("patches must be at least 10, got {n}")).into());
    }
    let ds = generate_dataset(&spec, n)?;
    save_dataset(&ds, &a.out)?;
    for (split, (pos, neg)) in Split::ALL.iter().zip(ds.class_balance()) {
        println!("{:<5} {:>4} patches ({pos} with particles, {neg} empty)", split.name(), pos + neg);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load(data: &Path) -> anyhow::Result<Dataset> {
    load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))
}

pub fn report_path(weights: &Path) -> PathBuf {
    let mut name = weights.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    weights.with_file_name(name)
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = ConfigFile::load_opt(a.config.as_deref())?;
    let mut tc = train_settings(&cfg)?;
    if let Some(seed) = a.seed {
        tc.seed = seed;
    }
    let ds = load(&a.data)?;
    if ds.train.is_empty() {
        return Err(Failure::Data(format!("{} has an empty train split", a.data.display())).into());
    }
    let (model, log) = train_with_log(ds.train.iter().map(|s| (&s.image, s.label())), &tc)?;
    let val = if ds.val.is_empty() {
        None
    } else {
        Some(accuracy(&model, ds.val.iter().map(|s| (&s.image, s.label())))?)
    };
    save_weights(&model, &a.out)?;
    let report = json!({
        "epochs": log.iter().map(|e| json!({"mean_loss": e.mean_loss, "train_accuracy": e.accuracy})).collect::<Vec<_>>(),
        "val_accuracy": val,
        "seed": tc.seed,
        "learning_rate": tc.learning_rate,
        "momentum": tc.momentum,
        "batch_size": tc.batch_size,
    });
    write_json(&report_path(&a.out), &report)?;
    for (k, e) in log.iter().enumerate() {
        println!("epoch {:>3}  loss {:.4}  train accuracy {:.4}", k + 1, e.mean_loss, e.accuracy);
    }
    match val {
        Some(v) => println!("validation accuracy: {v:.4}"),
        None => println!("validation accuracy: n/a (empty val split)"),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn detection_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(image_file_name(id).replace(".pgm", ".json"))
}

pub fn detect(a: &DetectArgs) -> anyhow::Result<()> {
    let cfg = ConfigFile::load_opt(a.config.as_deref())?;
    let mut settings = detect_settings(&cfg)?;
    if let Some(seed) = a.seed {
        settings.det.seed = seed;
    }
    if !(a.size_error > -1.0) {
        return Err(Failure::Config(format!("--size-error must exceed -1, got {}", a.size_error)).into());
    }
    let ds = load(&a.data)?;
    let model = load_weights(&a.weights)?;
    let samples = ds.split(a.split.into());
    let spec = RunSpec {
        method: a.method,
        settings,
        size_error: a.size_error,
    };
    let record = a.method == Method::Opt && (a.dump_heatmaps || a.dump_trajectories);
    let runs = run_split(&model, samples, &spec, ds.radius_nm as f64, record)?;

    for r in &runs {
        write_detections(&detection_file(&a.out, r.id), &r.detections)?;
        if a.dump_heatmaps {
            for (k, h) in r.heatmaps.iter().enumerate() {
                let path = a.out.join("heatmaps").join(format!("{:05}_{k:02}.pgm", r.id));
                write_atomic(&path, &encode_pgm_scaled(h.dims.0, h.dims.1, &h.values))?;
            }
        }
        if a.dump_trajectories {
            for (k, t) in r.trajectories.iter().enumerate() {
                t.write_csv(&a.out.join("trajectories").join(format!("{:05}_{k:02}.csv", r.id)))?;
            }
        }
    }
    let resolved = spec.resolved(ds.radius_nm as f64);
    let counts = forward_counts(&runs);
    let manifest = json!({
        "method": a.method.name(),
        "split": Split::from(a.split).name(),
        "seed": resolved.det.seed,
        "radius_nm": resolved.det.radius_nm,
        "size_error": a.size_error,
        "images": runs.iter().map(|r| r.id).collect::<Vec<_>>(),
        "forward_calls": counts.values().collect::<Vec<_>>(),
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    let total: u64 = counts.values().sum();
    let found: usize = runs.iter().map(|r| r.detections.len()).sum();
    println!(
        "{} images, {found} detections, {total} classifier forward passes ({:.1} per image)",
        runs.len(),
        total as f64 / runs.len().max(1) as f64
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ds = load(&a.data)?;
    let samples = ds.split(a.split.into());
    let mut dets = maskopt::evalkit::PerImage::new();
    let mut found = 0;
    for s in samples {
        let path = detection_file(&a.detections, s.id);
        let boxes = if path.exists() {
            found += 1;
            read_detections(&path)?
                .iter()
                .map(|d| ScoredBox { bbox: d.bbox(), score: d.score })
                .collect()
        } else {
            Vec::new()
        };
        dets.insert(s.id, boxes);
    }
    if found == 0 {
        eprintln!(
            "warning: no detection files for the {} split in {}; scoring as empty",
            Split::from(a.split).name(),
            a.detections.display()
        );
    }
    let gts = samples.iter().map(|s| (s.id, s.boxes())).collect();
    let (metrics, pr) = evaluate(&dets, &gts)?;
    write_json(&a.out, &metrics)?;
    write_atomic(&a.out.with_file_name("pr.csv"), pr_csv(&pr).as_bytes())?;
    println!(
        "mAP50 {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}  ({} images, {} detections, {} particles)",
        metrics.map50,
        metrics.precision,
        metrics.recall,
        metrics.f1,
        metrics.counts.images,
        metrics.counts.detections,
        metrics.counts.ground_truth
    );
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> anyhow::Result<()> {
    // validate the suite before any expensive loading
    crate::experiment::suite(&a.suite)?;
    if a.runs == 0 {
        return Err(Failure::Config("--runs must be at least 1".into()).into());
    }
    let cfg = ConfigFile::load_opt(a.config.as_deref())?;
    let settings = detect_settings(&cfg)?;
    let ds = load(&a.data)?;
    let mut samples = ds.split(a.split.into());
    if let Some(n) = a.limit {
        samples = &samples[..n.min(samples.len())];
    }
    let models = a
        .weights
        .iter()
        .map(|w| load_weights(w))
        .collect::<Result<Vec<_>, _>>()?;
    let runs: Vec<AblationRun> = (0..a.runs)
        .map(|k| AblationRun {
            model: &models[k % models.len()],
            samples,
            radius_nm: ds.radius_nm as f64,
            seed: a.seed + k as u64,
        })
        .collect();
    let base = RunSpec {
        settings,
        ..RunSpec::default()
    };
    let rows = run_ablation(&a.suite, &base, &runs)?;
    let table = ablation_csv(&a.suite, &rows);
    print!("{table}");
    if let Some(out) = &a.out {
        write_atomic(out, table.as_bytes())?;
    }
    Ok(())
}
