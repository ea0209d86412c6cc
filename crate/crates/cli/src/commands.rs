use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fewshot_ssl::data::{
    load_dataset, load_image, split_classes, split_images, synthetic, ClassSplit, Dataset, LabeledImage, SplitFile,
};
use fewshot_ssl::evaluator::{meta_test, saliency as saliency_map, standard_report};
use fewshot_ssl::experiment::{bytes_hash, collect_report, render_table, ExperimentManifest};
use fewshot_ssl::permset::{generate_permutation_set, generate_permutation_set_with, GenerateOptions};
use fewshot_ssl::{Checkpoint32, Error, PermutationSet, Result, SslTask, TrainConfig, TrainData, TrainMode};

use crate::{EvalArgs, PermsetArgs, ProtocolArg, ReportArgs, SaliencyArgs, SplitArgs, SynthArgs, TrainArgs};

pub const DATA_ENV: &str = "FEWSHOT_SSL_DATA";

fn dataset_root(explicit: Option<&Path>, configured: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit.or(configured) {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("no dataset root: pass --root, set `dataset` or export {DATA_ENV}")))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Records `files` in the manifest of the directory holding them.
fn record_outputs(dir: &Path, files: &[&Path], edit: impl FnOnce(&mut ExperimentManifest)) -> Result<()> {
    let mut manifest = ExperimentManifest::load_or_new(dir)?;
    edit(&mut manifest);
    for f in files {
        manifest.record(dir, f)?;
    }
    manifest.save(dir)?;
    Ok(())
}

fn parse_ratio(text: &str) -> Result<[u32; 3]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || Error::InvalidArgument(format!("ratio must look like `2,1,1`, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0u32; 3];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

fn class_names_of(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(&entry.path(), e))?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::TooFewClasses { needed: 1, available: 0 });
    }
    Ok(names)
}

fn degrade_all(images: &mut [LabeledImage<f32>], config: &TrainConfig) -> Result<()> {
    for item in images.iter_mut() {
        item.image = config.degrade.apply(&item.image)?;
    }
    Ok(())
}

fn resolve_split(
    ds: &Dataset<f32>,
    file: Option<&Path>,
    ratio: [u32; 3],
    seed: u64,
) -> Result<ClassSplit> {
    match file {
        Some(p) => ClassSplit::from_file(&SplitFile::load(p)?, &ds.class_names),
        None => {
            let ids: Vec<usize> = (0..ds.num_classes()).collect();
            split_classes(&ids, ratio, seed)
        }
    }
}

pub fn permset(a: &PermsetArgs) -> Result<()> {
    let opts = GenerateOptions {
        seed: a.seed,
        exhaustive: a.exhaustive,
        ..Default::default()
    };
    let set = generate_permutation_set_with(a.n, a.count, &opts)?;
    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    set.save(&a.out)?;
    record_outputs(&dir, &[&a.out], |m| {
        m.permset_file = Some(a.out.display().to_string());
        m.seed = Some(a.seed);
    })?;
    println!(
        "{} permutations of {} elements, min Hamming {}, mean {:.3} -> {}",
        set.len(),
        set.n_elements(),
        set.min_hamming(),
        set.mean_hamming(),
        a.out.display()
    );
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let root = dataset_root(a.root.as_deref(), None)?;
    let ratio = parse_ratio(&a.ratio)?;
    let names = class_names_of(&root)?;
    let ids: Vec<usize> = (0..names.len()).collect();
    let split = split_classes(&ids, ratio, a.seed)?;
    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    split.to_file(&names).save(&a.out)?;
    record_outputs(&dir, &[&a.out], |m| {
        m.dataset_root = Some(root.display().to_string());
        m.split_file = Some(a.out.display().to_string());
        m.seed = Some(a.seed);
    })?;
    println!(
        "{} classes -> base {} / val {} / novel {} -> {}",
        names.len(),
        split.base.len(),
        split.val.len(),
        split.novel.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load_with_overrides(&a.config, &a.overrides)?;
    config.validate()?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| parent_dir(&a.config));
    create_dir(&out_dir)?;
    let root = dataset_root(None, config.dataset.as_deref())?;
    config.dataset = Some(root.clone());

    let mut ds = load_dataset::<f32>(&root, config.image_size)?;
    degrade_all(&mut ds.images, &config)?;

    let mut written: Vec<PathBuf> = Vec::new();
    let mut split_path = None;
    let (train_images, val_images) = match config.mode {
        TrainMode::Episodic => {
            let split = resolve_split(&ds, config.split.as_deref(), config.split_ratio, config.seed)?;
            let path = out_dir.join("split.json");
            split.to_file(&ds.class_names).save(&path)?;
            written.push(path.clone());
            split_path = Some(path);
            (ds.subset(&split.base), ds.subset(&split.val))
        }
        TrainMode::Standard => {
            let [tr, va, _] = split_images(&ds.images, config.split_ratio, config.seed)?;
            (tr, va)
        }
    };

    let permset = match config.ssl_task {
        SslTask::Jigsaw => {
            let set = match &config.permset {
                Some(p) => PermutationSet::load(p)?,
                None => generate_permutation_set(9, config.permset_size)?,
            };
            let path = out_dir.join("permset.json");
            set.save(&path)?;
            written.push(path.clone());
            config.permset = Some(path);
            Some(set)
        }
        _ => None,
    };

    let log_path = out_dir.join("train_log.jsonl");
    let log_file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let log = RefCell::new(BufWriter::new(log_file));
    let log_error = RefCell::new(None);
    let mut on_step = |s: &fewshot_ssl::StepLog| {
        if log_error.borrow().is_some() {
            return;
        }
        let line = match serde_json::to_string(s) {
            Ok(l) => l,
            Err(e) => {
                *log_error.borrow_mut() = Some(Error::from(e));
                return;
            }
        };
        if let Err(e) = writeln!(log.borrow_mut(), "{line}") {
            *log_error.borrow_mut() = Some(Error::io(&log_path, e));
        }
        if s.step % 100 == 0 {
            eprintln!(
                "step {:>6}  loss {:.4}  sup acc {:.3}",
                s.step, s.loss_total, s.acc_sup
            );
        }
    };
    let data = TrainData {
        train: &train_images,
        val: &val_images,
        num_classes: ds.num_classes(),
    };
    let outcome = fewshot_ssl::train(&config, data, permset.as_ref(), &mut on_step)?;
    if let Some(e) = log_error.into_inner() {
        return Err(e);
    }
    log.into_inner()
        .into_inner()
        .map_err(|e| Error::io(&log_path, e.into_error()))?
        .sync_all()
        .map_err(|e| Error::io(&log_path, e))?;
    written.push(log_path);

    let best = out_dir.join("best.ckpt");
    let last = out_dir.join("last.ckpt");
    outcome.best.save(&best)?;
    outcome.last.save(&last)?;
    written.push(best);
    written.push(last);

    let summary_path = out_dir.join("train_summary.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "steps": outcome.steps,
            "best_step": outcome.best.step,
            "best_val_accuracy": outcome.best.best_val_accuracy,
            "validations": outcome.validations,
        }),
    )?;
    written.push(summary_path);

    let config_json = config.to_json()?;
    let files: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    record_outputs(&out_dir, &files, |m| {
        m.config_path = Some(a.config.display().to_string());
        m.config_hash = Some(bytes_hash(config_json.as_bytes()));
        m.dataset_root = Some(root.display().to_string());
        m.split_file = split_path.as_ref().map(|p| p.display().to_string());
        m.permset_file = config.permset.as_ref().map(|p| p.display().to_string());
        m.seed = Some(config.seed);
        m.train_config = serde_json::from_str(&config_json).ok();
    })?;
    println!(
        "trained {} steps; best checkpoint at step {} -> {}",
        outcome.steps,
        outcome.best.step,
        out_dir.display()
    );
    Ok(())
}

fn checkpoint_config(ckpt: &Checkpoint32) -> Result<TrainConfig> {
    serde_json::from_value(ckpt.train_config.clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint carries an unreadable training config: {e}")))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint32::load(&a.checkpoint)?;
    let config = checkpoint_config(&ckpt)?;
    let ckpt_dir = parent_dir(&a.checkpoint);
    let root = dataset_root(a.root.as_deref(), config.dataset.as_deref())?;
    let mut ds = load_dataset::<f32>(&root, config.image_size)?;
    degrade_all(&mut ds.images, &config)?;

    let (mut report, default_name) = match a.protocol {
        ProtocolArg::MetaTest => {
            let beside = ckpt_dir.join("split.json");
            let split_file = a
                .split
                .clone()
                .or_else(|| beside.exists().then_some(beside))
                .or_else(|| config.split.clone());
            let split = resolve_split(&ds, split_file.as_deref(), config.split_ratio, config.seed)?;
            let novel = ds.subset(&split.novel);
            let report = meta_test(&ckpt.bundle, &novel, a.n_way, a.k_shot, a.m_query, a.episodes, a.seed)?;
            (report, format!("eval_meta_test_{}way_{}shot.json", a.n_way, a.k_shot))
        }
        ProtocolArg::Standard => {
            let [_, _, test] = split_images(&ds.images, config.split_ratio, config.seed)?;
            (standard_report(&ckpt.bundle, &test)?, "eval_standard.json".to_string())
        }
    };
    report.config = ckpt.train_config.clone();
    report.checkpoint_id = Some(ckpt.id()?);

    let out = a.out.clone().unwrap_or_else(|| ckpt_dir.join(default_name));
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    report.save(&out)?;
    record_outputs(&dir, &[&out], |_| {})?;
    println!("{report}");
    Ok(())
}

pub fn saliency(a: &SaliencyArgs) -> Result<()> {
    let ckpt = Checkpoint32::load(&a.checkpoint)?;
    let config = checkpoint_config(&ckpt)?;
    let image = config.degrade.apply(&load_image::<f32>(&a.image, config.image_size)?)?;
    let mut map = saliency_map(&ckpt.bundle, &image, a.class)?;
    map.source = a.image.display().to_string();
    map.model_id = ckpt.id()?;
    let dir = parent_dir(&a.out);
    create_dir(&dir)?;
    map.save_png(&a.out)?;
    record_outputs(&dir, &[&a.out], |_| {})?;
    println!("{}x{} saliency map -> {}", map.width, map.height, a.out.display());
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let rows = collect_report(&a.input)?;
    print!("{}", render_table(&rows));
    if let Some(out) = &a.out {
        create_dir(&parent_dir(out))?;
        write_json(out, &rows)?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let config = synthetic::SyntheticConfig {
        classes: a.classes,
        per_class: a.per_class,
        size: a.size,
        seed: a.seed,
    };
    synthetic::write_dataset(&config, &a.out)?;
    println!(
        "{} classes x {} images of {}px -> {}",
        a.classes,
        a.per_class,
        a.size,
        a.out.display()
    );
    Ok(())
}
