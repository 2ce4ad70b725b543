use std::fs;
use std::path::{Path, PathBuf};

use histofuse_core::data::{
    balance_classes, load_image, patient_leakage, scan_directory, split_by_magnification, stratified_split,
    write_synthetic_tree, BiopsyRecord, ClassKey, Manifest, TumorClass,
};
use histofuse_core::metrics::{ConfusionMatrix, MetricsReport};
use histofuse_core::models::{hierarchical_predict, load_model, save_model, Architecture, ModelGraph, ModelKind};
use histofuse_core::optim::{self, Dataset, EpochHistory, TrainConfig};
use histofuse_core::pso::{mock_fitness, pso_tune_hyperparams};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Resolved, RunConfig};
use crate::{svg, CliError};

pub const WEIGHTS_FILE: &str = "model.bin";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn scan(root: &Path, out: &Path) -> Result<(), CliError> {
    let root = fs::canonicalize(root).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", root.display())))?;
    let scan = scan_directory(&root)?;
    scan.manifest.write_csv(out)?;
    let report = out.with_extension("skipped.txt");
    write(&report, scan.skip_report())?;
    println!(
        "{} image(s) indexed, {} file(s) skipped; manifest {}",
        scan.manifest.len(),
        scan.skipped.len(),
        out.display()
    );
    Ok(())
}

/// Output index of a record for models of `arch`, or `None` if the model
/// does not score its family.
fn label_of(arch: &Architecture, r: &BiopsyRecord) -> Option<usize> {
    let family = match arch.kind {
        ModelKind::Baseline | ModelKind::FusionBinary => return Some(r.class.index()),
        ModelKind::FusionBenign => TumorClass::Benign,
        ModelKind::FusionMalignant => TumorClass::Malignant,
        ModelKind::SubclassInitial => arch.group.unwrap_or(TumorClass::Benign),
        ModelKind::Backbone => return None,
    };
    (r.class == family).then(|| r.subtype.class_index())
}

fn class_key(kind: ModelKind) -> ClassKey {
    if kind.is_binary() {
        ClassKey::Tumor
    } else {
        ClassKey::Subtype
    }
}

fn relevant(m: &Manifest, arch: &Architecture) -> Manifest {
    Manifest {
        records: m.records.iter().filter(|r| label_of(arch, r).is_some()).cloned().collect(),
        source: m.source.clone(),
    }
}

fn load_dataset(m: &Manifest, arch: &Architecture, base: &Path) -> Result<Dataset, CliError> {
    let images = m
        .records
        .par_iter()
        .map(|r| load_image(&base.join(&r.path), arch.input_size))
        .collect::<histofuse_core::Result<Vec<_>>>()?;
    let labels = m.records.iter().map(|r| label_of(arch, r).expect("filtered")).collect();
    Ok(Dataset::new(images, labels)?)
}

struct Prepared {
    train: Dataset,
    val: Dataset,
    train_manifest: Manifest,
    val_manifest: Manifest,
    leakage: Vec<String>,
}

fn prepare(res: &Resolved, records: &Manifest, base: &Path) -> Result<Prepared, CliError> {
    let key = class_key(res.arch.kind);
    let mut m = relevant(records, &res.arch);
    if let Some(target) = res.split.balance {
        m = balance_classes(&m, target, key, res.train.seed)?;
    }
    if m.is_empty() {
        return Err(CliError::Usage(format!(
            "manifest has no images for a {} model",
            res.arch.kind.name()
        )));
    }
    let (tm, vm) = stratified_split(&m, res.split.val_fraction, key, res.train.seed)?;
    if vm.is_empty() {
        return Err(CliError::Usage("validation split is empty; add images or raise split.val_fraction".into()));
    }
    let leakage = patient_leakage(&tm, &vm);
    if !leakage.is_empty() {
        log::warn!("{} patient(s) appear in both splits", leakage.len());
    }
    Ok(Prepared {
        train: load_dataset(&tm, &res.arch, base)?,
        val: load_dataset(&vm, &res.arch, base)?,
        train_manifest: tm,
        val_manifest: vm,
        leakage,
    })
}

#[derive(Serialize)]
struct RunRecord<'a> {
    architecture: &'a Architecture,
    training: &'a TrainConfig,
    magnification: Option<u32>,
    train_images: usize,
    val_images: usize,
    leaked_patients: &'a [String],
    epochs_run: usize,
    stopped_early: bool,
    restored_epoch: Option<usize>,
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<(), CliError> {
    write(&out.join("metrics.txt"), report.to_key_values())?;
    write(
        &out.join("metrics.csv"),
        format!("{}\n{}\n", MetricsReport::csv_header(), report.to_csv_row()),
    )?;
    write(&out.join("confusion.csv"), report.confusion.to_csv())
}

fn train_group(res: &Resolved, records: &Manifest, base: &Path, out: &Path, mag: Option<u32>) -> Result<(), CliError> {
    create_dir(out)?;
    let data = prepare(res, records, base)?;
    data.train_manifest.write_csv(&out.join("train_manifest.csv"))?;
    data.val_manifest.write_csv(&out.join("val_manifest.csv"))?;
    let mut model: ModelGraph = res.arch.build(res.train.seed)?;
    let outcome = optim::train(&mut model, &data.train, &data.val, &res.train)?;
    let weights = out.join(WEIGHTS_FILE);
    save_model(&model, &weights)?;
    write(&out.join("history.csv"), outcome.history.to_csv())?;
    let report = optim::evaluate(&model, &data.val)?;
    write_report(out, &report)?;
    let record = RunRecord {
        architecture: &res.arch,
        training: &res.train,
        magnification: mag,
        train_images: data.train.len(),
        val_images: data.val.len(),
        leaked_patients: &data.leakage,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        restored_epoch: outcome.restored_epoch,
    };
    let mut json = serde_json::to_string_pretty(&record).expect("run record serializes");
    json.push('\n');
    write(&out.join("run.json"), json)?;
    let last = outcome.history.rows.last().expect("at least one epoch");
    println!(
        "{}: {} epoch(s), val_loss {:.4}, val_acc {:.4}, weights {}",
        res.arch.kind.name(),
        outcome.history.len(),
        last.val_loss,
        report.accuracy,
        weights.display()
    );
    Ok(())
}

fn load_config(path: &Path) -> Result<(Resolved, Manifest, PathBuf), CliError> {
    let cfg = RunConfig::read(path)?;
    let res = cfg.resolve(&parent_of(path))?;
    let manifest = Manifest::read_csv(&res.manifest)?;
    let base = parent_of(&res.manifest);
    Ok((res, manifest, base))
}

fn filter_magnification(m: &Manifest, res: &Resolved) -> Manifest {
    match res.magnification {
        None => m.clone(),
        Some(mag) => Manifest {
            records: m.records.iter().filter(|r| r.magnification == mag).cloned().collect(),
            source: m.source.clone(),
        },
    }
}

pub fn train(config: &Path) -> Result<(), CliError> {
    let (res, manifest, base) = load_config(config)?;
    if res.split.per_magnification {
        for (mag, part) in split_by_magnification(&manifest) {
            if part.is_empty() {
                continue;
            }
            let out = res.output_dir.join(format!("{}X", mag.value()));
            train_group(&res, &part, &base, &out, Some(mag.value()))?;
        }
        Ok(())
    } else {
        let m = filter_magnification(&manifest, &res);
        train_group(&res, &m, &base, &res.output_dir, res.magnification.map(|m| m.value()))
    }
}

pub fn tune(config: &Path, mock: bool) -> Result<(), CliError> {
    let cfg = RunConfig::read(config)?;
    let res = cfg.resolve(&parent_of(config))?;
    let swarm = &res.tune.swarm;
    let result = if mock {
        pso_tune_hyperparams(|lr, d| Ok(mock_fitness(lr, d)), swarm)?
    } else {
        if !res.arch.kind.is_fusion() {
            return Err(CliError::Usage(format!(
                "tune searches the fusion-head dropout; {} models have none",
                res.arch.kind.name()
            )));
        }
        let manifest = Manifest::read_csv(&res.manifest)?;
        let m = filter_magnification(&manifest, &res);
        let data = prepare(&res, &m, &parent_of(&res.manifest))?;
        let fitness = |lr: f64, dropout: f64| -> histofuse_core::Result<f64> {
            let mut arch = res.arch.clone();
            arch.dropout = Some(dropout);
            let mut model: ModelGraph = arch.build(res.train.seed)?;
            let tc = TrainConfig {
                epochs: res.tune.epochs,
                lr,
                scheduler: false,
                early_stop: false,
                ..res.train.clone()
            };
            let out = optim::train(&mut model, &data.train, &data.val, &tc)?;
            Ok(out.history.rows.last().map_or(f64::INFINITY, |r| r.val_loss))
        };
        pso_tune_hyperparams(fitness, swarm)?
    };
    create_dir(&res.output_dir)?;
    write(&res.output_dir.join("pso_trace.csv"), result.trace_csv())?;
    let summary = format!(
        "lr={}\ndropout={}\nbest_fitness={}\n",
        result.lr, result.dropout, result.best_value
    );
    write(&res.output_dir.join("tune.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn evaluate(weights: &Path, manifest: &Path, out: &Path) -> Result<(), CliError> {
    let model: ModelGraph = load_model(weights)?;
    let arch = model.architecture().clone();
    let m = relevant(&Manifest::read_csv(manifest)?, &arch);
    if m.is_empty() {
        return Err(CliError::Usage(format!(
            "manifest has no images for a {} model",
            arch.kind.name()
        )));
    }
    let data = load_dataset(&m, &arch, &parent_of(manifest))?;
    let report = optim::evaluate(&model, &data)?;
    create_dir(out)?;
    write_report(out, &report)?;
    print!("{}", report.to_key_values());
    Ok(())
}

fn expect_family(model: &ModelGraph, role: &str, family: TumorClass) -> Result<(), CliError> {
    let want: Vec<String> = family.subtype_codes().into_iter().map(String::from).collect();
    if model.architecture().labels() != want {
        return Err(CliError::Usage(format!(
            "--{role} model scores {:?}, expected the {} subtypes {want:?}",
            model.architecture().labels(),
            family.name()
        )));
    }
    Ok(())
}

fn probs_text(labels: &[String], probs: &[f64]) -> String {
    labels
        .iter()
        .zip(probs)
        .map(|(l, p)| format!("{l}={p:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn predict(binary: &Path, benign: &Path, malignant: &Path, image: &Path) -> Result<(), CliError> {
    let bin: ModelGraph = load_model(binary)?;
    if !bin.architecture().kind.is_binary() {
        return Err(CliError::Usage(format!(
            "--binary model is a {} model, expected baseline or fusion_binary",
            bin.architecture().kind.name()
        )));
    }
    let ben: ModelGraph = load_model(benign)?;
    expect_family(&ben, "benign", TumorClass::Benign)?;
    let mal: ModelGraph = load_model(malignant)?;
    expect_family(&mal, "malignant", TumorClass::Malignant)?;
    let size = bin.architecture().input_size;
    for (role, m) in [("benign", &ben), ("malignant", &mal)] {
        if m.architecture().input_size != size {
            return Err(CliError::Usage(format!(
                "--{role} model takes {0}x{0} images but the binary model takes {size}x{size}",
                m.architecture().input_size
            )));
        }
    }
    let img = load_image(image, size)?;
    let d = hierarchical_predict(&bin, &ben, &mal, &img)?;
    let sub_labels: Vec<String> = d.class.subtype_codes().into_iter().map(String::from).collect();
    println!("class: {}", d.class.name());
    println!("binary: {}", probs_text(&bin.architecture().labels(), &d.binary_probs));
    println!("subtype: {}", d.subtype.code());
    println!("subtypes: {}", probs_text(&sub_labels, &d.subtype_probs));
    println!("{}", serde_json::to_string(&d).expect("diagnosis serializes"));
    Ok(())
}

pub fn report(history: &Path, confusion: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))
    };
    let located = |p: &Path, e: histofuse_core::Error| CliError::Usage(format!("{}: {e}", p.display()));
    let h = EpochHistory::from_csv(&read(history)?).map_err(|e| located(history, e))?;
    if h.is_empty() {
        return Err(CliError::Usage(format!("{}: history has no epochs", history.display())));
    }
    let cm = match confusion {
        Some(p) => Some(ConfusionMatrix::from_csv(&read(p)?).map_err(|e| located(p, e))?),
        None => None,
    };
    create_dir(out)?;
    write(&out.join("curves.svg"), svg::curves(&h))?;
    if let Some(cm) = cm {
        write(&out.join("confusion.svg"), svg::heatmap(&cm))?;
    }
    println!("report written to {}", out.display());
    Ok(())
}

pub fn synth(out: &Path, per_subtype: usize, size: usize, seed: u64) -> Result<(), CliError> {
    if per_subtype == 0 {
        return Err(CliError::Usage("--per-subtype must be at least 1".into()));
    }
    let written = write_synthetic_tree(out, &[per_subtype; 8], size, seed)?;
    println!("{} image(s) written under {}", written.len(), out.display());
    Ok(())
}
