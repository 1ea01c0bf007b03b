use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use swinecat::checkpoint::{load_for_config, save_checkpoint};
use swinecat::data::{
    compute_stats, load_dataset, split, synth_generate, LabelMap, Manifest, Normalization, Split,
};
use swinecat::metrics::{confuse, render_kv, render_table, report, MetricsReport};
use swinecat::model::{AuditComparison, ModelParams};
use swinecat::train::{evaluate, fit, EvalSetup, StopReason};
use swinecat::Error;

use crate::config::RunConfig;
use crate::CliError;

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.data_dir.clone().ok_or_else(|| {
        CliError::Usage("data_dir is not set (use --data_dir or the config file)".into())
    })
}

fn labels(cfg: &RunConfig) -> Result<LabelMap, CliError> {
    if cfg.model.num_classes == LabelMap::default().len() {
        return Ok(LabelMap::default());
    }
    let generic = (0..cfg.model.num_classes)
        .map(|i| format!("class_{i}"))
        .collect();
    Ok(LabelMap::new(generic)?)
}

/// The dataset with every record assigned to a split.
fn dataset(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let dir = data_dir(cfg)?;
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let m = load_dataset(&dir, &labels(cfg)?)?;
    m.validate(cfg.model.num_classes)?;
    Ok(if m.is_split() { m } else { split(&m, cfg.seed) })
}

/// Configured statistics, else the manifest's, else computed.
fn normalization(cfg: &RunConfig, m: &Manifest) -> Result<Normalization, CliError> {
    if let Some(n) = cfg.norm.or(m.stats) {
        return Ok(n);
    }
    Ok(compute_stats(m, cfg.stats_scope, &cfg.preprocess())?)
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|e| CliError::Core(Error::io(&path, e)))
}

fn metrics(
    cfg: &RunConfig,
    params: &ModelParams<f32>,
    manifest: &Arc<Manifest>,
    split: Split,
) -> Result<MetricsReport, CliError> {
    let setup = EvalSetup {
        manifest,
        prep: cfg.preprocess(),
        batch_size: cfg.train.batch_size,
        prefetch: cfg.train.prefetch,
    };
    let e = evaluate(&cfg.model, params, split, &setup)?;
    Ok(report(&confuse(
        &e.preds,
        &e.labels,
        cfg.model.num_classes,
    )?)?)
}

pub fn train(mut cfg: RunConfig) -> Result<(), CliError> {
    let mut manifest = dataset(&cfg)?;
    let norm = normalization(&cfg, &manifest)?;
    cfg.set_norm(norm);
    manifest.stats = Some(norm);
    let manifest = Arc::new(manifest);

    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(dir.join("config.resolved"), &cfg.to_text())?;
    manifest.write(&dir.join("manifest.tsv"))?;
    println!(
        "training {} images ({} val) into {}",
        manifest.indices(Split::Train).len(),
        manifest.indices(Split::Val).len(),
        dir.display()
    );

    let out = fit(&cfg.model, &cfg.train, &manifest, cfg.preprocess(), |r| {
        println!(
            "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds
        );
    })?;
    let why = match out.stopped {
        StopReason::Patience => "patience exhausted",
        StopReason::MaxEpochs => "epoch limit reached",
        StopReason::TargetReached => "train accuracy target reached",
    };
    println!("stopped: {why}; best epoch {}", out.best_epoch);

    save_checkpoint(&out.params, dir.join("checkpoint.bin"))?;
    out.log.write_csv(&dir.join("trainlog.csv"))?;
    let labels = labels(&cfg)?;
    let names = labels.names();
    let r = metrics(&cfg, &out.params, &manifest, Split::Val)?;
    let table = render_table(&r, &names);
    write(dir.join("report.txt"), &table)?;
    write(dir.join("report.kv"), &render_kv(&r, &names))?;
    println!("validation report\n{table}");
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.run_dir().join("checkpoint.bin"));
    let params = load_for_config(&path, &cfg.model)?;
    let mut manifest = dataset(cfg)?;
    let norm = normalization(cfg, &manifest)?;
    manifest.stats = Some(norm);
    let mut cfg = cfg.clone();
    cfg.set_norm(norm);
    let labels = labels(&cfg)?;
    let r = metrics(&cfg, &params, &Arc::new(manifest), cfg.split)?;
    println!(
        "{} split, checkpoint {}",
        cfg.split.as_str(),
        path.display()
    );
    print!("{}", render_table(&r, &labels.names()));
    Ok(())
}

pub fn inspect(cfg: &RunConfig) -> Result<(), CliError> {
    let m = &cfg.model;
    println!(
        "image {}  patch {}  embed {}  depths {:?}  heads {:?}  window {}  classes {}  eca {}",
        m.image_size,
        m.patch_size,
        m.embed_dim,
        m.depths,
        m.num_heads,
        m.window_size,
        m.num_classes,
        m.eca_enabled
    );
    println!("{}", AuditComparison::new(m)?);
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = data_dir(cfg)?;
    if cfg.per_class == 0 {
        return Err(CliError::Usage("per_class must be at least 1".into()));
    }
    let out = synth_generate(&dir, cfg.per_class, cfg.synth_size, cfg.seed)?;
    println!(
        "wrote {} images of {}x{} px under {}",
        out.manifest.records.len(),
        cfg.synth_size,
        cfg.synth_size,
        dir.display()
    );
    println!("nearest-centroid accuracy {:.4}", out.centroid_accuracy);
    println!("manifest {}", out.manifest_path.display());
    Ok(())
}
