//! Subcommand runners. Each one reads a resolved [`RunConfig`], writes its
//! artifacts and the config echo into the output directory, and returns a
//! one-line JSON summary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::cluster::{assign_clusters, ClusterTrainer, EpochRecord};
use crate::config::{RunConfig, SEED_DATA, SEED_EXTRACT};
use crate::data::{
    area_resize, encode_idx_images, encode_idx_labels, filter_classes, load_cifar_bin, load_idx,
    read_features, read_labels, synth_gaussians, synthetic_digits, write_bytes, write_features,
    write_labels, ImageDataset,
};
use crate::error::{Error, Result};
use crate::eval::clustering_accuracy;
use crate::features::{extract_features, pca_2d, FeatureMatrix, FeatureNorm};
use crate::gan::GanState;
use crate::gradcheck::run_suite;
use crate::nn::mix_seed;

pub const ECHO: &str = "config.resolved";
pub const CHECKPOINT: &str = "gan.dcgk";
pub const GAN_LOG: &str = "gan_losses.jsonl";
pub const FEATURES: &str = "features.dcfm";
pub const FEATURES_PRIME: &str = "features_prime.dcfm";
pub const LABELS: &str = "labels.dclb";
pub const CLUSTER_LOG: &str = "cluster_log.jsonl";
pub const ASSIGNMENTS: &str = "assignments.dclb";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const GRADCHECK: &str = "gradcheck.json";
pub const IDX_IMAGES_FILE: &str = "images.idx3";
pub const IDX_LABELS_FILE: &str = "labels.idx1";
pub const PCA: &str = "pca.csv";

/// The subcommands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TrainGan,
    Extract,
    Cluster,
    Evaluate,
    Pipeline,
    SynthData,
    GradCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainGan => "train-gan",
            Command::Extract => "extract",
            Command::Cluster => "cluster",
            Command::Evaluate => "evaluate",
            Command::Pipeline => "pipeline",
            Command::SynthData => "synth-data",
            Command::GradCheck => "grad-check",
        }
    }
}

/// Run `cmd` under `cfg`.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Value> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join(ECHO), cfg.echo())?;
    let summary = match cmd {
        Command::TrainGan => train_gan(cfg)?,
        Command::Extract => extract(cfg)?,
        Command::Cluster => cluster(cfg)?,
        Command::Evaluate => evaluate(cfg)?,
        Command::Pipeline => pipeline(cfg)?,
        Command::SynthData => synth_data(cfg)?,
        Command::GradCheck => grad_check(cfg)?,
    };
    Ok(json!({ "command": cmd.name(), "out": out.display().to_string(), "result": summary }))
}

fn is_image_dataset(cfg: &RunConfig) -> bool {
    cfg.get("dataset") != "gauss"
}

/// The image dataset named by the config, scaled to `[−1, 1]`.
pub fn load_images(cfg: &RunConfig) -> Result<ImageDataset> {
    let n = cfg.usize("data.n")?;
    let side = cfg.usize("data.side")?;
    let crop = match cfg.usize("data.crop")? {
        0 => None,
        c => Some(c),
    };
    let opt = |key: &str| match cfg.get(key) {
        "" => None,
        p => Some(Path::new(p).to_path_buf()),
    };
    let ds = match cfg.get("dataset") {
        "mnist-mini" => match opt("data.images") {
            None => synthetic_digits(
                &cfg.usize_list("data.classes")?,
                n,
                side,
                cfg.seed().wrapping_add(SEED_DATA),
            )?,
            Some(images) => {
                let labels = opt("data.labels").ok_or_else(|| {
                    Error::Config("mnist-mini from IDX files needs data.labels".into())
                })?;
                let full = load_idx(&images, Some(&labels), crop)?;
                let mut ds = filter_classes(&full, &cfg.usize_list("data.classes")?, n)?;
                let (_, h, w) = ds.geometry();
                if (h, w) != (side, side) {
                    ds.images = area_resize(&ds.images, side, side)?;
                }
                ds.preset = "mnist-mini".into();
                ds
            }
        },
        "idx" => {
            let images = opt("data.images")
                .ok_or_else(|| Error::Config("dataset=idx needs data.images".into()))?;
            let full = load_idx(&images, opt("data.labels").as_deref(), crop)?;
            let keep: Vec<usize> = (0..full.len().min(n)).collect();
            full.subset(&keep)
        }
        "cifar" => {
            let paths: Vec<&str> = cfg
                .get("data.cifar")
                .split(',')
                .filter(|p| !p.is_empty())
                .collect();
            if paths.is_empty() {
                return Err(Error::Config("dataset=cifar needs data.cifar".into()));
            }
            let full = load_cifar_bin(&paths)?;
            let keep: Vec<usize> = (0..full.len().min(n)).collect();
            full.subset(&keep)
        }
        other => {
            return Err(Error::Config(format!(
                "dataset '{other}' holds features, not images"
            )));
        }
    };
    if ds.is_empty() {
        return Err(Error::InvalidArgument("the dataset is empty".into()));
    }
    Ok(ds)
}

fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `synth-data`: gauss features and labels, or the procedural digits as IDX.
pub fn synth_data(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.out_dir();
    match cfg.get("dataset") {
        "gauss" => {
            let (f, labels) = synth_gaussians(&cfg.synth_spec()?)?;
            write_features(&out.join(FEATURES), &f)?;
            write_labels(&out.join(LABELS), &labels)?;
            Ok(json!({ "rows": f.rows(), "dim": f.dim(), "files": [FEATURES, LABELS] }))
        }
        "mnist-mini" => {
            let ds = load_images(cfg)?;
            let labels = ds.labels.clone().unwrap_or_default();
            write_bytes(&out.join(IDX_IMAGES_FILE), &encode_idx_images(&ds.images)?)?;
            write_bytes(&out.join(IDX_LABELS_FILE), &encode_idx_labels(&labels)?)?;
            write_labels(&out.join(LABELS), &labels)?;
            let (_, h, w) = ds.geometry();
            Ok(
                json!({ "rows": ds.len(), "side": [h, w], "files": [IDX_IMAGES_FILE, IDX_LABELS_FILE, LABELS] }),
            )
        }
        other => Err(Error::Config(format!(
            "synth-data supports dataset=gauss or mnist-mini, got '{other}'"
        ))),
    }
}

/// Adversarial phase; returns the trained state.
pub fn fit_gan(cfg: &RunConfig, ds: &ImageDataset) -> Result<GanState> {
    let mut gan = GanState::new(cfg.gan_config()?)?;
    let shape = gan.image_shape();
    let (c, h, w) = ds.geometry();
    if [c, h, w] != shape {
        return Err(Error::Config(format!(
            "arch {} expects {shape:?} images, the dataset has {:?}",
            cfg.get("arch"),
            [c, h, w]
        )));
    }
    gan.train(&ds.images, |log| {
        if log.iter % 50 == 0 {
            log::info!(
                "gan iter {} d {:.4} g {:.4} l1 {:.4}",
                log.iter,
                log.d_loss,
                log.g_loss,
                log.l1_penalty
            );
        }
    })?;
    Ok(gan)
}

fn gan_summary(gan: &GanState) -> Value {
    let n = gan.history.len();
    let tail = &gan.history[n - (n / 10).max(1)..];
    let last = gan.history.last();
    json!({
        "iters": n,
        "final_d_loss": last.map(|l| l.d_loss),
        "final_g_loss": last.map(|l| l.g_loss),
        "l1_zero_in_final_tenth": tail.iter().any(|l| l.l1_penalty == 0.0),
        "all_finite": gan.history.iter().all(|l| l.d_loss.is_finite() && l.g_loss.is_finite()),
    })
}

/// `train-gan`: checkpoint and per-iteration loss log.
pub fn train_gan(cfg: &RunConfig) -> Result<Value> {
    let ds = load_images(cfg)?;
    let gan = fit_gan(cfg, &ds)?;
    let out = cfg.out_dir();
    gan.save(&out.join(CHECKPOINT))?;
    write_jsonl(&out.join(GAN_LOG), &gan.history)?;
    Ok(gan_summary(&gan))
}

/// Features at rate 0 and at `feature_dropout`.
pub fn extract_pair(
    cfg: &RunConfig,
    gan: &GanState,
    ds: &ImageDataset,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let seed = cfg.seed().wrapping_add(SEED_EXTRACT);
    let m = extract_features(gan, &ds.images, 0.0, seed)?;
    let prime = extract_features(
        gan,
        &ds.images,
        cfg.f64("feature_dropout")?,
        mix_seed(seed, 1),
    )?;
    Ok((m, prime))
}

fn write_extracted(
    cfg: &RunConfig,
    m: &FeatureMatrix,
    prime: &FeatureMatrix,
    ds: &ImageDataset,
) -> Result<()> {
    let out = cfg.out_dir();
    write_features(&out.join(FEATURES), m)?;
    write_features(&out.join(FEATURES_PRIME), prime)?;
    if let Some(l) = &ds.labels {
        write_labels(&out.join(LABELS), l)?;
    }
    Ok(())
}

/// `extract`: features from a saved checkpoint.
pub fn extract(cfg: &RunConfig) -> Result<Value> {
    if !is_image_dataset(cfg) {
        return Err(Error::Config("extract needs an image dataset".into()));
    }
    let ds = load_images(cfg)?;
    let gan = GanState::load(
        cfg.gan_config()?,
        &cfg.input_path("input.checkpoint", CHECKPOINT),
    )?;
    let (m, prime) = extract_pair(cfg, &gan, &ds)?;
    write_extracted(cfg, &m, &prime, &ds)?;
    Ok(json!({ "rows": m.rows(), "dim": m.dim(), "files": [FEATURES, FEATURES_PRIME] }))
}

/// Result of the clustering phase.
pub struct ClusterRun {
    pub trainer: ClusterTrainer<f32>,
    pub best_head: usize,
    pub assignments: Vec<usize>,
}

/// Train the bank. A fixed `prime` is reused every epoch; without one the
/// dropout view is redrawn from `m` each epoch. With `labels` each epoch
/// record carries the accuracy of its best head.
pub fn fit_bank(
    cfg: &RunConfig,
    m: &FeatureMatrix,
    prime: Option<&FeatureMatrix>,
    labels: Option<&[usize]>,
) -> Result<ClusterRun> {
    let config = cfg.cluster_config()?;
    if let Some(p) = prime {
        if p.values.shape() != m.values.shape() {
            return Err(Error::shape(
                "dropout features",
                p.values.shape(),
                m.values.shape(),
            ));
        }
    }
    if let Some(l) = labels {
        if l.len() != m.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} feature rows",
                l.len(),
                m.rows()
            )));
        }
    }
    let rate = cfg.f64("feature_dropout")?;
    let (offset, scale) = FeatureNorm::parse(cfg.get("feature_norm"))?.fit(&m.values);
    let normed = FeatureNorm::apply(&m.values, &offset, &scale)?;
    let fixed = prime
        .map(|p| FeatureNorm::apply(&p.values, &offset, &scale))
        .transpose()?;
    let mut trainer = ClusterTrainer::<f32>::new(m.dim(), config.clone())?;
    for e in 0..config.epochs {
        let drawn;
        let p = match &fixed {
            Some(p) => p,
            None => {
                let raw = m.with_dropout(rate, mix_seed(config.seed, e as u64))?;
                drawn = FeatureNorm::apply(&raw.values, &offset, &scale)?;
                &drawn
            }
        };
        let mut rec = trainer.train_epoch(&normed, p)?;
        if let Some(l) = labels {
            let pred = assign_clusters(&trainer.bank, rec.best_head, &normed)?;
            rec.acc = Some(clustering_accuracy(&pred, l)?.acc);
            if let Some(last) = trainer.history.last_mut() {
                last.acc = rec.acc;
            }
        }
        if e % 20 == 0 || e + 1 == config.epochs {
            log::info!(
                "cluster epoch {e} loss {:.5} best head {} acc {:?}",
                rec.mean_total,
                rec.best_head,
                rec.acc
            );
        }
    }
    let best_head = trainer.best_head()?;
    let assignments = assign_clusters(&trainer.bank, best_head, &normed)?;
    Ok(ClusterRun {
        trainer,
        best_head,
        assignments,
    })
}

fn cluster_summary(run: &ClusterRun) -> Value {
    let last: Option<&EpochRecord> = run.trainer.history.last();
    json!({
        "epochs": run.trainer.history.len(),
        "best_head": run.best_head,
        "final_loss": last.map(|r| r.mean_total),
        "final_acc": last.and_then(|r| r.acc),
    })
}

fn write_cluster(
    cfg: &RunConfig,
    run: &ClusterRun,
    m: &FeatureMatrix,
    labels: Option<&[usize]>,
) -> Result<()> {
    let out = cfg.out_dir();
    write_jsonl(&out.join(CLUSTER_LOG), &run.trainer.history)?;
    write_labels(&out.join(ASSIGNMENTS), &run.assignments)?;
    let mut csv = String::from("x,y,cluster,label\n");
    for (i, [x, y]) in pca_2d(&m.values)?.into_iter().enumerate() {
        let label = labels.map(|l| l[i].to_string()).unwrap_or_default();
        csv.push_str(&format!("{x:.6},{y:.6},{},{label}\n", run.assignments[i]));
    }
    fs::write(out.join(PCA), csv)?;
    Ok(())
}

/// `cluster`: train the bank on stored features.
pub fn cluster(cfg: &RunConfig) -> Result<Value> {
    let m = read_features(&cfg.input_path("input.features", FEATURES))?;
    let prime_path = cfg.input_path("input.features_prime", FEATURES_PRIME);
    let prime = if prime_path.exists() {
        Some(read_features(&prime_path)?)
    } else {
        None
    };
    let labels_path = cfg.input_path("input.labels", LABELS);
    let labels = if labels_path.exists() {
        Some(read_labels(&labels_path)?)
    } else {
        None
    };
    let run = fit_bank(cfg, &m, prime.as_ref(), labels.as_deref())?;
    write_cluster(cfg, &run, &m, labels.as_deref())?;
    Ok(cluster_summary(&run))
}

/// `evaluate`: accuracy of stored assignments against stored labels.
pub fn evaluate(cfg: &RunConfig) -> Result<Value> {
    let pred = read_labels(&cfg.input_path("input.assignments", ASSIGNMENTS))?;
    let truth = read_labels(&cfg.input_path("input.labels", LABELS))?;
    let report = clustering_accuracy(&pred, &truth)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(cfg.out_dir().join(EVAL_REPORT), text)?;
    Ok(json!({ "acc": report.acc, "n": report.n, "per_class": report.per_class }))
}

/// `pipeline`: train-gan → extract → cluster → evaluate for image datasets,
/// synth-data → cluster → evaluate for gauss.
pub fn pipeline(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.out_dir();
    let (gan_part, m, prime, labels) = if is_image_dataset(cfg) {
        let ds = load_images(cfg)?;
        let gan = fit_gan(cfg, &ds)?;
        gan.save(&out.join(CHECKPOINT))?;
        write_jsonl(&out.join(GAN_LOG), &gan.history)?;
        let (m, prime) = extract_pair(cfg, &gan, &ds)?;
        write_extracted(cfg, &m, &prime, &ds)?;
        (gan_summary(&gan), m, Some(prime), ds.labels)
    } else {
        let (m, labels) = synth_gaussians(&cfg.synth_spec()?)?;
        write_features(&out.join(FEATURES), &m)?;
        write_labels(&out.join(LABELS), &labels)?;
        (Value::Null, m, None, Some(labels))
    };
    let labels = labels
        .ok_or_else(|| Error::InvalidArgument("pipeline needs labelled data to evaluate".into()))?;
    let run = fit_bank(cfg, &m, prime.as_ref(), Some(&labels))?;
    write_cluster(cfg, &run, &m, Some(&labels))?;
    let report = clustering_accuracy(&run.assignments, &labels)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out.join(EVAL_REPORT), text)?;
    Ok(json!({
        "gan": gan_part,
        "cluster": cluster_summary(&run),
        "acc": report.acc,
    }))
}

/// `grad-check`: the finite-difference suite at both precisions.
pub fn grad_check(cfg: &RunConfig) -> Result<Value> {
    let seed = cfg.seed();
    let f64_report = run_suite::<f64>(seed)?;
    let f32_report = run_suite::<f32>(seed)?;
    let mut text = serde_json::to_string_pretty(&json!({ "f64": f64_report, "f32": f32_report }))?;
    text.push('\n');
    fs::write(cfg.out_dir().join(GRADCHECK), text)?;
    let failed: Vec<String> = f64_report
        .cases
        .iter()
        .chain(&f32_report.cases)
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    if !failed.is_empty() {
        return Err(Error::CheckFailed(format!(
            "gradient cases over tolerance: {}",
            failed.join(", ")
        )));
    }
    Ok(json!({
        "f64_max_rel_error": f64_report.max_rel_error,
        "f32_max_rel_error": f32_report.max_rel_error,
        "cases": f64_report.cases.len(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path, extra: &[(&str, &str)]) -> RunConfig {
        let mut cli: Vec<(String, String)> = vec![("out".into(), dir.display().to_string())];
        cli.extend(extra.iter().map(|(a, b)| (a.to_string(), b.to_string())));
        RunConfig::resolve(&[], &cli).unwrap()
    }

    #[test]
    fn synth_data_then_evaluate_perfect_assignments() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &[("preset", "gauss-3"), ("data.n", "90")]);
        let s = run(Command::SynthData, &c).unwrap();
        assert_eq!(s["result"]["rows"], 90);
        let labels = read_labels(&dir.path().join(LABELS)).unwrap();
        write_labels(
            &dir.path().join(ASSIGNMENTS),
            &labels.iter().map(|l| (l + 1) % 3).collect::<Vec<_>>(),
        )
        .unwrap();
        let e = run(Command::Evaluate, &c).unwrap();
        assert_eq!(e["result"]["acc"], 1.0);
        let echo = fs::read_to_string(dir.path().join(ECHO)).unwrap();
        assert!(echo.contains("dataset=gauss"));
    }

    #[test]
    fn missing_inputs_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &[]);
        assert!(matches!(run(Command::Evaluate, &c), Err(Error::Io(_))));
        let g = cfg(dir.path(), &[("dataset", "gauss")]);
        assert!(run(Command::Extract, &g).is_err());
    }

    #[test]
    fn tiny_image_pipeline_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(
            dir.path(),
            &[
                ("preset", "mnist-mini"),
                ("data.n", "96"),
                ("data.side", "8"),
                ("arch", "toy-8"),
                ("latent_dim", "8"),
                ("gan_batch", "16"),
                ("gan_iters", "3"),
                ("cluster_hidden", "8"),
                ("cluster_epochs", "2"),
                ("cluster_batch", "32"),
            ],
        );
        let s = run(Command::Pipeline, &c).unwrap();
        for f in [
            ECHO,
            CHECKPOINT,
            GAN_LOG,
            FEATURES,
            FEATURES_PRIME,
            LABELS,
            CLUSTER_LOG,
            ASSIGNMENTS,
            EVAL_REPORT,
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(s["result"]["gan"]["iters"], 3);
        assert_eq!(
            fs::read_to_string(dir.path().join(GAN_LOG))
                .unwrap()
                .lines()
                .count(),
            3
        );
        // the staged commands reproduce the chained run
        let staged = tempfile::tempdir().unwrap();
        let c2 = {
            let mut c2 = c.clone();
            c2.set("out", &staged.path().display().to_string()).unwrap();
            c2
        };
        run(Command::TrainGan, &c2).unwrap();
        run(Command::Extract, &c2).unwrap();
        run(Command::Cluster, &c2).unwrap();
        run(Command::Evaluate, &c2).unwrap();
        for f in [
            GAN_LOG,
            FEATURES,
            FEATURES_PRIME,
            CLUSTER_LOG,
            ASSIGNMENTS,
            EVAL_REPORT,
        ] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(staged.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
