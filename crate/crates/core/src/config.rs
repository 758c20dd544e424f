//! Flat `key=value` run configuration.
//!
//! Resolution order is defaults, then the named preset, then the config file,
//! then command-line pairs. Unknown keys are rejected at every layer, and the
//! resolved table is echoed in a fixed key order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cluster::{ClusterConfig, HeadSpec, NormRule, PerturbSpec, Terms, VatMode};
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::gan::GanConfig;

/// Seed offsets of the phases relative to the master seed.
pub const SEED_DATA: u64 = 1000;
pub const SEED_GAN: u64 = 2000;
pub const SEED_EXTRACT: u64 = 3000;
pub const SEED_CLUSTER: u64 = 4000;

/// `(key, default, description)` in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "preset",
        "none",
        "named overrides applied before the file: none, mnist-mini, gauss-3",
    ),
    ("dataset", "mnist-mini", "mnist-mini, gauss, idx or cifar"),
    (
        "data.n",
        "3000",
        "number of samples (a cap for idx and cifar)",
    ),
    ("data.classes", "0,1,2", "digit classes kept by mnist-mini"),
    ("data.side", "14", "image side for mnist-mini"),
    (
        "data.images",
        "",
        "IDX image file; for mnist-mini it replaces the procedural digits",
    ),
    ("data.labels", "", "IDX label file"),
    (
        "data.crop",
        "0",
        "center crop applied to IDX images before resizing (0 = none)",
    ),
    ("data.cifar", "", "comma-separated CIFAR-10 binary batches"),
    ("gauss.k", "3", "mixture components"),
    ("gauss.dim", "10", "feature dimension"),
    (
        "gauss.separation",
        "6",
        "pairwise mean distance in standard deviations",
    ),
    ("gauss.std", "1", "component standard deviation"),
    (
        "gauss.weights",
        "uniform",
        "uniform or comma-separated mixture weights",
    ),
    (
        "arch",
        "toy-14",
        "discriminator/generator preset: mnist-24, cifar-32, stl-48, toy-N",
    ),
    ("latent_dim", "100", "generator input size"),
    ("gan_iters", "1000", "GAN training iterations"),
    ("gan_batch", "64", "GAN mini-batch size"),
    ("gan_lr", "1e-4", "GAN Adam learning rate"),
    ("gan_beta1", "0.5", "GAN Adam beta1"),
    ("gan_init_std", "0.02", "GAN weight init standard deviation"),
    ("d_dropout", "0.2", "discriminator dropout rate"),
    ("leaky_slope", "0.2", "leaky ReLU slope in both nets"),
    (
        "tau",
        "20",
        "threshold of the L1 penalty on feature-layer magnitudes",
    ),
    (
        "sobel",
        "true",
        "prepend the edge front-end to the discriminator",
    ),
    (
        "feature_norm",
        "none",
        "none, center or standardize; fitted on M, applied to M and M'",
    ),
    (
        "feature_dropout",
        "0.1",
        "dropout rate of the second extraction pass",
    ),
    ("k", "3", "clusters of the primary heads"),
    (
        "k_over",
        "auto",
        "clusters of the overcluster heads (auto = 5k)",
    ),
    ("primary_heads", "5", "number of primary heads"),
    ("overcluster_heads", "1", "number of overcluster heads"),
    ("delta", "auto", "primary tolerance (auto = 1e-4 ln k)"),
    (
        "delta_over",
        "auto",
        "overcluster tolerance (auto = 1e-2 ln k')",
    ),
    (
        "cluster_hidden",
        "1024,1024",
        "hidden widths of the clustering trunk",
    ),
    ("cluster_epochs", "1000", "clustering epochs"),
    ("cluster_batch", "500", "clustering mini-batch size"),
    ("cluster_lr", "1e-4", "clustering Adam learning rate"),
    ("cluster_beta1", "0.9", "clustering Adam beta1"),
    (
        "cluster_init_std",
        "1e-2",
        "clustering weight init standard deviation",
    ),
    ("lambda", "0.2", "weight of the mutual-information term"),
    ("alpha_r", "0.3", "random-direction radius factor"),
    ("alpha_adv", "0.15", "adversarial radius factor"),
    ("replicas", "5", "adversarial replicas per mini-batch"),
    ("norm_rule", "l2", "radius rule: l2 or squared"),
    (
        "vat_mode",
        "shared",
        "shared or per-head adversarial directions",
    ),
    ("use_vat", "true", "include the adversarial term"),
    (
        "use_dropout_term",
        "true",
        "include the dropout-consistency term",
    ),
    (
        "input.checkpoint",
        "auto",
        "GAN checkpoint for extract (auto = <out>/gan.dcgk)",
    ),
    (
        "input.features",
        "auto",
        "features for cluster (auto = <out>/features.dcfm)",
    ),
    (
        "input.features_prime",
        "auto",
        "dropout features (auto = <out>/features_prime.dcfm, else derived)",
    ),
    (
        "input.labels",
        "auto",
        "labels for evaluate (auto = <out>/labels.dclb)",
    ),
    (
        "input.assignments",
        "auto",
        "assignments for evaluate (auto = <out>/assignments.dclb)",
    ),
    ("seed", "0", "master seed; phases use fixed offsets from it"),
    ("out", "out", "output directory"),
];

/// Overrides behind `preset=<name>`.
pub fn preset_pairs(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    Ok(match name {
        "none" => &[],
        "mnist-mini" => &[
            ("dataset", "mnist-mini"),
            ("arch", "toy-14"),
            ("latent_dim", "32"),
            ("gan_iters", "300"),
            ("gan_lr", "1e-3"),
            ("cluster_hidden", "64,64"),
            ("cluster_epochs", "200"),
            ("cluster_lr", "3e-3"),
            ("alpha_r", "1.0"),
            ("alpha_adv", "0.2"),
            ("feature_norm", "center"),
        ],
        "gauss-3" => &[
            ("dataset", "gauss"),
            ("cluster_hidden", "64,64"),
            ("cluster_epochs", "200"),
            ("cluster_lr", "3e-3"),
        ],
        other => return Err(Error::Config(format!("unknown preset '{other}'"))),
    })
}

/// Parse `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{origin}:{}: expected key=value, got '{line}'",
                i + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Split a `key=value` command-line argument.
pub fn parse_set(arg: &str) -> Result<(String, String)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{arg}'")))
}

/// The resolved table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(_, d, _)| d.to_string()).collect(),
        }
    }
}

fn slot(key: &str) -> Result<usize> {
    KEYS.iter()
        .position(|(k, _, _)| *k == key)
        .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))
}

impl RunConfig {
    /// Layer `file` pairs and then `cli` pairs over the defaults and the
    /// preset named by the last `preset` among them.
    pub fn resolve(file: &[(String, String)], cli: &[(String, String)]) -> Result<Self> {
        for (k, _) in file.iter().chain(cli) {
            slot(k)?;
        }
        let preset = file
            .iter()
            .chain(cli).rfind(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .unwrap_or("none");
        let mut cfg = RunConfig::default();
        for (k, v) in preset_pairs(preset)? {
            cfg.set(k, v)?;
        }
        for (k, v) in file.iter().chain(cli) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (if any) and resolve with `cli` on top.
    pub fn load(path: Option<&Path>, cli: &[(String, String)]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                parse_pairs(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        RunConfig::resolve(&file, cli)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = slot(key)?;
        self.values[i] = value.to_string();
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[slot(key).expect("known key")]
    }

    fn parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse '{raw}'")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!(
                "{key}: expected true or false, got '{other}'"
            ))),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.get(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse '{p}' in '{raw}'")))
            })
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed").unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    /// Path from an `input.*` key, defaulting to `<out>/<file>`.
    pub fn input_path(&self, key: &str, file: &str) -> PathBuf {
        match self.get(key) {
            "auto" | "" => self.out_dir().join(file),
            p => PathBuf::from(p),
        }
    }

    /// `key=value` lines in table order.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for ((k, _, _), v) in KEYS.iter().zip(&self.values) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parse every typed section once so bad values fail before any work.
    pub fn validate(&self) -> Result<()> {
        match self.get("dataset") {
            "mnist-mini" | "gauss" | "idx" | "cifar" => {}
            other => return Err(Error::Config(format!("dataset: unknown '{other}'"))),
        }
        self.u64("seed")?;
        self.usize("data.n")?;
        self.usize("data.side")?;
        self.usize("data.crop")?;
        self.usize_list("data.classes")?;
        self.synth_spec()?.validate()?;
        self.gan_config()?.validate()?;
        let f = self.f64("feature_dropout")?;
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!(
                "feature_dropout must lie in [0, 1), got {f}"
            )));
        }
        self.cluster_config()?.validate()?;
        crate::features::FeatureNorm::parse(self.get("feature_norm"))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let k = self.usize("gauss.k")?;
        let weights = match self.get("gauss.weights") {
            "uniform" => vec![1.0 / k as f64; k],
            raw => raw
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("gauss.weights: cannot parse '{raw}'")))?,
        };
        Ok(SynthSpec {
            k,
            dim: self.usize("gauss.dim")?,
            means: None,
            separation: self.f64("gauss.separation")?,
            std: self.f64("gauss.std")?,
            weights,
            n: self.usize("data.n")?,
            seed: self.seed().wrapping_add(SEED_DATA),
        })
    }

    pub fn gan_config(&self) -> Result<GanConfig> {
        Ok(GanConfig {
            arch: self.get("arch").to_string(),
            latent_dim: self.usize("latent_dim")?,
            batch_size: self.usize("gan_batch")?,
            iters: self.usize("gan_iters")?,
            lr: self.f64("gan_lr")?,
            beta1: self.f64("gan_beta1")?,
            init_std: self.f64("gan_init_std")?,
            d_dropout: self.f64("d_dropout")?,
            leaky_slope: self.f64("leaky_slope")?,
            tau: self.f64("tau")?,
            sobel: self.bool("sobel")?,
            seed: self.seed().wrapping_add(SEED_GAN),
        })
    }

    /// Head list from `k`, `k_over`, the head counts and the tolerances.
    pub fn heads(&self) -> Result<Vec<HeadSpec>> {
        let k = self.usize("k")?;
        let kp = match self.get("k_over") {
            "auto" => 5 * k,
            _ => self.usize("k_over")?,
        };
        let delta = match self.get("delta") {
            "auto" => 1e-4 * (k as f64).ln(),
            _ => self.f64("delta")?,
        };
        let delta_over = match self.get("delta_over") {
            "auto" => 1e-2 * (kp as f64).ln(),
            _ => self.f64("delta_over")?,
        };
        let mut heads: Vec<HeadSpec> = (0..self.usize("primary_heads")?)
            .map(|_| HeadSpec::primary(k, delta))
            .collect();
        heads.extend(
            (0..self.usize("overcluster_heads")?).map(|_| HeadSpec::overcluster(kp, delta_over)),
        );
        if heads
            .iter()
            .all(|h| h.role != crate::cluster::HeadRole::Primary)
        {
            return Err(Error::Config("primary_heads must be at least 1".into()));
        }
        Ok(heads)
    }

    pub fn cluster_config(&self) -> Result<ClusterConfig> {
        let norm = match self.get("norm_rule") {
            "l2" => NormRule::L2,
            "squared" => NormRule::Squared,
            other => return Err(Error::Config(format!("norm_rule: unknown '{other}'"))),
        };
        let vat_mode = match self.get("vat_mode") {
            "shared" => VatMode::Shared,
            "per-head" | "perhead" => VatMode::PerHead,
            other => return Err(Error::Config(format!("vat_mode: unknown '{other}'"))),
        };
        Ok(ClusterConfig {
            hidden: self.usize_list("cluster_hidden")?,
            heads: self.heads()?,
            init_std: self.f64("cluster_init_std")?,
            lr: self.f64("cluster_lr")?,
            beta1: self.f64("cluster_beta1")?,
            batch_size: self.usize("cluster_batch")?,
            epochs: self.usize("cluster_epochs")?,
            lambda: self.f64("lambda")?,
            perturb: PerturbSpec {
                alpha_r: self.f64("alpha_r")?,
                alpha_adv: self.f64("alpha_adv")?,
                replicas: self.usize("replicas")?,
                norm,
            },
            vat_mode,
            terms: Terms {
                vat: self.bool("use_vat")?,
                dropout: self.bool("use_dropout_term")?,
            },
            seed: self.seed().wrapping_add(SEED_CLUSTER),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = RunConfig::resolve(&[], &[]).unwrap();
        let cc = c.cluster_config().unwrap();
        assert_eq!(cc.lambda, 0.2);
        assert_eq!(cc.batch_size, 500);
        assert_eq!(cc.lr, 1e-4);
        assert_eq!(cc.heads.len(), 6);
        assert!((cc.heads[0].delta - 1e-4 * 3f64.ln()).abs() < 1e-15);
        assert_eq!(cc.heads[5].k, 15);
        assert!((cc.heads[5].delta - 1e-2 * 15f64.ln()).abs() < 1e-15);
        let g = c.gan_config().unwrap();
        assert_eq!(
            (g.lr, g.beta1, g.init_std, g.d_dropout, g.tau),
            (1e-4, 0.5, 0.02, 0.2, 20.0)
        );
        assert_eq!(c.f64("feature_dropout").unwrap(), 0.1);
    }

    #[test]
    fn precedence_is_cli_then_file_then_preset() {
        let file = pairs(&[
            ("preset", "gauss-3"),
            ("cluster_epochs", "7"),
            ("lambda", "0.5"),
        ]);
        let cli = pairs(&[("lambda", "0.3")]);
        let c = RunConfig::resolve(&file, &cli).unwrap();
        assert_eq!(c.get("dataset"), "gauss");
        assert_eq!(c.get("cluster_epochs"), "7");
        assert_eq!(c.get("lambda"), "0.3");
        assert_eq!(c.get("cluster_lr"), "3e-3");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::resolve(&pairs(&[("lamda", "0.2")]), &[]).is_err());
        assert!(RunConfig::resolve(&[], &pairs(&[("k", "three")])).is_err());
        assert!(RunConfig::resolve(&[], &pairs(&[("preset", "huge")])).is_err());
        assert!(RunConfig::resolve(&[], &pairs(&[("feature_dropout", "1.0")])).is_err());
        assert!(RunConfig::resolve(&[], &pairs(&[("primary_heads", "0")])).is_err());
        assert!(parse_pairs("a=1\nnonsense\n", "f").is_err());
        assert!(parse_set("novalue").is_err());
    }

    #[test]
    fn echo_reparses_to_the_same_table() {
        let c = RunConfig::resolve(
            &pairs(&[("preset", "mnist-mini")]),
            &pairs(&[("seed", "9")]),
        )
        .unwrap();
        let again = RunConfig::resolve(&parse_pairs(&c.echo(), "echo").unwrap(), &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.echo().lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines() {
        let p = parse_pairs("# top\n\nk = 4 # trailing\n", "f").unwrap();
        assert_eq!(p, pairs(&[("k", "4")]));
    }
}
