//! Run configuration: a flat `key = value` file merged with command-line
//! overrides over built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use swinecat::data::{Normalization, Preprocess, Split, StatsScope};
use swinecat::eca::EcaConfig;
use swinecat::model::NUM_STAGES;
use swinecat::train::TrainConfig;
use swinecat::ModelConfig;

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    /// `None` when the value comes from the preset or is derived.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
    }
}

pub const SCHEMA: &[Key] = &[
    key(
        "preset",
        Some("full"),
        "model preset: full (224 px) or tiny (64 px)",
    ),
    key("image_size", None, "input side in pixels"),
    key("patch_size", None, "patch side in pixels"),
    key("embed_dim", None, "channels of the first stage"),
    key("depths", None, "blocks per stage, comma separated"),
    key(
        "num_heads",
        None,
        "attention heads per stage, comma separated",
    ),
    key("window_size", None, "attention window side"),
    key(
        "mlp_ratio",
        None,
        "hidden width multiplier of the block MLP",
    ),
    key("num_classes", None, "number of output classes"),
    key(
        "eca_enabled",
        None,
        "insert ECA after every stage (true/false)",
    ),
    key("eca_gamma", None, "ECA kernel-size gamma"),
    key("eca_b", None, "ECA kernel-size offset b"),
    key(
        "eca_k",
        None,
        "fixed ECA kernel size instead of the adaptive one",
    ),
    key(
        "relative_bias",
        None,
        "use the relative position bias table (true/false)",
    ),
    key("dropout", None, "dropout probability inside blocks"),
    key(
        "seed",
        Some("0"),
        "seed for initialisation, splitting, shuffling and synthesis",
    ),
    key("lr", Some("1e-5"), "Adam learning rate"),
    key("batch_size", Some("32"), "samples per batch"),
    key(
        "patience",
        Some("3"),
        "epochs without val-loss improvement before stopping",
    ),
    key("max_epochs", Some("100"), "upper bound on training epochs"),
    key(
        "target_train_acc",
        Some("none"),
        "stop once train accuracy reaches this value",
    ),
    key(
        "prefetch",
        Some("2"),
        "batches decoded ahead of training (0 = inline)",
    ),
    key(
        "data_dir",
        None,
        "dataset directory (class folders or manifest.tsv)",
    ),
    key(
        "resize_short",
        Some("auto"),
        "short side after resizing (auto = image_size*256/224)",
    ),
    key(
        "stats_scope",
        Some("train"),
        "images used for normalisation statistics: train or all",
    ),
    key(
        "norm_mean",
        Some("auto"),
        "per-channel mean r,g,b (auto = computed)",
    ),
    key(
        "norm_std",
        Some("auto"),
        "per-channel std r,g,b (auto = computed)",
    ),
    key("name", Some("default"), "run name"),
    key("out_dir", Some("run"), "parent directory of run outputs"),
    key(
        "checkpoint",
        Some("auto"),
        "checkpoint to evaluate (auto = <out_dir>/<name>/checkpoint.bin)",
    ),
    key(
        "split",
        Some("test"),
        "split to evaluate: train, val or test",
    ),
    key("per_class", Some("10"), "synthetic images per class"),
    key("synth_size", Some("64"), "synthetic image side in pixels"),
];

pub fn schema_key(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

/// Parse `key = value` lines; `#` starts a comment line.
pub fn parse_file(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", origin.display(), n + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}: expected key = value", at())))?;
        let (k, v) = (k.trim(), v.trim());
        if schema_key(k).is_none() {
            return Err(CliError::Usage(format!("{}: unknown key {k:?}", at())));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Usage(format!("{}: duplicate key {k:?}", at())));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub resize_short: usize,
    pub stats_scope: StatsScope,
    pub norm: Option<Normalization>,
    pub name: String,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub per_class: usize,
    pub synth_size: usize,
    /// Every key with its final textual value.
    pub resolved: BTreeMap<String, String>,
}

struct Values(BTreeMap<String, String>);

impl Values {
    fn raw(&self, k: &str) -> Option<&str> {
        self.0.get(k).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, k: &str) -> Result<Option<T>, CliError> {
        self.raw(k)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("invalid value {v:?} for {k}")))
            })
            .transpose()
    }

    fn bool(&self, k: &str) -> Result<Option<bool>, CliError> {
        self.raw(k)
            .map(|v| match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(CliError::Usage(format!(
                    "invalid value {v:?} for {k}, expected true or false"
                ))),
            })
            .transpose()
    }

    fn list<T: std::str::FromStr, const N: usize>(
        &self,
        k: &str,
    ) -> Result<Option<[T; N]>, CliError> {
        let Some(v) = self.raw(k) else {
            return Ok(None);
        };
        let bad = || {
            CliError::Usage(format!(
                "invalid value {v:?} for {k}, expected {N} comma-separated numbers"
            ))
        };
        let items: Vec<T> = v
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        items.try_into().map(Some).map_err(|_| bad())
    }

    /// `auto`/`none` map to `None`.
    fn optional<T: std::str::FromStr>(&self, k: &str) -> Result<Option<T>, CliError> {
        match self.raw(k) {
            Some("auto" | "none") | None => Ok(None),
            Some(_) => self.parse(k),
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Merge defaults, then `file`, then `cli`.
    pub fn resolve(
        file: &BTreeMap<String, String>,
        cli: &BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        let mut merged: BTreeMap<String, String> = SCHEMA
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name.to_string(), d.to_string())))
            .collect();
        for (k, v) in file.iter().chain(cli) {
            if schema_key(k).is_none() {
                return Err(CliError::Usage(format!("unknown key {k:?}")));
            }
            merged.insert(k.clone(), v.clone());
        }
        let v = Values(merged);

        let seed: u64 = v.parse("seed")?.expect("default");
        let mut model = match v.raw("preset") {
            Some("full") => ModelConfig::full(),
            Some("tiny") => ModelConfig::tiny(),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown preset {other:?}, expected full or tiny"
                )))
            }
        };
        model.seed = seed;
        if let Some(x) = v.parse("image_size")? {
            model.image_size = x;
        }
        if let Some(x) = v.parse("patch_size")? {
            model.patch_size = x;
        }
        if let Some(x) = v.parse("embed_dim")? {
            model.embed_dim = x;
        }
        if let Some(x) = v.list::<usize, NUM_STAGES>("depths")? {
            model.depths = x;
        }
        if let Some(x) = v.list::<usize, NUM_STAGES>("num_heads")? {
            model.num_heads = x;
        }
        if let Some(x) = v.parse("window_size")? {
            model.window_size = x;
        }
        if let Some(x) = v.parse("mlp_ratio")? {
            model.mlp_ratio = x;
        }
        if let Some(x) = v.parse("num_classes")? {
            model.num_classes = x;
        }
        if let Some(x) = v.bool("eca_enabled")? {
            model.eca_enabled = x;
        }
        if let Some(x) = v.bool("relative_bias")? {
            model.use_relative_bias = x;
        }
        if let Some(x) = v.parse("dropout")? {
            model.dropout = x;
        }
        model.eca = EcaConfig {
            gamma: v.parse("eca_gamma")?.unwrap_or(model.eca.gamma),
            b: v.parse("eca_b")?.unwrap_or(model.eca.b),
            explicit_k: v.optional("eca_k")?.or(model.eca.explicit_k),
        };
        model.validate()?;

        let train = TrainConfig {
            learning_rate: v.parse("lr")?.expect("default"),
            batch_size: v.parse("batch_size")?.expect("default"),
            patience: v.parse("patience")?.expect("default"),
            max_epochs: v.parse("max_epochs")?.expect("default"),
            seed,
            target_train_acc: v.optional("target_train_acc")?,
            prefetch: v.parse("prefetch")?.expect("default"),
            ..TrainConfig::default()
        };
        train.validate()?;

        let resize_short = v
            .optional("resize_short")?
            .unwrap_or(Preprocess::for_image_size(model.image_size).resize_short);
        let stats_scope = StatsScope::parse(v.raw("stats_scope").expect("default"))
            .ok_or_else(|| CliError::Usage("stats_scope must be train or all".into()))?;
        let mean = v.optional_triple("norm_mean")?;
        let std = v.optional_triple("norm_std")?;
        let norm = match (mean, std) {
            (Some(m), Some(s)) => {
                if !s.iter().all(|&x| x > 0.0) {
                    return Err(CliError::Usage("norm_std entries must be positive".into()));
                }
                Some(Normalization::new(m, s))
            }
            (None, None) => None,
            _ => {
                return Err(CliError::Usage(
                    "norm_mean and norm_std must be given together".into(),
                ))
            }
        };
        let split = Split::parse(v.raw("split").expect("default"))
            .ok_or_else(|| CliError::Usage("split must be train, val or test".into()))?;
        let name = v.raw("name").expect("default").to_string();
        if name.is_empty() || name.contains(['/', '\\']) || name == ".." || name == "." {
            return Err(CliError::Usage(format!("invalid run name {name:?}")));
        }

        let mut cfg = RunConfig {
            model,
            train,
            seed,
            data_dir: v.raw("data_dir").map(PathBuf::from),
            resize_short,
            stats_scope,
            norm,
            name,
            out_dir: PathBuf::from(v.raw("out_dir").expect("default")),
            checkpoint: v
                .raw("checkpoint")
                .filter(|c| *c != "auto")
                .map(PathBuf::from),
            split,
            per_class: v.parse("per_class")?.expect("default"),
            synth_size: v.parse("synth_size")?.expect("default"),
            resolved: BTreeMap::new(),
        };
        cfg.resolved = cfg.render_map(&v);
        Ok(cfg)
    }

    fn render_map(&self, v: &Values) -> BTreeMap<String, String> {
        let m = &self.model;
        let mut out = v.0.clone();
        let mut set = |k: &str, s: String| {
            out.insert(k.to_string(), s);
        };
        set("image_size", m.image_size.to_string());
        set("patch_size", m.patch_size.to_string());
        set("embed_dim", m.embed_dim.to_string());
        set("depths", join(&m.depths));
        set("num_heads", join(&m.num_heads));
        set("window_size", m.window_size.to_string());
        set("mlp_ratio", m.mlp_ratio.to_string());
        set("num_classes", m.num_classes.to_string());
        set("eca_enabled", m.eca_enabled.to_string());
        set("eca_gamma", m.eca.gamma.to_string());
        set("eca_b", m.eca.b.to_string());
        set(
            "eca_k",
            m.eca.explicit_k.map_or("auto".into(), |k| k.to_string()),
        );
        set("relative_bias", m.use_relative_bias.to_string());
        set("dropout", m.dropout.to_string());
        set("resize_short", self.resize_short.to_string());
        if let Some(n) = &self.norm {
            set("norm_mean", join(&n.mean));
            set("norm_std", join(&n.std));
        }
        out
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            resize_short: self.resize_short,
            crop: self.model.image_size,
            norm: self.norm.unwrap_or(Normalization::identity()),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    /// Record the normalisation actually used so that the resolved file
    /// reproduces it.
    pub fn set_norm(&mut self, norm: Normalization) {
        self.norm = Some(norm);
        self.resolved.insert("norm_mean".into(), join(&norm.mean));
        self.resolved.insert("norm_std".into(), join(&norm.std));
    }

    /// Every schema key as `key = value`, in schema order; keys without a
    /// value (such as an unset `data_dir`) are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in SCHEMA {
            if let Some(v) = self.resolved.get(k.name) {
                let _ = writeln!(out, "{} = {}", k.name, v);
            }
        }
        out
    }
}

impl Values {
    fn optional_triple(&self, k: &str) -> Result<Option<[f64; 3]>, CliError> {
        match self.raw(k) {
            Some("auto") | None => Ok(None),
            Some(_) => self.list::<f64, 3>(k),
        }
    }
}
