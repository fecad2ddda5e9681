//! The merged run configuration: model, training, augmentation and data
//! settings in one flat `key=value` namespace.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mkis_core::data::AugmentConfig;
use mkis_core::kv::{KvError, KvMap};
use mkis_core::training::AdamConfig;
use mkis_core::{ModelConfig, TrainConfig};

use crate::error::CliError;

/// File name of the echoed configuration inside the output directory.
pub const RESOLVED_NAME: &str = "resolved.cfg";

const RUN_KEYS: &[&str] = &[
    "run.seed",
    "run.threads",
    "run.f64",
    "run.out",
    "data.train_manifest",
    "data.test_manifest",
    "data.augment",
    "train.learning_rate",
    "train.beta1",
    "train.beta2",
    "train.adam_epsilon",
    "train.epochs",
    "train.max_steps",
    "train.batch_size",
    "train.lr_decay",
    "train.checkpoint_interval",
    "train.patch",
    "train.prefetch",
    "train.deterministic",
    "augment.rotations",
    "augment.brightness_variants",
    "augment.gain_range",
    "augment.gain_exclusion",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    /// Train on the augmented expansion of the training manifest.
    pub use_augmentation: bool,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Seeds weight initialisation, shuffling, dropout and augmentation.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub f64: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            use_augmentation: true,
            train_manifest: None,
            test_manifest: None,
            seed: 0,
            threads: 0,
            f64: false,
            out: PathBuf::from("mkis-out"),
        }
    }
}

fn known_keys() -> Vec<&'static str> {
    ModelConfig::KEYS.iter().chain(RUN_KEYS).copied().collect()
}

/// `none` or a value.
fn optional<T: FromStr>(map: &KvMap, key: &str) -> Result<Option<Option<T>>, KvError>
where
    T::Err: Display,
{
    match map.get(key) {
        None => Ok(None),
        Some("none") => Ok(Some(None)),
        Some(_) => Ok(Some(map.parsed(key)?)),
    }
}

fn show<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn pair(map: &KvMap, key: &str) -> Result<Option<(f64, f64)>, KvError> {
    match map.list::<f64>(key)? {
        None => Ok(None),
        Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
        Some(v) => Err(KvError::Value {
            key: key.to_string(),
            value: format!("{v:?}"),
            message: "expected two comma-separated numbers".into(),
        }),
    }
}

/// Parses `HxW`, e.g. `584x565`.
pub fn parse_resolution(text: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("resolution {text:?} is not of the form HxW"));
    let (h, w) = text.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn resolution_key(map: &KvMap, key: &str) -> Result<Option<Option<(usize, usize)>>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some("none") => Ok(Some(None)),
        Some(v) => parse_resolution(v)
            .map(|r| Some(Some(r)))
            .map_err(|e| CliError::Config(format!("{key}: {e}"))),
    }
}

fn absolute(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl RunConfig {
    /// Defaults, then the config file, then `overrides` in order.
    ///
    /// Relative paths in the file are taken relative to the file; relative
    /// paths in overrides are taken relative to the working directory.
    pub fn resolve(config_file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let cwd = std::env::current_dir().map_err(|e| CliError::Config(format!("working directory: {e}")))?;
        let mut map = KvMap::new();
        let mut file_base = cwd.clone();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            map = KvMap::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            file_base = absolute(path, &cwd).parent().map_or(cwd.clone(), Path::to_path_buf);
        }
        map.reject_unknown(&known_keys())?;
        let mut from_override = Vec::new();
        for (k, v) in overrides {
            if !known_keys().contains(&k.as_str()) {
                return Err(KvError::UnknownKey(k.clone()).into());
            }
            map.set(k.clone(), v);
            from_override.push(k.as_str());
        }
        let mut cfg = Self::from_kv(&map)?;
        let base = |key: &str| if from_override.contains(&key) { &cwd } else { &file_base };
        cfg.train_manifest = cfg.train_manifest.map(|p| absolute(&p, base("data.train_manifest")));
        cfg.test_manifest = cfg.test_manifest.map(|p| absolute(&p, base("data.test_manifest")));
        cfg.out = absolute(&cfg.out, base("run.out"));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(map: &KvMap) -> Result<Self, CliError> {
        let mut c = RunConfig {
            model: ModelConfig::from_kv(map)?,
            ..RunConfig::default()
        };
        macro_rules! set {
            ($target:expr, $key:literal) => {
                if let Some(v) = map.parsed($key)? {
                    $target = v;
                }
            };
        }
        macro_rules! set_optional {
            ($target:expr, $key:literal) => {
                if let Some(v) = optional(map, $key)? {
                    $target = v;
                }
            };
        }
        set!(c.seed, "run.seed");
        set!(c.threads, "run.threads");
        set!(c.f64, "run.f64");
        if let Some(v) = map.get("run.out") {
            c.out = PathBuf::from(v);
        }
        set_optional!(c.train_manifest, "data.train_manifest");
        set_optional!(c.test_manifest, "data.test_manifest");
        set!(c.use_augmentation, "data.augment");

        let t = &mut c.train;
        set!(t.learning_rate, "train.learning_rate");
        let mut adam = AdamConfig::default();
        set!(adam.beta1, "train.beta1");
        set!(adam.beta2, "train.beta2");
        set!(adam.epsilon, "train.adam_epsilon");
        t.adam = adam;
        set!(t.epochs, "train.epochs");
        set_optional!(t.max_steps, "train.max_steps");
        set!(t.batch_size, "train.batch_size");
        set_optional!(t.lr_decay, "train.lr_decay");
        set_optional!(t.checkpoint_interval, "train.checkpoint_interval");
        if let Some(p) = resolution_key(map, "train.patch")? {
            t.patch = p;
        }
        set!(t.prefetch, "train.prefetch");
        set!(t.deterministic, "train.deterministic");

        let a = &mut c.augment;
        set!(a.rotations, "augment.rotations");
        set!(a.brightness_variants, "augment.brightness_variants");
        if let Some(p) = pair(map, "augment.gain_range")? {
            a.gain_range = p;
        }
        if let Some(p) = pair(map, "augment.gain_exclusion")? {
            a.gain_exclusion = p;
        }

        c.train.seed = c.seed;
        c.augment.seed = c.seed;
        if c.threads == 1 {
            c.train.deterministic = true;
        }
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("run.seed", self.seed);
        m.set("run.threads", self.threads);
        m.set("run.f64", self.f64);
        m.set("run.out", self.out.display());
        m.set("data.train_manifest", show(&self.train_manifest.as_ref().map(|p| p.display())));
        m.set("data.test_manifest", show(&self.test_manifest.as_ref().map(|p| p.display())));
        m.set("data.augment", self.use_augmentation);
        self.model.write_kv(&mut m);
        let t = &self.train;
        m.set("train.learning_rate", t.learning_rate);
        m.set("train.beta1", t.adam.beta1);
        m.set("train.beta2", t.adam.beta2);
        m.set("train.adam_epsilon", t.adam.epsilon);
        m.set("train.epochs", t.epochs);
        m.set("train.max_steps", show(&t.max_steps));
        m.set("train.batch_size", t.batch_size);
        m.set("train.lr_decay", show(&t.lr_decay));
        m.set("train.checkpoint_interval", show(&t.checkpoint_interval));
        m.set("train.patch", show(&t.patch.map(|(h, w)| format!("{h}x{w}"))));
        m.set("train.prefetch", t.prefetch);
        m.set("train.deterministic", t.deterministic);
        let a = &self.augment;
        m.set("augment.rotations", a.rotations);
        m.set("augment.brightness_variants", a.brightness_variants);
        m.set("augment.gain_range", format!("{},{}", a.gain_range.0, a.gain_range.1));
        m.set("augment.gain_exclusion", format!("{},{}", a.gain_exclusion.0, a.gain_exclusion.1));
        m
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        let (lo, hi) = self.augment.gain_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(CliError::Config(format!("augment.gain_range {lo},{hi} is not an increasing positive range")));
        }
        Ok(())
    }

    /// Writes the resolved configuration into the output directory.
    pub fn echo(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| crate::error::io_error(&self.out, e))?;
        let path = self.out.join(RESOLVED_NAME);
        let text = format!("# resolved configuration\n{}", self.to_kv());
        std::fs::write(&path, text).map_err(|e| crate::error::io_error(&path, e))?;
        Ok(path)
    }
}
