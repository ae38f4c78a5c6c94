//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, unknown
//! keys are rejected, and [`RunConfig::to_text`] writes a canonical form that
//! parses back to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use oat_core::attacks::{AttackKind, AttackSpec};
use oat_core::data::{load_idx, synth_glyphs, Dataset, GlyphStyle};
use oat_core::training::{LambdaDistribution, TrainConfig, TrainMode};
use oat_core::{BnStyle, EncodingScheme};

use crate::error::{CliError, Result};

/// Where images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Procedural glyphs.
    Synth {
        train_per_class: usize,
        test_per_class: usize,
        size: usize,
        classes: usize,
        noise: f64,
        style: GlyphStyle,
        seed: u64,
    },
    /// IDX files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// Training attack, kept separate from [`AttackSpec`] so defaults survive a mode change.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSettings {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub mu: f64,
    pub random_start: bool,
}

impl AttackSettings {
    pub fn spec(&self) -> AttackSpec {
        match self.kind {
            AttackKind::Fgsm => AttackSpec::fgsm(self.epsilon),
            AttackKind::Pgd => {
                let mut s = AttackSpec::pgd(self.epsilon, self.step_size, self.steps);
                s.random_start = self.random_start;
                s
            }
            AttackKind::MiFgsm => AttackSpec::mi_fgsm(self.epsilon, self.steps, self.mu),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: String,
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    /// Empty means uniform.
    pub lambda_weights: Vec<f64>,
    pub bn: BnStyle,
    pub encoder: EncodingScheme,
    /// Empty means the mode default.
    pub widths: Vec<f64>,
    pub attack: AttackSettings,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
    pub data: DataSource,
    pub output: PathBuf,
}

/// Documented keys with their defaults, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "oat"),
    ("lambda", "1"),
    ("lambdas", "0,0.1,0.2,0.3,0.4,1"),
    ("lambda_weights", ""),
    ("bn", "dual"),
    ("encoder", "RO-128"),
    ("widths", ""),
    ("attack", "pgd"),
    ("epsilon", "8/255"),
    ("steps", "7"),
    ("step_size", "2/255"),
    ("mu", "1"),
    ("random_start", "true"),
    ("epochs", "30"),
    ("batch_size", "64"),
    ("lr", "0.05"),
    ("momentum", "0.9"),
    ("weight_decay", "5e-4"),
    ("seed", "0"),
    ("max_steps", ""),
    ("dataset", "synth"),
    ("synth_train_per_class", "600"),
    ("synth_test_per_class", "200"),
    ("synth_size", "16"),
    ("synth_classes", "10"),
    ("synth_noise", "0.15"),
    ("synth_background", "0"),
    ("synth_contrast", "1"),
    ("synth_jitter", "2"),
    ("synth_cue", "0"),
    ("synth_agreement", "1"),
    ("data_seed", "0"),
    ("train_images", ""),
    ("train_labels", ""),
    ("test_images", ""),
    ("test_labels", ""),
    ("output", "run"),
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(std::iter::empty()).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Parses configuration text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config {
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(pairs.into_iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut text = self.to_text();
        for o in overrides {
            if !o.contains('=') {
                return Err(CliError::Usage(format!("override {o:?} is not key=value")));
            }
            text.push_str(o);
            text.push('\n');
        }
        Self::parse(&text)
    }

    /// `(line, key, value)` triples; later keys win, line 0 means "not from a file".
    fn from_pairs(pairs: impl Iterator<Item = (usize, String, String)>) -> Result<Self> {
        let mut values: Vec<(&str, String, usize)> =
            KEYS.iter().map(|(k, v)| (*k, v.to_string(), 0)).collect();
        for (line, k, v) in pairs {
            let slot = values
                .iter_mut()
                .find(|(name, _, _)| *name == k)
                .ok_or_else(|| CliError::Config {
                    line,
                    message: format!("unknown key {k:?}"),
                })?;
            slot.1 = v;
            slot.2 = line;
        }
        let get = |key: &str| -> (&str, usize) {
            let (_, v, l) = values
                .iter()
                .find(|(k, _, _)| *k == key)
                .expect("known key");
            (v.as_str(), *l)
        };
        let bad = |key: &str, msg: String| CliError::Config {
            line: get(key).1,
            message: format!("{key}: {msg}"),
        };
        let num = |key: &str| -> Result<f64> { parse_number(get(key).0).map_err(|m| bad(key, m)) };
        let int = |key: &str| -> Result<usize> {
            get(key)
                .0
                .parse::<usize>()
                .map_err(|e| bad(key, e.to_string()))
        };
        let list =
            |key: &str| -> Result<Vec<f64>> { parse_list(get(key).0).map_err(|m| bad(key, m)) };
        let path = |key: &str| PathBuf::from(get(key).0);

        let data = match get("dataset").0 {
            "synth" => DataSource::Synth {
                train_per_class: int("synth_train_per_class")?,
                test_per_class: int("synth_test_per_class")?,
                size: int("synth_size")?,
                classes: int("synth_classes")?,
                noise: num("synth_noise")?,
                style: GlyphStyle {
                    background: num("synth_background")?,
                    contrast: num("synth_contrast")?,
                    jitter: get("synth_jitter")
                        .0
                        .parse::<i64>()
                        .map_err(|e| bad("synth_jitter", e.to_string()))?,
                    cue: num("synth_cue")?,
                    agreement: num("synth_agreement")?,
                },
                seed: int("data_seed")? as u64,
            },
            "idx" => {
                for k in ["train_images", "train_labels", "test_images", "test_labels"] {
                    if get(k).0.is_empty() {
                        return Err(bad(k, "required when dataset = idx".into()));
                    }
                }
                DataSource::Idx {
                    train_images: path("train_images"),
                    train_labels: path("train_labels"),
                    test_images: path("test_images"),
                    test_labels: path("test_labels"),
                }
            }
            other => {
                return Err(bad(
                    "dataset",
                    format!("expected synth or idx, got {other:?}"),
                ))
            }
        };
        let random_start = match get("random_start").0 {
            "true" => true,
            "false" => false,
            other => {
                return Err(bad(
                    "random_start",
                    format!("expected true or false, got {other:?}"),
                ))
            }
        };
        let max_steps = match get("max_steps").0 {
            "" => None,
            _ => Some(int("max_steps")?),
        };
        let cfg = RunConfig {
            mode: get("mode").0.to_string(),
            lambda: num("lambda")?,
            lambdas: list("lambdas")?,
            lambda_weights: list("lambda_weights")?,
            bn: get("bn")
                .0
                .parse()
                .map_err(|e: oat_core::Error| bad("bn", e.to_string()))?,
            encoder: get("encoder")
                .0
                .parse()
                .map_err(|e: oat_core::Error| bad("encoder", e.to_string()))?,
            widths: list("widths")?,
            attack: AttackSettings {
                kind: get("attack")
                    .0
                    .parse()
                    .map_err(|e: oat_core::Error| bad("attack", e.to_string()))?,
                epsilon: num("epsilon")?,
                steps: int("steps")?,
                step_size: num("step_size")?,
                mu: num("mu")?,
                random_start,
            },
            epochs: int("epochs")?,
            batch_size: int("batch_size")?,
            lr: num("lr")?,
            momentum: num("momentum")?,
            weight_decay: num("weight_decay")?,
            seed: int("seed")? as u64,
            max_steps,
            data,
            output: path("output"),
        };
        cfg.train_config().map_err(|e| match e {
            CliError::Core(e) => CliError::Config {
                line: 0,
                message: e.to_string(),
            },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Canonical text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Canonical `(key, value)` pairs in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let a = &self.attack;
        let mut m: Vec<(&'static str, String)> = vec![
            ("mode", self.mode.clone()),
            ("lambda", self.lambda.to_string()),
            ("lambdas", join(&self.lambdas)),
            ("lambda_weights", join(&self.lambda_weights)),
            ("bn", self.bn.to_string()),
            ("encoder", self.encoder.to_string()),
            ("widths", join(&self.widths)),
            ("attack", attack_key(a.kind).to_string()),
            ("epsilon", a.epsilon.to_string()),
            ("steps", a.steps.to_string()),
            ("step_size", a.step_size.to_string()),
            ("mu", a.mu.to_string()),
            ("random_start", a.random_start.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            (
                "max_steps",
                self.max_steps.map(|s| s.to_string()).unwrap_or_default(),
            ),
        ];
        let defaults = |k: &str| {
            KEYS.iter()
                .find(|(n, _)| *n == k)
                .expect("known key")
                .1
                .to_string()
        };
        let mut data: Vec<(&'static str, String)> =
            KEYS[20..].iter().map(|(k, _)| (*k, defaults(k))).collect();
        let mut set =
            |k: &str, v: String| data.iter_mut().find(|(n, _)| *n == k).expect("known key").1 = v;
        match &self.data {
            DataSource::Synth {
                train_per_class,
                test_per_class,
                size,
                classes,
                noise,
                style,
                seed,
            } => {
                set("dataset", "synth".into());
                set("synth_train_per_class", train_per_class.to_string());
                set("synth_test_per_class", test_per_class.to_string());
                set("synth_size", size.to_string());
                set("synth_classes", classes.to_string());
                set("synth_noise", noise.to_string());
                set("synth_background", style.background.to_string());
                set("synth_contrast", style.contrast.to_string());
                set("synth_jitter", style.jitter.to_string());
                set("synth_cue", style.cue.to_string());
                set("synth_agreement", style.agreement.to_string());
                set("data_seed", seed.to_string());
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                set("dataset", "idx".into());
                set("train_images", train_images.display().to_string());
                set("train_labels", train_labels.display().to_string());
                set("test_images", test_images.display().to_string());
                set("test_labels", test_labels.display().to_string());
            }
        }
        set("output", self.output.display().to_string());
        m.extend(data);
        m
    }

    pub fn train_mode(&self) -> Result<TrainMode> {
        Ok(TrainMode::parse(&self.mode, self.lambda)?)
    }

    /// The core training configuration described by this run.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mode = self.train_mode()?;
        let mut cfg = TrainConfig::new(mode);
        if mode.conditioned() {
            cfg.lambda_dist = if self.lambda_weights.is_empty() {
                LambdaDistribution::uniform(&self.lambdas)?
            } else {
                LambdaDistribution::new(&self.lambdas, &self.lambda_weights)?
            };
        }
        cfg.bn_style = self.bn;
        cfg.encoding = self.encoder;
        if !self.widths.is_empty() {
            cfg.widths = self.widths.clone();
        }
        cfg.attack = self.attack.spec();
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.lr = self.lr;
        cfg.momentum = self.momentum;
        cfg.weight_decay = self.weight_decay;
        cfg.seed = self.seed;
        cfg.max_steps = self.max_steps;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(train, test)` splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synth {
                train_per_class,
                test_per_class,
                size,
                classes,
                noise,
                style,
                seed,
            } => {
                let train = synth_glyphs(*train_per_class, *classes, *size, *noise, *seed, *style)?;
                let mut test = synth_glyphs(
                    *test_per_class,
                    *classes,
                    *size,
                    *noise,
                    test_seed(*seed),
                    *style,
                )?;
                test.split = "test".into();
                Ok((train, test))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                train.split = "train".into();
                let mut test = load_idx(test_images, test_labels)?;
                test.split = "test".into();
                Ok((train, test))
            }
        }
    }

    /// Test split only.
    pub fn load_test(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synth {
                test_per_class,
                size,
                classes,
                noise,
                style,
                seed,
                ..
            } => {
                let mut test = synth_glyphs(
                    *test_per_class,
                    *classes,
                    *size,
                    *noise,
                    test_seed(*seed),
                    *style,
                )?;
                test.split = "test".into();
                Ok(test)
            }
            DataSource::Idx { .. } => Ok(self.load_data()?.1),
        }
    }

    /// Training `λ` support (the point mass for fixed-`λ` modes).
    pub fn lambda_grid(&self) -> Result<Vec<f64>> {
        let mode = self.train_mode()?;
        Ok(match mode.fixed_lambda() {
            Some(l) => vec![l],
            None => self.train_config()?.lambda_dist.support().to_vec(),
        })
    }
}

/// Seed of the synthetic test split, disjoint from the training stream.
fn test_seed(seed: u64) -> u64 {
    seed ^ 0x7E57_0000_0000_0000
}

fn attack_key(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::Fgsm => "fgsm",
        AttackKind::Pgd => "pgd",
        AttackKind::MiFgsm => "mifgsm",
    }
}

/// A decimal number or an `a/b` fraction.
pub fn parse_number(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad number {s:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad number {s:?}"))?;
            if b == 0.0 {
                return Err(format!("division by zero in {s:?}"));
            }
            a / b
        }
        None => s.parse().map_err(|_| format!("bad number {s:?}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite number {s:?}"))
    }
}

/// Comma-separated numbers; empty input is an empty list.
pub fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_number).collect()
}
