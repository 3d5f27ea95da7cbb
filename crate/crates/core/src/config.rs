//! Flat `key = value` configuration files for training and data synthesis.
//!
//! Lines starting with `#` (and trailing `# ...`) are comments. Lists use
//! commas; per-stage lists separate stages with `;` (e.g. `32,32;64;64`).
//! Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key = value` pairs, consumed field by field.
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((line, v)) = self.take_raw(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: invalid value {v:?} for {key}")))?;
        }
        Ok(())
    }

    pub fn take_opt<T: FromStr>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()> {
        if let Some((line, v)) = self.take_raw(key) {
            if v.is_empty() || v == "none" {
                *slot = None;
            } else {
                *slot = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("line {line}: invalid value {v:?} for {key}")))?,
                );
            }
        }
        Ok(())
    }

    pub fn take_list(&mut self, key: &str, slot: &mut Vec<usize>) -> Result<()> {
        if let Some((line, v)) = self.take_raw(key) {
            *slot = parse_list(&v)
                .ok_or_else(|| Error::Config(format!("line {line}: invalid list {v:?} for {key}")))?;
        }
        Ok(())
    }

    pub fn take_stages(&mut self, key: &str, slot: &mut Vec<Vec<usize>>) -> Result<()> {
        if let Some((line, v)) = self.take_raw(key) {
            *slot = v
                .split(';')
                .map(parse_list)
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Config(format!("line {line}: invalid stage list {v:?} for {key}")))?;
        }
        Ok(())
    }

    /// Errors on any key no field consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((k, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
        }
        Ok(())
    }
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn join_stages(v: &[Vec<usize>]) -> String {
    v.iter().map(|s| join(s)).collect::<Vec<_>>().join(";")
}

/// Every hyperparameter of model construction, training and evaluation.
///
/// `Default` is the full-scale profile; [`TrainConfig::desk`] is the reduced
/// CPU profile.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Only `cosine` is supported.
    pub scheduler: String,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub n_images: usize,
    pub iam_layers: usize,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub cosine_scale: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed_params: u64,
    pub seed_data: u64,
    pub seed_sampler: u64,
    pub deterministic: bool,

    pub num_points: usize,
    pub image_side: usize,
    /// Widths of the first three convolution stages; the fourth is `image_channels`.
    pub image_widths: Vec<usize>,
    /// Image feature channels `D`; `None` means equal to `channels`.
    pub image_channels: Option<usize>,
    pub stage_points: Vec<usize>,
    pub stage_neighbors: Vec<usize>,
    pub stage_mlp: Vec<Vec<usize>>,
    /// Feature-propagation MLP per level, deepest level first.
    pub fp_mlp: Vec<Vec<usize>>,
    /// ADM attention width `d`; `None` means equal to `channels`.
    pub adm_dim: Option<usize>,
    pub fps_start: usize,
    /// When set, the FPS start index is drawn from this seed per cloud.
    pub fps_seed: Option<u64>,

    pub checkpoint_every: usize,
    pub eval_after_train: bool,
    /// Use the max-normalised SIM variant in reports.
    pub sim_max_normalized: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 80,
            scheduler: "cosine".into(),
            max_steps: None,
            n_images: 5,
            iam_layers: 4,
            tokens: 16,
            channels: 64,
            heads: 4,
            cosine_scale: 10.0,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            seed_params: 0,
            seed_data: 0,
            seed_sampler: 0,
            deterministic: false,
            num_points: 2048,
            image_side: 224,
            image_widths: vec![16, 32, 64],
            image_channels: None,
            stage_points: vec![512, 128, 64],
            stage_neighbors: vec![32, 32, 32],
            stage_mlp: vec![vec![320], vec![512], vec![512]],
            fp_mlp: vec![vec![256], vec![128], vec![128]],
            adm_dim: None,
            fps_start: 0,
            fps_seed: None,
            checkpoint_every: 10,
            eval_after_train: true,
            sim_max_normalized: false,
        }
    }
}

impl TrainConfig {
    /// Reduced profile that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 4,
            epochs: 10,
            n_images: 5,
            iam_layers: 4,
            num_points: 512,
            image_side: 32,
            stage_points: vec![128, 32, 16],
            stage_neighbors: vec![16, 16, 8],
            stage_mlp: vec![vec![32, 32], vec![64, 64], vec![64]],
            fp_mlp: vec![vec![64], vec![64], vec![64]],
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    /// Smallest configuration exercised by gradient checks.
    pub fn tiny() -> Self {
        Self {
            batch_size: 1,
            epochs: 1,
            n_images: 2,
            iam_layers: 2,
            tokens: 4,
            channels: 8,
            heads: 2,
            num_points: 64,
            image_side: 16,
            image_widths: vec![4, 4, 8],
            stage_points: vec![16, 8, 4],
            stage_neighbors: vec![4, 4, 3],
            stage_mlp: vec![vec![8], vec![8], vec![8]],
            fp_mlp: vec![vec![8], vec![8], vec![8]],
            checkpoint_every: 0,
            ..Self::desk()
        }
    }

    pub fn image_dim(&self) -> usize {
        self.image_channels.unwrap_or(self.channels)
    }

    pub fn attention_dim(&self) -> usize {
        self.adm_dim.unwrap_or(self.channels)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(KeyValues::parse(text)?, Self::default())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::read(path)?, Self::default())
    }

    /// Applies `kv` on top of `base`, then validates.
    pub fn from_key_values(mut kv: KeyValues, base: Self) -> Result<Self> {
        let mut c = base;
        // `profile = desk` selects the desk defaults before other keys apply.
        let mut profile = String::new();
        kv.take("profile", &mut profile)?;
        match profile.as_str() {
            "" => {}
            "desk" => c = Self::desk(),
            "full" => c = Self::default(),
            "tiny" => c = Self::tiny(),
            other => return Err(Error::Config(format!("unknown profile {other:?}"))),
        }
        kv.take("learning_rate", &mut c.learning_rate)?;
        kv.take("adam_beta1", &mut c.adam_beta1)?;
        kv.take("adam_beta2", &mut c.adam_beta2)?;
        kv.take("adam_eps", &mut c.adam_eps)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("epochs", &mut c.epochs)?;
        kv.take("scheduler", &mut c.scheduler)?;
        kv.take_opt("max_steps", &mut c.max_steps)?;
        kv.take("n_images", &mut c.n_images)?;
        kv.take("iam_layers", &mut c.iam_layers)?;
        kv.take("tokens", &mut c.tokens)?;
        kv.take("channels", &mut c.channels)?;
        kv.take("heads", &mut c.heads)?;
        kv.take("cosine_scale", &mut c.cosine_scale)?;
        kv.take("lambda1", &mut c.lambda1)?;
        kv.take("lambda2", &mut c.lambda2)?;
        kv.take("lambda3", &mut c.lambda3)?;
        kv.take("focal_alpha", &mut c.focal_alpha)?;
        kv.take("focal_gamma", &mut c.focal_gamma)?;
        kv.take("seed_params", &mut c.seed_params)?;
        kv.take("seed_data", &mut c.seed_data)?;
        kv.take("seed_sampler", &mut c.seed_sampler)?;
        kv.take("deterministic", &mut c.deterministic)?;
        kv.take("num_points", &mut c.num_points)?;
        kv.take("image_side", &mut c.image_side)?;
        kv.take_list("image_widths", &mut c.image_widths)?;
        kv.take_opt("image_channels", &mut c.image_channels)?;
        kv.take_list("stage_points", &mut c.stage_points)?;
        kv.take_list("stage_neighbors", &mut c.stage_neighbors)?;
        kv.take_stages("stage_mlp", &mut c.stage_mlp)?;
        kv.take_stages("fp_mlp", &mut c.fp_mlp)?;
        kv.take_opt("adm_dim", &mut c.adm_dim)?;
        kv.take("fps_start", &mut c.fps_start)?;
        kv.take_opt("fps_seed", &mut c.fps_seed)?;
        kv.take("checkpoint_every", &mut c.checkpoint_every)?;
        kv.take("eval_after_train", &mut c.eval_after_train)?;
        kv.take("sim_max_normalized", &mut c.sim_max_normalized)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("n_images", self.n_images),
            ("iam_layers", self.iam_layers),
            ("tokens", self.tokens),
            ("channels", self.channels),
            ("heads", self.heads),
            ("num_points", self.num_points),
            ("image_side", self.image_side),
            ("image_channels", self.image_dim()),
            ("adm_dim", self.attention_dim()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("learning_rate", self.learning_rate),
            ("cosine_scale", self.cosine_scale),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative and finite")));
            }
        }
        if self.scheduler != "cosine" {
            return Err(Error::Config(format!(
                "unsupported scheduler {:?}; only cosine is available",
                self.scheduler
            )));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.image_side % 16 != 0 {
            return Err(Error::Config(format!(
                "image_side {} not divisible by 16",
                self.image_side
            )));
        }
        if self.image_widths.len() != 3 || self.image_widths.contains(&0) {
            return Err(Error::Config("image_widths needs three positive widths".into()));
        }
        let s = self.stage_points.len();
        if s == 0 || self.stage_neighbors.len() != s || self.stage_mlp.len() != s || self.fp_mlp.len() != s {
            return Err(Error::Config(
                "stage_points, stage_neighbors, stage_mlp and fp_mlp must have one entry per stage".into(),
            ));
        }
        let mut prev = self.num_points;
        for (i, (&k, &nb)) in self.stage_points.iter().zip(&self.stage_neighbors).enumerate() {
            if k == 0 || k >= prev && !(i == 0 && k == prev) {
                return Err(Error::Config(format!(
                    "stage {i}: point count {k} must be positive and below the previous {prev}"
                )));
            }
            if nb == 0 || nb > prev {
                return Err(Error::Config(format!(
                    "stage {i}: neighbors {nb} must lie in [1, {prev}]"
                )));
            }
            prev = k;
        }
        for (name, stages) in [("stage_mlp", &self.stage_mlp), ("fp_mlp", &self.fp_mlp)] {
            if stages.iter().any(|d| d.is_empty() || d.contains(&0)) {
                return Err(Error::Config(format!("{name}: every stage needs positive widths")));
            }
        }
        let out = self.fp_mlp.last().and_then(|d| d.last()).copied().unwrap_or(0);
        if out < 2 {
            return Err(Error::Config("final fp_mlp width must be at least 2".into()));
        }
        if self.fps_start >= self.num_points {
            return Err(Error::Config("fps_start must index a point".into()));
        }
        Ok(())
    }

    /// Serialises every field; `from_text` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "scheduler = {}", self.scheduler);
        let _ = writeln!(s, "max_steps = {}", opt(self.max_steps.map(|v| v.to_string())));
        let _ = writeln!(s, "n_images = {}", self.n_images);
        let _ = writeln!(s, "iam_layers = {}", self.iam_layers);
        let _ = writeln!(s, "tokens = {}", self.tokens);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "cosine_scale = {}", self.cosine_scale);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "lambda3 = {}", self.lambda3);
        let _ = writeln!(s, "focal_alpha = {}", self.focal_alpha);
        let _ = writeln!(s, "focal_gamma = {}", self.focal_gamma);
        let _ = writeln!(s, "seed_params = {}", self.seed_params);
        let _ = writeln!(s, "seed_data = {}", self.seed_data);
        let _ = writeln!(s, "seed_sampler = {}", self.seed_sampler);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "num_points = {}", self.num_points);
        let _ = writeln!(s, "image_side = {}", self.image_side);
        let _ = writeln!(s, "image_widths = {}", join(&self.image_widths));
        let _ = writeln!(s, "image_channels = {}", opt(self.image_channels.map(|v| v.to_string())));
        let _ = writeln!(s, "stage_points = {}", join(&self.stage_points));
        let _ = writeln!(s, "stage_neighbors = {}", join(&self.stage_neighbors));
        let _ = writeln!(s, "stage_mlp = {}", join_stages(&self.stage_mlp));
        let _ = writeln!(s, "fp_mlp = {}", join_stages(&self.fp_mlp));
        let _ = writeln!(s, "adm_dim = {}", opt(self.adm_dim.map(|v| v.to_string())));
        let _ = writeln!(s, "fps_start = {}", self.fps_start);
        let _ = writeln!(s, "fps_seed = {}", opt(self.fps_seed.map(|v| v.to_string())));
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "eval_after_train = {}", self.eval_after_train);
        let _ = writeln!(s, "sim_max_normalized = {}", self.sim_max_normalized);
        s
    }
}

/// Parameters of the synthetic dataset generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub points_per_cloud: usize,
    pub images_per_sample: usize,
    pub image_side: usize,
    pub num_object_classes: usize,
    pub num_affordances: usize,
    /// When set, also write a class-stratified seen split with this train ratio.
    pub seen_train_ratio: Option<f64>,
    /// When nonempty, also write an unseen split holding out these classes.
    pub unseen_classes: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 8,
            points_per_cloud: 512,
            images_per_sample: 2,
            image_side: 32,
            num_object_classes: 4,
            num_affordances: 4,
            seen_train_ratio: None,
            unseen_classes: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(KeyValues::parse(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_key_values(KeyValues::read(path)?)
    }

    fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take("num_samples", &mut c.num_samples)?;
        kv.take("points_per_cloud", &mut c.points_per_cloud)?;
        kv.take("images_per_sample", &mut c.images_per_sample)?;
        kv.take("image_side", &mut c.image_side)?;
        kv.take("num_object_classes", &mut c.num_object_classes)?;
        kv.take("num_affordances", &mut c.num_affordances)?;
        kv.take_opt("seen_train_ratio", &mut c.seen_train_ratio)?;
        kv.take_list("unseen_classes", &mut c.unseen_classes)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_samples", self.num_samples),
            ("points_per_cloud", self.points_per_cloud),
            ("images_per_sample", self.images_per_sample),
            ("image_side", self.image_side),
            ("num_object_classes", self.num_object_classes),
            ("num_affordances", self.num_affordances),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_object_classes > crate::data::NUM_OBJECT_CLASSES {
            return Err(Error::Config("num_object_classes exceeds 23".into()));
        }
        if self.num_affordances > crate::data::NUM_AFFORDANCES {
            return Err(Error::Config("num_affordances exceeds 17".into()));
        }
        if self.image_side < 5 {
            return Err(Error::Config("image_side must fit a 5x5 glyph".into()));
        }
        Ok(())
    }
}
