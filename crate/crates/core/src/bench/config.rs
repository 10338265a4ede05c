use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{EpisodeSpec, SyntheticSpec};
use crate::error::{config, Error, Result};
use crate::pipeline::{FinetuneConfig, TrainConfig, Variant};
use crate::replacement::{
    GridSpec, ReplacementMethod, DEFAULT_BLOCKDEF_MIX, DEFAULT_RANDERA_AREA,
    DEFAULT_RANDERA_ASPECT,
};

/// Where the images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Directory { root: PathBuf, split_file: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    BlockAug,
    RandEra,
    BlockDef,
}

impl FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "blockaug" => Ok(MethodKind::BlockAug),
            "randera" => Ok(MethodKind::RandEra),
            "blockdef" => Ok(MethodKind::BlockDef),
            other => config(format!("unknown replacement method {other:?}")),
        }
    }
}

/// Operator family and its shape parameters; the block cap comes from the stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplaceParams {
    pub method: MethodKind,
    pub grid: GridSpec,
    pub randera_area: (f32, f32),
    pub randera_aspect: (f32, f32),
    pub blockdef_mix: f32,
}

impl Default for ReplaceParams {
    fn default() -> Self {
        Self {
            method: MethodKind::BlockAug,
            grid: GridSpec::default(),
            randera_area: DEFAULT_RANDERA_AREA,
            randera_aspect: DEFAULT_RANDERA_ASPECT,
            blockdef_mix: DEFAULT_BLOCKDEF_MIX,
        }
    }
}

impl ReplaceParams {
    pub fn build(&self, max_blocks: usize) -> ReplacementMethod {
        match self.method {
            MethodKind::BlockAug => ReplacementMethod::BlockAug {
                grid: self.grid,
                max_blocks,
            },
            MethodKind::RandEra => ReplacementMethod::RandEra {
                area_range: self.randera_area,
                aspect_range: self.randera_aspect,
            },
            MethodKind::BlockDef => ReplacementMethod::BlockDef {
                grid: self.grid,
                max_blocks,
                mix: self.blockdef_mix,
            },
        }
    }
}

/// Everything one benchmark run needs. Built from defaults, a key=value file and
/// `--key=value` overrides, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Resize target for directory datasets (synthetic images use their own side).
    pub image_side: usize,
    pub episode: EpisodeSpec,
    pub train: TrainConfig,
    pub train_max_blocks: usize,
    pub variants: Vec<Variant>,
    pub finetune: FinetuneConfig,
    pub finetune_max_blocks: usize,
    pub replace: ReplaceParams,
    pub episodes: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub trace: bool,
    pub embeddings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            image_side: 32,
            episode: EpisodeSpec::default(),
            train: TrainConfig::default(),
            train_max_blocks: 4,
            variants: Variant::ALL.to_vec(),
            finetune: FinetuneConfig::default(),
            finetune_max_blocks: 6,
            replace: ReplaceParams::default(),
            episodes: 600,
            seed: 0,
            out_dir: PathBuf::from("clr_out"),
            trace: false,
            embeddings: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "dataset.root",
    "dataset.split_file",
    "dataset.side",
    "dataset.synthetic.classes",
    "dataset.synthetic.per_class",
    "dataset.synthetic.side",
    "dataset.synthetic.seed",
    "episode.n",
    "episode.k",
    "episode.t",
    "episode.u",
    "train.epochs",
    "train.batch",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.max_blocks",
    "train.regen_per_epoch",
    "finetune.variant",
    "finetune.epochs",
    "finetune.lr",
    "finetune.max_blocks",
    "finetune.head",
    "replace.method",
    "replace.grid_rows",
    "replace.grid_cols",
    "replace.randera_area_lo",
    "replace.randera_area_hi",
    "replace.randera_aspect_lo",
    "replace.randera_aspect_hi",
    "replace.blockdef_mix",
    "bench.episodes",
    "bench.seed",
    "bench.out_dir",
    "bench.trace",
    "bench.embeddings",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => config(format!("{key}: expected a boolean, got {value:?}")),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        match key {
            "dataset.root" | "dataset.split_file" => {
                let (mut root, mut split) = match &self.dataset {
                    DatasetSource::Directory { root, split_file } => (root.clone(), split_file.clone()),
                    DatasetSource::Synthetic(_) => (PathBuf::new(), PathBuf::new()),
                };
                if key == "dataset.root" {
                    root = PathBuf::from(v);
                    if split.as_os_str().is_empty() {
                        split = root.join("splits.txt");
                    }
                } else {
                    split = PathBuf::from(v);
                }
                self.dataset = DatasetSource::Directory {
                    root,
                    split_file: split,
                };
            }
            "dataset.side" => self.image_side = parse(key, v)?,
            k if k.starts_with("dataset.synthetic.") => {
                let mut spec = match &self.dataset {
                    DatasetSource::Synthetic(s) => *s,
                    DatasetSource::Directory { .. } => SyntheticSpec::default(),
                };
                match &k["dataset.synthetic.".len()..] {
                    "classes" => spec.classes = parse(key, v)?,
                    "per_class" => spec.per_class = parse(key, v)?,
                    "side" => spec.side = parse(key, v)?,
                    "seed" => spec.seed = parse(key, v)?,
                    _ => return config(format!("unknown config key {key:?}")),
                }
                self.dataset = DatasetSource::Synthetic(spec);
            }
            "episode.n" => self.episode.n = parse(key, v)?,
            "episode.k" => self.episode.k = parse(key, v)?,
            "episode.t" => self.episode.t = parse(key, v)?,
            "episode.u" => self.episode.u = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.max_blocks" => self.train_max_blocks = parse(key, v)?,
            "train.regen_per_epoch" => {
                self.train.regenerate_augmented_per_epoch = parse_bool(key, v)?
            }
            "finetune.variant" => {
                self.variants = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(Variant::from_str)
                    .collect::<Result<_>>()?;
            }
            "finetune.epochs" => self.finetune.epochs = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.max_blocks" => self.finetune_max_blocks = parse(key, v)?,
            "finetune.head" => self.finetune.head = v.parse()?,
            "replace.method" => self.replace.method = v.parse()?,
            "replace.grid_rows" => self.replace.grid.rows = parse(key, v)?,
            "replace.grid_cols" => self.replace.grid.cols = parse(key, v)?,
            "replace.randera_area_lo" => self.replace.randera_area.0 = parse(key, v)?,
            "replace.randera_area_hi" => self.replace.randera_area.1 = parse(key, v)?,
            "replace.randera_aspect_lo" => self.replace.randera_aspect.0 = parse(key, v)?,
            "replace.randera_aspect_hi" => self.replace.randera_aspect.1 = parse(key, v)?,
            "replace.blockdef_mix" => self.replace.blockdef_mix = parse(key, v)?,
            "bench.episodes" => self.episodes = parse(key, v)?,
            "bench.seed" => self.seed = parse(key, v)?,
            "bench.out_dir" => self.out_dir = PathBuf::from(v),
            "bench.trace" => self.trace = parse_bool(key, v)?,
            "bench.embeddings" => self.embeddings = parse_bool(key, v)?,
            _ => return config(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(format!("config line {}: expected key=value", lineno + 1));
            };
            self.set(k, v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Applies `--key=value` (or `key=value`) overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref().trim_start_matches("--");
            let Some((k, v)) = o.split_once('=') else {
                return config(format!("override {o:?} is not key=value"));
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then overrides; validated.
    pub fn load<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        if self.episodes == 0 {
            return config("bench.episodes must be at least 1");
        }
        if self.variants.is_empty() {
            return config("finetune.variant lists no variant");
        }
        self.train_config().validate()?;
        self.finetune_config(Variant::Vanilla).validate()
    }

    pub fn train_method(&self) -> ReplacementMethod {
        self.replace.build(self.train_max_blocks)
    }

    pub fn finetune_method(&self) -> ReplacementMethod {
        self.replace.build(self.finetune_max_blocks)
    }

    /// Training config; a cosine fine-tune head also trains with a cosine head.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: self.train_method(),
            head: self.finetune.head,
            ..self.train.clone()
        }
    }

    pub fn finetune_config(&self, variant: Variant) -> FinetuneConfig {
        FinetuneConfig {
            variant,
            method: self.finetune_method(),
            ..self.finetune.clone()
        }
    }

    /// Renders every key as `key = value`, readable back by `apply_text`.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        let mut push = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                push("dataset.synthetic.classes", s.classes.to_string());
                push("dataset.synthetic.per_class", s.per_class.to_string());
                push("dataset.synthetic.side", s.side.to_string());
                push("dataset.synthetic.seed", s.seed.to_string());
            }
            DatasetSource::Directory { root, split_file } => {
                push("dataset.root", root.display().to_string());
                push("dataset.split_file", split_file.display().to_string());
            }
        }
        push("dataset.side", self.image_side.to_string());
        push("episode.n", self.episode.n.to_string());
        push("episode.k", self.episode.k.to_string());
        push("episode.t", self.episode.t.to_string());
        push("episode.u", self.episode.u.to_string());
        push("train.epochs", self.train.epochs.to_string());
        push("train.batch", self.train.batch_size.to_string());
        push("train.lr", self.train.lr.to_string());
        push("train.momentum", self.train.momentum.to_string());
        push("train.weight_decay", self.train.weight_decay.to_string());
        push("train.max_blocks", self.train_max_blocks.to_string());
        push(
            "train.regen_per_epoch",
            self.train.regenerate_augmented_per_epoch.to_string(),
        );
        push(
            "finetune.variant",
            self.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","),
        );
        push("finetune.epochs", self.finetune.epochs.to_string());
        push("finetune.lr", self.finetune.lr.to_string());
        push("finetune.max_blocks", self.finetune_max_blocks.to_string());
        push("finetune.head", self.finetune.head.to_string());
        let method = match self.replace.method {
            MethodKind::BlockAug => "blockaug",
            MethodKind::RandEra => "randera",
            MethodKind::BlockDef => "blockdef",
        };
        push("replace.method", method.to_string());
        push("replace.grid_rows", self.replace.grid.rows.to_string());
        push("replace.grid_cols", self.replace.grid.cols.to_string());
        push("replace.randera_area_lo", self.replace.randera_area.0.to_string());
        push("replace.randera_area_hi", self.replace.randera_area.1.to_string());
        push("replace.randera_aspect_lo", self.replace.randera_aspect.0.to_string());
        push("replace.randera_aspect_hi", self.replace.randera_aspect.1.to_string());
        push("replace.blockdef_mix", self.replace.blockdef_mix.to_string());
        push("bench.episodes", self.episodes.to_string());
        push("bench.seed", self.seed.to_string());
        push("bench.out_dir", self.out_dir.display().to_string());
        push("bench.trace", self.trace.to_string());
        push("bench.embeddings", self.embeddings.to_string());
        lines.join("\n") + "\n"
    }
}
