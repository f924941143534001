//! Experiment configuration files, dotted-key overrides and run execution.
//!
//! ```toml
//! [model]
//! variant = "digit3conv"
//! [model.dida]
//! reduction = 16
//!
//! [data]
//! root = "data"
//! [[data.sources]]
//! images = "mnist5k-images-idx3-ubyte"
//! labels = "mnist5k-labels-idx1-ubyte"
//! [data.target]
//! images = "mnist-disjoint-images-idx3-ubyte"
//! recipe = "invert+noise(0.2)"
//!
//! [train]
//! epochs = 15
//!
//! [output]
//! dir = "runs/example"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_labeled, load_unlabeled, make_synthetic_domain, toy_digits, AugmentConfig, LabeledSet, Normalization,
    Recipe, Split, UnlabeledSet,
};
use crate::dida::{DidaConfig, GeneratorMode};
use crate::error::{Error, Result};
use crate::models::{build_model, BackboneSpec, Model};
use crate::train::{fit, stream, FitData, FitSummary, TrainConfig};

pub const DATA_ROOT_ENV: &str = "DIDA_DATA_ROOT";

/// One dataset: IDX files under the data root, or generated toy digits,
/// optionally shifted by a synthetic recipe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub name: Option<String>,
    pub images: Option<String>,
    pub labels: Option<String>,
    /// Generate this many seven-segment toy digits instead of reading files.
    pub toy: Option<usize>,
    pub recipe: Option<Recipe>,
    pub recipe_seed: u64,
    /// Keep `limit` images, evenly spaced through the file.
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory relative paths resolve against; falls back to `$DIDA_DATA_ROOT`.
    pub root: Option<PathBuf>,
    pub sources: Vec<DatasetSpec>,
    /// Unlabelled training target. Labels, when given, are used for
    /// reporting only (pseudo-label accuracy, and the test set by default).
    pub target: DatasetSpec,
    /// Labelled target test set; the target itself when unset and labelled.
    pub target_test: Option<DatasetSpec>,
    pub augment: AugmentConfig,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: BackboneSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `key.path=value` to a TOML tree, creating tables on the way.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Toy digits to inverted toy digits with a narrow backbone; runs in
    /// seconds and needs no files.
    pub fn toy() -> Self {
        let toy = |n: usize, recipe: Option<Recipe>| DatasetSpec {
            toy: Some(n),
            recipe,
            recipe_seed: 1,
            ..Default::default()
        };
        ExperimentConfig {
            model: BackboneSpec {
                widths: Some(vec![8, 8, 16]),
                hidden: 32,
                ..Default::default()
            },
            data: DataConfig {
                sources: vec![toy(64, None)],
                target: toy(64, Some(Recipe::Invert)),
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 16,
                base_lr: 1e-3,
                ..Default::default()
            },
            output: OutputConfig::default(),
        }
    }

    /// Parse TOML text, apply overrides, reject unknown keys and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file. A relative `data.root` is resolved against the
    /// file's directory and made absolute, so a resolved config written
    /// into a run directory still points at the same data.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(root) = &cfg.data.root {
            if root.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.root = Some(std::path::absolute(base.join(root))?);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.sources.is_empty() {
            return Err(Error::Config("data.sources needs at least one source domain".into()));
        }
        let specs = self.data.sources.iter().chain([&self.data.target]).chain(&self.data.target_test);
        for (i, spec) in specs.enumerate() {
            if spec.toy.is_some() == spec.images.is_some() {
                let name = spec.name.clone().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::Config(format!("dataset `{name}` needs exactly one of `images` or `toy`")));
            }
        }
        if self.model.num_classes > 256 {
            return Err(Error::Config("num_classes above 256 cannot be stored as IDX labels".into()));
        }
        // building resolves and checks every model-side key (widths, insertion, module channels)
        model_for(self).map(|_| ()).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    pub fn data_root(&self) -> PathBuf {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Indices of `limit` images spread evenly over `count`, so class-sorted
/// files still yield every class.
fn spread(count: usize, limit: Option<usize>) -> Option<Vec<usize>> {
    match limit {
        Some(l) if l < count => Some((0..l).map(|i| i * count / l).collect()),
        _ => None,
    }
}

/// Load (or generate) a dataset, apply `limit` and the recipe. The labelled
/// view is `None` when no label file is configured.
pub fn load_dataset(
    spec: &DatasetSpec,
    root: &Path,
    num_classes: usize,
    split: Split,
    default_name: &str,
    toy_seed: u64,
) -> Result<(Option<LabeledSet>, UnlabeledSet)> {
    let name = spec.name.clone().unwrap_or_else(|| default_name.to_string());
    let (images, labels) = match (spec.toy, &spec.images) {
        (Some(n), None) => {
            let set = toy_digits(n, &name, &mut stream(toy_seed, 0, 5))?;
            (set.images, Some(set.labels))
        }
        (None, Some(images)) => match &spec.labels {
            Some(l) => {
                let set = load_labeled(&resolve(root, images), &resolve(root, l), &name, split, num_classes)?;
                (set.images, Some(set.labels))
            }
            None => (load_unlabeled(&resolve(root, images), &name)?.images, None),
        },
        _ => {
            return Err(Error::Config(format!(
                "dataset `{name}` needs exactly one of `images` or `toy`"
            )))
        }
    };
    let keep = spread(images.count, spec.limit);
    let images = match &keep {
        Some(idx) => images.select(idx),
        None => images,
    };
    let labels = labels.map(|l| match &keep {
        Some(idx) => idx.iter().map(|&i| l[i]).collect(),
        None => l,
    });
    let has_labels = labels.is_some();
    let labels = labels.unwrap_or_else(|| vec![0; images.count]);
    let mut set = LabeledSet::new(name, images, labels, split, num_classes)?;
    if let Some(r) = &spec.recipe {
        set = make_synthetic_domain(&set, r, spec.recipe_seed);
    }
    let unlabeled = set.unlabeled();
    Ok((has_labels.then_some(set), unlabeled))
}

pub struct LoadedData {
    pub sources: Vec<LabeledSet>,
    pub target: UnlabeledSet,
    pub target_labels: Option<Vec<u8>>,
    pub target_test: Option<LabeledSet>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let root = cfg.data_root();
    let k = cfg.model.num_classes;
    let seed = cfg.train.seed;
    let mut sources = Vec::new();
    for (i, s) in cfg.data.sources.iter().enumerate() {
        let (set, _) = load_dataset(s, &root, k, Split::Train, &format!("source{i}"), seed.wrapping_add(i as u64))?;
        sources.push(set.ok_or_else(|| Error::Config(format!("source {i} needs labels")))?);
    }
    let (target_labeled, target) = load_dataset(&cfg.data.target, &root, k, Split::Train, "target", seed.wrapping_add(1000))?;
    let target_test = match &cfg.data.target_test {
        Some(spec) => {
            let (set, _) = load_dataset(spec, &root, k, Split::Test, "target_test", seed.wrapping_add(2000))?;
            Some(set.ok_or_else(|| Error::Config("data.target_test needs labels".into()))?)
        }
        None => target_labeled.clone().map(|mut s| {
            s.split = Split::Test;
            s
        }),
    };
    Ok(LoadedData {
        sources,
        target,
        target_labels: target_labeled.map(|s| s.labels),
        target_test,
    })
}

/// Build the model for a config; the initialisation stream depends only on
/// the training seed.
pub fn model_for(cfg: &ExperimentConfig) -> Result<Model<f32>> {
    let mut rng = stream(cfg.train.seed, u64::MAX / 16, 3);
    build_model(&cfg.model, &mut rng)
}

/// Run a full experiment; writes into `out_dir` when given.
pub fn run(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<(Model<f32>, FitSummary)> {
    let data = load_data(cfg)?;
    let mut model = model_for(cfg)?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("resolved-config.toml"), cfg.to_toml()?)?;
    }
    let fit_data = FitData {
        sources: &data.sources,
        target: &data.target,
        target_test: data.target_test.as_ref(),
        target_oracle: data.target_labels.as_deref(),
    };
    let summary = fit(
        &mut model,
        &fit_data,
        &cfg.train,
        &cfg.data.augment,
        &cfg.data.normalization,
        out_dir,
    )?;
    if let Some(d) = out_dir {
        std::fs::write(d.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok((model, summary))
}

/// Single-axis variations of a config with a dynamic module: kernel
/// generation, dilation sets, kernel size and reduction sharing, plus the
/// configuration without the module.
pub fn ablation_matrix(base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let dida = base
        .model
        .dida
        .clone()
        .ok_or_else(|| Error::Config("the ablation matrix needs a [model.dida] section".into()))?;
    let with = |name: &str, f: &dyn Fn(&mut DidaConfig)| {
        let mut cfg = base.clone();
        let mut d = dida.clone();
        f(&mut d);
        cfg.model.dida = Some(d);
        (name.to_string(), cfg)
    };
    let mut out = vec![
        with("dynamic", &|_| {}),
        with("static_cnn", &|d| d.generator_mode = GeneratorMode::StaticCnn),
        with("dilations_1", &|d| d.dilations = vec![1]),
        with("dilations_2", &|d| d.dilations = vec![2]),
        with("dilations_1_2", &|d| d.dilations = vec![1, 2]),
        with("kernel_1x1", &|d| d.kernel_size = 1),
        with("unshared_reduction", &|d| d.share_reduction = false),
    ];
    let mut plain = base.clone();
    plain.model.dida = None;
    out.push(("no_module".to_string(), plain));
    Ok(out)
}
