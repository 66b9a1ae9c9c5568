//! The run configuration document.
//!
//! ```toml
//! [arch]            # ArchSpec; `preset = "desk" | "paper"` fills unset keys
//! kind = "unet"
//! se_variant = "scse"
//!
//! [train]           # TrainConfig
//! max_epochs = 30
//!
//! [data]            # DatasetSpec
//! seed = 42
//!
//! [output]
//! dir = "runs/desk"
//! ```
//!
//! Every table rejects unknown keys. Missing keys take their defaults;
//! command-line flags override both.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scse_core::data::DatasetSpec;
use scse_core::se::SeVariant;
use scse_core::train::TrainConfig;
use scse_core::zoo::{ArchKind, ArchSpec};
use scse_core::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Where generated dataset splits are cached; regenerated when absent.
    pub dataset_dir: Option<PathBuf>,
    /// Leave class 0 out of the mean Dice.
    pub exclude_background: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            dataset_dir: None,
            exclude_background: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub output: OutputConfig,
}

/// Flag values that take precedence over the document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub arch: Option<ArchKind>,
    pub se: Option<SeVariant>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if let Some(toml::Value::Table(arch)) = doc.get_mut("arch") {
            expand_preset(arch)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Reads `path` if given, otherwise starts from defaults, then applies `o`.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self, Error> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(kind) = o.arch {
            cfg.arch.kind = kind;
        }
        if let Some(se) = o.se {
            cfg.arch.se_variant = se;
        }
        if let Some(seed) = o.seed {
            cfg.train.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            cfg.train.max_epochs = epochs;
        }
        if let Some(out) = &o.out {
            cfg.output.dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.arch.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.arch.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "arch.num_classes = {} but data.num_classes = {}",
                self.arch.num_classes, self.data.num_classes
            )));
        }
        if self.arch.input_channels != 1 {
            return Err(Error::Config(
                "the synthetic data is single-channel, so arch.input_channels must be 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Replaces `[arch]` by the named preset with the document's keys laid over it.
fn expand_preset(arch: &mut toml::Table) -> Result<(), Error> {
    let Some(name) = arch.get("preset") else {
        return Ok(());
    };
    let name = name
        .as_str()
        .ok_or_else(|| Error::Config("arch.preset must be a string".into()))?;
    let kind: ArchKind = match arch.get("kind").and_then(toml::Value::as_str) {
        Some(s) => s.parse()?,
        None => ArchKind::Unet,
    };
    let se: SeVariant = match arch.get("se_variant").and_then(toml::Value::as_str) {
        Some(s) => s.parse()?,
        None => SeVariant::None,
    };
    let mut base = toml::Table::try_from(ArchSpec::preset(name, kind, se)?)
        .expect("ArchSpec serializes to a table");
    for (k, v) in std::mem::take(arch) {
        base.insert(k, v);
    }
    *arch = base;
    Ok(())
}

/// Per-cell seed: the first eight bytes of `SHA-256(master ‖ arch ‖ 0 ‖ variant)`.
pub fn cell_seed(master: u64, arch: ArchKind, variant: SeVariant) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(arch.as_str().as_bytes());
    h.update([0]);
    h.update(variant.as_str().as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}
