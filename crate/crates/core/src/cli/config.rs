use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::bench::{GlyphVariant, SweepAxis};
use crate::diffusion::ScheduleSpec;
use crate::guidance::GuidanceConfig;
use crate::refine::AeArch;
use crate::score_models::{ArchSpec, FiberRegSpec, Parameterization, TrainSpec};

/// Environment variable holding the base directory of relative dataset paths
/// and the default output of `gen-data`.
pub const DATA_DIR_ENV: &str = "FIBERLAB_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Glyphs,
    /// IDX image and label files, colorized on load.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub source: DataSource,
    /// Training items.
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub variant: GlyphVariant,
    pub seed: u64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// Held-out target items, generated from `target_seed` (glyphs) or taken
    /// after the first `n` items (IDX).
    pub targets: usize,
    pub target_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Glyphs,
            n: 20_000,
            h: 12,
            w: 12,
            variant: GlyphVariant::Correlated,
            seed: 1,
            idx_images: None,
            idx_labels: None,
            targets: 50,
            target_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub checkpoint: Option<PathBuf>,
    pub arch: ArchSpec,
    pub train: TrainSpec,
    pub parameterization: Parameterization,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            arch: ArchSpec {
                skip: true,
                ..ArchSpec::default()
            },
            train: TrainSpec::default(),
            parameterization: Parameterization::Epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionalSpec {
    pub checkpoint: Option<PathBuf>,
    pub arch: ArchSpec,
    pub train: TrainSpec,
    pub fiber_reg: FiberRegSpec,
    /// Euler steps when sampling.
    pub sample_steps: usize,
}

impl Default for ConditionalSpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            arch: ArchSpec::default(),
            train: TrainSpec {
                steps: 5_000,
                ..TrainSpec::default()
            },
            fiber_reg: FiberRegSpec::default(),
            sample_steps: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AeInput {
    /// Decolorized grids; the encoder serves as a `colorglyph/ae:` subject.
    Gray,
    /// Colored images; used for latent refinement.
    #[default]
    Color,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeSpec {
    /// Directory with `encoder.flb`, `decoder.flb` and `ae.json`.
    pub checkpoint: Option<PathBuf>,
    pub input: AeInput,
    pub arch: AeArch,
    pub train: TrainSpec,
}

impl Default for AeSpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            input: AeInput::Color,
            arch: AeArch::default(),
            train: TrainSpec {
                steps: 10_000,
                ema: 0.0,
                ..TrainSpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectSpec {
    pub id: String,
}

impl Default for SubjectSpec {
    fn default() -> Self {
        Self {
            id: "colorglyph/flatten".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    /// Indices into the held-out targets.
    pub targets: Vec<usize>,
    /// Samples per target.
    pub count: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            targets: vec![0, 1, 2, 3],
            count: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Guided sampling from the prior checkpoint.
    Ndtm,
    /// Conditional flow model checkpoint.
    Conditional,
    /// Dataset items on the target fiber.
    Oracle,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ndtm => "ndtm",
            Method::Conditional => "conditional",
            Method::Oracle => "oracle-resampler",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSpec {
    pub methods: Vec<Method>,
    /// Sample sets per target.
    pub sets: usize,
}

impl Default for EvaluateSpec {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ndtm],
            sets: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// For `gamma`, multipliers of the configured schedule; for
    /// `lambda-fiber`, regularizer weights.
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sets: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Gamma,
            values: vec![0.0, 0.25, 1.0],
            seeds: vec![0, 1, 2],
            sets: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSpec {
    /// Number of held-out targets to sample and refine.
    pub count: usize,
    pub steps: usize,
    pub eta: f64,
    /// Learning rate of the pixel-space ablation.
    pub pixel_eta: f64,
}

impl Default for RefineSpec {
    fn default() -> Self {
        Self {
            count: 50,
            steps: 100,
            eta: 1e-2,
            pixel_eta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub data: DataSpec,
    pub schedule: ScheduleSpec,
    pub subject: SubjectSpec,
    pub prior: PriorSpec,
    pub conditional: ConditionalSpec,
    pub ae: AeSpec,
    pub guidance: GuidanceConfig,
    pub sample: SampleSpec,
    pub evaluate: EvaluateSpec,
    pub sweep: SweepSpec,
    pub refine: RefineSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("out"),
            data: DataSpec::default(),
            schedule: ScheduleSpec::default(),
            subject: SubjectSpec::default(),
            prior: PriorSpec::default(),
            conditional: ConditionalSpec::default(),
            ae: AeSpec::default(),
            guidance: GuidanceConfig::default(),
            sample: SampleSpec::default(),
            evaluate: EvaluateSpec::default(),
            sweep: SweepSpec::default(),
            refine: RefineSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {}", e.message())).with_span(text, e.span()))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form, with
    /// `threads` and `out` reset since they do not affect results.
    pub fn hash(&self) -> String {
        let keyed = Self {
            threads: 1,
            out: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&keyed).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Structural checks shared by every command.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.threads == 0 {
            return bad("threads", "must be >= 1".into());
        }
        if self.data.n == 0 {
            return bad("data.n", "must be >= 1".into());
        }
        if self.data.source == DataSource::Idx {
            if self.data.idx_images.is_none() {
                return bad("data.idx_images", "required when data.source = \"idx\"".into());
            }
            if self.data.idx_labels.is_none() {
                return bad("data.idx_labels", "required when data.source = \"idx\"".into());
            }
        }
        if let Err(e) = self.schedule.build() {
            return bad("schedule", e.to_string());
        }
        if let Err(e) = self.guidance.validate() {
            return bad("guidance", e.to_string());
        }
        Ok(())
    }
}

impl CliError {
    fn with_span(self, text: &str, span: Option<std::ops::Range<usize>>) -> Self {
        match (self, span) {
            (CliError::Config(m), Some(r)) => {
                let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
                CliError::Config(format!("{m} (line {line})"))
            }
            (e, _) => e,
        }
    }
}

/// Resolves a data path against `FIBERLAB_DATA_DIR` when it is relative and
/// the variable is set.
pub fn resolve_data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(base) if p.is_relative() => Path::new(&base).join(p),
        _ => p.to_path_buf(),
    }
}

/// Checks that a required file exists, naming the config field otherwise.
pub fn require_file(field: &str, p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let p = p
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{field}: required by this command")))?;
    if !p.exists() {
        return Err(CliError::Config(format!("{field}: {} does not exist", p.display())));
    }
    Ok(p.clone())
}
