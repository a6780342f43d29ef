use super::config::{resolve_data_path, DataSource, DataSpec};
use super::CliError;
use crate::bench::{colorize_grays, generate_glyphs, load_mnist_idx, GlyphDataset};
use crate::subject::{FiberTarget, SubjectModel};

/// Training items and held-out target items.
pub struct Datasets {
    pub train: GlyphDataset,
    pub held_out: GlyphDataset,
}

impl Datasets {
    pub fn load(spec: &DataSpec) -> Result<Self, CliError> {
        match spec.source {
            DataSource::Glyphs => {
                let gen = |n, seed| {
                    generate_glyphs(n, spec.h, spec.w, spec.variant, seed).map_err(|e| CliError::Config(format!("data: {e}")))
                };
                Ok(Self {
                    train: gen(spec.n, spec.seed)?,
                    held_out: gen(spec.targets.max(1), spec.target_seed)?,
                })
            }
            DataSource::Idx => {
                let field = |name: &str, p: &Option<std::path::PathBuf>| {
                    let p = resolve_data_path(p.as_deref().ok_or_else(|| CliError::Config(format!("{name}: required")))?);
                    if p.exists() {
                        Ok(p)
                    } else {
                        Err(CliError::Config(format!("{name}: {} does not exist", p.display())))
                    }
                };
                let images = field("data.idx_images", &spec.idx_images)?;
                let labels = field("data.idx_labels", &spec.idx_labels)?;
                let mut d = load_mnist_idx(&images, &labels).map_err(|e| CliError::Config(format!("data: {e}")))?;
                let need = spec.n + spec.targets.max(1);
                if d.grays.len() < need {
                    return Err(CliError::Config(format!(
                        "data.n: {} training plus {} target items requested, file has {}",
                        spec.n,
                        spec.targets.max(1),
                        d.grays.len()
                    )));
                }
                let rest = d.grays.split_off(spec.n);
                let held: Vec<_> = rest.into_iter().take(spec.targets.max(1)).collect();
                let col = |g, seed| colorize_grays(g, spec.variant, seed).map_err(|e| CliError::Config(format!("data: {e}")));
                Ok(Self {
                    train: col(d.grays, spec.seed)?,
                    held_out: col(held, spec.target_seed)?,
                })
            }
        }
    }

    /// Grid shape of the loaded images, which for IDX data may differ from
    /// the configured one.
    pub fn shape(&self) -> (usize, usize) {
        (self.train.h, self.train.w)
    }

    /// Targets from the held-out items at `idx`.
    pub fn targets(&self, subject: &dyn SubjectModel, idx: &[usize]) -> Result<Vec<FiberTarget>, CliError> {
        idx.iter()
            .map(|&i| {
                if i >= self.held_out.len() {
                    return Err(CliError::Config(format!(
                        "target index {i} out of range, {} held-out items",
                        self.held_out.len()
                    )));
                }
                FiberTarget::from_origin(subject, &self.held_out.image_tensor(i)).map_err(|e| CliError::Config(format!("subject.id: {e}")))
            })
            .collect()
    }
}
