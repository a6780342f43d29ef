//! Feature extractors whose fibers are sampled, the colorized-glyph subject
//! with closed-form fibers, and fiber diagnostics.

mod color;
mod fiber;

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

pub use color::{
    border_indices, channel_span, colorize, decolorize, decolorize_rows, decolorize_tape,
    estimate_background, estimate_background_raw, ColorTriple, Grid, RgbImage,
};
pub use fiber::{
    fiber_dimension, fiber_loss, fiber_losses_to, nearest_neighbor_baseline, FiberTarget,
    NearestNeighbor,
};

use crate::numerics::{checkpoint, stream_rng, Mlp, NumericsError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum SubjectError {
    #[error("color channel {0} outside [0, 1)")]
    InvalidColor(f64),
    #[error("{0}")]
    Shape(String),
    #[error("unknown subject id {0:?}")]
    UnknownId(String),
    #[error("invalid matrix file {path}: {reason}")]
    MatrixFile { path: String, reason: String },
    #[error("no candidates left after excluding the target origin")]
    EmptyCandidates,
    #[error("fiber target has no origin sample")]
    MissingOrigin,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fixed feature extractor `phi`, applied row-wise to `[n, input_dim]` batches.
pub trait SubjectModel: Send + Sync {
    fn id(&self) -> String;

    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn embed(&self, x: &Tensor) -> Result<Tensor, NumericsError>;

    fn embed_tape(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError>;
}

/// `phi(x) = A x`.
#[derive(Debug, Clone)]
pub struct LinearSubject {
    id: String,
    at: Arc<Tensor>,
}

impl LinearSubject {
    /// `a` is `[out, in]`.
    pub fn new(a: &Tensor, id: impl Into<String>) -> Result<Self, SubjectError> {
        if a.shape().len() != 2 || a.is_empty() {
            return Err(SubjectError::Shape(format!(
                "linear subject needs a non-empty matrix, got {:?}",
                a.shape()
            )));
        }
        Ok(Self {
            id: id.into(),
            at: Arc::new(a.transpose()),
        })
    }

    /// Reads whitespace-separated rows of `A`; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self, SubjectError> {
        let bad = |reason: String| SubjectError::MatrixFile {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            rows.push(row.map_err(|e| bad(format!("line {}: {e}", ln + 1)))?);
        }
        if rows.is_empty() {
            return Err(bad("no rows".into()));
        }
        let a = Tensor::from_rows(&rows).map_err(|e| bad(e.to_string()))?;
        Self::new(&a, format!("linear:{}", path.display()))
    }

    /// `A` as `[out, in]`.
    pub fn matrix(&self) -> Tensor {
        self.at.transpose()
    }
}

impl SubjectModel for LinearSubject {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn input_dim(&self) -> usize {
        self.at.rows()
    }

    fn output_dim(&self) -> usize {
        self.at.cols()
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        x.as_matrix().matmul(&self.at)
    }

    fn embed_tape(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        tape.affine_const(x, self.at.clone(), None)
    }
}

/// Embedding applied after decolorization.
#[derive(Debug, Clone)]
pub enum GlyphEmbedding {
    Flatten,
    /// `[h·w, d_h]` matrix with orthonormal columns.
    Projection(Arc<Tensor>),
    Encoder(Mlp),
}

/// `phi(x) = E(decolorize(x, estimate_background(x)))` on planar RGB rows.
#[derive(Debug, Clone)]
pub struct ColorGlyphSubject {
    h: usize,
    w: usize,
    embedding: GlyphEmbedding,
    id: String,
}

const PROJECTION_SEED: u64 = 0x0066_6962_6572;

impl ColorGlyphSubject {
    pub fn flatten(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            embedding: GlyphEmbedding::Flatten,
            id: "colorglyph/flatten".into(),
        }
    }

    /// Fixed random projection with orthonormal columns; deterministic in `(h, w, d_h)`.
    pub fn projection(h: usize, w: usize, d_h: usize) -> Result<Self, SubjectError> {
        let n = h * w;
        if d_h == 0 || d_h > n {
            return Err(SubjectError::Shape(format!(
                "projection dimension {d_h} must be in 1..={n}"
            )));
        }
        let mut rng = stream_rng(PROJECTION_SEED, (n * 65_536 + d_h) as u64);
        let g = crate::numerics::normal_tensor(&[n, d_h], &mut rng);
        let m = DMatrix::from_row_slice(n, d_h, g.data());
        let q = m.qr().q();
        let mut data = Vec::with_capacity(n * d_h);
        for r in 0..n {
            for c in 0..d_h {
                data.push(q[(r, c)]);
            }
        }
        Ok(Self {
            h,
            w,
            embedding: GlyphEmbedding::Projection(Arc::new(Tensor::matrix(n, d_h, data)?)),
            id: format!("colorglyph/proj:{d_h}"),
        })
    }

    pub fn encoder(h: usize, w: usize, enc: Mlp, id: impl Into<String>) -> Result<Self, SubjectError> {
        if enc.input_dim() != h * w {
            return Err(SubjectError::Shape(format!(
                "encoder takes {} inputs, grid has {}",
                enc.input_dim(),
                h * w
            )));
        }
        Ok(Self {
            h,
            w,
            embedding: GlyphEmbedding::Encoder(enc),
            id: id.into(),
        })
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn embedding(&self) -> &GlyphEmbedding {
        &self.embedding
    }
}

impl SubjectModel for ColorGlyphSubject {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn input_dim(&self) -> usize {
        3 * self.h * self.w
    }

    fn output_dim(&self) -> usize {
        match &self.embedding {
            GlyphEmbedding::Flatten => self.h * self.w,
            GlyphEmbedding::Projection(p) => p.cols(),
            GlyphEmbedding::Encoder(m) => m.output_dim(),
        }
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let d = decolorize_rows(&x.as_matrix(), self.h, self.w)?;
        match &self.embedding {
            GlyphEmbedding::Flatten => Ok(d),
            GlyphEmbedding::Projection(p) => d.matmul(p),
            GlyphEmbedding::Encoder(m) => m.forward(&d),
        }
    }

    fn embed_tape(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let d = decolorize_tape(tape, x, self.h, self.w)?;
        match &self.embedding {
            GlyphEmbedding::Flatten => Ok(d),
            GlyphEmbedding::Projection(p) => tape.affine_const(d, p.clone(), None),
            GlyphEmbedding::Encoder(m) => m.forward_tape(tape, d),
        }
    }
}

/// Resolves a subject id: `colorglyph/flatten`, `colorglyph/proj:<d_h>`,
/// `colorglyph/ae:<checkpoint>` or `linear:<matrix file>`.
pub fn subject_from_id(id: &str, h: usize, w: usize) -> Result<Arc<dyn SubjectModel>, SubjectError> {
    if id == "colorglyph/flatten" {
        return Ok(Arc::new(ColorGlyphSubject::flatten(h, w)));
    }
    if let Some(rest) = id.strip_prefix("colorglyph/proj:") {
        let d: usize = rest.parse().map_err(|_| SubjectError::UnknownId(id.into()))?;
        return Ok(Arc::new(ColorGlyphSubject::projection(h, w, d)?));
    }
    if let Some(rest) = id.strip_prefix("colorglyph/ae:") {
        let bytes = std::fs::read(rest)?;
        let enc = checkpoint::read_mlp(bytes.as_slice())?;
        return Ok(Arc::new(ColorGlyphSubject::encoder(h, w, enc, id)?));
    }
    if let Some(rest) = id.strip_prefix("linear:") {
        let mut s = LinearSubject::from_file(Path::new(rest))?;
        s.id = id.into();
        return Ok(Arc::new(s));
    }
    Err(SubjectError::UnknownId(id.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{reverse_grad, stream_rng};
    use rand::Rng;

    fn glyph(rng: &mut impl Rng, h: usize, w: usize) -> Grid {
        let mut g = Grid::zeros(h, w);
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                g.data[r * w + c] = if rng.random::<f64>() < 0.3 { rng.random() } else { 0.0 };
            }
        }
        g
    }

    fn row(img: &RgbImage) -> Tensor {
        Tensor::matrix(1, img.data.len(), img.data.clone()).unwrap()
    }

    #[test]
    fn recolorization_is_invariant_under_every_embedding() {
        let mut rng = stream_rng(10, 0);
        let subjects = [
            ColorGlyphSubject::flatten(8, 8),
            ColorGlyphSubject::projection(8, 8, 20).unwrap(),
        ];
        for _ in 0..50 {
            let g = glyph(&mut rng, 8, 8);
            let c1 = ColorTriple::new([rng.random(), rng.random(), rng.random()]).unwrap();
            let c2 = ColorTriple::new([rng.random(), rng.random(), rng.random()]).unwrap();
            let a = row(&colorize(&g, c1).unwrap());
            let b = row(&colorize(&g, c2).unwrap());
            for s in &subjects {
                let d = s.embed(&a).unwrap().sub(&s.embed(&b).unwrap()).unwrap();
                assert!(d.norm_sq() < 1e-18);
            }
        }
    }

    #[test]
    fn full_projection_is_isometry() {
        let mut rng = stream_rng(11, 0);
        let s = ColorGlyphSubject::projection(6, 6, 36).unwrap();
        let g = glyph(&mut rng, 6, 6);
        let x = row(&colorize(&g, ColorTriple([0.2, 0.7, 0.4])).unwrap());
        let h = s.embed(&x).unwrap();
        let flat = ColorGlyphSubject::flatten(6, 6).embed(&x).unwrap();
        assert!((h.norm_sq().sqrt() - flat.norm_sq().sqrt()).abs() < 1e-9);
        let again = ColorGlyphSubject::projection(6, 6, 36).unwrap().embed(&x).unwrap();
        assert_eq!(h, again);
    }

    #[test]
    fn different_glyphs_differ() {
        let mut rng = stream_rng(12, 0);
        let s = ColorGlyphSubject::flatten(8, 8);
        let c = ColorTriple([0.6, 0.1, 0.3]);
        let a = s.embed(&row(&colorize(&glyph(&mut rng, 8, 8), c).unwrap())).unwrap();
        let b = s.embed(&row(&colorize(&glyph(&mut rng, 8, 8), c).unwrap())).unwrap();
        assert!(a.sub(&b).unwrap().norm_sq() > 0.0);
    }

    #[test]
    fn tape_embedding_matches_plain() {
        let mut rng = stream_rng(13, 0);
        let s = ColorGlyphSubject::projection(5, 5, 7).unwrap();
        let x = Tensor::matrix(2, 75, (0..150).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.var(x.clone());
        let e = s.embed_tape(&mut tape, v).unwrap();
        assert_eq!(tape.value(e), &s.embed(&x).unwrap());
        let g = reverse_grad(
            |t, v| {
                let e = s.embed_tape(t, v)?;
                let q = t.square(e)?;
                t.sum(q)
            },
            &x,
        )
        .unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn id_parsing() {
        assert_eq!(subject_from_id("colorglyph/flatten", 12, 12).unwrap().output_dim(), 144);
        assert_eq!(subject_from_id("colorglyph/proj:16", 12, 12).unwrap().output_dim(), 16);
        assert!(subject_from_id("colorglyph/proj:x", 12, 12).is_err());
        assert!(subject_from_id("dinov2", 12, 12).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, "# phi(x) = x1\n1 0\n").unwrap();
        let id = format!("linear:{}", p.display());
        let s = subject_from_id(&id, 0, 0).unwrap();
        assert_eq!((s.input_dim(), s.output_dim()), (2, 1));
        assert_eq!(s.id(), id);
        std::fs::write(&p, "1 0\n1\n").unwrap();
        assert!(LinearSubject::from_file(&p).is_err());
    }
}
