use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::ColorPrior;
use super::BenchError;
use crate::numerics::{stream_rng, Tensor};
use crate::subject::{colorize, ColorTriple, Grid, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlyphVariant {
    /// Foreground is `(c + 0.5) mod 1` of the background `c`.
    #[default]
    Correlated,
    /// Foreground and background colors drawn separately from the prior.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphDataset {
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    pub variant: GlyphVariant,
    pub grays: Vec<Grid>,
    pub colors: Vec<ColorTriple>,
    pub foregrounds: Vec<[f64; 3]>,
    pub images: Vec<RgbImage>,
}

const STROKE_WIDTH: f64 = 0.6;
const CURVE_POINTS: usize = 24;

fn stroke_glyph<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Grid {
    let strokes = rng.random_range(1..=3);
    let mut raw = vec![0.0f64; h * w];
    let (ylo, yhi) = (2.0, h as f64 - 3.0);
    let (xlo, xhi) = (2.0, w as f64 - 3.0);
    for _ in 0..strokes {
        let p: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.random_range(ylo..=yhi), rng.random_range(xlo..=xhi)))
            .collect();
        for k in 0..=CURVE_POINTS {
            let s = k as f64 / CURVE_POINTS as f64;
            let (a, b, c) = ((1.0 - s).powi(2), 2.0 * s * (1.0 - s), s * s);
            let y = a * p[0].0 + b * p[1].0 + c * p[2].0;
            let x = a * p[0].1 + b * p[1].1 + c * p[2].1;
            for r in 1..h - 1 {
                for col in 1..w - 1 {
                    let d2 = (r as f64 - y).powi(2) + (col as f64 - x).powi(2);
                    let v = (-d2 / (2.0 * STROKE_WIDTH * STROKE_WIDTH)).exp();
                    let cell = &mut raw[r * w + col];
                    *cell = cell.max(v);
                }
            }
        }
    }
    let data = raw.iter().map(|v| (1.4 * v - 0.2).clamp(0.0, 1.0)).collect();
    Grid::new(h, w, data).expect("valid grid")
}

fn draw_color<R: Rng + ?Sized>(prior: &ColorPrior, rng: &mut R) -> ColorTriple {
    ColorTriple([prior.sample(rng), prior.sample(rng), prior.sample(rng)])
}

fn colorize_item<R: Rng + ?Sized>(
    gray: &Grid,
    variant: GlyphVariant,
    prior: &ColorPrior,
    rng: &mut R,
) -> Result<(ColorTriple, [f64; 3], RgbImage), BenchError> {
    let c = draw_color(prior, rng);
    match variant {
        GlyphVariant::Correlated => Ok((c, c.foreground(), colorize(gray, c)?)),
        GlyphVariant::Independent => {
            let f = draw_color(prior, rng).0;
            let n = gray.h * gray.w;
            let mut data = vec![0.0; 3 * n];
            for ch in 0..3 {
                for p in 0..n {
                    let x = gray.data[p];
                    data[ch * n + p] = (1.0 - x) * c.0[ch] + x * f[ch];
                }
            }
            Ok((c, f, RgbImage::new(gray.h, gray.w, data)?))
        }
    }
}

/// `n` procedural stroke glyphs with an empty 1-pixel border, colorized with
/// background colors drawn per channel from the default [`ColorPrior`].
/// Item `i` depends only on `(seed, i)`.
pub fn generate_glyphs(
    n: usize,
    h: usize,
    w: usize,
    variant: GlyphVariant,
    seed: u64,
) -> Result<GlyphDataset, BenchError> {
    if h < 8 || w < 8 {
        return Err(BenchError::Config(format!("glyph grid must be at least 8x8, got {h}x{w}")));
    }
    let grays = (0..n as u64)
        .map(|i| stroke_glyph(h, w, &mut stream_rng(seed, 2 * i)))
        .collect();
    colorize_grays(grays, variant, seed)
}

/// Colorizes existing grids; colors of item `i` come from stream `2 i + 1`.
pub fn colorize_grays(
    grays: Vec<Grid>,
    variant: GlyphVariant,
    seed: u64,
) -> Result<GlyphDataset, BenchError> {
    let first = grays.first().ok_or(BenchError::Empty("glyph dataset"))?;
    let (h, w) = (first.h, first.w);
    let prior = ColorPrior::default();
    let mut colors = Vec::with_capacity(grays.len());
    let mut foregrounds = Vec::with_capacity(grays.len());
    let mut images = Vec::with_capacity(grays.len());
    for (i, g) in grays.iter().enumerate() {
        if (g.h, g.w) != (h, w) {
            return Err(BenchError::Config("all grids must share one shape".into()));
        }
        if !g.border_is_empty() {
            return Err(BenchError::Config(format!("item {i} touches the border")));
        }
        let (c, f, img) = colorize_item(g, variant, &prior, &mut stream_rng(seed, 2 * i as u64 + 1))?;
        colors.push(c);
        foregrounds.push(f);
        images.push(img);
    }
    Ok(GlyphDataset {
        h,
        w,
        seed,
        variant,
        grays,
        colors,
        foregrounds,
        images,
    })
}

impl GlyphDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        3 * self.h * self.w
    }

    /// Images as rows of an `[n, 3 h w]` matrix (planar channels).
    pub fn to_tensor(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.images.iter().map(|i| i.data.as_slice()).collect();
        Tensor::stack_rows(&rows).expect("uniform image size")
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::vector(self.images[i].data.clone())
    }

    pub fn gray_tensor(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.grays.iter().map(|g| g.data.as_slice()).collect();
        Tensor::stack_rows(&rows).expect("uniform grid size")
    }

    /// Copy of the items at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            h: self.h,
            w: self.w,
            seed: self.seed,
            variant: self.variant,
            grays: idx.iter().map(|&i| self.grays[i].clone()).collect(),
            colors: idx.iter().map(|&i| self.colors[i]).collect(),
            foregrounds: idx.iter().map(|&i| self.foregrounds[i]).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::metrics::kl_to_prior;
    use crate::subject::estimate_background;

    #[test]
    fn borders_carry_the_background() {
        let d = generate_glyphs(200, 12, 12, GlyphVariant::Correlated, 3).unwrap();
        for (img, c) in d.images.iter().zip(&d.colors) {
            for idx in crate::subject::border_indices(12, 12) {
                for ch in 0..3 {
                    assert_eq!(img.channel(ch)[idx], c.0[ch]);
                }
            }
            let e = estimate_background(img).unwrap();
            for ch in 0..3 {
                assert!((e.0[ch] - c.0[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn glyphs_are_nontrivial() {
        let d = generate_glyphs(100, 12, 12, GlyphVariant::Correlated, 4).unwrap();
        for g in &d.grays {
            assert!(g.border_is_empty());
            assert!(g.data.iter().any(|&v| v > 0.9));
            assert!(g.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(d.grays[0], d.grays[1]);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_glyphs(20, 10, 9, GlyphVariant::Independent, 8).unwrap();
        let b = generate_glyphs(20, 10, 9, GlyphVariant::Independent, 8).unwrap();
        assert_eq!(a, b);
        let c = generate_glyphs(20, 10, 9, GlyphVariant::Independent, 9).unwrap();
        assert_ne!(a.grays, c.grays);
    }

    #[test]
    fn color_histogram_matches_prior() {
        let d = generate_glyphs(10_000, 8, 8, GlyphVariant::Correlated, 5).unwrap();
        let p = ColorPrior::default();
        for ch in 0..3 {
            let v: Vec<f64> = d.colors.iter().map(|c| c.0[ch]).collect();
            assert!(kl_to_prior(&v, &p) < 0.02);
        }
    }

    #[test]
    fn independent_variant_breaks_the_color_relation() {
        let d = generate_glyphs(50, 12, 12, GlyphVariant::Independent, 6).unwrap();
        let related = d
            .colors
            .iter()
            .zip(&d.foregrounds)
            .filter(|(c, f)| c.foreground() == **f)
            .count();
        assert_eq!(related, 0);
        assert!(d.images.iter().all(|i| i.data.iter().all(|v| (0.0..1.0).contains(v))));
    }

    #[test]
    fn rejects_small_grids() {
        assert!(generate_glyphs(1, 7, 12, GlyphVariant::Correlated, 0).is_err());
    }
}
