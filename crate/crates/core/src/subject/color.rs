use serde::{Deserialize, Serialize};

use super::SubjectError;
use crate::numerics::{CustomOp, NumericsError, Tape, Tensor, Var};

/// Background color, one value per channel in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorTriple(pub [f64; 3]);

impl ColorTriple {
    pub fn new(c: [f64; 3]) -> Result<Self, SubjectError> {
        for &v in &c {
            if !(0.0..1.0).contains(&v) {
                return Err(SubjectError::InvalidColor(v));
            }
        }
        Ok(Self(c))
    }

    /// Foreground color `(c + 0.5) mod 1` per channel.
    pub fn foreground(&self) -> [f64; 3] {
        self.0.map(|c| (c + 0.5).rem_euclid(1.0))
    }
}

/// `((c + 0.5) mod 1) − c`, which is `±0.5` for background values in `[0, 1)`.
pub fn channel_span(c: f64) -> f64 {
    if c < 0.5 {
        0.5
    } else {
        -0.5
    }
}

/// Grayscale field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self, SubjectError> {
        if data.len() != h * w {
            return Err(SubjectError::Shape(format!(
                "grid {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    /// True when every pixel of the outer 1-pixel frame is exactly zero.
    pub fn border_is_empty(&self) -> bool {
        border_indices(self.h, self.w).iter().all(|&i| self.data[i] == 0.0)
    }
}

/// Three-channel image stored planar: channel-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self, SubjectError> {
        if data.len() != 3 * h * w {
            return Err(SubjectError::Shape(format!(
                "image {h}x{w} needs {} values, got {}",
                3 * h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let n = self.h * self.w;
        let p = r * self.w + c;
        [self.data[p], self.data[n + p], self.data[2 * n + p]]
    }
}

/// Indices of the outer 1-pixel frame, clockwise from the top-left corner.
pub fn border_indices(h: usize, w: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w).collect();
    idx.extend((1..h).map(|r| r * w + w - 1));
    if h > 1 {
        idx.extend((0..w - 1).rev().map(|c| (h - 1) * w + c));
    }
    if w > 1 {
        idx.extend((1..h - 1).rev().map(|r| r * w));
    }
    idx
}

pub fn colorize(x: &Grid, c: ColorTriple) -> Result<RgbImage, SubjectError> {
    let c = ColorTriple::new(c.0)?;
    let fg = c.foreground();
    let mut data = Vec::with_capacity(3 * x.data.len());
    for ch in 0..3 {
        data.extend(x.data.iter().map(|&v| (1.0 - v) * c.0[ch] + v * fg[ch]));
    }
    RgbImage::new(x.h, x.w, data)
}

/// Inverts [`colorize`] per channel and averages the three channel estimates.
pub fn decolorize(img: &RgbImage, c: ColorTriple) -> Grid {
    let n = img.h * img.w;
    let mut out = vec![0.0; n];
    for ch in 0..3 {
        let (cc, span) = (c.0[ch], channel_span(c.0[ch]));
        for (o, &v) in out.iter_mut().zip(img.channel(ch)) {
            *o += (v - cc) / span;
        }
    }
    out.iter_mut().for_each(|v| *v /= 3.0);
    Grid {
        h: img.h,
        w: img.w,
        data: out,
    }
}

/// Positions (in a sorted copy) contributing to the median, with weights.
fn median_support(vals: &[f64]) -> ([usize; 2], [f64; 2]) {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
    let m = vals.len() / 2;
    if vals.len() % 2 == 1 {
        ([order[m], order[m]], [1.0, 0.0])
    } else {
        ([order[m - 1], order[m]], [0.5, 0.5])
    }
}

fn median(vals: &[f64]) -> f64 {
    let (i, w) = median_support(vals);
    w[0] * vals[i[0]] + w[1] * vals[i[1]]
}

/// Per-channel median of the border frame. Values are not range-checked.
pub fn estimate_background_raw(img: &RgbImage) -> [f64; 3] {
    let border = border_indices(img.h, img.w);
    let mut c = [0.0; 3];
    for (ch, cv) in c.iter_mut().enumerate() {
        let plane = img.channel(ch);
        let vals: Vec<f64> = border.iter().map(|&i| plane[i]).collect();
        *cv = median(&vals);
    }
    c
}

pub fn estimate_background(img: &RgbImage) -> Result<ColorTriple, SubjectError> {
    ColorTriple::new(estimate_background_raw(img))
}

/// Batched `decolorize(x, estimate_background(x))` on planar image rows
/// `[n, 3·h·w] -> [n, h·w]`.
pub fn decolorize_rows(x: &Tensor, h: usize, w: usize) -> Result<Tensor, NumericsError> {
    let n = h * w;
    if x.cols() != 3 * n {
        return Err(NumericsError::ShapeMismatch {
            op: "decolorize",
            expected: format!("{} columns", 3 * n),
            actual: format!("{:?}", x.shape()),
        });
    }
    let border = border_indices(h, w);
    let mut out = Tensor::zeros(&[x.rows(), n]);
    let mut vals = vec![0.0; border.len()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let o = out.row_mut(i);
        for ch in 0..3 {
            let plane = &row[ch * n..(ch + 1) * n];
            for (v, &b) in vals.iter_mut().zip(&border) {
                *v = plane[b];
            }
            let c = median(&vals);
            let k = 1.0 / (3.0 * channel_span(c));
            for (ov, &pv) in o.iter_mut().zip(plane) {
                *ov += (pv - c) * k;
            }
        }
    }
    if !out.is_finite() {
        return Err(NumericsError::NonFinite { op: "decolorize" });
    }
    Ok(out)
}

struct DecolorizeVjp {
    h: usize,
    w: usize,
}

impl CustomOp for DecolorizeVjp {
    fn name(&self) -> &'static str {
        "decolorize"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let n = self.h * self.w;
        let border = border_indices(self.h, self.w);
        let mut gx = Tensor::zeros(x.shape());
        let mut vals = vec![0.0; border.len()];
        for i in 0..x.rows() {
            let row = x.row(i);
            let g = grad.row(i);
            let gsum: f64 = g.iter().sum();
            let gr = gx.row_mut(i);
            for ch in 0..3 {
                let plane = &row[ch * n..(ch + 1) * n];
                for (v, &b) in vals.iter_mut().zip(&border) {
                    *v = plane[b];
                }
                let (idx, wts) = median_support(&vals);
                let c = wts[0] * vals[idx[0]] + wts[1] * vals[idx[1]];
                let k = 1.0 / (3.0 * channel_span(c));
                let gp = &mut gr[ch * n..(ch + 1) * n];
                for (a, &b) in gp.iter_mut().zip(g) {
                    *a += b * k;
                }
                for (&j, &wt) in idx.iter().zip(&wts) {
                    gp[border[j]] -= wt * k * gsum;
                }
            }
        }
        vec![gx]
    }
}

/// Differentiable [`decolorize_rows`].
pub fn decolorize_tape(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var, NumericsError> {
    let value = decolorize_rows(tape.value(x), h, w)?;
    tape.custom(&[x], value, Box::new(DecolorizeVjp { h, w }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference, reverse_grad, stream_rng};
    use rand::Rng;

    fn random_grid(h: usize, w: usize, rng: &mut impl Rng) -> Grid {
        let mut g = Grid::zeros(h, w);
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                g.data[r * w + c] = rng.random::<f64>();
            }
        }
        g
    }

    #[test]
    fn colorize_examples() {
        let c = ColorTriple::new([0.7, 0.5, 0.1]).unwrap();
        let img = colorize(&Grid::zeros(1, 1), c).unwrap();
        assert_eq!(img.pixel(0, 0), [0.7, 0.5, 0.1]);
        let img = colorize(&Grid::new(1, 1, vec![1.0]).unwrap(), c).unwrap();
        assert!((img.pixel(0, 0)[0] - 0.2).abs() < 1e-15);
        let c = ColorTriple([0.2, 0.2, 0.2]);
        let img = colorize(&Grid::new(1, 1, vec![0.5]).unwrap(), c).unwrap();
        assert!((img.pixel(0, 0)[0] - 0.45).abs() < 1e-15);
        let back = decolorize(&img, c);
        assert!((back.data[0] - 0.5).abs() < 1e-15);
        assert!(colorize(&Grid::zeros(1, 1), ColorTriple([1.0, 0.0, 0.0])).is_err());
        assert!(ColorTriple::new([0.1, -0.01, 0.3]).is_err());
    }

    #[test]
    fn round_trip() {
        let mut rng = stream_rng(1, 0);
        for _ in 0..200 {
            let g = random_grid(6, 5, &mut rng);
            let c = ColorTriple::new([rng.random(), rng.random(), rng.random()]).unwrap();
            let back = decolorize(&colorize(&g, c).unwrap(), c);
            for (a, b) in back.data.iter().zip(&g.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn border_frame() {
        let b = border_indices(4, 3);
        assert_eq!(b.len(), 2 * 4 + 2 * 3 - 4);
        let mut sorted = b.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, vec![0, 1, 2, 3, 5, 6, 8, 9, 10, 11]);
        assert_eq!(border_indices(12, 12).len(), 44);
    }

    #[test]
    fn background_recovery() {
        let mut rng = stream_rng(2, 0);
        let g = random_grid(12, 12, &mut rng);
        let c = ColorTriple::new([0.3, 0.6, 0.9]).unwrap();
        let img = colorize(&g, c).unwrap();
        assert_eq!(estimate_background(&img).unwrap(), c);
        let flat = colorize(&Grid::zeros(12, 12), c).unwrap();
        assert_eq!(estimate_background(&flat).unwrap(), c);
    }

    #[test]
    fn decolorize_rows_matches_known_color_path() {
        let mut rng = stream_rng(3, 0);
        let g = random_grid(5, 6, &mut rng);
        let c = ColorTriple::new([0.8, 0.05, 0.55]).unwrap();
        let img = colorize(&g, c).unwrap();
        let x = Tensor::matrix(1, img.data.len(), img.data.clone()).unwrap();
        let d = decolorize_rows(&x, 5, 6).unwrap();
        for (a, b) in d.data().iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decolorize_vjp_matches_finite_differences() {
        let mut rng = stream_rng(4, 0);
        let (h, w) = (4, 5);
        let x = Tensor::matrix(
            2,
            3 * h * w,
            (0..6 * h * w).map(|_| rng.random::<f64>() * 0.9 + 0.05).collect(),
        )
        .unwrap();
        let wts = Tensor::matrix(2, h * w, (0..2 * h * w).map(|_| rng.random::<f64>() - 0.5).collect())
            .unwrap();
        let f = |tape: &mut Tape, v: Var| {
            let d = decolorize_tape(tape, v, h, w)?;
            let p = tape.mul_const(d, wts.clone())?;
            tape.sum(p)
        };
        let g = reverse_grad(f, &x).unwrap();
        let fd = finite_difference(
            |y| decolorize_rows(y, h, w).unwrap().mul(&wts).unwrap().sum(),
            &x,
            1e-7,
        );
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
