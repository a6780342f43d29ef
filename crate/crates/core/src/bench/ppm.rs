use std::io::Write;

use crate::subject::RgbImage;

/// Quantizes a channel value as `round(255 clamp(v, 0, 1))`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Binary PPM of images tiled row by row with a 1-pixel black gutter.
/// Every image must have the same size; short rows are padded black.
pub fn tile_ppm(rows: &[Vec<&RgbImage>]) -> Vec<u8> {
    tile_ppm_with_comment(rows, None)
}

/// [`tile_ppm`] with a `# comment` line after the magic number.
pub fn tile_ppm_with_comment(rows: &[Vec<&RgbImage>], comment: Option<&str>) -> Vec<u8> {
    let (h, w) = rows
        .iter()
        .flatten()
        .next()
        .map(|i| (i.h, i.w))
        .unwrap_or((0, 0));
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let width = cols * (w + 1) + 1;
    let height = rows.len() * (h + 1) + 1;
    let mut px = vec![0u8; width * height * 3];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let (oy, ox) = (ri * (h + 1) + 1, ci * (w + 1) + 1);
            for y in 0..h {
                for x in 0..w {
                    let p = img.pixel(y, x);
                    let at = ((oy + y) * width + ox + x) * 3;
                    for ch in 0..3 {
                        px[at + ch] = quantize(p[ch]);
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(px.len() + 20);
    writeln!(out, "P6").expect("vec write");
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}").expect("vec write");
        }
    }
    write!(out, "{width} {height}\n255\n").expect("vec write");
    out.extend(px);
    out
}

pub fn write_ppm(path: &std::path::Path, rows: &[Vec<&RgbImage>]) -> std::io::Result<()> {
    std::fs::write(path, tile_ppm(rows))
}
