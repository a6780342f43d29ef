use std::path::Path;

use super::BenchError;
use crate::subject::Grid;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale digits with their labels. Grids are padded by one pixel on
/// every side when any image touches the border.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistData {
    pub grays: Vec<Grid>,
    pub labels: Vec<u8>,
    pub padded: bool,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, BenchError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| BenchError::Idx(format!("{what}: header truncated at byte {at}, file has {} bytes", bytes.len())))
}

fn check_len(bytes: &[u8], expected: usize, what: &str) -> Result<(), BenchError> {
    if bytes.len() < expected {
        return Err(BenchError::Idx(format!(
            "{what}: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    Ok(())
}

/// Parses IDX image bytes into `[0, 1]` grids.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Grid>, BenchError> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(BenchError::Idx(format!(
            "images: bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let h = be_u32(bytes, 8, "images")? as usize;
    let w = be_u32(bytes, 12, "images")? as usize;
    check_len(bytes, 16 + n * h * w, "images")?;
    (0..n)
        .map(|i| {
            let px = &bytes[16 + i * h * w..16 + (i + 1) * h * w];
            Ok(Grid::new(h, w, px.iter().map(|&b| b as f64 / 255.0).collect())?)
        })
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, BenchError> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(BenchError::Idx(format!(
            "labels: bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    check_len(bytes, 8 + n, "labels")?;
    Ok(bytes[8..8 + n].to_vec())
}

/// IDX image bytes of same-shape grids, values quantized to `round(255 v)`.
pub fn encode_idx_images(grays: &[Grid]) -> Result<Vec<u8>, BenchError> {
    let (h, w) = grays.first().map(|g| (g.h, g.w)).ok_or(BenchError::Empty("grids"))?;
    let mut b = Vec::with_capacity(16 + grays.len() * h * w);
    for v in [IMAGES_MAGIC, grays.len() as u32, h as u32, w as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    for g in grays {
        if (g.h, g.w) != (h, w) {
            return Err(BenchError::Config("all grids must share one shape".into()));
        }
        b.extend(g.data.iter().map(|&v| super::quantize(v)));
    }
    Ok(b)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + labels.len());
    b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn pad(g: &Grid) -> Grid {
    let (h, w) = (g.h + 2, g.w + 2);
    let mut data = vec![0.0; h * w];
    for r in 0..g.h {
        data[(r + 1) * w + 1..(r + 1) * w + 1 + g.w].copy_from_slice(&g.data[r * g.w..(r + 1) * g.w]);
    }
    Grid::new(h, w, data).expect("padded grid")
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<MnistData, BenchError> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| BenchError::Io(format!("{}: {e}", p.display())));
    let grays = parse_idx_images(&read(images)?)?;
    let labels = parse_idx_labels(&read(labels)?)?;
    if grays.len() != labels.len() {
        return Err(BenchError::Idx(format!(
            "{} images but {} labels",
            grays.len(),
            labels.len()
        )));
    }
    let padded = grays.iter().any(|g| !g.border_is_empty());
    let grays = if padded { grays.iter().map(pad).collect() } else { grays };
    Ok(MnistData { grays, labels, padded })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoders_round_trip() {
        let g = Grid::new(2, 3, vec![0.0, 1.0, 0.5, 0.25, 0.0, 1.0]).unwrap();
        let back = parse_idx_images(&encode_idx_images(&[g.clone(), g.clone()]).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back[1].data.iter().zip(&g.data) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
        assert_eq!(parse_idx_labels(&encode_idx_labels(&[3, 7])).unwrap(), vec![3, 7]);
    }

    fn idx_images(n: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    fn idx_labels(l: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(l.len() as u32).to_be_bytes());
        b.extend_from_slice(l);
        b
    }

    #[test]
    fn two_image_fixture() {
        let px: Vec<u8> = (0..18).map(|i| (i * 15) as u8).collect();
        let g = parse_idx_images(&idx_images(2, 3, 3, &px)).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].data[0], 135.0 / 255.0);
        assert_eq!(g[0].get(2, 2), 120.0 / 255.0);
    }

    #[test]
    fn truncated_fixture_reports_byte_counts() {
        let err = parse_idx_images(&idx_images(2, 3, 3, &[0; 10])).unwrap_err().to_string();
        assert!(err.contains("expected 34 bytes, found 26"), "{err}");
    }

    #[test]
    fn wrong_magic() {
        let err = parse_idx_labels(&idx_images(1, 1, 1, &[0])).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn load_pads_touching_images() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let mut px = vec![0u8; 16];
        px[0] = 255;
        std::fs::write(&ip, idx_images(1, 4, 4, &px)).unwrap();
        std::fs::write(&lp, idx_labels(&[7])).unwrap();
        let m = load_mnist_idx(&ip, &lp).unwrap();
        assert!(m.padded);
        assert_eq!((m.grays[0].h, m.grays[0].w), (6, 6));
        assert_eq!(m.grays[0].get(1, 1), 1.0);
        assert!(m.grays[0].border_is_empty());
        assert_eq!(m.labels, vec![7]);
        std::fs::write(&lp, idx_labels(&[7, 1])).unwrap();
        assert!(load_mnist_idx(&ip, &lp).is_err());
    }
}
