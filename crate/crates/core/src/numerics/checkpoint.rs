//! `FLB1` model files: magic, little-endian `u32` layer count, then per layer
//! `u32 rows`, `u32 cols`, `u8` activation tag, `rows*cols` weights and
//! `cols` biases as raw `f64`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Activation, Layer, Mlp, NumericsError, Tensor};

pub const MAGIC: &[u8; 4] = b"FLB1";

pub fn write_mlp<W: Write>(mlp: &Mlp, mut w: W) -> Result<(), NumericsError> {
    w.write_all(MAGIC)?;
    w.write_all(&(mlp.layers().len() as u32).to_le_bytes())?;
    for l in mlp.layers() {
        w.write_all(&(l.in_dim() as u32).to_le_bytes())?;
        w.write_all(&(l.out_dim() as u32).to_le_bytes())?;
        w.write_all(&[l.activation.tag()])?;
        for v in l.weight.data().iter().chain(l.bias.data()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn encode_mlp(mlp: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    write_mlp(mlp, &mut out).expect("writing to a Vec cannot fail");
    out
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), NumericsError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            NumericsError::Checkpoint(format!("truncated while reading {what}"))
        }
        _ => NumericsError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>, NumericsError> {
    let mut buf = vec![0u8; n * 8];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_mlp<R: Read>(mut r: R) -> Result<Mlp, NumericsError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(NumericsError::Checkpoint(format!(
            "bad magic {magic:?}, expected \"FLB1\""
        )));
    }
    let count = read_u32(&mut r, "layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let rows = read_u32(&mut r, "layer rows")? as usize;
        let cols = read_u32(&mut r, "layer cols")? as usize;
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag, "activation tag")?;
        let activation = Activation::from_tag(tag[0]).ok_or_else(|| {
            NumericsError::Checkpoint(format!("layer {i}: unknown activation tag {}", tag[0]))
        })?;
        let w = read_f64s(&mut r, rows * cols, "weights")?;
        let b = read_f64s(&mut r, cols, "biases")?;
        layers.push(Layer {
            weight: Arc::new(Tensor::matrix(rows, cols, w)?),
            bias: Arc::new(Tensor::vector(b)),
            activation,
        });
    }
    Mlp::new(layers)
}

pub fn save_mlp(mlp: &Mlp, path: &Path) -> Result<(), NumericsError> {
    std::fs::write(path, encode_mlp(mlp))?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<Mlp, NumericsError> {
    let bytes = std::fs::read(path)?;
    read_mlp(bytes.as_slice())
}
