//! `PFPF` network checkpoints.
//!
//! ```text
//! "PFPF"              4 bytes
//! version             u32 (currently 1)
//! layer_count         u32 (extractor layers + classifier)
//! dims                layer_count × (input u32, output u32)
//! payload             per layer: weight (output × input, row-major), then bias
//! ```
//! All integers and `f64` values are little-endian. The last layer is the
//! classifier; every earlier layer is followed by a ReLU.

use std::io::{Read, Write};

use super::mlp::{DenseLayer, MlpParams};
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"PFPF";
pub const MODEL_VERSION: u32 = 1;

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TruncatedFile(what.to_string()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut b, what)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "magic")?;
    if &b != magic {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(*magic),
            found: u32::from_be_bytes(b),
        });
    }
    Ok(())
}

pub fn write_model(w: &mut impl Write, params: &MlpParams) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    write_u32(w, MODEL_VERSION)?;
    let layers: Vec<&DenseLayer> = params.layers().collect();
    write_u32(w, layers.len() as u32)?;
    for l in &layers {
        write_u32(w, l.input_dim() as u32)?;
        write_u32(w, l.output_dim() as u32)?;
    }
    for l in &layers {
        write_f64s(w, l.weight.data())?;
        write_f64s(w, &l.bias)?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<MlpParams> {
    expect_magic(r, MODEL_MAGIC)?;
    let version = read_u32(r, "version")?;
    if version != MODEL_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported model checkpoint version {version}"
        )));
    }
    let count = read_u32(r, "layer count")? as usize;
    if count == 0 {
        return Err(Error::InvalidArgument("checkpoint has no layers".into()));
    }
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        let input = read_u32(r, "layer dims")? as usize;
        let output = read_u32(r, "layer dims")? as usize;
        dims.push((input, output));
    }
    let mut layers = Vec::with_capacity(count);
    for &(input, output) in &dims {
        let weight = Matrix::from_vec(output, input, read_f64s(r, input * output, "weights")?)?;
        let bias = read_f64s(r, output, "bias")?;
        layers.push(DenseLayer { weight, bias });
    }
    let classifier = layers.pop().expect("count >= 1");
    let params = MlpParams {
        extractor: layers,
        classifier,
    };
    params.validate()?;
    Ok(params)
}
