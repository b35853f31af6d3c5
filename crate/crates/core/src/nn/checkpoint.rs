//! Network checkpoint file: magic `DPNN`, format version, layer descriptors,
//! then row-major little-endian f32 weights and biases per layer; optimizer
//! state optionally appended under its own `ADAM` section tag.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Activation, AdamState, Layer, Mat, MlpParams};

pub const MAGIC: &[u8; 4] = b"DPNN";
pub const VERSION: u32 = 1;
const ADAM_TAG: &[u8; 4] = b"ADAM";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint at byte {offset}: {what}")]
    Malformed { offset: u64, what: String },
}

struct Counter<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counter<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, CheckpointError> {
        let at = self.offset;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| CheckpointError::Malformed {
            offset: at,
            what: format!("truncated while reading {what}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.bytes(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.bytes(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_to(out: &mut impl Write, params: &MlpParams, adam: Option<&AdamState>) -> Result<(), CheckpointError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for layer in &params.layers {
        out.write_all(&(layer.weight.rows as u32).to_le_bytes())?;
        out.write_all(&(layer.weight.cols as u32).to_le_bytes())?;
        out.write_all(&layer.activation.code().to_le_bytes())?;
    }
    for layer in &params.layers {
        for &v in &layer.weight.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in &layer.bias {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    if let Some(state) = adam {
        out.write_all(ADAM_TAG)?;
        out.write_all(&state.step.to_le_bytes())?;
        for v in [state.learning_rate, state.beta1, state.beta2, state.epsilon] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&(state.m.len() as u64).to_le_bytes())?;
        for &v in state.m.iter().chain(state.v.iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_from(input: &mut impl Read) -> Result<(MlpParams, Option<AdamState>), CheckpointError> {
    let mut r = Counter::new(input);
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::Malformed { offset: 0, what: format!("bad magic {magic:?}") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Malformed { offset: 4, what: format!("unsupported version {version}") });
    }
    let layer_count = r.u32("layer count")? as usize;
    if layer_count == 0 || layer_count > 64 {
        return Err(CheckpointError::Malformed { offset: 8, what: format!("implausible layer count {layer_count}") });
    }
    let mut shapes = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let at = r.offset;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let code = r.u32("activation")?;
        let activation = Activation::from_code(code).ok_or(CheckpointError::Malformed {
            offset: at + 8,
            what: format!("unknown activation code {code} in layer {i}"),
        })?;
        if rows == 0 || cols == 0 || rows > 1 << 20 || cols > 1 << 20 {
            return Err(CheckpointError::Malformed { offset: at, what: format!("implausible layer shape {rows}x{cols}") });
        }
        shapes.push((rows, cols, activation));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for &(rows, cols, activation) in &shapes {
        let wdata = r.f32_vec(rows * cols, "weights")?;
        let bias = r.f32_vec(cols, "biases")?;
        layers.push(Layer { weight: Mat { rows, cols, data: wdata }, bias, activation });
    }
    let params = MlpParams { layers };
    params.validate().map_err(|e| CheckpointError::Malformed { offset: r.offset, what: e.to_string() })?;

    // Optional trailing optimizer section.
    let mut tag = [0u8; 4];
    match r.inner.read(&mut tag)? {
        0 => Ok((params, None)),
        4 if &tag == ADAM_TAG => {
            r.offset += 4;
            let step = r.u64("adam step")?;
            let learning_rate = r.f64("adam lr")?;
            let beta1 = r.f64("adam beta1")?;
            let beta2 = r.f64("adam beta2")?;
            let epsilon = r.f64("adam eps")?;
            let n = r.u64("adam size")? as usize;
            if n != params.param_count() {
                return Err(CheckpointError::Malformed {
                    offset: r.offset - 8,
                    what: format!("optimizer size {n} does not match {} params", params.param_count()),
                });
            }
            let m = r.f64_vec(n, "adam m")?;
            let v = r.f64_vec(n, "adam v")?;
            Ok((params, Some(AdamState { step, learning_rate, beta1, beta2, epsilon, m, v })))
        }
        read => Err(CheckpointError::Malformed {
            offset: r.offset,
            what: format!("unexpected trailing section (read {read} bytes, tag {tag:?})"),
        }),
    }
}

pub fn save(path: &Path, params: &MlpParams, adam: Option<&AdamState>) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_to(&mut f, params, adam)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(MlpParams, Option<AdamState>), CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_from(&mut f)
}
