//! On-disk raster formats: binary PPM images, PGM masks, PFM float depth
//! (NaN marks invalid), and the `DPFL` flow container. Readers reject
//! malformed input with the byte offset of the problem.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::DepthMap;
use crate::image::RgbImage;
use crate::masking::{FlowField, MaskImage, MaskKind, Segmentation};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path:?}: {source}")]
    Io {
        path: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what} at byte {offset}{}: {detail}", path_suffix(.path))]
    Malformed {
        what: &'static str,
        offset: u64,
        path: Option<PathBuf>,
        detail: String,
    },
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" in {}", p.display()),
        None => String::new(),
    }
}

impl FormatError {
    fn with_path(self, path: &Path) -> Self {
        match self {
            FormatError::Io { source, .. } => FormatError::Io { path: Some(path.to_path_buf()), source },
            FormatError::Malformed { what, offset, detail, .. } => {
                FormatError::Malformed { what, offset, path: Some(path.to_path_buf()), detail }
            }
        }
    }
}

impl From<std::io::Error> for FormatError {
    fn from(source: std::io::Error) -> Self {
        FormatError::Io { path: None, source }
    }
}

struct Reader<R> {
    inner: R,
    offset: u64,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    fn new(inner: R, what: &'static str) -> Self {
        Self { inner, offset: 0, what }
    }

    fn fail(&self, detail: impl Into<String>) -> FormatError {
        FormatError::Malformed { what: self.what, offset: self.offset, path: None, detail: detail.into() }
    }

    fn byte(&mut self) -> Result<u8, FormatError> {
        let mut b = [0u8; 1];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| self.fail("unexpected end of file"))?;
        self.offset += 1;
        Ok(b[0])
    }

    fn exact(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        self.inner
            .read_exact(buf)
            .map_err(|_| self.fail(format!("truncated: expected {} more bytes", buf.len())))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// One whitespace-delimited ASCII token, skipping `#` comments.
    fn token(&mut self) -> Result<String, FormatError> {
        let mut tok = String::new();
        loop {
            let b = self.byte()?;
            match b {
                b'#' => {
                    // comment to end of line
                    loop {
                        if self.byte()? == b'\n' {
                            break;
                        }
                    }
                }
                b' ' | b'\t' | b'\r' | b'\n' => {
                    if !tok.is_empty() {
                        return Ok(tok);
                    }
                }
                _ => tok.push(b as char),
            }
        }
    }

    fn usize_token(&mut self, name: &str) -> Result<usize, FormatError> {
        let t = self.token()?;
        t.parse().map_err(|_| self.fail(format!("bad {name} field {t:?}")))
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| FormatError::from(e).with_path(&tmp))?;
    std::fs::rename(&tmp, path).map_err(|e| FormatError::from(e).with_path(path))?;
    Ok(())
}

// ---- PPM (P6, 8-bit) ----

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(image.width * image.height * 3);
    for v in &image.data {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, FormatError> {
    let mut r = Reader::new(bytes, "PPM image");
    let magic = r.token()?;
    if magic != "P6" {
        return Err(r.fail(format!("bad magic {magic:?}, expected \"P6\"")));
    }
    let w = r.usize_token("width")?;
    let h = r.usize_token("height")?;
    let maxval = r.usize_token("maxval")?;
    if maxval != 255 {
        return Err(r.fail(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 || w * h > 1 << 28 {
        return Err(r.fail(format!("implausible dimensions {w}x{h}")));
    }
    let mut data = vec![0u8; w * h * 3];
    r.exact(&mut data)?;
    let mut img = RgbImage::new(w, h);
    for (i, b) in data.iter().enumerate() {
        img.data[i] = *b as f32 / 255.0;
    }
    Ok(img)
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<(), FormatError> {
    atomic_write(path, &encode_ppm(image))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::from(e).with_path(path))?;
    decode_ppm(&bytes).map_err(|e| e.with_path(path))
}

// ---- PGM (P5, binary masks: 0 and 255 only) ----

pub fn encode_pgm(bits: &[bool], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(bits.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(Vec<bool>, usize, usize), FormatError> {
    let mut r = Reader::new(bytes, "PGM mask");
    let magic = r.token()?;
    if magic != "P5" {
        return Err(r.fail(format!("bad magic {magic:?}, expected \"P5\"")));
    }
    let w = r.usize_token("width")?;
    let h = r.usize_token("height")?;
    let maxval = r.usize_token("maxval")?;
    if maxval != 255 {
        return Err(r.fail(format!("unsupported maxval {maxval}")));
    }
    let mut data = vec![0u8; w * h];
    let base = r.offset;
    r.exact(&mut data)?;
    let mut bits = Vec::with_capacity(w * h);
    for (i, b) in data.iter().enumerate() {
        match b {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                return Err(FormatError::Malformed {
                    what: "PGM mask",
                    offset: base + i as u64,
                    path: None,
                    detail: format!("mask byte must be 0 or 255, got {other}"),
                })
            }
        }
    }
    Ok((bits, w, h))
}

pub fn write_mask(path: &Path, mask: &MaskImage) -> Result<(), FormatError> {
    atomic_write(path, &encode_pgm(&mask.bits, mask.width, mask.height))
}

pub fn read_mask(path: &Path, kind: MaskKind) -> Result<MaskImage, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::from(e).with_path(path))?;
    let (bits, w, h) = decode_pgm(&bytes).map_err(|e| e.with_path(path))?;
    Ok(MaskImage::from_bits(w, h, bits, kind))
}

pub fn write_segmentation(path: &Path, seg: &Segmentation) -> Result<(), FormatError> {
    atomic_write(path, &encode_pgm(&seg.bits, seg.width, seg.height))
}

pub fn read_segmentation(path: &Path) -> Result<Segmentation, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::from(e).with_path(path))?;
    let (bits, w, h) = decode_pgm(&bytes).map_err(|e| e.with_path(path))?;
    Ok(Segmentation { width: w, height: h, bits })
}

// ---- PFM (grayscale float depth, scale -1.0 = little endian, NaN invalid) ----

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    // PFM stores rows bottom-to-top
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let v = match depth.get(x, y) {
                Some(d) => d as f32,
                None => f32::NAN,
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap, FormatError> {
    let mut r = Reader::new(bytes, "PFM depth");
    let magic = r.token()?;
    if magic != "Pf" {
        return Err(r.fail(format!("bad magic {magic:?}, expected grayscale \"Pf\"")));
    }
    let w = r.usize_token("width")?;
    let h = r.usize_token("height")?;
    let scale_tok = r.token()?;
    let scale: f64 = scale_tok.parse().map_err(|_| r.fail(format!("bad scale field {scale_tok:?}")))?;
    if scale >= 0.0 {
        return Err(r.fail("big-endian PFM (nonnegative scale) unsupported".to_string()));
    }
    let mut data = vec![0u8; w * h * 4];
    r.exact(&mut data)?;
    let mut depth = DepthMap::new_invalid(w, h);
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let x = i % w;
        let y_bottom = i / w;
        let y = h - 1 - y_bottom;
        if v.is_finite() && v > 0.0 {
            depth.set(x, y, v);
        }
    }
    Ok(depth)
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<(), FormatError> {
    atomic_write(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::from(e).with_path(path))?;
    decode_pfm(&bytes).map_err(|e| e.with_path(path))
}

// ---- DPFL (dense flow, f32 (du, dv) pairs, NaN invalid) ----

const FLOW_MAGIC: &[u8; 4] = b"DPFL";

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.vectors.len() * 8);
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(flow.width as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height as u32).to_le_bytes());
    for (v, valid) in flow.vectors.iter().zip(&flow.validity) {
        let (du, dv) = if *valid { (v[0] as f32, v[1] as f32) } else { (f32::NAN, f32::NAN) };
        out.extend_from_slice(&du.to_le_bytes());
        out.extend_from_slice(&dv.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField, FormatError> {
    let mut r = Reader::new(bytes, "DPFL flow");
    let mut magic = [0u8; 4];
    r.exact(&mut magic)?;
    if &magic != FLOW_MAGIC {
        return Err(FormatError::Malformed {
            what: "DPFL flow",
            offset: 0,
            path: None,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut dims = [0u8; 8];
    r.exact(&mut dims)?;
    let w = u32::from_le_bytes(dims[..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(dims[4..].try_into().unwrap()) as usize;
    if w == 0 || h == 0 || w * h > 1 << 28 {
        return Err(FormatError::Malformed {
            what: "DPFL flow",
            offset: 4,
            path: None,
            detail: format!("implausible dimensions {w}x{h}"),
        });
    }
    let mut data = vec![0u8; w * h * 8];
    r.exact(&mut data)?;
    let mut flow = FlowField::new_invalid(w, h);
    for (i, chunk) in data.chunks_exact(8).enumerate() {
        let du = f32::from_le_bytes(chunk[..4].try_into().unwrap()) as f64;
        let dv = f32::from_le_bytes(chunk[4..].try_into().unwrap()) as f64;
        if du.is_finite() && dv.is_finite() {
            flow.set(i % w, i / w, [du, dv]);
        }
    }
    Ok(flow)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), FormatError> {
    atomic_write(path, &encode_flow(flow))
}

pub fn read_flow(path: &Path) -> Result<FlowField, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::from(e).with_path(path))?;
    decode_flow(&bytes).map_err(|e| e.with_path(path))
}

/// Atomic plain-text write shared by logs and manifests.
pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    atomic_write(path, text.as_bytes())
}
