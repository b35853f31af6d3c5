//! Cloud serialization: PLY-compatible text for inspection and golden files,
//! and a compact binary container (`DPPC`) for stage hand-off.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use super::{NeuralPoint, NeuralPointCloud, FEATURE_DIM};

const MAGIC: &[u8; 4] = b"DPPC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CloudFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed cloud file at byte {offset}: {what}")]
    Malformed { offset: u64, what: String },
    #[error(transparent)]
    Points(#[from] super::PointsError),
}

/// ASCII PLY with per-vertex feature scalars, confidence, level and source
/// offset.
pub fn write_ply(cloud: &NeuralPointCloud, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "comment target_frame {}", cloud.target_frame)?;
    writeln!(out, "comment radius {:.17e}", cloud.radius)?;
    writeln!(out, "element vertex {}", cloud.points.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property float {axis}")?;
    }
    for i in 0..FEATURE_DIM {
        writeln!(out, "property float f{i}")?;
    }
    writeln!(out, "property float confidence")?;
    writeln!(out, "property uchar level")?;
    writeln!(out, "property char source_offset")?;
    writeln!(out, "end_header")?;
    for p in &cloud.points {
        write!(out, "{} {} {}", p.position.x as f32, p.position.y as f32, p.position.z as f32)?;
        for f in &p.feature {
            write!(out, " {f}")?;
        }
        writeln!(out, " {} {} {}", p.confidence() as f32, p.level, p.source_offset)?;
    }
    Ok(())
}

pub fn save_ply(cloud: &NeuralPointCloud, path: &Path) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_ply(cloud, &mut f)?;
    }
    std::fs::rename(tmp, path)
}

/// Vertex count declared by a PLY written with [`write_ply`].
pub fn ply_vertex_count(path: &Path) -> Result<usize, CloudFileError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    for line in f.lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("element vertex ") {
            return rest.trim().parse().map_err(|_| CloudFileError::Malformed {
                offset: 0,
                what: "bad vertex count".into(),
            });
        }
    }
    Err(CloudFileError::Malformed { offset: 0, what: "missing element vertex".into() })
}

pub fn write_binary(cloud: &NeuralPointCloud, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(cloud.target_frame as u32).to_le_bytes())?;
    out.write_all(&(cloud.max_neighbors as u32).to_le_bytes())?;
    out.write_all(&cloud.radius.to_le_bytes())?;
    out.write_all(&(FEATURE_DIM as u32).to_le_bytes())?;
    out.write_all(&(cloud.points.len() as u64).to_le_bytes())?;
    for p in &cloud.points {
        for c in [p.position.x, p.position.y, p.position.z] {
            out.write_all(&c.to_le_bytes())?;
        }
        for f in &p.feature {
            out.write_all(&f.to_le_bytes())?;
        }
        out.write_all(&p.confidence_logit.to_le_bytes())?;
        out.write_all(&[p.level, p.source_offset as u8])?;
    }
    Ok(())
}

pub fn read_binary(input: &mut impl Read) -> Result<NeuralPointCloud, CloudFileError> {
    let mut offset = 0u64;
    let mut take = |n: usize, what: &str| -> Result<Vec<u8>, CloudFileError> {
        let mut buf = vec![0u8; n];
        let at = offset;
        input
            .read_exact(&mut buf)
            .map_err(|_| CloudFileError::Malformed { offset: at, what: format!("truncated while reading {what}") })?;
        offset += n as u64;
        Ok(buf)
    };
    let magic = take(4, "magic")?;
    if magic != MAGIC {
        return Err(CloudFileError::Malformed { offset: 0, what: format!("bad magic {magic:?}") });
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(CloudFileError::Malformed { offset: 4, what: format!("unsupported version {version}") });
    }
    let target_frame = u32::from_le_bytes(take(4, "target frame")?.try_into().unwrap()) as usize;
    let max_neighbors = u32::from_le_bytes(take(4, "neighbor cap")?.try_into().unwrap()) as usize;
    let radius = f64::from_le_bytes(take(8, "radius")?.try_into().unwrap());
    let feat = u32::from_le_bytes(take(4, "feature dim")?.try_into().unwrap()) as usize;
    if feat != FEATURE_DIM {
        return Err(CloudFileError::Malformed { offset: offset - 4, what: format!("feature dim {feat} unsupported") });
    }
    if !(radius > 0.0) || max_neighbors == 0 {
        return Err(CloudFileError::Malformed { offset: 12, what: "nonpositive radius or neighbor cap".into() });
    }
    let count = u64::from_le_bytes(take(8, "point count")?.try_into().unwrap()) as usize;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = take(3 * 8 + FEATURE_DIM * 4 + 8 + 2, "point record")?;
        let mut at = 0;
        let f64_at = |raw: &[u8], at: &mut usize| {
            let v = f64::from_le_bytes(raw[*at..*at + 8].try_into().unwrap());
            *at += 8;
            v
        };
        let x = f64_at(&raw, &mut at);
        let y = f64_at(&raw, &mut at);
        let z = f64_at(&raw, &mut at);
        let mut feature = [0.0f32; FEATURE_DIM];
        for f in feature.iter_mut() {
            *f = f32::from_le_bytes(raw[at..at + 4].try_into().unwrap());
            at += 4;
        }
        let confidence_logit = f64_at(&raw, &mut at);
        let level = raw[at];
        let source_offset = raw[at + 1] as i8;
        points.push(NeuralPoint {
            position: Vector3::new(x, y, z),
            feature,
            confidence_logit,
            level,
            source_offset,
        });
    }
    Ok(NeuralPointCloud::from_points(points, target_frame, radius, max_neighbors)?)
}

pub fn save_binary(cloud: &NeuralPointCloud, path: &Path) -> Result<(), CloudFileError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_binary(cloud, &mut f)?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_binary(path: &Path) -> Result<NeuralPointCloud, CloudFileError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_binary(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> NeuralPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<NeuralPoint> = (0..n)
            .map(|i| NeuralPoint {
                position: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..3.0)),
                feature: std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0)),
                confidence_logit: rng.gen_range(-1.0..1.0),
                level: (i % 3 + 1) as u8,
                source_offset: (i as i64 % 5 - 2) as i8,
            })
            .collect();
        NeuralPointCloud::from_points(points, 4, 0.2, 8).unwrap()
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let cloud = random_cloud(3, 500);
        let mut buf = Vec::new();
        write_binary(&cloud, &mut buf).unwrap();
        let loaded = read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.points, cloud.points);
        assert_eq!(loaded.target_frame, cloud.target_frame);
        assert_eq!(loaded.radius, cloud.radius);
        let mut buf2 = Vec::new();
        write_binary(&loaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let cloud = random_cloud(5, 20);
        let mut buf = Vec::new();
        write_binary(&cloud, &mut buf).unwrap();
        buf.truncate(buf.len() - 7);
        match read_binary(&mut buf.as_slice()) {
            Err(CloudFileError::Malformed { offset, .. }) => assert!(offset > 0),
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn ply_header_counts_vertices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let cloud = random_cloud(7, 123);
        save_ply(&cloud, &path).unwrap();
        assert_eq!(ply_vertex_count(&path).unwrap(), 123);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert_eq!(text.lines().count(), 123 + 21);
    }
}
