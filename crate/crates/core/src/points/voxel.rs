//! Uniform voxel hash over point positions, cell size equal to the query
//! radius so a 27-cell probe is exhaustive.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use nalgebra::Vector3;

/// Splitmix-style hasher for voxel keys; queries hash 27 cells apiece, so
/// the default SipHash is measurable overhead.
#[derive(Default)]
pub struct CellHasher(u64);

impl Hasher for CellHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            let mut x = self.0 ^ u64::from_le_bytes(buf);
            x = x.wrapping_add(0x9e3779b97f4a7c15);
            x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
            self.0 = x ^ (x >> 31);
        }
    }

    fn write_u64(&mut self, i: u64) {
        let mut x = self.0 ^ i;
        x = x.wrapping_add(0x9e3779b97f4a7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        self.0 = x ^ (x >> 31);
    }

    fn write_i64(&mut self, i: i64) {
        self.write_u64(i as u64);
    }
}

type CellMap = HashMap<(i64, i64, i64), Vec<u32>, BuildHasherDefault<CellHasher>>;

#[derive(Debug, Clone)]
pub struct VoxelIndex {
    cell: f64,
    cells: CellMap,
}

impl VoxelIndex {
    pub fn build(positions: impl Iterator<Item = Vector3<f64>>, cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: CellMap = CellMap::default();
        for (i, p) in positions.enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Self { cell, cells }
    }

    #[inline]
    fn key(p: Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// Indices of all points within `radius <= cell` of `q` (inclusive),
    /// sorted ascending by distance with insertion-order tie-breaks, capped
    /// at `max_results`.
    pub fn query(
        &self,
        q: Vector3<f64>,
        radius: f64,
        max_results: usize,
        position_of: impl Fn(u32) -> Vector3<f64>,
    ) -> Vec<(u32, f64)> {
        debug_assert!(radius <= self.cell + 1e-12, "query radius must not exceed the cell size");
        let (cx, cy, cz) = Self::key(q, self.cell);
        let mut hits: Vec<(u32, f64)> = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &id in ids {
                            let d = (position_of(id) - q).norm();
                            if d <= radius {
                                hits.push((id, d));
                            }
                        }
                    }
                }
            }
        }
        hits.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        hits.truncate(max_results);
        hits
    }
}
