//! Canonical sparse voxel representation and voxelization of raw points.
//!
//! Canonical row order is ascending (batch, z, y, x). Voxelization pools the
//! points of each occupied cell by arithmetic mean, accumulated in a fixed
//! order (points pre-sorted by voxel key then by full lexicographic point
//! value), so the result is bitwise independent of input point order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    /// World position of the corner of voxel (0, 0, 0), meters.
    pub origin: [f64; 3],
    /// Cell pitch per axis (dx, dy, dz), meters.
    pub voxel_size: [f64; 3],
    /// Cell counts per axis (H, W, D).
    pub extent: [u32; 3],
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], extent: [u32; 3]) -> Result<Self> {
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "voxel_size must be positive, got {voxel_size:?}"
            )));
        }
        if extent.iter().any(|&e| e < 1) {
            return Err(Error::InvalidConfig(format!(
                "grid extent must be >= 1 per axis, got {extent:?}"
            )));
        }
        Ok(VoxelGrid { origin, voxel_size, extent })
    }

    /// Integer cell of a world point, or None when outside the extent.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<[u32; 3]> {
        let mut c = [0u32; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if f < 0.0 || f >= self.extent[a] as f64 {
                return None;
            }
            c[a] = f as u32;
        }
        Some(c)
    }

    /// World position of a cell center.
    pub fn center(&self, c: &VoxelCoord) -> [f64; 3] {
        [
            self.origin[0] + (c.x as f64 + 0.5) * self.voxel_size[0],
            self.origin[1] + (c.y as f64 + 0.5) * self.voxel_size[1],
            self.origin[2] + (c.z as f64 + 0.5) * self.voxel_size[2],
        ]
    }

    /// Grid after an integer-stride merge: extents divide (ceil), pitch multiplies.
    pub fn coarsen(&self, stride: [u32; 3]) -> VoxelGrid {
        let mut g = self.clone();
        for a in 0..3 {
            g.extent[a] = self.extent[a].div_ceil(stride[a]);
            g.voxel_size[a] = self.voxel_size[a] * stride[a] as f64;
        }
        g
    }

    pub fn contains(&self, c: &VoxelCoord) -> bool {
        c.x < self.extent[0] && c.y < self.extent[1] && c.z < self.extent[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub batch: u32,
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub fn new(batch: u32, x: u32, y: u32, z: u32) -> Self {
        VoxelCoord { batch, x, y, z }
    }

    /// Canonical sort key: ascending (batch, z, y, x).
    pub fn canonical_key(&self) -> (u32, u32, u32, u32) {
        (self.batch, self.z, self.y, self.x)
    }
}

impl Ord for VoxelCoord {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.canonical_key().cmp(&other.canonical_key())
    }
}

impl PartialOrd for VoxelCoord {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Raw input points: P x (3 + F), xyz in meters plus F extra attributes.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Mat,
}

impl PointCloud {
    pub fn new(points: Mat) -> Result<Self> {
        if points.cols < 3 && points.rows > 0 {
            return Err(Error::DimensionMismatch {
                context: "point cloud columns (need at least xyz)",
                expected: 3,
                actual: points.cols,
            });
        }
        Ok(PointCloud { points })
    }

    pub fn attr_count(&self) -> usize {
        self.points.cols.saturating_sub(3)
    }
}

/// Sparse voxel tensor: unique canonical-ordered coords plus an L x C feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureSet {
    pub grid: VoxelGrid,
    pub coords: Vec<VoxelCoord>,
    pub features: Mat,
}

impl SparseFeatureSet {
    pub fn new(grid: VoxelGrid, coords: Vec<VoxelCoord>, features: Mat) -> Result<Self> {
        if coords.len() != features.rows {
            return Err(Error::DimensionMismatch {
                context: "feature rows vs coords",
                expected: coords.len(),
                actual: features.rows,
            });
        }
        let set = SparseFeatureSet { grid, coords, features };
        set.check_canonical()?;
        Ok(set)
    }

    pub fn empty(grid: VoxelGrid, channels: usize) -> Self {
        SparseFeatureSet {
            grid,
            coords: Vec::new(),
            features: Mat::zeros(0, channels),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols
    }

    fn check_canonical(&self) -> Result<()> {
        for w in self.coords.windows(2) {
            match w[0].canonical_key().cmp(&w[1].canonical_key()) {
                std::cmp::Ordering::Less => {}
                std::cmp::Ordering::Equal => return Err(Error::DuplicateCoordinate(w[1])),
                std::cmp::Ordering::Greater => {
                    return Err(Error::InvalidConfig(
                        "coords not in canonical order".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Reorders rows into canonical (batch, z, y, x) order; errors on duplicates.
pub fn canonicalize(set: &SparseFeatureSet) -> Result<SparseFeatureSet> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by_key(|&i| set.coords[i].canonical_key());
    for w in idx.windows(2) {
        if set.coords[w[0]] == set.coords[w[1]] {
            return Err(Error::DuplicateCoordinate(set.coords[w[1]]));
        }
    }
    let coords = idx.iter().map(|&i| set.coords[i]).collect();
    let features = set.features.gather_rows(&idx);
    Ok(SparseFeatureSet {
        grid: set.grid.clone(),
        coords,
        features,
    })
}

/// Quantizes points into occupied voxels; each voxel's feature row is the mean
/// of its points' rows, where a point row is its raw attributes followed by
/// the xyz offset from the voxel center. Points outside the grid are dropped.
pub fn voxelize(points: &PointCloud, grid: &VoxelGrid) -> SparseFeatureSet {
    let n_attr = points.attr_count();
    let channels = n_attr + 3;
    if points.points.rows == 0 {
        return SparseFeatureSet::empty(grid.clone(), channels);
    }

    // (cell, original row) for every in-grid point, pre-sorted for a fixed
    // accumulation order regardless of the input permutation.
    let mut kept: Vec<([u32; 3], usize)> = Vec::with_capacity(points.points.rows);
    for i in 0..points.points.rows {
        let r = points.points.row(i);
        if let Some(cell) = grid.cell_of([r[0], r[1], r[2]]) {
            kept.push((cell, i));
        }
    }
    kept.sort_by(|(ca, ia), (cb, ib)| {
        let ka = (ca[2], ca[1], ca[0]);
        let kb = (cb[2], cb[1], cb[0]);
        ka.cmp(&kb).then_with(|| {
            let ra = points.points.row(*ia);
            let rb = points.points.row(*ib);
            for (a, b) in ra.iter().zip(rb.iter()) {
                match a.total_cmp(b) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            std::cmp::Ordering::Equal
        })
    });

    let mut coords = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut i = 0;
    while i < kept.len() {
        let cell = kept[i].0;
        let coord = VoxelCoord::new(0, cell[0], cell[1], cell[2]);
        let center = grid.center(&coord);
        let mut acc = vec![0.0f64; channels];
        let mut n = 0usize;
        while i < kept.len() && kept[i].0 == cell {
            let p = points.points.row(kept[i].1);
            for a in 0..n_attr {
                acc[a] += p[3 + a];
            }
            for a in 0..3 {
                acc[n_attr + a] += p[a] - center[a];
            }
            n += 1;
            i += 1;
        }
        for v in acc.iter_mut() {
            *v /= n as f64;
        }
        coords.push(coord);
        rows.push(acc);
    }

    let features = if rows.is_empty() {
        Mat::zeros(0, channels)
    } else {
        Mat::from_rows(rows)
    };
    let set = SparseFeatureSet { grid: grid.clone(), coords, features };
    // Cells were visited in (z, y, x) order already; canonicalize is a no-op
    // but keeps the invariant explicit.
    canonicalize(&set).expect("voxelize produces unique coords")
}

// --- JSON form -------------------------------------------------------------
//
// {"grid": {"origin": [...], "voxel_size": [...], "extent": [...]},
//  "coords": [[b, x, y, z], ...],
//  "features": [[...], ...]}

#[derive(Serialize, Deserialize)]
struct SparseSetJson {
    grid: VoxelGrid,
    coords: Vec<[u32; 4]>,
    features: Vec<Vec<f64>>,
}

impl SparseFeatureSet {
    pub fn to_json(&self) -> serde_json::Value {
        let coords: Vec<[u32; 4]> = self
            .coords
            .iter()
            .map(|c| [c.batch, c.x, c.y, c.z])
            .collect();
        let features: Vec<Vec<f64>> = (0..self.len())
            .map(|i| self.features.row(i).to_vec())
            .collect();
        serde_json::to_value(SparseSetJson {
            grid: self.grid.clone(),
            coords,
            features,
        })
        .expect("sparse set serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let raw: SparseSetJson = serde_json::from_value(v.clone())?;
        let coords: Vec<VoxelCoord> = raw
            .coords
            .iter()
            .map(|c| VoxelCoord::new(c[0], c[1], c[2], c[3]))
            .collect();
        let channels = raw.features.first().map_or(0, |r| r.len());
        let features = if raw.features.is_empty() {
            Mat::zeros(0, channels)
        } else {
            Mat::from_rows(raw.features)
        };
        SparseFeatureSet::new(raw.grid, coords, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::collections::HashSet;

    fn grid_20x20x8() -> VoxelGrid {
        VoxelGrid::new([0.0; 3], [0.3, 0.3, 0.25], [20, 20, 8]).unwrap()
    }

    #[test]
    fn single_point_floor_division() {
        let grid = VoxelGrid::new([0.0; 3], [0.3, 0.3, 0.25], [10, 10, 10]).unwrap();
        let pts = PointCloud::new(Mat::from_rows(vec![vec![0.15, 0.15, 0.10, 1.0]])).unwrap();
        let set = voxelize(&pts, &grid);
        assert_eq!(set.len(), 1);
        assert_eq!(set.coords[0], VoxelCoord::new(0, 0, 0, 0));
    }

    #[test]
    fn same_voxel_attributes_mean() {
        let grid = grid_20x20x8();
        let pts = PointCloud::new(Mat::from_rows(vec![
            vec![0.05, 0.05, 0.05, 2.0],
            vec![0.25, 0.25, 0.20, 4.0],
        ]))
        .unwrap();
        let set = voxelize(&pts, &grid);
        assert_eq!(set.len(), 1);
        assert_eq!(set.features.at(0, 0), 3.0);
    }

    #[test]
    fn voxel_count_matches_hash_set_oracle() {
        let grid = grid_20x20x8();
        let mut rng = Rng::new(11);
        let mut rows = Vec::new();
        for _ in 0..1000 {
            rows.push(vec![
                rng.range(0.0, 6.0),
                rng.range(0.0, 6.0),
                rng.range(0.0, 2.0),
                rng.uniform(),
            ]);
        }
        let mut oracle: HashSet<(i64, i64, i64)> = HashSet::new();
        for r in &rows {
            let cx = (r[0] / 0.3).floor() as i64;
            let cy = (r[1] / 0.3).floor() as i64;
            let cz = (r[2] / 0.25).floor() as i64;
            if (0..20).contains(&cx) && (0..20).contains(&cy) && (0..8).contains(&cz) {
                oracle.insert((cx, cy, cz));
            }
        }
        let set = voxelize(&PointCloud::new(Mat::from_rows(rows)).unwrap(), &grid);
        assert_eq!(set.len(), oracle.len());
        for c in &set.coords {
            assert!(grid.contains(c));
        }
    }

    #[test]
    fn voxelize_permutation_invariant_bitwise() {
        let grid = grid_20x20x8();
        let mut rng = Rng::new(3);
        let mut rows = Vec::new();
        for _ in 0..200 {
            rows.push(vec![
                rng.range(0.0, 6.0),
                rng.range(0.0, 6.0),
                rng.range(0.0, 2.0),
                rng.uniform(),
            ]);
        }
        let fwd = voxelize(&PointCloud::new(Mat::from_rows(rows.clone())).unwrap(), &grid);
        rows.reverse();
        let rev = voxelize(&PointCloud::new(Mat::from_rows(rows)).unwrap(), &grid);
        assert_eq!(fwd.coords, rev.coords);
        assert_eq!(fwd.features.data, rev.features.data);
    }

    #[test]
    fn canonicalize_sorts_and_is_idempotent() {
        let grid = grid_20x20x8();
        let coords = vec![
            VoxelCoord::new(0, 3, 1, 0),
            VoxelCoord::new(0, 1, 1, 0),
            VoxelCoord::new(0, 0, 0, 0),
        ];
        let feats = Mat::from_rows(vec![vec![3.0], vec![2.0], vec![1.0]]);
        let set = SparseFeatureSet {
            grid,
            coords,
            features: feats,
        };
        let c1 = canonicalize(&set).unwrap();
        assert_eq!(c1.coords[0], VoxelCoord::new(0, 0, 0, 0));
        assert_eq!(c1.features.at(0, 0), 1.0);
        assert_eq!(c1.features.at(1, 0), 2.0);
        let c2 = canonicalize(&c1).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn canonicalize_rejects_duplicates() {
        let grid = grid_20x20x8();
        let set = SparseFeatureSet {
            grid,
            coords: vec![VoxelCoord::new(0, 1, 1, 1), VoxelCoord::new(0, 1, 1, 1)],
            features: Mat::zeros(2, 1),
        };
        assert!(matches!(
            canonicalize(&set),
            Err(Error::DuplicateCoordinate(_))
        ));
    }

    #[test]
    fn empty_input_empty_set() {
        let grid = grid_20x20x8();
        let set = voxelize(&PointCloud::new(Mat::zeros(0, 4)).unwrap(), &grid);
        assert!(set.is_empty());
        assert_eq!(set.channels(), 4);
    }

    #[test]
    fn json_round_trip_through_text() {
        let grid = grid_20x20x8();
        let set = SparseFeatureSet::new(
            grid,
            vec![VoxelCoord::new(0, 2, 1, 0), VoxelCoord::new(0, 0, 3, 1)],
            Mat::from_rows(vec![vec![1.5, -2.0], vec![0.25, 1e-9]]),
        )
        .unwrap();
        let canon = canonicalize(&set).unwrap();
        let text = serde_json::to_string(&canon.to_json()).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let back = SparseFeatureSet::from_json(&value).unwrap();
        assert_eq!(canon, back);
    }
}
