//! Token-level unification of modalities and time.
//!
//! Camera pixels lift into voxels along their top-K most confident depth
//! candidates (pinhole model, z-depth at bin midpoints, pixel centers at
//! +0.5); duplicate camera voxels sum their features. LiDAR/camera overlap
//! and cross-frame overlap merge by mean. Historical frames live in a FIFO
//! memory bank and are rigidly re-aligned into the current ego frame before
//! fusion.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::voxel::{SparseFeatureSet, VoxelCoord, VoxelGrid};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    /// Camera-to-ego rigid transform.
    pub extrinsics: [[f64; 4]; 4],
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
}

impl CameraModel {
    fn intrinsics_inverse(&self) -> Result<[[f64; 3]; 3]> {
        let m = &self.intrinsics;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-12 {
            return Err(Error::SingularIntrinsics { det });
        }
        let inv_det = 1.0 / det;
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b, c, d) = (
                    m[(i + 1) % 3][(j + 1) % 3],
                    m[(i + 1) % 3][(j + 2) % 3],
                    m[(i + 2) % 3][(j + 1) % 3],
                    m[(i + 2) % 3][(j + 2) % 3],
                );
                inv[j][i] = (a * d - b * c) * inv_det;
            }
        }
        Ok(inv)
    }
}

/// Per-pixel feature rows plus per-pixel depth-bin confidence scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthCandidateRaster {
    /// (h * w) x C pixel features, row-major over (row, col).
    pub features: Mat,
    /// (h * w) x B confidence scores.
    pub scores: Mat,
    /// B + 1 bin edges in meters; candidate depth is the bin midpoint.
    pub bin_edges: Vec<f64>,
}

/// Frame-to-world rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoPose(pub [[f64; 4]; 4]);

impl EgoPose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        EgoPose(m)
    }

    /// Frobenius deviation of R^T R from the identity.
    pub fn rigidity_deviation(&self) -> f64 {
        let r = &self.0;
        let mut dev = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                dev += (dot - target) * (dot - target);
            }
        }
        dev.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let dev = self.rigidity_deviation();
        if dev > 1e-9 {
            return Err(Error::NonRigidPose { deviation: dev });
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    /// Rigid inverse: [R^T, -R^T t].
    pub fn inverse(&self) -> EgoPose {
        let m = &self.0;
        let mut inv = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = m[j][i];
            }
        }
        for i in 0..3 {
            inv[i][3] = -(m[0][i] * m[0][3] + m[1][i] * m[1][3] + m[2][i] * m[2][3]);
        }
        inv[3][3] = 1.0;
        EgoPose(inv)
    }

    pub fn compose(&self, other: &EgoPose) -> EgoPose {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        EgoPose(out)
    }
}

/// FIFO ring of past frames' post-VFE token sets with their ego poses.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    frames: VecDeque<(SparseFeatureSet, EgoPose)>,
    capacity: usize,
}

impl MemoryBank {
    /// Default capacity 3: with the current frame that spans 4 consecutive frames.
    pub fn new() -> Self {
        Self::with_capacity(3)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        MemoryBank {
            frames: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, set: SparseFeatureSet, pose: EgoPose) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back((set, pose));
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &(SparseFeatureSet, EgoPose)> {
        self.frames.iter()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self::new()
    }
}

/// Grouping of duplicate coordinates: canonical-ordered unique coords plus,
/// per coord, the source indices that map there (kept in input order).
pub(crate) fn merge_structure(
    entries: &[(VoxelCoord, usize)],
) -> (Vec<VoxelCoord>, Vec<Vec<usize>>) {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| (entries[i].0.canonical_key(), i));
    let mut coords = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let coord = entries[order[i]].0;
        let mut group = Vec::new();
        while i < order.len() && entries[order[i]].0 == coord {
            group.push(entries[order[i]].1);
            i += 1;
        }
        coords.push(coord);
        groups.push(group);
    }
    (coords, groups)
}

/// Deterministic duplicate-coordinate reduction. Rows are grouped by coord
/// (contributions kept in input order inside each group), then summed in that
/// order; mean divides by the group size. Output is canonical.
pub(crate) fn merge_rows(
    grid: &VoxelGrid,
    entries: &[(VoxelCoord, usize)],
    features: &Mat,
    mean: bool,
) -> (SparseFeatureSet, Vec<Vec<usize>>) {
    let (coords, groups) = merge_structure(entries);
    let c = features.cols;
    let mut out = Mat::zeros(coords.len(), c);
    for (p, group) in groups.iter().enumerate() {
        let row = out.row_mut(p);
        for &src in group {
            for (a, v) in row.iter_mut().zip(features.row(src)) {
                *a += v;
            }
        }
        if mean {
            let n = group.len() as f64;
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
    (
        SparseFeatureSet {
            grid: grid.clone(),
            coords,
            features: out,
        },
        groups,
    )
}

/// Structure of a camera lift: which voxel each surviving candidate feeds,
/// and with what confidence weight. Shared by the plain op and the tape op.
#[derive(Debug, Clone)]
pub struct LiftPlan {
    /// (pixel row, weight, voxel coord) per surviving candidate, pixel-major.
    pub contributions: Vec<(usize, f64, VoxelCoord)>,
}

pub fn lift_plan(
    raster: &DepthCandidateRaster,
    cam: &CameraModel,
    grid: &VoxelGrid,
    k: usize,
) -> Result<LiftPlan> {
    let b = raster.bin_edges.len().saturating_sub(1);
    if raster.scores.cols != b || k > b {
        return Err(Error::DimensionMismatch {
            context: "depth bins vs scores/top-k",
            expected: b,
            actual: raster.scores.cols.min(k),
        });
    }
    let (h, w) = cam.image_size;
    if raster.features.rows != h * w {
        return Err(Error::DimensionMismatch {
            context: "raster pixel rows",
            expected: h * w,
            actual: raster.features.rows,
        });
    }
    let kinv = cam.intrinsics_inverse()?;
    let ext = EgoPose(cam.extrinsics);
    let mut contributions = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let pix = row * w + col;
            let scores = raster.scores.row(pix);
            // top-K by confidence, ties broken toward the lower bin index
            let mut bins: Vec<usize> = (0..b).collect();
            bins.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
            let top = &bins[..k];
            let total: f64 = top.iter().map(|&i| scores[i]).sum();
            if !(total > 1e-12) {
                continue; // no usable confidence mass at this pixel
            }
            for &bin in top {
                let weight = scores[bin] / total;
                let depth = 0.5 * (raster.bin_edges[bin] + raster.bin_edges[bin + 1]);
                // pixel center through the inverse intrinsics, scaled to z = depth
                let px = [col as f64 + 0.5, row as f64 + 0.5, 1.0];
                let mut ray = [0.0; 3];
                for (i, r) in ray.iter_mut().enumerate() {
                    *r = kinv[i][0] * px[0] + kinv[i][1] * px[1] + kinv[i][2] * px[2];
                }
                if ray[2].abs() < 1e-12 {
                    continue;
                }
                let s = depth / ray[2];
                let cam_pt = [ray[0] * s, ray[1] * s, depth];
                let ego = ext.apply(cam_pt);
                if let Some(cell) = grid.cell_of(ego) {
                    contributions.push((pix, weight, VoxelCoord::new(0, cell[0], cell[1], cell[2])));
                }
            }
        }
    }
    Ok(LiftPlan { contributions })
}

/// Unprojects each pixel along its top-K depth candidates; each emitted voxel
/// carries the pixel feature scaled by the candidate's normalized confidence,
/// and duplicate camera voxels sum elementwise.
pub fn lift_camera(
    raster: &DepthCandidateRaster,
    cam: &CameraModel,
    grid: &VoxelGrid,
    k: usize,
) -> Result<SparseFeatureSet> {
    let plan = lift_plan(raster, cam, grid, k)?;
    let c = raster.features.cols;
    let mut weighted = Mat::zeros(plan.contributions.len(), c);
    let mut entries = Vec::with_capacity(plan.contributions.len());
    for (i, &(pix, wgt, coord)) in plan.contributions.iter().enumerate() {
        let src = raster.features.row(pix);
        let dst = weighted.row_mut(i);
        for (d, s) in dst.iter_mut().zip(src) {
            *d = wgt * s;
        }
        entries.push((coord, i));
    }
    let (set, _) = merge_rows(grid, &entries, &weighted, false);
    Ok(set)
}

/// Row-wise union of the two modalities; coordinates occupied by both merge
/// to the mean of the two rows.
pub fn concat_modalities(
    vl: &SparseFeatureSet,
    vc: &SparseFeatureSet,
) -> Result<SparseFeatureSet> {
    if vl.grid != vc.grid {
        return Err(Error::GridMismatch);
    }
    if vl.channels() != vc.channels() {
        return Err(Error::DimensionMismatch {
            context: "modality channels",
            expected: vl.channels(),
            actual: vc.channels(),
        });
    }
    let mut stacked = Mat::zeros(vl.len() + vc.len(), vl.channels());
    let mut entries = Vec::with_capacity(vl.len() + vc.len());
    for (i, coord) in vl.coords.iter().enumerate() {
        stacked.row_mut(i).copy_from_slice(vl.features.row(i));
        entries.push((*coord, i));
    }
    for (i, coord) in vc.coords.iter().enumerate() {
        stacked
            .row_mut(vl.len() + i)
            .copy_from_slice(vc.features.row(i));
        entries.push((*coord, vl.len() + i));
    }
    let (set, _) = merge_rows(&vl.grid, &entries, &stacked, true);
    Ok(set)
}

/// Re-voxelized coordinates of a previous frame's voxels in the current ego
/// frame, paired with the original row index; out-of-grid voxels dropped.
pub(crate) fn align_entries(
    prev: &SparseFeatureSet,
    pose_prev: &EgoPose,
    pose_cur: &EgoPose,
    grid: &VoxelGrid,
) -> Result<Vec<(VoxelCoord, usize)>> {
    pose_prev.validate()?;
    pose_cur.validate()?;
    let rel = pose_cur.inverse().compose(pose_prev);
    let mut entries = Vec::with_capacity(prev.len());
    for (i, coord) in prev.coords.iter().enumerate() {
        let center = prev.grid.center(coord);
        let moved = rel.apply(center);
        if let Some(cell) = grid.cell_of(moved) {
            entries.push((VoxelCoord::new(coord.batch, cell[0], cell[1], cell[2]), i));
        }
    }
    Ok(entries)
}

/// Transforms a previous frame's voxel centers into the current frame and
/// re-voxelizes; collisions merge by mean.
pub fn align_temporal(
    prev: &SparseFeatureSet,
    pose_prev: &EgoPose,
    pose_cur: &EgoPose,
    grid: &VoxelGrid,
) -> Result<SparseFeatureSet> {
    let entries = align_entries(prev, pose_prev, pose_cur, grid)?;
    let (set, _) = merge_rows(grid, &entries, &prev.features, true);
    Ok(set)
}

/// Concatenates all aligned historical sets with the current set, merging
/// overlaps by mean, then pushes the current frame into the bank.
pub fn fuse_frame(
    cur: &SparseFeatureSet,
    pose_cur: &EgoPose,
    bank: &mut MemoryBank,
) -> Result<SparseFeatureSet> {
    pose_cur.validate()?;
    let mut stacked_rows: Vec<Vec<f64>> = Vec::new();
    let mut entries: Vec<(VoxelCoord, usize)> = Vec::new();
    for (set, pose) in bank.iter() {
        let aligned = align_entries(set, pose, pose_cur, &cur.grid)?;
        for (coord, src) in aligned {
            entries.push((coord, stacked_rows.len()));
            stacked_rows.push(set.features.row(src).to_vec());
        }
    }
    for (i, coord) in cur.coords.iter().enumerate() {
        entries.push((*coord, stacked_rows.len()));
        stacked_rows.push(cur.features.row(i).to_vec());
    }
    let stacked = if stacked_rows.is_empty() {
        Mat::zeros(0, cur.channels())
    } else {
        Mat::from_rows(stacked_rows)
    };
    let (fused, _) = merge_rows(&cur.grid, &entries, &stacked, true);
    bank.push(cur.clone(), pose_cur.clone());
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::scan::tests::random_mat;
    use std::collections::BTreeMap;

    fn grid() -> VoxelGrid {
        VoxelGrid::new([-8.0, -8.0, -2.0], [0.5, 0.5, 0.5], [32, 32, 8]).unwrap()
    }

    fn front_camera(h: usize, w: usize) -> CameraModel {
        // camera at origin looking along +x: camera z -> ego x, x -> -y, y -> -z
        CameraModel {
            intrinsics: [[4.0, 0.0, w as f64 / 2.0], [0.0, 4.0, h as f64 / 2.0], [0.0, 0.0, 1.0]],
            extrinsics: [
                [0.0, 0.0, 1.0, 0.0],
                [-1.0, 0.0, 0.0, 0.0],
                [0.0, -1.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            image_size: (h, w),
        }
    }

    fn uniform_edges(b: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..=b).map(|i| lo + (hi - lo) * i as f64 / b as f64).collect()
    }

    #[test]
    fn single_candidate_single_voxel() {
        let g = grid();
        let cam = front_camera(4, 4);
        let b = 8;
        let mut scores = Mat::zeros(16, b);
        // peak confidence at bin 3 for pixel (2, 2) only; zero-score pixels emit nothing
        *scores.at_mut(2 * 4 + 2, 3) = 1.0;
        let raster = DepthCandidateRaster {
            features: Mat::from_fn(16, 2, |i, j| (i + j) as f64),
            scores,
            bin_edges: uniform_edges(b, 1.0, 5.0),
        };
        let set = lift_camera(&raster, &cam, &g, 1).unwrap();
        assert_eq!(set.len(), 1);
        // depth = midpoint of bin 3 = 2.75; pixel center (2.5, 2.5) sits
        // (0.5, 0.5) pixels off the principal point (2, 2), f = 4
        let off = 0.5 / 4.0 * 2.75;
        let expect = g.cell_of([2.75, -off, -off]).unwrap();
        assert_eq!(set.coords[0], VoxelCoord::new(0, expect[0], expect[1], expect[2]));
    }

    #[test]
    fn duplicate_camera_voxels_sum() {
        let g = grid();
        // narrow-fov camera with the principal point at the left edge: both
        // pixel rays deflect to the same side and land in one 0.5 m cell
        let mut cam = front_camera(1, 2);
        cam.intrinsics = [[20.0, 0.0, 0.0], [0.0, 20.0, 0.5], [0.0, 0.0, 1.0]];
        let b = 4;
        let mut scores = Mat::zeros(2, b);
        *scores.at_mut(0, 1) = 1.0;
        *scores.at_mut(1, 1) = 1.0;
        let raster = DepthCandidateRaster {
            features: Mat::from_rows(vec![vec![1.0, 2.0], vec![10.0, 20.0]]),
            scores,
            bin_edges: uniform_edges(b, 1.0, 3.0),
        };
        let set = lift_camera(&raster, &cam, &g, 1).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.features.row(0), &[11.0, 22.0]);
    }

    #[test]
    fn lift_matches_loop_oracle() {
        let g = grid();
        let cam = front_camera(8, 8);
        let b = 12;
        let k = 4;
        let mut rng = Rng::new(77);
        let scores = Mat::from_fn(64, b, |_, _| rng.uniform());
        let features = random_mat(&mut rng, 64, 3, 1.0);
        let raster = DepthCandidateRaster {
            features: features.clone(),
            scores: scores.clone(),
            bin_edges: uniform_edges(b, 1.0, 10.0),
        };
        let set = lift_camera(&raster, &cam, &g, k).unwrap();
        assert!(set.len() <= 64 * k);

        // independent loop: accumulate into a BTreeMap in candidate order
        let kinv_fx = 1.0 / 4.0;
        let mut oracle: BTreeMap<(u32, u32, u32, u32), Vec<f64>> = BTreeMap::new();
        for row in 0..8usize {
            for col in 0..8usize {
                let pix = row * 8 + col;
                let mut bins: Vec<usize> = (0..b).collect();
                bins.sort_by(|&i, &j| {
                    scores.at(pix, j).total_cmp(&scores.at(pix, i)).then(i.cmp(&j))
                });
                let top = &bins[..k];
                let total: f64 = top.iter().map(|&i| scores.at(pix, i)).sum();
                if !(total > 1e-12) {
                    continue;
                }
                for &bin in top {
                    let wgt = scores.at(pix, bin) / total;
                    let depth = 0.5 * (raster.bin_edges[bin] + raster.bin_edges[bin + 1]);
                    let xc = (col as f64 + 0.5 - 4.0) * kinv_fx * depth;
                    let yc = (row as f64 + 0.5 - 4.0) * kinv_fx * depth;
                    let ego = [depth, -xc, -yc];
                    if let Some(cell) = g.cell_of(ego) {
                        let key = (0u32, cell[2], cell[1], cell[0]); // canonical (b, z, y, x)
                        let acc = oracle.entry(key).or_insert_with(|| vec![0.0; 3]);
                        for ch in 0..3 {
                            acc[ch] += wgt * features.at(pix, ch);
                        }
                    }
                }
            }
        }
        assert_eq!(set.len(), oracle.len());
        for (i, ((_, z, y, x), feat)) in oracle.iter().enumerate() {
            assert_eq!(set.coords[i], VoxelCoord::new(0, *x, *y, *z));
            for ch in 0..3 {
                let got = set.features.at(i, ch);
                assert!((got - feat[ch]).abs() <= 1e-12 * feat[ch].abs().max(1.0));
            }
        }
    }

    #[test]
    fn concat_disjoint_and_overlapping() {
        let g = grid();
        let a = SparseFeatureSet::new(
            g.clone(),
            vec![VoxelCoord::new(0, 1, 1, 1)],
            Mat::from_rows(vec![vec![2.0]]),
        )
        .unwrap();
        let bset = SparseFeatureSet::new(
            g.clone(),
            vec![VoxelCoord::new(0, 2, 2, 2)],
            Mat::from_rows(vec![vec![5.0]]),
        )
        .unwrap();
        let disjoint = concat_modalities(&a, &bset).unwrap();
        assert_eq!(disjoint.len(), 2);
        let same = SparseFeatureSet::new(
            g,
            vec![VoxelCoord::new(0, 1, 1, 1)],
            Mat::from_rows(vec![vec![4.0]]),
        )
        .unwrap();
        let merged = concat_modalities(&a, &same).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged.features.at(0, 0), 3.0);
    }

    #[test]
    fn concat_commutative_and_identity_on_empty() {
        let mut rng = Rng::new(5);
        let base = crate::partition::tests::random_coord_set(&mut rng, [16, 16, 8], 100);
        let g = base.grid.clone();
        let a = SparseFeatureSet {
            features: random_mat(&mut rng, base.len(), 4, 1.0),
            ..base.clone()
        };
        let bset = {
            let other = crate::partition::tests::random_coord_set(&mut rng, [16, 16, 8], 100);
            SparseFeatureSet {
                grid: g.clone(),
                features: random_mat(&mut rng, other.len(), 4, 1.0),
                coords: other.coords,
            }
        };
        let ab = concat_modalities(&a, &bset).unwrap();
        let ba = concat_modalities(&bset, &a).unwrap();
        assert_eq!(ab.coords, ba.coords);
        assert_eq!(ab.features.data, ba.features.data);
        // empty camera side: exact identity (bitwise)
        let empty = SparseFeatureSet::empty(g, 4);
        let same = concat_modalities(&a, &empty).unwrap();
        assert_eq!(same.coords, a.coords);
        assert_eq!(same.features.data, a.features.data);
    }

    #[test]
    fn concat_matches_hash_merge_oracle() {
        let mut rng = Rng::new(6);
        let base = crate::partition::tests::random_coord_set(&mut rng, [8, 8, 4], 120);
        let g = base.grid.clone();
        let a = SparseFeatureSet {
            features: random_mat(&mut rng, base.len(), 2, 1.0),
            ..base
        };
        let other = crate::partition::tests::random_coord_set(&mut rng, [8, 8, 4], 120);
        let bset = SparseFeatureSet {
            grid: g.clone(),
            features: random_mat(&mut rng, other.len(), 2, 1.0),
            coords: other.coords,
        };
        let out = concat_modalities(&a, &bset).unwrap();
        let mut oracle: BTreeMap<(u32, u32, u32, u32), (Vec<f64>, usize)> = BTreeMap::new();
        for (set_ref, _) in [(&a, 0), (&bset, 1)] {
            for (i, c) in set_ref.coords.iter().enumerate() {
                let e = oracle
                    .entry(c.canonical_key())
                    .or_insert((vec![0.0; 2], 0));
                for ch in 0..2 {
                    e.0[ch] += set_ref.features.at(i, ch);
                }
                e.1 += 1;
            }
        }
        assert_eq!(out.len(), oracle.len());
        for (i, (_, (sum, n))) in oracle.iter().enumerate() {
            for ch in 0..2 {
                let expect = sum[ch] / *n as f64;
                assert!((out.features.at(i, ch) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn align_identity_pose_is_identity() {
        let mut rng = Rng::new(7);
        let base = crate::partition::tests::random_coord_set(&mut rng, [32, 32, 8], 200);
        let g = VoxelGrid::new([-8.0, -8.0, -2.0], [0.5, 0.5, 0.5], [32, 32, 8]).unwrap();
        let set = SparseFeatureSet {
            grid: g.clone(),
            features: random_mat(&mut rng, base.len(), 3, 1.0),
            coords: base.coords,
        };
        let pose = EgoPose::identity();
        let out = align_temporal(&set, &pose, &pose, &g).unwrap();
        assert_eq!(out.coords, set.coords);
        assert_eq!(out.features.data, set.features.data);
    }

    #[test]
    fn align_one_pitch_translation_shifts_x() {
        let mut rng = Rng::new(8);
        let base = crate::partition::tests::random_coord_set(&mut rng, [32, 32, 8], 150);
        let g = VoxelGrid::new([-8.0, -8.0, -2.0], [0.5, 0.5, 0.5], [32, 32, 8]).unwrap();
        let set = SparseFeatureSet {
            grid: g.clone(),
            features: random_mat(&mut rng, base.len(), 2, 1.0),
            coords: base.coords,
        };
        // previous frame sat one voxel pitch behind along x
        let mut prev = EgoPose::identity();
        prev.0[0][3] = -0.5;
        let cur = EgoPose::identity();
        let out = align_temporal(&set, &prev, &cur, &g).unwrap();
        let expected: Vec<VoxelCoord> = set
            .coords
            .iter()
            .filter(|c| c.x >= 1)
            .map(|c| VoxelCoord::new(c.batch, c.x - 1, c.y, c.z))
            .collect();
        let mut expected_sorted = expected;
        expected_sorted.sort();
        assert_eq!(out.coords, expected_sorted);
    }

    #[test]
    fn align_small_rotation_matches_per_voxel_oracle() {
        let mut rng = Rng::new(9);
        let base = crate::partition::tests::random_coord_set(&mut rng, [32, 32, 8], 200);
        let g = VoxelGrid::new([-8.0, -8.0, -2.0], [0.5, 0.5, 0.5], [32, 32, 8]).unwrap();
        let set = SparseFeatureSet {
            grid: g.clone(),
            features: random_mat(&mut rng, base.len(), 2, 1.0),
            coords: base.coords,
        };
        let th = 0.05f64;
        let prev = EgoPose([
            [th.cos(), -th.sin(), 0.0, 0.3],
            [th.sin(), th.cos(), 0.0, -0.2],
            [0.0, 0.0, 1.0, 0.1],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        let cur = EgoPose::identity();
        let out = align_temporal(&set, &prev, &cur, &g).unwrap();
        // per-voxel transform + floor oracle
        let mut oracle: BTreeMap<(u32, u32, u32, u32), (Vec<f64>, usize)> = BTreeMap::new();
        for (i, c) in set.coords.iter().enumerate() {
            let p = g.center(c);
            let moved = prev.apply(p);
            if let Some(cell) = g.cell_of(moved) {
                let key = VoxelCoord::new(0, cell[0], cell[1], cell[2]).canonical_key();
                let e = oracle.entry(key).or_insert((vec![0.0; 2], 0));
                for ch in 0..2 {
                    e.0[ch] += set.features.at(i, ch);
                }
                e.1 += 1;
            }
        }
        assert_eq!(out.len(), oracle.len());
        for (i, (_, (sum, n))) in oracle.iter().enumerate() {
            for ch in 0..2 {
                assert!((out.features.at(i, ch) - sum[ch] / *n as f64).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn align_rejects_non_rigid_pose() {
        let g = grid();
        let set = SparseFeatureSet::empty(g.clone(), 2);
        let mut bad = EgoPose::identity();
        bad.0[0][0] = 2.0;
        assert!(matches!(
            align_temporal(&set, &bad, &EgoPose::identity(), &g),
            Err(Error::NonRigidPose { .. })
        ));
    }

    #[test]
    fn fuse_cold_start_is_identity() {
        let mut rng = Rng::new(10);
        let base = crate::partition::tests::random_coord_set(&mut rng, [16, 16, 4], 80);
        let g = base.grid.clone();
        let cur = SparseFeatureSet {
            features: random_mat(&mut rng, base.len(), 3, 1.0),
            ..base
        };
        let mut bank = MemoryBank::new();
        let out = fuse_frame(&cur, &EgoPose::identity(), &mut bank).unwrap();
        assert_eq!(out.coords, cur.coords);
        assert_eq!(out.features.data, cur.features.data);
        assert_eq!(bank.len(), 1);
        let _ = g;
    }

    #[test]
    fn fuse_stationary_frames_mean() {
        let mut rng = Rng::new(11);
        let base = crate::partition::tests::random_coord_set(&mut rng, [16, 16, 4], 60);
        let cur = SparseFeatureSet {
            features: random_mat(&mut rng, base.len(), 2, 1.0),
            ..base
        };
        let mut bank = MemoryBank::new();
        let pose = EgoPose::identity();
        for _ in 0..3 {
            bank.push(cur.clone(), pose.clone());
        }
        let out = fuse_frame(&cur, &pose, &mut bank).unwrap();
        assert_eq!(out.coords, cur.coords);
        // mean of four identical rows
        for i in 0..out.len() {
            for ch in 0..2 {
                let expect = cur.features.at(i, ch);
                assert!((out.features.at(i, ch) - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn fuse_matches_sequential_align_oracle() {
        let mut rng = Rng::new(12);
        let g = VoxelGrid::new([-8.0, -8.0, -2.0], [0.5, 0.5, 0.5], [32, 32, 8]).unwrap();
        // 4 frames of a drifting coordinate set
        let mut frames = Vec::new();
        for f in 0..4u32 {
            let base = crate::partition::tests::random_coord_set(&mut rng, [32, 32, 8], 100);
            let set = SparseFeatureSet {
                grid: g.clone(),
                features: random_mat(&mut rng, base.len(), 2, 1.0),
                coords: base.coords,
            };
            let mut pose = EgoPose::identity();
            pose.0[0][3] = f as f64 * 0.5;
            frames.push((set, pose));
        }
        let mut bank = MemoryBank::new();
        for (set, pose) in frames.iter().take(3) {
            bank.push(set.clone(), pose.clone());
        }
        let (cur, pose_cur) = frames.last().unwrap();
        let out = fuse_frame(cur, pose_cur, &mut bank).unwrap();
        // oracle: align each historical frame, then group every contribution
        let mut oracle: BTreeMap<(u32, u32, u32, u32), (Vec<f64>, usize)> = BTreeMap::new();
        for (set, pose) in frames.iter().take(3) {
            let aligned = align_entries(set, pose, pose_cur, &g).unwrap();
            for (coord, src) in aligned {
                let e = oracle.entry(coord.canonical_key()).or_insert((vec![0.0; 2], 0));
                for ch in 0..2 {
                    e.0[ch] += set.features.at(src, ch);
                }
                e.1 += 1;
            }
        }
        for (i, c) in cur.coords.iter().enumerate() {
            let e = oracle.entry(c.canonical_key()).or_insert((vec![0.0; 2], 0));
            for ch in 0..2 {
                e.0[ch] += cur.features.at(i, ch);
            }
            e.1 += 1;
        }
        assert_eq!(out.len(), oracle.len());
        for (i, (_, (sum, n))) in oracle.iter().enumerate() {
            for ch in 0..2 {
                let expect = sum[ch] / *n as f64;
                assert!((out.features.at(i, ch) - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            }
        }
        // bank now holds the 3 most recent frames (FIFO capacity 3)
        assert_eq!(bank.len(), 3);
    }

    #[test]
    fn bank_fifo_eviction() {
        let g = grid();
        let mut bank = MemoryBank::new();
        for i in 0..5 {
            let set = SparseFeatureSet::new(
                g.clone(),
                vec![VoxelCoord::new(0, i, 0, 0)],
                Mat::from_rows(vec![vec![i as f64]]),
            )
            .unwrap();
            bank.push(set, EgoPose::identity());
        }
        assert_eq!(bank.len(), 3);
        let xs: Vec<u32> = bank.iter().map(|(s, _)| s.coords[0].x).collect();
        assert_eq!(xs, vec![2, 3, 4]);
    }
}
