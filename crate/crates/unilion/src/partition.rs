//! 3D sparse window partition: non-overlapping windows define a serialization
//! order, and the sorted voxels are packed into equal-size groups.
//!
//! A voxel's key packs (batch, window index, in-window offset) into a u128 so
//! sorting by key realizes: windows laid out row-major with the major axis
//! fastest, then in-window lexicographic order along (x, y, z) for XMajor or
//! (y, x, z) for YMajor. Groups are runs of G permuted rows; only the last
//! group carries padding, masked out by consumers.

use crate::error::{Error, Result};
use crate::voxel::{SparseFeatureSet, VoxelCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowShape {
    pub sx: u32,
    pub sy: u32,
    pub sz: u32,
}

impl WindowShape {
    pub fn new(sx: u32, sy: u32, sz: u32) -> Result<Self> {
        if sx < 1 || sy < 1 || sz < 1 {
            return Err(Error::InvalidConfig(format!(
                "window shape components must be >= 1, got ({sx}, {sy}, {sz})"
            )));
        }
        Ok(WindowShape { sx, sy, sz })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisOrder {
    XMajor,
    YMajor,
}

/// A permutation of rows plus equal-size group boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub perm: Vec<usize>,
    pub group_size: usize,
    pub group_count: usize,
    pub pad_len: usize,
}

impl GroupLayout {
    /// Row indices (into the original set) of group g, without padding.
    pub fn group_rows(&self, g: usize) -> &[usize] {
        let lo = g * self.group_size;
        let hi = ((g + 1) * self.group_size).min(self.perm.len());
        &self.perm[lo..hi]
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.group_count).map(move |g| self.group_rows(g))
    }
}

const FIELD_BITS: u32 = 18;
const FIELD_MAX: u32 = (1 << FIELD_BITS) - 1;

fn pack3(a: u32, b: u32, c: u32) -> u128 {
    debug_assert!(a <= FIELD_MAX && b <= FIELD_MAX && c <= FIELD_MAX);
    ((a as u128) << (2 * FIELD_BITS)) | ((b as u128) << FIELD_BITS) | c as u128
}

/// Strict total order over coords: primary by window (windows laid out with
/// the major axis varying fastest), secondary by in-window offset along the
/// major axis then the minor axes.
pub fn sort_key(coord: &VoxelCoord, ws: &WindowShape, order: AxisOrder) -> u128 {
    let (wx, ox) = (coord.x / ws.sx, coord.x % ws.sx);
    let (wy, oy) = (coord.y / ws.sy, coord.y % ws.sy);
    let (wz, oz) = (coord.z / ws.sz, coord.z % ws.sz);
    let (window, offset) = match order {
        AxisOrder::XMajor => (pack3(wz, wy, wx), pack3(ox, oy, oz)),
        AxisOrder::YMajor => (pack3(wz, wx, wy), pack3(oy, ox, oz)),
    };
    // bits: [108, 128) batch | [54, 108) window | [0, 54) offset
    ((coord.batch as u128) << (6 * FIELD_BITS)) | (window << (3 * FIELD_BITS)) | offset
}

/// Sorts rows by `sort_key` and packs them into groups of size `g`.
pub fn partition(
    set: &SparseFeatureSet,
    ws: &WindowShape,
    order: AxisOrder,
    g: usize,
) -> Result<GroupLayout> {
    partition_coords(&set.coords, ws, order, g)
}

pub fn partition_coords(
    coords: &[VoxelCoord],
    ws: &WindowShape,
    order: AxisOrder,
    g: usize,
) -> Result<GroupLayout> {
    if g < 1 {
        return Err(Error::InvalidConfig(format!("group size must be >= 1, got {g}")));
    }
    let l = coords.len();
    let mut perm: Vec<usize> = (0..l).collect();
    perm.sort_unstable_by_key(|&i| sort_key(&coords[i], ws, order));
    let group_count = l.div_ceil(g);
    Ok(GroupLayout {
        perm,
        group_size: g,
        group_count,
        pad_len: group_count * g - l,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::rng::Rng;
    use crate::voxel::{canonicalize, SparseFeatureSet, VoxelGrid};

    pub(crate) fn random_coord_set(rng: &mut Rng, extent: [u32; 3], n: usize) -> SparseFeatureSet {
        let grid = VoxelGrid::new([0.0; 3], [1.0; 3], extent).unwrap();
        let mut coords: Vec<VoxelCoord> = Vec::new();
        for _ in 0..n {
            coords.push(VoxelCoord::new(
                0,
                rng.below(extent[0] as usize) as u32,
                rng.below(extent[1] as usize) as u32,
                rng.below(extent[2] as usize) as u32,
            ));
        }
        coords.sort();
        coords.dedup();
        let features = Mat::from_fn(coords.len(), 1, |i, _| i as f64);
        canonicalize(&SparseFeatureSet { grid, coords, features }).unwrap()
    }

    /// Brute-force comparison tuple for a coord under a given order.
    fn oracle_tuple(
        c: &VoxelCoord,
        ws: &WindowShape,
        order: AxisOrder,
    ) -> (u32, u32, u32, u32, u32, u32, u32) {
        let (wx, ox) = (c.x / ws.sx, c.x % ws.sx);
        let (wy, oy) = (c.y / ws.sy, c.y % ws.sy);
        let (wz, oz) = (c.z / ws.sz, c.z % ws.sz);
        match order {
            AxisOrder::XMajor => (c.batch, wz, wy, wx, ox, oy, oz),
            AxisOrder::YMajor => (c.batch, wz, wx, wy, oy, ox, oz),
        }
    }

    #[test]
    fn in_window_x_order() {
        let ws = WindowShape::new(2, 2, 1).unwrap();
        let a = VoxelCoord::new(0, 0, 0, 0);
        let b = VoxelCoord::new(0, 1, 0, 0);
        assert!(sort_key(&a, &ws, AxisOrder::XMajor) < sort_key(&b, &ws, AxisOrder::XMajor));
    }

    #[test]
    fn window_index_order() {
        let ws = WindowShape::new(2, 2, 1).unwrap();
        let a = VoxelCoord::new(0, 0, 0, 0);
        let b = VoxelCoord::new(0, 2, 0, 0);
        // different windows, window of a first
        assert!(sort_key(&a, &ws, AxisOrder::XMajor) < sort_key(&b, &ws, AxisOrder::XMajor));
    }

    #[test]
    fn key_order_matches_tuple_sort_oracle() {
        let mut rng = Rng::new(5);
        let set = random_coord_set(&mut rng, [8, 8, 4], 64);
        let ws = WindowShape::new(2, 2, 2).unwrap();
        for order in [AxisOrder::XMajor, AxisOrder::YMajor] {
            let mut by_key: Vec<usize> = (0..set.len()).collect();
            by_key.sort_by_key(|&i| sort_key(&set.coords[i], &ws, order));
            let mut by_tuple: Vec<usize> = (0..set.len()).collect();
            by_tuple.sort_by_key(|&i| oracle_tuple(&set.coords[i], &ws, order));
            assert_eq!(by_key, by_tuple);
        }
    }

    #[test]
    fn keys_strictly_distinct() {
        let mut rng = Rng::new(17);
        let set = random_coord_set(&mut rng, [16, 16, 8], 300);
        let ws = WindowShape::new(3, 5, 2).unwrap();
        let mut keys: Vec<u128> = set
            .coords
            .iter()
            .map(|c| sort_key(c, &ws, AxisOrder::YMajor))
            .collect();
        keys.sort_unstable();
        for w in keys.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn group_arithmetic() {
        let mut rng = Rng::new(23);
        let mut set = random_coord_set(&mut rng, [30, 30, 4], 120);
        // shrink to exactly 5 rows
        set.coords.truncate(5);
        set.features = Mat::from_fn(5, 1, |i, _| i as f64);
        let ws = WindowShape::new(2, 2, 1).unwrap();
        let layout = partition(&set, &ws, AxisOrder::XMajor, 4).unwrap();
        assert_eq!(layout.group_count, 2);
        assert_eq!(layout.pad_len, 3);
        let mut seen: Vec<usize> = layout.groups().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_set_zero_groups() {
        let grid = VoxelGrid::new([0.0; 3], [1.0; 3], [4, 4, 4]).unwrap();
        let set = SparseFeatureSet::empty(grid, 2);
        let ws = WindowShape::new(2, 2, 2).unwrap();
        let layout = partition(&set, &ws, AxisOrder::XMajor, 8).unwrap();
        assert_eq!(layout.group_count, 0);
        assert_eq!(layout.pad_len, 0);
    }

    #[test]
    fn coverage_across_paper_group_sizes() {
        let mut rng = Rng::new(31);
        let set = random_coord_set(&mut rng, [128, 128, 32], 10_000);
        let ws = WindowShape::new(13, 13, 32).unwrap();
        for g in [512usize, 1024, 2048, 4096] {
            let layout = partition(&set, &ws, AxisOrder::XMajor, g).unwrap();
            let mut seen = vec![false; set.len()];
            for row in layout.groups().flatten() {
                assert!(!seen[*row], "row covered twice");
                seen[*row] = true;
            }
            assert!(seen.iter().all(|&s| s));
            // oracle: groups are consecutive runs of the brute-force sort
            let mut oracle: Vec<usize> = (0..set.len()).collect();
            oracle.sort_by_key(|&i| sort_key(&set.coords[i], &ws, AxisOrder::XMajor));
            assert_eq!(layout.perm, oracle);
        }
    }

    #[test]
    fn windows_contiguous_when_population_fits() {
        let mut rng = Rng::new(41);
        let set = random_coord_set(&mut rng, [20, 20, 8], 500);
        let ws = WindowShape::new(5, 5, 8).unwrap();
        let g = 512; // larger than any window population
        let layout = partition(&set, &ws, AxisOrder::XMajor, g).unwrap();
        let window_of = |c: &VoxelCoord| (c.z / ws.sz, c.y / ws.sy, c.x / ws.sx);
        // every window's rows form one contiguous run in perm
        let mut last_window = None;
        let mut seen = std::collections::HashSet::new();
        for &row in &layout.perm {
            let w = window_of(&set.coords[row]);
            if last_window != Some(w) {
                assert!(seen.insert(w), "window {w:?} split into multiple runs");
                last_window = Some(w);
            }
        }
    }
}
