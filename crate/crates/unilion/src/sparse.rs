//! Sparse-pattern-preserving operators: submanifold 3x3x3 convolution,
//! per-row layer normalization, exact-erf GELU, and the voxel merge/expand
//! pair with invertible index mappings.
//!
//! Submanifold means the output occupies exactly the input's coordinate set;
//! absent neighbors contribute zero. Merge pools children by arithmetic mean;
//! expand copies the parent row back to every child coordinate.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::voxel::{SparseFeatureSet, VoxelCoord, VoxelGrid};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// 3x3x3 kernel stored as 27 stacked Cout x Cin blocks; block index is
/// ((dx+1)*3 + (dy+1))*3 + (dz+1) for offsets dx, dy, dz in {-1, 0, 1}.
#[derive(Debug, Clone)]
pub struct ConvKernel3 {
    pub weights: Mat, // (27 * cout) x cin
    pub bias: Vec<f64>,
    pub cout: usize,
    pub cin: usize,
}

impl ConvKernel3 {
    pub fn new(weights: Mat, bias: Vec<f64>) -> Result<Self> {
        if weights.rows % 27 != 0 {
            return Err(Error::DimensionMismatch {
                context: "conv kernel rows (27 * cout)",
                expected: 27,
                actual: weights.rows,
            });
        }
        let cout = weights.rows / 27;
        if bias.len() != cout {
            return Err(Error::DimensionMismatch {
                context: "conv bias",
                expected: cout,
                actual: bias.len(),
            });
        }
        let cin = weights.cols;
        Ok(ConvKernel3 { weights, bias, cout, cin })
    }

    /// Identity kernel: center tap is the identity map, all else zero.
    pub fn identity(c: usize) -> Self {
        let mut weights = Mat::zeros(27 * c, c);
        let center = offset_index(0, 0, 0);
        for i in 0..c {
            *weights.at_mut(center * c + i, i) = 1.0;
        }
        ConvKernel3 { weights, bias: vec![0.0; c], cout: c, cin: c }
    }

    pub fn block_row(&self, k: usize, o: usize) -> &[f64] {
        self.weights.row(k * self.cout + o)
    }
}

pub fn offset_index(dx: i32, dy: i32, dz: i32) -> usize {
    (((dx + 1) * 3 + (dy + 1)) * 3 + (dz + 1)) as usize
}

/// (output row, input row, kernel block) triples for every occupied neighbor.
/// Enumerated output-major, offsets in block order, so iteration is stable.
pub fn conv_pairs(coords: &[VoxelCoord]) -> Vec<(u32, u32, u32)> {
    let index: HashMap<VoxelCoord, usize> = coords
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, i))
        .collect();
    let mut pairs = Vec::with_capacity(coords.len() * 8);
    for (o, c) in coords.iter().enumerate() {
        for dx in -1i32..=1 {
            for dy in -1i32..=1 {
                for dz in -1i32..=1 {
                    let nx = c.x as i64 + dx as i64;
                    let ny = c.y as i64 + dy as i64;
                    let nz = c.z as i64 + dz as i64;
                    if nx < 0 || ny < 0 || nz < 0 {
                        continue;
                    }
                    let n = VoxelCoord::new(c.batch, nx as u32, ny as u32, nz as u32);
                    if let Some(&i) = index.get(&n) {
                        pairs.push((o as u32, i as u32, offset_index(dx, dy, dz) as u32));
                    }
                }
            }
        }
    }
    pairs
}

pub(crate) fn apply_conv(
    features: &Mat,
    kernel: &ConvKernel3,
    pairs: &[(u32, u32, u32)],
    n_out: usize,
) -> Mat {
    let mut out = Mat::zeros(n_out, kernel.cout);
    for row in out.data.chunks_mut(kernel.cout) {
        row.copy_from_slice(&kernel.bias);
    }
    for &(o, i, k) in pairs {
        let x = features.row(i as usize);
        let y = out.row_mut(o as usize);
        for oc in 0..kernel.cout {
            let w = kernel.block_row(k as usize, oc);
            let mut acc = 0.0;
            for ic in 0..kernel.cin {
                acc += w[ic] * x[ic];
            }
            y[oc] += acc;
        }
    }
    out
}

/// Output occupies exactly the input coordinate set.
pub fn submanifold_conv3(set: &SparseFeatureSet, k: &ConvKernel3) -> Result<SparseFeatureSet> {
    if set.channels() != k.cin {
        return Err(Error::DimensionMismatch {
            context: "conv input channels",
            expected: k.cin,
            actual: set.channels(),
        });
    }
    let pairs = conv_pairs(&set.coords);
    let features = apply_conv(&set.features, k, &pairs, set.len());
    Ok(SparseFeatureSet {
        grid: set.grid.clone(),
        coords: set.coords.clone(),
        features,
    })
}

pub(crate) fn apply_layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let c = x.cols;
    let mut out = Mat::zeros(x.rows, c);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let o = out.row_mut(r);
        for i in 0..c {
            o[i] = gamma[i] * ((row[i] - mean) * inv) + beta[i];
        }
    }
    out
}

/// Per-row normalization over channels followed by the affine (gamma, beta).
pub fn layer_norm(
    set: &SparseFeatureSet,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<SparseFeatureSet> {
    if gamma.len() != set.channels() || beta.len() != set.channels() {
        return Err(Error::DimensionMismatch {
            context: "layer norm affine",
            expected: set.channels(),
            actual: gamma.len().min(beta.len()),
        });
    }
    Ok(SparseFeatureSet {
        grid: set.grid.clone(),
        coords: set.coords.clone(),
        features: apply_layer_norm(&set.features, gamma, beta, eps),
    })
}

/// Elementwise exact-erf GELU.
pub fn gelu(set: &SparseFeatureSet) -> SparseFeatureSet {
    SparseFeatureSet {
        grid: set.grid.clone(),
        coords: set.coords.clone(),
        features: set.features.map(mat::gelu),
    }
}

/// Many-to-one parent mapping from fine voxels to coarse voxels.
#[derive(Debug, Clone)]
pub struct IndexMap {
    pub parent_of: Vec<usize>,
    pub children_of: Vec<Vec<usize>>,
    pub fine_coords: Vec<VoxelCoord>,
    pub coarse_coords: Vec<VoxelCoord>,
    pub fine_grid: VoxelGrid,
    pub coarse_grid: VoxelGrid,
}

/// Grouping of fine rows by their stride-quotient coarse coordinate, in
/// canonical coarse order, with children ascending.
pub(crate) fn merge_plan(
    coords: &[VoxelCoord],
    stride: [u32; 3],
) -> (Vec<VoxelCoord>, Vec<Vec<usize>>, Vec<usize>) {
    let coarse_of = |c: &VoxelCoord| {
        VoxelCoord::new(c.batch, c.x / stride[0], c.y / stride[1], c.z / stride[2])
    };
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    idx.sort_by_key(|&i| (coarse_of(&coords[i]).canonical_key(), i));
    let mut coarse_coords = Vec::new();
    let mut children_of: Vec<Vec<usize>> = Vec::new();
    let mut parent_of = vec![0usize; coords.len()];
    let mut i = 0;
    while i < idx.len() {
        let cc = coarse_of(&coords[idx[i]]);
        let parent = coarse_coords.len();
        let mut kids = Vec::new();
        while i < idx.len() && coarse_of(&coords[idx[i]]) == cc {
            kids.push(idx[i]);
            parent_of[idx[i]] = parent;
            i += 1;
        }
        coarse_coords.push(cc);
        children_of.push(kids);
    }
    (coarse_coords, children_of, parent_of)
}

pub(crate) fn apply_merge_mean(features: &Mat, children_of: &[Vec<usize>]) -> Mat {
    let c = features.cols;
    let mut out = Mat::zeros(children_of.len(), c);
    for (p, kids) in children_of.iter().enumerate() {
        let row = out.row_mut(p);
        for &k in kids {
            let src = features.row(k);
            for i in 0..c {
                row[i] += src[i];
            }
        }
        let n = kids.len() as f64;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    out
}

/// Down-samples by integer stride: coarse coord = floor(fine / stride), coarse
/// feature = mean of its children. Returns the coarse set and the index map.
pub fn voxel_merge(set: &SparseFeatureSet, stride: [u32; 3]) -> (SparseFeatureSet, IndexMap) {
    assert!(stride.iter().all(|&s| s >= 1), "stride components must be >= 1");
    let (coarse_coords, children_of, parent_of) = merge_plan(&set.coords, stride);
    let features = apply_merge_mean(&set.features, &children_of);
    let coarse_grid = set.grid.coarsen(stride);
    let coarse = SparseFeatureSet {
        grid: coarse_grid.clone(),
        coords: coarse_coords.clone(),
        features,
    };
    let map = IndexMap {
        parent_of,
        children_of,
        fine_coords: set.coords.clone(),
        coarse_coords,
        fine_grid: set.grid.clone(),
        coarse_grid,
    };
    (coarse, map)
}

pub(crate) fn apply_expand_copy(coarse: &Mat, parent_of: &[usize]) -> Mat {
    let mut out = Mat::zeros(parent_of.len(), coarse.cols);
    for (f, &p) in parent_of.iter().enumerate() {
        out.row_mut(f).copy_from_slice(coarse.row(p));
    }
    out
}

/// Up-samples back to the fine coordinates: each fine row receives a copy of
/// its parent's feature.
pub fn voxel_expand(coarse: &SparseFeatureSet, map: &IndexMap) -> Result<SparseFeatureSet> {
    if coarse.len() != map.coarse_coords.len() {
        return Err(Error::IndexMapMismatch("coarse set length"));
    }
    if coarse.coords != map.coarse_coords {
        return Err(Error::IndexMapMismatch("coarse coordinates"));
    }
    Ok(SparseFeatureSet {
        grid: map.fine_grid.clone(),
        coords: map.fine_coords.clone(),
        features: apply_expand_copy(&coarse.features, &map.parent_of),
    })
}
