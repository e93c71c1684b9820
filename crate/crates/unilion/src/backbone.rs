//! The backbone: layers of paired X/Y-partition group scans with pre-norm
//! residuals, hierarchical blocks over 1x / half / quarter resolutions with
//! descriptor-before-merge placement and additive skips after each expand,
//! auto-regressive voxel generation ahead of every block, inter-block height
//! merging, and the final BEV flattening.
//!
//! Everything forward-related is built on the tape so the same code path
//! serves inference, training, and gradient checks; the pure entry points
//! wrap a private tape and return plain values.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ScanParamIds, Tape, ValId};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{BackboneParams, BlockParams, DescParams, LayerParams, ScanParams, VfeParams};
use crate::partition::{partition_coords, AxisOrder, GroupLayout, WindowShape};
use crate::sparse::{conv_pairs, merge_plan, LAYER_NORM_EPS};
use crate::voxel::{SparseFeatureSet, VoxelCoord, VoxelGrid};

/// The four diagonal in-plane diffusion offsets, in application order.
pub const DIFFUSION_OFFSETS: [[i32; 3]; 4] = [[-1, -1, 0], [1, 1, 0], [1, -1, 0], [-1, 1, 0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Selective,
    Wkv,
}

#[derive(Debug, Clone)]
pub struct LayerConfig {
    pub window: WindowShape,
    pub group_size: usize,
    pub operator: OperatorKind,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BlockConfig {
    /// One config per internal layer (1x, 1/2x, 1/4x, 1/2x).
    pub layers: [LayerConfig; 4],
    /// Stride of the in-block merges (1x -> 1/2x and 1/2x -> 1/4x).
    pub merge_stride: [u32; 3],
}

impl BlockConfig {
    /// All four internal layers share the block's window and group size.
    pub fn uniform(layer: LayerConfig) -> Self {
        BlockConfig {
            layers: [layer.clone(), layer.clone(), layer.clone(), layer],
            merge_stride: [2, 2, 2],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub channels: usize,
    pub blocks: Vec<BlockConfig>,
    /// Applied after every block (paper progression halves D each block).
    pub height_merge_stride: [u32; 3],
    /// Foreground sampling ratio r in (0, 1].
    pub foreground_ratio: f64,
    pub diffusion_offsets: Vec<[i32; 3]>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("backbone needs at least one block".into()));
        }
        if !(self.foreground_ratio > 0.0 && self.foreground_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "foreground ratio must be in (0, 1], got {}",
                self.foreground_ratio
            )));
        }
        if self.height_merge_stride.iter().any(|&s| s < 1) {
            return Err(Error::InvalidConfig("height merge stride must be >= 1".into()));
        }
        for b in &self.blocks {
            if b.merge_stride.iter().any(|&s| s < 1) {
                return Err(Error::InvalidConfig("block merge stride must be >= 1".into()));
            }
            for l in &b.layers {
                if l.group_size < 1 {
                    return Err(Error::InvalidConfig("group size must be >= 1".into()));
                }
                if l.channels != self.channels {
                    return Err(Error::InvalidConfig("layer channels differ from backbone".into()));
                }
            }
        }
        Ok(())
    }
}

/// Dense bird's-eye-view grid: (H * W) x C, cell (x, y) at row x * W + y.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBev {
    pub h: usize,
    pub w: usize,
    pub mat: Mat,
}

impl DenseBev {
    pub fn channels(&self) -> usize {
        self.mat.cols
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "h": self.h,
            "w": self.w,
            "c": self.mat.cols,
            "data": self.mat.data,
        })
    }
}

/// Voxel tokens flowing through tape builders: structure by value, features
/// as a tape node.
#[derive(Debug, Clone)]
pub struct TapeTokens {
    pub coords: Vec<VoxelCoord>,
    pub grid: VoxelGrid,
    pub feat: ValId,
}

/// Discrete routing recorded by a forward pass so a replay (finite
/// differences) holds the structure fixed.
#[derive(Debug, Clone, Default)]
pub struct FrozenRouting {
    /// Selected foreground coords per block.
    pub selected: Vec<Vec<VoxelCoord>>,
}

/// Pass/fail record of the structural invariants checked during a forward.
#[derive(Debug, Clone, Default)]
pub struct InvariantLog {
    pub checks: Vec<(String, bool, String)>,
}

impl InvariantLog {
    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push((name.into(), pass, detail.into()));
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|(_, p, _)| *p)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "pass": self.all_pass(),
            "checks": self.checks.iter().map(|(n, p, d)| serde_json::json!({
                "name": n, "pass": p, "detail": d,
            })).collect::<Vec<_>>(),
        })
    }
}

fn scan_param_ids(p: &ScanParams<ValId>) -> ScanParamIds {
    match p {
        ScanParams::Selective { wg, bg, wu, bu, wo, bo } => {
            ScanParamIds::Selective([*wg, *bg, *wu, *bu, *wo, *bo])
        }
        ScanParams::Wkv { wr, wk, wv, w, u } => ScanParamIds::Wkv([*wr, *wk, *wv, *w, *u]),
    }
}

fn layout_groups(layout: &GroupLayout) -> Vec<Vec<usize>> {
    layout.groups().map(|g| g.to_vec()).collect()
}

/// Two linear layers with a GELU between them.
pub fn vfe_t(tape: &mut Tape, x: ValId, p: &VfeParams<ValId>) -> Result<ValId> {
    let h = tape.affine(x, p.w1, p.b1)?;
    let h = tape.gelu(h);
    tape.affine(h, p.w2, p.b2)
}

/// One backbone layer: x + scanX(norm(x)), then + scanY(norm(.)).
pub fn layer_t(
    tape: &mut Tape,
    tokens: &TapeTokens,
    cfg: &LayerConfig,
    p: &LayerParams<ValId>,
) -> Result<ValId> {
    let lx = partition_coords(&tokens.coords, &cfg.window, AxisOrder::XMajor, cfg.group_size)?;
    let n1 = tape.layer_norm(tokens.feat, p.ln_x_gamma, p.ln_x_beta, LAYER_NORM_EPS)?;
    let s1 = tape.group_scan(n1, scan_param_ids(&p.scan_x), layout_groups(&lx), lx.group_size)?;
    let r1 = tape.add(tokens.feat, s1)?;
    let ly = partition_coords(&tokens.coords, &cfg.window, AxisOrder::YMajor, cfg.group_size)?;
    let n2 = tape.layer_norm(r1, p.ln_y_gamma, p.ln_y_beta, LAYER_NORM_EPS)?;
    let s2 = tape.group_scan(n2, scan_param_ids(&p.scan_y), layout_groups(&ly), ly.group_size)?;
    tape.add(r1, s2)
}

/// 3D spatial feature descriptor: submanifold conv, layer norm, GELU.
pub fn descriptor_t(
    tape: &mut Tape,
    tokens: &TapeTokens,
    p: &DescParams<ValId>,
) -> Result<ValId> {
    let pairs = conv_pairs(&tokens.coords);
    let y = tape.subm_conv(tokens.feat, p.kernel, p.bias, pairs, tokens.coords.len())?;
    let y = tape.layer_norm(y, p.gamma, p.beta, LAYER_NORM_EPS)?;
    Ok(tape.gelu(y))
}

/// Hierarchical block: L1 at 1x -> D1 -> merge -> L2 at 1/2x -> D2 -> merge ->
/// L3 at 1/4x -> expand -> +skip(L2) -> L4 at 1/2x -> expand -> +skip(L1) ->
/// D3. The output coordinate set equals the input's.
pub fn block_t(
    tape: &mut Tape,
    tokens: &TapeTokens,
    cfg: &BlockConfig,
    p: &BlockParams<ValId>,
) -> Result<(TapeTokens, u64)> {
    let madds0 = 0u64; // per-layer scan counters are folded in by group_scan internally
    let l1 = layer_t(tape, tokens, &cfg.layers[0], &p.layers[0])?;
    let t1 = TapeTokens { feat: l1, ..tokens.clone() };
    let d1 = descriptor_t(tape, &t1, &p.descs[0])?;

    let (coords_half, children1, parents1) = merge_plan(&tokens.coords, cfg.merge_stride);
    let grid_half = tokens.grid.coarsen(cfg.merge_stride);
    let m1 = tape.merge_mean(d1, children1);
    let half = TapeTokens { coords: coords_half, grid: grid_half, feat: m1 };

    let l2 = layer_t(tape, &half, &cfg.layers[1], &p.layers[1])?;
    let t2 = TapeTokens { feat: l2, ..half.clone() };
    let d2 = descriptor_t(tape, &t2, &p.descs[1])?;

    let (coords_quarter, children2, parents2) = merge_plan(&half.coords, cfg.merge_stride);
    let grid_quarter = half.grid.coarsen(cfg.merge_stride);
    let m2 = tape.merge_mean(d2, children2);
    let quarter = TapeTokens { coords: coords_quarter, grid: grid_quarter, feat: m2 };

    let l3 = layer_t(tape, &quarter, &cfg.layers[2], &p.layers[2])?;
    let e1 = tape.expand_copy(l3, parents2);
    let a1 = tape.add(e1, l2)?; // skip from post-L2

    let half_in = TapeTokens { feat: a1, ..half.clone() };
    let l4 = layer_t(tape, &half_in, &cfg.layers[3], &p.layers[3])?;
    let e2 = tape.expand_copy(l4, parents1);
    let a2 = tape.add(e2, l1)?; // skip from post-L1

    let fine = TapeTokens { feat: a2, ..tokens.clone() };
    let d3 = descriptor_t(tape, &fine, &p.descs[2])?;
    Ok((TapeTokens { feat: d3, ..tokens.clone() }, madds0))
}

/// Top ceil(r * L) rows by linear score; ties resolved toward the lower
/// canonical index. The ceiling is taken with a small slack so an exact
/// integer product r * L is not bumped up by floating-point representation.
pub fn select_foreground_rows(features: &Mat, scorer_w: &Mat, scorer_b: f64, r: f64) -> Vec<usize> {
    let l = features.rows;
    if l == 0 {
        return Vec::new();
    }
    let k = ((r * l as f64 - 1e-9).ceil().max(0.0) as usize).min(l);
    let mut scored: Vec<(f64, usize)> = (0..l)
        .map(|i| {
            let row = features.row(i);
            let mut s = scorer_b;
            for (w, x) in scorer_w.data.iter().zip(row) {
                s += w * x;
            }
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Spec-shaped wrapper returning the selected coordinates P_m.
pub fn select_foreground(
    set: &SparseFeatureSet,
    scorer_w: &Mat,
    scorer_b: f64,
    r: f64,
) -> Vec<VoxelCoord> {
    select_foreground_rows(&set.features, scorer_w, scorer_b, r)
        .into_iter()
        .map(|i| set.coords[i])
        .collect()
}

/// Diffused-voxel coordinates: for each p in pm and each offset, the
/// candidate p + offset survives unless it leaves the grid extent, collides
/// with an existing voxel, or repeats an earlier candidate.
pub fn generate_plan(
    coords: &[VoxelCoord],
    grid: &VoxelGrid,
    pm: &[VoxelCoord],
    offsets: &[[i32; 3]],
) -> Vec<VoxelCoord> {
    let existing: std::collections::HashSet<VoxelCoord> = coords.iter().copied().collect();
    let mut seen: std::collections::HashSet<VoxelCoord> = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in pm {
        for off in offsets {
            let nx = p.x as i64 + off[0] as i64;
            let ny = p.y as i64 + off[1] as i64;
            let nz = p.z as i64 + off[2] as i64;
            if nx < 0 || ny < 0 || nz < 0 {
                continue;
            }
            let cand = VoxelCoord::new(p.batch, nx as u32, ny as u32, nz as u32);
            if !grid.contains(&cand) || existing.contains(&cand) || seen.contains(&cand) {
                continue;
            }
            seen.insert(cand);
            out.push(cand);
        }
    }
    out
}

/// Appends zero-feature voxels at the diffusion offsets around pm and
/// returns the canonicalized result.
pub fn voxel_generate(set: &SparseFeatureSet, pm: &[VoxelCoord]) -> SparseFeatureSet {
    let new_coords = generate_plan(&set.coords, &set.grid, pm, &DIFFUSION_OFFSETS);
    if new_coords.is_empty() {
        return set.clone();
    }
    let mut coords = set.coords.clone();
    coords.extend_from_slice(&new_coords);
    let mut features = Mat::zeros(coords.len(), set.channels());
    for i in 0..set.len() {
        features.row_mut(i).copy_from_slice(set.features.row(i));
    }
    crate::voxel::canonicalize(&SparseFeatureSet {
        grid: set.grid.clone(),
        coords,
        features,
    })
    .expect("generated coords are unique")
}

/// Tape version of voxel generation: appends constant zero rows and gathers
/// into canonical order.
fn generate_t(
    tape: &mut Tape,
    tokens: &TapeTokens,
    pm: &[VoxelCoord],
    offsets: &[[i32; 3]],
) -> Result<TapeTokens> {
    let new_coords = generate_plan(&tokens.coords, &tokens.grid, pm, offsets);
    if new_coords.is_empty() {
        return Ok(tokens.clone());
    }
    let channels = tape.value(tokens.feat).cols;
    let zeros = tape.constant(Mat::zeros(new_coords.len(), channels));
    let combined = tape.concat_rows(&[tokens.feat, zeros])?;
    let mut coords: Vec<VoxelCoord> = tokens.coords.clone();
    coords.extend_from_slice(&new_coords);
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| coords[i].canonical_key());
    let sorted_coords: Vec<VoxelCoord> = order.iter().map(|&i| coords[i]).collect();
    let feat = tape.gather(combined, order);
    Ok(TapeTokens {
        coords: sorted_coords,
        grid: tokens.grid.clone(),
        feat,
    })
}

/// N blocks, each preceded by foreground voxel generation and followed by a
/// height merge; ends with the BEV flattening (features summed over z).
pub fn backbone_t(
    tape: &mut Tape,
    tokens: TapeTokens,
    cfg: &BackboneConfig,
    params: &BackboneParams<ValId>,
    frozen: Option<&FrozenRouting>,
    log: &mut InvariantLog,
) -> Result<(ValId, FrozenRouting)> {
    cfg.validate()?;
    let bev_h = tokens.grid.extent[0] as usize;
    let bev_w = tokens.grid.extent[1] as usize;
    let mut cur = tokens;
    let mut routing = FrozenRouting::default();
    for (bi, (bcfg, bparams)) in cfg.blocks.iter().zip(&params.blocks).enumerate() {
        // foreground selection feeds the voxel generation
        let pm: Vec<VoxelCoord> = match frozen {
            Some(f) => f.selected.get(bi).cloned().unwrap_or_default(),
            None => {
                let scorer_w = tape.value(bparams.scorer_w).clone();
                let scorer_b = tape.value(bparams.scorer_b).data[0];
                select_foreground_rows(
                    tape.value(cur.feat),
                    &scorer_w,
                    scorer_b,
                    cfg.foreground_ratio,
                )
                .into_iter()
                .map(|i| cur.coords[i])
                .collect()
            }
        };
        routing.selected.push(pm.clone());
        let before = cur.coords.len();
        cur = generate_t(tape, &cur, &pm, &cfg.diffusion_offsets)?;
        log.check(
            format!("block{bi}.generate_monotone"),
            cur.coords.len() >= before,
            format!("{} -> {}", before, cur.coords.len()),
        );
        let coords_in = cur.coords.clone();
        let (out, _) = block_t(tape, &cur, bcfg, bparams)?;
        log.check(
            format!("block{bi}.pattern_preserved"),
            out.coords == coords_in,
            format!("{} coords", coords_in.len()),
        );
        // inter-block height merge
        let before = out.coords.len();
        let (coords_m, children, _) = merge_plan(&out.coords, cfg.height_merge_stride);
        let grid_m = out.grid.coarsen(cfg.height_merge_stride);
        let feat_m = tape.merge_mean(out.feat, children);
        cur = TapeTokens { coords: coords_m, grid: grid_m, feat: feat_m };
        log.check(
            format!("block{bi}.merge_monotone"),
            cur.coords.len() <= before,
            format!("{} -> {}", before, cur.coords.len()),
        );
    }
    // flatten to BEV: sum features over remaining z bins per (x, y) cell
    let cell_of: Vec<usize> = cur
        .coords
        .iter()
        .map(|c| {
            debug_assert_eq!(c.batch, 0, "desk-scale scenes are single-batch");
            c.x as usize * bev_w + c.y as usize
        })
        .collect();
    let bev = tape.bev_flatten(cur.feat, cell_of, bev_h * bev_w);
    log.check(
        "bev_shape",
        tape.value(bev).rows == bev_h * bev_w,
        format!("{}x{}", bev_h, bev_w),
    );
    log.check("bev_finite", tape.value(bev).all_finite(), "all values finite");
    Ok((bev, routing))
}

// --- pure entry points -------------------------------------------------------

fn bind_scan(tape: &mut Tape, p: &ScanParams<Mat>) -> ScanParams<ValId> {
    match p {
        ScanParams::Selective { wg, bg, wu, bu, wo, bo } => ScanParams::Selective {
            wg: tape.constant(wg.clone()),
            bg: tape.constant(bg.clone()),
            wu: tape.constant(wu.clone()),
            bu: tape.constant(bu.clone()),
            wo: tape.constant(wo.clone()),
            bo: tape.constant(bo.clone()),
        },
        ScanParams::Wkv { wr, wk, wv, w, u } => ScanParams::Wkv {
            wr: tape.constant(wr.clone()),
            wk: tape.constant(wk.clone()),
            wv: tape.constant(wv.clone()),
            w: tape.constant(w.clone()),
            u: tape.constant(u.clone()),
        },
    }
}

fn bind_layer(tape: &mut Tape, p: &LayerParams<Mat>) -> LayerParams<ValId> {
    LayerParams {
        ln_x_gamma: tape.constant(p.ln_x_gamma.clone()),
        ln_x_beta: tape.constant(p.ln_x_beta.clone()),
        scan_x: bind_scan(tape, &p.scan_x),
        ln_y_gamma: tape.constant(p.ln_y_gamma.clone()),
        ln_y_beta: tape.constant(p.ln_y_beta.clone()),
        scan_y: bind_scan(tape, &p.scan_y),
    }
}

fn bind_block(tape: &mut Tape, p: &BlockParams<Mat>) -> BlockParams<ValId> {
    BlockParams {
        layers: p.layers.iter().map(|l| bind_layer(tape, l)).collect(),
        descs: p
            .descs
            .iter()
            .map(|d| DescParams {
                kernel: tape.constant(d.kernel.clone()),
                bias: tape.constant(d.bias.clone()),
                gamma: tape.constant(d.gamma.clone()),
                beta: tape.constant(d.beta.clone()),
            })
            .collect(),
        scorer_w: tape.constant(p.scorer_w.clone()),
        scorer_b: tape.constant(p.scorer_b.clone()),
    }
}

/// Two linear layers with GELU between, mapping raw channels to C.
pub fn vfe(set: &SparseFeatureSet, p: &VfeParams<Mat>) -> Result<SparseFeatureSet> {
    if set.channels() != p.w1.cols {
        return Err(Error::DimensionMismatch {
            context: "vfe input channels",
            expected: p.w1.cols,
            actual: set.channels(),
        });
    }
    let h = crate::mat::affine_rows(&set.features, &p.w1, &p.b1.data);
    let h = h.map(crate::mat::gelu);
    let out = crate::mat::affine_rows(&h, &p.w2, &p.b2.data);
    Ok(SparseFeatureSet {
        grid: set.grid.clone(),
        coords: set.coords.clone(),
        features: out,
    })
}

pub fn unilion_layer(
    set: &SparseFeatureSet,
    cfg: &LayerConfig,
    p: &LayerParams<Mat>,
) -> Result<SparseFeatureSet> {
    let mut tape = Tape::new();
    let feat = tape.constant(set.features.clone());
    let bound = bind_layer(&mut tape, p);
    let tokens = TapeTokens {
        coords: set.coords.clone(),
        grid: set.grid.clone(),
        feat,
    };
    let out = layer_t(&mut tape, &tokens, cfg, &bound)?;
    Ok(SparseFeatureSet {
        grid: set.grid.clone(),
        coords: set.coords.clone(),
        features: tape.value(out).clone(),
    })
}

/// Descriptor as a pure composition: conv then layer norm then GELU.
pub fn descriptor(
    set: &SparseFeatureSet,
    kernel: &crate::sparse::ConvKernel3,
    gamma: &[f64],
    beta: &[f64],
) -> Result<SparseFeatureSet> {
    let y = crate::sparse::submanifold_conv3(set, kernel)?;
    let y = crate::sparse::layer_norm(&y, gamma, beta, LAYER_NORM_EPS)?;
    Ok(crate::sparse::gelu(&y))
}

pub fn unilion_block(
    set: &SparseFeatureSet,
    cfg: &BlockConfig,
    p: &BlockParams<Mat>,
) -> Result<SparseFeatureSet> {
    let mut tape = Tape::new();
    let feat = tape.constant(set.features.clone());
    let bound = bind_block(&mut tape, p);
    let tokens = TapeTokens {
        coords: set.coords.clone(),
        grid: set.grid.clone(),
        feat,
    };
    let (out, _) = block_t(&mut tape, &tokens, cfg, &bound)?;
    Ok(SparseFeatureSet {
        grid: out.grid.clone(),
        coords: out.coords.clone(),
        features: tape.value(out.feat).clone(),
    })
}

pub fn backbone_forward(
    set: &SparseFeatureSet,
    cfg: &BackboneConfig,
    params: &BackboneParams<Mat>,
) -> Result<(DenseBev, InvariantLog)> {
    let mut tape = Tape::new();
    let feat = tape.constant(set.features.clone());
    let bound = BackboneParams {
        blocks: params.blocks.iter().map(|b| bind_block(&mut tape, b)).collect(),
    };
    let tokens = TapeTokens {
        coords: set.coords.clone(),
        grid: set.grid.clone(),
        feat,
    };
    let mut log = InvariantLog::default();
    let (bev, _) = backbone_t(&mut tape, tokens, cfg, &bound, None, &mut log)?;
    Ok((
        DenseBev {
            h: set.grid.extent[0] as usize,
            w: set.grid.extent[1] as usize,
            mat: tape.value(bev).clone(),
        },
        log,
    ))
}
