//! Model parameters: one flat f64 store with named segments, typed layout
//! structs over segment handles, deterministic initialization, and binding
//! onto a tape for differentiation.
//!
//! The same layout struct is reused with three handle types: `SegId` (store
//! segments), `ValId` (tape leaves), and `Mat` (plain values for the pure
//! entry points).

use crate::autodiff::{Tape, ValId};
use crate::backbone::OperatorKind;
use crate::mat::Mat;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegId(pub usize);

#[derive(Debug, Clone)]
pub struct Seg {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    pub data: Vec<f64>,
    pub segs: Vec<Seg>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { data: Vec::new(), segs: Vec::new() }
    }

    pub fn alloc(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> SegId {
        let offset = self.data.len();
        self.data.resize(offset + rows * cols, 0.0);
        self.segs.push(Seg { name: name.into(), rows, cols, offset });
        SegId(self.segs.len() - 1)
    }

    pub fn slice(&self, id: SegId) -> &[f64] {
        let s = &self.segs[id.0];
        &self.data[s.offset..s.offset + s.rows * s.cols]
    }

    pub fn slice_mut(&mut self, id: SegId) -> &mut [f64] {
        let s = self.segs[id.0].clone();
        &mut self.data[s.offset..s.offset + s.rows * s.cols]
    }

    pub fn mat(&self, id: SegId) -> Mat {
        let s = &self.segs[id.0];
        Mat::from_vec(s.rows, s.cols, self.slice(id).to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct VfeParams<H> {
    pub w1: H,
    pub b1: H,
    pub w2: H,
    pub b2: H,
}

#[derive(Debug, Clone)]
pub enum ScanParams<H> {
    Selective { wg: H, bg: H, wu: H, bu: H, wo: H, bo: H },
    Wkv { wr: H, wk: H, wv: H, w: H, u: H },
}

#[derive(Debug, Clone)]
pub struct LayerParams<H> {
    pub ln_x_gamma: H,
    pub ln_x_beta: H,
    pub scan_x: ScanParams<H>,
    pub ln_y_gamma: H,
    pub ln_y_beta: H,
    pub scan_y: ScanParams<H>,
}

#[derive(Debug, Clone)]
pub struct DescParams<H> {
    pub kernel: H, // (27 * c) x c stacked blocks
    pub bias: H,   // 1 x c
    pub gamma: H,
    pub beta: H,
}

#[derive(Debug, Clone)]
pub struct BlockParams<H> {
    pub layers: Vec<LayerParams<H>>, // 4
    pub descs: Vec<DescParams<H>>,   // 3
    pub scorer_w: H,                 // 1 x c foreground scorer
    pub scorer_b: H,                 // 1 x 1
}

#[derive(Debug, Clone)]
pub struct BackboneParams<H> {
    pub blocks: Vec<BlockParams<H>>,
}

#[derive(Debug, Clone)]
pub struct HeadParams<H> {
    pub det_w: H,
    pub det_b: H,
    pub occ_w: H,
    pub occ_b: H,
    pub map_w: H,
    pub map_b: H,
    pub mot_w: H,
    pub mot_b: H,
    pub plan_w: H,
    pub plan_b: H,
}

#[derive(Debug, Clone)]
pub struct ModelLayout<H> {
    pub vfe: VfeParams<H>,
    pub backbone: BackboneParams<H>,
    pub heads: HeadParams<H>,
}

impl<H: Copy> ScanParams<H> {
    pub fn map<T>(&self, f: &mut impl FnMut(H) -> T) -> ScanParams<T> {
        match self {
            ScanParams::Selective { wg, bg, wu, bu, wo, bo } => ScanParams::Selective {
                wg: f(*wg),
                bg: f(*bg),
                wu: f(*wu),
                bu: f(*bu),
                wo: f(*wo),
                bo: f(*bo),
            },
            ScanParams::Wkv { wr, wk, wv, w, u } => ScanParams::Wkv {
                wr: f(*wr),
                wk: f(*wk),
                wv: f(*wv),
                w: f(*w),
                u: f(*u),
            },
        }
    }

    pub fn handles(&self) -> Vec<H> {
        match self {
            ScanParams::Selective { wg, bg, wu, bu, wo, bo } => vec![*wg, *bg, *wu, *bu, *wo, *bo],
            ScanParams::Wkv { wr, wk, wv, w, u } => vec![*wr, *wk, *wv, *w, *u],
        }
    }
}

impl<H: Copy> ModelLayout<H> {
    pub fn map<T>(&self, f: &mut impl FnMut(H) -> T) -> ModelLayout<T> {
        ModelLayout {
            vfe: VfeParams {
                w1: f(self.vfe.w1),
                b1: f(self.vfe.b1),
                w2: f(self.vfe.w2),
                b2: f(self.vfe.b2),
            },
            backbone: BackboneParams {
                blocks: self
                    .backbone
                    .blocks
                    .iter()
                    .map(|b| BlockParams {
                        layers: b
                            .layers
                            .iter()
                            .map(|l| LayerParams {
                                ln_x_gamma: f(l.ln_x_gamma),
                                ln_x_beta: f(l.ln_x_beta),
                                scan_x: l.scan_x.map(f),
                                ln_y_gamma: f(l.ln_y_gamma),
                                ln_y_beta: f(l.ln_y_beta),
                                scan_y: l.scan_y.map(f),
                            })
                            .collect(),
                        descs: b
                            .descs
                            .iter()
                            .map(|d| DescParams {
                                kernel: f(d.kernel),
                                bias: f(d.bias),
                                gamma: f(d.gamma),
                                beta: f(d.beta),
                            })
                            .collect(),
                        scorer_w: f(b.scorer_w),
                        scorer_b: f(b.scorer_b),
                    })
                    .collect(),
            },
            heads: HeadParams {
                det_w: f(self.heads.det_w),
                det_b: f(self.heads.det_b),
                occ_w: f(self.heads.occ_w),
                occ_b: f(self.heads.occ_b),
                map_w: f(self.heads.map_w),
                map_b: f(self.heads.map_b),
                mot_w: f(self.heads.mot_w),
                mot_b: f(self.heads.mot_b),
                plan_w: f(self.heads.plan_w),
                plan_b: f(self.heads.plan_b),
            },
        }
    }
}

/// Shape parameters the layout depends on.
#[derive(Debug, Clone)]
pub struct ModelDims {
    /// Channels of raw voxelized points entering the VFE.
    pub raw_channels: usize,
    /// Token channels C throughout the backbone.
    pub channels: usize,
    pub blocks: usize,
    pub operator: OperatorKind,
    pub map_classes: usize,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub store: ParamStore,
    pub layout: ModelLayout<SegId>,
    pub dims: ModelDims,
}

fn alloc_scan(store: &mut ParamStore, prefix: &str, c: usize, op: OperatorKind) -> ScanParams<SegId> {
    match op {
        OperatorKind::Selective => ScanParams::Selective {
            wg: store.alloc(format!("{prefix}.wg"), c, c),
            bg: store.alloc(format!("{prefix}.bg"), 1, c),
            wu: store.alloc(format!("{prefix}.wu"), c, c),
            bu: store.alloc(format!("{prefix}.bu"), 1, c),
            wo: store.alloc(format!("{prefix}.wo"), c, c),
            bo: store.alloc(format!("{prefix}.bo"), 1, c),
        },
        OperatorKind::Wkv => ScanParams::Wkv {
            wr: store.alloc(format!("{prefix}.wr"), c, c),
            wk: store.alloc(format!("{prefix}.wk"), c, c),
            wv: store.alloc(format!("{prefix}.wv"), c, c),
            w: store.alloc(format!("{prefix}.w"), 1, c),
            u: store.alloc(format!("{prefix}.u"), 1, c),
        },
    }
}

impl ModelParams {
    /// Allocates every segment and fills it with the default initialization:
    /// gaussian weights scaled by 1/sqrt(fan_in), zero biases, unit layer-norm
    /// gain, positive WKV decay.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let c = dims.channels;
        let vfe = VfeParams {
            w1: store.alloc("vfe.w1", c, dims.raw_channels),
            b1: store.alloc("vfe.b1", 1, c),
            w2: store.alloc("vfe.w2", c, c),
            b2: store.alloc("vfe.b2", 1, c),
        };
        let mut blocks = Vec::new();
        for bi in 0..dims.blocks {
            let mut layers = Vec::new();
            for li in 0..4 {
                let p = format!("block{bi}.layer{li}");
                layers.push(LayerParams {
                    ln_x_gamma: store.alloc(format!("{p}.ln_x.gamma"), 1, c),
                    ln_x_beta: store.alloc(format!("{p}.ln_x.beta"), 1, c),
                    scan_x: alloc_scan(&mut store, &format!("{p}.scan_x"), c, dims.operator),
                    ln_y_gamma: store.alloc(format!("{p}.ln_y.gamma"), 1, c),
                    ln_y_beta: store.alloc(format!("{p}.ln_y.beta"), 1, c),
                    scan_y: alloc_scan(&mut store, &format!("{p}.scan_y"), c, dims.operator),
                });
            }
            let mut descs = Vec::new();
            for di in 0..3 {
                let p = format!("block{bi}.desc{di}");
                descs.push(DescParams {
                    kernel: store.alloc(format!("{p}.kernel"), 27 * c, c),
                    bias: store.alloc(format!("{p}.bias"), 1, c),
                    gamma: store.alloc(format!("{p}.ln.gamma"), 1, c),
                    beta: store.alloc(format!("{p}.ln.beta"), 1, c),
                });
            }
            blocks.push(BlockParams {
                layers,
                descs,
                scorer_w: store.alloc(format!("block{bi}.scorer.w"), 1, c),
                scorer_b: store.alloc(format!("block{bi}.scorer.b"), 1, 1),
            });
        }
        let heads = HeadParams {
            det_w: store.alloc("heads.det.w", 1, c),
            det_b: store.alloc("heads.det.b", 1, 1),
            occ_w: store.alloc("heads.occ.w", 1, c),
            occ_b: store.alloc("heads.occ.b", 1, 1),
            map_w: store.alloc("heads.map.w", dims.map_classes, c),
            map_b: store.alloc("heads.map.b", 1, dims.map_classes),
            mot_w: store.alloc("heads.mot.w", 2, c),
            mot_b: store.alloc("heads.mot.b", 1, 2),
            plan_w: store.alloc("heads.plan.w", 2, c),
            plan_b: store.alloc("heads.plan.b", 1, 2),
        };
        let mut params = ModelParams {
            store,
            layout: ModelLayout { vfe, backbone: BackboneParams { blocks }, heads },
            dims,
        };
        params.default_init(seed);
        params
    }

    fn default_init(&mut self, seed: u64) {
        let mut rng = Rng::new(seed).fork(0x7061_7261_6d73);
        for si in 0..self.store.segs.len() {
            let seg = self.store.segs[si].clone();
            let id = SegId(si);
            let name = seg.name.clone();
            let is_bias = [".beta", ".b1", ".b2", ".bg", ".bu", ".bo", ".bias", ".b"]
                .iter()
                .any(|s| name.ends_with(s));
            if name.ends_with(".gamma") {
                self.store.slice_mut(id).fill(1.0);
            } else if is_bias {
                self.store.slice_mut(id).fill(0.0);
            } else if name.ends_with("scan_x.w") || name.ends_with("scan_y.w") {
                // WKV per-channel decay, kept nonnegative
                for v in self.store.slice_mut(id) {
                    *v = rng.normal().abs() * 0.5 + 0.05;
                }
            } else {
                let fan_in = seg.cols.max(1) as f64;
                let scale = 1.0 / fan_in.sqrt();
                for v in self.store.slice_mut(id) {
                    *v = rng.normal() * scale;
                }
            }
        }
    }

    /// Fills every segment with nonzero randomness (used by robustness tests
    /// that need biases and norm offsets to be generic).
    pub fn randomize_all(&mut self, seed: u64) {
        let mut rng = Rng::new(seed).fork(0x72_616e_64);
        for si in 0..self.store.segs.len() {
            let name = self.store.segs[si].name.clone();
            let id = SegId(si);
            for v in self.store.slice_mut(id) {
                *v = rng.normal() * 0.5;
            }
            if name.ends_with("scan_x.w") || name.ends_with("scan_y.w") {
                for v in self.store.slice_mut(id) {
                    *v = v.abs() + 0.05;
                }
            }
        }
    }

    /// Re-projects constrained segments after a gradient step (WKV decay >= 0).
    pub fn clamp_constraints(&mut self) {
        for si in 0..self.store.segs.len() {
            let name = self.store.segs[si].name.clone();
            if name.ends_with("scan_x.w") || name.ends_with("scan_y.w") {
                for v in self.store.slice_mut(SegId(si)) {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    /// Registers every segment as a tape parameter leaf, in segment order.
    /// Returns the bound layout plus the leaf ids aligned with segments.
    pub fn bind(&self, tape: &mut Tape) -> (ModelLayout<ValId>, Vec<ValId>) {
        let ids: Vec<ValId> = (0..self.store.segs.len())
            .map(|i| tape.param(self.store.mat(SegId(i))))
            .collect();
        let layout = self.layout.map(&mut |sid: SegId| ids[sid.0]);
        (layout, ids)
    }

    /// Plain-value layout for the pure (tape-free) entry points.
    pub fn values(&self) -> ModelLayout<Mat> {
        self.layout.map(&mut |sid: SegId| self.store.mat(sid))
    }

    /// Flattens per-leaf gradients into a vector aligned with `store.data`.
    pub fn grads_to_flat(&self, grads: &crate::autodiff::Grads, ids: &[ValId]) -> Vec<f64> {
        let mut flat = vec![0.0; self.store.data.len()];
        for (si, &id) in ids.iter().enumerate() {
            let seg = &self.store.segs[si];
            let g = grads.get_or_zeros(id, seg.rows, seg.cols);
            flat[seg.offset..seg.offset + seg.rows * seg.cols].copy_from_slice(&g.data);
        }
        flat
    }

    /// True for components that have a gradient path from the task losses.
    /// Foreground scorers only steer the discrete voxel-generation routing,
    /// which differentiation treats as constant, so they are excluded from
    /// direction sampling in finite-difference checks.
    pub fn active_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.store.data.len()];
        for seg in &self.store.segs {
            if seg.name.contains(".scorer.") {
                for m in mask
                    .iter_mut()
                    .skip(seg.offset)
                    .take(seg.rows * seg.cols)
                {
                    *m = false;
                }
            }
        }
        mask
    }

    /// Serialized checkpoint: segment table plus the flat data.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "segments": self.store.segs.iter().map(|s| serde_json::json!({
                "name": s.name, "rows": s.rows, "cols": s.cols, "offset": s.offset,
            })).collect::<Vec<_>>(),
            "data": self.store.data,
        })
    }
}
