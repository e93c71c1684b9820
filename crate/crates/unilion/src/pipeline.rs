//! End-to-end frame processing: raw sensor inputs to unified tokens under an
//! availability regime, the backbone to a BEV, heads to losses, plus the toy
//! training loop. One code path serves every regime: disabled modalities
//! simply contribute no rows and no graph nodes, so an L run of an
//! LCT-configured model is bit-identical to a natively L-configured one.

use crate::autodiff::{Tape, ValId};
use crate::backbone::{backbone_t, vfe_t, DenseBev, FrozenRouting, InvariantLog, TapeTokens};
use crate::config::{Availability, RunConfig};
use crate::error::{Error, Result};
use crate::fusion::{align_entries, lift_camera, merge_structure, MemoryBank};
use crate::loss::{heads_t, HeadTargets, LossWeights, TaskLosses};
use crate::mat::Mat;
use crate::model::{ModelLayout, ModelParams, VfeParams};
use crate::scene::{FrameTruth, SceneFrame};
use crate::voxel::{voxelize, PointCloud, SparseFeatureSet, VoxelCoord, VoxelGrid};

/// Assembles one frame's voxel tokens on the tape: LiDAR voxels through the
/// VFE, camera voxels lifted from the rasters (constants), modality overlap
/// merged by mean, then historical frames aligned and merged in. The bank is
/// updated with the current frame's pre-temporal tokens when temporal fusion
/// is active.
#[allow(clippy::too_many_arguments)]
pub fn frame_tokens_t(
    tape: &mut Tape,
    frame: &SceneFrame,
    grid: &VoxelGrid,
    channels: usize,
    top_k: usize,
    avail: Availability,
    vfe: &VfeParams<ValId>,
    bank: &mut MemoryBank,
) -> Result<TapeTokens> {
    // LiDAR tokens
    let mut tokens = if avail.lidar {
        let raw = voxelize(&PointCloud::new(frame.points.clone())?, grid);
        let raw_feat = tape.constant(raw.features.clone());
        let feat = vfe_t(tape, raw_feat, vfe)?;
        TapeTokens {
            coords: raw.coords,
            grid: grid.clone(),
            feat,
        }
    } else {
        let zero = tape.constant(Mat::zeros(0, channels));
        TapeTokens {
            coords: Vec::new(),
            grid: grid.clone(),
            feat: zero,
        }
    };

    // camera tokens: the whole branch is input-derived, hence constant
    if avail.camera {
        if frame.cameras.is_empty() {
            return Err(Error::MissingModality("camera"));
        }
        let mut entries: Vec<(VoxelCoord, usize)> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (model, raster) in &frame.cameras {
            if raster.features.cols != channels {
                return Err(Error::DimensionMismatch {
                    context: "camera feature channels",
                    expected: channels,
                    actual: raster.features.cols,
                });
            }
            let lifted = lift_camera(raster, model, grid, top_k)?;
            for (i, coord) in lifted.coords.iter().enumerate() {
                entries.push((*coord, rows.len()));
                rows.push(lifted.features.row(i).to_vec());
            }
        }
        // duplicate camera voxels across cameras also sum
        let stacked = if rows.is_empty() {
            Mat::zeros(0, channels)
        } else {
            Mat::from_rows(rows)
        };
        let (vc, _) = crate::fusion::merge_rows(grid, &entries, &stacked, false);
        // modality concat + mean merge, staged on the tape
        let vc_feat = tape.constant(vc.features.clone());
        let stacked_feat = tape.concat_rows(&[tokens.feat, vc_feat])?;
        let mut concat_entries: Vec<(VoxelCoord, usize)> = Vec::new();
        for (i, c) in tokens.coords.iter().enumerate() {
            concat_entries.push((*c, i));
        }
        for (i, c) in vc.coords.iter().enumerate() {
            concat_entries.push((*c, tokens.coords.len() + i));
        }
        let (coords, groups) = merge_structure(&concat_entries);
        let feat = tape.merge_mean(stacked_feat, groups);
        tokens = TapeTokens {
            coords,
            grid: grid.clone(),
            feat,
        };
    }

    // temporal fusion: aligned history plus current, merged by mean
    if avail.temporal {
        let cur_value = SparseFeatureSet {
            grid: grid.clone(),
            coords: tokens.coords.clone(),
            features: tape.value(tokens.feat).clone(),
        };
        if !bank.is_empty() {
            let mut parts: Vec<ValId> = Vec::new();
            let mut entries: Vec<(VoxelCoord, usize)> = Vec::new();
            let mut offset = 0usize;
            for (set, pose) in bank.iter() {
                let aligned = align_entries(set, pose, &frame.pose, grid)?;
                let hist = tape.constant(set.features.clone());
                for (coord, src) in aligned {
                    entries.push((coord, offset + src));
                }
                offset += set.len();
                parts.push(hist);
            }
            parts.push(tokens.feat);
            for (i, c) in tokens.coords.iter().enumerate() {
                entries.push((*c, offset + i));
            }
            let stacked = tape.concat_rows(&parts)?;
            let (coords, groups) = merge_structure(&entries);
            let feat = tape.merge_mean(stacked, groups);
            tokens = TapeTokens {
                coords,
                grid: grid.clone(),
                feat,
            };
        }
        bank.push(cur_value, frame.pose.clone());
    }

    Ok(tokens)
}

/// Tokens through the backbone to the BEV node.
#[allow(clippy::too_many_arguments)]
pub fn forward_frame_t(
    tape: &mut Tape,
    frame: &SceneFrame,
    cfg: &RunConfig,
    bound: &ModelLayout<ValId>,
    avail: Availability,
    bank: &mut MemoryBank,
    frozen: Option<&FrozenRouting>,
    log: &mut InvariantLog,
) -> Result<(ValId, FrozenRouting)> {
    let grid = cfg.grid()?;
    let tokens = frame_tokens_t(
        tape,
        frame,
        &grid,
        cfg.channels,
        cfg.top_k,
        avail,
        &bound.vfe,
        bank,
    )?;
    let bb = cfg.backbone_config()?;
    backbone_t(tape, tokens, &bb, &bound.backbone, frozen, log)
}

/// Runs a frame sequence under the given availability with fixed weights.
pub fn run_frames(
    cfg: &RunConfig,
    params: &ModelParams,
    frames: &[SceneFrame],
    avail: Availability,
) -> Result<Vec<(DenseBev, InvariantLog)>> {
    let grid = cfg.grid()?;
    let mut bank = MemoryBank::new();
    let mut out = Vec::new();
    for frame in frames {
        let mut tape = Tape::new();
        let bound = params.layout.map(&mut |sid| tape.constant(params.store.mat(sid)));
        let mut log = InvariantLog::default();
        let (bev, _) = forward_frame_t(
            &mut tape, frame, cfg, &bound, avail, &mut bank, None, &mut log,
        )?;
        out.push((
            DenseBev {
                h: grid.extent[0] as usize,
                w: grid.extent[1] as usize,
                mat: tape.value(bev).clone(),
            },
            log,
        ));
    }
    Ok(out)
}

/// Which heads train.
#[derive(Debug, Clone, Copy)]
pub struct TaskSet {
    pub det: bool,
    pub occ: bool,
    pub map: bool,
    pub mot: bool,
    pub plan: bool,
}

impl TaskSet {
    pub fn from_names(names: &[String]) -> Self {
        let has = |n: &str| names.iter().any(|s| s == n);
        TaskSet {
            det: has("det"),
            occ: has("occ"),
            map: has("map"),
            mot: has("mot"),
            plan: has("plan"),
        }
    }
}

/// Toy targets derived from the frame and its retained truth.
pub fn build_targets(
    frame: &SceneFrame,
    truth: &FrameTruth,
    grid: &VoxelGrid,
    tasks: TaskSet,
    map_classes: usize,
) -> HeadTargets {
    let h = grid.extent[0] as usize;
    let w = grid.extent[1] as usize;
    let cells = h * w;
    let cell_of = |x: u32, y: u32| x as usize * w + y as usize;

    let mut occupied = vec![false; cells];
    for i in 0..frame.points.rows {
        let r = frame.points.row(i);
        if let Some(c) = grid.cell_of([r[0], r[1], r[2]]) {
            occupied[cell_of(c[0], c[1])] = true;
        }
    }
    let mut centers = vec![false; cells];
    let mut footprint: Vec<Option<usize>> = vec![None; cells]; // box index per cell
    for (bi, center) in truth.box_centers.iter().enumerate() {
        if let Some(c) = grid.cell_of(*center) {
            centers[cell_of(c[0], c[1])] = true;
        }
        let half = truth.box_half_sizes[bi];
        // mark the xy footprint at the box's z-center
        let steps_x = (half[0] / grid.voxel_size[0]).ceil() as i64;
        let steps_y = (half[1] / grid.voxel_size[1]).ceil() as i64;
        if let Some(c) = grid.cell_of(*center) {
            for dx in -steps_x..=steps_x {
                for dy in -steps_y..=steps_y {
                    let x = c[0] as i64 + dx;
                    let y = c[1] as i64 + dy;
                    if x >= 0 && y >= 0 && (x as usize) < h && (y as usize) < w {
                        footprint[x as usize * w + y as usize] = Some(bi);
                    }
                }
            }
        }
    }

    HeadTargets {
        det_heatmap: tasks.det.then(|| {
            Mat::from_fn(cells, 1, |i, _| if centers[i] { 1.0 } else { 0.0 })
        }),
        occupancy: tasks.occ.then(|| {
            Mat::from_fn(cells, 1, |i, _| if occupied[i] { 1.0 } else { 0.0 })
        }),
        map_labels: tasks.map.then(|| {
            (0..cells)
                .map(|i| {
                    if footprint[i].is_some() {
                        1usize.min(map_classes - 1)
                    } else if occupied[i] && map_classes > 2 {
                        2
                    } else {
                        0
                    }
                })
                .collect()
        }),
        motion: tasks.mot.then(|| {
            Mat::from_fn(cells, 2, |i, j| match footprint[i] {
                Some(bi) => truth.box_velocities[bi][j],
                None => 0.0,
            })
        }),
        plan: tasks
            .plan
            .then(|| Mat::from_rows(vec![truth.ego_delta_xy.to_vec()])),
    }
}

/// One training-step record, serialized as one JSON line.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub losses: TaskLosses,
    pub total: f64,
}

impl TrainRecord {
    pub fn to_json(&self) -> serde_json::Value {
        let l = &self.losses;
        let field = |v: Option<f64>| match v {
            Some(x) => serde_json::json!(x),
            None => serde_json::Value::Null,
        };
        serde_json::json!({
            "step": self.step,
            "l_det": field(l.det),
            "l_map": field(l.map),
            "l_occ": field(l.occ),
            "l_mot": field(l.mot),
            "l_plan": field(l.plan),
            "total": self.total,
        })
    }
}

/// Plain-SGD toy training over a fixed synthetic scene. Losses from every
/// frame of the scene are averaged; history enters through the streaming
/// memory bank with detached values.
pub fn train_toy(
    cfg: &RunConfig,
    params: &mut ModelParams,
    scene: &[(SceneFrame, FrameTruth)],
    steps: usize,
) -> Result<Vec<TrainRecord>> {
    let grid = cfg.grid()?;
    let avail = cfg.availability();
    let tasks = TaskSet::from_names(&cfg.train_tasks);
    let weights = LossWeights(cfg.loss_weights);
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::new();
        let (bound, ids) = params.bind(&mut tape);
        let mut bank = MemoryBank::new();
        let mut frame_totals: Vec<(ValId, f64)> = Vec::new();
        let mut last_losses = TaskLosses::default();
        for (frame, truth) in scene {
            let mut log = InvariantLog::default();
            let (bev, _) = forward_frame_t(
                &mut tape, frame, cfg, &bound, avail, &mut bank, None, &mut log,
            )?;
            if !log.all_pass() {
                return Err(Error::InvalidConfig(
                    "structural invariant failed during training".into(),
                ));
            }
            let targets = build_targets(frame, truth, &grid, tasks, cfg.map_classes);
            let loss_ids = heads_t(&mut tape, bev, &bound.heads, &targets)?;
            let total = loss_ids.total_t(&mut tape, &weights)?;
            frame_totals.push((total, 1.0 / scene.len() as f64));
            last_losses = loss_ids.values(&tape);
        }
        let overall = tape.weighted_sum(&frame_totals);
        let total_value = tape.value(overall).data[0];
        let grads = tape.backward(overall)?;
        let flat = params.grads_to_flat(&grads, &ids);
        for (p, g) in params.store.data.iter_mut().zip(flat.iter()) {
            *p -= cfg.learning_rate * g;
        }
        params.clamp_constraints();
        records.push(TrainRecord {
            step,
            losses: last_losses,
            total: total_value,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    fn small_cfg() -> RunConfig {
        RunConfig::from_toml_str(
            r#"
channels = 8
blocks = 2
window_x = [4, 4]
window_y = [4, 4]
window_z = [8, 4]
group_sizes = [64, 64]
grid_extent = [24, 24, 8]
grid_origin = [-3.6, -3.6, -0.5]
scene_boxes = 2
scene_points_per_box = 120
scene_ground_points = 150
scene_area = 3.2
image_h = 4
image_w = 6
depth_bins = 16
depth_min = 1.0
depth_max = 8.0
scene_frames = 3
"#,
        )
        .unwrap()
    }

    fn scene_for(cfg: &RunConfig, seed: u64) -> Vec<(SceneFrame, FrameTruth)> {
        generate_scene(&cfg.scene_spec(), seed)
    }

    #[test]
    fn all_regimes_run_and_invariants_hold() {
        let cfg = small_cfg();
        let params = ModelParams::init(cfg.model_dims().unwrap(), cfg.seed);
        let frames: Vec<SceneFrame> = scene_for(&cfg, 3).into_iter().map(|(f, _)| f).collect();
        for (l, c, t) in [
            (true, false, false),
            (true, false, true),
            (true, true, false),
            (true, true, true),
        ] {
            let avail = Availability { lidar: l, camera: c, temporal: t };
            let outs = run_frames(&cfg, &params, &frames, avail).unwrap();
            assert_eq!(outs.len(), frames.len());
            for (bev, log) in &outs {
                assert!(log.all_pass(), "{}: {:?}", avail.tag(), log.checks);
                assert!(bev.mat.all_finite());
            }
        }
    }

    #[test]
    fn l_run_of_lct_model_bitwise_equals_native_l() {
        let cfg_lct = small_cfg();
        let mut cfg_l = small_cfg();
        cfg_l.camera = false;
        cfg_l.temporal = false;
        let params = ModelParams::init(cfg_lct.model_dims().unwrap(), 42);
        let frames: Vec<SceneFrame> = scene_for(&cfg_lct, 5).into_iter().map(|(f, _)| f).collect();
        // same weights, LCT config run under L availability
        let l_avail = Availability { lidar: true, camera: false, temporal: false };
        let a = run_frames(&cfg_lct, &params, &frames, l_avail).unwrap();
        let b = run_frames(&cfg_l, &params, &frames, cfg_l.availability()).unwrap();
        for ((ba, _), (bb, _)) in a.iter().zip(&b) {
            assert_eq!(ba.mat.data.len(), bb.mat.data.len());
            for (x, y) in ba.mat.data.iter().zip(bb.mat.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn lc_run_of_lct_model_bitwise_equals_native_lc() {
        let cfg_lct = small_cfg();
        let mut cfg_lc = small_cfg();
        cfg_lc.temporal = false;
        let params = ModelParams::init(cfg_lct.model_dims().unwrap(), 31);
        let frames: Vec<SceneFrame> =
            scene_for(&cfg_lct, 33).into_iter().map(|(f, _)| f).collect();
        let lc = Availability { lidar: true, camera: true, temporal: false };
        let a = run_frames(&cfg_lct, &params, &frames, lc).unwrap();
        let b = run_frames(&cfg_lc, &params, &frames, cfg_lc.availability()).unwrap();
        for ((x, _), (y, _)) in a.iter().zip(&b) {
            for (p, q) in x.mat.data.iter().zip(y.mat.data.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn lc_and_lct_differ_only_through_temporal_path() {
        let cfg = small_cfg();
        let params = ModelParams::init(cfg.model_dims().unwrap(), 7);
        let frames: Vec<SceneFrame> = scene_for(&cfg, 9).into_iter().map(|(f, _)| f).collect();
        let lc = Availability { lidar: true, camera: true, temporal: false };
        let lct = Availability { lidar: true, camera: true, temporal: true };
        let a = run_frames(&cfg, &params, &frames, lc).unwrap();
        let b = run_frames(&cfg, &params, &frames, lct).unwrap();
        // first frame: cold-start temporal is a single-row mean merge, which
        // is arithmetically the identity, so the BEVs agree; later frames mix
        // history and differ
        assert!(crate::mat::max_rel_err(&a[0].0.mat, &b[0].0.mat) <= 1e-12);
        assert!(a.last().unwrap().0.mat.data != b.last().unwrap().0.mat.data);
    }

    #[test]
    fn deterministic_forward_same_seed() {
        let cfg = small_cfg();
        let params = ModelParams::init(cfg.model_dims().unwrap(), 1);
        let frames: Vec<SceneFrame> = scene_for(&cfg, 2).into_iter().map(|(f, _)| f).collect();
        let avail = cfg.availability();
        let a = run_frames(&cfg, &params, &frames, avail).unwrap();
        let b = run_frames(&cfg, &params, &frames, avail).unwrap();
        for ((x, _), (y, _)) in a.iter().zip(&b) {
            assert_eq!(x.mat.data, y.mat.data);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.05;
        let scene = scene_for(&cfg, 17);
        let dims = cfg.model_dims().unwrap();
        let mut p1 = ModelParams::init(dims.clone(), 23);
        let r1 = train_toy(&cfg, &mut p1, &scene, 30).unwrap();
        assert!(r1.last().unwrap().total < r1[0].total);
        let mut p2 = ModelParams::init(dims, 23);
        let r2 = train_toy(&cfg, &mut p2, &scene, 30).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
        assert_eq!(p1.store.data, p2.store.data);
    }

    #[test]
    fn zero_learning_rate_flat_curve() {
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.0;
        let scene = scene_for(&cfg, 19);
        let mut params = ModelParams::init(cfg.model_dims().unwrap(), 29);
        let records = train_toy(&cfg, &mut params, &scene, 5).unwrap();
        for r in &records {
            assert_eq!(r.total.to_bits(), records[0].total.to_bits());
        }
    }
}
