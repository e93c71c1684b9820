//! The runnable gradient-check suite: central-difference verification of
//! every differentiable op on small random instances, plus an end-to-end
//! check of a one-block backbone loss along random parameter directions.
//!
//! The end-to-end closure freezes the discrete routing (foreground selection)
//! and the dynamic loss coefficients at their base-run values, matching what
//! the backward pass differentiates: routing is constant by construction and
//! balancing weights are detached.

use crate::autodiff::fd::{check_directions, check_per_param, GradientReport};
use crate::autodiff::{ScanParamIds, Tape, ValId};
use crate::backbone::{FrozenRouting, InvariantLog};
use crate::config::RunConfig;
use crate::error::Result;
use crate::fusion::MemoryBank;
use crate::loss::{dynamic_weight, heads_t, HeadTargets, LossWeights};
use crate::mat::Mat;
use crate::model::ModelParams;
use crate::pipeline::{build_targets, forward_frame_t, TaskSet};
use crate::rng::Rng;
use crate::scan::{SelectiveScanParams, WkvScanParams};
use crate::scene::generate_scene;

pub const PER_OP_EPS: f64 = 1e-5;
pub const PER_OP_TOL: f64 = 1e-6;
pub const END_TO_END_TOL: f64 = 1e-4;
pub const END_TO_END_DIRECTIONS: usize = 64;

fn check_param(
    p0: &Mat,
    build: &dyn Fn(&mut Tape, ValId) -> ValId,
) -> f64 {
    let mut tape = Tape::new();
    let pid = tape.param(p0.clone());
    let loss = build(&mut tape, pid);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic = grads.get_or_zeros(pid, p0.rows, p0.cols);
    let f = |data: &[f64]| {
        let mut t = Tape::new();
        let pid = t.param(Mat::from_vec(p0.rows, p0.cols, data.to_vec()));
        let loss = build(&mut t, pid);
        t.value(loss).data[0]
    };
    check_per_param(&f, &p0.data, &analytic.data, PER_OP_EPS)
}

fn rmat(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.normal())
}

/// One finite-difference entry per differentiable op.
pub fn per_op_report(seed: u64) -> GradientReport {
    let mut rng = Rng::new(seed).fork(0x6764636b);
    let mut report = GradientReport::new(PER_OP_EPS);

    // affine: x, w, b
    {
        let x = rmat(&mut rng, 5, 3);
        let w = rmat(&mut rng, 2, 3);
        let b = rmat(&mut rng, 1, 2);
        let r = rmat(&mut rng, 5, 2);
        let mut worst = check_param(&x, &|t, p| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let y = t.affine(p, w, b).unwrap();
            t.dot_const(y, r.clone())
        });
        worst = worst.max(check_param(&w, &|t, p| {
            let x = t.constant(x.clone());
            let b = t.constant(b.clone());
            let y = t.affine(x, p, b).unwrap();
            t.dot_const(y, r.clone())
        }));
        worst = worst.max(check_param(&b, &|t, p| {
            let x = t.constant(x.clone());
            let w = t.constant(w.clone());
            let y = t.affine(x, w, p).unwrap();
            t.dot_const(y, r.clone())
        }));
        report.record("affine", worst);
    }

    // gelu
    {
        let x = rmat(&mut rng, 6, 4);
        let r = rmat(&mut rng, 6, 4);
        report.record("gelu", check_param(&x, &|t, p| {
            let y = t.gelu(p);
            t.dot_const(y, r.clone())
        }));
    }

    // layer norm: x, gamma, beta
    {
        let x = rmat(&mut rng, 5, 6);
        let gamma = rmat(&mut rng, 1, 6);
        let beta = rmat(&mut rng, 1, 6);
        let r = rmat(&mut rng, 5, 6);
        let mut worst = check_param(&x, &|t, p| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let y = t.layer_norm(p, g, b, 1e-5).unwrap();
            t.dot_const(y, r.clone())
        });
        worst = worst.max(check_param(&gamma, &|t, p| {
            let x = t.constant(x.clone());
            let b = t.constant(beta.clone());
            let y = t.layer_norm(x, p, b, 1e-5).unwrap();
            t.dot_const(y, r.clone())
        }));
        worst = worst.max(check_param(&beta, &|t, p| {
            let x = t.constant(x.clone());
            let g = t.constant(gamma.clone());
            let y = t.layer_norm(x, g, p, 1e-5).unwrap();
            t.dot_const(y, r.clone())
        }));
        report.record("layer_norm", worst);
    }

    // submanifold conv: x, w, b over a small random pattern
    {
        let coords = support::random_coords(&mut rng, [6, 6, 3], 35);
        let pairs = crate::sparse::conv_pairs(&coords);
        let n = coords.len();
        let x = rmat(&mut rng, n, 2);
        let w = rmat(&mut rng, 27 * 2, 2);
        let b = rmat(&mut rng, 1, 2);
        let r = rmat(&mut rng, n, 2);
        let mut worst = check_param(&x, &|t, p| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let y = t.subm_conv(p, w, b, pairs.clone(), n).unwrap();
            t.dot_const(y, r.clone())
        });
        worst = worst.max(check_param(&w, &|t, p| {
            let x = t.constant(x.clone());
            let b = t.constant(b.clone());
            let y = t.subm_conv(x, p, b, pairs.clone(), n).unwrap();
            t.dot_const(y, r.clone())
        }));
        worst = worst.max(check_param(&b, &|t, p| {
            let x = t.constant(x.clone());
            let w = t.constant(w.clone());
            let y = t.subm_conv(x, w, p, pairs.clone(), n).unwrap();
            t.dot_const(y, r.clone())
        }));
        report.record("submanifold_conv3", worst);
    }

    // gather / concat / merge / expand / flatten / mean
    {
        let x = rmat(&mut rng, 8, 3);
        let r5 = rmat(&mut rng, 5, 3);
        report.record("gather", check_param(&x, &|t, p| {
            let y = t.gather(p, vec![3, 0, 7, 3, 5]);
            t.dot_const(y, r5.clone())
        }));
        let other = rmat(&mut rng, 3, 3);
        let r11 = rmat(&mut rng, 11, 3);
        report.record("concat_rows", check_param(&x, &|t, p| {
            let q = t.constant(other.clone());
            let y = t.concat_rows(&[p, q]).unwrap();
            t.dot_const(y, r11.clone())
        }));
        let children = vec![vec![0usize, 2, 4], vec![1], vec![3, 5, 6, 7]];
        let r3 = rmat(&mut rng, 3, 3);
        report.record("merge_mean", check_param(&x, &|t, p| {
            let y = t.merge_mean(p, children.clone());
            t.dot_const(y, r3.clone())
        }));
        let xc = rmat(&mut rng, 3, 3);
        let parent_of = vec![0usize, 0, 1, 2, 2, 1];
        let r6 = rmat(&mut rng, 6, 3);
        report.record("expand_copy", check_param(&xc, &|t, p| {
            let y = t.expand_copy(p, parent_of.clone());
            t.dot_const(y, r6.clone())
        }));
        let cell_of = vec![0usize, 1, 1, 0, 2, 2, 3, 0];
        let r4 = rmat(&mut rng, 4, 3);
        report.record("bev_flatten", check_param(&x, &|t, p| {
            let y = t.bev_flatten(p, cell_of.clone(), 4);
            t.dot_const(y, r4.clone())
        }));
        let r1 = rmat(&mut rng, 1, 3);
        report.record("mean_rows", check_param(&x, &|t, p| {
            let y = t.mean_rows(p);
            t.dot_const(y, r1.clone())
        }));
        report.record("sum_all", check_param(&x, &|t, p| t.sum_all(p)));
    }

    // selective scan through x and every parameter
    {
        let c = 2;
        let p = SelectiveScanParams::random(&mut rng, c);
        let x = rmat(&mut rng, 3, c);
        let r = rmat(&mut rng, 3, c);
        let groups = vec![vec![0usize, 1, 2]];
        let mats = [
            p.wg.clone(),
            Mat::row_vec(p.bg.clone()),
            p.wu.clone(),
            Mat::row_vec(p.bu.clone()),
            p.wo.clone(),
            Mat::row_vec(p.bo.clone()),
        ];
        let mut worst = check_param(&x, &|t, q| {
            let ids = ScanParamIds::Selective(std::array::from_fn(|i| t.constant(mats[i].clone())));
            let y = t.group_scan(q, ids, groups.clone(), 3).unwrap();
            t.dot_const(y, r.clone())
        });
        for which in 0..6 {
            worst = worst.max(check_param(&mats[which], &|t, q| {
                let mut ids: [ValId; 6] = std::array::from_fn(|i| t.constant(mats[i].clone()));
                ids[which] = q;
                let x = t.constant(x.clone());
                let y = t
                    .group_scan(x, ScanParamIds::Selective(ids), groups.clone(), 3)
                    .unwrap();
                t.dot_const(y, r.clone())
            }));
        }
        report.record("selective_scan", worst);
    }

    // WKV scan through x and every parameter, with a padded slot
    {
        let c = 3;
        let p = WkvScanParams::random(&mut rng, c);
        let x = rmat(&mut rng, 5, c);
        let r = rmat(&mut rng, 5, c);
        let groups = vec![vec![0usize, 1, 2, 3, 4]];
        let mats = [
            p.wr.clone(),
            p.wk.clone(),
            p.wv.clone(),
            Mat::row_vec(p.w.clone()),
            Mat::row_vec(p.u.clone()),
        ];
        let mut worst = check_param(&x, &|t, q| {
            let ids = ScanParamIds::Wkv(std::array::from_fn(|i| t.constant(mats[i].clone())));
            let y = t.group_scan(q, ids, groups.clone(), 7).unwrap();
            t.dot_const(y, r.clone())
        });
        for which in 0..5 {
            worst = worst.max(check_param(&mats[which], &|t, q| {
                let mut ids: [ValId; 5] = std::array::from_fn(|i| t.constant(mats[i].clone()));
                ids[which] = q;
                let x = t.constant(x.clone());
                let y = t
                    .group_scan(x, ScanParamIds::Wkv(ids), groups.clone(), 7)
                    .unwrap();
                t.dot_const(y, r.clone())
            }));
        }
        report.record("wkv_scan", worst);
    }

    // losses
    {
        let z = rmat(&mut rng, 6, 2);
        let target = Mat::from_fn(6, 2, |i, j| ((i + j) % 2) as f64);
        report.record("focal_loss", check_param(&z, &|t, p| {
            t.focal_loss(p, target.clone(), 0.25, 2.0)
        }));
        report.record("bce_loss", check_param(&z, &|t, p| t.bce_loss(p, target.clone())));
        let z3 = rmat(&mut rng, 6, 3);
        let labels = vec![0usize, 2, 1, 2, 0, 1];
        report.record("softmax_ce", check_param(&z3, &|t, p| {
            t.softmax_ce(p, labels.clone())
        }));
        let tgt = z.map(|v| v + 0.2);
        report.record("smooth_l1", check_param(&z, &|t, p| t.smooth_l1(p, tgt.clone())));
        report.record("weighted_sum", check_param(&z, &|t, p| {
            let a = t.sum_all(p);
            let b = t.dot_const(p, tgt.clone());
            t.weighted_sum(&[(a, 0.7), (b, -1.3)])
        }));
    }

    report
}

/// Detached weighting coefficients of one evaluation, frozen for replays.
#[derive(Debug, Clone)]
struct TermCoeffs {
    det: Option<f64>,
    map: Option<f64>,
    occ: Option<f64>,
    mot: Option<f64>,
    plan: Option<f64>,
}

struct EndToEnd<'a> {
    cfg: &'a RunConfig,
    base: &'a ModelParams,
    frame: &'a crate::scene::SceneFrame,
    targets: HeadTargets,
    weights: LossWeights,
}

impl EndToEnd<'_> {
    fn run(
        &self,
        data: &[f64],
        frozen: Option<&FrozenRouting>,
        coeffs: Option<&TermCoeffs>,
    ) -> Result<(Tape, ValId, Vec<ValId>, FrozenRouting, TermCoeffs)> {
        let mut params = self.base.clone();
        params.store.data = data.to_vec();
        let mut tape = Tape::new();
        let (bound, ids) = params.bind(&mut tape);
        let mut bank = MemoryBank::new();
        let mut log = InvariantLog::default();
        let avail = self.cfg.availability();
        let (bev, routing) = forward_frame_t(
            &mut tape, self.frame, self.cfg, &bound, avail, &mut bank, frozen, &mut log,
        )?;
        let loss_ids = heads_t(&mut tape, bev, &bound.heads, &self.targets)?;
        let values = loss_ids.values(&tape);
        let l = self.weights.0;
        let det = values.det.unwrap_or(0.0);
        let fresh = TermCoeffs {
            det: values.det.map(|_| l[0]),
            map: values.map.map(|m| l[1] * dynamic_weight(det, m).value()),
            occ: values.occ.map(|o| l[2] * dynamic_weight(det, o).value()),
            mot: values.mot.map(|_| l[3]),
            plan: values.plan.map(|_| l[4]),
        };
        let used = coeffs.cloned().unwrap_or_else(|| fresh.clone());
        let mut terms = Vec::new();
        if let (Some(id), Some(c)) = (loss_ids.det, used.det) {
            terms.push((id, c));
        }
        if let (Some(id), Some(c)) = (loss_ids.map, used.map) {
            terms.push((id, c));
        }
        if let (Some(id), Some(c)) = (loss_ids.occ, used.occ) {
            terms.push((id, c));
        }
        if let (Some(id), Some(c)) = (loss_ids.mot, used.mot) {
            terms.push((id, c));
        }
        if let (Some(id), Some(c)) = (loss_ids.plan, used.plan) {
            terms.push((id, c));
        }
        let total = tape.weighted_sum(&terms);
        Ok((tape, total, ids, routing, fresh))
    }
}

/// End-to-end check: loss of a one-block backbone pipeline against central
/// differences along random directions over all gradient-bearing parameters.
pub fn end_to_end_check(cfg: &RunConfig, n_dirs: usize, eps: f64) -> Result<f64> {
    let scene = generate_scene(&cfg.scene_spec(), cfg.seed);
    let (frame, truth) = &scene[0];
    let grid = cfg.grid()?;
    let tasks = TaskSet::from_names(&cfg.train_tasks);
    let targets = build_targets(frame, truth, &grid, tasks, cfg.map_classes);
    let base = ModelParams::init(cfg.model_dims()?, cfg.seed);
    let harness = EndToEnd {
        cfg,
        base: &base,
        frame,
        targets,
        weights: LossWeights(cfg.loss_weights),
    };
    let (tape, total, ids, routing, coeffs) = harness.run(&base.store.data, None, None)?;
    let grads = tape.backward(total)?;
    let analytic = base.grads_to_flat(&grads, &ids);
    let f = |data: &[f64]| {
        let (tape, total, _, _, _) = harness
            .run(data, Some(&routing), Some(&coeffs))
            .expect("replay succeeds");
        tape.value(total).data[0]
    };
    let active = base.active_mask();
    let mut rng = Rng::new(cfg.seed).fork(0x65326521);
    Ok(check_directions(
        &f,
        &base.store.data,
        &analytic,
        eps,
        n_dirs,
        &mut rng,
        Some(&active),
    ))
}

/// The full gradient report: every op entry plus the end-to-end entry.
pub fn full_report(cfg: &RunConfig) -> Result<GradientReport> {
    let mut report = per_op_report(cfg.seed);
    let err = end_to_end_check(cfg, END_TO_END_DIRECTIONS, PER_OP_EPS)?;
    report.record("end_to_end_one_block", err);
    Ok(report)
}

/// Small config for the end-to-end check: one block, tiny scene.
pub fn gradcheck_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str(
        r#"
channels = 8
blocks = 1
window_x = [4]
window_y = [4]
window_z = [8]
group_sizes = [64]
grid_extent = [16, 16, 8]
grid_origin = [-2.4, -2.4, -0.5]
scene_boxes = 2
scene_points_per_box = 60
scene_ground_points = 60
scene_area = 2.0
scene_frames = 1
image_h = 3
image_w = 4
depth_bins = 8
depth_min = 1.0
depth_max = 5.0
train_tasks = ["det", "occ"]
"#,
    )
    .expect("gradcheck config parses");
    cfg.seed = seed;
    cfg
}

pub(crate) mod support {
    use crate::rng::Rng;
    use crate::voxel::VoxelCoord;

    pub fn random_coords(rng: &mut Rng, extent: [u32; 3], n: usize) -> Vec<VoxelCoord> {
        let mut coords: Vec<VoxelCoord> = (0..n)
            .map(|_| {
                VoxelCoord::new(
                    0,
                    rng.below(extent[0] as usize) as u32,
                    rng.below(extent[1] as usize) as u32,
                    rng.below(extent[2] as usize) as u32,
                )
            })
            .collect();
        coords.sort();
        coords.dedup();
        coords
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_op_suite_within_tolerance() {
        let report = per_op_report(11);
        assert!(report.entries.len() >= 15);
        for e in &report.entries {
            assert!(
                e.max_rel_err <= PER_OP_TOL,
                "{}: {:e}",
                e.name,
                e.max_rel_err
            );
        }
    }

    #[test]
    fn end_to_end_one_block_within_tolerance() {
        let cfg = gradcheck_config(3);
        let err = end_to_end_check(&cfg, 16, PER_OP_EPS).unwrap();
        assert!(err <= END_TO_END_TOL, "err {err:e}");
    }

    #[test]
    fn report_deterministic() {
        let a = per_op_report(5);
        let b = per_op_report(5);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}
