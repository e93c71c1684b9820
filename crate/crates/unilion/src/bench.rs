//! Complexity benchmark: group-scan wall time and multiply-add counts versus
//! a quadratic softmax-attention reference over the same sequences.

use std::time::Instant;

use crate::backbone::OperatorKind;
use crate::mat::{matvec, Mat};
use crate::rng::Rng;
use crate::scan::{selective_scan_inference, wkv_scan_inference};

/// Full (acausal) softmax attention y_t = sum_s softmax(q_t . k_s / sqrt C) v_s
/// with projected q, k, v. Returns the output and the multiply-add count.
pub fn quadratic_attention(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> (Mat, u64) {
    let t_len = x.rows;
    let c = x.cols;
    let mut q = Mat::zeros(t_len, c);
    let mut k = Mat::zeros(t_len, c);
    let mut v = Mat::zeros(t_len, c);
    let mut buf = vec![0.0; c];
    for t in 0..t_len {
        matvec(wq, x.row(t), &mut buf);
        q.row_mut(t).copy_from_slice(&buf);
        matvec(wk, x.row(t), &mut buf);
        k.row_mut(t).copy_from_slice(&buf);
        matvec(wv, x.row(t), &mut buf);
        v.row_mut(t).copy_from_slice(&buf);
    }
    let scale = 1.0 / (c as f64).sqrt();
    let mut y = Mat::zeros(t_len, c);
    let mut logits = vec![0.0f64; t_len];
    for t in 0..t_len {
        let qr = q.row(t);
        let mut m = f64::NEG_INFINITY;
        for (s, logit) in logits.iter_mut().enumerate() {
            let kr = k.row(s);
            let mut dot = 0.0;
            for i in 0..c {
                dot += qr[i] * kr[i];
            }
            *logit = dot * scale;
            m = m.max(*logit);
        }
        let mut denom = 0.0;
        for logit in logits.iter_mut() {
            *logit = (*logit - m).exp();
            denom += *logit;
        }
        let yr = y.row_mut(t);
        for (s, &weight) in logits.iter().enumerate() {
            let w = weight / denom;
            let vr = v.row(s);
            for i in 0..c {
                yr[i] += w * vr[i];
            }
        }
    }
    // projections + per (t, s) pair one C-dot and one C-axpy
    let madds = 3 * (t_len as u64) * (c as u64) * (c as u64)
        + (t_len as u64) * (t_len as u64) * 2 * (c as u64);
    (y, madds)
}

/// Seconds per call: repeats `f` until at least `min_millis` of work has
/// accumulated, then averages. The first call warms up untimed.
pub fn measure<F: FnMut()>(mut f: F, min_millis: u64) -> f64 {
    f();
    let mut reps = 1u32;
    loop {
        let start = Instant::now();
        for _ in 0..reps {
            f();
        }
        let elapsed = start.elapsed();
        if elapsed.as_millis() as u64 >= min_millis {
            return elapsed.as_secs_f64() / reps as f64;
        }
        reps = reps.saturating_mul(2);
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub t: usize,
    pub scan_secs: f64,
    pub attn_secs: f64,
    pub scan_madds: u64,
    pub attn_madds: u64,
}

/// Times one group's scan against the attention reference at each length.
pub fn run_bench(lengths: &[usize], c: usize, operator: OperatorKind, seed: u64) -> Vec<BenchRow> {
    let mut rng = Rng::new(seed).fork(0x62656e6368);
    let wq = Mat::from_fn(c, c, |_, _| rng.normal() * 0.3);
    let wk = Mat::from_fn(c, c, |_, _| rng.normal() * 0.3);
    let wv = Mat::from_fn(c, c, |_, _| rng.normal() * 0.3);
    let sel = crate::scan::SelectiveScanParams::random(&mut rng, c);
    let wkv = crate::scan::WkvScanParams::random(&mut rng, c);
    let inputs: Vec<(usize, Mat, Vec<bool>)> = lengths
        .iter()
        .map(|&t| (t, Mat::from_fn(t, c, |_, _| rng.normal()), vec![false; t]))
        .collect();
    // measurement rounds interleave the lengths so a burst of outside load
    // hits every length alike and cancels out of the doubling ratios; the
    // per-length minimum across rounds keeps each length's cleanest window
    let mut scan_secs = vec![f64::INFINITY; inputs.len()];
    let mut attn_secs = vec![f64::INFINITY; inputs.len()];
    for _round in 0..7 {
        for (i, (_, x, mask)) in inputs.iter().enumerate() {
            let secs = measure(
                || match operator {
                    OperatorKind::Selective => {
                        std::hint::black_box(selective_scan_inference(x, &sel, mask).unwrap());
                    }
                    OperatorKind::Wkv => {
                        std::hint::black_box(wkv_scan_inference(x, &wkv, mask).unwrap());
                    }
                },
                60,
            );
            scan_secs[i] = scan_secs[i].min(secs);
        }
    }
    for _round in 0..4 {
        for (i, (_, x, _)) in inputs.iter().enumerate() {
            let secs = measure(
                || {
                    std::hint::black_box(quadratic_attention(x, &wq, &wk, &wv));
                },
                150,
            );
            attn_secs[i] = attn_secs[i].min(secs);
        }
    }
    inputs
        .iter()
        .enumerate()
        .map(|(i, (t, x, mask))| {
            let scan_madds = match operator {
                OperatorKind::Selective => selective_scan_inference(x, &sel, mask).unwrap().1,
                OperatorKind::Wkv => wkv_scan_inference(x, &wkv, mask).unwrap().1,
            };
            let (_, attn_madds) = quadratic_attention(x, &wq, &wk, &wv);
            BenchRow {
                t: *t,
                scan_secs: scan_secs[i],
                attn_secs: attn_secs[i],
                scan_madds,
                attn_madds,
            }
        })
        .collect()
}

/// CSV with a stable header: t,scan_secs,attn_secs,scan_madds,attn_madds.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("t,scan_secs,attn_secs,scan_madds,attn_madds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{},{}\n",
            r.t, r.scan_secs, r.attn_secs, r.scan_madds, r.attn_madds
        ));
    }
    out
}
