//! Invariance, oracle and gradient checks run by `selftest` and the
//! acceptance tests.

use std::f64::consts::PI;
use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use seqplace::datasets::{
    desk_sensor, generate_world, simulate_scan, ScanParams, SyntheticWorld, WorldSpec,
};
use seqplace::model::{
    image_tensor, ModelConfig, SeqOt, StreamOutput, StreamState, DESCRIPTOR_DIM,
};
use seqplace::nn::{
    grad_check, AttentionConfig, Conv2d, Conv2dSpec, GradCheck, GradCheckReport, LayerNorm, Linear,
    ParamSet, Tensor, TransformerBlock, TransformerConfig, Var, WidthPadding,
};
use seqplace::overlap::{overlap, OverlapTable};
use seqplace::rangeproj::{
    column_shift, project, reproject, yaw_rotate, PointCloud, Pose, RangeImage, SensorModel,
};
use seqplace::retrieval::{rank_queries, recall_from_ranks, DescriptorIndex, Truth};

use crate::config::desk_model;

pub const YAW_TOL: f32 = 1e-4;
pub const YAW_BUDGET: Duration = Duration::from_secs(60);
pub const SHIFT_VALUE_REL_TOL: f64 = 1e-6;
pub const PRIMITIVE_GRAD_TOL: f64 = 1e-4;
pub const MODEL_GRAD_TOL: f64 = 1e-3;
pub const GRAD_BUDGET: Duration = Duration::from_secs(300);
pub const PERMUTATION_TOL: f32 = 1e-6;
pub const STREAM_TOL: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed<F>(id: u8, name: &'static str, f: F) -> Check
where
    F: FnOnce() -> Result<(bool, String), String>,
{
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        id,
        name,
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

/// Criteria 1 to 6, in order.
pub fn run_suite() -> Vec<Check> {
    vec![
        yaw_invariance(),
        projection_shift_commutation(),
        overlap_oracle(),
        gradient_fidelity(),
        order_invariance(),
        stream_batch_equality(),
    ]
}

fn err(e: impl fmt::Display) -> String {
    e.to_string()
}

const SENSOR_HEIGHT: f64 = 1.73;
const LOOP_RADIUS: f64 = 30.0;

/// A world around a circular road and the pose at arc length `s` on it.
fn loop_world(seed: u64) -> Result<SyntheticWorld, String> {
    let road: Vec<[f64; 2]> = (0..=72)
        .map(|k| {
            let a = k as f64 * 2.0 * PI / 72.0;
            [LOOP_RADIUS * a.cos(), LOOP_RADIUS * a.sin()]
        })
        .collect();
    let spec = WorldSpec {
        extent: 70.0,
        obstacle_count: 160,
        keep_out: vec![road],
        clearance: 4.0,
    };
    generate_world(seed, &spec).map_err(err)
}

fn loop_pose(s: f64) -> Pose {
    let a = s / LOOP_RADIUS;
    Pose::from_yaw_translation(
        a + PI / 2.0,
        [LOOP_RADIUS * a.cos(), LOOP_RADIUS * a.sin(), SENSOR_HEIGHT],
    )
}

fn loop_scans(
    world: &SyntheticWorld,
    sensor: &SensorModel,
    start: f64,
    step: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<PointCloud>, String> {
    (0..n)
        .into_par_iter()
        .map(|k| {
            let pose = loop_pose(start + k as f64 * step);
            simulate_scan(
                world,
                &pose,
                sensor,
                &ScanParams::default(),
                seed.wrapping_add(k as u64),
            )
            .map_err(err)
        })
        .collect()
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Criterion 1: the global descriptor ignores independent per-scan yaw
/// rotations by whole columns.
pub fn yaw_invariance() -> Check {
    timed(1, "yaw-rotation invariance", || {
        let sensor = desk_sensor();
        let cfg = desk_model();
        let m = cfg.seq_len_m;
        let model = SeqOt::new(cfg, sensor.height, sensor.width, 101).map_err(err)?;
        let world = loop_world(11)?;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst = 0.0f32;
        for seq in 0..20 {
            let start = rng.gen_range(0.0..2.0 * PI * LOOP_RADIUS);
            let clouds = loop_scans(&world, &sensor, start, 1.5, m, 1000 * seq)?;
            let shifts: Vec<i64> = (0..m)
                .map(|_| rng.gen_range(0..sensor.width as i64))
                .collect();
            let (plain, rotated): (Vec<RangeImage>, Vec<RangeImage>) = clouds
                .par_iter()
                .zip(&shifts)
                .map(|(c, &s)| {
                    let theta = s as f64 * sensor.column_angle();
                    Ok((
                        project(c, &sensor)?,
                        project(&yaw_rotate(c, theta), &sensor)?,
                    ))
                })
                .collect::<seqplace::Result<Vec<_>>>()
                .map_err(err)?
                .into_iter()
                .unzip();
            let a = model.seqot_forward(&plain).map_err(err)?;
            let b = model.seqot_forward(&rotated).map_err(err)?;
            worst = worst.max(max_abs(&a, &b));
        }
        Ok((
            worst <= YAW_TOL,
            format!("max |d - d_rot| = {worst:.2e} over 20 sequences of {m} (tol {YAW_TOL:.0e})"),
        ))
    })
    .with_budget(YAW_BUDGET)
}

impl Check {
    fn with_budget(mut self, budget: Duration) -> Self {
        if self.elapsed > budget {
            self.passed = false;
            self.detail = format!("{}; over the {}s budget", self.detail, budget.as_secs());
        }
        self
    }
}

/// Cloud with one point per chosen cell, at the cell centre jittered by up
/// to 0.45 cells in both directions.
fn jittered_cloud(sensor: &SensorModel, rng: &mut ChaCha8Rng) -> PointCloud {
    let n = rng.gen_range(200..1500);
    let points = (0..n)
        .map(|_| {
            let u = rng.gen_range(0..sensor.width) as f64 + 0.5 + rng.gen_range(-0.45..0.45);
            let v = rng.gen_range(0..sensor.height) as f64 + 0.5 + rng.gen_range(-0.45..0.45);
            let yaw = PI * (1.0 - 2.0 * u / sensor.width as f64);
            let pitch = (1.0 - v / sensor.height as f64) * sensor.fov() - sensor.fov_up;
            let r = rng.gen_range(1.0..80.0);
            let (sp, cp) = pitch.sin_cos();
            let (sy, cy) = yaw.sin_cos();
            [(r * cp * cy) as f32, (r * cp * sy) as f32, (r * sp) as f32]
        })
        .collect();
    PointCloud::new(points)
}

/// Criterion 2: project(rotate(cloud, s columns)) == column_shift(project(cloud), s).
pub fn projection_shift_commutation() -> Check {
    timed(2, "projection/shift commutation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sensors = [
            desk_sensor(),
            SensorModel::full_scale(),
            SensorModel::new(37, 9, 0.3, 0.2).map_err(err)?,
        ];
        let mut mask_mismatch = 0usize;
        let mut worst_rel = 0.0f64;
        for k in 0..100 {
            let sensor = &sensors[k % sensors.len()];
            let cloud = jittered_cloud(sensor, &mut rng);
            let s = rng.gen_range(-(sensor.width as i64)..2 * sensor.width as i64);
            let a = project(
                &yaw_rotate(&cloud, s as f64 * sensor.column_angle()),
                sensor,
            )
            .map_err(err)?;
            let b = column_shift(&project(&cloud, sensor).map_err(err)?, s);
            mask_mismatch += a
                .mask()
                .iter()
                .zip(b.mask())
                .filter(|(x, y)| x != y)
                .count();
            for ((x, y), valid) in a.values().iter().zip(b.values()).zip(a.mask()) {
                if *valid {
                    worst_rel = worst_rel.max(((x - y).abs() / y.abs()) as f64);
                }
            }
        }
        Ok((
            mask_mismatch == 0 && worst_rel <= SHIFT_VALUE_REL_TOL,
            format!("100 clouds: {mask_mismatch} cells differ in validity, worst range rel diff {worst_rel:.1e}"),
        ))
    })
}

/// Brute-force counterpart of reprojection plus overlap, sharing no code
/// with the library beyond the data types.
mod oracle {
    use super::*;

    pub struct Projected {
        pub cells: Vec<Option<f32>>,
    }

    fn transform(rt: &[f64; 12], p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2]
            .map(|r| rt[r * 4] * p[0] + rt[r * 4 + 1] * p[1] + rt[r * 4 + 2] * p[2] + rt[r * 4 + 3])
    }

    fn inverse_transform(rt: &[f64; 12], p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - rt[3], p[1] - rt[7], p[2] - rt[11]];
        [0, 1, 2].map(|c| rt[c] * d[0] + rt[4 + c] * d[1] + rt[8 + c] * d[2])
    }

    pub fn project_into(
        cloud: &PointCloud,
        from: &[f64; 12],
        to: &[f64; 12],
        s: &SensorModel,
    ) -> Projected {
        let (w, h) = (s.width, s.height);
        let fov = s.fov_up + s.fov_down;
        let mut cells = vec![None::<f32>; w * h];
        for p in &cloud.points {
            let q = inverse_transform(to, transform(from, [p[0] as f64, p[1] as f64, p[2] as f64]));
            let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
            if r < 1e-6 {
                continue;
            }
            let u = (0.5 * (1.0 - q[1].atan2(q[0]) / PI) * w as f64).floor();
            let v =
                ((1.0 - ((q[2] / r).clamp(-1.0, 1.0).asin() + s.fov_up) / fov) * h as f64).floor();
            if v < 0.0 || v >= h as f64 {
                continue;
            }
            let u = (u as i64).rem_euclid(w as i64) as usize;
            let cell = &mut cells[v as usize * w + u];
            let r = r as f32;
            if cell.is_none_or(|old| r < old) {
                *cell = Some(r);
            }
        }
        Projected { cells }
    }

    pub fn overlap(a: &Projected, b: &Projected, delta: f32) -> f32 {
        let va = a.cells.iter().filter(|c| c.is_some()).count();
        let vb = b.cells.iter().filter(|c| c.is_some()).count();
        let mut hits = 0usize;
        for (x, y) in a.cells.iter().zip(&b.cells) {
            if let (Some(x), Some(y)) = (x, y) {
                if (x - y).abs() <= delta {
                    hits += 1;
                }
            }
        }
        let d = va.min(vb);
        if d == 0 {
            0.0
        } else {
            (hits as f64 / d as f64) as f32
        }
    }
}

fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

fn pose_array(r: [[f64; 3]; 3], t: [f64; 3]) -> [f64; 12] {
    let mut a = [0.0; 12];
    for i in 0..3 {
        a[i * 4..i * 4 + 3].copy_from_slice(&r[i]);
        a[i * 4 + 3] = t[i];
    }
    a
}

/// Criterion 3: library overlap equals the brute-force counter exactly.
pub fn overlap_oracle() -> Check {
    timed(3, "overlap oracle", || {
        let sensor = desk_sensor();
        let world = loop_world(31)?;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let pairs = 60;
        let mut cases = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            let s = rng.gen_range(0.0..2.0 * PI * LOOP_RADIUS);
            let ds = rng.gen_range(-60.0..60.0);
            let pose = |s: f64, rng: &mut ChaCha8Rng| {
                let base = loop_pose(s).to_row_major_3x4();
                let yaw = base[4].atan2(base[0]) + rng.gen_range(-0.3..0.3);
                let r = rotation(yaw, rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
                let t = [
                    base[3] + rng.gen_range(-1.0..1.0),
                    base[7] + rng.gen_range(-1.0..1.0),
                    base[11],
                ];
                pose_array(r, t)
            };
            let (pi, pj) = (pose(s, &mut rng), pose(s + ds, &mut rng));
            cases.push((pi, pj, rng.gen::<u64>()));
        }
        let results: Vec<(f32, f32)> = cases
            .par_iter()
            .map(|(ai, aj, seed)| {
                let (pi, pj) = (
                    Pose::from_row_major_3x4(ai).map_err(err)?,
                    Pose::from_row_major_3x4(aj).map_err(err)?,
                );
                let ci = simulate_scan(&world, &pi, &sensor, &ScanParams::default(), *seed)
                    .map_err(err)?;
                let cj = simulate_scan(&world, &pj, &sensor, &ScanParams::default(), seed ^ 1)
                    .map_err(err)?;
                let lib = overlap(
                    &reproject(&ci, &pi, &pi, &sensor).map_err(err)?,
                    &reproject(&cj, &pj, &pi, &sensor).map_err(err)?,
                    1.0,
                )
                .map_err(err)?;
                let own = oracle::project_into(&ci, ai, ai, &sensor);
                let other = oracle::project_into(&cj, aj, ai, &sensor);
                Ok((lib, oracle::overlap(&own, &other, 1.0)))
            })
            .collect::<Result<_, String>>()?;
        let mismatches = results.iter().filter(|(a, b)| a != b).count();
        let positive = results.iter().filter(|(a, _)| *a > 0.3).count();
        let nontrivial = results.iter().filter(|(a, _)| *a > 0.0 && *a < 1.0).count();
        Ok((
            mismatches == 0 && nontrivial >= pairs / 2,
            format!("{pairs} pairs: {mismatches} mismatches ({positive} above 0.3, {nontrivial} strictly inside (0, 1))"),
        ))
    })
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Criterion 4: analytic gradients against central differences in 64-bit.
pub fn gradient_fidelity() -> Check {
    timed(4, "gradient fidelity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut rows: Vec<(&str, GradCheckReport, f64)> = Vec::new();
        let mut check = |name, r: GradCheckReport, tol| rows.push((name, r, tol));

        let (w, x, b) = (random_tensor(&[3, 4], &mut rng), random_tensor(&[4, 5], &mut rng), random_tensor(&[3], &mut rng));
        let c = random_tensor(&[3, 5], &mut rng);
        check("linear", grad_check(&[w, x, b], 1e-5, |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            g.dot_const(y, c.clone())
        }), PRIMITIVE_GRAD_TOL);

        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = random_tensor(if ta { &[4, 3] } else { &[3, 4] }, &mut rng);
            let b = random_tensor(if tb { &[5, 4] } else { &[4, 5] }, &mut rng);
            let c = random_tensor(&[3, 5], &mut rng);
            check("matmul", grad_check(&[a, b], 1e-5, |g, v| {
                let y = g.matmul(v[0], ta, v[1], tb);
                g.dot_const(y, c.clone())
            }), PRIMITIVE_GRAD_TOL);
        }

        let (x, w, b) = (random_tensor(&[2, 7, 5], &mut rng), random_tensor(&[3, 2, 3, 3], &mut rng), random_tensor(&[3], &mut rng));
        let c = random_tensor(&[3, 3, 5], &mut rng);
        check("conv2d+relu", grad_check(&[x, w, b], 1e-5, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2);
            let y = g.relu(y);
            g.dot_const(y, c.clone())
        }), PRIMITIVE_GRAD_TOL);

        let (a, c) = (random_tensor(&[4, 6], &mut rng), random_tensor(&[4, 6], &mut rng));
        check("softmax", grad_check(&[a], 1e-5, |g, v| {
            let r = g.softmax_rows(v[0]);
            let s = g.softmax_cols(v[0]);
            let t = g.add(r, s);
            let t = g.scale(t, 0.5);
            g.dot_const(t, c.clone())
        }), PRIMITIVE_GRAD_TOL);

        let (x, gam, bet) = (random_tensor(&[6, 4], &mut rng), random_tensor(&[3], &mut rng), random_tensor(&[3], &mut rng));
        let c = random_tensor(&[3, 8], &mut rng);
        check("layer norm, slicing, concat, reshape", grad_check(&[x, gam, bet], 1e-5, |g, v| {
            let top = g.slice_rows(v[0], 0, 3);
            let bot = g.slice_rows(v[0], 3, 3);
            let cat = g.concat_cols(&[top, bot]);
            let n = g.layer_norm_cols(cat, v[1], v[2], 1e-5);
            let n = g.reshape(n, &[24, 1]);
            let n = g.reshape(n, &[3, 8]);
            let both = g.concat_rows(&[n, cat]);
            let mid = g.slice_rows(both, 2, 3);
            g.dot_const(mid, c.clone())
        }), PRIMITIVE_GRAD_TOL);

        let (a, x, cent) = (random_tensor(&[3, 6], &mut rng), random_tensor(&[4, 6], &mut rng), random_tensor(&[3, 4], &mut rng));
        let c = random_tensor(&[3, 4], &mut rng);
        check("netvlad residual + l2 norm", grad_check(&[a, x, cent], 1e-5, |g, v| {
            let s = g.softmax_cols(v[0]);
            let r = g.vlad_residual(s, v[1], v[2]);
            let r = g.l2_normalize_rows(r);
            g.dot_const(r, c.clone())
        }), PRIMITIVE_GRAD_TOL);

        let x = Tensor::new(&[5, 4], (0..20).map(|_| rng.gen_range(0.1..1.0)).collect()).map_err(err)?;
        let c = random_tensor(&[1, 4], &mut rng);
        check("gem", grad_check(&[x, Tensor::scalar(0.7)], 1e-6, |g, v| {
            let y = g.gem(v[0], v[1], 1e-6);
            g.dot_const(y, c.clone())
        }), PRIMITIVE_GRAD_TOL);

        // layers through GradCheck::run so parameter plumbing is covered too
        let mut ps = ParamSet::<f64>::new();
        let conv = Conv2d::new(&mut ps, "conv", Conv2dSpec {
            in_channels: 2,
            out_channels: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride_h: 1,
            stride_w: 1,
            width_padding: WidthPadding::Circular,
        }, &mut rng).map_err(err)?;
        let lin = Linear::new(&mut ps, "lin", 4, 3, &mut rng);
        let ln = LayerNorm::new(&mut ps, "ln", 4);
        let block = TransformerBlock::new(&mut ps, "block", TransformerConfig {
            attention: AttentionConfig::new(4, 2).map_err(err)?,
            ffn_mult: 2,
        }, &mut rng).map_err(err)?;
        let img = ps.add("img", random_tensor(&[2, 6, 5], &mut rng));
        let tok = ps.add("tokens", random_tensor(&[4, 7], &mut rng));
        let (c1, c2) = (random_tensor(&[3, 4, 5], &mut rng), random_tensor(&[3, 7], &mut rng));
        check("conv, linear, layer norm, attention block", GradCheck::default().run(&ps, |g, p| {
            let x = g.param(p, img);
            let y = conv.forward(g, p, x);
            let a = g.dot_const(y, c1.clone());
            let t = g.param(p, tok);
            let t = ln.forward(g, p, t);
            let t = block.forward(g, p, t);
            let t = lin.forward(g, p, t);
            let b = g.dot_const(t, c2.clone());
            g.add(a, b)
        }), PRIMITIVE_GRAD_TOL);

        let unit_rows = |r: usize, rng: &mut ChaCha8Rng| {
            let mut t = random_tensor(&[r, 8], rng);
            for row in t.data_mut().chunks_mut(8) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
            t
        };
        let (q, p, n) = (unit_rows(1, &mut rng), unit_rows(3, &mut rng), unit_rows(5, &mut rng));
        check("sub-descriptor triplet loss", grad_check(&[q, p, n], 1e-6, |g, v| {
            let qn = g.l2_normalize_rows(v[0]);
            let pn = g.l2_normalize_rows(v[1]);
            let nn = g.l2_normalize_rows(v[2]);
            g.lazy_triplet(qn, pn, nn, 0.5)
        }), PRIMITIVE_GRAD_TOL);

        let pos_set = |r: usize, rng: &mut ChaCha8Rng| {
            Tensor::new(&[r, 8], (0..r * 8).map(|_| rng.gen_range(0.05..1.0)).collect()).expect("shape")
        };
        let mut gs = ParamSet::<f64>::new();
        let rho = gs.add("gem.rho", Tensor::scalar(seqplace::nn::gem_rho_for_exponent(3.0)));
        let sets: Vec<_> = (0..1 + 2 + 3).map(|k| gs.add(format!("set{k}"), pos_set(4, &mut rng))).collect();
        check("pooled global triplet loss", GradCheck::default().run(&gs, |g, p| {
            let r = g.param(p, rho);
            let globals: Vec<Var> = sets
                .iter()
                .map(|&id| {
                    let x = g.param(p, id);
                    let pooled = g.gem(x, r, 1e-6);
                    g.l2_normalize_rows(pooled)
                })
                .collect();
            let pos = g.concat_rows(&globals[1..3]);
            let neg = g.concat_rows(&globals[3..]);
            g.lazy_triplet(globals[0], pos, neg, 0.5)
        }), PRIMITIVE_GRAD_TOL);

        let cfg = ModelConfig {
            c: 4,
            heads_sst: 2,
            heads_mst: 4,
            ffn_mult: 2,
            vlad_clusters: 4,
            gem_p_init: 3.0,
            seq_len_m: 4,
            leg_channels: vec![2],
            leg_kernels: vec![3, 3],
            leg_stride: 2,
            range_norm: 10.0,
        };
        let model = SeqOt::new(cfg, 8, 12, 42).map_err(err)?;
        let imgs: Vec<Tensor<f64>> = (0..4)
            .map(|_| {
                let v = (0..96).map(|_| if rng.gen_bool(0.9) { rng.gen_range(0.5..20.0) } else { -1.0 }).collect();
                RangeImage::from_values(8, 12, v).map(|im| image_tensor(&im, 10.0))
            })
            .collect::<seqplace::Result<_>>()
            .map_err(err)?;
        let target = random_tensor(&[1, DESCRIPTOR_DIM], &mut rng);
        let params = model.params().cast::<f64>();
        check("full toy model", GradCheck { max_entries: 400, ..GradCheck::default() }.run(&params, |g, p| {
            let xs: Vec<Var> = imgs.iter().map(|t| g.input(t.clone())).collect();
            let d = model.arch().sequence(g, p, &xs);
            g.dot_const(d, target.clone())
        }), MODEL_GRAD_TOL);

        let failed: Vec<String> = rows
            .iter()
            .filter(|(_, r, tol)| !(r.max_rel_err < *tol))
            .map(|(n, r, _)| format!("{n} {:.2e} at {:?}", r.max_rel_err, r.worst))
            .collect();
        let worst_prim = rows.iter().filter(|r| r.2 == PRIMITIVE_GRAD_TOL).map(|r| r.1.max_rel_err).fold(0.0, f64::max);
        let model_err = rows.last().map_or(f64::NAN, |r| r.1.max_rel_err);
        let checked: usize = rows.iter().map(|r| r.1.checked).sum();
        Ok((
            failed.is_empty(),
            if failed.is_empty() {
                format!(
                    "{} checks, {checked} entries; worst rel err {worst_prim:.1e} (primitives, losses), {model_err:.1e} (full model)",
                    rows.len()
                )
            } else {
                format!("failed: {}", failed.join("; "))
            },
        ))
    })
    .with_budget(GRAD_BUDGET)
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Whether AR@1 <= AR@5 <= AR@20 on a random retrieval problem.
fn recall_is_monotone(seed: u64) -> Result<bool, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 120;
    let mut values = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                1.0
            } else if rng.gen_bool(0.05) {
                rng.gen_range(0.3..1.0)
            } else {
                rng.gen_range(0.0..0.3)
            };
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    let table = OverlapTable::from_values(n, 1.0, 0.3, values).map_err(err)?;
    let desc: Vec<Vec<f32>> = (0..n).map(|_| random_unit(16, &mut rng)).collect();
    let index =
        DescriptorIndex::build((0..n / 2).map(|i| (i as u64, desc[i].clone()))).map_err(err)?;
    let queries: Vec<(u64, &[f32])> = (n / 2..n).map(|i| (i as u64, desc[i].as_slice())).collect();
    let ranked = rank_queries(&queries, &index, &Truth::new(&table), 20).map_err(err)?;
    let ar: Vec<f64> = [1, 5, 20]
        .map(|k| recall_from_ranks(&ranked, k).recall.unwrap_or(0.0))
        .to_vec();
    Ok(ar[0] <= ar[1] && ar[1] <= ar[2])
}

/// Criterion 5: GeM ignores the order of its sub-descriptors; AR@N never
/// decreases with N.
pub fn order_invariance() -> Check {
    timed(5, "order invariance", || {
        let cfg = desk_model();
        let sensor = desk_sensor();
        let model = SeqOt::new(cfg.clone(), sensor.height, sensor.width, 51).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut subs: Vec<Vec<f32>> = (0..cfg.subdescriptors_per_sequence())
            .map(|_| random_unit(DESCRIPTOR_DIM, &mut rng))
            .collect();
        let pool = |s: &[Vec<f32>]| {
            let refs: Vec<&[f32]> = s.iter().map(Vec::as_slice).collect();
            model.gem_pool(&refs)
        };
        let base = pool(&subs).map_err(err)?;
        let mut worst = 0.0f32;
        for _ in 0..100 {
            subs.shuffle(&mut rng);
            worst = worst.max(max_abs(&base, &pool(&subs).map_err(err)?));
        }
        let monotone = (0..10)
            .map(|s| recall_is_monotone(53 + s))
            .collect::<Result<Vec<_>, _>>()?;
        let ok_monotone = monotone.iter().all(|&b| b);
        Ok((
            worst <= PERMUTATION_TOL && ok_monotone,
            format!(
                "100 permutations: max diff {worst:.1e} (tol {PERMUTATION_TOL:.0e}); AR@1<=AR@5<=AR@20 on {}/10 random evals",
                monotone.iter().filter(|&&b| b).count()
            ),
        ))
    })
}

/// Criterion 6: streaming descriptors equal batch descriptors.
pub fn stream_batch_equality() -> Check {
    timed(6, "stream/batch equality", || {
        let sensor = desk_sensor();
        let cfg = desk_model();
        let m = cfg.seq_len_m;
        let model = SeqOt::new(cfg.clone(), sensor.height, sensor.width, 61).map_err(err)?;
        let world = loop_world(62)?;
        let images: Vec<RangeImage> = loop_scans(&world, &sensor, 3.0, 1.2, 100, 630)?
            .iter()
            .map(|c| project(c, &sensor))
            .collect::<seqplace::Result<_>>()
            .map_err(err)?;
        let mut state = StreamState::new(&cfg);
        let mut streamed = Vec::new();
        for (t, img) in images.iter().enumerate() {
            if let StreamOutput::Descriptor(d) = state.update(&model, t as u64, img).map_err(err)? {
                if t + 1 >= m {
                    streamed.push((t, d));
                }
            }
        }
        let worst = streamed
            .par_iter()
            .map(|(t, d)| Ok(max_abs(d, &model.seqot_forward(&images[t + 1 - m..=*t])?)))
            .collect::<seqplace::Result<Vec<f32>>>()
            .map_err(err)?
            .into_iter()
            .fold(0.0, f32::max);
        Ok((
            streamed.len() == 100 - (m - 1) && worst <= STREAM_TOL,
            format!("{} descriptors over a 100-scan stream, max diff {worst:.1e} (tol {STREAM_TOL:.0e})", streamed.len()),
        ))
    })
}
