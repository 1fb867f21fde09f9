//! Scan and pose file I/O, and a ray-cast synthetic world for benchmarks.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rangeproj::{PointCloud, Pose, SensorModel};
use crate::training::derive_seed;

/// Reads a KITTI-style cloud: little-endian `f32` quadruples `x y z i`.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    parse_cloud(&bytes).map_err(|e| match e {
        Error::MalformedCloud { len, offset, .. } => Error::MalformedCloud {
            path: path.to_path_buf(),
            len,
            offset,
        },
        other => other,
    })
}

fn parse_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedCloud {
            path: Default::default(),
            len: bytes.len() as u64,
            offset: (bytes.len() - bytes.len() % 16) as u64,
        });
    }
    if bytes.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for q in bytes.chunks_exact(16) {
        points.push([f(&q[0..4]), f(&q[4..8]), f(&q[8..12])]);
        intensity.push(f(&q[12..16]));
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

/// Writes a cloud in the layout read by [`load_cloud`]; missing intensities
/// are written as zero.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, p) in cloud.points.iter().enumerate() {
        let it = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for x in [p[0], p[1], p[2], it] {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One pose per line, twelve numbers: the top three rows of a 4x4 matrix in
/// row-major order.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut poses = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::MalformedPose {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        let vals: [f64; 12] = vals
            .as_slice()
            .try_into()
            .map_err(|_| err(format!("expected 12 values, found {}", vals.len())))?;
        poses.push(Pose::from_row_major_3x4(&vals).map_err(|e| err(e.to_string()))?);
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in poses {
        let line: Vec<String> = p
            .to_row_major_3x4()
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Box standing on the ground, rotated by `yaw` about its vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub center: [f64; 2],
    pub half: [f64; 2],
    pub yaw: f64,
    pub height: f64,
}

/// Vertical cylinder standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
}

/// Flat ground at `z = 0` with primitive obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    /// Obstacles lie in `[-extent, extent]^2`.
    pub extent: f64,
    pub boxes: Vec<BoxObstacle>,
    pub cylinders: Vec<Cylinder>,
}

/// Obstacle placement parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub extent: f64,
    pub obstacle_count: usize,
    /// Obstacles are kept at least `clearance` metres from these polylines.
    pub keep_out: Vec<Vec<[f64; 2]>>,
    pub clearance: f64,
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn distance_to_polylines(p: [f64; 2], lines: &[Vec<[f64; 2]>]) -> f64 {
    lines
        .iter()
        .flat_map(|l| {
            l.windows(2)
                .map(move |s| point_segment_distance(p, s[0], s[1]))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Places exactly `obstacle_count` obstacles, deterministically in `seed`.
pub fn generate_world(seed: u64, spec: &WorldSpec) -> Result<SyntheticWorld> {
    if !(spec.extent > 0.0) {
        return Err(Error::Config("world extent must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = SyntheticWorld {
        seed,
        extent: spec.extent,
        boxes: Vec::new(),
        cylinders: Vec::new(),
    };
    let mut placed = 0;
    let mut attempts = 0usize;
    while placed < spec.obstacle_count {
        attempts += 1;
        if attempts > 1000 * (spec.obstacle_count + 1) {
            return Err(Error::Config(format!(
                "could only place {placed} of {} obstacles outside the keep-out corridor",
                spec.obstacle_count
            )));
        }
        let c = [
            rng.gen_range(-spec.extent..spec.extent),
            rng.gen_range(-spec.extent..spec.extent),
        ];
        if rng.gen_bool(0.6) {
            let half: [f64; 2] = [rng.gen_range(0.5..6.0), rng.gen_range(0.5..6.0)];
            let footprint = (half[0] * half[0] + half[1] * half[1]).sqrt();
            if distance_to_polylines(c, &spec.keep_out) < spec.clearance + footprint {
                continue;
            }
            world.boxes.push(BoxObstacle {
                center: c,
                half,
                yaw: rng.gen_range(0.0..PI),
                height: rng.gen_range(1.0..12.0),
            });
        } else {
            let radius = rng.gen_range(0.2..2.5);
            if distance_to_polylines(c, &spec.keep_out) < spec.clearance + radius {
                continue;
            }
            world.cylinders.push(Cylinder {
                center: c,
                radius,
                height: rng.gen_range(2.0..10.0),
            });
        }
        placed += 1;
    }
    Ok(world)
}

const RAY_EPS: f64 = 1e-9;

/// Distance along a unit ray to the ground plane `z = 0`.
pub fn ray_ground(o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    if d[2] < -RAY_EPS {
        let t = -o[2] / d[2];
        (t > RAY_EPS).then_some(t)
    } else {
        None
    }
}

/// Slab intersection with a yawed box.
pub fn ray_box(o: [f64; 3], d: [f64; 3], b: &BoxObstacle) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    // into the box frame: rotate by -yaw about the box centre
    let (px, py) = (o[0] - b.center[0], o[1] - b.center[1]);
    let lo = [c * px + s * py, -s * px + c * py, o[2]];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let min = [-b.half[0], -b.half[1], 0.0];
    let max = [b.half[0], b.half[1], b.height];
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if ld[k].abs() < RAY_EPS {
            if lo[k] < min[k] || lo[k] > max[k] {
                return None;
            }
        } else {
            let a = (min[k] - lo[k]) / ld[k];
            let bb = (max[k] - lo[k]) / ld[k];
            t0 = t0.max(a.min(bb));
            t1 = t1.min(a.max(bb));
        }
    }
    if t0 > t1 || t1 <= RAY_EPS {
        return None;
    }
    Some(if t0 > RAY_EPS { t0 } else { t1 })
}

/// First hit on a cylinder's side or top cap.
pub fn ray_cylinder(o: [f64; 3], d: [f64; 3], cyl: &Cylinder) -> Option<f64> {
    let (px, py) = (o[0] - cyl.center[0], o[1] - cyl.center[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > RAY_EPS && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    if a > RAY_EPS {
        let b = 2.0 * (px * d[0] + py * d[1]);
        let c = px * px + py * py - cyl.radius * cyl.radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = o[2] + t * d[2];
                if (0.0..=cyl.height).contains(&z) {
                    consider(t);
                }
            }
        }
    }
    if d[2].abs() > RAY_EPS {
        let t = (cyl.height - o[2]) / d[2];
        let (x, y) = (px + t * d[0], py + t * d[1]);
        if x * x + y * y <= cyl.radius * cyl.radius {
            consider(t);
        }
    }
    best
}

impl SyntheticWorld {
    /// Nearest hit along a unit ray among `boxes`/`cylinders` (indices into
    /// the world) and the ground.
    fn cast(&self, o: [f64; 3], d: [f64; 3], boxes: &[usize], cylinders: &[usize]) -> Option<f64> {
        let mut best = ray_ground(o, d);
        let mut take = |t: Option<f64>| {
            if let Some(t) = t {
                if best.map_or(true, |b| t < b) {
                    best = Some(t);
                }
            }
        };
        for &i in boxes {
            take(ray_box(o, d, &self.boxes[i]));
        }
        for &i in cylinders {
            take(ray_cylinder(o, d, &self.cylinders[i]));
        }
        best
    }

    /// Nearest surface along a world-frame unit ray, without range limit.
    pub fn ray_cast(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let b: Vec<usize> = (0..self.boxes.len()).collect();
        let c: Vec<usize> = (0..self.cylinders.len()).collect();
        self.cast(o, d, &b, &c)
    }

    fn candidates(&self, o: [f64; 3], reach: f64) -> (Vec<usize>, Vec<usize>) {
        let near = |c: [f64; 2], r: f64| {
            ((c[0] - o[0]).powi(2) + (c[1] - o[1]).powi(2)).sqrt() - r <= reach
        };
        let boxes = (0..self.boxes.len())
            .filter(|&i| {
                let b = &self.boxes[i];
                near(
                    b.center,
                    (b.half[0] * b.half[0] + b.half[1] * b.half[1]).sqrt(),
                )
            })
            .collect();
        let cyls = (0..self.cylinders.len())
            .filter(|&i| near(self.cylinders[i].center, self.cylinders[i].radius))
            .collect();
        (boxes, cyls)
    }
}

/// Ray casting parameters of a simulated scanner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanParams {
    pub max_range: f64,
    pub noise_sigma: f64,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            max_range: 50.0,
            noise_sigma: 0.02,
        }
    }
}

/// One ray through every pixel centre; hits within `max_range` become
/// points in the sensor frame with Gaussian range noise drawn from `seed`.
pub fn simulate_scan(
    world: &SyntheticWorld,
    pose: &Pose,
    sensor: &SensorModel,
    params: &ScanParams,
    seed: u64,
) -> Result<PointCloud> {
    sensor.validate()?;
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o = pose.translation();
    let (boxes, cyls) = world.candidates(o, params.max_range);
    let m = pose.matrix();
    let mut points = Vec::new();
    for v in 0..sensor.height {
        for u in 0..sensor.width {
            let ds = sensor.pixel_direction(u, v);
            let dw = [0, 1, 2].map(|r| m[(r, 0)] * ds[0] + m[(r, 1)] * ds[1] + m[(r, 2)] * ds[2]);
            // draw even on a miss so the noise stream does not depend on hits
            let n: f64 = if params.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let Some(t) = world.cast(o, dw, &boxes, &cyls) else {
                continue;
            };
            if t > params.max_range {
                continue;
            }
            let r = (t + n).max(0.0);
            points.push([(ds[0] * r) as f32, (ds[1] * r) as f32, (ds[2] * r) as f32]);
        }
    }
    Ok(PointCloud::new(points))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Database,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanSource {
    Synthetic(u64),
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    /// Timestamp order across the whole manifest.
    pub index: usize,
    pub source: ScanSource,
    /// Top three rows of the pose matrix, row-major.
    pub pose: [f64; 12],
    pub split: Split,
    /// Position within the scan's traversal.
    pub pass_pos: usize,
    /// Driven against the database direction.
    #[serde(default)]
    pub reversed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub seed: u64,
    pub world: WorldSpecJson,
    pub scan: ScanParams,
}

/// Serialisable mirror of [`WorldSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpecJson {
    pub extent: f64,
    pub obstacle_count: usize,
    pub keep_out: Vec<Vec<[f64; 2]>>,
    pub clearance: f64,
}

impl From<&WorldSpecJson> for WorldSpec {
    fn from(w: &WorldSpecJson) -> Self {
        WorldSpec {
            extent: w.extent,
            obstacle_count: w.obstacle_count,
            keep_out: w.keep_out.clone(),
            clearance: w.clearance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sensor: SensorModel,
    pub scans: Vec<ScanEntry>,
    /// Set when scans are generated rather than read from disk.
    #[serde(default)]
    pub synthetic: Option<SyntheticSource>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        for w in self.scans.windows(2) {
            if w[1].index <= w[0].index {
                return Err(Error::Format(format!(
                    "scan indices must increase: {} follows {}",
                    w[1].index, w[0].index
                )));
            }
        }
        for s in &self.scans {
            Pose::from_row_major_3x4(&s.pose)?;
            if matches!(s.source, ScanSource::Synthetic(_)) && self.synthetic.is_none() {
                return Err(Error::Format(format!(
                    "scan {} is synthetic but no generator is given",
                    s.index
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        self.scans
            .iter()
            .map(|s| Pose::from_row_major_3x4(&s.pose))
            .collect()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.scans.len())
            .filter(|&i| self.scans[i].split == split)
            .collect()
    }

    pub fn pass_pos(&self) -> Vec<usize> {
        self.scans.iter().map(|s| s.pass_pos).collect()
    }

    /// The generating world of a synthetic dataset.
    pub fn world(&self) -> Result<Option<SyntheticWorld>> {
        self.synthetic
            .as_ref()
            .map(|s| generate_world(s.seed, &(&s.world).into()))
            .transpose()
    }

    /// Loads or simulates scan `i`; `world` must come from [`Self::world`].
    /// Relative file paths resolve against `base`.
    pub fn cloud(
        &self,
        i: usize,
        base: &Path,
        world: Option<&SyntheticWorld>,
    ) -> Result<PointCloud> {
        let s = self
            .scans
            .get(i)
            .ok_or_else(|| Error::Format(format!("no scan at position {i}")))?;
        match &s.source {
            ScanSource::File(p) => load_cloud(&base.join(p)),
            ScanSource::Synthetic(id) => {
                let (Some(syn), Some(world)) = (self.synthetic.as_ref(), world) else {
                    return Err(Error::Format(format!(
                        "scan {} is synthetic but no world was given",
                        s.index
                    )));
                };
                let pose = Pose::from_row_major_3x4(&s.pose)?;
                simulate_scan(
                    world,
                    &pose,
                    &self.sensor,
                    &syn.scan,
                    derive_seed(syn.seed, &[0x5ca9, *id]),
                )
            }
        }
    }

    /// Loads or simulates every scan, in manifest order.
    pub fn clouds(&self, base: &Path) -> Result<Vec<PointCloud>> {
        let world = self.world()?;
        (0..self.scans.len())
            .into_par_iter()
            .map(|i| self.cloud(i, base, world.as_ref()))
            .collect()
    }
}

/// Layout of the two-pass benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub sensor: SensorModel,
    pub scan: ScanParams,
    /// Rectangle loop side lengths in metres.
    pub loop_size: [f64; 2],
    pub scans_per_pass: usize,
    /// Query scans driven forward before turning around.
    pub query_forward: usize,
    pub obstacle_count: usize,
    pub sensor_height: f64,
    pub road_clearance: f64,
    /// Standard deviations of the query-pass pose perturbation.
    pub lateral_sigma: f64,
    pub yaw_sigma: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            sensor: desk_sensor(),
            scan: ScanParams::default(),
            loop_size: [100.0, 60.0],
            scans_per_pass: 300,
            query_forward: 200,
            obstacle_count: 360,
            sensor_height: 1.73,
            road_clearance: 4.0,
            lateral_sigma: 0.3,
            yaw_sigma: 2f64.to_radians(),
        }
    }
}

/// 32 x 90 images (4 degree columns) with a symmetric 30 degree vertical
/// field of view.
pub fn desk_sensor() -> SensorModel {
    SensorModel {
        width: 90,
        height: 32,
        fov_up: 15f64.to_radians(),
        fov_down: 15f64.to_radians(),
    }
}

fn loop_corners(size: [f64; 2]) -> Vec<[f64; 2]> {
    let (a, b) = (size[0] / 2.0, size[1] / 2.0);
    vec![[-a, -b], [a, -b], [a, b], [-a, b], [-a, -b]]
}

/// Point and heading at arc length `s` along a closed polyline.
fn along(corners: &[[f64; 2]], s: f64) -> ([f64; 2], f64) {
    let total: f64 = corners.windows(2).map(|w| seg_len(w[0], w[1])).sum();
    let mut s = s.rem_euclid(total);
    for w in corners.windows(2) {
        let l = seg_len(w[0], w[1]);
        if s <= l {
            let t = s / l;
            let p = [
                w[0][0] + t * (w[1][0] - w[0][0]),
                w[0][1] + t * (w[1][1] - w[0][1]),
            ];
            return (p, (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]));
        }
        s -= l;
    }
    let w = &corners[corners.len() - 2..];
    (w[1], (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]))
}

fn seg_len(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}

/// Two traversals of a rectangular loop through a seeded world: a database
/// pass driven forward, then a perturbed query pass that turns around part
/// way and drives the rest against the database direction.
pub fn make_benchmark_with(seed: u64, spec: &BenchmarkSpec) -> Result<DatasetManifest> {
    spec.sensor.validate()?;
    if spec.query_forward > spec.scans_per_pass {
        return Err(Error::Config("query_forward exceeds scans_per_pass".into()));
    }
    let corners = loop_corners(spec.loop_size);
    let perimeter = 2.0 * (spec.loop_size[0] + spec.loop_size[1]);
    let step = perimeter / spec.scans_per_pass as f64;
    let half = spec.loop_size[0].max(spec.loop_size[1]) / 2.0;
    let world = WorldSpecJson {
        extent: half + spec.scan.max_range * 0.6,
        obstacle_count: spec.obstacle_count,
        keep_out: vec![corners.clone()],
        clearance: spec.road_clearance,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xbe4c]));
    let lateral = Normal::new(0.0, spec.lateral_sigma.max(1e-12)).expect("finite sigma");
    let yaw_noise = Normal::new(0.0, spec.yaw_sigma.max(1e-12)).expect("finite sigma");
    let mut scans = Vec::with_capacity(2 * spec.scans_per_pass);
    let pose_at = |s: f64, reversed: bool, lat: f64, dyaw: f64| {
        let (p, heading) = along(&corners, s);
        let yaw = heading + if reversed { PI } else { 0.0 } + dyaw;
        // lateral offset is to the left of the loop direction
        let (sn, cs) = heading.sin_cos();
        let t = [p[0] - sn * lat, p[1] + cs * lat, spec.sensor_height];
        Pose::from_yaw_translation(yaw, t).to_row_major_3x4()
    };
    for i in 0..spec.scans_per_pass {
        scans.push(ScanEntry {
            index: i,
            source: ScanSource::Synthetic(i as u64),
            pose: pose_at(i as f64 * step, false, 0.0, 0.0),
            split: Split::Database,
            pass_pos: i,
            reversed: false,
        });
    }
    // the query pass starts half a step out of phase with the database
    let mut s = 0.5 * step;
    for k in 0..spec.scans_per_pass {
        let reversed = k >= spec.query_forward;
        if k > 0 {
            let jitter = rng.gen_range(-0.1..0.1) * step;
            s += if reversed {
                -(step + jitter)
            } else {
                step + jitter
            };
        }
        let lat = lateral.sample(&mut rng);
        let dyaw = yaw_noise.sample(&mut rng);
        let i = spec.scans_per_pass + k;
        scans.push(ScanEntry {
            index: i,
            source: ScanSource::Synthetic(i as u64),
            pose: pose_at(s, reversed, lat, dyaw),
            split: Split::Query,
            pass_pos: k,
            reversed,
        });
    }
    let m = DatasetManifest {
        sensor: spec.sensor,
        scans,
        synthetic: Some(SyntheticSource {
            seed,
            world,
            scan: spec.scan,
        }),
    };
    m.validate()?;
    Ok(m)
}

/// The default 600-scan benchmark.
pub fn make_benchmark(seed: u64) -> Result<DatasetManifest> {
    make_benchmark_with(seed, &BenchmarkSpec::default())
}
