//! Overlap between range images and the pair-label table derived from it.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio;
use crate::error::{Error, Result};
use crate::rangeproj::{reproject, PointCloud, Pose, RangeImage, SensorModel};

pub const DEFAULT_DELTA: f32 = 1.0;
pub const DEFAULT_POS_THRESHOLD: f32 = 0.3;

const SQOT_MAGIC: &[u8; 4] = b"SQOT";
const SQOT_VERSION: u8 = 1;

/// Fraction of commonly valid pixels whose ranges agree within `delta`,
/// normalised by the smaller valid-pixel count of the two images.
pub fn overlap(ri: &RangeImage, rj: &RangeImage, delta: f32) -> Result<f32> {
    if ri.shape() != rj.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", ri.shape()),
            found: format!("{:?}", rj.shape()),
        });
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!(
            "overlap delta must be > 0, got {delta}"
        )));
    }
    let (mut vi, mut vj, mut hits) = (0usize, 0usize, 0usize);
    for ((a, ma), (b, mb)) in ri
        .values()
        .iter()
        .zip(ri.mask())
        .zip(rj.values().iter().zip(rj.mask()))
    {
        vi += *ma as usize;
        vj += *mb as usize;
        if *ma && *mb && (a - b).abs() <= delta {
            hits += 1;
        }
    }
    let denom = vi.min(vj);
    if denom == 0 {
        return Ok(0.0);
    }
    Ok((hits as f64 / denom as f64) as f32)
}

/// Dense `n x n` overlap table. Row `i` holds scans reprojected into the
/// frame of scan `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTable {
    n: usize,
    delta: f32,
    pos_threshold: f32,
    values: Vec<f32>,
}

impl OverlapTable {
    pub fn from_values(n: usize, delta: f32, pos_threshold: f32, values: Vec<f32>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries", n * n),
                found: format!("{} entries", values.len()),
            });
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("overlap value {bad} outside [0, 1]")));
        }
        for i in 0..n {
            if values[i * n + i] != 1.0 {
                return Err(Error::Format(format!("diagonal entry {i} is not 1")));
            }
        }
        Ok(Self {
            n,
            delta,
            pos_threshold,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    pub fn pos_threshold(&self) -> f32 {
        self.pos_threshold
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.get(i, j) > self.pos_threshold
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, SQOT_MAGIC, SQOT_VERSION)?;
        binio::write_u32(w, self.n as u32)?;
        binio::write_f32s(w, &[self.delta, self.pos_threshold])?;
        binio::write_f32s(w, &self.values)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, SQOT_MAGIC, SQOT_VERSION)?;
        let n = binio::read_u32(r)?;
        let delta = binio::read_f32(r)?;
        let thr = binio::read_f32(r)?;
        let len = binio::checked_len(&[n, n], 1 << 28)?;
        let values = binio::read_f32s(r, len)?;
        Self::from_values(n as usize, delta, thr, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelParams {
    pub delta: f32,
    pub pos_threshold: f32,
    /// Pairs whose sensor origins are farther apart than this get overlap 0
    /// without reprojection. `None` computes every pair.
    pub gate_radius: Option<f64>,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            pos_threshold: DEFAULT_POS_THRESHOLD,
            gate_radius: None,
        }
    }
}

/// Computes the full overlap table by reprojecting every scan into every
/// other scan's frame. Rows are computed in parallel on the current rayon
/// pool; each entry is independent so the result does not depend on the
/// worker count.
pub fn build_pair_labels(
    clouds: &[PointCloud],
    poses: &[Pose],
    sensor: &SensorModel,
    params: &LabelParams,
) -> Result<OverlapTable> {
    if clouds.len() != poses.len() {
        return Err(Error::LengthMismatch(format!(
            "{} clouds but {} poses",
            clouds.len(),
            poses.len()
        )));
    }
    let n = clouds.len();
    let own: Vec<RangeImage> = clouds
        .par_iter()
        .zip(poses.par_iter())
        .map(|(c, p)| reproject(c, p, p, sensor))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        return Ok(1.0);
                    }
                    if let Some(radius) = params.gate_radius {
                        if poses[i].distance_to(&poses[j]) > radius {
                            return Ok(0.0);
                        }
                    }
                    let rj = reproject(&clouds[j], &poses[j], &poses[i], sensor)?;
                    overlap(&own[i], &rj, params.delta)
                })
                .collect::<Result<Vec<f32>>>()
        })
        .collect::<Result<_>>()?;
    let values = rows.into_iter().flatten().collect();
    OverlapTable::from_values(n, params.delta, params.pos_threshold, values)
}

/// One training sample per id; each id stands for a window ending at it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTuple {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Draws positives and negatives for a query from the table.
#[derive(Debug, Clone)]
pub struct TupleSampler {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Which ids may appear in a tuple (e.g. scans with a full window of
    /// predecessors in their own pass). Empty means every id.
    pub eligible: Vec<bool>,
}

impl TupleSampler {
    pub fn new(n_pos: usize, n_neg: usize) -> Self {
        Self {
            n_pos,
            n_neg,
            eligible: Vec::new(),
        }
    }

    pub fn with_eligible(mut self, eligible: Vec<bool>) -> Self {
        self.eligible = eligible;
        self
    }

    fn is_eligible(&self, i: usize) -> bool {
        self.eligible.is_empty() || self.eligible.get(i).copied().unwrap_or(false)
    }

    /// Candidate pools for `query`, in ascending id order.
    pub fn pools(&self, table: &OverlapTable, query: usize) -> (Vec<usize>, Vec<usize>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..table.len() {
            if j == query || !self.is_eligible(j) {
                continue;
            }
            if table.is_positive(query, j) {
                pos.push(j);
            } else {
                neg.push(j);
            }
        }
        (pos, neg)
    }

    pub fn can_sample(&self, table: &OverlapTable, query: usize) -> bool {
        if !self.is_eligible(query) {
            return false;
        }
        let (p, n) = self.pools(table, query);
        p.len() >= self.n_pos && n.len() >= self.n_neg
    }

    /// Uniform sampling without replacement, deterministic in `seed`.
    pub fn sample(&self, table: &OverlapTable, query: usize, seed: u64) -> Result<TrainingTuple> {
        if query >= table.len() {
            return Err(Error::UnknownId(query as u64));
        }
        let (pos, neg) = self.pools(table, query);
        if pos.len() < self.n_pos || neg.len() < self.n_neg {
            return Err(Error::InsufficientSamples {
                query,
                need_pos: self.n_pos,
                have_pos: pos.len(),
                need_neg: self.n_neg,
                have_neg: neg.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positives = pos.choose_multiple(&mut rng, self.n_pos).copied().collect();
        let negatives = neg.choose_multiple(&mut rng, self.n_neg).copied().collect();
        Ok(TrainingTuple {
            query,
            positives,
            negatives,
        })
    }
}

/// Convenience wrapper over [`TupleSampler::sample`] with no eligibility mask.
pub fn sample_training_tuple(
    table: &OverlapTable,
    query: usize,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<TrainingTuple> {
    TupleSampler::new(n_pos, n_neg).sample(table, query, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn img(h: usize, w: usize, vals: Vec<f32>) -> RangeImage {
        RangeImage::from_values(h, w, vals).unwrap()
    }

    /// Straightforward per-pixel counter used as the reference.
    fn naive_overlap(a: &RangeImage, b: &RangeImage, delta: f32) -> f32 {
        let (h, w) = a.shape();
        let mut va = 0;
        let mut vb = 0;
        let mut hit = 0;
        for v in 0..h {
            for u in 0..w {
                let x = a.get(v, u);
                let y = b.get(v, u);
                if x.is_some() {
                    va += 1;
                }
                if y.is_some() {
                    vb += 1;
                }
                if let (Some(x), Some(y)) = (x, y) {
                    if (x - y).abs() <= delta {
                        hit += 1;
                    }
                }
            }
        }
        let d = va.min(vb);
        if d == 0 {
            0.0
        } else {
            (hit as f64 / d as f64) as f32
        }
    }

    #[test]
    fn self_overlap_is_one() {
        let a = img(2, 3, vec![1.0, 2.0, -1.0, 4.0, 5.0, 6.0]);
        assert_eq!(overlap(&a, &a, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_give_zero() {
        let a = img(1, 4, vec![1.0, 1.0, -1.0, -1.0]);
        let b = img(1, 4, vec![-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(overlap(&a, &b, 1.0).unwrap(), 0.0);
        let empty = img(1, 4, vec![-1.0; 4]);
        assert_eq!(overlap(&a, &empty, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn thirty_seven_of_hundred() {
        // a: 100 valid pixels; b: 120 valid pixels, 37 of the shared ones agree
        let mut av = vec![-1.0f32; 200];
        let mut bv = vec![-1.0f32; 200];
        for i in 0..100 {
            av[i] = 10.0;
        }
        for (k, v) in bv.iter_mut().enumerate().take(120) {
            *v = if k < 37 { 10.5 } else { 13.0 };
        }
        let a = img(10, 20, av);
        let b = img(10, 20, bv);
        assert_eq!(naive_overlap(&a, &b, 1.0), 0.37);
        assert_eq!(overlap(&a, &b, 1.0).unwrap(), 0.37);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = img(1, 2, vec![1.0, 1.0]);
        let b = img(2, 1, vec![1.0, 1.0]);
        assert!(matches!(
            overlap(&a, &b, 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn random_pairs_match_naive_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..60 {
            let vals = |rng: &mut ChaCha8Rng| -> Vec<f32> {
                (0..8 * 16)
                    .map(|_| {
                        if rng.gen_bool(0.25) {
                            -1.0
                        } else {
                            rng.gen_range(0.5..6.0)
                        }
                    })
                    .collect()
            };
            let a = img(8, 16, vals(&mut rng));
            let b = img(8, 16, vals(&mut rng));
            let delta = rng.gen_range(0.1..2.0);
            let o = overlap(&a, &b, delta).unwrap();
            assert_eq!(o, naive_overlap(&a, &b, delta));
            assert!((0.0..=1.0).contains(&o));
        }
    }

    fn random_table(n: usize, seed: u64) -> OverlapTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = if i == j { 1.0 } else { rng.gen_range(0.0..1.0) };
            }
        }
        OverlapTable::from_values(n, 1.0, 0.3, v).unwrap()
    }

    #[test]
    fn single_scan_table() {
        let cloud = PointCloud::new(vec![[5.0, 0.0, 0.0]]);
        let sensor = SensorModel::new(8, 4, 0.3, 0.3).unwrap();
        let t = build_pair_labels(
            &[cloud],
            &[Pose::identity()],
            &sensor,
            &LabelParams::default(),
        )
        .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.values(), &[1.0]);
    }

    #[test]
    fn identical_scans_fully_overlap() {
        let cloud = PointCloud::new(vec![[5.0, 0.0, 0.0], [0.0, 4.0, 0.1], [-3.0, -3.0, 0.0]]);
        let sensor = SensorModel::new(8, 4, 0.3, 0.3).unwrap();
        let p = Pose::from_yaw_translation(0.3, [1.0, 2.0, 0.0]);
        let t = build_pair_labels(
            &[cloud.clone(), cloud],
            &[p, p],
            &sensor,
            &LabelParams::default(),
        )
        .unwrap();
        assert_eq!(t.values(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn label_length_mismatch() {
        let sensor = SensorModel::new(8, 4, 0.3, 0.3).unwrap();
        let err = build_pair_labels(
            &[PointCloud::default()],
            &[],
            &sensor,
            &LabelParams::default(),
        );
        assert!(matches!(err, Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn unique_tuple_when_pools_are_exact() {
        let n = 13;
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        for j in 1..7 {
            v[j] = 0.9;
        }
        let t = OverlapTable::from_values(n, 1.0, 0.3, v).unwrap();
        let tuple = sample_training_tuple(&t, 0, 6, 6, 5).unwrap();
        let mut p = tuple.positives.clone();
        let mut q = tuple.negatives.clone();
        p.sort();
        q.sort();
        assert_eq!(p, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(q, vec![7, 8, 9, 10, 11, 12]);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_threshold() {
        let t = random_table(40, 1);
        let a = sample_training_tuple(&t, 3, 6, 6, 99).unwrap();
        let b = sample_training_tuple(&t, 3, 6, 6, 99).unwrap();
        assert_eq!(a, b);
        let mut sampled = 0;
        for q in 0..40 {
            let Ok(tuple) = sample_training_tuple(&t, q, 6, 6, q as u64) else {
                continue;
            };
            sampled += 1;
            assert!(tuple.positives.iter().all(|&p| t.get(q, p) > 0.3 && p != q));
            assert!(tuple.negatives.iter().all(|&n| t.get(q, n) <= 0.3));
        }
        assert!(sampled > 10);
    }

    #[test]
    fn deficit_is_reported() {
        let n = 5;
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        let t = OverlapTable::from_values(n, 1.0, 0.3, v).unwrap();
        let err = sample_training_tuple(&t, 0, 6, 2, 0).unwrap_err();
        assert!(err.to_string().contains("have 0"), "{err}");
    }

    #[test]
    fn sqot_round_trip() {
        let t = random_table(7, 4);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"SQOT\x01");
        assert_eq!(buf.len(), 5 + 4 + 8 + 49 * 4);
        assert_eq!(OverlapTable::read_from(&mut buf.as_slice()).unwrap(), t);
    }
}
