//! The sequence descriptor network.
//!
//! A scan passes through a height-collapsing convolutional leg and a
//! transformer to give a `[2c, w]` feature volume. Three consecutive volumes
//! are joined along the width, refined by a second transformer and
//! aggregated by NetVLAD into a 256-d sub-descriptor. GeM pooling over the
//! sub-descriptors of a sequence yields the global descriptor.
//!
//! No block sees absolute column positions, so a yaw rotation by a multiple
//! of the column angle permutes columns and leaves every descriptor fixed.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gem_exponent, gem_rho_for_exponent, AttentionConfig, Conv2d, Conv2dSpec, Graph, Linear,
    ParamId, ParamSet, Scalar, Tensor, TransformerBlock, TransformerConfig, Var,
};
use crate::rangeproj::RangeImage;

pub const DESCRIPTOR_DIM: usize = 256;
pub const WINDOW: usize = 3;
pub const GEM_EPS: f64 = 1e-6;

/// A 256-d unit vector; used for both sub-descriptors and global descriptors.
pub type Descriptor = Vec<f32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub c: usize,
    pub heads_sst: usize,
    pub heads_mst: usize,
    pub ffn_mult: usize,
    pub vlad_clusters: usize,
    pub gem_p_init: f64,
    pub seq_len_m: usize,
    /// Output channels of every leg convolution except the last, which has `c`.
    pub leg_channels: Vec<usize>,
    pub leg_kernels: Vec<usize>,
    pub leg_stride: usize,
    /// Valid ranges are divided by this before entering the network.
    pub range_norm: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 64,
            heads_sst: 4,
            heads_mst: 4,
            ffn_mult: 2,
            vlad_clusters: 64,
            gem_p_init: 3.0,
            seq_len_m: 20,
            leg_channels: vec![16, 32, 64],
            leg_kernels: vec![5, 3, 3, 2],
            leg_stride: 2,
            range_norm: 50.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.vlad_clusters == 0 {
            return Err(Error::Config("c and vlad_clusters must be positive".into()));
        }
        if self.seq_len_m < WINDOW {
            return Err(Error::Config(format!("seq_len_m must be >= {WINDOW}")));
        }
        if self.leg_kernels.is_empty() || self.leg_channels.len() + 1 != self.leg_kernels.len() {
            return Err(Error::Config(format!(
                "leg needs one kernel per convolution: {} kernels for {} channel widths",
                self.leg_kernels.len(),
                self.leg_channels.len() + 1
            )));
        }
        if !(self.gem_p_init > 1.0) {
            return Err(Error::Config("gem_p_init must exceed 1".into()));
        }
        if !(self.range_norm > 0.0) {
            return Err(Error::Config("range_norm must be positive".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be >= 1".into()));
        }
        AttentionConfig::new(self.c, self.heads_sst)?;
        AttentionConfig::new(2 * self.c, self.heads_mst)?;
        Ok(())
    }

    fn leg_specs(&self) -> Vec<Conv2dSpec> {
        let mut outs = self.leg_channels.clone();
        outs.push(self.c);
        let mut cin = 1;
        outs.iter()
            .zip(&self.leg_kernels)
            .map(|(&cout, &k)| {
                let s = Conv2dSpec::column(cin, cout, k, self.leg_stride);
                cin = cout;
                s
            })
            .collect()
    }

    /// Heights after each leg convolution for an input of height `h`.
    pub fn leg_heights(&self, h: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = h;
        for spec in self.leg_specs() {
            spec.validate()?;
            cur = spec.output_height(cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.c
    }

    pub fn subdescriptors_per_sequence(&self) -> usize {
        self.seq_len_m - WINDOW + 1
    }
}

/// Number of learnable scalars, computed from the configuration alone.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let leg: usize = cfg.leg_specs().iter().map(Conv2d::param_count).sum();
    let d = cfg.feature_dim();
    leg + TransformerBlock::param_count(cfg.c, cfg.ffn_mult)
        + TransformerBlock::param_count(d, cfg.ffn_mult)
        + Linear::param_count(d, cfg.vlad_clusters)
        + cfg.vlad_clusters * d
        + Linear::param_count(cfg.vlad_clusters * d, DESCRIPTOR_DIM)
        + 1
}

/// Layer handles into a [`ParamSet`]; shared by the 32- and 64-bit copies.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub leg: Vec<Conv2d>,
    pub sst: TransformerBlock,
    pub mst: TransformerBlock,
    pub vlad_assign: Linear,
    pub vlad_centers: ParamId,
    pub mlp: Linear,
    pub gem_rho: ParamId,
    c: usize,
    clusters: usize,
}

impl Architecture {
    fn build(cfg: &ModelConfig, params: &mut ParamSet<f32>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leg = cfg
            .leg_specs()
            .into_iter()
            .enumerate()
            .map(|(i, s)| Conv2d::new(params, &format!("leg.{i}"), s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.feature_dim();
        let sst = TransformerBlock::new(
            params,
            "sst",
            TransformerConfig {
                attention: AttentionConfig::new(cfg.c, cfg.heads_sst)?,
                ffn_mult: cfg.ffn_mult,
            },
            &mut rng,
        )?;
        let mst = TransformerBlock::new(
            params,
            "mst",
            TransformerConfig {
                attention: AttentionConfig::new(d, cfg.heads_mst)?,
                ffn_mult: cfg.ffn_mult,
            },
            &mut rng,
        )?;
        let vlad_assign = Linear::new(params, "vlad.assign", d, cfg.vlad_clusters, &mut rng);
        let vlad_centers =
            params.add_uniform("vlad.centers", &[cfg.vlad_clusters, d], 1.0, &mut rng);
        let mlp = Linear::new(
            params,
            "mlp",
            cfg.vlad_clusters * d,
            DESCRIPTOR_DIM,
            &mut rng,
        );
        let rho = gem_rho_for_exponent(cfg.gem_p_init) as f32;
        let gem_rho = params.add("gem.rho", Tensor::scalar(rho));
        Ok(Self {
            leg,
            sst,
            mst,
            vlad_assign,
            vlad_centers,
            mlp,
            gem_rho,
            c: cfg.c,
            clusters: cfg.vlad_clusters,
        })
    }

    /// `[1, h, w]` image -> `[2c, w]` feature volume.
    pub fn ssm<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, image: Var) -> Var {
        let mut x = image;
        for conv in &self.leg {
            x = conv.forward(g, p, x);
            x = g.relu(x);
        }
        let w = *g.value(x).shape().last().expect("rank 3");
        let coarse = g.reshape(x, &[self.c, w]);
        let refined = self.sst.forward(g, p, coarse);
        g.concat_rows(&[coarse, refined])
    }

    /// Three `[2c, w]` volumes -> `[1, 256]` sub-descriptor.
    pub fn msm<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, volumes: [Var; WINDOW]) -> Var {
        let long = g.concat_cols(&volumes);
        let x = self.mst.forward(g, p, long);
        let logits = self.vlad_assign.forward(g, p, x);
        let assign = g.softmax_cols(logits);
        let centers = g.param(p, self.vlad_centers);
        let v = g.vlad_residual(assign, x, centers);
        let v = g.l2_normalize_rows(v);
        let flat = g.reshape(v, &[1, self.clusters * 2 * self.c]);
        let flat = g.l2_normalize_rows(flat);
        let flat = g.reshape(flat, &[self.clusters * 2 * self.c, 1]);
        let y = self.mlp.forward(g, p, flat);
        let y = g.reshape(y, &[1, DESCRIPTOR_DIM]);
        g.l2_normalize_rows(y)
    }

    /// `[1, 256]` sub-descriptors -> `[1, 256]` global descriptor.
    pub fn pool<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, subs: &[Var]) -> Var {
        let stacked = if subs.len() == 1 {
            subs[0]
        } else {
            g.concat_rows(subs)
        };
        let rho = g.param(p, self.gem_rho);
        let pooled = g.gem(stacked, rho, T::from_f64(GEM_EPS));
        g.l2_normalize_rows(pooled)
    }

    /// Sub-descriptor of three consecutive `[1, h, w]` images.
    pub fn window<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamSet<T>,
        images: [Var; WINDOW],
    ) -> Var {
        let vols = images.map(|i| self.ssm(g, p, i));
        self.msm(g, p, vols)
    }

    /// Global descriptor of a sequence of `[1, h, w]` images.
    pub fn sequence<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, images: &[Var]) -> Var {
        let vols: Vec<Var> = images.iter().map(|&i| self.ssm(g, p, i)).collect();
        let subs: Vec<Var> = vols
            .windows(WINDOW)
            .map(|w| self.msm(g, p, [w[0], w[1], w[2]]))
            .collect();
        self.pool(g, p, &subs)
    }
}

/// `[2c, w]` output of the single-scan module.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume(Tensor<f32>);

impl FeatureVolume {
    pub(crate) fn from_tensor(t: Tensor<f32>) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Network input for one range image: `[1, h, w]`, valid ranges scaled by
/// `range_norm`, invalid pixels zero.
pub fn image_tensor<T: Scalar>(image: &RangeImage, range_norm: f32) -> Tensor<T> {
    let (h, w) = image.shape();
    let data = image
        .values()
        .iter()
        .zip(image.mask())
        .map(|(&r, &ok)| {
            if ok {
                T::from_f64((r / range_norm) as f64)
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(&[1, h, w], data).expect("image shape")
}

#[derive(Debug, Clone)]
pub struct SeqOt {
    cfg: ModelConfig,
    height: usize,
    width: usize,
    arch: Architecture,
    params: ParamSet<f32>,
}

impl SeqOt {
    /// Builds a freshly initialised model for `height x width` range images.
    pub fn new(cfg: ModelConfig, height: usize, width: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let heights = cfg.leg_heights(height)?;
        if heights.last() != Some(&1) {
            return Err(Error::Config(format!(
                "leg reduces height {height} to {heights:?}, not to 1"
            )));
        }
        if width == 0 {
            return Err(Error::Config("image width must be positive".into()));
        }
        let mut params = ParamSet::new();
        let arch = Architecture::build(&cfg, &mut params, seed)?;
        Ok(Self {
            cfg,
            height,
            width,
            arch,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    /// Overwrites the parameters with the matching entries of `checkpoint`.
    pub fn load_params(&mut self, checkpoint: &ParamSet<f32>) -> Result<()> {
        self.params.load_from(checkpoint)
    }

    pub fn gem_p(&self) -> f32 {
        gem_exponent(self.params.get(self.arch.gem_rho).data()[0])
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn check_image(&self, image: &RangeImage) -> Result<()> {
        if image.shape() != (self.height, self.width) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} range image", self.height, self.width),
                found: format!("{}x{}", image.height(), image.width()),
            });
        }
        Ok(())
    }

    pub fn input<T: Scalar>(&self, image: &RangeImage) -> Result<Tensor<T>> {
        self.check_image(image)?;
        Ok(image_tensor(image, self.cfg.range_norm))
    }

    pub fn ssm_forward(&self, image: &RangeImage) -> Result<FeatureVolume> {
        let mut g = Graph::new();
        let x = g.input(self.input(image)?);
        let y = self.arch.ssm(&mut g, &self.params, x);
        Ok(FeatureVolume(g.value(y).clone()))
    }

    pub fn msm_forward(&self, volumes: [&FeatureVolume; WINDOW]) -> Result<Descriptor> {
        let expected = [self.cfg.feature_dim(), self.width];
        for v in volumes {
            if v.0.shape() != expected {
                return Err(Error::ShapeMismatch {
                    expected: format!("{expected:?} feature volume"),
                    found: format!("{:?}", v.0.shape()),
                });
            }
        }
        let mut g = Graph::new();
        let vars = volumes.map(|v| g.input(v.0.clone()));
        let y = self.arch.msm(&mut g, &self.params, vars);
        Ok(g.value(y).data().to_vec())
    }

    /// Re-initialises the NetVLAD layer from data: centres by k-means over the
    /// multi-scan transformer outputs of `windows`, and an assignment layer
    /// that softly picks the nearest centre.
    pub fn init_vlad(&mut self, windows: &[[&FeatureVolume; WINDOW]], seed: u64) -> Result<()> {
        let k = self.cfg.vlad_clusters;
        let d = self.cfg.feature_dim();
        let mut tokens: Vec<Vec<f64>> = Vec::new();
        for vols in windows {
            let mut g = Graph::<f32>::new();
            let vars = vols.map(|v| g.input(v.0.clone()));
            let long = g.concat_cols(&vars);
            let x = self.arch.mst.forward(&mut g, &self.params, long);
            let t = g.value(x);
            let n = t.shape()[1];
            tokens.extend((0..n).map(|j| (0..d).map(|r| t.data()[r * n + j] as f64).collect()));
        }
        if tokens.len() < k {
            return Err(Error::Config(format!(
                "{} feature columns cannot seed {k} clusters",
                tokens.len()
            )));
        }
        let centers = kmeans(&tokens, k, 20, seed);
        // sharpness: nearest centre ~100x more likely than the runner-up
        let mut gap = 0.0;
        for t in &tokens {
            let mut ds: Vec<f64> = centers.iter().map(|c| sq_dist(t, c)).collect();
            ds.sort_by(f64::total_cmp);
            gap += ds.get(1).map_or(0.0, |d1| d1 - ds[0]);
        }
        gap /= tokens.len() as f64;
        let alpha = if gap > 0.0 { 100f64.ln() / gap } else { 1.0 };
        let (aw, ab) = (self.arch.vlad_assign.weight, self.arch.vlad_assign.bias);
        let w = self.params.get_mut(aw).data_mut();
        for (ci, c) in centers.iter().enumerate() {
            for (j, &v) in c.iter().enumerate() {
                w[ci * d + j] = (2.0 * alpha * v) as f32;
            }
        }
        let b = self.params.get_mut(ab).data_mut();
        for (ci, c) in centers.iter().enumerate() {
            b[ci] = (-alpha * c.iter().map(|v| v * v).sum::<f64>()) as f32;
        }
        let cs = self.params.get_mut(self.arch.vlad_centers).data_mut();
        for (ci, c) in centers.iter().enumerate() {
            for (j, &v) in c.iter().enumerate() {
                cs[ci * d + j] = v as f32;
            }
        }
        Ok(())
    }

    pub fn gem_pool(&self, subs: &[&[f32]]) -> Result<Descriptor> {
        gem_pool_with_rho(
            subs,
            self.params.get(self.arch.gem_rho).data()[0],
            &self.arch,
        )
    }

    pub fn seqot_forward(&self, images: &[RangeImage]) -> Result<Descriptor> {
        if images.len() < WINDOW {
            return Err(Error::SequenceTooShort {
                got: images.len(),
                min: WINDOW,
            });
        }
        let vols = images
            .iter()
            .map(|i| self.ssm_forward(i))
            .collect::<Result<Vec<_>>>()?;
        let subs = vols
            .windows(WINDOW)
            .map(|w| self.msm_forward([&w[0], &w[1], &w[2]]))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f32]> = subs.iter().map(|s| s.as_slice()).collect();
        self.gem_pool(&refs)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a k-means++ seeding. Needs `points.len() >= k`.
fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            nearest
                .iter()
                .position(|&d| {
                    r -= d;
                    r < 0.0
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[next].clone());
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let dim = points[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .expect("k >= 1");
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centre
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

fn gem_pool_with_rho(subs: &[&[f32]], rho: f32, arch: &Architecture) -> Result<Descriptor> {
    if subs.is_empty() {
        return Err(Error::Empty("sub-descriptor set"));
    }
    let d = subs[0].len();
    if let Some(bad) = subs.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    let mut p = ParamSet::new();
    let id = p.add("gem.rho", Tensor::scalar(rho));
    let mut pooling = arch.clone();
    pooling.gem_rho = id;
    let mut g = Graph::new();
    let data: Vec<f32> = subs.iter().flat_map(|s| s.iter().copied()).collect();
    let x = g.input(Tensor::new(&[subs.len(), d], data)?);
    let y = pooling.pool(&mut g, &p, &[x]);
    Ok(g.value(y).data().to_vec())
}

/// GeM pooling with an explicit exponent `p > 1`, followed by L2
/// normalisation.
pub fn gem_pool(subs: &[&[f32]], p: f64) -> Result<Descriptor> {
    if !(p > 1.0) {
        return Err(Error::Config(format!("GeM exponent {p} must exceed 1")));
    }
    if subs.is_empty() {
        return Err(Error::Empty("sub-descriptor set"));
    }
    let d = subs[0].len();
    let mut g = Graph::<f32>::new();
    let mut ps = ParamSet::new();
    let rho = ps.add("rho", Tensor::scalar(gem_rho_for_exponent(p) as f32));
    let data: Vec<f32> = subs.iter().flat_map(|s| s.iter().copied()).collect();
    let x = g.input(Tensor::new(&[subs.len(), d], data)?);
    let r = g.param(&ps, rho);
    let pooled = g.gem(x, r, GEM_EPS as f32);
    let y = g.l2_normalize_rows(pooled);
    Ok(g.value(y).data().to_vec())
}

/// Result of feeding one scan to a [`StreamState`].
#[derive(Debug, Clone, PartialEq)]
pub enum StreamOutput {
    /// Fewer than three scans seen; no window exists yet.
    WarmingUp,
    Descriptor(Descriptor),
}

/// Incremental descriptor state: each new scan costs one single-scan pass,
/// one window pass and one pooling.
#[derive(Debug, Clone)]
pub struct StreamState {
    volumes: VecDeque<(u64, FeatureVolume)>,
    subs: VecDeque<(u64, Descriptor)>,
    sub_cap: usize,
}

impl StreamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            volumes: VecDeque::with_capacity(WINDOW - 1),
            subs: VecDeque::with_capacity(cfg.subdescriptors_per_sequence()),
            sub_cap: cfg.subdescriptors_per_sequence(),
        }
    }

    pub fn cached_volumes(&self) -> usize {
        self.volumes.len()
    }

    pub fn cached_subdescriptors(&self) -> usize {
        self.subs.len()
    }

    pub fn last_id(&self) -> Option<u64> {
        self.volumes.back().map(|(id, _)| *id)
    }

    /// Consumes scan `id`, which must be greater than every earlier id.
    pub fn update(&mut self, model: &SeqOt, id: u64, image: &RangeImage) -> Result<StreamOutput> {
        if let Some(last) = self.last_id() {
            if id <= last {
                return Err(Error::OutOfOrder { last, got: id });
            }
        }
        let vol = model.ssm_forward(image)?;
        if self.volumes.len() == WINDOW - 1 {
            let sub = model.msm_forward([&self.volumes[0].1, &self.volumes[1].1, &vol])?;
            if self.subs.len() == self.sub_cap {
                self.subs.pop_front();
            }
            self.subs.push_back((id, sub));
            self.volumes.pop_front();
        }
        self.volumes.push_back((id, vol));
        if self.subs.is_empty() {
            return Ok(StreamOutput::WarmingUp);
        }
        let refs: Vec<&[f32]> = self.subs.iter().map(|(_, s)| s.as_slice()).collect();
        Ok(StreamOutput::Descriptor(model.gem_pool(&refs)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GradCheck;
    use crate::rangeproj::column_shift;
    use rand::Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            c: 4,
            heads_sst: 2,
            heads_mst: 2,
            ffn_mult: 2,
            vlad_clusters: 4,
            gem_p_init: 3.0,
            seq_len_m: 5,
            leg_channels: vec![3],
            leg_kernels: vec![3, 3],
            leg_stride: 2,
            range_norm: 10.0,
        }
    }

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RangeImage {
        let v = (0..h * w)
            .map(|_| {
                if rng.gen_bool(0.9) {
                    rng.gen_range(0.5..20.0)
                } else {
                    -1.0
                }
            })
            .collect();
        RangeImage::from_values(h, w, v).unwrap()
    }

    fn norm(v: &[f32]) -> f32 {
        v.iter().map(|x| x * x).sum::<f32>().sqrt()
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = truth[i % 3];
                vec![
                    c[0] + rng.gen_range(-1.0..1.0),
                    c[1] + rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let mut found = kmeans(&pts, 3, 10, 0);
        found.sort_by(|a, b| (a[0] + 2.0 * a[1]).total_cmp(&(b[0] + 2.0 * b[1])));
        for (f, t) in found.iter().zip(truth) {
            assert!(sq_dist(f, &t).sqrt() < 0.3, "{f:?} vs {t:?}");
        }
        assert_eq!(kmeans(&pts, 3, 10, 5).len(), 3);
    }

    #[test]
    fn vlad_init_assigns_centres_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = SeqOt::new(toy_config(), 8, 12, 0).unwrap();
        let vols: Vec<FeatureVolume> = (0..6)
            .map(|_| model.ssm_forward(&random_image(8, 12, &mut rng)).unwrap())
            .collect();
        let wins: Vec<[&FeatureVolume; WINDOW]> = (2..6)
            .map(|i| [&vols[i - 2], &vols[i - 1], &vols[i]])
            .collect();
        let before = model.params().clone();
        model.init_vlad(&wins, 1).unwrap();
        let arch = model.arch().clone();
        for id in model.params().ids() {
            let touched = [
                arch.vlad_assign.weight,
                arch.vlad_assign.bias,
                arch.vlad_centers,
            ]
            .contains(&id);
            assert_eq!(
                model.params().get(id) == before.get(id),
                !touched,
                "{}",
                model.params().name(id)
            );
        }
        // logits at a centre are highest for that centre
        let p = model.params();
        let (w, b, c) = (
            p.get(arch.vlad_assign.weight),
            p.get(arch.vlad_assign.bias),
            p.get(arch.vlad_centers),
        );
        let (k, d) = c.dims2();
        for i in 0..k {
            let x = &c.data()[i * d..(i + 1) * d];
            let logits: Vec<f32> = (0..k)
                .map(|j| b.data()[j] + (0..d).map(|t| w.data()[j * d + t] * x[t]).sum::<f32>())
                .collect();
            let best = (0..k)
                .max_by(|&a, &bb| logits[a].total_cmp(&logits[bb]))
                .unwrap();
            assert_eq!(best, i);
        }
        assert!(model.init_vlad(&wins[..0], 1).is_err());
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn default_leg_heights() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.leg_heights(32).unwrap(), vec![14, 6, 2, 1]);
        assert!(SeqOt::new(cfg.clone(), 24, 16, 0).is_err());
    }

    #[test]
    fn paper_width_feature_volume() {
        let cfg = ModelConfig {
            c: 8,
            leg_channels: vec![4, 4, 8],
            vlad_clusters: 4,
            ..ModelConfig::default()
        };
        let m = SeqOt::new(cfg, 32, 900, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = m.ssm_forward(&random_image(32, 900, &mut rng)).unwrap();
        assert_eq!(f.tensor().shape(), &[16, 900]);
    }

    #[test]
    fn image_shape_checked() {
        let m = SeqOt::new(toy_config(), 8, 12, 0).unwrap();
        let err = m.ssm_forward(&RangeImage::invalid(8, 10)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn ssm_commutes_with_column_shift() {
        let m = SeqOt::new(toy_config(), 8, 12, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(8, 12, &mut rng);
        let base = m.ssm_forward(&img).unwrap();
        for s in [1i64, 5, 11] {
            let shifted = m.ssm_forward(&column_shift(&img, s)).unwrap();
            let expected = crate::nn::shift_columns(base.tensor(), s);
            assert!(shifted.tensor().max_abs_diff(&expected) <= 1e-5);
        }
    }

    #[test]
    fn msm_ignores_independent_shifts() {
        let m = SeqOt::new(toy_config(), 8, 12, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<_> = (0..3).map(|_| random_image(8, 12, &mut rng)).collect();
        let vols: Vec<_> = imgs.iter().map(|i| m.ssm_forward(i).unwrap()).collect();
        let base = m.msm_forward([&vols[0], &vols[1], &vols[2]]).unwrap();
        assert_eq!(base.len(), DESCRIPTOR_DIM);
        assert!((norm(&base) - 1.0).abs() <= 1e-5);
        for _ in 0..5 {
            let s: [i64; 3] = [
                rng.gen_range(0..12),
                rng.gen_range(0..12),
                rng.gen_range(0..12),
            ];
            let v: Vec<_> = (0..3)
                .map(|k| m.ssm_forward(&column_shift(&imgs[k], s[k])).unwrap())
                .collect();
            let d = m.msm_forward([&v[0], &v[1], &v[2]]).unwrap();
            assert!(max_diff(&d, &base) <= 1e-5, "{s:?}");
        }
    }

    #[test]
    fn vlad_ignores_column_order() {
        let cfg = toy_config();
        let m = SeqOt::new(cfg.clone(), 8, 12, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f32> = (0..cfg.feature_dim() * 36)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let run = |x: Vec<f32>| {
            let a = m.arch();
            let p = m.params();
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(&[cfg.feature_dim(), 36], x).unwrap());
            let logits = a.vlad_assign.forward(&mut g, p, xv);
            let s = g.softmax_cols(logits);
            let c = g.param(p, a.vlad_centers);
            let v = g.vlad_residual(s, xv, c);
            g.value(v).data().to_vec()
        };
        let base = run(x.clone());
        let mut perm: Vec<usize> = (0..36).collect();
        perm.reverse();
        perm.swap(3, 17);
        let mut y = vec![0.0; x.len()];
        for r in 0..cfg.feature_dim() {
            for (j, &pj) in perm.iter().enumerate() {
                y[r * 36 + j] = x[r * 36 + pj];
            }
        }
        assert!(max_diff(&run(y), &base) <= 1e-5);
    }

    #[test]
    fn gem_limits() {
        let a = [0.2f32, 0.9, 0.0];
        let b = [0.6f32, 0.1, -0.5];
        // p near 1 approaches the arithmetic mean of the clamped inputs
        let g1 = gem_pool(&[&a, &b], 1.0 + 1e-4).unwrap();
        let mean = [0.4f32, 0.5, 1e-6];
        let n = norm(&mean);
        for (x, m) in g1.iter().zip(mean) {
            assert!((x - m / n).abs() < 1e-3, "{x} vs {}", m / n);
        }
        let gmax = gem_pool(&[&a, &b], 100.0).unwrap();
        let mx = [0.6f32, 0.9, 1e-6];
        let n = norm(&mx);
        for (x, m) in gmax.iter().zip(mx) {
            assert!(
                (x - m / n).abs() <= 0.02 * (m / n).max(1e-3),
                "{x} vs {}",
                m / n
            );
        }
        assert!(gem_pool(&[], 3.0).is_err());
        assert!(gem_pool(&[&a], 1.0).is_err());
    }

    #[test]
    fn gem_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let subs: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..16).map(|_| rng.gen_range(-0.3..0.5)).collect())
            .collect();
        let refs: Vec<&[f32]> = subs.iter().map(|s| s.as_slice()).collect();
        let base = gem_pool(&refs, 3.0).unwrap();
        let mut rev = refs.clone();
        rev.reverse();
        assert!(max_diff(&gem_pool(&rev, 3.0).unwrap(), &base) <= 1e-6);
    }

    #[test]
    fn sequence_descriptor_counts_and_norm() {
        let cfg = ModelConfig {
            seq_len_m: 20,
            ..toy_config()
        };
        assert_eq!(cfg.subdescriptors_per_sequence(), 18);
        let m = SeqOt::new(cfg, 8, 12, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let imgs: Vec<_> = (0..3).map(|_| random_image(8, 12, &mut rng)).collect();
        let d = m.seqot_forward(&imgs).unwrap();
        assert!((norm(&d) - 1.0).abs() <= 1e-5);
        let vols: Vec<_> = imgs.iter().map(|i| m.ssm_forward(i).unwrap()).collect();
        let sub = m.msm_forward([&vols[0], &vols[1], &vols[2]]).unwrap();
        // a single clamped sub-descriptor, renormalised
        let clamped: Vec<f32> = sub.iter().map(|v| v.max(1e-6)).collect();
        let n = norm(&clamped);
        let expected: Vec<f32> = clamped.iter().map(|v| v / n).collect();
        assert!(max_diff(&d, &expected) <= 1e-5);
        let err = m.seqot_forward(&imgs[..2]).unwrap_err();
        assert!(err.to_string().starts_with("sequence too short"));
    }

    #[test]
    fn sequence_is_yaw_invariant() {
        let m = SeqOt::new(toy_config(), 8, 12, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let imgs: Vec<_> = (0..5).map(|_| random_image(8, 12, &mut rng)).collect();
        let base = m.seqot_forward(&imgs).unwrap();
        let rotated: Vec<_> = imgs
            .iter()
            .map(|i| column_shift(i, rng.gen_range(0..12)))
            .collect();
        assert!(max_diff(&m.seqot_forward(&rotated).unwrap(), &base) <= 1e-4);
    }

    #[test]
    fn stream_matches_batch() {
        let cfg = toy_config();
        let m = SeqOt::new(cfg.clone(), 8, 12, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let imgs: Vec<_> = (0..8).map(|_| random_image(8, 12, &mut rng)).collect();
        let mut st = StreamState::new(&cfg);
        for (i, img) in imgs.iter().enumerate() {
            let out = st.update(&m, i as u64, img).unwrap();
            assert!(st.cached_volumes() <= 2);
            assert!(st.cached_subdescriptors() <= cfg.subdescriptors_per_sequence());
            match out {
                StreamOutput::WarmingUp => assert!(i < 2),
                StreamOutput::Descriptor(d) => {
                    let lo = (i + 1).saturating_sub(cfg.seq_len_m);
                    let batch = m.seqot_forward(&imgs[lo..=i]).unwrap();
                    assert!(max_diff(&d, &batch) <= 1e-5, "scan {i}");
                }
            }
        }
        assert!(matches!(
            st.update(&m, 3, &imgs[0]),
            Err(Error::OutOfOrder { last: 7, got: 3 })
        ));
    }

    #[test]
    fn param_count_closed_form_all_ones() {
        let cfg = ModelConfig {
            c: 1,
            heads_sst: 1,
            heads_mst: 1,
            ffn_mult: 1,
            vlad_clusters: 1,
            gem_p_init: 2.0,
            seq_len_m: 3,
            leg_channels: vec![1, 1, 1],
            leg_kernels: vec![5, 3, 3, 2],
            leg_stride: 2,
            range_norm: 1.0,
        };
        // leg: (5+1)+(3+1)+(3+1)+(2+1) = 17
        // sst, d=1: attention 4*(1+1), norms 2*2, ffn 2*(1+1) = 16
        // mst, d=2: attention 4*(4+2), norms 2*4, ffn 2*(4+2) = 44
        // vlad: assign 2+1, centres 2; mlp 2*256+256; rho 1
        let expected = 17 + 16 + 44 + 3 + 2 + 768 + 1;
        assert_eq!(param_count(&cfg), expected);
        let m = SeqOt::new(cfg, 32, 4, 0).unwrap();
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn param_count_grows_superlinearly_in_c() {
        let a = ModelConfig {
            c: 32,
            ..ModelConfig::default()
        };
        let b = ModelConfig {
            c: 64,
            ..ModelConfig::default()
        };
        assert!(param_count(&b) > 2 * param_count(&a));
        assert_eq!(
            param_count(&b),
            SeqOt::new(b, 32, 8, 0).unwrap().param_count()
        );
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = ModelConfig {
            c: 4,
            heads_sst: 2,
            heads_mst: 4,
            vlad_clusters: 4,
            seq_len_m: 4,
            leg_channels: vec![2],
            leg_kernels: vec![3, 3],
            ..toy_config()
        };
        let m = SeqOt::new(cfg, 8, 12, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let imgs: Vec<Tensor<f64>> = (0..4)
            .map(|_| image_tensor(&random_image(8, 12, &mut rng), 10.0))
            .collect();
        let target: Tensor<f64> = Tensor::new(
            &[1, DESCRIPTOR_DIM],
            (0..DESCRIPTOR_DIM)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let params = m.params().cast::<f64>();
        let check = GradCheck {
            max_entries: 400,
            ..GradCheck::default()
        };
        let r = check.run(&params, |g, p| {
            let xs: Vec<Var> = imgs.iter().map(|t| g.input(t.clone())).collect();
            let d = m.arch().sequence(g, p, &xs);
            g.dot_const(d, target.clone())
        });
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
