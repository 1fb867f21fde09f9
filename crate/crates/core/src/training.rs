//! Two-phase training.
//!
//! Phase 1 fits the single- and multi-scan modules with a lazy triplet loss
//! on window sub-descriptors. Phase 2 freezes them, caches the
//! sub-descriptor of every window and fits only the GeM exponent with the
//! same loss on pooled sequence descriptors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Descriptor, FeatureVolume, SeqOt, DESCRIPTOR_DIM, WINDOW};
use crate::nn::{GradBuffer, Graph, ParamId, ParamSet, Tensor, Var};
use crate::overlap::{OverlapTable, TupleSampler};
use crate::rangeproj::RangeImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f32,
    pub n_pos: usize,
    pub n_neg: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub lr_phase1: f32,
    pub lr_phase2: f32,
    pub lr_decay: f32,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    /// Caps the queries drawn per epoch; `None` uses every eligible query.
    pub queries_per_epoch: Option<usize>,
    /// Windows used to seed the NetVLAD clusters before phase 1; 0 keeps
    /// the random initialisation.
    pub vlad_init_windows: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            n_pos: 6,
            n_neg: 6,
            epochs_phase1: 20,
            epochs_phase2: 20,
            lr_phase1: 5e-6,
            lr_phase2: 5e-5,
            lr_decay: 0.9,
            lr_decay_every: 5,
            queries_per_epoch: None,
            vlad_init_windows: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.n_pos == 0 || self.n_neg == 0 {
            return Err(Error::Config("n_pos and n_neg must be >= 1".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be >= 1".into()));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config(
                "learning rates and decay must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, phase: Phase, epoch: usize) -> f32 {
        let base = match phase {
            Phase::One => self.lr_phase1,
            Phase::Two => self.lr_phase2,
        };
        base * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::One => self.epochs_phase1,
            Phase::Two => self.epochs_phase2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// `sum_n max(0, alpha + max_p d_pos[p] - d_neg[n])` over precomputed
/// squared distances.
pub fn lazy_triplet_from_distances(d_pos: &[f64], d_neg: &[f64], alpha: f64) -> Result<f64> {
    if d_pos.is_empty() || d_neg.is_empty() {
        return Err(Error::Empty("triplet set"));
    }
    let hardest = d_pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(d_neg
        .iter()
        .map(|&dn| (alpha + hardest - dn).max(0.0))
        .sum())
}

fn stack(rows: &[&[f32]]) -> Result<Tensor<f32>> {
    let d = rows.first().map_or(0, |r| r.len());
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    Tensor::new(
        &[rows.len(), d],
        rows.iter().flat_map(|r| r.iter().copied()).collect(),
    )
}

/// Triplet loss on sub-descriptors: the hardest positive against every
/// negative, each term hinged at zero.
pub fn triplet_loss_sub(q: &[f32], pos: &[&[f32]], neg: &[&[f32]], alpha: f32) -> Result<f32> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("triplet set"));
    }
    let mut g = Graph::new();
    let qv = g.input(stack(&[q])?);
    let pv = g.input(stack(pos)?);
    let nv = g.input(stack(neg)?);
    if g.value(pv).shape()[1] != q.len() || g.value(nv).shape()[1] != q.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            found: g.value(pv).shape()[1].max(g.value(nv).shape()[1]),
        });
    }
    let l = g.lazy_triplet(qv, pv, nv, alpha);
    Ok(g.value(l).data()[0])
}

/// Same loss on global descriptors.
pub fn triplet_loss_global(q: &[f32], pos: &[&[f32]], neg: &[&[f32]], alpha: f32) -> Result<f32> {
    triplet_loss_sub(q, pos, neg, alpha)
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &GradBuffer<f32>,
        lr: f32,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::LengthMismatch(format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{:?}", params.get(id).shape()),
                        found: format!("{:?}", g.shape()),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn store(&self, params: &ParamSet<f32>, out: &mut ParamSet<f32>) {
        for (id, name, _) in params.iter() {
            out.add(format!("adam.m.{name}"), self.m[id.index()].clone());
            out.add(format!("adam.v.{name}"), self.v[id.index()].clone());
        }
        // split so step counts beyond 2^24 stay exact in f32
        let lo = (self.step & 0xffff) as f32;
        let hi = (self.step >> 16) as f32;
        out.add("adam.step", Tensor::new(&[2], vec![lo, hi]).expect("shape"));
    }

    fn load(params: &ParamSet<f32>, ck: &ParamSet<f32>) -> Result<Self> {
        let mut adam = Adam::new(params);
        let get = |name: &str| {
            ck.id(name)
                .map(|id| ck.get(id).clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        for (id, name, t) in params.iter() {
            let m = get(&format!("adam.m.{name}"))?;
            let v = get(&format!("adam.v.{name}"))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name}: {:?}", t.shape()),
                    found: format!("{:?}", m.shape()),
                });
            }
            adam.m[id.index()] = m;
            adam.v[id.index()] = v;
        }
        let s = get("adam.step")?;
        adam.step = s.data()[0] as u64 | ((s.data()[1] as u64) << 16);
        Ok(adam)
    }
}

/// Optimiser position within a phase; serialised next to the weights so an
/// interrupted run resumes bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(model: &SeqOt, phase: Phase) -> Self {
        Self {
            phase,
            epoch: 0,
            adam: Adam::new(model.params()),
        }
    }
}

/// Model weights plus optimiser state as one parameter file.
pub fn checkpoint(model: &SeqOt, state: &TrainState) -> ParamSet<f32> {
    let mut out = model.params().clone();
    state.adam.store(model.params(), &mut out);
    out.add("train.epoch", Tensor::scalar(state.epoch as f32));
    out.add("train.phase", Tensor::scalar(state.phase.tag() as f32));
    out
}

/// Loads weights from `ck` into `model`. Returns the saved optimiser state
/// when the checkpoint carries one.
pub fn restore(model: &mut SeqOt, ck: &ParamSet<f32>) -> Result<Option<TrainState>> {
    model.load_params(ck)?;
    let (Some(e), Some(p)) = (ck.id("train.epoch"), ck.id("train.phase")) else {
        return Ok(None);
    };
    let phase = match ck.get(p).data()[0] as u64 {
        1 => Phase::One,
        2 => Phase::Two,
        other => return Err(Error::Format(format!("unknown training phase {other}"))),
    };
    Ok(Some(TrainState {
        phase,
        epoch: ck.get(e).data()[0] as usize,
        adam: Adam::load(model.params(), ck)?,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f32,
    pub steps: usize,
    pub mean_loss: f32,
}

/// Network inputs for a run of scans, with each scan's position inside its
/// traversal (windows never straddle two traversals).
#[derive(Debug, Clone)]
pub struct TrainSet {
    inputs: Vec<Tensor<f32>>,
    pass_pos: Vec<usize>,
}

impl TrainSet {
    pub fn new(model: &SeqOt, images: &[RangeImage], pass_pos: Vec<usize>) -> Result<Self> {
        if images.len() != pass_pos.len() {
            return Err(Error::LengthMismatch(format!(
                "{} images, {} pass positions",
                images.len(),
                pass_pos.len()
            )));
        }
        let inputs = images
            .iter()
            .map(|i| model.input(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, pass_pos })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn pass_pos(&self) -> &[usize] {
        &self.pass_pos
    }

    /// Scans with at least `history` predecessors in their traversal.
    pub fn with_history(&self, history: usize) -> Vec<bool> {
        self.pass_pos.iter().map(|&p| p >= history).collect()
    }
}

/// Mixes a run seed with a position in the schedule.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 finaliser per part
    let mut x = seed;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(0x9e37_79b9_7f4a_7c15));
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

fn epoch_queries(
    sampler: &TupleSampler,
    table: &OverlapTable,
    cfg: &TrainConfig,
    phase: Phase,
    epoch: usize,
) -> Result<Vec<usize>> {
    let mut q: Vec<usize> = (0..table.len())
        .filter(|&i| sampler.can_sample(table, i))
        .collect();
    if q.is_empty() {
        return Err(Error::NoEligibleQueries);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[phase.tag(), epoch as u64]));
    q.shuffle(&mut rng);
    if let Some(cap) = cfg.queries_per_epoch {
        q.truncate(cap.max(1));
    }
    Ok(q)
}

fn check_table(data_len: usize, table: &OverlapTable) -> Result<()> {
    if table.len() != data_len {
        return Err(Error::LengthMismatch(format!(
            "{data_len} scans but an overlap table over {}",
            table.len()
        )));
    }
    Ok(())
}

/// One gradient step on a phase-1 tuple. Returns the loss before the update.
pub fn phase1_step(
    model: &mut SeqOt,
    data: &TrainSet,
    query: usize,
    positives: &[usize],
    negatives: &[usize],
    alpha: f32,
    adam: &mut Adam,
    lr: f32,
) -> Result<f32> {
    let samples: Vec<usize> = std::iter::once(query)
        .chain(positives.iter().copied())
        .chain(negatives.iter().copied())
        .collect();
    for &s in &samples {
        if s >= data.len() || data.pass_pos[s] < WINDOW - 1 {
            return Err(Error::Config(format!("scan {s} has no full window")));
        }
    }
    let params = model.params();
    let arch = model.arch();
    let forwards: Vec<(Graph<f32>, Var)> = samples
        .par_iter()
        .map(|&s| {
            let mut g = Graph::new();
            let imgs = [s - 2, s - 1, s].map(|i| g.input(data.inputs[i].clone()));
            let d = arch.window(&mut g, params, imgs);
            (g, d)
        })
        .collect();

    let np = positives.len();
    let mut lg = Graph::new();
    let leaves: Vec<Var> = forwards
        .iter()
        .map(|(g, d)| lg.input(g.value(*d).clone()))
        .collect();
    let q = leaves[0];
    let p = lg.concat_rows(&leaves[1..1 + np]);
    let n = lg.concat_rows(&leaves[1 + np..]);
    let loss = lg.lazy_triplet(q, p, n, alpha);
    let value = lg.value(loss).data()[0];
    let lgrads = lg.backward(loss, Tensor::scalar(1.0));
    let seeds: Vec<Tensor<f32>> = leaves
        .iter()
        .map(|&v| {
            lgrads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&[1, DESCRIPTOR_DIM]))
        })
        .collect();

    let buffers: Vec<Option<GradBuffer<f32>>> = forwards
        .par_iter()
        .zip(seeds.par_iter())
        .map(|((g, d), seed)| {
            if seed.data().iter().all(|&x| x == 0.0) {
                return None;
            }
            let grads = g.backward(*d, seed.clone());
            let mut buf = GradBuffer::for_params(params);
            g.accumulate_param_grads(&grads, &mut buf);
            Some(buf)
        })
        .collect();
    drop(forwards);
    let mut total = GradBuffer::for_params(model.params());
    // fixed summation order keeps the update independent of the pool size
    for b in buffers.iter().flatten() {
        total.merge(b);
    }
    adam.step(model.params_mut(), &total, lr)?;
    Ok(value)
}

/// Runs phase-1 epochs from `state.epoch` up to `cfg.epochs_phase1`, calling
/// `on_epoch` after each one (e.g. to write a checkpoint).
pub fn train_phase1<F>(
    model: &mut SeqOt,
    data: &TrainSet,
    table: &OverlapTable,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&SeqOt, &TrainState, &EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    check_table(data.len(), table)?;
    if state.phase != Phase::One {
        return Err(Error::Config("resuming a phase-2 state in phase 1".into()));
    }
    let sampler =
        TupleSampler::new(cfg.n_pos, cfg.n_neg).with_eligible(data.with_history(WINDOW - 1));
    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs_phase1 {
        let epoch = state.epoch;
        let lr = cfg.lr_at(Phase::One, epoch);
        let queries = epoch_queries(&sampler, table, cfg, Phase::One, epoch)?;
        let mut sum = 0.0f64;
        for (step, &q) in queries.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[1, epoch as u64, step as u64]);
            let t = sampler.sample(table, q, seed)?;
            let loss = phase1_step(
                model,
                data,
                q,
                &t.positives,
                &t.negatives,
                cfg.alpha,
                &mut state.adam,
                lr,
            )?;
            sum += loss as f64;
        }
        state.epoch += 1;
        let m = EpochMetrics {
            phase: Phase::One,
            epoch,
            lr,
            steps: queries.len(),
            mean_loss: (sum / queries.len() as f64) as f32,
        };
        log::info!("phase 1 epoch {epoch}: loss {:.4} lr {lr:.2e}", m.mean_loss);
        on_epoch(model, state, &m)?;
        metrics.push(m);
    }
    Ok(metrics)
}

/// Seeds the NetVLAD layer from up to `windows` evenly spaced training
/// windows. Meant for a fresh model, before the first phase-1 epoch.
pub fn init_vlad_from_data(
    model: &mut SeqOt,
    data: &TrainSet,
    windows: usize,
    seed: u64,
) -> Result<()> {
    let ends: Vec<usize> = (0..data.len())
        .filter(|&i| data.pass_pos[i] >= WINDOW - 1)
        .collect();
    if ends.is_empty() || windows == 0 {
        return Err(Error::NoEligibleQueries);
    }
    let stride = ends.len().div_ceil(windows);
    let picked: Vec<usize> = ends.iter().copied().step_by(stride).collect();
    let params = model.params();
    let arch = model.arch();
    let needed: std::collections::BTreeSet<usize> =
        picked.iter().flat_map(|&i| i + 1 - WINDOW..=i).collect();
    let vols: std::collections::BTreeMap<usize, FeatureVolume> = needed
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let x = g.input(data.inputs[i].clone());
            let y = arch.ssm(&mut g, params, x);
            (i, FeatureVolume::from_tensor(g.value(y).clone()))
        })
        .collect();
    let wins: Vec<[&FeatureVolume; WINDOW]> = picked
        .iter()
        .map(|&i| [&vols[&(i - 2)], &vols[&(i - 1)], &vols[&i]])
        .collect();
    model.init_vlad(&wins, seed)
}

/// Sub-descriptor of the window ending at each scan (`None` for the first
/// two scans of a traversal).
#[derive(Debug, Clone, PartialEq)]
pub struct SubDescriptorCache {
    subs: Vec<Option<Descriptor>>,
    pass_pos: Vec<usize>,
}

impl SubDescriptorCache {
    pub fn compute(model: &SeqOt, data: &TrainSet) -> Result<Self> {
        let params = model.params();
        let arch = model.arch();
        let vols: Vec<Tensor<f32>> = data
            .inputs
            .par_iter()
            .map(|x| {
                let mut g = Graph::new();
                let v = g.input(x.clone());
                let y = arch.ssm(&mut g, params, v);
                g.value(y).clone()
            })
            .collect();
        let subs = (0..data.len())
            .into_par_iter()
            .map(|i| {
                if data.pass_pos[i] < WINDOW - 1 {
                    return None;
                }
                let mut g = Graph::new();
                let v = [i - 2, i - 1, i].map(|k| g.input(vols[k].clone()));
                let d = arch.msm(&mut g, params, v);
                Some(g.value(d).data().to_vec())
            })
            .collect();
        Ok(Self {
            subs,
            pass_pos: data.pass_pos.clone(),
        })
    }

    pub fn from_parts(subs: Vec<Option<Descriptor>>, pass_pos: Vec<usize>) -> Result<Self> {
        if subs.len() != pass_pos.len() {
            return Err(Error::LengthMismatch(format!(
                "{} cache entries, {} pass positions",
                subs.len(),
                pass_pos.len()
            )));
        }
        Ok(Self { subs, pass_pos })
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn get(&self, scan: usize) -> Option<&[f32]> {
        self.subs.get(scan).and_then(|s| s.as_deref())
    }

    /// Scans that end a full `m`-scan sequence inside their traversal.
    pub fn anchors(&self, m: usize) -> Vec<bool> {
        self.pass_pos.iter().map(|&p| p + 1 >= m).collect()
    }

    /// The sub-descriptors pooled for the sequence ending at `anchor`.
    pub fn sequence(&self, anchor: usize, m: usize) -> Result<Vec<&[f32]>> {
        if anchor >= self.len() || self.pass_pos[anchor] + 1 < m {
            return Err(Error::SequenceTooShort {
                got: self.pass_pos.get(anchor).map_or(0, |p| p + 1),
                min: m,
            });
        }
        (anchor + WINDOW - m..=anchor)
            .map(|i| self.get(i).ok_or(Error::MissingCache(i)))
            .collect()
    }

    /// Global descriptor of the sequence ending at `anchor`.
    pub fn global(&self, model: &SeqOt, anchor: usize) -> Result<Descriptor> {
        let subs = self.sequence(anchor, model.config().seq_len_m)?;
        model.gem_pool(&subs)
    }
}

/// One gradient step on the GeM exponent. Returns the loss before the update.
pub fn phase2_step(
    model: &mut SeqOt,
    cache: &SubDescriptorCache,
    query: usize,
    positives: &[usize],
    negatives: &[usize],
    alpha: f32,
    adam: &mut Adam,
    lr: f32,
) -> Result<f32> {
    let m = model.config().seq_len_m;
    let rho_id: ParamId = model.arch().gem_rho;
    let mut g = Graph::new();
    let mut pooled = Vec::new();
    for &s in std::iter::once(&query).chain(positives).chain(negatives) {
        let subs = cache.sequence(s, m)?;
        let x = g.input(stack(&subs)?);
        pooled.push(model.arch().pool(&mut g, model.params(), &[x]));
    }
    let np = positives.len();
    let p = g.concat_rows(&pooled[1..1 + np]);
    let n = g.concat_rows(&pooled[1 + np..]);
    let loss = g.lazy_triplet(pooled[0], p, n, alpha);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss, Tensor::scalar(1.0));
    let mut buf = GradBuffer::for_params(model.params());
    g.accumulate_param_grads(&grads, &mut buf);
    debug_assert!(model
        .params()
        .ids()
        .all(|id| id == rho_id || buf.get(id).is_none()));
    adam.step(model.params_mut(), &buf, lr)?;
    Ok(value)
}

/// Fits the pooling exponent with every other parameter frozen.
pub fn train_phase2<F>(
    model: &mut SeqOt,
    cache: &SubDescriptorCache,
    table: &OverlapTable,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&SeqOt, &TrainState, &EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    check_table(cache.len(), table)?;
    if state.phase != Phase::Two {
        return Err(Error::Config("resuming a phase-1 state in phase 2".into()));
    }
    let m = model.config().seq_len_m;
    let sampler = TupleSampler::new(cfg.n_pos, cfg.n_neg).with_eligible(cache.anchors(m));
    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs_phase2 {
        let epoch = state.epoch;
        let lr = cfg.lr_at(Phase::Two, epoch);
        let queries = epoch_queries(&sampler, table, cfg, Phase::Two, epoch)?;
        let mut sum = 0.0f64;
        for (step, &q) in queries.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[2, epoch as u64, step as u64]);
            let t = sampler.sample(table, q, seed)?;
            sum += phase2_step(
                model,
                cache,
                q,
                &t.positives,
                &t.negatives,
                cfg.alpha,
                &mut state.adam,
                lr,
            )? as f64;
        }
        state.epoch += 1;
        let mt = EpochMetrics {
            phase: Phase::Two,
            epoch,
            lr,
            steps: queries.len(),
            mean_loss: (sum / queries.len() as f64) as f32,
        };
        log::info!(
            "phase 2 epoch {epoch}: loss {:.4} lr {lr:.2e} p {:.3}",
            mt.mean_loss,
            model.gem_p()
        );
        on_epoch(model, state, &mt)?;
        metrics.push(mt);
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::grad_check;
    use rand::Rng;

    fn toy_model(seed: u64) -> SeqOt {
        let cfg = ModelConfig {
            c: 4,
            heads_sst: 2,
            heads_mst: 2,
            ffn_mult: 2,
            vlad_clusters: 4,
            gem_p_init: 3.0,
            seq_len_m: 4,
            leg_channels: vec![3],
            leg_kernels: vec![3, 3],
            leg_stride: 2,
            range_norm: 10.0,
        };
        SeqOt::new(cfg, 8, 12, seed).unwrap()
    }

    fn toy_data(model: &SeqOt, n: usize, seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<RangeImage> = (0..n)
            .map(|_| {
                let v = (0..96).map(|_| rng.gen_range(0.5..20.0)).collect();
                RangeImage::from_values(8, 12, v).unwrap()
            })
            .collect();
        TrainSet::new(model, &images, (0..n).collect()).unwrap()
    }

    /// Overlap is high between scans at most 2 apart.
    fn banded_table(n: usize) -> OverlapTable {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = if i == j {
                    1.0
                } else if i.abs_diff(j) <= 2 {
                    0.6
                } else {
                    0.05
                };
            }
        }
        OverlapTable::from_values(n, 1.0, 0.3, v).unwrap()
    }

    fn unit_along(d: f64, dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0f32; dim];
        v[axis] = d.sqrt() as f32;
        v
    }

    #[test]
    fn vlad_init_from_data_is_deterministic() {
        let mut a = toy_model(0);
        let data = toy_data(&a, 12, 3);
        let mut b = a.clone();
        init_vlad_from_data(&mut a, &data, 4, 9).unwrap();
        init_vlad_from_data(&mut b, &data, 4, 9).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), toy_model(0).params());
        let short = TrainSet::new(&a, &[], vec![]).unwrap();
        assert!(init_vlad_from_data(&mut a, &short, 4, 9).is_err());
    }

    #[test]
    fn loss_matches_distance_formula() {
        let zero = vec![0.0f32; 4];
        let cases: [(&[f64], &[f64], f64); 3] = [
            (&[0.1, 0.2], &[1.0], 0.0),
            (&[0.2], &[0.3], 0.4),
            (&[0.0, 0.0], &[0.5, 0.9], 0.0),
        ];
        for (dp, dn, expected) in cases {
            let oracle = lazy_triplet_from_distances(dp, dn, 0.5).unwrap();
            assert!((oracle - expected).abs() < 1e-12);
            let pos: Vec<Vec<f32>> = dp
                .iter()
                .enumerate()
                .map(|(i, &d)| unit_along(d, 4, i))
                .collect();
            let neg: Vec<Vec<f32>> = dn
                .iter()
                .enumerate()
                .map(|(i, &d)| unit_along(d, 4, i))
                .collect();
            let pr: Vec<&[f32]> = pos.iter().map(|v| v.as_slice()).collect();
            let nr: Vec<&[f32]> = neg.iter().map(|v| v.as_slice()).collect();
            for f in [triplet_loss_sub, triplet_loss_global] {
                let l = f(&zero, &pr, &nr, 0.5).unwrap();
                assert!((l as f64 - expected).abs() < 1e-6, "{l} vs {expected}");
            }
        }
        assert!(triplet_loss_sub(&zero, &[], &[&zero], 0.5).is_err());
        assert!(lazy_triplet_from_distances(&[0.1], &[], 0.5).is_err());
    }

    #[test]
    fn loss_symmetric_in_negatives_and_monotone_in_hardest_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rv = || -> Vec<f32> { (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let q = rv();
        let p: Vec<Vec<f32>> = (0..3).map(|_| rv()).collect();
        let n: Vec<Vec<f32>> = (0..4).map(|_| rv()).collect();
        let pr: Vec<&[f32]> = p.iter().map(|v| v.as_slice()).collect();
        let mut nr: Vec<&[f32]> = n.iter().map(|v| v.as_slice()).collect();
        let base = triplet_loss_sub(&q, &pr, &nr, 2.0).unwrap();
        nr.reverse();
        assert_eq!(base, triplet_loss_sub(&q, &pr, &nr, 2.0).unwrap());
        // pull every positive halfway to the query
        let closer: Vec<Vec<f32>> = p
            .iter()
            .map(|v| v.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect())
            .collect();
        let cr: Vec<&[f32]> = closer.iter().map(|v| v.as_slice()).collect();
        assert!(triplet_loss_sub(&q, &cr, &nr, 2.0).unwrap() < base);
    }

    #[test]
    fn triplet_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = |r: usize| {
            Tensor::<f64>::new(
                &[r, 6],
                (0..r * 6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (q, p, n) = (t(1), t(3), t(4));
        let r = grad_check(&[q, p, n], 1e-5, |g, v| {
            g.lazy_triplet(v[0], v[1], v[2], 3.0)
        });
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Tensor::full(&[3], 0.7));
        let before = ps.clone();
        let mut adam = Adam::new(&ps);
        let mut g = GradBuffer::for_params(&ps);
        g.accumulate(id, &Tensor::zeros(&[3]));
        for _ in 0..10 {
            adam.step(&mut ps, &g, 0.1).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let mut adam = Adam::new(&ps);
        let mut g = GradBuffer::for_params(&ps);
        let grad = [0.3f32, -2.0];
        g.accumulate(id, &Tensor::new(&[2], grad.to_vec()).unwrap());
        let lr = 0.01;
        let mut prev = ps.get(id).data().to_vec();
        for _ in 0..100 {
            adam.step(&mut ps, &g, lr).unwrap();
            let cur = ps.get(id).data().to_vec();
            for k in 0..2 {
                // bias-corrected moments equal g and g^2 exactly
                let expected = -lr * grad[k] / (grad[k].abs() + 1e-8);
                assert!(((cur[k] - prev[k]) - expected).abs() < 1e-6);
            }
            prev = cur;
        }
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Tensor::zeros(&[2]));
        let mut adam = Adam::new(&ps);
        let mut g = GradBuffer::for_params(&ps);
        g.accumulate(id, &Tensor::zeros(&[3]));
        assert!(adam.step(&mut ps, &g, 0.1).is_err());
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(
            (cfg.alpha, cfg.n_pos, cfg.n_neg, cfg.lr_phase1),
            (0.5, 6, 6, 5e-6)
        );
        assert_eq!(cfg.lr_phase2, 5e-5);
        assert_eq!(cfg.lr_at(Phase::One, 4), 5e-6);
        assert!((cfg.lr_at(Phase::One, 5) - 4.5e-6).abs() < 1e-12);
        assert!((cfg.lr_at(Phase::Two, 12) - 5e-5 * 0.81).abs() < 1e-10);
    }

    #[test]
    fn fixed_tuple_loss_decreases() {
        let mut model = toy_model(3);
        let data = toy_data(&model, 16, 4);
        let mut adam = Adam::new(model.params());
        let pos = [3, 4];
        let neg = [9, 12, 15];
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses
                .push(phase1_step(&mut model, &data, 2, &pos, &neg, 0.5, &mut adam, 1e-2).unwrap());
        }
        assert!(losses[0] > 0.0);
        assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
    }

    #[test]
    fn resume_is_bit_exact() {
        let cfg = TrainConfig {
            epochs_phase1: 2,
            lr_phase1: 1e-3,
            n_pos: 2,
            n_neg: 3,
            queries_per_epoch: Some(3),
            seed: 5,
            ..TrainConfig::default()
        };
        let table = banded_table(14);
        let run_straight = || {
            let mut m = toy_model(6);
            let data = toy_data(&m, 14, 7);
            let mut st = TrainState::new(&m, Phase::One);
            let metrics =
                train_phase1(&mut m, &data, &table, &cfg, &mut st, |_, _, _| Ok(())).unwrap();
            (m, metrics)
        };
        let (a, ma) = run_straight();
        let (b, _) = run_straight();
        assert_eq!(a.params(), b.params());

        let mut m = toy_model(6);
        let data = toy_data(&m, 14, 7);
        let mut st = TrainState::new(&m, Phase::One);
        let one = TrainConfig {
            epochs_phase1: 1,
            ..cfg.clone()
        };
        train_phase1(&mut m, &data, &table, &one, &mut st, |_, _, _| Ok(())).unwrap();
        let mut bytes = Vec::new();
        checkpoint(&m, &st).write_to(&mut bytes).unwrap();
        let ck = ParamSet::read_from(&mut bytes.as_slice()).unwrap();
        let mut resumed = toy_model(99);
        let mut st2 = restore(&mut resumed, &ck).unwrap().unwrap();
        assert_eq!(st2, st);
        let rest = train_phase1(
            &mut resumed,
            &data,
            &table,
            &cfg,
            &mut st2,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(rest.len(), 1);
        assert_eq!(rest[0], ma[1]);
        assert_eq!(resumed.params(), a.params());
    }

    #[test]
    fn no_eligible_queries() {
        let mut m = toy_model(8);
        let data = toy_data(&m, 6, 9);
        let table = banded_table(6);
        let cfg = TrainConfig {
            epochs_phase1: 1,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(&m, Phase::One);
        let err = train_phase1(&mut m, &data, &table, &cfg, &mut st, |_, _, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NoEligibleQueries));
    }

    #[test]
    fn phase2_freezes_everything_but_pooling() {
        let mut model = toy_model(10);
        let data = toy_data(&model, 20, 11);
        let cache = SubDescriptorCache::compute(&model, &data).unwrap();
        assert!(cache.get(1).is_none() && cache.get(2).is_some());
        let table = banded_table(20);
        let cfg = TrainConfig {
            epochs_phase2: 3,
            lr_phase2: 0.05,
            n_pos: 2,
            n_neg: 3,
            ..TrainConfig::default()
        };
        let before = model.params().clone();
        let mut st = TrainState::new(&model, Phase::Two);
        let metrics =
            train_phase2(&mut model, &cache, &table, &cfg, &mut st, |_, _, _| Ok(())).unwrap();
        assert_eq!(metrics.len(), 3);
        let rho = model.arch().gem_rho;
        for (id, name, t) in model.params().iter() {
            if id == rho {
                assert_ne!(t, before.get(id), "rho did not move");
            } else {
                assert_eq!(t, before.get(id), "{name} changed");
            }
        }
        assert!(model.gem_p() >= 1.0);
    }

    #[test]
    fn phase2_loss_decreases_on_toy_cache() {
        // two well separated clusters; one sub-descriptor component carries
        // the signal only through its largest values, so a larger p helps
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 24;
        let subs: Vec<Option<Descriptor>> = (0..n)
            .map(|i| {
                let mut v: Vec<f32> = (0..DESCRIPTOR_DIM)
                    .map(|_| rng.gen_range(0.0..0.1))
                    .collect();
                if rng.gen_bool(0.3) {
                    v[(i / 12) * 7] = 1.0;
                }
                Some(v)
            })
            .collect();
        let cache = SubDescriptorCache::from_parts(subs, (0..12).chain(0..12).collect()).unwrap();
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                vals[i * n + j] = if i == j {
                    1.0
                } else if i / 12 == j / 12 {
                    0.8
                } else {
                    0.0
                };
            }
        }
        let table = OverlapTable::from_values(n, 1.0, 0.3, vals).unwrap();
        let cfg_model = ModelConfig {
            seq_len_m: 4,
            gem_p_init: 1.5,
            ..toy_model(0).config().clone()
        };
        let mut model = SeqOt::new(cfg_model, 8, 12, 13).unwrap();
        let cfg = TrainConfig {
            epochs_phase2: 15,
            lr_phase2: 0.1,
            n_pos: 2,
            n_neg: 4,
            alpha: 1.0,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(&model, Phase::Two);
        let m = train_phase2(&mut model, &cache, &table, &cfg, &mut st, |_, _, _| Ok(())).unwrap();
        assert!(m.last().unwrap().mean_loss < m[0].mean_loss, "{m:?}");
    }

    #[test]
    fn missing_cache_entry() {
        let cache = SubDescriptorCache::from_parts(
            vec![None, None, Some(vec![0.0; 4]), None],
            vec![0, 1, 2, 3],
        )
        .unwrap();
        assert!(matches!(cache.sequence(3, 3), Err(Error::MissingCache(3))));
        assert!(matches!(
            cache.sequence(1, 3),
            Err(Error::SequenceTooShort { .. })
        ));
    }
}
