//! Subcommand implementations. Each reads its inputs from the artifact
//! directory, writes fixed-name outputs and a run manifest.

use std::fs;
use std::io::Write;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use seqplace::datasets::Split;
use seqplace::model::{Descriptor, SeqOt, StreamOutput, StreamState, DESCRIPTOR_DIM};
use seqplace::nn::ParamSet;
use seqplace::overlap::{build_pair_labels, OverlapTable};
use seqplace::rangeproj::{project, RangeImage, SensorModel};
use seqplace::retrieval::{
    pr_from_ranks, rank_queries, recall_from_ranks, DescriptorIndex, QueryResult, Truth,
};
use seqplace::training::{
    checkpoint, derive_seed, init_vlad_from_data, restore, train_phase1, train_phase2,
    EpochMetrics, Phase, SubDescriptorCache, TrainSet, TrainState,
};
use serde::Serialize;

use crate::artifacts::{
    open_input, sha256_file, sha256_hex, write_atomic, write_json, Layout, Recorder,
};
use crate::config::{Dataset, RunConfig};
use crate::suite;
use crate::{Cli, CliError, Command};

/// Reference parameter count printed next to ours by `bench`.
pub const REFERENCE_PARAM_COUNT: f64 = 12.82e6;

const MODEL_INIT_TAG: u64 = 0x6d6f_6465;
const VLAD_INIT_TAG: u64 = 0x766c_6164;
const BENCH_INDEX_TAG: u64 = 0x6265_6e63;

struct Ctx<'a> {
    cfg: RunConfig,
    data: Dataset,
    layout: Layout,
    rec: Recorder,
    argv: &'a [String],
    workers: usize,
}

impl Ctx<'_> {
    fn sensor(&self) -> SensorModel {
        self.cfg.sensor.expect("resolved")
    }

    fn n(&self) -> usize {
        self.data.manifest.scans.len()
    }
}

pub fn execute(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))?;
    let layout = Layout::new(&cli.out);
    let name = cli.command.name();
    let start = Instant::now();
    pool.install(|| {
        if let Command::Selftest = cli.command {
            let r = selftest();
            let rec = Recorder::new(&layout, name);
            rec.finish(argv, &cfg, "", workers)?;
            return r;
        }
        let data = cfg.resolve()?;
        let mut ctx = Ctx {
            cfg,
            data,
            rec: Recorder::new(&layout, name),
            layout,
            argv,
            workers,
        };
        match &cli.command {
            Command::Project => cmd_project(&mut ctx)?,
            Command::Label => cmd_label(&mut ctx)?,
            Command::Train { phase: 1, resume } => cmd_train1(&mut ctx, *resume)?,
            Command::Train { resume, .. } => cmd_train2(&mut ctx, *resume)?,
            Command::Describe { stream } => cmd_describe(&mut ctx, *stream)?,
            Command::Index => cmd_index(&mut ctx)?,
            Command::Query { top_k } => cmd_query(&mut ctx, *top_k)?,
            Command::Eval => cmd_eval(&mut ctx)?,
            Command::Bench { index_size, scans } => cmd_bench(&mut ctx, *index_size, *scans)?,
            Command::Selftest => unreachable!(),
        }
        let dataset_json =
            serde_json::to_vec(&ctx.data.manifest).map_err(|e| CliError::data("dataset", e))?;
        let manifest =
            ctx.rec
                .finish(ctx.argv, &ctx.cfg, &sha256_hex(&dataset_json), ctx.workers)?;
        info!(
            "{name} done in {:.1}s; manifest {}",
            start.elapsed().as_secs_f64(),
            manifest.display()
        );
        Ok(())
    })
}

fn selftest() -> Result<(), CliError> {
    let checks = suite::run_suite();
    let mut failed = Vec::new();
    for c in &checks {
        println!("{c}");
        if !c.passed {
            failed.push(c.name.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Selftest(failed.join(", ")))
    }
}

fn cmd_project(ctx: &mut Ctx) -> Result<(), CliError> {
    let dir = ctx.layout.images_dir();
    if dir.exists() {
        for e in fs::read_dir(&dir)
            .map_err(|e| CliError::data(dir.display(), e))?
            .flatten()
        {
            if e.path().extension().is_some_and(|x| x == "sqri") {
                fs::remove_file(e.path()).map_err(|err| CliError::data(e.path().display(), err))?;
            }
        }
    }
    let m = &ctx.data.manifest;
    let world = m
        .world()
        .map_err(|e| CliError::data("synthetic world", e))?;
    let sensor = ctx.sensor();
    (0..m.scans.len()).into_par_iter().try_for_each(|i| {
        let cloud = m
            .cloud(i, &ctx.data.base, world.as_ref())
            .map_err(|e| CliError::data(format!("scan {}", m.scans[i].index), e))?;
        let img = project(&cloud, &sensor)
            .map_err(|e| CliError::data(format!("scan {}", m.scans[i].index), e))?;
        write_atomic(&ctx.layout.image(i), |w| img.write_to(w))
    })?;
    write_json(&ctx.layout.dataset(), m)?;
    info!("projected {} scans to {}", m.scans.len(), dir.display());
    ctx.rec.output(dir);
    ctx.rec.output(ctx.layout.dataset());
    Ok(())
}

fn cmd_label(ctx: &mut Ctx) -> Result<(), CliError> {
    let m = &ctx.data.manifest;
    let clouds = m
        .clouds(&ctx.data.base)
        .map_err(|e| CliError::data("scans", e))?;
    let poses = m.poses().map_err(|e| CliError::data("poses", e))?;
    let t = Instant::now();
    let table = build_pair_labels(
        &clouds,
        &poses,
        &ctx.sensor(),
        &ctx.cfg.overlap.label_params(),
    )
    .map_err(|e| CliError::data("overlap labels", e))?;
    let positives = table
        .values()
        .iter()
        .filter(|&&v| v > table.pos_threshold())
        .count()
        - table.len();
    info!(
        "labelled {} pairs in {:.1}s; {positives} positive off-diagonal entries",
        table.len() * table.len(),
        t.elapsed().as_secs_f64()
    );
    write_atomic(&ctx.layout.overlap(), |w| table.write_to(w))?;
    ctx.rec.output(ctx.layout.overlap());
    Ok(())
}

fn load_images(ctx: &mut Ctx) -> Result<Vec<RangeImage>, CliError> {
    let sensor = ctx.sensor();
    let images = (0..ctx.n())
        .into_par_iter()
        .map(|i| {
            let p = ctx.layout.image(i);
            let img = RangeImage::read_from(&mut open_input(&p, "project")?)
                .map_err(|e| CliError::data(p.display(), e))?;
            if img.shape() != (sensor.height, sensor.width) {
                return Err(CliError::data(
                    p.display(),
                    seqplace::Error::ShapeMismatch {
                        expected: format!("{}x{} image", sensor.height, sensor.width),
                        found: format!("{:?}", img.shape()),
                    },
                ));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    ctx.rec.input(ctx.layout.images_dir());
    Ok(images)
}

fn load_table(ctx: &mut Ctx) -> Result<OverlapTable, CliError> {
    let p = ctx.layout.overlap();
    let table = OverlapTable::read_from(&mut open_input(&p, "label")?)
        .map_err(|e| CliError::data(p.display(), e))?;
    if table.len() != ctx.n() {
        return Err(CliError::data(
            p.display(),
            seqplace::Error::LengthMismatch(format!(
                "table over {} scans, dataset has {}",
                table.len(),
                ctx.n()
            )),
        ));
    }
    ctx.rec.input(p);
    Ok(table)
}

fn load_params(
    ctx: &mut Ctx,
    path: std::path::PathBuf,
    producer: &str,
) -> Result<ParamSet<f32>, CliError> {
    let ps = ParamSet::read_from(&mut open_input(&path, producer)?)
        .map_err(|e| CliError::data(path.display(), e))?;
    ctx.rec.input(path);
    Ok(ps)
}

fn fresh_model(ctx: &Ctx) -> Result<SeqOt, CliError> {
    let s = ctx.sensor();
    SeqOt::new(
        ctx.cfg.model.clone(),
        s.height,
        s.width,
        derive_seed(ctx.cfg.train.seed, &[MODEL_INIT_TAG]),
    )
    .map_err(|e| CliError::Usage(format!("model does not fit the sensor: {e}")))
}

fn trained_model(ctx: &mut Ctx) -> Result<SeqOt, CliError> {
    let mut model = fresh_model(ctx)?;
    let path = ctx.layout.model();
    let ps = load_params(ctx, path.clone(), "train")?;
    model
        .load_params(&ps)
        .map_err(|e| CliError::data(path.display(), e))?;
    Ok(model)
}

/// Restricts a table to the rows and columns in `keep`.
fn sub_table(table: &OverlapTable, keep: &[usize]) -> seqplace::Result<OverlapTable> {
    let values = keep
        .iter()
        .flat_map(|&i| keep.iter().map(move |&j| table.get(i, j)))
        .collect();
    OverlapTable::from_values(keep.len(), table.delta(), table.pos_threshold(), values)
}

/// Training data: the database traversal and its overlap labels.
fn training_split(ctx: &mut Ctx, model: &SeqOt) -> Result<(TrainSet, OverlapTable), CliError> {
    let images = load_images(ctx)?;
    let table = load_table(ctx)?;
    let m = &ctx.data.manifest;
    let db = m.indices_of(Split::Database);
    if db.is_empty() {
        return Err(CliError::data(
            "dataset",
            seqplace::Error::Empty("database split"),
        ));
    }
    let imgs: Vec<RangeImage> = db.iter().map(|&i| images[i].clone()).collect();
    let pass: Vec<usize> = db.iter().map(|&i| m.scans[i].pass_pos).collect();
    let data =
        TrainSet::new(model, &imgs, pass).map_err(|e| CliError::data("training images", e))?;
    let sub = sub_table(&table, &db).map_err(|e| CliError::data("overlap table", e))?;
    Ok((data, sub))
}

fn resume_state(
    ctx: &mut Ctx,
    model: &mut SeqOt,
    phase: u8,
) -> Result<Option<TrainState>, CliError> {
    let path = ctx.layout.checkpoint(phase);
    if !path.exists() {
        return Ok(None);
    }
    let ck = load_params(ctx, path.clone(), "train")?;
    let state = restore(model, &ck)
        .map_err(|e| CliError::data(path.display(), e))?
        .ok_or_else(|| {
            CliError::data(
                path.display(),
                seqplace::Error::Format("no training state".into()),
            )
        })?;
    info!("resuming phase {phase} at epoch {}", state.epoch);
    Ok(Some(state))
}

fn epoch_writer(
    ctx: &Ctx,
    phase: u8,
    resume: bool,
) -> Result<impl FnMut(&SeqOt, &TrainState, &EpochMetrics) -> seqplace::Result<()>, CliError> {
    let ck = ctx.layout.checkpoint(phase);
    let metrics = ctx.layout.metrics(phase);
    crate::artifacts::create_parent(&metrics)?;
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&metrics)
        .map_err(|e| CliError::data(metrics.display(), e))?;
    let mut file = std::io::BufWriter::new(file);
    Ok(move |model: &SeqOt, state: &TrainState, m: &EpochMetrics| {
        let tmp = ck.with_extension("partial");
        {
            let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
            checkpoint(model, state).write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, &ck)?;
        serde_json::to_writer(&mut file, m)?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    })
}

fn finish_training(ctx: &mut Ctx, model: &SeqOt, phase: u8) -> Result<(), CliError> {
    for p in [ctx.layout.phase_model(phase), ctx.layout.model()] {
        write_atomic(&p, |w| model.params().write_to(w))?;
        ctx.rec.output(p);
    }
    ctx.rec.output(ctx.layout.checkpoint(phase));
    ctx.rec.output(ctx.layout.metrics(phase));
    Ok(())
}

fn cmd_train1(ctx: &mut Ctx, resume: bool) -> Result<(), CliError> {
    let mut model = fresh_model(ctx)?;
    let (data, table) = training_split(ctx, &model)?;
    let resumed = if resume {
        resume_state(ctx, &mut model, 1)?
    } else {
        None
    };
    let resuming = resumed.is_some();
    let mut state = match resumed {
        Some(s) => s,
        None => {
            let windows = ctx.cfg.train.vlad_init_windows;
            if windows > 0 {
                init_vlad_from_data(
                    &mut model,
                    &data,
                    windows,
                    derive_seed(ctx.cfg.train.seed, &[VLAD_INIT_TAG]),
                )
                .map_err(|e| CliError::data("NetVLAD initialisation", e))?;
            }
            TrainState::new(&model, Phase::One)
        }
    };
    info!(
        "phase 1: {} parameters, {} training scans, {} epochs",
        model.param_count(),
        data.len(),
        ctx.cfg.train.epochs_phase1
    );
    let on_epoch = epoch_writer(ctx, 1, resuming)?;
    train_phase1(
        &mut model,
        &data,
        &table,
        &ctx.cfg.train,
        &mut state,
        on_epoch,
    )
    .map_err(|e| CliError::data("phase 1", e))?;
    finish_training(ctx, &model, 1)
}

fn cmd_train2(ctx: &mut Ctx, resume: bool) -> Result<(), CliError> {
    let mut model = fresh_model(ctx)?;
    let p1 = ctx.layout.phase_model(1);
    let ps = load_params(ctx, p1.clone(), "train --phase 1")?;
    model
        .load_params(&ps)
        .map_err(|e| CliError::data(p1.display(), e))?;
    let (data, table) = training_split(ctx, &model)?;
    let cache = SubDescriptorCache::compute(&model, &data)
        .map_err(|e| CliError::data("sub-descriptors", e))?;
    let resumed = if resume {
        resume_state(ctx, &mut model, 2)?
    } else {
        None
    };
    let resuming = resumed.is_some();
    let mut state = resumed.unwrap_or_else(|| TrainState::new(&model, Phase::Two));
    let on_epoch = epoch_writer(ctx, 2, resuming)?;
    train_phase2(
        &mut model,
        &cache,
        &table,
        &ctx.cfg.train,
        &mut state,
        on_epoch,
    )
    .map_err(|e| CliError::data("phase 2", e))?;
    info!("phase 2 done; GeM exponent {:.4}", model.gem_p());
    finish_training(ctx, &model, 2)
}

/// Global descriptors for every scan that ends a full sequence, keyed by
/// manifest position.
fn describe_batch(
    model: &SeqOt,
    images: &[RangeImage],
    pass: Vec<usize>,
) -> seqplace::Result<Vec<(u64, Descriptor)>> {
    let data = TrainSet::new(model, images, pass)?;
    let cache = SubDescriptorCache::compute(model, &data)?;
    let anchors = cache.anchors(model.config().seq_len_m);
    (0..images.len())
        .into_par_iter()
        .filter(|&i| anchors[i])
        .map(|i| Ok((i as u64, cache.global(model, i)?)))
        .collect()
}

fn describe_stream(
    model: &SeqOt,
    images: &[RangeImage],
    pass: &[usize],
) -> seqplace::Result<Vec<(u64, Descriptor)>> {
    let m = model.config().seq_len_m;
    let mut out = Vec::new();
    let mut state = StreamState::new(model.config());
    for (i, img) in images.iter().enumerate() {
        if pass[i] == 0 {
            state = StreamState::new(model.config());
        }
        // the stream pools whatever it has; only full sequences are kept
        if let StreamOutput::Descriptor(d) = state.update(model, i as u64, img)? {
            if pass[i] + 1 >= m {
                out.push((i as u64, d));
            }
        }
    }
    Ok(out)
}

fn cmd_describe(ctx: &mut Ctx, stream: bool) -> Result<(), CliError> {
    let model = trained_model(ctx)?;
    let images = load_images(ctx)?;
    let pass = ctx.data.manifest.pass_pos();
    let t = Instant::now();
    let rows = if stream {
        describe_stream(&model, &images, &pass)
    } else {
        describe_batch(&model, &images, pass)
    }
    .map_err(|e| CliError::data("descriptors", e))?;
    info!(
        "{} descriptors in {:.1}s ({})",
        rows.len(),
        t.elapsed().as_secs_f64(),
        if stream { "stream" } else { "batch" }
    );
    let index = DescriptorIndex::build(rows).map_err(|e| CliError::data("descriptors", e))?;
    write_atomic(&ctx.layout.descriptors(), |w| index.write_to(w))?;
    ctx.rec.output(ctx.layout.descriptors());
    Ok(())
}

fn load_index(
    ctx: &mut Ctx,
    path: std::path::PathBuf,
    producer: &str,
) -> Result<DescriptorIndex, CliError> {
    let idx = DescriptorIndex::read_from(&mut open_input(&path, producer)?)
        .map_err(|e| CliError::data(path.display(), e))?;
    if idx.ids().iter().any(|&id| id as usize >= ctx.n()) {
        return Err(CliError::data(
            path.display(),
            seqplace::Error::Format("descriptor ids exceed the dataset".into()),
        ));
    }
    ctx.rec.input(path);
    Ok(idx)
}

fn rows_in_split<'a>(ctx: &Ctx, desc: &'a DescriptorIndex, split: Split) -> Vec<(u64, &'a [f32])> {
    (0..desc.len())
        .filter(|&r| ctx.data.manifest.scans[desc.ids()[r] as usize].split == split)
        .map(|r| (desc.ids()[r], desc.row(r)))
        .collect()
}

#[derive(Serialize)]
struct IndexMetaJson {
    entries: usize,
    dim: usize,
    model_sha256: String,
    descriptors_sha256: String,
}

fn cmd_index(ctx: &mut Ctx) -> Result<(), CliError> {
    let desc = load_index(ctx, ctx.layout.descriptors(), "describe")?;
    let rows = rows_in_split(ctx, &desc, Split::Database);
    let index =
        DescriptorIndex::build(rows).map_err(|e| CliError::data("database descriptors", e))?;
    write_atomic(&ctx.layout.index(), |w| index.write_to(w))?;
    let meta = IndexMetaJson {
        entries: index.len(),
        dim: index.dim(),
        model_sha256: sha256_file(&ctx.layout.model())?,
        descriptors_sha256: sha256_file(&ctx.layout.descriptors())?,
    };
    write_json(&ctx.layout.index_meta(), &meta)?;
    info!("indexed {} database sequences", index.len());
    ctx.rec.output(ctx.layout.index());
    ctx.rec.output(ctx.layout.index_meta());
    Ok(())
}

#[derive(Serialize)]
struct QueryOut {
    query: u64,
    hits: Vec<seqplace::retrieval::Hit>,
}

fn cmd_query(ctx: &mut Ctx, top_k: usize) -> Result<(), CliError> {
    if top_k == 0 {
        return Err(CliError::Usage("--top-k must be at least 1".into()));
    }
    let index = load_index(ctx, ctx.layout.index(), "index")?;
    let desc = load_index(ctx, ctx.layout.descriptors(), "describe")?;
    let queries = rows_in_split(ctx, &desc, Split::Query);
    let out: Vec<QueryOut> = queries
        .par_iter()
        .map(|&(q, d)| {
            Ok(QueryOut {
                query: q,
                hits: index.query_top_k(d, top_k)?,
            })
        })
        .collect::<seqplace::Result<_>>()
        .map_err(|e| CliError::data("query", e))?;
    write_json(&ctx.layout.queries(), &out)?;
    info!("answered {} queries", out.len());
    ctx.rec.output(ctx.layout.queries());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentReport {
    pub queries: usize,
    pub evaluated: usize,
    /// `(N, AR@N)`; `None` when no query had a true match.
    pub ar: Vec<(usize, Option<f64>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOut {
    pub ar1: Option<f64>,
    pub ar5: Option<f64>,
    pub ar20: Option<f64>,
    pub ar: Vec<(usize, Option<f64>)>,
    pub evaluated_queries: usize,
    pub excluded_queries: usize,
    pub f1_max: f64,
    /// Queries whose whole sequence was driven with the database direction
    /// or against it.
    pub forward: SegmentReport,
    pub reversed: SegmentReport,
    pub pr: Vec<[f64; 3]>,
    pub queries: Vec<QueryResult>,
}

fn segment(results: &[&QueryResult], ns: &[usize]) -> SegmentReport {
    let owned: Vec<QueryResult> = results.iter().map(|r| (*r).clone()).collect();
    SegmentReport {
        queries: owned.len(),
        evaluated: recall_from_ranks(&owned, 1).evaluated,
        ar: ns
            .iter()
            .map(|&n| (n, recall_from_ranks(&owned, n).recall))
            .collect(),
    }
}

fn cmd_eval(ctx: &mut Ctx) -> Result<(), CliError> {
    let index = load_index(ctx, ctx.layout.index(), "index")?;
    let desc = load_index(ctx, ctx.layout.descriptors(), "describe")?;
    let table = load_table(ctx)?;
    let truth = Truth::new(&table);
    let queries: Vec<(u64, &[f32])> = rows_in_split(ctx, &desc, Split::Query)
        .into_iter()
        .step_by(ctx.cfg.eval.query_stride)
        .collect();
    let mut ns = ctx.cfg.eval.recall_at.clone();
    ns.extend([1, 5, 20]);
    ns.sort_unstable();
    ns.dedup();
    let k = *ns.last().expect("non-empty");
    let ranked =
        rank_queries(&queries, &index, &truth, k).map_err(|e| CliError::data("eval", e))?;
    let pr = pr_from_ranks(&ranked, &truth, None).map_err(|e| CliError::data("eval", e))?;
    let at = |n: usize| recall_from_ranks(&ranked, n);
    let m = ctx.cfg.model.seq_len_m;
    let scans = &ctx.data.manifest.scans;
    let span = |q: u64| (q as usize + 1).saturating_sub(m)..=q as usize;
    let fwd: Vec<&QueryResult> = ranked
        .iter()
        .filter(|r| span(r.query).all(|i| !scans[i].reversed))
        .collect();
    let rev: Vec<&QueryResult> = ranked
        .iter()
        .filter(|r| span(r.query).all(|i| scans[i].reversed))
        .collect();
    let report_ns: Vec<usize> = ctx.cfg.eval.recall_at.clone();
    let out = EvalOut {
        ar1: at(1).recall,
        ar5: at(5).recall,
        ar20: at(20).recall,
        ar: report_ns.iter().map(|&n| (n, at(n).recall)).collect(),
        evaluated_queries: at(1).evaluated,
        excluded_queries: at(1).excluded,
        f1_max: pr.f1_max,
        forward: segment(&fwd, &report_ns),
        reversed: segment(&rev, &report_ns),
        pr: pr.points.clone(),
        queries: ranked.clone(),
    };
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "AR@1 {}  AR@5 {}  AR@20 {}  F1max {:.4}  ({} queries, {} without a true match)",
        fmt(out.ar1),
        fmt(out.ar5),
        fmt(out.ar20),
        out.f1_max,
        out.evaluated_queries,
        out.excluded_queries
    );
    println!(
        "forward AR@1 {} ({} queries)  reversed AR@1 {} ({} queries)",
        fmt(out.forward.ar[0].1),
        out.forward.evaluated,
        fmt(out.reversed.ar[0].1),
        out.reversed.evaluated
    );
    write_json(&ctx.layout.eval(), &out)?;
    let mut csv = String::from("threshold,precision,recall\n");
    for p in &out.pr {
        csv.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
    }
    write_atomic(&ctx.layout.pr_csv(), |w| Ok(w.write_all(csv.as_bytes())?))?;
    ctx.rec.output(ctx.layout.eval());
    ctx.rec.output(ctx.layout.pr_csv());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOut {
    pub scans_timed: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub index_size: usize,
    pub top_k: usize,
    pub param_count: usize,
    pub reference_param_count: f64,
    pub trained_weights: bool,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn cmd_bench(ctx: &mut Ctx, index_size: usize, scans: usize) -> Result<(), CliError> {
    let m = ctx.cfg.model.seq_len_m;
    if index_size == 0 || scans < m {
        return Err(CliError::Usage(format!(
            "bench needs --index-size >= 1 and --scans >= {m}"
        )));
    }
    let trained = ctx.layout.model().exists();
    let model = if trained {
        trained_model(ctx)?
    } else {
        fresh_model(ctx)?
    };
    // one traversal, in order
    let man = &ctx.data.manifest;
    let order: Vec<usize> = {
        let start = man.scans.iter().position(|s| s.pass_pos == 0).unwrap_or(0);
        (start..man.scans.len())
            .take_while(|&i| i == start || man.scans[i].pass_pos != 0)
            .take(scans)
            .collect()
    };
    if order.len() < m {
        return Err(CliError::data(
            "bench",
            seqplace::Error::SequenceTooShort {
                got: order.len(),
                min: m,
            },
        ));
    }
    let sensor = ctx.sensor();
    let images: Vec<RangeImage> = if ctx.layout.image(order[order.len() - 1]).exists() {
        let all = load_images(ctx)?;
        order.iter().map(|&i| all[i].clone()).collect()
    } else {
        let world = man
            .world()
            .map_err(|e| CliError::data("synthetic world", e))?;
        order
            .par_iter()
            .map(|&i| {
                let c = man.cloud(i, &ctx.data.base, world.as_ref())?;
                project(&c, &sensor)
            })
            .collect::<seqplace::Result<_>>()
            .map_err(|e| CliError::data("bench scans", e))?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.cfg.train.seed, &[BENCH_INDEX_TAG]));
    let rows: Vec<(u64, Vec<f32>)> = (0..index_size)
        .map(|i| {
            let v: Vec<f32> = (0..DESCRIPTOR_DIM)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            (i as u64, v.into_iter().map(|x| x / n).collect())
        })
        .collect();
    let index = DescriptorIndex::build(rows).map_err(|e| CliError::data("bench index", e))?;
    let mut state = StreamState::new(model.config());
    let mut times = Vec::new();
    for (t, img) in images.iter().enumerate() {
        let start = Instant::now();
        let out = state
            .update(&model, t as u64, img)
            .map_err(|e| CliError::data("bench", e))?;
        if let StreamOutput::Descriptor(d) = out {
            let hits = index
                .query_top_k(&d, 20)
                .map_err(|e| CliError::data("bench", e))?;
            std::hint::black_box(hits);
            if t + 1 >= m {
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let out = BenchOut {
        scans_timed: times.len(),
        median_ms: percentile(&sorted, 0.5),
        p90_ms: percentile(&sorted, 0.9),
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        max_ms: sorted[sorted.len() - 1],
        index_size,
        top_k: 20,
        param_count: model.param_count(),
        reference_param_count: REFERENCE_PARAM_COUNT,
        trained_weights: trained,
    };
    println!(
        "per-scan stream + top-20 over {index_size}: median {:.2} ms, p90 {:.2} ms; {} parameters ({:.2} M; reference {:.2} M)",
        out.median_ms,
        out.p90_ms,
        out.param_count,
        out.param_count as f64 / 1e6,
        REFERENCE_PARAM_COUNT / 1e6
    );
    write_json(&ctx.layout.bench(), &out)?;
    ctx.rec.output(ctx.layout.bench());
    Ok(())
}
