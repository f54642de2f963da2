use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lago::calibrate::CachedImage;
use lago::features::BUNDLE_EXTENSION;
use lago::search::search_top_k_crops;
use lago::synth::{self, SceneSpec, SuiteParams};
use lago::{
    brute_force_best_box, classify_with_strategy, load_bundle, make_scene, run_two_stage,
    save_bundle, BoundingBox, CalibrationGrid, FeatureBundle, InferenceResult, LagoError,
    ScoreCache, ScoredCrop, Strategy,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

/// A result that breaks an engine guarantee; reported with exit code 2.
#[derive(Debug)]
pub struct Invariant(pub String);

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invariant violated: {}", self.0)
    }
}

impl std::error::Error for Invariant {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invariant>().is_some() {
        return 2;
    }
    match e.downcast_ref::<LagoError>() {
        Some(LagoError::DegenerateVector(_)) | Some(LagoError::DimensionMismatch { .. }) => 2,
        _ => 1,
    }
}

/// Sizes the worker pool from `LAGO_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LAGO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("LAGO_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        bail!("LAGO_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker pool")
}

pub fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    lambda: Option<f64>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    if let Some(l) = lambda {
        cfg.pipeline.aggregation.lambda = l;
    }
    cfg.pipeline.validate()?;
    Ok(cfg)
}

pub enum SuitePreset {
    Benchmark,
    Search,
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

pub fn suite(preset: SuitePreset, count: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let (params, n, s) = match preset {
        SuitePreset::Benchmark => (
            SuiteParams::benchmark(),
            synth::BENCHMARK_SIZE,
            synth::BENCHMARK_SEED,
        ),
        SuitePreset::Search => (
            SuiteParams::search_quality(),
            synth::SEARCH_QUALITY_SIZE,
            synth::SEARCH_QUALITY_SEED,
        ),
    };
    let specs = synth::random_suite(&params, count.unwrap_or(n), seed.unwrap_or(s));
    let text = serde_json::to_string_pretty(&specs)?;
    create_parent(out)?;
    fs::write(out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} scene specs to {}", specs.len(), out.display());
    Ok(())
}

pub fn synth(suite: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(suite).with_context(|| format!("reading suite {}", suite.display()))?;
    let specs: Vec<SceneSpec> =
        serde_json::from_str(&text).with_context(|| format!("parsing suite {}", suite.display()))?;
    if specs.is_empty() {
        eprintln!("warning: suite {} is empty; nothing written", suite.display());
        return Ok(());
    }
    let mut ids = HashSet::new();
    for s in &specs {
        if !ids.insert(s.image_id()) {
            bail!("duplicate image id {:?} in suite", s.image_id());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    specs.par_iter().try_for_each(|s| -> Result<()> {
        let bundle = make_scene(s).with_context(|| format!("scene {}", s.image_id()))?;
        let path = out.join(format!("{}.{BUNDLE_EXTENSION}", bundle.image_id));
        save_bundle(&bundle, &path)?;
        Ok(())
    })?;
    println!("wrote {} bundles to {}", specs.len(), out.display());
    Ok(())
}

/// Loads every bundle in `dir`, ordered by image id.
pub fn load_bundles(dir: &Path) -> Result<Vec<FeatureBundle>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading bundle directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == BUNDLE_EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .{BUNDLE_EXTENSION} bundles in {}", dir.display());
    }
    let mut bundles = paths
        .par_iter()
        .map(|p| load_bundle(p).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    bundles.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(w) = bundles.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        bail!("duplicate image id {:?} in {}", w[0].image_id, dir.display());
    }
    Ok(bundles)
}

fn check(r: &InferenceResult, views: usize, classes: usize) -> Result<()> {
    let fail = |m: String| Err(Invariant(format!("{}: {m}", r.image_id)).into());
    if r.z_final.len() != classes || r.z_final.iter().any(|z| !z.is_finite()) {
        return fail("final logits are not a finite class vector".into());
    }
    if r.views.len() != views {
        return fail(format!("{} view slots, expected {views}", r.views.len()));
    }
    for ch in [&r.object, &r.context] {
        let sum: f64 = ch.weights.iter().sum();
        if !ch.is_empty() && (sum - 1.0).abs() > 1e-9 {
            return fail(format!("channel weights sum to {sum}"));
        }
    }
    Ok(())
}

fn classify_all(bundles: &[FeatureBundle], cfg: &RunConfig, strategy: Strategy) -> Result<Vec<InferenceResult>> {
    let views = cfg.pipeline.aggregation.views;
    bundles
        .par_iter()
        .map(|b| {
            let r = classify_with_strategy(b, &cfg.pipeline, strategy, cfg.rng_seed)
                .with_context(|| format!("classifying {}", b.image_id))?;
            check(&r, views, b.num_classes())?;
            Ok(r)
        })
        .collect()
}

fn fmt_f64(v: f64) -> String {
    v.to_string()
}

#[derive(Serialize)]
struct CropRecord {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    s_visual: f64,
    s_text: Option<f64>,
    s_combined: f64,
}

impl From<&ScoredCrop> for CropRecord {
    fn from(c: &ScoredCrop) -> Self {
        CropRecord {
            x: c.bbox.x,
            y: c.bbox.y,
            w: c.bbox.w,
            h: c.bbox.h,
            s_visual: c.s_visual,
            s_text: c.s_text,
            s_combined: c.s_combined,
        }
    }
}

#[derive(Serialize)]
struct ImageCrops {
    confidence: f64,
    gamma: f64,
    stage_one: Vec<CropRecord>,
    ranked: Vec<CropRecord>,
    context: Vec<CropRecord>,
}

pub fn run(
    bundles_dir: &Path,
    cfg: &RunConfig,
    out: &Path,
    crops: Option<&Path>,
    cache_out: Option<&Path>,
) -> Result<()> {
    let bundles = load_bundles(bundles_dir)?;
    let results = classify_all(&bundles, cfg, Strategy::Lago)?;
    let classes = bundles[0].num_classes();
    if bundles.iter().any(|b| b.num_classes() != classes) {
        bail!("bundles in {} disagree on the class count", bundles_dir.display());
    }

    create_parent(out)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    let mut header: Vec<String> = ["image_id", "predicted", "ground_truth", "full_predicted", "confidence", "gamma"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..classes).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for r in &results {
        let mut row = vec![
            r.image_id.clone(),
            r.predicted.to_string(),
            r.ground_truth.map(|g| g.to_string()).unwrap_or_default(),
            r.full_predicted.to_string(),
            fmt_f64(r.confidence),
            fmt_f64(r.gamma),
        ];
        row.extend(r.z_final.iter().map(|&z| fmt_f64(z)));
        w.write_record(&row)?;
    }
    w.flush()?;

    if let Some(path) = crops {
        let map: BTreeMap<&str, ImageCrops> = results
            .iter()
            .map(|r| {
                let context = r.channels.context.iter().map(|&i| (&r.views.views[i]).into()).collect();
                (
                    r.image_id.as_str(),
                    ImageCrops {
                        confidence: r.confidence,
                        gamma: r.gamma,
                        stage_one: r.stage_one.iter().map(Into::into).collect(),
                        ranked: r.ranked.iter().map(Into::into).collect(),
                        context,
                    },
                )
            })
            .collect();
        create_parent(path)?;
        fs::write(path, serde_json::to_string_pretty(&map)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }

    if let Some(dir) = cache_out {
        let agg = &cfg.pipeline.aggregation;
        let images = results
            .iter()
            .map(|r| CachedImage::from_result(r, agg.tau_v, agg.tau_t))
            .collect::<lago::Result<Vec<_>>>()?;
        ScoreCache { images }.save_dir(dir)?;
    }

    let labelled: Vec<bool> = results.iter().filter_map(|r| r.is_correct()).collect();
    if labelled.is_empty() {
        println!("classified {} images", results.len());
    } else {
        let acc = labelled.iter().filter(|c| **c).count() as f64 / labelled.len() as f64;
        println!("classified {} images, accuracy {acc}", results.len());
    }
    Ok(())
}

/// Fraction of labelled results classified correctly.
pub fn accuracy(results: &[InferenceResult]) -> Option<f64> {
    let labelled: Vec<bool> = results.iter().filter_map(|r| r.is_correct()).collect();
    if labelled.is_empty() {
        return None;
    }
    Some(labelled.iter().filter(|c| **c).count() as f64 / labelled.len() as f64)
}

pub fn sweep(bundles_dir: &Path, budgets: &[usize], cfg: &RunConfig, out: &Path) -> Result<()> {
    if budgets.is_empty() {
        bail!("no budgets given");
    }
    let bundles = load_bundles(bundles_dir)?;
    create_parent(out)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["budget", "strategy", "accuracy"])?;
    for &v in budgets {
        let mut c = *cfg;
        c.pipeline.aggregation.views = v;
        c.pipeline.validate()?;
        for strategy in [Strategy::Lago, Strategy::Random] {
            let results = classify_all(&bundles, &c, strategy)?;
            let acc = accuracy(&results)
                .with_context(|| format!("no labelled bundles in {}", bundles_dir.display()))?;
            w.write_record([v.to_string(), strategy.to_string(), fmt_f64(acc)])?;
            println!("V={v} {strategy}: {acc}");
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BoxScore {
    bbox: BoundingBox,
    score: f64,
}

#[derive(Serialize)]
struct OracleReport {
    image_id: String,
    quantize: usize,
    gamma: f64,
    min_box: f64,
    oracle: BoxScore,
    search: BoxScore,
    per_proposal: Vec<BoxScore>,
    /// `search.score / oracle.score`, absent when the oracle score is not positive.
    ratio: Option<f64>,
    /// The lattice is coarser than the patch grid, so continuous search can
    /// beat the oracle.
    coarse_lattice: bool,
}

pub fn oracle(bundle_path: &Path, q: usize, gamma: f64, cfg: &RunConfig, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        bail!("gamma must lie in [0, 1], got {gamma}");
    }
    let bundle = load_bundle(bundle_path)?;
    let two = &cfg.pipeline.two_stage;
    let w_text = run_two_stage(&bundle, two)?.stage_one.w_text;
    let best = brute_force_best_box(&bundle, Some(&w_text), gamma, q, two.search.min_box)?;
    let per_proposal = bundle
        .proposals
        .iter()
        .map(|p| {
            let crops = search_top_k_crops(&bundle, p, Some(&w_text), gamma, &two.search)?;
            let top = &crops[0];
            Ok(BoxScore { bbox: top.bbox, score: top.s_combined })
        })
        .collect::<Result<Vec<_>>>()?;
    let search = per_proposal
        .iter()
        .fold(None::<&BoxScore>, |acc, b| match acc {
            Some(a) if a.score >= b.score => Some(a),
            _ => Some(b),
        })
        .map(|b| BoxScore { bbox: b.bbox, score: b.score })
        .expect("bundles carry at least one proposal");
    let report = OracleReport {
        image_id: bundle.image_id.clone(),
        quantize: q,
        gamma,
        min_box: two.search.min_box,
        ratio: (best.s_combined > 0.0).then(|| search.score / best.s_combined),
        oracle: BoxScore { bbox: best.bbox, score: best.s_combined },
        search,
        per_proposal,
        coarse_lattice: q < bundle.grid.height().max(bundle.grid.width()),
    };
    create_parent(out)?;
    fs::write(out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    match report.ratio {
        Some(r) => println!("{}: search/oracle = {r}", report.image_id),
        None => println!("{}: oracle score is not positive", report.image_id),
    }
    if report.coarse_lattice {
        eprintln!("note: lattice 1/{q} is coarser than the patch grid; the oracle may trail the search");
    }
    Ok(())
}

pub fn calibrate(cache: &Path, beta: Vec<f64>, alpha_dc: Vec<f64>, lambda: Vec<f64>, out: &Path) -> Result<()> {
    let cache = ScoreCache::load_dir(cache)?;
    let grid = CalibrationGrid { beta, alpha_dc, lambda };
    let result = lago::grid_search(&cache, &grid)?;
    create_parent(out)?;
    fs::write(out, serde_json::to_string_pretty(&result)? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "beta={} alpha_dc={} lambda={} accuracy={}",
        result.beta, result.alpha_dc, result.lambda, result.accuracy
    );
    Ok(())
}
