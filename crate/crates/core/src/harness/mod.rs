//! Command implementations behind the CLI: scene simulation, tracking,
//! evaluation and the per-frame latency benchmark.

pub mod config;
pub mod io;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anchors::{AnchorGrid, AssignStrategy, GridConfig, DEFAULT_SCALE_MULTIPLIERS, DEFAULT_STRIDES};
use crate::detector::{ConfidenceModel, Recording, RecordingDetector, ReplayDetector, SyntheticConfig, SyntheticDetector};
use crate::generator::GeneratorConfig;
use crate::linker::{LinkConfig, SceneEmbedder};
use crate::metrics::{evaluate, MetricsReport};
use crate::motion::{BlockMatchParams, BlockMatchingProvider, FlowProvider};
use crate::pipeline::{self, Linking, PipelineOutput};
use crate::simulator::{generate, render_raster, GroundTruthScene, Layout, OracleFlow, SceneConfig, SceneError, SceneRasters};
use crate::FrameId;

pub use config::ConfigMap;

fn located(origin: &str, line: Option<usize>, msg: &str) -> String {
    match line {
        Some(l) if l > 0 => format!("{origin}:{l}: {msg}"),
        _ => format!("{origin}: {msg}"),
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad command-line usage.
    #[error("{0}")]
    Usage(String),
    #[error("{}", located(.origin, *.line, .msg))]
    Config {
        origin: String,
        line: Option<usize>,
        msg: String,
    },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed input file; `line` 0 means the whole file.
    #[error("{}", located(&.path.display().to_string(), Some(*.line), .msg))]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Run(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for usage errors, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            _ => 2,
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Run(e.to_string())
}

fn required<T: std::str::FromStr>(c: &ConfigMap, key: &str) -> Result<T, HarnessError> {
    c.get(key)?.ok_or_else(|| c.reject(key, "required but not set"))
}

/// Attributes a module validation message (which starts with the field
/// name) to the matching `section.field` key.
fn section_err(c: &ConfigMap, section: &str, msg: String) -> HarnessError {
    let field = msg.split_whitespace().next().unwrap_or("");
    let key = format!("{section}.{field}");
    if config::KNOWN_KEYS.contains(&key.as_str()) {
        c.reject(&key, msg)
    } else {
        c.reject(section, msg)
    }
}

fn scene_err(c: &ConfigMap, e: SceneError) -> HarnessError {
    match e {
        SceneError::Config { field, msg } => c.reject(&format!("scene.{field}"), msg),
        other => run_err(other),
    }
}

fn parse_layout(c: &ConfigMap) -> Result<Layout, HarnessError> {
    match c.raw("scene.layout") {
        None => Ok(SceneConfig::default().layout),
        Some("free") => Ok(Layout::Free),
        Some("tiled") => Ok(Layout::Tiled),
        Some(other) => Err(c.reject("scene.layout", format!("unknown layout `{other}` (expected free|tiled)"))),
    }
}

/// Scene settings from `scene.*` and `seed`, validated.
pub fn scene_config(c: &ConfigMap) -> Result<SceneConfig, HarnessError> {
    let d = SceneConfig::default();
    let occlusion_len = match c.get_list::<usize>("scene.occlusion_len")?.as_deref() {
        None => d.occlusion_len,
        Some([n]) => (*n, *n),
        Some([a, b]) => (*a, *b),
        Some(_) => return Err(c.reject("scene.occlusion_len", "expected one value or lo,hi")),
    };
    let s = SceneConfig {
        n_objects: c.get_or("scene.n_objects", d.n_objects)?,
        frames: c.get_or("scene.frames", d.frames)?,
        frame_w: c.get_or("scene.frame_w", d.frame_w)?,
        frame_h: c.get_or("scene.frame_h", d.frame_h)?,
        size_range: c.get_range("scene.size")?.unwrap_or(d.size_range),
        aspect_range: c.get_range("scene.aspect")?.unwrap_or(d.aspect_range),
        velocity_x: c.get_range("scene.velocity_x")?.unwrap_or(d.velocity_x),
        velocity_y: c.get_range("scene.velocity_y")?.unwrap_or(d.velocity_y),
        relative_speed: c.get_range("scene.relative_speed")?,
        jitter_sigma: c.get_or("scene.jitter_sigma", d.jitter_sigma)?,
        jump_prob: c.get_or("scene.jump_prob", d.jump_prob)?,
        jump_magnitude: c.get_or("scene.jump_magnitude", d.jump_magnitude)?,
        layout: parse_layout(c)?,
        occlusions_per_object: c.get_or("scene.occlusions_per_object", d.occlusions_per_object)?,
        occlusion_len,
        entry_exit_prob: c.get_or("scene.entry_exit_prob", d.entry_exit_prob)?,
        shot_changes: c.get_list("scene.shot_changes")?.unwrap_or_default(),
        embedding_dim: c.get_or("scene.embedding_dim", d.embedding_dim)?,
        embedding_noise: c.get_or("scene.embedding_noise", d.embedding_noise)?,
        min_identity_distance: c.get_or("scene.min_identity_distance", d.min_identity_distance)?,
        objects: Vec::new(),
        seed: c.get_or("seed", d.seed)?,
    };
    s.validate().map_err(|e| scene_err(c, e))?;
    Ok(s)
}

pub fn grid_config(c: &ConfigMap, frame_w: f64, frame_h: f64) -> Result<GridConfig<f64>, HarnessError> {
    let strides = c.get_list("grid.strides")?.unwrap_or_else(|| DEFAULT_STRIDES.to_vec());
    let mults = c
        .get_list("grid.scale_multipliers")?
        .unwrap_or_else(|| DEFAULT_SCALE_MULTIPLIERS.to_vec());
    let ratios = c.get_list("grid.aspect_ratios")?.unwrap_or_else(|| vec![1.0]);
    Ok(GridConfig::from_strides(frame_w, frame_h, &strides, &mults, &ratios))
}

pub fn build_grid(c: &ConfigMap, frame_w: f64, frame_h: f64) -> Result<AnchorGrid<f64>, HarnessError> {
    AnchorGrid::build(grid_config(c, frame_w, frame_h)?).map_err(|e| c.reject("grid.strides", e.to_string()))
}

pub fn generator_config(c: &ConfigMap) -> Result<GeneratorConfig, HarnessError> {
    let d = GeneratorConfig::default();
    let strategy = match c.raw("generator.strategy") {
        None => d.strategy,
        Some(s) => s
            .parse::<AssignStrategy>()
            .map_err(|e| c.reject("generator.strategy", e))?,
    };
    let g = GeneratorConfig {
        sigma_det: c.get_or("generator.sigma_det", d.sigma_det)?,
        sigma_active: c.get_or("generator.sigma_active", d.sigma_active)?,
        nms_redetect: c.get_or("generator.nms_redetect", d.nms_redetect)?,
        merge_iou: c.get_or("generator.merge_iou", d.merge_iou)?,
        k: c.get_or("generator.k", d.k)?,
        strategy,
    };
    g.validate().map_err(|e| match e {
        crate::generator::GeneratorError::Config(msg) => section_err(c, "generator", msg),
        other => run_err(other),
    })?;
    Ok(g)
}

/// Synthetic backend settings; the detection threshold follows the
/// generator's `sigma_det`.
pub fn synthetic_config(c: &ConfigMap, g: &GeneratorConfig, seed: u64) -> Result<SyntheticConfig, HarnessError> {
    let d = SyntheticConfig::default();
    let confidence_model = match c.raw("detector.confidence_model") {
        None | Some("linear") => {
            let gain = match d.confidence_model {
                ConfidenceModel::Linear { gain } => gain,
                ConfidenceModel::Constant(_) => 1.0,
            };
            ConfidenceModel::Linear {
                gain: c.get_or("detector.confidence_gain", gain)?,
            }
        }
        Some("constant") => ConfidenceModel::Constant(c.get_or("detector.confidence_constant", 1.0)?),
        Some(other) => {
            return Err(c.reject(
                "detector.confidence_model",
                format!("unknown model `{other}` (expected linear|constant)"),
            ))
        }
    };
    let s = SyntheticConfig {
        response_iou_floor: c.get_or("detector.response_iou_floor", d.response_iou_floor)?,
        regression_noise_sigma: c.get_or("detector.regression_noise_sigma", d.regression_noise_sigma)?,
        confidence_model,
        confidence_noise_sigma: c.get_or("detector.confidence_noise_sigma", d.confidence_noise_sigma)?,
        dropout_prob: c.get_or("detector.dropout_prob", d.dropout_prob)?,
        sigma_det: g.sigma_det,
        nms_threshold: c.get_or("detector.nms_threshold", d.nms_threshold)?,
        seed,
    };
    s.validate().map_err(|e| match e {
        crate::detector::DetectorError::Config(msg) => section_err(c, "detector", msg),
        other => run_err(other),
    })?;
    Ok(s)
}

/// `None` when `linker.enabled=false`.
pub fn link_config(c: &ConfigMap) -> Result<Option<LinkConfig>, HarnessError> {
    if !c.get_or("linker.enabled", true)? {
        return Ok(None);
    }
    let d = LinkConfig::default();
    Ok(Some(LinkConfig {
        distance_threshold: c.get_or("linker.distance_threshold", d.distance_threshold)?,
        embedding_cadence: c.get_or("linker.embedding_cadence", d.embedding_cadence)?,
    }))
}

fn block_params(c: &ConfigMap) -> Result<BlockMatchParams, HarnessError> {
    let d = BlockMatchParams::default();
    Ok(BlockMatchParams {
        block_size: c.get_or("motion.block_size", d.block_size)?,
        search_radius: c.get_or("motion.search_radius", d.search_radius)?,
        grid_step: c.get_or("motion.grid_step", d.grid_step)?,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub dir: PathBuf,
    pub frames: usize,
    pub identities: usize,
    pub rows: usize,
    pub config_sha256: String,
}

/// Generates a scene and writes `gt.txt`, `manifest.txt` and, when enabled,
/// `embeddings.txt` and `rasters/NNNNNN.pgm` under `output.dir`.
pub fn cmd_simulate(c: &ConfigMap) -> Result<SimulateSummary, HarnessError> {
    let dir: PathBuf = required(c, "output.dir")?;
    let cfg = scene_config(c)?;
    let scene = generate(&cfg).map_err(|e| scene_err(c, e))?;
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;

    let rows = scene.gt_rows();
    io::write_text(&dir.join(io::GT_FILE), &io::format_gt(&rows))?;
    if c.get_or("output.embeddings", true)? {
        io::write_text(&dir.join(io::EMBEDDINGS_FILE), &io::format_embeddings(&scene))?;
    }
    if c.get_or("output.rasters", false)? {
        let rdir = dir.join(io::RASTER_DIR);
        fs::create_dir_all(&rdir).map_err(|e| HarnessError::io(&rdir, e))?;
        for f in 1..=scene.frames as FrameId {
            let path = io::raster_path(&rdir, f);
            let mut buf = Vec::new();
            render_raster(&scene, f)
                .map_err(run_err)?
                .write_pgm(&mut buf)
                .map_err(|e| HarnessError::io(&path, e))?;
            fs::write(&path, buf).map_err(|e| HarnessError::io(&path, e))?;
        }
    }
    let manifest = io::Manifest {
        frames: scene.frames,
        frame_w: scene.frame_w,
        frame_h: scene.frame_h,
        seed: scene.seed,
        identities: scene.identity_count(),
        config_sha256: sha256_hex(format!("{cfg:?}").as_bytes()),
    };
    io::write_text(&dir.join(io::MANIFEST_FILE), &manifest.to_text())?;
    Ok(SimulateSummary {
        dir,
        frames: scene.frames,
        identities: scene.identity_count(),
        rows: rows.len(),
        config_sha256: manifest.config_sha256,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSummary {
    pub results: PathBuf,
    pub output: PipelineOutput,
    pub warnings: Vec<String>,
}

/// Flow provider named by `motion.mode`; `None` means identity motion.
fn flow_provider<'a>(
    c: &ConfigMap,
    scene: Option<&'a GroundTruthScene>,
    scene_dir: Option<&Path>,
) -> Result<Option<Box<dyn FlowProvider<f64> + 'a>>, HarnessError> {
    let need_scene = |mode: &str| {
        scene.ok_or_else(|| c.reject("motion.mode", format!("`{mode}` needs input.scene")))
    };
    match c.raw("motion.mode").unwrap_or("identity") {
        "identity" => Ok(None),
        "oracle" => Ok(Some(Box::new(OracleFlow { scene: need_scene("oracle")? }))),
        "block_matching" => {
            let params = block_params(c)?;
            let rdir = scene_dir.map(|d| d.join(io::RASTER_DIR)).filter(|d| d.is_dir());
            Ok(Some(match rdir {
                Some(dir) => Box::new(BlockMatchingProvider {
                    source: io::PgmDirectory { dir },
                    params,
                }),
                None => Box::new(BlockMatchingProvider {
                    source: SceneRasters {
                        scene: need_scene("block_matching")?,
                    },
                    params,
                }),
            }))
        }
        other => Err(c.reject(
            "motion.mode",
            format!("unknown mode `{other}` (expected identity|oracle|block_matching)"),
        )),
    }
}

/// Runs the two-stage tracker and writes MOT result rows.
pub fn cmd_track(c: &ConfigMap) -> Result<TrackSummary, HarnessError> {
    let scene_dir: Option<PathBuf> = c.get("input.scene")?;
    let scene = scene_dir.as_deref().map(io::load_scene).transpose()?;
    let results: PathBuf = match (c.get("output.results")?, &scene_dir) {
        (Some(p), _) => p,
        (None, Some(d)) => d.join("results.txt"),
        (None, None) => return Err(c.reject("output.results", "required when input.scene is not set")),
    };
    let gen = generator_config(c)?;
    let mut warnings = gen.warnings();
    let (fw, fh) = match &scene {
        Some(s) => (s.frame_w, s.frame_h),
        None => (c.get_or("scene.frame_w", 640.0)?, c.get_or("scene.frame_h", 480.0)?),
    };
    let grid = build_grid(c, fw, fh)?;
    let seed = match c.get("seed")? {
        Some(s) => s,
        None => scene.as_ref().map_or(0, |s| s.seed),
    };
    let flow = flow_provider(c, scene.as_ref(), scene_dir.as_deref())?;
    let embedder = scene.as_ref().map(|scene| SceneEmbedder { scene });
    let linking = match (link_config(c)?, &embedder) {
        (None, _) => None,
        (Some(config), Some(e)) => Some(Linking { config, embeddings: e }),
        (Some(_), None) => {
            warnings.push("linker disabled: no scene embeddings without input.scene".into());
            None
        }
    };
    let flow_ref = flow.as_deref();

    let output = match c.raw("detector.backend").unwrap_or("synthetic") {
        "synthetic" => {
            let scene = scene
                .as_ref()
                .ok_or_else(|| c.reject("input.scene", "the synthetic backend needs a scene"))?;
            let det = SyntheticDetector::new(scene, &grid, synthetic_config(c, &gen, seed)?)
                .map_err(|e| c.reject("detector", e.to_string()))?;
            let last = scene.frames as FrameId;
            match c.get::<PathBuf>("output.record")? {
                Some(path) => {
                    let rec = RecordingDetector::new(&det);
                    let out = pipeline::run(&grid, &rec, gen, flow_ref, linking, 1, last).map_err(run_err)?;
                    io::write_text(&path, &rec.into_recording().to_text())?;
                    out
                }
                None => pipeline::run(&grid, &det, gen, flow_ref, linking, 1, last).map_err(run_err)?,
            }
        }
        "replay" => {
            let path: PathBuf = required(c, "input.replay")?;
            let text = io::read_text(&path)?;
            let rec = Recording::parse(text.as_bytes()).map_err(|e| match e {
                crate::detector::DetectorError::Parse { line, msg } => HarnessError::Parse {
                    path: path.clone(),
                    line,
                    msg,
                },
                other => run_err(other),
            })?;
            let last = match &scene {
                Some(s) => s.frames as FrameId,
                None => {
                    let q = rec.queries.keys().next_back().copied().unwrap_or(0);
                    let d = rec.detections.keys().next_back().copied().unwrap_or(0);
                    q.max(d)
                }
            };
            let det = ReplayDetector::new(&grid, rec).map_err(|e| HarnessError::Parse {
                path: path.clone(),
                line: 0,
                msg: e.to_string(),
            })?;
            if last == 0 {
                empty_output()
            } else {
                pipeline::run(&grid, &det, gen, flow_ref, linking, 1, last).map_err(run_err)?
            }
        }
        other => {
            return Err(c.reject(
                "detector.backend",
                format!("unknown backend `{other}` (expected synthetic|replay)"),
            ))
        }
    };
    if let Some(parent) = results.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    io::write_text(&results, &io::format_results(&output.rows))?;
    Ok(TrackSummary {
        results,
        output,
        warnings,
    })
}

fn empty_output() -> PipelineOutput {
    PipelineOutput {
        rows: Vec::new(),
        frames: Vec::new(),
        tracklets: 0,
        tracks: None,
    }
}

/// Scores a result file against ground truth at IoU `gate`.
pub fn cmd_eval(gt: &Path, results: &Path, gate: f64) -> Result<MetricsReport, HarnessError> {
    if !(gate > 0.0 && gate <= 1.0) {
        return Err(HarnessError::Usage(format!("gate must be in (0, 1], got {gate}")));
    }
    let g = io::load_gt_trajectories(gt)?;
    let p = io::load_result_trajectories(results)?;
    evaluate(&g, &p, gate).map_err(run_err)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchBucket {
    pub objects: usize,
    pub frames: usize,
    pub timed_frames: usize,
    pub queries: usize,
    /// Frames whose query count differs from anchors-per-tracklet times the
    /// active tracklets at frame entry.
    pub query_contract_violations: usize,
    pub births_after_first_frame: usize,
    pub terminations: usize,
    pub tracklets: usize,
    /// Wall-clock fields; everything else is deterministic.
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub anchors: usize,
    pub anchors_per_tracklet: usize,
    pub seed: u64,
    pub buckets: Vec<BenchBucket>,
}

impl BenchReport {
    /// p95 of the largest bucket over p95 of the smallest.
    pub fn p95_ratio(&self) -> Option<f64> {
        let lo = self.buckets.iter().min_by_key(|b| b.objects)?;
        let hi = self.buckets.iter().max_by_key(|b| b.objects)?;
        Some(hi.timing.p95_ms / lo.timing.p95_ms)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>7} {:>6} {:>10} {:>10} {:>10} {:>9} {:>7} {:>6}\n",
            "objects", "frames", "timed", "mean_ms", "median_ms", "p95_ms", "queries", "births", "terms"
        );
        for b in &self.buckets {
            s.push_str(&format!(
                "{:>8} {:>7} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>9} {:>7} {:>6}\n",
                b.objects,
                b.frames,
                b.timed_frames,
                b.timing.mean_ms,
                b.timing.median_ms,
                b.timing.p95_ms,
                b.queries,
                b.births_after_first_frame,
                b.terminations
            ));
        }
        if let Some(r) = self.p95_ratio() {
            s.push_str(&format!("p95 ratio (largest/smallest bucket): {r:.3}\n"));
        }
        s
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn timing(samples_ms: &[f64]) -> Timing {
    let mut v = samples_ms.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len().max(1) as f64;
    Timing {
        mean_ms: v.iter().sum::<f64>() / n,
        median_ms: percentile(&v, 0.5),
        p95_ms: percentile(&v, 0.95),
    }
}

/// Object widths used by the benchmark unless `scene.size` is set; small
/// enough that 50 tiled objects fit a 640x480 frame.
pub const BENCH_SIZE_RANGE: (f64, f64) = (24.0, 64.0);

/// Times the tracker on one synthetic scene per object-count bucket.
pub fn cmd_bench(c: &ConfigMap) -> Result<BenchReport, HarnessError> {
    let buckets: Vec<usize> = c.get_list("bench.objects")?.unwrap_or_else(|| vec![1, 10, 50]);
    if buckets.is_empty() {
        return Err(c.reject("bench.objects", "needs at least one bucket"));
    }
    let frames: usize = c.get_or("bench.frames", 100)?;
    let warmup: usize = c.get_or("bench.warmup", 10)?;
    if warmup >= frames {
        return Err(c.reject("bench.warmup", format!("must be below bench.frames ({frames})")));
    }
    let mut base = scene_config(c)?;
    base.frames = frames;
    if c.raw("scene.size").is_none() {
        base.size_range = BENCH_SIZE_RANGE;
    }
    let gen = generator_config(c)?;
    let link = link_config(c)?;
    let grid = build_grid(c, base.frame_w, base.frame_h)?;
    let syn = synthetic_config(c, &gen, base.seed)?;
    if c.raw("motion.mode").is_some_and(|m| m != "identity") {
        return Err(c.reject("motion.mode", "the benchmark runs identity motion only"));
    }

    let mut out = Vec::with_capacity(buckets.len());
    for &n in &buckets {
        let scene = generate(&SceneConfig {
            n_objects: n,
            ..base.clone()
        })
        .map_err(|e| scene_err(c, e))?;
        let det = SyntheticDetector::new(&scene, &grid, syn.clone()).map_err(run_err)?;
        let embedder = SceneEmbedder { scene: &scene };
        let linking = link.clone().map(|config| Linking {
            config,
            embeddings: &embedder,
        });
        let res = pipeline::run(&grid, &det, gen.clone(), None, linking, 1, frames as FrameId).map_err(run_err)?;
        let per = gen.anchors_per_tracklet();
        let samples: Vec<f64> = res.frames[warmup..]
            .iter()
            .map(|f| f.elapsed.as_secs_f64() * 1e3)
            .collect();
        out.push(BenchBucket {
            objects: n,
            frames,
            timed_frames: samples.len(),
            queries: res.frames.iter().map(|f| f.queries).sum(),
            query_contract_violations: res.frames.iter().filter(|f| f.queries != per * f.active_at_entry).count(),
            births_after_first_frame: res.frames.iter().skip(1).map(|f| f.born).sum(),
            terminations: res.total_terminations(),
            tracklets: res.tracklets,
            timing: timing(&samples),
        });
    }
    Ok(BenchReport {
        anchors: grid.len(),
        anchors_per_tracklet: gen.anchors_per_tracklet(),
        seed: base.seed,
        buckets: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ConfigMap {
        ConfigMap::parse(text, Some(Path::new("run.cfg"))).unwrap()
    }

    #[test]
    fn scene_errors_name_the_key_and_line() {
        let e = scene_config(&cfg("seed=1\nscene.frames=0\n")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("run.cfg:2"), "{msg}");
        assert!(msg.contains("scene.frames"), "{msg}");
        assert_eq!(e.exit_code(), 2);
        let e = scene_config(&cfg("scene.layout=grid\n")).unwrap_err();
        assert!(e.to_string().contains("scene.layout"));
    }

    #[test]
    fn defaults_mirror_module_defaults() {
        let c = cfg("");
        assert_eq!(generator_config(&c).unwrap(), GeneratorConfig::default());
        assert_eq!(link_config(&c).unwrap(), Some(LinkConfig::default()));
        let g = GeneratorConfig::default();
        assert_eq!(synthetic_config(&c, &g, 0).unwrap(), SyntheticConfig::default());
        assert_eq!(
            grid_config(&c, 640.0, 480.0).unwrap(),
            GridConfig::default_for_frame(640.0, 480.0)
        );
    }

    #[test]
    fn overrides_reach_the_builders() {
        let mut c = cfg("generator.k=3\n");
        c.set_override("generator.strategy=multi").unwrap();
        c.set_override("linker.enabled=false").unwrap();
        let g = generator_config(&c).unwrap();
        assert_eq!((g.k, g.strategy), (3, AssignStrategy::Multi));
        assert_eq!(link_config(&c).unwrap(), None);
        c.set_override("generator.sigma_active=2").unwrap();
        let e = generator_config(&c).unwrap_err();
        assert!(e.to_string().contains("override"), "{e}");
    }

    #[test]
    fn percentile_is_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
        let t = timing(&[4.0, 1.0, 2.0, 3.0]);
        assert_eq!((t.mean_ms, t.median_ms, t.p95_ms), (2.5, 2.0, 4.0));
    }
}
