//! Subcommands of the `uvforge` binary. Each one writes into its own directory
//! below the output root: artifacts, the resolved config, a report and a hash
//! manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::oracle_attend;
use crate::baker::{backproject_bake, naive_fill, BakeResult};
use crate::config::{RunConfig, RESOLVED_CONFIG_NAME};
use crate::error::{invariant, Error, Result};
use crate::geometry::load_obj;
use crate::io::{self, ArtifactWriter, Image, MANIFEST_NAME};
use crate::metrics::{psnr, ssim};
use crate::raster::GeoMaps;
use crate::texture::ProceduralTexture;
use crate::trainer::{
    checkpoint_path, mean_defined, CHECKPOINT_NAME, predict, Ablation, Augment, GeometrySet,
    SampleSource, SceneGeometry, StepLog, Trainer, ToyModel, HELD_OUT_SEED_BASE,
};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// How `bake-texture` produces the UV texture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BakeMode {
    /// Weighted back-projection followed by nearest-texel hole filling.
    Backproject,
    /// Weight-free attention over view pixels by 3D distance.
    OracleAttn,
    /// A trained checkpoint.
    Model,
}

impl BakeMode {
    pub fn name(self) -> &'static str {
        match self {
            BakeMode::Backproject => "backproject",
            BakeMode::OracleAttn => "oracle-attn",
            BakeMode::Model => "model",
        }
    }
}

/// Command-line values that override the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn resolve_config(path: &Path, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = ov.seed {
        cfg = cfg.with_seed(seed);
    }
    if ov.deterministic {
        cfg.deterministic = true;
    }
    if ov.threads.is_some() {
        cfg.threads = ov.threads;
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A table printed as aligned text and stored as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Artifact referenced by each row, relative to the report's directory.
    pub artifacts: Vec<Option<String>>,
    /// Machine-readable per-row values.
    pub records: Vec<serde_json::Value>,
    pub summary: serde_json::Map<String, serde_json::Value>,
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".to_owned(), |v| format!("{v:.digits$}"))
}

impl Report {
    fn new(command: &str, headers: &[&str]) -> Self {
        Self {
            command: command.to_owned(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            ..Self::default()
        }
    }

    fn push(&mut self, cells: Vec<String>, artifact: Option<String>, record: impl Serialize) -> Result<()> {
        if cells.len() != self.headers.len() {
            return Err(invariant!("report row has {} cells for {} columns", cells.len(), self.headers.len()));
        }
        self.rows.push(cells);
        self.artifacts.push(artifact);
        self.records
            .push(serde_json::to_value(record).map_err(|e| Error::Format(e.to_string()))?);
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_owned(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "  {c:>w$}");
                }
            }
            s.trim_end().to_owned() + "\n"
        };
        let mut out = line(&self.headers);
        out += &(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n");
        for row in &self.rows {
            out += &line(row);
        }
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }

    fn write(&self, w: &mut ArtifactWriter) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        w.write(REPORT_JSON, &json)?;
        w.write(REPORT_TXT, self.to_text().as_bytes())?;
        Ok(())
    }
}

/// What a subcommand produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub report: Report,
}

/// Opens a stage directory and records the resolved config in it.
fn stage(cfg: &RunConfig, rel: &str) -> Result<ArtifactWriter> {
    let dir = cfg.out_dir.join(rel);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut w = ArtifactWriter::new(dir);
    w.write(RESOLVED_CONFIG_NAME, cfg.to_toml()?.as_bytes())?;
    Ok(w)
}

fn finish(w: ArtifactWriter, report: Report, cfg: &RunConfig, started: Instant) -> Result<Outcome> {
    let mut report = report;
    if !cfg.deterministic {
        report.note("elapsed_s", started.elapsed().as_secs_f64());
    }
    let mut w = w;
    report.write(&mut w)?;
    let dir = w.root().to_path_buf();
    w.finish()?;
    Ok(Outcome { dir, report })
}

/// Geometry of every configured mesh, procedural ones first.
fn scene_geometries(cfg: &RunConfig, bands: usize) -> Result<Vec<SceneGeometry>> {
    let s = &cfg.scene;
    let mut out = GeometrySet::build(&s.meshes, &s.rig, s.uv_size, bands)?.scenes;
    if let Some(path) = &s.mesh_file {
        let mesh = load_obj(path)?;
        let name = path.file_stem().and_then(|n| n.to_str()).unwrap_or("mesh");
        out.push(SceneGeometry::from_mesh(None, name, &mesh, &s.rig, s.uv_size, bands)?);
    }
    Ok(out)
}

fn unit_image(w: usize, h: usize, v: &[[f32; 3]]) -> Image {
    Image::rgb(w, h, &v.iter().map(|p| p.map(|x| 0.5 + 0.5 * x)).collect::<Vec<_>>())
}

fn write_geo_maps(w: &mut ArtifactWriter, scene: &str, domain: &str, g: &GeoMaps) -> Result<()> {
    // PFM keeps raw values; the PNG previews map [-1, 1] to [0, 1].
    let stem = |ch: &str| format!("{scene}_{domain}_{ch}");
    w.write(&format!("{}.pfm", stem("position")), &io::encode_pfm(&Image::rgb(g.width, g.height, &g.position))?)?;
    w.write(&format!("{}.png", stem("position")), &io::encode_png(&unit_image(g.width, g.height, &g.position))?)?;
    w.write(&format!("{}.pfm", stem("normal")), &io::encode_pfm(&Image::rgb(g.width, g.height, &g.normal))?)?;
    w.write(&format!("{}.png", stem("normal")), &io::encode_png(&unit_image(g.width, g.height, &g.normal))?)?;
    w.write_image(&stem("coverage"), &Image::mask(g.width, g.height, &g.coverage))?;
    if let Some(d) = &g.depth {
        w.write(&format!("{}.pfm", stem("depth")), &io::encode_pfm(&Image::gray(g.width, g.height, d.iter().copied()))?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GeometryRecord<'a> {
    scene: &'a str,
    faces: usize,
    charts: usize,
    covered_texels: usize,
    occluded_texels: usize,
}

/// Writes UV and per-view position, normal and coverage maps plus the
/// occlusion mask of every configured mesh.
pub fn bake_geometry(cfg: &RunConfig) -> Result<Outcome> {
    let started = Instant::now();
    let mut w = stage(cfg, "geometry")?;
    let mut report = Report::new("bake-geometry", &["scene", "faces", "charts", "covered", "occluded", "views"]);
    for geo in scene_geometries(cfg, cfg.model.bands)? {
        let name = geo.name.as_str();
        write_geo_maps(&mut w, name, "uv", &geo.uv)?;
        for (k, v) in geo.views.iter().enumerate() {
            write_geo_maps(&mut w, name, &format!("view{k}"), v)?;
        }
        let occ = geo.vis.occluded_covered(&geo.uv.coverage);
        w.write_image(&format!("{name}_uv_occlusion"), &Image::mask(geo.uv.width, geo.uv.height, &occ))?;
        let rec = GeometryRecord {
            scene: name,
            faces: geo.mesh.faces.len(),
            charts: geo.mesh.chart_count(),
            covered_texels: geo.uv.covered_count(),
            occluded_texels: occ.iter().filter(|&&o| o).count(),
        };
        report.push(
            vec![
                name.to_owned(),
                rec.faces.to_string(),
                rec.charts.to_string(),
                rec.covered_texels.to_string(),
                rec.occluded_texels.to_string(),
                geo.views.len().to_string(),
            ],
            Some(format!("{name}_uv_position.pfm")),
            &rec,
        )?;
    }
    finish(w, report, cfg, started)
}

/// Per-scene texture metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureRecord {
    pub scene: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub occluded_psnr: Option<f64>,
    pub conflict_fraction: f64,
}

const TEXTURE_HEADERS: [&str; 5] = ["scene", "psnr", "ssim", "occluded_psnr", "conflict_fraction"];

impl TextureRecord {
    fn cells(&self) -> Vec<String> {
        vec![
            self.scene.clone(),
            fmt_opt(self.psnr, 2),
            fmt_opt(self.ssim, 4),
            fmt_opt(self.occluded_psnr, 2),
            format!("{:.4}", self.conflict_fraction),
        ]
    }
}

/// A textured evaluation scene.
struct Painted<'a> {
    name: String,
    geo: &'a SceneGeometry,
    target: Vec<[f32; 3]>,
    view_colors: Vec<Vec<[f32; 3]>>,
}

/// Held-out scenes of every configured mesh and texture.
fn held_out<'a>(cfg: &RunConfig, geos: &'a [SceneGeometry]) -> Result<Vec<Painted<'a>>> {
    let mut out = Vec::new();
    for geo in geos {
        for &texture in &cfg.scene.textures {
            for i in 0..cfg.scene.held_out as u64 {
                let seed = HELD_OUT_SEED_BASE + i;
                let (target, view_colors) = geo.paint(&ProceduralTexture::new(texture, seed))?;
                out.push(Painted {
                    name: format!("{}_{}_{}", geo.name, texture.name(), seed),
                    geo,
                    target,
                    view_colors,
                });
            }
        }
    }
    Ok(out)
}

fn baseline(geo: &SceneGeometry, view_colors: &[Vec<[f32; 3]>], cfg: &RunConfig) -> Result<BakeResult> {
    let views: Vec<GeoMaps> = geo
        .views
        .iter()
        .zip(view_colors)
        .map(|(g, c)| {
            let mut g = g.clone();
            g.color = Some(c.clone());
            g
        })
        .collect();
    backproject_bake(&geo.uv, &geo.cams, &views, &geo.vis, cfg.bake.weight_power, cfg.bake.conflict_threshold)
}

fn score(name: &str, geo: &SceneGeometry, texture: &[[f32; 3]], target: &[[f32; 3]], base: &BakeResult) -> Result<TextureRecord> {
    let cov = &geo.uv.coverage;
    let occ = geo.vis.occluded_covered(cov);
    let n_cov = cov.iter().filter(|&&c| c).count().max(1);
    let n_conf = base.conflict.iter().zip(cov).filter(|(&c, &m)| c && m).count();
    Ok(TextureRecord {
        scene: name.to_owned(),
        psnr: psnr(texture, target, cov)?,
        ssim: ssim(texture, target, cov, geo.uv.width, geo.uv.height)?,
        occluded_psnr: psnr(texture, target, &occ)?,
        conflict_fraction: n_conf as f64 / n_cov as f64,
    })
}

/// Loads a checkpoint into a model built from the run config.
pub fn load_model(cfg: &RunConfig, ablation: Ablation, ckpt: &Path) -> Result<ToyModel> {
    let model = ToyModel::new(cfg.model.clone(), ablation)?;
    let mut trainer = Trainer::new(model, &cfg.train);
    trainer.restore(&io::read(ckpt)?)?;
    Ok(trainer.model)
}

/// Bakes the held-out scenes with `mode` and scores them against ground truth.
pub fn bake_texture(cfg: &RunConfig, mode: BakeMode, ckpt: Option<&Path>) -> Result<Outcome> {
    let started = Instant::now();
    let model = match (mode, ckpt) {
        (BakeMode::Model, Some(p)) => Some(load_model(cfg, cfg.train.ablation, p)?),
        (BakeMode::Model, None) => return Err(Error::Config("mode model needs --ckpt".into())),
        _ => None,
    };
    let geos = scene_geometries(cfg, cfg.model.bands)?;
    if model.is_some() && geos.iter().any(|g| g.kind.is_none()) {
        return Err(Error::Config("mode model supports procedural meshes only".into()));
    }
    let mut w = stage(cfg, &format!("texture/{}", mode.name()))?;
    let mut report = Report::new("bake-texture", &TEXTURE_HEADERS);
    report.note("mode", mode.name());
    let mut records = Vec::new();
    for s in held_out(cfg, &geos)? {
        let (uw, uh) = (s.geo.uv.width, s.geo.uv.height);
        let base = baseline(s.geo, &s.view_colors, cfg)?;
        let texture = match mode {
            BakeMode::Backproject => naive_fill(&base, &s.geo.uv.coverage).texture,
            BakeMode::OracleAttn => {
                let views: Vec<GeoMaps> = s.geo.views.iter().zip(&s.view_colors).map(|(g, c)| {
                    let mut g = g.clone();
                    g.color = Some(c.clone());
                    g
                }).collect();
                let t = oracle_attend(&s.geo.uv, &views, cfg.bake.tau)?;
                let hw = uw * uh;
                (0..hw).map(|k| std::array::from_fn(|ch| t.data()[ch * hw + k])).collect()
            }
            BakeMode::Model => {
                let m = model.as_ref().expect("checked above");
                predict(m, s.geo, &s.view_colors, &Augment::none(s.geo.views.len()))?.texture
            }
        };
        let stem = format!("{}_uv_texture", s.name);
        w.write_image(&stem, &Image::rgb(uw, uh, &texture))?;
        w.write_image(&format!("{}_uv_truth", s.name), &Image::rgb(uw, uh, &s.target))?;
        w.write_image(&format!("{}_uv_conflict", s.name), &Image::mask(uw, uh, &base.conflict))?;
        let occ = s.geo.vis.occluded_covered(&s.geo.uv.coverage);
        w.write_image(&format!("{}_uv_occlusion", s.name), &Image::mask(uw, uh, &occ))?;
        let rec = score(&s.name, s.geo, &texture, &s.target, &base)?;
        report.push(rec.cells(), Some(format!("{stem}.pfm")), &rec)?;
        records.push(rec);
    }
    report.note("mean_psnr", mean_defined(records.iter().map(|r| r.psnr)));
    finish(w, report, cfg, started)
}

/// Result of one training arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub arm: String,
    pub seed: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub occluded_psnr: Option<f64>,
}

const ARM_HEADERS: [&str; 7] = ["arm", "seed", "steps", "final_loss", "psnr", "ssim", "occluded_psnr"];

impl ArmRecord {
    fn cells(&self) -> Vec<String> {
        vec![
            self.arm.clone(),
            self.seed.to_string(),
            self.steps.to_string(),
            fmt_opt(self.final_loss, 6),
            fmt_opt(self.psnr, 2),
            fmt_opt(self.ssim, 4),
            fmt_opt(self.occluded_psnr, 2),
        ]
    }
}

/// Trains one arm into `rel`, resuming from its checkpoint when asked, and
/// scores the result on the held-out scenes.
fn train_arm(
    cfg: &RunConfig,
    ablation: Ablation,
    rel: &Path,
    resume: bool,
    geos: &GeometrySet,
    on_step: &mut dyn FnMut(Ablation, &StepLog),
) -> Result<(ArtifactWriter, ArmRecord, Vec<TextureRecord>)> {
    if geos.scenes.is_empty() {
        return Err(Error::Config("training needs procedural meshes".into()));
    }
    let mut w = stage(cfg, &rel.to_string_lossy())?;
    let mut tcfg = cfg.train.clone();
    tcfg.ablation = ablation;
    let model = ToyModel::new(cfg.model.clone(), ablation)?;
    let mut trainer = Trainer::new(model, &tcfg);
    let ckpt = checkpoint_path(w.root());
    let log_path = w.root().join(TRAIN_LOG);
    if resume && ckpt.exists() {
        trainer.restore(&io::read(&ckpt)?)?;
        if log_path.exists() {
            let mut log = read_train_log(&io::read(&log_path)?)?;
            log.retain(|e| e.step < trainer.step);
            trainer.log = log;
        }
    }
    let source = SampleSource::Procedural {
        meshes: geos.scenes.iter().filter_map(|g| g.kind).collect(),
        textures: cfg.scene.textures.clone(),
    };
    let dir = w.root().to_path_buf();
    trainer.run(&tcfg, &source, geos, Some(&dir), |e| on_step(ablation, e))?;
    // The loop checkpoints on its own schedule; this records the final state.
    w.write(CHECKPOINT_NAME, &trainer.checkpoint_bytes())?;
    w.write(TRAIN_LOG, &train_log_lines(&trainer.log)?)?;

    let mut scenes = Vec::new();
    for s in held_out(cfg, &geos.scenes)? {
        let pred = predict(&trainer.model, s.geo, &s.view_colors, &Augment::none(s.geo.views.len()))?;
        let base = baseline(s.geo, &s.view_colors, cfg)?;
        scenes.push(score(&s.name, s.geo, &pred.texture, &s.target, &base)?);
    }
    let rec = ArmRecord {
        arm: ablation.name().to_owned(),
        seed: tcfg.seed,
        steps: trainer.step,
        final_loss: trainer.log.last().map(|e| e.loss),
        psnr: mean_defined(scenes.iter().map(|r| r.psnr)),
        ssim: mean_defined(scenes.iter().map(|r| r.ssim)),
        occluded_psnr: mean_defined(scenes.iter().map(|r| r.occluded_psnr)),
    };
    Ok((w, rec, scenes))
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    step: u64,
    loss: f64,
    /// Training-batch PSNR implied by the loss.
    psnr: f64,
}

/// One JSON object per line: step, loss and the implied PSNR.
pub fn train_log_lines(log: &[StepLog]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in log {
        let line = LogLine {
            step: e.step,
            loss: e.loss,
            psnr: 10.0 * (1.0 / e.loss.max(1e-10)).log10(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_train_log(bytes: &[u8]) -> Result<Vec<StepLog>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let e: LogLine = serde_json::from_str(l).map_err(|e| Error::Format(e.to_string()))?;
            Ok(StepLog { step: e.step, loss: e.loss })
        })
        .collect()
}

fn training_geometry(cfg: &RunConfig) -> Result<GeometrySet> {
    GeometrySet::build(&cfg.scene.meshes, &cfg.scene.rig, cfg.scene.uv_size, cfg.model.bands)
}

/// Trains the configured arm; the report lists held-out metrics per scene.
pub fn train(cfg: &RunConfig, resume: bool, mut on_step: impl FnMut(Ablation, &StepLog)) -> Result<Outcome> {
    let started = Instant::now();
    let geos = training_geometry(cfg)?;
    let (w, arm, scenes) = train_arm(cfg, cfg.train.ablation, Path::new("train"), resume, &geos, &mut on_step)?;
    let mut report = Report::new("train", &TEXTURE_HEADERS);
    for s in &scenes {
        report.push(s.cells(), Some(TRAIN_LOG.to_owned()), s)?;
    }
    report.note("arm", &arm);
    finish(w, report, cfg, started)
}

/// Trains every arm under the same seeds; one report row per arm.
pub fn ablate(cfg: &RunConfig, resume: bool, mut on_step: impl FnMut(Ablation, &StepLog)) -> Result<Outcome> {
    let started = Instant::now();
    let geos = training_geometry(cfg)?;
    let root = stage(cfg, "ablate")?;
    let mut report = Report::new("ablate", &ARM_HEADERS);
    for arm in Ablation::ALL {
        let rel = Path::new("ablate").join(arm.name());
        let (w, rec, _) = train_arm(cfg, arm, &rel, resume, &geos, &mut on_step)?;
        w.finish()?;
        report.push(rec.cells(), Some(format!("{}/{CHECKPOINT_NAME}", arm.name())), &rec)?;
    }
    finish(root, report, cfg, started)
}

/// Per-scene comparison of a checkpoint against the back-projection baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(flatten)]
    pub model: TextureRecord,
    pub baseline_psnr: Option<f64>,
    pub baseline_occluded_psnr: Option<f64>,
}

/// Scores a checkpoint (default: the `train` stage's) on the held-out scenes.
pub fn eval(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<Outcome> {
    let started = Instant::now();
    let default_ckpt = checkpoint_path(&cfg.out_dir.join("train"));
    let ckpt = ckpt.unwrap_or(&default_ckpt);
    let model = load_model(cfg, cfg.train.ablation, ckpt)?;
    let geos = training_geometry(cfg)?;
    let mut w = stage(cfg, "eval")?;
    let mut headers = TEXTURE_HEADERS.to_vec();
    headers.extend(["baseline_psnr", "baseline_occluded_psnr"]);
    let mut report = Report::new("eval", &headers);
    let mut records = Vec::new();
    for s in held_out(cfg, &geos.scenes)? {
        let (uw, uh) = (s.geo.uv.width, s.geo.uv.height);
        let pred = predict(&model, s.geo, &s.view_colors, &Augment::none(s.geo.views.len()))?;
        let base = baseline(s.geo, &s.view_colors, cfg)?;
        let filled = naive_fill(&base, &s.geo.uv.coverage);
        let occ = s.geo.vis.occluded_covered(&s.geo.uv.coverage);
        let rec = EvalRecord {
            model: score(&s.name, s.geo, &pred.texture, &s.target, &base)?,
            baseline_psnr: psnr(&filled.texture, &s.target, &s.geo.uv.coverage)?,
            baseline_occluded_psnr: psnr(&filled.texture, &s.target, &occ)?,
        };
        let stem = format!("{}_uv_texture", s.name);
        w.write_image(&stem, &Image::rgb(uw, uh, &pred.texture))?;
        let mut cells = rec.model.cells();
        cells.push(fmt_opt(rec.baseline_psnr, 2));
        cells.push(fmt_opt(rec.baseline_occluded_psnr, 2));
        report.push(cells, Some(format!("{stem}.pfm")), &rec)?;
        records.push(rec);
    }
    report.note("mean_psnr", mean_defined(records.iter().map(|r| r.model.psnr)));
    report.note("mean_baseline_psnr", mean_defined(records.iter().map(|r| r.baseline_psnr)));
    report.note("checkpoint_sha256", io::sha256_hex(&io::read(ckpt)?));
    finish(w, report, cfg, started)
}

/// Manifest directories below `root`, sorted.
fn manifest_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == MANIFEST_NAME) {
                out.push(dir.clone());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Whether `rel` (relative to `dir`) exists and is listed in the manifest of
/// `dir` or of a directory between `dir` and the file.
fn hashed(dir: &Path, rel: &str) -> Result<bool> {
    let path = dir.join(rel);
    if !path.is_file() {
        return Ok(false);
    }
    for d in path.ancestors().skip(1) {
        if d.join(MANIFEST_NAME).exists() {
            let key = path.strip_prefix(d).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            if io::read_manifest(d)?.files.contains_key(&key) {
                return Ok(true);
            }
        }
        if d == dir {
            break;
        }
    }
    Ok(false)
}

/// Checks every manifest hash and every file a report references.
pub fn verify(cfg: &RunConfig) -> Result<Outcome> {
    let root = &cfg.out_dir;
    let dirs = manifest_dirs(root)?;
    if dirs.is_empty() {
        return Err(invariant!("no manifests below {}", root.display()));
    }
    let mut report = Report::new("verify", &["directory", "files", "bad"]);
    let mut problems = Vec::new();
    for dir in &dirs {
        let manifest = io::read_manifest(dir)?;
        let mut bad = io::verify_manifest(dir)?;
        let report_path = dir.join(REPORT_JSON);
        if report_path.exists() {
            let r: Report =
                serde_json::from_slice(&io::read(&report_path)?).map_err(|e| Error::Format(e.to_string()))?;
            for a in r.artifacts.iter().flatten() {
                if !hashed(dir, a)? {
                    bad.push(format!("{a} (referenced by report)"));
                }
            }
        }
        let rel = dir.strip_prefix(root).unwrap_or(dir).display().to_string();
        let rel = if rel.is_empty() { ".".to_owned() } else { rel };
        problems.extend(bad.iter().map(|b| format!("{rel}/{b}")));
        report.push(
            vec![rel.clone(), manifest.files.len().to_string(), bad.len().to_string()],
            None,
            serde_json::json!({ "directory": rel, "files": manifest.files.len(), "bad": bad }),
        )?;
    }
    if !problems.is_empty() {
        return Err(invariant!("manifest verification failed: {}", problems.join(", ")));
    }
    Ok(Outcome {
        dir: root.clone(),
        report,
    })
}
