//! Optimization loop, checkpoints and evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{GeometrySet, SceneGeometry, SceneSpec, TrainSample, HELD_OUT_SEED_BASE};
use super::model::{masked_mse, Ablation, ForwardInputs, ToyModel};
use crate::attention::group_entropy;
use crate::baker::{backproject_bake, naive_fill, DEFAULT_CONFLICT_THRESHOLD, DEFAULT_WEIGHT_POWER};
use crate::error::{invariant, Error, Result};
use crate::geometry::MeshKind;
use crate::io;
use crate::metrics::{psnr, ssim};
use crate::raster::{corrupt_view, Corruption, GeoMaps, VisMaps};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::texture::TextureKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    /// Set from the run seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Probability of masking each view of a sample; never masks all of them.
    pub drop_view_p: f64,
    pub shuffle_views: bool,
    /// Strengths drawn when a sample is corrupted.
    pub corruption_strengths: Vec<f64>,
    /// Probability that one view of a sample is corrupted.
    pub corrupt_p: f64,
    pub ablation: Ablation,
    /// Steps between checkpoints (0 disables them).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 2000,
            batch: 2,
            seed: 0,
            drop_view_p: 0.1,
            shuffle_views: true,
            corruption_strengths: vec![0.1, 0.25, 0.5],
            corrupt_p: 0.2,
            ablation: Ablation::Full,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_view_p) {
            return Err(Error::Config(format!("drop_view_p {} outside [0, 1)", self.drop_view_p)));
        }
        if !(0.0..=1.0).contains(&self.corrupt_p) {
            return Err(Error::Config(format!("corrupt_p {} outside [0, 1]", self.corrupt_p)));
        }
        if self.corruption_strengths.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("corruption strengths must lie in [0, 1]".into()));
        }
        if self.corrupt_p > 0.0 && self.corruption_strengths.is_empty() {
            return Err(Error::Config("corrupt_p > 0 needs at least one strength".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Where training scenes come from.
#[derive(Clone, Debug)]
pub enum SampleSource {
    /// Fresh scenes per step; texture seeds stay below [`HELD_OUT_SEED_BASE`].
    Procedural {
        meshes: Vec<MeshKind>,
        textures: Vec<TextureKind>,
    },
    /// A fixed list, drawn uniformly.
    Fixed(Vec<TrainSample>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
}

/// Per-step random stream, independent of every other step.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn draw_batch(
    cfg: &TrainConfig,
    source: &SampleSource,
    geos: &GeometrySet,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    match source {
        SampleSource::Procedural { meshes, textures } => {
            if meshes.is_empty() || textures.is_empty() {
                return Err(Error::Config("training needs at least one mesh and one texture".into()));
            }
            // One mesh per step so the positional features are shared.
            let mesh = *meshes.choose(rng).expect("non-empty");
            let specs: Vec<SceneSpec> = (0..cfg.batch)
                .map(|_| SceneSpec {
                    mesh,
                    texture: *textures.choose(rng).expect("non-empty"),
                    seed: rng.gen_range(0..HELD_OUT_SEED_BASE),
                })
                .collect();
            super::data::make_dataset(&specs, geos)
        }
        SampleSource::Fixed(samples) => {
            if samples.is_empty() {
                return Err(Error::Config("empty training set".into()));
            }
            let first = samples.choose(rng).expect("non-empty").clone();
            let same: Vec<&TrainSample> = samples.iter().filter(|s| s.spec.mesh == first.spec.mesh).collect();
            let mut batch = vec![first];
            while batch.len() < cfg.batch {
                batch.push((*same.choose(rng).expect("non-empty")).clone());
            }
            Ok(batch)
        }
    }
}

/// Augmentation drawn for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Augment {
    pub active: Vec<bool>,
    pub order: Vec<usize>,
    /// `(view, mode, strength, seed)`.
    pub corruption: Option<(usize, Corruption, f64, u64)>,
}

impl Augment {
    pub fn none(views: usize) -> Self {
        Self {
            active: vec![true; views],
            order: (0..views).collect(),
            corruption: None,
        }
    }

    pub fn draw(cfg: &TrainConfig, views: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut active: Vec<bool> = (0..views).map(|_| !rng.gen_bool(cfg.drop_view_p)).collect();
        if !active.iter().any(|&a| a) {
            active[rng.gen_range(0..views)] = true;
        }
        let mut order: Vec<usize> = (0..views).collect();
        if cfg.shuffle_views {
            order.shuffle(rng);
        }
        let corruption = (cfg.corrupt_p > 0.0 && rng.gen_bool(cfg.corrupt_p)).then(|| {
            let modes = [Corruption::HueShift, Corruption::PatchSwap, Corruption::Noise];
            (
                rng.gen_range(0..views),
                *modes.choose(rng).expect("non-empty"),
                *cfg.corruption_strengths.choose(rng).expect("validated"),
                rng.gen(),
            )
        });
        Self {
            active,
            order,
            corruption,
        }
    }

    /// View colors after corruption.
    pub fn apply(&self, sample: &TrainSample, geo: &SceneGeometry) -> Result<Vec<Vec<[f32; 3]>>> {
        let mut colors = sample.view_colors.clone();
        if let Some((v, mode, strength, seed)) = self.corruption {
            let mut g = geo.views[v].clone();
            g.color = Some(colors[v].clone());
            colors[v] = corrupt_view(&g, mode, strength, seed)?.color()?.to_vec();
        }
        Ok(colors)
    }
}

fn color_var<T: crate::tensor::Real>(tape: &mut Tape<T>, px: &[[f32; 3]], h: usize, w: usize) -> Result<Var> {
    let hw = h * w;
    let mut data = vec![T::zero(); 3 * hw];
    for (k, c) in px.iter().enumerate() {
        for ch in 0..3 {
            data[ch * hw + k] = T::from_f32(c[ch]);
        }
    }
    Ok(tape.constant(Tensor::new([3, h, w], data)?))
}

fn with_colors(maps: &[GeoMaps], colors: &[Vec<[f32; 3]>]) -> Vec<GeoMaps> {
    maps.iter()
        .zip(colors)
        .map(|(g, c)| {
            let mut g = g.clone();
            g.color = Some(c.clone());
            g
        })
        .collect()
}

/// Front view (view 0) back-projected into UV space; zero where it sees nothing.
pub fn front_backprojection(geo: &SceneGeometry, view_colors: &[Vec<[f32; 3]>]) -> Result<Vec<[f32; 3]>> {
    let views = with_colors(&geo.views[..1], &view_colors[..1]);
    let vis = VisMaps {
        width: geo.vis.width,
        height: geo.vis.height,
        visible: vec![geo.vis.visible[0].clone()],
        occlusion: geo.vis.visible[0].iter().map(|&v| !v).collect(),
    };
    let r = backproject_bake(
        &geo.uv,
        &geo.cams[..1],
        &views,
        &vis,
        DEFAULT_WEIGHT_POWER,
        DEFAULT_CONFLICT_THRESHOLD,
    )?;
    Ok(r.texture)
}

/// Records one sample's forward pass and returns `(prediction, ref attention entropy inputs)`.
fn forward_sample<T: crate::tensor::Real>(
    model: &ToyModel,
    tape: &mut Tape<T>,
    p: &[Var],
    geo: &SceneGeometry,
    pos: Option<&super::model::PosVars>,
    colors: &[Vec<[f32; 3]>],
    aug: &Augment,
) -> Result<super::model::ForwardOutput> {
    let (vh, vw) = (geo.views[0].height, geo.views[0].width);
    let color_vars = colors
        .iter()
        .map(|c| color_var(tape, c, vh, vw))
        .collect::<Result<Vec<_>>>()?;
    let front = if model.ablation.uses_views() {
        None
    } else {
        let bp = front_backprojection(geo, colors)?;
        Some(color_var(tape, &bp, geo.uv.height, geo.uv.width)?)
    };
    model.forward(
        tape,
        p,
        &ForwardInputs {
            geo,
            pos,
            colors: &color_vars,
            order: &aug.order,
            active: &aug.active,
            front,
        },
    )
}

/// Mean masked MSE of a batch, recorded on `tape`.
pub fn batch_loss<T: crate::tensor::Real>(
    model: &ToyModel,
    tape: &mut Tape<T>,
    p: &[Var],
    geo: &SceneGeometry,
    samples: &[TrainSample],
    augs: &[Augment],
) -> Result<Var> {
    let pos = model.encode_positions(tape, p, geo)?;
    let (h, w) = (geo.uv.height, geo.uv.width);
    let mut total: Option<Var> = None;
    for (s, aug) in samples.iter().zip(augs) {
        let colors = aug.apply(s, geo)?;
        let out = forward_sample(model, tape, p, geo, pos.as_ref(), &colors, aug)?;
        let target = color_var(tape, &s.target, h, w)?;
        let l = masked_mse(tape, out.pred, target, &geo.uv.coverage)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| invariant!("empty batch"))?;
    tape.scale(total, T::from_f64(1.0 / samples.len() as f64))
}

/// Training state that can be written to and restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ToyModel,
    pub adam: Adam,
    pub step: u64,
    pub log: Vec<StepLog>,
}

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";

impl Trainer {
    pub fn new(model: ToyModel, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &model.params,
        );
        Self {
            model,
            adam,
            step: 0,
            log: Vec::new(),
        }
    }

    /// One optimizer step on the batch drawn for `self.step`.
    pub fn step(&mut self, cfg: &TrainConfig, source: &SampleSource, geos: &GeometrySet) -> Result<StepLog> {
        let mut rng = step_rng(cfg.seed, self.step);
        let samples = draw_batch(cfg, source, geos, &mut rng)?;
        let geo = geos.get(samples[0].spec.mesh)?;
        let augs: Vec<Augment> = samples
            .iter()
            .map(|_| Augment::draw(cfg, geo.views.len(), &mut rng))
            .collect();
        let mut tape = Tape::<f32>::new();
        let p = self.model.params.bind(&mut tape);
        let loss = batch_loss(&self.model, &mut tape, &p, geo, &samples, &augs)?;
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor<f32>>> = p.iter().map(|&v| tape.grad(v).cloned()).collect();
        self.adam.step(&mut self.model.params, &grads)?;
        let entry = StepLog {
            step: self.step,
            loss: tape.value(loss).item() as f64,
        };
        self.step += 1;
        self.log.push(entry);
        Ok(entry)
    }

    /// Checkpoint bytes: parameters, optimizer moments and the step counter.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let (m, v) = self.adam.moments(&self.model.params);
        let mut named: Vec<(String, Tensor<f32>)> = Vec::new();
        for ((name, t), (mt, vt)) in self.model.params.iter().zip(m.into_iter().zip(v)) {
            named.push((format!("param/{name}"), t.clone()));
            named.push((format!("adam_m/{name}"), mt));
            named.push((format!("adam_v/{name}"), vt));
        }
        // Step counters are stored as raw bits to stay exact.
        let bits = |x: u64| Tensor::new([2], vec![f32::from_bits(x as u32), f32::from_bits((x >> 32) as u32)]).expect("2");
        named.push(("state/step".into(), bits(self.step)));
        named.push(("state/adam_step".into(), bits(self.adam.steps_taken())));
        io::encode_tensors(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        let tensors = io::decode_tensors(bytes)?;
        let find = |name: &str| -> Result<&Tensor<f32>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let unbits = |t: &Tensor<f32>| -> Result<u64> {
            if t.len() != 2 {
                return Err(Error::Format("bad step counter".into()));
            }
            Ok(t.data()[0].to_bits() as u64 | ((t.data()[1].to_bits() as u64) << 32))
        };
        let mut params = crate::tensor::ParamSet::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, _) in self.model.params.iter() {
            params.add(name, find(&format!("param/{name}"))?.clone(), true);
            m.push(find(&format!("adam_m/{name}"))?.data().to_vec());
            v.push(find(&format!("adam_v/{name}"))?.data().to_vec());
        }
        self.model.params.load_from(&params)?;
        self.adam.restore(unbits(find("state/adam_step")?)?, m, v)?;
        self.step = unbits(find("state/step")?)?;
        Ok(())
    }

    /// Runs until `cfg.steps`, checkpointing into `ckpt_dir` every
    /// `cfg.checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        cfg: &TrainConfig,
        source: &SampleSource,
        geos: &GeometrySet,
        ckpt_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<()> {
        cfg.validate()?;
        if self.model.ablation != cfg.ablation {
            return Err(invariant!(
                "model arm {} does not match configured arm {}",
                self.model.ablation.name(),
                cfg.ablation.name()
            ));
        }
        while self.step < cfg.steps {
            let entry = self.step(cfg, source, geos)?;
            on_step(&entry);
            let due = cfg.checkpoint_every > 0 && self.step % cfg.checkpoint_every == 0;
            if let (Some(dir), true) = (ckpt_dir, due || self.step == cfg.steps) {
                io::write_atomic(&dir.join(CHECKPOINT_NAME), &self.checkpoint_bytes())?;
            }
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_NAME)
}

/// Model output for one scene without augmentation.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub texture: Vec<[f32; 3]>,
    /// Mean reference-attention entropy over view groups, across blocks.
    pub ref_entropy: Option<f64>,
}

pub fn predict(model: &ToyModel, geo: &SceneGeometry, view_colors: &[Vec<[f32; 3]>], aug: &Augment) -> Result<Prediction> {
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape);
    let pos = model.encode_positions(&mut tape, &p, geo)?;
    let out = forward_sample(model, &mut tape, &p, geo, pos.as_ref(), view_colors, aug)?;
    let pred = tape.value(out.pred);
    let hw = geo.uv.len();
    let texture = (0..hw)
        .map(|k| {
            if geo.uv.coverage[k] {
                std::array::from_fn(|ch| pred.data()[ch * hw + k])
            } else {
                [0.0; 3]
            }
        })
        .collect();
    let mut ents = Vec::new();
    for ((a, grid), qmask) in out.ref_attention.iter().zip(&out.query_masks) {
        let probs = tape
            .attention_probs(*a)
            .ok_or_else(|| invariant!("reference attention probabilities were not recorded"))?;
        ents.push(group_entropy(probs, model.config.heads, qmask.len(), &grid.groups, qmask));
    }
    let ref_entropy = (!ents.is_empty()).then(|| ents.iter().sum::<f64>() / ents.len() as f64);
    Ok(Prediction { texture, ref_entropy })
}

/// Metrics of one held-out scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub occluded_psnr: Option<f64>,
    pub baseline_psnr: Option<f64>,
    pub baseline_occluded_psnr: Option<f64>,
    /// Fraction of covered texels where the baseline views disagree.
    pub conflict_fraction: f64,
    pub ref_entropy: Option<f64>,
}

pub fn evaluate_sample(model: &ToyModel, geo: &SceneGeometry, sample: &TrainSample) -> Result<SceneEval> {
    let pred = predict(model, geo, &sample.view_colors, &Augment::none(geo.views.len()))?;
    let views = sample.colored_views(geo);
    let base = backproject_bake(
        &geo.uv,
        &geo.cams,
        &views,
        &geo.vis,
        DEFAULT_WEIGHT_POWER,
        DEFAULT_CONFLICT_THRESHOLD,
    )?;
    let filled = naive_fill(&base, &geo.uv.coverage);
    let cov = &geo.uv.coverage;
    let occ = geo.vis.occluded_covered(cov);
    let n_cov = cov.iter().filter(|&&c| c).count().max(1);
    let n_conf = base.conflict.iter().zip(cov).filter(|(&c, &m)| c && m).count();
    let (w, h) = (geo.uv.width, geo.uv.height);
    Ok(SceneEval {
        scene: sample.spec.name(),
        psnr: psnr(&pred.texture, &sample.target, cov)?,
        ssim: ssim(&pred.texture, &sample.target, cov, w, h)?,
        occluded_psnr: psnr(&pred.texture, &sample.target, &occ)?,
        baseline_psnr: psnr(&filled.texture, &sample.target, cov)?,
        baseline_occluded_psnr: psnr(&filled.texture, &sample.target, &occ)?,
        conflict_fraction: n_conf as f64 / n_cov as f64,
        ref_entropy: pred.ref_entropy,
    })
}

/// Mean of the defined values.
pub fn mean_defined(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(model: &ToyModel, geos: &GeometrySet, samples: &[TrainSample]) -> Result<Vec<SceneEval>> {
    samples
        .iter()
        .map(|s| evaluate_sample(model, geos.get(s.spec.mesh)?, s))
        .collect()
}
