//! Warm-up weak supervision followed by self-supervised pair training.

use std::io::Write;
use std::path::{Path, PathBuf};

use ps2kit_grad::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{BinIndex, ObjectCapture, PairIndex};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::geometry::Vec3;
use crate::imaging::{Image, Mask, NormalMap};
use crate::lightspace::{LightBin, LightGrid, FRONTAL_BIN};
use crate::losses::{self, FeatureExtractor, FeatureLayer, LossWeights};
use crate::model::{self, Checkpoint, Model, RngState};
use crate::neural::{self, prefix, Ctx, Depth, Forward, LightingLogits, Mode, PairInputs};
use crate::photometry::{self, OracleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Epochs between learning-rate halvings.
    pub halving_period: usize,
    /// Warm-up iterations, counted inside the total.
    pub warmup_iters: u64,
    /// Images per object labelled by the lstsq oracle.
    pub warmup_samples: usize,
    /// Overrides the epoch length derived from `pairs_per_epoch`.
    pub iters_per_epoch: Option<u64>,
    /// Pairs drawn per object and epoch.
    pub pairs_per_epoch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub feature_layer: FeatureLayer,
    /// Add the reconstruction and relighting losses during warm-up.
    pub warmup_with_main: bool,
    /// Keep the illumination module fixed after warm-up and stop gradients
    /// through its light estimates. Has no effect when warm-up is disabled.
    pub freeze_illumination: bool,
    pub oracle: OracleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 25,
            batch: 32,
            halving_period: 5,
            warmup_iters: 2000,
            warmup_samples: 10,
            iters_per_epoch: None,
            pairs_per_epoch: 320,
            seed: 0,
            weights: LossWeights::default(),
            feature_layer: FeatureLayer::default(),
            warmup_with_main: false,
            freeze_illumination: false,
            oracle: OracleConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `lr * 0.5^floor(epoch / halving_period)`.
    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.halving_period as u64) as i32)
    }

    pub fn iters_per_epoch(&self, n_objects: usize) -> u64 {
        self.iters_per_epoch
            .unwrap_or_else(|| ((self.pairs_per_epoch * n_objects) as u64).div_ceil(self.batch as u64))
            .max(1)
    }

    pub fn total_iterations(&self, n_objects: usize) -> u64 {
        self.epochs as u64 * self.iters_per_epoch(n_objects)
    }

    pub fn validate(&self, warmup: bool, n_objects: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch == 0 || self.halving_period == 0 || self.pairs_per_epoch == 0 {
            return bad("epochs, batch, halving period and pairs per epoch must be positive".into());
        }
        if self.iters_per_epoch == Some(0) {
            return bad("iterations per epoch must be positive".into());
        }
        if warmup && self.warmup_samples < 3 {
            return bad(format!("warm-up needs at least 3 oracle samples, got {}", self.warmup_samples));
        }
        if warmup && self.warmup_iters > self.total_iterations(n_objects) {
            return bad(format!(
                "{} warm-up iterations exceed the {} total",
                self.warmup_iters,
                self.total_iterations(n_objects)
            ));
        }
        self.weights.validate()
    }
}

/// Oracle labels of one object.
#[derive(Clone, Debug)]
pub struct WarmupLabels {
    /// Sample indices the labels belong to, one per bin when possible.
    pub samples: Vec<usize>,
    pub normals: NormalMap,
    pub valid: Mask,
    pub albedo: Vec<Image>,
    /// Albedo supervision restricted to valid normals.
    pub supervision: Vec<Mask>,
    pub bins: Vec<LightBin>,
}

/// Ground truth for supervised mode.
#[derive(Clone, Debug)]
pub struct TruthLabels {
    pub normals: NormalMap,
    pub albedo: Option<Image>,
    pub bins: Vec<LightBin>,
}

/// A training object: its images without ground truth plus derived labels.
#[derive(Clone, Debug)]
pub struct TrainObject {
    pub capture: ObjectCapture,
    pub index: BinIndex,
    pub warmup: Option<WarmupLabels>,
    pub truth: Option<TruthLabels>,
}

/// Pick `n` samples from distinct bins, repeating bins only once all are used.
pub fn pick_oracle_samples(index: &BinIndex, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut bins: Vec<LightBin> = index.bins().copied().collect();
    bins.shuffle(rng);
    let mut pools: Vec<Vec<usize>> = bins
        .iter()
        .map(|b| {
            let mut s = index.samples_in(*b).to_vec();
            s.shuffle(rng);
            s
        })
        .collect();
    let total: usize = pools.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(n.min(total));
    while out.len() < n.min(total) {
        for pool in pools.iter_mut() {
            if out.len() == n.min(total) {
                break;
            }
            if let Some(s) = pool.pop() {
                out.push(s);
            }
        }
    }
    out
}

/// Oracle labels from `n` samples whose lights are taken as their bin centres.
pub fn warmup_labels(
    capture: &ObjectCapture,
    index: &BinIndex,
    grid: &LightGrid,
    n: usize,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<WarmupLabels> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = pick_oracle_samples(index, n, &mut rng);
    let bins = capture.bins(grid)?;
    let images: Vec<Image> = samples.iter().map(|&k| capture.samples[k].image.clone()).collect();
    let lights: Vec<Vec3> = samples.iter().map(|&k| grid.direction_of(bins[k])).collect::<Result<_>>()?;
    let fit = photometry::lstsq_normals(&images, &lights, &capture.mask, cfg)?;
    let weak = photometry::decompose_weak_labels(&images, &lights, &fit.normals, &capture.mask, grid, cfg)?;
    let supervision = weak
        .supervision
        .iter()
        .map(|m| Mask {
            width: m.width,
            height: m.height,
            data: m.data.iter().zip(&fit.valid.data).map(|(a, b)| *a && *b).collect(),
        })
        .collect();
    Ok(WarmupLabels { samples, normals: fit.normals, valid: fit.valid, albedo: weak.albedo, supervision, bins: weak.bins })
}

impl TrainObject {
    pub fn new(capture: &ObjectCapture, grid: &LightGrid, config: &TrainConfig, warmup: bool, mode: Mode, seed: u64) -> Result<Self> {
        let index = BinIndex::new(capture, grid)?;
        let truth = if mode == Mode::Supervised {
            let gt = capture
                .ground_truth()
                .ok_or_else(|| Error::MissingLabels(format!("supervised mode needs ground truth for {}", capture.name)))?;
            Some(TruthLabels { normals: gt.normals.clone(), albedo: gt.albedo.clone(), bins: capture.bins(grid)? })
        } else {
            None
        };
        if mode == Mode::Frontal && index.samples_in(FRONTAL_BIN).is_empty() {
            return Err(Error::MissingLabels(format!("frontal mode needs a frontally lit image of {}", capture.name)));
        }
        let warmup = if warmup {
            Some(warmup_labels(capture, &index, grid, config.warmup_samples, &config.oracle, seed)?)
        } else {
            None
        };
        Ok(Self { capture: capture.without_truth(), index, warmup, truth })
    }
}

/// A stacked batch of pairs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: PairInputs<f32>,
    /// `(object, pair)` per batch element.
    pub pairs: Vec<(usize, PairIndex)>,
}

pub fn assemble_batch(objects: &[TrainObject], pairs: Vec<(usize, PairIndex)>) -> Result<Batch> {
    let first: Vec<&Image> = pairs.iter().map(|(o, p)| &objects[*o].capture.samples[p.first].image).collect();
    let second: Vec<&Image> = pairs.iter().map(|(o, p)| &objects[*o].capture.samples[p.second].image).collect();
    let masks: Vec<&Mask> = pairs.iter().map(|(o, _)| &objects[*o].capture.mask).collect();
    let inputs = PairInputs {
        first: model::stack_images(&first)?,
        second: model::stack_images(&second)?,
        mask: model::stack_masks(&masks)?,
    };
    Ok(Batch { inputs, pairs })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_relight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_warmup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
}

/// Loss parts of one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub relight: f64,
    pub warmup: Option<f64>,
}

/// Ground truth used only to report normal error during training.
#[derive(Clone, Debug)]
pub struct Monitor {
    pub captures: Vec<ObjectCapture>,
    /// Report MAE every this many iterations.
    pub every: u64,
    pub seed: u64,
}

impl Monitor {
    /// Mean MAE over objects on one fixed pair each.
    pub fn mae(&self, model: &Model) -> Result<Option<f64>> {
        let grid = model.grid();
        let mut vals = Vec::new();
        for c in &self.captures {
            let Some(gt) = c.ground_truth() else { continue };
            let p = crate::datasets::sample_pair_indices(c, 1, self.seed, &grid)?[0];
            let inputs = PairInputs {
                first: model::stack_images(&[&c.samples[p.first].image])?,
                second: model::stack_images(&[&c.samples[p.second].image])?,
                mask: model::stack_masks(&[&c.mask])?,
            };
            let pred = model.predict(&inputs)?;
            vals.push(evaluation::mae(&evaluation::normals_from_tensor(&pred.normals, 0), &gt.normals, &c.mask)?);
        }
        Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
    }
}

/// Model, optimiser and sampling state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: ps2kit_grad::Adam<f32>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    pub objects: Vec<TrainObject>,
    fx: FeatureExtractor,
}

fn stack_maps(maps: &[&NormalMap]) -> Result<Tensor<f32>> {
    let imgs: Vec<Image> = maps.iter().map(|m| m.to_image()).collect();
    model::stack_images(&imgs.iter().collect::<Vec<_>>())
}

fn slice_logits<'g>(l: &LightingLogits<'g, f32>, start: usize, len: usize) -> LightingLogits<'g, f32> {
    LightingLogits { elevation: l.elevation.slice_batch(start, len), azimuth: l.azimuth.slice_batch(start, len) }
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model, captures: &[ObjectCapture]) -> Result<Self> {
        let state = TrainState {
            model,
            optimizer: Default::default(),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        Self::with_state(config, state, captures)
    }

    /// Continue from a checkpoint with the same configuration and data.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint, captures: &[ObjectCapture]) -> Result<Self> {
        let state = TrainState { model: ckpt.model, optimizer: ckpt.optimizer, iteration: ckpt.iteration, rng: ckpt.rng.restore()? };
        Self::with_state(config, state, captures)
    }

    fn with_state(config: TrainConfig, state: TrainState, captures: &[ObjectCapture]) -> Result<Self> {
        if captures.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let abl = state.model.ablation;
        abl.validate()?;
        config.validate(abl.warmup, captures.len())?;
        let (w, h) = (captures[0].width(), captures[0].height());
        if captures.iter().any(|c| c.width() != w || c.height() != h) {
            return Err(Error::Shape("training objects must share a resolution".into()));
        }
        let grid = state.model.grid();
        let objects = captures
            .iter()
            .enumerate()
            .map(|(k, c)| TrainObject::new(c, &grid, &config, abl.warmup, abl.mode, config.seed ^ (0x0_5a_11 + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        let fx = FeatureExtractor::new(config.feature_layer, 0x5eed);
        Ok(Self { config, state, objects, fx })
    }

    pub fn iters_per_epoch(&self) -> u64 {
        self.config.iters_per_epoch(self.objects.len())
    }

    pub fn total_iterations(&self) -> u64 {
        self.config.total_iterations(self.objects.len())
    }

    pub fn epoch(&self) -> u64 {
        self.state.iteration / self.iters_per_epoch()
    }

    pub fn in_warmup(&self) -> bool {
        self.state.model.ablation.warmup && self.state.iteration < self.config.warmup_iters
    }

    /// Draw the next batch from the pair stream.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let warm = self.in_warmup();
        let mode = self.state.model.ablation.mode;
        let mut pairs = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let o = rand::Rng::random_range(&mut self.state.rng, 0..self.objects.len());
            let obj = &self.objects[o];
            let p = if warm {
                let labels = obj.warmup.as_ref().ok_or_else(|| Error::MissingLabels("warm-up labels".into()))?;
                let n = labels.samples.len();
                let i = rand::Rng::random_range(&mut self.state.rng, 0..n);
                let mut j = rand::Rng::random_range(&mut self.state.rng, 0..n - 1);
                if j >= i {
                    j += 1;
                }
                PairIndex { first: i, second: j, bins: (labels.bins[i], labels.bins[j]) }
            } else if mode == Mode::Frontal {
                obj.index.draw_with_first(FRONTAL_BIN, &mut self.state.rng)?
            } else {
                obj.index.draw(&mut self.state.rng)
            };
            pairs.push((o, p));
        }
        if warm {
            let mapped = pairs
                .iter()
                .map(|(o, p)| {
                    let s = &self.objects[*o].warmup.as_ref().expect("checked").samples;
                    (*o, PairIndex { first: s[p.first], second: s[p.second], bins: p.bins })
                })
                .collect::<Vec<_>>();
            let mut batch = assemble_batch(&self.objects, mapped)?;
            batch.pairs = pairs;
            return Ok(batch);
        }
        assemble_batch(&self.objects, pairs)
    }

    /// Reconstruction and relighting terms.
    fn main_loss<'g>(&self, ctx: &Ctx<'g, '_, f32>, f: &Forward<'g, f32>, inputs: &PairInputs<f32>) -> Result<(Var<'g, f32>, f64, f64)> {
        let b = inputs.batch();
        let w = &self.config.weights;
        let i1 = ctx.constant(inputs.first.clone());
        let i2 = ctx.constant(inputs.second.clone());
        let recon = f.reconstruction.expect("full depth");
        let r1 = losses::loss_total(recon.slice_batch(0, b), i1, f.mask, w, &self.fx)?.total;
        let r2 = losses::loss_total(recon.slice_batch(b, b), i2, f.mask, w, &self.fx)?.total;
        let mut total = r1.add(r2);
        let rec = total.value().item() as f64;
        let mut rel = 0.0;
        if let Some(relit) = f.relit {
            let t = losses::loss_total(relit, i1, f.mask, w, &self.fx)?.total;
            rel = t.value().item() as f64;
            total = total.add(t);
        }
        Ok((total, rec, rel))
    }

    /// Oracle-label terms for a warm-up batch.
    fn warmup_loss<'g>(&self, ctx: &Ctx<'g, '_, f32>, f: &Forward<'g, f32>, batch: &Batch) -> Result<Var<'g, f32>> {
        let labels: Vec<&WarmupLabels> = batch.pairs.iter().map(|(o, _)| self.objects[*o].warmup.as_ref().expect("warm-up labels")).collect();
        let albedo: Vec<&Image> = batch
            .pairs
            .iter()
            .zip(&labels)
            .map(|((_, p), l)| &l.albedo[p.first])
            .chain(batch.pairs.iter().zip(&labels).map(|((_, p), l)| &l.albedo[p.second]))
            .collect();
        let sup: Vec<&Mask> = batch
            .pairs
            .iter()
            .zip(&labels)
            .map(|((_, p), l)| &l.supervision[p.first])
            .chain(batch.pairs.iter().zip(&labels).map(|((_, p), l)| &l.supervision[p.second]))
            .collect();
        let target = ctx.constant(model::stack_images(&albedo)?);
        let sup_mask = ctx.constant(model::stack_masks(&sup)?);
        let mut total = losses::loss_total(f.coarse_albedo, target, sup_mask, &self.config.weights, &self.fx)?.total;
        if let Some(logits) = &f.logits {
            let bins: Vec<LightBin> = batch.pairs.iter().map(|(_, p)| p.bins.0).chain(batch.pairs.iter().map(|(_, p)| p.bins.1)).collect();
            total = total.add(losses::loss_lighting_ce(logits, &bins)?);
        }
        let normals: Vec<&NormalMap> = labels.iter().map(|l| &l.normals).collect();
        let valid: Vec<&Mask> = labels.iter().map(|l| &l.valid).collect();
        let n_target = ctx.constant(stack_maps(&normals)?);
        let n_mask = ctx.constant(model::stack_masks(&valid)?);
        Ok(total.add(losses::loss_normal(f.normals, n_target, n_mask)?))
    }

    /// Extra terms of the frontal and supervised modes.
    fn mode_loss<'g>(&self, ctx: &Ctx<'g, '_, f32>, f: &Forward<'g, f32>, batch: &Batch) -> Result<Option<Var<'g, f32>>> {
        let b = batch.inputs.batch();
        match self.state.model.ablation.mode {
            Mode::SelfSupervised => Ok(None),
            Mode::Frontal => {
                let logits = f.logits.as_ref().expect("frontal mode requires lighting");
                Ok(Some(losses::loss_lighting_ce(&slice_logits(logits, 0, b), &vec![FRONTAL_BIN; b])?))
            }
            Mode::Supervised => {
                let truths: Vec<&TruthLabels> =
                    batch.pairs.iter().map(|(o, _)| self.objects[*o].truth.as_ref().expect("supervised labels")).collect();
                let normals: Vec<&NormalMap> = truths.iter().map(|t| &t.normals).collect();
                let mut total = losses::loss_normal(f.normals, ctx.constant(stack_maps(&normals)?), f.mask)?;
                if let Some(logits) = &f.logits {
                    let bins: Vec<LightBin> = batch
                        .pairs
                        .iter()
                        .zip(&truths)
                        .map(|((_, p), t)| t.bins[p.first])
                        .chain(batch.pairs.iter().zip(&truths).map(|((_, p), t)| t.bins[p.second]))
                        .collect();
                    total = total.add(losses::loss_lighting_ce(logits, &bins)?);
                }
                if truths.iter().all(|t| t.albedo.is_some()) {
                    let a: Vec<&Image> = truths.iter().map(|t| t.albedo.as_ref().expect("checked")).collect();
                    let a2: Vec<&Image> = a.iter().chain(a.iter()).copied().collect();
                    let masks = Var::cat_batch(&[f.mask, f.mask]);
                    let t = losses::loss_total(f.albedo(), ctx.constant(model::stack_images(&a2)?), masks, &self.config.weights, &self.fx)?;
                    total = total.add(t.total);
                }
                Ok(Some(total))
            }
        }
    }

    /// One optimiser step on `batch`; warm-up or main according to the
    /// current iteration.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepRecord> {
        let warm = self.in_warmup();
        let abl = self.state.model.ablation;
        let iteration = self.state.iteration;
        let epoch = self.epoch();
        let lr = self.config.lr_at(epoch);
        let dropout_seed = self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ iteration;
        let (parts, grads, stats) = {
            let g = Graph::new();
            let mut ctx = Ctx::new(&g, &self.state.model.params, self.state.model.config, true, dropout_seed);
            if self.config.freeze_illumination && abl.warmup && !warm {
                ctx = ctx.freeze(prefix::ILLUMINATION);
            }
            let depth = if warm && !self.config.warmup_with_main { Depth::Estimates } else { Depth::Full };
            let f = neural::forward(&ctx, &abl, &batch.inputs, depth)?;
            let mut parts = LossParts::default();
            let mut total: Option<Var<'_, f32>> = None;
            if depth == Depth::Full {
                let (m, rec, rel) = self.main_loss(&ctx, &f, &batch.inputs)?;
                parts.recon = rec;
                parts.relight = rel;
                total = Some(m);
            }
            if warm {
                let w = self.warmup_loss(&ctx, &f, batch)?;
                parts.warmup = Some(w.value().item() as f64);
                total = Some(total.map_or(w, |t| t.add(w)));
            } else if let Some(extra) = self.mode_loss(&ctx, &f, batch)? {
                total = Some(total.map_or(extra, |t| t.add(extra)));
            }
            let total = total.expect("at least one loss term");
            parts.total = total.value().item() as f64;
            if !parts.total.is_finite() {
                return Err(Error::Domain(format!("non-finite loss at iteration {iteration}")));
            }
            let grads = g.backward(total);
            (parts, ctx.param_grads(&grads), ctx.take_stats())
        };
        self.state.optimizer.step(&mut self.state.model.params, &grads, lr as f32);
        neural::update_running_stats(&mut self.state.model.params, &stats, self.state.model.config.bn_momentum);
        self.state.iteration += 1;
        Ok(StepRecord {
            iter: iteration,
            epoch,
            lr,
            loss_total: parts.total,
            loss_recon: parts.recon,
            loss_relight: parts.relight,
            loss_warmup: parts.warmup,
            mae: None,
        })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }

    /// Main objective on `batch` with eval-mode normalisation; no update.
    pub fn objective_value(&self, batch: &Batch) -> Result<f64> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.state.model.params, self.state.model.config, false, 0);
        let f = neural::forward(&ctx, &self.state.model.ablation, &batch.inputs, Depth::Full)?;
        Ok(self.main_loss(&ctx, &f, &batch.inputs)?.0.value().item() as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.state.model.clone(),
            optimizer: self.state.optimizer.clone(),
            iteration: self.state.iteration,
            epoch: self.epoch(),
            rng: RngState::capture(&self.state.rng),
            train_config: serde_json::to_value(&self.config)?,
        })
    }

    /// Train to the configured total. With `out`, appends `metrics.jsonl`
    /// and writes `checkpoints/epoch_NNN.ckpt` plus `last.ckpt` after every
    /// epoch.
    pub fn run(&mut self, out: Option<&Path>, monitor: Option<&Monitor>) -> Result<Vec<StepRecord>> {
        let mut log = None;
        let mut ckpt_dir = PathBuf::new();
        if let Some(dir) = out {
            ckpt_dir = dir.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            let path = dir.join("metrics.jsonl");
            let f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            log = Some((path, std::io::BufWriter::new(f)));
        }
        let ipe = self.iters_per_epoch();
        let mut records = Vec::new();
        while self.state.iteration < self.total_iterations() {
            let mut rec = self.step()?;
            if let Some(m) = monitor {
                if m.every > 0 && rec.iter % m.every == 0 {
                    rec.mae = m.mae(&self.state.model)?;
                }
            }
            if let Some((path, w)) = log.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if self.state.iteration % ipe == 0 && out.is_some() {
                if let Some((path, w)) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                }
                let ckpt = self.checkpoint()?;
                ckpt.save(&ckpt_dir.join(format!("epoch_{:03}.ckpt", self.state.iteration / ipe - 1)))?;
                ckpt.save(&ckpt_dir.join("last.ckpt"))?;
            }
            records.push(rec);
        }
        if let Some((path, w)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(records)
    }
}
