//! The network modules: a shared encoder with normal and albedo decoders,
//! the illumination classifier, albedo refinement, reconstruction and
//! relighting hourglasses, and the lighting-feature subnetwork.
//!
//! Every module is a function of a [`Ctx`], which resolves named parameters
//! from a [`ParamStore`] into graph leaves and decides between batch and
//! running normalisation statistics.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ps2kit_grad::{BatchStats, Gradients, Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::lightspace::{LightBin, LightGrid};

/// Training regime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "selfsup")]
    SelfSupervised,
    /// One image of every pair is frontally lit and its known light
    /// supervises the illumination module.
    #[serde(rename = "frontal")]
    Frontal,
    /// Ground-truth normals, lights and (when present) albedo supervise the
    /// corresponding outputs.
    #[serde(rename = "supervised")]
    Supervised,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selfsup" => Ok(Mode::SelfSupervised),
            "frontal" => Ok(Mode::Frontal),
            "supervised" => Ok(Mode::Supervised),
            other => Err(Error::Config(format!("unknown mode {other:?} (selfsup, frontal, supervised)"))),
        }
    }
}

/// Which parts of the pipeline are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Lighting estimation.
    pub lighting: bool,
    /// Albedo refinement.
    pub refinement: bool,
    /// Positional encoding of the specular cues fed to refinement.
    pub encoding: bool,
    /// Cross-image relighting branch.
    pub relighting: bool,
    pub mode: Mode,
    pub warmup: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { lighting: true, refinement: true, encoding: true, relighting: true, mode: Mode::SelfSupervised, warmup: true }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refinement && !self.lighting {
            return Err(Error::Config("albedo refinement requires lighting estimation".into()));
        }
        if self.encoding && !self.refinement {
            return Err(Error::Config("positional encoding requires albedo refinement".into()));
        }
        if self.relighting && !self.lighting {
            return Err(Error::Config("image relighting requires lighting estimation".into()));
        }
        if self.mode == Mode::Frontal && !self.lighting {
            return Err(Error::Config("frontal mode supervises lighting estimation, which is disabled".into()));
        }
        Ok(())
    }
}

/// Sizes and numerical constants of the networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Every layer width is divided by this (minimum width 1).
    pub width_div: usize,
    /// Frequencies of the specular-cue encoding.
    pub encoding_freqs: usize,
    /// Append the object mask to the reconstruction input.
    pub mask_in_recon: bool,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub light_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width_div: 1,
            encoding_freqs: 3,
            mask_in_recon: false,
            dropout: 0.25,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            light_bins: crate::lightspace::BINS_PER_AXIS,
        }
    }
}

const ENC_DOWN: [usize; 5] = [32, 64, 128, 256, 512];
const DEC_UP: [usize; 5] = [256, 128, 64, 32, 64];
const REFINE_DOWN: [usize; 3] = [128, 128, 256];
const REFINE_UP: [usize; 3] = [128, 128, 64];
const RECON_DOWN: [usize; 4] = [64, 128, 128, 256];
const RECON_UP: [usize; 4] = [128, 128, 64, 64];
const ILLUM_CONV: [usize; 3] = [64, 128, 256];
const ILLUM_HEAD: [usize; 2] = [256, 64];
const LIGHT_FEAT: [usize; 5] = [64, 128, 128, 256, 256];

/// Encoder input spatial sizes must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 1 << ENC_DOWN.len();

impl ModelConfig {
    fn w(&self, c: usize) -> usize {
        (c / self.width_div.max(1)).max(1)
    }

    /// Channels of the specular-cue map `L_i`.
    pub fn light_code_channels(&self, abl: &AblationConfig) -> usize {
        if abl.encoding {
            2 + 4 * self.encoding_freqs
        } else {
            2
        }
    }

    /// Input channels of the albedo refinement module.
    pub fn refine_in(&self, abl: &AblationConfig) -> usize {
        9 + self.light_code_channels(abl)
    }

    /// Input channels of the reconstruction module.
    pub fn recon_in(&self, abl: &AblationConfig) -> usize {
        9 + if abl.lighting { 3 } else { 0 } + usize::from(self.mask_in_recon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_div == 0 {
            return Err(Error::Config("width_div must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.light_bins == 0 {
            return Err(Error::Config("light_bins must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv { cin: usize, cout: usize, k: usize, bias: bool, gain: f64 },
    ConvT { cin: usize, cout: usize, k: usize },
    Norm(usize),
    Linear { cin: usize, cout: usize },
}

/// Parameter-name prefixes of each module.
pub mod prefix {
    pub const ENCODER: &str = "enc";
    pub const NORMAL: &str = "ndec";
    pub const ALBEDO: &str = "adec";
    pub const ILLUMINATION: &str = "illum";
    pub const REFINE: &str = "refine";
    pub const RECON: &str = "recon";
    pub const RELIGHT: &str = "relight";
    pub const LIGHT_FEATURE: &str = "lfeat";
}

fn down_layers(out: &mut Vec<(String, Layer)>, cfg: &ModelConfig, p: &str, cin: usize, widths: &[usize]) {
    let mut c = cin;
    for (i, &w) in widths.iter().enumerate() {
        let cout = cfg.w(w);
        let k = if i == 0 { 6 } else { 4 };
        out.push((format!("{p}.d{i}"), Layer::Conv { cin: c, cout, k, bias: false, gain: 2.0 }));
        out.push((format!("{p}.d{i}.bn"), Layer::Norm(cout)));
        c = cout;
    }
}

fn up_layers(out: &mut Vec<(String, Layer)>, cfg: &ModelConfig, p: &str, downs: &[usize], ups: &[usize], cout_final: usize) {
    let n = downs.len();
    let mut c = cfg.w(downs[n - 1]);
    for (i, &w) in ups.iter().enumerate() {
        if i > 0 {
            c += cfg.w(downs[n - 1 - i]);
        }
        let cout = cfg.w(w);
        out.push((format!("{p}.u{i}"), Layer::ConvT { cin: c, cout, k: 4 }));
        out.push((format!("{p}.u{i}.bn"), Layer::Norm(cout)));
        c = cout;
    }
    out.push((format!("{p}.out"), Layer::Conv { cin: c, cout: cout_final, k: 5, bias: true, gain: 1.0 }));
}

fn illumination_layers(out: &mut Vec<(String, Layer)>, cfg: &ModelConfig) {
    let p = prefix::ILLUMINATION;
    let mut c = 9;
    for (i, &w) in ILLUM_CONV.iter().enumerate() {
        let cout = cfg.w(w);
        out.push((format!("{p}.c{i}"), Layer::Conv { cin: c, cout, k: 3, bias: false, gain: 2.0 }));
        out.push((format!("{p}.c{i}.bn"), Layer::Norm(cout)));
        c = cout;
    }
    for head in ["el", "az"] {
        let mut h = c;
        for (j, &w) in ILLUM_HEAD.iter().enumerate() {
            let cout = cfg.w(w);
            out.push((format!("{p}.{head}.fc{j}"), Layer::Linear { cin: h, cout }));
            h = cout;
        }
        out.push((format!("{p}.{head}.out"), Layer::Linear { cin: h, cout: cfg.light_bins }));
    }
}

fn lighting_feature_layers(out: &mut Vec<(String, Layer)>, cfg: &ModelConfig) {
    let mut c = 3;
    for (i, &w) in LIGHT_FEAT.iter().enumerate() {
        let cout = cfg.w(w);
        let k = if i < 2 { 1 } else { 3 };
        let bias = !(1..=3).contains(&i);
        out.push((format!("{}.c{i}", prefix::LIGHT_FEATURE), Layer::Conv { cin: c, cout, k, bias, gain: 1.0 }));
        if !bias {
            out.push((format!("{}.c{i}.bn", prefix::LIGHT_FEATURE), Layer::Norm(cout)));
        }
        c = cout;
    }
}

fn architecture(cfg: &ModelConfig, abl: &AblationConfig) -> Vec<(String, Layer)> {
    use prefix::*;
    let mut l = Vec::new();
    down_layers(&mut l, cfg, ENCODER, 7, &ENC_DOWN);
    up_layers(&mut l, cfg, NORMAL, &ENC_DOWN, &DEC_UP, 3);
    up_layers(&mut l, cfg, ALBEDO, &ENC_DOWN, &DEC_UP, 6);
    illumination_layers(&mut l, cfg);
    down_layers(&mut l, cfg, REFINE, cfg.refine_in(abl), &REFINE_DOWN);
    up_layers(&mut l, cfg, REFINE, &REFINE_DOWN, &REFINE_UP, 3);
    down_layers(&mut l, cfg, RECON, cfg.recon_in(abl), &RECON_DOWN);
    up_layers(&mut l, cfg, RECON, &RECON_DOWN, &RECON_UP, 3);
    down_layers(&mut l, cfg, RELIGHT, 7, &RECON_DOWN);
    up_layers(&mut l, cfg, RELIGHT, &RECON_DOWN, &RECON_UP, 3);
    lighting_feature_layers(&mut l, cfg);
    l
}

/// Freshly initialised parameters of every module. Disabled modules keep
/// their parameters (so they can be checked for zero gradient); `abl` only
/// fixes input widths.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, abl: &AblationConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut normal = |n: usize, std: f64| -> Tensor<T> {
        Tensor::from_fn(vec![n], |_| T::cst(std * rng.sample::<f64, _>(StandardNormal)))
    };
    for (name, layer) in architecture(cfg, abl) {
        match layer {
            Layer::Conv { cin, cout, k, bias, gain } => {
                let std = (gain / (cin * k * k) as f64).sqrt();
                store.insert(format!("{name}.w"), normal(cout * cin * k * k, std).reshape([cout, cin, k, k]), true);
                if bias {
                    store.insert(format!("{name}.b"), Tensor::zeros([cout]), true);
                }
            }
            Layer::ConvT { cin, cout, k } => {
                // each output pixel of a stride-2 transposed conv sees a quarter of the kernel
                let std = (2.0 * 4.0 / (cin * k * k) as f64).sqrt();
                store.insert(format!("{name}.w"), normal(cin * cout * k * k, std).reshape([cin, cout, k, k]), true);
            }
            Layer::Norm(c) => {
                store.insert(format!("{name}.gamma"), Tensor::full([c], T::one()), true);
                store.insert(format!("{name}.beta"), Tensor::zeros([c]), true);
                store.insert(format!("{name}.mean"), Tensor::zeros([c]), false);
                store.insert(format!("{name}.var"), Tensor::full([c], T::one()), false);
            }
            Layer::Linear { cin, cout } => {
                let std = (2.0 / cin as f64).sqrt();
                store.insert(format!("{name}.w"), normal(cout * cin, std).reshape([cout, cin]), true);
                store.insert(format!("{name}.b"), Tensor::zeros([cout]), true);
            }
        }
    }
    store
}

/// Evaluation context for one forward pass.
pub struct Ctx<'g, 'p, T: Scalar> {
    pub graph: &'g Graph<T>,
    params: &'p ParamStore<T>,
    pub config: ModelConfig,
    /// Batch statistics and active dropout when true.
    pub train: bool,
    leaves: RefCell<BTreeMap<String, Var<'g, T>>>,
    frozen: Vec<String>,
    stats: RefCell<Vec<(String, BatchStats<T>)>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<'g, 'p, T: Scalar> Ctx<'g, 'p, T> {
    pub fn new(graph: &'g Graph<T>, params: &'p ParamStore<T>, config: ModelConfig, train: bool, seed: u64) -> Self {
        Self {
            graph,
            params,
            config,
            train,
            leaves: RefCell::new(BTreeMap::new()),
            frozen: Vec::new(),
            stats: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Parameters under `prefix` enter the graph as constants.
    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen.push(format!("{prefix}."));
        self
    }

    pub fn is_frozen(&self, prefix: &str) -> bool {
        self.frozen.iter().any(|p| p.strip_suffix('.') == Some(prefix))
    }

    /// The graph node of a named parameter, created on first use.
    pub fn param(&self, name: &str) -> Var<'g, T> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let entry = self.params.entry(name).unwrap_or_else(|| panic!("parameter {name} is not in the store"));
        let frozen = !entry.trainable || self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = if frozen {
            self.graph.constant(entry.tensor.clone())
        } else {
            self.graph.leaf(entry.tensor.clone())
        };
        self.leaves.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    /// Gradients of every trainable parameter touched by this pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.leaves
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    /// Names of parameters that entered the graph as trainable leaves.
    pub fn touched(&self) -> Vec<String> {
        self.leaves.borrow().iter().filter(|(_, v)| v.requires_grad()).map(|(k, _)| k.clone()).collect()
    }

    /// Batch statistics recorded by training-mode normalisation layers.
    pub fn take_stats(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    fn norm(&self, name: &str, x: Var<'g, T>) -> Var<'g, T> {
        let gamma = self.param(&format!("{name}.gamma"));
        let beta = self.param(&format!("{name}.beta"));
        let eps = T::cst(self.config.bn_eps);
        if self.train {
            let (y, stats) = x.batch_norm_train(gamma, beta, eps);
            self.stats.borrow_mut().push((name.to_string(), stats));
            y
        } else {
            let mean = self.params.get(&format!("{name}.mean")).expect("running mean");
            let var = self.params.get(&format!("{name}.var")).expect("running variance");
            x.batch_norm_eval(gamma, beta, mean.data(), var.data(), eps)
        }
    }

    fn conv(&self, name: &str, x: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let w = self.param(&format!("{name}.w"));
        let b_name = format!("{name}.b");
        let b = self.has(&b_name).then(|| self.param(&b_name));
        x.conv2d(w, b, stride, pad)
    }

    fn linear(&self, name: &str, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(self.param(&format!("{name}.w")), Some(self.param(&format!("{name}.b"))))
    }

    fn dropout(&self, x: Var<'g, T>) -> Var<'g, T> {
        let p = self.config.dropout;
        if !self.train || p == 0.0 {
            return x;
        }
        let keep = T::cst(1.0 / (1.0 - p));
        let mut rng = self.rng.borrow_mut();
        let mask = Tensor::from_fn(x.shape(), |_| if rng.random::<f64>() < p { T::zero() } else { keep });
        x.mul(self.graph.constant(mask))
    }

    fn down_path(&self, p: &str, x: Var<'g, T>, stages: usize) -> Vec<Var<'g, T>> {
        let mut out = Vec::with_capacity(stages);
        let mut h = x;
        for i in 0..stages {
            let name = format!("{p}.d{i}");
            h = if i == 0 { self.conv(&name, h, 2, 2) } else { self.conv(&name, h, 2, 1) };
            h = self.norm(&format!("{name}.bn"), h).relu();
            out.push(h);
        }
        out
    }

    /// Decoder half of an hourglass; `bottleneck` replaces the deepest skip.
    fn up_path(&self, p: &str, skips: &[Var<'g, T>], bottleneck: Var<'g, T>) -> Var<'g, T> {
        let n = skips.len();
        let mut h = bottleneck;
        for i in 0..n {
            if i > 0 {
                h = Var::cat_channels(&[h, skips[n - 1 - i]]);
            }
            let name = format!("{p}.u{i}");
            h = h.conv_transpose2d(self.param(&format!("{name}.w")), None, 2, 1);
            h = self.norm(&format!("{name}.bn"), h).relu();
        }
        self.conv(&format!("{p}.out"), h, 1, 2).tanh()
    }
}

/// Map a tanh output from `(-1, 1)` to `(0, 1)`.
fn unit_range<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    x.offset(T::one()).scale(T::cst(0.5))
}

/// Encoder features: the output of every stride-2 stage, deepest last.
pub struct Encoded<'g, T: Scalar> {
    pub stages: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Encoded<'g, T> {
    pub fn bottleneck(&self) -> Var<'g, T> {
        *self.stages.last().expect("encoder has stages")
    }
}

fn check_spatial(shape: &[usize], multiple: usize) -> Result<()> {
    let (h, w) = (shape[2], shape[3]);
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::Shape(format!("spatial size {h}x{w} is not a positive multiple of {multiple}")));
    }
    Ok(())
}

/// Joint features of both images and the mask.
pub fn encode<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    i1: Var<'g, T>,
    i2: Var<'g, T>,
    mask: Var<'g, T>,
) -> Result<Encoded<'g, T>> {
    check_spatial(&i1.shape(), SPATIAL_MULTIPLE)?;
    let x = Var::cat_channels(&[i1, i2, mask]);
    Ok(Encoded { stages: ctx.down_path(prefix::ENCODER, x, ENC_DOWN.len()) })
}

/// Unit normals inside the mask, zero outside.
pub fn decode_normal<'g, T: Scalar>(ctx: &Ctx<'g, '_, T>, enc: &Encoded<'g, T>, mask: Var<'g, T>) -> Var<'g, T> {
    let raw = ctx.up_path(prefix::NORMAL, &enc.stages, enc.bottleneck());
    raw.normalize_channels(T::cst(1e-12)).mul_channelwise(mask)
}

/// Coarse albedos of the two images in `[0, 1]`.
pub fn decode_albedo<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    enc: &Encoded<'g, T>,
    mask: Var<'g, T>,
) -> (Var<'g, T>, Var<'g, T>) {
    let a = unit_range(ctx.up_path(prefix::ALBEDO, &enc.stages, enc.bottleneck())).mul_channelwise(mask);
    (a.slice_channels(0, 3), a.slice_channels(3, 3))
}

/// Elevation and azimuth logits, each `(b, bins)`.
#[derive(Clone, Copy)]
pub struct LightingLogits<'g, T: Scalar> {
    pub elevation: Var<'g, T>,
    pub azimuth: Var<'g, T>,
}

pub fn estimate_lighting<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    normals: Var<'g, T>,
    albedo: Var<'g, T>,
    image: Var<'g, T>,
) -> LightingLogits<'g, T> {
    let p = prefix::ILLUMINATION;
    let mut h = Var::cat_channels(&[normals, albedo, image]);
    for i in 0..ILLUM_CONV.len() {
        h = ctx.conv(&format!("{p}.c{i}"), h, 1, 0);
        h = ctx.norm(&format!("{p}.c{i}.bn"), h).relu();
    }
    let pooled = h.global_avg_pool();
    let head = |name: &str| {
        let mut z = pooled;
        for j in 0..ILLUM_HEAD.len() {
            z = ctx.dropout(ctx.linear(&format!("{p}.{name}.fc{j}"), z).relu());
        }
        ctx.linear(&format!("{p}.{name}.out"), z)
    };
    LightingLogits { elevation: head("el"), azimuth: head("az") }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted bins from the arg-max of both heads.
pub fn predicted_bins<T: Scalar>(logits: &LightingLogits<'_, T>) -> Vec<LightBin> {
    let el = logits.elevation.value();
    let az = logits.azimuth.value();
    let k = el.shape()[1];
    el.data()
        .chunks(k)
        .zip(az.data().chunks(k))
        .map(|(e, a)| LightBin { az_idx: argmax(a), el_idx: argmax(e) })
        .collect()
}

/// Light directions `(b, 3)` from the logits. The value is the centre of the
/// arg-max bin; the gradient is that of the softmax-expected direction.
pub fn light_from_logits<'g, T: Scalar>(ctx: &Ctx<'g, '_, T>, logits: &LightingLogits<'g, T>) -> Var<'g, T> {
    let grid = LightGrid::new(ctx.config.light_bins).expect("validated bin count");
    let bins = predicted_bins(logits);
    let b = bins.len();
    let hard: Vec<T> = bins
        .iter()
        .flat_map(|&bin| grid.direction_of(bin).expect("arg-max bin is on the grid").to_array())
        .map(T::cst)
        .collect();
    let hard = ctx.constant(Tensor::new([b, 3], hard));
    let trig = |centers: Vec<f64>| {
        let k = centers.len();
        let mut w: Vec<T> = centers.iter().map(|c| T::cst(c.to_radians().cos())).collect();
        w.extend(centers.iter().map(|c| T::cst(c.to_radians().sin())));
        ctx.constant(Tensor::new([2, k], w))
    };
    let el = logits.elevation.softmax().linear(trig(grid.elevation_centers()), None);
    let az = logits.azimuth.softmax().linear(trig(grid.azimuth_centers()), None);
    let (ce, se) = (el.slice_channels(0, 1), el.slice_channels(1, 1));
    let (ca, sa) = (az.slice_channels(0, 1), az.slice_channels(1, 1));
    let soft = Var::cat_channels(&[ce.mul(ca), se, ce.mul(sa)]);
    hard.add(soft).sub(soft.detach())
}

/// Constant `(b, 3)` tensor of light directions.
pub fn lights_tensor<T: Scalar>(lights: &[Vec3]) -> Tensor<T> {
    Tensor::new([lights.len(), 3], lights.iter().flat_map(|l| l.to_array()).map(T::cst).collect())
}

/// Per-pixel specular cues `[n.h, v.h]`, optionally positionally encoded.
pub fn light_code<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    normals: Var<'g, T>,
    light: Var<'g, T>,
    encode: bool,
) -> Var<'g, T> {
    let shape = normals.shape();
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let view = ctx.constant(lights_tensor(&vec![crate::geometry::VIEW; b]));
    let half = light.add(view).reshape([b, 3, 1, 1]).normalize_channels(T::cst(1e-12)).reshape([b, 3]);
    let nh = normals.dot_channels(half);
    let vh = half.slice_channels(2, 1).broadcast_map(h, w);
    let mut parts = vec![nh, vh];
    if encode {
        for p in [nh, vh] {
            for k in 0..ctx.config.encoding_freqs {
                let arg = p.scale(T::cst((1u64 << k) as f64 * std::f64::consts::PI));
                parts.push(arg.sin());
                parts.push(arg.cos());
            }
        }
    }
    Var::cat_channels(&parts)
}

pub fn refine_albedo<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    image: Var<'g, T>,
    normals: Var<'g, T>,
    albedo: Var<'g, T>,
    code: Var<'g, T>,
    mask: Var<'g, T>,
) -> Var<'g, T> {
    let x = Var::cat_channels(&[image, normals, albedo, code]);
    let skips = ctx.down_path(prefix::REFINE, x, REFINE_DOWN.len());
    let bottleneck = *skips.last().expect("stages");
    unit_range(ctx.up_path(prefix::REFINE, &skips, bottleneck)).mul_channelwise(mask)
}

/// `max(n . l, 0)` as a `(b, 1, h, w)` map.
pub fn shading<'g, T: Scalar>(normals: Var<'g, T>, light: Var<'g, T>) -> Var<'g, T> {
    normals.dot_channels(light).relu()
}

/// Reflectance `R` and reconstruction `R * max(n . l, 0)`. Without a light
/// estimate the reconstruction is `R` itself.
pub fn reconstruct<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    image: Var<'g, T>,
    normals: Var<'g, T>,
    albedo: Var<'g, T>,
    light: Option<Var<'g, T>>,
    mask: Var<'g, T>,
) -> (Var<'g, T>, Var<'g, T>) {
    let shape = image.shape();
    let mut parts = vec![image, normals, albedo];
    if let Some(l) = light {
        parts.push(l.broadcast_map(shape[2], shape[3]));
    }
    if ctx.config.mask_in_recon {
        parts.push(mask);
    }
    let skips = ctx.down_path(prefix::RECON, Var::cat_channels(&parts), RECON_DOWN.len());
    let bottleneck = *skips.last().expect("stages");
    let r = unit_range(ctx.up_path(prefix::RECON, &skips, bottleneck)).mul_channelwise(mask);
    let out = match light {
        Some(l) => r.mul_channelwise(shading(normals, l)),
        None => r,
    };
    (r, out)
}

/// Bottleneck-shaped feature of a `(b, 3)` light for a `side x side` map.
pub fn lighting_feature<'g, T: Scalar>(ctx: &Ctx<'g, '_, T>, light: Var<'g, T>, side: usize) -> Var<'g, T> {
    let p = prefix::LIGHT_FEATURE;
    let mut ups = 0;
    while ups < 3 && side % (2 << ups) == 0 {
        ups += 1;
    }
    let start = side >> ups;
    let mut h = light.broadcast_map(start, start);
    for i in 0..LIGHT_FEAT.len() {
        let name = format!("{p}.c{i}");
        h = ctx.conv(&name, h, 1, if i < 2 { 0 } else { 1 });
        if (1..=3).contains(&i) {
            h = ctx.norm(&format!("{name}.bn"), h);
            if i > 3 - ups {
                h = h.upsample2();
            }
        }
    }
    h
}

/// Re-render `image` under `target`.
pub fn relight<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    image: Var<'g, T>,
    mask: Var<'g, T>,
    target: Var<'g, T>,
) -> Result<Var<'g, T>> {
    check_spatial(&image.shape(), 1 << RECON_DOWN.len())?;
    let shape = image.shape();
    let light_map = target.broadcast_map(shape[2], shape[3]);
    let skips = ctx.down_path(prefix::RELIGHT, Var::cat_channels(&[image, mask, light_map]), RECON_DOWN.len());
    let deep = *skips.last().expect("stages");
    let side = deep.shape()[2];
    let bottleneck = deep.add(lighting_feature(ctx, target, side));
    Ok(unit_range(ctx.up_path(prefix::RELIGHT, &skips, bottleneck)).mul_channelwise(mask))
}

/// Batched network inputs: two `(b, 3, h, w)` images and a `(b, 1, h, w)` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInputs<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> PairInputs<T> {
    pub fn batch(&self) -> usize {
        self.first.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> PairInputs<U> {
        PairInputs { first: self.first.cast(), second: self.second.cast(), mask: self.mask.cast() }
    }
}

/// Every intermediate of a full forward pass. Per-image quantities are
/// stacked along the batch axis, first image then second.
pub struct Forward<'g, T: Scalar> {
    pub mask: Var<'g, T>,
    pub normals: Var<'g, T>,
    pub coarse_albedo: Var<'g, T>,
    pub logits: Option<LightingLogits<'g, T>>,
    pub lights: Option<Var<'g, T>>,
    pub refined_albedo: Option<Var<'g, T>>,
    pub reflectance: Option<Var<'g, T>>,
    pub reconstruction: Option<Var<'g, T>>,
    /// The second image relit to the first image's estimated light.
    pub relit: Option<Var<'g, T>>,
}

impl<'g, T: Scalar> Forward<'g, T> {
    /// Albedo fed to reconstruction: refined when available.
    pub fn albedo(&self) -> Var<'g, T> {
        self.refined_albedo.unwrap_or(self.coarse_albedo)
    }
}

/// How far a forward pass goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    /// Encoder, decoders and illumination only.
    Estimates,
    /// The whole pipeline.
    Full,
}

pub fn forward<'g, T: Scalar>(
    ctx: &Ctx<'g, '_, T>,
    abl: &AblationConfig,
    inputs: &PairInputs<T>,
    depth: Depth,
) -> Result<Forward<'g, T>> {
    abl.validate()?;
    let b = inputs.batch();
    let i1 = ctx.constant(inputs.first.clone());
    let i2 = ctx.constant(inputs.second.clone());
    let mask = ctx.constant(inputs.mask.clone());
    let enc = encode(ctx, i1, i2, mask)?;
    let normals = decode_normal(ctx, &enc, mask);
    let (a1, a2) = decode_albedo(ctx, &enc, mask);
    let images = Var::cat_batch(&[i1, i2]);
    let normals2 = Var::cat_batch(&[normals, normals]);
    let masks2 = Var::cat_batch(&[mask, mask]);
    let coarse = Var::cat_batch(&[a1, a2]);
    let (logits, lights) = if abl.lighting {
        // a frozen classifier passes no gradient back to its inputs
        let logits = if ctx.is_frozen(prefix::ILLUMINATION) {
            estimate_lighting(ctx, normals2.detach(), coarse.detach(), images)
        } else {
            estimate_lighting(ctx, normals2, coarse, images)
        };
        let lights = light_from_logits(ctx, &logits);
        (Some(logits), Some(lights))
    } else {
        (None, None)
    };
    let mut out = Forward {
        mask,
        normals,
        coarse_albedo: coarse,
        logits,
        lights,
        refined_albedo: None,
        reflectance: None,
        reconstruction: None,
        relit: None,
    };
    if depth == Depth::Estimates {
        return Ok(out);
    }
    if abl.refinement {
        let l = lights.expect("refinement requires lighting");
        let code = light_code(ctx, normals2, l, abl.encoding);
        out.refined_albedo = Some(refine_albedo(ctx, images, normals2, coarse, code, masks2));
    }
    let (r, recon) = reconstruct(ctx, images, normals2, out.albedo(), lights, masks2);
    out.reflectance = Some(r);
    out.reconstruction = Some(recon);
    if abl.relighting {
        let target = lights.expect("relighting requires lighting").slice_batch(0, b);
        out.relit = Some(relight(ctx, i2, mask, target)?);
    }
    Ok(out)
}

/// Fold recorded batch statistics into the running estimates.
pub fn update_running_stats<T: Scalar>(params: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)], momentum: f64) {
    let m = T::cst(momentum);
    for (name, s) in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            if let Some(t) = params.get_mut(&format!("{name}.{suffix}")) {
                for (r, &v) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
    }
}

/// Names of the trainable parameters belonging to a module prefix.
pub fn module_params<'a, T: Scalar>(params: &'a ParamStore<T>, module: &'a str) -> impl Iterator<Item = &'a str> {
    let p = format!("{module}.");
    params.trainable_names().filter(move |n| n.starts_with(&p))
}
