#![allow(dead_code)]

use ps2kit::datasets::{GroundTruth, ObjectCapture, Sample};
use ps2kit::lightspace::LightGrid;
use ps2kit::neural::{self, prefix, AblationConfig, Ctx, ModelConfig};
use ps2kit::photometry::{render_bin_centers, Material, SyntheticScene};
use ps2kit_grad::check::{central_difference, relative_error};
use ps2kit_grad::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic object rendered at the 25 bin centres, ground truth attached.
pub fn bin_center_capture(res: usize, heightfield: bool, seed: u64) -> ObjectCapture {
    let m = Material::default();
    let scene = if heightfield {
        SyntheticScene::heightfield(res, m, seed).unwrap()
    } else {
        SyntheticScene::sphere(res, m, seed).unwrap()
    };
    let samples = render_bin_centers(&scene, &LightGrid::default(), seed)
        .unwrap()
        .into_iter()
        .map(|r| Sample { image: r.image, light: r.light, intensity: [1.0; 3], source: None })
        .collect();
    let truth = GroundTruth { normals: scene.normals.clone(), albedo: Some(scene.albedo.clone()) };
    ObjectCapture::new(if heightfield { "heightfield" } else { "sphere" }, samples, scene.mask.clone(), Some(truth)).unwrap()
}

/// Fixed inputs shared by the per-module gradient checks.
pub struct Toy {
    pub i1: Tensor<f64>,
    pub i2: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub normals: Tensor<f64>,
    pub albedo: Tensor<f64>,
    pub lights: Tensor<f64>,
    pub code: Tensor<f64>,
}

impl Toy {
    pub fn new(b: usize, res: usize, code_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: [usize; 4], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
        let i1 = uniform([b, 3, res, res], 0.0, 1.0);
        let i2 = uniform([b, 3, res, res], 0.0, 1.0);
        let albedo = uniform([b, 3, res, res], 0.1, 0.9);
        let code = uniform([b, code_channels, res, res], -1.0, 1.0);
        let raw = uniform([b, 3, res, res], -1.0, 1.0);
        let mut normals = raw.clone();
        let hw = res * res;
        for n in 0..b {
            for p in 0..hw {
                let at = |c: usize| n * 3 * hw + c * hw + p;
                let (x, y, z) = (raw.data()[at(0)], raw.data()[at(1)], raw.data()[at(2)].abs() + 0.3);
                let len = (x * x + y * y + z * z).sqrt();
                normals.data_mut()[at(0)] = x / len;
                normals.data_mut()[at(1)] = y / len;
                normals.data_mut()[at(2)] = z / len;
            }
        }
        let mask = Tensor::from_fn([b, 1, res, res], |i| if (i % hw) % 7 == 3 { 0.0 } else { 1.0 });
        let grid = LightGrid::default();
        let dirs: Vec<_> = (0..b).map(|k| grid.direction_of(grid.from_flat((7 * k + 3) % 25).unwrap()).unwrap()).collect();
        Self { i1, i2, mask, normals, albedo, lights: neural::lights_tensor(&dirs), code }
    }
}

/// Scalar probe of one module: a fixed random projection of its outputs.
pub type Probe = for<'g, 'p> fn(&Ctx<'g, 'p, f64>, &Toy) -> Vec<Var<'g, f64>>;

fn project<'g>(outs: Vec<Var<'g, f64>>) -> Var<'g, f64> {
    let mut total: Option<Var<'g, f64>> = None;
    for (k, o) in outs.into_iter().enumerate() {
        let w = Tensor::from_fn(o.shape(), |i| ((i as f64 + 1.0) * (0.7 + k as f64)).sin());
        let term = o.mul(o.graph().constant(w)).sum_all();
        total = Some(total.map_or(term, |t| t.add(term)));
    }
    total.expect("probe has outputs")
}

fn evaluate(params: &ParamStore<f64>, cfg: ModelConfig, toy: &Toy, probe: Probe) -> f64 {
    let g = Graph::new();
    let ctx = Ctx::new(&g, params, cfg, true, 11);
    project(probe(&ctx, toy)).value().item()
}

pub fn probe_encoder_normal<'g>(ctx: &Ctx<'g, '_, f64>, t: &Toy) -> Vec<Var<'g, f64>> {
    let mask = ctx.constant(t.mask.clone());
    let enc = neural::encode(ctx, ctx.constant(t.i1.clone()), ctx.constant(t.i2.clone()), mask).unwrap();
    vec![neural::decode_normal(ctx, &enc, mask)]
}

pub fn probe_albedo<'g>(ctx: &Ctx<'g, '_, f64>, t: &Toy) -> Vec<Var<'g, f64>> {
    let mask = ctx.constant(t.mask.clone());
    let enc = neural::encode(ctx, ctx.constant(t.i1.clone()), ctx.constant(t.i2.clone()), mask).unwrap();
    let (a1, a2) = neural::decode_albedo(ctx, &enc, mask);
    vec![a1, a2]
}

pub fn probe_illumination<'g>(ctx: &Ctx<'g, '_, f64>, t: &Toy) -> Vec<Var<'g, f64>> {
    let logits = neural::estimate_lighting(
        ctx,
        ctx.constant(t.normals.clone()),
        ctx.constant(t.albedo.clone()),
        ctx.constant(t.i1.clone()),
    );
    vec![logits.elevation, logits.azimuth]
}

pub fn probe_refine<'g>(ctx: &Ctx<'g, '_, f64>, t: &Toy) -> Vec<Var<'g, f64>> {
    vec![neural::refine_albedo(
        ctx,
        ctx.constant(t.i1.clone()),
        ctx.constant(t.normals.clone()),
        ctx.constant(t.albedo.clone()),
        ctx.constant(t.code.clone()),
        ctx.constant(t.mask.clone()),
    )]
}

pub fn probe_reconstruct<'g>(ctx: &Ctx<'g, '_, f64>, t: &Toy) -> Vec<Var<'g, f64>> {
    let (r, out) = neural::reconstruct(
        ctx,
        ctx.constant(t.i1.clone()),
        ctx.constant(t.normals.clone()),
        ctx.constant(t.albedo.clone()),
        Some(ctx.constant(t.lights.clone())),
        ctx.constant(t.mask.clone()),
    );
    vec![r, out]
}

pub fn probe_relight<'g>(ctx: &Ctx<'g, '_, f64>, t: &Toy) -> Vec<Var<'g, f64>> {
    let out = neural::relight(ctx, ctx.constant(t.i2.clone()), ctx.constant(t.mask.clone()), ctx.constant(t.lights.clone()));
    vec![out.unwrap()]
}

/// Every module with the probe that exercises it.
pub fn module_probes() -> Vec<(&'static str, Probe)> {
    vec![
        (prefix::ENCODER, probe_encoder_normal as Probe),
        (prefix::NORMAL, probe_encoder_normal),
        (prefix::ALBEDO, probe_albedo),
        (prefix::ILLUMINATION, probe_illumination),
        (prefix::REFINE, probe_refine),
        (prefix::RECON, probe_reconstruct),
        (prefix::RELIGHT, probe_relight),
        (prefix::LIGHT_FEATURE, probe_relight),
    ]
}

pub struct GradReport {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked as f64
    }
}

/// Toy-sized model with the full pipeline, in double precision.
pub fn toy_model(width_div: usize) -> (ModelConfig, AblationConfig, ParamStore<f64>) {
    let cfg = ModelConfig { width_div, ..Default::default() };
    let abl = AblationConfig::default();
    (cfg, abl, neural::init_params::<f64>(&cfg, &abl, 5))
}

/// Compare analytic and central-difference gradients on `samples` randomly
/// chosen scalars of the module's parameters.
pub fn check_module(
    params: &ParamStore<f64>,
    cfg: ModelConfig,
    toy: &Toy,
    module: &str,
    probe: Probe,
    samples: usize,
    tol: f64,
    seed: u64,
) -> GradReport {
    let g = Graph::new();
    let ctx = Ctx::new(&g, params, cfg, true, 11);
    let loss = project(probe(&ctx, toy));
    let grads = ctx.param_grads(&g.backward(loss));
    let names: Vec<String> = neural::module_params(params, module).map(str::to_string).collect();
    assert!(!names.is_empty(), "module {module} has no parameters");
    let sizes: Vec<usize> = names.iter().map(|n| params.get(n).unwrap().numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport { checked: 0, passed: 0, worst: 0.0 };
    for _ in 0..samples {
        let mut k = rng.random_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let name = &names[which];
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[k]);
        let base = params.get(name).unwrap().clone();
        let numeric = central_difference(
            |probe_t: &Tensor<f64>| {
                let mut p = params.clone();
                *p.get_mut(name).unwrap() = probe_t.clone();
                evaluate(&p, cfg, toy, probe)
            },
            &base,
            k,
            1e-5,
        );
        let err = relative_error(analytic, numeric, 1e-6);
        report.checked += 1;
        report.worst = report.worst.max(err);
        if err < tol {
            report.passed += 1;
        }
    }
    report
}
