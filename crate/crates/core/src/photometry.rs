//! Image formation, synthetic scenes and the classical least-squares oracle.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{half_vector, Vec3, VIEW};
use crate::imaging::{self, Image, Mask, NormalMap};
use crate::lightspace::{LightBin, LightGrid};

/// Three-channel reflectance in `[0, 1]`, zero outside the object.
pub type AlbedoMap = Image;

pub const SCENE_SCHEMA: &str = "ps2kit-scene-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Geometry {
    Sphere,
    Heightfield {
        /// Row-major heights over the image grid; not serialised.
        #[serde(skip)]
        heights: Vec<f64>,
    },
}

impl Geometry {
    pub fn name(&self) -> &'static str {
        match self {
            Geometry::Sphere => "sphere",
            Geometry::Heightfield { .. } => "heightfield",
        }
    }
}

/// A fixed-view object with known shape and reflectance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub geometry: Geometry,
    pub normals: NormalMap,
    pub albedo: AlbedoMap,
    pub mask: Mask,
    /// Specular strength `k_s >= 0`.
    pub specular: f64,
    /// Phong exponent `alpha >= 1`.
    pub shininess: f64,
    /// Standard deviation of additive image noise.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    pub light: Vec3,
}

/// Parameters of the BRDF and noise model shared by the scene builders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub specular: f64,
    pub shininess: f64,
    pub noise: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self { specular: 0.0, shininess: 20.0, noise: 0.0 }
    }
}

impl Material {
    pub fn validate(&self) -> Result<()> {
        if !(self.specular >= 0.0) {
            return Err(Error::Domain(format!("specular strength {} must be >= 0", self.specular)));
        }
        if !(self.shininess >= 1.0) {
            return Err(Error::Domain(format!("shininess {} must be >= 1", self.shininess)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Domain(format!("noise sigma {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// Centre of pixel `(row, col)` in `[-1, 1]^2` with `y` pointing up.
#[inline]
pub fn pixel_coords(row: usize, col: usize, width: usize, height: usize) -> (f64, f64) {
    let x = (col as f64 + 0.5) / width as f64 * 2.0 - 1.0;
    let y = 1.0 - (row as f64 + 0.5) / height as f64 * 2.0;
    (x, y)
}

/// Unit sphere filling the frame.
pub fn sphere_normals(width: usize, height: usize) -> (NormalMap, Mask) {
    let mut n = NormalMap::zeros(width, height);
    let mut mask = Mask { width, height, data: vec![false; width * height] };
    for r in 0..height {
        for c in 0..width {
            let (x, y) = pixel_coords(r, c, width, height);
            let rr = x * x + y * y;
            if rr < 1.0 {
                n.data[r * width + c] = Vec3::new(x, y, (1.0 - rr).sqrt());
                mask.data[r * width + c] = true;
            }
        }
    }
    (n, mask)
}

/// A gentle dome with `bumps` seeded Gaussian bumps on a disc of radius
/// 0.95. Returns the heights, analytic normals and the mask.
pub fn heightfield(width: usize, height: usize, bumps: usize, seed: u64) -> (Vec<f64>, NormalMap, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let cx = rng.random_range(-0.6..0.6);
            let cy = rng.random_range(-0.6..0.6);
            let amp = rng.random_range(0.12..0.3) * if rng.random_bool(0.75) { 1.0 } else { -1.0 };
            let s = rng.random_range(0.12..0.25);
            (cx, cy, amp, s)
        })
        .collect();
    let mut z = vec![0.0; width * height];
    let mut n = NormalMap::zeros(width, height);
    let mut mask = Mask { width, height, data: vec![false; width * height] };
    for r in 0..height {
        for c in 0..width {
            let (x, y) = pixel_coords(r, c, width, height);
            let rr = x * x + y * y;
            if rr >= 0.95 * 0.95 {
                continue;
            }
            let mut h = 0.3 * (1.0 - rr);
            let (mut zx, mut zy) = (-0.6 * x, -0.6 * y);
            for &(cx, cy, amp, s) in &params {
                let (dx, dy) = (x - cx, y - cy);
                let g = amp * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                h += g;
                zx -= g * dx / (s * s);
                zy -= g * dy / (s * s);
            }
            let i = r * width + c;
            z[i] = h;
            n.data[i] = Vec3::new(-zx, -zy, 1.0).normalized().expect("z component is 1");
            mask.data[i] = true;
        }
    }
    (z, n, mask)
}

/// Smooth seeded colour pattern in `[0.2, 0.9]`, quantised to 8 bits and
/// zeroed outside `mask`.
pub fn albedo_pattern(mask: &Mask, seed: u64) -> AlbedoMap {
    let (w, h) = (mask.width, mask.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1be_d0);
    let mut img = Image::zeros(w, h, 3);
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..6.283)))
            .collect();
        let base = rng.random_range(0.45..0.65);
        for r in 0..h {
            for col in 0..w {
                if !mask.get(r, col) {
                    continue;
                }
                let (x, y) = pixel_coords(r, col, w, h);
                let v: f64 = waves.iter().map(|&(fx, fy, p)| (fx * x + fy * y + p).sin()).sum::<f64>() / 3.0;
                let a = (base + 0.25 * v).clamp(0.2, 0.9);
                img.set(c, r, col, ((a * 255.0).round() / 255.0) as f32);
            }
        }
    }
    img
}

impl SyntheticScene {
    pub fn sphere(res: usize, material: Material, seed: u64) -> Result<Self> {
        material.validate()?;
        let (normals, mask) = sphere_normals(res, res);
        let albedo = albedo_pattern(&mask, seed);
        Ok(Self::assemble(Geometry::Sphere, normals, albedo, mask, material))
    }

    pub fn heightfield(res: usize, material: Material, seed: u64) -> Result<Self> {
        material.validate()?;
        let (heights, normals, mask) = heightfield(res, res, 6, seed);
        let albedo = albedo_pattern(&mask, seed.wrapping_add(1));
        Ok(Self::assemble(Geometry::Heightfield { heights }, normals, albedo, mask, material))
    }

    /// Scene with a caller-provided shape and reflectance.
    pub fn from_parts(normals: NormalMap, albedo: AlbedoMap, mask: Mask, material: Material) -> Result<Self> {
        material.validate()?;
        if albedo.channels != 3 || albedo.width != normals.width || albedo.height != normals.height {
            return Err(Error::Shape("albedo must be 3-channel and match the normal map".into()));
        }
        if mask.width != normals.width || mask.height != normals.height {
            return Err(Error::Shape("mask must match the normal map".into()));
        }
        Ok(Self::assemble(Geometry::Sphere, normals, albedo, mask, material))
    }

    /// Normals are rounded to single precision so the stored float32 file
    /// reproduces them exactly.
    fn assemble(geometry: Geometry, mut normals: NormalMap, albedo: AlbedoMap, mask: Mask, m: Material) -> Self {
        for n in &mut normals.data {
            *n = Vec3::from_array(n.to_array().map(|c| c as f32 as f64));
        }
        Self { geometry, normals, albedo, mask, specular: m.specular, shininess: m.shininess, noise: m.noise }
    }

    pub fn width(&self) -> usize {
        self.normals.width
    }

    pub fn height(&self) -> usize {
        self.normals.height
    }

    pub fn material(&self) -> Material {
        Material { specular: self.specular, shininess: self.shininess, noise: self.noise }
    }
}

/// Per-pixel `max(n . l, 0)`.
pub fn shade_lambert(n: &NormalMap, l: Vec3) -> Vec<f32> {
    n.data.iter().map(|v| v.dot(l).max(0.0) as f32).collect()
}

/// Render `scene` under directional light `l`, drawing noise from `rng`.
pub fn render<R: Rng + ?Sized>(scene: &SyntheticScene, l: Vec3, rng: &mut R) -> RenderedImage {
    let (w, h) = (scene.width(), scene.height());
    let shading = shade_lambert(&scene.normals, l);
    let half = half_vector(l, VIEW).ok();
    let noise = (scene.noise > 0.0).then(|| Normal::new(0.0, scene.noise).expect("sigma validated"));
    let n = w * h;
    let mut img = Image::zeros(w, h, 3);
    for i in 0..n {
        if !scene.mask.data[i] {
            continue;
        }
        let nv = scene.normals.data[i];
        let spec = match half {
            Some(hv) if scene.specular > 0.0 && nv.dot(l) > 0.0 => {
                (scene.specular * nv.dot(hv).max(0.0).powf(scene.shininess)) as f32
            }
            _ => 0.0,
        };
        for c in 0..3 {
            let mut v = scene.albedo.data[c * n + i] * shading[i] + spec;
            if let Some(d) = &noise {
                v += d.sample(rng) as f32;
            }
            img.data[c * n + i] = v.clamp(0.0, 1.0);
        }
    }
    RenderedImage { image: img, light: l }
}

/// Noise-free render, ignoring the scene's noise level.
pub fn render_clean(scene: &SyntheticScene, l: Vec3) -> RenderedImage {
    let quiet = SyntheticScene { noise: 0.0, ..scene.clone() };
    render(&quiet, l, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Render at every bin centre of `grid`, in flat-bin order.
pub fn render_bin_centers(scene: &SyntheticScene, grid: &LightGrid, seed: u64) -> Result<Vec<RenderedImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid.all_bins().map(|b| Ok(render(scene, grid.direction_of(b)?, &mut rng))).collect()
}

/// Thresholds of the least-squares oracle and the weak-label decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Observations at or below this gray level are treated as shadowed.
    pub shadow_threshold: f64,
    /// Minimum recovered `rho` for a pixel to count as valid.
    pub min_albedo: f64,
    /// `n . h` above which a pixel is marked specular.
    pub specular_threshold: f64,
    /// Stabiliser of the albedo division.
    pub div_eps: f64,
    /// Minimum shading for albedo supervision.
    pub shading_floor: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { shadow_threshold: 0.02, min_albedo: 1e-4, specular_threshold: 0.99, div_eps: 1e-6, shading_floor: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstsqResult {
    pub normals: NormalMap,
    pub albedo: AlbedoMap,
    /// Pixels where a normal was recovered.
    pub valid: Mask,
}

fn check_inputs(images: &[Image], lights: &[Vec3], mask: &Mask) -> Result<()> {
    if images.len() < 3 {
        return Err(Error::Arity { needed: 3, got: images.len() });
    }
    if images.len() != lights.len() {
        return Err(Error::Shape(format!("{} images but {} lights", images.len(), lights.len())));
    }
    let first = &images[0];
    if images.iter().any(|i| !i.same_size(first) || i.channels != first.channels)
        || mask.width != first.width
        || mask.height != first.height
    {
        return Err(Error::Shape("images and mask must share a resolution".into()));
    }
    Ok(())
}

/// Normal equations `A = sum l l^T` for the selected lights.
fn gram(lights: &[Vec3], used: impl Iterator<Item = usize>) -> [[f64; 3]; 3] {
    let mut a = [[0.0; 3]; 3];
    for k in used {
        let l = lights[k].to_array();
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += l[i] * l[j];
            }
        }
    }
    a
}

/// Solve the symmetric 3x3 system, or `None` when it is close to singular
/// relative to its scale.
fn solve3(a: &[[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let scale = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    if !(det.abs() > 1e-9 * scale.powi(3)) {
        return None;
    }
    let cof = |r: usize, c: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (c0, c1) = ((c + 1) % 3, (c + 2) % 3);
        a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]
    };
    let mut x = [0.0; 3];
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = (0..3).map(|j| cof(j, i) * b[j]).sum::<f64>() / det;
    }
    Some(x)
}

/// Per-pixel least-squares photometric stereo on the gray (channel-mean)
/// images. Shadowed observations are dropped per pixel; pixels left with an
/// underdetermined system or a tiny `rho` are marked invalid. The colour
/// albedo is fitted per channel against the recovered shading.
pub fn lstsq_normals(images: &[Image], lights: &[Vec3], mask: &Mask, cfg: &OracleConfig) -> Result<LstsqResult> {
    check_inputs(images, lights, mask)?;
    if solve3(&gram(lights, 0..lights.len()), [0.0; 3]).is_none() {
        return Err(Error::Singular("light directions do not span three dimensions".into()));
    }
    let (w, h, ch) = (images[0].width, images[0].height, images[0].channels);
    let n = w * h;
    let grays: Vec<Vec<f32>> = images.iter().map(Image::gray).collect();
    let mut normals = NormalMap::zeros(w, h);
    let mut albedo = Image::zeros(w, h, 3);
    let mut valid = Mask { width: w, height: h, data: vec![false; n] };
    let mut used = Vec::with_capacity(images.len());
    for i in 0..n {
        if !mask.data[i] {
            continue;
        }
        used.clear();
        used.extend((0..images.len()).filter(|&k| grays[k][i] as f64 > cfg.shadow_threshold));
        if used.len() < 3 {
            continue;
        }
        let a = gram(lights, used.iter().copied());
        let mut b = [0.0; 3];
        for &k in &used {
            let g = grays[k][i] as f64;
            let l = lights[k].to_array();
            (0..3).for_each(|j| b[j] += l[j] * g);
        }
        let Some(x) = solve3(&a, b) else { continue };
        let g = Vec3::from_array(x);
        let rho = g.norm();
        if rho < cfg.min_albedo {
            continue;
        }
        let nv = g * (1.0 / rho);
        normals.data[i] = nv;
        valid.data[i] = true;
        let ss: f64 = used.iter().map(|&k| nv.dot(lights[k]).max(0.0).powi(2)).sum();
        for c in 0..3 {
            let cc = c.min(ch - 1);
            let num: f64 =
                used.iter().map(|&k| images[k].data[cc * n + i] as f64 * nv.dot(lights[k]).max(0.0)).sum();
            albedo.data[c * n + i] = if ss > 0.0 { (num / ss).clamp(0.0, 1.0) as f32 } else { 0.0 };
        }
    }
    Ok(LstsqResult { normals, albedo, valid })
}

/// Weak supervision derived from an oracle normal map.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakLabels {
    /// Per-image albedo estimates `I / (shading + eps)`, zero where unshaded.
    pub albedo: Vec<AlbedoMap>,
    pub shading: Vec<Vec<f32>>,
    pub specular: Vec<Mask>,
    /// Pixels usable for albedo supervision: inside the mask, not specular,
    /// with shading above the floor.
    pub supervision: Vec<Mask>,
    pub bins: Vec<LightBin>,
}

pub fn decompose_weak_labels(
    images: &[Image],
    lights: &[Vec3],
    normals: &NormalMap,
    mask: &Mask,
    grid: &LightGrid,
    cfg: &OracleConfig,
) -> Result<WeakLabels> {
    if images.len() != lights.len() {
        return Err(Error::Shape(format!("{} images but {} lights", images.len(), lights.len())));
    }
    let mut out = WeakLabels { albedo: vec![], shading: vec![], specular: vec![], supervision: vec![], bins: vec![] };
    for (img, &l) in images.iter().zip(lights) {
        if img.width != normals.width || img.height != normals.height {
            return Err(Error::Shape("images must match the normal map".into()));
        }
        let n = img.pixels();
        let shading = shade_lambert(normals, l);
        let hv = half_vector(l, VIEW)?;
        let mut spec = Mask { width: img.width, height: img.height, data: vec![false; n] };
        let mut sup = spec.clone();
        let mut alb = Image::zeros(img.width, img.height, 3);
        for i in 0..n {
            if !mask.data[i] {
                continue;
            }
            let s = shading[i] as f64;
            spec.data[i] = normals.data[i].dot(hv) > cfg.specular_threshold;
            sup.data[i] = !spec.data[i] && s > cfg.shading_floor;
            if s > 0.0 {
                for c in 0..3 {
                    let v = img.data[c.min(img.channels - 1) * n + i] as f64 / (s + cfg.div_eps);
                    alb.data[c * n + i] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        out.bins.push(grid.bin_of_dir(l)?);
        out.albedo.push(alb);
        out.shading.push(shading);
        out.specular.push(spec);
        out.supervision.push(sup);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    schema: String,
    geometry: Geometry,
    width: usize,
    height: usize,
    specular: f64,
    shininess: f64,
    noise: f64,
}

/// Write a scene and its renders in the scene-directory layout.
pub fn save_scene(dir: &Path, scene: &SyntheticScene, renders: &[RenderedImage]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = SceneHeader {
        schema: SCENE_SCHEMA.into(),
        geometry: scene.geometry.clone(),
        width: scene.width(),
        height: scene.height(),
        specular: scene.specular,
        shininess: scene.shininess,
        noise: scene.noise,
    };
    imaging::write_bytes(&dir.join("scene.json"), serde_json::to_string_pretty(&header)?.as_bytes())?;
    imaging::write_rgb8(&dir.join("albedo.png"), &scene.albedo)?;
    imaging::write_bytes(&dir.join("normals.f32"), &scene.normals.to_f32_bytes())?;
    imaging::write_mask(&dir.join("mask.png"), &scene.mask)?;
    let mut lights = String::new();
    for (k, r) in renders.iter().enumerate() {
        imaging::write_rgb16(&dir.join(format!("img_{k:03}.png")), &r.image)?;
        lights.push_str(&format!("{:.17} {:.17} {:.17}\n", r.light.x, r.light.y, r.light.z));
    }
    imaging::write_bytes(&dir.join("lights.txt"), lights.as_bytes())
}

/// Parse whitespace-separated triples, one per non-empty line.
pub fn read_triples(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = String::from_utf8(imaging::read_bytes(path)?)
        .map_err(|_| Error::format(path, 0, "file is not valid UTF-8"))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, k + 1, format!("bad number: {e}")))?;
        if vals.len() != 3 {
            return Err(Error::format(path, k + 1, format!("expected 3 values, found {}", vals.len())));
        }
        out.push([vals[0], vals[1], vals[2]]);
    }
    Ok(out)
}

/// Read a scene directory back. Returns the scene and its renders.
pub fn load_scene(dir: &Path) -> Result<(SyntheticScene, Vec<RenderedImage>)> {
    let header_path = dir.join("scene.json");
    let header: serde_json::Value = serde_json::from_slice(&imaging::read_bytes(&header_path)?)?;
    let schema = header.get("schema").and_then(|s| s.as_str()).unwrap_or("<none>");
    if schema != SCENE_SCHEMA {
        return Err(Error::Schema { expected: SCENE_SCHEMA.into(), found: schema.into() });
    }
    let header: SceneHeader = serde_json::from_value(header)?;
    let (w, h) = (header.width, header.height);
    let normals = NormalMap::from_f32_bytes(w, h, &imaging::read_bytes(&dir.join("normals.f32"))?)?;
    let mask = imaging::read_mask(&dir.join("mask.png"))?;
    let albedo = imaging::read_rgb(&dir.join("albedo.png"))?;
    if mask.width != w || mask.height != h || albedo.width != w || albedo.height != h {
        return Err(Error::Shape(format!("scene files disagree with the {w}x{h} header")));
    }
    let lights_path = dir.join("lights.txt");
    let mut renders = Vec::new();
    for (k, t) in read_triples(&lights_path)?.into_iter().enumerate() {
        let l = Vec3::from_array(t);
        if (l.norm() - 1.0).abs() > 1e-4 {
            return Err(Error::format(&lights_path, k + 1, "light direction is not unit length"));
        }
        let image = imaging::read_rgb(&dir.join(format!("img_{k:03}.png")))?;
        if image.width != w || image.height != h {
            return Err(Error::Shape(format!("img_{k:03}.png is not {w}x{h}")));
        }
        renders.push(RenderedImage { image, light: l });
    }
    let scene = SyntheticScene {
        geometry: header.geometry,
        normals,
        albedo,
        mask,
        specular: header.specular,
        shininess: header.shininess,
        noise: header.noise,
    };
    Ok((scene, renders))
}
