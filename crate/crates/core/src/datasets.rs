//! Object captures from DiLiGenT-style directories and synthetic scenes,
//! resizing to a training resolution and image-pair sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::imaging::{self, Image, Mask, NormalMap};
use crate::lightspace::{LightBin, LightGrid};
use crate::photometry::{self, AlbedoMap};

pub const FILENAMES: &str = "filenames.txt";
pub const LIGHT_DIRECTIONS: &str = "light_directions.txt";
pub const LIGHT_INTENSITIES: &str = "light_intensities.txt";
pub const MASK: &str = "mask.png";
pub const NORMALS_RAW: &str = "normal_gt.f32";
pub const NORMALS_PNG: &str = "normal_gt.png";

/// One image of a capture, already divided by its light intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub light: Vec3,
    pub intensity: [f64; 3],
    pub source: Option<PathBuf>,
}

/// Truth used to score estimates, never to train self-supervised models.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub normals: NormalMap,
    pub albedo: Option<AlbedoMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCapture {
    pub name: String,
    pub samples: Vec<Sample>,
    pub mask: Mask,
    ground_truth: Option<GroundTruth>,
}

impl ObjectCapture {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>, mask: Mask, truth: Option<GroundTruth>) -> Result<Self> {
        let c = Self { name: name.into(), samples, mask, ground_truth: truth };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::Arity { needed: 2, got: self.samples.len() });
        }
        let (w, h) = (self.mask.width, self.mask.height);
        for (k, s) in self.samples.iter().enumerate() {
            if s.image.width != w || s.image.height != h || s.image.channels != 3 {
                return Err(Error::Shape(format!("image {k} is not {w}x{h} RGB")));
            }
            if (s.light.norm() - 1.0).abs() > 1e-4 {
                return Err(Error::Domain(format!("light {k} is not unit length")));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.normals.width != w || gt.normals.height != h {
                return Err(Error::Shape("ground-truth normals do not match the mask".into()));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    /// Evaluation-only truth.
    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_ref()
    }

    pub fn lights(&self) -> Vec<Vec3> {
        self.samples.iter().map(|s| s.light).collect()
    }

    pub fn bins(&self, grid: &LightGrid) -> Result<Vec<LightBin>> {
        self.samples.iter().map(|s| grid.bin_of_dir(s.light)).collect()
    }

    /// Copy without ground truth.
    pub fn without_truth(&self) -> Self {
        Self { ground_truth: None, ..self.clone() }
    }
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = String::from_utf8(imaging::read_bytes(path)?)
        .map_err(|_| Error::format(path, 0, "file is not valid UTF-8"))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

fn count_mismatch(path: &Path, found: usize, expected: usize) -> Error {
    Error::format(path, found + 1, format!("{found} entries, but {FILENAMES} lists {expected}"))
}

/// Load a DiLiGenT-layout directory. Images are divided by their per-channel
/// light intensities; directions are normalised.
pub fn load_diligent(dir: &Path) -> Result<ObjectCapture> {
    let mask = imaging::read_mask(&dir.join(MASK))?;
    let names_path = dir.join(FILENAMES);
    let names = read_list(&names_path)?;
    let dirs_path = dir.join(LIGHT_DIRECTIONS);
    let dirs = photometry::read_triples(&dirs_path)?;
    let ints_path = dir.join(LIGHT_INTENSITIES);
    let ints = photometry::read_triples(&ints_path)?;
    if dirs.len() != names.len() {
        return Err(count_mismatch(&dirs_path, dirs.len(), names.len()));
    }
    if ints.len() != names.len() {
        return Err(count_mismatch(&ints_path, ints.len(), names.len()));
    }
    let mut samples = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let raw = Vec3::from_array(dirs[k]);
        let light = if (raw.norm() - 1.0).abs() <= 1e-12 {
            raw
        } else {
            raw.normalized().ok_or_else(|| Error::format(&dirs_path, k + 1, "zero light direction"))?
        };
        let intensity = ints[k];
        if intensity.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::format(&ints_path, k + 1, "light intensities must be positive"));
        }
        let path = dir.join(name);
        let mut image = imaging::read_rgb(&path)?;
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::Shape(format!("{} does not match the mask size", path.display())));
        }
        let n = image.pixels();
        for (c, &s) in intensity.iter().enumerate() {
            image.data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
        }
        samples.push(Sample { image, light, intensity, source: Some(path) });
    }
    let ground_truth = if dir.join(NORMALS_RAW).exists() {
        let bytes = imaging::read_bytes(&dir.join(NORMALS_RAW))?;
        Some(NormalMap::from_f32_bytes(mask.width, mask.height, &bytes)?)
    } else if dir.join(NORMALS_PNG).exists() {
        Some(imaging::read_normal_png16(&dir.join(NORMALS_PNG))?)
    } else {
        None
    };
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "object".into());
    ObjectCapture::new(name, samples, mask, ground_truth.map(|normals| GroundTruth { normals, albedo: None }))
}

/// Write `capture` in the DiLiGenT layout with unit intensities (images are
/// stored already normalised, so they must lie in `[0, 1]`).
pub fn save_diligent(dir: &Path, capture: &ObjectCapture) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    imaging::write_mask(&dir.join(MASK), &capture.mask)?;
    let (mut names, mut dirs, mut ints) = (String::new(), String::new(), String::new());
    for (k, s) in capture.samples.iter().enumerate() {
        let name = format!("{k:03}.png");
        imaging::write_rgb16(&dir.join(&name), &s.image)?;
        names.push_str(&name);
        names.push('\n');
        dirs.push_str(&format!("{:.17} {:.17} {:.17}\n", s.light.x, s.light.y, s.light.z));
        ints.push_str("1 1 1\n");
    }
    imaging::write_bytes(&dir.join(FILENAMES), names.as_bytes())?;
    imaging::write_bytes(&dir.join(LIGHT_DIRECTIONS), dirs.as_bytes())?;
    imaging::write_bytes(&dir.join(LIGHT_INTENSITIES), ints.as_bytes())?;
    if let Some(gt) = &capture.ground_truth {
        imaging::write_bytes(&dir.join(NORMALS_RAW), &gt.normals.to_f32_bytes())?;
    }
    Ok(())
}

/// Load a synthetic scene directory with its exact ground truth.
pub fn load_synthetic(dir: &Path) -> Result<ObjectCapture> {
    let (scene, renders) = photometry::load_scene(dir)?;
    let samples = renders
        .into_iter()
        .enumerate()
        .map(|(k, r)| Sample {
            image: r.image,
            light: r.light,
            intensity: [1.0; 3],
            source: Some(dir.join(format!("img_{k:03}.png"))),
        })
        .collect();
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
    let truth = GroundTruth { normals: scene.normals, albedo: Some(scene.albedo) };
    ObjectCapture::new(name, samples, scene.mask, Some(truth))
}

/// Load either layout, recognised by its marker file.
pub fn load_any(dir: &Path) -> Result<ObjectCapture> {
    if dir.join("scene.json").exists() {
        load_synthetic(dir)
    } else if dir.join(FILENAMES).exists() {
        load_diligent(dir)
    } else {
        Err(Error::MissingFile(dir.join(FILENAMES)))
    }
}

/// Square crop around the mask bounding box.
fn square_box(mask: &Mask) -> Result<(usize, usize, usize)> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let side = (y1 - y0).max(x1 - x0).min(mask.width.min(mask.height));
    let centre = |a: usize, b: usize, limit: usize| ((a + b) / 2).saturating_sub(side / 2).min(limit - side);
    Ok((centre(y0, y1, mask.height), centre(x0, x1, mask.width), side))
}

/// Source footprint `[lo, hi)` of target index `i` when mapping `side`
/// pixels onto `res`.
fn footprint(i: usize, side: usize, res: usize) -> (usize, usize) {
    let lo = i * side / res;
    let hi = ((i + 1) * side).div_ceil(res).max(lo + 1);
    (lo, hi.min(side))
}

/// Box-filtered resample of a planar image region.
fn resample_plane(src: &[f32], width: usize, oy: usize, ox: usize, side: usize, res: usize) -> Vec<f32> {
    let mut out = vec![0.0; res * res];
    for ty in 0..res {
        let (y0, y1) = footprint(ty, side, res);
        for tx in 0..res {
            let (x0, x1) = footprint(tx, side, res);
            let mut acc = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += src[(oy + y) * width + ox + x] as f64;
                }
            }
            out[ty * res + tx] = (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
        }
    }
    out
}

fn resample_image(img: &Image, oy: usize, ox: usize, side: usize, res: usize) -> Image {
    let mut data = Vec::with_capacity(res * res * img.channels);
    for c in 0..img.channels {
        data.extend(resample_plane(img.channel(c), img.width, oy, ox, side, res));
    }
    Image { width: res, height: res, channels: img.channels, data }
}

/// Crop to the square bounding box of the mask and resample to `res x res`.
/// A capture that is already `res x res` is returned unchanged.
pub fn resize_capture(capture: &ObjectCapture, res: usize) -> Result<ObjectCapture> {
    if res == 0 || res % crate::neural::SPATIAL_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "training resolution {res} must be a positive multiple of {}",
            crate::neural::SPATIAL_MULTIPLE
        )));
    }
    if capture.width() == res && capture.height() == res {
        return Ok(capture.clone());
    }
    let (oy, ox, side) = square_box(&capture.mask)?;
    let m = resample_plane(&capture.mask.to_image().data, capture.width(), oy, ox, side, res);
    let mask = Mask { width: res, height: res, data: m.iter().map(|&v| v >= 0.5).collect() };
    let samples = capture
        .samples
        .iter()
        .map(|s| Sample { image: resample_image(&s.image, oy, ox, side, res).masked(&mask), ..s.clone() })
        .collect();
    let truth = capture.ground_truth.as_ref().map(|gt| {
        let mut normals = NormalMap::from_image(&resample_image(&gt.normals.to_image(), oy, ox, side, res))
            .expect("three channels");
        for (n, &m) in normals.data.iter_mut().zip(&mask.data) {
            if !m {
                *n = Vec3::default();
            }
        }
        GroundTruth {
            normals,
            albedo: gt.albedo.as_ref().map(|a| resample_image(a, oy, ox, side, res).masked(&mask)),
        }
    });
    ObjectCapture::new(capture.name.clone(), samples, mask, truth)
}

/// Two sample indices of one capture with their (distinct) bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub first: usize,
    pub second: usize,
    pub bins: (LightBin, LightBin),
}

/// Samples grouped by light bin.
#[derive(Clone, Debug)]
pub struct BinIndex {
    groups: BTreeMap<LightBin, Vec<usize>>,
}

impl BinIndex {
    pub fn new(capture: &ObjectCapture, grid: &LightGrid) -> Result<Self> {
        let mut groups: BTreeMap<LightBin, Vec<usize>> = BTreeMap::new();
        for (k, b) in capture.bins(grid)?.into_iter().enumerate() {
            groups.entry(b).or_default().push(k);
        }
        if groups.len() < 2 {
            return Err(Error::Diversity(format!(
                "{} has images in {} light bin(s); pairs need two distinct bins",
                capture.name,
                groups.len()
            )));
        }
        Ok(Self { groups })
    }

    pub fn bins(&self) -> impl Iterator<Item = &LightBin> {
        self.groups.keys()
    }

    pub fn samples_in(&self, b: LightBin) -> &[usize] {
        self.groups.get(&b).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Draw an unordered pair of distinct bins uniformly, a sample in each,
    /// and a random order.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> PairIndex {
        let bins: Vec<&LightBin> = self.groups.keys().collect();
        let i = rng.random_range(0..bins.len());
        let mut j = rng.random_range(0..bins.len() - 1);
        if j >= i {
            j += 1;
        }
        let (b1, b2) = (*bins[i], *bins[j]);
        let s1 = *self.groups[&b1].choose(rng).expect("non-empty group");
        let s2 = *self.groups[&b2].choose(rng).expect("non-empty group");
        PairIndex { first: s1, second: s2, bins: (b1, b2) }
    }

    /// Like [`BinIndex::draw`] with the first image fixed to bin `first`.
    pub fn draw_with_first<R: Rng + ?Sized>(&self, first: LightBin, rng: &mut R) -> Result<PairIndex> {
        let group = self
            .groups
            .get(&first)
            .ok_or_else(|| Error::MissingLabels(format!("no image in light bin {first:?}")))?;
        let others: Vec<&LightBin> = self.groups.keys().filter(|b| **b != first).collect();
        let b2 = **others.choose(rng).expect("at least two bins");
        let s1 = *group.choose(rng).expect("non-empty group");
        let s2 = *self.groups[&b2].choose(rng).expect("non-empty group");
        Ok(PairIndex { first: s1, second: s2, bins: (first, b2) })
    }
}

/// An owned image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub first: Image,
    pub second: Image,
    pub mask: Mask,
    pub bins: (LightBin, LightBin),
    pub lights: Option<(Vec3, Vec3)>,
    pub indices: (usize, usize),
}

/// `n` pairs drawn deterministically from `seed`.
pub fn sample_pair_indices(capture: &ObjectCapture, n: usize, seed: u64, grid: &LightGrid) -> Result<Vec<PairIndex>> {
    let index = BinIndex::new(capture, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| index.draw(&mut rng)).collect())
}

pub fn sample_pairs(capture: &ObjectCapture, n: usize, seed: u64) -> Result<Vec<ImagePair>> {
    let grid = LightGrid::default();
    Ok(sample_pair_indices(capture, n, seed, &grid)?
        .into_iter()
        .map(|p| pair_from_index(capture, p))
        .collect())
}

pub fn pair_from_index(capture: &ObjectCapture, p: PairIndex) -> ImagePair {
    let (a, b) = (&capture.samples[p.first], &capture.samples[p.second]);
    ImagePair {
        first: a.image.clone(),
        second: b.image.clone(),
        mask: capture.mask.clone(),
        bins: p.bins,
        lights: Some((a.light, b.light)),
        indices: (p.first, p.second),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photometry::{render_bin_centers, save_scene, Material, SyntheticScene};

    fn scene_dir(res: usize) -> (tempfile::TempDir, SyntheticScene) {
        let dir = tempfile::tempdir().unwrap();
        let s = SyntheticScene::sphere(res, Material::default(), 1).unwrap();
        let r = render_bin_centers(&s, &LightGrid::default(), 0).unwrap();
        save_scene(dir.path(), &s, &r).unwrap();
        (dir, s)
    }

    #[test]
    fn synthetic_capture_carries_exact_truth() {
        let (dir, s) = scene_dir(32);
        let c = load_synthetic(dir.path()).unwrap();
        assert_eq!(c.samples.len(), 25);
        let gt = c.ground_truth().unwrap();
        for (a, b) in gt.normals.data.iter().zip(&s.normals.data) {
            assert_eq!(a, b);
        }
        assert!(c.without_truth().ground_truth().is_none());
    }

    #[test]
    fn corrupted_normals_are_rejected() {
        let (dir, _) = scene_dir(32);
        let p = dir.path().join("normals.f32");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_synthetic(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn diligent_round_trip_is_stable() {
        let (dir, _) = scene_dir(32);
        let c = load_synthetic(dir.path()).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        save_diligent(d1.path(), &c).unwrap();
        let first = load_diligent(d1.path()).unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_diligent(d2.path(), &first).unwrap();
        let second = load_diligent(d2.path()).unwrap();
        assert_eq!(first.samples.len(), second.samples.len());
        for (a, b) in first.samples.iter().zip(&second.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.light, b.light);
        }
        assert_eq!(first.mask, second.mask);
        assert_eq!(first.ground_truth(), second.ground_truth());
    }

    #[test]
    fn diligent_errors_name_the_file() {
        let (dir, _) = scene_dir(32);
        let c = load_synthetic(dir.path()).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_diligent(d.path(), &c).unwrap();
        std::fs::write(d.path().join(LIGHT_INTENSITIES), "1 1 1\n1 1\n").unwrap();
        let e = load_diligent(d.path()).unwrap_err().to_string();
        assert!(e.contains(LIGHT_INTENSITIES) && e.contains(":2:"), "{e}");
        std::fs::remove_file(d.path().join(MASK)).unwrap();
        let e = load_diligent(d.path()).unwrap_err();
        assert!(matches!(&e, Error::MissingFile(p) if p.ends_with(MASK)));
    }

    #[test]
    fn intensity_normalisation_divides_each_channel() {
        let (dir, _) = scene_dir(32);
        let c = load_synthetic(dir.path()).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_diligent(d.path(), &c).unwrap();
        let plain = load_diligent(d.path()).unwrap();
        let ints: String = (0..25).map(|_| "2 4 0.5\n").collect();
        std::fs::write(d.path().join(LIGHT_INTENSITIES), ints).unwrap();
        let scaled = load_diligent(d.path()).unwrap();
        let n = 32 * 32;
        let (a, b) = (&plain.samples[3].image, &scaled.samples[3].image);
        for i in 0..n {
            assert_eq!(b.data[i], a.data[i] / 2.0);
            assert_eq!(b.data[n + i], a.data[n + i] / 4.0);
            assert_eq!(b.data[2 * n + i], a.data[2 * n + i] * 2.0);
        }
    }

    #[test]
    fn pairs_are_deterministic_and_distinct() {
        let (dir, _) = scene_dir(32);
        let c = load_synthetic(dir.path()).unwrap();
        let a = sample_pairs(&c, 10, 3).unwrap();
        let b = sample_pairs(&c, 10, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.bins.0 != p.bins.1));
    }

    #[test]
    fn single_bin_capture_lacks_diversity() {
        let (dir, _) = scene_dir(32);
        let mut c = load_synthetic(dir.path()).unwrap();
        c.samples.truncate(1);
        let dup = c.samples[0].clone();
        c.samples.push(dup);
        assert!(matches!(sample_pairs(&c, 1, 0), Err(Error::Diversity(_))));
    }

    #[test]
    fn resize_crops_to_the_object() {
        let s = SyntheticScene::heightfield(80, Material::default(), 2).unwrap();
        let samples = render_bin_centers(&s, &LightGrid::default(), 0)
            .unwrap()
            .into_iter()
            .map(|r| Sample { image: r.image, light: r.light, intensity: [1.0; 3], source: None })
            .collect();
        let truth = GroundTruth { normals: s.normals.clone(), albedo: Some(s.albedo.clone()) };
        let c = ObjectCapture::new("hf", samples, s.mask.clone(), Some(truth)).unwrap();
        let r = resize_capture(&c, 64).unwrap();
        assert_eq!((r.width(), r.height()), (64, 64));
        assert!(r.mask.count() > 64 * 64 / 2);
        let gt = r.ground_truth().unwrap();
        for (n, &m) in gt.normals.data.iter().zip(&r.mask.data) {
            assert!(!m || (n.norm() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(resize_capture(&c, 48), Err(Error::Config(_))));
    }
}
