//! Metrics and report emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{self, ObjectCapture};
use crate::error::{Error, Result};
use crate::geometry::{angular_error_deg, Vec3};
use crate::imaging::{self, Image, Mask, NormalMap};
use crate::lightspace::LightBin;
use crate::model::{self, Model};
use crate::neural::PairInputs;

/// Mean angular error in degrees over masked pixels.
pub fn mae(est: &NormalMap, truth: &NormalMap, mask: &Mask) -> Result<f64> {
    if est.width != truth.width || est.height != truth.height || mask.width != est.width || mask.height != est.height {
        return Err(Error::Shape("normal maps and mask must share a size".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((a, b), &m) in est.data.iter().zip(&truth.data).zip(&mask.data) {
        if m {
            sum += angular_error_deg(*a, *b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Single-scale SSIM parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

pub const SSIM_VARIANT: &str = "single-scale gaussian-window SSIM";

fn gaussian(cfg: &SsimConfig) -> Vec<f64> {
    let r = (cfg.window / 2) as f64;
    let w: Vec<f64> = (0..cfg.window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * cfg.sigma * cfg.sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (wo, ho) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; wo * h];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Windowed SSIM averaged over the valid windows whose centre lies inside
/// `mask` (all valid windows without a mask), then over channels.
pub fn ssim_with(x: &Image, y: &Image, mask: Option<&Mask>, cfg: &SsimConfig) -> Result<f64> {
    if !x.same_size(y) || x.channels != y.channels {
        return Err(Error::Shape("SSIM inputs must share a shape".into()));
    }
    let (w, h, win) = (x.width, x.height, cfg.window);
    if w < win || h < win {
        return Err(Error::Shape(format!("{w}x{h} image is smaller than the {win}x{win} window")));
    }
    if let Some(m) = mask {
        if m.width != w || m.height != h {
            return Err(Error::Shape("mask does not match the images".into()));
        }
    }
    let k = gaussian(cfg);
    let (c1, c2) = ((cfg.k1 * cfg.range).powi(2), (cfg.k2 * cfg.range).powi(2));
    let (wo, ho, r) = (w - win + 1, h - win + 1, win / 2);
    let centres: Vec<usize> = (0..wo * ho)
        .filter(|&i| mask.is_none_or(|m| m.get(i / wo + r, i % wo + r)))
        .collect();
    if centres.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for c in 0..x.channels {
        let a: Vec<f64> = x.channel(c).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.channel(c).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mu_a = filter_valid(&a, w, h, &k);
        let mu_b = filter_valid(&b, w, h, &k);
        let aa = filter_valid(&prod(&a, &a), w, h, &k);
        let bb = filter_valid(&prod(&b, &b), w, h, &k);
        let ab = filter_valid(&prod(&a, &b), w, h, &k);
        let mut s = 0.0;
        for &i in &centres {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / centres.len() as f64;
    }
    Ok(total / x.channels as f64)
}

pub fn ssim(x: &Image, y: &Image, mask: Option<&Mask>) -> Result<f64> {
    ssim_with(x, y, mask, &SsimConfig::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinAccuracy {
    pub exact: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

pub fn bin_accuracy(pred: &[LightBin], truth: &[LightBin]) -> Result<BinAccuracy> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = pred.len() as f64;
    let frac = |f: &dyn Fn(&LightBin, &LightBin) -> bool| pred.iter().zip(truth).filter(|(a, b)| f(a, b)).count() as f64 / n;
    Ok(BinAccuracy {
        exact: frac(&|a, b| a == b),
        azimuth: frac(&|a, b| a.az_idx == b.az_idx),
        elevation: frac(&|a, b| a.el_idx == b.el_idx),
    })
}

/// Normal map of batch element `k` of a `(b, 3, h, w)` tensor.
pub fn normals_from_tensor(t: &ps2kit_grad::Tensor<f32>, k: usize) -> NormalMap {
    let img = model::unstack(t, k);
    let n = img.pixels();
    NormalMap {
        width: img.width,
        height: img.height,
        data: (0..n)
            .map(|i| Vec3::new(img.data[i] as f64, img.data[n + i] as f64, img.data[2 * n + i] as f64))
            .collect(),
    }
}

/// Per-object evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub object: String,
    /// Degrees; absent without ground truth.
    pub mae_mean: Option<f64>,
    /// Standard deviation over pairs.
    pub mae_std: Option<f64>,
    pub mae_per_pair: Vec<f64>,
    pub ssim_recon: f64,
    pub ssim_relight: Option<f64>,
    pub bin_acc: Option<f64>,
    pub bin_acc_azimuth: Option<f64>,
    pub bin_acc_elevation: Option<f64>,
    pub n_pairs: usize,
    pub ssim_variant: String,
    pub mae_std_over: String,
    pub config: serde_json::Value,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Outputs of one evaluated pair, kept for panels.
pub struct PairOutputs {
    pub first: Image,
    pub second: Image,
    pub normals: NormalMap,
    pub albedo: (Image, Image),
    pub shading: Option<Image>,
    pub reconstruction: (Image, Image),
    pub relit: Option<Image>,
}

/// Score `model` on `n_pairs` seeded pairs of `capture`.
pub fn evaluate(
    model: &Model,
    capture: &ObjectCapture,
    n_pairs: usize,
    seed: u64,
    config: serde_json::Value,
) -> Result<(EvalReport, Vec<PairOutputs>)> {
    let grid = model.grid();
    let pairs = datasets::sample_pair_indices(capture, n_pairs, seed, &grid)?;
    let mut maes = Vec::new();
    let (mut ssim_rec, mut ssim_rel) = (Vec::new(), Vec::new());
    let (mut pred_bins, mut true_bins) = (Vec::new(), Vec::new());
    let mut outputs = Vec::new();
    let mask_t = model::stack_masks(&[&capture.mask])?;
    for p in &pairs {
        let (a, b) = (&capture.samples[p.first].image, &capture.samples[p.second].image);
        let inputs = PairInputs { first: model::stack_images(&[a])?, second: model::stack_images(&[b])?, mask: mask_t.clone() };
        let pred = model.predict(&inputs)?;
        let normals = normals_from_tensor(&pred.normals, 0);
        if let Some(gt) = capture.ground_truth() {
            maes.push(mae(&normals, &gt.normals, &capture.mask)?);
        }
        let (r1, r2) = (model::unstack(&pred.reconstruction, 0), model::unstack(&pred.reconstruction, 1));
        ssim_rec.push(0.5 * (ssim(a, &r1, Some(&capture.mask))? + ssim(b, &r2, Some(&capture.mask))?));
        let relit = pred.relit.as_ref().map(|t| model::unstack(t, 0));
        if let Some(rl) = &relit {
            ssim_rel.push(ssim(a, rl, Some(&capture.mask))?);
        }
        if let Some(bins) = &pred.bins {
            pred_bins.extend_from_slice(bins);
            true_bins.extend([p.bins.0, p.bins.1]);
        }
        outputs.push(PairOutputs {
            first: a.clone(),
            second: b.clone(),
            normals,
            albedo: (model::unstack(&pred.albedo, 0), model::unstack(&pred.albedo, 1)),
            shading: pred.shading.as_ref().map(|s| model::unstack(s, 0)),
            reconstruction: (r1, r2),
            relit,
        });
    }
    let acc = if pred_bins.is_empty() { None } else { Some(bin_accuracy(&pred_bins, &true_bins)?) };
    let (mae_mean, mae_std) = if maes.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&maes);
        (Some(m), Some(s))
    };
    let report = EvalReport {
        object: capture.name.clone(),
        mae_mean,
        mae_std,
        mae_per_pair: maes,
        ssim_recon: mean_std(&ssim_rec).0,
        ssim_relight: (!ssim_rel.is_empty()).then(|| mean_std(&ssim_rel).0),
        bin_acc: acc.map(|a| a.exact),
        bin_acc_azimuth: acc.map(|a| a.azimuth),
        bin_acc_elevation: acc.map(|a| a.elevation),
        n_pairs: pairs.len(),
        ssim_variant: SSIM_VARIANT.into(),
        mae_std_over: "pairs".into(),
        config,
    };
    Ok((report, outputs))
}

/// Normals as an RGB image `n * 0.5 + 0.5`.
pub fn normal_rgb(n: &NormalMap) -> Image {
    let mut img = n.to_image();
    img.data.iter_mut().for_each(|v| *v = *v * 0.5 + 0.5);
    img
}

/// Panel row: inputs, normals, both albedos, shading, reconstruction and the
/// relit image.
pub fn panel(out: &PairOutputs) -> Result<Image> {
    let blank = Image::zeros(out.first.width, out.first.height, 3);
    let tiles = vec![
        out.first.clone(),
        out.second.clone(),
        normal_rgb(&out.normals),
        out.albedo.0.clone(),
        out.albedo.1.clone(),
        out.shading.clone().unwrap_or_else(|| blank.clone()),
        out.reconstruction.0.clone(),
        out.relit.clone().unwrap_or(blank),
    ];
    imaging::tile(&tiles, tiles.len())
}

/// Evaluate and write `report.json`, `panel_<object>.png` and the estimated
/// normals of the first pair (16-bit PNG plus float32 sidecar) into `out`.
pub fn emit_report(
    model: &Model,
    captures: &[ObjectCapture],
    n_pairs: usize,
    seed: u64,
    config: serde_json::Value,
    out: &Path,
) -> Result<Vec<EvalReport>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut reports = Vec::new();
    for capture in captures {
        let (report, outputs) = evaluate(model, capture, n_pairs, seed, config.clone())?;
        let rows: Vec<Image> = outputs.iter().map(panel).collect::<Result<_>>()?;
        if !rows.is_empty() {
            imaging::write_rgb8(&out.join(format!("panel_{}.png", capture.name)), &imaging::tile(&rows, 1)?)?;
            let n = &outputs[0].normals;
            imaging::write_normal_png16(&out.join(format!("normals_{}.png", capture.name)), n)?;
            imaging::write_bytes(&out.join(format!("normals_{}.f32", capture.name)), &n.to_f32_bytes())?;
        }
        reports.push(report);
    }
    imaging::write_bytes(&out.join("report.json"), serde_json::to_string_pretty(&reports)?.as_bytes())?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotated_field(deg: f64) -> (NormalMap, NormalMap, Mask) {
        let (n, mask) = crate::photometry::sphere_normals(24, 24);
        let (s, c) = deg.to_radians().sin_cos();
        let front = NormalMap { width: 24, height: 24, data: vec![Vec3::new(0.0, 0.0, 1.0); 576] };
        let tilted = NormalMap { width: 24, height: 24, data: vec![Vec3::new(0.0, s, c); 576] };
        assert!(mae(&n, &n, &mask).unwrap() < 1e-5);
        (front, tilted, mask)
    }

    #[test]
    fn mae_of_identity_and_rotation() {
        let (n, rot, mask) = rotated_field(10.0);
        assert!(mae(&n, &n, &mask).unwrap() < 1e-5);
        assert!((mae(&n, &rot, &mask).unwrap() - 10.0).abs() < 1e-6);
        let empty = Mask { width: 24, height: 24, data: vec![false; 576] };
        assert!(matches!(mae(&n, &n, &empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let img = Image::from_data(16, 16, 3, (0..768).map(|i| ((i * 37 % 101) as f32) / 100.0).collect()).unwrap();
        assert_eq!(ssim(&img, &img, None).unwrap(), 1.0);
        let mut inv = img.clone();
        inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&img, &inv, None).unwrap() < 1.0);
        let small = Image::zeros(8, 8, 3);
        assert!(matches!(ssim(&small, &small, None), Err(Error::Shape(_))));
    }

    #[test]
    fn bin_accuracy_extremes() {
        let a: Vec<LightBin> = (0..25).map(|i| LightBin::from_flat(i).unwrap()).collect();
        let b: Vec<LightBin> = (0..25).map(|i| LightBin::from_flat((i + 6) % 25).unwrap()).collect();
        assert_eq!(bin_accuracy(&a, &a).unwrap().exact, 1.0);
        let d = bin_accuracy(&a, &b).unwrap();
        assert_eq!(d.exact, 0.0);
        assert_eq!(d.azimuth, 0.0);
        assert!(bin_accuracy(&a, &b[..3]).is_err());
    }
}
