//! Training objectives. Image losses average over masked pixels and
//! channels so their weights do not depend on resolution.

use ps2kit_grad::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lightspace::LightBin;
use crate::neural::LightingLogits;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.5, l2: 0.5, perceptual: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.l1, self.l2, self.perceptual].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

fn check_same(x: &[usize], y: &[usize]) -> Result<()> {
    if x != y {
        return Err(Error::Shape(format!("{x:?} vs {y:?}")));
    }
    Ok(())
}

/// Masked pixel count of a `(b, 1, h, w)` mask, checked against `x`.
fn mask_count<T: Scalar>(x: &[usize], mask: Var<'_, T>) -> Result<f64> {
    let ms = mask.shape();
    if ms.len() != 4 || ms[1] != 1 || ms[0] != x[0] || ms[2..] != x[2..] {
        return Err(Error::Shape(format!("mask {ms:?} does not fit {x:?}")));
    }
    let count = mask.value().data().iter().map(|v| v.as_f64()).sum::<f64>();
    if count <= 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(count)
}

/// Masked `(x - y)` together with the mean normaliser `1 / (c * count)`.
fn masked_diff<'g, T: Scalar>(x: Var<'g, T>, y: Var<'g, T>, mask: Var<'g, T>) -> Result<(Var<'g, T>, T)> {
    let shape = x.shape();
    check_same(&shape, &y.shape())?;
    let count = mask_count(&shape, mask)?;
    Ok((x.sub(y).mul_channelwise(mask), T::cst(1.0 / (shape[1] as f64 * count))))
}

pub fn l1<'g, T: Scalar>(x: Var<'g, T>, y: Var<'g, T>, mask: Var<'g, T>) -> Result<Var<'g, T>> {
    let (d, k) = masked_diff(x, y, mask)?;
    Ok(d.abs().sum_all().scale(k))
}

pub fn l2<'g, T: Scalar>(x: Var<'g, T>, y: Var<'g, T>, mask: Var<'g, T>) -> Result<Var<'g, T>> {
    let (d, k) = masked_diff(x, y, mask)?;
    Ok(d.sqr().sum_all().scale(k))
}

/// Which feature map of the fixed extractor the perceptual loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLayer {
    /// Rectified oriented-derivative responses at full resolution.
    Edges,
    /// Half-resolution rectified mixtures of the edge responses.
    #[default]
    Mid,
}

/// Frozen feature extractor for the perceptual loss. A fixed bank of
/// smoothing, gradient and Laplacian filters per colour channel, rectified
/// in both signs, optionally followed by a pooled, seeded random
/// projection layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layer: FeatureLayer,
    bank: Vec<f64>,
    mix: Vec<f64>,
}

const BANK: [[f64; 9]; 4] = [
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0, 2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    [-0.25, 0.0, 0.25, -0.5, 0.0, 0.5, -0.25, 0.0, 0.25],
    [-0.25, -0.5, -0.25, 0.0, 0.0, 0.0, 0.25, 0.5, 0.25],
    [0.0, 0.25, 0.0, 0.25, -1.0, 0.25, 0.0, 0.25, 0.0],
];
const EDGE_CHANNELS: usize = 2 * 3 * BANK.len();
const MID_CHANNELS: usize = 32;

impl FeatureExtractor {
    pub fn new(layer: FeatureLayer, seed: u64) -> Self {
        let mut bank = vec![0.0; 3 * BANK.len() * 3 * 9];
        for c in 0..3 {
            for (f, taps) in BANK.iter().enumerate() {
                let o = c * BANK.len() + f;
                bank[(o * 3 + c) * 9..(o * 3 + c + 1) * 9].copy_from_slice(taps);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / (EDGE_CHANNELS * 9) as f64).sqrt();
        let mix = (0..MID_CHANNELS * EDGE_CHANNELS * 9).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { layer, bank, mix }
    }

    pub fn channels(&self) -> usize {
        match self.layer {
            FeatureLayer::Edges => EDGE_CHANNELS,
            FeatureLayer::Mid => MID_CHANNELS,
        }
    }

    pub fn features<'g, T: Scalar>(&self, x: Var<'g, T>) -> Var<'g, T> {
        let g: &'g Graph<T> = x.graph();
        let k = 3 * BANK.len();
        let bank = g.constant(Tensor::new([k, 3, 3, 3], self.bank.iter().map(|&v| T::cst(v)).collect()));
        let r = x.conv2d(bank, None, 1, 1);
        let edges = Var::cat_channels(&[r, r.scale(-T::one())]).relu();
        match self.layer {
            FeatureLayer::Edges => edges,
            FeatureLayer::Mid => {
                let mix = g.constant(Tensor::new(
                    [MID_CHANNELS, EDGE_CHANNELS, 3, 3],
                    self.mix.iter().map(|&v| T::cst(v)).collect(),
                ));
                edges.avg_pool2().conv2d(mix, None, 1, 1).relu()
            }
        }
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(FeatureLayer::default(), 0x5eed)
    }
}

/// Mean absolute difference of extractor features of the masked images.
pub fn perceptual<'g, T: Scalar>(
    fx: &FeatureExtractor,
    x: Var<'g, T>,
    y: Var<'g, T>,
    mask: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let shape = x.shape();
    check_same(&shape, &y.shape())?;
    if shape[1] != 3 {
        return Err(Error::Shape(format!("perceptual loss needs 3-channel images, got {shape:?}")));
    }
    mask_count(&shape, mask)?;
    let d = fx.features(x.mul_channelwise(mask)).sub(fx.features(y.mul_channelwise(mask)));
    Ok(d.abs().mean_all())
}

/// Weighted sum of the three image terms, with the parts kept for logging.
pub struct ImageLoss<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub l1: Var<'g, T>,
    pub l2: Var<'g, T>,
    pub perceptual: Var<'g, T>,
}

pub fn loss_total<'g, T: Scalar>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    mask: Var<'g, T>,
    w: &LossWeights,
    fx: &FeatureExtractor,
) -> Result<ImageLoss<'g, T>> {
    let a = l1(x, y, mask)?;
    let b = l2(x, y, mask)?;
    let c = perceptual(fx, x, y, mask)?;
    let total = a.scale(T::cst(w.l1)).add(b.scale(T::cst(w.l2))).add(c.scale(T::cst(w.perceptual)));
    Ok(ImageLoss { total, l1: a, l2: b, perceptual: c })
}

/// Mean over masked pixels of `||n - m||^2`.
pub fn loss_normal<'g, T: Scalar>(n: Var<'g, T>, m: Var<'g, T>, mask: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = n.shape();
    check_same(&shape, &m.shape())?;
    let count = mask_count(&shape, mask)?;
    Ok(n.sub(m).mul_channelwise(mask).sqr().sum_all().scale(T::cst(1.0 / count)))
}

/// Summed cross-entropy of the elevation and azimuth heads, averaged over
/// the batch.
pub fn loss_lighting_ce<'g, T: Scalar>(logits: &LightingLogits<'g, T>, targets: &[LightBin]) -> Result<Var<'g, T>> {
    let shape = logits.elevation.shape();
    if shape[0] != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", shape[0], targets.len())));
    }
    if let Some(t) = targets.iter().find(|t| t.az_idx >= shape[1] || t.el_idx >= shape[1]) {
        return Err(Error::Domain(format!("target bin {t:?} outside {} classes", shape[1])));
    }
    let el: Vec<usize> = targets.iter().map(|t| t.el_idx).collect();
    let az: Vec<usize> = targets.iter().map(|t| t.az_idx).collect();
    Ok(logits.elevation.cross_entropy(&el).add(logits.azimuth.cross_entropy(&az)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: [usize; 4], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin() * 0.5 + 0.5)
    }

    #[test]
    fn constant_offset_terms() {
        let g = Graph::<f64>::new();
        let x = pseudo([1, 3, 8, 8], 0.3);
        let c = 0.125;
        let xv = g.constant(x.clone());
        let yv = g.constant(x.map(|v| v + c));
        let m = g.constant(Tensor::full([1, 1, 8, 8], 1.0));
        let w = LossWeights::default();
        assert!((l1(xv, yv, m).unwrap().value().item() * w.l1 - 0.5 * c).abs() < 1e-12);
        assert!((l2(xv, yv, m).unwrap().value().item() * w.l2 - 0.5 * c * c).abs() < 1e-12);
    }

    #[test]
    fn unmasked_pixels_do_not_matter() {
        let g = Graph::<f64>::new();
        let fx = FeatureExtractor::default();
        let x = pseudo([1, 3, 8, 8], 0.3);
        let y = pseudo([1, 3, 8, 8], 0.7);
        let mask = Tensor::from_fn([1, 1, 8, 8], |i| if i % 8 < 5 { 1.0 } else { 0.0 });
        let mut y2 = y.clone();
        for (i, v) in y2.data_mut().iter_mut().enumerate() {
            if i % 8 >= 5 {
                *v = 0.0;
            }
        }
        let m = g.constant(mask);
        let a = loss_total(g.constant(x.clone()), g.constant(y), m, &LossWeights::default(), &fx).unwrap();
        let b = loss_total(g.constant(x), g.constant(y2), m, &LossWeights::default(), &fx).unwrap();
        assert_eq!(a.total.value().item(), b.total.value().item());
    }

    #[test]
    fn perceptual_is_symmetric_and_zero_on_identity() {
        let g = Graph::<f64>::new();
        let fx = FeatureExtractor::default();
        let x = g.constant(pseudo([2, 3, 8, 8], 0.3));
        let y = g.constant(pseudo([2, 3, 8, 8], 0.9));
        let m = g.constant(Tensor::full([2, 1, 8, 8], 1.0));
        assert_eq!(perceptual(&fx, x, x, m).unwrap().value().item(), 0.0);
        let ab = perceptual(&fx, x, y, m).unwrap().value().item();
        let ba = perceptual(&fx, y, x, m).unwrap().value().item();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_and_shape_errors() {
        let g = Graph::<f64>::new();
        let x = g.constant(pseudo([1, 3, 4, 4], 0.3));
        let z = g.constant(Tensor::zeros([1, 1, 4, 4]));
        assert!(matches!(loss_normal(x, x, z), Err(Error::EmptyMask)));
        let y = g.constant(pseudo([1, 3, 4, 8], 0.3));
        assert!(matches!(l1(x, y, z), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_must_be_nonnegative() {
        assert!(LossWeights { l1: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
