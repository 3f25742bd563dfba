//! A parameterised model together with its configuration, eval-mode
//! prediction, and the versioned checkpoint archive.

use std::io::Write;
use std::path::Path;

use ps2kit_grad::{Adam, Graph, Moments, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::imaging::{Image, Mask};
use crate::lightspace::{LightBin, LightGrid};
use crate::neural::{self, AblationConfig, Ctx, Depth, ModelConfig, PairInputs};

pub const CHECKPOINT_SCHEMA: &str = "ps2kit-ckpt-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    pub params: ParamStore<f32>,
}

/// Eval-mode outputs for a batch of pairs, as plain tensors.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `(b, 3, h, w)` unit normals.
    pub normals: Tensor<f32>,
    /// `(2b, 3, h, w)` albedo fed to reconstruction, first images then second.
    pub albedo: Tensor<f32>,
    pub coarse_albedo: Tensor<f32>,
    /// `(2b, 3, h, w)` reflectance maps.
    pub reflectance: Tensor<f32>,
    /// `(2b, 3, h, w)` reconstructions.
    pub reconstruction: Tensor<f32>,
    /// `(2b, 1, h, w)` shading under the estimated lights.
    pub shading: Option<Tensor<f32>>,
    /// `(b, 3, h, w)` second images relit to the first images' lights.
    pub relit: Option<Tensor<f32>>,
    /// Estimated bins, first images then second.
    pub bins: Option<Vec<LightBin>>,
    pub lights: Option<Vec<Vec3>>,
}

impl Model {
    pub fn new(config: ModelConfig, ablation: AblationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        Ok(Self { config, ablation, params: neural::init_params(&config, &ablation, seed) })
    }

    pub fn grid(&self) -> LightGrid {
        LightGrid::new(self.config.light_bins).expect("validated bin count")
    }

    pub fn predict(&self, inputs: &PairInputs<f32>) -> Result<Prediction> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.params, self.config, false, 0);
        let f = neural::forward(&ctx, &self.ablation, inputs, Depth::Full)?;
        let bins = f.logits.as_ref().map(neural::predicted_bins);
        let lights = f.lights.map(|l| l.value().data().chunks(3).map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect());
        let normals2 = ps2kit_grad::Var::cat_batch(&[f.normals, f.normals]);
        Ok(Prediction {
            normals: (*f.normals.value()).clone(),
            albedo: (*f.albedo().value()).clone(),
            coarse_albedo: (*f.coarse_albedo.value()).clone(),
            reflectance: (*f.reflectance.expect("full depth").value()).clone(),
            reconstruction: (*f.reconstruction.expect("full depth").value()).clone(),
            shading: f.lights.map(|l| (*neural::shading(normals2, l).value()).clone()),
            relit: f.relit.map(|r| (*r.value()).clone()),
            bins,
            lights,
        })
    }

    /// Relight `(b, 3, h, w)` images to explicit target lights.
    pub fn relight_to(&self, images: &Tensor<f32>, mask: &Tensor<f32>, targets: &[Vec3]) -> Result<Tensor<f32>> {
        if !self.ablation.relighting {
            return Err(Error::Config("model was built without the relighting module".into()));
        }
        if targets.len() != images.shape()[0] {
            return Err(Error::Shape(format!("{} targets for {} images", targets.len(), images.shape()[0])));
        }
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.params, self.config, false, 0);
        let out = neural::relight(
            &ctx,
            ctx.constant(images.clone()),
            ctx.constant(mask.clone()),
            ctx.constant(neural::lights_tensor(targets)),
        )?;
        Ok((*out.value()).clone())
    }
}

/// Stack images into a `(b, c, h, w)` tensor.
pub fn stack_images(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Shape("no images to stack".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.channels != c || img.height != h || img.width != w {
            return Err(Error::Shape("stacked images must share a shape".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new([images.len(), c, h, w], data))
}

pub fn stack_masks(masks: &[&Mask]) -> Result<Tensor<f32>> {
    let imgs: Vec<Image> = masks.iter().map(|m| m.to_image()).collect();
    stack_images(&imgs.iter().collect::<Vec<_>>())
}

/// Image `k` of a `(b, c, h, w)` tensor.
pub fn unstack(t: &Tensor<f32>, k: usize) -> Image {
    let (_, c, h, w) = t.dims4();
    let n = c * h * w;
    Image { width: w, height: h, channels: c, data: t.data()[k * n..(k + 1) * n].to_vec() }
}

/// Random-number-generator position, enough to resume a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, in decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Config("malformed rng state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything needed to resume training bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam<f32>,
    pub iteration: u64,
    pub epoch: u64,
    pub rng: RngState,
    /// Training configuration echo.
    pub train_config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    nbytes: usize,
    kind: String,
    /// Per-parameter optimiser step, on moment records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    iteration: u64,
    epoch: u64,
    adam_step: u64,
    model: ModelConfig,
    ablation: AblationConfig,
    train: serde_json::Value,
    rng: RngState,
    tensors: Vec<TensorRecord>,
}

fn push_tensor(
    records: &mut Vec<TensorRecord>,
    blob: &mut Vec<u8>,
    name: &str,
    shape: &[usize],
    data: &[f32],
    kind: &str,
    step: Option<u64>,
) {
    records.push(TensorRecord {
        name: name.to_string(),
        shape: shape.to_vec(),
        dtype: "f32".into(),
        offset: blob.len(),
        nbytes: data.len() * 4,
        kind: kind.into(),
        step,
    });
    for v in data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = Vec::new();
        let mut blob = Vec::new();
        for (name, e) in self.model.params.iter() {
            let kind = if e.trainable { "param" } else { "buffer" };
            push_tensor(&mut records, &mut blob, name, e.tensor.shape(), e.tensor.data(), kind, None);
        }
        for (name, m) in self.optimizer.moments() {
            let n = m.first.len();
            push_tensor(&mut records, &mut blob, name, &[n], &m.first, "adam_m", Some(m.step));
            push_tensor(&mut records, &mut blob, name, &[n], &m.second, "adam_v", Some(m.step));
        }
        let header = Header {
            schema: CHECKPOINT_SCHEMA.into(),
            iteration: self.iteration,
            epoch: self.epoch,
            adam_step: self.optimizer.steps(),
            model: self.model.config,
            ablation: self.model.ablation,
            train: self.train_config.clone(),
            rng: self.rng.clone(),
            tensors: records,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Shape(format!("checkpoint: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let value: serde_json::Value = serde_json::from_slice(body)?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<none>");
        if schema != CHECKPOINT_SCHEMA {
            return Err(Error::Schema { expected: CHECKPOINT_SCHEMA.into(), found: schema.into() });
        }
        let header: Header = serde_json::from_value(value)?;
        let blob = &bytes[8 + hlen..];
        let mut params = ParamStore::new();
        let mut moments: std::collections::BTreeMap<String, Moments<f32>> = Default::default();
        for r in header.tensors {
            if r.dtype != "f32" {
                return Err(bad(&format!("unsupported dtype {}", r.dtype)));
            }
            let raw = blob.get(r.offset..r.offset + r.nbytes).ok_or_else(|| bad(&format!("{} out of range", r.name)))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if data.len() != r.shape.iter().product::<usize>() {
                return Err(bad(&format!("{} shape disagrees with its size", r.name)));
            }
            match r.kind.as_str() {
                "param" => params.insert(r.name, Tensor::new(r.shape, data), true),
                "buffer" => params.insert(r.name, Tensor::new(r.shape, data), false),
                "adam_m" | "adam_v" => {
                    let m = moments.entry(r.name).or_insert_with(|| Moments { step: 0, first: vec![], second: vec![] });
                    m.step = r.step.unwrap_or(0);
                    if r.kind == "adam_m" {
                        m.first = data;
                    } else {
                        m.second = data;
                    }
                }
                other => return Err(bad(&format!("unknown tensor kind {other}"))),
            }
        }
        let expected = neural::init_params::<f32>(&header.model, &header.ablation, 0);
        for (name, e) in expected.iter() {
            match params.get(name) {
                Some(t) if t.shape() == e.tensor.shape() => {}
                _ => return Err(bad(&format!("parameter {name} missing or misshapen"))),
            }
        }
        let mut optimizer = Adam::default();
        if moments.values().any(|m| m.first.len() != m.second.len()) {
            return Err(bad("optimiser moments are incomplete"));
        }
        optimizer.restore(header.adam_step, moments);
        Ok(Self {
            model: Model { config: header.model, ablation: header.ablation, params },
            optimizer,
            iteration: header.iteration,
            epoch: header.epoch,
            rng: header.rng,
            train_config: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::imaging::read_bytes(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig { width_div: 32, ..Default::default() };
        let model = Model::new(cfg, AblationConfig::default(), 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let mut opt = Adam::default();
        let mut params = model.params.clone();
        let grads = params.trainable_names().map(|n| (n.to_string(), Tensor::full(params.get(n).unwrap().shape().to_vec(), 0.1))).collect();
        opt.step(&mut params, &grads, 1e-3);
        let ck = Checkpoint {
            model: Model { params, ..model },
            optimizer: opt,
            iteration: 17,
            epoch: 2,
            rng: RngState::capture(&rng),
            train_config: serde_json::json!({"lr": 1e-4}),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.iteration, 17);
        assert_eq!(back.optimizer.steps(), 1);
        assert_eq!(back.optimizer.moments().count(), ck.optimizer.moments().count());
        let mut r2 = back.rng.restore().unwrap();
        assert_eq!(r2.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn wrong_schema_is_reported() {
        let header = br#"{"schema":"something-else"}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Schema { .. })));
    }
}
