//! Frame-level encoder and classifier.
//!
//! A small stack of `conv -> ReLU -> 2x2 max-pool` stages feeds a dense
//! feature layer with ReLU (the per-image feature vector handed to the
//! sequence model) and a dense 3-way sigmoid head (the frame-only
//! classifier). [`FrameClassifier`] is that head on its own, trained directly
//! on precomputed feature vectors.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::nn::container::take_tensors;
use crate::nn::{
    maxpool2d, maxpool2d_backward, read_container, relu, relu_grad, sigmoid, sigmoid_bce,
    write_container, Conv2d, Dense, MaxPool, ModelHeader, Parameters, Tensor,
};
use crate::train::{check_train_config, train_loop};
pub use crate::train::{write_history, EpochLoss, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Input frames are `[3, image_size, image_size]`.
    pub image_size: usize,
    /// Output channels of each conv stage.
    pub channels: Vec<usize>,
    /// Odd kernel extent; convolutions use "same" zero padding.
    pub kernel: usize,
    pub feature_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            image_size: 32,
            channels: vec![4, 8],
            kernel: 3,
            feature_dim: 250,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.channels.len();
        if stages == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("cnn needs at least one conv stage with positive channels"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("cnn kernel must be odd, got {}", self.kernel)));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("cnn feature_dim must be positive"));
        }
        let div = 1usize << stages;
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::invalid(format!(
                "image_size {} must be a positive multiple of {div} for {stages} pooling stages",
                self.image_size
            )));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let side = self.image_size >> self.channels.len();
        self.channels.last().copied().unwrap_or(0) * side * side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    config: CnnConfig,
    pub convs: Vec<Conv2d>,
    pub feature: Dense,
    pub head: Dense,
}

/// Class probabilities and the post-ReLU feature vector of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnOutput {
    pub probs: [f64; 3],
    pub features: Vec<f64>,
}

struct StageCache {
    input: Tensor,
    pre_relu: Tensor,
    pool: MaxPool,
}

struct Cache {
    stages: Vec<StageCache>,
    flat: Tensor,
    feature_pre: Tensor,
    features: Tensor,
    logits: [f64; 3],
}

impl CnnModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: CnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let pad = config.kernel / 2;
        let mut in_ch = 3;
        let mut convs = Vec::with_capacity(config.channels.len());
        for &out_ch in &config.channels {
            convs.push(Conv2d::glorot(in_ch, out_ch, config.kernel, 1, pad, rng));
            in_ch = out_ch;
        }
        Ok(CnnModel {
            feature: Dense::glorot(config.flat_dim(), config.feature_dim, rng),
            head: Dense::glorot(config.feature_dim, 3, rng),
            convs,
            config,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(config: CnnConfig) -> Result<Self> {
        let mut m = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for t in m.params_mut() {
            t.fill(0.0);
        }
        Ok(m)
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        image.expect_shape(&[3, s, s])
    }

    fn forward_cached(&self, image: &Tensor) -> Result<Cache> {
        self.check_image(image)?;
        let mut stages = Vec::with_capacity(self.convs.len());
        let mut x = image.clone();
        for conv in &self.convs {
            let z = conv.forward(&x)?;
            let (pooled, pool) = maxpool2d(&z.map(relu))?;
            stages.push(StageCache {
                input: x,
                pre_relu: z,
                pool,
            });
            x = pooled;
        }
        let n = x.len();
        let flat = x.reshape(&[n])?;
        let feature_pre = self.feature.forward(&flat)?;
        let features = feature_pre.map(relu);
        let z = self.head.forward(&features)?;
        let logits = [z.data()[0], z.data()[1], z.data()[2]];
        Ok(Cache {
            stages,
            flat,
            feature_pre,
            features,
            logits,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<CnnOutput> {
        let c = self.forward_cached(image)?;
        Ok(CnnOutput {
            probs: c.logits.map(sigmoid),
            features: c.features.into_data(),
        })
    }

    /// Mean BCE over the three sigmoid outputs and its gradient for every
    /// parameter tensor, in [`Parameters`] order.
    pub fn loss_and_grads(&self, image: &Tensor, targets: [f64; 3]) -> Result<(f64, Vec<Tensor>)> {
        let cache = self.forward_cached(image)?;
        let mut dlogits = [0.0; 3];
        let loss = sigmoid_bce(&cache.logits, &targets, &mut dlogits);
        let head = self.head.backward(&cache.features, &Tensor::from_vec(dlogits.to_vec()))?;
        let mut dfeat_pre = head.input;
        for (g, &z) in dfeat_pre.data_mut().iter_mut().zip(cache.feature_pre.data()) {
            *g *= relu_grad(z);
        }
        let feat = self.feature.backward(&cache.flat, &dfeat_pre)?;
        let mut upstream = feat.input;
        let mut conv_grads = Vec::with_capacity(self.convs.len());
        for (conv, st) in self.convs.iter().zip(&cache.stages).rev() {
            let pooled_shape = {
                let s = st.pre_relu.shape();
                [s[0], s[1] / 2, s[2] / 2]
            };
            let dpool = Tensor::new(pooled_shape.to_vec(), upstream.into_data())?;
            let mut dz = maxpool2d_backward(&st.pool, &dpool)?;
            for (g, &z) in dz.data_mut().iter_mut().zip(st.pre_relu.data()) {
                *g *= relu_grad(z);
            }
            let g = conv.backward(&st.input, &dz)?;
            upstream = g.input;
            conv_grads.push((g.kernels, g.bias));
        }
        conv_grads.reverse();
        let mut grads = Vec::with_capacity(2 * self.convs.len() + 4);
        for (k, b) in conv_grads {
            grads.push(k);
            grads.push(b);
        }
        grads.extend([feat.weight, feat.bias, head.weight, head.bias]);
        Ok((loss, grads))
    }

    pub fn save<W: Write>(&self, writer: W, seed: u64) -> Result<()> {
        let header = ModelHeader {
            format_version: 0,
            kind: "cnn".into(),
            mode: None,
            groups: vec![],
            seed,
            config: serde_json::to_value(&self.config).expect("config serializes"),
            tensors: vec![],
        };
        write_container(writer, header, &self.named_params())
    }

    /// Loads a model and returns it with the seed recorded at save time.
    pub fn load<R: Read>(reader: R) -> Result<(Self, u64)> {
        let (header, tensors) = read_container(reader)?;
        if header.kind != "cnn" {
            return Err(Error::Container(format!("expected a cnn model, found {:?}", header.kind)));
        }
        let config: CnnConfig = serde_json::from_value(header.config)
            .map_err(|e| Error::Container(format!("cnn config: {e}")))?;
        let mut model = Self::zeros(config)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        take_tensors(tensors, names.into_iter().zip(model.params_mut()).collect())?;
        Ok((model, header.seed))
    }
}

impl Parameters for CnnModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.kernels"), &c.kernels));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        out.push(("feature.weight".into(), &self.feature.weight));
        out.push(("feature.bias".into(), &self.feature.bias));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.kernels);
            out.push(&mut c.bias);
        }
        out.extend([
            &mut self.feature.weight,
            &mut self.feature.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }
}

pub fn cnn_forward(model: &CnnModel, image: &Tensor) -> Result<CnnOutput> {
    model.forward(image)
}

// ---------------------------------------------------------------------------
// Training

fn pixels_of(records: &[ImageRecord]) -> Result<Vec<&Tensor>> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.pixels.is_none())
        .map(|r| r.image_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPixels(missing));
    }
    Ok(records.iter().map(|r| r.pixels.as_ref().unwrap()).collect())
}

/// Trains the CNN end to end on pixel records with mean BCE and Adam.
/// Records are reshuffled every epoch from the seeded stream.
pub fn cnn_train(
    model: &mut CnnModel,
    train: &[ImageRecord],
    val: Option<&[ImageRecord]>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    check_train_config(cfg)?;
    if train.is_empty() {
        return Err(Error::invalid("cnn training set is empty"));
    }
    let images = pixels_of(train)?;
    for img in &images {
        model.check_image(img)?;
    }
    let targets: Vec<[f64; 3]> = train.iter().map(ImageRecord::targets).collect();
    let val_data = match val {
        Some(v) if !v.is_empty() => Some((pixels_of(v)?, v.iter().map(ImageRecord::targets).collect::<Vec<_>>())),
        _ => None,
    };
    train_loop(
        model,
        train.len(),
        cfg,
        "train-cnn",
        |m, i| m.loss_and_grads(images[i], targets[i]),
        |m| match &val_data {
            None => Ok(None),
            Some((imgs, ts)) => {
                let mut total = 0.0;
                for (img, t) in imgs.iter().zip(ts) {
                    let logits = m.forward_cached(img)?.logits;
                    total += sigmoid_bce(&logits, t, &mut [0.0; 3]);
                }
                Ok(Some(total / imgs.len() as f64))
            }
        },
    )
}

/// Attaches each record's CNN feature vector.
pub fn extract_features(model: &CnnModel, records: &mut [ImageRecord]) -> Result<()> {
    pixels_of(records)?;
    for r in records.iter_mut() {
        let out = model.forward(r.pixels.as_ref().expect("checked"))?;
        r.features = Some(out.features);
    }
    Ok(())
}

/// Frame-only class probabilities from pixels.
pub fn predict_frames(model: &CnnModel, records: &[ImageRecord]) -> Result<Vec<[f64; 3]>> {
    pixels_of(records)?
        .into_iter()
        .map(|img| model.forward(img).map(|o| o.probs))
        .collect()
}

// ---------------------------------------------------------------------------
// Frame classifier on precomputed features

/// The CNN's 3-way sigmoid head applied directly to feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClassifier {
    pub head: Dense,
}

impl FrameClassifier {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Self {
        FrameClassifier {
            head: Dense::glorot(feature_dim, 3, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.head.n_in()
    }

    pub fn predict_one(&self, features: &[f64]) -> Result<[f64; 3]> {
        if features.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                context: "frame classifier input".into(),
                expected: self.feature_dim(),
                found: features.len(),
            });
        }
        let mut z = [0.0; 3];
        self.head.forward_slice(features, &mut z);
        Ok(z.map(sigmoid))
    }

    pub fn predict(&self, records: &[ImageRecord]) -> Result<Vec<[f64; 3]>> {
        crate::data::feature_dim(records)?;
        records
            .iter()
            .map(|r| self.predict_one(r.features.as_ref().expect("checked")))
            .collect()
    }

    fn loss_and_grads(&self, features: &[f64], targets: [f64; 3]) -> (f64, Vec<Tensor>) {
        let mut z = [0.0; 3];
        self.head.forward_slice(features, &mut z);
        let mut dz = [0.0; 3];
        let loss = sigmoid_bce(&z, &targets, &mut dz);
        let mut dw = Tensor::zeros(self.head.weight.shape());
        let mut db = Tensor::zeros(&[3]);
        self.head
            .backward_slice(features, &dz, dw.data_mut(), db.data_mut(), None);
        (loss, vec![dw, db])
    }

    /// Trains on the records' feature vectors with mean BCE and Adam.
    pub fn train(&mut self, records: &[ImageRecord], cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
        check_train_config(cfg)?;
        if records.is_empty() {
            return Err(Error::invalid("frame classifier training set is empty"));
        }
        let dim = crate::data::feature_dim(records)?;
        if dim != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                context: "frame classifier features".into(),
                expected: self.feature_dim(),
                found: dim,
            });
        }
        train_loop(
            self,
            records.len(),
            cfg,
            "train-frame",
            |m, i| {
                let r = &records[i];
                Ok(m.loss_and_grads(r.features.as_ref().expect("checked"), r.targets()))
            },
            |_| Ok(None),
        )
    }
}

impl Parameters for FrameClassifier {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.weight".into(), &self.head.weight),
            ("head.bias".into(), &self.head.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.head.weight, &mut self.head.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> CnnConfig {
        CnnConfig {
            image_size: 8,
            channels: vec![2, 3],
            kernel: 3,
            feature_dim: 5,
        }
    }

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[3, size, size]);
        t.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>());
        t
    }

    #[test]
    fn zero_network() {
        let m = CnnModel::zeros(CnnConfig::default()).unwrap();
        let out = m.forward(&image(32, 1)).unwrap();
        assert_eq!(out.probs, [0.5; 3]);
        assert_eq!(out.features, vec![0.0; 250]);
    }

    #[test]
    fn probabilities_in_open_interval_and_deterministic() {
        let m = CnnModel::new(CnnConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let img = image(32, 2);
        let a = m.forward(&img).unwrap();
        assert!(a.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(a.features.iter().all(|&f| f >= 0.0));
        let m2 = CnnModel::new(CnnConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m2.forward(&img).unwrap(), a);
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let m = CnnModel::zeros(CnnConfig::default()).unwrap();
        assert!(m.forward(&image(16, 1)).is_err());
        assert!(CnnModel::zeros(CnnConfig { image_size: 30, ..CnnConfig::default() }).is_err());
        assert!(CnnModel::zeros(CnnConfig { kernel: 2, ..CnnConfig::default() }).is_err());
    }

    #[test]
    fn full_gradient_check() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = CnnModel::new(cfg, &mut rng).unwrap();
        // Nonzero biases keep pre-activations away from exact ReLU kinks.
        for t in model.params_mut() {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.05..0.2));
            }
        }
        let img = image(8, 9);
        let targets = [1.0, 0.0, 1.0];
        let (_, grads) = model.loss_and_grads(&img, targets).unwrap();
        let analytic = crate::nn::flatten(&grads);
        let theta = model.flat_params();
        let mut probe = model.clone();
        let f = |p: &[f64]| {
            probe.set_flat_params(p).unwrap();
            probe.loss_and_grads(&img, targets).unwrap().0
        };
        let rep = grad_check(f, &theta, &analytic, 1e-5).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn save_load_round_trip() {
        let m = CnnModel::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf, 77).unwrap();
        let (back, seed) = CnnModel::load(buf.as_slice()).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(back, m);
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let mut m = CnnModel::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = m.clone();
        let mut recs = crate::data::synth_corridor(
            &crate::data::SynthConfig { n_points: 4, ..Default::default() },
            0,
        )
        .unwrap();
        crate::data::render_frames(&mut recs, 8, None, 0).unwrap();
        let hist = cnn_train(&mut m, &recs, None, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(hist.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn training_errors() {
        let mut m = CnnModel::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(cnn_train(&mut m, &[], None, &TrainConfig::default()).is_err());
        let recs = crate::data::synth_corridor(
            &crate::data::SynthConfig { n_points: 3, ..Default::default() },
            0,
        )
        .unwrap();
        assert!(matches!(
            cnn_train(&mut m, &recs, None, &TrainConfig::default()),
            Err(Error::MissingPixels(_))
        ));
    }
}
