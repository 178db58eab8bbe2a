//! Transfer-learning regressor: a convolutional backbone followed by global
//! average pooling, a 1024-unit ReLU layer and a single linear output,
//! trained with Adam on mean squared error.
//!
//! Only the last `trainable_tail_layers` parameterised backbone layers
//! (convolutions and batch-norm layers, in topological order) are updated;
//! the head always trains. When the whole backbone is frozen, pooled
//! features are computed once per training call and reused every epoch.

mod adam;
pub mod backbones;
mod builder;
pub mod graph;
mod head;
pub mod ops;
pub mod weights;

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::preprocess::{Dataset, ImageTensor};
use crate::seed;

pub use adam::{Adam, AdamParams};
pub use backbones::{build_backbone, BackboneName, STUB_SEED};
pub use builder::{GraphBuilder, KernelInit};
pub use graph::{Grads, Graph, Plan};
pub use head::{Activation, Head, HeadCache, HeadConfig, HeadGrads, Pooling};

pub const DEFAULT_TRAINABLE_TAIL: usize = 10;

/// Samples per gradient work unit. Fixed so that the reduction order, and
/// therefore the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsSource {
    Imagenet,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: BackboneName,
    #[serde(default = "default_weights")]
    pub weights: WeightsSource,
    #[serde(default = "default_tail")]
    pub trainable_tail_layers: usize,
    /// Rescale `[0,1]` inputs to the backbone's native `[-1,1]` range.
    #[serde(default)]
    pub canonical_preprocessing: bool,
}

fn default_weights() -> WeightsSource {
    WeightsSource::Imagenet
}

fn default_tail() -> usize {
    DEFAULT_TRAINABLE_TAIL
}

impl BackboneSpec {
    pub fn new(name: BackboneName) -> Self {
        BackboneSpec {
            name,
            weights: default_weights(),
            trainable_tail_layers: DEFAULT_TRAINABLE_TAIL,
            canonical_preprocessing: false,
        }
    }

    pub fn stub() -> Self {
        BackboneSpec::new(BackboneName::Stub)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    MeanSquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: Loss,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: Loss::MeanSquaredError,
            optimizer: Optimizer::Adam,
            learning_rate: 0.001,
            epochs: 20,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: BackboneSpec,
    pub backbone: Graph,
    pub head: Head,
    pub seed: u64,
}

/// Builds backbone and head. Backbone weights come from the local cache
/// for [`WeightsSource::Imagenet`] (the stub is always self-initialised),
/// then the freeze policy of `spec.trainable_tail_layers` is applied.
pub fn build_model(spec: &BackboneSpec, head: &HeadConfig, seed: u64) -> Result<Model> {
    head.validate()?;
    let mut backbone = build_backbone(spec.name, seed::derive(seed, "backbone", 0));
    if spec.weights == WeightsSource::Imagenet && spec.name != BackboneName::Stub {
        weights::load_pretrained(&mut backbone, spec.name)?;
    }
    let features = backbone.output_shape().c;
    let mut model = Model {
        spec: *spec,
        backbone,
        head: Head::new(*head, features, seed::derive(seed, "head", 0)),
        seed,
    };
    let layers = model.parameterized_layers();
    let k = if spec.name == BackboneName::Stub && spec.trainable_tail_layers > layers {
        static CLAMP_WARNING: std::sync::Once = std::sync::Once::new();
        CLAMP_WARNING.call_once(|| {
            log::warn!(
                "stub backbone has {layers} parameterized layers; trainable tail of {} clamped to {layers}",
                spec.trainable_tail_layers
            )
        });
        layers
    } else {
        spec.trainable_tail_layers
    };
    model.set_trainable_tail(k)?;
    Ok(model)
}

/// Freezes every parameterised backbone layer except the last `k`.
pub fn set_trainable_tail(mut model: Model, k: usize) -> Result<Model> {
    model.set_trainable_tail(k)?;
    Ok(model)
}

impl Model {
    pub fn parameterized_layers(&self) -> usize {
        self.backbone.layers.len()
    }

    pub fn set_trainable_tail(&mut self, k: usize) -> Result<()> {
        let n = self.parameterized_layers();
        if k > n {
            return Err(Error::invalid(format!(
                "trainable tail of {k} layers exceeds the {n} parameterized layers of {}",
                self.spec.name
            )));
        }
        for (i, layer) in self.backbone.layers.iter_mut().enumerate() {
            layer.trainable = i >= n - k;
        }
        self.spec.trainable_tail_layers = k;
        Ok(())
    }

    /// Names of trainable backbone layers, in topological order.
    pub fn trainable_layers(&self) -> Vec<&str> {
        self.backbone
            .layers
            .iter()
            .filter(|l| l.trainable)
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn feature_depth(&self) -> usize {
        self.head.in_features
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.head.param_count()
    }

    fn prepare_input<'a>(&self, x: &'a [f32]) -> Cow<'a, [f32]> {
        if self.spec.canonical_preprocessing && self.spec.name != BackboneName::Stub {
            Cow::Owned(x.iter().map(|v| 2.0 * v - 1.0).collect())
        } else {
            Cow::Borrowed(x)
        }
    }

    fn pooled(&self, feature_map: &[f32]) -> Vec<f64> {
        let c = self.head.in_features;
        let positions = feature_map.len() / c;
        let mut pooled = vec![0.0f64; c];
        for px in feature_map.chunks_exact(c) {
            for (p, v) in pooled.iter_mut().zip(px) {
                *p += *v as f64;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= positions as f64);
        pooled
    }

    /// Globally pooled backbone features of one image.
    pub fn features(&self, x: &ImageTensor) -> Vec<f64> {
        let plan = self.backbone.inference_plan();
        self.pooled(&self.backbone.infer(&self.prepare_input(x.data()), &plan))
    }

    pub fn predict_one(&self, x: &ImageTensor) -> f64 {
        self.head.predict(&self.features(x))
    }

    /// One prediction per input, computed in parallel.
    pub fn predict(&self, inputs: &[ImageTensor]) -> Result<Vec<f64>> {
        let plan = self.backbone.inference_plan();
        let preds: Vec<f64> = inputs
            .par_iter()
            .map(|x| {
                let feat = self.backbone.infer(&self.prepare_input(x.data()), &plan);
                self.head.predict(&self.pooled(&feat))
            })
            .collect();
        if let Some(i) = preds.iter().position(|p| !p.is_finite()) {
            return Err(Error::Model(format!("non-finite prediction for input {i}")));
        }
        Ok(preds)
    }

    /// Loss and gradients of one sample; `scale` is `2/B` for a batch of B.
    fn sample_gradients(
        &self,
        x: &ImageTensor,
        target: f64,
        scale: f64,
        plan: &Plan,
        grads: &mut Grads,
        head_grads: &mut HeadGrads,
    ) -> f64 {
        let input = self.prepare_input(x.data());
        let acts = self.backbone.forward(&input, plan);
        let fmap = acts.last().and_then(|a| a.as_deref()).expect("output activation");
        let pooled = self.pooled(fmap);
        let (y, cache) = self.head.forward(&pooled);
        let err = y - target;
        let dpooled = self.head.backward(&pooled, &cache, scale * err, head_grads);
        let c = self.head.in_features;
        let positions = fmap.len() / c;
        let inv = 1.0 / positions as f64;
        let per_channel: Vec<f32> = dpooled.iter().map(|d| (d * inv) as f32).collect();
        let grad_out: Vec<f32> = (0..positions).flat_map(|_| per_channel.iter().copied()).collect();
        self.backbone.backward(&acts, plan, grad_out, grads);
        err * err
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    /// Mean squared error over each epoch's mini-batches, weighted by batch size.
    pub history: Vec<f64>,
    pub training_time_seconds: f64,
}

impl TrainedModel {
    pub fn predict(&self, inputs: &[ImageTensor]) -> Result<Vec<f64>> {
        self.model.predict(inputs)
    }
}

/// Predicted ages for `inputs`.
pub fn predict(model: &TrainedModel, inputs: &[ImageTensor]) -> Result<Vec<f64>> {
    model.predict(inputs)
}

/// Trains on the whole dataset.
pub fn train(model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    train_subset(model, dataset, &all, config)
}

/// Trains on `dataset` rows listed in `indices`.
pub fn train_subset(mut model: Model, dataset: &Dataset, indices: &[usize], config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::invalid(format!("training index {i} out of range for {} rows", dataset.len())));
    }
    let start = Instant::now();
    let plan = model.backbone.plan();
    let frozen = !plan.any_grad();
    let cached: Option<Vec<Vec<f64>>> =
        frozen.then(|| indices.par_iter().map(|&i| model.features(&dataset.inputs[i])).collect());

    let trainable: Vec<usize> = (0..model.backbone.params.len())
        .filter(|&p| model.backbone.param_trains(&model.backbone.params[p]))
        .collect();
    let lens = trainable
        .iter()
        .map(|&p| model.backbone.params[p].data.len())
        .chain(model.head.tensors_mut().iter().map(|t| t.len()))
        .collect::<Vec<_>>();
    let mut adam = Adam::new(
        AdamParams {
            learning_rate: config.learning_rate,
            ..AdamParams::default()
        },
        lens,
    );

    let mut rng = seed::rng(seed::derive(config.seed, "batches", 0));
    let mut order: Vec<usize> = (0..indices.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 2.0 / batch.len() as f64;
            let m = &model;
            let parts: Vec<(Grads, HeadGrads, f64)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = if frozen {
                        Grads { data: Vec::new() }
                    } else {
                        Grads::zeros(&m.backbone)
                    };
                    let mut hg = HeadGrads::zeros(&m.head);
                    let mut loss = 0.0;
                    for &o in chunk {
                        let row = indices[o];
                        let target = dataset.targets[row];
                        loss += match &cached {
                            Some(feats) => {
                                let (y, cache) = m.head.forward(&feats[o]);
                                let err = y - target;
                                m.head.backward(&feats[o], &cache, scale * err, &mut hg);
                                err * err
                            }
                            None => m.sample_gradients(&dataset.inputs[row], target, scale, &plan, &mut g, &mut hg),
                        };
                    }
                    (g, hg, loss)
                })
                .collect();
            let mut parts = parts.into_iter();
            let (mut grads, mut head_grads, mut loss) = parts.next().expect("non-empty batch");
            for (g, hg, l) in parts {
                grads.add(&g);
                head_grads.add(&hg);
                loss += l;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sse += loss;

            adam.begin_step();
            let mut slot = 0;
            if !frozen {
                for &p in &trainable {
                    adam.update(slot, &mut model.backbone.params[p].data, &grads.data[p]);
                    slot += 1;
                }
            }
            slot = trainable.len();
            for (t, g) in model.head.tensors_mut().into_iter().zip(head_grads.tensors()) {
                adam.update(slot, t, g);
                slot += 1;
            }
        }
        let epoch_loss = sse / indices.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        history.push(epoch_loss);
    }
    Ok(TrainedModel {
        model,
        history,
        training_time_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Sidecar written next to saved parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub backbone: BackboneSpec,
    pub head: HeadConfig,
    pub seed: u64,
    pub config_hash: String,
    pub history: Vec<f64>,
    pub training_time_seconds: f64,
}

pub const MODEL_FILE: &str = "model.safetensors";
pub const META_FILE: &str = "model.json";

impl TrainedModel {
    /// Writes `model.safetensors` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let m = &self.model;
        let h = &m.head;
        let mut entries = weights::graph_entries(&m.backbone, "backbone/");
        let hidden = h.config.hidden_units;
        entries.push(weights::Entry::f64("head/dense/kernel", vec![h.in_features, hidden], &h.w1));
        entries.push(weights::Entry::f64("head/dense/bias", vec![hidden], &h.b1));
        entries.push(weights::Entry::f64("head/dense_1/kernel", vec![hidden, 1], &h.w2));
        entries.push(weights::Entry::f64("head/dense_1/bias", vec![1], &[h.b2]));
        let mut info = HashMap::new();
        info.insert("backbone".to_string(), m.spec.name.to_string());
        info.insert("config_hash".to_string(), config_hash.to_string());
        weights::write_safetensors(&dir.join(MODEL_FILE), &entries, Some(info))?;
        let meta = ModelMeta {
            backbone: m.spec,
            head: h.config,
            seed: m.seed,
            config_hash: config_hash.to_string(),
            history: self.history.clone(),
            training_time_seconds: self.training_time_seconds,
        };
        let path = dir.join(META_FILE);
        fs::write(&path, serde_json::to_string_pretty(&meta)?).at(&path)
    }

    pub fn load(dir: &Path) -> Result<(TrainedModel, ModelMeta)> {
        let meta_path = dir.join(META_FILE);
        let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(&meta_path).at(&meta_path)?)?;
        let mut backbone = build_backbone(meta.backbone.name, 0);
        let mut file = weights::TensorFile::read(&dir.join(MODEL_FILE))?;
        file.load_graph(&mut backbone, "backbone/")?;
        let f = backbone.output_shape().c;
        let hidden = meta.head.hidden_units;
        let head = Head {
            config: meta.head,
            in_features: f,
            w1: file.take("head/dense/kernel", &[f, hidden])?,
            b1: file.take("head/dense/bias", &[hidden])?,
            w2: file.take("head/dense_1/kernel", &[hidden, 1])?,
            b2: file.take("head/dense_1/bias", &[1])?[0],
        };
        let mut model = Model {
            spec: meta.backbone,
            backbone,
            head,
            seed: meta.seed,
        };
        model.set_trainable_tail(meta.backbone.trainable_tail_layers)?;
        let trained = TrainedModel {
            model,
            history: meta.history.clone(),
            training_time_seconds: meta.training_time_seconds,
        };
        Ok((trained, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::TENSOR_LEN;

    fn image(v: f32) -> ImageTensor {
        let data = (0..TENSOR_LEN).map(|i| (v + 0.1 * ((i % 7) as f32 / 7.0)).min(1.0)).collect();
        ImageTensor::new(data, "mem").unwrap()
    }

    fn stub_model(tail: usize) -> Model {
        let mut spec = BackboneSpec::stub();
        spec.trainable_tail_layers = tail;
        build_model(&spec, &HeadConfig::default(), 1).unwrap()
    }

    #[test]
    fn table_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.epochs, c.batch_size), (0.001, 20, 128));
        assert_eq!(c.loss, Loss::MeanSquaredError);
        assert_eq!(c.optimizer, Optimizer::Adam);
    }

    #[test]
    fn stub_tail_is_clamped() {
        let m = stub_model(10);
        assert_eq!(m.trainable_layers().len(), 3);
        let mut m = stub_model(0);
        assert!(m.trainable_layers().is_empty());
        assert!(m.set_trainable_tail(4).is_err());
        m.set_trainable_tail(1).unwrap();
        assert_eq!(m.trainable_layers(), ["stub_conv3"]);
    }

    #[test]
    fn predictions_are_deterministic() {
        let m = stub_model(3);
        let xs = vec![image(0.2), image(0.7), image(0.2)];
        let a = m.predict(&xs).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].to_bits(), a[2].to_bits());
        assert_eq!(a, stub_model(3).predict(&xs).unwrap());
    }

    #[test]
    fn single_batch_when_dataset_is_small() {
        let xs: Vec<ImageTensor> = (0..5).map(|i| image(i as f32 / 5.0)).collect();
        let ds = Dataset::new(xs, vec![30.0; 5], (0..5).map(|i| i.to_string()).collect(), (0..5).map(|i| i.to_string()).collect()).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let t = train(stub_model(0), &ds, &cfg).unwrap();
        assert_eq!(t.history.len(), 3);
        // one Adam step per epoch
        assert!(t.history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn non_finite_targets_abort() {
        let xs: Vec<ImageTensor> = (0..3).map(|i| image(i as f32 / 3.0)).collect();
        let mut ds = Dataset::new(xs, vec![30.0; 3], vec!["a".into(), "b".into(), "c".into()], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        ds.targets[1] = f64::INFINITY;
        let err = train(stub_model(0), &ds, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }), "{err}");
    }

    #[test]
    fn save_and_load_round_trip() {
        let xs: Vec<ImageTensor> = (0..4).map(|i| image(i as f32 / 4.0)).collect();
        let ds = Dataset::new(xs.clone(), vec![20.0, 30.0, 40.0, 50.0], (0..4).map(|i| i.to_string()).collect(), (0..4).map(|i| i.to_string()).collect()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let t = train(stub_model(2), &ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path(), "abc").unwrap();
        let (back, meta) = TrainedModel::load(dir.path()).unwrap();
        assert_eq!(meta.config_hash, "abc");
        assert_eq!(back.model, t.model);
        assert_eq!(back.predict(&xs).unwrap(), t.predict(&xs).unwrap());
    }
}
