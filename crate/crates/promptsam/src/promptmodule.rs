//! The full detection model: prompt branch (feature aggregation over encoder
//! taps plus an SE layer), residual image branch, classifier head, and the
//! training loop.
//!
//! The aggregator is a running sum over per-tap transforms
//! `F(f_i) = D(f_i) + D(Conv(f_i))` with `D` a 2x average pool and `Conv` a
//! 3x3 same-padding convolution; the two branches are combined as
//! `y = rho(i) + delta(i)` and fed to a small residual-conv head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptvit::{gaussian_tensor, EncoderConfig, PromptEncoder};
use crate::tensorcore::{
    Graph, ParamRegistry, Real, Result, SgdMomentum, TensorData, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset must contain at least two classes")]
    SingleClassDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// SE bottleneck reduction; must divide the embedding dim.
    pub se_reduction: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            se_reduction: 4,
            n_classes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Stop once training accuracy reaches this level (deterministic:
    /// evaluated on the full epoch).
    pub stop_at_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 7,
            stop_at_train_acc: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_acc: Vec<f64>,
}

/// Model assembly: encoder + aggregator + SE + head parameter layout and the
/// forward graph builders.
#[derive(Debug, Clone)]
pub struct PromptSamModel {
    pub enc: PromptEncoder,
    pub cfg: ModelConfig,
}

impl PromptSamModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let enc = PromptEncoder::new(cfg.encoder)?;
        let dim = cfg.encoder.dim;
        if cfg.se_reduction == 0
            || dim % cfg.se_reduction != 0
            || cfg.encoder.grid() % 2 != 0
            || cfg.n_classes < 2
        {
            return Err(TensorError::ShapeMismatch {
                op: "model_config",
                lhs: vec![dim, cfg.se_reduction],
                rhs: vec![cfg.encoder.grid(), cfg.n_classes],
            });
        }
        Ok(Self { enc, cfg })
    }

    /// Aggregator output spatial side: half the patch grid.
    pub fn agg_side(&self) -> usize {
        self.cfg.encoder.grid() / 2
    }

    pub fn module_param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.cfg.encoder.depth)
            .map(|i| format!("agg.conv{i}.w"))
            .collect();
        names.extend(["se.w1".into(), "se.w2".into()]);
        names.extend([
            "head.conv1.w".into(),
            "head.conv2.w".into(),
            "head.fc.w".into(),
            "head.fc.b".into(),
        ]);
        names
    }

    /// Initialize every parameter (seeded) and freeze the encoder base.
    pub fn init<T: Real>(&self, registry: &mut ParamRegistry<T>, seed: u64) -> Result<()> {
        self.enc.init(registry, seed);
        let dim = self.cfg.encoder.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let sigma = 0.02;
        for i in 0..self.cfg.encoder.depth {
            registry.insert(
                &format!("agg.conv{i}.w"),
                gaussian_tensor(&mut rng, &[dim, dim, 3, 3], sigma),
            );
        }
        let r = dim / self.cfg.se_reduction;
        registry.insert("se.w1", gaussian_tensor(&mut rng, &[dim, r], sigma));
        registry.insert("se.w2", gaussian_tensor(&mut rng, &[r, dim], sigma));
        registry.insert(
            "head.conv1.w",
            gaussian_tensor(&mut rng, &[2 * dim, dim, 3, 3], sigma),
        );
        registry.insert(
            "head.conv2.w",
            gaussian_tensor(&mut rng, &[2 * dim, 2 * dim, 3, 3], sigma),
        );
        registry.insert(
            "head.fc.w",
            gaussian_tensor(&mut rng, &[2 * dim, self.cfg.n_classes], sigma),
        );
        registry.insert("head.fc.b", TensorData::zeros(&[self.cfg.n_classes]));
        self.enc.freeze_base(registry)?;
        Ok(())
    }

    /// Running-sum feature aggregation over the taps:
    /// `psi_i = psi_{i-1} + D(f_i) + D(Conv(f_i))`.
    pub fn aggregate<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        taps: &[Var],
    ) -> Result<Var> {
        assert!(!taps.is_empty(), "aggregate requires at least one tap");
        let mut psi: Option<Var> = None;
        for (i, &tap) in taps.iter().enumerate() {
            let w = registry.leaf(g, &format!("agg.conv{i}.w"))?;
            let conv = g.conv2d(tap, w, 1, 1)?;
            let d_tap = g.avg_pool2d(tap, 2, 2)?;
            let d_conv = g.avg_pool2d(conv, 2, 2)?;
            let f = g.add(d_tap, d_conv)?;
            psi = Some(match psi {
                None => f,
                Some(acc) => g.add(acc, f)?,
            });
        }
        Ok(psi.expect("nonempty taps"))
    }

    /// Squeeze-and-excitation channel reweighting:
    /// `x * sigmoid(W2 relu(W1 gap(x)))`.
    pub fn se_layer<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        x: Var,
    ) -> Result<Var> {
        let dim = self.cfg.encoder.dim;
        let squeeze = g.global_avg_pool(x)?;
        let squeeze = g.reshape(squeeze, &[1, dim])?;
        let w1 = registry.leaf(g, "se.w1")?;
        let w2 = registry.leaf(g, "se.w2")?;
        let z = g.matmul(squeeze, w1)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, w2)?;
        let z = g.sigmoid(z)?;
        let scale = g.reshape(z, &[dim])?;
        g.scale_channels(x, scale)
    }

    /// The delta branch: spatial average-pool the image to the aggregator
    /// size and zero-pad channels up to the embedding dim.
    pub fn downsample_pad<T: Real>(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        let dim = self.cfg.encoder.dim;
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 || shape[0] > dim {
            return Err(TensorError::ShapeMismatch {
                op: "downsample_pad",
                lhs: shape,
                rhs: vec![dim, self.agg_side(), self.agg_side()],
            });
        }
        let factor = shape[1] / self.agg_side();
        let pooled = g.avg_pool2d(image, factor, factor)?;
        g.pad_channels(pooled, dim)
    }

    /// The rho branch: SE over the aggregated encoder taps.
    pub fn prompt_branch<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        image: Var,
    ) -> Result<Var> {
        let (_, taps) = self.enc.encode_with_taps(g, registry, image)?;
        let psi = self.aggregate(g, registry, &taps)?;
        self.se_layer(g, registry, psi)
    }

    /// `logits = Head(rho(i) + delta(i))`.
    pub fn combine_and_classify<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        image: Var,
    ) -> Result<Var> {
        let rho = self.prompt_branch(g, registry, image)?;
        let delta = self.downsample_pad(g, image)?;
        let combined = g.add(rho, delta)?;
        self.head(g, registry, combined)
    }

    /// Two residual conv blocks (parameter-free pooled shortcut), global
    /// average pool, dense layer to class logits.
    fn head<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        x: Var,
    ) -> Result<Var> {
        let dim = self.cfg.encoder.dim;
        let w1 = registry.leaf(g, "head.conv1.w")?;
        let c1 = g.conv2d(x, w1, 2, 1)?;
        let c1 = g.relu(c1)?;
        let short = g.avg_pool2d(x, 2, 2)?;
        let short = g.pad_channels(short, 2 * dim)?;
        let h = g.add(c1, short)?;

        let w2 = registry.leaf(g, "head.conv2.w")?;
        let c2 = g.conv2d(h, w2, 1, 1)?;
        let c2 = g.relu(c2)?;
        let h = g.add(c2, h)?;

        let pooled = g.global_avg_pool(h)?;
        let pooled = g.reshape(pooled, &[1, 2 * dim])?;
        let wfc = registry.leaf(g, "head.fc.w")?;
        let bfc = registry.leaf(g, "head.fc.b")?;
        let logits = g.matmul(pooled, wfc)?;
        let logits = g.add_bias(logits, bfc)?;
        g.reshape(logits, &[self.cfg.n_classes])
    }

    /// Cross-entropy loss for one image.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        image: Var,
        label: usize,
    ) -> Result<Var> {
        let logits = self.combine_and_classify(g, registry, image)?;
        g.cross_entropy(logits, label)
    }

    pub fn predict<T: Real>(
        &self,
        registry: &ParamRegistry<T>,
        image: &TensorData<T>,
    ) -> Result<usize> {
        let mut g = Graph::new();
        let image = g.constant(image.clone());
        let logits = self.combine_and_classify(&mut g, registry, image)?;
        let data = g.value(logits).data();
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Mini-batch SGD with momentum on cross-entropy. Deterministic given the
/// seed: the shuffle order, batch grouping, and every float operation are
/// fixed and single-threaded.
pub fn fit<T: Real>(
    model: &PromptSamModel,
    dataset: &[(TensorData<T>, usize)],
    config: &TrainConfig,
    registry: &mut ParamRegistry<T>,
) -> std::result::Result<FitReport, TrainError> {
    assert!(config.epochs > 0 && config.batch_size > 0 && config.learning_rate >= 0.0);
    let mut classes: Vec<usize> = dataset.iter().map(|(_, l)| *l).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(TrainError::SingleClassDataset);
    }

    let mut optimizer = SgdMomentum::new(config.learning_rate, config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = FitReport::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grad_sum: std::collections::BTreeMap<String, TensorData<T>> =
                Default::default();
            for &idx in batch {
                let (image, label) = &dataset[idx];
                let mut g = Graph::new();
                let image_var = g.constant(image.clone());
                let logits = model.combine_and_classify(&mut g, registry, image_var)?;
                let loss = g.cross_entropy(logits, *label)?;
                loss_sum += g.value(loss).scalar_value().as_f64();
                let pred = argmax(g.value(logits).data());
                if pred == *label {
                    correct += 1;
                }
                let grads = g.backward(loss)?.named(&g);
                for (name, grad) in grads {
                    match grad_sum.get_mut(&name) {
                        Some(acc) => {
                            for (a, &v) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a = *a + v;
                            }
                        }
                        None => {
                            grad_sum.insert(name, grad);
                        }
                    }
                }
            }
            let inv = T::from_f64(1.0 / batch.len() as f64);
            for grad in grad_sum.values_mut() {
                for v in grad.data_mut() {
                    *v = *v * inv;
                }
            }
            optimizer.step(registry, &grad_sum)?;
        }
        let acc = correct as f64 / dataset.len() as f64;
        report.epoch_loss.push(loss_sum / dataset.len() as f64);
        report.epoch_acc.push(acc);
        if config.stop_at_train_acc.is_some_and(|t| acc >= t) {
            break;
        }
    }
    Ok(report)
}

fn argmax<T: Real>(data: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    best
}
