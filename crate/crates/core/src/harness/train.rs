use std::path::Path;

use candle_core::{DType, D};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::artifact::{ModelMeta, TrainedModel};
use super::data::{load_manifest_images, LabeledImages};
use super::{Architecture, HarnessError, Optimizer, TrainRunConfig};
use crate::hashing::seed_bytes;
use crate::task::DomainStyle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    /// Training-mode accuracy over the epoch, in [0, 1].
    pub accuracy: f64,
}

/// Train on the dataset behind a manifest, which must verify clean.
///
/// `family` selects the weight-decay preset when the config has none.
pub fn train(
    config: &TrainRunConfig,
    manifest_path: &Path,
    family: DomainStyle,
    config_digest: Option<String>,
) -> Result<TrainedModel, HarnessError> {
    let arch: Architecture = config.architecture.parse()?;
    let (manifest, data) = load_manifest_images(manifest_path)?;
    let meta = ModelMeta {
        architecture: arch,
        class_labels: data.class_labels.clone(),
        native_size: data.size,
        task_name: manifest.header.task_name.clone(),
        trick_composition: manifest.header.trick_composition.clone(),
        manifest_digest: manifest.digest(),
        train_config: config.clone(),
        weight_decay: config.resolved_weight_decay(family),
        history: Vec::new(),
        tool_version: crate::TOOL_VERSION.into(),
        config_digest,
    };
    train_on(meta, &data)
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(seed_bytes([
        "divgen.shuffle",
        seed.to_string().as_str(),
        epoch.to_string().as_str(),
    ]))
}

/// Train a fresh model described by `meta` on in-memory data.
///
/// The final-epoch weights are kept; there is no checkpoint selection.
pub fn train_on(meta: ModelMeta, data: &LabeledImages) -> Result<TrainedModel, HarnessError> {
    if data.num_classes() != meta.class_labels.len() {
        return Err(HarnessError::ClassCountMismatch {
            model: meta.class_labels.len(),
            task: data.num_classes(),
        });
    }
    if data.size != meta.native_size {
        return Err(HarnessError::GeometryMismatch {
            path: "<training data>".into(),
            expected: meta.native_size,
            found: data.size,
        });
    }
    let config = meta.train_config.clone();
    let mut model = TrainedModel::fresh(meta)?;
    let n = data.len();
    if config.epochs == 0 || n == 0 {
        return Ok(model);
    }
    let Optimizer::AdamW { beta1, beta2, eps } = config.optimizer;
    let mut opt = AdamW::new(
        model.store.trainable(),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1,
            beta2,
            eps,
            weight_decay: model.meta.weight_decay,
        },
    )?;
    let batch = config.batch_size.max(1);
    let dev = model.device.clone();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        opt.set_learning_rate(lr);
        let mut rng = shuffle_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(batch) {
            // Batch statistics of a single sample are degenerate.
            if chunk.len() == 1 && n > 1 {
                continue;
            }
            let flips: Option<Vec<bool>> = config
                .augment
                .then(|| chunk.iter().map(|_| rng.random_bool(0.5)).collect());
            let x = data.batch(chunk, flips.as_deref(), &dev)?;
            let y = data.label_tensor(chunk, &dev)?;
            let logits = model.net.forward(&x, true)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            opt.backward_step(&loss)?;
            loss_sum += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
            correct += logits
                .argmax(D::Minus1)?
                .eq(&y)?
                .to_dtype(DType::F32)?
                .sum_all()?
                .to_scalar::<f32>()? as f64;
            seen += chunk.len();
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: loss_sum / seen.max(1) as f64,
            accuracy: correct / seen.max(1) as f64,
        };
        log::info!(
            "epoch {}/{}: lr {:.3e} loss {:.4} acc {:.4}",
            stats.epoch,
            config.epochs,
            lr,
            stats.loss,
            stats.accuracy
        );
        history.push(stats);
    }
    model.meta.history = history;
    Ok(model)
}
