//! Adam training over utterance batches, plus checkpoint averaging.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::nnlm::shuffle;
use crate::optim::{Adam, AdamConfig};
use crate::transducer::TransducerModel;
use crate::vocab::TokenSequence;
use crate::{FeatureSequence, Result};

#[derive(Debug, Clone, Copy)]
pub struct RnntTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep a post-epoch parameter snapshot for checkpoint averaging.
    pub keep_snapshots: bool,
}

impl Default for RnntTrainConfig {
    fn default() -> Self {
        RnntTrainConfig {
            epochs: 12,
            lr: 2e-3,
            batch_size: 16,
            seed: 1,
            keep_snapshots: false,
        }
    }
}

/// `curve[0]` is the pre-training mean loss; entry `e+1` follows epoch `e`.
#[derive(Debug)]
pub struct RnntTrainReport {
    pub curve: Vec<f64>,
    pub snapshots: Vec<TransducerModel>,
    pub reverted_to_epoch: Option<usize>,
}

fn mean_loss(model: &TransducerModel, data: &[(FeatureSequence, TokenSequence)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in data {
        total += model.loss(x, y)?;
    }
    Ok(total / data.len() as f64)
}

/// Minimize the mean per-utterance transducer loss. As with the LM trainer,
/// a final model worse than the starting point is rolled back to the best
/// epoch, so the reported final mean loss never exceeds the initial one.
pub fn train_transducer(
    model: &mut TransducerModel,
    data: &[(FeatureSequence, TokenSequence)],
    cfg: &RnntTrainConfig,
) -> Result<RnntTrainReport> {
    if data.is_empty() {
        return Err(Error::input("train_transducer: empty dataset"));
    }
    for (x, y) in data {
        if x.len() < y.len() {
            return Err(Error::input(format!(
                "utterance with T={} frames for U={} labels; generation should reject T < U",
                x.len(),
                y.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut curve = vec![mean_loss(model, data)?];
    let mut snapshots = Vec::new();
    if cfg.epochs == 0 {
        return Ok(RnntTrainReport {
            curve,
            snapshots,
            reverted_to_epoch: None,
        });
    }
    let mut best = (0usize, curve[0], model.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = model.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (x, y) = &data[i];
                batch_loss += model.loss_and_grad(x, y, &mut grad)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::numerical(format!(
                    "transducer training diverged at epoch {epoch}: batch loss {batch_loss}"
                )));
            }
            let scale = 1.0 / chunk.len() as f64;
            {
                let mut gp = grad.params_mut();
                for (_, g) in gp.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
            let grads = grad.params();
            let grads_ref: Vec<(String, &[f64])> =
                grads.iter().map(|(n, g)| (n.clone(), *g)).collect();
            adam.update(model.params_mut(), &grads_ref)?;
        }
        let loss = mean_loss(model, data)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "transducer training diverged after epoch {epoch}"
            )));
        }
        curve.push(loss);
        if cfg.keep_snapshots {
            snapshots.push(model.clone());
        }
        if loss < best.1 {
            best = (epoch + 1, loss, model.clone());
        }
    }
    let mut reverted = None;
    if *curve.last().unwrap() > curve[0] {
        *model = best.2;
        reverted = Some(best.0);
    }
    Ok(RnntTrainReport {
        curve,
        snapshots,
        reverted_to_epoch: reverted,
    })
}

/// Elementwise arithmetic mean of every parameter across models.
pub fn average_checkpoints(models: &[TransducerModel]) -> Result<TransducerModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::input("average_checkpoints: no models"))?;
    for m in models {
        if m.cfg != first.cfg {
            return Err(Error::shape(
                "average_checkpoints: architecture mismatch".to_string(),
            ));
        }
    }
    let mut avg = first.clone();
    let scale = 1.0 / models.len() as f64;
    let mut slots = avg.params_mut();
    for (k, (name, slot)) in slots.iter_mut().enumerate() {
        for v in slot.iter_mut() {
            *v = 0.0;
        }
        for m in models {
            let mp = m.params();
            let (mname, mvals) = &mp[k];
            debug_assert_eq!(mname, name);
            for (o, x) in slot.iter_mut().zip(mvals.iter()) {
                *o += x * scale;
            }
        }
    }
    drop(slots);
    Ok(avg)
}
