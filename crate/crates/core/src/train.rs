//! Joint optimization of the classification and triplet objectives.

use std::collections::HashMap;
use std::path::Path;

use log::{debug, info};
use ndarray::{Array1, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_triplets, AttributeSpace, DatasetSplit, Triplet};
use crate::error::{AgmanError, Result};
use crate::loss::{classification_loss_grad, clamp_loss_weight, combined_loss_grad, triplet_loss_grad, TripletMode};
use crate::model::AgmanModel;
use crate::optim::{scheduled_lr, Optimizer, OptimizerKind};
use crate::params::Grads;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub margin: f64,
    /// Triplets drawn per epoch, split evenly across attributes.
    pub triplets_per_epoch: usize,
    pub triplet_mode: TripletMode,
    pub optimizer: OptimizerKind,
    /// Only used by SGD.
    pub momentum: f64,
    /// Per-attribute weights of the classification loss; all ones when absent.
    pub class_weights: Option<Vec<f64>>,
    pub use_classification_loss: bool,
    /// Seed of triplet sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            lr_step: 3,
            lr_gamma: 0.9,
            epochs: 50,
            margin: 0.2,
            triplets_per_epoch: 100_000,
            triplet_mode: TripletMode::default(),
            optimizer: OptimizerKind::default(),
            momentum: 0.9,
            class_weights: None,
            use_classification_loss: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, attributes: usize) -> Result<()> {
        let bad = |msg: String| Err(AgmanError::Config(msg));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.lr_step == 0 {
            return bad("train.lr_step must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("train.learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.lr_gamma.is_finite() && self.lr_gamma > 0.0) {
            return bad(format!("train.lr_gamma must be positive, got {}", self.lr_gamma));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad(format!("train.margin must be non-negative, got {}", self.margin));
        }
        if self.triplets_per_epoch == 0 {
            return bad("train.triplets_per_epoch must be positive".into());
        }
        if let Some(w) = &self.class_weights {
            if w.len() != attributes || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!(
                    "train.class_weights must hold {attributes} non-negative values, got {w:?}"
                ));
            }
        }
        Ok(())
    }

    fn class_weights_for(&self, attributes: usize) -> Array1<f64> {
        match &self.class_weights {
            Some(w) => Array1::from(w.clone()),
            None => Array1::ones(attributes),
        }
    }
}

/// Per-epoch means over batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_c: f64,
    pub l_triplet: f64,
    pub total: f64,
    /// Loss weights at the end of the epoch.
    pub w0: f64,
    pub w1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| AgmanError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_record(["epoch", "L_c", "L_triplet", "total", "w0", "w1", "lr"])
            .and_then(|_| {
                for s in &self.epochs {
                    w.write_record([
                        s.epoch.to_string(),
                        s.l_c.to_string(),
                        s.l_triplet.to_string(),
                        s.total.to_string(),
                        s.w0.to_string(),
                        s.w1.to_string(),
                        s.lr.to_string(),
                    ])?;
                }
                w.flush().map_err(Into::into)
            })
            .map_err(|e| AgmanError::Io {
                path: path.to_path_buf(),
                source: e.into(),
            })
    }
}

/// Decoded, model-sized pixels of every record of a split, keyed by id.
#[derive(Clone, Debug, Default)]
pub struct PixelCache {
    images: HashMap<String, Array3<f64>>,
}

impl PixelCache {
    pub fn load(split: &DatasetSplit, space: &AttributeSpace, input_size: usize) -> Result<Self> {
        let images = split
            .records
            .par_iter()
            .map(|r| Ok((r.id.clone(), split.pixels(r, space, input_size)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { images })
    }

    pub fn get(&self, id: &str) -> Result<&Array3<f64>> {
        self.images
            .get(id)
            .ok_or_else(|| AgmanError::Argument(format!("unknown image id `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Seed of the triplets drawn in `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Batches of one epoch: single-attribute batches, attributes taking turns.
pub fn epoch_batches(split: &DatasetSplit, space: &AttributeSpace, config: &TrainConfig, epoch: usize) -> Result<Vec<Vec<Triplet>>> {
    let n = space.n();
    let seed = epoch_seed(config.seed, epoch);
    let mut per_attribute = Vec::with_capacity(n);
    for a in 0..n {
        let count = config.triplets_per_epoch / n + usize::from(a < config.triplets_per_epoch % n);
        let triplets = if count == 0 { Vec::new() } else { sample_triplets(split, a, count, seed)? };
        let batches: Vec<Vec<Triplet>> = triplets.chunks(config.batch_size).map(<[Triplet]>::to_vec).collect();
        per_attribute.push(batches);
    }
    let rounds = per_attribute.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for batches in &mut per_attribute {
            if r < batches.len() {
                out.push(std::mem::take(&mut batches[r]));
            }
        }
    }
    Ok(out)
}

/// Losses of one batch and the gradient of the total objective.
pub struct BatchOutcome {
    pub l_c: f64,
    pub l_triplet: f64,
    pub total: f64,
    pub grads: Grads,
}

/// Total objective over one batch: batch means of `L_c` (anchor images,
/// target = the batch attribute) and `L_triplet` combined with the learned
/// weights. Gradients cover every trainable parameter including `w0`, `w1`.
pub fn batch_objective(
    model: &AgmanModel,
    pixels: &PixelCache,
    batch: &[Triplet],
    config: &TrainConfig,
) -> Result<BatchOutcome> {
    let n = model.spec().attributes;
    let class_weights = config.class_weights_for(n);
    let (w0, w1) = model.loss_weights();
    let use_c = config.use_classification_loss;
    // coefficients are fixed by the current weights, so items can backprop independently
    let coef = combined_loss_grad(0.0, 0.0, w0, w1);
    let b = batch.len() as f64;
    let items = batch
        .par_iter()
        .map(|t| -> Result<(f64, f64, Grads)> {
            let mut grads = model.store().zeros_like();
            let (anchor, ca) = model.forward(pixels.get(&t.anchor)?.view(), t.attribute, use_c)?;
            let (positive, cp) = model.forward(pixels.get(&t.positive)?.view(), t.attribute, false)?;
            let (negative, cn) = model.forward(pixels.get(&t.negative)?.view(), t.attribute, false)?;
            let (lt, [da, dp, dn]) = triplet_loss_grad(
                anchor.embedding.view(),
                positive.embedding.view(),
                negative.embedding.view(),
                config.margin,
                config.triplet_mode,
            )
            .map_err(|e| AgmanError::Training(format!("triplet {t:?}: {e}")))?;
            let scale_t = coef.d_triplet / b;
            let (lc, d_logits) = match &anchor.logits {
                Some(logits) => {
                    let mut y = Array1::zeros(n);
                    y[t.attribute] = 1.0;
                    let (lc, dl) = classification_loss_grad(logits.view(), y.view(), class_weights.view())?;
                    (lc, Some(dl * (coef.d_classification / b)))
                }
                None => (0.0, None),
            };
            model.backward(&ca, (da * scale_t).view(), d_logits.as_ref(), &mut grads);
            model.backward(&cp, (dp * scale_t).view(), None, &mut grads);
            model.backward(&cn, (dn * scale_t).view(), None, &mut grads);
            Ok((lc, lt, grads))
        })
        .collect::<Vec<_>>();
    let mut grads = model.store().zeros_like();
    let (mut l_c, mut l_triplet) = (0.0, 0.0);
    for item in items {
        let (lc, lt, g) = item?;
        l_c += lc;
        l_triplet += lt;
        grads.accumulate(&g);
    }
    l_c /= b;
    l_triplet /= b;
    let combined = combined_loss_grad(l_c, l_triplet, w0, w1);
    let (id0, id1) = model.loss_weight_ids();
    grads.get_mut(id0)[[0]] += if use_c { combined.d_w0 } else { 0.0 };
    grads.get_mut(id1)[[0]] += combined.d_w1;
    Ok(BatchOutcome {
        l_c,
        l_triplet,
        total: combined.value,
        grads,
    })
}

/// Called after every epoch with the model and that epoch's statistics.
pub type EpochCallback<'a> = dyn FnMut(&AgmanModel, &EpochStats) -> Result<()> + 'a;

/// Trains `model` in place on triplets resampled from `split` every epoch.
///
/// Aborts with [`AgmanError::Training`] as soon as a loss or gradient stops
/// being finite.
pub fn train(
    model: &mut AgmanModel,
    split: &DatasetSplit,
    space: &AttributeSpace,
    config: &TrainConfig,
    on_epoch: Option<&mut EpochCallback<'_>>,
) -> Result<History> {
    config.validate(space.n())?;
    if space.n() != model.spec().attributes {
        return Err(AgmanError::Config(format!(
            "model has {} attributes but the attribute space has {}",
            model.spec().attributes,
            space.n()
        )));
    }
    let pixels = PixelCache::load(split, space, model.spec().input_size)?;
    train_with_pixels(model, split, space, config, &pixels, on_epoch)
}

/// [`train`] with images already decoded.
pub fn train_with_pixels(
    model: &mut AgmanModel,
    split: &DatasetSplit,
    space: &AttributeSpace,
    config: &TrainConfig,
    pixels: &PixelCache,
    mut on_epoch: Option<&mut EpochCallback<'_>>,
) -> Result<History> {
    config.validate(space.n())?;
    let mut optimizer = Optimizer::new(config.optimizer, model.store(), config.momentum);
    let (id0, id1) = model.loss_weight_ids();
    let mut history = History::default();
    for epoch in 0..config.epochs {
        let lr = scheduled_lr(config.learning_rate, config.lr_gamma, config.lr_step, epoch);
        let batches = epoch_batches(split, space, config, epoch)?;
        let (mut sc, mut st, mut stotal) = (0.0, 0.0, 0.0);
        for (i, batch) in batches.iter().enumerate() {
            let out = batch_objective(model, pixels, batch, config)?;
            for (what, v) in [("L_c", out.l_c), ("L_triplet", out.l_triplet), ("total", out.total)] {
                if !v.is_finite() {
                    return Err(AgmanError::Training(format!(
                        "{what} is {v} in epoch {epoch}, batch {i} (attribute {})",
                        batch[0].attribute
                    )));
                }
            }
            if !out.grads.all_finite() {
                return Err(AgmanError::Training(format!(
                    "non-finite gradient in epoch {epoch}, batch {i} (attribute {})",
                    batch[0].attribute
                )));
            }
            optimizer.step(model.store_mut(), &out.grads, lr);
            for id in [id0, id1] {
                let w = model.store_mut().get_mut(id);
                w[[0]] = clamp_loss_weight(w[[0]]);
            }
            debug!(
                "epoch {epoch} batch {i}: L_c {:.5} L_triplet {:.5} total {:.5}",
                out.l_c, out.l_triplet, out.total
            );
            sc += out.l_c;
            st += out.l_triplet;
            stotal += out.total;
        }
        let k = batches.len().max(1) as f64;
        let (w0, w1) = model.loss_weights();
        let stats = EpochStats {
            epoch,
            l_c: sc / k,
            l_triplet: st / k,
            total: stotal / k,
            w0,
            w1,
            lr,
        };
        info!(
            "epoch {epoch}: L_c {:.5} L_triplet {:.5} total {:.5} w0 {w0:.4} w1 {w1:.4} lr {lr:.3e}",
            stats.l_c, stats.l_triplet, stats.total
        );
        history.epochs.push(stats);
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(model, &stats)?;
        }
    }
    Ok(history)
}
