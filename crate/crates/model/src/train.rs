use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ava_core::dataset::{
    augment, class_stats_from_totals, load_patch, Augmentation, ClassTotals, DatasetManifest, Patch, Split, N_FEATURES,
};
use ava_core::dihedral::Dihedral;
use ava_core::metrics::PixelMetrics;
use ava_nn::{adam_step, AdamConfig, AdamState, Graph, NnError, Shape, Tensor, Var};

use crate::config::{LossKind, PosWeight, TrainConfig};
use crate::error::{ModelError, Result};
use crate::net::{ForwardOptions, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
    /// Eval-mode pixel F1 on the un-augmented training patches.
    pub train_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_f1,train_f1";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_f1, r.train_f1
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub final_model: Model,
    /// Weights of the epoch with the best validation F1 (ties: lower validation loss).
    pub best_model: Model,
    pub best_epoch: usize,
    pub history: History,
    pub pos_weight: f64,
    pub stopped_early: bool,
}

/// Loads both splits of `manifest` (patch paths relative to `base`) and trains.
pub fn train(
    model: Model,
    manifest: &DatasetManifest,
    base: impl AsRef<Path>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let base = base.as_ref();
    let load = |split: Split| -> Result<Vec<Patch>> {
        manifest
            .records_in(split)
            .map(|r| load_patch(base, r).map_err(ModelError::from))
            .collect()
    };
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;
    train_patches(model, &train_set, &val_set, cfg, |_| {})
}

fn class_totals(patches: &[Patch]) -> ClassTotals {
    let mut t = ClassTotals::default();
    for p in patches {
        let pos = p.positive_pixels();
        t.positive += pos;
        t.negative += p.valid_pixels() - pos;
    }
    t
}

/// Stacks patches into an `N x 5 x S x S` input, an `N x 1 x S x S` target and validity.
pub fn batch_tensors(patches: &[&Patch]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<bool>)> {
    let s = patches
        .first()
        .map(|p| p.size)
        .ok_or_else(|| ModelError::Input("empty batch".into()))?;
    if patches.iter().any(|p| p.size != s) {
        return Err(ModelError::Input("patches in a batch must share one size".into()));
    }
    let n = patches.len();
    let mut x = Vec::with_capacity(n * N_FEATURES * s * s);
    let mut y = Vec::with_capacity(n * s * s);
    let mut valid = Vec::with_capacity(n * s * s);
    for p in patches {
        x.extend_from_slice(&p.features);
        y.extend_from_slice(&p.label);
        valid.extend_from_slice(&p.valid);
    }
    Ok((
        Tensor::new(Shape::new(n, N_FEATURES, s, s), x)?,
        Tensor::new(Shape::new(n, 1, s, s), y)?,
        valid,
    ))
}

fn loss_node(g: &mut Graph<f32>, kind: LossKind, p: Var, y: &Tensor<f32>, valid: &[bool], pw: f64) -> Result<Var> {
    Ok(match kind {
        LossKind::WeightedBce => g.weighted_bce(p, y, Some(valid), pw)?,
        LossKind::SoftJaccard => g.soft_jaccard(p, y, Some(valid))?,
    })
}

/// Mean loss and pixel-micro F1 of eval-mode predictions.
pub fn evaluate_patches(model: &Model, patches: &[Patch], cfg: &TrainConfig, pos_weight: f64) -> Result<(f64, f64)> {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let mut loss_sum = 0.0;
    for chunk in patches.chunks(cfg.batch_size) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let (x, y, valid) = batch_tensors(&refs)?;
        let prob = model.predict(&x)?;
        let mut g = Graph::new();
        let p = g.input(prob.clone());
        let l = loss_node(&mut g, cfg.loss, p, &y, &valid, pos_weight)?;
        loss_sum += g.value(l).item() as f64 * chunk.len() as f64;
        for ((&pv, &yv), &ok) in prob.data().iter().zip(y.data()).zip(&valid) {
            if !ok {
                continue;
            }
            match (pv >= cfg.threshold, yv == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let n = patches.len().max(1) as f64;
    Ok((loss_sum / n, PixelMetrics::from_counts(tp, fp, fn_).f1))
}

fn augment_sample(p: &Patch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Patch {
    // Every draw happens regardless of the toggles, so enabling one augmentation
    // does not shift the random stream of the others.
    let d = Dihedral::ALL[rng.gen_range(0..Dihedral::ALL.len())];
    let draws: [(bool, u64); 3] = [
        (rng.gen_bool(0.5), rng.gen()),
        (rng.gen_bool(0.5), rng.gen()),
        (rng.gen_bool(0.5), rng.gen()),
    ];
    let t = cfg.augment;
    let mut out = p.clone();
    if t.dihedral && d != Dihedral::Identity {
        out = augment(&out, Augmentation::Dihedral(d), 0);
    }
    for ((on, seed), (enabled, aug)) in draws.into_iter().zip([
        (t.shift, Augmentation::Shift),
        (t.zoom, Augmentation::Zoom),
        (t.shear, Augmentation::Shear),
    ]) {
        if enabled && on {
            out = augment(&out, aug, seed);
        }
    }
    out
}

fn divergence(epoch: usize, batch: usize) -> impl Fn(ModelError) -> ModelError {
    move |e| match e {
        ModelError::Nn(NnError::NonFinite(_)) => ModelError::Divergence {
            epoch,
            batch,
            loss: f64::NAN,
        },
        e => e,
    }
}

/// Trains with Adam on in-memory patches. `on_epoch` observes each history row.
pub fn train_patches(
    mut model: Model,
    train_set: &[Patch],
    val_set: &[Patch],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(ModelError::EmptySplit("validation"));
    }
    let pos_weight = match cfg.pos_weight {
        PosWeight::Fixed { value } => value,
        PosWeight::Auto { cap } => class_stats_from_totals(class_totals(train_set), cap)?.pos_weight,
    };
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<Patch> = idx
                .iter()
                .map(|&i| augment_sample(&train_set[i], cfg, &mut rng))
                .collect();
            let dropout_seed: u64 = rng.gen();
            let refs: Vec<&Patch> = samples.iter().collect();
            let (x, y, valid) = batch_tensors(&refs)?;

            let step = || -> Result<(f64, IndexMap<String, Tensor<f32>>, crate::net::RunningStats)> {
                let mut g = Graph::new();
                let mut running = model.running_stats();
                let fwd = model.forward(&mut g, x, &ForwardOptions::train(dropout_seed), &mut running)?;
                let loss = loss_node(&mut g, cfg.loss, fwd.prob, &y, &valid, pos_weight)?;
                let lv = g.value(loss).item() as f64;
                if !lv.is_finite() {
                    return Ok((lv, IndexMap::new(), running));
                }
                g.backward(loss)?;
                let grads = fwd
                    .params
                    .iter()
                    .filter_map(|(n, v)| g.take_grad(*v).map(|t| (n.clone(), t)))
                    .collect();
                Ok((lv, grads, running))
            };
            let (lv, grads, running) = step().map_err(divergence(epoch, bi))?;
            if !lv.is_finite() {
                return Err(ModelError::Divergence {
                    epoch,
                    batch: bi,
                    loss: lv,
                });
            }
            model.set_running_stats(running)?;
            adam_step(model.params_mut(), &grads, &mut adam, &adam_cfg)?;
            loss_sum += lv;
            batches += 1;
        }

        let (_, train_f1) = evaluate_patches(&model, train_set, cfg, pos_weight)?;
        let (val_loss, val_f1) = evaluate_patches(&model, val_set, cfg, pos_weight)?;
        if !val_loss.is_finite() {
            return Err(ModelError::Divergence {
                epoch,
                batch: batches,
                loss: val_loss,
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_f1,
            train_f1,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} val_f1 {:.4} train_f1 {:.4}",
            rec.train_loss,
            rec.val_loss,
            rec.val_f1,
            rec.train_f1
        );
        on_epoch(&rec);
        history.epochs.push(rec);

        let improved = match &best {
            None => true,
            Some((bf1, bloss, _, _)) => val_f1 > *bf1 || (val_f1 == *bf1 && val_loss < *bloss),
        };
        if improved {
            best = Some((val_f1, val_loss, epoch, model.clone()));
        }
        if cfg.target_train_f1.is_some_and(|t| train_f1 >= t) {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    let (best_epoch, best_model) = match best {
        Some((_, _, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        history,
        pos_weight,
        stopped_early,
    })
}
