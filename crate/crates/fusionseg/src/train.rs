//! Training loop: momentum SGD over random patch batches with the
//! log-spaced learning-rate schedule, JSON-lines epoch logging, and
//! best-validation checkpointing.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{PatchSet, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::models::{argmax_labels, save_checkpoint, NetworkGraph, ParamKind};
use crate::optim::{add_l2_grad, cross_entropy_loss, l2_penalty, LRSchedule, Reduction, SGDState};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::{Labels, Tensor, IGNORE_LABEL};

fn default_epochs() -> usize { 50 }
fn default_batch_size() -> usize { 32 }
fn default_patch_m() -> usize { 50 }
fn default_train_patches() -> usize { 2000 }
fn default_val_patches() -> usize { 500 }
fn default_eta_start() -> f64 { 1e-6 }
fn default_eta_end() -> f64 { 1e-7 }
fn default_momentum() -> f64 { 0.9 }
fn default_weight_decay() -> f64 { 5e-4 }
fn default_network() -> String { "cloudsnet".into() }

/// Full training configuration. Every default is a published value or a
/// documented decision; `--dump-config` in the CLI prints the effective
/// struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_m: usize,
    pub train_patches: usize,
    pub val_patches: usize,
    pub eta_start: f64,
    pub eta_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub reduction: Reduction,
    pub train_scene: Option<PathBuf>,
    pub val_scene: Option<PathBuf>,
    pub test_scene: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            network: default_network(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            patch_m: default_patch_m(),
            train_patches: default_train_patches(),
            val_patches: default_val_patches(),
            eta_start: default_eta_start(),
            eta_end: default_eta_end(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            seed: 0,
            reduction: Reduction::Sum,
            train_scene: None,
            val_scene: None,
            test_scene: None,
            checkpoint_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patch_m == 0 || self.train_patches == 0 {
            return Err(Error::Config(
                "epochs, batch size, patch size, and patch count must be positive".into(),
            ));
        }
        if self.eta_start <= 0.0 || self.eta_end <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One JSON log line per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_oa: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
}

fn nets_inputs<'a, T: Scalar>(
    net: &NetworkGraph<T>,
    vnir: &'a Tensor<T>,
    swir: &'a Tensor<T>,
) -> (Option<&'a Tensor<T>>, Option<&'a Tensor<T>>) {
    use crate::models::InputKind;
    match net.arch.input {
        InputKind::Fused => (Some(vnir), Some(swir)),
        InputKind::Vnir => (Some(vnir), None),
        InputKind::Swir => (None, Some(swir)),
    }
}

/// Eval-mode loss and overall accuracy over a patch set.
pub fn evaluate_patches<T: Scalar>(
    net: &NetworkGraph<T>,
    patches: &PatchSet<T>,
    batch_size: usize,
    reduction: Reduction,
) -> Result<(f64, Option<f64>)> {
    let mut cm = ConfusionMatrix::new(&CLASS_NAMES);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let count = patches.count();
    let mut start = 0;
    while start < count {
        let end = (start + batch_size).min(count);
        let (vnir, swir, labels) = patches.batch(start, end);
        let (iv, is) = nets_inputs(net, &vnir, &swir);
        let logits = net.forward(iv, is)?;
        let (loss, _) = cross_entropy_loss(&logits, &labels, IGNORE_LABEL, reduction)?;
        loss_sum += loss.to_f64();
        batches += 1;
        cm.accumulate(&argmax_labels(&logits), &labels)?;
        start = end;
    }
    Ok((loss_sum / batches.max(1) as f64, cm.overall_accuracy().ok()))
}

/// Run the full training loop. `sink` receives one `EpochLog` per epoch
/// (the CLI writes them as JSON lines). Returns after saving best/final
/// checkpoints when `cfg.checkpoint_dir` is set.
pub fn train_network<T: Scalar>(
    net: &mut NetworkGraph<T>,
    train: &PatchSet<T>,
    val: Option<&PatchSet<T>>,
    cfg: &RunConfig,
    mut sink: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = LRSchedule {
        eta_start: cfg.eta_start,
        eta_end: cfg.eta_end,
        num_epochs: cfg.epochs,
    };
    let mut state = SGDState::new(
        T::from_f64(cfg.eta_start),
        T::from_f64(cfg.momentum),
        T::from_f64(cfg.weight_decay),
    );
    let order_rng = CounterRng::new(cfg.seed ^ 0x7261696e); // independent shuffle stream
    let lambda = T::from_f64(cfg.weight_decay);

    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut final_train_loss = 0.0;

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at_epoch(epoch)?;
        state.eta = T::from_f64(lr);

        let mut order: Vec<u32> = (0..train.count() as u32).collect();
        let mut epoch_rng = order_rng.split(epoch as u64 + 1);
        epoch_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // gather the shuffled batch
            let mv = 4 * train.m;
            let mut vnir = Tensor::zeros(chunk.len(), 3, mv, mv);
            let mut swir = Tensor::zeros(chunk.len(), 1, train.m, train.m);
            let mut labels = Labels::filled(chunk.len(), mv, mv, 0);
            for (bi, &src) in chunk.iter().enumerate() {
                let src = src as usize;
                vnir.item_mut(bi).copy_from_slice(train.vnir.item(src));
                swir.item_mut(bi).copy_from_slice(train.swir.item(src));
                let plane = mv * mv;
                labels.data[bi * plane..(bi + 1) * plane]
                    .copy_from_slice(&train.labels.data[src * plane..(src + 1) * plane]);
            }

            let (iv, is) = nets_inputs(net, &vnir, &swir);
            let (logits, cache) = net.forward_train(iv, is)?;
            let (data_loss, grad_logits) =
                cross_entropy_loss(&logits, &labels, IGNORE_LABEL, cfg.reduction)?;
            let weights: Vec<&Tensor<T>> = net
                .params()
                .iter()
                .filter(|(_, _, k)| k.decays())
                .map(|(_, t, _)| *t)
                .collect();
            let loss = data_loss + l2_penalty(&weights, lambda);
            if !loss.to_f64().is_finite() {
                let (iv, is) = nets_inputs(net, &vnir, &swir);
                let layer = net
                    .first_nonfinite_layer(iv, is)
                    .unwrap_or_else(|| "loss".to_string());
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch}, step {steps}, layer {layer}"
                )));
            }
            let mut grads = net.backward(&cache, &grad_logits)?;
            for (name, tensor, kind) in net.params() {
                if kind == ParamKind::Weight {
                    let g = grads.get_mut(&name).expect("weight gradient present");
                    add_l2_grad(tensor, lambda, g)?;
                }
            }
            let mut params = net.params_mut();
            state.step(&mut params, &grads)?;

            loss_sum += loss.to_f64();
            steps += 1;
        }
        final_train_loss = loss_sum / steps.max(1) as f64;

        let (val_loss, val_oa) = match val {
            Some(v) => {
                let (l, oa) = evaluate_patches(net, v, cfg.batch_size, cfg.reduction)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "validation loss non-finite at epoch {epoch}"
                    )));
                }
                (Some(l), oa)
            }
            None => (None, None),
        };

        sink(&EpochLog { epoch, lr, train_loss: final_train_loss, val_loss, val_oa });

        if let Some(vl) = val_loss {
            if vl < best_val_loss {
                best_val_loss = vl;
                best_epoch = epoch;
                if let Some(dir) = &cfg.checkpoint_dir {
                    save_checkpoint(net, Some((&state, epoch)), &dir.join("best"))?;
                }
            }
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(net, Some((&state, cfg.epochs.saturating_sub(1))), &dir.join("final"))?;
        if val.is_none() {
            save_checkpoint(net, Some((&state, cfg.epochs.saturating_sub(1))), &dir.join("best"))?;
        }
    }

    Ok(TrainOutcome { best_epoch, best_val_loss, final_train_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize_patches, sample_patches, synth_scene, NormStats, SynthConfig};
    use crate::models::build_network;

    fn smoke_setup(seed: u64) -> (PatchSet<f32>, PatchSet<f32>) {
        let cfg = SynthConfig { vnir_size: 64, smoothness: 3, ..Default::default() };
        let mut rng = CounterRng::new(seed);
        let scene = synth_scene::<f32>(&cfg, &mut rng).unwrap();
        let stats = NormStats::compute(&scene).unwrap();
        let mut train = sample_patches(&scene, 8, 8, &mut rng).unwrap();
        let mut val = sample_patches(&scene, 4, 8, &mut rng).unwrap();
        normalize_patches(&mut train, &stats).unwrap();
        normalize_patches(&mut val, &stats).unwrap();
        (train, val)
    }

    #[test]
    fn smoke_run_writes_one_log_line_per_epoch() {
        let (train, val) = smoke_setup(50);
        let mut net = build_network::<f32>("cloudsnet", &mut CounterRng::new(51)).unwrap();
        let cfg = RunConfig { epochs: 2, batch_size: 4, patch_m: 8, train_patches: 8, ..Default::default() };
        let mut logs = Vec::new();
        train_network(&mut net, &train, Some(&val), &cfg, |l| logs.push(l.clone())).unwrap();
        assert_eq!(logs.len(), 2);
        assert_eq!(logs[0].epoch, 0);
        assert!(logs.iter().all(|l| l.train_loss.is_finite()));
        assert!(logs.iter().all(|l| l.val_loss.unwrap().is_finite()));
        // schedule endpoints for a 2-epoch run: 1e-6 then 1e-7
        assert!((logs[0].lr - 1e-6).abs() < 1e-18);
        assert!((logs[1].lr - 1e-7).abs() < 1e-19);
    }

    #[test]
    fn same_seed_gives_identical_logs_and_checkpoints() {
        let run = |dir: &std::path::Path| -> Vec<String> {
            let (train, val) = smoke_setup(52);
            let mut net = build_network::<f32>("fcn_swir", &mut CounterRng::new(53)).unwrap();
            let cfg = RunConfig {
                network: "fcn_swir".into(),
                epochs: 2,
                batch_size: 4,
                patch_m: 8,
                train_patches: 8,
                checkpoint_dir: Some(dir.to_path_buf()),
                ..Default::default()
            };
            let mut lines = Vec::new();
            train_network(&mut net, &train, Some(&val), &cfg, |l| {
                lines.push(serde_json::to_string(l).unwrap());
            })
            .unwrap();
            lines
        };
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let la = run(da.path());
        let lb = run(db.path());
        assert_eq!(la, lb);
        // byte-identical parameter payloads
        for sub in ["final", "best"] {
            let pa = da.path().join(sub).join("params");
            for entry in std::fs::read_dir(&pa).unwrap() {
                let name = entry.unwrap().file_name();
                assert_eq!(
                    std::fs::read(pa.join(&name)).unwrap(),
                    std::fs::read(db.path().join(sub).join("params").join(&name)).unwrap(),
                    "{name:?}"
                );
            }
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(RunConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(RunConfig { eta_start: 0.0, ..Default::default() }.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn default_config_echoes_published_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.patch_m, 50);
        assert_eq!(cfg.train_patches, 2000);
        assert_eq!(cfg.val_patches, 500);
        assert_eq!(cfg.eta_start, 1e-6);
        assert_eq!(cfg.eta_end, 1e-7);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.reduction, Reduction::Sum);
    }

    #[test]
    fn nan_abort_reports_location() {
        let (train, _) = smoke_setup(54);
        let mut net = build_network::<f32>("cloudsnet", &mut CounterRng::new(55)).unwrap();
        // poison one weight
        for (name, p) in net.params_mut() {
            if name == "trunk.0.weight" {
                p.data_mut()[0] = f32::NAN;
            }
        }
        let cfg = RunConfig { epochs: 1, batch_size: 4, patch_m: 8, train_patches: 8, ..Default::default() };
        let err = train_network(&mut net, &train, None, &cfg, |_| {}).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 0") && msg.contains("trunk.0.weight"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }
}
