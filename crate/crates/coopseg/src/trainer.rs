//! Deterministic training, evaluation, and the four-method comparison
//! harness.
//!
//! A training run is a pure function of `(config, dataset)`: batch indices
//! and crop offsets come from one seeded stream, parameter init from the
//! run seed (bottom networks use `seed + 1000`), and all numeric work uses
//! fixed accumulation orders. The comparison harness trains every method on
//! identical batch/crop streams per seed and asserts that fact by hashing
//! the streams.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::coop::{
    default_multi_wiring, default_same_taps, ensemble_predict, joint_loss, ConnectionScheme,
    CoopError, CoopModel,
};
use crate::data::{DataError, Dataset, DatasetConfig};
use crate::metrics::{argmax_classes, mean_iou, ConfusionMatrix, EvalReport, Head, MetricError};
use crate::rng::{derive_seed, rng_from, StreamHash};
use crate::segnet::{NetError, NetworkSpec};
use crate::tensor::{Elem, Graph, LabelMap, Tensor, TensorError};

/// Offset separating the bottom network's init seed from the run seed.
pub const BOTTOM_SEED_OFFSET: u64 = 1000;
/// Stream index of the batch/crop RNG under the run seed.
const BATCH_STREAM: u64 = 0xBA7C4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("model expects {model} classes but the dataset has {data}")]
    ClassCountMismatch { model: usize, data: usize },
    #[error("crop {crop} does not fit the {h}x{w} images or is not divisible by 4")]
    BadCrop { crop: usize, h: usize, w: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },
    #[error("head {head} unavailable for a {method} model")]
    HeadUnavailable {
        head: &'static str,
        method: &'static str,
    },
    #[error(transparent)]
    Coop(#[from] CoopError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Elem,
    pub momentum: Elem,
    /// Square crop edge, divisible by 4. Training crops randomly;
    /// evaluation crops the center.
    pub crop: usize,
    /// Evaluate on the validation set every n epochs (0 = final epoch
    /// only). The final epoch is always evaluated when a val set exists.
    pub eval_every: usize,
    pub seed: u64,
    pub scheme: ConnectionScheme,
    /// Dataset provenance recorded into manifests; not used by training.
    pub train_data: Option<String>,
    pub eval_data: Option<String>,
}

impl TrainConfig {
    pub fn new(scheme: ConnectionScheme) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            crop: 32,
            eval_every: 0,
            seed: 1,
            scheme,
            train_data: None,
            eval_data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss1: f64,
    pub loss2: f64,
    pub total: f64,
}

/// Everything one training run produced: the loss curve, scheduled
/// evaluation reports, and the fingerprint of the batch/crop stream it
/// consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub epoch_losses: Vec<EpochLoss>,
    pub evals: Vec<EvalReport>,
    pub stream_hash: u64,
}

impl RunRecord {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,loss1,loss2,total\n");
        for e in &self.epoch_losses {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                e.epoch, e.loss1, e.loss2, e.total
            );
        }
        s
    }

    pub fn eval_csv(&self, num_classes: usize) -> String {
        let mut s = EvalReport::csv_header(num_classes);
        s.push('\n');
        for r in &self.evals {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn initial_total(&self) -> Option<f64> {
        self.epoch_losses.first().map(|e| e.total)
    }

    pub fn final_total(&self) -> Option<f64> {
        self.epoch_losses.last().map(|e| e.total)
    }

    /// Convergence gate: the loss curve must end below where it started.
    pub fn converged(&self) -> bool {
        match (self.initial_total(), self.final_total()) {
            (Some(i), Some(f)) => f < i,
            _ => false,
        }
    }
}

/// Whether an error ultimately reports a NaN/Inf value, through any layer
/// of wrapping.
fn is_non_finite(err: &TrainError) -> bool {
    fn net(e: &NetError) -> bool {
        match e {
            NetError::Tensor(t) | NetError::Block { source: t, .. } => {
                matches!(t, TensorError::NonFinite { .. })
            }
            _ => false,
        }
    }
    match err {
        TrainError::Tensor(t) => matches!(t, TensorError::NonFinite { .. }),
        TrainError::Net(e) => net(e),
        TrainError::Coop(CoopError::Tensor(t)) => matches!(t, TensorError::NonFinite { .. }),
        TrainError::Coop(CoopError::Net(e)) => net(e),
        _ => false,
    }
}

fn dataset_dims(data: &Dataset) -> Result<(usize, usize, usize), TrainError> {
    let first = data.samples.first().ok_or(TrainError::EmptyDataset)?;
    let s = first.image.shape();
    Ok((s[0], s[1], s[2]))
}

fn check_crop(crop: usize, h: usize, w: usize) -> Result<(), TrainError> {
    if crop == 0 || crop % 4 != 0 || crop > h || crop > w {
        return Err(TrainError::BadCrop { crop, h, w });
    }
    Ok(())
}

/// Copies `crop`-sized windows of the chosen samples into one batch.
fn assemble_batch(
    data: &Dataset,
    picks: &[(usize, usize, usize)],
    crop: usize,
) -> (Tensor, LabelMap) {
    let b = picks.len();
    let c = data.samples[0].image.shape()[0];
    let (h, w) = (
        data.samples[0].image.shape()[1],
        data.samples[0].image.shape()[2],
    );
    let mut images = vec![0.0 as Elem; b * c * crop * crop];
    let mut labels = vec![0u8; b * crop * crop];
    for (bi, &(idx, oy, ox)) in picks.iter().enumerate() {
        let s = &data.samples[idx];
        for ci in 0..c {
            for y in 0..crop {
                let src = (ci * h + oy + y) * w + ox;
                let dst = ((bi * c + ci) * crop + y) * crop;
                images[dst..dst + crop].copy_from_slice(&s.image.data()[src..src + crop]);
            }
        }
        for y in 0..crop {
            let src = (oy + y) * w + ox;
            let dst = (bi * crop + y) * crop;
            labels[dst..dst + crop].copy_from_slice(&s.labels.data()[src..src + crop]);
        }
    }
    (
        Tensor::new(vec![b, c, crop, crop], images).expect("crop window is finite"),
        LabelMap::new(vec![b, crop, crop], labels).expect("sized by construction"),
    )
}

/// Trains `model` in place. One optimizer step per batch updates the union
/// of top and bottom parameters from a single backward pass of the summed
/// loss. Fully deterministic in `(cfg.seed, datasets)`.
pub fn train(
    model: &mut CoopModel,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunRecord, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::BadConfig("batch size must be >= 1".into()));
    }
    let (_, h, w) = dataset_dims(train_set)?;
    check_crop(cfg.crop, h, w)?;
    if train_set.num_classes != model.spec().num_classes {
        return Err(TrainError::ClassCountMismatch {
            model: model.spec().num_classes,
            data: train_set.num_classes,
        });
    }

    let n = train_set.samples.len();
    let steps_per_epoch = (n / cfg.batch_size).max(1);
    let mut stream = rng_from(derive_seed(cfg.seed, BATCH_STREAM));
    let mut hash = StreamHash::new();
    let method = model.scheme().method_name().to_string();

    let mut record = RunRecord {
        method: method.clone(),
        seed: cfg.seed,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        evals: Vec::new(),
        stream_hash: 0,
    };

    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let (mut sum1, mut sum2, mut sum_total) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..steps_per_epoch {
            let picks: Vec<(usize, usize, usize)> = (0..cfg.batch_size)
                .map(|_| {
                    let idx = stream.random_range(0..n);
                    let oy = stream.random_range(0..=h - cfg.crop);
                    let ox = stream.random_range(0..=w - cfg.crop);
                    hash.update(idx as u64);
                    hash.update(oy as u64);
                    hash.update(ox as u64);
                    (idx, oy, ox)
                })
                .collect();
            let (images, labels) = assemble_batch(train_set, &picks, cfg.crop);

            let step_result = (|| -> Result<_, TrainError> {
                let mut g = Graph::new();
                let img = g.leaf(images);
                let fwd = model.forward(&mut g, img)?;
                let jl = joint_loss(&mut g, fwd.logits_top, fwd.logits_bottom, &labels)?;
                g.backward(jl.total_id)?;
                model.accumulate_grads(&g, &fwd);
                Ok(jl)
            })();
            let jl = match step_result {
                Ok(jl) => jl,
                Err(e) if is_non_finite(&e) => {
                    return Err(TrainError::NanLoss { step: global_step })
                }
                Err(other) => return Err(other),
            };
            model.sgd_step(cfg.lr, cfg.momentum)?;
            model.zero_grads();
            sum1 += f64::from(jl.loss1);
            sum2 += f64::from(jl.loss2);
            sum_total += f64::from(jl.total);
            global_step += 1;
        }
        record.epoch_losses.push(EpochLoss {
            epoch: epoch + 1,
            loss1: sum1 / steps_per_epoch as f64,
            loss2: sum2 / steps_per_epoch as f64,
            total: sum_total / steps_per_epoch as f64,
        });

        if let Some(val) = val_set {
            let is_final = epoch + 1 == cfg.epochs;
            let scheduled = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
            if is_final || scheduled {
                let mut heads = vec![Head::Top];
                if model.bottom().is_some() {
                    heads.push(Head::Bottom);
                    heads.push(Head::Ensemble);
                }
                for head in heads {
                    let tag = EvalTag {
                        method: method.clone(),
                        seed: cfg.seed,
                        epoch: epoch + 1,
                        split: "val".into(),
                    };
                    record
                        .evals
                        .push(evaluate(model, val, cfg.crop, cfg.batch_size, head, &tag)?);
                }
            }
        }
    }
    record.stream_hash = hash.finish();
    Ok(record)
}

/// Identifying tags stamped onto an evaluation report.
#[derive(Debug, Clone)]
pub struct EvalTag {
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
}

/// Scores one head of the model on the center crop of every sample.
pub fn evaluate(
    model: &CoopModel,
    data: &Dataset,
    crop: usize,
    batch_size: usize,
    head: Head,
    tag: &EvalTag,
) -> Result<EvalReport, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::BadConfig("batch size must be >= 1".into()));
    }
    let (_, h, w) = dataset_dims(data)?;
    check_crop(crop, h, w)?;
    if data.num_classes != model.spec().num_classes {
        return Err(TrainError::ClassCountMismatch {
            model: model.spec().num_classes,
            data: data.num_classes,
        });
    }
    if head != Head::Top && model.bottom().is_none() {
        return Err(TrainError::HeadUnavailable {
            head: head.as_str(),
            method: model.scheme().method_name(),
        });
    }

    let oy = (h - crop) / 2;
    let ox = (w - crop) / 2;
    let mut cm = ConfusionMatrix::new(data.num_classes);
    let indices: Vec<usize> = (0..data.samples.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let picks: Vec<(usize, usize, usize)> = chunk.iter().map(|&i| (i, oy, ox)).collect();
        let (images, labels) = assemble_batch(data, &picks, crop);
        let mut g = Graph::new();
        let img = g.leaf(images);
        let fwd = model.forward(&mut g, img)?;
        let scores = match head {
            Head::Top => Tensor::new(
                g.shape(fwd.logits_top).to_vec(),
                g.value(fwd.logits_top).to_vec(),
            )?,
            Head::Bottom => {
                let id = fwd.logits_bottom.expect("checked above");
                Tensor::new(g.shape(id).to_vec(), g.value(id).to_vec())?
            }
            Head::Ensemble => {
                let id = fwd.logits_bottom.expect("checked above");
                let top = Tensor::new(
                    g.shape(fwd.logits_top).to_vec(),
                    g.value(fwd.logits_top).to_vec(),
                )?;
                let bottom = Tensor::new(g.shape(id).to_vec(), g.value(id).to_vec())?;
                ensemble_predict(&top, &bottom)?
            }
        };
        let pred = argmax_classes(&scores)?;
        cm.accumulate(&pred, &labels)?;
    }
    let ious = cm.iou_per_class();
    let miou = mean_iou(&ious)?;
    Ok(EvalReport {
        method: tag.method.clone(),
        seed: tag.seed,
        head,
        epoch: tag.epoch,
        split: tag.split.clone(),
        ious,
        miou,
    })
}

/// Tap wiring used for the two cooperative methods in a comparison run.
#[derive(Debug, Clone, PartialEq)]
pub struct CoopWiring {
    pub same_taps: Vec<String>,
    pub multi_sources: Vec<String>,
    pub multi_target: String,
    pub detach: bool,
}

impl Default for CoopWiring {
    /// The bundled wiring for [`crate::segnet::default_spec`] networks.
    fn default() -> Self {
        let (multi_sources, multi_target) = default_multi_wiring();
        CoopWiring {
            same_taps: default_same_taps(),
            multi_sources,
            multi_target,
            detach: false,
        }
    }
}

impl CoopWiring {
    pub fn scheme_for(&self, method: &str) -> Option<ConnectionScheme> {
        let scheme = match method {
            "single" => ConnectionScheme::single(),
            "ensemble" => ConnectionScheme::ensemble(),
            "same" => ConnectionScheme::same_layer(self.same_taps.clone()),
            "multi" => {
                ConnectionScheme::multi_layer(self.multi_sources.clone(), &self.multi_target)
            }
            _ => return None,
        };
        Some(scheme.with_detach(self.detach))
    }
}

/// Fixed method order of every comparison table.
pub const METHOD_ORDER: [&str; 4] = ["single", "ensemble", "same", "multi"];

/// Which head a method's headline number scores: the bottom network is the
/// information-enriched output of a cooperative model.
pub fn headline_head(method: &str) -> Head {
    match method {
        "single" => Head::Top,
        "ensemble" => Head::Ensemble,
        _ => Head::Bottom,
    }
}

/// One (method, seed) cell of a comparison run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareCell {
    pub method: String,
    pub seed: u64,
    pub head: Head,
    pub miou: f64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareResult {
    pub cells: Vec<CompareCell>,
    pub num_classes: usize,
}

impl CompareResult {
    pub fn method_cells<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a CompareCell> {
        self.cells.iter().filter(move |c| c.method == method)
    }

    pub fn method_mean(&self, method: &str) -> f64 {
        let ms: Vec<f64> = self.method_cells(method).map(|c| c.miou).collect();
        ms.iter().sum::<f64>() / ms.len() as f64
    }

    /// `method,seed,head,miou` rows in fixed method order, each method
    /// followed by a `mean` pseudo-seed row.
    pub fn csv(&self) -> String {
        let mut s = String::from("method,seed,head,miou\n");
        for method in METHOD_ORDER {
            let mut head = Head::Top;
            for cell in self.method_cells(method) {
                head = cell.head;
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6}",
                    cell.method,
                    cell.seed,
                    cell.head.as_str(),
                    cell.miou
                );
            }
            let _ = writeln!(
                s,
                "{},mean,{},{:.6}",
                method,
                head.as_str(),
                self.method_mean(method)
            );
        }
        s
    }
}

/// Trains and evaluates all four methods for every seed on identical data
/// and identical per-seed batch/crop streams. Cells run in parallel on up
/// to `jobs` threads (0 = number of cores); results are merged in fixed
/// order, so the output is independent of scheduling.
pub fn compare(
    spec: &NetworkSpec,
    base: &TrainConfig,
    wiring: &CoopWiring,
    seeds: &[u64],
    train_set: &Dataset,
    eval_set: &Dataset,
    jobs: usize,
) -> Result<CompareResult, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::BadConfig("need at least one seed".into()));
    }
    let mut cells_in: Vec<(&'static str, u64)> = Vec::new();
    for method in METHOD_ORDER {
        for &seed in seeds {
            cells_in.push((method, seed));
        }
    }

    let run_cell = |&(method, seed): &(&'static str, u64)| -> Result<CompareCell, TrainError> {
        let scheme = wiring.scheme_for(method).expect("method order is fixed");
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.scheme = scheme.clone();
        let mut model = CoopModel::build(spec, scheme, seed, seed + BOTTOM_SEED_OFFSET)?;
        let mut record = train(&mut model, train_set, None, &cfg)?;
        let head = headline_head(method);
        let tag = EvalTag {
            method: method.to_string(),
            seed,
            epoch: cfg.epochs,
            split: "test".into(),
        };
        let report = evaluate(&model, eval_set, cfg.crop, cfg.batch_size, head, &tag)?;
        let miou = report.miou;
        record.evals.push(report);
        Ok(CompareCell {
            method: method.to_string(),
            seed,
            head,
            miou,
            record,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::BadConfig(format!("thread pool: {e}")))?;
    let results: Vec<Result<CompareCell, TrainError>> =
        pool.install(|| cells_in.par_iter().map(run_cell).collect());
    let mut cells = Vec::with_capacity(results.len());
    for r in results {
        cells.push(r?);
    }

    // Fair comparison: within one run, every method must have consumed the
    // identical batch/crop stream for a given seed.
    for &seed in seeds {
        let hashes: Vec<u64> = cells
            .iter()
            .filter(|c| c.seed == seed)
            .map(|c| c.record.stream_hash)
            .collect();
        assert!(
            hashes.windows(2).all(|w| w[0] == w[1]),
            "methods consumed different batch streams for seed {seed}"
        );
    }

    Ok(CompareResult {
        cells,
        num_classes: train_set.num_classes,
    })
}

/// The bundled desk-scale benchmark: dataset shape, split sizes, training
/// protocol, and seeds.
pub mod benchmark {
    use super::*;

    pub const TRAIN_SAMPLES: usize = 200;
    pub const TEST_SAMPLES: usize = 50;
    pub const SEEDS: [u64; 3] = [1, 2, 3];

    /// K=4 shapes at 64x64 with mild noise; dataset seed 7 (test split
    /// draws from 7 + 2).
    pub fn dataset_config() -> DatasetConfig {
        let mut cfg = DatasetConfig::new(TRAIN_SAMPLES, 64, 64, 4);
        cfg.seed = 7;
        cfg
    }

    /// 30 epochs of momentum SGD at the bundled crop size.
    pub fn train_config() -> TrainConfig {
        TrainConfig::new(ConnectionScheme::single())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_splits, Split};

    fn tiny_data(n: usize, k: usize, seed: u64) -> Dataset {
        let mut cfg = DatasetConfig::new(n, 16, 16, k);
        cfg.seed = seed;
        crate::data::generate_dataset(&cfg).unwrap()
    }

    fn tiny_cfg(scheme: ConnectionScheme, epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(scheme);
        cfg.epochs = epochs;
        cfg.batch_size = 4;
        cfg.crop = 16;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn zero_epochs_returns_empty_record_and_leaves_model_untouched() {
        let data = tiny_data(6, 3, 5);
        let spec = crate::segnet::default_spec(3, 3);
        let mut model = CoopModel::build(&spec, ConnectionScheme::single(), 3, 1003).unwrap();
        let before: Vec<Vec<Elem>> = model
            .top()
            .params()
            .iter()
            .map(|p| p.value().data().to_vec())
            .collect();
        let record = train(
            &mut model,
            &data,
            None,
            &tiny_cfg(ConnectionScheme::single(), 0),
        )
        .unwrap();
        assert!(record.epoch_losses.is_empty());
        assert!(record.evals.is_empty());
        for (p, b) in model.top().params().iter().zip(&before) {
            assert_eq!(p.value().data(), &b[..]);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = tiny_data(8, 3, 6);
        let spec = crate::segnet::default_spec(3, 3);
        let run = || {
            let scheme = ConnectionScheme::same_layer(default_same_taps());
            let cfg = tiny_cfg(scheme.clone(), 2);
            let mut model =
                CoopModel::build(&spec, scheme, cfg.seed, cfg.seed + BOTTOM_SEED_OFFSET).unwrap();
            train(&mut model, &data, Some(&data), &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.loss_csv(), b.loss_csv());
        assert_eq!(a.eval_csv(3), b.eval_csv(3));
    }

    #[test]
    fn one_step_updates_both_parameter_sets() {
        let data = tiny_data(4, 3, 7);
        let spec = crate::segnet::default_spec(3, 3);
        let scheme = ConnectionScheme::same_layer(default_same_taps());
        let mut cfg = tiny_cfg(scheme.clone(), 1);
        cfg.batch_size = 4;
        let mut model =
            CoopModel::build(&spec, scheme, cfg.seed, cfg.seed + BOTTOM_SEED_OFFSET).unwrap();
        let top_before: Vec<Elem> = model.top().params()[0].value().data().to_vec();
        let bottom_before: Vec<Elem> = model.bottom().unwrap().params()[0].value().data().to_vec();
        train(&mut model, &data, None, &cfg).unwrap();
        assert_ne!(model.top().params()[0].value().data(), &top_before[..]);
        assert_ne!(
            model.bottom().unwrap().params()[0].value().data(),
            &bottom_before[..]
        );
    }

    #[test]
    fn loss_decreases_on_a_small_run() {
        let data = tiny_data(16, 3, 8);
        let spec = crate::segnet::default_spec(3, 3);
        let cfg = tiny_cfg(ConnectionScheme::single(), 8);
        let mut model =
            CoopModel::build(&spec, ConnectionScheme::single(), cfg.seed, cfg.seed + 1).unwrap();
        let record = train(&mut model, &data, None, &cfg).unwrap();
        assert!(record.converged(), "loss went {:?}", record.epoch_losses);
    }

    #[test]
    fn runaway_lr_aborts_with_step_index() {
        let data = tiny_data(4, 3, 9);
        let spec = crate::segnet::default_spec(3, 3);
        let mut cfg = tiny_cfg(ConnectionScheme::single(), 5);
        cfg.lr = 1e30;
        let mut model =
            CoopModel::build(&spec, ConnectionScheme::single(), cfg.seed, cfg.seed + 1).unwrap();
        match train(&mut model, &data, None, &cfg) {
            Err(TrainError::NanLoss { .. }) => {}
            other => panic!("expected NanLoss, got {other:?}"),
        }
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let data = tiny_data(4, 4, 10);
        let spec = crate::segnet::default_spec(3, 3);
        let mut model = CoopModel::build(&spec, ConnectionScheme::single(), 1, 2).unwrap();
        assert!(matches!(
            train(
                &mut model,
                &data,
                None,
                &tiny_cfg(ConnectionScheme::single(), 1)
            ),
            Err(TrainError::ClassCountMismatch { model: 3, data: 4 })
        ));
    }

    #[test]
    fn untrained_model_scores_in_the_chance_band() {
        // Balanced per-pixel labels, fresh model: mIoU ~ 1/(2K - 1).
        let k = 4;
        let mut data = tiny_data(40, k, 11);
        let mut rng = rng_from(77);
        for s in &mut data.samples {
            for l in s.labels.data_mut() {
                *l = rng.random_range(0..k) as u8;
            }
        }
        let spec = crate::segnet::default_spec(3, k);
        let model = CoopModel::build(&spec, ConnectionScheme::single(), 13, 14).unwrap();
        let tag = EvalTag {
            method: "single".into(),
            seed: 13,
            epoch: 0,
            split: "val".into(),
        };
        let report = evaluate(&model, &data, 16, 8, Head::Top, &tag).unwrap();
        let (lo, hi) = crate::metrics::chance_band(k);
        assert!(
            report.miou >= lo && report.miou <= hi,
            "untrained mIoU {} outside chance band [{lo}, {hi}]",
            report.miou
        );
    }

    #[test]
    fn ensemble_head_with_equal_seeds_matches_top_head() {
        let data = tiny_data(6, 3, 12);
        let spec = crate::segnet::default_spec(3, 3);
        let model = CoopModel::build(&spec, ConnectionScheme::ensemble(), 5, 5).unwrap();
        let tag = EvalTag {
            method: "ensemble".into(),
            seed: 5,
            epoch: 0,
            split: "val".into(),
        };
        let top = evaluate(&model, &data, 16, 4, Head::Top, &tag).unwrap();
        let ens = evaluate(&model, &data, 16, 4, Head::Ensemble, &tag).unwrap();
        assert_eq!(top.ious, ens.ious);
        assert_eq!(top.miou, ens.miou);
    }

    #[test]
    fn bottom_head_on_single_is_unavailable() {
        let data = tiny_data(4, 3, 13);
        let spec = crate::segnet::default_spec(3, 3);
        let model = CoopModel::build(&spec, ConnectionScheme::single(), 1, 2).unwrap();
        let tag = EvalTag {
            method: "single".into(),
            seed: 1,
            epoch: 0,
            split: "val".into(),
        };
        assert!(matches!(
            evaluate(&model, &data, 16, 4, Head::Bottom, &tag),
            Err(TrainError::HeadUnavailable { .. })
        ));
    }

    #[test]
    fn compare_zero_epochs_has_fixed_rows_in_chance_band() {
        // The chance band is stated for balanced labels on >= 1e5 pixels;
        // give the untrained models exactly those conditions.
        let mut dcfg = DatasetConfig::new(8, 32, 32, 4);
        dcfg.seed = 15;
        let [train_set, _, mut test_set] = generate_splits(&dcfg, [8, 2, 100]).unwrap();
        let mut rng = rng_from(88);
        for s in &mut test_set.samples {
            for l in s.labels.data_mut() {
                *l = rng.random_range(0..4) as u8;
            }
        }
        let spec = crate::segnet::default_spec(3, 4);
        let mut base = TrainConfig::new(ConnectionScheme::single());
        base.epochs = 0;
        base.batch_size = 4;
        base.crop = 32;
        let result = compare(
            &spec,
            &base,
            &CoopWiring::default(),
            &[1],
            &train_set,
            &test_set,
            0,
        )
        .unwrap();
        assert_eq!(result.cells.len(), 4);
        let methods: Vec<&str> = result.cells.iter().map(|c| c.method.as_str()).collect();
        assert_eq!(methods, METHOD_ORDER.to_vec());
        let csv = result.csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,seed,head,miou");
        assert_eq!(lines.len(), 1 + 4 + 4); // header + cells + mean rows
        let (lo, hi) = crate::metrics::chance_band(4);
        for cell in &result.cells {
            assert!(
                cell.miou >= lo && cell.miou <= hi,
                "{}: {} outside chance band [{lo}, {hi}]",
                cell.method,
                cell.miou
            );
        }
        // Identical streams per seed across methods.
        let h0 = result.cells[0].record.stream_hash;
        assert!(result.cells.iter().all(|c| c.record.stream_hash == h0));
    }

    #[test]
    fn split_seeds_are_disjoint() {
        assert_eq!(Split::Train.seed_offset(), 0);
        assert_eq!(Split::Val.seed_offset(), 1);
        assert_eq!(Split::Test.seed_offset(), 2);
    }
}
