//! Losses, the lambda schedule, Adam, per-fold training with early
//! stopping on validation AUC, and the cross-table-shift
//! cross-validation driver.
//!
//! Each fold trains on rows from its train tables only; validation and
//! test tables are entirely unseen (cross-table shift). Domain labels
//! enumerate the fold's train tables; validation and test rows carry
//! the sentinel domain -1 and never contribute to the domain loss.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::Tape;

use crate::error::{Error, Result};
use crate::ingest::{sub_seed, FoldPlan, RowRecord};
use crate::metrics::{accuracy, roc_auc, FoldMetrics, MetricsReport, TableMetrics};
use crate::model::{
    assemble_datum_batch, assemble_flat_batch, bind_params, forward_datum_wise,
    forward_flat_text, init_datum_wise_params, init_flat_text_params, score_rows, BnUpdate,
    DomainPath, ModelConfig, ModelKind, ParamStore, RowForward,
};
use crate::tokenizer::{
    collate, collate_flat, encode_flat_precursor, encode_row_precursor, CharVocab, EncodeStats,
};

const BN_MOMENTUM: f64 = 0.1;

/// How lambda (the gradient-reversal strength) ramps over training
/// progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaSchedule {
    #[serde(rename = "constant-zero")]
    ConstantZero,
    #[serde(rename = "dann-original")]
    DannOriginal,
    #[serde(rename = "cosine")]
    Cosine,
}

impl std::fmt::Display for LambdaSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LambdaSchedule::ConstantZero => write!(f, "constant-zero"),
            LambdaSchedule::DannOriginal => write!(f, "dann-original"),
            LambdaSchedule::Cosine => write!(f, "cosine"),
        }
    }
}

impl std::str::FromStr for LambdaSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "constant-zero" => Ok(LambdaSchedule::ConstantZero),
            "dann" | "dann-original" => Ok(LambdaSchedule::DannOriginal),
            "cosine" => Ok(LambdaSchedule::Cosine),
            other => Err(Error::usage(format!("unknown lambda schedule: {}", other))),
        }
    }
}

/// lambda as a function of training progress in [0,1].
///
/// The cosine ramp 0.5*(1 - cos(pi*p)) is evaluated through the
/// identity cos(pi*p) = sin(pi*(0.5 - p)) so that the endpoints and the
/// midpoint (0, 0.5, 1) come out exact in f64 rather than one ulp off.
pub fn lambda_schedule(progress: f64, kind: LambdaSchedule) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    match kind {
        LambdaSchedule::ConstantZero => 0.0,
        LambdaSchedule::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * (0.5 - p)).sin()),
        LambdaSchedule::DannOriginal => 2.0 / (1.0 + (-10.0 * p).exp()) - 1.0,
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a strict validation-AUC improvement before
    /// stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub lambda_schedule: LambdaSchedule,
    pub seed: u64,
    pub domain_adaptation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            max_epochs: 10,
            patience: 3,
            batch_size: 64,
            lambda_schedule: LambdaSchedule::Cosine,
            seed: 0,
            domain_adaptation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::usage("learning rate must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::usage("patience must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::usage("max epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over probabilities. Saturated terms whose
/// coefficient is zero are skipped, so p == y exactly gives loss 0.
pub fn bce_loss(p: &[f64], y: &[u8]) -> f64 {
    assert_eq!(p.len(), y.len());
    assert!(!p.is_empty());
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        if yi == 1 {
            total -= pi.ln();
        } else {
            total -= (1.0 - pi).ln();
        }
    }
    total / p.len() as f64
}

/// Mean softmax cross-entropy over rows with a real domain id; rows
/// with the sentinel -1 are excluded, and all-sentinel input gives 0.
pub fn domain_ce_loss(logits: &ndarray::Array2<f64>, domain_ids: &[i64]) -> f64 {
    assert_eq!(logits.shape()[0], domain_ids.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &id) in logits.rows().into_iter().zip(domain_ids) {
        if id < 0 {
            continue;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[id as usize];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Scalar composition of the two losses. The adversarial sign lives in
/// the gradient-reversal node, not here, so the domain term enters with
/// unit weight.
pub fn total_loss(bce: f64, domain_ce: f64, da_enabled: bool) -> f64 {
    if da_enabled {
        bce + domain_ce
    } else {
        bce
    }
}

struct AdamSlot {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

/// Adam with bias correction and no weight decay. Parameters that
/// receive no gradient in a step are skipped outright (their moments do
/// not decay), so an ablated head stays bitwise at initialization.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: IndexMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: IndexMap::new(),
        }
    }

    /// Applies one update per named gradient. Non-finite gradients
    /// abort with a diagnostic naming the tensor.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        for (name, grad) in grads {
            if !grad.iter().all(|v| v.is_finite()) {
                return Err(Error::training(format!(
                    "non-finite gradient in parameter {}",
                    name
                )));
            }
            let slot = self.state.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let gs = grad.as_slice().expect("gradients are contiguous");
            let ms = slot.m.as_slice_mut().unwrap();
            let vs = slot.v.as_slice_mut().unwrap();
            let value = params.get_mut(name);
            let ps = value.as_slice_mut().expect("parameters are contiguous");
            assert_eq!(ps.len(), gs.len(), "gradient shape mismatch for {}", name);
            for i in 0..ps.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Folds batch statistics into the stored running statistics
/// (exponential moving average; running variance uses the unbiased
/// estimate, matching common batch-norm practice).
pub fn apply_bn_updates(params: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let unbias = if u.n > 1 {
            u.n as f64 / (u.n as f64 - 1.0)
        } else {
            1.0
        };
        let rm = params.get_mut(&format!("{}.bn.running_mean", u.prefix));
        for (r, &b) in rm.as_slice_mut().unwrap().iter_mut().zip(&u.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let rv = params.get_mut(&format!("{}.bn.running_var", u.prefix));
        for (r, &b) in rv.as_slice_mut().unwrap().iter_mut().zip(&u.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (b * unbias);
        }
    }
}

/// Strict-improvement early stopping on validation AUC.
pub struct EarlyStopper {
    patience: usize,
    best: Option<(f64, usize)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1);
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records one epoch's validation AUC. Returns (new_best, stop).
    pub fn observe(&mut self, epoch: usize, val_auc: f64) -> (bool, bool) {
        let improved = self.best.map_or(true, |(b, _)| val_auc > b);
        if improved {
            self.best = Some((val_auc, epoch));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }

    /// (best val AUC, epoch it occurred in).
    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }
}

/// One structured log line per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_domain_ce: f64,
    pub train_auc: Option<f64>,
    pub val_auc: f64,
    /// lambda at the last step of the epoch.
    pub lambda: f64,
}

/// The result of training one fold.
#[derive(Debug)]
pub struct FoldOutcome {
    pub fold_index: usize,
    /// Parameters from the best-validation-AUC epoch.
    pub params: ParamStore,
    /// Config actually trained (num_domains filled in per fold).
    pub config: ModelConfig,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

struct StepStats {
    total: f64,
    bce: f64,
    domain_ce: f64,
    scores: Vec<f64>,
}

/// One optimizer step on one batch: encode, forward in train mode,
/// backward, Adam update, batch-norm running-stat update.
#[allow(clippy::too_many_arguments)]
fn train_step(
    kind: ModelKind,
    params: &mut ParamStore,
    cfg: &ModelConfig,
    vocab: &CharVocab,
    batch_rows: &[&RowRecord],
    lambda: f64,
    da: bool,
    adam: &mut Adam,
    dropout_rng: &mut ChaCha8Rng,
    stats: &mut EncodeStats,
) -> Result<StepStats> {
    let labels: Vec<f64> = batch_rows.iter().map(|r| r.label as f64).collect();
    let domain_ids: Vec<i64> = batch_rows.iter().map(|r| r.domain_id).collect();
    let mut tape = Tape::new();
    let bind = bind_params(&mut tape, params, true);
    let path = da.then_some(DomainPath {
        lambda,
        reverse: true,
    });
    let fwd: RowForward = match kind {
        ModelKind::DatumWise => {
            let pres: Vec<_> = batch_rows
                .iter()
                .map(|r| encode_row_precursor(r, vocab, cfg.max_datum_len, cfg.max_datums, stats))
                .collect();
            let toks = collate(&pres)?;
            let batch = assemble_datum_batch(&toks);
            forward_datum_wise(
                &mut tape,
                &bind,
                params,
                cfg,
                &batch,
                true,
                path,
                Some(dropout_rng),
            )
        }
        ModelKind::FlatText => {
            let encoded: Vec<_> = batch_rows
                .iter()
                .map(|r| encode_flat_precursor(r, vocab, cfg.max_row_chars, stats))
                .collect();
            let (ids, mask) = collate_flat(&encoded)?;
            let batch = assemble_flat_batch(&ids, &mask);
            forward_flat_text(
                &mut tape,
                &bind,
                params,
                cfg,
                &batch,
                true,
                path,
                Some(dropout_rng),
            )
        }
    };

    let bce = tape.bce_with_logits_mean(fwd.logit, &labels);
    let (loss, dce) = match fwd.domain_logits {
        Some(dlogits) => {
            let dce = tape.softmax_ce_mean(dlogits, &domain_ids);
            (tape.add(bce, dce), Some(dce))
        }
        None => (bce, None),
    };

    let scores: Vec<f64> = tape.value(fwd.p).iter().copied().collect();
    let bce_value = tape.value(bce)[ndarray::IxDyn(&[])];
    let dce_value = dce.map_or(0.0, |n| tape.value(n)[ndarray::IxDyn(&[])]);
    let total_value = tape.value(loss)[ndarray::IxDyn(&[])];
    if !total_value.is_finite() {
        return Err(Error::training(format!(
            "non-finite loss (bce {}, domain ce {})",
            bce_value, dce_value
        )));
    }

    let grads = tape.backward(loss);
    let mut grad_map: IndexMap<String, ArrayD<f64>> = IndexMap::new();
    for (name, node) in bind.iter() {
        if let Some(g) = grads.get(*node) {
            grad_map.insert(name.clone(), g.clone());
        }
    }
    adam.step(params, &grad_map)?;
    apply_bn_updates(params, &fwd.bn_updates);

    Ok(StepStats {
        total: total_value,
        bce: bce_value,
        domain_ce: dce_value,
        scores,
    })
}

fn check_fold_disjoint(fold: &FoldPlan) -> Result<()> {
    use std::collections::BTreeSet;
    let train: BTreeSet<_> = fold.train_tables.iter().collect();
    let val: BTreeSet<_> = fold.val_tables.iter().collect();
    let test: BTreeSet<_> = fold.test_tables.iter().collect();
    if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
        return Err(Error::data(format!(
            "fold {} has overlapping table groups",
            fold.fold_index
        )));
    }
    Ok(())
}

/// Trains one fold and returns the best-epoch parameters with the
/// per-epoch log. Initialization uses seed + fold_index so folds are
/// independent but reproducible.
pub fn train_fold(
    kind: ModelKind,
    fold: &FoldPlan,
    rows: &[RowRecord],
    vocab: &CharVocab,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    train_cfg.validate()?;
    check_fold_disjoint(fold)?;

    // Domain ids enumerate the fold's train tables in sorted order.
    let mut train_names: Vec<&String> = fold.train_tables.iter().collect();
    train_names.sort();
    let domain_of: BTreeMap<&str, i64> = train_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i as i64))
        .collect();

    let mut train_rows: Vec<RowRecord> = Vec::new();
    let mut val_rows: Vec<RowRecord> = Vec::new();
    for r in rows {
        if let Some(&id) = domain_of.get(r.domain.as_str()) {
            let mut r = r.clone();
            r.domain_id = id;
            train_rows.push(r);
        } else if fold.val_tables.contains(&r.domain) {
            val_rows.push(r.clone());
        }
    }
    if train_rows.is_empty() {
        return Err(Error::data(format!(
            "fold {} has an empty training split",
            fold.fold_index
        )));
    }
    if val_rows.is_empty() {
        return Err(Error::data(format!(
            "fold {} has an empty validation split",
            fold.fold_index
        )));
    }
    let val_labels: Vec<u8> = val_rows.iter().map(|r| r.label).collect();

    let mut cfg = model_cfg.clone();
    cfg.vocab_size = vocab.size();
    cfg.num_domains = train_names.len();
    cfg.validate()?;

    let init_seed = train_cfg.seed + fold.fold_index as u64;
    let mut params = match kind {
        ModelKind::DatumWise => init_datum_wise_params(&cfg, init_seed),
        ModelKind::FlatText => init_flat_text_params(&cfg, init_seed),
    };
    let mut adam = Adam::new(train_cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(init_seed, "epoch-shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(init_seed, "dropout"));

    let batches_per_epoch = train_rows.len().div_ceil(train_cfg.batch_size);
    let planned_steps = (train_cfg.max_epochs * batches_per_epoch) as f64;
    let mut global_step = 0u64;
    let mut stopper = EarlyStopper::new(train_cfg.patience);
    let mut best_params: Option<ParamStore> = None;
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut encode_stats = EncodeStats::default();

    for epoch in 1..=train_cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_rows.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sum_total = 0.0;
        let mut sum_bce = 0.0;
        let mut sum_dce = 0.0;
        let mut seen = 0usize;
        let mut epoch_scores: Vec<f64> = Vec::with_capacity(train_rows.len());
        let mut epoch_labels: Vec<u8> = Vec::with_capacity(train_rows.len());
        let mut lambda = 0.0;

        for chunk in order.chunks(train_cfg.batch_size) {
            let progress = global_step as f64 / planned_steps;
            lambda = lambda_schedule(progress, train_cfg.lambda_schedule);
            let batch_rows: Vec<&RowRecord> = chunk.iter().map(|&i| &train_rows[i]).collect();
            let step = train_step(
                kind,
                &mut params,
                &cfg,
                vocab,
                &batch_rows,
                lambda,
                train_cfg.domain_adaptation,
                &mut adam,
                &mut dropout_rng,
                &mut encode_stats,
            )
            .map_err(|e| {
                Error::training(format!(
                    "fold {}, epoch {}, step {}: {}",
                    fold.fold_index, epoch, global_step, e
                ))
            })?;
            let b = chunk.len() as f64;
            sum_total += step.total * b;
            sum_bce += step.bce * b;
            sum_dce += step.domain_ce * b;
            seen += chunk.len();
            epoch_scores.extend(step.scores);
            epoch_labels.extend(chunk.iter().map(|&i| train_rows[i].label));
            global_step += 1;
        }

        let mut eval_stats = EncodeStats::default();
        let val_scores = score_rows(kind, &params, &cfg, vocab, &val_rows, &mut eval_stats)?;
        let val_auc = roc_auc(&val_scores, &val_labels).map_err(|e| {
            Error::training(format!(
                "fold {}, epoch {}: validation AUC undefined: {}",
                fold.fold_index, epoch, e
            ))
        })?;

        epochs.push(EpochLog {
            fold: fold.fold_index,
            epoch,
            train_loss: sum_total / seen as f64,
            train_bce: sum_bce / seen as f64,
            train_domain_ce: sum_dce / seen as f64,
            train_auc: roc_auc(&epoch_scores, &epoch_labels).ok(),
            val_auc,
            lambda,
        });

        let (new_best, stop) = stopper.observe(epoch, val_auc);
        if new_best {
            best_params = Some(params.clone());
        }
        if stop {
            break;
        }
    }

    let (best_val_auc, best_epoch) = stopper.best().expect("at least one epoch ran");
    Ok(FoldOutcome {
        fold_index: fold.fold_index,
        params: best_params.expect("best parameters snapshotted"),
        config: cfg,
        epochs,
        best_epoch,
        best_val_auc,
    })
}

/// The full cross-validation result: the aggregate report plus each
/// fold's trained model.
pub struct CvOutcome {
    pub report: MetricsReport,
    pub folds: Vec<FoldOutcome>,
}

/// Trains every fold and evaluates each best model on its held-out
/// test tables. Per-table metrics come from scoring each table's rows
/// alone (in corpus order), so they can be reproduced independently
/// from the saved model; fold-level metrics pool those same scores.
pub fn run_cross_validation(
    kind: ModelKind,
    rows: &[RowRecord],
    vocab: &CharVocab,
    folds: &[FoldPlan],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<CvOutcome> {
    let tables: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.domain.as_str()).collect();
    if tables.len() < 3 {
        return Err(Error::data(format!(
            "cross-validation needs at least 3 tables, found {}",
            tables.len()
        )));
    }

    let mut fold_metrics = Vec::new();
    let mut outcomes = Vec::new();
    for fold in folds {
        let outcome = train_fold(kind, fold, rows, vocab, model_cfg, train_cfg)?;

        let mut per_table = BTreeMap::new();
        let mut pooled_scores: Vec<f64> = Vec::new();
        let mut pooled_labels: Vec<u8> = Vec::new();
        let mut test_tables = fold.test_tables.clone();
        test_tables.sort();
        for table in &test_tables {
            let table_rows: Vec<RowRecord> = rows
                .iter()
                .filter(|r| &r.domain == table)
                .cloned()
                .collect();
            if table_rows.is_empty() {
                return Err(Error::data(format!(
                    "fold {}: test table {} has no rows",
                    fold.fold_index, table
                )));
            }
            let labels: Vec<u8> = table_rows.iter().map(|r| r.label).collect();
            let mut stats = EncodeStats::default();
            let scores = score_rows(
                kind,
                &outcome.params,
                &outcome.config,
                vocab,
                &table_rows,
                &mut stats,
            )?;
            let auc = roc_auc(&scores, &labels).map_err(|e| {
                Error::training(format!(
                    "fold {}: test table {}: {}",
                    fold.fold_index, table, e
                ))
            })?;
            let acc = accuracy(&scores, &labels, 0.5)?;
            per_table.insert(
                table.clone(),
                TableMetrics {
                    auc,
                    accuracy: acc,
                    n_rows: table_rows.len(),
                },
            );
            pooled_scores.extend(scores);
            pooled_labels.extend(labels);
        }
        let fold_auc = roc_auc(&pooled_scores, &pooled_labels).map_err(|e| {
            Error::training(format!("fold {}: test metrics: {}", fold.fold_index, e))
        })?;
        let fold_acc = accuracy(&pooled_scores, &pooled_labels, 0.5)?;
        fold_metrics.push(FoldMetrics {
            fold_index: fold.fold_index,
            auc: fold_auc,
            accuracy: fold_acc,
            n_rows: pooled_labels.len(),
            per_table,
        });
        outcomes.push(outcome);
    }

    Ok(CvOutcome {
        report: MetricsReport::from_folds(fold_metrics),
        folds: outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Datum;
    use crate::tokenizer::build_vocab;

    #[test]
    fn cosine_schedule_endpoints_are_exact() {
        assert_eq!(lambda_schedule(0.0, LambdaSchedule::Cosine), 0.0);
        assert_eq!(lambda_schedule(0.5, LambdaSchedule::Cosine), 0.5);
        assert_eq!(lambda_schedule(1.0, LambdaSchedule::Cosine), 1.0);
    }

    #[test]
    fn dann_original_values() {
        assert_eq!(lambda_schedule(0.0, LambdaSchedule::DannOriginal), 0.0);
        let mid = lambda_schedule(0.5, LambdaSchedule::DannOriginal);
        assert!((mid - 0.9866).abs() < 1e-4, "dann(0.5) = {}", mid);
    }

    #[test]
    fn schedules_are_monotone_and_clamped() {
        for kind in [LambdaSchedule::Cosine, LambdaSchedule::DannOriginal] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=1000 {
                let l = lambda_schedule(i as f64 / 1000.0, kind);
                assert!((0.0..=1.0).contains(&l));
                assert!(l >= prev, "{:?} not monotone at {}", kind, i);
                prev = l;
            }
        }
        assert_eq!(lambda_schedule(-0.5, LambdaSchedule::Cosine), 0.0);
        assert_eq!(lambda_schedule(1.5, LambdaSchedule::Cosine), 1.0);
        assert_eq!(lambda_schedule(0.7, LambdaSchedule::ConstantZero), 0.0);
    }

    #[test]
    fn bce_loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(&[0.5, 0.5, 0.5], &[1, 0, 1]) - ln2).abs() < 1e-15);
        assert!((bce_loss(&[0.9], &[0]) - 2.302585092994046).abs() < 1e-12);
        assert_eq!(bce_loss(&[1.0, 0.0], &[1, 0]), 0.0);
    }

    #[test]
    fn domain_ce_examples() {
        let uniform = ndarray::Array2::from_elem((3, 4), 0.7);
        let ln4 = 4.0f64.ln();
        assert!((domain_ce_loss(&uniform, &[0, 1, 3]) - ln4).abs() < 1e-12);
        assert_eq!(domain_ce_loss(&uniform, &[-1, -1, -1]), 0.0);
        let mut onehot = ndarray::Array2::from_elem((1, 4), -500.0);
        onehot[[0, 2]] = 500.0;
        assert!(domain_ce_loss(&onehot, &[2]) < 1e-12);
        // Only non-sentinel rows count toward the mean.
        let mut mixed = ndarray::Array2::from_elem((2, 4), 0.0);
        mixed[[1, 0]] = 1234.0;
        assert!((domain_ce_loss(&mixed, &[1, -1]) - ln4).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(0.7, 1.3, false), 0.7);
        assert_eq!(total_loss(0.7, 1.3, true), 2.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = ParamStore::new();
        params.insert(
            "w",
            ndarray::arr1(&[1.5, -2.5]).into_dyn(),
            true,
        );
        let before = params.get("w").clone();
        let mut adam = Adam::new(0.01);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), ArrayD::zeros(ndarray::IxDyn(&[2])));
        adam.step(&mut params, &grads).unwrap();
        let after = params.get("w");
        assert!(before
            .iter()
            .zip(after.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adam_first_step_moves_by_nearly_lr_against_gradient() {
        let mut params = ParamStore::new();
        params.insert("w", ndarray::arr1(&[1.0, 1.0]).into_dyn(), true);
        let mut adam = Adam::new(0.01);
        let mut grads = IndexMap::new();
        grads.insert(
            "w".to_string(),
            ndarray::arr1(&[0.5, -0.25]).into_dyn(),
        );
        adam.step(&mut params, &grads).unwrap();
        let w = params.get("w");
        assert!((w[[0]] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((w[[1]] - (1.0 + 0.01)).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = ParamStore::new();
        params.insert("w", ndarray::arr1(&[1.0]).into_dyn(), true);
        let mut adam = Adam::new(0.01);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), ndarray::arr1(&[f64::NAN]).into_dyn());
        let err = adam.step(&mut params, &grads).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn early_stopping_arithmetic() {
        // patience 3, val AUCs [0.6, 0.61, 0.60, 0.60, 0.60]:
        // stop after epoch 5, best is epoch 2.
        let mut stopper = EarlyStopper::new(3);
        let aucs = [0.6, 0.61, 0.60, 0.60, 0.60];
        let mut stopped_at = None;
        for (i, &a) in aucs.iter().enumerate() {
            let (_, stop) = stopper.observe(i + 1, a);
            if stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(5));
        assert_eq!(stopper.best(), Some((0.61, 2)));
    }

    #[test]
    fn early_stopping_requires_strict_improvement() {
        let mut stopper = EarlyStopper::new(2);
        assert_eq!(stopper.observe(1, 0.7), (true, false));
        assert_eq!(stopper.observe(2, 0.7), (false, false));
        assert_eq!(stopper.observe(3, 0.7), (false, true));
        assert_eq!(stopper.best(), Some((0.7, 1)));
    }

    fn toy_rows(tables: usize, rows_per_class: usize) -> Vec<RowRecord> {
        // Real rows pair a letter with its uppercase; fake rows pair it
        // with an unrelated one.
        let letters = ["a", "b", "c", "d", "e", "f", "g", "h"];
        let uppers = ["A", "B", "C", "D", "E", "F", "G", "H"];
        let mut rows = Vec::new();
        for t in 0..tables {
            for i in 0..rows_per_class {
                for label in [0u8, 1u8] {
                    let k = (i * 3 + t) % letters.len();
                    let v = if label == 0 { k } else { (k + 3) % uppers.len() };
                    rows.push(RowRecord {
                        domain: format!("t{}", t),
                        domain_id: -1,
                        datums: vec![
                            Datum {
                                column: format!("k{}", t),
                                value: letters[k].to_string(),
                            },
                            Datum {
                                column: format!("v{}", t),
                                value: uppers[v].to_string(),
                            },
                        ],
                        label,
                    });
                }
            }
        }
        rows
    }

    fn tiny_model_cfg(vocab_size: usize) -> ModelConfig {
        let mut cfg = ModelConfig::with_vocab(vocab_size);
        cfg.d_model = 16;
        cfg.datum_layers = 1;
        cfg.row_layers = 1;
        cfg.heads = 2;
        cfg.ffn_dim = 32;
        cfg.dropout = 0.1;
        cfg
    }

    #[test]
    fn repeated_steps_on_one_batch_halve_the_bce() {
        let rows = toy_rows(1, 4);
        let vocab = build_vocab(&rows, 1).unwrap();
        let mut cfg = tiny_model_cfg(vocab.size());
        cfg.dropout = 0.0;
        let mut params = init_datum_wise_params(&cfg, 0);
        let mut adam = Adam::new(1e-2);
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let mut stats = EncodeStats::default();
        let batch: Vec<&RowRecord> = rows.iter().collect();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..100 {
            let step = train_step(
                ModelKind::DatumWise,
                &mut params,
                &cfg,
                &vocab,
                &batch,
                0.0,
                false,
                &mut adam,
                &mut drng,
                &mut stats,
            )
            .unwrap();
            first.get_or_insert(step.bce);
            last = step.bce;
        }
        let first = first.unwrap();
        assert!(
            last <= 0.5 * first,
            "bce {} -> {} did not halve in 100 steps",
            first,
            last
        );
    }

    #[test]
    fn disabled_domain_adaptation_matches_ablated_head_bitwise() {
        let rows = toy_rows(2, 3);
        let vocab = build_vocab(&rows, 1).unwrap();
        let mut cfg = tiny_model_cfg(vocab.size());
        cfg.num_domains = 2;
        let full = init_datum_wise_params(&cfg, 17);
        let mut ablated = ParamStore::new();
        for (name, entry) in full.iter() {
            if !name.starts_with("dom.") {
                ablated.insert(name, entry.value.clone(), entry.trainable);
            }
        }
        let train = |mut params: ParamStore| {
            let mut adam = Adam::new(1e-3);
            let mut drng = ChaCha8Rng::seed_from_u64(5);
            let mut stats = EncodeStats::default();
            let batch: Vec<&RowRecord> = rows.iter().collect();
            for _ in 0..3 {
                train_step(
                    ModelKind::DatumWise,
                    &mut params,
                    &cfg,
                    &vocab,
                    &batch,
                    0.9,
                    false,
                    &mut adam,
                    &mut drng,
                    &mut stats,
                )
                .unwrap();
            }
            params
        };
        let a = train(full.clone());
        let b = train(ablated);
        for (name, entry) in b.iter() {
            let av = &a.try_get(name).unwrap().value;
            assert!(
                av.iter()
                    .zip(entry.value.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "tensor {} diverged",
                name
            );
        }
        // The untouched domain head stays at initialization.
        for (name, entry) in a.iter() {
            if name.starts_with("dom.") && entry.trainable {
                let init = &full.try_get(name).unwrap().value;
                assert!(entry
                    .value
                    .iter()
                    .zip(init.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    fn fold_fixture() -> (Vec<RowRecord>, CharVocab, FoldPlan) {
        let rows = toy_rows(3, 6);
        let vocab = build_vocab(&rows, 1).unwrap();
        let fold = FoldPlan {
            fold_index: 0,
            train_tables: vec!["t0".to_string()],
            val_tables: vec!["t1".to_string()],
            test_tables: vec!["t2".to_string()],
        };
        (rows, vocab, fold)
    }

    #[test]
    fn train_fold_is_bitwise_deterministic() {
        let (rows, vocab, fold) = fold_fixture();
        let cfg = tiny_model_cfg(vocab.size());
        let tcfg = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 2,
            batch_size: 8,
            domain_adaptation: true,
            ..TrainConfig::default()
        };
        let run = || train_fold(ModelKind::DatumWise, &fold, &rows, &vocab, &cfg, &tcfg).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.epochs.len(), b.epochs.len());
        assert_eq!(a.best_val_auc.to_bits(), b.best_val_auc.to_bits());
        for ((an, ae), (_, be)) in a.params.iter().zip(b.params.iter()) {
            assert!(
                ae.value
                    .iter()
                    .zip(be.value.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "tensor {} diverged between runs",
                an
            );
        }
        // Domain count follows the fold's train tables.
        assert_eq!(a.config.num_domains, 1);
        assert_eq!(a.params.get("dom.linear.w").shape(), [16, 1]);
    }

    #[test]
    fn train_fold_rejects_overlapping_groups() {
        let (rows, vocab, mut fold) = fold_fixture();
        fold.val_tables = vec!["t0".to_string()];
        let cfg = tiny_model_cfg(vocab.size());
        let err = train_fold(
            ModelKind::DatumWise,
            &fold,
            &rows,
            &vocab,
            &cfg,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("overlapping"));
    }

    #[test]
    fn train_fold_rejects_empty_splits() {
        let (rows, vocab, mut fold) = fold_fixture();
        fold.train_tables = vec!["absent".to_string()];
        let cfg = tiny_model_cfg(vocab.size());
        let err = train_fold(
            ModelKind::DatumWise,
            &fold,
            &rows,
            &vocab,
            &cfg,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty training split"));
    }

    #[test]
    fn cross_validation_produces_three_folds_and_aggregate() {
        let rows = toy_rows(3, 5);
        let vocab = build_vocab(&rows, 1).unwrap();
        let mut names: Vec<String> = rows.iter().map(|r| r.domain.clone()).collect();
        names.sort();
        names.dedup();
        let folds = crate::ingest::build_fold_plans(&names, 9).unwrap();
        let cfg = tiny_model_cfg(vocab.size());
        let tcfg = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out =
            run_cross_validation(ModelKind::DatumWise, &rows, &vocab, &folds, &cfg, &tcfg)
                .unwrap();
        assert_eq!(out.report.per_fold.len(), 3);
        assert_eq!(out.folds.len(), 3);
        // Every table appears as a test table exactly once.
        let mut tested: Vec<&String> = out
            .report
            .per_fold
            .iter()
            .flat_map(|f| f.per_table.keys())
            .collect();
        tested.sort();
        assert_eq!(tested.len(), 3);
        // Aggregate is recomputable from the fold entries.
        let aucs: Vec<f64> = out.report.per_fold.iter().map(|f| f.auc).collect();
        let (mean, _) = crate::metrics::aggregate(&aucs);
        assert!((out.report.aggregate.auc_mean - mean).abs() < 1e-15);
    }
}
