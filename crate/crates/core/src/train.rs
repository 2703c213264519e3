//! Optimisation: losses on `ln(p/kPa)`, AdamW, learning-rate schedules,
//! the two-phase fit with early stopping, and the hyperparameter grid.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::antoine::{BnMode, PA_PER_KPA};
use crate::dataio::VpDataset;
use crate::metrics::mape_i_from_ln;
use crate::model::{graph_from_smiles, Arch, GrappaModel, ModelError};
use crate::molgraph::MolGraph;
use crate::pooling::PoolingKind;
use crate::tensor::{BatchStats, Matrix, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("training needs at least two components for batch normalisation, got {0}")]
    TooFewComponents(usize),
    #[error("components {0:?} appear in both training and validation data")]
    Overlap(Vec<String>),
    #[error("non-finite value in epoch {epoch} ({phase}), batch {batch}: {source}")]
    NonFinite { epoch: usize, phase: Phase, batch: usize, source: TensorError },
    #[error("non-finite gradient for '{0}'")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean squared error.
pub fn loss_mse(pred: &[f64], exp: &[f64]) -> Result<f64> {
    check_pair(pred, exp)?;
    Ok(pred.iter().zip(exp).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute error.
pub fn loss_mae(pred: &[f64], exp: &[f64]) -> Result<f64> {
    check_pair(pred, exp)?;
    Ok(pred.iter().zip(exp).map(|(p, e)| (p - e).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean Huber loss: `r²/2` inside `|r| ≤ δ`, `δ(|r| − δ/2)` outside.
pub fn loss_huber(pred: &[f64], exp: &[f64], delta: f64) -> Result<f64> {
    check_pair(pred, exp)?;
    if !(delta > 0.0) {
        return Err(TrainError::Config("huber delta must be positive".into()));
    }
    Ok(pred.iter().zip(exp).map(|(p, e)| crate::tensor::huber(p - e, delta)).sum::<f64>() / pred.len() as f64)
}

fn check_pair(pred: &[f64], exp: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(TrainError::EmptySet("loss"));
    }
    if pred.len() != exp.len() {
        return Err(TrainError::Config(format!("length mismatch {} vs {}", pred.len(), exp.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamWState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    /// Advances the shared step counter; call once per update.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }
}

/// In-place AdamW update of one tensor with decoupled weight decay.
pub fn adamw_step(name: &str, param: &mut [f64], grad: &[f64], state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(name.to_string()));
    }
    let t = state.step.max(1) as i32;
    let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments { m: vec![0.0; param.len()], v: vec![0.0; param.len()] });
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for k in 0..param.len() {
        param[k] *= 1.0 - lr * cfg.weight_decay;
        mom.m[k] = b1 * mom.m[k] + (1.0 - b1) * grad[k];
        mom.v[k] = b2 * mom.v[k] + (1.0 - b2) * grad[k] * grad[k];
        let m_hat = mom.m[k] / c1;
        let v_hat = mom.v[k] / c2;
        param[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (PI * pct).cos())
}

/// One-cycle schedule: cosine rise from `max_lr/div` to `max_lr` over the
/// first `pct_start` of the steps, then cosine decay to `max_lr/final_div`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self { max_lr, total_steps, pct_start: 0.3, div: 25.0, final_div: 1e4 }
    }

    /// Step at which the rate equals `max_lr`.
    pub fn peak_step(&self) -> usize {
        ((self.total_steps.saturating_sub(1)) as f64 * self.pct_start).round() as usize
    }

    pub fn lr(&self, step: usize) -> f64 {
        let last = self.total_steps.saturating_sub(1);
        let step = step.min(last);
        let peak = self.peak_step();
        if step <= peak {
            let pct = if peak == 0 { 1.0 } else { step as f64 / peak as f64 };
            cos_anneal(self.max_lr / self.div, self.max_lr, pct)
        } else {
            let pct = (step - peak) as f64 / (last - peak) as f64;
            cos_anneal(self.max_lr, self.max_lr / self.final_div, pct)
        }
    }
}

/// `one_cycle_lr(step, total_steps, max_lr)` with the default shape.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> f64 {
    OneCycle::new(max_lr, total_steps).lr(step)
}

/// Reduce-on-plateau for a metric to be minimised.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset the counter.
    pub threshold: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, threshold: 1e-4, min_lr: 0.0, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one epoch's metric and returns the rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - self.threshold) {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs >= self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

/// Hyperparameter value sets searched by [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub gat_layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub hidden_layers: Vec<usize>,
    pub pooling: Vec<PoolingKind>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            gat_layers: vec![2, 3, 4, 5],
            heads: vec![1, 2, 3, 4, 5],
            hidden_layers: vec![1, 2, 3],
            pooling: vec![PoolingKind::Sum, PoolingKind::Interaction],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub gat_layers: usize,
    pub heads: usize,
    pub hidden_layers: usize,
    pub pooling: PoolingKind,
}

impl GridSpec {
    /// All combinations in lexicographic order of the lists.
    pub fn cells(&self) -> Result<Vec<GridCell>> {
        let allowed = GridSpec::default();
        let subset = |name: &str, v: &[usize], of: &[usize]| -> Result<()> {
            match v.iter().find(|x| !of.contains(x)) {
                Some(x) => Err(TrainError::Config(format!("grid {name} value {x} not in {of:?}"))),
                None if v.is_empty() => Err(TrainError::Config(format!("grid {name} is empty"))),
                None => Ok(()),
            }
        };
        subset("gat_layers", &self.gat_layers, &allowed.gat_layers)?;
        subset("heads", &self.heads, &allowed.heads)?;
        subset("hidden_layers", &self.hidden_layers, &allowed.hidden_layers)?;
        if self.pooling.is_empty() {
            return Err(TrainError::Config("grid pooling is empty".into()));
        }
        let mut out = Vec::new();
        for &gat_layers in &self.gat_layers {
            for &heads in &self.heads {
                for &hidden_layers in &self.hidden_layers {
                    for &pooling in &self.pooling {
                        out.push(GridCell { gat_layers, heads, hidden_layers, pooling });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Molecules per mini-batch.
    pub batch_size: usize,
    /// Phase 1: MSE with one-cycle schedule.
    pub warmup_epochs: usize,
    /// Phase 2: Huber with plateau schedule.
    pub main_epochs: usize,
    pub huber_delta: f64,
    pub max_lr: f64,
    pub one_cycle_pct_start: f64,
    pub one_cycle_div: f64,
    pub one_cycle_final_div: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub adamw: AdamWConfig,
    /// Stop after this many epochs without a new best validation score.
    pub early_stopping_patience: Option<usize>,
    pub seed: u64,
    pub arch: Arch,
    pub grid: GridSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            warmup_epochs: 100,
            main_epochs: 200,
            huber_delta: 0.5,
            max_lr: 1e-3,
            one_cycle_pct_start: 0.3,
            one_cycle_div: 25.0,
            one_cycle_final_div: 1e4,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            adamw: AdamWConfig::default(),
            early_stopping_patience: None,
            seed: 0,
            arch: Arch::default(),
            grid: GridSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("huber_delta", self.huber_delta),
            ("max_lr", self.max_lr),
            ("plateau_factor", self.plateau_factor),
            ("one_cycle_div", self.one_cycle_div),
            ("one_cycle_final_div", self.one_cycle_final_div),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2 for batch normalisation".into()));
        }
        if self.warmup_epochs + self.main_epochs == 0 {
            return Err(TrainError::Config("no epochs to run".into()));
        }
        if !(0.0..=1.0).contains(&self.one_cycle_pct_start) {
            return Err(TrainError::Config("one_cycle_pct_start must lie in [0, 1]".into()));
        }
        if !(self.plateau_factor < 1.0) {
            return Err(TrainError::Config("plateau_factor must be below 1".into()));
        }
        self.arch.validate()?;
        Ok(())
    }

    fn one_cycle(&self, total_steps: usize) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            total_steps,
            pct_start: self.one_cycle_pct_start,
            div: self.one_cycle_div,
            final_div: self.one_cycle_final_div,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mse,
    Huber,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Huber => "huber",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Rate used for the epoch's last update.
    pub lr: f64,
    /// Point-weighted mean of the batch losses.
    pub train_loss: f64,
    #[serde(rename = "valid_MAPE_i")]
    pub valid_mape_i: f64,
}

pub fn write_history_csv(history: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "phase", "lr", "train_loss", "valid_MAPE_i"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.phase.to_string(), r.lr.to_string(), r.train_loss.to_string(), r.valid_mape_i.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Weights from the epoch with the lowest validation MAPE_i.
    pub best: GrappaModel,
    pub best_epoch: usize,
    pub best_valid_mape_i: f64,
    pub history: Vec<EpochRecord>,
    /// Weights after the last epoch that ran.
    pub last: GrappaModel,
}

/// One component ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub graph: MolGraph,
    pub temps: Vec<f64>,
    pub ln_p: Vec<f64>,
}

/// Featurises each component once.
pub fn prepare(ds: &VpDataset) -> Result<Vec<Prepared>> {
    ds.components()
        .into_iter()
        .map(|(id, idx)| {
            let graph = graph_from_smiles(&ds.points[idx[0]].smiles)?;
            Ok(Prepared {
                id: id.to_string(),
                graph,
                temps: idx.iter().map(|&i| ds.points[i].temperature_k).collect(),
                ln_p: idx.iter().map(|&i| (ds.points[i].pressure_pa / PA_PER_KPA).ln()).collect(),
            })
        })
        .collect()
}

/// Validation MAPE_i of `model` in inference mode.
pub fn evaluate_mape_i(model: &GrappaModel, set: &[Prepared]) -> Result<f64> {
    let graphs: Vec<&MolGraph> = set.iter().map(|p| &p.graph).collect();
    let params = model.predict_graphs(&graphs)?;
    let mut pred = Vec::new();
    let mut exp = Vec::new();
    for (p, a) in set.iter().zip(&params) {
        for (&t, &y) in p.temps.iter().zip(&p.ln_p) {
            pred.push(a.ln_vapor_pressure_floored(t));
            exp.push(y);
        }
    }
    mape_i_from_ln(&pred, &exp).ok_or(TrainError::EmptySet("validation"))
}

/// Splits a shuffled order into batches of at least two molecules.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("has a previous batch").extend(tail);
    }
    out
}

/// Loss, gradients and batch-norm statistics of one training batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Point-averaged loss on `ln(p/kPa)`.
    pub loss: f64,
    pub points: usize,
    /// Keyed by parameter name.
    pub grads: BTreeMap<String, Matrix>,
    pub batch_stats: Vec<BatchStats>,
}

/// Forward and backward pass for one batch in training mode.
pub fn batch_gradients(model: &GrappaModel, batch: &[&Prepared], phase: Phase, delta: f64) -> Result<BatchGradients> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let graphs: Vec<&MolGraph> = batch.iter().map(|p| &p.graph).collect();
    let out = model.forward(&mut tape, &vars, &graphs, BnMode::Train)?;
    let mut owner = Vec::new();
    let mut temps = Vec::new();
    let mut target = Vec::new();
    for (k, p) in batch.iter().enumerate() {
        owner.extend(std::iter::repeat_n(k, p.temps.len()));
        temps.extend_from_slice(&p.temps);
        target.extend_from_slice(&p.ln_p);
    }
    let pred = tape.antoine_ln_p(out.params, &owner, &temps)?;
    let loss = match phase {
        Phase::Mse => tape.mse_loss(pred, &target)?,
        Phase::Huber => tape.huber_loss(pred, &target, delta)?,
    };
    let value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    let by_name = tape.params().iter().filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone()))).collect();
    Ok(BatchGradients { loss: value, points: target.len(), grads: by_name, batch_stats: out.batch_stats })
}

fn apply_update(
    model: &mut GrappaModel,
    grads: &BTreeMap<String, Matrix>,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.begin_step();
    let mut failure = None;
    model.visit_mut(&mut |name, m| {
        if failure.is_some() {
            return;
        }
        if let Some(g) = grads.get(&name) {
            if let Err(e) = adamw_step(&name, m.as_mut_slice(), g.as_slice(), state, lr, cfg) {
                failure = Some(e);
            }
        }
    });
    failure.map_or(Ok(()), Err)
}

/// Two-phase training with best-on-validation checkpointing.
///
/// Phase 1 runs `warmup_epochs` of MSE under the one-cycle schedule; phase 2
/// runs `main_epochs` of Huber loss under reduce-on-plateau, restarting
/// from `max_lr` with fresh optimiser moments. The model is scored on the
/// validation set after every epoch.
pub fn fit(model: GrappaModel, train: &VpDataset, valid: &VpDataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let train_set = prepare(train)?;
    let valid_set = prepare(valid)?;
    fit_prepared(model, &train_set, &valid_set, cfg)
}

pub fn fit_prepared(mut model: GrappaModel, train_set: &[Prepared], valid_set: &[Prepared], cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    if train_set.len() < 2 {
        return Err(TrainError::TooFewComponents(train_set.len()));
    }
    let train_ids: std::collections::BTreeSet<&str> = train_set.iter().map(|p| p.id.as_str()).collect();
    let overlap: Vec<String> = valid_set.iter().filter(|p| train_ids.contains(p.id.as_str())).map(|p| p.id.clone()).collect();
    if !overlap.is_empty() {
        return Err(TrainError::Overlap(overlap));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = batches(&(0..train_set.len()).collect::<Vec<_>>(), cfg.batch_size).len();
    let cycle = cfg.one_cycle(cfg.warmup_epochs * steps_per_epoch);
    let mut plateau = Plateau { threshold: cfg.plateau_threshold, ..Plateau::new(cfg.max_lr, cfg.plateau_factor, cfg.plateau_patience) };
    let mut state = AdamWState::default();
    let mut history = Vec::new();
    let mut best: Option<(GrappaModel, usize, f64)> = None;
    let mut global_step = 0usize;
    let mut since_best = 0usize;

    let total = cfg.warmup_epochs + cfg.main_epochs;
    for epoch in 1..=total {
        let phase = if epoch <= cfg.warmup_epochs { Phase::Mse } else { Phase::Huber };
        if epoch == cfg.warmup_epochs + 1 {
            state = AdamWState::default();
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut points = 0usize;
        let mut lr = 0.0;
        for (b, batch) in batches(&order, cfg.batch_size).iter().enumerate() {
            lr = match phase {
                Phase::Mse => cycle.lr(global_step),
                Phase::Huber => plateau.lr,
            };
            let members: Vec<&Prepared> = batch.iter().map(|&i| &train_set[i]).collect();
            let g = batch_gradients(&model, &members, phase, cfg.huber_delta).map_err(|e| match e {
                TrainError::Tensor(source) | TrainError::Model(ModelError::Tensor(source)) => {
                    TrainError::NonFinite { epoch, phase, batch: b, source }
                }
                other => other,
            })?;
            apply_update(&mut model, &g.grads, &mut state, lr, &cfg.adamw)?;
            model.head.update_running_stats(&g.batch_stats);
            loss_sum += g.loss * g.points as f64;
            points += g.points;
            if phase == Phase::Mse {
                global_step += 1;
            }
        }
        let valid_mape_i = evaluate_mape_i(&model, valid_set)?;
        if phase == Phase::Huber {
            plateau.step(valid_mape_i);
        }
        history.push(EpochRecord { epoch, phase, lr, train_loss: loss_sum / points as f64, valid_mape_i });
        if best.as_ref().is_none_or(|(_, _, m)| valid_mape_i < *m) {
            best = Some((model.clone(), epoch, valid_mape_i));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.early_stopping_patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let (best, best_epoch, best_valid_mape_i) = best.expect("at least one epoch ran");
    Ok(FitOutcome { best, best_epoch, best_valid_mape_i, history, last: model })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub rank: usize,
    pub cell: GridCell,
    pub trainable_parameters: usize,
    pub best_epoch: usize,
    #[serde(rename = "valid_MAPE_i")]
    pub valid_mape_i: f64,
}

/// Trains every grid cell from the same seed and ranks by validation
/// MAPE_i (ties broken by grid order). `jobs` threads run cells in parallel;
/// results do not depend on it.
pub fn grid_search(cfg: &TrainConfig, train: &VpDataset, valid: &VpDataset, jobs: usize) -> Result<Vec<GridResult>> {
    cfg.validate()?;
    let cells = cfg.grid.cells()?;
    let train_set = prepare(train)?;
    let valid_set = prepare(valid)?;
    let run = |cell: &GridCell| -> Result<GridResult> {
        let arch = Arch {
            gat_layers: cell.gat_layers,
            heads: cell.heads,
            hidden_layers: cell.hidden_layers,
            pooling: cell.pooling,
            ..cfg.arch.clone()
        };
        let cell_cfg = TrainConfig { arch: arch.clone(), ..cfg.clone() };
        let model = GrappaModel::new(arch, cfg.seed)?;
        let params = model.trainable_parameter_count();
        let out = fit_prepared(model, &train_set, &valid_set, &cell_cfg)?;
        Ok(GridResult {
            rank: 0,
            cell: *cell,
            trainable_parameters: params,
            best_epoch: out.best_epoch,
            valid_mape_i: out.best_valid_mape_i,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| TrainError::Config(e.to_string()))?;
    let results: Vec<Result<GridResult>> = pool.install(|| cells.par_iter().map(run).collect());
    let mut results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[a].valid_mape_i.total_cmp(&results[b].valid_mape_i).then(a.cmp(&b)));
    for (rank, &i) in order.iter().enumerate() {
        results[i].rank = rank + 1;
    }
    results.sort_by_key(|r| r.rank);
    Ok(results)
}

pub fn write_grid_csv(results: &[GridResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rank", "gat_layers", "heads", "hidden_layers", "pooling", "trainable_parameters", "best_epoch", "valid_MAPE_i"])?;
    for r in results {
        w.write_record([
            r.rank.to_string(),
            r.cell.gat_layers.to_string(),
            r.cell.heads.to_string(),
            r.cell.hidden_layers.to_string(),
            r.cell.pooling.to_string(),
            r.trainable_parameters.to_string(),
            r.best_epoch.to_string(),
            r.valid_mape_i.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic::synthetic_dataset;
    use crate::dataio::Split;

    #[test]
    fn loss_values() {
        assert_eq!(loss_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(loss_mae(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(loss_mse(&[0.5], &[0.0]).unwrap(), 0.25);
        assert!((loss_huber(&[0.3], &[0.0], 0.5).unwrap() - 0.045).abs() < 1e-15);
        assert!((loss_huber(&[1.0], &[0.0], 0.5).unwrap() - 0.375).abs() < 1e-15);
        assert!(loss_mse(&[], &[]).is_err());
        assert!(loss_huber(&[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn huber_is_c1_at_threshold() {
        let d = 0.5;
        let h = |r: f64| loss_huber(&[r], &[0.0], d).unwrap();
        assert!((h(d) - 0.125).abs() < 1e-15);
        let eps = 1e-7;
        let left = (h(d) - h(d - eps)) / eps;
        let right = (h(d + eps) - h(d)) / eps;
        assert!((left - right).abs() < 1e-6, "{left} vs {right}");
        for r in [-0.4, -0.1, 0.0, 0.2, 0.5] {
            assert!((h(r) - 0.5 * r * r).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_reference_step() {
        // f(x) = x², x = 1 → g = 2; m̂ = g, v̂ = g², update lr·g/(|g| + eps)
        let cfg = AdamWConfig::default();
        let mut state = AdamWState::default();
        state.begin_step();
        let mut x = [1.0];
        adamw_step("x", &mut x, &[2.0], &mut state, 0.1, &cfg).unwrap();
        let expect = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((x[0] - expect).abs() < 1e-15);
        // second step by hand
        state.begin_step();
        let g2 = 2.0 * x[0];
        let m = 0.9 * 0.2 + 0.1 * g2;
        let v = 0.999 * 0.004 + 0.001 * g2 * g2;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expect2 = x[0] * (1.0 - 0.001) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        adamw_step("x", &mut x, &[g2], &mut state, 0.1, &cfg).unwrap();
        assert!((x[0] - expect2).abs() < 1e-15);
    }

    #[test]
    fn adamw_degenerate_cases() {
        let no_decay = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut state = AdamWState::default();
        state.begin_step();
        let mut x = [0.3, -2.0];
        adamw_step("x", &mut x, &[0.0, 0.0], &mut state, 0.01, &no_decay).unwrap();
        assert_eq!(x, [0.3, -2.0]);
        let mut state = AdamWState::default();
        state.begin_step();
        adamw_step("x", &mut x, &[0.0, 0.0], &mut state, 0.01, &AdamWConfig::default()).unwrap();
        assert_eq!(x, [0.3 * (1.0 - 0.01 * 0.01), -2.0 * (1.0 - 0.01 * 0.01)]);
        assert!(adamw_step("x", &mut x, &[f64::NAN, 0.0], &mut state, 0.01, &no_decay).is_err());
    }

    #[test]
    fn one_cycle_shape() {
        let s = OneCycle::new(1e-3, 101);
        assert_eq!(s.peak_step(), 30);
        assert_eq!(s.lr(30), 1e-3);
        assert!((s.lr(0) - 1e-3 / 25.0).abs() < 1e-18);
        assert!((s.lr(100) - 1e-7).abs() < 1e-18);
        for k in 0..30 {
            assert!(s.lr(k + 1) > s.lr(k));
        }
        for k in 30..100 {
            assert!(s.lr(k + 1) < s.lr(k));
        }
        assert_eq!(one_cycle_lr(0, 1, 0.5), 0.5);
        let peak = OneCycle::new(2e-3, 1000).peak_step();
        assert_eq!(one_cycle_lr(peak, 1000, 2e-3), 2e-3);
    }

    #[test]
    fn plateau_semantics() {
        let mut p = Plateau::new(1.0, 0.5, 5);
        for k in 0..20 {
            assert_eq!(p.step(10.0 - k as f64), 1.0);
        }
        let mut p = Plateau::new(1.0, 0.5, 5);
        let lrs: Vec<f64> = (0..6).map(|_| p.step(3.0)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.5]);
        let lrs: Vec<f64> = (0..5).map(|_| p.step(3.0)).collect();
        assert_eq!(lrs, vec![0.5, 0.5, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn grid_cells() {
        assert_eq!(GridSpec::default().cells().unwrap().len(), 120);
        let bad = GridSpec { heads: vec![6], ..GridSpec::default() };
        assert!(bad.cells().is_err());
    }

    #[test]
    fn batches_never_leave_a_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order, 512).len(), 1);
    }

    /// Linear model `y = w·x` under the quadratic loss: one small step
    /// must lower the loss.
    #[test]
    fn one_step_decreases_convex_loss() {
        let xs = [1.0, 2.0, -1.0, 0.5];
        let ys = [2.0, 4.1, -2.2, 1.0];
        let loss = |w: f64| xs.iter().zip(&ys).map(|(x, y)| (w * x - y).powi(2)).sum::<f64>() / 4.0;
        let grad = |w: f64| xs.iter().zip(&ys).map(|(x, y)| 2.0 * (w * x - y) * x).sum::<f64>() / 4.0;
        let mut w = [0.0];
        let mut state = AdamWState::default();
        state.begin_step();
        let before = loss(w[0]);
        adamw_step("w", &mut w, &[grad(0.0)], &mut state, 1e-2, &AdamWConfig::default()).unwrap();
        assert!(loss(w[0]) < before);
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            warmup_epochs: 2,
            main_epochs: 3,
            arch: Arch { gat_layers: 2, heads: 1, hidden_layers: 1, ..Arch::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_is_reproducible_and_keeps_the_best() {
        let (ds, _) = synthetic_dataset(5);
        let (train, valid) = (ds.subset(Split::Train), ds.subset(Split::Valid));
        let cfg = small_config();
        let run = || fit(GrappaModel::new(cfg.arch.clone(), 1).unwrap(), &train, &valid, &cfg).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert_eq!(a.history.len(), 5);
        assert_eq!(a.history.iter().filter(|h| h.phase == Phase::Mse).count(), 2);
        for h in &a.history {
            assert!(a.best_valid_mape_i <= h.valid_mape_i);
        }
        let recomputed = evaluate_mape_i(&a.best, &prepare(&valid).unwrap()).unwrap();
        assert_eq!(recomputed, a.best_valid_mape_i);
    }

    #[test]
    fn fit_preconditions() {
        let (ds, _) = synthetic_dataset(5);
        let (train, valid) = (ds.subset(Split::Train), ds.subset(Split::Valid));
        let cfg = small_config();
        let m = || GrappaModel::new(cfg.arch.clone(), 0).unwrap();
        assert!(matches!(fit(m(), &train, &VpDataset::default(), &cfg), Err(TrainError::EmptySet(_))));
        assert!(matches!(fit(m(), &train, &train, &cfg), Err(TrainError::Overlap(_))));
        let one = train.filter_components(|c| c == "alkane_c05");
        assert!(matches!(fit(m(), &one, &valid, &cfg), Err(TrainError::TooFewComponents(1))));
        let bad = TrainConfig { batch_size: 1, ..cfg.clone() };
        assert!(matches!(fit(m(), &train, &valid, &bad), Err(TrainError::Config(_))));
    }

    #[test]
    fn early_stopping_halts() {
        let (ds, _) = synthetic_dataset(5);
        let cfg = TrainConfig { max_lr: 1e-9, main_epochs: 30, early_stopping_patience: Some(2), ..small_config() };
        let out = fit(GrappaModel::new(cfg.arch.clone(), 0).unwrap(), &ds.subset(Split::Train), &ds.subset(Split::Valid), &cfg).unwrap();
        assert!(out.history.len() < 32);
        assert!(out.history.len() - out.best_epoch <= 2);
    }

    #[test]
    fn single_cell_grid_equals_single_fit() {
        let (ds, _) = synthetic_dataset(5);
        let (train, valid) = (ds.subset(Split::Train), ds.subset(Split::Valid));
        let cfg = TrainConfig {
            grid: GridSpec { gat_layers: vec![2], heads: vec![1], hidden_layers: vec![1], pooling: vec![PoolingKind::Interaction] },
            ..small_config()
        };
        let g = grid_search(&cfg, &train, &valid, 2).unwrap();
        assert_eq!(g.len(), 1);
        let single = fit(GrappaModel::new(cfg.arch.clone(), cfg.seed).unwrap(), &train, &valid, &cfg).unwrap();
        assert_eq!(g[0].valid_mape_i, single.best_valid_mape_i);
        assert_eq!(g[0].best_epoch, single.best_epoch);
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        write_history_csv(&[EpochRecord { epoch: 1, phase: Phase::Mse, lr: 0.1, train_loss: 2.0, valid_mape_i: 3.0 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,phase,lr,train_loss,valid_MAPE_i\n1,mse,0.1,2,3\n");
    }

    #[test]
    fn config_json_defaults_and_rejects_unknown_fields() {
        let c: TrainConfig = serde_json::from_str("{\"main_epochs\": 100}").unwrap();
        assert_eq!(c.main_epochs, 100);
        assert_eq!(c.batch_size, 512);
        assert!(serde_json::from_str::<TrainConfig>("{\"epochz\": 1}").is_err());
        let c: TrainConfig = serde_json::from_str("{\"adamw\": {\"weight_decay\": 0.0}, \"arch\": {\"heads\": 3}}").unwrap();
        assert_eq!(c.adamw.eps, 1e-8);
        assert_eq!(c.arch.gat_layers, 4);
        assert!(serde_json::from_str::<TrainConfig>("{\"arch\": {\"head\": 3}}").is_err());
    }
}
