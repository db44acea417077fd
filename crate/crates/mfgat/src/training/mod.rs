//! Optimization, evaluation, cross-validation, and the view ablation.
//!
//! Training runs one graph at a time, accumulating gradients over a batch
//! before each bias-corrected Adam update. Validation accuracy drives early
//! stopping with a patience window; the parameters of the best validation
//! epoch are restored before the final test evaluation. Everything is
//! seeded: identical `(dataset, config, seed)` yields an identical
//! [`RunReport`] byte for byte.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, RngStream, Tape, Tensor};
use crate::datasets::{split_dataset, Dataset, GraphRecord, SplitSpec};
use crate::model::{build_model, classify_forward, ModelConfig, ModelParams};
use crate::{Error, Result};

/// Adam constants; only the learning rate is commonly changed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self::with_lr(0.01)
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            first: params
                .iter()
                .map(|(_, t, _)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
            second: params
                .iter()
                .map(|(_, t, _)| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over all non-frozen parameters.
///
/// `grads` must align with the parameter order. Rejects non-finite
/// gradients, naming the offending parameter.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
    for i in 0..params.len() {
        if !grads[i].all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {}",
                params.name(i)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        if params.is_frozen(i) {
            continue;
        }
        assert_eq!(
            grads[i].shape(),
            params.tensor(i).shape(),
            "gradient shape mismatch for {}",
            params.name(i)
        );
        let m = state.first[i].values_mut();
        let v = state.second[i].values_mut();
        let theta = params.tensor_mut(i).values_mut();
        for ((m, v), (theta, &g)) in m
            .iter_mut()
            .zip(v.iter_mut())
            .zip(theta.iter_mut().zip(grads[i].values()))
        {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Training protocol knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub split: SplitSpec,
    pub seed: u64,
    pub cv_folds: usize,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            max_epochs: 200,
            lr: 0.01,
            batch_size: 32,
            patience: 20,
            split: SplitSpec::new(0.7, 0.1, 0.2, seed),
            seed,
            cv_folds: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::Validation("max_epochs must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Validation("patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Validation(format!("lr must be positive, got {}", self.lr)));
        }
        self.split.validate()
    }
}

/// Index lists into a dataset. `test` may be empty (cross-validation folds).
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn from_spec(ds: &Dataset, spec: &SplitSpec) -> Result<Self> {
        let (train, val, test) = split_dataset(ds, spec)?;
        Ok(Splits { train, val, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Everything one training run produced.
///
/// Serialization is deterministic; the wall time lives only in the CSV
/// summaries so that identical `(config, seed)` runs serialize to identical
/// bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    /// Number of epochs actually run (1-based count).
    pub stopped_epoch: usize,
    /// Epoch whose parameters were kept (1-based; ties to the earliest).
    pub best_val_epoch: usize,
    pub test_accuracy: Option<f64>,
    pub diverged: bool,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

pub const SUMMARY_CSV_HEADER: &str =
    "model,dataset,views,seed,test_accuracy,stopped_epoch,wall_time_s";

pub fn summary_csv_row(
    model: &str,
    dataset: &str,
    views: usize,
    seed: u64,
    test_accuracy: f64,
    stopped_epoch: usize,
    wall_time_s: f64,
) -> String {
    format!(
        "{model},{dataset},{views},{seed},{test_accuracy:.4},{stopped_epoch},{wall_time_s:.3}"
    )
}

/// Fraction of graphs whose argmax logit equals the label, computed in eval
/// mode; ties break toward the lower class index.
pub fn evaluate_accuracy(params: &ModelParams, graphs: &[&GraphRecord]) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::InvalidInput(
            "evaluate_accuracy on an empty graph list".into(),
        ));
    }
    let mut rng = RngStream::new(0); // eval mode consumes no randomness
    let mut correct = 0usize;
    for graph in graphs {
        let mut tape = Tape::new();
        let out = classify_forward(&mut tape, graph, params, Mode::Eval, &mut rng)?;
        if argmax(tape.value(out.logits).row(0)) == graph.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / graphs.len() as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Train with per-graph forward/backward and gradient accumulation.
///
/// After every epoch the validation accuracy is measured; training stops
/// when it has not improved for `patience` epochs or at `max_epochs`. The
/// returned parameters are those of the best validation epoch. A non-finite
/// loss or gradient aborts the run with the best parameters so far and
/// marks the report as diverged.
pub fn fit(
    ds: &Dataset,
    splits: &Splits,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelParams, RunReport)> {
    train_cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::InvalidInput(
            "fit requires non-empty train and validation splits".into(),
        ));
    }
    let started = Instant::now();
    let master = RngStream::new(train_cfg.seed);
    let mut init_rng = master.derive(1);
    let mut train_rng = master.derive(2);

    let mut params = build_model(model_cfg, &mut init_rng)?;
    let mut adam = AdamState::new(&params, AdamHyper::with_lr(train_cfg.lr));

    let val_graphs: Vec<&GraphRecord> = splits.val.iter().map(|&i| &ds.graphs[i]).collect();
    let mut order: Vec<usize> = splits.train.to_vec();

    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut diverged = false;

    'training: for epoch in 1..=train_cfg.max_epochs {
        train_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;

        for batch in order.chunks(train_cfg.batch_size) {
            let mut grad_acc: Vec<Tensor> = params
                .iter()
                .map(|(_, t, _)| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            let mut batch_ok = true;
            for &gi in batch {
                let graph = &ds.graphs[gi];
                let mut tape = Tape::new();
                let out = classify_forward(&mut tape, graph, &params, Mode::Train, &mut train_rng)?;
                let logits = tape.value(out.logits).row(0).to_vec();
                let loss = tape.cross_entropy(out.logits, graph.label)?;
                let loss_val = tape.value(loss).item();
                if !loss_val.is_finite() {
                    batch_ok = false;
                    break;
                }
                epoch_loss += loss_val;
                if argmax(&logits) == graph.label {
                    epoch_correct += 1;
                }
                let grads = tape.backward(loss)?;
                for (acc, &var) in grad_acc.iter_mut().zip(&out.param_vars) {
                    acc.add_scaled(grads.wrt(var), 1.0);
                }
            }
            if !batch_ok {
                diverged = true;
                break 'training;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                g.scale_in_place(scale);
            }
            if adam_step(&mut params, &grad_acc, &mut adam).is_err() {
                diverged = true;
                break 'training;
            }
        }

        let train_loss = epoch_loss / splits.train.len() as f64;
        let train_acc = epoch_correct as f64 / splits.train.len() as f64;
        let val_acc = evaluate_accuracy(&params, &val_graphs)?;
        epochs.push(EpochStats {
            train_loss,
            train_acc,
            val_acc,
        });

        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if epoch - best_epoch >= train_cfg.patience {
            break;
        }
    }

    let stopped_epoch = epochs.len();
    if best_epoch == 0 {
        // Divergence before the first epoch completed: keep the initial
        // parameters as the last good checkpoint.
        best_epoch = stopped_epoch.max(1);
    }
    let params = best_params;

    let test_accuracy = if splits.test.is_empty() {
        None
    } else {
        let test_graphs: Vec<&GraphRecord> = splits.test.iter().map(|&i| &ds.graphs[i]).collect();
        Some(evaluate_accuracy(&params, &test_graphs)?)
    };

    let report = RunReport {
        model: params.config.kind.as_str().to_string(),
        dataset: ds.name.clone(),
        seed: train_cfg.seed,
        model_config: params.config.clone(),
        train_config: train_cfg.clone(),
        epochs,
        stopped_epoch,
        best_val_epoch: best_epoch,
        test_accuracy,
        diverged,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// Outcome of a k-fold grid search plus the final retrained model.
#[derive(Debug)]
pub struct CvOutcome {
    pub best_index: usize,
    /// `fold_val_accuracies[config][fold]` = best validation accuracy.
    pub fold_val_accuracies: Vec<Vec<f64>>,
    pub mean_val_accuracies: Vec<f64>,
    pub params: ModelParams,
    pub report: RunReport,
}

/// K-fold cross-validation over the train+val portion of the split.
///
/// Selects the config with the highest mean fold-validation accuracy (ties
/// to the first in grid order), then retrains it on the standard split.
pub fn cross_validate(
    ds: &Dataset,
    grid: &[ModelConfig],
    train_cfg: &TrainConfig,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty configuration grid".into()));
    }
    if train_cfg.cv_folds < 2 {
        return Err(Error::InvalidInput(format!(
            "cv_folds must be at least 2, got {}",
            train_cfg.cv_folds
        )));
    }
    let standard = Splits::from_spec(ds, &train_cfg.split)?;
    let mut pool: Vec<usize> = standard
        .train
        .iter()
        .chain(&standard.val)
        .copied()
        .collect();
    if pool.len() < train_cfg.cv_folds {
        return Err(Error::InvalidInput(format!(
            "{} graphs cannot fill {} folds",
            pool.len(),
            train_cfg.cv_folds
        )));
    }
    RngStream::new(train_cfg.seed).derive(3).shuffle(&mut pool);

    let k = train_cfg.cv_folds;
    let fold_bounds: Vec<(usize, usize)> = (0..k)
        .map(|f| (f * pool.len() / k, (f + 1) * pool.len() / k))
        .collect();

    let mut fold_val_accuracies = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut accs = Vec::with_capacity(k);
        for &(lo, hi) in &fold_bounds {
            let val: Vec<usize> = pool[lo..hi].to_vec();
            let train: Vec<usize> = pool[..lo].iter().chain(&pool[hi..]).copied().collect();
            let folds = Splits {
                train,
                val,
                test: Vec::new(),
            };
            let (_, report) = fit(ds, &folds, cfg, train_cfg)?;
            accs.push(report.epochs[report.best_val_epoch - 1].val_acc);
        }
        fold_val_accuracies.push(accs);
    }
    let mean_val_accuracies: Vec<f64> = fold_val_accuracies
        .iter()
        .map(|accs| accs.iter().sum::<f64>() / accs.len() as f64)
        .collect();
    let mut best_index = 0;
    for (i, &m) in mean_val_accuracies.iter().enumerate() {
        if m > mean_val_accuracies[best_index] {
            best_index = i;
        }
    }
    let (params, report) = fit(ds, &standard, &grid[best_index], train_cfg)?;
    Ok(CvOutcome {
        best_index,
        fold_val_accuracies,
        mean_val_accuracies,
        params,
        report,
    })
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty slice");
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub views: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub stopped_epoch: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub views: usize,
    pub cells: Vec<AblationCell>,
    pub median_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Median accuracy for a given view count, if that row exists.
    pub fn median_for(&self, views: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.views == views)
            .map(|r| r.median_accuracy)
    }
}

/// Train one `(views, seed)` cell and return its test accuracy.
fn run_ablation_cell(
    ds: &Dataset,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    views: usize,
    seed: u64,
) -> Result<AblationCell> {
    let mut cfg = base.clone();
    cfg.num_views = views;
    let mut tcfg = train_cfg.clone();
    tcfg.seed = seed;
    tcfg.split.seed = seed;
    let splits = Splits::from_spec(ds, &tcfg.split)?;
    let (_, report) = fit(ds, &splits, &cfg, &tcfg)?;
    Ok(AblationCell {
        views,
        seed,
        test_accuracy: report.test_accuracy.unwrap_or(0.0),
        stopped_epoch: report.stopped_epoch,
        wall_time_s: report.wall_time_s,
    })
}

/// Sweep view counts across seeds and report per-seed and median test
/// accuracies, rows sorted by view count. `jobs > 1` fans the independent
/// cells out over that many worker threads; results are identical to the
/// sequential order because every cell is fully seeded.
pub fn ablate_views(
    ds: &Dataset,
    base: &ModelConfig,
    view_counts: &[usize],
    seeds: &[u64],
    train_cfg: &TrainConfig,
    jobs: usize,
) -> Result<AblationTable> {
    if view_counts.is_empty() {
        return Err(Error::InvalidInput("no view counts requested".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidInput("no seeds requested".into()));
    }
    let mut counts = view_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();

    let cells: Vec<(usize, u64)> = counts
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = run_cells(ds, base, train_cfg, &cells, jobs)?;

    let rows = counts
        .iter()
        .map(|&m| {
            let cells: Vec<AblationCell> = results
                .iter()
                .filter(|c| c.views == m)
                .cloned()
                .collect();
            let accs: Vec<f64> = cells.iter().map(|c| c.test_accuracy).collect();
            AblationRow {
                views: m,
                median_accuracy: median(&accs),
                cells,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}

fn run_cells(
    ds: &Dataset,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    cells: &[(usize, u64)],
    jobs: usize,
) -> Result<Vec<AblationCell>> {
    let jobs = jobs.max(1).min(cells.len().max(1));
    if jobs == 1 {
        return cells
            .iter()
            .map(|&(m, s)| run_ablation_cell(ds, base, train_cfg, m, s))
            .collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<AblationCell>>>> =
        cells.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let (m, s) = cells[i];
                let out = run_ablation_cell(ds, base, train_cfg, m, s);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("cell completed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn adam_first_step_is_approximately_lr() {
        let mut cfg = ModelConfig::new(ModelKind::Gcn, 1, 2);
        cfg.hidden_dim = 1;
        cfg.num_layers = 1;
        let mut params = build_model(&cfg, &mut RngStream::new(1)).unwrap();
        params.set("gcn.0.weight", Tensor::zeros(1, 1));
        let mut adam = AdamState::new(&params, AdamHyper::default());
        let grads: Vec<Tensor> = params
            .iter()
            .map(|(_, t, _)| Tensor::filled(t.rows(), t.cols(), 1.0))
            .collect();
        adam_step(&mut params, &grads, &mut adam).unwrap();
        // Bias correction makes the first update exactly lr/(1 + eps').
        let theta = params.get("gcn.0.weight").item();
        assert!((theta + 0.01).abs() < 1e-6, "theta {theta}");
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let cfg = ModelConfig::new(ModelKind::Gcn, 2, 2);
        let mut params = build_model(&cfg, &mut RngStream::new(2)).unwrap();
        let before = params.clone();
        let mut adam = AdamState::new(&params, AdamHyper::default());
        let grads: Vec<Tensor> = params
            .iter()
            .map(|(_, t, _)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut adam).unwrap();
        }
        for ((_, a, _), (_, b, _)) in params.iter().zip(before.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adam_equal_gradients_give_equal_updates() {
        let mut cfg = ModelConfig::new(ModelKind::Gcn, 2, 2);
        cfg.hidden_dim = 2;
        cfg.num_layers = 1;
        let mut params = build_model(&cfg, &mut RngStream::new(3)).unwrap();
        params.set("gcn.0.weight", Tensor::zeros(2, 2));
        let mut adam = AdamState::new(&params, AdamHyper::default());
        let grads: Vec<Tensor> = params
            .iter()
            .map(|(_, t, _)| Tensor::filled(t.rows(), t.cols(), 0.7))
            .collect();
        adam_step(&mut params, &grads, &mut adam).unwrap();
        let w = params.get("gcn.0.weight");
        for &v in w.values() {
            assert_eq!(v, w.values()[0]);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let cfg = ModelConfig::new(ModelKind::Gcn, 2, 2);
        let mut params = build_model(&cfg, &mut RngStream::new(4)).unwrap();
        let mut adam = AdamState::new(&params, AdamHyper::default());
        let mut grads: Vec<Tensor> = params
            .iter()
            .map(|(_, t, _)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        grads[0].values_mut()[0] = f64::NAN;
        let err = adam_step(&mut params, &grads, &mut adam).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    /// Two classes with opposite feature signatures on tiny path graphs;
    /// trivially separable.
    fn separable_dataset(n: usize) -> Dataset {
        let graphs = (0..n)
            .map(|i| {
                let label = i % 2;
                let hot = if label == 0 { 0 } else { 1 };
                let mut rng = RngStream::new(i as u64);
                let mut feats = Tensor::zeros(4, 3);
                for r in 0..4 {
                    feats[(r, hot)] = 1.0;
                    feats[(r, 2)] = rng.uniform(-0.1, 0.1);
                }
                GraphRecord {
                    node_features: feats,
                    edges: vec![(0, 1), (1, 2), (2, 3)],
                    label,
                    graph_id: i + 1,
                }
            })
            .collect();
        Dataset {
            name: "separable".into(),
            graphs,
            num_classes: 2,
            feature_dim: 3,
            encoding: "test".into(),
            label_alphabet: None,
            class_values: vec![0, 1],
        }
    }

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(ModelKind::Mfgat, 3, 2);
        cfg.hidden_dim = 8;
        cfg.num_views = 2;
        cfg.num_layers = 1;
        cfg.dropout = 0.0;
        cfg
    }

    fn quick_train_cfg(seed: u64, epochs: usize) -> TrainConfig {
        let mut tcfg = TrainConfig::new(seed);
        tcfg.max_epochs = epochs;
        tcfg.batch_size = 8;
        tcfg.patience = epochs;
        tcfg
    }

    #[test]
    fn fit_overfits_a_separable_set() {
        let ds = separable_dataset(12);
        let all: Vec<usize> = (0..12).collect();
        let splits = Splits {
            train: all.clone(),
            val: all.clone(),
            test: all,
        };
        let (params, report) =
            fit(&ds, &splits, &small_config(), &quick_train_cfg(5, 60)).unwrap();
        let best = report
            .epochs
            .iter()
            .map(|e| e.train_acc)
            .fold(0.0, f64::max);
        assert_eq!(best, 1.0, "never reached perfect training accuracy");
        assert_eq!(report.test_accuracy, Some(1.0));
        assert!(params.all_finite());
    }

    #[test]
    fn fit_returns_the_best_validation_epoch() {
        let ds = separable_dataset(16);
        let splits = Splits {
            train: (0..10).collect(),
            val: (10..16).collect(),
            test: vec![],
        };
        let (params, report) = fit(&ds, &splits, &small_config(), &quick_train_cfg(7, 12)).unwrap();
        assert!(report.best_val_epoch >= 1 && report.best_val_epoch <= report.stopped_epoch);
        assert!(report.stopped_epoch <= report.best_val_epoch + 12);
        // The returned parameters must reproduce the recorded best accuracy.
        let val_graphs: Vec<&GraphRecord> = (10..16).map(|i| &ds.graphs[i]).collect();
        let acc = evaluate_accuracy(&params, &val_graphs).unwrap();
        assert_eq!(acc, report.epochs[report.best_val_epoch - 1].val_acc);
    }

    #[test]
    fn fit_respects_patience() {
        let ds = separable_dataset(16);
        let splits = Splits {
            train: (0..10).collect(),
            val: (10..16).collect(),
            test: vec![],
        };
        let mut tcfg = quick_train_cfg(9, 50);
        tcfg.patience = 1;
        let (_, report) = fit(&ds, &splits, &small_config(), &tcfg).unwrap();
        assert_eq!(report.stopped_epoch, report.best_val_epoch + 1);
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = separable_dataset(14);
        let splits = Splits {
            train: (0..8).collect(),
            val: (8..11).collect(),
            test: (11..14).collect(),
        };
        let cfg = small_config();
        let tcfg = quick_train_cfg(11, 6);
        let (_, a) = fit(&ds, &splits, &cfg, &tcfg).unwrap();
        let (_, b) = fit(&ds, &splits, &cfg, &tcfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn evaluate_accuracy_counts_fractions() {
        let ds = separable_dataset(4);
        let cfg = small_config();
        let params = build_model(&cfg, &mut RngStream::new(1)).unwrap();
        let graphs: Vec<&GraphRecord> = ds.graphs.iter().collect();
        let acc = evaluate_accuracy(&params, &graphs).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(evaluate_accuracy(&params, &[]).is_err());
    }

    #[test]
    fn cross_validate_singleton_grid_picks_it() {
        let ds = separable_dataset(40);
        let mut tcfg = quick_train_cfg(13, 3);
        tcfg.cv_folds = 2;
        let outcome = cross_validate(&ds, &[small_config()], &tcfg).unwrap();
        assert_eq!(outcome.best_index, 0);
        assert_eq!(outcome.fold_val_accuracies[0].len(), 2);
    }

    #[test]
    fn cross_validate_folds_partition_the_pool() {
        // Sizes only; the partition property is enforced by construction.
        let ds = separable_dataset(50);
        let mut tcfg = quick_train_cfg(15, 2);
        tcfg.cv_folds = 5;
        let outcome = cross_validate(&ds, &[small_config()], &tcfg).unwrap();
        assert_eq!(outcome.fold_val_accuracies[0].len(), 5);
        assert!(outcome.report.test_accuracy.is_some());
    }

    #[test]
    fn cross_validate_tie_breaks_to_the_first_config() {
        let ds = separable_dataset(30);
        let mut tcfg = quick_train_cfg(17, 2);
        tcfg.cv_folds = 2;
        let grid = vec![small_config(), small_config()];
        let outcome = cross_validate(&ds, &grid, &tcfg).unwrap();
        assert_eq!(outcome.best_index, 0);
    }

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn ablation_single_cell_matches_plain_fit() {
        let ds = separable_dataset(20);
        let cfg = small_config();
        let tcfg = quick_train_cfg(19, 4);
        let table = ablate_views(&ds, &cfg, &[2], &[19], &tcfg, 1).unwrap();
        assert_eq!(table.rows.len(), 1);

        let mut direct_cfg = cfg.clone();
        direct_cfg.num_views = 2;
        let mut direct_tcfg = tcfg.clone();
        direct_tcfg.seed = 19;
        direct_tcfg.split.seed = 19;
        let splits = Splits::from_spec(&ds, &direct_tcfg.split).unwrap();
        let (_, report) = fit(&ds, &splits, &direct_cfg, &direct_tcfg).unwrap();
        assert_eq!(
            table.rows[0].median_accuracy,
            report.test_accuracy.unwrap()
        );
    }

    #[test]
    fn ablation_rows_are_sorted_and_parallel_matches_sequential() {
        let ds = separable_dataset(20);
        let cfg = small_config();
        let tcfg = quick_train_cfg(21, 3);
        let seq = ablate_views(&ds, &cfg, &[3, 1], &[1, 2], &tcfg, 1).unwrap();
        let par = ablate_views(&ds, &cfg, &[3, 1], &[1, 2], &tcfg, 4).unwrap();
        let views: Vec<usize> = seq.rows.iter().map(|r| r.views).collect();
        assert_eq!(views, vec![1, 3]);
        for (a, b) in seq.rows.iter().zip(par.rows.iter()) {
            let key = |c: &AblationCell| (c.views, c.seed, c.test_accuracy, c.stopped_epoch);
            assert_eq!(
                a.cells.iter().map(key).collect::<Vec<_>>(),
                b.cells.iter().map(key).collect::<Vec<_>>()
            );
        }
    }
}
