//! Two-phase SGD training, evaluation and the baseline comparison grid.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::balance::{AssignmentTracker, DEFAULT_MARGIN};
use crate::checkpoint::{Checkpoint, Progress};
use crate::data::{jitter_dataset, JitterMode, JitterSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Architecture, LayerSpec, Model, ModelKind};
use crate::numeric::{format_sig, Matrix, Rng};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e3;

const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 1,
            data: 2,
            shuffle: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub arch: Architecture,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs, counted across both phases.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub margin: f64,
    /// `false` trains without the balancing constraint from the first step.
    pub constrain: bool,
    pub seeds: Seeds,
}

impl TrainConfig {
    pub fn new(kind: ModelKind, arch: Architecture) -> Self {
        TrainConfig {
            kind,
            arch,
            learning_rate: 0.1,
            lr_decay: 0.5,
            decay_every: 10,
            batch_size: 64,
            phase1_epochs: 30,
            phase2_epochs: 20,
            margin: DEFAULT_MARGIN,
            constrain: true,
            seeds: Seeds::default(),
        }
    }

    /// Checks every field, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(Error::Config(msg)) = self.arch.validate(self.kind) {
            bad.push(msg);
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            bad.push(format!("lr_decay must be > 0, got {}", self.lr_decay));
        }
        if self.decay_every == 0 {
            bad.push("decay_every must be >= 1".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            bad.push(format!("margin must be >= 0, got {}", self.margin));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn phase_of(&self, epoch: usize) -> u8 {
        if epoch < self.phase1_epochs {
            1
        } else {
            2
        }
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Training examples for each epoch.
pub trait TrainingData: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize;

    fn epoch(&self, epoch: usize) -> Result<Cow<'_, LabeledDataset>>;
}

impl TrainingData for LabeledDataset {
    fn len(&self) -> usize {
        LabeledDataset::len(self)
    }

    fn dim(&self) -> usize {
        LabeledDataset::dim(self)
    }

    fn epoch(&self, _epoch: usize) -> Result<Cow<'_, LabeledDataset>> {
        Ok(Cow::Borrowed(self))
    }
}

impl<T: TrainingData + ?Sized> TrainingData for &T {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn epoch(&self, epoch: usize) -> Result<Cow<'_, LabeledDataset>> {
        (**self).epoch(epoch)
    }
}

/// Re-jitters the source images with fresh offsets every epoch.
#[derive(Clone, Debug)]
pub struct PerEpochJitter<'a> {
    pub source: &'a LabeledDataset,
    pub spec: JitterSpec,
}

impl TrainingData for PerEpochJitter<'_> {
    fn len(&self) -> usize {
        self.source.len()
    }

    fn dim(&self) -> usize {
        self.spec.canvas * self.spec.canvas
    }

    fn epoch(&self, epoch: usize) -> Result<Cow<'_, LabeledDataset>> {
        jitter_dataset(self.source, &self.spec, JitterMode::PerEpoch(epoch)).map(Cow::Owned)
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    /// Mean batch loss over the epoch, weighted by batch size.
    pub train_loss: f64,
    /// Error % of the predictions made during the epoch's steps.
    pub train_err: f64,
    pub test_err: Option<f64>,
    /// Per gated layer, the mean raw gate vector over the epoch's examples.
    pub gate_means: Vec<Vec<f64>>,
}

/// Writes the history as CSV:
/// `epoch,phase,train_loss,train_err,test_err,g1_0,...,g2_0,...`.
pub fn metrics_csv(history: &[EpochMetrics], gate_widths: &[usize]) -> String {
    let mut out = String::from("epoch,phase,train_loss,train_err,test_err");
    for (l, &n) in gate_widths.iter().enumerate() {
        for i in 0..n {
            write!(out, ",g{}_{i}", l + 1).unwrap();
        }
    }
    out.push('\n');
    for row in history {
        write!(
            out,
            "{},{},{},{},{}",
            row.epoch,
            row.phase,
            format_sig(row.train_loss),
            format_sig(row.train_err),
            row.test_err.map(format_sig).unwrap_or_default()
        )
        .unwrap();
        for g in &row.gate_means {
            for v in g {
                write!(out, ",{}", format_sig(*v)).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// Position of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// 0-based epoch.
    pub epoch: usize,
    pub phase: u8,
    /// Steps taken so far, including this one.
    pub step: u64,
    pub batch: usize,
    pub loss: f64,
}

/// Hooks into the training loop.
pub trait Observer {
    fn on_step(&mut self, _info: &StepInfo, _model: &Model, _tracker: &AssignmentTracker) {}

    /// Called after every epoch, after its metrics are computed.
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _model: &Model, _tracker: &AssignmentTracker) -> Result<()> {
        Ok(())
    }
}

/// Does nothing.
pub struct NoObserver;

impl Observer for NoObserver {}

/// A model mid-training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub tracker: AssignmentTracker,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let model = Model::build(config.kind, config.arch, &mut Rng::new(config.seeds.init))?;
        let mut tracker = AssignmentTracker::new(&model.gate_widths(), config.margin)?;
        if !config.constrain || config.phase1_epochs == 0 {
            tracker.lift();
        }
        Ok(Trainer {
            config,
            model,
            tracker,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from an epoch-boundary checkpoint.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint) -> Result<Trainer> {
        config.validate()?;
        if ckpt.model.kind != config.kind || ckpt.model.arch != config.arch {
            return Err(Error::Config("checkpoint model does not match the config".into()));
        }
        let tracker = match ckpt.tracker {
            Some(t) => t,
            None => return Err(Error::Data("checkpoint has no tracker state".into())),
        };
        Ok(Trainer {
            config,
            model: ckpt.model,
            tracker,
            epoch: ckpt.progress.epoch,
            step: ckpt.progress.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            tracker: Some(self.tracker.clone()),
            progress: Progress {
                phase: if self.epoch == 0 { 0 } else { self.config.phase_of(self.epoch - 1) },
                epoch: self.epoch,
                step: self.step,
            },
            config: serde_json::to_value(&self.config).expect("config"),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    /// Trains until every configured epoch has run.
    pub fn run(
        &mut self,
        data: &dyn TrainingData,
        test: Option<&LabeledDataset>,
        observer: &mut dyn Observer,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while !self.is_done() {
            history.push(self.run_epoch(data, test, observer)?);
        }
        Ok(history)
    }

    pub fn run_epoch(
        &mut self,
        data: &dyn TrainingData,
        test: Option<&LabeledDataset>,
        observer: &mut dyn Observer,
    ) -> Result<EpochMetrics> {
        if data.dim() != self.model.input_dim() {
            return Err(Error::Shape(format!(
                "training data has {} features, model expects {}",
                data.dim(),
                self.model.input_dim()
            )));
        }
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.epoch;
        let phase = self.config.phase_of(epoch);
        if phase == 2 {
            self.tracker.lift();
        }
        let lr = self.config.lr_at(epoch);
        let ds = data.epoch(epoch)?;
        let order = Rng::substream(self.config.seeds.shuffle, &[epoch as u64]).permutation(ds.len());
        let widths = self.model.gate_widths();
        let mut gate_sums: Vec<Vec<f64>> = widths.iter().map(|&n| vec![0.0; n]).collect();
        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        for batch in order.chunks(self.config.batch_size) {
            let x = ds.inputs.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
            let tracker = self.tracker.is_active().then_some(&self.tracker);
            let out = self.model.step(&x, &labels, tracker)?;
            self.step += 1;
            if !out.loss.is_finite() || out.loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step: self.step as usize,
                    loss: out.loss,
                });
            }
            self.model.apply_gradients(&out.grads, lr)?;
            for (l, used) in out.used_gates.iter().enumerate() {
                for r in used.row_iter() {
                    self.tracker.update_totals(l, r);
                }
            }
            for (sums, raw) in gate_sums.iter_mut().zip(&out.raw_gates) {
                for (s, v) in sums.iter_mut().zip(raw.column_sums()) {
                    *s += v;
                }
            }
            loss_sum += out.loss * batch.len() as f64;
            wrong += labels
                .iter()
                .enumerate()
                .filter(|&(r, &y)| argmax(out.probs.row(r)) != y)
                .count();
            observer.on_step(
                &StepInfo {
                    epoch,
                    phase,
                    step: self.step,
                    batch: batch.len(),
                    loss: out.loss,
                },
                &self.model,
                &self.tracker,
            );
        }
        self.epoch += 1;
        let n = ds.len() as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            phase,
            lr,
            train_loss: loss_sum / n,
            train_err: 100.0 * wrong as f64 / n,
            test_err: test.map(|t| evaluate(&self.model, t)).transpose()?,
            gate_means: gate_sums
                .into_iter()
                .map(|s| s.into_iter().map(|v| v / n).collect())
                .collect(),
        };
        observer.on_epoch(&metrics, &self.model, &self.tracker)?;
        Ok(metrics)
    }
}

/// Final state of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub tracker: AssignmentTracker,
    pub history: Vec<EpochMetrics>,
    pub steps: u64,
}

/// Builds the configured model and trains it through both phases.
pub fn train(
    config: &TrainConfig,
    data: &dyn TrainingData,
    test: Option<&LabeledDataset>,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone())?;
    let history = t.run(data, test, observer)?;
    Ok(TrainOutcome {
        model: t.model,
        tracker: t.tracker,
        history,
        steps: t.step,
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every example.
pub fn predict(model: &Model, inputs: &Matrix) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.rows());
    for start in (0..inputs.rows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(inputs.rows());
        let probs = model.infer(&inputs.slice_rows(start, end))?.probs;
        out.extend(probs.row_iter().map(argmax));
    }
    Ok(out)
}

/// Number of misclassified examples.
pub fn count_errors(model: &Model, ds: &LabeledDataset) -> Result<usize> {
    Ok(predict(model, &ds.inputs)?
        .iter()
        .zip(&ds.labels)
        .filter(|(p, y)| p != y)
        .count())
}

/// Classification error in percent.
pub fn evaluate(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    Ok(100.0 * count_errors(model, ds)? as f64 / ds.len() as f64)
}

/// Model columns of the comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridColumn {
    SingleExpert,
    Dmoe,
    ConcatLayer2,
    Dnn,
}

impl GridColumn {
    pub const ALL: [GridColumn; 4] = [
        GridColumn::SingleExpert,
        GridColumn::Dmoe,
        GridColumn::ConcatLayer2,
        GridColumn::Dnn,
    ];

    pub fn header(self) -> &'static str {
        match self {
            GridColumn::SingleExpert => "single_expert",
            GridColumn::Dmoe => "dmoe",
            GridColumn::ConcatLayer2 => "concat_layer2",
            GridColumn::Dnn => "dnn",
        }
    }
}

/// Model trained in one grid cell, or `None` when the column does not apply.
///
/// One-layer rows use a one-layer mixture for every column: a single expert,
/// the full mixture, and one expert as wide as all experts together.
pub fn grid_cell(arch: &Architecture, column: GridColumn) -> Option<(ModelKind, Architecture)> {
    match (arch.layer2, column) {
        (Some(_), GridColumn::SingleExpert) => Some((ModelKind::SingleExpertL2, *arch)),
        (Some(_), GridColumn::Dmoe) => Some((ModelKind::Dmoe, *arch)),
        (Some(_), GridColumn::ConcatLayer2) => Some((ModelKind::ConcatL2, *arch)),
        (Some(_), GridColumn::Dnn) => Some((ModelKind::MatchedDnn, *arch)),
        (None, GridColumn::Dnn) => None,
        (None, GridColumn::Dmoe) => Some((ModelKind::OneLayer, *arch)),
        (None, col) => {
            let l1 = arch.layer1;
            let hidden = if col == GridColumn::SingleExpert {
                l1.hidden
            } else {
                l1.hidden * l1.experts
            };
            let one = Architecture::one_layer(arch.input_dim, arch.classes, LayerSpec::new(1, hidden, l1.gate_hidden));
            Some((ModelKind::OneLayer, one))
        }
    }
}

/// Rows of architectures, each trained under every column with `train`'s
/// hyperparameters (its `kind` and `arch` are replaced per cell).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: Vec<Architecture>,
    pub train: TrainConfig,
}

impl GridSpec {
    /// The five jittered-MNIST rows: four two-layer models and one one-layer.
    pub fn mnist_table(train: TrainConfig) -> GridSpec {
        let (d, c) = (36 * 36, 10);
        let l = LayerSpec::new;
        GridSpec {
            rows: vec![
                Architecture::two_layer(d, c, l(4, 100, 50), l(4, 100, 50)),
                Architecture::two_layer(d, c, l(4, 100, 50), l(4, 20, 50)),
                Architecture::two_layer(d, c, l(4, 100, 50), l(4, 20, 20)),
                Architecture::two_layer(d, c, l(4, 50, 20), l(4, 20, 20)),
                Architecture::one_layer(d, c, l(4, 100, 50)),
            ],
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("grid has no rows".into()));
        }
        let mut bad = Vec::new();
        for (r, arch) in self.rows.iter().enumerate() {
            for col in GridColumn::ALL {
                if let Some((kind, arch)) = grid_cell(arch, col) {
                    let mut cfg = self.train.clone();
                    cfg.kind = kind;
                    cfg.arch = arch;
                    if let Err(e) = cfg.validate() {
                        bad.push(format!("row {r} {}: {e}", col.header()));
                    }
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellResult {
    NotApplicable,
    Done { train_err: f64, test_err: f64 },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResults {
    pub rows: Vec<Architecture>,
    /// `cells[row][column]`, columns in [`GridColumn::ALL`] order.
    pub cells: Vec<Vec<CellResult>>,
}

impl GridResults {
    fn csv(&self, pick: impl Fn(f64, f64) -> f64) -> String {
        let mut out = String::from("model,gate_hids");
        for col in GridColumn::ALL {
            write!(out, ",{}", col.header()).unwrap();
        }
        out.push('\n');
        for (arch, cells) in self.rows.iter().zip(&self.cells) {
            let label = if arch.layer2.is_some() {
                arch.label()
            } else {
                format!("{} (one layer)", arch.label())
            };
            write!(out, "{label},{}", arch.gate_label()).unwrap();
            for cell in cells {
                match cell {
                    CellResult::NotApplicable => out.push_str(",-"),
                    CellResult::Done { train_err, test_err } => {
                        write!(out, ",{}", format_sig(pick(*train_err, *test_err))).unwrap()
                    }
                    CellResult::Failed(_) => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn test_csv(&self) -> String {
        self.csv(|_, test| test)
    }

    pub fn train_csv(&self) -> String {
        self.csv(|train, _| train)
    }
}

/// Trains and evaluates every cell of `spec`, up to `jobs` cells at a time.
/// A cell that fails is recorded and the rest of the grid still runs.
pub fn run_experiment_grid(
    spec: &GridSpec,
    data: &dyn TrainingData,
    train_eval: &LabeledDataset,
    test: &LabeledDataset,
    jobs: usize,
) -> Result<GridResults> {
    spec.validate()?;
    let cells: Vec<(usize, usize, Option<TrainConfig>)> = spec
        .rows
        .iter()
        .enumerate()
        .flat_map(|(r, arch)| {
            GridColumn::ALL.iter().enumerate().map(move |(c, &col)| {
                let cfg = grid_cell(arch, col).map(|(kind, arch)| {
                    let mut cfg = spec.train.clone();
                    cfg.kind = kind;
                    cfg.arch = arch;
                    cfg
                });
                (r, c, cfg)
            })
        })
        .collect();
    let results = Mutex::new(vec![vec![CellResult::NotApplicable; GridColumn::ALL.len()]; spec.rows.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((r, c, cfg)) = cells.get(i) else { break };
                let Some(cfg) = cfg else { continue };
                let result = train(cfg, data, None, &mut NoObserver).and_then(|out| {
                    Ok(CellResult::Done {
                        train_err: evaluate(&out.model, train_eval)?,
                        test_err: evaluate(&out.model, test)?,
                    })
                });
                let cell = result.unwrap_or_else(|e| CellResult::Failed(e.to_string()));
                results.lock().expect("grid results")[*r][*c] = cell;
            });
        }
    });
    Ok(GridResults {
        rows: spec.rows.clone(),
        cells: results.into_inner().expect("grid results"),
    })
}
