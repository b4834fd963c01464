use std::path::PathBuf;

use dmoe_core::balance::AssignmentTracker;
use dmoe_core::checkpoint::{Checkpoint, Container};
use dmoe_core::data::{jitter_dataset, load_mnist, synth_monophone, InputLayout, JitterMode, JitterSpec, LabeledDataset};
use dmoe_core::model::{Architecture, LayerSpec, Model, ModelKind};
use dmoe_core::train::*;
use dmoe_core::{Error, Matrix, Rng};

fn mnist_dir() -> PathBuf {
    std::env::var_os("DMOE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn jittered_mnist_head(n: usize) -> LabeledDataset {
    let train = load_mnist(mnist_dir(), true).expect("MNIST IDX files (set DMOE_MNIST_DIR)");
    jitter_dataset(&train.head(n), &JitterSpec::mnist(5), JitterMode::FixedOnce).unwrap()
}

fn tiny_config(kind: ModelKind, d: usize, classes: usize) -> TrainConfig {
    let arch = Architecture::two_layer(d, classes, LayerSpec::new(3, 8, 6), LayerSpec::new(2, 6, 4));
    let mut c = TrainConfig::new(kind, arch);
    c.phase1_epochs = 2;
    c.phase2_epochs = 1;
    c.batch_size = 16;
    c
}

fn params(model: &Model) -> Vec<Matrix> {
    model.named_params().into_iter().map(|(_, m)| m.clone()).collect()
}

#[test]
fn zero_epochs_returns_the_initialized_model() {
    let ds = synth_monophone(40, 1).unwrap();
    let mut c = tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes);
    c.phase1_epochs = 0;
    c.phase2_epochs = 0;
    let out = train(&c, &ds, Some(&ds), &mut NoObserver).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.model, Model::build(c.kind, c.arch, &mut Rng::new(c.seeds.init)).unwrap());
}

#[test]
fn identical_configs_give_bit_identical_parameters() {
    let ds = synth_monophone(120, 2).unwrap();
    for kind in ModelKind::ALL {
        let c = tiny_config(kind, ds.dim(), ds.classes);
        let a = train(&c, &ds, Some(&ds), &mut NoObserver).unwrap();
        let b = train(&c, &ds, Some(&ds), &mut NoObserver).unwrap();
        assert_eq!(params(&a.model), params(&b.model), "{kind}");
        assert_eq!(a.history, b.history);
        assert_eq!(a.tracker, b.tracker);
    }
}

#[test]
fn shuffle_seed_changes_order_but_not_initialization() {
    let ds = synth_monophone(64, 3).unwrap();
    let mut c = tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes);
    c.phase1_epochs = 1;
    c.phase2_epochs = 0;
    let a = train(&c, &ds, None, &mut NoObserver).unwrap();
    c.seeds.shuffle += 1;
    let b = train(&c, &ds, None, &mut NoObserver).unwrap();
    assert_ne!(params(&a.model), params(&b.model));
    c.phase1_epochs = 0;
    let init_a = train(&c, &ds, None, &mut NoObserver).unwrap();
    c.seeds.shuffle += 1;
    let init_b = train(&c, &ds, None, &mut NoObserver).unwrap();
    assert_eq!(init_a.model, init_b.model);
}

#[test]
fn mnist_subset_training_error_drops() {
    let ds = jittered_mnist_head(200);
    let arch = Architecture::two_layer(1296, 10, LayerSpec::new(4, 20, 20), LayerSpec::new(4, 20, 20));
    let mut c = TrainConfig::new(ModelKind::Dmoe, arch);
    c.phase1_epochs = 20;
    c.phase2_epochs = 10;
    c.batch_size = 16;
    let before = evaluate(&Model::build(c.kind, c.arch, &mut Rng::new(c.seeds.init)).unwrap(), &ds).unwrap();
    let out = train(&c, &ds, None, &mut NoObserver).unwrap();
    let after = evaluate(&out.model, &ds).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert!(out.history.last().unwrap().train_loss < out.history[0].train_loss);
}

struct ImbalanceWatch {
    batch: usize,
    worst: f64,
    phase1_steps: u64,
    lifted_in_phase1: bool,
}

impl Observer for ImbalanceWatch {
    fn on_step(&mut self, info: &StepInfo, _m: &Model, t: &AssignmentTracker) {
        if info.phase == 1 {
            self.phase1_steps += 1;
            self.lifted_in_phase1 |= !t.is_active();
            for l in 0..t.layers() {
                self.worst = self.worst.max(t.max_deviation(l) - (t.margin() + self.batch as f64));
            }
        }
    }
}

#[test]
fn phase_one_respects_the_batch_imbalance_bound() {
    let ds = synth_monophone(400, 4).unwrap();
    let mut c = tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes);
    c.phase1_epochs = 4;
    let mut w = ImbalanceWatch {
        batch: c.batch_size,
        worst: f64::NEG_INFINITY,
        phase1_steps: 0,
        lifted_in_phase1: false,
    };
    let out = train(&c, &ds, None, &mut w).unwrap();
    assert_eq!(w.phase1_steps, 4 * 25);
    assert!(w.worst <= 0.0, "{}", w.worst);
    assert!(!w.lifted_in_phase1);
    assert!(!out.tracker.is_active());
    assert_eq!(out.tracker.steps(), 5 * 400);
}

#[test]
fn control_run_never_masks() {
    let ds = synth_monophone(64, 5).unwrap();
    let mut c = tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes);
    c.constrain = false;
    let out = train(&c, &ds, None, &mut NoObserver).unwrap();
    assert!(!out.tracker.is_active());
    let t = Trainer::new(c).unwrap();
    assert!(!t.tracker.is_active());
}

#[test]
fn learning_rate_decays_across_phases() {
    let arch = Architecture::one_layer(4, 2, LayerSpec::new(2, 3, 3));
    let c = TrainConfig::new(ModelKind::OneLayer, arch);
    assert_eq!(c.lr_at(0), 0.1);
    assert_eq!(c.lr_at(9), 0.1);
    assert_eq!(c.lr_at(10), 0.05);
    assert_eq!(c.lr_at(35), 0.0125);
    assert_eq!(c.phase_of(29), 1);
    assert_eq!(c.phase_of(30), 2);
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    let ds = synth_monophone(96, 6).unwrap();
    let mut c = tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes);
    c.phase1_epochs = 2;
    c.phase2_epochs = 2;
    let full = train(&c, &ds, Some(&ds), &mut NoObserver).unwrap();

    let mut first = Trainer::new(c.clone()).unwrap();
    first.run_epoch(&ds, Some(&ds), &mut NoObserver).unwrap();
    first.run_epoch(&ds, Some(&ds), &mut NoObserver).unwrap();
    let bytes = first.checkpoint().to_container().to_bytes();
    let ckpt = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    let mut second = Trainer::resume(c, ckpt).unwrap();
    let rest = second.run(&ds, Some(&ds), &mut NoObserver).unwrap();
    assert_eq!(second.model, full.model);
    assert_eq!(second.tracker, full.tracker);
    assert_eq!(rest, full.history[2..]);
}

#[test]
fn resume_rejects_a_different_model() {
    let ds = synth_monophone(16, 6).unwrap();
    let c = tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes);
    let ckpt = Trainer::new(c.clone()).unwrap().checkpoint();
    let mut other = c;
    other.kind = ModelKind::ConcatL2;
    assert!(matches!(Trainer::resume(other, ckpt), Err(Error::Config(_))));
}

#[test]
fn divergence_is_reported_with_its_position() {
    let ds = synth_monophone(64, 7).unwrap();
    let mut c = tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes);
    c.learning_rate = 1e300;
    match train(&c, &ds, None, &mut NoObserver) {
        Err(Error::Diverged { epoch, step, loss }) => {
            assert!(epoch >= 1 && step >= 1);
            assert!(!loss.is_finite() || loss > DIVERGENCE_LOSS);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_list_every_bad_field() {
    let mut c = tiny_config(ModelKind::Dmoe, 10, 3);
    c.learning_rate = 0.0;
    c.batch_size = 0;
    c.margin = -1.0;
    c.arch.layer1.hidden = 0;
    let Err(Error::Config(msg)) = c.validate() else { panic!() };
    for field in ["learning_rate", "batch_size", "margin", "layer1.hidden"] {
        assert!(msg.contains(field), "{msg}");
    }
    let json = serde_json::to_string(&tiny_config(ModelKind::Dmoe, 10, 3)).unwrap();
    assert!(TrainConfig::from_json(&json).is_ok());
    let extra = json.replacen('{', r#"{"momentum":0.9,"#, 1);
    assert!(matches!(TrainConfig::from_json(&extra), Err(Error::Config(_))));
}

fn constant_model(classes: usize, d: usize, favourite: Option<usize>) -> Model {
    let arch = Architecture::one_layer(d, classes, LayerSpec::new(1, 2, 1));
    let mut m = Model::build(ModelKind::OneLayer, arch, &mut Rng::new(0)).unwrap();
    for p in m.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    if let Some(f) = favourite {
        let bias = m.params_mut().pop().unwrap();
        bias.data_mut()[f] = 5.0;
    }
    m
}

fn balanced(n: usize, classes: usize, d: usize) -> LabeledDataset {
    let mut rng = Rng::new(9);
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
    LabeledDataset::new(x, (0..n).map(|i| i % classes).collect(), classes, InputLayout::Flat).unwrap()
}

#[test]
fn uniform_predictions_sit_at_chance() {
    let ds = balanced(1000, 10, 5);
    // ties go to class 0, which is one tenth of the labels
    assert_eq!(evaluate(&constant_model(10, 5, None), &ds).unwrap(), 90.0);
    assert_eq!(evaluate(&constant_model(10, 5, Some(3)), &ds).unwrap(), 90.0);
}

#[test]
fn memorized_training_set_has_zero_error() {
    let ds = synth_monophone(200, 8).unwrap();
    let arch = Architecture::one_layer(ds.dim(), ds.classes, LayerSpec::new(1, 64, 1));
    let mut c = TrainConfig::new(ModelKind::OneLayer, arch);
    c.phase1_epochs = 60;
    c.phase2_epochs = 0;
    c.decay_every = 1000;
    c.batch_size = 8;
    let out = train(&c, &ds, None, &mut NoObserver).unwrap();
    assert_eq!(evaluate(&out.model, &ds).unwrap(), 0.0);
}

#[test]
fn sharded_error_counts_add_up() {
    let ds = synth_monophone(301, 9).unwrap();
    let model = Trainer::new(tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes)).unwrap().model;
    let whole = count_errors(&model, &ds).unwrap();
    let a: Vec<usize> = (0..150).collect();
    let b: Vec<usize> = (150..301).collect();
    let split = count_errors(&model, &ds.subset(&a)).unwrap() + count_errors(&model, &ds.subset(&b)).unwrap();
    assert_eq!(whole, split);
    assert_eq!(evaluate(&model, &ds).unwrap(), 100.0 * whole as f64 / 301.0);
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
}

#[test]
fn metrics_csv_has_the_expected_columns() {
    let ds = synth_monophone(48, 10).unwrap();
    let c = tiny_config(ModelKind::Dmoe, ds.dim(), ds.classes);
    let out = train(&c, &ds, Some(&ds), &mut NoObserver).unwrap();
    let csv = metrics_csv(&out.history, &out.model.gate_widths());
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,phase,train_loss,train_err,test_err,g1_0,g1_1,g1_2,g2_0,g2_1"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][1], "2");
    for row in &rows {
        assert_eq!(row.len(), 10);
        let g1: f64 = row[5..8].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((g1 - 1.0).abs() < 1e-9);
        let err: f64 = row[3].parse().unwrap();
        assert!((0.0..=100.0).contains(&err));
    }
}

#[test]
fn per_epoch_jitter_changes_offsets_each_epoch() {
    let base = load_mnist(mnist_dir(), false).unwrap().head(30);
    let data = PerEpochJitter {
        source: &base,
        spec: JitterSpec::mnist(1),
    };
    assert_eq!(TrainingData::dim(&data), 1296);
    let e0 = data.epoch(0).unwrap();
    let e1 = data.epoch(1).unwrap();
    assert_ne!(e0.offsets, e1.offsets);
    assert_eq!(data.epoch(0).unwrap().into_owned(), e0.into_owned());
}

fn grid_spec(d: usize, classes: usize) -> GridSpec {
    let mut train = tiny_config(ModelKind::Dmoe, d, classes);
    train.phase1_epochs = 1;
    train.phase2_epochs = 1;
    let l = LayerSpec::new;
    GridSpec {
        rows: vec![
            Architecture::two_layer(d, classes, l(2, 6, 4), l(2, 5, 3)),
            Architecture::one_layer(d, classes, l(3, 6, 4)),
        ],
        train,
    }
}

#[test]
fn grid_cells_match_direct_training_and_layout() {
    let ds = synth_monophone(80, 11).unwrap();
    let spec = grid_spec(ds.dim(), ds.classes);
    let r1 = run_experiment_grid(&spec, &ds, &ds, &ds, 1).unwrap();
    let r3 = run_experiment_grid(&spec, &ds, &ds, &ds, 3).unwrap();
    assert_eq!(r1.test_csv(), r3.test_csv());
    assert_eq!(r1.train_csv(), r3.train_csv());

    let (kind, arch) = grid_cell(&spec.rows[0], GridColumn::Dmoe).unwrap();
    let mut c = spec.train.clone();
    c.kind = kind;
    c.arch = arch;
    let direct = train(&c, &ds, None, &mut NoObserver).unwrap();
    let err = evaluate(&direct.model, &ds).unwrap();
    assert_eq!(r1.cells[0][1], CellResult::Done { train_err: err, test_err: err });
    assert_eq!(r1.cells[1][3], CellResult::NotApplicable);

    let csv = r1.test_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,gate_hids,single_expert,dmoe,concat_layer2,dnn");
    assert!(lines[1].starts_with("2x6-2x5,4-3,"));
    assert!(lines[2].starts_with("3x6 (one layer),4,") && lines[2].ends_with(",-"));
}

#[test]
fn one_layer_grid_columns_widen_a_single_expert() {
    let arch = Architecture::one_layer(1296, 10, LayerSpec::new(4, 100, 50));
    let (k, single) = grid_cell(&arch, GridColumn::SingleExpert).unwrap();
    assert_eq!((k, single.layer1.experts, single.layer1.hidden), (ModelKind::OneLayer, 1, 100));
    let (_, concat) = grid_cell(&arch, GridColumn::ConcatLayer2).unwrap();
    assert_eq!((concat.layer1.experts, concat.layer1.hidden), (1, 400));
    assert!(grid_cell(&arch, GridColumn::Dnn).is_none());
    let two = Architecture::two_layer(1296, 10, LayerSpec::new(4, 100, 50), LayerSpec::new(4, 20, 50));
    assert_eq!(grid_cell(&two, GridColumn::ConcatLayer2).unwrap().0, ModelKind::ConcatL2);
}

#[test]
fn failed_cells_are_recorded_and_the_grid_continues() {
    let ds = synth_monophone(64, 12).unwrap();
    let mut spec = grid_spec(ds.dim(), ds.classes);
    spec.train.learning_rate = 1e300;
    let r = run_experiment_grid(&spec, &ds, &ds, &ds, 2).unwrap();
    let failed = r.cells.iter().flatten().filter(|c| matches!(c, CellResult::Failed(_))).count();
    assert!(failed > 0);
    assert!(r.test_csv().contains("failed"));
    assert_eq!(r.cells.len(), 2);
}

#[test]
fn mnist_table_has_five_rows() {
    let spec = GridSpec::mnist_table(TrainConfig::new(ModelKind::Dmoe, Architecture::one_layer(1, 1, LayerSpec::new(1, 1, 1))));
    spec.validate().unwrap();
    assert_eq!(spec.rows.len(), 5);
    let labels: Vec<String> = spec.rows.iter().map(|a| format!("{} {}", a.label(), a.gate_label())).collect();
    assert_eq!(
        labels,
        ["4x100-4x100 50-50", "4x100-4x20 50-50", "4x100-4x20 50-20", "4x50-4x20 20-20", "4x100 50"]
    );
}
