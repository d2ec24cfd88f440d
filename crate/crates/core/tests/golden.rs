//! Seed-0 regression fixtures, recorded once from this implementation.

use iemf_core::continual::{build_task_stream, train_incremental, ContinualConfig};
use iemf_core::data::{generate, DataSpec};
use iemf_core::model::LossOptions;
use iemf_core::training::train_step;
use iemf_core::{Batch, ModelConfig, MultimodalModel, OptimConfig};

const ZA: [f64; 16] = [
    0.19156435026165367,
    0.0,
    0.5109801164910003,
    0.0,
    0.0,
    0.0,
    0.16079270585994562,
    0.048837614399684814,
    0.0742477114847917,
    0.34995120244295097,
    0.3514173102338343,
    0.8257142215415859,
    0.06406345356727328,
    0.0,
    0.0,
    0.20270387272258827,
];
const ZV: [f64; 16] = [
    0.0,
    0.16464953798389442,
    0.02509837277703486,
    0.0,
    0.0,
    0.38145591235813303,
    0.0,
    0.0,
    0.025964038502761903,
    0.0,
    0.3221426835842089,
    0.0,
    0.0,
    0.0,
    0.2843929213709864,
    0.3600049770159971,
];
const LOSS: f64 = 3.6436066954774278;
const XI: f64 = 0.9744097652664504;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

fn seed0() -> (MultimodalModel, Batch) {
    let ds = generate(&DataSpec::default()).unwrap();
    let batch = ds.train.select(&(0..32).collect::<Vec<_>>()).unwrap();
    (MultimodalModel::new(ModelConfig::default(), 0).unwrap(), batch)
}

#[test]
fn encoder_latents() {
    let (model, batch) = seed0();
    let (za, zv) = model.encode(&batch).unwrap();
    assert!(za.row(0).iter().zip(ZA).all(|(a, b)| close(*a, b)), "{:?}", za.row(0));
    assert!(zv.row(0).iter().zip(ZV).all(|(a, b)| close(*a, b)), "{:?}", zv.row(0));
}

#[test]
fn loss_and_first_step_coefficient() {
    let (mut model, batch) = seed0();
    assert!(close(model.forward_full(&batch).unwrap().loss, LOSS));
    let s = train_step(&mut model, &batch, &OptimConfig::default(), &LossOptions::default()).unwrap();
    assert!(close(s.loss, LOSS) && close(s.scores.xi, XI), "({}, {})", s.loss, s.scores.xi);
}

#[test]
fn three_task_finetune_matrix() {
    let ds = generate(&DataSpec::default()).unwrap();
    let c = ContinualConfig::default();
    let stream = build_task_stream(&ds, c.tasks, c.classes_per_task, 0).unwrap();
    let optim = OptimConfig { epochs: 5, ..OptimConfig::default() };
    let model = MultimodalModel::new(ModelConfig::default(), 0).unwrap();
    let (mat, _) = train_incremental(&stream, model, &optim, &c).unwrap();
    // plain fine-tuning forgets old tasks completely on this stream
    assert_eq!(mat.complete_rows().unwrap(), vec![vec![1.0], vec![0.0, 1.0], vec![0.0, 0.0, 1.0]]);
}

#[test]
fn frozen_later_tasks_repeat_old_accuracies() {
    let ds = generate(&DataSpec::default()).unwrap();
    let c = ContinualConfig { later_eta: Some(0.0), ..ContinualConfig::default() };
    let stream = build_task_stream(&ds, c.tasks, c.classes_per_task, 0).unwrap();
    let optim = OptimConfig { epochs: 3, ..OptimConfig::default() };
    let model = MultimodalModel::new(ModelConfig::default(), 0).unwrap();
    let (mat, _) = train_incremental(&stream, model, &optim, &c).unwrap();
    let rows = mat.complete_rows().unwrap();
    for k in 1..rows.len() {
        assert_eq!(rows[k][..k], rows[k - 1][..]);
    }
}
