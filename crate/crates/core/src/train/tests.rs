use std::cell::RefCell;

use super::*;
use crate::data::{synth_dataset, Colorspace, Sample};
use crate::graph::{MedNetConfig, Variant};
use crate::layers::ParamRole;

fn tiny_graph(seed: u64) -> ModelGraph<f32> {
    ModelGraph::assemble(&MedNetConfig::tiny(Variant::Gray, 3), &mut Rng::new(seed)).unwrap()
}

fn tiny_data(seed: u64) -> Dataset {
    synth_dataset(Colorspace::Gray, 3, 6, 16, seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 5, seed: 4, record_wall_time: false, ..TrainConfig::default() }
}

fn learnable(g: &ModelGraph<f32>) -> Vec<(String, Tensor<f32>)> {
    g.named_params()
        .into_iter()
        .filter(|(_, p)| p.role == ParamRole::Learnable)
        .map(|(n, p)| (n, p.value.clone()))
        .collect()
}

#[test]
fn zero_lr_leaves_parameters_untouched() {
    let mut g = tiny_graph(1);
    let before = learnable(&g);
    let running = g.param("stem.conv1.bn.running_mean").unwrap().value.clone();
    let cfg = TrainConfig { lr: 0.0, ..quick(3) };
    train(&mut g, &tiny_data(2), &tiny_data(3), &cfg).unwrap();
    assert_eq!(learnable(&g), before);
    // Running statistics still track the data.
    assert_ne!(g.param("stem.conv1.bn.running_mean").unwrap().value, running);
}

#[test]
fn same_seed_same_history() {
    let run = || {
        let mut g = tiny_graph(5);
        let cfg = TrainConfig { augment: vec![AugmentOp::HFlip, AugmentOp::CropPad], ..quick(3) };
        let h = train(&mut g, &tiny_data(2), &tiny_data(3), &cfg).unwrap();
        (h, learnable(&g))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|r| r.wall_time_s == 0.0));
    assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.train_accuracy) && r.train_loss >= 0.0));
}

#[test]
fn training_reduces_loss() {
    let mut g = tiny_graph(6);
    let data = tiny_data(8);
    let cfg = TrainConfig { lr: 0.05, batch_size: 6, ..quick(15) };
    let h = train(&mut g, &data, &data, &cfg).unwrap();
    assert!(h.last().unwrap().train_loss < h[0].train_loss, "{h:?}");
}

#[test]
fn incompatible_inputs_are_rejected() {
    let mut g = tiny_graph(1);
    let data = tiny_data(2);
    let four = synth_dataset(Colorspace::Gray, 4, 3, 16, 1).unwrap();
    assert!(train(&mut g, &four, &data, &quick(1)).is_err());
    let color = synth_dataset(Colorspace::Color, 3, 3, 16, 1).unwrap();
    let err = train(&mut g, &color, &data, &quick(1)).unwrap_err();
    assert!(matches!(err, Error::ColorspaceMismatch { .. }), "{err}");
    let big = synth_dataset(Colorspace::Gray, 3, 3, 20, 1).unwrap();
    assert!(train(&mut g, &big, &data, &quick(1)).is_err());
    let cfg = TrainConfig { batch_size: 100, ..quick(1) };
    assert!(train(&mut g, &data, &data, &cfg).is_err());
    assert!(TrainConfig { lr: -1.0, ..quick(1) }.validate().is_err());
    assert!(TrainConfig { momentum: 1.0, ..quick(1) }.validate().is_err());
    assert!(TrainConfig { epochs: 0, ..quick(1) }.validate().is_err());
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let mut g = tiny_graph(1);
    let data = tiny_data(2);
    let cfg = TrainConfig { lr: 1e30, momentum: 0.0, ..quick(3) };
    match train(&mut g, &data, &data, &cfg) {
        Err(Error::Diverged { epoch, batch, .. }) => assert!(epoch >= 1 && batch < 4),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn batches_keep_partial_and_fold_singletons() {
    let order: Vec<usize> = (0..11).collect();
    let b = batches(&order, 4);
    assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 4, 3]);
    let order: Vec<usize> = (0..9).collect();
    let b = batches(&order, 4);
    assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 5]);
    assert_eq!(b.concat(), order);
    assert_eq!(batches(&order[..1], 4).len(), 1);
}

#[test]
fn evaluate_does_not_mutate() {
    let g = tiny_graph(2);
    let before: Vec<Tensor<f32>> = g.named_params().into_iter().map(|(_, p)| p.value.clone()).collect();
    let a = evaluate(&g, &tiny_data(1)).unwrap();
    let b = evaluate(&g, &tiny_data(1)).unwrap();
    assert_eq!(a, b);
    let after: Vec<Tensor<f32>> = g.named_params().into_iter().map(|(_, p)| p.value.clone()).collect();
    assert_eq!(before, after);
}

/// Points each 1×1 image's single pixel value (the label) at a class.
struct Oracle(usize);

impl Predictor for Oracle {
    fn num_classes(&self) -> usize {
        self.0
    }

    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f64>> {
        let n = batch.shape()[0];
        Ok(Tensor::from_fn(&[n, self.0], |i| if batch.data()[i / self.0] as usize == i % self.0 { 5.0 } else { 0.0 }))
    }
}

struct RandomLogits(RefCell<Rng>);

impl Predictor for RandomLogits {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f64>> {
        let mut rng = self.0.borrow_mut();
        Ok(Tensor::from_fn(&[batch.shape()[0], 2], |_| rng.normal()))
    }
}

fn labelled(counts: &[usize]) -> Dataset {
    let mut samples = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        for i in 0..n {
            samples.push(Sample { image: Tensor::full(&[1, 1, 1], label as f32), label, source_id: i.to_string() });
        }
    }
    Dataset::new(samples, (0..counts.len()).map(|k| k.to_string()).collect(), Colorspace::Gray).unwrap()
}

#[test]
fn perfect_predictor() {
    let data = labelled(&[3, 7, 5]);
    let e = evaluate(&Oracle(3), &data).unwrap();
    assert_eq!(e.accuracy, 1.0);
    assert_eq!(e.confusion, vec![vec![3, 0, 0], vec![0, 7, 0], vec![0, 0, 5]]);
}

#[test]
fn random_logits_are_at_chance() {
    let data = labelled(&[5000, 5000]);
    let e = evaluate(&RandomLogits(RefCell::new(Rng::new(17))), &data).unwrap();
    // Binomial(10000, 0.5) has standard deviation 0.005; 0.02 is four of them.
    assert!((e.accuracy - 0.5).abs() < 0.02, "{}", e.accuracy);
    let rows: Vec<usize> = e.confusion.iter().map(|r| r.iter().sum()).collect();
    assert_eq!(rows, vec![5000, 5000]);
    let trace: usize = (0..2).map(|i| e.confusion[i][i]).sum();
    assert_eq!(e.accuracy, trace as f64 / 10000.0);
}

#[test]
fn evaluate_errors() {
    let empty = Dataset::new(vec![], vec!["a".into(), "b".into()], Colorspace::Gray).unwrap();
    assert!(evaluate(&Oracle(2), &empty).is_err());
    assert!(evaluate(&Oracle(3), &labelled(&[1, 1])).is_err());
}
