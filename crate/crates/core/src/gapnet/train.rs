//! Minibatch momentum-SGD training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;

use super::GapNet;
use crate::error::{Error, Result};
use crate::nn::Sgd;
use crate::tensor::Tensor;

/// Anything that can be fed to [`train`].
pub trait Labeled {
    fn image(&self) -> &Tensor<f32>;
    fn label(&self) -> usize;
}

impl Labeled for (Tensor<f32>, usize) {
    fn image(&self) -> &Tensor<f32> {
        &self.0
    }

    fn label(&self) -> usize {
        self.1
    }
}

/// Step schedule: `base` until `decay_at·epochs`, then `base·factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f32,
    pub factor: f32,
    pub decay_at: f32,
}

impl LrSchedule {
    pub fn constant(lr: f32) -> Self {
        Self {
            base: lr,
            factor: 1.0,
            decay_at: 1.0,
        }
    }

    pub fn lr(&self, epoch: usize, epochs: usize) -> f32 {
        let boundary = (self.decay_at * epochs as f32).round() as usize;
        if epoch >= boundary {
            self.base * self.factor
        } else {
            self.base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            schedule: LrSchedule {
                base: 0.02,
                factor: 0.1,
                decay_at: 2.0 / 3.0,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    /// Mean cross-entropy over the epoch's samples, measured on the fly.
    pub loss: f64,
    /// Fraction of samples classified correctly during the epoch.
    pub accuracy: f64,
}

/// Trains `net` in place. Batch order comes from a PCG stream seeded with
/// `seed`; gradients are averaged over each batch in sample order.
pub fn train<S: Labeled>(
    net: &mut GapNet<f32>,
    data: &[S],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if let Some(s) = data.iter().find(|s| s.label() >= net.class_count()) {
        return Err(Error::LabelOutOfRange {
            label: s.label(),
            classes: net.class_count(),
        });
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut opt = Sgd::new(&net.param_shapes(), config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            for &i in batch {
                let s = &data[i];
                let (loss, trace, grad) = net.loss_and_grad(s.image(), s.label())?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: loss as f64,
                    });
                }
                loss_sum += loss as f64;
                correct += usize::from(trace.predicted() == s.label());
                match acc.as_mut() {
                    None => acc = Some(grad.params),
                    Some(a) => {
                        for (t, g) in a.iter_mut().zip(&grad.params) {
                            t.add_assign(g)?;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let grads: Vec<Tensor<f32>> = acc
                .expect("non-empty batch")
                .into_iter()
                .map(|t| t.scale(scale))
                .collect();
            opt.step(&mut net.params_mut(), &grads, lr)?;
            if !net.params_mut().iter().all(|p| p.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::INFINITY,
                });
            }
        }
        let n = data.len() as f64;
        history.push(EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gapnet::{build_gapnet, ArchConfig, PoolingKind};

    fn tiny() -> ArchConfig {
        ArchConfig::conv_stack((1, 8, 8), &[4], 1, 6, 3, PoolingKind::Gap)
    }

    fn toy_data() -> Vec<(Tensor<f32>, usize)> {
        (0..6)
            .map(|i| {
                let label = i % 3;
                let img = Tensor::from_fn(&[1, 8, 8], |p| {
                    let (y, x) = (p / 8, p % 8);
                    if (x / 3) == label && y > 1 { 1.0 } else { 0.1 * ((p + i) % 3) as f32 }
                });
                (img, label)
            })
            .collect()
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut net = build_gapnet(&tiny(), 1).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            epochs: 3,
            schedule: LrSchedule::constant(0.0),
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let hist = train(&mut net, &toy_data(), &cfg, 7).unwrap();
        assert_eq!(net, before);
        assert!(hist.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    #[test]
    fn memorizes_single_sample() {
        let mut net = build_gapnet(&tiny(), 2).unwrap();
        let data = vec![toy_data().remove(1)];
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 1,
            schedule: LrSchedule::constant(0.05),
            ..TrainConfig::default()
        };
        train(&mut net, &data, &cfg, 3).unwrap();
        let (loss, _, _) = net.loss_and_grad(&data[0].0, data[0].1).unwrap();
        assert!(loss < 0.01, "loss {loss}");
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = build_gapnet(&tiny(), 5).unwrap();
            let h = train(&mut net, &toy_data(), &cfg, 11).unwrap();
            (net, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut net = build_gapnet(&tiny(), 1).unwrap();
        let empty: Vec<(Tensor<f32>, usize)> = vec![];
        assert!(train(&mut net, &empty, &TrainConfig::default(), 0).is_err());
        let bad = vec![(Tensor::zeros(&[1, 8, 8]), 3)];
        assert!(matches!(
            train(&mut net, &bad, &TrainConfig::default(), 0),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = build_gapnet(&tiny(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 1,
            schedule: LrSchedule::constant(1e6),
            momentum: 0.9,
            weight_decay: 0.0,
        };
        // bright inputs overflow f32 once the weights blow up
        let data: Vec<_> = toy_data().into_iter().map(|(x, y)| (x.scale(1e18), y)).collect();
        assert!(matches!(
            train(&mut net, &data, &cfg, 0),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn schedule_decays_at_two_thirds() {
        let s = TrainConfig::default().schedule;
        assert_eq!(s.lr(19, 30), 0.02);
        assert!((s.lr(20, 30) - 0.002).abs() < 1e-9);
    }
}
