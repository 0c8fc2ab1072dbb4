use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{discriminator_loss, generator_loss};
use crate::error::{Error, Result};
use crate::nn::{backward_input, backward_params, forward, BnMode, Network, BN_MOMENTUM};
use crate::prior::PriorSpec;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub prior: PriorSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch_size: 128,
            adam: AdamConfig::GAN,
            prior: PriorSpec::Uniform { a: -1.0, b: 1.0 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.prior.validated()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "training batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Losses of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean discriminator score on the real and generated batches of the D step.
    pub d_real: f64,
    pub d_fake: f64,
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.numel() as f64
}

/// Draws real minibatches from reshuffled passes over the dataset.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn next(&mut self, data: &Tensor, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = self.order.len();
        let per: usize = data.dims()[1..].iter().product();
        let mut out = Vec::with_capacity(batch * per);
        for _ in 0..batch {
            if self.cursor == n {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
        }
        let mut dims = data.dims().to_vec();
        dims[0] = batch;
        Tensor::from_vec(&dims, out)
    }
}

fn at_iteration(iteration: usize, e: Error) -> Error {
    match e {
        Error::Numeric { context } | Error::NonFiniteLoss { context, .. } => Error::Divergence { iteration, context },
        other => other,
    }
}

/// Alternating training: per iteration one discriminator update on a real
/// batch (label 1) and a generated batch (label 0), then one generator update
/// with the non-saturating objective. Batch norm uses batch statistics, and
/// every pass that feeds an update also folds its statistics into the
/// running averages. `on_iter` sees each record as it is produced.
pub fn train_gan(
    g: &mut Network,
    d: &mut Network,
    data: &Tensor,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let latent = g
        .latent_dim()
        .ok_or_else(|| Error::Config("generator input must be a flat latent vector".into()))?;
    if data.dims().get(1..) != Some(d.input_dims()) {
        return Err(Error::dim(format!(
            "dataset {} does not match discriminator input {:?}",
            data.shape(),
            d.input_dims()
        )));
    }
    if g.output_dims() != d.input_dims() {
        return Err(Error::dim(format!(
            "generator output {:?} does not match discriminator input {:?}",
            g.output_dims(),
            d.input_dims()
        )));
    }
    if d.output_dims().iter().product::<usize>() != 1 {
        return Err(Error::dim("discriminator must emit one score per sample"));
    }
    if data.dims()[0] < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} images, fewer than one batch of {}",
            data.dims()[0],
            cfg.batch_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher {
        order: (0..data.dims()[0]).collect(),
        cursor: data.dims()[0],
    };
    let mut d_state = AdamState::default();
    let mut g_state = AdamState::default();
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let step = |e| at_iteration(it, e);
        let real = batcher.next(data, cfg.batch_size, &mut rng)?;
        let z = cfg.prior.sample(cfg.batch_size, latent, &mut rng)?;
        let (fake, g_trace) = forward(g, &z, BnMode::BatchStats).map_err(step)?;

        // Discriminator step.
        let (s_real, t_real) = forward(d, &real, BnMode::BatchStats).map_err(step)?;
        let (s_fake, t_fake) = forward(d, &fake, BnMode::BatchStats).map_err(step)?;
        let (d_loss, gr, gf) = discriminator_loss(&s_real, &s_fake).map_err(step)?;
        if !d_loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                context: "discriminator loss".into(),
            });
        }
        let mut d_grads = backward_params(d, &t_real, &gr).map_err(step)?;
        d_grads.add_assign(&backward_params(d, &t_fake, &gf).map_err(step)?)?;
        d.update_running(&t_real, BN_MOMENTUM)?;
        d.update_running(&t_fake, BN_MOMENTUM)?;
        adam_step(
            d.params_mut().iter_mut().flatten(),
            d_grads.tensors(),
            &mut d_state,
            &cfg.adam,
        )?;

        // Generator step against the updated discriminator.
        let (s_gen, t_gen) = forward(d, &fake, BnMode::BatchStats).map_err(step)?;
        let (g_loss, gs) = generator_loss(&s_gen).map_err(step)?;
        if !g_loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                context: "generator loss".into(),
            });
        }
        let g_out = backward_input(d, &t_gen, &gs).map_err(step)?;
        let g_grads = backward_params(g, &g_trace, &g_out).map_err(step)?;
        g.update_running(&g_trace, BN_MOMENTUM)?;
        adam_step(
            g.params_mut().iter_mut().flatten(),
            g_grads.tensors(),
            &mut g_state,
            &cfg.adam,
        )?;

        for p in g.params().iter().chain(d.params()).flatten() {
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration: it,
                    context: "non-finite weights after update".into(),
                });
            }
        }
        let rec = TrainRecord {
            iteration: it,
            d_loss,
            g_loss,
            d_real: mean(&s_real),
            d_fake: mean(&s_fake),
        };
        on_iter(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Fraction of correctly classified samples on `real` (score > 0.5) and an
/// equal number of fresh generations (score ≤ 0.5). Real and generated
/// images are scored as separate batches.
pub fn discriminator_accuracy(
    g: &Network,
    d: &Network,
    real: &Tensor,
    prior: &PriorSpec,
    mode: BnMode,
    seed: u64,
) -> Result<f64> {
    let latent = g
        .latent_dim()
        .ok_or_else(|| Error::Config("generator input must be a flat latent vector".into()))?;
    let n = real.dims()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = prior.sample(n, latent, &mut rng)?;
    let (fake, _) = forward(g, &z, mode)?;
    let (s_real, _) = forward(d, real, mode)?;
    let (s_fake, _) = forward(d, &fake, mode)?;
    let correct =
        s_real.data().iter().filter(|&&s| s > 0.5).count() + s_fake.data().iter().filter(|&&s| s <= 0.5).count();
    Ok(correct as f64 / (2 * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use crate::testutil::random_tensor;

    fn tiny_pair(seed: u64) -> (Network, Network) {
        let mut g = Network::new(
            &[4],
            vec![
                LayerSpec::FullyConnected { inputs: 4, outputs: 8 },
                LayerSpec::BatchNorm { features: 8 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::FullyConnected { inputs: 8, outputs: 9 },
                LayerSpec::Reshape { target: vec![1, 3, 3] },
                LayerSpec::Activation(Activation::Sigmoid),
            ],
        )
        .unwrap();
        let mut d = Network::new(
            &[1, 3, 3],
            vec![
                LayerSpec::Conv {
                    in_ch: 1,
                    out_ch: 2,
                    k: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::BatchNorm { features: 2 },
                LayerSpec::Activation(Activation::LeakyRelu(0.2)),
                LayerSpec::Reshape { target: vec![18] },
                LayerSpec::FullyConnected { inputs: 18, outputs: 1 },
                LayerSpec::Activation(Activation::Sigmoid),
            ],
        )
        .unwrap();
        g.init_weights(seed);
        d.init_weights(seed + 1);
        (g, d)
    }

    fn toy_data() -> Tensor {
        random_tensor(&[20, 1, 3, 3], 3).map(|v| (v + 1.0) / 2.0).unwrap()
    }

    fn cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_leave_weights_untouched() {
        let (mut g, mut d) = tiny_pair(1);
        let (g0, d0) = (g.clone(), d.clone());
        let h = train_gan(&mut g, &mut d, &toy_data(), &cfg(0), |_| {}).unwrap();
        assert!(h.is_empty());
        assert_eq!(g, g0);
        assert_eq!(d, d0);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let run = || {
            let (mut g, mut d) = tiny_pair(1);
            let h = train_gan(&mut g, &mut d, &toy_data(), &cfg(30), |_| {}).unwrap();
            (g, d, h)
        };
        let (g1, d1, h1) = run();
        let (g2, d2, h2) = run();
        assert_eq!(g1, g2);
        assert_eq!(d1, d2);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 30);
        assert!(h1.iter().all(|r| r.d_loss.is_finite() && r.g_loss.is_finite()));
        for r in g1.running().iter().chain(d1.running()).flatten() {
            assert!(r.var.data().iter().all(|&v| v.is_finite() && v >= 0.0));
        }
        let (g0, _) = tiny_pair(1);
        assert_ne!(g0, g1);
    }

    #[test]
    fn first_iteration_losses_are_near_chance() {
        let (mut g, mut d) = tiny_pair(1);
        let h = train_gan(&mut g, &mut d, &toy_data(), &cfg(1), |_| {}).unwrap();
        assert!((h[0].d_loss - 2.0 * std::f64::consts::LN_2).abs() < 0.05);
    }

    #[test]
    fn rejects_mismatched_data_and_small_batches() {
        let (mut g, mut d) = tiny_pair(1);
        let wrong = Tensor::zeros(&[20, 1, 4, 4]).unwrap();
        assert!(train_gan(&mut g, &mut d, &wrong, &cfg(1), |_| {}).is_err());
        let mut c = cfg(1);
        c.batch_size = 1;
        assert!(matches!(
            train_gan(&mut g, &mut d, &toy_data(), &c, |_| {}),
            Err(Error::Config(_))
        ));
        c.batch_size = 64;
        assert!(train_gan(&mut g, &mut d, &toy_data(), &c, |_| {}).is_err());
    }

    #[test]
    fn accuracy_lies_in_unit_interval() {
        let (g, d) = tiny_pair(1);
        let acc = discriminator_accuracy(
            &g,
            &d,
            &toy_data(),
            &PriorSpec::uniform(-1.0, 1.0).unwrap(),
            BnMode::BatchStats,
            4,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
