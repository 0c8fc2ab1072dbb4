use super::*;
use crate::error::Error;
use crate::nn::{forward, Activation, BnMode, LayerSpec, Network};
use crate::prior::PriorSpec;
use crate::tensor::Tensor;
use crate::testutil::random_tensor;

/// d = 2 latent, one fully connected layer and a sigmoid, 4×4 images.
fn tiny_generator() -> Network {
    let mut g = Network::new(
        &[2],
        vec![
            LayerSpec::FullyConnected { inputs: 2, outputs: 16 },
            LayerSpec::Reshape { target: vec![1, 4, 4] },
            LayerSpec::Activation(Activation::Sigmoid),
        ],
    )
    .unwrap();
    let w = random_tensor(&[2, 16], 11).map(|v| 3.0 * v).unwrap();
    let b = random_tensor(&[16], 12).map(|v| 0.5 * v).unwrap();
    g.params_mut()[0] = vec![w, b];
    g
}

fn bn_generator() -> Network {
    let mut g = Network::new(
        &[3],
        vec![
            LayerSpec::FullyConnected { inputs: 3, outputs: 8 },
            LayerSpec::BatchNorm { features: 8 },
            LayerSpec::Activation(Activation::Tanh),
            LayerSpec::FullyConnected { inputs: 8, outputs: 9 },
            LayerSpec::Reshape { target: vec![1, 3, 3] },
            LayerSpec::Activation(Activation::Sigmoid),
        ],
    )
    .unwrap();
    g.init_weights(3);
    let mut s = 30;
    for ps in g.params_mut() {
        for p in ps.iter_mut() {
            s += 1;
            let r = random_tensor(p.dims(), s);
            p.data_mut().copy_from_slice(r.data());
        }
    }
    g
}

fn uniform() -> PriorSpec {
    PriorSpec::uniform(-1.0, 1.0).unwrap()
}

fn targets_for(g: &Network, z: &Tensor, mode: BnMode) -> Tensor {
    forward(g, z, mode).unwrap().0
}

#[test]
fn init_latents_is_seeded_and_in_support() {
    let a = init_latents(&uniform(), 8, 5, 1).unwrap();
    assert_eq!(a, init_latents(&uniform(), 8, 5, 1).unwrap());
    assert_ne!(a, init_latents(&uniform(), 8, 5, 2).unwrap());
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(init_latents(&uniform(), 0, 5, 1).is_err());
}

#[test]
fn gaussian_init_statistics() {
    let z = init_latents(&PriorSpec::gaussian(0.0, 1.0).unwrap(), 128, 100, 7).unwrap();
    let n = z.numel() as f64;
    let m = z.data().iter().sum::<f64>() / n;
    let sd = (z.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    assert!(m.abs() < 0.05);
    assert!((0.95..=1.05).contains(&sd));
}

#[test]
fn true_latents_are_a_fixed_point() {
    let g = bn_generator();
    let z_true = init_latents(&uniform(), 5, 3, 4).unwrap();
    let x = targets_for(&g, &z_true, BnMode::FixedStats);
    let cfg = InversionConfig {
        optimizer: Optimizer::Sgd,
        bn_mode: Some(BnMode::FixedStats),
        max_iters: 1,
        ..InversionConfig::default()
    };
    let mut grad_norm = f64::NAN;
    let d = descend(&g, &x, &uniform(), &cfg, z_true.clone(), 0, &mut |v: &StepView| {
        if v.iteration == 0 {
            grad_norm = v.grad.norm();
        }
    })
    .unwrap();
    assert_eq!(grad_norm, 0.0);
    assert_eq!(d.z, z_true);
}

#[test]
fn tiny_generator_is_inverted_to_the_global_optimum() {
    let g = tiny_generator();
    let z_true = Tensor::from_vec(&[3, 2], vec![0.4, -0.7, -0.2, 0.9, 0.65, 0.1]).unwrap();
    let x = targets_for(&g, &z_true, BnMode::FixedStats);
    let cfg = InversionConfig {
        restarts: 5,
        max_iters: 2000,
        tol: 1e-10,
        reduction: Reduction::PerSample,
        seed: 5,
        ..InversionConfig::default()
    };
    let r = invert_batch(&g, &x, &uniform(), &cfg).unwrap();
    assert!(r.mean_mae < 1e-2, "mae {}", r.mean_mae);
    let best = r.restart_final_bce.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(r.restart_final_bce[r.restart_index_chosen], best);

    // Grid search over [-1, 1]² per sample.
    for s in 0..3 {
        let xs = x.slice_batch(s, s + 1).unwrap();
        let found = bce_loss(&xs, &r.reconstructions.slice_batch(s, s + 1).unwrap())
            .unwrap()
            .0;
        let mut grid_best = f64::INFINITY;
        for a in 0..200 {
            let row: Vec<f64> = (0..200)
                .flat_map(|b| [-1.0 + 2.0 * a as f64 / 199.0, -1.0 + 2.0 * b as f64 / 199.0])
                .collect();
            let zs = Tensor::from_vec(&[200, 2], row).unwrap();
            let recon = targets_for(&g, &zs, BnMode::FixedStats);
            for b in 0..200 {
                let l = bce_loss(&xs, &recon.slice_batch(b, b + 1).unwrap()).unwrap().0;
                grid_best = grid_best.min(l);
            }
        }
        assert!(
            grid_best >= found - 1e-3,
            "sample {s}: grid {grid_best} vs found {found}"
        );
    }
}

#[test]
fn sgd_loss_is_mostly_non_increasing() {
    let g = tiny_generator();
    let z_true = init_latents(&uniform(), 4, 2, 8).unwrap();
    let x = targets_for(&g, &z_true, BnMode::FixedStats);
    let cfg = InversionConfig {
        optimizer: Optimizer::Sgd,
        alpha: 0.05,
        max_iters: 300,
        tol: 1e-14,
        ..InversionConfig::default()
    };
    let r = invert_batch(&g, &x, &uniform(), &cfg).unwrap();
    let h = &r.loss_history;
    let down = h.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.95 * (h.len() - 1) as f64);
}

#[test]
fn clipping_keeps_every_iterate_in_support() {
    let g = bn_generator();
    let x = targets_for(&g, &init_latents(&uniform(), 6, 3, 9).unwrap(), BnMode::BatchStats);
    let prior = PriorSpec::uniform(-0.3, 0.3).unwrap();
    let cfg = InversionConfig {
        policy: ConstraintPolicy::Clip,
        alpha: 0.2,
        max_iters: 100,
        ..InversionConfig::default()
    };
    let mut seen = 0;
    let r = invert_batch_observed(&g, &x, &prior, &cfg, |v| {
        seen += 1;
        assert!(v.z.data().iter().all(|c| (-0.3..=0.3).contains(c)));
    })
    .unwrap();
    assert!(seen > 1);
    assert!(r.z_star.data().iter().all(|c| (-0.3..=0.3).contains(c)));
}

#[test]
fn zero_weight_regularizer_matches_no_constraint_bitwise() {
    let g = bn_generator();
    let prior = PriorSpec::gaussian(0.0, 1.0).unwrap();
    let x = targets_for(&g, &init_latents(&prior, 6, 3, 10).unwrap(), BnMode::BatchStats);
    let base = InversionConfig {
        max_iters: 60,
        restarts: 2,
        ..InversionConfig::default()
    };
    let reg = InversionConfig {
        policy: ConstraintPolicy::StatsRegularize {
            gamma1: 0.0,
            gamma2: 0.0,
        },
        ..base.clone()
    };
    let a = invert_batch(&g, &x, &prior, &base).unwrap();
    let b = invert_batch(&g, &x, &prior, &reg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn policy_prior_mismatch_is_rejected() {
    let g = tiny_generator();
    let x = Tensor::full(&[2, 1, 4, 4], 0.5).unwrap();
    let clip = InversionConfig {
        policy: ConstraintPolicy::Clip,
        ..InversionConfig::default()
    };
    let normal = PriorSpec::gaussian(0.0, 1.0).unwrap();
    assert!(matches!(invert_batch(&g, &x, &normal, &clip), Err(Error::Config(_))));
    let reg = InversionConfig {
        policy: ConstraintPolicy::StatsRegularize {
            gamma1: 1.0,
            gamma2: 1.0,
        },
        ..InversionConfig::default()
    };
    assert!(matches!(invert_batch(&g, &x, &uniform(), &reg), Err(Error::Config(_))));
}

#[test]
fn batch_stats_inversion_of_one_target_is_a_mode_error() {
    let g = bn_generator();
    let x = Tensor::full(&[1, 1, 3, 3], 0.5).unwrap();
    assert!(matches!(
        invert_batch(&g, &x, &uniform(), &InversionConfig::default()),
        Err(Error::Mode(_))
    ));
    let fixed = InversionConfig {
        bn_mode: Some(BnMode::FixedStats),
        max_iters: 5,
        ..InversionConfig::default()
    };
    assert!(invert_batch(&g, &x, &uniform(), &fixed).is_ok());
}

#[test]
fn inversion_is_deterministic_and_consistent() {
    let g = bn_generator();
    let x = targets_for(&g, &init_latents(&uniform(), 6, 3, 12).unwrap(), BnMode::BatchStats);
    let cfg = InversionConfig {
        max_iters: 50,
        restarts: 3,
        seed: 4,
        ..InversionConfig::default()
    };
    let a = invert_batch(&g, &x, &uniform(), &cfg).unwrap();
    assert_eq!(a, invert_batch(&g, &x, &uniform(), &cfg).unwrap());
    assert_eq!(a.loss_history.len(), a.iterations_used + 1);
    let recon = targets_for(&g, &a.z_star, BnMode::BatchStats);
    assert_eq!(recon, a.reconstructions);
    let mean = a.per_image_mae.iter().sum::<f64>() / 6.0;
    assert!((mean - a.mean_mae).abs() < 1e-15);
}

#[test]
fn fixed_stats_batch_decomposes_into_solo_inversions() {
    let g = bn_generator();
    let z_true = init_latents(&uniform(), 4, 3, 13).unwrap();
    let x = targets_for(&g, &z_true, BnMode::FixedStats);
    let z0 = init_latents(&uniform(), 4, 3, 14).unwrap();
    let cfg = InversionConfig {
        bn_mode: Some(BnMode::FixedStats),
        reduction: Reduction::PerSample,
        max_iters: 40,
        tol: 1e-300,
        ..InversionConfig::default()
    };
    let mut batched = Vec::new();
    descend(&g, &x, &uniform(), &cfg, z0.clone(), 0, &mut |v: &StepView| {
        batched.push(v.z.clone())
    })
    .unwrap();
    for s in 0..4 {
        let mut solo = Vec::new();
        descend(
            &g,
            &x.slice_batch(s, s + 1).unwrap(),
            &uniform(),
            &cfg,
            z0.slice_batch(s, s + 1).unwrap(),
            0,
            &mut |v: &StepView| solo.push(v.z.clone()),
        )
        .unwrap();
        assert_eq!(solo.len(), batched.len());
        for (a, b) in solo.iter().zip(&batched) {
            assert_eq!(a.data(), b.slice_batch(s, s + 1).unwrap().data());
        }
    }
}

#[test]
fn probe_vanishes_without_batch_interaction() {
    let g = tiny_generator();
    let z = init_latents(&uniform(), 4, 2, 15).unwrap();
    let x = Tensor::full(&[4, 1, 4, 4], 0.3).unwrap();
    assert!(cross_gradient_probe(&g, &z, &x, BnMode::BatchStats, 0, 2).unwrap() <= 1e-12);
    let g = bn_generator();
    let z = init_latents(&uniform(), 4, 3, 16).unwrap();
    let x = Tensor::full(&[4, 1, 3, 3], 0.3).unwrap();
    assert!(cross_gradient_probe(&g, &z, &x, BnMode::FixedStats, 1, 3).unwrap() <= 1e-12);
    assert!(cross_gradient_probe(&g, &z, &x, BnMode::BatchStats, 1, 3).unwrap() > 1e-6);
    assert!(cross_gradient_probe(&g, &z, &x, BnMode::BatchStats, 1, 1).is_err());
}

#[test]
fn own_gradient_matches_finite_differences() {
    let g = bn_generator();
    let z = init_latents(&uniform(), 5, 3, 17).unwrap();
    let x = Tensor::full(&[5, 1, 3, 3], 0.3).unwrap();
    let i = 2;
    let analytic = own_gradient(&g, &z, &x, BnMode::BatchStats, i).unwrap();
    let loss = |z: &Tensor| {
        let r = forward(&g, z, BnMode::BatchStats).unwrap().0;
        bce_loss(&x.slice_batch(i, i + 1).unwrap(), &r.slice_batch(i, i + 1).unwrap())
            .unwrap()
            .0
    };
    for c in 0..3 {
        let h = 1e-6;
        let mut up = z.clone();
        up.data_mut()[i * 3 + c] += h;
        let mut down = z.clone();
        down.data_mut()[i * 3 + c] -= h;
        let fd = (loss(&up) - loss(&down)) / (2.0 * h);
        assert!((fd - analytic.data()[c]).abs() < 1e-7, "{fd} vs {}", analytic.data()[c]);
    }
}
