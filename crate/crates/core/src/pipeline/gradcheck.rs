use crate::error::{Error, Result};
use crate::inversion::bce_loss;
use crate::io::ArchConfig;
use crate::nn::{backward_input, backward_params, forward, Activation, BnMode, ForwardTrace, LayerSpec, Network};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest relative error an audit may report and still pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Coordinates whose gradient is tiny next to the largest one in their group
/// are compared against this fraction of that largest magnitude instead.
const REL_FLOOR: f64 = 1e-3;
const CALIBRATION_BATCH: usize = 64;

/// Which parameter coordinates an audit perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSampling {
    Skip,
    All,
    /// This many distinct coordinates per parameter tensor, chosen by seed.
    PerTensor(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub batch: usize,
    pub input_coords: usize,
    pub input_max_rel_err: f64,
    pub param_coords: usize,
    pub param_max_rel_err: Option<f64>,
    /// Coordinates left out because a perturbation moved some relu or leaky
    /// relu input across zero, where the central difference is meaningless.
    pub kink_skipped: usize,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.input_max_rel_err.max(self.param_max_rel_err.unwrap_or(0.0))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= GRADCHECK_TOLERANCE
    }
}

/// A network with seeded initial weights whose running statistics come from
/// one batch of 64 uniform[-1, 1] inputs, so that FixedStats layers see
/// normalized activations as they would after training.
pub fn seeded_network(arch: &ArchConfig, seed: u64) -> Result<Network> {
    let mut net = arch.build()?;
    net.init_weights(seed);
    if net.has_batchnorm() {
        let mut dims = vec![CALIBRATION_BATCH];
        dims.extend_from_slice(net.input_dims());
        let n = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(&dims, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())?;
        net.calibrate_running(&x)?;
    }
    Ok(net)
}

/// Signs of every input to a piecewise-linear activation.
fn kink_pattern(net: &Network, trace: &ForwardTrace) -> Vec<bool> {
    trace
        .activation_inputs()
        .filter(|(i, _)| {
            matches!(
                net.layers()[*i],
                LayerSpec::Activation(Activation::Relu | Activation::LeakyRelu(_))
            )
        })
        .flat_map(|(_, x)| x.data().iter().map(|v| *v > 0.0))
        .collect()
}

/// Loss at a perturbed point, or `None` when the perturbation crossed a kink.
fn loss(net: &Network, z: &Tensor, targets: &Tensor, base: &[bool]) -> Result<Option<f64>> {
    let (y, trace) = forward(net, z, BnMode::FixedStats)?;
    if kink_pattern(net, &trace) != base {
        return Ok(None);
    }
    Ok(Some(bce_loss(targets, &y)?.0))
}

fn central(up: Option<f64>, down: Option<f64>) -> Option<f64> {
    Some((up? - down?) / (2.0 * FD_STEP))
}

fn group_max_rel_err(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().map(|&(_, n)| n.abs()).fold(0.0, f64::max);
    let floor = (REL_FLOOR * scale).max(f64::MIN_POSITIVE);
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares analytic gradients of the mean cross-entropy between `net(z)`
/// and random targets against central differences, in FixedStats mode.
/// Every latent coordinate of a `batch`-sample input is checked; parameter
/// coordinates as `params` says.
pub fn gradient_audit(net: &Network, batch: usize, params: ParamSampling, seed: u64) -> Result<GradcheckReport> {
    if batch == 0 {
        return Err(Error::Config("gradient audit needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |dims: &[usize], lo: f64, hi: f64| {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    };
    let mut in_dims = vec![batch];
    in_dims.extend_from_slice(net.input_dims());
    let mut out_dims = vec![batch];
    out_dims.extend_from_slice(net.output_dims());
    let z = draw(&in_dims, -1.0, 1.0)?;
    let targets = draw(&out_dims, 0.0, 1.0)?;

    let (y, trace) = forward(net, &z, BnMode::FixedStats)?;
    let base = kink_pattern(net, &trace);
    let mut kink_skipped = 0;
    let (_, dy) = bce_loss(&targets, &y)?;
    let dz = backward_input(net, &trace, &dy)?;
    let mut pairs = Vec::with_capacity(z.numel());
    let mut probe = z.clone();
    for i in 0..z.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = loss(net, &probe, &targets, &base)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = loss(net, &probe, &targets, &base)?;
        probe.data_mut()[i] = orig;
        match central(up, down) {
            Some(fd) => pairs.push((dz.data()[i], fd)),
            None => kink_skipped += 1,
        }
    }
    let input_max_rel_err = group_max_rel_err(&pairs);

    let mut param_coords = 0;
    let mut param_max_rel_err = None;
    if params != ParamSampling::Skip {
        let grads = backward_params(net, &trace, &dy)?;
        let analytic: Vec<&Tensor> = grads.tensors().collect();
        let mut work = net.clone();
        let mut t = 0;
        let mut worst: f64 = 0.0;
        for layer in 0..net.params().len() {
            for p in 0..net.params()[layer].len() {
                let n = net.params()[layer][p].numel();
                let coords: Vec<usize> = match params {
                    ParamSampling::PerTensor(k) if k < n => sample(&mut rng, n, k).into_vec(),
                    _ => (0..n).collect(),
                };
                let mut pairs = Vec::with_capacity(coords.len());
                for &c in &coords {
                    let orig = work.params()[layer][p].data()[c];
                    work.params_mut()[layer][p].data_mut()[c] = orig + FD_STEP;
                    let up = loss(&work, &z, &targets, &base)?;
                    work.params_mut()[layer][p].data_mut()[c] = orig - FD_STEP;
                    let down = loss(&work, &z, &targets, &base)?;
                    work.params_mut()[layer][p].data_mut()[c] = orig;
                    match central(up, down) {
                        Some(fd) => pairs.push((analytic[t].data()[c], fd)),
                        None => kink_skipped += 1,
                    }
                }
                param_coords += pairs.len();
                worst = worst.max(group_max_rel_err(&pairs));
                t += 1;
            }
        }
        param_max_rel_err = Some(worst);
    }
    Ok(GradcheckReport {
        batch,
        input_coords: pairs.len(),
        input_max_rel_err,
        param_coords,
        param_max_rel_err,
        kink_skipped,
    })
}
