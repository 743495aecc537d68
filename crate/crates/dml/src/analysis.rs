//! Minima and posterior diagnostics: the parameter-noise flatness probe,
//! average posterior entropy, top-k probability-mass profiles, and
//! posterior-averaged ensemble evaluation.
//!
//! These read parameters and datasets without mutating anything; trials are
//! seeded individually so tables are reproducible row by row.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{softmax_values, LabelBatch, ProbBatch, LOG_FLOOR};
use crate::model::{forward_values, perturb, NetworkParams};
use crate::rng::mix;
use crate::tensor::Tensor;
use crate::trainer::train_loss;
use crate::Real;

/// One row of a flatness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessRow {
    pub sigma: Real,
    /// Mean perturbed train loss over the trials.
    pub mean_loss: f64,
    /// Sample standard deviation over the trials (0 for a single trial).
    pub std: f64,
    pub trials: usize,
    pub noise_seed: u64,
}

/// Perturbed-loss statistics per noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessTable {
    pub rows: Vec<FlatnessRow>,
    /// Loss of the unperturbed parameters.
    pub base_loss: f64,
}

impl FlatnessTable {
    /// Mean loss increase over the base loss at the given sigma.
    pub fn increase_at(&self, sigma: Real) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.sigma == sigma)
            .map(|r| r.mean_loss - self.base_loss)
    }
}

/// Flatness probe with a caller-supplied loss; the loss is evaluated at
/// seeded Gaussian perturbations of `params`.
///
/// Trial seeds derive as `mix(noise_seed, sigma_index, trial)`, so any row
/// can be recomputed in isolation. The `sigma = 0` row is the unperturbed
/// loss exactly, not an average of identical evaluations.
pub fn flatness_probe_with<F>(
    params: &NetworkParams,
    mut loss: F,
    sigmas: &[Real],
    trials: usize,
    noise_seed: u64,
) -> Result<FlatnessTable>
where
    F: FnMut(&NetworkParams) -> Result<f64>,
{
    if trials < 1 {
        return Err(Error::InvalidArgument("flatness probe needs trials >= 1".into()));
    }
    let base_loss = loss(params)?;
    let mut rows = Vec::with_capacity(sigmas.len());
    for (s_idx, &sigma) in sigmas.iter().enumerate() {
        if sigma == 0.0 {
            rows.push(FlatnessRow {
                sigma,
                mean_loss: base_loss,
                std: 0.0,
                trials,
                noise_seed,
            });
            continue;
        }
        let mut values = Vec::with_capacity(trials);
        for trial in 0..trials {
            let seed = mix(&[noise_seed, s_idx as u64, trial as u64]);
            let jittered = perturb(params, sigma, seed)?;
            values.push(loss(&jittered)?);
        }
        let mean = values.iter().sum::<f64>() / trials as f64;
        let std = if trials > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (trials as f64 - 1.0))
                .sqrt()
        } else {
            0.0
        };
        rows.push(FlatnessRow {
            sigma,
            mean_loss: mean,
            std,
            trials,
            noise_seed,
        });
    }
    Ok(FlatnessTable { rows, base_loss })
}

/// Train-loss flatness probe: mean train cross-entropy after adding
/// independent `N(0, sigma^2)` noise to every parameter.
pub fn flatness_probe(
    params: &NetworkParams,
    dataset: &Dataset,
    sigmas: &[Real],
    trials: usize,
    noise_seed: u64,
) -> Result<FlatnessTable> {
    flatness_probe_with(params, |p| train_loss(p, dataset), sigmas, trials, noise_seed)
}

/// Mean posterior entropy (nats) of one row of class probabilities.
pub fn row_entropy(p: &[Real]) -> f64 {
    let mut h = 0.0f64;
    for &pj in p {
        let pj = pj as f64;
        h -= pj * pj.max(LOG_FLOOR as f64).ln();
    }
    h
}

/// Mean posterior entropy of a probability batch.
pub fn entropy_of_probs(probs: &ProbBatch) -> f64 {
    let n = probs.rows();
    (0..n).map(|i| row_entropy(probs.row(i))).sum::<f64>() / n as f64
}

/// Mean posterior entropy of a model over the training split.
pub fn avg_posterior_entropy(params: &NetworkParams, dataset: &Dataset) -> Result<f64> {
    Ok(
        crate::trainer::eval_metrics(params, &dataset.train_x, &dataset.train_y)?
            .entropy,
    )
}

/// Dataset-averaged probability mass by posterior rank (rank 1 first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub masses: Vec<f64>,
}

impl RankProfile {
    fn new(masses: Vec<f64>) -> Self {
        assert!(
            masses.windows(2).all(|w| w[0] >= w[1]),
            "rank masses must be non-increasing: {masses:?}"
        );
        assert!(masses.iter().sum::<f64>() <= 1.0 + 1e-9);
        RankProfile { masses }
    }
}

/// Rank profile of a probability batch: each sample's posteriors are sorted
/// descending (ties broken by ascending class index) and averaged rank-wise.
pub fn topk_of_probs(probs: &ProbBatch, k: usize) -> Result<RankProfile> {
    if k > probs.cols() {
        return Err(Error::InvalidArgument(format!(
            "top-k rank {k} exceeds {} classes",
            probs.cols()
        )));
    }
    let n = probs.rows();
    let mut sums = vec![0.0f64; k];
    let mut row: Vec<(Real, usize)> = Vec::with_capacity(probs.cols());
    for i in 0..n {
        row.clear();
        row.extend(probs.row(i).iter().copied().zip(0..));
        row.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (r, &(p, _)) in row.iter().take(k).enumerate() {
            sums[r] += p as f64;
        }
    }
    Ok(RankProfile::new(sums.into_iter().map(|s| s / n as f64).collect()))
}

/// Rank profile of a model over the training split.
pub fn topk_mass_profile(params: &NetworkParams, dataset: &Dataset, k: usize) -> Result<RankProfile> {
    let logits = forward_values(params, &dataset.train_x)?;
    let probs = softmax_values(&logits, 1.0)?;
    topk_of_probs(&probs, k)
}

/// Top-1 accuracy of the arithmetic mean of member posteriors.
/// Ties resolve to the lowest class index.
pub fn ensemble_accuracy(
    members: &[NetworkParams],
    x: &Tensor,
    y: &LabelBatch,
) -> Result<f64> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble of zero members".into()))?;
    let (d, m) = (first.input_dim(), first.num_classes());
    for p in members {
        if p.input_dim() != d || p.num_classes() != m {
            return Err(Error::ShapeMismatch {
                op: "ensemble",
                lhs: vec![d, m],
                rhs: vec![p.input_dim(), p.num_classes()],
            });
        }
    }
    let n = x.rows();
    let mut mean = vec![0.0 as Real; n * m];
    for p in members {
        let logits = forward_values(p, x)?;
        let probs = softmax_values(&logits, 1.0)?;
        for (acc, &v) in mean.iter_mut().zip(probs.data()) {
            *acc += v;
        }
    }
    let k = members.len() as Real;
    for acc in mean.iter_mut() {
        *acc /= k;
    }
    let mut correct = 0usize;
    for (i, row) in mean.chunks(m).enumerate() {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        if best == y.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};
    use crate::losses::LabelBatch;
    use crate::model::{init_mlp, DenseLayer, MlpSpec};

    fn one_param_net(w: Real) -> NetworkParams {
        NetworkParams {
            layers: vec![DenseLayer {
                in_dim: 1,
                out_dim: 1,
                weight: vec![w],
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn sigma_zero_row_is_exactly_base_loss() {
        let dataset = gen_synthetic(SyntheticKind::Spiral, 60, 30, 3, 0.2, 3).unwrap();
        let params = init_mlp(&MlpSpec::new(2, vec![8], 3, 5)).unwrap();
        let table = flatness_probe(&params, &dataset, &[0.0, 0.05], 7, 99).unwrap();
        let base = train_loss(&params, &dataset).unwrap();
        assert_eq!(table.rows[0].mean_loss, base);
        assert_eq!(table.base_loss, base);
        assert_eq!(table.rows[0].std, 0.0);
    }

    /// Monte-Carlo vs the analytic second moment: for L(w) = w^2 at w = 0,
    /// the mean perturbed loss is E[(sigma * eps)^2] = sigma^2.
    #[test]
    fn quadratic_monte_carlo_matches_analytic() {
        let params = one_param_net(0.0);
        // Loss reads only the weight; the bias draw is consumed but inert.
        let loss = |p: &NetworkParams| -> Result<f64> {
            let w = p.layers[0].weight[0] as f64;
            Ok(w * w)
        };
        let table = flatness_probe_with(&params, loss, &[0.1], 100_000, 4242).unwrap();
        let mean = table.rows[0].mean_loss;
        assert!((mean - 0.01).abs() < 3e-4, "mean {mean}");
        // At a local minimum of a smooth loss, noise cannot help.
        assert!(mean >= table.base_loss);
    }

    #[test]
    fn probe_is_deterministic_and_needs_trials() {
        let params = one_param_net(0.3);
        let loss = |p: &NetworkParams| Ok((p.layers[0].weight[0] as f64).powi(2));
        let a = flatness_probe_with(&params, loss, &[0.05], 50, 7).unwrap();
        let b = flatness_probe_with(&params, loss, &[0.05], 50, 7).unwrap();
        assert_eq!(a, b);
        assert!(flatness_probe_with(&params, loss, &[0.05], 0, 7).is_err());
    }

    #[test]
    fn entropy_reference_values() {
        let m = 100;
        let uniform = ProbBatch::new(1, m, vec![1.0 / m as Real; m]).unwrap();
        assert!((entropy_of_probs(&uniform) - (m as f64).ln()).abs() < 1e-9);

        let mut onehot = vec![0.0; 4];
        onehot[2] = 1.0;
        let sharp = ProbBatch::new(1, 4, onehot).unwrap();
        assert!(entropy_of_probs(&sharp).abs() <= 1e-10);

        let p = ProbBatch::new(1, 2, vec![0.25, 0.75]).unwrap();
        let direct = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((entropy_of_probs(&p) - 0.5623351).abs() < 1e-7);
        assert!((entropy_of_probs(&p) - direct).abs() < 1e-12);
    }

    #[test]
    fn entropy_stays_in_bounds() {
        let mut rng = crate::rng::rng_from(&[0xE117]);
        for _ in 0..50 {
            use rand::Rng;
            let m = rng.gen_range(2..8usize);
            let mut row: Vec<Real> = (0..m).map(|_| rng.gen_range(0.001..1.0)).collect();
            let s: Real = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            let p = ProbBatch::new(1, m, row).unwrap();
            let h = entropy_of_probs(&p);
            assert!((0.0..=(m as f64).ln() + 1e-12).contains(&h));
        }
    }

    #[test]
    fn entropy_of_zero_network_is_log_m() {
        let dataset = gen_synthetic(SyntheticKind::Blobs, 30, 9, 3, 0.3, 2).unwrap();
        let params = init_mlp(&MlpSpec::new(2, vec![4], 3, 1)).unwrap();
        let zeroed = params.with_flat(&vec![0.0; params.num_params()]);
        let h = avg_posterior_entropy(&zeroed, &dataset).unwrap();
        assert!((h - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn topk_reference_cases() {
        let single = ProbBatch::new(1, 3, vec![0.7, 0.2, 0.1]).unwrap();
        let prof = topk_of_probs(&single, 3).unwrap();
        assert_eq!(prof.masses, vec![0.7, 0.2, 0.1]);

        let uniform = ProbBatch::new(2, 4, vec![0.25; 8]).unwrap();
        let prof = topk_of_probs(&uniform, 2).unwrap();
        assert_eq!(prof.masses, vec![0.25, 0.25]);

        let two = ProbBatch::new(2, 2, vec![0.6, 0.4, 0.3, 0.7]).unwrap();
        let prof = topk_of_probs(&two, 2).unwrap();
        assert!((prof.masses[0] - 0.65).abs() < 1e-12);
        assert!((prof.masses[1] - 0.35).abs() < 1e-12);

        assert!(topk_of_probs(&two, 3).is_err());
    }

    #[test]
    fn topk_is_non_increasing_on_random_batches() {
        let mut rng = crate::rng::rng_from(&[0x70CC]);
        for _ in 0..20 {
            use rand::Rng;
            let n = rng.gen_range(1..6usize);
            let m = rng.gen_range(2..7usize);
            let mut data = vec![0.0 as Real; n * m];
            for row in data.chunks_mut(m) {
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen_range(0.01..1.0);
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            let p = ProbBatch::new(n, m, data).unwrap();
            let prof = topk_of_probs(&p, m).unwrap();
            assert!(prof.masses.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    /// Zero-weight networks with log-probability biases emit exact chosen
    /// posteriors, which pins the ensemble rule itself.
    fn net_with_posterior(p: &[Real]) -> NetworkParams {
        NetworkParams {
            layers: vec![DenseLayer {
                in_dim: 1,
                out_dim: p.len(),
                weight: vec![0.0; p.len()],
                bias: p.iter().map(|&v| v.ln()).collect(),
            }],
        }
    }

    #[test]
    fn ensemble_mean_rule_hand_case() {
        let a = net_with_posterior(&[0.6, 0.4]);
        let b = net_with_posterior(&[0.2, 0.8]);
        let x = Tensor::matrix(1, 1, vec![0.0]);
        let y = LabelBatch::new(vec![1], 2).unwrap();
        // Member a alone predicts class 0 and is wrong.
        assert_eq!(ensemble_accuracy(&[a.clone()], &x, &y).unwrap(), 0.0);
        // Mean posterior [0.4, 0.6] predicts class 1.
        assert_eq!(ensemble_accuracy(&[a.clone(), b], &x, &y).unwrap(), 1.0);
        // K identical members equal the single member.
        let solo = ensemble_accuracy(&[a.clone()], &x, &y).unwrap();
        let trio = ensemble_accuracy(&[a.clone(), a.clone(), a], &x, &y).unwrap();
        assert_eq!(solo, trio);
    }

    #[test]
    fn ensemble_single_member_matches_member_accuracy() {
        let dataset = gen_synthetic(SyntheticKind::Spiral, 90, 45, 3, 0.2, 9).unwrap();
        let params = init_mlp(&MlpSpec::new(2, vec![8], 3, 3)).unwrap();
        let solo = ensemble_accuracy(&[params.clone()], &dataset.test_x, &dataset.test_y).unwrap();
        let metrics =
            crate::trainer::eval_metrics(&params, &dataset.test_x, &dataset.test_y).unwrap();
        assert_eq!(solo, metrics.accuracy);
    }

    #[test]
    fn ensemble_rejects_mismatched_members() {
        let a = init_mlp(&MlpSpec::new(2, vec![4], 3, 1)).unwrap();
        let b = init_mlp(&MlpSpec::new(3, vec![4], 3, 2)).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let y = LabelBatch::new(vec![0], 3).unwrap();
        assert!(ensemble_accuracy(&[a, b], &x, &y).is_err());
        assert!(ensemble_accuracy(&[], &x, &y).is_err());
    }

    /// Perturbation vanishes in the small-noise limit: the mean loss over
    /// many trials approaches the unperturbed loss as sigma shrinks.
    #[test]
    fn perturbation_limit_recovers_base_loss() {
        let dataset = gen_synthetic(SyntheticKind::Blobs, 60, 12, 3, 0.4, 5).unwrap();
        let params = init_mlp(&MlpSpec::new(2, vec![8], 3, 21)).unwrap();
        let base = train_loss(&params, &dataset).unwrap();
        let table = flatness_probe(&params, &dataset, &[1e-3, 1e-4], 1000, 31).unwrap();
        let dev_coarse = (table.rows[0].mean_loss - base).abs();
        let dev_fine = (table.rows[1].mean_loss - base).abs();
        assert!(dev_coarse < 2e-3, "sigma 1e-3 deviation {dev_coarse}");
        assert!(dev_fine < 2e-4, "sigma 1e-4 deviation {dev_fine}");
    }
}
