//! Finite-difference verification of every tape primitive and every loss.
//!
//! Each target draws random instances, computes the tape gradient, and
//! compares it against central differences from
//! [`crate::tensor::finite_diff_grad`]. Inputs for kinked primitives (relu,
//! clamp) are sampled away from their corners so the two-sided difference is
//! valid. Losses are checked with respect to the student's logits; the
//! end-to-end target differentiates a full two-member mutual-learning
//! objective with respect to all MLP parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, distill_objective, dml_e_objective, dml_objective, softmax_probs, Aggregation,
    LabelBatch, ProbBatch, Reduction,
};
use crate::model::{bind_params, forward, init_mlp, MlpSpec};
use crate::rng::rng_from;
use crate::tensor::{finite_diff_grad, max_rel_error, Tape, Tensor, Var};
use crate::Real;

const FD_STEP: Real = 1e-5;

/// Worst relative error observed for one check target.
#[derive(Clone, Debug)]
pub struct TargetResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

/// Results for the whole suite.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub targets: Vec<TargetResult>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.targets
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.worst() < tol
    }

    /// Error suitable for the CLI's dedicated exit code.
    pub fn require(&self, tol: f64) -> Result<()> {
        if self.passed(tol) {
            Ok(())
        } else {
            Err(Error::GradCheck(format!(
                "max relative error {:.3e} exceeds tolerance {tol:.1e}",
                self.worst()
            )))
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, len: usize, lo: Real, hi: Real) -> Vec<Real> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, m: usize) -> ProbBatch {
    let mut data = vec![0.0; n * m];
    for row in data.chunks_mut(m) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = rng.gen_range(0.05..1.0);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    ProbBatch::new(n, m, data).expect("normalized rows")
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LabelBatch {
    LabelBatch::new((0..n).map(|_| rng.gen_range(0..m)).collect(), m).expect("in range")
}

/// Checks the gradient of `build` (a scalar tape program over one leaf
/// tensor) against finite differences; returns the max relative error.
fn check_leaf<F>(shape: (usize, usize), values: &[Real], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (rows, cols) = shape;
    let eval = |vals: &[Real]| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::matrix(rows, cols, vals.to_vec()).with_grad());
        let out = build(&mut tape, leaf)?;
        Ok((tape, leaf, out))
    };
    let (tape, leaf, out) = eval(values)?;
    let ad = tape.backward(out)?.expect(leaf).data().to_vec();
    let mut fd_err: Option<Error> = None;
    let fd = finite_diff_grad(
        |vals| match eval(vals) {
            Ok((t, _, o)) => t.scalar_value(o),
            Err(e) => {
                fd_err = Some(e);
                Real::NAN
            }
        },
        values,
        FD_STEP,
    )?;
    if let Some(e) = fd_err {
        return Err(e);
    }
    Ok(max_rel_error(&ad, &fd) as f64)
}

fn check_primitives(rng: &mut ChaCha8Rng, trials: usize) -> Result<Vec<TargetResult>> {
    let mut worst = [0.0f64; 10];
    for _ in 0..trials {
        let n = rng.gen_range(1..4usize);
        let m = rng.gen_range(1..4usize);
        let k = rng.gen_range(1..4usize);

        // matmul: d(sum(X @ B))/dX with constant B.
        let b = Tensor::matrix(m, k, draw(rng, m * k, -2.0, 2.0));
        let x = draw(rng, n * m, -2.0, 2.0);
        worst[0] = worst[0].max(check_leaf((n, m), &x, |t, v| {
            let bc = t.constant(b.clone());
            let p = t.matmul(v, bc)?;
            Ok(t.sum(p))
        })?);

        // add / sub / scalar_mul against a same-shape constant and a scalar.
        let c = Tensor::matrix(n, m, draw(rng, n * m, -2.0, 2.0));
        let s = rng.gen_range(0.5..2.0);
        let x = draw(rng, n * m, -2.0, 2.0);
        worst[1] = worst[1].max(check_leaf((n, m), &x, |t, v| {
            let cc = t.constant(c.clone());
            let a = t.add(v, cc)?;
            let sc = t.scalar_const(s);
            let a2 = t.add(a, sc)?;
            Ok(t.sum(a2))
        })?);
        worst[2] = worst[2].max(check_leaf((n, m), &x, |t, v| {
            let cc = t.constant(c.clone());
            let d = t.sub(cc, v)?;
            Ok(t.sum(d))
        })?);
        worst[3] = worst[3].max(check_leaf((n, m), &x, |t, v| {
            let cc = t.constant(c.clone());
            let p = t.mul(v, cc)?;
            let sc = t.scalar_const(s);
            let p2 = t.mul(p, sc)?;
            Ok(t.sum(p2))
        })?);

        // relu: keep inputs away from the kink.
        let x: Vec<Real> = (0..n * m)
            .map(|_| {
                let v: Real = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        worst[4] = worst[4].max(check_leaf((n, m), &x, |t, v| {
            let r = t.relu(v);
            Ok(t.sum(r))
        })?);

        // exp / log / sum / mean.
        let x = draw(rng, n * m, -1.5, 1.5);
        worst[5] = worst[5].max(check_leaf((n, m), &x, |t, v| {
            let e = t.exp(v);
            Ok(t.mean(e))
        })?);
        let x = draw(rng, n * m, 0.1, 3.0);
        worst[6] = worst[6].max(check_leaf((n, m), &x, |t, v| {
            let l = t.log(v);
            Ok(t.sum(l))
        })?);
        let x = draw(rng, n * m, -2.0, 2.0);
        worst[7] = worst[7].max(check_leaf((n, m), &x, |t, v| Ok(t.sum(v)))?);
        worst[8] = worst[8].max(check_leaf((n, m), &x, |t, v| Ok(t.mean(v)))?);

        // clamp: inputs at least 5 fd steps from both bounds.
        let (lo, hi): (Real, Real) = (-0.5, 0.5);
        let x: Vec<Real> = (0..n * m)
            .map(|_| loop {
                let v: Real = rng.gen_range(-1.0..1.0);
                if (v - lo).abs() > 5.0 * FD_STEP && (v - hi).abs() > 5.0 * FD_STEP {
                    break v;
                }
            })
            .collect();
        worst[9] = worst[9].max(check_leaf((n, m), &x, |t, v| {
            let c = t.clamp(v, lo, hi);
            Ok(t.sum(c))
        })?);
    }
    let names = [
        "matmul", "add", "sub", "scalar_mul", "relu", "exp", "log", "sum", "mean", "clamp",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&name, max_rel_err)| TargetResult {
            name,
            trials,
            max_rel_err,
        })
        .collect())
}

fn reduction_of(rng: &mut ChaCha8Rng) -> Reduction {
    if rng.gen_bool(0.5) {
        Reduction::Mean
    } else {
        Reduction::Sum
    }
}

fn check_losses(rng: &mut ChaCha8Rng, trials: usize) -> Result<Vec<TargetResult>> {
    let mut results = Vec::new();
    let mut run = |name: &'static str,
                   rng: &mut ChaCha8Rng,
                   f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(f(rng)?);
        }
        results.push(TargetResult {
            name,
            trials,
            max_rel_err: worst,
        });
        Ok(())
    };

    run("cross_entropy", rng, &mut |rng| {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let labels = random_labels(rng, n, m);
        let red = reduction_of(rng);
        let z = draw(rng, n * m, -2.0, 2.0);
        check_leaf((n, m), &z, |t, v| {
            let p = softmax_probs(t, v, 1.0)?;
            cross_entropy(t, p, &labels, red)
        })
    })?;

    run("kl_div", rng, &mut |rng| {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let teacher = random_probs(rng, n, m);
        let red = reduction_of(rng);
        let z = draw(rng, n * m, -2.0, 2.0);
        check_leaf((n, m), &z, |t, v| {
            let p = softmax_probs(t, v, 1.0)?;
            crate::losses::kl_div(t, &teacher, p, red)
        })
    })?;

    run("dml_two_network", rng, &mut |rng| {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let peer = random_probs(rng, n, m);
        let labels = random_labels(rng, n, m);
        let red = reduction_of(rng);
        let z = draw(rng, n * m, -2.0, 2.0);
        check_leaf((n, m), &z, |t, v| {
            let p = softmax_probs(t, v, 1.0)?;
            dml_objective(t, p, std::slice::from_ref(&peer), &labels, red)
        })
    })?;

    run("dml_k_network", rng, &mut |rng| {
        let (n, m) = (rng.gen_range(1..4), rng.gen_range(2..5));
        let k_peers = rng.gen_range(2..5usize);
        let peers: Vec<ProbBatch> = (0..k_peers).map(|_| random_probs(rng, n, m)).collect();
        let labels = random_labels(rng, n, m);
        let red = reduction_of(rng);
        let z = draw(rng, n * m, -2.0, 2.0);
        check_leaf((n, m), &z, |t, v| {
            let p = softmax_probs(t, v, 1.0)?;
            dml_objective(t, p, &peers, &labels, red)
        })
    })?;

    run("dml_e_prob_mean", rng, &mut |rng| {
        let (n, m) = (rng.gen_range(1..4), rng.gen_range(2..5));
        let k_peers = rng.gen_range(2..5usize);
        let peers: Vec<ProbBatch> = (0..k_peers).map(|_| random_probs(rng, n, m)).collect();
        let labels = random_labels(rng, n, m);
        let red = reduction_of(rng);
        let z = draw(rng, n * m, -2.0, 2.0);
        check_leaf((n, m), &z, |t, v| {
            let p = softmax_probs(t, v, 1.0)?;
            dml_e_objective(t, p, &peers, None, &labels, Aggregation::ProbMean, red)
        })
    })?;

    run("dml_e_logit_mean", rng, &mut |rng| {
        let (n, m) = (rng.gen_range(1..4), rng.gen_range(2..5));
        let k_peers = rng.gen_range(2..5usize);
        let peer_logits: Vec<Tensor> = (0..k_peers)
            .map(|_| Tensor::matrix(n, m, draw(rng, n * m, -2.0, 2.0)))
            .collect();
        let peers: Vec<ProbBatch> = peer_logits
            .iter()
            .map(|l| crate::losses::softmax_values(l, 1.0))
            .collect::<Result<_>>()?;
        let labels = random_labels(rng, n, m);
        let red = reduction_of(rng);
        let z = draw(rng, n * m, -2.0, 2.0);
        check_leaf((n, m), &z, |t, v| {
            let p = softmax_probs(t, v, 1.0)?;
            dml_e_objective(
                t,
                p,
                &peers,
                Some(&peer_logits),
                &labels,
                Aggregation::LogitMean,
                red,
            )
        })
    })?;

    run("distill", rng, &mut |rng| {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let teacher = random_probs(rng, n, m);
        let labels = random_labels(rng, n, m);
        let temperature = rng.gen_range(0.5..4.0);
        let red = reduction_of(rng);
        let z = draw(rng, n * m, -2.0, 2.0);
        check_leaf((n, m), &z, |t, v| {
            distill_objective(t, v, &teacher, &labels, temperature, red)
        })
    })?;

    Ok(results)
}

/// A full two-member mutual objective differentiated with respect to every
/// parameter of a two-layer MLP, with relu pre-activations kept away from
/// their kinks so central differences are valid.
fn check_mlp_end_to_end(rng: &mut ChaCha8Rng, trials: usize) -> Result<TargetResult> {
    let mut worst = 0.0f64;
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < trials && attempts < trials * 30 {
        attempts += 1;
        let spec = MlpSpec::new(3, vec![4], 2, rng.gen());
        let params = init_mlp(&spec)?;
        let x = Tensor::matrix(4, 3, draw(rng, 12, -1.0, 1.0));
        let peer = random_probs(rng, 4, 2);
        let labels = random_labels(rng, 4, 2);

        // Reject draws with hidden pre-activations near the relu kink.
        let pre = {
            let l = &params.layers[0];
            let mut z = Tensor::matrix(
                4,
                l.out_dim,
                crate::tensor::matmul_2d(x.data(), &l.weight, 4, 3, l.out_dim),
            );
            for row in z.data_mut().chunks_mut(l.out_dim) {
                for (v, &b) in row.iter_mut().zip(&l.bias) {
                    *v += b;
                }
            }
            z
        };
        if pre.data().iter().any(|v| v.abs() < 50.0 * FD_STEP) {
            continue;
        }

        let loss_of = |flat: &[Real]| -> Result<Real> {
            let p = params.with_flat(flat);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let bound = bind_params(&mut tape, &p);
            let logits = forward(&mut tape, &bound, xv)?;
            let probs = softmax_probs(&mut tape, logits, 1.0)?;
            let loss = dml_objective(
                &mut tape,
                probs,
                std::slice::from_ref(&peer),
                &labels,
                Reduction::Mean,
            )?;
            Ok(tape.scalar_value(loss))
        };

        let flat = params.to_flat();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = bind_params(&mut tape, &params);
        let logits = forward(&mut tape, &bound, xv)?;
        let probs = softmax_probs(&mut tape, logits, 1.0)?;
        let loss = dml_objective(
            &mut tape,
            probs,
            std::slice::from_ref(&peer),
            &labels,
            Reduction::Mean,
        )?;
        let grads = tape.backward(loss)?;
        let mut ad = Vec::with_capacity(flat.len());
        for &(w, b) in &bound.layers {
            ad.extend_from_slice(grads.expect(w).data());
            ad.extend_from_slice(grads.expect(b).data());
        }
        let fd = finite_diff_grad(|f| loss_of(f).unwrap_or(Real::NAN), &flat, FD_STEP)?;
        worst = worst.max(max_rel_error(&ad, &fd) as f64);
        done += 1;
    }
    if done < trials {
        return Err(Error::GradCheck(format!(
            "mlp end-to-end check exhausted resampling budget ({done}/{trials} instances)"
        )));
    }
    Ok(TargetResult {
        name: "mlp_dml_end_to_end",
        trials,
        max_rel_err: worst,
    })
}

/// Runs the whole suite with `trials` random instances per target.
pub fn run_gradcheck(seed: u64, trials: usize) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("gradcheck needs trials >= 1".into()));
    }
    let mut rng = rng_from(&[seed, 0x6E4D]);
    let mut targets = check_primitives(&mut rng, trials)?;
    targets.extend(check_losses(&mut rng, trials)?);
    targets.push(check_mlp_end_to_end(&mut rng, trials)?);
    Ok(GradCheckReport { targets })
}
