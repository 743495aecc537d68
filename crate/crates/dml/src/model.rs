//! MLP classifiers: seeded initialization, forward evaluation, parameter
//! perturbation, and the binary checkpoint format.
//!
//! Networks are plain affine/ReLU stacks ending in a linear layer whose
//! outputs are logits; posteriors come from [`crate::losses::softmax_probs`].
//! Parameters are immutable snapshots between optimizer steps, so cohort
//! members can be handed between workers without locking.

use rand_distr::{Distribution, Normal};

use crate::crc32::crc32;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{matmul_2d, Tape, Tensor, Var};
use crate::Real;

/// Architecture plus the seed that fully determines initial weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, init_seed: u64) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims,
            num_classes,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("hidden dims must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }
}

/// One affine layer: `weight` is `in_dim x out_dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<Real>,
    pub bias: Vec<Real>,
}

/// Ordered layer weights and biases of one cohort member.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<DenseLayer>,
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// All parameters as one flat vector, layer by layer, weights then bias.
    pub fn to_flat(&self) -> Vec<Real> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Same architecture with parameter values taken from `flat`.
    pub fn with_flat(&self, flat: &[Real]) -> NetworkParams {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length mismatch");
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            let w_len = l.weight.len();
            let b_len = l.bias.len();
            layers.push(DenseLayer {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weight: flat[off..off + w_len].to_vec(),
                bias: flat[off + w_len..off + w_len + b_len].to_vec(),
            });
            off += w_len + b_len;
        }
        NetworkParams { layers }
    }
}

/// He-style initialization: weights `N(0, 2/fan_in)`, biases zero, fully
/// determined by `spec.init_seed`.
pub fn init_mlp(spec: &MlpSpec) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = rng_from(&[spec.init_seed]);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let std = (2.0 / fan_in as Real).sqrt();
            let normal = Normal::new(0.0, std).expect("std is finite and positive");
            let weight = (0..fan_in * fan_out)
                .map(|_| normal.sample(&mut rng))
                .collect();
            DenseLayer {
                in_dim: fan_in,
                out_dim: fan_out,
                weight,
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(NetworkParams { layers })
}

/// Tape handles for one member's parameters.
pub struct BoundParams {
    /// Per layer: (weight leaf `in x out`, bias leaf `1 x out`).
    pub layers: Vec<(Var, Var)>,
}

/// Registers every weight and bias as a differentiable tape leaf.
pub fn bind_params(tape: &mut Tape, params: &NetworkParams) -> BoundParams {
    let layers = params
        .layers
        .iter()
        .map(|l| {
            let w = tape.leaf(
                Tensor::matrix(l.in_dim, l.out_dim, l.weight.clone()).with_grad(),
            );
            let b = tape.leaf(Tensor::matrix(1, l.out_dim, l.bias.clone()).with_grad());
            (w, b)
        })
        .collect();
    BoundParams { layers }
}

/// Logits of a bound network for an `N x input_dim` batch already on tape.
///
/// Bias addition is expressed as `ones(N,1) @ bias(1,out)` so the whole pass
/// stays inside the tape's primitive set; the arithmetic is identical to a
/// direct row-wise bias add.
pub fn forward(tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let ones = tape.constant(Tensor::matrix(n, 1, vec![1.0; n]));
    let last = bound.layers.len() - 1;
    let mut h = x;
    for (idx, &(w, b)) in bound.layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        let b_rows = tape.matmul(ones, b)?;
        let zb = tape.add(z, b_rows)?;
        h = if idx < last { tape.relu(zb) } else { zb };
    }
    Ok(h)
}

/// Logits without a tape; same kernel and operation order as [`forward`].
pub fn forward_values(params: &NetworkParams, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: x.shape().to_vec(),
            rhs: vec![x.shape().first().copied().unwrap_or(0), params.input_dim()],
        });
    }
    let n = x.rows();
    let last = params.layers.len() - 1;
    let mut h = x.data().to_vec();
    let mut h_cols = x.cols();
    for (idx, l) in params.layers.iter().enumerate() {
        let mut z = matmul_2d(&h, &l.weight, n, h_cols, l.out_dim);
        for row in z.chunks_mut(l.out_dim) {
            for (zv, &bv) in row.iter_mut().zip(&l.bias) {
                *zv += bv;
            }
        }
        if idx < last {
            for zv in z.iter_mut() {
                if *zv < 0.0 {
                    *zv = 0.0;
                }
            }
        }
        h = z;
        h_cols = l.out_dim;
    }
    Ok(Tensor::matrix(n, h_cols, h))
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every weight and bias.
pub fn perturb(params: &NetworkParams, sigma: Real, noise_seed: u64) -> Result<NetworkParams> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "perturb sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(params.clone());
    }
    let mut rng = rng_from(&[noise_seed]);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let layers = params
        .layers
        .iter()
        .map(|l| DenseLayer {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            weight: l.weight.iter().map(|&w| w + normal.sample(&mut rng)).collect(),
            bias: l.bias.iter().map(|&b| b + normal.sample(&mut rng)).collect(),
        })
        .collect();
    Ok(NetworkParams { layers })
}

const CKPT_MAGIC: [u8; 4] = *b"DMLC";
const CKPT_VERSION: u8 = 1;

/// Serializes parameters: magic "DMLC", version, layer count, then per layer
/// rows, cols, weights, biases (f64 little-endian), and a trailing CRC32.
pub fn save_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        for &w in &l.weight {
            out.extend_from_slice(&(w as f64).to_le_bytes());
        }
        for &b in &l.bias {
            out.extend_from_slice(&(b as f64).to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated {
                offset: self.off,
                needed: self.off + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64_le(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes produced by [`save_checkpoint`].
pub fn load_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { bytes, off: 0 };
    let magic = r.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::CheckpointBadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.take(1)?[0];
    if version != CKPT_VERSION {
        return Err(Error::CheckpointBadVersion {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let layer_count = r.u32_le()? as usize;
    let mut layers = Vec::with_capacity(layer_count.min(1024));
    for _ in 0..layer_count {
        let rows = r.u32_le()? as usize;
        let cols = r.u32_le()? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(
                "checkpoint: zero layer dimension".into(),
            ));
        }
        let mut weight = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            weight.push(r.f64_le()? as Real);
        }
        let mut bias = Vec::with_capacity(cols);
        for _ in 0..cols {
            bias.push(r.f64_le()? as Real);
        }
        layers.push(DenseLayer {
            in_dim: rows,
            out_dim: cols,
            weight,
            bias,
        });
    }
    let body_end = r.off;
    let stored = r.u32_le()?;
    if r.off != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint: {} trailing bytes after CRC",
            bytes.len() - r.off
        )));
    }
    let computed = crc32(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::CheckpointCrc { stored, computed });
    }
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::InvalidArgument(format!(
                "checkpoint: layer output width {} does not feed next layer input {}",
                pair[0].out_dim, pair[1].in_dim
            )));
        }
    }
    Ok(NetworkParams { layers })
}

/// Loads a checkpoint and verifies it matches the architecture of `spec`.
pub fn load_checkpoint_for_spec(bytes: &[u8], spec: &MlpSpec) -> Result<NetworkParams> {
    let params = load_checkpoint(bytes)?;
    let expected = spec.layer_dims();
    let found = params.layer_dims();
    if expected != found {
        return Err(Error::CheckpointShape { expected, found });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use crate::tensor::max_rel_error;
    use rand::Rng;

    fn spec_2_4_3(seed: u64) -> MlpSpec {
        MlpSpec::new(2, vec![4], 3, seed)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_mlp(&spec_2_4_3(9)).unwrap();
        let b = init_mlp(&spec_2_4_3(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let a = init_mlp(&MlpSpec::new(8, vec![32, 32], 5, 1)).unwrap();
        let b = init_mlp(&MlpSpec::new(8, vec![32, 32], 5, 2)).unwrap();
        let (fa, fb) = (a.to_flat(), b.to_flat());
        // Biases are zero in both; compare weights only.
        let mut total = 0usize;
        let mut differing = 0usize;
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (&x, &y) in la.weight.iter().zip(&lb.weight) {
                total += 1;
                if x != y {
                    differing += 1;
                }
            }
        }
        assert!(differing as f64 / total as f64 >= 0.99, "{differing}/{total}");
        assert_eq!(fa.len(), fb.len());
    }

    #[test]
    fn empty_hidden_is_single_softmax_layer() {
        let p = init_mlp(&MlpSpec::new(5, vec![], 3, 0)).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert_eq!((p.layers[0].in_dim, p.layers[0].out_dim), (5, 3));
    }

    #[test]
    fn he_std_matches_fan_in() {
        let p = init_mlp(&MlpSpec::new(64, vec![256], 10, 3)).unwrap();
        let w = &p.layers[0].weight;
        let mean: Real = w.iter().sum::<Real>() / w.len() as Real;
        let var: Real = w.iter().map(|&x| (x - mean) * (x - mean)).sum::<Real>() / w.len() as Real;
        let expected = 2.0 / 64.0;
        assert!(((var - expected) / expected).abs() < 0.1, "var {var}");
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = spec_2_4_3(0);
        let p = init_mlp(&spec).unwrap();
        let zeroed = p.with_flat(&vec![0.0; p.num_params()]);
        let x = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.9]);
        let logits = forward_values(&zeroed, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_input_selects_weight_row() {
        let mut p = init_mlp(&MlpSpec::new(3, vec![], 4, 1)).unwrap();
        p.layers[0].bias = vec![0.1, 0.2, 0.3, 0.4];
        let x = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]);
        let logits = forward_values(&p, &x).unwrap();
        let w = &p.layers[0].weight;
        for j in 0..4 {
            let expect = w[4 + j] + p.layers[0].bias[j];
            assert!((logits.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_straight_line_evaluator() {
        // Independent nested-loop evaluation in a different accumulation order.
        let spec = MlpSpec::new(4, vec![7, 5], 3, 42);
        let p = init_mlp(&spec).unwrap();
        let x: Vec<Real> = (0..4).map(|i| (i as Real * 0.71).sin()).collect();
        let got = forward_values(&p, &Tensor::matrix(1, 4, x.clone())).unwrap();

        let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for (idx, l) in p.layers.iter().enumerate() {
            let mut z = vec![0.0f64; l.out_dim];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = l.bias[j] as f64;
                for k in 0..l.in_dim {
                    acc += h[k] * l.weight[k * l.out_dim + j] as f64;
                }
                *zj = acc;
            }
            if idx + 1 < p.layers.len() {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            h = z;
        }
        for (g, e) in got.data().iter().zip(&h) {
            assert!(((*g as f64) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_equals_plain_forward() {
        let spec = MlpSpec::new(3, vec![6, 4], 3, 7);
        let p = init_mlp(&spec).unwrap();
        let x = Tensor::matrix(5, 3, (0..15).map(|i| ((i * 37) as Real * 0.013).cos()).collect());
        let plain = forward_values(&p, &x).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let bound = bind_params(&mut tape, &p);
        let logits = forward(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.data(logits), plain.data());
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let spec = MlpSpec::new(3, vec![8], 4, 11);
        let p = init_mlp(&spec).unwrap();
        let mut rng = crate::rng::rng_from(&[55]);
        let data: Vec<Real> = (0..6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::matrix(6, 3, data.clone());
        let out = forward_values(&p, &x).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = Vec::with_capacity(data.len());
        for &i in &perm {
            permuted.extend_from_slice(&data[i * 3..(i + 1) * 3]);
        }
        let out_p = forward_values(&p, &Tensor::matrix(6, 3, permuted)).unwrap();
        for (r_out, &src) in perm.iter().enumerate() {
            assert_eq!(out_p.row(r_out), out.row(src));
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_mlp(&spec_2_4_3(0)).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.0; 6]);
        assert!(matches!(
            forward_values(&p, &x),
            Err(Error::ShapeMismatch { op: "forward", .. })
        ));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let spec = MlpSpec::new(3, vec![5], 2, 17);
        let params = init_mlp(&spec).unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| ((i as Real) * 0.37).sin()).collect());
        let flat = params.to_flat();

        let eval = |theta: &[Real]| -> Real {
            let p = params.with_flat(theta);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let bound = bind_params(&mut tape, &p);
            let logits = forward(&mut tape, &bound, xv).unwrap();
            let e = tape.exp(logits);
            let loss = tape.mean(e);
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = bind_params(&mut tape, &params);
        let logits = forward(&mut tape, &bound, xv).unwrap();
        let e = tape.exp(logits);
        let loss = tape.mean(e);
        let grads = tape.backward(loss).unwrap();
        let mut ad = Vec::new();
        for &(w, b) in &bound.layers {
            ad.extend_from_slice(grads.expect(w).data());
            ad.extend_from_slice(grads.expect(b).data());
        }

        let fd = finite_diff_grad(eval, &flat, 1e-5).unwrap();
        assert!(max_rel_error(&ad, &fd) < 1e-4);
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let p = init_mlp(&spec_2_4_3(1)).unwrap();
        let q = perturb(&p, 0.0, 123).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn perturb_rejects_negative_sigma() {
        let p = init_mlp(&spec_2_4_3(1)).unwrap();
        assert!(perturb(&p, -0.1, 0).is_err());
    }

    #[test]
    fn perturb_noise_std_matches_sigma() {
        let p = init_mlp(&MlpSpec::new(50, vec![100, 100], 10, 5)).unwrap();
        assert!(p.num_params() >= 10_000);
        let q = perturb(&p, 0.1, 77).unwrap();
        let diffs: Vec<Real> = p
            .to_flat()
            .iter()
            .zip(q.to_flat())
            .map(|(&a, b)| b - a)
            .collect();
        let mean: Real = diffs.iter().sum::<Real>() / diffs.len() as Real;
        let var: Real =
            diffs.iter().map(|&d| (d - mean) * (d - mean)).sum::<Real>() / diffs.len() as Real;
        let std = var.sqrt();
        assert!((0.095..=0.105).contains(&std), "std {std}");
    }

    #[test]
    fn perturb_is_deterministic_in_seed() {
        let p = init_mlp(&spec_2_4_3(1)).unwrap();
        let a = perturb(&p, 0.05, 9).unwrap();
        let b = perturb(&p, 0.05, 9).unwrap();
        assert_eq!(a, b);
        let c = perturb(&p, 0.05, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let p = init_mlp(&MlpSpec::new(6, vec![9, 4], 5, 21)).unwrap();
        let bytes = save_checkpoint(&p);
        let q = load_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_bad_magic() {
        let p = init_mlp(&spec_2_4_3(2)).unwrap();
        let mut bytes = save_checkpoint(&p);
        bytes[0] ^= 0xFF;
        assert!(matches!(
            load_checkpoint(&bytes),
            Err(Error::CheckpointBadMagic { .. })
        ));
    }

    #[test]
    fn checkpoint_bad_version() {
        let p = init_mlp(&spec_2_4_3(2)).unwrap();
        let mut bytes = save_checkpoint(&p);
        bytes[4] = 9;
        assert!(matches!(
            load_checkpoint(&bytes),
            Err(Error::CheckpointBadVersion { found: 9, .. })
        ));
    }

    #[test]
    fn checkpoint_truncated() {
        let p = init_mlp(&spec_2_4_3(2)).unwrap();
        let bytes = save_checkpoint(&p);
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            load_checkpoint(cut),
            Err(Error::CheckpointTruncated { .. })
        ));
        assert!(matches!(
            load_checkpoint(&[]),
            Err(Error::CheckpointTruncated { .. })
        ));
    }

    #[test]
    fn checkpoint_crc_flip_detected() {
        let p = init_mlp(&spec_2_4_3(2)).unwrap();
        let mut bytes = save_checkpoint(&p);
        let mid = 20; // inside the first layer's weight data
        bytes[mid] ^= 0x01;
        assert!(matches!(
            load_checkpoint(&bytes),
            Err(Error::CheckpointCrc { .. })
        ));
    }

    #[test]
    fn checkpoint_spec_mismatch() {
        let p = init_mlp(&spec_2_4_3(2)).unwrap();
        let bytes = save_checkpoint(&p);
        let other = MlpSpec::new(2, vec![8], 3, 2);
        assert!(matches!(
            load_checkpoint_for_spec(&bytes, &other),
            Err(Error::CheckpointShape { .. })
        ));
        assert!(load_checkpoint_for_spec(&bytes, &spec_2_4_3(99)).is_ok());
    }
}
