//! Central finite-difference checks for every differentiable op.
//!
//! Analytic gradients come from the `f32` graph. The finite differences
//! (step 1e-3) evaluate the same graph instantiated at `f64`, so the
//! reference is not dominated by single-precision round-off.

use mixstyle_core::graph::{Graph, Var};
use mixstyle_core::mixstyle::{LambdaVector, apply_mixstyle, instance_norm, mix_normalized};
use mixstyle_core::tensor::Tensor;
use mixstyle_core::{Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-2;
const MIN_GRAD: f64 = 1e-4;

trait Case {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>>;
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var>;
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random tensor whose entries keep at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Weighted sum of the case output, so every output element matters.
fn scalar_loss<S: Scalar, C: Case>(case: &C, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<(Graph<S>, Vec<Var>, Var)> {
    let mut g = Graph::<S>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = case.build(&mut g, &vars)?;
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let w = g.constant(weights.cast());
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };
    Ok((g, vars, loss))
}

fn check<C: Case>(name: &str, case: &C, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = case.inputs(&mut rng);
    let probe = {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = case.build(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let weights = random(&probe, &mut rng);

    let (g, vars, loss) = scalar_loss::<f32, C>(case, &inputs, &weights).unwrap();
    let grads = g.backward(loss).unwrap();
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let (g, _, loss) = scalar_loss::<f64, C>(case, inputs, &weights).unwrap();
        g.value(loss).data()[0]
    };

    let mut checked = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| panic!("{name}: no gradient for input {i}"));
        assert!(analytic.is_finite(), "{name}: non-finite gradient");
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[j] as f64;
            if a.abs() > MIN_GRAD {
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                assert!(rel < REL_TOL, "{name}: input {i}[{j}] analytic {a} vs numeric {fd} (rel {rel:.2e})");
                checked += 1;
            }
        }
    }
    assert!(checked > 0, "{name}: no gradient entry above the threshold");
}

struct Conv {
    stride: usize,
    padding: usize,
}

impl Case for Conv {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[2, 3, 4, 4], rng), random(&[4, 3, 3, 3], rng), random(&[4], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        g.conv2d(x[0], x[1], x[2], self.stride, self.padding)
    }
}

pub fn conv2d_padded_and_strided() {
    check("conv2d s1 p1", &Conv { stride: 1, padding: 1 }, 1);
    check("conv2d s2 p0", &Conv { stride: 2, padding: 0 }, 2);
    check("conv2d s2 p1", &Conv { stride: 2, padding: 1 }, 3);
}

struct Relu;
impl Case for Relu {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![away_from_zero(&[2, 3, 4, 4], 0.01, rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        Ok(g.relu(x[0]))
    }
}

struct AvgPool;
impl Case for AvgPool {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[2, 3, 4, 4], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        g.avg_pool2d(x[0], 2)
    }
}

struct GlobalPool;
impl Case for GlobalPool {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[3, 4, 3, 2], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        g.global_avg_pool(x[0])
    }
}

struct Linear;
impl Case for Linear {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[3, 4], rng), random(&[4, 4], rng), random(&[4], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        g.linear(x[0], x[1], x[2])
    }
}

pub fn pointwise_pooling_and_dense_layers() {
    check("relu", &Relu, 4);
    check("avg_pool2d", &AvgPool, 5);
    check("global_avg_pool", &GlobalPool, 6);
    check("linear", &Linear, 7);
}

struct CrossEntropy;
impl Case for CrossEntropy {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[4, 4], rng).map(|v| 3.0 * v)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        g.softmax_cross_entropy(x[0], &[0, 3, 1, 3])
    }
}

struct WeightedCrossEntropy;
impl Case for WeightedCrossEntropy {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[4, 3], rng).map(|v| 2.0 * v)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        let w = [S::one(), S::zero(), S::one(), S::lit(0.5)];
        g.weighted_cross_entropy(x[0], &[2, 0, 1, 1], &w, S::lit(4.0))
    }
}

pub fn cross_entropy_losses() {
    check("softmax_cross_entropy", &CrossEntropy, 8);
    check("weighted_cross_entropy", &WeightedCrossEntropy, 9);
}

struct Stats {
    std: bool,
}
impl Case for Stats {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[2, 3, 3, 4], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        if self.std { g.channel_std(x[0], S::lit(1e-5)) } else { g.channel_mean(x[0]) }
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Sub,
    Div,
    Mul,
    Add,
}

struct Broadcast(Bcast);
impl Case for Broadcast {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let rhs = match self.0 {
            Bcast::Div => Tensor::from_fn(&[2, 3], |_| rng.random_range(0.5..1.5)),
            _ => random(&[2, 3], rng),
        };
        vec![random(&[2, 3, 2, 3], rng), rhs]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        match self.0 {
            Bcast::Sub => g.sub_channel(x[0], x[1]),
            Bcast::Div => g.div_channel(x[0], x[1]),
            Bcast::Mul => g.mul_channel(x[0], x[1]),
            Bcast::Add => g.add_channel(x[0], x[1]),
        }
    }
}

struct ScaleShift;
impl Case for ScaleShift {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[2, 3, 2, 2], rng), random(&[3], rng), random(&[3], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        g.scale_shift(x[0], x[1], x[2])
    }
}

pub fn channel_statistics_and_broadcasts() {
    check("channel_mean", &Stats { std: false }, 10);
    check("channel_std", &Stats { std: true }, 11);
    check("sub_channel", &Broadcast(Bcast::Sub), 12);
    check("div_channel", &Broadcast(Bcast::Div), 13);
    check("mul_channel", &Broadcast(Bcast::Mul), 14);
    check("add_channel", &Broadcast(Bcast::Add), 15);
    check("scale_shift", &ScaleShift, 16);
}

struct MixRows;
impl Case for MixRows {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[3, 4], rng), random(&[3, 4], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        g.mix(x[0], x[1], &[S::lit(0.2), S::lit(0.9), S::lit(0.5)])
    }
}

struct Rows;
impl Case for Rows {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[4, 3], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        let p = g.permute_rows(x[0], &[2, 0, 3, 1])?;
        let p2 = g.permute_rows(x[0], &[1, 1, 0, 2])?;
        let both = g.add(p, p2)?;
        g.slice_rows(both, 1, 3)
    }
}

struct Elementwise;
impl Case for Elementwise {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[2, 2, 2, 2], rng), random(&[2, 2, 2, 2], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        let p = g.mul(x[0], x[1])?;
        let s = g.scale(x[0], S::lit(-1.7));
        let a = g.add(p, s)?;
        Ok(g.sum(a))
    }
}

pub fn row_and_elementwise_ops() {
    check("mix", &MixRows, 17);
    check("permute/slice rows", &Rows, 18);
    check("add/mul/scale/sum", &Elementwise, 19);
}

struct InstanceNorm;
impl Case for InstanceNorm {
    fn inputs(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![random(&[2, 3, 3, 3], rng), random(&[3], rng), random(&[3], rng)]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        instance_norm(g, x[0], x[1], x[2], S::lit(1e-5))
    }
}

pub fn instance_norm_is_differentiable_in_all_inputs() {
    check("instance_norm", &InstanceNorm, 20);
}

const PERM: [usize; 4] = [2, 3, 0, 1];
const LAMBDA: [f64; 4] = [0.3, 0.8, 0.05, 0.5];

/// MixStyle with the statistics frozen at the point of linearization, i.e.
/// the function whose derivative the blocked layer must report.
struct FrozenMixStyle {
    at: Tensor<f64>,
}

impl Case for FrozenMixStyle {
    fn inputs(&self, _: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![self.at.clone()]
    }
    fn build<S: Scalar>(&self, g: &mut Graph<S>, x: &[Var]) -> Result<Var> {
        let lambda = LambdaVector::new(LAMBDA.iter().map(|&l| S::lit(l)).collect())?;
        if g.value(x[0]).data().iter().zip(self.at.data()).all(|(a, b)| a.as_f64() == S::lit(*b).as_f64()) {
            return apply_mixstyle(g, x[0], &PERM, &lambda, S::lit(1e-5));
        }
        let frozen = g.constant(self.at.cast());
        let mu = g.channel_mean(frozen)?;
        let sigma = g.channel_std(frozen, S::lit(1e-5))?;
        mix_normalized(g, x[0], (mu, sigma), &PERM, &lambda)
    }
}

pub fn full_mixstyle_layer_matches_frozen_statistics_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let at = random(&[4, 3, 3, 3], &mut rng);
    check("mixstyle", &FrozenMixStyle { at }, 22);
}

pub fn mixstyle_jacobian_is_diagonal_gamma_over_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let f = random(&[4, 2, 2, 3], &mut rng);
    let lambda = LambdaVector::new(LAMBDA.to_vec()).unwrap();
    let stats = mixstyle_core::mixstyle::compute_channel_stats(&f, 1e-5).unwrap();
    let (gamma, _) = mixstyle_core::mixstyle::mix_statistics(
        &stats,
        &mixstyle_core::mixstyle::ChannelStats {
            mu: stats.mu.gather(&PERM).unwrap(),
            sigma: stats.sigma.gather(&PERM).unwrap(),
        },
        &lambda,
    )
    .unwrap();
    let hw = 6;
    // d out[j] / d f[i] for every pair of elements, via one backward pass per output
    for out_idx in 0..f.len() {
        let mut g = Graph::<f64>::new();
        let x = g.param(f.clone());
        let y = apply_mixstyle(&mut g, x, &PERM, &lambda, 1e-5).unwrap();
        let mut onehot = Tensor::zeros(f.shape());
        onehot.data_mut()[out_idx] = 1.0;
        let w = g.constant(onehot);
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        let grad = g.backward(l).unwrap();
        let row = grad.get(x).unwrap();
        let plane = out_idx / hw;
        let expected = gamma.data()[plane] / stats.sigma.data()[plane];
        for (i, &d) in row.data().iter().enumerate() {
            if i == out_idx {
                assert!((d - expected).abs() <= 1e-2 * expected.abs(), "diag {d} vs {expected}");
            } else {
                assert_eq!(d, 0.0, "cross term d out[{out_idx}] / d f[{i}]");
            }
        }
    }
}

pub fn stop_gradient_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let xv: Tensor<f32> = random(&[2, 3, 2, 2], &mut rng).cast();

    // sum(stop_gradient(x)^2)
    let mut g = Graph::<f32>::new();
    let x = g.param(xv.clone());
    let s = g.stop_gradient(x);
    assert_eq!(g.value(s), &xv);
    let sq = g.mul(s, s).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_none_or(|t| t.data().iter().all(|&v| v.to_bits() == 0)));

    // d/dx [stop_gradient(x) * x] = x
    let mut g = Graph::<f32>::new();
    let x = g.param(xv.clone());
    let s = g.stop_gradient(x);
    let p = g.mul(s, x).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &xv);
}

pub fn reference_instances_get_no_gradient_through_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let fv: Tensor<f32> = random(&[2, 3, 3, 3], &mut rng).cast();
    let rv: Tensor<f32> = random(&[2, 3, 3, 3], &mut rng).cast();
    let mut g = Graph::<f32>::new();
    let f = g.param(fv);
    let r = g.param(rv);
    let y = mixstyle_core::mixstyle::adain(&mut g, f, r, 1e-5).unwrap();
    let sq = g.mul(y, y).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(f).is_some());
    assert!(grads.get(r).is_none_or(|t| t.data().iter().all(|&v| v.to_bits() == 0)));
}

macro_rules! suite {
    ($($name:ident),* $(,)?) => {
        /// Every check, by name, for callers that include this file as a module.
        pub const SUITE: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        #[cfg(test)]
        mod run {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}

suite!(
    conv2d_padded_and_strided,
    pointwise_pooling_and_dense_layers,
    cross_entropy_losses,
    channel_statistics_and_broadcasts,
    row_and_elementwise_ops,
    instance_norm_is_differentiable_in_all_inputs,
    full_mixstyle_layer_matches_frozen_statistics_derivative,
    mixstyle_jacobian_is_diagonal_gamma_over_sigma,
    stop_gradient_is_exactly_zero,
    reference_instances_get_no_gradient_through_statistics,
);
