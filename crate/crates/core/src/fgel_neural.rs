//! Neural FGEL: MLP instruments h_ω trained against the model by alternating
//! optimistic Adam on
//! G(θ, ω) = (1/n)Σ φ(ψ(x_i; θ)ᵀh_ω(z_i)) − (λ/2n)Σ ‖h_ω(z_i)‖².

use rand::Rng;
use rand_distr::Uniform;
use std::collections::VecDeque;

use crate::data::{Dataset, Model, MomentFunction, MomentTable, RngStream};
use crate::divergence::GelDivergence;
use crate::error::{FgelError, Result};
use crate::optimize::{oadam_step, OAdamConfig, OAdamState};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Dense feed-forward network with leaky ReLU hidden layers and a linear
/// output layer. Parameters are a flat vector, per layer the row-major
/// weight matrix followed by the bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Pre-activations of every layer for one input.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn leaky(a: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        LEAKY_SLOPE * a
    }
}

fn leaky_slope(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl Mlp {
    pub fn new(inputs: usize, hidden: &[usize], outputs: usize) -> Result<Self> {
        if inputs == 0 || outputs == 0 || hidden.contains(&0) {
            return Err(FgelError::InvalidArgument("network layers need at least one unit".into()));
        }
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        Ok(Self { sizes })
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.n_params());
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let unif = Uniform::new_inclusive(-bound, bound).expect("valid range");
            params.extend((0..fan_in * fan_out).map(|_| rng.sample(unif)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    fn check(&self, params: &[f64], x: &[f64]) {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(x.len(), self.inputs());
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        self.forward_cached(params, x, &mut cache).to_vec()
    }

    /// Forward pass keeping what the backward pass needs; returns the output.
    pub fn forward_cached<'c>(&self, params: &[f64], x: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        self.check(params, x);
        let layers = self.sizes.len() - 1;
        cache.acts.resize(layers + 1, Vec::new());
        cache.pre.resize(layers, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..layers {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + din * dout];
            let b = &params[off + din * dout..off + din * dout + dout];
            off += din * dout + dout;
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let input = &head[l];
            let pre = &mut cache.pre[l];
            pre.clear();
            for o in 0..dout {
                let row = &w[o * din..(o + 1) * din];
                pre.push(b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>());
            }
            let out = &mut tail[0];
            out.clear();
            if l + 1 < layers {
                out.extend(pre.iter().map(|&a| leaky(a)));
            } else {
                out.extend_from_slice(pre);
            }
        }
        &cache.acts[layers]
    }

    /// Adds (∂out/∂params)ᵀ·grad_out to `grad`, using a filled cache.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, grad_out: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l + 1] * (self.sizes[l] + 1);
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                for (d, &a) in delta.iter_mut().zip(&cache.pre[l]) {
                    *d *= leaky_slope(a);
                }
            }
            let off = offsets[l];
            let input = &cache.acts[l];
            for o in 0..dout {
                let gw = &mut grad[off + o * din..off + (o + 1) * din];
                for (g, &a) in gw.iter_mut().zip(input) {
                    *g += delta[o] * a;
                }
                grad[off + din * dout + o] += delta[o];
            }
            if l > 0 {
                let w = &params[off..off + din * dout];
                let mut prev = vec![0.0; din];
                for o in 0..dout {
                    for (p, &wv) in prev.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                        *p += delta[o] * wv;
                    }
                }
                delta = prev;
            }
        }
    }
}

/// Scalar-output network used as f_θ.
#[derive(Clone, Debug)]
pub struct MlpModel {
    pub net: Mlp,
}

impl MlpModel {
    pub fn new(inputs: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(inputs, hidden, 1)?,
        })
    }
}

impl Model for MlpModel {
    fn n_params(&self) -> usize {
        self.net.n_params()
    }

    fn predict(&self, x: &[f64], theta: &[f64]) -> f64 {
        self.net.forward(theta, x)[0]
    }

    fn predict_with_gradient(&self, x: &[f64], theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut cache = MlpCache::default();
        let y = self.net.forward_cached(theta, x, &mut cache)[0];
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.net.backward(theta, &cache, &[1.0], grad);
        y
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NeuralFgelOptions {
    pub theta: OAdamConfig,
    pub omega: OAdamConfig,
    pub max_rounds: usize,
    /// Rounds in the moving average of |Δvalue|.
    pub window: usize,
    pub tol: f64,
}

impl Default for NeuralFgelOptions {
    fn default() -> Self {
        Self {
            theta: OAdamConfig::default(),
            omega: OAdamConfig::default(),
            max_rounds: 5000,
            window: 200,
            tol: 1e-6,
        }
    }
}

pub struct NeuralFgelProblem<'a> {
    pub data: &'a Dataset,
    pub moments: &'a dyn MomentFunction,
    pub instrument: Mlp,
    pub divergence: GelDivergence,
    pub lambda: f64,
    pub theta0: Vec<f64>,
    pub omega0: Vec<f64>,
    pub options: NeuralFgelOptions,
}

impl<'a> NeuralFgelProblem<'a> {
    /// Instrument weights are drawn from `rng`.
    pub fn new(
        data: &'a Dataset,
        moments: &'a dyn MomentFunction,
        instrument: Mlp,
        divergence: GelDivergence,
        lambda: f64,
        theta0: Vec<f64>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if instrument.outputs() != moments.dim() {
            return Err(FgelError::DimensionMismatch {
                context: "instrument output",
                expected: moments.dim(),
                actual: instrument.outputs(),
            });
        }
        if instrument.inputs() != data.dz() {
            return Err(FgelError::DimensionMismatch {
                context: "instrument input",
                expected: data.dz(),
                actual: instrument.inputs(),
            });
        }
        if theta0.len() != moments.n_params() {
            return Err(FgelError::DimensionMismatch {
                context: "theta0",
                expected: moments.n_params(),
                actual: theta0.len(),
            });
        }
        if !(lambda >= 0.0) {
            return Err(FgelError::InvalidArgument("lambda must be nonnegative".into()));
        }
        let omega0 = instrument.init(rng);
        Ok(Self {
            data,
            moments,
            instrument,
            divergence,
            lambda,
            theta0,
            omega0,
            options: NeuralFgelOptions::default(),
        })
    }

    pub fn with_options(mut self, options: NeuralFgelOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_omega0(mut self, omega0: Vec<f64>) -> Self {
        self.omega0 = omega0;
        self
    }
}

#[derive(Clone, Copy)]
struct Want {
    theta: bool,
    omega: bool,
}

fn objective(problem: &NeuralFgelProblem, theta: &[f64], omega: &[f64], want: Want) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if omega.len() != problem.instrument.n_params() {
        return Err(FgelError::DimensionMismatch {
            context: "instrument parameters",
            expected: problem.instrument.n_params(),
            actual: omega.len(),
        });
    }
    let t = MomentTable::evaluate(problem.data, problem.moments, theta, want.theta)?;
    let (n, m, p) = (t.n(), t.m(), t.p());
    let nf = n as f64;
    let d = problem.divergence;
    let upper = d.domain_upper().unwrap_or(f64::INFINITY);
    let mut value = 0.0;
    let mut reg = 0.0;
    let mut g_theta = vec![0.0; p];
    let mut g_omega = vec![0.0; omega.len()];
    let mut cache = MlpCache::default();
    let mut grad_out = vec![0.0; m];
    for i in 0..n {
        let h = problem.instrument.forward_cached(omega, problem.data.z_row(i), &mut cache);
        let psi = t.psi_row(i);
        let v: f64 = psi.iter().zip(h).map(|(a, b)| a * b).sum();
        if !(v < upper) || !v.is_finite() {
            return Err(FgelError::Domain {
                divergence: d.name(),
                value: v,
                upper,
            });
        }
        value += d.phi(v);
        reg += h.iter().map(|x| x * x).sum::<f64>();
        let w = d.phi1(v);
        if want.theta {
            for r in 0..m {
                for (j, g) in g_theta.iter_mut().enumerate() {
                    *g += w * h[r] * t.jac(i, r, j);
                }
            }
        }
        if want.omega {
            for r in 0..m {
                grad_out[r] = (w * psi[r] - problem.lambda * h[r]) / nf;
            }
            problem.instrument.backward(omega, &cache, &grad_out, &mut g_omega);
        }
    }
    let value = value / nf - problem.lambda / (2.0 * nf) * reg;
    if !value.is_finite() {
        return Err(FgelError::NonFinite("neural objective"));
    }
    g_theta.iter_mut().for_each(|g| *g /= nf);
    Ok((value, g_theta, g_omega))
}

/// Value and the gradients with respect to θ and ω.
pub fn neural_objective(problem: &NeuralFgelProblem, theta: &[f64], omega: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    objective(problem, theta, omega, Want { theta: true, omega: true })
}

#[derive(Clone, Debug)]
pub struct NeuralFgelResult {
    pub theta_hat: Vec<f64>,
    pub omega_hat: Vec<f64>,
    pub value: f64,
    pub rounds: usize,
    /// Objective value after each round.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Steps rejected for leaving the divergence domain.
    pub rejected_steps: usize,
}

/// Applies `update` to `x` unless the objective leaves the domain there.
fn guarded_step(
    problem: &NeuralFgelProblem,
    x: &mut [f64],
    update: &[f64],
    eval: impl Fn(&[f64]) -> Result<f64>,
) -> Result<bool> {
    let trial: Vec<f64> = x.iter().zip(update).map(|(a, b)| a + b).collect();
    if problem.divergence.domain_upper().is_some() {
        match eval(&trial) {
            Ok(_) => {}
            Err(FgelError::Domain { .. }) => return Ok(false),
            Err(e) => return Err(e),
        }
    }
    x.copy_from_slice(&trial);
    Ok(true)
}

/// Alternates ω ascent and θ descent steps of optimistic Adam.
pub fn neural_estimate(problem: &NeuralFgelProblem) -> Result<NeuralFgelResult> {
    let opts = &problem.options;
    opts.theta.validate()?;
    opts.omega.validate()?;
    let mut theta = problem.theta0.clone();
    let mut omega = problem.omega0.clone();
    let mut st_theta = OAdamState::new(theta.len());
    let mut st_omega = OAdamState::new(omega.len());
    let want_omega = Want {
        theta: false,
        omega: opts.omega.steps > 0,
    };
    let (mut value, _, mut g_omega) = objective(problem, &theta, &omega, want_omega)?;
    let mut trace = Vec::new();
    let mut window: VecDeque<f64> = VecDeque::new();
    let mut window_sum = 0.0;
    let mut rejected = 0;
    let mut converged = false;
    let fail = |message: String, trace: &[f64], theta: &[f64]| FgelError::Optimizer {
        message,
        trace: trace.iter().map(|&v| (theta.to_vec(), v)).collect(),
    };
    for _ in 0..opts.max_rounds {
        for k in 0..opts.omega.steps {
            let g = if k == 0 {
                std::mem::take(&mut g_omega)
            } else {
                objective(problem, &theta, &omega, Want { theta: false, omega: true })?.2
            };
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            let up = oadam_step(&mut st_omega, &opts.omega, &neg)
                .map_err(|e| fail(format!("instrument step: {e}"), &trace, &theta))?;
            let th = theta.clone();
            if !guarded_step(problem, &mut omega, &up, |w| {
                objective(problem, &th, w, Want { theta: false, omega: false }).map(|r| r.0)
            })? {
                rejected += 1;
            }
        }
        for _ in 0..opts.theta.steps {
            let (_, g, _) = objective(problem, &theta, &omega, Want { theta: true, omega: false })?;
            let up = oadam_step(&mut st_theta, &opts.theta, &g)
                .map_err(|e| fail(format!("model step: {e}"), &trace, &theta))?;
            let om = omega.clone();
            if !guarded_step(problem, &mut theta, &up, |t| {
                objective(problem, t, &om, Want { theta: false, omega: false }).map(|r| r.0)
            })? {
                rejected += 1;
            }
        }
        let (next, _, g) = objective(problem, &theta, &omega, want_omega)
            .map_err(|e| fail(format!("objective: {e}"), &trace, &theta))?;
        g_omega = g;
        if !next.is_finite() {
            return Err(fail("non-finite objective".into(), &trace, &theta));
        }
        let delta = (next - value).abs();
        value = next;
        trace.push(value);
        window.push_back(delta);
        window_sum += delta;
        if window.len() > opts.window {
            window_sum -= window.pop_front().unwrap();
        }
        if window.len() == opts.window && window_sum / (opts.window as f64) < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(NeuralFgelResult {
        theta_hat: theta,
        omega_hat: omega,
        value,
        rounds: trace.len(),
        trace,
        converged,
        rejected_steps: rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IvDgp, ResidualMoment, F0};

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], g: &[f64], tol: f64) {
        let h = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= tol * (1.0 + g[j].abs().max(fd.abs())), "coordinate {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn layout_and_init() {
        let net = Mlp::new(2, &[20, 3], 1).unwrap();
        assert_eq!(net.n_params(), 20 * 3 + 3 * 21 + 4);
        let p = net.init(&mut RngStream::new(1, 0));
        assert_eq!(p.len(), net.n_params());
        let bound = (6.0f64 / 22.0).sqrt();
        assert!(p[..40].iter().all(|w| w.abs() <= bound));
        assert!(p[40..60].iter().all(|&b| b == 0.0));
        assert_eq!(p, net.init(&mut RngStream::new(1, 0)));
        assert!(Mlp::new(1, &[0], 1).is_err());
    }

    #[test]
    fn zero_weights_return_final_bias() {
        let net = Mlp::new(3, &[4, 3], 2).unwrap();
        let mut p = vec![0.0; net.n_params()];
        let k = p.len();
        p[k - 2] = 0.7;
        p[k - 1] = -1.1;
        assert_eq!(net.forward(&p, &[1.0, -2.0, 0.5]), vec![0.7, -1.1]);
    }

    #[test]
    fn linear_network_without_hidden_layers() {
        let net = Mlp::new(2, &[], 1).unwrap();
        assert_eq!(net.forward(&[2.0, -1.0, 0.5], &[3.0, 4.0]), vec![2.5]);
    }

    #[test]
    fn leaky_hidden_unit() {
        // One hidden unit with weight 1: output is leaky(x).
        let net = Mlp::new(1, &[1], 1).unwrap();
        let p = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(net.forward(&p, &[2.0]), vec![2.0]);
        assert!((net.forward(&p, &[-2.0])[0] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let model = MlpModel::new(2, &[4, 3]).unwrap();
        let mut rng = RngStream::new(2, 0);
        for _ in 0..50 {
            let theta: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let mut g = vec![0.0; theta.len()];
            model.predict_with_gradient(&x, &theta, &mut g);
            fd_check(|t| model.predict(&x, t), &theta, &g, 1e-5);
        }
    }

    fn small_problem<'a>(data: &'a Dataset, mf: &'a ResidualMoment<MlpModel>, d: GelDivergence, lambda: f64, seed: u64) -> NeuralFgelProblem<'a> {
        let mut rng = RngStream::new(seed, 0);
        let theta0 = mf.model.net.init(&mut rng);
        let inst = Mlp::new(1, &[4, 3], 1).unwrap();
        NeuralFgelProblem::new(data, mf, inst, d, lambda, theta0, &mut rng).unwrap()
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let data = IvDgp::new(F0::Abs).sample(30, &mut RngStream::new(3, 0)).unwrap();
        let mf = ResidualMoment::new(MlpModel::new(1, &[4, 3]).unwrap());
        for d in [GelDivergence::Chi2, GelDivergence::Kl, GelDivergence::El, GelDivergence::VmmEquiv] {
            for seed in 0..12 {
                let mut p = small_problem(&data, &mf, d, 0.3, 10 + seed);
                // Keep EL arguments well inside the domain.
                p.omega0.iter_mut().for_each(|w| *w *= 0.3);
                let (th, om) = (p.theta0.clone(), p.omega0.clone());
                let (_, gt, go) = neural_objective(&p, &th, &om).unwrap();
                fd_check(|t| neural_objective(&p, t, &om).unwrap().0, &th, &gt, 1e-5);
                fd_check(|w| neural_objective(&p, &th, w).unwrap().0, &om, &go, 1e-5);
            }
        }
    }

    #[test]
    fn zero_instrument_value_is_phi_zero() {
        let data = IvDgp::new(F0::Sin).sample(25, &mut RngStream::new(4, 0)).unwrap();
        let mf = ResidualMoment::new(MlpModel::new(1, &[4, 3]).unwrap());
        for d in GelDivergence::ALL {
            let p = small_problem(&data, &mf, d, 0.5, 5);
            let zero = vec![0.0; p.instrument.n_params()];
            let (v, gt, go) = neural_objective(&p, &p.theta0, &zero).unwrap();
            assert_eq!(v, d.phi(0.0));
            assert!(gt.iter().all(|&g| g == 0.0));
            // Only the output bias sees φ₁(0)·mean ψ.
            let t = MomentTable::evaluate(&data, &mf, &p.theta0, false).unwrap();
            let mean_psi = t.component(0).iter().sum::<f64>() / 25.0;
            let k = go.len();
            assert!((go[k - 1] - d.phi1(0.0) * mean_psi).abs() < 1e-12);
            assert!(go[..k - 1].iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn zero_instrument_without_instrument_steps_stays_at_phi_zero() {
        let data = IvDgp::new(F0::Step).sample(40, &mut RngStream::new(6, 0)).unwrap();
        let mf = ResidualMoment::new(MlpModel::new(1, &[4, 3]).unwrap());
        let p = small_problem(&data, &mf, GelDivergence::Chi2, 0.1, 7);
        let zero = vec![0.0; p.instrument.n_params()];
        let mut opts = NeuralFgelOptions {
            max_rounds: 50,
            ..Default::default()
        };
        opts.omega.steps = 0;
        let p = p.with_omega0(zero).with_options(opts);
        let res = neural_estimate(&p).unwrap();
        assert!(res.trace.iter().all(|&v| v == -0.5));
        assert_eq!(res.theta_hat, p.theta0);
    }

    #[test]
    fn heavy_regularization_shrinks_instrument_output() {
        let data = IvDgp::new(F0::Abs).sample(40, &mut RngStream::new(8, 0)).unwrap();
        let mf = ResidualMoment::new(MlpModel::new(1, &[4, 3]).unwrap());
        let mut opts = NeuralFgelOptions {
            max_rounds: 300,
            ..Default::default()
        };
        opts.theta.steps = 0;
        opts.omega.lr = 1e-2;
        let p = small_problem(&data, &mf, GelDivergence::Chi2, 1e6, 9).with_options(opts);
        let msq = |om: &[f64]| {
            (0..40).map(|i| p.instrument.forward(om, data.z_row(i))[0].powi(2)).sum::<f64>() / 40.0
        };
        let before = msq(&p.omega0);
        let res = neural_estimate(&p).unwrap();
        assert!(msq(&res.omega_hat) < 1e-2 * before, "{before} -> {}", msq(&res.omega_hat));
    }

    #[test]
    fn deterministic_trajectories() {
        let data = IvDgp::new(F0::Abs).sample(50, &mut RngStream::new(10, 0)).unwrap();
        let mf = ResidualMoment::new(MlpModel::new(1, &[4, 3]).unwrap());
        let opts = NeuralFgelOptions {
            max_rounds: 100,
            ..Default::default()
        };
        let a = neural_estimate(&small_problem(&data, &mf, GelDivergence::Chi2, 0.1, 11).with_options(opts)).unwrap();
        let b = neural_estimate(&small_problem(&data, &mf, GelDivergence::Chi2, 0.1, 11).with_options(opts)).unwrap();
        assert_eq!(a.theta_hat, b.theta_hat);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn bounded_on_iv_data_with_defaults() {
        let data = IvDgp::new(F0::Sin).sample(300, &mut RngStream::new(12, 0)).unwrap();
        let mf = ResidualMoment::new(MlpModel::new(1, &[20, 3]).unwrap());
        let mut rng = RngStream::new(13, 0);
        let theta0 = mf.model.net.init(&mut rng);
        let inst = Mlp::new(1, &[20, 3], 1).unwrap();
        let p = NeuralFgelProblem::new(&data, &mf, inst, GelDivergence::Chi2, 0.1, theta0, &mut rng)
            .unwrap()
            .with_options(NeuralFgelOptions {
                max_rounds: 1000,
                ..Default::default()
            });
        let res = neural_estimate(&p).unwrap();
        assert!(res.trace.iter().all(|v| v.abs() <= 1e6));
    }

    #[test]
    fn el_steps_stay_in_domain() {
        let data = IvDgp::new(F0::Abs).sample(40, &mut RngStream::new(14, 0)).unwrap();
        let mf = ResidualMoment::new(MlpModel::new(1, &[4, 3]).unwrap());
        let mut opts = NeuralFgelOptions {
            max_rounds: 200,
            ..Default::default()
        };
        opts.omega.lr = 0.05;
        let mut p = small_problem(&data, &mf, GelDivergence::El, 0.0, 15).with_options(opts);
        p.omega0.iter_mut().for_each(|w| *w *= 0.1);
        let res = neural_estimate(&p).unwrap();
        assert!(res.value.is_finite());
        assert!(neural_objective(&p, &res.theta_hat, &res.omega_hat).is_ok());
    }

    #[test]
    fn noiseless_linear_iv_with_linear_model() {
        let data = IvDgp::noiseless(F0::Linear).sample(2000, &mut RngStream::new(16, 0)).unwrap();
        let mf = ResidualMoment::new(MlpModel::new(1, &[]).unwrap());
        let mut rng = RngStream::new(17, 0);
        let inst = Mlp::new(1, &[20, 3], 1).unwrap();
        let p = NeuralFgelProblem::new(&data, &mf, inst, GelDivergence::Chi2, 0.1, vec![0.0, 0.0], &mut rng).unwrap();
        let res = neural_estimate(&p).unwrap();
        let test = IvDgp::new(F0::Linear).sample(20_000, &mut RngStream::new(16, 1)).unwrap();
        let mse = (0..test.n())
            .map(|i| {
                let x = test.x_row(i)[0];
                (mf.model.predict(&[x], &res.theta_hat) - x).powi(2)
            })
            .sum::<f64>()
            / test.n() as f64;
        assert!(mse < 1e-2, "test mse {mse}, theta {:?}", res.theta_hat);
    }
}
