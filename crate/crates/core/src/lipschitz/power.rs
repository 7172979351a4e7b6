use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_adjoint, conv2d_kernel_grad, dense_apply, Tensor};

/// How a bound is computed: a few warm-started iterations during training, or
/// iteration to convergence plus a safety inflation for certification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Certify,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Certify => "certify",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "certify" => Ok(Mode::Certify),
            _ => Err(Error::InvalidArgument(format!("mode `{}` (train|certify)", s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerConfig {
    /// Iterations per call in train mode.
    pub train_iters: usize,
    /// Certify mode stops once the relative change of the estimate is below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Certified bounds are `sigma * (1 + safety_margin)`.
    pub safety_margin: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig { train_iters: 5, tol: 1e-9, max_iters: 10_000, safety_margin: 1e-6 }
    }
}

impl PowerConfig {
    pub fn inflation(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Train => 1.0,
            Mode::Certify => 1.0 + self.safety_margin,
        }
    }
}

/// Persistent power-iteration iterate for one linear operator.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerState {
    v: Tensor,
    iterations: usize,
    residual: f64,
}

impl PowerState {
    /// Unit Gaussian start vector, deterministic in `seed`.
    pub fn new(shape: &[usize], seed: u64) -> Self {
        PowerState { v: unit_gaussian(shape, seed), iterations: 0, residual: 0.0 }
    }

    /// Restores a stored iterate; vectors already of unit norm are kept
    /// bit-exact.
    pub fn from_vector(v: Tensor) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument("power iterate must be a finite non-zero vector".into()));
        }
        let v = if (n - 1.0).abs() < 1e-12 { v } else { v.scale(1.0 / n) };
        Ok(PowerState { v, iterations: 0, residual: 0.0 })
    }

    pub fn vector(&self) -> &Tensor {
        &self.v
    }

    /// Total iterations applied to this state.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }
}

fn unit_gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::randn(shape, 1.0, &mut rng);
    let n = t.norm();
    t.scale(1.0 / n)
}

/// A linear map whose largest singular value is being estimated.
#[derive(Debug, Clone, Copy)]
pub enum LinearOperator<'a> {
    /// Convolution at a fixed input shape `[1, C, H, W]`.
    Conv { kernel: &'a Tensor, input_shape: [usize; 3], stride: usize, padding: usize },
    /// Dense map `x -> W x`, `W` of shape `[m, d]`.
    Dense { weight: &'a Tensor },
}

impl LinearOperator<'_> {
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            LinearOperator::Conv { input_shape, .. } => vec![1, input_shape[0], input_shape[1], input_shape[2]],
            LinearOperator::Dense { weight } => vec![1, weight.shape()[1]],
        }
    }

    fn coefficients(&self) -> &Tensor {
        match self {
            LinearOperator::Conv { kernel, .. } => kernel,
            LinearOperator::Dense { weight } => weight,
        }
    }

    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        match *self {
            LinearOperator::Conv { kernel, stride, padding, .. } => conv2d(v, kernel, stride, padding),
            LinearOperator::Dense { weight } => dense_apply(v, weight, None),
        }
    }

    pub fn adjoint(&self, u: &Tensor) -> Result<Tensor> {
        match *self {
            LinearOperator::Conv { kernel, stride, padding, .. } => {
                conv2d_adjoint(u, kernel, stride, padding, &self.input_shape())
            }
            LinearOperator::Dense { weight } => {
                let (m, d) = (weight.shape()[0], weight.shape()[1]);
                let mut out = vec![0.0; d];
                for j in 0..m {
                    let uj = u.data()[j];
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += weight.data()[j * d + k] * uj;
                    }
                }
                Tensor::new(vec![1, d], out)
            }
        }
    }

    /// Gradient of `u^T A v` with respect to the operator's coefficients.
    pub fn coefficient_grad(&self, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        match *self {
            LinearOperator::Conv { kernel, stride, padding, .. } => {
                conv2d_kernel_grad(v, u, kernel.shape(), stride, padding)
            }
            LinearOperator::Dense { weight } => {
                let (m, d) = (weight.shape()[0], weight.shape()[1]);
                let mut out = vec![0.0; m * d];
                for j in 0..m {
                    for k in 0..d {
                        out[j * d + k] = u.data()[j] * v.data()[k];
                    }
                }
                Tensor::new(vec![m, d], out)
            }
        }
    }
}

/// Result of one power-iteration run.
#[derive(Debug, Clone)]
pub struct Estimate {
    /// `||A v||` for the final unit iterate `v` (no safety inflation).
    pub sigma: f64,
    /// Final unit iterate.
    pub v: Tensor,
    /// `A v / ||A v||`; zero when `sigma == 0`.
    pub u: Tensor,
    pub iterations: usize,
    pub residual: f64,
    /// True when the operator is identically zero (no iteration performed).
    pub exact_zero: bool,
}

/// Power iteration on `A^T A` from `start`.
///
/// Train mode runs exactly `cfg.train_iters` plain iterations. Certify mode
/// accelerates the iteration with restarted Rayleigh-Ritz steps over the
/// Krylov space of the current iterate (the estimate never decreases) and
/// stops once the relative change of `||A v||` between restarts drops below
/// `cfg.tol`, failing with [`Error::NonConvergence`] after `cfg.max_iters`
/// operator applications. Plain iteration stalls on operators whose top two
/// singular values nearly coincide.
pub fn power_iterate(op: &LinearOperator<'_>, start: &Tensor, mode: Mode, cfg: &PowerConfig) -> Result<Estimate> {
    let shape = op.input_shape();
    if start.shape() != shape.as_slice() {
        return Err(Error::shape("power_iterate", format!("iterate {:?} vs operator input {:?}", start.shape(), shape)));
    }
    if !op.coefficients().is_finite() {
        return Err(Error::NonFinite { op: "power_iterate" });
    }
    if op.coefficients().data().iter().all(|&c| c == 0.0) {
        let out_shape = op.apply(start)?.shape().to_vec();
        return Ok(Estimate {
            sigma: 0.0,
            v: start.clone(),
            u: Tensor::zeros(&out_shape),
            iterations: 0,
            residual: 0.0,
            exact_zero: true,
        });
    }
    let mut v = start.scale(1.0 / start.norm());
    let mut av = op.apply(&v)?;
    let mut sigma = av.norm();
    let mut reseed = 0u64;
    while sigma == 0.0 {
        // start vector in the null space of a non-zero operator
        reseed += 1;
        if reseed > 16 {
            return Err(Error::NonConvergence { iterations: 0, residual: f64::INFINITY });
        }
        v = unit_gaussian(&shape, 0x9E37_79B9_7F4A_7C15 ^ reseed);
        av = op.apply(&v)?;
        sigma = av.norm();
    }
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    match mode {
        Mode::Train => {
            while iterations < cfg.train_iters {
                let w = op.adjoint(&av)?;
                let nw = w.norm();
                if nw == 0.0 {
                    break;
                }
                v = w.scale(1.0 / nw);
                av = op.apply(&v)?;
                let next = av.norm();
                residual = (next - sigma).abs() / next;
                sigma = next;
                iterations += 1;
            }
        }
        Mode::Certify => {
            let dim: usize = shape.iter().product();
            let block = dim.min(KRYLOV_DIM);
            while !(residual < cfg.tol) {
                if iterations >= cfg.max_iters {
                    return Err(Error::NonConvergence { iterations, residual });
                }
                let (next_v, steps) = rayleigh_ritz(op, &v, block.min(cfg.max_iters - iterations))?;
                let next_av = op.apply(&next_v)?;
                let next = next_av.norm();
                iterations += steps;
                if next >= sigma {
                    residual = (next - sigma) / next;
                    v = next_v;
                    av = next_av;
                    sigma = next;
                } else {
                    // rounding noise at convergence
                    residual = 0.0;
                }
            }
        }
    }
    if !sigma.is_finite() {
        return Err(Error::NonFinite { op: "power_iterate" });
    }
    let u = av.scale(1.0 / sigma);
    Ok(Estimate { sigma, v, u, iterations, residual: if residual.is_finite() { residual } else { 0.0 }, exact_zero: false })
}

const KRYLOV_DIM: usize = 24;

/// One restart: orthonormal basis of `span{v, Bv, .., B^(k-1) v}` with
/// `B = A^T A`, then the top eigenvector of the projected matrix. Returns the
/// unit Ritz vector and the number of operator applications.
fn rayleigh_ritz(op: &LinearOperator<'_>, v: &Tensor, k: usize) -> Result<(Tensor, usize)> {
    let mut basis: Vec<Tensor> = vec![v.scale(1.0 / v.norm())];
    let mut images: Vec<Tensor> = Vec::with_capacity(k);
    while images.len() < basis.len() {
        let q = &basis[images.len()];
        let bq = op.adjoint(&op.apply(q)?)?;
        let scale = bq.norm();
        images.push(bq.clone());
        if basis.len() == k {
            continue;
        }
        let mut w = bq;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                for (x, y) in w.data_mut().iter_mut().zip(b.data()) {
                    *x -= c * y;
                }
            }
        }
        let nw = w.norm();
        if nw > 1e-12 * scale {
            basis.push(w.scale(1.0 / nw));
        }
    }
    let n = basis.len();
    let h = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (basis[i].dot(&images[j]) + basis[j].dot(&images[i])));
    let eig = nalgebra::SymmetricEigen::new(h);
    let top = (0..n).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap_or(0);
    let mut out = Tensor::zeros(v.shape());
    for (i, b) in basis.iter().enumerate() {
        let c = eig.eigenvectors[(i, top)];
        for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
            *x += c * y;
        }
    }
    let norm = out.norm();
    Ok((out.scale(1.0 / norm), n))
}

/// Runs [`power_iterate`] from `state`. Train mode advances the state; certify
/// mode reads it without modification.
pub fn estimate_with_state(op: &LinearOperator<'_>, state: &mut PowerState, mode: Mode, cfg: &PowerConfig) -> Result<Estimate> {
    let est = power_iterate(op, &state.v, mode, cfg)?;
    if mode == Mode::Train && !est.exact_zero {
        state.v = est.v.clone();
        state.iterations += est.iterations;
        state.residual = est.residual;
    }
    Ok(est)
}

/// Spectral norm of a dense weight `[m, d]`; certify mode applies the safety
/// inflation.
pub fn spectral_norm_dense(weight: &Tensor, mode: Mode, state: &mut PowerState, cfg: &PowerConfig) -> Result<f64> {
    if weight.rank() != 2 {
        return Err(Error::shape("spectral_norm_dense", format!("weight {:?}", weight.shape())));
    }
    let op = LinearOperator::Dense { weight };
    Ok(estimate_with_state(&op, state, mode, cfg)?.sigma * cfg.inflation(mode))
}

/// Spectral norm of the convolution operator at `input_shape = [C, H, W]`.
pub fn spectral_norm_conv(
    kernel: &Tensor,
    input_shape: [usize; 3],
    stride: usize,
    padding: usize,
    mode: Mode,
    state: &mut PowerState,
    cfg: &PowerConfig,
) -> Result<f64> {
    let op = LinearOperator::Conv { kernel, input_shape, stride, padding };
    Ok(estimate_with_state(&op, state, mode, cfg)?.sigma * cfg.inflation(mode))
}
