//! Independent reference computations: materialized convolution operators
//! with exact spectral norms, PGD attacks against certificates, empirical
//! Lipschitz lower bounds and finite-difference gradient checks.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gloro::{argmax, threatening_class};
use crate::network::{LayerParams, LayerSpec, Network};
use crate::tensor::{backward_leaves, conv2d, GradTape, Precision, Tensor};

/// Largest input dimension [`materialize_conv_operator`] accepts.
pub const MATERIALIZE_LIMIT: usize = 16_384;

/// Dimension up to which [`exact_spectral_norm`] uses a full decomposition.
pub const FULL_DECOMPOSITION_LIMIT: usize = 512;

/// Dense matrix of a convolution at a fixed input shape.
#[derive(Debug, Clone)]
pub struct MaterializedOperator {
    pub matrix: DMatrix<f64>,
    pub kernel: Tensor,
    pub input_shape: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

/// Column `j` is the flattened response to the `j`-th basis input.
pub fn materialize_conv_operator(kernel: &Tensor, input_shape: [usize; 3], stride: usize, padding: usize) -> Result<MaterializedOperator> {
    let dims: usize = input_shape.iter().product();
    if dims > MATERIALIZE_LIMIT {
        return Err(Error::OperatorTooLarge { dims, limit: MATERIALIZE_LIMIT });
    }
    let shape = vec![1, input_shape[0], input_shape[1], input_shape[2]];
    let mut columns = Vec::with_capacity(dims);
    for j in 0..dims {
        let mut e = Tensor::zeros(&shape);
        e.data_mut()[j] = 1.0;
        columns.push(conv2d(&e, kernel, stride, padding)?.into_data());
    }
    let rows = columns.first().map_or(0, |c| c.len());
    let matrix = DMatrix::from_fn(rows, dims, |r, c| columns[c][r]);
    Ok(MaterializedOperator { matrix, kernel: kernel.clone(), input_shape, stride, padding })
}

pub fn dense_matrix(weight: &Tensor) -> Result<DMatrix<f64>> {
    if weight.rank() != 2 {
        return Err(Error::shape("dense_matrix", format!("{:?}", weight.shape())));
    }
    Ok(DMatrix::from_row_slice(weight.shape()[0], weight.shape()[1], weight.data()))
}

/// Largest singular value: full SVD when the smaller dimension is at most
/// [`FULL_DECOMPOSITION_LIMIT`], otherwise [`spectral_norm_iterative`].
pub fn exact_spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "exact_spectral_norm" });
    }
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0.0);
    }
    if m.nrows().min(m.ncols()) <= FULL_DECOMPOSITION_LIMIT {
        Ok(spectral_norm_full(m))
    } else {
        spectral_norm_iterative(m)
    }
}

pub fn spectral_norm_full(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Restarted Lanczos on `M^T M` with full reorthogonalization, run until the
/// eigen-residual `||M^T M v - lambda v||` is at most `1e-12 * lambda`.
pub fn spectral_norm_iterative(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.ncols();
    let apply = |v: &nalgebra::DVector<f64>| m.transpose() * (m * v);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = nalgebra::DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    v /= v.norm();
    let steps = n.min(80);
    for _ in 0..200 {
        let mut q: Vec<nalgebra::DVector<f64>> = vec![v.clone()];
        let mut alpha = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        for j in 0..steps {
            let mut w = apply(&q[j]);
            let a = q[j].dot(&w);
            alpha.push(a);
            for _ in 0..2 {
                for qi in &q {
                    let c = qi.dot(&w);
                    w -= qi * c;
                }
            }
            let b = w.norm();
            if j + 1 == steps || b <= 1e-14 * a.abs().max(1e-300) {
                break;
            }
            beta.push(b);
            q.push(w / b);
        }
        let k = alpha.len();
        let t = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let eig = nalgebra::SymmetricEigen::new(t);
        let top = (0..k).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap_or(0);
        let mut next = nalgebra::DVector::zeros(n);
        for (i, qi) in q.iter().enumerate().take(k) {
            next += qi * eig.eigenvectors[(i, top)];
        }
        next /= next.norm();
        let bv = apply(&next);
        let lambda = next.dot(&bv);
        let residual = (bv - &next * lambda).norm();
        v = next;
        if lambda <= 0.0 || residual <= 1e-12 * lambda {
            return Ok(lambda.max(0.0).sqrt());
        }
    }
    Err(Error::NonConvergence { iterations: 200 * steps, residual: f64::NAN })
}

/// Exact per-layer factors from materialized operators, in the same
/// composition the bound uses: `sigma` for convolutions, the norm of
/// `I + scale * beta * Conv` for linear residual blocks (built from the raw
/// weight, not the equivalent kernel), `1 + sigma1 * sigma2` for conventional
/// residual blocks, `sigma_conv * sigma_dense` for the neck and 1 for MinMax.
/// The head is `None`, as is any layer whose operator exceeds
/// [`MATERIALIZE_LIMIT`].
pub fn exact_layer_factors(net: &Network) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::new();
    for (l, (spec, lp)) in net.spec().layers.iter().zip(net.layers()).enumerate() {
        let input = net.input_shape(l);
        let factor = match (spec, lp) {
            (LayerSpec::Stem { stride, padding, .. }, LayerParams::Stem { weight, .. })
            | (LayerSpec::ConvBlock { stride, padding, .. }, LayerParams::Conv { weight, .. }) => {
                conv_norm(net.param(*weight), input, *stride, *padding)?
            }
            (LayerSpec::LinearResidualBlock { kernel_size, depth_scale, .. }, LayerParams::LinearResidual { weight, beta }) => {
                let w = scaled_rows(net.param(*weight), beta.map(|b| net.param(b)), *depth_scale);
                match materialize_conv_operator(&w, input, 1, kernel_size / 2) {
                    Ok(op) => {
                        let n = op.matrix.nrows();
                        Some(exact_spectral_norm(&(op.matrix + DMatrix::identity(n, n)))?)
                    }
                    Err(Error::OperatorTooLarge { .. }) => None,
                    Err(e) => return Err(e),
                }
            }
            (LayerSpec::ConventionalResidualBlock { kernel_size, .. }, LayerParams::ConventionalResidual { conv1, conv2, beta }) => {
                let w2 = scaled_rows(net.param(*conv2), beta.map(|b| net.param(b)), 1.0);
                let s1 = conv_norm(net.param(*conv1), input, 1, kernel_size / 2)?;
                let s2 = conv_norm(&w2, input, 1, kernel_size / 2)?;
                s1.zip(s2).map(|(a, b)| 1.0 + a * b)
            }
            (LayerSpec::Neck { stride, .. }, LayerParams::Neck { conv_weight, dense_weight, .. }) => {
                let sc = conv_norm(net.param(*conv_weight), input, *stride, 0)?;
                let sd = exact_spectral_norm(&dense_matrix(net.param(*dense_weight))?)?;
                sc.map(|c| c * sd)
            }
            (LayerSpec::MinMax, _) => Some(1.0),
            _ => None,
        };
        out.push(factor);
    }
    Ok(out)
}

fn conv_norm(kernel: &Tensor, input: [usize; 3], stride: usize, padding: usize) -> Result<Option<f64>> {
    match materialize_conv_operator(kernel, input, stride, padding) {
        Ok(op) => Ok(Some(exact_spectral_norm(&op.matrix)?)),
        Err(Error::OperatorTooLarge { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn scaled_rows(w: &Tensor, beta: Option<&Tensor>, scale: f64) -> Tensor {
    let per = w.len() / w.shape()[0];
    let mut out = w.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= scale * beta.map_or(1.0, |b| b.data()[i / per]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub steps: usize,
    pub restarts: usize,
    /// Defaults to `2.5 * eps / steps`.
    pub step_size: Option<f64>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { steps: 200, restarts: 5, step_size: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub success: bool,
    /// Best perturbation found (the successful one when `success`).
    pub delta: Tensor,
    pub delta_norm: f64,
    /// Argmax at `x + delta`.
    pub class: usize,
}

/// L2 PGD on the margin `max_{i != y} f_i - f_y` for every sample of `x`,
/// attacking the given `targets` (usually the predicted classes).
///
/// Restart 0 starts from `x`; later restarts start uniformly inside the ball.
/// Each step moves by `step_size` along the normalized gradient and projects
/// back onto the ball. A point stops being attacked once its argmax changes.
pub fn pgd_attack(net: &Network, x: &Tensor, targets: &[usize], eps: f64, cfg: &AttackConfig) -> Result<Vec<AttackOutcome>> {
    let n = x.shape()[0];
    if targets.len() != n {
        return Err(Error::LengthMismatch { left: n, right: targets.len() });
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("attack radius must be non-negative, got {}", eps)));
    }
    let sample_shape = {
        let mut s = x.shape().to_vec();
        s[0] = 1;
        s
    };
    let per: usize = sample_shape.iter().product();
    let base = net.forward(x)?;
    let mut out: Vec<AttackOutcome> = (0..n)
        .map(|i| AttackOutcome {
            success: argmax(base.row(i)) != targets[i],
            delta: Tensor::zeros(&sample_shape),
            delta_norm: 0.0,
            class: argmax(base.row(i)),
        })
        .collect();
    let mut best_margin: Vec<f64> = (0..n).map(|i| margin(base.row(i), targets[i])).collect();
    if eps == 0.0 || cfg.steps == 0 {
        return Ok(out);
    }
    let alpha = cfg.step_size.unwrap_or(2.5 * eps / cfg.steps as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for restart in 0..cfg.restarts.max(1) {
        let active: Vec<usize> = (0..n).filter(|&i| !out[i].success).collect();
        if active.is_empty() {
            break;
        }
        let xa = x.gather_rows(&active);
        let ya: Vec<usize> = active.iter().map(|&i| targets[i]).collect();
        let mut delta = vec![0.0; active.len() * per];
        if restart > 0 {
            for d in delta.chunks_mut(per) {
                let dir: Vec<f64> = (0..per).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let nd = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = eps * rng.random::<f64>().powf(1.0 / per as f64);
                for (a, b) in d.iter_mut().zip(&dir) {
                    *a = r * b / nd;
                }
            }
        }
        let mut live: Vec<bool> = vec![true; active.len()];
        for _ in 0..cfg.steps {
            let (logits, grad) = margin_gradient(net, &xa, &delta, &ya)?;
            let mut any = false;
            for (s, d) in delta.chunks_mut(per).enumerate() {
                if !live[s] {
                    continue;
                }
                let row = logits.row(s);
                record(&mut out[active[s]], &mut best_margin[active[s]], row, ya[s], d, &sample_shape);
                if out[active[s]].success {
                    live[s] = false;
                    continue;
                }
                any = true;
                let g = &grad.data()[s * per..(s + 1) * per];
                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gn == 0.0 {
                    continue;
                }
                for (a, b) in d.iter_mut().zip(g) {
                    *a += alpha * b / gn;
                }
                let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if dn > eps {
                    for a in d.iter_mut() {
                        *a *= eps / dn;
                    }
                }
            }
            if !any {
                break;
            }
        }
        let (logits, _) = margin_gradient(net, &xa, &delta, &ya)?;
        for (s, d) in delta.chunks(per).enumerate() {
            if live[s] {
                record(&mut out[active[s]], &mut best_margin[active[s]], logits.row(s), ya[s], d, &sample_shape);
            }
        }
    }
    // confirm every success with a fresh forward pass
    for (i, o) in out.iter_mut().enumerate() {
        if o.success && o.delta_norm > 0.0 {
            let xp = x.sample(i).add(&o.delta)?;
            let cls = argmax(net.forward(&xp)?.row(0));
            o.class = cls;
            o.success = cls != targets[i] && o.delta_norm <= eps + 1e-9;
        }
    }
    Ok(out)
}

fn margin(logits: &[f64], y: usize) -> f64 {
    logits[threatening_class(logits, y)] - logits[y]
}

fn record(o: &mut AttackOutcome, best: &mut f64, logits: &[f64], y: usize, delta: &[f64], shape: &[usize]) {
    let cls = argmax(logits);
    let mgn = margin(logits, y);
    if cls != y || mgn > *best {
        *best = mgn;
        o.delta = Tensor::new(shape.to_vec(), delta.to_vec()).expect("shape matches");
        o.delta_norm = o.delta.norm();
        o.class = cls;
        o.success = cls != y;
    }
}

/// Logits at `x + delta` and the input gradient of the summed margins.
fn margin_gradient(net: &Network, x: &Tensor, delta: &[f64], targets: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut xp = x.clone();
    for (a, b) in xp.data_mut().iter_mut().zip(delta) {
        *a += b;
    }
    let mut tape = GradTape::new(Precision::F64);
    let leaf = tape.leaf(xp);
    let rec = net.record(&mut tape, leaf)?;
    let logits = tape.value(rec.logits).clone();
    let m = logits.shape()[1];
    let mut seed = vec![0.0; logits.len()];
    for (s, &y) in targets.iter().enumerate() {
        let t = threatening_class(logits.row(s), y);
        seed[s * m + t] += 1.0;
        seed[s * m + y] -= 1.0;
    }
    let grads = backward_leaves(&tape, rec.logits, Tensor::new(logits.shape().to_vec(), seed)?)?;
    let g = grads.leaf(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((logits, g))
}

/// Lower bound on the Lipschitz constant of the network up to the head: the
/// largest ratio `||h(x) - h(x')|| / ||x - x'||` over random pairs, each
/// refined by power-iteration steps on the local Jacobian.
pub fn empirical_lipschitz_lower_bound(net: &Network, num_pairs: usize, seed: u64) -> Result<f64> {
    let [c, h, w] = net.spec().input;
    let shape = vec![1, c, h, w];
    let per = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..num_pairs {
        let x = Tensor::randn(&shape, 1.0, &mut rng);
        let mut dir = Tensor::randn(&shape, 1.0, &mut rng);
        let t = 1e-3 * (per as f64).sqrt();
        let fx = net.features(&x)?;
        for _ in 0..30 {
            dir = dir.scale(1.0 / dir.norm());
            let xp = x.add(&dir.scale(t))?;
            let mut tape = GradTape::new(Precision::F64);
            let leaf = tape.leaf(xp.clone());
            let rec = net.record(&mut tape, leaf)?;
            let diff = tape.value(rec.features).sub(&fx)?;
            let gap = xp.sub(&x)?.norm();
            if gap > 0.0 {
                best = best.max(diff.norm() / gap);
            }
            let g = backward_leaves(&tape, rec.features, diff)?;
            match g.leaf(leaf) {
                Some(next) if next.norm() > 0.0 => dir = next.clone(),
                _ => break,
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter index and flat coordinate of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Central differences on up to `coords` random coordinates of every
/// parameter in `grads`. Relative error is `|fd - g| / max(|fd|, |g|, 1e-6)`.
pub fn finite_diff_grad_check<F>(
    mut loss_eval: F,
    net: &Network,
    grads: &BTreeMap<usize, Tensor>,
    step: f64,
    tol: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Network) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0, passed: true };
    let mut probe = net.clone();
    for (p, g) in (0..net.params().len()).filter_map(|p| grads.get(&p).map(|g| (p, g))) {
        if g.shape() != net.param(p).shape() {
            return Err(Error::shape("finite_diff_grad_check", format!("gradient for {}", net.params()[p].name)));
        }
        let len = g.len();
        let picks: Vec<usize> = if len <= coords { (0..len).collect() } else { sample(&mut rng, len, coords).into_vec() };
        for e in picks {
            let orig = probe.param(p).data()[e];
            probe.param_mut(p).data_mut()[e] = orig + step;
            let up = loss_eval(&probe)?;
            probe.param_mut(p).data_mut()[e] = orig - step;
            let down = loss_eval(&probe)?;
            probe.param_mut(p).data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = g.data()[e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((p, e));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
