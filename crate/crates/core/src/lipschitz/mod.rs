//! Spectral-norm bounds for every layer, their composition into the constant
//! of the network up to the head, pairwise margin constants, and the gradient
//! of the composed constant with respect to the parameters.

mod power;

pub use power::{
    estimate_with_state, power_iterate, spectral_norm_conv, spectral_norm_dense, Estimate, LinearOperator, Mode,
    PowerConfig, PowerState,
};

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, Network};
use crate::tensor::Tensor;

/// How a layer factor was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Closed form (zero operator).
    ExactSpectral,
    PowerIteration { residual: f64 },
    Activation,
    /// `1 + K_g` for a conventional residual block.
    LooseResidualSum,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::ExactSpectral => "exact-spectral",
            Method::PowerIteration { .. } => "power-iteration",
            Method::Activation => "activation-1",
            Method::LooseResidualSum => "loose-residual-sum",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBound {
    pub layer: usize,
    pub kind: &'static str,
    pub method: Method,
    pub value: f64,
    /// Largest residual over the operators bounded for this layer.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub layers: Vec<LayerBound>,
    pub k_sub: f64,
    /// `margin[j][i] = ||w_j - w_i|| * k_sub`, shape `[m, m]`.
    pub margin: Tensor,
    pub mode: Mode,
    pub safety_margin: f64,
    /// [`Network::param_hash`] of the network the report was computed for.
    pub param_hash: u64,
}

impl LipschitzReport {
    /// `layer,kind,method,bound,residual,iterations` rows plus a final total row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,method,bound,residual,iterations\n");
        for b in &self.layers {
            out.push_str(&format!(
                "{},{},{},{:.17e},{:.3e},{}\n",
                b.layer,
                b.kind,
                b.method.tag(),
                b.value,
                b.residual,
                b.iterations
            ));
        }
        out.push_str(&format!("total,k_sub,product,{:.17e},,\n", self.k_sub));
        out
    }

    pub fn margin_at(&self, j: usize, i: usize) -> f64 {
        let m = self.margin.shape()[0];
        self.margin.data()[j * m + i]
    }
}

impl fmt::Display for LipschitzReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.layers {
            writeln!(f, "layer {:>3} {:<8} {:<18} {:.6}", b.layer, b.kind, b.method.tag(), b.value)?;
        }
        write!(f, "k_sub = {:.6} ({} mode)", self.k_sub, self.mode.name())
    }
}

/// One linear operator bounded by power iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SiteKind {
    /// Plain conv weight: stem, conv block, neck conv.
    Conv,
    /// Equivalent kernel of a linear residual block.
    LinearResidual,
    ResidualConv1,
    /// `beta ⊙ conv2` of a conventional residual block.
    ResidualConv2,
    NeckDense,
}

#[derive(Debug, Clone)]
struct Site {
    layer: usize,
    kind: SiteKind,
    /// Parameter holding the raw weight.
    weight: usize,
    beta: Option<usize>,
    scale: f64,
    input: Vec<usize>,
    stride: usize,
    padding: usize,
}

fn sites(net: &Network) -> Vec<Site> {
    let mut out = Vec::new();
    for (l, (spec, lp)) in net.spec().layers.iter().zip(net.layers()).enumerate() {
        let [c, h, w] = net.input_shape(l);
        let conv = |kind, weight, beta, scale, stride, padding| Site {
            layer: l,
            kind,
            weight,
            beta,
            scale,
            input: vec![1, c, h, w],
            stride,
            padding,
        };
        match (spec, lp) {
            (LayerSpec::Stem { stride, padding, .. }, LayerParams::Stem { weight, .. })
            | (LayerSpec::ConvBlock { stride, padding, .. }, LayerParams::Conv { weight, .. }) => {
                out.push(conv(SiteKind::Conv, *weight, None, 1.0, *stride, *padding));
            }
            (LayerSpec::LinearResidualBlock { kernel_size, depth_scale, .. }, LayerParams::LinearResidual { weight, beta }) => {
                out.push(conv(SiteKind::LinearResidual, *weight, *beta, *depth_scale, 1, kernel_size / 2));
            }
            (LayerSpec::ConventionalResidualBlock { kernel_size, .. }, LayerParams::ConventionalResidual { conv1, conv2, beta }) => {
                out.push(conv(SiteKind::ResidualConv1, *conv1, None, 1.0, 1, kernel_size / 2));
                out.push(conv(SiteKind::ResidualConv2, *conv2, *beta, 1.0, 1, kernel_size / 2));
            }
            (LayerSpec::Neck { stride, .. }, LayerParams::Neck { conv_weight, dense_weight, .. }) => {
                out.push(conv(SiteKind::Conv, *conv_weight, None, 1.0, *stride, 0));
                let d = net.param(*dense_weight).shape()[1];
                out.push(Site {
                    layer: l,
                    kind: SiteKind::NeckDense,
                    weight: *dense_weight,
                    beta: None,
                    scale: 1.0,
                    input: vec![1, d],
                    stride: 1,
                    padding: 0,
                });
            }
            _ => {}
        }
    }
    out
}

/// The coefficients the site's power iteration runs on.
fn site_coefficients(net: &Network, s: &Site) -> Result<Tensor> {
    let w = net.param(s.weight);
    match s.kind {
        SiteKind::Conv | SiteKind::ResidualConv1 | SiteKind::NeckDense => Ok(w.clone()),
        SiteKind::LinearResidual => crate::network::equivalent_kernel(w, s.beta.map(|b| net.param(b)), s.scale),
        SiteKind::ResidualConv2 => Ok(match s.beta {
            Some(b) => scale_out_channels(w, net.param(b).data(), 1.0),
            None => w.clone(),
        }),
    }
}

fn scale_out_channels(w: &Tensor, beta: &[f64], scale: f64) -> Tensor {
    let per = w.len() / w.shape()[0];
    let mut out = w.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= scale * beta[i / per];
    }
    out
}

fn operator<'a>(s: &Site, coeffs: &'a Tensor) -> LinearOperator<'a> {
    match s.kind {
        SiteKind::NeckDense => LinearOperator::Dense { weight: coeffs },
        _ => LinearOperator::Conv {
            kernel: coeffs,
            input_shape: [s.input[1], s.input[2], s.input[3]],
            stride: s.stride,
            padding: s.padding,
        },
    }
}

/// Persistent power iterates, one per bounded operator of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzState {
    states: Vec<PowerState>,
}

impl LipschitzState {
    /// Fresh unit-Gaussian iterates; operator `k` is seeded with `seed + k`.
    pub fn new(net: &Network, seed: u64) -> Self {
        let states = sites(net)
            .iter()
            .enumerate()
            .map(|(k, s)| PowerState::new(&s.input, seed.wrapping_add(k as u64)))
            .collect();
        LipschitzState { states }
    }

    pub fn states(&self) -> &[PowerState] {
        &self.states
    }

    /// Named blobs for checkpointing (`power/<k>`).
    pub fn to_extras(&self) -> Vec<(String, Tensor)> {
        self.states.iter().enumerate().map(|(k, s)| (format!("power/{}", k), s.vector().clone())).collect()
    }

    pub fn from_extras(net: &Network, lookup: impl Fn(&str) -> Option<Tensor>, seed: u64) -> Result<Self> {
        let mut st = LipschitzState::new(net, seed);
        for (k, s) in st.states.iter_mut().enumerate() {
            if let Some(v) = lookup(&format!("power/{}", k)) {
                if v.shape() != s.vector().shape() {
                    return Err(Error::CorruptCheckpoint(format!("power/{} has shape {:?}", k, v.shape())));
                }
                *s = PowerState::from_vector(v)?;
            }
        }
        Ok(st)
    }
}

/// Final singular-vector pairs of one bound computation; enough to
/// differentiate the composed constant with `u`, `v` held fixed.
#[derive(Debug, Clone)]
pub struct BoundTrace {
    sigmas: Vec<f64>,
    us: Vec<Tensor>,
    vs: Vec<Tensor>,
    inflation: f64,
    param_hash: u64,
}

impl BoundTrace {
    /// Raw (uninflated) operator norms in site order.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Per-layer factors from per-site norms.
fn layer_factors(net: &Network, sigmas: &[f64]) -> Vec<(usize, f64)> {
    let head = net.head_index();
    let mut out = Vec::with_capacity(head);
    let mut k = 0;
    for (l, lp) in net.layers().iter().enumerate().take(head) {
        let f = match lp {
            LayerParams::MinMax => 1.0,
            LayerParams::ConventionalResidual { .. } => {
                let v = 1.0 + sigmas[k + 1] * sigmas[k];
                k += 2;
                v
            }
            LayerParams::Neck { .. } => {
                let v = sigmas[k] * sigmas[k + 1];
                k += 2;
                v
            }
            LayerParams::Head { .. } => unreachable!("head is last"),
            _ => {
                k += 1;
                sigmas[k - 1]
            }
        };
        out.push((l, f));
    }
    out
}

/// Computes every layer bound before the head and composes them.
///
/// Train mode advances `state`; certify mode leaves it untouched and applies
/// the safety inflation to every operator norm.
pub fn compose_sublipschitz(
    net: &Network,
    state: &mut LipschitzState,
    mode: Mode,
    cfg: &PowerConfig,
) -> Result<(LipschitzReport, BoundTrace)> {
    let sites = sites(net);
    if state.states.len() != sites.len() {
        return Err(Error::InvalidArgument(format!(
            "power state holds {} iterates, network has {} bounded operators",
            state.states.len(),
            sites.len()
        )));
    }
    let inflation = cfg.inflation(mode);
    let mut sigmas = Vec::with_capacity(sites.len());
    let mut us = Vec::with_capacity(sites.len());
    let mut vs = Vec::with_capacity(sites.len());
    let mut info = Vec::with_capacity(sites.len());
    for (s, st) in sites.iter().zip(state.states.iter_mut()) {
        let coeffs = site_coefficients(net, s)?;
        let est = estimate_with_state(&operator(s, &coeffs), st, mode, cfg)?;
        sigmas.push(est.sigma * inflation);
        info.push((est.exact_zero, est.residual, est.iterations));
        us.push(est.u);
        vs.push(est.v);
    }
    let factors = layer_factors(net, &sigmas);
    let mut layers = Vec::with_capacity(factors.len());
    let mut k_sub = 1.0;
    for (l, value) in factors {
        k_sub *= value;
        let own: Vec<_> = sites.iter().zip(&info).filter(|(s, _)| s.layer == l).map(|(_, i)| *i).collect();
        let residual = own.iter().map(|i| i.1).fold(0.0, f64::max);
        let iterations = own.iter().map(|i| i.2).sum();
        let method = match &net.layers()[l] {
            LayerParams::MinMax => Method::Activation,
            LayerParams::ConventionalResidual { .. } => Method::LooseResidualSum,
            _ if own.iter().all(|i| i.0) => Method::ExactSpectral,
            _ => Method::PowerIteration { residual },
        };
        layers.push(LayerBound { layer: l, kind: net.spec().layers[l].kind(), method, value, residual, iterations });
    }
    let margin = margin_lipschitz(net.head_weight(), k_sub)?;
    let param_hash = net.param_hash();
    let report = LipschitzReport {
        layers,
        k_sub,
        margin,
        mode,
        safety_margin: if mode == Mode::Certify { cfg.safety_margin } else { 0.0 },
        param_hash,
    };
    let trace = BoundTrace { sigmas: sigmas.iter().map(|s| s / inflation).collect(), us, vs, inflation, param_hash };
    Ok((report, trace))
}

/// Certify-mode report from a snapshot of `state`.
pub fn certify_report(net: &Network, state: &LipschitzState, cfg: &PowerConfig) -> Result<LipschitzReport> {
    let mut snapshot = state.clone();
    Ok(compose_sublipschitz(net, &mut snapshot, Mode::Certify, cfg)?.0)
}

/// Bound of a single layer computed from a fresh iterate.
pub fn layer_lipschitz(net: &Network, layer: usize, mode: Mode, cfg: &PowerConfig, seed: u64) -> Result<LayerBound> {
    if layer >= net.head_index() {
        return Err(Error::UnsupportedLayer(format!(
            "layer {} ({}) is not bounded individually",
            layer,
            net.spec().layers.get(layer).map(|l| l.kind()).unwrap_or("missing")
        )));
    }
    let mut state = LipschitzState::new(net, seed);
    let (report, _) = compose_sublipschitz(net, &mut state, mode, cfg)?;
    Ok(report.layers[layer].clone())
}

/// `1 + sigma(depth_scale * beta ⊙ W)` for a linear residual block: the
/// generic residual bound, which ignores the identity/branch coupling.
pub fn naive_residual_bound(net: &Network, layer: usize, cfg: &PowerConfig, seed: u64) -> Result<f64> {
    let site = sites(net)
        .into_iter()
        .find(|s| s.layer == layer && s.kind == SiteKind::LinearResidual)
        .ok_or_else(|| Error::UnsupportedLayer(format!("layer {} is not a linear residual block", layer)))?;
    let w = net.param(site.weight);
    let branch = match site.beta {
        Some(b) => scale_out_channels(w, net.param(b).data(), site.scale),
        None => w.scale(site.scale),
    };
    let mut st = PowerState::new(&site.input, seed);
    Ok(1.0 + estimate_with_state(&operator(&site, &branch), &mut st, Mode::Certify, cfg)?.sigma * cfg.inflation(Mode::Certify))
}

/// `K[j, i] = ||w_j - w_i|| * k_sub`.
pub fn margin_lipschitz(head_weight: &Tensor, k_sub: f64) -> Result<Tensor> {
    if head_weight.rank() != 2 {
        return Err(Error::shape("margin_lipschitz", format!("head weight {:?}", head_weight.shape())));
    }
    if !(k_sub >= 0.0) {
        return Err(Error::InvalidArgument(format!("k_sub must be non-negative, got {}", k_sub)));
    }
    let m = head_weight.shape()[0];
    let mut out = vec![0.0; m * m];
    for j in 0..m {
        for i in (j + 1)..m {
            let d: f64 = head_weight.row(j).iter().zip(head_weight.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = d.sqrt() * k_sub;
            out[j * m + i] = v;
            out[i * m + j] = v;
        }
    }
    Tensor::new(vec![m, m], out)
}

/// Pulls a gradient with respect to the margin matrix back to the head weight
/// and `k_sub`. Pairs with identical rows contribute no head gradient.
pub fn margin_backward(head_weight: &Tensor, k_sub: f64, d_margin: &Tensor) -> Result<(Tensor, f64)> {
    let (m, d) = (head_weight.shape()[0], head_weight.shape()[1]);
    if d_margin.shape() != [m, m] {
        return Err(Error::shape("margin_backward", format!("gradient {:?} for {} classes", d_margin.shape(), m)));
    }
    let mut d_head = vec![0.0; m * d];
    let mut d_k = 0.0;
    for j in 0..m {
        for i in 0..m {
            let g = d_margin.data()[j * m + i];
            if i == j || g == 0.0 {
                continue;
            }
            let diff: Vec<f64> = head_weight.row(j).iter().zip(head_weight.row(i)).map(|(a, b)| a - b).collect();
            let n = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            d_k += g * n;
            if n > 0.0 {
                for k in 0..d {
                    let c = g * k_sub * diff[k] / n;
                    d_head[j * d + k] += c;
                    d_head[i * d + k] -= c;
                }
            }
        }
    }
    Ok((Tensor::new(vec![m, d], d_head)?, d_k))
}

/// Gradient of `k_sub` with respect to the parameters, with every singular
/// vector pair in `trace` held fixed.
pub fn sublipschitz_backward(net: &Network, trace: &BoundTrace, d_k_sub: f64) -> Result<BTreeMap<usize, Tensor>> {
    if trace.param_hash != net.param_hash() {
        return Err(Error::StaleReport { report: trace.param_hash, network: net.param_hash() });
    }
    let sites = sites(net);
    let sig: Vec<f64> = trace.sigmas.iter().map(|s| s * trace.inflation).collect();
    let factors = layer_factors(net, &sig);
    let values: Vec<f64> = factors.iter().map(|f| f.1).collect();
    // product of all other factors, without dividing
    let n = values.len();
    let mut prefix = vec![1.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] * values[i];
    }
    let mut suffix = vec![1.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] * values[i];
    }
    let mut d_factor = vec![0.0; net.layers().len()];
    for (idx, (l, _)) in factors.iter().enumerate() {
        d_factor[*l] = d_k_sub * prefix[idx] * suffix[idx + 1];
    }
    let mut grads: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut k = 0;
    while k < sites.len() {
        let s = &sites[k];
        let df = d_factor[s.layer];
        // d(layer factor)/d(raw sigma) for the site(s) of this layer
        let pair = matches!(net.layers()[s.layer], LayerParams::ConventionalResidual { .. } | LayerParams::Neck { .. });
        let local: Vec<(usize, f64)> = if pair {
            vec![(k, df * sig[k + 1] * trace.inflation), (k + 1, df * sig[k] * trace.inflation)]
        } else {
            vec![(k, df * trace.inflation)]
        };
        for (site_idx, d_sigma) in local {
            if d_sigma != 0.0 && trace.sigmas[site_idx] > 0.0 {
                site_backward(net, &sites[site_idx], &trace.us[site_idx], &trace.vs[site_idx], d_sigma, &mut grads)?;
            }
        }
        k += if pair { 2 } else { 1 };
    }
    Ok(grads)
}

fn accumulate(grads: &mut BTreeMap<usize, Tensor>, idx: usize, g: Tensor) -> Result<()> {
    match grads.get_mut(&idx) {
        Some(t) => t.add_assign(&g),
        None => {
            grads.insert(idx, g);
            Ok(())
        }
    }
}

fn site_backward(net: &Network, s: &Site, u: &Tensor, v: &Tensor, d_sigma: f64, grads: &mut BTreeMap<usize, Tensor>) -> Result<()> {
    let coeffs = site_coefficients(net, s)?;
    let g = operator(s, &coeffs).coefficient_grad(u, v)?.scale(d_sigma);
    let w = net.param(s.weight);
    match (s.kind, s.beta) {
        (SiteKind::Conv | SiteKind::ResidualConv1 | SiteKind::NeckDense, _) | (SiteKind::ResidualConv2, None) => {
            accumulate(grads, s.weight, g)
        }
        (SiteKind::LinearResidual, None) => accumulate(grads, s.weight, g.scale(s.scale)),
        (SiteKind::LinearResidual | SiteKind::ResidualConv2, Some(b)) => {
            let beta = net.param(b).data();
            let per = w.len() / w.shape()[0];
            let mut d_beta = vec![0.0; beta.len()];
            for (i, (gv, wv)) in g.data().iter().zip(w.data()).enumerate() {
                d_beta[i / per] += s.scale * gv * wv;
            }
            accumulate(grads, s.weight, scale_out_channels(&g, beta, s.scale))?;
            accumulate(grads, b, Tensor::new(vec![beta.len()], d_beta)?)
        }
    }
}

/// `k_sub` with every singular vector pair in `trace` held fixed: each
/// operator norm is replaced by `u^T A(params) v`. Differentiating this with
/// finite differences checks [`sublipschitz_backward`] exactly.
pub fn frozen_sublipschitz(net: &Network, trace: &BoundTrace) -> Result<f64> {
    let sites = sites(net);
    if sites.len() != trace.vs.len() {
        return Err(Error::InvalidArgument("trace does not belong to this architecture".into()));
    }
    let mut sigmas = Vec::with_capacity(sites.len());
    for (k, s) in sites.iter().enumerate() {
        // zero-operator sites carry no direction and stay at zero
        let sigma = if trace.sigmas[k] > 0.0 {
            let coeffs = site_coefficients(net, s)?;
            operator(s, &coeffs).apply(&trace.vs[k])?.dot(&trace.us[k])
        } else {
            0.0
        };
        sigmas.push(sigma * trace.inflation);
    }
    Ok(layer_factors(net, &sigmas).iter().map(|f| f.1).product())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, Arch, ArchParams, NetworkSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact() -> PowerConfig {
        PowerConfig { safety_margin: 0.0, ..PowerConfig::default() }
    }

    fn net(arch: Arch, depth: usize) -> Network {
        let spec = NetworkSpec::preset(arch, &ArchParams { input: [1, 1, 6], num_classes: 4, depth, width: 4, neck_dim: 6 }).unwrap();
        build_network(&spec, 11).unwrap()
    }

    #[test]
    fn margin_examples() {
        let w = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let k = margin_lipschitz(&w, 2.0).unwrap();
        assert!((k.data()[1] - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(k.data()[0], 0.0);
        let same = Tensor::new(vec![2, 2], vec![1., 2., 1., 2.]).unwrap();
        assert_eq!(margin_lipschitz(&same, 3.0).unwrap().data(), &[0.0; 4]);
        assert!(margin_lipschitz(&w, -1.0).is_err());
    }

    #[test]
    fn margin_matches_pairwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let k = margin_lipschitz(&w, 1.0).unwrap();
        for j in 0..5 {
            for i in 0..5 {
                let mut s = 0.0;
                for c in 0..8 {
                    let d = w.data()[j * 8 + c] - w.data()[i * 8 + c];
                    s += d * d;
                }
                assert!((k.data()[j * 5 + i] - s.sqrt()).abs() < 1e-12);
                assert_eq!(k.data()[j * 5 + i], k.data()[i * 5 + j]);
            }
        }
    }

    #[test]
    fn report_total_is_product_of_layers() {
        for arch in [Arch::LiResNet, Arch::ConvNet, Arch::ResNet] {
            let n = net(arch, 4);
            let mut st = LipschitzState::new(&n, 0);
            let (rep, _) = compose_sublipschitz(&n, &mut st, Mode::Certify, &PowerConfig::default()).unwrap();
            let prod: f64 = rep.layers.iter().map(|b| b.value).product();
            assert!((prod - rep.k_sub).abs() <= 1e-15 * rep.k_sub);
            assert_eq!(rep.layers.len(), n.head_index());
            for b in &rep.layers {
                if b.kind == "minmax" {
                    assert_eq!(b.value, 1.0);
                    assert_eq!(b.method, Method::Activation);
                }
            }
        }
    }

    #[test]
    fn conventional_block_at_zero_beta_is_one() {
        let n = net(Arch::ResNet, 2);
        let mut st = LipschitzState::new(&n, 0);
        let (rep, _) = compose_sublipschitz(&n, &mut st, Mode::Certify, &exact()).unwrap();
        for b in rep.layers.iter().filter(|b| b.kind == "resblock") {
            assert_eq!(b.value, 1.0);
            assert_eq!(b.method, Method::LooseResidualSum);
        }
    }

    #[test]
    fn conventional_block_half_half() {
        let spec = NetworkSpec {
            input: [2, 3, 3],
            layers: vec![
                LayerSpec::ConventionalResidualBlock { channels: 2, kernel_size: 1, beta_per_channel: true },
                LayerSpec::DenseHead { num_classes: 2 },
            ],
        };
        let mut n = build_network(&spec, 0).unwrap();
        let half = Tensor::new(vec![2, 2, 1, 1], vec![0.5, 0., 0., 0.5]).unwrap();
        for name in ["l0.conv1", "l0.conv2"] {
            let i = n.param_index(name).unwrap();
            n.set_param(i, half.clone()).unwrap();
        }
        let b = n.param_index("l0.beta").unwrap();
        n.set_param(b, Tensor::full(&[2], 1.0)).unwrap();
        let bound = layer_lipschitz(&n, 0, Mode::Certify, &exact(), 0).unwrap();
        assert!((bound.value - 1.25).abs() < 1e-12);
    }

    #[test]
    fn linear_block_with_zero_weight_is_one() {
        let mut n = net(Arch::LiResNet, 2);
        let l = n.spec().layers.iter().position(|l| matches!(l, LayerSpec::LinearResidualBlock { .. })).unwrap();
        let w = n.param_index(&format!("l{}.weight", l)).unwrap();
        let shape = n.param(w).shape().to_vec();
        n.set_param(w, Tensor::zeros(&shape)).unwrap();
        let b = layer_lipschitz(&n, l, Mode::Certify, &exact(), 0).unwrap();
        assert!((b.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_a_kernel_scales_bounds() {
        let mut n = net(Arch::ConvNet, 2);
        let mut st = LipschitzState::new(&n, 0);
        let (before, _) = compose_sublipschitz(&n, &mut st.clone(), Mode::Certify, &exact()).unwrap();
        let w = n.param_index("l0.weight").unwrap();
        let scaled = n.param(w).scale(3.0);
        n.set_param(w, scaled).unwrap();
        let (after, _) = compose_sublipschitz(&n, &mut st, Mode::Certify, &exact()).unwrap();
        assert!((after.layers[0].value / before.layers[0].value - 3.0).abs() < 1e-12);
        assert!((after.k_sub / before.k_sub - 3.0).abs() < 1e-9);
    }

    #[test]
    fn stem_factor_is_one_when_other_factors_match() {
        // two factors 2 and 3 compose to 6
        let spec = NetworkSpec {
            input: [1, 2, 2],
            layers: vec![
                LayerSpec::ConvBlock { channels: 1, kernel: 1, stride: 1, padding: 0 },
                LayerSpec::ConvBlock { channels: 1, kernel: 1, stride: 1, padding: 0 },
                LayerSpec::DenseHead { num_classes: 2 },
            ],
        };
        let mut n = build_network(&spec, 0).unwrap();
        n.set_param(n.param_index("l0.weight").unwrap(), Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        n.set_param(n.param_index("l1.weight").unwrap(), Tensor::full(&[1, 1, 1, 1], -3.0)).unwrap();
        let mut st = LipschitzState::new(&n, 0);
        let (rep, _) = compose_sublipschitz(&n, &mut st, Mode::Certify, &exact()).unwrap();
        assert!((rep.k_sub - 6.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_a_row_per_layer_and_total() {
        let n = net(Arch::LiResNet, 2);
        let rep = certify_report(&n, &LipschitzState::new(&n, 0), &PowerConfig::default()).unwrap();
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), rep.layers.len() + 2);
        assert!(csv.lines().last().unwrap().starts_with("total,"));
    }

    #[test]
    fn state_round_trips_through_extras() {
        let n = net(Arch::ResNet, 2);
        let mut st = LipschitzState::new(&n, 4);
        compose_sublipschitz(&n, &mut st, Mode::Train, &PowerConfig::default()).unwrap();
        let extras = st.to_extras();
        let back = LipschitzState::from_extras(&n, |k| extras.iter().find(|e| e.0 == k).map(|e| e.1.clone()), 0).unwrap();
        for (a, b) in back.states().iter().zip(st.states()) {
            assert_eq!(a.vector(), b.vector());
        }
    }

    fn perturb_and_check(n: &Network, mode: Mode) {
        let cfg = PowerConfig::default();
        let mut st = LipschitzState::new(n, 2);
        let (_, trace) = compose_sublipschitz(n, &mut st, mode, &cfg).unwrap();
        let grads = sublipschitz_backward(n, &trace, 1.0).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (idx, g) in &grads {
            for e in [0, g.len() / 2, g.len() - 1] {
                let mut plus = n.clone();
                plus.param_mut(*idx).data_mut()[e] += h;
                let mut minus = n.clone();
                minus.param_mut(*idx).data_mut()[e] -= h;
                let fd = (frozen_sublipschitz(&plus, &trace).unwrap() - frozen_sublipschitz(&minus, &trace).unwrap()) / (2.0 * h);
                let an = g.data()[e];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "param {idx}[{e}]: fd {fd} vs {an}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn bound_gradient_matches_frozen_finite_differences() {
        for arch in [Arch::LiResNet, Arch::ConvNet] {
            perturb_and_check(&net(arch, 2), Mode::Train);
            perturb_and_check(&net(arch, 2), Mode::Certify);
        }
        let mut r = net(Arch::ResNet, 2);
        for p in 0..r.params().len() {
            if r.params()[p].name.ends_with(".beta") {
                let s = r.param(p).shape().to_vec();
                r.set_param(p, Tensor::full(&s, 0.3)).unwrap();
            }
        }
        perturb_and_check(&r, Mode::Train);
    }

    #[test]
    fn frozen_value_equals_bound_at_the_trace_point() {
        let n = net(Arch::LiResNet, 3);
        let mut st = LipschitzState::new(&n, 2);
        let (rep, trace) = compose_sublipschitz(&n, &mut st, Mode::Train, &PowerConfig::default()).unwrap();
        let f = frozen_sublipschitz(&n, &trace).unwrap();
        assert!((f - rep.k_sub).abs() <= 1e-12 * rep.k_sub);
    }
}
