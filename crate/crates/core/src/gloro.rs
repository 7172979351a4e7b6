//! The bottom-logit certificate, certified prediction and verified-robust
//! accuracy, the margin-based training losses, and the threatening-class
//! churn diagnostic.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lipschitz::{LipschitzReport, Mode};
use crate::network::Network;
use crate::tensor::Tensor;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The class other than `y` with the largest logit (lowest index on ties).
/// For a correctly classified point this is the runner-up class.
pub fn threatening_class(logits: &[f64], y: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if i != y && best.is_none_or(|b| v > logits[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

fn check_margin(logits: &[f64], k: &Tensor) -> Result<usize> {
    let m = logits.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", m)));
    }
    if k.shape() != [m, m] {
        return Err(Error::shape("margin matrix", format!("{:?} for {} classes", k.shape(), m)));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "logits" });
    }
    Ok(m)
}

/// `max_{i != j} (f_i + eps * K[j, i])` and the lowest index achieving it.
pub fn bottom_logit_arg(logits: &[f64], k: &Tensor, j: usize, eps: f64) -> Result<(f64, usize)> {
    let m = check_margin(logits, k)?;
    if j >= m {
        return Err(Error::InvalidArgument(format!("class {} out of range for {} classes", j, m)));
    }
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for i in 0..m {
        if i == j {
            continue;
        }
        let v = logits[i] + eps * k.data()[j * m + i];
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

pub fn bottom_logit(logits: &[f64], k: &Tensor, j: usize, eps: f64) -> Result<f64> {
    Ok(bottom_logit_arg(logits, k, j, eps)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertResult {
    pub logits: Vec<f64>,
    pub bottom: f64,
    /// Argmax of the logits regardless of certification.
    pub top: usize,
    /// `Some(top)` when certified, `None` for the abstaining class.
    pub predicted: Option<usize>,
    pub certified: bool,
    pub eps: f64,
}

/// Certificate for one logit vector: certified iff `f_top >= f_bottom`.
pub fn certify_logits(logits: &[f64], k: &Tensor, eps: f64) -> Result<CertResult> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be non-negative, got {}", eps)));
    }
    let top = argmax(logits);
    let bottom = bottom_logit(logits, k, top, eps)?;
    let certified = logits[top] >= bottom;
    Ok(CertResult { logits: logits.to_vec(), bottom, top, predicted: certified.then_some(top), certified, eps })
}

/// Forward pass plus certificate for every sample of `batch`.
///
/// `report` must be a certify-mode report for the network's current
/// parameters.
pub fn certified_predict(net: &Network, batch: &Tensor, eps: f64, report: &LipschitzReport) -> Result<Vec<CertResult>> {
    if report.param_hash != net.param_hash() {
        return Err(Error::StaleReport { report: report.param_hash, network: net.param_hash() });
    }
    if report.mode != Mode::Certify {
        return Err(Error::InvalidArgument("certificates need a certify-mode Lipschitz report".into()));
    }
    let logits = net.forward(batch)?;
    (0..logits.shape()[0]).map(|i| certify_logits(logits.row(i), &report.margin, eps)).collect()
}

/// Fraction of points that are certified and correctly classified.
pub fn vra(results: &[CertResult], labels: &[usize]) -> Result<f64> {
    if results.len() != labels.len() {
        return Err(Error::LengthMismatch { left: results.len(), right: labels.len() });
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results.iter().zip(labels).filter(|(r, &y)| r.predicted == Some(y)).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Fraction of points whose argmax equals the label.
pub fn clean_accuracy(results: &[CertResult], labels: &[usize]) -> Result<f64> {
    if results.len() != labels.len() {
        return Err(Error::LengthMismatch { left: results.len(), right: labels.len() });
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results.iter().zip(labels).filter(|(r, &y)| r.top == y).count();
    Ok(hits as f64 / results.len() as f64)
}

/// `index,label,prediction,f_top,f_bottom,certified`; abstentions print `bot`.
pub fn results_to_csv(results: &[CertResult], labels: &[usize]) -> Result<String> {
    if results.len() != labels.len() {
        return Err(Error::LengthMismatch { left: results.len(), right: labels.len() });
    }
    let mut out = String::from("index,label,prediction,f_top,f_bottom,certified\n");
    for (i, (r, y)) in results.iter().zip(labels).enumerate() {
        let pred = r.predicted.map_or_else(|| "bot".to_string(), |p| p.to_string());
        out.push_str(&format!("{},{},{},{:.17e},{:.17e},{}\n", i, y, pred, r.logits[r.top], r.bottom, r.certified));
    }
    Ok(out)
}

/// `(f_y - f_i) / K[y, i]` for `i != y`, zero at `y`. A zero margin constant
/// maps to a signed infinity (zero on equal logits).
pub fn kappa(logits: &[f64], y: usize, k: &Tensor) -> Result<Vec<f64>> {
    let m = check_margin(logits, k)?;
    if y >= m {
        return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", y, m)));
    }
    Ok((0..m)
        .map(|i| {
            if i == y {
                return 0.0;
            }
            let gap = logits[y] - logits[i];
            let kyi = k.data()[y * m + i];
            if kyi > 0.0 {
                gap / kyi
            } else if gap > 0.0 {
                f64::INFINITY
            } else if gap < 0.0 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        })
        .collect())
}

/// Per-instance quantities behind the adaptive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginState {
    pub kappa: Vec<f64>,
    /// `clip(kappa_i, 0, eps)`; zero at the label.
    pub radii: Vec<f64>,
    pub threat: usize,
}

pub fn margin_state(logits: &[f64], y: usize, k: &Tensor, eps: f64) -> Result<MarginState> {
    let kappa = kappa(logits, y, k)?;
    let radii = kappa.iter().map(|&c| c.clamp(0.0, eps)).collect();
    Ok(MarginState { kappa, radii, threat: threatening_class(logits, y) })
}

/// A loss value with its gradients with respect to the logits and the
/// margin matrix (row-major `[m, m]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub d_logits: Vec<f64>,
    pub d_margin: Vec<f64>,
}

fn log_softmax_ce(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
    let lse = mx + sum.ln();
    let mut grad: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    grad[y] -= 1.0;
    (lse - z[y], grad)
}

/// `-log(exp(f_y) / sum_i exp(f_i + r_i K[y, i]))` with the radii `r`
/// treated as constants (`r_y` is ignored).
pub fn margin_cross_entropy(logits: &[f64], y: usize, k: &Tensor, radii: &[f64]) -> Result<LossOutput> {
    let m = check_margin(logits, k)?;
    if radii.len() != m {
        return Err(Error::LengthMismatch { left: radii.len(), right: m });
    }
    let z: Vec<f64> = (0..m).map(|i| if i == y { logits[i] } else { logits[i] + radii[i] * k.data()[y * m + i] }).collect();
    let (value, dz) = log_softmax_ce(&z, y);
    let mut d_margin = vec![0.0; m * m];
    for i in 0..m {
        if i != y {
            d_margin[y * m + i] = dz[i] * radii[i];
        }
    }
    Ok(LossOutput { value, d_logits: dz, d_margin })
}

/// Adaptive-margin loss: radii `clip(kappa_i, 0, eps)` frozen.
pub fn emma_loss(logits: &[f64], y: usize, k: &Tensor, eps: f64) -> Result<LossOutput> {
    let st = margin_state(logits, y, k, eps)?;
    margin_cross_entropy(logits, y, k, &st.radii)
}

/// Fixed-margin loss: every radius equals `eps`.
pub fn fixed_margin_loss(logits: &[f64], y: usize, k: &Tensor, eps: f64) -> Result<LossOutput> {
    margin_cross_entropy(logits, y, k, &vec![eps; logits.len()])
}

pub fn plain_ce_loss(logits: &[f64], y: usize) -> Result<LossOutput> {
    let m = logits.len();
    if y >= m {
        return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", y, m)));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "logits" });
    }
    let (value, d_logits) = log_softmax_ce(logits, y);
    Ok(LossOutput { value, d_logits, d_margin: vec![0.0; m * m] })
}

/// Cross-entropy over `[f; f_bottom]` with target `target`; `f_bottom` is
/// taken against the logits' own argmax.
fn augmented_ce(logits: &[f64], target: usize, k: &Tensor, eps: f64) -> Result<LossOutput> {
    let m = check_margin(logits, k)?;
    let j = argmax(logits);
    let (bottom, a) = bottom_logit_arg(logits, k, j, eps)?;
    let mut z = logits.to_vec();
    z.push(bottom);
    let (value, dz) = log_softmax_ce(&z, target);
    let mut d_logits = dz[..m].to_vec();
    d_logits[a] += dz[m];
    let mut d_margin = vec![0.0; m * m];
    d_margin[j * m + a] = dz[m] * eps;
    Ok(LossOutput { value, d_logits, d_margin })
}

/// Cross-entropy over the logits augmented with the bottom logit, label `y`.
pub fn gloro_ce_loss(logits: &[f64], y: usize, k: &Tensor, eps: f64) -> Result<LossOutput> {
    if y >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {} out of range", y)));
    }
    augmented_ce(logits, y, k, eps)
}

/// `CE(f, y) + lambda * CE([f; f_bottom], argmax f)`.
pub fn gloro_trades_loss(logits: &[f64], y: usize, k: &Tensor, eps: f64, lambda: f64) -> Result<LossOutput> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", lambda)));
    }
    let mut out = plain_ce_loss(logits, y)?;
    check_margin(logits, k)?;
    if lambda > 0.0 {
        let reg = augmented_ce(logits, argmax(logits), k, eps)?;
        out.value += lambda * reg.value;
        for (a, b) in out.d_logits.iter_mut().zip(&reg.d_logits) {
            *a += lambda * b;
        }
        for (a, b) in out.d_margin.iter_mut().zip(&reg.d_margin) {
            *a += lambda * b;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Emma,
    GloroCe,
    GloroTrades { lambda: f64 },
    FixedMargin,
    PlainCe,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Emma => "emma",
            LossKind::GloroCe => "gloro_ce",
            LossKind::GloroTrades { .. } => "gloro_trades",
            LossKind::FixedMargin => "fixed_margin",
            LossKind::PlainCe => "plain_ce",
        }
    }

    /// Whether the loss depends on the margin matrix at all.
    pub fn uses_margin(&self) -> bool {
        !matches!(self, LossKind::PlainCe)
    }

    pub fn evaluate(&self, logits: &[f64], y: usize, k: &Tensor, eps: f64) -> Result<LossOutput> {
        match *self {
            LossKind::Emma => emma_loss(logits, y, k, eps),
            LossKind::GloroCe => gloro_ce_loss(logits, y, k, eps),
            LossKind::GloroTrades { lambda } => gloro_trades_loss(logits, y, k, eps, lambda),
            LossKind::FixedMargin => fixed_margin_loss(logits, y, k, eps),
            LossKind::PlainCe => plain_ce_loss(logits, y),
        }
    }

    /// Mean loss over a batch `[N, m]`, with gradients of the mean.
    pub fn evaluate_batch(&self, logits: &Tensor, labels: &[usize], k: &Tensor, eps: f64) -> Result<(f64, Tensor, Tensor)> {
        let (n, m) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != n {
            return Err(Error::LengthMismatch { left: n, right: labels.len() });
        }
        let mut value = 0.0;
        let mut d_logits = vec![0.0; n * m];
        let mut d_margin = vec![0.0; m * m];
        let inv = 1.0 / n as f64;
        for (s, &y) in labels.iter().enumerate() {
            let out = self.evaluate(logits.row(s), y, k, eps)?;
            value += out.value;
            for (a, b) in d_logits[s * m..(s + 1) * m].iter_mut().zip(&out.d_logits) {
                *a = b * inv;
            }
            for (a, b) in d_margin.iter_mut().zip(&out.d_margin) {
                *a += b * inv;
            }
        }
        Ok((value * inv, Tensor::new(vec![n, m], d_logits)?, Tensor::new(vec![m, m], d_margin)?))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;
    /// Parses a loss name; TRADES starts with `lambda = 1` (set separately).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emma" => Ok(LossKind::Emma),
            "gloro_ce" => Ok(LossKind::GloroCe),
            "gloro_trades" => Ok(LossKind::GloroTrades { lambda: 1.0 }),
            "fixed_margin" => Ok(LossKind::FixedMargin),
            "plain_ce" => Ok(LossKind::PlainCe),
            _ => Err(Error::InvalidArgument(format!(
                "unknown loss `{}` (emma|gloro_ce|gloro_trades|fixed_margin|plain_ce)",
                s
            ))),
        }
    }
}

/// Fraction of instances whose threatening class changed.
pub fn churn_metric(prev: &[usize], now: &[usize]) -> Result<f64> {
    if prev.len() != now.len() {
        return Err(Error::LengthMismatch { left: prev.len(), right: now.len() });
    }
    if prev.is_empty() {
        return Ok(0.0);
    }
    Ok(prev.iter().zip(now).filter(|(a, b)| a != b).count() as f64 / prev.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k3() -> Tensor {
        Tensor::new(vec![3, 3], vec![0., 2., 4., 2., 0., 3., 4., 3., 0.]).unwrap()
    }

    #[test]
    fn bottom_logit_example() {
        let f = [5.0, 3.0, 1.0];
        let b = bottom_logit(&f, &k3(), 0, 0.5).unwrap();
        assert_eq!(b, 4.0);
        let r = certify_logits(&f, &k3(), 0.5).unwrap();
        assert!(r.certified);
        assert_eq!(r.predicted, Some(0));
    }

    #[test]
    fn zero_radius_is_runner_up_and_ties_do_not_certify_strictly() {
        let f = [1.0, 4.0, 2.0];
        assert_eq!(bottom_logit(&f, &k3(), 1, 0.0).unwrap(), 2.0);
        // f_top == f_bottom certifies (>=)
        let tie = [3.0, 3.0, 0.0];
        let r = certify_logits(&tie, &k3(), 0.0).unwrap();
        assert_eq!(r.top, 0);
        assert!(r.certified);
        assert!(bottom_logit(&[1.0], &Tensor::zeros(&[1, 1]), 0, 0.1).is_err());
    }

    #[test]
    fn vra_examples() {
        let k = k3();
        let mk = |f: [f64; 3], e| certify_logits(&f, &k, e).unwrap();
        let rs = vec![mk([9., 0., 0.], 0.1), mk([0., 9., 0.], 0.1), mk([0., 0., 9.], 0.1), mk([1., 1., 0.9], 1.0)];
        assert_eq!(vra(&rs, &[0, 1, 2, 0]).unwrap(), 0.75);
        // certified but wrong counts toward neither VRA nor accuracy
        assert_eq!(vra(&rs, &[1, 1, 2, 0]).unwrap(), 0.5);
        assert_eq!(clean_accuracy(&rs, &[1, 1, 2, 0]).unwrap(), 0.75);
        let bots = vec![mk([1., 1., 0.9], 5.0); 3];
        assert_eq!(vra(&bots, &[0, 0, 0]).unwrap(), 0.0);
        assert!(vra(&bots, &[0]).is_err());
    }

    #[test]
    fn kappa_examples() {
        let k = Tensor::new(vec![2, 2], vec![0., 0.5, 0.5, 0.]).unwrap();
        assert_eq!(kappa(&[2.0, 1.0], 0, &k).unwrap(), vec![0.0, 2.0]);
        assert_eq!(kappa(&[1.0, 1.0], 0, &k).unwrap(), vec![0.0, 0.0]);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(kappa(&[2.0, 1.0], 0, &z).unwrap()[1], f64::INFINITY);
        assert_eq!(kappa(&[1.0, 2.0], 0, &z).unwrap()[1], f64::NEG_INFINITY);
        let st = margin_state(&[2.0, 1.0], 0, &z, 0.3).unwrap();
        assert_eq!(st.radii, vec![0.0, 0.3]);
        assert_eq!(st.threat, 1);
    }

    #[test]
    fn emma_direct_evaluation() {
        let k = Tensor::new(vec![2, 2], vec![0., 1., 1., 0.]).unwrap();
        let l = emma_loss(&[3.0, 0.0], 0, &k, 0.5).unwrap();
        let expect = -(3f64.exp() / (3f64.exp() + 0.5f64.exp())).ln();
        assert!((l.value - expect).abs() < 1e-14);
    }

    #[test]
    fn emma_is_ce_when_misclassified_against_everyone() {
        let k = k3();
        let f = [0.0, 2.0, 1.0];
        let e = emma_loss(&f, 0, &k, 0.7).unwrap();
        let c = plain_ce_loss(&f, 0).unwrap();
        assert!((e.value - c.value).abs() <= 1e-12);
        assert!(e.d_margin.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gloro_ce_direct_evaluation() {
        let k = Tensor::new(vec![2, 2], vec![0., 2., 2., 0.]).unwrap();
        let l = gloro_ce_loss(&[5.0, 3.0], 0, &k, 0.5).unwrap();
        let expect = -(5f64.exp() / (5f64.exp() + 3f64.exp() + 4f64.exp())).ln();
        assert!((l.value - expect).abs() < 1e-14);
    }

    #[test]
    fn trades_and_fixed_limits() {
        let k = k3();
        let f = [0.3, 1.2, -0.4];
        let ce = plain_ce_loss(&f, 2).unwrap().value;
        assert_eq!(gloro_trades_loss(&f, 2, &k, 0.5, 0.0).unwrap().value, ce);
        let reg = gloro_trades_loss(&f, 2, &k, 0.0, 1.0).unwrap().value - ce;
        assert!(reg.is_finite() && reg > 0.0);
        assert!((fixed_margin_loss(&f, 2, &k, 0.0).unwrap().value - ce).abs() < 1e-14);
        // saturated clip: every kappa >= eps
        let big = [10.0, 0.0, 0.0];
        let e = emma_loss(&big, 0, &k, 0.5).unwrap().value;
        let x = fixed_margin_loss(&big, 0, &k, 0.5).unwrap().value;
        assert!((e - x).abs() < 1e-15);
    }

    #[test]
    fn churn_examples() {
        assert_eq!(churn_metric(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(churn_metric(&[1, 2, 3], &[0, 0, 0]).unwrap(), 1.0);
        assert!((churn_metric(&[1, 2, 3], &[1, 3, 3]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(churn_metric(&[1], &[]).is_err());
    }

    fn random_margin(m: usize, seed: &[f64]) -> Tensor {
        let mut k = vec![0.0; m * m];
        let mut t = 0;
        for j in 0..m {
            for i in (j + 1)..m {
                let v = seed[t % seed.len()].abs() + 0.05;
                t += 1;
                k[j * m + i] = v;
                k[i * m + j] = v;
            }
        }
        Tensor::new(vec![m, m], k).unwrap()
    }

    fn fd_check(kind: LossKind, f: &[f64], y: usize, k: &Tensor, eps: f64, radii: Option<Vec<f64>>) {
        let eval = |f: &[f64], k: &Tensor| match &radii {
            Some(r) => margin_cross_entropy(f, y, k, r).unwrap().value,
            None => kind.evaluate(f, y, k, eps).unwrap().value,
        };
        let out = kind.evaluate(f, y, k, eps).unwrap();
        let h = 1e-6;
        for i in 0..f.len() {
            let mut p = f.to_vec();
            p[i] += h;
            let mut q = f.to_vec();
            q[i] -= h;
            let fd = (eval(&p, k) - eval(&q, k)) / (2.0 * h);
            assert!((fd - out.d_logits[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{kind} logit {i}: {fd} vs {}", out.d_logits[i]);
        }
        let m = f.len();
        for e in 0..m * m {
            let (j, i) = (e / m, e % m);
            if i == j {
                continue;
            }
            let mut p = k.clone();
            p.data_mut()[e] += h;
            let mut q = k.clone();
            q.data_mut()[e] -= h;
            let fd = (eval(f, &p) - eval(f, &q)) / (2.0 * h);
            assert!((fd - out.d_margin[e]).abs() <= 1e-5 * fd.abs().max(1e-3), "{kind} K[{j},{i}]: {fd} vs {}", out.d_margin[e]);
        }
    }

    proptest! {
        #[test]
        fn bottom_logit_matches_naive_loop(f in prop::collection::vec(-5.0f64..5.0, 2..7), ks in prop::collection::vec(0.0f64..3.0, 21), eps in 0.0f64..2.0) {
            let m = f.len();
            let k = random_margin(m, &ks);
            let j = argmax(&f);
            let mut naive = f64::NEG_INFINITY;
            for i in 0..m {
                if i != j {
                    naive = naive.max(f[i] + eps * k.data()[j * m + i]);
                }
            }
            prop_assert_eq!(bottom_logit(&f, &k, j, eps).unwrap(), naive);
        }

        #[test]
        fn loss_ordering_and_shift_invariance(f in prop::collection::vec(-4.0f64..4.0, 2..6), ks in prop::collection::vec(0.0f64..2.0, 15), eps in 0.0f64..1.0, shift in -50.0f64..50.0, yy in 0usize..6) {
            let m = f.len();
            let y = yy % m;
            let k = random_margin(m, &ks);
            let ce = plain_ce_loss(&f, y).unwrap().value;
            let e = emma_loss(&f, y, &k, eps).unwrap().value;
            let x = fixed_margin_loss(&f, y, &k, eps).unwrap().value;
            prop_assert!(ce <= e + 1e-12 && e <= x + 1e-12);
            let g: Vec<f64> = f.iter().map(|v| v + shift).collect();
            for kind in [LossKind::Emma, LossKind::GloroCe, LossKind::GloroTrades { lambda: 0.7 }, LossKind::FixedMargin] {
                let a = kind.evaluate(&f, y, &k, eps).unwrap().value;
                let b = kind.evaluate(&g, y, &k, eps).unwrap().value;
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
            prop_assert_eq!(kappa(&f, y, &k).unwrap().iter().zip(kappa(&g, y, &k).unwrap()).all(|(a, b)| (a - b).abs() < 1e-9), true);
            let c1 = certify_logits(&f, &k, eps).unwrap();
            let c2 = certify_logits(&g, &k, eps).unwrap();
            prop_assert_eq!(c1.predicted, c2.predicted);
        }

        #[test]
        fn certified_set_shrinks_with_radius(f in prop::collection::vec(-3.0f64..3.0, 2..6), ks in prop::collection::vec(0.0f64..2.0, 15), e1 in 0.0f64..1.0, de in 0.0f64..1.0) {
            let k = random_margin(f.len(), &ks);
            let j = argmax(&f);
            let b1 = bottom_logit(&f, &k, j, e1).unwrap();
            let b2 = bottom_logit(&f, &k, j, e1 + de).unwrap();
            prop_assert!(b2 >= b1);
            if certify_logits(&f, &k, e1 + de).unwrap().certified {
                prop_assert!(certify_logits(&f, &k, e1).unwrap().certified);
            }
        }

        #[test]
        fn loss_gradients_match_finite_differences(f in prop::collection::vec(-3.0f64..3.0, 3..6), ks in prop::collection::vec(0.1f64..2.0, 15), eps in 0.05f64..1.0, yy in 0usize..6) {
            let m = f.len();
            let y = yy % m;
            let k = random_margin(m, &ks);
            // keep away from argmax / bottom-logit switching points
            let mut sorted = f.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(sorted[0] - sorted[1] > 1e-3);
            let j = argmax(&f);
            let mut cands: Vec<f64> = (0..m).filter(|&i| i != j).map(|i| f[i] + eps * k.data()[j * m + i]).collect();
            cands.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(cands[0] - cands[1] > 1e-3);
            let radii = margin_state(&f, y, &k, eps).unwrap().radii;
            fd_check(LossKind::Emma, &f, y, &k, eps, Some(radii));
            fd_check(LossKind::FixedMargin, &f, y, &k, eps, None);
            fd_check(LossKind::GloroCe, &f, y, &k, eps, None);
            fd_check(LossKind::GloroTrades { lambda: 0.8 }, &f, y, &k, eps, None);
            fd_check(LossKind::PlainCe, &f, y, &k, eps, None);
        }
    }
}
