//! Training loop: radius ramp, Adam with an optional Lookahead wrapper, the
//! combined loss/bound gradient, and per-epoch certified evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{augment, batches, DataSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::gloro::{certified_predict, churn_metric, clean_accuracy, threatening_class, vra, LossKind};
use crate::lipschitz::{
    certify_report, compose_sublipschitz, frozen_sublipschitz, margin_backward, margin_lipschitz, sublipschitz_backward,
    BoundTrace, LipschitzReport, LipschitzState, Mode, PowerConfig,
};
use crate::network::{build_network, Arch, ArchParams, Checkpoint, Network, NetworkSpec};
use crate::tensor::{backward_from, GradTape, Precision, Tensor};

/// Training radius for epoch `t` of `total`: ramps linearly from `0.1 eps` to
/// `2 eps` over the first half, then stays at `2 eps`.
pub fn epsilon_schedule(t: usize, total: usize, eps: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { (2.0 * t as f64 / total as f64).min(1.0) };
    (frac * 1.9 + 0.1) * eps
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<usize, Tensor>,
    v: BTreeMap<usize, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected update of every parameter; missing gradients count as zero.
    pub fn step(&mut self, net: &mut Network, grads: &BTreeMap<usize, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in 0..net.params().len() {
            let shape = net.param(p).shape().to_vec();
            let m = self.m.entry(p).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(p).or_insert_with(|| Tensor::zeros(&shape));
            let g = grads.get(&p);
            if let Some(g) = g {
                if g.shape() != shape.as_slice() {
                    return Err(Error::shape("adam", format!("gradient {:?} for parameter {:?}", g.shape(), shape)));
                }
            }
            let w = net.param_mut(p).data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                w[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn extras(&self, net: &Network) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.t".to_string(), Tensor::scalar(self.t as f64))];
        for (p, m) in &self.m {
            out.push((format!("adam.m/{}", net.params()[*p].name), m.clone()));
        }
        for (p, v) in &self.v {
            out.push((format!("adam.v/{}", net.params()[*p].name), v.clone()));
        }
        out
    }

    fn restore(&mut self, net: &Network, ck: &Checkpoint) {
        if let Some(t) = ck.extra("adam.t") {
            self.t = t.data()[0] as u64;
        }
        for (p, param) in net.params().iter().enumerate() {
            if let Some(m) = ck.extra(&format!("adam.m/{}", param.name)) {
                self.m.insert(p, m.clone());
            }
            if let Some(v) = ck.extra(&format!("adam.v/{}", param.name)) {
                self.v.insert(p, v.clone());
            }
        }
    }
}

/// Every `k` inner steps the slow weights move `alpha` of the way toward the
/// fast weights, and the fast weights are reset to them.
#[derive(Debug, Clone, PartialEq)]
pub struct Lookahead {
    pub k: usize,
    pub alpha: f64,
    slow: Vec<Tensor>,
    count: usize,
}

impl Lookahead {
    pub fn new(net: &Network, k: usize, alpha: f64) -> Result<Self> {
        if k == 0 || !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("lookahead needs k >= 1 and alpha in [0, 1], got {} / {}", k, alpha)));
        }
        Ok(Lookahead { k, alpha, slow: net.params().iter().map(|p| p.value.clone()).collect(), count: 0 })
    }

    pub fn slow_weights(&self) -> &[Tensor] {
        &self.slow
    }

    /// Call after every inner step.
    pub fn after_step(&mut self, net: &mut Network) -> Result<()> {
        self.count += 1;
        if self.count % self.k != 0 {
            return Ok(());
        }
        for (p, slow) in self.slow.iter_mut().enumerate() {
            let fast = net.param(p);
            for (s, f) in slow.data_mut().iter_mut().zip(fast.data()) {
                *s += self.alpha * (f - *s);
            }
            net.set_param(p, slow.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub adam: Adam,
    pub lookahead: Option<Lookahead>,
}

impl Optimizer {
    pub fn step(&mut self, net: &mut Network, grads: &BTreeMap<usize, Tensor>) -> Result<()> {
        self.adam.step(net, grads)?;
        if let Some(la) = &mut self.lookahead {
            la.after_step(net)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: DataSpec,
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    pub neck_dim: usize,
    pub loss: LossKind,
    /// Certification radius; training ramps up to twice this.
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub power_iters: usize,
    pub precision: Precision,
    pub lookahead: bool,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub flip: bool,
    pub input_noise: f64,
    /// Save a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Record wall-clock seconds per epoch in the log (breaks byte-identical logs).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DataSpec::default_blobs(),
            arch: Arch::LiResNet,
            depth: 4,
            width: 16,
            neck_dim: 32,
            loss: LossKind::Emma,
            eps: 0.3,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            power_iters: 5,
            precision: Precision::F64,
            lookahead: true,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            flip: false,
            input_noise: 0.0,
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("eps must be finite and non-negative, got {}", self.eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let LossKind::GloroTrades { lambda } = self.loss {
            if !(lambda >= 0.0) {
                return Err(Error::Config(format!("lambda must be non-negative, got {}", lambda)));
            }
        }
        Ok(())
    }

    pub fn power_config(&self) -> PowerConfig {
        PowerConfig { train_iters: self.power_iters, ..PowerConfig::default() }
    }

    pub fn network_spec(&self, input: [usize; 3], num_classes: usize) -> Result<NetworkSpec> {
        NetworkSpec::preset(
            self.arch,
            &ArchParams { input, num_classes, depth: self.depth, width: self.width, neck_dim: self.neck_dim },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub eps_train: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub vra: f64,
    pub churn: f64,
    pub k_sub: f64,
    pub wall_time: Option<f64>,
}

pub const TRAINLOG_HEADER: &str = "epoch,eps_train,train_loss,clean_acc,vra,churn,k_sub,wall_time";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Threatening class of every training point at initialization.
    pub initial_threats: Vec<usize>,
    /// Threatening classes after each epoch.
    pub threats: Vec<Vec<usize>>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", TRAINLOG_HEADER);
        for r in &self.rows {
            let wall = r.wall_time.map_or(String::new(), |w| w.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.eps_train, r.train_loss, r.clean_acc, r.vra, r.churn, r.k_sub, wall
            ));
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<LogRow>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRAINLOG_HEADER) {
            return Err(Error::Config(format!("trainlog header must be `{}`", TRAINLOG_HEADER)));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Config(format!("trainlog row {} has {} fields", i + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("trainlog row {}: {}", i + 1, e)));
            rows.push(LogRow {
                epoch: f[0].parse().map_err(|e| Error::Config(format!("trainlog row {}: {}", i + 1, e)))?,
                eps_train: num(f[1])?,
                train_loss: num(f[2])?,
                clean_acc: num(f[3])?,
                vra: num(f[4])?,
                churn: num(f[5])?,
                k_sub: num(f[6])?,
                wall_time: if f[7].is_empty() { None } else { Some(num(f[7])?) },
            });
        }
        Ok(rows)
    }

    /// `epoch,t0,t1,...`; the first row is labelled `init`.
    pub fn threats_csv(&self) -> String {
        let n = self.initial_threats.len();
        let mut out = String::from("epoch");
        for i in 0..n {
            out.push_str(&format!(",t{}", i));
        }
        out.push('\n');
        let mut row = |label: String, t: &[usize]| {
            out.push_str(&label);
            for c in t {
                out.push_str(&format!(",{}", c));
            }
            out.push('\n');
        };
        row("init".into(), &self.initial_threats);
        for (e, t) in self.threats.iter().enumerate() {
            row(e.to_string(), t);
        }
        out
    }

    /// Inverse of [`TrainLog::threats_csv`]: `(initial, per-epoch)`.
    pub fn threats_from_csv(text: &str) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        let mut init = None;
        let mut epochs = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
            let mut f = line.split(',');
            let label = f.next().unwrap_or("");
            let t = f
                .map(|s| s.parse::<usize>().map_err(|e| Error::Config(format!("threats row {}: {}", i, e))))
                .collect::<Result<Vec<_>>>()?;
            if label == "init" {
                init = Some(t);
            } else {
                epochs.push(t);
            }
        }
        Ok((init.ok_or_else(|| Error::Config("threats file lacks the init row".into()))?, epochs))
    }
}

/// Loss value and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub grads: BTreeMap<usize, Tensor>,
    pub k_sub: f64,
    /// Singular vector pairs behind `k_sub` (absent for plain cross-entropy).
    pub trace: Option<BoundTrace>,
    /// Per-sample radii used by the adaptive loss.
    pub radii: Vec<Vec<f64>>,
}

/// Forward, loss and full gradient (through the logits and through the
/// margin constants) for one batch. In train mode the power iterates advance.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    net: &Network,
    state: &mut LipschitzState,
    mode: Mode,
    power: &PowerConfig,
    batch: &Tensor,
    labels: &[usize],
    loss: LossKind,
    eps: f64,
    precision: Precision,
) -> Result<StepResult> {
    let mut tape = GradTape::new(precision);
    let x = tape.leaf(batch.clone());
    let rec = net.record(&mut tape, x)?;
    let logits = tape.value(rec.logits).clone();
    let m = net.num_classes();
    let (k_sub, trace, margin) = if loss.uses_margin() {
        let (report, trace) = compose_sublipschitz(net, state, mode, power)?;
        (report.k_sub, Some(trace), report.margin)
    } else {
        (f64::NAN, None, Tensor::zeros(&[m, m]))
    };
    let (value, d_logits, d_margin) = loss.evaluate_batch(&logits, labels, &margin, eps)?;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let mut grads = backward_from(&tape, rec.logits, d_logits)?.into_params();
    if let Some(trace) = &trace {
        let (d_head, d_k) = margin_backward(net.head_weight(), k_sub, &d_margin)?;
        add_grad(&mut grads, net.head_weight_index(), d_head)?;
        for (p, g) in sublipschitz_backward(net, trace, d_k)? {
            add_grad(&mut grads, p, g)?;
        }
    }
    let radii = if matches!(loss, LossKind::Emma) {
        (0..labels.len())
            .map(|s| crate::gloro::margin_state(logits.row(s), labels[s], &margin, eps).map(|st| st.radii))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(StepResult { loss: value, grads, k_sub, trace, radii })
}

fn add_grad(grads: &mut BTreeMap<usize, Tensor>, p: usize, g: Tensor) -> Result<()> {
    match grads.get_mut(&p) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(p, g);
            Ok(())
        }
    }
}

/// The batch loss with the singular vectors of `step` held fixed and, for the
/// adaptive loss, its radii frozen: the function whose exact gradient
/// [`loss_and_grad`] returns.
pub fn frozen_loss(net: &Network, batch: &Tensor, labels: &[usize], loss: LossKind, eps: f64, step: &StepResult) -> Result<f64> {
    let logits = net.forward(batch)?;
    let m = net.num_classes();
    let margin = match &step.trace {
        Some(trace) => margin_lipschitz(net.head_weight(), frozen_sublipschitz(net, trace)?)?,
        None => Tensor::zeros(&[m, m]),
    };
    let mut total = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        total += match loss {
            LossKind::Emma => crate::gloro::margin_cross_entropy(logits.row(s), y, &margin, &step.radii[s])?.value,
            other => other.evaluate(logits.row(s), y, &margin, eps)?.value,
        };
    }
    Ok(total / labels.len() as f64)
}

/// Threatening class (relative to the label) of every sample.
pub fn threats(net: &Network, ds: &Dataset) -> Result<Vec<usize>> {
    let logits = net.forward(&ds.inputs)?;
    Ok((0..ds.len()).map(|i| threatening_class(logits.row(i), ds.labels[i])).collect())
}

/// Clean accuracy and VRA of `net` on `ds` at radius `eps`.
pub fn evaluate(net: &Network, ds: &Dataset, eps: f64, report: &LipschitzReport) -> Result<(f64, f64)> {
    let results = certified_predict(net, &ds.inputs, eps, report)?;
    Ok((clean_accuracy(&results, &ds.labels)?, vra(&results, &ds.labels)?))
}

/// Epoch-by-epoch trainer. Keeps the network from the end of the last
/// completed epoch so a divergence never loses it.
pub struct Trainer {
    pub config: TrainConfig,
    net: Network,
    last_good: Network,
    state: LipschitzState,
    optimizer: Optimizer,
    train: Dataset,
    test: Dataset,
    log: TrainLog,
    prev_threats: Vec<usize>,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let train = config.data.with_split(Split::Train).load()?;
        let test = config.data.with_split(Split::Test).load()?;
        let classes = train.num_classes.max(test.num_classes);
        let spec = config.network_spec(train.input_shape(), classes)?;
        let net = build_network(&spec, config.seed)?;
        Trainer::from_network(config, net, train, test)
    }

    /// Starts from an existing network (e.g. a loaded checkpoint).
    pub fn from_network(config: TrainConfig, net: Network, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        if train.input_shape() != net.spec().input || test.input_shape() != net.spec().input {
            return Err(Error::SpecMismatch(format!(
                "network input {:?} vs data {:?}",
                net.spec().input,
                train.input_shape()
            )));
        }
        let state = LipschitzState::new(&net, config.seed.wrapping_add(1000));
        let lookahead = if config.lookahead {
            Some(Lookahead::new(&net, config.lookahead_k, config.lookahead_alpha)?)
        } else {
            None
        };
        let optimizer = Optimizer { adam: Adam::new(config.lr), lookahead };
        let initial = threats(&net, &train)?;
        let log = TrainLog { rows: Vec::new(), initial_threats: initial.clone(), threats: Vec::new() };
        Ok(Trainer { config, last_good: net.clone(), net, state, optimizer, train, test, log, prev_threats: initial, epoch: 0 })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn last_good(&self) -> &Network {
        &self.last_good
    }

    pub fn lipschitz_state(&self) -> &LipschitzState {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Certify-mode report for the current parameters.
    pub fn certify_report(&self) -> Result<LipschitzReport> {
        certify_report(&self.net, &self.state, &PowerConfig::default())
    }

    /// Network, optimizer moments, power iterates and epoch counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net.clone());
        ck.precision = self.config.precision;
        ck.extras.push(("epoch".into(), Tensor::scalar(self.epoch as f64)));
        ck.extras.extend(self.optimizer.adam.extras(&self.net));
        if let Some(la) = &self.optimizer.lookahead {
            for (p, s) in la.slow.iter().enumerate() {
                ck.extras.push((format!("lookahead.slow/{}", self.net.params()[p].name), s.clone()));
            }
            ck.extras.push(("lookahead.count".into(), Tensor::scalar(la.count as f64)));
        }
        ck.extras.extend(self.state.to_extras());
        ck
    }

    /// Restores optimizer and power state saved by [`Trainer::checkpoint`].
    pub fn restore_state(&mut self, ck: &Checkpoint) -> Result<()> {
        self.optimizer.adam.restore(&self.net, ck);
        if let Some(la) = &mut self.optimizer.lookahead {
            for (p, param) in self.net.params().iter().enumerate() {
                if let Some(s) = ck.extra(&format!("lookahead.slow/{}", param.name)) {
                    la.slow[p] = s.clone();
                }
            }
            if let Some(c) = ck.extra("lookahead.count") {
                la.count = c.data()[0] as usize;
            }
        }
        self.state = LipschitzState::from_extras(&self.net, |k| ck.extra(k).cloned(), self.config.seed.wrapping_add(1000))?;
        if let Some(e) = ck.extra("epoch") {
            self.epoch = e.data()[0] as usize;
        }
        Ok(())
    }

    /// Runs one epoch and appends its log row.
    pub fn run_epoch(&mut self) -> Result<LogRow> {
        let start = Instant::now();
        let t = self.epoch;
        let cfg = &self.config;
        let eps_train = epsilon_schedule(t, cfg.epochs, cfg.eps);
        let power = cfg.power_config();
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2000));
        aug_rng.set_stream(t as u64);
        let mut total = 0.0;
        let mut count = 0usize;
        let diverged = |reason: String| Error::Diverged { epoch: t, reason };
        for (mut x, y) in batches(&self.train, cfg.batch_size, true, cfg.seed, t as u64)? {
            if cfg.flip || cfg.input_noise > 0.0 {
                augment(&mut x, cfg.flip, cfg.input_noise, &mut aug_rng);
            }
            let step = match loss_and_grad(&self.net, &mut self.state, Mode::Train, &power, &x, &y, cfg.loss, eps_train, cfg.precision) {
                Ok(s) => s,
                Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite {}", op))),
                Err(Error::NonConvergence { .. }) => return Err(diverged("bound computation failed".into())),
                Err(e) => return Err(e),
            };
            if step.grads.values().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            self.optimizer.step(&mut self.net, &step.grads)?;
            if self.net.params().iter().any(|p| !p.value.is_finite()) {
                return Err(diverged("non-finite parameters".into()));
            }
            total += step.loss * y.len() as f64;
            count += y.len();
        }
        let report = match self.certify_report() {
            Ok(r) => r,
            Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite {}", op))),
            Err(e) => return Err(e),
        };
        let (clean_acc, vra) = evaluate(&self.net, &self.test, cfg.eps, &report)?;
        let now = threats(&self.net, &self.train)?;
        let churn = churn_metric(&self.prev_threats, &now)?;
        let row = LogRow {
            epoch: t,
            eps_train,
            train_loss: total / count as f64,
            clean_acc,
            vra,
            churn,
            k_sub: report.k_sub,
            wall_time: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        if !row.train_loss.is_finite() || !row.k_sub.is_finite() {
            return Err(diverged("non-finite epoch metrics".into()));
        }
        self.log.rows.push(row.clone());
        self.log.threats.push(now.clone());
        self.prev_threats = now;
        self.last_good = self.net.clone();
        self.epoch += 1;
        Ok(row)
    }
}

/// Runs every epoch of `config`.
pub fn train(config: TrainConfig) -> Result<(Network, TrainLog)> {
    let mut tr = Trainer::new(config)?;
    while !tr.is_done() {
        tr.run_epoch()?;
    }
    Ok((tr.net, tr.log))
}
