//! Run-config files and the command implementations behind the `certlip`
//! binary. Every command returns an [`Outcome`] with the process exit code
//! and a one-line `key=value` summary.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{Document, Section};
use crate::datasets::{DataSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::gloro::{argmax, certified_predict, churn_metric, clean_accuracy, results_to_csv, vra, LossKind};
use crate::lipschitz::{compose_sublipschitz, naive_residual_bound, LipschitzReport, LipschitzState, Mode, PowerConfig};
use crate::network::{load_checkpoint, save_checkpoint, Arch, Checkpoint, LayerSpec, Network};
use crate::oracle::{exact_layer_factors, pgd_attack, AttackConfig};
use crate::tensor::Precision;
use crate::training::{TrainConfig, TrainLog, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_SOUNDNESS: i32 = 3;

/// Seed offset for power iterates missing from a checkpoint.
const POWER_SEED: u64 = 1000;

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::NonConvergence { .. } | Error::Diverged { .. } | Error::StaleReport { .. } => {
            EXIT_NUMERICAL
        }
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Outcome { code: EXIT_OK, summary }
    }
}

/// Reads `CERTLIP_THREADS` (default 1). Work is sequential either way; the
/// value only has to be a positive integer.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("CERTLIP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("CERTLIP_THREADS must be a positive integer, got {:?}", v))),
        },
    }
}

/// Everything a training run needs: `[data]`, `[model]`, `[train]` and
/// `[output]` sections. Missing sections and keys take their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { train: TrainConfig::default(), out_dir: PathBuf::from("run") }
    }
}

const MODEL_KEYS: &[&str] = &["arch", "depth", "width", "neck_dim"];
const TRAIN_KEYS: &[&str] = &[
    "loss",
    "lambda",
    "eps",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "power_iters",
    "precision",
    "lookahead",
    "lookahead_k",
    "lookahead_alpha",
    "flip",
    "input_noise",
    "checkpoint_every",
    "log_wall_time",
];
const OUTPUT_KEYS: &[&str] = &["dir"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let doc = Document::parse(text)?;
        doc.check_sections(&["data", "model", "train", "output"])?;
        let d = TrainConfig::default();
        let empty = |name: &str| Section::new(name);
        let data = match doc.section("data") {
            Some(s) => DataSpec::from_section(s)?,
            None => d.data.clone(),
        };
        let model = doc.section("model").cloned().unwrap_or_else(|| empty("model"));
        model.check_keys(MODEL_KEYS)?;
        let t = doc.section("train").cloned().unwrap_or_else(|| empty("train"));
        t.check_keys(TRAIN_KEYS)?;
        let output = doc.section("output").cloned().unwrap_or_else(|| empty("output"));
        output.check_keys(OUTPUT_KEYS)?;

        let mut loss = t.parse::<LossKind>("loss")?.unwrap_or(d.loss);
        let lambda = t.parse::<f64>("lambda")?;
        match (&mut loss, lambda) {
            (LossKind::GloroTrades { lambda: l }, Some(v)) => *l = v,
            (LossKind::GloroTrades { .. }, None) => {}
            (_, Some(_)) => return Err(Error::Config("[train] lambda only applies to loss = gloro_trades".into())),
            (_, None) => {}
        }
        let train = TrainConfig {
            data,
            arch: model.parse::<Arch>("arch")?.unwrap_or(d.arch),
            depth: model.parse("depth")?.unwrap_or(d.depth),
            width: model.parse("width")?.unwrap_or(d.width),
            neck_dim: model.parse("neck_dim")?.unwrap_or(d.neck_dim),
            loss,
            eps: t.parse("eps")?.unwrap_or(d.eps),
            epochs: t.parse("epochs")?.unwrap_or(d.epochs),
            batch_size: t.parse("batch_size")?.unwrap_or(d.batch_size),
            lr: t.parse("lr")?.unwrap_or(d.lr),
            seed: t.parse("seed")?.unwrap_or(d.seed),
            power_iters: t.parse("power_iters")?.unwrap_or(d.power_iters),
            precision: t.parse::<Precision>("precision")?.unwrap_or(d.precision),
            lookahead: t.parse("lookahead")?.unwrap_or(d.lookahead),
            lookahead_k: t.parse("lookahead_k")?.unwrap_or(d.lookahead_k),
            lookahead_alpha: t.parse("lookahead_alpha")?.unwrap_or(d.lookahead_alpha),
            flip: t.parse("flip")?.unwrap_or(d.flip),
            input_noise: t.parse("input_noise")?.unwrap_or(d.input_noise),
            checkpoint_every: t.parse("checkpoint_every")?.unwrap_or(d.checkpoint_every),
            log_wall_time: t.parse("log_wall_time")?.unwrap_or(d.log_wall_time),
        };
        train.validate()?;
        let out_dir = output.get("dir").map(PathBuf::from).unwrap_or_else(|| RunConfig::default().out_dir);
        Ok(RunConfig { train, out_dir })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Every key written explicitly.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut doc = Document::default();
        // training always uses both splits, so the key would only mislead
        let mut data = t.data.to_section("data");
        data.entries.retain(|(k, _)| k != "split");
        doc.push(data);
        let mut model = Section::new("model");
        model.set("arch", t.arch);
        model.set("depth", t.depth);
        model.set("width", t.width);
        model.set("neck_dim", t.neck_dim);
        doc.push(model);
        let mut s = Section::new("train");
        s.set("loss", t.loss.name());
        if let LossKind::GloroTrades { lambda } = t.loss {
            s.set("lambda", lambda);
        }
        s.set("eps", t.eps);
        s.set("epochs", t.epochs);
        s.set("batch_size", t.batch_size);
        s.set("lr", t.lr);
        s.set("seed", t.seed);
        s.set("power_iters", t.power_iters);
        s.set("precision", t.precision.name());
        s.set("lookahead", t.lookahead);
        s.set("lookahead_k", t.lookahead_k);
        s.set("lookahead_alpha", t.lookahead_alpha);
        s.set("flip", t.flip);
        s.set("input_noise", t.input_noise);
        s.set("checkpoint_every", t.checkpoint_every);
        s.set("log_wall_time", t.log_wall_time);
        doc.push(s);
        let mut out = Section::new("output");
        out.set("dir", self.out_dir.display());
        doc.push(out);
        doc.to_text()
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `train`: writes `trainlog.csv`, `threats.csv`, `final.ckpt`,
/// `lipschitz.csv` and the effective `run.cfg` into the output directory.
/// On divergence `last_good.ckpt` and the partial log are written instead.
pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Outcome> {
    if !config.is_file() {
        return Err(Error::Config(format!("config file {} does not exist", config.display())));
    }
    let mut rc = RunConfig::load(config)?;
    if let Some(s) = seed {
        if s != rc.train.seed {
            eprintln!("seed override: {} (config had {})", s, rc.train.seed);
        }
        rc.train.seed = s;
    }
    if let Some(o) = out {
        rc.out_dir = o.to_path_buf();
    }
    let dir = rc.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("run.cfg"), &rc.to_text())?;

    let mut trainer = Trainer::new(rc.train.clone())?;
    while !trainer.is_done() {
        match trainer.run_epoch() {
            Ok(row) => {
                eprintln!(
                    "epoch={} eps_train={} loss={} clean={} vra={} k_sub={}",
                    row.epoch, row.eps_train, row.train_loss, row.clean_acc, row.vra, row.k_sub
                );
                let every = rc.train.checkpoint_every;
                if every > 0 && trainer.epoch() % every == 0 && !trainer.is_done() {
                    save_checkpoint(&trainer.checkpoint(), &dir.join(format!("epoch_{:04}.ckpt", trainer.epoch())))?;
                }
            }
            Err(e @ Error::Diverged { .. }) => {
                write(&dir.join("trainlog.csv"), &trainer.log().to_csv())?;
                write(&dir.join("threats.csv"), &trainer.log().threats_csv())?;
                let mut ck = trainer.checkpoint();
                ck.network = trainer.last_good().clone();
                ck.extras.retain(|(name, _)| name == "epoch" || name.starts_with("power/"));
                save_checkpoint(&ck, &dir.join("last_good.ckpt"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    let log = trainer.log();
    write(&dir.join("trainlog.csv"), &log.to_csv())?;
    write(&dir.join("threats.csv"), &log.threats_csv())?;
    save_checkpoint(&trainer.checkpoint(), &dir.join("final.ckpt"))?;
    let report = trainer.certify_report()?;
    write(&dir.join("lipschitz.csv"), &report.to_csv())?;
    let last = log.rows.last().expect("at least one epoch");
    Ok(Outcome::ok(format!(
        "epochs={} seed={} clean={} vra={} k_sub={} out={}",
        log.rows.len(),
        rc.train.seed,
        last.clean_acc,
        last.vra,
        report.k_sub,
        dir.display()
    )))
}

/// A `--data` argument: a path to a config file with a `[data]` section, or
/// an inline `key=value,...` spec. `default_split` applies when no split is
/// given.
pub fn parse_data_arg(arg: &str, default_split: Split) -> Result<DataSpec> {
    let path = Path::new(arg);
    let mut section = if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc = Document::parse(&text)?;
        doc.section("data")
            .cloned()
            .ok_or_else(|| Error::Config(format!("{} has no [data] section", path.display())))?
    } else {
        let mut s = Section::new("data");
        for part in arg.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--data `{}`: not a file and `{}` is not key=value", arg, part)))?;
            s.set(k.trim(), v.trim());
        }
        s
    };
    if section.get("split").is_none() {
        section.set("split", default_split.name());
    }
    DataSpec::from_section(&section)
}

/// Checkpoint plus its power iterates.
pub fn load_model(path: &Path) -> Result<(Checkpoint, LipschitzState)> {
    let ck = load_checkpoint(path, None)?;
    let state = LipschitzState::from_extras(&ck.network, |k| ck.extra(k).cloned(), POWER_SEED)?;
    Ok((ck, state))
}

fn load_data(spec: &DataSpec, net: &Network) -> Result<Dataset> {
    let ds = spec.load()?;
    if ds.input_shape() != net.spec().input {
        return Err(Error::SpecMismatch(format!(
            "data samples are {:?}, the network expects {:?}",
            ds.input_shape(),
            net.spec().input
        )));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&y| y >= net.num_classes()) {
        return Err(Error::SpecMismatch(format!("label {} but the network has {} classes", bad, net.num_classes())));
    }
    Ok(ds)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("--eps must be finite and non-negative, got {}", eps)));
    }
    Ok(())
}

/// `certify`: per-point certificate CSV and a `clean=... vra=...` summary.
pub fn cmd_certify(ckpt: &Path, data: &DataSpec, eps: f64, out: Option<&Path>) -> Result<Outcome> {
    check_eps(eps)?;
    let (ck, state) = load_model(ckpt)?;
    let net = &ck.network;
    let ds = load_data(data, net)?;
    let report = crate::lipschitz::certify_report(net, &state, &PowerConfig::default())?;
    let results = certified_predict(net, &ds.inputs, eps, &report)?;
    if let Some(out) = out {
        write(out, &results_to_csv(&results, &ds.labels)?)?;
    }
    let certified = results.iter().filter(|r| r.certified).count();
    Ok(Outcome::ok(format!(
        "clean={} vra={} certified={} n={} eps={} k_sub={}",
        clean_accuracy(&results, &ds.labels)?,
        vra(&results, &ds.labels)?,
        certified,
        ds.len(),
        eps,
        report.k_sub
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackArgs {
    pub eps: f64,
    pub only_certified: bool,
    pub attack: AttackConfig,
    /// Multiplies the certified bound before certifying (fault injection).
    pub fault_scale_k: Option<f64>,
}

pub const ATTACK_HEADER: &str = "index,label,prediction,certified,success,delta_norm,adv_class";

/// `attack`: PGD against the model's own predictions. With
/// `only_certified`, any success on a certified point is a soundness alarm
/// (exit 3).
pub fn cmd_attack(ckpt: &Path, data: &DataSpec, args: &AttackArgs, out: Option<&Path>) -> Result<Outcome> {
    check_eps(args.eps)?;
    let (ck, state) = load_model(ckpt)?;
    let net = &ck.network;
    let ds = load_data(data, net)?;
    let mut report = crate::lipschitz::certify_report(net, &state, &PowerConfig::default())?;
    if let Some(f) = args.fault_scale_k {
        report.k_sub *= f;
        report.margin = report.margin.scale(f);
    }
    let results = certified_predict(net, &ds.inputs, args.eps, &report)?;
    let chosen: Vec<usize> = (0..ds.len()).filter(|&i| !args.only_certified || results[i].certified).collect();
    let x = ds.inputs.gather_rows(&chosen);
    let targets: Vec<usize> = chosen.iter().map(|&i| argmax(&results[i].logits)).collect();
    let outcomes = if chosen.is_empty() { Vec::new() } else { pgd_attack(net, &x, &targets, args.eps, &args.attack)? };
    let mut csv = format!("{}\n", ATTACK_HEADER);
    let (mut successes, mut violations) = (0, 0);
    for ((&i, &pred), o) in chosen.iter().zip(&targets).zip(&outcomes) {
        successes += o.success as usize;
        violations += (o.success && results[i].certified) as usize;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i, ds.labels[i], pred, results[i].certified, o.success, o.delta_norm, o.class
        ));
    }
    if let Some(out) = out {
        write(out, &csv)?;
    }
    let certified = results.iter().filter(|r| r.certified).count();
    let code = if args.only_certified && violations > 0 { EXIT_SOUNDNESS } else { EXIT_OK };
    Ok(Outcome {
        code,
        summary: format!(
            "attacked={} successes={} certified={} violations={} eps={} alarm={}",
            chosen.len(),
            successes,
            certified,
            violations,
            args.eps,
            code == EXIT_SOUNDNESS
        ),
    })
}

/// Per-layer bound table, optionally with exact operator norms and the
/// naive `1 + sigma(branch)` figure for linear residual blocks.
pub fn lipschitz_table(net: &Network, state: &LipschitzState, mode: Mode, cfg: &PowerConfig, compare_oracle: bool) -> Result<(LipschitzReport, String, Option<f64>)> {
    let mut st = state.clone();
    let (report, _) = compose_sublipschitz(net, &mut st, mode, cfg)?;
    if !compare_oracle {
        return Ok((report.clone(), report.to_csv(), None));
    }
    let exact = exact_layer_factors(net)?;
    let mut csv = String::from("layer,kind,method,bound,residual,iterations,exact,rel_err,naive\n");
    let mut worst = 0.0f64;
    let mut exact_total = Some(1.0);
    for b in &report.layers {
        let e = exact.get(b.layer).copied().flatten();
        let rel = e.map(|e| if e == 0.0 { b.value.abs() } else { (b.value - e).abs() / e });
        if let Some(r) = rel {
            worst = worst.max(r);
        }
        exact_total = exact_total.zip(e).map(|(t, e)| t * e);
        let naive = match net.spec().layers[b.layer] {
            LayerSpec::LinearResidualBlock { .. } => {
                Some(naive_residual_bound(net, b.layer, cfg, POWER_SEED + b.layer as u64)?)
            }
            _ => None,
        };
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.17e}", v));
        csv.push_str(&format!(
            "{},{},{},{:.17e},{:.3e},{},{},{},{}\n",
            b.layer,
            b.kind,
            b.method.tag(),
            b.value,
            b.residual,
            b.iterations,
            opt(e),
            rel.map_or(String::new(), |r| format!("{:.3e}", r)),
            opt(naive)
        ));
    }
    csv.push_str(&format!(
        "total,k_sub,product,{:.17e},,,{},,\n",
        report.k_sub,
        exact_total.map_or(String::new(), |t| format!("{:.17e}", t))
    ));
    Ok((report, csv, Some(worst)))
}

pub fn cmd_lipschitz(ckpt: &Path, mode: Mode, compare_oracle: bool, safety_margin: f64, out: Option<&Path>) -> Result<Outcome> {
    if !(safety_margin >= 0.0) {
        return Err(Error::InvalidArgument(format!("--safety-margin must be non-negative, got {}", safety_margin)));
    }
    let (ck, state) = load_model(ckpt)?;
    let cfg = PowerConfig { safety_margin, ..PowerConfig::default() };
    let (report, csv, worst) = lipschitz_table(&ck.network, &state, mode, &cfg, compare_oracle)?;
    match out {
        Some(p) => write(p, &csv)?,
        None => print!("{}", csv),
    }
    let mut summary = format!("k_sub={} mode={} layers={}", report.k_sub, mode.name(), report.layers.len());
    if let Some(w) = worst {
        summary.push_str(&format!(" max_rel_err={:e}", w));
    }
    Ok(Outcome::ok(summary))
}

/// One training run as seen by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub config: RunConfig,
    pub log: TrainLog,
}

pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let config = RunConfig::load(&dir.join("run.cfg"))?;
    let log_path = dir.join("trainlog.csv");
    let rows = TrainLog::rows_from_csv(&fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?)?;
    let threats_path = dir.join("threats.csv");
    let (initial_threats, threats) = match fs::read_to_string(&threats_path) {
        Ok(t) => TrainLog::threats_from_csv(&t)?,
        Err(_) => (Vec::new(), Vec::new()),
    };
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(RunSummary { name, config, log: TrainLog { rows, initial_threats, threats } })
}

pub const DEPTH_HEADER: &str = "run,arch,depth,width,classes,loss,seed,epochs,final_clean,final_vra,best_vra";

/// Depth/VRA table sorted by depth (ties keep input order).
pub fn depth_table(runs: &[RunSummary]) -> String {
    let mut order: Vec<&RunSummary> = runs.iter().collect();
    order.sort_by_key(|r| r.config.train.depth);
    let mut out = format!("{}\n", DEPTH_HEADER);
    for r in order {
        let t = &r.config.train;
        let last = r.log.rows.last();
        let best = r.log.rows.iter().map(|row| row.vra).fold(f64::NAN, f64::max);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.name,
            t.arch,
            t.depth,
            t.width,
            t.data.num_classes().map_or(String::new(), |c| c.to_string()),
            t.loss.name(),
            t.seed,
            r.log.rows.len(),
            last.map_or(String::new(), |l| l.clean_acc.to_string()),
            last.map_or(String::new(), |l| l.vra.to_string()),
            if best.is_nan() { String::new() } else { best.to_string() }
        ));
    }
    out
}

/// `epoch,<run>...` churn per epoch; blank where a run is shorter.
pub fn churn_table(runs: &[RunSummary]) -> String {
    let mut out = String::from("epoch");
    for r in runs {
        out.push_str(&format!(",{}", r.name));
    }
    out.push('\n');
    let epochs = runs.iter().map(|r| r.log.rows.len()).max().unwrap_or(0);
    for e in 0..epochs {
        out.push_str(&e.to_string());
        for r in runs {
            out.push(',');
            if let Some(row) = r.log.rows.get(e) {
                out.push_str(&row.churn.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Churn per epoch recomputed from the logged threatening classes.
pub fn recompute_churn(log: &TrainLog) -> Result<Vec<f64>> {
    let mut prev = &log.initial_threats;
    let mut out = Vec::with_capacity(log.threats.len());
    for t in &log.threats {
        out.push(churn_metric(prev, t)?);
        prev = t;
    }
    Ok(out)
}

/// Minimal line plot: one polyline per series, axes with min/max labels.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"15\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 15 {})\">{}</text>\n\
         <text x=\"{M}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
        W / 2.0,
        escape(title),
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 10.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
        H - M + 15.0,
        x0,
        W - M,
        H - M + 15.0,
        x1,
        M - 5.0,
        H - M,
        y0,
        M - 5.0,
        M + 4.0,
        y1,
    );
    for (k, (name, p)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
            color,
            coords.join(" ")
        ));
        for c in &coords {
            let (cx, cy) = c.split_once(',').unwrap_or(("0", "0"));
            s.push_str(&format!("<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n", cx, cy, color));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n",
            W - M - 120.0,
            M + 15.0 * k as f64,
            color,
            escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "report".to_string(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{}{}", stem, suffix))
}

/// `report`: depth/VRA table at `out`, churn table at `<stem>_churn.csv`,
/// and SVG plots at `<stem>_depth.svg` / `<stem>_churn.svg`.
pub fn cmd_report(logs: &[PathBuf], out: &Path) -> Result<Outcome> {
    if logs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one --logs directory".into()));
    }
    let runs = logs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    write(out, &depth_table(&runs))?;
    let churn_path = sibling(out, "_churn.csv");
    write(&churn_path, &churn_table(&runs))?;

    let mut by_arch: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by_key(|r| r.config.train.depth);
    for r in sorted {
        let key = r.config.train.arch.to_string();
        let point = (r.config.train.depth as f64, r.log.rows.last().map_or(f64::NAN, |l| l.vra));
        match by_arch.iter_mut().find(|(k, _)| *k == key) {
            Some((_, p)) => p.push(point),
            None => by_arch.push((key, vec![point])),
        }
    }
    write(&sibling(out, "_depth.svg"), &svg_line_plot("VRA vs depth", "depth", "final VRA", &by_arch))?;
    let churn_series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|r| (r.name.clone(), r.log.rows.iter().map(|row| (row.epoch as f64, row.churn)).collect()))
        .collect();
    write(&sibling(out, "_churn.svg"), &svg_line_plot("Threatening-class churn", "epoch", "churn", &churn_series))?;
    Ok(Outcome::ok(format!("runs={} depth_table={} churn_table={}", runs.len(), out.display(), churn_path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::LogRow;

    #[test]
    fn run_config_defaults_round_trip() {
        let rc = RunConfig::parse("").unwrap();
        assert_eq!(rc, RunConfig::default());
        let text = rc.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn run_config_fixed_point_with_overrides() {
        let text = "[data]\nkind = rings\nclasses = 3\n\n[model]\narch = resnet\ndepth = 2\n\n[train]\nloss = gloro_trades\nlambda = 0.25\nlr = 0.0003\neps = 0.1\n";
        let rc = RunConfig::parse(text).unwrap();
        assert_eq!(rc.train.loss, LossKind::GloroTrades { lambda: 0.25 });
        assert_eq!(rc.train.arch, Arch::ResNet);
        assert_eq!(rc.train.lr, 0.0003);
        let once = rc.to_text();
        let again = RunConfig::parse(&once).unwrap();
        assert_eq!(again, rc);
        assert_eq!(again.to_text(), once);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_sections() {
        assert!(matches!(RunConfig::parse("[train]\nlearning_rate = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[extra]\nx = 1\n"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[train]\nloss = emma\nlambda = 2\n").is_err());
        assert!(RunConfig::parse("[train]\nepochs = 0\n").is_err());
    }

    #[test]
    fn data_arg_defaults_split() {
        let d = parse_data_arg("kind=blobs,classes=3", Split::Test).unwrap();
        assert_eq!(d.split, Split::Test);
        assert_eq!(d.num_classes(), Some(3));
        let d = parse_data_arg("kind=blobs,split=train", Split::Test).unwrap();
        assert_eq!(d.split, Split::Train);
        assert!(parse_data_arg("no-such-file.cfg", Split::Test).is_err());
    }

    #[test]
    fn churn_recomputation() {
        let log = TrainLog { rows: Vec::new(), initial_threats: vec![0, 1, 2, 1], threats: vec![vec![0, 1, 2, 2], vec![1, 1, 2, 2]] };
        assert_eq!(recompute_churn(&log).unwrap(), vec![0.25, 0.25]);
    }

    #[test]
    fn depth_table_sorted() {
        let run = |name: &str, depth: usize, v: f64| {
            let mut config = RunConfig::default();
            config.train.depth = depth;
            let row = LogRow { epoch: 0, eps_train: 0.1, train_loss: 1.0, clean_acc: 1.0, vra: v, churn: 0.0, k_sub: 1.0, wall_time: None };
            RunSummary { name: name.into(), config, log: TrainLog { rows: vec![row], ..TrainLog::default() } }
        };
        let t = depth_table(&[run("c", 16, 0.5), run("a", 2, 0.7), run("b", 8, 0.6)]);
        let names: Vec<&str> = t.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(names, ["a", "b", "c"]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Diverged { epoch: 1, reason: "nan".into() }), EXIT_NUMERICAL);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = svg_line_plot("t", "x", "y", &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 1);
    }
}
