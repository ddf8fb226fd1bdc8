//! Two-phase training loop: a short prior pre-estimation phase, a parameter
//! re-initialization, then the main phase — each epoch interleaving SGD on
//! the joint loss with confidence, graph, and prior refreshes.
//!
//! Every random choice (init, shuffles, mixup draws, split tie-breaks) is a
//! pure function of the master seed plus phase/epoch/batch indices, so runs
//! are bit-reproducible and checkpoints taken at rebuild boundaries resume
//! exactly.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::data::{derive_seed, rng_from, TrainView};
use crate::disambig::{
    init_confidence, init_uniform_prior, update_confidence, update_prior, ClassPrior,
    ConfidenceMatrix,
};
use crate::error::{Error, Result};
use crate::gbgraph::{build_graph, propagate_confidence, GbGraph};
use crate::gbspace::{build_gb_space, GbSpace};
use crate::model::{
    backward_step, forward, mixup_batch, select_reliable, BatchInput, ClassifierParams,
    LossWeights, SgdState,
};

/// Everything the trainer needs to know; see the field groups.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // Architecture.
    pub hidden_dim: usize,

    // Schedule.
    pub epochs: usize,
    pub pre_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cosine_decay: bool,
    pub sgd_momentum: f64,

    // Joint loss.
    pub weights: LossWeights,

    // Class-prior moving average, per phase.
    pub prior_momentum_phase1: f64,
    pub prior_momentum_phase2: f64,

    // Reliable-sample selection ramp.
    pub select_enabled: bool,
    pub rho_start: f64,
    pub rho_end: f64,
    pub rho_ramp_epochs: usize,

    // Ball space, graph, and confidence plumbing.
    pub rebuild_every: usize,
    pub gb_enabled: bool,
    pub propagate_enabled: bool,
    pub propagate_alpha: f64,
    /// Ablation: freeze confidences at uniform-over-candidates.
    pub uniform_confidence: bool,

    pub mixup_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 16,
            epochs: 200,
            pre_epochs: 20,
            batch_size: 64,
            learning_rate: 0.01,
            cosine_decay: true,
            sgd_momentum: 0.9,
            weights: LossWeights::default(),
            prior_momentum_phase1: 0.1,
            prior_momentum_phase2: 0.01,
            select_enabled: true,
            rho_start: 0.2,
            rho_end: 0.5,
            rho_ramp_epochs: 50,
            rebuild_every: 5,
            gb_enabled: true,
            propagate_enabled: true,
            propagate_alpha: 0.5,
            uniform_confidence: false,
            mixup_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs + self.pre_epochs < 1 {
            return Err(Error::invalid("epochs + pre_epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.hidden_dim < 1 {
            return Err(Error::invalid("hidden_dim must be at least 1"));
        }
        if self.rebuild_every < 1 {
            return Err(Error::invalid("rebuild_every must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and positive"));
        }
        for (name, v) in [
            ("sgd_momentum", self.sgd_momentum),
            ("prior_momentum_phase1", self.prior_momentum_phase1),
            ("prior_momentum_phase2", self.prior_momentum_phase2),
            ("rho_start", self.rho_start),
            ("rho_end", self.rho_end),
            ("propagate_alpha", self.propagate_alpha),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        self.weights.validate()
    }

    /// Applies one `key=value` setting.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("bad value for `{key}`: `{value}`")))
        }
        match key {
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "pre_epochs" => self.pre_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "cosine_decay" => self.cosine_decay = num(key, value)?,
            "sgd_momentum" => self.sgd_momentum = num(key, value)?,
            "lambda1" => self.weights.lambda1 = num(key, value)?,
            "lambda2" => self.weights.lambda2 = num(key, value)?,
            "lambda3" => self.weights.lambda3 = num(key, value)?,
            "prior_momentum_phase1" => self.prior_momentum_phase1 = num(key, value)?,
            "prior_momentum_phase2" => self.prior_momentum_phase2 = num(key, value)?,
            "select_enabled" => self.select_enabled = num(key, value)?,
            "rho_start" => self.rho_start = num(key, value)?,
            "rho_end" => self.rho_end = num(key, value)?,
            "rho_ramp_epochs" => self.rho_ramp_epochs = num(key, value)?,
            "rebuild_every" => self.rebuild_every = num(key, value)?,
            "gb_enabled" => self.gb_enabled = num(key, value)?,
            "propagate_enabled" => self.propagate_enabled = num(key, value)?,
            "propagate_alpha" => self.propagate_alpha = num(key, value)?,
            "uniform_confidence" => self.uniform_confidence = num(key, value)?,
            "mixup_enabled" => self.mixup_enabled = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

/// Parses a `key=value` config file (blank lines and `#` comments allowed)
/// on top of the defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("malformed config line `{line}`")))?;
        config.set_key(key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}

/// Selection fraction at `epoch`: linear from `rho_start` to `rho_end` over
/// `rho_ramp_epochs`, constant afterward.
pub fn rho_at(epoch: usize, config: &TrainConfig) -> f64 {
    if config.rho_ramp_epochs == 0 || epoch >= config.rho_ramp_epochs {
        return config.rho_end;
    }
    let t = epoch as f64 / config.rho_ramp_epochs as f64;
    config.rho_start + (config.rho_end - config.rho_start) * t
}

fn lr_for(epoch: usize, total_epochs: usize, config: &TrainConfig) -> f64 {
    if !config.cosine_decay || total_epochs == 0 {
        return config.learning_rate;
    }
    let t = epoch as f64 / total_epochs as f64;
    config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cosine-decayed learning rate over the main phase's epoch count.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    lr_for(epoch, config.epochs, config)
}

/// One completed epoch in the report.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub total_loss: f64,
    pub ce: f64,
    pub mc: f64,
    pub pr: f64,
    /// Only filled when diagnostic labels were supplied.
    pub train_accuracy: Option<f64>,
    pub prior: Vec<f64>,
    pub ball_count: usize,
}

/// Per-epoch records plus the prior snapshots around the phase boundary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub phase1_final_prior: Option<Vec<f64>>,
    pub phase2_initial_prior: Option<Vec<f64>>,
}

/// Complete trainer state at an epoch boundary. States captured at rebuild
/// boundaries (`epoch % rebuild_every == 0`) resume bit-exactly; at other
/// epochs the ball space is rebuilt on resume from fresher features.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ClassifierParams,
    pub sgd: SgdState,
    pub prior: ClassPrior,
    pub confidence: Option<ConfidenceMatrix>,
    /// 1 = pre-estimation, 2 = main.
    pub phase: u8,
    /// Next epoch to execute within the phase.
    pub epoch: usize,
    pub seed: u64,
    /// Training-set class sizes, carried for later shot-group evaluation.
    pub class_counts: Option<Vec<usize>>,
}

/// What a finished (or stopped) run hands back.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub prior: ClassPrior,
    pub confidence: Option<ConfidenceMatrix>,
    pub report: TrainReport,
    pub state: TrainState,
}

/// Trains from scratch; the view carries no true labels.
pub fn train(view: TrainView<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_impl(view, config, None, None, None)
}

/// As [`train`], with hidden labels used solely to fill the report's
/// per-epoch train-accuracy diagnostic.
pub fn train_with_diagnostics(
    view: TrainView<'_>,
    config: &TrainConfig,
    diag_labels: Option<&[u32]>,
) -> Result<TrainOutcome> {
    train_impl(view, config, None, None, diag_labels)
}

/// Runs until just before `(stop_phase, stop_epoch)` and returns the state
/// there; pair with [`resume`] to continue. Stop at a rebuild boundary for
/// bit-exact continuation.
pub fn train_until(
    view: TrainView<'_>,
    config: &TrainConfig,
    stop_phase: u8,
    stop_epoch: usize,
    diag_labels: Option<&[u32]>,
) -> Result<TrainOutcome> {
    train_impl(view, config, None, Some((stop_phase, stop_epoch)), diag_labels)
}

/// Continues a run from a captured state under the same config and data.
pub fn resume(
    view: TrainView<'_>,
    config: &TrainConfig,
    state: TrainState,
    diag_labels: Option<&[u32]>,
) -> Result<TrainOutcome> {
    train_impl(view, config, Some(state), None, diag_labels)
}

fn train_impl(
    view: TrainView<'_>,
    config: &TrainConfig,
    start: Option<TrainState>,
    stop: Option<(u8, usize)>,
    diag_labels: Option<&[u32]>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = view.sample_count();
    let l = view.class_count();
    let d = view.feature_dim();
    if n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    if l < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if let Some(labels) = diag_labels {
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} diagnostic labels for {n} samples",
                labels.len()
            )));
        }
    }

    let (mut start_phase, mut start_epoch, mut params, mut sgd, mut prior, mut confidence) =
        match start {
            Some(st) => {
                if st.params.input_dim() != d
                    || st.params.hidden_dim() != config.hidden_dim
                    || st.params.class_count() != l
                {
                    return Err(Error::shape(format!(
                        "state built for {}x{}x{}, run needs {}x{}x{}",
                        st.params.input_dim(),
                        st.params.hidden_dim(),
                        st.params.class_count(),
                        d,
                        config.hidden_dim,
                        l
                    )));
                }
                (st.phase, st.epoch, st.params, st.sgd, st.prior, st.confidence)
            }
            None => {
                let params =
                    ClassifierParams::init(d, config.hidden_dim, l, derive_seed(config.seed, 101));
                let sgd = SgdState::zeros_like(&params);
                let mut prior = init_uniform_prior(l);
                prior.momentum = config.prior_momentum_phase1;
                (1u8, 0usize, params, sgd, prior, None)
            }
        };

    let mut report = TrainReport::default();
    let mut space: Option<GbSpace> = None;
    let mut graph: Option<GbGraph> = None;
    let mut supports = vec![1.0f64; n];
    let mut stopped_at: Option<(u8, usize)> = None;

    let phases = [
        (1u8, config.pre_epochs, config.prior_momentum_phase1),
        (2u8, config.epochs, config.prior_momentum_phase2),
    ];
    'phases: for &(phase, phase_epochs, momentum) in &phases {
        if phase < start_phase {
            continue;
        }
        if phase > start_phase {
            // Phase boundary: re-initialize the network and its confidence
            // targets; the estimated prior carries over.
            params = ClassifierParams::init(
                d,
                config.hidden_dim,
                l,
                derive_seed(config.seed, 100 + phase as u64),
            );
            sgd = SgdState::zeros_like(&params);
            confidence = None;
            space = None;
            graph = None;
            supports = vec![1.0; n];
            start_epoch = 0;
            start_phase = phase;
        }
        prior.momentum = momentum;
        if phase == 2 && start_epoch == 0 {
            report.phase2_initial_prior = Some(prior.values.to_vec());
        }
        for epoch in start_epoch..phase_epochs {
            if stop == Some((phase, epoch)) {
                stopped_at = Some((phase, epoch));
                break 'phases;
            }
            run_epoch(
                view,
                config,
                phase,
                epoch,
                phase_epochs,
                &mut params,
                &mut sgd,
                &mut prior,
                &mut confidence,
                &mut space,
                &mut graph,
                &mut supports,
                &mut report,
                diag_labels,
            )?;
        }
        if phase == 1 && phase_epochs > 0 {
            report.phase1_final_prior = Some(prior.values.to_vec());
        }
    }

    let (end_phase, end_epoch) = stopped_at.unwrap_or((2, config.epochs));
    let state = TrainState {
        params: params.clone(),
        sgd,
        prior: prior.clone(),
        confidence: confidence.clone(),
        phase: end_phase,
        epoch: end_epoch,
        seed: config.seed,
        class_counts: None,
    };
    Ok(TrainOutcome {
        params,
        prior,
        confidence,
        report,
        state,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    view: TrainView<'_>,
    config: &TrainConfig,
    phase: u8,
    epoch: usize,
    phase_epochs: usize,
    params: &mut ClassifierParams,
    sgd: &mut SgdState,
    prior: &mut ClassPrior,
    confidence: &mut Option<ConfidenceMatrix>,
    space: &mut Option<GbSpace>,
    graph: &mut Option<GbGraph>,
    supports: &mut Vec<f64>,
    report: &mut TrainReport,
    diag_labels: Option<&[u32]>,
) -> Result<()> {
    let n = view.sample_count();
    let seed_epoch = derive_seed(derive_seed(config.seed, phase as u64), epoch as u64);
    let step_context = |what: &str, batch: usize| {
        format!("{what}, phase {phase} epoch {epoch} batch {batch}")
    };

    // (a) Rebuild the ball space and graph over current hidden features.
    if config.gb_enabled && (space.is_none() || epoch.is_multiple_of(config.rebuild_every)) {
        let (hidden_all, _) = forward(params, view.features.view())?;
        let sp = build_gb_space(hidden_all.view(), derive_seed(seed_epoch, 3))?;
        let g = build_graph(&sp, hidden_all.view())?;
        *supports = g.supports();
        *space = Some(sp);
        *graph = Some(g);
    }

    // First epoch of the phase: initial confidence targets. The uniform
    // ablation scores every class equally, which the shared kernel turns
    // into uniform-over-candidates rows.
    if confidence.is_none() {
        let p = if config.uniform_confidence {
            let flat = Array2::ones((n, view.class_count()));
            init_confidence(view.candidates, &flat, supports)?
        } else {
            let (_, probs) = forward(params, view.features.view())?;
            init_confidence(view.candidates, &probs, supports)?
        };
        *confidence = Some(p);
    }

    let lr = lr_for(epoch, phase_epochs, config);
    let rho = rho_at(epoch, config);
    let centers_all = space.as_ref().map(|sp| sp.centers_per_sample());

    // (b) SGD over shuffled batches.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive_seed(seed_epoch, 1)));
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    let mut steps = 0usize;
    for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
        let p_values = &confidence.as_ref().expect("initialized above").values;
        let x_chunk = view.features.select(Axis(0), chunk);
        let kept: Vec<usize> = if config.select_enabled {
            let (_, probs) = forward(params, x_chunk.view())?;
            let mask = select_reliable(&probs, view.candidates, chunk, prior, rho)?;
            chunk
                .iter()
                .zip(&mask)
                .filter(|(_, &keep)| keep)
                .map(|(&row, _)| row)
                .collect()
        } else {
            chunk.to_vec()
        };
        if kept.is_empty() {
            continue;
        }

        let mut x = view.features.select(Axis(0), &kept);
        let mut targets = p_values.select(Axis(0), &kept);
        let mut centers = centers_all.as_ref().map(|c| c.select(Axis(0), &kept));
        if config.mixup_enabled && kept.len() >= 2 {
            let mut perm: Vec<usize> = (0..kept.len()).collect();
            perm.shuffle(&mut rng_from(derive_seed(seed_epoch, 10_000 + batch_idx as u64)));
            let x_b = x.select(Axis(0), &perm);
            let t_b = targets.select(Axis(0), &perm);
            let (xm, tm, m) = mixup_batch(
                &x,
                &x_b,
                &targets,
                &t_b,
                derive_seed(seed_epoch, 20_000 + batch_idx as u64),
            )?;
            centers = centers.map(|c| {
                let c_b = c.select(Axis(0), &perm);
                m * &c + (1.0 - m) * &c_b
            });
            x = xm;
            targets = tm;
        }

        let batch = BatchInput {
            features: x.view(),
            targets: targets.view(),
            centers: centers.as_ref().map(|c| c.view()),
        };
        let losses = backward_step(
            params,
            sgd,
            &batch,
            prior,
            &config.weights,
            lr,
            config.sgd_momentum,
        )
        .map_err(|e| match e {
            Error::NonFinite { what, context } => Error::NonFinite {
                what,
                context: step_context(&context, batch_idx),
            },
            other => other,
        })?;
        sums.0 += losses.total;
        sums.1 += losses.ce;
        sums.2 += losses.mc;
        sums.3 += losses.pr;
        steps += 1;
    }

    // (c) End of epoch: refresh confidence, propagate, refresh prior.
    let (_, probs_full) = forward(params, view.features.view())?;
    if !config.uniform_confidence {
        *confidence = Some(update_confidence(
            view.candidates,
            &probs_full,
            supports,
            prior,
            config.weights.lambda3,
        )?);
    }
    if let (true, Some(g)) = (config.gb_enabled && config.propagate_enabled, graph.as_ref()) {
        let p = confidence.as_ref().expect("initialized above");
        *confidence = Some(propagate_confidence(
            g,
            p,
            view.candidates,
            config.propagate_alpha,
        )?);
    }
    *prior = update_prior(prior, view.candidates, &probs_full)?;

    let train_accuracy = diag_labels.map(|labels| {
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| row_argmax(&probs_full, *i) == y as usize)
            .count();
        hits as f64 / n as f64
    });
    let denom = steps.max(1) as f64;
    report.records.push(EpochRecord {
        phase,
        epoch,
        total_loss: sums.0 / denom,
        ce: sums.1 / denom,
        mc: sums.2 / denom,
        pr: sums.3 / denom,
        train_accuracy,
        prior: prior.values.to_vec(),
        ball_count: space.as_ref().map_or(0, |sp| sp.ball_count()),
    });
    let record = report.records.last().expect("just pushed");
    if !record.total_loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            context: format!("phase {phase} epoch {epoch}"),
        });
    }
    Ok(())
}

fn row_argmax(m: &Array2<f64>, row: usize) -> usize {
    let r = m.row(row);
    let mut best = 0;
    for j in 1..r.len() {
        if r[j] > r[best] {
            best = j;
        }
    }
    best
}

fn fmt_prior(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Line-delimited report text; byte-stable for identical runs.
pub fn render_train_report(report: &TrainReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "GBPLLTRAIN1");
    let opt = |values: &Option<Vec<f64>>| match values {
        Some(v) => fmt_prior(v),
        None => "na".to_string(),
    };
    let _ = writeln!(out, "phase1_final_prior {}", opt(&report.phase1_final_prior));
    let _ = writeln!(
        out,
        "phase2_initial_prior {}",
        opt(&report.phase2_initial_prior)
    );
    for r in &report.records {
        let acc = match r.train_accuracy {
            Some(a) => format!("{a}"),
            None => "na".to_string(),
        };
        let _ = writeln!(
            out,
            "record phase={} epoch={} total={} ce={} mc={} pr={} acc={} balls={} prior={}",
            r.phase,
            r.epoch,
            r.total_loss,
            r.ce,
            r.mc,
            r.pr,
            acc,
            r.ball_count,
            fmt_prior(&r.prior)
        );
    }
    let _ = writeln!(out, "summary records={}", report.records.len());
    out
}

const CKPT_MAGIC: &[u8] = b"GBPLLCKPT1\n";

fn push_f64s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes the full trainer state: text header, then little-endian 64-bit
/// parameter/momentum/prior/confidence blocks.
pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let p = &state.params;
    let (conf_rows, conf_cols) = state
        .confidence
        .as_ref()
        .map_or((0, 0), |c| (c.sample_count(), c.class_count()));
    let header = format!(
        "input_dim={}\nhidden_dim={}\nclass_count={}\nphase={}\nepoch={}\nseed={}\nprior_momentum={}\nconf_rows={}\nconf_cols={}\nclass_counts={}\n\n",
        p.input_dim(),
        p.hidden_dim(),
        p.class_count(),
        state.phase,
        state.epoch,
        state.seed,
        state.prior.momentum,
        conf_rows,
        conf_cols,
        state
            .class_counts
            .as_ref()
            .map_or("na".to_string(), |c| c
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")),
    );
    let io = |e| Error::io(path, e);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(header.as_bytes()).map_err(io)?;
    for block in [&p.w1, &state.sgd.vw1, &p.w2, &state.sgd.vw2] {
        push_f64s(&mut w, block.iter().copied()).map_err(io)?;
    }
    for block in [&p.b1, &state.sgd.vb1, &p.b2, &state.sgd.vb2] {
        push_f64s(&mut w, block.iter().copied()).map_err(io)?;
    }
    push_f64s(&mut w, state.prior.values.iter().copied()).map_err(io)?;
    if let Some(c) = &state.confidence {
        push_f64s(&mut w, c.values.iter().copied()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a state written by [`save_state`]; the round trip is bit-exact.
pub fn load_state(path: &Path) -> Result<TrainState> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if !buf.starts_with(CKPT_MAGIC) {
        return Err(Error::format(path, "missing GBPLLCKPT1 magic"));
    }
    let mut pos = CKPT_MAGIC.len();
    let mut fields = Vec::new();
    loop {
        let end = buf[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|o| pos + o)
            .ok_or_else(|| Error::format(path, "unterminated header"))?;
        let line = std::str::from_utf8(&buf[pos..end])
            .map_err(|_| Error::format(path, "header is not UTF-8"))?;
        pos = end + 1;
        if line.is_empty() {
            break;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed header line `{line}`")))?;
        fields.push((key.to_string(), value.to_string()));
    }
    let lookup = |key: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(path, format!("missing header key `{key}`")))
    };
    fn parse<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::format(path, format!("bad value for `{key}`: `{value}`")))
    }
    let input_dim: usize = parse(path, "input_dim", lookup("input_dim")?)?;
    let hidden_dim: usize = parse(path, "hidden_dim", lookup("hidden_dim")?)?;
    let class_count: usize = parse(path, "class_count", lookup("class_count")?)?;
    let phase: u8 = parse(path, "phase", lookup("phase")?)?;
    let epoch: usize = parse(path, "epoch", lookup("epoch")?)?;
    let seed: u64 = parse(path, "seed", lookup("seed")?)?;
    let prior_momentum: f64 = parse(path, "prior_momentum", lookup("prior_momentum")?)?;
    let conf_rows: usize = parse(path, "conf_rows", lookup("conf_rows")?)?;
    let conf_cols: usize = parse(path, "conf_cols", lookup("conf_cols")?)?;
    let class_counts = match lookup("class_counts")? {
        "na" => None,
        list => Some(
            list.split(',')
                .map(|v| parse::<usize>(path, "class_counts", v))
                .collect::<Result<Vec<_>>>()?,
        ),
    };

    let body = &buf[pos..];
    let matrix_len = 2 * (hidden_dim * input_dim + class_count * hidden_dim);
    let vector_len = 2 * (hidden_dim + class_count);
    let expected = matrix_len + vector_len + class_count + conf_rows * conf_cols;
    if body.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("body has {} bytes, header implies {}", body.len(), expected * 8),
        ));
    }
    let mut cursor = 0usize;
    let mut take = |count: usize| -> Vec<f64> {
        let out = body[cursor * 8..(cursor + count) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += count;
        out
    };
    let w1 = take(hidden_dim * input_dim);
    let vw1 = take(hidden_dim * input_dim);
    let w2 = take(class_count * hidden_dim);
    let vw2 = take(class_count * hidden_dim);
    let b1 = take(hidden_dim);
    let vb1 = take(hidden_dim);
    let b2 = take(class_count);
    let vb2 = take(class_count);
    let prior_values = take(class_count);
    let confidence = if conf_rows > 0 {
        let values = take(conf_rows * conf_cols);
        Some(ConfidenceMatrix {
            values: Array2::from_shape_vec((conf_rows, conf_cols), values)
                .expect("length checked above"),
        })
    } else {
        None
    };
    let shape = |v: Vec<f64>, rows: usize, cols: usize| {
        Array2::from_shape_vec((rows, cols), v).expect("length checked above")
    };
    Ok(TrainState {
        params: ClassifierParams {
            w1: shape(w1, hidden_dim, input_dim),
            b1: b1.into(),
            w2: shape(w2, class_count, hidden_dim),
            b2: b2.into(),
        },
        sgd: SgdState {
            vw1: shape(vw1, hidden_dim, input_dim),
            vb1: vb1.into(),
            vw2: shape(vw2, class_count, hidden_dim),
            vb2: vb2.into(),
        },
        prior: ClassPrior {
            values: prior_values.into(),
            momentum: prior_momentum,
        },
        confidence,
        phase,
        epoch,
        seed,
        class_counts,
    })
}
