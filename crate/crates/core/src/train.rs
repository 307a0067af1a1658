//! Maximum-likelihood training: NLL loss with exact gradients through the
//! fixed-step reverse integration graph (discretize-then-optimize), Adam,
//! a step learning-rate schedule, validation, metrics and checkpoints.
//!
//! Training integrates with fixed-step rk4 so the loss is an ordinary
//! composition of tape primitives and one reverse pass yields exact
//! gradients of the discrete objective, including through the divergence
//! accumulation and the prior log-density. Evaluation and reported NLL use
//! the adaptive solver from the config.

use crate::data::SampleBatch;
use crate::error::TrainError;
use crate::field::{emit_params, VectorFieldParams};
use crate::flow::{emit_reverse_rk4_log_prob, log_prob, SolverConfig};
use crate::geometry::StiefelPoint;
use crate::prior::GrassmannGaussianPrior;
use crate::tape::Tape;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Bounds for the trainable integration time.
pub const T_MIN: f64 = 0.1;
pub const T_MAX: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiply the learning rate by `lr_step_factor` every
    /// `lr_step_epoch` epochs (0 disables the schedule).
    pub lr_step_epoch: usize,
    pub lr_step_factor: f64,
    pub seed: u64,
    /// Evaluation solver (validation and reported NLL).
    pub solver: SolverConfig,
    /// Nominal rk4 macro-step for the training graph.
    pub train_dt: f64,
    /// Initial integration time T; the flow runs on [0, T].
    pub integration_time: f64,
    pub train_integration_time: bool,
    /// Validate every this many epochs.
    pub eval_every: usize,
    pub threads: usize,
    /// (D, k)
    pub dims: (usize, usize),
    /// Concatsquash widths, ending in 1.
    pub widths: Vec<usize>,
    /// Prior: U = sigma^2 I_D.
    pub prior_sigma: f64,
    /// Prior: V = col_sigma^2 I_k when set, I_k otherwise.
    pub prior_col_sigma: Option<f64>,
}

impl TrainConfig {
    /// Texture-experiment defaults on Gr(1,3).
    pub fn textures() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 500,
            lr_step_epoch: 0,
            lr_step_factor: 0.1,
            seed: 0,
            solver: SolverConfig::dopri5(0.0, 1.0),
            train_dt: 0.1,
            integration_time: 1.0,
            train_integration_time: true,
            eval_every: 1,
            threads: 1,
            dims: (3, 1),
            widths: vec![64, 64, 1],
            prior_sigma: 0.3,
            prior_col_sigma: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::BadConfig(format!("{name} must be in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.train_dt > 0.0) {
            return Err(TrainError::BadConfig("train_dt must be positive".into()));
        }
        if !(T_MIN..=T_MAX).contains(&self.integration_time) {
            return Err(TrainError::BadConfig(format!(
                "integration_time must lie in [{T_MIN}, {T_MAX}]"
            )));
        }
        Ok(())
    }

    /// Prior with mean at the first k columns of the identity.
    pub fn build_prior(&self) -> Result<GrassmannGaussianPrior, TrainError> {
        let (d, k) = self.dims;
        let mean = StiefelPoint::new_unchecked(
            DMatrix::<f64>::identity(d, d).columns(0, k).into_owned(),
        );
        let u = DMatrix::identity(d, d) * (self.prior_sigma * self.prior_sigma);
        let v = match self.prior_col_sigma {
            Some(s) => DMatrix::identity(k, k) * (s * s),
            None => DMatrix::identity(k, k),
        };
        Ok(GrassmannGaussianPrior::new(mean, u, v)?)
    }

    /// Number of rk4 macro steps for the current integration time.
    pub fn rk4_steps(&self, t_total: f64) -> usize {
        ((t_total / self.train_dt).round() as usize).max(1)
    }
}

// ---- Adam ---------------------------------------------------------------------

/// First/second-moment accumulators, one slot per optimized coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay applied
/// where `decay_mask` is true.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    decay_mask: &[bool],
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    const EPS: f64 = 1e-8;
    for i in 0..params.len() {
        if weight_decay != 0.0 && decay_mask[i] {
            params[i] -= lr * weight_decay * params[i];
        }
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

/// Learning rate after the multiplicative step schedule.
pub fn scheduled_lr(base: f64, factor: f64, step_every: usize, epoch: usize) -> f64 {
    if step_every == 0 {
        base
    } else {
        base * factor.powi((epoch / step_every) as i32)
    }
}

/// Divergence guard: trips after three consecutive epochs with NLL above
/// `initial + 10 max(1, |initial|)`.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    threshold: f64,
    consecutive: usize,
}

impl DivergenceGuard {
    pub fn new(initial_nll: f64) -> Self {
        Self {
            threshold: initial_nll + 10.0 * initial_nll.abs().max(1.0),
            consecutive: 0,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Returns an error once the guard has tripped three epochs in a row.
    pub fn update(&mut self, nll: f64) -> Result<(), TrainError> {
        if nll > self.threshold {
            self.consecutive += 1;
            if self.consecutive >= 3 {
                return Err(TrainError::Diverged {
                    nll,
                    guard: self.threshold,
                });
            }
        } else {
            self.consecutive = 0;
        }
        Ok(())
    }
}

// ---- loss ---------------------------------------------------------------------

/// Loss and exact gradients of the discrete objective for one batch.
#[derive(Debug, Clone)]
pub struct LossGrad {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    /// Gradient in [`VectorFieldParams::flatten`] order.
    pub grads: Vec<f64>,
    /// Gradient with respect to the integration time.
    pub grad_t: f64,
}

fn sample_loss(
    params: &VectorFieldParams,
    prior: &GrassmannGaussianPrior,
    y: &StiefelPoint,
    t_total: f64,
    n_steps: usize,
    with_grads: bool,
) -> Result<(f64, Option<(Vec<f64>, f64)>), TrainError> {
    let mut tape = Tape::new();
    let pv = emit_params(&mut tape, params);
    let t_var = tape.scalar(t_total);
    let lp = emit_reverse_rk4_log_prob(&mut tape, &pv, prior, y, t_var, n_steps)
        .map_err(TrainError::Flow)?;
    let nll = -tape.scalar_value(lp);
    if !with_grads {
        return Ok((nll, None));
    }
    let g = tape.backward(lp).map_err(|e| TrainError::Flow(e.into()))?;
    let mut flat = Vec::with_capacity(params.n_params());
    for var in pv.vars_in_order() {
        // loss = -log p, so gradients flip sign
        flat.extend(g.get_slice(var).iter().map(|v| -v));
    }
    let grad_t = -g.get_slice(t_var)[0];
    Ok((nll, Some((flat, grad_t))))
}

/// Mean NLL of a batch under the fixed-step training discretization.
pub fn loss_nll(
    params: &VectorFieldParams,
    prior: &GrassmannGaussianPrior,
    batch: &[StiefelPoint],
    t_total: f64,
    n_steps: usize,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::BadConfig("empty batch".into()));
    }
    let mut acc = 0.0;
    for (i, y) in batch.iter().enumerate() {
        let (nll, _) = sample_loss(params, prior, y, t_total, n_steps, false)?;
        if !nll.is_finite() {
            return Err(TrainError::NonFiniteLoss { sample: i });
        }
        acc += nll;
    }
    Ok(acc / batch.len() as f64)
}

/// Mean NLL plus exact parameter gradients. Per-sample gradients are computed
/// on independent tapes (optionally across threads) and reduced in batch
/// order, so the result is deterministic for any thread count.
pub fn loss_nll_with_grads(
    params: &VectorFieldParams,
    prior: &GrassmannGaussianPrior,
    batch: &[StiefelPoint],
    t_total: f64,
    n_steps: usize,
    threads: usize,
) -> Result<LossGrad, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::BadConfig("empty batch".into()));
    }
    let n = batch.len();
    let per_sample: Vec<Result<(f64, Vec<f64>, f64), TrainError>> = if threads <= 1 {
        batch
            .iter()
            .map(|y| {
                sample_loss(params, prior, y, t_total, n_steps, true)
                    .map(|(l, g)| {
                        let (flat, gt) = g.unwrap();
                        (l, flat, gt)
                    })
            })
            .collect()
    } else {
        let chunk = n.div_ceil(threads);
        let mut out: Vec<Result<(f64, Vec<f64>, f64), TrainError>> = Vec::with_capacity(n);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|y| {
                                sample_loss(params, prior, y, t_total, n_steps, true).map(
                                    |(l, g)| {
                                        let (flat, gt) = g.unwrap();
                                        (l, flat, gt)
                                    },
                                )
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                out.extend(h.join().expect("worker thread"));
            }
        });
        out
    };

    let mut loss = 0.0;
    let mut grads = vec![0.0; params.n_params()];
    let mut grad_t = 0.0;
    for (i, r) in per_sample.into_iter().enumerate() {
        let (l, g, gt) = r?;
        if !l.is_finite() {
            return Err(TrainError::NonFiniteLoss { sample: i });
        }
        loss += l;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
        grad_t += gt;
    }
    let scale = 1.0 / n as f64;
    loss *= scale;
    for g in grads.iter_mut() {
        *g *= scale;
    }
    grad_t *= scale;
    Ok(LossGrad {
        loss,
        grads,
        grad_t,
    })
}

/// Mean NLL under the evaluation solver (adaptive by default).
pub fn eval_nll(
    params: &VectorFieldParams,
    prior: &GrassmannGaussianPrior,
    batch: &[StiefelPoint],
    cfg: &SolverConfig,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::BadConfig("empty batch".into()));
    }
    let mut acc = 0.0;
    for y in batch {
        acc += -log_prob(params, prior, y, cfg)?;
    }
    Ok(acc / batch.len() as f64)
}

// ---- checkpoint ------------------------------------------------------------------

pub const CHECKPOINT_VERSION: &str = "grassflow-checkpoint-v1";

/// Serialized RNG position for exact resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Versioned training snapshot with named float64 arrays; reloading
/// reproduces forward outputs bit-identically on the same platform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub params: VectorFieldParams,
    pub integration_time: f64,
    pub prior_mean: DMatrix<f64>,
    pub prior_row_cov: DMatrix<f64>,
    pub prior_col_cov: DMatrix<f64>,
    pub dims: (usize, usize),
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub best_val_nll: f64,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::write(path.as_ref(), text).map_err(|source| TrainError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| TrainError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version `{}`",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn build_prior(&self) -> Result<GrassmannGaussianPrior, TrainError> {
        Ok(GrassmannGaussianPrior::new(
            StiefelPoint::new_unchecked(self.prior_mean.clone()),
            self.prior_row_cov.clone(),
            self.prior_col_cov.clone(),
        )?)
    }

    /// Evaluation solver over [0, T] with this checkpoint's trained T.
    pub fn eval_solver(&self) -> SolverConfig {
        SolverConfig {
            t0: 0.0,
            t1: self.integration_time,
            ..self.config.solver
        }
    }
}

// ---- training loop -----------------------------------------------------------------

/// Runs the training loop: per-epoch shuffled batches, Adam with the step
/// schedule, validation every `eval_every` epochs, `metrics.csv` plus
/// `last.json` / `best.json` checkpoints under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    train_data: &SampleBatch,
    val_data: &SampleBatch,
    out_dir: impl AsRef<Path>,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let prior = cfg.build_prior()?;
    let mut params = VectorFieldParams::init(cfg.dims, &cfg.widths, cfg.seed)?;
    let mut t_total = cfg.integration_time;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let n_coords = params.n_params() + usize::from(cfg.train_integration_time);
    let mut adam = AdamState::new(n_coords);
    let mut decay_mask = params.decay_mask();
    if cfg.train_integration_time {
        decay_mask.push(false);
    }

    let start = std::time::Instant::now();
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = open_metrics(&metrics_path)?;

    let make_checkpoint = |params: &VectorFieldParams,
                           t_total: f64,
                           epoch: usize,
                           rng: &ChaCha20Rng,
                           best: f64| Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        params: params.clone(),
        integration_time: t_total,
        prior_mean: prior.mean().matrix().clone(),
        prior_row_cov: prior.row_cov().clone(),
        prior_col_cov: prior.col_cov().clone(),
        dims: cfg.dims,
        config: cfg.clone(),
        epoch,
        rng: RngState::capture(rng),
        best_val_nll: best,
    };

    let eval_cfg = SolverConfig {
        t0: 0.0,
        t1: t_total,
        ..cfg.solver
    };
    let mut best_val = f64::INFINITY;
    let mut last_val = f64::NAN;
    if cfg.epochs == 0 {
        let ck = make_checkpoint(&params, t_total, 0, &rng, best_val);
        ck.save(out_dir.join("last.json"))?;
        ck.save(out_dir.join("best.json"))?;
        return Ok(ck);
    }

    let mut guard: Option<DivergenceGuard> = None;
    let n = train_data.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.lr, cfg.lr_step_factor, cfg.lr_step_epoch, epoch);
        // deterministic shuffle per epoch
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<StiefelPoint> =
                chunk.iter().map(|&i| train_data.points[i].clone()).collect();
            let n_steps = cfg.rk4_steps(t_total);
            let lg = loss_nll_with_grads(&params, &prior, &batch, t_total, n_steps, cfg.threads)?;
            let mut flat = params.flatten();
            let mut grads = lg.grads;
            if cfg.train_integration_time {
                flat.push(t_total);
                grads.push(lg.grad_t);
            }
            adam_step(
                &mut flat,
                &grads,
                &mut adam,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.weight_decay,
                &decay_mask,
            );
            if cfg.train_integration_time {
                t_total = flat.pop().unwrap().clamp(T_MIN, T_MAX);
            }
            params.assign_from_flat(&flat);
            epoch_loss += lg.loss;
            n_batches += 1;
        }
        let train_nll = epoch_loss / n_batches.max(1) as f64;

        if guard.is_none() {
            guard = Some(DivergenceGuard::new(train_nll));
        }
        guard.as_mut().unwrap().update(train_nll)?;

        if epoch % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let eval_cfg = SolverConfig {
                t1: t_total,
                ..eval_cfg
            };
            last_val = eval_nll(&params, &prior, &val_data.points, &eval_cfg)?;
            if last_val < best_val {
                best_val = last_val;
                let ck = make_checkpoint(&params, t_total, epoch + 1, &rng, best_val);
                ck.save(out_dir.join("best.json"))?;
            }
        }
        log::info!(
            "epoch {epoch}: train_nll {train_nll:.4} val_nll {last_val:.4} lr {lr:.2e} T {t_total:.3}"
        );
        writeln!(
            metrics,
            "{},{},{},{},{}",
            epoch,
            train_nll,
            last_val,
            lr,
            start.elapsed().as_secs_f64()
        )
        .map_err(|source| TrainError::Io {
            path: metrics_path.display().to_string(),
            source,
        })?;
    }

    let ck = make_checkpoint(&params, t_total, cfg.epochs, &rng, best_val);
    ck.save(out_dir.join("last.json"))?;
    if best_val.is_infinite() {
        ck.save(out_dir.join("best.json"))?;
    }
    Ok(ck)
}

fn open_metrics(path: &Path) -> Result<std::fs::File, TrainError> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
    if new {
        writeln!(f, "epoch,train_nll,val_nll,lr,wall_seconds").map_err(|source| {
            TrainError::Io {
                path: path.display().to_string(),
                source,
            }
        })?;
    }
    Ok(f)
}
