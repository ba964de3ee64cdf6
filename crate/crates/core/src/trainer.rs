//! Training loop: sample queries, adapt both views, pseudo-label (E-step),
//! score the symmetric InfoNCE pair plus the reconstruction term (M-step),
//! and Adam-update the adapter and reverter. Fully deterministic given the
//! config seed; per-iteration randomness is derived from (seed, iteration)
//! so a resumed run replays the identical trajectory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    adapt_backward, adapt_forward, init_params, revert_forward, AdaptForward, AdapterArch,
    AdapterParams, ReverterParams,
};
use crate::aic::reconstruction_loss;
use crate::empl::{info_nce_with_sims, pseudo_label, PseudoLabels};
use crate::error::{Error, Result};
use crate::featstore::FeatureSet;
use crate::math;

pub const CVTS_MAGIC: [u8; 4] = *b"CVTS";
pub const TRAIN_STATE_VERSION: u32 = 1;

/// Consecutive fully-masked E-steps tolerated before aborting.
pub const COLLAPSE_LIMIT: u32 = 5;

/// Hyperparameters of the training loop. The JSON mirror uses the field
/// names below (`T`, `M`, `tau`, ...).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "T")]
    pub iterations: u64,
    /// Queries sampled per iteration (clamped to the available count).
    #[serde(rename = "M")]
    pub queries_per_iter: usize,
    pub tau: f64,
    pub threshold: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps_adam: f64,
    pub w_em: f64,
    pub w_re: f64,
    pub seed: u64,
    pub arch: AdapterArch,
    /// Adapter output dimension; `null`/absent means "same as input".
    pub d: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 60,
            queries_per_iter: 700,
            tau: 0.1,
            threshold: 0.1,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps_adam: 1e-8,
            w_em: 1.0,
            w_re: 1.0,
            seed: 0,
            arch: AdapterArch::Plain,
            d: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries_per_iter == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.w_em < 0.0 || self.w_re < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if self.d == Some(0) {
            return Err(Error::invalid("adapter output dim must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn output_dim(&self, d0: usize) -> usize {
        self.d.unwrap_or(d0)
    }
}

/// Bias-corrected first/second moment accumulators for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Array2::zeros((rows, cols)),
            v: Array2::zeros((rows, cols)),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().all(|x| x.is_finite()) && self.v.iter().all(|x| x.is_finite())
    }
}

/// One standard bias-corrected Adam update.
pub fn adam_step(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    block: &'static str,
) -> Result<()> {
    if param.dim() != grad.dim() || state.m.dim() != grad.dim() {
        return Err(Error::invalid(format!(
            "adam shape mismatch in block `{block}`"
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::GradientBlowUp(block));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    if !state.moments_finite() {
        return Err(Error::GradientBlowUp(block));
    }
    Ok(())
}

/// Uniform sample of `m` distinct record indices.
pub fn sample_indices(len: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::invalid("cannot sample from an empty set"));
    }
    if m == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let m = if m > len {
        log::warn!("requested {m} queries but only {len} available; clamping");
        len
    } else {
        m
    };
    Ok(rand::seq::index::sample(rng, len, m).into_vec())
}

/// Uniform without-replacement sample of `m` records.
pub fn sample_queries(set: &FeatureSet, m: usize, rng: &mut ChaCha8Rng) -> Result<FeatureSet> {
    let idx = sample_indices(set.len(), m, rng)?;
    set.subset(&idx)
}

/// Loss components of one M-step evaluation.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub l_em_qr: f64,
    pub l_em_rq: f64,
    pub l_re_q: f64,
    pub l_re_r: f64,
    /// Queries holding a valid pseudo-label this iteration.
    pub valid_rows: usize,
    /// Set when the E-step masked every query.
    pub all_masked: bool,
}

impl StepLosses {
    pub fn total(&self, w_em: f64, w_re: f64) -> f64 {
        w_em * (self.l_em_qr + self.l_em_rq) + w_re * (self.l_re_q + self.l_re_r)
    }
}

#[derive(Debug, Clone)]
pub struct StepGrads {
    pub grad_w: Array2<f64>,
    pub grad_v: Array2<f64>,
}

/// Evaluate the combined objective and its analytic gradients at fixed
/// pseudo-labels. Exposed so gradient checks can differentiate exactly what
/// the trainer descends.
pub fn m_step(
    params: &AdapterParams,
    rev: &ReverterParams,
    xq: &Array2<f64>,
    xr: &Array2<f64>,
    labels: &PseudoLabels,
    tau: f64,
    w_em: f64,
    w_re: f64,
) -> Result<(StepLosses, StepGrads)> {
    let fwd_q = adapt_forward(params, xq)?;
    let fwd_r = adapt_forward(params, xr)?;
    m_step_with_forward(params, rev, xq, xr, &fwd_q, &fwd_r, labels, tau, w_em, w_re)
}

#[allow(clippy::too_many_arguments)]
fn m_step_with_forward(
    params: &AdapterParams,
    rev: &ReverterParams,
    xq: &Array2<f64>,
    xr: &Array2<f64>,
    fwd_q: &AdaptForward,
    fwd_r: &AdaptForward,
    labels: &PseudoLabels,
    tau: f64,
    w_em: f64,
    w_re: f64,
) -> Result<(StepLosses, StepGrads)> {
    let sims = math::similarity_matrix(&fwd_q.z, &fwd_r.z);
    let em_fwd = info_nce_with_sims(&fwd_q.z, &fwd_r.z, &sims, &labels.rows(), tau)?;
    let sims_t = sims.t().as_standard_layout().into_owned();
    let em_bwd = info_nce_with_sims(&fwd_r.z, &fwd_q.z, &sims_t, &labels.transposed_rows(), tau)?;

    let xhat_q = revert_forward(rev, &fwd_q.z)?;
    let xhat_r = revert_forward(rev, &fwd_r.z)?;
    let recon_q = reconstruction_loss(xq, &xhat_q)?;
    let recon_r = reconstruction_loss(xr, &xhat_r)?;

    let grad_v = {
        let mut g = recon_q.grad_recon.t().dot(&fwd_q.z);
        g += &recon_r.grad_recon.t().dot(&fwd_r.z);
        g *= w_re;
        g
    };

    // dL/dZ: both InfoNCE directions plus the reconstruction pull-back
    let mut grad_zq = &em_fwd.grad_queries * w_em;
    grad_zq += &(&em_bwd.grad_refs * w_em);
    grad_zq += &(&recon_q.grad_recon.dot(rev.weights()) * w_re);
    let mut grad_zr = &em_fwd.grad_refs * w_em;
    grad_zr += &(&em_bwd.grad_queries * w_em);
    grad_zr += &(&recon_r.grad_recon.dot(rev.weights()) * w_re);

    let mut grad_w = adapt_backward(params, xq, fwd_q, &grad_zq);
    grad_w += &adapt_backward(params, xr, fwd_r, &grad_zr);

    Ok((
        StepLosses {
            l_em_qr: em_fwd.value,
            l_em_rq: em_bwd.value,
            l_re_q: recon_q.value,
            l_re_r: recon_r.value,
            valid_rows: labels.num_valid(),
            all_masked: em_fwd.all_masked,
        },
        StepGrads { grad_w, grad_v },
    ))
}

/// Per-iteration telemetry. `ms` is wall-clock and excluded from the
/// determinism contract; every other column is reproducible bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub iter: u64,
    pub l_em_qr: f64,
    pub l_em_rq: f64,
    pub l_re_q: f64,
    pub l_re_r: f64,
    pub valid_rows: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "iter,l_em_qr,l_em_rq,l_re_q,l_re_r,valid_rows,ms")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.3}",
                e.iter, e.l_em_qr, e.l_em_rq, e.l_re_q, e.l_re_r, e.valid_rows, e.ms
            )?;
        }
        Ok(())
    }

    /// Equality over the reproducible columns (everything except `ms`).
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.iter == b.iter
                    && a.l_em_qr == b.l_em_qr
                    && a.l_em_rq == b.l_em_rq
                    && a.l_re_q == b.l_re_q
                    && a.l_re_r == b.l_re_r
                    && a.valid_rows == b.valid_rows
            })
    }
}

/// Resumable snapshot of an in-flight training run.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub params: AdapterParams,
    pub reverter: ReverterParams,
    pub adam_w: AdamState,
    pub adam_v: AdamState,
    pub next_iter: u64,
    pub collapse_streak: u32,
    pub log: TrainLog,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub adapter: AdapterParams,
    pub reverter: ReverterParams,
    pub log: TrainLog,
}

fn check_train_inputs(cfg: &TrainConfig, queries: &FeatureSet, refs: &FeatureSet) -> Result<()> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(Error::invalid("query set is empty"));
    }
    if refs.is_empty() {
        return Err(Error::NoReferences);
    }
    if queries.dim() != refs.dim() {
        return Err(Error::invalid(format!(
            "query dim {} != reference dim {}",
            queries.dim(),
            refs.dim()
        )));
    }
    if !queries.is_normalized() || !refs.is_normalized() {
        return Err(Error::invalid("training inputs must be normalized sets"));
    }
    Ok(())
}

/// Run the full loop from a fresh identity-preserving initialization.
pub fn train_adapter(
    cfg: &TrainConfig,
    queries: &FeatureSet,
    refs: &FeatureSet,
) -> Result<TrainOutcome> {
    check_train_inputs(cfg, queries, refs)?;
    let d0 = queries.dim();
    let d = cfg.output_dim(d0);
    let (params, reverter) = init_params(d0, d, cfg.arch, cfg.seed)?;
    let mut state = TrainingState {
        adam_w: AdamState::new(d, d0),
        adam_v: AdamState::new(d0, d),
        params,
        reverter,
        next_iter: 0,
        collapse_streak: 0,
        log: TrainLog::default(),
    };
    run_iterations(cfg, queries, refs, &mut state)?;
    Ok(TrainOutcome {
        adapter: state.params,
        reverter: state.reverter,
        log: state.log,
    })
}

/// Continue a checkpointed run to completion; the combined trajectory is
/// bit-identical to an uninterrupted run with the same config.
pub fn resume_training(
    cfg: &TrainConfig,
    queries: &FeatureSet,
    refs: &FeatureSet,
    mut state: TrainingState,
) -> Result<TrainOutcome> {
    check_train_inputs(cfg, queries, refs)?;
    let d0 = queries.dim();
    let d = cfg.output_dim(d0);
    if state.params.input_dim() != d0
        || state.params.output_dim() != d
        || state.params.arch() != cfg.arch
    {
        return Err(Error::CheckpointShapeMismatch(format!(
            "state is {}x{} {:?}, config wants {}x{} {:?}",
            state.params.output_dim(),
            state.params.input_dim(),
            state.params.arch(),
            d,
            d0,
            cfg.arch
        )));
    }
    run_iterations(cfg, queries, refs, &mut state)?;
    Ok(TrainOutcome {
        adapter: state.params,
        reverter: state.reverter,
        log: state.log,
    })
}

/// RNG for iteration `t`: one ChaCha stream per iteration, so resume does
/// not depend on rewinding a shared stream.
fn iteration_rng(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t + 1);
    rng
}

fn run_iterations(
    cfg: &TrainConfig,
    queries: &FeatureSet,
    refs: &FeatureSet,
    state: &mut TrainingState,
) -> Result<()> {
    let xr = refs.to_matrix();
    let xq_full = queries.to_matrix();
    for t in state.next_iter..cfg.iterations {
        let started = Instant::now();
        let mut rng = iteration_rng(cfg.seed, t);
        let idx = sample_indices(queries.len(), cfg.queries_per_iter, &mut rng)?;
        let mut xq = Array2::zeros((idx.len(), queries.dim()));
        for (row, &src) in idx.iter().enumerate() {
            xq.row_mut(row).assign(&xq_full.row(src));
        }

        let fwd_q = adapt_forward(&state.params, &xq)?;
        let fwd_r = adapt_forward(&state.params, &xr)?;
        let labels = pseudo_label(&fwd_q.z, &fwd_r.z, cfg.threshold)?;
        if labels.num_valid() == 0 {
            state.collapse_streak += 1;
            if state.collapse_streak > COLLAPSE_LIMIT {
                return Err(Error::PseudoLabelingCollapsed(state.collapse_streak as usize));
            }
            log::warn!("iteration {t}: no valid pseudo-labels");
        } else {
            state.collapse_streak = 0;
        }

        let (losses, grads) = m_step_with_forward(
            &state.params,
            &state.reverter,
            &xq,
            &xr,
            &fwd_q,
            &fwd_r,
            &labels,
            cfg.tau,
            cfg.w_em,
            cfg.w_re,
        )?;

        // both gradients are taken at the pre-update parameters
        adam_step(
            state.reverter.weights_mut(),
            &grads.grad_v,
            &mut state.adam_v,
            cfg.lr,
            cfg.betas,
            cfg.eps_adam,
            "reverter.V",
        )?;
        adam_step(
            state.params.weights_mut(),
            &grads.grad_w,
            &mut state.adam_w,
            cfg.lr,
            cfg.betas,
            cfg.eps_adam,
            "adapter.W",
        )?;

        state.log.entries.push(TrainLogEntry {
            iter: t,
            l_em_qr: losses.l_em_qr,
            l_em_rq: losses.l_em_rq,
            l_re_q: losses.l_re_q,
            l_re_r: losses.l_re_r,
            valid_rows: losses.valid_rows,
            ms: started.elapsed().as_secs_f64() * 1e3,
        });
        state.next_iter = t + 1;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CVTS v1: resumable training state (f64 parameters and moments)
// ---------------------------------------------------------------------------

fn write_array<W: Write>(w: &mut W, a: &Array2<f64>) -> Result<()> {
    for &v in a.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut buf = vec![0f64; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut buf).map_err(ts_truncated)?;
    Array2::from_shape_vec((rows, cols), buf).map_err(|_| Error::CorruptCheckpoint)
}

pub fn write_training_state<W: Write>(w: &mut W, state: &TrainingState) -> Result<()> {
    let d = state.params.output_dim();
    let d0 = state.params.input_dim();
    w.write_all(&CVTS_MAGIC)?;
    w.write_u32::<LittleEndian>(TRAIN_STATE_VERSION)?;
    w.write_u32::<LittleEndian>(match state.params.arch() {
        AdapterArch::Plain => 0,
        AdapterArch::Residual => 1,
    })?;
    w.write_u32::<LittleEndian>(d0 as u32)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    w.write_u64::<LittleEndian>(state.next_iter)?;
    w.write_u32::<LittleEndian>(state.collapse_streak)?;
    w.write_u64::<LittleEndian>(state.adam_w.step)?;
    w.write_u64::<LittleEndian>(state.adam_v.step)?;
    write_array(w, state.params.weights())?;
    write_array(w, state.reverter.weights())?;
    write_array(w, &state.adam_w.m)?;
    write_array(w, &state.adam_w.v)?;
    write_array(w, &state.adam_v.m)?;
    write_array(w, &state.adam_v.v)?;
    w.write_u64::<LittleEndian>(state.log.entries.len() as u64)?;
    for e in &state.log.entries {
        w.write_u64::<LittleEndian>(e.iter)?;
        w.write_f64::<LittleEndian>(e.l_em_qr)?;
        w.write_f64::<LittleEndian>(e.l_em_rq)?;
        w.write_f64::<LittleEndian>(e.l_re_q)?;
        w.write_f64::<LittleEndian>(e.l_re_r)?;
        w.write_u64::<LittleEndian>(e.valid_rows as u64)?;
        w.write_f64::<LittleEndian>(e.ms)?;
    }
    Ok(())
}

pub fn read_training_state<R: Read>(r: &mut R) -> Result<TrainingState> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ts_truncated)?;
    if magic != CVTS_MAGIC {
        return Err(Error::UnrecognizedFormat);
    }
    let version = r.read_u32::<LittleEndian>().map_err(ts_truncated)?;
    if version != TRAIN_STATE_VERSION {
        return Err(Error::CheckpointVersionMismatch {
            expected: TRAIN_STATE_VERSION,
            found: version,
        });
    }
    let arch = match r.read_u32::<LittleEndian>().map_err(ts_truncated)? {
        0 => AdapterArch::Plain,
        1 => AdapterArch::Residual,
        _ => return Err(Error::CorruptCheckpoint),
    };
    let d0 = r.read_u32::<LittleEndian>().map_err(ts_truncated)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(ts_truncated)? as usize;
    if d0 == 0 || d == 0 {
        return Err(Error::CorruptCheckpoint);
    }
    let next_iter = r.read_u64::<LittleEndian>().map_err(ts_truncated)?;
    let collapse_streak = r.read_u32::<LittleEndian>().map_err(ts_truncated)?;
    let step_w = r.read_u64::<LittleEndian>().map_err(ts_truncated)?;
    let step_v = r.read_u64::<LittleEndian>().map_err(ts_truncated)?;
    let w = read_array(r, d, d0)?;
    let v = read_array(r, d0, d)?;
    let adam_w = AdamState {
        m: read_array(r, d, d0)?,
        v: read_array(r, d, d0)?,
        step: step_w,
    };
    let adam_v = AdamState {
        m: read_array(r, d0, d)?,
        v: read_array(r, d0, d)?,
        step: step_v,
    };
    let count = r.read_u64::<LittleEndian>().map_err(ts_truncated)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(TrainLogEntry {
            iter: r.read_u64::<LittleEndian>().map_err(ts_truncated)?,
            l_em_qr: r.read_f64::<LittleEndian>().map_err(ts_truncated)?,
            l_em_rq: r.read_f64::<LittleEndian>().map_err(ts_truncated)?,
            l_re_q: r.read_f64::<LittleEndian>().map_err(ts_truncated)?,
            l_re_r: r.read_f64::<LittleEndian>().map_err(ts_truncated)?,
            valid_rows: r.read_u64::<LittleEndian>().map_err(ts_truncated)? as usize,
            ms: r.read_f64::<LittleEndian>().map_err(ts_truncated)?,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::CorruptCheckpoint);
    }
    if !adam_w.moments_finite() || !adam_v.moments_finite() {
        return Err(Error::CorruptCheckpoint);
    }
    Ok(TrainingState {
        params: AdapterParams::new(arch, w)?,
        reverter: ReverterParams::new(v)?,
        adam_w,
        adam_v,
        next_iter,
        collapse_streak,
        log: TrainLog { entries },
    })
}

pub fn save_training_state(path: impl AsRef<Path>, state: &TrainingState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_training_state(&mut w, state)?;
    w.flush()?;
    Ok(())
}

pub fn load_training_state(path: impl AsRef<Path>) -> Result<TrainingState> {
    let mut r = BufReader::new(File::open(path)?);
    read_training_state(&mut r)
}

fn ts_truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::CorruptCheckpoint
    } else {
        Error::Io(e)
    }
}

/// Train for a prefix of the iterations and return the snapshot; used by
/// checkpoint tests and the CLI is free to call it for periodic snapshots.
pub fn train_prefix(
    cfg: &TrainConfig,
    queries: &FeatureSet,
    refs: &FeatureSet,
    stop_after: u64,
) -> Result<TrainingState> {
    check_train_inputs(cfg, queries, refs)?;
    let d0 = queries.dim();
    let d = cfg.output_dim(d0);
    let (params, reverter) = init_params(d0, d, cfg.arch, cfg.seed)?;
    let mut state = TrainingState {
        adam_w: AdamState::new(d, d0),
        adam_v: AdamState::new(d0, d),
        params,
        reverter,
        next_iter: 0,
        collapse_streak: 0,
        log: TrainLog::default(),
    };
    let mut truncated = cfg.clone();
    truncated.iterations = stop_after.min(cfg.iterations);
    run_iterations(&truncated, queries, refs, &mut state)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featstore::ViewTag;
    use rand::Rng;

    fn unit_features(tag: ViewTag, n: usize, dim: usize, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSet::from_records(
            tag,
            dim,
            true,
            (0..n).map(|i| {
                let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let unit = crate::featstore::l2_normalize(&raw).unwrap();
                (
                    format!("{tag:?}{i}"),
                    unit.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
                )
            }),
        )
        .unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Array2::from_elem((2, 3), 1.5);
        let g = Array2::zeros((2, 3));
        let mut st = AdamState::new(2, 3);
        adam_step(&mut p, &g, &mut st, 0.01, (0.9, 0.999), 1e-8, "test").unwrap();
        assert!(p.iter().all(|&v| v == 1.5));
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = Array2::zeros((1, 4));
        let g = ndarray::array![[0.3, -0.7, 2.0, -0.001]];
        let mut st = AdamState::new(1, 4);
        adam_step(&mut p, &g, &mut st, 0.01, (0.9, 0.999), 1e-8, "test").unwrap();
        for (i, &gv) in g.iter().enumerate() {
            let expected = -0.01 * gv.signum();
            assert!(
                (p[[0, i]] - expected).abs() < 1e-4,
                "coord {i}: {} vs {expected}",
                p[[0, i]]
            );
        }
    }

    #[test]
    fn adam_matches_textbook_trajectory() {
        // 1-D quadratic f(x) = (x - 3)^2 / 2, gradient x - 3
        let lr = 0.05;
        let (b1, b2) = (0.9, 0.999);
        let eps = 1e-8;
        let mut p = Array2::from_elem((1, 1), 10.0);
        let mut st = AdamState::new(1, 1);
        // independent textbook implementation on scalars
        let (mut x, mut m, mut v) = (10.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = p[[0, 0]] - 3.0;
            adam_step(
                &mut p,
                &Array2::from_elem((1, 1), g),
                &mut st,
                lr,
                (b1, b2),
                eps,
                "test",
            )
            .unwrap();
            let gs = x - 3.0;
            m = b1 * m + (1.0 - b1) * gs;
            v = b2 * v + (1.0 - b2) * gs * gs;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
            assert!(
                (p[[0, 0]] - x).abs() < 1e-10,
                "step {t}: {} vs {x}",
                p[[0, 0]]
            );
        }
    }

    #[test]
    fn adam_rejects_nonfinite_gradient() {
        let mut p = Array2::zeros((1, 2));
        let g = ndarray::array![[f64::NAN, 0.0]];
        let mut st = AdamState::new(1, 2);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.01, (0.9, 0.999), 1e-8, "adapter.W"),
            Err(Error::GradientBlowUp("adapter.W"))
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_exhaustive() {
        let set = unit_features(ViewTag::Query, 9, 4, 1);
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        let mut rng_b = ChaCha8Rng::seed_from_u64(5);
        let a = sample_indices(set.len(), 4, &mut rng_a).unwrap();
        let b = sample_indices(set.len(), 4, &mut rng_b).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);

        // m = len gives a permutation of the full set
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut all = sample_indices(set.len(), set.len(), &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());

        // m > len clamps
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clamped = sample_queries(&set, 50, &mut rng).unwrap();
        assert_eq!(clamped.len(), 9);

        let single = unit_features(ViewTag::Query, 1, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_queries(&single, 1, &mut rng).unwrap();
        assert_eq!(s.id(0), single.id(0));
    }

    #[test]
    fn t_zero_returns_initialization() {
        let queries = unit_features(ViewTag::Query, 12, 6, 10);
        let refs = unit_features(ViewTag::Reference, 8, 6, 11);
        let cfg = TrainConfig {
            iterations: 0,
            queries_per_iter: 6,
            seed: 9,
            d: Some(4),
            ..TrainConfig::default()
        };
        let out = train_adapter(&cfg, &queries, &refs).unwrap();
        let (p0, r0) = init_params(6, 4, AdapterArch::Plain, 9).unwrap();
        assert_eq!(out.adapter.weights(), p0.weights());
        assert_eq!(out.reverter.weights(), r0.weights());
        assert!(out.log.entries.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let queries = unit_features(ViewTag::Query, 20, 5, 21);
        let refs = unit_features(ViewTag::Reference, 10, 5, 22);
        let cfg = TrainConfig {
            iterations: 7,
            queries_per_iter: 8,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train_adapter(&cfg, &queries, &refs).unwrap();
        let b = train_adapter(&cfg, &queries, &refs).unwrap();
        assert_eq!(a.adapter.weights(), b.adapter.weights());
        assert_eq!(a.reverter.weights(), b.reverter.weights());
        assert!(a.log.same_trajectory(&b.log));
    }

    #[test]
    fn m_step_gradcheck_full_objective() {
        // joint gradient of w_em * (L_qr + L_rq) + w_re * (L_re_q + L_re_r)
        let queries = unit_features(ViewTag::Query, 8, 6, 31);
        let refs = unit_features(ViewTag::Reference, 10, 6, 32);
        let xq = queries.to_matrix();
        let xr = refs.to_matrix();
        let (params, rev) = init_params(6, 4, AdapterArch::Plain, 3).unwrap();
        let fwd_q = adapt_forward(&params, &xq).unwrap();
        let fwd_r = adapt_forward(&params, &xr).unwrap();
        let labels = pseudo_label(&fwd_q.z, &fwd_r.z, 0.1).unwrap();
        let (w_em, w_re, tau) = (1.0, 1.0, 0.1);
        let (_, grads) = m_step(&params, &rev, &xq, &xr, &labels, tau, w_em, w_re).unwrap();

        let h = 1e-5;
        let objective = |w: &Array2<f64>, v: &Array2<f64>| {
            let p = AdapterParams::new(AdapterArch::Plain, w.clone()).unwrap();
            let r = ReverterParams::new(v.clone()).unwrap();
            let (losses, _) = m_step(&p, &r, &xq, &xr, &labels, tau, w_em, w_re).unwrap();
            losses.total(w_em, w_re)
        };
        let w0 = params.weights().clone();
        let v0 = rev.weights().clone();
        for r in 0..4 {
            for c in 0..6 {
                let mut wp = w0.clone();
                let mut wm = w0.clone();
                wp[[r, c]] += h;
                wm[[r, c]] -= h;
                let fd = (objective(&wp, &v0) - objective(&wm, &v0)) / (2.0 * h);
                let a = grads.grad_w[[r, c]];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-4, "W[{r},{c}]: {a} vs {fd}");
            }
        }
        for r in 0..6 {
            for c in 0..4 {
                let mut vp = v0.clone();
                let mut vm = v0.clone();
                vp[[r, c]] += h;
                vm[[r, c]] -= h;
                let fd = (objective(&w0, &vp) - objective(&w0, &vm)) / (2.0 * h);
                let a = grads.grad_v[[r, c]];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-4, "V[{r},{c}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn pure_reconstruction_training_descends() {
        let queries = unit_features(ViewTag::Query, 16, 5, 41);
        let refs = unit_features(ViewTag::Reference, 12, 5, 42);
        let cfg = TrainConfig {
            iterations: 25,
            queries_per_iter: 16,
            w_em: 0.0,
            w_re: 1.0,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train_adapter(&cfg, &queries, &refs).unwrap();
        let first = &out.log.entries[0];
        let last = out.log.entries.last().unwrap();
        assert!(
            last.l_re_q + last.l_re_r <= first.l_re_q + first.l_re_r,
            "reconstruction did not descend: {} -> {}",
            first.l_re_q + first.l_re_r,
            last.l_re_q + last.l_re_r
        );
    }

    #[test]
    fn collapse_guard_aborts() {
        let queries = unit_features(ViewTag::Query, 10, 4, 51);
        let refs = unit_features(ViewTag::Reference, 6, 4, 52);
        let cfg = TrainConfig {
            iterations: 30,
            queries_per_iter: 5,
            threshold: 2.0, // cosine similarity can never exceed 1
            seed: 1,
            ..TrainConfig::default()
        };
        match train_adapter(&cfg, &queries, &refs) {
            Err(Error::PseudoLabelingCollapsed(n)) => assert_eq!(n, 6),
            other => panic!("expected collapse abort, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let queries = unit_features(ViewTag::Query, 18, 5, 61);
        let refs = unit_features(ViewTag::Reference, 9, 5, 62);
        let cfg = TrainConfig {
            iterations: 12,
            queries_per_iter: 7,
            seed: 13,
            ..TrainConfig::default()
        };
        let full = train_adapter(&cfg, &queries, &refs).unwrap();

        let snapshot = train_prefix(&cfg, &queries, &refs, 6).unwrap();
        let mut bytes = Vec::new();
        write_training_state(&mut bytes, &snapshot).unwrap();
        let restored = read_training_state(&mut bytes.as_slice()).unwrap();
        assert_eq!(restored.next_iter, 6);
        let resumed = resume_training(&cfg, &queries, &refs, restored).unwrap();

        assert_eq!(full.adapter.weights(), resumed.adapter.weights());
        assert_eq!(full.reverter.weights(), resumed.reverter.weights());
        assert!(full.log.same_trajectory(&resumed.log));
    }

    #[test]
    fn resume_with_altered_dims_is_rejected() {
        let queries = unit_features(ViewTag::Query, 10, 5, 71);
        let refs = unit_features(ViewTag::Reference, 6, 5, 72);
        let cfg = TrainConfig {
            iterations: 4,
            queries_per_iter: 5,
            seed: 3,
            d: Some(5),
            ..TrainConfig::default()
        };
        let snapshot = train_prefix(&cfg, &queries, &refs, 2).unwrap();
        let mut altered = cfg.clone();
        altered.d = Some(3);
        assert!(matches!(
            resume_training(&altered, &queries, &refs, snapshot),
            Err(Error::CheckpointShapeMismatch(_))
        ));
    }

    #[test]
    fn truncated_state_is_corrupt() {
        let queries = unit_features(ViewTag::Query, 8, 4, 81);
        let refs = unit_features(ViewTag::Reference, 5, 4, 82);
        let cfg = TrainConfig {
            iterations: 3,
            queries_per_iter: 4,
            seed: 8,
            ..TrainConfig::default()
        };
        let snapshot = train_prefix(&cfg, &queries, &refs, 2).unwrap();
        let mut bytes = Vec::new();
        write_training_state(&mut bytes, &snapshot).unwrap();
        let short = &bytes[..bytes.len() - 5];
        assert!(matches!(
            read_training_state(&mut &short[..]),
            Err(Error::CorruptCheckpoint)
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_training_state(&mut wrong_version.as_slice()),
            Err(Error::CheckpointVersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn config_json_roundtrip_and_errors() {
        let text = r#"{
            "T": 60, "M": 700, "tau": 0.1, "threshold": 0.1,
            "lr": 0.001, "betas": [0.9, 0.999], "eps_adam": 1e-8,
            "w_em": 1.0, "w_re": 1.0, "seed": 42, "arch": "plain", "d": 256
        }"#;
        let cfg = TrainConfig::from_json(text).unwrap();
        assert_eq!(cfg.iterations, 60);
        assert_eq!(cfg.queries_per_iter, 700);
        assert_eq!(cfg.d, Some(256));

        // defaults fill missing fields
        let cfg = TrainConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.iterations, 60);
        assert_eq!(cfg.tau, 0.1);
        assert!(cfg.d.is_none());

        assert!(TrainConfig::from_json(r#"{"tau": -1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"unknown_field": 1}"#).is_err());
    }
}
