//! Streaming training on freshly generated tasks.
//!
//! Validation tasks take indices `0..V` of the task stream and are fixed
//! before the first update. Iteration `t` draws one shape `(n, p)` and
//! consumes task indices `V + t·B .. V + (t+1)·B`, so no task is ever used
//! twice and a run is a pure function of its configuration.

mod adamw;
mod risk;
mod state;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, AdamState, AdamWConfig};
pub use risk::{edge_frequencies, minimize_composite_risk};
pub use state::{load_snapshot, save_snapshot};

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{forward_tape, save_checkpoint, EncoderConfig, EncoderParams};
use crate::error::Error;
use crate::graph::DirectedGraph;
use crate::metrics::{evaluate, MeanSe, MetricSummary};
use crate::par::Exec;
use crate::rng::SplitMix64;
use crate::taskgen::{draw_shape, sample_task, sample_task_shaped, TaskConfig, TaskSample};
use crate::Result;

/// Stop after this many consecutive iterations with a non-finite loss.
pub const MAX_NON_FINITE: usize = 10;

const INIT_SALT: u64 = 0x1;
const SHAPE_SALT: u64 = 0x2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Seeds parameter initialization and per-iteration shapes; the task
    /// stream uses `task.seed`.
    pub seed: u64,
    pub task: TaskConfig,
    pub encoder: EncoderConfig,
    pub validation_tasks: usize,
    pub checkpoint_interval: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            task: TaskConfig::desk(),
            encoder: EncoderConfig::default(),
            validation_tasks: 200,
            checkpoint_interval: 500,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.validation_tasks == 0 {
            return Err(Error::config("validation_tasks", "must be positive"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::config("checkpoint_interval", "must be positive"));
        }
        self.optimizer.validate()?;
        self.task.validate()?;
        self.encoder.validate()
    }

    /// Stream index of task `b` in iteration `t`.
    pub fn task_index(&self, t: u64, b: usize) -> u64 {
        self.validation_tasks as u64 + t * self.batch_size as u64 + b as u64
    }

    /// Shared `(n, p)` of iteration `t`.
    pub fn iteration_shape(&self, t: u64) -> (usize, usize) {
        let mut rng = SplitMix64::for_index(SplitMix64::derive(self.seed, SHAPE_SALT), t);
        draw_shape(&self.task, &mut rng)
    }

    pub fn init_params(&self) -> Result<EncoderParams> {
        let mut rng = SplitMix64::new(SplitMix64::derive(self.seed, INIT_SALT));
        EncoderParams::init(&self.encoder, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iteration: u64,
    pub train_nll: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    /// Number of updates applied before this evaluation.
    pub iteration: u64,
    pub val_nll: f64,
    pub nshd: f64,
    pub f1: f64,
    pub ap: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub train: Vec<TrainRow>,
    pub val: Vec<ValRow>,
}

pub const TRAIN_CSV_HEADER: &str = "iteration,train_nll,wall_ms";
pub const VAL_CSV_HEADER: &str = "iteration,val_nll,nshd,f1,ap,wall_ms";

impl TrainLog {
    pub fn train_csv(&self) -> String {
        let mut s = format!("{TRAIN_CSV_HEADER}\n");
        for r in &self.train {
            s.push_str(&format!(
                "{},{:.17e},{:.3}\n",
                r.iteration, r.train_nll, r.wall_ms
            ));
        }
        s
    }

    pub fn val_csv(&self) -> String {
        let mut s = format!("{VAL_CSV_HEADER}\n");
        for r in &self.val {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.3}\n",
                r.iteration, r.val_nll, r.nshd, r.f1, r.ap, r.wall_ms
            ));
        }
        s
    }

    fn parse_rows(text: &str, header: &str, width: usize) -> Result<Vec<Vec<f64>>> {
        let mut lines = text.lines();
        if lines.next() != Some(header) {
            return Err(Error::Format(format!("log header is not `{header}`")));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let cells: Vec<f64> = l
                    .split(',')
                    .map(|c| {
                        c.parse::<f64>()
                            .map_err(|_| Error::Format(format!("bad log cell `{c}`")))
                    })
                    .collect::<Result<_>>()?;
                if cells.len() != width {
                    return Err(Error::Format(format!(
                        "log row `{l}` has {} cells",
                        cells.len()
                    )));
                }
                Ok(cells)
            })
            .collect()
    }

    pub fn from_csv(train: &str, val: &str) -> Result<Self> {
        Ok(TrainLog {
            train: Self::parse_rows(train, TRAIN_CSV_HEADER, 3)?
                .into_iter()
                .map(|c| TrainRow {
                    iteration: c[0] as u64,
                    train_nll: c[1],
                    wall_ms: c[2],
                })
                .collect(),
            val: Self::parse_rows(val, VAL_CSV_HEADER, 6)?
                .into_iter()
                .map(|c| ValRow {
                    iteration: c[0] as u64,
                    val_nll: c[1],
                    nshd: c[2],
                    f1: c[3],
                    ap: c[4],
                    wall_ms: c[5],
                })
                .collect(),
        })
    }
}

/// Composite NLL of one dataset against its graph, and the gradient with
/// respect to every parameter array.
pub fn task_loss_and_grad(
    params: &EncoderParams,
    x: &Tensor,
    gstar: &DirectedGraph,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let out = forward_tape(&mut tape, &bound, x)?;
    let loss = tape.composite_nll(out.logits, out.scores, gstar)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    Ok((value, g))
}

/// Composite NLL, forward only.
pub fn task_loss(params: &EncoderParams, x: &Tensor, gstar: &DirectedGraph) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = forward_tape(&mut tape, &bound, x)?;
    let loss = tape.composite_nll(out.logits, out.scores, gstar)?;
    Ok(tape.value(loss).item())
}

/// Mean composite NLL over tasks.
pub fn mean_loss(params: &EncoderParams, tasks: &[TaskSample], exec: Exec) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::config("tasks", "need at least one task"));
    }
    let losses = exec
        .map(tasks, |t| task_loss(params, &t.x, &t.gstar))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / tasks.len() as f64)
}

/// The fixed validation set of a run.
pub fn validation_set(cfg: &TrainConfig) -> Result<Vec<TaskSample>> {
    cfg.exec
        .map_range(0..cfg.validation_tasks, |i| {
            sample_task(&cfg.task, i as u64)
        })
        .into_iter()
        .collect()
}

/// Batch of iteration `t`.
pub fn iteration_batch(cfg: &TrainConfig, t: u64) -> Result<Vec<TaskSample>> {
    let shape = cfg.iteration_shape(t);
    cfg.exec
        .map_range(0..cfg.batch_size, |b| {
            sample_task_shaped(&cfg.task, cfg.task_index(t, b), Some(shape))
        })
        .into_iter()
        .collect()
}

pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: TrainLog,
    pub final_validation: MetricSummary,
}

/// Where a run keeps its logs and checkpoints.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint(&self, k: u64) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("ckpt-{k:08}.bin"))
    }

    pub fn snapshot(&self, k: u64) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("optim-{k:08}.bin"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.bin")
    }

    pub fn train_csv(&self) -> PathBuf {
        self.root.join("train.csv")
    }

    pub fn val_csv(&self) -> PathBuf {
        self.root.join("val.csv")
    }

    /// Highest update count with both a checkpoint and a snapshot.
    pub fn latest(&self) -> Result<Option<u64>> {
        let mut best = None;
        for entry in fs::read_dir(self.root.join("checkpoints"))? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(k) = name
                .strip_prefix("optim-")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                if self.checkpoint(k).exists() && best.is_none_or(|b| k > b) {
                    best = Some(k);
                }
            }
        }
        Ok(best)
    }

    fn write_logs(&self, log: &TrainLog) -> Result<()> {
        write_atomic(&self.train_csv(), log.train_csv().as_bytes())?;
        write_atomic(&self.val_csv(), log.val_csv().as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Domain(_))
}

/// Validation metrics; numeric failures become NaN so that the
/// non-finite counter, not validation, decides when a run is abandoned.
fn validate_now(
    params: &EncoderParams,
    val: &[TaskSample],
    cfg: &TrainConfig,
    k: u64,
    wall_ms: f64,
) -> Result<(ValRow, MetricSummary)> {
    let val_nll = match mean_loss(params, val, cfg.exec) {
        Err(e) if is_numeric(&e) => f64::NAN,
        other => other?,
    };
    let summary = match evaluate(params, val, cfg.exec) {
        Ok((_, s)) => s,
        Err(e) if is_numeric(&e) => {
            let nan = MeanSe {
                mean: f64::NAN,
                se: f64::NAN,
            };
            MetricSummary {
                tasks: val.len(),
                nshd: nan,
                f1: nan,
                ap: nan,
                runtime_seconds: nan,
            }
        }
        Err(e) => return Err(e),
    };
    log::info!(
        "validation after {k} updates: nll {val_nll:.4}, nSHD {:.3}, F1 {:.3}, AP {:.3}",
        summary.nshd.mean,
        summary.f1.mean,
        summary.ap.mean
    );
    Ok((
        ValRow {
            iteration: k,
            val_nll,
            nshd: summary.nshd.mean,
            f1: summary.f1.mean,
            ap: summary.ap.mean,
            wall_ms,
        },
        summary,
    ))
}

/// Runs `cfg.iterations` updates. With `dir`, logs and checkpoints are
/// written there, and `resume` continues from the latest snapshot.
pub fn train_stream(cfg: &TrainConfig, dir: Option<&RunDir>, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = cfg.init_params()?;
    let mut state = AdamState::new(params.tensors());
    let mut log = TrainLog::default();
    let mut start_k = 0;
    let mut wall_offset = 0.0;
    if let (Some(dir), true) = (dir, resume) {
        if let Some(k) = dir.latest()? {
            state = load_snapshot(&dir.snapshot(k), params.tensors_mut())?;
            let mut prior = TrainLog::from_csv(
                &fs::read_to_string(dir.train_csv())?,
                &fs::read_to_string(dir.val_csv())?,
            )?;
            prior.train.retain(|r| r.iteration < k);
            prior.val.retain(|r| r.iteration <= k);
            wall_offset = prior
                .train
                .last()
                .map(|r| r.wall_ms)
                .into_iter()
                .chain(prior.val.last().map(|r| r.wall_ms))
                .fold(0.0, f64::max);
            log = prior;
            start_k = k;
            log::info!("resuming after {k} updates");
        }
    }
    let clock = Instant::now();
    let wall = || wall_offset + clock.elapsed().as_secs_f64() * 1e3;

    let val = validation_set(cfg)?;
    let mut last_summary = None;
    if start_k == 0 {
        let (row, summary) = validate_now(&params, &val, cfg, 0, wall())?;
        log.val.push(row);
        last_summary = Some(summary);
    }
    let mut non_finite = 0;
    for t in start_k..cfg.iterations {
        let batch = iteration_batch(cfg, t)?;
        let results = cfg.exec.map(&batch, |task| {
            task_loss_and_grad(&params, &task.x, &task.gstar)
        });
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        for r in results {
            let (loss, g) = match r {
                Err(e) if is_numeric(&e) => (f64::NAN, Vec::new()),
                other => other?,
            };
            total += loss;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let train_nll = total * scale;
        let applied = train_nll.is_finite()
            && adamw_step(params.tensors_mut(), &grads, &mut state, &cfg.optimizer)?;
        if applied {
            non_finite = 0;
        } else {
            non_finite += 1;
            log::warn!("iteration {t}: non-finite loss or gradient, update skipped");
            if non_finite >= MAX_NON_FINITE {
                return Err(Error::NonFinite(format!(
                    "training loss was non-finite for {MAX_NON_FINITE} consecutive iterations (last at {t})"
                )));
            }
        }
        log.train.push(TrainRow {
            iteration: t,
            train_nll,
            wall_ms: wall(),
        });
        if t % 50 == 0 {
            log::info!("iteration {t}: train nll {train_nll:.4}");
        }
        let k = t + 1;
        if k % cfg.checkpoint_interval == 0 || k == cfg.iterations {
            let (row, summary) = validate_now(&params, &val, cfg, k, wall())?;
            log.val.push(row);
            last_summary = Some(summary);
            if let Some(dir) = dir {
                save_checkpoint(&params, &dir.checkpoint(k))?;
                save_snapshot(&dir.snapshot(k), params.tensors(), &state)?;
                dir.write_logs(&log)?;
            }
        }
    }
    let final_validation = match last_summary {
        Some(s) => s,
        None => {
            let (row, summary) =
                validate_now(&params, &val, cfg, cfg.iterations.max(start_k), wall())?;
            if log.val.last().is_none_or(|r| r.iteration != row.iteration) {
                log.val.push(row);
            }
            summary
        }
    };
    if let Some(dir) = dir {
        save_checkpoint(&params, &dir.final_checkpoint())?;
        dir.write_logs(&log)?;
    }
    Ok(TrainOutcome {
        params,
        log,
        final_validation,
    })
}
