//! The optimization loop: SGD with momentum and weight decay, linear warmup
//! followed by step decay, atomic checkpointing with exact RNG state capture,
//! and a JSON-lines loss log. Everything is serial and f64, so two runs with
//! the same seed produce bit-identical logs, and resuming from a checkpoint
//! continues the exact loss sequence.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchor_pyramid, build_targets};
use crate::config::{DetectorConfig, OptimConfig};
use crate::dataio::AnnotationRecord;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport};
use crate::network::{normalize_image, Model, ParamStore};
use crate::sampling::{augment, Sample, SamplerPool};
use crate::tensor::Tensor;

/// Iteration counts after desk-scale shrinking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaledSchedule {
    pub warmup: u64,
    pub decays: Vec<u64>,
    pub total: u64,
}

pub fn scaled_schedule(cfg: &OptimConfig) -> Result<ScaledSchedule> {
    let s = cfg.scale.max(1);
    let sched = ScaledSchedule {
        warmup: cfg.warmup_iters / s,
        decays: cfg.decay_iters.iter().map(|d| d / s).collect(),
        total: cfg.total_iters / s,
    };
    if sched.total == 0 {
        return Err(Error::InvalidConfig(format!(
            "scale {} leaves no iterations of {}",
            s, cfg.total_iters
        )));
    }
    Ok(sched)
}

/// Learning rate at an iteration: linear interpolation from `lr_start` to
/// `lr_peak` across the warmup, then `lr_peak * decay_factor^k` after the
/// k-th decay boundary. Boundaries and warmup are divided by `cfg.scale`.
pub fn lr_at(iteration: u64, cfg: &OptimConfig) -> Result<f64> {
    let sched = scaled_schedule(cfg)?;
    if iteration > sched.total {
        return Err(Error::InvalidConfig(format!(
            "iteration {iteration} outside schedule of {} iterations",
            sched.total
        )));
    }
    if iteration < sched.warmup {
        let t = iteration as f64 / sched.warmup as f64;
        return Ok(cfg.lr_start + t * (cfg.lr_peak - cfg.lr_start));
    }
    let k = sched.decays.iter().filter(|&&d| iteration >= d).count() as i32;
    Ok(cfg.lr_peak * cfg.decay_factor.powi(k))
}

/// Plain SGD with momentum and decoupled-from-nothing weight decay folded
/// into the gradient: `buf = m * buf + grad + wd * p; p -= lr * buf`.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let buffers = params
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.value().raw_dim()))
            .collect();
        Sgd { momentum, weight_decay, buffers }
    }

    pub fn step(&mut self, params: &ParamStore, lr: f64) {
        for ((_, p), buf) in params.iter().zip(self.buffers.iter_mut()) {
            let grad = p.grad();
            let value = p.value();
            match grad {
                Some(g) => {
                    buf.zip_mut_with(&(&g + &value.mapv(|v| v * self.weight_decay)), |b, u| {
                        *b = self.momentum * *b + u;
                    });
                }
                None => {
                    if self.weight_decay == 0.0 {
                        buf.mapv_inplace(|b| self.momentum * b);
                        continue;
                    }
                    buf.zip_mut_with(&value.mapv(|v| v * self.weight_decay), |b, u| {
                        *b = self.momentum * *b + u;
                    });
                }
            }
            p.update_value(|v| {
                v.zip_mut_with(buf, |pv, &b| *pv -= lr * b);
            });
        }
    }

    pub fn buffers(&self) -> &[ArrayD<f64>] {
        &self.buffers
    }

    pub fn restore_buffers(&mut self, buffers: Vec<ArrayD<f64>>) {
        self.buffers = buffers;
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"DSHOTCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    iteration: u64,
    rng_streams: Vec<ChaCha8Rng>,
    rng_cursor: usize,
    tensors: Vec<TensorEntry>,
}

/// A parsed checkpoint archive: hierarchical tensor names (parameters plus
/// `momentum.*` optimizer state), the training iteration, and the exact
/// sampler RNG states.
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: String,
    pub rng_streams: Vec<ChaCha8Rng>,
    pub rng_cursor: usize,
    tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(
        path: &Path,
        cfg: &DetectorConfig,
        iteration: u64,
        model: &Model,
        sgd: &Sgd,
        pool: &SamplerPool,
    ) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: String, arr: &ArrayD<f64>, entries: &mut Vec<TensorEntry>| {
            entries.push(TensorEntry {
                name,
                shape: arr.shape().to_vec(),
                offset: payload.len(),
                len: arr.len(),
            });
            payload.extend(arr.iter());
        };
        for (name, t) in model.params.iter() {
            push(name.to_string(), &t.value(), &mut entries);
        }
        for ((name, _), buf) in model.params.iter().zip(sgd.buffers()) {
            push(format!("momentum.{name}"), buf, &mut entries);
        }
        let manifest = Manifest {
            config_hash: cfg.content_hash(),
            iteration,
            rng_streams: pool.streams().to_vec(),
            rng_cursor: pool.cursor(),
            tensors: entries,
        };
        let manifest_bytes =
            serde_json::to_vec(&manifest).map_err(|e| Error::Other(e.to_string()))?;

        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(CKPT_MAGIC).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&CKPT_VERSION.to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&manifest_bytes).map_err(|e| Error::io(&tmp, e))?;
            let mut raw = Vec::with_capacity(payload.len() * 8);
            for v in &payload {
                raw.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&raw).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Loads and verifies the archive against the configuration hash.
    pub fn load(path: &Path, cfg: &DetectorConfig) -> Result<Checkpoint> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        if u32::from_le_bytes(word) != CKPT_VERSION {
            return Err(Error::Checkpoint("unsupported checkpoint version".into()));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
        let mlen = u64::from_le_bytes(len8) as usize;
        let mut manifest_bytes = vec![0u8; mlen];
        f.read_exact(&mut manifest_bytes).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.config_hash != cfg.content_hash() {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {}",
                &manifest.config_hash[..12],
                &cfg.content_hash()[..12]
            )));
        }
        let mut raw = Vec::new();
        f.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        let floats: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let slice = floats
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&e.shape), slice.to_vec())
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
            tensors.push((e.name.clone(), arr));
        }
        Ok(Checkpoint {
            iteration: manifest.iteration,
            config_hash: manifest.config_hash,
            rng_streams: manifest.rng_streams,
            rng_cursor: manifest.rng_cursor,
            tensors,
        })
    }

    /// Copies parameter tensors into a model, failing on missing or misshapen
    /// entries.
    pub fn apply_to_model(&self, model: &Model) -> Result<()> {
        for (name, t) in model.params.iter() {
            let stored = self.tensor(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter {name}"))
            })?;
            if stored.shape() != t.value().shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            t.update_value(|v| *v = stored.clone());
        }
        Ok(())
    }

    fn apply_to_sgd(&self, model: &Model, sgd: &mut Sgd) -> Result<()> {
        let mut buffers = Vec::new();
        for (name, _) in model.params.iter() {
            let stored = self.tensor(&format!("momentum.{name}")).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing momentum for {name}"))
            })?;
            buffers.push(stored.clone());
        }
        sgd.restore_buffers(buffers);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// In-memory training source: unaugmented samples.
pub struct TrainDataset {
    pub samples: Vec<Sample>,
}

impl TrainDataset {
    /// Loads every record's image from the dataset root.
    pub fn load(root: &Path, records: &[AnnotationRecord]) -> Result<Self> {
        let samples = records
            .iter()
            .map(|rec| {
                let image = crate::dataio::load_image(root, rec)?;
                Ok(Sample::new(image, rec.boxes.clone(), rec.attributes.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Other("training dataset is empty".into()));
        }
        Ok(TrainDataset { samples })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

pub struct TrainOutcome {
    pub records: Vec<LogRecord>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Runs (or resumes) training: sample, build targets, forward, loss, SGD
/// step; logs every term each iteration; checkpoints at the configured
/// cadence and at the end. A non-finite loss aborts with a diagnostic dump of
/// the offending batch next to the log.
pub fn train(dataset: &TrainDataset, cfg: &DetectorConfig, out_dir: &Path) -> Result<TrainOutcome> {
    train_until(dataset, cfg, out_dir, None)
}

/// [`train`] with an optional early stop (a checkpoint is written at the stop
/// point), used to exercise interruption and resume.
pub fn train_until(
    dataset: &TrainDataset,
    cfg: &DetectorConfig,
    out_dir: &Path,
    stop_after: Option<u64>,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    let log_path = out_dir.join("train_log.jsonl");

    let model = Model::new(cfg)?;
    let mut sgd = Sgd::new(&model.params, cfg.optim.momentum, cfg.optim.weight_decay);
    let mut pool = SamplerPool::new(cfg.seed.wrapping_add(0x5EED), cfg.optim.workers);
    let mut start_iter = 0;

    let mut log_file = if ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path, cfg)?;
        ckpt.apply_to_model(&model)?;
        ckpt.apply_to_sgd(&model, &mut sgd)?;
        pool.restore(ckpt.rng_streams.clone(), ckpt.rng_cursor);
        start_iter = ckpt.iteration;
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    } else {
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?
    };

    let sched = scaled_schedule(&cfg.optim)?;
    let stop = stop_after.unwrap_or(sched.total).min(sched.total);
    let mut records = Vec::new();
    for iteration in start_iter..stop {
        let lr = lr_at(iteration, &cfg.optim)?;
        let (record, picked) = train_step(dataset, cfg, &model, &mut pool, iteration, lr)?;

        if !record.report.is_finite() {
            let dump = out_dir.join(format!("nan_dump_iter{iteration}.json"));
            let diag = serde_json::json!({
                "iteration": iteration,
                "lr": lr,
                "report": record.report,
                "batch_records": picked,
            });
            std::fs::write(&dump, serde_json::to_string_pretty(&diag).unwrap())
                .map_err(|e| Error::io(&dump, e))?;
            return Err(Error::Training(format!(
                "non-finite loss at iteration {iteration}; batch dumped to {}",
                dump.display()
            )));
        }

        sgd.step(&model.params, lr);

        let line = serde_json::to_string(&record).map_err(|e| Error::Other(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        records.push(record);

        let done = iteration + 1 == stop;
        if done || (iteration + 1) % cfg.optim.checkpoint_every.max(1) == 0 {
            Checkpoint::save(&ckpt_path, cfg, iteration + 1, &model, &sgd, &pool)?;
        }
    }

    Ok(TrainOutcome { records, checkpoint_path: ckpt_path, log_path })
}

/// One optimization step: draws a batch via the worker streams, accumulates
/// the mean loss, and backpropagates. Returns the averaged report and the
/// record indices that formed the batch.
fn train_step(
    dataset: &TrainDataset,
    cfg: &DetectorConfig,
    model: &Model,
    pool: &mut SamplerPool,
    iteration: u64,
    lr: f64,
) -> Result<(LogRecord, Vec<usize>)> {
    let crop = cfg.sampler.crop_size;
    let pyramid = build_anchor_pyramid(crop, cfg)?;
    let batch = cfg.optim.batch_size;
    model.params.zero_grads();

    let mut picked = Vec::with_capacity(batch);
    let mut batch_total: Option<Tensor> = None;
    let mut sum = LossReport {
        total: 0.0,
        cls_first: 0.0,
        cls_second: 0.0,
        reg_first: 0.0,
        reg_second: 0.0,
        seg: 0.0,
        anchor_free: 0.0,
        positives_first: 0,
        positives_second: 0,
    };
    for _ in 0..batch {
        let stream = pool.next_stream();
        let idx = stream.gen_range(0..dataset.samples.len());
        picked.push(idx);
        let (sample, _plan) = augment(&dataset.samples[idx], &cfg.sampler, stream);
        let targets = build_targets(&sample, &pyramid, cfg);
        let input = normalize_image(&sample.image, crop, cfg);
        let heads = model.forward(&input)?;
        let (loss, report) = total_loss(&heads, &targets, &cfg.losses)?;
        let scaled = loss.scale(1.0 / batch as f64);
        batch_total = Some(match batch_total {
            None => scaled,
            Some(acc) => acc.add(&scaled),
        });
        sum.total += report.total;
        sum.cls_first += report.cls_first;
        sum.cls_second += report.cls_second;
        sum.reg_first += report.reg_first;
        sum.reg_second += report.reg_second;
        sum.seg += report.seg;
        sum.anchor_free += report.anchor_free;
        sum.positives_first += report.positives_first;
        sum.positives_second += report.positives_second;
    }
    let total = batch_total.expect("batch_size >= 1");
    total.backward();

    let b = batch as f64;
    let report = LossReport {
        total: sum.total / b,
        cls_first: sum.cls_first / b,
        cls_second: sum.cls_second / b,
        reg_first: sum.reg_first / b,
        reg_second: sum.reg_second / b,
        seg: sum.seg / b,
        anchor_free: sum.anchor_free / b,
        positives_first: sum.positives_first,
        positives_second: sum.positives_second,
    };
    Ok((LogRecord { iteration, lr, report }, picked))
}
