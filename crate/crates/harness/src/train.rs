//! Packed flow-matching training loop.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use nit_core::checkpoint;
use nit_core::diffusion::fm_loss_and_grad;
use nit_core::optim::{Adam, AdamConfig};
use nit_core::{NitError, NitParams32, Result};

use crate::data::{make_epoch, Dataset, EpochConfig, TrainBatch};

/// Optimization settings; the architecture lives in `NitConfig`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub tokens_per_step: usize,
    pub lr: f64,
    /// Linear learning-rate ramp over the first steps.
    pub warmup_steps: u64,
    pub seed: u64,
    pub p_mean: f64,
    pub p_std: f64,
    pub max_grad_norm: Option<f64>,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            tokens_per_step: 512,
            lr: 1e-3,
            warmup_steps: 50,
            seed: 0,
            p_mean: 0.0,
            p_std: 1.0,
            max_grad_norm: Some(1.0),
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_step == 0 || !(self.lr > 0.0) || self.log_every == 0 {
            return Err(NitError::Config("tokens_per_step, lr and log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// One optimizer step's bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub waste: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step,loss,waste,tokens";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.4},{}", self.step, self.loss, self.waste, self.tokens)
    }
}

/// Forward, loss, backward and update on one packed batch.
pub fn train_step(params: &mut NitParams32, adam: &mut Adam<f32>, batch: &TrainBatch) -> Result<(f64, f64)> {
    let (pred, cache) = params.forward_cached(&batch.batch)?;
    let (loss, dpred) = fm_loss_and_grad(pred.view(), batch.target.view(), batch.batch.cu_seqlens())?;
    if !loss.is_finite() {
        let labels: Vec<_> = batch.batch.labels.clone();
        return Err(NitError::NonFinite(format!(
            "loss at step {} (times {:?}, labels {labels:?})",
            adam.steps_taken() + 1,
            batch.batch.times
        )));
    }
    let grads = params.backward(&cache, dpred.view())?;
    let norm = adam.step(params, &grads)?;
    Ok((loss, norm))
}

/// Mean loss of `params` over fixed batches, without updating anything.
pub fn evaluate_loss(params: &NitParams32, batches: &[TrainBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0usize;
    for b in batches {
        let pred = params.forward(&b.batch)?;
        let loss = nit_core::diffusion::fm_loss(pred.view(), b.target.view(), b.batch.cu_seqlens())?;
        total += loss * b.batch.num_instances() as f64;
        weight += b.batch.num_instances();
    }
    Ok(total / weight.max(1) as f64)
}

pub struct Trainer {
    pub params: NitParams32,
    pub adam: Adam<f32>,
    pub dataset: Dataset,
    pub config: TrainConfig,
    step: u64,
    epoch: u64,
    queue: VecDeque<TrainBatch>,
}

impl Trainer {
    pub fn new(params: NitParams32, dataset: Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if params.config.token_dim() != dataset.instances[0].tokens.token_dim() {
            return Err(NitError::Config(format!(
                "model token dim {} does not match data token dim {}",
                params.config.token_dim(),
                dataset.instances[0].tokens.token_dim()
            )));
        }
        if params.config.num_classes < dataset.spec.class_count {
            return Err(NitError::Config("model has fewer classes than the data".into()));
        }
        let adam_cfg = AdamConfig {
            lr: config.lr,
            max_grad_norm: config.max_grad_norm,
            ..Default::default()
        };
        let adam = Adam::new(adam_cfg, &params)?;
        Ok(Self {
            params,
            adam,
            dataset,
            config,
            step: 0,
            epoch: 0,
            queue: VecDeque::new(),
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn epoch_config(&self) -> EpochConfig {
        EpochConfig {
            tokens_per_step: self.config.tokens_per_step,
            class_drop_prob: self.params.config.class_drop_prob,
            p_mean: self.config.p_mean,
            p_std: self.config.p_std,
            seed: self.config.seed,
        }
    }

    fn next_batch(&mut self) -> Result<TrainBatch> {
        if self.queue.is_empty() {
            self.queue = make_epoch(&self.dataset, &self.epoch_config(), self.epoch)?.into();
            self.epoch += 1;
        }
        Ok(self.queue.pop_front().expect("epochs are never empty"))
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        self.adam.config.lr = self.config.lr_at(self.step);
        let (loss, grad_norm) = train_step(&mut self.params, &mut self.adam, &batch)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            waste: batch.waste,
            tokens: batch.tokens(),
            grad_norm,
        })
    }

    /// Metadata stored next to the weights so sampling can decode.
    pub fn checkpoint_extra(&self) -> BTreeMap<String, String> {
        let mut kv = self.dataset.spec.codec.to_kv();
        kv.extend(self.dataset.norm.to_kv());
        kv.insert("data.classes".into(), self.dataset.spec.class_count.to_string());
        kv.insert("train.step".into(), self.step.to_string());
        kv
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.checkpoint_extra())
    }

    /// Runs the configured number of steps, writing the CSV log and
    /// checkpoints under `out_dir`. Returns every step record.
    pub fn run(&mut self, out_dir: &Path, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        std::fs::create_dir_all(out_dir)?;
        let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_log.csv"))?);
        writeln!(log, "{LOG_HEADER}")?;
        let mut records = Vec::new();
        while self.step < self.config.steps {
            let rec = self.step()?;
            if rec.step % self.config.log_every == 0 || rec.step == self.config.steps {
                writeln!(log, "{}", rec.csv_line())?;
            }
            if self.config.checkpoint_every > 0 && rec.step % self.config.checkpoint_every == 0 {
                let dir = out_dir.join("checkpoints");
                std::fs::create_dir_all(&dir)?;
                self.save(&dir.join(format!("step_{:06}.nitc", rec.step)))?;
            }
            on_step(&rec);
            records.push(rec);
        }
        log.flush()?;
        self.save(&out_dir.join("model.nitc"))?;
        Ok(records)
    }
}

/// Reads a log written by [`Trainer::run`].
pub fn parse_log(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LOG_HEADER => {}
        other => return Err(NitError::Format(format!("unexpected log header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || NitError::Format(format!("bad log line {l:?}"));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                waste: f[2].parse().map_err(|_| bad())?,
                tokens: f[3].parse().map_err(|_| bad())?,
                grad_norm: f64::NAN,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSpec, Mixture};
    use nit_core::blocks::NitConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(steps: u64) -> Trainer {
        let ds = Dataset::build(DatasetSpec::mixture(Mixture::FixedOnly, 4, 16, 0)).unwrap();
        let mut cfg = NitConfig::tiny(12, 1, 4);
        cfg.hidden_dim = 32;
        cfg.depth = 2;
        cfg.num_heads = 2;
        let params = NitParams32::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tc = TrainConfig {
            steps,
            tokens_per_step: 128,
            lr: 3e-3,
            warmup_steps: 5,
            ..Default::default()
        };
        Trainer::new(params, ds, tc).unwrap()
    }

    #[test]
    fn step_zero_loss_is_target_energy() {
        let t = setup(1);
        let batches = make_epoch(&t.dataset, &t.epoch_config(), 0).unwrap();
        let loss = evaluate_loss(&t.params, &batches).unwrap();
        // zero-initialized output layer predicts v = 0
        let mut want = 0.0;
        let mut n = 0;
        for b in &batches {
            for r in b.batch.layout.segments() {
                let seg = b.target.slice(ndarray::s![r, ..]);
                want += seg.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / seg.len() as f64;
                n += 1;
            }
        }
        assert!((loss - want / n as f64).abs() < 1e-9);
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = setup(12);
        let ra = a.run(dir.path(), |_| {}).unwrap();
        let mut b = setup(12);
        let rb = b.run(&dir.path().join("again"), |_| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        let parsed = parse_log(&log).unwrap();
        assert_eq!(parsed.len(), 12);
        assert_eq!(parsed[11].step, 12);
        assert!(parsed.iter().all(|r| r.tokens <= 128 && (0.0..1.0).contains(&r.waste)));
        let (p, extra) = checkpoint::load::<f32>(&dir.path().join("model.nitc")).unwrap();
        assert_eq!(p, a.params);
        assert_eq!(extra["train.step"], "12");
        assert!(extra.contains_key("latent.scale"));
    }

    #[test]
    fn zero_steps_writes_initial_model_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = setup(0);
        let init = t.params.clone();
        assert!(t.run(dir.path(), |_| {}).unwrap().is_empty());
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.trim(), LOG_HEADER);
        let (p, _) = checkpoint::load::<f32>(&dir.path().join("model.nitc")).unwrap();
        assert_eq!(p, init);
    }

    #[test]
    fn overfits_a_tiny_dataset() {
        let mut t = setup(150);
        let held = make_epoch(&t.dataset, &EpochConfig { seed: 99, ..t.epoch_config() }, 0).unwrap();
        let before = evaluate_loss(&t.params, &held).unwrap();
        for _ in 0..150 {
            t.step().unwrap();
        }
        let after = evaluate_loss(&t.params, &held).unwrap();
        assert!(after < 0.7 * before, "{before} -> {after}");
    }

    #[test]
    fn warmup_ramps_linearly() {
        let c = TrainConfig { lr: 1.0, warmup_steps: 4, ..Default::default() };
        assert_eq!(c.lr_at(0), 0.25);
        assert_eq!(c.lr_at(3), 1.0);
        assert_eq!(c.lr_at(100), 1.0);
    }
}
