//! Training loop: x₀ regression with condition dropout and AdamW.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::Record;
use crate::denoiser::{condition_tape, denoise_tape, stack, Cond};
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::params::{Bound, Checkpoint, Manifest, Model, ModelConfig, Params};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub cond_dropout: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub val_every: u64,
    pub val_size: usize,
    /// Fraction of `lr` reached at `steps` under cosine decay; 1 keeps it constant.
    pub lr_final_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            steps: 2000,
            cond_dropout: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            val_every: 100,
            val_size: 64,
            lr_final_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the update made at 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let progress = if self.steps == 0 { 1.0 } else { (step as f64 / self.steps as f64).min(1.0) };
        let f = self.lr_final_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::invalid(format!("lr_final_fraction {} outside [0, 1]", self.lr_final_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("moment coefficients must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &Params) -> Self {
        let zeros = |p: &Params| {
            let mut z = Params::new();
            for (k, t) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            z
        };
        AdamW {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &Params, cfg: &TrainConfig, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.get(&name)?.data();
            let m = self.m.get_mut(&name)?;
            let m_new = Tensor::from_fn(m.shape(), |i| cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g[i]);
            *m = m_new;
            let v = self.v.get_mut(&name)?;
            let v_new = Tensor::from_fn(v.shape(), |i| cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
            *v = v_new;
            let (m, v) = (self.m.get(&name)?.data(), self.v.get(&name)?.data());
            let p = params.get_mut(&name)?;
            let updated = Tensor::from_fn(p.shape(), |i| {
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
                p.data()[i] - lr * (step + cfg.weight_decay * p.data()[i])
            });
            *p = updated;
        }
        Ok(())
    }
}

/// Random quantities consumed by one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub indices: Vec<usize>,
    pub ts: Vec<usize>,
    pub eps: Vec<Tensor>,
    pub drop: Vec<bool>,
}

impl StepDraws {
    /// Draws from the `train` sub-stream for `step`.
    pub fn draw(seed: u64, step: u64, n_train: usize, model: &ModelConfig, cfg: &TrainConfig) -> Self {
        let mut r = rng::substream(seed, "train", step);
        let b = cfg.batch_size;
        let indices = (0..b).map(|_| r.random_range(0..n_train)).collect();
        let ts = (0..b).map(|_| r.random_range(1..=model.timesteps)).collect();
        let eps = (0..b)
            .map(|_| rng::normal_tensor(&mut r, &[model.frames, model.motion_dim]))
            .collect();
        let drop = (0..b).map(|_| r.random::<f64>() < cfg.cond_dropout).collect();
        StepDraws {
            indices,
            ts,
            eps,
            drop,
        }
    }
}

/// Mean squared error of the x₀ prediction for a batch, on the tape.
pub fn batch_loss_tape(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    x0s: &[&Tensor],
    conds: &[Cond<'_>],
    ts: &[usize],
    eps: &[Tensor],
) -> Result<Var> {
    let noisy = x0s
        .iter()
        .zip(ts)
        .zip(eps)
        .map(|((x0, &t), e)| forward_noise(x0, t, e, sched))
        .collect::<Result<Vec<_>>>()?;
    let target: Vec<Tensor> = x0s.iter().map(|x| (*x).clone()).collect();
    let x = tape.constant(stack(&noisy)?);
    let y = tape.constant(stack(&target)?);
    let cond = condition_tape(tape, b, cfg, conds, ts)?;
    let out = denoise_tape(tape, b, cfg, x, ts, &cond)?;
    tape.mse(out.x0, y)
}

fn clip_global(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        let names: Vec<String> = grads.names().cloned().collect();
        for n in names {
            let g = grads.get_mut(&n).expect("own name");
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// One optimisation step; returns the batch loss before the update.
pub fn training_step(
    model: &mut Model,
    opt: &mut AdamW,
    sched: &NoiseSchedule,
    batch: &[&Record],
    draws: &StepDraws,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, true);
    let x0s: Vec<&Tensor> = batch.iter().map(|r| &r.frames).collect();
    let conds: Vec<Cond<'_>> = batch
        .iter()
        .zip(&draws.drop)
        .map(|(r, &d)| if d { Cond::Null } else { Cond::Text(r.prompt()) })
        .collect();
    let loss = batch_loss_tape(&mut tape, &b, &model.config, sched, &x0s, &conds, &draws.ts, &draws.eps)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at optimizer step {}", opt.t + 1)));
    }
    tape.backward(loss)?;
    let mut grads = b.grads(&tape);
    clip_global(&mut grads, cfg.grad_clip);
    let lr = cfg.lr_at(opt.t);
    opt.update(&mut model.params, &grads, cfg, lr)?;
    if !model.params.is_finite() {
        return Err(Error::NonFinite(format!("parameters after optimizer step {}", opt.t)));
    }
    Ok(value)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,val_loss\n");
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, val));
    }
    out
}

/// Validation loss with draws fixed by the `val` stream of `seed`.
pub fn validation_loss(model: &Model, sched: &NoiseSchedule, val: &[Record], seed: u64, limit: usize) -> Result<f64> {
    let set = &val[..val.len().min(limit)];
    if set.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let cfg = &model.config;
    let mut r = rng::stream(seed, "val");
    let ts: Vec<usize> = set.iter().map(|_| r.random_range(1..=cfg.timesteps)).collect();
    let eps: Vec<Tensor> = set
        .iter()
        .map(|_| rng::normal_tensor(&mut r, &[cfg.frames, cfg.motion_dim]))
        .collect();
    let mut total = 0.0;
    for start in (0..set.len()).step_by(32) {
        let end = (start + 32).min(set.len());
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, false);
        let x0s: Vec<&Tensor> = set[start..end].iter().map(|r| &r.frames).collect();
        let conds: Vec<Cond<'_>> = set[start..end].iter().map(|r| Cond::Text(r.prompt())).collect();
        let loss = batch_loss_tape(&mut tape, &b, cfg, sched, &x0s, &conds, &ts[start..end], &eps[start..end])?;
        total += tape.value(loss).item() * (end - start) as f64;
    }
    Ok(total / set.len() as f64)
}

/// Owns the model and optimizer across steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    pub step: u64,
    pub log: Vec<LogRow>,
}

impl Trainer {
    /// Fresh model initialised from the training seed.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed)?;
        Trainer::from_model(model, cfg)
    }

    pub fn from_model(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = NoiseSchedule::cosine(model.config.timesteps)?;
        Ok(Trainer {
            opt: AdamW::new(&model.params),
            model,
            cfg,
            sched,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Trains until `self.step == until`, logging every step.
    pub fn run_until(&mut self, until: u64, train: &[Record], val: &[Record]) -> Result<()> {
        if train.is_empty() {
            return Err(Error::invalid("empty training split"));
        }
        while self.step < until {
            let draws = StepDraws::draw(self.cfg.seed, self.step, train.len(), &self.model.config, &self.cfg);
            let batch: Vec<&Record> = draws.indices.iter().map(|&i| &train[i]).collect();
            let loss = training_step(&mut self.model, &mut self.opt, &self.sched, &batch, &draws, &self.cfg)?;
            self.step += 1;
            let val_loss = if !val.is_empty()
                && self.cfg.val_every > 0
                && (self.step.is_multiple_of(self.cfg.val_every) || self.step == self.cfg.steps)
            {
                Some(self.val_loss(val)?)
            } else {
                None
            };
            self.log.push(LogRow {
                step: self.step,
                loss,
                val_loss,
            });
        }
        Ok(())
    }

    pub fn val_loss(&self, val: &[Record]) -> Result<f64> {
        validation_loss(&self.model, &self.sched, val, self.cfg.seed, self.cfg.val_size)
    }

    pub fn checkpoint(&self, echo: serde_json::Value) -> Checkpoint {
        let mut entries = self.model.params.clone();
        for (k, t) in self.opt.m.iter() {
            entries.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in self.opt.v.iter() {
            entries.insert(format!("adam.v.{k}"), t.clone());
        }
        Checkpoint {
            manifest: Manifest {
                arch_hash: self.model.config.arch_hash(),
                model: self.model.config.clone(),
                step: self.step,
                config: echo,
            },
            entries,
        }
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, expected: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        ck.check_arch(expected)?;
        let model = Model::from_checkpoint(ck)?;
        let mut t = Trainer::from_model(model, cfg)?;
        let mut m = Params::new();
        let mut v = Params::new();
        for name in t.model.params.names() {
            m.insert(name.clone(), ck.entries.get(&format!("adam.m.{name}"))?.clone());
            v.insert(name.clone(), ck.entries.get(&format!("adam.v.{name}"))?.clone());
        }
        t.opt = AdamW {
            m,
            v,
            t: ck.manifest.step,
        };
        t.step = ck.manifest.step;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            val_every: 2,
            val_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { cond_dropout: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let corpus = Corpus::generate(0, 40);
        let run = || {
            let mut t = Trainer::new(ModelConfig::default(), small_cfg()).unwrap();
            t.run_until(3, &corpus.train, &corpus.val).unwrap();
            t.log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_vec(vec![1.0, -2.0]));
        let mut g = Params::new();
        g.insert("w", Tensor::from_vec(vec![0.5, -3.0]));
        let cfg = TrainConfig {
            weight_decay: 0.0,
            lr: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&p);
        opt.update(&mut p, &g, &cfg, cfg.lr).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn cosine_learning_rate() {
        let c = TrainConfig { lr: 1.0, steps: 100, lr_final_fraction: 0.1, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0), 1.0);
        assert!((c.lr_at(50) - 0.55).abs() < 1e-12);
        assert!((c.lr_at(100) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(500) - 0.1).abs() < 1e-12);
        let flat = TrainConfig { lr_final_fraction: 1.0, ..c };
        assert_eq!(flat.lr_at(70), 1.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = Params::new();
        g.insert("a", Tensor::from_vec(vec![3.0]));
        g.insert("b", Tensor::from_vec(vec![4.0]));
        assert_eq!(clip_global(&mut g, 1.0), 5.0);
        let n = g.iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_csv_format() {
        let rows = [
            LogRow { step: 1, loss: 0.5, val_loss: None },
            LogRow { step: 2, loss: 0.25, val_loss: Some(0.3) },
        ];
        assert_eq!(log_csv(&rows), "step,loss,val_loss\n1,0.5,\n2,0.25,0.3\n");
    }
}
