//! Classifier-free guidance with a cosine scale schedule and late-stage
//! conditional-branch skipping.

use std::f64::consts::PI;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::Prompt;
use crate::denoiser::{denoise_batch, Cond};
use crate::diffusion::{eps_to_x0, sampler_step, x0_to_eps, NoiseSchedule, SamplerHistory, SamplerPlan};
use crate::error::{Error, Result};
use crate::params::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Static,
    #[default]
    Dynamic,
}

impl FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(GuidanceMode::Static),
            "dynamic" => Ok(GuidanceMode::Dynamic),
            _ => Err(Error::invalid(format!("unknown guidance mode '{s}' (static|dynamic)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidancePolicy {
    pub omega_min: f64,
    pub omega_max: f64,
    pub lambda: f64,
    /// Elapsed fraction of denoising from which the conditional branch is dropped.
    pub skip_fraction: f64,
    pub mode: GuidanceMode,
    /// Skip the early steps `t > skip_fraction·T` instead of the late ones.
    pub literal_skip: bool,
}

impl Default for GuidancePolicy {
    fn default() -> Self {
        GuidancePolicy {
            omega_min: 1.5,
            omega_max: 3.0,
            lambda: 1.5,
            skip_fraction: 0.5,
            mode: GuidanceMode::Dynamic,
            literal_skip: false,
        }
    }
}

impl GuidancePolicy {
    /// Constant scale `omega`, conditional branch at every step.
    pub fn constant(omega: f64) -> Self {
        GuidancePolicy {
            omega_min: omega,
            omega_max: omega,
            mode: GuidanceMode::Static,
            skip_fraction: 1.0,
            ..GuidancePolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_min >= 0.0 && self.omega_max >= self.omega_min) {
            return Err(Error::invalid(format!(
                "need omega_max >= omega_min >= 0, got omega_min={} omega_max={}",
                self.omega_min, self.omega_max
            )));
        }
        if !(0.0..=1.0).contains(&self.skip_fraction) {
            return Err(Error::invalid(format!("skip_fraction {} outside [0, 1]", self.skip_fraction)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Whether the step starting at `t` evaluates only the unconditional branch.
    pub fn skips(&self, t: usize, total: usize) -> bool {
        if self.literal_skip {
            t as f64 > self.skip_fraction * total as f64
        } else {
            let elapsed = (total - t.min(total)) as f64 / total as f64;
            elapsed >= self.skip_fraction && self.skip_fraction < 1.0
        }
    }
}

/// Guidance scale at step `t` of `total`.
pub fn omega_at(t: usize, total: usize, policy: &GuidancePolicy) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::TimestepOutOfRange { t, min: 0, max: total });
    }
    if policy.mode == GuidanceMode::Static {
        return Ok(policy.omega_max);
    }
    let phase = policy.lambda * (total - t) as f64 / total as f64 * PI;
    let w = policy.omega_min + 0.5 * (1.0 + phase.cos()) * (policy.omega_max - policy.omega_min);
    Ok(w.max(0.0))
}

/// `uncond + omega·(cond − uncond)`.
pub fn guided_eps(eps_cond: &Tensor, eps_uncond: &Tensor, omega: f64) -> Result<Tensor> {
    eps_cond.zip_map(eps_uncond, |c, u| u + omega * (c - u))
}

/// Network evaluations spent on a trajectory or a batch of them.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepCost {
    pub cond: usize,
    pub uncond: usize,
    pub wall: Duration,
}

impl StepCost {
    pub fn total(&self) -> usize {
        self.cond + self.uncond
    }

    pub fn add(&mut self, other: &StepCost) {
        self.cond += other.cond;
        self.uncond += other.uncond;
        self.wall += other.wall;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleOptions {
    pub record_x0: bool,
    pub record_attention: bool,
}

/// Conditional-branch cross-attention captured at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAttention {
    pub t: usize,
    /// Per block `[N × M]`.
    pub blocks: Vec<Tensor>,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub motion: Tensor,
    pub cost: StepCost,
    /// Guided x̂₀ after each step.
    pub x0_hats: Vec<Tensor>,
    /// `None` where the conditional branch was skipped.
    pub attention: Vec<Option<StepAttention>>,
}

/// Guided reverse process for one prompt.
pub fn guided_sample(
    x_t: &Tensor,
    prompt: &Prompt,
    model: &Model,
    plan: &SamplerPlan,
    policy: &GuidancePolicy,
) -> Result<(Tensor, StepCost)> {
    let mut out = guided_sample_batch(std::slice::from_ref(x_t), &[prompt], model, plan, policy, SampleOptions::default())?;
    let tr = out.remove(0);
    Ok((tr.motion, tr.cost))
}

/// Guided reverse process for several prompts sharing one plan. Each
/// trajectory's `wall` is the batch time split evenly.
pub fn guided_sample_batch(
    starts: &[Tensor],
    prompts: &[&Prompt],
    model: &Model,
    plan: &SamplerPlan,
    policy: &GuidancePolicy,
    opts: SampleOptions,
) -> Result<Vec<Trajectory>> {
    policy.validate()?;
    if starts.len() != prompts.len() || starts.is_empty() {
        return Err(Error::invalid(format!(
            "{} starting states for {} prompts",
            starts.len(),
            prompts.len()
        )));
    }
    let total = model.config.timesteps;
    if plan.step_times[0] > total {
        return Err(Error::TimestepOutOfRange {
            t: plan.step_times[0],
            min: 1,
            max: total,
        });
    }
    let sched = NoiseSchedule::cosine(total)?;
    let b = starts.len();
    let began = Instant::now();
    let mut xs = starts.to_vec();
    let mut history: Vec<Option<SamplerHistory>> = vec![None; b];
    let mut trajs: Vec<Trajectory> = (0..b)
        .map(|_| Trajectory {
            motion: Tensor::zeros(&[0]),
            cost: StepCost::default(),
            x0_hats: Vec::new(),
            attention: Vec::new(),
        })
        .collect();
    let null = vec![Cond::Null; b];
    let text: Vec<Cond<'_>> = prompts.iter().map(|p| Cond::Text(p)).collect();

    for (step, (from_t, to_t)) in plan.transitions().into_iter().enumerate() {
        let ts = vec![from_t; b];
        let uncond = denoise_batch(&xs, &ts, &null, model)?;
        let skip = policy.skips(from_t, total);
        let cond = if skip { None } else { Some(denoise_batch(&xs, &ts, &text, model)?) };
        let omega = omega_at(from_t, total, policy)?;
        for i in 0..b {
            let tr = &mut trajs[i];
            tr.cost.uncond += 1;
            let e_u = x0_to_eps(&uncond[i].x0, &xs[i], from_t, &sched)?;
            let eps = match &cond {
                None => {
                    if opts.record_attention {
                        tr.attention.push(None);
                    }
                    e_u
                }
                Some(c) => {
                    tr.cost.cond += 1;
                    if opts.record_attention {
                        tr.attention.push(Some(StepAttention {
                            t: from_t,
                            blocks: c[i].cross_attn.clone(),
                            valid: c[i].valid.clone(),
                        }));
                    }
                    let e_c = x0_to_eps(&c[i].x0, &xs[i], from_t, &sched)?;
                    guided_eps(&e_c, &e_u, omega)?
                }
            };
            let x0_hat = eps_to_x0(&eps, &xs[i], from_t, &sched)?;
            let next = sampler_step(&xs[i], &eps, from_t, to_t, &sched, plan.method, history[i].as_ref())?;
            if !next.is_finite() {
                return Err(Error::NonFinite(format!(
                    "sampling state at step {step} (t={from_t}) of trajectory {i}"
                )));
            }
            if opts.record_x0 {
                tr.x0_hats.push(x0_hat.clone());
            }
            history[i] = Some(SamplerHistory { x0_hat, from_t });
            xs[i] = next;
        }
    }
    let per = began.elapsed() / b as u32;
    for (tr, x) in trajs.iter_mut().zip(xs) {
        tr.motion = x;
        tr.cost.wall = per;
    }
    Ok(trajs)
}

/// Deterministic unguided sampling with only the null condition.
pub fn unconditional_sample(start: &Tensor, model: &Model, plan: &SamplerPlan) -> Result<Tensor> {
    let sched = NoiseSchedule::cosine(model.config.timesteps)?;
    let mut x = start.clone();
    let mut history: Option<SamplerHistory> = None;
    for (from_t, to_t) in plan.transitions() {
        let d = denoise_batch(std::slice::from_ref(&x), &[from_t], &[Cond::Null], model)?.remove(0);
        let eps = x0_to_eps(&d.x0, &x, from_t, &sched)?;
        let x0_hat = eps_to_x0(&eps, &x, from_t, &sched)?;
        let next = sampler_step(&x, &eps, from_t, to_t, &sched, plan.method, history.as_ref())?;
        history = Some(SamplerHistory { x0_hat, from_t });
        x = next;
    }
    Ok(x)
}

/// Validation metrics for one guidance setting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMetrics {
    pub top1: f64,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub omega_min: f64,
    pub omega_max: f64,
    /// Mean over successful repetitions.
    pub metrics: Option<CellMetrics>,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: Option<usize>,
    pub omega_mins: Vec<f64>,
    pub omega_maxs: Vec<f64>,
}

/// Evaluates every `(omega_min, omega_max)` pair `reps` times and picks the
/// highest mean top-1, preferring lower FID and then earlier cells on ties.
pub fn grid_search<F>(
    base: &GuidancePolicy,
    omega_mins: &[f64],
    omega_maxs: &[f64],
    reps: usize,
    mut metric: F,
) -> Result<GridResult>
where
    F: FnMut(&GuidancePolicy, usize) -> Result<CellMetrics>,
{
    if omega_mins.is_empty() || omega_maxs.is_empty() || reps == 0 {
        return Err(Error::invalid("grid search needs a nonempty grid and at least one repetition"));
    }
    let mut cells = Vec::new();
    for &lo in omega_mins {
        for &hi in omega_maxs {
            let policy = GuidancePolicy {
                omega_min: lo,
                omega_max: hi,
                ..base.clone()
            };
            let mut errors = Vec::new();
            let mut sum = CellMetrics { top1: 0.0, fid: 0.0 };
            let mut ok = 0usize;
            if let Err(e) = policy.validate() {
                errors.push(e.to_string());
            } else {
                for r in 0..reps {
                    match metric(&policy, r) {
                        Ok(m) => {
                            sum.top1 += m.top1;
                            sum.fid += m.fid;
                            ok += 1;
                        }
                        Err(e) => errors.push(format!("rep {r}: {e}")),
                    }
                }
            }
            let metrics = (ok > 0).then(|| CellMetrics {
                top1: sum.top1 / ok as f64,
                fid: sum.fid / ok as f64,
            });
            cells.push(GridCell {
                omega_min: lo,
                omega_max: hi,
                metrics,
                errors,
            });
        }
    }
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        let Some(m) = c.metrics else { continue };
        let better = match best.and_then(|j| cells[j].metrics) {
            None => true,
            Some(b) => m.top1 > b.top1 || (m.top1 == b.top1 && m.fid < b.fid),
        };
        if better {
            best = Some(i);
        }
    }
    Ok(GridResult {
        cells,
        best,
        omega_mins: omega_mins.to_vec(),
        omega_maxs: omega_maxs.to_vec(),
    })
}

impl GridResult {
    /// One row per cell.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("omega_min,omega_max,top1,fid,best,errors\n");
        for (i, c) in self.cells.iter().enumerate() {
            let (t, f) = c.metrics.map(|m| (m.top1.to_string(), m.fid.to_string())).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{t},{f},{},{}\n",
                c.omega_min,
                c.omega_max,
                self.best == Some(i),
                c.errors.len()
            ));
        }
        out
    }

    /// Rows are `omega_min`, columns `omega_max`, cells `top1/fid`.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("omega_min\\omega_max");
        for hi in &self.omega_maxs {
            out.push_str(&format!(",{hi}"));
        }
        out.push('\n');
        for (r, lo) in self.omega_mins.iter().enumerate() {
            out.push_str(&lo.to_string());
            for c in 0..self.omega_maxs.len() {
                let cell = &self.cells[r * self.omega_maxs.len() + c];
                match cell.metrics {
                    Some(m) => out.push_str(&format!(",{:.4}/{:.4}", m.top1, m.fid)),
                    None => out.push_str(",error"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SamplerMethod;
    use crate::params::ModelConfig;
    use crate::rng;

    #[test]
    fn omega_golden_values() {
        let p = GuidancePolicy::default();
        assert_eq!(omega_at(50, 50, &p).unwrap(), 3.0);
        assert_eq!(omega_at(10, 30, &p).unwrap(), 1.5);
        assert!((omega_at(0, 50, &p).unwrap() - 2.25).abs() < 1e-12);
        assert!(omega_at(51, 50, &p).is_err());
    }

    #[test]
    fn static_mode_is_constant() {
        let p = GuidancePolicy {
            mode: GuidanceMode::Static,
            ..GuidancePolicy::default()
        };
        assert!((0..=50).all(|t| omega_at(t, 50, &p).unwrap() == 3.0));
    }

    #[test]
    fn guided_eps_examples() {
        let c = Tensor::from_vec(vec![0.3]);
        let u = Tensor::from_vec(vec![0.1]);
        assert_eq!(guided_eps(&c, &u, 1.0).unwrap(), c);
        assert_eq!(guided_eps(&c, &u, 0.0).unwrap(), u);
        assert!((guided_eps(&c, &u, 2.0).unwrap().item() - 0.5).abs() < 1e-15);
        assert!(guided_eps(&c, &Tensor::from_vec(vec![0.0, 1.0]), 1.0).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(GuidancePolicy { omega_min: 3.0, omega_max: 1.0, ..Default::default() }.validate().is_err());
        assert!(GuidancePolicy { skip_fraction: 1.2, ..Default::default() }.validate().is_err());
        assert!(GuidancePolicy { lambda: 0.0, ..Default::default() }.validate().is_err());
    }

    fn evals(policy: &GuidancePolicy) -> StepCost {
        let mut cfg = ModelConfig::miniature();
        cfg.timesteps = 50;
        let m = Model::new(cfg, 0).unwrap();
        let plan = SamplerPlan::equispaced(50, 10, SamplerMethod::Ddim).unwrap();
        let x = rng::normal_tensor(&mut rng::stream(0, "x"), &[4, 2]);
        let p = Prompt::parse("sine left").unwrap();
        guided_sample(&x, &p, &m, &plan, policy).unwrap().1
    }

    #[test]
    fn skip_counts() {
        let c = evals(&GuidancePolicy::default());
        assert_eq!((c.cond, c.uncond, c.total()), (5, 10, 15));
        let c = evals(&GuidancePolicy { skip_fraction: 1.0, ..Default::default() });
        assert_eq!((c.cond, c.uncond), (10, 10));
        let c = evals(&GuidancePolicy { literal_skip: true, ..Default::default() });
        assert_eq!((c.cond, c.uncond), (5, 10));
    }

    #[test]
    fn zero_guidance_is_unconditional() {
        let mut cfg = ModelConfig::miniature();
        cfg.timesteps = 20;
        let m = Model::new(cfg, 2).unwrap();
        let plan = SamplerPlan::equispaced(20, 5, SamplerMethod::DpmSolver2M).unwrap();
        let x = rng::normal_tensor(&mut rng::stream(4, "x"), &[4, 2]);
        let p = Prompt::parse("arc right").unwrap();
        let pol = GuidancePolicy { omega_min: 0.0, omega_max: 0.0, skip_fraction: 1.0, ..Default::default() };
        let (guided, _) = guided_sample(&x, &p, &m, &plan, &pol).unwrap();
        assert_eq!(guided, unconditional_sample(&x, &m, &plan).unwrap());
    }

    #[test]
    fn grid_picks_best_and_records_failures() {
        let one = grid_search(&GuidancePolicy::default(), &[1.5], &[3.0], 2, |_, _| {
            Ok(CellMetrics { top1: 0.4, fid: 1.0 })
        })
        .unwrap();
        assert_eq!(one.best, Some(0));

        let g = grid_search(&GuidancePolicy::default(), &[1.0, 1.5], &[3.0], 3, |p, _| {
            if p.omega_min == 1.0 {
                Ok(CellMetrics { top1: 0.3, fid: 2.0 })
            } else {
                Ok(CellMetrics { top1: 0.5, fid: 1.0 })
            }
        })
        .unwrap();
        assert_eq!(g.best, Some(1));

        let g = grid_search(&GuidancePolicy::default(), &[1.0, 4.0], &[3.0], 1, |p, _| {
            if p.omega_min == 1.0 {
                Err(Error::invalid("boom"))
            } else {
                Ok(CellMetrics { top1: 0.1, fid: 1.0 })
            }
        })
        .unwrap();
        assert!(g.best.is_none());
        assert_eq!(g.cells.len(), 2);
        assert!(g.table_csv().contains("error"));
    }
}
