//! Noise schedules, forward corruption and deterministic reverse samplers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Discrete noise schedule. `alpha_bar[t]` is indexed by timestep with
/// `alpha_bar[0] = 1`; `beta[s - 1]` is the variance added at step `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine profile with offset 0.008 and β clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let f = |t: usize| {
            let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut beta = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let b = (1.0 - (f(t) / f0) / (f(t - 1) / f0)).clamp(f64::MIN_POSITIVE, MAX_BETA);
            beta.push(b);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
        }
        Ok(NoiseSchedule {
            steps,
            beta,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_t(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// Log signal-to-noise half-ratio λ = log(α/σ); infinite at t = 0.
    fn lambda(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        0.5 * (ab.ln() - (1.0 - ab).ln())
    }

    /// CSV with columns `t,beta,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar\n");
        for t in 1..=self.steps {
            out.push_str(&format!("{t},{:e},{:e}\n", self.beta[t - 1], self.alpha_bar[t]));
        }
        out
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`. `t = 0` returns `x0`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 0)?;
    let ab = sched.alpha_bar[t];
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Noise implied by a clean-sample estimate at step `t`.
pub fn x0_to_eps(x0_hat: &Tensor, x_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 0)?;
    let ab = sched.alpha_bar[t];
    if ab >= 1.0 {
        return Err(Error::invalid(format!("x0_to_eps: alpha_bar at t={t} is 1")));
    }
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(x0_hat, |x, x0| (x - a * x0) / s)
}

/// Clean-sample estimate implied by a noise estimate at step `t >= 1`.
pub fn eps_to_x0(eps_hat: &Tensor, x_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 1)?;
    let ab = sched.alpha_bar[t];
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - s * e) / a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMethod {
    /// Deterministic first-order update.
    #[default]
    Ddim,
    /// Second-order multistep update in data-prediction form.
    #[serde(rename = "dpm2m")]
    DpmSolver2M,
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerMethod::Ddim),
            "dpm2m" => Ok(SamplerMethod::DpmSolver2M),
            _ => Err(Error::invalid(format!("unknown sampler `{s}` (ddim|dpm2m)"))),
        }
    }
}

/// The previous step's state carried by the multistep sampler.
#[derive(Clone, Debug)]
pub struct SamplerHistory {
    pub x0_hat: Tensor,
    pub from_t: usize,
}

/// One reverse step `from_t → to_t`.
///
/// The multistep update uses λ = log(α/σ), h = λ_to − λ_from and, with
/// r = (λ_from − λ_prev)/h, the extrapolated estimate
/// D = (1 + 1/(2r))·x̂₀ − 1/(2r)·x̂₀_prev, then
/// x_to = (σ_to/σ_from)·x_t + α_to·(1 − e^{−h})·D.
/// Without history, or when landing on t = 0, it reduces to the first-order step.
pub fn sampler_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    from_t: usize,
    to_t: usize,
    sched: &NoiseSchedule,
    method: SamplerMethod,
    history: Option<&SamplerHistory>,
) -> Result<Tensor> {
    if from_t <= to_t {
        return Err(Error::invalid(format!(
            "sampler_step: from_t ({from_t}) must exceed to_t ({to_t})"
        )));
    }
    sched.check_t(from_t, 1)?;
    let x0_hat = eps_to_x0(eps_hat, x_t, from_t, sched)?;
    let ab_to = sched.alpha_bar[to_t];
    let (a_to, s_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    match (method, history) {
        (SamplerMethod::DpmSolver2M, Some(prev)) if to_t > 0 && prev.from_t > from_t => {
            let (l_prev, l_from, l_to) = (sched.lambda(prev.from_t), sched.lambda(from_t), sched.lambda(to_t));
            let h = l_to - l_from;
            let r = (l_from - l_prev) / h;
            let c = 1.0 / (2.0 * r);
            let d = x0_hat.zip_map(&prev.x0_hat, |cur, old| (1.0 + c) * cur - c * old)?;
            let s_from = (1.0 - sched.alpha_bar[from_t]).sqrt();
            let k = a_to * -(-h).exp_m1();
            x_t.zip_map(&d, |x, dv| (s_to / s_from) * x + k * dv)
        }
        _ => x0_hat.zip_map(eps_hat, |x0, e| a_to * x0 + s_to * e),
    }
}

/// Ordered timesteps at which the network is evaluated. Each entry steps to
/// the next one, and the last steps to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub method: SamplerMethod,
    pub step_times: Vec<usize>,
}

impl SamplerPlan {
    pub fn new(method: SamplerMethod, step_times: Vec<usize>) -> Result<Self> {
        if step_times.is_empty() {
            return Err(Error::invalid("sampler plan needs at least one step"));
        }
        if step_times.windows(2).any(|w| w[0] <= w[1]) || *step_times.last().unwrap() == 0 {
            return Err(Error::invalid(format!(
                "step times must be strictly decreasing and positive: {step_times:?}"
            )));
        }
        Ok(SamplerPlan { method, step_times })
    }

    /// `steps` evaluation times equally spaced over `[1, T]`, starting at `T`.
    pub fn equispaced(total: usize, steps: usize, method: SamplerMethod) -> Result<Self> {
        if steps < 1 || steps > total {
            return Err(Error::invalid(format!(
                "cannot take {steps} sampling steps from a {total}-step schedule"
            )));
        }
        let times = (0..steps)
            .map(|i| ((total * (steps - i)) as f64 / steps as f64).round() as usize)
            .collect();
        SamplerPlan::new(method, times)
    }

    pub fn len(&self) -> usize {
        self.step_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step_times.is_empty()
    }

    /// `(from_t, to_t)` for every step.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let mut next = self.step_times.iter().skip(1).copied().chain(std::iter::once(0));
        self.step_times.iter().map(|&t| (t, next.next().unwrap())).collect()
    }
}

/// How accumulated noise energy is obtained for [`snr_at`].
#[derive(Clone, Copy, Debug)]
pub enum NoiseModel<'a> {
    /// Constant diffusion coefficient g = σ; energy σ²·t.
    Constant { sigma: f64 },
    /// Discrete schedule read through the variance-exploding bridge (1−ᾱ_t)/ᾱ_t.
    Discrete(&'a NoiseSchedule),
}

impl NoiseModel<'_> {
    pub fn energy(&self, t: f64) -> Result<f64> {
        match *self {
            NoiseModel::Constant { sigma } => {
                if t < 0.0 {
                    return Err(Error::invalid(format!("negative time {t}")));
                }
                Ok(sigma * sigma * t)
            }
            NoiseModel::Discrete(sched) => {
                if t.fract() != 0.0 || t < 0.0 {
                    return Err(Error::invalid(format!("discrete schedule needs an integer step, got {t}")));
                }
                let ab = sched.alpha_bar_at(t as usize)?;
                Ok((1.0 - ab) / ab)
            }
        }
    }
}

/// Signal power over accumulated noise energy at time `t`.
pub fn snr_at(omega_power: f64, t: f64, noise: NoiseModel<'_>) -> Result<f64> {
    let energy = noise.energy(t)?;
    if !(energy > 0.0) {
        return Err(Error::invalid(format!("no accumulated noise energy at t={t}")));
    }
    Ok(omega_power / energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        rng::normal_tensor(&mut rng::stream(seed, "test"), shape)
    }

    #[test]
    fn cosine_schedule_t50() {
        let s = NoiseSchedule::cosine(50).unwrap();
        assert_eq!(s.alpha_bar()[0], 1.0);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar()[50] < 0.01);
        assert!(s.beta().iter().all(|&b| b > 0.0 && b <= 0.999));
    }

    #[test]
    fn cosine_schedule_single_step() {
        let s = NoiseSchedule::cosine(1).unwrap();
        assert_eq!(s.beta().len(), 1);
        assert!(s.beta()[0] > 0.0 && s.beta()[0] < 1.0);
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn cosine_schedule_monotone_for_all_sizes() {
        for steps in 1..=200 {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]), "T={steps}");
            assert!(s.beta().iter().all(|&b| b > 0.0 && b < 1.0), "T={steps}");
        }
    }

    #[test]
    fn schedule_csv_has_header_and_rows() {
        let csv = NoiseSchedule::cosine(5).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha_bar");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let x0 = rand_tensor(1, &[4, 2]);
        let eps = rand_tensor(2, &[4, 2]);
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = Tensor::zeros(&[4, 2]);
        let xt = forward_noise(&zero, 30, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar()[30]).sqrt();
        assert_eq!(xt, eps.map(|e| k * e));
        assert!(matches!(
            forward_noise(&x0, 51, &eps, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(forward_noise(&x0, 3, &Tensor::zeros(&[2, 4]), &s).is_err());
    }

    #[test]
    fn forward_noise_variance_matches_schedule() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let t = 20;
        let x0 = Tensor::full(&[1], 0.7);
        let mut r = rng::stream(3, "mc");
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let e = rng::normal_tensor(&mut r, &[1]);
                forward_noise(&x0, t, &e, &s).unwrap().item()
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let expected = 1.0 - s.alpha_bar()[t];
        assert!((var - expected).abs() / expected < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn x0_to_eps_inverts_forward_noise() {
        let s = NoiseSchedule::cosine(50).unwrap();
        for t in 1..=50 {
            let x0 = rand_tensor(t as u64, &[8, 2]);
            let eps = rand_tensor(100 + t as u64, &[8, 2]);
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let back = x0_to_eps(&x0, &xt, t, &s).unwrap();
            assert!(back.max_abs_diff(&eps) < 1e-12, "t={t}");
        }
        let xt = rand_tensor(9, &[3]);
        let ab = s.alpha_bar()[10];
        let x0_hat = xt.map(|v| v / ab.sqrt());
        let e = x0_to_eps(&x0_hat, &xt, 10, &s).unwrap();
        assert!(e.data().iter().all(|v| v.abs() < 1e-12));
        assert!(x0_to_eps(&x0_hat, &xt, 0, &s).is_err());
    }

    #[test]
    fn terminal_step_returns_x0() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let x0 = rand_tensor(4, &[6, 2]);
        let eps = rand_tensor(5, &[6, 2]);
        let xt = forward_noise(&x0, 7, &eps, &s).unwrap();
        for method in [SamplerMethod::Ddim, SamplerMethod::DpmSolver2M] {
            let out = sampler_step(&xt, &eps, 7, 0, &s, method, None).unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-12);
        }
        assert!(sampler_step(&xt, &eps, 3, 3, &s, SamplerMethod::Ddim, None).is_err());
        assert!(sampler_step(&xt, &eps, 3, 5, &s, SamplerMethod::Ddim, None).is_err());
    }

    fn oracle_rollout(plan: &SamplerPlan, s: &NoiseSchedule) -> f64 {
        let x0 = rand_tensor(11, &[16, 2]);
        let eps = rand_tensor(12, &[16, 2]);
        let mut x = forward_noise(&x0, plan.step_times[0], &eps, s).unwrap();
        let mut hist: Option<SamplerHistory> = None;
        for (from, to) in plan.transitions() {
            // With a fixed true noise every state lies on the same ray, so ε is exact.
            let e = x0_to_eps(&x0, &x, from, s).unwrap();
            let next = sampler_step(&x, &e, from, to, s, plan.method, hist.as_ref()).unwrap();
            hist = Some(SamplerHistory {
                x0_hat: eps_to_x0(&e, &x, from, s).unwrap(),
                from_t: from,
            });
            x = next;
        }
        x.max_abs_diff(&x0)
    }

    #[test]
    fn oracle_denoiser_recovers_x0() {
        let s = NoiseSchedule::cosine(50).unwrap();
        for method in [SamplerMethod::Ddim, SamplerMethod::DpmSolver2M] {
            let full = SamplerPlan::new(method, (1..=50).rev().collect()).unwrap();
            assert!(oracle_rollout(&full, &s) < 1e-10);
            let ten = SamplerPlan::equispaced(50, 10, method).unwrap();
            assert!(oracle_rollout(&ten, &s) < 1e-10);
        }
    }

    #[test]
    fn ten_step_plan_visits_ten_times() {
        let plan = SamplerPlan::equispaced(50, 10, SamplerMethod::Ddim).unwrap();
        assert_eq!(plan.step_times, vec![50, 45, 40, 35, 30, 25, 20, 15, 10, 5]);
        let tr = plan.transitions();
        assert_eq!(tr.len(), 10);
        assert_eq!(tr[0], (50, 45));
        assert_eq!(tr[9], (5, 0));
        assert!(SamplerPlan::new(SamplerMethod::Ddim, vec![5, 5]).is_err());
        assert!(SamplerPlan::equispaced(50, 0, SamplerMethod::Ddim).is_err());
    }

    #[test]
    fn multistep_differs_from_first_order_with_history() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let x = rand_tensor(1, &[4]);
        let e = rand_tensor(2, &[4]);
        let hist = SamplerHistory {
            x0_hat: rand_tensor(3, &[4]),
            from_t: 45,
        };
        let a = sampler_step(&x, &e, 40, 35, &s, SamplerMethod::Ddim, Some(&hist)).unwrap();
        let b = sampler_step(&x, &e, 40, 35, &s, SamplerMethod::DpmSolver2M, Some(&hist)).unwrap();
        let c = sampler_step(&x, &e, 40, 35, &s, SamplerMethod::DpmSolver2M, None).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
        assert_eq!(a, c);
    }

    #[test]
    fn snr_examples() {
        let g = NoiseModel::Constant { sigma: 1.0 };
        assert_eq!(snr_at(4.0, 2.0, g).unwrap(), 2.0);
        assert_eq!(snr_at(0.0, 2.0, g).unwrap(), 0.0);
        let a = snr_at(3.0, 1.5, g).unwrap();
        let b = snr_at(3.0, 3.0, g).unwrap();
        assert!((a / b - 2.0).abs() < 1e-15);
        assert!(snr_at(4.0, 0.0, g).is_err());
        let s = NoiseSchedule::cosine(50).unwrap();
        assert!(snr_at(1.0, 0.0, NoiseModel::Discrete(&s)).is_err());
        let d = snr_at(1.0, 10.0, NoiseModel::Discrete(&s)).unwrap();
        let ab = s.alpha_bar()[10];
        assert!((d - ab / (1.0 - ab)).abs() < 1e-12);
    }

    #[test]
    fn snr_orders_by_signal_power() {
        let s = NoiseSchedule::cosine(50).unwrap();
        for t in 1..=50 {
            let lo = snr_at(5.0, t as f64, NoiseModel::Discrete(&s)).unwrap();
            let hi = snr_at(0.5, t as f64, NoiseModel::Discrete(&s)).unwrap();
            assert!(hi < lo);
        }
    }
}
