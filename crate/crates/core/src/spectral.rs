//! Spectral checks of the forward process: power spectra, frequency-wise
//! SNR crossing times, low/high band dependency and band recovery.
//!
//! DFT convention: `X_k = Σ_n x_n e^{−2πikn/N}` and power `P_k = |X_k|²/N`,
//! so `Σ_k P_k = ‖x‖²` and white noise of variance `v` has flat power `v`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Power per DFT bin; bin `k` has signed frequency `k` or `k − N` cycles per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub power: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    pub fn frequency(&self, k: usize) -> i64 {
        let n = self.power.len() as i64;
        let k = k as i64;
        if 2 * k <= n { k } else { k - n }
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }
}

/// Reusable power-spectrum estimator for one length.
pub struct PsdPlan {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    n: usize,
}

impl PsdPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("psd needs at least 2 samples, got {n}")));
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(PsdPlan {
            fft,
            buf: vec![Complex::new(0.0, 0.0); n],
            n,
        })
    }

    /// Adds `|X_k|²/N` of `x` into `acc`.
    pub fn accumulate(&mut self, x: &[f64], acc: &mut [f64]) -> Result<()> {
        if x.len() != self.n || acc.len() != self.n {
            return Err(Error::ShapeMismatch {
                op: "psd",
                left: vec![self.n],
                right: vec![x.len()],
            });
        }
        for (b, &v) in self.buf.iter_mut().zip(x) {
            *b = Complex::new(v, 0.0);
        }
        self.fft.process(&mut self.buf);
        let inv = 1.0 / self.n as f64;
        for (a, c) in acc.iter_mut().zip(&self.buf) {
            *a += c.norm_sqr() * inv;
        }
        Ok(())
    }

    pub fn psd(&mut self, x: &[f64]) -> Result<Spectrum> {
        let mut power = vec![0.0; self.n];
        self.accumulate(x, &mut power)?;
        Ok(Spectrum { power })
    }
}

pub fn psd(signal: &[f64]) -> Result<Spectrum> {
    if signal.is_empty() {
        return Err(Error::invalid("psd of an empty signal"));
    }
    PsdPlan::new(signal.len())?.psd(signal)
}

/// One row of a bin-wise comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct BinRow {
    pub bin: usize,
    pub analytic: f64,
    pub empirical: f64,
    pub rel_err: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b { 0.0 } else { (b - a).abs() / a.abs() }
}

pub fn bins_csv(rows: &[BinRow]) -> String {
    let mut out = String::from("bin,analytic,empirical,rel_err\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.bin, r.analytic, r.empirical, r.rel_err));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsdReport {
    pub rows: Vec<BinRow>,
    pub max_rel_err: f64,
}

impl PsdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Monte-Carlo mean spectrum of `m0 + σ√t·z` against `|m̂₀|² + σ²t`.
pub fn verify_psd_theorem(m0: &[f64], sigma: f64, t: f64, n_draws: usize, seed: u64) -> Result<PsdReport> {
    if n_draws < 100 {
        return Err(Error::invalid(format!("need at least 100 draws, got {n_draws}")));
    }
    if !(sigma >= 0.0 && t >= 0.0) {
        return Err(Error::invalid("sigma and t must be nonnegative"));
    }
    let n = m0.len();
    let mut plan = PsdPlan::new(n)?;
    let signal = plan.psd(m0)?;
    let floor = sigma * sigma * t;
    let scale = sigma * t.sqrt();
    let mut acc = vec![0.0; n];
    let mut r = rng::stream(seed, "psd-theorem");
    let mut x = vec![0.0; n];
    for _ in 0..n_draws {
        for (xi, &m) in x.iter_mut().zip(m0) {
            *xi = m + scale * rng::normal(&mut r);
        }
        plan.accumulate(&x, &mut acc)?;
    }
    let rows: Vec<BinRow> = (0..n)
        .map(|k| {
            let analytic = signal.power[k] + floor;
            let empirical = acc[k] / n_draws as f64;
            BinRow {
                bin: k,
                analytic,
                empirical,
                rel_err: rel(analytic, empirical),
            }
        })
        .collect();
    let max_rel_err = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(PsdReport { rows, max_rel_err })
}

/// Power-law spectrum `K|ω|^{−α}` noised with a constant coefficient `σ`, SNR threshold `γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralLaw {
    pub k: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl SpectralLaw {
    pub fn validate(&self) -> Result<()> {
        if [self.k, self.alpha, self.sigma, self.gamma].iter().all(|v| *v > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("spectral law parameters must be positive: {self:?}")))
        }
    }

    pub fn power(&self, omega: f64) -> f64 {
        self.k * omega.abs().powf(-self.alpha)
    }

    pub fn snr(&self, omega: f64, t: f64) -> f64 {
        self.power(omega) / (self.sigma * self.sigma * t)
    }
}

/// `t_γ(ω) = K/(σ²γ)·|ω|^{−α}`.
pub fn crossing_time(omega: f64, law: &SpectralLaw) -> Result<f64> {
    law.validate()?;
    if omega == 0.0 || !omega.is_finite() {
        return Err(Error::invalid(format!("crossing time undefined at omega={omega}")));
    }
    Ok(law.k / (law.sigma * law.sigma * law.gamma) * omega.abs().powf(-law.alpha))
}

/// Signal of length `n` whose power at bins `1..n/2` follows the law, with random phases.
pub fn power_law_signal(law: &SpectralLaw, n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng as _;
    let mut r = rng::stream(seed, "power-law");
    let mut x = vec![0.0; n];
    for k in 1..n.div_ceil(2) {
        let amp = (4.0 * law.power(k as f64) / n as f64).sqrt();
        let phase = r.random::<f64>() * std::f64::consts::TAU;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += amp * (std::f64::consts::TAU * (k * i) as f64 / n as f64 + phase).cos();
        }
    }
    x
}

/// Geometric time grid `t_min·r^i` up to `t_max`.
pub fn geometric_grid(t_min: f64, t_max: f64, ratio: f64) -> Result<Vec<f64>> {
    if !(t_min > 0.0 && t_max > t_min && ratio > 1.0) {
        return Err(Error::invalid("geometric grid needs 0 < t_min < t_max and ratio > 1"));
    }
    let mut g = vec![t_min];
    while *g.last().unwrap() < t_max {
        let next = g.last().unwrap() * ratio;
        g.push(next);
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossingReport {
    /// Measured crossing per tested bin; `None` if the grid never crossed.
    pub rows: Vec<BinRow>,
    pub monotone: bool,
    /// Set when the grid is too coarse or too short to resolve a crossing.
    pub inconclusive: Vec<String>,
}

impl CrossingReport {
    /// Every row in `bins` is within `tol`, the order is monotone and nothing is inconclusive.
    pub fn passed(&self, bins: &[usize], tol: f64) -> bool {
        self.monotone
            && self.inconclusive.is_empty()
            && self.rows.iter().filter(|r| bins.contains(&r.bin)).all(|r| r.rel_err <= tol)
    }
}

/// Noises a power-law signal along Brownian paths on `grid` and records, per
/// bin, the first grid time at which the empirical SNR drops to `γ`.
pub fn verify_crossing_empirically(
    law: &SpectralLaw,
    n: usize,
    bins: &[usize],
    grid: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<CrossingReport> {
    law.validate()?;
    if let Some(&b) = bins.iter().find(|&&b| b == 0 || 2 * b >= n) {
        return Err(Error::invalid(format!("bin {b} outside 1..{}", n / 2)));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] <= 0.0 {
        return Err(Error::invalid("time grid must be positive and increasing"));
    }
    let m0 = power_law_signal(law, n, seed);
    let mut plan = PsdPlan::new(n)?;
    let signal = plan.psd(&m0)?;
    let mut acc = vec![vec![0.0; n]; grid.len()];
    let mut r: Rng = rng::stream(seed, "crossing");
    let mut w = vec![0.0; n];
    let mut x = vec![0.0; n];
    for _ in 0..n_draws {
        w.iter_mut().for_each(|v| *v = 0.0);
        let mut prev = 0.0;
        for (gi, &t) in grid.iter().enumerate() {
            let step = law.sigma * (t - prev).sqrt();
            prev = t;
            for ((wi, xi), &m) in w.iter_mut().zip(x.iter_mut()).zip(&m0) {
                *wi += step * rng::normal(&mut r);
                *xi = m + *wi;
            }
            plan.accumulate(&x, &mut acc[gi])?;
        }
    }
    let mut rows = Vec::new();
    let mut inconclusive = Vec::new();
    let ratio_max = grid.windows(2).map(|w| w[1] / w[0]).fold(1.0, f64::max);
    for &b in bins {
        let s = signal.power[b];
        let analytic = crossing_time(b as f64, law)?;
        let measured = grid.iter().zip(&acc).find_map(|(&t, a)| {
            let noise = a[b] / n_draws as f64 - s;
            (noise > 0.0 && s / noise <= law.gamma).then_some(t)
        });
        match measured {
            Some(t) => {
                if t == grid[0] && analytic < grid[0] / ratio_max {
                    inconclusive.push(format!("bin {b}: crossing precedes the grid"));
                }
                rows.push(BinRow {
                    bin: b,
                    analytic,
                    empirical: t,
                    rel_err: rel(analytic, t),
                });
            }
            None => {
                inconclusive.push(format!("bin {b}: no crossing before t={}", grid[grid.len() - 1]));
                rows.push(BinRow {
                    bin: b,
                    analytic,
                    empirical: f64::NAN,
                    rel_err: f64::INFINITY,
                });
            }
        }
    }
    let mut order: Vec<&BinRow> = rows.iter().collect();
    order.sort_by_key(|r| r.bin);
    let monotone = order.windows(2).all(|w| w[0].empirical >= w[1].empirical);
    Ok(CrossingReport {
        rows,
        monotone,
        inconclusive,
    })
}

/// Correlated linear-Gaussian toy: `L ~ N(0,1)`, `H = ρL + √(1−ρ²)·U`, and
/// the noisy observation `m_t = (L + s·n₁, H + s·n₂)` with `s = σ√t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DependencyToy {
    pub rho: f64,
    pub sigma: f64,
    pub t: f64,
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for DependencyToy {
    fn default() -> Self {
        DependencyToy {
            rho: 0.8,
            sigma: 1.0,
            t: 1.0,
            n_draws: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DependencyReport {
    /// Residual variance of H given the noisy observation.
    pub var_given_obs: f64,
    /// Residual variance of H given the observation and L.
    pub var_given_obs_low: f64,
    pub margin: f64,
    pub std_err: f64,
    pub regularized: bool,
}

impl DependencyReport {
    pub fn z(&self) -> f64 {
        if self.std_err > 0.0 { self.margin / self.std_err } else { 0.0 }
    }
}

/// Least squares with intercept fitted on `fit` rows, residuals on `eval` rows.
fn cross_residuals(xs: &[Vec<f64>], y: &[f64], fit: &[usize], eval: &[usize], flag: &mut bool) -> Vec<f64> {
    let p = xs[0].len() + 1;
    let design = |i: usize| std::iter::once(1.0).chain(xs[i].iter().copied());
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut aty = DVector::<f64>::zeros(p);
    for &i in fit {
        let row: Vec<f64> = design(i).collect();
        for a in 0..p {
            aty[a] += row[a] * y[i];
            for b in 0..p {
                ata[(a, b)] += row[a] * row[b];
            }
        }
    }
    let beta = match ata.clone().cholesky() {
        Some(c) => c.solve(&aty),
        None => {
            *flag = true;
            let ridge = 1e-10 * (ata.trace() / p as f64).max(1e-300);
            let reg = ata + DMatrix::identity(p, p) * ridge;
            reg.cholesky().map(|c| c.solve(&aty)).unwrap_or_else(|| DVector::zeros(p))
        }
    };
    eval.iter()
        .map(|&i| y[i] - design(i).zip(beta.iter()).map(|(x, b)| x * b).sum::<f64>())
        .collect()
}

/// Estimates both conditional variances by two-fold cross-fitted regression residuals.
pub fn verify_low_high_dependency(toy: &DependencyToy) -> Result<DependencyReport> {
    if toy.n_draws < 1000 {
        return Err(Error::invalid(format!("need at least 1000 draws, got {}", toy.n_draws)));
    }
    if !(-1.0..=1.0).contains(&toy.rho) || toy.sigma < 0.0 || toy.t < 0.0 {
        return Err(Error::invalid("rho must lie in [-1, 1]; sigma and t nonnegative"));
    }
    let mut r = rng::stream(toy.seed, "dependency");
    let s = toy.sigma * toy.t.sqrt();
    let c = (1.0 - toy.rho * toy.rho).sqrt();
    let n = toy.n_draws;
    let (mut obs, mut obs_low, mut h) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let l = rng::normal(&mut r);
        let hi = toy.rho * l + c * rng::normal(&mut r);
        let (yl, yh) = (l + s * rng::normal(&mut r), hi + s * rng::normal(&mut r));
        obs.push(vec![yl, yh]);
        obs_low.push(vec![yl, yh, l]);
        h.push(hi);
    }
    let half: Vec<usize> = (0..n / 2).collect();
    let rest: Vec<usize> = (n / 2..n).collect();
    let mut flag = false;
    let mut d = Vec::with_capacity(n);
    let (mut v1, mut v2) = (0.0, 0.0);
    for (fit, eval) in [(&half, &rest), (&rest, &half)] {
        let r1 = cross_residuals(&obs, &h, fit, eval, &mut flag);
        let r2 = cross_residuals(&obs_low, &h, fit, eval, &mut flag);
        for (a, b) in r1.iter().zip(&r2) {
            v1 += a * a;
            v2 += b * b;
            d.push(a * a - b * b);
        }
    }
    let nf = n as f64;
    let margin = d.iter().sum::<f64>() / nf;
    let var_d = d.iter().map(|x| (x - margin).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(DependencyReport {
        var_given_obs: v1 / nf,
        var_given_obs_low: v2 / nf,
        margin,
        std_err: (var_d / nf).sqrt(),
        regularized: flag,
    })
}

/// Disjoint low and high DFT bin sets with every high bin above every low bin.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSplit {
    pub low: Vec<usize>,
    pub high: Vec<usize>,
}

impl Default for BandSplit {
    fn default() -> Self {
        BandSplit {
            low: (0..=4).collect(),
            high: (8..=31).collect(),
        }
    }
}

impl BandSplit {
    pub fn new(low: Vec<usize>, high: Vec<usize>) -> Result<Self> {
        if low.is_empty() || high.is_empty() {
            return Err(Error::invalid("bands must be nonempty"));
        }
        if high.iter().min() <= low.iter().max() {
            return Err(Error::invalid("every high bin must exceed every low bin"));
        }
        Ok(BandSplit { low, high })
    }

    /// Low and high band energy of a `[N × d]` motion, summed over channels.
    pub fn energies(&self, x: &Tensor) -> Result<(f64, f64)> {
        let (n, d) = x.dims2()?;
        if let Some(&b) = self.high.iter().max().filter(|&&b| b >= n) {
            return Err(Error::invalid(format!("bin {b} beyond sequence length {n}")));
        }
        let mut plan = PsdPlan::new(n)?;
        let mut power = vec![0.0; n];
        let mut col = vec![0.0; n];
        for c in 0..d {
            for (i, v) in col.iter_mut().enumerate() {
                *v = x.data()[i * d + c];
            }
            plan.accumulate(&col, &mut power)?;
        }
        let sum = |bins: &[usize]| bins.iter().map(|&k| power[k]).sum::<f64>();
        Ok((sum(&self.low), sum(&self.high)))
    }
}

/// Per-step relative band-energy error against the final state.
#[derive(Clone, Debug, PartialEq)]
pub struct BandCurves {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    /// 1-based step from which the error stays within the tube; `None` if excluded.
    pub low_converged: Option<usize>,
    pub high_converged: Option<usize>,
    pub flags: Vec<String>,
}

fn entry_step(curve: &[f64], delta: f64) -> Option<usize> {
    let mut step = curve.len();
    while step > 0 && curve[step - 1] <= delta {
        step -= 1;
    }
    (step < curve.len()).then_some(step + 1)
}

/// Band-energy convergence of a sequence of x̂₀ estimates to its last element.
pub fn band_recovery_curves(trajectory: &[Tensor], split: &BandSplit, delta: f64) -> Result<BandCurves> {
    let last = trajectory.last().ok_or_else(|| Error::invalid("empty trajectory"))?;
    let (fl, fh) = split.energies(last)?;
    let energies = trajectory.iter().map(|x| split.energies(x)).collect::<Result<Vec<_>>>()?;
    let mut flags = Vec::new();
    let mut curve = |final_e: f64, pick: fn(&(f64, f64)) -> f64, name: &str| -> Vec<f64> {
        if final_e > 0.0 {
            energies.iter().map(|e| (pick(e) - final_e).abs() / final_e).collect()
        } else {
            flags.push(format!("{name} band has zero final energy"));
            Vec::new()
        }
    };
    let low = curve(fl, |e| e.0, "low");
    let high = curve(fh, |e| e.1, "high");
    Ok(BandCurves {
        low_converged: entry_step(&low, delta),
        high_converged: entry_step(&high, delta),
        low,
        high,
        flags,
    })
}

/// `step,low_rel_err,high_rel_err` averaged over curves of equal length.
pub fn band_curves_csv(curves: &[BandCurves]) -> String {
    let mut out = String::from("step,low_rel_err,high_rel_err\n");
    let len = curves.iter().map(|c| c.low.len().max(c.high.len())).max().unwrap_or(0);
    let mean = |s: usize, f: fn(&BandCurves) -> &Vec<f64>| {
        let v: Vec<f64> = curves.iter().filter_map(|c| f(c).get(s).copied()).collect();
        if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    for s in 0..len {
        out.push_str(&format!("{},{},{}\n", s + 1, mean(s, |c| &c.low), mean(s, |c| &c.high)));
    }
    out
}

/// Outcome of one named verification.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Reports of the seeded default checks.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub psd: Vec<(String, PsdReport)>,
    pub crossing: CrossingReport,
    pub dependency: DependencyReport,
    pub independent: DependencyReport,
    pub checks: Vec<Check>,
}

pub const PSD_TOL: f64 = 0.05;
pub const CROSSING_TOL: f64 = 0.10;
pub const MID_BAND: std::ops::RangeInclusive<usize> = 4..=16;

pub fn default_law() -> SpectralLaw {
    SpectralLaw {
        k: 1.0,
        alpha: 2.0,
        sigma: 1.0,
        gamma: 1.0,
    }
}

/// Spectrum, crossing and dependency checks with `draws` Monte-Carlo samples.
pub fn run_suite(draws: usize, seed: u64) -> Result<SuiteReport> {
    let n = 64;
    let sine: Vec<f64> = (0..n).map(|i| (std::f64::consts::TAU * 3.0 * i as f64 / n as f64).sin()).collect();
    let law = default_law();
    let configs: Vec<(String, Vec<f64>, f64, f64)> = vec![
        ("zero_s1_t0.5".into(), vec![0.0; n], 1.0, 0.5),
        ("sine3_s1_t2".into(), sine, 1.0, 2.0),
        ("powerlaw_s0.5_t0.1".into(), power_law_signal(&law, n, seed), 0.5, 0.1),
    ];
    let mut checks = Vec::new();
    let mut psd = Vec::new();
    for (i, (name, m0, sigma, t)) in configs.into_iter().enumerate() {
        let rep = verify_psd_theorem(&m0, sigma, t, draws, seed.wrapping_add(i as u64))?;
        checks.push(Check {
            name: format!("psd/{name}"),
            passed: rep.passed(PSD_TOL),
            detail: format!("max rel err {:.4} (tol {PSD_TOL})", rep.max_rel_err),
        });
        psd.push((name, rep));
    }
    let bins: Vec<usize> = (1..n / 2).collect();
    let grid = geometric_grid(1e-3, 2.0, 1.02)?;
    let crossing = verify_crossing_empirically(&law, n, &bins, &grid, draws, seed)?;
    let mid: Vec<usize> = MID_BAND.collect();
    let worst = crossing
        .rows
        .iter()
        .filter(|r| mid.contains(&r.bin))
        .map(|r| r.rel_err)
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "crossing".into(),
        passed: crossing.passed(&mid, CROSSING_TOL),
        detail: format!(
            "mid-band max rel err {worst:.4} (tol {CROSSING_TOL}), monotone {}, inconclusive {}",
            crossing.monotone,
            crossing.inconclusive.len()
        ),
    });
    let dependency = verify_low_high_dependency(&DependencyToy {
        rho: 0.8,
        n_draws: draws.max(1000),
        seed,
        ..DependencyToy::default()
    })?;
    checks.push(Check {
        name: "dependency/correlated".into(),
        passed: dependency.z() > 5.0,
        detail: format!("margin {:.5} se {:.5} z {:.2} (need > 5)", dependency.margin, dependency.std_err, dependency.z()),
    });
    let independent = verify_low_high_dependency(&DependencyToy {
        rho: 0.0,
        n_draws: draws.max(1000),
        seed,
        ..DependencyToy::default()
    })?;
    checks.push(Check {
        name: "dependency/independent".into(),
        passed: independent.z().abs() < 1.96,
        detail: format!("margin {:.2e} z {:.2} (need |z| < 1.96)", independent.margin, independent.z()),
    });
    Ok(SuiteReport {
        psd,
        crossing,
        dependency,
        independent,
        checks,
    })
}

pub fn dependency_csv(reports: &[(&str, &DependencyReport)]) -> String {
    let mut out = String::from("case,var_given_obs,var_given_obs_low,margin,std_err,z,regularized\n");
    for (name, r) in reports {
        out.push_str(&format!(
            "{name},{},{},{},{},{},{}\n",
            r.var_given_obs,
            r.var_given_obs_low,
            r.margin,
            r.std_err,
            r.z(),
            r.regularized
        ));
    }
    out
}
