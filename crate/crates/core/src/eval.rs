//! Metrics computed in the feature space of fitted motion parameters.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::{fit_params, prototype, MotionParams, Prompt, Record, Shape, Split};
use crate::diffusion::SamplerPlan;
use crate::error::{Error, Result};
use crate::guidance::{guided_sample_batch, GuidancePolicy, SampleOptions, StepCost};
use crate::params::Model;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 8;
pub const POOL_SIZE: usize = 32;
pub const DIVERSITY_PAIRS: usize = 300;
pub const MM_SAMPLES: usize = 20;
const EIG_CLIP: f64 = -1e-10;
const RIDGE: f64 = 1e-6;

/// `[amplitude, cycles, sin φ, cos φ, direction, jerk, is_ramp, is_arc]`.
pub fn raw_features(p: &MotionParams) -> [f64; FEATURE_DIM] {
    [
        p.amplitude,
        p.cycles(),
        p.phase.sin(),
        p.phase.cos(),
        p.direction,
        p.jerk,
        (p.shape == Shape::Ramp) as u8 as f64,
        (p.shape == Shape::Arc) as u8 as f64,
    ]
}

/// Z-scoring frozen on a reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl FeatureScaler {
    pub fn fit(params: &[MotionParams]) -> Result<Self> {
        if params.len() < 2 {
            return Err(Error::invalid("feature scaler needs at least 2 samples"));
        }
        let rows: Vec<[f64; FEATURE_DIM]> = params.iter().map(raw_features).collect();
        let n = rows.len() as f64;
        let mut mean = [0.0; FEATURE_DIM];
        let mut std = [0.0; FEATURE_DIM];
        for j in 0..FEATURE_DIM {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(FeatureScaler { mean, std })
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        FeatureScaler::fit(&records.iter().map(|r| r.params).collect::<Vec<_>>())
    }

    pub fn transform(&self, p: &MotionParams) -> Vec<f64> {
        raw_features(p)
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j]) / self.std[j])
            .collect()
    }

    /// Fits the motion and returns its scaled feature vector.
    pub fn features(&self, motion: &Tensor) -> Result<Vec<f64>> {
        Ok(self.transform(&fit_params(motion)?.params))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frechet {
    pub distance: f64,
    /// A ridge was added to a rank-deficient covariance.
    pub regularized: bool,
}

fn moments(xs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mu = DVector::zeros(d);
    for x in xs {
        mu += DVector::from_column_slice(x);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = DVector::from_column_slice(x) - &mu;
        cov += &c * c.transpose();
    }
    (mu, cov / (n - 1.0))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let roots = e.eigenvalues.map(|v| if v < 0.0 { 0.0 } else { v.sqrt() });
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

fn rank_deficient(c: &DMatrix<f64>) -> bool {
    let ev = SymmetricEigen::new((c + c.transpose()) * 0.5).eigenvalues;
    let max = ev.iter().cloned().fold(0.0, f64::max);
    ev.iter().any(|&v| v <= 1e-12 * max.max(1e-300))
}

/// Fréchet distance between Gaussians with the given moments.
pub fn frechet_from_moments(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<Frechet> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::ShapeMismatch {
            op: "frechet",
            left: vec![mu1.len()],
            right: vec![mu2.len()],
        });
    }
    let d = mu1.len();
    let regularized = rank_deficient(s1) || rank_deficient(s2);
    let (s1, s2) = if regularized {
        let r = DMatrix::<f64>::identity(d, d) * RIDGE;
        (s1 + &r, s2 + &r)
    } else {
        (s1.clone(), s2.clone())
    };
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let ev = SymmetricEigen::new((&inner + inner.transpose()) * 0.5).eigenvalues;
    if let Some(v) = ev.iter().find(|&&v| v < EIG_CLIP * ev.amax().max(1.0)) {
        return Err(Error::invalid(format!("covariance product has eigenvalue {v}")));
    }
    let tr_sqrt: f64 = ev.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let distance = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(Frechet {
        distance: distance.max(0.0),
        regularized,
    })
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Frechet> {
    let d = a.first().map(|x| x.len()).unwrap_or(0);
    if d == 0 || a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::invalid(format!(
            "frechet distance needs at least dim+1 samples per set ({} and {} for dim {d})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    frechet_from_moments(&m1, &s1, &m2, &s2)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub features: Vec<f64>,
    pub truth: bool,
}

/// Whether the ground truth ranks within the top 1, 2 and 3 by distance;
/// ties keep candidate order.
pub fn r_precision(generated: &[f64], candidates: &[Candidate]) -> Result<[bool; 3]> {
    if candidates.len() != POOL_SIZE {
        return Err(Error::invalid(format!("need {POOL_SIZE} candidates, got {}", candidates.len())));
    }
    let truths: Vec<usize> = candidates.iter().enumerate().filter(|(_, c)| c.truth).map(|(i, _)| i).collect();
    if truths.len() != 1 {
        return Err(Error::invalid(format!("exactly one ground truth required, got {}", truths.len())));
    }
    let mut order: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (dist(generated, &c.features), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let rank = order.iter().position(|&(_, i)| i == truths[0]).expect("truth present");
    Ok([rank < 1, rank < 2, rank < 3])
}

/// Mean feature distance over `n_pairs` random pairs of distinct motions.
pub fn diversity(features: &[Vec<f64>], n_pairs: usize, rng: &mut Rng) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("diversity needs at least 2 motions"));
    }
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += dist(&features[i], &features[j]);
    }
    Ok(total / n_pairs.max(1) as f64)
}

/// Mean over prompts of the mean distance within pairs (0,1), (2,3), … of 20 samples.
pub fn multimodality(per_prompt: &[Vec<Vec<f64>>]) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::invalid("multimodality needs at least one prompt"));
    }
    let mut total = 0.0;
    for s in per_prompt {
        if s.len() != MM_SAMPLES {
            return Err(Error::invalid(format!("need {MM_SAMPLES} samples per prompt, got {}", s.len())));
        }
        total += s.chunks(2).map(|p| dist(&p[0], &p[1])).sum::<f64>() / (MM_SAMPLES / 2) as f64;
    }
    Ok(total / per_prompt.len() as f64)
}

/// Mean with 95% normal-approximation half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub half_width: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Stat { mean: f64::NAN, half_width: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let half_width = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            f64::NAN
        };
        Stat { mean, half_width }
    }

    pub fn lo(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.half_width
    }
}

/// Two-sided exact sign test on paired samples; ties are dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> f64 {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_c + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prompts: usize,
    pub reps: usize,
    pub mm_prompts: usize,
    pub diversity_pairs: usize,
    pub seed: u64,
    /// Corpus split whose prompts and motions are evaluated against.
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompts: 64,
            reps: 20,
            mm_prompts: 4,
            diversity_pairs: DIVERSITY_PAIRS,
            seed: 0,
            split: Split::Test,
        }
    }
}

/// Metrics of one repetition.
#[derive(Clone, Debug, PartialEq)]
pub struct RepMetrics {
    pub fid: f64,
    pub top: [f64; 3],
    pub diversity: f64,
    pub multimodality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub fid: Stat,
    pub top1: Stat,
    pub top2: Stat,
    pub top3: Stat,
    pub diversity: Stat,
    pub corpus_diversity: f64,
    pub multimodality: Stat,
    pub reps: Vec<RepMetrics>,
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn diversity_gap(&self) -> f64 {
        (self.diversity.mean - self.corpus_diversity).abs()
    }

    pub const CSV_HEADER: &'static str = "method,fid,fid_ci,top1,top1_ci,top2,top2_ci,top3,top3_ci,diversity,diversity_ci,corpus_diversity,diversity_gap,multimodality,multimodality_ci";

    pub fn csv_row(&self, method: &str) -> String {
        let s = |x: &Stat| format!("{},{}", x.mean, x.half_width);
        format!(
            "{method},{},{},{},{},{},{},{},{}",
            s(&self.fid),
            s(&self.top1),
            s(&self.top2),
            s(&self.top3),
            s(&self.diversity),
            self.corpus_diversity,
            self.diversity_gap(),
            s(&self.multimodality)
        )
    }
}

pub fn metrics_csv(rows: &[(&str, &MetricReport)]) -> String {
    let mut out = format!("{}\n", MetricReport::CSV_HEADER);
    for (name, r) in rows {
        out.push_str(&r.csv_row(name));
        out.push('\n');
    }
    out
}

/// Caches prototype features per prompt.
pub struct Evaluator<'a> {
    pub scaler: FeatureScaler,
    pub frames: usize,
    reference: Vec<Vec<f64>>,
    records: &'a [Record],
    cache: HashMap<Prompt, Vec<f64>>,
    pool: Vec<Prompt>,
}

impl<'a> Evaluator<'a> {
    /// `records` are the prompts and real motions being evaluated against;
    /// `scaler` is frozen on the training split.
    pub fn new(scaler: FeatureScaler, records: &'a [Record], frames: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("evaluation needs records"));
        }
        let reference = records.iter().map(|r| scaler.features(&r.frames)).collect::<Result<Vec<_>>>()?;
        Ok(Evaluator {
            scaler,
            frames,
            reference,
            records,
            cache: HashMap::new(),
            pool: Prompt::all_full(),
        })
    }

    pub fn reference(&self) -> &[Vec<f64>] {
        &self.reference
    }

    pub fn prototype_features(&mut self, p: &Prompt) -> Result<Vec<f64>> {
        if let Some(f) = self.cache.get(p) {
            return Ok(f.clone());
        }
        let f = self.scaler.features(&prototype(p, self.frames).frames)?;
        self.cache.insert(p.clone(), f.clone());
        Ok(f)
    }

    /// Ground truth plus 31 distinct mismatched prompts at seeded positions.
    pub fn candidates(&mut self, truth: &Prompt, rng: &mut Rng) -> Result<Vec<Candidate>> {
        let truth_params = crate::corpus::params_for(truth, 0.0);
        let mut others: Vec<Prompt> = self
            .pool
            .iter()
            .filter(|p| crate::corpus::params_for(p, 0.0) != truth_params)
            .cloned()
            .collect();
        if others.len() < POOL_SIZE - 1 {
            return Err(Error::invalid("not enough mismatched prompts for a candidate pool"));
        }
        others.shuffle(rng);
        others.truncate(POOL_SIZE - 1);
        let pos = rng.random_range(0..POOL_SIZE);
        others.insert(pos, truth.clone());
        others
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(Candidate {
                    features: self.prototype_features(p)?,
                    truth: i == pos,
                })
            })
            .collect()
    }

    /// Metrics of generated motions aligned with `records[..n]`.
    pub fn score(&mut self, generated: &[Tensor], rng: &mut Rng, pairs: usize) -> Result<RepMetrics> {
        let n = generated.len();
        if n > self.records.len() {
            return Err(Error::invalid("more generated motions than evaluation records"));
        }
        let feats = generated.iter().map(|m| self.scaler.features(m)).collect::<Result<Vec<_>>>()?;
        let mut hits = [0usize; 3];
        for (f, r) in feats.iter().zip(self.records) {
            let pool = self.candidates(r.prompt(), rng)?;
            let h = r_precision(f, &pool)?;
            for k in 0..3 {
                hits[k] += h[k] as usize;
            }
        }
        let fid = frechet_distance(&feats, &self.reference[..n])?.distance;
        Ok(RepMetrics {
            fid,
            top: hits.map(|h| h as f64 / n as f64),
            diversity: diversity(&feats, pairs, rng)?,
            multimodality: None,
        })
    }
}

fn sample_all(
    model: &Model,
    prompts: &[&Prompt],
    starts: &[Tensor],
    plan: &SamplerPlan,
    policy: &GuidancePolicy,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(prompts.len());
    for (ps, xs) in prompts.chunks(32).zip(starts.chunks(32)) {
        let trajs = guided_sample_batch(xs, ps, model, plan, policy, SampleOptions::default())?;
        out.extend(trajs.into_iter().map(|t| t.motion));
    }
    Ok(out)
}

fn starts(r: &mut Rng, n: usize, model: &Model) -> Vec<Tensor> {
    (0..n)
        .map(|_| rng::normal_tensor(r, &[model.config.frames, model.config.motion_dim]))
        .collect()
}

/// Generates and scores `cfg.reps` repetitions; repetition `r` uses the
/// `eval` sub-stream `r` of `cfg.seed` for noise and candidate pools.
pub fn evaluate(
    model: &Model,
    ev: &mut Evaluator<'_>,
    plan: &SamplerPlan,
    policy: &GuidancePolicy,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if cfg.reps == 0 {
        return Err(Error::invalid("at least one repetition required"));
    }
    let n = cfg.prompts.min(ev.records.len());
    let records = ev.records;
    let prompts: Vec<&Prompt> = records[..n].iter().map(|r| r.prompt()).collect();
    let mut reps = Vec::with_capacity(cfg.reps);
    let mut flags = Vec::new();
    for rep in 0..cfg.reps {
        let mut r = rng::substream(cfg.seed, "eval", rep as u64);
        let xs = starts(&mut r, n, model);
        let motions = sample_all(model, &prompts, &xs, plan, policy)?;
        let mut m = ev.score(&motions, &mut r, cfg.diversity_pairs)?;
        if cfg.mm_prompts > 0 {
            let k = cfg.mm_prompts.min(n);
            let mm_prompts: Vec<&Prompt> = prompts[..k].iter().flat_map(|p| std::iter::repeat_n(*p, MM_SAMPLES)).collect();
            let xs = starts(&mut r, mm_prompts.len(), model);
            let motions = sample_all(model, &mm_prompts, &xs, plan, policy)?;
            let feats = motions.iter().map(|x| ev.scaler.features(x)).collect::<Result<Vec<_>>>()?;
            let groups: Vec<Vec<Vec<f64>>> = feats.chunks(MM_SAMPLES).map(|c| c.to_vec()).collect();
            m.multimodality = Some(multimodality(&groups)?);
        }
        reps.push(m);
    }
    if cfg.reps < 20 {
        flags.push(format!("only {} repetitions; intervals need at least 20", cfg.reps));
    }
    let mut r = rng::stream(cfg.seed, "corpus-diversity");
    let corpus_diversity = diversity(&ev.reference[..n], cfg.diversity_pairs, &mut r)?;
    let col = |f: &dyn Fn(&RepMetrics) -> f64| Stat::of(&reps.iter().map(f).collect::<Vec<_>>());
    let mm: Vec<f64> = reps.iter().filter_map(|m| m.multimodality).collect();
    Ok(MetricReport {
        fid: col(&|m| m.fid),
        top1: col(&|m| m.top[0]),
        top2: col(&|m| m.top[1]),
        top3: col(&|m| m.top[2]),
        diversity: col(&|m| m.diversity),
        corpus_diversity,
        multimodality: Stat::of(&mm),
        reps,
        flags,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: String,
    /// Median wall time per batch.
    pub median: Duration,
    /// Evaluations per trajectory.
    pub cond: usize,
    pub uncond: usize,
    /// Batches timed together to exceed timer resolution.
    pub multiplier: usize,
    pub flagged: bool,
}

const MIN_TIMED: Duration = Duration::from_millis(5);

/// Median batch sampling time per policy, after `warmup` untimed runs.
/// Repetitions alternate between policies.
pub fn bench_sampling(
    model: &Model,
    prompts: &[&Prompt],
    policies: &[(&str, GuidancePolicy)],
    plan: &SamplerPlan,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if reps == 0 || prompts.is_empty() {
        return Err(Error::invalid("benchmark needs prompts and at least one repetition"));
    }
    let xs = starts(&mut rng::stream(seed, "bench"), prompts.len(), model);
    let run = |p: &GuidancePolicy| -> Result<StepCost> {
        let trajs = guided_sample_batch(&xs, prompts, model, plan, p, SampleOptions::default())?;
        Ok(trajs[0].cost)
    };
    let mut multipliers = Vec::with_capacity(policies.len());
    let mut costs = Vec::with_capacity(policies.len());
    for (_, policy) in policies {
        for _ in 0..warmup {
            run(policy)?;
        }
        let mut multiplier = 1;
        loop {
            let t0 = Instant::now();
            for _ in 0..multiplier {
                run(policy)?;
            }
            if t0.elapsed() >= MIN_TIMED || multiplier >= 1 << 16 {
                break;
            }
            multiplier *= 2;
        }
        multipliers.push(multiplier);
        costs.push(run(policy)?);
    }
    let mut times: Vec<Vec<Duration>> = vec![Vec::with_capacity(reps); policies.len()];
    for _ in 0..reps {
        for (k, (_, policy)) in policies.iter().enumerate() {
            let t0 = Instant::now();
            for _ in 0..multipliers[k] {
                run(policy)?;
            }
            times[k].push(t0.elapsed() / multipliers[k] as u32);
        }
    }
    let mut rows = Vec::new();
    for (k, (name, _)) in policies.iter().enumerate() {
        times[k].sort();
        rows.push(BenchRow {
            method: name.to_string(),
            median: times[k][reps / 2],
            cond: costs[k].cond,
            uncond: costs[k].uncond,
            multiplier: multipliers[k],
            flagged: multipliers[k] > 1,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,avg_time_s,cond_evals,uncond_evals,total_evals\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{},{}\n",
            r.method,
            r.median.as_secs_f64(),
            r.cond,
            r.uncond,
            r.cond + r.uncond
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_pair;

    fn gauss_set(r: &mut Rng, n: usize, mean: &[f64], scale: &[f64]) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| mean.iter().zip(scale).map(|(m, s)| m + s * rng::normal(r)).collect())
            .collect()
    }

    #[test]
    fn frechet_closed_forms() {
        let one = |m: f64, v: f64| (DVector::from_element(1, m), DMatrix::from_element(1, 1, v));
        let (m1, s1) = one(0.0, 1.0);
        let (m2, s2) = one(1.0, 4.0);
        let f = frechet_from_moments(&m1, &s1, &m2, &s2).unwrap();
        assert!((f.distance - 2.0).abs() < 1e-12);
        let mut r = rng::stream(0, "f");
        let a = gauss_set(&mut r, 200, &[0.0, 0.0, 0.0], &[1.0, 2.0, 0.5]);
        assert!(frechet_distance(&a, &a).unwrap().distance.abs() < 1e-9);
        let shifted: Vec<Vec<f64>> = a.iter().map(|x| vec![x[0] + 1.0, x[1] - 2.0, x[2]]).collect();
        assert!((frechet_distance(&a, &shifted).unwrap().distance - 5.0).abs() < 1e-9);
        let b = gauss_set(&mut r, 150, &[0.3, 0.0, 1.0], &[1.5, 1.0, 0.7]);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab.distance - ba.distance).abs() < 1e-9);
        assert!(frechet_distance(&a[..3], &b).is_err());
    }

    #[test]
    fn frechet_flags_rank_deficiency() {
        let mut r = rng::stream(1, "f");
        let a: Vec<Vec<f64>> = (0..30).map(|_| vec![rng::normal(&mut r), 1.0]).collect();
        let f = frechet_distance(&a, &a).unwrap();
        assert!(f.regularized);
        assert!(f.distance.abs() < 1e-9);
    }

    fn pool(truth_at: usize, same: bool) -> Vec<Candidate> {
        (0..POOL_SIZE)
            .map(|i| Candidate {
                features: if same { vec![1.0, 0.0] } else { vec![i as f64 + 1.0, 0.0] },
                truth: i == truth_at,
            })
            .collect()
    }

    #[test]
    fn r_precision_contract() {
        assert_eq!(r_precision(&[4.0, 0.0], &pool(3, false)).unwrap(), [true, true, true]);
        assert_eq!(r_precision(&[0.0, 0.0], &pool(0, true)).unwrap(), [true, true, true]);
        assert_eq!(r_precision(&[0.0, 0.0], &pool(1, true)).unwrap(), [false, true, true]);
        assert_eq!(r_precision(&[0.0, 0.0], &pool(5, true)).unwrap(), [false, false, false]);
        let mut two = pool(0, false);
        two[4].truth = true;
        assert!(r_precision(&[0.0, 0.0], &two).is_err());
        assert!(r_precision(&[0.0, 0.0], &pool(0, false)[..31]).is_err());
    }

    #[test]
    fn r_precision_null_model() {
        let mut r = rng::stream(2, "null");
        let trials = 1000;
        let mut hits = 0;
        for _ in 0..trials {
            let truth = r.random_range(0..POOL_SIZE);
            let cands: Vec<Candidate> = (0..POOL_SIZE)
                .map(|i| Candidate {
                    features: (0..4).map(|_| rng::normal(&mut r)).collect(),
                    truth: i == truth,
                })
                .collect();
            let g: Vec<f64> = (0..4).map(|_| rng::normal(&mut r)).collect();
            hits += r_precision(&g, &cands).unwrap()[0] as usize;
        }
        let p = 1.0 / 32.0;
        let rate = hits as f64 / trials as f64;
        assert!((rate - p).abs() <= 2.0 * (p * (1.0 - p) / trials as f64).sqrt(), "rate {rate}");
    }

    #[test]
    fn diversity_cases() {
        let mut r = rng::stream(3, "d");
        let same = vec![vec![1.0, 2.0]; 10];
        assert_eq!(diversity(&same, 300, &mut r).unwrap(), 0.0);
        let mut two: Vec<Vec<f64>> = vec![vec![0.0]; 50];
        two.extend(vec![vec![10.0]; 50]);
        let d = diversity(&two, 300, &mut r).unwrap();
        let expect = 10.0 * 50.0 / 99.0;
        assert!((d - expect).abs() < 0.1 * 10.0, "{d} vs {expect}");
        assert!(diversity(&same[..1], 300, &mut r).is_err());
    }

    #[test]
    fn multimodality_cases() {
        let a = vec![0.0, 0.0];
        let b = vec![3.0, 4.0];
        let alt: Vec<Vec<f64>> = (0..20).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
        assert_eq!(multimodality(&[alt]).unwrap(), 5.0);
        assert_eq!(multimodality(&[vec![a.clone(); 20]]).unwrap(), 0.0);
        assert!(multimodality(&[vec![a; 19]]).is_err());
    }

    #[test]
    fn stats_and_sign_test() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.half_width - 1.96 * (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
        // 10 wins of 10: p = 2 / 1024
        assert!((sign_test(&[1.0; 10], &[0.0; 10]) - 2.0 / 1024.0).abs() < 1e-15);
        assert_eq!(sign_test(&[0.0; 4], &[0.0; 4]), 1.0);
        // 5 of 6: p = 2·(1+6)/64
        let a = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        let b = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert!((sign_test(&a, &b) - 14.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn exact_ground_truth_ranks_first() {
        let recs: Vec<Record> = (0..40).map(Record::generate).collect();
        let scaler = FeatureScaler::from_records(&recs).unwrap();
        let mut ev = Evaluator::new(scaler, &recs, 64).unwrap();
        let mut r = rng::stream(0, "c");
        let (p, _) = generate_pair(5, None);
        let proto = prototype(&p, 64).frames;
        let f = ev.scaler.features(&proto).unwrap();
        let pool = ev.candidates(&p, &mut r).unwrap();
        assert_eq!(pool.iter().filter(|c| c.truth).count(), 1);
        assert!(r_precision(&f, &pool).unwrap()[0]);
    }
}
