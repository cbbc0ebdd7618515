//! Token prompts and the parametric trajectories they describe.
//!
//! A motion has two channels over `N` frames with τ = n/N and θ = ωτ + φ:
//!
//! ```text
//! ch0 = dir·A·sin θ        + J·sin(2π·12τ)
//! ch1 = A·e(τ)·cos θ       + J·sin(2π·12τ)
//! ```
//!
//! where the envelope `e` is 1 for `sine`, `0.25 + 0.75τ` for `ramp` and
//! `sin(πτ)` for `arc`.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const FRAMES: usize = 64;
pub const MOTION_DIM: usize = 2;
pub const MAX_PROMPT_LEN: usize = 6;
pub const JERK_CYCLES: f64 = 12.0;
pub const PHASE_JITTER: f64 = PI / 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Sine,
    Ramp,
    Arc,
    Left,
    Right,
    Slow,
    Fast,
    Small,
    Large,
    Smooth,
    Jerky,
}

impl Token {
    pub const ALL: [Token; 11] = [
        Token::Sine,
        Token::Ramp,
        Token::Arc,
        Token::Left,
        Token::Right,
        Token::Slow,
        Token::Fast,
        Token::Small,
        Token::Large,
        Token::Smooth,
        Token::Jerky,
    ];

    pub const VOCAB_SIZE: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Token::Sine => "sine",
            Token::Ramp => "ramp",
            Token::Arc => "arc",
            Token::Left => "left",
            Token::Right => "right",
            Token::Slow => "slow",
            Token::Fast => "fast",
            Token::Small => "small",
            Token::Large => "large",
            Token::Smooth => "smooth",
            Token::Jerky => "jerky",
        }
    }

    fn category(self) -> Category {
        match self {
            Token::Sine | Token::Ramp | Token::Arc => Category::Shape,
            Token::Left | Token::Right => Category::Direction,
            Token::Slow | Token::Fast => Category::Speed,
            Token::Small | Token::Large => Category::Amplitude,
            Token::Smooth | Token::Jerky => Category::Modifier,
        }
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Token::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownToken(s.to_string()))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Shape,
    Direction,
    Speed,
    Amplitude,
    Modifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sine,
    Ramp,
    Arc,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Sine, Shape::Ramp, Shape::Arc];

    pub fn envelope(self, tau: f64) -> f64 {
        match self {
            Shape::Sine => 1.0,
            Shape::Ramp => 0.25 + 0.75 * tau,
            Shape::Arc => (PI * tau).sin(),
        }
    }
}

/// An ordered token sequence with at most one token per attribute.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Prompt {
    tokens: Vec<Token>,
}

impl Prompt {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.len() > MAX_PROMPT_LEN {
            return Err(Error::InvalidPrompt(format!(
                "{} tokens, at most {MAX_PROMPT_LEN} allowed",
                tokens.len()
            )));
        }
        for (i, a) in tokens.iter().enumerate() {
            if tokens[..i].iter().any(|b| b.category() == a.category()) {
                return Err(Error::InvalidPrompt(format!("repeated {:?} attribute", a.category())));
            }
        }
        if !tokens.iter().any(|t| t.category() == Category::Shape) {
            return Err(Error::InvalidPrompt("no shape token".into()));
        }
        Ok(Prompt { tokens })
    }

    /// Whitespace-separated tokens, e.g. `"sine left slow small"`.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text.split_whitespace().map(Token::from_str).collect::<Result<Vec<_>>>()?;
        Prompt::new(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.index()).collect()
    }

    fn find(&self, cat: Category) -> Option<Token> {
        self.tokens.iter().copied().find(|t| t.category() == cat)
    }

    pub fn shape(&self) -> Shape {
        match self.find(Category::Shape) {
            Some(Token::Ramp) => Shape::Ramp,
            Some(Token::Arc) => Shape::Arc,
            _ => Shape::Sine,
        }
    }

    /// +1 for `right` (the default), −1 for `left`.
    pub fn direction(&self) -> f64 {
        if self.find(Category::Direction) == Some(Token::Left) {
            -1.0
        } else {
            1.0
        }
    }

    /// Oscillation cycles over the sequence.
    pub fn cycles(&self) -> f64 {
        if self.find(Category::Speed) == Some(Token::Fast) {
            2.5
        } else {
            1.0
        }
    }

    pub fn amplitude(&self) -> f64 {
        if self.find(Category::Amplitude) == Some(Token::Large) {
            1.2
        } else {
            0.6
        }
    }

    pub fn jerk(&self) -> f64 {
        match self.find(Category::Modifier) {
            Some(Token::Smooth) => 0.0,
            Some(Token::Jerky) => 0.3,
            _ => 0.08,
        }
    }

    /// Every fully specified prompt in canonical order, modifier optional.
    pub fn all_full() -> Vec<Prompt> {
        let mut out = Vec::new();
        for shape in [Token::Sine, Token::Ramp, Token::Arc] {
            for dir in [Token::Left, Token::Right] {
                for speed in [Token::Slow, Token::Fast] {
                    for amp in [Token::Small, Token::Large] {
                        for modifier in [None, Some(Token::Smooth), Some(Token::Jerky)] {
                            let mut t = vec![shape, dir, speed, amp];
                            t.extend(modifier);
                            out.push(Prompt { tokens: t });
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<_> = self.tokens.iter().map(|t| t.as_str()).collect();
        f.write_str(&words.join(" "))
    }
}

impl Serialize for Prompt {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let words: Vec<_> = self.tokens.iter().map(|t| t.as_str()).collect();
        words.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Prompt {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        let tokens = words
            .iter()
            .map(|w| Token::from_str(w))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        Prompt::new(tokens).map_err(serde::de::Error::custom)
    }
}

/// Ground-truth generator parameters. `omega` is in radians per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub shape: Shape,
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
    pub direction: f64,
    pub jerk: f64,
}

impl MotionParams {
    pub fn cycles(&self) -> f64 {
        self.omega / TAU
    }

    pub fn synthesize(&self, frames: usize) -> Tensor {
        let mut data = Vec::with_capacity(frames * MOTION_DIM);
        for n in 0..frames {
            let tau = n as f64 / frames as f64;
            let theta = self.omega * tau + self.phase;
            let j = self.jerk * (TAU * JERK_CYCLES * tau).sin();
            data.push(self.direction * self.amplitude * theta.sin() + j);
            data.push(self.amplitude * self.shape.envelope(tau) * theta.cos() + j);
        }
        Tensor::new(vec![frames, MOTION_DIM], data).expect("frames > 0")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub frames: Tensor,
    pub params: MotionParams,
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (rows, cols) = self.dims2().map_err(serde::ser::Error::custom)?;
        let nested: Vec<&[f64]> = (0..rows).map(|r| &self.data()[r * cols..(r + 1) * cols]).collect();
        nested.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Tensor::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Parameters a prompt implies for a given phase.
pub fn params_for(prompt: &Prompt, phase: f64) -> MotionParams {
    MotionParams {
        shape: prompt.shape(),
        amplitude: prompt.amplitude(),
        omega: TAU * prompt.cycles(),
        phase,
        direction: prompt.direction(),
        jerk: prompt.jerk(),
    }
}

fn random_prompt(r: &mut rng::Rng) -> Prompt {
    let all = Prompt::all_full();
    all[r.random_range(0..all.len())].clone()
}

/// Deterministic pair for `seed`; the prompt is drawn from the seed when absent.
pub fn generate_pair(seed: u64, prompt: Option<&Prompt>) -> (Prompt, Motion) {
    generate_pair_n(seed, prompt, FRAMES)
}

pub fn generate_pair_n(seed: u64, prompt: Option<&Prompt>, frames: usize) -> (Prompt, Motion) {
    let mut r = rng::substream(seed, "corpus", 0);
    let drawn = random_prompt(&mut r);
    let phase = r.random_range(-PHASE_JITTER..PHASE_JITTER);
    let prompt = prompt.cloned().unwrap_or(drawn);
    let params = params_for(&prompt, phase);
    let motion = Motion {
        frames: params.synthesize(frames),
        params,
    };
    (prompt, motion)
}

/// Noiseless, zero-phase motion for a prompt.
pub fn prototype(prompt: &Prompt, frames: usize) -> Motion {
    let params = params_for(prompt, 0.0);
    Motion {
        frames: params.synthesize(frames),
        params,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub params: MotionParams,
    /// Sum of squared residuals of the fitted model.
    pub residual: f64,
    pub degenerate: bool,
}

const FIT_MIN_CYCLES: f64 = 0.5;
const FIT_MAX_CYCLES: f64 = 4.0;
const FIT_GRID_STEP: f64 = 0.02;

struct ChannelFit {
    coef: [f64; 3],
    sse: f64,
}

fn lstsq3(basis: &[[f64; 3]], y: &[f64]) -> ChannelFit {
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut aty = nalgebra::Vector3::<f64>::zeros();
    for (row, &v) in basis.iter().zip(y) {
        let r = nalgebra::Vector3::from_row_slice(row);
        ata += r * r.transpose();
        aty += r * v;
    }
    let coef = ata
        .cholesky()
        .map(|c| c.solve(&aty))
        .or_else(|| ata.pseudo_inverse(1e-12).ok().map(|p| p * aty))
        .unwrap_or_else(nalgebra::Vector3::zeros);
    let sse = basis
        .iter()
        .zip(y)
        .map(|(row, &v)| {
            let p = row[0] * coef[0] + row[1] * coef[1] + row[2] * coef[2];
            (v - p) * (v - p)
        })
        .sum();
    ChannelFit {
        coef: [coef[0], coef[1], coef[2]],
        sse,
    }
}

struct JointFit {
    ch0: ChannelFit,
    ch1: ChannelFit,
}

impl JointFit {
    fn sse(&self) -> f64 {
        self.ch0.sse + self.ch1.sse
    }
}

fn fit_at(frames: &Tensor, shape: Shape, omega: f64) -> JointFit {
    let n = frames.shape()[0];
    let mut b0 = Vec::with_capacity(n);
    let mut b1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for i in 0..n {
        let tau = i as f64 / n as f64;
        let (s, c) = (omega * tau).sin_cos();
        let e = shape.envelope(tau);
        let j = (TAU * JERK_CYCLES * tau).sin();
        b0.push([s, c, j]);
        b1.push([e * c, e * s, j]);
        y0.push(frames.data()[2 * i]);
        y1.push(frames.data()[2 * i + 1]);
    }
    JointFit {
        ch0: lstsq3(&b0, &y0),
        ch1: lstsq3(&b1, &y1),
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Least-squares recovery of the generator parameters from a motion.
pub fn fit_params(frames: &Tensor) -> Result<FitResult> {
    let (n, d) = frames.dims2()?;
    if d != MOTION_DIM || n < 8 {
        return Err(Error::invalid(format!(
            "fit_params needs at least 8 frames of width {MOTION_DIM}, got {n}×{d}"
        )));
    }
    if !frames.is_finite() {
        return Err(Error::NonFinite("fit_params input".into()));
    }
    if frames.data().iter().all(|&v| v == 0.0) {
        return Ok(FitResult {
            params: MotionParams {
                shape: Shape::Sine,
                amplitude: 0.0,
                omega: 0.0,
                phase: 0.0,
                direction: 0.0,
                jerk: 0.0,
            },
            residual: 0.0,
            degenerate: true,
        });
    }
    let steps = ((FIT_MAX_CYCLES - FIT_MIN_CYCLES) / FIT_GRID_STEP).round() as usize;
    let mut best: Option<(f64, Shape, f64)> = None;
    for shape in Shape::ALL {
        for k in 0..=steps {
            let cycles = FIT_MIN_CYCLES + k as f64 * FIT_GRID_STEP;
            let sse = fit_at(frames, shape, TAU * cycles).sse();
            if best.is_none_or(|(b, _, _)| sse < b) {
                best = Some((sse, shape, cycles));
            }
        }
    }
    let (_, shape, cycles) = best.expect("nonempty grid");
    let lo = (cycles - FIT_GRID_STEP).max(FIT_MIN_CYCLES);
    let hi = (cycles + FIT_GRID_STEP).min(FIT_MAX_CYCLES);
    let refined = golden_min(|c| fit_at(frames, shape, TAU * c).sse(), lo, hi, 1e-13);
    let fit = fit_at(frames, shape, TAU * refined);
    let [u, v, h0] = fit.ch0.coef;
    let [p, q, h1] = fit.ch1.coef;
    let amplitude = p.hypot(q);
    let phase = (-q).atan2(p);
    let proj = u * phase.cos() + v * phase.sin();
    Ok(FitResult {
        params: MotionParams {
            shape,
            amplitude,
            omega: TAU * refined,
            phase,
            direction: if proj < 0.0 { -1.0 } else { 1.0 },
            jerk: 0.5 * (h0 + h1),
        },
        residual: fit.sse(),
        degenerate: false,
    })
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seed: u64,
    pub tokens: Prompt,
    pub params: MotionParams,
    pub frames: Tensor,
}

impl Record {
    pub fn generate(seed: u64) -> Self {
        let (prompt, motion) = generate_pair(seed, None);
        Record {
            seed,
            tokens: prompt,
            params: motion.params,
            frames: motion.frames,
        }
    }

    pub fn prompt(&self) -> &Prompt {
        &self.tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Seed ranges `[start, end)` per split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub base_seed: u64,
    pub size: usize,
    pub train: (u64, u64),
    pub val: (u64, u64),
    pub test: (u64, u64),
}

impl SplitManifest {
    /// 0.8 / 0.15 / 0.05 of `size` consecutive seeds starting at `base_seed`.
    pub fn new(base_seed: u64, size: usize) -> Self {
        let n_train = (size as f64 * 0.8).round() as u64;
        let n_val = (size as f64 * 0.15).round() as u64;
        let end = base_seed + size as u64;
        let train = (base_seed, base_seed + n_train);
        let val = (train.1, (train.1 + n_val).min(end));
        SplitManifest {
            base_seed,
            size,
            train,
            val,
            test: (val.1, end),
        }
    }

    pub fn range(&self, split: Split) -> (u64, u64) {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn records(&self, split: Split) -> Vec<Record> {
        let (a, b) = self.range(split);
        (a..b).map(Record::generate).collect()
    }
}

/// The full corpus split into its three parts.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: SplitManifest,
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

impl Corpus {
    pub fn generate(base_seed: u64, size: usize) -> Self {
        let manifest = SplitManifest::new(base_seed, size);
        Corpus {
            train: manifest.records(Split::Train),
            val: manifest.records(Split::Val),
            test: manifest.records(Split::Test),
            manifest,
        }
    }

    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut buf = Vec::new();
            write_records(&mut buf, self.split(split))?;
            crate::io::write_atomic(&dir.join(split_file(split)), &buf)?;
        }
        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        crate::io::write_atomic(&dir.join("splits.json"), &manifest)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("splits.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let load = |split| read_records_file(&dir.join(split_file(split)));
        Ok(Corpus {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
            manifest,
        })
    }
}

fn split_file(split: Split) -> &'static str {
    match split {
        Split::Train => "train.jsonl",
        Split::Val => "val.jsonl",
        Split::Test => "test.jsonl",
    }
}

pub fn write_records(w: &mut impl Write, records: &[Record]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead, path: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn read_records_file(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(f), path)
}
