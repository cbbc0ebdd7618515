//! Conditional x₀-predicting denoiser with per-block self-attention,
//! cross-attention to the condition tokens and a feed-forward layer.

use crate::autodiff::{Tape, Var};
use crate::corpus::Prompt;
use crate::diffusion::SamplerPlan;
use crate::error::{Error, Result};
use crate::guidance::{guided_sample_batch, GuidancePolicy, SampleOptions};
use crate::params::{Bound, Model, ModelConfig};
use crate::rng;
use crate::sta::{sta_tape, text_forward, time_forward};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// What a sample is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cond<'a> {
    Text(&'a Prompt),
    Null,
}

/// Stacked condition tokens `[B·M × d_c]` for a batch.
#[derive(Clone, Debug)]
pub struct CondBatch {
    pub tokens: Var,
    pub len: usize,
    /// Per sample, `false` marks padding positions.
    pub valid: Vec<Vec<bool>>,
    /// Conditioner attention `[K × n]` for text samples.
    pub sta_attn: Vec<Option<Var>>,
}

pub fn condition_tape(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    conds: &[Cond<'_>],
    ts: &[usize],
) -> Result<CondBatch> {
    if conds.len() != ts.len() || conds.is_empty() {
        return Err(Error::invalid(format!(
            "{} conditions for {} timesteps",
            conds.len(),
            ts.len()
        )));
    }
    let m = cfg.cond_len();
    let null = b.get("null.tokens")?;
    let z = if cfg.sta && conds.iter().any(|c| matches!(c, Cond::Text(_))) {
        Some(time_forward(tape, b, cfg, "sta.time", ts)?)
    } else {
        None
    };
    let mut parts = Vec::with_capacity(conds.len());
    let mut valid = Vec::with_capacity(conds.len());
    let mut sta_attn = Vec::with_capacity(conds.len());
    for (i, cond) in conds.iter().enumerate() {
        match cond {
            Cond::Null => {
                parts.push(null);
                valid.push(vec![true; m]);
                sta_attn.push(None);
            }
            Cond::Text(prompt) => {
                let c = text_forward(tape, b, prompt)?;
                if let Some(z) = z {
                    let zi = tape.gather_rows(z, &[i])?;
                    let out = sta_tape(tape, b, cfg, c, zi)?;
                    parts.push(out.cond);
                    valid.push(vec![true; m]);
                    sta_attn.push(Some(out.attn));
                } else {
                    let n = tape.shape(c)[0];
                    let padded = if n < m {
                        let pad = tape.constant(Tensor::zeros(&[m - n, cfg.cond_dim]));
                        tape.concat(&[c, pad])?
                    } else {
                        c
                    };
                    parts.push(padded);
                    valid.push((0..m).map(|j| j < n).collect());
                    sta_attn.push(None);
                }
            }
        }
    }
    let tokens = tape.concat(&parts)?;
    Ok(CondBatch {
        tokens,
        len: m,
        valid,
        sta_attn,
    })
}

/// Denoiser outputs on the tape.
#[derive(Clone, Debug)]
pub struct DenoiseTape {
    /// `[B·N × d_m]`.
    pub x0: Var,
    /// Cross-attention weights per block, `[B × N × M]`.
    pub cross_attn: Vec<Var>,
}

fn linear(tape: &mut Tape, b: &Bound, x: Var, w: &str, bias: Option<&str>) -> Result<Var> {
    let y = tape.matmul(x, b.get(w)?)?;
    match bias {
        Some(name) => tape.add_row(y, b.get(name)?),
        None => Ok(y),
    }
}

fn norm(tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    tape.layer_norm(x, b.get(&format!("{prefix}.g"))?, b.get(&format!("{prefix}.b"))?, LN_EPS)
}

/// Batched multi-sequence attention. `q_rows` is `[B·n × w]`, `ctx_rows` `[B·m × d]`.
#[allow(clippy::too_many_arguments)]
fn batched_attention(
    tape: &mut Tape,
    b: &Bound,
    prefix: &str,
    q_rows: Var,
    ctx_rows: Var,
    batch: usize,
    n: usize,
    m: usize,
    mask: Option<&Tensor>,
) -> Result<(Var, Var)> {
    let w = tape.shape(b.get(&format!("{prefix}.wq"))?)[1];
    let q = linear(tape, b, q_rows, &format!("{prefix}.wq"), None)?;
    let k = linear(tape, b, ctx_rows, &format!("{prefix}.wk"), None)?;
    let v = linear(tape, b, ctx_rows, &format!("{prefix}.wv"), None)?;
    let q = tape.reshape(q, &[batch, n, w])?;
    let k = tape.reshape(k, &[batch, m, w])?;
    let v = tape.reshape(v, &[batch, m, w])?;
    let s = tape.bmm_nt(q, k)?;
    let mut s = tape.scale(s, 1.0 / (w as f64).sqrt())?;
    if let Some(mask) = mask {
        let mv = tape.constant(mask.clone());
        s = tape.add(s, mv)?;
    }
    let p = tape.softmax(s, 2)?;
    let o = tape.bmm(p, v)?;
    let o = tape.reshape(o, &[batch * n, w])?;
    let o = linear(tape, b, o, &format!("{prefix}.wo"), None)?;
    Ok((o, p))
}

/// Predicts x₀ for a stacked batch `x_t` of shape `[B·N × d_m]`.
pub fn denoise_tape(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    x_t: Var,
    ts: &[usize],
    cond: &CondBatch,
) -> Result<DenoiseTape> {
    let batch = ts.len();
    let n = cfg.frames;
    let expected = [batch * n, cfg.motion_dim];
    if tape.shape(x_t) != expected {
        return Err(Error::ShapeMismatch {
            op: "denoise",
            left: tape.shape(x_t).to_vec(),
            right: expected.to_vec(),
        });
    }
    if let Some(&t) = ts.iter().find(|&&t| t < 1 || t > cfg.timesteps) {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 1,
            max: cfg.timesteps,
        });
    }
    let m = cond.len;
    if tape.shape(cond.tokens) != [batch * m, cfg.cond_dim] {
        return Err(Error::ShapeMismatch {
            op: "denoise condition",
            left: tape.shape(cond.tokens).to_vec(),
            right: vec![batch * m, cfg.cond_dim],
        });
    }
    let mask = if cond.valid.iter().all(|v| v.iter().all(|&ok| ok)) {
        None
    } else {
        let mut data = Vec::with_capacity(batch * n * m);
        for v in &cond.valid {
            for _ in 0..n {
                data.extend(v.iter().map(|&ok| if ok { 0.0 } else { MASKED }));
            }
        }
        Some(Tensor::new(vec![batch, n, m], data)?)
    };

    let temb = time_forward(tape, b, cfg, "den.time", ts)?;
    let rows: Vec<usize> = (0..batch).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let temb = tape.gather_rows(temb, &rows)?;
    let h = linear(tape, b, x_t, "den.in.w", Some("den.in.b"))?;
    let h = tape.add_row(h, b.get("den.pos")?)?;
    let mut h = tape.add(h, temb)?;

    let mut cross_attn = Vec::with_capacity(cfg.blocks);
    for blk in 0..cfg.blocks {
        let pre = format!("den.b{blk}");
        let a = norm(tape, b, h, &format!("{pre}.ln1"))?;
        let (o, _) = batched_attention(tape, b, &format!("{pre}.sa"), a, a, batch, n, n, None)?;
        h = tape.add(h, o)?;

        let a = norm(tape, b, h, &format!("{pre}.ln2"))?;
        let (o, p) = batched_attention(
            tape,
            b,
            &format!("{pre}.ca"),
            a,
            cond.tokens,
            batch,
            n,
            m,
            mask.as_ref(),
        )?;
        cross_attn.push(p);
        h = tape.add(h, o)?;

        let a = norm(tape, b, h, &format!("{pre}.ln3"))?;
        let f = linear(tape, b, a, &format!("{pre}.ff.w1"), Some(&format!("{pre}.ff.b1")))?;
        let f = tape.silu(f)?;
        let f = linear(tape, b, f, &format!("{pre}.ff.w2"), Some(&format!("{pre}.ff.b2")))?;
        h = tape.add(h, f)?;
    }
    let a = norm(tape, b, h, "den.lnf")?;
    let x0 = linear(tape, b, a, "den.out.w", Some("den.out.b"))?;
    Ok(DenoiseTape { x0, cross_attn })
}

/// One sample's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoised {
    /// `[N × d_m]`.
    pub x0: Tensor,
    /// Cross-attention per block, `[N × M]`.
    pub cross_attn: Vec<Tensor>,
    /// Positions of the condition that are real tokens.
    pub valid: Vec<bool>,
}

/// Stacks per-sample `[N × d_m]` tensors into `[B·N × d_m]`.
pub fn stack(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::invalid("stack: empty"))?;
    let mut data = Vec::with_capacity(xs.len() * first.len());
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: first.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        data.extend_from_slice(x.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] *= xs.len();
    Tensor::new(shape, data)
}

/// Splits `[B·N × d]` back into `B` tensors of `[N × d]`.
pub fn unstack(x: &Tensor, batch: usize) -> Vec<Tensor> {
    let rows = x.shape()[0] / batch;
    let cols = x.shape()[1];
    x.data()
        .chunks(rows * cols)
        .map(|c| Tensor::new(vec![rows, cols], c.to_vec()).expect("chunk shape"))
        .collect()
}

/// Predictions for a batch of noisy motions.
pub fn denoise_batch(xs: &[Tensor], ts: &[usize], conds: &[Cond<'_>], model: &Model) -> Result<Vec<Denoised>> {
    if xs.len() != ts.len() {
        return Err(Error::invalid("denoise_batch: inputs and timesteps differ in length"));
    }
    let cfg = &model.config;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let x = tape.constant(stack(xs)?);
    let cond = condition_tape(&mut tape, &b, cfg, conds, ts)?;
    let out = denoise_tape(&mut tape, &b, cfg, x, ts, &cond)?;
    let x0 = unstack(tape.value(out.x0), xs.len());
    let (n, m) = (cfg.frames, cond.len);
    let attn: Vec<&Tensor> = out.cross_attn.iter().map(|&p| tape.value(p)).collect();
    Ok(x0
        .into_iter()
        .enumerate()
        .map(|(i, x0)| Denoised {
            x0,
            cross_attn: attn
                .iter()
                .map(|p| Tensor::new(vec![n, m], p.data()[i * n * m..(i + 1) * n * m].to_vec()).expect("slice"))
                .collect(),
            valid: cond.valid[i].clone(),
        })
        .collect())
}

pub fn denoise(x_t: &Tensor, t: usize, cond: Cond<'_>, model: &Model) -> Result<Denoised> {
    Ok(denoise_batch(std::slice::from_ref(x_t), &[t], &[cond], model)?.remove(0))
}

/// Histogram bins used by [`capture_attention_profile`].
pub const ATTENTION_BINS: usize = 20;

/// Cross-attention statistics at one sampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStep {
    pub t: usize,
    /// Fraction of weights per bin of `[0, 1]`; sums to 1.
    pub histogram: Vec<f64>,
    /// Mean over rows of the within-row weight variance.
    pub variance: f64,
}

/// Histogram and mean row variance over the valid positions of `[N × M]` maps.
pub fn attention_stats(maps: &[(&Tensor, &[bool])]) -> AttentionStep {
    let mut hist = vec![0.0; ATTENTION_BINS];
    let (mut var_sum, mut rows, mut count) = (0.0, 0usize, 0usize);
    for (map, valid) in maps {
        let m = map.shape()[1];
        for row in map.data().chunks(m) {
            let w: Vec<f64> = row.iter().zip(valid.iter()).filter(|(_, &v)| v).map(|(&x, _)| x).collect();
            if w.is_empty() {
                continue;
            }
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            var_sum += w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
            rows += 1;
            for x in w {
                let bin = ((x.clamp(0.0, 1.0) * ATTENTION_BINS as f64) as usize).min(ATTENTION_BINS - 1);
                hist[bin] += 1.0;
                count += 1;
            }
        }
    }
    if count > 0 {
        hist.iter_mut().for_each(|h| *h /= count as f64);
    }
    AttentionStep {
        t: 0,
        histogram: hist,
        variance: if rows > 0 { var_sum / rows as f64 } else { 0.0 },
    }
}

/// Samples every prompt with the conditional branch active at each step and
/// summarises the cross-attention of all blocks per step.
pub fn capture_attention_profile(
    prompts: &[&Prompt],
    model: &Model,
    plan: &SamplerPlan,
    policy: &GuidancePolicy,
    seed: u64,
) -> Result<Vec<AttentionStep>> {
    let policy = GuidancePolicy {
        skip_fraction: 1.0,
        literal_skip: false,
        ..policy.clone()
    };
    let mut r = rng::stream(seed, "attention");
    let starts: Vec<Tensor> = prompts
        .iter()
        .map(|_| rng::normal_tensor(&mut r, &[model.config.frames, model.config.motion_dim]))
        .collect();
    let opts = SampleOptions {
        record_x0: false,
        record_attention: true,
    };
    let trajs = guided_sample_batch(&starts, prompts, model, plan, &policy, opts)?;
    let mut out = Vec::with_capacity(plan.len());
    for (s, &t) in plan.step_times.iter().enumerate() {
        let mut maps = Vec::new();
        for tr in &trajs {
            if let Some(Some(a)) = tr.attention.get(s) {
                maps.extend(a.blocks.iter().map(|b| (b, a.valid.as_slice())));
            }
        }
        let mut st = attention_stats(&maps);
        st.t = t;
        out.push(st);
    }
    Ok(out)
}

/// CSV with one row per step: `step,t,variance,bin_0..`.
pub fn attention_profile_csv(profile: &[AttentionStep]) -> String {
    let mut out = String::from("step,t,variance");
    for i in 0..ATTENTION_BINS {
        out.push_str(&format!(",bin_{i}"));
    }
    out.push('\n');
    for (i, s) in profile.iter().enumerate() {
        out.push_str(&format!("{},{},{}", i, s.t, s.variance));
        for h in &s.histogram {
            out.push_str(&format!(",{h}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SamplerMethod;

    #[test]
    fn output_shape_matches_input() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        let x = rng::normal_tensor(&mut rng::stream(1, "x"), &[64, 2]);
        let p = Prompt::parse("sine left slow small").unwrap();
        let out = denoise(&x, 20, Cond::Text(&p), &m).unwrap();
        assert_eq!(out.x0.shape(), &[64, 2]);
        assert_eq!(out.cross_attn.len(), 2);
        assert_eq!(out.cross_attn[0].shape(), &[64, 8]);
        assert!(matches!(denoise(&x, 0, Cond::Null, &m), Err(Error::TimestepOutOfRange { .. })));
        assert!(denoise(&Tensor::zeros(&[32, 2]), 3, Cond::Null, &m).is_err());
    }

    #[test]
    fn condition_changes_prediction() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        let x = rng::normal_tensor(&mut rng::stream(1, "x"), &[64, 2]);
        let p = Prompt::parse("arc right fast large").unwrap();
        let a = denoise(&x, 30, Cond::Text(&p), &m).unwrap();
        let b = denoise(&x, 30, Cond::Null, &m).unwrap();
        assert!(a.x0.max_abs_diff(&b.x0) > 0.0);
    }

    #[test]
    fn batch_matches_single_evaluation() {
        let m = Model::new(ModelConfig::default(), 4).unwrap();
        let mut r = rng::stream(2, "x");
        let xs: Vec<_> = (0..3).map(|_| rng::normal_tensor(&mut r, &[64, 2])).collect();
        let p = Prompt::parse("ramp left").unwrap();
        let q = Prompt::parse("sine right fast").unwrap();
        let conds = [Cond::Text(&p), Cond::Null, Cond::Text(&q)];
        let ts = [5, 17, 50];
        let batch = denoise_batch(&xs, &ts, &conds, &m).unwrap();
        for i in 0..3 {
            let single = denoise(&xs[i], ts[i], conds[i], &m).unwrap();
            assert!(single.x0.max_abs_diff(&batch[i].x0) < 1e-12);
        }
    }

    #[test]
    fn baseline_masks_padding() {
        let cfg = ModelConfig {
            sta: false,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, 5).unwrap();
        let x = rng::normal_tensor(&mut rng::stream(1, "x"), &[64, 2]);
        let p = Prompt::parse("ramp left").unwrap();
        let out = denoise(&x, 10, Cond::Text(&p), &m).unwrap();
        assert_eq!(out.valid, vec![true, true, false, false, false, false]);
        for blk in &out.cross_attn {
            for r in 0..64 {
                let row = blk.row(r);
                assert!(row[2..].iter().all(|&w| w == 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_stats_closed_forms() {
        let uniform = Tensor::full(&[3, 4], 0.25);
        let all = [true; 4];
        assert_eq!(attention_stats(&[(&uniform, &all)]).variance, 0.0);
        let one_hot = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let s = attention_stats(&[(&one_hot, &all)]);
        assert!((s.variance - 0.1875).abs() < 1e-15);
        assert!((s.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s.histogram[0], 0.75);
    }

    #[test]
    fn attention_profile_has_row_per_step() {
        let mut cfg = ModelConfig::miniature();
        cfg.timesteps = 20;
        let m = Model::new(cfg, 1).unwrap();
        let plan = SamplerPlan::equispaced(20, 6, SamplerMethod::Ddim).unwrap();
        let p = Prompt::parse("ramp left").unwrap();
        let prof = capture_attention_profile(&[&p, &p], &m, &plan, &GuidancePolicy::default(), 0).unwrap();
        assert_eq!(prof.len(), 6);
        assert_eq!(prof[0].t, 20);
        assert_eq!(attention_profile_csv(&prof).lines().count(), 7);
    }
}
