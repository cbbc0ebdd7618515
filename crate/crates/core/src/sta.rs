//! Toy text encoder, timestep features and the timestep-aware conditioner.
//!
//! For a prompt with features `c` and step `t`:
//!
//! ```text
//! L_t = L + z_t                      (z_t added to each of the K tokens)
//! L̂_t = γ·(L_t + α(z_t))/(σ + ε) + β
//! ĉ_t = L̂_t + Attn(q = L̂_t, k = v = c)
//! ```

use crate::autodiff::{Tape, Var};
use crate::corpus::{Prompt, MAX_PROMPT_LEN};
use crate::error::{Error, Result};
use crate::params::{Bound, Model, ModelConfig, SigmaMode};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
const MAX_PERIOD: f64 = 1000.0;

/// Per-token text features `c`, one row per prompt token.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub c: Tensor,
}

impl TextFeatures {
    pub fn n_tokens(&self) -> usize {
        self.c.shape()[0]
    }
}

/// Single-head scaled dot-product attention on 2-D operands.
/// Returns the projected output and the attention weights.
pub(crate) fn attend(
    tape: &mut Tape,
    b: &Bound,
    prefix: &str,
    queries: Var,
    context: Var,
) -> Result<(Var, Var)> {
    let q = tape.matmul(queries, b.get(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(context, b.get(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(context, b.get(&format!("{prefix}.wv"))?)?;
    let d = tape.shape(q)[1] as f64;
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, 1.0 / d.sqrt())?;
    let p = tape.softmax(s, 1)?;
    let o = tape.matmul(p, v)?;
    let o = tape.matmul(o, b.get(&format!("{prefix}.wo"))?)?;
    Ok((o, p))
}

/// Multi-head attention; head `h` owns feature columns `h·d/H .. (h+1)·d/H`.
/// Returns the projected output and the head-averaged weights.
fn attend_heads(
    tape: &mut Tape,
    b: &Bound,
    prefix: &str,
    queries: Var,
    context: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let q = tape.matmul(queries, b.get(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(context, b.get(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(context, b.get(&format!("{prefix}.wv"))?)?;
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let mut out: Option<Var> = None;
    let mut weights: Option<Var> = None;
    for h in 0..heads {
        let mask = tape.constant(Tensor::from_fn(&[d], |j| if j / dh == h { 1.0 } else { 0.0 }));
        let qh = tape.mul_row(q, mask)?;
        let vh = tape.mul_row(v, mask)?;
        let s = tape.matmul_nt(qh, k)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        let p = tape.softmax(s, 1)?;
        let o = tape.matmul(p, vh)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, o)?,
            None => o,
        });
        weights = Some(match weights {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
    }
    let o = tape.matmul(out.expect("at least one head"), b.get(&format!("{prefix}.wo"))?)?;
    let p = tape.scale(weights.expect("at least one head"), 1.0 / heads as f64)?;
    Ok((o, p))
}

/// Token features `[n × d_c]` on the tape.
pub fn text_forward(tape: &mut Tape, b: &Bound, prompt: &Prompt) -> Result<Var> {
    let ids = prompt.indices();
    if ids.is_empty() || ids.len() > MAX_PROMPT_LEN {
        return Err(Error::InvalidPrompt(format!("{} tokens", ids.len())));
    }
    let pos: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.gather_rows(b.get("text.tok")?, &ids)?;
    let pe = tape.gather_rows(b.get("text.pos")?, &pos)?;
    let x = tape.add(tok, pe)?;
    let a = tape.layer_norm(x, b.get("text.ln.g")?, b.get("text.ln.b")?, LN_EPS)?;
    let (o, _) = attend(tape, b, "text.attn", a, a)?;
    tape.add(x, o)
}

/// Sinusoidal basis `[B × 2F]`: sin and cos of `t·f_i` with geometric frequencies.
pub fn time_basis(ts: &[usize], freqs: usize) -> Result<Tensor> {
    if ts.is_empty() {
        return Err(Error::invalid("time_basis: no timesteps"));
    }
    let mut data = Vec::with_capacity(ts.len() * 2 * freqs);
    for &t in ts {
        for i in 0..freqs {
            let f = (-(MAX_PERIOD.ln()) * i as f64 / freqs as f64).exp();
            data.push((t as f64 * f).sin());
        }
        for i in 0..freqs {
            let f = (-(MAX_PERIOD.ln()) * i as f64 / freqs as f64).exp();
            data.push((t as f64 * f).cos());
        }
    }
    Tensor::new(vec![ts.len(), 2 * freqs], data)
}

/// Learned timestep features `[B × width]` from the MLP under `prefix`.
pub fn time_forward(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, prefix: &str, ts: &[usize]) -> Result<Var> {
    if let Some(&t) = ts.iter().find(|&&t| t > cfg.timesteps) {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 0,
            max: cfg.timesteps,
        });
    }
    let basis = tape.constant(time_basis(ts, cfg.time_freqs)?);
    let h = tape.matmul(basis, b.get(&format!("{prefix}.w1"))?)?;
    let h = tape.add_row(h, b.get(&format!("{prefix}.b1"))?)?;
    let h = tape.silu(h)?;
    let h = tape.matmul(h, b.get(&format!("{prefix}.w2"))?)?;
    tape.add_row(h, b.get(&format!("{prefix}.b2"))?)
}

/// Conditioner output for one sample.
#[derive(Clone, Copy, Debug)]
pub struct StaOut {
    /// `ĉ_t`, `[K × d_c]`.
    pub cond: Var,
    /// Normalised tokens `L̂_t`.
    pub tokens: Var,
    /// Cross-attention weights `[K × n]`.
    pub attn: Var,
}

/// `ĉ_t` from text features `c` and the timestep feature row `z` (`[1 × d_c]`).
pub fn sta_tape(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, c: Var, z: Var) -> Result<StaOut> {
    if !cfg.sta {
        return Err(Error::invalid("model was built without the conditioner"));
    }
    let lt = tape.add_row(b.get("sta.tokens")?, z)?;
    let a = tape.matmul(z, b.get("sta.alpha.w")?)?;
    let a = tape.add_row(a, b.get("sta.alpha.b")?)?;
    let u = tape.add_row(lt, a)?;
    let (g, beta) = (b.get("sta.gamma")?, b.get("sta.beta")?);
    let tokens = match cfg.sta_sigma {
        SigmaMode::Statistic => tape.feature_std_scale(u, g, beta, NORM_EPS)?,
        SigmaMode::Learned => {
            let s = tape.add_scalar(b.get("sta.sigma")?, NORM_EPS)?;
            let inv = tape.recip(s)?;
            let h = tape.mul_row(u, inv)?;
            let h = tape.mul_row(h, g)?;
            tape.add_row(h, beta)?
        }
    };
    let (o, attn) = attend_heads(tape, b, "sta.attn", tokens, c, cfg.sta_heads)?;
    let cond = tape.add(tokens, o)?;
    Ok(StaOut { cond, tokens, attn })
}

fn check_t(cfg: &ModelConfig, t: usize) -> Result<()> {
    if t > cfg.timesteps {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 0,
            max: cfg.timesteps,
        });
    }
    Ok(())
}

pub fn encode_prompt(prompt: &Prompt, model: &Model) -> Result<TextFeatures> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let c = text_forward(&mut tape, &b, prompt)?;
    Ok(TextFeatures {
        c: tape.value(c).clone(),
    })
}

/// `z_t` as a `d_c` vector.
pub fn timestep_embed(t: usize, model: &Model) -> Result<Tensor> {
    check_t(&model.config, t)?;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let z = time_forward(&mut tape, &b, &model.config, "sta.time", &[t])?;
    tape.value(z).reshape(&[model.config.cond_dim])
}

fn sta_values(text: &TextFeatures, t: usize, model: &Model) -> Result<(Tensor, Tensor)> {
    check_t(&model.config, t)?;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let c = tape.constant(text.c.clone());
    let z = time_forward(&mut tape, &b, &model.config, "sta.time", &[t])?;
    let out = sta_tape(&mut tape, &b, &model.config, c, z)?;
    Ok((tape.value(out.cond).clone(), tape.value(out.attn).clone()))
}

/// `ĉ_t`, `[K × d_c]`.
pub fn sta_forward(text: &TextFeatures, t: usize, model: &Model) -> Result<Tensor> {
    sta_values(text, t, model).map(|(c, _)| c)
}

/// Row-stochastic `[K × n]` weights used inside [`sta_forward`].
pub fn attention_weights(text: &TextFeatures, t: usize, model: &Model) -> Result<Tensor> {
    sta_values(text, t, model).map(|(_, a)| a)
}

/// The learned unconditional tokens.
pub fn null_condition(model: &Model) -> Result<Tensor> {
    model.params.get("null.tokens").cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelConfig::default(), 7).unwrap()
    }

    #[test]
    fn encoder_shapes_and_position_awareness() {
        let m = model();
        let one = encode_prompt(&Prompt::parse("arc").unwrap(), &m).unwrap();
        assert_eq!(one.c.shape(), &[1, 32]);
        let a = encode_prompt(&Prompt::parse("sine left fast").unwrap(), &m).unwrap();
        let b = encode_prompt(&Prompt::parse("sine fast left").unwrap(), &m).unwrap();
        assert!(a.c.max_abs_diff(&b.c) > 1e-6);
        let a2 = encode_prompt(&Prompt::parse("sine left fast").unwrap(), &m).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn timestep_embedding_distinguishes_endpoints() {
        let m = model();
        let z0 = timestep_embed(0, &m).unwrap();
        let zt = timestep_embed(50, &m).unwrap();
        assert!((z0.norm() - zt.norm()).abs() > 1e-3);
        assert_eq!(timestep_embed(20, &m).unwrap(), timestep_embed(20, &m).unwrap());
        assert!(matches!(timestep_embed(51, &m), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn zeroed_scale_shift_and_projection_give_zero() {
        let mut m = model();
        let dc = m.config.cond_dim;
        *m.params.get_mut("sta.gamma").unwrap() = Tensor::zeros(&[dc]);
        *m.params.get_mut("sta.beta").unwrap() = Tensor::zeros(&[dc]);
        *m.params.get_mut("sta.attn.wo").unwrap() = Tensor::zeros(&[dc, dc]);
        let text = encode_prompt(&Prompt::parse("ramp right").unwrap(), &m).unwrap();
        let c = sta_forward(&text, 10, &m).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_projection_leaves_normalised_tokens() {
        let mut m = model();
        let dc = m.config.cond_dim;
        *m.params.get_mut("sta.attn.wo").unwrap() = Tensor::zeros(&[dc, dc]);
        let text = encode_prompt(&Prompt::parse("ramp right").unwrap(), &m).unwrap();
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, false);
        let c = tape.constant(text.c.clone());
        let z = time_forward(&mut tape, &b, &m.config, "sta.time", &[10]).unwrap();
        let out = sta_tape(&mut tape, &b, &m.config, c, z).unwrap();
        assert_eq!(tape.value(out.cond), tape.value(out.tokens));
    }

    #[test]
    fn output_depends_on_timestep() {
        let m = model();
        let text = encode_prompt(&Prompt::parse("sine left slow small").unwrap(), &m).unwrap();
        let a = sta_forward(&text, 5, &m).unwrap();
        let b = sta_forward(&text, 40, &m).unwrap();
        assert_eq!(a.shape(), &[8, 32]);
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = model();
        let text = encode_prompt(&Prompt::parse("arc").unwrap(), &m).unwrap();
        let w = attention_weights(&text, 25, &m).unwrap();
        assert_eq!(w.shape(), &[8, 1]);
        assert!(w.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_rows_are_stochastic_and_reproducible() {
        let m = model();
        let text = encode_prompt(&Prompt::parse("ramp left fast large jerky").unwrap(), &m).unwrap();
        let w = attention_weights(&text, 12, &m).unwrap();
        for r in 0..8 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let again = attention_weights(&text, 12, &m).unwrap();
        assert!(w.max_abs_diff(&again) <= 1e-12);
    }

    #[test]
    fn one_head_matches_plain_attention() {
        let m = model();
        let text = encode_prompt(&Prompt::parse("sine right slow").unwrap(), &m).unwrap();
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, false);
        let q = tape.constant(m.params.get("sta.tokens").unwrap().clone());
        let c = tape.constant(text.c.clone());
        let (o1, p1) = attend_heads(&mut tape, &b, "sta.attn", q, c, 1).unwrap();
        let (o2, p2) = attend(&mut tape, &b, "sta.attn", q, c).unwrap();
        assert!(tape.value(o1).max_abs_diff(tape.value(o2)) < 1e-12);
        assert!(tape.value(p1).max_abs_diff(tape.value(p2)) < 1e-12);
    }

    #[test]
    fn uniform_logits_give_uniform_rows() {
        let mut m = model();
        let dc = m.config.cond_dim;
        *m.params.get_mut("sta.attn.wq").unwrap() = Tensor::zeros(&[dc, dc]);
        let text = encode_prompt(&Prompt::parse("sine left slow").unwrap(), &m).unwrap();
        let w = attention_weights(&text, 3, &m).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn null_condition_is_fixed() {
        let m = model();
        let a = null_condition(&m).unwrap();
        assert_eq!(a.shape(), &[8, 32]);
        assert_eq!(a, null_condition(&m).unwrap());
    }

    #[test]
    fn learned_sigma_variant_runs() {
        let cfg = ModelConfig {
            sta_sigma: SigmaMode::Learned,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, 1).unwrap();
        let text = encode_prompt(&Prompt::parse("sine").unwrap(), &m).unwrap();
        assert!(sta_forward(&text, 7, &m).unwrap().is_finite());
        assert!(m.params.get("sta.sigma").is_ok());
    }
}
