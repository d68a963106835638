//! The trainable sequence policy.
//!
//! The prompt is pooled into a single summary vector of signed token
//! embeddings. Each next-token distribution is then a one-hidden-layer tanh
//! network over the summary concatenated with the embeddings of the last `k`
//! generated tokens:
//!
//! ```text
//! logits = W2ᵀ tanh(W1ᵀ [summary; e(w_1); ...; e(w_k)] + b1) + b2
//! ```
//!
//! Gradients are exact reverse mode, written out by hand; see the
//! finite-difference tests at the bottom of the file and in `tests/`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::symlang::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    /// Decoder context window `k`.
    pub window: usize,
    pub hidden: usize,
    /// Parameters are initialised uniformly in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 16,
            window: 4,
            hidden: 64,
            init_scale: 0.08,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window == 0 || self.hidden == 0 {
            return Err(Error::invalid("policy.embed_dim, policy.window and policy.hidden must be positive"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::invalid("policy.init_scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn shape(&self, vocab: usize) -> PolicyShape {
        PolicyShape {
            vocab,
            embed: self.embed_dim,
            window: self.window,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyShape {
    pub vocab: usize,
    pub embed: usize,
    pub window: usize,
    pub hidden: usize,
}

impl PolicyShape {
    pub fn input(&self) -> usize {
        self.embed * (self.window + 1)
    }

    /// Named parameter blocks in storage order with their 2-d shapes.
    pub fn blocks(&self) -> [(&'static str, [usize; 2]); 5] {
        [
            ("embed", [self.vocab, self.embed]),
            ("w1", [self.input(), self.hidden]),
            ("b1", [1, self.hidden]),
            ("w2", [self.hidden, self.vocab]),
            ("b2", [1, self.vocab]),
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, [r, c])| r * c).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offsets(&self) -> [usize; 6] {
        let mut out = [0; 6];
        for (i, (_, [r, c])) in self.blocks().iter().enumerate() {
            out[i + 1] = out[i] + r * c;
        }
        out
    }
}

/// All policy parameters in one flat buffer. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub shape: PolicyShape,
    pub data: Vec<f64>,
}

macro_rules! block {
    ($get:ident, $get_mut:ident, $idx:expr) => {
        pub fn $get(&self) -> &[f64] {
            let o = self.shape.offsets();
            &self.data[o[$idx]..o[$idx + 1]]
        }

        pub fn $get_mut(&mut self) -> &mut [f64] {
            let o = self.shape.offsets();
            &mut self.data[o[$idx]..o[$idx + 1]]
        }
    };
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        PolicyParams {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn init(shape: PolicyShape, scale: f64, rng: &mut Stream) -> Self {
        let data = (0..shape.len())
            .map(|_| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
            .collect();
        PolicyParams { shape, data }
    }

    block!(embed, embed_mut, 0);
    block!(w1, w1_mut, 1);
    block!(b1, b1_mut, 2);
    block!(w2, w2_mut, 3);
    block!(b2, b2_mut, 4);

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        let i = self.shape.blocks().iter().position(|(n, _)| *n == name)?;
        let o = self.shape.offsets();
        Some(&self.data[o[i]..o[i + 1]])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.shape.blocks().iter().position(|(n, _)| *n == name)?;
        let o = self.shape.offsets();
        Some(&mut self.data[o[i]..o[i + 1]])
    }

    fn embedding(&self, t: Token) -> &[f64] {
        let d = self.shape.embed;
        &self.embed()[t.id() * d..(t.id() + 1) * d]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &PolicyParams, alpha: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-token pooling coefficients for a prompt.
///
/// Tokens inside a REJECTED segment count negatively and all others
/// positively. A `DIM_j` token additionally takes the sign of the `POS`/`NEG`
/// that follows it, so the pooled vector carries the signed per-dimension
/// evidence rather than only which dimensions were mentioned.
pub fn pooling_signs(prompt: &[Token]) -> Vec<f64> {
    let mut segment = 1.0;
    prompt
        .iter()
        .enumerate()
        .map(|(i, &t)| match t {
            Token::REJECTED => {
                segment = -1.0;
                1.0
            }
            Token::CHOSEN | Token::UGC | Token::SIG_SEP | Token::BOS | Token::THINK_OPEN => {
                segment = 1.0;
                1.0
            }
            _ if t.dim_index().is_some() => {
                let value = prompt.get(i + 1).and_then(|n| n.sign()).unwrap_or(1) as f64;
                segment * value
            }
            _ => segment,
        })
        .collect()
}

/// Mean of signed prompt-token embeddings.
pub fn encode_prompt(params: &PolicyParams, prompt: &[Token]) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::invalid("cannot encode an empty prompt"));
    }
    if prompt.iter().any(|t| t.id() >= params.shape.vocab) {
        return Err(Error::invalid("prompt token outside the policy vocabulary"));
    }
    let signs = pooling_signs(prompt);
    let n = prompt.len() as f64;
    let mut summary = vec![0.0; params.shape.embed];
    for (&t, s) in prompt.iter().zip(&signs) {
        for (acc, e) in summary.iter_mut().zip(params.embedding(t)) {
            *acc += s * e;
        }
    }
    summary.iter_mut().for_each(|v| *v /= n);
    Ok(summary)
}

/// Last `k` generated tokens, oldest first, left-padded with BOS.
pub fn window_at(generated: &[Token], k: usize) -> Vec<Token> {
    let start = generated.len().saturating_sub(k);
    let mut w = vec![Token::BOS; k - (generated.len() - start)];
    w.extend_from_slice(&generated[start..]);
    w
}

struct StepCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn step_forward(params: &PolicyParams, summary: &[f64], window: &[Token]) -> StepCache {
    let PolicyShape {
        vocab,
        embed,
        hidden,
        ..
    } = params.shape;
    let mut input = Vec::with_capacity(params.shape.input());
    input.extend_from_slice(summary);
    for &t in window {
        input.extend_from_slice(params.embedding(t));
    }
    let w1 = params.w1();
    let mut pre = params.b1().to_vec();
    for (i, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &w1[i * hidden..(i + 1) * hidden];
        for (p, w) in pre.iter_mut().zip(row) {
            *p += x * w;
        }
    }
    let h: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
    let w2 = params.w2();
    let mut logits = params.b2().to_vec();
    for (j, &hj) in h.iter().enumerate() {
        let row = &w2[j * vocab..(j + 1) * vocab];
        for (l, w) in logits.iter_mut().zip(row) {
            *l += hj * w;
        }
    }
    debug_assert_eq!(input.len(), embed * (window.len() + 1));
    StepCache {
        input,
        hidden: h,
        logits,
    }
}

pub fn next_logits(params: &PolicyParams, summary: &[f64], window: &[Token]) -> Vec<f64> {
    step_forward(params, summary, window).logits
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// Teacher-forced log-probability of `output` given `prompt`.
pub fn sequence_logprob(params: &PolicyParams, prompt: &[Token], output: &[Token]) -> Result<SequenceLogProb> {
    if output.is_empty() {
        return Err(Error::invalid("output sequence is empty"));
    }
    if output.iter().any(|t| t.id() >= params.shape.vocab) {
        return Err(Error::invalid("output token outside the policy vocabulary"));
    }
    let summary = encode_prompt(params, prompt)?;
    let k = params.shape.window;
    let per_token: Vec<f64> = (0..output.len())
        .map(|t| {
            let logits = next_logits(params, &summary, &window_at(&output[..t], k));
            log_softmax(&logits)[output[t].id()]
        })
        .collect();
    Ok(SequenceLogProb {
        total: per_token.iter().sum(),
        per_token,
    })
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Accumulate the parameter gradient of one decoder step given `∂L/∂logits`.
/// Returns `∂L/∂summary` for this step.
fn step_backward(
    params: &PolicyParams,
    cache: &StepCache,
    window: &[Token],
    dlogits: &[f64],
    grad: &mut PolicyParams,
) -> Vec<f64> {
    let PolicyShape {
        vocab,
        embed,
        hidden,
        ..
    } = params.shape;
    for (g, d) in grad.b2_mut().iter_mut().zip(dlogits) {
        *g += d;
    }
    let w2 = params.w2();
    let mut dpre = vec![0.0; hidden];
    {
        let gw2 = grad.w2_mut();
        for j in 0..hidden {
            let hj = cache.hidden[j];
            let row = &w2[j * vocab..(j + 1) * vocab];
            let grow = &mut gw2[j * vocab..(j + 1) * vocab];
            let mut dh = 0.0;
            for v in 0..vocab {
                grow[v] += hj * dlogits[v];
                dh += row[v] * dlogits[v];
            }
            dpre[j] = dh * (1.0 - hj * hj);
        }
    }
    for (g, d) in grad.b1_mut().iter_mut().zip(&dpre) {
        *g += d;
    }
    let w1 = params.w1();
    let mut dinput = vec![0.0; cache.input.len()];
    {
        let gw1 = grad.w1_mut();
        for (i, &x) in cache.input.iter().enumerate() {
            let row = &w1[i * hidden..(i + 1) * hidden];
            let grow = &mut gw1[i * hidden..(i + 1) * hidden];
            let mut acc = 0.0;
            for j in 0..hidden {
                grow[j] += x * dpre[j];
                acc += row[j] * dpre[j];
            }
            dinput[i] = acc;
        }
    }
    let gemb = grad.embed_mut();
    for (slot, &t) in window.iter().enumerate() {
        let src = &dinput[(slot + 1) * embed..(slot + 2) * embed];
        for (g, d) in gemb[t.id() * embed..(t.id() + 1) * embed].iter_mut().zip(src) {
            *g += d;
        }
    }
    dinput.truncate(embed);
    dinput
}

fn prompt_backward(params: &PolicyParams, prompt: &[Token], dsummary: &[f64], grad: &mut PolicyParams) {
    let embed = params.shape.embed;
    let n = prompt.len() as f64;
    let gemb = grad.embed_mut();
    for (&t, s) in prompt.iter().zip(pooling_signs(prompt)) {
        let c = s / n;
        for (g, d) in gemb[t.id() * embed..(t.id() + 1) * embed].iter_mut().zip(dsummary) {
            *g += c * d;
        }
    }
}

/// Parameter gradient of `Σ_i ⟨dlogits_i, logits_i⟩` for one step; the
/// vector-Jacobian product of [`next_logits`] including the prompt encoder.
pub fn next_logits_vjp(params: &PolicyParams, prompt: &[Token], window: &[Token], dlogits: &[f64]) -> Result<PolicyParams> {
    let summary = encode_prompt(params, prompt)?;
    let cache = step_forward(params, &summary, window);
    let mut grad = PolicyParams::zeros(params.shape);
    let ds = step_backward(params, &cache, window, dlogits, &mut grad);
    prompt_backward(params, prompt, &ds, &mut grad);
    Ok(grad)
}

/// Accumulate `Σ_t weights[t] · ∇ log p(output_t | prompt, prefix)` into `grad`.
fn sequence_backward(params: &PolicyParams, prompt: &[Token], output: &[Token], weights: &[f64], grad: &mut PolicyParams) -> Result<()> {
    let summary = encode_prompt(params, prompt)?;
    let k = params.shape.window;
    let mut dsummary = vec![0.0; params.shape.embed];
    for (t, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let window = window_at(&output[..t], k);
        let cache = step_forward(params, &summary, &window);
        let probs = softmax(&cache.logits);
        let mut dlogits: Vec<f64> = probs.iter().map(|p| -w * p).collect();
        dlogits[output[t].id()] += w;
        let ds = step_backward(params, &cache, &window, &dlogits, grad);
        for (a, b) in dsummary.iter_mut().zip(ds) {
            *a += b;
        }
    }
    prompt_backward(params, prompt, &dsummary, grad);
    Ok(())
}

/// One prompt/output pair fed to [`backward`].
#[derive(Debug, Clone, Copy)]
pub struct SeqRef<'a> {
    pub prompt: &'a [Token],
    pub output: &'a [Token],
}

/// Value and gradient of a loss built from per-token log-probabilities.
///
/// `loss` receives the per-token log-probs of every sequence and returns the
/// loss value together with `∂loss/∂logp` for each token. The chain rule
/// through the policy is then applied exactly. Sequences are processed in
/// fixed-size chunks whose partial gradients are summed in order, so the
/// result does not depend on the thread count.
pub fn backward<F>(params: &PolicyParams, seqs: &[SeqRef<'_>], loss: F) -> Result<(f64, PolicyParams)>
where
    F: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let logps: Vec<Vec<f64>> = seqs
        .par_iter()
        .map(|s| sequence_logprob(params, s.prompt, s.output).map(|l| l.per_token))
        .collect::<Result<_>>()?;
    let (value, dlogp) = loss(&logps);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if dlogp.len() != seqs.len() || dlogp.iter().zip(seqs).any(|(d, s)| d.len() != s.output.len()) {
        return Err(Error::invalid("loss closure returned mismatched gradient shapes"));
    }
    if dlogp.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    const CHUNK: usize = 8;
    let partials: Vec<PolicyParams> = seqs
        .par_chunks(CHUNK)
        .zip(dlogp.par_chunks(CHUNK))
        .map(|(ss, ds)| {
            let mut g = PolicyParams::zeros(params.shape);
            for (s, d) in ss.iter().zip(ds) {
                sequence_backward(params, s.prompt, s.output, d, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grad = PolicyParams::zeros(params.shape);
    for g in &partials {
        grad.add_scaled(g, 1.0);
    }
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub nucleus_p: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            temperature: 0.9,
            top_k: 10,
            nucleus_p: 0.95,
            max_len: 64,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("decode.temperature must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("decode.top_k must be positive"));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::invalid("decode.nucleus_p must be in (0, 1]"));
        }
        if self.max_len < 4 {
            return Err(Error::invalid("decode.max_len must be at least 4"));
        }
        Ok(())
    }
}

/// A generated sequence with both views of its log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<Token>,
    /// Log-probs under the truncated, renormalised sampling distribution.
    pub sampler_logprobs: Vec<f64>,
    /// Log-probs under the full model distribution at temperature 1; these
    /// feed the importance ratio during policy optimisation.
    pub model_logprobs: Vec<f64>,
}

/// The distribution actually sampled from at one step: `(token ids, probs)`
/// after temperature scaling and top-k/nucleus truncation.
pub fn truncated_distribution(logits: &[f64], config: &DecodeConfig) -> (Vec<usize>, Vec<f64>) {
    let scaled: Vec<f64> = logits.iter().map(|l| l / config.temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    order.truncate(config.top_k.min(scaled.len()));
    let kept: Vec<f64> = order.iter().map(|&i| scaled[i]).collect();
    let probs = softmax(&kept);
    let mut cum = 0.0;
    let mut cut = probs.len();
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if cum >= config.nucleus_p {
            cut = i + 1;
            break;
        }
    }
    order.truncate(cut);
    let z: f64 = probs[..cut].iter().sum();
    let probs = probs[..cut].iter().map(|p| p / z).collect();
    (order, probs)
}

pub fn sample(params: &PolicyParams, prompt: &[Token], config: &DecodeConfig, rng: &mut Stream) -> Result<Sampled> {
    config.validate()?;
    let summary = encode_prompt(params, prompt)?;
    let k = params.shape.window;
    let mut out = Sampled {
        tokens: Vec::new(),
        sampler_logprobs: Vec::new(),
        model_logprobs: Vec::new(),
    };
    while out.tokens.len() < config.max_len {
        let logits = next_logits(params, &summary, &window_at(&out.tokens, k));
        let (ids, probs) = truncated_distribution(&logits, config);
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut pick = ids.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                pick = i;
                break;
            }
        }
        let tok = Token(ids[pick] as u16);
        out.sampler_logprobs.push(probs[pick].ln());
        out.model_logprobs.push(log_softmax(&logits)[tok.id()]);
        out.tokens.push(tok);
        if tok == Token::EOS {
            break;
        }
    }
    Ok(out)
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy(params: &PolicyParams, prompt: &[Token], max_len: usize) -> Result<Sampled> {
    let summary = encode_prompt(params, prompt)?;
    let k = params.shape.window;
    let mut out = Sampled {
        tokens: Vec::new(),
        sampler_logprobs: Vec::new(),
        model_logprobs: Vec::new(),
    };
    while out.tokens.len() < max_len {
        let logits = next_logits(params, &summary, &window_at(&out.tokens, k));
        let best = (0..logits.len())
            .fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        let tok = Token(best as u16);
        out.sampler_logprobs.push(0.0);
        out.model_logprobs.push(log_softmax(&logits)[best]);
        out.tokens.push(tok);
        if tok == Token::EOS {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_shape() -> PolicyShape {
        PolicyConfig {
            embed_dim: 4,
            window: 2,
            hidden: 8,
            init_scale: 0.5,
        }
        .shape(Token::FIXED + 2)
    }

    fn tiny() -> PolicyParams {
        PolicyParams::init(tiny_shape(), 0.5, &mut rng::stream(3, &[rng::domain::INIT]))
    }

    fn prompt() -> Vec<Token> {
        vec![
            Token::BOS,
            Token::SIG_SEP,
            Token::CHOSEN,
            Token::dim(0),
            Token::POS,
            Token::REJECTED,
            Token::dim(1),
            Token::NEG,
            Token::THINK_OPEN,
        ]
    }

    #[test]
    fn zero_embeddings_give_zero_summary() {
        let p = PolicyParams::zeros(tiny_shape());
        assert!(encode_prompt(&p, &prompt()).unwrap().iter().all(|&v| v == 0.0));
        assert!(encode_prompt(&p, &[]).is_err());
    }

    #[test]
    fn single_token_summary_is_its_embedding() {
        let p = tiny();
        let s = encode_prompt(&p, &[Token::THINK_OPEN]).unwrap();
        assert_eq!(s, p.embedding(Token::THINK_OPEN));
    }

    #[test]
    fn swapping_segments_negates_their_contribution() {
        let p = tiny();
        let base = [Token::BOS, Token::SIG_SEP, Token::THINK_OPEN];
        let a = prompt();
        let b = vec![
            Token::BOS,
            Token::SIG_SEP,
            Token::REJECTED,
            Token::dim(0),
            Token::POS,
            Token::CHOSEN,
            Token::dim(1),
            Token::NEG,
            Token::THINK_OPEN,
        ];
        // Marker tokens are neutral; strip their and the frame's share.
        let n = a.len() as f64;
        let frame = encode_prompt(&p, &base).unwrap();
        let markers: Vec<f64> = (0..4)
            .map(|i| p.embedding(Token::CHOSEN)[i] + p.embedding(Token::REJECTED)[i])
            .collect();
        let sa = encode_prompt(&p, &a).unwrap();
        let sb = encode_prompt(&p, &b).unwrap();
        for i in 0..4 {
            let fixed = frame[i] * 3.0 / n + markers[i] / n;
            assert!(((sa[i] - fixed) + (sb[i] - fixed)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let p = PolicyParams::zeros(tiny_shape());
        let s = encode_prompt(&p, &prompt()).unwrap();
        let l = next_logits(&p, &s, &[Token::BOS, Token::BOS]);
        assert!(l.iter().all(|&v| v == 0.0));
        let lp = sequence_logprob(&p, &prompt(), &[Token::EOS]).unwrap();
        assert!((lp.total - (1.0 / p.shape.vocab as f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn logprob_total_is_sum_and_non_positive() {
        let p = tiny();
        let out = [Token::dim(0), Token::THINK_CLOSE, Token::ANS_OPEN, Token::EOS];
        let lp = sequence_logprob(&p, &prompt(), &out).unwrap();
        assert_eq!(lp.per_token.len(), out.len());
        assert_eq!(lp.total, lp.per_token.iter().sum::<f64>());
        assert!(lp.per_token.iter().all(|&v| v <= 0.0 && v.exp() > 0.0));
        assert!(sequence_logprob(&p, &prompt(), &[]).is_err());
    }

    #[test]
    fn raising_a_logit_raises_its_logprob() {
        let mut p = tiny();
        let before = sequence_logprob(&p, &prompt(), &[Token::POS]).unwrap().total;
        p.b2_mut()[Token::POS.id()] += 0.1;
        let after = sequence_logprob(&p, &prompt(), &[Token::POS]).unwrap().total;
        assert!(after > before);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = tiny();
        let s = encode_prompt(&p, &prompt()).unwrap();
        for w in [[Token::BOS, Token::BOS], [Token::dim(1), Token::NEG]] {
            let total: f64 = softmax(&next_logits(&p, &s, &w)).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_padding() {
        assert_eq!(window_at(&[], 3), vec![Token::BOS; 3]);
        assert_eq!(
            window_at(&[Token::POS, Token::NEG, Token::EOS, Token::dim(0)], 2),
            vec![Token::EOS, Token::dim(0)]
        );
    }

    #[test]
    fn top_k_one_is_greedy() {
        let p = tiny();
        let cfg = DecodeConfig {
            top_k: 1,
            max_len: 12,
            ..DecodeConfig::default()
        };
        let g = greedy(&p, &prompt(), 12).unwrap();
        for seed in 0..5 {
            let s = sample(&p, &prompt(), &cfg, &mut rng::stream(seed, &[0])).unwrap();
            assert_eq!(s.tokens, g.tokens);
            assert!(s.sampler_logprobs.iter().all(|&l| l == 0.0));
        }
    }

    #[test]
    fn tiny_temperature_is_argmax() {
        let p = tiny();
        let cfg = DecodeConfig {
            temperature: 1e-9,
            top_k: 100,
            nucleus_p: 1.0,
            max_len: 12,
        };
        let g = greedy(&p, &prompt(), 12).unwrap();
        let s = sample(&p, &prompt(), &cfg, &mut rng::stream(1, &[0])).unwrap();
        assert_eq!(s.tokens, g.tokens);
    }

    #[test]
    fn sampling_is_reproducible_and_records_model_logprobs() {
        let p = tiny();
        let cfg = DecodeConfig::default();
        let a = sample(&p, &prompt(), &cfg, &mut rng::stream(9, &[0])).unwrap();
        let b = sample(&p, &prompt(), &cfg, &mut rng::stream(9, &[0])).unwrap();
        assert_eq!(a, b);
        let lp = sequence_logprob(&p, &prompt(), &a.tokens).unwrap();
        assert_eq!(lp.per_token, a.model_logprobs);
    }

    #[test]
    fn nucleus_keeps_smallest_sufficient_prefix() {
        let cfg = DecodeConfig {
            temperature: 1.0,
            top_k: 10,
            nucleus_p: 0.7,
            max_len: 8,
        };
        let logits = [2.0f64.ln(), 5.0f64.ln(), 3.0f64.ln(), 0.0];
        let (ids, probs) = truncated_distribution(&logits, &cfg);
        // probs 5/11, 3/11 reach 8/11 >= 0.7
        assert_eq!(ids, vec![1, 2]);
        assert!((probs[0] - 5.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = tiny();
        let out = [Token::POS, Token::EOS];
        let seqs = [SeqRef {
            prompt: &prompt(),
            output: &out,
        }];
        let (v, g) = backward(&p, &seqs, |lp| (3.0, lp.iter().map(|l| vec![0.0; l.len()]).collect())).unwrap();
        assert_eq!(v, 3.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let p = tiny();
        let pr = prompt();
        let out = [Token::POS, Token::dim(1), Token::EOS];
        let seqs = [SeqRef { prompt: &pr, output: &out }];
        let f = |c: f64| {
            backward(&p, &seqs, |lp| {
                (c * lp[0].iter().sum::<f64>(), vec![vec![c; lp[0].len()]])
            })
            .unwrap()
            .1
        };
        let g1 = f(1.0);
        let g3 = f(-3.0);
        for (a, b) in g1.data.iter().zip(&g3.data) {
            assert!((b + 3.0 * a).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let p = tiny();
        let pr = prompt();
        let out = [Token::EOS];
        let seqs = [SeqRef { prompt: &pr, output: &out }];
        let r = backward(&p, &seqs, |_| (f64::NAN, vec![vec![0.0]]));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
