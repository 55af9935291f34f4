//! Tabular autoregressive softmax policy over a full prefix tree.
//!
//! Contexts are the token prefixes of length `< T`, stored breadth first:
//! the root is context 0 and the child of context `c` through token `v` is
//! `c * V + v + 1`. Extending the same numbering one level further maps the
//! complete sequences onto `V^T` leaves in lexicographic order, which is the
//! sequence index used by [`TabularPolicy::sequence_probabilities`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::advantage::RewardSign;
use crate::{LabError, Result, Scalar};

/// Largest admissible sequence space.
pub const MAX_SPACE: usize = 65_536;

/// `V^T`, or a size error when it exceeds [`MAX_SPACE`].
pub fn space_size(vocab: usize, len: usize) -> Result<usize> {
    if vocab < 2 || len < 1 {
        return Err(LabError::Shape(format!(
            "need V >= 2 and T >= 1, got V = {vocab}, T = {len}"
        )));
    }
    match u32::try_from(len).ok().and_then(|l| vocab.checked_pow(l)) {
        Some(n) if n <= MAX_SPACE => Ok(n),
        _ => Err(LabError::Size { vocab, len }),
    }
}

/// Number of contexts of a full prefix tree: `(V^T - 1) / (V - 1)`.
pub fn context_count(vocab: usize, len: usize) -> usize {
    (vocab.pow(len as u32) - 1) / (vocab - 1)
}

/// Lexicographic index of a sequence (first token most significant).
pub fn encode_sequence(tokens: &[usize], vocab: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * vocab + t)
}

pub fn decode_sequence(mut index: usize, vocab: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = index % vocab;
        index /= vocab;
    }
    out
}

/// A parameter-indexed container laid out like the logits table.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    vocab: usize,
    len: usize,
    values: Vec<F>,
}

impl<F: Scalar> Params<F> {
    pub fn zeros(vocab: usize, len: usize) -> Self {
        Self {
            vocab,
            len,
            values: vec![F::zero(); context_count(vocab, len) * vocab],
        }
    }

    pub fn from_values(vocab: usize, len: usize, values: Vec<F>) -> Result<Self> {
        let expected = context_count(vocab, len) * vocab;
        if values.len() != expected {
            return Err(LabError::Shape(format!(
                "expected {expected} parameters, got {}",
                values.len()
            )));
        }
        Ok(Self { vocab, len, values })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn get(&self, context: usize, token: usize) -> F {
        self.values[context * self.vocab + token]
    }

    pub fn row(&self, context: usize) -> &[F] {
        &self.values[context * self.vocab..(context + 1) * self.vocab]
    }

    fn row_mut(&mut self, context: usize) -> &mut [F] {
        &mut self.values[context * self.vocab..(context + 1) * self.vocab]
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.vocab != other.vocab || self.len != other.len {
            return Err(LabError::Shape(format!(
                "parameter shapes differ: (V={}, T={}) vs (V={}, T={})",
                self.vocab, self.len, other.vocab, other.len
            )));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: F) -> Result<()> {
        self.check_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: F) {
        for v in &mut self.values {
            *v = *v * factor;
        }
    }

    pub fn dot(&self, other: &Self) -> Result<F> {
        self.check_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> F {
        self.values.iter().map(|&v| v * v).sum::<F>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> Result<F> {
        let d = self.dot(other)?;
        Ok(d / (self.norm() * other.norm()))
    }
}

/// A fixed-length response and its sampling log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<F> {
    pub tokens: Vec<usize>,
    /// Sum of `per_token_logprob_old`.
    pub logprob_old: F,
    pub per_token_logprob_old: Vec<F>,
    pub reward: Option<RewardSign>,
}

impl<F: Scalar> Trajectory<F> {
    fn from_token_logprobs(tokens: Vec<usize>, per_token: Vec<F>) -> Self {
        Self {
            tokens,
            logprob_old: per_token.iter().copied().sum(),
            per_token_logprob_old: per_token,
            reward: None,
        }
    }
}

/// Initial logits of a fresh policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyInit {
    /// All logits zero.
    #[default]
    Uniform,
    /// i.i.d. `N(0, scale^2)` logits.
    Gaussian { scale: f64 },
    /// `strength` added to the anchor sequence's token at every context of
    /// the matching depth, plus optional Gaussian noise.
    Peaked {
        strength: f64,
        #[serde(default)]
        noise: f64,
    },
}

impl PolicyInit {
    /// Builds a policy. `anchor` is the favoured sequence for `Peaked`
    /// (ignored otherwise; all zeros when absent).
    pub fn build<F: Scalar, R: Rng + ?Sized>(
        &self,
        vocab: usize,
        len: usize,
        prompt_id: &str,
        anchor: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<TabularPolicy<F>> {
        let mut policy = TabularPolicy::uniform(vocab, len, prompt_id)?;
        let noise = match self {
            PolicyInit::Uniform => 0.0,
            PolicyInit::Gaussian { scale } => *scale,
            PolicyInit::Peaked { noise, .. } => *noise,
        };
        if noise > 0.0 {
            for l in &mut policy.logits {
                let z: f64 = StandardNormal.sample(rng);
                *l = F::lit(noise * z);
            }
        }
        if let PolicyInit::Peaked { strength, .. } = self {
            let zeros = vec![0; len];
            let anchor = anchor.unwrap_or(&zeros);
            if anchor.len() != len || anchor.iter().any(|&t| t >= vocab) {
                return Err(LabError::Shape(
                    "anchor sequence does not fit the policy".into(),
                ));
            }
            let mut start = 0;
            let mut width = 1;
            for &tok in anchor.iter().take(len) {
                for ctx in start..start + width {
                    let i = ctx * vocab + tok;
                    policy.logits[i] = policy.logits[i] + F::lit(*strength);
                }
                start += width;
                width *= vocab;
            }
        }
        Ok(policy)
    }
}

/// Softmax policy `pi(y_t | x, y_<t)` with one logit row per prefix context.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy<F> {
    vocab: usize,
    len: usize,
    prompt_id: String,
    logits: Vec<F>,
}

impl<F: Scalar> TabularPolicy<F> {
    pub fn uniform(vocab: usize, len: usize, prompt_id: impl Into<String>) -> Result<Self> {
        space_size(vocab, len)?;
        Ok(Self {
            vocab,
            len,
            prompt_id: prompt_id.into(),
            logits: vec![F::zero(); context_count(vocab, len) * vocab],
        })
    }

    pub fn from_logits(
        vocab: usize,
        len: usize,
        prompt_id: impl Into<String>,
        logits: Vec<F>,
    ) -> Result<Self> {
        space_size(vocab, len)?;
        let expected = context_count(vocab, len) * vocab;
        if logits.len() != expected {
            return Err(LabError::Shape(format!(
                "expected {expected} logits, got {}",
                logits.len()
            )));
        }
        Ok(Self {
            vocab,
            len,
            prompt_id: prompt_id.into(),
            logits,
        })
    }

    /// A policy that puts logit `big` on `tokens[t]` at every depth-`t`
    /// context and 0 elsewhere.
    pub fn one_hot(
        vocab: usize,
        len: usize,
        prompt_id: impl Into<String>,
        tokens: &[usize],
        big: F,
    ) -> Result<Self> {
        let mut p = Self::uniform(vocab, len, prompt_id)?;
        p.check_tokens(tokens)?;
        let mut start = 0;
        let mut width = 1;
        for &tok in tokens {
            for ctx in start..start + width {
                p.logits[ctx * vocab + tok] = big;
            }
            start += width;
            width *= vocab;
        }
        Ok(p)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab
    }

    pub fn space_size(&self) -> usize {
        self.vocab.pow(self.len as u32)
    }

    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn logits_at(&self, context: usize) -> &[F] {
        &self.logits[context * self.vocab..(context + 1) * self.vocab]
    }

    pub fn params(&self) -> Params<F> {
        Params {
            vocab: self.vocab,
            len: self.len,
            values: self.logits.clone(),
        }
    }

    pub fn zeros_like(&self) -> Params<F> {
        Params::zeros(self.vocab, self.len)
    }

    pub fn child(&self, context: usize, token: usize) -> usize {
        context * self.vocab + token + 1
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.len {
            return Err(LabError::Shape(format!(
                "sequence length {} != T = {}",
                tokens.len(),
                self.len
            )));
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= self.vocab)
        {
            return Err(LabError::InvalidToken {
                token,
                position,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    /// Context index of each position of `tokens` (`T` entries).
    pub fn contexts_of(&self, tokens: &[usize]) -> Vec<usize> {
        let mut ctx = 0;
        tokens
            .iter()
            .map(|&t| {
                let here = ctx;
                ctx = self.child(ctx, t);
                here
            })
            .collect()
    }

    /// Token distribution at a context under `softmax(logits / temperature)`.
    pub fn distribution(&self, context: usize, temperature: F) -> Vec<F> {
        let row = self.logits_at(context);
        let max = row
            .iter()
            .fold(F::neg_infinity(), |m, &l| m.max(l / temperature));
        let exps: Vec<F> = row.iter().map(|&l| (l / temperature - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn log_distribution(&self, context: usize, temperature: F) -> Vec<F> {
        let row = self.logits_at(context);
        let max = row
            .iter()
            .fold(F::neg_infinity(), |m, &l| m.max(l / temperature));
        let lse = row
            .iter()
            .map(|&l| (l / temperature - max).exp())
            .sum::<F>()
            .ln()
            + max;
        row.iter().map(|&l| l / temperature - lse).collect()
    }

    /// Per-position log-probabilities of `tokens` at `temperature`.
    pub fn token_logprobs_at(&self, tokens: &[usize], temperature: F) -> Result<Vec<F>> {
        self.check_tokens(tokens)?;
        Ok(self
            .contexts_of(tokens)
            .into_iter()
            .zip(tokens)
            .map(|(ctx, &t)| self.log_distribution(ctx, temperature)[t])
            .collect())
    }

    pub fn sequence_logprob(&self, tokens: &[usize]) -> Result<F> {
        self.sequence_logprob_at(tokens, F::one())
    }

    pub fn sequence_logprob_at(&self, tokens: &[usize], temperature: F) -> Result<F> {
        Ok(self
            .token_logprobs_at(tokens, temperature)?
            .into_iter()
            .sum())
    }

    /// Gradient of `ln pi(tokens)` with respect to every logit.
    ///
    /// At a visited context the chosen token's entry is `1 - pi` and every
    /// other entry is `-pi`; unvisited contexts are zero.
    pub fn grad_sequence_logprob(&self, tokens: &[usize]) -> Result<Params<F>> {
        self.grad_sequence_logprob_at(tokens, F::one())
    }

    /// As [`Self::grad_sequence_logprob`] for the tempered distribution; every
    /// entry carries an extra `1 / temperature`.
    pub fn grad_sequence_logprob_at(&self, tokens: &[usize], temperature: F) -> Result<Params<F>> {
        self.check_tokens(tokens)?;
        let mut grad = self.zeros_like();
        for (ctx, &tok) in self.contexts_of(tokens).into_iter().zip(tokens) {
            self.accumulate_score(&mut grad, ctx, tok, temperature, F::one());
        }
        Ok(grad)
    }

    /// `grad[ctx, .] += weight * d ln pi(tok | ctx) / d logits[ctx, .]`.
    pub(crate) fn accumulate_score(
        &self,
        grad: &mut Params<F>,
        ctx: usize,
        tok: usize,
        temperature: F,
        weight: F,
    ) {
        let dist = self.distribution(ctx, temperature);
        let scale = weight / temperature;
        for (w, (g, &p)) in grad.row_mut(ctx).iter_mut().zip(&dist).enumerate() {
            let indicator = if w == tok { F::one() } else { F::zero() };
            *g = *g + scale * (indicator - p);
        }
    }

    /// Probability of reaching each context and each complete sequence.
    ///
    /// Returns `(context_reach, sequence_probs)` where `sequence_probs` has
    /// `V^T` entries in lexicographic order.
    pub fn reach_probabilities(&self, temperature: F) -> (Vec<F>, Vec<F>) {
        let n_ctx = self.num_contexts();
        let mut nodes = vec![F::zero(); n_ctx + self.space_size()];
        nodes[0] = F::one();
        for ctx in 0..n_ctx {
            let p = nodes[ctx];
            let dist = self.distribution(ctx, temperature);
            for (v, &q) in dist.iter().enumerate() {
                nodes[self.child(ctx, v)] = p * q;
            }
        }
        let seqs = nodes.split_off(n_ctx);
        (nodes, seqs)
    }

    /// `pi(y)` for all `V^T` sequences in lexicographic order.
    pub fn sequence_probabilities(&self, temperature: F) -> Vec<F> {
        self.reach_probabilities(temperature).1
    }

    /// Visitation-weighted mean per-token entropy (natural log) of the
    /// untempered policy.
    pub fn mean_token_entropy(&self) -> F {
        let (reach, _) = self.reach_probabilities(F::one());
        let total: F = reach
            .iter()
            .enumerate()
            .map(|(ctx, &p)| {
                if p == F::zero() {
                    return F::zero();
                }
                let h = self
                    .distribution(ctx, F::one())
                    .into_iter()
                    .filter(|&q| q > F::zero())
                    .map(|q| -q * q.ln())
                    .sum::<F>();
                p * h
            })
            .sum();
        total / F::from_count(self.len)
    }

    /// Draws one trajectory from `softmax(logits / temperature)`.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, temperature: F, rng: &mut R) -> Trajectory<F> {
        let mut tokens = Vec::with_capacity(self.len);
        let mut logps = Vec::with_capacity(self.len);
        let mut ctx = 0;
        for _ in 0..self.len {
            let logd = self.log_distribution(ctx, temperature);
            let u = F::lit(rng.random::<f64>());
            let mut acc = F::zero();
            let mut chosen = None;
            for (v, &lp) in logd.iter().enumerate() {
                let p = lp.exp();
                if p > F::zero() {
                    chosen = Some(v);
                }
                acc = acc + p;
                if u < acc && p > F::zero() {
                    break;
                }
            }
            // rounding can leave u >= acc; fall back to the last supported token
            let tok = chosen.expect("softmax has positive mass");
            tokens.push(tok);
            logps.push(logd[tok]);
            ctx = self.child(ctx, tok);
        }
        Trajectory::from_token_logprobs(tokens, logps)
    }

    /// Argmax decoding; ties go to the lowest token id. Log-probabilities are
    /// recorded under the untempered policy.
    pub fn greedy_decode(&self) -> Trajectory<F> {
        let mut tokens = Vec::with_capacity(self.len);
        let mut logps = Vec::with_capacity(self.len);
        let mut ctx = 0;
        for _ in 0..self.len {
            let row = self.logits_at(ctx);
            let mut best = 0;
            for (v, &l) in row.iter().enumerate().skip(1) {
                if l > row[best] {
                    best = v;
                }
            }
            logps.push(self.log_distribution(ctx, F::one())[best]);
            tokens.push(best);
            ctx = self.child(ctx, best);
        }
        Trajectory::from_token_logprobs(tokens, logps)
    }

    /// `logits + learning_rate * gradient` as a new policy; `self` is left
    /// untouched and serves as the old policy for ratios.
    pub fn apply_update(&self, gradient: &Params<F>, learning_rate: F) -> Result<Self> {
        if gradient.vocab != self.vocab || gradient.len != self.len {
            return Err(LabError::Shape(format!(
                "gradient shape (V={}, T={}) does not match policy (V={}, T={})",
                gradient.vocab, gradient.len, self.vocab, self.len
            )));
        }
        let mut next = self.clone();
        for (l, &g) in next.logits.iter_mut().zip(&gradient.values) {
            *l = *l + learning_rate * g;
        }
        Ok(next)
    }

    /// Text checkpoint: a header line `# V=<V> T=<T> prompt_id=<id>` followed
    /// by one line per context in breadth-first order,
    /// `context_tokens<TAB>logit_0,logit_1,...`, context tokens comma separated
    /// (empty for the root).
    pub fn to_checkpoint(&self) -> String {
        let mut out = format!(
            "# V={} T={} prompt_id={}\n",
            self.vocab, self.len, self.prompt_id
        );
        let mut prefix: Vec<usize> = Vec::new();
        let mut frontier = vec![prefix.clone()];
        let mut ctx = 0;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for p in frontier {
                let ctx_str: Vec<String> = p.iter().map(|t| t.to_string()).collect();
                let logit_str: Vec<String> =
                    self.logits_at(ctx).iter().map(|l| format!("{l}")).collect();
                out.push_str(&format!("{}\t{}\n", ctx_str.join(","), logit_str.join(",")));
                ctx += 1;
                if p.len() + 1 < self.len {
                    for v in 0..self.vocab {
                        prefix.clone_from(&p);
                        prefix.push(v);
                        next.push(prefix.clone());
                    }
                }
            }
            frontier = next;
        }
        out
    }

    /// Parses every policy block of a checkpoint file.
    pub fn parse_checkpoints(text: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut lines = text.lines().peekable();
        while let Some(header) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let (vocab, len, prompt_id) = parse_header(header)?;
            space_size(vocab, len)?;
            let n_ctx = context_count(vocab, len);
            let mut logits = Vec::with_capacity(n_ctx * vocab);
            for ctx in 0..n_ctx {
                let line = lines
                    .next()
                    .ok_or_else(|| LabError::Parse(format!("missing context line {ctx}")))?;
                let (context, row) = line
                    .split_once('\t')
                    .ok_or_else(|| LabError::Parse(format!("missing tab in '{line}'")))?;
                let tokens: Vec<usize> = if context.is_empty() {
                    Vec::new()
                } else {
                    context
                        .split(',')
                        .map(|t| {
                            t.parse()
                                .map_err(|_| LabError::Parse(format!("bad token '{t}'")))
                        })
                        .collect::<Result<_>>()?
                };
                let mut expect = 0;
                for &t in &tokens {
                    expect = expect * vocab + t + 1;
                }
                if expect != ctx || tokens.iter().any(|&t| t >= vocab) {
                    return Err(LabError::Parse(format!(
                        "context '{context}' out of breadth-first order"
                    )));
                }
                let row: Vec<F> = row
                    .split(',')
                    .map(|x| {
                        x.parse::<f64>()
                            .map(F::lit)
                            .map_err(|_| LabError::Parse(format!("bad logit '{x}'")))
                    })
                    .collect::<Result<_>>()?;
                if row.len() != vocab {
                    return Err(LabError::Parse(format!(
                        "context {ctx}: {} logits",
                        row.len()
                    )));
                }
                logits.extend(row);
            }
            out.push(Self::from_logits(vocab, len, prompt_id, logits)?);
        }
        Ok(out)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize, String)> {
    let bad = || LabError::Parse(format!("bad checkpoint header '{line}'"));
    let rest = line.strip_prefix("# V=").ok_or_else(bad)?;
    let (v, rest) = rest.split_once(" T=").ok_or_else(bad)?;
    let (t, id) = rest.split_once(" prompt_id=").ok_or_else(bad)?;
    Ok((
        v.parse().map_err(|_| bad())?,
        t.parse().map_err(|_| bad())?,
        id.to_string(),
    ))
}
