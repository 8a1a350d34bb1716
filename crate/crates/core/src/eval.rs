//! Automatic evaluation: BLEU, n-gram language-model perplexity, a linear
//! style classifier and the transfer report built from them.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Split, StyleCorpus, SyntheticTask, Vocabulary};
use crate::error::{Error, Result};
use crate::sentence::{Sentence, StyleId, BOS, NUM_RESERVED};
use crate::training::Model;

pub const BLEU_ORDER: usize = 4;
/// Stand-in for a zero clipped-match count.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngrams(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram total for order `n`.
fn clipped(candidate: &[usize], references: &[&[usize]], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let refs: Vec<HashMap<&[usize], usize>> = references.iter().map(|r| ngrams(r, n)).collect();
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Shortest reference length. Unlike the closest-length rule this keeps
/// BLEU monotone when references are added.
fn shortest_ref_len(references: &[&[usize]]) -> usize {
    references.iter().map(|r| r.len()).min().unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Sentence-level BLEU in `[0, 100]` over content tokens.
///
/// Orders longer than the candidate are skipped; a zero clipped count is
/// replaced by [`BLEU_EPSILON`].
pub fn sentence_bleu(candidate: &Sentence, references: &[&Sentence]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::invalid("BLEU needs at least one reference"));
    }
    let cand = candidate.content();
    let refs: Vec<&[usize]> = references.iter().map(|r| r.content()).collect();
    if cand.is_empty() {
        return Ok(0.0);
    }
    let orders = BLEU_ORDER.min(cand.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let (m, total) = clipped(cand, &refs, n);
        log_sum += ((m as f64).max(BLEU_EPSILON) / total as f64).ln();
    }
    let bp = brevity_penalty(cand.len(), shortest_ref_len(&refs));
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Corpus-level BLEU: clipped counts, candidate lengths and shortest reference
/// lengths are summed over the corpus before combining. Orders with no
/// candidate n-grams anywhere are skipped.
pub fn corpus_bleu(candidates: &[Sentence], references: &[Vec<&Sentence>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::invalid("candidate and reference counts differ"));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("BLEU of an empty corpus"));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::invalid("BLEU needs at least one reference per candidate"));
        }
        let refs: Vec<&[usize]> = refs.iter().map(|r| r.content()).collect();
        let cand = cand.content();
        for n in 1..=BLEU_ORDER {
            let (m, t) = clipped(cand, &refs, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        c += cand.len();
        r += shortest_ref_len(&refs);
    }
    let orders: Vec<usize> = (0..BLEU_ORDER).filter(|&n| totals[n] > 0).collect();
    if orders.is_empty() {
        return Ok(0.0);
    }
    let log_sum: f64 = orders
        .iter()
        .map(|&n| ((matches[n] as f64).max(BLEU_EPSILON) / totals[n] as f64).ln())
        .sum();
    Ok(100.0 * brevity_penalty(c, r) * (log_sum / orders.len() as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    Unsmoothed,
    /// Interpolated Kneser-Ney with absolute discount `d`.
    KneserNey { discount: f64 },
}

/// Word n-gram language model over the content tokens and EOS of each
/// sentence, with `order − 1` BOS symbols of left context.
#[derive(Clone, Debug)]
pub struct NgramLM {
    order: usize,
    smoothing: Smoothing,
    vocab_size: usize,
    /// `counts[k]` maps `(k+1)`-grams to their (raw or continuation) count.
    counts: Vec<HashMap<Vec<usize>, f64>>,
    /// Per context of `counts[k]`: total count and number of distinct
    /// followers.
    contexts: Vec<HashMap<Vec<usize>, (f64, f64)>>,
}

fn padded(sentence: &Sentence, order: usize) -> Vec<usize> {
    let mut t = vec![BOS; order - 1];
    t.extend_from_slice(sentence.tail());
    t
}

impl NgramLM {
    /// `vocab_size` counts every id; PAD and BOS are never predicted, so the
    /// uniform base distribution covers `vocab_size − 2` outcomes.
    pub fn train(sentences: &[Sentence], order: usize, smoothing: Smoothing, vocab_size: usize) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::invalid("language model needs a non-empty corpus"));
        }
        if order == 0 {
            return Err(Error::invalid("n-gram order must be positive"));
        }
        if vocab_size < NUM_RESERVED {
            return Err(Error::invalid("vocabulary is smaller than the reserved ids"));
        }
        if let Smoothing::KneserNey { discount } = smoothing {
            if !(discount > 0.0 && discount < 1.0) {
                return Err(Error::invalid("Kneser-Ney discount must lie in (0, 1)"));
            }
        }
        let mut raw: Vec<HashMap<Vec<usize>, f64>> = vec![HashMap::new(); order];
        for s in sentences {
            let t = padded(s, order);
            for i in order - 1..t.len() {
                for k in 0..order {
                    *raw[k].entry(t[i - k..=i].to_vec()).or_insert(0.0) += 1.0;
                }
            }
        }
        let counts = match smoothing {
            Smoothing::Unsmoothed => raw,
            Smoothing::KneserNey { .. } => {
                let mut adjusted = raw.clone();
                for k in 0..order - 1 {
                    let mut cont: HashMap<Vec<usize>, f64> = HashMap::new();
                    for g in raw[k + 1].keys() {
                        *cont.entry(g[1..].to_vec()).or_insert(0.0) += 1.0;
                    }
                    for (g, c) in adjusted[k].iter_mut() {
                        if g[0] != BOS {
                            *c = cont.get(g).copied().unwrap_or(0.0);
                        }
                    }
                }
                adjusted
            }
        };
        let contexts = counts
            .iter()
            .map(|table| {
                let mut ctx: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
                for (g, &c) in table {
                    if c > 0.0 {
                        let e = ctx.entry(g[..g.len() - 1].to_vec()).or_insert((0.0, 0.0));
                        e.0 += c;
                        e.1 += 1.0;
                    }
                }
                ctx
            })
            .collect();
        Ok(NgramLM { order, smoothing, vocab_size, counts, contexts })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of tokens that can be predicted (every id but PAD and BOS).
    pub fn outcomes(&self) -> usize {
        self.vocab_size - 2
    }

    /// `p(w | history)`, using the last `order − 1` entries of `history`.
    pub fn prob(&self, history: &[usize], w: usize) -> f64 {
        let n = self.order;
        let mut ctx: Vec<usize> = vec![BOS; (n - 1).saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(n - 1)..]);
        match self.smoothing {
            Smoothing::Unsmoothed => {
                let mut g = ctx.clone();
                g.push(w);
                let c = self.counts[n - 1].get(&g).copied().unwrap_or(0.0);
                match self.contexts[n - 1].get(&ctx) {
                    Some(&(total, _)) if c > 0.0 => c / total,
                    _ => 0.0,
                }
            }
            Smoothing::KneserNey { discount } => self.kn(&ctx, w, discount),
        }
    }

    fn kn(&self, ctx: &[usize], w: usize, d: f64) -> f64 {
        let lower = if ctx.is_empty() {
            1.0 / self.outcomes() as f64
        } else {
            self.kn(&ctx[1..], w, d)
        };
        let k = ctx.len();
        match self.contexts[k].get(ctx) {
            Some(&(total, types)) => {
                let mut g = ctx.to_vec();
                g.push(w);
                let c = self.counts[k].get(&g).copied().unwrap_or(0.0);
                (c - d).max(0.0) / total + d * types / total * lower
            }
            None => lower,
        }
    }

    /// Sum of `ln p` over every predicted token of `sentence`.
    pub fn log_prob(&self, sentence: &Sentence) -> f64 {
        let t = padded(sentence, self.order);
        (self.order - 1..t.len())
            .map(|i| self.prob(&t[..i], t[i]).ln())
            .sum()
    }

    /// `exp(−(1/N) Σ ln p)` over all tokens including EOS; infinite when an
    /// unsmoothed model meets an unseen n-gram.
    pub fn perplexity(&self, sentences: &[Sentence]) -> f64 {
        let n: usize = sentences.iter().map(|s| s.tail().len()).sum();
        if n == 0 {
            return f64::NAN;
        }
        let total: f64 = sentences.iter().map(|s| self.log_prob(s)).sum();
        if total == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        (-total / n as f64).exp()
    }
}

const FEATURE_BITS: u32 = 18;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

fn fnv1a(parts: &[usize]) -> usize {
    let mut h = FNV_OFFSET;
    for p in parts {
        for b in (*p as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h & ((1 << FEATURE_BITS) - 1)) as usize
}

/// Hashed unigram and bigram buckets of a sentence (bigrams include the
/// boundary markers).
pub fn features(sentence: &Sentence) -> Vec<usize> {
    let ids = sentence.ids();
    let mut f: Vec<usize> = sentence.content().iter().map(|&t| fnv1a(&[t])).collect();
    f.extend(ids.windows(2).map(|w| fnv1a(&[w[0], w[1], usize::MAX])));
    f
}

/// Linear softmax classifier over hashed 1–2-gram counts.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleClassifier {
    num_styles: usize,
    /// `weights[k]` has one entry per bucket.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl StyleClassifier {
    /// Full-batch AdaGrad on the mean logistic loss; `corpora[i]` holds
    /// style `i + 1`. Training is independent of example order.
    pub fn train(corpora: &[&[Sentence]], epochs: usize, lr: f64) -> Result<Self> {
        let k = corpora.len();
        if k < 2 || corpora.iter().filter(|c| !c.is_empty()).count() < 2 {
            return Err(Error::invalid("classifier needs sentences from at least two styles"));
        }
        let buckets = 1usize << FEATURE_BITS;
        let examples: Vec<(Vec<usize>, usize)> = corpora
            .iter()
            .enumerate()
            .flat_map(|(c, s)| s.iter().map(move |x| (features(x), c)))
            .collect();
        let n = examples.len() as f64;
        let mut clf = StyleClassifier { num_styles: k, weights: vec![vec![0.0; buckets]; k], bias: vec![0.0; k] };
        let mut hist_w = vec![vec![0.0; buckets]; k];
        let mut hist_b = vec![0.0; k];
        for _ in 0..epochs {
            let mut grad_w: Vec<HashMap<usize, f64>> = vec![HashMap::new(); k];
            let mut grad_b = vec![0.0; k];
            for (f, label) in &examples {
                let probs = clf.probabilities_of(f);
                for c in 0..k {
                    let g = (probs[c] - if c == *label { 1.0 } else { 0.0 }) / n;
                    grad_b[c] += g;
                    for &b in f {
                        *grad_w[c].entry(b).or_insert(0.0) += g;
                    }
                }
            }
            for c in 0..k {
                let mut touched: Vec<(usize, f64)> = grad_w[c].iter().map(|(&b, &g)| (b, g)).collect();
                touched.sort_unstable_by_key(|&(b, _)| b);
                for (b, g) in touched {
                    hist_w[c][b] += g * g;
                    clf.weights[c][b] -= lr * g / (hist_w[c][b].sqrt() + 1e-12);
                }
                hist_b[c] += grad_b[c] * grad_b[c];
                clf.bias[c] -= lr * grad_b[c] / (hist_b[c].sqrt() + 1e-12);
            }
        }
        Ok(clf)
    }

    fn scores_of(&self, f: &[usize]) -> Vec<f64> {
        (0..self.num_styles)
            .map(|c| self.bias[c] + f.iter().map(|&b| self.weights[c][b]).sum::<f64>())
            .collect()
    }

    fn probabilities_of(&self, f: &[usize]) -> Vec<f64> {
        let s = self.scores_of(f);
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn scores(&self, sentence: &Sentence) -> Vec<f64> {
        self.scores_of(&features(sentence))
    }

    pub fn predict(&self, sentence: &Sentence) -> StyleId {
        StyleId::from_index(crate::sentence::argmax(&self.scores(sentence)))
    }

    /// Percentage of `sentences` classified as `style`.
    pub fn accuracy(&self, sentences: &[Sentence], styles: &[StyleId]) -> f64 {
        transfer_accuracy(|s| self.predict(s), sentences, styles)
    }
}

/// Percentage of sentences whose predicted style equals the target.
pub fn transfer_accuracy<F: Fn(&Sentence) -> StyleId>(classify: F, transferred: &[Sentence], targets: &[StyleId]) -> f64 {
    if transferred.is_empty() {
        return 0.0;
    }
    let hits = transferred.iter().zip(targets).filter(|(s, t)| classify(s) == **t).count();
    100.0 * hits as f64 / transferred.len() as f64
}

/// Anything that rewrites sentences into target styles.
pub trait TransferSystem: Sync {
    fn transfer(&self, xs: &[Sentence], targets: &[StyleId]) -> Result<Vec<Sentence>>;
}

/// Returns its input unchanged.
pub struct CopySystem;

impl TransferSystem for CopySystem {
    fn transfer(&self, xs: &[Sentence], _targets: &[StyleId]) -> Result<Vec<Sentence>> {
        Ok(xs.to_vec())
    }
}

impl TransferSystem for Model {
    fn transfer(&self, xs: &[Sentence], targets: &[StyleId]) -> Result<Vec<Sentence>> {
        Model::transfer(self, xs, targets)
    }
}

/// Precomputed outputs, looked up by input sentence.
pub struct FixedOutputs {
    map: HashMap<(Sentence, StyleId), Sentence>,
}

impl FixedOutputs {
    pub fn new(inputs: &[Sentence], targets: &[StyleId], outputs: &[Sentence]) -> Self {
        FixedOutputs {
            map: inputs
                .iter()
                .cloned()
                .zip(targets.iter().copied())
                .zip(outputs.iter().cloned())
                .collect(),
        }
    }
}

impl TransferSystem for FixedOutputs {
    fn transfer(&self, xs: &[Sentence], targets: &[StyleId]) -> Result<Vec<Sentence>> {
        xs.iter()
            .zip(targets)
            .map(|(x, t)| {
                self.map
                    .get(&(x.clone(), *t))
                    .cloned()
                    .ok_or_else(|| Error::invalid("no stored output for an input sentence"))
            })
            .collect()
    }
}

/// Worker count for evaluation: `STFM_THREADS` if set, else all cores.
pub fn eval_threads() -> usize {
    std::env::var("STFM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

const EVAL_CHUNK: usize = 64;

/// Transfers `xs` chunk by chunk on a pool of [`eval_threads`] workers.
pub fn transfer_parallel<S: TransferSystem + ?Sized>(system: &S, xs: &[Sentence], targets: &[StyleId]) -> Result<Vec<Sentence>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let parts: Vec<Result<Vec<Sentence>>> = pool.install(|| {
        xs.par_chunks(EVAL_CHUNK)
            .zip(targets.par_chunks(EVAL_CHUNK))
            .map(|(x, t)| system.transfer(x, t))
            .collect()
    });
    let mut out = Vec::with_capacity(xs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentage of outputs classified as their target style.
    pub accuracy: f64,
    pub self_bleu: f64,
    pub ref_bleu: Option<f64>,
    pub perplexity: f64,
    pub sentences: usize,
}

impl EvalReport {
    /// `key=value` lines; absent values are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy={:.2}", self.accuracy);
        let _ = writeln!(s, "self_bleu={:.2}", self.self_bleu);
        if let Some(r) = self.ref_bleu {
            let _ = writeln!(s, "ref_bleu={r:.2}");
        }
        let _ = writeln!(s, "perplexity={:.2}", self.perplexity);
        let _ = writeln!(s, "sentences={}", self.sentences);
        s
    }

    pub fn check_ranges(&self) -> Result<()> {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        if !pct(self.accuracy) || !pct(self.self_bleu) || self.ref_bleu.map_or(false, |r| !pct(r)) {
            return Err(Error::invalid("report value outside [0, 100]"));
        }
        if !(self.perplexity >= 1.0) {
            return Err(Error::invalid("perplexity below 1"));
        }
        Ok(())
    }
}

/// Test inputs paired with every target style other than their own.
pub fn transfer_pairs(corpora: &[StyleCorpus]) -> (Vec<Sentence>, Vec<StyleId>, Vec<(usize, usize)>) {
    split_pairs(corpora, Split::Test)
}

/// Sentences of `split` paired with every target style other than their
/// own, with their (style, position) origin.
pub fn split_pairs(corpora: &[StyleCorpus], split: Split) -> (Vec<Sentence>, Vec<StyleId>, Vec<(usize, usize)>) {
    let k = corpora.len();
    let mut xs = Vec::new();
    let mut targets = Vec::new();
    let mut origin = Vec::new();
    for (i, c) in corpora.iter().enumerate() {
        for (j, x) in c.split(split).iter().enumerate() {
            for t in (0..k).filter(|&t| t != i) {
                xs.push(x.clone());
                targets.push(StyleId::from_index(t));
                origin.push((i, j));
            }
        }
    }
    (xs, targets, origin)
}

/// Everything needed to score a system besides the system itself.
pub struct Evaluator<'a> {
    pub classifier: &'a StyleClassifier,
    pub lm: &'a NgramLM,
}

impl Evaluator<'_> {
    /// Scores outputs already produced for `inputs`.
    pub fn score(&self, inputs: &[Sentence], targets: &[StyleId], outputs: &[Sentence], references: Option<&[Sentence]>) -> Result<EvalReport> {
        if outputs.len() != inputs.len() || targets.len() != inputs.len() {
            return Err(Error::invalid("inputs, targets and outputs differ in length"));
        }
        let self_refs: Vec<Vec<&Sentence>> = inputs.iter().map(|x| vec![x]).collect();
        let ref_bleu = match references {
            Some(r) => {
                if r.len() != outputs.len() {
                    return Err(Error::invalid("reference count differs from output count"));
                }
                Some(corpus_bleu(outputs, &r.iter().map(|x| vec![x]).collect::<Vec<_>>())?)
            }
            None => None,
        };
        Ok(EvalReport {
            accuracy: self.classifier.accuracy(outputs, targets),
            self_bleu: corpus_bleu(outputs, &self_refs)?,
            ref_bleu,
            perplexity: self.lm.perplexity(outputs),
            sentences: outputs.len(),
        })
    }

    /// Transfers every test sentence into each other style and scores the
    /// pooled outputs. `references[i][j]` is the human rewrite of test
    /// sentence `j` of style `i` (two-style corpora only).
    pub fn evaluate_system<S: TransferSystem + ?Sized>(
        &self,
        system: &S,
        corpora: &[StyleCorpus],
        references: Option<&[Vec<Sentence>]>,
    ) -> Result<(EvalReport, Vec<Sentence>)> {
        let (xs, targets, origin) = transfer_pairs(corpora);
        if xs.is_empty() {
            return Err(Error::invalid("no test sentences to evaluate"));
        }
        let outputs = transfer_parallel(system, &xs, &targets)?;
        let refs: Option<Vec<Sentence>> = match references {
            Some(r) => Some(
                origin
                    .iter()
                    .map(|&(i, j)| {
                        r.get(i)
                            .and_then(|v| v.get(j))
                            .cloned()
                            .ok_or_else(|| Error::invalid("references do not cover the test split"))
                    })
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };
        let report = self.score(&xs, &targets, &outputs, refs.as_deref())?;
        Ok((report, outputs))
    }
}

/// Scores of a synthetic-task transfer against the lexicon oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    /// Percentage of outputs whose lexicon style is the target.
    pub accuracy: f64,
    /// Percentage of outputs whose non-style tokens equal the input's.
    pub content_preserved: f64,
    /// Percentage of outputs equal to the oracle transfer.
    pub exact: f64,
}

pub fn oracle_scores(task: &SyntheticTask, vocab: &Vocabulary, inputs: &[Sentence], targets: &[StyleId], outputs: &[Sentence]) -> OracleScores {
    let words = |s: &Sentence| -> Vec<String> { s.content().iter().map(|&t| vocab.token(t).to_owned()).collect() };
    let n = inputs.len().max(1) as f64;
    let (mut acc, mut kept, mut exact) = (0usize, 0usize, 0usize);
    for ((x, t), y) in inputs.iter().zip(targets).zip(outputs) {
        let (xw, yw) = (words(x), words(y));
        if task.oracle_style(&yw) == Some(t.index()) {
            acc += 1;
        }
        let content = |w: &[String]| -> Vec<String> { w.iter().filter(|t| !task.is_style_word(t)).cloned().collect() };
        if content(&xw) == content(&yw) {
            kept += 1;
        }
        if task.oracle_transfer(&xw) == yw {
            exact += 1;
        }
    }
    OracleScores {
        accuracy: 100.0 * acc as f64 / n,
        content_preserved: 100.0 * kept as f64 / n,
        exact: 100.0 * exact as f64 / n,
    }
}
