//! Recurrent language models that supply the fluency reward.
//!
//! A model covers every vocabulary id below the first language tag. Training runs
//! truncated backpropagation through a single token stream built from the corpus
//! (`BOS y₁ … yₙ EOS BOS …`), so the recurrent state crosses sentence boundaries;
//! scoring always starts a fresh state from `BOS` and includes the `EOS` term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::nn::{lookup, Linear, Lstm, LstmState};
use crate::numcore::{clip_global_norm, sgd_step, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{BOS, EOS};
use crate::{Error, Result};

/// Longest sentence (in tokens, EOS excluded) accepted for training.
pub const MAX_TRAIN_LEN: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub unroll: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 1-based epoch from which the learning rate halves every epoch.
    pub halve_from_epoch: usize,
    pub epochs: usize,
    pub clip_norm: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            layers: 1,
            hidden: 64,
            dropout: 0.0,
            unroll: 35,
            batch_size: 64,
            lr: 1.0,
            halve_from_epoch: 3,
            epochs: 6,
            clip_norm: 10.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lm dropout {} outside [0, 1)", self.dropout)));
        }
        if self.unroll == 0 || self.batch_size == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("lm unroll, batch size, layers and width must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lm lr must be >= 0 and clip norm > 0".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.halve_from_epoch && self.halve_from_epoch > 0 {
            self.lr * 0.5f64.powi((epoch + 1 - self.halve_from_epoch) as i32)
        } else {
            self.lr
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_ppl: f64,
    pub valid_ppl: Option<f64>,
}

/// LSTM language model over the non-tag part of the vocabulary.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    params: ParamStore,
    embed: ParamId,
    lstm: Lstm,
    proj: Linear,
    vocab_size: usize,
}

impl LanguageModel {
    /// Uniformly initialized model over `vocab_size` ids.
    pub fn new(vocab_size: usize, config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let embed = params.add_uniform("lm.embed", &[vocab_size, h], &mut rng)?;
        let lstm = Lstm::new(&mut params, "lm.lstm", h, h, config.layers, &mut rng)?;
        let proj = Linear::new(&mut params, "lm.proj", h, vocab_size, &mut rng)?;
        Ok(LanguageModel { params, embed, lstm, proj, vocab_size })
    }

    /// Model with every parameter zero: a uniform distribution at each step.
    pub fn zeros(vocab_size: usize, config: &LmConfig) -> Result<Self> {
        let mut m = Self::new(vocab_size, config, 0)?;
        for p in m.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let embed = lookup(&params, "lm.embed")?;
        let lstm = Lstm::from_store(&params, "lm.lstm")?;
        let proj = Linear::from_store(&params, "lm.proj")?;
        let vocab_size = params.get(embed).value.shape()[0];
        if proj.output_dim(&params) != vocab_size {
            return Err(Error::Malformed("lm projection does not match embedding".into()));
        }
        Ok(LanguageModel { params, embed, lstm, proj, vocab_size })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn check_sequence(&self, seq: &[usize]) -> Result<()> {
        if seq.last() != Some(&EOS) {
            return Err(Error::Malformed("sequence must end with EOS".into()));
        }
        if let Some(&t) = seq.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TagInSequence(t));
        }
        Ok(())
    }

    /// Per-row log-probability matrix `[B, V]` for one step of a batch.
    fn step(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        inputs: &[usize],
        state: &LstmState,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(Var, LstmState)> {
        let table = tape.param(params, self.embed);
        let x = tape.embedding(table, inputs)?;
        let (p, mut rng) = match dropout {
            Some((p, r)) => (p, Some(r)),
            None => (0.0, None),
        };
        let next = self.lstm.step(tape, params, x, state, rng.as_mut().map(|r| (p, &mut **r)))?;
        let mut top = next.top();
        if let Some(r) = rng.as_mut() {
            top = crate::nn::dropout(tape, top, p, &mut **r)?;
        }
        let logits = self.proj.forward(tape, params, top)?;
        Ok((tape.log_softmax(logits, 1.0)?, next))
    }

    /// Per-step log-probabilities `log P(yᵢ | y<i)` for each sequence, BOS fed first.
    pub fn step_log_probs(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        for s in seqs {
            self.check_sequence(s)?;
        }
        let b = seqs.len();
        let steps = seqs.iter().map(Vec::len).max().unwrap();
        let mut tape = Tape::new();
        let mut state = self.lstm.zero_state(&mut tape, b)?;
        let mut inputs = vec![BOS; b];
        let mut out: Vec<Vec<f64>> = seqs.iter().map(|s| Vec::with_capacity(s.len())).collect();
        for t in 0..steps {
            let (logp, next) = self.step(&mut tape, &self.params, &inputs, &state, None)?;
            let lp = tape.value(logp);
            for (r, s) in seqs.iter().enumerate() {
                if t < s.len() {
                    out[r].push(lp.row(r)[s[t]]);
                }
            }
            state = next;
            for (r, s) in seqs.iter().enumerate() {
                inputs[r] = s.get(t).copied().unwrap_or(EOS);
            }
        }
        Ok(out)
    }

    /// `Σᵢ log P(yᵢ | y<i)` for each sequence; each must end with EOS.
    pub fn score_batch(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
        Ok(self.step_log_probs(seqs)?.into_iter().map(|v| v.iter().sum()).collect())
    }

    /// Log-probability of one EOS-terminated sequence.
    pub fn score(&self, seq: &[usize]) -> Result<f64> {
        Ok(self.score_batch(&[seq.to_vec()])?[0])
    }

    /// Per-token perplexity over EOS-terminated sentences, EOS counted.
    pub fn perplexity(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in corpus.chunks(256) {
            for lp in self.step_log_probs(chunk)? {
                count += lp.len();
                total += lp.iter().sum::<f64>();
            }
        }
        Ok((-total / count as f64).exp())
    }
}

fn with_eos(s: &[usize]) -> Vec<usize> {
    let mut v = s.to_vec();
    if v.last() != Some(&EOS) {
        v.push(EOS);
    }
    v
}

/// Trains a language model with truncated backpropagation through time.
///
/// `corpus` holds sentences of non-tag ids (EOS optional; it is appended when
/// missing). Sentences longer than [`MAX_TRAIN_LEN`] are skipped. Returns the
/// model and one log entry per epoch.
pub fn lm_train(
    corpus: &[Vec<usize>],
    valid: Option<&[Vec<usize>]>,
    vocab_size: usize,
    config: &LmConfig,
    seed: u64,
) -> Result<(LanguageModel, Vec<LmEpochLog>)> {
    config.validate()?;
    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .filter(|s| s.len() <= MAX_TRAIN_LEN)
        .map(|s| with_eos(s))
        .collect();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = LanguageModel::new(vocab_size, config, seed)?;
    for s in &sentences {
        model.check_sequence(s)?;
    }
    let valid: Option<Vec<Vec<usize>>> = valid.map(|v| v.iter().map(|s| with_eos(s)).collect());

    // Token stream BOS y.. EOS BOS y.. EOS; a target of BOS is never scored.
    let mut stream = Vec::new();
    for s in &sentences {
        stream.push(BOS);
        stream.extend_from_slice(s);
    }
    let b = config.batch_size.min(stream.len() - 1).max(1);
    let lane_len = (stream.len() - 1) / b;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = config.lr_for_epoch(epoch);
        let mut carried: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
        let mut total_nll = 0.0;
        let mut total_tokens = 0usize;
        let mut pos = 0;
        while pos < lane_len {
            let steps = config.unroll.min(lane_len - pos);
            let mut params = std::mem::take(&mut model.params);
            let mut tape = Tape::new();
            let mut state = match &carried {
                None => model.lstm.zero_state(&mut tape, b)?,
                Some((h, c)) => LstmState {
                    h: h.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_, _>>()?,
                    c: c.iter().map(|t| tape.leaf(t.clone())).collect::<Result<_, _>>()?,
                },
            };
            let mut per_step = Vec::with_capacity(steps);
            let mut tokens = 0usize;
            for t in 0..steps {
                let inputs: Vec<usize> = (0..b).map(|r| stream[r * lane_len + pos + t]).collect();
                let targets: Vec<Option<usize>> = (0..b)
                    .map(|r| Some(stream[r * lane_len + pos + t + 1]).filter(|&y| y != BOS))
                    .collect();
                tokens += targets.iter().flatten().count();
                let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut rng));
                let (logp, next) = model.step(&mut tape, &params, &inputs, &state, dropout)?;
                per_step.push(tape.nll(logp, &targets)?);
                state = next;
            }
            let summed = tape.sum_n(&per_step)?;
            let loss = tape.sum(summed)?;
            total_nll += tape.scalar(loss);
            total_tokens += tokens;
            carried = Some((
                state.h.iter().map(|&v| tape.value(v).clone()).collect(),
                state.c.iter().map(|&v| tape.value(v).clone()).collect(),
            ));
            // sum over time, mean over the batch
            tape.backward(loss, 1.0 / b as f64, &mut params)?;
            clip_global_norm(&mut params, config.clip_norm)?;
            sgd_step(&mut params, lr)?;
            model.params = params;
            pos += steps;
        }
        let train_ppl = if total_tokens > 0 { (total_nll / total_tokens as f64).exp() } else { f64::NAN };
        let valid_ppl = match &valid {
            Some(v) if !v.is_empty() => Some(model.perplexity(v)?),
            _ => None,
        };
        log.push(LmEpochLog { epoch, lr, train_ppl, valid_ppl });
    }
    Ok((model, log))
}
