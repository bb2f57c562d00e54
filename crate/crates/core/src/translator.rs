//! Multilingual attentional encoder-decoder.
//!
//! One parameter set serves every direction. The encoder reads the target
//! language tag followed by the source body; the decoder starts from the final
//! encoder state, feeds back the previous token together with the previous
//! attention context, and attends additively over every encoder state.
//!
//! The output distribution ranges over the *sampleable* ids only: `EOS`, `UNK`
//! and the subword units. `PAD`, `BOS` and language tags are never produced.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::nn::{lookup, Linear, Lstm, LstmState};
use crate::numcore::{clip_global_norm, sgd_step, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{MergeTable, Vocab, BOS, EOS, PAD};
use crate::{Error, Result};

/// Longest target accepted for supervised training (tokens, EOS excluded).
pub const MAX_TRAIN_LEN: usize = 100;
/// Id of the first sampleable token; output index `k` is token `k + FIRST_OUTPUT`.
pub const FIRST_OUTPUT: usize = EOS;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NmtConfig {
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub attention: usize,
}

impl Default for NmtConfig {
    fn default() -> Self {
        NmtConfig { embed: 64, hidden: 64, layers: 1, attention: 64 }
    }
}

/// Encoder input: the tag of the language to translate into, then the body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tag: usize,
    pub body: Vec<usize>,
}

impl TaggedSentence {
    /// Checks that `tag` is a tag, the body ends with EOS and holds no tag,
    /// PAD or BOS ids.
    pub fn new(vocab: &Vocab, tag: usize, body: Vec<usize>) -> Result<Self> {
        let s = TaggedSentence { tag, body };
        s.validate(vocab.first_tag(), vocab.len())?;
        Ok(s)
    }

    fn validate(&self, first_tag: usize, vocab_len: usize) -> Result<()> {
        if self.tag < first_tag || self.tag >= vocab_len {
            return Err(Error::Malformed(format!("{} is not a language tag", self.tag)));
        }
        if self.body.last() != Some(&EOS) {
            return Err(Error::Malformed("body must end with EOS".into()));
        }
        for &t in &self.body {
            if t >= first_tag {
                return Err(Error::TagInSequence(t));
            }
            if t == PAD || t == BOS {
                return Err(Error::Malformed(format!("reserved id {t} in body")));
            }
        }
        Ok(())
    }

    /// Tag followed by body.
    pub fn tokens(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.body.len() + 1);
        v.push(self.tag);
        v.extend_from_slice(&self.body);
        v
    }

    pub fn len(&self) -> usize {
        self.body.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Top-layer encoder hidden vectors `h₀ … h_N`, one per tagged input token.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub states: Vec<Vec<f64>>,
}

/// Result of decoding one input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids without the terminating EOS.
    pub tokens: Vec<usize>,
    /// False when `max_len` was hit before EOS.
    pub terminated: bool,
}

impl Decoded {
    /// Tokens with EOS appended (also for truncated outputs).
    pub fn with_eos(&self) -> Vec<usize> {
        let mut v = self.tokens.clone();
        v.push(EOS);
        v
    }

    /// The sampled event as a teacher-forcing target: EOS only when generated.
    pub fn as_target(&self) -> Vec<usize> {
        if self.terminated {
            self.with_eos()
        } else {
            self.tokens.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Default decoding budget: twice the source body length plus five.
pub fn default_max_len(body_len: usize) -> usize {
    2 * body_len + 5
}

/// `softmax(logits / temperature)`.
pub fn sampling_distribution(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the total: take the last index with mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

struct Encoded {
    values: Var,
    keys: Var,
    lengths: Vec<usize>,
    last: LstmState,
    tops: Vec<Var>,
}

struct DecoderState {
    lstm: LstmState,
    context: Var,
}

/// The shared multilingual translation model.
#[derive(Clone, Debug)]
pub struct Translator {
    params: ParamStore,
    embed: ParamId,
    encoder: Lstm,
    decoder: Lstm,
    att_key: ParamId,
    att_query: Linear,
    att_v: ParamId,
    combine: Linear,
    output: Linear,
    vocab_len: usize,
    first_tag: usize,
}

impl Translator {
    pub fn new(vocab: &Vocab, config: &NmtConfig, seed: u64) -> Result<Self> {
        if config.embed == 0 || config.hidden == 0 || config.attention == 0 || config.layers == 0 {
            return Err(Error::Config("nmt dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (e, h, a) = (config.embed, config.hidden, config.attention);
        let n_out = vocab.first_tag() - FIRST_OUTPUT;
        let embed = params.add_uniform("nmt.embed", &[vocab.len(), e], &mut rng)?;
        let encoder = Lstm::new(&mut params, "nmt.enc", e, h, config.layers, &mut rng)?;
        let decoder = Lstm::new(&mut params, "nmt.dec", e + h, h, config.layers, &mut rng)?;
        let att_key = params.add_uniform("nmt.att.key", &[a, h], &mut rng)?;
        let att_query = Linear::new(&mut params, "nmt.att.query", h, a, &mut rng)?;
        let att_v = params.add_uniform("nmt.att.v", &[a], &mut rng)?;
        let combine = Linear::new(&mut params, "nmt.combine", 2 * h, h, &mut rng)?;
        let output = Linear::new(&mut params, "nmt.out", h, n_out, &mut rng)?;
        Ok(Translator {
            params,
            embed,
            encoder,
            decoder,
            att_key,
            att_query,
            att_v,
            combine,
            output,
            vocab_len: vocab.len(),
            first_tag: vocab.first_tag(),
        })
    }

    /// Rebuilds a model from a parameter store (e.g. a loaded checkpoint).
    pub fn from_params(params: ParamStore, vocab: &Vocab) -> Result<Self> {
        let embed = lookup(&params, "nmt.embed")?;
        let encoder = Lstm::from_store(&params, "nmt.enc")?;
        let decoder = Lstm::from_store(&params, "nmt.dec")?;
        let att_key = lookup(&params, "nmt.att.key")?;
        let att_query = Linear::from_store(&params, "nmt.att.query")?;
        let att_v = lookup(&params, "nmt.att.v")?;
        let combine = Linear::from_store(&params, "nmt.combine")?;
        let output = Linear::from_store(&params, "nmt.out")?;
        if params.get(embed).value.shape()[0] != vocab.len()
            || output.output_dim(&params) != vocab.first_tag() - FIRST_OUTPUT
            || encoder.depth() != decoder.depth()
            || encoder.hidden() != decoder.hidden()
        {
            return Err(Error::Malformed("checkpoint does not match vocabulary or architecture".into()));
        }
        Ok(Translator {
            params,
            embed,
            encoder,
            decoder,
            att_key,
            att_query,
            att_v,
            combine,
            output,
            vocab_len: vocab.len(),
            first_tag: vocab.first_tag(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Number of ids the decoder can emit.
    pub fn output_size(&self) -> usize {
        self.first_tag - FIRST_OUTPUT
    }

    pub fn first_tag(&self) -> usize {
        self.first_tag
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn check_input(&self, s: &TaggedSentence) -> Result<()> {
        s.validate(self.first_tag, self.vocab_len)
    }

    fn encode_batch(&self, tape: &mut Tape, params: &ParamStore, inputs: &[TaggedSentence]) -> Result<Encoded> {
        let b = inputs.len();
        let lengths: Vec<usize> = inputs.iter().map(TaggedSentence::len).collect();
        let steps = *lengths.iter().max().ok_or(Error::EmptyBatch)?;
        let table = tape.param(params, self.embed);
        let mut state = self.encoder.zero_state(tape, b)?;
        let mut tops = Vec::with_capacity(steps);
        let tokens: Vec<Vec<usize>> = inputs.iter().map(TaggedSentence::tokens).collect();
        for t in 0..steps {
            let ids: Vec<usize> = tokens.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let x = tape.embedding(table, &ids)?;
            let next = self.encoder.step::<ChaCha8Rng>(tape, params, x, &state, None)?;
            let active: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            state = if active.iter().all(|&a| a) { next } else { next.select(tape, &active, &state)? };
            tops.push(state.top());
        }
        let values = tape.stack(&tops)?;
        let key_w = tape.param(params, self.att_key);
        let keys = tape.affine(values, key_w, None)?;
        Ok(Encoded { values, keys, lengths, last: state, tops })
    }

    fn init_decoder(&self, tape: &mut Tape, enc: &Encoded) -> Result<DecoderState> {
        let b = enc.lengths.len();
        let context = tape.leaf(Tensor::zeros(&[b, self.encoder.hidden()]))?;
        Ok(DecoderState { lstm: enc.last.clone(), context })
    }

    /// One decoder step; returns the new state and output logits `[B, output_size]`.
    fn decoder_step(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        enc: &Encoded,
        prev: &[usize],
        state: &DecoderState,
    ) -> Result<(DecoderState, Var)> {
        let table = tape.param(params, self.embed);
        let e = tape.embedding(table, prev)?;
        let x = tape.concat(&[e, state.context])?;
        let lstm = self.decoder.step::<ChaCha8Rng>(tape, params, x, &state.lstm, None)?;
        let top = lstm.top();
        let q = self.att_query.forward(tape, params, top)?;
        let v = tape.param(params, self.att_v);
        let (context, _) = tape.attention(enc.keys, enc.values, q, v, &enc.lengths)?;
        let both = tape.concat(&[top, context])?;
        let pre = self.combine.forward(tape, params, both)?;
        let hidden = tape.tanh(pre)?;
        let logits = self.output.forward(tape, params, hidden)?;
        Ok((DecoderState { lstm, context }, logits))
    }

    fn output_index(&self, id: usize) -> Result<Option<usize>> {
        match id {
            PAD => Ok(None),
            BOS => Err(Error::Malformed("BOS in target".into())),
            t if t >= self.first_tag => Err(Error::TagInSequence(t)),
            t => Ok(Some(t - FIRST_OUTPUT)),
        }
    }

    /// Teacher-forced negative log-likelihood of each target given its input,
    /// recorded on `tape`; returns a `[B]` var plus the count of scored tokens.
    ///
    /// PAD entries in a target are masked out.
    pub fn sequence_nll(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        inputs: &[TaggedSentence],
        targets: &[Vec<usize>],
    ) -> Result<(Var, usize)> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch(inputs.len(), targets.len()));
        }
        for s in inputs {
            self.check_input(s)?;
        }
        let mapped: Vec<Vec<Option<usize>>> = targets
            .iter()
            .map(|t| t.iter().map(|&id| self.output_index(id)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        let scored: usize = mapped.iter().map(|t| t.iter().flatten().count()).sum();
        if scored == 0 {
            return Err(Error::EmptyBatch);
        }
        let enc = self.encode_batch(tape, params, inputs)?;
        let mut state = self.init_decoder(tape, &enc)?;
        let mut prev = vec![BOS; inputs.len()];
        let mut per_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let (next, logits) = self.decoder_step(tape, params, &enc, &prev, &state)?;
            let logp = tape.log_softmax(logits, 1.0)?;
            let tgt: Vec<Option<usize>> = mapped.iter().map(|m| m.get(t).copied().flatten()).collect();
            per_step.push(tape.nll(logp, &tgt)?);
            state = next;
            for (r, tg) in targets.iter().enumerate() {
                prev[r] = match tg.get(t) {
                    Some(&id) if id != PAD => id,
                    _ => PAD,
                };
            }
        }
        Ok((tape.sum_n(&per_step)?, scored))
    }

    /// Encoder states of one input.
    pub fn encode(&self, input: &TaggedSentence) -> Result<EncoderStates> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let enc = self.encode_batch(&mut tape, &self.params, std::slice::from_ref(input))?;
        let states = enc.tops.iter().map(|&v| tape.value(v).data().to_vec()).collect();
        Ok(EncoderStates { states })
    }

    /// `log P(target | input)` for each pair (targets may be truncated samples).
    pub fn log_prob_batch(&self, inputs: &[TaggedSentence], targets: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (nll, _) = self.sequence_nll(&mut tape, &self.params, inputs, targets)?;
        Ok(tape.value(nll).data().iter().map(|v| -v).collect())
    }

    /// Reconstruction score `log P(x | y)`: encode `y` behind the tag of the
    /// source language and teacher-force the source `x` (which ends with EOS).
    pub fn conditional_score(&self, source: &[usize], y: &[usize], source_tag: usize) -> Result<f64> {
        if y.is_empty() {
            return Err(Error::Malformed("empty translation".into()));
        }
        let input = TaggedSentence { tag: source_tag, body: y.to_vec() };
        Ok(self.log_prob_batch(&[input], &[source.to_vec()])?[0])
    }

    /// Decodes a batch. Sampling draws from `softmax(logits / temperature)`;
    /// greedy picks the lowest id among maximal logits.
    pub fn decode_batch<R: Rng>(
        &self,
        inputs: &[TaggedSentence],
        mode: DecodeMode,
        max_lens: &[usize],
        rng: &mut R,
    ) -> Result<Vec<Decoded>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        if max_lens.len() != inputs.len() {
            return Err(Error::LengthMismatch(inputs.len(), max_lens.len()));
        }
        if let DecodeMode::Sample { temperature } = mode {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
        }
        for s in inputs {
            self.check_input(s)?;
        }
        let mut tape = Tape::new();
        let params = &self.params;
        let enc = self.encode_batch(&mut tape, params, inputs)?;
        let mut state = self.init_decoder(&mut tape, &enc)?;
        let mut prev = vec![BOS; inputs.len()];
        let mut out: Vec<Decoded> = inputs.iter().map(|_| Decoded { tokens: Vec::new(), terminated: false }).collect();
        let mut done: Vec<bool> = max_lens.iter().map(|&m| m == 0).collect();
        let steps = max_lens.iter().copied().max().unwrap_or(0);
        for _ in 0..steps {
            if done.iter().all(|&d| d) {
                break;
            }
            let (next, logits) = self.decoder_step(&mut tape, params, &enc, &prev, &state)?;
            let lv = tape.value(logits);
            for r in 0..inputs.len() {
                if done[r] {
                    prev[r] = PAD;
                    continue;
                }
                let row = lv.row(r);
                let k = match mode {
                    DecodeMode::Greedy => argmax(row),
                    DecodeMode::Sample { temperature } => sample_index(&sampling_distribution(row, temperature), rng),
                };
                let id = k + FIRST_OUTPUT;
                if id == EOS {
                    out[r].terminated = true;
                    done[r] = true;
                } else {
                    out[r].tokens.push(id);
                    if out[r].tokens.len() >= max_lens[r] {
                        done[r] = true;
                    }
                }
                prev[r] = id;
            }
            state = next;
        }
        Ok(out)
    }

    pub fn greedy_decode(&self, input: &TaggedSentence, max_len: usize) -> Result<Decoded> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.decode_batch(std::slice::from_ref(input), DecodeMode::Greedy, &[max_len], &mut rng)?.remove(0))
    }

    pub fn sample_decode(&self, input: &TaggedSentence, temperature: f64, max_len: usize, seed: u64) -> Result<Decoded> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = DecodeMode::Sample { temperature };
        Ok(self.decode_batch(std::slice::from_ref(input), mode, &[max_len], &mut rng)?.remove(0))
    }

    /// One SGD step of teacher-forced training on the whole batch; returns the
    /// mean per-token NLL measured before the update.
    pub fn mle_train_step(
        &mut self,
        batch: &[(TaggedSentence, Vec<usize>)],
        lr: f64,
        clip_norm: Option<f64>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (inputs, targets): (Vec<TaggedSentence>, Vec<Vec<usize>>) = batch.iter().cloned().unzip();
        let mut params = std::mem::take(&mut self.params);
        let result = (|| {
            let mut tape = Tape::new();
            let (nll, count) = self.sequence_nll(&mut tape, &params, &inputs, &targets)?;
            let loss = tape.sum(nll)?;
            let mean = tape.scalar(loss) / count as f64;
            tape.backward(loss, 1.0 / count as f64, &mut params)?;
            if let Some(c) = clip_norm {
                clip_global_norm(&mut params, c)?;
            }
            sgd_step(&mut params, lr)?;
            Ok(mean)
        })();
        if result.is_err() {
            params.zero_grads();
        }
        self.params = params;
        result
    }

    /// End-to-end text translation into `target_lang`.
    #[allow(clippy::too_many_arguments)]
    pub fn translate<R: Rng>(
        &self,
        vocab: &Vocab,
        table: &MergeTable,
        text: &str,
        source_lang: &str,
        target_lang: &str,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<String> {
        vocab.tag_id(source_lang)?;
        Ok(self.translate_batch(vocab, table, &[text], target_lang, mode, rng)?.remove(0))
    }

    pub fn translate_batch<R: Rng, S: AsRef<str>>(
        &self,
        vocab: &Vocab,
        table: &MergeTable,
        lines: &[S],
        target_lang: &str,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<Vec<String>> {
        let tag = vocab.tag_id(target_lang)?;
        let mut out = vec![String::new(); lines.len()];
        let mut inputs = Vec::new();
        let mut slots = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            let mut body = vocab.encode(line.as_ref(), table);
            if body.is_empty() {
                continue;
            }
            body.push(EOS);
            inputs.push(TaggedSentence { tag, body });
            slots.push(i);
        }
        for (chunk, idx) in inputs.chunks(128).zip(slots.chunks(128)) {
            let max_lens: Vec<usize> = chunk.iter().map(|s| default_max_len(s.body.len() - 1)).collect();
            let decoded = self.decode_batch(chunk, mode, &max_lens, rng)?;
            for (d, &i) in decoded.iter().zip(idx) {
                out[i] = vocab.decode(&d.tokens)?;
            }
        }
        Ok(out)
    }

    /// Runs `steps` MLE updates over shuffled passes through `pairs`; pairs
    /// whose target exceeds [`MAX_TRAIN_LEN`] are skipped. `log` sees each
    /// step index and its mean NLL.
    pub fn train_supervised(
        &mut self,
        pairs: &[(TaggedSentence, Vec<usize>)],
        config: &SupervisedConfig,
        steps: usize,
        seed: u64,
        mut log: impl FnMut(usize, f64),
    ) -> Result<()> {
        config.validate()?;
        let usable: Vec<&(TaggedSentence, Vec<usize>)> =
            pairs.iter().filter(|(s, t)| t.len() <= MAX_TRAIN_LEN + 1 && s.body.len() <= MAX_TRAIN_LEN + 1).collect();
        if usable.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for step in 0..steps {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size.min(usable.len()) {
                if cursor == order.len() {
                    order = (0..usable.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(usable[order[cursor]].clone());
                cursor += 1;
            }
            let clip = (config.clip_norm > 0.0).then_some(config.clip_norm);
            let nll = self.mle_train_step(&batch, config.lr, clip)?;
            log(step, nll);
        }
        Ok(())
    }
}

/// Mini-batch SGD settings for supervised training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupervisedConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig { batch_size: 64, lr: 1.0, clip_norm: 5.0 }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("invalid supervised config {self:?}")));
        }
        Ok(())
    }
}
