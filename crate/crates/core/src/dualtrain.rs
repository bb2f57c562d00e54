//! Zero-shot dual learning.
//!
//! For a monolingual sentence `x` of language X the model samples a
//! translation `y` into Y, scores its fluency `r1 = log P_LM_Y(y)` and its
//! reconstruction `r2 = log P(x | y)` with the same model, and combines them
//! into `R = α·r1 + (1−α)·r2`. The update follows the score-function
//! estimator with a batch-mean baseline plus the gradient of the
//! differentiable reconstruction reward. The same runs for Y→X, and the
//! parameters move once after both directions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::langmodel::LanguageModel;
use crate::numcore::{clip_global_norm, sgd_step, Tape};
use crate::tokenizer::EOS;
use crate::translator::{Decoded, DecodeMode, SupervisedConfig, TaggedSentence, Translator};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualConfig {
    /// Weight of the fluency reward.
    pub alpha: f64,
    pub temperature: f64,
    /// Samples drawn per source sentence.
    pub samples: usize,
    pub lr: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip_norm: f64,
    /// Source sentences per direction and step.
    pub batch_size: usize,
    /// Sampling budget is `max_len_ratio · |x| + max_len_extra` tokens.
    pub max_len_ratio: f64,
    pub max_len_extra: usize,
    /// Divide r1 by |y|+1 and r2 by |x|+1.
    pub length_normalize: bool,
    /// Subtract the batch-mean reward.
    pub baseline: bool,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            alpha: 0.005,
            temperature: 0.002,
            samples: 1,
            lr: 0.0002,
            clip_norm: 5.0,
            batch_size: 32,
            max_len_ratio: 2.0,
            max_len_extra: 5,
            length_normalize: false,
            baseline: true,
        }
    }
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("samples and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.clip_norm >= 0.0) || !(self.max_len_ratio >= 0.0) {
            return Err(Error::Config("lr, clip_norm and max_len_ratio must be non-negative".into()));
        }
        Ok(())
    }

    /// Sampling budget for a source body of `body_len` tokens (EOS excluded).
    pub fn max_len(&self, body_len: usize) -> usize {
        ((self.max_len_ratio * body_len as f64).floor() as usize + self.max_len_extra).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RewardRecord {
    pub r1: f64,
    pub r2: f64,
    #[serde(rename = "R")]
    pub total: f64,
    pub advantage: f64,
    /// The sample hit its length budget without EOS.
    pub truncated: bool,
}

/// `α·r1 + (1−α)·r2`.
pub fn combine_rewards(alpha: f64, r1: f64, r2: f64) -> f64 {
    alpha * r1 + (1.0 - alpha) * r2
}

/// Which way a dual step translates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Direction {
    /// Tag of the source language (used for reconstruction).
    pub source_tag: usize,
    /// Tag of the language sampled into.
    pub target_tag: usize,
}

/// Rewards for samples `ys[i]` drawn from sources `xs[i]` (bodies ending in
/// EOS). Advantages are left at zero.
pub fn compute_rewards(
    nmt: &Translator,
    lm_target: &LanguageModel,
    dir: Direction,
    xs: &[Vec<usize>],
    ys: &[Decoded],
    alpha: f64,
    length_normalize: bool,
) -> Result<Vec<RewardRecord>> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    for y in ys {
        if let Some(&t) = y.tokens.iter().find(|&&t| t >= nmt.first_tag()) {
            return Err(Error::TagInSequence(t));
        }
    }
    let full: Vec<Vec<usize>> = ys.iter().map(Decoded::with_eos).collect();
    let r1 = lm_target.score_batch(&full)?;
    let recon_inputs: Vec<TaggedSentence> =
        full.iter().map(|y| TaggedSentence { tag: dir.source_tag, body: y.clone() }).collect();
    let r2 = nmt.log_prob_batch(&recon_inputs, xs)?;
    Ok((0..xs.len())
        .map(|i| {
            let (mut a, mut b) = (r1[i], r2[i]);
            if length_normalize {
                a /= full[i].len() as f64;
                b /= xs[i].len() as f64;
            }
            RewardRecord { r1: a, r2: b, total: combine_rewards(alpha, a, b), advantage: 0.0, truncated: !ys[i].terminated }
        })
        .collect())
}

/// Sets each advantage to `R − mean(R)`.
pub fn batch_baseline(records: &mut [RewardRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mean = records.iter().map(|r| r.total).sum::<f64>() / records.len() as f64;
    for r in records.iter_mut() {
        r.advantage = r.total - mean;
    }
    Ok(())
}

/// Sets each advantage to the raw reward (no baseline).
pub fn no_baseline(records: &mut [RewardRecord]) {
    for r in records.iter_mut() {
        r.advantage = r.total;
    }
}

/// One sampled translation with its advantage.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    /// Source body ending in EOS.
    pub source: Vec<usize>,
    pub sample: Decoded,
    pub advantage: f64,
}

/// Accumulates onto the model's gradients the gradient of
///
/// `L = (1/K) Σᵢ [ Aᵢ · NLL(yᵢ | x̃ᵢ) + (1−α) · NLL(xᵢ | ỹᵢ) ]`
///
/// where `x̃` is the source behind the target tag and `ỹ` the sample behind the
/// source tag. `−∇L` is the reward-gradient estimate, so a descent step on the
/// accumulated gradients ascends the expected reward. Truncated samples are
/// scored without EOS in the forward term. Returns `L`.
pub fn policy_gradient(
    nmt: &mut Translator,
    dir: Direction,
    batch: &[PolicySample],
    alpha: f64,
    samples_per_source: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if samples_per_source == 0 {
        return Err(Error::Config("samples per source must be at least 1".into()));
    }
    if let Some(s) = batch.iter().find(|s| !s.advantage.is_finite()) {
        return Err(Error::Num(crate::NumError::NonFinite(format!("advantage {}", s.advantage))));
    }
    let k = samples_per_source as f64;
    let fwd_inputs: Vec<TaggedSentence> =
        batch.iter().map(|s| TaggedSentence { tag: dir.target_tag, body: s.source.clone() }).collect();
    let fwd_targets: Vec<Vec<usize>> = batch.iter().map(|s| s.sample.as_target()).collect();
    let weights: Vec<f64> = batch.iter().map(|s| s.advantage / k).collect();
    let recon_inputs: Vec<TaggedSentence> =
        batch.iter().map(|s| TaggedSentence { tag: dir.source_tag, body: s.sample.with_eos() }).collect();
    let recon_targets: Vec<Vec<usize>> = batch.iter().map(|s| s.source.clone()).collect();
    let recon_weight = (1.0 - alpha) / k;

    let mut params = std::mem::take(nmt.params_mut());
    let result = (|| {
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(2);
        if weights.iter().any(|&w| w != 0.0) {
            let (nll, _) = nmt.sequence_nll(&mut tape, &params, &fwd_inputs, &fwd_targets)?;
            terms.push(tape.weighted_sum(nll, &weights)?);
        }
        if recon_weight != 0.0 {
            let (nll, _) = nmt.sequence_nll(&mut tape, &params, &recon_inputs, &recon_targets)?;
            terms.push(tape.weighted_sum(nll, &vec![recon_weight; batch.len()])?);
        }
        if terms.is_empty() {
            return Ok(0.0);
        }
        let loss = tape.sum_n(&terms)?;
        let value = tape.scalar(loss);
        tape.backward(loss, 1.0, &mut params)?;
        Ok(value)
    })();
    *nmt.params_mut() = params;
    result
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DirectionMetrics {
    pub direction: String,
    pub mean_r1: f64,
    pub mean_r2: f64,
    #[serde(rename = "mean_R")]
    pub mean_total: f64,
    pub truncated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub directions: [DirectionMetrics; 2],
}

impl StepMetrics {
    /// One JSON object per direction.
    pub fn json_lines(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            direction: &'a str,
            mean_r1: f64,
            mean_r2: f64,
            #[serde(rename = "mean_R")]
            mean_total: f64,
            grad_norm: f64,
            lr: f64,
        }
        let mut out = String::new();
        for d in &self.directions {
            let line = Line {
                step: self.step,
                direction: &d.direction,
                mean_r1: d.mean_r1,
                mean_r2: d.mean_r2,
                mean_total: d.mean_total,
                grad_norm: self.grad_norm,
                lr: self.lr,
            };
            out.push_str(&serde_json::to_string(&line).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }
}

/// One side of a dual step: language name, tag, frozen LM and source batch.
pub struct DualSide<'a> {
    pub name: &'a str,
    pub tag: usize,
    pub lm: &'a LanguageModel,
}

fn run_direction(
    nmt: &mut Translator,
    from: &DualSide,
    to: &DualSide,
    batch: &[Vec<usize>],
    config: &DualConfig,
    seed: u64,
) -> Result<(DirectionMetrics, Vec<RewardRecord>)> {
    let dir = Direction { source_tag: from.tag, target_tag: to.tag };
    let mut sources = Vec::with_capacity(batch.len() * config.samples);
    for x in batch {
        for _ in 0..config.samples {
            sources.push(x.clone());
        }
    }
    let inputs: Vec<TaggedSentence> = sources.iter().map(|x| TaggedSentence { tag: to.tag, body: x.clone() }).collect();
    let max_lens: Vec<usize> = sources.iter().map(|x| config.max_len(x.len() - 1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = DecodeMode::Sample { temperature: config.temperature };
    let ys = nmt.decode_batch(&inputs, mode, &max_lens, &mut rng)?;
    let mut records = compute_rewards(nmt, to.lm, dir, &sources, &ys, config.alpha, config.length_normalize)?;
    if config.baseline {
        batch_baseline(&mut records)?;
    } else {
        no_baseline(&mut records);
    }
    let samples: Vec<PolicySample> = sources
        .into_iter()
        .zip(ys)
        .zip(&records)
        .map(|((source, sample), r)| PolicySample { source, sample, advantage: r.advantage })
        .collect();
    policy_gradient(nmt, dir, &samples, config.alpha, config.samples)?;
    let n = records.len() as f64;
    let metrics = DirectionMetrics {
        direction: format!("{}-{}", from.name, to.name),
        mean_r1: records.iter().map(|r| r.r1).sum::<f64>() / n,
        mean_r2: records.iter().map(|r| r.r2).sum::<f64>() / n,
        mean_total: records.iter().map(|r| r.total).sum::<f64>() / n,
        truncated: records.iter().filter(|r| r.truncated).count(),
    };
    Ok((metrics, records))
}

fn check_batch(batch: &[Vec<usize>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.iter().any(|x| x.last() != Some(&EOS)) {
        return Err(Error::Malformed("monolingual sentences must end with EOS".into()));
    }
    Ok(())
}

/// Both directions on one X batch and one Y batch, then a single clipped SGD
/// update. `seeds` drive sampling for X→Y and Y→X respectively.
#[allow(clippy::too_many_arguments)]
pub fn dual_step(
    nmt: &mut Translator,
    x: &DualSide,
    y: &DualSide,
    batch_x: &[Vec<usize>],
    batch_y: &[Vec<usize>],
    config: &DualConfig,
    seeds: [u64; 2],
    step: usize,
) -> Result<(StepMetrics, Vec<RewardRecord>)> {
    config.validate()?;
    check_batch(batch_x)?;
    check_batch(batch_y)?;
    let result = (|| {
        let (mx, mut records) = run_direction(nmt, x, y, batch_x, config, seeds[0])?;
        let (my, ry) = run_direction(nmt, y, x, batch_y, config, seeds[1])?;
        records.extend(ry);
        let grad_norm = nmt.params().grad_norm();
        if config.clip_norm > 0.0 {
            clip_global_norm(nmt.params_mut(), config.clip_norm)?;
        }
        sgd_step(nmt.params_mut(), config.lr)?;
        Ok((StepMetrics { step, grad_norm, lr: config.lr, directions: [mx, my] }, records))
    })();
    if result.is_err() {
        nmt.params_mut().zero_grads();
    }
    result
}

/// Endless shuffled passes over a corpus.
struct BatchStream<'a> {
    corpus: &'a [Vec<usize>],
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    fn new(corpus: &'a [Vec<usize>], seed: u64) -> Self {
        BatchStream { corpus, order: Vec::new(), cursor: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn next(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(self.corpus.len()) {
            if self.cursor == self.order.len() {
                self.order = (0..self.corpus.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.corpus[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }
}

/// Derives a per-purpose seed from a base seed (SplitMix64 finaliser).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a dual training run produced besides the model.
#[derive(Clone, Debug, Default)]
pub struct DualLog {
    pub metrics: Vec<StepMetrics>,
    pub rewards: Vec<RewardRecord>,
}

/// Iterates [`dual_step`] for `steps` steps over shuffled monolingual data
/// (bodies ending in EOS). `hook` runs after every step and may checkpoint or
/// evaluate.
#[allow(clippy::too_many_arguments)]
pub fn dual_train(
    mut nmt: Translator,
    x: &DualSide,
    y: &DualSide,
    mono_x: &[Vec<usize>],
    mono_y: &[Vec<usize>],
    config: &DualConfig,
    steps: usize,
    seed: u64,
    mut hook: impl FnMut(&StepMetrics, &Translator) -> Result<()>,
) -> Result<(Translator, DualLog)> {
    config.validate()?;
    let mut log = DualLog::default();
    if steps == 0 {
        return Ok((nmt, log));
    }
    if mono_x.is_empty() || mono_y.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut sx = BatchStream::new(mono_x, mix_seed(seed, 1));
    let mut sy = BatchStream::new(mono_y, mix_seed(seed, 2));
    for step in 0..steps {
        let bx = sx.next(config.batch_size);
        let by = sy.next(config.batch_size);
        let seeds = [mix_seed(seed, 2 * step as u64 + 3), mix_seed(seed, 2 * step as u64 + 4)];
        let (m, records) = dual_step(&mut nmt, x, y, &bx, &by, config, seeds, step)?;
        hook(&m, &nmt)?;
        log.metrics.push(m);
        log.rewards.extend(records);
    }
    Ok((nmt, log))
}

/// Continues supervised training on a parallel corpus for the formerly
/// zero-shot pair.
pub fn resume_with_parallel(
    mut nmt: Translator,
    pairs: &[(TaggedSentence, Vec<usize>)],
    config: &SupervisedConfig,
    steps: usize,
    seed: u64,
    log: impl FnMut(usize, f64),
) -> Result<Translator> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if steps > 0 {
        nmt.train_supervised(pairs, config, steps, seed, log)?;
    }
    Ok(nmt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmodel::LmConfig;
    use crate::tokenizer::{MergeTable, Vocab};
    use crate::translator::NmtConfig;

    fn setup() -> (Vocab, Translator, LanguageModel, LanguageModel) {
        let corpus = ["ab ba", "ccd"];
        let t = MergeTable::learn(&corpus, 0).unwrap();
        let v = Vocab::build(&t, &corpus, &["x", "y", "z"]).unwrap();
        let m = Translator::new(&v, &NmtConfig { embed: 6, hidden: 5, layers: 1, attention: 4 }, 1).unwrap();
        let lc = LmConfig { hidden: 5, ..LmConfig::default() };
        let lx = LanguageModel::new(v.first_tag(), &lc, 2).unwrap();
        let ly = LanguageModel::new(v.first_tag(), &lc, 3).unwrap();
        (v, m, lx, ly)
    }

    fn rec(total: f64) -> RewardRecord {
        RewardRecord { r1: 0.0, r2: 0.0, total, advantage: 0.0, truncated: false }
    }

    #[test]
    fn reward_combination_examples() {
        assert_eq!(combine_rewards(0.005, -10.0, -20.0), 0.005 * -10.0 + 0.995 * -20.0);
        assert!((combine_rewards(0.005, -10.0, -20.0) + 19.95).abs() < 1e-12);
        assert_eq!(combine_rewards(1.0, -3.5, -7.25), -3.5);
        assert_eq!(combine_rewards(0.0, -3.5, -7.25), -7.25);
    }

    #[test]
    fn baseline_examples() {
        let mut one = vec![rec(-4.0)];
        batch_baseline(&mut one).unwrap();
        assert_eq!(one[0].advantage, 0.0);
        let mut two = vec![rec(-1.0), rec(-3.0)];
        batch_baseline(&mut two).unwrap();
        assert_eq!((two[0].advantage, two[1].advantage), (1.0, -1.0));
        assert_eq!(batch_baseline(&mut []), Err(Error::EmptyBatch));
    }

    #[test]
    fn config_validation() {
        assert!(DualConfig::default().validate().is_ok());
        assert!(DualConfig { alpha: 2.0, ..Default::default() }.validate().is_err());
        assert!(DualConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(DualConfig { samples: 0, ..Default::default() }.validate().is_err());
        assert_eq!(DualConfig::default().max_len(4), 13);
    }

    #[test]
    fn rewards_use_both_models() {
        let (v, m, _, ly) = setup();
        let dir = Direction { source_tag: v.tag_id("x").unwrap(), target_tag: v.tag_id("y").unwrap() };
        let xs = vec![vec![5, 6, EOS]];
        let ys = vec![Decoded { tokens: vec![7], terminated: true }];
        let r = compute_rewards(&m, &ly, dir, &xs, &ys, 0.3, false).unwrap()[0];
        assert_eq!(r.r1, ly.score(&[7, EOS]).unwrap());
        assert_eq!(r.r2, m.conditional_score(&xs[0], &[7, EOS], dir.source_tag).unwrap());
        assert_eq!(r.total, 0.3 * r.r1 + 0.7 * r.r2);
        let tagged = vec![Decoded { tokens: vec![dir.target_tag], terminated: true }];
        assert_eq!(compute_rewards(&m, &ly, dir, &xs, &tagged, 0.3, false), Err(Error::TagInSequence(dir.target_tag)));
    }

    #[test]
    fn zero_advantage_with_alpha_one_gives_zero_gradient() {
        let (v, mut m, _, _) = setup();
        let dir = Direction { source_tag: v.tag_id("x").unwrap(), target_tag: v.tag_id("y").unwrap() };
        let batch = vec![PolicySample { source: vec![5, EOS], sample: Decoded { tokens: vec![6], terminated: true }, advantage: 0.0 }];
        policy_gradient(&mut m, dir, &batch, 1.0, 1).unwrap();
        assert_eq!(m.params().grad_norm(), 0.0);
        let bad = vec![PolicySample { advantage: f64::NAN, ..batch[0].clone() }];
        assert!(policy_gradient(&mut m, dir, &bad, 1.0, 1).is_err());
    }

    #[test]
    fn gradient_is_linear_in_advantage_and_ignores_shifts_after_baseline() {
        let (v, mut m, _, _) = setup();
        let dir = Direction { source_tag: v.tag_id("x").unwrap(), target_tag: v.tag_id("y").unwrap() };
        let samples = [
            (vec![5, 6, EOS], Decoded { tokens: vec![7, 8], terminated: true }),
            (vec![9, EOS], Decoded { tokens: vec![4], terminated: false }),
            (vec![6, 6, EOS], Decoded { tokens: vec![], terminated: true }),
        ];
        let grads = |m: &mut Translator, shift: f64| {
            let mut recs: Vec<RewardRecord> = [-1.5, -4.0, -2.25].iter().map(|&r| rec(r + shift)).collect();
            batch_baseline(&mut recs).unwrap();
            let batch: Vec<PolicySample> = samples
                .iter()
                .zip(&recs)
                .map(|((s, d), r)| PolicySample { source: s.clone(), sample: d.clone(), advantage: r.advantage })
                .collect();
            policy_gradient(m, dir, &batch, 0.4, 1).unwrap();
            let g: Vec<f64> = m.params().iter().flat_map(|p| p.grad.data().to_vec()).collect();
            m.params_mut().zero_grads();
            g
        };
        let a = grads(&mut m, 0.0);
        let b = grads(&mut m, 1e3);
        let scale = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9 * scale, "{x} vs {y}");
        }
    }

    fn mono(v: &Vocab) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let _ = v;
        (vec![vec![4, 5, EOS], vec![6, EOS], vec![7, 8, 9, EOS]], vec![vec![10, EOS], vec![5, 5, EOS]])
    }

    #[test]
    fn zero_lr_step_reports_metrics_and_leaves_params() {
        let (v, mut m, lx, ly) = setup();
        let (bx, by) = mono(&v);
        let before = m.checksum();
        let x = DualSide { name: "x", tag: v.tag_id("x").unwrap(), lm: &lx };
        let y = DualSide { name: "y", tag: v.tag_id("y").unwrap(), lm: &ly };
        let cfg = DualConfig { lr: 0.0, temperature: 1.0, ..Default::default() };
        let (metrics, records) = dual_step(&mut m, &x, &y, &bx, &by, &cfg, [1, 2], 0).unwrap();
        assert_eq!(m.checksum(), before);
        assert_eq!(records.len(), 5);
        assert!(metrics.grad_norm > 0.0);
        assert_eq!(metrics.directions[0].direction, "x-y");
        assert!(metrics.json_lines().lines().count() == 2);
    }

    #[test]
    fn swapped_roles_mirror_metrics() {
        let (v, m, lx, ly) = setup();
        let (bx, by) = mono(&v);
        let x = DualSide { name: "x", tag: v.tag_id("x").unwrap(), lm: &lx };
        let y = DualSide { name: "y", tag: v.tag_id("y").unwrap(), lm: &ly };
        let cfg = DualConfig { temperature: 1.0, ..Default::default() };
        let (a, _) = dual_step(&mut m.clone(), &x, &y, &bx, &by, &cfg, [11, 12], 0).unwrap();
        let (b, _) = dual_step(&mut m.clone(), &y, &x, &by, &bx, &cfg, [12, 11], 0).unwrap();
        assert_eq!(a.directions[0], b.directions[1]);
        assert_eq!(a.directions[1], b.directions[0]);
        let (c, _) = dual_step(&mut m.clone(), &x, &y, &bx, &by, &cfg, [11, 12], 0).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn dual_train_keeps_lms_and_logs_each_step() {
        let (v, m, lx, ly) = setup();
        let (bx, by) = mono(&v);
        let x = DualSide { name: "x", tag: v.tag_id("x").unwrap(), lm: &lx };
        let y = DualSide { name: "y", tag: v.tag_id("y").unwrap(), lm: &ly };
        let cfg = DualConfig { temperature: 1.0, batch_size: 2, lr: 0.01, ..Default::default() };
        let before = m.checksum();
        let (same, log) = dual_train(m.clone(), &x, &y, &bx, &by, &cfg, 0, 5, |_, _| Ok(())).unwrap();
        assert_eq!(same.checksum(), before);
        assert!(log.metrics.is_empty());
        let (lxs, lys) = (lx.checksum(), ly.checksum());
        let mut calls = 0;
        let (trained, log) = dual_train(m, &x, &y, &bx, &by, &cfg, 4, 5, |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((log.metrics.len(), calls), (4, 4));
        assert_ne!(trained.checksum(), before);
        assert_eq!((lx.checksum(), ly.checksum()), (lxs, lys));
        for r in &log.rewards {
            assert_eq!(r.total, combine_rewards(cfg.alpha, r.r1, r.r2));
        }
    }

    #[test]
    fn resume_contract() {
        let (v, m, _, _) = setup();
        let before = m.checksum();
        let pair = (TaggedSentence::new(&v, v.tag_id("y").unwrap(), vec![5, EOS]).unwrap(), vec![6, EOS]);
        let cfg = SupervisedConfig::default();
        let same = resume_with_parallel(m.clone(), std::slice::from_ref(&pair), &cfg, 0, 1, |_, _| ()).unwrap();
        assert_eq!(same.checksum(), before);
        assert_eq!(resume_with_parallel(m.clone(), &[], &cfg, 3, 1, |_, _| ()).unwrap_err(), Error::EmptyCorpus);
        let moved = resume_with_parallel(m, &[pair], &cfg, 3, 1, |_, _| ()).unwrap();
        assert_ne!(moved.checksum(), before);
    }
}
