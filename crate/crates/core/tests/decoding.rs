mod common;

use common::*;
use dualshot::translator::{Decoded, DecodeMode, TaggedSentence};
use dualshot::{NmtConfig, Translator, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn wider() -> (Vocab, Translator) {
    let vocab = Vocab::from_text("<pad>\n<s>\n</s>\n<unk>\na\nb\nc\nd\ne\nf\n<2x>\n<2y>\n").unwrap();
    let cfg = NmtConfig { embed: 8, hidden: 8, layers: 2, attention: 8 };
    let t = Translator::new(&vocab, &cfg, 17).unwrap();
    let t = Translator::from_params(scaled(t.into_params(), 10.0), &vocab).unwrap();
    (vocab, t)
}

#[test]
fn vanishing_temperature_is_greedy() {
    let (vocab, nmt) = wider();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let len = rng.gen_range(1..9);
        let mut body: Vec<usize> = (0..len).map(|_| rng.gen_range(3..10)).collect();
        body.push(2);
        let tag = vocab.first_tag() + i % 2;
        let input = TaggedSentence::new(&vocab, tag, body).unwrap();
        let greedy = nmt.greedy_decode(&input, 20).unwrap();
        let sampled = nmt.sample_decode(&input, 1e-9, 20, i as u64).unwrap();
        assert_eq!(greedy, sampled, "input {i}");
    }
}

#[test]
fn unit_temperature_samples_follow_the_model() {
    let nmt = toy_translator(21);
    let events = toy_events();
    let targets: Vec<Vec<usize>> = events.iter().map(Decoded::as_target).collect();
    let probs: Vec<f64> =
        nmt.log_prob_batch(&vec![toy_input(); events.len()], &targets).unwrap().iter().map(|l| l.exp()).collect();

    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let draws = nmt
        .decode_batch(&vec![toy_input(); n], DecodeMode::Sample { temperature: 1.0 }, &vec![TOY_MAX_LEN; n], &mut rng)
        .unwrap();
    let mut counts = vec![0usize; events.len()];
    for d in &draws {
        counts[events.iter().position(|e| e == d).expect("unknown outcome")] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = ChiSquared::new((events.len() - 1) as f64).unwrap().sf(stat);
    assert!(probs.iter().all(|&p| p * n as f64 >= 5.0), "{probs:?}");
    assert!(p_value > 0.01, "chi-square {stat}, p = {p_value}");
}

#[test]
fn lower_temperature_sharpens_samples() {
    let nmt = toy_translator(21);
    let mode_count = |t: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let greedy = nmt.greedy_decode(&toy_input(), TOY_MAX_LEN).unwrap();
        nmt.decode_batch(&vec![toy_input(); 2000], DecodeMode::Sample { temperature: t }, &[TOY_MAX_LEN; 2000], &mut rng)
            .unwrap()
            .into_iter()
            .filter(|d| *d == greedy)
            .count()
    };
    assert!(mode_count(0.2) > mode_count(1.0));
}
