#![allow(dead_code)]

use dualshot::dualtrain::Direction;
use dualshot::translator::{Decoded, TaggedSentence};
use dualshot::{LanguageModel, LmConfig, NmtConfig, ParamStore, Translator, Vocab};

/// Three sampleable ids (`</s>`, `<unk>`, `a`) and two language tags.
pub fn toy_vocab() -> Vocab {
    Vocab::from_text("<pad>\n<s>\n</s>\n<unk>\na\n<2x>\n<2y>\n").unwrap()
}

pub const TAG_X: usize = 5;
pub const TAG_Y: usize = 6;
pub const TOY_MAX_LEN: usize = 2;

pub fn scaled(mut store: ParamStore, factor: f64) -> ParamStore {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v *= factor;
        }
    }
    store
}

/// Small translator with weights spread wide enough for peaked distributions.
pub fn toy_translator(seed: u64) -> Translator {
    let vocab = toy_vocab();
    let cfg = NmtConfig { embed: 3, hidden: 4, layers: 1, attention: 3 };
    let t = Translator::new(&vocab, &cfg, seed).unwrap();
    Translator::from_params(scaled(t.into_params(), 12.0), &vocab).unwrap()
}

pub fn toy_lm(seed: u64) -> LanguageModel {
    let cfg = LmConfig { hidden: 4, ..LmConfig::default() };
    let lm = LanguageModel::new(toy_vocab().first_tag(), &cfg, seed).unwrap();
    LanguageModel::from_params(scaled(lm.params().clone(), 12.0)).unwrap()
}

pub fn toy_source() -> Vec<usize> {
    vec![4, 2]
}

pub fn toy_direction() -> Direction {
    Direction { source_tag: TAG_X, target_tag: TAG_Y }
}

pub fn toy_input() -> TaggedSentence {
    TaggedSentence { tag: TAG_Y, body: toy_source() }
}

/// Every outcome of sampling with budget 2 over `{</s>, <unk>, a}`.
pub fn toy_events() -> Vec<Decoded> {
    let mut v = vec![Decoded { tokens: vec![], terminated: true }];
    for a in [3, 4] {
        v.push(Decoded { tokens: vec![a], terminated: true });
    }
    for a in [3, 4] {
        for b in [3, 4] {
            v.push(Decoded { tokens: vec![a, b], terminated: false });
        }
    }
    v
}
