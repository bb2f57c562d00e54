//! Corpus BLEU, language purity and per-direction evaluation tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::Corpus;
use crate::tokenizer::{MergeTable, Vocab};
use crate::translator::{DecodeMode, Translator};
use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level BLEU with its sufficient statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub bleu: f64,
    pub brevity_penalty: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
    pub sentences: usize,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Case-sensitive whitespace-token BLEU with clipped 1..4-gram precisions,
/// corpus-level aggregation and no smoothing (any zero precision gives 0).
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch(hypotheses.len(), references.len()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else if matches == totals && hyp_len == ref_len {
        100.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport { bleu, brevity_penalty, precisions, matches, totals, hyp_len, ref_len, sentences: hypotheses.len() })
}

/// Surface-token inventories per language.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LanguageInventory {
    languages: BTreeMap<String, HashSet<String>>,
}

/// Share of tokens that belong to one language.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PurityReport {
    /// `None` for lines without tokens.
    pub per_line: Vec<Option<f64>>,
    /// Over all tokens; 0 when there are none.
    pub corpus: f64,
}

impl LanguageInventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, language: &str, words: HashSet<String>) {
        self.languages.insert(language.to_string(), words);
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.languages.keys().map(String::as_str)
    }

    /// Fraction of whitespace tokens found in `language`'s inventory.
    pub fn fraction<S: AsRef<str>>(&self, lines: &[S], language: &str) -> Result<PurityReport> {
        let inv = self
            .languages
            .get(language)
            .ok_or_else(|| Error::Config(format!("no inventory for language {language:?}")))?;
        let (mut hit, mut total) = (0usize, 0usize);
        let per_line = lines
            .iter()
            .map(|l| {
                let toks: Vec<&str> = l.as_ref().split_whitespace().collect();
                let h = toks.iter().filter(|t| inv.contains(**t)).count();
                hit += h;
                total += toks.len();
                (!toks.is_empty()).then(|| h as f64 / toks.len() as f64)
            })
            .collect();
        let corpus = if total == 0 { 0.0 } else { hit as f64 / total as f64 };
        Ok(PurityReport { per_line, corpus })
    }
}

/// Free-function form of [`LanguageInventory::fraction`].
pub fn language_id_fraction<S: AsRef<str>>(
    lines: &[S],
    inventory: &LanguageInventory,
    language: &str,
) -> Result<PurityReport> {
    inventory.fraction(lines, language)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalEntry {
    pub source: String,
    pub target: String,
    pub model: String,
    pub report: BleuReport,
    /// Token share in the target language, when inventories were given.
    pub purity: Option<f64>,
}

impl EvalEntry {
    pub fn direction(&self) -> String {
        format!("{}-{}", self.source, self.target)
    }
}

/// BLEU for every ordered language pair and model.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalMatrix {
    pub entries: Vec<EvalEntry>,
}

impl EvalMatrix {
    pub fn get(&self, source: &str, target: &str, model: &str) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.source == source && e.target == target && e.model == model)
    }

    pub fn bleu(&self, source: &str, target: &str, model: &str) -> Option<f64> {
        self.get(source, target, model).map(|e| e.report.bleu)
    }

    pub fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.model.as_str()) {
                out.push(&e.model);
            }
        }
        out
    }

    fn directions(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for e in &self.entries {
            let d = (e.source.clone(), e.target.clone());
            if !out.contains(&d) {
                out.push(d);
            }
        }
        out
    }

    /// Merges another matrix's entries (e.g. one more model).
    pub fn extend(&mut self, other: EvalMatrix) {
        self.entries.extend(other.entries);
    }

    /// `direction,model,bleu,bp,p1,p2,p3,p4`, then one row per entry.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("direction,model,bleu,bp,p1,p2,p3,p4\n");
        for e in &self.entries {
            let r = &e.report;
            let _ = writeln!(
                s,
                "{},{},{:.2},{:.4},{:.4},{:.4},{:.4},{:.4}",
                e.direction(),
                e.model,
                r.bleu,
                r.brevity_penalty,
                r.precisions[0],
                r.precisions[1],
                r.precisions[2],
                r.precisions[3]
            );
        }
        s
    }

    /// Directions as rows, models as columns.
    pub fn to_table(&self) -> String {
        let models = self.models();
        let mut s = format!("{:<10}", "direction");
        for m in &models {
            let _ = write!(s, "{m:>10}");
        }
        s.push('\n');
        for (src, tgt) in self.directions() {
            let _ = write!(s, "{:<10}", format!("{src}-{tgt}"));
            for m in &models {
                match self.bleu(&src, &tgt, m) {
                    Some(b) => {
                        let _ = write!(s, "{b:>10.2}");
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Greedy translations of one side of a multi-way corpus into `target`.
pub fn translate_side(
    model: &Translator,
    vocab: &Vocab,
    table: &MergeTable,
    lines: &[String],
    target: &str,
) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.translate_batch(vocab, table, lines, target, DecodeMode::Greedy, &mut rng)
}

/// Greedy-decodes every ordered pair of the test corpus's languages with each
/// model and scores against the aligned side.
pub fn eval_matrix(
    models: &[(&str, &Translator)],
    vocab: &Vocab,
    table: &MergeTable,
    test: &Corpus,
    inventory: Option<&LanguageInventory>,
) -> Result<EvalMatrix> {
    if test.languages.len() < 2 {
        return Err(Error::Config("evaluation needs at least two aligned languages".into()));
    }
    let mut entries = Vec::new();
    for (name, model) in models {
        for (si, src) in test.languages.iter().enumerate() {
            for (ti, tgt) in test.languages.iter().enumerate() {
                if si == ti {
                    continue;
                }
                let hyps = translate_side(model, vocab, table, &test.sides[si], tgt)?;
                let report = corpus_bleu(&hyps, &test.sides[ti])?;
                let purity = inventory.map(|inv| inv.fraction(&hyps, tgt)).transpose()?.map(|p| p.corpus);
                entries.push(EvalEntry { source: src.clone(), target: tgt.clone(), model: name.to_string(), report, purity });
            }
        }
    }
    Ok(EvalMatrix { entries })
}
