//! Synthetic multilingual data and corpus I/O.
//!
//! Every language renders sentences of one shared *base* language: each base
//! token maps to a two-letter word over the language's own alphabet, and an
//! optional adjacent-swap reordering makes word order differ between languages.
//! Base sentences come from a seeded order-1 Markov chain, so exact reference
//! translations between any two languages follow by composing the ciphers.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::io_err;
use crate::{Error, Result};

/// Default cap on whitespace tokens per line when loading corpora.
pub const MAX_LINE_TOKENS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Reorder {
    None,
    /// Swap positions (0,1), (2,3), ...
    SwapEven,
    /// Swap positions (1,2), (3,4), ...
    SwapOdd,
}

impl Reorder {
    /// Applies the permutation; each variant is an involution.
    pub fn apply<T: Clone>(self, tokens: &[T]) -> Vec<T> {
        let mut v = tokens.to_vec();
        let start = match self {
            Reorder::None => return v,
            Reorder::SwapEven => 0,
            Reorder::SwapOdd => 1,
        };
        let mut i = start;
        while i + 1 < v.len() {
            v.swap(i, i + 1);
            i += 2;
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LanguageSpec {
    pub name: String,
    pub alphabet: Vec<char>,
    pub reorder: Reorder,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub base_vocab: usize,
    /// The first language is the pivot; the next two form the zero-shot pair.
    pub languages: Vec<LanguageSpec>,
    pub min_len: usize,
    pub max_len: usize,
    /// Successors kept per base token in the Markov chain.
    pub branching: usize,
    pub seed: u64,
}

const ALPHABETS: [&str; 6] = ["abcdef", "ghijkl", "mnopqr", "stuvwx", "ABCDEF", "GHIJKL"];

impl SyntheticSpec {
    /// Pivot `z` plus cipher languages `x`, `y` (and `w`, ... for larger counts).
    pub fn default_with_languages(count: usize, seed: u64) -> Result<Self> {
        let names = ["z", "x", "y", "w", "v", "u"];
        let reorders = [Reorder::None, Reorder::SwapEven, Reorder::SwapOdd, Reorder::None, Reorder::SwapEven, Reorder::SwapOdd];
        if !(2..=names.len()).contains(&count) {
            return Err(Error::Config(format!("language count {count} outside 2..={}", names.len())));
        }
        let languages = (0..count)
            .map(|k| LanguageSpec { name: names[k].into(), alphabet: ALPHABETS[k].chars().collect(), reorder: reorders[k] })
            .collect();
        Ok(SyntheticSpec { base_vocab: 24, languages, min_len: 3, max_len: 12, branching: 4, seed })
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.len() < 2 {
            return Err(Error::Config("need at least two languages".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if self.base_vocab == 0 || self.branching == 0 {
            return Err(Error::Config("base vocabulary and branching must be positive".into()));
        }
        let mut seen = HashSet::new();
        let mut names = HashSet::new();
        for l in &self.languages {
            if !names.insert(&l.name) {
                return Err(Error::Config(format!("duplicate language {}", l.name)));
            }
            if l.alphabet.len() * l.alphabet.len() < self.base_vocab {
                return Err(Error::Config(format!("alphabet of {} too small for {} words", l.name, self.base_vocab)));
            }
            for c in &l.alphabet {
                if c.is_whitespace() || !seen.insert(*c) {
                    return Err(Error::Config(format!("alphabets must be disjoint and non-blank ({c:?})")));
                }
            }
        }
        Ok(())
    }

    pub fn language_names(&self) -> Vec<&str> {
        self.languages.iter().map(|l| l.name.as_str()).collect()
    }
}

/// Word tables and chain derived from a spec.
#[derive(Clone, Debug)]
pub struct SyntheticLanguages {
    spec: SyntheticSpec,
    /// `words[lang][base_token]`
    words: Vec<Vec<String>>,
    /// Row-stochastic successor lists `(token, cumulative probability)`.
    chain: Vec<Vec<(usize, f64)>>,
    initial: Vec<(usize, f64)>,
}

fn cumulative(weights: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut acc = 0.0;
    weights
        .into_iter()
        .map(|(t, w)| {
            acc += w / total;
            (t, acc)
        })
        .collect()
}

fn draw(cdf: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    cdf.iter().find(|(_, c)| u < *c).unwrap_or(cdf.last().unwrap()).0
}

impl SyntheticLanguages {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut words = Vec::with_capacity(spec.languages.len());
        for l in &spec.languages {
            let mut all: Vec<String> = l
                .alphabet
                .iter()
                .flat_map(|a| l.alphabet.iter().map(move |b| format!("{a}{b}")))
                .collect();
            all.shuffle(&mut rng);
            all.truncate(spec.base_vocab);
            words.push(all);
        }
        let v = spec.base_vocab;
        let k = spec.branching.min(v);
        let mut chain = Vec::with_capacity(v);
        for _ in 0..v {
            let mut succ: Vec<usize> = (0..v).collect();
            succ.shuffle(&mut rng);
            succ.truncate(k);
            let weights = succ.into_iter().map(|t| (t, rng.gen_range(0.2..1.0))).collect();
            chain.push(cumulative(weights));
        }
        let initial = cumulative((0..v).map(|t| (t, rng.gen_range(0.2..1.0))).collect());
        Ok(SyntheticLanguages { spec: spec.clone(), words, chain, initial })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn lang_index(&self, name: &str) -> Result<usize> {
        self.spec
            .languages
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Config(format!("unknown language {name:?}")))
    }

    /// Surface inventory (all words) of a language.
    pub fn inventory(&self, name: &str) -> Result<HashSet<String>> {
        Ok(self.words[self.lang_index(name)?].iter().cloned().collect())
    }

    /// Exact transition probability `P(next | prev)` of the base chain (`prev = None` for the first token).
    pub fn transition(&self, prev: Option<usize>, next: usize) -> f64 {
        let cdf = match prev {
            Some(p) => &self.chain[p],
            None => &self.initial,
        };
        let mut last = 0.0;
        for &(t, c) in cdf {
            if t == next {
                return c - last;
            }
            last = c;
        }
        0.0
    }

    pub fn sample_base(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        let mut s = Vec::with_capacity(len);
        let mut cur = draw(&self.initial, rng);
        s.push(cur);
        while s.len() < len {
            cur = draw(&self.chain[cur], rng);
            s.push(cur);
        }
        s
    }

    /// Renders a base sentence in a language.
    pub fn render(&self, lang: &str, base: &[usize]) -> Result<String> {
        let k = self.lang_index(lang)?;
        let ordered = self.spec.languages[k].reorder.apply(base);
        Ok(ordered.iter().map(|&t| self.words[k][t].as_str()).collect::<Vec<_>>().join(" "))
    }

    /// Recovers the base sentence from a surface line.
    pub fn decipher(&self, lang: &str, line: &str) -> Result<Vec<usize>> {
        let k = self.lang_index(lang)?;
        let toks: Vec<usize> = line
            .split_whitespace()
            .map(|w| {
                self.words[k]
                    .iter()
                    .position(|x| x == w)
                    .ok_or_else(|| Error::Malformed(format!("{w:?} is not a {lang} word")))
            })
            .collect::<Result<_>>()?;
        Ok(self.spec.languages[k].reorder.apply(&toks))
    }

    /// Reference translation of `line` from `from` into `to`.
    pub fn translate(&self, line: &str, from: &str, to: &str) -> Result<String> {
        self.render(to, &self.decipher(from, line)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CorpusKind {
    Parallel,
    Monolingual,
    MultiWay,
}

/// Line-aligned sentences, one side per language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub languages: Vec<String>,
    pub sides: Vec<Vec<String>>,
}

impl Corpus {
    pub fn monolingual(language: &str, lines: Vec<String>) -> Self {
        Corpus { kind: CorpusKind::Monolingual, languages: vec![language.into()], sides: vec![lines] }
    }

    pub fn parallel(a: &str, b: &str, lines_a: Vec<String>, lines_b: Vec<String>) -> Result<Self> {
        if lines_a.len() != lines_b.len() {
            return Err(Error::LengthMismatch(lines_a.len(), lines_b.len()));
        }
        Ok(Corpus { kind: CorpusKind::Parallel, languages: vec![a.into(), b.into()], sides: vec![lines_a, lines_b] })
    }

    pub fn len(&self) -> usize {
        self.sides.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self, language: &str) -> Result<&[String]> {
        self.languages
            .iter()
            .position(|l| l == language)
            .map(|k| self.sides[k].as_slice())
            .ok_or_else(|| Error::Config(format!("corpus has no {language:?} side")))
    }

    fn select(&self, idx: &[usize]) -> Corpus {
        Corpus {
            kind: self.kind,
            languages: self.languages.clone(),
            sides: self.sides.iter().map(|s| idx.iter().map(|&i| s[i].clone()).collect()).collect(),
        }
    }
}

/// Sizes of every generated split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitSizes {
    pub supervised: usize,
    pub monolingual: usize,
    pub test: usize,
    pub small_parallel: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { supervised: 20_000, monolingual: 5_000, test: 1_000, small_parallel: 500 }
    }
}

/// All data roles of one experiment. `x`/`y` are the zero-shot pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub pivot: String,
    pub x: String,
    pub y: String,
    /// Pivot paired with each non-pivot language.
    pub supervised: Vec<Corpus>,
    pub mono_x: Corpus,
    pub mono_y: Corpus,
    /// Multi-way test set over every language.
    pub test: Corpus,
    pub small_xy: Corpus,
    /// Ground-truth x-y pairs for the monolingual sentences (full supervision role).
    pub full_xy: Corpus,
}

/// Generates every split from disjoint base sentences.
pub fn gen_synthetic(spec: &SyntheticSpec, sizes: &SplitSizes) -> Result<(SyntheticLanguages, SyntheticData)> {
    if spec.languages.len() < 3 {
        return Err(Error::Config("zero-shot data needs a pivot and two more languages".into()));
    }
    if sizes.supervised == 0 || sizes.monolingual == 0 || sizes.test == 0 || sizes.small_parallel == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let langs = SyntheticLanguages::new(spec)?;
    let names = spec.language_names();
    let (pivot, x, y) = (names[0], names[1], names[2]);
    let n_sup = names.len() - 1;
    let needed = sizes.supervised * n_sup + 2 * sizes.monolingual + sizes.test + sizes.small_parallel;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut seen = HashSet::with_capacity(needed);
    let mut pool = Vec::with_capacity(needed);
    let mut attempts = 0usize;
    while pool.len() < needed {
        attempts += 1;
        if attempts > needed * 50 + 10_000 {
            return Err(Error::Config(format!(
                "base vocabulary too small: found {} distinct sentences, need {needed}",
                pool.len()
            )));
        }
        let s = langs.sample_base(&mut rng);
        if seen.insert(s.clone()) {
            pool.push(s);
        }
    }
    let mut rest = pool.into_iter();
    let mut take = |n: usize| -> Vec<Vec<usize>> { rest.by_ref().take(n).collect() };
    let render_all = |lang: &str, base: &[Vec<usize>]| -> Result<Vec<String>> {
        base.iter().map(|b| langs.render(lang, b)).collect()
    };

    let mut supervised = Vec::with_capacity(n_sup);
    for other in &names[1..] {
        let base = take(sizes.supervised);
        supervised.push(Corpus::parallel(pivot, other, render_all(pivot, &base)?, render_all(other, &base)?)?);
    }
    let mono_x_base = take(sizes.monolingual);
    let mono_y_base = take(sizes.monolingual);
    let test_base = take(sizes.test);
    let small_base = take(sizes.small_parallel);

    let mono_x = Corpus::monolingual(x, render_all(x, &mono_x_base)?);
    let mono_y = Corpus::monolingual(y, render_all(y, &mono_y_base)?);
    let test = Corpus {
        kind: CorpusKind::MultiWay,
        languages: names.iter().map(|s| s.to_string()).collect(),
        sides: names.iter().map(|l| render_all(l, &test_base)).collect::<Result<_>>()?,
    };
    let small_xy = Corpus::parallel(x, y, render_all(x, &small_base)?, render_all(y, &small_base)?)?;
    let full_base: Vec<Vec<usize>> = mono_x_base.iter().chain(&mono_y_base).cloned().collect();
    let full_xy = Corpus::parallel(x, y, render_all(x, &full_base)?, render_all(y, &full_base)?)?;

    let data = SyntheticData {
        pivot: pivot.into(),
        x: x.into(),
        y: y.into(),
        supervised,
        mono_x,
        mono_y,
        test,
        small_xy,
        full_xy,
    };
    Ok((langs, data))
}

/// One produced file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub role: String,
    pub language: String,
    pub path: PathBuf,
    pub lines: usize,
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

impl SyntheticData {
    /// Writes every split as `<role>.<lang>` files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<ManifestEntry>> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut entries = Vec::new();
        let mut emit = |role: String, corpus: &Corpus| -> Result<()> {
            for (lang, side) in corpus.languages.iter().zip(&corpus.sides) {
                let path = dir.join(format!("{role}.{lang}"));
                write_lines(&path, side)?;
                entries.push(ManifestEntry { role: role.clone(), language: lang.clone(), path, lines: side.len() });
            }
            Ok(())
        };
        for c in &self.supervised {
            emit(format!("train.{}-{}", c.languages[0], c.languages[1]), c)?;
        }
        emit("mono".into(), &self.mono_x)?;
        emit("mono".into(), &self.mono_y)?;
        emit("test".into(), &self.test)?;
        emit(format!("small.{}-{}", self.x, self.y), &self.small_xy)?;
        emit(format!("full.{}-{}", self.x, self.y), &self.full_xy)?;
        Ok(entries)
    }
}

/// Tab-separated manifest: `role  language  lines  file`, preceded by `# key=value` lines.
/// Only the file name is written, so manifests do not depend on where the data lives.
pub fn manifest_text(meta: &[(&str, String)], entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for (k, v) in meta {
        let _ = writeln!(s, "# {k}={v}");
    }
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.role, e.language, e.lines, e.path.file_name().unwrap_or(e.path.as_os_str()).to_string_lossy());
    }
    s
}

/// Loads two line-aligned files, dropping pairs where either side exceeds
/// `max_tokens` whitespace tokens. Returns the corpus and the drop count.
pub fn load_parallel(path_a: &Path, path_b: &Path, max_tokens: usize) -> Result<(Corpus, usize)> {
    let a = read_lines(path_a)?;
    let b = read_lines(path_b)?;
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let lang = |p: &Path| p.extension().and_then(|e| e.to_str()).unwrap_or("a").to_string();
    let (mut ka, mut kb) = (Vec::new(), Vec::new());
    let mut dropped = 0;
    for (la, lb) in a.into_iter().zip(b) {
        if la.split_whitespace().count() > max_tokens || lb.split_whitespace().count() > max_tokens {
            dropped += 1;
        } else {
            ka.push(la);
            kb.push(lb);
        }
    }
    let (na, mut nb) = (lang(path_a), lang(path_b));
    if na == nb {
        nb.push('\'');
    }
    Ok((Corpus::parallel(&na, &nb, ka, kb)?, dropped))
}

/// Deterministic shuffled partition by `fractions` (which must sum to 1).
pub fn split(corpus: &Corpus, fractions: &[f64], seed: u64) -> Result<Vec<Corpus>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = corpus.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        if end <= start {
            return Err(Error::Config(format!("split part {k} would be empty ({n} lines)")));
        }
        parts.push(corpus.select(&idx[start..end]));
        start = end;
    }
    Ok(parts)
}
