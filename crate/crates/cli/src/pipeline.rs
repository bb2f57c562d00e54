//! Experiment stages over a working directory:
//!
//! ```text
//! data/            generated corpora and data manifest
//! bpe.txt vocab.txt
//! models/*.ckpt    language models and translator regimes
//! logs/*.jsonl     training metrics
//! matrix.csv matrix.txt manifest.json config.txt
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dualshot::datagen::{self, gen_synthetic, read_lines, Corpus, CorpusKind, SyntheticLanguages};
use dualshot::dualtrain::{self, DualSide};
use dualshot::evalkit::{eval_matrix, LanguageInventory};
use dualshot::langmodel::lm_train;
use dualshot::numcore;
use dualshot::tokenizer::{MergeTable, Vocab, EOS};
use dualshot::{EvalMatrix, LanguageModel, TaggedSentence, Translator};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Component seed: the first 8 bytes of SHA-256 over `"<seed>:<component>"`.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{component}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Checkpoint file stem for a regime name (`Dual-0` → `dual-0`).
pub fn model_stem(regime: &str) -> String {
    regime.to_ascii_lowercase()
}

/// Paths of one experiment directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    /// Progress lines go to standard error unless quiet.
    pub quiet: bool,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into(), quiet: false }
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn model(&self, stem: &str) -> PathBuf {
        self.root.join("models").join(format!("{stem}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn bpe(&self) -> PathBuf {
        self.root.join("bpe.txt")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    fn ensure_dirs(&self) -> Result<(), CliError> {
        for d in ["data", "models", "logs"] {
            let p = self.root.join(d);
            fs::create_dir_all(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    }

    pub fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

struct JsonLog {
    file: fs::File,
    path: PathBuf,
}

impl JsonLog {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let file = fs::File::create(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(JsonLog { file, path })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<(), CliError> {
        let line = serde_json::to_string(record).map_err(|e| CliError::Data(e.to_string()))?;
        self.write_raw(&format!("{line}\n"))
    }

    fn write_raw(&mut self, text: &str) -> Result<(), CliError> {
        self.file.write_all(text.as_bytes()).map_err(|e| CliError::Data(format!("{}: {e}", self.path.display())))
    }
}

/// Language roles fixed by the generator: pivot, the zero-shot pair, extras.
#[derive(Clone, Debug)]
pub struct Roles {
    pub all: Vec<String>,
    pub pivot: String,
    pub x: String,
    pub y: String,
}

impl Roles {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let spec = cfg.synthetic_spec()?;
        let all: Vec<String> = spec.language_names().iter().map(|s| s.to_string()).collect();
        Ok(Roles { pivot: all[0].clone(), x: all[1].clone(), y: all[2].clone(), all })
    }

    pub fn supervised_files(&self) -> Vec<(String, String, String)> {
        self.all[1..]
            .iter()
            .map(|l| (format!("train.{}-{l}", self.pivot), self.pivot.clone(), l.clone()))
            .collect()
    }
}

/// Generates every split under `data/` and writes `data/manifest.tsv`.
pub fn gen_data(cfg: &ExperimentConfig, ws: &Workspace) -> Result<SyntheticLanguages, CliError> {
    ws.ensure_dirs()?;
    let spec = cfg.synthetic_spec()?;
    let (langs, data) = gen_synthetic(&spec, &cfg.sizes)?;
    let entries = data.write(&ws.root.join("data"))?;
    let meta = [("seed", spec.seed.to_string()), ("languages", spec.language_names().join(","))];
    write_file(&ws.data("manifest.tsv"), &datagen::manifest_text(&meta, &entries))?;
    ws.progress(format!("gen-data: {} files", entries.len()));
    Ok(langs)
}

fn load_side(ws: &Workspace, role: &str, lang: &str) -> Result<Vec<String>, CliError> {
    let p = ws.data(&format!("{role}.{lang}"));
    if !p.exists() {
        return Err(CliError::Data(format!("missing corpus {} (run gen-data first)", p.display())));
    }
    Ok(read_lines(&p)?)
}

/// Learns BPE on every training and monolingual file and builds the vocabulary.
pub fn learn_bpe(cfg: &ExperimentConfig, ws: &Workspace) -> Result<(MergeTable, Vocab), CliError> {
    let roles = Roles::from_config(cfg)?;
    let mut corpus = Vec::new();
    for (role, a, b) in roles.supervised_files() {
        corpus.extend(load_side(ws, &role, &a)?);
        corpus.extend(load_side(ws, &role, &b)?);
    }
    corpus.extend(load_side(ws, "mono", &roles.x)?);
    corpus.extend(load_side(ws, "mono", &roles.y)?);
    let table = MergeTable::learn(&corpus, cfg.bpe_merges)?;
    let names: Vec<&str> = roles.all.iter().map(String::as_str).collect();
    let vocab = Vocab::build(&table, &corpus, &names)?;
    table.save(&ws.bpe())?;
    vocab.save(&ws.vocab())?;
    ws.progress(format!("learn-bpe: {} merges, {} vocabulary entries", table.len(), vocab.len()));
    Ok((table, vocab))
}

pub fn load_tokenizer(ws: &Workspace) -> Result<(MergeTable, Vocab), CliError> {
    if !ws.bpe().exists() || !ws.vocab().exists() {
        return Err(CliError::Data("missing bpe.txt or vocab.txt (run learn-bpe first)".into()));
    }
    Ok((MergeTable::load(&ws.bpe())?, Vocab::load(&ws.vocab())?))
}

/// Encodes lines to bodies ending in EOS; empty lines are dropped.
pub fn encode_lines(vocab: &Vocab, table: &MergeTable, lines: &[String]) -> Vec<Vec<usize>> {
    lines
        .iter()
        .filter_map(|l| {
            let mut ids = vocab.encode(l, table);
            (!ids.is_empty()).then(|| {
                ids.push(EOS);
                ids
            })
        })
        .collect()
}

/// Tagged training pairs for `src → tgt` from two aligned sides.
pub fn tagged_pairs(
    vocab: &Vocab,
    table: &MergeTable,
    src: &[String],
    tgt: &[String],
    tgt_lang: &str,
) -> Result<Vec<(TaggedSentence, Vec<usize>)>, CliError> {
    if src.len() != tgt.len() {
        return Err(CliError::Data(format!("parallel sides differ: {} vs {} lines", src.len(), tgt.len())));
    }
    let tag = vocab.tag_id(tgt_lang)?;
    let mut out = Vec::with_capacity(src.len());
    for (s, t) in src.iter().zip(tgt) {
        let mut body = vocab.encode(s, table);
        let mut target = vocab.encode(t, table);
        if body.is_empty() || target.is_empty() {
            continue;
        }
        body.push(EOS);
        target.push(EOS);
        out.push((TaggedSentence::new(vocab, tag, body)?, target));
    }
    Ok(out)
}

/// Trains the frozen language model of `lang` on all its text.
pub fn train_lm(cfg: &ExperimentConfig, ws: &Workspace, lang: &str) -> Result<LanguageModel, CliError> {
    ws.ensure_dirs()?;
    let roles = Roles::from_config(cfg)?;
    let (table, vocab) = load_tokenizer(ws)?;
    let mut lines = load_side(ws, "mono", lang)?;
    for (role, a, b) in roles.supervised_files() {
        if b == lang || a == lang {
            lines.extend(load_side(ws, &role, lang)?);
        }
    }
    let corpus = encode_lines(&vocab, &table, &lines);
    let mut log = JsonLog::create(ws.log(&format!("lm.{lang}.jsonl")))?;
    let start = Instant::now();
    let (lm, epochs) = lm_train(&corpus, None, vocab.first_tag(), &cfg.lm, derive_seed(cfg.seed, &format!("lm.{lang}")))?;
    for e in &epochs {
        log.write(e)?;
    }
    numcore::save(lm.params(), &ws.model(&format!("lm.{lang}")))?;
    let last = epochs.last().map_or(f64::NAN, |e| e.train_ppl);
    ws.progress(format!("train-lm {lang}: train ppl {last:.3} ({:.0?})", start.elapsed()));
    Ok(lm)
}

pub fn load_lm(ws: &Workspace, lang: &str) -> Result<LanguageModel, CliError> {
    Ok(LanguageModel::from_params(numcore::load(&ws.model(&format!("lm.{lang}")))?)?)
}

pub fn load_model(ws: &Workspace, vocab: &Vocab, stem: &str) -> Result<Translator, CliError> {
    let path = ws.model(stem);
    if !path.exists() {
        return Err(CliError::Data(format!("missing checkpoint {}", path.display())));
    }
    Ok(Translator::from_params(numcore::load(&path)?, vocab)?)
}

fn save_model(ws: &Workspace, stem: &str, model: &Translator) -> Result<(), CliError> {
    Ok(numcore::save(model.params(), &ws.model(stem))?)
}

fn supervised_logger<'a>(ws: &'a Workspace, log: &'a mut JsonLog, label: &'a str, steps: usize) -> impl FnMut(usize, f64) + 'a {
    #[derive(Serialize)]
    struct Line {
        step: usize,
        nll: f64,
    }
    let every = (steps / 10).max(1);
    let mut window = 0.0;
    move |step, nll| {
        let _ = log.write(&Line { step, nll });
        window += nll;
        if (step + 1) % every == 0 {
            ws.progress(format!("{label}: step {}/{steps} mean nll {:.4}", step + 1, window / every as f64));
            window = 0.0;
        }
    }
}

/// Pivot-only model: both directions of every supervised pair.
pub fn train_nmt(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Translator, CliError> {
    ws.ensure_dirs()?;
    let roles = Roles::from_config(cfg)?;
    let (table, vocab) = load_tokenizer(ws)?;
    let mut pairs = Vec::new();
    for (role, a, b) in roles.supervised_files() {
        let sa = load_side(ws, &role, &a)?;
        let sb = load_side(ws, &role, &b)?;
        pairs.extend(tagged_pairs(&vocab, &table, &sa, &sb, &b)?);
        pairs.extend(tagged_pairs(&vocab, &table, &sb, &sa, &a)?);
    }
    let stem = model_stem("NMT-0");
    let mut model = Translator::new(&vocab, &cfg.nmt, derive_seed(cfg.seed, "nmt.init"))?;
    let mut log = JsonLog::create(ws.log(&format!("{stem}.jsonl")))?;
    let start = Instant::now();
    model.train_supervised(
        &pairs,
        &cfg.supervised,
        cfg.nmt_steps,
        derive_seed(cfg.seed, "nmt.batches"),
        supervised_logger(ws, &mut log, "train-nmt", cfg.nmt_steps),
    )?;
    save_model(ws, &stem, &model)?;
    ws.progress(format!("train-nmt: {} pairs, {} steps ({:.0?})", pairs.len(), cfg.nmt_steps, start.elapsed()));
    Ok(model)
}

/// Which zero-shot-pair corpus a resume run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResumeCorpus {
    Small,
    Full,
}

/// Continues `init` on parallel data for the zero-shot pair (both directions).
pub fn resume(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    init: &str,
    corpus: ResumeCorpus,
    name: &str,
) -> Result<Translator, CliError> {
    let roles = Roles::from_config(cfg)?;
    let (table, vocab) = load_tokenizer(ws)?;
    let (role, steps) = match corpus {
        ResumeCorpus::Small => (format!("small.{}-{}", roles.x, roles.y), cfg.resume_small_steps),
        ResumeCorpus::Full => (format!("full.{}-{}", roles.x, roles.y), cfg.resume_full_steps),
    };
    let sx = load_side(ws, &role, &roles.x)?;
    let sy = load_side(ws, &role, &roles.y)?;
    let mut pairs = tagged_pairs(&vocab, &table, &sx, &sy, &roles.y)?;
    pairs.extend(tagged_pairs(&vocab, &table, &sy, &sx, &roles.x)?);
    let model = load_model(ws, &vocab, &model_stem(init))?;
    let stem = model_stem(name);
    let mut log = JsonLog::create(ws.log(&format!("{stem}.jsonl")))?;
    let start = Instant::now();
    let label = format!("resume {name}");
    let model = dualtrain::resume_with_parallel(
        model,
        &pairs,
        &cfg.supervised,
        steps,
        derive_seed(cfg.seed, &format!("{stem}.batches")),
        supervised_logger(ws, &mut log, &label, steps),
    )?;
    save_model(ws, &stem, &model)?;
    ws.progress(format!("resume {name}: {} pairs, {steps} steps ({:.0?})", pairs.len(), start.elapsed()));
    Ok(model)
}

/// Dual training of `init` on the monolingual zero-shot-pair data.
pub fn train_dual(cfg: &ExperimentConfig, ws: &Workspace, init: &str, name: &str) -> Result<Translator, CliError> {
    let roles = Roles::from_config(cfg)?;
    let (table, vocab) = load_tokenizer(ws)?;
    let mono_x = encode_lines(&vocab, &table, &load_side(ws, "mono", &roles.x)?);
    let mono_y = encode_lines(&vocab, &table, &load_side(ws, "mono", &roles.y)?);
    let lm_x = load_lm(ws, &roles.x)?;
    let lm_y = load_lm(ws, &roles.y)?;
    let lm_sums = (lm_x.checksum(), lm_y.checksum());
    let x = DualSide { name: &roles.x, tag: vocab.tag_id(&roles.x)?, lm: &lm_x };
    let y = DualSide { name: &roles.y, tag: vocab.tag_id(&roles.y)?, lm: &lm_y };
    let model = load_model(ws, &vocab, &model_stem(init))?;
    let stem = model_stem(name);
    let mut metrics = JsonLog::create(ws.log(&format!("{stem}.metrics.jsonl")))?;
    let mut rewards = JsonLog::create(ws.log(&format!("{stem}.rewards.jsonl")))?;
    let start = Instant::now();
    let steps = cfg.dual_steps;
    let every = (steps / 10).max(1);
    let (model, log) = dualtrain::dual_train(
        model,
        &x,
        &y,
        &mono_x,
        &mono_y,
        &cfg.dual,
        steps,
        derive_seed(cfg.seed, &format!("{stem}.dual")),
        |m, _| {
            metrics.write_raw(&m.json_lines()).map_err(|e| dualshot::Error::Io(e.to_string()))?;
            if (m.step + 1) % every == 0 {
                let d = &m.directions;
                ws.progress(format!(
                    "train-dual {name}: step {}/{steps} R {}={:.3} {}={:.3}",
                    m.step + 1,
                    d[0].direction,
                    d[0].mean_total,
                    d[1].direction,
                    d[1].mean_total
                ));
            }
            Ok(())
        },
    )?;
    for r in &log.rewards {
        rewards.write(r)?;
    }
    if (lm_x.checksum(), lm_y.checksum()) != lm_sums {
        return Err(CliError::Numeric("language model changed during dual training".into()));
    }
    save_model(ws, &stem, &model)?;
    ws.progress(format!("train-dual {name}: {steps} steps ({:.0?})", start.elapsed()));
    Ok(model)
}

/// Reads the multi-way test set written by `gen-data`.
pub fn load_test(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Corpus, CliError> {
    let roles = Roles::from_config(cfg)?;
    let sides = roles.all.iter().map(|l| load_side(ws, "test", l)).collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus { kind: CorpusKind::MultiWay, languages: roles.all.clone(), sides })
}

/// Word inventories recovered from the training text of each language.
pub fn inventories(cfg: &ExperimentConfig, ws: &Workspace) -> Result<LanguageInventory, CliError> {
    let roles = Roles::from_config(cfg)?;
    let mut words: BTreeMap<String, HashSet<String>> = BTreeMap::new();
    for (role, a, b) in roles.supervised_files() {
        for lang in [&a, &b] {
            let set = words.entry(lang.clone()).or_default();
            for line in load_side(ws, &role, lang)? {
                set.extend(line.split_whitespace().map(str::to_string));
            }
        }
    }
    let mut inv = LanguageInventory::new();
    for (lang, set) in words {
        inv.insert(&lang, set);
    }
    Ok(inv)
}

/// Evaluates the named regimes on the test set and writes `matrix.csv` and
/// `matrix.txt`.
pub fn evaluate(cfg: &ExperimentConfig, ws: &Workspace, regimes: &[&str]) -> Result<EvalMatrix, CliError> {
    let (table, vocab) = load_tokenizer(ws)?;
    let test = load_test(cfg, ws)?;
    let inv = inventories(cfg, ws)?;
    let models: Vec<(String, Translator)> = regimes
        .iter()
        .map(|r| Ok((r.to_string(), load_model(ws, &vocab, &model_stem(r))?)))
        .collect::<Result<_, CliError>>()?;
    let refs: Vec<(&str, &Translator)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let start = Instant::now();
    let matrix = eval_matrix(&refs, &vocab, &table, &test, Some(&inv))?;
    write_file(&ws.root.join("matrix.csv"), &matrix.to_csv())?;
    write_file(&ws.root.join("matrix.txt"), &matrix.to_table())?;
    write_file(&ws.root.join("purity.csv"), &purity_csv(&matrix))?;
    ws.progress(format!("evaluate: {} entries ({:.0?})", matrix.entries.len(), start.elapsed()));
    Ok(matrix)
}

fn purity_csv(m: &EvalMatrix) -> String {
    let mut s = String::from("direction,model,target_fraction\n");
    for e in &m.entries {
        if let Some(p) = e.purity {
            s.push_str(&format!("{},{},{p:.4}\n", e.direction(), e.model));
        }
    }
    s
}

#[derive(Serialize)]
struct Manifest {
    version: &'static str,
    config: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    files: BTreeMap<String, String>,
}

fn collect_files(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, root, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = p.strip_prefix(root).unwrap_or(&p).display().to_string();
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

/// Writes `manifest.json`: config, derived seeds and SHA-256 of every artifact.
pub fn write_manifest(cfg: &ExperimentConfig, ws: &Workspace) -> Result<(), CliError> {
    let components = ["nmt.init", "nmt.batches", "nmt-s.batches", "nmt-f.batches", "dual-0.dual", "dual-s.dual"];
    let roles = Roles::from_config(cfg)?;
    let mut seeds: BTreeMap<String, u64> = components.iter().map(|c| (c.to_string(), derive_seed(cfg.seed, c))).collect();
    for l in [&roles.x, &roles.y] {
        let c = format!("lm.{l}");
        seeds.insert(c.clone(), derive_seed(cfg.seed, &c));
    }
    seeds.insert("data".into(), cfg.seed);
    let mut files = BTreeMap::new();
    collect_files(&ws.root, &ws.root, &mut files)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.values().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        seeds,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&ws.root.join("manifest.json"), &(text + "\n"))
}

/// The whole pipeline: data, tokenizer, language models, every requested
/// regime, evaluation and manifest.
pub fn run_experiment(cfg: &ExperimentConfig, ws: &Workspace) -> Result<EvalMatrix, CliError> {
    let start = Instant::now();
    ws.ensure_dirs()?;
    write_file(&ws.root.join("config.txt"), &cfg.to_text())?;
    let roles = Roles::from_config(cfg)?;
    gen_data(cfg, ws)?;
    learn_bpe(cfg, ws)?;
    train_nmt(cfg, ws)?;
    let mut trained = vec!["NMT-0"];
    if cfg.wants("Dual-0") || cfg.wants("Dual-S") {
        train_lm(cfg, ws, &roles.x)?;
        train_lm(cfg, ws, &roles.y)?;
    }
    if cfg.wants("Dual-0") {
        train_dual(cfg, ws, "NMT-0", "Dual-0")?;
        trained.push("Dual-0");
    }
    if cfg.wants("NMT-S") || cfg.wants("Dual-S") {
        resume(cfg, ws, "NMT-0", ResumeCorpus::Small, "NMT-S")?;
        trained.push("NMT-S");
    }
    if cfg.wants("Dual-S") {
        train_dual(cfg, ws, "NMT-S", "Dual-S")?;
        trained.push("Dual-S");
    }
    if cfg.wants("NMT-F") {
        resume(cfg, ws, "NMT-0", ResumeCorpus::Full, "NMT-F")?;
        trained.push("NMT-F");
    }
    let evaluated: Vec<&str> = trained.into_iter().filter(|r| cfg.wants(r)).collect();
    let matrix = evaluate(cfg, ws, &evaluated)?;
    write_manifest(cfg, ws)?;
    ws.progress(format!("run-experiment: done ({:.0?})", start.elapsed()));
    Ok(matrix)
}
