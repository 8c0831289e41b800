//! Corpus files, checkpoints, the synthetic segmentation task and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{build_lattice, read_lattices, CharSeq, Tokenization, WordLattice};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParameterStore;
use crate::training::{Hyperparams, RmspropState};
use crate::vocab::{Vocab, EOS};

/// Corpus token accuracy: tokens equal at equal positions (up to the shorter
/// length), divided by the total number of reference tokens.
pub fn token_accuracy<T, H, R>(hyps: &[H], refs: &[R]) -> f64
where
    T: PartialEq,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    let mut hits = 0usize;
    let mut total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        total += r.len();
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return 1.0;
    }
    hits as f64 / total as f64
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Whitespace-tokenized lines.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_text(path)?
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn evaluate_accuracy(hyp_path: &Path, ref_path: &Path) -> Result<f64> {
    let hyps = read_token_lines(hyp_path)?;
    let refs = read_token_lines(ref_path)?;
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            hyp_lines: hyps.len(),
            ref_lines: refs.len(),
        });
    }
    Ok(token_accuracy(&hyps, &refs))
}

fn data_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Data {
        file: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Merges parallel segmentation files line by line. Characters come from the
/// first file; every file must concatenate to the same string on each line.
pub fn lattices_from_segmentations(paths: &[PathBuf]) -> Result<Vec<WordLattice>> {
    let first = paths.first().ok_or(Error::EmptyInput("segmentation files"))?;
    let files = paths.iter().map(|p| read_token_lines(p)).collect::<Result<Vec<_>>>()?;
    for (p, f) in paths.iter().zip(&files).skip(1) {
        if f.len() != files[0].len() {
            return Err(data_err(
                p,
                f.len().min(files[0].len()) + 1,
                format!("{} lines, but {} has {}", f.len(), first.display(), files[0].len()),
            ));
        }
    }
    let mut out = Vec::with_capacity(files[0].len());
    for i in 0..files[0].len() {
        let toks: Vec<Tokenization> = files.iter().map(|f| Tokenization::new(f[i].iter().cloned())).collect();
        let text = toks[0].concat();
        if text.is_empty() {
            return Err(data_err(first, i + 1, "empty sentence"));
        }
        let chars = CharSeq::new(&text)?;
        match build_lattice(&chars, &toks) {
            Ok(l) => out.push(l),
            Err(Error::Mismatch { index }) => {
                return Err(data_err(
                    &paths[index],
                    i + 1,
                    format!("tokens do not concatenate to `{text}`"),
                ))
            }
            Err(e) => return Err(data_err(first, i + 1, e.to_string())),
        }
    }
    Ok(out)
}

pub fn load_lattices(path: &Path) -> Result<Vec<WordLattice>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_lattices(BufReader::new(f)).map_err(|e| match e {
        Error::Parse { line, reason } => data_err(path, line, reason),
        other => other,
    })
}

/// Target ids with a closing EOS.
pub fn encode_target(tokens: &[String], vocab: &Vocab) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    ids.push(EOS);
    ids
}

/// Drops pairs whose source is longer than `max_src_chars` characters or whose
/// target has more than `max_tgt_words` words. Returns the kept pairs and the
/// number dropped.
pub fn filter_by_length(
    lats: Vec<WordLattice>,
    targets: Vec<Vec<String>>,
    max_src_chars: usize,
    max_tgt_words: usize,
) -> (Vec<WordLattice>, Vec<Vec<String>>, usize) {
    let mut kept_l = Vec::new();
    let mut kept_t = Vec::new();
    let mut dropped = 0;
    for (l, t) in lats.into_iter().zip(targets) {
        if l.len() <= max_src_chars && t.len() <= max_tgt_words {
            kept_l.push(l);
            kept_t.push(t);
        } else {
            dropped += 1;
        }
    }
    (kept_l, kept_t, dropped)
}

/// Every edge surface, in lattice and edge order.
pub fn edge_surfaces(lats: &[WordLattice]) -> impl Iterator<Item = &str> {
    lats.iter().flat_map(|l| l.edges().iter().map(|e| e.surface.as_str()))
}

const MAGIC: &[u8; 8] = b"LATNMTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hyper: BTreeMap<String, String>,
    pub tensors: ParameterStore,
    pub optimizer: Option<RmspropState>,
    pub src_fingerprint: [u8; 32],
    pub tgt_fingerprint: [u8; 32],
}

impl Checkpoint {
    pub fn from_model(
        model: &ModelParams,
        hp: &Hyperparams,
        src: &Vocab,
        tgt: &Vocab,
        optimizer: Option<&RmspropState>,
    ) -> Self {
        let c = model.config;
        let mut hyper: BTreeMap<String, String> = hp.to_pairs().into_iter().collect();
        hyper.insert("cell".into(), c.cell.to_string());
        hyper.insert("compose".into(), c.compose.to_string());
        hyper.insert("embed_dim".into(), c.embed_dim.to_string());
        hyper.insert("hidden".into(), c.hidden.to_string());
        hyper.insert("src_vocab".into(), c.src_vocab.to_string());
        hyper.insert("tgt_vocab".into(), c.tgt_vocab.to_string());
        Checkpoint {
            hyper,
            tensors: ParameterStore::from_params(model),
            optimizer: optimizer.cloned(),
            src_fingerprint: src.fingerprint(),
            tgt_fingerprint: tgt.fingerprint(),
        }
    }

    fn hyper_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .hyper
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint has no `{key}` setting")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint setting `{key}` has bad value `{raw}`")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            src_vocab: self.hyper_value("src_vocab")?,
            tgt_vocab: self.hyper_value("tgt_vocab")?,
            embed_dim: self.hyper_value("embed_dim")?,
            hidden: self.hyper_value("hidden")?,
            cell: self.hyper.get("cell").map_or(Ok(crate::CellKind::Gru), |s| s.parse())?,
            compose: self.hyper.get("compose").map_or(Ok(crate::ComposeMode::Pool), |s| s.parse())?,
        })
    }

    pub fn model(&self) -> Result<ModelParams> {
        let mut m = ModelParams::zeros(self.model_config()?);
        self.tensors.load_into(&mut m)?;
        Ok(m)
    }

    pub fn check_vocabs(&self, src: &Vocab, tgt: &Vocab) -> Result<()> {
        if src.fingerprint() != self.src_fingerprint {
            return Err(Error::Fingerprint { which: "source" });
        }
        if tgt.fingerprint() != self.tgt_fingerprint {
            return Err(Error::Fingerprint { which: "target" });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.hyper {
            text.push_str(&format!("{k}={v}\n"));
        }
        put_bytes(&mut out, text.as_bytes());
        out.extend_from_slice(&self.src_fingerprint);
        out.extend_from_slice(&self.tgt_fingerprint);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in self.tensors.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                out.extend_from_slice(&(st.names.len() as u32).to_le_bytes());
                for i in 0..st.names.len() {
                    put_bytes(&mut out, st.names[i].as_bytes());
                    out.extend_from_slice(&(st.n[i].len() as u64).to_le_bytes());
                    for v in st.n[i].iter().chain(&st.m[i]) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.error_at(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let text_at = r.pos;
        let text = r.string()?;
        let mut hyper = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.error_at(text_at, format!("bad setting line `{line}`")))?;
            hyper.insert(k.to_string(), v.to_string());
        }
        let src_fingerprint = r.fingerprint()?;
        let tgt_fingerprint = r.fingerprint()?;
        let count = r.u32()?;
        let mut tensors = ParameterStore::new();
        for _ in 0..count {
            let at = r.pos;
            let name = r.string()?;
            let rank = r.u32()?;
            if rank != 2 {
                return Err(r.error_at(at, format!("tensor `{name}` has rank {rank}, expected 2")));
            }
            let rows = r.len_u64()?;
            let cols = r.len_u64()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| r.error_at(at, "tensor size overflows"))?;
            let data = r.f64s(n)?;
            let m = crate::numerics::Matrix::from_vec(rows, cols, data).map_err(|e| r.error_at(at, e.to_string()))?;
            if tensors.insert(name.clone(), m).is_some() {
                return Err(r.error_at(at, format!("duplicate tensor `{name}`")));
            }
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let slots = r.u32()?;
                let mut st = RmspropState {
                    names: Vec::new(),
                    n: Vec::new(),
                    m: Vec::new(),
                    step,
                };
                for _ in 0..slots {
                    st.names.push(r.string()?);
                    let len = r.len_u64()?;
                    st.n.push(r.f64s(len)?);
                    st.m.push(r.f64s(len)?);
                }
                Some(st)
            }
            flag => return Err(r.error_at(r.pos - 1, format!("bad optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            hyper,
            tensors,
            optimizer,
            src_fingerprint,
            tgt_fingerprint,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn error_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error_at(self.buf.len(), format!("unexpected end of file, {n} more bytes expected at {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.error_at(at, "length does not fit in memory"))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error_at(at, "string is not UTF-8"))
    }

    fn fingerprint(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.error_at(self.pos, "length overflows"))?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and refuses it unless it was trained with these vocabularies.
pub fn load_checkpoint_for(path: &Path, src: &Vocab, tgt: &Vocab) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_vocabs(src, tgt)?;
    Ok(ckpt)
}

/// Synthetic translation task with ambiguous segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSpec {
    pub alphabet_size: usize,
    pub words: usize,
    pub sentences: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            alphabet_size: 40,
            words: 60,
            sentences: 2000,
            noise: 0.3,
            seed: 11,
        }
    }
}

pub const SEGMENTERS: usize = 3;
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct ToySplit {
    pub name: &'static str,
    pub src: Vec<String>,
    /// Segmenter 0 is the oracle; 1 and 2 are noisy copies.
    pub segs: [Vec<Vec<String>>; SEGMENTERS],
    pub tgt: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    /// `(source word, target word)`
    pub inventory: Vec<(String, String)>,
    pub splits: [ToySplit; 3],
}

fn alphabet(n: usize) -> Vec<char> {
    (0..n as u32).map(|i| char::from_u32(0x4E00 + i).expect("CJK block")).collect()
}

fn is_proper_affix(short: &str, long: &str) -> bool {
    short.len() < long.len() && (long.starts_with(short) || long.ends_with(short))
}

/// Source words of two or three characters. No word is a proper prefix or
/// suffix of another except in one planted quadruple, `abc de` / `ab cde`,
/// which makes the string `abcde` segmentable two ways with different targets.
fn build_inventory(spec: &ToyTaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    if spec.alphabet_size < 5 {
        return Err(Error::Spec(format!("alphabet needs at least 5 characters, got {}", spec.alphabet_size)));
    }
    if spec.words < 4 {
        return Err(Error::Spec(format!("inventory needs at least 4 words, got {}", spec.words)));
    }
    let abc = alphabet(spec.alphabet_size);
    let s = |idx: &[usize]| idx.iter().map(|&i| abc[i]).collect::<String>();
    let mut words = vec![s(&[0, 1, 2]), s(&[3, 4]), s(&[0, 1]), s(&[2, 3, 4])];
    let mut attempts = 0;
    while words.len() < spec.words {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Spec(format!(
                "cannot draw {} distinct words from {} characters",
                spec.words, spec.alphabet_size
            )));
        }
        let len = rng.gen_range(2..=3);
        let w: String = (0..len).map(|_| abc[rng.gen_range(0..abc.len())]).collect();
        if words.iter().any(|o| *o == w || is_proper_affix(o, &w) || is_proper_affix(&w, o)) {
            continue;
        }
        words.push(w);
    }
    Ok(words)
}

/// All segmentations of `text` into inventory words, as word-index sequences.
fn segmentations(text: &[char], words: &[Vec<char>]) -> Vec<Vec<usize>> {
    if text.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if text.starts_with(w) {
            for mut rest in segmentations(&text[w.len()..], words) {
                rest.insert(0, i);
                out.push(rest);
            }
        }
    }
    out
}

/// Brute force over all two-word strings: true if some string splits into
/// inventory words in two ways with different translations.
fn inventory_is_ambiguous(words: &[String]) -> bool {
    let chars: Vec<Vec<char>> = words.iter().map(|w| w.chars().collect()).collect();
    for a in &chars {
        for b in &chars {
            let text: Vec<char> = a.iter().chain(b).copied().collect();
            if segmentations(&text, &chars).len() >= 2 {
                return true;
            }
        }
    }
    false
}

/// Word boundary offsets `0 < b < len` of a tokenization.
fn boundaries(tokens: &[&str]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    for t in &tokens[..tokens.len() - 1] {
        pos += t.chars().count();
        out.push(pos);
    }
    out
}

fn split_at_boundaries(text: &[char], cuts: &std::collections::BTreeSet<usize>) -> Vec<String> {
    let mut out = Vec::new();
    let mut prev = 0;
    for &c in cuts.iter().chain(std::iter::once(&text.len())) {
        out.push(text[prev..c].iter().collect());
        prev = c;
    }
    out
}

/// Noisy segmenter: every oracle boundary is independently perturbed with
/// probability `noise`, either merged away or joined by an extra split at a
/// random interior position of one of its two neighbouring words.
fn corrupt(oracle: &[&str], noise: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let text: Vec<char> = oracle.iter().flat_map(|w| w.chars()).collect();
    let inner = boundaries(oracle);
    let mut starts = vec![0];
    starts.extend(&inner);
    starts.push(text.len());
    let mut cuts: std::collections::BTreeSet<usize> = inner.iter().copied().collect();
    for (i, &b) in inner.iter().enumerate() {
        if !rng.gen_bool(noise) {
            continue;
        }
        if rng.gen_bool(0.5) {
            cuts.remove(&b);
        } else {
            // Word i ends at b, word i+1 starts at b.
            let (lo, hi) = if rng.gen_bool(0.5) {
                (starts[i], starts[i + 1])
            } else {
                (starts[i + 1], starts[i + 2])
            };
            cuts.insert(rng.gen_range(lo + 1..hi));
        }
    }
    split_at_boundaries(&text, &cuts)
}

pub fn generate_toy(spec: &ToyTaskSpec) -> Result<ToyCorpus> {
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::Spec(format!("noise must lie in [0, 1], got {}", spec.noise)));
    }
    if spec.sentences < 10 {
        return Err(Error::Spec(format!("need at least 10 sentences, got {}", spec.sentences)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = build_inventory(spec, &mut rng)?;
    if !inventory_is_ambiguous(&words) {
        return Err(Error::Spec("inventory has no ambiguous segmentation".into()));
    }
    let inventory: Vec<(String, String)> = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), format!("en{i}")))
        .collect();

    let n_train = spec.sentences * 8 / 10;
    let n_valid = spec.sentences / 10;
    let mut splits = SPLITS.map(|name| ToySplit {
        name,
        src: Vec::new(),
        segs: [Vec::new(), Vec::new(), Vec::new()],
        tgt: Vec::new(),
    });
    for s in 0..spec.sentences {
        let len = rng.gen_range(3..=7);
        let picks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..inventory.len())).collect();
        let oracle: Vec<&str> = picks.iter().map(|&i| inventory[i].0.as_str()).collect();
        let split = if s < n_train {
            0
        } else if s < n_train + n_valid {
            1
        } else {
            2
        };
        let sp = &mut splits[split];
        sp.src.push(oracle.concat());
        sp.segs[0].push(oracle.iter().map(|w| w.to_string()).collect());
        for k in 1..SEGMENTERS {
            sp.segs[k].push(corrupt(&oracle, spec.noise, &mut rng));
        }
        sp.tgt.push(picks.iter().map(|&i| inventory[i].1.clone()).collect());
    }
    Ok(ToyCorpus { inventory, splits })
}

fn join_lines<S: AsRef<str>>(lines: impl IntoIterator<Item = S>) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    out
}

/// Writes `{split}.src`, `{split}.seg{k}`, `{split}.tgt` and `inventory.tsv`.
pub fn write_toy(corpus: &ToyCorpus, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    files.push((
        out_dir.join("inventory.tsv"),
        join_lines(corpus.inventory.iter().map(|(s, t)| format!("{s}\t{t}"))),
    ));
    for sp in &corpus.splits {
        files.push((out_dir.join(format!("{}.src", sp.name)), join_lines(&sp.src)));
        for (k, seg) in sp.segs.iter().enumerate() {
            files.push((
                out_dir.join(format!("{}.seg{k}", sp.name)),
                join_lines(seg.iter().map(|t| t.join(" "))),
            ));
        }
        files.push((
            out_dir.join(format!("{}.tgt", sp.name)),
            join_lines(sp.tgt.iter().map(|t| t.join(" "))),
        ));
    }
    let mut written = Vec::new();
    for (path, text) in files {
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn gen_toy(spec: &ToyTaskSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    write_toy(&generate_toy(spec)?, out_dir)
}
