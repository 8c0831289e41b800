use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use lattice_nmt::corpus::{
    edge_surfaces, evaluate_accuracy, filter_by_length, gen_toy, lattices_from_segmentations, load_checkpoint_for,
    load_lattices, read_token_lines, save_checkpoint, encode_target, Checkpoint, ToyTaskSpec,
};
use lattice_nmt::training::{grad_check, train, Example, Hyperparams, TrainOptions};
use lattice_nmt::{build_vocab, write_lattices, CellKind, ComposeMode, Error, ModelConfig, ModelParams, Vocab, WordLattice};

const GRAD_TOLERANCE: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "latnmt", version, about = "Word-lattice neural machine translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge parallel segmentation files into one lattice per line.
    BuildLattice {
        /// Comma-separated segmentation files; characters come from the first.
        #[arg(long, value_delimiter = ',', required = true)]
        segs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a frequency-ranked vocabulary.
    #[command(group(ArgGroup::new("source").required(true).args(["input", "lattices"])))]
    BuildVocab {
        /// Whitespace-tokenized text.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Lattice file; every edge surface counts once per occurrence.
        #[arg(long)]
        lattices: Option<PathBuf>,
        #[arg(long, default_value_t = 50_000)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic ambiguous-segmentation task.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        sentences: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        alphabet: usize,
        #[arg(long, default_value_t = 60)]
        words: usize,
    },
    /// Train a model and keep the checkpoint with the best validation accuracy.
    Train(TrainArgs),
    /// Translate lattices with a trained checkpoint.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lattices: PathBuf,
        #[arg(long)]
        src_vocab: PathBuf,
        #[arg(long)]
        tgt_vocab: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 50)]
        max_len: usize,
        /// Rank finished beam hypotheses by score per token.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        length_norm: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic cell gradients with central differences.
    GradCheck {
        #[arg(long, value_parser = parse_cell, default_value = "dwl")]
        cell: CellKind,
        #[arg(long, value_parser = parse_compose, default_value = "gate")]
        compose: ComposeMode,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run every cell, composition, K in 1..=3 and seeds 0..10 instead.
        #[arg(long)]
        grid: bool,
    },
    /// Token accuracy of a hypothesis file against a reference file.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    lattices: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    /// Validation pairs; without them the last tenth of the training data is held out.
    #[arg(long, requires = "valid_targets")]
    valid_lattices: Option<PathBuf>,
    #[arg(long, requires = "valid_lattices")]
    valid_targets: Option<PathBuf>,
    #[arg(long, value_parser = parse_cell, default_value = "dwl")]
    cell: CellKind,
    #[arg(long, value_parser = parse_compose, default_value = "gate")]
    compose: ComposeMode,
    #[arg(long, default_value_t = 320)]
    embed_dim: usize,
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 80)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.99)]
    rho: f64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 70)]
    max_src_chars: usize,
    #[arg(long, default_value_t = 50)]
    max_tgt_words: usize,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Best checkpoint. The final state with optimizer accumulators goes to `<out>.last`.
    #[arg(long)]
    out: PathBuf,
    /// Also write the epoch log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_cell(s: &str) -> Result<CellKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_compose(s: &str) -> Result<ComposeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Data(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Spec(_) => Failure::Usage(msg),
            Error::Dimension { .. } | Error::State(_) | Error::EmptyInput(_) => Failure::Internal(msg),
            _ => Failure::Data(msg),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::BuildLattice { segs, out } => build_lattice_cmd(&segs, &out),
        Command::BuildVocab {
            input,
            lattices,
            size,
            out,
        } => build_vocab_cmd(input.as_deref(), lattices.as_deref(), size, &out),
        Command::GenToy {
            out,
            sentences,
            noise,
            seed,
            alphabet,
            words,
        } => gen_toy_cmd(
            &out,
            ToyTaskSpec {
                alphabet_size: alphabet,
                words,
                sentences,
                noise,
                seed,
            },
        ),
        Command::Train(args) => train_cmd(&args),
        Command::Decode {
            model,
            lattices,
            src_vocab,
            tgt_vocab,
            beam,
            max_len,
            length_norm,
            out,
        } => decode_cmd(&model, &lattices, &src_vocab, &tgt_vocab, beam, max_len, length_norm, &out),
        Command::GradCheck {
            cell,
            compose,
            dim,
            k,
            seed,
            grid,
        } => grad_check_cmd(cell, compose, dim, k, seed, grid),
        Command::Eval { hyp, reference } => {
            evaluate_accuracy(&hyp, &reference).map(|acc| println!("{acc:.6}")).map_err(Failure::from)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn build_lattice_cmd(segs: &[PathBuf], out: &Path) -> CliResult {
    let lats = lattices_from_segmentations(segs)?;
    let mut buf = Vec::new();
    write_lattices(&lats, &mut buf)?;
    write_file(out, &buf)?;
    eprintln!("wrote {} lattices to {}", lats.len(), out.display());
    Ok(())
}

fn build_vocab_cmd(input: Option<&Path>, lattices: Option<&Path>, size: usize, out: &Path) -> CliResult {
    let vocab = match (input, lattices) {
        (Some(p), _) => build_vocab(read_token_lines(p)?.iter().flatten(), size)?,
        (None, Some(p)) => build_vocab(edge_surfaces(&load_lattices(p)?), size)?,
        (None, None) => return Err(Failure::Usage("one of --input or --lattices is required".into())),
    };
    vocab.save(out)?;
    eprintln!("wrote {} tokens to {}", vocab.len(), out.display());
    Ok(())
}

fn gen_toy_cmd(out: &Path, spec: ToyTaskSpec) -> CliResult {
    let files = gen_toy(&spec, out)?;
    eprintln!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

/// Line number of each `LATTICE` header, for diagnostics.
fn lattice_lines(path: &Path) -> Vec<usize> {
    fs::read_to_string(path)
        .map(|t| {
            t.lines()
                .enumerate()
                .filter(|(_, l)| l.starts_with("LATTICE"))
                .map(|(i, _)| i + 1)
                .collect()
        })
        .unwrap_or_default()
}

fn load_pairs(lat_path: &Path, tgt_path: &Path) -> Result<(Vec<WordLattice>, Vec<Vec<String>>), Failure> {
    let lats = load_lattices(lat_path)?;
    let tgts = read_token_lines(tgt_path)?;
    if lats.len() != tgts.len() {
        return Err(Failure::Data(format!(
            "{} has {} lattices but {} has {} target lines",
            lat_path.display(),
            lats.len(),
            tgt_path.display(),
            tgts.len()
        )));
    }
    if let Some(i) = tgts.iter().position(Vec::is_empty) {
        return Err(Error::Data {
            file: tgt_path.display().to_string(),
            line: i + 1,
            reason: "empty target sentence".into(),
        }
        .into());
    }
    Ok((lats, tgts))
}

fn check_topology(lats: &[WordLattice], cell: CellKind, path: &Path) -> CliResult {
    if cell != CellKind::Gru {
        return Ok(());
    }
    if let Some(i) = lats.iter().position(|l| !l.is_chain()) {
        let line = lattice_lines(path).get(i).copied().unwrap_or(0);
        return Err(Error::Data {
            file: path.display().to_string(),
            line,
            reason: "the gru cell needs single-path lattices".into(),
        }
        .into());
    }
    Ok(())
}

fn to_examples(lats: &[WordLattice], tgts: &[Vec<String>], src: &Vocab, tgt: &Vocab) -> Result<Vec<Example>, Failure> {
    lats.iter()
        .zip(tgts)
        .map(|(l, t)| Example::new(l, encode_target(t, tgt), src).map_err(Failure::from))
        .collect()
}

fn train_cmd(a: &TrainArgs) -> CliResult {
    let hp = Hyperparams {
        embed_dim: a.embed_dim,
        hidden: a.hidden,
        lr: a.lr,
        batch: a.batch,
        clip: a.clip,
        rmsprop_rho: a.rho,
        rmsprop_eps: a.eps,
        rmsprop_momentum: 0.0,
        max_src_chars: a.max_src_chars,
        max_tgt_words: a.max_tgt_words,
        patience_epochs: a.patience,
    };
    hp.validate()?;
    let src = Vocab::load(&a.src_vocab)?;
    let tgt = Vocab::load(&a.tgt_vocab)?;

    let (lats, tgts) = load_pairs(&a.lattices, &a.targets)?;
    check_topology(&lats, a.cell, &a.lattices)?;
    let total = lats.len();
    let (mut lats, mut tgts, dropped) = filter_by_length(lats, tgts, hp.max_src_chars, hp.max_tgt_words);
    eprintln!("training pairs: {} kept, {dropped} dropped by length", total - dropped);

    let (valid_lats, valid_tgts) = match (&a.valid_lattices, &a.valid_targets) {
        (Some(vl), Some(vt)) => {
            let (l, t) = load_pairs(vl, vt)?;
            check_topology(&l, a.cell, vl)?;
            let (l, t, d) = filter_by_length(l, t, hp.max_src_chars, hp.max_tgt_words);
            eprintln!("validation pairs: {} kept, {d} dropped by length", l.len());
            (l, t)
        }
        _ => {
            if lats.len() < 2 {
                return Err(Failure::Data("need at least two training pairs to hold out validation data".into()));
            }
            let hold = (lats.len() / 10).max(1);
            let at = lats.len() - hold;
            eprintln!("holding out the last {hold} training pairs for validation");
            (lats.split_off(at), tgts.split_off(at))
        }
    };
    let train_set = to_examples(&lats, &tgts, &src, &tgt)?;
    let valid_set = to_examples(&valid_lats, &valid_tgts, &src, &tgt)?;

    let config = ModelConfig {
        src_vocab: src.len(),
        tgt_vocab: tgt.len(),
        embed_dim: hp.embed_dim,
        hidden: hp.hidden,
        cell: a.cell,
        compose: a.compose,
    };
    let opts = TrainOptions {
        hp: hp.clone(),
        seed: a.seed,
        max_epochs: a.max_epochs,
        max_updates: a.max_updates,
    };
    let mut log_file = match &a.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Failure::from(Error::io(p, e)))?),
        None => None,
    };
    let mut log_err = None;
    let report = train(ModelParams::init(config, a.seed), &train_set, &valid_set, &opts, |line| {
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (log_err, &a.log) {
        return Err(Error::io(p, e).into());
    }

    save_checkpoint(&a.out, &Checkpoint::from_model(&report.best, &hp, &src, &tgt, None))?;
    let mut last = a.out.clone().into_os_string();
    last.push(".last");
    save_checkpoint(
        Path::new(&last),
        &Checkpoint::from_model(&report.last, &hp, &src, &tgt, Some(&report.optimizer)),
    )?;
    eprintln!(
        "best val_acc {:.6} at epoch {} after {} updates; saved {}",
        report.best_val_acc,
        report.best_epoch,
        report.updates,
        a.out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn decode_cmd(
    model: &Path,
    lattices: &Path,
    src_vocab: &Path,
    tgt_vocab: &Path,
    beam: usize,
    max_len: usize,
    length_norm: bool,
    out: &Path,
) -> CliResult {
    if beam == 0 || max_len == 0 {
        return Err(Failure::Usage("--beam and --max-len must be at least 1".into()));
    }
    let src = Vocab::load(src_vocab)?;
    let tgt = Vocab::load(tgt_vocab)?;
    let params = load_checkpoint_for(model, &src, &tgt)?.model()?;
    let lats = load_lattices(lattices)?;
    check_topology(&lats, params.config.cell, lattices)?;
    let mut text = String::new();
    for lat in &lats {
        let ids = params.translate(lat, &src, beam, max_len, length_norm)?;
        let words: Vec<&str> = ids.iter().map(|&i| tgt.token(i)).collect();
        text.push_str(&words.join(" "));
        text.push('\n');
    }
    write_file(out, text.as_bytes())?;
    eprintln!("translated {} sentences into {}", lats.len(), out.display());
    Ok(())
}

fn grad_check_cmd(cell: CellKind, compose: ComposeMode, dim: usize, k: usize, seed: u64, grid: bool) -> CliResult {
    let mut runs = Vec::new();
    if grid {
        for c in [CellKind::Gru, CellKind::Swl, CellKind::Dwl] {
            for m in [ComposeMode::Pool, ComposeMode::Gate] {
                for k in 1..=3 {
                    for s in 0..10 {
                        runs.push((c, m, k, s));
                    }
                }
            }
        }
    } else {
        runs.push((cell, compose, k, seed));
    }
    let mut worst: f64 = 0.0;
    for (c, m, k, s) in runs {
        let err = grad_check(c, m, dim, k, s)?;
        if grid {
            println!("{c} {m} k={k} seed={s} {err:e}");
        }
        worst = worst.max(err);
    }
    println!("max relative error {worst:e}");
    if worst <= GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Internal(format!(
            "gradient check failed: {worst:e} exceeds {GRAD_TOLERANCE:e}"
        )))
    }
}
