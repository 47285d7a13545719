use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moevc::config::RunConfig;
use moevc::eval::{convert, dense_forward, inference_mode, Engine};
use moevc::features::{
    f0_convert, gen_synthetic_corpus, read_f0_stats, read_feature_file, write_f0_stats,
    write_feature_file, Corpus, F0Stats, Split, SyntheticSpec,
};
use moevc::gradcheck::{full_suite, tiny_arch, GradCheckOptions};
use moevc::metrics::aggregate_sweep;
use moevc::model::Model;
use moevc::rng::{stream, stream_rng};
use moevc::sparse::{frr, FRR_CSV_HEADER};
use moevc::sweep::run_sweep;
use moevc::train::{Trainer, EPOCH_CSV_HEADER};
use moevc::{Error, ErrorClass, Result, Tensor};
use rand_distr::{Distribution, StandardNormal};

#[derive(Parser)]
#[command(
    name = "moevc",
    version,
    about = "Sparse-gated mixture-of-experts voice conversion"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic multi-speaker corpus.
    GenCorpus(GenCorpus),
    /// Train a model on a corpus.
    Train(Train),
    /// Convert one feature file to another speaker.
    Convert(Convert),
    /// Report dense and gated FLOP counts for a model.
    Flops(Flops),
    /// Train and evaluate one model per (beta, seed).
    Sweep(Sweep),
    /// Finite-difference check of every objective on a tiny 64-bit model.
    Gradcheck(Gradcheck),
    /// Compute log-F0 statistics over the voiced frames of feature files.
    F0Stats(F0StatsCmd),
}

#[derive(Args)]
struct GenCorpus {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    #[arg(long, default_value_t = 20)]
    utts: usize,
    #[arg(long, default_value_t = 256)]
    frames: usize,
    #[arg(long, default_value_t = 36)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    /// Continue from the parameters already stored at --out-model.
    #[arg(long)]
    resume: bool,
    /// Per-epoch loss CSV; defaults to `<out-model>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Convert {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    source_speaker: String,
    #[arg(long)]
    target_speaker: String,
    #[arg(long)]
    out: PathBuf,
    /// Run the full gated network instead of the skip plan.
    #[arg(long)]
    dense: bool,
    /// Source and target log-F0 statistics files.
    #[arg(long, num_args = 2, value_names = ["SRC", "TGT"])]
    f0_stats: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct Flops {
    #[arg(long)]
    model: PathBuf,
    /// Probe length for the synthetic probe; ignored with --input.
    #[arg(long, default_value_t = 256)]
    frames: usize,
    /// Feature file whose gates to analyze instead of a synthetic probe.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    source_speaker: Option<String>,
    #[arg(long)]
    target_speaker: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// Architecture to check instead of the built-in tiny one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one analytic gradient entry; the check must then fail.
    #[arg(long, hide = true)]
    tamper: bool,
}

#[derive(Args)]
struct F0StatsCmd {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.with_env_seed()
}

fn gen_corpus(a: GenCorpus) -> Result<()> {
    let spec = SyntheticSpec {
        speakers: a.speakers,
        utterances: a.utts,
        frames: a.frames,
        dim: a.dim,
        seed: a.seed,
    };
    let manifest = gen_synthetic_corpus(&spec, &a.out)?;
    let eval = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Eval)
        .count();
    println!(
        "wrote {} files for {} speakers ({} train, {eval} eval) to {}",
        manifest.entries.len(),
        manifest.speakers().len(),
        manifest.entries.len() - eval,
        a.out.display()
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let corpus = Corpus::load(&a.corpus)?;
    let start = if a.resume {
        Some(Model::<f32>::load(&a.out_model)?)
    } else {
        None
    };
    let mut trainer = Trainer::new(&corpus, cfg, start)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out_model.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let mut log = fs::File::create(&log_path)?;
    writeln!(log, "{EPOCH_CSV_HEADER}")?;
    let mut io: Result<()> = Ok(());
    let res = trainer.run(Some(&a.out_model), |l| {
        let row = l.to_csv_row();
        eprintln!(
            "epoch {} total {:.4} recon_mse {:.4} zero_gate_frac {:.4}",
            l.epoch, l.total, l.recon_mse, l.zero_gate_frac
        );
        if io.is_ok() {
            io = writeln!(log, "{row}").map_err(Error::from);
        }
    });
    io?;
    res?;
    trainer.model.save(&a.out_model)?;
    println!(
        "model written to {}; epoch log at {}",
        a.out_model.display(),
        log_path.display()
    );
    Ok(())
}

fn run_convert(a: Convert) -> Result<()> {
    let model = Model::<f32>::load(&a.model)?;
    let seq = read_feature_file(&a.input)?;
    let src = model.speaker_index(&a.source_speaker)?;
    let tgt = model.speaker_index(&a.target_speaker)?;
    let engine = if a.dense {
        Engine::Dense
    } else {
        Engine::Sparse
    };
    let c = convert(&model, &seq, src, tgt, &inference_mode(&model), engine)?;
    let mut out = c.seq;
    if let Some(paths) = &a.f0_stats {
        match seq.f0() {
            Some(f0) => {
                let (s, t) = (read_f0_stats(&paths[0])?, read_f0_stats(&paths[1])?);
                out.set_f0(Some(f0_convert(f0, &s, &t)?))?;
            }
            None => eprintln!("input has no F0 track; --f0-stats ignored"),
        }
    }
    write_feature_file(&out, &a.out)?;
    print!("{}", c.report.describe());
    Ok(())
}

fn flops(a: Flops) -> Result<()> {
    let model = Model::<f32>::load(&a.model)?;
    let pick = |id: &Option<String>| id.as_deref().map_or(Ok(0), |s| model.speaker_index(s));
    let (src, tgt) = (pick(&a.source_speaker)?, pick(&a.target_speaker)?);
    let mode = inference_mode(&model);
    let (id, x) = match &a.input {
        Some(p) => {
            let seq = read_feature_file(p)?;
            let stats = model
                .stats
                .as_ref()
                .ok_or_else(|| Error::Model("model has no standardization stats".into()))?;
            let x = moevc::train::padded_map::<f32>(
                &stats.standardize(&seq)?,
                model.arch.time_factor(),
            );
            (seq.utterance_id, x)
        }
        None => {
            model.arch.check_frames(a.frames)?;
            let mut rng = stream_rng(a.seed, stream::CORPUS);
            let n = model.arch.dim * a.frames;
            let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            (
                "probe".to_string(),
                Tensor::new(vec![1, model.arch.dim, a.frames], data)?,
            )
        }
    };
    let (_, gates, ledger) =
        dense_forward(&model, &x, &model.code(src)?, &model.code(tgt)?, &mode)?;
    let report = frr(&ledger, &gates, &id);
    if a.csv {
        println!("{FRR_CSV_HEADER}");
        println!("{}", report.to_csv_row());
        return Ok(());
    }
    println!("frames {}", x.shape()[2]);
    println!("dense baseline {} FLOPs", ledger.dense_flops());
    println!(
        "{:<10} {:>14} {:>14} {:>9}",
        "layer", "dense", "actual", "skipped"
    );
    for l in &ledger.layers {
        println!(
            "{:<10} {:>14} {:>14} {:>8.2}%",
            l.name,
            2 * l.dense_macs,
            2 * l.actual_macs,
            100.0 * l.reduction()
        );
    }
    println!("gating overhead {} FLOPs", ledger.overhead_flops());
    print!("{}", report.describe());
    Ok(())
}

fn sweep(a: Sweep) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let corpus = Corpus::load(&a.corpus)?;
    let betas = a.betas.unwrap_or_else(|| cfg.sweep.betas.clone());
    let seeds = a.seeds.unwrap_or_else(|| cfg.sweep.seeds.clone());
    let rows = run_sweep(&corpus, &cfg, &betas, &seeds, |r| {
        eprintln!(
            "beta {} seed {}: frr {:.4} mcd_convert {:.4} zero_gate_frac {:.4}",
            r.beta, r.seed, r.mean_frr, r.mean_mcd_convert, r.zero_gate_frac
        )
    })?;
    let report = aggregate_sweep(&rows)?;
    fs::write(&a.out, report.csv())?;
    print!("{}", report.summary());
    Ok(())
}

/// Returns whether every objective passed.
fn gradcheck(a: Gradcheck) -> Result<bool> {
    let arch = match &a.config {
        Some(p) => {
            let mut arch = RunConfig::load(p)?.arch;
            if arch.speakers == 0 {
                arch.speakers = 2;
            }
            arch
        }
        None => tiny_arch(),
    };
    let mut ok = true;
    for case in full_suite(
        &arch,
        a.frames,
        a.seed,
        GradCheckOptions::default(),
        a.tamper,
    )? {
        let r = &case.report;
        let worst = r.worst.as_ref().map_or("none".to_string(), |w| {
            format!(
                "{} (analytic {:e}, numeric {:e})",
                w.path, w.analytic, w.numeric
            )
        });
        println!(
            "{:<12} {} checked {} max rel err {:.3e} worst {worst}",
            case.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.checked,
            r.max_rel_err()
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn f0_stats(a: F0StatsCmd) -> Result<()> {
    let seqs = a
        .input
        .iter()
        .map(|p| read_feature_file(p))
        .collect::<Result<Vec<_>>>()?;
    let tracks = seqs
        .iter()
        .map(|s| {
            s.f0()
                .ok_or_else(|| Error::Format(format!("{} has no F0 track", s.utterance_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = F0Stats::compute(tracks)?;
    write_f0_stats(&stats, &a.out)?;
    print!("{}", stats.to_text());
    Ok(())
}

fn exit_for(err: &Error) -> ExitCode {
    ExitCode::from(match err.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::GenCorpus(a) => gen_corpus(a),
        Cmd::Train(a) => train(a),
        Cmd::Convert(a) => run_convert(a),
        Cmd::Flops(a) => flops(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::F0Stats(a) => f0_stats(a),
        Cmd::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(3);
            }
            Err(e) => Err(e),
        },
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
