use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdap::data::read_conll;
use cdap::episode::{read_episodes, sample_episode, write_episodes};
use cdap::evaluation::{score_episode, EpisodeMetrics, MetricsReport};
use cdap::inference::{decode_episode, decode_sentence, decoded_json_line, predict, span_candidates, DecodedEpisode};
use cdap::training::{train, write_trace_csv};
use cdap::{CdapError, Config, Episode, LabeledSentence, Model, Result, SamplerConfig, ShotMode, Strategy};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cdap", version, about = "Few-shot sequence labeling with dual token/span prototypes")]
#[command(after_help = Config::keys_help())]
struct Cli {
    /// Log per-step training losses.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    ExactK,
    KTo2k,
}

#[derive(Subcommand)]
enum Command {
    /// Sample N-way K-shot episodes from a CoNLL corpus into JSONL.
    SampleEpisodes {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(short = 'N', long = "n-way")]
        n_way: usize,
        #[arg(short = 'K', long = "k-shot")]
        k_shot: usize,
        #[arg(long, value_enum, default_value = "exact-k")]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        query_per_class: usize,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Episode `i` is sampled with seed `seed + i`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on an episode file and write a checkpoint and a loss trace.
    #[command(after_help = Config::keys_help())]
    Train {
        #[arg(long)]
        episodes: PathBuf,
        /// TOML file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with columns step,L_t,L_s,L_c,total,lr.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Overrides `seed` from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode and score every episode of a file.
    Eval {
        #[arg(long)]
        episodes: PathBuf,
        /// Repeat to report the mean and standard deviation over several checkpoints.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Defaults to the checkpoint's `delta`.
        #[arg(long)]
        delta: Option<f64>,
        /// Defaults to the checkpoint's `max_span_len`.
        #[arg(long)]
        max_span_len: Option<usize>,
        #[arg(long, default_value = "consistent-greedy")]
        strategy: Strategy,
        /// Metrics JSON; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Decoded spans of the first checkpoint, one JSON line per query sentence.
        #[arg(long)]
        decoded: Option<PathBuf>,
        /// Size of the decoding thread pool.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print the full decoding trace of one whitespace-tokenized sentence.
    Decode {
        /// Episode file providing the support set.
        #[arg(long)]
        support: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        sentence: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        max_span_len: Option<usize>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn sample(corpus: &Path, config: SamplerConfig, count: usize, seed: u64, out: &Path) -> Result<()> {
    let corpus = read_conll(BufReader::new(File::open(corpus)?))?;
    let episodes = (0..count as u64)
        .map(|i| sample_episode(&corpus, config, seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut w = create(out)?;
    write_episodes(&mut w, &episodes)?;
    w.flush()?;
    Ok(())
}

fn run_train(episodes: &Path, config: Option<&Path>, checkpoint: &Path, loss_csv: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut config = match config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let episodes = read_episodes(episodes)?;
    let out = train::<f64>(&episodes, &config)?;
    out.model.save_file(checkpoint)?;
    if let Some(p) = loss_csv {
        let mut w = create(p)?;
        write_trace_csv(&mut w, &out.trace)?;
        w.flush()?;
    }
    if let Some(last) = out.trace.last() {
        eprintln!("trained {} steps, final total loss {:.6}", last.step, last.losses.total);
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct EvalArgs<'a> {
    episodes: &'a Path,
    checkpoints: &'a [PathBuf],
    delta: Option<f64>,
    max_span_len: Option<usize>,
    strategy: Strategy,
    report: Option<&'a Path>,
    decoded: Option<&'a Path>,
    workers: usize,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let episodes = read_episodes(a.episodes)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers.max(1))
        .build()
        .map_err(|e| CdapError::Validation(e.to_string()))?;
    let mut reports = Vec::new();
    let mut settings = None;
    for (k, path) in a.checkpoints.iter().enumerate() {
        let model = Model::load_file(path)?;
        let delta = a.delta.unwrap_or(model.config().delta);
        let max_len = a.max_span_len.unwrap_or(model.config().max_span_len);
        settings.get_or_insert((delta, max_len));
        // indexed collect keeps episode order whatever the completion order
        let decoded: Vec<(DecodedEpisode, EpisodeMetrics)> = pool.install(|| {
            episodes
                .par_iter()
                .map(|e| {
                    let d = decode_episode(&model, e, delta, max_len, a.strategy)?;
                    let m = score_episode(e.query(), &d.extracted)?;
                    Ok((d, m))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        if k == 0 {
            if let Some(p) = a.decoded {
                write_decoded(p, &episodes, &decoded)?;
            }
        }
        let metrics: Vec<EpisodeMetrics> = decoded.iter().map(|(_, m)| *m).collect();
        reports.push((path, MetricsReport::new(&metrics)));
    }
    let (delta, max_len) = settings.expect("at least one checkpoint");
    let pooled: Vec<f64> = reports.iter().map(|(_, r)| r.pooled_micro.f1).collect();
    let averaged: Vec<f64> = reports.iter().map(|(_, r)| r.episode_averaged.f1).collect();
    let (pm, ps) = mean_std(&pooled);
    let (am, as_) = mean_std(&averaged);
    let out = json!({
        "strategy": a.strategy.name(),
        "delta": delta,
        "max_span_len": max_len,
        "checkpoints": reports
            .iter()
            .map(|(p, r)| json!({"path": p.display().to_string(), "metrics": r}))
            .collect::<Vec<_>>(),
        "pooled_micro_f1": {"mean": pm, "stdev": ps},
        "episode_averaged_f1": {"mean": am, "stdev": as_},
    });
    let text = serde_json::to_string_pretty(&out).expect("serializable report");
    match a.report {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{text}")?;
            w.flush()?;
            eprintln!("pooled micro-F1 {pm:.4} ± {ps:.4}, episode-averaged F1 {am:.4} ± {as_:.4}");
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn write_decoded(path: &Path, episodes: &[Episode], decoded: &[(DecodedEpisode, EpisodeMetrics)]) -> Result<()> {
    let mut w = create(path)?;
    for (i, (e, (d, _))) in episodes.iter().zip(decoded).enumerate() {
        for (j, spans) in d.extracted.iter().enumerate() {
            writeln!(w, "{}", decoded_json_line(i, j, spans, e.label_space()))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_decode(support: &Path, index: usize, sentence: &str, checkpoint: &Path, delta: Option<f64>, max_len: Option<usize>) -> Result<()> {
    let episodes = read_episodes(support)?;
    let episode = episodes.get(index).ok_or_else(|| {
        CdapError::Validation(format!("episode {index} requested, file holds {}", episodes.len()))
    })?;
    let tokens: Vec<String> = sentence.split_whitespace().map(String::from).collect();
    let query = LabeledSentence::new(tokens.clone(), Vec::new())?;
    let model = Model::load_file(checkpoint)?;
    let delta = delta.unwrap_or(model.config().delta);
    let max_len = max_len.unwrap_or(model.config().max_span_len);
    let labels = episode.label_space();
    let pred = predict(&model, episode, std::slice::from_ref(&query), max_len)?.remove(0);

    println!("token predictions:");
    for (t, (tok, p)) in tokens.iter().zip(&pred.token_probs).enumerate() {
        let label = pred.token_labels()[t];
        println!("  {t:>3} {tok:<20} {:<10} p={:.4}", labels.name(label), p[label.0]);
    }
    let mut cands = span_candidates(&pred, 0, delta);
    cands.sort_by(|a, b| b.adjusted_p.total_cmp(&a.adjusted_p));
    println!("span candidates (delta = {delta}):");
    for c in &cands {
        let text = tokens[c.span.start..=c.span.end].join(" ");
        println!(
            "  ({}, {}) {:<10} y_hat={:.4} count={} y_bar={:.4}  {text}",
            c.span.start,
            c.span.end,
            labels.name(c.class),
            c.raw_p,
            c.count,
            c.adjusted_p
        );
    }
    println!("extracted:");
    for c in decode_sentence(&pred, 0, delta, Strategy::ConsistentGreedy) {
        let text = tokens[c.span.start..=c.span.end].join(" ");
        println!("  ({}, {}) {:<10} {text}", c.span.start, c.span.end, labels.name(c.class));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SampleEpisodes {
            corpus,
            n_way,
            k_shot,
            mode,
            query_per_class,
            count,
            seed,
            out,
        } => {
            let mode = match mode {
                Mode::ExactK => ShotMode::ExactK,
                Mode::KTo2k => ShotMode::KTo2K,
            };
            let config = SamplerConfig {
                n_way,
                k_shot,
                mode,
                query_per_class,
            };
            sample(&corpus, config, count, seed, &out)
        }
        Command::Train {
            episodes,
            config,
            checkpoint,
            loss_csv,
            seed,
        } => run_train(&episodes, config.as_deref(), &checkpoint, loss_csv.as_deref(), seed),
        Command::Eval {
            episodes,
            checkpoint,
            delta,
            max_span_len,
            strategy,
            report,
            decoded,
            workers,
        } => run_eval(EvalArgs {
            episodes: &episodes,
            checkpoints: &checkpoint,
            delta,
            max_span_len,
            strategy,
            report: report.as_deref(),
            decoded: decoded.as_deref(),
            workers,
        }),
        Command::Decode {
            support,
            episode,
            sentence,
            checkpoint,
            delta,
            max_span_len,
        } => run_decode(&support, episode, &sentence, &checkpoint, delta, max_span_len),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
