use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use webcurate::benchmark::{run_benchmark, BenchConfig};
use webcurate::clients;
use webcurate::config::{
    CleanseStage, DedupStage, LengthStage, PartitionStage, PipelineConfig, RenderStage, SafetyStage, ServicesConfig,
};
use webcurate::pipeline::{self, PipelineError, Sample, StageOut};
use webcurate::server::{self, AppState};
use webcurate_core::curate::{corpus_stats, DatasetEntry, Split};
use webcurate_core::ingest::{ingest_dir, ingest_warc};
use webcurate_core::manifest::{read_jsonl, write_atomic, write_jsonl};
use webcurate_core::purify::CharRange;
use webcurate_core::quality::AnnotationStore;
use webcurate_core::safety::{WordLists, MAX_BAD_WORDS, NSFW_THRESHOLD};
use webcurate_core::{Gpt2Tokenizer, Mode};

/// Design-to-code corpus curation and evaluation.
#[derive(Parser)]
#[command(name = "webcurate", version)]
struct Cli {
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Read a directory of HTML files or a WARC archive into a raw manifest.
    Ingest {
        #[arg(long, conflicts_with = "warc", required_unless_present = "warc")]
        dir: Option<PathBuf>,
        #[arg(long)]
        warc: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Length gate and cleansing.
    Purify {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = LengthStage::default().html_range)]
        html_range: CharRange,
        #[arg(long, default_value_t = LengthStage::default().css_range)]
        css_range: CharRange,
        /// Skip the length gate and only cleanse.
        #[arg(long)]
        no_length_filter: bool,
    },
    /// Screenshot and layout tree for every page.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Output manifest; defaults to OUT_DIR/rendered.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = RenderStage::default().width)]
        viewport: u32,
        #[arg(long, default_value_t = RenderStage::default().height)]
        viewport_height: u32,
        #[arg(long, default_value_t = RenderStage::default().max_height)]
        max_height: u32,
        #[arg(long, default_value_t = RenderStage::default().pool)]
        pool: usize,
        #[arg(long, default_value_t = RenderStage::default().timeout_ms)]
        timeout_ms: u64,
        #[arg(long)]
        browser: Option<PathBuf>,
    },
    /// Quality scoring; human consensus from the store wins over the model.
    Score {
        #[command(flatten)]
        io: Io,
        /// Scorer URL, or mock / mock:<score>.
        #[arg(long)]
        scorer_url: String,
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        svc: Svc,
    },
    /// NSFW and bad-word filtering.
    Safety {
        #[command(flatten)]
        io: Io,
        /// NSFW detector URL, or mock / mock:<score>.
        #[arg(long)]
        nsfw_url: String,
        #[arg(long, num_args = 1..)]
        badwords: Vec<PathBuf>,
        #[arg(long, default_value_t = NSFW_THRESHOLD)]
        nsfw_threshold: f64,
        #[arg(long, default_value_t = MAX_BAD_WORDS)]
        max_bad_words: usize,
        #[command(flatten)]
        svc: Svc,
    },
    /// De-duplication, split assignment and statistics.
    Curate {
        #[command(flatten)]
        io: Io,
        #[arg(long, default_value_t = PartitionStage::default().per_split)]
        per_split: usize,
        #[arg(long, default_value_t = PartitionStage::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = PartitionStage::default().min_test_score)]
        min_test_score: f64,
        /// Embedding service URL, or thumbnail for the built-in embedding.
        #[arg(long, default_value_t = DedupStage::default().embedder)]
        emb_url: String,
        #[arg(long, default_value_t = DedupStage::default().threshold)]
        emb_threshold: f64,
        /// Ids that must not enter a test split, one per line.
        #[arg(long)]
        reject_list: Option<PathBuf>,
        #[command(flatten)]
        svc: Svc,
    },
    /// Run a generator over one split and score its output.
    Eval {
        #[arg(long)]
        split: Split,
        /// echo, empty, or http:URL for a chat-completions endpoint.
        #[arg(long)]
        generator: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "dataset.jsonl")]
        dataset: PathBuf,
        /// Model name sent to an HTTP generator.
        #[arg(long, default_value = "gpt-4o")]
        model: String,
        #[arg(long, default_value = "thumbnail")]
        embedder: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Generator calls per minute; 0 means unlimited.
        #[arg(long, default_value_t = 0)]
        rate_limit: u32,
        /// Resume journal; defaults to OUT with a .journal.jsonl suffix.
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long)]
        browser: Option<PathBuf>,
        #[command(flatten)]
        svc: Svc,
    },
    /// Corpus statistics table for a dataset or stage manifest.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        /// Write stats.csv and stats.txt here as well as printing.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Annotation endpoints and the static UI.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Manifest whose samples (with screenshots) are offered for annotation.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// All stages with checkpoints, driven by a config file.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in", required_unless_present = "print_config")]
        input: Option<PathBuf>,
        #[arg(long, required_unless_present = "print_config")]
        work: Option<PathBuf>,
        /// Override a config value, e.g. --set render.pool=4.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print the effective config and exit.
        #[arg(long)]
        print_config: bool,
    },
}

#[derive(Args)]
struct Io {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Svc {
    #[arg(long, default_value_t = ServicesConfig::default().timeout_ms)]
    service_timeout_ms: u64,
    #[arg(long, default_value_t = ServicesConfig::default().retry.attempts)]
    retries: u32,
}

impl Svc {
    fn config(&self) -> ServicesConfig {
        let mut s = ServicesConfig {
            timeout_ms: self.service_timeout_ms,
            ..Default::default()
        };
        s.retry.attempts = self.retries.max(1);
        s
    }
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn config(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 1, err: e.into() })
    }
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, err: e.into() })
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e {
            PipelineError::Config(_) | PipelineError::Render(_) => 2,
            _ => 1,
        };
        Failure { code, err: e.into() }
    }
}

const EXIT_PARTIAL: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mode = if cli.sequential {
        Mode::Sequential
    } else {
        Mode::Parallel
    };
    match run(cli.cmd, mode) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(parked) => {
            eprintln!("{parked} samples parked; rerun once the services are reachable");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn base_of(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Re-expresses artifact paths written relative to `from` so they resolve
/// relative to `to`.
fn rebase(samples: &mut [Sample], from: &Path, to: &Path) {
    let (from, to) = (absolute(from), absolute(to));
    if from == to {
        return;
    }
    let fix = |p: &mut Option<PathBuf>| {
        if let Some(path) = p {
            let abs = from.join(&*path);
            *path = abs.strip_prefix(&to).map(Path::to_path_buf).unwrap_or(abs);
        }
    };
    for s in samples {
        fix(&mut s.screenshot);
        fix(&mut s.layout);
    }
}

fn read_samples(p: &Path) -> Result<Vec<Sample>, Failure> {
    read_jsonl(p).input()
}

fn parked_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.parked.jsonl"))
}

/// Writes survivors to `out` (and parked samples next to it), prints the
/// removal summary and returns the parked count.
fn finish(stage: &str, input: usize, mut out: StageOut, from: &Path, dest: &Path) -> Result<usize, Failure> {
    let to = base_of(dest);
    rebase(&mut out.kept, from, &to);
    rebase(&mut out.parked, from, &to);
    write_jsonl(dest, &out.kept).input()?;
    if !out.parked.is_empty() {
        write_jsonl(&parked_path(dest), &out.parked).input()?;
    }
    let removed: Vec<String> = out.removed.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "{stage}: {input} in, {} out, {} parked, removed [{}]",
        out.kept.len(),
        out.parked.len(),
        removed.join(", ")
    );
    for (k, v) in &out.details {
        println!("  {k}: {v}");
    }
    if let Some(t) = &out.text {
        print!("{t}");
    }
    Ok(out.parked.len())
}

fn run(cmd: Cmd, mode: Mode) -> Result<usize, Failure> {
    match cmd {
        Cmd::Ingest { dir, warc, limit, out } => {
            let res = match (dir, warc) {
                (Some(d), _) => ingest_dir(&d).map(|mut o| {
                    if let Some(n) = limit {
                        o.pages.truncate(n);
                    }
                    o
                }),
                (None, Some(w)) => ingest_warc(&w, limit),
                (None, None) => unreachable!("clap enforces one source"),
            }
            .input()?;
            write_jsonl(&out, &res.pages).input()?;
            println!("ingest: {} pages, {} skipped", res.pages.len(), res.skipped.total());
            for (reason, n) in &res.skipped.0 {
                println!("  {reason}: {n}");
            }
            Ok(0)
        }
        Cmd::Purify {
            io,
            html_range,
            css_range,
            no_length_filter,
        } => {
            let samples = read_samples(&io.input)?;
            let n = samples.len();
            let mut removed = std::collections::BTreeMap::new();
            let samples = if no_length_filter {
                samples
            } else {
                let cfg = LengthStage {
                    enabled: true,
                    html_range,
                    css_range,
                };
                let o = pipeline::length_stage(samples, &cfg);
                removed = o.removed;
                o.kept
            };
            let mut out = pipeline::cleanse_stage(samples, &CleanseStage::default(), mode);
            out.removed.extend(removed);
            finish("purify", n, out, &base_of(&io.input), &io.out)
        }
        Cmd::Render {
            input,
            out_dir,
            out,
            viewport,
            viewport_height,
            max_height,
            pool,
            timeout_ms,
            browser,
        } => {
            let cfg = RenderStage {
                enabled: true,
                pool,
                width: viewport,
                height: viewport_height,
                max_height,
                timeout_ms,
                browser,
                ..Default::default()
            };
            if pool == 0 {
                return Err(anyhow!("--pool must be at least 1")).config();
            }
            cfg.render_config().validate().config()?;
            let samples = read_samples(&input)?;
            let n = samples.len();
            let dest = out.unwrap_or_else(|| out_dir.join("rendered.jsonl"));
            let base = base_of(&dest);
            let o =
                pipeline::render_stage(samples, &cfg, &absolute(&out_dir), &absolute(&base)).map_err(Failure::from)?;
            finish("render", n, o, &base, &dest)
        }
        Cmd::Score {
            io,
            scorer_url,
            store,
            svc,
        } => {
            let svc = svc.config();
            let scorer = clients::scorer(&scorer_url, &svc).map_err(|e| anyhow!(e)).config()?;
            let store = store.map(|p| AnnotationStore::open(&p)).transpose().config()?;
            let samples = read_samples(&io.input)?;
            let base = base_of(&io.input);
            let n = samples.len();
            let o = pipeline::score_stage(samples, scorer.as_ref(), store.as_ref(), &svc.retry, &base, mode);
            finish("score", n, o, &base, &io.out)
        }
        Cmd::Safety {
            io,
            nsfw_url,
            badwords,
            nsfw_threshold,
            max_bad_words,
            svc,
        } => {
            let svc = svc.config();
            if nsfw_threshold.is_nan() || nsfw_threshold < 0.0 {
                return Err(anyhow!("--nsfw-threshold must be a non-negative number")).config();
            }
            let detector = clients::nsfw_detector(&nsfw_url, &svc)
                .map_err(|e| anyhow!(e))
                .config()?;
            let lists = WordLists::load(&badwords).config()?;
            let cfg = SafetyStage {
                enabled: true,
                nsfw: nsfw_url,
                nsfw_threshold,
                max_bad_words,
                badwords,
            };
            let samples = read_samples(&io.input)?;
            let base = base_of(&io.input);
            let n = samples.len();
            let o = pipeline::safety_stage(samples, detector.as_ref(), &lists, &cfg, &svc.retry, &base, mode);
            finish("safety", n, o, &base, &io.out)
        }
        Cmd::Curate {
            io,
            per_split,
            seed,
            min_test_score,
            emb_url,
            emb_threshold,
            reject_list,
            svc,
        } => {
            let svc = svc.config();
            if per_split == 0 {
                return Err(anyhow!("--per-split must be at least 1")).config();
            }
            let embedder = clients::embedder(&emb_url, &svc).map_err(|e| anyhow!(e)).config()?;
            let reject = match &reject_list {
                Some(p) => pipeline::read_id_list(p).map_err(Failure::from)?,
                None => BTreeSet::new(),
            };
            let samples = read_samples(&io.input)?;
            let base = base_of(&io.input);
            let n = samples.len();
            let dcfg = DedupStage {
                enabled: true,
                embedder: emb_url,
                threshold: emb_threshold,
            };
            let d = pipeline::dedup_stage(
                samples,
                embedder.as_ref(),
                &dcfg,
                min_test_score,
                &svc.retry,
                &base,
                mode,
            );
            let pcfg = PartitionStage {
                enabled: true,
                per_split,
                seed,
                min_test_score,
                reject_list,
            };
            let tok = Gpt2Tokenizer::embedded();
            let mut p = pipeline::partition_stage(d.kept, &pcfg, &reject, tok, mode);
            let parked = d.parked.len();
            if parked > 0 {
                write_jsonl(&parked_path(&io.out), &d.parked).input()?;
            }
            let to = base_of(&io.out);
            rebase(&mut p.kept, &base, &to);
            let mut entries: Vec<DatasetEntry> = p.kept.iter().map(|s| s.to_entry(tok)).collect();
            entries.sort_by(|a, b| a.id.cmp(&b.id));
            write_jsonl(&io.out, &entries).input()?;
            let mut removed = d.removed;
            for (k, v) in p.removed {
                *removed.entry(k).or_default() += v;
            }
            let removed: Vec<String> = removed.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!(
                "curate: {n} in, {} out, {parked} parked, removed [{}]",
                entries.len(),
                removed.join(", ")
            );
            print!("{}", p.text.unwrap_or_default());
            write_stats(&entries, &to)?;
            Ok(parked)
        }
        Cmd::Eval {
            split,
            generator,
            out,
            dataset,
            model,
            embedder,
            workers,
            rate_limit,
            journal,
            browser,
            svc,
        } => {
            let svc = svc.config();
            let gen = clients::generator(&generator, &model, &svc, rate_limit)
                .map_err(|e| anyhow!(e))
                .config()?;
            let emb = clients::embedder(&embedder, &svc).map_err(|e| anyhow!(e)).config()?;
            let entries: Vec<DatasetEntry> = read_jsonl(&dataset).input()?;
            let chosen: Vec<DatasetEntry> = entries.into_iter().filter(|e| e.split == split).collect();
            if chosen.is_empty() {
                return Err(anyhow!("no entries in split {split} of {}", dataset.display())).input();
            }
            let mut render = RenderStage::default().render_config();
            render.browser = browser;
            let cfg = BenchConfig {
                render,
                workers,
                journal: Some(journal.unwrap_or_else(|| {
                    let stem = out
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    out.with_file_name(format!("{stem}.journal.jsonl"))
                })),
            };
            let report = run_benchmark(
                &chosen,
                split.as_str(),
                gen.as_ref(),
                emb.as_ref(),
                &cfg,
                &base_of(&dataset),
            )
            .map_err(|e| match e {
                webcurate::benchmark::BenchError::Render(_) => Failure { code: 2, err: e.into() },
                _ => Failure { code: 1, err: e.into() },
            })?;
            let json = serde_json::to_vec_pretty(&report).expect("report serializes");
            write_atomic(&out, &json)
                .with_context(|| out.display().to_string())
                .input()?;
            let csv = out.with_extension("csv");
            write_atomic(&csv, report.to_csv().as_bytes())
                .with_context(|| csv.display().to_string())
                .input()?;
            println!("{}", report.summary_line());
            if report.excluded > 0 {
                println!(
                    "{} samples failed and are excluded from the aggregates",
                    report.excluded
                );
            }
            Ok(0)
        }
        Cmd::Stats { input, out_dir } => {
            // Accepts a final dataset or any intermediate stage manifest.
            let entries: Vec<DatasetEntry> = match read_jsonl(&input) {
                Ok(e) => e,
                Err(err) => match read_jsonl::<Sample>(&input) {
                    Ok(samples) => {
                        let tok = Gpt2Tokenizer::embedded();
                        samples.iter().map(|s| s.to_entry(tok)).collect()
                    }
                    Err(_) => return Err(err).input(),
                },
            };
            let table = corpus_stats(&entries);
            print!("{}", table.to_text());
            if let Some(d) = out_dir {
                std::fs::create_dir_all(&d)
                    .with_context(|| d.display().to_string())
                    .input()?;
                write_stats(&entries, &d)?;
            }
            Ok(0)
        }
        Cmd::Serve {
            store,
            addr,
            samples,
            ui_dir,
        } => {
            let st = AnnotationStore::open(&store).config()?;
            let base = match &samples {
                Some(m) => {
                    let list = read_samples(m)?;
                    let base = absolute(&base_of(m));
                    for s in &list {
                        let shot = s.screenshot.as_ref().map(|p| base.join(p));
                        st.add_sample(&s.id, shot).input()?;
                    }
                    println!("serve: {} samples registered", list.len());
                    base
                }
                None => absolute(&base_of(&store)),
            };
            let state = Arc::new(AppState { store: st, base });
            let rt = tokio::runtime::Runtime::new().input()?;
            rt.block_on(async move {
                let listener = server::bind(addr).await.config()?;
                println!("serve: listening on http://{}", listener.local_addr().input()?);
                let shutdown = async {
                    let _ = tokio::signal::ctrl_c().await;
                };
                server::serve(listener, state, ui_dir, shutdown).await.input()
            })?;
            Ok(0)
        }
        Cmd::Pipeline {
            config,
            input,
            work,
            overrides,
            print_config,
        } => {
            let cfg = load_config(config.as_deref(), &overrides, mode)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(0);
            }
            let (input, work) = (input.expect("clap"), work.expect("clap"));
            std::fs::create_dir_all(&work)
                .with_context(|| work.display().to_string())
                .input()?;
            let outcome = pipeline::run_pipeline(&cfg, &input, &work)?;
            print!("{}", outcome.funnel.to_text());
            println!("dataset: {}", outcome.dataset.display());
            if !outcome.funnel.is_conserved() {
                bail_input("funnel does not balance; this is a bug")?;
            }
            Ok(outcome.funnel.parked)
        }
    }
}

fn bail_input(msg: &str) -> Result<(), Failure> {
    let r: anyhow::Result<()> = Err(anyhow!(msg.to_string()));
    r.input()
}

fn write_stats(entries: &[DatasetEntry], dir: &Path) -> Result<(), Failure> {
    let table = corpus_stats(entries);
    for (name, body) in [("stats.csv", table.to_csv()), ("stats.txt", table.to_text())] {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())
            .with_context(|| p.display().to_string())
            .input()?;
    }
    Ok(())
}

/// File values first, then `--set` overrides, then `--sequential`.
fn load_config(path: Option<&Path>, overrides: &[String], mode: Mode) -> Result<PipelineConfig, Failure> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| p.display().to_string())
            .config()?,
        None => PipelineConfig::default().to_toml(),
    };
    let mut table: toml::Table = text.parse().context("config").config()?;
    for o in overrides {
        apply_override(&mut table, o).config()?;
    }
    if mode == Mode::Sequential {
        table.insert("parallel".into(), toml::Value::Boolean(false));
    }
    let cfg = PipelineConfig::from_toml(&toml::to_string(&table).expect("table serializes")).config()?;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {spec:?}"))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| anyhow!("empty key in {spec:?}"))?;
    let mut cur = table;
    for p in path {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            _ => bail!("{key}: {p} is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
