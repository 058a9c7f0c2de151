use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use denseig::config::{BackendKind, BackendSpec, RunConfig};
use denseig::corpus::{load_corpus, load_qrels, load_queries};
use denseig::encoder::{serve_request, ExternalEncoder, ReferenceConfig};
use denseig::eval::evaluate_run;
use denseig::explain::{
    compare_models, explain_instance, explain_ranking, split_with_mode, title_attribution,
};
use denseig::index::{build_index_with_progress, load_index, save_index};
use denseig::report::{self, CloudWeights, Polarity};
use denseig::{
    attribution::AttributionRecord, Corpus, DenseIndex, EncoderBackend, Qrels, Queries, Query,
    ReferenceEncoder, Side, Vocabulary,
};

#[derive(Parser)]
#[command(
    name = "denseig",
    version,
    about = "Integrated Gradients explanations for dense retrievers"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    queries: Option<PathBuf>,
    #[arg(long, global = true)]
    qrels: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Machine-readable output only.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Encode the corpus and write `index.bin`.
    Index,
    /// Top-k documents for one query, or for every query.
    Retrieve {
        #[arg(long)]
        query_id: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Token attributions for one query-document pair.
    Explain {
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        doc_id: String,
    },
    /// Aggregate document attributions over a query's top-k.
    ExplainRanking {
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Title-span attribution sums under two backends.
    TitleAttrib,
    /// NDCG over the query set.
    Eval,
    /// Ranking explanations for one query under two backends.
    Compare {
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Serve the configured reference encoder over stdin/stdout as an external backend.
    ServeReference,
}

struct Ctx {
    cfg: RunConfig,
    force: bool,
    json: bool,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    /// Fails if any target exists and `--force` was not given.
    fn claim(&self, paths: &[&Path]) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.output_dir)
            .with_context(|| format!("creating {}", self.cfg.output_dir.display()))?;
        if !self.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                bail!("refusing to overwrite {} (pass --force)", p.display());
            }
        }
        Ok(())
    }

    fn write(&self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn corpus(&self) -> Result<Corpus> {
        let p = self
            .cfg
            .corpus
            .as_ref()
            .ok_or_else(|| anyhow!("no corpus given (--corpus)"))?;
        Ok(load_corpus(p)?)
    }

    fn queries(&self) -> Result<Option<Queries>> {
        self.cfg
            .queries
            .as_ref()
            .map(load_queries)
            .transpose()
            .map_err(Into::into)
    }

    fn require_queries(&self) -> Result<Queries> {
        self.queries()?
            .ok_or_else(|| anyhow!("no queries given (--queries)"))
    }

    fn qrels(&self, queries: &Queries) -> Result<Qrels> {
        let p = self
            .cfg
            .qrels
            .as_ref()
            .ok_or_else(|| anyhow!("no qrels given (--qrels)"))?;
        let qrels = load_qrels(p)?;
        if qrels.is_empty() {
            bail!("qrels file {} has no judgments", p.display());
        }
        qrels.check_queries(queries)?;
        Ok(qrels)
    }

    fn backend(
        &self,
        spec: &BackendSpec,
        corpus: &Corpus,
        queries: Option<&Queries>,
    ) -> Result<Box<dyn EncoderBackend>> {
        match spec.kind {
            BackendKind::Reference => {
                let mut texts: Vec<String> = corpus.iter().map(|d| d.full_text()).collect();
                texts.extend(
                    queries
                        .into_iter()
                        .flat_map(|q| q.iter().map(|q| q.text.clone())),
                );
                let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str));
                let seed = spec.seed.unwrap_or_else(|| self.cfg.encoder_seed());
                Ok(Box::new(ReferenceEncoder::new(
                    vocab,
                    ReferenceConfig {
                        dim: spec.dim,
                        max_seq_len: spec.max_seq_len,
                        seed,
                    },
                )?))
            }
            BackendKind::External => {
                let cmd = spec
                    .command
                    .as_deref()
                    .ok_or_else(|| anyhow!("external backend needs backend.command"))?;
                Ok(Box::new(ExternalEncoder::spawn(cmd)?))
            }
        }
    }

    fn build(&self, corpus: &Corpus, backend: &dyn EncoderBackend) -> Result<DenseIndex> {
        let mut last = 0;
        Ok(build_index_with_progress(
            corpus,
            backend,
            self.cfg.batch_size,
            |done, total| {
                if done * 10 / total.max(1) != last {
                    last = done * 10 / total.max(1);
                    log::info!("encoded {done}/{total} documents");
                }
            },
        )?)
    }

    fn index(&self, backend: &dyn EncoderBackend) -> Result<DenseIndex> {
        let path = self.out("index.bin");
        if !path.exists() {
            bail!("no index at {} (run `denseig index` first)", path.display());
        }
        Ok(load_index(&path, backend)?)
    }

    /// The saved index when it matches `backend`, otherwise a fresh in-memory one.
    fn index_or_build(&self, corpus: &Corpus, backend: &dyn EncoderBackend) -> Result<DenseIndex> {
        let path = self.out("index.bin");
        if let Ok(index) = DenseIndex::read(&path) {
            if index.fingerprint() == backend.fingerprint() {
                return Ok(index);
            }
        }
        self.build(corpus, backend)
    }

    fn echo_config(&self, command: &str) -> Result<()> {
        self.write(&self.out(&format!("{command}.conf")), self.cfg.echo())
    }
}

fn find_query<'a>(queries: &'a Queries, id: &str) -> Result<&'a Query> {
    queries
        .get(id)
        .ok_or_else(|| anyhow!("unknown query id `{id}`"))
}

/// Keeps ids usable as file name parts.
fn file_part(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_index(ctx: &Ctx) -> Result<()> {
    let path = ctx.out("index.bin");
    let conf = ctx.out("index.conf");
    ctx.claim(&[&path, &conf])?;
    let corpus = ctx.corpus()?;
    let queries = ctx.queries()?;
    let backend = ctx.backend(&ctx.cfg.backend, &corpus, queries.as_ref())?;
    let index = ctx.build(&corpus, &*backend)?;
    save_index(&index, &path)?;
    ctx.echo_config("index")?;
    if ctx.json {
        let summary = serde_json::json!({
            "n": index.len(),
            "dim": index.dim(),
            "fingerprint": index.fingerprint(),
            "path": path,
        });
        println!("{summary}");
    } else {
        println!(
            "indexed N={} d={} fingerprint={} -> {}",
            index.len(),
            index.dim(),
            index.fingerprint(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_retrieve(ctx: &Ctx, query_id: Option<&str>, k: Option<usize>) -> Result<()> {
    let k = k.unwrap_or(ctx.cfg.k_retrieve);
    let path = ctx.out("retrieve.tsv");
    ctx.claim(&[&path])?;
    let corpus = ctx.corpus()?;
    let queries = ctx.require_queries()?;
    let backend = ctx.backend(&ctx.cfg.backend, &corpus, Some(&queries))?;
    let index = ctx.index(&*backend)?;
    let selected: Vec<&Query> = match query_id {
        Some(id) => vec![find_query(&queries, id)?],
        None => queries.iter().collect(),
    };
    let mut runs = Vec::new();
    for q in selected {
        let v = backend.encode(&q.text, Side::Query)?;
        runs.push((q.query_id.clone(), index.retrieve(v.view(), k)?));
    }
    let table = report::hits_tsv(&runs);
    ctx.write(&path, &table)?;
    if ctx.json {
        for (q, hits) in &runs {
            println!("{}", serde_json::json!({ "query_id": q, "hits": hits }));
        }
    } else {
        print!("{table}");
    }
    Ok(())
}

fn cmd_explain(ctx: &Ctx, query_id: &str, doc_id: &str) -> Result<()> {
    let stem = format!("explain-{}-{}", file_part(query_id), file_part(doc_id));
    let record_path = ctx.out(&format!("{stem}.jsonl"));
    let html_path = ctx.out(&format!("{stem}.html"));
    if ctx.json {
        ctx.claim(&[&record_path])?;
    } else {
        ctx.claim(&[&record_path, &html_path])?;
    }
    let corpus = ctx.corpus()?;
    let queries = ctx.require_queries()?;
    let query = find_query(&queries, query_id)?;
    let doc = corpus
        .get(doc_id)
        .ok_or_else(|| anyhow!("unknown document id `{doc_id}`"))?;
    let backend = ctx.backend(&ctx.cfg.backend, &corpus, Some(&queries))?;
    let ig = &ctx.cfg.ig;
    let ex = explain_instance(query, doc, &*backend, ig)?;
    let records = [
        AttributionRecord::new(query_id, doc_id, &ex.query_attr, ig),
        AttributionRecord::new(query_id, doc_id, &ex.doc_attr, ig),
    ];
    let jsonl = report::to_jsonl(&records)?;
    ctx.write(&record_path, &jsonl)?;
    if ctx.json {
        print!("{jsonl}");
        return Ok(());
    }
    report::render_instance(&ex, &html_path)?;
    println!("score {:.6}", ex.score);
    for a in [&ex.query_attr, &ex.doc_attr] {
        let within = if a.within_tolerance(ig) {
            "within tolerance"
        } else {
            "OUTSIDE tolerance"
        };
        println!(
            "{} residual {:.3e} ({within}, bound {:.3e})",
            a.side.as_str(),
            a.completeness_residual,
            ig.tolerance(a.score_f_x - a.score_f_baseline)
        );
    }
    println!(
        "wrote {} and {}",
        html_path.display(),
        record_path.display()
    );
    Ok(())
}

/// Writes positive and negative clouds; an empty split leaves its file absent.
fn write_clouds(
    ctx: &Ctx,
    re: &denseig::explain::RankingExplanation,
    paths: [&Path; 2],
) -> Result<Vec<String>> {
    let (pos, neg) = split_with_mode(re, ctx.cfg.cloud_mode);
    let mut notes = Vec::new();
    for ((polarity, weights), path) in [(Polarity::Positive, pos), (Polarity::Negative, neg)]
        .into_iter()
        .zip(paths)
    {
        if weights.is_empty() {
            if path.exists() {
                std::fs::remove_file(path)
                    .with_context(|| format!("removing stale {}", path.display()))?;
            }
            notes.push(format!("{} cloud empty, not written", polarity.as_str()));
            continue;
        }
        let cloud = CloudWeights::new(&re.query_id, re.k, polarity, &weights)?;
        report::emit_cloud(&cloud, path)?;
        notes.push(format!(
            "{} cloud: {} tokens -> {}",
            polarity.as_str(),
            cloud.entries.len(),
            path.display()
        ));
    }
    Ok(notes)
}

fn cmd_explain_ranking(ctx: &Ctx, query_id: &str, k: Option<usize>) -> Result<()> {
    let k = k.unwrap_or(ctx.cfg.k_explain);
    let q = file_part(query_id);
    let pos = ctx.out(&format!("cloud-{q}-positive.tsv"));
    let neg = ctx.out(&format!("cloud-{q}-negative.tsv"));
    let table = ctx.out(&format!("ranking-{q}.tsv"));
    ctx.claim(&[&pos, &neg, &table])?;
    let corpus = ctx.corpus()?;
    let queries = ctx.require_queries()?;
    let query = find_query(&queries, query_id)?;
    let backend = ctx.backend(&ctx.cfg.backend, &corpus, Some(&queries))?;
    let index = ctx.index(&*backend)?;
    let re = explain_ranking(query, &index, &corpus, &*backend, k, &ctx.cfg.ig)?;
    ctx.write(&table, report::ranking_table_tsv(&re))?;
    let notes = write_clouds(ctx, &re, [&pos, &neg])?;
    if ctx.json {
        println!("{}", serde_json::to_string(&re.per_token_totals)?);
    } else {
        println!("explained {} documents for {query_id}", re.documents.len());
        for n in notes {
            println!("{n}");
        }
    }
    Ok(())
}

fn cmd_title_attrib(ctx: &Ctx) -> Result<()> {
    let path = ctx.out("title-summary.tsv");
    ctx.claim(&[&path])?;
    let corpus = ctx.corpus()?;
    if !corpus.iter().any(|d| d.has_title()) {
        bail!("corpus has no titled documents");
    }
    let queries = ctx.require_queries()?;
    let qrels = ctx.qrels(&queries)?;
    let a = ctx.backend(&ctx.cfg.backend, &corpus, Some(&queries))?;
    let b = ctx.backend(&ctx.cfg.backend_b(), &corpus, Some(&queries))?;
    let rep = title_attribution(
        &queries,
        &qrels,
        &corpus,
        &*a,
        &*b,
        &ctx.cfg.ig,
        ctx.cfg.title_seed(),
    )?;
    report::emit_title_summary(&rep, &path)?;
    let (sa, sb) = rep.aggregate();
    if ctx.json {
        println!("{}", serde_json::to_string(&rep)?);
    } else {
        println!(
            "{} documents, {} queries skipped; title sums a={sa:.6} b={sb:.6} -> {}",
            rep.rows.len(),
            rep.skipped.len(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let path = ctx.out("eval.tsv");
    ctx.claim(&[&path])?;
    let corpus = ctx.corpus()?;
    let queries = ctx.require_queries()?;
    let qrels = ctx.qrels(&queries)?;
    let backend = ctx.backend(&ctx.cfg.backend, &corpus, Some(&queries))?;
    let index = ctx.index(&*backend)?;
    let res = evaluate_run(&index, &*backend, &queries, &qrels, ctx.cfg.eval_k)?;
    ctx.write(&path, report::eval_table_tsv(&res))?;
    if ctx.json {
        println!("{}", serde_json::to_string(&res)?);
    } else {
        println!(
            "{} = {:.4} over {} queries ({} excluded) -> {}",
            res.metric,
            res.mean,
            res.per_query.len(),
            res.excluded,
            path.display()
        );
    }
    Ok(())
}

fn cmd_compare(ctx: &Ctx, query_id: &str, k: Option<usize>) -> Result<()> {
    let k = k.unwrap_or(ctx.cfg.k_explain);
    let q = file_part(query_id);
    let paths: Vec<PathBuf> = ["a-positive", "a-negative", "b-positive", "b-negative"]
        .iter()
        .map(|s| ctx.out(&format!("compare-{q}-{s}.tsv")))
        .chain([ctx.out(&format!("delta-{q}.tsv"))])
        .collect();
    ctx.claim(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let corpus = ctx.corpus()?;
    let queries = ctx.require_queries()?;
    let query = find_query(&queries, query_id)?;
    let a = ctx.backend(&ctx.cfg.backend, &corpus, Some(&queries))?;
    let b = ctx.backend(&ctx.cfg.backend_b(), &corpus, Some(&queries))?;
    let index_a = ctx.index_or_build(&corpus, &*a)?;
    let index_b = ctx.index_or_build(&corpus, &*b)?;
    let cmp = compare_models(query, &corpus, &index_a, &*a, &index_b, &*b, k, &ctx.cfg.ig)?;
    let mut notes = write_clouds(ctx, &cmp.a, [&paths[0], &paths[1]])?;
    notes.extend(write_clouds(ctx, &cmp.b, [&paths[2], &paths[3]])?);
    ctx.write(&paths[4], report::delta_table_tsv(query_id, &cmp))?;
    if ctx.json {
        println!("{}", serde_json::to_string(&cmp.delta)?);
    } else {
        let changed = cmp.delta.values().filter(|d| **d != 0.0).count();
        println!(
            "{changed} of {} tokens changed -> {}",
            cmp.delta.len(),
            paths[4].display()
        );
        for n in notes {
            println!("{n}");
        }
    }
    Ok(())
}

fn cmd_serve_reference(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let queries = ctx.queries()?;
    let mut spec = ctx.cfg.backend.clone();
    spec.kind = BackendKind::Reference;
    let backend = ctx.backend(&spec, &corpus, queries.as_ref())?;
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str(&line) {
            Ok(req) => serve_request(&*backend, &req),
            Err(e) => serde_json::json!({ "error": format!("bad request: {e}") }),
        };
        writeln!(stdout, "{reply}")?;
        stdout.flush()?;
    }
    Ok(())
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let mut flags = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push(format!("{k}={v}"));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    flag("corpus", path(&g.corpus));
    flag("queries", path(&g.queries));
    flag("qrels", path(&g.qrels));
    flag("output_dir", path(&g.output_dir));
    flag("seed", g.seed.map(|s| s.to_string()));
    flag("threads", g.threads.map(|t| t.to_string()));
    cfg.apply_overrides(flags.iter().chain(&g.overrides).map(String::as_str))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()?;
    }
    log::debug!("effective config:\n{}", cfg.echo());
    let ctx = Ctx {
        cfg,
        force: cli.global.force,
        json: cli.global.json,
    };
    match &cli.command {
        Command::Index => cmd_index(&ctx),
        Command::Retrieve { query_id, k } => cmd_retrieve(&ctx, query_id.as_deref(), *k),
        Command::Explain { query_id, doc_id } => cmd_explain(&ctx, query_id, doc_id),
        Command::ExplainRanking { query_id, k } => cmd_explain_ranking(&ctx, query_id, *k),
        Command::TitleAttrib => cmd_title_attrib(&ctx),
        Command::Eval => cmd_eval(&ctx),
        Command::Compare { query_id, k } => cmd_compare(&ctx, query_id, *k),
        Command::ServeReference => cmd_serve_reference(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
