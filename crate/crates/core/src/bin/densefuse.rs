use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use densefuse_core::captioner::{self, BackoffPolicy, EngineClient, ResumeMode};
use densefuse_core::catalog::{self, ImageRecord};
use densefuse_core::config::{PipelineConfig, SelectRank};
use densefuse_core::curator::{self, SelectMember};
use densefuse_core::embedstore;
use densefuse_core::experts::{self, AnnotationRecord, ExpertClient, ExpertTask};
use densefuse_core::fusion::{self, PromptKind, PromptLine};
use densefuse_core::mock::{MockEngine, MockExpert};
use densefuse_core::pipeline::{self, RunOptions, Stage};
use densefuse_core::stats::{self, HeuristicTagger};

#[derive(Parser)]
#[command(name = "densefuse", version, about = "Batch image curation and fused caption generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw manifest into validated catalog shards.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        shard_size: usize,
    },
    /// Drop records whose short edge is below the minimum.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 448)]
        min_short_edge: u32,
    },
    /// Load a raw embedding file, keeping vectors whose ids appear in
    /// the catalog, and write a normalized store.
    EmbedIngest {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spherical k-means over a store.
    Cluster {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cluster semantic dedup over a fitted model.
    Dedup {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the representative members of every cluster.
    Select {
        #[arg(long)]
        decisions: PathBuf,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        /// centroid, resolution, or random.
        #[arg(long, default_value = "centroid")]
        rank: String,
        /// Catalog shard directory; required for resolution ranking.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every expert task for the selected images.
    Annotate {
        #[arg(long)]
        selected: PathBuf,
        /// Catalog shard directory holding the selected records.
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        expert_url: String,
        #[arg(long, default_value_t = 8)]
        max_in_flight: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble fusion prompts from annotation bundles.
    Prompt {
        #[arg(long)]
        annotations: PathBuf,
        /// meta_gpt4v or engine.
        #[arg(long, default_value = "engine")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption every prompt against the engine, checkpointing as it goes.
    Caption {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        engine_url: String,
        #[arg(long, default_value = "default-engine")]
        engine_model: String,
        #[arg(long, default_value_t = 16)]
        max_in_flight: usize,
        #[arg(long, default_value_t = 3)]
        max_retries: u32,
        /// Discard previous output instead of resuming from it.
        #[arg(long)]
        restart: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics over captions and annotations.
    Stats {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a stage range against a working directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long, default_value = "ingest")]
        from: String,
        #[arg(long, default_value = "stats")]
        to: String,
        /// Re-execute stages already marked done (and everything after).
        #[arg(long)]
        force: bool,
        /// meta_gpt4v or engine.
        #[arg(long, default_value = "engine")]
        prompt_kind: String,
    },
    /// Start deterministic mock expert and engine servers (for tests
    /// and offline dry runs); stops on ctrl-c.
    Mock {
        /// Only the expert server.
        #[arg(long, conflicts_with = "engine")]
        expert: bool,
        /// Only the engine server.
        #[arg(long, conflicts_with = "expert")]
        engine: bool,
    },
}

fn read_catalog_dir(dir: &Path) -> Result<Vec<ImageRecord>> {
    let shards = catalog::list_shards(dir)
        .with_context(|| format!("listing shards in {}", dir.display()))?;
    let mut records = Vec::new();
    for shard in shards {
        records.extend(
            catalog::read_shard(&shard)
                .with_context(|| format!("reading shard {}", shard.display()))?,
        );
    }
    Ok(records)
}

fn write_catalog_dir(records: &[ImageRecord], dir: &Path, shard_size: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (index, chunk) in records.chunks(shard_size).enumerate() {
        let path = dir.join(catalog::shard_name(index));
        catalog::write_shard(chunk, &path)
            .with_context(|| format!("writing shard {}", path.display()))?;
    }
    Ok(())
}

fn parse_rank(rank: &str) -> Result<SelectRank> {
    match rank {
        "centroid" => Ok(SelectRank::Centroid),
        "resolution" => Ok(SelectRank::Resolution),
        "random" => Ok(SelectRank::Random),
        other => bail!("unknown rank mode {other:?}; expected centroid, resolution, or random"),
    }
}

fn ctrl_c_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let listener = Arc::clone(&flag);
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupt received; letting in-flight requests land");
            listener.store(true, Ordering::SeqCst);
        }
    });
    flag
}

async fn cmd_annotate(
    selected: &Path,
    catalog_dir: &Path,
    expert_url: String,
    max_in_flight: usize,
    out: &Path,
) -> Result<()> {
    let ids: Vec<String> = std::fs::read_to_string(selected)
        .with_context(|| format!("reading {}", selected.display()))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let records = read_catalog_dir(catalog_dir)?;
    let by_id: HashMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();

    let config = PipelineConfig::default();
    let client = Arc::new(ExpertClient::new(expert_url));
    let semaphore = Arc::new(tokio::sync::Semaphore::new(max_in_flight.max(1)));
    let mut handles = Vec::new();
    for (index, id) in ids.iter().enumerate() {
        let record = (*by_id
            .get(id.as_str())
            .with_context(|| format!("selected id {id:?} not found in catalog"))?)
        .clone();
        let client = Arc::clone(&client);
        let semaphore = Arc::clone(&semaphore);
        handles.push(tokio::spawn(async move {
            let _permit = semaphore.acquire_owned().await.expect("semaphore open");
            let result = experts::annotate_image(&client, &record, &ExpertTask::ALL).await;
            (index, record, result)
        }));
    }

    let mut finished = Vec::with_capacity(handles.len());
    for handle in handles {
        finished.push(handle.await.expect("annotate task panicked"));
    }
    finished.sort_by_key(|(index, _, _)| *index);

    let mut lines = String::new();
    let mut warned = 0usize;
    let mut annotated = 0usize;
    for (_, record, result) in finished {
        match result {
            Ok((raw, warnings)) => {
                warned += warnings.len();
                for w in warnings {
                    eprintln!("annotate warning [{}/{}]: {}", w.image_id, w.task, w.detail);
                }
                let bundle = experts::build_bundle(&record, raw, &config);
                let annotation = AnnotationRecord {
                    bundle,
                    uri: record.uri.clone(),
                    width_px: record.width_px,
                    height_px: record.height_px,
                };
                lines.push_str(&serde_json::to_string(&annotation)?);
                lines.push('\n');
                annotated += 1;
            }
            Err(e) => {
                warned += 1;
                eprintln!("annotate failed for {}: {e}", record.id);
            }
        }
    }
    std::fs::write(out, lines).with_context(|| format!("writing {}", out.display()))?;
    println!("annotated {annotated} image(s) ({warned} warning(s)) -> {}", out.display());
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest {
            manifest,
            out,
            shard_size,
        } => {
            let outcome = catalog::ingest_manifest(&manifest)
                .with_context(|| format!("ingesting {}", manifest.display()))?;
            for bad in &outcome.malformed {
                eprintln!("manifest line {}: {}", bad.line, bad.reason);
            }
            if outcome.records.is_empty() {
                bail!("manifest contains no usable records");
            }
            write_catalog_dir(&outcome.records, &out, shard_size.max(1))?;
            println!(
                "ingested {} record(s) ({} malformed skipped) -> {}",
                outcome.records.len(),
                outcome.malformed.len(),
                out.display()
            );
        }
        Command::Filter {
            input,
            out,
            min_short_edge,
        } => {
            let records = read_catalog_dir(&input)?;
            let total = records.len();
            let kept: Vec<ImageRecord> = records
                .into_iter()
                .filter(|r| catalog::filter_resolution(r, min_short_edge))
                .collect();
            if kept.is_empty() {
                bail!("no records meet the {min_short_edge}px short-edge minimum");
            }
            write_catalog_dir(&kept, &out, 10_000)?;
            println!("kept {}/{} record(s) -> {}", kept.len(), total, out.display());
        }
        Command::EmbedIngest { file, catalog: catalog_dir, out } => {
            let ids = read_catalog_dir(&catalog_dir)?
                .into_iter()
                .map(|r| r.id)
                .collect();
            let (store, report) = embedstore::ingest_embeddings(&file, &ids)
                .with_context(|| format!("ingesting embeddings from {}", file.display()))?;
            if !report.rejected_ids.is_empty() {
                eprintln!(
                    "rejected {} embedding(s) absent from the catalog",
                    report.rejected_ids.len()
                );
            }
            embedstore::write_store(&store, &out)?;
            println!(
                "stored {} embedding(s) of dimension {} -> {}",
                store.len(),
                store.dim(),
                out.display()
            );
        }
        Command::Cluster {
            store,
            k,
            seed,
            max_iters,
            tol,
            out,
        } => {
            let store = embedstore::read_store(&store)?;
            let (model, assignments) = curator::kmeans_run(&store, k, seed, max_iters, tol)?;
            curator::write_model(&model, &assignments, &out)?;
            println!(
                "clustered {} vector(s) into k={} in {} iteration(s), objective {:.6} -> {}",
                assignments.len(),
                k,
                model.iterations_run,
                model.final_objective,
                out.display()
            );
        }
        Command::Dedup {
            model,
            store,
            epsilon,
            out,
        } => {
            let store = embedstore::read_store(&store)?;
            let (_, assignments) = curator::read_model(&model)?;
            let decisions = curator::dedup_all(&store, &assignments, epsilon)?;
            curator::write_decisions(&decisions, &out)?;
            let kept = decisions.iter().filter(|d| d.kept).count();
            println!(
                "kept {kept}/{} record(s) at epsilon {epsilon} -> {}",
                decisions.len(),
                out.display()
            );
        }
        Command::Select {
            decisions,
            top_k,
            rank,
            catalog: catalog_dir,
            seed,
            out,
        } => {
            let rank = parse_rank(&rank)?;
            let decisions = curator::read_decisions(&decisions)?;
            let resolutions: HashMap<String, u64> = match &catalog_dir {
                Some(dir) => read_catalog_dir(dir)?
                    .into_iter()
                    .map(|r| (r.id, r.width_px as u64 * r.height_px as u64))
                    .collect(),
                None => {
                    if rank == SelectRank::Resolution {
                        bail!("--rank resolution requires --catalog");
                    }
                    HashMap::new()
                }
            };
            let mut clusters: BTreeMap<u32, Vec<SelectMember>> = BTreeMap::new();
            for d in decisions.iter().filter(|d| d.kept) {
                clusters.entry(d.cluster).or_default().push(SelectMember {
                    image_id: d.id.clone(),
                    centroid_similarity: d.centroid_similarity,
                    resolution_px: resolutions.get(&d.id).copied(),
                });
            }
            let mut listing = String::new();
            let mut count = 0usize;
            for members in clusters.values() {
                for id in curator::select_ranked(members, top_k, rank, seed) {
                    listing.push_str(&id);
                    listing.push('\n');
                    count += 1;
                }
            }
            std::fs::write(&out, listing)?;
            println!("selected {count} record(s) -> {}", out.display());
        }
        Command::Annotate {
            selected,
            catalog: catalog_dir,
            expert_url,
            max_in_flight,
            out,
        } => {
            cmd_annotate(&selected, &catalog_dir, expert_url, max_in_flight, &out).await?;
        }
        Command::Prompt {
            annotations,
            kind,
            out,
        } => {
            let kind: PromptKind = kind.parse().map_err(anyhow::Error::msg)?;
            let records = pipeline::read_annotations(&annotations)?;
            let mut lines = String::new();
            for record in &records {
                let prompt = fusion::assemble(&record.bundle, kind)?;
                let line = PromptLine {
                    image_id: record.bundle.image_id.clone(),
                    kind,
                    prompt: prompt.text,
                    uri: record.uri.clone(),
                };
                lines.push_str(&serde_json::to_string(&line)?);
                lines.push('\n');
            }
            std::fs::write(&out, lines)?;
            println!("assembled {} {kind} prompt(s) -> {}", records.len(), out.display());
        }
        Command::Caption {
            prompts,
            engine_url,
            engine_model,
            max_in_flight,
            max_retries,
            restart,
            out,
        } => {
            let prompt_lines = captioner::read_prompts(&prompts)?;
            let client = Arc::new(
                EngineClient::new(engine_url, engine_model)
                    .with_api_key(std::env::var("DENSEFUSE_API_KEY").ok())
                    .with_retries(max_retries, BackoffPolicy::default()),
            );
            let resume = if restart {
                ResumeMode::Restart
            } else {
                ResumeMode::Resume
            };
            let cancel = ctrl_c_flag();
            let report = captioner::run_batch(
                prompt_lines,
                client,
                max_in_flight.max(1),
                &out,
                resume,
                &cancel,
            )
            .await?;
            println!(
                "captioned {}/{} prompt(s) ({} already complete, {} permanent / {} transient failures, p50 {} ms, p95 {} ms) -> {}",
                report.succeeded,
                report.input_count,
                report.already_complete,
                report.failed_permanent,
                report.failed_transient,
                report.p50_latency_ms,
                report.p95_latency_ms,
                out.display()
            );
            if report.cancelled {
                bail!("caption run interrupted; rerun to resume from the checkpoint");
            }
        }
        Command::Stats {
            captions,
            annotations,
            out,
        } => {
            let caption_records = captioner::read_captions(&captions)?;
            let bundles: Vec<_> = pipeline::read_annotations(&annotations)?
                .into_iter()
                .map(|r| r.bundle)
                .collect();
            let report = stats::aggregate(&caption_records, &bundles, &HeuristicTagger, None)?;
            stats::write_report(&report, &out)?;
            println!(
                "report over {} caption(s): mean {:.1} chars / {:.1} words / {:.1} sentences, ocr coverage {:.3} -> {}",
                report.sample_count,
                report.mean_char_count,
                report.mean_word_count,
                report.mean_sentence_count,
                report.ocr_coverage,
                out.display()
            );
        }
        Command::Run {
            config,
            workdir,
            from,
            to,
            force,
            prompt_kind,
        } => {
            let config = pipeline::load_config(&config)?;
            let opts = RunOptions {
                from: from.parse::<Stage>().map_err(anyhow::Error::msg)?,
                to: to.parse::<Stage>().map_err(anyhow::Error::msg)?,
                force,
                prompt_kind: prompt_kind.parse().map_err(anyhow::Error::msg)?,
            };
            let manifest = pipeline::run_pipeline(&workdir, &config, &opts).await?;
            for stage in Stage::ALL {
                match manifest.state(stage) {
                    pipeline::StageState::Done { records, .. } => {
                        println!("{stage:>12}: done ({records} records)");
                    }
                    pipeline::StageState::Pending => println!("{stage:>12}: pending"),
                }
            }
        }
        Command::Mock { expert, engine } => {
            let both = !expert && !engine;
            let expert_server = if expert || both {
                let server = MockExpert::start().await;
                println!("mock expert listening on {}", server.url());
                Some(server)
            } else {
                None
            };
            let engine_server = if engine || both {
                let server = MockEngine::start().await;
                println!("mock engine listening on {}", server.url());
                Some(server)
            } else {
                None
            };
            tokio::signal::ctrl_c().await?;
            drop(expert_server);
            drop(engine_server);
        }
    }
    Ok(())
}
