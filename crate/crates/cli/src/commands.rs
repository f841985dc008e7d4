use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use manner_align::aligner::{AlignError, Checkpoint, RewriteStatus, RunState};
use manner_align::assessment::{
    build_session, serve, write_atomic, AssessError, AssessmentService, AssessmentSession, PoolItem, SessionSizes,
};
use manner_align::backend::{Backend, BackendKind, ReferenceModel, RemoteChatBackend};
use manner_align::corpus::{
    classify_format, parse_dataset, partition_counts, reassemble, serialize_dataset, soft_rounds, split_rounds,
    RoundKey, Speaker, TagOrigin,
};
use manner_align::gap::{corpus_gap_report, GapError, SplitSpec};
use manner_align::{
    AlignConfig, Aligner, BackendDescriptor, FormatClass, InstructionRecord, PromptSet, ReferenceBackend,
    RewriteVariant, TagMap, WorkerPool,
};
use serde_json::{json, Value};

use crate::config::{layer, sampling, FileConfig, Provenance, RunConfig};
use crate::{
    AlignArgs, AssessCommand, AssessExportArgs, BuildArgs, Cli, Command, ExportArgs, Failure,
    PartitionArgs, PplArgs, ServeArgs, StatsArgs,
};

type Result<T, E = Failure> = std::result::Result<T, E>;

pub(crate) fn dispatch(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let prompts_dir = cli.prompts.or_else(|| file.get("prompts", "dir").map(PathBuf::from));
    let ctx = Ctx { file, prompts_dir };
    match cli.command {
        Command::Partition(a) => partition(&ctx, a),
        Command::Align(a) => align(&ctx, a),
        Command::Stats(a) => stats(&ctx, a),
        Command::Ppl(a) => ppl(&ctx, a),
        Command::Assess(AssessCommand::Build(a)) => assess_build(&ctx, a),
        Command::Assess(AssessCommand::Serve(a)) => assess_serve(&ctx, a),
        Command::Assess(AssessCommand::Export(a)) => assess_export(&ctx, a),
        Command::ExportTrainset(a) => export_trainset(&ctx, a),
    }
}

struct Ctx {
    file: FileConfig,
    prompts_dir: Option<PathBuf>,
}

impl Ctx {
    fn prompts(&self) -> Result<PromptSet> {
        match &self.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir).map_err(Failure::data),
            None => Ok(PromptSet::builtin()),
        }
    }

    fn base_config(&self, command: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(command);
        cfg.paths.prompts = self.prompts_dir.clone();
        cfg.seed = self.file.parsed("run", "seed")?.unwrap_or(0);
        Ok(cfg)
    }

    fn backend_descriptor(&self, flag: Option<BackendDescriptor>) -> Result<BackendDescriptor> {
        let d = layer(flag, self.file.parsed("backend", "descriptor")?, BackendDescriptor::reference("reference"));
        d.validate().map_err(Failure::Usage)?;
        Ok(d)
    }

    fn tag_map_path(&self, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.file.get("align", "tag_map").map(PathBuf::from))
    }
}

fn data_ctx<T, E>(r: std::result::Result<T, E>, what: impl FnOnce() -> String) -> Result<T>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.with_context(what).map_err(Failure::Data)
}

/// `FILE=TAG` flags and `[sources]` entries, keyed by path or stem.
fn source_tag_for(path: &Path, flags: &[String], file: &FileConfig) -> Result<String> {
    let mut tags = file.source_tags();
    for f in flags {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--source-tag expects FILE=TAG, got `{f}`")))?;
        tags.insert(k.to_string(), v.to_string());
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    let full = path.to_string_lossy();
    Ok(tags.get(full.as_ref()).or_else(|| tags.get(&stem)).cloned().unwrap_or(stem))
}

fn load_records(paths: &[PathBuf], tag_flags: &[String], file: &FileConfig) -> Result<Vec<InstructionRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for path in paths {
        let raw = data_ctx(std::fs::read(path), || format!("reading {}", path.display()))?;
        let tag = source_tag_for(path, tag_flags, file)?;
        let recs = data_ctx(parse_dataset(&raw, &tag), || format!("parsing {}", path.display()))?;
        for r in recs {
            if !seen.insert(r.id.clone()) {
                return Err(Failure::data(format!("duplicate id `{}` in {}", r.id, path.display())));
            }
            records.push(r);
        }
    }
    Ok(records)
}

fn load_tag_map(path: Option<&Path>) -> Result<TagMap> {
    match path {
        None => Ok(TagMap::llava_default()),
        Some(p) => {
            let text = data_ctx(std::fs::read_to_string(p), || format!("reading {}", p.display()))?;
            data_ctx(TagMap::parse(&text), || format!("parsing tag map {}", p.display()))
        }
    }
}

fn build_backend(d: &BackendDescriptor) -> Result<Box<dyn Backend>> {
    match d.kind {
        BackendKind::Reference if d.model_name == "reference" => Ok(Box::new(ReferenceBackend::default())),
        BackendKind::Reference => {
            let text = data_ctx(std::fs::read_to_string(&d.model_name), || format!("reading model {}", d.model_name))?;
            let model = data_ctx(ReferenceModel::parse(&text), || format!("parsing model {}", d.model_name))?;
            Ok(Box::new(ReferenceBackend::new(d.to_string(), model)))
        }
        BackendKind::RemoteChat => Ok(Box::new(RemoteChatBackend::new(d.clone()).map_err(Failure::backend)?)),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    data_ctx(write_atomic(path, bytes), || format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}

/// Datasets keep their schema, so provenance goes next to them.
fn write_dataset(path: &Path, records: &[InstructionRecord], pretty: bool, prov: &Provenance) -> Result<()> {
    write_file(path, serialize_dataset(records, pretty).as_bytes())?;
    write_json(&sidecar(path), &json!({"provenance": prov, "dataset": path.file_name().map(|n| n.to_string_lossy())}))
}

fn partition(ctx: &Ctx, a: PartitionArgs) -> Result<()> {
    let mut cfg = ctx.base_config("partition")?;
    cfg.paths.inputs = a.input.inputs.clone();
    cfg.paths.tag_map = ctx.tag_map_path(a.input.tag_map.clone());
    cfg.paths.output = Some(a.out_dir.join("counts.txt"));
    cfg.params.insert("source_tags".into(), json!(a.input.source_tags));
    cfg.check_paths()?;

    let records = load_records(&a.input.inputs, &a.input.source_tags, &ctx.file)?;
    let map = load_tag_map(cfg.paths.tag_map.as_deref())?;
    let prov = cfg.provenance(&ctx.prompts()?, "none");

    let mut by_class: BTreeMap<&str, Vec<InstructionRecord>> = BTreeMap::new();
    let mut heuristic_ids = Vec::new();
    for r in &records {
        let c = classify_format(r, &map);
        if c.heuristic {
            heuristic_ids.push(r.id.clone());
        }
        // per-class files lose the input file name, so the tag must travel with the record
        let mut r = r.clone();
        r.tag_origin = TagOrigin::Record;
        by_class.entry(c.class.name()).or_default().push(r);
    }
    for class in FormatClass::ALL {
        let recs = by_class.remove(class.name()).unwrap_or_default();
        write_dataset(&a.out_dir.join(format!("{}.json", class.name())), &recs, a.layout.pretty(), &prov)?;
    }
    let counts = partition_counts(&records, &map);
    let table = format!("{}{}heuristic={}\n", prov.comment_header(), counts.render_table(), counts.heuristic);
    write_file(&a.out_dir.join("counts.txt"), table.as_bytes())?;
    write_json(
        &a.out_dir.join("counts.json"),
        &json!({"provenance": prov, "counts": counts, "heuristic_ids": heuristic_ids}),
    )?;
    print!("{}", counts.render_table());
    Ok(())
}

fn align(ctx: &Ctx, a: AlignArgs) -> Result<()> {
    let f = &ctx.file;
    let mut cfg = ctx.base_config("align")?;
    cfg.backend = ctx.backend_descriptor(a.backend)?;
    let s = a.sampling;
    cfg.sampling = sampling(f, s.profile, s.temperature, s.top_p, s.top_k, s.max_length)?;
    cfg.variant = layer(a.variant, f.parsed::<RewriteVariant>("align", "variant")?, RewriteVariant::No1);
    cfg.concurrency = layer(a.concurrency, f.parsed("align", "concurrency")?, 1);
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.paths.inputs = a.input.inputs.clone();
    cfg.paths.tag_map = ctx.tag_map_path(a.input.tag_map.clone());
    cfg.paths.checkpoint = a.checkpoint.or_else(|| f.get("align", "checkpoint").map(PathBuf::from));
    cfg.paths.output = Some(a.out.clone());
    cfg.params.insert("source_tags".into(), json!(a.input.source_tags));
    cfg.params.insert("pretty".into(), json!(a.layout.pretty()));
    if a.max_rounds.is_some() && cfg.paths.checkpoint.is_none() {
        return Err(Failure::Usage("--max-rounds needs a checkpoint".into()));
    }
    cfg.check_paths()?;

    let records = load_records(&a.input.inputs, &a.input.source_tags, f)?;
    let map = load_tag_map(cfg.paths.tag_map.as_deref())?;
    let prompts = ctx.prompts()?;
    let backend = build_backend(&cfg.backend)?;
    let align_cfg = AlignConfig {
        rewrite: cfg.sampling,
        review: cfg.sampling.greedy(),
        variant: cfg.variant,
        concurrency: cfg.concurrency,
        ..AlignConfig::default()
    };
    let aligner = Aligner::new(&*backend, prompts.clone(), align_cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    let align_err = |e: AlignError| match e {
        AlignError::Config(m) => Failure::Usage(m),
        other => Failure::data(other),
    };

    let mut checkpoint = match &cfg.paths.checkpoint {
        Some(p) => Some(aligner.open_checkpoint(p, &records, &map).map_err(align_err)?),
        None => None,
    };
    let state = aligner.run(&records, &map, checkpoint.as_mut(), a.max_rounds).map_err(align_err)?;
    let aligned = match state {
        RunState::Complete(c) => c,
        RunState::Interrupted { processed, remaining } => {
            println!("stopped after {processed} rounds, {remaining} remaining; rerun with the same checkpoint to resume");
            return Ok(());
        }
    };

    let prov = cfg.provenance(&prompts, backend.name());
    write_dataset(&a.out, &aligned.records, a.layout.pretty(), &prov)?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".report.json");
        a.out.with_file_name(name)
    });
    write_json(
        &report_path,
        &json!({
            "provenance": prov,
            "run_hash": aligner.config_hash(&soft_rounds(&records, &map)),
            "report": aligned.report,
            "failure_rate": aligned.report.failure_rate_display(),
            "unqualified_rate": aligned.report.unqualified_rate_display(),
        }),
    )?;
    print!("{}", aligned.report.render_text());

    let backend_failures = aligned.outcomes.iter().filter(|o| o.rewrite_status == RewriteStatus::BackendError).count();
    if backend_failures > 0 && backend_failures == aligned.outcomes.len() {
        return Err(Failure::backend(format!("all {backend_failures} rounds failed with backend errors")));
    }
    Ok(())
}

fn stats(ctx: &Ctx, a: StatsArgs) -> Result<()> {
    let mut cfg = ctx.base_config("stats")?;
    cfg.paths.inputs = vec![a.checkpoint.clone()];
    cfg.paths.output = a.out.clone();
    cfg.check_paths()?;
    let (header, outcomes) = Checkpoint::read(&a.checkpoint).map_err(Failure::data)?;
    let report = manner_align::aligner::compute_stats(&outcomes);
    print!("{}", report.render_text());
    if let Some(out) = &a.out {
        let prov = cfg.provenance(&ctx.prompts()?, &format!("checkpoint:{}", header.run_id));
        write_json(
            out,
            &json!({
                "provenance": prov,
                "checkpoint": header,
                "report": report,
                "failure_rate": report.failure_rate_display(),
                "unqualified_rate": report.unqualified_rate_display(),
                "table": report.render_text(),
            }),
        )?;
    }
    Ok(())
}

fn ppl(ctx: &Ctx, a: PplArgs) -> Result<()> {
    let f = &ctx.file;
    let mut cfg = ctx.base_config("ppl")?;
    cfg.backend = ctx.backend_descriptor(a.backend)?;
    cfg.concurrency = layer(a.concurrency, f.parsed("align", "concurrency")?, 1);
    let eval_count = layer(a.eval_count, f.parsed("ppl", "eval_count")?, SplitSpec::DEFAULT_EVAL_COUNT);
    cfg.params.insert("eval_count".into(), json!(eval_count));
    cfg.params.insert("source_tags".into(), json!(a.source_tags));
    cfg.paths.inputs = a.inputs.clone();
    cfg.paths.output = Some(a.out.clone());
    if cfg.concurrency == 0 {
        return Err(Failure::Usage("concurrency must be >= 1".into()));
    }
    cfg.check_paths()?;

    let records = load_records(&a.inputs, &a.source_tags, f)?;
    let backend = build_backend(&cfg.backend)?;
    let pool = WorkerPool::new(cfg.concurrency);
    let report = corpus_gap_report(&records, &*backend, SplitSpec { eval_count }, &pool).map_err(|e| match e {
        GapError::Scoring { .. } => Failure::backend(e),
        other => Failure::data(other),
    })?;
    let prov = cfg.provenance(&ctx.prompts()?, backend.name());
    write_json(&a.out, &json!({"provenance": prov, "report": report}))?;
    println!(
        "corpus_ppl={:.6} tokens={} rounds={} ({}, {})",
        report.corpus_ppl,
        report.token_total,
        report.per_round.len(),
        report.metric,
        report.aggregation
    );
    Ok(())
}

fn read_pool(path: &Path) -> Result<Vec<PoolItem>> {
    let raw = data_ctx(std::fs::read(path), || format!("reading {}", path.display()))?;
    data_ctx(serde_json::from_slice(&raw), || format!("parsing pool {}", path.display()))
}

fn assess_err(e: AssessError) -> Failure {
    Failure::data(e)
}

fn assess_build(ctx: &Ctx, a: BuildArgs) -> Result<()> {
    let mut cfg = ctx.base_config("assess build")?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.paths.inputs = vec![a.outcomes.clone(), a.llm_pool.clone(), a.dataset_pool.clone()];
    cfg.paths.output = Some(a.out.clone());
    cfg.params.insert("anchors".into(), json!(a.anchors));
    cfg.params.insert("eval_samples".into(), json!(a.eval_samples));
    cfg.params.insert("model_label".into(), json!(a.model_label));
    cfg.check_paths()?;

    let (_, outcomes) = Checkpoint::read(&a.outcomes).map_err(Failure::data)?;
    let sizes = SessionSizes { llm_anchors: a.anchors, dataset_anchors: a.anchors, eval_samples: a.eval_samples };
    let mut session =
        build_session(&read_pool(&a.llm_pool)?, &read_pool(&a.dataset_pool)?, &outcomes, cfg.seed, sizes)
            .map_err(assess_err)?;
    session.model_label = a.model_label;
    session.save(&a.out).map_err(assess_err)?;
    let prov = cfg.provenance(&ctx.prompts()?, "none");
    write_json(&sidecar(&a.out), &json!({"provenance": prov, "session_id": session.session_id}))?;
    println!("session {} with {} samples written to {}", session.session_id, session.eval_samples.len(), a.out.display());
    Ok(())
}

fn assess_serve(_ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let service = Arc::new(AssessmentService::new());
    for path in &a.sessions {
        let session = AssessmentSession::load(path).map_err(assess_err)?;
        println!("session {} ({} samples)", session.session_id, session.eval_samples.len());
        service.insert(session, Some(path.clone()));
    }
    let addr = format!("{}:{}", a.host, a.port);
    let handle = data_ctx(serve(service, &addr), || format!("binding {addr}"))?;
    println!("listening on http://{}", handle.addr());
    let _ = std::io::stdout().flush();
    handle.join();
    Ok(())
}

fn assess_export(ctx: &Ctx, a: AssessExportArgs) -> Result<()> {
    let mut cfg = ctx.base_config("assess export")?;
    cfg.paths.inputs = vec![a.session.clone()];
    cfg.paths.output = Some(a.out.clone());
    cfg.params.insert("partial".into(), json!(a.partial));
    cfg.check_paths()?;
    let session = AssessmentSession::load(&a.session).map_err(assess_err)?;
    cfg.seed = session.seed;
    let agg = session.aggregate(a.partial).map_err(assess_err)?;
    let label = if session.model_label.is_empty() { "model" } else { session.model_label.as_str() };
    let table = agg.render_text(label);
    let prov = cfg.provenance(&ctx.prompts()?, "none");
    write_json(
        &a.out,
        &json!({"provenance": prov, "session_id": session.session_id, "model": label, "aggregate": agg, "table": table}),
    )?;
    print!("{table}");
    Ok(())
}

fn human_turns(r: &InstructionRecord) -> Vec<&str> {
    r.turns.iter().filter(|t| t.speaker == Speaker::Human).map(|t| t.text.as_str()).collect()
}

fn export_trainset(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    let mut cfg = ctx.base_config("export-trainset")?;
    cfg.paths.inputs = a.input.inputs.iter().chain(&a.aligned).cloned().collect();
    cfg.paths.tag_map = ctx.tag_map_path(a.input.tag_map.clone());
    cfg.paths.output = Some(a.out.clone());
    cfg.params.insert("source_tags".into(), json!(a.input.source_tags));
    cfg.params.insert("pretty".into(), json!(a.layout.pretty()));
    cfg.check_paths()?;

    let originals = load_records(&a.input.inputs, &a.input.source_tags, &ctx.file)?;
    let map = load_tag_map(cfg.paths.tag_map.as_deref())?;
    let aligned = load_records(&a.aligned, &[], &FileConfig::default())?;
    let by_id: HashMap<&str, &InstructionRecord> = originals.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut replacements = BTreeMap::new();
    for rec in &aligned {
        let orig = by_id
            .get(rec.id.as_str())
            .ok_or_else(|| Failure::data(format!("aligned record `{}` is not in the inputs", rec.id)))?;
        if human_turns(orig) != human_turns(rec) || orig.image_ref != rec.image_ref {
            return Err(Failure::data(format!("aligned record `{}` does not match its original's questions", rec.id)));
        }
        let soft = classify_format(orig, &map).class.is_soft();
        for (before, after) in split_rounds(orig).into_iter().zip(split_rounds(rec)) {
            if before.answer == after.answer {
                continue;
            }
            if !soft {
                return Err(Failure::data(format!("aligned file changes non-soft record `{}`", rec.id)));
            }
            replacements.insert(RoundKey::new(rec.id.clone(), before.round_index), after.answer);
        }
    }
    let merged = reassemble(&originals, &map, &replacements).map_err(Failure::data)?;
    let prov = cfg.provenance(&ctx.prompts()?, "none");
    write_dataset(&a.out, &merged, a.layout.pretty(), &prov)?;
    let counts = partition_counts(&originals, &map);
    println!(
        "{} records ({} soft, {} hard, {} text-only), {} answers replaced",
        merged.len(),
        counts.soft,
        counts.hard,
        counts.text_only,
        replacements.len()
    );
    Ok(())
}
