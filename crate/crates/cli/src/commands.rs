use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use divgen_core::assembler::{
    assemble, check_completeness, verify_manifest, AssembleOptions, RecordSource, StagingDir, MANIFEST_NAME,
};
use divgen_core::backend::{generate_plan, read_checkpoint, DirectorySink, RunOptions};
use divgen_core::harness::{
    evaluate, extract_features, load_manifest_images, load_test_set, train, Architecture, EvalResult,
    FeatureMatrix, FeatureSource, TrainedModel,
};
use divgen_core::prompt::{expand_composition, read_plan, write_plan, PlanHeader, PlanSummary};
use divgen_core::report::{delta_table, emit, Format, ResultLedger, ResultRow};
use divgen_core::sampler::{
    circle_demo, encode_exemplars, plan_interpolated_requests, InterpolationDefaults, MeanRgbEncoder,
};
use divgen_core::task::composition_for;
use divgen_core::{
    ClassificationTask, DatasetManifest, EmbeddingSet, GenerationRequest, PlanRng, SamplePlan, SampleScheme,
    TrickKind,
};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{CliError, Exit};
use crate::Command;

const PLAN_NAME: &str = "plan.jsonl";
const CHECKPOINT_NAME: &str = "checkpoint.txt";

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Plan { config, trick, out, dry_run } => plan(config.config.as_deref(), trick, out, dry_run),
        Command::Synthesize { config, trick, plan, dry_run } => {
            synthesize(config.config.as_deref(), trick, plan, dry_run)
        }
        Command::Assemble { config, staging, out, dry_run } => {
            assemble_cmd(config.config.as_deref(), staging, out, dry_run)
        }
        Command::Verify { manifest, json } => verify(&manifest, json),
        Command::Train { config, arch, manifest, epochs, out, dry_run } => {
            train_cmd(config.config.as_deref(), arch, manifest, epochs, out, dry_run)
        }
        Command::Evaluate { model, test, config, ledger, out, dry_run } => {
            evaluate_cmd(&model, test, config.config.as_deref(), ledger, out, dry_run)
        }
        Command::Report { ledger, dataset, format, out } => report(&ledger, dataset, &format, out),
        Command::DemoSampling { n, draws, radius, seed, out } => demo_sampling(n, draws, radius, seed, out),
        Command::InterpPlan { embeddings, scheme, k, class_label, count, config, out, dry_run } => interp_plan(
            &embeddings,
            &scheme,
            k,
            &class_label,
            count,
            config.config.as_deref(),
            out,
            dry_run,
        ),
        Command::Features { model, real, synthetic, out } => features(&model, real, synthetic, &out),
    }
}

fn parse_trick(arg: Option<String>, cfg: &PipelineConfig) -> Result<TrickKind, CliError> {
    match arg {
        Some(s) => s.parse().map_err(|e: divgen_core::task::TaskError| CliError::usage(e.to_string())),
        None => Ok(cfg.tricks.trick),
    }
}

fn build_plan(
    cfg: &PipelineConfig,
    task: &ClassificationTask,
    trick: TrickKind,
) -> Result<(PlanHeader, Vec<GenerationRequest>), CliError> {
    let parts = composition_for(trick, &task.name, Some(&cfg.tricks.best_tricks));
    let rng = PlanRng::new(cfg.master_seed, &task.name, trick);
    let plan = expand_composition(task, &parts, &rng, &cfg.expand_options(task))?;
    let header = PlanHeader {
        task_name: task.name.clone(),
        trick_composition: trick.as_str().into(),
        master_seed: cfg.master_seed,
        tool_version: divgen_core::TOOL_VERSION.into(),
        config_digest: Some(cfg.digest()),
    };
    Ok((header, plan))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        None => Ok(()),
    }
}

/// Write a plan unless an identical file is already there.
fn store_plan(path: &Path, header: &PlanHeader, plan: &[GenerationRequest]) -> Result<bool, CliError> {
    if path.exists() {
        if let Ok((h, p)) = read_plan(path) {
            if &h == header && p == plan {
                return Ok(false);
            }
        }
    }
    ensure_parent(path)?;
    write_plan(path, header, plan)?;
    Ok(true)
}

fn print_summary(plan: &[GenerationRequest]) {
    let s = PlanSummary::of(plan);
    println!("{}", s.headline());
    for (t, n) in &s.per_trick {
        println!("  trick {t}: {n}");
    }
    for (c, n) in &s.per_class {
        println!("  class {c}: {n}");
    }
    for (d, n) in &s.per_domain {
        println!("  domain {d}: {n}");
    }
}

fn plan(config: Option<&Path>, trick: Option<String>, out: Option<PathBuf>, dry_run: bool) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(config)?;
    let task = cfg.task()?;
    let trick = parse_trick(trick, &cfg)?;
    let (header, plan) = build_plan(&cfg, &task, trick)?;
    print_summary(&plan);
    let out = out.unwrap_or_else(|| cfg.paths.plan());
    if dry_run {
        log::info!("dry run: plan not written to {}", out.display());
    } else if store_plan(&out, &header, &plan)? {
        log::info!("wrote {}", out.display());
    } else {
        log::info!("{} already up to date", out.display());
    }
    Ok(())
}

fn synthesize(
    config: Option<&Path>,
    trick: Option<String>,
    plan_path: Option<PathBuf>,
    dry_run: bool,
) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(config)?;
    let (header, plan) = match plan_path {
        Some(p) => read_plan(&p)?,
        None => build_plan(&cfg, &cfg.task()?, parse_trick(trick, &cfg)?)?,
    };
    let staging = cfg.paths.staging();
    let staged_plan = staging.join(PLAN_NAME);
    if staged_plan.exists() {
        let (h, p) = read_plan(&staged_plan)?;
        if h.task_name != header.task_name || h.trick_composition != header.trick_composition || p != plan {
            return Err(CliError::new(
                "StagingConflict",
                Exit::Validation,
                format!("{} holds a different plan; use another paths.staging", staging.display()),
            ));
        }
    }
    let checkpoint = staging.join(CHECKPOINT_NAME);
    let done = read_checkpoint(&checkpoint).map_err(|e| CliError::io(&checkpoint, e))?;
    let remaining = plan.iter().filter(|r| !done.contains(&r.request_id)).count();
    println!("{} requests, {} already staged, {} to generate", plan.len(), plan.len() - remaining, remaining);
    if dry_run {
        return Ok(());
    }
    if !staged_plan.exists() {
        fs::create_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        write_plan(&staged_plan, &header, &plan)?;
    }
    if remaining == 0 {
        return Ok(());
    }
    let backend = cfg.backend.build()?;
    let mut sink = DirectorySink::open(&staging).map_err(|e| CliError::io(&staging, e))?;
    let options = RunOptions {
        max_in_flight: cfg.backend.max_in_flight,
        checkpoint: Some(checkpoint),
        ..RunOptions::default()
    };
    let summary = generate_plan(&plan, backend.as_ref(), &mut sink, &options)?;
    println!(
        "generated {}, skipped {}, failed {}",
        summary.generated,
        summary.skipped,
        summary.failed.len()
    );
    for (id, e) in &summary.failed {
        log::warn!("request {id}: {e}");
    }
    if !summary.failed.is_empty() {
        log::warn!("re-run synthesize to retry failed requests");
    }
    Ok(())
}

fn assemble_cmd(
    config: Option<&Path>,
    staging: Option<PathBuf>,
    out: Option<PathBuf>,
    dry_run: bool,
) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(config)?;
    let task = cfg.task()?;
    let staging = staging.unwrap_or_else(|| cfg.paths.staging());
    let (header, plan) = read_plan(&staging.join(PLAN_NAME))?;
    if header.task_name != task.name {
        return Err(CliError::new(
            "PlanTaskMismatch",
            Exit::Validation,
            format!("staged plan is for task {:?}, config task is {:?}", header.task_name, task.name),
        ));
    }
    let source = StagingDir::open(&staging)?;
    if dry_run {
        check_completeness(&plan, &source.ids()?)?;
        println!("{} staged records cover the plan", plan.len());
        return Ok(());
    }
    let root = out.unwrap_or_else(|| cfg.paths.dataset());
    fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
    let mut options = AssembleOptions::new(&root, cfg.assembler.anti_alias);
    options.master_seed = header.master_seed;
    options.trick_composition = header.trick_composition.clone();
    options.config_digest = Some(cfg.digest());
    if let Some(w) = cfg.assembler.workers {
        options.workers = w;
    }
    let manifest = assemble(&plan, &source, &task, &options)?;
    println!(
        "assembled {} images into {} (manifest digest {})",
        manifest.entries.len(),
        root.display(),
        manifest.digest()
    );
    Ok(())
}

fn verify(manifest: &Path, json: bool) -> Result<(), CliError> {
    let report = verify_manifest(manifest);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for v in &report.violations {
            println!("{v}");
        }
    }
    if report.is_clean() {
        if !json {
            println!("clean: {} entries verified", report.entries_checked);
        }
        Ok(())
    } else {
        Err(CliError::new(
            "IntegrityViolation",
            Exit::Integrity,
            format!("{} violations in {}", report.violations.len(), manifest.display()),
        ))
    }
}

fn train_cmd(
    config: Option<&Path>,
    arch: Option<String>,
    manifest_path: Option<PathBuf>,
    epochs: Option<usize>,
    out: Option<PathBuf>,
    dry_run: bool,
) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(config)?;
    let task = cfg.task()?;
    let mut run = cfg.train.clone();
    if let Some(a) = arch {
        run.architecture = a;
    }
    if let Some(e) = epochs {
        run.epochs = e;
    }
    let architecture: Architecture = run.architecture.parse()?;
    run.architecture = architecture.as_str().into();
    let manifest_path = manifest_path.unwrap_or_else(|| cfg.paths.dataset().join(MANIFEST_NAME));
    let manifest = DatasetManifest::read(&manifest_path)
        .map_err(|e| CliError::new("ManifestInvalid", Exit::Integrity, format!("{}: {e}", manifest_path.display())))?;
    let out = out.unwrap_or_else(|| {
        cfg.paths.models().join(format!(
            "{}_{}_{}.safetensors",
            manifest.header.task_name, manifest.header.trick_composition, architecture
        ))
    });
    let wd = run.resolved_weight_decay(task.style);
    println!(
        "{architecture}: {} images, {} epochs, batch {}, lr {:e}, weight decay {wd}",
        manifest.entries.len(),
        run.epochs,
        run.batch_size,
        run.learning_rate
    );
    let digest = cfg.digest();
    if out.exists() {
        if let Ok(existing) = TrainedModel::load(&out) {
            if existing.meta.manifest_digest == manifest.digest()
                && existing.meta.train_config == run
                && existing.meta.config_digest.as_deref() == Some(digest.as_str())
            {
                println!("{} is up to date", out.display());
                return Ok(());
            }
        }
    }
    if dry_run {
        log::info!("dry run: would write {}", out.display());
        return Ok(());
    }
    let model = train(&run, &manifest_path, task.style, Some(digest))?;
    ensure_parent(&out)?;
    model.save(&out)?;
    if let Some(last) = model.meta.history.last() {
        println!("final epoch {}: loss {:.4}, train accuracy {:.4}", last.epoch, last.loss, last.accuracy);
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    result: &'a EvalResult,
    model: String,
    manifest_digest: &'a str,
    config_digest: Option<&'a str>,
}

fn task_of(model: &TrainedModel) -> ClassificationTask {
    ClassificationTask {
        name: model.meta.task_name.clone(),
        class_labels: model.meta.class_labels.clone(),
        native_image_size: model.meta.native_size,
        per_class_count: 1,
        test_set_ref: None,
        style: Default::default(),
    }
}

fn evaluate_cmd(
    model_path: &Path,
    test: Option<PathBuf>,
    config: Option<&Path>,
    ledger: Option<PathBuf>,
    out: Option<PathBuf>,
    dry_run: bool,
) -> Result<(), CliError> {
    let test = match (test, config) {
        (Some(t), _) => t,
        (None, Some(c)) => PipelineConfig::load(Some(c))?
            .task()?
            .test_set_ref
            .map(PathBuf::from)
            .ok_or_else(|| CliError::usage("config task has no test_set_ref; pass --test"))?,
        (None, None) => return Err(CliError::usage("pass --test or a --config with task.test_set_ref")),
    };
    let model = TrainedModel::load(model_path)?;
    let data = load_test_set(&test, &task_of(&model))?;
    let result = evaluate(&model, &data, &model.meta.task_name)?;
    println!(
        "top-1 {:.2}% on {} images ({} / {} / {})",
        result.top1_accuracy * 100.0,
        result.n_test,
        result.task,
        result.architecture,
        result.trick_composition
    );
    if dry_run {
        return Ok(());
    }
    if let Some(out) = out {
        let doc = EvalOutput {
            result: &result,
            model: model_path.display().to_string(),
            manifest_digest: &model.meta.manifest_digest,
            config_digest: model.meta.config_digest.as_deref(),
        };
        ensure_parent(&out)?;
        let text = serde_json::to_string_pretty(&doc).expect("result serializes");
        fs::write(&out, text + "\n").map_err(|e| CliError::io(&out, e))?;
    }
    if let Some(path) = ledger {
        let mut l = ResultLedger::load_or_default(&path)?;
        l.record(ResultRow::from_eval(&result));
        ensure_parent(&path)?;
        l.save(&path)?;
        log::info!("recorded into {}", path.display());
    }
    Ok(())
}

fn emit_to(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(p) => {
            ensure_parent(p)?;
            fs::write(p, text).map_err(|e| CliError::io(p, e))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

fn report(ledger_path: &Path, dataset: Option<String>, format: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    let format: Format = format.parse().map_err(CliError::usage)?;
    let mut ledger = ResultLedger::load(ledger_path)?;
    let text = match format {
        Format::Markdown => {
            let datasets: Vec<String> = match dataset {
                Some(d) => vec![d],
                None => {
                    let mut all: Vec<String> = ledger.rows.iter().map(|r| r.dataset.clone()).collect();
                    all.sort();
                    all.dedup();
                    all
                }
            };
            let mut text = String::new();
            for d in datasets {
                text.push_str(&delta_table(&ledger, &d)?.to_markdown());
                text.push('\n');
            }
            text
        }
        f => {
            if let Some(d) = dataset {
                ledger.rows.retain(|r| r.dataset == d);
            }
            emit(&ledger, f)
        }
    };
    emit_to(&text, out.as_deref())
}

fn demo_sampling(n: usize, draws: usize, radius: f64, seed: u64, out: Option<PathBuf>) -> Result<(), CliError> {
    let report = circle_demo(n, radius, draws, seed)?;
    for s in &report.schemes {
        let name = match s.k {
            Some(k) => format!("{}(k={k})", s.scheme),
            None => s.scheme.to_string(),
        };
        println!(
            "{name}: mean radius {:.4}, mean pairwise distance {:.4}",
            s.mean_radius, s.mean_pairwise_distance
        );
    }
    let full = report.stats(SampleScheme::FullHull).map(|s| s.mean_radius);
    let sub = report.stats(SampleScheme::KSubset).map(|s| s.mean_radius);
    if let (Some(f), Some(k)) = (full, sub) {
        println!("k_subset mean radius exceeds full_hull by {:.4}", k - f);
    }
    if let Some(out) = out {
        ensure_parent(&out)?;
        let file = fs::File::create(&out).map_err(|e| CliError::io(&out, e))?;
        report
            .write_csv(std::io::BufWriter::new(file))
            .map_err(|e| CliError::io(&out, e))?;
        log::info!("wrote {}", out.display());
    }
    Ok(())
}

fn load_embeddings(path: &Path) -> Result<EmbeddingSet, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let img = image_open(&f)?;
            images.push((f.file_name().unwrap_or_default().to_string_lossy().into_owned(), img));
        }
        Ok(encode_exemplars(&images, &MeanRgbEncoder)?)
    } else {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let set: EmbeddingSet = serde_json::from_str(&text)
            .map_err(|e| CliError::new("SamplerInvalid", Exit::Validation, format!("{}: {e}", path.display())))?;
        set.validate()?;
        Ok(set)
    }
}

fn image_open(path: &Path) -> Result<image::RgbImage, CliError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| CliError::new("SamplerInvalid", Exit::Validation, format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn interp_plan(
    embeddings: &Path,
    scheme: &str,
    k: Option<usize>,
    class_label: &str,
    count: Option<usize>,
    config: Option<&Path>,
    out: Option<PathBuf>,
    dry_run: bool,
) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(config)?;
    let task = cfg.task()?;
    let scheme_kind: SampleScheme = scheme.parse().map_err(|e: divgen_core::sampler::SamplerError| CliError::usage(e.to_string()))?;
    let class_index = task.class_index(class_label).ok_or_else(|| {
        CliError::new("UnknownClass", Exit::Validation, format!("{class_label:?} is not a class of task {}", task.name))
    })?;
    let set = load_embeddings(embeddings)?;
    let count = count.or(cfg.sampler.count).unwrap_or(task.per_class_count as usize);
    let sample_plan = match scheme_kind {
        SampleScheme::FullHull => SamplePlan::full_hull(count, cfg.sampler.rng_seed),
        SampleScheme::KSubset => {
            let k = k.unwrap_or(if scheme.eq_ignore_ascii_case("k3") { 3 } else { cfg.sampler.k });
            SamplePlan::k_subset(k, count, cfg.sampler.rng_seed)
        }
    };
    let mut defaults = InterpolationDefaults::new(cfg.master_seed, &task.name, class_index);
    defaults.guidance_scale = cfg.tricks.default_guidance;
    defaults.ddim_steps = cfg.tricks.ddim_steps;
    defaults.width = cfg.tricks.generation_size.width;
    defaults.height = cfg.tricks.generation_size.height;
    let planned = plan_interpolated_requests(&set, &sample_plan, class_label, &defaults)?;
    let label = match sample_plan.scheme {
        SampleScheme::FullHull => "interpolated_full_hull".to_string(),
        SampleScheme::KSubset => format!("interpolated_k_subset_{}", sample_plan.k),
    };
    println!(
        "{} requests for class {class_label} from {} exemplars ({label})",
        planned.requests.len(),
        set.len()
    );
    let out = out.unwrap_or_else(|| cfg.paths.work_dir.join(format!("interp_{class_label}_{label}.jsonl")));
    if dry_run {
        return Ok(());
    }
    let header = PlanHeader {
        task_name: task.name.clone(),
        trick_composition: label,
        master_seed: cfg.master_seed,
        tool_version: divgen_core::TOOL_VERSION.into(),
        config_digest: Some(cfg.digest()),
    };
    store_plan(&out, &header, &planned.requests)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn features(model_path: &Path, real: Option<PathBuf>, synthetic: Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    if real.is_none() && synthetic.is_none() {
        return Err(CliError::usage("pass --real, --synthetic or both"));
    }
    let model = TrainedModel::load(model_path)?;
    let mut matrix = FeatureMatrix::default();
    if let Some(r) = real {
        let data = load_test_set(&r, &task_of(&model))?;
        matrix.append(extract_features(&model, &data, FeatureSource::Real)?);
    }
    if let Some(s) = synthetic {
        let (_, data) = load_manifest_images(&s)?;
        matrix.append(extract_features(&model, &data, FeatureSource::Synthetic)?);
    }
    ensure_parent(out)?;
    matrix.write_csv(out)?;
    println!("wrote {} rows of dimension {} to {}", matrix.rows.len(), matrix.dim, out.display());
    Ok(())
}
