//! Subcommand implementations: each one composes library operations and
//! writes its run manifest next to its outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use catreid::augment::Augmenter;
use catreid::data::{load_manifest_with, split_train_test, BBox, Dataset, DayWindow, LoadOptions, ManifestLoad, PartitionSetting};
use catreid::eval::{
    self, average_precision, euclidean, l2_normalize, rank_gallery, render_ranking_sheet, EvalProtocol, EvalReport,
    QueryResult, RankEntry, SheetStyle,
};
use catreid::export::{export_embeddings, project_2d, render_scatter_svg, write_projection, EmbeddingTable, ProjectionMethod};
use catreid::network::checkpoint;
use catreid::geometry::part_crops;
use catreid::network::InferenceModel;
use catreid::preview::{contact_sheet, draw_overlay};
use catreid::raster::Raster;
use catreid::toy::{generate, ToyConfig};
use catreid::trainer::{self, crop_to_box, derive_seed, prepare_sample, preview_parts, TrainConfig, TrainOptions};
use catreid::{Device, Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{reference, Cli, Command, ManifestArgs};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Record of how a run was invoked, written beside its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub toolkit_version: String,
    /// Command line as invoked.
    pub args: Vec<String>,
    /// Configuration after defaults and overrides.
    pub config: TrainConfig,
}

/// One-line result printed on standard output.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub status: &'static str,
    pub subcommand: String,
    pub out: PathBuf,
    pub details: Value,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::CropPreview { .. } => "crop-preview",
            Command::AugmentPreview { .. } => "augment-preview",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Query { .. } => "query",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::Project { .. } => "project",
            Command::ToyData { .. } => "toy-data",
            Command::Reference { .. } => "reference",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::Ingest { out, .. }
            | Command::CropPreview { out, .. }
            | Command::AugmentPreview { out, .. }
            | Command::Train { out, .. }
            | Command::Eval { out, .. }
            | Command::Query { out, .. }
            | Command::ExportEmbeddings { out, .. }
            | Command::Project { out, .. }
            | Command::ToyData { out, .. }
            | Command::Reference { out } => out,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(path) if !path.is_file() => {
            return Err(Error::Config(format!("config file not found: {}", path.display())));
        }
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_data(args: &ManifestArgs) -> Result<ManifestLoad> {
    let options = LoadOptions {
        skip_invalid: args.skip_invalid,
        day_window: DayWindow::parse(&args.day_start, &args.day_end)?,
        partition: PartitionSetting::parse(&args.partition)
            .ok_or_else(|| Error::Config(format!("unknown partition '{}'", args.partition)))?,
        dedup_seconds: args.dedup_seconds,
    };
    let load = load_manifest_with(&args.manifest, &options)?;
    for w in &load.warnings {
        log::warn!("{w}");
    }
    for r in &load.rejected {
        log::warn!("skipped {r}");
    }
    Ok(load)
}

fn load_dataset(args: &ManifestArgs) -> Result<Dataset> {
    let ds = load_data(args)?.dataset;
    if ds.is_empty() {
        return Err(Error::Empty(format!("no usable records in {}", args.manifest.display())));
    }
    let missing = ds.missing_images();
    if !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }
    Ok(ds)
}

fn load_model(path: &Path) -> Result<(InferenceModel, String)> {
    let (model, _) = checkpoint::load_inference(path, &Device::Cpu)?;
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok((model, id))
}

/// File-system friendly name for a record.
fn record_stem(index: usize, id: &str) -> String {
    let stem: String = Path::new(id)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("{index:04}_{stem}")
}

pub fn run(cli: &Cli) -> Result<Summary> {
    let config = load_config(cli)?;
    let command = &cli.command;
    let out = command.out().to_path_buf();
    if let Command::Reference { out } = command {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_text(out, &reference::render(&config)?)?;
        return Ok(Summary {
            status: "ok",
            subcommand: command.name().into(),
            out: out.clone(),
            details: json!({}),
        });
    }

    create_dir(&out)?;
    let manifest = RunManifest {
        subcommand: command.name().into(),
        config_path: cli.config.clone(),
        seed: config.seed,
        out_dir: out.clone(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        args: std::env::args().collect(),
        config: config.clone(),
    };
    write_text(&out.join(RUN_MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;

    let details = match command {
        Command::Ingest { data, split_ratio, .. } => ingest(data, *split_ratio, config.seed, &out)?,
        Command::CropPreview { data, limit, .. } => crop_preview(&config, data, *limit, &out)?,
        Command::AugmentPreview { data, limit, copies, .. } => augment_preview(&config, data, *limit, *copies, &out)?,
        Command::Train {
            data,
            split_ratio,
            test_manifest,
            val_manifest,
            resume,
            epochs,
            stop_after,
            ..
        } => {
            let mut config = config;
            if let Some(e) = epochs {
                config.epochs = *e;
                config.validate()?;
            }
            let run = TrainRun {
                split_ratio: *split_ratio,
                test_manifest: test_manifest.as_deref(),
                val_manifest: val_manifest.as_deref(),
                resume: resume.clone(),
                stop_after: *stop_after,
            };
            train(&config, data, run, &out)?
        }
        Command::Eval {
            data,
            checkpoint,
            sheets,
            k,
            ..
        } => evaluate(data, checkpoint, *sheets, *k, &out)?,
        Command::Query {
            data,
            checkpoint,
            query_id,
            image,
            bbox,
            entity,
            k,
            ..
        } => {
            let probe = match (query_id, image) {
                (Some(id), _) => Probe::Record(id.clone()),
                (None, Some(path)) => Probe::Image {
                    path: path.clone(),
                    bbox: bbox.map(BBox::from),
                    entity: entity.clone(),
                },
                (None, None) => return Err(Error::Validation("give --query-id or --image".into())),
            };
            query(data, checkpoint, probe, *k, &out)?
        }
        Command::ExportEmbeddings { data, checkpoint, .. } => {
            let ds = load_dataset(data)?;
            let (model, _) = load_model(checkpoint)?;
            let path = out.join("embeddings.csv");
            let table = export_embeddings(&model, &ds, &path)?;
            json!({ "rows": table.rows.len(), "dim": table.dim, "embeddings": path })
        }
        Command::Project { embeddings, projector, .. } => project(embeddings, projector.as_deref(), &out)?,
        Command::ToyData {
            cats,
            images_per_entity,
            day_cats,
            width,
            height,
            occlusion,
            ..
        } => {
            let toy = ToyConfig {
                cats: *cats,
                images_per_entity: *images_per_entity,
                day_cats: *day_cats,
                width: *width,
                height: *height,
                seed: config.seed,
                occlusion_probability: *occlusion,
            };
            let ds = generate(&toy, &out)?;
            json!({ "records": ds.records.len(), "entities": toy.entity_count(), "manifest": ds.manifest })
        }
        Command::Reference { .. } => unreachable!("handled above"),
    };
    Ok(Summary {
        status: "ok",
        subcommand: command.name().into(),
        out,
        details,
    })
}

fn ingest(data: &ManifestArgs, split_ratio: Option<f64>, seed: u64, out: &Path) -> Result<Value> {
    let load = load_data(data)?;
    let ds = &load.dataset;
    ds.write_manifest(&out.join("manifest.jsonl"))?;
    let mut per_entity: BTreeMap<String, usize> = BTreeMap::new();
    for e in &ds.entity_of {
        *per_entity.entry(e.to_string()).or_default() += 1;
    }
    let mut report = json!({
        "manifest": data.manifest,
        "partition": ds.partition.name(),
        "records": ds.len(),
        "cats": ds.cats().len(),
        "entities": per_entity.len(),
        "images_per_entity": per_entity,
        "rejected": load.rejected.iter().map(|r| json!({ "line": r.line, "message": r.message })).collect::<Vec<_>>(),
        "excluded_unknown_side": load.excluded_unknown_side,
        "deduplicated": load.deduplicated,
        "warnings": load.warnings,
        "missing_images": ds.missing_images(),
    });
    if let Some(ratio) = split_ratio {
        let (train, test) = split_train_test(ds, ratio, seed)?;
        train.write_manifest(&out.join("train.jsonl"))?;
        test.write_manifest(&out.join("test.jsonl"))?;
        report["split"] = json!({
            "ratio": ratio,
            "seed": seed,
            "train_cats": train.cats(),
            "test_cats": test.cats(),
            "train_records": train.len(),
            "test_records": test.len(),
        });
    }
    write_text(&out.join("ingest_report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(json!({
        "records": ds.len(),
        "entities": report["entities"],
        "rejected": load.rejected.len(),
    }))
}

fn preview_records(ds: &Dataset, limit: Option<usize>) -> Vec<usize> {
    (0..ds.len().min(limit.unwrap_or(usize::MAX))).collect()
}

fn crop_preview(config: &TrainConfig, data: &ManifestArgs, limit: Option<usize>, out: &Path) -> Result<Value> {
    let ds = load_dataset(data)?;
    let mut invalid: BTreeMap<&'static str, usize> = BTreeMap::new();
    let indices = preview_records(&ds, limit);
    for &i in &indices {
        let image = Raster::load(&ds.image_path(i))?;
        let (crop, kps) = crop_to_box(&image, &ds.records[i])?;
        let sample = prepare_sample(&crop, &kps, None, &config.parts, &config.stream)?;
        let dir = out.join(record_stem(i, &ds.records[i].record_id()));
        create_dir(&dir)?;
        draw_overlay(&crop, &kps, &part_crops(&kps, &config.parts)).save_png(&dir.join("overlay.png"))?;
        sample.full.save_png(&dir.join("full.png"))?;
        for (part, raster) in preview_parts(&sample) {
            match raster {
                Some(r) => r.save_png(&dir.join(format!("{}.png", part.name())))?,
                None => *invalid.entry(part.name()).or_default() += 1,
            }
        }
    }
    Ok(json!({ "records": indices.len(), "invalid_parts": invalid }))
}

/// Tile `[width, height]` of augmentation contact sheets.
const SHEET_TILE: [usize; 2] = [128, 96];

fn augment_preview(
    config: &TrainConfig,
    data: &ManifestArgs,
    limit: Option<usize>,
    copies: usize,
    out: &Path,
) -> Result<Value> {
    let ds = load_dataset(data)?;
    let indices = preview_records(&ds, limit);
    let crops = indices
        .iter()
        .map(|&i| crop_to_box(&Raster::load(&ds.image_path(i))?, &ds.records[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut aug_cfg = config.augment.clone();
    if aug_cfg.fill.is_none() {
        let mut mean = [0f32; 3];
        for (c, _) in &crops {
            for (m, v) in mean.iter_mut().zip(c.channel_means()) {
                *m += v / crops.len() as f32;
            }
        }
        aug_cfg.fill = Some(mean);
    }
    let augmenter = Augmenter::new(aug_cfg)?;
    // Row 0 is the unaugmented sample; columns are the full image then the parts.
    for (&i, (crop, kps)) in indices.iter().zip(&crops) {
        let mut samples = vec![prepare_sample(crop, kps, None, &config.parts, &config.stream)?];
        for copy in 0..copies {
            let seed = derive_seed(&[config.seed, i as u64, copy as u64]);
            samples.push(prepare_sample(crop, kps, Some((&augmenter, seed)), &config.parts, &config.stream)?);
        }
        let rows: Vec<Vec<Option<&Raster>>> = samples
            .iter()
            .map(|s| std::iter::once(Some(&s.full)).chain(preview_parts(s).into_iter().map(|(_, r)| r)).collect())
            .collect();
        let path = out.join(format!("{}.png", record_stem(i, &ds.records[i].record_id())));
        contact_sheet(&rows, SHEET_TILE, 4).save_png(&path)?;
    }
    Ok(json!({ "records": indices.len(), "copies": copies }))
}

struct TrainRun<'a> {
    split_ratio: Option<f64>,
    test_manifest: Option<&'a Path>,
    val_manifest: Option<&'a Path>,
    resume: Option<PathBuf>,
    stop_after: Option<usize>,
}

fn train(config: &TrainConfig, data: &ManifestArgs, run: TrainRun, out: &Path) -> Result<Value> {
    write_text(&out.join("config.toml"), &config.to_toml()?)?;
    let all = load_dataset(data)?;
    let other = |path: &Path| {
        load_dataset(&ManifestArgs {
            manifest: path.to_path_buf(),
            ..data.clone()
        })
    };
    let mut excluded = BTreeSet::new();
    let train_set = match run.split_ratio {
        Some(ratio) => {
            let (train, test) = split_train_test(&all, ratio, config.seed)?;
            train.write_manifest(&out.join("train.jsonl"))?;
            test.write_manifest(&out.join("test.jsonl"))?;
            excluded.extend(test.records.iter().map(|r| r.record_id()));
            train
        }
        None => all,
    };
    if let Some(path) = run.test_manifest {
        excluded.extend(other(path)?.records.iter().map(|r| r.record_id()));
    }
    let validation = run.val_manifest.map(other).transpose()?;
    let options = TrainOptions {
        out_dir: out.to_path_buf(),
        resume: run.resume,
        stop_after_epochs: run.stop_after,
        excluded_ids: excluded,
        validation,
        device: Device::Cpu,
    };
    let outcome = trainer::train(config, &train_set, &options)?;
    Ok(json!({
        "epochs_completed": outcome.epochs_completed,
        "steps": outcome.steps,
        "entities": outcome.labels.len(),
        "checkpoint": outcome.checkpoint,
        "inference_checkpoint": outcome.inference_checkpoint,
        "best_checkpoint": outcome.best_checkpoint,
        "metrics": outcome.metrics,
    }))
}

fn evaluate(data: &ManifestArgs, checkpoint: &Path, sheets: usize, k: usize, out: &Path) -> Result<Value> {
    let ds = load_dataset(data)?;
    let (model, model_id) = load_model(checkpoint)?;
    let report = eval::evaluate(&model, &ds, &model_id)?;
    report.write_json(&out.join("eval_report.json"))?;
    report.write_rankings_csv(&out.join("rankings.csv"))?;
    let count = sheets.min(report.per_query.len());
    if count > 0 {
        create_dir(&out.join("sheets"))?;
    }
    for qi in 0..count {
        let k = k.min(report.per_query[qi].ranking.len());
        if k > 0 {
            let path = out.join("sheets").join(format!("query_{qi:04}.png"));
            render_ranking_sheet(&report, qi, k, SheetStyle::default(), &path)?;
        }
    }
    Ok(json!({
        "map": report.map,
        "rank1": report.rank1,
        "valid_queries": report.valid_queries,
        "skipped_queries": report.skipped_queries,
        "sheets": count,
    }))
}

enum Probe {
    Record(String),
    Image {
        path: PathBuf,
        bbox: Option<BBox>,
        entity: Option<String>,
    },
}

fn query(data: &ManifestArgs, checkpoint: &Path, probe: Probe, k: usize, out: &Path) -> Result<Value> {
    let ds = load_dataset(data)?;
    let (model, model_id) = load_model(checkpoint)?;
    let (result, labelled) = match probe {
        Probe::Record(id) => {
            let report = eval::evaluate(&model, &ds, &model_id)?;
            let qi = report
                .query_index(&id)
                .ok_or_else(|| Error::Validation(format!("query id '{id}' is not in the manifest")))?;
            (report.per_query[qi].clone(), true)
        }
        Probe::Image { path, bbox, entity } => {
            let image = Raster::load(&path)?;
            let image = match bbox {
                Some(b) => {
                    let (x, y, w, h) = b.pixel_window(image.width(), image.height());
                    image.crop(x, y, w, h)?
                }
                None => image,
            };
            let [w, h] = model.config().full_input;
            let q = model.embed(&[image.resize(w, h)], 1)?.remove(0);
            let gallery = eval::embed_dataset(&model, &ds, 32)?;
            let order = rank_gallery(&q, &gallery)?;
            let qn = l2_normalize(&q)?;
            let ranking = order
                .iter()
                .map(|&g| {
                    Ok(RankEntry {
                        gallery_id: ds.records[g].record_id(),
                        entity: ds.entity_of[g].to_string(),
                        image_path: ds.image_path(g),
                        distance: euclidean(&qn, &l2_normalize(&gallery[g])?),
                        is_match: entity.as_deref() == Some(ds.entity_of[g].0.as_str()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let positives: BTreeSet<usize> = (0..order.len()).filter(|&r| ranking[r].is_match).collect();
            let ap = if positives.is_empty() {
                None
            } else {
                Some(average_precision(&(0..order.len()).collect::<Vec<_>>(), &positives)?)
            };
            let result = QueryResult {
                query_id: path.to_string_lossy().replace('\\', "/"),
                entity: entity.clone().unwrap_or_default(),
                image_path: path,
                average_precision: ap,
                ranking,
            };
            (result, entity.is_some())
        }
    };
    write_text(&out.join("query.json"), &serde_json::to_string_pretty(&result)?)?;
    let csv_path = out.join("query_rankings.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Validation(e.to_string()))?;
    w.write_record(["rank", "gallery_id", "entity", "distance", "is_match"])
        .map_err(|e| Error::Validation(e.to_string()))?;
    for (r, e) in result.ranking.iter().enumerate() {
        w.write_record([
            (r + 1).to_string(),
            e.gallery_id.clone(),
            e.entity.clone(),
            e.distance.to_string(),
            e.is_match.to_string(),
        ])
        .map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;

    let k = k.min(result.ranking.len());
    let mut sheet = None;
    if labelled && k > 0 {
        let report = EvalReport {
            model_id,
            protocol: EvalProtocol::default(),
            map: result.average_precision.unwrap_or(0.0),
            rank1: f64::from(u8::from(result.ranking[0].is_match)),
            cmc: Vec::new(),
            num_queries: 1,
            valid_queries: usize::from(result.average_precision.is_some()),
            skipped_queries: usize::from(result.average_precision.is_none()),
            rank1_hits: usize::from(result.ranking[0].is_match),
            per_query: vec![result.clone()],
        };
        let path = out.join("ranking_sheet.png");
        render_ranking_sheet(&report, 0, k, SheetStyle::default(), &path)?;
        sheet = Some(path);
    }
    let top: Vec<&str> = result.ranking.iter().take(k).map(|e| e.gallery_id.as_str()).collect();
    Ok(json!({
        "query": result.query_id,
        "average_precision": result.average_precision,
        "top": top,
        "sheet": sheet,
    }))
}

fn project(embeddings: &Path, projector: Option<&[String]>, out: &Path) -> Result<Value> {
    let table = EmbeddingTable::read_csv(embeddings)?;
    let method = match projector {
        Some(cmd) => ProjectionMethod::External(cmd.to_vec()),
        None => ProjectionMethod::LinearPrincipal,
    };
    let projection = project_2d(&table, &method)?;
    for w in &projection.warnings {
        log::warn!("{w}");
    }
    let csv_path = out.join("projection.csv");
    write_projection(&projection.points, &csv_path)?;
    let (svg, style) = render_scatter_svg(&table, &projection.points)?;
    let svg_path = out.join("scatter.svg");
    write_text(&svg_path, &svg)?;
    Ok(json!({
        "points": projection.points.len(),
        "cats": style.colors.len(),
        "warnings": projection.warnings,
        "projection": csv_path,
        "plot": svg_path,
    }))
}
