use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::records::*;
use super::{absolute, io_err, CliError, Context, ExitStatus, Invocation, Outcome};
use crate::fitting::{run_stage_one, run_two_stage, FitError};
use crate::io::{sha256_hex, write_atomic};
use crate::metrics::evaluate;
use crate::scene::{scene_from_json, scene_to_json, Scene};
use crate::synth::{apply_variant, generate_scene, AblationVariant, SceneConfig};

/// Files as given, directories as their sorted `*.{ext}` entries excluding
/// manifests. Paths are made absolute so manifests replay from anywhere.
pub(super) fn expand_inputs(paths: &[PathBuf], ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.is_file()
                        && f.extension().is_some_and(|x| x == ext)
                        && !f
                            .file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("manifest_"))
                })
                .collect();
            entries.sort();
            out.extend(entries.iter().map(|f| absolute(f)));
        } else {
            out.push(absolute(p));
        }
    }
    Ok(out)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("record serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S], header: &[&str]) -> Result<(), CliError> {
    // With rows, serde writes the header from the field names.
    let mut w = csv::WriterBuilder::new()
        .has_headers(!rows.is_empty())
        .from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    write_atomic(path, &bytes).map_err(io_err(path))
}

/// Reads a file, recording its digest as an input.
fn read_input(path: &Path, inputs: &mut Vec<FileRecord>) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    inputs.push(FileRecord {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    });
    String::from_utf8(bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn failure(input: &Path, kind: &str, message: impl ToString) -> Failure {
    Failure {
        input: input.display().to_string(),
        kind: kind.to_string(),
        message: message.to_string(),
    }
}

/// Batch status: partial when something succeeded, otherwise divergence if
/// every failure diverged, otherwise an input error.
fn batch_status(succeeded: usize, failures: &[Failure]) -> Option<ExitStatus> {
    if failures.is_empty() {
        None
    } else if succeeded > 0 {
        Some(ExitStatus::Partial)
    } else if failures.iter().all(|f| f.kind == "divergence") {
        Some(ExitStatus::Diverged)
    } else {
        Some(ExitStatus::Input)
    }
}

pub(super) fn gen(
    ctx: &Context,
    inv: &Invocation,
    count: usize,
    variant: Option<AblationVariant>,
    out: &Path,
) -> Result<Outcome, CliError> {
    let base = &ctx.config.scene;
    let seeds: Vec<u64> = (0..count as u64).map(|i| base.seed + i).collect();
    let mut outcome = Outcome {
        seeds: seeds.clone(),
        ..Outcome::default()
    };
    if count == 0 {
        outcome
            .notices
            .push("count is 0: no scenes generated".into());
        return Ok(outcome);
    }
    let scenes: Vec<Scene> = seeds
        .par_iter()
        .map(|&seed| {
            let scene = generate_scene(
                &ctx.model,
                &SceneConfig {
                    seed,
                    ..base.clone()
                },
            )?;
            match variant {
                Some(v) => apply_variant(&scene, v, ctx.config.fit.lambda),
                None => Ok(scene),
            }
        })
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    for mut scene in scenes {
        scene.manifest = Some(inv.manifest_name());
        let path = out.join(format!("{}.json", scene.scene_id));
        write_atomic(&path, scene_to_json(&scene).as_bytes()).map_err(io_err(&path))?;
        outcome.outputs.push(path);
    }
    Ok(outcome)
}

fn fit_scene(
    ctx: &Context,
    inv: &Invocation,
    mode: FitMode,
    scene: &Scene,
) -> Result<FitResultFile, FitError> {
    let cfg = &ctx.config.fit;
    let intrinsics = scene.intrinsics();
    let dets = scene.filtered(cfg.lambda);
    let mut file = FitResultFile {
        schema_version: RESULT_SCHEMA_VERSION,
        scene_id: scene.scene_id.clone(),
        seed: scene.seed,
        config_hash: ctx.config_hash.clone(),
        manifest: inv.manifest_name(),
        mode,
        view_ids: scene.views.iter().map(|v| v.detection.view_id).collect(),
        stage_one: Vec::new(),
        screened_view: None,
        stage_two: None,
    };
    match mode {
        FitMode::Stage1 => {
            let s1 = run_stage_one(&ctx.model, &intrinsics, &dets, cfg)?;
            file.stage_one = stage_one_records(&ctx.model, &s1, &dets)?;
        }
        FitMode::Full => {
            let res = run_two_stage(&ctx.model, &intrinsics, &dets, cfg)?;
            file.stage_one = stage_one_records(&ctx.model, &res.stage_one, &dets)?;
            file.screened_view = Some(res.screened.view);
            file.stage_two = Some(stage_two_record(&ctx.model, &res)?);
        }
    }
    Ok(file)
}

pub(super) fn fit(
    ctx: &Context,
    inv: &Invocation,
    mode: FitMode,
    scenes: &[PathBuf],
    out: &Path,
) -> Result<Outcome, CliError> {
    let loaded: Vec<(Result<String, CliError>, Vec<FileRecord>)> = scenes
        .iter()
        .map(|p| {
            let mut rec = Vec::new();
            (read_input(p, &mut rec), rec)
        })
        .collect();
    let results: Vec<Result<FitResultFile, Failure>> = scenes
        .par_iter()
        .zip(&loaded)
        .map(|(path, (text, _))| {
            let text = text.as_ref().map_err(|e| failure(path, "input", e))?;
            let scene = scene_from_json(text, &path.display().to_string())
                .map_err(|e| failure(path, "input", e))?;
            fit_scene(ctx, inv, mode, &scene).map_err(|e| {
                let kind = if matches!(e, FitError::Diverged { .. }) {
                    "divergence"
                } else {
                    "fit"
                };
                failure(path, kind, e)
            })
        })
        .collect();
    let mut outcome = Outcome {
        inputs: loaded.into_iter().flat_map(|(_, r)| r).collect(),
        ..Outcome::default()
    };
    let mut seen = HashSet::new();
    let mut seeds = Vec::new();
    for (path, res) in scenes.iter().zip(results) {
        match res {
            Ok(file) if !seen.insert(file.scene_id.clone()) => {
                outcome.failures.push(failure(
                    path,
                    "input",
                    format!("duplicate scene id {}", file.scene_id),
                ));
            }
            Ok(file) => {
                seeds.extend(file.seed);
                let dest = out.join(format!("{}_result.json", file.scene_id));
                write_json(&dest, &file)?;
                outcome.outputs.push(dest);
            }
            Err(f) => outcome.failures.push(f),
        }
    }
    outcome.seeds = seeds;
    outcome.status = batch_status(outcome.outputs.len(), &outcome.failures);
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
struct MetricSummary {
    mpjpe: f64,
    pa_mpjpe: f64,
    pck: f64,
    auc: f64,
    pa_pck: f64,
    pa_auc: f64,
}

impl MetricSummary {
    fn columns(rows: &[MetricsRow]) -> [Vec<f64>; 6] {
        let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        [
            col(|r| r.mpjpe),
            col(|r| r.pa_mpjpe),
            col(|r| r.pck),
            col(|r| r.auc),
            col(|r| r.pa_pck),
            col(|r| r.pa_auc),
        ]
    }

    fn reduce(rows: &[MetricsRow], f: fn(&mut [f64]) -> f64) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let [mut a, mut b, mut c, mut d, mut e, mut g] = Self::columns(rows);
        Some(Self {
            mpjpe: f(&mut a),
            pa_mpjpe: f(&mut b),
            pck: f(&mut c),
            auc: f(&mut d),
            pa_pck: f(&mut e),
            pa_auc: f(&mut g),
        })
    }
}

pub fn mean(v: &mut [f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Serialize)]
struct Summary {
    schema_version: u32,
    manifest: String,
    config_hash: String,
    scenes: usize,
    mean: Option<MetricSummary>,
    median: Option<MetricSummary>,
}

fn eval_one(
    ctx: &Context,
    inv: &Invocation,
    result: &FitResultFile,
    scene: &Scene,
) -> Result<Result<MetricsRow, String>, String> {
    let Some((view, pred)) = result.prediction() else {
        return Err("result has no fitted view".into());
    };
    if scene.views.get(view).map(|v| v.detection.view_id) != result.view_ids.get(view).copied() {
        return Err(format!(
            "views of {} do not match its scene file",
            result.scene_id
        ));
    }
    let Some(gt) = scene.ground_truth_camera(view) else {
        return Ok(Err(format!(
            "{}: no ground truth or extrinsics, row skipped",
            scene.scene_id
        )));
    };
    let mm = |p: Vec<nalgebra::Vector3<f64>>| p.into_iter().map(|q| q * 1000.0).collect::<Vec<_>>();
    let e = evaluate(&mm(pred), &mm(gt), &ctx.config.eval).map_err(|e| e.to_string())?;
    Ok(Ok(MetricsRow {
        scene: result.scene_id.clone(),
        seed: scene.seed,
        mpjpe: e.mpjpe,
        pa_mpjpe: e.pa_mpjpe,
        pck: e.pck,
        auc: e.auc,
        pa_pck: e.pa_pck,
        pa_auc: e.pa_auc,
        config_hash: ctx.config_hash.clone(),
        manifest: inv.manifest_name(),
    }))
}

pub(super) fn eval(
    ctx: &Context,
    inv: &Invocation,
    results: &[PathBuf],
    scenes: &[PathBuf],
    out: &Path,
) -> Result<Outcome, CliError> {
    let mut outcome = Outcome::default();
    let mut by_id: BTreeMap<String, Scene> = BTreeMap::new();
    for p in scenes {
        let parsed = read_input(p, &mut outcome.inputs).and_then(|t| {
            scene_from_json(&t, &p.display().to_string())
                .map_err(|e| CliError::Input(e.to_string()))
        });
        match parsed {
            Ok(s) => {
                by_id.insert(s.scene_id.clone(), s);
            }
            Err(e) => outcome.failures.push(failure(p, "input", e)),
        }
    }
    let mut rows = Vec::new();
    for p in results {
        let parsed = read_input(p, &mut outcome.inputs).and_then(|t| {
            serde_json::from_str::<FitResultFile>(&t)
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        });
        let result = match parsed {
            Ok(r) if r.schema_version != RESULT_SCHEMA_VERSION => {
                outcome.failures.push(failure(
                    p,
                    "input",
                    format!("unsupported result schema version {}", r.schema_version),
                ));
                continue;
            }
            Ok(r) => r,
            Err(e) => {
                outcome.failures.push(failure(p, "input", e));
                continue;
            }
        };
        let Some(scene) = by_id.get(&result.scene_id) else {
            outcome.notices.push(format!(
                "{}: no scene file with this id, row skipped",
                result.scene_id
            ));
            continue;
        };
        match eval_one(ctx, inv, &result, scene) {
            Ok(Ok(row)) => {
                outcome.seeds.extend(row.seed);
                rows.push(row);
            }
            Ok(Err(notice)) => outcome.notices.push(notice),
            Err(e) => outcome.failures.push(failure(p, "input", e)),
        }
    }
    let csv_path = out.join("metrics.csv");
    write_csv(&csv_path, &rows, &METRICS_HEADER)?;
    let summary = Summary {
        schema_version: RESULT_SCHEMA_VERSION,
        manifest: inv.manifest_name(),
        config_hash: ctx.config_hash.clone(),
        scenes: rows.len(),
        mean: MetricSummary::reduce(&rows, mean),
        median: MetricSummary::reduce(&rows, median),
    };
    let json_path = out.join("summary.json");
    write_json(&json_path, &summary)?;
    let txt_path = out.join("summary.txt");
    write_atomic(&txt_path, summary_text(&summary).as_bytes()).map_err(io_err(&txt_path))?;
    outcome.outputs = vec![csv_path, json_path, txt_path];
    outcome.status = batch_status(rows.len(), &outcome.failures);
    Ok(outcome)
}

fn summary_text(s: &Summary) -> String {
    let mut t = format!(
        "scenes: {}\nmanifest: {}\nconfig_hash: {}\n\n",
        s.scenes, s.manifest, s.config_hash
    );
    let _ = writeln!(
        t,
        "{:<8} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}",
        "", "MPJPE", "PA-MPJPE", "PCK", "AUC", "PA-PCK", "PA-AUC"
    );
    for (name, m) in [("mean", &s.mean), ("median", &s.median)] {
        if let Some(m) = m {
            let _ = writeln!(
                t,
                "{name:<8} {:>10.3} {:>10.3} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                m.mpjpe, m.pa_mpjpe, m.pck, m.auc, m.pa_pck, m.pa_auc
            );
        }
    }
    t
}

/// Reads a metrics CSV written by `eval`, rejecting any other column layout.
pub fn read_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(CliError::Input(format!(
            "{}: inconsistent columns {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Marks, per metric, every row holding the best value (max for PCK/AUC,
/// min for errors).
pub fn mark_best(rows: &mut [ReportRow]) {
    type Get = fn(&ReportRow) -> f64;
    let metrics: [(&str, Get, bool); 6] = [
        ("pck", |r| r.pck, true),
        ("auc", |r| r.auc, true),
        ("mpjpe", |r| r.mpjpe, false),
        ("pa_pck", |r| r.pa_pck, true),
        ("pa_auc", |r| r.pa_auc, true),
        ("pa_mpjpe", |r| r.pa_mpjpe, false),
    ];
    let mut best: Vec<Vec<&str>> = vec![Vec::new(); rows.len()];
    for (name, get, higher) in metrics {
        let target = rows.iter().map(get).fold(
            if higher {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
            |a, b| {
                if higher {
                    a.max(b)
                } else {
                    a.min(b)
                }
            },
        );
        for (i, r) in rows.iter().enumerate() {
            if get(r) == target {
                best[i].push(name);
            }
        }
    }
    for (r, b) in rows.iter_mut().zip(best) {
        r.best = b.join(";");
    }
}

pub(super) fn report(
    ctx: &Context,
    inv: &Invocation,
    inputs: &[PathBuf],
    labels: &[String],
    out: &Path,
) -> Result<Outcome, CliError> {
    let _ = ctx;
    let mut outcome = Outcome::default();
    let mut rows = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        let text = read_input(p, &mut outcome.inputs)?;
        let metrics = read_metrics_csv(&text, p)?;
        if metrics.is_empty() {
            return Err(CliError::Input(format!("{}: no metric rows", p.display())));
        }
        let label = labels.get(i).cloned().unwrap_or_else(|| {
            p.parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("input{i}"))
        });
        let m = MetricSummary::reduce(&metrics, mean).expect("non-empty");
        rows.push(ReportRow {
            label,
            scenes: metrics.len(),
            pck: m.pck,
            auc: m.auc,
            mpjpe: m.mpjpe,
            pa_pck: m.pa_pck,
            pa_auc: m.pa_auc,
            pa_mpjpe: m.pa_mpjpe,
            best: String::new(),
            manifest: inv.manifest_name(),
        });
    }
    mark_best(&mut rows);
    let csv_path = out.join("report.csv");
    write_csv(&csv_path, &rows, &REPORT_HEADER)?;
    let txt_path = out.join("report.txt");
    write_atomic(
        &txt_path,
        report_text(&rows, &inv.manifest_name()).as_bytes(),
    )
    .map_err(io_err(&txt_path))?;
    outcome.outputs = vec![csv_path, txt_path];
    Ok(outcome)
}

fn report_text(rows: &[ReportRow], manifest: &str) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut t = format!("manifest: {manifest}\n* best in column\n\n");
    let _ = writeln!(
        t,
        "{:<width$} {:>6} {:>9} {:>9} {:>10} {:>9} {:>9} {:>10}",
        "label", "scenes", "PCK", "AUC", "MPJPE", "PA-PCK", "PA-AUC", "PA-MPJPE"
    );
    for r in rows {
        let best: HashSet<&str> = r.best.split(';').collect();
        let cell = |name: &str, v: f64, w: usize, p: usize| {
            let mark = if best.contains(name) { "*" } else { " " };
            format!("{:>w$}", format!("{v:.p$}{mark}"), w = w)
        };
        let _ = writeln!(
            t,
            "{:<width$} {:>6} {} {} {} {} {} {}",
            r.label,
            r.scenes,
            cell("pck", r.pck, 9, 2),
            cell("auc", r.auc, 9, 2),
            cell("mpjpe", r.mpjpe, 10, 2),
            cell("pa_pck", r.pa_pck, 9, 2),
            cell("pa_auc", r.pa_auc, 9, 2),
            cell("pa_mpjpe", r.pa_mpjpe, 10, 2),
        );
    }
    t
}
