//! The five commands. Each validates its paths before doing any work and
//! writes deterministic outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssboost::boosting::{train_with_report, Termination};
use ssboost::io::{instance_from_json, instance_to_json, label_map_to_text, model_from_json, model_to_json};
use ssboost::runtime::profile_csv;
use ssboost::{
    cross_entropy_risk, evaluate, generate_scene, infer, profile_corpus, AdditiveModel, Budget, LevelScope,
    StructuredInstance, SyntheticSceneConfig, TrainConfig,
};

use crate::config::{BudgetValue, RunConfig};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "ssboost-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    /// SHA-256 of the scene configuration's JSON form.
    pub config_hash: String,
    pub scene: SyntheticSceneConfig,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn scene_id(i: usize) -> String {
    format!("scene-{i:05}")
}

pub fn scene_file_name(i: usize) -> String {
    format!("{}.json", scene_id(i))
}

/// Generates the corpus scene by scene, handing each serialized instance to
/// `sink`, and returns the manifest text.
pub fn build_corpus<F>(scene: &SyntheticSceneConfig, seed: u64, count: usize, mut sink: F) -> Result<String, CliError>
where
    F: FnMut(&str, &str) -> Result<(), CliError>,
{
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let inst = generate_scene(&scene.with_seed(seed.wrapping_add(i as u64))).map_err(CliError::from_lib)?;
        let text = instance_to_json(&inst);
        let name = scene_file_name(i);
        sink(&name, &text)?;
        files.push(ManifestEntry {
            name,
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        seed,
        count,
        config_hash: sha256_hex(&serde_json::to_vec(scene).expect("scene config serializes")),
        scene: scene.clone(),
        files,
    };
    Ok(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))
}

/// Writes `count` scenes and the manifest into `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let g = &cfg.generate;
    create_dir(out)?;
    if g.count == 0 {
        eprintln!("warning: count is 0; writing an empty manifest");
    }
    let manifest = build_corpus(&g.scene, g.seed, g.count, |name, text| write(&out.join(name), text))?;
    write(&out.join(MANIFEST), &manifest)?;
    Ok(format!(
        "wrote {} scenes to {} (manifest sha256 {})",
        g.count,
        out.display(),
        sha256_hex(manifest.as_bytes())
    ))
}

/// Parses a manifest. Malformed JSON is an I/O error; a well-formed document
/// that is not a consistent manifest is a mismatch.
pub fn parse_manifest(text: &str) -> Result<Manifest, CliError> {
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| CliError::io(e.to_string()))?;
    // names are fixed so a manifest cannot point outside its directory
    let names_ok = manifest
        .files
        .iter()
        .enumerate()
        .all(|(i, f)| f.name == scene_file_name(i));
    if manifest.format != MANIFEST_FORMAT || manifest.files.len() != manifest.count || !names_ok {
        return Err(CliError::mismatch("not a valid manifest"));
    }
    Ok(manifest)
}

/// Reads a generated dataset, checking every file against the manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<StructuredInstance>, CliError> {
    let path = dir.join(MANIFEST);
    let manifest = parse_manifest(&read(&path)?).map_err(|e| CliError {
        message: format!("{}: {}", path.display(), e.message),
        ..e
    })?;
    manifest
        .files
        .iter()
        .map(|entry| {
            let path = dir.join(&entry.name);
            let text = read(&path)?;
            if sha256_hex(text.as_bytes()) != entry.sha256 {
                return Err(CliError::mismatch(format!(
                    "{} does not match the manifest",
                    path.display()
                )));
            }
            instance_from_json(&text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn load_model(path: &Path) -> Result<AdditiveModel, CliError> {
    model_from_json(&read(path)?).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn scope_name(scope: LevelScope) -> String {
    match scope {
        LevelScope::Level(l) => format!("level{l}"),
        LevelScope::AllLevels => "all".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub termination: Termination,
    pub stages: usize,
    pub initial_risk: f64,
    pub final_risk: f64,
    pub final_pixel_accuracy: f64,
    pub final_class_accuracy: f64,
    pub config_hash: String,
    pub seed: u64,
}

pub const TRAIN_LOG_HEADER: &str = "iteration,scope,threshold,depth,lambda,alpha,delta_risk,stage_cost,ratio,risk";

/// Trains on `data`; writes `model.json`, `train_log.csv` and
/// `train_summary.json` into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String, CliError> {
    let config: &TrainConfig = &cfg.train;
    config.validate().map_err(|e| CliError::invalid(e.to_string()))?;
    let instances = load_dataset(data)?;
    if instances.len() < config.folds {
        return Err(CliError::mismatch(format!(
            "{} instances cannot fill {} stacking folds",
            instances.len(),
            config.folds
        )));
    }
    create_dir(out)?;
    let report = train_with_report(&instances, config).map_err(CliError::from_lib)?;
    let model = &report.model;

    let mut log = String::from(TRAIN_LOG_HEADER);
    log.push('\n');
    for row in &report.log {
        writeln!(
            log,
            "{},{},{},{},{},{},{},{},{},{}",
            row.iteration,
            scope_name(row.selector.scope),
            row.selector.threshold,
            row.depth,
            row.lambda,
            row.alpha,
            row.delta_risk,
            row.stage_cost,
            row.ratio,
            row.risk
        )
        .expect("writing to a string");
    }
    let m = &model.metadata;
    let summary = TrainSummary {
        termination: m.termination,
        stages: model.stages.len(),
        initial_risk: report.risk_history[0],
        final_risk: m.final_risk,
        final_pixel_accuracy: m.final_pixel_accuracy,
        final_class_accuracy: m.final_class_accuracy,
        config_hash: m.config_hash.clone(),
        seed: m.seed,
    };
    write(&out.join("model.json"), &model_to_json(model))?;
    write(&out.join("train_log.csv"), &log)?;
    write(
        &out.join("train_summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    Ok(format!(
        "trained {} stages ({}); risk {:.4} -> {:.4}; wrote {}",
        model.stages.len(),
        termination_text(m.termination),
        summary.initial_risk,
        summary.final_risk,
        out.display()
    ))
}

pub fn termination_text(t: Termination) -> String {
    match t {
        Termination::Completed => "completed all iterations".into(),
        Termination::NoImprovement { iteration } => format!("stopped at iteration {iteration}: no risk improvement"),
        Termination::NoActiveSelector { iteration } => {
            format!("stopped at iteration {iteration}: no selector picked any segment")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerDoc {
    /// `None` for an unlimited budget.
    pub budget: Option<f64>,
    pub total: f64,
    pub stages_executed: usize,
    pub entries: Vec<LedgerEntryDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntryDoc {
    pub stage: usize,
    pub selection_cost: f64,
    pub prediction_cost: f64,
    pub features: Vec<(usize, usize)>,
    pub group_charges: Vec<(usize, f64)>,
    pub center_charges: Vec<((usize, usize), f64)>,
    pub total: f64,
    /// Segments the stage's selector picked, as `(level, index)`.
    pub selected: Vec<(usize, usize)>,
}

pub fn stage_mask_name(stage: usize) -> String {
    format!("stage-{stage:03}.txt")
}

/// Per instance: `labels.txt`, one selected-region mask per executed stage
/// and `ledger.json`, under `out/scene-NNNNN/`.
pub fn cmd_infer(model: &Path, data: &Path, budget: Budget, out: &Path) -> Result<String, CliError> {
    let model = load_model(model)?;
    let instances = load_dataset(data)?;
    create_dir(out)?;
    let mut spent = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let result = infer(&model, inst, budget).map_err(CliError::from_lib)?;
        let dir = out.join(scene_id(i));
        create_dir(&dir)?;
        let w = inst.width();
        write(&dir.join("labels.txt"), &label_map_to_text(w, &result.scores.argmax()))?;
        let h = inst.hierarchy();
        let mut entries = Vec::new();
        for (e, sel) in result.ledger.entries().iter().zip(&result.selections) {
            let mask: Vec<usize> = sel.mask(h).into_iter().map(usize::from).collect();
            write(&dir.join(stage_mask_name(e.stage + 1)), &label_map_to_text(w, &mask))?;
            entries.push(LedgerEntryDoc {
                stage: e.stage + 1,
                selection_cost: e.selection_cost,
                prediction_cost: e.prediction_cost,
                features: e.requested.clone(),
                group_charges: e.group_charges.clone(),
                center_charges: e.center_charges.clone(),
                total: e.total(),
                selected: sel.segments().iter().map(|s| (s.level, s.index)).collect(),
            });
        }
        let doc = LedgerDoc {
            budget: match budget {
                Budget::Unlimited => None,
                Budget::Limited(b) => Some(b),
            },
            total: result.ledger.total(),
            stages_executed: result.stages_executed(),
            entries,
        };
        write(
            &dir.join("ledger.json"),
            &(serde_json::to_string_pretty(&doc).expect("ledger serializes") + "\n"),
        )?;
        spent += result.ledger.total();
    }
    Ok(format!(
        "inferred {} scenes, mean cost {:.3}; wrote {}",
        instances.len(),
        spent / instances.len().max(1) as f64,
        out.display()
    ))
}

/// Budget grid from the config, or fractions of the model's total cost.
pub fn budget_grid(cfg: &RunConfig, model: &AdditiveModel) -> Result<Vec<Budget>, CliError> {
    if let Some(list) = &cfg.profile.budgets {
        return list.iter().map(BudgetValue::resolve).collect();
    }
    let steps = cfg.profile.steps.max(1);
    let total: f64 = model.stages.iter().map(|s| s.cost).sum();
    let mut grid: Vec<Budget> = (0..=steps)
        .map(|i| Budget::Limited(total * i as f64 / steps as f64))
        .collect();
    grid.push(Budget::Unlimited);
    Ok(grid)
}

/// Writes `profile.csv`.
pub fn cmd_profile(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<String, CliError> {
    let model = load_model(model)?;
    let grid = budget_grid(cfg, &model)?;
    let instances = load_dataset(data)?;
    create_dir(out)?;
    let rows = profile_corpus(&model, &instances, &grid).map_err(CliError::from_lib)?;
    write(&out.join("profile.csv"), &profile_csv(&rows))?;
    Ok(format!(
        "profiled {} budgets; wrote {}",
        rows.len(),
        out.join("profile.csv").display()
    ))
}

/// Writes `metrics.csv`: one row per scene and a final mean row.
pub fn cmd_eval(model: &Path, data: &Path, budget: Budget, out: &Path) -> Result<String, CliError> {
    let model = load_model(model)?;
    let instances = load_dataset(data)?;
    create_dir(out)?;
    let k = model.num_classes;
    let mut text = String::from("scene,pixel_acc,class_acc,risk,cost");
    for c in 0..k {
        write!(text, ",recall_{c}").expect("writing to a string");
    }
    text.push('\n');
    let mut all = Vec::with_capacity(instances.len());
    let (mut risk, mut cost) = (0.0, 0.0);
    for (i, inst) in instances.iter().enumerate() {
        let result = infer(&model, inst, budget).map_err(CliError::from_lib)?;
        let m = evaluate(&result.scores, inst.labels()).map_err(CliError::from_lib)?;
        let r = cross_entropy_risk(&result.scores, inst.labels()).map_err(CliError::from_lib)?;
        push_row(&mut text, &scene_id(i), &m, r, result.ledger.total());
        risk += r;
        cost += result.ledger.total();
        all.push(m);
    }
    let n = instances.len() as f64;
    if let Some(mean) = ssboost::Metrics::mean(&all) {
        push_row(&mut text, "mean", &mean, risk / n, cost / n);
    }
    write(&out.join("metrics.csv"), &text)?;
    Ok(format!(
        "evaluated {} scenes; wrote {}",
        instances.len(),
        out.join("metrics.csv").display()
    ))
}

fn push_row(text: &mut String, name: &str, m: &ssboost::Metrics, risk: f64, cost: f64) {
    write!(
        text,
        "{name},{:.6},{:.6},{:.6},{:.6}",
        m.pixel_accuracy, m.mean_class_recall, risk, cost
    )
    .expect("writing to a string");
    for r in &m.per_class_recall {
        match r {
            Some(v) => write!(text, ",{v:.6}").expect("writing to a string"),
            None => text.push(','),
        }
    }
    text.push('\n');
}

/// Output directory from the flag, the config, or the default `out`.
pub fn out_dir(flag: Option<&PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.cloned()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
