//! Command implementations behind the `mixstyle` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use mixstyle_core::backbone::{Backbone, NUM_BLOCKS};
use mixstyle_core::datagen::{Dataset, Split, generate_dataset};
use mixstyle_core::graph::{Graph, Var};
use mixstyle_core::mixstyle::compute_channel_stats;
use mixstyle_core::projection::{ProjectedRow, project_rows, project_style_stats};
use mixstyle_core::trainer::{
    AblationEntry, RunReport, ablation_csv, alpha_sweep, baseline_entry, placement_matrix,
    run_ablation, run_experiment, shuffle_matrix, variant_matrix,
};
use mixstyle_core::{Error, Result, Tensor32};
use serde::{Deserialize, Serialize};

pub use config::{AblationAxis, ConfigFile, Overrides, SeedTarget};

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ABLATION_FILE: &str = "ablation.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Renders the benchmark into `out` and returns the manifest path.
pub fn cmd_gen(cfg: &ConfigFile, out: &Path) -> Result<PathBuf> {
    generate_dataset(
        &cfg.dataset.manifest(),
        &cfg.dataset.domain_specs(),
        cfg.dataset.label_budget,
        out,
        Some(cfg.to_toml()),
    )
}

/// What `train` prints and stores: the report plus the configuration that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub effective_config: ConfigFile,
    pub report: RunReport,
}

/// Trains one model, writes `report.json` and `model.ckpt` under `out`,
/// and returns the report JSON together with the wall-clock seconds, which
/// are kept out of the JSON so reruns are byte-identical.
pub fn cmd_train(cfg: &ConfigFile, out: &Path) -> Result<(String, f64)> {
    let data = Dataset::load(&cfg.dataset.dir)?;
    let trained = run_experiment(&cfg.experiment(), &data)?;
    let mut report = trained.report;
    let secs = report.wall_clock_secs.take().unwrap_or(0.0);
    let output = TrainOutput {
        effective_config: cfg.clone(),
        report,
    };
    let json = serde_json::to_string_pretty(&output).map_err(|e| Error::InvalidArgument(e.to_string()))? + "\n";
    write(&out.join(REPORT_FILE), &json)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    trained.backbone.save(&ckpt, &cfg.to_toml())?;
    Ok((json, secs))
}

/// Configurations of the ablation selected by `[ablation]`.
pub fn ablation_entries(cfg: &ConfigFile) -> Vec<AblationEntry> {
    let base = cfg.experiment();
    let mut entries = Vec::new();
    if cfg.ablation.include_baseline {
        entries.push(baseline_entry(&base));
    }
    entries.extend(match cfg.ablation.axis {
        AblationAxis::Placement => placement_matrix(&base),
        AblationAxis::Alpha => alpha_sweep(&base, &cfg.ablation.alphas),
        AblationAxis::Variant => variant_matrix(&base),
        AblationAxis::Shuffle => shuffle_matrix(&base),
    });
    entries
}

/// Runs the ablation and writes `ablation.csv` plus its effective config.
/// Returns the CSV text.
pub fn cmd_ablate(cfg: &ConfigFile, out: &Path, jobs: usize) -> Result<String> {
    let entries = ablation_entries(cfg);
    let data = Dataset::load(&cfg.dataset.dir)?;
    let targets: Vec<usize> = if cfg.ablation.targets.is_empty() {
        (0..data.domains()).collect()
    } else {
        cfg.ablation.targets.clone()
    };
    let seeds: Vec<u64> = (0..cfg.ablation.n_seeds as u64).map(|i| cfg.train.seed + i).collect();
    let rows = run_ablation(&entries, &targets, &seeds, &data, jobs)?;
    let csv = ablation_csv(&rows);
    write(&out.join(ABLATION_FILE), &csv)?;
    write(&out.join("ablation.effective.toml"), cfg.to_toml())?;
    Ok(csv)
}

fn rows_csv(rows: &[ProjectedRow]) -> String {
    let mut s = String::from("x,y,domain_id,class_id\n");
    for r in rows {
        s.push_str(&format!("{:.6},{:.6},{},{}\n", r.x, r.y, r.domain_id, r.class_id));
    }
    s
}

pub fn style_csv_name(block: usize) -> String {
    format!("style_res{}.csv", block + 1)
}

pub fn features_csv_name(block: usize) -> String {
    format!("features_res{}.csv", block + 1)
}

const DIAG_CHUNK: usize = 100;

/// Projects per-slot style statistics and flattened features of test
/// images from every domain; writes one CSV pair per slot and returns the
/// written paths.
pub fn cmd_diag(cfg: &ConfigFile, checkpoint: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, _) = Backbone::<f32>::load(checkpoint)?;
    let data = Dataset::load(&cfg.dataset.dir)?;
    if model.spec.classes != data.classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the dataset has {}",
            model.spec.classes,
            data.classes()
        )));
    }
    let eps = cfg.mixstyle.epsilon as f32;
    let mut stats = vec![Vec::new(); NUM_BLOCKS];
    let mut feats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); NUM_BLOCKS];
    let (mut domain_ids, mut class_ids) = (Vec::new(), Vec::new());
    for d in 0..data.domains() {
        let set = data.split(d, Split::Test);
        let mut per_class = vec![0usize; data.classes()];
        let chosen: Vec<usize> = (0..set.len())
            .filter(|&i| {
                let c = &mut per_class[set.classes[i]];
                *c += 1;
                cfg.diag.per_cell == 0 || *c <= cfg.diag.per_cell
            })
            .collect();
        for chunk in chosen.chunks(DIAG_CHUNK) {
            let mut g = Graph::inference();
            let vars: Vec<Var> = model.params.iter().map(|p| g.constant(p.clone())).collect();
            let x = g.constant(set.batch::<f32>(chunk)?);
            let (_, outs) = model.forward_features(&mut g, &vars, x)?;
            for (b, v) in outs.iter().enumerate() {
                let value: &Tensor32 = g.value(*v);
                stats[b].push(compute_channel_stats(value, eps)?);
                let per = value.len() / chunk.len();
                feats[b].extend(value.data().chunks(per).map(|r| r.iter().map(|&f| f as f64).collect()));
            }
            domain_ids.extend(chunk.iter().map(|&i| set.domains[i]));
            class_ids.extend(chunk.iter().map(|&i| set.classes[i]));
        }
    }
    let mut written = Vec::new();
    for b in 0..NUM_BLOCKS {
        let style = project_style_stats(&stats[b], &domain_ids, &class_ids)?;
        let path = out.join(style_csv_name(b));
        write(&path, rows_csv(&style))?;
        written.push(path);
        let flat = project_rows(&feats[b], &domain_ids, &class_ids)?;
        let path = out.join(features_csv_name(b));
        write(&path, rows_csv(&flat))?;
        written.push(path);
    }
    write(&out.join("diag.effective.toml"), cfg.to_toml())?;
    Ok(written)
}

/// Reads a projection CSV back into rows.
pub fn read_projection_csv(path: &Path) -> Result<Vec<ProjectedRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some("x,y,domain_id,class_id") {
        return Err(bad("missing header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("bad row {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(e.to_string()));
            Ok(ProjectedRow {
                x: num(f[0])?,
                y: num(f[1])?,
                domain_id: int(f[2])?,
                class_id: int(f[3])?,
            })
        })
        .collect()
}

/// Accuracy of assigning each point to the nearest per-label centroid.
pub fn nearest_centroid_accuracy(points: &[(f64, f64)], labels: &[usize]) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (&(x, y), &l) in points.iter().zip(labels) {
        sums[l].0 += x;
        sums[l].1 += y;
        sums[l].2 += 1;
    }
    let centroids: Vec<Option<(f64, f64)>> = sums
        .iter()
        .map(|&(x, y, n)| (n > 0).then(|| (x / n as f64, y / n as f64)))
        .collect();
    let correct = points
        .iter()
        .zip(labels)
        .filter(|&(&(x, y), &l)| {
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                if let Some((cx, cy)) = centroid {
                    let d = (x - cx).powi(2) + (y - cy).powi(2);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
            }
            best.1 == l
        })
        .count();
    if points.is_empty() { 0.0 } else { correct as f64 / points.len() as f64 }
}
