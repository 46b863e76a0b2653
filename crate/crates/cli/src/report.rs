//! Report bundle over completed distillation variants.
//!
//! Every chart is backed by a long-format CSV with the same numbers:
//! `routing_evolution.csv`, `spectra.csv` and `efficiency.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use dlink::router::read_routing_csv;
use dlink::spectral::SpectrumRow;
use dlink::{DlinkError, Result};

use crate::commands::{csv_err, read_json, SeedMetrics, VariantMetrics};
use crate::svg::{chart, Series, Style};

struct SeedData {
    metrics: SeedMetrics,
    routing: Vec<(usize, Vec<f64>)>,
    pre: Vec<SpectrumRow>,
    post: Vec<SpectrumRow>,
}

struct Variant {
    metrics: VariantMetrics,
    seeds: Vec<SeedData>,
}

fn read_spectrum(path: &Path) -> Result<Vec<SpectrumRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader.deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn load_variant(dir: &Path) -> Result<Variant> {
    let metrics: VariantMetrics = read_json(&dir.join("metrics.json"))?;
    let mut seeds = Vec::with_capacity(metrics.runs.len());
    for run in &metrics.runs {
        let sd = dir.join(format!("seed_{}", run.seed));
        let routing_path = sd.join("routing_weights.csv");
        let routing = if routing_path.exists() {
            read_routing_csv(&routing_path)?
        } else {
            Vec::new()
        };
        seeds.push(SeedData {
            metrics: run.clone(),
            routing,
            pre: read_spectrum(&sd.join("spectrum_pre.csv"))?,
            post: read_spectrum(&sd.join("spectrum_post.csv"))?,
        });
    }
    Ok(Variant { metrics, seeds })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DlinkError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

/// Mean over seeds of per-epoch, per-layer routing weights.
fn mean_routing(v: &Variant) -> BTreeMap<usize, Vec<f64>> {
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for s in &v.seeds {
        for (epoch, w) in &s.routing {
            let e = acc.entry(*epoch).or_insert_with(|| (vec![0.0; w.len()], 0));
            e.0.iter_mut().zip(w).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(epoch, (sum, n))| (epoch, sum.into_iter().map(|x| x / n as f64).collect()))
        .collect()
}

fn mean_spectrum(rows: &[&[SpectrumRow]]) -> Vec<(f64, f64)> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let p = rows.iter().filter_map(|s| s.get(k)).map(|s| s.mean_power).sum::<f64>() / rows.len() as f64;
            (r.frequency, p)
        })
        .collect()
}

pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<String> {
    let mut variants = Vec::new();
    for dir in run_dirs {
        match load_variant(dir) {
            Ok(v) => variants.push(v),
            Err(e) => warn!("skipping incomplete run directory {}: {e}", dir.display()),
        }
    }
    if variants.is_empty() {
        return Err(DlinkError::Usage("no complete run directories to report on".into()));
    }
    fs::create_dir_all(out).map_err(|e| DlinkError::io(out, e))?;

    // (a) routing evolution
    let mut w = csv_writer(&out.join("routing_evolution.csv"))?;
    w.write_record(["variant", "seed", "epoch", "layer", "weight"]).map_err(csv_err)?;
    let mut charts = 0;
    for v in &variants {
        for s in &v.seeds {
            for (epoch, weights) in &s.routing {
                for (l, x) in weights.iter().enumerate() {
                    w.write_record([
                        v.metrics.variant.clone(),
                        s.metrics.seed.to_string(),
                        epoch.to_string(),
                        (l + 1).to_string(),
                        x.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        let mean = mean_routing(v);
        let layers = mean.values().next().map_or(0, Vec::len);
        if layers > 0 {
            let series: Vec<Series> = (0..layers)
                .map(|l| Series {
                    name: format!("layer {}", l + 1),
                    points: mean.iter().map(|(e, w)| (*e as f64, w[l])).collect(),
                })
                .collect();
            let title = format!("Routing weights, {} (mean over seeds)", v.metrics.variant);
            write_file(
                &out.join(format!("routing_{}.svg", v.metrics.variant)),
                &chart(&title, "epoch", "weight", &series, Style::Lines),
            )?;
            charts += 1;
        }
    }
    w.flush().map_err(|e| DlinkError::io(out, e))?;

    // (b) pre/post-compression spectra
    let mut w = csv_writer(&out.join("spectra.csv"))?;
    w.write_record(["variant", "seed", "stage", "bin", "frequency", "mean_power", "tail_energy"])
        .map_err(csv_err)?;
    for v in &variants {
        for s in &v.seeds {
            for (stage, rows, tail) in [
                ("pre", &s.pre, s.metrics.tail_energy_pre),
                ("post", &s.post, s.metrics.tail_energy_post),
            ] {
                for r in rows.iter() {
                    w.write_record([
                        v.metrics.variant.clone(),
                        s.metrics.seed.to_string(),
                        stage.to_string(),
                        r.bin.to_string(),
                        r.frequency.to_string(),
                        r.mean_power.to_string(),
                        tail.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| DlinkError::io(out, e))?;
    for stage in ["pre", "post"] {
        let series: Vec<Series> = variants
            .iter()
            .map(|v| {
                let rows: Vec<&[SpectrumRow]> = v
                    .seeds
                    .iter()
                    .map(|s| if stage == "pre" { s.pre.as_slice() } else { s.post.as_slice() })
                    .collect();
                Series {
                    name: v.metrics.variant.clone(),
                    points: mean_spectrum(&rows)
                        .into_iter()
                        .map(|(f, p)| (f, p.max(1e-300).log10()))
                        .collect(),
                }
            })
            .collect();
        let title = format!("{stage}-compression mean power spectrum");
        write_file(
            &out.join(format!("spectra_{stage}.svg")),
            &chart(&title, "frequency (Hz)", "log10 power", &series, Style::Lines),
        )?;
        charts += 1;
    }

    // (c) accuracy against cost
    let mut w = csv_writer(&out.join("efficiency.csv"))?;
    w.write_record([
        "variant",
        "student",
        "seeds",
        "params",
        "flops",
        "router_params",
        "acc_balanced_mean",
        "acc_balanced_std",
    ])
    .map_err(csv_err)?;
    let mut points = Vec::new();
    for v in &variants {
        let first = &v.metrics.runs[0];
        let s = &v.metrics.summary;
        w.write_record([
            v.metrics.variant.clone(),
            v.metrics.student.clone(),
            s.seeds.to_string(),
            first.student_params.to_string(),
            first.student_flops.to_string(),
            first.router_params.to_string(),
            s.mean.acc_balanced.to_string(),
            s.std.acc_balanced.to_string(),
        ])
        .map_err(csv_err)?;
        points.push(Series {
            name: v.metrics.variant.clone(),
            points: vec![(first.student_flops as f64, s.mean.acc_balanced)],
        });
    }
    w.flush().map_err(|e| DlinkError::io(out, e))?;
    write_file(
        &out.join("efficiency.svg"),
        &chart("Accuracy against cost", "FLOPs per sample", "balanced accuracy", &points, Style::Points),
    )?;
    charts += 1;

    Ok(format!(
        "report over {} variant(s): {charts} charts and 3 CSV tables in {}",
        variants.len(),
        out.display()
    ))
}
