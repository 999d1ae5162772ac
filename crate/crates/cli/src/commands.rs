//! The four subcommands.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use insgp_core::cls::write_cls_csv;
use insgp_core::experiments::{
    generate, nlpd, run_comparison, smse, write_metrics_csv, write_tags_csv, DataSource, SyntheticKind,
};
use insgp_core::geo::{
    load_locations_csv, load_predictions_csv, load_rates_csv, write_predictions_csv, write_rates_csv, Location,
    PredictionRow,
};
use insgp_core::gp::PredictiveResult;
use insgp_core::inference::write_chain_csv;
use insgp_core::pipeline::{cls_dumps, fit_model, prepare};
use insgp_core::{Error, Result};

use crate::config::Settings;

/// What a finished command reports back to `main`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Per-run failures tallied by `compare`.
    pub failures: usize,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("`{key}` must be set for this command")))
}

pub fn generate_cmd(s: &Settings) -> Result<Outcome> {
    let data = generate(&s.synthetic)?;
    let train = s.out.join("train.csv");
    let test = s.out.join("test.csv");
    write_rates_csv(&train, &data.train)?;
    write_rates_csv(&test, &data.test)?;
    let mut files = vec![train, test];
    if s.synthetic.kind == SyntheticKind::Regional {
        let tr = s.out.join("train_tags.csv");
        let te = s.out.join("test_tags.csv");
        write_tags_csv(&tr, data.train.locations(), &data.train_tags)?;
        write_tags_csv(&te, data.test.locations(), &data.test_tags)?;
        files.extend([tr, te]);
    }
    println!("seed {}: {} training and {} test points", s.seed, data.train.len(), data.test.len());
    Ok(Outcome { files, failures: 0 })
}

pub fn fit_predict_cmd(s: &Settings) -> Result<Outcome> {
    let train = load_rates_csv(required(&s.train, "train")?)?;
    let queries: Vec<Location> = match &s.test {
        Some(p) => load_locations_csv(p)?,
        None => train.locations().to_vec(),
    };
    if s.kernel == insgp_core::kernels::KernelKind::IntrinsicNonStationary {
        s.pipeline.intrinsic.validate(train.len())?;
        if let Some(grid) = &s.pipeline.cv {
            if let Some(&k) = grid.k_candidates.iter().max() {
                if k > train.len() {
                    return Err(Error::InsufficientNeighbors {
                        requested: k,
                        available: train.len(),
                    });
                }
            }
        }
    }
    let shared = prepare(&train, &s.pipeline, &[s.kernel])?;
    let model = fit_model(&train, s.kernel, &s.pipeline, &shared, s.seed)?;
    log::info!("{}: final jitter {:e}", s.kernel, model.gp.jitter());
    let pred = model.predict(&queries)?;
    let rows: Vec<PredictionRow> = queries
        .iter()
        .zip(&pred)
        .map(|(l, p)| PredictionRow {
            location: *l,
            mean: p.mean,
            sd: p.sd(),
        })
        .collect();
    let out = s.out.join("predictions.csv");
    write_predictions_csv(&out, &rows)?;
    let mut files = vec![out];
    if s.dump_cls {
        let dumps = cls_dumps(&model, &shared)?;
        for (name, set) in [("raw", dumps.raw), ("smoothed", dumps.smoothed), ("regional", dumps.regional)] {
            if let Some(set) = set {
                let p = s.out.join(format!("cls_{name}.csv"));
                write_cls_csv(&p, train.locations(), &set)?;
                files.push(p);
            }
        }
    }
    if s.dump_chain {
        if let Some(c) = &model.chain {
            let p = s.out.join("chain.csv");
            write_chain_csv(&p, c)?;
            files.push(p);
        }
    }
    println!("{}: {} predictions written", s.kernel, rows.len());
    Ok(Outcome { files, failures: 0 })
}

fn key(l: &Location) -> (u64, u64) {
    (l.lat().to_bits(), l.lon().to_bits())
}

pub fn evaluate_cmd(s: &Settings) -> Result<Outcome> {
    let pred = load_predictions_csv(required(&s.predictions, "predictions")?)?;
    let truth = load_rates_csv(required(&s.truth, "truth")?)?;
    let by_loc: HashMap<(u64, u64), &PredictionRow> = pred.iter().map(|r| (key(&r.location), r)).collect();
    let mut y = Vec::with_capacity(truth.len());
    let mut matched = Vec::with_capacity(truth.len());
    for (l, v) in truth.locations().iter().zip(truth.values()) {
        let r = by_loc.get(&key(l)).ok_or(Error::LocationMismatch {
            lat: l.lat(),
            lon: l.lon(),
        })?;
        y.push(*v);
        matched.push(PredictiveResult {
            mean: r.mean,
            variance: r.sd * r.sd,
        });
    }
    if pred.len() != truth.len() {
        let truth_keys: std::collections::HashSet<(u64, u64)> = truth.locations().iter().map(key).collect();
        if let Some(extra) = pred.iter().find(|r| !truth_keys.contains(&key(&r.location))) {
            return Err(Error::LocationMismatch {
                lat: extra.location.lat(),
                lon: extra.location.lon(),
            });
        }
    }
    let means: Vec<f64> = matched.iter().map(|p| p.mean).collect();
    let s_mse = smse(&y, &means)?;
    let n_lpd = nlpd(&y, &matched)?;
    println!("smse {s_mse}\nnlpd {n_lpd}");
    let out = s.out.join("metrics.csv");
    write_metrics_csv(&out, s_mse, n_lpd)?;
    Ok(Outcome {
        files: vec![out],
        failures: 0,
    })
}

pub fn compare_cmd(s: &Settings) -> Result<Outcome> {
    let (source, label) = match &s.data_file {
        Some(p) => (
            DataSource::Dataset {
                data: load_rates_csv(p)?,
                n_train: s.synthetic.n_train,
            },
            "DATA",
        ),
        None => (
            DataSource::Synthetic(s.synthetic.clone()),
            match s.synthetic.kind {
                SyntheticKind::Regional => "GIA",
                SyntheticKind::Smooth2d => "SIM",
            },
        ),
    };
    let report = run_comparison(&source, &s.methods, s.n_runs, s.seed, &s.pipeline)?;
    let csv = s.out.join("report.csv");
    report.write_csv(&csv)?;
    let mut files = vec![csv];
    if report.n_regions > 0 {
        let p = s.out.join("report_regions.csv");
        report.write_region_csv(&p)?;
        files.push(p);
    }
    let table = report.table(label);
    let p = s.out.join("table.txt");
    std::fs::write(&p, &table)?;
    files.push(p);
    print!("{table}");
    for f in &report.failures {
        eprintln!(
            "run {} failed{}: {}",
            f.run,
            f.method.map(|m| format!(" ({m})")).unwrap_or_default(),
            f.message
        );
    }
    Ok(Outcome {
        files,
        failures: report.failures.len(),
    })
}
