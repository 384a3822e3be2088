//! Ablation grid: one CSV per axis, one row per cell.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::FusionOrder;
use crate::model::Model;
use crate::parallel::{self, Execution};
use crate::train::{train, PreparedSplits};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Modules,
    PromptSize,
    Eta,
    ThetaBeta,
    FusionOrder,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Modules, Axis::PromptSize, Axis::Eta, Axis::ThetaBeta, Axis::FusionOrder];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Modules => "modules",
            Axis::PromptSize => "prompt_size",
            Axis::Eta => "eta",
            Axis::ThetaBeta => "theta_beta",
            Axis::FusionOrder => "fusion_order",
        }
    }

    /// Label column names for this axis.
    pub fn label_columns(self) -> &'static [&'static str] {
        match self {
            Axis::Modules => &["setting"],
            Axis::PromptSize => &["prompt_size"],
            Axis::Eta => &["eta"],
            Axis::ThetaBeta => &["theta", "beta"],
            Axis::FusionOrder => &["fusion_order"],
        }
    }

    /// `(labels, config)` for every cell, in table order.
    pub fn cells(self, base: &ModelConfig) -> Vec<(Vec<String>, ModelConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::Modules => {
                let rows: [(&str, bool, bool, bool, bool); 4] = [
                    ("BL", false, false, false, false),
                    ("+GM_w/o_cs&LF", true, false, true, false),
                    ("+GM&LF", true, true, true, false),
                    ("+GM&LF+PF", true, true, true, true),
                ];
                rows.iter()
                    .map(|&(name, gm, cs, lf, pf)| {
                        let c = with(&|c| {
                            c.use_gm = gm;
                            c.use_cs = cs;
                            c.use_lf = lf;
                            c.use_pf = pf;
                            if !gm {
                                c.prior_kv = crate::config::PriorKv::Raw;
                            }
                        });
                        (vec![name.to_string()], c)
                    })
                    .collect()
            }
            Axis::PromptSize => [4, 8, 16, 32, 64, 128, 256]
                .iter()
                .map(|&p| (vec![p.to_string()], with(&|c| c.prompt_size = p)))
                .collect(),
            Axis::Eta => [0.01, 0.05, 0.1, 0.5, 1.0]
                .iter()
                .map(|&e| (vec![e.to_string()], with(&|c| c.eta = e)))
                .collect(),
            Axis::ThetaBeta => {
                let values = [0.01, 0.1, 1.0];
                let mut out = Vec::new();
                for &t in &values {
                    for &b in &values {
                        out.push((
                            vec![t.to_string(), b.to_string()],
                            with(&|c| {
                                c.theta = t;
                                c.beta = b;
                            }),
                        ));
                    }
                }
                out
            }
            Axis::FusionOrder => [FusionOrder::image_first(), FusionOrder::language_first()]
                .iter()
                .map(|&o| (vec![o.to_string()], with(&|c| c.fusion_order = o)))
                .collect(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub labels: Vec<String>,
    pub open_acc: Option<f64>,
    pub closed_acc: Option<f64>,
    pub overall_acc: f64,
    pub n_params: usize,
    pub config_hash: String,
}

/// Trains every cell of `axis` and scores it on the test split.
pub fn run_axis(axis: Axis, base: &ModelConfig, ds: &Dataset, exec: Execution) -> Result<Vec<CellResult>> {
    let cells = axis.cells(base);
    for (_, c) in &cells {
        c.validate()?;
    }
    parallel::try_map(exec, &cells, |(labels, cfg)| {
        let mut model = Model::for_dataset(cfg.clone(), ds)?;
        train(&mut model, ds, exec, |_| {})?;
        let splits = PreparedSplits::new(&model, ds)?;
        let r = model.evaluate(&splits.test, exec)?;
        Ok(CellResult {
            labels: labels.clone(),
            open_acc: r.open_acc,
            closed_acc: r.closed_acc,
            overall_acc: r.overall_acc,
            n_params: model.param_count(),
            config_hash: cfg.hash(),
        })
    })
}

pub fn csv_path(dir: &Path, axis: Axis) -> PathBuf {
    dir.join(format!("ablation_{}.csv", axis.name()))
}

pub fn write_csv(path: &Path, axis: Axis, rows: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = axis.label_columns().to_vec();
    header.extend(["open_acc", "closed_acc", "overall_acc", "n_params", "config_hash"]);
    w.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.2}"));
    for r in rows {
        let mut rec = r.labels.clone();
        rec.extend([
            fmt(r.open_acc),
            fmt(r.closed_acc),
            fmt(Some(r.overall_acc)),
            r.n_params.to_string(),
            r.config_hash.clone(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = ModelConfig::default();
        let sizes: Vec<usize> = Axis::ALL.iter().map(|a| a.cells(&base).len()).collect();
        assert_eq!(sizes, vec![4, 7, 5, 9, 2]);
        for a in Axis::ALL {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
            for (labels, c) in a.cells(&base) {
                assert_eq!(labels.len(), a.label_columns().len());
                c.validate().unwrap();
            }
        }
        assert!("depth".parse::<Axis>().is_err());
    }
}
