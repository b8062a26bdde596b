//! Grid sweeps over the attention-pull layer and the two loss weights.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diagnostics::EvalReport;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub apt_layers: Vec<usize>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl SweepGrid {
    /// Layers 3, 6, 9, 12 at α = β = 1.
    pub fn table_a1() -> Self {
        Self {
            apt_layers: vec![3, 6, 9, 12],
            alphas: vec![1.0],
            betas: vec![1.0],
        }
    }

    /// β over 0.1..0.9 at layer 6, α = 1.
    pub fn table_a2() -> Self {
        Self {
            apt_layers: vec![6],
            alphas: vec![1.0],
            betas: vec![0.1, 0.2, 0.3, 0.5, 0.7, 0.9],
        }
    }

    /// α over 0.6..1.8 at layer 6, β = 0.1.
    pub fn table_a3() -> Self {
        Self {
            apt_layers: vec![6],
            alphas: vec![0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8],
            betas: vec![0.1],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table-a1" | "layers" => Ok(Self::table_a1()),
            "table-a2" | "beta" => Ok(Self::table_a2()),
            "table-a3" | "alpha" => Ok(Self::table_a3()),
            _ => Err(Error::Config(format!(
                "unknown sweep preset {name:?} (expected table-a1, table-a2 or table-a3)"
            ))),
        }
    }

    /// A single cell at the given values.
    pub fn single(apt_layer: usize, alpha: f64, beta: f64) -> Self {
        Self {
            apt_layers: vec![apt_layer],
            alphas: vec![alpha],
            betas: vec![beta],
        }
    }

    /// Replace one axis from `key=v1,v2,...` with key `apt_layer`, `alpha` or `beta`.
    pub fn set_axis(&mut self, spec: &str) -> Result<()> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {spec:?} is not key=v1,v2,...")))?;
        let parts: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if parts.is_empty() {
            return Err(Error::Config(format!("grid axis {key} has no values")));
        }
        let bad = |v: &str| Error::Config(format!("grid axis {key}: cannot parse {v:?}"));
        match key.trim().replace('-', "_").as_str() {
            "apt_layer" | "layer" => {
                self.apt_layers = parts.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?
            }
            "alpha" => self.alphas = parts.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
            "beta" => self.betas = parts.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?,
            other => return Err(Error::Config(format!("unknown grid axis {other:?}"))),
        }
        Ok(())
    }

    /// Cells in layer-major, then α, then β order.
    pub fn cells(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &l in &self.apt_layers {
            for &a in &self.alphas {
                for &b in &self.betas {
                    out.push((l, a, b));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub apt_layer: usize,
    pub alpha: f64,
    pub beta: f64,
    /// The evaluation, or the error message of a failed cell.
    pub result: std::result::Result<EvalReport, String>,
}

/// Runs `run_cell` once per grid cell with `base` adjusted to the cell.
/// A failing cell is recorded and the grid continues.
pub fn sweep<F>(grid: &SweepGrid, base: &ObjectiveConfig, mut run_cell: F) -> Vec<SweepCell>
where
    F: FnMut(&ObjectiveConfig) -> Result<EvalReport>,
{
    grid.cells()
        .into_iter()
        .map(|(apt_layer, alpha, beta)| {
            let cfg = ObjectiveConfig {
                apt_layer: Some(apt_layer),
                alpha,
                beta,
                ..base.clone()
            };
            let result = run_cell(&cfg).map_err(|e| {
                log::warn!("sweep cell layer={apt_layer} alpha={alpha} beta={beta} failed: {e}");
                e.to_string()
            });
            SweepCell {
                apt_layer,
                alpha,
                beta,
                result,
            }
        })
        .collect()
}

/// `apt_layer,alpha,beta,status,<languages...>,avg`, one row per cell.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut langs: Vec<&str> = Vec::new();
    for c in cells {
        if let Ok(r) = &c.result {
            for l in r.language_names() {
                if !langs.contains(&l) {
                    langs.push(l);
                }
            }
        }
    }
    let mut s = String::from("apt_layer,alpha,beta,status");
    for l in &langs {
        let _ = write!(s, ",{l}");
    }
    s.push_str(",avg\n");
    for c in cells {
        let _ = write!(s, "{},{},{}", c.apt_layer, c.alpha, c.beta);
        match &c.result {
            Ok(r) => {
                s.push_str(",ok");
                for l in &langs {
                    let _ = write!(s, ",{}", crate::diagnostics::format_accuracy(r.accuracy(l)));
                }
                let _ = writeln!(s, ",{}", crate::diagnostics::format_accuracy(r.average));
            }
            Err(_) => {
                s.push_str(",failed");
                s.push_str(&",".repeat(langs.len() + 1));
                s.push('\n');
            }
        }
    }
    s
}

pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    fs::write(path, sweep_csv(cells)).map_err(|e| Error::io(path, e))
}
