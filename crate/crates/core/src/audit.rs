//! Parameter accounting: enumerated counts by module, closed forms for the
//! projection modules, and the FAPM-vs-baseline comparison across widths.

use std::fmt::Write as _;

use serde::Serialize;

use crate::adapter::{adapter_param_count, PREFIX as ADAPTER};
use crate::backbone::{backbone_param_count, PREFIX as BACKBONE};
use crate::config::{FapmConfig, ModelConfig, Projection};
use crate::decoder::{decoder_param_count, PREFIX as DECODER};
use crate::fapm::{BASELINE_PREFIX, PREFIX as FAPM};
use crate::params::ParamStore;

/// Reported activated-parameter count of the reference Small model. Kept
/// for context only: adapter and decoder internals differ here, so this is
/// not an equality target.
pub const REFERENCE_SMALL_ACTIVATED: usize = 5_106_000;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub adapter: usize,
    pub fapm: usize,
    pub baseline: usize,
    pub decoder: usize,
    pub total_trainable: usize,
    pub total_frozen: usize,
}

impl ParamBreakdown {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("module\tparams\n");
        for (name, v) in [
            ("backbone(frozen)", self.backbone),
            ("adapter", self.adapter),
            ("fapm", self.fapm),
            ("fapm_baseline", self.baseline),
            ("decoder", self.decoder),
            ("total_trainable", self.total_trainable),
            ("total_frozen", self.total_frozen),
        ] {
            let _ = writeln!(s, "{name}\t{v}");
        }
        s
    }
}

/// Exact element counts by module prefix and by trainable flag.
pub fn count_params(store: &ParamStore) -> ParamBreakdown {
    let by_prefix = |p: &str| store.numel_where(|n, _| n.starts_with(p));
    ParamBreakdown {
        backbone: by_prefix(BACKBONE),
        adapter: by_prefix(ADAPTER),
        // "fapm." does not match "fapm_baseline."
        fapm: by_prefix(FAPM),
        baseline: by_prefix(BASELINE_PREFIX),
        decoder: by_prefix(DECODER),
        total_trainable: store.numel_where(|_, e| e.trainable),
        total_frozen: store.numel_where(|_, e| !e.trainable),
    }
}

/// FAPM weights + biases for input width `d`, rank `r`, output widths
/// `out_dims`, depthwise kernel `k` and SE reduction `se_r`. The shortcut
/// term is absent for scales with `out_dims[i] == r` (identity shortcut).
pub fn fapm_param_formula(d: usize, r: usize, out_dims: &[usize], k: usize, se_r: usize) -> usize {
    let shared = d * r + r;
    let per_scale: usize = out_dims
        .iter()
        .map(|&o| {
            let h = o.div_ceil(se_r).max(1);
            let shortcut = if o == r { 0 } else { r * o + o };
            (d * r + r) + (r * 2 * r + 2 * r) + (r * o + o) + (o * k * k + o) + (o * o + o) + (2 * o * h + h + o) + shortcut
        })
        .sum();
    shared + per_scale
}

/// Per-scale 1x1 projection `d -> out_dims[i]` with bias.
pub fn baseline_param_formula(d: usize, out_dims: &[usize]) -> usize {
    out_dims.iter().map(|&o| d * o + o).sum()
}

/// Closed-form count of the projection module selected by `cfg`.
pub fn projection_param_formula(cfg: &ModelConfig) -> usize {
    let f = &cfg.fapm;
    match cfg.projection {
        Projection::Fapm => fapm_param_formula(f.in_dim, f.rank, &f.out_dims, f.dw_kernel, f.se_reduction),
        Projection::Baseline => baseline_param_formula(f.in_dim, &f.out_dims),
    }
}

/// The breakdown `count_params` would report for a model built from
/// `cfg`, computed without allocating any weights.
pub fn formula_breakdown(cfg: &ModelConfig) -> ParamBreakdown {
    let backbone = backbone_param_count(&cfg.backbone);
    let adapter = adapter_param_count(&cfg.adapter);
    let decoder = decoder_param_count(&cfg.decoder);
    let projection = projection_param_formula(cfg);
    let (fapm, baseline) = match cfg.projection {
        Projection::Fapm => (projection, 0),
        Projection::Baseline => (0, projection),
    };
    ParamBreakdown {
        backbone,
        adapter,
        fapm,
        baseline,
        decoder,
        total_trainable: adapter + projection + decoder,
        total_frozen: backbone,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossoverRow {
    pub d: usize,
    pub fapm: usize,
    pub baseline: usize,
    /// `fapm - baseline`.
    pub delta: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossoverReport {
    pub rows: Vec<CrossoverRow>,
    /// d(delta)/dD = R(N+1) - sum D'_i.
    pub slope: i64,
    /// delta at D = 0.
    pub intercept: i64,
    /// Smallest D >= 1 from which the baseline is strictly larger for every
    /// larger D as well; `None` if that never happens.
    pub threshold: Option<usize>,
    /// Smallest grid D with a strictly larger baseline.
    pub first_baseline_larger: Option<usize>,
}

/// Both module counts for each input width in `d_grid` (with the
/// projection's other settings taken from `cfg`).
pub fn crossover_report(cfg: &FapmConfig, d_grid: &[usize]) -> CrossoverReport {
    let (r, outs, k, se) = (cfg.rank, &cfg.out_dims, cfg.dw_kernel, cfg.se_reduction);
    let rows: Vec<CrossoverRow> = d_grid
        .iter()
        .map(|&d| {
            let fapm = fapm_param_formula(d, r, outs, k, se);
            let baseline = baseline_param_formula(d, outs);
            CrossoverRow { d, fapm, baseline, delta: fapm as i64 - baseline as i64 }
        })
        .collect();
    let slope = (r * (outs.len() + 1)) as i64 - outs.iter().sum::<usize>() as i64;
    let intercept = fapm_param_formula(0, r, outs, k, se) as i64 - baseline_param_formula(0, outs) as i64;
    // delta(D) = slope * D + intercept < 0 for all D >= threshold
    let threshold = match slope {
        s if s < 0 => Some(if intercept < 0 { 1 } else { (intercept / -s + 1) as usize }),
        0 if intercept < 0 => Some(1),
        _ => None,
    };
    let first_baseline_larger = rows.iter().find(|r| r.delta < 0).map(|r| r.d);
    CrossoverReport { rows, slope, intercept, threshold, first_baseline_larger }
}

#[derive(Serialize)]
struct PlotSeries<'a> {
    name: &'a str,
    values: Vec<u64>,
}

#[derive(Serialize)]
struct PlotSpec<'a> {
    kind: &'a str,
    title: String,
    x_label: &'a str,
    y_label: &'a str,
    x: Vec<u64>,
    series: Vec<PlotSeries<'a>>,
}

impl CrossoverReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# slope\t{}", self.slope);
        let _ = writeln!(s, "# intercept\t{}", self.intercept);
        let fmt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |d| d.to_string());
        let _ = writeln!(s, "# threshold\t{}", fmt(self.threshold));
        let _ = writeln!(s, "# first_baseline_larger\t{}", fmt(self.first_baseline_larger));
        s.push_str("D\tfapm_count\tbaseline_count\tdelta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.d, r.fapm, r.baseline, r.delta);
        }
        s
    }

    /// Line-plot description (TOML): one x axis, one series per module.
    pub fn plot_spec(&self) -> String {
        let spec = PlotSpec {
            kind: "line",
            title: format!("projection parameters vs backbone width (slope {})", self.slope),
            x_label: "D",
            y_label: "parameters",
            x: self.rows.iter().map(|r| r.d as u64).collect(),
            series: vec![
                PlotSeries { name: "fapm", values: self.rows.iter().map(|r| r.fapm as u64).collect() },
                PlotSeries { name: "baseline", values: self.rows.iter().map(|r| r.baseline as u64).collect() },
            ],
        };
        toml::to_string(&spec).expect("plot spec serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_sign_follows_rank_budget() {
        let mut cfg = FapmConfig::default();
        let small = crossover_report(&cfg, &[32, 4096]);
        assert_eq!(small.slope, 16 * 5 - 240);
        assert!(small.threshold.is_some());
        cfg.rank = 64;
        let big = crossover_report(&cfg, &[32, 4096]);
        assert_eq!(big.slope, 64 * 5 - 240);
        assert_eq!(big.threshold, None);
        assert!(big.rows.iter().all(|r| r.delta > 0));
    }

    #[test]
    fn threshold_is_tight() {
        let cfg = FapmConfig::default();
        let t = crossover_report(&cfg, &[1]).threshold.unwrap();
        let rep = crossover_report(&cfg, &[t - 1, t, t + 1]);
        assert!(rep.rows[0].delta >= 0);
        assert!(rep.rows[1].delta < 0 && rep.rows[2].delta < 0);
    }

    #[test]
    fn tsv_and_plot() {
        let rep = crossover_report(&FapmConfig::default(), &[32, 64]);
        let tsv = rep.to_tsv();
        assert!(tsv.contains("D\tfapm_count\tbaseline_count\tdelta\n"));
        let plot: toml::Value = toml::from_str(&rep.plot_spec()).unwrap();
        assert_eq!(plot["series"].as_array().unwrap().len(), 2);
    }
}
