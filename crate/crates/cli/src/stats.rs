//! Batch-norm running statistics export.

use std::fmt::Write as _;

use oat_core::layers::{Branch, LayerState};
use oat_core::tensor::Scalar;
use oat_core::Model;

pub const STATS_HEADER: &str = "layer,width,branch,channel,running_mean,running_var";

/// Every running mean and variance, one row per channel.
pub fn stats_csv<F: Scalar>(model: &Model<F>) -> String {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for (i, l) in model.layers().iter().enumerate() {
        let LayerState::Norm { bn, .. } = l else {
            continue;
        };
        for (w, unit) in bn.entries() {
            for &b in unit.branches() {
                let st = unit.select(b);
                let tag = if unit.is_dual() { b.tag() } else { "n" };
                for (c, (m, v)) in st.running_mean.iter().zip(&st.running_var).enumerate() {
                    let _ = writeln!(out, "{i},{w},{tag},{c},{m},{v}");
                }
            }
        }
    }
    out
}

/// `‖mean(BN_c) − mean(BN_a)‖₂` of one dual unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Separation {
    pub layer: usize,
    pub width: f64,
    pub distance: f64,
}

/// Branch separation of every dual normalization unit, in layer order.
pub fn branch_separation<F: Scalar>(model: &Model<F>) -> Vec<Separation> {
    let mut out = Vec::new();
    for (i, l) in model.layers().iter().enumerate() {
        let LayerState::Norm { bn, .. } = l else {
            continue;
        };
        for (w, unit) in bn.entries() {
            if !unit.is_dual() {
                continue;
            }
            let (c, a) = (unit.select(Branch::Clean), unit.select(Branch::Adversarial));
            let d2: f64 = c
                .running_mean
                .iter()
                .zip(&a.running_mean)
                .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
                .sum();
            out.push(Separation {
                layer: i,
                width: *w,
                distance: d2.sqrt(),
            });
        }
    }
    out
}

/// Separation of the last normalization layer at `width`.
pub fn last_layer_separation<F: Scalar>(model: &Model<F>, width: f64) -> Option<f64> {
    let all = branch_separation(model);
    let last = all.iter().map(|s| s.layer).max()?;
    all.iter()
        .find(|s| s.layer == last && s.width == width)
        .map(|s| s.distance)
}

pub fn separation_csv(rows: &[Separation]) -> String {
    let mut out = String::from("layer,width,distance\n");
    for s in rows {
        let _ = writeln!(out, "{},{},{}", s.layer, s.width, s.distance);
    }
    out
}
