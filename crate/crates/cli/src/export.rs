//! CSV tables and PGM images.

use std::fmt::Write as _;

use oat_core::eval::TradeoffPoint;

pub const SWEEP_HEADER: &str = "lambda,width,sa,ra,attack,epsilon,steps,seed";

/// Sweep table; accuracies with two decimals.
pub fn sweep_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2},{},{},{},{}",
            p.lambda, p.width, p.sa, p.ra, p.attack, p.epsilon, p.steps, p.seed
        );
    }
    out
}

/// Parses a table written by [`sweep_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<TradeoffPoint>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err("missing sweep header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("row {}: expected 8 fields", i + 1));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| format!("row {}: bad number {s:?}", i + 1))
            };
            Ok(TradeoffPoint {
                lambda: num(f[0])?,
                width: num(f[1])?,
                sa: num(f[2])?,
                ra: num(f[3])?,
                attack: f[4].to_string(),
                epsilon: num(f[5])?,
                steps: f[6]
                    .parse()
                    .map_err(|_| format!("row {}: bad steps", i + 1))?,
                seed: f[7]
                    .parse()
                    .map_err(|_| format!("row {}: bad seed", i + 1))?,
            })
        })
        .collect()
}

/// Binary greyscale image, `P5` with maxval 255.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Min-max scales `values` to `0..=255`; a constant map becomes mid-grey.
pub fn normalize_u8(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Maps `[0,1]` intensities to `0..=255` without rescaling.
pub fn unit_u8(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
