use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::GenerationTrace;
use crate::image::write_heatmap_ppm;

/// Cosine similarity of every position's output features between steps
/// `t − 1` and `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub step: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Positions that turned visible between the two steps.
    pub newly_decoded: Vec<bool>,
    pub mean_newly_decoded: Option<f64>,
    pub mean_other: Option<f64>,
}

impl SimilarityMap {
    pub fn write_heatmap(&self, path: &Path, scale: usize) -> Result<()> {
        write_heatmap_ppm(
            path,
            &self.values,
            self.width,
            self.height,
            -1.0,
            1.0,
            scale,
        )
    }
}

/// Cosine of two rows; zero when either row is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Map for step `t` (1-based, `2 ≤ t ≤ T`).
pub fn similarity_map(trace: &GenerationTrace, t: usize) -> Result<SimilarityMap> {
    let total = trace.steps.len();
    if t < 2 || t > total {
        return Err(Error::Analysis(format!(
            "similarity needs 2 <= t <= {total}, got {t}"
        )));
    }
    let (prev, cur) = (&trace.steps[t - 2], &trace.steps[t - 1]);
    let (Some(fp), Some(fc)) = (&prev.features, &cur.features) else {
        return Err(Error::Analysis(
            "trace has no stored features; rerun generation with feature tracing enabled".into(),
        ));
    };
    let n = trace.final_tokens.len();
    let values: Vec<f64> = (0..n).map(|p| cosine(fp.row(p), fc.row(p))).collect();
    let newly_decoded = cur.mask_before.newly_decoded.clone();
    Ok(SimilarityMap {
        step: t,
        height: trace.final_tokens.height,
        width: trace.final_tokens.width,
        mean_newly_decoded: mean((0..n).filter(|&p| newly_decoded[p]).map(|p| values[p])),
        mean_other: mean((0..n).filter(|&p| !newly_decoded[p]).map(|p| values[p])),
        values,
        newly_decoded,
    })
}

/// Per-step means over many traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub step: usize,
    pub mean_newly_decoded: f64,
    pub mean_other: f64,
    pub samples: usize,
}

impl SimilarityStats {
    pub fn gap(&self) -> f64 {
        self.mean_other - self.mean_newly_decoded
    }
}

/// Averages each step's per-sample means across `maps[sample][step]`.
pub fn aggregate(maps: &[Vec<SimilarityMap>]) -> Vec<SimilarityStats> {
    let steps = maps.first().map_or(0, Vec::len);
    (0..steps)
        .map(|i| {
            let newly =
                mean(maps.iter().filter_map(|m| m[i].mean_newly_decoded)).unwrap_or(f64::NAN);
            let other = mean(maps.iter().filter_map(|m| m[i].mean_other)).unwrap_or(f64::NAN);
            SimilarityStats {
                step: maps[0][i].step,
                mean_newly_decoded: newly,
                mean_other: other,
                samples: maps.len(),
            }
        })
        .collect()
}

pub fn stats_csv(stats: &[SimilarityStats]) -> String {
    let mut s = String::from("step,mean_newly_decoded,mean_other,gap,samples\n");
    for st in stats {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            st.step,
            st.mean_newly_decoded,
            st.mean_other,
            st.gap(),
            st.samples
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let a = [1.0f32, 2.0, -3.0];
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((cosine(&a, &neg) + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&a, &[0.0; 3]), 0.0);
    }
}
