//! Summary statistics, histograms and Gaussian kernel density estimates.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const QUANTILE_LEVELS: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    /// Unbiased (n − 1) variance.
    pub variance: f64,
    /// Adjusted Fisher-Pearson G1; 0 for constant samples.
    pub skewness: f64,
    /// G2 excess kurtosis; 0 for constant samples, NaN below four samples.
    pub excess_kurtosis: f64,
    /// (level, value) at [`QUANTILE_LEVELS`].
    pub quantiles: Vec<(f64, f64)>,
    pub std_error: f64,
}

impl SummaryStats {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn quantile(&self, level: f64) -> Option<f64> {
        self.quantiles.iter().find(|q| q.0 == level).map(|q| q.1)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).unwrap_or(f64::NAN)
    }
}

fn sorted_finite(samples: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Moments are accumulated over the sorted sample so the result does not
/// depend on input order.
pub fn summarize(samples: &[f64]) -> Result<SummaryStats> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {}", samples.len())));
    }
    let v = sorted_finite(samples)?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in &v {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let variance = m2 * n / (n - 1.0);
    let constant = v[0] == v[v.len() - 1];
    let skewness = if constant || v.len() < 3 {
        0.0
    } else {
        let g1 = m3 / m2.powf(1.5);
        g1 * (n * (n - 1.0)).sqrt() / (n - 2.0)
    };
    let excess_kurtosis = if constant {
        0.0
    } else if v.len() < 4 {
        f64::NAN
    } else {
        let g2 = m4 / (m2 * m2) - 3.0;
        (n - 1.0) / ((n - 2.0) * (n - 3.0)) * ((n + 1.0) * g2 + 6.0)
    };
    let quantiles = QUANTILE_LEVELS.iter().map(|&p| (p, quantile_sorted(&v, p))).collect();
    Ok(SummaryStats {
        n: v.len(),
        mean,
        variance,
        skewness,
        excess_kurtosis,
        quantiles,
        std_error: (variance / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// bins + 1 edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }
}

/// Equal-width bins over [min, max], last bin closed. All-equal samples
/// collapse to one bin of zero width.
pub fn histogram(samples: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let v = sorted_finite(samples)?;
    let (lo, hi) = (v[0], v[v.len() - 1]);
    if lo == hi {
        return Ok(Histogram { edges: vec![lo, hi], counts: vec![v.len()] });
    }
    let w = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + w * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for x in &v {
        let i = (((x - lo) / w) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// 1.06 σ̂ n^{-1/5}.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let s = summarize(samples)?;
    Ok(1.06 * s.std_dev() * (s.n as f64).powf(-0.2))
}

/// Gaussian KDE with Silverman bandwidth evaluated on `grid`.
pub fn kde(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let bw = silverman_bandwidth(samples)?;
    kde_with_bandwidth(samples, grid, bw)
}

pub fn kde_with_bandwidth(samples: &[f64], grid: &[f64], bw: f64) -> Result<Vec<f64>> {
    if !(bw > 0.0 && bw.is_finite()) {
        return Err(Error::InvalidArgument(format!("kde bandwidth must be positive, got {bw}")));
    }
    let norm = 1.0 / (samples.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            samples
                .iter()
                .map(|&x| {
                    let z = (g - x) / bw;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// Evaluation grid covering the sample range plus `pad` bandwidths.
pub fn kde_grid(samples: &[f64], points: usize, pad: f64) -> Result<Vec<f64>> {
    let bw = silverman_bandwidth(samples)?;
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - pad * bw;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad * bw;
    let points = points.max(2);
    Ok((0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect())
}

pub fn write_summaries_json(rows: &[(String, SummaryStats)], path: &Path) -> Result<()> {
    let map: serde_json::Map<String, serde_json::Value> =
        rows.iter().map(|(k, s)| Ok((k.clone(), serde_json::to_value(s)?))).collect::<Result<_>>()?;
    std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

pub fn write_summaries_csv(rows: &[(String, SummaryStats)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "name".to_string(),
        "n".into(),
        "mean".into(),
        "variance".into(),
        "skewness".into(),
        "excess_kurtosis".into(),
        "std_error".into(),
    ];
    header.extend(QUANTILE_LEVELS.iter().map(|p| format!("q{:02}", (p * 100.0).round() as u32)));
    w.write_record(&header)?;
    for (name, s) in rows {
        let mut rec = vec![name.clone(), s.n.to_string()];
        rec.extend([s.mean, s.variance, s.skewness, s.excess_kurtosis, s.std_error].iter().map(|x| format!("{x:e}")));
        rec.extend(s.quantiles.iter().map(|q| format!("{:e}", q.1)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv(h: &Histogram, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lo", "hi", "count"])?;
    for (i, c) in h.counts.iter().enumerate() {
        w.write_record([format!("{:e}", h.edges[i]), format!("{:e}", h.edges[i + 1]), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
        xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum()
    }

    #[test]
    fn constant_samples() {
        let s = summarize(&[3.0; 10]).unwrap();
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.skewness, 0.0);
        assert_eq!(s.excess_kurtosis, 0.0);
        assert_eq!(s.median(), 3.0);
    }

    #[test]
    fn symmetric_three_points() {
        let s = summarize(&[1.0, -1.0, 0.0]).unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.median(), 0.0);
        assert_eq!(s.variance, 1.0);
        assert_eq!(s.skewness, 0.0);
    }

    #[test]
    fn too_few_samples() {
        assert!(summarize(&[1.0]).is_err());
        assert!(summarize(&[]).is_err());
        assert!(summarize(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn small_sample_moments_match_hand_values() {
        // 1, 2, 3, 10: mean 4, m2 = 12.5, m3 = 45, m4 = 348.5 (divided by n)
        let s = summarize(&[1.0, 2.0, 3.0, 10.0]).unwrap();
        assert!((s.variance - 50.0 / 3.0).abs() < 1e-12);
        let g1 = 45.0 / 12.5f64.powf(1.5);
        assert!((s.skewness - g1 * (12.0f64).sqrt() / 2.0).abs() < 1e-12);
        let g2 = 348.5 / 156.25 - 3.0;
        assert!((s.excess_kurtosis - 3.0 / 2.0 * (5.0 * g2 + 6.0)).abs() < 1e-12);
        assert_eq!(s.quantile(0.25), Some(1.75));
    }

    #[test]
    fn normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let xs: Vec<f64> = Normal::new(0.0, 1.0).unwrap().sample_iter(&mut rng).take(n).collect();
        let s = summarize(&xs).unwrap();
        assert!(s.skewness.abs() < 0.03, "skew {}", s.skewness);
        assert!(s.excess_kurtosis.abs() < 0.06, "kurt {}", s.excess_kurtosis);
        assert!((s.variance - 1.0).abs() < 0.02);
    }

    #[test]
    fn single_sample_histogram() {
        let h = histogram(&[2.5], 1).unwrap();
        assert_eq!(h.counts, vec![1]);
        let h = histogram(&[2.5, 2.5, 2.5], 10).unwrap();
        assert_eq!(h.counts, vec![3]);
        assert!(histogram(&[1.0], 0).is_err());
    }

    #[test]
    fn histogram_edges_include_max() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 2).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 3]);
    }

    #[test]
    fn kde_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = Normal::new(2.0, 3.0).unwrap().sample_iter(&mut rng).take(500).collect();
        let grid = kde_grid(&xs, 4001, 5.0).unwrap();
        let ys = kde(&xs, &grid).unwrap();
        assert!(ys.iter().all(|&y| y >= 0.0));
        assert!((trapezoid(&grid, &ys) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kde_zero_bandwidth_is_error() {
        assert!(kde(&[1.0, 1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(kde_with_bandwidth(&[1.0, 2.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn kde_bimodal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Normal::new(-4.0, 1.0).unwrap();
        let b = Normal::new(4.0, 1.0).unwrap();
        let xs: Vec<f64> =
            (0..4000).map(|i| if i % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) }).collect();
        let grid: Vec<f64> = (0..=800).map(|i| -10.0 + 0.025 * i as f64).collect();
        let ys = kde(&xs, &grid).unwrap();
        let peaks: Vec<f64> =
            (1..ys.len() - 1).filter(|&i| ys[i] > ys[i - 1] && ys[i] >= ys[i + 1]).map(|i| grid[i]).collect();
        assert_eq!(peaks.len(), 2, "{peaks:?}");
        assert!((peaks[0] + 4.0).abs() < 0.5 && (peaks[1] - 4.0).abs() < 0.5, "{peaks:?}");
    }

    #[test]
    fn exports() {
        let dir = tempfile::tempdir().unwrap();
        let s = summarize(&[1.0, 2.0, 4.0]).unwrap();
        write_summaries_json(&[("a".into(), s.clone())], &dir.path().join("s.json")).unwrap();
        write_summaries_csv(&[("a".into(), s)], &dir.path().join("s.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert!(text.starts_with("name,n,mean"));
        assert!(text.contains("q99"));
        let h = histogram(&[1.0, 2.0, 3.0], 2).unwrap();
        write_histogram_csv(&h, &dir.path().join("h.csv")).unwrap();
    }

    proptest! {
        #[test]
        fn summarize_is_permutation_invariant(mut xs in prop::collection::vec(-1e3f64..1e3, 2..60), seed in any::<u64>()) {
            let a = summarize(&xs).unwrap();
            use rand::seq::SliceRandom;
            xs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = summarize(&xs).unwrap();
            prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }

        #[test]
        fn quantiles_monotone_and_variance_nonnegative(xs in prop::collection::vec(-1e3f64..1e3, 2..60)) {
            let s = summarize(&xs).unwrap();
            prop_assert!(s.variance >= 0.0);
            prop_assert!(s.quantiles.windows(2).all(|w| w[0].1 <= w[1].1));
        }

        #[test]
        fn histogram_counts_sum_to_n(xs in prop::collection::vec(-1e3f64..1e3, 1..200), bins in 1usize..40) {
            let h = histogram(&xs, bins).unwrap();
            prop_assert_eq!(h.total(), xs.len());
            prop_assert!(h.edges.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
