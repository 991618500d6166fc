use serde::{Deserialize, Serialize};

/// Converts a picosecond RTT to whole nanoseconds, rounding half up.
pub fn ps_to_ns(ps: u64) -> u64 {
    (ps + 500) / 1000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower_ns: u64,
    pub upper_ns: u64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_ns: Option<f64>,
    pub median_ns: Option<u64>,
    pub stddev_ns: Option<f64>,
    pub p95_ns: Option<u64>,
    pub p99_ns: Option<u64>,
    pub p999_ns: Option<u64>,
    pub min_ns: Option<u64>,
    pub max_ns: Option<u64>,
    pub drop_pct: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Nearest-rank percentile `num/den` of an ascending slice.
fn nearest_rank(sorted: &[u64], num: u64, den: u64) -> u64 {
    let n = sorted.len() as u64;
    let rank = (num * n).div_ceil(den).max(1);
    sorted[(rank - 1) as usize]
}

impl LatencyStats {
    /// Exact statistics over RTT samples in picoseconds.
    pub fn from_samples(rtt_ps: &[u64], tx: u64, rx: u64, bin_ns: u64) -> Self {
        let drop_pct = if tx == 0 { 0.0 } else { 100.0 * tx.saturating_sub(rx) as f64 / tx as f64 };
        let mut ns: Vec<u64> = rtt_ps.iter().map(|&p| ps_to_ns(p)).collect();
        ns.sort_unstable();
        let count = ns.len() as u64;
        if count == 0 {
            return LatencyStats {
                count,
                mean_ns: None,
                median_ns: None,
                stddev_ns: None,
                p95_ns: None,
                p99_ns: None,
                p999_ns: None,
                min_ns: None,
                max_ns: None,
                drop_pct,
                histogram: Vec::new(),
            };
        }
        let sum: u128 = ns.iter().map(|&x| x as u128).sum();
        let sum_sq: u128 = ns.iter().map(|&x| x as u128 * x as u128).sum();
        let n = count as u128;
        // population variance = (n*sum_sq - sum^2) / n^2
        let var_num = n * sum_sq - sum * sum;
        let stddev = (var_num as f64).sqrt() / count as f64;
        let bin = bin_ns.max(1);
        let lo = ns[0] / bin;
        let hi = ns[ns.len() - 1] / bin;
        let mut histogram: Vec<HistogramBin> = (lo..=hi)
            .map(|b| HistogramBin { lower_ns: b * bin, upper_ns: (b + 1) * bin, count: 0 })
            .collect();
        for &x in &ns {
            histogram[(x / bin - lo) as usize].count += 1;
        }
        LatencyStats {
            count,
            mean_ns: Some(sum as f64 / count as f64),
            median_ns: Some(nearest_rank(&ns, 1, 2)),
            stddev_ns: Some(stddev),
            p95_ns: Some(nearest_rank(&ns, 95, 100)),
            p99_ns: Some(nearest_rank(&ns, 99, 100)),
            p999_ns: Some(nearest_rank(&ns, 999, 1000)),
            min_ns: Some(ns[0]),
            max_ns: Some(ns[ns.len() - 1]),
            drop_pct,
            histogram,
        }
    }
}
