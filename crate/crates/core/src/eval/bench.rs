use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention, map_peak_elements, reset_map_peak, AttentionKernel, AttentionVariant};
use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Token counts, ascending.
    pub ns: Vec<usize>,
    pub d: usize,
    pub repetitions: usize,
    /// Kept entries per row for kSA and EkSA.
    pub k: usize,
    /// Cells whose attention map would exceed this many elements are skipped.
    pub max_map_elements: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ns: vec![1024, 4096, 16384],
            d: 64,
            repetitions: 3,
            k: 50,
            max_map_elements: 1 << 28,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub variant: AttentionVariant,
    pub n: usize,
    pub d: usize,
    /// Median wall time in seconds; `None` when skipped.
    pub median_s: Option<f64>,
    /// Largest attention map materialized, in elements.
    pub map_elements: usize,
    pub skipped: Option<String>,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Times SA, kSA and EkSA on random `n×d` queries, keys and values.
pub fn attention_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchCell>> {
    if cfg.ns.is_empty() || cfg.ns.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("benchmark sizes must be non-empty and ascending".into()));
    }
    if cfg.repetitions == 0 || cfg.d == 0 {
        return Err(Error::Config("benchmark needs d ≥ 1 and at least one repetition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d;
    let out = ConvParams::new(random(&mut rng, &[d, d, 1, 1]), random(&mut rng, &[d]))?;
    let mut cells = Vec::new();
    for &n in &cfg.ns {
        let (q, k, v) = (random(&mut rng, &[n, d]), random(&mut rng, &[n, d]), random(&mut rng, &[n, d]));
        for variant in [AttentionVariant::Sa, AttentionVariant::Ksa, AttentionVariant::Eksa] {
            let kernel = match variant {
                AttentionVariant::Sa => AttentionKernel::Sa,
                AttentionVariant::Ksa => AttentionKernel::Ksa(cfg.k.min(n)),
                _ => AttentionKernel::Eksa(cfg.k.min(d)),
            };
            let (rows, cols) = kernel.map_dims(n, d);
            let elements = rows * cols;
            let mut cell = BenchCell {
                variant,
                n,
                d,
                median_s: None,
                map_elements: elements,
                skipped: None,
            };
            if elements > cfg.max_map_elements {
                cell.skipped = Some(format!("map of {elements} elements exceeds the {} budget", cfg.max_map_elements));
                cells.push(cell);
                continue;
            }
            if let Err(e) = kernel.validate(n, d) {
                cell.skipped = Some(e.to_string());
                cells.push(cell);
                continue;
            }
            let mut times = Vec::with_capacity(cfg.repetitions);
            reset_map_peak();
            for _ in 0..cfg.repetitions {
                let start = Instant::now();
                let y = attention(kernel, &q, &k, &v, &out, 1.0)?;
                times.push(start.elapsed().as_secs_f64());
                std::hint::black_box(y);
            }
            cell.map_elements = map_peak_elements();
            cell.median_s = Some(median(times));
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// `time(n1) / time(n0)` for one variant, if both cells ran.
pub fn growth_factor(cells: &[BenchCell], variant: AttentionVariant, n0: usize, n1: usize) -> Option<f64> {
    let t = |n| {
        cells
            .iter()
            .find(|c| c.variant == variant && c.n == n)
            .and_then(|c| c.median_s)
    };
    Some(t(n1)? / t(n0)?)
}

/// `variant,n,d,median_s,map_elements,status`.
pub fn bench_csv(cells: &[BenchCell]) -> String {
    let mut s = String::from("variant,n,d,median_s,map_elements,status\n");
    for c in cells {
        let time = c.median_s.map(|t| format!("{t:.6}")).unwrap_or_default();
        let status = if c.skipped.is_some() { "skipped" } else { "ok" };
        s.push_str(&format!("{},{},{},{time},{},{status}\n", c.variant.name(), c.n, c.d, c.map_elements));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_benchmark_records_maps() {
        let cfg = BenchConfig {
            ns: vec![16, 64],
            d: 8,
            repetitions: 3,
            k: 4,
            max_map_elements: 1024,
            seed: 1,
        };
        let cells = attention_benchmark(&cfg).unwrap();
        assert_eq!(cells.len(), 6);
        let find = |v, n| cells.iter().find(|c| c.variant == v && c.n == n).unwrap();
        assert_eq!(find(AttentionVariant::Sa, 16).map_elements, 256);
        assert_eq!(find(AttentionVariant::Eksa, 64).map_elements, 64);
        assert_eq!(find(AttentionVariant::Eksa, 16).map_elements, 64);
        // 64² = 4096 exceeds the budget.
        assert!(find(AttentionVariant::Sa, 64).skipped.is_some());
        assert!(find(AttentionVariant::Ksa, 16).median_s.is_some());
        assert!(growth_factor(&cells, AttentionVariant::Eksa, 16, 64).is_some());
        assert!(growth_factor(&cells, AttentionVariant::Sa, 16, 64).is_none());
        let csv = bench_csv(&cells);
        assert!(csv.starts_with("variant,n,d,median_s,map_elements,status\nSA,16,8,"));
        assert!(csv.contains("SA,64,8,,4096,skipped"));
    }

    #[test]
    fn rejects_unsorted_sizes() {
        let cfg = BenchConfig {
            ns: vec![64, 16],
            ..BenchConfig::default()
        };
        assert!(attention_benchmark(&cfg).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
