//! Synthetic fold-level data with a planted effect, for calibration runs
//! and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::results::{FoldRecord, PairData, ResultTable, ResultsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_datasets: usize,
    pub n_folds: usize,
    /// Population mean of the per-dataset effects.
    pub effect: f64,
    /// SD of the per-dataset effects around `effect`.
    pub dataset_sd: f64,
    /// SD of a single fold difference around its dataset effect.
    pub fold_sd: f64,
    /// Correlation between fold differences within a dataset.
    pub rho: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_datasets: 20,
            n_folds: 5,
            effect: 0.05,
            dataset_sd: 0.01,
            fold_sd: 0.01,
            rho: 0.2,
        }
    }
}

impl SyntheticSpec {
    /// Fold differences per dataset: `mu_d = effect + dataset_sd * z_d`, then
    /// equicorrelated normal folds around `mu_d`.
    pub fn differences(&self, seed: u64) -> Vec<(String, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = self.rho.sqrt();
        let own = (1.0 - self.rho).sqrt();
        (0..self.n_datasets)
            .map(|d| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let mu = self.effect + self.dataset_sd * z;
                let w: f64 = StandardNormal.sample(&mut rng);
                let folds = (0..self.n_folds)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        mu + self.fold_sd * (shared * w + own * e)
                    })
                    .collect();
                (format!("ds{d:02}"), folds)
            })
            .collect()
    }

    /// Pair data (scales unset) for a comparison whose differences follow
    /// this spec.
    pub fn pair(&self, seed: u64) -> PairData {
        PairData::from_differences("base", "other", self.differences(seed))
    }
}

/// A result table with a baseline and one extra method per entry of
/// `methods`, where each method's scores are `baseline - x` with `x` drawn
/// from the paired spec. A negative `effect` therefore makes the method
/// better than the baseline.
pub fn synthetic_table(
    baseline: &str,
    methods: &[(&str, SyntheticSpec)],
    seed: u64,
) -> Result<ResultTable, ResultsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_datasets = methods.iter().map(|(_, s)| s.n_datasets).max().unwrap_or(0);
    let n_folds = methods.first().map_or(5, |(_, s)| s.n_folds);
    let base: Vec<Vec<f64>> = (0..n_datasets)
        .map(|_| {
            let level = rng.random_range(0.6..0.8);
            (0..n_folds).map(|_| level + rng.random_range(-0.02..0.02)).collect()
        })
        .collect();

    let mut records = Vec::new();
    let mut push = |method: &str, d: usize, scores: &[f64]| {
        for (f, &v) in scores.iter().enumerate() {
            records.push(FoldRecord {
                dataset_id: format!("ds{d:02}"),
                method_id: method.to_string(),
                fold_index: f,
                value: v.clamp(0.0, 1.0),
                metric_name: None,
            });
        }
    };
    for (d, scores) in base.iter().enumerate() {
        push(baseline, d, scores);
    }
    for (i, (name, spec)) in methods.iter().enumerate() {
        let diffs = spec.differences(rng.random::<u64>() ^ i as u64);
        for (d, (_, x)) in diffs.iter().enumerate() {
            let scores: Vec<f64> = base[d].iter().zip(x).map(|(b, x)| b - x).collect();
            push(name, d, &scores);
        }
    }
    ResultTable::from_records(records)
}
