//! Structured modality-missingness masks for robustness evaluation.
//!
//! For a missing rate `r` and `M` modalities, the samples are split into `M`
//! groups: for each `k` in `1..M`, `floor(r * n)` samples lose exactly `k`
//! modalities (a uniformly chosen `k`-subset) and the rest keep everything.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed_str;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("infeasible mask spec: {0}")]
    InfeasibleSpec(String),
    #[error("malformed mask data at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("sample {sample} has every modality missing")]
    AllMissingRow { sample: usize },
    #[error("malformed mask JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub n_samples: usize,
    pub n_modalities: usize,
    pub rate: f64,
    pub seed: u64,
    pub split_id: String,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<(), MaskError> {
        let fail = |m: String| Err(MaskError::InfeasibleSpec(m));
        if self.n_samples == 0 {
            return fail("no samples".into());
        }
        if self.n_modalities < 2 {
            return fail(format!("need at least 2 modalities, got {}", self.n_modalities));
        }
        if !self.rate.is_finite() || self.rate < 0.0 {
            return fail(format!("missing rate {} is not a non-negative number", self.rate));
        }
        if self.rate * (self.n_modalities - 1) as f64 >= 1.0 {
            return fail(format!(
                "rate {} with {} modalities leaves no fully observed group",
                self.rate, self.n_modalities
            ));
        }
        Ok(())
    }

    /// Samples per missing-count group.
    pub fn group_size(&self) -> usize {
        // guard against products like 0.29 * 100 = 28.999999999999996
        (self.rate * self.n_samples as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub modalities: Vec<String>,
    /// `masks[i][m]` is true when modality `m` of sample `i` is present.
    pub masks: Vec<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<MaskSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskFormat {
    Csv,
    Json,
}

pub fn default_modality_names(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("modality_{i}")).collect()
}

pub fn generate_masks(spec: &MaskSpec) -> Result<MaskSet, MaskError> {
    spec.validate()?;
    let (n, m) = (spec.n_samples, spec.n_modalities);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(spec.seed, &spec.split_id));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let g = spec.group_size();
    let mut masks = vec![vec![true; m]; n];
    for k in 1..m {
        for &sample in &order[(k - 1) * g..k * g] {
            for dropped in index::sample(&mut rng, m, k) {
                masks[sample][dropped] = false;
            }
        }
    }
    Ok(MaskSet {
        modalities: default_modality_names(m),
        masks,
        spec: Some(spec.clone()),
    })
}

impl MaskSet {
    pub fn missing_count(&self, sample: usize) -> usize {
        self.masks[sample].iter().filter(|p| !**p).count()
    }

    pub fn serialize(&self, format: MaskFormat) -> Result<String, MaskError> {
        match format {
            MaskFormat::Csv => {
                let mut out = String::from("sample");
                for name in &self.modalities {
                    out.push(',');
                    out.push_str(name);
                }
                out.push('\n');
                for (i, row) in self.masks.iter().enumerate() {
                    out.push_str(&i.to_string());
                    for &p in row {
                        out.push_str(if p { ",1" } else { ",0" });
                    }
                    out.push('\n');
                }
                Ok(out)
            }
            MaskFormat::Json => {
                let mut s = serde_json::to_string_pretty(self).map_err(|e| MaskError::Json(e.to_string()))?;
                s.push('\n');
                Ok(s)
            }
        }
    }

    pub fn parse(text: &str, format: MaskFormat) -> Result<Self, MaskError> {
        let set = match format {
            MaskFormat::Csv => parse_csv(text)?,
            MaskFormat::Json => serde_json::from_str::<MaskSet>(text).map_err(|e| MaskError::Json(e.to_string()))?,
        };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<(), MaskError> {
        for (i, row) in self.masks.iter().enumerate() {
            if row.len() != self.modalities.len() {
                return Err(MaskError::MalformedRow {
                    line: i + 2,
                    reason: format!("expected {} modalities, got {}", self.modalities.len(), row.len()),
                });
            }
            if !row.iter().any(|p| *p) {
                return Err(MaskError::AllMissingRow { sample: i });
            }
        }
        Ok(())
    }
}

fn parse_csv(text: &str) -> Result<MaskSet, MaskError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(MaskError::MalformedRow {
        line: 1,
        reason: "missing header".into(),
    })?;
    let mut cols = header.split(',').map(str::trim);
    if cols.next() != Some("sample") {
        return Err(MaskError::MalformedRow {
            line: 1,
            reason: "first column must be `sample`".into(),
        });
    }
    let modalities: Vec<String> = cols.map(String::from).collect();
    if modalities.is_empty() {
        return Err(MaskError::MalformedRow {
            line: 1,
            reason: "no modality columns".into(),
        });
    }

    let mut masks = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let bad = |reason: String| MaskError::MalformedRow { line: lineno, reason };
        let mut fields = line.split(',').map(str::trim);
        let sample: usize = fields
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| bad("sample index is not a non-negative integer".into()))?;
        if sample != masks.len() {
            return Err(bad(format!("expected sample {}, got {sample}", masks.len())));
        }
        let row = fields
            .map(|f| match f {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(bad(format!("mask value `{other}` is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != modalities.len() {
            return Err(bad(format!("expected {} modalities, got {}", modalities.len(), row.len())));
        }
        masks.push(row);
    }
    Ok(MaskSet { modalities, masks, spec: None })
}
