//! Per-kernel importance from probing gradients: squared-gradient Fisher
//! information (streamed over probing steps), the low-rank per-kernel
//! estimate, the full chain-rule oracle it approximates, a mean-|gradient|
//! class-saliency alternative, and quantile-threshold mask construction.

use std::collections::{BTreeMap, BTreeSet};

use crate::diffcore::GradientMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureKind {
    Fisher,
    ClassSaliency,
}

impl MeasureKind {
    pub fn name(self) -> &'static str {
        match self {
            MeasureKind::Fisher => "fisher",
            MeasureKind::ClassSaliency => "class_saliency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(MeasureKind::Fisher),
            "class_saliency" => Ok(MeasureKind::ClassSaliency),
            other => Err(Error::InvalidArgument(format!("unknown measure '{other}'"))),
        }
    }
}

/// Streaming accumulator over probing steps. Fisher mode accumulates squared
/// gradients; class-saliency mode accumulates absolute gradients. Reads
/// return the running mean (1/T) * sum_t f(g_t).
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    sums: BTreeMap<String, Vec<f64>>,
    steps: usize,
    measure: MeasureKind,
}

impl FisherAccumulator {
    /// Register the parameter set up front; unknown ids in later gradient
    /// maps are an error rather than silently created.
    pub fn new(param_lengths: &BTreeMap<String, usize>, measure: MeasureKind) -> Self {
        FisherAccumulator {
            sums: param_lengths
                .iter()
                .map(|(k, &n)| (k.clone(), vec![0.0; n]))
                .collect(),
            steps: 0,
            measure,
        }
    }

    pub fn measure(&self) -> MeasureKind {
        self.measure
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn accumulate(&mut self, grads: &GradientMap) -> Result<()> {
        for (id, g) in grads.iter() {
            let sum = self
                .sums
                .get_mut(id)
                .ok_or_else(|| Error::UnknownParameter(id.clone()))?;
            if sum.len() != g.len() {
                return Err(Error::InvalidShape(format!(
                    "gradient length {} for {id}, expected {}",
                    g.len(),
                    sum.len()
                )));
            }
            match self.measure {
                MeasureKind::Fisher => {
                    for (s, &v) in sum.iter_mut().zip(g) {
                        *s += v * v;
                    }
                }
                MeasureKind::ClassSaliency => {
                    for (s, &v) in sum.iter_mut().zip(g) {
                        *s += v.abs();
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Per-element mean for one parameter.
    pub fn mean(&self, id: &str) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument(
                "importance read before any probing step".into(),
            ));
        }
        let sum = self
            .sums
            .get(id)
            .ok_or_else(|| Error::UnknownParameter(id.to_string()))?;
        Ok(sum.iter().map(|s| s / self.steps as f64).collect())
    }
}

/// Low-rank per-kernel importance: F(m1_i) plus the unweighted mean of the
/// per-element importances of the shared m2 vector.
pub fn kernel_fi_estimate(fi_m1_i: f64, fi_m2: &[f64]) -> Result<f64> {
    if fi_m2.is_empty() {
        return Err(Error::InvalidArgument("kernel_fi_estimate with empty m2".into()));
    }
    Ok(fi_m1_i + fi_m2.iter().sum::<f64>() / fi_m2.len() as f64)
}

/// Single-step full-matrix Fisher information of the modulation matrix of one
/// kernel, recovered from the proxy-vector gradients by the chain rule:
///
///   F(M_i) = sum_j [ g1^2 / (4 m2_j^2) + g2_j^2 / (4 m1^2)
///                    + g1 * g2_j / (2 m1 m2_j) ]
///
/// Callers average this over probing steps. Zero parameter values make the
/// coefficients singular; such kernels are reported and skipped.
pub fn kernel_fi_oracle(m1_i: f64, m2: &[f64], dl_dm1_i: f64, dl_dm2: &[f64]) -> Result<f64> {
    if m2.len() != dl_dm2.len() {
        return Err(Error::InvalidShape("m2 and its gradient differ in length".into()));
    }
    if m1_i == 0.0 {
        return Err(Error::Singularity("m1 element is exactly zero".into()));
    }
    let fi_m1 = dl_dm1_i * dl_dm1_i;
    let mut total = 0.0;
    for (&m2_j, &g2_j) in m2.iter().zip(dl_dm2) {
        if m2_j == 0.0 {
            return Err(Error::Singularity("m2 element is exactly zero".into()));
        }
        let fi_m2_j = g2_j * g2_j;
        total += fi_m1 / (4.0 * m2_j * m2_j)
            + fi_m2_j / (4.0 * m1_i * m1_i)
            + (dl_dm1_i / (2.0 * m1_i)) * (g2_j / m2_j);
    }
    Ok(total)
}

/// Importance report: per-kernel values, the quantile threshold applied to
/// them, and the resulting important set A.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub kernel_fi: BTreeMap<String, f64>,
    pub t_h: u32,
    pub threshold_value: f64,
    pub important: BTreeSet<String>,
    pub measure: MeasureKind,
}

impl ImportanceReport {
    pub fn is_important(&self, kernel_id: &str) -> bool {
        self.important.contains(kernel_id)
    }
}

/// Nearest-rank t_h% quantile over the pooled kernel values; kernels strictly
/// above the threshold are important, ties are not. For N distinct values
/// this leaves |A| = N - ceil(t_h/100 * N).
pub fn threshold_mask(
    kernel_fi: &BTreeMap<String, f64>,
    t_h: u32,
    measure: MeasureKind,
) -> Result<ImportanceReport> {
    if kernel_fi.is_empty() {
        return Err(Error::InvalidArgument("threshold_mask on empty FI map".into()));
    }
    if t_h > 100 {
        return Err(Error::InvalidArgument(format!("t_h {} out of [0, 100]", t_h)));
    }
    let n = kernel_fi.len();
    let mut sorted: Vec<f64> = kernel_fi.values().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((t_h as f64 / 100.0) * n as f64).ceil() as usize;
    let threshold_value = sorted[rank.max(1) - 1];
    let important = kernel_fi
        .iter()
        .filter(|(_, &v)| v > threshold_value)
        .map(|(k, _)| k.clone())
        .collect();
    Ok(ImportanceReport {
        kernel_fi: kernel_fi.clone(),
        t_h,
        threshold_value,
        important,
        measure,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs two equal-length series of >= 2 values".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..ra.len() {
        let (da, db) = (ra[i] - mean, rb[i] - mean);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument("spearman on a constant series".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}
