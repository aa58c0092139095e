// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input-sensitivity ranking of activation coordinates.
//!
//! For a pooled hookpoint activation `a(x)` and embedding activations `e(x)`,
//! each Rademacher probe `r` gives `u = J r` with one forward-mode sweep.
//! `E[u_j^2]` is the squared norm of row `j` of the Jacobian, so
//! `sqrt(mean_p u_j^2)` estimates how strongly coordinate `j` reacts to the
//! input. Averaging over a reference corpus and keeping the `K` largest gives
//! a fixed index set per layer.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{ActivationDump, ActivationRecord, Hookpoint, ModelState, Sample};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Jacobian,
    Random,
    Magnitude,
    Variance,
    Pca,
}

impl Selector {
    pub const ALL: [Selector; 5] = [
        Selector::Jacobian,
        Selector::Random,
        Selector::Magnitude,
        Selector::Variance,
        Selector::Pca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Selector::Jacobian => "jacobian",
            Selector::Random => "random",
            Selector::Magnitude => "magnitude",
            Selector::Variance => "variance",
            Selector::Pca => "pca",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyConfig {
    pub k_act: usize,
    #[serde(default = "default_probes")]
    pub probes: usize,
    pub hookpoint: Hookpoint,
    /// Identifier of the reference corpus the scores were aggregated over.
    #[serde(default)]
    pub reference_corpus: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_selector")]
    pub selector: Selector,
}

fn default_probes() -> usize {
    1
}
fn default_selector() -> Selector {
    Selector::Jacobian
}

impl SaliencyConfig {
    pub fn new(k_act: usize, hookpoint: Hookpoint) -> Self {
        Self {
            k_act,
            probes: default_probes(),
            hookpoint,
            reference_corpus: String::new(),
            seed: 0,
            selector: default_selector(),
        }
    }

    fn validate(&self, width: usize) -> Result<()> {
        if self.k_act == 0 || self.k_act > width {
            return Err(Error::Config(format!(
                "k_act {} outside 1..={width}",
                self.k_act
            )));
        }
        if self.probes == 0 {
            return Err(Error::Config("probes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-coordinate scores and the retained coordinates.
///
/// For [`Selector::Pca`] the scores are the covariance eigenvalues in
/// descending order, `selected` is `0..k`, and `basis` holds the leading
/// principal directions as rows: features are projections, not a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyReport {
    pub scores: Tensor,
    pub selected: Vec<usize>,
    pub selector: Selector,
    pub config: SaliencyConfig,
    pub basis: Option<Tensor>,
    pub mean: Option<Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    scores: String,
    selected: Vec<usize>,
    selector: Selector,
    config: SaliencyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    basis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<String>,
}

impl SaliencyReport {
    pub fn hookpoint(&self) -> Hookpoint {
        self.config.hookpoint
    }

    /// Width of the filtered feature vector.
    pub fn output_dim(&self) -> usize {
        self.selected.len()
    }

    /// Writes `report.json` plus FSTN tensors into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_fstn(&dir.join("scores.fstn"), &self.scores)?;
        let mut file = ReportFile {
            scores: "scores.fstn".into(),
            selected: self.selected.clone(),
            selector: self.selector,
            config: self.config.clone(),
            basis: None,
            mean: None,
        };
        if let (Some(b), Some(m)) = (&self.basis, &self.mean) {
            io::write_fstn(&dir.join("basis.fstn"), b)?;
            io::write_fstn(&dir.join("mean.fstn"), m)?;
            file.basis = Some("basis.fstn".into());
            file.mean = Some("mean.fstn".into());
        }
        io::write_json(&dir.join("report.json"), &file)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f: ReportFile = io::read_json(&dir.join("report.json"))?;
        let opt = |p: &Option<String>| p.as_ref().map(|p| io::read_fstn(&dir.join(p))).transpose();
        let report = Self {
            scores: io::read_fstn(&dir.join(&f.scores))?,
            basis: opt(&f.basis)?,
            mean: opt(&f.mean)?,
            selected: f.selected,
            selector: f.selector,
            config: f.config,
        };
        report.check()?;
        Ok(report)
    }

    fn check(&self) -> Result<()> {
        let d = self.scores.len();
        if self.selected.windows(2).any(|w| w[0] >= w[1]) || self.selected.iter().any(|&i| i >= d) {
            return Err(Error::Format("selected indices must be strictly increasing and < d".into()));
        }
        if self.selector == Selector::Pca {
            let (Some(b), Some(m)) = (&self.basis, &self.mean) else {
                return Err(Error::Format("pca report without basis".into()));
            };
            if b.shape() != [self.selected.len(), d] || m.len() != d {
                return Err(Error::Format("pca basis shape mismatch".into()));
            }
        }
        Ok(())
    }
}

/// `u = J r` for the pooled activation at `hook` with respect to `e(x)`.
pub fn probe_jvp(model: &ModelState, tokens: &[u32], hook: Hookpoint, probe: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (input, pooled) = model.build_pooled(&mut g, tokens, hook)?;
    if probe.shape() != g.value(input).shape() {
        return Err(Error::Input(format!(
            "probe shape {:?}, expected {:?}",
            probe.shape(),
            g.value(input).shape()
        )));
    }
    g.tangent_of(&[(input, probe)], pooled)
}

/// `sqrt((1/R) sum_p u_j^2)` from `probes` fresh Rademacher probes. The
/// forward pass is recorded once and swept once per probe.
pub fn estimate_saliency(
    model: &ModelState,
    tokens: &[u32],
    hook: Hookpoint,
    probes: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    Ok(estimate_squared(model, tokens, hook, probes, rng)?.map(f32::sqrt))
}

/// `(1/R) sum_p u_j^2`, the unrooted estimate of the squared row norms.
pub fn estimate_squared(
    model: &ModelState,
    tokens: &[u32],
    hook: Hookpoint,
    probes: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if probes == 0 {
        return Err(Error::Config("probes must be >= 1".into()));
    }
    let mut g = Graph::new();
    let (input, pooled) = model.build_pooled(&mut g, tokens, hook)?;
    let shape = g.value(input).shape().to_vec();
    let mut acc = Tensor::zeros(g.value(pooled).shape());
    for _ in 0..probes {
        let r = rng.rademacher(&shape);
        let u = g.tangent_of(&[(input, &r)], pooled)?;
        for (a, v) in acc.data_mut().iter_mut().zip(u.data()) {
            *a += v * v;
        }
    }
    Ok(acc.scale(1.0 / probes as f32))
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// increasing order.
pub fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Jacobian selection: average `ŝ` over the reference samples and keep the
/// top `k_act`. Sample `i` draws its probes from stream `i` of the seed.
pub fn aggregate_and_select(model: &ModelState, reference: &[&Sample], config: &SaliencyConfig) -> Result<SaliencyReport> {
    if reference.is_empty() {
        return Err(Error::Input("empty reference corpus".into()));
    }
    model.validate_hookpoint(config.hookpoint)?;
    config.validate(model.config.d_model)?;
    let base = RngStream::new(config.seed);
    let mut total = Tensor::zeros(&[model.config.d_model]);
    for (i, s) in reference.iter().enumerate() {
        let mut rng = base.fork(i as u64);
        let s_hat = estimate_saliency(model, &s.tokens, config.hookpoint, config.probes, &mut rng)?;
        total.axpy(1.0, &s_hat)?;
    }
    let scores = total.scale(1.0 / reference.len() as f32);
    Ok(SaliencyReport {
        selected: top_k(scores.data(), config.k_act),
        scores,
        selector: Selector::Jacobian,
        config: SaliencyConfig {
            selector: Selector::Jacobian,
            ..config.clone()
        },
        basis: None,
        mean: None,
    })
}

/// Dataset-only selectors on an `[N, d]` activation matrix.
pub fn baseline_select(
    activations: &Tensor,
    method: Selector,
    config: &SaliencyConfig,
) -> Result<SaliencyReport> {
    if activations.ndim() != 2 || activations.rows() == 0 {
        return Err(Error::Input("baseline selectors need a non-empty [N, d] matrix".into()));
    }
    let (n, d) = (activations.rows(), activations.cols());
    config.validate(d)?;
    if matches!(method, Selector::Variance | Selector::Pca) && n < 2 {
        return Err(Error::Input(format!("{} selector needs N >= 2, got {n}", method.name())));
    }
    let k = config.k_act;
    let mut basis = None;
    let mut mean_out = None;
    let (scores, selected) = match method {
        Selector::Jacobian => {
            return Err(Error::Input("jacobian selection needs the model, not a dump".into()));
        }
        Selector::Random => {
            let mut rng = RngStream::new(config.seed);
            let s = rng.uniform(&[d], 0.0, 1.0);
            let sel = top_k(s.data(), k);
            (s, sel)
        }
        Selector::Magnitude => {
            let s = activations.map(f32::abs).mean_rows();
            let sel = top_k(s.data(), k);
            (s, sel)
        }
        Selector::Variance => {
            let s = column_variance(activations);
            let sel = top_k(s.data(), k);
            (s, sel)
        }
        Selector::Pca => {
            let mean = activations.mean_rows();
            let (values, vectors) = symmetric_eigen(&covariance(activations, &mean), d);
            let rows: Vec<Vec<f32>> = vectors.iter().take(k).map(|v| v.iter().map(|&x| x as f32).collect()).collect();
            basis = Some(Tensor::from_rows(&rows));
            mean_out = Some(mean);
            let s = Tensor::from_vec(values.iter().map(|&v| v.max(0.0) as f32).collect());
            (s, (0..k).collect())
        }
    };
    Ok(SaliencyReport {
        scores,
        selected,
        selector: method,
        config: SaliencyConfig {
            selector: method,
            ..config.clone()
        },
        basis,
        mean: mean_out,
    })
}

/// Run the configured selector: Jacobian on the model, baselines on the
/// pooled activations of the reference samples.
pub fn select(model: &ModelState, reference: &[&Sample], config: &SaliencyConfig) -> Result<SaliencyReport> {
    match config.selector {
        Selector::Jacobian => aggregate_and_select(model, reference, config),
        method => {
            if reference.is_empty() {
                return Err(Error::Input("empty reference corpus".into()));
            }
            let rows = reference
                .iter()
                .map(|s| Ok(model.capture(&s.id, &s.tokens, config.hookpoint)?.pooled))
                .collect::<Result<Vec<_>>>()?;
            baseline_select(&Tensor::stack(&rows)?, method, config)
        }
    }
}

/// Baseline selection straight from an activation dump.
pub fn select_from_dump(dump: &ActivationDump, config: &SaliencyConfig) -> Result<SaliencyReport> {
    if dump.hookpoint != config.hookpoint {
        return Err(Error::Consistency(format!(
            "dump recorded at {}, config asks for {}",
            dump.hookpoint, config.hookpoint
        )));
    }
    baseline_select(&dump.matrix, config.selector, config)
}

/// `a[I]` for coordinate selectors, `B (a - mean)` for PCA.
pub fn filter_activations(record: &ActivationRecord, report: &SaliencyReport) -> Result<Tensor> {
    if record.hookpoint != report.hookpoint() {
        return Err(Error::Consistency(format!(
            "record from {}, report for {}",
            record.hookpoint,
            report.hookpoint()
        )));
    }
    filter_vector(&record.pooled, report)
}

pub(crate) fn filter_vector(a: &Tensor, report: &SaliencyReport) -> Result<Tensor> {
    if a.len() != report.scores.len() {
        return Err(Error::Dimension(format!(
            "activation width {} vs report width {}",
            a.len(),
            report.scores.len()
        )));
    }
    match (&report.basis, &report.mean) {
        (Some(b), Some(m)) => {
            let centered = a.sub(m)?;
            let out = (0..b.rows())
                .map(|k| b.row(k).iter().zip(centered.data()).map(|(x, y)| x * y).sum())
                .collect();
            Ok(Tensor::from_vec(out))
        }
        _ => Ok(Tensor::from_vec(report.selected.iter().map(|&i| a.data()[i]).collect())),
    }
}

/// Row-wise [`filter_vector`] over an `[N, d]` matrix.
pub fn filter_matrix(acts: &Tensor, report: &SaliencyReport) -> Result<Tensor> {
    let rows = (0..acts.rows())
        .map(|i| filter_vector(&Tensor::from_vec(acts.row(i).to_vec()), report))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows)
}

/// Place `values` back at the selected coordinates of a zero vector.
pub fn scatter(values: &Tensor, report: &SaliencyReport) -> Result<Tensor> {
    if values.len() != report.selected.len() {
        return Err(Error::Dimension("scatter width mismatch".into()));
    }
    let mut out = Tensor::zeros(&[report.scores.len()]);
    for (&i, &v) in report.selected.iter().zip(values.data()) {
        out.data_mut()[i] = v;
    }
    Ok(out)
}

/// Unbiased per-column variance.
fn column_variance(a: &Tensor) -> Tensor {
    let (n, d) = (a.rows(), a.cols());
    let mean = a.mean_rows();
    let mut out = vec![0.0f64; d];
    for i in 0..n {
        for (j, (&x, &m)) in a.row(i).iter().zip(mean.data()).enumerate() {
            out[j] += ((x - m) as f64).powi(2);
        }
    }
    Tensor::from_vec(out.into_iter().map(|v| (v / (n - 1) as f64) as f32).collect())
}

fn covariance(a: &Tensor, mean: &Tensor) -> Vec<f64> {
    let (n, d) = (a.rows(), a.cols());
    let mut c = vec![0.0f64; d * d];
    for i in 0..n {
        let x: Vec<f64> = a.row(i).iter().zip(mean.data()).map(|(&x, &m)| (x - m) as f64).collect();
        for p in 0..d {
            for q in 0..d {
                c[p * d + q] += x[p] * x[q];
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    c
}

/// Cyclic Jacobi eigendecomposition of a symmetric `d x d` matrix. Returns
/// eigenvalues in descending order with unit eigenvectors, each signed so its
/// largest-magnitude entry is positive.
pub fn symmetric_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| a[y * d + y].partial_cmp(&a[x * d + x]).unwrap_or(Ordering::Equal).then(x.cmp(&y)));
    let values = order.iter().map(|&i| a[i * d + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = (0..d).map(|k| v[k * d + i]).collect();
            let big = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    (values, vectors)
}

/// Fraction of total variance carried by the first `k` eigenvalues.
pub fn explained_variance(report: &SaliencyReport, k: usize) -> f32 {
    let total: f32 = report.scores.data().iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    report.scores.data()[..k.min(report.scores.len())].iter().sum::<f32>() / total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize) -> SaliencyConfig {
        SaliencyConfig::new(k, Hookpoint::residual(0))
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.0; 5], 3), vec![0, 1, 2]);
        assert_eq!(top_k(&[1.0, 2.0, 3.0], 3), vec![0, 1, 2]);
    }

    #[test]
    fn constant_activations_select_prefix_by_variance() {
        let a = Tensor::full(&[5, 6], 2.0);
        let r = baseline_select(&a, Selector::Variance, &cfg(3)).unwrap();
        assert!(r.scores.data().iter().all(|&s| s == 0.0));
        assert_eq!(r.selected, vec![0, 1, 2]);
    }

    #[test]
    fn magnitude_ranks_scaled_coordinate_first() {
        let mut rng = RngStream::new(3);
        let mut a = rng.normal(&[20, 8], 1.0);
        for i in 0..20 {
            a.row_mut(i)[5] *= 100.0;
        }
        let r = baseline_select(&a, Selector::Magnitude, &cfg(1)).unwrap();
        assert_eq!(r.selected, vec![5]);
    }

    #[test]
    fn variance_needs_two_rows() {
        let a = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            baseline_select(&a, Selector::Variance, &cfg(2)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn random_selector_is_seeded() {
        let a = Tensor::zeros(&[3, 10]);
        let r1 = baseline_select(&a, Selector::Random, &cfg(4)).unwrap();
        let r2 = baseline_select(&a, Selector::Random, &cfg(4)).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.selected.len(), 4);
    }

    #[test]
    fn filter_gathers_selected() {
        let report = SaliencyReport {
            scores: Tensor::zeros(&[6]),
            selected: vec![2, 5],
            selector: Selector::Magnitude,
            config: cfg(2),
            basis: None,
            mean: None,
        };
        let rec = ActivationRecord {
            sample_id: "x".into(),
            hookpoint: Hookpoint::residual(0),
            pooled: Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]),
        };
        let f = filter_activations(&rec, &report).unwrap();
        assert_eq!(f.data(), &[2.0, 5.0]);
        let back = scatter(&f, &report).unwrap();
        for &i in &report.selected {
            assert_eq!(back.data()[i], rec.pooled.data()[i]);
        }
        let other = ActivationRecord {
            hookpoint: Hookpoint::residual(1),
            ..rec
        };
        assert!(matches!(filter_activations(&other, &report), Err(Error::Consistency(_))));
    }

    #[test]
    fn jacobi_diagonalizes() {
        let m = [4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0];
        let (vals, vecs) = symmetric_eigen(&m, 3);
        for (lam, v) in vals.iter().zip(&vecs) {
            for r in 0..3 {
                let mv: f64 = (0..3).map(|c| m[r * 3 + c] * v[c]).sum();
                assert!((mv - lam * v[r]).abs() < 1e-10);
            }
        }
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn report_round_trip() {
        let mut rng = RngStream::new(0);
        let a = rng.normal(&[10, 5], 1.0);
        let r = baseline_select(&a, Selector::Pca, &cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        assert_eq!(SaliencyReport::load(dir.path()).unwrap(), r);
    }
}
