//! Analytic toy distributions and two-sample metrics.
//!
//! [`MixtureSpec`] is a class-conditional Gaussian mixture in 2D. It gives
//! the training data, the exact class posterior `p(c | z)` and, through
//! importance resampling, draws from the tilted target `p(z)·p(c | z)^w`
//! that guided sampling aims for.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, RandomStream};
use crate::{LabError, Result};

/// Proposal oversampling factor for [`tilted_target_sample`].
pub const OVERSAMPLE: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<[f64; 2]>,
    pub covs: Vec<[[f64; 2]; 2]>,
    pub weights: Vec<f64>,
}

/// Lower Cholesky factor `[l00, l10, l11]` of a 2×2 SPD matrix.
fn cholesky2(c: &[[f64; 2]; 2]) -> Option<[f64; 3]> {
    if c[0][1] != c[1][0] || !(c[0][0] > 0.0) {
        return None;
    }
    let l00 = c[0][0].sqrt();
    let l10 = c[1][0] / l00;
    let d = c[1][1] - l10 * l10;
    if !(d > 0.0) {
        return None;
    }
    Some([l00, l10, d.sqrt()])
}

impl MixtureSpec {
    pub fn new(means: Vec<[f64; 2]>, covs: Vec<[[f64; 2]; 2]>, weights: Vec<f64>) -> Result<Self> {
        let spec = Self { means, covs, weights };
        spec.validate()?;
        Ok(spec)
    }

    /// `k` equal-weight isotropic components spaced evenly on a circle,
    /// the first at 90°.
    pub fn ring(k: usize, radius: f64, sigma: f64) -> Result<Self> {
        if k == 0 {
            return Err(LabError::Config("mixture needs at least one class".into()));
        }
        let means = (0..k)
            .map(|i| {
                let a = PI / 2.0 + TAU * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let s2 = sigma * sigma;
        Self::new(means, vec![[[s2, 0.0], [0.0, s2]]; k], vec![1.0 / k as f64; k])
    }

    /// Three classes at 90°/210°/330° on a radius-2 circle, σ = 0.35.
    pub fn default_ring() -> Self {
        Self::ring(3, 2.0, 0.35).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.covs.len() != k || self.weights.len() != k {
            return Err(LabError::Config("mixture needs matching means, covs and weights".into()));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(LabError::Config("mixture weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::Config(format!("mixture weights sum to {total}")));
        }
        for (i, c) in self.covs.iter().enumerate() {
            if cholesky2(c).is_none() {
                return Err(LabError::Config(format!("covariance {i} is not symmetric positive-definite")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// `log N(z; μ_k, Σ_k)` for every component.
    pub fn log_densities(&self, z: [f64; 2]) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.covs)
            .map(|(m, c)| {
                let l = cholesky2(c).expect("validated");
                // Solve L·y = z − μ; the quadratic form is ‖y‖².
                let d0 = z[0] - m[0];
                let d1 = z[1] - m[1];
                let y0 = d0 / l[0];
                let y1 = (d1 - l[1] * y0) / l[2];
                let log_det = 2.0 * (l[0].ln() + l[2].ln());
                -(TAU.ln()) - 0.5 * log_det - 0.5 * (y0 * y0 + y1 * y1)
            })
            .collect()
    }

    /// Exact `p(c | z)`, evaluated in log space.
    pub fn class_posterior(&self, z: [f64; 2]) -> Vec<f64> {
        let logs: Vec<f64> = self
            .log_densities(z)
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| l + w.ln())
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    /// Mean of the whole mixture.
    pub fn mean(&self) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (m, w) in self.means.iter().zip(&self.weights) {
            out[0] += w * m[0];
            out[1] += w * m[1];
        }
        out
    }
}

/// Points with optional class labels and a provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Matrix,
    pub labels: Option<Vec<usize>>,
    pub provenance: String,
}

impl SampleSet {
    pub fn unlabeled(points: Matrix, provenance: impl Into<String>) -> Self {
        Self {
            points,
            labels: None,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.points.get(i, 0), self.points.get(i, 1)]
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.len() as f64;
        let s = self.points.column_sums();
        [s[0] / n, s[1] / n]
    }
}

/// Draw `n` labeled points: class from the weights, then that class's
/// Gaussian through its Cholesky factor.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, stream: &mut RandomStream) -> Result<SampleSet> {
    if n == 0 {
        return Err(LabError::Usage("sample count must be positive".into()));
    }
    let factors: Vec<[f64; 3]> = spec.covs.iter().map(|c| cholesky2(c).expect("validated")).collect();
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let last = spec.num_classes() - 1;
    for _ in 0..n {
        let u = stream.next_f64();
        let mut acc = 0.0;
        let mut k = last;
        for (i, w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let [g0, g1] = stream.normal_pair();
        let l = factors[k];
        let m = spec.means[k];
        data.push(m[0] + l[0] * g0);
        data.push(m[1] + l[1] * g0 + l[2] * g1);
        labels.push(k);
    }
    Ok(SampleSet {
        points: Matrix::from_vec(n, 2, data)?,
        labels: Some(labels),
        provenance: "mixture".into(),
    })
}

/// Importance-resampled draws from `p(z)·p(c | z)^w`.
///
/// `OVERSAMPLE·n` proposals come from the mixture; each is weighted by its
/// posterior for `class` raised to `w`, and `n` points are taken by
/// systematic resampling. Fails when the weights' effective sample size
/// drops below `n`.
pub fn tilted_target_sample(
    spec: &MixtureSpec,
    class: usize,
    w: f64,
    n: usize,
    stream: &mut RandomStream,
) -> Result<SampleSet> {
    if class >= spec.num_classes() {
        return Err(LabError::Index(format!("class {class} outside 0..{}", spec.num_classes())));
    }
    if !(w >= 0.0 && w.is_finite()) {
        return Err(LabError::Config(format!("tilt exponent must be >= 0, got {w}")));
    }
    let proposals = sample_mixture(spec, OVERSAMPLE * n, stream)?;
    let m = proposals.len();
    let log_w: Vec<f64> = (0..m)
        .map(|i| {
            let post = spec.class_posterior(proposals.point(i))[class];
            if w == 0.0 {
                0.0
            } else {
                w * post.ln()
            }
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|v| v * v).sum();
    let ess = total * total / sq;
    if !(ess >= n as f64) {
        return Err(LabError::Degenerate(format!(
            "tilted target at w = {w}: effective sample size {ess:.1} < {n}; raise the oversampling"
        )));
    }
    let step = total / n as f64;
    let mut u = stream.next_f64() * step;
    let mut idx = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut j = 0;
    for (i, wi) in weights.iter().enumerate() {
        acc += wi;
        while j < n && u < acc {
            idx.push(i);
            u += step;
            j += 1;
        }
    }
    // Rounding can leave the last slot unfilled.
    while idx.len() < n {
        idx.push(m - 1);
    }
    Ok(SampleSet {
        points: proposals.points.select_rows(&idx),
        labels: Some(vec![class; n]),
        provenance: format!("tilted(class={class},w={w})"),
    })
}

fn columns(s: &SampleSet) -> (Vec<f64>, Vec<f64>) {
    let p = &s.points;
    ((0..p.rows()).map(|i| p.get(i, 0)).collect(), (0..p.rows()).map(|i| p.get(i, 1)).collect())
}

fn row_distance_sum(x: f64, y: f64, xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(a, b)| ((x - a) * (x - a) + (y - b) * (y - b)).sqrt())
        .sum()
}

/// Per-row sums of distances, with rows split over `workers` threads. Each
/// row's sum is computed the same way regardless of the split.
fn distance_row_sums(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>), upper_only: bool, workers: usize) -> Vec<f64> {
    let n = a.0.len();
    let row = |i: usize| {
        let start = if upper_only { i + 1 } else { 0 };
        row_distance_sum(a.0[i], a.1[i], &b.0[start..], &b.1[start..])
    };
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(row).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut out = vec![0.0; n];
    std::thread::scope(|s| {
        for (c, slot) in out.chunks_mut(chunk).enumerate() {
            let row = &row;
            s.spawn(move || {
                for (k, v) in slot.iter_mut().enumerate() {
                    *v = row(c * chunk + k);
                }
            });
        }
    });
    out
}

fn canonical_order(a: &SampleSet, b: &SampleSet) -> bool {
    let key = |s: &SampleSet| s.points.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    (a.len(), key(a)) <= (b.len(), key(b))
}

/// Energy distance V-statistic `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖`.
pub fn energy_distance(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    energy_distance_with(a, b, 1)
}

pub fn energy_distance_with(a: &SampleSet, b: &SampleSet, workers: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(LabError::Usage("energy distance needs non-empty sets".into()));
    }
    // Fix the orientation of the cross term so swapping the arguments
    // reproduces the same float.
    let (a, b) = if canonical_order(a, b) { (a, b) } else { (b, a) };
    let (ca, cb) = (columns(a), columns(b));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let cross: f64 = distance_row_sums(&ca, &cb, false, workers).iter().sum::<f64>() / (n * m);
    let within_a: f64 = 2.0 * distance_row_sums(&ca, &ca, true, workers).iter().sum::<f64>() / (n * n);
    let within_b: f64 = 2.0 * distance_row_sums(&cb, &cb, true, workers).iter().sum::<f64>() / (m * m);
    // The V-statistic is non-negative; the within sums run over the upper
    // triangle and the cross sum over full rows, so identical inputs can
    // leave a rounding residue of either sign.
    Ok((2.0 * cross - (within_a + within_b)).max(0.0))
}

/// Random subset of `k` rows without replacement (partial Fisher-Yates).
fn subsample(s: &SampleSet, k: usize, stream: &mut RandomStream) -> SampleSet {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    for i in 0..k {
        let j = i + stream.below((s.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k);
    SampleSet {
        points: s.points.select_rows(&idx),
        labels: s.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        provenance: s.provenance.clone(),
    }
}

/// Sliced 1-Wasserstein distance averaged over `n_proj` random directions.
/// The larger set is subsampled to the size of the smaller one.
pub fn sliced_wasserstein(a: &SampleSet, b: &SampleSet, n_proj: usize, stream: &mut RandomStream) -> Result<f64> {
    if a.is_empty() || b.is_empty() || n_proj == 0 {
        return Err(LabError::Usage("sliced Wasserstein needs non-empty sets and projections".into()));
    }
    let (a, b) = match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Greater => (subsample(a, b.len(), stream), b.clone()),
        std::cmp::Ordering::Less => (a.clone(), subsample(b, a.len(), stream)),
        std::cmp::Ordering::Equal => (a.clone(), b.clone()),
    };
    if a.len() != b.len() {
        return Err(LabError::Usage("sets differ in size after subsampling".into()));
    }
    let n = a.len();
    let mut total = 0.0;
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    for _ in 0..n_proj {
        let theta = TAU * stream.next_f64();
        let (c, s) = (theta.cos(), theta.sin());
        for i in 0..n {
            pa[i] = c * a.points.get(i, 0) + s * a.points.get(i, 1);
            pb[i] = c * b.points.get(i, 0) + s * b.points.get(i, 1);
        }
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    Ok(total / n_proj as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[[f64; 2]]) -> SampleSet {
        SampleSet::unlabeled(
            Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            "test",
        )
    }

    #[test]
    fn default_ring_geometry() {
        let spec = MixtureSpec::default_ring();
        assert_eq!(spec.num_classes(), 3);
        assert!((spec.means[0][0]).abs() < 1e-15 && (spec.means[0][1] - 2.0).abs() < 1e-15);
        let a = 210f64.to_radians();
        assert!((spec.means[1][0] - 2.0 * a.cos()).abs() < 1e-12);
        assert!((spec.means[1][1] - 2.0 * a.sin()).abs() < 1e-12);
        assert!((spec.covs[2][0][0] - 0.1225).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad_cov = [[1.0, 2.0], [2.0, 1.0]];
        assert!(MixtureSpec::new(vec![[0.0, 0.0]], vec![bad_cov], vec![1.0]).is_err());
        let id = [[1.0, 0.0], [0.0, 1.0]];
        assert!(MixtureSpec::new(vec![[0.0, 0.0]; 2], vec![id; 2], vec![0.5, 0.6]).is_err());
        assert!(MixtureSpec::new(vec![[0.0, 0.0]], vec![[[1.0, 0.1], [0.0, 1.0]]], vec![1.0]).is_err());
    }

    #[test]
    fn single_class_sample_mean() {
        let m = [0.7, -1.3];
        let spec = MixtureSpec::new(vec![m], vec![[[1.0, 0.0], [0.0, 1.0]]], vec![1.0]).unwrap();
        let n = 100_000;
        let s = sample_mixture(&spec, n, &mut RandomStream::new(1)).unwrap();
        let mean = s.mean();
        let tol = 4.0 / (n as f64).sqrt() * 2f64.sqrt();
        assert!((mean[0] - m[0]).abs() <= tol && (mean[1] - m[1]).abs() <= tol);
    }

    #[test]
    fn class_frequencies_and_labels() {
        let spec = MixtureSpec::default_ring();
        let n = 30_000;
        let s = sample_mixture(&spec, n, &mut RandomStream::new(2)).unwrap();
        let labels = s.labels.unwrap();
        assert!(labels.iter().all(|&l| l < 3));
        for k in 0..3 {
            let f = labels.iter().filter(|&&l| l == k).count() as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() <= 0.01, "class {k}: {f}");
        }
    }

    #[test]
    fn correlated_covariance_sampling() {
        let cov = [[1.0, 0.6], [0.6, 0.5]];
        let spec = MixtureSpec::new(vec![[0.0, 0.0]], vec![cov], vec![1.0]).unwrap();
        let n = 200_000;
        let s = sample_mixture(&spec, n, &mut RandomStream::new(5)).unwrap();
        let (xs, ys) = columns(&s);
        let cxy = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        let cyy = ys.iter().map(|y| y * y).sum::<f64>() / n as f64;
        assert!((cxy - 0.6).abs() < 0.01 && (cyy - 0.5).abs() < 0.01);
    }

    #[test]
    fn posterior_symmetry_normalisation_and_separation() {
        let spec = MixtureSpec::default_ring();
        let p = spec.class_posterior([0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() <= 1e-12);
        }
        let mut s = RandomStream::new(3);
        for _ in 0..100 {
            let z = [3.0 * s.gaussian(1)[0], 3.0 * s.gaussian(1)[0]];
            assert!((spec.class_posterior(z).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let id = [[1.0, 0.0], [0.0, 1.0]];
        let far = MixtureSpec::new(vec![[0.0, 0.0], [10.0, 0.0]], vec![id; 2], vec![0.5, 0.5]).unwrap();
        assert!(far.class_posterior([0.0, 0.0])[0] >= 1.0 - 1e-6);
        // Far outside every component the naive densities underflow to 0.
        assert!((far.class_posterior([-60.0, 0.0])[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_space_posterior_matches_naive() {
        let spec = MixtureSpec::default_ring();
        let mut s = RandomStream::new(8);
        for _ in 0..200 {
            let g = s.gaussian(2);
            let z = [2.0 * g[0], 2.0 * g[1]];
            let dens: Vec<f64> = spec
                .means
                .iter()
                .zip(&spec.covs)
                .zip(&spec.weights)
                .map(|((m, c), w)| {
                    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
                    let (dx, dy) = (z[0] - m[0], z[1] - m[1]);
                    let q = (c[1][1] * dx * dx - 2.0 * c[0][1] * dx * dy + c[0][0] * dy * dy) / det;
                    w * (-0.5 * q).exp() / (TAU * det.sqrt())
                })
                .collect();
            let total: f64 = dens.iter().sum();
            if total < 1e-250 {
                continue;
            }
            for (a, d) in spec.class_posterior(z).iter().zip(&dens) {
                let b = d / total;
                assert!((a - b).abs() <= 1e-10 * b.max(1e-300) || (a - b).abs() < 1e-300);
            }
        }
    }

    #[test]
    fn strong_tilt_concentrates_on_class() {
        let spec = MixtureSpec::default_ring();
        let s = tilted_target_sample(&spec, 1, 8.0, 4000, &mut RandomStream::new(4)).unwrap();
        let closest = (0..s.len())
            .filter(|&i| {
                let p = s.point(i);
                let d: Vec<f64> = spec
                    .means
                    .iter()
                    .map(|m| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2))
                    .collect();
                d[1] < d[0] && d[1] < d[2]
            })
            .count();
        assert!(closest as f64 >= 0.99 * s.len() as f64);
    }

    #[test]
    fn tilted_mean_moves_monotonically_toward_class() {
        let spec = MixtureSpec::default_ring();
        let mut last_y = f64::NEG_INFINITY;
        let mut last_post = 0.0;
        for w in [0.0, 1.0, 2.0, 4.0, 8.0] {
            let s = tilted_target_sample(&spec, 0, w, 5000, &mut RandomStream::new(11)).unwrap();
            // Class 0 sits straight up. Past w = 1 the mean saturates near
            // the class centre, so allow Monte Carlo slack there.
            let y = s.mean()[1];
            assert!(y > last_y - 0.01, "w = {w}: {y} vs {last_y}");
            let post = (0..s.len())
                .map(|i| spec.class_posterior(s.point(i))[0])
                .sum::<f64>()
                / s.len() as f64;
            assert!(post >= last_post - 1e-3, "w = {w}: {post} vs {last_post}");
            last_y = last_y.max(y);
            last_post = post;
        }
        assert!(last_y > 1.9 && last_post > 0.999);
    }

    #[test]
    fn degenerate_tilt_errors() {
        let id = [[1.0, 0.0], [0.0, 1.0]];
        let spec = MixtureSpec::new(vec![[0.0, 0.0], [30.0, 0.0]], vec![id; 2], vec![0.999, 0.001]).unwrap();
        let err = tilted_target_sample(&spec, 1, 1.0, 100, &mut RandomStream::new(1)).unwrap_err();
        assert!(matches!(err, LabError::Degenerate(_)));
    }

    #[test]
    fn energy_distance_examples() {
        let a = set(&[[0.0, 0.0]]);
        let b = set(&[[1.0, 0.0]]);
        assert_eq!(energy_distance(&a, &b).unwrap(), 2.0);
        let spec = MixtureSpec::default_ring();
        let x = sample_mixture(&spec, 300, &mut RandomStream::new(1)).unwrap();
        let y = sample_mixture(&spec, 200, &mut RandomStream::new(2)).unwrap();
        assert!(energy_distance(&x, &x).unwrap().abs() <= 1e-12);
        assert_eq!(energy_distance(&x, &y).unwrap(), energy_distance(&y, &x).unwrap());
        assert_eq!(
            energy_distance_with(&x, &y, 1).unwrap(),
            energy_distance_with(&x, &y, 3).unwrap()
        );
        assert!(energy_distance(&x, &set(&[])).is_err());
    }

    #[test]
    fn energy_distance_matches_pairwise_oracle() {
        let spec = MixtureSpec::default_ring();
        let x = sample_mixture(&spec, 40, &mut RandomStream::new(5)).unwrap();
        let y = sample_mixture(&spec, 30, &mut RandomStream::new(6)).unwrap();
        let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        let mean = |s: &SampleSet, t: &SampleSet| {
            let mut acc = 0.0;
            for i in 0..s.len() {
                for j in 0..t.len() {
                    acc += d(s.point(i), t.point(j));
                }
            }
            acc / (s.len() * t.len()) as f64
        };
        let oracle = 2.0 * mean(&x, &y) - mean(&x, &x) - mean(&y, &y);
        assert!((energy_distance(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn sliced_wasserstein_examples() {
        let a = set(&[[0.0, 0.0]]);
        let b = set(&[[1.0, 0.0]]);
        let v = sliced_wasserstein(&a, &b, 200_000, &mut RandomStream::new(3)).unwrap();
        assert!((v - 2.0 / PI).abs() <= 0.01, "{v}");
        let spec = MixtureSpec::default_ring();
        let x = sample_mixture(&spec, 500, &mut RandomStream::new(1)).unwrap();
        let y = sample_mixture(&spec, 500, &mut RandomStream::new(2)).unwrap();
        assert!(sliced_wasserstein(&x, &x, 64, &mut RandomStream::new(0)).unwrap().abs() <= 1e-12);
        let base = sliced_wasserstein(&x, &y, 64, &mut RandomStream::new(9)).unwrap();
        let s = 3.5;
        let scaled = |z: &SampleSet| SampleSet::unlabeled(z.points.scale(s), "scaled");
        let v = sliced_wasserstein(&scaled(&x), &scaled(&y), 64, &mut RandomStream::new(9)).unwrap();
        assert!((v - s * base).abs() <= 1e-10 * s * base);
    }

    #[test]
    fn sliced_wasserstein_subsamples_larger_set() {
        let spec = MixtureSpec::default_ring();
        let x = sample_mixture(&spec, 500, &mut RandomStream::new(1)).unwrap();
        let y = sample_mixture(&spec, 200, &mut RandomStream::new(2)).unwrap();
        let v = sliced_wasserstein(&x, &y, 16, &mut RandomStream::new(4)).unwrap();
        assert!(v.is_finite() && v >= 0.0);
        assert!(sliced_wasserstein(&x, &set(&[]), 16, &mut RandomStream::new(4)).is_err());
    }
}
