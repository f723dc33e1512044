//! Spherical k-means (E-step) and von Mises–Fisher sampling.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{dot, norm, Tensor};
use crate::error::{NccError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once one iteration lowers the objective by no more than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest objective wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub assignments: Vec<usize>,
    /// `Σᵢ (1 − zᵢ·μ_{aᵢ})`
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after the initial assignment and after every accepted iteration.
    pub trace: Vec<f64>,
}

/// Label of the most similar centroid; ties go to the lowest index.
pub fn assign(z: &Tensor, centroids: &Tensor) -> Vec<usize> {
    z.iter_rows()
        .map(|row| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (k, c) in centroids.iter_rows().enumerate() {
                let s = dot(row, c);
                if s > best_sim {
                    best_sim = s;
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn objective(z: &Tensor, centroids: &Tensor, labels: &[usize]) -> f64 {
    z.iter_rows()
        .zip(labels)
        .map(|(row, &k)| 1.0 - dot(row, centroids.row(k)))
        .sum()
}

/// k-means++ seeding with `(1 − cos)²` weights.
fn seed_plus_plus(z: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let n = z.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut weight: Vec<f64> = z
        .iter_rows()
        .map(|r| (1.0 - dot(r, z.row(chosen[0]))).powi(2))
        .collect();
    while chosen.len() < k {
        let total: f64 = weight.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weight.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // rounding can leave target just past the last positive weight
            if weight[pick] == 0.0 {
                pick = weight.iter().rposition(|w| *w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point coincides with a chosen centroid
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.gen_range(0..unused.len())]
        };
        chosen.push(next);
        for (w, r) in weight.iter_mut().zip(z.iter_rows()) {
            *w = w.min((1.0 - dot(r, z.row(next))).powi(2));
        }
    }
    z.select_rows(&chosen)
}

/// Normalized member means; clusters without members take the worst-fit point.
fn update_centroids(z: &Tensor, labels: &[usize], previous: &Tensor) -> Tensor {
    let [k, d] = previous.shape();
    let mut sums = Tensor::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &c) in z.iter_rows().zip(labels) {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut out = previous.clone();
    for (c, &count) in counts.iter().enumerate() {
        let n = norm(sums.row(c));
        if count > 0 && n > 0.0 {
            for (o, s) in out.row_mut(c).iter_mut().zip(sums.row(c)) {
                *o = s / n;
            }
        }
    }
    let mut taken: Vec<usize> = Vec::new();
    for c in (0..k).filter(|&c| counts[c] == 0) {
        let worst = z
            .iter_rows()
            .zip(labels)
            .enumerate()
            .filter(|(i, _)| !taken.contains(i))
            .map(|(i, (row, &l))| (i, dot(row, out.row(l))))
            .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
                Some((_, best)) if best <= s => acc,
                _ => Some((i, s)),
            });
        if let Some((i, _)) = worst {
            taken.push(i);
            out.row_mut(c).copy_from_slice(z.row(i));
        }
    }
    out
}

/// Moves single points between clusters while that lowers
/// `Σ_c (n_c − ‖Σ_{i∈c} zᵢ‖)`; never empties a cluster. Returns whether anything moved.
fn refine_single_moves(z: &Tensor, k: usize, labels: &mut [usize], tol: f64) -> bool {
    let d = z.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in z.iter_rows().zip(labels.iter()) {
        counts[c] += 1;
        sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let shifted = |s: &[f64], row: &[f64], sign: f64| -> f64 {
        s.iter().zip(row).map(|(a, b)| (a + sign * b).powi(2)).sum::<f64>().sqrt()
    };
    let mut moved_any = false;
    for _ in 0..z.rows() * k {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in z.iter_rows().enumerate() {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let loss_a = norm(&sums[a]) - shifted(&sums[a], row, -1.0);
            for b in (0..k).filter(|&b| b != a && counts[b] > 0) {
                let gain = shifted(&sums[b], row, 1.0) - norm(&sums[b]) - loss_a;
                if gain > tol && best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((i, b, gain));
                }
            }
        }
        let Some((i, b, _)) = best else { break };
        let a = labels[i];
        let row = z.row(i);
        sums[a].iter_mut().zip(row).for_each(|(s, v)| *s -= v);
        sums[b].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        counts[a] -= 1;
        counts[b] += 1;
        labels[i] = b;
        moved_any = true;
    }
    moved_any
}

fn lloyd(z: &Tensor, k: usize, cfg: &KMeansConfig, rng: &mut impl Rng) -> KMeansResult {
    let mut centroids = seed_plus_plus(z, k, rng);
    let mut labels = assign(z, &centroids);
    let mut obj = objective(z, &centroids, &labels);
    let mut trace = vec![obj];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let next_c = update_centroids(z, &labels, &centroids);
        let next_l = assign(z, &next_c);
        let next_obj = objective(z, &next_c, &next_l);
        iterations += 1;
        if next_obj > obj {
            // only reachable through rounding; keep the better state
            converged = true;
            break;
        }
        let gain = obj - next_obj;
        centroids = next_c;
        labels = next_l;
        obj = next_obj;
        trace.push(obj);
        if gain <= cfg.tol {
            converged = true;
            break;
        }
    }
    if refine_single_moves(z, k, &mut labels, cfg.tol) {
        centroids = update_centroids(z, &labels, &centroids);
        let refined = objective(z, &centroids, &labels);
        if refined < obj {
            obj = refined;
            trace.push(obj);
        }
    }
    KMeansResult {
        centroids,
        assignments: labels,
        objective: obj,
        iterations,
        converged,
        trace,
    }
}

/// Spherical k-means on unit rows with k-means++ seeding and `n_init` restarts.
pub fn spherical_kmeans(z: &Tensor, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 {
        return Err(NccError::Config("k-means needs K >= 1".into()));
    }
    if z.rows() < k {
        return Err(NccError::Infeasible(format!(
            "{} points cannot fill {k} clusters",
            z.rows()
        )));
    }
    if !z.all_finite() {
        return Err(NccError::Numeric("k-means input contains NaN or infinity".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.n_init.max(1) {
        let run = lloyd(z, k, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Writes centroids as CSV with header `k,dim0,...,dim{d-1}`.
pub fn write_centroids_csv(path: &Path, centroids: &Tensor) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("k".to_string())
        .chain((0..centroids.cols()).map(|j| format!("dim{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (k, row) in centroids.iter_rows().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{k},{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(NccError::Config("vMF needs dimension >= 2".into()));
        }
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(NccError::Config(format!("kappa must be >= 0, got {kappa}")));
        }
        if (norm(&mu) - 1.0).abs() > 1e-9 {
            return Err(NccError::Config("vMF mean direction must be unit-norm".into()));
        }
        Ok(Self { mu, kappa })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

fn gaussian_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&g);
        if n > 1e-12 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Cosine component `w = μ·x` by Wood's rejection sampler.
fn sample_cosine(kappa: f64, d: usize, beta: &Beta<f64>, rng: &mut impl Rng) -> f64 {
    let dm1 = (d - 1) as f64;
    // b = (−2κ + √(4κ² + (d−1)²)) / (d−1), rearranged to avoid cancellation
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.gen();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            return w;
        }
    }
}

/// `n` exact vMF draws as unit rows.
pub fn vmf_sample(params: &VmfParams, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let d = params.mu.len();
    let mut data = Vec::with_capacity(n * d);
    if params.kappa == 0.0 {
        for _ in 0..n {
            data.extend(gaussian_unit(d, rng));
        }
        return Tensor::new(n, d, data);
    }
    let half = (d - 1) as f64 / 2.0;
    let beta = Beta::new(half, half).map_err(|e| NccError::Config(e.to_string()))?;
    let mu = &params.mu;
    for _ in 0..n {
        let w = sample_cosine(params.kappa, d, &beta, rng);
        // uniform tangent direction orthogonal to μ
        let v = loop {
            let mut g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let proj = dot(&g, mu);
            g.iter_mut().zip(mu).for_each(|(x, m)| *x -= proj * m);
            let gn = norm(&g);
            if gn > 1e-12 {
                break g.into_iter().map(|x| x / gn).collect::<Vec<_>>();
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        let mut x: Vec<f64> = mu.iter().zip(&v).map(|(m, t)| w * m + s * t).collect();
        let xn = norm(&x);
        x.iter_mut().for_each(|e| *e /= xn);
        data.extend(x);
    }
    Tensor::new(n, d, data)
}

/// A uniformly random unit direction in `d` dimensions.
pub fn random_direction(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    gaussian_unit(d, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).flat_map(|_| gaussian_unit(d, &mut rng)).collect();
        Tensor::new(n, d, data).unwrap()
    }

    fn planar(deg: &[f64]) -> Tensor {
        let rows: Vec<Vec<f64>> = deg
            .iter()
            .map(|a| {
                let r = a.to_radians();
                vec![r.cos(), r.sin()]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    /// Lowest objective over every 2-colouring, with normalized-mean centroids.
    fn brute_force_two(z: &Tensor) -> f64 {
        let n = z.rows();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut obj = 0.0;
            for c in 0..2 {
                let mut s = vec![0.0; z.cols()];
                for (i, _) in labels.iter().enumerate().filter(|(_, l)| **l == c) {
                    s.iter_mut().zip(z.row(i)).for_each(|(a, b)| *a += b);
                }
                // Σ(1 − z·μ) with μ = s/‖s‖ is count − ‖s‖
                let count = labels.iter().filter(|l| **l == c).count() as f64;
                obj += count - norm(&s);
            }
            best = best.min(obj);
        }
        best
    }

    #[test]
    fn saturated_case_has_zero_objective() {
        let z = unit_rows(4, 3, 1);
        let r = spherical_kmeans(&z, 4, 0, &KMeansConfig::default()).unwrap();
        assert!(r.objective.abs() < 1e-12);
        let mut seen = r.assignments.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn planar_angles_split_in_two() {
        let z = planar(&[0.0, 10.0, 170.0, 180.0]);
        let r = spherical_kmeans(&z, 2, 3, &KMeansConfig::default()).unwrap();
        let a = &r.assignments;
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        assert!((r.objective - brute_force_two(&z)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_degenerate_inputs() {
        let z = unit_rows(2, 3, 1);
        assert!(matches!(
            spherical_kmeans(&z, 3, 0, &KMeansConfig::default()),
            Err(NccError::Infeasible(_))
        ));
        // five copies of two points, K = 3
        let mut rows = Vec::new();
        for _ in 0..5 {
            rows.push(vec![1.0, 0.0]);
            rows.push(vec![0.0, 1.0]);
        }
        let z = Tensor::from_rows(&rows).unwrap();
        let r = spherical_kmeans(&z, 3, 0, &KMeansConfig::default()).unwrap();
        assert!(r.objective.abs() < 1e-12);
        assert!(r.assignments.iter().all(|&a| a < 3));
    }

    #[test]
    fn local_optimality_under_single_moves() {
        let z = unit_rows(30, 3, 5);
        let r = spherical_kmeans(&z, 3, 7, &KMeansConfig::default()).unwrap();
        let cost = |labels: &[usize]| -> f64 {
            (0..3)
                .map(|c| {
                    let mut s = vec![0.0; 3];
                    let mut n = 0.0;
                    for (i, _) in labels.iter().enumerate().filter(|(_, l)| **l == c) {
                        s.iter_mut().zip(z.row(i)).for_each(|(a, b)| *a += b);
                        n += 1.0;
                    }
                    n - norm(&s)
                })
                .sum()
        };
        assert!((cost(&r.assignments) - r.objective).abs() < 1e-9);
        for i in 0..30 {
            for c in 0..3 {
                let mut moved = r.assignments.clone();
                moved[i] = c;
                assert!(r.objective <= cost(&moved) + 1e-9);
            }
        }
    }

    #[test]
    fn assign_rules() {
        let c = planar(&[0.0, 90.0]);
        assert_eq!(assign(&planar(&[90.0, 0.0]), &c), vec![1, 0]);
        assert_eq!(assign(&planar(&[45.0]), &c), vec![0]);
        let z = unit_rows(40, 4, 9);
        let r = spherical_kmeans(&z, 3, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(assign(&z, &r.centroids), r.assignments);
    }

    #[test]
    fn objective_trace_is_monotone_and_deterministic() {
        for seed in 0..20 {
            let z = unit_rows(50, 5, seed);
            let r = spherical_kmeans(&z, 4, seed, &KMeansConfig::default()).unwrap();
            assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
            for row in r.centroids.iter_rows() {
                assert!((norm(row) - 1.0).abs() < 1e-9);
            }
            let again = spherical_kmeans(&z, 4, seed, &KMeansConfig::default()).unwrap();
            assert_eq!(r, again);
        }
    }

    #[test]
    fn normalized_mean_beats_perturbations() {
        let z = unit_rows(12, 3, 2);
        let labels = vec![0; 12];
        let c = update_centroids(&z, &labels, &Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap());
        let score = |mu: &[f64]| -> f64 { z.iter_rows().map(|r| dot(r, mu)).sum() };
        let base = score(c.row(0));
        for axis in 0..3 {
            for delta in [-1e-3, 1e-3, -0.1, 0.1] {
                let mut p = c.row(0).to_vec();
                p[axis] += delta;
                let n = norm(&p);
                p.iter_mut().for_each(|v| *v /= n);
                assert!(score(&p) <= base + 1e-12);
            }
        }
    }

    #[test]
    fn vmf_uniform_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mu = vec![0.0; 8];
        mu[0] = 1.0;
        let x = vmf_sample(&VmfParams::new(mu, 0.0).unwrap(), 100_000, &mut rng).unwrap();
        let mut mean = vec![0.0; 8];
        for r in x.iter_rows() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / 1e5);
        }
        assert!(norm(&mean) < 0.02);
    }

    #[test]
    fn vmf_concentrates_at_high_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = vec![0.0, 0.6, 0.8];
        let p = VmfParams::new(mu.clone(), 1000.0).unwrap();
        let x = vmf_sample(&p, 20_000, &mut rng).unwrap();
        let close = x.iter_rows().filter(|r| dot(r, &mu) > 0.99).count();
        assert!(close as f64 / 20_000.0 > 0.99);
        for r in x.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn vmf_rows_unit_for_any_kappa_and_d2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kappa in [0.0, 0.5, 5.0, 50.0, 5000.0] {
            let p = VmfParams::new(vec![0.0, 1.0], kappa).unwrap();
            let x = vmf_sample(&p, 500, &mut rng).unwrap();
            assert!(x.iter_rows().all(|r| (norm(r) - 1.0).abs() < 1e-9));
        }
        assert!(VmfParams::new(vec![1.0], 1.0).is_err());
        assert!(VmfParams::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(VmfParams::new(vec![1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn vmf_is_rotation_equivariant() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = random_direction(d, &mut rng);
        // rotation by 90° in the (0,1) plane
        let rot = |v: &[f64]| -> Vec<f64> {
            let mut r = v.to_vec();
            r[0] = -v[1];
            r[1] = v[0];
            r
        };
        let mean_dir = |mu: Vec<f64>, seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = vmf_sample(&VmfParams::new(mu, 100.0).unwrap(), 100_000, &mut rng).unwrap();
            let mut m = vec![0.0; d];
            for r in x.iter_rows() {
                m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
            }
            let n = norm(&m);
            m.into_iter().map(|v| v / n).collect()
        };
        let a = mean_dir(mu.clone(), 5);
        let b = mean_dir(rot(&mu), 6);
        assert!(dot(&rot(&a), &b) > 0.999);
    }

    #[test]
    fn centroids_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_centroids_csv(&p, &planar(&[0.0, 90.0])).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("k,dim0,dim1\n0,1,0\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
