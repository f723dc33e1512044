//! Synthetic vMF mixtures, long-tailed subsampling, vector augmentations
//! and CSV I/O.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{dot, Tensor};
use crate::clustering::{random_direction, vmf_sample, VmfParams};
use crate::error::{NccError, Result};

pub const SEPARATION_LIMIT: f64 = 0.5;
pub const SEPARATION_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Kappa {
    Shared(f64),
    PerClass(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub ambient_dim: usize,
    pub kappa: Kappa,
    pub counts: Vec<usize>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn balanced(num_classes: usize, ambient_dim: usize, kappa: f64, per_class: usize, seed: u64) -> Self {
        Self {
            num_classes,
            ambient_dim,
            kappa: Kappa::Shared(kappa),
            counts: vec![per_class; num_classes],
            seed,
        }
    }

    /// K=4, d=32, κ=50, 250 samples per class.
    pub fn benchmark(seed: u64) -> Self {
        Self::balanced(4, 32, 50.0, 250, seed)
    }

    pub fn kappa_of(&self, class: usize) -> f64 {
        match &self.kappa {
            Kappa::Shared(k) => *k,
            Kappa::PerClass(ks) => ks[class],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(NccError::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.ambient_dim < 2 {
            return Err(NccError::Config(format!("ambient_dim must be ≥ 2, got {}", self.ambient_dim)));
        }
        if self.counts.len() != self.num_classes {
            return Err(NccError::Config(format!(
                "{} class counts for {} classes",
                self.counts.len(),
                self.num_classes
            )));
        }
        if self.counts.contains(&0) {
            return Err(NccError::Config("every class count must be ≥ 1".into()));
        }
        let kappas: Vec<f64> = match &self.kappa {
            Kappa::Shared(k) => vec![*k],
            Kappa::PerClass(ks) => {
                if ks.len() != self.num_classes {
                    return Err(NccError::Config(format!(
                        "{} kappas for {} classes",
                        ks.len(),
                        self.num_classes
                    )));
                }
                ks.clone()
            }
        };
        if kappas.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return Err(NccError::Config("kappa must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub noise_std: f64,
    pub mask_prob: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            mask_prob: 0.1,
            scale_range: [0.8, 1.2],
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            mask_prob: 0.0,
            scale_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(NccError::Config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(NccError::Config(format!("mask_prob must lie in [0, 1), got {}", self.mask_prob)));
        }
        let [lo, hi] = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(NccError::Config(format!("scale_range needs 0 < lo ≤ hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(NccError::Dimension(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
        }
        let ids = (0..features.rows()).collect();
        Ok(Self { features, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| NccError::Contract("dataset has no true labels".into()))
    }

    /// Per-label sample counts, indexed by label value.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let labels = self.labels()?;
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0; k];
        for &l in labels {
            counts[l] += 1;
        }
        Ok(counts)
    }
}

fn draw_means(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..SEPARATION_ATTEMPTS {
        let means: Vec<Vec<f64>> = (0..spec.num_classes)
            .map(|_| random_direction(spec.ambient_dim, rng))
            .collect();
        let separated = (0..means.len())
            .all(|i| (i + 1..means.len()).all(|j| dot(&means[i], &means[j]).abs() < SEPARATION_LIMIT));
        if separated {
            return Ok(means);
        }
    }
    Err(NccError::Infeasible(format!(
        "no {} mean directions in dimension {} with pairwise |cos| < {SEPARATION_LIMIT} after {SEPARATION_ATTEMPTS} attempts",
        spec.num_classes, spec.ambient_dim
    )))
}

/// The class mean directions `gen_vmf_mixture` uses for `spec`, one per row.
pub fn mixture_means(spec: &SyntheticSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Tensor::from_rows(&draw_means(spec, &mut rng)?)
}

/// Class-ordered samples from a mixture of vMF distributions.
pub fn gen_vmf_mixture(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = draw_means(spec, &mut rng)?;
    let n: usize = spec.counts.iter().sum();
    let mut data = Vec::with_capacity(n * spec.ambient_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mu) in means.into_iter().enumerate() {
        let params = VmfParams::new(mu, spec.kappa_of(c))?;
        let x = vmf_sample(&params, spec.counts[c], &mut rng)?;
        data.extend_from_slice(x.data());
        labels.extend(std::iter::repeat_n(c, spec.counts[c]));
    }
    Dataset::new(Tensor::new(n, spec.ambient_dim, data)?, Some(labels))
}

/// Class sizes `round(n_max · ratio^(c/(K−1)))`, at least 1.
pub fn long_tail_profile(n_max: usize, k: usize, ratio: f64) -> Vec<usize> {
    (0..k)
        .map(|c| {
            let e = if k > 1 { c as f64 / (k - 1) as f64 } else { 0.0 };
            ((n_max as f64 * ratio.powf(e)).round() as usize).max(1)
        })
        .collect()
}

/// Subsamples each class without replacement to an exponentially decaying
/// profile. `N_max` is the smallest class size of the input; row order is
/// preserved and ids are renumbered.
pub fn make_long_tailed(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(NccError::Config(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let labels = ds.labels()?;
    let counts = ds.class_counts()?;
    let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    let n_max = present.iter().map(|&c| counts[c]).min().unwrap_or(0);
    let target = long_tail_profile(n_max, present.len(), ratio);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (&c, &want) in present.iter().zip(&target) {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        keep.extend(index::sample(&mut rng, members.len(), want).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    let features = ds.features.select_rows(&keep);
    let kept_labels = keep.iter().map(|&i| labels[i]).collect();
    Dataset::new(features, Some(kept_labels))
}

/// One augmented view: per row, additive Gaussian noise, then coordinate
/// masking, then a global scale.
pub fn augment(x: &Tensor, spec: &AugmentSpec, rng: &mut impl Rng) -> Tensor {
    let mut out = x.clone();
    let [lo, hi] = spec.scale_range;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if spec.noise_std > 0.0 {
            for v in row.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += spec.noise_std * e;
            }
        }
        if spec.mask_prob > 0.0 {
            for v in row.iter_mut() {
                if rng.gen::<f64>() < spec.mask_prob {
                    *v = 0.0;
                }
            }
        }
        let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        if s != 1.0 {
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
    out
}

fn parse_err(line: u64, msg: impl Into<String>) -> NccError {
    NccError::Parse { line, msg: msg.into() }
}

fn csv_err(e: csv::Error) -> NccError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => NccError::Io(io),
        kind => parse_err(line, format!("{kind:?}")),
    }
}

/// Reads `label,f0,..` or `f0,..` with a header row.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(1, "empty file"));
    }
    let labeled = &header[0] == "label";
    let dim = header.len() - usize::from(labeled);
    for (j, name) in header.iter().skip(usize::from(labeled)).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(1, format!("unexpected column `{name}`, expected `f{j}`")));
        }
    }
    if dim == 0 {
        return Err(parse_err(1, "no feature columns"));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let mut cells = record.iter();
        if labeled {
            let cell = cells.next().expect("length checked");
            labels.push(
                cell.trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err(line, format!("invalid label `{cell}`")))?,
            );
        }
        for cell in cells {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite cell `{cell}`")));
            }
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(parse_err(1, "no data rows"));
    }
    let n = data.len() / dim;
    Dataset::new(Tensor::new(n, dim, data)?, labeled.then_some(labels))
}

pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = Vec::with_capacity(ds.dim() + 1);
    if ds.labels.is_some() {
        header.push("label".into());
    }
    header.extend((0..ds.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut fields = Vec::with_capacity(header.len());
    for i in 0..ds.len() {
        fields.clear();
        if let Some(l) = &ds.labels {
            fields.push(l[i].to_string());
        }
        fields.extend(ds.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of an embedding dump, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<usize>,
    pub label_true: Option<Vec<usize>>,
    pub label_pred: Option<Vec<usize>>,
    pub features: Tensor,
}

/// Writes `id,label_true?,label_pred,f0..`.
pub fn save_embeddings_csv(
    path: &Path,
    ids: &[usize],
    label_true: Option<&[usize]>,
    label_pred: &[usize],
    features: &Tensor,
) -> Result<()> {
    let n = features.rows();
    if ids.len() != n || label_pred.len() != n || label_true.is_some_and(|l| l.len() != n) {
        return Err(NccError::Dimension(format!("embedding dump of {n} rows with mismatched columns")));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["id".to_string()];
    if label_true.is_some() {
        header.push("label_true".into());
    }
    header.push("label_pred".into());
    header.extend((0..features.cols()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut fields = Vec::with_capacity(header.len());
    for i in 0..n {
        fields.clear();
        fields.push(ids[i].to_string());
        if let Some(t) = label_true {
            fields.push(t[i].to_string());
        }
        fields.push(label_pred[i].to_string());
        fields.extend(features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an embedding dump; `label_true` and `label_pred` are optional.
pub fn load_embeddings_csv(path: &Path) -> Result<Embeddings> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("id") {
        return Err(parse_err(1, "first column must be `id`"));
    }
    let mut col = 1;
    let has_true = header.get(col) == Some("label_true");
    col += usize::from(has_true);
    let has_pred = header.get(col) == Some("label_pred");
    col += usize::from(has_pred);
    let dim = header.len() - col;
    for (j, name) in header.iter().skip(col).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(1, format!("unexpected column `{name}`, expected `f{j}`")));
        }
    }
    if dim == 0 {
        return Err(parse_err(1, "no feature columns"));
    }

    let (mut ids, mut truth, mut pred, mut data) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let int = |cell: &str| {
            cell.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("invalid integer `{cell}`")))
        };
        ids.push(int(&record[0])?);
        if has_true {
            truth.push(int(&record[1])?);
        }
        if has_pred {
            pred.push(int(&record[col - 1])?);
        }
        for cell in record.iter().skip(col) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite cell `{cell}`")));
            }
            data.push(v);
        }
    }
    if ids.is_empty() {
        return Err(parse_err(1, "no data rows"));
    }
    Ok(Embeddings {
        features: Tensor::new(ids.len(), dim, data)?,
        ids,
        label_true: has_true.then_some(truth),
        label_pred: has_pred.then_some(pred),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::imbalance_ratio;

    #[test]
    fn two_classes_in_the_plane_are_separated() {
        let spec = SyntheticSpec::balanced(2, 2, 10.0, 5, 3);
        let mu = mixture_means(&spec).unwrap();
        assert_eq!(mu.rows(), 2);
        assert!(dot(mu.row(0), mu.row(1)).abs() < 0.5);
        let ds = gen_vmf_mixture(&spec).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.class_counts().unwrap(), vec![5, 5]);
    }

    #[test]
    fn concentrated_classes_recover_their_means() {
        let spec = SyntheticSpec::balanced(4, 16, 200.0, 250, 11);
        let ds = gen_vmf_mixture(&spec).unwrap();
        let mu = mixture_means(&spec).unwrap();
        let labels = ds.labels().unwrap();
        for c in 0..4 {
            let mut mean = vec![0.0; 16];
            for i in (0..ds.len()).filter(|&i| labels[i] == c) {
                mean.iter_mut().zip(ds.features.row(i)).for_each(|(m, v)| *m += v);
            }
            let norm = dot(&mean, &mean).sqrt();
            assert!(dot(&mean, mu.row(c)) / norm > 0.99);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::benchmark(5);
        assert_eq!(gen_vmf_mixture(&spec).unwrap(), gen_vmf_mixture(&spec).unwrap());
        let other = SyntheticSpec::benchmark(6);
        assert_ne!(gen_vmf_mixture(&spec).unwrap(), gen_vmf_mixture(&other).unwrap());
    }

    #[test]
    fn too_many_classes_is_infeasible() {
        let spec = SyntheticSpec::balanced(12, 2, 1.0, 3, 0);
        assert!(matches!(gen_vmf_mixture(&spec), Err(NccError::Infeasible(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSpec::balanced(3, 4, 1.0, 3, 0);
        spec.counts[1] = 0;
        assert!(spec.validate().is_err());
        assert!(SyntheticSpec::balanced(1, 4, 1.0, 3, 0).validate().is_err());
        let mut spec = SyntheticSpec::balanced(2, 4, 1.0, 3, 0);
        spec.kappa = Kappa::PerClass(vec![1.0]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn long_tail_profile_hits_the_ratio() {
        let profile = long_tail_profile(500, 10, 0.1);
        assert_eq!(profile[0], 500);
        assert_eq!(profile[9], 50);
        assert!(profile.windows(2).all(|w| w[0] >= w[1]));

        let ds = gen_vmf_mixture(&SyntheticSpec::balanced(10, 16, 20.0, 500, 2)).unwrap();
        let lt = make_long_tailed(&ds, 0.1, 9).unwrap();
        assert_eq!(lt.class_counts().unwrap(), profile);
        assert!((imbalance_ratio(lt.labels().unwrap()).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(lt.ids, (0..lt.len()).collect::<Vec<_>>());
    }

    #[test]
    fn unit_ratio_keeps_everything() {
        let ds = gen_vmf_mixture(&SyntheticSpec::balanced(3, 4, 5.0, 7, 1)).unwrap();
        assert_eq!(make_long_tailed(&ds, 1.0, 4).unwrap(), ds);
    }

    #[test]
    fn long_tail_needs_labels() {
        let ds = Dataset::new(Tensor::zeros(4, 2), None).unwrap();
        assert!(matches!(make_long_tailed(&ds, 0.5, 0), Err(NccError::Contract(_))));
    }

    #[test]
    fn identity_augmentation() {
        let ds = gen_vmf_mixture(&SyntheticSpec::balanced(2, 8, 5.0, 10, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&ds.features, &AugmentSpec::identity(), &mut rng), ds.features);
    }

    #[test]
    fn augment_spec_bounds() {
        let mut spec = AugmentSpec::identity();
        spec.mask_prob = 1.0;
        assert!(spec.validate().is_err());
        spec.mask_prob = 0.0;
        spec.scale_range = [1.2, 0.8];
        assert!(spec.validate().is_err());
        spec.scale_range = [0.0, 1.0];
        assert!(spec.validate().is_err());
        assert!(AugmentSpec::default().validate().is_ok());
    }

    #[test]
    fn noise_perturbation_norm_follows_chi() {
        let d = 64;
        let spec = AugmentSpec {
            noise_std: 0.1,
            ..AugmentSpec::identity()
        };
        let ds = gen_vmf_mixture(&SyntheticSpec::balanced(2, d, 5.0, 1000, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = augment(&ds.features, &spec, &mut rng);
        let mean: f64 = (0..ds.len())
            .map(|i| {
                let diff: Vec<f64> = y.row(i).iter().zip(ds.features.row(i)).map(|(a, b)| a - b).collect();
                dot(&diff, &diff).sqrt()
            })
            .sum::<f64>()
            / ds.len() as f64;
        let expected = 0.1 * (d as f64).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn default_augmentation_keeps_class_identity() {
        let spec = SyntheticSpec::benchmark(0);
        let ds = gen_vmf_mixture(&spec).unwrap();
        let mu = mixture_means(&spec).unwrap();
        let labels = ds.labels().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = augment(&ds.features, &AugmentSpec::default(), &mut rng);
        let hits = (0..ds.len())
            .filter(|&i| {
                let best = (0..4)
                    .max_by(|&a, &b| dot(y.row(i), mu.row(a)).total_cmp(&dot(y.row(i), mu.row(b))))
                    .unwrap();
                best == labels[i]
            })
            .count();
        assert!(hits as f64 / ds.len() as f64 >= 0.99, "{hits}");
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = Dataset::new(
            Tensor::from_rows(&[vec![0.1, -1.0 / 3.0], vec![1e-300, 2.5e10]]).unwrap(),
            Some(vec![1, 0]),
        )
        .unwrap();
        save_csv(&path, &ds).unwrap();
        assert_eq!(load_csv(&path).unwrap(), ds);

        let unlabeled = Dataset::new(ds.features.clone(), None).unwrap();
        save_csv(&path, &unlabeled).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back, unlabeled);
        assert!(back.labels().is_err());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let cases = [
            ("label,f0,f1\n0,1,2\n1,3\n", 3),
            ("f0,f1\n1,2\n3,x\n", 3),
            ("", 1),
            ("f0,f1\n", 1),
            ("f0,f1\n1,inf\n", 2),
        ];
        for (text, line) in cases {
            std::fs::write(&path, text).unwrap();
            match load_csv(&path) {
                Err(NccError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn large_csv_parses_quickly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.csv");
        let ds = gen_vmf_mixture(&SyntheticSpec::balanced(4, 64, 10.0, 2500, 0)).unwrap();
        save_csv(&path, &ds).unwrap();
        let start = std::time::Instant::now();
        let back = load_csv(&path).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0);
        assert_eq!(back.len(), 10_000);
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let z = Tensor::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        save_embeddings_csv(&path, &[0, 1, 2], Some(&[1, 0, 0]), &[2, 2, 0], &z).unwrap();
        let e = load_embeddings_csv(&path).unwrap();
        assert_eq!(e.ids, vec![0, 1, 2]);
        assert_eq!(e.label_true, Some(vec![1, 0, 0]));
        assert_eq!(e.label_pred, Some(vec![2, 2, 0]));
        assert_eq!(e.features, z);

        save_embeddings_csv(&path, &[0, 1, 2], None, &[2, 2, 0], &z).unwrap();
        let e = load_embeddings_csv(&path).unwrap();
        assert!(e.label_true.is_none());
        assert_eq!(e.label_pred, Some(vec![2, 2, 0]));
        std::fs::write(&path, "id,f0\n3,0.5\n").unwrap();
        let e = load_embeddings_csv(&path).unwrap();
        assert!(e.label_true.is_none() && e.label_pred.is_none());
    }
}
