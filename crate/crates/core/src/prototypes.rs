//! Class prototypes (mean + covariance of features), their calibration across
//! tasks, Gaussian feature sampling, and the prototype distance metric.
//!
//! Under a drift compensator `W` the covariance is pushed forward as
//! `W Σ Wᵀ` alongside the mean, which is the exact image of a Gaussian under a
//! linear map. The semantic-drift baseline only translates means.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::TimeSeriesSample;
use crate::dcn::DriftCompensator;
use crate::error::{contract, io_err, Error, Result};
use crate::model::FrozenModel;
use crate::tensor::Tensor;

/// Shrinkage added to every covariance: `ε = SHRINKAGE · tr(Σ) / D`.
pub const SHRINKAGE: f64 = 1e-4;
/// Kernel weights at or below this count as vanished.
const MIN_KERNEL_WEIGHT: f64 = 1e-12;
const SYMMETRY_TOL: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub class: usize,
    pub mean: Vec<f32>,
    /// `D×D`, symmetric.
    pub cov: Tensor,
    pub task_of_origin: usize,
}

impl ClassPrototype {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased covariance (divisor `n − 1`) of feature rows, in f64.
pub fn mean_and_covariance(features: &[&[f32]]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return contract(format!("covariance needs at least 2 samples, got {n}"));
    }
    let d = features[0].len();
    let mut mean = vec![0.0f64; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(*f) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut c = vec![0.0f64; d];
    for f in features {
        for i in 0..d {
            c[i] = f[i] as f64 - mean[i];
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= (n - 1) as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok((mean, cov))
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::from_fn(&[r, c], |k| m[(k / c, k % c)] as f32)
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = (t.rows(), t.cols());
    DMatrix::from_fn(r, c, |i, j| t.data()[i * c + j] as f64)
}

/// Builds one prototype per class from feature rows and their labels.
pub fn prototypes_from_features(
    features: &Tensor,
    labels: &[usize],
    task: usize,
) -> Result<Vec<ClassPrototype>> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "compute_prototypes",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut by_class: BTreeMap<usize, Vec<&[f32]>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(features.row(i));
    }
    by_class
        .into_iter()
        .map(|(class, rows)| {
            if rows.len() < 2 {
                return contract(format!(
                    "class {class} has {} sample(s); covariance needs at least 2",
                    rows.len()
                ));
            }
            let (mean, mut cov) = mean_and_covariance(&rows)?;
            let d = mean.len();
            let eps = SHRINKAGE * cov.trace() / d as f64;
            for i in 0..d {
                cov[(i, i)] += eps;
            }
            Ok(ClassPrototype {
                class,
                mean: mean.iter().map(|&v| v as f32).collect(),
                cov: to_tensor(&cov),
                task_of_origin: task,
            })
        })
        .collect()
}

/// Prototypes of every class in `data` under `model`.
pub fn compute_prototypes(
    model: &FrozenModel,
    data: &[TimeSeriesSample],
    task: usize,
) -> Result<Vec<ClassPrototype>> {
    let features = model.features(data)?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    prototypes_from_features(&features, &labels, task)
}

/// Symmetric PSD square root via eigen-decomposition; negative eigenvalues
/// are clamped to zero first.
pub fn psd_sqrt(cov: &Tensor) -> Result<Tensor> {
    let d = cov.rows();
    if cov.shape() != [d, d] {
        return contract(format!("covariance must be square, got {:?}", cov.shape()));
    }
    let scale = cov.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in i + 1..d {
            let (a, b) = (cov.data()[i * d + j], cov.data()[j * d + i]);
            if (a - b).abs() > SYMMETRY_TOL * scale {
                return contract(format!(
                    "covariance is not symmetric at ({i},{j}): {a} vs {b}"
                ));
            }
        }
    }
    let m = to_matrix(cov);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&root) * v.transpose();
    Ok(to_tensor(&s))
}

/// Draws `n` features `μ + Σ^{1/2} z` with `z ~ N(0, I)`.
pub fn sample_features(p: &ClassPrototype, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return contract("sample count must be at least 1");
    }
    let d = p.dim();
    let root = psd_sqrt(&p.cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * d);
    let mut z = vec![0.0f64; d];
    for _ in 0..n {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..d {
            let row = root.row(i);
            let v: f64 = row.iter().zip(&z).map(|(&r, &zz)| r as f64 * zz).sum();
            out.push((p.mean[i] as f64 + v) as f32);
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Outcome of a semantic-drift update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SdcReport {
    pub sigma: f32,
    /// Classes whose kernel weights all vanished and fell back to the
    /// unweighted mean drift.
    pub fallback_classes: Vec<usize>,
}

/// Exactly one prototype per seen class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeStore {
    protos: BTreeMap<usize, ClassPrototype>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.protos.keys().copied().collect()
    }

    pub fn get(&self, class: usize) -> Option<&ClassPrototype> {
        self.protos.get(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.protos.values()
    }

    pub fn insert(&mut self, p: ClassPrototype) -> Result<()> {
        if let Some(existing) = self.protos.values().next() {
            if existing.dim() != p.dim() {
                return Err(Error::Dimension {
                    op: "prototype_insert",
                    lhs: vec![existing.dim()],
                    rhs: vec![p.dim()],
                });
            }
        }
        if self.protos.contains_key(&p.class) {
            return contract(format!("class {} already has a prototype", p.class));
        }
        self.protos.insert(p.class, p);
        Ok(())
    }

    pub fn extend(&mut self, ps: impl IntoIterator<Item = ClassPrototype>) -> Result<()> {
        for p in ps {
            self.insert(p)?;
        }
        Ok(())
    }

    /// Restricts the store to `classes`.
    pub fn subset(&self, classes: &[usize]) -> Self {
        Self {
            protos: self
                .protos
                .iter()
                .filter(|(c, _)| classes.contains(c))
                .map(|(c, p)| (*c, p.clone()))
                .collect(),
        }
    }

    /// Pushes every prototype through the compensator: `μ ← Wμ`, `Σ ← WΣWᵀ`.
    pub fn update_with_dcn(&mut self, dcn: &DriftCompensator) -> Result<()> {
        let w = to_matrix(&dcn.weight);
        for p in self.protos.values_mut() {
            if p.dim() != dcn.dim() {
                return Err(Error::Dimension {
                    op: "update_with_dcn",
                    lhs: dcn.weight.shape().to_vec(),
                    rhs: vec![p.dim()],
                });
            }
            let mu = nalgebra::DVector::from_iterator(p.dim(), p.mean.iter().map(|&v| v as f64));
            p.mean = (&w * mu).iter().map(|&v| v as f32).collect();
            let cov = &w * to_matrix(&p.cov) * w.transpose();
            p.cov = to_tensor(&((&cov + cov.transpose()) * 0.5));
        }
        Ok(())
    }

    /// Shifts every mean by the kernel-weighted drift observed between paired
    /// old/new features; covariances are left as they are. `sigma` defaults to
    /// the median pairwise distance among the old features.
    pub fn sdc_update_features(
        &mut self,
        old: &Tensor,
        new: &Tensor,
        sigma: Option<f32>,
    ) -> Result<SdcReport> {
        if old.shape() != new.shape() {
            return Err(Error::Dimension {
                op: "sdc_update",
                lhs: old.shape().to_vec(),
                rhs: new.shape().to_vec(),
            });
        }
        let n = old.rows();
        let d = old.cols();
        let sigma = sigma.unwrap_or_else(|| median_pairwise_distance(old)) as f64;
        let drift: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                old.row(i)
                    .iter()
                    .zip(new.row(i))
                    .map(|(&a, &b)| b as f64 - a as f64)
                    .collect()
            })
            .collect();
        let mut report = SdcReport {
            sigma: sigma as f32,
            fallback_classes: Vec::new(),
        };
        for p in self.protos.values_mut() {
            if p.dim() != d {
                return Err(Error::Dimension {
                    op: "sdc_update",
                    lhs: vec![p.dim()],
                    rhs: vec![d],
                });
            }
            let mut weights: Vec<f64> = (0..n)
                .map(|i| {
                    let dist2: f64 = old
                        .row(i)
                        .iter()
                        .zip(&p.mean)
                        .map(|(&f, &m)| (f as f64 - m as f64).powi(2))
                        .sum();
                    if sigma > 0.0 {
                        (-dist2 / (2.0 * sigma * sigma)).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            if weights.iter().all(|&w| w <= MIN_KERNEL_WEIGHT) {
                report.fallback_classes.push(p.class);
                weights = vec![1.0; n];
            }
            let total: f64 = weights.iter().sum();
            for (k, m) in p.mean.iter_mut().enumerate() {
                let shift: f64 = weights.iter().zip(&drift).map(|(w, dr)| w * dr[k]).sum();
                *m = (*m as f64 + shift / total) as f32;
            }
        }
        Ok(report)
    }

    /// Semantic drift compensation on a new task's data under both models.
    pub fn sdc_update(
        &mut self,
        old: &FrozenModel,
        new: &FrozenModel,
        data: &[TimeSeriesSample],
        sigma: Option<f32>,
    ) -> Result<SdcReport> {
        if data.is_empty() {
            return contract("semantic drift update needs new-task data");
        }
        self.sdc_update_features(&old.features(data)?, &new.features(data)?, sigma)
    }

    /// CSV rows `class_id, task_of_origin, mu_0, ..., mu_{D-1}`.
    pub fn means_csv(&self) -> String {
        let mut out = String::new();
        for p in self.protos.values() {
            out.push_str(&format!("{},{}", p.class, p.task_of_origin));
            for v in &p.mean {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Covariance blocks: magic "TSCP", version, D, n, class ids, then one
    /// f32 section per class (checkpoint section layout).
    pub fn covariances_bin(&self) -> Vec<u8> {
        let d = self.protos.values().next().map(|p| p.dim()).unwrap_or(0);
        let mut w = crate::model::checkpoint_writer();
        w.bytes(b"TSCP").u32(1).u32(d).u32(self.protos.len());
        for c in self.protos.keys() {
            w.u32(*c);
        }
        let sections: Vec<&[f32]> = self.protos.values().map(|p| p.cov.data()).collect();
        w.sections(&sections);
        w.finish()
    }

    /// Writes `prototypes_task{t}.csv` and `prototypes_task{t}_cov.bin`.
    pub fn dump(&self, dir: &Path, task: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = dir.join(format!("prototypes_task{task}.csv"));
        fs::write(&csv, self.means_csv()).map_err(io_err(&csv))?;
        let bin = dir.join(format!("prototypes_task{task}_cov.bin"));
        fs::write(&bin, self.covariances_bin()).map_err(io_err(&bin))
    }
}

/// Reads a covariance dump back into `(class, D×D tensor)` pairs.
pub fn read_covariances(bytes: &[u8]) -> Result<Vec<(usize, Tensor)>> {
    let mut r = crate::model::checkpoint_reader(bytes);
    if r.bytes(4)? != b"TSCP" {
        return contract("not a prototype covariance dump");
    }
    let _version = r.u32()?;
    let d = r.u32()?;
    let n = r.u32()?;
    let classes: Vec<usize> = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
    let sections = r.sections()?;
    if sections.len() != n {
        return contract("section count disagrees with class count");
    }
    classes
        .into_iter()
        .zip(sections)
        .map(|(c, s)| Ok((c, Tensor::new(vec![d, d], s)?)))
        .collect()
}

fn median_pairwise_distance(f: &Tensor) -> f32 {
    let n = f.rows();
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f32 = f.row(i).iter().zip(f.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f32::total_cmp);
    dists[dists.len() / 2]
}

/// `D^t = Σ_c ‖μ_updated,c − μ_real,c‖²` over a shared class set.
pub fn prototype_distance(updated: &PrototypeStore, real: &PrototypeStore) -> Result<f64> {
    if updated.classes() != real.classes() {
        return contract(format!(
            "prototype sets disagree: {:?} vs {:?}",
            updated.classes(),
            real.classes()
        ));
    }
    Ok(updated
        .iter()
        .zip(real.iter())
        .map(|(u, r)| {
            u.mean
                .iter()
                .zip(&r.mean)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto(class: usize, mean: Vec<f32>, cov: Tensor) -> ClassPrototype {
        ClassPrototype {
            class,
            mean,
            cov,
            task_of_origin: 1,
        }
    }

    #[test]
    fn two_point_covariance() {
        let rows: [&[f32]; 2] = [&[0.0, 0.0], &[2.0, 2.0]];
        let (mean, cov) = mean_and_covariance(&rows).unwrap();
        assert_eq!(mean, vec![1.0, 1.0]);
        assert_eq!(cov.as_slice(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn shrinkage_is_trace_scaled() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let p = prototypes_from_features(&f, &[3, 3], 1).unwrap();
        let eps = (1e-4 * 4.0 / 2.0) as f32;
        assert_eq!(p[0].cov.data(), &[2.0 + eps, 2.0, 2.0, 2.0 + eps]);
    }

    #[test]
    fn identical_features_give_zero_covariance() {
        let f = Tensor::from_rows(&vec![vec![1.5, -2.0]; 3]).unwrap();
        let p = &prototypes_from_features(&f, &[0, 0, 0], 1).unwrap()[0];
        assert_eq!(p.mean, vec![1.5, -2.0]);
        assert!(p.cov.data().iter().all(|&v| v == 0.0));
        let s = sample_features(p, 5, 0).unwrap();
        for i in 0..5 {
            assert_eq!(s.row(i), &[1.5, -2.0]);
        }
    }

    #[test]
    fn single_sample_class_rejected() {
        let f = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert!(prototypes_from_features(&f, &[0, 0, 1], 1).is_err());
    }

    #[test]
    fn identity_covariance_root() {
        let r = psd_sqrt(&Tensor::identity(3)).unwrap();
        for (a, b) in r.data().iter().zip(Tensor::identity(3).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let c = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(psd_sqrt(&c).is_err());
    }

    #[test]
    fn zero_samples_rejected() {
        let p = proto(0, vec![0.0], Tensor::identity(1));
        assert!(sample_features(&p, 0, 0).is_err());
    }

    #[test]
    fn doubled_pushforward() {
        let mut store = PrototypeStore::new();
        store.insert(proto(0, vec![1.0, 1.0], Tensor::identity(2))).unwrap();
        let mut d = DriftCompensator::new(2);
        d.weight = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        store.update_with_dcn(&d).unwrap();
        let p = store.get(0).unwrap();
        assert_eq!(p.mean, vec![2.0, 2.0]);
        assert_eq!(p.cov.data(), &[4.0, 0.0, 0.0, 4.0]);
        assert_eq!(p.task_of_origin, 1);
    }

    #[test]
    fn sdc_hand_value() {
        let mut store = PrototypeStore::new();
        store.insert(proto(0, vec![0.0, 0.0], Tensor::identity(2))).unwrap();
        // both samples equidistant from the prototype → equal weights
        let old = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let new = Tensor::from_rows(&[vec![2.0, 0.0], vec![2.0, 0.0]]).unwrap();
        store.sdc_update_features(&old, &new, Some(1.0)).unwrap();
        assert_eq!(store.get(0).unwrap().mean, vec![2.0, 0.0]);
    }

    #[test]
    fn sdc_far_prototype_falls_back() {
        let mut store = PrototypeStore::new();
        store.insert(proto(4, vec![1e3, 0.0], Tensor::identity(2))).unwrap();
        let old = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let new = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 1.0]]).unwrap();
        let r = store.sdc_update_features(&old, &new, Some(0.1)).unwrap();
        assert_eq!(r.fallback_classes, vec![4]);
        assert_eq!(store.get(4).unwrap().mean, vec![1002.0, 0.0]);
    }

    #[test]
    fn distance_hand_value_and_key_check() {
        let mut a = PrototypeStore::new();
        let mut b = PrototypeStore::new();
        a.insert(proto(0, vec![0.0, 0.0], Tensor::identity(2))).unwrap();
        b.insert(proto(0, vec![1.0, 1.0], Tensor::identity(2))).unwrap();
        assert_eq!(prototype_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(prototype_distance(&a, &a).unwrap(), 0.0);
        a.insert(proto(1, vec![5.0, 5.0], Tensor::identity(2))).unwrap();
        assert!(prototype_distance(&a, &b).is_err());
        b.insert(proto(1, vec![5.0, 5.0], Tensor::identity(2))).unwrap();
        assert_eq!(prototype_distance(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn duplicate_class_rejected() {
        let mut s = PrototypeStore::new();
        s.insert(proto(0, vec![0.0], Tensor::identity(1))).unwrap();
        assert!(s.insert(proto(0, vec![1.0], Tensor::identity(1))).is_err());
    }

    #[test]
    fn covariance_dump_round_trip() {
        let mut s = PrototypeStore::new();
        s.insert(proto(2, vec![0.0, 1.0], Tensor::identity(2))).unwrap();
        s.insert(proto(7, vec![3.0, 1.0], Tensor::from_fn(&[2, 2], |i| i as f32))).unwrap();
        let back = read_covariances(&s.covariances_bin()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, 7);
        assert!(back[1].1.bit_eq(&s.get(7).unwrap().cov));
        assert_eq!(s.means_csv(), "2,1,0,1\n7,1,3,1\n");
    }
}
