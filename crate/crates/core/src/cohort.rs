//! Synthetic cohorts with known ground truth, persistence, and the
//! per-label train/test split.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixed_effect::DesignMatrix;
use crate::normative::first_principal_component;
use crate::tensorcore::io::{read_tensor, write_tensor};
use crate::tensorcore::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Healthy,
    Group1,
    Group2,
    Group3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Healthy, Label::Group1, Label::Group2, Label::Group3];
    pub const PATIENT_GROUPS: [Label; 3] = [Label::Group1, Label::Group2, Label::Group3];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Group1 => "group1",
            Label::Group2 => "group2",
            Label::Group3 => "group3",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_patient(self) -> bool {
        self != Label::Healthy
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Label> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown label {s:?}")))
    }
}

/// An analysis region: the voxels nearest to a center (restricted to the
/// center's Voronoi cell among all blob centers, so blobs never overlap),
/// or an explicit voxel list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    Blob { center: [usize; 3] },
    Voxels { voxels: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationSpec {
    /// Index into [`CohortSpec::regions`].
    pub region: usize,
    /// Offset in units of the noise standard deviation.
    pub offset: f64,
    /// Multiplies the subject's standardized first-principal-component
    /// score: the deviation is `offset * (1 + coupling * score)`.
    pub coupling: f64,
}

/// Missing fields take their [`CohortSpec::desk`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_healthy: usize,
    pub n_per_patient_group: [usize; 3],
    pub covariates: usize,
    /// Pairwise correlation of the covariates through one shared factor;
    /// each covariate stays marginally standard normal. 0 gives independent
    /// columns.
    pub covariate_correlation: f64,
    pub grid: [usize; 3],
    /// Voxel-wise standard deviation of each fixed-effect coefficient field.
    pub fixed_effect_magnitude: f64,
    /// Gaussian smoothing width, in voxels, of the coefficient and
    /// random-effect fields.
    pub correlation_length: f64,
    pub random_effect_rank: usize,
    pub random_effect_std: f64,
    pub noise_std: f64,
    pub regions: Vec<RegionSpec>,
    /// Voxel count of each blob region.
    pub region_size: usize,
    /// One entry per patient group.
    pub deviations: [DeviationSpec; 3],
    pub seed: u64,
}

/// Blob centers spread over the grid at fixed fractional positions.
fn default_centers(grid: [usize; 3]) -> Vec<[usize; 3]> {
    const FRACTIONS: [[f64; 3]; 9] = [
        [0.2, 0.2, 0.25],
        [0.75, 0.5, 0.75],
        [0.2, 0.8, 0.75],
        [0.75, 0.15, 0.25],
        [0.2, 0.5, 0.25],
        [0.75, 0.85, 0.25],
        [0.2, 0.15, 0.8],
        [0.8, 0.2, 0.8],
        [0.45, 0.65, 0.5],
    ];
    FRACTIONS
        .iter()
        .map(|f| {
            let mut c = [0; 3];
            for a in 0..3 {
                c[a] = ((f[a] * grid[a] as f64) as usize).min(grid[a] - 1);
            }
            c
        })
        .collect()
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec::desk(0)
    }
}

impl CohortSpec {
    /// 60 healthy subjects and three patient groups of 10 on an 8x10x6
    /// grid; each group carries a 3 noise-std deviation in its own 5% blob
    /// region, coupled to the first principal component of the covariates.
    /// Six further blobs carry no deviation.
    pub fn desk(seed: u64) -> CohortSpec {
        CohortSpec::with_shape(60, [10, 10, 10], 5, [8, 10, 6], seed)
    }

    /// The 119/49/39/48 cohort on the 49x61x40 grid with 11 covariates.
    pub fn paper_shaped(seed: u64) -> CohortSpec {
        CohortSpec::with_shape(119, [49, 39, 48], 11, [49, 61, 40], seed)
    }

    pub fn with_shape(n_healthy: usize, groups: [usize; 3], covariates: usize, grid: [usize; 3], seed: u64) -> Self {
        let t: usize = grid.iter().product();
        let dev = |region| DeviationSpec {
            region,
            offset: 3.0,
            coupling: 0.5,
        };
        CohortSpec {
            n_healthy,
            n_per_patient_group: groups,
            covariates,
            covariate_correlation: 0.5,
            grid,
            fixed_effect_magnitude: 1.0,
            correlation_length: 1.5,
            random_effect_rank: 4,
            random_effect_std: 0.5,
            noise_std: 1.0,
            regions: default_centers(grid).into_iter().map(|center| RegionSpec::Blob { center }).collect(),
            region_size: (t as f64 * 0.05).ceil() as usize,
            deviations: [dev(0), dev(1), dev(2)],
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.n_healthy + self.n_per_patient_group.iter().sum::<usize>()
    }

    pub fn voxels(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.contains(&0) {
            return Err(Error::invalid(format!("grid {:?} has a zero extent", self.grid)));
        }
        // zero noise is allowed for identifiability checks; deviations,
        // being in noise-std units, then vanish too
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise std must be finite and nonnegative, got {}", self.noise_std)));
        }
        if self.covariates == 0 {
            return Err(Error::invalid("at least one covariate is required"));
        }
        if !(0.0..1.0).contains(&self.covariate_correlation) {
            return Err(Error::invalid(format!(
                "covariate correlation {} outside [0, 1)",
                self.covariate_correlation
            )));
        }
        for (name, v) in [
            ("fixed_effect_magnitude", self.fixed_effect_magnitude),
            ("correlation_length", self.correlation_length),
            ("random_effect_std", self.random_effect_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        for (g, d) in self.deviations.iter().enumerate() {
            if d.region >= self.regions.len() {
                return Err(Error::invalid(format!(
                    "deviation of group {} uses region {} of {}",
                    g + 1,
                    d.region,
                    self.regions.len()
                )));
            }
            if !d.offset.is_finite() || !d.coupling.is_finite() {
                return Err(Error::invalid("deviation offset and coupling must be finite"));
            }
        }
        self.region_masks().map(|_| ())
    }

    /// Voxel index sets of every region, in declaration order.
    pub fn region_masks(&self) -> Result<Vec<Vec<usize>>> {
        let [d0, d1, d2] = self.grid;
        let t = self.voxels();
        let centers: Vec<(usize, [usize; 3])> = self
            .regions
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match r {
                RegionSpec::Blob { center } => Some((i, *center)),
                RegionSpec::Voxels { .. } => None,
            })
            .collect();
        for (i, c) in &centers {
            if c[0] >= d0 || c[1] >= d1 || c[2] >= d2 {
                return Err(Error::invalid(format!("region {i}: center {:?} outside grid {:?}", c, self.grid)));
            }
        }
        let dist2 = |v: usize, c: [usize; 3]| {
            let p = [v / (d1 * d2), (v / d2) % d1, v % d2];
            (0..3).map(|a| (p[a] as f64 - c[a] as f64).powi(2)).sum::<f64>()
        };
        // nearest blob center of each voxel, ties to the earlier region
        let owner: Vec<Option<usize>> = (0..t)
            .map(|v| {
                centers
                    .iter()
                    .min_by(|a, b| dist2(v, a.1).total_cmp(&dist2(v, b.1)).then(a.0.cmp(&b.0)))
                    .map(|c| c.0)
            })
            .collect();
        self.regions
            .iter()
            .enumerate()
            .map(|(i, r)| match r {
                RegionSpec::Voxels { voxels } => {
                    if voxels.is_empty() {
                        return Err(Error::invalid(format!("region {i} is empty")));
                    }
                    if let Some(v) = voxels.iter().find(|&&v| v >= t) {
                        return Err(Error::invalid(format!("region {i}: voxel {v} outside grid of {t}")));
                    }
                    Ok(voxels.clone())
                }
                RegionSpec::Blob { center } => {
                    let mut cell: Vec<usize> = (0..t).filter(|&v| owner[v] == Some(i)).collect();
                    if cell.len() < self.region_size {
                        return Err(Error::invalid(format!(
                            "region {i}: only {} voxels near center {:?}, {} requested",
                            cell.len(),
                            center,
                            self.region_size
                        )));
                    }
                    cell.sort_by(|&a, &b| dist2(a, *center).total_cmp(&dist2(b, *center)).then(a.cmp(&b)));
                    cell.truncate(self.region_size.max(1));
                    cell.sort_unstable();
                    Ok(cell)
                }
            })
            .collect()
    }
}

/// Planted structure kept for oracle tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(skip)]
    pub a_true: Option<Tensor>,
    pub regions: Vec<Vec<usize>>,
    /// Region index planted in each patient group.
    pub planted_regions: [usize; 3],
    pub offsets: [f64; 3],
    pub couplings: [f64; 3],
    /// Standardized first-principal-component score of every subject.
    pub coupling_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub spec: Option<CohortSpec>,
    pub x: DesignMatrix,
    pub y: Tensor,
    pub labels: Vec<Label>,
    pub truth: Option<GroundTruth>,
}

/// Separable Gaussian blur of a `d0 x d1 x d2` field; the kernel is
/// truncated at three widths and renormalized at the borders.
pub fn gaussian_blur(field: &[f64], grid: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius).map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let strides = [grid[1] * grid[2], grid[2], 1];
    let mut cur = field.to_vec();
    for axis in 0..3 {
        let len = grid[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (v, out) in next.iter_mut().enumerate() {
            let pos = ((v / strides[axis]) % grid[axis]) as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, w) in weights.iter().enumerate() {
                let p = pos + k as isize - radius;
                if p < 0 || p >= len {
                    continue;
                }
                let u = (v as isize + (p - pos) * strides[axis] as isize) as usize;
                acc += w * cur[u];
                wsum += w;
            }
            *out = acc / wsum;
        }
        cur = next;
    }
    cur
}

/// Blurred white noise rescaled to unit standard deviation over voxels.
fn smooth_field(grid: [usize; 3], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let t = grid.iter().product();
    let mut f = gaussian_blur(&rng.normals(t), grid, sigma);
    let mean = f.iter().sum::<f64>() / t as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
    f.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    f
}

/// Draws a cohort: `Y = X x_1 A_true + Z + E + deviations`.
///
/// Streams of `Rng::new(spec.seed)`: 0 covariates, 1 coefficient fields,
/// 2 random effect, 3 noise. Subjects are ordered healthy, then group 1, 2
/// and 3.
pub fn generate(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let (n, d, t) = (spec.n(), spec.covariates, spec.voxels());
    let mut labels = vec![Label::Healthy; spec.n_healthy];
    for (g, &count) in spec.n_per_patient_group.iter().enumerate() {
        labels.extend(std::iter::repeat(Label::PATIENT_GROUPS[g]).take(count));
    }

    let mut r = root.split(0);
    let (load, uniq) = (spec.covariate_correlation.sqrt(), (1.0 - spec.covariate_correlation).sqrt());
    let mut xdata = Vec::with_capacity(n * d);
    for _ in 0..n {
        let f = r.normal();
        for _ in 0..d {
            xdata.push(load * f + uniq * r.normal());
        }
    }
    let names = (1..=d).map(|j| format!("x{j}")).collect();
    let x = DesignMatrix::new(Tensor::new(vec![n, d], xdata)?, names)?;

    let mut r = root.split(1);
    let mut a = Vec::with_capacity(d * t);
    for _ in 0..d {
        a.extend(smooth_field(spec.grid, spec.correlation_length, &mut r).iter().map(|v| v * spec.fixed_effect_magnitude));
    }
    let mut a_shape = vec![d];
    a_shape.extend_from_slice(&spec.grid);
    let a_true = Tensor::new(a_shape, a)?;
    let mut y = crate::mixed_effect::predict_fixed_effect(&a_true, &x)?.into_data();

    if spec.random_effect_std > 0.0 && spec.random_effect_rank > 0 {
        let mut r = root.split(2);
        let k = spec.random_effect_rank;
        let basis: Vec<Vec<f64>> = (0..k).map(|_| smooth_field(spec.grid, spec.correlation_length, &mut r)).collect();
        let w = spec.random_effect_std / (k as f64).sqrt();
        for i in 0..n {
            let coef = r.normals(k);
            for (c, b) in coef.iter().zip(&basis) {
                y[i * t..(i + 1) * t].iter_mut().zip(b).for_each(|(yv, bv)| *yv += w * c * bv);
            }
        }
    }

    let mut r = root.split(3);
    y.iter_mut().for_each(|v| *v += spec.noise_std * r.normal());

    let regions = spec.region_masks()?;
    let pc = first_principal_component(&x)?;
    let sd = pc.eigenvalue.sqrt();
    let scores: Vec<f64> = pc.scores.iter().map(|s| s / sd).collect();
    for i in 0..n {
        let label = labels[i];
        if !label.is_patient() {
            continue;
        }
        let dev = &spec.deviations[label.index() - 1];
        let amount = dev.offset * spec.noise_std * (1.0 + dev.coupling * scores[i]);
        for &v in &regions[dev.region] {
            y[i * t + v] += amount;
        }
    }
    let mut y_shape = vec![n];
    y_shape.extend_from_slice(&spec.grid);
    let truth = GroundTruth {
        a_true: Some(a_true),
        regions,
        planted_regions: [spec.deviations[0].region, spec.deviations[1].region, spec.deviations[2].region],
        offsets: [spec.deviations[0].offset, spec.deviations[1].offset, spec.deviations[2].offset],
        couplings: [spec.deviations[0].coupling, spec.deviations[1].coupling, spec.deviations[2].coupling],
        coupling_scores: scores,
    };
    Ok(Cohort {
        spec: Some(spec.clone()),
        x,
        y: Tensor::new(y_shape, y)?,
        labels,
        truth: Some(truth),
    })
}

impl Cohort {
    /// A cohort from external tensors, without ground truth.
    pub fn from_tensors(x: DesignMatrix, y: Tensor, labels: Vec<Label>) -> Result<Cohort> {
        let c = Cohort {
            spec: None,
            x,
            y,
            labels,
            truth: None,
        };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<()> {
        if self.y.ndim() != 4 {
            return Err(Error::shape("Cohort", format!("responses {:?} must be N x T1 x T2 x T3", self.y.shape())));
        }
        if self.x.n() != self.y.dim(0) || self.labels.len() != self.x.n() {
            return Err(Error::shape(
                "Cohort",
                format!("{} covariate rows, {} volumes, {} labels", self.x.n(), self.y.dim(0), self.labels.len()),
            ));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.y.dim(1), self.y.dim(2), self.y.dim(3)]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Subjects `rows`, in that order. Ground-truth subject scores follow.
    pub fn select(&self, rows: &[usize]) -> Cohort {
        let truth = self.truth.clone().map(|mut t| {
            t.coupling_scores = rows.iter().map(|&i| t.coupling_scores[i]).collect();
            t
        });
        Cohort {
            spec: self.spec.clone(),
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            truth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProtocol {
    /// Training subjects per label: healthy, group 1, group 2, group 3.
    pub train: [usize; 4],
    pub seed: u64,
}

impl SplitProtocol {
    /// 75 healthy and 5 of each patient group in training.
    pub fn paper(seed: u64) -> Self {
        SplitProtocol {
            train: [75, 5, 5, 5],
            seed,
        }
    }

    /// Desk cohorts have 60 healthy subjects, fewer than 75: 45 healthy and
    /// 3 per patient group keep cases at 9/54 = 16.7% of training.
    pub fn desk(seed: u64) -> Self {
        SplitProtocol {
            train: [45, 3, 3, 3],
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Samples `protocol.train[label]` subjects of each label without
/// replacement (label `l` shuffles with `Rng::new(seed).split(l)`); all
/// others are test subjects. Both lists are ascending.
pub fn split(cohort: &Cohort, protocol: &SplitProtocol) -> Result<Split> {
    let root = Rng::new(protocol.seed);
    let mut train = Vec::new();
    for label in Label::ALL {
        let want = protocol.train[label.index()];
        let mut idx = cohort.indices_of(label);
        if want > idx.len() {
            return Err(Error::invalid(format!(
                "split asks for {want} {} subjects in training, cohort has {}",
                label.as_str(),
                idx.len()
            )));
        }
        root.split(label.index() as u64).shuffle(&mut idx);
        train.extend_from_slice(&idx[..want]);
    }
    train.sort_unstable();
    let test = (0..cohort.n()).filter(|i| train.binary_search(i).is_err()).collect();
    Ok(Split { train, test })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CohortMeta {
    spec: Option<CohortSpec>,
    seed: Option<u64>,
    covariate_names: Vec<String>,
    labels: Vec<Label>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl Cohort {
    /// `meta.json`, `X.npnt`, `Y.npnt`, and with ground truth
    /// `truth/A_true.npnt` plus `truth/masks.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CohortMeta {
            spec: self.spec.clone(),
            seed: self.spec.as_ref().map(|s| s.seed),
            covariate_names: self.x.names().to_vec(),
            labels: self.labels.clone(),
        };
        write_json(&dir.join("meta.json"), &meta)?;
        write_tensor(dir.join("X.npnt"), self.x.values())?;
        write_tensor(dir.join("Y.npnt"), &self.y)?;
        if let Some(truth) = &self.truth {
            let tdir = dir.join("truth");
            fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
            if let Some(a) = &truth.a_true {
                write_tensor(tdir.join("A_true.npnt"), a)?;
            }
            write_json(&tdir.join("masks.json"), truth)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Cohort> {
        let dir = dir.as_ref();
        let meta: CohortMeta = read_json(&dir.join("meta.json"))?;
        let x = DesignMatrix::new(read_tensor(dir.join("X.npnt"))?, meta.covariate_names)?;
        let y = read_tensor(dir.join("Y.npnt"))?;
        let tdir = dir.join("truth");
        let truth = if tdir.join("masks.json").exists() {
            let mut t: GroundTruth = read_json(&tdir.join("masks.json"))?;
            let apath = tdir.join("A_true.npnt");
            if apath.exists() {
                t.a_true = Some(read_tensor(apath)?);
            }
            Some(t)
        } else {
            None
        };
        let c = Cohort {
            spec: meta.spec,
            x,
            y,
            labels: meta.labels,
            truth,
        };
        c.check()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_counts_and_regions() {
        let spec = CohortSpec::desk(1);
        let c = generate(&spec).unwrap();
        assert_eq!(c.n(), 90);
        assert_eq!(c.count(Label::Healthy), 60);
        for g in Label::PATIENT_GROUPS {
            assert_eq!(c.count(g), 10);
        }
        let masks = spec.region_masks().unwrap();
        assert_eq!(masks.len(), 9);
        let mut seen = std::collections::HashSet::new();
        for m in &masks {
            assert_eq!(m.len(), 24);
            for v in m {
                assert!(seen.insert(*v), "regions overlap at voxel {v}");
            }
        }
    }

    #[test]
    fn covariates_are_standard_normal_marginally() {
        let mut spec = CohortSpec::desk(3);
        spec.n_healthy = 4000;
        let c = generate(&spec).unwrap();
        let xv = c.x.values();
        for j in 0..spec.covariates {
            let col: Vec<f64> = (0..c.n()).map(|i| xv.get2(i, j)).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 0.06 && (v - 1.0).abs() < 0.08, "column {j}: mean {m}, var {v}");
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let f = vec![2.5; 4 * 3 * 5];
        let b = gaussian_blur(&f, [4, 3, 5], 1.3);
        assert!(b.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn rejects_mask_outside_grid() {
        let mut spec = CohortSpec::desk(0);
        spec.regions[4] = RegionSpec::Voxels { voxels: vec![3, 480] };
        assert!(generate(&spec).is_err());
        let mut spec = CohortSpec::desk(0);
        spec.regions[0] = RegionSpec::Blob { center: [8, 0, 0] };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn split_boundaries() {
        let c = generate(&CohortSpec::desk(2)).unwrap();
        let s = split(&c, &SplitProtocol { train: [10, 0, 0, 0], seed: 1 }).unwrap();
        assert_eq!(s.train.len(), 10);
        assert!(s.train.iter().all(|&i| c.labels[i] == Label::Healthy));
        assert_eq!(s.test.iter().filter(|&&i| c.labels[i].is_patient()).count(), 30);
        assert!(split(&c, &SplitProtocol::paper(0)).is_err());
        assert_eq!(split(&c, &SplitProtocol::desk(5)).unwrap(), split(&c, &SplitProtocol::desk(5)).unwrap());
    }
}
