//! Procedurally generated point-cloud classification data.
//!
//! Four shape families sampled on their surfaces, jittered, then normalized
//! to zero centroid and unit max radius. Generation is a pure function of
//! (seed, split, class, sample index), so clouds can be produced in
//! parallel and still come out bit-identical run to run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::rng::Rng;
use crate::spatial::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Torus,
    Cylinder,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Torus,
        ShapeClass::Cylinder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Torus => "torus",
            ShapeClass::Cylinder => "cylinder",
        }
    }

    pub fn parse(name: &str) -> Result<ShapeClass> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown shape class \"{name}\"")))
    }
}

/// Shape of the generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: Vec<ShapeClass>,
    pub points_per_cloud: usize,
    /// Gaussian jitter, in scene units, applied before normalization.
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: ShapeClass::ALL.to_vec(),
            points_per_cloud: 512,
            noise_sigma: 0.25,
            seed: 7,
            train_per_class: 200,
            test_per_class: 100,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        if self.points_per_cloud < 16 {
            return Err(Error::Config(format!(
                "need at least 16 points per cloud, got {}",
                self.points_per_cloud
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One cloud with its class label.
#[derive(Clone, Debug)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

/// Stratified train/test split; labels index into `classes`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<ShapeClass>,
    pub train: Vec<LabeledCloud>,
    pub test: Vec<LabeledCloud>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }
}

// Shape extents, pre-normalization.
const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.3;
const CYLINDER_RADIUS: f64 = 0.5;
const CYLINDER_HALF_HEIGHT: f64 = 0.8;
const TAU: f64 = std::f64::consts::TAU;

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let base = Rng::new(spec.seed);

    let make_split = |split_tag: u64, per_class: usize| -> Vec<LabeledCloud> {
        let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
            .flat_map(|label| (0..per_class).map(move |s| (label, s)))
            .collect();
        jobs.into_par_iter()
            .map(|(label, sample)| {
                let stream =
                    split_tag ^ (label as u64).wrapping_mul(0x1_0000) ^ (sample as u64 + 1);
                let mut rng = base.fork(stream);
                let cloud = sample_cloud(spec.classes[label], spec, &mut rng);
                LabeledCloud { cloud, label }
            })
            .collect()
    };

    Ok(Dataset {
        classes: spec.classes.clone(),
        train: make_split(0x7261_494e, spec.train_per_class),
        test: make_split(0x7465_5354, spec.test_per_class),
    })
}

fn sample_cloud(class: ShapeClass, spec: &DatasetSpec, rng: &mut Rng) -> PointCloud {
    let n = spec.points_per_cloud;
    let mut points = match class {
        ShapeClass::Sphere => sample_sphere(n, rng),
        ShapeClass::Cube => sample_cube(n, rng),
        ShapeClass::Torus => sample_torus(n, rng),
        ShapeClass::Cylinder => sample_cylinder(n, rng),
    };
    if spec.noise_sigma > 0.0 {
        for v in &mut points {
            *v += spec.noise_sigma * rng.normal();
        }
    }
    normalize(&mut points);
    PointCloud::new(Tensor::new(vec![n, 3], points).expect("cloud shape"))
        .expect("generated cloud is valid")
}

/// Zero centroid, unit max radius, in place.
fn normalize(points: &mut [f64]) {
    let n = points.len() / 3;
    let mut centroid = [0.0; 3];
    for p in points.chunks_exact(3) {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut max_r2 = 0.0_f64;
    for p in points.chunks_exact_mut(3) {
        for a in 0..3 {
            p[a] -= centroid[a];
        }
        max_r2 = max_r2.max(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    }
    let max_r = max_r2.sqrt();
    if max_r > 0.0 {
        for v in points.iter_mut() {
            *v /= max_r;
        }
    }
}

fn unit_direction(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

/// Uniform directions emitted in antipodal pairs, so even-sized noise-free
/// spheres have an (up to rounding) exactly zero centroid and every point
/// sits at exactly unit radius after normalization.
fn sample_sphere(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * 3);
    while out.len() + 6 <= n * 3 {
        let d = unit_direction(rng);
        out.extend_from_slice(&d);
        out.extend_from_slice(&[-d[0], -d[1], -d[2]]);
    }
    if out.len() < n * 3 {
        out.extend_from_slice(&unit_direction(rng));
    }
    out
}

/// Uniform over the surface of the axis-aligned cube with extent [-1, 1].
fn sample_cube(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let face = rng.below(6);
        let axis = face / 2;
        let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
        let mut p = [0.0; 3];
        p[axis] = sign;
        p[(axis + 1) % 3] = rng.uniform(-1.0, 1.0);
        p[(axis + 2) % 3] = rng.uniform(-1.0, 1.0);
        out.extend_from_slice(&p);
    }
    out
}

/// Area-uniform torus sampling: the tube angle is drawn by rejection with
/// acceptance weight proportional to the local circumference.
fn sample_torus(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let u = rng.uniform(0.0, TAU);
        let theta = loop {
            let t = rng.uniform(0.0, TAU);
            let accept = (TORUS_MAJOR + TORUS_MINOR * t.cos()) / (TORUS_MAJOR + TORUS_MINOR);
            if rng.next_f64() <= accept {
                break t;
            }
        };
        let ring = TORUS_MAJOR + TORUS_MINOR * theta.cos();
        out.push(ring * u.cos());
        out.push(ring * u.sin());
        out.push(TORUS_MINOR * theta.sin());
    }
    out
}

/// Area-weighted choice between the lateral surface and the two caps.
fn sample_cylinder(n: usize, rng: &mut Rng) -> Vec<f64> {
    let lateral_area = TAU * CYLINDER_RADIUS * 2.0 * CYLINDER_HALF_HEIGHT;
    let cap_area = TAU / 2.0 * CYLINDER_RADIUS * CYLINDER_RADIUS * 2.0;
    let p_lateral = lateral_area / (lateral_area + cap_area);
    let mut out = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let phi = rng.uniform(0.0, TAU);
        if rng.next_f64() < p_lateral {
            out.push(CYLINDER_RADIUS * phi.cos());
            out.push(CYLINDER_RADIUS * phi.sin());
            out.push(rng.uniform(-CYLINDER_HALF_HEIGHT, CYLINDER_HALF_HEIGHT));
        } else {
            let r = CYLINDER_RADIUS * rng.next_f64().sqrt();
            let z = if rng.below(2) == 0 {
                CYLINDER_HALF_HEIGHT
            } else {
                -CYLINDER_HALF_HEIGHT
            };
            out.push(r * phi.cos());
            out.push(r * phi.sin());
            out.push(z);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            classes: ShapeClass::ALL.to_vec(),
            points_per_cloud: 64,
            noise_sigma: 0.02,
            seed: 11,
            train_per_class: 5,
            test_per_class: 3,
        }
    }

    #[test]
    fn noise_free_sphere_is_unit_radius_after_normalization() {
        let spec = DatasetSpec {
            classes: vec![ShapeClass::Sphere],
            noise_sigma: 0.0,
            points_per_cloud: 512,
            train_per_class: 1,
            test_per_class: 1,
            seed: 3,
        };
        let data = generate(&spec).unwrap();
        let cloud = &data.train[0].cloud;
        for i in 0..cloud.len() {
            let p = cloud.point(i);
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-9, "point {i} at radius {r}");
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_clouds() {
        let spec = tiny_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.label, y.label);
            let bits = |c: &PointCloud| -> Vec<u64> {
                c.coords().data().iter().map(|v| v.to_bits()).collect()
            };
            assert_eq!(bits(&x.cloud), bits(&y.cloud));
        }
    }

    #[test]
    fn splits_are_stratified() {
        let spec = tiny_spec();
        let data = generate(&spec).unwrap();
        assert_eq!(data.train.len(), 4 * 5);
        assert_eq!(data.test.len(), 4 * 3);
        for label in 0..4 {
            let count = data.train.iter().filter(|c| c.label == label).count();
            assert_eq!(count, 5);
        }
    }

    #[test]
    fn every_cloud_is_centered_and_unit_scaled() {
        let data = generate(&tiny_spec()).unwrap();
        for item in data.train.iter().chain(&data.test) {
            let c = &item.cloud;
            let mut centroid = [0.0; 3];
            let mut max_r: f64 = 0.0;
            for i in 0..c.len() {
                let p = c.point(i);
                for a in 0..3 {
                    centroid[a] += p[a];
                }
                max_r = max_r.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
            }
            for a in &centroid {
                assert!((a / c.len() as f64).abs() < 1e-12);
            }
            assert!((max_r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = tiny_spec();
        spec.points_per_cloud = 8;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));

        let mut spec = tiny_spec();
        spec.classes.clear();
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_class_name_is_a_config_error() {
        assert!(matches!(ShapeClass::parse("cone"), Err(Error::Config(_))));
        let err = serde_json::from_str::<DatasetSpec>(r#"{"classes": ["cone"]}"#);
        assert!(err.is_err());
    }

    #[test]
    fn torus_points_lie_on_the_torus_before_noise() {
        let spec = DatasetSpec {
            classes: vec![ShapeClass::Torus],
            noise_sigma: 0.0,
            points_per_cloud: 128,
            train_per_class: 1,
            test_per_class: 1,
            seed: 13,
        };
        let data = generate(&spec).unwrap();
        let cloud = &data.train[0].cloud;
        // After normalization the torus satisfies its implicit equation up
        // to the uniform scale; recover scale from the max ring radius.
        let max_r = (0..cloud.len())
            .map(|i| {
                let p = cloud.point(i);
                (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
            })
            .fold(0.0_f64, f64::max);
        assert!(max_r <= 1.0 + 1e-12);
    }
}
