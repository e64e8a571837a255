//! Shared latent concept space.
//!
//! Every action class maps to a deterministic unit vector in R^k. The mock
//! text and visual encoders both embed this space, which is what stands in
//! for the aligned geometry a contrastively pretrained vision-language model
//! provides. Class latents are derived purely from `(name, seed)` and are
//! resampled with a salt until all pairwise |cosine| values stay below 0.9.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::{cosine, normalize_in_place, Matrix};
use crate::rng::Rng;

/// Hard ceiling the type contract promises; the default generator enforces
/// the much tighter [`DEFAULT_SEPARATION`].
pub const MAX_PAIRWISE_COS: f64 = 0.9;

/// Default rejection threshold for pairwise |cosine| between class latents.
/// Loose enough that sampling converges quickly in R^32, tight enough that
/// no class pair starts out nearly collinear.
pub const DEFAULT_SEPARATION: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct ClassConcept {
    pub name: String,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ConceptTable {
    latent_dim: usize,
    concepts: Vec<ClassConcept>,
    index: BTreeMap<String, usize>,
}

impl ConceptTable {
    /// Builds latents for `names` from `seed` with the default separation.
    /// Distinct names draw from distinct hash streams, so they can never
    /// collide.
    pub fn build(names: &[String], latent_dim: usize, seed: u64) -> Result<ConceptTable> {
        Self::build_separated(names, latent_dim, seed, DEFAULT_SEPARATION)
    }

    /// Builds latents rejecting candidates whose |cosine| to any accepted
    /// latent reaches `separation`.
    pub fn build_separated(
        names: &[String],
        latent_dim: usize,
        seed: u64,
        separation: f64,
    ) -> Result<ConceptTable> {
        if names.is_empty() {
            return Err(Error::config("class_names", "must not be empty"));
        }
        if latent_dim < 2 {
            return Err(Error::config("latent_dim", "must be at least 2"));
        }
        if !(0.0 < separation && separation <= MAX_PAIRWISE_COS) {
            return Err(Error::config(
                "concept_separation",
                format!("must be in (0, {MAX_PAIRWISE_COS}]"),
            ));
        }
        let root = Rng::new(seed);
        let mut concepts: Vec<ClassConcept> = Vec::with_capacity(names.len());
        for name in names {
            let mut salt = 0u32;
            let latent = loop {
                let mut rng = root.derive(&format!("concept/{name}/{salt}"));
                let candidate = unit_vector(latent_dim, &mut rng);
                let ok = concepts
                    .iter()
                    .all(|c| cosine(&c.latent, &candidate).abs() < separation);
                if ok {
                    break candidate;
                }
                salt += 1;
                if salt > 5000 {
                    return Err(Error::config(
                        "latent_dim",
                        format!("cannot place {} well-separated concepts in R^{latent_dim}", names.len()),
                    ));
                }
            };
            concepts.push(ClassConcept {
                name: name.clone(),
                latent,
            });
        }
        let index = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.clone(), i))
            .collect();
        Ok(ConceptTable {
            latent_dim,
            concepts,
            index,
        })
    }

    /// Rebuilds a table from stored latents (dataset reload path).
    pub fn from_latents(names: &[String], latents: &Matrix) -> Result<ConceptTable> {
        if names.len() != latents.rows() {
            return Err(Error::Shape {
                left: format!("{} names", names.len()),
                right: format!("{} latent rows", latents.rows()),
                context: "ConceptTable::from_latents".into(),
            });
        }
        let concepts: Vec<ClassConcept> = names
            .iter()
            .zip(0..latents.rows())
            .map(|(name, i)| ClassConcept {
                name: name.clone(),
                latent: latents.row(i).to_vec(),
            })
            .collect();
        let index = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.clone(), i))
            .collect();
        Ok(ConceptTable {
            latent_dim: latents.cols(),
            concepts,
            index,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&ClassConcept> {
        self.index
            .get(name)
            .map(|&i| &self.concepts[i])
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassConcept> {
        self.concepts.iter()
    }

    /// Latents stacked into a `[C x k]` matrix, in table order.
    pub fn latents_matrix(&self) -> Matrix {
        Matrix::from_fn(self.concepts.len(), self.latent_dim, |i, j| {
            self.concepts[i].latent[j]
        })
    }
}

pub fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    normalize_in_place(&mut v);
    v
}

/// Rotates unit vector `z` by `theta` radians within the plane spanned by
/// `z` and `toward`. Returns `z` unchanged if the two are collinear.
pub fn rotate_toward(z: &[f64], toward: &[f64], theta: f64) -> Vec<f64> {
    let dot: f64 = z.iter().zip(toward).map(|(a, b)| a * b).sum();
    let mut perp: Vec<f64> = toward
        .iter()
        .zip(z)
        .map(|(u, zz)| u - dot * zz)
        .collect();
    let norm: f64 = perp.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return z.to_vec();
    }
    for p in &mut perp {
        *p /= norm;
    }
    z.iter()
        .zip(&perp)
        .map(|(zz, pp)| theta.cos() * zz + theta.sin() * pp)
        .collect()
}

/// Rotation matrix by `theta` within a random 2-plane of R^k:
/// `I + (cos t - 1)(uu' + vv') + sin t (vu' - uv')` for orthonormal u, v.
pub fn plane_rotation(dim: usize, theta: f64, rng: &mut Rng) -> Matrix {
    multi_plane_rotation(dim, theta, 1, rng)
}

/// Rotation by `theta` in `planes` mutually orthogonal random 2-planes.
/// All nontrivial principal angles equal `theta`; `I - R` has rank
/// `2 * planes`, which bounds the rank a correction needs.
pub fn multi_plane_rotation(dim: usize, theta: f64, planes: usize, rng: &mut Rng) -> Matrix {
    assert!(2 * planes <= dim, "need 2*planes <= dim");
    let basis = orthonormal_rows(2 * planes, dim, rng);
    let (c, s) = (theta.cos(), theta.sin());
    Matrix::from_fn(dim, dim, |i, j| {
        let mut value = if i == j { 1.0 } else { 0.0 };
        for p in 0..planes {
            let u = basis.row(2 * p);
            let v = basis.row(2 * p + 1);
            value += (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
        }
        value
    })
}

/// `k` orthonormal rows in R^d via Gram-Schmidt (requires k <= d).
pub fn orthonormal_rows(k: usize, d: usize, rng: &mut Rng) -> Matrix {
    assert!(k <= d, "cannot build {k} orthonormal rows in R^{d}");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        rows.push(v);
    }
    Matrix::from_fn(k, d, |i, j| rows[i][j])
}
