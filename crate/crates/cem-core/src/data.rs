//! Synthetic 2-D datasets and the augmentation operators that define
//! positive pairs.
//!
//! Datasets regenerate from (spec, seed) rather than shipping files. The
//! augmentation set plays the semantic role image augmentations play at full
//! scale: each operator perturbs a point while preserving its cluster
//! identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CemError, Result};
use crate::rng;
use crate::Tensor;

/// How a dataset was generated; echoed into manifests so runs regenerate
/// bit-exactly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    GaussianMixture {
        k_modes: usize,
        radius: f64,
        sigma: f64,
        n_per_mode: usize,
    },
    TwoMoons {
        n: usize,
        noise: f64,
    },
}

/// Finite labeled point set in the plane.
#[derive(Debug, Clone)]
pub struct Dataset2D {
    /// `[M, 2]`
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
    pub spec: Option<GeneratorSpec>,
}

impl Dataset2D {
    pub fn len(&self) -> usize {
        self.points.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .map(|ls| ls.iter().copied().max().map_or(0, |m| m + 1))
            .unwrap_or(0)
    }

    /// Rows of `points` selected by `idx`, as a `[len, 2]` tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut values = Vec::with_capacity(idx.len() * 2);
        for &i in idx {
            values.extend_from_slice(self.point(i));
        }
        Tensor::new(vec![idx.len(), 2], values).unwrap()
    }

    pub fn gather_labels(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|ls| idx.iter().map(|&i| ls[i]).collect())
    }
}

/// Mode centers equally spaced on a circle, starting at angle 0.
pub fn mixture_centers(k_modes: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..k_modes)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / k_modes as f64;
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

/// `k_modes` isotropic Gaussians on a circle of `radius`; labels are mode
/// indices.
pub fn make_gaussian_mixture(
    k_modes: usize,
    radius: f64,
    sigma: f64,
    n_per_mode: usize,
    rng: &mut ChaCha8Rng,
) -> Dataset2D {
    let centers = mixture_centers(k_modes, radius);
    let mut values = Vec::with_capacity(k_modes * n_per_mode * 2);
    let mut labels = Vec::with_capacity(k_modes * n_per_mode);
    for (mode, c) in centers.iter().enumerate() {
        for _ in 0..n_per_mode {
            values.push(c[0] + sigma * rng::normal(rng));
            values.push(c[1] + sigma * rng::normal(rng));
            labels.push(mode);
        }
    }
    Dataset2D {
        points: Tensor::new(vec![k_modes * n_per_mode, 2], values).unwrap(),
        labels: Some(labels),
        spec: Some(GeneratorSpec::GaussianMixture {
            k_modes,
            radius,
            sigma,
            n_per_mode,
        }),
    }
}

/// Two interleaving unit half-circles: class 0 on the arc centered at the
/// origin, class 1 on the arc centered at (1, 0.5). With `noise = 0` every
/// point lies exactly on its arc.
pub fn make_two_moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Dataset2D {
    let n0 = n.div_ceil(2);
    let n1 = n - n0;
    let mut values = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n0 {
        let t = std::f64::consts::PI * i as f64 / (n0.max(2) - 1) as f64;
        values.push(t.cos() + noise * rng::normal(rng));
        values.push(t.sin() + noise * rng::normal(rng));
        labels.push(0);
    }
    for i in 0..n1 {
        let t = std::f64::consts::PI * i as f64 / (n1.max(2) - 1) as f64;
        values.push(1.0 - t.cos() + noise * rng::normal(rng));
        values.push(0.5 - t.sin() + noise * rng::normal(rng));
        labels.push(1);
    }
    Dataset2D {
        points: Tensor::new(vec![n, 2], values).unwrap(),
        labels: Some(labels),
        spec: Some(GeneratorSpec::TwoMoons { n, noise }),
    }
}

// ── Augmentations ────────────────────────────────────────────────────────

/// Deterministic-given-a-draw map ℝ² → ℝ².
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationOp {
    /// Additive isotropic Gaussian noise.
    GaussianJitter { sigma: f64 },
    /// Rotation about the origin by an angle drawn uniformly from
    /// `[min_angle, max_angle]`.
    Rotate { min_angle: f64, max_angle: f64 },
    /// Scaling about the origin by a factor drawn uniformly from `[lo, hi]`.
    Scale { lo: f64, hi: f64 },
}

impl AugmentationOp {
    pub fn rotate(max_angle: f64) -> Self {
        AugmentationOp::Rotate {
            min_angle: -max_angle,
            max_angle,
        }
    }

    pub fn rotate_fixed(angle: f64) -> Self {
        AugmentationOp::Rotate {
            min_angle: angle,
            max_angle: angle,
        }
    }

    pub fn apply(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            AugmentationOp::GaussianJitter { sigma } => {
                x.iter().map(|&c| c + sigma * rng::normal(rng)).collect()
            }
            AugmentationOp::Rotate {
                min_angle,
                max_angle,
            } => {
                assert_eq!(x.len(), 2, "rotation is defined on the plane");
                let theta = if min_angle == max_angle {
                    min_angle
                } else {
                    rng.random_range(min_angle..=max_angle)
                };
                let (s, c) = theta.sin_cos();
                vec![c * x[0] - s * x[1], s * x[0] + c * x[1]]
            }
            AugmentationOp::Scale { lo, hi } => {
                let f = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                x.iter().map(|&c| c * f).collect()
            }
        }
    }
}

/// Default operator set: small jitter, rotation within ±10°, scaling within
/// [0.9, 1.1] — all cluster-identity preserving.
pub fn default_augmentations() -> Vec<AugmentationOp> {
    vec![
        AugmentationOp::GaussianJitter { sigma: 0.05 },
        AugmentationOp::rotate(10f64.to_radians()),
        AugmentationOp::Scale { lo: 0.9, hi: 1.1 },
    ]
}

/// Draw `t` uniformly from the operator set and return the positive pair
/// `(x, t(x))`. The first element is returned untouched, so the marginal over
/// anchors is the data distribution itself.
pub fn augment_pair(x: &[f64], ops: &[AugmentationOp], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    assert!(!ops.is_empty(), "augmentation set must be non-empty");
    let t = &ops[rng.random_range(0..ops.len())];
    (x.to_vec(), t.apply(x, rng))
}

/// Augmented positives for a whole batch: `[N, 2]`.
pub fn augment_batch(points: &Tensor, ops: &[AugmentationOp], rng: &mut ChaCha8Rng) -> Tensor {
    let n = points.n_rows();
    let mut values = Vec::with_capacity(n * 2);
    for i in 0..n {
        let (_, x2) = augment_pair(points.row(i), ops, rng);
        values.extend(x2);
    }
    Tensor::new(vec![n, 2], values).unwrap()
}

/// Index batches covering every point exactly once per epoch. Shuffling is
/// deterministic given the rng state.
pub fn batches(
    n_points: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut idx: Vec<usize> = (0..n_points).collect();
    if shuffle {
        use rand::seq::SliceRandom;
        idx.shuffle(rng);
    }
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ── CSV interchange ──────────────────────────────────────────────────────

/// `x1,x2,label` rows; the label column is omitted for unlabeled data.
pub fn dataset_to_csv(ds: &Dataset2D) -> String {
    let mut out = String::new();
    if ds.labels.is_some() {
        out.push_str("x1,x2,label\n");
    } else {
        out.push_str("x1,x2\n");
    }
    for i in 0..ds.len() {
        let p = ds.point(i);
        match &ds.labels {
            Some(ls) => out.push_str(&format!("{},{},{}\n", p[0], p[1], ls[i])),
            None => out.push_str(&format!("{},{}\n", p[0], p[1])),
        }
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<Dataset2D> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CemError::contract("empty CSV"))?
        .trim();
    let labeled = match header {
        "x1,x2,label" => true,
        "x1,x2" => false,
        other => {
            return Err(CemError::contract(format!(
                "unexpected CSV header {other:?}"
            )))
        }
    };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if labeled { 3 } else { 2 };
        if fields.len() != expected {
            return Err(CemError::contract(format!(
                "CSV line {}: expected {} fields, got {}",
                lineno + 2,
                expected,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| CemError::contract(format!("CSV line {}: {e}", lineno + 2)))
        };
        values.push(parse(fields[0])?);
        values.push(parse(fields[1])?);
        if labeled {
            labels.push(fields[2].trim().parse::<usize>().map_err(|e| {
                CemError::contract(format!("CSV line {}: {e}", lineno + 2))
            })?);
        }
    }
    let n = values.len() / 2;
    Ok(Dataset2D {
        points: Tensor::new(vec![n, 2], values)?,
        labels: if labeled { Some(labels) } else { None },
        spec: None,
    })
}
