//! Synthetic easy/hard classification data.
//!
//! Easy samples carry a one-hot class prototype of height `easy_margin` in
//! coordinates `2..2 + C`, which a linear head reads directly. Hard samples
//! live on a 4x4 checkerboard over `[-2, 2]^2` in coordinates 0 and 1 with
//! label `(i + j) mod C` for cell `(i, j)`; clean points closer than
//! `hard_margin` to an interior cell edge are rejected. Every coordinate then
//! gets Gaussian noise of scale `noise_std`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabError, SyntheticSpec};

/// Half-width of the checkerboard square.
pub const GRID_EXTENT: f64 = 2.0;
/// Cells per side.
pub const GRID_CELLS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub input_dim: usize,
    pub classes: usize,
    /// Row-major, `n * input_dim`.
    pub features: Vec<f64>,
    /// 0-based class indices.
    pub labels: Vec<usize>,
    /// Subpopulation tag, for diagnostics only.
    pub easy: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// The samples whose easy tag equals `easy`.
    pub fn subpopulation(&self, easy: bool) -> Dataset {
        let mut out = Dataset {
            input_dim: self.input_dim,
            classes: self.classes,
            features: Vec::new(),
            labels: Vec::new(),
            easy: Vec::new(),
        };
        for i in (0..self.len()).filter(|i| self.easy[*i] == easy) {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
            out.easy.push(easy);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Checkerboard label of a clean point, or `None` inside the margin band.
pub fn checkerboard_label(x0: f64, x1: f64, classes: usize, margin: f64) -> Option<usize> {
    let width = 2.0 * GRID_EXTENT / GRID_CELLS as f64;
    let cell = |v: f64| -> Option<usize> {
        let u = (v + GRID_EXTENT) / width;
        let i = (u.floor() as usize).min(GRID_CELLS - 1);
        let frac = u - i as f64;
        let inner_left = i > 0 && frac * width < margin;
        let inner_right = i + 1 < GRID_CELLS && (1.0 - frac) * width < margin;
        (!inner_left && !inner_right).then_some(i)
    };
    Some((cell(x0)? + cell(x1)?) % classes)
}

fn sample_split(spec: &SyntheticSpec, n: usize, stream: u64) -> Dataset {
    let mut rng = super::stream_rng(spec.seed, stream);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise scale");
    let d = spec.input_dim;
    let mut out = Dataset {
        input_dim: d,
        classes: spec.classes,
        features: Vec::with_capacity(n * d),
        labels: Vec::with_capacity(n),
        easy: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let easy = rng.random::<f64>() < spec.alpha;
        let mut x = vec![0.0; d];
        let label = if easy {
            let label = rng.random_range(0..spec.classes);
            x[0] = rng.random_range(-GRID_EXTENT..GRID_EXTENT);
            x[1] = rng.random_range(-GRID_EXTENT..GRID_EXTENT);
            x[2 + label] = spec.easy_margin;
            label
        } else {
            loop {
                let x0 = rng.random_range(-GRID_EXTENT..GRID_EXTENT);
                let x1 = rng.random_range(-GRID_EXTENT..GRID_EXTENT);
                if let Some(label) = checkerboard_label(x0, x1, spec.classes, spec.hard_margin) {
                    x[0] = x0;
                    x[1] = x1;
                    break label;
                }
            }
        };
        for v in x.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        out.features.extend_from_slice(&x);
        out.labels.push(label);
        out.easy.push(easy);
    }
    out
}

/// Draws the train, validation and test sets from independent streams of the
/// dataset seed, so changing one split size leaves the others untouched.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<LabData, LabError> {
    spec.validate()?;
    Ok(LabData {
        train: sample_split(spec, spec.n_train, 0),
        validation: sample_split(spec, spec.n_val, 1),
        test: sample_split(spec, spec.n_test, 2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(alpha: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 400,
            n_val: 50,
            n_test: 300,
            alpha,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn checkerboard_cells_and_margin() {
        assert_eq!(checkerboard_label(-1.5, -1.5, 2, 0.1), Some(0));
        assert_eq!(checkerboard_label(-0.5, -1.5, 2, 0.1), Some(1));
        assert_eq!(checkerboard_label(1.5, 0.5, 4, 0.1), Some(1));
        assert_eq!(checkerboard_label(1.5, 1.5, 4, 0.1), Some(2));
        assert_eq!(checkerboard_label(0.05, 1.5, 2, 0.1), None);
        assert_eq!(checkerboard_label(-0.97, 1.5, 2, 0.1), None);
        // the outer edge of the square is not a boundary
        assert_eq!(checkerboard_label(-1.99, 1.99, 2, 0.1), Some(1));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_dataset(&spec(0.5)).unwrap();
        let b = generate_dataset(&spec(0.5)).unwrap();
        assert_eq!(a, b);
        let other = generate_dataset(&SyntheticSpec { seed: 7, ..spec(0.5) }).unwrap();
        assert_ne!(a.train.features, other.train.features);
    }

    #[test]
    fn split_streams_are_independent() {
        let a = generate_dataset(&spec(0.5)).unwrap();
        let b = generate_dataset(&SyntheticSpec { n_test: 10, ..spec(0.5) }).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(&a.test.features[..10 * a.test.input_dim], &b.test.features[..]);
    }

    #[test]
    fn alpha_extremes() {
        assert!(generate_dataset(&spec(1.0)).unwrap().train.easy.iter().all(|e| *e));
        let hard = generate_dataset(&spec(0.0)).unwrap().train;
        assert!(hard.easy.iter().all(|e| !*e));
        // prototype coordinates carry noise only
        let s = spec(0.0);
        for i in 0..hard.len() {
            for v in &hard.row(i)[2..] {
                assert!(v.abs() < 8.0 * s.noise_std + 1e-12);
            }
        }
    }

    #[test]
    fn easy_prototype_marks_label() {
        let s = SyntheticSpec { noise_std: 0.0, ..spec(1.0) };
        let d = generate_dataset(&s).unwrap().train;
        for i in 0..d.len() {
            let row = d.row(i);
            assert_eq!(row[2 + d.labels[i]], s.easy_margin);
            assert_eq!(row[2..].iter().filter(|v| **v != 0.0).count(), 1);
        }
    }

    #[test]
    fn hard_labels_follow_clean_geometry() {
        let s = SyntheticSpec { noise_std: 0.0, ..spec(0.0) };
        let d = generate_dataset(&s).unwrap().train;
        let mut counts = vec![0; s.classes];
        for i in 0..d.len() {
            let row = d.row(i);
            assert_eq!(checkerboard_label(row[0], row[1], s.classes, s.hard_margin), Some(d.labels[i]));
            counts[d.labels[i]] += 1;
        }
        assert!(counts.iter().all(|c| *c > 0));
    }

    #[test]
    fn subpopulation_filter() {
        let d = generate_dataset(&spec(0.5)).unwrap().train;
        let easy = d.subpopulation(true);
        let hard = d.subpopulation(false);
        assert_eq!(easy.len() + hard.len(), d.len());
        assert!(easy.easy.iter().all(|e| *e));
    }
}
