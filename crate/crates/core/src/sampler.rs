//! Class-frequency- and confidence-driven image selection.
//!
//! Rare or poorly predicted classes get a higher chance of contributing the
//! next training image: a per-class score combines the static pixel-frequency
//! estimate with a running confidence average, and images are drawn
//! class-first, then uniformly among the images containing that class.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential moving average of per-class prediction confidence.
///
/// Starts at full confidence (1.0) for every class, which leaves early
/// sampling to the frequency term until real statistics arrive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTracker {
    conf: Vec<f64>,
    alpha: f64,
    t: u64,
}

impl ConfidenceTracker {
    pub fn new(num_classes: usize, alpha: f64) -> Result<ConfidenceTracker> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "confidence smoothing factor must lie in [0,1], got {alpha}"
            )));
        }
        Ok(ConfidenceTracker {
            conf: vec![1.0; num_classes],
            alpha,
            t: 0,
        })
    }

    /// Resume from a stored state.
    pub fn with_conf(conf: Vec<f64>, alpha: f64, t: u64) -> Result<ConfidenceTracker> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "confidence smoothing factor must lie in [0,1], got {alpha}"
            )));
        }
        if let Some(bad) = conf.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!(
                "stored confidence {bad} lies outside [0,1]"
            )));
        }
        Ok(ConfidenceTracker { conf, alpha, t })
    }

    pub fn conf(&self) -> &[f64] {
        &self.conf
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    /// Blend one batch's class means into the running average:
    /// conf[c] ← α·conf[c] + (1−α)·m[c]. Classes without pixels in the batch
    /// (`None` entries) keep their value; the step count always advances.
    pub fn update(&mut self, class_means: &[Option<f64>]) -> Result<()> {
        if class_means.len() != self.conf.len() {
            return Err(Error::InvalidInput(format!(
                "confidence update for {} classes, tracker holds {}",
                class_means.len(),
                self.conf.len()
            )));
        }
        for (c, m) in class_means.iter().enumerate() {
            if let Some(m) = m {
                if !(0.0..=1.0).contains(m) {
                    return Err(Error::InvalidInput(format!(
                        "class mean confidence {m} lies outside [0,1]"
                    )));
                }
                self.conf[c] = self.alpha * self.conf[c] + (1.0 - self.alpha) * m;
            }
        }
        self.t += 1;
        Ok(())
    }
}

/// Accumulates per-class mean softmax confidence over the images of a batch.
#[derive(Debug, Clone)]
pub struct BatchConfidence {
    sum: Vec<f64>,
    count: Vec<u64>,
}

impl BatchConfidence {
    pub fn new(num_classes: usize) -> BatchConfidence {
        BatchConfidence {
            sum: vec![0.0; num_classes],
            count: vec![0; num_classes],
        }
    }

    /// Fold in one image: at every valid pixel, the softmax probability the
    /// model assigned to the true class is credited to that class.
    pub fn add(
        &mut self,
        logits: &Array3<f64>,
        y: &Array2<u8>,
        valid: Option<&Array2<bool>>,
    ) -> Result<()> {
        let (c, h, w) = logits.dim();
        if c != self.sum.len() {
            return Err(Error::InvalidInput(format!(
                "logits have {c} classes, accumulator holds {}",
                self.sum.len()
            )));
        }
        if y.dim() != (h, w) {
            return Err(Error::InvalidInput(format!(
                "label mask {:?} does not match logits {h}x{w}",
                y.dim()
            )));
        }
        if let Some(v) = valid {
            if v.dim() != (h, w) {
                return Err(Error::InvalidInput(format!(
                    "validity mask {:?} does not match logits {h}x{w}",
                    v.dim()
                )));
            }
        }
        for i in 0..h {
            for j in 0..w {
                if valid.is_some_and(|v| !v[[i, j]]) {
                    continue;
                }
                let cls = y[[i, j]] as usize;
                if cls >= c {
                    return Err(Error::InvalidInput(format!(
                        "label {cls} out of range for {c} classes"
                    )));
                }
                let mut max = f64::NEG_INFINITY;
                for k in 0..c {
                    max = max.max(logits[[k, i, j]]);
                }
                let mut denom = 0.0;
                for k in 0..c {
                    denom += (logits[[k, i, j]] - max).exp();
                }
                self.sum[cls] += (logits[[cls, i, j]] - max).exp() / denom;
                self.count[cls] += 1;
            }
        }
        Ok(())
    }

    /// Mean confidence per class; `None` for classes the batch never showed.
    pub fn class_means(&self) -> Vec<Option<f64>> {
        self.sum
            .iter()
            .zip(&self.count)
            .map(|(s, n)| (*n > 0).then(|| s / *n as f64))
            .collect()
    }
}

/// Per-class selection scores: s_c = (1 − dist[c]·conf[c])^γ, min-max
/// normalized over classes. When every raw score is identical the
/// normalization is undefined and all classes score 0.5.
pub fn adaptive_scores(dist: &[f64], conf: &[f64], gamma: f64) -> Vec<f64> {
    assert_eq!(dist.len(), conf.len(), "dist and conf lengths differ");
    let raw: Vec<f64> = dist
        .iter()
        .zip(conf)
        .map(|(d, c)| (1.0 - d * c).powf(gamma))
        .collect();
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|s| (s - min) / (max - min)).collect()
}

/// Everything the adaptive image picker needs, including its own RNG, so a
/// serialized state resumes the exact draw sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    dist: Vec<f64>,
    tracker: ConfidenceTracker,
    gamma: f64,
    eps_floor: f64,
    include_background: bool,
    per_class_members: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl SamplerState {
    pub fn new(
        dist: Vec<f64>,
        per_class_members: Vec<Vec<usize>>,
        gamma: f64,
        alpha: f64,
        eps_floor: f64,
        include_background: bool,
        seed: u64,
    ) -> Result<SamplerState> {
        let nc = dist.len();
        if per_class_members.len() != nc {
            return Err(Error::Config(format!(
                "frequency estimate covers {nc} classes but membership lists cover {}",
                per_class_members.len()
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!(
                "relaxation exponent must be positive, got {gamma}"
            )));
        }
        if !(eps_floor > 0.0 && eps_floor.is_finite()) {
            return Err(Error::Config(format!(
                "probability floor must be positive, got {eps_floor}"
            )));
        }
        if let Some(bad) = dist.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!(
                "frequency estimate {bad} lies outside [0,1]"
            )));
        }
        Ok(SamplerState {
            dist,
            tracker: ConfidenceTracker::new(nc, alpha)?,
            gamma,
            eps_floor,
            include_background,
            per_class_members,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dist(&self) -> &[f64] {
        &self.dist
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eps_floor(&self) -> f64 {
        self.eps_floor
    }

    pub fn include_background(&self) -> bool {
        self.include_background
    }

    pub fn tracker(&self) -> &ConfidenceTracker {
        &self.tracker
    }

    pub fn tracker_mut(&mut self) -> &mut ConfidenceTracker {
        &mut self.tracker
    }

    pub fn per_class_members(&self) -> &[Vec<usize>] {
        &self.per_class_members
    }

    /// Min-max-normalized selection scores for the current confidence.
    pub fn scores(&self) -> Vec<f64> {
        adaptive_scores(&self.dist, self.tracker.conf(), self.gamma)
    }

    fn is_included(&self, c: usize) -> bool {
        (self.include_background || c != 0) && !self.per_class_members[c].is_empty()
    }

    /// Sampling distribution over classes. Excluded classes (background when
    /// configured out, classes with no member images) get probability 0; the
    /// rest get a floor of `eps_floor` added to their score before
    /// normalization, so no included class is ever starved.
    pub fn class_probabilities(&self) -> Result<Vec<f64>> {
        let scores = self.scores();
        let mut p = vec![0.0; scores.len()];
        let mut total = 0.0;
        for (c, s) in scores.iter().enumerate() {
            if self.is_included(c) {
                p[c] = s + self.eps_floor;
                total += p[c];
            }
        }
        if total == 0.0 {
            return Err(Error::InvalidInput(
                "no class has any member images to sample from".into(),
            ));
        }
        for v in &mut p {
            *v /= total;
        }
        Ok(p)
    }

    /// Draw a class from [`Self::class_probabilities`], then an image
    /// uniformly from that class's members. Returns (class id, image index).
    pub fn sample(&mut self) -> Result<(usize, usize)> {
        let p = self.class_probabilities()?;
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        for (c, pc) in p.iter().enumerate() {
            if *pc == 0.0 {
                continue;
            }
            acc += pc;
            chosen = Some(c);
            if u < acc {
                break;
            }
        }
        let c = chosen.expect("class_probabilities guarantees an included class");
        let members = &self.per_class_members[c];
        let idx = members[self.rng.random_range(0..members.len())];
        Ok((c, idx))
    }
}
