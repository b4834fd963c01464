//! Balancing constraint on gating assignments.
//!
//! Each gated layer keeps a running total `G_i` of the gate weight expert `i`
//! has received. While the constraint is active, any expert whose total
//! exceeds the layer mean by more than the margin is dropped from the gate
//! distribution, and the remaining weights are renormalized. Lifting the
//! constraint turns masking off; totals keep accumulating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Surviving gate mass below which masking is abandoned for an example.
pub const MIN_SURVIVING_MASS: f64 = 1e-12;

pub const DEFAULT_MARGIN: f64 = 1.0;

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Accum {
    sum: f64,
    comp: f64,
}

impl Accum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Running per-expert assignment totals for every gated layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentTracker {
    totals: Vec<Vec<Accum>>,
    steps: Vec<u64>,
    margin: f64,
    active: bool,
}

impl AssignmentTracker {
    /// `experts[l]` is the number of experts in gated layer `l`.
    pub fn new(experts: &[usize], margin: f64) -> Result<Self> {
        if !(margin >= 0.0) || !margin.is_finite() {
            return Err(Error::Config(format!("margin must be >= 0, got {margin}")));
        }
        if let Some(l) = experts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("gated layer {l} has no experts")));
        }
        Ok(AssignmentTracker {
            totals: experts.iter().map(|&n| vec![Accum::default(); n]).collect(),
            steps: vec![0; experts.len()],
            margin,
            active: true,
        })
    }

    pub fn layers(&self) -> usize {
        self.totals.len()
    }

    pub fn experts(&self, layer: usize) -> usize {
        self.totals[layer].len()
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Number of examples recorded (layer counters advance together).
    pub fn steps(&self) -> u64 {
        self.steps.first().copied().unwrap_or(0)
    }

    pub fn layer_steps(&self, layer: usize) -> u64 {
        self.steps[layer]
    }

    /// `G_i` for every expert of `layer`.
    pub fn totals(&self, layer: usize) -> Vec<f64> {
        self.totals[layer].iter().map(Accum::value).collect()
    }

    /// Layer mean of the totals.
    pub fn mean_total(&self, layer: usize) -> f64 {
        let t = &self.totals[layer];
        t.iter().map(Accum::value).sum::<f64>() / t.len() as f64
    }

    /// `max_i (G_i - mean)`.
    pub fn max_deviation(&self, layer: usize) -> f64 {
        let mean = self.mean_total(layer);
        self.totals[layer]
            .iter()
            .map(|a| a.value() - mean)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Which experts of `layer` are over the margin right now. All `false`
    /// once the constraint has been lifted.
    pub fn over_margin(&self, layer: usize) -> Vec<bool> {
        if !self.active {
            return vec![false; self.experts(layer)];
        }
        let mean = self.mean_total(layer);
        self.totals[layer]
            .iter()
            .map(|a| a.value() - mean > self.margin)
            .collect()
    }

    /// Masks and renormalizes one gate distribution.
    pub fn apply_constraint(&self, layer: usize, g: &[f64]) -> Vec<f64> {
        let mut out = g.to_vec();
        mask_distribution(&mut out, &self.over_margin(layer));
        out
    }

    /// Adds the gate values actually used for one example to `layer`.
    pub fn update_totals(&mut self, layer: usize, g_used: &[f64]) {
        let totals = &mut self.totals[layer];
        assert_eq!(totals.len(), g_used.len(), "gate width");
        for (acc, &v) in totals.iter_mut().zip(g_used) {
            acc.add(v);
        }
        self.steps[layer] += 1;
    }

    /// Compensated accumulator state of `layer` as `(sums, compensations)`.
    pub fn raw_totals(&self, layer: usize) -> (Vec<f64>, Vec<f64>) {
        self.totals[layer].iter().map(|a| (a.sum, a.comp)).unzip()
    }

    /// Rebuilds a tracker from [`AssignmentTracker::raw_totals`] of every
    /// layer plus the per-layer step counters.
    pub fn from_raw(layers: Vec<(Vec<f64>, Vec<f64>)>, steps: Vec<u64>, margin: f64, active: bool) -> Result<Self> {
        let widths: Vec<usize> = layers.iter().map(|(s, _)| s.len()).collect();
        let mut t = AssignmentTracker::new(&widths, margin)?;
        if steps.len() != layers.len() {
            return Err(Error::Config(format!(
                "{} step counters for {} layers",
                steps.len(),
                layers.len()
            )));
        }
        for (l, (sums, comps)) in layers.into_iter().enumerate() {
            if sums.len() != comps.len() {
                return Err(Error::Config(format!("layer {l}: sums and compensations differ in length")));
            }
            t.totals[l] = sums.into_iter().zip(comps).map(|(sum, comp)| Accum { sum, comp }).collect();
        }
        t.steps = steps;
        t.active = active;
        Ok(t)
    }

    /// Turns masking off for good. Idempotent.
    pub fn lift(&mut self) {
        self.active = false;
    }
}

/// Zeroes the masked entries of `g` and renormalizes in place. Leaves `g`
/// untouched when nothing is masked or when the surviving mass is below
/// [`MIN_SURVIVING_MASS`]. Returns whether the mask was applied.
pub fn mask_distribution(g: &mut [f64], masked: &[bool]) -> bool {
    debug_assert_eq!(g.len(), masked.len());
    if !masked.iter().any(|&m| m) {
        return false;
    }
    let surviving: f64 = g
        .iter()
        .zip(masked)
        .filter(|(_, &m)| !m)
        .map(|(v, _)| v)
        .sum();
    if surviving < MIN_SURVIVING_MASS {
        return false;
    }
    for (v, &m) in g.iter_mut().zip(masked) {
        *v = if m { 0.0 } else { *v / surviving };
    }
    true
}

/// Free-function form of [`AssignmentTracker::apply_constraint`]; identity
/// when the tracker is inactive.
pub fn apply_constraint(g: &[f64], tracker: &AssignmentTracker, layer: usize) -> Vec<f64> {
    tracker.apply_constraint(layer, g)
}
