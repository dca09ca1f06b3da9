//! Time grids on [0, T] built from uniform segments.
//!
//! Segments are stored backward from T so a backward solver can reuse one
//! propagator per segment.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub steps: usize,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    segments: Vec<Segment>,
}

/// Growth factor of (τ + layer) from one graded segment to the next.
const GRADED_RATIO: f64 = 1.3;

impl TimeGrid {
    /// `points` equally spaced nodes including both endpoints.
    pub fn uniform(horizon: f64, points: usize) -> Result<Self> {
        if points < 2 || !(horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "uniform grid needs >= 2 points on a positive horizon (got {points}, {horizon})"
            )));
        }
        let steps = points - 1;
        Ok(Self::from_segments(horizon, vec![Segment { steps, h: horizon / steps as f64 }]))
    }

    /// Uniform grid with step `dt`, which must divide the horizon.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        let steps = (horizon / dt).round();
        if !(dt > 0.0) || steps < 1.0 || ((steps * dt - horizon).abs() > 1e-9 * horizon) {
            return Err(Error::InvalidArgument(format!("dt = {dt} does not divide horizon {horizon}")));
        }
        Self::uniform(horizon, steps as usize + 1)
    }

    /// Grid refined toward t = T for solutions that behave like 1/(T − t + layer).
    ///
    /// Local step is about `sqrt(tol)·(τ + layer)^1.5` with τ = T − t, capped at
    /// `max_step`, which keeps the relative three-point derivative error near `tol`.
    pub fn graded(horizon: f64, layer: f64, tol: f64, max_step: f64) -> Result<Self> {
        if !(horizon > 0.0 && layer > 0.0 && tol > 0.0 && max_step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "graded grid needs positive horizon, layer, tol, max_step (got {horizon}, {layer}, {tol}, {max_step})"
            )));
        }
        let c = tol.sqrt();
        let mut segments = Vec::new();
        let mut tau = 0.0;
        while tau < horizon {
            let mut next = ((tau + layer) * GRADED_RATIO - layer).min(horizon);
            if horizon - next < 0.05 * (next - tau) {
                next = horizon;
            }
            let len = next - tau;
            let target = (c * (tau + layer).powf(1.5)).min(max_step);
            let steps = (len / target).ceil().max(1.0) as usize;
            segments.push(Segment { steps, h: len / steps as f64 });
            tau = next;
        }
        Ok(Self::from_segments(horizon, segments))
    }

    fn from_segments(horizon: f64, segments: Vec<Segment>) -> Self {
        let total: usize = segments.iter().map(|s| s.steps).sum();
        let mut backward = Vec::with_capacity(total + 1);
        let mut tau0 = 0.0;
        backward.push(horizon);
        let last = segments.len().saturating_sub(1);
        for (j, seg) in segments.iter().enumerate() {
            for i in 1..=seg.steps {
                let tau = tau0 + i as f64 * seg.h;
                backward.push(if j == last && i == seg.steps { 0.0 } else { horizon - tau });
            }
            tau0 += seg.steps as f64 * seg.h;
        }
        backward.reverse();
        Self { times: backward, segments }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Segments ordered backward from T.
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Step length ending at the node with this index, backward from T:
    /// `step_backward(j)` is the length between node K−j and node K−j−1.
    pub fn steps_backward(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().flat_map(|s| std::iter::repeat_n(s.h, s.steps))
    }

    /// Index i with times[i] <= t <= times[i+1], or a range error.
    pub fn locate(&self, t: f64) -> Result<usize> {
        let lo = self.times[0];
        let hi = self.horizon();
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfRange { t, lo, hi });
        }
        let i = self.times.partition_point(|&s| s <= t);
        Ok(i.saturating_sub(1).min(self.times.len() - 2))
    }
}
