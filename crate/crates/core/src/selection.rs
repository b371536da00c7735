//! Source-view selection: batch random sampling and farthest point sampling
//! on landmark features, plus streaming reservoir variants for the live-call
//! setting. Every selector pins the first frame.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-frame landmark feature vectors (2L stacked coordinates per frame).
#[derive(Debug, Clone)]
pub struct LandmarkTrack {
    frame_ids: Vec<u32>,
    features: Vec<Vec<f32>>,
}

impl LandmarkTrack {
    pub fn new(frame_ids: Vec<u32>, features: Vec<Vec<f32>>) -> Result<Self> {
        if frame_ids.len() != features.len() {
            return Err(Error::arg("frame id / feature count mismatch"));
        }
        if features.is_empty() {
            return Err(Error::arg("landmark track must not be empty"));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::arg("landmark feature dimension must be positive"));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::arg(format!(
                    "frame {i} has {} feature values, expected {dim}",
                    f.len()
                )));
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(Error::arg(format!("frame {i} has non-finite landmarks")));
            }
        }
        Ok(Self {
            frame_ids,
            features,
        })
    }

    /// Track with ordinal frame ids 0..M-1.
    pub fn from_features(features: Vec<Vec<f32>>) -> Result<Self> {
        let ids = (0..features.len() as u32).collect();
        Self::new(ids, features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i]
    }

    pub fn frame_ids(&self) -> &[u32] {
        &self.frame_ids
    }

    /// Per-dimension z-scored copy, for the optional normalized FPS variant.
    pub fn standardized(&self) -> Self {
        let dim = self.dim();
        let m = self.len() as f64;
        let mut mean = vec![0.0f64; dim];
        for f in &self.features {
            for (s, &v) in mean.iter_mut().zip(f) {
                *s += v as f64;
            }
        }
        for s in &mut mean {
            *s /= m;
        }
        let mut var = vec![0.0f64; dim];
        for f in &self.features {
            for ((s, &v), &mu) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v as f64 - mu).powi(2);
            }
        }
        let features = self
            .features
            .iter()
            .map(|f| {
                f.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let sd = (var[i] / m).sqrt();
                        if sd > 0.0 {
                            ((v as f64 - mean[i]) / sd) as f32
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            frame_ids: self.frame_ids.clone(),
            features,
        }
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Pick the first frame plus K-1 frames uniformly at random without
/// replacement; deterministic for a given seed, output sorted ascending.
pub fn random_select(frame_count: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::arg("must select at least one view"));
    }
    if k > frame_count {
        return Err(Error::arg(format!(
            "cannot select {k} views from {frame_count} frames"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![0usize];
    let extra = rand::seq::index::sample(&mut rng, frame_count - 1, k - 1);
    chosen.extend(extra.iter().map(|i| i + 1));
    chosen.sort_unstable();
    Ok(chosen)
}

/// Greedy farthest point sampling on landmark features: start with frame 0,
/// repeatedly add the frame maximizing the minimal Euclidean distance to the
/// chosen set. Ties break toward the lowest frame index; output sorted.
pub fn fps_select(track: &LandmarkTrack, k: usize) -> Result<Vec<usize>> {
    let m = track.len();
    if k < 1 {
        return Err(Error::arg("must select at least one view"));
    }
    if k > m {
        return Err(Error::arg(format!(
            "cannot select {k} views from {m} frames"
        )));
    }
    let mut chosen = vec![0usize];
    // min squared distance from each frame to the chosen set
    let mut min_d2: Vec<f64> = (0..m)
        .map(|i| squared_distance(track.feature(i), track.feature(0)))
        .collect();
    let mut in_set = vec![false; m];
    in_set[0] = true;
    for _ in 1..k {
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for i in 0..m {
            if !in_set[i] && min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        chosen.push(best);
        in_set[best] = true;
        for i in 0..m {
            if !in_set[i] {
                let d2 = squared_distance(track.feature(i), track.feature(best));
                if d2 < min_d2[i] {
                    min_d2[i] = d2;
                }
            }
        }
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// The maximin objective value of each greedy step (distance of the added
/// frame to the set it joined), in selection order. Non-increasing.
pub fn fps_step_objectives(track: &LandmarkTrack, k: usize) -> Result<Vec<f64>> {
    let m = track.len();
    if k < 1 || k > m {
        return Err(Error::arg("invalid selection size"));
    }
    let mut min_d2: Vec<f64> = (0..m)
        .map(|i| squared_distance(track.feature(i), track.feature(0)))
        .collect();
    let mut in_set = vec![false; m];
    in_set[0] = true;
    let mut objectives = Vec::with_capacity(k.saturating_sub(1));
    for _ in 1..k {
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for i in 0..m {
            if !in_set[i] && min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        objectives.push(best_d2.sqrt());
        in_set[best] = true;
        for i in 0..m {
            if !in_set[i] {
                let d2 = squared_distance(track.feature(i), track.feature(best));
                if d2 < min_d2[i] {
                    min_d2[i] = d2;
                }
            }
        }
    }
    Ok(objectives)
}

/// A view currently held by a streaming selector.
#[derive(Debug, Clone)]
pub struct ChosenView {
    pub frame_index: u32,
    pub feature: Vec<f32>,
}

/// Outcome of one streaming update, for rate accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapDecision {
    /// Frame admitted into the reservoir this step, if any.
    pub admitted: Option<u32>,
    /// Frame evicted to make room, if any.
    pub evicted: Option<u32>,
}

impl SwapDecision {
    pub const REJECTED: SwapDecision = SwapDecision {
        admitted: None,
        evicted: None,
    };

    pub fn is_swap(&self) -> bool {
        self.admitted.is_some() && self.evicted.is_some()
    }
}

/// State of a streaming selector: the chosen views (slot 0 pinned to the
/// first frame), stream counters, and the swap budget.
#[derive(Debug, Clone)]
pub struct SelectionState {
    chosen: Vec<ChosenView>,
    capacity: usize,
    frames_seen: u64,
    non_pinned_seen: u64,
    swap_count: u32,
    swap_budget: Option<u32>,
    tau: f64,
    last_frame: Option<u32>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl SelectionState {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity < 1 {
            return Err(Error::arg("selection capacity must be at least 1"));
        }
        Ok(Self {
            chosen: Vec::with_capacity(capacity),
            capacity,
            frames_seen: 0,
            non_pinned_seen: 0,
            swap_count: 0,
            swap_budget: None,
            tau: 0.0,
            last_frame: None,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_swap_budget(mut self, budget: u32) -> Self {
        self.swap_budget = Some(budget);
        self
    }

    /// Margin by which a swap must improve the set objective.
    pub fn with_margin(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn chosen(&self) -> &[ChosenView] {
        &self.chosen
    }

    pub fn chosen_indices(&self) -> Vec<u32> {
        self.chosen.iter().map(|c| c.frame_index).collect()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.chosen.len() == self.capacity
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    pub fn swap_count(&self) -> u32 {
        self.swap_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_order(&mut self, frame_index: u32) -> Result<()> {
        if let Some(last) = self.last_frame {
            if frame_index <= last {
                return Err(Error::arg(format!(
                    "frame {frame_index} presented after frame {last}; stream must be increasing"
                )));
            }
        }
        self.last_frame = Some(frame_index);
        self.frames_seen += 1;
        Ok(())
    }

    /// Classic reservoir sampling over the non-pinned slots: the first frame
    /// is pinned, the t-th later frame enters with probability (K-1)/t and
    /// evicts a uniformly chosen resident. The swap budget does not apply
    /// here; capping admissions would break uniformity.
    pub fn reservoir_update(
        &mut self,
        frame_index: u32,
        feature: Vec<f32>,
    ) -> Result<SwapDecision> {
        self.check_order(frame_index)?;
        if self.chosen.is_empty() {
            self.chosen.push(ChosenView {
                frame_index,
                feature,
            });
            return Ok(SwapDecision {
                admitted: Some(frame_index),
                evicted: None,
            });
        }
        self.non_pinned_seen += 1;
        let reservoir = self.capacity - 1;
        if reservoir == 0 {
            return Ok(SwapDecision::REJECTED);
        }
        if self.chosen.len() < self.capacity {
            self.chosen.push(ChosenView {
                frame_index,
                feature,
            });
            return Ok(SwapDecision {
                admitted: Some(frame_index),
                evicted: None,
            });
        }
        // One uniform draw couples the admission test and the victim choice.
        let j = self.rng.gen_range(0..self.non_pinned_seen);
        if (j as usize) < reservoir {
            let victim = self.chosen.remove(1 + j as usize);
            self.chosen.push(ChosenView {
                frame_index,
                feature,
            });
            self.swap_count += 1;
            Ok(SwapDecision {
                admitted: Some(frame_index),
                evicted: Some(victim.frame_index),
            })
        } else {
            Ok(SwapDecision::REJECTED)
        }
    }

    /// Minimum pairwise Euclidean distance among the chosen features;
    /// `None` while fewer than two views are held.
    pub fn min_pairwise_distance(&self) -> Option<f64> {
        if self.chosen.len() < 2 {
            return None;
        }
        let mut best = f64::INFINITY;
        for i in 0..self.chosen.len() {
            for j in (i + 1)..self.chosen.len() {
                let d = squared_distance(&self.chosen[i].feature, &self.chosen[j].feature);
                if d < best {
                    best = d;
                }
            }
        }
        Some(best.sqrt())
    }

    fn min_pairwise_excluding_with(&self, skip: usize, candidate: &[f32]) -> f64 {
        let mut best = f64::INFINITY;
        let kept: Vec<&ChosenView> = self
            .chosen
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, c)| c)
            .collect();
        for i in 0..kept.len() {
            for j in (i + 1)..kept.len() {
                best = best.min(squared_distance(&kept[i].feature, &kept[j].feature));
            }
            best = best.min(squared_distance(&kept[i].feature, candidate));
        }
        best.sqrt()
    }

    /// Streaming farthest-point update: fill until capacity, then swap in
    /// the candidate against the best eviction choice (never the pinned
    /// first frame) iff the set's minimum pairwise distance strictly
    /// improves by more than the margin and swap budget remains.
    pub fn streaming_fps_update(
        &mut self,
        frame_index: u32,
        feature: Vec<f32>,
    ) -> Result<SwapDecision> {
        self.check_order(frame_index)?;
        if self.chosen.len() < self.capacity {
            self.chosen.push(ChosenView {
                frame_index,
                feature,
            });
            return Ok(SwapDecision {
                admitted: Some(frame_index),
                evicted: None,
            });
        }
        if self.capacity < 2 {
            return Ok(SwapDecision::REJECTED);
        }
        if let Some(budget) = self.swap_budget {
            if self.swap_count >= budget {
                return Ok(SwapDecision::REJECTED);
            }
        }
        let current = self.min_pairwise_distance().unwrap_or(f64::INFINITY);
        let mut best_slot = None;
        let mut best_obj = current;
        for slot in 1..self.chosen.len() {
            let obj = self.min_pairwise_excluding_with(slot, &feature);
            if obj > best_obj + self.tau {
                best_obj = obj;
                best_slot = Some(slot);
            }
        }
        match best_slot {
            Some(slot) => {
                let victim = self.chosen.remove(slot);
                self.chosen.push(ChosenView {
                    frame_index,
                    feature,
                });
                self.swap_count += 1;
                Ok(SwapDecision {
                    admitted: Some(frame_index),
                    evicted: Some(victim.frame_index),
                })
            }
            None => Ok(SwapDecision::REJECTED),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track_1d(values: &[f32]) -> LandmarkTrack {
        LandmarkTrack::from_features(values.iter().map(|&v| vec![v]).collect()).unwrap()
    }

    #[test]
    fn random_select_edges() {
        assert_eq!(random_select(7, 1, 42).unwrap(), vec![0]);
        assert_eq!(random_select(4, 4, 42).unwrap(), vec![0, 1, 2, 3]);
        assert!(random_select(3, 4, 42).is_err());
        assert!(random_select(3, 0, 42).is_err());
    }

    #[test]
    fn random_select_is_deterministic_sorted_and_pins_zero() {
        let a = random_select(50, 5, 7).unwrap();
        let b = random_select(50, 5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0], 0);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let c = random_select(50, 5, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fps_trivial_and_hand_cases() {
        let track = track_1d(&[0.0, 10.0, 1.0, 9.0]);
        assert_eq!(fps_select(&track, 1).unwrap(), vec![0]);
        // Feature 10 is farthest from 0, so frames {0, 1} are chosen.
        assert_eq!(fps_select(&track, 2).unwrap(), vec![0, 1]);
        assert!(fps_select(&track, 5).is_err());
    }

    #[test]
    fn fps_ties_break_to_lowest_index() {
        // Frames 1 and 2 are equidistant from frame 0.
        let track = track_1d(&[0.0, 5.0, -5.0, 1.0]);
        assert_eq!(fps_select(&track, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_is_scale_invariant() {
        let track = track_1d(&[0.0, 3.0, 7.5, 2.0, 9.0, 4.5]);
        let base = fps_select(&track, 4).unwrap();
        for lambda in [0.5f32, 2.0, 100.0] {
            let scaled = LandmarkTrack::from_features(
                (0..track.len())
                    .map(|i| track.feature(i).iter().map(|&v| v * lambda).collect())
                    .collect(),
            )
            .unwrap();
            assert_eq!(fps_select(&scaled, 4).unwrap(), base, "lambda {lambda}");
        }
    }

    #[test]
    fn fps_objectives_are_non_increasing() {
        let track = track_1d(&[0.0, 10.0, 1.0, 9.0, 4.0, 6.5, 2.2]);
        let obj = fps_step_objectives(&track, 6).unwrap();
        assert!(obj.windows(2).all(|w| w[0] >= w[1]), "{obj:?}");
    }

    #[test]
    fn reservoir_fills_then_swaps_within_capacity() {
        let mut state = SelectionState::new(3, 1).unwrap();
        for t in 0..3u32 {
            let d = state.reservoir_update(t, vec![]).unwrap();
            assert_eq!(d.admitted, Some(t));
            assert_eq!(d.evicted, None);
        }
        assert!(state.is_full());
        for t in 3..40u32 {
            state.reservoir_update(t, vec![]).unwrap();
            let idx = state.chosen_indices();
            assert_eq!(idx.len(), 3);
            assert_eq!(idx[0], 0, "first frame stays pinned");
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn reservoir_single_frame_stream() {
        let mut state = SelectionState::new(4, 9).unwrap();
        state.reservoir_update(0, vec![]).unwrap();
        assert_eq!(state.chosen_indices(), vec![0]);
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let mut state = SelectionState::new(2, 0).unwrap();
        state.reservoir_update(0, vec![]).unwrap();
        state.reservoir_update(5, vec![]).unwrap();
        assert!(state.reservoir_update(5, vec![]).is_err());
        assert!(state.reservoir_update(3, vec![]).is_err());
    }

    #[test]
    fn streaming_fps_hand_example() {
        // Residents 0:(0) and 5:(1); candidate (100) should evict frame 5.
        let mut state = SelectionState::new(2, 0).unwrap().with_swap_budget(4);
        state.streaming_fps_update(0, vec![0.0]).unwrap();
        state.streaming_fps_update(5, vec![1.0]).unwrap();
        assert!((state.min_pairwise_distance().unwrap() - 1.0).abs() < 1e-12);
        let d = state.streaming_fps_update(9, vec![100.0]).unwrap();
        assert_eq!(d.admitted, Some(9));
        assert_eq!(d.evicted, Some(5));
        assert!((state.min_pairwise_distance().unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn streaming_fps_rejects_duplicates() {
        let mut state = SelectionState::new(2, 0).unwrap().with_swap_budget(4);
        state.streaming_fps_update(0, vec![0.0]).unwrap();
        state.streaming_fps_update(1, vec![1.0]).unwrap();
        let d = state.streaming_fps_update(2, vec![1.0]).unwrap();
        assert_eq!(d, SwapDecision::REJECTED);
        assert_eq!(state.chosen_indices(), vec![0, 1]);
    }

    #[test]
    fn streaming_fps_zero_budget_never_swaps() {
        let mut state = SelectionState::new(2, 0).unwrap().with_swap_budget(0);
        state.streaming_fps_update(0, vec![0.0]).unwrap();
        state.streaming_fps_update(1, vec![1.0]).unwrap();
        for t in 2..20u32 {
            let d = state
                .streaming_fps_update(t, vec![t as f32 * 50.0])
                .unwrap();
            assert_eq!(d, SwapDecision::REJECTED);
        }
        assert_eq!(state.chosen_indices(), vec![0, 1]);
        assert_eq!(state.swap_count(), 0);
    }

    #[test]
    fn streaming_fps_objective_never_decreases_after_fill() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let mut state = SelectionState::new(3, 7).unwrap().with_swap_budget(10);
            let mut last: Option<f64> = None;
            for t in 0..25u32 {
                let feature = vec![rng.gen_range(-5.0f32..5.0), rng.gen_range(-5.0f32..5.0)];
                state.streaming_fps_update(t, feature).unwrap();
                if state.is_full() {
                    let d = state.min_pairwise_distance().unwrap();
                    if let Some(prev) = last {
                        assert!(d >= prev - 1e-12, "{d} < {prev}");
                    }
                    last = Some(d);
                }
            }
        }
    }

    #[test]
    fn standardized_track_is_zero_mean_unit_variance() {
        let track =
            LandmarkTrack::from_features(vec![vec![1.0, 10.0], vec![3.0, 20.0], vec![5.0, 30.0]])
                .unwrap();
        let std = track.standardized();
        for d in 0..2 {
            let mean: f64 = (0..3).map(|i| std.feature(i)[d] as f64).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-6);
        }
    }
}
