//! Condition embeddings and the two probing mechanisms.
//!
//! A [`StepSchedule`] decides which condition the sampler sees at each
//! denoising iteration (the "when" probe); a [`BlockAssignment`] decides which
//! condition each network block sees at every iteration (the "where" probe).
//!
//! Iteration `i = 0` is the noisiest step. Block indices are 0-based: the
//! first `b` blocks (`j < b`) are the shallow ones.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Fixed-width conditioning vector: two event slots plus presence flags.
///
/// Flattened layout is `[slot1; slot2; flag1; flag2]`, length `2E + 2`.
/// A cleared flag always comes with an all-zero slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    slot1: Vec<f64>,
    slot2: Vec<f64>,
    flag1: bool,
    flag2: bool,
}

impl ConditionEmbedding {
    /// The unconditional (null) embedding: both slots zero, both flags clear.
    pub fn unconditional(event_dim: usize) -> Self {
        Self {
            slot1: vec![0.0; event_dim],
            slot2: vec![0.0; event_dim],
            flag1: false,
            flag2: false,
        }
    }

    pub fn event_dim(&self) -> usize {
        self.slot1.len()
    }

    /// Length of [`Self::to_vector`], i.e. `2E + 2`.
    pub fn vector_dim(&self) -> usize {
        2 * self.slot1.len() + 2
    }

    pub fn slot1(&self) -> &[f64] {
        &self.slot1
    }

    pub fn slot2(&self) -> &[f64] {
        &self.slot2
    }

    pub fn flags(&self) -> (bool, bool) {
        (self.flag1, self.flag2)
    }

    pub fn is_unconditional(&self) -> bool {
        !self.flag1 && !self.flag2
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.vector_dim());
        self.write_vector(&mut v);
        v
    }

    /// Appends the flattened embedding to `out`.
    pub fn write_vector(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.slot1);
        out.extend_from_slice(&self.slot2);
        out.push(if self.flag1 { 1.0 } else { 0.0 });
        out.push(if self.flag2 { 1.0 } else { 0.0 });
    }
}

/// Single-event condition: `slot1 = e`, `flag1 = 1`, second slot empty.
pub fn compose_single(e: &[f64], event_dim: usize) -> Result<ConditionEmbedding> {
    check_len("event slot", event_dim, e.len())?;
    Ok(ConditionEmbedding {
        slot1: e.to_vec(),
        slot2: vec![0.0; event_dim],
        flag1: true,
        flag2: false,
    })
}

/// Concatenation baseline, "e1 then e2". Slot order carries temporal order.
pub fn compose_concat(e1: &[f64], e2: &[f64], event_dim: usize) -> Result<ConditionEmbedding> {
    check_len("event slot", event_dim, e1.len())?;
    check_len("event slot", event_dim, e2.len())?;
    Ok(ConditionEmbedding {
        slot1: e1.to_vec(),
        slot2: e2.to_vec(),
        flag1: true,
        flag2: true,
    })
}

fn check_ratio(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Range(format!("ratio x = {x} is outside [0, 1]")))
    }
}

/// `floor(x * n)` for `x` in `[0, 1]`.
///
/// Products within 1e-9 of an integer snap to it, so decimal grid values such
/// as `0.7` give the same index as exact rational arithmetic would.
pub fn split_index(x: f64, n: usize) -> usize {
    let p = x * n as f64;
    let r = p.round();
    let idx = if (p - r).abs() <= 1e-9 * (n.max(1) as f64) {
        r
    } else {
        p.floor()
    };
    (idx.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Inclusive.
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub condition: ConditionEmbedding,
}

/// Per-iteration conditioning over `N` denoising iterations.
///
/// Segments partition `[0, N)` in order. Schedules built by [`step_switch`]
/// also carry the fusion ratio `x` and switch index `k = floor(x N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    n_steps: usize,
    segments: Vec<Segment>,
    fusion_ratio: Option<f64>,
    switch_index: Option<usize>,
}

impl StepSchedule {
    /// The same condition at every iteration.
    pub fn constant(n_steps: usize, condition: ConditionEmbedding) -> Result<Self> {
        Self::from_segments(
            n_steps,
            vec![Segment {
                start: 0,
                end: n_steps,
                condition,
            }],
        )
    }

    /// Builds a schedule from an explicit partition. Empty segments are dropped.
    pub fn from_segments(n_steps: usize, segments: Vec<Segment>) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let segments: Vec<Segment> = segments.into_iter().filter(|s| s.end > s.start).collect();
        let mut cursor = 0;
        for seg in &segments {
            if seg.start != cursor {
                return Err(Error::Schedule(format!(
                    "segments must partition [0, {n_steps}): expected start {cursor}, found {}",
                    seg.start
                )));
            }
            cursor = seg.end;
        }
        if cursor != n_steps {
            return Err(Error::Schedule(format!(
                "segments cover [0, {cursor}) but the schedule has {n_steps} steps"
            )));
        }
        if let Some(first) = segments.first() {
            let dim = first.condition.event_dim();
            for seg in &segments {
                check_len("schedule condition", dim, seg.condition.event_dim())?;
            }
        }
        Ok(Self {
            n_steps,
            segments,
            fusion_ratio: None,
            switch_index: None,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn fusion_ratio(&self) -> Option<f64> {
        self.fusion_ratio
    }

    pub fn switch_index(&self) -> Option<usize> {
        self.switch_index
    }

    /// Normalized diffusion time of iteration `i`, `i / N`.
    pub fn tau(&self, i: usize) -> f64 {
        i as f64 / self.n_steps as f64
    }

    pub fn event_dim(&self) -> usize {
        self.segments[0].condition.event_dim()
    }

    /// The condition active at denoising iteration `i`.
    pub fn condition_at(&self, i: usize) -> Result<&ConditionEmbedding> {
        if i >= self.n_steps {
            return Err(Error::Range(format!(
                "iteration {i} is outside [0, {})",
                self.n_steps
            )));
        }
        // Segments are sorted and contiguous.
        let pos = self.segments.partition_point(|s| s.end <= i);
        Ok(&self.segments[pos].condition)
    }
}

/// Step-switch schedule: iterations `i < k` use `cond_a`, the rest `cond_b`,
/// with `k = floor(x N)`. `x = 0` is all `cond_b`, `x = 1` all `cond_a`.
pub fn step_switch(
    x: f64,
    n_steps: usize,
    cond_a: ConditionEmbedding,
    cond_b: ConditionEmbedding,
) -> Result<StepSchedule> {
    check_ratio(x)?;
    if n_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let k = split_index(x, n_steps);
    let mut sched = StepSchedule::from_segments(
        n_steps,
        vec![
            Segment {
                start: 0,
                end: k,
                condition: cond_a,
            },
            Segment {
                start: k,
                end: n_steps,
                condition: cond_b,
            },
        ],
    )?;
    sched.fusion_ratio = Some(x);
    sched.switch_index = Some(k);
    Ok(sched)
}

/// Per-block conditioning, identical at every denoising iteration.
///
/// Blocks are ordered shallow to deep. With split index `b = floor(x B)`,
/// blocks `j < b` carry condition A and blocks `j >= b` condition B (the
/// 1-based "blocks 1..=b" convention shifted down by one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAssignment {
    n_blocks: usize,
    split_index: usize,
    split_ratio: f64,
    per_block: Vec<ConditionEmbedding>,
}

impl BlockAssignment {
    /// Every block sees `condition`. Equivalent to a split at `x = 1`.
    pub fn uniform(n_blocks: usize, condition: ConditionEmbedding) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Config("block assignment needs at least one block".into()));
        }
        Ok(Self {
            n_blocks,
            split_index: n_blocks,
            split_ratio: 1.0,
            per_block: vec![condition; n_blocks],
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn split_ratio(&self) -> f64 {
        self.split_ratio
    }

    pub fn per_block(&self) -> &[ConditionEmbedding] {
        &self.per_block
    }

    pub fn block(&self, j: usize) -> &ConditionEmbedding {
        &self.per_block[j]
    }

    pub fn event_dim(&self) -> usize {
        self.per_block[0].event_dim()
    }
}

pub fn block_split(
    x: f64,
    n_blocks: usize,
    cond_a: ConditionEmbedding,
    cond_b: ConditionEmbedding,
) -> Result<BlockAssignment> {
    check_ratio(x)?;
    if n_blocks == 0 {
        return Err(Error::Config("block assignment needs at least one block".into()));
    }
    check_len("block condition", cond_a.event_dim(), cond_b.event_dim())?;
    let b = split_index(x, n_blocks);
    let per_block = (0..n_blocks)
        .map(|j| if j < b { cond_a.clone() } else { cond_b.clone() })
        .collect();
    Ok(BlockAssignment {
        n_blocks,
        split_index: b,
        split_ratio: x,
        per_block,
    })
}

/// The four side-by-side settings at a single turning point `x`:
///
/// 1. `e1 + e2` concatenated throughout;
/// 2. `e1 -> e2`;
/// 3. `e1 + e2 -> e1`;
/// 4. `e1 -> e1 + e2`.
pub fn qualitative_settings(
    x: f64,
    e1: &[f64],
    e2: &[f64],
    event_dim: usize,
    n_steps: usize,
) -> Result<[StepSchedule; 4]> {
    check_ratio(x)?;
    let single1 = compose_single(e1, event_dim)?;
    let single2 = compose_single(e2, event_dim)?;
    let concat = compose_concat(e1, e2, event_dim)?;
    Ok([
        StepSchedule::constant(n_steps, concat.clone())?,
        step_switch(x, n_steps, single1.clone(), single2)?,
        step_switch(x, n_steps, concat.clone(), single1.clone())?,
        step_switch(x, n_steps, single1, concat)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(v: f64) -> ConditionEmbedding {
        compose_single(&[v, 0.0, 0.0], 3).unwrap()
    }

    #[test]
    fn single_layout() {
        let c = compose_single(&[1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(c.to_vector(), vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let z = compose_single(&[0.0; 3], 3).unwrap();
        assert_eq!(z.flags(), (true, false));
        assert!(!z.is_unconditional());
        assert!(matches!(
            compose_single(&[0.0; 4], 3),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn concat_layout_and_order() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let c = compose_concat(&a, &b, 2).unwrap();
        assert_eq!(c.to_vector(), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_ne!(c, compose_concat(&b, &a, 2).unwrap());
        let same = compose_concat(&a, &a, 2).unwrap();
        assert_eq!(same.slot1(), same.slot2());
        assert_eq!(same.flags(), (true, true));
        assert!(compose_concat(&a, &[1.0], 2).is_err());
    }

    #[test]
    fn step_switch_at_point_three() {
        let s = step_switch(0.3, 50, cond(1.0), cond(2.0)).unwrap();
        assert_eq!(s.switch_index(), Some(15));
        for i in 0..15 {
            assert_eq!(s.condition_at(i).unwrap(), &cond(1.0));
        }
        for i in 15..50 {
            assert_eq!(s.condition_at(i).unwrap(), &cond(2.0));
        }
        assert!(matches!(s.condition_at(50), Err(Error::Range(_))));
    }

    #[test]
    fn step_switch_endpoints_are_single_segment() {
        let s0 = step_switch(0.0, 50, cond(1.0), cond(2.0)).unwrap();
        assert_eq!(s0.segments().len(), 1);
        assert!((0..50).all(|i| s0.condition_at(i).unwrap() == &cond(2.0)));
        let s1 = step_switch(1.0, 50, cond(1.0), cond(2.0)).unwrap();
        assert_eq!(s1.segments().len(), 1);
        assert_eq!(s1.switch_index(), Some(50));
        assert!((0..50).all(|i| s1.condition_at(i).unwrap() == &cond(1.0)));
    }

    #[test]
    fn ratio_out_of_range() {
        assert!(matches!(
            step_switch(1.1, 10, cond(1.0), cond(2.0)),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            block_split(-0.1, 8, cond(1.0), cond(2.0)),
            Err(Error::Range(_))
        ));
        assert!(step_switch(f64::NAN, 10, cond(1.0), cond(2.0)).is_err());
    }

    #[test]
    fn block_split_half() {
        let a = block_split(0.5, 8, cond(1.0), cond(2.0)).unwrap();
        assert_eq!(a.split_index(), 4);
        for j in 0..4 {
            assert_eq!(a.block(j), &cond(1.0));
        }
        for j in 4..8 {
            assert_eq!(a.block(j), &cond(2.0));
        }
        let a0 = block_split(0.0, 8, cond(1.0), cond(2.0)).unwrap();
        assert!(a0.per_block().iter().all(|c| c == &cond(2.0)));
        let a1 = block_split(1.0, 8, cond(1.0), cond(2.0)).unwrap();
        assert!(a1.per_block().iter().all(|c| c == &cond(1.0)));
    }

    #[test]
    fn partition_is_validated() {
        let bad = StepSchedule::from_segments(
            10,
            vec![
                Segment {
                    start: 0,
                    end: 4,
                    condition: cond(1.0),
                },
                Segment {
                    start: 5,
                    end: 10,
                    condition: cond(2.0),
                },
            ],
        );
        assert!(matches!(bad, Err(Error::Schedule(_))));
        let short = StepSchedule::from_segments(
            10,
            vec![Segment {
                start: 0,
                end: 9,
                condition: cond(1.0),
            }],
        );
        assert!(matches!(short, Err(Error::Schedule(_))));
    }

    #[test]
    fn qualitative_four_settings() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let s = qualitative_settings(0.3, &e1, &e2, 2, 50).unwrap();
        assert_eq!(s[0].segments().len(), 1);
        assert_eq!(s[0].segments()[0].end, 50);
        let c1 = compose_single(&e1, 2).unwrap();
        let c2 = compose_single(&e2, 2).unwrap();
        let cc = compose_concat(&e1, &e2, 2).unwrap();
        assert_eq!(s[1], step_switch(0.3, 50, c1.clone(), c2).unwrap());
        assert_eq!(s[2].condition_at(0).unwrap(), &cc);
        assert_eq!(s[2].condition_at(15).unwrap(), &c1);
        assert_eq!(s[3].condition_at(14).unwrap(), &c1);
        assert_eq!(s[3].condition_at(49).unwrap(), &cc);
        let other = qualitative_settings(0.8, &e1, &e2, 2, 50).unwrap();
        assert_eq!(s[0], other[0]);
    }

    #[test]
    fn tau_is_normalized_iteration() {
        let s = StepSchedule::constant(50, cond(1.0)).unwrap();
        assert_eq!(s.tau(0), 0.0);
        assert_eq!(s.tau(25), 0.5);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_matches_integer_floor(i in 0usize..=1000, n in 1usize..400) {
                // x = i / 1000, so floor(x n) = floor(i n / 1000) in integers.
                let x = i as f64 / 1000.0;
                prop_assert_eq!(split_index(x, n), i * n / 1000);
            }

            #[test]
            fn schedule_partition_is_total(x in 0.0f64..=1.0, n in 1usize..200) {
                let s = step_switch(x, n, cond(1.0), cond(2.0)).unwrap();
                let total: usize = s.segments().iter().map(|g| g.end - g.start).sum();
                prop_assert_eq!(total, n);
                let k = s.switch_index().unwrap();
                for i in 0..n {
                    let c = s.condition_at(i).unwrap();
                    prop_assert_eq!(c == &cond(1.0), i < k);
                }
            }

            #[test]
            fn split_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, n in 1usize..64) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(split_index(lo, n) <= split_index(hi, n));
            }
        }
    }
}
