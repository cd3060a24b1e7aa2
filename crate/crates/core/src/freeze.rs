//! Gradient disorder and disorder-guided freezing of scale-factor updates.
//!
//! Every scale keeps a window of its last `K` vanilla gradients. The disorder
//! of a window is the fraction of adjacent pairs whose signs differ, with
//! zero counted as a sign of its own. Every `K` steps the controller refreshes
//! the freeze flags from the disorder values; a frozen scale ignores `g_va`
//! and follows `g_flat` alone until the next refresh.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::ScaleFactor;
use crate::sagm::ScaleCombine;

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of adjacent pairs in `seq` whose signs differ.
pub fn gradient_disorder(seq: &[f64]) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::WindowTooShort(seq.len()));
    }
    let flips = seq.windows(2).filter(|p| sign(p[0]) != sign(p[1])).count();
    Ok(flips as f64 / (seq.len() - 1) as f64)
}

/// Ring buffer of the last `K` vanilla gradients of one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderTracker {
    pub scale_id: String,
    k: usize,
    window: VecDeque<f64>,
    last_disorder: Option<f64>,
}

impl DisorderTracker {
    pub fn new(scale_id: impl Into<String>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::WindowTooShort(k));
        }
        Ok(Self {
            scale_id: scale_id.into(),
            k,
            window: VecDeque::with_capacity(k),
            last_disorder: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn record_step(&mut self, g_va: f64) -> Result<()> {
        if !g_va.is_finite() {
            return Err(Error::NonFinite(format!("g_va of `{}` = {g_va}", self.scale_id)));
        }
        if self.window.len() == self.k {
            self.window.pop_front();
        }
        self.window.push_back(g_va);
        Ok(())
    }

    pub fn window(&self) -> Vec<f64> {
        self.window.iter().copied().collect()
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.k
    }

    /// Disorder of the current window, once it holds `K` samples.
    pub fn current_disorder(&self) -> Option<f64> {
        if !self.is_full() {
            return None;
        }
        let (a, b) = self.window.as_slices();
        let mut prev: Option<i8> = None;
        let mut flips = 0usize;
        for &v in a.iter().chain(b) {
            let s = sign(v);
            if prev.is_some_and(|p| p != s) {
                flips += 1;
            }
            prev = Some(s);
        }
        Some(flips as f64 / (self.k - 1) as f64)
    }

    /// Disorder computed at the most recent refresh.
    pub fn last_disorder(&self) -> Option<f64> {
        self.last_disorder
    }
}

/// Which freezing rule drives the scale updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FreezePolicy {
    /// Freeze `g_va` while disorder is below the threshold, re-evaluated every `K` steps.
    Adaptive,
    /// Like `Adaptive`, but a frozen scale never unfreezes.
    NoUnfreeze,
    /// Freeze scales whose disorder is at or above the threshold.
    ReverseFreeze,
    /// Same trigger as `Adaptive`, but a frozen scale receives no update at all.
    FreezeBoth,
    /// Even steps follow `g_va`, odd steps `g_flat`; flags are ignored.
    AlternateUpdate,
    /// Never freeze; always the combined update.
    Off,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 6] = [
        FreezePolicy::Adaptive,
        FreezePolicy::NoUnfreeze,
        FreezePolicy::ReverseFreeze,
        FreezePolicy::FreezeBoth,
        FreezePolicy::AlternateUpdate,
        FreezePolicy::Off,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::Adaptive => "Adaptive",
            FreezePolicy::NoUnfreeze => "NoUnfreeze",
            FreezePolicy::ReverseFreeze => "ReverseFreeze",
            FreezePolicy::FreezeBoth => "FreezeBoth",
            FreezePolicy::AlternateUpdate => "AlternateUpdate",
            FreezePolicy::Off => "Off",
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FreezePolicy::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown freeze policy `{s}`")))
    }
}

/// Freeze flags of every registered scale, plus the refresh schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeState {
    ids: Vec<String>,
    frozen: Vec<bool>,
    pub policy: FreezePolicy,
    r: f64,
    k: u64,
    pub step_counter: u64,
    refresh_steps: Vec<u64>,
}

impl FreezeState {
    pub fn new(ids: Vec<String>, policy: FreezePolicy, r: f64, k: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::config("freeze.r", format!("{r} outside [0, 1]")));
        }
        if k < 2 {
            return Err(Error::config("freeze.k", format!("{k} must be at least 2")));
        }
        let frozen = vec![false; ids.len()];
        Ok(Self {
            ids,
            frozen,
            policy,
            r,
            k,
            step_counter: 0,
            refresh_steps: Vec::new(),
        })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn refresh_steps(&self) -> &[u64] {
        &self.refresh_steps
    }

    fn index_of(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::MissingTracker(id.to_string()))
    }

    pub fn is_frozen(&self, id: &str) -> Result<bool> {
        Ok(self.frozen[self.index_of(id)?])
    }

    /// Freeze decision of one policy given the disorder and the current flag.
    pub fn decide(policy: FreezePolicy, delta: f64, r: f64, was_frozen: bool) -> bool {
        match policy {
            FreezePolicy::Adaptive | FreezePolicy::FreezeBoth => delta < r,
            FreezePolicy::NoUnfreeze => was_frozen || delta < r,
            FreezePolicy::ReverseFreeze => delta >= r,
            FreezePolicy::AlternateUpdate | FreezePolicy::Off => false,
        }
    }
}

/// Recomputes every flag from the trackers' full windows.
///
/// Allowed only at positive multiples of `K`, with every tracker full.
pub fn refresh_freeze_flags(state: &mut FreezeState, trackers: &mut [DisorderTracker]) -> Result<()> {
    let step = state.step_counter;
    if step == 0 || !step.is_multiple_of(state.k) {
        return Err(Error::RefreshNotDue {
            step,
            reason: format!("not a multiple of K = {}", state.k),
        });
    }
    let mut deltas = Vec::with_capacity(state.ids.len());
    for id in &state.ids {
        let tracker = trackers
            .iter()
            .find(|t| &t.scale_id == id)
            .ok_or_else(|| Error::MissingTracker(id.clone()))?;
        let delta = tracker.current_disorder().ok_or_else(|| Error::RefreshNotDue {
            step,
            reason: format!("tracker `{id}` holds fewer than K samples"),
        })?;
        deltas.push(delta);
    }
    for (i, delta) in deltas.into_iter().enumerate() {
        state.frozen[i] = FreezeState::decide(state.policy, delta, state.r, state.frozen[i]);
        if let Some(t) = trackers.iter_mut().find(|t| t.scale_id == state.ids[i]) {
            t.last_disorder = Some(delta);
        }
    }
    state.refresh_steps.push(step);
    Ok(())
}

/// Moves one scale according to its flag and the policy; returns the applied change.
///
/// `step` is the 1-based training step (its parity drives `AlternateUpdate`).
pub fn apply_scale_update(
    scale: &mut ScaleFactor,
    g_va: f64,
    g_flat: f64,
    state: &FreezeState,
    lr_scale: f64,
    step: u64,
    combine: ScaleCombine,
) -> Result<f64> {
    let frozen = state.is_frozen(&scale.id)?;
    let combined = match combine {
        ScaleCombine::Sum => g_va + g_flat,
        ScaleCombine::Average => 0.5 * (g_va + g_flat),
    };
    let grad = match state.policy {
        FreezePolicy::Adaptive | FreezePolicy::NoUnfreeze | FreezePolicy::ReverseFreeze => {
            if frozen {
                g_flat
            } else {
                combined
            }
        }
        FreezePolicy::FreezeBoth => {
            if frozen {
                return Ok(0.0);
            }
            combined
        }
        FreezePolicy::AlternateUpdate => {
            if step.is_multiple_of(2) {
                g_va
            } else {
                g_flat
            }
        }
        FreezePolicy::Off => combined,
    };
    let before = scale.value();
    scale.descend(lr_scale * grad);
    Ok(scale.value() - before)
}

/// What happened to one scale during one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStep {
    pub g_va: f64,
    pub g_flat: Option<f64>,
    /// Disorder of the trailing `K` window, once full.
    pub delta: Option<f64>,
    /// Flag in effect during this step's update.
    pub frozen: bool,
    pub applied: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerStep {
    pub step: u64,
    pub scales: Vec<ScaleStep>,
    pub refreshed: bool,
}

/// Trackers and freeze state for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeController {
    pub state: FreezeState,
    pub trackers: Vec<DisorderTracker>,
    pub combine: ScaleCombine,
}

impl FreezeController {
    pub fn new(ids: Vec<String>, policy: FreezePolicy, r: f64, k: u64, combine: ScaleCombine) -> Result<Self> {
        let trackers = ids
            .iter()
            .map(|id| DisorderTracker::new(id.clone(), k as usize))
            .collect::<Result<_>>()?;
        Ok(Self {
            state: FreezeState::new(ids, policy, r, k)?,
            trackers,
            combine,
        })
    }

    /// One training step: record `g_va`, update every scale with the current
    /// flags, then refresh the flags when the step is a multiple of `K`.
    ///
    /// Without `g_flat` (vanilla QAT) every scale follows `g_va` alone.
    pub fn step(
        &mut self,
        scales: &mut [ScaleFactor],
        g_va: &[f64],
        g_flat: Option<&[f64]>,
        lr_scale: f64,
    ) -> Result<ControllerStep> {
        if scales.len() != self.trackers.len() || g_va.len() != scales.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scales, {} trackers, {} gradients",
                scales.len(),
                self.trackers.len(),
                g_va.len()
            )));
        }
        if let Some(gf) = g_flat {
            if gf.len() != scales.len() {
                return Err(Error::InvalidArgument("g_flat length mismatch".into()));
            }
        }
        self.state.step_counter += 1;
        let t = self.state.step_counter;
        let mut out = Vec::with_capacity(scales.len());
        for (i, scale) in scales.iter_mut().enumerate() {
            if self.trackers[i].scale_id != scale.id {
                return Err(Error::MissingTracker(scale.id.clone()));
            }
            self.trackers[i].record_step(g_va[i])?;
            let frozen = self.state.frozen[i];
            let applied = match g_flat {
                Some(gf) => apply_scale_update(scale, g_va[i], gf[i], &self.state, lr_scale, t, self.combine)?,
                None => {
                    let before = scale.value();
                    scale.descend(lr_scale * g_va[i]);
                    scale.value() - before
                }
            };
            out.push(ScaleStep {
                g_va: g_va[i],
                g_flat: g_flat.map(|gf| gf[i]),
                delta: self.trackers[i].current_disorder(),
                frozen,
                applied,
            });
        }
        let refreshed = t.is_multiple_of(self.state.k);
        if refreshed {
            refresh_freeze_flags(&mut self.state, &mut self.trackers)?;
        }
        Ok(ControllerStep {
            step: t,
            scales: out,
            refreshed,
        })
    }
}
