//! Action-change trigger.
//!
//! Watches each actor's label stream and fires when the actor starts a new
//! non-idle action. A label counts as started once it has held for
//! `min_hold_frames` consecutive observations; the trigger carries the time
//! and frame index of the first frame of that run. A confirmed run becomes
//! the actor's stable label, so a short flicker away and back does not fire
//! again, while `grasp -> idle -> grasp` (with holds met) fires twice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{ActionLabel, ActorId};
use crate::stream_io::FrameRecord;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriggerError {
    #[error("frame {frame_index} at t={time} arrived out of order")]
    OutOfOrderFrame { frame_index: u64, time: f64 },
    #[error("min_hold_frames must be at least 1")]
    InvalidHold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebounceConfig {
    min_hold_frames: u32,
}

impl DebounceConfig {
    pub fn new(min_hold_frames: u32) -> Result<Self, TriggerError> {
        if min_hold_frames == 0 {
            return Err(TriggerError::InvalidHold);
        }
        Ok(Self { min_hold_frames })
    }

    pub fn min_hold_frames(&self) -> u32 {
        self.min_hold_frames
    }
}

impl Default for DebounceConfig {
    fn default() -> Self {
        Self { min_hold_frames: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub actor: ActorId,
    pub action: ActionLabel,
    pub time: f64,
    pub frame_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct ActorRun {
    label: ActionLabel,
    start_time: f64,
    start_frame: u64,
    len: u32,
    confirmed: bool,
    stable: ActionLabel,
}

/// Per-stream trigger state. One instance per stream; not shared.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerState {
    cfg: DebounceConfig,
    runs: BTreeMap<ActorId, ActorRun>,
    last: Option<(u64, f64)>,
}

impl TriggerState {
    pub fn new(cfg: DebounceConfig) -> Self {
        Self {
            cfg,
            runs: BTreeMap::new(),
            last: None,
        }
    }

    pub fn config(&self) -> DebounceConfig {
        self.cfg
    }

    /// Back to stream start. Configuration is kept.
    pub fn reset(&mut self) {
        self.runs.clear();
        self.last = None;
    }

    /// Feeds one frame; returns the triggers it confirms, in actor-id order.
    pub fn observe(&mut self, frame: &FrameRecord) -> Result<Vec<TriggerEvent>, TriggerError> {
        if let Some((idx, time)) = self.last {
            if frame.frame_index <= idx || frame.time <= time {
                return Err(TriggerError::OutOfOrderFrame {
                    frame_index: frame.frame_index,
                    time: frame.time,
                });
            }
        }
        self.last = Some((frame.frame_index, frame.time));

        let hold = self.cfg.min_hold_frames;
        let mut fired = Vec::new();
        for (&actor, &label) in &frame.actions {
            let run = self.runs.entry(actor).or_insert(ActorRun {
                label,
                start_time: frame.time,
                start_frame: frame.frame_index,
                len: 0,
                confirmed: false,
                // The stream is taken to start from rest.
                stable: ActionLabel::Idle,
            });
            if run.label == label {
                run.len += 1;
            } else {
                run.label = label;
                run.start_time = frame.time;
                run.start_frame = frame.frame_index;
                run.len = 1;
                run.confirmed = false;
            }
            if !run.confirmed && run.len >= hold {
                run.confirmed = true;
                if run.label != run.stable {
                    run.stable = run.label;
                    if !run.label.is_idle() {
                        fired.push(TriggerEvent {
                            actor,
                            action: run.label,
                            time: run.start_time,
                            frame_index: run.start_frame,
                        });
                    }
                }
            }
        }
        Ok(fired)
    }
}

impl Default for TriggerState {
    fn default() -> Self {
        Self::new(DebounceConfig::default())
    }
}
