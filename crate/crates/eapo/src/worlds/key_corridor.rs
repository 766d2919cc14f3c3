//! Corridor of cells with a locked door at the far end and `K` panels at the
//! entrance, exactly one of which hides the key.
//!
//! Encoding: `[cell, view, content, key, door, 0]` where `view` is 0 or
//! `panel + 1`, `content` is 1 when the viewed panel hides the key, `key` is
//! 0 (none), 1 (held) or 2 (lost to a wrong pick) and `door` is 0 (closed),
//! 1 (open) or 2 (failed attempt, only with terminal failures).

use rand::Rng;

use super::{Dynamics, Hidden, Outcome};
use crate::mdp::{Encoding, EnvAction, GoalId};
use crate::rng::StreamRng;

const CELL: usize = 0;
const VIEW: usize = 1;
const CONTENT: usize = 2;
const KEY: usize = 3;
const DOOR: usize = 4;

#[derive(Debug, Clone)]
pub(crate) struct KeyCorridor {
    pub cells: u8,
    pub panels: u8,
    pub failure_terminal: bool,
}

impl Dynamics for KeyCorridor {
    fn initial(&self) -> Encoding {
        [0; 6]
    }

    fn goals(&self) -> Vec<String> {
        vec![format!("fetch the key and open the door at cell {}", self.cells - 1)]
    }

    fn cue_targets(&self) -> u16 {
        self.panels as u16
    }

    fn is_terminal(&self, enc: &Encoding) -> bool {
        enc[DOOR] != 0 || enc[KEY] == 2
    }

    fn is_success(&self, enc: &Encoding) -> bool {
        enc[DOOR] == 1
    }

    fn actions(&self, enc: &Encoding) -> Vec<EnvAction> {
        if self.is_terminal(enc) {
            return Vec::new();
        }
        if enc[VIEW] != 0 {
            return vec![EnvAction::StepBack];
        }
        let cell = enc[CELL];
        let last = self.cells - 1;
        let mut out = Vec::new();
        if cell > 0 {
            out.push(EnvAction::MoveLeft);
        }
        if cell < last {
            out.push(EnvAction::MoveRight);
        }
        if cell > 0 {
            out.push(EnvAction::StepBack);
        }
        if cell == last {
            out.push(EnvAction::OpenDoor);
        }
        if cell == 0 && enc[KEY] == 0 {
            out.extend((0..self.panels as u16).map(EnvAction::Inspect));
            out.extend((0..self.panels as u16).map(EnvAction::Pick));
        }
        out
    }

    fn apply(&self, enc: &Encoding, action: EnvAction, hidden: Hidden, _goal: GoalId) -> Outcome {
        let mut next = *enc;
        match action {
            EnvAction::MoveLeft => next[CELL] -= 1,
            EnvAction::MoveRight => next[CELL] += 1,
            EnvAction::StepBack => {
                if next[VIEW] != 0 {
                    next[VIEW] = 0;
                    next[CONTENT] = 0;
                } else {
                    next[CELL] -= 1;
                }
            }
            EnvAction::Inspect(p) => {
                next[VIEW] = p as u8 + 1;
                next[CONTENT] = u8::from(hidden.0 == p as u64);
            }
            EnvAction::Pick(p) => next[KEY] = if hidden.0 == p as u64 { 1 } else { 2 },
            EnvAction::OpenDoor => {
                if enc[KEY] == 1 {
                    next[DOOR] = 1;
                } else if self.failure_terminal {
                    next[DOOR] = 2;
                }
            }
            other => unreachable!("{other} is not a key-corridor action"),
        }
        Outcome { next, terminal: self.is_terminal(&next), success: self.is_success(&next) }
    }

    fn observation(&self, enc: &Encoding) -> Option<u16> {
        (enc[VIEW] != 0).then_some(enc[CONTENT] as u16)
    }

    fn hidden_prior(&self, _goal: GoalId) -> Vec<Hidden> {
        (0..self.panels as u64).map(Hidden).collect()
    }

    fn sample_hidden(&self, _goal: GoalId, rng: &mut StreamRng) -> Hidden {
        Hidden(rng.gen_range(0..self.panels as u64))
    }

    fn consistent(&self, hidden: Hidden, enc: &Encoding) -> bool {
        enc[VIEW] == 0 || (enc[CONTENT] == 1) == (hidden.0 == (enc[VIEW] - 1) as u64)
    }

    fn max_memory(&self) -> usize {
        self.panels as usize
    }
}
