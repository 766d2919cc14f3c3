//! A catalog of `M` items with `Q` hidden binary attributes each. The goal
//! names the required attribute vector; queries reveal one attribute and a
//! purchase ends the episode when it matches.
//!
//! Encoding: `[item, attr, value, bought, 0, 0]` where `item` is 0 on the
//! catalog page or `item + 1` on a query page and `bought` is 0, 1 (success)
//! or 2 (failed purchase, only with terminal failures).

use rand::Rng;

use super::{Dynamics, Hidden, Outcome};
use crate::mdp::{Encoding, EnvAction, GoalId};
use crate::rng::StreamRng;

const ITEM: usize = 0;
const ATTR: usize = 1;
const VALUE: usize = 2;
const BOUGHT: usize = 3;

#[derive(Debug, Clone)]
pub(crate) struct ShopSim {
    pub items: u8,
    pub attributes: u8,
    pub failure_terminal: bool,
}

impl ShopSim {
    fn bit(&self, hidden: Hidden, item: u16, attr: u16) -> bool {
        hidden.0 >> (item as u64 * self.attributes as u64 + attr as u64) & 1 == 1
    }

    fn matches(&self, hidden: Hidden, item: u16, goal: GoalId) -> bool {
        (0..self.attributes as u16).all(|q| self.bit(hidden, item, q) == (goal.0 >> q & 1 == 1))
    }

    fn any_match(&self, hidden: Hidden, goal: GoalId) -> bool {
        (0..self.items as u16).any(|i| self.matches(hidden, i, goal))
    }

    fn bits(&self) -> u32 {
        self.items as u32 * self.attributes as u32
    }
}

impl Dynamics for ShopSim {
    fn initial(&self) -> Encoding {
        [0; 6]
    }

    fn goals(&self) -> Vec<String> {
        (0..1u32 << self.attributes)
            .map(|g| {
                let wanted: String =
                    (0..self.attributes).map(|q| if g >> q & 1 == 1 { '1' } else { '0' }).collect();
                format!("buy an item with attributes {wanted}")
            })
            .collect()
    }

    fn cue_targets(&self) -> u16 {
        self.bits() as u16
    }

    fn is_terminal(&self, enc: &Encoding) -> bool {
        enc[BOUGHT] != 0
    }

    fn is_success(&self, enc: &Encoding) -> bool {
        enc[BOUGHT] == 1
    }

    fn actions(&self, enc: &Encoding) -> Vec<EnvAction> {
        if self.is_terminal(enc) {
            return Vec::new();
        }
        if enc[ITEM] != 0 {
            return vec![EnvAction::StepBack];
        }
        let mut out: Vec<EnvAction> = (0..self.bits() as u16).map(EnvAction::Query).collect();
        out.extend((0..self.items as u16).map(EnvAction::Buy));
        out
    }

    fn apply(&self, enc: &Encoding, action: EnvAction, hidden: Hidden, goal: GoalId) -> Outcome {
        let mut next = *enc;
        match action {
            EnvAction::StepBack => {
                next[ITEM] = 0;
                next[ATTR] = 0;
                next[VALUE] = 0;
            }
            EnvAction::Query(k) => {
                let (item, attr) = (k / self.attributes as u16, k % self.attributes as u16);
                next[ITEM] = item as u8 + 1;
                next[ATTR] = attr as u8;
                next[VALUE] = u8::from(self.bit(hidden, item, attr));
            }
            EnvAction::Buy(item) => {
                if self.matches(hidden, item, goal) {
                    next[BOUGHT] = 1;
                } else if self.failure_terminal {
                    next[BOUGHT] = 2;
                }
            }
            other => unreachable!("{other} is not a shop-sim action"),
        }
        Outcome { next, terminal: self.is_terminal(&next), success: self.is_success(&next) }
    }

    fn observation(&self, enc: &Encoding) -> Option<u16> {
        (enc[ITEM] != 0).then_some(enc[VALUE] as u16)
    }

    fn hidden_prior(&self, goal: GoalId) -> Vec<Hidden> {
        (0..1u64 << self.bits())
            .map(Hidden)
            .filter(|&h| self.any_match(h, goal))
            .collect()
    }

    fn sample_hidden(&self, goal: GoalId, rng: &mut StreamRng) -> Hidden {
        loop {
            let h = Hidden(rng.gen_range(0..1u64 << self.bits()));
            if self.any_match(h, goal) {
                return h;
            }
        }
    }

    fn consistent(&self, hidden: Hidden, enc: &Encoding) -> bool {
        enc[ITEM] == 0 || self.bit(hidden, (enc[ITEM] - 1) as u16, enc[ATTR] as u16) == (enc[VALUE] == 1)
    }

    fn max_memory(&self) -> usize {
        self.bits() as usize
    }
}
