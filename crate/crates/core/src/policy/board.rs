//! Threshold-and-veto evaluation of board votes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::PolicyBoard;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Approve,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Approved,
    Rejected,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoardDecision {
    pub approvals: BTreeSet<String>,
    pub rejections: BTreeSet<String>,
    pub vetoed: bool,
    pub outcome: Outcome,
    /// Votes discarded because the voter is not a member.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ignored: Vec<String>,
}

impl BoardDecision {
    /// A pending decision becomes rejected once the collection deadline passes.
    pub fn at_timeout(mut self) -> Self {
        if self.outcome == Outcome::Pending {
            self.outcome = Outcome::Rejected;
        }
        self
    }
}

/// approved ⇔ approvals ≥ threshold ∧ no veto holder rejected;
/// rejected ⇔ a veto holder rejected ∨ approvals + absent < threshold;
/// pending otherwise. Only a member's first vote counts.
pub fn evaluate_board<'a, I>(board: &PolicyBoard, votes: I) -> BoardDecision
where
    I: IntoIterator<Item = (&'a str, Vote)>,
{
    let mut approvals = BTreeSet::new();
    let mut rejections = BTreeSet::new();
    let mut ignored = Vec::new();
    let mut vetoed = false;
    for (member, vote) in votes {
        let Some(m) = board.member(member) else {
            ignored.push(member.to_string());
            continue;
        };
        if approvals.contains(member) || rejections.contains(member) {
            continue;
        }
        match vote {
            Vote::Approve => {
                approvals.insert(member.to_string());
            }
            Vote::Reject => {
                vetoed |= m.veto;
                rejections.insert(member.to_string());
            }
        }
    }
    let absent = board.members.len() - approvals.len() - rejections.len();
    let outcome = if vetoed || approvals.len() + absent < board.threshold {
        Outcome::Rejected
    } else if approvals.len() >= board.threshold {
        Outcome::Approved
    } else {
        Outcome::Pending
    };
    BoardDecision {
        approvals,
        rejections,
        vetoed,
        outcome,
        ignored,
    }
}
