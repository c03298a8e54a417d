//! CongressFactory and vote contracts: arbiter ballots with a deadline,
//! quorum and margin, followed by penalty execution and self-destruct.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::datashare::DataShareContract;
use crate::ledger::{payload, Address, ContractKind, EventKind, Gas, Ledger, LedgerError, Seconds, Wei};
use crate::negotiation::Margin;

pub const CONGRESS_FACTORY_GAS: Gas = Gas(2_913_993);

const CONGRESS_BASE_GAS: u64 = 2_181_014;
const CONGRESS_GAS_PER_VOTER: u64 = 295;

/// Deployment gas of one vote contract: 2181014 at one voter plus 295 per
/// additional voter. Counts below one are treated as one.
pub fn congress_deploy_gas(voter_count: usize) -> Gas {
    let extra = voter_count.max(1) as u64 - 1;
    Gas(CONGRESS_BASE_GAS + extra * CONGRESS_GAS_PER_VOTER)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CongressError {
    #[error("arbiter panel is empty")]
    EmptyPanel,
    #[error("arbiter {0} is listed twice")]
    DuplicateArbiter(Address),
    #[error("arbiter {0} is a party to the dispute")]
    ConflictedArbiter(Address),
    #[error("compensation {requested} exceeds remaining escrow {available}")]
    CompensationExceedsEscrow { requested: Wei, available: Wei },
    #[error("unknown vote contract {0}")]
    UnknownVote(Address),
    #[error("{0} is not an arbiter of this vote")]
    NotArbiter(Address),
    #[error("{0} has already voted")]
    AlreadyVoted(Address),
    #[error("voting closed at {deadline}")]
    VotingClosed { deadline: Seconds },
    #[error("deadline {deadline} not reached (now {now})")]
    DeadlineNotReached { deadline: Seconds, now: Seconds },
    #[error("operation not allowed in the current vote phase")]
    WrongPhase,
    #[error("decision already executed")]
    AlreadyExecuted,
    #[error("vote does not belong to contract {0}")]
    WrongParent(Address),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl CongressError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyPanel => "EmptyPanel",
            Self::DuplicateArbiter(_) => "DuplicateArbiter",
            Self::ConflictedArbiter(_) => "ConflictedArbiter",
            Self::CompensationExceedsEscrow { .. } => "CompensationExceedsEscrow",
            Self::UnknownVote(_) => "UnknownVote",
            Self::NotArbiter(_) => "NotArbiter",
            Self::AlreadyVoted(_) => "AlreadyVoted",
            Self::VotingClosed { .. } => "VotingClosed",
            Self::DeadlineNotReached { .. } => "DeadlineNotReached",
            Self::WrongPhase => "WrongPhase",
            Self::AlreadyExecuted => "AlreadyExecuted",
            Self::WrongParent(_) => "WrongParent",
            Self::Ledger(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ballot {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome")]
pub enum Outcome {
    BreachConfirmed { violator: Address },
    NoBreach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Decision {
    #[serde(flatten)]
    pub outcome: Outcome,
    pub yes_count: u64,
    pub no_count: u64,
    pub cast_count: u64,
}

impl Decision {
    pub fn is_breach(&self) -> bool {
        matches!(self.outcome, Outcome::BreachConfirmed { .. })
    }

    pub fn label(&self) -> &'static str {
        match self.outcome {
            Outcome::BreachConfirmed { .. } => "BreachConfirmed",
            Outcome::NoBreach => "NoBreach",
        }
    }
}

/// The combining rule: enough ballots were cast and the yes share strictly
/// exceeds the margin. Ties and missed quorum favour the accused.
pub fn breach_confirmed(yes: u64, cast: u64, quorum: u64, margin: Margin) -> bool {
    cast >= quorum && margin.exceeded_by(yes, cast)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "phase", content = "decision")]
pub enum Phase {
    Open,
    Tallied(Decision),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VoteContract {
    pub address: Address,
    pub parent: Address,
    pub accuser: Address,
    /// The accuser's counterparty.
    pub violator: Address,
    pub arbiters: Vec<Address>,
    pub deadline: Seconds,
    pub compensation: Wei,
    pub description: String,
    pub ballots: BTreeMap<Address, Ballot>,
    pub phase: Phase,
    pub executed: bool,
    pub deploy_gas: Gas,
}

impl VoteContract {
    pub fn decision(&self) -> Option<Decision> {
        match self.phase {
            Phase::Tallied(d) => Some(d),
            Phase::Open => None,
        }
    }
}

/// Parameters for one breach vote.
#[derive(Debug, Clone)]
pub struct VoteRequest {
    pub parent: Address,
    pub accuser: Address,
    pub violator: Address,
    pub arbiters: Vec<Address>,
    pub voting_time: Seconds,
    pub compensation: Wei,
    pub description: String,
    /// Escrow the parent can still pay out as a penalty.
    pub available_escrow: Wei,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Execution {
    pub decision: Decision,
    pub payout: Wei,
    pub victim: Address,
}

#[derive(Debug, Clone)]
pub struct CongressFactory {
    address: Address,
    votes: BTreeMap<Address, VoteContract>,
}

impl CongressFactory {
    pub fn deploy(ledger: &mut Ledger, owner: Address) -> Result<Self, CongressError> {
        let address =
            ledger.deploy_contract(owner, ContractKind::CongressFactory, CONGRESS_FACTORY_GAS, CONGRESS_FACTORY_GAS)?;
        Ok(CongressFactory { address, votes: BTreeMap::new() })
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn vote(&self, addr: Address) -> Result<&VoteContract, CongressError> {
        self.votes.get(&addr).ok_or(CongressError::UnknownVote(addr))
    }

    pub fn votes(&self) -> impl Iterator<Item = &VoteContract> {
        self.votes.values()
    }

    /// Deploys a vote contract paid for by the accuser and notifies every arbiter.
    pub fn spawn_vote(&mut self, ledger: &mut Ledger, req: VoteRequest) -> Result<Address, CongressError> {
        if req.arbiters.is_empty() {
            return Err(CongressError::EmptyPanel);
        }
        let mut seen = BTreeSet::new();
        for a in &req.arbiters {
            if !seen.insert(*a) {
                return Err(CongressError::DuplicateArbiter(*a));
            }
            if *a == req.accuser || *a == req.violator {
                return Err(CongressError::ConflictedArbiter(*a));
            }
        }
        if req.compensation > req.available_escrow {
            return Err(CongressError::CompensationExceedsEscrow {
                requested: req.compensation,
                available: req.available_escrow,
            });
        }
        let gas = congress_deploy_gas(req.arbiters.len());
        let address = ledger.deploy_contract(req.accuser, ContractKind::Vote, gas, gas)?;
        let deadline = ledger.now().saturating_add(req.voting_time);
        for a in &req.arbiters {
            ledger.append_event(
                address,
                EventKind::VoteRequest,
                payload([
                    ("arbiter", a.to_string()),
                    ("compensation", req.compensation.to_string()),
                    ("contract", req.parent.to_string()),
                    ("deadline", deadline.to_string()),
                    ("description", req.description.clone()),
                    ("vote", address.to_string()),
                ]),
            )?;
        }
        self.votes.insert(
            address,
            VoteContract {
                address,
                parent: req.parent,
                accuser: req.accuser,
                violator: req.violator,
                arbiters: req.arbiters,
                deadline,
                compensation: req.compensation,
                description: req.description,
                ballots: BTreeMap::new(),
                phase: Phase::Open,
                executed: false,
                deploy_gas: gas,
            },
        );
        Ok(address)
    }

    pub fn cast_vote(
        &mut self,
        ledger: &mut Ledger,
        vote: Address,
        arbiter: Address,
        ballot: Ballot,
    ) -> Result<(), CongressError> {
        let v = self.votes.get_mut(&vote).ok_or(CongressError::UnknownVote(vote))?;
        if v.phase != Phase::Open {
            return Err(CongressError::WrongPhase);
        }
        if !v.arbiters.contains(&arbiter) {
            return Err(CongressError::NotArbiter(arbiter));
        }
        if v.ballots.contains_key(&arbiter) {
            return Err(CongressError::AlreadyVoted(arbiter));
        }
        if ledger.now() >= v.deadline {
            return Err(CongressError::VotingClosed { deadline: v.deadline });
        }
        ledger.call(arbiter, vote, "cast_vote")?;
        v.ballots.insert(arbiter, ballot);
        ledger.append_event(
            vote,
            EventKind::Ballot,
            payload([
                ("arbiter", arbiter.to_string()),
                ("ballot", format!("{ballot:?}").to_lowercase()),
                ("contract", v.parent.to_string()),
            ]),
        )?;
        Ok(())
    }

    /// Closes the ballot box once the deadline has passed. Anyone may trigger
    /// it; the caller pays the call gas.
    pub fn tally(
        &mut self,
        ledger: &mut Ledger,
        vote: Address,
        caller: Address,
        quorum: u64,
        margin: Margin,
    ) -> Result<Decision, CongressError> {
        let v = self.votes.get_mut(&vote).ok_or(CongressError::UnknownVote(vote))?;
        if v.phase != Phase::Open {
            return Err(CongressError::WrongPhase);
        }
        if ledger.now() < v.deadline {
            return Err(CongressError::DeadlineNotReached { deadline: v.deadline, now: ledger.now() });
        }
        ledger.call(caller, vote, "tally")?;
        let yes = v.ballots.values().filter(|b| **b == Ballot::Yes).count() as u64;
        let no = v.ballots.values().filter(|b| **b == Ballot::No).count() as u64;
        let cast = yes + no;
        let outcome = if breach_confirmed(yes, cast, quorum, margin) {
            Outcome::BreachConfirmed { violator: v.violator }
        } else {
            Outcome::NoBreach
        };
        let decision = Decision { outcome, yes_count: yes, no_count: no, cast_count: cast };
        v.phase = Phase::Tallied(decision);
        ledger.append_event(
            vote,
            EventKind::Decision,
            payload([
                ("cast", cast.to_string()),
                ("contract", v.parent.to_string()),
                ("decision", decision.label().to_string()),
                ("no", no.to_string()),
                ("quorum", quorum.to_string()),
                ("yes", yes.to_string()),
            ]),
        )?;
        Ok(decision)
    }

    /// Applies a tallied decision to its parent contract and destroys the
    /// vote contract. A confirmed breach pays the accuser from the deposit
    /// pool; otherwise nothing moves.
    pub fn execute_decision(
        &mut self,
        ledger: &mut Ledger,
        vote: Address,
        parent: &mut DataShareContract,
        caller: Address,
    ) -> Result<Execution, CongressError> {
        let v = self.votes.get_mut(&vote).ok_or(CongressError::UnknownVote(vote))?;
        if v.executed {
            return Err(CongressError::AlreadyExecuted);
        }
        let decision = v.decision().ok_or(CongressError::WrongPhase)?;
        if v.parent != parent.address {
            return Err(CongressError::WrongParent(parent.address));
        }
        ledger.check_call(caller, vote, Wei::ZERO)?;
        ledger.call(caller, vote, "execute_decision")?;
        let mut payout = Wei::ZERO;
        if decision.is_breach() {
            payout = parent.take_penalty(v.accuser, v.compensation);
            if !payout.is_zero() {
                ledger.escrow_out(parent.address, v.accuser, payout)?;
            }
            ledger.append_event(
                parent.address,
                EventKind::Penalty,
                payload([
                    ("amount", payout.to_string()),
                    ("contract", parent.address.to_string()),
                    ("victim", v.accuser.to_string()),
                    ("violator", v.violator.to_string()),
                    ("vote", vote.to_string()),
                ]),
            )?;
        }
        ledger.self_destruct(vote, &[])?;
        v.executed = true;
        parent.finish_vote(vote, decision);
        Ok(Execution { decision, payout, victim: v.accuser })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{GasPolicy, Role};

    #[test]
    fn deploy_gas_model() {
        assert_eq!(congress_deploy_gas(1), Gas(2_181_014));
        assert_eq!(congress_deploy_gas(10), Gas(2_183_669));
        assert_eq!(congress_deploy_gas(4), Gas(2_181_899));
        for v in 1..10 {
            assert_eq!(congress_deploy_gas(v + 1).0 - congress_deploy_gas(v).0, 295);
        }
    }

    /// Exact-rational oracle: yes/cast > num/den, written without the Margin type.
    fn oracle(ballots: &[Option<bool>], quorum: u64, num: u64, den: u64) -> bool {
        let yes = ballots.iter().filter(|b| **b == Some(true)).count() as u64;
        let cast = ballots.iter().filter(|b| b.is_some()).count() as u64;
        cast >= quorum && yes * den > num * cast
    }

    #[test]
    fn rule_matches_hand_cases() {
        let half = Margin::from_fraction(0.5);
        assert!(breach_confirmed(2, 3, 3, half));
        assert!(!breach_confirmed(1, 1, 2, half));
        assert!(!breach_confirmed(1, 2, 2, half));
        let three: Vec<[Option<bool>; 3]> = (0..27)
            .map(|mut i| {
                let mut b = [None; 3];
                for slot in &mut b {
                    *slot = [None, Some(true), Some(false)][i % 3];
                    i /= 3;
                }
                b
            })
            .collect();
        for b in three {
            let yes = b.iter().filter(|x| **x == Some(true)).count() as u64;
            let cast = b.iter().filter(|x| x.is_some()).count() as u64;
            for q in 1..=3 {
                assert_eq!(breach_confirmed(yes, cast, q, half), oracle(&b, q, 1, 2));
            }
        }
    }

    struct World {
        ledger: Ledger,
        congress: CongressFactory,
        accuser: Address,
        violator: Address,
        arbiters: Vec<Address>,
    }

    fn world() -> World {
        let mut ledger = Ledger::new(GasPolicy::default()).unwrap();
        let op = ledger.create_account(Wei(10_000_000), Role::Operator);
        let congress = CongressFactory::deploy(&mut ledger, op).unwrap();
        let accuser = ledger.create_account(Wei(10_000_000), Role::Requester);
        let violator = ledger.create_account(Wei(10_000_000), Role::Provider);
        let arbiters = (0..3).map(|_| ledger.create_account(Wei(1_000_000), Role::Arbiter)).collect();
        World { ledger, congress, accuser, violator, arbiters }
    }

    fn request(w: &World, compensation: u128, escrow: u128) -> VoteRequest {
        VoteRequest {
            parent: Address([0xee; 20]),
            accuser: w.accuser,
            violator: w.violator,
            arbiters: w.arbiters.clone(),
            voting_time: 3600,
            compensation: Wei(compensation),
            description: "data is incomplete".into(),
            available_escrow: Wei(escrow),
        }
    }

    #[test]
    fn spawn_checks() {
        let mut w = world();
        let before = w.ledger.balance(w.accuser).unwrap();
        let v = {
            let r = request(&w, 100, 100);
            w.congress.spawn_vote(&mut w.ledger, r)
        }
        .unwrap();
        let vc = w.congress.vote(v).unwrap();
        assert_eq!(vc.deadline, 3600);
        assert_eq!(vc.phase, Phase::Open);
        assert_eq!(w.ledger.balance(w.accuser).unwrap(), Wei(before.0 - 2_181_604));

        let mut r = request(&w, 100, 100);
        r.arbiters.push(w.violator);
        assert_eq!(w.congress.spawn_vote(&mut w.ledger, r).unwrap_err().code(), "ConflictedArbiter");
        assert_eq!(
            {
                let r = request(&w, 200, 100);
                w.congress.spawn_vote(&mut w.ledger, r)
            }
            .unwrap_err()
            .code(),
            "CompensationExceedsEscrow"
        );
        let mut r = request(&w, 1, 1);
        r.arbiters.clear();
        assert_eq!(w.congress.spawn_vote(&mut w.ledger, r).unwrap_err().code(), "EmptyPanel");
    }

    #[test]
    fn ballot_rules() {
        let mut w = world();
        let v = {
            let r = request(&w, 100, 100);
            w.congress.spawn_vote(&mut w.ledger, r)
        }
        .unwrap();
        let a = w.arbiters.clone();
        w.congress.cast_vote(&mut w.ledger, v, a[0], Ballot::Yes).unwrap();
        assert_eq!(w.congress.cast_vote(&mut w.ledger, v, a[0], Ballot::No).unwrap_err().code(), "AlreadyVoted");
        assert_eq!(w.congress.cast_vote(&mut w.ledger, v, w.accuser, Ballot::Yes).unwrap_err().code(), "NotArbiter");
        assert_eq!(
            w.congress.tally(&mut w.ledger, v, w.violator, 2, Margin::from_fraction(0.5)).unwrap_err().code(),
            "DeadlineNotReached"
        );
        w.ledger.advance_time(3600);
        assert_eq!(w.congress.cast_vote(&mut w.ledger, v, a[1], Ballot::Yes).unwrap_err().code(), "VotingClosed");
        let d = w.congress.tally(&mut w.ledger, v, w.violator, 2, Margin::from_fraction(0.5)).unwrap();
        assert_eq!(d.outcome, Outcome::NoBreach);
        assert_eq!((d.yes_count, d.no_count, d.cast_count), (1, 0, 1));
        assert_eq!(
            w.congress.tally(&mut w.ledger, v, w.violator, 2, Margin::from_fraction(0.5)).unwrap_err().code(),
            "WrongPhase"
        );
    }
}
