//! ContractFactory and the DataShareContract escrow state machine.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::cloudnode::{CloudNode, LinkState};
use crate::congress::{CongressError, CongressFactory, Decision, VoteRequest};
use crate::cryptopipe::{Digest, EnvelopeBundle, KeyPair};
use crate::ledger::{payload, Address, ContractKind, EventKind, Gas, Ledger, LedgerError, Seconds, Wei};
use crate::negotiation::{KeyDirectory, NegotiationError, SealedTerms, Sig};

pub const CONTRACT_FACTORY_GAS: Gas = Gas(3_047_711);

const DATASHARE_BASE_GAS: u64 = 1_549_929;
const DATASHARE_SPAN_GAS: u64 = 195_821;
const DATASHARE_SPAN_VOTERS: u64 = 9;

const DESTROY_DOMAIN: &[u8] = b"sharepact/destroy/v1";

/// Deployment gas of one data-sharing contract: linear from 1549929 at one
/// voter to 1745750 at ten, rounded half up. Counts below one are treated as one.
pub fn datashare_deploy_gas(voter_count: usize) -> Gas {
    let extra = voter_count.max(1) as u64 - 1;
    let num = extra * DATASHARE_SPAN_GAS;
    Gas(DATASHARE_BASE_GAS + (2 * num + DATASHARE_SPAN_VOTERS) / (2 * DATASHARE_SPAN_VOTERS))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataShareError {
    #[error("terms are not sealed: {0}")]
    UnsealedTerms(NegotiationError),
    #[error("requester payment {got} does not equal the required {expected}")]
    InsufficientDeposit { expected: Wei, got: Wei },
    #[error("operation not allowed in state {0}")]
    WrongState(ContractState),
    #[error("caller is not the provider")]
    NotProvider,
    #[error("caller is not the requester")]
    NotRequester,
    #[error("{0} is not a party to the contract")]
    NotParty(Address),
    #[error("amount {got} does not equal the required {expected}")]
    WrongAmount { expected: Wei, got: Wei },
    #[error("the delivered link has not been consumed")]
    LinkNotConsumed,
    #[error("both parties must sign")]
    MissingSignature,
    #[error("signature of {0} does not verify")]
    InvalidSignature(Address),
    #[error("a breach vote is in progress")]
    VoteInProgress,
    #[error("contract is closed")]
    AlreadyClosed,
    #[error("contract expires at {expires_at}, now {now}")]
    NotYetExpired { expires_at: Seconds, now: Seconds },
    #[error("unknown contract {0}")]
    UnknownContract(Address),
    #[error(transparent)]
    Congress(#[from] CongressError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl DataShareError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnsealedTerms(_) => "UnsealedTerms",
            Self::InsufficientDeposit { .. } => "InsufficientDeposit",
            Self::WrongState(_) => "WrongState",
            Self::NotProvider => "NotProvider",
            Self::NotRequester => "NotRequester",
            Self::NotParty(_) => "NotParty",
            Self::WrongAmount { .. } => "WrongAmount",
            Self::LinkNotConsumed => "LinkNotConsumed",
            Self::MissingSignature => "MissingSignature",
            Self::InvalidSignature(_) => "InvalidSignature",
            Self::VoteInProgress => "VoteInProgress",
            Self::AlreadyClosed => "AlreadyClosed",
            Self::NotYetExpired { .. } => "NotYetExpired",
            Self::UnknownContract(_) => "UnknownContract",
            Self::Congress(e) => e.code(),
            Self::Ledger(e) => e.code(),
        }
    }
}

pub type Result<T, E = DataShareError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DepositBreakdown {
    pub payment: Wei,
    pub deposit_money: Wei,
    pub gas_money: Wei,
    pub total: Wei,
}

impl DepositBreakdown {
    pub fn new(payment: Wei, deposit_money: Wei, gas_money: Wei) -> Result<Self, LedgerError> {
        let total = payment.checked_add(deposit_money)?.checked_add(gas_money)?;
        Ok(DepositBreakdown { payment, deposit_money, gas_money, total })
    }

    pub fn for_terms(sealed: &SealedTerms) -> Result<Self, LedgerError> {
        let t = sealed.terms();
        Self::new(t.payment, t.requester_deposit, t.gas_money)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CloseReason {
    Expired,
    MutualDestroy,
    PenaltyExecuted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "state", content = "reason")]
pub enum ContractState {
    Deployed,
    ProviderBound,
    LinkDelivered,
    Retrieved,
    Closed(CloseReason),
}

impl ContractState {
    pub fn is_closed(self) -> bool {
        matches!(self, ContractState::Closed(_))
    }

    pub fn label(self) -> String {
        match self {
            ContractState::Closed(r) => format!("Closed({r:?})"),
            s => format!("{s:?}"),
        }
    }

    fn rank(self) -> u8 {
        match self {
            ContractState::Deployed => 0,
            ContractState::ProviderBound => 1,
            ContractState::LinkDelivered => 2,
            ContractState::Retrieved => 3,
            ContractState::Closed(_) => 4,
        }
    }

    /// Whether `self -> next` is a declared transition (staying put counts).
    pub fn may_become(self, next: ContractState) -> bool {
        if self == next {
            return true;
        }
        match (self, next) {
            (ContractState::Closed(_), _) => false,
            (_, ContractState::Closed(_)) => true,
            (a, b) => b.rank() == a.rank() + 1,
        }
    }
}

impl std::fmt::Display for ContractState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// Escrowed amounts. The requester side holds the unpaid payment, the
/// requester deposit and the unspent gas allowance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Escrow {
    pub payment: Wei,
    pub requester_deposit: Wei,
    pub gas_allowance: Wei,
    pub provider_deposit: Wei,
}

impl Escrow {
    pub fn requester_escrow(&self) -> Wei {
        Wei(self.payment.0 + self.requester_deposit.0 + self.gas_allowance.0)
    }

    pub fn provider_escrow(&self) -> Wei {
        self.provider_deposit
    }

    pub fn total(&self) -> Wei {
        Wei(self.requester_escrow().0 + self.provider_escrow().0)
    }

    /// Deposits available to pay penalties.
    pub fn deposit_pool(&self) -> Wei {
        Wei(self.requester_deposit.0 + self.provider_deposit.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BreachRecord {
    pub vote: Address,
    pub accuser: Address,
    pub description: String,
    pub compensation: Wei,
    pub decision: Option<Decision>,
    pub payout: Wei,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataShareContract {
    pub address: Address,
    sealed: SealedTerms,
    state: ContractState,
    escrow: Escrow,
    pub created_at: Seconds,
    pub expires_at: Seconds,
    pub deploy_gas: Gas,
    delivered_bundle: Option<Digest>,
    active_vote: Option<Address>,
    breach_history: Vec<BreachRecord>,
    dispatch_gas_spent: Wei,
}

/// JSON view of a contract for assertions and reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContractSnapshot {
    pub address: Address,
    pub state: String,
    pub requester: Address,
    pub provider: Address,
    pub requester_escrow: Wei,
    pub provider_escrow: Wei,
    pub escrow: Escrow,
    pub created_at: Seconds,
    pub expires_at: Seconds,
    pub deploy_gas: Gas,
    pub terms_digest: Digest,
    pub delivered_bundle: Option<Digest>,
    pub active_vote: Option<Address>,
    pub breach_history: Vec<BreachRecord>,
    pub dispatch_gas_spent: Wei,
}

/// Signature a party gives to agree to early destruction of `contract`.
pub fn destroy_consent(keys: &KeyPair, contract: Address) -> Sig {
    Sig(keys.sign(&destroy_message(contract)))
}

fn destroy_message(contract: Address) -> Vec<u8> {
    let mut msg = DESTROY_DOMAIN.to_vec();
    msg.extend_from_slice(&contract.0);
    msg
}

impl DataShareContract {
    pub fn sealed_terms(&self) -> &SealedTerms {
        &self.sealed
    }

    pub fn requester(&self) -> Address {
        self.sealed.terms().requester_address
    }

    pub fn provider(&self) -> Address {
        self.sealed.terms().provider_address
    }

    pub fn state(&self) -> ContractState {
        self.state
    }

    pub fn escrow(&self) -> Escrow {
        self.escrow
    }

    pub fn active_vote(&self) -> Option<Address> {
        self.active_vote
    }

    pub fn breach_history(&self) -> &[BreachRecord] {
        &self.breach_history
    }

    pub fn delivered_bundle(&self) -> Option<Digest> {
        self.delivered_bundle
    }

    pub fn snapshot(&self) -> ContractSnapshot {
        ContractSnapshot {
            address: self.address,
            state: self.state.label(),
            requester: self.requester(),
            provider: self.provider(),
            requester_escrow: self.escrow.requester_escrow(),
            provider_escrow: self.escrow.provider_escrow(),
            escrow: self.escrow,
            created_at: self.created_at,
            expires_at: self.expires_at,
            deploy_gas: self.deploy_gas,
            terms_digest: self.sealed.terms_digest(),
            delivered_bundle: self.delivered_bundle,
            active_vote: self.active_vote,
            breach_history: self.breach_history.clone(),
            dispatch_gas_spent: self.dispatch_gas_spent,
        }
    }

    fn ensure_open(&self) -> Result<()> {
        if self.state.is_closed() {
            Err(DataShareError::AlreadyClosed)
        } else {
            Ok(())
        }
    }

    fn emit(&self, ledger: &mut Ledger, kind: EventKind, mut items: Vec<(&str, String)>) -> Result<()> {
        items.push(("contract", self.address.to_string()));
        ledger.append_event(self.address, kind, payload(items))?;
        Ok(())
    }

    /// Pays the gas of `transfers` value transfers out of the gas allowance.
    /// Whatever the allowance cannot cover is waived.
    fn charge_dispatch(&mut self, ledger: &mut Ledger, transfers: u64, reason: &str) -> Result<()> {
        let p = ledger.policy();
        let wanted = Wei(transfers as u128 * p.transfer_gas as u128 * p.gas_price);
        let fee = wanted.min(self.escrow.gas_allowance);
        if !fee.is_zero() {
            ledger.contract_gas(self.address, fee, reason)?;
            self.escrow.gas_allowance = Wei(self.escrow.gas_allowance.0 - fee.0);
            self.dispatch_gas_spent = Wei(self.dispatch_gas_spent.0 + fee.0);
        }
        Ok(())
    }

    pub fn provider_deposit(&mut self, ledger: &mut Ledger, provider: Address, amount: Wei) -> Result<()> {
        self.ensure_open()?;
        if provider != self.provider() {
            return Err(DataShareError::NotProvider);
        }
        if self.state != ContractState::Deployed {
            return Err(DataShareError::WrongState(self.state));
        }
        let expected = self.sealed.terms().provider_deposit;
        if amount != expected {
            return Err(DataShareError::WrongAmount { expected, got: amount });
        }
        ledger.check_call(provider, self.address, amount)?;
        ledger.call(provider, self.address, "provider_deposit")?;
        ledger.escrow_in(provider, self.address, amount)?;
        self.escrow.provider_deposit = amount;
        self.state = ContractState::ProviderBound;
        self.emit(ledger, EventKind::ProviderDeposit, vec![("amount", amount.to_string())])
    }

    /// Whether `deliver_link` by `provider` would be accepted now.
    pub fn check_deliver(&self, ledger: &Ledger, provider: Address) -> Result<()> {
        self.ensure_open()?;
        if provider != self.provider() {
            return Err(DataShareError::NotProvider);
        }
        if self.state != ContractState::ProviderBound {
            return Err(DataShareError::WrongState(self.state));
        }
        ledger.check_call(provider, self.address, Wei::ZERO)?;
        Ok(())
    }

    /// Records the bundle digest on the log and pays the provider in the same step.
    pub fn deliver_link(&mut self, ledger: &mut Ledger, provider: Address, bundle: &EnvelopeBundle) -> Result<()> {
        self.check_deliver(ledger, provider)?;
        ledger.call(provider, self.address, "deliver_link")?;
        let digest = bundle.digest();
        self.emit(ledger, EventKind::LinkDelivered, vec![("bundle", digest.to_string())])?;
        let payment = self.escrow.payment;
        if !payment.is_zero() {
            ledger.escrow_out(self.address, provider, payment)?;
            self.escrow.payment = Wei::ZERO;
            self.charge_dispatch(ledger, 1, "payment")?;
        }
        self.delivered_bundle = Some(digest);
        self.state = ContractState::LinkDelivered;
        Ok(())
    }

    pub fn confirm_retrieval(&mut self, ledger: &mut Ledger, cloud: &CloudNode, requester: Address) -> Result<()> {
        self.ensure_open()?;
        if requester != self.requester() {
            return Err(DataShareError::NotRequester);
        }
        if self.state != ContractState::LinkDelivered {
            return Err(DataShareError::WrongState(self.state));
        }
        let bundle = self.delivered_bundle.ok_or(DataShareError::LinkNotConsumed)?;
        if cloud.link_state_by_bundle(&bundle) != Some(LinkState::Consumed) {
            return Err(DataShareError::LinkNotConsumed);
        }
        ledger.check_call(requester, self.address, Wei::ZERO)?;
        ledger.call(requester, self.address, "confirm_retrieval")?;
        self.state = ContractState::Retrieved;
        self.emit(ledger, EventKind::RetrievalConfirmed, vec![("bundle", bundle.to_string())])
    }

    /// Early destruction agreed by both parties; refunds all remaining escrow.
    pub fn mutual_destroy(
        &mut self,
        ledger: &mut Ledger,
        dir: &KeyDirectory,
        requester_sig: Option<&Sig>,
        provider_sig: Option<&Sig>,
    ) -> Result<()> {
        self.ensure_open()?;
        if self.active_vote.is_some() {
            return Err(DataShareError::VoteInProgress);
        }
        let (Some(rs), Some(ps)) = (requester_sig, provider_sig) else {
            return Err(DataShareError::MissingSignature);
        };
        let msg = destroy_message(self.address);
        for (who, sig) in [(self.requester(), rs), (self.provider(), ps)] {
            if !dir.verify(who, &msg, sig) {
                return Err(DataShareError::InvalidSignature(who));
            }
        }
        self.close(ledger, CloseReason::MutualDestroy)
    }

    /// Time-based destruction. A still-fresh delivered link is revoked.
    pub fn expire(&mut self, ledger: &mut Ledger, cloud: Option<&mut CloudNode>) -> Result<()> {
        self.ensure_open()?;
        if ledger.now() < self.expires_at {
            return Err(DataShareError::NotYetExpired { expires_at: self.expires_at, now: ledger.now() });
        }
        if self.active_vote.is_some() {
            return Err(DataShareError::VoteInProgress);
        }
        if let (Some(cloud), Some(bundle)) = (cloud, self.delivered_bundle) {
            cloud.revoke_by_bundle(ledger, &bundle);
        }
        self.close(ledger, CloseReason::Expired)
    }

    fn close(&mut self, ledger: &mut Ledger, reason: CloseReason) -> Result<()> {
        let pending = [self.escrow.requester_escrow(), self.escrow.provider_escrow()];
        let transfers = pending.iter().filter(|w| !w.is_zero()).count() as u64;
        self.charge_dispatch(ledger, transfers, "refund")?;
        let requester_refund = self.escrow.requester_escrow();
        let provider_refund = self.escrow.provider_escrow();
        self.emit(
            ledger,
            EventKind::Closed,
            vec![
                ("provider_refund", provider_refund.to_string()),
                ("reason", format!("{reason:?}")),
                ("requester_refund", requester_refund.to_string()),
            ],
        )?;
        ledger
            .self_destruct(self.address, &[(self.requester(), requester_refund), (self.provider(), provider_refund)])?;
        self.escrow = Escrow::default();
        self.state = ContractState::Closed(reason);
        Ok(())
    }

    /// Moves up to `cap` out of the deposits for `victim`: their own deposit
    /// first, then the counterparty's. Returns the amount taken.
    pub(crate) fn take_penalty(&mut self, victim: Address, cap: Wei) -> Wei {
        let victim_is_requester = victim == self.requester();
        let e = &mut self.escrow;
        let (own, other) = if victim_is_requester {
            (&mut e.requester_deposit, &mut e.provider_deposit)
        } else {
            (&mut e.provider_deposit, &mut e.requester_deposit)
        };
        let from_own = (*own).min(cap);
        own.0 -= from_own.0;
        let from_other = (*other).min(Wei(cap.0 - from_own.0));
        other.0 -= from_other.0;
        Wei(from_own.0 + from_other.0)
    }

    /// Called by the congress once a vote has been executed.
    pub(crate) fn finish_vote(&mut self, vote: Address, decision: Decision) {
        if self.active_vote == Some(vote) {
            self.active_vote = None;
        }
        if let Some(rec) = self.breach_history.iter_mut().find(|r| r.vote == vote) {
            rec.decision = Some(decision);
        }
    }

    fn record_payout(&mut self, vote: Address, payout: Wei) {
        if let Some(rec) = self.breach_history.iter_mut().find(|r| r.vote == vote) {
            rec.payout = payout;
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContractFactory {
    address: Address,
    contracts: BTreeMap<Address, DataShareContract>,
}

impl ContractFactory {
    pub fn deploy(ledger: &mut Ledger, owner: Address) -> Result<Self> {
        let address =
            ledger.deploy_contract(owner, ContractKind::ContractFactory, CONTRACT_FACTORY_GAS, CONTRACT_FACTORY_GAS)?;
        Ok(ContractFactory { address, contracts: BTreeMap::new() })
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn contract(&self, addr: Address) -> Result<&DataShareContract> {
        self.contracts.get(&addr).ok_or(DataShareError::UnknownContract(addr))
    }

    pub fn contract_mut(&mut self, addr: Address) -> Result<&mut DataShareContract> {
        self.contracts.get_mut(&addr).ok_or(DataShareError::UnknownContract(addr))
    }

    pub fn contracts(&self) -> impl Iterator<Item = &DataShareContract> {
        self.contracts.values()
    }

    /// Deploys a contract from sealed terms. The requester pays the deploy gas
    /// directly and must send exactly payment + deposit + gas money.
    pub fn create(
        &mut self,
        ledger: &mut Ledger,
        dir: &KeyDirectory,
        sealed: SealedTerms,
        requester_payment: Wei,
    ) -> Result<Address> {
        sealed.verify(dir).map_err(DataShareError::UnsealedTerms)?;
        let breakdown = DepositBreakdown::for_terms(&sealed)?;
        if requester_payment != breakdown.total {
            return Err(DataShareError::InsufficientDeposit { expected: breakdown.total, got: requester_payment });
        }
        let terms = sealed.terms();
        let requester = terms.requester_address;
        let gas = datashare_deploy_gas(terms.voter_list.len());
        let limit = ledger.policy().block_gas_limit;
        if gas.0 > limit {
            return Err(LedgerError::BlockGasLimitExceeded { limit: Gas(limit), block: gas }.into());
        }
        let needed = ledger.policy().cost(gas)?.checked_add(requester_payment)?;
        let available = ledger.balance(requester)?;
        if available < needed {
            return Err(LedgerError::InsufficientBalance { needed, available }.into());
        }
        let address = ledger.deploy_contract(requester, ContractKind::DataShare, gas, gas)?;
        ledger.escrow_in(requester, address, requester_payment)?;
        let created_at = ledger.now();
        let contract = DataShareContract {
            address,
            created_at,
            expires_at: created_at.saturating_add(terms.contract_lifetime),
            deploy_gas: gas,
            escrow: Escrow {
                payment: terms.payment,
                requester_deposit: terms.requester_deposit,
                gas_allowance: terms.gas_money,
                provider_deposit: Wei::ZERO,
            },
            state: ContractState::Deployed,
            delivered_bundle: None,
            active_vote: None,
            breach_history: Vec::new(),
            dispatch_gas_spent: Wei::ZERO,
            sealed,
        };
        contract.emit(
            ledger,
            EventKind::NotifyProvider,
            vec![
                ("escrow", requester_payment.to_string()),
                ("provider", contract.provider().to_string()),
                ("requester", requester.to_string()),
                ("terms", contract.sealed.terms_digest().to_string()),
            ],
        )?;
        self.contracts.insert(address, contract);
        Ok(address)
    }

    /// Starts a breach vote. An explicit compensation must fit the remaining
    /// deposits; the default one is capped to them.
    pub fn raise_breach(
        &mut self,
        ledger: &mut Ledger,
        congress: &mut CongressFactory,
        contract: Address,
        accuser: Address,
        description: &str,
        compensation: Option<Wei>,
    ) -> Result<Address> {
        let c = self.contract_mut(contract)?;
        c.ensure_open()?;
        let terms = c.sealed.terms();
        let violator = terms.counterparty(accuser).ok_or(DataShareError::NotParty(accuser))?;
        if c.active_vote.is_some() {
            return Err(DataShareError::VoteInProgress);
        }
        let pool = c.escrow.deposit_pool();
        let compensation = compensation.unwrap_or_else(|| terms.default_compensation.min(pool));
        let vote = congress.spawn_vote(
            ledger,
            VoteRequest {
                parent: contract,
                accuser,
                violator,
                arbiters: terms.voter_list.clone(),
                voting_time: terms.voting_time,
                compensation,
                description: description.to_string(),
                available_escrow: pool,
            },
        )?;
        c.active_vote = Some(vote);
        c.breach_history.push(BreachRecord {
            vote,
            accuser,
            description: description.to_string(),
            compensation,
            decision: None,
            payout: Wei::ZERO,
        });
        c.emit(
            ledger,
            EventKind::BreachRaised,
            vec![
                ("accuser", accuser.to_string()),
                ("compensation", compensation.to_string()),
                ("description", description.to_string()),
                ("vote", vote.to_string()),
            ],
        )?;
        Ok(vote)
    }

    /// Tallies a vote using the quorum and margin of its parent's terms.
    pub fn tally_vote(
        &self,
        ledger: &mut Ledger,
        congress: &mut CongressFactory,
        vote: Address,
        caller: Address,
    ) -> Result<Decision> {
        let parent = congress.vote(vote)?.parent;
        let terms = self.contract(parent)?.sealed.terms();
        Ok(congress.tally(ledger, vote, caller, terms.quorum, terms.voting_margin)?)
    }

    pub fn execute_vote(
        &mut self,
        ledger: &mut Ledger,
        congress: &mut CongressFactory,
        vote: Address,
        caller: Address,
    ) -> Result<crate::congress::Execution> {
        let parent = congress.vote(vote)?.parent;
        let c = self.contract_mut(parent)?;
        let exec = congress.execute_decision(ledger, vote, c, caller)?;
        c.record_payout(vote, exec.payout);
        if exec.decision.is_breach() && c.escrow.total().is_zero() {
            c.close(ledger, CloseReason::PenaltyExecuted)?;
        }
        Ok(exec)
    }
}

/// Off-ledger evidence of a disclosure-policy breach, recorded on the log so
/// arbiters can see it.
pub fn report_policy_violation(
    ledger: &mut Ledger,
    reporter: Address,
    contract: Address,
    detail: &str,
) -> Result<(), LedgerError> {
    ledger.append_event(
        reporter,
        EventKind::PolicyViolation,
        payload([("contract", contract.to_string()), ("detail", detail.to_string())]),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::congress::{Ballot, Outcome};
    use crate::ledger::{GasPolicy, Role};
    use crate::negotiation::{accept, propose, AgreementTerms, Margin};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn deploy_gas_model() {
        assert_eq!(datashare_deploy_gas(1), Gas(1_549_929));
        assert_eq!(datashare_deploy_gas(5), Gas(1_636_961));
        assert_eq!(datashare_deploy_gas(10), Gas(1_745_750));
        assert_eq!(datashare_deploy_gas(3), Gas(1_593_445));
        for v in 1..=10 {
            let exact = 1_549_929.0 + (v as f64 - 1.0) * 195_821.0 / 9.0;
            assert!((datashare_deploy_gas(v).0 as f64 - exact).abs() <= 0.5);
        }
    }

    #[test]
    fn breakdown_sums() {
        let b = DepositBreakdown::new(Wei(100), Wei(50), Wei(10)).unwrap();
        assert_eq!(b.total, Wei(160));
        assert!(DepositBreakdown::new(Wei(u128::MAX), Wei(1), Wei(0)).is_err());
    }

    #[test]
    fn transitions() {
        use ContractState::*;
        assert!(Deployed.may_become(ProviderBound));
        assert!(!Deployed.may_become(LinkDelivered));
        assert!(Retrieved.may_become(Closed(CloseReason::Expired)));
        assert!(!Closed(CloseReason::Expired).may_become(Deployed));
        assert!(!Retrieved.may_become(LinkDelivered));
    }

    pub(crate) struct World {
        pub ledger: Ledger,
        pub factory: ContractFactory,
        pub congress: CongressFactory,
        pub cloud: CloudNode,
        pub dir: KeyDirectory,
        pub requester: Address,
        pub provider: Address,
        pub rk: KeyPair,
        pub pk: KeyPair,
        pub arbiters: Vec<Address>,
    }

    pub(crate) fn world(payment: u128, deposit: u128, gas_money: u128) -> (World, SealedTerms) {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut ledger = Ledger::new(GasPolicy::default()).unwrap();
        let op = ledger.create_account(Wei(100_000_000), Role::Operator);
        let factory = ContractFactory::deploy(&mut ledger, op).unwrap();
        let congress = CongressFactory::deploy(&mut ledger, op).unwrap();
        let cloud = CloudNode::new(&mut ledger, 9);
        let requester = ledger.create_account(Wei(10_000_000), Role::Requester);
        let provider = ledger.create_account(Wei(10_000_000), Role::Provider);
        let arbiters: Vec<_> = (0..3).map(|_| ledger.create_account(Wei(1_000_000), Role::Arbiter)).collect();
        let rk = KeyPair::generate(&mut rng);
        let pk = KeyPair::generate(&mut rng);
        let mut dir = KeyDirectory::new();
        dir.insert(requester, rk.public());
        dir.insert(provider, pk.public());
        let terms = AgreementTerms {
            requester_name: "req".into(),
            requester_address: requester,
            provider_name: "prov".into(),
            provider_address: provider,
            payment: Wei(payment),
            requester_deposit: Wei(deposit),
            provider_deposit: Wei(deposit),
            gas_money: Wei(gas_money),
            breach_condition: "no disclosure".into(),
            voter_list: arbiters.clone(),
            quorum: 2,
            voting_time: 3600,
            voting_margin: Margin::from_fraction(0.5),
            contract_lifetime: 86_400,
            default_compensation: Wei(2 * deposit),
        };
        let packet = propose(requester, &rk, terms).unwrap();
        let sealed = accept(provider, &pk, &dir, &packet).unwrap();
        (World { ledger, factory, congress, cloud, dir, requester, provider, rk, pk, arbiters }, sealed)
    }

    fn check_escrow(w: &World, c: Address) {
        let k = w.factory.contract(c).unwrap();
        assert_eq!(k.escrow().total(), w.ledger.balance(c).unwrap());
    }

    #[test]
    fn create_checks_total() {
        let (mut w, sealed) = world(100, 50, 10);
        assert_eq!(
            w.factory.create(&mut w.ledger, &w.dir, sealed.clone(), Wei(159)).unwrap_err().code(),
            "InsufficientDeposit"
        );
        let c = w.factory.create(&mut w.ledger, &w.dir, sealed, Wei(160)).unwrap();
        assert_eq!(w.ledger.balance(c).unwrap(), Wei(160));
        assert_eq!(w.factory.contract(c).unwrap().state(), ContractState::Deployed);
        let (mut w, sealed) = world(0, 50, 10);
        w.factory.create(&mut w.ledger, &w.dir, sealed, Wei(60)).unwrap();
    }

    #[test]
    fn happy_path() {
        let (mut w, sealed) = world(1_000_000, 500_000, 240_000);
        let supply = w.ledger.total_supply();
        let r0 = w.ledger.balance(w.requester).unwrap();
        let p0 = w.ledger.balance(w.provider).unwrap();
        let c = w.factory.create(&mut w.ledger, &w.dir, sealed, Wei(1_740_000)).unwrap();
        let k = w.factory.contract_mut(c).unwrap();
        assert_eq!(k.provider_deposit(&mut w.ledger, w.provider, Wei(499_999)).unwrap_err().code(), "WrongAmount");
        k.provider_deposit(&mut w.ledger, w.provider, Wei(500_000)).unwrap();
        assert_eq!(k.provider_deposit(&mut w.ledger, w.provider, Wei(500_000)).unwrap_err().code(), "WrongState");
        w.cloud.register_provider(&mut w.ledger, "prov", w.provider).unwrap();
        let h = w.cloud.store_data(&mut w.ledger, w.provider, b"rows").unwrap();
        let (link, bundle) = w.cloud.prepare_link(&mut w.ledger, w.provider, h, &w.rk.public(), &w.pk).unwrap();
        let k = w.factory.contract_mut(c).unwrap();
        assert_eq!(k.deliver_link(&mut w.ledger, w.requester, &bundle).unwrap_err().code(), "NotProvider");
        k.deliver_link(&mut w.ledger, w.provider, &bundle).unwrap();
        assert_eq!(k.confirm_retrieval(&mut w.ledger, &w.cloud, w.requester).unwrap_err().code(), "LinkNotConsumed");
        w.cloud.fetch(&mut w.ledger, &link.link_id).unwrap();
        let k = w.factory.contract_mut(c).unwrap();
        k.confirm_retrieval(&mut w.ledger, &w.cloud, w.requester).unwrap();
        assert_eq!(k.confirm_retrieval(&mut w.ledger, &w.cloud, w.requester).unwrap_err().code(), "WrongState");
        let rs = destroy_consent(&w.rk, c);
        let ps = destroy_consent(&w.pk, c);
        assert_eq!(k.mutual_destroy(&mut w.ledger, &w.dir, Some(&rs), None).unwrap_err().code(), "MissingSignature");
        k.mutual_destroy(&mut w.ledger, &w.dir, Some(&rs), Some(&ps)).unwrap();
        assert_eq!(k.state(), ContractState::Closed(CloseReason::MutualDestroy));
        assert_eq!(w.ledger.balance(c).unwrap(), Wei::ZERO);
        assert_eq!(w.ledger.total_supply(), supply);
        let r1 = w.ledger.balance(w.requester).unwrap();
        let p1 = w.ledger.balance(w.provider).unwrap();
        assert_eq!(r0.0 - r1.0, 2_686_445);
        assert_eq!(p1.0 - p0.0, 940_000);
        assert_eq!(k.expire(&mut w.ledger, None).unwrap_err().code(), "AlreadyClosed");
    }

    #[test]
    fn breach_and_expire() {
        let (mut w, sealed) = world(1_000, 500, 100_000);
        let c = w.factory.create(&mut w.ledger, &w.dir, sealed, Wei(101_500)).unwrap();
        w.factory.contract_mut(c).unwrap().provider_deposit(&mut w.ledger, w.provider, Wei(500)).unwrap();
        let third = w.arbiters[0];
        assert_eq!(
            w.factory.raise_breach(&mut w.ledger, &mut w.congress, c, third, "x", None).unwrap_err().code(),
            "NotParty"
        );
        let v = w.factory.raise_breach(&mut w.ledger, &mut w.congress, c, w.requester, "no data", None).unwrap();
        assert_eq!(
            w.factory.raise_breach(&mut w.ledger, &mut w.congress, c, w.provider, "y", None).unwrap_err().code(),
            "VoteInProgress"
        );
        for (a, b) in w.arbiters.clone().into_iter().zip([Ballot::Yes, Ballot::Yes, Ballot::No]) {
            w.congress.cast_vote(&mut w.ledger, v, a, b).unwrap();
        }
        w.ledger.advance_time(3600);
        let d = w.factory.tally_vote(&mut w.ledger, &mut w.congress, v, w.requester).unwrap();
        assert_eq!(d.outcome, Outcome::BreachConfirmed { violator: w.provider });
        let before = w.ledger.balance(w.requester).unwrap();
        let e = w.factory.execute_vote(&mut w.ledger, &mut w.congress, v, w.requester).unwrap();
        assert_eq!(e.payout, Wei(1_000));
        assert_eq!(w.ledger.balance(w.requester).unwrap().0, before.0 + 1_000 - 30_000);
        assert!(!w.ledger.is_live_contract(v));
        check_escrow(&w, c);
        let k = w.factory.contract_mut(c).unwrap();
        assert_eq!(k.state(), ContractState::ProviderBound);
        assert_eq!(k.expire(&mut w.ledger, None).unwrap_err().code(), "NotYetExpired");
        w.ledger.advance_time(86_400);
        k.expire(&mut w.ledger, Some(&mut w.cloud)).unwrap();
        assert_eq!(k.state(), ContractState::Closed(CloseReason::Expired));
        assert_eq!(w.ledger.balance(c).unwrap(), Wei::ZERO);
    }
}
