//! Executes a scenario step by step and builds the run report.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::latency::{DeployKind, LatencyModel};
use super::{Action, Assertion, Scenario, ScenarioError, Section, Step, TermsPatch, TermsSpec};
use crate::cloudnode::{CloudError, CloudNode, HandleId, LinkId};
use crate::congress::{CongressError, CongressFactory};
use crate::cryptopipe::{self, Digest, EnvelopeBundle, KeyPair, PipelineError};
use crate::datashare::{destroy_consent, report_policy_violation, ContractFactory, DataShareError, DepositBreakdown};
use crate::ledger::{
    Address, ContractKind, EventKind, EventRecord, GasPolicy, Ledger, LedgerError, LogFilter, Role, Wei,
};
use crate::negotiation::{self, default_gas_money, AgreementTerms, KeyDirectory, NegotiationError, SealedTerms};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccountReport {
    pub address: Address,
    pub role: Role,
    pub initial: Wei,
    #[serde(rename = "final")]
    pub final_balance: Wei,
    pub delta: i128,
    /// Gas fees this account paid, in wei.
    pub gas_paid: Wei,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContractReport {
    pub address: Address,
    pub kind: ContractKind,
    pub deploy_gas: u64,
    /// Gas fees the contract paid from its own escrow, in wei.
    pub gas_paid: Wei,
    pub live: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencySample {
    pub label: String,
    pub kind: DeployKind,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssertionResult {
    pub step: usize,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepResult {
    pub step: usize,
    pub op: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub accounts: BTreeMap<String, AccountReport>,
    pub miner: Wei,
    pub initial_supply: Wei,
    pub final_supply: Wei,
    pub event_count: usize,
    pub head_hash: Digest,
    pub contracts: BTreeMap<String, ContractReport>,
    pub latency: Vec<LatencySample>,
    pub assertions: Vec<AssertionResult>,
    pub steps: Vec<StepResult>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub ledger: Ledger,
    pub cloud: CloudNode,
}

/// Runs `scenario` on a fresh ledger. `Err` means the scenario itself is
/// malformed; step failures and failed assertions are recorded in the report.
pub fn run(scenario: &Scenario, seed_override: Option<u64>) -> Result<RunOutcome, ScenarioError> {
    let seed = seed_override.unwrap_or(scenario.seed);
    let mut r = Runner::new(scenario, seed)?;
    let mut failure = None;
    for (i, step) in scenario.steps.iter().enumerate() {
        let op = step.action.op();
        let result = r.step(i, step);
        let outcome = match (result, &step.expect_error) {
            (Ok(()), None) => "ok".to_string(),
            (Ok(()), Some(want)) => {
                failure = Some(format!("step {i} ({op}): expected error {want}, but it succeeded"));
                "ok".to_string()
            }
            (Err(Fail::Input(e)), _) => return Err(e),
            (Err(Fail::Op { code, .. }), Some(want)) if code == *want => format!("error:{code}"),
            (Err(Fail::Op { code, message }), want) => {
                failure = Some(match want {
                    Some(w) => format!("step {i} ({op}): expected error {w}, got {code}: {message}"),
                    None => format!("step {i} ({op}): {code}: {message}"),
                });
                format!("error:{code}")
            }
        };
        r.steps.push(StepResult { step: i, op: op.to_string(), outcome });
        if failure.is_some() {
            break;
        }
    }
    let report = r.report(seed, failure);
    Ok(RunOutcome { report, ledger: r.ledger, cloud: r.cloud })
}

enum Fail {
    Input(ScenarioError),
    Op { code: String, message: String },
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for Fail {
            fn from(e: $t) -> Self {
                Fail::Op { code: e.code().to_string(), message: e.to_string() }
            }
        }
    )*};
}
coded!(DataShareError, CongressError, CloudError, LedgerError, NegotiationError, PipelineError);

fn op_fail(code: &str, message: impl Into<String>) -> Fail {
    Fail::Op { code: code.to_string(), message: message.into() }
}

struct BundleInfo {
    bundle: EnvelopeBundle,
    contract: Address,
}

struct Runner<'a> {
    sc: &'a Scenario,
    ledger: Ledger,
    cloud: CloudNode,
    latency: LatencyModel,
    names: BTreeMap<String, Address>,
    keys: BTreeMap<Address, KeyPair>,
    dir: KeyDirectory,
    initial: BTreeMap<Address, Wei>,
    initial_supply: Wei,
    factory: Option<ContractFactory>,
    congress: Option<CongressFactory>,
    deployed: BTreeMap<String, Address>,
    handles: BTreeMap<String, HandleId>,
    terms: BTreeMap<String, SealedTerms>,
    contracts: BTreeMap<String, Address>,
    bundles: BTreeMap<String, BundleInfo>,
    votes: BTreeMap<String, Address>,
    last_fetch: Option<String>,
    samples: Vec<LatencySample>,
    assertions: Vec<AssertionResult>,
    steps: Vec<StepResult>,
    step_index: usize,
    op: &'static str,
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<'a> Runner<'a> {
    fn new(sc: &'a Scenario, seed: u64) -> Result<Self, ScenarioError> {
        let mut ledger = Ledger::new(sc.gas_policy)
            .map_err(|e| ScenarioError::Parse { locus: "gas_policy".into(), message: e.to_string() })?;
        let cloud = CloudNode::new(&mut ledger, stream(seed, 2).next_u64());
        let mut key_rng = stream(seed, 1);
        let mut names = BTreeMap::new();
        let mut keys = BTreeMap::new();
        let mut dir = KeyDirectory::new();
        let mut initial = BTreeMap::new();
        for a in &sc.accounts {
            if names.contains_key(&a.name) {
                return Err(ScenarioError::Parse {
                    locus: format!("account {:?}", a.name),
                    message: "duplicate account name".into(),
                });
            }
            let addr = ledger.create_account(a.balance, a.role);
            let kp = KeyPair::generate(&mut key_rng);
            dir.insert(addr, kp.public());
            keys.insert(addr, kp);
            names.insert(a.name.clone(), addr);
            initial.insert(addr, a.balance);
        }
        let initial_supply = ledger.total_supply();
        Ok(Runner {
            sc,
            ledger,
            cloud,
            latency: LatencyModel::from_rng(stream(seed, 3)),
            names,
            keys,
            dir,
            initial,
            initial_supply,
            factory: None,
            congress: None,
            deployed: BTreeMap::new(),
            handles: BTreeMap::new(),
            terms: BTreeMap::new(),
            contracts: BTreeMap::new(),
            bundles: BTreeMap::new(),
            votes: BTreeMap::new(),
            last_fetch: None,
            samples: Vec::new(),
            assertions: Vec::new(),
            steps: Vec::new(),
            step_index: 0,
            op: "",
        })
    }

    fn unknown(&self, what: &'static str, name: &str) -> Fail {
        Fail::Input(ScenarioError::Reference {
            step: self.step_index,
            op: self.op.to_string(),
            what,
            name: name.to_string(),
        })
    }

    fn account(&self, name: &str) -> Result<Address, Fail> {
        self.names.get(name).copied().ok_or_else(|| self.unknown("account", name))
    }

    fn contract_addr(&self, name: &str) -> Result<Address, Fail> {
        self.contracts.get(name).copied().ok_or_else(|| self.unknown("contract", name))
    }

    fn vote_addr(&self, name: &str) -> Result<Address, Fail> {
        self.votes.get(name).copied().ok_or_else(|| self.unknown("vote", name))
    }

    fn keys_of(&self, addr: Address) -> &KeyPair {
        self.keys.get(&addr).expect("every named account has keys")
    }

    fn factory(&mut self) -> Result<&mut ContractFactory, Fail> {
        self.factory.as_mut().ok_or_else(|| op_fail("NoFactory", "factories have not been deployed"))
    }

    fn sample(&mut self, label: &str, kind: DeployKind) {
        let seconds = self.latency.sample(kind);
        self.samples.push(LatencySample { label: label.to_string(), kind, seconds });
    }

    fn build_terms(&self, requester: &str, provider: &str, spec: &TermsSpec) -> Result<AgreementTerms, Fail> {
        let voter_list = spec.voters.iter().map(|v| self.account(v)).collect::<Result<Vec<_>, _>>()?;
        let pool = spec.requester_deposit.0.saturating_add(spec.provider_deposit.0);
        Ok(AgreementTerms {
            requester_name: requester.to_string(),
            requester_address: self.account(requester)?,
            provider_name: provider.to_string(),
            provider_address: self.account(provider)?,
            payment: spec.payment,
            requester_deposit: spec.requester_deposit,
            provider_deposit: spec.provider_deposit,
            gas_money: spec.gas_money.unwrap_or_else(|| default_gas_money(self.ledger.policy())),
            breach_condition: spec.breach_condition.clone(),
            voter_list,
            quorum: spec.quorum,
            voting_time: spec.voting_time,
            voting_margin: spec.voting_margin,
            contract_lifetime: spec.contract_lifetime,
            default_compensation: spec.default_compensation.unwrap_or(Wei(pool)),
        })
    }

    fn step(&mut self, index: usize, step: &Step) -> Result<(), Fail> {
        self.step_index = index;
        self.op = step.action.op();
        match &step.action {
            Action::DeployFactories { operator } => {
                let op = self.account(operator)?;
                let f = ContractFactory::deploy(&mut self.ledger, op)?;
                self.deployed.insert("contract_factory".into(), f.address());
                self.factory = Some(f);
                self.sample("contract_factory", DeployKind::DataShare);
                let c = CongressFactory::deploy(&mut self.ledger, op)?;
                self.deployed.insert("congress_factory".into(), c.address());
                self.congress = Some(c);
                self.sample("congress_factory", DeployKind::Congress);
            }
            Action::Deploy { owner, kind, gas, gas_limit, label } => {
                let owner = self.account(owner)?;
                let gas = crate::ledger::Gas(*gas);
                let limit = gas_limit.map(crate::ledger::Gas).unwrap_or(gas);
                let addr = self.ledger.deploy_contract(owner, *kind, gas, limit)?;
                let label = label.clone().unwrap_or_else(|| format!("deploy_{index}"));
                let lk = match kind {
                    ContractKind::CongressFactory | ContractKind::Vote => DeployKind::Congress,
                    _ => DeployKind::DataShare,
                };
                self.sample(&label, lk);
                self.deployed.insert(label, addr);
            }
            Action::Register { provider, name } => {
                let addr = self.account(provider)?;
                let name = name.clone().unwrap_or_else(|| provider.clone());
                self.cloud.register_provider(&mut self.ledger, &name, addr)?;
            }
            Action::Store { provider, data, label } => {
                let addr = self.account(provider)?;
                let bytes = self.sc.data.get(data).ok_or_else(|| self.unknown("data", data))?;
                let h = self.cloud.store_data(&mut self.ledger, addr, bytes)?;
                self.handles.insert(label.clone(), h);
            }
            Action::Negotiate { requester, provider, terms, counters, label } => {
                let t = self.build_terms(requester, provider, terms)?;
                let (ra, pa) = (t.requester_address, t.provider_address);
                let mut packet = negotiation::propose(ra, self.keys_of(ra), t)?;
                for patch in counters {
                    let responder = if packet.sender == ra { pa } else { ra };
                    let modified = apply_patch(&packet.terms, patch);
                    packet = negotiation::counter(responder, self.keys_of(responder), &self.dir, &packet, modified)?;
                }
                let acceptor = if packet.sender == ra { pa } else { ra };
                let sealed = negotiation::accept(acceptor, self.keys_of(acceptor), &self.dir, &packet)?;
                self.terms.insert(label.clone(), sealed);
            }
            Action::CreateContract { terms, payment, label } => {
                let sealed = self.terms.get(terms).ok_or_else(|| self.unknown("terms", terms))?.clone();
                let payment = match payment {
                    Some(p) => *p,
                    None => DepositBreakdown::for_terms(&sealed)?.total,
                };
                let (ledger, dir) = (&mut self.ledger, &self.dir);
                let f =
                    self.factory.as_mut().ok_or_else(|| op_fail("NoFactory", "factories have not been deployed"))?;
                let addr = f.create(ledger, dir, sealed, payment)?;
                self.contracts.insert(label.clone(), addr);
                self.sample(label, DeployKind::DataShare);
            }
            Action::ProviderDeposit { contract, amount, by } => {
                let addr = self.contract_addr(contract)?;
                let c = self.factory()?.contract(addr)?;
                let provider = c.provider();
                let amount = amount.unwrap_or(c.sealed_terms().terms().provider_deposit);
                let by = match by {
                    Some(n) => self.account(n)?,
                    None => provider,
                };
                let ledger = &mut self.ledger;
                self.factory.as_mut().expect("checked").contract_mut(addr)?.provider_deposit(ledger, by, amount)?;
            }
            Action::Deliver { contract, handle, by, label } => {
                let addr = self.contract_addr(contract)?;
                let h = *self.handles.get(handle).ok_or_else(|| self.unknown("handle", handle))?;
                let c = self.factory()?.contract(addr)?;
                let (provider, requester) = (c.provider(), c.requester());
                let by = match by {
                    Some(n) => self.account(n)?,
                    None => provider,
                };
                self.factory()?;
                self.factory.as_ref().expect("checked").contract(addr)?.check_deliver(&self.ledger, by)?;
                let requester_pub = self.keys_of(requester).public();
                let (_, bundle) = self.cloud.prepare_link(
                    &mut self.ledger,
                    by,
                    h,
                    &requester_pub,
                    self.keys.get(&by).expect("named"),
                )?;
                let ledger = &mut self.ledger;
                self.factory.as_mut().expect("checked").contract_mut(addr)?.deliver_link(ledger, by, &bundle)?;
                self.bundles.insert(label.clone(), BundleInfo { bundle, contract: addr });
            }
            Action::Fetch { bundle, by, tamper, expect_data } => {
                let info = self.bundles.get(bundle).ok_or_else(|| self.unknown("bundle", bundle))?;
                let contract = info.contract;
                let mut b = info.bundle.clone();
                let (requester, provider) = {
                    let c = self.factory()?.contract(contract)?;
                    (c.requester(), c.provider())
                };
                let by = match by {
                    Some(n) => self.account(n)?,
                    None => requester,
                };
                let expected = match expect_data {
                    Some(d) => Some(self.sc.data.get(d).ok_or_else(|| self.unknown("data", d))?.clone()),
                    None => None,
                };
                let in_transit = |b: &mut EnvelopeBundle, t: &super::Tamper| match t.section {
                    Section::WrappedKey => flip(&mut b.wrapped_key, t),
                    Section::EncLink => flip(&mut b.enc_link, t),
                    Section::DataCt => flip(&mut b.data_ct, t),
                    Section::StoredDigest => flip(&mut b.stored_digest, t),
                };
                if let Some(t) = tamper {
                    if matches!(t.section, Section::WrappedKey | Section::EncLink) {
                        in_transit(&mut b, t);
                    }
                }
                let keys = self.keys_of(by).clone();
                let link = match cryptopipe::decrypt_link(&b.enc_link, &keys) {
                    Ok(raw) => raw,
                    Err(e) => {
                        self.last_fetch = Some(e.code().to_string());
                        return Ok(());
                    }
                };
                let link: [u8; 16] =
                    link.try_into().map_err(|_| op_fail("LinkDecryptFailure", "link id has the wrong length"))?;
                let fetched = self.cloud.fetch(&mut self.ledger, &LinkId(link))?;
                b.data_ct = fetched.data_ct;
                b.stored_digest = fetched.stored_digest;
                if let Some(t) = tamper {
                    if matches!(t.section, Section::DataCt | Section::StoredDigest) {
                        in_transit(&mut b, t);
                    }
                }
                let provider_pub = self.keys_of(provider).public();
                self.last_fetch = Some(match cryptopipe::open_pipeline(&b, &keys, &provider_pub) {
                    Ok(data) if expected.as_ref().is_some_and(|e| *e != data) => "ContentMismatch".into(),
                    Ok(_) => "Ok".into(),
                    Err(e) => e.code().to_string(),
                });
            }
            Action::Confirm { contract, by } => {
                let addr = self.contract_addr(contract)?;
                let requester = self.factory()?.contract(addr)?.requester();
                let by = match by {
                    Some(n) => self.account(n)?,
                    None => requester,
                };
                let (ledger, cloud) = (&mut self.ledger, &self.cloud);
                self.factory.as_mut().expect("checked").contract_mut(addr)?.confirm_retrieval(ledger, cloud, by)?;
            }
            Action::AdvanceTime { seconds } => {
                self.ledger.advance_time(*seconds);
            }
            Action::RaiseBreach { contract, accuser, description, compensation, label } => {
                let addr = self.contract_addr(contract)?;
                let accuser = self.account(accuser)?;
                let ledger = &mut self.ledger;
                let (f, c) = match (self.factory.as_mut(), self.congress.as_mut()) {
                    (Some(f), Some(c)) => (f, c),
                    _ => return Err(op_fail("NoFactory", "factories have not been deployed")),
                };
                let vote = f.raise_breach(ledger, c, addr, accuser, description, *compensation)?;
                self.votes.insert(label.clone(), vote);
                self.sample(label, DeployKind::Congress);
            }
            Action::CastVote { vote, arbiter, ballot } => {
                let v = self.vote_addr(vote)?;
                let a = self.account(arbiter)?;
                let ledger = &mut self.ledger;
                let (_, c) = match (self.factory.as_mut(), self.congress.as_mut()) {
                    (Some(f), Some(c)) => (f, c),
                    _ => return Err(op_fail("NoFactory", "factories have not been deployed")),
                };
                c.cast_vote(ledger, v, a, *ballot)?;
            }
            Action::Tally { vote, caller } => {
                let v = self.vote_addr(vote)?;
                let a = self.account(caller)?;
                let ledger = &mut self.ledger;
                let (f, c) = match (self.factory.as_mut(), self.congress.as_mut()) {
                    (Some(f), Some(c)) => (f, c),
                    _ => return Err(op_fail("NoFactory", "factories have not been deployed")),
                };
                f.tally_vote(ledger, c, v, a)?;
            }
            Action::Execute { vote, caller } => {
                let v = self.vote_addr(vote)?;
                let a = self.account(caller)?;
                let ledger = &mut self.ledger;
                let (f, c) = match (self.factory.as_mut(), self.congress.as_mut()) {
                    (Some(f), Some(c)) => (f, c),
                    _ => return Err(op_fail("NoFactory", "factories have not been deployed")),
                };
                f.execute_vote(ledger, c, v, a)?;
            }
            Action::MutualDestroy { contract, signers } => {
                let addr = self.contract_addr(contract)?;
                let c = self.factory()?.contract(addr)?;
                let (requester, provider) = (c.requester(), c.provider());
                let signers: Vec<Address> = match signers {
                    Some(list) => list.iter().map(|n| self.account(n)).collect::<Result<_, _>>()?,
                    None => vec![requester, provider],
                };
                let sig_of = |who: Address| signers.contains(&who).then(|| destroy_consent(self.keys_of(who), addr));
                let (rs, ps) = (sig_of(requester), sig_of(provider));
                let (ledger, dir) = (&mut self.ledger, &self.dir);
                self.factory.as_mut().expect("checked").contract_mut(addr)?.mutual_destroy(
                    ledger,
                    dir,
                    rs.as_ref(),
                    ps.as_ref(),
                )?;
            }
            Action::Expire { contract } => {
                let addr = self.contract_addr(contract)?;
                let (ledger, cloud) = (&mut self.ledger, &mut self.cloud);
                let f =
                    self.factory.as_mut().ok_or_else(|| op_fail("NoFactory", "factories have not been deployed"))?;
                f.contract_mut(addr)?.expire(ledger, Some(cloud))?;
            }
            Action::PolicyViolation { reporter, contract, detail } => {
                let who = self.account(reporter)?;
                let addr = self.contract_addr(contract)?;
                report_policy_violation(&mut self.ledger, who, addr, detail)?;
            }
            Action::Transfer { from, to, amount } => {
                let (from, to) = (self.account(from)?, self.account(to)?);
                self.ledger.transfer(from, to, *amount)?;
            }
            Action::Assert(a) => {
                let (passed, detail) = self.check(a)?;
                self.assertions.push(AssertionResult {
                    step: index,
                    check: a.check_name().to_string(),
                    passed,
                    detail: detail.clone(),
                });
                if !passed {
                    return Err(op_fail("AssertionFailed", format!("{}: {detail}", a.check_name())));
                }
            }
        }
        Ok(())
    }

    fn check(&self, a: &Assertion) -> Result<(bool, String), Fail> {
        fn cmp<T: PartialEq + std::fmt::Display>(want: T, got: T) -> (bool, String) {
            (want == got, format!("expected {want}, got {got}"))
        }
        Ok(match a {
            Assertion::Balance { account, equals } => {
                let addr = self.account(account)?;
                cmp(*equals, self.ledger.balance(addr)?)
            }
            Assertion::BalanceDelta { account, equals } => {
                let addr = self.account(account)?;
                cmp(*equals as i128, delta(self.initial[&addr], self.ledger.balance(addr)?))
            }
            Assertion::ContractState { contract, equals } => {
                let addr = self.contract_addr(contract)?;
                let got = self.factory.as_ref().expect("contract exists").contract(addr)?.state().label();
                cmp(equals.clone(), got)
            }
            Assertion::Escrow { contract, requester, provider, total } => {
                let addr = self.contract_addr(contract)?;
                let e = self.factory.as_ref().expect("contract exists").contract(addr)?.escrow();
                let mut ok = true;
                let mut parts = Vec::new();
                for (name, want, got) in [
                    ("requester", requester, e.requester_escrow()),
                    ("provider", provider, e.provider_escrow()),
                    ("total", total, e.total()),
                ] {
                    if let Some(w) = want {
                        ok &= *w == got;
                        parts.push(format!("{name} expected {w}, got {got}"));
                    }
                }
                let bal = self.ledger.balance(addr)?;
                ok &= bal == e.total();
                parts.push(format!("ledger balance {bal}"));
                (ok, parts.join("; "))
            }
            Assertion::LinkState { bundle, equals } => {
                let info = self.bundles.get(bundle).ok_or_else(|| self.unknown("bundle", bundle))?;
                let got = self.cloud.link_state_by_bundle(&info.bundle.digest());
                (got == Some(*equals), format!("expected {equals:?}, got {got:?}"))
            }
            Assertion::Decision { vote, equals, yes, no } => {
                let v = self.vote_addr(vote)?;
                let vc = self.congress.as_ref().expect("vote exists").vote(v)?;
                match vc.decision() {
                    None => (false, "vote has not been tallied".into()),
                    Some(d) => {
                        let ok = d.label() == equals
                            && yes.is_none_or(|y| y == d.yes_count)
                            && no.is_none_or(|n| n == d.no_count);
                        (ok, format!("expected {equals}, got {} ({} yes, {} no)", d.label(), d.yes_count, d.no_count))
                    }
                }
            }
            Assertion::Payout { vote, equals } => {
                let v = self.vote_addr(vote)?;
                let parent = self.congress.as_ref().expect("vote exists").vote(v)?.parent;
                let c = self.factory.as_ref().expect("vote exists").contract(parent)?;
                let got = c.breach_history().iter().find(|r| r.vote == v).map_or(Wei::ZERO, |r| r.payout);
                cmp(*equals, got)
            }
            Assertion::LastFetch { equals } => {
                let got = self.last_fetch.clone().unwrap_or_else(|| "none".into());
                cmp(equals.clone(), got)
            }
            Assertion::Conservation {} => cmp(self.initial_supply, self.ledger.total_supply()),
            Assertion::EventCount { kind, equals } => {
                cmp(*equals, self.ledger.query_log(&LogFilter::kind(*kind)).len())
            }
            Assertion::Live { contract, equals } => {
                let addr = self
                    .contracts
                    .get(contract)
                    .or_else(|| self.votes.get(contract))
                    .or_else(|| self.deployed.get(contract))
                    .copied()
                    .ok_or_else(|| self.unknown("contract", contract))?;
                cmp(*equals, self.ledger.is_live_contract(addr))
            }
        })
    }

    fn report(&self, seed: u64, failure: Option<String>) -> RunReport {
        let policy = *self.ledger.policy();
        let paid = gas_paid(self.ledger.log(), &policy);
        let paid_by = |a: Address| paid.get(&a).copied().unwrap_or(Wei::ZERO);
        let accounts = self
            .sc
            .accounts
            .iter()
            .map(|spec| {
                let addr = self.names[&spec.name];
                let fin = self.ledger.balance(addr).expect("named account exists");
                let initial = self.initial[&addr];
                (
                    spec.name.clone(),
                    AccountReport {
                        address: addr,
                        role: spec.role,
                        initial,
                        final_balance: fin,
                        delta: delta(initial, fin),
                        gas_paid: paid_by(addr),
                    },
                )
            })
            .collect();

        let mut contracts = BTreeMap::new();
        let mut add = |label: &str, addr: Address, state: Option<String>, decision: Option<String>| {
            if let Ok(info) = self.ledger.contract(addr) {
                contracts.insert(
                    label.to_string(),
                    ContractReport {
                        address: addr,
                        kind: info.kind,
                        deploy_gas: info.deploy_gas.0,
                        gas_paid: paid_by(addr),
                        live: info.live,
                        state,
                        decision,
                    },
                );
            }
        };
        for (label, addr) in &self.deployed {
            add(label, *addr, None, None);
        }
        for (label, addr) in &self.contracts {
            let state = self.factory.as_ref().and_then(|f| f.contract(*addr).ok()).map(|c| c.state().label());
            add(label, *addr, state, None);
        }
        for (label, addr) in &self.votes {
            let decision = self
                .congress
                .as_ref()
                .and_then(|c| c.vote(*addr).ok())
                .and_then(|v| v.decision())
                .map(|d| d.label().to_string());
            add(label, *addr, None, decision);
        }

        let failure = failure
            .or_else(|| self.assertions.iter().find(|a| !a.passed).map(|a| format!("step {}: {}", a.step, a.detail)));
        RunReport {
            name: self.sc.name.clone(),
            seed,
            passed: failure.is_none(),
            failure,
            accounts,
            miner: self.ledger.balance(self.ledger.miner()).expect("miner exists"),
            initial_supply: self.initial_supply,
            final_supply: self.ledger.total_supply(),
            event_count: self.ledger.log().len(),
            head_hash: self.ledger.head_hash(),
            contracts,
            latency: self.samples.clone(),
            assertions: self.assertions.clone(),
            steps: self.steps.clone(),
        }
    }
}

fn flip(section: &mut [u8], t: &super::Tamper) {
    if !section.is_empty() {
        let i = t.byte % section.len();
        section[i] ^= t.xor;
    }
}

fn delta(initial: Wei, fin: Wei) -> i128 {
    fin.0 as i128 - initial.0 as i128
}

fn apply_patch(base: &AgreementTerms, p: &TermsPatch) -> AgreementTerms {
    let mut t = base.clone();
    macro_rules! set {
        ($($f:ident),*) => {$( if let Some(v) = &p.$f { t.$f = v.clone(); } )*};
    }
    set!(
        payment,
        requester_deposit,
        provider_deposit,
        gas_money,
        breach_condition,
        quorum,
        voting_time,
        voting_margin,
        contract_lifetime,
        default_compensation
    );
    t
}

/// Gas fees per payer, read back from the event log.
pub fn gas_paid(log: &[EventRecord], policy: &GasPolicy) -> BTreeMap<Address, Wei> {
    let mut out: BTreeMap<Address, Wei> = BTreeMap::new();
    for r in log {
        let fee = match r.kind {
            EventKind::Call => r.payload.get("gas").and_then(|g| g.parse::<u128>().ok()).map(|g| g * policy.gas_price),
            EventKind::Transfer => {
                r.payload.get("gas").and_then(|g| g.parse::<u128>().ok()).map(|g| g * policy.gas_price)
            }
            EventKind::Deploy | EventKind::DeployFailed | EventKind::Gas => {
                r.payload.get("fee").and_then(|f| f.parse::<u128>().ok())
            }
            _ => None,
        };
        if let Some(fee) = fee {
            let e = out.entry(r.emitter).or_default();
            e.0 += fee;
        }
    }
    out
}
