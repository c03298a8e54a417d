//! Declarative multi-party scenarios: the JSON schema, loading, and the
//! runner that executes them against a fresh ledger.

pub mod latency;
pub mod runner;
pub mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::cloudnode::LinkState;
use crate::congress::Ballot;
use crate::ledger::{ContractKind, EventKind, GasPolicy, Role, Seconds, Wei};
use crate::negotiation::Margin;

pub use runner::{run, RunOutcome, RunReport};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at {locus}: {message}")]
    Parse { locus: String, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("step {step} ({op}): unknown {what} {name:?}")]
    Reference { step: usize, op: String, what: &'static str, name: String },
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Parse { .. } => "ParseError",
            ScenarioError::Io { .. } => "IoError",
            ScenarioError::Reference { .. } => "ParseError",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountSpec {
    pub name: String,
    pub role: Role,
    pub balance: Wei,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Inline(String),
    Hex(String),
    /// Path relative to the scenario file.
    File(PathBuf),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermsSpec {
    pub payment: Wei,
    pub requester_deposit: Wei,
    pub provider_deposit: Wei,
    /// Defaults to the standard gas allowance of the run's gas policy.
    pub gas_money: Option<Wei>,
    pub breach_condition: String,
    pub voters: Vec<String>,
    pub quorum: u64,
    pub voting_time: Seconds,
    pub voting_margin: Margin,
    pub contract_lifetime: Seconds,
    /// Defaults to both deposits.
    pub default_compensation: Option<Wei>,
}

/// Changes proposed in a counter-offer; absent fields are kept.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermsPatch {
    pub payment: Option<Wei>,
    pub requester_deposit: Option<Wei>,
    pub provider_deposit: Option<Wei>,
    pub gas_money: Option<Wei>,
    pub breach_condition: Option<String>,
    pub quorum: Option<u64>,
    pub voting_time: Option<Seconds>,
    pub voting_margin: Option<Margin>,
    pub contract_lifetime: Option<Seconds>,
    pub default_compensation: Option<Wei>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    WrappedKey,
    EncLink,
    DataCt,
    StoredDigest,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tamper {
    pub section: Section,
    /// Byte index, taken modulo the section length.
    pub byte: usize,
    #[serde(default = "default_xor")]
    pub xor: u8,
}

fn default_xor() -> u8 {
    0x01
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    DeployFactories {
        operator: String,
    },
    /// Raw contract deployment with an explicit gas figure and limit.
    Deploy {
        owner: String,
        kind: ContractKind,
        gas: u64,
        gas_limit: Option<u64>,
        #[serde(rename = "as")]
        label: Option<String>,
    },
    Register {
        provider: String,
        name: Option<String>,
    },
    Store {
        provider: String,
        data: String,
        #[serde(rename = "as")]
        label: String,
    },
    Negotiate {
        requester: String,
        provider: String,
        terms: TermsSpec,
        #[serde(default)]
        counters: Vec<TermsPatch>,
        #[serde(rename = "as")]
        label: String,
    },
    CreateContract {
        terms: String,
        payment: Option<Wei>,
        #[serde(rename = "as")]
        label: String,
    },
    ProviderDeposit {
        contract: String,
        amount: Option<Wei>,
        by: Option<String>,
    },
    Deliver {
        contract: String,
        handle: String,
        by: Option<String>,
        #[serde(rename = "as")]
        label: String,
    },
    Fetch {
        bundle: String,
        by: Option<String>,
        tamper: Option<Tamper>,
        expect_data: Option<String>,
    },
    Confirm {
        contract: String,
        by: Option<String>,
    },
    AdvanceTime {
        seconds: Seconds,
    },
    RaiseBreach {
        contract: String,
        accuser: String,
        description: String,
        compensation: Option<Wei>,
        #[serde(rename = "as")]
        label: String,
    },
    CastVote {
        vote: String,
        arbiter: String,
        ballot: Ballot,
    },
    Tally {
        vote: String,
        caller: String,
    },
    Execute {
        vote: String,
        caller: String,
    },
    MutualDestroy {
        contract: String,
        signers: Option<Vec<String>>,
    },
    Expire {
        contract: String,
    },
    PolicyViolation {
        reporter: String,
        contract: String,
        detail: String,
    },
    Transfer {
        from: String,
        to: String,
        amount: Wei,
    },
    Assert(Assertion),
}

impl Action {
    pub fn op(&self) -> &'static str {
        match self {
            Action::DeployFactories { .. } => "deploy_factories",
            Action::Deploy { .. } => "deploy",
            Action::Register { .. } => "register",
            Action::Store { .. } => "store",
            Action::Negotiate { .. } => "negotiate",
            Action::CreateContract { .. } => "create_contract",
            Action::ProviderDeposit { .. } => "provider_deposit",
            Action::Deliver { .. } => "deliver",
            Action::Fetch { .. } => "fetch",
            Action::Confirm { .. } => "confirm",
            Action::AdvanceTime { .. } => "advance_time",
            Action::RaiseBreach { .. } => "raise_breach",
            Action::CastVote { .. } => "cast_vote",
            Action::Tally { .. } => "tally",
            Action::Execute { .. } => "execute",
            Action::MutualDestroy { .. } => "mutual_destroy",
            Action::Expire { .. } => "expire",
            Action::PolicyViolation { .. } => "policy_violation",
            Action::Transfer { .. } => "transfer",
            Action::Assert(_) => "assert",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    Balance {
        account: String,
        equals: Wei,
    },
    /// Change since the account was created.
    BalanceDelta {
        account: String,
        equals: i64,
    },
    ContractState {
        contract: String,
        equals: String,
    },
    Escrow {
        contract: String,
        requester: Option<Wei>,
        provider: Option<Wei>,
        total: Option<Wei>,
    },
    LinkState {
        bundle: String,
        equals: LinkState,
    },
    Decision {
        vote: String,
        equals: String,
        yes: Option<u64>,
        no: Option<u64>,
    },
    Payout {
        vote: String,
        equals: Wei,
    },
    LastFetch {
        equals: String,
    },
    Conservation {},
    EventCount {
        kind: EventKind,
        equals: usize,
    },
    Live {
        contract: String,
        equals: bool,
    },
}

impl Assertion {
    pub fn check_name(&self) -> &'static str {
        match self {
            Assertion::Balance { .. } => "balance",
            Assertion::BalanceDelta { .. } => "balance_delta",
            Assertion::ContractState { .. } => "contract_state",
            Assertion::Escrow { .. } => "escrow",
            Assertion::LinkState { .. } => "link_state",
            Assertion::Decision { .. } => "decision",
            Assertion::Payout { .. } => "payout",
            Assertion::LastFetch { .. } => "last_fetch",
            Assertion::Conservation {} => "conservation",
            Assertion::EventCount { .. } => "event_count",
            Assertion::Live { .. } => "live",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Step {
    pub action: Action,
    /// Error code the step must fail with.
    pub expect_error: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    seed: u64,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    gas_policy: Option<GasPolicy>,
    accounts: Vec<AccountSpec>,
    #[serde(default)]
    data: BTreeMap<String, DataSpec>,
    steps: Vec<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: Option<String>,
    pub seed: u64,
    pub gas_policy: GasPolicy,
    pub accounts: Vec<AccountSpec>,
    /// Payloads with file references already resolved.
    pub data: BTreeMap<String, Vec<u8>>,
    pub steps: Vec<Step>,
}

impl Scenario {
    /// Parses a scenario; file data references resolve against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            locus: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let gas_policy = raw.gas_policy.unwrap_or_default();
        gas_policy
            .validate()
            .map_err(|e| ScenarioError::Parse { locus: "gas_policy".into(), message: e.to_string() })?;

        let mut data = BTreeMap::new();
        for (name, spec) in raw.data {
            let bytes = match spec {
                DataSpec::Inline(s) => s.into_bytes(),
                DataSpec::Hex(h) => hex::decode(&h)
                    .map_err(|e| ScenarioError::Parse { locus: format!("data {name:?}"), message: e.to_string() })?,
                DataSpec::File(p) => {
                    let path = base_dir.join(p);
                    std::fs::read(&path).map_err(|e| ScenarioError::Io { path, message: e.to_string() })?
                }
            };
            data.insert(name, bytes);
        }

        let mut steps = Vec::with_capacity(raw.steps.len());
        for (i, mut value) in raw.steps.into_iter().enumerate() {
            let locus = format!("step {i} ({})", value_op(&value));
            let expect_error = match value.as_object_mut().and_then(|m| m.remove("expect_error")) {
                None => None,
                Some(serde_json::Value::String(s)) => Some(s),
                Some(_) => return Err(ScenarioError::Parse { locus, message: "expect_error must be a string".into() }),
            };
            let action: Action =
                serde_json::from_value(value).map_err(|e| ScenarioError::Parse { locus, message: e.to_string() })?;
            steps.push(Step { action, expect_error });
        }

        Ok(Scenario {
            name: raw.name,
            description: raw.description,
            seed: raw.seed,
            gas_policy,
            accounts: raw.accounts,
            data,
            steps,
        })
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Scenario::from_json(&text, base)
    }
}

fn value_op(v: &serde_json::Value) -> String {
    v.get("op").and_then(|o| o.as_str()).unwrap_or("?").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        Scenario::from_json(text, Path::new("."))
    }

    #[test]
    fn parses_steps_and_expectations() {
        let s = parse(
            r#"{"name":"t","seed":1,
                "accounts":[{"name":"a","role":"requester","balance":10}],
                "data":{"d":{"inline":"hi"},"h":{"hex":"00ff"}},
                "steps":[
                  {"op":"advance_time","seconds":5},
                  {"op":"transfer","from":"a","to":"a","amount":1,"expect_error":"InsufficientBalance"},
                  {"op":"assert","check":"balance","account":"a","equals":10}
                ]}"#,
        )
        .unwrap();
        assert_eq!(s.data["d"], b"hi");
        assert_eq!(s.data["h"], vec![0, 255]);
        assert_eq!(s.steps.len(), 3);
        assert_eq!(s.steps[1].expect_error.as_deref(), Some("InsufficientBalance"));
        assert!(matches!(s.steps[2].action, Action::Assert(Assertion::Balance { .. })));
    }

    #[test]
    fn reports_step_locus() {
        let err = parse(
            r#"{"name":"t","seed":1,"accounts":[],
                "steps":[{"op":"advance_time","seconds":5},{"op":"advance_time","secs":5}]}"#,
        )
        .unwrap_err();
        match err {
            ScenarioError::Parse { locus, .. } => assert_eq!(locus, "step 1 (advance_time)"),
            other => panic!("{other:?}"),
        }
        let err = parse("{\n\"name\": 3}").unwrap_err();
        match err {
            ScenarioError::Parse { locus, .. } => assert!(locus.starts_with("line 2")),
            other => panic!("{other:?}"),
        }
    }
}
