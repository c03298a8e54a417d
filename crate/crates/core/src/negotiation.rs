//! Off-chain exchange of signed contract packets until both parties agree.
//!
//! A negotiation starts with [`propose`], alternates [`counter`]s between the
//! two parties, and ends with [`accept`], which yields [`SealedTerms`] signed
//! by both sides over the same digest. Only sealed terms can seed a contract.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cryptopipe::{self, parse_lower_hex, Digest, KeyPair, PublicKeys, SIGNATURE_LEN};
use crate::ledger::{Address, GasPolicy, Seconds, Wei};

/// Highest round a packet may carry; the proposal is round 0.
pub const MAX_ROUNDS: u32 = 64;

const TERMS_DOMAIN: &[u8] = b"sharepact/terms/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NegotiationError {
    #[error("invalid terms: {0}")]
    InvalidTerms(TermsViolation),
    #[error("packet signature does not verify")]
    BadSignature,
    #[error("negotiation exceeded {MAX_ROUNDS} rounds")]
    RoundLimitExceeded,
    #[error("a party cannot accept its own packet")]
    SelfAccept,
    #[error("{0} is not a party to these terms")]
    NotParty(Address),
    #[error("no public key known for {0}")]
    UnknownKey(Address),
}

impl NegotiationError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidTerms(_) => "InvalidTerms",
            Self::BadSignature => "BadSignature",
            Self::RoundLimitExceeded => "RoundLimitExceeded",
            Self::SelfAccept => "SelfAccept",
            Self::NotParty(_) => "NotParty",
            Self::UnknownKey(_) => "UnknownKey",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TermsViolation {
    #[error("voter list is empty")]
    EmptyVoterList,
    #[error("voter {0} is listed twice")]
    DuplicateVoter(Address),
    #[error("voter {0} is a party to the agreement")]
    ConflictedArbiter(Address),
    #[error("requester and provider are the same account")]
    SameParty,
    #[error("quorum {quorum} outside 1..={voters}")]
    QuorumOutOfRange { quorum: u64, voters: usize },
    #[error("voting margin must be in (0, 1]")]
    MarginOutOfRange,
    #[error("voting time must be positive")]
    ZeroVotingTime,
    #[error("contract lifetime must exceed voting time")]
    LifetimeTooShort,
    #[error("default compensation exceeds the combined deposits")]
    CompensationTooLarge,
    #[error("parties may not change during negotiation")]
    PartiesChanged,
}

/// Yes-share threshold in parts per million, `0 < ppm <= 1_000_000`.
/// Serialized as a decimal fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Margin(u32);

impl Margin {
    pub const SCALE: u32 = 1_000_000;

    pub fn from_ppm(ppm: u32) -> Self {
        Margin(ppm)
    }

    pub fn from_fraction(f: f64) -> Self {
        let ppm = (f * Self::SCALE as f64).round();
        Margin(ppm.clamp(0.0, u32::MAX as f64) as u32)
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn as_fraction(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    /// `yes > margin × cast`, evaluated exactly.
    pub fn exceeded_by(self, yes: u64, cast: u64) -> bool {
        (yes as u128) * (Self::SCALE as u128) > (self.0 as u128) * (cast as u128)
    }
}

impl fmt::Display for Margin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.as_fraction().fmt(f)
    }
}

impl Serialize for Margin {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_fraction())
    }
}

impl<'de> Deserialize<'de> for Margin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let f = f64::deserialize(d)?;
        if !f.is_finite() {
            return Err(serde::de::Error::custom("margin must be finite"));
        }
        Ok(Margin::from_fraction(f))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgreementTerms {
    pub requester_name: String,
    pub requester_address: Address,
    pub provider_name: String,
    pub provider_address: Address,
    pub payment: Wei,
    pub requester_deposit: Wei,
    pub provider_deposit: Wei,
    pub gas_money: Wei,
    /// Purpose of sharing, purpose of use and disclosure constraints.
    pub breach_condition: String,
    pub voter_list: Vec<Address>,
    pub quorum: u64,
    pub voting_time: Seconds,
    pub voting_margin: Margin,
    pub contract_lifetime: Seconds,
    pub default_compensation: Wei,
}

/// Gas allowance sized for the happy path's on-ledger calls.
pub fn default_gas_money(policy: &GasPolicy) -> Wei {
    Wei(policy.flat_call_gas as u128 * 8 * policy.gas_price)
}

impl AgreementTerms {
    pub fn validate(&self) -> Result<(), TermsViolation> {
        if self.requester_address == self.provider_address {
            return Err(TermsViolation::SameParty);
        }
        if self.voter_list.is_empty() {
            return Err(TermsViolation::EmptyVoterList);
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.voter_list {
            if !seen.insert(*v) {
                return Err(TermsViolation::DuplicateVoter(*v));
            }
            if *v == self.requester_address || *v == self.provider_address {
                return Err(TermsViolation::ConflictedArbiter(*v));
            }
        }
        if self.quorum < 1 || self.quorum > self.voter_list.len() as u64 {
            return Err(TermsViolation::QuorumOutOfRange { quorum: self.quorum, voters: self.voter_list.len() });
        }
        if self.voting_margin.ppm() == 0 || self.voting_margin.ppm() > Margin::SCALE {
            return Err(TermsViolation::MarginOutOfRange);
        }
        if self.voting_time == 0 {
            return Err(TermsViolation::ZeroVotingTime);
        }
        if self.contract_lifetime <= self.voting_time {
            return Err(TermsViolation::LifetimeTooShort);
        }
        let pool = self.requester_deposit.0.checked_add(self.provider_deposit.0);
        if pool.is_none_or(|p| self.default_compensation.0 > p) {
            return Err(TermsViolation::CompensationTooLarge);
        }
        Ok(())
    }

    /// Fields in declaration order; strings and lists carry a u32 BE length
    /// prefix, wei is u128 BE, counts and seconds are u64 BE, the margin is
    /// u32 BE parts per million.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        fn text(out: &mut Vec<u8>, s: &str) {
            out.extend_from_slice(&(s.len() as u32).to_be_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        let mut out = Vec::with_capacity(256 + 20 * self.voter_list.len());
        text(&mut out, &self.requester_name);
        out.extend_from_slice(&self.requester_address.0);
        text(&mut out, &self.provider_name);
        out.extend_from_slice(&self.provider_address.0);
        for w in [self.payment, self.requester_deposit, self.provider_deposit, self.gas_money] {
            out.extend_from_slice(&w.0.to_be_bytes());
        }
        text(&mut out, &self.breach_condition);
        out.extend_from_slice(&(self.voter_list.len() as u32).to_be_bytes());
        for v in &self.voter_list {
            out.extend_from_slice(&v.0);
        }
        out.extend_from_slice(&self.quorum.to_be_bytes());
        out.extend_from_slice(&self.voting_time.to_be_bytes());
        out.extend_from_slice(&self.voting_margin.ppm().to_be_bytes());
        out.extend_from_slice(&self.contract_lifetime.to_be_bytes());
        out.extend_from_slice(&self.default_compensation.0.to_be_bytes());
        out
    }

    pub fn digest(&self) -> Digest {
        cryptopipe::hash_data(&self.canonical_bytes())
    }

    pub fn counterparty(&self, party: Address) -> Option<Address> {
        if party == self.requester_address {
            Some(self.provider_address)
        } else if party == self.provider_address {
            Some(self.requester_address)
        } else {
            None
        }
    }
}

/// Detached Ed25519 signature, hex in JSON.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Sig(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Sig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({}..)", hex::encode(&self.0[..6]))
    }
}

impl Serialize for Sig {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Sig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_lower_hex::<SIGNATURE_LEN>(&s).map(Sig).map_err(serde::de::Error::custom)
    }
}

fn terms_message(digest: &Digest) -> Vec<u8> {
    let mut m = TERMS_DOMAIN.to_vec();
    m.extend_from_slice(digest.as_bytes());
    m
}

/// Public keys of every known participant, by ledger address.
#[derive(Debug, Clone, Default)]
pub struct KeyDirectory {
    keys: BTreeMap<Address, PublicKeys>,
}

impl KeyDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, addr: Address, keys: PublicKeys) {
        self.keys.insert(addr, keys);
    }

    pub fn get(&self, addr: Address) -> Result<&PublicKeys, NegotiationError> {
        self.keys.get(&addr).ok_or(NegotiationError::UnknownKey(addr))
    }

    pub fn verify(&self, signer: Address, msg: &[u8], sig: &Sig) -> bool {
        self.keys.get(&signer).is_some_and(|k| k.verify(msg, &sig.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractPacket {
    pub round: u32,
    pub sender: Address,
    pub terms: AgreementTerms,
    pub terms_digest: Digest,
    pub signature: Sig,
}

impl ContractPacket {
    fn signed(round: u32, sender: Address, keys: &KeyPair, terms: AgreementTerms) -> Self {
        let terms_digest = terms.digest();
        let signature = Sig(keys.sign(&terms_message(&terms_digest)));
        ContractPacket { round, sender, terms, terms_digest, signature }
    }

    pub fn verify(&self, dir: &KeyDirectory) -> Result<(), NegotiationError> {
        if self.terms.digest() != self.terms_digest
            || !dir.verify(self.sender, &terms_message(&self.terms_digest), &self.signature)
        {
            return Err(NegotiationError::BadSignature);
        }
        Ok(())
    }
}

fn check_terms(terms: &AgreementTerms) -> Result<(), NegotiationError> {
    terms.validate().map_err(NegotiationError::InvalidTerms)
}

pub fn propose(sender: Address, keys: &KeyPair, terms: AgreementTerms) -> Result<ContractPacket, NegotiationError> {
    check_terms(&terms)?;
    if terms.counterparty(sender).is_none() {
        return Err(NegotiationError::NotParty(sender));
    }
    Ok(ContractPacket::signed(0, sender, keys, terms))
}

/// Answers `previous` with modified terms. Parties alternate strictly.
pub fn counter(
    responder: Address,
    keys: &KeyPair,
    dir: &KeyDirectory,
    previous: &ContractPacket,
    modified_terms: AgreementTerms,
) -> Result<ContractPacket, NegotiationError> {
    previous.verify(dir)?;
    if previous.terms.counterparty(previous.sender) != Some(responder) {
        return Err(NegotiationError::NotParty(responder));
    }
    if modified_terms.requester_address != previous.terms.requester_address
        || modified_terms.provider_address != previous.terms.provider_address
    {
        return Err(NegotiationError::InvalidTerms(TermsViolation::PartiesChanged));
    }
    check_terms(&modified_terms)?;
    let round = previous.round + 1;
    if round > MAX_ROUNDS {
        return Err(NegotiationError::RoundLimitExceeded);
    }
    Ok(ContractPacket::signed(round, responder, keys, modified_terms))
}

/// Terms both parties signed. Fields are private so the only ways to obtain
/// one are [`accept`] and deserialization followed by [`SealedTerms::verify`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SealedTerms {
    terms: AgreementTerms,
    terms_digest: Digest,
    requester_signature: Sig,
    provider_signature: Sig,
}

impl SealedTerms {
    pub fn terms(&self) -> &AgreementTerms {
        &self.terms
    }

    pub fn terms_digest(&self) -> Digest {
        self.terms_digest
    }

    pub fn verify(&self, dir: &KeyDirectory) -> Result<(), NegotiationError> {
        check_terms(&self.terms)?;
        let msg = terms_message(&self.terms_digest);
        if self.terms.digest() != self.terms_digest
            || !dir.verify(self.terms.requester_address, &msg, &self.requester_signature)
            || !dir.verify(self.terms.provider_address, &msg, &self.provider_signature)
        {
            return Err(NegotiationError::BadSignature);
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn forge_unchecked(terms: AgreementTerms) -> Self {
        SealedTerms {
            terms_digest: terms.digest(),
            terms,
            requester_signature: Sig([0; SIGNATURE_LEN]),
            provider_signature: Sig([0; SIGNATURE_LEN]),
        }
    }
}

pub fn accept(
    acceptor: Address,
    keys: &KeyPair,
    dir: &KeyDirectory,
    packet: &ContractPacket,
) -> Result<SealedTerms, NegotiationError> {
    if acceptor == packet.sender {
        return Err(NegotiationError::SelfAccept);
    }
    packet.verify(dir)?;
    if packet.terms.counterparty(packet.sender) != Some(acceptor) {
        return Err(NegotiationError::NotParty(acceptor));
    }
    let own = Sig(keys.sign(&terms_message(&packet.terms_digest)));
    let (requester_signature, provider_signature) =
        if acceptor == packet.terms.requester_address { (own, packet.signature) } else { (packet.signature, own) };
    let sealed = SealedTerms {
        terms: packet.terms.clone(),
        terms_digest: packet.terms_digest,
        requester_signature,
        provider_signature,
    };
    sealed.verify(dir)?;
    Ok(sealed)
}

/// A recorded negotiation: every packet in order plus the final acceptance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub packets: Vec<ContractPacket>,
    pub acceptor: Option<Address>,
    pub acceptance: Option<Sig>,
}

impl Transcript {
    /// Re-verifies every packet and the acceptance, reproducing the sealed
    /// terms or the first error.
    pub fn replay(&self, dir: &KeyDirectory) -> Result<SealedTerms, NegotiationError> {
        let mut prev: Option<&ContractPacket> = None;
        for p in &self.packets {
            p.verify(dir)?;
            check_terms(&p.terms)?;
            let expected_round = prev.map_or(0, |q| q.round + 1);
            if p.round != expected_round {
                return Err(NegotiationError::BadSignature);
            }
            if p.round > MAX_ROUNDS {
                return Err(NegotiationError::RoundLimitExceeded);
            }
            if let Some(q) = prev {
                if q.terms.counterparty(q.sender) != Some(p.sender) {
                    return Err(NegotiationError::NotParty(p.sender));
                }
            }
            prev = Some(p);
        }
        let last = prev.ok_or(NegotiationError::BadSignature)?;
        let acceptor = self.acceptor.ok_or(NegotiationError::BadSignature)?;
        let sig = self.acceptance.ok_or(NegotiationError::BadSignature)?;
        if acceptor == last.sender {
            return Err(NegotiationError::SelfAccept);
        }
        let (requester_signature, provider_signature) =
            if acceptor == last.terms.requester_address { (sig, last.signature) } else { (last.signature, sig) };
        let sealed = SealedTerms {
            terms: last.terms.clone(),
            terms_digest: last.terms_digest,
            requester_signature,
            provider_signature,
        };
        sealed.verify(dir)?;
        Ok(sealed)
    }

    pub fn record_acceptance(&mut self, acceptor: Address, sealed: &SealedTerms) {
        self.acceptor = Some(acceptor);
        self.acceptance = Some(if acceptor == sealed.terms.requester_address {
            sealed.requester_signature
        } else {
            sealed.provider_signature
        });
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    pub struct Parties {
        pub requester: Address,
        pub provider: Address,
        pub requester_keys: KeyPair,
        pub provider_keys: KeyPair,
        pub voters: Vec<Address>,
        pub dir: KeyDirectory,
    }

    pub fn parties() -> Parties {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let requester = Address([1; 20]);
        let provider = Address([2; 20]);
        let requester_keys = KeyPair::generate(&mut rng);
        let provider_keys = KeyPair::generate(&mut rng);
        let mut dir = KeyDirectory::new();
        dir.insert(requester, requester_keys.public());
        dir.insert(provider, provider_keys.public());
        Parties {
            requester,
            provider,
            requester_keys,
            provider_keys,
            voters: vec![Address([10; 20]), Address([11; 20]), Address([12; 20])],
            dir,
        }
    }

    pub fn terms(p: &Parties) -> AgreementTerms {
        AgreementTerms {
            requester_name: "taxi-co".into(),
            requester_address: p.requester,
            provider_name: "city-transport".into(),
            provider_address: p.provider,
            payment: Wei(100),
            requester_deposit: Wei(50),
            provider_deposit: Wei(50),
            gas_money: Wei(10),
            breach_condition: "purpose: route planning; no disclosure".into(),
            voter_list: p.voters.clone(),
            quorum: 2,
            voting_time: 3600,
            voting_margin: Margin::from_fraction(0.5),
            contract_lifetime: 86_400,
            default_compensation: Wei(100),
        }
    }

    #[test]
    fn propose_validates() {
        let p = parties();
        let pkt = propose(p.requester, &p.requester_keys, terms(&p)).unwrap();
        assert_eq!(pkt.round, 0);
        pkt.verify(&p.dir).unwrap();

        let mut t = terms(&p);
        t.quorum = 4;
        assert!(matches!(
            propose(p.requester, &p.requester_keys, t),
            Err(NegotiationError::InvalidTerms(TermsViolation::QuorumOutOfRange { .. }))
        ));
        let mut t = terms(&p);
        t.voter_list.push(p.requester);
        assert!(matches!(
            propose(p.requester, &p.requester_keys, t),
            Err(NegotiationError::InvalidTerms(TermsViolation::ConflictedArbiter(_)))
        ));
        let mut t = terms(&p);
        t.voting_margin = Margin::from_ppm(0);
        assert!(propose(p.requester, &p.requester_keys, t).is_err());
        let mut t = terms(&p);
        t.contract_lifetime = 3600;
        assert!(propose(p.requester, &p.requester_keys, t).is_err());
        let mut t = terms(&p);
        t.voter_list.push(t.voter_list[0]);
        assert!(propose(p.requester, &p.requester_keys, t).is_err());
    }

    #[test]
    fn counter_and_accept() {
        let p = parties();
        let pkt = propose(p.requester, &p.requester_keys, terms(&p)).unwrap();
        let mut t = terms(&p);
        t.payment = Wei(80);
        let c = counter(p.provider, &p.provider_keys, &p.dir, &pkt, t).unwrap();
        assert_eq!(c.round, 1);

        let mut forged = pkt.clone();
        forged.terms.payment = Wei(1);
        assert_eq!(
            counter(p.provider, &p.provider_keys, &p.dir, &forged, terms(&p)).unwrap_err(),
            NegotiationError::BadSignature
        );

        assert_eq!(accept(p.provider, &p.provider_keys, &p.dir, &c).unwrap_err(), NegotiationError::SelfAccept);
        let sealed = accept(p.requester, &p.requester_keys, &p.dir, &c).unwrap();
        assert_eq!(sealed.terms().payment, Wei(80));
        sealed.verify(&p.dir).unwrap();

        let mut tampered = c.clone();
        tampered.terms.payment = Wei(79);
        assert_eq!(
            accept(p.requester, &p.requester_keys, &p.dir, &tampered).unwrap_err(),
            NegotiationError::BadSignature
        );
    }

    #[test]
    fn round_cap() {
        let p = parties();
        let mut pkt = propose(p.requester, &p.requester_keys, terms(&p)).unwrap();
        for i in 1..=64u32 {
            let (who, keys) =
                if i % 2 == 1 { (p.provider, &p.provider_keys) } else { (p.requester, &p.requester_keys) };
            let mut t = terms(&p);
            t.payment = Wei(100 + i as u128);
            pkt = counter(who, keys, &p.dir, &pkt, t).unwrap();
            assert_eq!(pkt.round, i);
        }
        assert_eq!(
            counter(p.provider, &p.provider_keys, &p.dir, &pkt, terms(&p)).unwrap_err(),
            NegotiationError::RoundLimitExceeded
        );
    }

    #[test]
    fn out_of_turn_counter_rejected() {
        let p = parties();
        let pkt = propose(p.requester, &p.requester_keys, terms(&p)).unwrap();
        assert_eq!(
            counter(p.requester, &p.requester_keys, &p.dir, &pkt, terms(&p)).unwrap_err(),
            NegotiationError::NotParty(p.requester)
        );
    }

    #[test]
    fn transcript_replay() {
        let p = parties();
        let p0 = propose(p.requester, &p.requester_keys, terms(&p)).unwrap();
        let mut t = terms(&p);
        t.provider_deposit = Wei(40);
        t.default_compensation = Wei(90);
        let p1 = counter(p.provider, &p.provider_keys, &p.dir, &p0, t).unwrap();
        let sealed = accept(p.requester, &p.requester_keys, &p.dir, &p1).unwrap();
        let mut tr = Transcript { packets: vec![p0, p1], acceptor: None, acceptance: None };
        tr.record_acceptance(p.requester, &sealed);
        assert_eq!(tr.replay(&p.dir).unwrap(), sealed);

        let json = serde_json::to_string(&tr).unwrap();
        let back: Transcript = serde_json::from_str(&json).unwrap();
        assert_eq!(back.replay(&p.dir).unwrap(), sealed);

        tr.packets[0].terms.payment = Wei(7);
        assert_eq!(tr.replay(&p.dir).unwrap_err(), NegotiationError::BadSignature);
    }

    #[test]
    fn sealed_json_round_trip_keeps_signatures() {
        let p = parties();
        let p0 = propose(p.provider, &p.provider_keys, terms(&p)).unwrap();
        let sealed = accept(p.requester, &p.requester_keys, &p.dir, &p0).unwrap();
        let json = serde_json::to_string(&sealed).unwrap();
        let back: SealedTerms = serde_json::from_str(&json).unwrap();
        back.verify(&p.dir).unwrap();
        let forged = SealedTerms::forge_unchecked(terms(&p));
        assert_eq!(forged.verify(&p.dir).unwrap_err(), NegotiationError::BadSignature);
    }

    #[test]
    fn margin_exactness() {
        let half = Margin::from_fraction(0.5);
        assert!(half.exceeded_by(2, 3));
        assert!(!half.exceeded_by(1, 2));
        assert_eq!(Margin::from_fraction(0.25).ppm(), 250_000);
        let json = serde_json::to_string(&Margin::from_fraction(0.75)).unwrap();
        assert_eq!(json, "0.75");
    }
}
