//! The cloud party: provider registry, encrypted storage and one-time links.
//!
//! The cloud never keeps plaintext. `store_data` seals the payload under a
//! fresh symmetric key and drops the plaintext; `prepare_link` issues a
//! single-use link bound to one requester; `fetch` hands out the ciphertext
//! exactly once per link.
//!
//! On-disk layout of [`CloudNode::save`]:
//!
//! ```text
//! <dir>/registry.json        provider records
//! <dir>/links.json           link records and states
//! <dir>/node.json            node address, rng position, handle metadata (incl. ks)
//! <dir>/bundles/<handle>.bin envelope container; only data_ct and stored_digest are non-empty
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cryptopipe::{self, parse_lower_hex, Digest, EnvelopeBundle, KeyPair, PublicKeys, SymmetricKey};
use crate::ledger::{payload, Address, EventKind, EventRecord, Ledger, Role, Seconds};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("provider name {0:?} is already registered")]
    NameTaken(String),
    #[error("unknown provider {0}")]
    UnknownProvider(String),
    #[error("unknown data handle {0}")]
    UnknownHandle(HandleId),
    #[error("{caller} does not own handle {handle}")]
    NotOwner { caller: Address, handle: HandleId },
    #[error("unknown link")]
    UnknownLink,
    #[error("link is no longer accessible ({0:?})")]
    LinkExpired(LinkState),
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("store format: {0}")]
    Format(String),
}

impl CloudError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::NameTaken(_) => "NameTaken",
            Self::UnknownProvider(_) => "UnknownProvider",
            Self::UnknownHandle(_) => "UnknownHandle",
            Self::NotOwner { .. } => "NotOwner",
            Self::UnknownLink => "UnknownLink",
            Self::LinkExpired(_) => "LinkExpired",
            Self::Io(_) => "IoError",
            Self::Format(_) => "FormatError",
        }
    }
}

macro_rules! hex_id {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), hex::encode(self.0))
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                parse_lower_hex::<$len>(s).map($name)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_id!(LinkId, 16);
hex_id!(HandleId, 8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkState {
    Fresh,
    Consumed,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRecord {
    pub provider_name: String,
    pub provider_address: Address,
    pub registered_at: Seconds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataHandle {
    pub handle_id: HandleId,
    pub owner: Address,
    pub data_ct: Vec<u8>,
    pub stored_digest: Vec<u8>,
    pub ks: SymmetricKey,
    pub created_at: Seconds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneTimeLink {
    pub link_id: LinkId,
    pub handle: HandleId,
    pub requester_pub: PublicKeys,
    pub state: LinkState,
    pub issued_at: Seconds,
    /// Digest of the bundle issued with this link, so contracts can refer to
    /// the link without learning its id.
    pub bundle_digest: Digest,
}

/// What `fetch` returns: the sections the requester cannot get elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedData {
    pub data_ct: Vec<u8>,
    pub stored_digest: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudNode {
    address: Address,
    rng: ChaCha20Rng,
    registry: BTreeMap<String, ProviderRecord>,
    handles: BTreeMap<HandleId, DataHandle>,
    links: BTreeMap<LinkId, OneTimeLink>,
}

#[derive(Serialize, Deserialize)]
struct HandleMeta {
    handle_id: HandleId,
    owner: Address,
    ks: SymmetricKey,
    created_at: Seconds,
}

#[derive(Serialize, Deserialize)]
struct NodeMeta {
    address: Address,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    handles: Vec<HandleMeta>,
}

impl CloudNode {
    /// Registers the cloud's own account on the ledger.
    pub fn new(ledger: &mut Ledger, seed: u64) -> Self {
        let address = ledger.create_account(Default::default(), Role::Cloud);
        CloudNode {
            address,
            rng: ChaCha20Rng::seed_from_u64(seed),
            registry: BTreeMap::new(),
            handles: BTreeMap::new(),
            links: BTreeMap::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn register_provider(
        &mut self,
        ledger: &mut Ledger,
        name: &str,
        address: Address,
    ) -> Result<ProviderRecord, CloudError> {
        if self.registry.contains_key(name) {
            return Err(CloudError::NameTaken(name.to_string()));
        }
        let record =
            ProviderRecord { provider_name: name.to_string(), provider_address: address, registered_at: ledger.now() };
        ledger
            .append_event(
                self.address,
                EventKind::Register,
                payload([("name", name.to_string()), ("provider", address.to_string())]),
            )
            .expect("cloud account is registered");
        self.registry.insert(name.to_string(), record.clone());
        Ok(record)
    }

    pub fn lookup_provider(&self, name: &str) -> Result<Address, CloudError> {
        self.registry.get(name).map(|r| r.provider_address).ok_or_else(|| CloudError::UnknownProvider(name.to_string()))
    }

    fn is_provider(&self, addr: Address) -> bool {
        self.registry.values().any(|r| r.provider_address == addr)
    }

    /// Seals `data` under a fresh key. The plaintext is not retained.
    pub fn store_data(&mut self, ledger: &mut Ledger, owner: Address, data: &[u8]) -> Result<HandleId, CloudError> {
        if !self.is_provider(owner) {
            return Err(CloudError::UnknownProvider(owner.to_string()));
        }
        let ks = SymmetricKey::generate(&mut self.rng);
        let (data_ct, stored_digest) = cryptopipe::seal_for_cloud(data, &ks, &mut self.rng);
        let handle_id = loop {
            let mut id = [0u8; 8];
            self.rng.fill_bytes(&mut id);
            if !self.handles.contains_key(&HandleId(id)) {
                break HandleId(id);
            }
        };
        self.handles
            .insert(handle_id, DataHandle { handle_id, owner, data_ct, stored_digest, ks, created_at: ledger.now() });
        ledger
            .append_event(
                self.address,
                EventKind::Stored,
                payload([("handle", handle_id.to_string()), ("owner", owner.to_string())]),
            )
            .expect("cloud account is registered");
        Ok(handle_id)
    }

    pub fn handle(&self, id: HandleId) -> Result<&DataHandle, CloudError> {
        self.handles.get(&id).ok_or(CloudError::UnknownHandle(id))
    }

    /// The symmetric key is shared with the owning provider.
    pub fn key_for_owner(&self, owner: Address, id: HandleId) -> Result<SymmetricKey, CloudError> {
        let h = self.handle(id)?;
        if h.owner != owner {
            return Err(CloudError::NotOwner { caller: owner, handle: id });
        }
        Ok(h.ks.clone())
    }

    /// Issues a fresh link for `requester_pub` and assembles the bundle. The
    /// result goes back to the owner, who forwards it to the requester.
    pub fn prepare_link(
        &mut self,
        ledger: &mut Ledger,
        owner: Address,
        handle: HandleId,
        requester_pub: &PublicKeys,
        provider_keys: &KeyPair,
    ) -> Result<(OneTimeLink, EnvelopeBundle), CloudError> {
        let h = self.handles.get(&handle).ok_or(CloudError::UnknownHandle(handle))?;
        if h.owner != owner {
            return Err(CloudError::NotOwner { caller: owner, handle });
        }
        let link_id = loop {
            let mut id = [0u8; 16];
            self.rng.fill_bytes(&mut id);
            if !self.links.contains_key(&LinkId(id)) {
                break LinkId(id);
            }
        };
        let bundle = EnvelopeBundle {
            wrapped_key: cryptopipe::wrap_key_for_requester(&h.ks, provider_keys, requester_pub, &mut self.rng),
            enc_link: cryptopipe::encrypt_link(&link_id.0, requester_pub, &mut self.rng),
            data_ct: h.data_ct.clone(),
            stored_digest: h.stored_digest.clone(),
        };
        let link = OneTimeLink {
            link_id,
            handle,
            requester_pub: *requester_pub,
            state: LinkState::Fresh,
            issued_at: ledger.now(),
            bundle_digest: bundle.digest(),
        };
        ledger
            .append_event(
                self.address,
                EventKind::LinkIssued,
                payload([
                    ("bundle", link.bundle_digest.to_string()),
                    ("handle", handle.to_string()),
                    ("owner", owner.to_string()),
                ]),
            )
            .expect("cloud account is registered");
        self.links.insert(link_id, link.clone());
        Ok((link, bundle))
    }

    /// Single-use read: the first fetch of a fresh link consumes it.
    pub fn fetch(&mut self, ledger: &mut Ledger, link_id: &LinkId) -> Result<FetchedData, CloudError> {
        let link = self.links.get_mut(link_id).ok_or(CloudError::UnknownLink)?;
        if link.state != LinkState::Fresh {
            return Err(CloudError::LinkExpired(link.state));
        }
        let h = self.handles.get(&link.handle).ok_or(CloudError::UnknownHandle(link.handle))?;
        link.state = LinkState::Consumed;
        ledger
            .append_event(
                self.address,
                EventKind::Retrieved,
                payload([
                    ("bundle", link.bundle_digest.to_string()),
                    ("handle", link.handle.to_string()),
                    ("link", link_id.to_string()),
                ]),
            )
            .expect("cloud account is registered");
        Ok(FetchedData { data_ct: h.data_ct.clone(), stored_digest: h.stored_digest.clone() })
    }

    pub fn revoke(&mut self, ledger: &mut Ledger, link_id: &LinkId) -> Result<(), CloudError> {
        let link = self.links.get_mut(link_id).ok_or(CloudError::UnknownLink)?;
        if link.state != LinkState::Fresh {
            return Err(CloudError::LinkExpired(link.state));
        }
        link.state = LinkState::Revoked;
        ledger
            .append_event(
                self.address,
                EventKind::LinkRevoked,
                payload([("bundle", link.bundle_digest.to_string()), ("link", link_id.to_string())]),
            )
            .expect("cloud account is registered");
        Ok(())
    }

    /// Revokes the link issued with `bundle` if it is still fresh.
    pub fn revoke_by_bundle(&mut self, ledger: &mut Ledger, bundle: &Digest) -> bool {
        let id =
            self.links.values().find(|l| &l.bundle_digest == bundle && l.state == LinkState::Fresh).map(|l| l.link_id);
        match id {
            Some(id) => self.revoke(ledger, &id).is_ok(),
            None => false,
        }
    }

    pub fn link(&self, id: &LinkId) -> Option<&OneTimeLink> {
        self.links.get(id)
    }

    pub fn link_state(&self, id: &LinkId) -> Option<LinkState> {
        self.links.get(id).map(|l| l.state)
    }

    pub fn link_state_by_bundle(&self, bundle: &Digest) -> Option<LinkState> {
        self.links.values().find(|l| &l.bundle_digest == bundle).map(|l| l.state)
    }

    pub fn consumed_links(&self) -> BTreeSet<LinkId> {
        self.links.values().filter(|l| l.state == LinkState::Consumed).map(|l| l.link_id).collect()
    }

    /// True if any stored byte sequence contains `needle`. Used to check the
    /// store holds ciphertext only.
    pub fn store_contains(&self, needle: &[u8]) -> bool {
        if needle.is_empty() {
            return false;
        }
        self.handles
            .values()
            .any(|h| [&h.data_ct, &h.stored_digest].iter().any(|blob| blob.windows(needle.len()).any(|w| w == needle)))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CloudError> {
        std::fs::create_dir_all(dir.join("bundles"))?;
        let registry: Vec<&ProviderRecord> = self.registry.values().collect();
        std::fs::write(dir.join("registry.json"), to_json(&registry)?)?;
        let links: Vec<&OneTimeLink> = self.links.values().collect();
        std::fs::write(dir.join("links.json"), to_json(&links)?)?;
        let meta = NodeMeta {
            address: self.address,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            handles: self
                .handles
                .values()
                .map(|h| HandleMeta {
                    handle_id: h.handle_id,
                    owner: h.owner,
                    ks: h.ks.clone(),
                    created_at: h.created_at,
                })
                .collect(),
        };
        std::fs::write(dir.join("node.json"), to_json(&meta)?)?;
        for h in self.handles.values() {
            let container = EnvelopeBundle {
                data_ct: h.data_ct.clone(),
                stored_digest: h.stored_digest.clone(),
                ..Default::default()
            };
            std::fs::write(dir.join("bundles").join(format!("{}.bin", h.handle_id)), container.to_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CloudError> {
        let fmt_err = |e: String| CloudError::Format(e);
        let registry: Vec<ProviderRecord> = from_json(&std::fs::read(dir.join("registry.json"))?)?;
        let links: Vec<OneTimeLink> = from_json(&std::fs::read(dir.join("links.json"))?)?;
        let meta: NodeMeta = from_json(&std::fs::read(dir.join("node.json"))?)?;
        let seed = parse_lower_hex::<32>(&meta.rng_seed).map_err(fmt_err)?;
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(meta.rng_word_pos.parse::<u128>().map_err(|e| fmt_err(e.to_string()))?);
        let mut handles = BTreeMap::new();
        for m in meta.handles {
            let bytes = std::fs::read(dir.join("bundles").join(format!("{}.bin", m.handle_id)))?;
            let c = EnvelopeBundle::from_bytes(&bytes).map_err(|e| fmt_err(e.to_string()))?;
            handles.insert(
                m.handle_id,
                DataHandle {
                    handle_id: m.handle_id,
                    owner: m.owner,
                    data_ct: c.data_ct,
                    stored_digest: c.stored_digest,
                    ks: m.ks,
                    created_at: m.created_at,
                },
            );
        }
        Ok(CloudNode {
            address: meta.address,
            rng,
            registry: registry.into_iter().map(|r| (r.provider_name.clone(), r)).collect(),
            handles,
            links: links.into_iter().map(|l| (l.link_id, l)).collect(),
        })
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, CloudError> {
    serde_json::to_vec_pretty(v).map_err(|e| CloudError::Format(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(b: &[u8]) -> Result<T, CloudError> {
    serde_json::from_slice(b).map_err(|e| CloudError::Format(e.to_string()))
}

/// Rebuilds the set of consumed links from RETRIEVED events.
pub fn consumed_links_from_log(log: &[EventRecord], cloud: Address) -> BTreeSet<LinkId> {
    log.iter()
        .filter(|r| r.kind == EventKind::Retrieved && r.emitter == cloud)
        .filter_map(|r| r.payload.get("link")?.parse().ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{GasPolicy, LogFilter, Wei};

    struct Fixture {
        ledger: Ledger,
        cloud: CloudNode,
        provider: Address,
        provider_keys: KeyPair,
        requester_keys: KeyPair,
    }

    fn fixture() -> Fixture {
        let mut ledger = Ledger::new(GasPolicy::default()).unwrap();
        let mut cloud = CloudNode::new(&mut ledger, 11);
        let provider = ledger.create_account(Wei(0), Role::Provider);
        cloud.register_provider(&mut ledger, "city-transport", provider).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        Fixture {
            ledger,
            cloud,
            provider,
            provider_keys: KeyPair::generate(&mut rng),
            requester_keys: KeyPair::generate(&mut rng),
        }
    }

    #[test]
    fn registry() {
        let mut f = fixture();
        assert_eq!(f.cloud.lookup_provider("city-transport").unwrap(), f.provider);
        let other = f.ledger.create_account(Wei(0), Role::Provider);
        assert_eq!(f.cloud.register_provider(&mut f.ledger, "city-transport", other).unwrap_err().code(), "NameTaken");
        assert_eq!(f.cloud.lookup_provider("city-transport").unwrap(), f.provider);
        assert_eq!(f.cloud.lookup_provider("nobody").unwrap_err().code(), "UnknownProvider");
    }

    #[test]
    fn store_keeps_only_ciphertext() {
        let mut f = fixture();
        let data: Vec<u8> = (0..1024u32).map(|i| (i * 7 + 3) as u8).collect();
        let h = f.cloud.store_data(&mut f.ledger, f.provider, &data).unwrap();
        assert!(!f.cloud.store_contains(&data[..64]));
        assert!(!f.cloud.store_contains(cryptopipe::hash_data(&data).as_bytes()));
        let h2 = f.cloud.store_data(&mut f.ledger, f.provider, &data).unwrap();
        assert_ne!(h, h2);
        assert_ne!(f.cloud.handle(h).unwrap().ks, f.cloud.handle(h2).unwrap().ks);
        f.cloud.store_data(&mut f.ledger, f.provider, b"").unwrap();

        let stranger = f.ledger.create_account(Wei(0), Role::Requester);
        assert_eq!(f.cloud.store_data(&mut f.ledger, stranger, b"x").unwrap_err().code(), "UnknownProvider");
    }

    #[test]
    fn links_are_single_use() {
        let mut f = fixture();
        let h = f.cloud.store_data(&mut f.ledger, f.provider, b"timetable").unwrap();
        let rp = f.requester_keys.public();
        let (l1, bundle) = f.cloud.prepare_link(&mut f.ledger, f.provider, h, &rp, &f.provider_keys).unwrap();
        let (l2, _) = f.cloud.prepare_link(&mut f.ledger, f.provider, h, &rp, &f.provider_keys).unwrap();
        assert_eq!(l1.state, LinkState::Fresh);
        assert_ne!(l1.link_id, l2.link_id);

        let stranger = f.ledger.create_account(Wei(0), Role::Provider);
        assert_eq!(
            f.cloud.prepare_link(&mut f.ledger, stranger, h, &rp, &f.provider_keys).unwrap_err().code(),
            "NotOwner"
        );

        let link_bytes = cryptopipe::decrypt_link(&bundle.enc_link, &f.requester_keys).unwrap();
        assert_eq!(link_bytes, l1.link_id.0);
        let got = f.cloud.fetch(&mut f.ledger, &l1.link_id).unwrap();
        assert_eq!(f.cloud.link_state(&l1.link_id), Some(LinkState::Consumed));
        assert_eq!(f.cloud.link_state(&l2.link_id), Some(LinkState::Fresh));
        assert!(matches!(f.cloud.fetch(&mut f.ledger, &l1.link_id), Err(CloudError::LinkExpired(LinkState::Consumed))));
        assert_eq!(f.cloud.fetch(&mut f.ledger, &LinkId([0xaa; 16])).unwrap_err().code(), "UnknownLink");

        let assembled = EnvelopeBundle { data_ct: got.data_ct, stored_digest: got.stored_digest, ..bundle };
        let data = cryptopipe::open_pipeline(&assembled, &f.requester_keys, &f.provider_keys.public()).unwrap();
        assert_eq!(data, b"timetable");

        f.cloud.revoke(&mut f.ledger, &l2.link_id).unwrap();
        assert!(matches!(f.cloud.fetch(&mut f.ledger, &l2.link_id), Err(CloudError::LinkExpired(LinkState::Revoked))));

        assert_eq!(f.ledger.query_log(&LogFilter::kind(EventKind::Retrieved)).len(), 1);
        assert_eq!(consumed_links_from_log(f.ledger.log(), f.cloud.address()), f.cloud.consumed_links());
    }

    #[test]
    fn save_and_reload_is_identical() {
        let mut f = fixture();
        let h = f.cloud.store_data(&mut f.ledger, f.provider, b"persist me please").unwrap();
        let rp = f.requester_keys.public();
        let (l1, _) = f.cloud.prepare_link(&mut f.ledger, f.provider, h, &rp, &f.provider_keys).unwrap();
        f.cloud.prepare_link(&mut f.ledger, f.provider, h, &rp, &f.provider_keys).unwrap();
        f.cloud.fetch(&mut f.ledger, &l1.link_id).unwrap();

        let dir = tempfile::tempdir().unwrap();
        f.cloud.save(dir.path()).unwrap();
        let mut loaded = CloudNode::load(dir.path()).unwrap();
        assert_eq!(loaded, f.cloud);

        for entry in walk(dir.path()) {
            let bytes = std::fs::read(&entry).unwrap();
            assert!(!bytes.windows(17).any(|w| w == b"persist me please"), "{}", entry.display());
        }

        // Same rng position, so the next handle ids agree too.
        let a = f.cloud.store_data(&mut f.ledger, f.provider, b"next").unwrap();
        let b = loaded.store_data(&mut f.ledger, f.provider, b"next").unwrap();
        assert_eq!(a, b);
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
