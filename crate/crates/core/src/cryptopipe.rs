//! Layered encryption for data handed from a provider to a requester.
//!
//! The cloud stores `data_ct = AEAD(ks, data)` together with
//! `stored_digest = AEAD(ks, H(data))`. The provider hands the requester the
//! symmetric key `ks` (encrypted to the requester and signed by the provider)
//! and the one-time link (encrypted to the requester). Opening runs three
//! ordered steps:
//!
//! 1. verify the provider's signature over the wrapped key (provider public key),
//! 2. decrypt the link and the wrapped key with the requester's private key,
//! 3. decrypt the data and its stored digest with `ks`,
//!
//! then checks `H(data)` against the stored digest. Each step has its own
//! error variant so a failure always names the earliest step that broke.
//!
//! Primitives: SHA-256, ChaCha20-Poly1305 (256-bit key, explicit 12-byte
//! nonce), X25519 ephemeral-static hybrid encryption with HKDF-SHA256, and
//! Ed25519 signatures.

use std::fmt;
use std::str::FromStr;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as DhPublic, StaticSecret};

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const SIGNATURE_LEN: usize = 64;

/// Container magic for serialized [`EnvelopeBundle`]s.
pub const BUNDLE_MAGIC: [u8; 4] = *b"DSEB";
pub const BUNDLE_VERSION: u8 = 1;

const AAD_DATA: &[u8] = b"sharepact/data/v1";
const AAD_DIGEST: &[u8] = b"sharepact/digest/v1";
const CTX_LINK: &[u8] = b"sharepact/link/v1";
const CTX_KEY: &[u8] = b"sharepact/key/v1";
const SIG_WRAP: &[u8] = b"sharepact/wrap/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    /// Step 1: the wrapped key is not signed by the expected provider.
    #[error("wrapped key signature is invalid")]
    SignatureInvalid,
    /// Step 2: the requester's private key cannot open the link or the key.
    #[error("link could not be decrypted with the requester key")]
    LinkDecryptFailure,
    /// Step 3: the data ciphertext failed authentication under `ks`.
    #[error("data ciphertext failed authentication")]
    AuthFailure,
    /// Decrypted data does not hash to the stored digest.
    #[error("decrypted data does not match the stored digest")]
    DigestMismatch,
    #[error("malformed bundle: {0}")]
    Malformed(String),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::SignatureInvalid => "SignatureInvalid",
            Self::LinkDecryptFailure => "LinkDecryptFailure",
            Self::AuthFailure => "AuthFailure",
            Self::DigestMismatch => "DigestMismatch",
            Self::Malformed(_) => "Malformed",
        }
    }

    /// Pipeline step that failed; 0 for container errors, 4 for the final
    /// integrity check.
    pub fn step(&self) -> u8 {
        match self {
            Self::Malformed(_) => 0,
            Self::SignatureInvalid => 1,
            Self::LinkDecryptFailure => 2,
            Self::AuthFailure => 3,
            Self::DigestMismatch => 4,
        }
    }
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Digest(parse_lower_hex::<32>(s)?))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Strict fixed-width lowercase hex. Uppercase is rejected so that every
/// value has exactly one textual form.
pub(crate) fn parse_lower_hex<const N: usize>(s: &str) -> Result<[u8; N], String> {
    if s.len() != N * 2 {
        return Err(format!("expected {} hex digits, got {}", N * 2, s.len()));
    }
    if !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err("expected lowercase hex".into());
    }
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).map_err(|e| e.to_string())?;
    Ok(out)
}

pub fn hash_data(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// 256-bit key for the data cipher.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; 32]);

impl SymmetricKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        SymmetricKey(k)
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SymmetricKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

impl Serialize for SymmetricKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for SymmetricKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_lower_hex::<32>(&s).map(SymmetricKey).map_err(serde::de::Error::custom)
    }
}

/// `nonce || ciphertext || tag`.
fn aead_seal<R: RngCore + CryptoRng>(key: &[u8; 32], rng: &mut R, pt: &[u8], aad: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: pt, aad })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out
}

fn aead_open(key: &[u8; 32], blob: &[u8], aad: &[u8]) -> Option<Vec<u8>> {
    if blob.len() < NONCE_LEN + TAG_LEN {
        return None;
    }
    let (nonce, ct) = blob.split_at(NONCE_LEN);
    ChaCha20Poly1305::new(Key::from_slice(key)).decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad }).ok()
}

/// Public halves of a party's encryption and signing keys.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKeys {
    pub encryption: [u8; 32],
    pub verifying: [u8; 32],
}

impl fmt::Debug for PublicKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKeys(enc={}, sig={})", hex::encode(&self.encryption[..4]), hex::encode(&self.verifying[..4]))
    }
}

#[derive(Serialize, Deserialize)]
struct PublicKeysRepr {
    encryption: String,
    verifying: String,
}

impl Serialize for PublicKeys {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PublicKeysRepr { encryption: hex::encode(self.encryption), verifying: hex::encode(self.verifying) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PublicKeys {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PublicKeysRepr::deserialize(d)?;
        Ok(PublicKeys {
            encryption: parse_lower_hex(&r.encryption).map_err(serde::de::Error::custom)?,
            verifying: parse_lower_hex(&r.verifying).map_err(serde::de::Error::custom)?,
        })
    }
}

impl PublicKeys {
    pub fn verify(&self, msg: &[u8], sig: &[u8; SIGNATURE_LEN]) -> bool {
        match VerifyingKey::from_bytes(&self.verifying) {
            Ok(vk) => vk.verify(msg, &Signature::from_bytes(sig)).is_ok(),
            Err(_) => false,
        }
    }
}

/// A party's long-term keys: X25519 for decryption, Ed25519 for signing.
#[derive(Clone)]
pub struct KeyPair {
    encryption: StaticSecret,
    signing: SigningKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public()).finish()
    }
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        KeyPair { encryption: StaticSecret::random_from_rng(&mut *rng), signing: SigningKey::generate(rng) }
    }

    pub fn public(&self) -> PublicKeys {
        PublicKeys {
            encryption: DhPublic::from(&self.encryption).to_bytes(),
            verifying: self.signing.verifying_key().to_bytes(),
        }
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.signing.sign(msg).to_bytes()
    }
}

fn hybrid_key(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32], ctx: &[u8]) -> [u8; 32] {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(ctx, &mut okm).expect("32 bytes is a valid HKDF-SHA256 length");
    okm
}

/// Ephemeral-static X25519 encryption: `eph_pub(32) || nonce || ct || tag`.
pub fn encrypt_to<R: RngCore + CryptoRng>(
    recipient: &PublicKeys,
    plaintext: &[u8],
    ctx: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    let eph = StaticSecret::random_from_rng(&mut *rng);
    let eph_pub = DhPublic::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&DhPublic::from(recipient.encryption));
    let key = hybrid_key(shared.as_bytes(), &eph_pub, &recipient.encryption, ctx);
    let mut out = eph_pub.to_vec();
    out.extend(aead_seal(&key, rng, plaintext, ctx));
    out
}

pub fn decrypt_from(keys: &KeyPair, blob: &[u8], ctx: &[u8]) -> Option<Vec<u8>> {
    if blob.len() < 32 {
        return None;
    }
    let (eph_pub, rest) = blob.split_at(32);
    let eph_pub: [u8; 32] = eph_pub.try_into().ok()?;
    let shared = keys.encryption.diffie_hellman(&DhPublic::from(eph_pub));
    if !shared.was_contributory() {
        return None;
    }
    let own = keys.public().encryption;
    let key = hybrid_key(shared.as_bytes(), &eph_pub, &own, ctx);
    aead_open(&key, rest, ctx)
}

/// Encrypts the data and its digest under `ks`. Returns `(data_ct, stored_digest)`.
pub fn seal_for_cloud<R: RngCore + CryptoRng>(data: &[u8], ks: &SymmetricKey, rng: &mut R) -> (Vec<u8>, Vec<u8>) {
    let data_ct = aead_seal(&ks.0, rng, data, AAD_DATA);
    let stored_digest = aead_seal(&ks.0, rng, hash_data(data).as_bytes(), AAD_DIGEST);
    (data_ct, stored_digest)
}

/// Inverse of [`seal_for_cloud`]: returns the data and the digest that was
/// stored alongside it. Does not compare them.
pub fn open_sealed(
    data_ct: &[u8],
    stored_digest: &[u8],
    ks: &SymmetricKey,
) -> Result<(Vec<u8>, Digest), PipelineError> {
    let data = aead_open(&ks.0, data_ct, AAD_DATA).ok_or(PipelineError::AuthFailure)?;
    let digest = aead_open(&ks.0, stored_digest, AAD_DIGEST).ok_or(PipelineError::AuthFailure)?;
    let digest: [u8; 32] = digest.try_into().map_err(|_| PipelineError::AuthFailure)?;
    Ok((data, Digest(digest)))
}

fn wrap_message(ct: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(SIG_WRAP.len() + ct.len());
    m.extend_from_slice(SIG_WRAP);
    m.extend_from_slice(ct);
    m
}

/// `signature(64) || encrypt_to(requester, ks)`. The provider's signature
/// covers the ciphertext, so step 1 needs public keys only.
pub fn wrap_key_for_requester<R: RngCore + CryptoRng>(
    ks: &SymmetricKey,
    provider: &KeyPair,
    requester: &PublicKeys,
    rng: &mut R,
) -> Vec<u8> {
    let ct = encrypt_to(requester, ks.as_bytes(), CTX_KEY, rng);
    let sig = provider.sign(&wrap_message(&ct));
    let mut out = sig.to_vec();
    out.extend(ct);
    out
}

/// Step 1: check the provider signature; returns the authenticated key ciphertext.
fn verify_wrapped<'a>(wrapped: &'a [u8], provider: &PublicKeys) -> Result<&'a [u8], PipelineError> {
    if wrapped.len() < SIGNATURE_LEN {
        return Err(PipelineError::SignatureInvalid);
    }
    let (sig, ct) = wrapped.split_at(SIGNATURE_LEN);
    let sig: [u8; SIGNATURE_LEN] = sig.try_into().expect("split at signature length");
    if provider.verify(&wrap_message(ct), &sig) {
        Ok(ct)
    } else {
        Err(PipelineError::SignatureInvalid)
    }
}

fn decrypt_key(requester: &KeyPair, ct: &[u8]) -> Result<SymmetricKey, PipelineError> {
    let raw = decrypt_from(requester, ct, CTX_KEY).ok_or(PipelineError::LinkDecryptFailure)?;
    let raw: [u8; 32] = raw.try_into().map_err(|_| PipelineError::LinkDecryptFailure)?;
    Ok(SymmetricKey(raw))
}

pub fn unwrap_key(wrapped: &[u8], provider: &PublicKeys, requester: &KeyPair) -> Result<SymmetricKey, PipelineError> {
    let ct = verify_wrapped(wrapped, provider)?;
    decrypt_key(requester, ct)
}

pub fn encrypt_link<R: RngCore + CryptoRng>(link: &[u8], requester: &PublicKeys, rng: &mut R) -> Vec<u8> {
    encrypt_to(requester, link, CTX_LINK, rng)
}

pub fn decrypt_link(enc_link: &[u8], requester: &KeyPair) -> Result<Vec<u8>, PipelineError> {
    decrypt_from(requester, enc_link, CTX_LINK).ok_or(PipelineError::LinkDecryptFailure)
}

/// Everything the requester needs to recover the data.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EnvelopeBundle {
    pub wrapped_key: Vec<u8>,
    pub enc_link: Vec<u8>,
    pub data_ct: Vec<u8>,
    pub stored_digest: Vec<u8>,
}

impl EnvelopeBundle {
    /// `magic(4) || version(1) || 4 × (u32 BE length || bytes)`, sections in
    /// the order wrapped_key, enc_link, data_ct, stored_digest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let sections = self.sections();
        let body: usize = sections.iter().map(|s| 4 + s.len()).sum();
        let mut out = Vec::with_capacity(5 + body);
        out.extend_from_slice(&BUNDLE_MAGIC);
        out.push(BUNDLE_VERSION);
        for s in sections {
            out.extend_from_slice(&(s.len() as u32).to_be_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let malformed = |m: &str| PipelineError::Malformed(m.to_string());
        if bytes.len() < 5 || bytes[..4] != BUNDLE_MAGIC {
            return Err(malformed("bad magic"));
        }
        if bytes[4] != BUNDLE_VERSION {
            return Err(malformed("unsupported version"));
        }
        let mut rest = &bytes[5..];
        let mut take = || -> Result<Vec<u8>, PipelineError> {
            if rest.len() < 4 {
                return Err(malformed("truncated length prefix"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            rest = &rest[4..];
            if rest.len() < len {
                return Err(malformed("section overruns container"));
            }
            let (s, tail) = rest.split_at(len);
            rest = tail;
            Ok(s.to_vec())
        };
        let bundle =
            EnvelopeBundle { wrapped_key: take()?, enc_link: take()?, data_ct: take()?, stored_digest: take()? };
        if !rest.is_empty() {
            return Err(malformed("trailing bytes"));
        }
        Ok(bundle)
    }

    pub fn digest(&self) -> Digest {
        hash_data(&self.to_bytes())
    }

    fn sections(&self) -> [&[u8]; 4] {
        [&self.wrapped_key, &self.enc_link, &self.data_ct, &self.stored_digest]
    }
}

/// Runs the three decryption steps and the integrity check, in order.
pub fn open_pipeline(
    bundle: &EnvelopeBundle,
    requester: &KeyPair,
    provider: &PublicKeys,
) -> Result<Vec<u8>, PipelineError> {
    let key_ct = verify_wrapped(&bundle.wrapped_key, provider)?;

    decrypt_link(&bundle.enc_link, requester)?;
    let ks = decrypt_key(requester, key_ct)?;

    let (data, stored) = open_sealed(&bundle.data_ct, &bundle.stored_digest, &ks)?;

    if hash_data(&data) != stored {
        return Err(PipelineError::DigestMismatch);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    fn bundle_for(data: &[u8], rng: &mut ChaCha20Rng) -> (EnvelopeBundle, KeyPair, KeyPair) {
        let provider = KeyPair::generate(rng);
        let requester = KeyPair::generate(rng);
        let ks = SymmetricKey::generate(rng);
        let (data_ct, stored_digest) = seal_for_cloud(data, &ks, rng);
        let bundle = EnvelopeBundle {
            wrapped_key: wrap_key_for_requester(&ks, &provider, &requester.public(), rng),
            enc_link: encrypt_link(&[9u8; 16], &requester.public(), rng),
            data_ct,
            stored_digest,
        };
        (bundle, provider, requester)
    }

    #[test]
    fn sha256_empty_vector() {
        assert_eq!(hash_data(b"").to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(hash_data(b"abc"), hash_data(b"abc"));
        assert_ne!(hash_data(b"abc"), hash_data(b"abd"));
    }

    #[test]
    fn seal_round_trip_and_wrong_key() {
        let mut r = rng();
        let ks = SymmetricKey::generate(&mut r);
        let (ct, dg) = seal_for_cloud(b"transport data", &ks, &mut r);
        let (data, digest) = open_sealed(&ct, &dg, &ks).unwrap();
        assert_eq!(data, b"transport data");
        assert_eq!(digest, hash_data(b"transport data"));

        let other = SymmetricKey::generate(&mut r);
        assert_eq!(open_sealed(&ct, &dg, &other), Err(PipelineError::AuthFailure));

        let mut bad = ct.clone();
        bad[NONCE_LEN + 3] ^= 0x40;
        assert_eq!(open_sealed(&bad, &dg, &ks), Err(PipelineError::AuthFailure));
    }

    #[test]
    fn wrap_unwrap() {
        let mut r = rng();
        let provider = KeyPair::generate(&mut r);
        let requester = KeyPair::generate(&mut r);
        let stranger = KeyPair::generate(&mut r);
        let ks = SymmetricKey::generate(&mut r);
        let w = wrap_key_for_requester(&ks, &provider, &requester.public(), &mut r);
        assert_eq!(unwrap_key(&w, &provider.public(), &requester).unwrap(), ks);
        assert_eq!(unwrap_key(&w, &stranger.public(), &requester), Err(PipelineError::SignatureInvalid));
        for i in [0, 63, 64, 100, w.len() - 1] {
            let mut t = w.clone();
            t[i] ^= 1;
            assert_eq!(
                unwrap_key(&t, &provider.public(), &requester),
                Err(PipelineError::SignatureInvalid),
                "byte {i}"
            );
        }
    }

    #[test]
    fn pipeline_round_trip_and_failures() {
        let mut r = rng();
        let (bundle, provider, requester) = bundle_for(b"rush hour counts", &mut r);
        assert_eq!(open_pipeline(&bundle, &requester, &provider.public()).unwrap(), b"rush hour counts");

        let stranger = KeyPair::generate(&mut r);
        assert_eq!(open_pipeline(&bundle, &stranger, &provider.public()), Err(PipelineError::LinkDecryptFailure));
        assert_eq!(open_pipeline(&bundle, &requester, &stranger.public()), Err(PipelineError::SignatureInvalid));
    }

    #[test]
    fn substituted_data_is_digest_mismatch() {
        let mut r = rng();
        let provider = KeyPair::generate(&mut r);
        let requester = KeyPair::generate(&mut r);
        let ks = SymmetricKey::generate(&mut r);
        let (_, stored_digest) = seal_for_cloud(b"genuine", &ks, &mut r);
        let (forged_ct, _) = seal_for_cloud(b"forged", &ks, &mut r);
        let bundle = EnvelopeBundle {
            wrapped_key: wrap_key_for_requester(&ks, &provider, &requester.public(), &mut r),
            enc_link: encrypt_link(&[1u8; 16], &requester.public(), &mut r),
            data_ct: forged_ct,
            stored_digest,
        };
        assert_eq!(open_pipeline(&bundle, &requester, &provider.public()), Err(PipelineError::DigestMismatch));
    }

    #[test]
    fn section_swap_is_rejected() {
        let mut r = rng();
        let (mut bundle, provider, requester) = bundle_for(&[5u8; 32], &mut r);
        std::mem::swap(&mut bundle.data_ct, &mut bundle.stored_digest);
        assert_eq!(open_pipeline(&bundle, &requester, &provider.public()), Err(PipelineError::AuthFailure));
    }

    #[test]
    fn container_layout() {
        let b = EnvelopeBundle {
            wrapped_key: vec![1, 2],
            enc_link: vec![],
            data_ct: vec![3],
            stored_digest: vec![4, 5, 6],
        };
        let bytes = b.to_bytes();
        assert_eq!(
            bytes,
            [b'D', b'S', b'E', b'B', 1, 0, 0, 0, 2, 1, 2, 0, 0, 0, 0, 0, 0, 0, 1, 3, 0, 0, 0, 3, 4, 5, 6]
        );
        assert_eq!(EnvelopeBundle::from_bytes(&bytes).unwrap(), b);
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(EnvelopeBundle::from_bytes(&trailing), Err(PipelineError::Malformed(_))));
        assert!(matches!(EnvelopeBundle::from_bytes(&bytes[..10]), Err(PipelineError::Malformed(_))));
    }

    #[test]
    fn digest_hex_is_strict() {
        let d = hash_data(b"x");
        assert_eq!(d.to_hex().parse::<Digest>().unwrap(), d);
        assert!(d.to_hex().to_uppercase().parse::<Digest>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pipeline_identity(data in proptest::collection::vec(any::<u8>(), 0..4096), seed in any::<u64>()) {
            let mut r = ChaCha20Rng::seed_from_u64(seed);
            let (bundle, provider, requester) = bundle_for(&data, &mut r);
            let bytes = bundle.to_bytes();
            let back = EnvelopeBundle::from_bytes(&bytes).unwrap();
            prop_assert_eq!(open_pipeline(&back, &requester, &provider.public()).unwrap(), data);
        }
    }
}
