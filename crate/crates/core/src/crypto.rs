//! Symmetric primitives every scheme is built from.
//!
//! The PRF is HMAC-SHA256 over a one-octet label, expanded in counter mode to
//! the configured key width. Encryption is a PRF-derived counter-mode stream
//! with a truncated HMAC tag; the tag exists so that a wrong key is always
//! detected, which keeps key-recovery experiments deterministic.

use std::fmt;

use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::{Zeroize, Zeroizing};

use crate::key_tree::VersionedKeyId;
use crate::wire::{Reader, WireError, Writer};

type HmacSha256 = Hmac<Sha256>;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

const PRF_DOMAIN: &[u8] = b"gkm.prf";
const STREAM_DOMAIN: &[u8] = b"gkm.ctr";
const TAG_DOMAIN: &[u8] = b"gkm.tag";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key material has been erased")]
    ErasedKey,
    #[error("decryption failed: integrity tag mismatch")]
    DecryptFailure,
    #[error("unsupported key length of {0} bits (need a multiple of 8 in 64..=512)")]
    BadKeyLength(usize),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Security parameter in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyLength(usize);

impl KeyLength {
    pub const DEFAULT: KeyLength = KeyLength(128);

    pub fn from_bits(bits: usize) -> Result<Self, CryptoError> {
        if !bits.is_multiple_of(8) || !(64..=512).contains(&bits) {
            return Err(CryptoError::BadKeyLength(bits));
        }
        Ok(KeyLength(bits))
    }

    pub fn bits(self) -> usize {
        self.0
    }

    pub fn bytes(self) -> usize {
        self.0 / 8
    }
}

impl Default for KeyLength {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Key material with explicit erasure.
///
/// Reading an erased key is an error rather than a silent zero read, so any
/// code path that touches a retired key fails loudly.
#[derive(Clone)]
pub struct SecretKey {
    bytes: Vec<u8>,
    erased: bool,
}

impl SecretKey {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes, erased: false }
    }

    pub fn expose(&self) -> Result<&[u8], CryptoError> {
        if self.erased {
            Err(CryptoError::ErasedKey)
        } else {
            Ok(&self.bytes)
        }
    }

    pub fn is_erased(&self) -> bool {
        self.erased
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Byte equality that treats erased keys as unequal to everything.
    pub fn same_material(&self, other: &SecretKey) -> bool {
        match (self.expose(), other.expose()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        }
    }

    /// First eight hex digits of SHA-256 over the key bytes.
    pub fn fingerprint(&self) -> String {
        match self.expose() {
            Ok(bytes) => hex::encode(&Sha256::digest(bytes)[..4]),
            Err(_) => "erased".to_string(),
        }
    }

    pub fn to_hex(&self) -> String {
        match self.expose() {
            Ok(bytes) => hex::encode(bytes),
            Err(_) => "erased".to_string(),
        }
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey({})", self.fingerprint())
    }
}

impl Drop for SecretKey {
    fn drop(&mut self) {
        self.bytes.zeroize();
    }
}

/// The two PRF inputs: `Enc` yields the one-shot encryption key, `Next` the
/// evolved long-lived key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrfLabel {
    Enc,
    Next,
}

impl PrfLabel {
    pub fn octet(self) -> u8 {
        match self {
            PrfLabel::Enc => 0x00,
            PrfLabel::Next => 0x01,
        }
    }
}

/// Whether a ciphertext was produced under a stored key directly or under its
/// `Enc` derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyUsage {
    Raw,
    Enc,
}

impl KeyUsage {
    fn octet(self) -> u8 {
        match self {
            KeyUsage::Raw => 0,
            KeyUsage::Enc => 1,
        }
    }

    fn from_octet(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(KeyUsage::Raw),
            1 => Ok(KeyUsage::Enc),
            value => Err(WireError::BadTag {
                field: "key usage",
                value,
            }),
        }
    }
}

fn mac(key: &[u8]) -> HmacSha256 {
    HmacSha256::new_from_slice(key).expect("hmac accepts any key length")
}

pub fn gen_key<R: RngCore + CryptoRng + ?Sized>(rng: &mut R, len: KeyLength) -> SecretKey {
    let mut bytes = vec![0u8; len.bytes()];
    rng.fill_bytes(&mut bytes);
    SecretKey::from_bytes(bytes)
}

/// `f_k(label)`; output width equals input width.
pub fn prf_eval(key: &SecretKey, label: PrfLabel) -> Result<SecretKey, CryptoError> {
    let k = key.expose()?;
    let mut out = Vec::with_capacity(k.len());
    let mut block = 0u8;
    while out.len() < k.len() {
        let mut m = mac(k);
        m.update(PRF_DOMAIN);
        m.update(&[label.octet(), block]);
        let digest = m.finalize().into_bytes();
        let take = (k.len() - out.len()).min(digest.len());
        out.extend_from_slice(&digest[..take]);
        block += 1;
    }
    Ok(SecretKey::from_bytes(out))
}

/// Counts PRF evaluations made on behalf of one party.
#[derive(Debug, Clone, Default)]
pub struct PrfMeter {
    total: u64,
    next: u64,
    mark: u64,
}

impl PrfMeter {
    pub fn eval(&mut self, key: &SecretKey, label: PrfLabel) -> Result<SecretKey, CryptoError> {
        let out = prf_eval(key, label)?;
        self.total += 1;
        if label == PrfLabel::Next {
            self.next += 1;
        }
        Ok(out)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Evaluations with the `Next` label only.
    pub fn next_total(&self) -> u64 {
        self.next
    }

    /// Evaluations since the previous call.
    pub fn take_since_mark(&mut self) -> u64 {
        let n = self.total - self.mark;
        self.mark = self.total;
        n
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub key_id: VersionedKeyId,
    pub usage: KeyUsage,
    pub nonce: Vec<u8>,
    pub body: Vec<u8>,
    pub tag: Vec<u8>,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("key_id", &self.key_id)
            .field("usage", &self.usage)
            .field("body_len", &self.body.len())
            .finish()
    }
}

fn key_id_bytes(id: &VersionedKeyId, usage: KeyUsage) -> [u8; 13] {
    let mut out = [0u8; 13];
    out[..4].copy_from_slice(&id.node.0.to_be_bytes());
    out[4..8].copy_from_slice(&id.generation.to_be_bytes());
    out[8..12].copy_from_slice(&id.epoch.to_be_bytes());
    out[12] = usage.octet();
    out
}

fn apply_stream(key: &[u8], nonce: &[u8], data: &mut [u8]) {
    for (counter, chunk) in data.chunks_mut(32).enumerate() {
        let mut m = mac(key);
        m.update(STREAM_DOMAIN);
        m.update(nonce);
        m.update(&(counter as u32).to_be_bytes());
        let pad = m.finalize().into_bytes();
        for (b, p) in chunk.iter_mut().zip(pad.iter()) {
            *b ^= p;
        }
    }
}

fn compute_tag(key: &[u8], header: &[u8], nonce: &[u8], body: &[u8]) -> HmacSha256 {
    let mut m = mac(key);
    m.update(TAG_DOMAIN);
    m.update(header);
    m.update(nonce);
    m.update(body);
    m
}

impl Ciphertext {
    pub fn wire_key_id(&self) -> [u8; 13] {
        key_id_bytes(&self.key_id, self.usage)
    }

    pub fn encode_into(&self, w: &mut Writer) -> Result<(), WireError> {
        w.prefixed(&self.wire_key_id())?
            .prefixed(&self.nonce)?
            .prefixed(&self.body)?
            .prefixed(&self.tag)?;
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new();
        self.encode_into(&mut w)?;
        Ok(w.into_bytes())
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let id = r.prefixed()?;
        if id.len() != 13 {
            return Err(WireError::Malformed("key id must be 13 bytes"));
        }
        let word = |i: usize| u32::from_be_bytes([id[i], id[i + 1], id[i + 2], id[i + 3]]);
        let key_id = VersionedKeyId {
            node: crate::key_tree::NodeId(word(0)),
            generation: word(4),
            epoch: word(8),
        };
        let usage = KeyUsage::from_octet(id[12])?;
        let nonce = r.prefixed()?.to_vec();
        let body = r.prefixed()?.to_vec();
        let tag = r.prefixed()?.to_vec();
        Ok(Self {
            key_id,
            usage,
            nonce,
            body,
            tag,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let ct = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(ct)
    }
}

/// Encrypts `plaintext` under `key`. `key_id`/`usage` are public labels that
/// tell recipients which of their keys (and which derivation) to use.
pub fn encrypt<R: RngCore + CryptoRng + ?Sized>(
    key: &SecretKey,
    plaintext: &[u8],
    key_id: VersionedKeyId,
    usage: KeyUsage,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    let k = key.expose()?;
    let mut nonce = vec![0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut body = plaintext.to_vec();
    apply_stream(k, &nonce, &mut body);
    let header = key_id_bytes(&key_id, usage);
    let tag = compute_tag(k, &header, &nonce, &body).finalize().into_bytes()[..TAG_LEN].to_vec();
    Ok(Ciphertext {
        key_id,
        usage,
        nonce,
        body,
        tag,
    })
}

pub fn decrypt(key: &SecretKey, ct: &Ciphertext) -> Result<Zeroizing<Vec<u8>>, CryptoError> {
    let k = key.expose()?;
    compute_tag(k, &ct.wire_key_id(), &ct.nonce, &ct.body)
        .verify_truncated_left(&ct.tag)
        .map_err(|_| CryptoError::DecryptFailure)?;
    if ct.tag.len() != TAG_LEN {
        return Err(CryptoError::DecryptFailure);
    }
    let mut out = Zeroizing::new(ct.body.clone());
    apply_stream(k, &ct.nonce, &mut out);
    Ok(out)
}

/// Overwrites the key bytes with zeros and marks the key erased. Idempotent.
pub fn secure_erase(key: &mut SecretKey) {
    key.bytes.as_mut_slice().zeroize();
    key.erased = true;
}
