//! The utility provider: program publication, token minting and blind
//! signing, per-report credential and MAC verification with secure
//! archiving, and token redemption with double-spend prevention.
//!
//! After the enrollment phases the provider only ever sees pseudonyms; its
//! participant records and consumption archive never contain a meter
//! identity. Report verification walks the credential hash chain backwards:
//! the first report's anchor is checked against the provider's own blind
//! signature, every later credential must hash to the previously accepted
//! one.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use chrono::{Duration, NaiveDateTime};
use thiserror::Error;


use crate::catalog::{
    datetime_to_secs, encode_catalog, generate_program_list, secs_to_datetime, CatalogError,
    CatalogRow, Program, RewardWeights,
};
use crate::codec::{CanonicalDecode, CanonicalEncode, CodecError, Decoder, Encoder, Money};
use crate::counters::OpCounters;
use crate::crypto::{
    hash32, keygen, mac, sign, sign_blinded, verify, CryptoError, Envelope, KeyId, KeyPair,
    PublicKey, SharedKey, Signature, SimRng, HASH_LEN,
};
use crate::meter::{AnonymousReport, Pseudonym};

/// Reference wire sizes (1024-bit keys) for provider-originated envelopes.
pub const CATALOG_ENVELOPE_TARGET_BYTES: usize = 0; // natural size; payload itself is 5,480 B
pub const GRANT_TARGET_BYTES: usize = 768;

/// Pre-provisioned public keys of every legitimate entity, keyed by
/// fingerprint.
pub type KeyDirectory = BTreeMap<KeyId, PublicKey>;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// Why an enrollment or report was rejected. Rejections are logged but never
/// acknowledged to the sender; the overlay is unidirectional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum RejectReason {
    DecryptionFailed,
    Malformed,
    UnknownSigner,
    BadSignature,
    UnknownProgram,
    DuplicateEnrollment,
    BadCredentialSignature,
    MacMismatch,
    ReplayedPseudonym,
    UnknownPseudonym,
    ChainBreak,
    OverReport,
}

impl RejectReason {
    /// Rejections caused by tampering or corruption (as opposed to protocol
    /// misuse such as over-reporting).
    pub fn is_integrity(self) -> bool {
        matches!(
            self,
            RejectReason::DecryptionFailed
                | RejectReason::Malformed
                | RejectReason::BadSignature
                | RejectReason::BadCredentialSignature
                | RejectReason::MacMismatch
                | RejectReason::ChainBreak
        )
    }
}

/// Spendable reward: ⟨value, expiration, activation, unique id⟩.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub value: Money,
    pub exp: NaiveDateTime,
    pub active: NaiveDateTime,
    pub uid: [u8; 16],
}

impl CanonicalEncode for Token {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.put_money(&self.value);
        enc.put_uint(datetime_to_secs(self.exp));
        enc.put_uint(datetime_to_secs(self.active));
        enc.put_bytes(&self.uid);
    }
}

impl CanonicalDecode for Token {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            value: dec.take_money()?,
            exp: secs_to_datetime(dec.take_uint()?)?,
            active: secs_to_datetime(dec.take_uint()?)?,
            uid: dec.take_array()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum TokenStatus {
    Issued,
    Spent,
}

#[derive(Debug, Clone)]
pub struct TokenLedgerEntry {
    pub token: Token,
    pub signature: Signature,
    pub status: TokenStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum DenyReason {
    BadSignature,
    NotActive,
    Expired,
    AlreadySpent,
    UnknownUid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RedemptionOutcome {
    /// Redeemed; the receipt is the provider's signature over the spent
    /// token, handed to the customer.
    Granted { receipt: Signature },
    Denied(DenyReason),
}

/// Append-only token ledger with linearizable redemption per uid. Shared
/// between the provider and concurrent redemption front-ends.
#[derive(Debug)]
pub struct TokenLedger {
    keys: KeyPair,
    inner: Mutex<LedgerInner>,
}

#[derive(Debug, Default)]
struct LedgerInner {
    entries: BTreeMap<[u8; 16], TokenLedgerEntry>,
    /// Append-only NDJSON mutation log.
    log: Vec<String>,
}

impl TokenLedger {
    pub fn new(keys: KeyPair) -> Self {
        Self {
            keys,
            inner: Mutex::new(LedgerInner::default()),
        }
    }

    pub fn contains(&self, uid: &[u8; 16]) -> bool {
        self.inner.lock().unwrap().entries.contains_key(uid)
    }

    pub fn insert_issued(&self, token: Token, signature: Signature) {
        let mut inner = self.inner.lock().unwrap();
        inner.log.push(format!(
            "{{\"event\":\"issued\",\"uid\":\"{}\",\"value\":\"{}\",\"active\":\"{}\",\"exp\":\"{}\"}}",
            hex::encode(token.uid),
            crate::catalog::format_money(&token.value),
            token.active,
            token.exp,
        ));
        inner.entries.insert(
            token.uid,
            TokenLedgerEntry {
                token,
                signature,
                status: TokenStatus::Issued,
            },
        );
    }

    /// Atomic verify-and-spend. The whole check-and-update runs under one
    /// lock so at most one Granted can ever be produced per uid.
    pub fn redeem(&self, token: &Token, sig: &Signature, now: NaiveDateTime) -> RedemptionOutcome {
        let token_bytes = token.encode();
        if !verify(&self.keys.public, &token_bytes, sig) {
            return RedemptionOutcome::Denied(DenyReason::BadSignature);
        }
        if now < token.active {
            return RedemptionOutcome::Denied(DenyReason::NotActive);
        }
        if now > token.exp {
            return RedemptionOutcome::Denied(DenyReason::Expired);
        }
        let mut inner = self.inner.lock().unwrap();
        let Some(entry) = inner.entries.get_mut(&token.uid) else {
            return RedemptionOutcome::Denied(DenyReason::UnknownUid);
        };
        match entry.status {
            TokenStatus::Spent => RedemptionOutcome::Denied(DenyReason::AlreadySpent),
            TokenStatus::Issued => {
                entry.status = TokenStatus::Spent;
                let line = format!(
                    "{{\"event\":\"spent\",\"uid\":\"{}\",\"at\":\"{now}\"}}",
                    hex::encode(token.uid)
                );
                inner.log.push(line);
                drop(inner);
                let receipt = sign(&self.keys.private, &token_bytes);
                RedemptionOutcome::Granted { receipt }
            }
        }
    }

    pub fn status_counts(&self) -> (u64, u64) {
        let inner = self.inner.lock().unwrap();
        let spent = inner
            .entries
            .values()
            .filter(|e| e.status == TokenStatus::Spent)
            .count() as u64;
        (inner.entries.len() as u64 - spent, spent)
    }

    pub fn entries(&self) -> Vec<TokenLedgerEntry> {
        self.inner.lock().unwrap().entries.values().cloned().collect()
    }

    /// Newline-delimited mutation log (the persistence format).
    pub fn export_ndjson(&self) -> String {
        let inner = self.inner.lock().unwrap();
        let mut out = inner.log.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}

/// Per-pseudonym verification state.
#[derive(Debug, Clone)]
pub struct ParticipantRecord {
    pub pseudonym: Pseudonym,
    pub last_validated_credential: [u8; HASH_LEN],
    pub reports_accepted: u32,
    pub program_id: u32,
}

/// One archived (privatized) consumption value.
#[derive(Debug, Clone)]
pub struct ConsumptionRecord {
    pub pseudonym: Pseudonym,
    pub interval_index: u32,
    pub window_start: Option<NaiveDateTime>,
    pub value_kwh: f64,
    pub noisy: bool,
    pub program_id: u32,
    pub accepted_at_ns: u64,
}

/// Append-only archive of accepted report values.
#[derive(Debug, Default)]
pub struct ConsumptionStore {
    records: Vec<ConsumptionRecord>,
}

impl ConsumptionStore {
    pub fn push(&mut self, record: ConsumptionRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ConsumptionRecord] {
        &self.records
    }

    /// The collected privatized dataset as CSV.
    pub fn export_csv(&self) -> String {
        let mut out = String::from("pseudonym,interval_index,window_start,value,noisy,program_id\n");
        for r in &self.records {
            let window = r
                .window_start
                .map(|w| w.format("%Y-%m-%dT%H:%M:%S").to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.pseudonym.to_hex(),
                r.interval_index,
                window,
                r.value_kwh,
                r.noisy,
                r.program_id
            ));
        }
        out
    }
}

/// Report acceptance summary handed back to the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportAccepted {
    pub pseudonym: Pseudonym,
    pub interval_index: u32,
    pub first: bool,
}

pub struct UtilityProvider {
    keys: KeyPair,
    rng: SimRng,
    weights: RewardWeights,
    catalog: Vec<Program>,
    catalog_bytes: Vec<u8>,
    /// Signed audit record of the published terms (non-repudiation of
    /// offers); signed once per publication.
    catalog_audit_sig: Option<Signature>,
    shared_key: Option<SharedKey>,
    participants: BTreeMap<[u8; 16], ParticipantRecord>,
    store: ConsumptionStore,
    ledger: std::sync::Arc<TokenLedger>,
    enrolled: BTreeSet<(KeyId, u32)>,
    /// Seen (pseudonym, interval) pairs, guarding the one-record-per-slot
    /// archive invariant.
    archived_slots: BTreeSet<([u8; 16], u32)>,
    retain_cipher_bytes: usize,
}

impl UtilityProvider {
    pub fn new(
        rsa_bits: u32,
        weights: RewardWeights,
        mut rng: SimRng,
        ops: &mut OpCounters,
    ) -> Result<Self, ProviderError> {
        let keys = keygen(rsa_bits, &mut rng)?;
        ops.keygen_asym += 1;
        Ok(Self {
            ledger: std::sync::Arc::new(TokenLedger::new(keys.clone())),
            keys,
            rng,
            weights,
            catalog: Vec::new(),
            catalog_bytes: Vec::new(),
            catalog_audit_sig: None,
            shared_key: None,
            participants: BTreeMap::new(),
            store: ConsumptionStore::default(),
            enrolled: BTreeSet::new(),
            archived_slots: BTreeSet::new(),
            retain_cipher_bytes: 0,
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn key_id(&self) -> KeyId {
        self.keys.public.key_id()
    }

    pub fn catalog(&self) -> &[Program] {
        &self.catalog
    }

    pub fn catalog_bytes(&self) -> &[u8] {
        &self.catalog_bytes
    }

    pub fn ledger(&self) -> std::sync::Arc<TokenLedger> {
        self.ledger.clone()
    }

    pub fn store(&self) -> &ConsumptionStore {
        &self.store
    }

    pub fn participants(&self) -> impl Iterator<Item = &ParticipantRecord> {
        self.participants.values()
    }

    pub fn shared_key(&self) -> Option<&SharedKey> {
        self.shared_key.as_ref()
    }

    /// Phase I: generate, validate, and sign the program catalog. Returns
    /// the canonical catalog bytes that get broadcast.
    pub fn publish_programs(
        &mut self,
        rows: &[CatalogRow],
        now: NaiveDateTime,
        ops: &mut OpCounters,
    ) -> Result<Vec<u8>, ProviderError> {
        let programs = generate_program_list(rows, &self.weights, now)?;
        ops.program_list_gens += 1;
        let bytes = encode_catalog(&programs);
        self.catalog_audit_sig = Some(sign(&self.keys.private, &bytes));
        ops.asym_ops += 1;
        self.catalog = programs;
        self.catalog_bytes = bytes.clone();
        Ok(bytes)
    }

    /// Wrap the published catalog for one meter.
    pub fn catalog_envelope_for(
        &mut self,
        pk_meter: &PublicKey,
        ops: &mut OpCounters,
    ) -> Result<Envelope, ProviderError> {
        let env = Envelope::encrypt_to_size(
            pk_meter,
            &self.catalog_bytes,
            &mut self.rng,
            CATALOG_ENVELOPE_TARGET_BYTES,
        )?;
        ops.asym_ops += 1;
        Ok(env)
    }

    /// Phases III: verify the enrollment, mint and sign the token, blind-sign
    /// the credential, and return the encrypted grant for the enrollee.
    pub fn handle_enrollment(
        &mut self,
        env: &Envelope,
        key_dir: &KeyDirectory,
        ops: &mut OpCounters,
    ) -> Result<(KeyId, Envelope), RejectReason> {
        let payload = match env.decrypt(&self.keys.private) {
            Ok(p) => {
                ops.asym_ops += 1;
                p
            }
            Err(_) => {
                ops.asym_ops += 1;
                return Err(RejectReason::DecryptionFailed);
            }
        };
        let mut dec = Decoder::new(&payload);
        let (message, sig) = (|| -> Result<_, CodecError> {
            let message = dec.take_bytes()?;
            let sig = Signature::decode_from(&mut dec)?;
            dec.expect_end()?;
            Ok((message, sig))
        })()
        .map_err(|_| RejectReason::Malformed)?;

        let Some(pk_meter) = key_dir.get(&sig.signer) else {
            return Err(RejectReason::UnknownSigner);
        };
        ops.asym_ops += 1;
        if !verify(pk_meter, message, &sig) {
            return Err(RejectReason::BadSignature);
        }

        let mut dec = Decoder::new(message);
        let (blinded, program) = (|| -> Result<_, CodecError> {
            let blinded = dec.take_biguint()?;
            let program = Program::decode_from(&mut dec)?;
            dec.expect_end()?;
            Ok((blinded, program))
        })()
        .map_err(|_| RejectReason::Malformed)?;

        // The echoed program must be one the provider actually published.
        if !self.catalog.iter().any(|p| *p == program) {
            return Err(RejectReason::UnknownProgram);
        }
        if !self.enrolled.insert((sig.signer, program.id)) {
            return Err(RejectReason::DuplicateEnrollment);
        }

        // Token dates: the final report lands at pat + pd days; activation
        // follows after the configured delay, expiry validDays later.
        let frdt = program.final_report_datetime();
        let active = frdt + Duration::seconds(program.tokinf.activation_delay_secs as i64);
        let exp = active + Duration::seconds(days_to_secs(&program.tokinf.valid_days));
        let token = Token {
            value: program.tokinf.value,
            exp,
            active,
            uid: self.fresh_uid(),
        };
        ops.token_gens += 1;

        let token_bytes = token.encode();
        let token_sig = sign(&self.keys.private, &token_bytes);
        ops.asym_ops += 1;
        let blinded_sig = match sign_blinded(&blinded, &self.keys.private) {
            Ok(s) => s,
            Err(_) => return Err(RejectReason::Malformed),
        };
        ops.asym_ops += 1;

        let mut inner = Encoder::new();
        blinded_sig.encode_into(&mut inner);
        token.encode_into(&mut inner);
        token_sig.encode_into(&mut inner);
        let inner = inner.finish();

        let outer_sig = sign(&self.keys.private, &inner);
        ops.asym_ops += 1;
        let mut grant = Encoder::new();
        grant.put_bytes(&inner);
        outer_sig.encode_into(&mut grant);
        let target = if self.keys.public.bits == 1024 {
            GRANT_TARGET_BYTES
        } else {
            0
        };
        let grant_env = Envelope::encrypt_to_size(pk_meter, &grant.finish(), &mut self.rng, target)
            .expect("grant payload is never empty");
        ops.asym_ops += 1;

        self.ledger.insert_issued(token, token_sig);
        ops.ledger_ops += 1;
        Ok((sig.signer, grant_env))
    }

    fn fresh_uid(&mut self) -> [u8; 16] {
        loop {
            let uid: [u8; 16] = self.rng.bytes();
            if !self.ledger.contains(&uid) {
                return uid;
            }
        }
    }

    /// Phase V: receive the aggregator-distributed shared key and re-verify
    /// it against the generating meter's public key.
    pub fn receive_shared_key(
        &mut self,
        env: &Envelope,
        generator_pk: &PublicKey,
        ops: &mut OpCounters,
    ) -> Result<(), RejectReason> {
        ops.asym_ops += 1;
        let payload = env.decrypt(&self.keys.private).map_err(|_| RejectReason::DecryptionFailed)?;
        let mut dec = Decoder::new(&payload);
        let (key, sig) = (|| -> Result<_, CodecError> {
            let key = SharedKey(dec.take_array()?);
            let sig = Signature::decode_from(&mut dec)?;
            dec.expect_end()?;
            Ok((key, sig))
        })()
        .map_err(|_| RejectReason::Malformed)?;
        ops.asym_ops += 1;
        if !verify(generator_pk, &key.0, &sig) {
            return Err(RejectReason::BadSignature);
        }
        self.shared_key = Some(key);
        Ok(())
    }

    /// Phase VII: decrypt and verify one anonymous report, first or
    /// subsequent, and archive its value.
    pub fn handle_report(
        &mut self,
        env: &Envelope,
        accepted_at_ns: u64,
        ops: &mut OpCounters,
    ) -> Result<ReportAccepted, RejectReason> {
        ops.asym_ops += 1;
        let payload = env.decrypt(&self.keys.private).map_err(|_| RejectReason::DecryptionFailed)?;
        self.retain_cipher_bytes = self.retain_cipher_bytes.max(env.encoded_len());
        let report = AnonymousReport::decode(&payload).map_err(|_| RejectReason::Malformed)?;
        if report.up_signature.is_some() {
            self.verify_first_report(report, accepted_at_ns, ops)
        } else {
            self.verify_subsequent_report(report, accepted_at_ns, ops)
        }
    }

    /// First report: the credential must carry the provider's own signature
    /// (obtained blind at enrollment), and the MAC must check out.
    fn verify_first_report(
        &mut self,
        report: AnonymousReport,
        accepted_at_ns: u64,
        ops: &mut OpCounters,
    ) -> Result<ReportAccepted, RejectReason> {
        let sig = report.up_signature.as_ref().expect("checked by caller");
        ops.asym_ops += 1;
        if !verify(&self.keys.public, &report.credential, sig) {
            return Err(RejectReason::BadCredentialSignature);
        }
        self.check_mac(&report, ops)?;
        if self.participants.contains_key(&report.pseudonym.0) {
            return Err(RejectReason::ReplayedPseudonym);
        }
        self.participants.insert(
            report.pseudonym.0,
            ParticipantRecord {
                pseudonym: report.pseudonym,
                last_validated_credential: report.credential,
                reports_accepted: 1,
                program_id: report.program_id,
            },
        );
        ops.db_ops += 1;
        self.archive(&report, accepted_at_ns, ops);
        Ok(ReportAccepted {
            pseudonym: report.pseudonym,
            interval_index: report.reading.interval_index,
            first: true,
        })
    }

    /// Subsequent report: the revealed credential must hash to the stored
    /// one; on success it becomes the new latest accepted credential.
    fn verify_subsequent_report(
        &mut self,
        report: AnonymousReport,
        accepted_at_ns: u64,
        ops: &mut OpCounters,
    ) -> Result<ReportAccepted, RejectReason> {
        ops.db_ops += 1; // stored-credential lookup
        let n = self
            .catalog
            .iter()
            .find(|p| p.id == report.program_id)
            .map(Program::report_count);
        let Some(record) = self.participants.get(&report.pseudonym.0) else {
            return Err(RejectReason::UnknownPseudonym);
        };
        if let Some(n) = n {
            if record.reports_accepted >= n {
                return Err(RejectReason::OverReport);
            }
        }
        ops.hashes += 1;
        ops.arithmetic += 1; // credential equality check
        if hash32(&report.credential) != record.last_validated_credential {
            return Err(RejectReason::ChainBreak);
        }
        self.check_mac(&report, ops)?;
        let record = self.participants.get_mut(&report.pseudonym.0).expect("present");
        record.last_validated_credential = report.credential;
        record.reports_accepted += 1;
        ops.db_ops += 1; // credential update
        self.archive(&report, accepted_at_ns, ops);
        Ok(ReportAccepted {
            pseudonym: report.pseudonym,
            interval_index: report.reading.interval_index,
            first: false,
        })
    }

    fn check_mac(&self, report: &AnonymousReport, ops: &mut OpCounters) -> Result<(), RejectReason> {
        let key = self.shared_key.as_ref().ok_or(RejectReason::MacMismatch)?;
        let expected = mac(
            key,
            &AnonymousReport::mac_message(report.reading.value_kwh, report.pseudonym),
        );
        ops.macs += 1;
        ops.arithmetic += 1; // tag equality check
        if expected != report.tag {
            return Err(RejectReason::MacMismatch);
        }
        Ok(())
    }

    fn archive(&mut self, report: &AnonymousReport, accepted_at_ns: u64, ops: &mut OpCounters) {
        let slot = (report.pseudonym.0, report.reading.interval_index);
        debug_assert!(
            self.archived_slots.insert(slot),
            "one record per (pseudonym, interval)"
        );
        self.store.push(ConsumptionRecord {
            pseudonym: report.pseudonym,
            interval_index: report.reading.interval_index,
            window_start: report.reading.window_start,
            value_kwh: report.reading.value_kwh,
            noisy: report.reading.noisy,
            program_id: report.program_id,
            accepted_at_ns,
        });
        ops.db_ops += 1;
    }

    /// Phase VIII: verify the token signature and dates, then spend it
    /// atomically. Granted redemptions get a signed receipt.
    pub fn redeem_token(
        &mut self,
        token: &Token,
        sig: &Signature,
        now: NaiveDateTime,
        ops: &mut OpCounters,
    ) -> RedemptionOutcome {
        ops.asym_ops += 1; // token signature verification
        ops.ledger_ops += 2; // status lookup + update
        let outcome = self.ledger.redeem(token, sig, now);
        if matches!(outcome, RedemptionOutcome::Granted { .. }) {
            ops.asym_ops += 1; // receipt signature
        }
        outcome
    }

    /// Approximate live protocol-state footprint in bytes.
    pub fn retained_bytes(&self) -> usize {
        let records = self.store.len() * std::mem::size_of::<ConsumptionRecord>();
        let participants = self.participants.len() * std::mem::size_of::<ParticipantRecord>();
        let ledger = self.ledger.entries().len() * 128;
        self.catalog_bytes.len() + records + participants + ledger + self.retain_cipher_bytes
            + 3 * self.keys.public.modulus_len()
    }
}

/// Whole days (possibly fractional) to seconds, flooring sub-second rests.
fn days_to_secs(days: &Money) -> i64 {
    let secs = days * Money::from_integer(86_400);
    secs.numer() / secs.denom()
}
