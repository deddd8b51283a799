//! The smart-meter state machine.
//!
//! Lifecycle: receive the program catalog, enroll (build the credential
//! chain, blind its last link, sign and encrypt the enrollment), process the
//! grant (verify, unblind, erase the blinding factor), optionally generate
//! the shared MAC key when designated by the aggregator, then emit one
//! anonymous report per window: temporal aggregation, local-DP perturbation,
//! purpose-driven data minimization, MAC, and envelope encryption to the
//! provider. After the final report the token is released to the customer
//! once its activation time passes.

use chrono::{Duration, NaiveDateTime};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::catalog::{validate_program, Program, Purpose};
use crate::codec::{CanonicalDecode, CanonicalEncode, CodecError, Decoder, Encoder};
use crate::counters::OpCounters;
use crate::crypto::{
    blind, keygen, mac, sign, unblind, verify, BlindingFactor, CredentialChain, CryptoError,
    Envelope, KeyId, KeyPair, MacTag, PublicKey, SharedKey, Signature, SimRng, HASH_LEN,
};
use crate::provider::Token;

/// Native dataset cadence.
pub const READING_INTERVAL_MINUTES: i64 = 15;
pub const READINGS_PER_DAY: u32 = 96;

/// Reference wire sizes (at the 1024-bit key size) that outbound envelopes
/// are padded up to.
pub const ENROLLMENT_TARGET_BYTES: usize = 1024;
pub const SHARED_KEY_TARGET_BYTES: usize = 512;
pub const FIRST_REPORT_TARGET_BYTES: usize = 512;
pub const SUBSEQUENT_REPORT_TARGET_BYTES: usize = 256;

#[derive(Debug, Error)]
pub enum MeterError {
    #[error("operation invalid in phase {0:?}")]
    WrongPhase(MeterPhase),
    #[error("selected program failed validation")]
    InvalidProgram,
    #[error("integrity violation detected: {0}")]
    IntegrityViolation(&'static str),
    #[error("shared MAC key not yet distributed")]
    MissingSharedKey,
    #[error("all {0} reports already sent")]
    ProtocolComplete(u32),
    #[error("reading window malformed: {0}")]
    BadWindow(String),
    #[error("missing readings in window starting {0}")]
    MissingData(NaiveDateTime),
    #[error("token withheld: program not finished")]
    TokenWithheld,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct MeterId(pub String);

/// Random 128-bit pseudonym, fresh per enrollment, constant across all
/// reports of that program, never derived from the meter id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pseudonym(pub [u8; 16]);

impl Pseudonym {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeterPhase {
    Idle,
    Enrolled,
    AwaitingGrant,
    Reporting(u32),
    Done,
}

/// One fine-grained dataset row.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub timestamp: NaiveDateTime,
    pub active_kwh: f64,
    pub reactive_kvarh: f64,
    pub quality: Option<u8>,
    pub firmware: Option<String>,
}

/// Temporally aggregated (and possibly perturbed, then minimized) reading.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseReading {
    pub interval_index: u32,
    pub window_start: Option<NaiveDateTime>,
    pub window_end: Option<NaiveDateTime>,
    pub value_kwh: f64,
    pub noisy: bool,
    pub quality: Option<u8>,
    pub pseudonym: Pseudonym,
}

impl CanonicalEncode for CoarseReading {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.put_uint(u64::from(self.interval_index));
        put_opt_datetime(enc, self.window_start);
        put_opt_datetime(enc, self.window_end);
        enc.put_f64(self.value_kwh);
        enc.put_bool(self.noisy);
        match self.quality {
            Some(q) => {
                enc.put_bool(true);
                enc.put_uint(u64::from(q));
            }
            None => {
                enc.put_bool(false);
            }
        }
        enc.put_bytes(&self.pseudonym.0);
    }
}

impl CanonicalDecode for CoarseReading {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let interval_index =
            u32::try_from(dec.take_uint()?).map_err(|_| CodecError::IntegerOverflow)?;
        let window_start = take_opt_datetime(dec)?;
        let window_end = take_opt_datetime(dec)?;
        let value_kwh = dec.take_f64()?;
        let noisy = dec.take_bool()?;
        let quality = if dec.take_bool()? {
            Some(u8::try_from(dec.take_uint()?).map_err(|_| CodecError::IntegerOverflow)?)
        } else {
            None
        };
        let pseudonym = Pseudonym(dec.take_array()?);
        Ok(Self {
            interval_index,
            window_start,
            window_end,
            value_kwh,
            noisy,
            quality,
            pseudonym,
        })
    }
}

fn put_opt_datetime(enc: &mut Encoder, dt: Option<NaiveDateTime>) {
    match dt {
        Some(dt) => {
            enc.put_bool(true);
            enc.put_uint(crate::catalog::datetime_to_secs(dt));
        }
        None => {
            enc.put_bool(false);
        }
    }
}

fn take_opt_datetime(dec: &mut Decoder<'_>) -> Result<Option<NaiveDateTime>, CodecError> {
    if dec.take_bool()? {
        Ok(Some(crate::catalog::secs_to_datetime(dec.take_uint()?)?))
    } else {
        Ok(None)
    }
}

/// Local-DP noise configuration: `sigma_hat = nsc * delta_c / epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NoiseParams {
    pub epsilon: f64,
    pub delta_c: f64,
    pub nsc: f64,
}

impl NoiseParams {
    pub fn new(epsilon: f64, delta_c: f64, nsc: f64) -> Result<Self, MeterError> {
        if !(epsilon > 0.0) || !(delta_c > 0.0) || !(nsc >= 0.0) {
            return Err(MeterError::BadWindow(
                "noise parameters must satisfy epsilon > 0, delta_c > 0, nsc >= 0".into(),
            ));
        }
        Ok(Self {
            epsilon,
            delta_c,
            nsc,
        })
    }

    /// Sensitivity default: the largest plausible per-window household
    /// consumption, `(24h / freq) * p_max_kwh_per_hour`.
    pub fn for_program(program: &Program, epsilon: f64, p_max_kwh_per_hour: f64) -> Result<Self, MeterError> {
        let window_hours = 24.0 / f64::from(program.freq);
        let nsc = *program.nsc.numer() as f64 / *program.nsc.denom() as f64;
        Self::new(epsilon, window_hours * p_max_kwh_per_hour, nsc)
    }

    pub fn sigma_base(&self) -> f64 {
        self.delta_c / self.epsilon
    }

    pub fn sigma_hat(&self) -> f64 {
        self.nsc * self.sigma_base()
    }
}

/// The anonymous report envelope content. The provider's signature on the
/// chain anchor rides along only on the first report; the program id is
/// attached in the clear (the reporting cadence reveals it anyway).
#[derive(Debug, Clone, PartialEq)]
pub struct AnonymousReport {
    pub credential: [u8; HASH_LEN],
    pub up_signature: Option<Signature>,
    pub reading: CoarseReading,
    pub pseudonym: Pseudonym,
    pub tag: MacTag,
    pub program_id: u32,
}

impl AnonymousReport {
    /// The exact byte string the MAC covers: reading value, then pseudonym.
    pub fn mac_message(value_kwh: f64, pseudonym: Pseudonym) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.put_f64(value_kwh);
        enc.put_bytes(&pseudonym.0);
        enc.finish()
    }
}

impl CanonicalEncode for AnonymousReport {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.put_bytes(&self.credential);
        match &self.up_signature {
            Some(sig) => {
                enc.put_bool(true);
                sig.encode_into(enc);
            }
            None => {
                enc.put_bool(false);
            }
        }
        self.reading.encode_into(enc);
        enc.put_bytes(&self.pseudonym.0);
        self.tag.encode_into(enc);
        enc.put_uint(u64::from(self.program_id));
    }
}

impl CanonicalDecode for AnonymousReport {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let credential = dec.take_array()?;
        let up_signature = if dec.take_bool()? {
            Some(Signature::decode_from(dec)?)
        } else {
            None
        };
        let reading = CoarseReading::decode_from(dec)?;
        let pseudonym = Pseudonym(dec.take_array()?);
        let tag = MacTag::decode_from(dec)?;
        let program_id =
            u32::try_from(dec.take_uint()?).map_err(|_| CodecError::IntegerOverflow)?;
        Ok(Self {
            credential,
            up_signature,
            reading,
            pseudonym,
            tag,
            program_id,
        })
    }
}

/// Policy for filling gaps in a reading window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GapPolicy {
    /// Fail the window on any missing reading.
    Strict,
    /// Fill interior gaps by linear interpolation and flag the window.
    Interpolate,
}

/// Sum a window of contiguous 15-minute readings into one coarse value.
/// The window must start at `window_start` and span `24h / freq`.
/// Returns the coarse reading and whether any gap was interpolated.
pub fn aggregate(
    window: &[Reading],
    freq: u32,
    window_start: NaiveDateTime,
    interval_index: u32,
    pseudonym: Pseudonym,
    gap_policy: GapPolicy,
) -> Result<(CoarseReading, bool), MeterError> {
    let slots = READINGS_PER_DAY / freq;
    let step = Duration::minutes(READING_INTERVAL_MINUTES);
    let window_end = window_start + step * slots as i32;

    let mut values: Vec<Option<f64>> = vec![None; slots as usize];
    for r in window {
        if r.timestamp < window_start || r.timestamp >= window_end {
            return Err(MeterError::BadWindow(format!(
                "reading at {} outside window [{window_start}, {window_end})",
                r.timestamp
            )));
        }
        let offset = (r.timestamp - window_start).num_minutes();
        if offset % READING_INTERVAL_MINUTES != 0 {
            return Err(MeterError::BadWindow(format!(
                "reading at {} off the 15-minute grid",
                r.timestamp
            )));
        }
        let slot = (offset / READING_INTERVAL_MINUTES) as usize;
        if values[slot].is_some() {
            return Err(MeterError::BadWindow(format!(
                "duplicate reading at {}",
                r.timestamp
            )));
        }
        values[slot] = Some(r.active_kwh);
    }

    let mut interpolated = false;
    if values.iter().any(Option::is_none) {
        match gap_policy {
            GapPolicy::Strict => return Err(MeterError::MissingData(window_start)),
            GapPolicy::Interpolate => {
                fill_gaps(&mut values).map_err(|()| MeterError::MissingData(window_start))?;
                interpolated = true;
            }
        }
    }

    let value_kwh = values.iter().map(|v| v.unwrap()).sum();
    Ok((
        CoarseReading {
            interval_index,
            window_start: Some(window_start),
            window_end: Some(window_end),
            value_kwh,
            noisy: false,
            quality: window.iter().filter_map(|r| r.quality).max(),
            pseudonym,
        },
        interpolated,
    ))
}

/// Linear interpolation across interior runs of missing slots; edge gaps
/// copy the nearest present value. Fails when the window is entirely empty.
fn fill_gaps(values: &mut [Option<f64>]) -> Result<(), ()> {
    let present: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    if present.is_empty() {
        return Err(());
    }
    for i in 0..values.len() {
        if values[i].is_some() {
            continue;
        }
        let prev = present.iter().copied().filter(|&p| p < i).max();
        let next = present.iter().copied().filter(|&p| p > i).min();
        values[i] = Some(match (prev, next) {
            (Some(p), Some(nx)) => {
                let a = values[p].unwrap();
                let b = values[nx].unwrap();
                a + (b - a) * ((i - p) as f64) / ((nx - p) as f64)
            }
            (Some(p), None) => values[p].unwrap(),
            (None, Some(nx)) => values[nx].unwrap(),
            (None, None) => unreachable!(),
        });
    }
    Ok(())
}

/// Outcome of one perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbOutcome {
    /// Whether a noise draw happened (false exactly when nsc = 0).
    pub perturbed: bool,
    /// Negative result clamped to zero.
    pub clamped: bool,
}

/// Gaussian local-DP mechanism. With a zero noise scale the reading passes
/// through bit-exact; otherwise `value += N(0, sigma_hat^2)` with negative
/// results clamped to zero (energy cannot be negative).
pub fn perturb(
    reading: &mut CoarseReading,
    params: &NoiseParams,
    rng: &mut SimRng,
) -> PerturbOutcome {
    if params.nsc == 0.0 {
        reading.noisy = false;
        return PerturbOutcome {
            perturbed: false,
            clamped: false,
        };
    }
    let normal = Normal::new(0.0, params.sigma_hat()).expect("sigma_hat is finite and positive");
    let noise = normal.sample(rng);
    let raw = reading.value_kwh + noise;
    let clamped = raw < 0.0;
    reading.value_kwh = if clamped { 0.0 } else { raw };
    reading.noisy = true;
    PerturbOutcome {
        perturbed: true,
        clamped,
    }
}

/// Which optional fields each collection purpose retains. Value and interval
/// index always survive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSet {
    pub window: bool,
    pub quality: bool,
}

/// Purpose-driven data minimization map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimizeMap {
    pub data_driven: FieldSet,
    pub tariff: FieldSet,
    pub operational: FieldSet,
    pub advertisement: FieldSet,
}

impl Default for MinimizeMap {
    fn default() -> Self {
        let window_only = FieldSet {
            window: true,
            quality: false,
        };
        Self {
            data_driven: window_only,
            tariff: window_only,
            operational: FieldSet {
                window: true,
                quality: true,
            },
            advertisement: FieldSet {
                window: false,
                quality: false,
            },
        }
    }
}

impl MinimizeMap {
    pub fn get(&self, p: Purpose) -> FieldSet {
        match p {
            Purpose::DataDrivenServices => self.data_driven,
            Purpose::TariffSpecification => self.tariff,
            Purpose::OperationalServices => self.operational,
            Purpose::Advertisement => self.advertisement,
        }
    }
}

/// Drop every field the purpose does not need. Idempotent.
pub fn minimize(reading: &CoarseReading, prp: Purpose, map: &MinimizeMap) -> CoarseReading {
    let keep = map.get(prp);
    CoarseReading {
        interval_index: reading.interval_index,
        window_start: reading.window_start.filter(|_| keep.window),
        window_end: reading.window_end.filter(|_| keep.window),
        value_kwh: reading.value_kwh,
        noisy: reading.noisy,
        quality: reading.quality.filter(|_| keep.quality),
        pseudonym: reading.pseudonym,
    }
}

/// Token release outcome after the program completes.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenRelease {
    Released(Token, Signature),
    NotYet,
}

/// What happened while producing one report, for metrics accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportSideEffects {
    pub perturbed: bool,
    pub clamped: bool,
    pub interpolated: bool,
}

pub struct Meter {
    id: MeterId,
    keys: KeyPair,
    rng: SimRng,
    phase: MeterPhase,
    selected: Option<Program>,
    chain: Option<CredentialChain>,
    bf: Option<BlindingFactor>,
    up_sig_on_last: Option<Signature>,
    token: Option<(Token, Signature)>,
    pseudonym: Option<Pseudonym>,
    shared_key: Option<SharedKey>,
    designated: bool,
    noise: Option<NoiseParams>,
    minimize_map: MinimizeMap,
    /// Retain sent/received ciphertexts (worst-case memory accounting mode).
    retain_ciphers: bool,
    retained: Vec<Vec<u8>>,
    catalog_bytes: usize,
}

impl Meter {
    pub fn new(id: MeterId, rsa_bits: u32, mut rng: SimRng, ops: &mut OpCounters) -> Result<Self, MeterError> {
        let keys = keygen(rsa_bits, &mut rng)?;
        ops.keygen_asym += 1;
        Ok(Self {
            id,
            keys,
            rng,
            phase: MeterPhase::Idle,
            selected: None,
            chain: None,
            bf: None,
            up_sig_on_last: None,
            token: None,
            pseudonym: None,
            shared_key: None,
            designated: false,
            noise: None,
            minimize_map: MinimizeMap::default(),
            retain_ciphers: true,
            retained: Vec::new(),
            catalog_bytes: 0,
        })
    }

    pub fn id(&self) -> &MeterId {
        &self.id
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn key_id(&self) -> KeyId {
        self.keys.public.key_id()
    }

    pub fn phase(&self) -> MeterPhase {
        self.phase
    }

    pub fn pseudonym(&self) -> Option<Pseudonym> {
        self.pseudonym
    }

    pub fn shared_key(&self) -> Option<&SharedKey> {
        self.shared_key.as_ref()
    }

    pub fn selected_program(&self) -> Option<&Program> {
        self.selected.as_ref()
    }

    pub fn blind_factor_retained(&self) -> bool {
        self.bf.is_some()
    }

    pub fn set_retain_ciphers(&mut self, retain: bool) {
        self.retain_ciphers = retain;
    }

    pub fn set_noise_params(&mut self, params: NoiseParams) {
        self.noise = Some(params);
    }

    fn keep(&mut self, bytes: &[u8]) {
        if self.retain_ciphers {
            self.retained.push(bytes.to_vec());
        }
    }

    /// Decode the broadcast program catalog. The catalog is public
    /// information and travels in the clear; a tampered copy either fails to
    /// decode here or produces an enrollment the provider discards as
    /// unknown.
    pub fn receive_catalog(&mut self, bytes: &[u8]) -> Result<Vec<Program>, MeterError> {
        self.catalog_bytes = bytes.len();
        crate::catalog::decode_catalog(bytes)
            .map_err(|_| MeterError::IntegrityViolation("catalog failed to decode"))
    }

    /// Phase II: build the credential chain for the selected program, blind
    /// its last link, sign `blinded || program`, and encrypt everything to
    /// the provider.
    pub fn enroll(
        &mut self,
        program: &Program,
        pk_up: &PublicKey,
        ops: &mut OpCounters,
    ) -> Result<Envelope, MeterError> {
        if self.phase != MeterPhase::Idle {
            return Err(MeterError::WrongPhase(self.phase));
        }
        if !validate_program(program) {
            return Err(MeterError::InvalidProgram);
        }
        let n = program.report_count() as usize;
        let seed: [u8; HASH_LEN] = self.rng.bytes();
        ops.randoms += 1;
        let chain = CredentialChain::build(seed, n)?;
        ops.hashes += chain.hashes_performed();
        self.phase = MeterPhase::Enrolled;

        let (blinded, bf) = blind(&chain.last(), pk_up, &mut self.rng);
        ops.randoms += 1; // blinding factor r
        ops.arithmetic += 1; // blinding multiplication

        let mut message = Encoder::new();
        message.put_biguint(&blinded);
        program.encode_into(&mut message);
        let message = message.finish();

        let sig = sign(&self.keys.private, &message);
        ops.asym_ops += 1;

        let mut payload = Encoder::new();
        payload.put_bytes(&message);
        sig.encode_into(&mut payload);
        let target = self.target_size(ENROLLMENT_TARGET_BYTES);
        let envelope = Envelope::encrypt_to_size(pk_up, &payload.finish(), &mut self.rng, target)?;
        ops.asym_ops += 1;

        self.pseudonym = Some(Pseudonym(self.rng.bytes()));
        ops.randoms += 1;

        self.selected = Some(program.clone());
        self.chain = Some(chain);
        self.bf = Some(bf);
        self.phase = MeterPhase::AwaitingGrant;
        let bytes = envelope.encode();
        self.keep(&bytes);
        Ok(envelope)
    }

    /// Phase IV: decrypt the grant, verify the provider's signature over it,
    /// store the token, unblind the credential signature and verify it
    /// against the chain anchor, then erase the blinding factor.
    pub fn process_grant(
        &mut self,
        env: &Envelope,
        pk_up: &PublicKey,
        ops: &mut OpCounters,
    ) -> Result<(), MeterError> {
        if self.phase != MeterPhase::AwaitingGrant {
            return Err(MeterError::WrongPhase(self.phase));
        }
        self.keep(&env.encode());
        let payload = env.decrypt(&self.keys.private).map_err(|_| {
            MeterError::IntegrityViolation("grant failed to decrypt")
        })?;
        ops.asym_ops += 1;

        let mut dec = Decoder::new(&payload);
        let inner = dec.take_bytes()?;
        let outer_sig = Signature::decode_from(&mut dec)?;
        dec.expect_end()?;

        ops.asym_ops += 1;
        if !verify(pk_up, inner, &outer_sig) {
            self.abort_enrollment();
            return Err(MeterError::IntegrityViolation("grant signature invalid"));
        }

        let mut dec = Decoder::new(inner);
        let blinded_sig = Signature::decode_from(&mut dec)?;
        let token = Token::decode_from(&mut dec)?;
        let token_sig = Signature::decode_from(&mut dec)?;
        dec.expect_end()?;

        let bf = self.bf.as_ref().expect("blinding factor held in AwaitingGrant");
        let up_sig = unblind(&blinded_sig, bf);
        ops.arithmetic += 1;

        let anchor = self.chain.as_ref().expect("chain built at enrollment").last();
        ops.asym_ops += 1;
        if !verify(pk_up, &anchor, &up_sig) {
            self.abort_enrollment();
            return Err(MeterError::IntegrityViolation(
                "unblinded credential signature invalid",
            ));
        }

        self.token = Some((token, token_sig));
        self.up_sig_on_last = Some(up_sig);
        self.bf = None;
        self.phase = MeterPhase::Reporting(0);
        Ok(())
    }

    fn abort_enrollment(&mut self) {
        self.phase = MeterPhase::Idle;
        self.selected = None;
        self.chain = None;
        self.bf = None;
        self.pseudonym = None;
    }

    /// Phase IV, designated meter: generate the shared MAC key, sign it, and
    /// encrypt it to the aggregator.
    pub fn generate_shared_key(
        &mut self,
        pk_agg: &PublicKey,
        ops: &mut OpCounters,
    ) -> Result<Envelope, MeterError> {
        let key = SharedKey(self.rng.bytes());
        ops.keygen_sym += 1;
        let sig = sign(&self.keys.private, &key.0);
        ops.asym_ops += 1;

        let mut payload = Encoder::new();
        payload.put_bytes(&key.0);
        sig.encode_into(&mut payload);
        let target = self.target_size(SHARED_KEY_TARGET_BYTES);
        let envelope = Envelope::encrypt_to_size(pk_agg, &payload.finish(), &mut self.rng, target)?;
        ops.asym_ops += 1;

        self.shared_key = Some(key);
        self.designated = true;
        self.keep(&envelope.encode());
        Ok(envelope)
    }

    /// Phase V, every other participant: decrypt the distributed key and
    /// re-verify it against the generating meter's public key.
    pub fn receive_shared_key(
        &mut self,
        env: &Envelope,
        generator_pk: &PublicKey,
        ops: &mut OpCounters,
    ) -> Result<(), MeterError> {
        self.keep(&env.encode());
        let payload = env.decrypt(&self.keys.private).map_err(|_| {
            MeterError::IntegrityViolation("shared key failed to decrypt")
        })?;
        ops.asym_ops += 1;
        let mut dec = Decoder::new(&payload);
        let key = SharedKey(dec.take_array()?);
        let sig = Signature::decode_from(&mut dec)?;
        dec.expect_end()?;
        ops.asym_ops += 1;
        if !verify(generator_pk, &key.0, &sig) {
            return Err(MeterError::IntegrityViolation("shared key signature invalid"));
        }
        self.shared_key = Some(key);
        Ok(())
    }

    /// Phase VI for one window: aggregate, perturb, minimize, MAC, encrypt.
    /// Consumes chain credentials back to front; the first report carries
    /// the provider's signature on the anchor.
    pub fn produce_report(
        &mut self,
        window: &[Reading],
        window_start: NaiveDateTime,
        pk_up: &PublicKey,
        gap_policy: GapPolicy,
        ops: &mut OpCounters,
    ) -> Result<(Envelope, ReportSideEffects), MeterError> {
        let MeterPhase::Reporting(i) = self.phase else {
            return Err(MeterError::WrongPhase(self.phase));
        };
        let program = self.selected.clone().expect("program selected in Reporting");
        let n = program.report_count();
        if i >= n {
            return Err(MeterError::ProtocolComplete(n));
        }
        let pseudonym = self.pseudonym.expect("pseudonym drawn at enrollment");
        let (mut reading, interpolated) =
            aggregate(window, program.freq, window_start, i, pseudonym, gap_policy)?;

        let params = match self.noise {
            Some(params) => params,
            None => NoiseParams::for_program(&program, 1.0, 8.0)?,
        };
        let outcome = perturb(&mut reading, &params, &mut self.rng);
        if outcome.perturbed {
            ops.randoms += 1;
            ops.arithmetic += 1;
        }
        let reading = minimize(&reading, program.prp, &self.minimize_map);

        let envelope = self.build_report(reading, pk_up, ops)?;
        Ok((
            envelope,
            ReportSideEffects {
                perturbed: outcome.perturbed,
                clamped: outcome.clamped,
                interpolated,
            },
        ))
    }

    /// Assemble and encrypt report `i` from an already-minimized reading.
    pub fn build_report(
        &mut self,
        reading: CoarseReading,
        pk_up: &PublicKey,
        ops: &mut OpCounters,
    ) -> Result<Envelope, MeterError> {
        let MeterPhase::Reporting(i) = self.phase else {
            return Err(MeterError::WrongPhase(self.phase));
        };
        let program = self.selected.as_ref().expect("program selected in Reporting");
        let n = program.report_count();
        if i >= n {
            return Err(MeterError::ProtocolComplete(n));
        }
        let shared_key = self.shared_key.as_ref().ok_or(MeterError::MissingSharedKey)?;
        let pseudonym = self.pseudonym.expect("pseudonym drawn at enrollment");
        let chain = self.chain.as_ref().expect("chain built at enrollment");

        let credential = chain.link((n - 1 - i) as usize);
        let tag = mac(
            shared_key,
            &AnonymousReport::mac_message(reading.value_kwh, pseudonym),
        );
        ops.macs += 1;

        let report = AnonymousReport {
            credential,
            up_signature: (i == 0).then(|| {
                self.up_sig_on_last
                    .clone()
                    .expect("anchor signature stored at grant")
            }),
            reading,
            pseudonym,
            tag,
            program_id: program.id,
        };
        let target = if i == 0 {
            FIRST_REPORT_TARGET_BYTES
        } else {
            SUBSEQUENT_REPORT_TARGET_BYTES
        };
        let target = self.target_size(target);
        let envelope = Envelope::encrypt_to_size(pk_up, &report.encode(), &mut self.rng, target)?;
        ops.asym_ops += 1;

        self.phase = if i + 1 == n {
            MeterPhase::Done
        } else {
            MeterPhase::Reporting(i + 1)
        };
        self.keep(&envelope.encode());
        Ok(envelope)
    }

    /// Phase VIII trigger: the meter surfaces the token to the customer only
    /// after the program finished and the activation time passed.
    pub fn release_token(&self, now: NaiveDateTime) -> Result<TokenRelease, MeterError> {
        if self.phase != MeterPhase::Done {
            return Err(MeterError::TokenWithheld);
        }
        let (token, sig) = self.token.as_ref().expect("token stored at grant");
        if now >= token.active {
            Ok(TokenRelease::Released(token.clone(), sig.clone()))
        } else {
            Ok(TokenRelease::NotYet)
        }
    }

    /// Reference payload targets apply at the 1024-bit key size only.
    fn target_size(&self, reference: usize) -> usize {
        if self.keys.public.bits == 1024 {
            reference
        } else {
            0
        }
    }

    /// Approximate live protocol-state footprint in bytes.
    pub fn retained_bytes(&self) -> usize {
        let chain = self.chain.as_ref().map_or(0, |c| c.len() * HASH_LEN);
        let ciphers: usize = self.retained.iter().map(Vec::len).sum();
        let keys = 3 * self.keys.public.modulus_len();
        chain + ciphers + keys + self.catalog_bytes + if self.token.is_some() { 64 } else { 0 }
    }

    /// Drop retained ciphertexts (the memory-optimized variant).
    pub fn compact(&mut self) {
        self.retained.clear();
        self.catalog_bytes = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_program_list, CatalogRow, RewardWeights};
    use crate::codec::Money;

    fn dt(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").unwrap()
    }

    fn test_program(freq: u32, pd: u32, nsc: i64) -> Program {
        let rows = vec![CatalogRow {
            freq,
            pd,
            purpose: Purpose::DataDrivenServices,
            nsc: Money::from_integer(nsc),
            description: "test".into(),
        }];
        generate_program_list(&rows, &RewardWeights::default(), dt("2024-06-01T08:00:00"))
            .unwrap()
            .remove(0)
    }

    fn window_of(start: NaiveDateTime, values: &[f64]) -> Vec<Reading> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Reading {
                timestamp: start + Duration::minutes(15 * i as i64),
                active_kwh: v,
                reactive_kvarh: 0.1,
                quality: None,
                firmware: None,
            })
            .collect()
    }

    fn p(meter_seed: u64) -> (Meter, OpCounters) {
        let mut ops = OpCounters::default();
        let meter = Meter::new(
            MeterId(format!("sm-{meter_seed}")),
            256,
            SimRng::seed_from_u64(meter_seed),
            &mut ops,
        )
        .unwrap();
        (meter, ops)
    }

    #[test]
    fn enrollment_builds_chain_and_guards_phase() {
        let (mut meter, mut ops) = p(1);
        let up = keygen(256, &mut SimRng::seed_from_u64(99)).unwrap();
        let program = test_program(4, 7, 1);
        meter.enroll(&program, &up.public, &mut ops).unwrap();
        assert_eq!(meter.phase(), MeterPhase::AwaitingGrant);
        assert_eq!(meter.chain.as_ref().unwrap().len(), 28);
        assert!(meter.blind_factor_retained());
        // double enrollment rejected
        let err = meter.enroll(&program, &up.public, &mut ops);
        assert!(matches!(err, Err(MeterError::WrongPhase(_))));
    }

    #[test]
    fn enrollment_rejects_invalid_program() {
        let (mut meter, mut ops) = p(2);
        let up = keygen(256, &mut SimRng::seed_from_u64(99)).unwrap();
        let mut program = test_program(4, 7, 0);
        program.freq = 5;
        assert!(matches!(
            meter.enroll(&program, &up.public, &mut ops),
            Err(MeterError::InvalidProgram)
        ));
        assert_eq!(meter.phase(), MeterPhase::Idle);
    }

    #[test]
    fn aggregate_sums_full_window() {
        let start = dt("2024-06-02T00:00:00");
        // freq=4 -> 24 slots
        let values: Vec<f64> = (0..24).map(|i| 0.25 + i as f64 * 0.01).collect();
        let window = window_of(start, &values);
        let (coarse, interpolated) = aggregate(
            &window,
            4,
            start,
            0,
            Pseudonym([0; 16]),
            GapPolicy::Strict,
        )
        .unwrap();
        let expected: f64 = values.iter().sum();
        assert_eq!(coarse.value_kwh, expected);
        assert!(!interpolated);
        assert_eq!(coarse.window_end, Some(dt("2024-06-02T06:00:00")));
    }

    #[test]
    fn aggregate_freq16_small_window() {
        let start = dt("2024-06-02T00:00:00");
        let window = window_of(start, &[0.25; 6]);
        let (coarse, _) = aggregate(
            &window,
            16,
            start,
            3,
            Pseudonym([1; 16]),
            GapPolicy::Strict,
        )
        .unwrap();
        assert_eq!(coarse.value_kwh, 1.5);
    }

    #[test]
    fn aggregate_zero_window() {
        let start = dt("2024-06-02T00:00:00");
        let window = window_of(start, &[0.0; 24]);
        let (coarse, _) = aggregate(&window, 4, start, 0, Pseudonym([1; 16]), GapPolicy::Strict)
            .unwrap();
        assert_eq!(coarse.value_kwh, 0.0);
    }

    #[test]
    fn aggregate_gap_strict_fails_lenient_interpolates() {
        let start = dt("2024-06-02T00:00:00");
        let mut window = window_of(start, &[1.0; 24]);
        window.remove(5);
        assert!(matches!(
            aggregate(&window, 4, start, 0, Pseudonym([1; 16]), GapPolicy::Strict),
            Err(MeterError::MissingData(_))
        ));
        let (coarse, interpolated) = aggregate(
            &window,
            4,
            start,
            0,
            Pseudonym([1; 16]),
            GapPolicy::Interpolate,
        )
        .unwrap();
        assert!(interpolated);
        assert_eq!(coarse.value_kwh, 24.0);
    }

    #[test]
    fn perturb_zero_scale_is_identity() {
        let mut rng = SimRng::seed_from_u64(4);
        let params = NoiseParams::new(1.0, 2.0, 0.0).unwrap();
        let mut reading = CoarseReading {
            interval_index: 0,
            window_start: None,
            window_end: None,
            value_kwh: 3.25,
            noisy: true,
            quality: None,
            pseudonym: Pseudonym([0; 16]),
        };
        let before = reading.value_kwh.to_bits();
        let outcome = perturb(&mut reading, &params, &mut rng);
        assert!(!outcome.perturbed);
        assert!(!reading.noisy);
        assert_eq!(reading.value_kwh.to_bits(), before);
    }

    #[test]
    fn perturb_scales_sigma() {
        let params = NoiseParams::new(0.5, 2.0, 1.0).unwrap();
        assert_eq!(params.sigma_base(), 4.0);
        assert_eq!(params.sigma_hat(), 4.0);
        let scaled = NoiseParams::new(0.5, 2.0, 5.0).unwrap();
        assert_eq!(scaled.sigma_hat(), 20.0);
    }

    #[test]
    fn perturb_clamps_negatives() {
        let params = NoiseParams::new(0.1, 10.0, 5.0).unwrap(); // sigma 500
        let mut rng = SimRng::seed_from_u64(8);
        let mut clamped = 0;
        for _ in 0..200 {
            let mut reading = CoarseReading {
                interval_index: 0,
                window_start: None,
                window_end: None,
                value_kwh: 0.5,
                noisy: false,
                quality: None,
                pseudonym: Pseudonym([0; 16]),
            };
            let outcome = perturb(&mut reading, &params, &mut rng);
            assert!(reading.value_kwh >= 0.0);
            if outcome.clamped {
                clamped += 1;
            }
        }
        assert!(clamped > 0, "sigma 500 on 0.5 kWh must clamp sometimes");
    }

    #[test]
    fn minimize_per_purpose_and_idempotent() {
        let full = CoarseReading {
            interval_index: 2,
            window_start: Some(dt("2024-06-02T00:00:00")),
            window_end: Some(dt("2024-06-02T06:00:00")),
            value_kwh: 1.5,
            noisy: false,
            quality: Some(3),
            pseudonym: Pseudonym([2; 16]),
        };
        let map = MinimizeMap::default();

        let dd = minimize(&full, Purpose::DataDrivenServices, &map);
        assert!(dd.window_start.is_some() && dd.quality.is_none());

        let ops = minimize(&full, Purpose::OperationalServices, &map);
        assert!(ops.window_start.is_some() && ops.quality == Some(3));

        let ad = minimize(&full, Purpose::Advertisement, &map);
        assert!(ad.window_start.is_none() && ad.window_end.is_none() && ad.quality.is_none());
        assert_eq!(ad.value_kwh, 1.5);
        assert_eq!(ad.interval_index, 2);

        for prp in Purpose::ALL {
            let once = minimize(&full, prp, &map);
            assert_eq!(minimize(&once, prp, &map), once);
        }
    }

    #[test]
    fn report_encoding_round_trips() {
        let report = AnonymousReport {
            credential: [7; 32],
            up_signature: None,
            reading: CoarseReading {
                interval_index: 5,
                window_start: Some(dt("2024-06-02T06:00:00")),
                window_end: Some(dt("2024-06-02T12:00:00")),
                value_kwh: 12.75,
                noisy: true,
                quality: None,
                pseudonym: Pseudonym([9; 16]),
            },
            pseudonym: Pseudonym([9; 16]),
            tag: MacTag([5; 32]),
            program_id: 3,
        };
        let bytes = report.encode();
        assert_eq!(AnonymousReport::decode(&bytes).unwrap(), report);
    }
}
