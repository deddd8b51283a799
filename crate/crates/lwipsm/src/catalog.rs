//! Privacy-incentive programs: parameter validation, reward calculation, and
//! catalog generation.
//!
//! A program is the tuple ⟨freq, tokinf, pd, pat, prp, nsc⟩: reports per day,
//! token terms, duration in days, activation date-time, collection purpose,
//! and noise-scale multiplier. Reward terms are linear in the program
//! parameters with provider-configured weights; the default weights are
//! calibrated so the worked example program (12 reports/day, 7 days,
//! data-driven, noise scale 5) earns exactly ⟨$15, 45 days, 24 h⟩.
//!
//! Every program encodes to a fixed 548-byte record (a description field
//! absorbs the slack), so the default ten-program catalog serializes to
//! exactly 5,480 bytes — the reference payload used by the communication
//! model.

use chrono::{Duration, NaiveDateTime};
use num_traits::Zero;
use thiserror::Error;

use crate::codec::{CanonicalDecode, CanonicalEncode, CodecError, Decoder, Encoder, Money};

/// Admissible reporting frequencies (reports per day).
pub const VALID_FREQUENCIES: [u32; 5] = [4, 6, 8, 12, 16];
/// Admissible program durations in days.
pub const MIN_DURATION_DAYS: u32 = 7;
pub const MAX_DURATION_DAYS: u32 = 21;
/// Every program record encodes to exactly this many bytes.
pub const PROGRAM_WIRE_LEN: usize = 548;
/// Participant count must strictly exceed this for a program to execute.
pub const DEFAULT_ANONYMITY_THRESHOLD: u32 = 10;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid program parameters: {0}")]
    InvalidProgram(String),
    #[error("reward configuration yields non-positive {0}")]
    NonPositiveReward(&'static str),
    #[error("program fields leave no room for the fixed-size record ({0} bytes over)")]
    ProgramTooLarge(usize),
    #[error("catalog config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Purpose of data collection, as advertised in the program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Purpose {
    DataDrivenServices,
    TariffSpecification,
    OperationalServices,
    Advertisement,
}

impl Purpose {
    pub const ALL: [Purpose; 4] = [
        Purpose::DataDrivenServices,
        Purpose::TariffSpecification,
        Purpose::OperationalServices,
        Purpose::Advertisement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::DataDrivenServices => "DataDrivenServices",
            Purpose::TariffSpecification => "TariffSpecification",
            Purpose::OperationalServices => "OperationalServices",
            Purpose::Advertisement => "Advertisement",
        }
    }

    pub fn parse(s: &str) -> Option<Purpose> {
        match s.trim() {
            "DataDrivenServices" | "data-driven" => Some(Purpose::DataDrivenServices),
            "TariffSpecification" | "tariff" => Some(Purpose::TariffSpecification),
            "OperationalServices" | "operational" => Some(Purpose::OperationalServices),
            "Advertisement" | "advertisement" => Some(Purpose::Advertisement),
            _ => None,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Purpose::DataDrivenServices => 0,
            Purpose::TariffSpecification => 1,
            Purpose::OperationalServices => 2,
            Purpose::Advertisement => 3,
        }
    }

    fn from_tag(tag: u64) -> Result<Self, CodecError> {
        Self::ALL
            .into_iter()
            .find(|p| p.tag() == tag)
            .ok_or(CodecError::InvalidValue("unknown purpose tag"))
    }
}

/// Token terms offered by a program: amount, validity period, and how long
/// after the final report the token becomes spendable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenInfo {
    pub value: Money,
    pub valid_days: Money,
    pub activation_delay_secs: u64,
}

impl CanonicalEncode for TokenInfo {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.put_money(&self.value);
        enc.put_money(&self.valid_days);
        enc.put_uint(self.activation_delay_secs);
    }
}

impl CanonicalDecode for TokenInfo {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            value: dec.take_money()?,
            valid_days: dec.take_money()?,
            activation_delay_secs: dec.take_uint()?,
        })
    }
}

/// Per-purpose weight table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurposeWeights {
    pub data_driven: Money,
    pub tariff: Money,
    pub operational: Money,
    pub advertisement: Money,
}

impl PurposeWeights {
    pub fn get(&self, p: Purpose) -> Money {
        match p {
            Purpose::DataDrivenServices => self.data_driven,
            Purpose::TariffSpecification => self.tariff,
            Purpose::OperationalServices => self.operational,
            Purpose::Advertisement => self.advertisement,
        }
    }
}

/// Provider policy knobs for the reward relations. All weights are
/// non-negative; the token value grows with frequency, duration, and purpose
/// risk, and shrinks with the chosen noise scale (same shape for the
/// validity period).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardWeights {
    pub base_incentive: Money,
    pub freq_weight_val: Money,
    pub pd_weight_val: Money,
    pub prp_weight_val: PurposeWeights,
    pub noise_weight_val: Money,
    pub base_valid_day: Money,
    pub freq_weight_exp: Money,
    pub pd_weight_exp: Money,
    pub prp_weight_exp: PurposeWeights,
    pub noise_weight_exp: Money,
    pub token_activation_delay_secs: u64,
}

impl Default for RewardWeights {
    /// Calibrated so the worked example (freq 12, pd 7, data-driven, nsc 5)
    /// comes out to value 15 and 45 valid days with a 24-hour delay.
    fn default() -> Self {
        let m = Money::from_integer;
        Self {
            base_incentive: m(5),
            freq_weight_val: Money::new(1, 2),
            pd_weight_val: m(1),
            prp_weight_val: PurposeWeights {
                data_driven: m(2),
                tariff: m(1),
                operational: Money::new(3, 2),
                advertisement: m(3),
            },
            noise_weight_val: m(1),
            base_valid_day: m(30),
            freq_weight_exp: m(1),
            pd_weight_exp: m(1),
            prp_weight_exp: PurposeWeights {
                data_driven: m(6),
                tariff: m(3),
                operational: m(4),
                advertisement: m(8),
            },
            noise_weight_exp: m(2),
            token_activation_delay_secs: 24 * 3600,
        }
    }
}

/// Token value and validity from the linear reward relations:
/// `value = baseIncentive + freqW*freq + pdW*pd + prpW[prp] - noiseW*nsc`,
/// and analogously for the validity period. Errors when the configured
/// weights produce a non-positive result.
pub fn compute_reward(
    freq: u32,
    pd: u32,
    prp: Purpose,
    nsc: Money,
    weights: &RewardWeights,
) -> Result<TokenInfo, CatalogError> {
    let freq = Money::from_integer(i64::from(freq));
    let pd = Money::from_integer(i64::from(pd));
    let value = weights.base_incentive + weights.freq_weight_val * freq
        + weights.pd_weight_val * pd
        + weights.prp_weight_val.get(prp)
        - weights.noise_weight_val * nsc;
    let valid_days = weights.base_valid_day + weights.freq_weight_exp * freq
        + weights.pd_weight_exp * pd
        + weights.prp_weight_exp.get(prp)
        - weights.noise_weight_exp * nsc;
    if value <= Money::zero() {
        return Err(CatalogError::NonPositiveReward("value"));
    }
    if valid_days <= Money::zero() {
        return Err(CatalogError::NonPositiveReward("validDays"));
    }
    Ok(TokenInfo {
        value,
        valid_days,
        activation_delay_secs: weights.token_activation_delay_secs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub id: u32,
    pub freq: u32,
    pub tokinf: TokenInfo,
    pub pd: u32,
    pub pat: NaiveDateTime,
    pub prp: Purpose,
    pub nsc: Money,
    /// Human-readable program description, padded at generation time so the
    /// whole record encodes to [`PROGRAM_WIRE_LEN`] bytes.
    pub description: String,
}

impl Program {
    /// Number of reports (and credentials) over the whole program.
    pub fn report_count(&self) -> u32 {
        self.freq * self.pd
    }

    /// Reporting window length.
    pub fn window(&self) -> Duration {
        Duration::seconds(86_400 / i64::from(self.freq))
    }

    /// End of the last reporting window.
    pub fn final_report_datetime(&self) -> NaiveDateTime {
        self.pat + Duration::days(i64::from(self.pd))
    }
}

pub fn validate_program(p: &Program) -> bool {
    VALID_FREQUENCIES.contains(&p.freq)
        && (MIN_DURATION_DAYS..=MAX_DURATION_DAYS).contains(&p.pd)
        && p.nsc >= Money::zero()
}

pub fn datetime_to_secs(dt: NaiveDateTime) -> u64 {
    u64::try_from(dt.and_utc().timestamp()).expect("protocol datetimes are post-epoch")
}

pub fn secs_to_datetime(secs: u64) -> Result<NaiveDateTime, CodecError> {
    chrono::DateTime::from_timestamp(
        i64::try_from(secs).map_err(|_| CodecError::InvalidValue("timestamp overflow"))?,
        0,
    )
    .map(|dt| dt.naive_utc())
    .ok_or(CodecError::InvalidValue("timestamp out of range"))
}

/// Publication convention: programs activate at the next midnight after
/// `now`.
pub fn next_midnight(now: NaiveDateTime) -> NaiveDateTime {
    (now.date() + Duration::days(1))
        .and_hms_opt(0, 0, 0)
        .expect("midnight is always valid")
}

impl CanonicalEncode for Program {
    fn encode_into(&self, enc: &mut Encoder) {
        enc.put_uint(u64::from(self.freq));
        self.tokinf.encode_into(enc);
        enc.put_uint(u64::from(self.pd));
        enc.put_uint(datetime_to_secs(self.pat));
        enc.put_uint(self.prp.tag());
        enc.put_money(&self.nsc);
        enc.put_uint(u64::from(self.id));
        enc.put_str(&self.description);
    }
}

impl CanonicalDecode for Program {
    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let freq = u32::try_from(dec.take_uint()?).map_err(|_| CodecError::IntegerOverflow)?;
        let tokinf = TokenInfo::decode_from(dec)?;
        let pd = u32::try_from(dec.take_uint()?).map_err(|_| CodecError::IntegerOverflow)?;
        let pat = secs_to_datetime(dec.take_uint()?)?;
        let prp = Purpose::from_tag(dec.take_uint()?)?;
        let nsc = dec.take_money()?;
        let id = u32::try_from(dec.take_uint()?).map_err(|_| CodecError::IntegerOverflow)?;
        let description = dec.take_str()?.to_owned();
        Ok(Self {
            id,
            freq,
            tokinf,
            pd,
            pat,
            prp,
            nsc,
            description,
        })
    }
}

/// One row of the human-editable catalog config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogRow {
    pub freq: u32,
    pub pd: u32,
    pub purpose: Purpose,
    pub nsc: Money,
    pub description: String,
}

/// Parse the tabular catalog config: `freq,pd,purpose,nsc[,description]` per
/// line, `#` comments and a leading header row allowed.
pub fn parse_catalog_config(text: &str) -> Result<Vec<CatalogRow>, CatalogError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if idx == 0 && line.to_ascii_lowercase().starts_with("freq") {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, ',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(CatalogError::ConfigParse {
                line: idx + 1,
                message: "expected freq,pd,purpose,nsc".into(),
            });
        }
        let parse_u32 = |s: &str, what: &str| {
            s.parse::<u32>().map_err(|_| CatalogError::ConfigParse {
                line: idx + 1,
                message: format!("bad {what} '{s}'"),
            })
        };
        rows.push(CatalogRow {
            freq: parse_u32(fields[0], "frequency")?,
            pd: parse_u32(fields[1], "duration")?,
            purpose: Purpose::parse(fields[2]).ok_or_else(|| CatalogError::ConfigParse {
                line: idx + 1,
                message: format!("unknown purpose '{}'", fields[2]),
            })?,
            nsc: parse_money(fields[3]).ok_or_else(|| CatalogError::ConfigParse {
                line: idx + 1,
                message: format!("bad noise scale '{}'", fields[3]),
            })?,
            description: fields.get(4).unwrap_or(&"").to_string(),
        });
    }
    Ok(rows)
}

/// Parse a non-negative rational from "5", "0.5", or "1/2".
pub fn parse_money(s: &str) -> Option<Money> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num = num.trim().parse::<i64>().ok()?;
        let den = den.trim().parse::<i64>().ok()?;
        if den <= 0 || num < 0 {
            return None;
        }
        return Some(Money::new(num, den));
    }
    if let Some((int_part, frac_part)) = s.split_once('.') {
        if frac_part.is_empty() || frac_part.len() > 9 || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let int_part = if int_part.is_empty() { 0 } else { int_part.parse::<i64>().ok()? };
        if int_part < 0 {
            return None;
        }
        let scale = 10i64.pow(frac_part.len() as u32);
        let frac = frac_part.parse::<i64>().ok()?;
        return Some(Money::new(int_part * scale + frac, scale));
    }
    let v = s.parse::<i64>().ok()?;
    if v < 0 {
        return None;
    }
    Some(Money::from_integer(v))
}

pub fn format_money(m: &Money) -> String {
    let m = m.reduced();
    if m.is_integer() {
        m.numer().to_string()
    } else {
        format!("{}/{}", m.numer(), m.denom())
    }
}

/// Generate the published program list from config rows: validates every
/// combination, computes rewards, stamps the next-midnight activation time,
/// and pads each record to the fixed wire size.
pub fn generate_program_list(
    rows: &[CatalogRow],
    weights: &RewardWeights,
    now: NaiveDateTime,
) -> Result<Vec<Program>, CatalogError> {
    let pat = next_midnight(now);
    let mut programs = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let mut program = Program {
            id: i as u32 + 1,
            freq: row.freq,
            tokinf: compute_reward(row.freq, row.pd, row.purpose, row.nsc, weights)?,
            pd: row.pd,
            pat,
            prp: row.purpose,
            nsc: row.nsc,
            description: row.description.clone(),
        };
        if !validate_program(&program) {
            return Err(CatalogError::InvalidProgram(format!(
                "row {}: freq {} / duration {} / noise scale {} outside the admissible sets",
                i + 1,
                row.freq,
                row.pd,
                format_money(&row.nsc)
            )));
        }
        pad_description(&mut program)?;
        programs.push(program);
    }
    Ok(programs)
}

/// Stretch or truncate the description so the record encodes to exactly
/// [`PROGRAM_WIRE_LEN`] bytes.
fn pad_description(program: &mut Program) -> Result<(), CatalogError> {
    program.description.retain(|c| c.is_ascii());
    let without_desc = {
        let mut p = program.clone();
        p.description.clear();
        p.encoded_len()
    };
    let room = PROGRAM_WIRE_LEN
        .checked_sub(without_desc)
        .ok_or(CatalogError::ProgramTooLarge(without_desc.saturating_sub(PROGRAM_WIRE_LEN)))?;
    let mut desc = program.description.clone();
    desc.truncate(room);
    while desc.len() < room {
        desc.push(' ');
    }
    program.description = desc;
    debug_assert_eq!(program.encoded_len(), PROGRAM_WIRE_LEN);
    Ok(())
}

/// Catalog wire form: the concatenation of fixed-size program records.
pub fn encode_catalog(programs: &[Program]) -> Vec<u8> {
    let mut enc = Encoder::new();
    for p in programs {
        p.encode_into(&mut enc);
    }
    enc.finish()
}

pub fn decode_catalog(bytes: &[u8]) -> Result<Vec<Program>, CatalogError> {
    let mut dec = Decoder::new(bytes);
    let mut programs = Vec::new();
    while dec.remaining() > 0 {
        programs.push(Program::decode_from(&mut dec)?);
    }
    Ok(programs)
}

/// Outcome of the anonymity-set check at program activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ThresholdDecision {
    Execute,
    Cancel,
}

/// A program runs only when strictly more participants than the threshold
/// enrolled; otherwise it is cancelled and enrolled meters are notified.
pub fn check_anonymity_threshold(participant_count: u32, threshold: u32) -> ThresholdDecision {
    if participant_count > threshold {
        ThresholdDecision::Execute
    } else {
        ThresholdDecision::Cancel
    }
}

/// The bundled ten-program default catalog config.
pub fn default_catalog_rows() -> Vec<CatalogRow> {
    parse_catalog_config(include_str!("../data/default_catalog.csv"))
        .expect("bundled catalog config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dt(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").unwrap()
    }

    #[test]
    fn worked_example_program_reward() {
        let w = RewardWeights::default();
        let tok = compute_reward(12, 7, Purpose::DataDrivenServices, Money::from_integer(5), &w)
            .unwrap();
        assert_eq!(tok.value, Money::from_integer(15));
        assert_eq!(tok.valid_days, Money::from_integer(45));
        assert_eq!(tok.activation_delay_secs, 86_400);
    }

    #[test]
    fn zero_noise_variant_reward() {
        let w = RewardWeights::default();
        let tok = compute_reward(12, 7, Purpose::DataDrivenServices, Money::zero(), &w).unwrap();
        assert_eq!(tok.value, Money::from_integer(20));
        assert_eq!(tok.valid_days, Money::from_integer(55));
    }

    #[test]
    fn bases_only_when_other_weights_zero() {
        let mut w = RewardWeights::default();
        let z = Money::zero();
        w.freq_weight_val = z;
        w.pd_weight_val = z;
        w.noise_weight_val = z;
        w.prp_weight_val = PurposeWeights {
            data_driven: z,
            tariff: z,
            operational: z,
            advertisement: z,
        };
        w.freq_weight_exp = z;
        w.pd_weight_exp = z;
        w.noise_weight_exp = z;
        w.prp_weight_exp = w.prp_weight_val.clone();
        let tok = compute_reward(8, 14, Purpose::Advertisement, Money::from_integer(3), &w).unwrap();
        assert_eq!(tok.value, Money::from_integer(5));
        assert_eq!(tok.valid_days, Money::from_integer(30));
    }

    #[test]
    fn reward_error_when_nonpositive() {
        let w = RewardWeights::default();
        // noise weight 1 * nsc 100 swamps the base terms
        let err = compute_reward(4, 7, Purpose::TariffSpecification, Money::from_integer(100), &w);
        assert!(matches!(err, Err(CatalogError::NonPositiveReward("value"))));
    }

    #[test]
    fn validation_boundaries() {
        let w = RewardWeights::default();
        let rows = vec![CatalogRow {
            freq: 4,
            pd: 7,
            purpose: Purpose::DataDrivenServices,
            nsc: Money::zero(),
            description: String::new(),
        }];
        let p = &generate_program_list(&rows, &w, dt("2024-06-01T08:00:00")).unwrap()[0];
        assert!(validate_program(p));

        let mut bad_freq = p.clone();
        bad_freq.freq = 3;
        assert!(!validate_program(&bad_freq));

        let mut bad_pd = p.clone();
        bad_pd.pd = 22;
        assert!(!validate_program(&bad_pd));
    }

    #[test]
    fn default_catalog_encodes_to_reference_size() {
        let programs = generate_program_list(
            &default_catalog_rows(),
            &RewardWeights::default(),
            dt("2024-06-01T08:00:00"),
        )
        .unwrap();
        assert_eq!(programs.len(), 10);
        let bytes = encode_catalog(&programs);
        assert_eq!(bytes.len(), 5_480);
        for p in &programs {
            assert_eq!(p.encoded_len(), PROGRAM_WIRE_LEN);
        }
    }

    #[test]
    fn default_catalog_contains_worked_example() {
        let programs = generate_program_list(
            &default_catalog_rows(),
            &RewardWeights::default(),
            dt("2024-06-01T08:00:00"),
        )
        .unwrap();
        let p = programs
            .iter()
            .find(|p| p.freq == 12 && p.pd == 7 && p.nsc == Money::from_integer(5))
            .expect("worked example present");
        assert_eq!(p.prp, Purpose::DataDrivenServices);
        assert_eq!(p.tokinf.value, Money::from_integer(15));
        assert_eq!(p.tokinf.valid_days, Money::from_integer(45));
        assert_eq!(p.tokinf.activation_delay_secs, 86_400);
        assert_eq!(p.pat, dt("2024-06-02T00:00:00"));
    }

    #[test]
    fn empty_config_empty_catalog() {
        let programs =
            generate_program_list(&[], &RewardWeights::default(), dt("2024-06-01T08:00:00"))
                .unwrap();
        assert!(programs.is_empty());
        assert!(encode_catalog(&programs).is_empty());
    }

    #[test]
    fn invalid_row_rejected_with_diagnostic() {
        let rows = vec![CatalogRow {
            freq: 5,
            pd: 7,
            purpose: Purpose::DataDrivenServices,
            nsc: Money::zero(),
            description: String::new(),
        }];
        let err = generate_program_list(&rows, &RewardWeights::default(), dt("2024-06-01T08:00:00"));
        assert!(matches!(err, Err(CatalogError::InvalidProgram(_))));
    }

    #[test]
    fn catalog_round_trips_bit_exactly() {
        let programs = generate_program_list(
            &default_catalog_rows(),
            &RewardWeights::default(),
            dt("2024-06-01T08:00:00"),
        )
        .unwrap();
        let bytes = encode_catalog(&programs);
        let decoded = decode_catalog(&bytes).unwrap();
        assert_eq!(decoded, programs);
        assert_eq!(encode_catalog(&decoded), bytes);
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(check_anonymity_threshold(1, 10), ThresholdDecision::Cancel);
        assert_eq!(check_anonymity_threshold(10, 10), ThresholdDecision::Cancel);
        assert_eq!(check_anonymity_threshold(11, 10), ThresholdDecision::Execute);
    }

    #[test]
    fn money_parsing() {
        assert_eq!(parse_money("5"), Some(Money::from_integer(5)));
        assert_eq!(parse_money("0.5"), Some(Money::new(1, 2)));
        assert_eq!(parse_money("1/2"), Some(Money::new(1, 2)));
        assert_eq!(parse_money("2.75"), Some(Money::new(11, 4)));
        assert_eq!(parse_money("-1"), None);
        assert_eq!(parse_money("x"), None);
    }

    #[test]
    fn config_parse_errors_name_the_line() {
        let err = parse_catalog_config("freq,pd,purpose,nsc\n4,7,DataDrivenServices,0\n9,banana").unwrap_err();
        match err {
            CatalogError::ConfigParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
