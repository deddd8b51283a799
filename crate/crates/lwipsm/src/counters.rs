//! Per-entity operation accounting.
//!
//! Counters track protocol-level operations only, with a fixed attribution
//! discipline so honest runs land exactly on the analytical worst-case
//! coefficients:
//!
//! - `asym_ops`: one per envelope encrypt/decrypt and per sign/verify
//!   (blind signing included). Envelope-internal hashing, keystreams, and
//!   ephemeral-key draws ride inside the operation and are not counted
//!   separately.
//! - `hashes`: protocol hash invocations only — credential-chain
//!   construction at the meter and chain walking at the provider. Bloom
//!   filter digests and FDH expansion are not protocol hashes.
//! - `arithmetic`: blinding, blind-factor removal, noise additions, and
//!   equality checks (MAC compare, credential compare).
//! - `randoms`: chain seed, blinding factor, pseudonym, and per-report noise
//!   draws. Token uid generation is part of `token_gens`; the shared key is
//!   `keygen_sym`.
//! - `db_ops`: consumption-archive operations (participant records,
//!   credential tracking, value inserts). Token-ledger writes are tracked
//!   separately in `ledger_ops`.

use serde::Serialize;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    pub asym_ops: u64,
    pub hashes: u64,
    pub macs: u64,
    pub arithmetic: u64,
    pub randoms: u64,
    pub db_ops: u64,
    pub ledger_ops: u64,
    pub keygen_asym: u64,
    pub keygen_sym: u64,
    pub token_gens: u64,
    pub program_list_gens: u64,
}

impl OpCounters {
    pub fn merged(&self, other: &OpCounters) -> OpCounters {
        OpCounters {
            asym_ops: self.asym_ops + other.asym_ops,
            hashes: self.hashes + other.hashes,
            macs: self.macs + other.macs,
            arithmetic: self.arithmetic + other.arithmetic,
            randoms: self.randoms + other.randoms,
            db_ops: self.db_ops + other.db_ops,
            ledger_ops: self.ledger_ops + other.ledger_ops,
            keygen_asym: self.keygen_asym + other.keygen_asym,
            keygen_sym: self.keygen_sym + other.keygen_sym,
            token_gens: self.token_gens + other.token_gens,
            program_list_gens: self.program_list_gens + other.program_list_gens,
        }
    }
}

/// A named counter mismatch from [`assert_counters`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CounterDiff {
    pub counter: &'static str,
    pub measured: u64,
    pub predicted: u64,
}

/// Compare measured counters against a prediction field by field; `None`
/// prediction fields are informational and skipped.
pub fn diff_counters(measured: &OpCounters, predicted: &PredictedCounters) -> Vec<CounterDiff> {
    let mut diffs = Vec::new();
    let mut check = |counter: &'static str, m: u64, p: Option<u64>| {
        if let Some(p) = p {
            if m != p {
                diffs.push(CounterDiff {
                    counter,
                    measured: m,
                    predicted: p,
                });
            }
        }
    };
    check("asym_ops", measured.asym_ops, predicted.asym_ops);
    check("hashes", measured.hashes, predicted.hashes);
    check("macs", measured.macs, predicted.macs);
    check("arithmetic", measured.arithmetic, predicted.arithmetic);
    check("randoms", measured.randoms, predicted.randoms);
    check("db_ops", measured.db_ops, predicted.db_ops);
    check("keygen_asym", measured.keygen_asym, predicted.keygen_asym);
    check("keygen_sym", measured.keygen_sym, predicted.keygen_sym);
    check("token_gens", measured.token_gens, predicted.token_gens);
    check(
        "program_list_gens",
        measured.program_list_gens,
        predicted.program_list_gens,
    );
    diffs
}

/// Analytical per-entity prediction. `None` fields carry no prediction.
#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct PredictedCounters {
    pub asym_ops: Option<u64>,
    pub hashes: Option<u64>,
    pub macs: Option<u64>,
    pub arithmetic: Option<u64>,
    pub randoms: Option<u64>,
    pub db_ops: Option<u64>,
    pub keygen_asym: Option<u64>,
    pub keygen_sym: Option<u64>,
    pub token_gens: Option<u64>,
    pub program_list_gens: Option<u64>,
}

/// Worst-case analytical predictions for one full protocol execution with
/// `n = freq * pd` reports and `participants` meters in the program.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CounterPredictions {
    pub n: u64,
    pub participants: u64,
    pub meter: PredictedCounters,
    pub aggregator: PredictedCounters,
    pub provider: PredictedCounters,
}

/// The smart meter performs `n+8` asymmetric operations, `n+3` random
/// generations, `n-1` hashes, `n+2` arithmetic operations, and `n` MACs plus
/// one asymmetric and one symmetric key generation; the aggregator performs
/// `participants+2` asymmetric operations; the provider `n+12` asymmetric
/// operations, `n` MACs, `2n-1` arithmetic operations, `n-1` hashes, and
/// `3n-1` archive operations.
pub fn predict_counters(freq: u32, pd: u32, participants: u32) -> CounterPredictions {
    let n = u64::from(freq) * u64::from(pd);
    let participants = u64::from(participants);
    CounterPredictions {
        n,
        participants,
        meter: PredictedCounters {
            asym_ops: Some(n + 8),
            hashes: Some(n - 1),
            macs: Some(n),
            arithmetic: Some(n + 2),
            randoms: Some(n + 3),
            db_ops: None,
            keygen_asym: Some(1),
            keygen_sym: Some(1),
            token_gens: None,
            program_list_gens: None,
        },
        aggregator: PredictedCounters {
            asym_ops: Some(participants + 2),
            keygen_asym: Some(1),
            ..Default::default()
        },
        provider: PredictedCounters {
            asym_ops: Some(n + 12),
            hashes: Some(n - 1),
            macs: Some(n),
            arithmetic: Some(2 * n - 1),
            randoms: None,
            db_ops: Some(3 * n - 1),
            keygen_asym: Some(1),
            keygen_sym: None,
            token_gens: Some(1),
            program_list_gens: Some(1),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scenario_coefficients() {
        let p = predict_counters(4, 7, 20);
        assert_eq!(p.n, 28);
        assert_eq!(p.meter.asym_ops, Some(36));
        assert_eq!(p.meter.hashes, Some(27));
        assert_eq!(p.meter.macs, Some(28));
        assert_eq!(p.meter.randoms, Some(31));
        assert_eq!(p.meter.arithmetic, Some(30));
        assert_eq!(p.aggregator.asym_ops, Some(22));
        assert_eq!(p.provider.asym_ops, Some(40));
        assert_eq!(p.provider.db_ops, Some(83));
        assert_eq!(p.provider.arithmetic, Some(55));
    }

    #[test]
    fn diff_reports_named_mismatches() {
        let measured = OpCounters {
            asym_ops: 35,
            ..Default::default()
        };
        let predicted = PredictedCounters {
            asym_ops: Some(36),
            ..Default::default()
        };
        let diffs = diff_counters(&measured, &predicted);
        assert_eq!(diffs.len(), 1);
        assert_eq!(diffs[0].counter, "asym_ops");
        assert_eq!(diffs[0].measured, 35);
        assert_eq!(diffs[0].predicted, 36);
    }
}
