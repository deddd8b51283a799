//! The aggregator and the unidirectional anonymous overlay.
//!
//! Reports travel meter-to-meter along randomized relay paths before the
//! final hop to the aggregator, so the apparent sender observed at the sink
//! is the last relay, not the source. The aggregator never decrypts report
//! envelopes; it records each delivery in a bloom filter whose periodic
//! broadcast lets meters confirm reception over a link with no
//! acknowledgements.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CanonicalDecode, CanonicalEncode, Decoder, Encoder};
use crate::counters::OpCounters;
use crate::crypto::{
    keygen, verify, CryptoError, Envelope, KeyPair, PublicKey, SharedKey, Signature, SimRng,
};

/// Default filter geometry: 16,384 bits with 7 hash probes, sized for about
/// a thousand packets per epoch.
pub const DEFAULT_FILTER_BITS: usize = 16_384;
pub const DEFAULT_FILTER_HASHES: usize = 7;
/// Minimum relay-path length in edges (source never hands directly to the
/// sink).
pub const DEFAULT_MIN_HOPS: usize = 2;

pub const SHARED_KEY_DISTRIBUTION_TARGET_BYTES: usize = 512;

#[derive(Debug, Error)]
pub enum OverlayError {
    #[error("no participants to choose from")]
    EmptyParticipants,
    #[error("shared key distribution aborted: {0}")]
    IntegrityViolation(&'static str),
    #[error("relay path invalid: {0}")]
    InvalidPath(String),
    #[error("meter {0} cannot reach the aggregator")]
    UnreachableSink(usize),
    #[error("topology file line {0} malformed")]
    BadEdgeList(usize),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Overlay node: a meter (by index) or the aggregator sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum OverlayNode {
    Meter(usize),
    Aggregator,
}

/// Meter-to-meter adjacency plus the set of meters that can reach the sink
/// directly.
#[derive(Debug, Clone)]
pub struct Topology {
    adjacency: Vec<Vec<usize>>,
    sink_neighbors: Vec<bool>,
}

impl Topology {
    /// Ring of neighboring meters; every meter can hand to the aggregator.
    pub fn ring(meters: usize) -> Self {
        assert!(meters >= 2, "overlay needs at least two meters");
        let adjacency = (0..meters)
            .map(|i| {
                let mut n = vec![(i + meters - 1) % meters, (i + 1) % meters];
                n.sort_unstable();
                n.dedup();
                n
            })
            .collect();
        Self {
            adjacency,
            sink_neighbors: vec![true; meters],
        }
    }

    /// Fully connected meter mesh; every meter can hand to the aggregator.
    pub fn clique(meters: usize) -> Self {
        assert!(meters >= 2);
        let adjacency = (0..meters)
            .map(|i| (0..meters).filter(|&j| j != i).collect())
            .collect();
        Self {
            adjacency,
            sink_neighbors: vec![true; meters],
        }
    }

    /// Parse an edge-list file: one `a b` pair per line where each endpoint
    /// is a meter index or `agg`, `#` comments allowed.
    pub fn from_edge_list(text: &str) -> Result<Self, OverlayError> {
        let mut meter_edges: Vec<(usize, usize)> = Vec::new();
        let mut sink_edges: Vec<usize> = Vec::new();
        let mut max_meter = 0usize;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(OverlayError::BadEdgeList(idx + 1));
            };
            let parse = |tok: &str| -> Result<Option<usize>, OverlayError> {
                if tok == "agg" {
                    Ok(None)
                } else {
                    tok.parse::<usize>()
                        .map(Some)
                        .map_err(|_| OverlayError::BadEdgeList(idx + 1))
                }
            };
            match (parse(a)?, parse(b)?) {
                (Some(x), Some(y)) if x != y => {
                    max_meter = max_meter.max(x).max(y);
                    meter_edges.push((x, y));
                }
                (Some(x), None) | (None, Some(x)) => {
                    max_meter = max_meter.max(x);
                    sink_edges.push(x);
                }
                _ => return Err(OverlayError::BadEdgeList(idx + 1)),
            }
        }
        let meters = max_meter + 1;
        let mut adjacency = vec![Vec::new(); meters];
        for (a, b) in meter_edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        let mut sink_neighbors = vec![false; meters];
        for m in sink_edges {
            sink_neighbors[m] = true;
        }
        let topo = Self {
            adjacency,
            sink_neighbors,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn meters(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, meter: usize) -> &[usize] {
        &self.adjacency[meter]
    }

    pub fn sink_adjacent(&self, meter: usize) -> bool {
        self.sink_neighbors[meter]
    }

    /// Every meter must have a path (through the mesh) to some sink-adjacent
    /// meter.
    pub fn validate(&self) -> Result<(), OverlayError> {
        let meters = self.meters();
        let mut reachable = vec![false; meters];
        let mut queue: Vec<usize> = (0..meters).filter(|&m| self.sink_neighbors[m]).collect();
        for &m in &queue {
            reachable[m] = true;
        }
        while let Some(m) = queue.pop() {
            for &next in &self.adjacency[m] {
                if !reachable[next] {
                    reachable[next] = true;
                    queue.push(next);
                }
            }
        }
        match reachable.iter().position(|&r| !r) {
            Some(m) => Err(OverlayError::UnreachableSink(m)),
            None => Ok(()),
        }
    }
}

/// An ordered relay route: the source, any intermediate relays, and the
/// final hop to the aggregator. Path length in edges is `relays.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayPath {
    /// source first, then relays; the last entry hands to the sink.
    pub hops: Vec<usize>,
}

impl RelayPath {
    pub fn edges(&self) -> usize {
        self.hops.len()
    }

    /// All traversed links, ending at the aggregator.
    pub fn links(&self) -> Vec<(OverlayNode, OverlayNode)> {
        let mut out = Vec::with_capacity(self.hops.len());
        for w in self.hops.windows(2) {
            out.push((OverlayNode::Meter(w[0]), OverlayNode::Meter(w[1])));
        }
        out.push((
            OverlayNode::Meter(*self.hops.last().unwrap()),
            OverlayNode::Aggregator,
        ));
        out
    }

    /// The node the aggregator observes as apparent sender.
    pub fn observed_last_hop(&self) -> usize {
        *self.hops.last().unwrap()
    }

    pub fn source(&self) -> usize {
        self.hops[0]
    }

    /// Check adjacency of every hop and the minimum length policy.
    pub fn validate(&self, topo: &Topology, min_hops: usize) -> Result<(), OverlayError> {
        if self.hops.is_empty() {
            return Err(OverlayError::InvalidPath("empty path".into()));
        }
        if self.edges() < min_hops {
            return Err(OverlayError::InvalidPath(format!(
                "{} hops below the minimum of {min_hops}",
                self.edges()
            )));
        }
        for w in self.hops.windows(2) {
            if !topo.neighbors(w[0]).contains(&w[1]) {
                return Err(OverlayError::InvalidPath(format!(
                    "{} and {} are not neighbors",
                    w[0], w[1]
                )));
            }
        }
        if !topo.sink_adjacent(self.observed_last_hop()) {
            return Err(OverlayError::InvalidPath(format!(
                "{} cannot hand to the aggregator",
                self.observed_last_hop()
            )));
        }
        Ok(())
    }
}

/// Sample a random relay path from `source`: a random walk over the meter
/// mesh (no immediate backtracking where avoidable) that keeps going until
/// the minimum hop count is met and the current meter can reach the sink.
pub fn sample_path(
    topo: &Topology,
    source: usize,
    min_hops: usize,
    rng: &mut SimRng,
) -> Result<RelayPath, OverlayError> {
    let mut hops = vec![source];
    let mut prev: Option<usize> = None;
    let limit = 4 * topo.meters() + min_hops + 8;
    while hops.len() < limit {
        let here = *hops.last().unwrap();
        let enough = hops.len() >= min_hops && topo.sink_adjacent(here);
        if enough {
            let path = RelayPath { hops };
            path.validate(topo, min_hops)?;
            return Ok(path);
        }
        let neighbors = topo.neighbors(here);
        if neighbors.is_empty() {
            return Err(OverlayError::UnreachableSink(here));
        }
        let choices: Vec<usize> = if neighbors.len() > 1 {
            neighbors.iter().copied().filter(|&n| Some(n) != prev).collect()
        } else {
            neighbors.to_vec()
        };
        let next = choices[rng.index(choices.len())];
        prev = Some(here);
        hops.push(next);
    }
    Err(OverlayError::InvalidPath(
        "random walk failed to reach a sink-adjacent meter".into(),
    ))
}

/// Bloom filter recording delivered packet digests. No false negatives;
/// the false-positive rate at load n is (1 - e^(-kn/m))^k.
#[derive(Debug, Clone)]
pub struct DeliveryFilter {
    bits: Vec<u64>,
    m_bits: usize,
    k: usize,
    inserted: usize,
}

impl Default for DeliveryFilter {
    fn default() -> Self {
        Self::new(DEFAULT_FILTER_BITS, DEFAULT_FILTER_HASHES)
    }
}

impl DeliveryFilter {
    pub fn new(m_bits: usize, k: usize) -> Self {
        assert!(m_bits > 0 && k > 0);
        Self {
            bits: vec![0; m_bits.div_ceil(64)],
            m_bits,
            k,
            inserted: 0,
        }
    }

    pub fn packet_digest(envelope_bytes: &[u8]) -> [u8; 32] {
        Sha256::digest(envelope_bytes).into()
    }

    fn indices(&self, digest: &[u8; 32]) -> impl Iterator<Item = usize> + '_ {
        let h1 = u64::from_be_bytes(digest[0..8].try_into().unwrap());
        let h2 = u64::from_be_bytes(digest[8..16].try_into().unwrap()) | 1;
        let m = self.m_bits as u64;
        (0..self.k as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % m) as usize)
    }

    pub fn insert(&mut self, digest: &[u8; 32]) {
        let idx: Vec<usize> = self.indices(digest).collect();
        for i in idx {
            self.bits[i / 64] |= 1 << (i % 64);
        }
        self.inserted += 1;
    }

    pub fn query(&self, digest: &[u8; 32]) -> bool {
        self.indices(digest).all(|i| self.bits[i / 64] & (1 << (i % 64)) != 0)
    }

    pub fn inserted(&self) -> usize {
        self.inserted
    }

    pub fn analytic_fpr(&self, n: usize) -> f64 {
        let exponent = -(self.k as f64) * n as f64 / self.m_bits as f64;
        (1.0 - exponent.exp()).powi(self.k as i32)
    }

    /// Immutable snapshot for the per-interval broadcast.
    pub fn snapshot(&self) -> DeliveryFilter {
        self.clone()
    }
}

/// The aggregator entity: designates the shared-key generator, verifies and
/// fans out the key, and tracks report deliveries.
pub struct Aggregator {
    keys: KeyPair,
    rng: SimRng,
    shared_key: Option<SharedKey>,
    filter: DeliveryFilter,
}

impl Aggregator {
    pub fn new(rsa_bits: u32, mut rng: SimRng, ops: &mut OpCounters) -> Result<Self, OverlayError> {
        let keys = keygen(rsa_bits, &mut rng)?;
        ops.keygen_asym += 1;
        Ok(Self {
            keys,
            rng,
            shared_key: None,
            filter: DeliveryFilter::default(),
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    pub fn key_id(&self) -> crate::crypto::KeyId {
        self.keys.public.key_id()
    }

    pub fn shared_key(&self) -> Option<&SharedKey> {
        self.shared_key.as_ref()
    }

    /// Uniformly choose which participant generates the shared key.
    pub fn designate_key_generator<'a, T>(&mut self, participants: &'a [T]) -> Result<&'a T, OverlayError> {
        if participants.is_empty() {
            return Err(OverlayError::EmptyParticipants);
        }
        Ok(&participants[self.rng.index(participants.len())])
    }

    /// Phase V: decrypt the submitted key, verify it against the generating
    /// meter, and re-encrypt it for every other legitimate entity. The
    /// generator itself already holds the key and gets no copy.
    pub fn distribute_shared_key(
        &mut self,
        env: &Envelope,
        generator_pk: &PublicKey,
        recipients: &[PublicKey],
        ops: &mut OpCounters,
    ) -> Result<Vec<Envelope>, OverlayError> {
        ops.asym_ops += 1;
        let payload = env
            .decrypt(&self.keys.private)
            .map_err(|_| OverlayError::IntegrityViolation("shared key failed to decrypt"))?;
        let mut dec = Decoder::new(&payload);
        let key_bytes: [u8; 32] = dec
            .take_array()
            .map_err(|_| OverlayError::IntegrityViolation("shared key malformed"))?;
        let sig = Signature::decode_from(&mut dec)
            .map_err(|_| OverlayError::IntegrityViolation("shared key malformed"))?;
        dec.expect_end()
            .map_err(|_| OverlayError::IntegrityViolation("shared key malformed"))?;
        ops.asym_ops += 1;
        if !verify(generator_pk, &key_bytes, &sig) {
            return Err(OverlayError::IntegrityViolation("shared key signature invalid"));
        }
        self.shared_key = Some(SharedKey(key_bytes));

        let mut redist = Encoder::new();
        redist.put_bytes(&key_bytes);
        sig.encode_into(&mut redist);
        let redist = redist.finish();

        let target = if self.keys.public.bits == 1024 {
            SHARED_KEY_DISTRIBUTION_TARGET_BYTES
        } else {
            0
        };
        let mut envelopes = Vec::with_capacity(recipients.len());
        for pk in recipients {
            envelopes.push(Envelope::encrypt_to_size(pk, &redist, &mut self.rng, target)?);
            ops.asym_ops += 1;
        }
        Ok(envelopes)
    }

    /// Record one delivered report envelope.
    pub fn record_delivery(&mut self, envelope_bytes: &[u8]) -> [u8; 32] {
        let digest = DeliveryFilter::packet_digest(envelope_bytes);
        self.filter.insert(&digest);
        digest
    }

    pub fn broadcast_filter(&self) -> DeliveryFilter {
        self.filter.snapshot()
    }

    pub fn retained_bytes(&self) -> usize {
        self.filter.bits.len() * 8 + 3 * self.keys.public.modulus_len() + 32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_topology_validates() {
        let topo = Topology::ring(8);
        assert_eq!(topo.meters(), 8);
        topo.validate().unwrap();
        assert_eq!(topo.neighbors(0), &[1, 7]);
    }

    #[test]
    fn edge_list_round_trip() {
        let topo = Topology::from_edge_list("# demo\n0 1\n1 2\n2 0\nagg 2\n").unwrap();
        assert_eq!(topo.meters(), 3);
        assert!(topo.sink_adjacent(2));
        assert!(!topo.sink_adjacent(0));
        assert!(matches!(
            Topology::from_edge_list("0 1\nagg 1\n9 nonsense\n"),
            Err(OverlayError::BadEdgeList(3))
        ));
    }

    #[test]
    fn disconnected_meter_rejected() {
        // meter 3 has no edges at all
        let err = Topology::from_edge_list("0 1\n1 2\nagg 0\n3 3\n");
        assert!(err.is_err());
        let topo = Topology::from_edge_list("0 1\n2 3\nagg 0\n").unwrap_err();
        assert!(matches!(topo, OverlayError::UnreachableSink(_)));
    }

    #[test]
    fn sampled_paths_hide_the_source() {
        let topo = Topology::ring(10);
        let mut rng = SimRng::seed_from_u64(5);
        for _ in 0..100 {
            let path = sample_path(&topo, 3, DEFAULT_MIN_HOPS, &mut rng).unwrap();
            assert!(path.edges() >= 2);
            assert_ne!(path.observed_last_hop(), path.source());
            path.validate(&topo, DEFAULT_MIN_HOPS).unwrap();
        }
    }

    #[test]
    fn single_edge_paths_rejected_by_policy() {
        let topo = Topology::ring(5);
        let direct = RelayPath { hops: vec![2] };
        assert!(direct.validate(&topo, 1).is_ok());
        assert!(matches!(
            direct.validate(&topo, DEFAULT_MIN_HOPS),
            Err(OverlayError::InvalidPath(_))
        ));
    }

    #[test]
    fn designation_is_uniform() {
        let mut ops = OpCounters::default();
        let mut agg = Aggregator::new(128, SimRng::seed_from_u64(1), &mut ops).unwrap();
        let meters: Vec<usize> = (0..10).collect();
        let mut counts = [0u32; 10];
        for _ in 0..1000 {
            counts[*agg.designate_key_generator(&meters).unwrap()] += 1;
        }
        for &c in &counts {
            assert!((70..=130).contains(&c), "draws {counts:?} not near-uniform");
        }
        let empty: [usize; 0] = [];
        assert!(matches!(
            agg.designate_key_generator(&empty),
            Err(OverlayError::EmptyParticipants)
        ));
    }

    #[test]
    fn designation_is_seed_deterministic() {
        let mut ops = OpCounters::default();
        let meters: Vec<usize> = (0..10).collect();
        let mut a = Aggregator::new(128, SimRng::seed_from_u64(2), &mut ops).unwrap();
        let mut b = Aggregator::new(128, SimRng::seed_from_u64(2), &mut ops).unwrap();
        for _ in 0..20 {
            assert_eq!(
                a.designate_key_generator(&meters).unwrap(),
                b.designate_key_generator(&meters).unwrap()
            );
        }
    }

    #[test]
    fn bloom_has_no_false_negatives() {
        let mut filter = DeliveryFilter::default();
        let mut rng = SimRng::seed_from_u64(9);
        let digests: Vec<[u8; 32]> = (0..1000).map(|_| rng.bytes()).collect();
        for d in &digests {
            filter.insert(d);
        }
        for d in &digests {
            assert!(filter.query(d));
        }
        assert_eq!(filter.inserted(), 1000);
    }

    #[test]
    fn empty_filter_answers_false() {
        let filter = DeliveryFilter::default();
        let mut rng = SimRng::seed_from_u64(10);
        for _ in 0..100 {
            assert!(!filter.query(&rng.bytes()));
        }
    }

    #[test]
    fn measured_fpr_tracks_analytic() {
        let mut filter = DeliveryFilter::default();
        let mut rng = SimRng::seed_from_u64(11);
        for _ in 0..1000 {
            let d: [u8; 32] = rng.bytes();
            filter.insert(&d);
        }
        let trials = 200_000;
        let mut false_positives = 0u32;
        for _ in 0..trials {
            if filter.query(&rng.bytes()) {
                false_positives += 1;
            }
        }
        let measured = f64::from(false_positives) / f64::from(trials);
        let analytic = filter.analytic_fpr(1000);
        assert!(measured <= 0.01, "fpr {measured} above the 1% budget");
        assert!(
            measured <= 2.0 * analytic && measured >= analytic / 2.0,
            "measured {measured} vs analytic {analytic}"
        );
    }

    #[test]
    fn observed_last_hop_nearly_uniform_in_clique() {
        // chi-square over the 9 possible last relays, critical value for
        // df = 8 at p = 0.01 is 20.09
        let topo = Topology::clique(10);
        let mut rng = SimRng::seed_from_u64(12);
        let source = 0usize;
        let mut counts = [0u32; 10];
        let trials = 4500u32;
        for _ in 0..trials {
            let path = sample_path(&topo, source, DEFAULT_MIN_HOPS, &mut rng).unwrap();
            counts[path.observed_last_hop()] += 1;
        }
        assert_eq!(counts[source], 0);
        let expected = f64::from(trials) / 9.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let d = f64::from(c) - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 20.09, "chi-square {chi2} rejects uniformity");
    }
}
