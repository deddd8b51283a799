//! Communication-overhead model: link-stack framing and transmission-time
//! arithmetic for the NAN (Wi-SUN) and WAN (4G-LTE PDCP, Ethernet) segments.
//!
//! Per-stack overhead is not linear in the payload (Wi-SUN adds 89 bytes at a
//! 256-byte payload but 1,619 bytes at 5,480, consistent with fragmentation),
//! and no header or MTU constants are published for the reference table, so
//! framing is anchor-table-driven: the bundled table pins the exact packet
//! size at each reference payload, overhead is interpolated linearly between
//! anchors, and sizes above the largest anchor extrapolate with its
//! packet/payload ratio.

use num_rational::Ratio;
use std::sync::LazyLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("framing table entry malformed at line {0}")]
    MalformedTable(usize),
    #[error("framing table missing anchors for segment {0:?}")]
    MissingSegment(LinkSegment),
    #[error("payload must be positive")]
    EmptyPayload,
    #[error("bandwidth must be positive")]
    ZeroBandwidth,
}

/// Link-layer technology of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum LinkStack {
    WiSun802154g,
    LtePdcp,
    Ethernet8023,
}

/// The four physical segments a report crosses on its way from a meter to
/// the utility provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum LinkSegment {
    /// Meter to aggregator (and meter-to-meter overlay hops): Wi-SUN NAN.
    SmToAgg,
    /// Aggregator to LTE base station.
    AggToEnb,
    /// Base station to packet gateway.
    EnbToPgw,
    /// Packet gateway to utility provider.
    PgwToUp,
}

impl LinkSegment {
    pub const ALL: [LinkSegment; 4] = [
        LinkSegment::SmToAgg,
        LinkSegment::AggToEnb,
        LinkSegment::EnbToPgw,
        LinkSegment::PgwToUp,
    ];

    pub fn stack(self) -> LinkStack {
        match self {
            LinkSegment::SmToAgg => LinkStack::WiSun802154g,
            LinkSegment::AggToEnb => LinkStack::LtePdcp,
            LinkSegment::EnbToPgw | LinkSegment::PgwToUp => LinkStack::Ethernet8023,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LinkSegment::SmToAgg => "SM-AGG (Wi-SUN)",
            LinkSegment::AggToEnb => "AGG-eNB (4G-LTE PDCP)",
            LinkSegment::EnbToPgw => "eNB-PGW (Ethernet)",
            LinkSegment::PgwToUp => "PGW-UP (Ethernet)",
        }
    }

    fn key(self) -> &'static str {
        match self {
            LinkSegment::SmToAgg => "sm_agg",
            LinkSegment::AggToEnb => "agg_enb",
            LinkSegment::EnbToPgw => "enb_pgw",
            LinkSegment::PgwToUp => "pgw_up",
        }
    }

    fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.key() == key)
    }

    /// Per-meter share of the segment bandwidth in bits/s (reference model:
    /// 250 kbps NAN and 1,000 kbps WAN shared by 20 meters).
    pub fn per_meter_bandwidth(self) -> u64 {
        LinkSpec::reference(self).per_meter_bw
    }
}

/// Bandwidth description of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct LinkSpec {
    pub stack: LinkStack,
    pub available_bw: u64,
    pub meters_sharing: u32,
    pub per_meter_bw: u64,
}

impl LinkSpec {
    pub fn new(stack: LinkStack, available_bw: u64, meters_sharing: u32) -> Self {
        Self {
            stack,
            available_bw,
            meters_sharing,
            per_meter_bw: available_bw / u64::from(meters_sharing.max(1)),
        }
    }

    /// The evaluation's reference configuration: 20 meters sharing 250 kbps
    /// in the NAN and 1,000 kbps in the WAN.
    pub fn reference(segment: LinkSegment) -> Self {
        match segment.stack() {
            LinkStack::WiSun802154g => Self::new(LinkStack::WiSun802154g, 250_000, 20),
            stack => Self::new(stack, 1_000_000, 20),
        }
    }
}

/// Anchor-driven payload→packet map for every segment.
#[derive(Debug, Clone)]
pub struct FramingTable {
    // sorted (payload, packet) anchors per segment, in LinkSegment::ALL order
    anchors: [Vec<(u64, u64)>; 4],
}

static BUNDLED: LazyLock<FramingTable> = LazyLock::new(|| {
    FramingTable::parse(include_str!("../data/framing_table.csv"))
        .expect("bundled framing table is valid")
});

impl FramingTable {
    pub fn bundled() -> &'static FramingTable {
        &BUNDLED
    }

    pub fn parse(text: &str) -> Result<Self, NetError> {
        let mut anchors: [Vec<(u64, u64)>; 4] = Default::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("segment") {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (Some(seg), Some(payload), Some(packet), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(NetError::MalformedTable(idx + 1));
            };
            let seg = LinkSegment::from_key(seg).ok_or(NetError::MalformedTable(idx + 1))?;
            let payload: u64 = payload.parse().map_err(|_| NetError::MalformedTable(idx + 1))?;
            let packet: u64 = packet.parse().map_err(|_| NetError::MalformedTable(idx + 1))?;
            if packet < payload {
                return Err(NetError::MalformedTable(idx + 1));
            }
            anchors[seg as usize].push((payload, packet));
        }
        for (i, list) in anchors.iter_mut().enumerate() {
            list.sort_unstable();
            if list.is_empty() {
                return Err(NetError::MissingSegment(LinkSegment::ALL[i]));
            }
        }
        Ok(Self { anchors })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| NetError::MalformedTable(0))?;
        Self::parse(&text)
    }

    /// On-wire packet size for a payload on the given segment. Exact at the
    /// anchors; linear interpolation on overhead between them; constant
    /// overhead below the smallest anchor; ratio extrapolation above the
    /// largest.
    pub fn frame_size(&self, payload_bytes: u64, segment: LinkSegment) -> Result<u64, NetError> {
        if payload_bytes == 0 {
            return Err(NetError::EmptyPayload);
        }
        let anchors = &self.anchors[segment as usize];
        if let Ok(i) = anchors.binary_search_by_key(&payload_bytes, |a| a.0) {
            return Ok(anchors[i].1);
        }
        let (first, last) = (anchors[0], anchors[anchors.len() - 1]);
        if payload_bytes < first.0 {
            return Ok(payload_bytes + (first.1 - first.0));
        }
        if payload_bytes > last.0 {
            // round(payload * packet/payload ratio of the largest anchor)
            let num = payload_bytes as u128 * last.1 as u128;
            return Ok(div_round_half_up(num, last.0 as u128));
        }
        let hi = anchors.partition_point(|a| a.0 < payload_bytes);
        let (p1, k1) = anchors[hi - 1];
        let (p2, k2) = anchors[hi];
        let (o1, o2) = (k1 - p1, k2 - p2);
        // overhead interpolated as o1 + (o2-o1)*(p-p1)/(p2-p1), half-up
        let span = (p2 - p1) as i128;
        let delta = (o2 as i128 - o1 as i128) * (payload_bytes - p1) as i128;
        let interpolated = o1 as i128 + div_round_half_up_signed(delta, span);
        Ok(payload_bytes + u64::try_from(interpolated.max(0)).unwrap())
    }
}

fn div_round_half_up(num: u128, den: u128) -> u64 {
    ((num + den / 2) / den) as u64
}

fn div_round_half_up_signed(num: i128, den: i128) -> i128 {
    if num >= 0 {
        (num + den / 2) / den
    } else {
        -((-num + den / 2) / den)
    }
}

/// Transmission time in seconds as an exact rational: `packet_bytes * 8 /
/// bandwidth`.
pub fn transmission_time(packet_bytes: u64, bw_bits_per_s: u64) -> Result<Ratio<u64>, NetError> {
    if bw_bits_per_s == 0 {
        return Err(NetError::ZeroBandwidth);
    }
    Ok(Ratio::new(packet_bytes * 8, bw_bits_per_s))
}

pub fn transmission_time_secs_f64(packet_bytes: u64, bw_bits_per_s: u64) -> Result<f64, NetError> {
    transmission_time(packet_bytes, bw_bits_per_s)
        .map(|r| *r.numer() as f64 / *r.denom() as f64)
}

/// Render a rational number of seconds with at least five decimal places,
/// extending (up to twelve) until the decimal expansion is exact.
pub fn render_seconds(t: Ratio<u64>) -> String {
    let whole = t.numer() / t.denom();
    let mut rem = (t.numer() % t.denom()) as u128;
    let den = *t.denom() as u128;
    let mut digits = String::new();
    while digits.len() < 12 && (digits.len() < 5 || rem != 0) {
        rem *= 10;
        digits.push(char::from(b'0' + (rem / den) as u8));
        rem %= den;
    }
    format!("{whole}.{digits}")
}

/// Policy for deriving the minimum required bandwidth from a payload set:
/// the largest framed message must clear its link within `deadline`, and
/// channel capacity is provisioned in `granularity` steps (40 kbps, the
/// lowest 802.15.4g data rate).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinBandwidthPolicy {
    pub deadline: Ratio<u64>,
    pub granularity_bps: u64,
}

impl Default for MinBandwidthPolicy {
    fn default() -> Self {
        Self {
            deadline: Ratio::new(1, 5),
            granularity_bps: 40_000,
        }
    }
}

/// Minimum provisioned bandwidth for a stack to carry every payload in the
/// set within the policy deadline. For Ethernet the worse of the two wired
/// segments governs.
pub fn min_required_bandwidth(
    payloads: &[u64],
    stack: LinkStack,
    table: &FramingTable,
    policy: MinBandwidthPolicy,
) -> Result<u64, NetError> {
    let segments: &[LinkSegment] = match stack {
        LinkStack::WiSun802154g => &[LinkSegment::SmToAgg],
        LinkStack::LtePdcp => &[LinkSegment::AggToEnb],
        LinkStack::Ethernet8023 => &[LinkSegment::EnbToPgw, LinkSegment::PgwToUp],
    };
    let mut max_packet = 0u64;
    for &payload in payloads {
        if payload == 0 {
            continue;
        }
        for &seg in segments {
            max_packet = max_packet.max(table.frame_size(payload, seg)?);
        }
    }
    if max_packet == 0 {
        return Ok(0);
    }
    // bits / deadline, then ceil to the provisioning granularity
    let bits = max_packet as u128 * 8;
    let raw = bits * *policy.deadline.denom() as u128;
    let raw = raw.div_ceil(*policy.deadline.numer() as u128);
    let g = policy.granularity_bps as u128;
    Ok((raw.div_ceil(g) * g) as u64)
}

/// Reference payload classes and their evaluation-table sizes in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum PayloadClass {
    ProgramList,
    Enrollment,
    Grant,
    SharedKeySubmit,
    FirstReport,
    SubsequentReport,
    SharedKeyDistribute,
}

impl PayloadClass {
    pub const ALL: [PayloadClass; 7] = [
        PayloadClass::ProgramList,
        PayloadClass::Enrollment,
        PayloadClass::Grant,
        PayloadClass::SharedKeySubmit,
        PayloadClass::FirstReport,
        PayloadClass::SubsequentReport,
        PayloadClass::SharedKeyDistribute,
    ];

    /// Reference payload size at the 1024-bit key size.
    pub fn reference_bytes(self) -> u64 {
        match self {
            PayloadClass::ProgramList => 5480,
            PayloadClass::Enrollment => 1024,
            PayloadClass::Grant => 768,
            PayloadClass::SharedKeySubmit => 512,
            PayloadClass::FirstReport => 512,
            PayloadClass::SubsequentReport => 256,
            PayloadClass::SharedKeyDistribute => 512,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PayloadClass::ProgramList => "program list (10 programs)",
            PayloadClass::Enrollment => "enrollment",
            PayloadClass::Grant => "grant",
            PayloadClass::SharedKeySubmit => "shared-key submit",
            PayloadClass::FirstReport => "first report",
            PayloadClass::SubsequentReport => "subsequent report",
            PayloadClass::SharedKeyDistribute => "shared-key distribution",
        }
    }
}

/// One cell of the packet-size/transmission-time table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct NetTableCell {
    pub class: PayloadClass,
    pub segment: LinkSegment,
    pub payload_bytes: u64,
    pub packet_bytes: u64,
    pub bandwidth_bps: u64,
    pub seconds: f64,
    pub seconds_exact: String,
}

/// Compute the full 7x4 reference table from the framing model.
pub fn reference_net_table(table: &FramingTable) -> Result<Vec<NetTableCell>, NetError> {
    let mut cells = Vec::with_capacity(28);
    for class in PayloadClass::ALL {
        for segment in LinkSegment::ALL {
            let payload = class.reference_bytes();
            let packet = table.frame_size(payload, segment)?;
            let bw = segment.per_meter_bandwidth();
            let t = transmission_time(packet, bw)?;
            cells.push(NetTableCell {
                class,
                segment,
                payload_bytes: payload,
                packet_bytes: packet,
                bandwidth_bps: bw,
                seconds: *t.numer() as f64 / *t.denom() as f64,
                seconds_exact: render_seconds(t),
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_payloads_are_exact() {
        let t = FramingTable::bundled();
        assert_eq!(t.frame_size(5480, LinkSegment::SmToAgg).unwrap(), 7099);
        assert_eq!(t.frame_size(1024, LinkSegment::AggToEnb).unwrap(), 1078);
        assert_eq!(t.frame_size(256, LinkSegment::EnbToPgw).unwrap(), 345);
        assert_eq!(t.frame_size(256, LinkSegment::PgwToUp).unwrap(), 345);
        assert_eq!(t.frame_size(512, LinkSegment::PgwToUp).unwrap(), 578);
    }

    #[test]
    fn framing_is_monotone_and_dominates_payload() {
        let t = FramingTable::bundled();
        for seg in LinkSegment::ALL {
            let mut prev = 0;
            for payload in (1..7000).step_by(37) {
                let packet = t.frame_size(payload, seg).unwrap();
                assert!(packet >= payload, "packet {packet} < payload {payload}");
                assert!(packet >= prev, "framing not monotone at {payload}");
                prev = packet;
            }
        }
    }

    #[test]
    fn extrapolation_uses_largest_anchor_ratio() {
        let t = FramingTable::bundled();
        // 2x the largest anchor payload keeps its overhead ratio
        let p = t.frame_size(10960, LinkSegment::SmToAgg).unwrap();
        assert_eq!(p, 14198);
    }

    #[test]
    fn empty_payload_rejected() {
        let t = FramingTable::bundled();
        assert!(matches!(
            t.frame_size(0, LinkSegment::SmToAgg),
            Err(NetError::EmptyPayload)
        ));
    }

    #[test]
    fn transmission_times_match_reference_cells() {
        assert_eq!(
            render_seconds(transmission_time(7099, 12_500).unwrap()),
            "4.54336"
        );
        assert_eq!(
            render_seconds(transmission_time(5534, 50_000).unwrap()),
            "0.88544"
        );
        assert_eq!(
            render_seconds(transmission_time(345, 12_500).unwrap()),
            "0.22080"
        );
        assert_eq!(transmission_time(0, 12_500).unwrap(), Ratio::new(0, 1));
    }

    #[test]
    fn transmission_time_is_linear() {
        let one = transmission_time_secs_f64(661, 12_500).unwrap();
        let two = transmission_time_secs_f64(1322, 12_500).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn minimum_bandwidth_reproduces_reference_figures() {
        let t = FramingTable::bundled();
        let payloads: Vec<u64> = PayloadClass::ALL.iter().map(|c| c.reference_bytes()).collect();
        let policy = MinBandwidthPolicy::default();
        assert_eq!(
            min_required_bandwidth(&payloads, LinkStack::WiSun802154g, t, policy).unwrap(),
            320_000
        );
        assert_eq!(
            min_required_bandwidth(&payloads, LinkStack::LtePdcp, t, policy).unwrap(),
            240_000
        );
        assert_eq!(
            min_required_bandwidth(&payloads, LinkStack::Ethernet8023, t, policy).unwrap(),
            240_000
        );
        assert_eq!(
            min_required_bandwidth(&[0], LinkStack::Ethernet8023, t, policy).unwrap(),
            0
        );
    }

    #[test]
    fn reference_table_has_28_cells() {
        let cells = reference_net_table(FramingTable::bundled()).unwrap();
        assert_eq!(cells.len(), 28);
    }
}
