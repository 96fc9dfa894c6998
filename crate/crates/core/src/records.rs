//! Detection records and their tab-separated file format.
//!
//! One record per line, ASCII, LF-terminated, no header:
//!
//! ```text
//! agent<TAB>reading_ps<TAB>channel<TAB>basis<TAB>bit
//! ```
//!
//! Readings are non-decreasing within a file. The ground-truth tag carried
//! by simulator output is never written.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::clocks::ClockReading;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("records not sorted by reading at index {index}")]
    UnsortedInput { index: usize },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: reading decreases")]
    NonMonotone { line: usize },
}

/// Single-character agent identifier (`A`, `B`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(u8);

impl AgentId {
    pub const ALICE: AgentId = AgentId(b'A');
    pub const BOB: AgentId = AgentId(b'B');

    pub fn new(c: char) -> Option<Self> {
        c.is_ascii_alphanumeric().then_some(AgentId(c as u8))
    }

    pub fn as_char(self) -> char {
        self.0 as char
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Signal,
    Dark,
}

/// Ground truth attached by the simulator. Oracle-only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthTag {
    pub origin: Origin,
    /// Emission index of the pair this photon belongs to.
    pub pair: Option<u64>,
    /// Jitter-free clock phase at detection.
    pub ideal_ps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub agent: AgentId,
    pub reading: ClockReading,
    pub channel: u8,
    pub basis: u8,
    pub bit: u8,
    pub truth: Option<TruthTag>,
}

impl DetectionRecord {
    pub fn new(agent: AgentId, reading_ps: i64, channel: u8, basis: u8, bit: u8) -> Self {
        DetectionRecord {
            agent,
            reading: ClockReading(reading_ps),
            channel,
            basis,
            bit,
            truth: None,
        }
    }

    pub fn ps(&self) -> i64 {
        self.reading.0
    }

    pub fn is_signal(&self) -> bool {
        matches!(self.truth, Some(TruthTag { origin: Origin::Signal, .. }))
    }
}

pub fn is_sorted(records: &[DetectionRecord]) -> bool {
    records.windows(2).all(|w| w[0].reading <= w[1].reading)
}

/// Stable sort by reading.
pub fn sort_by_reading(records: &mut [DetectionRecord]) {
    records.sort_by_key(|r| r.reading);
}

/// Records whose reading lies in `[lo, hi)`. Input must be sorted.
pub fn reading_window(records: &[DetectionRecord], lo: i64, hi: i64) -> &[DetectionRecord] {
    let start = records.partition_point(|r| r.ps() < lo);
    let end = records.partition_point(|r| r.ps() < hi);
    &records[start..end.max(start)]
}

pub fn on_channel(records: &[DetectionRecord], channel: u8) -> Vec<DetectionRecord> {
    records.iter().filter(|r| r.channel == channel).cloned().collect()
}

pub fn serialize(records: &[DetectionRecord]) -> Result<Vec<u8>, RecordError> {
    if let Some(i) = records.windows(2).position(|w| w[0].reading > w[1].reading) {
        return Err(RecordError::UnsortedInput { index: i + 1 });
    }
    let mut out = String::with_capacity(records.len() * 24);
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.agent, r.reading.0, r.channel, r.basis, r.bit)
            .expect("write to String");
    }
    Ok(out.into_bytes())
}

pub fn parse(bytes: &[u8]) -> Result<Vec<DetectionRecord>, RecordError> {
    let text = std::str::from_utf8(bytes).map_err(|e| RecordError::MalformedLine {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        reason: "not valid UTF-8".into(),
    })?;
    let mut out = Vec::new();
    let mut last: Option<i64> = None;
    for (i, line) in text.split_terminator('\n').enumerate() {
        let line_no = i + 1;
        let rec = parse_line(line).map_err(|reason| RecordError::MalformedLine { line: line_no, reason })?;
        if last.is_some_and(|prev| rec.ps() < prev) {
            return Err(RecordError::NonMonotone { line: line_no });
        }
        last = Some(rec.ps());
        out.push(rec);
    }
    Ok(out)
}

fn parse_line(line: &str) -> Result<DetectionRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    }
    let mut agent_chars = fields[0].chars();
    let agent = match (agent_chars.next(), agent_chars.next()) {
        (Some(c), None) => AgentId::new(c).ok_or_else(|| format!("bad agent {:?}", fields[0]))?,
        _ => return Err(format!("bad agent {:?}", fields[0])),
    };
    let reading: i64 = fields[1].parse().map_err(|_| format!("bad reading {:?}", fields[1]))?;
    let channel: u8 = fields[2].parse().map_err(|_| format!("bad channel {:?}", fields[2]))?;
    let basis: u8 = fields[3].parse().map_err(|_| format!("bad basis {:?}", fields[3]))?;
    let bit = match fields[4] {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("bit must be 0 or 1, found {other:?}")),
    };
    Ok(DetectionRecord::new(agent, reading, channel, basis, bit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_record_format() {
        let r = DetectionRecord::new(AgentId::ALICE, 42, 0, 1, 0);
        assert_eq!(serialize(&[r]).unwrap(), b"A\t42\t0\t1\t0\n");
    }

    #[test]
    fn empty_in_empty_out() {
        assert!(serialize(&[]).unwrap().is_empty());
        assert!(parse(b"").unwrap().is_empty());
    }

    #[test]
    fn truth_tag_never_written() {
        let mut r = DetectionRecord::new(AgentId::BOB, -7, 1, 0, 1);
        r.truth = Some(TruthTag { origin: Origin::Dark, pair: None, ideal_ps: -7.2 });
        assert_eq!(serialize(&[r]).unwrap(), b"B\t-7\t1\t0\t1\n");
    }

    #[test]
    fn parse_one_line() {
        let recs = parse(b"A\t42\t0\t1\t0\n").unwrap();
        assert_eq!(recs, vec![DetectionRecord::new(AgentId::ALICE, 42, 0, 1, 0)]);
    }

    #[test]
    fn bit_out_of_range_is_malformed() {
        let err = parse(b"A\t42\t0\t1\t2\n").unwrap_err();
        assert_eq!(err, RecordError::MalformedLine { line: 1, reason: "bit must be 0 or 1, found \"2\"".into() });
    }

    #[test]
    fn decreasing_reading_rejected() {
        let err = parse(b"A\t5\t0\t0\t0\nA\t3\t0\t0\t0\n").unwrap_err();
        assert_eq!(err, RecordError::NonMonotone { line: 2 });
    }

    #[test]
    fn other_malformations() {
        for bad in [&b"A\t1\t0\t0\n"[..], b"AB\t1\t0\t0\t0\n", b"A\tx\t0\t0\t0\n", b"A\t1\t300\t0\t0\n", b"A\t1\t0\t0\t0\r\n"] {
            assert!(matches!(parse(bad), Err(RecordError::MalformedLine { line: 1, .. })), "{bad:?}");
        }
    }

    #[test]
    fn unsorted_serialize_rejected() {
        let recs = [DetectionRecord::new(AgentId::ALICE, 2, 0, 0, 0), DetectionRecord::new(AgentId::ALICE, 1, 0, 0, 0)];
        assert_eq!(serialize(&recs).unwrap_err(), RecordError::UnsortedInput { index: 1 });
    }

    #[test]
    fn window_is_half_open() {
        let recs: Vec<_> = [1, 3, 3, 5, 9].iter().map(|&p| DetectionRecord::new(AgentId::ALICE, p, 0, 0, 0)).collect();
        let w = reading_window(&recs, 3, 9);
        assert_eq!(w.iter().map(|r| r.ps()).collect::<Vec<_>>(), vec![3, 3, 5]);
    }

    fn arb_records() -> impl Strategy<Value = Vec<DetectionRecord>> {
        prop::collection::vec((prop::sample::select(vec!['A', 'B', 'S']), any::<i64>(), any::<u8>(), 0u8..4, 0u8..2), 0..64)
            .prop_map(|mut v| {
                v.sort_by_key(|x| x.1);
                v.into_iter()
                    .map(|(a, r, c, b, bit)| DetectionRecord::new(AgentId::new(a).unwrap(), r, c, b, bit))
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn round_trip(recs in arb_records()) {
            let bytes = serialize(&recs).unwrap();
            let back = parse(&bytes).unwrap();
            prop_assert_eq!(&back, &recs);
            prop_assert_eq!(serialize(&back).unwrap(), bytes);
        }
    }
}
