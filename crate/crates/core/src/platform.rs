//! Hardware model: processors, the interconnect link, the virtual clock, and
//! energy accounting.
//!
//! Every other part of the simulator charges time and energy through the types
//! here. Time is integer nanoseconds so that scheduling order and report
//! output are exactly reproducible across runs.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in nanoseconds since run start.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_ms(ms: f64) -> SimTime {
        SimTime((ms * 1_000_000.0).round() as u64)
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    pub fn as_ns(self) -> u64 {
        self.0
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub<SimTime> for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_ms())
    }
}

/// A span of simulated time in nanoseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct SimDuration(pub u64);

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub fn from_ms(ms: f64) -> SimDuration {
        SimDuration((ms * 1_000_000.0).round() as u64)
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("processor `{0}` has active power {1} mW not greater than idle power {2} mW")]
    PowerOrder(String, f64, f64),
    #[error("strength rank {0} is assigned to more than one processor")]
    DuplicateRank(u32),
    #[error("link latency field is negative")]
    NegativeLatency,
    #[error("timeline for `{proc}` has overlapping intervals at {at}")]
    OverlappingIntervals { proc: String, at: SimTime },
    #[error("timeline for `{proc}` is not ordered at {at}")]
    UnorderedIntervals { proc: String, at: SimTime },
    #[error("unknown processor `{0}`")]
    UnknownProcessor(String),
}

/// Static description of one processor.
///
/// The stock trio mirrors the strong application processor plus two
/// microcontrollers of the reference board: `omap3` (600 MHz, ~200 mW active),
/// `lpc1343` (72 MHz) and `msp430` (3 MHz, 7.5 mW active). `strength_rank`
/// orders processors from weakest to strongest and must be unique within a
/// platform; the ordering drives both object ownership and the request-order
/// regulation, which needs a strict total order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorSpec {
    pub name: String,
    pub clock_hz: u64,
    pub ram_bytes: u64,
    pub rom_bytes: u64,
    pub active_mw: f64,
    pub idle_mw: f64,
    pub strength_rank: u32,
    pub msg_send_cycles: u64,
    pub msg_recv_cycles: u64,
}

impl ProcessorSpec {
    pub fn omap3() -> ProcessorSpec {
        ProcessorSpec {
            name: "omap3".into(),
            clock_hz: 600_000_000,
            ram_bytes: 256 * 1024 * 1024,
            rom_bytes: 256 * 1024 * 1024,
            active_mw: 200.0,
            idle_mw: 13.4,
            strength_rank: 2,
            msg_send_cycles: 1800,
            msg_recv_cycles: 1800,
        }
    }

    pub fn lpc1343() -> ProcessorSpec {
        ProcessorSpec {
            name: "lpc1343".into(),
            clock_hz: 72_000_000,
            ram_bytes: 8 * 1024,
            rom_bytes: 32 * 1024,
            active_mw: 42.9,
            idle_mw: 7.0,
            strength_rank: 1,
            msg_send_cycles: 891,
            msg_recv_cycles: 1612,
        }
    }

    pub fn msp430() -> ProcessorSpec {
        ProcessorSpec {
            name: "msp430".into(),
            clock_hz: 3_000_000,
            ram_bytes: 10 * 1024,
            rom_bytes: 48 * 1024,
            active_mw: 7.5,
            idle_mw: 3.2,
            strength_rank: 0,
            msg_send_cycles: 1500,
            msg_recv_cycles: 1560,
        }
    }

    /// Busy time for `cycles` cycles at this clock, rounded to the nearest ns.
    pub fn cycles_duration(&self, cycles: u64) -> SimDuration {
        let ns = (cycles as u128 * 1_000_000_000u128 + self.clock_hz as u128 / 2)
            / self.clock_hz as u128;
        SimDuration(ns as u64)
    }
}

/// Payload size used by the default-link calibration example: one 64-element
/// 32-bit array. The interconnect is not characterized numerically beyond the
/// tens-of-milliseconds scale, so this is a knob, not ground truth.
pub const TYPICAL_PAYLOAD_BYTES: usize = 256;

/// Interconnect timing. `central_penalty_ms` models the receiver-side kernel
/// context switch that only the central processor pays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub base_latency_ms: f64,
    pub per_byte_ms: f64,
    pub central_penalty_ms: f64,
}

impl Default for LinkSpec {
    fn default() -> LinkSpec {
        // Calibrated: a typical 256-byte transfer lands in the 26..33 ms band,
        // and a small-message round trip (with one central-bound leg) does too.
        LinkSpec {
            base_latency_ms: 8.0,
            per_byte_ms: 0.09,
            central_penalty_ms: 7.0,
        }
    }
}

impl LinkSpec {
    pub fn validate(&self) -> Result<(), PlatformError> {
        if self.base_latency_ms < 0.0 || self.per_byte_ms < 0.0 || self.central_penalty_ms < 0.0 {
            return Err(PlatformError::NegativeLatency);
        }
        Ok(())
    }

    /// End-to-end latency of one message: base + per-byte transfer time, plus
    /// the context-switch penalty when the destination is the central
    /// processor. Deterministic and non-decreasing in the payload size.
    pub fn message_latency_ms(&self, payload_bytes: usize, dest_is_central: bool) -> f64 {
        let mut ms = self.base_latency_ms + self.per_byte_ms * payload_bytes as f64;
        if dest_is_central {
            ms += self.central_penalty_ms;
        }
        ms
    }

    pub fn message_latency(&self, payload_bytes: usize, dest_is_central: bool) -> SimDuration {
        SimDuration::from_ms(self.message_latency_ms(payload_bytes, dest_is_central))
    }

    pub fn penalty(&self) -> SimDuration {
        SimDuration::from_ms(self.central_penalty_ms)
    }
}

/// The global simulated clock. Monotone by construction: the scheduler only
/// ever advances it to the timestamp of the occurrence being processed.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: SimTime,
}

impl VirtualClock {
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn advance_to(&mut self, t: SimTime) {
        assert!(t >= self.now, "virtual clock moved backwards");
        self.now = t;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerState {
    Active,
    Idle,
}

/// One contiguous span in a processor's power-state history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerInterval {
    pub start: SimTime,
    pub end: SimTime,
    pub state: PowerState,
}

/// Per-processor history of Active spans. Gaps are Idle; `settle` makes the
/// Idle spans explicit so the stored timeline is contiguous.
#[derive(Debug, Clone, Default)]
pub struct PowerStateTimeline {
    intervals: Vec<PowerInterval>,
}

impl PowerStateTimeline {
    pub fn new() -> PowerStateTimeline {
        PowerStateTimeline::default()
    }

    /// Construct from explicit intervals (validated later by `settle_energy`).
    pub fn from_intervals(intervals: Vec<PowerInterval>) -> PowerStateTimeline {
        PowerStateTimeline { intervals }
    }

    /// Mark `[start, end)` Active. Spans must be appended in order; adjacent
    /// Active spans merge.
    pub fn mark_active(&mut self, start: SimTime, end: SimTime) {
        if end <= start {
            return;
        }
        if let Some(last) = self.intervals.last_mut() {
            assert!(
                start >= last.end,
                "active interval appended out of order ({} < {})",
                start,
                last.end
            );
            if last.state == PowerState::Active && last.end == start {
                last.end = end;
                return;
            }
        }
        self.intervals.push(PowerInterval {
            start,
            end,
            state: PowerState::Active,
        });
    }

    pub fn intervals(&self) -> &[PowerInterval] {
        &self.intervals
    }

    pub fn active_total(&self) -> SimDuration {
        SimDuration(
            self.intervals
                .iter()
                .filter(|iv| iv.state == PowerState::Active)
                .map(|iv| iv.end.0 - iv.start.0)
                .sum(),
        )
    }

    /// Contiguous copy covering `[0, end)` with Idle filling the gaps.
    pub fn filled(&self, end: SimTime) -> Vec<PowerInterval> {
        let mut out = Vec::with_capacity(self.intervals.len() * 2 + 1);
        let mut cursor = SimTime::ZERO;
        for iv in &self.intervals {
            if iv.start > cursor {
                out.push(PowerInterval {
                    start: cursor,
                    end: iv.start,
                    state: PowerState::Idle,
                });
            }
            out.push(*iv);
            cursor = iv.end;
        }
        if end > cursor {
            out.push(PowerInterval {
                start: cursor,
                end,
                state: PowerState::Idle,
            });
        }
        out
    }
}

/// Accumulated energy per processor, in millijoules.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EnergyLedger {
    pub per_processor_mj: std::collections::BTreeMap<String, f64>,
}

impl EnergyLedger {
    pub fn total_mj(&self) -> f64 {
        self.per_processor_mj.values().sum()
    }
}

/// Integrate power over a contiguous timeline: energy = Σ power(state) × dt.
/// Overlapping or out-of-order intervals are a structural error.
pub fn settle_energy(
    timelines: &[(String, Vec<PowerInterval>)],
    specs: &[ProcessorSpec],
) -> Result<EnergyLedger, PlatformError> {
    let mut ledger = EnergyLedger::default();
    for (name, intervals) in timelines {
        let spec = specs
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| PlatformError::UnknownProcessor(name.clone()))?;
        let mut cursor: Option<SimTime> = None;
        let mut mj = 0.0;
        for iv in intervals {
            if iv.end < iv.start {
                return Err(PlatformError::UnorderedIntervals {
                    proc: name.clone(),
                    at: iv.start,
                });
            }
            if let Some(prev_end) = cursor {
                if iv.start < prev_end {
                    return Err(PlatformError::OverlappingIntervals {
                        proc: name.clone(),
                        at: iv.start,
                    });
                }
            }
            cursor = Some(iv.end);
            let secs = (iv.end.0 - iv.start.0) as f64 / 1e9;
            let mw = match iv.state {
                PowerState::Active => spec.active_mw,
                PowerState::Idle => spec.idle_mw,
            };
            mj += mw * secs;
        }
        ledger.per_processor_mj.insert(name.clone(), mj);
    }
    Ok(ledger)
}

/// Per-processor execution account: serialized busy time plus the Active
/// timeline and a cycle counter.
#[derive(Debug, Clone, Default)]
pub struct CpuAccount {
    pub busy_until: SimTime,
    pub timeline: PowerStateTimeline,
    pub cycles: u64,
}

impl CpuAccount {
    /// Charge `cycles` of work requested at time `at`. Work is serialized
    /// after anything already accounted, marked Active, and counted. Returns
    /// the `(start, end)` span the work occupies.
    pub fn charge_cycles(
        &mut self,
        spec: &ProcessorSpec,
        at: SimTime,
        cycles: u64,
    ) -> (SimTime, SimTime) {
        self.cycles += cycles;
        self.charge_time(at, spec.cycles_duration(cycles))
    }

    /// Charge a fixed Active span (e.g. the kernel receive path) without
    /// touching the cycle counter.
    pub fn charge_time(&mut self, at: SimTime, dur: SimDuration) -> (SimTime, SimTime) {
        let start = self.busy_until.max(at);
        let end = start + dur;
        if dur > SimDuration::ZERO {
            self.timeline.mark_active(start, end);
        }
        self.busy_until = end;
        (start, end)
    }
}

/// A platform: an ordered set of processors plus the shared link.
/// The central processor is the one with the highest strength rank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Platform {
    pub processors: Vec<ProcessorSpec>,
    pub link: LinkSpec,
}

impl Platform {
    /// The stock three-processor platform.
    pub fn tri() -> Platform {
        Platform {
            processors: vec![
                ProcessorSpec::omap3(),
                ProcessorSpec::lpc1343(),
                ProcessorSpec::msp430(),
            ],
            link: LinkSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PlatformError> {
        self.link.validate()?;
        let mut ranks = std::collections::BTreeSet::new();
        for p in &self.processors {
            if p.active_mw <= p.idle_mw || p.idle_mw < 0.0 {
                return Err(PlatformError::PowerOrder(
                    p.name.clone(),
                    p.active_mw,
                    p.idle_mw,
                ));
            }
            if !ranks.insert(p.strength_rank) {
                return Err(PlatformError::DuplicateRank(p.strength_rank));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.processors.iter().position(|p| p.name == name)
    }

    /// Index of the central (strongest) processor.
    pub fn central_index(&self) -> usize {
        self.processors
            .iter()
            .enumerate()
            .max_by_key(|(_, p)| p.strength_rank)
            .map(|(i, _)| i)
            .expect("platform has no processors")
    }

    pub fn is_central(&self, idx: usize) -> bool {
        idx == self.central_index()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_payload_peripheral_is_base_latency() {
        let link = LinkSpec::default();
        assert_eq!(link.message_latency_ms(0, false), 8.0);
    }

    #[test]
    fn typical_payload_lands_in_band() {
        let link = LinkSpec::default();
        let ms = link.message_latency_ms(TYPICAL_PAYLOAD_BYTES, false);
        assert!((26.0..=33.0).contains(&ms), "latency {ms} out of band");
    }

    #[test]
    fn central_dest_adds_seven_ms() {
        let link = LinkSpec::default();
        let peripheral = link.message_latency_ms(TYPICAL_PAYLOAD_BYTES, false);
        let central = link.message_latency_ms(TYPICAL_PAYLOAD_BYTES, true);
        assert!((central - peripheral - 7.0).abs() < 1e-12);
    }

    #[test]
    fn msp_send_cost_is_half_a_millisecond() {
        let msp = ProcessorSpec::msp430();
        assert_eq!(msp.cycles_duration(1500), SimDuration::from_ms(0.5));
    }

    #[test]
    fn zero_cycles_is_zero_time() {
        let msp = ProcessorSpec::msp430();
        assert_eq!(msp.cycles_duration(0), SimDuration::ZERO);
    }

    #[test]
    fn lpc_send_cost_matches_clock() {
        let lpc = ProcessorSpec::lpc1343();
        // 891 cycles at 72 MHz.
        assert_eq!(lpc.cycles_duration(891), SimDuration(12_375));
        assert!((lpc.cycles_duration(891).as_ms() - 0.012375).abs() < 1e-12);
    }

    #[test]
    fn msp_active_second_is_7_5_mj() {
        let tl = vec![(
            "msp430".to_string(),
            vec![PowerInterval {
                start: SimTime::ZERO,
                end: SimTime::from_ms(1000.0),
                state: PowerState::Active,
            }],
        )];
        let ledger = settle_energy(&tl, &Platform::tri().processors).unwrap();
        assert!((ledger.per_processor_mj["msp430"] - 7.5).abs() < 1e-9);
    }

    #[test]
    fn omap_idle_second_is_13_4_mj() {
        let tl = vec![(
            "omap3".to_string(),
            vec![PowerInterval {
                start: SimTime::ZERO,
                end: SimTime::from_ms(1000.0),
                state: PowerState::Idle,
            }],
        )];
        let ledger = settle_energy(&tl, &Platform::tri().processors).unwrap();
        assert!((ledger.per_processor_mj["omap3"] - 13.4).abs() < 1e-9);
    }

    #[test]
    fn empty_timeline_is_zero_energy() {
        let tl = vec![("omap3".to_string(), vec![])];
        let ledger = settle_energy(&tl, &Platform::tri().processors).unwrap();
        assert_eq!(ledger.per_processor_mj["omap3"], 0.0);
        assert_eq!(ledger.total_mj(), 0.0);
    }

    #[test]
    fn overlap_is_a_structural_error() {
        let tl = vec![(
            "omap3".to_string(),
            vec![
                PowerInterval {
                    start: SimTime::ZERO,
                    end: SimTime::from_ms(10.0),
                    state: PowerState::Active,
                },
                PowerInterval {
                    start: SimTime::from_ms(5.0),
                    end: SimTime::from_ms(15.0),
                    state: PowerState::Idle,
                },
            ],
        )];
        assert!(matches!(
            settle_energy(&tl, &Platform::tri().processors),
            Err(PlatformError::OverlappingIntervals { .. })
        ));
    }

    #[test]
    fn duplicate_ranks_rejected() {
        let mut platform = Platform::tri();
        platform.processors[1].strength_rank = 0;
        assert!(matches!(
            platform.validate(),
            Err(PlatformError::DuplicateRank(0))
        ));
    }

    #[test]
    fn cpu_account_serializes_work() {
        let msp = ProcessorSpec::msp430();
        let mut cpu = CpuAccount::default();
        let (s1, e1) = cpu.charge_cycles(&msp, SimTime::ZERO, 1500);
        assert_eq!((s1, e1), (SimTime::ZERO, SimTime::from_ms(0.5)));
        // A request arriving in the middle of busy time queues behind it.
        let (s2, e2) = cpu.charge_cycles(&msp, SimTime::from_ms(0.1), 1500);
        assert_eq!((s2, e2), (SimTime::from_ms(0.5), SimTime::from_ms(1.0)));
        assert_eq!(cpu.cycles, 3000);
        // Adjacent active spans merged.
        assert_eq!(cpu.timeline.intervals().len(), 1);
    }

    #[test]
    fn timeline_fill_covers_gaps() {
        let mut tl = PowerStateTimeline::new();
        tl.mark_active(SimTime::from_ms(2.0), SimTime::from_ms(3.0));
        let filled = tl.filled(SimTime::from_ms(5.0));
        assert_eq!(filled.len(), 3);
        assert_eq!(filled[0].state, PowerState::Idle);
        assert_eq!(filled[1].state, PowerState::Active);
        assert_eq!(filled[2].state, PowerState::Idle);
        assert_eq!(filled[2].end, SimTime::from_ms(5.0));
    }
}
