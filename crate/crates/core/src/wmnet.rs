//! Multi-stable working-memory network with volatile synapses inside item
//! populations.
//!
//! Excitatory and inhibitory LIF pools are randomly connected with static
//! synapses. Each memory item is a subset of the excitatory pool; synapses
//! between two members of the same item are volatile devices, so an item
//! whose neurons fired together recently transmits `w_item` instead of
//! `w_item / r_off_ratio`. Every item has its own input population.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::device::DeviceParams;
use crate::engine::{
    firing_rate, ConnectionSpec, Endpoint, EngineError, Network, NetworkSpec, PairFilter, Phase, PhaseLabel, Protocol,
    RunOptions, RunOutput, SpikeRaster, SynapseKind,
};
use crate::neuron::LifParams;
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmSpec<T> {
    pub n_exc: usize,
    pub n_inh: usize,
    pub n_items: usize,
    pub item_size: usize,
    /// Draw item populations without overlap.
    pub disjoint_items: bool,
    pub input_size: usize,

    pub w_item: T,
    pub w_base: T,
    /// Excitatory to inhibitory PSP.
    pub w_ei: T,
    /// Every inhibitory PSP.
    pub w_inh: T,
    pub w_in: T,

    pub p_ee: T,
    pub p_item: T,
    pub p_ei: T,
    pub p_ie: T,
    pub p_ii: T,
    pub p_in: T,

    pub base_rate_hz: T,
    pub store_multiplier: T,
    pub recall_multiplier: T,

    pub exc: LifParams<T>,
    pub inh: LifParams<T>,
    pub device: DeviceParams<T>,
}

/// Stationary membrane offsets produced by the injected noise (mV).
pub const EXC_NOISE_OFFSET_MV: f64 = 0.5775;
pub const INH_NOISE_OFFSET_MV: f64 = 0.5275;

impl<T: Scalar> WmSpec<T> {
    /// 800 excitatory / 200 inhibitory neurons, five disjoint items of 80 and
    /// five inputs of 100. Connection probabilities are tuned for this size.
    pub fn desk() -> Self {
        let lit = T::lit;
        let dt = T::one();
        Self {
            n_exc: 800,
            n_inh: 200,
            n_items: 5,
            item_size: 80,
            disjoint_items: true,
            input_size: 100,
            w_item: lit(0.5),
            w_base: lit(0.1),
            w_ei: lit(0.1),
            w_inh: lit(-0.2),
            w_in: lit(0.75),
            p_ee: lit(0.1),
            p_item: lit(0.7),
            p_ei: lit(0.5),
            p_ie: lit(1.0),
            p_ii: lit(0.1),
            p_in: lit(1.0),
            base_rate_hz: lit(0.1),
            store_multiplier: lit(10.0),
            recall_multiplier: lit(5.0),
            exc: LifParams::new(lit(15.0), lit(16.0), lit(20.0), 2).with_membrane_noise(
                lit(EXC_NOISE_OFFSET_MV),
                T::one(),
                dt,
            ),
            inh: LifParams::new(lit(10.0), lit(13.0), lit(20.0), 2).with_membrane_noise(
                lit(INH_NOISE_OFFSET_MV),
                T::one(),
                dt,
            ),
            device: DeviceParams::default(),
        }
    }

    /// 8000 / 2000 neurons, items of 800, inputs of 1000. Probabilities are
    /// the desk values divided by ten, which keeps every in-degree unchanged.
    pub fn full() -> Self {
        let d = Self::desk();
        let ten = T::lit(10.0);
        Self {
            n_exc: 8000,
            n_inh: 2000,
            item_size: 800,
            input_size: 1000,
            p_ee: d.p_ee / ten,
            p_item: d.p_item / ten,
            p_ei: d.p_ei / ten,
            p_ie: d.p_ie / ten,
            p_ii: d.p_ii / ten,
            p_in: d.p_in / ten,
            ..d
        }
    }

    pub fn with_device(mut self, device: DeviceParams<T>) -> Self {
        self.device = device;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |s: &str| Err(EngineError::InvalidSpec(s.into()));
        if self.n_exc == 0 || self.n_inh == 0 || self.n_items == 0 || self.item_size == 0 || self.input_size == 0 {
            return bad("network sizes must be >= 1");
        }
        if self.item_size > self.n_exc {
            return bad("item populations must fit in the excitatory pool");
        }
        if self.disjoint_items && self.item_size * self.n_items > self.n_exc {
            return bad("disjoint items need n_items * item_size <= n_exc");
        }
        if self.n_items > 64 {
            return bad("at most 64 items");
        }
        if !(self.store_multiplier >= T::zero()
            && self.recall_multiplier >= T::zero()
            && self.base_rate_hz >= T::zero())
        {
            return bad("rates and multipliers must be non-negative");
        }
        self.device.validate().map_err(|e| EngineError::InvalidSpec(e.to_string()))?;
        Ok(())
    }
}

/// An instantiated WM network.
#[derive(Debug, Clone)]
pub struct WmNetwork<T> {
    pub spec: WmSpec<T>,
    pub network: Network<T>,
    /// Global ids of each item population, sorted.
    pub items: Vec<Vec<usize>>,
    /// Devices whose two ends lie in each item.
    pub item_devices: Vec<Vec<usize>>,
}

fn item_name(k: usize) -> String {
    format!("item{k}")
}

/// Samples item populations and draws the network.
pub fn build_wm<T: Scalar>(spec: &WmSpec<T>, seed: u64) -> Result<WmNetwork<T>, EngineError> {
    spec.validate()?;
    let mut rng = stream(seed, Purpose::Membership, 0);
    let items: Vec<Vec<usize>> = if spec.disjoint_items {
        let mut perm: Vec<usize> = (0..spec.n_exc).collect();
        perm.shuffle(&mut rng);
        (0..spec.n_items)
            .map(|k| {
                let mut m = perm[k * spec.item_size..(k + 1) * spec.item_size].to_vec();
                m.sort_unstable();
                m
            })
            .collect()
    } else {
        (0..spec.n_items)
            .map(|_| {
                let mut m = sample(&mut rng, spec.n_exc, spec.item_size).into_vec();
                m.sort_unstable();
                m
            })
            .collect()
    };

    let names: Vec<String> = (0..spec.n_items).map(item_name).collect();
    let conn = |source: Endpoint, target: Endpoint, probability, weight, kind, filter| ConnectionSpec {
        source,
        target,
        probability,
        weight,
        kind,
        filter,
    };
    let pop = |n: &str| Endpoint::Population(n.into());
    let mut net = NetworkSpec::new().population("exc", spec.n_exc, spec.exc).population("inh", spec.n_inh, spec.inh);
    for (k, m) in items.iter().enumerate() {
        net = net.group(&names[k], "exc", m.clone());
    }
    for k in 0..spec.n_items {
        net = net.input(&format!("in{k}"), spec.input_size, spec.base_rate_hz);
    }
    net = net
        .connect(conn(
            pop("exc"),
            pop("exc"),
            spec.p_ee,
            spec.w_base,
            SynapseKind::Static,
            PairFilter::NotSameGroup(names.clone()),
        ))
        .connect(conn(
            pop("exc"),
            pop("exc"),
            spec.p_item,
            spec.w_item,
            SynapseKind::Volatile(spec.device),
            PairFilter::SameGroup(names.clone()),
        ))
        .connect(conn(pop("exc"), pop("inh"), spec.p_ei, spec.w_ei, SynapseKind::Static, PairFilter::All))
        .connect(conn(pop("inh"), pop("exc"), spec.p_ie, spec.w_inh, SynapseKind::Static, PairFilter::All))
        .connect(conn(pop("inh"), pop("inh"), spec.p_ii, spec.w_inh, SynapseKind::Static, PairFilter::All));
    for k in 0..spec.n_items {
        net = net.connect(conn(
            Endpoint::Input(format!("in{k}")),
            Endpoint::Group(names[k].clone()),
            spec.p_in,
            spec.w_in,
            SynapseKind::Static,
            PairFilter::All,
        ));
    }
    let network = net.instantiate(seed)?;
    let item_devices = items.iter().map(|m| network.devices_within(m)).collect();
    Ok(WmNetwork { spec: *spec, network, items, item_devices })
}

/// One step of a WM schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum WmPhase {
    /// Raises the item's input rate by the store multiplier.
    Store { item: usize, duration_ms: u64 },
    /// All inputs at base rate.
    Timeout { duration_ms: u64 },
    /// All inputs at the recall multiplier.
    Recall { duration_ms: u64 },
}

impl WmPhase {
    pub fn duration_ms(&self) -> u64 {
        match *self {
            WmPhase::Store { duration_ms, .. } | WmPhase::Timeout { duration_ms } | WmPhase::Recall { duration_ms } => {
                duration_ms
            }
        }
    }
}

/// Baseline, store, delay, recall.
pub fn standard_schedule(item: usize, delay_ms: u64) -> Vec<WmPhase> {
    vec![
        WmPhase::Timeout { duration_ms: 300 },
        WmPhase::Store { item, duration_ms: 1000 },
        WmPhase::Timeout { duration_ms: delay_ms },
        WmPhase::Recall { duration_ms: 300 },
    ]
}

impl<T: Scalar> WmNetwork<T> {
    pub fn protocol(&self, schedule: &[WmPhase]) -> Result<Protocol<T>, EngineError> {
        let n = self.spec.n_items;
        let phases = schedule
            .iter()
            .map(|ph| {
                let (label, mult) = match *ph {
                    WmPhase::Store { item, .. } => {
                        if item >= n {
                            return Err(EngineError::InvalidProtocol(format!("item {item} out of range")));
                        }
                        let mut m = vec![T::one(); n];
                        m[item] = self.spec.store_multiplier;
                        (PhaseLabel::Store, m)
                    }
                    WmPhase::Timeout { .. } => (PhaseLabel::Timeout, vec![T::one(); n]),
                    WmPhase::Recall { .. } => (PhaseLabel::Recall, vec![self.spec.recall_multiplier; n]),
                };
                Ok(Phase::new(label, ph.duration_ms()).with_multipliers(mult))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Protocol::new(phases))
    }

    /// Runs a schedule from the current network state.
    pub fn run_protocol(
        &mut self,
        schedule: &[WmPhase],
        seed: u64,
        opts: &RunOptions,
    ) -> Result<RunOutput, EngineError> {
        let proto = self.protocol(schedule)?;
        self.network.run(&proto, seed, opts)
    }

    /// Fraction of each item's devices ON at time `t`.
    pub fn item_on_fractions(&self, t: u64) -> Vec<f64> {
        self.item_devices.iter().map(|d| self.network.on_fraction(d, t)).collect()
    }

    pub fn excitatory_ids(&self) -> Vec<usize> {
        (0..self.spec.n_exc).collect()
    }

    pub fn snr(&self, raster: &SpikeRaster, stored_item: usize, start: u64, end: u64) -> Result<Snr, EngineError> {
        snr(raster, &self.items, stored_item, start, end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    /// `specific_hz / nonspecific_hz`, `+inf` when the denominator is 0.
    pub ratio: f64,
    pub specific_hz: f64,
    pub nonspecific_hz: f64,
    pub infinite: bool,
}

/// Rate of the stored item's population over the rate of the union of the
/// other item populations.
pub fn snr(
    raster: &SpikeRaster,
    items: &[Vec<usize>],
    stored_item: usize,
    start: u64,
    end: u64,
) -> Result<Snr, EngineError> {
    if stored_item >= items.len() {
        return Err(EngineError::InvalidProtocol(format!("item {stored_item} out of range")));
    }
    let specific_hz = firing_rate(raster, &items[stored_item], start, end)?;
    let mut others: Vec<usize> =
        items.iter().enumerate().filter(|(k, _)| *k != stored_item).flat_map(|(_, m)| m.iter().copied()).collect();
    others.sort_unstable();
    others.dedup();
    let nonspecific_hz = firing_rate(raster, &others, start, end)?;
    let infinite = nonspecific_hz == 0.0;
    let ratio = if infinite { f64::INFINITY } else { specific_hz / nonspecific_hz };
    Ok(Snr { ratio, specific_hz, nonspecific_hz, infinite })
}

/// SNR in the final recall window of the standard schedule.
pub fn recall_snr<T: Scalar>(spec: &WmSpec<T>, item: usize, delay_ms: u64, seed: u64) -> Result<Snr, EngineError> {
    let mut wm = build_wm(spec, seed)?;
    let out = wm.run_protocol(&standard_schedule(item, delay_ms), seed, &RunOptions::default())?;
    let w = out.phases.last().expect("schedule has phases");
    wm.snr(&out.raster, item, w.start_ms, w.end_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Spike;

    fn small() -> WmSpec<f64> {
        WmSpec { n_exc: 100, n_inh: 25, item_size: 10, input_size: 10, ..WmSpec::desk() }
    }

    #[test]
    fn items_have_exact_size_and_are_disjoint_by_default() {
        let wm = build_wm(&small(), 3).unwrap();
        let mut all: Vec<usize> = wm.items.iter().flatten().copied().collect();
        assert!(wm.items.iter().all(|m| m.len() == 10));
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 50);
    }

    #[test]
    fn volatile_synapses_only_inside_items() {
        let wm = build_wm(&small(), 4).unwrap();
        assert!(!wm.network.device_pairs().is_empty());
        for &(a, b) in wm.network.device_pairs() {
            let shared = wm
                .items
                .iter()
                .any(|m| m.binary_search(&(a as usize)).is_ok() && m.binary_search(&(b as usize)).is_ok());
            assert!(shared, "device {a}->{b} outside items");
        }
        let total: usize = wm.item_devices.iter().map(|d| d.len()).sum();
        assert_eq!(total, wm.network.device_pairs().len());
    }

    #[test]
    fn overlapping_items_overlap_hypergeometrically() {
        // E[|A ∩ B|] = 800 * 800 / 8000 = 80, var = 80 * 0.9 * 7200/7999
        let spec = WmSpec::<f64> { disjoint_items: false, ..WmSpec::full() };
        let sd: f64 = (80.0f64 * 0.9 * 7200.0 / 7999.0).sqrt();
        let mut mean = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = stream(seed, Purpose::Membership, 0);
            let a = sample(&mut rng, spec.n_exc, spec.item_size).into_vec();
            let b: std::collections::HashSet<usize> =
                sample(&mut rng, spec.n_exc, spec.item_size).into_iter().collect();
            let overlap = a.iter().filter(|x| b.contains(x)).count() as f64;
            assert!((overlap - 80.0).abs() < 4.0 * sd, "{overlap}");
            mean += overlap / seeds as f64;
        }
        assert!((mean - 80.0).abs() < 3.0 * sd / (seeds as f64).sqrt());
    }

    #[test]
    fn schedule_to_protocol() {
        let wm = build_wm(&small(), 0).unwrap();
        let p = wm.protocol(&standard_schedule(2, 1000)).unwrap();
        assert_eq!(p.duration_ms(), 2600);
        assert_eq!(p.phases[1].rate_multipliers, vec![1.0, 1.0, 10.0, 1.0, 1.0]);
        assert_eq!(p.phases[3].rate_multipliers, vec![5.0; 5]);
        assert!(wm.protocol(&[WmPhase::Store { item: 9, duration_ms: 5 }]).is_err());
    }

    #[test]
    fn snr_definition() {
        let items = vec![vec![0, 1], vec![2, 3], vec![4, 5]];
        // item 0: 20 spikes over 2 neurons in 1 s = 10 Hz; others 4 spikes over 4 = 1 Hz
        let mut spikes: Vec<Spike> = (0..20).map(|k| Spike { time_ms: k * 10, neuron_id: (k % 2) as u32 }).collect();
        spikes.extend((0..4).map(|k| Spike { time_ms: 500 + k, neuron_id: 2 + k as u32 }));
        spikes.sort();
        let r = SpikeRaster { spikes };
        let s = snr(&r, &items, 0, 0, 1000).unwrap();
        assert!((s.ratio - 10.0).abs() < 1e-12);
        let s = snr(&r, &items, 0, 0, 200).unwrap();
        assert!(s.infinite && s.ratio.is_infinite());
        assert!(snr(&r, &items, 0, 10, 10).is_err());
    }

    #[test]
    fn full_preset_keeps_in_degrees() {
        let d = WmSpec::<f64>::desk();
        let f = WmSpec::<f64>::full();
        let deg =
            |s: &WmSpec<f64>| (s.p_item * s.item_size as f64, s.p_ie * s.n_inh as f64, s.p_in * s.input_size as f64);
        let (a, b) = (deg(&d), deg(&f));
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9);
    }
}
