//! Clocked network simulation at a fixed 1 ms step.
//!
//! A [`NetworkSpec`] names neuron populations, input populations, neuron
//! groups (possibly overlapping subsets of a population) and random
//! connection rules. [`NetworkSpec::instantiate`] draws the edges into a
//! compressed sparse row layout keyed by source; every volatile synapse owns
//! one [`DeviceState`].
//!
//! Within a step at time `t` input spikes are drawn first, then every neuron
//! integrates what arrived for `t` and spikes are routed to the buffer for
//! `t + 1`. A volatile synapse transmits with the state its device has when
//! the presynaptic spike is emitted; the spike then stimulates the device.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceParams, DeviceState};
use crate::neuron::{lif_step, LifParams, LifState};
use crate::rng::{stream, Purpose};
use crate::scalar::{bernoulli, Scalar};

/// Simulation step in ms.
pub const DT_MS: u64 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0}")]
    InvalidSpec(String),
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("window [{start}, {end}) ms is empty")]
    EmptyWindow { start: u64, end: u64 },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec<T> {
    pub name: String,
    pub size: usize,
    pub lif: LifParams<T>,
}

/// Bernoulli spike sources with a base rate that phases scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec<T> {
    pub name: String,
    pub size: usize,
    pub base_rate_hz: T,
}

/// Named subset of one population, by index within that population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub population: String,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Endpoint {
    Population(String),
    Group(String),
    Input(String),
}

/// Restricts which (source, target) pairs a rule may connect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PairFilter {
    All,
    /// Both ends share at least one of the listed groups.
    SameGroup(Vec<String>),
    /// The ends share none of the listed groups.
    NotSameGroup(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SynapseKind<T> {
    Static,
    /// Transmission is scaled by the device state (`r_on` or the OFF
    /// weight); each presynaptic spike stimulates the device with `rho`.
    Volatile(DeviceParams<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSpec<T> {
    pub source: Endpoint,
    pub target: Endpoint,
    pub probability: T,
    /// PSP amplitude in mV.
    pub weight: T,
    pub kind: SynapseKind<T>,
    pub filter: PairFilter,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkSpec<T> {
    pub populations: Vec<PopulationSpec<T>>,
    pub inputs: Vec<InputSpec<T>>,
    pub groups: Vec<GroupSpec>,
    pub connections: Vec<ConnectionSpec<T>>,
}

impl<T: Scalar> NetworkSpec<T> {
    pub fn new() -> Self {
        Self { populations: Vec::new(), inputs: Vec::new(), groups: Vec::new(), connections: Vec::new() }
    }

    pub fn population(mut self, name: &str, size: usize, lif: LifParams<T>) -> Self {
        self.populations.push(PopulationSpec { name: name.into(), size, lif });
        self
    }

    pub fn input(mut self, name: &str, size: usize, base_rate_hz: T) -> Self {
        self.inputs.push(InputSpec { name: name.into(), size, base_rate_hz });
        self
    }

    pub fn group(mut self, name: &str, population: &str, members: Vec<usize>) -> Self {
        self.groups.push(GroupSpec { name: name.into(), population: population.into(), members });
        self
    }

    pub fn connect(mut self, c: ConnectionSpec<T>) -> Self {
        self.connections.push(c);
        self
    }

    pub fn n_neurons(&self) -> usize {
        self.populations.iter().map(|p| p.size).sum()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.iter().map(|p| p.size).sum()
    }

    fn population_offsets(&self) -> HashMap<&str, (usize, usize)> {
        let mut off = 0;
        let mut m = HashMap::new();
        for p in &self.populations {
            m.insert(p.name.as_str(), (off, p.size));
            off += p.size;
        }
        m
    }

    fn input_offsets(&self) -> HashMap<&str, (usize, usize)> {
        let mut off = self.n_neurons();
        let mut m = HashMap::new();
        for p in &self.inputs {
            m.insert(p.name.as_str(), (off, p.size));
            off += p.size;
        }
        m
    }

    /// Global neuron ids of a population or group.
    pub fn members(&self, name: &str) -> Result<Vec<usize>, EngineError> {
        let pops = self.population_offsets();
        if let Some(&(off, size)) = pops.get(name) {
            return Ok((off..off + size).collect());
        }
        if let Some(g) = self.groups.iter().find(|g| g.name == name) {
            let &(off, _) = pops
                .get(g.population.as_str())
                .ok_or_else(|| EngineError::UnknownName { kind: "population", name: g.population.clone() })?;
            return Ok(g.members.iter().map(|m| off + m).collect());
        }
        Err(EngineError::UnknownName { kind: "population or group", name: name.into() })
    }

    fn endpoint_ids(&self, e: &Endpoint) -> Result<Vec<usize>, EngineError> {
        match e {
            Endpoint::Population(n) => {
                let &(off, size) = self
                    .population_offsets()
                    .get(n.as_str())
                    .ok_or_else(|| EngineError::UnknownName { kind: "population", name: n.clone() })?;
                Ok((off..off + size).collect())
            }
            Endpoint::Group(n) => {
                if !self.groups.iter().any(|g| &g.name == n) {
                    return Err(EngineError::UnknownName { kind: "group", name: n.clone() });
                }
                self.members(n)
            }
            Endpoint::Input(n) => {
                let &(off, size) = self
                    .input_offsets()
                    .get(n.as_str())
                    .ok_or_else(|| EngineError::UnknownName { kind: "input", name: n.clone() })?;
                Ok((off..off + size).collect())
            }
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |s: String| Err(EngineError::InvalidSpec(s));
        let mut names = std::collections::HashSet::new();
        for p in &self.populations {
            if p.size == 0 {
                return bad(format!("population `{}` has size 0", p.name));
            }
            p.lif.validate().map_err(|e| EngineError::InvalidSpec(format!("population `{}`: {e}", p.name)))?;
            if !names.insert(p.name.clone()) {
                return bad(format!("duplicate name `{}`", p.name));
            }
        }
        for i in &self.inputs {
            if i.size == 0 {
                return bad(format!("input `{}` has size 0", i.name));
            }
            if !(i.base_rate_hz >= T::zero()) || !i.base_rate_hz.is_finite() {
                return bad(format!("input `{}` has negative rate", i.name));
            }
            if !names.insert(i.name.clone()) {
                return bad(format!("duplicate name `{}`", i.name));
            }
        }
        let pops = self.population_offsets();
        for g in &self.groups {
            let Some(&(_, size)) = pops.get(g.population.as_str()) else {
                return Err(EngineError::UnknownName { kind: "population", name: g.population.clone() });
            };
            if g.members.is_empty() {
                return bad(format!("group `{}` is empty", g.name));
            }
            if let Some(m) = g.members.iter().find(|&&m| m >= size) {
                return bad(format!("group `{}` member {m} outside population of {size}", g.name));
            }
            if !names.insert(g.name.clone()) {
                return bad(format!("duplicate name `{}`", g.name));
            }
        }
        for (k, c) in self.connections.iter().enumerate() {
            if !(c.probability >= T::zero() && c.probability <= T::one()) {
                return bad(format!("connection {k}: probability {} outside [0, 1]", c.probability));
            }
            if !c.weight.is_finite() {
                return bad(format!("connection {k}: weight is not finite"));
            }
            if let Endpoint::Input(_) = c.target {
                return bad(format!("connection {k}: inputs cannot be targets"));
            }
            if let SynapseKind::Volatile(d) = &c.kind {
                d.validate().map_err(|e| EngineError::InvalidSpec(format!("connection {k}: {e}")))?;
            }
            self.endpoint_ids(&c.source)?;
            self.endpoint_ids(&c.target)?;
            if let PairFilter::SameGroup(gs) | PairFilter::NotSameGroup(gs) = &c.filter {
                if gs.len() > 64 {
                    return bad(format!("connection {k}: pair filters support at most 64 groups"));
                }
                for g in gs {
                    if !self.groups.iter().any(|x| &x.name == g) {
                        return Err(EngineError::UnknownName { kind: "group", name: g.clone() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws every edge independently with its rule's probability. Edges
    /// from a neuron to itself are never created.
    pub fn instantiate(&self, seed: u64) -> Result<Network<T>, EngineError> {
        self.validate()?;
        let n_neurons = self.n_neurons();
        let n_sources = n_neurons + self.n_inputs();

        let mut edges: Vec<(u32, u32, T, u32)> = Vec::new();
        let mut device_params: Vec<DeviceParams<T>> = Vec::new();
        let mut device_class: Vec<u16> = Vec::new();
        let mut device_pairs: Vec<(u32, u32)> = Vec::new();
        let mut conn_of_device: Vec<u32> = Vec::new();

        for (k, c) in self.connections.iter().enumerate() {
            let mut rng = stream(seed, Purpose::Connectivity, k as u64);
            let src = self.endpoint_ids(&c.source)?;
            let tgt = self.endpoint_ids(&c.target)?;
            let mask = match &c.filter {
                PairFilter::All => None,
                PairFilter::SameGroup(gs) | PairFilter::NotSameGroup(gs) => {
                    let mut m = vec![0u64; n_neurons];
                    for (bit, g) in gs.iter().enumerate() {
                        for id in self.members(g)? {
                            m[id] |= 1 << bit;
                        }
                    }
                    Some(m)
                }
            };
            let want_shared = matches!(c.filter, PairFilter::SameGroup(_));
            let class = match &c.kind {
                SynapseKind::Static => None,
                SynapseKind::Volatile(p) => {
                    device_params.push(*p);
                    Some((device_params.len() - 1) as u16)
                }
            };
            for &s in &src {
                for &t in &tgt {
                    if s == t {
                        continue;
                    }
                    if let Some(m) = &mask {
                        let ms = if s < n_neurons { m[s] } else { 0 };
                        if ((ms & m[t]) != 0) != want_shared {
                            continue;
                        }
                    }
                    if bernoulli(c.probability, &mut rng) {
                        let dev = match class {
                            None => u32::MAX,
                            Some(cl) => {
                                device_class.push(cl);
                                device_pairs.push((s as u32, t as u32));
                                conn_of_device.push(k as u32);
                                (device_class.len() - 1) as u32
                            }
                        };
                        edges.push((s as u32, t as u32, c.weight, dev));
                    }
                }
            }
        }

        // Stable counting sort by source.
        let mut row_start = vec![0u32; n_sources + 1];
        for e in &edges {
            row_start[e.0 as usize + 1] += 1;
        }
        for i in 0..n_sources {
            row_start[i + 1] += row_start[i];
        }
        let mut fill = row_start.clone();
        let mut synapses = vec![Synapse { target: 0, weight: T::zero(), device: u32::MAX }; edges.len()];
        for (s, t, w, d) in edges {
            let slot = &mut fill[s as usize];
            synapses[*slot as usize] = Synapse { target: t, weight: w, device: d };
            *slot += 1;
        }

        let mut pop_of = Vec::with_capacity(n_neurons);
        for (k, p) in self.populations.iter().enumerate() {
            pop_of.extend(std::iter::repeat_n(k as u16, p.size));
        }
        let neurons =
            self.populations.iter().flat_map(|p| std::iter::repeat_n(LifState::at_rest(&p.lif), p.size)).collect();
        let n_devices = device_class.len();
        Ok(Network {
            spec: self.clone(),
            n_neurons,
            row_start,
            synapses,
            pop_of,
            lif: self.populations.iter().map(|p| p.lif).collect(),
            neurons,
            devices: vec![DeviceState::OFF; n_devices],
            device_class,
            device_params,
            device_pairs,
            conn_of_device,
            time: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Synapse<T> {
    pub target: u32,
    pub weight: T,
    /// Index into the device table, `u32::MAX` for static synapses.
    pub device: u32,
}

impl<T> Synapse<T> {
    pub fn is_volatile(&self) -> bool {
        self.device != u32::MAX
    }
}

/// An instantiated network with its runtime state. Neuron ids are global:
/// populations in declaration order, then input neurons.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec<T>,
    n_neurons: usize,
    row_start: Vec<u32>,
    synapses: Vec<Synapse<T>>,
    pop_of: Vec<u16>,
    lif: Vec<LifParams<T>>,
    neurons: Vec<LifState<T>>,
    devices: Vec<DeviceState>,
    device_class: Vec<u16>,
    device_params: Vec<DeviceParams<T>>,
    device_pairs: Vec<(u32, u32)>,
    conn_of_device: Vec<u32>,
    time: u64,
}

/// Phase role in a protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseLabel {
    Store,
    Timeout,
    Recall,
    Free,
}

impl std::fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhaseLabel::Store => "store",
            PhaseLabel::Timeout => "timeout",
            PhaseLabel::Recall => "recall",
            PhaseLabel::Free => "free",
        })
    }
}

/// A forced spike of one input neuron at `offset_ms` into a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pulse {
    pub offset_ms: u64,
    pub input: usize,
    pub neuron: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase<T> {
    pub label: PhaseLabel,
    pub duration_ms: u64,
    /// One factor per input population; empty means all 1.
    pub rate_multipliers: Vec<T>,
    pub pulses: Vec<Pulse>,
}

impl<T: Scalar> Phase<T> {
    pub fn new(label: PhaseLabel, duration_ms: u64) -> Self {
        Self { label, duration_ms, rate_multipliers: Vec::new(), pulses: Vec::new() }
    }

    pub fn with_multipliers(mut self, m: Vec<T>) -> Self {
        self.rate_multipliers = m;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Protocol<T> {
    pub phases: Vec<Phase<T>>,
}

impl<T: Scalar> Protocol<T> {
    pub fn new(phases: Vec<Phase<T>>) -> Self {
        Self { phases }
    }

    pub fn duration_ms(&self) -> u64 {
        self.phases.iter().map(|p| p.duration_ms).sum()
    }

    pub fn validate(&self, spec: &NetworkSpec<T>) -> Result<(), EngineError> {
        let bad = |s: String| Err(EngineError::InvalidProtocol(s));
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        for (k, p) in self.phases.iter().enumerate() {
            if p.duration_ms == 0 {
                return bad(format!("phase {k} ({}) has zero duration", p.label));
            }
            if !p.rate_multipliers.is_empty() && p.rate_multipliers.len() != spec.inputs.len() {
                return bad(format!(
                    "phase {k}: {} rate multipliers for {} input populations",
                    p.rate_multipliers.len(),
                    spec.inputs.len()
                ));
            }
            if p.rate_multipliers.iter().any(|m| !(*m >= T::zero()) || !m.is_finite()) {
                return bad(format!("phase {k}: rate multipliers must be non-negative"));
            }
            for pulse in &p.pulses {
                if pulse.offset_ms >= p.duration_ms {
                    return bad(format!("phase {k}: pulse at {} ms outside the phase", pulse.offset_ms));
                }
                match spec.inputs.get(pulse.input) {
                    Some(i) if pulse.neuron < i.size => {}
                    _ => return bad(format!("phase {k}: pulse targets a missing input neuron")),
                }
            }
        }
        Ok(())
    }
}

/// Start and end (exclusive) of a protocol phase in absolute time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub label: PhaseLabel,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Spike {
    pub time_ms: u64,
    pub neuron_id: u32,
}

/// Spikes in emission order: non-decreasing time, ascending id within a step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpikeRaster {
    pub spikes: Vec<Spike>,
}

impl SpikeRaster {
    pub fn len(&self) -> usize {
        self.spikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spikes.is_empty()
    }

    /// Spikes with `start <= time < end`.
    pub fn window(&self, start: u64, end: u64) -> &[Spike] {
        let a = self.spikes.partition_point(|s| s.time_ms < start);
        let b = self.spikes.partition_point(|s| s.time_ms < end);
        &self.spikes[a..b]
    }

    /// Spike count per neuron id in the window.
    pub fn counts(&self, n: usize, start: u64, end: u64) -> Vec<u32> {
        let mut c = vec![0u32; n];
        for s in self.window(start, end) {
            if let Some(x) = c.get_mut(s.neuron_id as usize) {
                *x += 1;
            }
        }
        c
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EngineError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["time_ms", "neuron_id"])?;
        for s in &self.spikes {
            wtr.write_record([s.time_ms.to_string(), s.neuron_id.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Mean rate in Hz of the neurons in `population` over `[start, end)` ms.
pub fn firing_rate(raster: &SpikeRaster, population: &[usize], start: u64, end: u64) -> Result<f64, EngineError> {
    if end <= start {
        return Err(EngineError::EmptyWindow { start, end });
    }
    if population.is_empty() {
        return Ok(0.0);
    }
    let max = population.iter().copied().max().unwrap_or(0) + 1;
    let mut member = vec![false; max];
    for &p in population {
        member[p] = true;
    }
    let n =
        raster.window(start, end).iter().filter(|s| member.get(s.neuron_id as usize).copied().unwrap_or(false)).count();
    Ok(n as f64 / (population.len() as f64 * (end - start) as f64 / 1000.0))
}

/// What to sample into the trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceKind {
    /// Mean membrane potential of a population or group.
    MeanPotential(String),
    NeuronPotential(usize),
    /// Fraction of devices that are ON. With a group, only devices whose
    /// two ends both belong to it.
    DevicesOn(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub channel: String,
    pub kind: TraceKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceLog {
    pub channels: Vec<String>,
    /// `(time_ms, channel index, value)`
    pub rows: Vec<(u64, u16, f64)>,
}

impl TraceLog {
    pub fn channel(&self, name: &str) -> Vec<(u64, f64)> {
        match self.channels.iter().position(|c| c == name) {
            None => Vec::new(),
            Some(k) => self.rows.iter().filter(|r| r.1 as usize == k).map(|r| (r.0, r.2)).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EngineError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["time_ms", "channel", "value"])?;
        for (t, c, v) in &self.rows {
            wtr.write_record([t.to_string(), self.channels[*c as usize].clone(), v.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    pub record_inputs: bool,
    pub traces: Vec<TraceRequest>,
    /// Sampling period of traces in steps (0 disables).
    pub trace_every: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub raster: SpikeRaster,
    pub traces: TraceLog,
    pub phases: Vec<PhaseWindow>,
    /// PSPs routed through realized edges.
    pub delivered: u64,
}

enum ResolvedTrace {
    Mean(Vec<usize>),
    Neuron(usize),
    Devices(Vec<usize>),
}

impl<T: Scalar> Network<T> {
    pub fn spec(&self) -> &NetworkSpec<T> {
        &self.spec
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn n_inputs(&self) -> usize {
        self.row_start.len() - 1 - self.n_neurons
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn synapses(&self) -> &[Synapse<T>] {
        &self.synapses
    }

    /// Outgoing synapses of a source id (neuron or input).
    pub fn outgoing(&self, source: usize) -> &[Synapse<T>] {
        &self.synapses[self.row_start[source] as usize..self.row_start[source + 1] as usize]
    }

    pub fn out_degree(&self, source: usize) -> usize {
        (self.row_start[source + 1] - self.row_start[source]) as usize
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn devices_mut(&mut self) -> &mut [DeviceState] {
        &mut self.devices
    }

    /// `(pre, post)` global ids for each device.
    pub fn device_pairs(&self) -> &[(u32, u32)] {
        &self.device_pairs
    }

    /// Index of the connection rule that created each device.
    pub fn device_connection(&self, device: usize) -> usize {
        self.conn_of_device[device] as usize
    }

    pub fn device_params(&self, device: usize) -> &DeviceParams<T> {
        &self.device_params[self.device_class[device] as usize]
    }

    pub fn neurons(&self) -> &[LifState<T>] {
        &self.neurons
    }

    /// Fraction of devices ON at time `t` among `devices`.
    pub fn on_fraction(&self, devices: &[usize], t: u64) -> f64 {
        if devices.is_empty() {
            return 0.0;
        }
        devices.iter().filter(|&&d| self.devices[d].is_on_at(t)).count() as f64 / devices.len() as f64
    }

    /// Devices whose two ends both belong to `members`.
    pub fn devices_within(&self, members: &[usize]) -> Vec<usize> {
        let mut m = vec![false; self.n_neurons];
        for &i in members {
            m[i] = true;
        }
        self.device_pairs
            .iter()
            .enumerate()
            .filter(|(_, (a, b))| {
                m.get(*a as usize).copied().unwrap_or(false) && m.get(*b as usize).copied().unwrap_or(false)
            })
            .map(|(k, _)| k)
            .collect()
    }

    fn resolve_traces(&self, reqs: &[TraceRequest]) -> Result<Vec<ResolvedTrace>, EngineError> {
        reqs.iter()
            .map(|r| {
                Ok(match &r.kind {
                    TraceKind::MeanPotential(name) => ResolvedTrace::Mean(self.spec.members(name)?),
                    TraceKind::NeuronPotential(i) => {
                        if *i >= self.n_neurons {
                            return Err(EngineError::InvalidProtocol(format!("trace neuron {i} out of range")));
                        }
                        ResolvedTrace::Neuron(*i)
                    }
                    TraceKind::DevicesOn(None) => ResolvedTrace::Devices((0..self.devices.len()).collect()),
                    TraceKind::DevicesOn(Some(g)) => {
                        ResolvedTrace::Devices(self.devices_within(&self.spec.members(g)?))
                    }
                })
            })
            .collect()
    }

    /// Runs the protocol from the network's current time and state. Noise,
    /// device and input randomness come from separate streams of `seed`.
    pub fn run(&mut self, protocol: &Protocol<T>, seed: u64, opts: &RunOptions) -> Result<RunOutput, EngineError> {
        protocol.validate(&self.spec)?;
        let traces = self.resolve_traces(&opts.traces)?;
        let mut noise_rng = stream(seed, Purpose::Noise, 0);
        let mut device_rng = stream(seed, Purpose::Device, 0);
        let mut input_rng = stream(seed, Purpose::Input, 0);

        let n = self.n_neurons;
        let dt = T::lit(DT_MS as f64);
        let mut now = vec![T::zero(); n];
        let mut next = vec![T::zero(); n];
        let mut out = RunOutput {
            traces: TraceLog { channels: opts.traces.iter().map(|r| r.channel.clone()).collect(), rows: Vec::new() },
            ..Default::default()
        };
        let input_offsets: Vec<usize> = self
            .spec
            .inputs
            .iter()
            .scan(n, |off, i| {
                let o = *off;
                *off += i.size;
                Some(o)
            })
            .collect();

        for phase in &protocol.phases {
            let start = self.time;
            let probs: Vec<T> = self
                .spec
                .inputs
                .iter()
                .enumerate()
                .map(|(k, i)| {
                    let m = phase.rate_multipliers.get(k).copied().unwrap_or(T::one());
                    (i.base_rate_hz * m * dt / T::lit(1000.0)).min(T::one())
                })
                .collect();
            let mut pulses = phase.pulses.clone();
            pulses.sort_by_key(|p| (p.offset_ms, p.input, p.neuron));
            let mut pulse_ix = 0;

            for step in 0..phase.duration_ms {
                let t = self.time;
                // input spikes
                let mut fired: Vec<usize> = Vec::new();
                for (k, inp) in self.spec.inputs.iter().enumerate() {
                    for j in 0..inp.size {
                        if bernoulli(probs[k], &mut input_rng) {
                            fired.push(input_offsets[k] + j);
                        }
                    }
                }
                while pulse_ix < pulses.len() && pulses[pulse_ix].offset_ms == step {
                    let p = pulses[pulse_ix];
                    fired.push(input_offsets[p.input] + p.neuron);
                    pulse_ix += 1;
                }
                fired.sort_unstable();
                fired.dedup();
                for &src in &fired {
                    out.delivered += self.route(src, t, &mut next, &mut device_rng);
                    if opts.record_inputs {
                        out.raster.spikes.push(Spike { time_ms: t, neuron_id: src as u32 });
                    }
                }
                // neurons
                for i in 0..n {
                    let params = &self.lif[self.pop_of[i] as usize];
                    let (s, spiked) = lif_step(self.neurons[i], now[i], t, dt, params, &mut noise_rng);
                    self.neurons[i] = s;
                    if spiked {
                        out.raster.spikes.push(Spike { time_ms: t, neuron_id: i as u32 });
                        out.delivered += self.route(i, t, &mut next, &mut device_rng);
                    }
                }
                if opts.record_inputs {
                    let len = out.raster.spikes.len();
                    let from = out.raster.spikes.partition_point(|s| s.time_ms < t);
                    out.raster.spikes[from..len].sort_unstable();
                }
                if opts.trace_every > 0 && t.is_multiple_of(opts.trace_every) {
                    for (c, tr) in traces.iter().enumerate() {
                        let v = match tr {
                            ResolvedTrace::Mean(ids) => {
                                ids.iter().map(|&i| self.neurons[i].u.as_f64()).sum::<f64>() / ids.len().max(1) as f64
                            }
                            ResolvedTrace::Neuron(i) => self.neurons[*i].u.as_f64(),
                            ResolvedTrace::Devices(ds) => self.on_fraction(ds, t + 1),
                        };
                        out.traces.rows.push((t, c as u16, v));
                    }
                }
                std::mem::swap(&mut now, &mut next);
                next.iter_mut().for_each(|x| *x = T::zero());
                self.time += 1;
            }
            out.phases.push(PhaseWindow { label: phase.label, start_ms: start, end_ms: self.time });
        }
        Ok(out)
    }

    /// Sends a spike of `src` emitted at `t` along its outgoing synapses.
    #[inline]
    fn route<R: rand::Rng + ?Sized>(&mut self, src: usize, t: u64, next: &mut [T], rng: &mut R) -> u64 {
        let (a, b) = (self.row_start[src] as usize, self.row_start[src + 1] as usize);
        for k in a..b {
            let syn = self.synapses[k];
            let eff = if syn.is_volatile() {
                let d = syn.device as usize;
                let params = &self.device_params[self.device_class[d] as usize];
                let state = self.devices[d].expire(t);
                let w = state.weight(params);
                self.devices[d] = state.stimulate(t, params.rho, params, rng);
                syn.weight * w
            } else {
                syn.weight
            };
            next[syn.target as usize] = next[syn.target as usize] + eff;
        }
        (b - a) as u64
    }
}
