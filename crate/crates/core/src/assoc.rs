//! Associative symbolic working memory.
//!
//! Memory neurons are grouped in categories (shape, texture, colour). Every
//! pair of neurons from different categories shares one volatile device
//! placed between an input gate and an output gate:
//!
//! * the input gate sums `+w_specific` for each of the pair's two neurons
//!   that spiked in the previous step and `w_other` for every other memory
//!   neuron that did;
//! * at or above `write_threshold` the gate programs the device with one
//!   pulse per presynaptic spike (switch with `rho`, or refresh when ON)
//!   without passing anything on;
//! * at or above `read_threshold` it reads the device, which transmits
//!   `r_on` when ON and `r_on / r_off_ratio` when OFF to the output gate;
//! * an output gate at or above `output_threshold` excites both neurons of
//!   the pair.
//!
//! Storing an object fires its neurons together, so exactly its pairs are
//! programmed. Cueing one feature reads the cue's pairs and only ON devices
//! reach their partners. One inhibitory neuron per category is excited by
//! its members and inhibits all of them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceParams, DeviceState};
use crate::engine::{Spike, SpikeRaster};
use crate::neuron::{lif_step, LifParams, LifState};
use crate::rng::{derive_seed, stream, Purpose, SimRng};
use crate::scalar::{bernoulli, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum AssocError {
    #[error("invalid associative network: {0}")]
    InvalidSpec(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("object has no feature for category `{0}`")]
    MissingCategory(String),
    #[error("object has two features of category `{0}`")]
    DuplicateCategory(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams<T> {
    pub w_specific: T,
    pub w_other: T,
    pub read_threshold: T,
    pub write_threshold: T,
    pub output_threshold: T,
}

impl<T: Scalar> Default for GateParams<T> {
    fn default() -> Self {
        Self {
            w_specific: T::one(),
            w_other: T::lit(-0.5),
            read_threshold: T::lit(0.75),
            write_threshold: T::lit(1.25),
            output_threshold: T::lit(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssocSpec<T> {
    pub categories: Vec<Category>,
    pub memory: LifParams<T>,
    pub inhibitory: LifParams<T>,
    /// Input neuron to its memory neuron (V).
    pub w_input: T,
    /// Output gate to memory neuron, and memory neuron to inhibitory (V).
    pub w_exc: T,
    /// Inhibitory neuron to each member of its category (V).
    pub w_inh: T,
    /// `r_on` is the transmitted pulse amplitude in V.
    pub device: DeviceParams<T>,
    pub gates: GateParams<T>,
    pub store_rate_hz: T,
    pub store_ms: u64,
    pub recall_rate_hz: T,
    pub recall_ms: u64,
}

impl<T: Scalar> Default for AssocSpec<T> {
    fn default() -> Self {
        let cat = |name: &str, members: &[&str]| Category {
            name: name.into(),
            members: members.iter().map(|s| s.to_string()).collect(),
        };
        let lit = T::lit;
        let memory = LifParams::new(lit(15.0), T::zero(), lit(1.4), 2);
        let inhibitory = LifParams::new(lit(10.0), T::zero(), lit(1.4), 2);
        Self {
            categories: vec![
                cat("shape", &["cylinder", "cone", "cube"]),
                cat("texture", &["smooth", "rough"]),
                cat("color", &["red", "blue", "green"]),
            ],
            memory,
            inhibitory,
            w_input: lit(1.5),
            w_exc: lit(1.5),
            w_inh: lit(-1.5),
            device: DeviceParams::default().with_rho(lit(0.2)),
            gates: GateParams::default(),
            store_rate_hz: lit(50.0),
            store_ms: 500,
            recall_rate_hz: lit(50.0),
            recall_ms: 200,
        }
    }
}

impl<T: Scalar> AssocSpec<T> {
    pub fn with_device(mut self, device: DeviceParams<T>) -> Self {
        self.device = device;
        self
    }

    pub fn n_memory(&self) -> usize {
        self.categories.iter().map(|c| c.members.len()).sum()
    }

    pub fn validate(&self) -> Result<(), AssocError> {
        let bad = |s: String| Err(AssocError::InvalidSpec(s));
        if self.categories.len() < 2 {
            return bad("need at least two categories".into());
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.categories {
            if c.members.is_empty() {
                return bad(format!("category `{}` is empty", c.name));
            }
            if !seen.insert(format!("category:{}", c.name)) {
                return bad(format!("duplicate category `{}`", c.name));
            }
            for m in &c.members {
                if !seen.insert(m.clone()) {
                    return bad(format!("duplicate feature `{m}`"));
                }
            }
        }
        self.memory.validate().map_err(|e| AssocError::InvalidSpec(e.to_string()))?;
        self.inhibitory.validate().map_err(|e| AssocError::InvalidSpec(e.to_string()))?;
        self.device.validate().map_err(|e| AssocError::InvalidSpec(e.to_string()))?;
        let g = &self.gates;
        if !(g.write_threshold > g.read_threshold) {
            return bad("write threshold must exceed read threshold".into());
        }
        if !(self.store_rate_hz >= T::zero() && self.recall_rate_hz >= T::zero()) {
            return bad("rates must be non-negative".into());
        }
        Ok(())
    }

    /// Feature name to `(category index, neuron index)`.
    pub fn locate(&self, feature: &str) -> Result<(usize, usize), AssocError> {
        let mut idx = 0;
        for (c, cat) in self.categories.iter().enumerate() {
            for m in &cat.members {
                if m == feature {
                    return Ok((c, idx));
                }
                idx += 1;
            }
        }
        Err(AssocError::UnknownFeature(feature.into()))
    }
}

/// What the network answered for one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decoded {
    Feature(String),
    Undecided,
}

#[derive(Debug, Clone)]
pub struct AssocNetwork<T> {
    spec: AssocSpec<T>,
    names: Vec<String>,
    category_of: Vec<usize>,
    /// `(a, b)` with `a < b`, one per cross-category pair.
    pairs: Vec<(usize, usize)>,
    devices: Vec<DeviceState>,
    neurons: Vec<LifState<T>>,
    inhibitory: Vec<LifState<T>>,
    /// Memory neuron inputs arriving at the current step.
    mem_in: Vec<T>,
    inh_in: Vec<T>,
    /// Device outputs reaching the output gates at the current step.
    gate_out_in: Vec<T>,
    prev_spikes: Vec<bool>,
    time: u64,
    raster: SpikeRaster,
    device_rng: SimRng,
    input_rng: SimRng,
}

/// Builds the network; all devices start OFF.
pub fn build_assoc<T: Scalar>(spec: &AssocSpec<T>, seed: u64) -> Result<AssocNetwork<T>, AssocError> {
    spec.validate()?;
    let mut names = Vec::new();
    let mut category_of = Vec::new();
    for (c, cat) in spec.categories.iter().enumerate() {
        for m in &cat.members {
            names.push(m.clone());
            category_of.push(c);
        }
    }
    let n = names.len();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if category_of[a] != category_of[b] {
                pairs.push((a, b));
            }
        }
    }
    let nc = spec.categories.len();
    Ok(AssocNetwork {
        names,
        category_of,
        devices: vec![DeviceState::OFF; pairs.len()],
        gate_out_in: vec![T::zero(); pairs.len()],
        pairs,
        neurons: vec![LifState::at_rest(&spec.memory); n],
        inhibitory: vec![LifState::at_rest(&spec.inhibitory); nc],
        mem_in: vec![T::zero(); n],
        inh_in: vec![T::zero(); nc],
        prev_spikes: vec![false; n],
        time: 0,
        raster: SpikeRaster::default(),
        device_rng: stream(seed, Purpose::Device, 0),
        input_rng: stream(seed, Purpose::Input, 0),
        spec: spec.clone(),
    })
}

impl<T: Scalar> AssocNetwork<T> {
    pub fn spec(&self) -> &AssocSpec<T> {
        &self.spec
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Memory neuron spikes since build; ids index `names()`.
    pub fn raster(&self) -> &SpikeRaster {
        &self.raster
    }

    pub fn pair_index(&self, a: &str, b: &str) -> Result<Option<usize>, AssocError> {
        let (_, x) = self.spec.locate(a)?;
        let (_, y) = self.spec.locate(b)?;
        let key = (x.min(y), x.max(y));
        Ok(self.pairs.iter().position(|p| *p == key))
    }

    /// Devices ON at the current time.
    pub fn on_pairs(&self) -> Vec<(String, String)> {
        self.pairs
            .iter()
            .zip(&self.devices)
            .filter(|(_, d)| d.is_on_at(self.time))
            .map(|(&(a, b), _)| (self.names[a].clone(), self.names[b].clone()))
            .collect()
    }

    /// Input gate drive of each pair for a set of spiking neurons.
    fn gate_drive(&self, spikes: &[bool]) -> Vec<T> {
        let g = &self.spec.gates;
        let total = spikes.iter().filter(|s| **s).count();
        self.pairs
            .iter()
            .map(|&(a, b)| {
                let specific = spikes[a] as usize + spikes[b] as usize;
                g.w_specific * T::lit(specific as f64) + g.w_other * T::lit((total - specific) as f64)
            })
            .collect()
    }

    /// One 1 ms step; `driven` lists memory neurons whose input neuron
    /// spiked at this step (their kick arrives next step).
    fn step(&mut self, driven: &[usize]) {
        let t = self.time;
        let n = self.names.len();
        let spec = &self.spec;
        let dt = T::one();
        let mut next_mem = vec![T::zero(); n];
        let mut next_inh = vec![T::zero(); self.inhibitory.len()];
        let mut next_gate = vec![T::zero(); self.pairs.len()];

        for &i in driven {
            next_mem[i] = next_mem[i] + spec.w_input;
        }

        // input gates act on last step's spikes
        if self.prev_spikes.iter().any(|s| *s) {
            let drive = self.gate_drive(&self.prev_spikes);
            for (k, a) in drive.into_iter().enumerate() {
                if a >= spec.gates.write_threshold {
                    // one programming pulse per presynaptic spike
                    let (x, y) = self.pairs[k];
                    let mut state = self.devices[k].expire(t);
                    for _ in 0..(self.prev_spikes[x] as u8 + self.prev_spikes[y] as u8) {
                        state = state.stimulate(t, spec.device.rho, &spec.device, &mut self.device_rng);
                    }
                    self.devices[k] = state;
                } else if a >= spec.gates.read_threshold {
                    let state = self.devices[k].expire(t);
                    self.devices[k] = state;
                    next_gate[k] = next_gate[k] + state.weight(&spec.device);
                }
            }
        }

        // output gates
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            if self.gate_out_in[k] >= spec.gates.output_threshold {
                next_mem[a] = next_mem[a] + spec.w_exc;
                next_mem[b] = next_mem[b] + spec.w_exc;
            }
        }

        // neurons; no noise is configured so the rng is never drawn
        let mut spikes = vec![false; n];
        for i in 0..n {
            let (s, spiked) = lif_step(self.neurons[i], self.mem_in[i], t, dt, &spec.memory, &mut self.input_rng);
            self.neurons[i] = s;
            if spiked {
                spikes[i] = true;
                self.raster.spikes.push(Spike { time_ms: t, neuron_id: i as u32 });
                let c = self.category_of[i];
                next_inh[c] = next_inh[c] + spec.w_exc;
            }
        }
        for c in 0..self.inhibitory.len() {
            let (s, spiked) =
                lif_step(self.inhibitory[c], self.inh_in[c], t, dt, &spec.inhibitory, &mut self.input_rng);
            self.inhibitory[c] = s;
            if spiked {
                for i in (0..n).filter(|&i| self.category_of[i] == c) {
                    next_mem[i] = next_mem[i] + spec.w_inh;
                }
            }
        }

        self.mem_in = next_mem;
        self.inh_in = next_inh;
        self.gate_out_in = next_gate;
        self.prev_spikes = spikes;
        self.time += 1;
    }

    /// Lets the network run without input.
    pub fn idle(&mut self, duration_ms: u64) {
        for _ in 0..duration_ms {
            self.step(&[]);
        }
    }

    /// Drives one feature per category together with a shared Bernoulli
    /// spike train at the store rate.
    pub fn store_object(&mut self, features: &[&str], duration_ms: u64) -> Result<(), AssocError> {
        let ids = self.object_ids(features)?;
        let p = (self.spec.store_rate_hz / T::lit(1000.0)).min(T::one());
        for _ in 0..duration_ms {
            if bernoulli(p, &mut self.input_rng) {
                self.step(&ids);
            } else {
                self.step(&[]);
            }
        }
        Ok(())
    }

    fn object_ids(&self, features: &[&str]) -> Result<Vec<usize>, AssocError> {
        let mut by_cat: Vec<Option<usize>> = vec![None; self.spec.categories.len()];
        for f in features {
            let (c, i) = self.spec.locate(f)?;
            if by_cat[c].is_some() {
                return Err(AssocError::DuplicateCategory(self.spec.categories[c].name.clone()));
            }
            by_cat[c] = Some(i);
        }
        by_cat
            .iter()
            .enumerate()
            .map(|(c, x)| x.ok_or_else(|| AssocError::MissingCategory(self.spec.categories[c].name.clone())))
            .collect()
    }

    /// Drives the cue at the recall rate and decodes each category from the
    /// spike counts of the window: most spikes wins, ties go to the earliest
    /// first spike, then to the lower index. The cue's category answers the
    /// cue.
    pub fn recall_query(&mut self, cue: &str, duration_ms: u64) -> Result<Vec<Decoded>, AssocError> {
        let (cue_cat, cue_id) = self.spec.locate(cue)?;
        let start = self.time;
        let p = (self.spec.recall_rate_hz / T::lit(1000.0)).min(T::one());
        for _ in 0..duration_ms {
            if bernoulli(p, &mut self.input_rng) {
                self.step(&[cue_id]);
            } else {
                self.step(&[]);
            }
        }
        let n = self.names.len();
        let mut count = vec![0u32; n];
        let mut first = vec![u64::MAX; n];
        for s in self.raster.window(start, self.time) {
            let i = s.neuron_id as usize;
            count[i] += 1;
            first[i] = first[i].min(s.time_ms);
        }
        Ok((0..self.spec.categories.len())
            .map(|c| {
                if c == cue_cat {
                    return Decoded::Feature(cue.into());
                }
                (0..n)
                    .filter(|&i| self.category_of[i] == c && count[i] > 0)
                    .min_by_key(|&i| (std::cmp::Reverse(count[i]), first[i], i))
                    .map(|i| Decoded::Feature(self.names[i].clone()))
                    .unwrap_or(Decoded::Undecided)
            })
            .collect())
    }
}

/// One trial: store a random object, wait, cue one random feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssocTrial {
    pub trial: usize,
    pub delay_ms: u64,
    pub object: Vec<String>,
    pub cue: String,
    pub decoded: Vec<Decoded>,
    pub correct: bool,
}

/// Runs one trial on a fresh network seeded with `seed`.
pub fn run_trial<T: Scalar>(
    spec: &AssocSpec<T>,
    delay_ms: u64,
    trial: usize,
    seed: u64,
) -> Result<AssocTrial, AssocError> {
    let mut pick = stream(seed, Purpose::Trial, 0);
    let object: Vec<String> =
        spec.categories.iter().map(|c| c.members[pick.random_range(0..c.members.len())].clone()).collect();
    let cue = object[pick.random_range(0..object.len())].clone();
    let mut net = build_assoc(spec, seed)?;
    let refs: Vec<&str> = object.iter().map(|s| s.as_str()).collect();
    net.store_object(&refs, spec.store_ms)?;
    net.idle(delay_ms);
    let decoded = net.recall_query(&cue, spec.recall_ms)?;
    let correct = decoded.iter().zip(&object).all(|(d, o)| matches!(d, Decoded::Feature(f) if f == o));
    Ok(AssocTrial { trial, delay_ms, object, cue, decoded, correct })
}

/// Fraction of wrong or undecided trials per delay. Trial `k` at delay
/// index `d` uses seed `derive_seed(derive_seed(seed, d), k)`.
pub fn decoding_error<T: Scalar>(
    spec: &AssocSpec<T>,
    delays_ms: &[u64],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<(u64, f64)>, AssocError> {
    if n_trials == 0 {
        return Err(AssocError::InvalidSpec("need at least one trial".into()));
    }
    delays_ms
        .iter()
        .enumerate()
        .map(|(d, &delay)| {
            let ds = derive_seed(seed, d as u64);
            let mut wrong = 0usize;
            for k in 0..n_trials {
                if !run_trial(spec, delay, k, derive_seed(ds, k as u64))?.correct {
                    wrong += 1;
                }
            }
            Ok((delay, wrong as f64 / n_trials as f64))
        })
        .collect()
}
