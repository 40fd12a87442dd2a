//! Grid data model: buses, π-branches, controllable units and fixed loads,
//! all in per-unit on a single system base.
//!
//! Controllable unit set points and fixed loads both use the load
//! convention (positive = consumption). A generating DER therefore has a
//! negative active-power range.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type BusId = usize;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("malformed grid document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("grid failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("unknown built-in grid `{0}` (expected one of: two-bus, radial-4, meshed-10)")]
    UnknownBuiltin(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BusKind {
    SlackPcc,
    Load,
    Generation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
    pub base_kv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_shunt: f64,
    pub s_rating: f64,
    #[serde(default)]
    pub is_pcc_transformer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllableUnit {
    pub bus: BusId,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
}

impl ControllableUnit {
    /// Largest apparent power the unit can reach inside its box.
    pub fn capacity(&self) -> f64 {
        let p = self.p_min.abs().max(self.p_max.abs());
        let q = self.q_min.abs().max(self.q_max.abs());
        let boxed = p.hypot(q);
        self.s_max.map_or(boxed, |s| s.min(boxed))
    }
}

/// Constant-power consumption at a bus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedLoad {
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    #[serde(rename = "s_base_mva")]
    pub s_base: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub units: Vec<ControllableUnit>,
    #[serde(rename = "loads", default)]
    pub fixed_loads: Vec<FixedLoad>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoSlack,
    MultipleSlack(usize),
    DuplicateBus(BusId),
    VoltageBand(BusId),
    BadBaseKv(BusId),
    UnknownBus { what: &'static str, index: usize, bus: BusId },
    SelfLoop(usize),
    ZeroImpedance(usize),
    Rating(usize),
    PowerBox(usize),
    ApparentCap(usize),
    NonFinite(&'static str, usize),
    BadBase,
    NotConnected,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSlack => write!(f, "no slack-pcc bus"),
            Violation::MultipleSlack(n) => write!(f, "{n} slack-pcc buses (exactly one required)"),
            Violation::DuplicateBus(id) => write!(f, "duplicate bus id {id}"),
            Violation::VoltageBand(id) => write!(f, "bus {id}: voltage band requires 0 < v_min < v_max"),
            Violation::BadBaseKv(id) => write!(f, "bus {id}: base_kv must be positive"),
            Violation::UnknownBus { what, index, bus } => {
                write!(f, "{what} {index} references unknown bus {bus}")
            }
            Violation::SelfLoop(i) => write!(f, "branch {i}: from_bus equals to_bus"),
            Violation::ZeroImpedance(i) => write!(f, "branch {i}: zero impedance"),
            Violation::Rating(i) => write!(f, "branch {i}: s_rating must be positive"),
            Violation::PowerBox(i) => write!(f, "unit {i}: requires p_min <= p_max and q_min <= q_max"),
            Violation::ApparentCap(i) => write!(f, "unit {i}: s_max must be positive"),
            Violation::NonFinite(what, i) => write!(f, "{what} {i}: non-finite value"),
            Violation::BadBase => write!(f, "s_base_mva must be positive"),
            Violation::NotConnected => write!(f, "graph not connected"),
        }
    }
}

/// MVA (or MW, Mvar) to per-unit on `s_base`.
pub fn to_pu(mva: f64, s_base: f64) -> f64 {
    mva / s_base
}

pub fn to_mva(pu: f64, s_base: f64) -> f64 {
    pu * s_base
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Length of the control vector `[p_1..p_m, q_1..q_m]`.
    pub fn n_inputs(&self) -> usize {
        2 * self.units.len()
    }

    /// Length of the measurement vector `[v_1..v_n, p_pcc, q_pcc]`.
    pub fn n_outputs(&self) -> usize {
        self.buses.len() + 2
    }

    /// Map from bus id to position in `buses`.
    pub fn bus_index(&self) -> HashMap<BusId, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    /// Position of the slack-pcc bus. Only meaningful on a validated network.
    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::SlackPcc)
            .expect("validated network has a slack-pcc bus")
    }

    /// Branches whose flow defines the interface power: the flagged PCC
    /// transformers if any touch the slack bus, otherwise every branch
    /// incident to it.
    pub fn pcc_branches(&self) -> Vec<usize> {
        let slack = self.buses[self.slack_index()].id;
        let incident: Vec<usize> = self
            .branches
            .iter()
            .enumerate()
            .filter(|(_, br)| br.from_bus == slack || br.to_bus == slack)
            .map(|(i, _)| i)
            .collect();
        let flagged: Vec<usize> = incident
            .iter()
            .copied()
            .filter(|&i| self.branches[i].is_pcc_transformer)
            .collect();
        if flagged.is_empty() {
            incident
        } else {
            flagged
        }
    }

    /// Combined apparent-power rating of the interface branches.
    pub fn pcc_rating(&self) -> f64 {
        self.pcc_branches().iter().map(|&i| self.branches[i].s_rating).sum()
    }

    pub fn total_fixed_load(&self) -> f64 {
        self.fixed_loads.iter().map(|l| l.p.hypot(l.q)).sum()
    }

    pub fn total_unit_capacity(&self) -> f64 {
        self.units.iter().map(ControllableUnit::capacity).sum()
    }

    /// Magnitude scale used to flag runaway measurements.
    pub fn scale(&self) -> f64 {
        let v = self.buses.iter().map(|b| b.v_max).fold(1.0, f64::max);
        v.max(self.total_fixed_load() + self.total_unit_capacity())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }
}

/// Parses and validates a grid document.
pub fn load_network(text: &str) -> Result<Network, GridError> {
    let net: Network = serde_json::from_str(text)?;
    let violations = validate(&net);
    if violations.is_empty() {
        Ok(net)
    } else {
        Err(GridError::Invalid(violations))
    }
}

/// Checks every structural invariant; an empty list means the network is valid.
pub fn validate(net: &Network) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(net.s_base.is_finite() && net.s_base > 0.0) {
        out.push(Violation::BadBase);
    }

    let mut ids = HashSet::new();
    for bus in &net.buses {
        if !ids.insert(bus.id) {
            out.push(Violation::DuplicateBus(bus.id));
        }
        if !(bus.v_min > 0.0 && bus.v_min < bus.v_max && bus.v_max.is_finite()) {
            out.push(Violation::VoltageBand(bus.id));
        }
        if !(bus.base_kv > 0.0 && bus.base_kv.is_finite()) {
            out.push(Violation::BadBaseKv(bus.id));
        }
    }
    match net.buses.iter().filter(|b| b.kind == BusKind::SlackPcc).count() {
        0 => out.push(Violation::NoSlack),
        1 => {}
        n => out.push(Violation::MultipleSlack(n)),
    }

    for (i, br) in net.branches.iter().enumerate() {
        for bus in [br.from_bus, br.to_bus] {
            if !ids.contains(&bus) {
                out.push(Violation::UnknownBus { what: "branch", index: i, bus });
            }
        }
        if br.from_bus == br.to_bus {
            out.push(Violation::SelfLoop(i));
        }
        if ![br.r, br.x, br.b_shunt, br.s_rating].iter().all(|v| v.is_finite()) {
            out.push(Violation::NonFinite("branch", i));
        } else {
            if br.r == 0.0 && br.x == 0.0 {
                out.push(Violation::ZeroImpedance(i));
            }
            if br.s_rating <= 0.0 {
                out.push(Violation::Rating(i));
            }
        }
    }

    for (i, unit) in net.units.iter().enumerate() {
        if !ids.contains(&unit.bus) {
            out.push(Violation::UnknownBus { what: "unit", index: i, bus: unit.bus });
        }
        let vals = [unit.p_min, unit.p_max, unit.q_min, unit.q_max];
        if !vals.iter().all(|v| v.is_finite()) {
            out.push(Violation::NonFinite("unit", i));
        } else if unit.p_min > unit.p_max || unit.q_min > unit.q_max {
            out.push(Violation::PowerBox(i));
        }
        if let Some(s) = unit.s_max {
            if !(s > 0.0 && s.is_finite()) {
                out.push(Violation::ApparentCap(i));
            }
        }
    }

    for (i, load) in net.fixed_loads.iter().enumerate() {
        if !ids.contains(&load.bus) {
            out.push(Violation::UnknownBus { what: "load", index: i, bus: load.bus });
        }
        if !(load.p.is_finite() && load.q.is_finite()) {
            out.push(Violation::NonFinite("load", i));
        }
    }

    if !net.buses.is_empty() && !is_connected(net) {
        out.push(Violation::NotConnected);
    }
    out
}

fn is_connected(net: &Network) -> bool {
    let index = net.bus_index();
    let n = net.buses.len();
    let mut adj = vec![Vec::new(); n];
    for br in &net.branches {
        if let (Some(&a), Some(&b)) = (index.get(&br.from_bus), index.get(&br.to_bus)) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Number of independent cycles (branches − buses + components).
pub fn cycle_rank(net: &Network) -> usize {
    (net.branches.len() + 1).saturating_sub(net.buses.len())
}

/// Returns one of the hard-coded desk-scale grids.
pub fn builtin_grid(name: &str) -> Result<Network, GridError> {
    let net = match name {
        "two-bus" => two_bus(),
        "radial-4" => radial_4(),
        "meshed-10" => meshed_10(),
        other => return Err(GridError::UnknownBuiltin(other.to_string())),
    };
    debug_assert!(validate(&net).is_empty());
    Ok(net)
}

pub const BUILTIN_GRIDS: [&str; 3] = ["two-bus", "radial-4", "meshed-10"];

fn bus(id: BusId, kind: BusKind, v_min: f64, v_max: f64, base_kv: f64) -> Bus {
    Bus { id, kind, v_min, v_max, base_kv }
}

fn line(from_bus: BusId, to_bus: BusId, r: f64, x: f64, b_shunt: f64, s_rating: f64) -> Branch {
    Branch { from_bus, to_bus, r, x, b_shunt, s_rating, is_pcc_transformer: false }
}

fn unit(bus: BusId, p: (f64, f64), q: (f64, f64), s_max: Option<f64>) -> ControllableUnit {
    ControllableUnit { bus, p_min: p.0, p_max: p.1, q_min: q.0, q_max: q.1, s_max }
}

/// Single controllable unit behind a short, stiff link. Voltage band and
/// link rating are wide enough never to bind inside the unit's box.
fn two_bus() -> Network {
    Network {
        s_base: 100.0,
        buses: vec![
            bus(1, BusKind::SlackPcc, 0.8, 1.2, 110.0),
            bus(2, BusKind::Load, 0.8, 1.2, 110.0),
        ],
        branches: vec![Branch {
            is_pcc_transformer: true,
            ..line(1, 2, 0.005, 0.02, 0.0, 5.0)
        }],
        units: vec![unit(2, (0.0, 1.0), (-0.5, 0.5), None)],
        fixed_loads: vec![],
    }
}

fn radial_4() -> Network {
    Network {
        s_base: 100.0,
        buses: vec![
            bus(1, BusKind::SlackPcc, 0.9, 1.1, 110.0),
            bus(2, BusKind::Load, 0.9, 1.1, 110.0),
            bus(3, BusKind::Generation, 0.9, 1.1, 110.0),
            bus(4, BusKind::Load, 0.9, 1.1, 110.0),
        ],
        branches: vec![
            Branch {
                is_pcc_transformer: true,
                ..line(1, 2, 0.002, 0.04, 0.0, 0.6)
            },
            line(2, 3, 0.02, 0.06, 0.01, 1.2),
            line(3, 4, 0.025, 0.07, 0.01, 1.0),
        ],
        units: vec![
            unit(3, (-1.3, 0.0), (-0.8, 0.8), Some(1.35)),
            unit(4, (0.0, 0.4), (-0.2, 0.2), None),
        ],
        fixed_loads: vec![
            FixedLoad { bus: 2, p: 0.3, q: 0.1 },
            FixedLoad { bus: 4, p: 0.2, q: 0.05 },
        ],
    }
}

/// Ten-bus meshed high-voltage stand-in: two parallel coupling
/// transformers, a ring of lines, four DERs and one flexible load.
fn meshed_10() -> Network {
    let hv = |id, kind| bus(id, kind, 0.9, 1.1, 110.0);
    let mut t1 = line(1, 2, 0.002, 0.06, 0.0, 0.5);
    t1.is_pcc_transformer = true;
    let mut t2 = line(1, 2, 0.002, 0.06, 0.0, 0.5);
    t2.is_pcc_transformer = true;
    Network {
        s_base: 100.0,
        buses: vec![
            bus(1, BusKind::SlackPcc, 0.9, 1.1, 380.0),
            hv(2, BusKind::Load),
            hv(3, BusKind::Load),
            hv(4, BusKind::Generation),
            hv(5, BusKind::Load),
            hv(6, BusKind::Generation),
            hv(7, BusKind::Load),
            hv(8, BusKind::Generation),
            hv(9, BusKind::Load),
            hv(10, BusKind::Generation),
        ],
        branches: vec![
            t1,
            t2,
            line(2, 3, 0.010, 0.030, 0.004, 1.5),
            line(3, 4, 0.012, 0.036, 0.004, 1.5),
            line(4, 5, 0.010, 0.030, 0.004, 1.5),
            line(5, 6, 0.014, 0.042, 0.004, 1.5),
            line(6, 7, 0.012, 0.036, 0.004, 1.5),
            line(7, 2, 0.010, 0.030, 0.004, 1.5),
            line(3, 8, 0.016, 0.048, 0.004, 1.2),
            line(8, 9, 0.014, 0.042, 0.004, 1.2),
            line(9, 10, 0.018, 0.054, 0.004, 1.2),
            line(10, 6, 0.016, 0.048, 0.004, 1.2),
        ],
        units: vec![
            unit(4, (-0.6, 0.0), (-0.45, 0.45), Some(0.7)),
            unit(6, (-0.5, 0.0), (-0.35, 0.35), Some(0.55)),
            unit(8, (-0.5, 0.0), (-0.35, 0.35), None),
            unit(10, (-0.6, 0.0), (-0.45, 0.45), None),
            unit(7, (0.0, 0.6), (-0.1, 0.1), None),
        ],
        fixed_loads: vec![
            FixedLoad { bus: 2, p: 0.15, q: 0.05 },
            FixedLoad { bus: 3, p: 0.12, q: 0.04 },
            FixedLoad { bus: 5, p: 0.18, q: 0.06 },
            FixedLoad { bus: 7, p: 0.10, q: 0.03 },
            FixedLoad { bus: 9, p: 0.14, q: 0.05 },
        ],
    }
}
