//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

pub mod qp;

use ofo_flex::grid::{Branch, Bus, BusKind, ControllableUnit, FixedLoad, Network};

/// Slack bus 1 feeding bus 2 over one line. Bus 2 carries an optional
/// fixed load and one controllable unit with the given box.
pub fn two_bus(r: f64, x: f64, load: Option<(f64, f64)>, unit: Option<((f64, f64), (f64, f64))>) -> Network {
    let bus = |id, kind| Bus { id, kind, v_min: 0.5, v_max: 1.5, base_kv: 20.0 };
    Network {
        s_base: 100.0,
        buses: vec![bus(1, BusKind::SlackPcc), bus(2, BusKind::Load)],
        branches: vec![Branch {
            from_bus: 1,
            to_bus: 2,
            r,
            x,
            b_shunt: 0.0,
            s_rating: 10.0,
            is_pcc_transformer: true,
        }],
        units: unit
            .map(|((p_min, p_max), (q_min, q_max))| ControllableUnit { bus: 2, p_min, p_max, q_min, q_max, s_max: None })
            .into_iter()
            .collect(),
        fixed_loads: load.map(|(p, q)| FixedLoad { bus: 2, p, q }).into_iter().collect(),
    }
}

/// Closed-form two-bus solution for a consumption `p + jq` at the far end
/// of `z = r + jx` fed from `1∠0`: returns `(v2, p_pcc, q_pcc)` with the
/// interface flow counted positive towards the slack bus. `None` past the
/// maximum-transfer point.
pub fn two_bus_closed_form(r: f64, x: f64, p: f64, q: f64) -> Option<(f64, f64, f64)> {
    let s2 = p * p + q * q;
    let z2 = r * r + x * x;
    let a = 1.0 - 2.0 * (r * p + x * q);
    let disc = a * a - 4.0 * z2 * s2;
    if disc < 0.0 {
        return None;
    }
    let w = 0.5 * (a + disc.sqrt());
    Some((w.sqrt(), -(p + s2 * r / w), -(q + s2 * x / w)))
}

/// Partial derivatives of `(v2, p_pcc, q_pcc)` with respect to `(p, q)`,
/// by the chain rule on the closed form.
pub fn two_bus_derivatives(r: f64, x: f64, p: f64, q: f64) -> [[f64; 2]; 3] {
    let s2 = p * p + q * q;
    let z2 = r * r + x * x;
    let a = 1.0 - 2.0 * (r * p + x * q);
    let sq = (a * a - 4.0 * z2 * s2).sqrt();
    let w = 0.5 * (a + sq);
    let da = [-2.0 * r, -2.0 * x];
    let ds2 = [2.0 * p, 2.0 * q];
    let dw: Vec<f64> = (0..2).map(|j| 0.5 * (da[j] + (a * da[j] - 2.0 * z2 * ds2[j]) / sq)).collect();
    let v = w.sqrt();
    let mut out = [[0.0; 2]; 3];
    for j in 0..2 {
        let unit = if j == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
        out[0][j] = dw[j] / (2.0 * v);
        out[1][j] = -(unit[0] + r * (ds2[j] / w - s2 * dw[j] / (w * w)));
        out[2][j] = -(unit[1] + x * (ds2[j] / w - s2 * dw[j] / (w * w)));
    }
    out
}
