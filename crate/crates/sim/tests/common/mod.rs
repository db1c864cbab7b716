#![allow(dead_code)]

use carm_core::geometry::Vec3;
use carm_core::kinematics::{CArmDofs, DOF_COUNT, DOF_NAMES};
use carm_sim::session::{technician_move, CommandMessage, Verb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const NAMES: [&str; 3] = ["Position 1", "Position 2", "Position 3"];

/// `n` random commands that are valid against the state they build up
/// from a fresh session.
pub fn random_commands(seed: u64, n: usize) -> Vec<CommandMessage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dofs = CArmDofs::neutral();
    let mut saved: Vec<&str> = Vec::new();
    let mut shown = false;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (verb, args) = match rng.random_range(0..100) {
            0..=9 => {
                let name = NAMES[rng.random_range(0..NAMES.len())];
                if !saved.contains(&name) {
                    saved.push(name);
                }
                (Verb::SaveView, json!({ "name": name }))
            }
            10..=19 if !saved.is_empty() => {
                shown = true;
                (Verb::ShowView, json!({ "name": saved[rng.random_range(0..saved.len())] }))
            }
            20..=24 => {
                shown = false;
                (Verb::HideView, Value::Null)
            }
            25..=29 => (Verb::ToggleLive, Value::Null),
            30..=49 => {
                let mut a = dofs.to_array();
                let mut args = serde_json::Map::new();
                for _ in 0..rng.random_range(1..=3) {
                    let i = rng.random_range(0..DOF_COUNT);
                    let (lo, hi) = CArmDofs::limits(i);
                    let (lo, hi) = (lo.max(-300.0), hi.min(300.0));
                    a[i] = rng.random_range(lo..=hi) * 0.25 + (lo + hi) * 0.375;
                    args.insert(DOF_NAMES[i].to_string(), json!(a[i]));
                }
                dofs = CArmDofs::from_array(a);
                (Verb::SetDofs, Value::Object(args))
            }
            50..=64 => {
                let i = rng.random_range(0..DOF_COUNT);
                let (lo, hi) = CArmDofs::limits(i);
                let a = dofs.to_array();
                let delta: f64 = rng.random_range(-5.0..5.0);
                if !(a[i] + delta >= lo && a[i] + delta <= hi) {
                    continue;
                }
                let mut a = a;
                a[i] += delta;
                dofs = CArmDofs::from_array(a);
                (Verb::AdjustDof, json!({ "dof": DOF_NAMES[i], "delta": delta }))
            }
            65..=69 => {
                dofs = CArmDofs::neutral();
                (Verb::ResetNeutral, Value::Null)
            }
            70..=84 => {
                let view = NAMES[rng.random_range(0..NAMES.len())];
                let purpose = if rng.random_bool(0.5) { "repositioning" } else { "verification" };
                (Verb::AcquireXray, json!({ "view": view, "purpose": purpose }))
            }
            85..=86 if shown => (Verb::RequestAlignment, Value::Null),
            90..=99 => {
                let r = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                let t = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-20.0..20.0));
                (Verb::MoveTechnician, json!({ "pose": technician_move(r, t), "relative": true }))
            }
            _ => continue,
        };
        let id = out.len() as u64;
        out.push(CommandMessage::new(verb, args).with_request_id(id).with_client("fuzz"));
    }
    out
}
