//! Gillespie direct-method simulation of the Lotka-Volterra jump process.

use rand::Rng as _;

use crate::rng::Rng;

/// One predator-prey trajectory recorded on a uniform time grid.
///
/// Events and rates (per unit time), with prey count `x` and predator
/// count `y`:
///   prey birth      rate r[0]·x      x += 1
///   predation       rate r[1]·x·y    x -= 1
///   predator birth  rate r[2]·x·y    y += 1
///   predator death  rate r[3]·y      y -= 1
///
/// Populations stay non-negative integers. If the event budget is
/// exhausted (exploding populations), the state is frozen for the
/// remaining grid points so the output stays finite and deterministic.
pub struct LotkaVolterraRun {
    pub prey: Vec<f64>,
    pub predators: Vec<f64>,
}

pub const LV_INIT_PREY: u64 = 50;
pub const LV_INIT_PREDATORS: u64 = 100;
const MAX_EVENTS: usize = 100_000;

pub fn simulate_lotka_volterra(
    rates: &[f64; 4],
    t_end: f64,
    grid_points: usize,
    rng: &mut Rng,
) -> LotkaVolterraRun {
    let mut x = LV_INIT_PREY as f64;
    let mut y = LV_INIT_PREDATORS as f64;
    let mut t = 0.0;
    let dt = t_end / (grid_points - 1) as f64;
    let mut prey = Vec::with_capacity(grid_points);
    let mut predators = Vec::with_capacity(grid_points);
    let mut next_record = 0usize;
    let mut events = 0usize;

    while next_record < grid_points {
        let props = [
            rates[0] * x,
            rates[1] * x * y,
            rates[2] * x * y,
            rates[3] * y,
        ];
        let total: f64 = props.iter().sum();
        let t_next = if total > 0.0 && events < MAX_EVENTS {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            t - u.ln() / total
        } else {
            f64::INFINITY
        };

        while next_record < grid_points && (next_record as f64) * dt <= t_next {
            prey.push(x);
            predators.push(y);
            next_record += 1;
        }
        if next_record >= grid_points {
            break;
        }

        t = t_next;
        events += 1;
        let mut pick = rng.gen_range(0.0..total);
        let mut which = 0;
        for (i, &p) in props.iter().enumerate() {
            if pick < p {
                which = i;
                break;
            }
            pick -= p;
            which = i;
        }
        match which {
            0 => x += 1.0,
            1 => x -= 1.0,
            2 => y += 1.0,
            _ => y -= 1.0,
        }
        debug_assert!(x >= 0.0 && y >= 0.0);
    }

    LotkaVolterraRun { prey, predators }
}
