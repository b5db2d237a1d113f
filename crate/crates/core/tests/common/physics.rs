//! Field-level measurements shared by the simulator tests and the acceptance
//! suite. Everything runs on raw solver grids, never on rendered images.

use luvt_core::wavesim::{advance, arrival_step, init_field, DefectSpec, PlateSpec};

pub fn clean_spec() -> PlateSpec {
    PlateSpec {
        noise_sigma: 0.0,
        ..PlateSpec::default()
    }
}

/// Largest left-right mismatch over `steps` steps, relative to the largest
/// amplitude seen.
pub fn mirror_asymmetry(spec: &PlateSpec, steps: usize) -> f64 {
    let mut f = init_field(spec).unwrap();
    let (nx, ny) = (f.nx, f.ny);
    let (mut worst, mut peak) = (0.0f64, 0.0f64);
    for _ in 0..steps {
        advance(&mut f, spec).unwrap();
        for j in 0..ny {
            for i in 0..nx / 2 {
                let (a, b) = (f.at(i, j), f.at(nx - 1 - i, j));
                worst = worst.max((a - b).abs());
                peak = peak.max(a.abs()).max(b.abs());
            }
        }
    }
    worst / peak
}

#[derive(Debug, Clone, Copy)]
pub struct ArrivalCheck {
    pub measured_us: f64,
    pub expected_us: f64,
    pub period_us: f64,
}

/// Burst fired from the plate centre; arrival at the cell nearest a point
/// `distance_mm` to the right is the first time `|u|` exceeds `1e-3` of that
/// cell's peak. Expected time is straight-line distance over wave speed.
pub fn arrival_check(distance_mm: f64) -> ArrivalCheck {
    let mut spec = clean_spec();
    let centre = (0.5 * spec.scan_width_mm, 0.5 * spec.scan_height_mm);
    spec.probe_pos = centre;
    let (dx, dy) = (spec.dx(), spec.dy());
    let i = ((centre.0 + distance_mm) / dx - 0.5).round() as usize;
    let j = (centre.1 / dy - 0.5).round() as usize;
    let cell = ((i as f64 + 0.5) * dx, (j as f64 + 0.5) * dy);
    let d = (cell.0 - centre.0).hypot(cell.1 - centre.1);
    let c = spec.wave_speed_mm_per_us;
    let period = 1.0 / spec.source_freq_mhz;
    let horizon = d / c + spec.burst_duration_us() + period;

    let mut f = init_field(&spec).unwrap();
    let mut trace = Vec::new();
    while (f.t_index as f64) * f.dt_us < horizon {
        advance(&mut f, &spec).unwrap();
        trace.push((f.t_index as f64 * f.dt_us, f.at(i, j).abs()));
    }
    let peak = trace.iter().map(|t| t.1).fold(0.0, f64::max);
    let measured = trace.iter().find(|t| t.1 > 1e-3 * peak).map(|t| t.0).unwrap();
    ArrivalCheck {
        measured_us: measured,
        expected_us: d / c,
        period_us: period,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScatterCheck {
    pub arrival_step: usize,
    /// Largest disc difference strictly before the arrival step.
    pub before: f64,
    /// Largest disc difference from the arrival step on.
    pub after: f64,
    /// Largest disc difference more than one wave period before arrival.
    pub before_guarded: f64,
}

/// Defect run against its defect-free twin, compared on a 5 mm disc around
/// the slit centre. Differences are relative to the twin's peak disc norm.
pub fn scatter_check(spec: &PlateSpec, defect: DefectSpec) -> ScatterCheck {
    let spec = PlateSpec {
        defects: vec![defect.clone()],
        ..spec.clone()
    };
    let free_spec = spec.without_defects();
    let (dx, dy) = (spec.dx(), spec.dy());
    let disc: Vec<usize> = (0..spec.grid_ny)
        .flat_map(|j| (0..spec.grid_nx).map(move |i| (i, j)))
        .filter(|&(i, j)| {
            let p = ((i as f64 + 0.5) * dx, (j as f64 + 0.5) * dy);
            (p.0 - defect.center.0).hypot(p.1 - defect.center.1) <= 5.0
        })
        .map(|(i, j)| j * spec.grid_nx + i)
        .collect();
    let arrival = arrival_step(&spec, &defect);
    let guard = (1.0 / spec.source_freq_mhz / spec.time_step_us()).ceil() as usize;
    let steps = arrival + 4 * guard;

    let mut a = init_field(&spec).unwrap();
    let mut b = init_field(&free_spec).unwrap();
    let mut rows = Vec::with_capacity(steps);
    for _ in 0..steps {
        advance(&mut a, &spec).unwrap();
        advance(&mut b, &free_spec).unwrap();
        let diff = disc.iter().map(|&k| (a.u_curr[k] - b.u_curr[k]).powi(2)).sum::<f64>().sqrt();
        let free = disc.iter().map(|&k| b.u_curr[k].powi(2)).sum::<f64>().sqrt();
        rows.push((a.t_index, diff, free));
    }
    let scale = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let max_over = |keep: &dyn Fn(usize) -> bool| {
        rows.iter().filter(|r| keep(r.0)).map(|r| r.1 / scale).fold(0.0, f64::max)
    };
    ScatterCheck {
        arrival_step: arrival,
        before: max_over(&|t| t < arrival),
        after: max_over(&|t| t >= arrival),
        before_guarded: max_over(&|t| t + guard < arrival),
    }
}
