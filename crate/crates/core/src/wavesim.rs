//! Finite-difference synthesis of wave-propagation image series.
//!
//! A scalar wave `u_tt = c² ∇²u` is integrated with the leapfrog scheme on a
//! cell-centred grid covering the scan window. Slit cells are clamped to zero
//! (sound-soft scatterers) and the four window edges use Mur's first-order
//! absorbing condition. The probe injects a Hann-windowed tone burst.
//!
//! Physical units throughout: millimetres, microseconds, megahertz.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{write_kv, KvConfig};
use crate::error::{Error, Result};

/// Ratio of the chosen time step to the largest stable one.
pub const CFL_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct DefectSpec {
    /// Slit centre (x, y) in mm; y grows downward from the probe edge.
    pub center: (f64, f64),
    pub length_mm: f64,
    pub width_mm: f64,
    /// Angle of the slit axis from the +x axis, degrees.
    pub orientation_deg: f64,
}

impl DefectSpec {
    /// A horizontal 20 mm x 1 mm slit.
    pub fn slit_at(x: f64, y: f64) -> Self {
        DefectSpec {
            center: (x, y),
            length_mm: 20.0,
            width_mm: 1.0,
            orientation_deg: 0.0,
        }
    }

    fn axes(&self) -> ((f64, f64), (f64, f64)) {
        let a = self.orientation_deg.to_radians();
        let (s, c) = a.sin_cos();
        ((c, s), (-s, c))
    }

    /// Point (x, y) in slit-local coordinates (along axis, across axis).
    fn local(&self, p: (f64, f64)) -> (f64, f64) {
        let (along, across) = self.axes();
        let d = (p.0 - self.center.0, p.1 - self.center.1);
        (d.0 * along.0 + d.1 * along.1, d.0 * across.0 + d.1 * across.1)
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (u, v) = self.local(p);
        u.abs() <= 0.5 * self.length_mm && v.abs() <= 0.5 * self.width_mm
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (a, n) = self.axes();
        let (hl, hw) = (0.5 * self.length_mm, 0.5 * self.width_mm);
        let (cx, cy) = self.center;
        [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .map(|(su, sv)| (cx + su * hl * a.0 + sv * hw * n.0, cy + su * hl * a.1 + sv * hw * n.1))
    }

    /// Euclidean distance from `p` to the filled slit rectangle (0 inside).
    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        let (u, v) = self.local(p);
        let du = (u.abs() - 0.5 * self.length_mm).max(0.0);
        let dv = (v.abs() - 0.5 * self.width_mm).max(0.0);
        du.hypot(dv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateSpec {
    pub scan_width_mm: f64,
    pub scan_height_mm: f64,
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Rendered frame size; the grid is area-averaged down to this.
    pub image_width: usize,
    pub image_height: usize,
    pub wave_speed_mm_per_us: f64,
    /// Probe position in mm, near the top edge.
    pub probe_pos: (f64, f64),
    pub source_freq_mhz: f64,
    pub source_cycles: f64,
    pub defects: Vec<DefectSpec>,
    /// Additive Gaussian noise, as a fraction of the full gray range.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PlateSpec {
    fn default() -> Self {
        PlateSpec {
            scan_width_mm: 80.0,
            scan_height_mm: 80.0,
            grid_nx: 160,
            grid_ny: 160,
            image_width: 64,
            image_height: 64,
            wave_speed_mm_per_us: 3.0,
            probe_pos: (40.0, 1.0),
            source_freq_mhz: 0.5,
            source_cycles: 3.0,
            defects: Vec::new(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PlateSpec {
    pub fn dx(&self) -> f64 {
        self.scan_width_mm / self.grid_nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.scan_height_mm / self.grid_ny as f64
    }

    /// Largest stable leapfrog step scaled by [`CFL_SAFETY`].
    pub fn time_step_us(&self) -> f64 {
        let (dx, dy) = (self.dx(), self.dy());
        CFL_SAFETY / (self.wave_speed_mm_per_us * (1.0 / (dx * dx) + 1.0 / (dy * dy)).sqrt())
    }

    /// Duration of the source burst in microseconds.
    pub fn burst_duration_us(&self) -> f64 {
        self.source_cycles / self.source_freq_mhz
    }

    pub fn without_defects(&self) -> PlateSpec {
        PlateSpec {
            defects: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.grid_nx < 16 || self.grid_ny < 16 {
            return fail(format!("grid must be at least 16x16, got {}x{}", self.grid_nx, self.grid_ny));
        }
        if !(self.scan_width_mm > 0.0 && self.scan_height_mm > 0.0) {
            return fail("scan dimensions must be positive".into());
        }
        if !(self.wave_speed_mm_per_us > 0.0) {
            return fail("wave speed must be positive".into());
        }
        if !(self.source_freq_mhz > 0.0) {
            return fail("source frequency must be positive".into());
        }
        if !(self.source_cycles > 0.0) {
            return fail("source cycle count must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        if self.image_width == 0
            || self.image_height == 0
            || self.image_width > self.grid_nx
            || self.image_height > self.grid_ny
        {
            return fail(format!(
                "image size {}x{} must be non-zero and no larger than the grid",
                self.image_width, self.image_height
            ));
        }
        let (px, py) = self.probe_pos;
        if !(0.0..=self.scan_width_mm).contains(&px) || !(0.0..=self.scan_height_mm).contains(&py) {
            return fail(format!("probe ({px}, {py}) lies outside the scan region"));
        }
        for (i, d) in self.defects.iter().enumerate() {
            if !(d.length_mm > 0.0 && d.width_mm > 0.0) {
                return fail(format!("defect {i}: length and width must be positive"));
            }
            let inside = d.corners().iter().all(|&(x, y)| {
                x > 0.0 && x < self.scan_width_mm && y > 0.0 && y < self.scan_height_mm
            });
            if !inside {
                return fail(format!("defect {i} does not lie strictly inside the scan region"));
            }
            if rasterize_slit(self, d).is_empty() {
                return fail(format!("defect {i} covers no grid cell; refine the grid or widen the slit"));
            }
        }
        Ok(())
    }

    /// Consume `prefix`-qualified keys from `cfg`, falling back to defaults.
    pub fn take_from(cfg: &mut KvConfig, prefix: &str) -> Result<Self> {
        let d = PlateSpec::default();
        let k = |name: &str| format!("{prefix}{name}");
        let mut spec = PlateSpec {
            scan_width_mm: cfg.take_or(&k("scan_width_mm"), d.scan_width_mm)?,
            scan_height_mm: cfg.take_or(&k("scan_height_mm"), d.scan_height_mm)?,
            grid_nx: cfg.take_or(&k("grid_nx"), d.grid_nx)?,
            grid_ny: cfg.take_or(&k("grid_ny"), d.grid_ny)?,
            image_width: cfg.take_or(&k("image_width"), d.image_width)?,
            image_height: cfg.take_or(&k("image_height"), d.image_height)?,
            wave_speed_mm_per_us: cfg.take_or(&k("wave_speed_mm_per_us"), d.wave_speed_mm_per_us)?,
            probe_pos: (
                cfg.take_or(&k("probe_x_mm"), d.probe_pos.0)?,
                cfg.take_or(&k("probe_y_mm"), d.probe_pos.1)?,
            ),
            source_freq_mhz: cfg.take_or(&k("source_freq_mhz"), d.source_freq_mhz)?,
            source_cycles: cfg.take_or(&k("source_cycles"), d.source_cycles)?,
            defects: Vec::new(),
            noise_sigma: cfg.take_or(&k("noise_sigma"), d.noise_sigma)?,
            seed: cfg.take_or(&k("seed"), d.seed)?,
        };
        if let Some(text) = cfg.take::<String>(&k("defects"))? {
            spec.defects = parse_defects(&text).map_err(|msg| Error::Config {
                key: k("defects"),
                line: 0,
                msg,
            })?;
        }
        Ok(spec)
    }

    /// Parse a complete spec file; unknown keys are an error.
    pub fn from_config_file(path: &Path) -> Result<Self> {
        let mut cfg = KvConfig::from_file(path)?;
        let spec = Self::take_from(&mut cfg, "")?;
        cfg.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config_string(&self) -> String {
        let defects = self
            .defects
            .iter()
            .map(|d| {
                format!(
                    "{},{},{},{},{}",
                    d.center.0, d.center.1, d.length_mm, d.width_mm, d.orientation_deg
                )
            })
            .collect::<Vec<_>>()
            .join(";");
        write_kv([
            ("scan_width_mm", self.scan_width_mm.to_string()),
            ("scan_height_mm", self.scan_height_mm.to_string()),
            ("grid_nx", self.grid_nx.to_string()),
            ("grid_ny", self.grid_ny.to_string()),
            ("image_width", self.image_width.to_string()),
            ("image_height", self.image_height.to_string()),
            ("wave_speed_mm_per_us", self.wave_speed_mm_per_us.to_string()),
            ("probe_x_mm", self.probe_pos.0.to_string()),
            ("probe_y_mm", self.probe_pos.1.to_string()),
            ("source_freq_mhz", self.source_freq_mhz.to_string()),
            ("source_cycles", self.source_cycles.to_string()),
            ("defects", defects),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    /// Physical mm to rendered-pixel coordinates (pixel centres at integers).
    pub fn mm_to_px(&self, p: (f64, f64)) -> (f64, f64) {
        (
            p.0 / self.scan_width_mm * self.image_width as f64 - 0.5,
            p.1 / self.scan_height_mm * self.image_height as f64 - 0.5,
        )
    }
}

/// `x,y,length,width,angle` groups separated by `;`.
fn parse_defects(text: &str) -> std::result::Result<Vec<DefectSpec>, String> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|group| {
            let v = group
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| format!("`{group}`: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if v.len() != 5 {
                return Err(format!("`{group}`: expected x,y,length,width,angle"));
            }
            Ok(DefectSpec {
                center: (v[0], v[1]),
                length_mm: v[2],
                width_mm: v[3],
                orientation_deg: v[4],
            })
        })
        .collect()
}

/// Grid cells whose centre lies inside the slit, as flat indices.
pub fn rasterize_slit(spec: &PlateSpec, defect: &DefectSpec) -> Vec<usize> {
    let (dx, dy) = (spec.dx(), spec.dy());
    let mut cells = Vec::new();
    for j in 0..spec.grid_ny {
        for i in 0..spec.grid_nx {
            let p = ((i as f64 + 0.5) * dx, (j as f64 + 0.5) * dy);
            if defect.contains(p) {
                cells.push(j * spec.grid_nx + i);
            }
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Interior,
    Slit,
    Boundary,
}

#[derive(Debug, Clone)]
pub struct WaveField {
    pub nx: usize,
    pub ny: usize,
    pub u_prev: Vec<f64>,
    pub u_curr: Vec<f64>,
    pub t_index: usize,
    pub dt_us: f64,
    pub dx_mm: f64,
    pub dy_mm: f64,
    pub wave_speed: f64,
    pub mask: Vec<CellKind>,
    scratch: Vec<f64>,
}

/// Build a resting field for `spec`: zero amplitude, slit cells marked.
pub fn init_field(spec: &PlateSpec) -> Result<WaveField> {
    spec.validate()?;
    let (nx, ny) = (spec.grid_nx, spec.grid_ny);
    let mut mask = vec![CellKind::Interior; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                mask[j * nx + i] = CellKind::Boundary;
            }
        }
    }
    for d in &spec.defects {
        for idx in rasterize_slit(spec, d) {
            mask[idx] = CellKind::Slit;
        }
    }
    Ok(WaveField {
        nx,
        ny,
        u_prev: vec![0.0; nx * ny],
        u_curr: vec![0.0; nx * ny],
        t_index: 0,
        dt_us: spec.time_step_us(),
        dx_mm: spec.dx(),
        dy_mm: spec.dy(),
        wave_speed: spec.wave_speed_mm_per_us,
        mask,
        scratch: vec![0.0; nx * ny],
    })
}

impl WaveField {
    /// `c·dt·sqrt(1/dx² + 1/dy²)`; at most `1` for a stable scheme.
    pub fn courant_number(&self) -> f64 {
        self.wave_speed
            * self.dt_us
            * (1.0 / (self.dx_mm * self.dx_mm) + 1.0 / (self.dy_mm * self.dy_mm)).sqrt()
    }

    pub fn slit_cell_count(&self) -> usize {
        self.mask.iter().filter(|&&k| k == CellKind::Slit).count()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.u_curr[j * self.nx + i]
    }

    /// One leapfrog update with absorbing edges.
    pub fn step(&mut self) -> Result<()> {
        let (nx, ny) = (self.nx, self.ny);
        let cdt = self.wave_speed * self.dt_us;
        let cx2 = (cdt / self.dx_mm).powi(2);
        let cy2 = (cdt / self.dy_mm).powi(2);
        let u = &self.u_curr;
        let up = &self.u_prev;
        let next = &mut self.scratch;

        for j in 1..ny - 1 {
            let row = j * nx;
            for i in 1..nx - 1 {
                let idx = row + i;
                next[idx] = match self.mask[idx] {
                    CellKind::Interior => {
                        let c = u[idx];
                        let lap_x = u[idx - 1] + u[idx + 1] - 2.0 * c;
                        let lap_y = u[idx - nx] + u[idx + nx] - 2.0 * c;
                        2.0 * c - up[idx] + cx2 * lap_x + cy2 * lap_y
                    }
                    _ => 0.0,
                };
            }
        }

        // Mur first-order absorbing edges; corners take the x-direction rule.
        let kx = (cdt - self.dx_mm) / (cdt + self.dx_mm);
        let ky = (cdt - self.dy_mm) / (cdt + self.dy_mm);
        for i in 1..nx - 1 {
            let top = i;
            next[top] = u[top + nx] + ky * (next[top + nx] - u[top]);
            let bot = (ny - 1) * nx + i;
            next[bot] = u[bot - nx] + ky * (next[bot - nx] - u[bot]);
        }
        for j in 0..ny {
            let left = j * nx;
            next[left] = u[left + 1] + kx * (next[left + 1] - u[left]);
            let right = j * nx + nx - 1;
            next[right] = u[right - 1] + kx * (next[right - 1] - u[right]);
        }
        for (v, kind) in next.iter_mut().zip(&self.mask) {
            if *kind == CellKind::Slit {
                *v = 0.0;
            }
        }

        std::mem::swap(&mut self.u_prev, &mut self.u_curr);
        std::mem::swap(&mut self.u_curr, &mut self.scratch);
        self.t_index += 1;
        if self.u_curr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Stability { step: self.t_index });
        }
        Ok(())
    }
}

/// Hann-windowed sinusoid of `cycles` periods at `freq` (MHz); zero outside.
pub fn tone_burst(t_us: f64, freq_mhz: f64, cycles: f64) -> f64 {
    let duration = cycles / freq_mhz;
    if !(0.0..=duration).contains(&t_us) {
        return 0.0;
    }
    let envelope = 0.5 * (1.0 - (2.0 * PI * t_us / duration).cos());
    envelope * (2.0 * PI * freq_mhz * t_us).sin()
}

/// Bilinear spread of a physical point over the (up to four) surrounding
/// interior cells. Weights sum to one.
fn probe_weights(field: &WaveField, p: (f64, f64)) -> Vec<(usize, f64)> {
    let fx = (p.0 / field.dx_mm - 0.5).clamp(1.0, (field.nx - 2) as f64);
    let fy = (p.1 / field.dy_mm - 0.5).clamp(1.0, (field.ny - 2) as f64);
    let (i0, j0) = (fx.floor() as usize, fy.floor() as usize);
    let (tx, ty) = (fx - i0 as f64, fy - j0 as f64);
    let mut out = Vec::with_capacity(4);
    for (dj, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (di, wx) in [(0, 1.0 - tx), (1, tx)] {
            let w = wx * wy;
            if w > 0.0 {
                let (i, j) = ((i0 + di).min(field.nx - 2), (j0 + dj).min(field.ny - 2));
                out.push((j * field.nx + i, w));
            }
        }
    }
    out
}

/// Add the probe burst sample for the field's current time into `u_curr`.
/// Returns the injected amplitude (zero outside the burst window).
pub fn inject_source(field: &mut WaveField, spec: &PlateSpec) -> f64 {
    let t = field.t_index as f64 * field.dt_us;
    let s = tone_burst(t, spec.source_freq_mhz, spec.source_cycles);
    if s != 0.0 {
        for (idx, w) in probe_weights(field, spec.probe_pos) {
            if field.mask[idx] != CellKind::Slit {
                field.u_curr[idx] += w * s;
            }
        }
    }
    s
}

/// Step the solver once and add the source for the new time.
pub fn advance(field: &mut WaveField, spec: &PlateSpec) -> Result<()> {
    field.step()?;
    inject_source(field, spec);
    Ok(())
}

/// 8-bit single-channel image, row-major, origin top-left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Pixel values scaled to [0, 1].
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

/// Separable area-averaging from the simulation grid to the image grid.
#[derive(Debug, Clone)]
pub struct AreaResampler {
    src_w: usize,
    x_taps: Vec<Vec<(usize, f64)>>,
    y_taps: Vec<Vec<(usize, f64)>>,
}

fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|p| {
            let (lo, hi) = (p as f64 * ratio, (p + 1) as f64 * ratio);
            let mut taps = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < src {
                let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((k, overlap / ratio));
                }
                k += 1;
            }
            taps
        })
        .collect()
}

impl AreaResampler {
    pub fn new(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Self {
        AreaResampler {
            src_w,
            x_taps: area_taps(src_w, dst_w),
            y_taps: area_taps(src_h, dst_h),
        }
    }

    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        let dst_w = self.x_taps.len();
        let rows: Vec<Vec<f64>> = (0..src.len() / self.src_w)
            .map(|j| {
                let row = &src[j * self.src_w..(j + 1) * self.src_w];
                self.x_taps
                    .iter()
                    .map(|taps| taps.iter().map(|&(k, w)| w * row[k]).sum())
                    .collect()
            })
            .collect();
        let mut out = vec![0.0; dst_w * self.y_taps.len()];
        for (y, taps) in self.y_taps.iter().enumerate() {
            for x in 0..dst_w {
                out[y * dst_w + x] = taps.iter().map(|&(k, w)| w * rows[k][x]).sum();
            }
        }
        out
    }
}

/// Map resampled amplitudes to gray levels: `[-A, A] -> [0, 255]`, zero at
/// 127.5 (rounded half-up to 128), then Gaussian noise and clamping.
pub fn render_amplitudes(
    amplitudes: &[f64],
    width: usize,
    height: usize,
    norm_amplitude: f64,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> GrayImage {
    let scale = 127.5 / norm_amplitude;
    let data = amplitudes
        .iter()
        .map(|&a| {
            let mut v = 127.5 + a * scale;
            if noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v += noise_sigma * 255.0 * z;
            }
            (v + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage { width, height, data }
}

/// Render the current field of `field` to an image of the spec's size.
pub fn render_frame(
    field: &WaveField,
    spec: &PlateSpec,
    norm_amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> GrayImage {
    let resampler = AreaResampler::new(field.nx, field.ny, spec.image_width, spec.image_height);
    render_amplitudes(
        &resampler.apply(&field.u_curr),
        spec.image_width,
        spec.image_height,
        norm_amplitude,
        spec.noise_sigma,
        rng,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMeta {
    /// Solver step at which the frame was rendered.
    pub step: usize,
    pub defect_present: bool,
    /// Relative scattered energy `‖u - u_free‖² / max_k ‖u_free,k‖²` against
    /// the defect-free twin run, maximum taken over the series' snapshots.
    pub scattered_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefectTruth {
    pub center_px: (f64, f64),
    /// First step at which the incident front reaches the slit:
    /// `ceil(dist(probe, slit) / c / dt)`.
    pub arrival_step: usize,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub frames: Vec<GrayImage>,
    pub meta: Vec<FrameMeta>,
    pub defects: Vec<DefectTruth>,
    /// Gray-mapping constant A (max |amplitude| of the defect-free run).
    pub norm_amplitude: f64,
    pub dt_us: f64,
    pub stride: usize,
}

/// Analytic first-arrival step of the incident wave at a slit.
pub fn arrival_step(spec: &PlateSpec, defect: &DefectSpec) -> usize {
    let dist = defect.distance_to(spec.probe_pos);
    (dist / spec.wave_speed_mm_per_us / spec.time_step_us()).ceil() as usize
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Simulate `n_snapshots` frames, one every `stride` solver steps (the first
/// frame is taken after `stride` steps). A defect-free twin runs in lockstep
/// to provide the gray normalisation and per-frame scattered-field norms.
pub fn simulate_series(spec: &PlateSpec, n_snapshots: usize, stride: usize) -> Result<Series> {
    if n_snapshots == 0 || stride == 0 {
        return Err(Error::validation("n_snapshots and stride must be at least 1"));
    }
    spec.validate()?;
    let free_spec = spec.without_defects();
    let has_defects = !spec.defects.is_empty();
    let mut field = init_field(spec)?;
    let mut free = if has_defects { Some(init_field(&free_spec)?) } else { None };
    let resampler = AreaResampler::new(spec.grid_nx, spec.grid_ny, spec.image_width, spec.image_height);

    let mut snapshots = Vec::with_capacity(n_snapshots);
    let mut steps = Vec::with_capacity(n_snapshots);
    let mut diff_norms = Vec::with_capacity(n_snapshots);
    let mut free_norms = Vec::with_capacity(n_snapshots);
    let mut norm_amplitude: f64 = 0.0;

    for _ in 0..n_snapshots {
        for _ in 0..stride {
            advance(&mut field, spec)?;
            if let Some(f) = free.as_mut() {
                advance(f, &free_spec)?;
            }
        }
        let reference = free.as_ref().unwrap_or(&field);
        let ref_img = resampler.apply(&reference.u_curr);
        norm_amplitude = ref_img.iter().fold(norm_amplitude, |m, v| m.max(v.abs()));
        free_norms.push(l2(reference.u_curr.iter().copied()));
        diff_norms.push(match free.as_ref() {
            Some(f) => l2(field.u_curr.iter().zip(&f.u_curr).map(|(a, b)| a - b)),
            None => 0.0,
        });
        snapshots.push(if has_defects { resampler.apply(&field.u_curr) } else { ref_img });
        steps.push(field.t_index);
    }

    if norm_amplitude == 0.0 {
        norm_amplitude = 1.0;
    }
    let max_free = free_norms.iter().copied().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frames = snapshots
        .iter()
        .map(|amp| {
            render_amplitudes(
                amp,
                spec.image_width,
                spec.image_height,
                norm_amplitude,
                spec.noise_sigma,
                &mut rng,
            )
        })
        .collect();
    let meta = steps
        .iter()
        .zip(&diff_norms)
        .map(|(&step, &d)| FrameMeta {
            step,
            defect_present: has_defects,
            scattered_energy: Some(if max_free > 0.0 { (d / max_free).powi(2) } else { 0.0 }),
        })
        .collect();
    let defects = spec
        .defects
        .iter()
        .map(|d| DefectTruth {
            center_px: spec.mm_to_px(d.center),
            arrival_step: arrival_step(spec, d),
        })
        .collect();

    Ok(Series {
        frames,
        meta,
        defects,
        norm_amplitude,
        dt_us: field.dt_us,
        stride,
    })
}
