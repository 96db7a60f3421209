//! Absorption maps, resolution filtering and the Φ phantom demonstration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{bin_counts, calibrate, estimate_or_nan, CalibrationRecord};
use crate::grid::Grid;
use crate::physics::EstimatorKind;
use crate::simkernel::{generate_stack, pair_rate_for, FramePair, MaskImage, Scene};

/// Effective resolution of a binning in the object plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSpec {
    /// Bin side in the object plane, um.
    pub d_object: f64,
    pub binning_k: usize,
    /// `d / 2r`.
    pub x: f64,
}

impl ResolutionSpec {
    pub fn new(binning_k: usize, pixel_pitch: f64, corr_radius_r: f64) -> Result<Self> {
        if binning_k < 1 {
            return Err(Error::domain("binning factor must be >= 1"));
        }
        if !(pixel_pitch > 0.0 && corr_radius_r > 0.0) {
            return Err(Error::domain("pixel pitch and correlation radius must be positive"));
        }
        let d_object = binning_k as f64 * pixel_pitch;
        Ok(Self {
            d_object,
            binning_k,
            x: d_object / (2.0 * corr_radius_r),
        })
    }

    /// Binning whose resolution is closest to the requested `X`.
    pub fn for_x(x: f64, pixel_pitch: f64, corr_radius_r: f64) -> Result<Self> {
        if !(x.is_finite() && x > 0.0) {
            return Err(Error::domain(format!("X must be positive, got {x}")));
        }
        let k = (2.0 * corr_radius_r * x / pixel_pitch).round().max(1.0) as usize;
        Self::new(k, pixel_pitch, corr_radius_r)
    }
}

/// Per-bin absorption estimates. `NaN` marks bins the estimator could not
/// evaluate (ratio with an empty reference bin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateMap {
    pub alpha: Grid<f64>,
    pub kind: EstimatorKind,
    pub binning_k: usize,
    pub frame_index: u64,
}

impl EstimateMap {
    /// Mean of the valid cells.
    pub fn mean(&self) -> f64 {
        let (s, n) = self
            .alpha
            .data
            .iter()
            .filter(|v| !v.is_nan())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        s / n as f64
    }

    pub fn invalid_cells(&self) -> usize {
        self.alpha.data.iter().filter(|v| v.is_nan()).count()
    }
}

/// Bin a frame with `k` and evaluate `kind` in every bin.
pub fn estimate_map(frame: &FramePair, calib: &CalibrationRecord, kind: EstimatorKind, k: usize) -> Result<EstimateMap> {
    calib.validate()?;
    if calib.binning_k != k {
        return Err(Error::domain(format!(
            "calibration was taken at binning {} but the map requests {k}",
            calib.binning_k
        )));
    }
    let p = bin_counts(&frame.probe, k)?;
    let r = bin_counts(&frame.reference, k)?;
    let data = p
        .data
        .iter()
        .zip(&r.data)
        .map(|(&p, &r)| estimate_or_nan(p, r, calib, kind))
        .collect();
    Ok(EstimateMap {
        alpha: Grid::from_vec(p.width, p.height, data)?,
        kind,
        binning_k: k,
        frame_index: frame.frame_index,
    })
}

/// Centred sliding-window mean over a `d_cells x d_cells` square. Windows are
/// clipped at the borders and skip invalid cells.
pub fn mean_filter(map: &EstimateMap, d_cells: usize) -> Result<EstimateMap> {
    if d_cells == 0 || d_cells.is_multiple_of(2) {
        return Err(Error::domain(format!(
            "filter window must be a positive odd number of cells, got {d_cells}"
        )));
    }
    let half = d_cells / 2;
    let g = &map.alpha;
    let filtered = Grid::from_fn(g.width, g.height, |x, y| {
        let (mut sum, mut n) = (0.0, 0usize);
        for yy in y.saturating_sub(half)..(y + half + 1).min(g.height) {
            for xx in x.saturating_sub(half)..(x + half + 1).min(g.width) {
                let v = *g.get(xx, yy);
                if !v.is_nan() {
                    sum += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    });
    Ok(EstimateMap {
        alpha: filtered,
        ..map.clone()
    })
}

/// Default stroke width of the Φ glyph for a `w x h` image.
pub fn default_stroke(w: usize, h: usize) -> usize {
    (w.min(h) / 12).max(2)
}

/// Φ-shaped absorber: a vertical bar through an elliptical ring, centred in a
/// transparent `w x h` field. The glyph is mirror-symmetric about the
/// vertical centre line.
pub fn phantom_phi(w: usize, h: usize, alpha_level: f64, stroke_px: usize) -> Result<MaskImage> {
    if w < 32 || h < 32 {
        return Err(Error::domain(format!("phantom needs at least 32x32 pixels, got {w}x{h}")));
    }
    if !(alpha_level > 0.0 && alpha_level <= 1.0) {
        return Err(Error::domain(format!("alpha level must lie in (0, 1], got {alpha_level}")));
    }
    if stroke_px == 0 {
        return Err(Error::domain("stroke width must be >= 1"));
    }
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let half = stroke_px as f64 / 2.0;
    let bar_half_len = 0.4 * h as f64;
    let (ax, ay) = (0.3 * w as f64, 0.24 * h as f64);
    let grid = Grid::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let bar = dx.abs() < half && dy.abs() <= bar_half_len;
        let rho = ((dx / ax).powi(2) + (dy / ay).powi(2)).sqrt();
        let ring = (rho - 1.0).abs() * ax.min(ay) < half;
        if bar || ring {
            alpha_level
        } else {
            0.0
        }
    });
    MaskImage::new(grid)
}

/// Mean absorption of each `k x k` block of a mask: the ground truth a
/// `k`-binned map estimates.
pub fn bin_mask(mask: &MaskImage, k: usize) -> Result<Grid<f64>> {
    if k < 1 {
        return Err(Error::domain("binning factor must be >= 1"));
    }
    let a = &mask.alpha;
    let norm = (k * k) as f64;
    Ok(Grid::from_fn(a.width / k, a.height / k, |bx, by| {
        let mut s = 0.0;
        for y in by * k..(by + 1) * k {
            for x in bx * k..(bx + 1) * k {
                s += a.get(x, y);
            }
        }
        s / norm
    }))
}

/// Root-mean-square deviation of the valid map cells from `truth`.
pub fn rms_error(map: &EstimateMap, truth: &Grid<f64>) -> Result<f64> {
    if !map.alpha.same_dims(truth) {
        return Err(Error::domain("map and ground truth differ in size"));
    }
    let (s, n) = map
        .alpha
        .data
        .iter()
        .zip(&truth.data)
        .filter(|(v, _)| !v.is_nan())
        .fold((0.0, 0usize), |(s, n), (v, t)| (s + (v - t).powi(2), n + 1));
    if n == 0 {
        return Err(Error::domain("map has no valid cells"));
    }
    Ok((s / n as f64).sqrt())
}

/// Parameters of the single-shot Φ imaging demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiDemoConfig {
    /// Side of the square analysis region in base pixels.
    pub grid: usize,
    pub pixel_pitch: f64,
    pub corr_radius_r: f64,
    pub eta_d: f64,
    pub alpha_level: f64,
    /// Mean detected probe photons per bin at `X = 1`.
    pub n_detected_at_x1: f64,
    pub frames: usize,
    pub calibration_frames: usize,
    pub x_values: Vec<f64>,
    pub kinds: Vec<EstimatorKind>,
    pub stroke_px: Option<usize>,
    pub seed: u64,
}

impl Default for PhiDemoConfig {
    fn default() -> Self {
        Self {
            grid: 100,
            pixel_pitch: 2.5,
            corr_radius_r: 5.0,
            eta_d: 0.81,
            alpha_level: 0.01,
            n_detected_at_x1: 1000.0,
            frames: 300,
            calibration_frames: 100,
            x_values: vec![1.0, 2.0, 3.0],
            kinds: vec![
                EstimatorKind::Direct,
                EstimatorKind::Subtraction,
                EstimatorKind::Optimized,
            ],
            stroke_px: None,
            seed: 1,
        }
    }
}

impl PhiDemoConfig {
    /// Scene with the Φ phantom; the calibration scene is its sample-free copy.
    pub fn scene(&self) -> Result<Scene> {
        let k1 = ResolutionSpec::for_x(1.0, self.pixel_pitch, self.corr_radius_r)?.binning_k;
        let rate = pair_rate_for(self.n_detected_at_x1, k1, self.eta_d);
        let stroke = self.stroke_px.unwrap_or_else(|| default_stroke(self.grid, self.grid));
        let mask = phantom_phi(self.grid, self.grid, self.alpha_level, stroke)?;
        let scene = Scene::new(self.grid, self.grid, self.pixel_pitch, self.corr_radius_r, rate, self.eta_d)
            .with_mask(mask);
        scene.validate()?;
        Ok(scene)
    }

    /// Seed of the sample-free calibration stack.
    pub fn calibration_seed(&self) -> u64 {
        self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
    }
}

/// One panel of the demonstration: an estimator at one resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiPanel {
    pub resolution: ResolutionSpec,
    pub kind: EstimatorKind,
    /// Single-shot map of the first sample frame.
    pub map: EstimateMap,
    /// RMS error against the binned mask, pooled over all sample frames.
    pub rms_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiDemo {
    pub scene: Scene,
    pub panels: Vec<PhiPanel>,
    pub calibrations: Vec<CalibrationRecord>,
    /// Direct-estimator map at the base resolution averaged over all shots.
    pub averaged_direct: EstimateMap,
}

impl PhiDemo {
    pub fn panel(&self, x: f64, kind: EstimatorKind) -> Option<&PhiPanel> {
        self.panels
            .iter()
            .find(|p| p.kind == kind && (p.resolution.x - x).abs() < 1e-9)
    }
}

/// Simulate the Φ phantom and reconstruct it with each estimator at each
/// requested resolution.
pub fn run_phi_demo(cfg: &PhiDemoConfig) -> Result<PhiDemo> {
    if cfg.frames < 1 || cfg.calibration_frames < 2 {
        return Err(Error::config("demo needs >= 1 sample frame and >= 2 calibration frames"));
    }
    if cfg.x_values.is_empty() || cfg.kinds.is_empty() {
        return Err(Error::config("demo needs at least one X value and one estimator"));
    }
    let scene = cfg.scene()?;
    let sample = generate_stack(&scene, cfg.frames, cfg.seed)?;
    let calib_stack = generate_stack(&scene.without_sample(), cfg.calibration_frames, cfg.calibration_seed())?;

    let mut panels = Vec::new();
    let mut calibrations = Vec::new();
    for &x in &cfg.x_values {
        let res = ResolutionSpec::for_x(x, cfg.pixel_pitch, cfg.corr_radius_r)?;
        let k = res.binning_k;
        let calib = calibrate(&calib_stack, k)?;
        let truth = bin_mask(&scene.mask, k)?;
        for &kind in &cfg.kinds {
            let mut sq = 0.0;
            let mut first = None;
            for frame in sample.frames() {
                let map = estimate_map(frame, &calib, kind, k)?;
                sq += rms_error(&map, &truth)?.powi(2);
                first.get_or_insert(map);
            }
            panels.push(PhiPanel {
                resolution: res,
                kind,
                map: first.expect("at least one frame"),
                rms_error: (sq / sample.len() as f64).sqrt(),
            });
        }
        calibrations.push(calib);
    }

    let base = calibrate(&calib_stack, 1)?;
    let mut avg = Grid::filled(scene.grid_w, scene.grid_h, 0.0);
    for frame in sample.frames() {
        let map = estimate_map(frame, &base, EstimatorKind::Direct, 1)?;
        for (a, v) in avg.data.iter_mut().zip(&map.alpha.data) {
            *a += v;
        }
    }
    avg.data.iter_mut().for_each(|a| *a /= sample.len() as f64);

    Ok(PhiDemo {
        scene,
        panels,
        calibrations,
        averaged_direct: EstimateMap {
            alpha: avg,
            kind: EstimatorKind::Direct,
            binning_k: 1,
            frame_index: 0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_of(g: Grid<f64>) -> EstimateMap {
        EstimateMap {
            alpha: g,
            kind: EstimatorKind::Direct,
            binning_k: 1,
            frame_index: 0,
        }
    }

    fn naive_filter(g: &Grid<f64>, d: usize) -> Grid<f64> {
        let h = (d / 2) as isize;
        Grid::from_fn(g.width, g.height, |x, y| {
            let mut s = 0.0;
            let mut n = 0.0;
            for dy in -h..=h {
                for dx in -h..=h {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < g.width && (yy as usize) < g.height {
                        s += g.get(xx as usize, yy as usize);
                        n += 1.0;
                    }
                }
            }
            s / n
        })
    }

    #[test]
    fn filter_examples() {
        let ramp = Grid::from_fn(5, 5, |x, y| (x + 5 * y) as f64);
        let m = map_of(ramp.clone());
        assert_eq!(mean_filter(&m, 1).unwrap().alpha, ramp);
        let f = mean_filter(&m, 3).unwrap().alpha;
        let oracle = naive_filter(&ramp, 3);
        for (a, b) in f.data.iter().zip(&oracle.data) {
            assert!((a - b).abs() < 1e-12);
        }
        // Corner window clipped to 2x2: (0 + 1 + 5 + 6) / 4.
        assert_eq!(*f.get(0, 0), 3.0);
        let c = map_of(Grid::filled(7, 4, 0.25));
        assert!(mean_filter(&c, 5).unwrap().alpha.data.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(mean_filter(&m, 2).is_err());
        assert!(mean_filter(&m, 0).is_err());
    }

    proptest! {
        // A perturbation confined to cells whose windows lie inside the
        // evaluation region leaves that region's mean unchanged.
        #[test]
        fn filter_preserves_interior_mean(
            vals in proptest::collection::vec(-1.0f64..1.0, 9),
            base in -0.5f64..0.5,
            half in 0usize..3,
        ) {
            let d = 2 * half + 1;
            let n = 3 + 4 * half + 6;
            let q0 = half;
            let q1 = n - half;
            let s0 = q0 + half;
            let mut g = Grid::filled(n, n, base);
            for (i, v) in vals.iter().enumerate() {
                *g.get_mut(s0 + i % 3, s0 + i / 3) += v;
            }
            let f = mean_filter(&map_of(g.clone()), d).unwrap().alpha;
            let region_mean = |g: &Grid<f64>| {
                let mut s = 0.0;
                for y in q0..q1 { for x in q0..q1 { s += g.get(x, y); } }
                s / ((q1 - q0) * (q1 - q0)) as f64
            };
            prop_assert!((region_mean(&f) - region_mean(&g)).abs() < 1e-12);
        }
    }

    #[test]
    fn phantom_properties() {
        let stroke = default_stroke(64, 48);
        let m = phantom_phi(64, 48, 0.01, stroke).unwrap();
        assert!(m.alpha.data.iter().all(|&a| a == 0.0 || a == 0.01));
        for y in 0..48 {
            for x in 0..64 {
                assert_eq!(m.alpha.get(x, y), m.alpha.get(63 - x, y));
            }
        }
        for (w, h) in [(32, 32), (64, 48), (100, 100), (128, 96)] {
            let m = phantom_phi(w, h, 0.5, default_stroke(w, h)).unwrap();
            let frac = m.alpha.data.iter().filter(|&&a| a > 0.0).count() as f64 / (w * h) as f64;
            assert!((0.05..=0.30).contains(&frac), "{w}x{h}: {frac}");
        }
        assert!(phantom_phi(31, 64, 0.01, 2).is_err());
        assert!(phantom_phi(64, 64, 0.0, 2).is_err());
        assert!(phantom_phi(64, 64, 0.01, 0).is_err());
    }

    #[test]
    fn resolution_spec() {
        let r = ResolutionSpec::new(4, 2.5, 5.0).unwrap();
        assert_eq!(r.d_object, 10.0);
        assert_eq!(r.x, 1.0);
        assert_eq!(ResolutionSpec::for_x(3.0, 2.5, 5.0).unwrap().binning_k, 12);
        assert!(ResolutionSpec::new(0, 2.5, 5.0).is_err());
        assert!(ResolutionSpec::for_x(-1.0, 2.5, 5.0).is_err());
    }

    #[test]
    fn bin_mask_averages() {
        let m = MaskImage::new(Grid::from_fn(4, 2, |x, _| if x < 2 { 0.02 } else { 0.0 })).unwrap();
        let b = bin_mask(&m, 2).unwrap();
        assert_eq!(b.data, vec![0.02, 0.0]);
    }
}
