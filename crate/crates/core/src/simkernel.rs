//! Monte Carlo generation of correlated probe/reference count frames.
//!
//! Pairs are born uniformly over the detector plane (analysis region plus a
//! guard band). The probe photon stays at the birth position and crosses the
//! sample; the reference photon is displaced by an isotropic Gaussian jitter
//! and bypasses it. Each photon is detected independently with its arm
//! efficiency and the survivors are histogrammed on the base-pixel grid.
//! Reference coordinates are generated already mirror-registered onto the
//! probe grid.
//!
//! The birth process is sampled per base pixel. For Poissonian light each
//! pixel receives an independent Poisson number of pairs; multithermal light
//! multiplies the whole frame's intensity by a `Gamma(M, 1/M)` factor, which
//! makes the total pair count negative binomial (the sum of `M` geometric
//! mode populations) while keeping placements uniform. Probe photons whose
//! twin is lost are drawn directly as a thinned Poisson count. A detected
//! reference photon lands at a pixel offset drawn from the exact
//! distribution of `floor(U + sigma Z)` per axis ([`landing_offset_pmf`],
//! uniform in-pixel position `U`, jitter `sigma Z`), truncated where its mass
//! falls below 1e-9.
//!
//! # Random streams
//!
//! Frame `i` draws from `ChaCha8Rng::seed_from_u64(global_seed)` with its
//! stream set to `i` (rand_chacha 0.9). Frames are therefore reproducible in
//! isolation and independent of the order in which they are generated.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::physics::{NoiseModel, JITTER_SIGMA_PER_RADIUS};

/// Per-pixel absorption of the sample over the analysis region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskImage {
    pub alpha: Grid<f64>,
}

impl MaskImage {
    pub fn new(alpha: Grid<f64>) -> Result<Self> {
        let mask = Self { alpha };
        mask.validate()?;
        Ok(mask)
    }

    pub fn uniform(width: usize, height: usize, alpha: f64) -> Result<Self> {
        Self::new(Grid::filled(width, height, alpha))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            alpha: Grid::filled(width, height, 0.0),
        }
    }

    pub fn width(&self) -> usize {
        self.alpha.width
    }

    pub fn height(&self) -> usize {
        self.alpha.height
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, a)) = self
            .alpha
            .data
            .iter()
            .enumerate()
            .find(|(_, a)| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::domain(format!(
                "mask value {a} at ({}, {}) outside [0, 1]",
                i % self.alpha.width,
                i / self.alpha.width
            )));
        }
        Ok(())
    }
}

/// Immutable description of source, detector, noise model and sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    /// Analysis region width in base pixels.
    pub grid_w: usize,
    /// Analysis region height in base pixels.
    pub grid_h: usize,
    /// Base pixel side in the object plane, um.
    pub pixel_pitch: f64,
    /// Mean generated pairs per base pixel per frame, before detection.
    pub pair_rate: f64,
    /// Transverse correlation radius `r`, um.
    pub corr_radius_r: f64,
    pub eta_d_probe: f64,
    pub eta_d_ref: f64,
    pub noise: NoiseModel,
    pub mask: MaskImage,
    /// Simulated border around the analysis region, base pixels.
    pub guard_band: usize,
}

impl Scene {
    /// Scene with a transparent sample, equal arm efficiencies, Poissonian
    /// light and the minimum guard band.
    pub fn new(
        grid_w: usize,
        grid_h: usize,
        pixel_pitch: f64,
        corr_radius_r: f64,
        pair_rate: f64,
        eta_d: f64,
    ) -> Self {
        Self {
            grid_w,
            grid_h,
            pixel_pitch,
            pair_rate,
            corr_radius_r,
            eta_d_probe: eta_d,
            eta_d_ref: eta_d,
            noise: NoiseModel::Poisson,
            mask: MaskImage::zeros(grid_w, grid_h),
            guard_band: min_guard_band(pixel_pitch, corr_radius_r),
        }
    }

    /// The reference configuration of the experiment: 5 um correlation
    /// radius sampled with 2.5 um pixels, 0.81 detection efficiency and
    /// 10^3 detected photons per 5 um x 5 um cell, on a 24 x 24 pixel region.
    pub fn reference_default() -> Self {
        let pitch = 2.5;
        let r = 5.0;
        let eta_d = 0.81;
        Self::new(24, 24, pitch, r, pair_rate_for(1000.0, 2, eta_d), eta_d)
    }

    pub fn with_mask(mut self, mask: MaskImage) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    /// Copy of the scene without a sample, used for calibration runs.
    pub fn without_sample(&self) -> Self {
        Self {
            mask: MaskImage::zeros(self.grid_w, self.grid_h),
            ..self.clone()
        }
    }

    /// Jitter standard deviation in base pixels.
    pub fn jitter_sigma_px(&self) -> f64 {
        JITTER_SIGMA_PER_RADIUS * self.corr_radius_r / self.pixel_pitch
    }

    /// `X = d / 2r` for a bin of `k` base pixels.
    pub fn x_for_binning(&self, k: usize) -> f64 {
        k as f64 * self.pixel_pitch / (2.0 * self.corr_radius_r)
    }

    /// Expected detected probe photons per base pixel without the sample.
    pub fn mean_probe_per_pixel(&self) -> f64 {
        self.pair_rate * self.eta_d_probe
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(Error::config("grid dimensions must be >= 1"));
        }
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("pixel_pitch", self.pixel_pitch)?;
        positive("pair_rate", self.pair_rate)?;
        positive("corr_radius_r", self.corr_radius_r)?;
        for (name, eff) in [("eta_d_probe", self.eta_d_probe), ("eta_d_ref", self.eta_d_ref)] {
            if !eff.is_finite() || eff <= 0.0 || eff > 1.0 {
                return Err(Error::config(format!("{name} must lie in (0, 1], got {eff}")));
            }
        }
        self.noise.validate()?;
        if self.mask.width() != self.grid_w || self.mask.height() != self.grid_h {
            return Err(Error::config(format!(
                "mask is {}x{} but the analysis region is {}x{}",
                self.mask.width(),
                self.mask.height(),
                self.grid_w,
                self.grid_h
            )));
        }
        self.mask.validate().map_err(|e| Error::config(e.to_string()))?;
        let min_guard = min_guard_band(self.pixel_pitch, self.corr_radius_r);
        if self.guard_band < min_guard {
            return Err(Error::config(format!(
                "guard band {} px is below the required {min_guard} px (5 jitter sigmas)",
                self.guard_band
            )));
        }
        Ok(())
    }

    /// Geometry, source and detector agree; the masks may differ.
    pub fn same_apparatus(&self, other: &Scene) -> bool {
        self.grid_w == other.grid_w
            && self.grid_h == other.grid_h
            && self.pixel_pitch == other.pixel_pitch
            && self.pair_rate == other.pair_rate
            && self.corr_radius_r == other.corr_radius_r
            && self.eta_d_probe == other.eta_d_probe
            && self.eta_d_ref == other.eta_d_ref
            && self.noise == other.noise
            && self.guard_band == other.guard_band
    }

    /// SHA-256 of the scene's canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("scene serialises");
        Sha256::digest(&json).into()
    }
}

/// Smallest admissible guard band: five jitter standard deviations.
pub fn min_guard_band(pixel_pitch: f64, corr_radius_r: f64) -> usize {
    let sigma_px = JITTER_SIGMA_PER_RADIUS * corr_radius_r / pixel_pitch;
    (5.0 * sigma_px - 1e-9).ceil().max(0.0) as usize
}

/// Pair rate per base pixel that yields `n_detected` probe photons per
/// `k x k` bin with detection efficiency `eta_d`.
pub fn pair_rate_for(n_detected: f64, k: usize, eta_d: f64) -> f64 {
    n_detected / ((k * k) as f64 * eta_d)
}

/// One exposure: probe and mirror-registered reference counts.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub probe: Grid<u32>,
    pub reference: Grid<u32>,
    pub frame_index: u64,
    /// Global seed of the stream family this frame was drawn from.
    pub seed_record: u64,
}

impl FramePair {
    pub fn new(probe: Grid<u32>, reference: Grid<u32>, frame_index: u64, seed: u64) -> Result<Self> {
        if !probe.same_dims(&reference) {
            return Err(Error::domain("probe and reference grids differ in size"));
        }
        Ok(Self {
            probe,
            reference,
            frame_index,
            seed_record: seed,
        })
    }

    pub fn width(&self) -> usize {
        self.probe.width
    }

    pub fn height(&self) -> usize {
        self.probe.height
    }
}

/// Ordered frames together with the scene and seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    scene: Arc<Scene>,
    global_seed: u64,
    frames: Vec<FramePair>,
}

impl FrameStack {
    pub fn new(scene: impl Into<Arc<Scene>>, global_seed: u64, frames: Vec<FramePair>) -> Result<Self> {
        let scene = scene.into();
        for f in &frames {
            if f.width() != scene.grid_w || f.height() != scene.grid_h {
                return Err(Error::domain(format!(
                    "frame {} is {}x{}, scene analysis region is {}x{}",
                    f.frame_index,
                    f.width(),
                    f.height(),
                    scene.grid_w,
                    scene.grid_h
                )));
            }
        }
        if frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
            return Err(Error::domain("frame indices must be strictly increasing"));
        }
        Ok(Self {
            scene,
            global_seed,
            frames,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    pub fn frames(&self) -> &[FramePair] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<FramePair> {
        self.frames
    }
}

fn frame_rng(global_seed: u64, frame_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(frame_index);
    rng
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean)
        .map_err(|e| Error::domain(format!("Poisson mean {mean}: {e}")))?;
    Ok(dist.sample(rng) as u64)
}

/// Draw the number of pairs emitted in one frame with the given mean.
///
/// Poisson light gives a Poisson draw. Multithermal light gives the sum of
/// `M` independent geometric mode populations of mean `mean / M`, sampled as
/// the equivalent Gamma-Poisson mixture.
pub fn sample_pair_count<R: Rng + ?Sized>(mean_pairs: f64, noise: NoiseModel, rng: &mut R) -> Result<u64> {
    if !mean_pairs.is_finite() || mean_pairs <= 0.0 {
        return Err(Error::domain(format!("mean pair count must be positive, got {mean_pairs}")));
    }
    noise.validate()?;
    let intensity = intensity_factor(noise, rng)?;
    poisson_count(mean_pairs * intensity, rng)
}

/// Frame-wide intensity multiplier: 1 for Poisson light, `Gamma(M, 1/M)`
/// for `M` thermal modes.
fn intensity_factor<R: Rng + ?Sized>(noise: NoiseModel, rng: &mut R) -> Result<f64> {
    match noise {
        NoiseModel::Poisson => Ok(1.0),
        NoiseModel::Multithermal { modes_per_cell } => {
            let m = modes_per_cell as f64;
            let gamma = Gamma::new(m, 1.0 / m)
                .map_err(|e| Error::domain(format!("thermal mode count {m}: {e}")))?;
            Ok(gamma.sample(rng))
        }
    }
}

/// Probability that a photon placed uniformly in a pixel and displaced by
/// `N(0, sigma^2)` along one axis lands `offset` pixels away.
///
/// With `G(t) = t Phi(t) + phi(t)` the antiderivative of the normal CDF this
/// is `sigma [G((o+1)/s) - 2 G(o/s) + G((o-1)/s)]`.
pub fn landing_offset_pmf(sigma_px: f64, offset: i64) -> f64 {
    if sigma_px <= 0.0 {
        return if offset == 0 { 1.0 } else { 0.0 };
    }
    let g = |t: f64| {
        let cdf = 0.5 * libm::erfc(-t / std::f64::consts::SQRT_2);
        let pdf = (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        t * cdf + pdf
    };
    let o = offset as f64;
    let p = sigma_px * (g((o + 1.0) / sigma_px) - 2.0 * g(o / sigma_px) + g((o - 1.0) / sigma_px));
    p.max(0.0)
}

/// Reach of the landing kernel in pixels; the mass beyond it is below 1e-9.
fn kernel_reach(sigma_px: f64) -> usize {
    (6.0 * sigma_px).ceil() as usize + 1
}

/// Frame-independent sampling tables of a scene.
struct Kernel {
    offsets: WeightedAliasIndex<f64>,
    reach: usize,
    side: usize,
}

impl Kernel {
    fn new(scene: &Scene) -> Result<Self> {
        let sigma = scene.jitter_sigma_px();
        let reach = kernel_reach(sigma);
        let side = 2 * reach + 1;
        let axis: Vec<f64> = (0..side)
            .map(|i| landing_offset_pmf(sigma, i as i64 - reach as i64))
            .collect();
        let weights = (0..side * side).map(|i| axis[i / side] * axis[i % side]).collect();
        let offsets = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::domain(format!("landing kernel: {e}")))?;
        Ok(Self { offsets, reach, side })
    }
}

/// Generate frame `frame_index` of the stream family `global_seed`.
pub fn generate_frame_pair(scene: &Scene, frame_index: u64, global_seed: u64) -> Result<FramePair> {
    scene.validate()?;
    simulate_frame(scene, &Kernel::new(scene)?, frame_index, global_seed)
}

fn simulate_frame(scene: &Scene, kernel: &Kernel, frame_index: u64, global_seed: u64) -> Result<FramePair> {
    let mut rng = frame_rng(global_seed, frame_index);
    let (w, h, g) = (scene.grid_w, scene.grid_h, scene.guard_band);
    let (full_w, full_h) = (w + 2 * g, h + 2 * g);
    let eta_r = scene.eta_d_ref;

    let lambda = scene.pair_rate * intensity_factor(scene.noise, &mut rng)?;
    let ref_dist = Poisson::new(lambda * eta_r)
        .map_err(|e| Error::domain(format!("pair rate {lambda}: {e}")))?;

    let mut probe = Grid::filled(w, h, 0u32);
    let mut reference = Grid::filled(w, h, 0u32);
    let reach = kernel.reach as isize;

    for fy in 0..full_h {
        for fx in 0..full_w {
            let inside = fx >= g && fx < g + w && fy >= g && fy < g + h;
            let q_probe = if inside {
                (1.0 - scene.mask.alpha.get(fx - g, fy - g)) * scene.eta_d_probe
            } else {
                0.0
            };
            let n_ref = ref_dist.sample(&mut rng) as u64;
            if q_probe > 0.0 {
                // Twins of detected reference photons, plus detected probe
                // photons whose twin is lost.
                let mut hits = poisson_count(lambda * q_probe * (1.0 - eta_r), &mut rng)?;
                if n_ref > 0 {
                    hits += Binomial::new(n_ref, q_probe.min(1.0))
                        .map_err(|e| Error::domain(format!("probe efficiency {q_probe}: {e}")))?
                        .sample(&mut rng);
                }
                *probe.get_mut(fx - g, fy - g) += hits as u32;
            }
            for _ in 0..n_ref {
                let cell = kernel.offsets.sample(&mut rng);
                let lx = fx as isize + (cell % kernel.side) as isize - reach - g as isize;
                let ly = fy as isize + (cell / kernel.side) as isize - reach - g as isize;
                if lx >= 0 && ly >= 0 && (lx as usize) < w && (ly as usize) < h {
                    *reference.get_mut(lx as usize, ly as usize) += 1;
                }
            }
        }
    }
    FramePair::new(probe, reference, frame_index, global_seed)
}

/// Generate frames `start..end` in parallel. Output order follows the index.
pub fn generate_frames(scene: &Scene, start: u64, end: u64, global_seed: u64) -> Result<Vec<FramePair>> {
    scene.validate()?;
    if end <= start {
        return Err(Error::domain(format!("empty frame range {start}..{end}")));
    }
    let kernel = Kernel::new(scene)?;
    (start..end)
        .into_par_iter()
        .map(|i| simulate_frame(scene, &kernel, i, global_seed))
        .collect()
}

/// Generate `n_frames` independent frames with indices `0..n_frames`.
pub fn generate_stack(scene: &Scene, n_frames: usize, global_seed: u64) -> Result<FrameStack> {
    if n_frames == 0 {
        return Err(Error::domain("n_frames must be >= 1"));
    }
    let frames = generate_frames(scene, 0, n_frames as u64, global_seed)?;
    FrameStack::new(scene.clone(), global_seed, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene() -> Scene {
        Scene::new(6, 5, 5.0, 5.0, 40.0, 0.81)
    }

    #[test]
    fn guard_band_minimum() {
        // sigma = 0.4 r; at pitch = r the band is ceil(2) = 2 px.
        assert_eq!(min_guard_band(5.0, 5.0), 2);
        assert_eq!(min_guard_band(2.5, 5.0), 4);
        assert_eq!(min_guard_band(25.0, 5.0), 1);
        let mut s = small_scene();
        s.guard_band = 1;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scene_validation() {
        assert!(small_scene().validate().is_ok());
        let mut s = small_scene();
        s.eta_d_ref = 1.2;
        assert!(s.validate().is_err());
        let mut s = small_scene();
        s.pair_rate = 0.0;
        assert!(s.validate().is_err());
        let s = small_scene().with_mask(MaskImage::zeros(3, 3));
        assert!(s.validate().is_err());
        let s = small_scene().with_noise(NoiseModel::Multithermal { modes_per_cell: 0 });
        assert!(s.validate().is_err());
        assert!(MaskImage::uniform(2, 2, 1.5).is_err());
    }

    #[test]
    fn full_absorption_blanks_probe() {
        let mut scene = small_scene().with_mask(MaskImage::uniform(6, 5, 1.0).unwrap());
        scene.eta_d_ref = 1.0;
        let f = generate_frame_pair(&scene, 3, 11).unwrap();
        assert!(f.probe.data.iter().all(|&c| c == 0));
        assert!(f.reference.data.iter().sum::<u32>() > 0);
        assert_eq!(f.frame_index, 3);
        assert_eq!(f.seed_record, 11);
    }

    #[test]
    fn single_frame_stack_matches_frame() {
        let scene = small_scene();
        let stack = generate_stack(&scene, 1, 99).unwrap();
        assert_eq!(stack.frames()[0], generate_frame_pair(&scene, 0, 99).unwrap());
    }

    #[test]
    fn split_generation_is_identical() {
        let scene = small_scene();
        let whole = generate_stack(&scene, 9, 5).unwrap();
        let mut parts = generate_frames(&scene, 0, 4, 5).unwrap();
        parts.extend(generate_frames(&scene, 4, 9, 5).unwrap());
        assert_eq!(whole.frames(), &parts[..]);
        let again = generate_stack(&scene, 9, 5).unwrap();
        assert_eq!(whole, again);
        let other = generate_stack(&scene, 9, 6).unwrap();
        assert_ne!(whole.frames(), other.frames());
    }

    #[test]
    fn stack_rejects_bad_frames() {
        let scene = small_scene();
        assert!(generate_stack(&scene, 0, 1).is_err());
        let mut frames = generate_frames(&scene, 0, 2, 1).unwrap();
        frames.swap(0, 1);
        assert!(FrameStack::new(scene.clone(), 1, frames).is_err());
        let g = Grid::filled(2, 2, 0u32);
        let f = FramePair::new(g.clone(), g, 0, 0).unwrap();
        assert!(FrameStack::new(scene, 1, vec![f]).is_err());
    }

    #[test]
    fn pair_count_errors_and_small_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_pair_count(0.0, NoiseModel::Poisson, &mut rng).is_err());
        assert!(sample_pair_count(-3.0, NoiseModel::Poisson, &mut rng).is_err());
        let zeros = (0..10_000)
            .filter(|_| sample_pair_count(1e-9, NoiseModel::Poisson, &mut rng).unwrap() == 0)
            .count();
        assert_eq!(zeros, 10_000);
    }

    #[test]
    fn scene_hash_tracks_content() {
        let a = small_scene();
        let mut b = small_scene();
        assert_eq!(a.hash(), b.hash());
        b.pair_rate += 1.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn landing_pmf_matches_direct_sampling() {
        use rand_distr::StandardNormal;
        for sigma in [0.08, 0.5, 1.6] {
            let reach = kernel_reach(sigma) as i64;
            let total: f64 = (-reach..=reach).map(|o| landing_offset_pmf(sigma, o)).sum();
            assert!((total - 1.0).abs() < 1e-9, "sigma {sigma}: {total}");
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let n = 400_000;
            let mut hist = std::collections::HashMap::new();
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                let o = (rng.random::<f64>() + sigma * z).floor() as i64;
                *hist.entry(o).or_insert(0u32) += 1;
            }
            for o in -3..=3 {
                let p = landing_offset_pmf(sigma, o);
                let f = *hist.get(&o).unwrap_or(&0) as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((f - p).abs() <= 5.0 * se + 1e-12, "sigma {sigma} offset {o}: {f} vs {p}");
            }
        }
        assert_eq!(landing_offset_pmf(0.0, 0), 1.0);
        assert_eq!(landing_offset_pmf(0.0, 1), 0.0);
    }
}
