//! Calibration from no-sample frames and per-cell absorption estimation.
//!
//! All pooled statistics are accumulated per batch of consecutive frames
//! (at most [`MAX_BATCHES`] batches) in frame order. Count moments are summed
//! exactly in 128-bit integers, so calibration output does not depend on the
//! reduction schedule; floating-point per-cell statistics are merged batch by
//! batch in index order. Standard errors are batch-means estimates, which
//! account for correlations between neighbouring cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::physics::EstimatorKind;
use crate::simkernel::{FrameStack, Scene};

/// Upper bound on the number of batches used for standard errors.
pub const MAX_BATCHES: usize = 20;

/// Sum `k x k` blocks of a count grid. Trailing rows/columns that do not fill
/// a block are dropped.
pub fn bin_counts<T: Copy + Into<u64>>(grid: &Grid<T>, k: usize) -> Result<Grid<u64>> {
    if k < 1 {
        return Err(Error::domain("binning factor must be >= 1"));
    }
    let (bw, bh) = (grid.width / k, grid.height / k);
    let mut out = Grid::filled(bw, bh, 0u64);
    for y in 0..bh * k {
        let row = &grid.data[y * grid.width..y * grid.width + bw * k];
        let out_row = &mut out.data[(y / k) * bw..(y / k + 1) * bw];
        for (bx, chunk) in row.chunks_exact(k).enumerate() {
            out_row[bx] += chunk.iter().map(|&c| c.into()).sum::<u64>();
        }
    }
    Ok(out)
}

/// Rectangular region of interest in base-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    /// The whole analysis region of a scene.
    pub fn full(scene: &Scene) -> Self {
        Self::new(0, 0, scene.grid_w, scene.grid_h)
    }

    /// Indices (in the `k`-binned grid of a `w x h` region) of the bins that
    /// lie entirely inside the ROI.
    pub fn cells(&self, w: usize, h: usize, k: usize) -> Result<Vec<usize>> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("empty region of interest"));
        }
        if self.x + self.width > w || self.y + self.height > h {
            return Err(Error::domain(format!(
                "region of interest {}x{}+{}+{} exceeds the {w}x{h} analysis region",
                self.width, self.height, self.x, self.y
            )));
        }
        let bw = w / k;
        let span = |start: usize, len: usize, nbins: usize| {
            let first = start.div_ceil(k);
            let last = ((start + len) / k).min(nbins);
            first..last.max(first)
        };
        let xs = span(self.x, self.width, bw);
        let ys = span(self.y, self.height, h / k);
        let cells: Vec<usize> = ys
            .flat_map(|cy| xs.clone().map(move |cx| cy * bw + cx))
            .collect();
        if cells.is_empty() {
            return Err(Error::domain(format!(
                "region of interest holds no complete {k}x{k} bin"
            )));
        }
        Ok(cells)
    }
}

/// No-sample calibration at one binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    /// Bin side in base pixels.
    pub binning_k: usize,
    /// Arm balance `<N_R> / <N_P>`.
    pub gamma: f64,
    /// Linear-correction coefficient `Cov(N_P, N_R) / Var(N_R)`.
    pub k_opt: f64,
    /// Noise reduction factor on balanced counts.
    pub nrf: f64,
    pub nrf_std_error: f64,
    /// Heralding efficiency `1 - NRF`, clamped to `[0, 1]`.
    pub eta: f64,
    /// `<N_P>` per bin per frame.
    pub mean_probe: f64,
    /// `<N_R>` per bin per frame.
    pub mean_ref: f64,
    /// `Var(N_P) / <N_P>`.
    pub fano_probe: f64,
    pub fano_probe_std_error: f64,
    pub n_frames_used: usize,
    pub n_cells: usize,
}

impl CalibrationRecord {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.gamma,
            self.k_opt,
            self.nrf,
            self.eta,
            self.mean_probe,
            self.mean_ref,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite
            || self.gamma <= 0.0
            || self.nrf < 0.0
            || !(0.0..=1.0).contains(&self.eta)
            || self.mean_probe <= 0.0
            || self.mean_ref <= 0.0
            || self.binning_k < 1
            || self.n_frames_used < 2
        {
            return Err(Error::Calibration(format!("invalid calibration record: {self:?}")));
        }
        Ok(())
    }
}

/// Exact first and second moments of paired counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairMoments {
    pub n: u64,
    pub sum_p: u128,
    pub sum_r: u128,
    pub sum_pp: u128,
    pub sum_rr: u128,
    pub sum_pr: u128,
}

impl PairMoments {
    pub fn push(&mut self, p: u64, r: u64) {
        let (p, r) = (p as u128, r as u128);
        self.n += 1;
        self.sum_p += p;
        self.sum_r += r;
        self.sum_pp += p * p;
        self.sum_rr += r * r;
        self.sum_pr += p * r;
    }

    pub fn merge(&mut self, other: &PairMoments) {
        self.n += other.n;
        self.sum_p += other.sum_p;
        self.sum_r += other.sum_r;
        self.sum_pp += other.sum_pp;
        self.sum_rr += other.sum_rr;
        self.sum_pr += other.sum_pr;
    }

    pub fn mean_p(&self) -> f64 {
        self.sum_p as f64 / self.n as f64
    }

    pub fn mean_r(&self) -> f64 {
        self.sum_r as f64 / self.n as f64
    }

    /// Unbiased (co)variance from exact sums: `(n Sxy - Sx Sy) / (n (n - 1))`.
    fn comoment(&self, sxy: u128, sx: u128, sy: u128) -> f64 {
        let n = self.n as i128;
        let num = n * sxy as i128 - sx as i128 * sy as i128;
        num as f64 / (n * (n - 1)) as f64
    }

    pub fn var_p(&self) -> f64 {
        self.comoment(self.sum_pp, self.sum_p, self.sum_p)
    }

    pub fn var_r(&self) -> f64 {
        self.comoment(self.sum_rr, self.sum_r, self.sum_r)
    }

    pub fn cov(&self) -> f64 {
        self.comoment(self.sum_pr, self.sum_p, self.sum_r)
    }

    pub fn gamma(&self) -> f64 {
        self.mean_r() / self.mean_p()
    }

    /// `Var(gamma N_P - N_R) / <gamma N_P + N_R>` with `gamma` balancing the arms.
    pub fn nrf(&self) -> f64 {
        let g = self.gamma();
        let var = g * g * self.var_p() + self.var_r() - 2.0 * g * self.cov();
        var / (g * self.mean_p() + self.mean_r())
    }

    pub fn fano_probe(&self) -> f64 {
        self.var_p() / self.mean_p()
    }

    pub fn k_opt(&self) -> f64 {
        self.cov() / self.var_r()
    }
}

pub(crate) fn batch_count(n_frames: usize) -> usize {
    (n_frames / 2).clamp(1, MAX_BATCHES)
}

#[inline]
pub(crate) fn batch_of(frame: usize, n_frames: usize, batches: usize) -> usize {
    frame * batches / n_frames
}

/// Mean and batch-means standard error of per-batch statistics.
pub(crate) fn batch_mean_se(values: &[f64]) -> f64 {
    let b = values.len();
    if b < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / b as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

/// Pooled and per-batch paired moments of `k`-binned counts over the cells
/// of `roi`.
pub fn pair_moments(stack: &FrameStack, k: usize, roi: &Roi) -> Result<(PairMoments, Vec<PairMoments>)> {
    let scene = stack.scene();
    let cells = roi.cells(scene.grid_w, scene.grid_h, k)?;
    let n = stack.len();
    let batches = batch_count(n);
    let mut per_batch = vec![PairMoments::default(); batches];
    for (i, frame) in stack.frames().iter().enumerate() {
        let p = bin_counts(&frame.probe, k)?;
        let r = bin_counts(&frame.reference, k)?;
        let m = &mut per_batch[batch_of(i, n, batches)];
        for &c in &cells {
            m.push(p.data[c], r.data[c]);
        }
    }
    let mut total = PairMoments::default();
    for m in &per_batch {
        total.merge(m);
    }
    Ok((total, per_batch))
}

/// Calibrate the estimators at binning `k` from a stack taken without the
/// sample. Statistics are pooled over all bins and frames.
pub fn calibrate(stack: &FrameStack, k: usize) -> Result<CalibrationRecord> {
    if k < 1 {
        return Err(Error::domain("binning factor must be >= 1"));
    }
    if stack.len() < 2 {
        return Err(Error::Calibration(format!(
            "calibration needs at least 2 frames, got {}",
            stack.len()
        )));
    }
    let (m, batches) = pair_moments(stack, k, &Roi::full(stack.scene()))?;
    if m.sum_p == 0 || m.sum_r == 0 {
        return Err(Error::Calibration("no counts in one of the arms".into()));
    }
    if m.var_r() <= 0.0 {
        return Err(Error::Calibration("reference counts have zero variance".into()));
    }
    let per_batch = |f: fn(&PairMoments) -> f64| -> Vec<f64> {
        batches
            .iter()
            .filter(|b| b.n >= 2 && b.sum_p > 0)
            .map(f)
            .collect()
    };
    let nrf = m.nrf();
    let record = CalibrationRecord {
        binning_k: k,
        gamma: m.gamma(),
        k_opt: m.k_opt(),
        nrf,
        nrf_std_error: batch_mean_se(&per_batch(PairMoments::nrf)),
        eta: (1.0 - nrf).clamp(0.0, 1.0),
        mean_probe: m.mean_p(),
        mean_ref: m.mean_r(),
        fano_probe: m.fano_probe(),
        fano_probe_std_error: batch_mean_se(&per_batch(PairMoments::fano_probe)),
        n_frames_used: stack.len(),
        n_cells: (m.n / stack.len() as u64) as usize,
    };
    record.validate()?;
    Ok(record)
}

/// Absorption estimate from one pair of binned counts.
///
/// Estimates are not clipped to `[0, 1]`. The ratio estimator is singular
/// when the reference bin is empty.
pub fn estimate_alpha(probe_bin: u64, ref_bin: u64, calib: &CalibrationRecord, kind: EstimatorKind) -> Result<f64> {
    let (p, r) = (probe_bin as f64, ref_bin as f64);
    Ok(match kind {
        EstimatorKind::Ratio => {
            if ref_bin == 0 {
                return Err(Error::SingularSample);
            }
            1.0 - calib.gamma * p / r
        }
        EstimatorKind::Subtraction => (r - calib.gamma * p) / calib.mean_ref,
        EstimatorKind::Optimized => 1.0 - (p - calib.k_opt * (r - calib.mean_ref)) / calib.mean_probe,
        EstimatorKind::Direct => 1.0 - p / calib.mean_probe,
    })
}

/// `NaN` marks a cell the estimator cannot evaluate.
#[inline]
pub(crate) fn estimate_or_nan(p: u64, r: u64, calib: &CalibrationRecord, kind: EstimatorKind) -> f64 {
    estimate_alpha(p, r, calib, kind).unwrap_or(f64::NAN)
}

/// Frame-to-frame fluctuation of one estimator over a region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub kind: EstimatorKind,
    /// Root-mean-square over cells of the per-cell standard deviation
    /// across frames.
    pub value: f64,
    pub std_error: f64,
    /// Mean estimate pooled over cells and frames.
    pub mean_estimate: f64,
    pub mean_std_error: f64,
    pub cells: usize,
    pub frames: usize,
    /// Samples excluded because the estimator was singular.
    pub invalid_samples: u64,
}

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    #[inline]
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, o: &Welford) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64;
        self.n = n;
    }

    fn variance(&self) -> Option<f64> {
        (self.n >= 2).then(|| self.m2 / (self.n - 1) as f64)
    }
}

/// Uncertainties of several estimators computed in a single pass, with the
/// per-batch mean variances needed for ratio standard errors.
#[derive(Debug, Clone)]
pub struct UncertaintyReport {
    pub entries: Vec<Uncertainty>,
    /// `batch_variances[i][b]`: mean per-cell variance of `entries[i]` within batch `b`.
    pub batch_variances: Vec<Vec<f64>>,
}

impl UncertaintyReport {
    pub fn get(&self, kind: EstimatorKind) -> Option<&Uncertainty> {
        self.entries.iter().find(|u| u.kind == kind)
    }

    fn index(&self, kind: EstimatorKind) -> Option<usize> {
        self.entries.iter().position(|u| u.kind == kind)
    }

    /// `u(reference) / u(kind)` and its batch-means standard error.
    pub fn enhancement(&self, kind: EstimatorKind, reference: EstimatorKind) -> Option<(f64, f64)> {
        let (i, j) = (self.index(kind)?, self.index(reference)?);
        let value = self.entries[j].value / self.entries[i].value;
        let per_batch: Vec<f64> = self.batch_variances[j]
            .iter()
            .zip(&self.batch_variances[i])
            .map(|(vr, vk)| (vr / vk).sqrt())
            .filter(|e| e.is_finite())
            .collect();
        Some((value, batch_mean_se(&per_batch)))
    }
}

/// Empirical uncertainty of one estimator on `stack` over the bins inside
/// `roi`, using the calibration's binning.
pub fn empirical_uncertainty(
    stack: &FrameStack,
    calib: &CalibrationRecord,
    kind: EstimatorKind,
    roi: &Roi,
) -> Result<Uncertainty> {
    Ok(empirical_uncertainties(stack, calib, &[kind], roi)?.entries[0])
}

pub fn empirical_uncertainties(
    stack: &FrameStack,
    calib: &CalibrationRecord,
    kinds: &[EstimatorKind],
    roi: &Roi,
) -> Result<UncertaintyReport> {
    calib.validate()?;
    let n = stack.len();
    if n < 2 {
        return Err(Error::domain(format!("uncertainty needs at least 2 frames, got {n}")));
    }
    if kinds.is_empty() {
        return Err(Error::domain("no estimator selected"));
    }
    let scene = stack.scene();
    let k = calib.binning_k;
    let cells = roi.cells(scene.grid_w, scene.grid_h, k)?;
    let batches = batch_count(n);
    let nk = kinds.len();
    let nc = cells.len();

    // acc[(b * nk + i) * nc + c]
    let mut acc = vec![Welford::default(); batches * nk * nc];
    let mut invalid = vec![0u64; nk];
    for (f, frame) in stack.frames().iter().enumerate() {
        let b = batch_of(f, n, batches);
        let p = bin_counts(&frame.probe, k)?;
        let r = bin_counts(&frame.reference, k)?;
        for (i, &kind) in kinds.iter().enumerate() {
            let row = &mut acc[(b * nk + i) * nc..(b * nk + i + 1) * nc];
            for (slot, &c) in row.iter_mut().zip(&cells) {
                let est = estimate_or_nan(p.data[c], r.data[c], calib, kind);
                if est.is_nan() {
                    invalid[i] += 1;
                } else {
                    slot.push(est);
                }
            }
        }
    }

    let mut entries = Vec::with_capacity(nk);
    let mut batch_variances = Vec::with_capacity(nk);
    for (i, &kind) in kinds.iter().enumerate() {
        let slot = |b: usize, c: usize| &acc[(b * nk + i) * nc + c];
        let mut pooled_var = Vec::with_capacity(nc);
        let mut pooled_mean = Welford::default();
        for c in 0..nc {
            let mut total = Welford::default();
            for b in 0..batches {
                total.merge(slot(b, c));
            }
            if let Some(v) = total.variance() {
                pooled_var.push(v);
            }
            pooled_mean.merge(&total);
        }
        if pooled_var.is_empty() {
            return Err(Error::domain(format!("no cell has two valid {kind} estimates")));
        }
        let mean_var = pooled_var.iter().sum::<f64>() / pooled_var.len() as f64;

        let mut bvars = Vec::with_capacity(batches);
        let mut bmeans = Vec::with_capacity(batches);
        for b in 0..batches {
            let vars: Vec<f64> = (0..nc).filter_map(|c| slot(b, c).variance()).collect();
            if !vars.is_empty() {
                bvars.push(vars.iter().sum::<f64>() / vars.len() as f64);
            }
            let mut m = Welford::default();
            for c in 0..nc {
                m.merge(slot(b, c));
            }
            if m.n > 0 {
                bmeans.push(m.mean);
            }
        }
        let value = mean_var.sqrt();
        // d(sqrt v) = dv / (2 sqrt v)
        let std_error = batch_mean_se(&bvars) / (2.0 * value);
        entries.push(Uncertainty {
            kind,
            value,
            std_error,
            mean_estimate: pooled_mean.mean,
            mean_std_error: batch_mean_se(&bmeans),
            cells: nc,
            frames: n,
            invalid_samples: invalid[i],
        });
        batch_variances.push(bvars);
    }
    Ok(UncertaintyReport {
        entries,
        batch_variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkernel::{FramePair, Scene};
    use proptest::prelude::*;

    fn calib(gamma: f64, k_opt: f64, mean_p: f64, mean_r: f64) -> CalibrationRecord {
        CalibrationRecord {
            binning_k: 1,
            gamma,
            k_opt,
            nrf: 0.2,
            nrf_std_error: 0.0,
            eta: 0.8,
            mean_probe: mean_p,
            mean_ref: mean_r,
            fano_probe: 1.0,
            fano_probe_std_error: 0.0,
            n_frames_used: 10,
            n_cells: 1,
        }
    }

    fn naive_bin(g: &Grid<u32>, k: usize) -> Grid<u64> {
        Grid::from_fn(g.width / k, g.height / k, |bx, by| {
            let mut s = 0u64;
            for y in by * k..(by + 1) * k {
                for x in bx * k..(bx + 1) * k {
                    s += *g.get(x, y) as u64;
                }
            }
            s
        })
    }

    #[test]
    fn binning_examples() {
        let g = Grid::from_fn(5, 3, |x, y| (x + 10 * y) as u32);
        let id = bin_counts(&g, 1).unwrap();
        assert_eq!(id.data, g.data.iter().map(|&v| v as u64).collect::<Vec<_>>());
        let ones = Grid::filled(2, 2, 1u32);
        assert_eq!(bin_counts(&ones, 2).unwrap(), Grid::from_vec(1, 1, vec![4u64]).unwrap());
        assert!(bin_counts(&ones, 0).is_err());
        assert_eq!(bin_counts(&g, 2).unwrap().width, 2);
        assert_eq!(bin_counts(&g, 2).unwrap().height, 1);
    }

    proptest! {
        #[test]
        fn binning_matches_naive_sum(
            w in 1usize..14, h in 1usize..14, k in 1usize..5,
            seed in proptest::collection::vec(0u32..1000, 196)
        ) {
            let g = Grid::from_fn(w, h, |x, y| seed[(y * 14 + x) % seed.len()]);
            prop_assert_eq!(bin_counts(&g, k).unwrap(), naive_bin(&g, k));
        }
    }

    #[test]
    fn binning_6x6_by_3() {
        let vals = [
            3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9, 3, 2, 3, 8, 4, 6, 2, 6, 4, 3, 3, 8, 3,
            2, 7, 9, 5, 0, 2, 8, 8,
        ];
        let g = Grid::from_vec(6, 6, vals.to_vec()).unwrap();
        assert_eq!(bin_counts(&g, 3).unwrap(), naive_bin(&g, 3));
    }

    #[test]
    fn estimator_examples() {
        let c = calib(1.0, 0.7, 100.0, 100.0);
        let near = |v: f64, e: f64| (v - e).abs() < 1e-12;
        assert!(near(estimate_alpha(99, 100, &c, EstimatorKind::Ratio).unwrap(), 0.01));
        assert!(near(estimate_alpha(99, 100, &c, EstimatorKind::Subtraction).unwrap(), 0.01));
        for k_opt in [0.0, 0.5, 0.81, 1.3] {
            let c = calib(1.0, k_opt, 100.0, 100.0);
            assert!(near(estimate_alpha(99, 100, &c, EstimatorKind::Optimized).unwrap(), 0.01));
        }
        assert!(near(estimate_alpha(99, 7, &c, EstimatorKind::Direct).unwrap(), 0.01));
        assert!(matches!(
            estimate_alpha(5, 0, &c, EstimatorKind::Ratio),
            Err(Error::SingularSample)
        ));
        // Unbalanced arms: gamma rescales the probe.
        let c = calib(2.0, 0.5, 50.0, 100.0);
        assert!(near(estimate_alpha(45, 100, &c, EstimatorKind::Ratio).unwrap(), 0.1));
        assert!(near(estimate_alpha(45, 100, &c, EstimatorKind::Subtraction).unwrap(), 0.1));
    }

    fn stack_from(pairs: Vec<(Vec<u32>, Vec<u32>)>, w: usize, h: usize) -> FrameStack {
        let scene = Scene::new(w, h, 5.0, 5.0, 1.0, 0.81);
        let frames = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (p, r))| {
                FramePair::new(
                    Grid::from_vec(w, h, p).unwrap(),
                    Grid::from_vec(w, h, r).unwrap(),
                    i as u64,
                    0,
                )
                .unwrap()
            })
            .collect();
        FrameStack::new(scene, 0, frames).unwrap()
    }

    #[test]
    fn duplicated_grids_calibrate_perfectly() {
        let frames = (0..6u32)
            .map(|i| {
                let v: Vec<u32> = (0..4).map(|c| 10 + (i * 7 + c * 3) % 5).collect();
                (v.clone(), v)
            })
            .collect();
        let stack = stack_from(frames, 2, 2);
        let c = calibrate(&stack, 1).unwrap();
        assert_eq!(c.nrf, 0.0);
        assert_eq!(c.eta, 1.0);
        assert_eq!(c.gamma, 1.0);
        assert!((c.k_opt - 1.0).abs() < 1e-12);
        assert_eq!(c.n_cells, 4);
    }

    #[test]
    fn calibration_errors() {
        let one = stack_from(vec![(vec![1; 4], vec![1; 4])], 2, 2);
        assert!(matches!(calibrate(&one, 1), Err(Error::Calibration(_))));
        let flat = stack_from(vec![(vec![3; 4], vec![5; 4]), (vec![4; 4], vec![5; 4])], 2, 2);
        assert!(matches!(calibrate(&flat, 1), Err(Error::Calibration(_))));
        let dark = stack_from(vec![(vec![0; 4], vec![1; 4]), (vec![0; 4], vec![2; 4])], 2, 2);
        assert!(matches!(calibrate(&dark, 1), Err(Error::Calibration(_))));
    }

    #[test]
    fn identical_frames_have_zero_uncertainty() {
        let p = vec![90, 95, 100, 105];
        let r = vec![100, 101, 99, 98];
        let stack = stack_from(vec![(p.clone(), r.clone()); 8], 2, 2);
        let c = calib(1.0, 0.8, 100.0, 100.0);
        for kind in EstimatorKind::ALL {
            let u = empirical_uncertainty(&stack, &c, kind, &Roi::new(0, 0, 2, 2)).unwrap();
            assert_eq!(u.value, 0.0, "{kind}");
            assert_eq!(u.cells, 4);
        }
    }

    #[test]
    fn uncertainty_preconditions() {
        let stack = stack_from(vec![(vec![5; 4], vec![5; 4])], 2, 2);
        let c = calib(1.0, 0.8, 5.0, 5.0);
        assert!(empirical_uncertainty(&stack, &c, EstimatorKind::Direct, &Roi::new(0, 0, 2, 2)).is_err());
        let stack = stack_from(vec![(vec![5; 4], vec![5; 4]); 3], 2, 2);
        assert!(empirical_uncertainty(&stack, &c, EstimatorKind::Direct, &Roi::new(0, 0, 0, 2)).is_err());
        assert!(empirical_uncertainty(&stack, &c, EstimatorKind::Direct, &Roi::new(1, 0, 2, 2)).is_err());
    }

    #[test]
    fn roi_cells_select_whole_bins() {
        let roi = Roi::new(1, 0, 5, 4);
        // 6x4 region with k = 2 -> 3x2 bins; x in [1, 6) fully covers bins 1 and 2.
        assert_eq!(roi.cells(6, 4, 2).unwrap(), vec![1, 2, 4, 5]);
        assert!(Roi::new(1, 1, 2, 2).cells(6, 4, 2).is_err());
    }

    #[test]
    fn ratio_singular_cells_are_excluded() {
        let frames = vec![
            (vec![1, 4], vec![0, 5]),
            (vec![2, 5], vec![3, 5]),
            (vec![3, 6], vec![3, 6]),
            (vec![1, 4], vec![2, 4]),
        ];
        let stack = stack_from(frames, 2, 1);
        let c = calib(1.0, 0.8, 3.0, 3.0);
        let u = empirical_uncertainty(&stack, &c, EstimatorKind::Ratio, &Roi::new(0, 0, 2, 1)).unwrap();
        assert_eq!(u.invalid_samples, 1);
        assert!(u.value.is_finite());
    }

    #[test]
    fn welford_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..37).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let mut whole = Welford::default();
        xs.iter().for_each(|&x| whole.push(x));
        let mut a = Welford::default();
        let mut b = Welford::default();
        xs[..13].iter().for_each(|&x| a.push(x));
        xs[13..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - whole.mean).abs() < 1e-12);
        assert!((a.variance().unwrap() - whole.variance().unwrap()).abs() < 1e-12);
    }
}
