//! Resolution sweeps: noise reduction, uncertainties and quantum enhancement
//! as a function of the bin size, and the resolution at which each
//! twin-beam estimator starts to beat the classical bound.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{calibrate, empirical_uncertainties, CalibrationRecord, Roi};
use crate::imaging::bin_mask;
use crate::physics::{quantum_enhancement, EstimatorKind, LossParams};
use crate::simkernel::FrameStack;

/// Default binning factors of a sweep.
pub const DEFAULT_K_LIST: [usize; 9] = [1, 2, 3, 4, 6, 10, 20, 50, 100];

/// Empirical and analytic figures of one estimator at one binning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub kind: EstimatorKind,
    pub uncertainty: f64,
    pub uncertainty_se: f64,
    pub predicted_uncertainty: f64,
    /// `u(direct) / u(kind)` measured on the sample stack.
    pub enhancement: f64,
    pub enhancement_se: f64,
    pub predicted_enhancement: f64,
    /// Spread of the prediction induced by the heralding-efficiency error.
    pub predicted_enhancement_se: f64,
    pub mean_estimate: f64,
    pub mean_estimate_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub binning_k: usize,
    pub d_object: f64,
    pub x: f64,
    pub nrf_measured: f64,
    pub nrf_se: f64,
    pub eta_measured: f64,
    pub fano_probe: f64,
    pub fano_probe_se: f64,
    /// Detected probe photons per bin without the sample.
    pub n_detected: f64,
    /// Mean absorption of the mask over the analysed bins.
    pub alpha_true: f64,
    pub cells: usize,
    pub kinds: Vec<KindStats>,
}

impl SweepRow {
    pub fn get(&self, kind: EstimatorKind) -> Option<&KindStats> {
        self.kinds.iter().find(|s| s.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Sorted by `d_object`, ascending.
    pub rows: Vec<SweepRow>,
    pub calibration_seed: u64,
    pub sample_seed: u64,
    pub calibrations: Vec<CalibrationRecord>,
}

/// Where a twin-beam estimator first beats the direct one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Advantage {
    /// Enhancement crosses 1 between two rows; `d_min` is interpolated.
    Crossing { d_min: f64 },
    /// Every row already shows an enhancement above 1; `d_min` is the
    /// smallest simulated resolution.
    AllResolutions { d_min: f64 },
    NoAdvantage,
}

impl Advantage {
    pub fn d_min(&self) -> Option<f64> {
        match *self {
            Advantage::Crossing { d_min } | Advantage::AllResolutions { d_min } => Some(d_min),
            Advantage::NoAdvantage => None,
        }
    }
}

fn predicted(kind: EstimatorKind, alpha: f64, n: f64, eta_d: f64, eta: f64) -> Result<(f64, f64)> {
    let p = LossParams::new(alpha, n, eta_d, eta.clamp(0.0, eta_d))?;
    let var = crate::physics::predicted_variance(kind, &p)?;
    Ok((var.sqrt(), quantum_enhancement(kind, &p)?))
}

fn sweep_row(calib_stack: &FrameStack, sample_stack: &FrameStack, k: usize, roi: &Roi) -> Result<(SweepRow, CalibrationRecord)> {
    let scene = sample_stack.scene();
    let calib = calibrate(calib_stack, k)?;
    let report = empirical_uncertainties(sample_stack, &calib, &EstimatorKind::ALL, roi)?;

    let cells = roi.cells(scene.grid_w, scene.grid_h, k)?;
    let truth = bin_mask(&scene.mask, k)?;
    let alpha_true = cells.iter().map(|&c| truth.data[c]).sum::<f64>() / cells.len() as f64;
    let eta_d = scene.eta_d_probe;
    let n = calib.mean_probe;

    let mut kinds = Vec::with_capacity(EstimatorKind::ALL.len());
    for kind in EstimatorKind::ALL {
        let u = report.get(kind).expect("all kinds evaluated");
        let (enhancement, enhancement_se) = report
            .enhancement(kind, EstimatorKind::Direct)
            .expect("all kinds evaluated");
        let (pu, pe) = predicted(kind, alpha_true, n, eta_d, calib.eta)?;
        let (_, lo) = predicted(kind, alpha_true, n, eta_d, calib.eta - calib.nrf_std_error)?;
        let (_, hi) = predicted(kind, alpha_true, n, eta_d, calib.eta + calib.nrf_std_error)?;
        kinds.push(KindStats {
            kind,
            uncertainty: u.value,
            uncertainty_se: u.std_error,
            predicted_uncertainty: pu,
            enhancement,
            enhancement_se: if kind == EstimatorKind::Direct { 0.0 } else { enhancement_se },
            predicted_enhancement: pe,
            predicted_enhancement_se: (hi - lo).abs() / 2.0,
            mean_estimate: u.mean_estimate,
            mean_estimate_se: u.mean_std_error,
        });
    }
    let row = SweepRow {
        binning_k: k,
        d_object: k as f64 * scene.pixel_pitch,
        x: scene.x_for_binning(k),
        nrf_measured: calib.nrf,
        nrf_se: calib.nrf_std_error,
        eta_measured: calib.eta,
        fano_probe: calib.fano_probe,
        fano_probe_se: calib.fano_probe_std_error,
        n_detected: n,
        alpha_true,
        cells: cells.len(),
        kinds,
    };
    Ok((row, calib))
}

/// Calibrate and evaluate every estimator at each binning in `k_list`.
///
/// Both stacks are re-binned, never regenerated, so all rows share the same
/// photon realisations.
pub fn resolution_sweep(calib_stack: &FrameStack, sample_stack: &FrameStack, k_list: &[usize], roi: &Roi) -> Result<SweepResult> {
    if !calib_stack.scene().same_apparatus(sample_stack.scene()) {
        return Err(Error::config("calibration and sample stacks come from different scenes"));
    }
    if k_list.is_empty() {
        return Err(Error::config("k_list is empty"));
    }
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    if ks.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("k_list contains duplicates"));
    }
    let results = ks
        .par_iter()
        .map(|&k| sweep_row(calib_stack, sample_stack, k, roi))
        .collect::<Result<Vec<_>>>()?;
    let (rows, calibrations) = results.into_iter().unzip();
    Ok(SweepResult {
        rows,
        calibration_seed: calib_stack.global_seed(),
        sample_seed: sample_stack.global_seed(),
        calibrations,
    })
}

/// Smallest resolution at which `kind` beats the direct estimator, linearly
/// interpolated in `(d, enhancement)`.
pub fn advantage_crossover(sweep: &SweepResult, kind: EstimatorKind) -> Result<Advantage> {
    if sweep.rows.len() < 3 {
        return Err(Error::domain(format!(
            "crossover needs at least 3 sweep rows, got {}",
            sweep.rows.len()
        )));
    }
    let pts = sweep
        .rows
        .iter()
        .map(|r| {
            r.get(kind)
                .map(|s| (r.d_object, s.enhancement))
                .ok_or_else(|| Error::domain(format!("sweep has no {kind} column")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(match pts.iter().position(|&(_, e)| e > 1.0) {
        None => Advantage::NoAdvantage,
        Some(0) => Advantage::AllResolutions { d_min: pts[0].0 },
        Some(i) => {
            let ((d0, e0), (d1, e1)) = (pts[i - 1], pts[i]);
            Advantage::Crossing {
                d_min: d0 + (1.0 - e0) * (d1 - d0) / (e1 - e0),
            }
        }
    })
}

/// Column names of the CSV export, in order.
pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "binning_k",
        "d_object",
        "x",
        "nrf_measured",
        "nrf_se",
        "eta_measured",
        "fano_probe",
        "fano_probe_se",
        "n_detected",
        "alpha_true",
        "cells",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for kind in EstimatorKind::ALL {
        for col in [
            "uncertainty",
            "uncertainty_se",
            "predicted_uncertainty",
            "enhancement",
            "enhancement_se",
            "predicted_enhancement",
            "predicted_enhancement_se",
            "mean_estimate",
            "mean_estimate_se",
        ] {
            h.push(format!("{col}_{}", kind.name()));
        }
    }
    h
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::domain(format!("csv: {e}"));
        w.write_record(csv_header()).map_err(to_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.binning_k.to_string(),
                r.d_object.to_string(),
                r.x.to_string(),
                r.nrf_measured.to_string(),
                r.nrf_se.to_string(),
                r.eta_measured.to_string(),
                r.fano_probe.to_string(),
                r.fano_probe_se.to_string(),
                r.n_detected.to_string(),
                r.alpha_true.to_string(),
                r.cells.to_string(),
            ];
            for kind in EstimatorKind::ALL {
                let s = r
                    .get(kind)
                    .ok_or_else(|| Error::domain(format!("row k={} lacks {kind}", r.binning_k)))?;
                rec.extend(
                    [
                        s.uncertainty,
                        s.uncertainty_se,
                        s.predicted_uncertainty,
                        s.enhancement,
                        s.enhancement_se,
                        s.predicted_enhancement,
                        s.predicted_enhancement_se,
                        s.mean_estimate,
                        s.mean_estimate_se,
                    ]
                    .iter()
                    .map(f64::to_string),
                );
            }
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::domain(format!("csv: {e}")))?;
        Ok(())
    }
}
