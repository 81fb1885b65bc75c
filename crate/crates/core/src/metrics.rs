//! Rollout diagnostics: error and correlation against a reference,
//! conserved quantities, radially binned spectra and CSV export.

use std::path::Path;

use serde::Serialize;

use crate::dataset::{State, Task};
use crate::error::{Error, Result};
use crate::grid::{divergence, interpolate_to_centers, Boundary, Field, GridSpec};
use crate::rollout::RolloutRecord;
use crate::solvers::swe::SweParams;
use crate::spectral::{signed_k, Fft2};
use crate::train::csv_error;

pub const HIGH_CORRELATION: f64 = 0.8;

fn same_shape(a: &Field, b: &Field, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `RMSE(pred, ref) / RMS(ref)`.
pub fn nrmse(pred: &Field, reference: &Field) -> Result<f64> {
    same_shape(pred, reference, "nrmse")?;
    let n = pred.len() as f64;
    let rms = (reference.sum_sq() / n).sqrt();
    if !(rms > 0.0) {
        return Err(Error::Data("NRMSE against a reference with zero RMS".into()));
    }
    let mse = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / n;
    Ok(mse.sqrt() / rms)
}

pub fn pearson(a: &Field, b: &Field) -> Result<f64> {
    same_shape(a, b, "pearson")?;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::Data("correlation of a constant field".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Time of the first sample below `threshold`, or the last time if none is.
pub fn high_correlation_time(series: &[f64], times: &[f64], threshold: f64) -> Result<f64> {
    if series.is_empty() || series.len() != times.len() {
        return Err(Error::Data(
            "correlation series must be non-empty and match its times".into(),
        ));
    }
    Ok(series
        .iter()
        .position(|&r| r < threshold)
        .map_or(times[times.len() - 1], |i| times[i]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Conservation {
    /// `dx²·Σ(d + ζ)`, or the largest cell divergence for incompressible flow.
    pub mass: f64,
    pub mom_u: f64,
    pub mom_v: f64,
    pub energy: f64,
}

pub fn conservation(state: &State, grid: &GridSpec, swe: Option<&SweParams>) -> Result<Conservation> {
    let area = grid.dx * grid.dx;
    match state {
        State::Swe(s) => {
            let p = swe.ok_or_else(|| Error::Config("shallow-water diagnostics need solver parameters".into()))?;
            let (uc, vc) = interpolate_to_centers(&s.u, &s.v, grid)?;
            let mut energy = 0.0;
            for i in 0..s.zeta.len() {
                let z = s.zeta.data()[i];
                let h = p.depth + z;
                let (u, v) = (uc.data()[i], vc.data()[i]);
                energy += 0.5 * p.gravity * z * z + 0.5 * h * (u * u + v * v);
            }
            Ok(Conservation {
                mass: area * s.zeta.data().iter().map(|z| p.depth + z).sum::<f64>(),
                mom_u: s.u.sum(),
                mom_v: s.v.sum(),
                energy: area * energy,
            })
        }
        State::Ins(s) => Ok(Conservation {
            mass: divergence(&s.u, &s.v, grid)?.max_abs(),
            mom_u: s.u.sum(),
            mom_v: s.v.sum(),
            energy: 0.5 * area * (s.u.sum_sq() + s.v.sum_sq()),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    /// Power in unit-width bins of `round(|k|)`, `k` in integer wavenumbers.
    pub power: Vec<f64>,
}

impl Spectrum {
    pub fn bins(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.power.iter().copied().enumerate()
    }

    pub fn add(&mut self, other: &Spectrum) {
        for (a, b) in self.power.iter_mut().zip(&other.power) {
            *a += b;
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["bin_k", "value", "k5_scaled_value"])
            .map_err(|e| csv_error(path, e))?;
        for (k, p) in self.bins() {
            let scaled = p * (k as f64).powi(5);
            w.write_record([k.to_string(), p.to_string(), scaled.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_spectral_grid(grid: &GridSpec) -> Result<()> {
    if grid.bc != Boundary::Periodic || !grid.is_square() {
        return Err(Error::Unsupported("spectra need a periodic square grid".into()));
    }
    Ok(())
}

/// `|F_k|² / N²` for every mode, indexed `ky * cols + kx`; sums to the mean
/// of `f²`.
pub fn mode_power(f: &Field) -> Vec<f64> {
    let n2 = (f.len() * f.len()) as f64;
    Fft2::new(f.rows(), f.cols())
        .forward(f)
        .iter()
        .map(|c| c.norm_sqr() / n2)
        .collect()
}

pub fn radial_spectrum(f: &Field) -> Spectrum {
    let (rows, cols) = f.shape();
    let p = mode_power(f);
    let kmax = ((rows / 2).pow(2) as f64 + (cols / 2).pow(2) as f64).sqrt().round() as usize;
    let mut power = vec![0.0; kmax + 1];
    for ky in 0..rows {
        let sy = signed_k(ky, rows) as f64;
        for kx in 0..cols {
            let sx = signed_k(kx, cols) as f64;
            let bin = (sx * sx + sy * sy).sqrt().round() as usize;
            power[bin] += p[ky * cols + kx];
        }
    }
    Spectrum { power }
}

/// Sum of the spectra of the cell-centred velocity components.
pub fn velocity_spectrum(u: &Field, v: &Field, grid: &GridSpec) -> Result<Spectrum> {
    check_spectral_grid(grid)?;
    let (uc, vc) = interpolate_to_centers(u, v, grid)?;
    let mut s = radial_spectrum(&uc);
    s.add(&radial_spectrum(&vc));
    Ok(s)
}

/// Spectrum of the cell-centred kinetic energy density `½|u|²`.
pub fn energy_spectrum(u: &Field, v: &Field, grid: &GridSpec) -> Result<Spectrum> {
    check_spectral_grid(grid)?;
    let (uc, vc) = interpolate_to_centers(u, v, grid)?;
    Ok(radial_spectrum(&uc.zip_map(&vc, |a, b| 0.5 * (a * a + b * b))?))
}

pub fn field_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Swe => &["zeta", "u", "v"],
        Task::Ins => &["u", "v"],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub time: f64,
    /// One entry per state field.
    pub nrmse: Vec<f64>,
    pub rho: Vec<f64>,
    pub conservation: Conservation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMetrics {
    pub task: Task,
    /// Steps `1..` of the record; step 0 is the shared initial condition.
    pub steps: Vec<StepMetrics>,
    pub diverged_at: Option<usize>,
}

/// Compares a record with the reference trajectory from the same initial
/// condition.
pub fn rollout_metrics(
    record: &RolloutRecord,
    reference: &[State],
    dt: f64,
    grid: &GridSpec,
    swe: Option<&SweParams>,
) -> Result<RolloutMetrics> {
    let first = record
        .states
        .first()
        .ok_or_else(|| Error::Data("empty rollout record".into()))?;
    let task = first.task();
    let mut steps = Vec::new();
    for (t, (p, r)) in record.states.iter().zip(reference).enumerate().skip(1) {
        let (pf, rf) = (p.fields(), r.fields());
        let mut nr = Vec::with_capacity(pf.len());
        let mut rho = Vec::with_capacity(pf.len());
        for (a, b) in pf.iter().zip(&rf) {
            nr.push(nrmse(a, b)?);
            rho.push(pearson(a, b)?);
        }
        steps.push(StepMetrics {
            step: t,
            time: t as f64 * dt,
            nrmse: nr,
            rho,
            conservation: conservation(p, grid, swe)?,
        });
    }
    Ok(RolloutMetrics {
        task,
        steps,
        diverged_at: record.diverged_at,
    })
}

fn metric_header(task: Task) -> Vec<String> {
    let names = field_names(task);
    let mut h = vec!["step".to_string(), "time".to_string()];
    h.extend(names.iter().map(|n| format!("nrmse_{n}")));
    h.extend(names.iter().map(|n| format!("rho_{n}")));
    h.extend(["mass", "mom_u", "mom_v", "energy"].map(String::from));
    h
}

fn metric_values(s: &StepMetrics) -> Vec<f64> {
    let c = &s.conservation;
    s.nrmse
        .iter()
        .chain(&s.rho)
        .copied()
        .chain([c.mass, c.mom_u, c.mom_v, c.energy])
        .collect()
}

impl RolloutMetrics {
    /// Mean NRMSE over the first `steps` steps and the given field indices.
    pub fn mean_nrmse(&self, steps: usize, fields: &[usize]) -> Option<f64> {
        if self.steps.len() < steps || steps == 0 || fields.is_empty() {
            return None;
        }
        let total: f64 = self.steps[..steps]
            .iter()
            .map(|s| fields.iter().map(|&k| s.nrmse[k]).sum::<f64>())
            .sum();
        Some(total / (steps * fields.len()) as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(metric_header(self.task))
            .map_err(|e| csv_error(path, e))?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string(), s.time.to_string()];
            row.extend(metric_values(s).iter().map(f64::to_string));
            w.write_record(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub step: usize,
    pub time: f64,
    /// Records still running at this step.
    pub count: usize,
    /// Records that had diverged by this step.
    pub diverged: usize,
    pub mean: Vec<f64>,
    /// Standard error of the mean (`s / √n`, zero for a single record).
    pub sem: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub task: Task,
    pub rows: Vec<AggregateRow>,
}

/// Mean and standard error over initial conditions, step by step. Diverged
/// records only add to the divergence count once they stop.
pub fn aggregate(records: &[RolloutMetrics]) -> Result<Aggregate> {
    let task = records
        .first()
        .ok_or_else(|| Error::Data("nothing to aggregate".into()))?
        .task;
    let len = records.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(len);
    for i in 0..len {
        let live: Vec<&StepMetrics> = records.iter().filter_map(|r| r.steps.get(i)).collect();
        let step = live[0].step;
        let diverged = records
            .iter()
            .filter(|r| r.diverged_at.is_some_and(|d| d <= step))
            .count();
        let vals: Vec<Vec<f64>> = live.iter().map(|s| metric_values(s)).collect();
        let n = vals.len() as f64;
        let width = vals[0].len();
        let mut mean = vec![0.0; width];
        let mut sem = vec![0.0; width];
        for j in 0..width {
            let m = vals.iter().map(|v| v[j]).sum::<f64>() / n;
            mean[j] = m;
            if vals.len() > 1 {
                let var = vals.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
                sem[j] = (var / n).sqrt();
            }
        }
        rows.push(AggregateRow {
            step,
            time: live[0].time,
            count: vals.len(),
            diverged,
            mean,
            sem,
        });
    }
    Ok(Aggregate { task, rows })
}

impl Aggregate {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let base = metric_header(self.task);
        let mut header = vec![
            "step".to_string(),
            "time".to_string(),
            "count".into(),
            "diverged".into(),
        ];
        for name in &base[2..] {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_sem"));
        }
        w.write_record(header).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            let mut row = vec![
                r.step.to_string(),
                r.time.to_string(),
                r.count.to_string(),
                r.diverged.to_string(),
            ];
            for (m, s) in r.mean.iter().zip(&r.sem) {
                row.push(m.to_string());
                row.push(s.to_string());
            }
            w.write_record(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
