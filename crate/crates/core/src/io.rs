//! CSV schemas.
//!
//! Trajectory: `t,u_1..u_d,v_1..v_d,phi,energy,reaction_norm,active,fp_iters`.
//! Impacts: `t,x_1..x_d,measured_e,tangential_error,energy_jump`.
//! Convergence: `h,sup_err,impact_time_err,measured_e_err`.
//!
//! Floats are written in scientific notation with 17 significant digits so
//! every `f64` survives a write/read cycle bit for bit. Missing values are `NaN`.

use std::io::{Read, Write};

use thiserror::Error;

use crate::analysis::{ConvergenceReport, ImpactReport};
use crate::geometry::{ConstraintSpec, GeometryError, MetricField};
use crate::scheme::Trajectory;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("malformed CSV: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| IoError::Format(format!("not a number: {s:?}")))
}

/// One trajectory CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub phi: f64,
    pub energy: f64,
    pub reaction_norm: f64,
    pub active: bool,
    pub fp_iters: usize,
}

impl TrajectoryRow {
    fn bit_eq(&self, other: &Self) -> bool {
        let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
        same(self.t, other.t)
            && self.u.len() == other.u.len()
            && self.u.iter().zip(&other.u).all(|(a, b)| same(*a, *b))
            && self.v.len() == other.v.len()
            && self.v.iter().zip(&other.v).all(|(a, b)| same(*a, *b))
            && same(self.phi, other.phi)
            && same(self.energy, other.energy)
            && same(self.reaction_norm, other.reaction_norm)
            && self.active == other.active
            && self.fp_iters == other.fp_iters
    }
}

/// Tabular view of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub dim: usize,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryTable {
    pub fn from_trajectory(
        traj: &Trajectory,
        cs: &ConstraintSpec,
        metric: &MetricField,
    ) -> Result<Self> {
        let rows = traj
            .samples
            .iter()
            .map(|s| {
                let local = metric.at(&s.u)?;
                let (reaction_norm, active, fp_iters) = s
                    .step
                    .as_ref()
                    .map_or((0.0, false, 0), |d| (d.reaction_norm, d.active, d.fp_iters));
                Ok(TrajectoryRow {
                    t: s.t,
                    u: s.u.as_slice().to_vec(),
                    v: s.v.as_slice().to_vec(),
                    phi: cs.phi(&s.u),
                    energy: 0.5 * local.tangent_inner(&s.v, &s.v),
                    reaction_norm,
                    active,
                    fp_iters,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: traj.dim,
            rows,
        })
    }

    /// Exact equality including the bit patterns of `NaN`s and signed zeros.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.bit_eq(b))
    }

    pub fn header(dim: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=dim).map(|i| format!("u_{i}")));
        h.extend((1..=dim).map(|i| format!("v_{i}")));
        h.extend(["phi", "energy", "reaction_norm", "active", "fp_iters"].map(String::from));
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::header(self.dim))?;
        for r in &self.rows {
            let mut rec = vec![format_float(r.t)];
            rec.extend(r.u.iter().map(|x| format_float(*x)));
            rec.extend(r.v.iter().map(|x| format_float(*x)));
            rec.push(format_float(r.phi));
            rec.push(format_float(r.energy));
            rec.push(format_float(r.reaction_norm));
            rec.push(u8::from(r.active).to_string());
            rec.push(r.fp_iters.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if header.len() < 7 || !(header.len() - 6).is_multiple_of(2) {
            return Err(IoError::Format(format!("unexpected header {header:?}")));
        }
        let dim = (header.len() - 6) / 2;
        if header != Self::header(dim) {
            return Err(IoError::Format(format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let f = |i: usize| parse_float(&rec[i]);
            let u = (1..=dim).map(f).collect::<Result<Vec<_>>>()?;
            let v = (dim + 1..=2 * dim).map(f).collect::<Result<Vec<_>>>()?;
            let base = 2 * dim + 1;
            let active = match rec[base + 3].trim() {
                "0" => false,
                "1" => true,
                other => return Err(IoError::Format(format!("active flag {other:?}"))),
            };
            let fp_iters = rec[base + 4]
                .trim()
                .parse()
                .map_err(|_| IoError::Format(format!("fp_iters {:?}", &rec[base + 4])))?;
            rows.push(TrajectoryRow {
                t: f(0)?,
                u,
                v,
                phi: f(base)?,
                energy: f(base + 1)?,
                reaction_norm: f(base + 2)?,
                active,
                fp_iters,
            });
        }
        Ok(Self { dim, rows })
    }
}

pub fn impacts_header(dim: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=dim).map(|i| format!("x_{i}")));
    h.extend(["measured_e", "tangential_error", "energy_jump"].map(String::from));
    h
}

pub fn write_impacts_csv<W: Write>(report: &ImpactReport, dim: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(impacts_header(dim))?;
    for ev in &report.events {
        let mut rec = vec![format_float(ev.t)];
        rec.extend(ev.x.iter().map(|x| format_float(*x)));
        rec.push(format_float(ev.measured_e.unwrap_or(f64::NAN)));
        rec.push(format_float(ev.tangential_error));
        rec.push(format_float(ev.energy_jump));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_convergence_csv<W: Write>(report: &ConvergenceReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["h", "sup_err", "impact_time_err", "measured_e_err"])?;
    let opt = |x: Option<f64>| format_float(x.unwrap_or(f64::NAN));
    for row in &report.rows {
        w.write_record([
            format_float(row.h),
            opt(row.sup_err),
            opt(row.impact_time_err),
            opt(row.measured_e_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}
