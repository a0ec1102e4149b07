//! Post-hoc calibrators mapping a ranker score (and context) to a click
//! probability.

mod confcalib;
mod isotonic;
mod mlplatt;
mod platt;

pub use confcalib::{
    apply_confcalib, fit_confcalib, wilson_interval, ConfCalibModel, ConfCalibPipeline, FieldEntry,
};
pub use isotonic::{fit_smoothed_isotonic, pava, SmoothedIsotonicModel};
pub use mlplatt::{
    fit_mlplatt, fit_mlplatt_with_report, monotonicity_penalty, ContextArch, ContextNet,
    FitReport, MlplattConfig, MlplattModel,
};
pub use platt::{apply_platt, fit_platt, PlattModel};

use crate::container::{kind_of, ModelKind, Persist};
use crate::{Error, Result};

/// One calibration training row: the ranker score of an item together with the
/// listing's context, field value and the item's click label.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub r: f64,
    pub ctx: Vec<f64>,
    pub field: u32,
    pub click: bool,
    pub listing: u64,
}

impl CalibrationRecord {
    pub fn label(&self) -> f64 {
        if self.click {
            1.0
        } else {
            0.0
        }
    }

    /// Same record with the context dropped.
    pub fn without_context(&self) -> Self {
        Self {
            ctx: Vec::new(),
            ..self.clone()
        }
    }
}

pub(crate) fn check_both_classes(records: &[CalibrationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Fit("no calibration records".into()));
    }
    let positives = records.iter().filter(|r| r.click).count();
    if positives == 0 || positives == records.len() {
        return Err(Error::Fit("calibration data contains a single label class".into()));
    }
    Ok(positives as f64 / records.len() as f64)
}

/// A fitted calibrator.
pub trait Calibrator {
    fn predict(&self, record: &CalibrationRecord) -> Result<f64>;

    fn predict_all(&self, records: &[CalibrationRecord]) -> Result<Vec<f64>> {
        records.iter().map(|r| self.predict(r)).collect()
    }
}

/// Any of the supported calibrators, as stored by the benchmark harness.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedCalibrator {
    Platt(PlattModel),
    SmoothedIsotonic(SmoothedIsotonicModel),
    ConfCalib(ConfCalibPipeline),
    Mlplatt(MlplattModel),
}

impl Calibrator for FittedCalibrator {
    fn predict(&self, record: &CalibrationRecord) -> Result<f64> {
        match self {
            FittedCalibrator::Platt(m) => m.predict(record),
            FittedCalibrator::SmoothedIsotonic(m) => m.predict(record),
            FittedCalibrator::ConfCalib(m) => m.predict(record),
            FittedCalibrator::Mlplatt(m) => m.predict(record),
        }
    }

    fn predict_all(&self, records: &[CalibrationRecord]) -> Result<Vec<f64>> {
        match self {
            FittedCalibrator::Mlplatt(m) => m.predict_all(records),
            _ => records.iter().map(|r| self.predict(r)).collect(),
        }
    }
}

impl FittedCalibrator {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            FittedCalibrator::Platt(m) => m.to_bytes(),
            FittedCalibrator::SmoothedIsotonic(m) => m.to_bytes(),
            FittedCalibrator::ConfCalib(m) => m.to_bytes(),
            FittedCalibrator::Mlplatt(m) => m.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(match kind_of(bytes)? {
            ModelKind::Platt => FittedCalibrator::Platt(PlattModel::from_bytes(bytes)?),
            ModelKind::SmoothedIsotonic => {
                FittedCalibrator::SmoothedIsotonic(SmoothedIsotonicModel::from_bytes(bytes)?)
            }
            ModelKind::ConfCalib => {
                FittedCalibrator::ConfCalib(ConfCalibPipeline::from_bytes(bytes)?)
            }
            ModelKind::Mlplatt => FittedCalibrator::Mlplatt(MlplattModel::from_bytes(bytes)?),
            other => {
                return Err(Error::Container(format!("{other:?} is not a calibrator")))
            }
        })
    }
}
