//! CSV emission (and re-parsing) for every harness output.

use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::pipeline::BasisNet;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// One row of the disturbance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbRow {
    pub kind_or_layer: String,
    pub accuracy: f64,
    pub delta_vs_correct: f64,
}

/// One exported coefficient. Layers are backbone indices; shared layers are
/// absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub image_id: usize,
    pub label: usize,
    pub layer: usize,
    pub basis: usize,
    pub coefficient: f64,
}

/// Predicted coefficients of every image in `data`, image-major.
pub fn export_coefficients(model: &BasisNet, data: &Dataset) -> Result<Vec<CoefficientRow>> {
    let layers = model.bank.dynamic_layers();
    let per_image: Vec<Vec<CoefficientRow>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let alpha = model.coefficients(&data.image(i))?;
            let mut rows = Vec::with_capacity(layers.len() * alpha.cols());
            for &layer in &layers {
                let k = model.bank.coefficient_row(layer).expect("dynamic layer has a row");
                let k = k.min(alpha.rows() - 1);
                for (basis, &c) in alpha.row(k).iter().enumerate() {
                    rows.push(CoefficientRow {
                        image_id: i,
                        label: data.label(i),
                        layer,
                        basis,
                        coefficient: c,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}
