//! The augmented moment stack across real and auxiliary data sources.
//!
//! Each observation carries a labeled indicator `s`, the real pair `(x, y)`
//! when labeled, and one `(x, y)` pair per auxiliary source. With `M`
//! auxiliary sources the stacked moment vector has `p(1 + 2M)` rows:
//!
//! - block 0: `s * psi(theta; x, y)` on the real pair,
//! - blocks `1..=M`: `s * psi(eta_i; x_i, y_i)` on auxiliary source `i`,
//! - blocks `M+1..=2M`: `psi(eta_i; x_i, y_i)` unmasked, over all rows.
//!
//! The masked auxiliary copies live on the same rows as the real moments, so
//! the moment covariance can pick up correlations between real and auxiliary
//! residuals; the unmasked copies pin each `eta_i` using every row.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moments::{evaluate_psi, psi_jacobian, MomentModel};

/// A covariate vector paired with an outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct XyPair {
    pub x: DVector<f64>,
    pub y: f64,
}

impl XyPair {
    pub fn new(x: DVector<f64>, y: f64) -> Self {
        Self { x, y }
    }
}

/// One row of the joint draw: labeled indicator, optional real pair, and a
/// fixed number of auxiliary pairs.
///
/// The real pair is structurally absent on unlabeled rows (no sentinel
/// values), so masked moments cannot accidentally read unlabeled data.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRecord {
    pub id: String,
    pub real: Option<XyPair>,
    pub aux: Vec<XyPair>,
}

impl ObservationRecord {
    pub fn labeled(id: impl Into<String>, real: XyPair, aux: Vec<XyPair>) -> Self {
        Self {
            id: id.into(),
            real: Some(real),
            aux,
        }
    }

    pub fn unlabeled(id: impl Into<String>, aux: Vec<XyPair>) -> Self {
        Self {
            id: id.into(),
            real: None,
            aux,
        }
    }

    #[inline]
    pub fn is_labeled(&self) -> bool {
        self.real.is_some()
    }

    /// The indicator `s` as 0.0 or 1.0.
    #[inline]
    pub fn indicator(&self) -> f64 {
        if self.real.is_some() {
            1.0
        } else {
            0.0
        }
    }

    pub fn num_aux(&self) -> usize {
        self.aux.len()
    }
}

/// Which `(x, y)` pair feeds a moment block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Real,
    /// Auxiliary source index, 0-based.
    Aux(usize),
}

/// Which parameter vector a moment block is evaluated at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    Target,
    /// Auxiliary parameter index, 0-based.
    Aux(usize),
}

/// Layout of one `p`-row block of the stacked moment vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDescriptor {
    /// Whether the block is multiplied by the labeled indicator.
    pub masked: bool,
    pub source: DataSource,
    pub param: ParamSlot,
}

/// The stacked moment system: one moment model applied to the real source
/// and `M` auxiliary sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentedSystem {
    pub model: MomentModel,
    /// Number of auxiliary sources `M`.
    pub num_aux: usize,
}

impl AugmentedSystem {
    pub fn new(model: MomentModel, num_aux: usize) -> Self {
        Self { model, num_aux }
    }

    /// Rows of the stacked moment vector: `p(1 + 2M)`.
    #[inline]
    pub fn total_moments(&self) -> usize {
        self.model.num_moments() * (1 + 2 * self.num_aux)
    }

    /// Length of the flat parameter vector: `d(1 + M)`.
    #[inline]
    pub fn total_params(&self) -> usize {
        self.model.num_params() * (1 + self.num_aux)
    }

    /// Block layout in stacking order.
    pub fn block_layout(&self) -> Vec<BlockDescriptor> {
        let mut layout = Vec::with_capacity(1 + 2 * self.num_aux);
        layout.push(BlockDescriptor {
            masked: true,
            source: DataSource::Real,
            param: ParamSlot::Target,
        });
        for i in 0..self.num_aux {
            layout.push(BlockDescriptor {
                masked: true,
                source: DataSource::Aux(i),
                param: ParamSlot::Aux(i),
            });
        }
        for i in 0..self.num_aux {
            layout.push(BlockDescriptor {
                masked: false,
                source: DataSource::Aux(i),
                param: ParamSlot::Aux(i),
            });
        }
        layout
    }

    /// Checks that a record conforms to this system: `M` auxiliary pairs,
    /// every vector of length `d`, finite auxiliary outcomes.
    pub fn validate_record(&self, record: &ObservationRecord) -> Result<()> {
        let d = self.model.d;
        if record.aux.len() != self.num_aux {
            return Err(Error::structure(format!(
                "record {} has {} auxiliary pairs, system expects {}",
                record.id,
                record.aux.len(),
                self.num_aux
            )));
        }
        if let Some(real) = &record.real {
            if real.x.len() != d {
                return Err(Error::structure(format!(
                    "record {}: real covariate length {} != d = {}",
                    record.id,
                    real.x.len(),
                    d
                )));
            }
        }
        for (i, pair) in record.aux.iter().enumerate() {
            if pair.x.len() != d {
                return Err(Error::structure(format!(
                    "record {}: auxiliary source {} covariate length {} != d = {}",
                    record.id,
                    i,
                    pair.x.len(),
                    d
                )));
            }
        }
        Ok(())
    }

    /// Validates an entire dataset; a mixed number of auxiliary sources is
    /// rejected because the block layout must be fixed.
    pub fn validate_dataset(&self, dataset: &[ObservationRecord]) -> Result<()> {
        for record in dataset {
            self.validate_record(record)?;
        }
        Ok(())
    }
}

/// The target parameter and one auxiliary parameter per source, with a flat
/// view in the order `(theta, eta_1, ..., eta_M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedParameters {
    pub theta: DVector<f64>,
    pub etas: Vec<DVector<f64>>,
}

impl PackedParameters {
    pub fn new(theta: DVector<f64>, etas: Vec<DVector<f64>>) -> Self {
        Self { theta, etas }
    }

    /// All-zero parameters for a system.
    pub fn zeros(system: &AugmentedSystem) -> Self {
        let d = system.model.d;
        Self {
            theta: DVector::zeros(d),
            etas: vec![DVector::zeros(d); system.num_aux],
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + self.etas.iter().map(|e| e.len()).sum::<usize>()
    }

    /// Flat view `(theta, eta_1, ..., eta_M)`.
    pub fn flatten(&self) -> DVector<f64> {
        let mut flat = DVector::zeros(self.dim());
        let d = self.theta.len();
        flat.rows_mut(0, d).copy_from(&self.theta);
        let mut offset = d;
        for eta in &self.etas {
            flat.rows_mut(offset, eta.len()).copy_from(eta);
            offset += eta.len();
        }
        flat
    }

    /// Inverse of [`flatten`](Self::flatten) for a given system shape.
    pub fn from_flat(system: &AugmentedSystem, flat: &DVector<f64>) -> Result<Self> {
        let d = system.model.d;
        if flat.len() != system.total_params() {
            return Err(Error::structure(format!(
                "flat parameter length {} != d(1+M) = {}",
                flat.len(),
                system.total_params()
            )));
        }
        let theta = flat.rows(0, d).into_owned();
        let etas = (0..system.num_aux)
            .map(|i| flat.rows(d * (i + 1), d).into_owned())
            .collect();
        Ok(Self { theta, etas })
    }

    fn check_shape(&self, system: &AugmentedSystem) -> Result<()> {
        let d = system.model.d;
        if self.theta.len() != d || self.etas.len() != system.num_aux {
            return Err(Error::structure(format!(
                "parameters have theta length {} and {} auxiliary vectors; system expects d = {} and M = {}",
                self.theta.len(),
                self.etas.len(),
                d,
                system.num_aux
            )));
        }
        if let Some(eta) = self.etas.iter().find(|e| e.len() != d) {
            return Err(Error::structure(format!(
                "auxiliary parameter length {} != d = {}",
                eta.len(),
                d
            )));
        }
        Ok(())
    }
}

/// Stacked moment vector `g_t` for one record; `p(1 + 2M)` entries.
///
/// Masked blocks are exact zero vectors on unlabeled rows.
pub fn build_augmented_moments(
    system: &AugmentedSystem,
    record: &ObservationRecord,
    params: &PackedParameters,
) -> Result<DVector<f64>> {
    system.validate_record(record)?;
    params.check_shape(system)?;
    let p = system.model.num_moments();
    let m = system.num_aux;
    let mut g = DVector::zeros(system.total_moments());

    if let Some(real) = &record.real {
        let psi = evaluate_psi(&system.model, &params.theta, &real.x, real.y)?;
        g.rows_mut(0, p).copy_from(&psi);
    }
    let labeled = record.is_labeled();
    for i in 0..m {
        let pair = &record.aux[i];
        let psi = evaluate_psi(&system.model, &params.etas[i], &pair.x, pair.y)?;
        if labeled {
            g.rows_mut(p * (1 + i), p).copy_from(&psi);
        }
        g.rows_mut(p * (1 + m + i), p).copy_from(&psi);
    }
    Ok(g)
}

/// Jacobian of the stacked moments with respect to the flat parameters;
/// `p(1 + 2M)` by `d(1 + M)`. Cross-parameter blocks are exactly zero.
pub fn augmented_jacobian(
    system: &AugmentedSystem,
    record: &ObservationRecord,
    params: &PackedParameters,
) -> Result<DMatrix<f64>> {
    system.validate_record(record)?;
    params.check_shape(system)?;
    let p = system.model.num_moments();
    let d = system.model.num_params();
    let m = system.num_aux;
    let mut jac = DMatrix::zeros(system.total_moments(), system.total_params());

    if let Some(real) = &record.real {
        let block = psi_jacobian(&system.model, &params.theta, &real.x, real.y)?;
        jac.view_mut((0, 0), (p, d)).copy_from(&block);
    }
    let labeled = record.is_labeled();
    for i in 0..m {
        let pair = &record.aux[i];
        let block = psi_jacobian(&system.model, &params.etas[i], &pair.x, pair.y)?;
        let col = d * (1 + i);
        if labeled {
            jac.view_mut((p * (1 + i), col), (p, d)).copy_from(&block);
        }
        jac.view_mut((p * (1 + m + i), col), (p, d)).copy_from(&block);
    }
    Ok(jac)
}

/// Arithmetic mean of the stacked moments over all `T` records.
///
/// Unlabeled records contribute zeros to the masked blocks; the divisor is
/// always `T`, so the masked population conditions are `E[s * psi] = 0`.
pub fn sample_mean_moments(
    system: &AugmentedSystem,
    dataset: &[ObservationRecord],
    params: &PackedParameters,
) -> Result<DVector<f64>> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot average moments over an empty dataset"));
    }
    let mut sum = DVector::zeros(system.total_moments());
    for record in dataset {
        sum += build_augmented_moments(system, record, params)?;
    }
    Ok(sum / dataset.len() as f64)
}

/// Arithmetic mean of the stacked Jacobians over all records.
pub fn sample_mean_jacobian(
    system: &AugmentedSystem,
    dataset: &[ObservationRecord],
    params: &PackedParameters,
) -> Result<DMatrix<f64>> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot average Jacobians over an empty dataset"));
    }
    let mut sum = DMatrix::zeros(system.total_moments(), system.total_params());
    for record in dataset {
        sum += augmented_jacobian(system, record, params)?;
    }
    Ok(sum / dataset.len() as f64)
}
