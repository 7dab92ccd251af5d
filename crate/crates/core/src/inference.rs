//! Asymptotic covariance matrices and confidence intervals.
//!
//! For a GMM estimator with mean-moment Jacobian `G`, weight `W`, and moment
//! covariance `F`, the asymptotic covariance is the sandwich
//!
//! `V = (G'WG)^-1 G'W F WG (G'WG)^-1`,
//!
//! which under the optimal weight `W = F^-1` simplifies to
//! `V = (G'F^-1 G)^-1`. A second, independent route to the target-parameter
//! block goes through the partitioned inverse of `F`: with moments split
//! into target residuals `m` and auxiliary residuals `h`,
//!
//! `F^-1 = [[A, B], [B', D]]`,
//! `A = (E[mm'] - E[mh'] E[hh']^-1 E[hm'])^-1`,
//! `B = -A E[mh'] E[hh']^-1`,
//!
//! and the target block of `(G'F^-1 G)^-1` follows from one more Schur
//! complement. `A^-1` is the residual variance of a regression of `m` on the
//! span of `h`: uninformative auxiliary moments leave the target variance
//! unchanged, informative ones shrink it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gmm::{invert_weight, SolverConfig, WeightMatrix};

/// Population moment covariance, estimated by the outer-product matrix at
/// the final parameter estimate.
#[derive(Clone, Debug)]
pub struct MomentCovariance {
    values: DMatrix<f64>,
}

impl MomentCovariance {
    /// Wraps a symmetric matrix; asymmetry beyond `1e-8 * scale` is rejected.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&values, 1e-8)?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Mean augmented Jacobian at the final estimate. Block-diagonal across
/// (target, auxiliary) parameters by construction.
#[derive(Clone, Debug)]
pub struct JacobianG {
    values: DMatrix<f64>,
}

impl JacobianG {
    /// Wraps the mean Jacobian of a `p(1+2M) x d(1+M)` augmented system,
    /// checking that every cross-parameter block is exactly zero.
    pub fn new(values: DMatrix<f64>, p: usize, d: usize, num_aux: usize) -> Result<Self> {
        let (rows, cols) = (p * (1 + 2 * num_aux), d * (1 + num_aux));
        if values.nrows() != rows || values.ncols() != cols {
            return Err(Error::structure(format!(
                "Jacobian is {}x{}, expected {}x{}",
                values.nrows(),
                values.ncols(),
                rows,
                cols
            )));
        }
        for block in 0..(1 + 2 * num_aux) {
            // Parameter slot that block `block` is allowed to touch.
            let owner = match block {
                0 => 0,
                i if i <= num_aux => i,
                i => i - num_aux,
            };
            for r in block * p..(block + 1) * p {
                for owner_col in 0..(1 + num_aux) {
                    if owner_col == owner {
                        continue;
                    }
                    for c in owner_col * d..(owner_col + 1) * d {
                        if values[(r, c)] != 0.0 {
                            return Err(Error::structure(format!(
                                "cross-parameter Jacobian block ({block}, {owner_col}) is not zero"
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// Two-sided confidence interval for a scalar estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Normal-approximation interval `estimate +/- z(level) * se`.
pub fn confidence_interval(estimate: f64, se: f64, level: f64) -> Result<ConfidenceInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::usage(format!(
            "confidence level must lie strictly in (0, 1), got {level}"
        )));
    }
    if !(se >= 0.0) {
        return Err(Error::usage(format!(
            "standard error must be nonnegative, got {se}"
        )));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    Ok(ConfidenceInterval {
        lower: estimate - z * se,
        upper: estimate + z * se,
        level,
    })
}

/// Standard normal quantile via the Wichura AS 241 rational approximation
/// (relative accuracy well below 1e-8 across the open unit interval).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0, 1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&CENTRAL_NUM, r) / poly(&CENTRAL_DEN, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        poly(&TAIL_NUM, r) / poly(&TAIL_DEN, r)
    } else {
        let r = r - 5.0;
        poly(&FAR_TAIL_NUM, r) / poly(&FAR_TAIL_DEN, r)
    };
    if q < 0.0 {
        -z
    } else {
        z
    }
}

#[inline]
fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const CENTRAL_NUM: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const CENTRAL_DEN: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
const TAIL_NUM: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
const TAIL_DEN: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const FAR_TAIL_NUM: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const FAR_TAIL_DEN: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn check_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !m.is_square() {
        return Err(Error::structure(format!(
            "matrix is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return Err(Error::structure(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Invert a symmetric matrix through Cholesky, falling back to LU.
fn invert_spd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.inverse());
    }
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::degenerate(format!("{context} is singular")))
}

/// Sandwich covariance `(G'WG)^-1 G'W F WG (G'WG)^-1`.
pub fn sandwich_covariance(
    g: &DMatrix<f64>,
    w: &DMatrix<f64>,
    f: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = g.nrows();
    if w.nrows() != k || w.ncols() != k || f.nrows() != k || f.ncols() != k {
        return Err(Error::structure(format!(
            "weight/covariance side must match the {k} moment rows of G"
        )));
    }
    let gtw = g.transpose() * w;
    let bread = &gtw * g;
    let bread_inv = bread
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| bread.lu().try_inverse())
        .ok_or_else(|| Error::identification("G'WG is singular".to_string()))?;
    let meat = &gtw * f * gtw.transpose();
    let mut v = &bread_inv * meat * &bread_inv;
    symmetrize(&mut v);
    Ok(v)
}

/// Efficient covariance `(G'F^-1 G)^-1`, inverting `F` with the same ridge
/// policy as the weight-matrix inversion.
pub fn efficient_covariance(g: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = invert_weight(f, SolverConfig::default().ridge_epsilon)?;
    covariance_from_optimal_weight(g, &w)
}

/// `(G'WG)^-1` for a weight that is (a ridged) `F^-1`.
pub fn covariance_from_optimal_weight(g: &DMatrix<f64>, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    if w.values().nrows() != g.nrows() {
        return Err(Error::structure(format!(
            "weight side {} does not match the {} moment rows of G",
            w.values().nrows(),
            g.nrows()
        )));
    }
    let bread = g.transpose() * w.values() * g;
    let mut v = bread
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| bread.lu().try_inverse())
        .ok_or_else(|| Error::identification("G'WG is singular".to_string()))?;
    symmetrize(&mut v);
    Ok(v)
}

/// Covariance blocks of the moment vector partitioned into target residuals
/// `m` and auxiliary residuals `h`.
#[derive(Clone, Debug)]
pub struct MomentBlocks {
    /// `E[m m']`
    pub mm: DMatrix<f64>,
    /// `E[m h']`
    pub mh: DMatrix<f64>,
    /// `E[h h']`
    pub hh: DMatrix<f64>,
}

/// Jacobian blocks of the partitioned system.
#[derive(Clone, Debug)]
pub struct JacobianBlocks {
    /// `d E[m] / d theta`
    pub target: DMatrix<f64>,
    /// `d E[h] / d eta`
    pub aux: DMatrix<f64>,
}

/// Target-parameter block of the efficient covariance, computed through the
/// partitioned inverse of `F` rather than by inverting the full system.
///
/// This is an independent implementation used to cross-validate
/// [`efficient_covariance`]: it agrees with the upper-left `d x d` block of
/// `(G'F^-1 G)^-1` to working precision on well-conditioned systems.
pub fn partitioned_theta_variance(
    f_blocks: &MomentBlocks,
    g_blocks: &JacobianBlocks,
) -> Result<DMatrix<f64>> {
    let (p_m, p_h) = (f_blocks.mm.nrows(), f_blocks.hh.nrows());
    if f_blocks.mm.ncols() != p_m || f_blocks.hh.ncols() != p_h {
        return Err(Error::structure("diagonal F blocks must be square".to_string()));
    }
    if f_blocks.mh.nrows() != p_m || f_blocks.mh.ncols() != p_h {
        return Err(Error::structure(format!(
            "E[mh'] must be {p_m}x{p_h}, got {}x{}",
            f_blocks.mh.nrows(),
            f_blocks.mh.ncols()
        )));
    }
    if g_blocks.target.nrows() != p_m || g_blocks.aux.nrows() != p_h {
        return Err(Error::structure(
            "Jacobian block rows must match the moment partition".to_string(),
        ));
    }

    let hh_inv = invert_spd(&f_blocks.hh, "E[hh']")?;
    let mm_inv = invert_spd(&f_blocks.mm, "E[mm']")?;

    // Partitioned inverse of F: A is the inverse residual variance of a
    // regression of m on the span of h; B carries the regression coefficient.
    let schur_m = &f_blocks.mm - &f_blocks.mh * &hh_inv * f_blocks.mh.transpose();
    let a = invert_spd(&schur_m, "Schur complement of E[hh']")?;
    let schur_h = &f_blocks.hh - f_blocks.mh.transpose() * &mm_inv * &f_blocks.mh;
    let d_block = invert_spd(&schur_h, "Schur complement of E[mm']")?;
    let b = -(&a * &f_blocks.mh * &hh_inv);

    // Blocks of G'F^-1 G, then one more Schur complement for the target block.
    let m11 = g_blocks.target.transpose() * &a * &g_blocks.target;
    let m12 = g_blocks.target.transpose() * &b * &g_blocks.aux;
    let m22 = g_blocks.aux.transpose() * &d_block * &g_blocks.aux;
    let m22_inv = invert_spd(&m22, "auxiliary block of G'F^-1G")?;
    let precision = &m11 - &m12 * &m22_inv * m12.transpose();
    let mut v = invert_spd(&precision, "target-parameter precision")?;
    symmetrize(&mut v);
    Ok(v)
}
