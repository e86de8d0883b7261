//! SSIM, MS-SSIM, a Fréchet distance between feature sets, and PCA.
//!
//! All arithmetic is `f64`. Images are `[..., H, W]` tensors; leading axes
//! are treated as separate planes and averaged.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let mut t: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = t.iter().sum();
        t.iter_mut().for_each(|v| *v /= s);
        t
    }
}

/// Standard MS-SSIM exponents, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

struct Planes {
    h: usize,
    w: usize,
    data: Vec<Vec<f64>>,
}

fn planes(x: &Tensor, y: &Tensor) -> Result<(Planes, Planes)> {
    if x.shape() != y.shape() {
        return Err(Error::dim("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let r = x.rank();
    if r < 2 {
        return Err(Error::dim("ssim", format!("need at least 2 axes, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let split = |t: &Tensor| Planes {
        h,
        w,
        data: t
            .data()
            .chunks(h * w)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect(),
    };
    Ok((split(x), split(y)))
}

/// Mean SSIM and mean contrast-structure term over all valid windows of one plane.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<(f64, f64)> {
    let n = cfg.window;
    if h < n || w < n {
        return Err(Error::Config(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            h, w, n, n
        )));
    }
    let taps = cfg.taps();
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let (oh, ow) = (h - n + 1, w - n + 1);
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let wt = taps[a] * taps[b];
                    let p = (i + a) * w + j + b;
                    mx += wt * x[p];
                    my += wt * y[p];
                    xx += wt * x[p] * x[p];
                    yy += wt * y[p] * y[p];
                    xy += wt * x[p] * y[p];
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            let cs = (2.0 * cov + c2) / (vx + vy + c2);
            let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            s_sum += l * cs;
            cs_sum += cs;
        }
    }
    let count = (oh * ow) as f64;
    Ok((s_sum / count, cs_sum / count))
}

pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    let (px, py) = planes(x, y)?;
    let mut total = 0.0;
    for (a, b) in px.data.iter().zip(&py.data) {
        total += ssim_plane(a, b, px.h, px.w, cfg)?.0;
    }
    Ok(total / px.data.len() as f64)
}

/// Largest level count whose coarsest image still fits the window, capped at 5.
pub fn ms_ssim_levels(side: usize, window: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&l| side >= (1 << (l - 1)) * window)
        .unwrap_or(1)
}

fn downsample2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let p = 2 * i * w + 2 * j;
            out.push(0.25 * (x[p] + x[p + 1] + x[p + w] + x[p + w + 1]));
        }
    }
    out
}

/// Multi-scale SSIM. `levels = None` picks [`ms_ssim_levels`] for the image side.
pub fn ms_ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig, levels: Option<usize>) -> Result<f64> {
    let (px, py) = planes(x, y)?;
    let side = px.h.min(px.w);
    let levels = levels.unwrap_or_else(|| ms_ssim_levels(side, cfg.window));
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() {
        return Err(Error::Config(format!("MS-SSIM supports 1..=5 levels, got {}", levels)));
    }
    if side < (1 << (levels - 1)) * cfg.window {
        return Err(Error::Config(format!(
            "side {} too small for {} MS-SSIM levels",
            side, levels
        )));
    }
    if levels == 1 {
        return ssim(x, y, cfg);
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..levels].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..levels].iter().map(|v| v / wsum).collect();
    let mut total = 0.0;
    for (a, b) in px.data.iter().zip(&py.data) {
        let (mut a, mut b) = (a.clone(), b.clone());
        let (mut h, mut w) = (px.h, px.w);
        let mut value = 1.0;
        for (l, wt) in weights.iter().enumerate() {
            let (s, cs) = ssim_plane(&a, &b, h, w, cfg)?;
            let term = if l + 1 == levels { s } else { cs };
            value *= term.max(0.0).powf(*wt);
            a = downsample2(&a, h, w);
            b = downsample2(&b, h, w);
            h /= 2;
            w /= 2;
        }
        total += value;
    }
    Ok(total / px.data.len() as f64)
}

fn as_rows(t: &Tensor, op: &'static str) -> Result<(usize, usize, DMatrix<f64>)> {
    match t.shape() {
        [n, d] => Ok((*n, *d, DMatrix::from_row_iterator(*n, *d, t.data().iter().map(|&v| v as f64)))),
        s => Err(Error::dim(op, format!("expected [N, d] features, got {:?}", s))),
    }
}

fn mean_cov(x: &DMatrix<f64>) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.transpose() * &centered / denom;
    (mu, cov)
}

fn sym_eigen(m: DMatrix<f64>, op: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-12, 10_000)
        .ok_or_else(|| Error::Numeric(format!("{}: eigendecomposition did not converge", op)))
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)` with `1e-6·I` added to each covariance.
pub fn frechet_feature_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, da, xa) = as_rows(a, "frechet")?;
    let (nb, db, xb) = as_rows(b, "frechet")?;
    if da != db || na == 0 || nb == 0 {
        return Err(Error::dim("frechet", format!("feature sets {:?} and {:?}", a.shape(), b.shape())));
    }
    let (mua, mut sa) = mean_cov(&xa);
    let (mub, mut sb) = mean_cov(&xb);
    let eye = DMatrix::<f64>::identity(da, da) * 1e-6;
    sa += &eye;
    sb += &eye;
    let ea = sym_eigen(sa.clone(), "frechet")?;
    let roots = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&roots) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &sb * &sqrt_a;
    let tr_sqrt: f64 = sym_eigen(inner, "frechet")?
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = (mua - mub).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::Numeric("frechet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// `[N × k]` scores.
    pub projection: Tensor,
    /// Principal axes, one `d`-vector per component.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues of the kept components, descending.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

/// Projects centered features onto the top-`k` covariance eigenvectors. Each
/// axis is signed so its largest-magnitude entry is positive.
pub fn pca_project(feats: &Tensor, k: usize) -> Result<Pca> {
    let (n, d, x) = as_rows(feats, "pca")?;
    if k == 0 || k > d {
        return Err(Error::Config(format!("pca: k = {} must lie in 1..={}", k, d)));
    }
    if n < 2 {
        return Err(Error::Config("pca needs at least two rows".into()));
    }
    let (mu, cov) = mean_cov(&x);
    let eig = sym_eigen(cov.clone(), "pca")?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut components = Vec::with_capacity(k);
    for &c in &order[..k] {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() + 1e-12 { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
    }
    let mut proj = Vec::with_capacity(n * k);
    for r in 0..n {
        for comp in &components {
            let s: f64 = (0..d).map(|c| (x[(r, c)] - mu[c]) * comp[c]).sum();
            proj.push(s as f32);
        }
    }
    Ok(Pca {
        projection: Tensor::new(vec![n, k], proj)?,
        explained_variance: order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect(),
        total_variance: cov.trace(),
        components,
    })
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub arm: String,
    pub session: String,
    pub value: f64,
}

pub const METRICS_CSV_HEADER: &str = "metric,arm,session,value";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6}", r.metric, r.arm, r.session, r.value);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_counts() {
        assert_eq!(ms_ssim_levels(32, 11), 2);
        assert_eq!(ms_ssim_levels(128, 11), 4);
        assert_eq!(ms_ssim_levels(176, 11), 5);
        assert_eq!(ms_ssim_levels(1000, 11), 5);
        assert_eq!(ms_ssim_levels(11, 11), 1);
    }

    #[test]
    fn taps_sum_to_one() {
        let t = SsimConfig::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }
}
