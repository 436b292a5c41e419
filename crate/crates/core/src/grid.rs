//! Equiangular lat-lon grid geometry, latitude weights, and solar geometry.

use chrono::{DateTime, Datelike, Timelike, Utc};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Cell-centered equiangular lat-lon grid. Latitude centers run north to
/// south and exclude the poles; longitudes cover [0, 360) exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecRepr", into = "GridSpecRepr")]
pub struct GridSpec {
    n_lat: usize,
    n_lon: usize,
    lat_centers: Vec<f64>,
    lon_centers: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridSpecRepr {
    n_lat: usize,
    n_lon: usize,
}

impl TryFrom<GridSpecRepr> for GridSpec {
    type Error = Error;
    fn try_from(r: GridSpecRepr) -> Result<Self> {
        make_grid(r.n_lat, r.n_lon)
    }
}

impl From<GridSpec> for GridSpecRepr {
    fn from(g: GridSpec) -> Self {
        GridSpecRepr {
            n_lat: g.n_lat,
            n_lon: g.n_lon,
        }
    }
}

impl GridSpec {
    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    /// Latitude centers in degrees, strictly decreasing, symmetric about the equator.
    pub fn lat_centers(&self) -> &[f64] {
        &self.lat_centers
    }

    /// Longitude centers in degrees, `lon_j = j * 360 / n_lon`.
    pub fn lon_centers(&self) -> &[f64] {
        &self.lon_centers
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }
}

/// Build a cell-centered grid: first latitude center `90 - dphi/2` with
/// `dphi = 180 / n_lat`.
pub fn make_grid(n_lat: usize, n_lon: usize) -> Result<GridSpec> {
    if n_lat < 2 || n_lon < 2 {
        return Err(Error::invalid(format!(
            "grid dimensions must be at least 2, got {n_lat}x{n_lon}"
        )));
    }
    let dphi = 180.0 / n_lat as f64;
    let lat_centers: Vec<f64> = (0..n_lat).map(|i| 90.0 - dphi * (i as f64 + 0.5)).collect();
    let dlam = 360.0 / n_lon as f64;
    let lon_centers: Vec<f64> = (0..n_lon).map(|j| dlam * j as f64).collect();
    Ok(GridSpec {
        n_lat,
        n_lon,
        lat_centers,
        lon_centers,
    })
}

/// Cosine-of-latitude row weights, normalized to mean 1.
pub fn latitude_weights<T: Scalar>(grid: &GridSpec) -> Array1<T> {
    let cos: Vec<f64> = grid
        .lat_centers
        .iter()
        .map(|phi| phi.to_radians().cos())
        .collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    Array1::from_iter(cos.iter().map(|c| T::real(c / mean)))
}

/// Solar declination in degrees from the sinusoidal day-of-year approximation.
pub fn solar_declination(time: DateTime<Utc>) -> f64 {
    let day = time.ordinal0() as f64
        + (time.num_seconds_from_midnight() as f64) / 86_400.0;
    -23.44 * (std::f64::consts::TAU * (day + 10.0) / 365.25).cos()
}

/// Solar hour angle in degrees at longitude `lon_deg` (0 at local solar noon).
pub fn hour_angle(time: DateTime<Utc>, lon_deg: f64) -> f64 {
    let day_frac = (time.num_seconds_from_midnight() as f64) / 86_400.0;
    day_frac * 360.0 + lon_deg - 180.0
}

/// Cosine of the solar zenith angle on the grid, clamped to [-1, 1].
pub fn cos_zenith<T: Scalar>(time: DateTime<Utc>, grid: &GridSpec) -> Array2<T> {
    let decl = solar_declination(time).to_radians();
    let (sin_d, cos_d) = (decl.sin(), decl.cos());
    let mut out = Array2::zeros((grid.n_lat, grid.n_lon));
    for (i, phi) in grid.lat_centers.iter().enumerate() {
        let (sin_p, cos_p) = (phi.to_radians().sin(), phi.to_radians().cos());
        for (j, lam) in grid.lon_centers.iter().enumerate() {
            let h = hour_angle(time, *lam).to_radians();
            let z = (sin_p * sin_d + cos_p * cos_d * h.cos()).clamp(-1.0, 1.0);
            out[[i, j]] = T::real(z);
        }
    }
    out
}
