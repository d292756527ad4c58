use ndarray::Array2;

use crate::error::{Error, Result};

/// Normalized histogram of one or two coordinates of a particle cloud.
///
/// Densities are counts divided by the total particle number and the bin
/// volume, so the histogram integrates to the fraction of particles inside
/// the range.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub coords: Vec<usize>,
    pub bins: Vec<usize>,
    pub ranges: Vec<(f64, f64)>,
    /// Row-major over the selected axes.
    pub density: Vec<f64>,
    pub total: usize,
}

impl Histogram {
    pub fn bin_width(&self, axis: usize) -> f64 {
        (self.ranges[axis].1 - self.ranges[axis].0) / self.bins[axis] as f64
    }

    pub fn bin_edges(&self, axis: usize, i: usize) -> (f64, f64) {
        let w = self.bin_width(axis);
        let lo = self.ranges[axis].0 + i as f64 * w;
        (lo, lo + w)
    }

    pub fn centers(&self, axis: usize) -> Vec<f64> {
        (0..self.bins[axis])
            .map(|i| {
                let (lo, hi) = self.bin_edges(axis, i);
                0.5 * (lo + hi)
            })
            .collect()
    }

    pub fn bin_volume(&self) -> f64 {
        (0..self.bins.len()).map(|a| self.bin_width(a)).product()
    }

    /// Sum of density times volume over all bins.
    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.bin_volume()
    }

    /// Bin indices (one per axis) of flat entry `k`.
    pub fn index(&self, k: usize) -> Vec<usize> {
        match self.bins.len() {
            1 => vec![k],
            _ => vec![k / self.bins[1], k % self.bins[1]],
        }
    }
}

/// Bins coordinates `coords` (one or two of them) of the rows of `positions`.
/// Particles outside the range count towards the normalization only.
pub fn histogram_density(
    positions: &Array2<f64>,
    coords: &[usize],
    bins: &[usize],
    ranges: &[(f64, f64)],
) -> Result<Histogram> {
    let n = positions.nrows();
    if n == 0 {
        return Err(Error::Config("histogram of zero particles".into()));
    }
    if coords.is_empty() || coords.len() > 2 {
        return Err(Error::Config(format!(
            "histograms bin one or two coordinates, got {}",
            coords.len()
        )));
    }
    if bins.len() != coords.len() || ranges.len() != coords.len() {
        return Err(Error::Config("need one bin count and one range per coordinate".into()));
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= positions.ncols()) {
        return Err(Error::shape("histogram coordinate", positions.ncols(), c));
    }
    if bins.contains(&0) || ranges.iter().any(|(lo, hi)| !(hi > lo) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::Config("histogram bins must be positive and ranges non-empty".into()));
    }
    let total_bins: usize = bins.iter().product();
    let mut counts = vec![0usize; total_bins];
    'rows: for row in positions.rows() {
        let mut flat = 0;
        for (a, &c) in coords.iter().enumerate() {
            let (lo, hi) = ranges[a];
            let v = row[c];
            if !(v >= lo && v <= hi) {
                continue 'rows;
            }
            let i = (((v - lo) / (hi - lo)) * bins[a] as f64).floor() as usize;
            flat = flat * bins[a] + i.min(bins[a] - 1);
        }
        counts[flat] += 1;
    }
    let mut h = Histogram {
        coords: coords.to_vec(),
        bins: bins.to_vec(),
        ranges: ranges.to_vec(),
        density: Vec::new(),
        total: n,
    };
    let vol = h.bin_volume();
    h.density = counts.iter().map(|&c| c as f64 / (n as f64 * vol)).collect();
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_particle_single_bin() {
        let h = histogram_density(&array![[0.3]], &[0], &[1], &[(0.0, 0.5)]).unwrap();
        assert_eq!(h.density, vec![2.0]);
        assert_eq!(h.mass(), 1.0);
    }

    #[test]
    fn empty_cloud_rejected() {
        let x = Array2::<f64>::zeros((0, 1));
        assert!(histogram_density(&x, &[0], &[3], &[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn two_dimensional_binning() {
        let x = array![[0.1, 0.9], [0.6, 0.2], [5.0, 0.0]];
        let h = histogram_density(&x, &[0, 1], &[2, 2], &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        // bins: (0,1) and (1,0) each hold one of three particles; volume 0.25.
        let v = 1.0 / (3.0 * 0.25);
        assert_eq!(h.density, vec![0.0, v, v, 0.0]);
        assert_eq!(h.index(2), vec![1, 0]);
    }
}
