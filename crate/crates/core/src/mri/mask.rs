use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MriError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskPattern {
    /// Random phase-encode columns.
    #[serde(rename = "1D_RANDOM")]
    Random1d,
    /// Equispaced phase-encode columns with a random offset.
    #[serde(rename = "1D_UNIFORM")]
    Uniform1d,
    /// Random individual k-space points.
    #[serde(rename = "2D_RANDOM")]
    Random2d,
}

impl MaskPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskPattern::Random1d => "1D_RANDOM",
            MaskPattern::Uniform1d => "1D_UNIFORM",
            MaskPattern::Random2d => "2D_RANDOM",
        }
    }
}

/// Everything needed to generate a mask except the grid size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub pattern: MaskPattern,
    pub acceleration: usize,
    /// Fraction of the fully sampled low-frequency region: of the columns
    /// for 1-D patterns, of the k-space area for 2-D patterns.
    pub center_fraction: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(pattern: MaskPattern, acceleration: usize, center_fraction: f64, seed: u64) -> Self {
        MaskSpec {
            pattern,
            acceleration,
            center_fraction,
            seed,
        }
    }
}

/// Binary undersampling pattern on a `height×width` k-space grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    spec: MaskSpec,
    height: usize,
    width: usize,
    grid: Vec<u8>,
}

impl SamplingMask {
    /// A mask with every entry set to `value` (0 or 1).
    pub fn uniform(height: usize, width: usize, sampled: bool) -> Self {
        SamplingMask {
            spec: MaskSpec::new(MaskPattern::Random2d, 1, 0.0, 0),
            height,
            width,
            grid: vec![sampled as u8; height * width],
        }
    }

    /// Build from an explicit 0/1 grid.
    pub fn from_grid(spec: MaskSpec, height: usize, width: usize, grid: Vec<u8>) -> Result<Self, MriError> {
        if grid.len() != height * width || grid.iter().any(|&v| v > 1) {
            return Err(MriError::MaskConfig(format!(
                "grid must hold {} binary entries",
                height * width
            )));
        }
        Ok(SamplingMask {
            spec,
            height,
            width,
            grid,
        })
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn is_sampled(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.width + x] == 1
    }

    pub fn sampled_count(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.sampled_count() as f64 / self.grid.len() as f64
    }

    /// Columns with at least one sampled entry.
    pub fn sampled_columns(&self) -> Vec<usize> {
        (0..self.width)
            .filter(|&x| (0..self.height).any(|y| self.is_sampled(y, x)))
            .collect()
    }
}

fn centered_band(len: usize, count: usize) -> std::ops::Range<usize> {
    let count = count.min(len);
    let start = len / 2 - count / 2;
    start..start + count
}

/// Generate a deterministic mask for a `height×width` grid.
pub fn make_mask(spec: &MaskSpec, height: usize, width: usize) -> Result<SamplingMask, MriError> {
    if spec.acceleration == 0 {
        return Err(MriError::MaskConfig("acceleration must be >= 1".into()));
    }
    if height == 0 || width == 0 {
        return Err(MriError::MaskConfig("grid must be non-empty".into()));
    }
    if !(0.0..1.0).contains(&spec.center_fraction) {
        return Err(MriError::MaskConfig(format!(
            "center fraction {} outside [0, 1)",
            spec.center_fraction
        )));
    }
    if spec.acceleration == 1 {
        return Ok(SamplingMask {
            spec: *spec,
            height,
            width,
            grid: vec![1; height * width],
        });
    }
    let rate = 1.0 / spec.acceleration as f64;
    if spec.center_fraction >= rate {
        return Err(MriError::MaskConfig(format!(
            "center fraction {} cannot be met at acceleration {} (must be < {rate})",
            spec.center_fraction, spec.acceleration
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut grid = vec![0u8; height * width];

    match spec.pattern {
        MaskPattern::Random1d | MaskPattern::Uniform1d => {
            let target = (width as f64 * rate).round() as usize;
            let center = centered_band(width, (width as f64 * spec.center_fraction).round() as usize);
            let others: Vec<usize> = (0..width).filter(|x| !center.contains(x)).collect();
            let needed = target.saturating_sub(center.len()).min(others.len());
            let mut columns: Vec<usize> = center.collect();
            if needed > 0 {
                if spec.pattern == MaskPattern::Random1d {
                    let mut pool = others.clone();
                    pool.shuffle(&mut rng);
                    columns.extend_from_slice(&pool[..needed]);
                } else {
                    let step = others.len() as f64 / needed as f64;
                    let offset: f64 = rng.random::<f64>() * step;
                    columns.extend(
                        (0..needed).map(|i| others[((offset + i as f64 * step) as usize).min(others.len() - 1)]),
                    );
                }
            }
            for x in columns {
                for y in 0..height {
                    grid[y * width + x] = 1;
                }
            }
        }
        MaskPattern::Random2d => {
            let total = height * width;
            let target = (total as f64 * rate).round() as usize;
            let side = spec.center_fraction.sqrt();
            let rows = centered_band(height, (height as f64 * side).round() as usize);
            let cols = centered_band(width, (width as f64 * side).round() as usize);
            for y in rows {
                for x in cols.clone() {
                    grid[y * width + x] = 1;
                }
            }
            let kept = grid.iter().filter(|&&v| v == 1).count();
            let mut pool: Vec<usize> = (0..total).filter(|&i| grid[i] == 0).collect();
            pool.shuffle(&mut rng);
            for &i in pool.iter().take(target.saturating_sub(kept)) {
                grid[i] = 1;
            }
        }
    }

    Ok(SamplingMask {
        spec: *spec,
        height,
        width,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceleration_one_is_full() {
        for pattern in [MaskPattern::Random1d, MaskPattern::Uniform1d, MaskPattern::Random2d] {
            let m = make_mask(&MaskSpec::new(pattern, 1, 0.08, 3), 32, 32).unwrap();
            assert_eq!(m.sampled_count(), 32 * 32);
        }
    }

    #[test]
    fn uniform_256_r4_column_count() {
        let m = make_mask(&MaskSpec::new(MaskPattern::Uniform1d, 4, 0.08, 11), 256, 256).unwrap();
        let cols = m.sampled_columns();
        assert!((55..=73).contains(&cols.len()), "{} columns", cols.len());
        assert_eq!(cols.len(), 64);
        // contiguous centre band
        let band: Vec<usize> = (118..138).collect();
        assert!(band.iter().all(|c| cols.contains(c)));
        // whole columns only
        for &c in &cols {
            assert!((0..256).all(|y| m.is_sampled(y, c)));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for pattern in [MaskPattern::Random1d, MaskPattern::Uniform1d, MaskPattern::Random2d] {
            let spec = MaskSpec::new(pattern, 4, 0.08, 99);
            assert_eq!(make_mask(&spec, 64, 64).unwrap(), make_mask(&spec, 64, 64).unwrap());
        }
        let a = make_mask(&MaskSpec::new(MaskPattern::Random1d, 4, 0.08, 1), 64, 64).unwrap();
        let b = make_mask(&MaskSpec::new(MaskPattern::Random1d, 4, 0.08, 2), 64, 64).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn center_fraction_too_large() {
        let err = make_mask(&MaskSpec::new(MaskPattern::Random1d, 4, 0.25, 0), 64, 64);
        assert!(matches!(err, Err(MriError::MaskConfig(_))));
        let err = make_mask(&MaskSpec::new(MaskPattern::Random1d, 0, 0.0, 0), 64, 64);
        assert!(matches!(err, Err(MriError::MaskConfig(_))));
    }

    #[test]
    fn random_2d_keeps_center_block() {
        let m = make_mask(&MaskSpec::new(MaskPattern::Random2d, 4, 0.08, 5), 64, 64).unwrap();
        for y in 23..41 {
            for x in 23..41 {
                assert!(m.is_sampled(y, x));
            }
        }
        assert_eq!(m.sampled_count(), 1024);
        assert!(m.sampled_columns().len() > 32);
    }

    #[test]
    fn from_grid_rejects_non_binary() {
        let spec = MaskSpec::new(MaskPattern::Random2d, 1, 0.0, 0);
        assert!(SamplingMask::from_grid(spec, 2, 2, vec![0, 1, 2, 0]).is_err());
        assert!(SamplingMask::from_grid(spec, 2, 2, vec![0, 1, 1]).is_err());
        assert!(SamplingMask::from_grid(spec, 2, 2, vec![0, 1, 1, 0]).is_ok());
    }
}
