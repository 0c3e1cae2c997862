//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use super::NumericsError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Elements checked per parameter entry; larger entries are subsampled.
    pub max_samples_per_param: usize,
    /// Gradient magnitudes below this are compared on an absolute scale.
    /// Raised automatically to the rounding noise of the difference
    /// quotient at the loss magnitude.
    pub floor: f64,
    /// Elements whose one-sided slopes disagree by more than this fraction
    /// sit on a kink (ReLU, max, clamp, top-k switch) and are skipped. So
    /// are elements whose central differences at `eps` and `2·eps` differ
    /// by more than `tol / 4`, which catches kinks too shallow for the
    /// one-sided test.
    pub kink_tol: f64,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-4,
            max_samples_per_param: 256,
            floor: 1e-5,
            kink_tol: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstElement {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: Option<WorstElement>,
    pub passed: bool,
}

/// Compares the tape gradient of `f` against central differences for every
/// (or a sampled subset of every) parameter element.
pub fn finite_difference_check<T, E, F>(
    f: F,
    store: &ParameterStore<T>,
    cfg: &FdConfig,
) -> Result<FdReport, E>
where
    T: Scalar,
    E: From<NumericsError>,
    F: Fn(&ParameterStore<T>) -> Result<(Tape<T>, Var), E>,
{
    if !(cfg.eps > 0.0) {
        return Err(NumericsError::Config(format!("eps must be positive, got {}", cfg.eps)).into());
    }
    let (tape, loss) = f(store)?;
    let f0 = tape.value(loss).item().to_f64_lossy();
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);
    let eval = |s: &ParameterStore<T>| -> Result<f64, E> {
        let (t, l) = f(s)?;
        Ok(t.value(l).item().to_f64_lossy())
    };

    let noise = 16.0 * T::epsilon().to_f64_lossy() * f0.abs().max(1.0) / cfg.eps;
    let floor = cfg.floor.max(noise / cfg.tol);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
        passed: true,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let len = store.value(&name)?.len();
        let indices: Vec<usize> = if len <= cfg.max_samples_per_param {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, cfg.max_samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for i in indices {
            let original = store.value(&name)?.data()[i];
            let h = T::lit(cfg.eps);
            work.value_mut(&name)?.data_mut()[i] = original + h;
            let fp = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = original - h;
            let fm = eval(&work)?;
            let h2 = h + h;
            work.value_mut(&name)?.data_mut()[i] = original + h2;
            let fp2 = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = original - h2;
            let fm2 = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = original;
            let step = (original + h).to_f64_lossy() - original.to_f64_lossy();
            let step2 = (original + h2).to_f64_lossy() - original.to_f64_lossy();
            let numeric = (fp - fm) / (2.0 * step);
            let wide = (fp2 - fm2) / (2.0 * step2);
            let right = (fp - f0) / step;
            let left = (f0 - fm) / step;
            let a = analytic
                .get(&name)
                .map_or(0.0, |g| g.data()[i].to_f64_lossy());
            let slope_scale = right.abs().max(left.abs()).max(floor);
            if (right - left).abs() > cfg.kink_tol * slope_scale
                || (numeric - wide).abs() > 0.25 * cfg.tol * slope_scale
            {
                report.skipped_kinks += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(WorstElement {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tol && report.checked > 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NdArray;

    fn store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("theta", NdArray::from_vec(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn quadratic_matches() {
        let s = store(3.0);
        let report = finite_difference_check::<f64, NumericsError, _>(
            |s| {
                let mut t = Tape::new();
                let p = t.param(s, "theta")?;
                let sq = t.mul(p, p)?;
                let l = t.sum(sq)?;
                Ok((t, l))
            },
            &s,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        let w = report.worst.unwrap();
        assert!((w.analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn linear_function_is_exact_up_to_rounding() {
        let s = store(-1.5);
        let report = finite_difference_check::<f64, NumericsError, _>(
            |s| {
                let mut t = Tape::new();
                let p = t.param(s, "theta")?;
                let l = t.affine(p, 4.0, 2.0)?;
                Ok((t, l))
            },
            &s,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn detached_path_is_reported() {
        // d/dθ (θ · stop(θ)) is θ on the tape but 2θ in truth
        let s = store(2.0);
        let report = finite_difference_check::<f64, NumericsError, _>(
            |s| {
                let mut t = Tape::new();
                let p = t.param(s, "theta")?;
                let c = t.constant(s.value("theta")?.clone())?;
                let prod = t.mul(p, c)?;
                let l = t.sum(prod)?;
                Ok((t, l))
            },
            &s,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_err - 0.5).abs() < 1e-6, "{report:?}");
    }

    #[test]
    fn kink_at_the_probe_is_skipped() {
        let s = store(0.0);
        let report = finite_difference_check::<f64, NumericsError, _>(
            |s| {
                let mut t = Tape::new();
                let p = t.param(s, "theta")?;
                let r = t.relu(p)?;
                let l = t.sum(r)?;
                Ok((t, l))
            },
            &s,
            &FdConfig::default(),
        )
        .unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 0);
        assert!(!report.passed);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let s = store(1.0);
        let cfg = FdConfig { eps: 0.0, ..Default::default() };
        let r = finite_difference_check::<f64, NumericsError, _>(
            |s| {
                let mut t = Tape::new();
                let p = t.param(s, "theta")?;
                Ok((t, p))
            },
            &s,
            &cfg,
        );
        assert!(r.is_err());
    }
}
