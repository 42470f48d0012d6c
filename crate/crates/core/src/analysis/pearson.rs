use crate::error::{Error, Result};

/// Pearson correlation of two equal-length vectors, by the two-pass
/// formula. `None` when either vector is constant.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<Option<f64>> {
    if u.len() != v.len() {
        return Err(Error::shape("pearson", &[u.len()], &[v.len()]));
    }
    if u.len() < 2 {
        return Err(Error::Data(format!("pearson needs at least 2 entries, got {}", u.len())));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 || svv == 0.0 {
        return Ok(None);
    }
    Ok(Some((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_anticorrelated() {
        let u = [1.0, 2.0, 4.0, -1.0];
        assert!((pearson(&u, &u).unwrap().unwrap() - 1.0).abs() < 1e-15);
        let v: Vec<f64> = u.iter().map(|x| -3.0 * x + 7.0).collect();
        assert!((pearson(&u, &v).unwrap().unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_is_undefined() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap(), None);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Data(_))));
    }
}
