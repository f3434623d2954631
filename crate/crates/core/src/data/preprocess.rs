use super::volume::Volume;
use crate::error::{Error, Result};

/// Z-score normalization: zero mean, unit population standard deviation.
pub fn znormalize(v: &Volume) -> Result<Volume> {
    let xs = v.as_slice();
    let first = xs[0];
    if xs.iter().all(|&x| x == first) {
        return Err(Error::ZeroVariance);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::ZeroVariance);
    }
    let data = v.data().mapv(|x| ((x as f64 - mean) / std) as f32);
    Volume::new(data, v.spacing())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(v: &Volume) -> (f64, f64) {
        let xs = v.as_slice();
        let n = xs.len() as f64;
        let m = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = xs.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
        (m, var.sqrt())
    }

    #[test]
    fn hand_computed_case() {
        let v = Volume::from_vec([1, 2, 2], [1.0; 3], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let z = znormalize(&v).unwrap();
        assert_eq!(z.as_slice(), &[-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(z.spacing(), v.spacing());
    }

    #[test]
    fn constant_volume_fails() {
        let v = Volume::from_vec([2, 2, 2], [1.0; 3], vec![0.0; 8]).unwrap();
        assert!(matches!(znormalize(&v), Err(Error::ZeroVariance)));
    }

    #[test]
    fn normalized_input_is_a_fixed_point() {
        let raw: Vec<f32> = (0..64).map(|i| ((i * 37) % 11) as f32 * 0.7 - 2.0).collect();
        let v = Volume::from_vec([4, 4, 4], [1.5; 3], raw).unwrap();
        let z1 = znormalize(&v).unwrap();
        let (m, s) = stats(&z1);
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        let z2 = znormalize(&z1).unwrap();
        for (a, b) in z1.as_slice().iter().zip(z2.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
