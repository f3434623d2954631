use ndarray::{s, Array3, Array4, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::CvaeConfig;
use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, sigmoid, Conv3d, Module, Padding, Param};
use crate::real::Real;

/// Log standard deviations are clamped to this range before exponentiation.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-20.0, 5.0);

/// Per-voxel posterior parameters, each `(g, D, H, W)`.
#[derive(Debug, Clone)]
pub struct LatentField<T> {
    pub mu: Array4<T>,
    pub log_sigma: Array4<T>,
}

impl<T: Real> LatentField<T> {
    pub fn sigma(&self) -> Array4<T> {
        self.log_sigma.mapv(T::exp)
    }
}

/// `mu + sigma * z`.
pub fn reparameterize<T: Real>(lf: &LatentField<T>, z: &Array4<T>) -> Result<Array4<T>> {
    if z.dim() != lf.mu.dim() {
        return Err(Error::ShapeMismatch(format!("noise {:?} vs latent {:?}", z.dim(), lf.mu.dim())));
    }
    let mut out = lf.mu.clone();
    Zip::from(&mut out)
        .and(&lf.log_sigma)
        .and(z)
        .for_each(|o, &s, &e| *o += s.exp() * e);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CasLosses<T> {
    pub mse: T,
    pub kld: T,
    pub total: T,
    pub grad_recon: Array3<T>,
    pub grad_mu: Array4<T>,
    pub grad_log_sigma: Array4<T>,
}

/// Reconstruction MSE, mean KL to the standard normal, and `mse + lambda * kld`
/// with gradients of the weighted sum.
pub fn cas_losses<T: Real>(
    target: ArrayView3<'_, T>,
    recon: ArrayView3<'_, T>,
    lf: &LatentField<T>,
    lambda: f64,
) -> Result<CasLosses<T>> {
    if target.dim() != recon.dim() {
        return Err(Error::ShapeMismatch(format!("target {:?} vs reconstruction {:?}", target.dim(), recon.dim())));
    }
    let n = T::from_usize(target.len()).unwrap();
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let mut mse = T::zero();
    let mut grad_recon = Array3::<T>::zeros(recon.raw_dim());
    Zip::from(&mut grad_recon)
        .and(&target)
        .and(&recon)
        .for_each(|g, &t, &r| {
            let d = r - t;
            mse += d * d;
            *g = two * d / n;
        });
    mse /= n;
    let m = T::from_usize(lf.mu.len()).unwrap();
    let lam = T::lit(lambda);
    let mut kld = T::zero();
    let mut grad_mu = Array4::<T>::zeros(lf.mu.raw_dim());
    let mut grad_log_sigma = Array4::<T>::zeros(lf.mu.raw_dim());
    Zip::from(&mut grad_mu)
        .and(&mut grad_log_sigma)
        .and(&lf.mu)
        .and(&lf.log_sigma)
        .for_each(|gm, gs, &mu, &s| {
            let var = (two * s).exp();
            kld += half * (mu * mu + var - T::one() - two * s);
            *gm = lam * mu / m;
            *gs = lam * (var - T::one()) / m;
        });
    kld /= m;
    Ok(CasLosses {
        mse,
        kld,
        total: mse + lam * kld,
        grad_recon,
        grad_mu,
        grad_log_sigma,
    })
}

#[derive(Debug)]
pub struct EncodeTape<T> {
    input: Array4<T>,
    a1: Array4<T>,
    a2: Array4<T>,
    raw: Array4<T>,
}

#[derive(Debug)]
pub struct DecodeTape<T> {
    input: Array4<T>,
    a1: Array4<T>,
    a2: Array4<T>,
    out: Array3<T>,
}

/// Result of one self-supervised update on a target heatmap.
#[derive(Debug, Clone)]
pub struct CvaeStep<T> {
    pub mse: T,
    pub kld: T,
    pub total: T,
    pub reconstruction: Array3<T>,
}

/// Conditional VAE over heatmaps, conditioned on the image. Both halves are
/// two 3x3x3 conv+relu layers followed by a pointwise head.
#[derive(Debug, Clone)]
pub struct Cvae<T> {
    config: CvaeConfig,
    enc1: Conv3d<T>,
    enc2: Conv3d<T>,
    enc_head: Conv3d<T>,
    dec1: Conv3d<T>,
    dec2: Conv3d<T>,
    dec_head: Conv3d<T>,
}

fn stack<T: Real>(first: &Array4<T>, image: ArrayView3<'_, T>) -> Array4<T> {
    let (c, d, h, w) = first.dim();
    let mut out = Array4::<T>::zeros((c + 1, d, h, w));
    out.slice_mut(s![..c, .., .., ..]).assign(first);
    out.index_axis_mut(Axis(0), c).assign(&image);
    out
}

impl<T: Real> Cvae<T> {
    pub fn new<R: Rng + ?Sized>(config: CvaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let g = config.latent_components;
        let [w0, w1] = config.widths;
        let conv = |name: &str, i, o, k, rng: &mut R| Conv3d::new(name, i, o, k, 1, Padding::Zero, true, rng);
        Ok(Self {
            enc1: conv("cvae.enc1", 2, w0, 3, rng),
            enc2: conv("cvae.enc2", w0, w1, 3, rng),
            enc_head: conv("cvae.enc_head", w1, 2 * g, 1, rng),
            dec1: conv("cvae.dec1", g + 1, w1, 3, rng),
            dec2: conv("cvae.dec2", w1, w0, 3, rng),
            dec_head: conv("cvae.dec_head", w0, 1, 1, rng),
            config,
        })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    fn check(&self, a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<()> {
        if a != b {
            return Err(Error::ShapeMismatch(format!("{a:?} vs image {b:?}")));
        }
        Ok(())
    }

    pub fn encode(&self, heatmap: ArrayView3<'_, T>, image: ArrayView3<'_, T>) -> Result<(LatentField<T>, EncodeTape<T>)> {
        self.check(heatmap.dim(), image.dim())?;
        let hm = heatmap.to_owned().insert_axis(Axis(0));
        let input = stack(&hm, image);
        let mut a1 = self.enc1.forward(&input);
        relu_inplace(&mut a1);
        let mut a2 = self.enc2.forward(&a1);
        relu_inplace(&mut a2);
        let raw = self.enc_head.forward(&a2);
        let g = self.config.latent_components;
        let (lo, hi) = (T::lit(LOG_SIGMA_RANGE.0), T::lit(LOG_SIGMA_RANGE.1));
        let lf = LatentField {
            mu: raw.slice(s![..g, .., .., ..]).to_owned(),
            log_sigma: raw.slice(s![g.., .., .., ..]).mapv(|v| v.max(lo).min(hi)),
        };
        Ok((lf, EncodeTape { input, a1, a2, raw }))
    }

    /// Accumulates encoder gradients given gradients w.r.t. `mu` and the clamped `log_sigma`.
    pub fn encode_backward(&mut self, tape: &EncodeTape<T>, dmu: &Array4<T>, dlog_sigma: &Array4<T>) {
        let g = self.config.latent_components;
        let mut draw = Array4::<T>::zeros(tape.raw.raw_dim());
        draw.slice_mut(s![..g, .., .., ..]).assign(dmu);
        let (lo, hi) = (T::lit(LOG_SIGMA_RANGE.0), T::lit(LOG_SIGMA_RANGE.1));
        Zip::from(draw.slice_mut(s![g.., .., .., ..]))
            .and(dlog_sigma)
            .and(tape.raw.slice(s![g.., .., .., ..]))
            .for_each(|d, &gs, &r| {
                if r > lo && r < hi {
                    *d = gs;
                }
            });
        let mut da2 = self.enc_head.backward(&tape.a2, &draw, true).expect("grad");
        relu_backward_inplace(&mut da2, &tape.a2);
        let mut da1 = self.enc2.backward(&tape.a1, &da2, true).expect("grad");
        relu_backward_inplace(&mut da1, &tape.a1);
        self.enc1.backward(&tape.input, &da1, false);
    }

    pub fn decode(&self, latent: &Array4<T>, image: ArrayView3<'_, T>) -> Result<(Array3<T>, DecodeTape<T>)> {
        let (c, d, h, w) = latent.dim();
        if c != self.config.latent_components {
            return Err(Error::DimensionMismatch {
                what: "latent components",
                expected: self.config.latent_components,
                found: c,
            });
        }
        self.check((d, h, w), image.dim())?;
        let input = stack(latent, image);
        let mut a1 = self.dec1.forward(&input);
        relu_inplace(&mut a1);
        let mut a2 = self.dec2.forward(&a1);
        relu_inplace(&mut a2);
        let out = self
            .dec_head
            .forward(&a2)
            .index_axis_move(Axis(0), 0)
            .mapv(sigmoid);
        Ok((out.clone(), DecodeTape { input, a1, a2, out }))
    }

    /// Accumulates decoder gradients; returns the gradient w.r.t. the latent.
    pub fn decode_backward(&mut self, tape: &DecodeTape<T>, dout: &Array3<T>) -> Array4<T> {
        let dpre = (dout * &tape.out.mapv(|y| y * (T::one() - y))).insert_axis(Axis(0));
        let mut da2 = self.dec_head.backward(&tape.a2, &dpre, true).expect("grad");
        relu_backward_inplace(&mut da2, &tape.a2);
        let mut da1 = self.dec2.backward(&tape.a1, &da2, true).expect("grad");
        relu_backward_inplace(&mut da1, &tape.a1);
        let dinput = self.dec1.backward(&tape.input, &da1, true).expect("grad");
        dinput.slice(s![..self.config.latent_components, .., .., ..]).to_owned()
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, shape: [usize; 3], rng: &mut R) -> Array4<T> {
        let g = self.config.latent_components;
        Array4::from_shape_simple_fn((g, shape[0], shape[1], shape[2]), || {
            T::lit(StandardNormal.sample(rng))
        })
    }

    /// Pseudo-heatmap from prior noise, conditioned on the image.
    pub fn generate<R: Rng + ?Sized>(&self, image: ArrayView3<'_, T>, rng: &mut R) -> Result<Array3<T>> {
        let (d, h, w) = image.dim();
        let z = self.draw_noise([d, h, w], rng);
        Ok(self.decode(&z, image)?.0)
    }

    /// Encode the target, decode a reparameterized sample, and accumulate the
    /// gradients of `mse + lambda * kld` into the CVAE parameters.
    pub fn fit_target(&mut self, target: ArrayView3<'_, T>, image: ArrayView3<'_, T>, z: &Array4<T>) -> Result<CvaeStep<T>> {
        let (lf, etape) = self.encode(target, image)?;
        let latent = reparameterize(&lf, z)?;
        let (recon, dtape) = self.decode(&latent, image)?;
        let losses = cas_losses(target, recon.view(), &lf, self.config.kl_weight)?;
        let dlatent = self.decode_backward(&dtape, &losses.grad_recon);
        let mut dmu = losses.grad_mu;
        dmu += &dlatent;
        let mut ds = losses.grad_log_sigma;
        Zip::from(&mut ds)
            .and(&dlatent)
            .and(&lf.log_sigma)
            .and(z)
            .for_each(|d, &dl, &s, &e| *d += dl * s.exp() * e);
        self.encode_backward(&etape, &dmu, &ds);
        Ok(CvaeStep {
            mse: losses.mse,
            kld: losses.kld,
            total: losses.total,
            reconstruction: recon,
        })
    }
}

impl<T: Real> Module<T> for Cvae<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for c in [&self.enc1, &self.enc2, &self.enc_head, &self.dec1, &self.dec2, &self.dec_head] {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for c in [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc_head,
            &mut self.dec1,
            &mut self.dec2,
            &mut self.dec_head,
        ] {
            c.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_input_grad_error, max_param_grad_error};
    use crate::nn::zero_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> (Cvae<f64>, Array3<f64>, Array3<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CvaeConfig {
            latent_components: 2,
            widths: [3, 4],
            ..CvaeConfig::default()
        };
        let cvae = Cvae::new(cfg, &mut rng).unwrap();
        let img = Array3::from_shape_simple_fn((4, 4, 4), || rng.random_range(-1.0..1.0));
        let hm = Array3::from_shape_simple_fn((4, 4, 4), || rng.random_range(0.0..1.0));
        (cvae, img, hm, rng)
    }

    #[test]
    fn shapes_and_ranges() {
        let (cvae, img, hm, mut rng) = small(1);
        let (lf, _) = cvae.encode(hm.view(), img.view()).unwrap();
        assert_eq!(lf.mu.dim(), (2, 4, 4, 4));
        assert_eq!(lf.log_sigma.dim(), (2, 4, 4, 4));
        assert!(lf.sigma().iter().all(|&s| s > 0.0));
        let out = cvae.generate(img.view(), &mut rng).unwrap();
        assert_eq!(out.dim(), (4, 4, 4));
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        let wrong = Array3::<f64>::zeros((4, 4, 3));
        assert!(matches!(cvae.encode(wrong.view(), img.view()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn reparameterize_limits() {
        let mu = Array4::from_shape_fn((2, 1, 1, 2), |(a, _, _, d)| (a + d) as f64);
        let lf = LatentField {
            mu: mu.clone(),
            log_sigma: Array4::from_elem((2, 1, 1, 2), LOG_SIGMA_RANGE.0),
        };
        assert_eq!(reparameterize(&lf, &Array4::zeros((2, 1, 1, 2))).unwrap(), mu);
        let big = reparameterize(&lf, &Array4::from_elem((2, 1, 1, 2), 3.0)).unwrap();
        for (a, b) in big.iter().zip(mu.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let lf = LatentField {
            mu: Array4::from_elem((1, 1, 1, 1), 0.7),
            log_sigma: Array4::from_elem((1, 1, 1, 1), 0.5f64.ln()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| {
                let z = Array4::from_elem((1, 1, 1, 1), StandardNormal.sample(&mut rng));
                reparameterize(&lf, &z).unwrap()[[0, 0, 0, 0]]
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.7).abs() < 3.0 * 0.5 / 100.0);
    }

    #[test]
    fn loss_closed_forms() {
        let t = Array3::from_elem((2, 2, 2), 0.3f64);
        let lf0 = LatentField {
            mu: Array4::zeros((2, 2, 2, 2)),
            log_sigma: Array4::zeros((2, 2, 2, 2)),
        };
        let l = cas_losses(t.view(), t.view(), &lf0, 1e-3).unwrap();
        assert_eq!(l.mse, 0.0);
        assert!(l.kld.abs() < 1e-12);
        let lf1 = LatentField {
            mu: Array4::ones((2, 2, 2, 2)),
            log_sigma: Array4::zeros((2, 2, 2, 2)),
        };
        assert!((cas_losses(t.view(), t.view(), &lf1, 1e-3).unwrap().kld - 0.5).abs() < 1e-12);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut cvae, img, hm, mut rng) = small(3);
        let r1 = Array4::from_shape_simple_fn((2, 4, 4, 4), || rng.random_range(-1.0..1.0));
        let r2 = Array4::from_shape_simple_fn((2, 4, 4, 4), || rng.random_range(-1.0..1.0));
        let loss = |m: &Cvae<f64>| {
            let (lf, _) = m.encode(hm.view(), img.view()).unwrap();
            (&lf.mu * &r1).sum() + (&lf.log_sigma * &r2).sum()
        };
        zero_grads(&mut cvae);
        let (_, tape) = cvae.encode(hm.view(), img.view()).unwrap();
        cvae.encode_backward(&tape, &r1, &r2);
        assert!(max_param_grad_error(&mut cvae, &loss, 4, 9) <= 1e-4);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let (mut cvae, img, _, mut rng) = small(4);
        let z = cvae.draw_noise([4, 4, 4], &mut rng);
        let r = Array3::from_shape_simple_fn((4, 4, 4), || rng.random_range(-1.0..1.0));
        let loss = |m: &Cvae<f64>, z: &Array4<f64>| (&m.decode(z, img.view()).unwrap().0 * &r).sum();
        zero_grads(&mut cvae);
        let (_, tape) = cvae.decode(&z, img.view()).unwrap();
        let dz = cvae.decode_backward(&tape, &r);
        assert!(max_param_grad_error(&mut cvae, &|m| loss(m, &z), 4, 10) <= 1e-4);
        let flat: Vec<f64> = z.iter().cloned().collect();
        let f = |x: &[f64]| loss(&cvae, &Array4::from_shape_vec(z.raw_dim(), x.to_vec()).unwrap());
        let g: Vec<f64> = dz.iter().cloned().collect();
        assert!(max_input_grad_error(&flat, &g, &f, 20, 11) <= 1e-4);
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let (mut cvae, img, hm, mut rng) = small(5);
        cvae.config.kl_weight = 0.5;
        let z = cvae.draw_noise([4, 4, 4], &mut rng);
        let loss = |m: &Cvae<f64>| {
            let (lf, _) = m.encode(hm.view(), img.view()).unwrap();
            let lat = reparameterize(&lf, &z).unwrap();
            let rec = m.decode(&lat, img.view()).unwrap().0;
            cas_losses(hm.view(), rec.view(), &lf, 0.5).unwrap().total
        };
        zero_grads(&mut cvae);
        let step = cvae.fit_target(hm.view(), img.view(), &z).unwrap();
        assert!((step.total - loss(&cvae)).abs() < 1e-12);
        assert!(max_param_grad_error(&mut cvae, &loss, 4, 12) <= 1e-4);
    }
}
