use noise::{NoiseFn, Perlin};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Procedural surface texture families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    Checker,
    Noise,
    Stripes,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 3] = [Self::Checker, Self::Noise, Self::Stripes];
}

/// A smooth, band-limited colour pattern defined in object-local surface
/// coordinates, so both views sample the same function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub family: TextureFamily,
    /// Pattern period in world units.
    pub wavelength: f64,
    pub base: [f64; 3],
    pub amplitude: [f64; 3],
    /// Stripe orientation (radians) and phase.
    pub angle: f64,
    pub phase: f64,
    pub noise_seed: u32,
}

const CHECKER_SHARPNESS: f64 = 1.0;

impl Texture {
    pub fn flat(value: f64) -> Self {
        Self {
            family: TextureFamily::Stripes,
            wavelength: 1.0,
            base: [value; 3],
            amplitude: [0.0; 3],
            angle: 0.0,
            phase: 0.0,
            noise_seed: 0,
        }
    }

    /// Random texture whose period is `period_px` pixels when seen at
    /// `px_per_unit` pixels per world unit.
    pub fn random<R: Rng>(rng: &mut R, family: TextureFamily, period_px: f64, px_per_unit: f64) -> Self {
        let amp = rng.gen_range(0.12..0.25);
        let mut base = [0.0; 3];
        let mut amplitude = [0.0; 3];
        for c in 0..3 {
            base[c] = rng.gen_range(amp + 0.05..0.95 - amp);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            amplitude[c] = sign * amp * rng.gen_range(0.6..1.0);
        }
        Self {
            family,
            wavelength: period_px / px_per_unit,
            base,
            amplitude,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            noise_seed: rng.gen(),
        }
    }

    pub fn sampler(&self) -> TextureSampler<'_> {
        TextureSampler {
            tex: self,
            perlin: (self.family == TextureFamily::Noise).then(|| Perlin::new(self.noise_seed)),
        }
    }

    pub fn color(&self, q: [f64; 3]) -> [f64; 3] {
        self.sampler().color(q)
    }
}

/// A texture with its noise tables built once.
pub struct TextureSampler<'a> {
    tex: &'a Texture,
    perlin: Option<Perlin>,
}

impl TextureSampler<'_> {
    /// Scalar pattern in roughly `[-1, 1]` at local coordinates `q`.
    fn pattern(&self, q: [f64; 3]) -> f64 {
        let t = self.tex;
        let w = std::f64::consts::TAU / t.wavelength;
        match t.family {
            TextureFamily::Checker => {
                let (ca, sa) = (t.angle.cos(), t.angle.sin());
                let s = ca * q[0] + sa * q[1];
                let v = -sa * q[0] + ca * q[1];
                (CHECKER_SHARPNESS * (w * s + t.phase).sin() * (w * v).sin()).tanh() / CHECKER_SHARPNESS.tanh()
            }
            TextureFamily::Stripes => {
                let s = t.angle.cos() * q[0] + t.angle.sin() * q[1];
                (w * s + t.phase).sin()
            }
            TextureFamily::Noise => {
                let p = self.perlin.as_ref().expect("noise sampler");
                let u = [q[0] / t.wavelength, q[1] / t.wavelength, q[2] / t.wavelength];
                let a = p.get(u);
                let b = p.get([2.0 * u[0] + 17.0, 2.0 * u[1] + 31.0, 2.0 * u[2]]);
                (0.8 * a + 0.2 * b) * 1.6
            }
        }
    }

    pub fn color(&self, q: [f64; 3]) -> [f64; 3] {
        let p = self.pattern(q);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (self.tex.base[c] + self.tex.amplitude[c] * p).clamp(0.0, 1.0);
        }
        out
    }
}
