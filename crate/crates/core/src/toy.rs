//! Bundled synthetic mixtures.
//!
//! `toy16` is a 4-class, 16-dimensional mixture centered at 0.5. Class `c`
//! has bits `(c & 1, c >> 1)`. Coordinates 0 and 1 carry the bits as small,
//! very precise shifts (easy to read off, cheap to flip); coordinates 2..16
//! carry them as larger, noisy shifts that only separate the classes
//! collectively.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::score::{Component, GaussianMixture};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toy16 {
    pub fragile_shift: f64,
    pub fragile_std: f64,
    pub weak_shift: f64,
    pub weak_std: f64,
}

impl Default for Toy16 {
    fn default() -> Self {
        Self {
            fragile_shift: 0.1,
            fragile_std: 0.02,
            weak_shift: 0.15,
            weak_std: 0.2,
        }
    }
}

pub const TOY16_DIM: usize = 16;
pub const TOY16_CLASSES: usize = 4;

impl Toy16 {
    pub fn mixture(&self) -> Result<GaussianMixture> {
        let components = (0..TOY16_CLASSES)
            .map(|c| {
                let bits = [c & 1, (c >> 1) & 1];
                let sign = |b: usize| if b == 1 { 1.0 } else { -1.0 };
                let mut mean = vec![0.5; TOY16_DIM];
                let mut var = vec![0.0; TOY16_DIM];
                for (j, &b) in bits.iter().enumerate() {
                    mean[j] += sign(b) * self.fragile_shift;
                    var[j] = self.fragile_std * self.fragile_std;
                }
                for i in 2..TOY16_DIM {
                    mean[i] += sign(bits[i % 2]) * self.weak_shift;
                    var[i] = self.weak_std * self.weak_std;
                }
                Component {
                    weight: 1.0 / TOY16_CLASSES as f64,
                    mean,
                    var,
                    class: c,
                }
            })
            .collect();
        GaussianMixture::new(components, TOY16_CLASSES)
    }
}

/// Two overlapping classes in 2D, two components each.
pub fn toy2d() -> Result<GaussianMixture> {
    let comp = |mean: [f64; 2], class| Component {
        weight: 0.25,
        mean: mean.to_vec(),
        var: vec![0.2, 0.2],
        class,
    };
    GaussianMixture::new(
        vec![
            comp([-1.0, -0.5], 0),
            comp([-0.5, 1.0], 0),
            comp([1.0, 0.5], 1),
            comp([0.5, -1.0], 1),
        ],
        2,
    )
}

/// `n` i.i.d. labeled draws.
pub fn sample_dataset<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    n: usize,
    rng: &mut R,
) -> Vec<(Vec<f64>, usize)> {
    (0..n).map(|_| gm.sample(rng)).collect()
}
