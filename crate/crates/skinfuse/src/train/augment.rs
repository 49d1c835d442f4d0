//! Image augmentation: axis flips, quarter-turn rotations, integer shifts,
//! bilinear rescaling and brightness jitter. A sampled plan is a plain value,
//! so the same plan can be replayed on either modality or at test time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Out-of-frame pixels take the storage midpoint, which standardisation
/// maps to zero.
const FILL: f64 = 0.5;

/// Which augmentation families may fire during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentToggles {
    pub flip: bool,
    pub rotate: bool,
    pub shift: bool,
    pub scale: bool,
    pub brighten: bool,
}

impl AugmentToggles {
    pub fn all() -> Self {
        AugmentToggles { flip: true, rotate: true, shift: true, scale: true, brighten: true }
    }

    pub fn none() -> Self {
        AugmentToggles { flip: false, rotate: false, shift: false, scale: false, brighten: false }
    }
}

/// A concrete augmentation, applied in the fixed order: flips, rotation,
/// shift, rescale, brightness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Clockwise quarter turns, 0..=3. Odd turns need square images.
    pub quarter_turns: u8,
    /// (down, right) pixel shift.
    pub shift: (isize, isize),
    /// Zoom factor about the centre; None leaves geometry alone.
    pub scale: Option<f64>,
    /// Multiplicative brightness; the result is clamped back to [0, 1].
    pub brightness: Option<f64>,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        AugmentPlan {
            flip_h: false,
            flip_v: false,
            quarter_turns: 0,
            shift: (0, 0),
            scale: None,
            brightness: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Samples one plan. Each enabled family fires with probability 1/2; the
/// draw order is fixed, so a given RNG state always yields the same plan.
pub fn sample_plan(
    toggles: &AugmentToggles,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> AugmentPlan {
    let mut plan = AugmentPlan::identity();
    if toggles.flip {
        plan.flip_h = rng.gen_bool(0.5);
        plan.flip_v = rng.gen_bool(0.5);
    }
    if toggles.rotate && rng.gen_bool(0.5) {
        plan.quarter_turns =
            if height == width { rng.gen_range(1..=3) as u8 } else { 2 };
    }
    if toggles.shift && rng.gen_bool(0.5) {
        let (mh, mw) = (height as isize / 10, width as isize / 10);
        plan.shift = (rng.gen_range(-mh..=mh), rng.gen_range(-mw..=mw));
    }
    if toggles.scale && rng.gen_bool(0.5) {
        plan.scale = Some(rng.gen_range(0.9..=1.1));
    }
    if toggles.brighten && rng.gen_bool(0.5) {
        plan.brightness = Some(rng.gen_range(0.9..=1.1));
    }
    plan
}

/// A small fixed view set for test-time averaging: the identity plus the
/// two axis flips.
pub fn default_tta_plans() -> Vec<AugmentPlan> {
    let mut h = AugmentPlan::identity();
    h.flip_h = true;
    let mut v = AugmentPlan::identity();
    v.flip_v = true;
    vec![AugmentPlan::identity(), h, v]
}

pub fn apply(img: &Tensor, plan: &AugmentPlan) -> Result<Tensor> {
    let shape = img.shape().to_vec();
    let &[h, w, c] = shape.as_slice() else {
        return Err(Error::shape("augment", format!("needs [H, W, C], got {:?}", shape)));
    };
    if plan.quarter_turns % 2 == 1 && h != w {
        return Err(Error::Contract(format!(
            "odd quarter turns need a square image, got {}x{}",
            h, w
        )));
    }
    if plan.quarter_turns > 3 {
        return Err(Error::Contract(format!("quarter_turns must be 0..=3, got {}", plan.quarter_turns)));
    }
    if let Some(f) = plan.scale {
        if !f.is_finite() || f <= 0.0 {
            return Err(Error::Contract(format!("scale factor must be positive, got {}", f)));
        }
    }

    let src = img.data();
    let mut cur: Vec<f64>;

    // Flips and rotations permute pixels exactly.
    let (fh, fv, q) = (plan.flip_h, plan.flip_v, plan.quarter_turns);
    cur = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            // Invert the clockwise rotation to find the source pixel, then
            // the flips (applied before rotation, so inverted after).
            let (mut sy, mut sx) = match q {
                0 => (y, x),
                1 => (h - 1 - x, y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (x, w - 1 - y),
            };
            if fv {
                sy = h - 1 - sy;
            }
            if fh {
                sx = w - 1 - sx;
            }
            cur.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx) * c + c]);
        }
    }

    let (dy, dx) = plan.shift;
    if (dy, dx) != (0, 0) {
        let prev = cur;
        cur = vec![FILL; prev.len()];
        for y in 0..h as isize {
            let sy = y - dy;
            if !(0..h as isize).contains(&sy) {
                continue;
            }
            for x in 0..w as isize {
                let sx = x - dx;
                if !(0..w as isize).contains(&sx) {
                    continue;
                }
                let d = ((y as usize) * w + x as usize) * c;
                let s = ((sy as usize) * w + sx as usize) * c;
                cur[d..d + c].copy_from_slice(&prev[s..s + c]);
            }
        }
    }

    if let Some(f) = plan.scale {
        let prev = cur;
        cur = vec![FILL; prev.len()];
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        for y in 0..h {
            let sy = (y as f64 - cy) / f + cy;
            for x in 0..w {
                let sx = (x as f64 - cx) / f + cx;
                if sy < 0.0 || sy > (h - 1) as f64 || sx < 0.0 || sx > (w - 1) as f64 {
                    continue;
                }
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
                for ch in 0..c {
                    let p = |yy: usize, xx: usize| prev[(yy * w + xx) * c + ch];
                    let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                    let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                    cur[(y * w + x) * c + ch] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }

    if let Some(b) = plan.brightness {
        for v in &mut cur {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }

    Tensor::new(shape, cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn img(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w, 3], |i| ((i * 2654435761) % 1000) as f64 / 1000.0)
    }

    fn with(f: impl FnOnce(&mut AugmentPlan)) -> AugmentPlan {
        let mut p = AugmentPlan::identity();
        f(&mut p);
        p
    }

    #[test]
    fn identity_plan_is_a_bit_exact_copy() {
        let x = img(6, 4);
        assert!(apply(&x, &AugmentPlan::identity()).unwrap().bit_eq(&x));
    }

    #[test]
    fn flips_are_involutions() {
        let x = img(5, 8);
        for plan in [with(|p| p.flip_h = true), with(|p| p.flip_v = true)] {
            let once = apply(&x, &plan).unwrap();
            assert!(!once.bit_eq(&x));
            assert!(apply(&once, &plan).unwrap().bit_eq(&x), "{plan:?} twice = identity");
        }
    }

    #[test]
    fn four_quarter_turns_return_home() {
        let x = img(6, 6);
        let quarter = with(|p| p.quarter_turns = 1);
        let mut y = x.clone();
        for _ in 0..4 {
            y = apply(&y, &quarter).unwrap();
        }
        assert!(y.bit_eq(&x));
        let twice = apply(&apply(&x, &quarter).unwrap(), &quarter).unwrap();
        assert!(twice.bit_eq(&apply(&x, &with(|p| p.quarter_turns = 2)).unwrap()));
    }

    #[test]
    fn odd_turns_on_non_square_are_rejected_but_sampling_avoids_them() {
        let x = img(4, 8);
        assert!(apply(&x, &with(|p| p.quarter_turns = 1)).is_err());
        assert!(apply(&x, &with(|p| p.quarter_turns = 2)).is_ok());
        let mut rng = Streams::new(0).rng("aug");
        for _ in 0..200 {
            let p = sample_plan(&AugmentToggles::all(), 4, 8, &mut rng);
            assert!(p.quarter_turns % 2 == 0, "sampler must not rotate 4x8 by 90");
        }
    }

    #[test]
    fn shift_moves_content_and_fills_neutral() {
        let mut x = Tensor::zeros(&[3, 3, 1]);
        x.data_mut()[4] = 1.0; // centre pixel
        let y = apply(&x, &with(|p| p.shift = (1, 1))).unwrap();
        assert_eq!(y.at(&[2, 2, 0]), 1.0, "centre moved down-right");
        assert_eq!(y.at(&[0, 1, 0]), FILL, "vacated edge takes the neutral fill");
        let back = apply(&y, &with(|p| p.shift = (-1, -1))).unwrap();
        assert_eq!(back.at(&[1, 1, 0]), 1.0);
    }

    #[test]
    fn unit_scale_is_exact_and_zoom_keeps_range() {
        let x = img(8, 8);
        assert!(apply(&x, &with(|p| p.scale = Some(1.0))).unwrap().bit_eq(&x));
        for f in [0.9, 1.1] {
            let y = apply(&x, &with(|p| p.scale = Some(f))).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn brightness_clamps_to_storage_range() {
        let mut x = Tensor::zeros(&[1, 2, 1]);
        x.data_mut().copy_from_slice(&[0.95, 0.5]);
        let y = apply(&x, &with(|p| p.brightness = Some(1.1))).unwrap();
        assert_eq!(y.data(), &[1.0, 0.55]);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_toggles() {
        let mut a = Streams::new(5).rng("aug");
        let mut b = Streams::new(5).rng("aug");
        for _ in 0..50 {
            assert_eq!(
                sample_plan(&AugmentToggles::all(), 32, 32, &mut a),
                sample_plan(&AugmentToggles::all(), 32, 32, &mut b)
            );
        }
        let mut rng = Streams::new(1).rng("aug");
        for _ in 0..100 {
            assert!(sample_plan(&AugmentToggles::none(), 32, 32, &mut rng).is_identity());
        }
        let mut rng = Streams::new(2).rng("aug");
        let fired = (0..100)
            .map(|_| sample_plan(&AugmentToggles::all(), 32, 32, &mut rng))
            .filter(|p| !p.is_identity())
            .count();
        assert!(fired > 80, "with five families at p=1/2 nearly every plan fires something");
    }

    #[test]
    fn default_tta_plans_start_with_identity() {
        let plans = default_tta_plans();
        assert_eq!(plans.len(), 3);
        assert!(plans[0].is_identity());
        assert!(plans[1].flip_h && plans[2].flip_v);
    }
}
