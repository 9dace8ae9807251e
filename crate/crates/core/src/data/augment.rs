use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Range for randomly drawn brightness/contrast factors.
const PHOTOMETRIC_RANGE: (f32, f32) = (0.7, 1.3);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageShape {
    /// `[h, w, c]` images; a flat `[d]` sample is treated as `1 x d x 1`.
    pub fn from_sample_shape(shape: &[usize]) -> Self {
        match shape {
            [h, w, c] => Self { h: *h, w: *w, c: *c },
            _ => Self { h: 1, w: shape.iter().product(), c: 1 },
        }
    }
}

/// A concrete, label-preserving transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
    Brightness(f32),
    Contrast(f32),
}

impl Transform {
    pub fn is_geometric(&self) -> bool {
        !matches!(self, Transform::Brightness(_) | Transform::Contrast(_))
    }
}

/// A transform tag as written in configs: fixed (`rot90`, `brightness=1.2`)
/// or with a randomly drawn factor (`brightness`, `contrast`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformSpec {
    Fixed(Transform),
    RandomBrightness,
    RandomContrast,
}

impl TransformSpec {
    pub fn is_geometric(&self) -> bool {
        matches!(self, TransformSpec::Fixed(t) if t.is_geometric())
    }

    fn resolve<R: Rng>(&self, rng: &mut R) -> Transform {
        let (lo, hi) = PHOTOMETRIC_RANGE;
        match *self {
            TransformSpec::Fixed(t) => t,
            TransformSpec::RandomBrightness => Transform::Brightness(rng.gen_range(lo..=hi)),
            TransformSpec::RandomContrast => Transform::Contrast(rng.gen_range(lo..=hi)),
        }
    }
}

impl FromStr for TransformSpec {
    type Err = DataError;

    fn from_str(tag: &str) -> Result<Self, DataError> {
        let unknown = || DataError::UnknownTransform(tag.to_string());
        let (name, arg) = match tag.split_once('=') {
            Some((n, a)) => (n.trim(), Some(a.trim().parse::<f32>().map_err(|_| unknown())?)),
            None => (tag.trim(), None),
        };
        if arg.is_some_and(|f| !(f.is_finite() && f >= 0.0)) {
            return Err(unknown());
        }
        Ok(match (name, arg) {
            ("hflip", None) => TransformSpec::Fixed(Transform::HFlip),
            ("vflip", None) => TransformSpec::Fixed(Transform::VFlip),
            ("rot90", None) => TransformSpec::Fixed(Transform::Rot90),
            ("rot180", None) => TransformSpec::Fixed(Transform::Rot180),
            ("rot270", None) => TransformSpec::Fixed(Transform::Rot270),
            ("brightness", None) => TransformSpec::RandomBrightness,
            ("contrast", None) => TransformSpec::RandomContrast,
            ("brightness", Some(f)) => TransformSpec::Fixed(Transform::Brightness(f)),
            ("contrast", Some(f)) => TransformSpec::Fixed(Transform::Contrast(f)),
            _ => return Err(unknown()),
        })
    }
}

fn remap(src: &[f32], s: ImageShape, at: impl Fn(usize, usize) -> (usize, usize)) -> Vec<f32> {
    let mut out = Vec::with_capacity(src.len());
    for r in 0..s.h {
        for col in 0..s.w {
            let (sr, sc) = at(r, col);
            let base = (sr * s.w + sc) * s.c;
            out.extend_from_slice(&src[base..base + s.c]);
        }
    }
    out
}

/// Applies one transform. Output keeps the input's shape and stays in [0, 1].
/// Quarter turns need a square image.
pub fn apply_transform(image: &[f32], s: ImageShape, t: Transform) -> Result<Vec<f32>, DataError> {
    let (h, w) = (s.h, s.w);
    if matches!(t, Transform::Rot90 | Transform::Rot270) && h != w {
        return Err(DataError::Transform { transform: t, h, w });
    }
    Ok(match t {
        Transform::HFlip => remap(image, s, |r, c| (r, w - 1 - c)),
        Transform::VFlip => remap(image, s, |r, c| (h - 1 - r, c)),
        // clockwise quarter turn
        Transform::Rot90 => remap(image, s, |r, c| (h - 1 - c, r)),
        Transform::Rot180 => remap(image, s, |r, c| (h - 1 - r, w - 1 - c)),
        Transform::Rot270 => remap(image, s, |r, c| (c, w - 1 - r)),
        Transform::Brightness(f) => image.iter().map(|&v| (v * f).clamp(0.0, 1.0)).collect(),
        Transform::Contrast(f) => {
            let mean = image.iter().map(|&v| f64::from(v)).sum::<f64>() / image.len().max(1) as f64;
            let m = mean as f32;
            image.iter().map(|&v| (m + f * (v - m)).clamp(0.0, 1.0)).collect()
        }
    })
}

/// Applies `specs` in order, drawing random factors from `rng`; returns the
/// image and the concrete transforms used.
pub fn augment<R: Rng>(
    image: &[f32],
    s: ImageShape,
    specs: &[TransformSpec],
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<Transform>), DataError> {
    let mut cur = image.to_vec();
    let mut used = Vec::with_capacity(specs.len());
    for spec in specs {
        let t = spec.resolve(rng);
        cur = apply_transform(&cur, s, t)?;
        used.push(t);
    }
    Ok((cur, used))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQ: ImageShape = ImageShape { h: 2, w: 2, c: 1 };

    #[test]
    fn hand_geometry() {
        // a b
        // c d
        let img = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(apply_transform(&img, SQ, Transform::HFlip).unwrap(), vec![0.2, 0.1, 0.4, 0.3]);
        assert_eq!(apply_transform(&img, SQ, Transform::VFlip).unwrap(), vec![0.3, 0.4, 0.1, 0.2]);
        // clockwise: c a / d b
        assert_eq!(apply_transform(&img, SQ, Transform::Rot90).unwrap(), vec![0.3, 0.1, 0.4, 0.2]);
        assert_eq!(apply_transform(&img, SQ, Transform::Rot180).unwrap(), vec![0.4, 0.3, 0.2, 0.1]);
        assert_eq!(apply_transform(&img, SQ, Transform::Rot270).unwrap(), vec![0.2, 0.4, 0.1, 0.3]);
    }

    #[test]
    fn channels_move_together() {
        let s = ImageShape { h: 1, w: 2, c: 2 };
        let img = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(apply_transform(&img, s, Transform::HFlip).unwrap(), vec![0.3, 0.4, 0.1, 0.2]);
    }

    #[test]
    fn quarter_turn_needs_square() {
        let s = ImageShape { h: 1, w: 3, c: 1 };
        assert!(matches!(apply_transform(&[0.0; 3], s, Transform::Rot90), Err(DataError::Transform { .. })));
        assert!(apply_transform(&[0.0; 3], s, Transform::Rot180).is_ok());
    }

    #[test]
    fn photometric_clips() {
        let img = [0.2, 0.9];
        let b = apply_transform(&img, ImageShape::from_sample_shape(&[2]), Transform::Brightness(2.0)).unwrap();
        assert_eq!(b, vec![0.4, 1.0]);
        let c = apply_transform(&img, ImageShape::from_sample_shape(&[2]), Transform::Contrast(0.0)).unwrap();
        assert!((c[0] - 0.55).abs() < 1e-6 && (c[1] - 0.55).abs() < 1e-6);
    }

    #[test]
    fn tags_parse() {
        assert_eq!("rot90".parse::<TransformSpec>().unwrap(), TransformSpec::Fixed(Transform::Rot90));
        assert_eq!("contrast".parse::<TransformSpec>().unwrap(), TransformSpec::RandomContrast);
        assert_eq!(
            "brightness=1.5".parse::<TransformSpec>().unwrap(),
            TransformSpec::Fixed(Transform::Brightness(1.5))
        );
        for bad in ["hue", "rot45", "hflip=2", "brightness=x", "brightness=-1"] {
            assert!(matches!(bad.parse::<TransformSpec>(), Err(DataError::UnknownTransform(_))), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn transforms_preserve_shape_and_range(
            side in 1usize..6,
            c in 1usize..4,
            seed in any::<u64>(),
            tags in prop::collection::vec(
                prop::sample::select(vec!["hflip", "vflip", "rot90", "rot180", "rot270", "brightness", "contrast"]),
                0..5,
            ),
        ) {
            let s = ImageShape { h: side, w: side, c };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f32> = (0..side * side * c).map(|_| rng.gen::<f32>()).collect();
            let specs: Vec<TransformSpec> = tags.iter().map(|t| t.parse().unwrap()).collect();
            let (out, used) = augment(&img, s, &specs, &mut rng).unwrap();
            prop_assert_eq!(out.len(), img.len());
            prop_assert_eq!(used.len(), specs.len());
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn four_quarter_turns_identity(side in 1usize..6, seed in any::<u64>()) {
            let s = ImageShape { h: side, w: side, c: 2 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f32> = (0..side * side * 2).map(|_| rng.gen::<f32>()).collect();
            let mut cur = img.clone();
            for _ in 0..4 {
                cur = apply_transform(&cur, s, Transform::Rot90).unwrap();
            }
            prop_assert_eq!(cur, img);
        }
    }
}
