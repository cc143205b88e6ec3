//! Patch sampling, augmentation, and the nested center-crop aperture pyramid.
//! Apertures keep the original voxel resolution: every pyramid level is an
//! exact sub-array of the level above it, never a resampled copy.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

pub type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
    pub shape: Shape3,
    /// Patch origin in the (possibly zero-padded) source volume.
    pub corner: Shape3,
    pub case_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AperturePyramid {
    /// crops[0] is the full patch; crops[k] is the centered half-size crop of
    /// crops[k-1]. All levels share the patch's voxel resolution.
    pub crops: Vec<Vec<f64>>,
    pub sizes: Vec<Shape3>,
    /// Cumulative offsets locating each crop inside crops[0].
    pub offsets: Vec<Shape3>,
}

/// Augmentation probabilities and ranges. Geometric transforms apply to both
/// image and labels; intensity transforms to the image only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rot90_prob: f64,
    pub intensity_scale_prob: f64,
    pub intensity_shift_prob: f64,
    pub intensity_scale_range: (f64, f64),
    pub intensity_shift_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rot90_prob: 0.5,
            intensity_scale_prob: 1.0,
            intensity_shift_prob: 1.0,
            intensity_scale_range: (0.9, 1.1),
            intensity_shift_range: (-0.1, 0.1),
        }
    }
}

#[inline]
fn idx(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape.1 + y) * shape.2 + x
}

/// Uniform random patch extraction. Volumes smaller than the patch are
/// zero-padded (labels padded with background) before the corner is drawn.
pub fn sample_patch(
    v: &Volume,
    l: &LabelVolume,
    size: Shape3,
    rng: &mut ChaCha12Rng,
) -> Result<PatchSample> {
    if v.shape != l.shape {
        return Err(Error::Shape(format!(
            "volume shape {:?} != label shape {:?}",
            v.shape, l.shape
        )));
    }
    if size.0 == 0 || size.1 == 0 || size.2 == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let padded = (v.shape.0.max(size.0), v.shape.1.max(size.1), v.shape.2.max(size.2));
    let corner = (
        rng.gen_range(0..=padded.0 - size.0),
        rng.gen_range(0..=padded.1 - size.1),
        rng.gen_range(0..=padded.2 - size.2),
    );
    let mut image = vec![0f64; size.0 * size.1 * size.2];
    let mut labels = vec![0u8; size.0 * size.1 * size.2];
    for z in 0..size.0 {
        let sz = corner.0 + z;
        for y in 0..size.1 {
            let sy = corner.1 + y;
            for x in 0..size.2 {
                let sx = corner.2 + x;
                if sz < v.shape.0 && sy < v.shape.1 && sx < v.shape.2 {
                    image[idx(size, z, y, x)] = v.at(sz, sy, sx) as f64;
                    labels[idx(size, z, y, x)] = l.at(sz, sy, sx);
                }
            }
        }
    }
    Ok(PatchSample { image, labels, shape: size, corner, case_id: v.case_id.clone() })
}

/// Exact centered sub-array copy: out[i] = in[o + i] with o = (in - out)/2
/// per axis. Errors when a margin is odd.
pub fn center_crop<T: Copy>(x: &[T], in_shape: Shape3, out_shape: Shape3) -> Result<Vec<T>> {
    if out_shape.0 > in_shape.0 || out_shape.1 > in_shape.1 || out_shape.2 > in_shape.2 {
        return Err(Error::Shape(format!(
            "crop shape {out_shape:?} exceeds input shape {in_shape:?}"
        )));
    }
    let margins = (
        in_shape.0 - out_shape.0,
        in_shape.1 - out_shape.1,
        in_shape.2 - out_shape.2,
    );
    if !margins.0.is_multiple_of(2) || !margins.1.is_multiple_of(2) || !margins.2.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "crop from {in_shape:?} to {out_shape:?} has an odd margin"
        )));
    }
    let o = (margins.0 / 2, margins.1 / 2, margins.2 / 2);
    let mut out = Vec::with_capacity(out_shape.0 * out_shape.1 * out_shape.2);
    for z in 0..out_shape.0 {
        for y in 0..out_shape.1 {
            let row = idx(in_shape, o.0 + z, o.1 + y, o.2);
            out.extend_from_slice(&x[row..row + out_shape.2]);
        }
    }
    Ok(out)
}

/// Offset of an out-shaped centered crop inside an in-shaped array.
pub fn center_offset(in_shape: Shape3, out_shape: Shape3) -> Shape3 {
    (
        (in_shape.0 - out_shape.0) / 2,
        (in_shape.1 - out_shape.1) / 2,
        (in_shape.2 - out_shape.2) / 2,
    )
}

/// Builds the A-level pyramid of nested half-size center crops of the image.
pub fn build_aperture_pyramid(p: &PatchSample, apertures: usize) -> Result<AperturePyramid> {
    if apertures < 1 {
        return Err(Error::Config("aperture count must be >= 1".into()));
    }
    let div = 1usize << (apertures - 1);
    for (name, n) in [("H", p.shape.0), ("W", p.shape.1), ("D", p.shape.2)] {
        if n % div != 0 {
            return Err(Error::Shape(format!(
                "patch axis {name}={n} is not divisible by 2^(A-1)={div}"
            )));
        }
    }
    let mut crops = vec![p.image.clone()];
    let mut sizes = vec![p.shape];
    let mut offsets = vec![(0usize, 0usize, 0usize)];
    for k in 1..apertures {
        let prev = sizes[k - 1];
        let half = (prev.0 / 2, prev.1 / 2, prev.2 / 2);
        let crop = center_crop(&crops[k - 1], prev, half)?;
        let step = center_offset(prev, half);
        let prev_off = offsets[k - 1];
        crops.push(crop);
        sizes.push(half);
        offsets.push((prev_off.0 + step.0, prev_off.1 + step.1, prev_off.2 + step.2));
    }
    Ok(AperturePyramid { crops, sizes, offsets })
}

/// Flips a 3D array along one axis (0, 1, or 2).
pub fn flip_axis<T: Copy>(x: &[T], shape: Shape3, axis: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for z in 0..shape.0 {
        for y in 0..shape.1 {
            for xx in 0..shape.2 {
                let (sz, sy, sx) = match axis {
                    0 => (shape.0 - 1 - z, y, xx),
                    1 => (z, shape.1 - 1 - y, xx),
                    2 => (z, y, shape.2 - 1 - xx),
                    _ => panic!("axis must be 0..3"),
                };
                out[idx(shape, z, y, xx)] = x[idx(shape, sz, sy, sx)];
            }
        }
    }
    out
}

/// Rotates 90° in the axial plane (the first two axes); requires them equal.
pub fn rot90_axial<T: Copy>(x: &[T], shape: Shape3) -> Vec<T> {
    assert_eq!(shape.0, shape.1, "axial rotation requires square in-plane dims");
    let n = shape.0;
    let mut out = x.to_vec();
    for z in 0..n {
        for y in 0..n {
            for xx in 0..shape.2 {
                // (z, y) -> (y, n-1-z): one quarter turn.
                out[idx(shape, y, n - 1 - z, xx)] = x[idx(shape, z, y, xx)];
            }
        }
    }
    out
}

/// Applies the configured augmentations. RNG consumption order is fixed
/// (flip draws per axis, rotation, scale, shift) so runs are reproducible
/// regardless of which transforms fire.
pub fn augment(p: &PatchSample, cfg: &AugmentConfig, rng: &mut ChaCha12Rng) -> PatchSample {
    let mut image = p.image.clone();
    let mut labels = p.labels.clone();
    for axis in 0..3 {
        let u: f64 = rng.gen();
        if u < cfg.flip_prob {
            image = flip_axis(&image, p.shape, axis);
            labels = flip_axis(&labels, p.shape, axis);
        }
    }
    let u: f64 = rng.gen();
    let quarter_turns = rng.gen_range(1..4usize);
    if u < cfg.rot90_prob && p.shape.0 == p.shape.1 {
        for _ in 0..quarter_turns {
            image = rot90_axial(&image, p.shape);
            labels = rot90_axial(&labels, p.shape);
        }
    }
    let u: f64 = rng.gen();
    let scale = rng.gen_range(cfg.intensity_scale_range.0..=cfg.intensity_scale_range.1);
    if u < cfg.intensity_scale_prob {
        for v in &mut image {
            *v *= scale;
        }
    }
    let u: f64 = rng.gen();
    let shift = rng.gen_range(cfg.intensity_shift_range.0..=cfg.intensity_shift_range.1);
    if u < cfg.intensity_shift_prob {
        for v in &mut image {
            *v += shift;
        }
    }
    PatchSample { image, labels, shape: p.shape, corner: p.corner, case_id: p.case_id.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_volume(shape: Shape3) -> (Volume, LabelVolume) {
        let n = shape.0 * shape.1 * shape.2;
        let data: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        (
            Volume::new(shape, (1.0, 1.0, 1.0), data, "toy").unwrap(),
            LabelVolume::new(shape, (1.0, 1.0, 1.0), labels, 3).unwrap(),
        )
    }

    #[test]
    fn full_size_patch_is_the_volume() {
        let (v, l) = toy_volume((4, 4, 4));
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = sample_patch(&v, &l, (4, 4, 4), &mut rng).unwrap();
        assert_eq!(p.corner, (0, 0, 0));
        assert_eq!(p.image.len(), 64);
        assert!(p.image.iter().zip(&v.data).all(|(a, &b)| *a == b as f64));
        assert_eq!(p.labels, l.labels);
    }

    #[test]
    fn fixed_seed_reproduces_corner() {
        let (v, l) = toy_volume((16, 16, 16));
        let mut r1 = ChaCha12Rng::seed_from_u64(42);
        let mut r2 = ChaCha12Rng::seed_from_u64(42);
        let p1 = sample_patch(&v, &l, (8, 8, 8), &mut r1).unwrap();
        let p2 = sample_patch(&v, &l, (8, 8, 8), &mut r2).unwrap();
        assert_eq!(p1.corner, p2.corner);
        assert_eq!(p1.image, p2.image);
    }

    #[test]
    fn corner_marginals_are_uniform() {
        // 10^4 draws on a 16³ volume with an 8³ patch: corners live in
        // {0..8}³. Chi-squared against uniform with 8 degrees of freedom;
        // the 99th percentile of chi2(8) is 20.09, so requiring the statistic
        // below that is the p > 0.01 acceptance.
        const CHI2_8_P99: f64 = 20.09;
        let (v, l) = toy_volume((16, 16, 16));
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let mut counts = [[0usize; 9]; 3];
        const DRAWS: usize = 10_000;
        for _ in 0..DRAWS {
            let p = sample_patch(&v, &l, (8, 8, 8), &mut rng).unwrap();
            counts[0][p.corner.0] += 1;
            counts[1][p.corner.1] += 1;
            counts[2][p.corner.2] += 1;
        }
        let expected = DRAWS as f64 / 9.0;
        for (axis, c) in counts.iter().enumerate() {
            let chi2: f64 = c.iter().map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            }).sum();
            assert!(chi2 < CHI2_8_P99, "axis {axis} chi2 {chi2} >= {CHI2_8_P99}");
        }
    }

    #[test]
    fn small_volume_is_zero_padded() {
        let (v, l) = toy_volume((4, 4, 4));
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let p = sample_patch(&v, &l, (8, 8, 8), &mut rng).unwrap();
        assert_eq!(p.corner, (0, 0, 0));
        // Outside the original extent everything is zero.
        assert_eq!(p.image[idx((8, 8, 8), 7, 7, 7)], 0.0);
        assert_eq!(p.labels[idx((8, 8, 8), 0, 0, 5)], 0);
        // Inside it matches the source.
        assert_eq!(p.image[idx((8, 8, 8), 1, 2, 3)], v.at(1, 2, 3) as f64);
    }

    #[test]
    fn center_crop_index_arithmetic() {
        // 8³ array with value = z index, cropped to 4³: values are {2,3,4,5}.
        let shape = (8, 8, 8);
        let x: Vec<usize> = (0..512).map(|i| i / 64).collect();
        let c = center_crop(&x, shape, (4, 4, 4)).unwrap();
        for z in 0..4 {
            for i in 0..16 {
                assert_eq!(c[z * 16 + i], z + 2);
            }
        }
        // Identity crop.
        let same = center_crop(&x, shape, shape).unwrap();
        assert_eq!(same, x);
        // 128³ -> 64³ has offset (32,32,32).
        assert_eq!(center_offset((128, 128, 128), (64, 64, 64)), (32, 32, 32));
    }

    #[test]
    fn pyramid_sizes_and_exactness() {
        let shape = (32, 32, 32);
        let image: Vec<f64> = (0..32 * 32 * 32).map(|i| (i as f64) * 0.01).collect();
        let p = PatchSample {
            image,
            labels: vec![0; 32 * 32 * 32],
            shape,
            corner: (0, 0, 0),
            case_id: "t".into(),
        };
        let pyr = build_aperture_pyramid(&p, 4).unwrap();
        assert_eq!(pyr.sizes, vec![(32, 32, 32), (16, 16, 16), (8, 8, 8), (4, 4, 4)]);
        assert_eq!(pyr.offsets, vec![(0, 0, 0), (8, 8, 8), (12, 12, 12), (14, 14, 14)]);
        // Every voxel of every level equals the source voxel at the summed
        // offset -- exact equality, no interpolation anywhere.
        for k in 0..4 {
            let (sz, off) = (pyr.sizes[k], pyr.offsets[k]);
            for z in 0..sz.0 {
                for y in 0..sz.1 {
                    for x in 0..sz.2 {
                        let a = pyr.crops[k][idx(sz, z, y, x)];
                        let b = p.image[idx(shape, off.0 + z, off.1 + y, off.2 + x)];
                        assert!(a == b, "level {k} voxel ({z},{y},{x}) differs");
                    }
                }
            }
        }
        // A=1 degenerates to the patch itself.
        let single = build_aperture_pyramid(&p, 1).unwrap();
        assert_eq!(single.crops.len(), 1);
        assert_eq!(single.crops[0], p.image);
    }

    #[test]
    fn augment_identity_and_involution() {
        let shape = (8, 8, 8);
        let image: Vec<f64> = (0..512).map(|i| (i as f64).cos()).collect();
        let labels: Vec<u8> = (0..512).map(|i| (i % 4) as u8).collect();
        let p = PatchSample { image, labels, shape, corner: (0, 0, 0), case_id: "a".into() };
        let off = AugmentConfig {
            flip_prob: 0.0,
            rot90_prob: 0.0,
            intensity_scale_prob: 0.0,
            intensity_shift_prob: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let q = augment(&p, &off, &mut rng);
        assert_eq!(q.image, p.image);
        assert_eq!(q.labels, p.labels);

        let f = flip_axis(&p.image, shape, 1);
        let ff = flip_axis(&f, shape, 1);
        assert_eq!(ff, p.image);

        // Four quarter turns are the identity.
        let mut r = p.image.clone();
        for _ in 0..4 {
            r = rot90_axial(&r, shape);
        }
        assert_eq!(r, p.image);
    }

    #[test]
    fn geometric_augment_preserves_class_counts() {
        let shape = (8, 8, 8);
        let labels: Vec<u8> = (0..512).map(|i| ((i * 7) % 5) as u8).collect();
        let image: Vec<f64> = (0..512).map(|i| i as f64).collect();
        let p = PatchSample { image, labels, shape, corner: (0, 0, 0), case_id: "c".into() };
        let geo = AugmentConfig {
            flip_prob: 1.0,
            rot90_prob: 1.0,
            intensity_scale_prob: 0.0,
            intensity_shift_prob: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let q = augment(&p, &geo, &mut rng);
        let count = |l: &[u8], c: u8| l.iter().filter(|&&v| v == c).count();
        for c in 0..5 {
            assert_eq!(count(&p.labels, c), count(&q.labels, c));
        }
    }

    #[test]
    fn pyramid_commutes_with_center_preserving_transforms() {
        let shape = (16, 16, 16);
        let image: Vec<f64> = (0..4096).map(|i| ((i * 31 % 97) as f64) * 0.1).collect();
        let p = PatchSample {
            image: image.clone(),
            labels: vec![0; 4096],
            shape,
            corner: (0, 0, 0),
            case_id: "p".into(),
        };
        // flip each axis, then one axial rotation
        for t in 0..4 {
            let transform = |x: &[f64], s: Shape3| -> Vec<f64> {
                match t {
                    0..=2 => flip_axis(x, s, t),
                    _ => rot90_axial(x, s),
                }
            };
            let tp = PatchSample { image: transform(&p.image, shape), ..p.clone() };
            let pyr_then = build_aperture_pyramid(&tp, 3).unwrap();
            let pyr_first = build_aperture_pyramid(&p, 3).unwrap();
            for k in 0..3 {
                let transformed_level = transform(&pyr_first.crops[k], pyr_first.sizes[k]);
                assert_eq!(pyr_then.crops[k], transformed_level, "level {k} transform {t}");
            }
        }
    }
}
