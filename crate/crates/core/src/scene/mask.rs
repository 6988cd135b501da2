use super::Mask;
use crate::error::{Error, Result};

/// Near-white pixels (every channel at or above this) count as background.
pub const DEFAULT_LUMINANCE_THRESHOLD: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskPolicy {
    /// Foreground where alpha > 0.
    Alpha,
    /// Foreground where the darkest channel falls below the threshold
    /// (white-background captures without alpha).
    Luminance { threshold: f64 },
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::Luminance { threshold: DEFAULT_LUMINANCE_THRESHOLD }
    }
}

/// Foreground mask from a row-major RGBA image.
pub fn extract_mask(width: usize, height: usize, rgba: &[[f64; 4]], policy: MaskPolicy) -> Result<Mask> {
    if rgba.len() != width * height {
        return Err(Error::Validation(format!(
            "rgba buffer has {} pixels, expected {width}x{height}",
            rgba.len()
        )));
    }
    let bits = match policy {
        MaskPolicy::Alpha => rgba.iter().map(|p| p[3] > 0.0).collect(),
        MaskPolicy::Luminance { threshold } => {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(Error::Config(format!("luminance threshold {threshold} outside (0, 1]")));
            }
            rgba.iter().map(|p| p[0].min(p[1]).min(p[2]) < threshold).collect()
        }
    };
    Ok(Mask { width, height, bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alpha_policy() {
        let m = extract_mask(2, 1, &[[0.2, 0.2, 0.2, 1.0], [1.0, 1.0, 1.0, 0.0]], MaskPolicy::Alpha).unwrap();
        assert_eq!(m.bits, vec![true, false]);
    }

    #[test]
    fn white_image_is_background() {
        let white = vec![[1.0, 1.0, 1.0, 1.0]; 12];
        let m = extract_mask(4, 3, &white, MaskPolicy::default()).unwrap();
        assert_eq!(m.foreground_count(), 0);
    }

    #[test]
    fn luminance_uses_darkest_channel() {
        let px = [[1.0, 1.0, 0.5, 1.0], [0.995, 0.995, 0.995, 1.0]];
        let m = extract_mask(2, 1, &px, MaskPolicy::Luminance { threshold: 0.99 }).unwrap();
        assert_eq!(m.bits, vec![true, false]);
    }

    #[test]
    fn threshold_out_of_range_is_config_error() {
        for t in [0.0, -0.5, 1.01] {
            let r = extract_mask(1, 1, &[[0.0; 4]], MaskPolicy::Luminance { threshold: t });
            assert!(matches!(r, Err(Error::Config(_))));
        }
        assert!(extract_mask(1, 1, &[[0.0; 4]], MaskPolicy::Luminance { threshold: 1.0 }).is_ok());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(extract_mask(2, 2, &[[0.0; 4]], MaskPolicy::Alpha).is_err());
    }

    fn pixel() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(0.0f64..=1.0)
    }

    proptest! {
        #[test]
        fn mask_is_pointwise(px in prop::collection::vec(pixel(), 1..64), seed in any::<u64>(), t in 0.01f64..=1.0) {
            // Pixel order independence: a permutation of pixels permutes the mask.
            let n = px.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut state = seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (state >> 33) as usize % (i + 1));
            }
            let shuffled: Vec<_> = perm.iter().map(|&i| px[i]).collect();
            for policy in [MaskPolicy::Alpha, MaskPolicy::Luminance { threshold: t }] {
                let a = extract_mask(n, 1, &px, policy).unwrap();
                let b = extract_mask(n, 1, &shuffled, policy).unwrap();
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(b.bits[k], a.bits[i]);
                }
                // Idempotence: re-extracting from the mask rendered as an image reproduces it.
                let as_img: Vec<[f64; 4]> = a.bits.iter()
                    .map(|&fg| if fg { [0.0, 0.0, 0.0, 1.0] } else { [1.0, 1.0, 1.0, 0.0] })
                    .collect();
                let again = extract_mask(n, 1, &as_img, policy).unwrap();
                prop_assert_eq!(&again, &a);
            }
        }
    }
}
