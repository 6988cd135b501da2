use ndarray::Array2;

use crate::scalar::Scalar;

/// Output length for a 3-vector: `3 * (include_input + 2 L)`.
pub fn encoded_len(levels: usize, include_input: bool) -> usize {
    3 * (include_input as usize + 2 * levels)
}

/// `[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]`,
/// each term a 3-vector.
pub fn positional_encoding<T: Scalar>(v: [T; 3], levels: usize, include_input: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(encoded_len(levels, include_input));
    encode_into(v, levels, include_input, &mut out);
    out
}

fn encode_into<T: Scalar>(v: [T; 3], levels: usize, include_input: bool, out: &mut Vec<T>) {
    if include_input {
        out.extend_from_slice(&v);
    }
    let mut freq = T::PI();
    let two = T::one() + T::one();
    for _ in 0..levels {
        out.extend(v.iter().map(|&x| (freq * x).sin()));
        out.extend(v.iter().map(|&x| (freq * x).cos()));
        freq = freq * two;
    }
}

/// Encodes each row of `points` into a row of the result.
pub fn encode_batch<T: Scalar>(points: &[[T; 3]], levels: usize, include_input: bool) -> Array2<T> {
    let width = encoded_len(levels, include_input);
    let mut flat = Vec::with_capacity(points.len() * width);
    for &p in points {
        encode_into(p, levels, include_input, &mut flat);
    }
    Array2::from_shape_vec((points.len(), width), flat).expect("encoded rows have fixed width")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_encodes_to_zero_sines_unit_cosines() {
        let e = positional_encoding([0.0f64; 3], 4, false);
        for level in 0..4 {
            assert!(e[6 * level..6 * level + 3].iter().all(|&s| s == 0.0));
            assert!(e[6 * level + 3..6 * level + 6].iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn lengths_and_identity() {
        assert_eq!(positional_encoding([0.1f32, 0.2, 0.3], 0, true), vec![0.1, 0.2, 0.3]);
        assert_eq!(positional_encoding([0.1f64; 3], 10, true).len(), 63);
        assert_eq!(encoded_len(4, true), 27);
        assert_eq!(encoded_len(4, false), 24);
    }

    #[test]
    fn frequencies_double() {
        let e = positional_encoding([0.25f64, 0.0, 0.0], 3, false);
        let expect = [(std::f64::consts::PI * 0.25), std::f64::consts::PI * 0.5, std::f64::consts::PI];
        for (level, arg) in expect.iter().enumerate() {
            assert!((e[6 * level] - arg.sin()).abs() < 1e-15);
            assert!((e[6 * level + 3] - arg.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_rows_match_single() {
        let pts = [[0.1f64, -0.4, 0.9], [1.2, 0.0, -0.3]];
        let b = encode_batch(&pts, 5, true);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(b.row(i).to_vec(), positional_encoding(*p, 5, true));
        }
    }
}
