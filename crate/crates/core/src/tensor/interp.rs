//! 1-D resampling taps shared by the differentiable resize op and image resizing.
//!
//! Bilinear sampling uses half-pixel centers (align-corners = false): output
//! index `o` maps to source coordinate `(o + 0.5) * in / out - 0.5`, clamped
//! to the valid range at the borders.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            let l = (src - i0 as f64).clamp(0.0, 1.0);
            Taps {
                i0,
                i1,
                w0: 1.0 - l,
                w1: l,
            }
        })
        .collect()
}

/// Nearest-neighbour source index for each output index (half-pixel centers).
pub fn nearest_index(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_taps() {
        for t in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(t.1.i0, t.0);
            assert_eq!(t.1.w0, 1.0);
        }
        assert_eq!(nearest_index(7, 7), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn upsample_two_uses_quarter_weights() {
        let t = bilinear_taps(2, 4);
        // src coords: -0.25 -> 0 (clamped), 0.25, 0.75, 1.25
        assert_eq!((t[0].i0, t[0].w1), (0, 0.0));
        assert_eq!((t[1].i0, t[1].i1, t[1].w1), (0, 1, 0.25));
        assert_eq!((t[2].i0, t[2].i1, t[2].w1), (0, 1, 0.75));
        assert_eq!((t[3].i0, t[3].i1), (1, 1));
    }
}
