//! Bilinear resampling with half-pixel centers (`align_corners = false`).

/// Source coordinate and blend weight for output index `dst`.
#[inline]
fn source(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == 1 {
        return (0, 0, 0.0);
    }
    let scale = in_len as f64 / out_len as f64;
    let x = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, x - lo as f64)
}

/// Resizes a row-major `in_h × in_w` plane to `out_h × out_w`.
pub fn bilinear(plane: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    debug_assert_eq!(plane.len(), in_h * in_w);
    if in_h == out_h && in_w == out_w {
        return plane.to_vec();
    }
    let cols: Vec<_> = (0..out_w).map(|j| source(j, in_w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1, fy) = source(i, in_h, out_h);
        let top = &plane[r0 * in_w..(r0 + 1) * in_w];
        let bottom = &plane[r1 * in_w..(r1 + 1) * in_w];
        for &(c0, c1, fx) in &cols {
            let t = f64::from(top[c0]) * (1.0 - fx) + f64::from(top[c1]) * fx;
            let b = f64::from(bottom[c0]) * (1.0 - fx) + f64::from(bottom[c1]) * fx;
            out.push((t * (1.0 - fy) + b * fy) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let p = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear(&p, 2, 2, 2, 2), p);
    }

    #[test]
    fn single_cell_tiles() {
        assert_eq!(bilinear(&[7.0], 1, 1, 3, 2), vec![7.0; 6]);
    }
}
