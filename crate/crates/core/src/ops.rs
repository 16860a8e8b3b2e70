//! Reductions and channel-layout primitives.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Subset of the four tensor axes to reduce over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axes {
    pub n: bool,
    pub c: bool,
    pub h: bool,
    pub w: bool,
}

impl Axes {
    pub const ALL: Axes = Axes { n: true, c: true, h: true, w: true };
    /// Batch-norm statistics: everything except channels.
    pub const NHW: Axes = Axes { n: true, c: false, h: true, w: true };

    pub fn from_mask(mask: u8) -> Axes {
        Axes { n: mask & 1 != 0, c: mask & 2 != 0, h: mask & 4 != 0, w: mask & 8 != 0 }
    }

    fn kept(&self, s: Shape) -> Shape {
        Shape::new(
            if self.n { 1 } else { s.n },
            if self.c { 1 } else { s.c },
            if self.h { 1 } else { s.h },
            if self.w { 1 } else { s.w },
        )
    }
}

/// Population mean and variance over `axes`. Results keep reduced axes with size 1.
/// Accumulation is done in f64 with a two-pass formula.
pub fn reduce_stats<T: Element>(t: &Tensor<T>, axes: Axes) -> (Tensor<T>, Tensor<T>) {
    let s = t.shape();
    let out = axes.kept(s);
    let count = (s.numel() / out.numel()) as f64;
    let target = |n: usize, c: usize, h: usize, w: usize| {
        out.index(
            if axes.n { 0 } else { n },
            if axes.c { 0 } else { c },
            if axes.h { 0 } else { h },
            if axes.w { 0 } else { w },
        )
    };

    let mut sum = vec![0.0f64; out.numel()];
    let data = t.data();
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    sum[target(n, c, h, w)] += data[i].to_f64();
                    i += 1;
                }
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / count).collect();
    let mut sq = vec![0.0f64; out.numel()];
    i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let k = target(n, c, h, w);
                    let d = data[i].to_f64() - mean[k];
                    sq[k] += d * d;
                    i += 1;
                }
            }
        }
    }
    let mean_t = Tensor::from_vec(out, mean.into_iter().map(T::from_f64).collect()).expect("shape");
    let var_t =
        Tensor::from_vec(out, sq.into_iter().map(|v| T::from_f64(v / count)).collect()).expect("shape");
    (mean_t, var_t)
}

/// Zero-or-constant padding of `pad` pixels on every spatial border.
pub fn pad2d<T: Element>(t: &Tensor<T>, pad: usize, value: T) -> Tensor<T> {
    let s = t.shape();
    let out_shape = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::full(out_shape, value);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for h in 0..s.h {
                let d0 = (h + pad) * out_shape.w + pad;
                dst[d0..d0 + s.w].copy_from_slice(&src[h * s.w..(h + 1) * s.w]);
            }
        }
    }
    out
}

/// Channels `[from, to)`.
pub fn slice_channels<T: Element>(t: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if from >= to || to > s.c {
        return Err(Error::shape(format!("channel slice {from}..{to} out of range for {s}")));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * (to - from) * p);
    for n in 0..s.n {
        let sample = t.sample(n);
        data.extend_from_slice(&sample[from * p..to * p]);
    }
    Tensor::from_vec(Shape::new(s.n, to - from, s.h, s.w), data)
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape(format!("cannot concatenate {sa} and {sb} along channels")));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)
}

/// Moves channel `k` to `(k mod groups) * (c / groups) + k / groups`.
///
/// With `groups = 2` this interleaves the two halves the way a shuffle unit
/// expects; shuffling with `c / groups` afterwards restores the original order.
pub fn channel_shuffle<T: Element>(t: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(Error::shape(format!("{groups} shuffle groups do not divide {} channels", s.c)));
    }
    let per = s.c / groups;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for k in 0..s.c {
            let dst = (k % groups) * per + k / groups;
            out.plane_mut(n, dst).copy_from_slice(t.plane(n, k));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn naive_stats(t: &Tensor<f64>, axes: Axes) -> (Vec<f64>, Vec<f64>) {
        let s = t.shape();
        let out = axes.kept(s);
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for on in 0..out.n {
            for oc in 0..out.c {
                for oh in 0..out.h {
                    for ow in 0..out.w {
                        let mut vals = Vec::new();
                        for n in 0..s.n {
                            for c in 0..s.c {
                                for h in 0..s.h {
                                    for w in 0..s.w {
                                        let keep = (axes.n || n == on)
                                            && (axes.c || c == oc)
                                            && (axes.h || h == oh)
                                            && (axes.w || w == ow);
                                        if keep {
                                            vals.push(t.at(n, c, h, w));
                                        }
                                    }
                                }
                            }
                        }
                        let m = vals.iter().sum::<f64>() / vals.len() as f64;
                        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                        means.push(m);
                        vars.push(v);
                    }
                }
            }
        }
        (means, vars)
    }

    #[test]
    fn stats_of_one_three() {
        let t = Tensor::<f64>::from_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let (m, v) = reduce_stats(&t, Axes::ALL);
        assert_eq!(m.data(), &[2.0]);
        assert_eq!(v.data(), &[1.0]);
    }

    #[test]
    fn constant_has_zero_variance() {
        let t = Tensor::<f32>::full((2, 3, 4, 4), 0.7);
        let (_, v) = reduce_stats(&t, Axes::NHW);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nhw_stats_match_loops() {
        let t = Tensor::<f64>::uniform((2, 3, 2, 2), -10.0, 10.0, &mut Rng::new(5));
        let (m, v) = reduce_stats(&t, Axes::NHW);
        assert_eq!(m.shape(), Shape::new(1, 3, 1, 1));
        let (nm, nv) = naive_stats(&t, Axes::NHW);
        for c in 0..3 {
            assert!((m.data()[c] - nm[c]).abs() <= 1e-6);
            assert!((v.data()[c] - nv[c]).abs() <= 1e-6);
        }
    }

    #[test]
    fn pad_border() {
        let t = Tensor::<f32>::full((1, 1, 2, 2), 1.0);
        let p = pad2d(&t, 1, 0.0);
        assert_eq!(p.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(p.sum(), 4.0);
        for i in 0..4 {
            assert_eq!(p.at(0, 0, 0, i), 0.0);
            assert_eq!(p.at(0, 0, 3, i), 0.0);
            assert_eq!(p.at(0, 0, i, 0), 0.0);
            assert_eq!(p.at(0, 0, i, 3), 0.0);
        }
    }

    #[test]
    fn bad_slice_and_shuffle() {
        let t = Tensor::<f32>::zeros((1, 6, 1, 1));
        assert!(slice_channels(&t, 4, 7).is_err());
        assert!(slice_channels(&t, 3, 3).is_err());
        assert!(channel_shuffle(&t, 4).is_err());
    }

    fn sorted_bits(t: &Tensor<f32>) -> Vec<u32> {
        let mut v: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn stats_match_scalar_oracle(
            n in 1usize..=4, c in 1usize..=8, h in 1usize..=8, w in 1usize..=8,
            mask in 0u8..16, seed in any::<u64>(),
        ) {
            let t = Tensor::<f64>::uniform((n, c, h, w), -10.0, 10.0, &mut Rng::new(seed));
            let axes = Axes::from_mask(mask);
            let (m, v) = reduce_stats(&t, axes);
            let (nm, nv) = naive_stats(&t, axes);
            for i in 0..nm.len() {
                prop_assert!((m.data()[i] - nm[i]).abs() <= 1e-6);
                prop_assert!((v.data()[i] - nv[i]).abs() <= 1e-6);
            }
        }

        #[test]
        fn shuffle_inverse_and_split_roundtrip(
            n in 1usize..=3, half in 1usize..=6, groups_pick in 0usize..3, k in 1usize..12, seed in any::<u64>(),
        ) {
            let c = half * 2 * 3;
            let t = Tensor::<f32>::gaussian((n, c, 3, 2), 0.0, 1.0, &mut Rng::new(seed));
            let groups = [2, 3, 6][groups_pick];
            let shuffled = channel_shuffle(&t, groups).unwrap();
            prop_assert_eq!(sorted_bits(&shuffled), sorted_bits(&t));
            let back = channel_shuffle(&shuffled, c / groups).unwrap();
            prop_assert_eq!(&back, &t);

            let k = k.min(c - 1);
            let a = slice_channels(&t, 0, k).unwrap();
            let b = slice_channels(&t, k, c).unwrap();
            prop_assert_eq!(concat_channels(&a, &b).unwrap(), t.clone());

            let padded = pad2d(&t, 2, 0.0);
            let mut expected = sorted_bits(&t);
            expected.extend(std::iter::repeat(0f32.to_bits()).take(padded.len() - t.len()));
            expected.sort_unstable();
            prop_assert_eq!(sorted_bits(&padded), expected);
        }
    }
}
