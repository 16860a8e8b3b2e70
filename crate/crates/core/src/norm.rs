//! Batch normalization and fine-grained batch normalization (FBN).
//!
//! FBN standardizes each of the `G` partial sums of a neuron independently and
//! then adds them back up. With the grouped-expansion layout used throughout
//! this crate, the intermediate tensor has `G·C` channels and intermediate
//! channel `g·C + c` is the partial sum of group `g` for output channel `c`:
//!
//! ```text
//! out[c] = Σ_g γ[g·C+c] · (in[g·C+c] − μ[g·C+c]) / sqrt(σ²[g·C+c] + ε) + β[g·C+c]
//! ```
//!
//! Affine parameters live on the intermediate channels, so an FBN layer with
//! `G` groups carries `2·G·C` of them.

use crate::error::{Error, Result};
use crate::param::{Param, ParamKind};
use crate::tensor::{Element, Shape, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T: Element = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    /// Biased running variance, before ε is added.
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
    pub affine: bool,
}

impl<T: Element> NormState<T> {
    /// γ = 1, β = 0, running mean 0, running variance 1.
    pub fn new(channels: usize, affine: bool) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        NormState {
            gamma: Param::new(Tensor::full(shape, T::ONE), ParamKind::Gamma),
            beta: Param::zeros(shape, ParamKind::Beta),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, T::ONE),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            affine,
        }
    }

    pub fn with_hyper(mut self, epsilon: f64, momentum: f64) -> Self {
        self.epsilon = epsilon;
        self.momentum = momentum;
        self
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Statistics that turn inference into the identity map: μ' = 0, var' = 1 − ε.
    pub fn identity(channels: usize, affine: bool) -> Self {
        let mut s = Self::new(channels, affine);
        s.running_var.fill(T::from_f64(1.0 - s.epsilon));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0,1], got {}", self.momentum)));
        }
        if self.running_var.len() != c || self.gamma.value.len() != c || self.beta.value.len() != c {
            return Err(Error::shape("normalization state vectors disagree in length"));
        }
        if self.running_var.data().iter().any(|&v| v < T::ZERO) {
            return Err(Error::Numeric("negative running variance".into()));
        }
        Ok(())
    }

    /// Effective per-channel (scale, shift) in f64: γ and β, or (1, 0) with affine off.
    pub fn affine_at(&self, ch: usize) -> (f64, f64) {
        if self.affine {
            (self.gamma.value.data()[ch].to_f64(), self.beta.value.data()[ch].to_f64())
        } else {
            (1.0, 0.0)
        }
    }

    /// `sqrt(running_var + ε)` for one channel.
    pub fn running_std(&self, ch: usize) -> f64 {
        (self.running_var.data()[ch].to_f64() + self.epsilon).sqrt()
    }

    pub fn cast<U: Element>(&self) -> NormState<U> {
        NormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            epsilon: self.epsilon,
            momentum: self.momentum,
            affine: self.affine,
        }
    }
}

/// What the training-mode forward pass records for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache<T: Element> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

/// How input channels are partitioned into FBN groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSpec {
    FixedGroups(usize),
    ChannelsPerGroup(usize),
}

impl Default for GroupSpec {
    fn default() -> Self {
        GroupSpec::FixedGroups(1)
    }
}

impl std::fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupSpec::FixedGroups(g) => write!(f, "G={g}"),
            GroupSpec::ChannelsPerGroup(k) => write!(f, "C/G={k}"),
        }
    }
}

/// Accepts `G=4`, `C/G=50`, or a bare group count.
impl std::str::FromStr for GroupSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |v: &str| {
            v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| Error::config(format!("bad group spec {s:?}")))
        };
        if let Some(v) = s.strip_prefix("C/G=").or_else(|| s.strip_prefix("c/g=")) {
            Ok(GroupSpec::ChannelsPerGroup(num(v)?))
        } else if let Some(v) = s.strip_prefix("G=").or_else(|| s.strip_prefix("g=")) {
            Ok(GroupSpec::FixedGroups(num(v)?))
        } else {
            Ok(GroupSpec::FixedGroups(num(s)?))
        }
    }
}

/// Number of groups for a layer with `c_in` input channels.
///
/// `FixedGroups(g)` accepts any `g <= c_in`; when `g` does not divide `c_in`
/// the partition is balanced (see [`group_bounds`]). `ChannelsPerGroup(k)`
/// requires `k` to divide `c_in` exactly.
pub fn resolve_groups(spec: GroupSpec, c_in: usize) -> Result<usize> {
    if c_in == 0 {
        return Err(Error::config("layer has no input channels"));
    }
    match spec {
        GroupSpec::FixedGroups(g) => {
            if g == 0 || g > c_in {
                return Err(Error::config(format!("cannot split {c_in} input channels into {g} groups")));
            }
            Ok(g)
        }
        GroupSpec::ChannelsPerGroup(k) => {
            if k == 0 || c_in % k != 0 {
                return Err(Error::config(format!(
                    "{k} channels per group does not divide {c_in} input channels"
                )));
            }
            Ok(c_in / k)
        }
    }
}

/// Contiguous group boundaries: group `g` owns input channels
/// `[bounds[g], bounds[g+1])` with `bounds[g] = floor(g·c_in / G)`.
pub fn group_bounds(c_in: usize, groups: usize) -> Vec<usize> {
    (0..=groups).map(|g| g * c_in / groups).collect()
}

fn check_train_batch(s: Shape) -> Result<()> {
    if s.n * s.plane() < 2 {
        return Err(Error::DegenerateStats(format!(
            "batch statistics need at least 2 values per channel, input is {s}"
        )));
    }
    Ok(())
}

fn check_channels<T: Element>(x: &Tensor<T>, st: &NormState<T>) -> Result<()> {
    if x.shape().c != st.channels() {
        return Err(Error::shape(format!(
            "normalization over {} channels applied to input {}",
            st.channels(),
            x.shape()
        )));
    }
    Ok(())
}

/// Per-channel biased batch mean and variance over (n, h, w), accumulated in f64.
pub fn batch_stats<T: Element>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            sum += x.plane(n, c).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// `running ← (1 − momentum)·running + momentum·batch` for both mean and variance.
pub fn update_running_stats<T: Element>(st: &mut NormState<T>, batch_mean: &[f64], batch_var: &[f64]) {
    let m = st.momentum;
    for (r, &b) in st.running_mean.data_mut().iter_mut().zip(batch_mean) {
        *r = T::from_f64((1.0 - m) * r.to_f64() + m * b);
    }
    for (r, &b) in st.running_var.data_mut().iter_mut().zip(batch_var) {
        *r = T::from_f64((1.0 - m) * r.to_f64() + m * b);
    }
}

/// Standardizes with batch statistics, applies the affine map and updates the
/// running statistics. Returns the output and the backward cache.
pub fn bn_forward_train<T: Element>(x: &Tensor<T>, st: &mut NormState<T>) -> Result<(Tensor<T>, NormCache<T>)> {
    check_channels(x, st)?;
    check_train_batch(x.shape())?;
    let s = x.shape();
    let (mean, var) = batch_stats(x);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + st.epsilon).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for c in 0..s.c {
        let (g, b) = st.affine_at(c);
        for n in 0..s.n {
            let src = x.plane(n, c);
            let xh = xhat.plane_mut(n, c);
            for (o, &v) in xh.iter_mut().zip(src) {
                *o = T::from_f64((v.to_f64() - mean[c]) * inv_std[c]);
            }
            let (gt, bt) = (T::from_f64(g), T::from_f64(b));
            let xh = xhat.plane(n, c).to_vec();
            for (o, v) in y.plane_mut(n, c).iter_mut().zip(xh) {
                *o = gt * v + bt;
            }
        }
    }
    update_running_stats(st, &mean, &var);
    Ok((y, NormCache { xhat, inv_std }))
}

/// Normalizes with the frozen running statistics. Never mutates `st`.
pub fn bn_forward_infer<T: Element>(x: &Tensor<T>, st: &NormState<T>) -> Result<Tensor<T>> {
    check_channels(x, st)?;
    let s = x.shape();
    let mut y = Tensor::zeros(s);
    for c in 0..s.c {
        let (g, b) = st.affine_at(c);
        let scale = g / st.running_std(c);
        let shift = b - scale * st.running_mean.data()[c].to_f64();
        let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
        for n in 0..s.n {
            let src = x.plane(n, c);
            for (o, &v) in y.plane_mut(n, c).iter_mut().zip(src) {
                *o = scale * v + shift;
            }
        }
    }
    Ok(y)
}

/// Backward of [`bn_forward_train`]: accumulates dγ, dβ into the state's
/// gradients (when affine is on) and returns dx, including the dependence of
/// the batch mean and variance on the input.
pub fn bn_backward<T: Element>(dy: &Tensor<T>, cache: &NormCache<T>, st: &mut NormState<T>) -> Result<Tensor<T>> {
    dy.expect_shape(cache.xhat.shape())?;
    let s = dy.shape();
    let m = (s.n * s.plane()) as f64;
    let mut dx = Tensor::zeros(s);
    for c in 0..s.c {
        let (g, _) = st.affine_at(c);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..s.n {
            for (&d, &xh) in dy.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                sum_dy += d.to_f64();
                sum_dy_xhat += d.to_f64() * xh.to_f64();
            }
        }
        if st.affine {
            st.gamma.grad.data_mut()[c] += T::from_f64(sum_dy_xhat);
            st.beta.grad.data_mut()[c] += T::from_f64(sum_dy);
        }
        // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
        let k = g * cache.inv_std[c] / m;
        for n in 0..s.n {
            let dyp = dy.plane(n, c);
            let xhp = cache.xhat.plane(n, c);
            for ((o, &d), &xh) in dx.plane_mut(n, c).iter_mut().zip(dyp).zip(xhp) {
                *o = T::from_f64(k * (m * d.to_f64() - sum_dy - xh.to_f64() * sum_dy_xhat));
            }
        }
    }
    Ok(dx)
}

fn check_fbn<T: Element>(x: &Tensor<T>, groups: usize) -> Result<usize> {
    let c = x.shape().c;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!(
            "{c} intermediate channels cannot be summed over {groups} groups"
        )));
    }
    Ok(c / groups)
}

/// `out[c] = Σ_g t[g·C + c]`.
pub fn sum_groups<T: Element>(t: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let c_out = check_fbn(t, groups)?;
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, c_out, s.h, s.w));
    for n in 0..s.n {
        for g in 0..groups {
            for c in 0..c_out {
                let src = t.plane(n, g * c_out + c).to_vec();
                for (o, v) in out.plane_mut(n, c).iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`sum_groups`]: copies `dy[c]` to every `g·C + c`.
pub fn broadcast_groups<T: Element>(dy: &Tensor<T>, groups: usize) -> Tensor<T> {
    let s = dy.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c * groups, s.h, s.w));
    for n in 0..s.n {
        for g in 0..groups {
            for c in 0..s.c {
                out.plane_mut(n, g * s.c + c).copy_from_slice(dy.plane(n, c));
            }
        }
    }
    out
}

/// Training-mode FBN over an intermediate tensor with `groups·C` channels.
pub fn fbn_forward_train<T: Element>(
    x_groups: &Tensor<T>,
    st: &mut NormState<T>,
    groups: usize,
) -> Result<(Tensor<T>, NormCache<T>)> {
    check_fbn(x_groups, groups)?;
    let (y, cache) = bn_forward_train(x_groups, st)?;
    Ok((sum_groups(&y, groups)?, cache))
}

/// Inference-mode FBN: per-intermediate-channel running statistics, then group sum.
pub fn fbn_forward_infer<T: Element>(x_groups: &Tensor<T>, st: &NormState<T>, groups: usize) -> Result<Tensor<T>> {
    check_fbn(x_groups, groups)?;
    sum_groups(&bn_forward_infer(x_groups, st)?, groups)
}

pub fn fbn_backward<T: Element>(
    dy: &Tensor<T>,
    cache: &NormCache<T>,
    st: &mut NormState<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    bn_backward(&broadcast_groups(dy, groups), cache, st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn constant_input_standardizes_to_zero() {
        let x = Tensor::<f32>::full((2, 1, 2, 2), 4.5);
        let mut st = NormState::new(1, true);
        let (y, _) = bn_forward_train(&x, &mut st).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_three_example() {
        let x = Tensor::<f64>::from_vec((2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let mut st = NormState::new(1, true);
        let (y, _) = bn_forward_train(&x, &mut st).unwrap();
        // (x − 2) / sqrt(1 + 1e-5)
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + want).abs() < 1e-12);
        assert!((y.data()[1] - want).abs() < 1e-12);
        assert!((want - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn affine_on_standardized_data() {
        // Mean 0, biased variance 1 − ε so standardization is the identity.
        let eps = DEFAULT_EPSILON;
        let a = (1.0 - eps).sqrt();
        let x = Tensor::<f64>::from_vec((4, 1, 1, 1), vec![-a, a, -a, a]).unwrap();
        let mut st = NormState::new(1, true);
        st.gamma.value.fill(2.0);
        st.beta.value.fill(1.0);
        let (y, _) = bn_forward_train(&x, &mut st).unwrap();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - (2.0 * i + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let x = Tensor::<f32>::full((1, 3, 1, 1), 1.0);
        let mut st = NormState::new(3, true);
        assert!(matches!(bn_forward_train(&x, &mut st), Err(Error::DegenerateStats(_))));
    }

    #[test]
    fn identity_statistics_infer() {
        let x = Tensor::<f64>::gaussian((2, 3, 2, 2), 0.0, 1.0, &mut Rng::new(1));
        let st = NormState::<f64>::identity(3, true);
        let y = bn_forward_infer(&x, &st).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn infer_is_pure() {
        let x = Tensor::<f32>::gaussian((2, 3, 2, 2), 0.0, 1.0, &mut Rng::new(2));
        let mut st = NormState::<f32>::new(3, true);
        st.running_mean.data_mut().copy_from_slice(&[0.3, -0.1, 2.0]);
        let before = st.clone();
        let a = bn_forward_infer(&x, &st).unwrap();
        let b = bn_forward_infer(&x, &st).unwrap();
        assert_eq!(st, before);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn infer_tracks_train_after_long_ema() {
        let mut st = NormState::<f64>::new(2, true);
        st.momentum = 0.05;
        let mut rng = Rng::new(3);
        let draw = |rng: &mut Rng| {
            let mut t = Tensor::<f64>::zeros((16, 2, 4, 4));
            for n in 0..16 {
                for v in t.plane_mut(n, 0) {
                    *v = rng.gaussian(3.0, 2.0);
                }
                for v in t.plane_mut(n, 1) {
                    *v = rng.gaussian(-1.0, 0.5);
                }
            }
            t
        };
        for _ in 0..300 {
            let x = draw(&mut rng);
            bn_forward_train(&x, &mut st).unwrap();
        }
        let x = draw(&mut rng);
        let infer = bn_forward_infer(&x, &st).unwrap();
        let (train, _) = bn_forward_train(&x, &mut st.clone()).unwrap();
        assert!(infer.max_abs_diff(&train).unwrap() <= 0.1);
    }

    #[test]
    fn ema_examples() {
        let mut st = NormState::<f64>::new(1, true);
        st.running_var.fill(1.0);
        st.momentum = 1.0;
        update_running_stats(&mut st, &[5.0], &[2.0]);
        assert_eq!((st.running_mean.data()[0], st.running_var.data()[0]), (5.0, 2.0));
        st.momentum = 0.0;
        update_running_stats(&mut st, &[-1.0], &[9.0]);
        assert_eq!((st.running_mean.data()[0], st.running_var.data()[0]), (5.0, 2.0));

        let mut st = NormState::<f64>::new(1, true);
        st.momentum = 0.1;
        update_running_stats(&mut st, &[1.0], &[1.0]);
        update_running_stats(&mut st, &[1.0], &[1.0]);
        // 0 → 0.1 → 0.9·0.1 + 0.1 = 0.19
        assert!((st.running_mean.data()[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn fbn_single_group_is_bn() {
        let x = Tensor::<f64>::gaussian((4, 3, 2, 2), 1.0, 2.0, &mut Rng::new(4));
        let mut a = NormState::new(3, true);
        let mut b = NormState::new(3, true);
        let (ya, _) = bn_forward_train(&x, &mut a).unwrap();
        let (yb, _) = fbn_forward_train(&x, &mut b, 1).unwrap();
        assert!(ya.max_abs_diff(&yb).unwrap() <= 1e-6);
        assert_eq!(a, b);
    }

    #[test]
    fn fbn_constant_groups_give_zero() {
        let mut x = Tensor::<f32>::zeros((2, 2, 2, 2));
        for n in 0..2 {
            x.plane_mut(n, 0).fill(3.0);
            x.plane_mut(n, 1).fill(-7.0);
        }
        let mut st = NormState::new(2, true);
        let (y, _) = fbn_forward_train(&x, &mut st, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fbn_is_bn_then_group_sum() {
        let x = Tensor::<f64>::gaussian((4, 6, 2, 2), 0.5, 1.5, &mut Rng::new(5));
        let mut a = NormState::new(6, true);
        for (i, v) in a.gamma.value.data_mut().iter_mut().enumerate() {
            *v = 0.5 + i as f64 * 0.25;
        }
        let mut b = a.clone();
        let (y, _) = fbn_forward_train(&x, &mut a, 2).unwrap();
        let (bn, _) = bn_forward_train(&x, &mut b).unwrap();
        for n in 0..4 {
            for c in 0..3 {
                for i in 0..4 {
                    let want = bn.plane(n, c)[i] + bn.plane(n, 3 + c)[i];
                    assert!((y.plane(n, c)[i] - want).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn fbn_infer_identity_stats_is_group_sum() {
        let x = Tensor::<f64>::gaussian((2, 8, 3, 3), 0.0, 1.0, &mut Rng::new(6));
        let st = NormState::<f64>::identity(8, true);
        let y = fbn_forward_infer(&x, &st, 4).unwrap();
        let want = sum_groups(&x, 4).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn fbn_rejects_bad_grouping() {
        let x = Tensor::<f32>::zeros((2, 6, 2, 2));
        let mut st = NormState::new(6, true);
        assert!(fbn_forward_train(&x, &mut st, 4).is_err());
    }

    #[test]
    fn resolve_group_examples() {
        assert_eq!(resolve_groups(GroupSpec::FixedGroups(4), 100).unwrap(), 4);
        assert_eq!(resolve_groups(GroupSpec::ChannelsPerGroup(20), 100).unwrap(), 5);
        assert!(matches!(resolve_groups(GroupSpec::ChannelsPerGroup(50), 60), Err(Error::Config(_))));
        assert!(resolve_groups(GroupSpec::FixedGroups(0), 10).is_err());
        assert!(resolve_groups(GroupSpec::FixedGroups(11), 10).is_err());
        assert_eq!(group_bounds(30, 4), vec![0, 7, 15, 22, 30]);
        assert_eq!(group_bounds(24, 4), vec![0, 6, 12, 18, 24]);
    }

    #[test]
    fn affine_off_matches_unit_affine() {
        let x = Tensor::<f32>::gaussian((4, 4, 3, 3), 0.0, 1.0, &mut Rng::new(7));
        let mut on = NormState::new(4, true);
        let mut off = NormState::new(4, false);
        let (a, _) = fbn_forward_train(&x, &mut on, 2).unwrap();
        let (b, _) = fbn_forward_train(&x, &mut off, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(fbn_forward_infer(&x, &on, 2).unwrap(), fbn_forward_infer(&x, &off, 2).unwrap());
    }
}
