//! The bandwidth-limited, delayed link from a sink node to the fusion center:
//! mask enumeration, categorical mask sampling, mask moments and the FIFO delay.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{c, f, odot, Mat, Real, Vec_};
use crate::{Error, Result};

/// A mask as the sorted set of transmitted component indices.
pub type MaskSet = Vec<usize>;

/// All `r`-of-`n` component subsets in lexicographic order.
pub fn enumerate_mask_sets(n: usize, r: usize) -> Result<Vec<MaskSet>> {
    if r < 1 || r >= n {
        return Err(Error::Contract(format!("need 1 <= r < n, got r = {r}, n = {n}")));
    }
    Ok(subsets(n, r))
}

fn subsets(n: usize, r: usize) -> Vec<MaskSet> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(r);
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<MaskSet>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for k in start..n {
            if n - k < r - cur.len() {
                break;
            }
            cur.push(k);
            rec(k + 1, n, r, cur, out);
            cur.pop();
        }
    }
    rec(0, n, r, &mut cur, &mut out);
    out
}

pub fn mask_matrix<T: Real>(n: usize, set: &[usize]) -> Mat<T> {
    let mut m = DMatrix::zeros(n, n);
    for &k in set {
        m[(k, k)] = T::one();
    }
    m
}

/// Diagonal 0/1 masks with exactly `r` ones, lexicographic in the selected index sets.
pub fn enumerate_masks<T: Real>(n: usize, r: usize) -> Result<Vec<Mat<T>>> {
    Ok(enumerate_mask_sets(n, r)?.iter().map(|s| mask_matrix(n, s)).collect())
}

#[derive(Clone, Debug)]
pub struct SelectionScheme<T: Real> {
    pub node: usize,
    pub n: usize,
    pub r: usize,
    pub sets: Vec<MaskSet>,
    pub masks: Vec<Mat<T>>,
    pub probs: Vec<T>,
    /// Mean mask.
    pub hbar: Mat<T>,
    /// `E{H ⊙ H}`.
    pub lambda: Mat<T>,
    /// `E{H ⊙ (I - H)}`.
    pub v: Mat<T>,
    /// `E{(I - H) ⊙ (I - H)}`.
    pub w: Mat<T>,
    /// Component-by-mask incidence: `diag(hbar) = u * probs`.
    pub u: Mat<T>,
    sampler: WeightedIndex<f64>,
}

impl<T: Real> SelectionScheme<T> {
    pub fn delta(&self) -> usize {
        self.masks.len()
    }

    /// The mask drawn with the given index.
    pub fn mask(&self, idx: usize) -> &Mat<T> {
        &self.masks[idx]
    }

    /// Degenerate scheme that always transmits every component.
    pub fn full_transmission(node: usize, n: usize) -> Self {
        Self::from_sets(node, n, n, vec![(0..n).collect()], vec![T::one()]).expect("full scheme")
    }

    fn from_sets(node: usize, n: usize, r: usize, sets: Vec<MaskSet>, probs: Vec<T>) -> Result<Self> {
        if probs.len() != sets.len() {
            return Err(Error::Contract(format!("{} probabilities for {} masks", probs.len(), sets.len())));
        }
        let tol: T = c(1e-12);
        if probs.iter().any(|&p| p < -tol) {
            return Err(Error::Contract("negative selection probability".into()));
        }
        let total = probs.iter().fold(T::zero(), |s, &p| s + p);
        if (total - T::one()).abs() > tol {
            return Err(Error::Contract(format!("selection probabilities sum to {}", f(total))));
        }
        let masks: Vec<Mat<T>> = sets.iter().map(|s| mask_matrix(n, s)).collect();
        let eye = DMatrix::<T>::identity(n, n);
        let mut hbar = DMatrix::zeros(n, n);
        let mut lambda = DMatrix::zeros(n, n);
        let mut v = DMatrix::zeros(n, n);
        let mut w = DMatrix::zeros(n, n);
        for (h, &p) in masks.iter().zip(&probs) {
            let g = &eye - h;
            hbar += h * p;
            lambda += odot(h, h)? * p;
            v += odot(h, &g)? * p;
            w += odot(&g, &g)? * p;
        }
        let u = DMatrix::from_fn(n, sets.len(), |l, k| if sets[k].contains(&l) { T::one() } else { T::zero() });
        let weights: Vec<f64> = probs.iter().map(|&p| f(p).max(0.0)).collect();
        let sampler = WeightedIndex::new(&weights).map_err(|e| Error::Contract(format!("selection probabilities: {e}")))?;
        Ok(SelectionScheme { node, n, r, sets, masks, probs, hbar, lambda, v, w, u, sampler })
    }

    /// Draws the mask index for one tick.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        self.sampler.sample(rng)
    }
}

/// Builds the scheme for `r`-of-`n` selection with the given mask probabilities.
pub fn build_scheme<T: Real>(node: usize, n: usize, r: usize, probs: &[T]) -> Result<SelectionScheme<T>> {
    let sets = enumerate_mask_sets(n, r)?;
    SelectionScheme::from_sets(node, n, r, sets, probs.to_vec())
}

/// Per-node random stream derived from a master seed.
pub fn node_rng(master_seed: u64, node: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(1 + node as u64);
    rng
}

pub fn sample_mask<T: Real>(scheme: &SelectionScheme<T>, rng: &mut ChaCha8Rng) -> usize {
    scheme.sample(rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedPacket<T: Real> {
    pub node: usize,
    pub t_sent: usize,
    pub mask_index: usize,
    /// Selected components in ascending index order.
    pub values: Vec<T>,
}

impl<T: Real> CompressedPacket<T> {
    pub fn compress(scheme: &SelectionScheme<T>, t_sent: usize, mask_index: usize, xhat: &Vec_<T>) -> Self {
        let values = scheme.sets[mask_index].iter().map(|&k| xhat[k]).collect();
        CompressedPacket { node: scheme.node, t_sent, mask_index, values }
    }

    /// `H x̂` rebuilt as a full-length vector with zeros in the dropped components.
    pub fn expand(&self, scheme: &SelectionScheme<T>) -> Vec_<T> {
        let mut x = DVector::zeros(scheme.n);
        for (&k, &v) in scheme.sets[self.mask_index].iter().zip(&self.values) {
            x[k] = v;
        }
        x
    }

    pub const HEADER_LEN: usize = 2 + 8 + 4;

    /// `node:u16, t_sent:u64, mask_index:u32`, then the values as little-endian f64.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(&(self.node as u16).to_le_bytes());
        out.extend_from_slice(&(self.t_sent as u64).to_le_bytes());
        out.extend_from_slice(&(self.mask_index as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&f(v).to_le_bytes());
        }
        out
    }

    /// Decodes one record occupying the whole slice.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::HEADER_LEN || (bytes.len() - Self::HEADER_LEN) % 8 != 0 {
            return Err(Error::Protocol(format!("bad packet length {}", bytes.len())));
        }
        let node = u16::from_le_bytes(bytes[0..2].try_into().unwrap()) as usize;
        let t_sent = u64::from_le_bytes(bytes[2..10].try_into().unwrap()) as usize;
        let mask_index = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let values = bytes[Self::HEADER_LEN..]
            .chunks_exact(8)
            .map(|ch| c(f64::from_le_bytes(ch.try_into().unwrap())))
            .collect();
        Ok(CompressedPacket { node, t_sent, mask_index, values })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DelayMode {
    Constant,
    /// Time-varying delays bounded by the link delay; every packet is held to the bound.
    Bounded,
}

#[derive(Clone, Debug)]
pub struct DelayedLink {
    pub node: usize,
    /// Constant delay, or the upper bound in bounded mode.
    pub delay: usize,
    pub mode: DelayMode,
    buffer: VecDeque<(usize, Vec<u8>)>,
    last_sent: Option<usize>,
}

impl DelayedLink {
    pub fn new(node: usize, delay: usize) -> Self {
        DelayedLink { node, delay, mode: DelayMode::Constant, buffer: VecDeque::new(), last_sent: None }
    }

    pub fn bounded(node: usize, upper: usize) -> Self {
        DelayedLink { mode: DelayMode::Bounded, ..Self::new(node, upper) }
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    /// Enqueues `packet` and returns the packet due at `now`, if any.
    pub fn send_and_deliver<T: Real>(&mut self, packet: CompressedPacket<T>, now: usize) -> Result<Option<CompressedPacket<T>>> {
        self.enqueue(packet, now)?;
        self.deliver(now)
    }

    /// Enqueues a packet whose raw transit time is `raw`; in bounded mode it is
    /// still released at `t_sent + delay`.
    pub fn send_with_raw_delay<T: Real>(&mut self, packet: CompressedPacket<T>, raw: usize, now: usize) -> Result<Option<CompressedPacket<T>>> {
        if self.mode == DelayMode::Constant && raw != self.delay {
            return Err(Error::Contract(format!("constant link of delay {} got raw delay {raw}", self.delay)));
        }
        if raw > self.delay {
            return Err(Error::Contract(format!("raw delay {raw} exceeds bound {}", self.delay)));
        }
        self.send_and_deliver(packet, now)
    }

    fn enqueue<T: Real>(&mut self, packet: CompressedPacket<T>, now: usize) -> Result<()> {
        if packet.t_sent > now {
            return Err(Error::Contract(format!("packet stamped {} sent at {now}", packet.t_sent)));
        }
        if let Some(last) = self.last_sent {
            if packet.t_sent <= last {
                return Err(Error::Contract(format!("packet stamped {} after {last}", packet.t_sent)));
            }
        }
        self.last_sent = Some(packet.t_sent);
        self.buffer.push_back((packet.t_sent, packet.encode()));
        Ok(())
    }

    fn deliver<T: Real>(&mut self, now: usize) -> Result<Option<CompressedPacket<T>>> {
        while let Some(&(t_sent, _)) = self.buffer.front() {
            if t_sent + self.delay < now {
                self.buffer.pop_front();
                continue;
            }
            if t_sent + self.delay == now {
                let (_, bytes) = self.buffer.pop_front().unwrap();
                return CompressedPacket::decode(&bytes).map(Some);
            }
            break;
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{from_rows, max_abs};
    use rand::Rng;

    #[test]
    fn masks_4_choose_2() {
        let sets = enumerate_mask_sets(4, 2).unwrap();
        assert_eq!(sets, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        let m: Vec<Mat<f64>> = enumerate_masks(4, 2).unwrap();
        assert_eq!(m[1].diagonal().as_slice(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn masks_2_choose_1() {
        let m: Vec<Mat<f64>> = enumerate_masks(2, 1).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], from_rows::<f64>(&[&[1.0, 0.0], &[0.0, 0.0]]));
        assert_eq!(m[1], from_rows::<f64>(&[&[0.0, 0.0], &[0.0, 1.0]]));
    }

    #[test]
    fn masks_5_choose_2_brute_force() {
        let sets = enumerate_mask_sets(5, 2).unwrap();
        let mut brute = Vec::new();
        for bits in 0u32..32 {
            if bits.count_ones() == 2 {
                brute.push((0..5).filter(|k| bits & (1 << k) != 0).collect::<Vec<_>>());
            }
        }
        brute.sort();
        assert_eq!(sets, brute);
        assert!(enumerate_mask_sets(3, 3).is_err());
        assert!(enumerate_mask_sets(3, 0).is_err());
    }

    #[test]
    fn example2_mean_mask() {
        let s = build_scheme(0, 4, 2, &[0.3, 0.2, 0.1, 0.1, 0.1, 0.2]).unwrap();
        assert!(max_abs(&(&s.hbar - DMatrix::from_diagonal(&DVector::from_vec(vec![0.6, 0.5, 0.5, 0.4])))) < 1e-15);
        assert!((&s.u * DVector::from_vec(s.probs.clone()) - s.hbar.diagonal()).amax() < 1e-15);
    }

    #[test]
    fn two_state_moments() {
        let g = 0.3;
        let s = build_scheme(0, 2, 1, &[g, 1.0 - g]).unwrap();
        assert!(max_abs(&(&s.lambda - from_rows::<f64>(&[&[g, 0.0], &[0.0, 1.0 - g]]))) < 1e-15);
        assert!(max_abs(&(&s.v - from_rows::<f64>(&[&[0.0, g], &[1.0 - g, 0.0]]))) < 1e-15);
        assert!(max_abs(&(&s.w - from_rows::<f64>(&[&[1.0 - g, 0.0], &[0.0, g]]))) < 1e-15);
    }

    #[test]
    fn uniform_probabilities_give_r_over_n() {
        for (n, r) in [(3, 1), (4, 2), (5, 3), (6, 2)] {
            let d = crate::linalg::binomial(n, r);
            let s = build_scheme(0, n, r, &vec![1.0 / d as f64; d]).unwrap();
            for k in 0..n {
                assert!((s.hbar[(k, k)] - r as f64 / n as f64).abs() < 1e-12);
            }
            let sum = &s.lambda + &s.v + s.v.transpose() + &s.w;
            assert!(max_abs(&(sum - DMatrix::from_element(n, n, 1.0))) < 1e-12);
            assert!((s.hbar.trace() - r as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn off_simplex_rejected() {
        assert!(build_scheme(0, 2, 1, &[0.6, 0.6]).is_err());
        assert!(build_scheme(0, 2, 1, &[1.2, -0.2]).is_err());
    }

    #[test]
    fn degenerate_categorical() {
        let s = build_scheme(0, 4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = node_rng(1, 0);
        assert!((0..1000).all(|_| s.sample(&mut rng) == 0));
    }

    #[test]
    fn sampling_frequencies() {
        let probs = [0.3, 0.2, 0.1, 0.1, 0.1, 0.2];
        let s = build_scheme(0, 4, 2, &probs).unwrap();
        let mut rng = node_rng(42, 0);
        let draws = 1_000_000;
        let mut counts = [0usize; 6];
        let mut hsum = DMatrix::<f64>::zeros(4, 4);
        for t in 0..draws {
            let k = s.sample(&mut rng);
            counts[k] += 1;
            if t < 20_000 {
                hsum += &s.masks[k];
                assert_eq!(s.masks[k].trace(), 2.0);
            }
        }
        for (k, &p) in probs.iter().enumerate() {
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!(((counts[k] as f64 / draws as f64) - p).abs() < 3.0 * se + 1e-12, "mask {k}");
        }
        let mean = hsum / 20_000.0;
        for l in 0..4 {
            let g = s.hbar[(l, l)];
            let se = (g * (1.0 - g) / 20_000.0).sqrt();
            assert!((mean[(l, l)] - g).abs() < 3.5 * se);
        }
    }

    #[test]
    fn node_streams_independent() {
        let s = build_scheme(0, 2, 1, &[0.5, 0.5]).unwrap();
        let mut r0 = node_rng(9, 0);
        let mut r1 = node_rng(9, 1);
        let n = 100_000;
        let mut joint = [[0f64; 2]; 2];
        for _ in 0..n {
            joint[s.sample(&mut r0)][s.sample(&mut r1)] += 1.0;
        }
        let chi2: f64 = joint.iter().flatten().map(|&o| (o - n as f64 / 4.0).powi(2) / (n as f64 / 4.0)).sum();
        // 3 degrees of freedom, p = 0.01 critical value.
        assert!(chi2 < 11.345, "chi2 = {chi2}");
    }

    #[test]
    fn mask_moments_match_sampling() {
        let s = build_scheme(0, 3, 2, &[0.5, 0.2, 0.3]).unwrap();
        let mut rng = node_rng(3, 0);
        let n = 200_000;
        let eye = DMatrix::<f64>::identity(3, 3);
        let mut lam = DMatrix::<f64>::zeros(3, 3);
        let mut v = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let h = &s.masks[s.sample(&mut rng)];
            lam += odot(h, h).unwrap();
            v += odot(h, &(&eye - h)).unwrap();
        }
        lam /= n as f64;
        v /= n as f64;
        for (emp, exact) in [(lam, &s.lambda), (v, &s.v)] {
            for k in 0..9 {
                let p = exact[k];
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((emp[k] - p).abs() <= 3.0 * se + 1e-12);
            }
        }
    }

    #[test]
    fn zero_delay_delivers_immediately() {
        let s = build_scheme(0, 2, 1, &[0.5, 0.5]).unwrap();
        let mut link = DelayedLink::new(0, 0);
        for t in 0..5 {
            let p = CompressedPacket::compress(&s, t, t % 2, &DVector::from_vec(vec![t as f64, -(t as f64)]));
            let got = link.send_and_deliver(p.clone(), t).unwrap();
            assert_eq!(got, Some(p));
        }
    }

    #[test]
    fn fifo_delay_two() {
        let s = build_scheme(0, 2, 1, &[0.5, 0.5]).unwrap();
        let mut link = DelayedLink::new(0, 2);
        for t in 0..6 {
            let p = CompressedPacket::compress(&s, t, 0, &DVector::from_vec(vec![t as f64, 0.0]));
            let got = link.send_and_deliver(p, t).unwrap();
            if t < 2 {
                assert!(got.is_none());
            } else {
                let got = got.unwrap();
                assert_eq!(got.t_sent, t - 2);
                assert_eq!(got.values, vec![(t - 2) as f64]);
            }
        }
        let stale = CompressedPacket::compress(&s, 3, 0, &DVector::from_vec(vec![0.0, 0.0]));
        assert!(link.send_and_deliver(stale, 6).is_err());
    }

    #[test]
    fn bounded_mode_holds_to_bound() {
        let s = build_scheme(0, 2, 1, &[0.5, 0.5]).unwrap();
        let mut link = DelayedLink::bounded(0, 3);
        let mut rng = node_rng(5, 0);
        let mut delivered = Vec::new();
        for t in 0..200 {
            let raw = rng.gen_range(0..=3);
            let p = CompressedPacket::compress(&s, t, 1, &DVector::from_vec(vec![0.0, t as f64]));
            if let Some(got) = link.send_with_raw_delay(p, raw, t).unwrap() {
                delivered.push((t, got.t_sent));
            }
        }
        assert_eq!(delivered.len(), 197);
        assert!(delivered.iter().all(|&(t, s)| t == s + 3));
    }

    #[test]
    fn packet_roundtrip() {
        let s = build_scheme(3, 4, 2, &[0.3, 0.2, 0.1, 0.1, 0.1, 0.2]).unwrap();
        let x = DVector::from_vec(vec![1.5, -2.0, 3.25, 4.0]);
        let p = CompressedPacket::compress(&s, 77, 4, &x);
        assert_eq!(p.values, vec![-2.0, 4.0]);
        let bytes = p.encode();
        assert_eq!(bytes.len(), 14 + 16);
        assert_eq!(&bytes[0..2], &[3, 0]);
        assert_eq!(CompressedPacket::<f64>::decode(&bytes).unwrap(), p);
        assert_eq!(p.expand(&s), &s.masks[4] * x);
    }
}
