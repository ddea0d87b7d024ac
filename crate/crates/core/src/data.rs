//! Synthetic sequence families, the Kalman-filter likelihood oracle, the
//! `seqdata v1` file format and seeded minibatch sampling.
//!
//! `seqdata v1` files hold one text header line
//!
//! ```text
//! seqdata v1 <n_seq> <T> <x_dim>
//! ```
//!
//! followed by `n_seq·T·x_dim` little-endian `f64` values, sequence-major
//! then time-major (the `x_dim` values of one step are contiguous).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use thiserror::Error;

use crate::autodiff::Tensor;

fn randn<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub const SEQDATA_MAGIC: &str = "seqdata v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("not a seqdata v1 file (header {0:?})")]
    Version(String),
    #[error("malformed seqdata file: {0}")]
    Malformed(String),
    #[error("seqdata payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("dataset is empty")]
    Empty,
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("dataset shape mismatch: {0}")]
    Shape(String),
}

/// Fixed-length observation sequences stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    n_seq: usize,
    steps: usize,
    x_dim: usize,
    values: Vec<f64>,
    /// Exact per-sequence `log p(x_{1:T})`, when known.
    pub loglik: Option<Vec<f64>>,
}

impl SequenceDataset {
    pub fn new(
        n_seq: usize,
        steps: usize,
        x_dim: usize,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if x_dim == 0 {
            return Err(DataError::Shape("x_dim must be at least 1".into()));
        }
        if values.len() != n_seq * steps * x_dim {
            return Err(DataError::Shape(format!(
                "{} values for {n_seq}×{steps}×{x_dim}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(SequenceDataset {
            n_seq,
            steps,
            x_dim,
            values,
            loglik: None,
        })
    }

    pub fn n_seq(&self) -> usize {
        self.n_seq
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sequence `i` as `T·x_dim` contiguous values.
    pub fn sequence(&self, i: usize) -> &[f64] {
        let n = self.steps * self.x_dim;
        &self.values[i * n..(i + 1) * n]
    }

    /// Observation `x_t` of sequence `i`.
    pub fn step(&self, i: usize, t: usize) -> &[f64] {
        let s = self.sequence(i);
        &s[t * self.x_dim..(t + 1) * self.x_dim]
    }

    /// Gathers the given sequences into time-major `[m×x_dim]` tensors.
    pub fn gather(&self, indices: &[usize]) -> Vec<Tensor> {
        (0..self.steps)
            .map(|t| {
                let mut data = Vec::with_capacity(indices.len() * self.x_dim);
                for &i in indices {
                    data.extend_from_slice(self.step(i, t));
                }
                Tensor::new(vec![indices.len(), self.x_dim], data).expect("gathered shape")
            })
            .collect()
    }

    /// Dataset restricted to `range` of sequences.
    pub fn subset(&self, range: std::ops::Range<usize>) -> SequenceDataset {
        let n = self.steps * self.x_dim;
        SequenceDataset {
            n_seq: range.len(),
            steps: self.steps,
            x_dim: self.x_dim,
            values: self.values[range.start * n..range.end * n].to_vec(),
            loglik: self.loglik.as_ref().map(|l| l[range].to_vec()),
        }
    }

    /// Sequences built from time-major `[n×x_dim]` tensors (the layout
    /// produced by generation).
    pub fn from_time_major(
        steps: &[Tensor],
        n_seq: usize,
        x_dim: usize,
    ) -> Result<Self, DataError> {
        for t in steps {
            if t.shape() != [n_seq, x_dim] {
                return Err(DataError::Shape(format!(
                    "step tensor {:?}, expected [{n_seq}, {x_dim}]",
                    t.shape()
                )));
            }
        }
        let mut values = Vec::with_capacity(n_seq * steps.len() * x_dim);
        for i in 0..n_seq {
            for t in steps {
                values.extend_from_slice(&t.data()[i * x_dim..(i + 1) * x_dim]);
            }
        }
        Self::new(n_seq, steps.len(), x_dim, values)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        writeln!(
            w,
            "{SEQDATA_MAGIC} {} {} {}",
            self.n_seq, self.steps, self.x_dim
        )?;
        let mut buf = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self, DataError> {
        let nl = bytes.iter().position(|&b| b == b'\n');
        let header_bytes = &bytes[..nl.unwrap_or(bytes.len().min(64))];
        let header = String::from_utf8_lossy(header_bytes);
        if !header.starts_with(SEQDATA_MAGIC)
            || !matches!(
                header.as_bytes().get(SEQDATA_MAGIC.len()),
                Some(b' ') | None
            )
        {
            return Err(DataError::Version(header.into_owned()));
        }
        let Some(nl) = nl else {
            return Err(DataError::Malformed("header line is not terminated".into()));
        };
        let dims = header[SEQDATA_MAGIC.len()..]
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| DataError::Malformed(format!("bad header {header:?}")))?;
        let [n_seq, steps, x_dim] = dims[..] else {
            return Err(DataError::Malformed(format!(
                "header needs three sizes: {header:?}"
            )));
        };
        let payload = &bytes[nl + 1..];
        let expected = 8 * n_seq * steps * x_dim;
        if payload.len() < expected {
            return Err(DataError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(DataError::Malformed(format!(
                "{} trailing bytes",
                payload.len() - expected
            )));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(n_seq, steps, x_dim, values).map_err(|e| match e {
            DataError::Shape(s) => DataError::Malformed(s),
            other => other,
        })
    }
}

pub fn save_dataset(d: &SequenceDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut buf = Vec::new();
    d.write_to(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SequenceDataset, DataError> {
    SequenceDataset::read_from(&fs::read(path)?)
}

/// Path of the provenance sidecar for a data file: `<path>.provenance`.
pub fn provenance_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".provenance");
    PathBuf::from(s)
}

/// Writes `key = value` lines describing how a file was produced.
pub fn write_provenance(
    path: impl AsRef<Path>,
    entries: &[(&str, String)],
) -> Result<(), DataError> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(provenance_path(path), out)?;
    Ok(())
}

/// One-dimensional linear-Gaussian state-space model with vector emission:
///
/// ```text
/// z_1 ~ N(0, s0²),  z_{t+1} = a·z_t + N(0, q²),  x_t = cobs·b·z_t + N(0, r²·I)
/// ```
///
/// where `b` is the loading vector (all ones when empty).
#[derive(Clone, Debug, PartialEq)]
pub struct LgssmParams {
    pub a: f64,
    pub q: f64,
    pub cobs: f64,
    pub r: f64,
    pub s0: f64,
    pub loading: Vec<f64>,
}

impl Default for LgssmParams {
    fn default() -> Self {
        LgssmParams {
            a: 0.9,
            q: 0.5,
            cobs: 1.0,
            r: 0.5,
            s0: 1.0,
            loading: Vec::new(),
        }
    }
}

impl LgssmParams {
    pub fn validate(&self, x_dim: usize) -> Result<(), DataError> {
        let finite = [self.a, self.q, self.cobs, self.r, self.s0]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.q <= 0.0 || self.r <= 0.0 || self.s0 <= 0.0 {
            return Err(DataError::InvalidParams(format!(
                "q, r, s0 must be positive and finite: {self:?}"
            )));
        }
        if self.a.abs() > 1.0 {
            return Err(DataError::InvalidParams(format!(
                "|a| must be at most 1, got {}",
                self.a
            )));
        }
        if !self.loading.is_empty() && self.loading.len() != x_dim {
            return Err(DataError::InvalidParams(format!(
                "loading has {} entries, x_dim is {x_dim}",
                self.loading.len()
            )));
        }
        Ok(())
    }

    /// Effective emission vector `cobs·b`.
    fn emission(&self, x_dim: usize) -> Vec<f64> {
        if self.loading.is_empty() {
            vec![self.cobs; x_dim]
        } else {
            self.loading.iter().map(|l| self.cobs * l).collect()
        }
    }
}

pub fn gen_lgssm(
    p: &LgssmParams,
    n: usize,
    steps: usize,
    x_dim: usize,
    seed: u64,
) -> Result<SequenceDataset, DataError> {
    if n == 0 || steps == 0 || x_dim == 0 {
        return Err(DataError::InvalidParams(
            "n, T and x_dim must be at least 1".into(),
        ));
    }
    p.validate(x_dim)?;
    let b = p.emission(x_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * steps * x_dim);
    for _ in 0..n {
        let mut z = p.s0 * randn(&mut rng);
        for t in 0..steps {
            if t > 0 {
                z = p.a * z + p.q * randn(&mut rng);
            }
            for bi in &b {
                values.push(bi * z + p.r * randn(&mut rng));
            }
        }
    }
    let mut ds = SequenceDataset::new(n, steps, x_dim, values)?;
    let ll = (0..n)
        .map(|i| kalman_loglik(p, ds.sequence(i), x_dim))
        .collect::<Result<Vec<_>, _>>()?;
    ds.loglik = Some(ll);
    Ok(ds)
}

/// Exact `log p(x_{1:T})` by the prediction-error decomposition. `x_seq`
/// holds `T·x_dim` values, time-major.
///
/// The innovation covariance `S = r²I + P·b·bᵀ` is rank-one plus diagonal,
/// so its inverse and determinant have closed forms.
pub fn kalman_loglik(p: &LgssmParams, x_seq: &[f64], x_dim: usize) -> Result<f64, DataError> {
    p.validate(x_dim)?;
    if x_dim == 0 || x_seq.len() % x_dim != 0 {
        return Err(DataError::Shape(format!(
            "{} values do not split into steps of {x_dim}",
            x_seq.len()
        )));
    }
    if let Some(i) = x_seq.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite(i));
    }
    let b = p.emission(x_dim);
    let bb: f64 = b.iter().map(|v| v * v).sum();
    let r2 = p.r * p.r;
    let d = x_dim as f64;
    let (mut mean, mut var) = (0.0, p.s0 * p.s0);
    let mut ll = 0.0;
    for (t, x) in x_seq.chunks_exact(x_dim).enumerate() {
        if t > 0 {
            mean *= p.a;
            var = p.a * p.a * var + p.q * p.q;
        }
        let denom = r2 + var * bb;
        let e: Vec<f64> = x.iter().zip(&b).map(|(xi, bi)| xi - bi * mean).collect();
        let ee: f64 = e.iter().map(|v| v * v).sum();
        let be: f64 = e.iter().zip(&b).map(|(ei, bi)| ei * bi).sum();
        let quad = (ee - var * be * be / denom) / r2;
        let logdet = d * r2.ln() + (denom / r2).ln();
        ll -= 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        mean += var * be / denom;
        var = var * r2 / denom;
    }
    Ok(ll)
}

/// Frequency and phase of each sine sequence, as drawn by [`gen_sine`].
pub fn sine_params(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = Uniform::new(0.02, 0.1).expect("frequency range");
    let phase = Uniform::new(0.0, 2.0 * std::f64::consts::PI).expect("phase range");
    (0..n)
        .map(|_| (freq.sample(&mut rng), phase.sample(&mut rng)))
        .collect()
}

/// `x_t = sin(2π·f·t + φ0) + ε_t` for `t = 0…T−1`, one channel, with
/// `f ~ U(0.02, 0.1)`, `φ0 ~ U(0, 2π)`, `ε ~ N(0, noise_std²)`.
pub fn gen_sine(
    n: usize,
    steps: usize,
    seed: u64,
    noise_std: f64,
) -> Result<SequenceDataset, DataError> {
    if n == 0 || steps == 0 {
        return Err(DataError::InvalidParams(
            "n and T must be at least 1".into(),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(DataError::InvalidParams(format!(
            "noise_std must be non-negative, got {noise_std}"
        )));
    }
    let params = sine_params(n, seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5e9);
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    let mut values = Vec::with_capacity(n * steps);
    for (f, phi) in params {
        for t in 0..steps {
            let eps = if noise_std > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            values.push((2.0 * std::f64::consts::PI * f * t as f64 + phi).sin() + eps);
        }
    }
    SequenceDataset::new(n, steps, 1, values)
}

/// `m` sequences as time-major `[m×x_dim]` tensors, plus their indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// Position of this batch in its stream.
    pub number: u64,
    pub indices: Vec<usize>,
    pub steps: Vec<Tensor>,
}

impl SequenceBatch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Endless stream of batches drawn uniformly with replacement.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    data: &'a SequenceDataset,
    m: usize,
    rng: ChaCha8Rng,
    drawn: u64,
}

pub fn batches(d: &SequenceDataset, m: usize, seed: u64) -> Result<BatchStream<'_>, DataError> {
    if d.n_seq() == 0 || d.steps() == 0 {
        return Err(DataError::Empty);
    }
    if m == 0 {
        return Err(DataError::InvalidParams(
            "batch size must be at least 1".into(),
        ));
    }
    Ok(BatchStream {
        data: d,
        m,
        rng: ChaCha8Rng::seed_from_u64(seed),
        drawn: 0,
    })
}

impl BatchStream<'_> {
    pub fn next_indices(&mut self) -> Vec<usize> {
        let n = self.data.n_seq();
        (0..self.m).map(|_| self.rng.random_range(0..n)).collect()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        let indices = self.next_indices();
        let steps = self.data.gather(&indices);
        let number = self.drawn;
        self.drawn += 1;
        Some(SequenceBatch {
            number,
            indices,
            steps,
        })
    }
}

/// Batch stream assembled on a background thread into a bounded queue.
/// Yields exactly the same batches, in the same order, as [`batches`].
pub struct PrefetchBatches {
    rx: mpsc::Receiver<SequenceBatch>,
    handle: Option<thread::JoinHandle<()>>,
}

impl PrefetchBatches {
    pub fn spawn(
        d: SequenceDataset,
        m: usize,
        seed: u64,
        capacity: usize,
    ) -> Result<Self, DataError> {
        batches(&d, m, seed)?;
        let (tx, rx) = mpsc::sync_channel(capacity.max(1));
        let handle = thread::spawn(move || {
            let stream = batches(&d, m, seed).expect("validated above");
            for b in stream {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        Ok(PrefetchBatches {
            rx,
            handle: Some(handle),
        })
    }
}

impl Iterator for PrefetchBatches {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        self.rx.recv().ok()
    }
}

impl Drop for PrefetchBatches {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_, dead) = mpsc::sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iid() -> LgssmParams {
        LgssmParams {
            a: 0.0,
            q: 1.0,
            cobs: 1.0,
            r: 1.0,
            s0: 1.0,
            loading: Vec::new(),
        }
    }

    #[test]
    fn iid_closed_form() {
        let ll = kalman_loglik(&iid(), &[0.0], 1).unwrap();
        assert!((ll + 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((ll + 1.26551).abs() < 1e-5);
        let two = kalman_loglik(&iid(), &[0.3, -1.2], 1).unwrap();
        let one = |x: f64| kalman_loglik(&iid(), &[x], 1).unwrap();
        assert!((two - one(0.3) - one(-1.2)).abs() < 1e-12);
    }

    #[test]
    fn vector_emission_matches_dense_gaussian() {
        // T=1: x ~ N(0, s0²·bbᵀ + r²I); evaluate the dense density directly.
        let p = LgssmParams {
            a: 0.5,
            q: 0.7,
            cobs: 1.3,
            r: 0.4,
            s0: 0.9,
            loading: vec![1.0, -0.5],
        };
        let x = [0.2, -0.6];
        let b: [f64; 2] = [1.3, -0.65];
        let s = [
            [0.81 * b[0] * b[0] + 0.16, 0.81 * b[0] * b[1]],
            [0.81 * b[1] * b[0], 0.81 * b[1] * b[1] + 0.16],
        ];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let quad =
            (s[1][1] * x[0] * x[0] - 2.0 * s[0][1] * x[0] * x[1] + s[0][0] * x[1] * x[1]) / det;
        let dense = -0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad);
        assert!((kalman_loglik(&p, &x, 2).unwrap() - dense).abs() < 1e-12);
    }

    #[test]
    fn kalman_matches_monte_carlo_marginal() {
        let p = LgssmParams {
            a: 0.8,
            q: 0.6,
            cobs: 1.0,
            r: 0.7,
            s0: 1.0,
            loading: Vec::new(),
        };
        let x = [0.4, 1.1];
        let exact = kalman_loglik(&p, &x, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let norm = |v: f64, s: f64| {
            (-0.5 * (v / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let w: Vec<f64> = (0..n)
            .map(|_| {
                let z1 = p.s0 * randn(&mut rng);
                let z2 = p.a * z1 + p.q * randn(&mut rng);
                norm(x[0] - z1, p.r) * norm(x[1] - z2, p.r)
            })
            .collect();
        let mean = w.iter().sum::<f64>() / n as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se_log = sd / (mean * (n as f64).sqrt());
        assert!(
            (mean.ln() - exact).abs() < 3.0 * se_log,
            "{} vs {exact} (se {se_log})",
            mean.ln()
        );
    }

    #[test]
    fn lgssm_is_seeded_and_has_the_right_variance() {
        let a = gen_lgssm(&LgssmParams::default(), 8, 5, 3, 7).unwrap();
        assert_eq!(a, gen_lgssm(&LgssmParams::default(), 8, 5, 3, 7).unwrap());
        assert_ne!(a, gen_lgssm(&LgssmParams::default(), 8, 5, 3, 8).unwrap());
        let ll = a.loglik.as_ref().unwrap();
        assert_eq!(
            ll[2],
            kalman_loglik(&LgssmParams::default(), a.sequence(2), 3).unwrap()
        );

        let d = gen_lgssm(&iid(), 100_000, 1, 1, 3).unwrap();
        let n = d.values().len() as f64;
        let var = d.values().iter().map(|v| v * v).sum::<f64>() / n;
        // Var of the sample second moment of N(0, 2) is 2·2²/n.
        assert!((var - 2.0).abs() < 3.0 * (8.0 / n).sqrt(), "{var}");

        assert!(gen_lgssm(&LgssmParams { r: 0.0, ..iid() }, 1, 1, 1, 0).is_err());
        assert!(gen_lgssm(&LgssmParams { a: 1.5, ..iid() }, 1, 1, 1, 0).is_err());
        assert!(gen_lgssm(
            &LgssmParams {
                loading: vec![1.0],
                ..iid()
            },
            1,
            1,
            2,
            0
        )
        .is_err());
    }

    #[test]
    fn sine_examples() {
        let d = gen_sine(3, 20, 4, 0.0).unwrap();
        for (i, (f, phi)) in sine_params(3, 4).into_iter().enumerate() {
            assert!((0.02..0.1).contains(&f));
            for t in 0..20 {
                let expect = (2.0 * std::f64::consts::PI * f * t as f64 + phi).sin();
                assert_eq!(d.step(i, t)[0], expect);
            }
        }
        assert_eq!(
            gen_sine(5, 7, 9, 0.1).unwrap(),
            gen_sine(5, 7, 9, 0.1).unwrap()
        );
        let s = 0.2;
        let big = gen_sine(10_000, 30, 5, s).unwrap();
        assert!(big.values().iter().all(|v| v.abs() <= 1.0 + 5.0 * s));
        assert!(gen_sine(1, 1, 0, -1.0).is_err());
    }

    #[test]
    fn seqdata_round_trip_and_errors() {
        let d = gen_lgssm(&LgssmParams::default(), 4, 6, 2, 1).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"seqdata v1 4 6 2\n"));
        let back = SequenceDataset::read_from(&buf).unwrap();
        assert_eq!(back.values(), d.values());
        assert_eq!((back.n_seq(), back.steps(), back.x_dim()), (4, 6, 2));

        assert!(matches!(
            SequenceDataset::read_from(&buf[..buf.len() - 1]),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(
            SequenceDataset::read_from(b"seqdata v2 1 1 1\n"),
            Err(DataError::Version(_))
        ));
        assert!(matches!(
            SequenceDataset::read_from(b"avrnn-ckpt v1\n"),
            Err(DataError::Version(_))
        ));
        assert!(matches!(
            SequenceDataset::read_from(b"seqdata v1 1 x 1\n"),
            Err(DataError::Malformed(_))
        ));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(
            SequenceDataset::read_from(&extra),
            Err(DataError::Malformed(_))
        ));

        let empty = SequenceDataset::new(2, 0, 3, vec![]).unwrap();
        let mut buf = Vec::new();
        empty.write_to(&mut buf).unwrap();
        assert_eq!(SequenceDataset::read_from(&buf).unwrap(), empty);
    }

    #[test]
    fn batching_examples() {
        let one = gen_sine(1, 3, 0, 0.0).unwrap();
        for b in batches(&one, 1, 5).unwrap().take(5) {
            assert_eq!(b.indices, vec![0]);
            assert_eq!(b.steps[2].data(), one.step(0, 2));
        }
        let d = gen_sine(4, 2, 0, 0.0).unwrap();
        let a: Vec<_> = batches(&d, 3, 11)
            .unwrap()
            .take(10)
            .map(|b| b.indices)
            .collect();
        let b: Vec<_> = batches(&d, 3, 11)
            .unwrap()
            .take(10)
            .map(|b| b.indices)
            .collect();
        assert_eq!(a, b);

        let mut s = batches(&d, 1, 12).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[s.next_indices()[0]] += 1;
        }
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 3.0 * se, "{counts:?}");
        }
        let empty = SequenceDataset::new(0, 3, 1, vec![]).unwrap();
        assert!(matches!(batches(&empty, 1, 0), Err(DataError::Empty)));
    }

    #[test]
    fn stream_ignores_storage_order() {
        // Indices depend only on the seed, so two datasets of equal size
        // see identical index streams.
        let a = gen_sine(6, 2, 1, 0.0).unwrap();
        let b = gen_sine(6, 2, 2, 0.0).unwrap();
        let ia: Vec<_> = batches(&a, 4, 3)
            .unwrap()
            .take(5)
            .map(|b| b.indices)
            .collect();
        let ib: Vec<_> = batches(&b, 4, 3)
            .unwrap()
            .take(5)
            .map(|b| b.indices)
            .collect();
        assert_eq!(ia, ib);
    }

    #[test]
    fn prefetch_matches_sequential_stream() {
        let d = gen_lgssm(&LgssmParams::default(), 10, 4, 2, 3).unwrap();
        let seq: Vec<_> = batches(&d, 3, 9).unwrap().take(20).collect();
        let pre: Vec<_> = PrefetchBatches::spawn(d.clone(), 3, 9, 2)
            .unwrap()
            .take(20)
            .collect();
        assert_eq!(seq, pre);
    }

    #[test]
    fn time_major_round_trip() {
        let d = gen_lgssm(&LgssmParams::default(), 3, 4, 2, 5).unwrap();
        let steps = d.gather(&[0, 1, 2]);
        let back = SequenceDataset::from_time_major(&steps, 3, 2).unwrap();
        assert_eq!(back.values(), d.values());
        assert_eq!(d.subset(1..3).sequence(0), d.sequence(1));
    }
}
