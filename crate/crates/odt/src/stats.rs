//! Can anyone tell an aggressor's ServerHello nonce from a plain server's?
//!
//! Three complementary checks on two equally sized sets of 32-byte samples:
//! per-bit frequency z-scores, two-sample chi-square tests on byte values,
//! and the held-out advantage of a logistic distinguisher over per-position
//! byte-value indicators.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use odt_core::device::{load_process, DeviceId, ProcessId};
use odt_core::endpoints::{AggressorConfig, MeasurementConfig, Registry, ServerSession};
use odt_core::group::GroupElement;
use odt_core::handshake::{ClientHandshake, Message};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{OdtError, Result};
use crate::net::child_rng;

pub const NONCE_LEN: usize = 32;
pub const MIN_SAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// ServerHello nonces of a plain server.
    Plain,
    /// ServerHello nonces of an aggressor.
    Aggressor,
    /// Bytes straight from the generator.
    Uniform,
    /// Like `Uniform` with the top bit (bit 7 of byte 31) cleared.
    TopBitCleared,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Plain => "plain",
            Source::Aggressor => "aggressor",
            Source::Uniform => "uniform",
            Source::TopBitCleared => "top-bit-cleared",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    pub label: Source,
    pub samples: Vec<[u8; NONCE_LEN]>,
}

const CHUNK: usize = 1024;

/// Draws `n` samples from `source`, reproducibly for a given `seed` whatever
/// the number of worker threads.
pub fn sample(source: Source, n: usize, seed: u64) -> SampleSet {
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let chunks = n.div_ceil(CHUNK);
    let seeds: Vec<ChaCha20Rng> = (0..chunks).map(|_| child_rng(&mut master)).collect();
    let aggressor = Arc::new(aggressor_for_sampling(seed));
    let next = AtomicUsize::new(0);
    let mut out: Vec<Vec<[u8; NONCE_LEN]>> = vec![Vec::new(); chunks];
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(chunks.max(1));
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                let seeds = &seeds;
                let next = &next;
                let aggressor = &aggressor;
                scope.spawn(move || {
                    let mut done = Vec::new();
                    loop {
                        let c = next.fetch_add(1, Ordering::Relaxed);
                        if c >= chunks {
                            break;
                        }
                        let len = CHUNK.min(n - c * CHUNK);
                        let mut rng = seeds[c].clone();
                        let batch = (0..len).map(|_| draw(source, aggressor, &mut rng)).collect();
                        done.push((c, batch));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (c, batch) in h.join().expect("sampler thread panicked") {
                out[c] = batch;
            }
        }
    });
    SampleSet {
        label: source,
        samples: out.into_iter().flatten().collect(),
    }
}

fn aggressor_for_sampling(seed: u64) -> AggressorConfig {
    let measurement = MeasurementConfig::default();
    AggressorConfig {
        expected_image: load_process(DeviceId(1), ProcessId(1), seed, 4096, &measurement.omega)
            .expect("4096 words fit the default region"),
        measurement,
        registry: Registry::new(),
    }
}

fn draw(source: Source, aggressor: &AggressorConfig, rng: &mut ChaCha20Rng) -> [u8; NONCE_LEN] {
    let mut out = [0u8; NONCE_LEN];
    match source {
        Source::Uniform => rng.fill_bytes(&mut out),
        Source::TopBitCleared => {
            rng.fill_bytes(&mut out);
            out[31] &= 0x7f;
        }
        Source::Plain | Source::Aggressor => {
            // The server sees what an O-TEE sends: a canonical group element.
            let u = GroupElement::random(rng);
            let (_, hello) = ClientHandshake::start(u.to_bytes(), rng);
            let mut server = match source {
                Source::Plain => ServerSession::plain(),
                _ => ServerSession::aggressor(aggressor),
            };
            let flight = server.on_frame(&hello, rng).expect("server accepts a well-formed hello");
            let Ok(Message::ServerHello(sh)) = Message::decode(&flight[0]) else {
                unreachable!("first frame of the flight is the ServerHello");
            };
            out = sh.random;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformityReport {
    pub n: usize,
    pub a: Source,
    pub b: Source,
    /// Two-proportion z-score per bit position, bit `8j + i` being bit `i` of byte `j`.
    pub bit_z: Vec<f64>,
    pub max_abs_z: f64,
    /// Byte values pooled over positions, 255 degrees of freedom.
    pub byte_chi_square: ChiSquare,
    /// Byte values per position, summed over positions.
    pub positional_chi_square: ChiSquare,
    /// `|P[D = a | a] - P[D = a | b]|` on held-out halves.
    pub advantage: f64,
}

pub fn uniformity_test(a: &SampleSet, b: &SampleSet) -> Result<UniformityReport> {
    if a.samples.len() != b.samples.len() {
        return Err(OdtError::SizeMismatch(a.samples.len(), b.samples.len()));
    }
    let n = a.samples.len();
    if n < MIN_SAMPLES {
        return Err(OdtError::InsufficientSamples { got: n, min: MIN_SAMPLES });
    }
    let bit_z = bit_z_scores(&a.samples, &b.samples);
    let max_abs_z = bit_z.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    let (ha, hb) = (byte_histograms(&a.samples), byte_histograms(&b.samples));
    let pooled = |h: &[[u64; 256]; NONCE_LEN]| -> [u64; 256] {
        let mut out = [0u64; 256];
        for row in h {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    };
    let byte_chi_square = chi_square_p(two_sample_chi_square(&pooled(&ha), &pooled(&hb)));
    let positional_chi_square = chi_square_p(
        ha.iter()
            .zip(&hb)
            .map(|(x, y)| two_sample_chi_square(x, y))
            .fold((0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1)),
    );
    Ok(UniformityReport {
        n,
        a: a.label,
        b: b.label,
        bit_z,
        max_abs_z,
        byte_chi_square,
        positional_chi_square,
        advantage: distinguisher_advantage(&a.samples, &b.samples),
    })
}

fn bit_z_scores(a: &[[u8; NONCE_LEN]], b: &[[u8; NONCE_LEN]]) -> Vec<f64> {
    let count = |set: &[[u8; NONCE_LEN]]| {
        let mut c = vec![0u64; NONCE_LEN * 8];
        for s in set {
            for (j, byte) in s.iter().enumerate() {
                for i in 0..8 {
                    c[8 * j + i] += u64::from(byte >> i & 1);
                }
            }
        }
        c
    };
    let (ca, cb) = (count(a), count(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    ca.iter()
        .zip(&cb)
        .map(|(&x, &y)| {
            let (pa, pb) = (x as f64 / na, y as f64 / nb);
            let p = (x + y) as f64 / (na + nb);
            let se = (p * (1.0 - p) * (1.0 / na + 1.0 / nb)).sqrt();
            if se == 0.0 {
                0.0
            } else {
                (pa - pb) / se
            }
        })
        .collect()
}

fn byte_histograms(set: &[[u8; NONCE_LEN]]) -> [[u64; 256]; NONCE_LEN] {
    let mut h = [[0u64; 256]; NONCE_LEN];
    for s in set {
        for (j, &byte) in s.iter().enumerate() {
            h[j][byte as usize] += 1;
        }
    }
    h
}

/// Pearson statistic and degrees of freedom of a 2×K table; empty columns are dropped.
fn two_sample_chi_square(x: &[u64; 256], y: &[u64; 256]) -> (f64, f64) {
    let (nx, ny) = (x.iter().sum::<u64>() as f64, y.iter().sum::<u64>() as f64);
    let total = nx + ny;
    let mut stat = 0.0;
    let mut columns = 0;
    for (&a, &b) in x.iter().zip(y) {
        let col = (a + b) as f64;
        if col == 0.0 {
            continue;
        }
        columns += 1;
        let (ea, eb) = (nx * col / total, ny * col / total);
        stat += (a as f64 - ea).powi(2) / ea + (b as f64 - eb).powi(2) / eb;
    }
    (stat, (columns.max(1) - 1) as f64)
}

fn chi_square_p((statistic, df): (f64, f64)) -> ChiSquare {
    let p_value = if df == 0.0 {
        1.0
    } else {
        ChiSquared::new(df).expect("positive degrees of freedom").sf(statistic)
    };
    ChiSquare { statistic, df, p_value }
}

const FEATURES: usize = NONCE_LEN * 256;
const SWEEPS: usize = 8;
const RIDGE: f64 = 1.0;

/// Logistic model over one-hot byte indicators, one block of 256 per position;
/// blocks left out of the fit keep zero weight.
struct Logistic {
    bias: f64,
    weights: Vec<f64>,
}

impl Logistic {
    fn score(&self, s: &[u8; NONCE_LEN]) -> f64 {
        self.bias
            + s.iter()
                .enumerate()
                .map(|(p, &v)| self.weights[p * 256 + v as usize])
                .sum::<f64>()
    }

    /// Ridge-penalised log loss over the blocks in `positions`, label 1 for
    /// `a`. Cyclic Newton over the bias and the blocks; inside a block the
    /// indicators are disjoint, so the diagonal step is exact.
    fn fit(a: &[[u8; NONCE_LEN]], b: &[[u8; NONCE_LEN]], positions: &[usize]) -> Self {
        let data: Vec<(&[u8; NONCE_LEN], f64)> =
            a.iter().map(|s| (s, 1.0)).chain(b.iter().map(|s| (s, 0.0))).collect();
        let mut model = Logistic {
            bias: 0.0,
            weights: vec![0.0; FEATURES],
        };
        let mut scores = vec![0.0f64; data.len()];
        for _ in 0..SWEEPS {
            let (g, h) = data.iter().zip(&scores).fold((0.0, 0.0), |(g, h), ((_, y), &z)| {
                let q = sigmoid(z);
                (g + q - y, h + q * (1.0 - q))
            });
            let step = g / h.max(1e-12);
            model.bias -= step;
            scores.iter_mut().for_each(|z| *z -= step);
            for &p in positions {
                let mut g = [0.0f64; 256];
                let mut h = [0.0f64; 256];
                for ((s, y), &z) in data.iter().zip(&scores) {
                    let q = sigmoid(z);
                    g[s[p] as usize] += q - y;
                    h[s[p] as usize] += q * (1.0 - q);
                }
                let block = &mut model.weights[p * 256..(p + 1) * 256];
                let mut delta = [0.0f64; 256];
                for v in 0..256 {
                    delta[v] = -(g[v] + RIDGE * block[v]) / (h[v] + RIDGE);
                    block[v] += delta[v];
                }
                for ((s, _), z) in data.iter().zip(scores.iter_mut()) {
                    *z += delta[s[p] as usize];
                }
            }
        }
        model
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn advantage(model: &Logistic, a: &[[u8; NONCE_LEN]], b: &[[u8; NONCE_LEN]]) -> f64 {
    let rate = |set: &[[u8; NONCE_LEN]]| set.iter().filter(|s| model.score(s) > 0.0).count() as f64 / set.len() as f64;
    rate(a) - rate(b)
}

/// All positions together, then each position alone.
fn candidates() -> Vec<Vec<usize>> {
    core::iter::once((0..NONCE_LEN).collect())
        .chain((0..NONCE_LEN).map(|p| vec![p]))
        .collect()
}

/// Picks the candidate block set that validates best inside the training
/// halves, then refits it on all of them.
fn select_and_fit(a: &[[u8; NONCE_LEN]], b: &[[u8; NONCE_LEN]]) -> Logistic {
    let (fa, va) = a.split_at(a.len() / 2);
    let (fb, vb) = b.split_at(b.len() / 2);
    let best = candidates()
        .into_iter()
        .map(|c| {
            let score = advantage(&Logistic::fit(fa, fb, &c), va, vb);
            (score, c)
        })
        .fold((f64::NEG_INFINITY, Vec::new()), |best, cur| if cur.0 > best.0 { cur } else { best });
    Logistic::fit(a, b, &best.1)
}

/// Two-fold cross-fitted advantage: select and train on one half of each
/// set, classify the other half, and swap.
pub fn distinguisher_advantage(a: &[[u8; NONCE_LEN]], b: &[[u8; NONCE_LEN]]) -> f64 {
    let (a1, a2) = a.split_at(a.len() / 2);
    let (b1, b2) = b.split_at(b.len() / 2);
    let mut hits_a = 0usize;
    let mut false_a = 0usize;
    for ((train_a, train_b), (test_a, test_b)) in [((a1, b1), (a2, b2)), ((a2, b2), (a1, b1))] {
        let model = select_and_fit(train_a, train_b);
        hits_a += test_a.iter().filter(|s| model.score(s) > 0.0).count();
        false_a += test_b.iter().filter(|s| model.score(s) > 0.0).count();
    }
    (hits_a as f64 / a.len() as f64 - false_a as f64 / b.len() as f64).abs()
}

/// Writes `source,index,nonce_hex` rows.
pub fn write_csv(path: &Path, sets: &[&SampleSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "index", "nonce_hex"])?;
    for set in sets {
        for (i, s) in set.samples.iter().enumerate() {
            w.write_record([set.label.as_str(), &i.to_string(), &hex::encode(s)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_reproducible() {
        let a = sample(Source::Aggressor, 1500, 3);
        assert_eq!(a, sample(Source::Aggressor, 1500, 3));
        assert_eq!(a.samples.len(), 1500);
        assert_ne!(a.samples, sample(Source::Aggressor, 1500, 4).samples);
    }

    #[test]
    fn too_few_or_unequal_samples() {
        let a = sample(Source::Uniform, 999, 1);
        assert!(matches!(uniformity_test(&a, &a), Err(OdtError::InsufficientSamples { got: 999, .. })));
        let b = sample(Source::Uniform, 1000, 1);
        assert!(matches!(uniformity_test(&a, &b), Err(OdtError::SizeMismatch(999, 1000))));
    }

    #[test]
    fn chi_square_of_identical_tables_is_zero() {
        let mut x = [0u64; 256];
        x[3] = 10;
        x[9] = 5;
        assert_eq!(two_sample_chi_square(&x, &x), (0.0, 1.0));
    }

    #[test]
    fn chi_square_matches_hand_computation() {
        // 2×2 table [[30, 10], [20, 40]]: expected [[20, 20], [30, 30]].
        let mut x = [0u64; 256];
        let mut y = [0u64; 256];
        (x[0], x[1], y[0], y[1]) = (30, 10, 20, 40);
        let (stat, df) = two_sample_chi_square(&x, &y);
        let want = 100.0 / 20.0 + 100.0 / 20.0 + 100.0 / 30.0 + 100.0 / 30.0;
        assert!((stat - want).abs() < 1e-12);
        assert_eq!(df, 1.0);
    }

    #[test]
    fn planted_bias_is_caught() {
        let a = sample(Source::Uniform, 4000, 5);
        let b = sample(Source::TopBitCleared, 4000, 6);
        let r = uniformity_test(&a, &b).unwrap();
        assert!(r.advantage > 0.4, "{}", r.advantage);
        assert!(r.bit_z[255].abs() > 20.0);
        assert!(r.positional_chi_square.p_value < 1e-6);
    }

    #[test]
    fn null_case_is_quiet() {
        let a = sample(Source::Uniform, 4000, 7);
        let b = sample(Source::Uniform, 4000, 8);
        let r = uniformity_test(&a, &b).unwrap();
        assert!(r.advantage < 0.05, "{}", r.advantage);
        assert!(r.byte_chi_square.p_value > 1e-4);
    }
}
