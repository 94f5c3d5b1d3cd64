//! Wall-clock timings of the operations the aggressor and O-TEE add to a handshake.

use std::time::Instant;

use odt_core::device::{load_process, DeviceId, DeviceSim, ProcessId};
use odt_core::elligator::{decode_uniform, encode_uniform};
use odt_core::endpoints::{run_loopback, AggressorConfig, MeasurementConfig, OteeClient, Registry, ServerSession};
use odt_core::group::{GroupElement, Scalar};
use odt_core::ppet::verifier_commit;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{OdtError, Result};
use crate::net::{child_rng, otee_identity};

pub const MIN_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BenchTarget {
    /// Encodable PPET commitment `v = g^s u^w'`, resampled until Elligator-encodable.
    Commitment,
    /// Elligator decoding of a ServerHello nonce.
    Elligator,
    /// O-TEE client against an aggressor over in-memory loopback.
    FullHandshake,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub target: BenchTarget,
    pub n_iters: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

pub fn summarize(target: BenchTarget, mut ms: Vec<f64>) -> BenchReport {
    let n = ms.len();
    ms.sort_by(f64::total_cmp);
    let median_ms = if n % 2 == 1 { ms[n / 2] } else { (ms[n / 2 - 1] + ms[n / 2]) / 2.0 };
    let mean_ms = ms.iter().sum::<f64>() / n as f64;
    let var = ms.iter().map(|x| (x - mean_ms).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    BenchReport {
        target,
        n_iters: n,
        median_ms,
        mean_ms,
        stddev_ms: var.sqrt(),
    }
}

fn time<F: FnMut()>(mut f: F) -> f64 {
    let start = Instant::now();
    f();
    start.elapsed().as_secs_f64() * 1e3
}

pub fn bench(target: BenchTarget, n_iters: usize, seed: u64) -> Result<BenchReport> {
    if n_iters < MIN_ITERS {
        return Err(OdtError::InvalidArgument(format!("need at least {MIN_ITERS} iterations")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_iters);
    match target {
        BenchTarget::Commitment => {
            for _ in 0..n_iters {
                let u = GroupElement::random(&mut rng);
                let w = Scalar::random(&mut rng);
                let mut r = child_rng(&mut rng);
                samples.push(time(|| {
                    verifier_commit(&u, &w, &mut r, true).expect("encodable commitment");
                }));
            }
        }
        BenchTarget::Elligator => {
            for _ in 0..n_iters {
                let nonce = loop {
                    if let Ok(n) = encode_uniform(&GroupElement::random(&mut rng), &mut rng) {
                        break n;
                    }
                };
                samples.push(time(|| {
                    std::hint::black_box(decode_uniform(std::hint::black_box(&nonce)));
                }));
            }
        }
        BenchTarget::FullHandshake => {
            let measurement = MeasurementConfig::default();
            let image = load_process(DeviceId(1), ProcessId(1), seed, 4096, &measurement.omega)?;
            let identity = otee_identity(seed, DeviceId(1));
            let mut registry = Registry::new();
            registry.register(&identity);
            let config = AggressorConfig {
                expected_image: image.clone(),
                measurement,
                registry,
            };
            let mut device = DeviceSim::new(DeviceId(1), true);
            device.add_process(image);
            for _ in 0..n_iters {
                let mut crng = child_rng(&mut rng);
                let mut srng = child_rng(&mut rng);
                samples.push(time(|| {
                    let mut server = ServerSession::aggressor(&config);
                    let (mut client, hello) =
                        OteeClient::start(&identity, &mut device, ProcessId(1), &config.measurement, &mut crng);
                    run_loopback(&mut client, hello, &mut server, &mut crng, &mut srng).expect("loopback session");
                    assert!(server.outcome().is_some());
                }));
            }
        }
    }
    Ok(summarize(target, samples))
}
