//! Workers, the server mirror of their state, and the wire messages between them.

use crate::codec::{BitReport, IndexStream};
use crate::dither::DitherCoordinates;
use crate::error::{Error, Result};
use crate::nested::{nested_decode_vector, nested_encode_gradient, NestedConfig, NestedMessage};
use crate::quant::{
    dithered_decode, partition_encode, stochastic_decode, stochastic_encode, Gradient, OneBitMessage, OneBitState,
    QuantizedMessage, QuantizerKind, UniformQuantizerCfg,
};
use crate::training::OptState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Decodable on its own.
    P1,
    /// Nested; decoded with the running average as side information.
    P2,
}

/// Encoding scheme of one worker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Full,
    Dithered { cfg: UniformQuantizerCfg, partitions: usize },
    Stochastic { cfg: UniformQuantizerCfg },
    OneBit,
    Nested { cfg: NestedConfig },
}

impl Scheme {
    pub fn group(&self) -> Group {
        match self {
            Scheme::Nested { .. } => Group::P2,
            _ => Group::P1,
        }
    }

    /// Ideal fixed-rate bits of one message of `n` elements.
    pub fn raw_bits(&self, n: usize) -> f64 {
        let n64 = n as u64;
        match self {
            Scheme::Full => 32.0 * n as f64,
            Scheme::Dithered { cfg, partitions } => crate::codec::raw_bits(n64, cfg.levels(), *partitions as u64),
            Scheme::Stochastic { cfg } => crate::codec::raw_bits(n64, cfg.levels(), 1),
            Scheme::OneBit => n as f64 + 64.0,
            Scheme::Nested { cfg } => crate::codec::raw_bits(n64, cfg.nesting_k() as u64, 1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerNode {
    pub id: usize,
    pub coords: DitherCoordinates,
    pub scheme: Scheme,
    pub onebit: Option<OneBitState<f64>>,
    /// This worker's replica of the model and optimizer.
    pub opt: OptState,
}

/// What a worker puts on the wire plus simulator-side bookkeeping that is
/// never read by the server's decoder.
#[derive(Debug, Clone)]
pub struct Upload {
    pub id: usize,
    pub bytes: Vec<u8>,
    /// The worker's own reconstruction, when it can compute one.
    pub local: Option<Vec<f64>>,
    pub grad: Vec<f64>,
    pub bits: BitReport,
}

fn full_report(n: usize) -> BitReport {
    let bits = 32 * n as u64;
    BitReport {
        raw_bits: bits as f64,
        packed_bits: bits,
        entropy_bits: bits as f64,
        coded_bits: bits,
        scale_bits: 0,
    }
}

fn stream_report(symbols: Vec<i32>, lo: i32, hi: i32, scales: usize, coded: bool) -> Result<BitReport> {
    let stream = IndexStream::new(symbols, lo, hi)?;
    if coded {
        BitReport::for_stream(&stream, scales)
    } else {
        BitReport::for_stream_uncoded(&stream, scales)
    }
}

impl WorkerNode {
    /// Encodes `grad` at the current coordinates.
    pub fn encode(&mut self, grad: Vec<f64>, coded: bool) -> Result<Upload> {
        let n = grad.len();
        let g = Gradient::from_vec(grad)?;
        let (bytes, local, bits) = match self.scheme {
            Scheme::Full => {
                let bytes: Vec<u8> = g.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
                let local = g.as_slice().iter().map(|&x| x as f32 as f64).collect();
                (bytes, Some(local), full_report(n))
            }
            Scheme::Dithered { cfg, partitions } => {
                let msg = partition_encode(&g, partitions, &cfg, self.coords)?;
                let local = dithered_decode::<f64>(&msg, &cfg, self.coords)?.into_vec();
                let m = cfg.levels_m as i32;
                let bits = stream_report(msg.indices.clone(), -m, m, partitions, coded)?;
                (msg.to_bytes(), Some(local), bits)
            }
            Scheme::Stochastic { cfg } => {
                let msg = stochastic_encode(&g, &cfg, self.coords)?;
                let local = stochastic_decode::<f64>(&msg, &cfg)?.into_vec();
                let m = cfg.levels_m as i32;
                let bits = stream_report(msg.indices.clone(), -m, m, 1, coded)?;
                (msg.to_bytes(), Some(local), bits)
            }
            Scheme::OneBit => {
                let state = self
                    .onebit
                    .get_or_insert_with(|| OneBitState::new(n));
                let (msg, recon) = crate::quant::onebit_encode(&g, state)?;
                let symbols = msg.bits.iter().map(|&b| b as i32).collect();
                let bits = stream_report(symbols, 0, 1, 2, coded)?;
                (msg.to_bytes(), Some(recon), bits)
            }
            Scheme::Nested { cfg } => {
                let msg = nested_encode_gradient(&g, &cfg, self.coords)?;
                let (lo, hi) = cfg.rel_range();
                let bits = stream_report(msg.rel_indices.clone(), lo, hi, 1, coded)?;
                (msg.to_bytes(), None, bits)
            }
        };
        Ok(Upload {
            id: self.id,
            bytes,
            local,
            grad: g.into_vec(),
            bits,
        })
    }

    pub fn advance(&mut self) -> Result<()> {
        self.coords = self.coords.advance_round()?;
        Ok(())
    }
}

/// The server's copy of one worker's protocol state.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerMirror {
    pub coords: DitherCoordinates,
    pub scheme: Scheme,
    /// Sum and count of per-round innovation variance estimates.
    pub sigma_sq_sum: f64,
    pub sigma_rounds: u64,
}

#[derive(Debug, Clone)]
pub struct ServerNode {
    pub mirrors: Vec<WorkerMirror>,
}

impl ServerNode {
    pub fn new(workers: &[WorkerNode]) -> Self {
        Self {
            mirrors: workers
                .iter()
                .map(|w| WorkerMirror {
                    coords: w.coords,
                    scheme: w.scheme,
                    sigma_sq_sum: 0.0,
                    sigma_rounds: 0,
                })
                .collect(),
        }
    }

    /// Reconstructs a P1 message from its bytes.
    pub fn decode_p1(&self, id: usize, bytes: &[u8]) -> Result<Vec<f64>> {
        let mirror = &self.mirrors[id];
        match mirror.scheme {
            Scheme::Full => {
                if bytes.len() % 4 != 0 {
                    return Err(Error::Decode("full-precision payload is not a whole number of f32".into()));
                }
                Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect())
            }
            Scheme::Dithered { cfg, .. } => {
                let msg = QuantizedMessage::from_bytes(bytes, cfg)?;
                Ok(dithered_decode::<f64>(&msg, &cfg, mirror.coords)?.into_vec())
            }
            Scheme::Stochastic { cfg } => {
                let msg = QuantizedMessage::from_bytes(bytes, cfg)?;
                if msg.kind != QuantizerKind::Stochastic || msg.dither != mirror.coords {
                    return Err(Error::Protocol(format!("unexpected stochastic message from worker {id}")));
                }
                Ok(stochastic_decode::<f64>(&msg, &cfg)?.into_vec())
            }
            Scheme::OneBit => Ok(OneBitMessage::from_bytes(bytes)?.reconstruct()),
            Scheme::Nested { .. } => Err(Error::Protocol(format!("worker {id} is nested and needs side information"))),
        }
    }

    /// Reconstructs a nested message against the side information `y`.
    pub fn decode_p2(&self, id: usize, bytes: &[u8], y: &[f64]) -> Result<(NestedMessage, Vec<f64>)> {
        let mirror = &self.mirrors[id];
        let Scheme::Nested { cfg } = mirror.scheme else {
            return Err(Error::Protocol(format!("worker {id} is not nested")));
        };
        let msg = NestedMessage::from_bytes(bytes, cfg)?;
        let rec = nested_decode_vector(&msg, y, &cfg, mirror.coords)?;
        Ok((msg, rec))
    }
}
