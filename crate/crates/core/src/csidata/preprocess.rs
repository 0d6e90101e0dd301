use std::f64::consts::{PI, TAU};

use crate::csidata::CsiSample;
use crate::diffmath::Tensor;
use crate::error::Result;

/// Per-sample variance below this is floored (with a warning) before
/// standardizing.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Network input: antenna-subcarrier pairs flattened to `F = A * S`
/// tokens, each carrying a `[2, T]` amplitude/phase trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[F, 2, T]`; channel 0 is amplitude, channel 1 is unwrapped phase.
    pub features: Tensor,
    pub antenna_index: Vec<usize>,
    pub subcarrier_index: Vec<usize>,
}

impl ModelInput {
    pub fn pairs(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn time_slices(&self) -> usize {
        self.features.shape()[2]
    }

    /// Index lists for `antennas x subcarriers` pairs in antenna-major order.
    pub fn pair_indices(antennas: usize, subcarriers: usize) -> (Vec<usize>, Vec<usize>) {
        let f = antennas * subcarriers;
        (
            (0..f).map(|i| i / subcarriers).collect(),
            (0..f).map(|i| i % subcarriers).collect(),
        )
    }
}

/// Unwraps a phase sequence in place: each successive difference is
/// mapped into `(-pi, pi]` by adding a multiple of `2 pi`.
pub fn unwrap_phase(seq: &mut [f64]) {
    let mut prev_raw = match seq.first() {
        Some(&v) => v,
        None => return,
    };
    let mut prev_out = prev_raw;
    for v in seq.iter_mut().skip(1) {
        let raw = *v;
        let d = raw - prev_raw;
        let mut dm = (d + PI).rem_euclid(TAU) - PI;
        if dm <= -PI {
            dm = PI;
        }
        prev_out += dm;
        prev_raw = raw;
        *v = prev_out;
    }
}

/// Unwraps phase along the subcarrier axis, standardizes amplitude and
/// phase per sample, and reshapes to `[A*S, 2, T]`.
pub fn preprocess(sample: &CsiSample) -> Result<ModelInput> {
    let (a, s, t) = (sample.antennas(), sample.subcarriers(), sample.time_slices());
    let amp = sample.amplitude().data();
    let mut phase = sample.phase().data().to_vec();

    let mut trace = vec![0.0; s];
    for ai in 0..a {
        for ti in 0..t {
            for si in 0..s {
                trace[si] = phase[(ai * s + si) * t + ti];
            }
            unwrap_phase(&mut trace);
            for si in 0..s {
                phase[(ai * s + si) * t + ti] = trace[si];
            }
        }
    }

    let (amp_mean, amp_std) = standardization(amp, "amplitude");
    let (ph_mean, ph_std) = standardization(&phase, "phase");

    // [A, S, T] row-major is already pair-major with time innermost, so
    // pair f = a*S + s occupies amp[f*T .. (f+1)*T].
    let f = a * s;
    let mut features = Vec::with_capacity(f * 2 * t);
    for fi in 0..f {
        let span = fi * t..(fi + 1) * t;
        features.extend(amp[span.clone()].iter().map(|v| (v - amp_mean) / amp_std));
        features.extend(phase[span].iter().map(|v| (v - ph_mean) / ph_std));
    }
    let (antenna_index, subcarrier_index) = ModelInput::pair_indices(a, s);
    Ok(ModelInput {
        features: Tensor::new(&[f, 2, t], features)?,
        antenna_index,
        subcarrier_index,
    })
}

fn standardization(values: &[f64], what: &str) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < VARIANCE_FLOOR {
        log::warn!("{what} variance {var:e} below floor; clamped to {VARIANCE_FLOOR:e}");
        var = VARIANCE_FLOOR;
    }
    (mean, var.sqrt())
}
