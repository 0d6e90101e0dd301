//! Little-endian CSI container:
//!
//! ```text
//! "CSI1"  u32 version=1  u32 A  u32 S  u32 T
//! f32 amplitude[A*S*T]   (antenna-major, then subcarrier, then time)
//! f32 phase[A*S*T]       (wrapped, radians)
//! u32 meta_len  UTF-8 JSON metadata[meta_len]
//! ```

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CSI1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Phases are stored as f32, and `f32(PI)` is slightly above `PI`.
const PHASE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsiMeta {
    pub subject: String,
    pub environment: String,
    pub action: String,
    pub frame: u64,
}

/// One input window: amplitude and phase over antennas x subcarriers x time.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    amplitude: Tensor,
    phase: Tensor,
    pub meta: CsiMeta,
}

impl CsiSample {
    pub fn new(amplitude: Tensor, phase: Tensor, meta: CsiMeta) -> Result<Self> {
        if amplitude.rank() != 3 || amplitude.shape() != phase.shape() {
            return Err(Error::shape(format!(
                "amplitude {:?} and phase {:?} must share an [A, S, T] shape",
                amplitude.shape(),
                phase.shape()
            )));
        }
        if let Some(i) = amplitude.data().iter().position(|&a| !(a >= 0.0)) {
            return Err(Error::Parse(format!(
                "amplitude[{i}] = {} is negative or NaN",
                amplitude.data()[i]
            )));
        }
        Ok(Self {
            amplitude,
            phase,
            meta,
        })
    }

    pub fn antennas(&self) -> usize {
        self.amplitude.shape()[0]
    }

    pub fn subcarriers(&self) -> usize {
        self.amplitude.shape()[1]
    }

    pub fn time_slices(&self) -> usize {
        self.amplitude.shape()[2]
    }

    pub fn amplitude(&self) -> &Tensor {
        &self.amplitude
    }

    pub fn phase(&self) -> &Tensor {
        &self.phase
    }
}

pub fn write_csi_container(sample: &CsiSample, out: &mut impl Write) -> Result<()> {
    let (a, s, t) = (sample.antennas(), sample.subcarriers(), sample.time_slices());
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * a * s * t + 64);
    buf.extend_from_slice(CONTAINER_MAGIC);
    for v in [VERSION, a as u32, s as u32, t as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for tensor in [&sample.amplitude, &sample.phase] {
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&sample.meta)?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_csi_container(sample: &CsiSample, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_csi_container(sample, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_csi_container(path: impl AsRef<Path>) -> Result<CsiSample> {
    read_csi_container(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {remaining} left"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos as u64;
        let raw = self.take(n * 4, what)?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(start + 4 * i as u64, format!("non-finite {what} value")));
        }
        Ok(vals)
    }
}

pub fn read_csi_container(bytes: &[u8]) -> Result<CsiSample> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:?}, expected \"CSI1\"", String::from_utf8_lossy(magic)),
        ));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported container version {version}")));
    }
    let (a, s, t) = (cur.u32("A")?, cur.u32("S")?, cur.u32("T")?);
    if a == 0 || s == 0 || t == 0 {
        return Err(Error::format(8, format!("zero dimension in shape {a}x{s}x{t}")));
    }
    let payload = (a as u64)
        .checked_mul(s as u64)
        .and_then(|c| c.checked_mul(t as u64))
        .and_then(|c| c.checked_mul(8))
        .filter(|&p| p <= usize::MAX as u64)
        .ok_or_else(|| Error::format(8, format!("shape {a}x{s}x{t} overflows")))?;
    let remaining = (bytes.len() - HEADER_LEN) as u64;
    if payload > remaining {
        return Err(Error::format(
            HEADER_LEN as u64,
            format!("truncated payload: shape {a}x{s}x{t} needs {payload} bytes, {remaining} left"),
        ));
    }
    let count = payload / 8;
    let n = count as usize;
    let shape = [a as usize, s as usize, t as usize];

    let amp_start = cur.pos as u64;
    let amplitude = cur.f32s(n, "amplitude")?;
    if let Some(i) = amplitude.iter().position(|&v| v < 0.0) {
        return Err(Error::format(amp_start + 4 * i as u64, "negative amplitude"));
    }
    let phase_start = cur.pos as u64;
    let phase = cur.f32s(n, "phase")?;
    if let Some(i) = phase.iter().position(|v| v.abs() > PI + PHASE_SLACK) {
        return Err(Error::format(
            phase_start + 4 * i as u64,
            format!("phase {} outside (-pi, pi]", phase[i]),
        ));
    }

    let meta_at = cur.pos as u64;
    let meta_len = cur.u32("metadata length")? as usize;
    let raw_meta = cur.take(meta_len, "metadata")?;
    let meta: CsiMeta = serde_json::from_slice(raw_meta)
        .map_err(|e| Error::format(meta_at + 4, format!("metadata JSON: {e}")))?;
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }

    CsiSample::new(
        Tensor::new(&shape, amplitude)?,
        Tensor::new(&shape, phase)?,
        meta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_sample(a: usize, s: usize, t: usize, seed: u64) -> CsiSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a * s * t;
        let amp = (0..n).map(|_| rng.gen_range(0.0f32..2.0) as f64).collect();
        let ph = (0..n).map(|_| rng.gen_range(-3.14f32..3.14) as f64).collect();
        CsiSample::new(
            Tensor::new(&[a, s, t], amp).unwrap(),
            Tensor::new(&[a, s, t], ph).unwrap(),
            CsiMeta {
                subject: "S07".into(),
                environment: "E02".into(),
                action: "A13".into(),
                frame: 41,
            },
        )
        .unwrap()
    }

    fn bytes_of(s: &CsiSample) -> Vec<u8> {
        let mut v = Vec::new();
        write_csi_container(s, &mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_default_shape() {
        let s = random_sample(3, 114, 10, 1);
        let bytes = bytes_of(&s);
        let back = read_csi_container(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(bytes_of(&back), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = bytes_of(&random_sample(1, 2, 3, 0));
        bytes[..4].copy_from_slice(b"XXXX");
        let err = read_csi_container(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn short_payload() {
        let bytes = bytes_of(&random_sample(3, 114, 10, 0));
        let err = read_csi_container(&bytes[..HEADER_LEN + 1000]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn truncated_metadata_reports_offset() {
        let bytes = bytes_of(&random_sample(1, 2, 2, 0));
        let cut = bytes.len() - 3;
        match read_csi_container(&bytes[..cut]).unwrap_err() {
            Error::Format { offset, msg } => {
                assert!(offset as usize >= HEADER_LEN + 32, "{offset}");
                assert!(msg.contains("metadata"), "{msg}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn overflowing_shape() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CSI1");
        for v in [1u32, u32::MAX, u32::MAX, 4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let err = read_csi_container(&bytes).unwrap_err();
        assert!(err.to_string().contains("overflow"), "{err}");
    }

    #[test]
    fn rejects_wrong_version_and_trailing_bytes() {
        let mut bytes = bytes_of(&random_sample(1, 1, 1, 0));
        bytes.push(0);
        assert!(read_csi_container(&bytes).unwrap_err().to_string().contains("trailing"));
        bytes.pop();
        bytes[4] = 2;
        assert!(matches!(
            read_csi_container(&bytes).unwrap_err(),
            Error::Format { offset: 4, .. }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn container_round_trip_is_bit_exact(a in 1usize..16, s in 1usize..300, t in 1usize..24, seed in any::<u64>()) {
            let sample = random_sample(a, s, t, seed);
            let bytes = bytes_of(&sample);
            let back = read_csi_container(&bytes).unwrap();
            prop_assert_eq!(bytes_of(&back), bytes);
        }
    }

    #[test]
    fn round_trip_largest_shape() {
        let s = random_sample(16, 2048, 256, 5);
        let bytes = bytes_of(&s);
        assert_eq!(bytes_of(&read_csi_container(&bytes).unwrap()), bytes);
    }
}
