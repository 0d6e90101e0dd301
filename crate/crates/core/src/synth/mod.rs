//! Synthetic rooms, multipath CSI and paired datasets.
//!
//! The room has its origin at a floor corner with x along the width, y
//! along the depth and z up. The channel is a sum of a line-of-sight path,
//! one scatter path through the person's center and the six first-order
//! wall/floor/ceiling reflections (image sources).

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::csidata::{
    resample_cloud, save_csi_container, write_ply, CsiMeta, CsiSample, Manifest, ManifestEntry, PointCloud,
    MANIFEST_FILE,
};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::neighbors::Point3;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Width, depth, height in meters.
    pub room: [f64; 3],
    /// Lower x/y corner of the region the person's center is drawn from.
    pub person_min: [f64; 2],
    pub person_max: [f64; 2],
    pub person_semi_axes: [f64; 3],
    /// Horizontal distance from the person to the transmitter.
    pub tx_distance: f64,
    pub tx_height: f64,
    /// Center of the receive array.
    pub rx_center: [f64; 3],
    /// Spacing of the receive antennas along x.
    pub rx_spacing: f64,
    /// Largest displacement of the person across one window.
    pub max_drift: f64,
    pub room_points: usize,
    pub person_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room: [8.5, 7.8, 3.0],
            person_min: [2.0, 2.0],
            person_max: [6.5, 5.8],
            person_semi_axes: [0.25, 0.25, 0.9],
            tx_distance: 0.75,
            tx_height: 1.0,
            rx_center: [4.25, 0.3, 1.0],
            rx_spacing: 0.03,
            max_drift: 0.1,
            room_points: 600,
            person_points: 900,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [w, d, h] = self.room;
        if !(w > 0.0 && d > 0.0 && h > 0.0) {
            return Err(Error::config(format!("room extents must be positive, got {:?}", self.room)));
        }
        let axes = self.person_semi_axes;
        if axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::config("person semi-axes must be positive"));
        }
        for k in 0..2 {
            let lo = self.person_min[k] - axes[k] - self.max_drift;
            let hi = self.person_max[k] + axes[k] + self.max_drift;
            if self.person_min[k] > self.person_max[k] || lo < 0.0 || hi > self.room[k] {
                return Err(Error::config(format!(
                    "person region [{:?}, {:?}] (with semi-axes and drift) is outside the room {:?}",
                    self.person_min, self.person_max, self.room
                )));
            }
        }
        if 2.0 * axes[2] > h {
            return Err(Error::config("person is taller than the room"));
        }
        if self.person_min[0] - self.tx_distance - self.max_drift <= 0.0 || !(0.0..h).contains(&self.tx_height) {
            return Err(Error::config("transmitter would be outside the room"));
        }
        let c = self.rx_center;
        if !(0.0..w).contains(&c[0]) || !(0.0..d).contains(&c[1]) || !(0.0..h).contains(&c[2]) {
            return Err(Error::config("receive array is outside the room"));
        }
        if !(self.max_drift >= 0.0) {
            return Err(Error::config("max_drift must be >= 0"));
        }
        if self.room_points + self.person_points == 0 {
            return Err(Error::config("scene must sample at least one point"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfConfig {
    pub center_frequency: f64,
    pub bandwidth: f64,
    pub subcarriers: usize,
    pub antennas: usize,
    /// Standard deviation of the complex Gaussian noise, per component.
    pub noise_std: f64,
    /// Multiplier on the person-scatter path amplitude.
    pub person_reflectivity: f64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            center_frequency: 5e9,
            bandwidth: 40e6,
            subcarriers: 114,
            antennas: 3,
            noise_std: 1e-3,
            person_reflectivity: 1.0,
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subcarriers == 0 || self.antennas == 0 {
            return Err(Error::config("subcarriers and antennas must be >= 1"));
        }
        if !(self.center_frequency > 0.0 && self.bandwidth > 0.0) {
            return Err(Error::config("frequencies must be positive"));
        }
        if !(self.noise_std >= 0.0) || !(self.person_reflectivity >= 0.0) {
            return Err(Error::config("noise_std and person_reflectivity must be >= 0"));
        }
        Ok(())
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / self.subcarriers as f64
    }

    /// `f_c + (s - S/2) * df`
    pub fn subcarrier_frequency(&self, s: usize) -> f64 {
        self.center_frequency + (s as f64 - self.subcarriers as f64 / 2.0) * self.subcarrier_spacing()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: [f64; 3],
    /// Person center at the first time slice.
    pub person_center: Point3,
    pub person_semi_axes: [f64; 3],
    /// Displacement of the person over the whole window.
    pub drift: Point3,
    pub tx: Point3,
    pub rx: Vec<Point3>,
}

impl Scene {
    /// Person center at slice `t` of `slices`, moving linearly.
    pub fn person_at(&self, t: usize, slices: usize) -> Point3 {
        let f = if slices > 1 { t as f64 / (slices - 1) as f64 } else { 0.0 };
        [
            self.person_center[0] + f * self.drift[0],
            self.person_center[1] + f * self.drift[1],
            self.person_center[2] + f * self.drift[2],
        ]
    }

    /// Returns a copy with the person (and the transmitter that follows
    /// it) moved by `offset`.
    pub fn with_person_moved(&self, offset: Point3) -> Self {
        let mut s = self.clone();
        for k in 0..3 {
            s.person_center[k] += offset[k];
            s.tx[k] += offset[k];
        }
        s
    }
}

fn distance(a: &Point3, b: &Point3) -> f64 {
    crate::neighbors::squared_distance(a, b).sqrt()
}

/// Draws a scene and its ground-truth cloud: floor and wall samples plus
/// points on the person's ellipsoid surface (at the window's midpoint).
pub fn generate_scene(seed: u64, config: &SceneConfig, antennas: usize) -> Result<(Scene, PointCloud)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w, d, h] = config.room;
    let axes = config.person_semi_axes;
    let center = [
        rng.gen_range(config.person_min[0]..=config.person_max[0]),
        rng.gen_range(config.person_min[1]..=config.person_max[1]),
        axes[2],
    ];
    let heading = rng.gen_range(0.0..TAU);
    let amount = rng.gen_range(0.0..=config.max_drift);
    let drift = [amount * heading.cos(), amount * heading.sin(), 0.0];
    let tx = [center[0] - config.tx_distance, center[1], config.tx_height];
    let rx = (0..antennas)
        .map(|a| {
            let offset = (a as f64 - (antennas as f64 - 1.0) / 2.0) * config.rx_spacing;
            [config.rx_center[0] + offset, config.rx_center[1], config.rx_center[2]]
        })
        .collect();
    let scene = Scene {
        room: config.room,
        person_center: center,
        person_semi_axes: axes,
        drift,
        tx,
        rx,
    };

    let mut points = Vec::with_capacity(config.room_points + config.person_points);
    let faces = [w * d, w * h, w * h, d * h, d * h];
    let total: f64 = faces.iter().sum();
    for _ in 0..config.room_points {
        let mut pick = rng.gen_range(0.0..total);
        let mut face = 0;
        while face + 1 < faces.len() && pick >= faces[face] {
            pick -= faces[face];
            face += 1;
        }
        let (u, v, z) = (rng.gen_range(0.0..=w), rng.gen_range(0.0..=d), rng.gen_range(0.0..=h));
        points.push(match face {
            0 => [u, v, 0.0],
            1 => [u, 0.0, z],
            2 => [u, d, z],
            3 => [0.0, v, z],
            _ => [w, v, z],
        });
    }
    let mid = scene.person_at(1, 3);
    for _ in 0..config.person_points {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        points.push([
            mid[0] + axes[0] * dir[0],
            mid[1] + axes[1] * dir[1],
            mid[2] + axes[2] * dir[2],
        ]);
    }
    Ok((scene, PointCloud::new(points)?))
}

/// Lengths of every propagation path from the transmitter to receive
/// antenna `a` with the person at `person`: line of sight, person
/// scatter, then the six image sources.
pub fn path_lengths(scene: &Scene, a: usize, person: &Point3) -> [f64; 8] {
    let (tx, rx) = (scene.tx, scene.rx[a]);
    let [w, d, h] = scene.room;
    let images = [
        [-tx[0], tx[1], tx[2]],
        [2.0 * w - tx[0], tx[1], tx[2]],
        [tx[0], -tx[1], tx[2]],
        [tx[0], 2.0 * d - tx[1], tx[2]],
        [tx[0], tx[1], -tx[2]],
        [tx[0], tx[1], 2.0 * h - tx[2]],
    ];
    let mut out = [0.0; 8];
    out[0] = distance(&tx, &rx);
    out[1] = distance(&tx, person) + distance(person, &rx);
    for (k, img) in images.iter().enumerate() {
        out[2 + k] = distance(img, &rx);
    }
    out
}

/// Inverse-square path gain.
pub fn path_gain(length: f64) -> f64 {
    1.0 / (length * length)
}

/// Noise-free channel response `H[a][s]` for slice `t` of `slices`.
pub fn channel_response(scene: &Scene, rf: &RfConfig, t: usize, slices: usize) -> Result<Vec<Vec<Complex<f64>>>> {
    let person = scene.person_at(t, slices);
    (0..scene.rx.len())
        .map(|a| {
            let lengths = path_lengths(scene, a, &person);
            if let Some(k) = lengths.iter().position(|&l| !(l > 0.0)) {
                return Err(Error::config(format!(
                    "path {k} to antenna {a} has zero length"
                )));
            }
            Ok((0..rf.subcarriers)
                .map(|s| {
                    let f = rf.subcarrier_frequency(s);
                    lengths
                        .iter()
                        .enumerate()
                        .map(|(k, &l)| {
                            let gain = if k == 1 { rf.person_reflectivity } else { 1.0 };
                            let tau = l / SPEED_OF_LIGHT;
                            Complex::from_polar(gain * path_gain(l), -TAU * f * tau)
                        })
                        .sum()
                })
                .collect())
        })
        .collect()
}

/// Simulated CSI window `[A, S, T]` with complex Gaussian noise drawn from
/// `noise_seed`.
pub fn simulate_csi(scene: &Scene, rf: &RfConfig, time_slices: usize, noise_seed: u64, meta: CsiMeta) -> Result<CsiSample> {
    rf.validate()?;
    if scene.rx.len() != rf.antennas {
        return Err(Error::config(format!(
            "scene has {} receive antennas, RF config expects {}",
            scene.rx.len(),
            rf.antennas
        )));
    }
    if time_slices == 0 {
        return Err(Error::config("time_slices must be >= 1"));
    }
    let (a_n, s_n, t_n) = (rf.antennas, rf.subcarriers, time_slices);
    let mut amplitude = vec![0.0; a_n * s_n * t_n];
    let mut phase = vec![0.0; a_n * s_n * t_n];
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, rf.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    for t in 0..t_n {
        let h = channel_response(scene, rf, t, t_n)?;
        for a in 0..a_n {
            for s in 0..s_n {
                let mut v = h[a][s];
                if rf.noise_std > 0.0 {
                    v += Complex::new(noise.sample(&mut rng), noise.sample(&mut rng));
                }
                // Stored as f32; keep the phase inside (-pi, pi] after
                // rounding as well.
                let ph = v.arg() as f32;
                let ph = if (ph as f64) <= -PI { PI as f32 } else { ph };
                let i = (a * s_n + s) * t_n + t;
                amplitude[i] = v.norm() as f32 as f64;
                phase[i] = ph as f64;
            }
        }
    }
    let shape = [a_n, s_n, t_n];
    CsiSample::new(Tensor::new(&shape, amplitude)?, Tensor::new(&shape, phase)?, meta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub time_slices: usize,
    /// Ground-truth clouds are resampled to this many points.
    pub cloud_points: usize,
    pub scene: SceneConfig,
    pub rf: RfConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            time_slices: 10,
            cloud_points: 1200,
            scene: SceneConfig::default(),
            rf: RfConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_slices == 0 || self.cloud_points == 0 {
            return Err(Error::config("time_slices and cloud_points must be >= 1"));
        }
        self.scene.validate()?;
        self.rf.validate()
    }
}

/// SplitMix64 finalizer: decorrelated per-sample seeds from a root seed.
pub fn sample_seed(root: u64, index: u64) -> u64 {
    let mut z = root.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One (CSI, cloud) pair, fully determined by `seed`.
pub fn make_pair(seed: u64, config: &SynthConfig, meta: CsiMeta) -> Result<(CsiSample, PointCloud)> {
    let (scene, cloud) = generate_scene(seed, &config.scene, config.rf.antennas)?;
    let csi = simulate_csi(&scene, &config.rf, config.time_slices, seed ^ 0x5EED_0F_C51, meta)?;
    let cloud = resample_cloud(&cloud, config.cloud_points, seed)?;
    Ok((csi, cloud))
}

/// Writes `n` pairs `sample_XXXX.csi` / `sample_XXXX.ply` and a
/// `manifest.json` into `out_dir`.
pub fn make_dataset(n: usize, seed: u64, out_dir: &Path, config: &SynthConfig) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::config("make_dataset: n must be >= 1"));
    }
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let entries = (0..n)
        .map(|i| {
            let s = sample_seed(seed, i as u64);
            let id = format!("sample_{i:04}");
            let meta = CsiMeta {
                subject: "synthetic".into(),
                environment: "synthetic-room".into(),
                action: "stand".into(),
                frame: i as u64,
            };
            let (csi, cloud) = make_pair(s, config, meta)?;
            let entry = ManifestEntry {
                csi: format!("{id}.csi"),
                ply: format!("{id}.ply"),
                id,
                seed: Some(s),
                split: None,
                extra: Default::default(),
            };
            save_csi_container(&csi, out_dir.join(&entry.csi))?;
            write_ply(&cloud, out_dir.join(&entry.ply))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: 1,
        generator: "c2pc synth".into(),
        seed: Some(seed),
        config: serde_json::to_value(config)?,
        entries,
        extra: Default::default(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
