//! Procedural multi-scene localization datasets.
//!
//! A scene is a smooth random height-field (a sum of low-frequency
//! sinusoids) carrying a smooth procedural texture. Views are rendered by
//! per-pixel ray casting against the height-field; ground-truth coordinate
//! maps sample the surface at stride-8 cell centers. Two scenes that share
//! a `height_seed` have the same geometry but different textures, which
//! makes them closely related tasks.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::{CameraIntrinsics, Pose};
use crate::model::DOWNSAMPLE;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("camera center is below the surface")]
    PoseBelowSurface,
    #[error("image size {h}x{w} is not divisible by 8")]
    BadImageSize { h: usize, w: usize },
    #[error("trajectory does not fit in extent {0:?}")]
    TrajectoryOutOfExtent([f64; 2]),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file corrupt: {0}")]
    Corrupt(String),
}

const HEIGHT_TERMS: usize = 4;
const TEXTURE_TERMS: usize = 8;

#[derive(Debug, Clone)]
struct SinTerm {
    amp: f64,
    kx: f64,
    ky: f64,
    kz: f64,
    phase: f64,
}

/// Deterministic procedural scene: geometry from `height_seed`, texture
/// from `seed`. Identical seeds reproduce the scene bit-exactly.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub height_seed: u64,
    pub extent: [f64; 2],
    pub channels: usize,
    height: Vec<SinTerm>,
    texture: Vec<Vec<SinTerm>>,
    pub noise_sigma: f64,
}

fn split_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer.
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates a deterministic scene. `height_seed` defaults to `seed`; pass
/// the same `height_seed` with different `seed`s to get related scenes
/// (shared geometry, distinct texture).
pub fn generate_scene(
    seed: u64,
    extent: [f64; 2],
    channels: usize,
    noise_sigma: f64,
    height_seed: Option<u64>,
) -> SceneSpec {
    assert!(extent[0] > 0.0 && extent[1] > 0.0, "extent must be positive");
    let height_seed = height_seed.unwrap_or(seed);
    let min_extent = extent[0].min(extent[1]);

    let mut hrng = ChaCha8Rng::seed_from_u64(split_seed(height_seed, 0xA11CE));
    let height = (0..HEIGHT_TERMS)
        .map(|_| {
            let wavelength = min_extent * (0.5 + hrng.random::<f64>() * 1.5);
            let k = 2.0 * std::f64::consts::PI / wavelength;
            let dir = hrng.random::<f64>() * std::f64::consts::PI * 2.0;
            SinTerm {
                amp: 0.05 + hrng.random::<f64>() * 0.10,
                kx: k * dir.cos(),
                ky: k * dir.sin(),
                kz: 0.0,
                phase: hrng.random::<f64>() * std::f64::consts::PI * 2.0,
            }
        })
        .collect();

    let mut trng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x7E47));
    let texture = (0..channels)
        .map(|_| {
            (0..TEXTURE_TERMS)
                .map(|term| {
                    // An octave spread: coarse waves disambiguate globally,
                    // fine ones give each patch a sharp local signature.
                    let wavelength = if term < 4 {
                        min_extent * (0.25 + trng.random::<f64>() * 0.55)
                    } else {
                        min_extent * (0.10 + trng.random::<f64>() * 0.15)
                    };
                    let k = 2.0 * std::f64::consts::PI / wavelength;
                    let dir = trng.random::<f64>() * std::f64::consts::PI * 2.0;
                    let tilt = trng.random::<f64>() * 2.0 - 1.0;
                    SinTerm {
                        amp: 0.45 / TEXTURE_TERMS as f64 + trng.random::<f64>() * 0.05,
                        kx: k * dir.cos(),
                        ky: k * dir.sin(),
                        kz: k * tilt,
                        phase: trng.random::<f64>() * std::f64::consts::PI * 2.0,
                    }
                })
                .collect()
        })
        .collect();

    SceneSpec {
        seed,
        height_seed,
        extent,
        channels,
        height,
        texture,
        noise_sigma,
    }
}

impl SceneSpec {
    /// Surface elevation at `(x, y)`.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.height
            .iter()
            .map(|t| t.amp * (t.kx * x + t.ky * y + t.phase).sin())
            .sum()
    }

    /// Upper bound on `|height|`.
    pub fn height_bound(&self) -> f64 {
        self.height.iter().map(|t| t.amp).sum()
    }

    /// Per-point feature value of one channel.
    pub fn texture(&self, channel: usize, p: &Vector3<f64>) -> f64 {
        0.5 + self.texture[channel]
            .iter()
            .map(|t| t.amp * (t.kx * p.x + t.ky * p.y + t.kz * p.z + t.phase).sin())
            .sum::<f64>()
    }

    fn in_extent(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && x <= self.extent[0] && y >= 0.0 && y <= self.extent[1]
    }

    /// First surface intersection along `origin + s * dir`, or `None`.
    fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
        if dir.z >= -1e-3 {
            return None;
        }
        let bound = self.height_bound() + 0.05;
        let s_enter = ((origin.z - bound) / -dir.z).max(0.0);
        let s_exit = (origin.z + bound) / -dir.z;
        if s_exit <= s_enter {
            return None;
        }
        let f = |s: f64| {
            let p = origin + dir * s;
            p.z - self.height(p.x, p.y)
        };
        const STEPS: usize = 96;
        let dseg = (s_exit - s_enter) / STEPS as f64;
        let mut s_prev = s_enter;
        if f(s_prev) <= 0.0 {
            return None; // started at or under the surface
        }
        for i in 1..=STEPS {
            let s = s_enter + dseg * i as f64;
            if f(s) <= 0.0 {
                // Bisection on the bracket [s_prev, s].
                let (mut lo, mut hi) = (s_prev, s);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(origin + dir * (0.5 * (lo + hi)));
            }
            s_prev = s;
        }
        None
    }
}

/// One synthetic observation of a scene: the feature image, ground-truth
/// coordinate map at stride-8 cell centers with validity flags, the
/// ground-truth camera-to-world pose, and the intrinsics.
#[derive(Debug, Clone)]
pub struct RenderedView<T: Scalar> {
    /// `(channels, H, W)` feature image.
    pub image: Tensor<T>,
    /// Row-major `(H/8) x (W/8)` world coordinates at cell centers.
    pub gt_coords: Vec<[T; 3]>,
    pub valid: Vec<bool>,
    pub gt_pose: Pose<T>,
    pub intrinsics: CameraIntrinsics<T>,
}

impl<T: Scalar> RenderedView<T> {
    pub fn cells(&self) -> usize {
        self.gt_coords.len()
    }
}

fn pose_hash(pose: &Pose<f64>, h: usize, w: usize) -> u64 {
    let mut acc: u64 = 0xcbf29ce484222325;
    let mut mix = |bits: u64| {
        acc ^= bits;
        acc = acc.wrapping_mul(0x100000001b3);
    };
    for v in pose.r.iter() {
        mix(v.to_bits());
    }
    for v in pose.t.iter() {
        mix(v.to_bits());
    }
    mix(h as u64);
    mix(w as u64);
    acc
}

/// Renders one view by ray casting. The camera must sit above the surface.
/// Pixel rays that miss the height-field or land outside the extent yield
/// background pixels and invalid cells.
pub fn render_view<T: Scalar>(
    scene: &SceneSpec,
    pose: &Pose<f64>,
    k: &CameraIntrinsics<f64>,
    h: usize,
    w: usize,
) -> Result<RenderedView<T>, SimError> {
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(SimError::BadImageSize { h, w });
    }
    let origin = pose.t;
    if origin.z <= scene.height(origin.x, origin.y) {
        return Err(SimError::PoseBelowSurface);
    }

    let mut noise = ChaCha8Rng::seed_from_u64(split_seed(scene.seed, pose_hash(pose, h, w)));
    let c = scene.channels;
    let mut image = vec![T::zero(); c * h * w];
    let ray_dir = |u: f64, v: f64| -> Vector3<f64> {
        let d = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0).normalize();
        pose.r * d
    };

    for row in 0..h {
        for col in 0..w {
            let dir = ray_dir(col as f64 + 0.5, row as f64 + 0.5);
            let hit = scene.cast_ray(&origin, &dir).filter(|p| scene.in_extent(p.x, p.y));
            for ch in 0..c {
                let base = scene.texture(ch, &hit.unwrap_or_default());
                let value = if hit.is_some() { base } else { 0.0 };
                image[(ch * h + row) * w + col] = T::of(value + scene.noise_sigma * gauss(&mut noise));
            }
        }
    }

    let (hc, wc) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
    let mut gt_coords = Vec::with_capacity(hc * wc);
    let mut valid = Vec::with_capacity(hc * wc);
    for i in 0..hc {
        for j in 0..wc {
            let u = (DOWNSAMPLE * j + DOWNSAMPLE / 2) as f64;
            let v = (DOWNSAMPLE * i + DOWNSAMPLE / 2) as f64;
            let dir = ray_dir(u, v);
            match scene.cast_ray(&origin, &dir).filter(|p| scene.in_extent(p.x, p.y)) {
                Some(p) => {
                    gt_coords.push([T::of(p.x), T::of(p.y), T::of(p.z)]);
                    valid.push(true);
                }
                None => {
                    gt_coords.push([T::zero(); 3]);
                    valid.push(false);
                }
            }
        }
    }

    Ok(RenderedView {
        image: Tensor::new(vec![c, h, w], image).expect("image shape"),
        gt_coords,
        valid,
        gt_pose: Pose::new(
            Matrix3::from_iterator(pose.r.iter().map(|v| T::of(*v))),
            Vector3::new(T::of(pose.t.x), T::of(pose.t.y), T::of(pose.t.z)),
        )
        .expect("pose stays a rotation"),
        intrinsics: CameraIntrinsics::new(T::of(k.fx), T::of(k.fy), T::of(k.cx), T::of(k.cy)),
    })
}

/// Camera-to-world look-at pose with a +z-up preference.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, roll: f64) -> Pose<f64> {
    let forward = (target - eye).normalize();
    let mut up = Vector3::new(0.0, 0.0, 1.0);
    if forward.dot(&up).abs() > 0.99 {
        up = Vector3::new(0.0, 1.0, 0.0);
    }
    let x = forward.cross(&up).normalize();
    let y = forward.cross(&x);
    let base = Matrix3::from_columns(&[x, y, forward]);
    let roll_m = Matrix3::new(
        roll.cos(), -roll.sin(), 0.0,
        roll.sin(), roll.cos(), 0.0,
        0.0, 0.0, 1.0,
    );
    Pose::new(base * roll_m, eye).expect("look-at rotation")
}

/// A scene's rendered train/test split.
#[derive(Debug, Clone)]
pub struct SceneDataset<T: Scalar> {
    pub train: Vec<RenderedView<T>>,
    pub test: Vec<RenderedView<T>>,
}

/// Camera poses along a smooth loop above the surface. The test trajectory
/// is offset in radius, height, phase, and look target so its views are
/// unseen during training.
pub fn trajectory_poses(
    scene: &SceneSpec,
    count: usize,
    trajectory_seed: u64,
    test_split: bool,
) -> Result<Vec<Pose<f64>>, SimError> {
    let [ex, ey] = scene.extent;
    let min_extent = ex.min(ey);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(trajectory_seed ^ scene.seed, 0x7247));
    let phase_r: f64 = rng.random::<f64>() * std::f64::consts::PI * 2.0;
    let phase_c: f64 = rng.random::<f64>() * std::f64::consts::PI * 2.0;
    let phase_t: f64 = rng.random::<f64>() * std::f64::consts::PI * 2.0;

    // Test poses are offset in phase, radius, height, look target, and
    // roll, so every test view is unseen, but they stay inside the envelope
    // the training loop covers (test sequences traverse the same space).
    let (r_scale, clearance_shift, phase_shift) = if test_split {
        (0.98, 0.12, 0.53)
    } else {
        (1.0, 0.0, 0.0)
    };
    let r0 = 0.30 * min_extent * r_scale;
    if r0 <= 0.0 || r0 > 0.5 * min_extent {
        return Err(SimError::TrajectoryOutOfExtent(scene.extent));
    }
    let center = Vector2::new(ex / 2.0, ey / 2.0);

    let mut poses = Vec::with_capacity(count);
    for i in 0..count {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / count as f64 + phase_shift;
        let r = r0 * (1.0 + 0.18 * (2.0 * theta + phase_r).sin());
        let x = center.x + r * theta.cos();
        let y = center.y + r * theta.sin();
        let clearance = 1.15 + 0.25 * (theta + phase_c + clearance_shift).sin();
        let z = scene.height(x, y) + clearance;

        let t_r = 0.18 * min_extent;
        let t_phase = if test_split { phase_t + 0.09 } else { phase_t };
        let tx = center.x + t_r * (theta + t_phase).cos();
        let ty = center.y + t_r * (theta + t_phase).sin();
        let target = Vector3::new(tx, ty, scene.height(tx, ty));

        let roll = 0.15 * (3.0 * theta + phase_r + clearance_shift).sin();
        poses.push(look_at(Vector3::new(x, y, z), target, roll));
    }
    Ok(poses)
}

/// Renders the full train/test dataset for one scene.
pub fn make_dataset<T: Scalar>(
    scene: &SceneSpec,
    n_train: usize,
    n_test: usize,
    trajectory_seed: u64,
    k: &CameraIntrinsics<f64>,
    h: usize,
    w: usize,
) -> Result<SceneDataset<T>, SimError> {
    assert!(n_train > 0 && n_test > 0, "split counts must be positive");
    let train_poses = trajectory_poses(scene, n_train, trajectory_seed, false)?;
    let test_poses = trajectory_poses(scene, n_test, trajectory_seed, true)?;
    let render_all = |poses: &[Pose<f64>]| -> Result<Vec<RenderedView<T>>, SimError> {
        poses.iter().map(|p| render_view(scene, p, k, h, w)).collect()
    };
    Ok(SceneDataset {
        train: render_all(&train_poses)?,
        test: render_all(&test_poses)?,
    })
}

// ── On-disk format ───────────────────────────────────────────────────

pub mod io {
    //! Dataset directory layout: one directory per scene containing, per
    //! view, a flat binary tensor file for the image, one for the
    //! coordinate map with validity, and a JSON sidecar with pose and
    //! intrinsics; `manifest.json` lists the splits.

    use std::io::{Read, Write};
    use std::path::Path;

    use nalgebra::{Matrix3, Vector3};
    use serde::{Deserialize, Serialize};

    use super::{RenderedView, SceneDataset, SimError};
    use crate::geom::{CameraIntrinsics, Pose};
    use crate::scalar::Scalar;
    use crate::tensor::Tensor;

    const MAGIC: &[u8; 4] = b"MSTB";

    pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<(), SimError> {
        let mut buf = Vec::with_capacity(16 + t.numel() * T::DTYPE.size_bytes());
        buf.extend_from_slice(MAGIC);
        buf.push(T::DTYPE.size_bytes() as u8);
        buf.push(t.shape().len() as u8);
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            v.write_le_bytes(&mut buf);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>, SimError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let corrupt = |msg: &str| SimError::Corrupt(format!("{}: {msg}", path.display()));
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let width = bytes[4] as usize;
        if width != T::DTYPE.size_bytes() {
            return Err(corrupt("dtype width mismatch"));
        }
        let ndim = bytes[5] as usize;
        let mut off = 6;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            if off + 4 > bytes.len() {
                return Err(corrupt("truncated header"));
            }
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let n: usize = shape.iter().product();
        if bytes.len() != off + n * width {
            return Err(corrupt("payload length mismatch"));
        }
        let data: Vec<T> = (0..n)
            .map(|i| T::read_le_bytes(&bytes[off + i * width..off + (i + 1) * width]))
            .collect();
        Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct ViewSidecar {
        pub split: String,
        /// Row-major 3x3 rotation.
        pub pose_r: [f64; 9],
        pub pose_t: [f64; 3],
        pub fx: f64,
        pub fy: f64,
        pub cx: f64,
        pub cy: f64,
    }

    #[derive(Debug, Serialize, Deserialize)]
    pub struct SceneManifest {
        pub scene: String,
        pub seed: u64,
        pub height_seed: u64,
        pub extent: [f64; 2],
        pub channels: usize,
        pub image_h: usize,
        pub image_w: usize,
        pub train: Vec<String>,
        pub test: Vec<String>,
        pub config_hash: String,
    }

    fn view_stem(split: &str, idx: usize) -> String {
        format!("view_{split}_{idx:04}")
    }

    fn coords_tensor<T: Scalar>(view: &RenderedView<T>, hc: usize, wc: usize) -> Tensor<T> {
        // Channel-major (4, hc, wc): x, y, z, validity.
        let q = hc * wc;
        let mut data = vec![T::zero(); 4 * q];
        for cell in 0..q {
            for a in 0..3 {
                data[a * q + cell] = view.gt_coords[cell][a];
            }
            data[3 * q + cell] = if view.valid[cell] { T::one() } else { T::zero() };
        }
        Tensor::new(vec![4, hc, wc], data).expect("coords shape")
    }

    fn write_view<T: Scalar>(
        dir: &Path,
        split: &str,
        idx: usize,
        view: &RenderedView<T>,
    ) -> Result<String, SimError> {
        let stem = view_stem(split, idx);
        write_tensor(&dir.join(format!("{stem}.img.bin")), &view.image)?;
        let h = view.image.shape()[1] / crate::model::DOWNSAMPLE;
        let w = view.image.shape()[2] / crate::model::DOWNSAMPLE;
        write_tensor(&dir.join(format!("{stem}.coords.bin")), &coords_tensor(view, h, w))?;
        let mut pose_r = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                pose_r[r * 3 + c] = view.gt_pose.r[(r, c)].to_f64c();
            }
        }
        let sidecar = ViewSidecar {
            split: split.to_string(),
            pose_r,
            pose_t: [
                view.gt_pose.t.x.to_f64c(),
                view.gt_pose.t.y.to_f64c(),
                view.gt_pose.t.z.to_f64c(),
            ],
            fx: view.intrinsics.fx.to_f64c(),
            fy: view.intrinsics.fy.to_f64c(),
            cx: view.intrinsics.cx.to_f64c(),
            cy: view.intrinsics.cy.to_f64c(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        Ok(stem)
    }

    fn read_view<T: Scalar>(dir: &Path, stem: &str) -> Result<RenderedView<T>, SimError> {
        let image = read_tensor::<T>(&dir.join(format!("{stem}.img.bin")))?;
        let coords = read_tensor::<T>(&dir.join(format!("{stem}.coords.bin")))?;
        let sidecar: ViewSidecar = serde_json::from_str(
            &std::fs::read_to_string(dir.join(format!("{stem}.json")))?,
        )
        .map_err(|e| SimError::Corrupt(format!("{stem}.json: {e}")))?;
        let q = coords.shape()[1] * coords.shape()[2];
        let mut gt_coords = Vec::with_capacity(q);
        let mut valid = Vec::with_capacity(q);
        for cell in 0..q {
            gt_coords.push([
                coords.data()[cell],
                coords.data()[q + cell],
                coords.data()[2 * q + cell],
            ]);
            valid.push(coords.data()[3 * q + cell] > T::of(0.5));
        }
        let r = Matrix3::from_iterator(sidecar.pose_r.iter().map(|v| T::of(*v))).transpose();
        let t = Vector3::new(T::of(sidecar.pose_t[0]), T::of(sidecar.pose_t[1]), T::of(sidecar.pose_t[2]));
        Ok(RenderedView {
            image,
            gt_coords,
            valid,
            gt_pose: Pose::new(r, t).map_err(|e| SimError::Corrupt(e.to_string()))?,
            intrinsics: CameraIntrinsics::new(
                T::of(sidecar.fx),
                T::of(sidecar.fy),
                T::of(sidecar.cx),
                T::of(sidecar.cy),
            ),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn write_dataset<T: Scalar>(
        root: &Path,
        scene_name: &str,
        scene: &super::SceneSpec,
        dataset: &SceneDataset<T>,
        config_hash: &str,
    ) -> Result<(), SimError> {
        let dir = root.join(scene_name);
        std::fs::create_dir_all(&dir)?;
        let mut train = Vec::new();
        for (i, v) in dataset.train.iter().enumerate() {
            train.push(write_view(&dir, "train", i, v)?);
        }
        let mut test = Vec::new();
        for (i, v) in dataset.test.iter().enumerate() {
            test.push(write_view(&dir, "test", i, v)?);
        }
        let (h, w) = match dataset.train.first() {
            Some(v) => (v.image.shape()[1], v.image.shape()[2]),
            None => (0, 0),
        };
        let manifest = SceneManifest {
            scene: scene_name.to_string(),
            seed: scene.seed,
            height_seed: scene.height_seed,
            extent: scene.extent,
            channels: scene.channels,
            image_h: h,
            image_w: w,
            train,
            test,
            config_hash: config_hash.to_string(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }

    pub fn read_manifest(root: &Path, scene_name: &str) -> Result<SceneManifest, SimError> {
        let path = root.join(scene_name).join("manifest.json");
        serde_json::from_str(&std::fs::read_to_string(&path)?)
            .map_err(|e| SimError::Corrupt(format!("{}: {e}", path.display())))
    }

    pub fn read_dataset<T: Scalar>(root: &Path, scene_name: &str) -> Result<SceneDataset<T>, SimError> {
        let manifest = read_manifest(root, scene_name)?;
        let dir = root.join(scene_name);
        let train = manifest
            .train
            .iter()
            .map(|s| read_view(&dir, s))
            .collect::<Result<Vec<_>, _>>()?;
        let test = manifest
            .test
            .iter()
            .map(|s| read_view(&dir, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SceneDataset { train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::project;

    fn default_k() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0)
    }

    fn test_scene(seed: u64) -> SceneSpec {
        generate_scene(seed, [4.0, 4.0], 3, 0.01, None)
    }

    #[test]
    fn same_seed_reproduces_heights() {
        let a = test_scene(7);
        let b = test_scene(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = rng.random::<f64>() * 4.0;
            let y = rng.random::<f64>() * 4.0;
            assert_eq!(a.height(x, y).to_bits(), b.height(x, y).to_bits());
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_textures() {
        let a = test_scene(7);
        let b = test_scene(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut differ = 0;
        for _ in 0..100 {
            let p = Vector3::new(rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0, 0.0);
            if (a.texture(0, &p) - b.texture(0, &p)).abs() > 1e-9 {
                differ += 1;
            }
        }
        assert!(differ > 90, "only {differ} of 100 points differ");
    }

    #[test]
    fn related_scenes_share_geometry_not_texture() {
        let a = generate_scene(7, [4.0, 4.0], 3, 0.01, Some(99));
        let b = generate_scene(8, [4.0, 4.0], 3, 0.01, Some(99));
        assert_eq!(a.height(1.3, 2.1).to_bits(), b.height(1.3, 2.1).to_bits());
        let p = Vector3::new(1.3, 2.1, 0.0);
        assert!((a.texture(0, &p) - b.texture(0, &p)).abs() > 1e-9);
    }

    #[test]
    fn straight_down_view_is_fully_valid() {
        let scene = test_scene(3);
        let eye = Vector3::new(2.0, 2.0, scene.height(2.0, 2.0) + 1.6);
        let pose = look_at(eye, Vector3::new(2.0, 2.05, scene.height(2.0, 2.05)), 0.0);
        let view: RenderedView<f64> = render_view(&scene, &pose, &default_k(), 64, 64).unwrap();
        assert!(view.valid.iter().all(|v| *v), "all cells valid looking down");
        assert_eq!(view.cells(), 64);
    }

    #[test]
    fn horizon_view_has_invalid_cells() {
        let scene = test_scene(3);
        let eye = Vector3::new(2.0, 2.0, scene.height(2.0, 2.0) + 1.2);
        // Look at a far point at camera height: upper half of the image
        // points at the sky.
        let pose = look_at(eye, Vector3::new(2.0, 60.0, eye.z), 0.0);
        let view: RenderedView<f64> = render_view(&scene, &pose, &default_k(), 64, 64).unwrap();
        assert!(view.valid.iter().any(|v| !*v), "sky cells must be invalid");
    }

    #[test]
    fn camera_below_surface_is_an_error() {
        let scene = test_scene(3);
        let pose = look_at(
            Vector3::new(2.0, 2.0, scene.height(2.0, 2.0) - 0.5),
            Vector3::new(2.0, 3.0, 0.0),
            0.0,
        );
        assert!(matches!(
            render_view::<f64>(&scene, &pose, &default_k(), 64, 64),
            Err(SimError::PoseBelowSurface)
        ));
    }

    #[test]
    fn gt_coords_reproject_into_their_own_cell() {
        let scene = test_scene(11);
        let poses = trajectory_poses(&scene, 6, 5, false).unwrap();
        for pose in &poses {
            let view: RenderedView<f64> = render_view(&scene, pose, &default_k(), 64, 64).unwrap();
            let (hc, wc) = (8, 8);
            for i in 0..hc {
                for j in 0..wc {
                    let cell = i * wc + j;
                    if !view.valid[cell] {
                        continue;
                    }
                    let p = Vector3::new(
                        view.gt_coords[cell][0],
                        view.gt_coords[cell][1],
                        view.gt_coords[cell][2],
                    );
                    let projected = project(&view.gt_pose, &view.intrinsics, &[p]);
                    let (px, vis) = projected[0];
                    assert!(vis);
                    assert!(
                        px.x >= (8 * j) as f64 && px.x <= (8 * (j + 1)) as f64,
                        "u {} outside cell col {j}",
                        px.x
                    );
                    assert!(
                        px.y >= (8 * i) as f64 && px.y <= (8 * (i + 1)) as f64,
                        "v {} outside cell row {i}",
                        px.y
                    );
                }
            }
        }
    }

    #[test]
    fn dataset_counts_and_distinct_poses() {
        let scene = test_scene(13);
        let ds: SceneDataset<f64> = make_dataset(&scene, 12, 5, 17, &default_k(), 32, 32).unwrap();
        assert_eq!(ds.train.len(), 12);
        assert_eq!(ds.test.len(), 5);
        let mut centers: Vec<Vector3<f64>> = Vec::new();
        for v in ds.train.iter().chain(&ds.test) {
            centers.push(v.gt_pose.t);
        }
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                assert!((centers[i] - centers[j]).norm() > 0.0, "poses {i} and {j} repeat");
            }
        }
        // Train and test camera centers are separated.
        let mut min_dist = f64::INFINITY;
        for tr in &ds.train {
            for te in &ds.test {
                min_dist = min_dist.min((tr.gt_pose.t - te.gt_pose.t).norm());
            }
        }
        assert!(min_dist > 0.0);
    }

    #[test]
    fn dataset_is_deterministic() {
        let scene = test_scene(13);
        let a: SceneDataset<f64> = make_dataset(&scene, 3, 2, 17, &default_k(), 32, 32).unwrap();
        let b: SceneDataset<f64> = make_dataset(&scene, 3, 2, 17, &default_k(), 32, 32).unwrap();
        for (va, vb) in a.train.iter().zip(&b.train) {
            assert_eq!(va.image.data(), vb.image.data());
            assert_eq!(va.gt_pose.t, vb.gt_pose.t);
        }
    }

    #[test]
    fn scene_coordinates_have_spread() {
        // A constant predictor cannot reach 5 cm on a >= 2 m extent: the
        // visible coordinates spread far beyond 5 cm.
        let scene = generate_scene(23, [2.0, 2.0], 3, 0.01, None);
        let ds: SceneDataset<f64> = make_dataset(&scene, 8, 2, 3, &default_k(), 32, 32).unwrap();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &ds.train {
            for (c, ok) in v.gt_coords.iter().zip(&v.valid) {
                if !ok {
                    continue;
                }
                for a in 0..2 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        assert!(hi[0] - lo[0] > 0.5 && hi[1] - lo[1] > 0.5, "lo {lo:?} hi {hi:?}");
    }

    #[test]
    fn tensor_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![1.5f64, -2.25, 0.1, 4.0, -0.0, 3.3]).unwrap();
        let path = dir.path().join("t.bin");
        io::write_tensor(&path, &t).unwrap();
        let back: Tensor<f64> = io::read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dataset_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = test_scene(29);
        let ds: SceneDataset<f64> = make_dataset(&scene, 2, 1, 7, &default_k(), 32, 32).unwrap();
        io::write_dataset(dir.path(), "alpha", &scene, &ds, "deadbeef").unwrap();
        let back: SceneDataset<f64> = io::read_dataset(dir.path(), "alpha").unwrap();
        assert_eq!(back.train.len(), 2);
        assert_eq!(back.test.len(), 1);
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.valid, b.valid);
            assert_eq!(a.gt_pose.r, b.gt_pose.r);
        }
        let manifest = io::read_manifest(dir.path(), "alpha").unwrap();
        assert_eq!(manifest.config_hash, "deadbeef");
        assert_eq!(manifest.train.len(), 2);
    }
}
