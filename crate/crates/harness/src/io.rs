//! Images, raw float arrays, scene directories and checkpoints on disk.
//!
//! Raw arrays (`.f32`) are little-endian:
//!
//! ```text
//! magic  b"PSRAW001"          8 bytes
//! rank   u32                  4 bytes
//! dims   u32 × rank
//! data   f32 × Π dims         row-major
//! ```

use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use pairsplat::autodiff::{decode_checkpoint, encode_checkpoint, ParamStore, Tensor};
use pairsplat::geometry::Camera;
use pairsplat::linalg::{Mat3, Vec3};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::scene::Scene;

pub const RAW_MAGIC: &[u8; 8] = b"PSRAW001";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[H, W, 3]` or `[H, W, 1]` tensor in `[0, 1]` as 8-bit PNG.
pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if image.rank() != 3 || !(s[2] == 1 || s[2] == 3) {
        return Err(HarnessError::validation(format!("png needs [H, W, 1|3], got {s:?}")));
    }
    let (h, w) = (s[0] as u32, s[1] as u32);
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    if s[2] == 3 {
        image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer length matches shape")
            .save(path)?;
    } else {
        image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer length matches shape")
            .save(path)?;
    }
    Ok(())
}

/// Reads any PNG as `[H, W, 3]` in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 3], data)?)
}

pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    out.write_u32::<LittleEndian>(t.rank() as u32).unwrap();
    for &d in t.shape() {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for &v in t.data() {
        out.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    let err = |offset: usize, message: &str| HarnessError::Parse {
        format: "raw",
        offset,
        message: message.into(),
    };
    if bytes.len() < 12 || &bytes[..8] != RAW_MAGIC {
        return Err(err(0, "bad magic"));
    }
    let rank = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let data_at = 12 + 4 * rank;
    if bytes.len() < data_at {
        return Err(err(12, "truncated shape"));
    }
    let shape: Vec<usize> = bytes[12..data_at]
        .chunks_exact(4)
        .map(|c| LittleEndian::read_u32(c) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() - data_at != 4 * n {
        return Err(err(data_at, "data length does not match shape"));
    }
    let data = bytes[data_at..]
        .chunks_exact(4)
        .map(|c| f64::from(LittleEndian::read_f32(c)))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn write_raw(t: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_raw(t)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    decode_raw(&std::fs::read(path).map_err(|e| HarnessError::io(path, e))?)
}

/// One camera entry of a scene JSON file. `R`/`t` are world-from-camera.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraJson {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub w: usize,
    pub h: usize,
}

impl CameraJson {
    pub fn from_camera(c: &Camera<f64>) -> Self {
        let row = |m: &Mat3<f64>| -> [f64; 9] { m.to_row_vec().try_into().expect("3x3") };
        Self {
            k: row(c.intrinsics()),
            r: row(c.rotation()),
            t: c.translation().to_array(),
            w: c.width(),
            h: c.height(),
        }
    }

    pub fn to_camera(&self) -> Result<Camera<f64>> {
        Ok(Camera::new(
            Mat3::from_row_slice(&self.k),
            Mat3::from_row_slice(&self.r),
            Vec3::from_array(self.t),
            self.w,
            self.h,
        )?)
    }
}

/// A posed image directory: two reference views first, then targets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneJson {
    pub cameras: Vec<CameraJson>,
    pub near: f64,
    pub far: f64,
    /// Paths relative to the JSON file.
    pub images: Vec<String>,
}

pub struct PosedImages {
    pub cameras: Vec<Camera<f64>>,
    pub images: Vec<Tensor>,
    pub near: f64,
    pub far: f64,
}

/// Writes `scene.json`, `view_NN.png`, and for metric-exact use
/// `view_NN.f32` plus ground-truth `depth_NN.f32`.
pub fn write_scene_dir(scene: &Scene, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut images = Vec::new();
    for (i, v) in scene.views.iter().enumerate() {
        let name = format!("view_{i:02}.png");
        write_png(&v.image, &dir.join(&name))?;
        write_raw(&v.image, &dir.join(format!("view_{i:02}.f32")))?;
        let (h, w) = (v.camera.height(), v.camera.width());
        write_raw(&Tensor::new(&[h, w], v.depth.clone())?, &dir.join(format!("depth_{i:02}.f32")))?;
        images.push(name);
    }
    let json = SceneJson {
        cameras: scene.views.iter().map(|v| CameraJson::from_camera(&v.camera)).collect(),
        near: scene.near,
        far: scene.far,
        images,
    };
    let path = dir.join("scene.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

/// Loads a posed image directory. PNG images are read as 8-bit; paths ending
/// in `.f32` are read as raw arrays.
pub fn load_posed_images(path: &Path) -> Result<PosedImages> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let json: SceneJson = serde_json::from_str(&text)?;
    if json.cameras.len() != json.images.len() || json.cameras.len() < 2 {
        return Err(HarnessError::validation("scene needs at least two cameras and one image per camera"));
    }
    if !(json.near > 0.0 && json.near < json.far) {
        return Err(HarnessError::validation("scene needs 0 < near < far"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let cameras = json.cameras.iter().map(CameraJson::to_camera).collect::<Result<Vec<_>>>()?;
    let mut images = Vec::new();
    for (name, cam) in json.images.iter().zip(&cameras) {
        let p = base.join(name);
        let img = if name.ends_with(".f32") { read_raw(&p)? } else { read_png(&p)? };
        if img.shape() != [cam.height(), cam.width(), 3] {
            return Err(HarnessError::validation(format!("{name} has shape {:?}, camera expects {}x{}", img.shape(), cam.height(), cam.width())));
        }
        images.push(img);
    }
    Ok(PosedImages {
        cameras,
        images,
        near: json.near,
        far: json.far,
    })
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| HarnessError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    Ok(decode_checkpoint(&std::fs::read(path).map_err(|e| HarnessError::io(path, e))?)?)
}
