//! Optional VGG19 `relu5_1` feature extractor backed by a user-supplied weights file.
//!
//! ```text
//! magic    8 bytes "TTAVGG19"
//! version  u32 LE (1)
//! count    u32 LE (26)
//! records: u32 name length + UTF-8 name, u32 rank, rank x u32 dims,
//!          prod(dims) x f32 LE values
//! ```
//!
//! Records come in network order, `conv1_1.weight` (`[cout, cin, 3, 3]`),
//! `conv1_1.bias` (`[cout]`), ..., `conv5_1.bias`. Images are normalized with
//! the ImageNet channel statistics and processed at native resolution; no
//! further feature normalization is applied.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt};

use super::{FeatureExtractor, FeatureMap};
use crate::conv::{conv_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::tensor::{relu_inplace, Tensor};

pub const VGG_MAGIC: &[u8; 8] = b"TTAVGG19";
const VGG_VERSION: u32 = 1;
const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Conv layer names up to `relu5_1`; a 2×2 max pool follows each block end.
pub const LAYERS: [&str; 13] = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv3_4", "conv4_1", "conv4_2",
    "conv4_3", "conv4_4", "conv5_1",
];

fn pool_after(name: &str) -> bool {
    matches!(name, "conv1_2" | "conv2_2" | "conv3_4" | "conv4_4")
}

struct Layer {
    geom: ConvGeom,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

pub struct Vgg19Extractor {
    layers: Vec<Layer>,
    id: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BackendUnavailable(msg.into())
}

fn read_record(r: &mut impl Read, expect_name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    let io = |e: std::io::Error| bad(format!("truncated VGG weights: {e}"));
    let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if len > 256 {
        return Err(bad("corrupt VGG weights (name length)"));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(io)?;
    if name != expect_name.as_bytes() {
        return Err(bad(format!(
            "expected record '{expect_name}', found '{}'",
            String::from_utf8_lossy(&name)
        )));
    }
    let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if rank > 4 {
        return Err(bad("corrupt VGG weights (rank)"));
    }
    let dims = (0..rank)
        .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize).map_err(io))
        .collect::<Result<Vec<_>>>()?;
    let mut data = vec![0.0f32; dims.iter().product()];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad(format!("'{expect_name}' holds non-finite values")));
    }
    Ok((dims, data))
}

impl Vgg19Extractor {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(format!("truncated VGG weights: {e}")))?;
        if &magic != VGG_MAGIC {
            return Err(bad(format!("{} is not a VGG19 weights file", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
        let count = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
        if version != VGG_VERSION || count as usize != 2 * LAYERS.len() {
            return Err(bad(format!("unsupported VGG weights (version {version}, {count} records)")));
        }
        let mut layers = Vec::with_capacity(LAYERS.len());
        let mut cin = CHANNELS;
        for name in LAYERS {
            let (wd, weight) = read_record(&mut r, &format!("{name}.weight"))?;
            let (bd, bias) = read_record(&mut r, &format!("{name}.bias"))?;
            if wd.len() != 4 || wd[1] != cin || wd[2] != 3 || wd[3] != 3 || bd != [wd[0]] {
                return Err(bad(format!("{name} has shapes {wd:?}/{bd:?}, input has {cin} channels")));
            }
            let geom = ConvGeom {
                cin,
                cout: wd[0],
                kernel: 3,
                stride: 1,
                pad: 1,
                dilation: 1,
            };
            cin = wd[0];
            layers.push(Layer { geom, weight, bias });
        }
        Ok(Vgg19Extractor {
            layers,
            id: format!("vgg19-relu5_1:{}", path.display()),
        })
    }
}

fn max_pool2(x: &Tensor) -> Tensor {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    for i in 0..x.n {
        let xs = x.sample(i);
        let ys = y.sample_mut(i);
        for c in 0..x.c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let at = |dy: usize, dx: usize| xs[(c * x.h + 2 * oy + dy) * x.w + 2 * ox + dx];
                    ys[(c * ho + oy) * wo + ox] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                }
            }
        }
    }
    y
}

impl FeatureExtractor for Vgg19Extractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let (h, w) = image.dims();
        if h < 16 || w < 16 {
            return Err(Error::Size(format!("VGG relu5_1 needs at least 16x16, got {h}x{w}")));
        }
        let plane = h * w;
        let mut data = vec![0.0f32; CHANNELS * plane];
        for (p, px) in image.data().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + p] = (px[c] - MEAN[c]) / STD[c];
            }
        }
        let mut x = Tensor::from_vec(1, CHANNELS, h, w, data)?;
        for (name, layer) in LAYERS.iter().zip(&self.layers) {
            x = conv_forward(&x, &layer.weight, Some(&layer.bias), &layer.geom)?;
            relu_inplace(&mut x);
            if pool_after(name) {
                x = max_pool2(&x);
            }
        }
        FeatureMap::new(x.c, x.h, x.w, x.data, self.id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;
    use std::io::Write;

    fn write_weights(path: &Path, width: usize) {
        let mut f = File::create(path).unwrap();
        f.write_all(VGG_MAGIC).unwrap();
        f.write_u32::<LittleEndian>(1).unwrap();
        f.write_u32::<LittleEndian>(26).unwrap();
        let mut cin = 3;
        for (li, name) in LAYERS.iter().enumerate() {
            for (suffix, dims) in [("weight", vec![width, cin, 3, 3]), ("bias", vec![width])] {
                let n = format!("{name}.{suffix}");
                f.write_u32::<LittleEndian>(n.len() as u32).unwrap();
                f.write_all(n.as_bytes()).unwrap();
                f.write_u32::<LittleEndian>(dims.len() as u32).unwrap();
                for &d in &dims {
                    f.write_u32::<LittleEndian>(d as u32).unwrap();
                }
                for k in 0..dims.iter().product::<usize>() {
                    let v = ((k * 7 + li * 3) % 11) as f32 / 11.0 - 0.3;
                    f.write_f32::<LittleEndian>(v * 0.2).unwrap();
                }
            }
            cin = width;
        }
    }

    #[test]
    fn loads_and_extracts_at_sixteenth_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.bin");
        write_weights(&path, 4);
        let vgg = Vgg19Extractor::load(&path).unwrap();
        let img = Image::from_fn(32, 48, |y, x| [(y % 5) as f32 / 5.0, (x % 3) as f32 / 3.0, 0.5]);
        let f = vgg.extract(&img).unwrap();
        assert_eq!((f.channels, f.height, f.width), (4, 2, 3));
        assert_eq!(f, vgg.extract(&img).unwrap());
        assert!(f.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn missing_or_foreign_files_are_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Vgg19Extractor::load(dir.path().join("none.bin")),
            Err(Error::BackendUnavailable(_))
        ));
        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"not weights at all").unwrap();
        assert!(matches!(Vgg19Extractor::load(&junk), Err(Error::BackendUnavailable(_))));
    }

    #[test]
    fn pool_takes_maximum() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0]).unwrap();
        assert_eq!(max_pool2(&x).data, vec![5.0, 8.0]);
    }
}
