//! Visual sample dumps: (ground truth, mask, masked) triplets as binary
//! PPM images for eyeballing the procedural data.

use std::io::Write;
use std::path::{Path, PathBuf};

use auxweight_core::data::{MaskGroup, Sample};
use auxweight_core::rng::mix;
use auxweight_core::tensor::Tensor;

fn write_ppm(path: &Path, img: &Tensor) -> std::io::Result<()> {
    let (_, c, h, w) = img.shape().nchw();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", w, h)?;
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            // grayscale sources replicate their single channel
            let v = img.data()[if c == 3 { ch * hw + p } else { p }];
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    f.write_all(&buf)?;
    f.flush()
}

/// Write `count` triplets into `dir`; returns the created paths.
pub fn dump_samples(
    seed: u64,
    group: MaskGroup,
    count: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>, Box<dyn std::error::Error>> {
    std::fs::create_dir_all(dir)?;
    let img_seed = mix(seed ^ 0x53414D50);
    let mask_seed = mix(seed ^ 0x4D41534B);
    let mut paths = Vec::new();
    for idx in 0..count as u64 {
        let s = Sample::generate(img_seed, mask_seed, group, idx)?;
        for (tag, tensor) in [("gt", &s.gt), ("mask", &s.mask), ("masked", &s.masked)] {
            let path = dir.join(format!("{}_{:03}.ppm", tag, idx));
            write_ppm(&path, tensor)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
