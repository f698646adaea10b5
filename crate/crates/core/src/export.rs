//! 8-bit binary PGM output for label maps and pseudo-masks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{trunk, Model};
use crate::tensor::Tensor;
use crate::vlm::Vocabulary;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Graymap {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("PGM: {m}"));
        // Three whitespace-separated header fields after the magic, then one
        // whitespace byte before the raster.
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if bytes.get(i) == Some(&b'#') {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?,
            );
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary graymap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit maps are supported"));
        }
        let raster = bytes.get(i + 1..).ok_or_else(|| bad("missing raster"))?;
        if raster.len() != width * height {
            return Err(bad("raster size does not match header"));
        }
        Ok(Self {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read(path)?)
    }

    /// Min-max normalised to 0..=255; a constant slice maps to 0.
    pub fn from_values(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dim(
                "graymap",
                format!("{} values for {width}×{height}", values.len()),
            ));
        }
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let pixels = values
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    (255.0 * (v - lo) / span).round() as u8
                } else {
                    0
                }
            })
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Label indices stored directly as gray levels.
    pub fn from_labels(width: usize, height: usize, labels: &[usize]) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::dim(
                "graymap",
                format!("{} labels for {width}×{height}", labels.len()),
            ));
        }
        let pixels = labels
            .iter()
            .map(|&l| {
                u8::try_from(l)
                    .map_err(|_| Error::Input(format!("label {l} does not fit in 8 bits")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// `index<TAB>name` per line.
pub fn legend(vocab: &Vocabulary) -> String {
    vocab
        .entries
        .iter()
        .enumerate()
        .map(|(i, (_, name))| format!("{i}\t{name}\n"))
        .collect()
}

pub fn pseudomask_name(kind: &str, image: usize, category: usize) -> String {
    format!("{kind}_img{image}_cat{category}.pgm")
}

/// Writes every `(image, category)` slice of the global and local
/// similarity volumes at feature resolution, plus `legend.txt`.
pub fn export_pseudomasks(
    model: &Model,
    images: &Tensor,
    vocab: &Vocabulary,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let b = images.shape().first().copied().unwrap_or(0);
    let vision = model.encode_image(images)?;
    let text = model.encode_text(&vocab.ids(), b)?;
    let mut g = Graph::<f32>::new();
    let tr = trunk(&mut g, &model.params, &model.cfg, &vision, &text)?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (kind, var) in [("gcs", tr.s_g), ("lcs", tr.s_l)] {
        let s = g.shape(var).to_vec();
        let (t, h, w) = (s[1], s[2], s[3]);
        let values = g.value(var);
        for bi in 0..b {
            for ti in 0..t {
                let slice = &values[(bi * t + ti) * h * w..][..h * w];
                let path = dir.join(pseudomask_name(kind, bi, ti));
                Graymap::from_values(w, h, slice)?.write(&path)?;
                written.push(path);
            }
        }
    }
    let legend_path = dir.join("legend.txt");
    fs::write(&legend_path, legend(vocab))?;
    written.push(legend_path);
    Ok(written)
}
