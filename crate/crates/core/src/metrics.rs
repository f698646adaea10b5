use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Intersection over union per class and their mean over classes present in
/// either map.
pub fn miou(pred: &[usize], gt: &[usize], t: usize) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::dim(
            "miou",
            format!("{} predictions for {} labels", pred.len(), gt.len()),
        ));
    }
    let mut inter = vec![0u64; t];
    let mut union = vec![0u64; t];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= t || g >= t {
            return Err(Error::Input(format!(
                "label pair ({p}, {g}) outside 0..{t}"
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouReport { per_class, mean })
}

pub fn pixel_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::dim(
            "pixel_accuracy",
            format!("{} predictions for {} labels", pred.len(), gt.len()),
        ));
    }
    Ok(pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / gt.len() as f64)
}

/// Pools per-image confusion counts so that `miou` over a whole set equals
/// `miou` over the concatenated maps.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    pred: Vec<usize>,
    gt: Vec<usize>,
}

impl Accumulator {
    pub fn push(&mut self, pred: &[usize], gt: &[usize]) {
        self.pred.extend_from_slice(pred);
        self.gt.extend_from_slice(gt);
    }

    pub fn miou(&self, t: usize) -> Result<MiouReport> {
        miou(&self.pred, &self.gt, t)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        pixel_accuracy(&self.pred, &self.gt)
    }
}
