use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const REDUNDANCY_WINDOW: usize = 3;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Near-minus-far mean cosine of one movie's clip features, or `None` when
/// one of the two pair classes is empty.
pub fn movie_contrast(features: &Tensor<f64>, window: usize) -> Option<f64> {
    let n = features.rows();
    let (mut near, mut nn, mut far, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(features.row(i), features.row(j));
            if j - i <= window {
                near += c;
                nn += 1;
            } else {
                far += c;
                nf += 1;
            }
        }
    }
    (nn > 0 && nf > 0).then(|| near / nn as f64 - far / nf as f64)
}

/// Mean over movies of the near (temporal distance ≤ `window`) minus far
/// pair cosine similarity. Movies lacking either class are skipped.
pub fn redundancy_contrast(movies: &[Tensor<f64>], window: usize) -> Result<f64> {
    let values: Vec<f64> = movies
        .iter()
        .filter_map(|m| movie_contrast(m, window))
        .collect();
    if values.is_empty() {
        return Err(Error::invalid(format!(
            "redundancy contrast undefined: no movie has pairs both within and beyond distance {window}"
        )));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
