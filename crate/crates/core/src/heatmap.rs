//! Attention-matrix export: plain PGM images (darker = more attention) and
//! raw CSV, plus a diagonality statistic for qualitative reporting.

use serde::{Deserialize, Serialize};

use crate::error::{MahaError, Result};
use crate::tensor::SeqMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    GlobalMax,
    PerRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

#[derive(Debug, Clone, Copy)]
pub struct HeatmapSpec {
    pub scale_index: usize,
    pub normalization: Normalization,
    pub format: HeatmapFormat,
}

fn ensure_square(a: &SeqMatrix) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(MahaError::Shape(format!(
            "heatmap needs a square attention matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

/// Serializes a row-stochastic square matrix.
///
/// PGM is the plain `P2` format with maxval 255 and pixel
/// `round(255 * (1 - a_ij / norm))`, so maximal attention maps to black.
/// CSV emits raw values row-major, one matrix row per line.
pub fn export_heatmap(a: &SeqMatrix, spec: &HeatmapSpec) -> Result<Vec<u8>> {
    ensure_square(a)?;
    a.ensure_finite("heatmap input")?;
    match spec.format {
        HeatmapFormat::Csv => {
            let mut out = String::new();
            for i in 0..a.rows() {
                let row: Vec<String> = a.row(i).iter().map(|v| v.to_string()).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            Ok(out.into_bytes())
        }
        HeatmapFormat::Pgm => {
            let n = a.rows();
            let global_max = a.data().iter().copied().fold(0.0f64, f64::max);
            let mut out = format!("P2\n{n} {n}\n255\n");
            for i in 0..n {
                let norm = match spec.normalization {
                    Normalization::GlobalMax => global_max,
                    Normalization::PerRow => a.row(i).iter().copied().fold(0.0f64, f64::max),
                };
                let norm = if norm > 0.0 { norm } else { 1.0 };
                let pixels: Vec<String> = a
                    .row(i)
                    .iter()
                    .map(|&v| {
                        let p = (255.0 * (1.0 - v / norm)).round().clamp(0.0, 255.0) as u8;
                        p.to_string()
                    })
                    .collect();
                out.push_str(&pixels.join(" "));
                out.push('\n');
            }
            Ok(out.into_bytes())
        }
    }
}

/// Parses plain `P2` PGM bytes back into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| MahaError::Config("pgm: not valid utf-8".into()))?;
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("P2") {
        return Err(MahaError::Config("pgm: missing P2 magic".into()));
    }
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| MahaError::Config(format!("pgm: bad {what}")))
    };
    let width = next_usize("width")?;
    let height = next_usize("height")?;
    let maxval = next_usize("maxval")?;
    if maxval != 255 {
        return Err(MahaError::Config(format!("pgm: unsupported maxval {maxval}")));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for t in tokens {
        let v: usize =
            t.parse().map_err(|_| MahaError::Config(format!("pgm: bad pixel {t}")))?;
        if v > 255 {
            return Err(MahaError::Config(format!("pgm: pixel {v} out of range")));
        }
        pixels.push(v as u8);
    }
    if pixels.len() != width * height {
        return Err(MahaError::Config(format!(
            "pgm: {} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    Ok((width, height, pixels))
}

/// `sum_ij a_ij exp(-|i-j|) / n`: 1.0 for a perfectly diagonal row-stochastic
/// matrix, smaller as mass moves off the diagonal.
pub fn diagonality_score(a: &SeqMatrix) -> Result<f64> {
    ensure_square(a)?;
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for (j, &v) in a.row(i).iter().enumerate() {
            acc += v * (-(i as f64 - j as f64).abs()).exp();
        }
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::softmax_rows;

    fn spec(normalization: Normalization, format: HeatmapFormat) -> HeatmapSpec {
        HeatmapSpec { scale_index: 0, normalization, format }
    }

    #[test]
    fn single_pixel_max_attention_is_black() {
        let a = SeqMatrix::new(1, 1, vec![1.0]).unwrap();
        let bytes =
            export_heatmap(&a, &spec(Normalization::GlobalMax, HeatmapFormat::Pgm)).unwrap();
        let (w, h, px) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (1, 1));
        assert_eq!(px, vec![0]);
    }

    #[test]
    fn uniform_matrix_is_flat() {
        let a = SeqMatrix::filled(4, 4, 0.25);
        let bytes =
            export_heatmap(&a, &spec(Normalization::GlobalMax, HeatmapFormat::Pgm)).unwrap();
        let (_, _, px) = parse_pgm(&bytes).unwrap();
        assert!(px.iter().all(|&p| p == px[0]));
    }

    #[test]
    fn diagonal_attention_darker_on_diagonal() {
        let mut logits = SeqMatrix::zeros(4, 4);
        for i in 0..4 {
            logits.set(i, i, 8.0);
        }
        let a = softmax_rows(&logits);
        let bytes =
            export_heatmap(&a, &spec(Normalization::GlobalMax, HeatmapFormat::Pgm)).unwrap();
        let (_, _, px) = parse_pgm(&bytes).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    assert!(px[i * 4 + j] < 10);
                } else {
                    assert!(px[i * 4 + j] > 245);
                }
            }
        }
    }

    #[test]
    fn pgm_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let logits = SeqMatrix::init_uniform(6, 6, 1, &mut rng).scale(4.0);
            let a = softmax_rows(&logits);
            for norm in [Normalization::GlobalMax, Normalization::PerRow] {
                let bytes = export_heatmap(&a, &spec(norm, HeatmapFormat::Pgm)).unwrap();
                let (w, h, px) = parse_pgm(&bytes).unwrap();
                assert_eq!((w, h), (6, 6));
                let again = export_heatmap(&a, &spec(norm, HeatmapFormat::Pgm)).unwrap();
                let (_, _, px2) = parse_pgm(&again).unwrap();
                assert_eq!(px, px2);
                assert_eq!(bytes, again);
            }
        }
    }

    #[test]
    fn csv_emits_raw_values() {
        let a = SeqMatrix::new(2, 2, vec![0.75, 0.25, 0.5, 0.5]).unwrap();
        let bytes = export_heatmap(&a, &spec(Normalization::GlobalMax, HeatmapFormat::Csv)).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "0.75,0.25\n0.5,0.5\n");
    }

    #[test]
    fn non_square_rejected() {
        let a = SeqMatrix::zeros(2, 3);
        assert!(export_heatmap(&a, &spec(Normalization::GlobalMax, HeatmapFormat::Pgm)).is_err());
        assert!(diagonality_score(&a).is_err());
    }

    #[test]
    fn diagonality_of_identity_is_one() {
        assert_eq!(diagonality_score(&SeqMatrix::identity(5)).unwrap(), 1.0);
        assert_eq!(
            diagonality_score(&SeqMatrix::new(1, 1, vec![1.0]).unwrap()).unwrap(),
            1.0
        );
    }

    #[test]
    fn diagonality_of_uniform_matrix_matches_closed_form() {
        // sum_ij exp(-|i-j|) = n + 2 sum_{k=1}^{n-1} (n-k) exp(-k); the score
        // divides by n^2 (uniform entries) and by n.
        let n = 4;
        let a = SeqMatrix::filled(n, n, 1.0 / n as f64);
        let mut total = n as f64;
        for k in 1..n {
            total += 2.0 * (n - k) as f64 * (-(k as f64)).exp();
        }
        let expected = total / (n as f64 * n as f64);
        let got = diagonality_score(&a).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn diagonality_is_permutation_sensitive() {
        let mut logits = SeqMatrix::zeros(5, 5);
        for i in 0..5 {
            logits.set(i, i, 4.0);
        }
        let a = softmax_rows(&logits);
        let mut reversed = SeqMatrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                reversed.set(i, j, a.get(4 - i, j));
            }
        }
        assert!(diagonality_score(&reversed).unwrap() < diagonality_score(&a).unwrap());
    }
}
