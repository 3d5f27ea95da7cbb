//! Heatmap and query exports: coloured ASCII PLY, score CSV and query-token CSV.

use std::fmt::Write as _;

/// Jet colormap, index 0 dark blue through index 255 dark red.
pub fn jet_colormap() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    for (i, c) in lut.iter_mut().enumerate() {
        let v = i as f64 / 255.0;
        let ch = |centre: f64| ((1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
        *c = [ch(3.0), ch(2.0), ch(1.0)];
    }
    lut
}

pub fn score_colour(lut: &[[u8; 3]; 256], score: f64) -> [u8; 3] {
    let i = (score.clamp(0.0, 1.0) * 255.0).round() as usize;
    lut[i]
}

pub fn heatmap_ply(coords: &[[f64; 3]], scores: &[f64]) -> String {
    assert_eq!(coords.len(), scores.len());
    let lut = jet_colormap();
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        coords.len()
    );
    for (c, &p) in coords.iter().zip(scores) {
        let [r, g, b] = score_colour(&lut, p);
        let _ = writeln!(s, "{:.6} {:.6} {:.6} {r} {g} {b}", c[0], c[1], c[2]);
    }
    s
}

pub fn scores_csv(scores: &[f64]) -> String {
    let mut s = String::from("point_index,score\n");
    for (i, p) in scores.iter().enumerate() {
        let _ = writeln!(s, "{i},{p}");
    }
    s
}

pub fn query_csv_header(dim: usize) -> String {
    let mut s = String::from("layer,image_index,token_index,affordance");
    for d in 0..dim {
        let _ = write!(s, ",dim_{d}");
    }
    s.push('\n');
    s
}

/// Appends one row per token of one `M × C` query set.
pub fn push_query_rows(out: &mut String, layer: usize, image: usize, affordance: usize, tokens: &crate::tensor::Tensor) {
    for t in 0..tokens.rows() {
        let _ = write!(out, "{layer},{image},{t},{affordance}");
        for v in tokens.row(t) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
}
