//! PCA and exact t-SNE down to two dimensions, with CSV and SVG writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub const TSNE_MAX_POINTS: usize = 2000;
pub const TSNE_PERPLEXITY: f64 = 30.0;
pub const TSNE_ITERATIONS: usize = 1000;
const TSNE_LEARNING_RATE: f64 = 200.0;
const TSNE_EXAGGERATION: f64 = 12.0;
const TSNE_EXAGGERATION_ITERS: usize = 250;
const TSNE_MIN_GAIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Tsne,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(Method::Pca),
            "tsne" | "t-sne" => Ok(Method::Tsne),
            _ => Err(Error::Config(format!("unknown projection method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub id: String,
    pub lang: String,
    pub x: f64,
    pub y: f64,
}

fn check(vectors: &[Vec<f64>]) -> Result<usize> {
    if vectors.len() < 3 {
        return Err(Error::Input(format!("projection needs >= 3 vectors, got {}", vectors.len())));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Input("projection vectors must share a positive width".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Input("projection vectors contain non-finite values".into()));
    }
    Ok(d)
}

/// Scores on the top two principal components. Each component is oriented
/// so that its largest-magnitude loading is positive.
pub fn pca(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = check(vectors)?;
    let n = vectors.len();
    let mut x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let mut lead = 0;
        for (i, c) in v.iter().enumerate() {
            if c.abs() > v[lead].abs() {
                lead = i;
            }
        }
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        components.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (k, comp) in components.iter().enumerate() {
                p[k] = x.row(i).iter().zip(comp).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect())
}

/// Row `i` of the conditional affinities at the precision matching `log_perp`.
fn conditional_row(dist: &[f64], i: usize, log_perp: f64, out: &mut [f64]) {
    let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
    for _ in 0..100 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, &dj) in dist.iter().enumerate() {
            out[j] = if j == i { 0.0 } else { (-dj * beta).exp() };
            sum += out[j];
            weighted += dj * out[j];
        }
        let sum = sum.max(f64::MIN_POSITIVE);
        let entropy = sum.ln() + beta * weighted / sum;
        out.iter_mut().for_each(|p| *p /= sum);
        let diff = entropy - log_perp;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
}

/// Exact t-SNE with perplexity `min(30, (n−1)/3)`, 1000 iterations,
/// early exaggeration, momentum and adaptive gains.
pub fn tsne(vectors: &[Vec<f64>], seed: u64) -> Result<Vec<[f64; 2]>> {
    check(vectors)?;
    let n = vectors.len();
    if n > TSNE_MAX_POINTS {
        return Err(Error::Input(format!("exact t-SNE is limited to {TSNE_MAX_POINTS} points, got {n}")));
    }
    let perplexity = TSNE_PERPLEXITY.min((n as f64 - 1.0) / 3.0);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut p = vec![0.0; n * n];
    let mut dist = vec![0.0; n];
    for i in 0..n {
        for (j, d) in dist.iter_mut().enumerate() {
            *d = sq(&vectors[i], &vectors[j]);
        }
        conditional_row(&dist, i, perplexity.ln(), &mut p[i * n..(i + 1) * n]);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = stream(seed, Purpose::Projection, 0);
    let init = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];

    for it in 0..TSNE_ITERATIONS {
        let exaggeration = if it < TSNE_EXAGGERATION_ITERS { TSNE_EXAGGERATION } else { 1.0 };
        let momentum = if it < TSNE_EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j { 0.0 } else { 1.0 / (1.0 + sq(&y[i], &y[j])) };
                num[i * n + j] = v;
                z += v;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                let q = (num[i * n + j] / z).max(1e-12);
                let m = (exaggeration * joint[i * n + j] - q) * num[i * n + j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for k in 0..2 {
                gains[i][k] = if (grad[i][k] > 0.0) != (velocity[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(TSNE_MIN_GAIN)
                };
                velocity[i][k] = momentum * velocity[i][k] - TSNE_LEARNING_RATE * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
            }
        }
        for k in 0..2 {
            let mean = y.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|p| p[k] -= mean);
        }
    }
    Ok(y)
}

pub fn project_embeddings(vectors: &[Vec<f64>], method: Method, seed: u64) -> Result<Vec<[f64; 2]>> {
    match method {
        Method::Pca => pca(vectors),
        Method::Tsne => tsne(vectors, seed),
    }
}

/// `id,lang,dim1,dim2`
pub fn write_projection_csv(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    let mut s = String::from("id,lang,dim1,dim2\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.id, p.lang, p.x, p.y);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Scatter plot coloured by language, with a legend.
pub fn render_svg(points: &[ProjectedPoint]) -> String {
    const SIZE: f64 = 640.0;
    const MARGIN: f64 = 30.0;
    let mut langs: Vec<&str> = Vec::new();
    for p in points {
        if !langs.contains(&p.lang.as_str()) {
            langs.push(&p.lang);
        }
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let (sx, sy) = (span(x0, x1), span(y0, y1));
    let inner = SIZE - 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    for p in points {
        let k = langs.iter().position(|l| *l == p.lang).unwrap_or(0);
        let cx = MARGIN + (p.x - x0) / sx * inner;
        let cy = SIZE - MARGIN - (p.y - y0) / sy * inner;
        let _ = writeln!(
            s,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"><title>{}</title></circle>",
            PALETTE[k % PALETTE.len()],
            escape(&p.id)
        );
    }
    for (k, lang) in langs.iter().enumerate() {
        let y = 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            "<circle cx=\"12\" cy=\"{:.0}\" r=\"4\" fill=\"{}\"/><text x=\"20\" y=\"{:.0}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>",
            y - 4.0,
            PALETTE[k % PALETTE.len()],
            y,
            escape(lang)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_projection_svg(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    fs::write(path, render_svg(points)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dists(p: &[[f64; 2]]) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                out.push(((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2)).sqrt());
            }
        }
        out
    }

    #[test]
    fn pca_preserves_planar_distances() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64;
                vec![t.sin() * 3.0, (t * 0.7).cos()]
            })
            .collect();
        let out = pca(&pts).unwrap();
        let orig: Vec<[f64; 2]> = pts.iter().map(|v| [v[0], v[1]]).collect();
        for (a, b) in dists(&out).iter().zip(dists(&orig)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn pca_collinear_has_flat_second_axis() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let out = pca(&pts).unwrap();
        let var: f64 = out.iter().map(|p| p[1] * p[1]).sum::<f64>() / 9.0;
        assert!(var < 1e-20);
        assert!(pca(&pts[..2]).is_err());
    }

    #[test]
    fn tsne_is_reproducible_and_separates_clusters() {
        let mut pts = Vec::new();
        for c in 0..2 {
            for i in 0..15 {
                let base = if c == 0 { 0.0 } else { 10.0 };
                pts.push(vec![base + (i as f64 * 0.37).sin(), base + (i as f64 * 0.91).cos(), 0.1 * i as f64]);
            }
        }
        let a = tsne(&pts, 3).unwrap();
        let b = tsne(&pts, 3).unwrap();
        assert_eq!(a, b);
        let centroid = |r: &[[f64; 2]]| {
            let n = r.len() as f64;
            [r.iter().map(|p| p[0]).sum::<f64>() / n, r.iter().map(|p| p[1]).sum::<f64>() / n]
        };
        let (c0, c1) = (centroid(&a[..15]), centroid(&a[15..]));
        let between = ((c0[0] - c1[0]).powi(2) + (c0[1] - c1[1]).powi(2)).sqrt();
        let within = a[..15]
            .iter()
            .map(|p| ((p[0] - c0[0]).powi(2) + (p[1] - c0[1]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(between > within);
    }

    #[test]
    fn writers_emit_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            ProjectedPoint { id: "a".into(), lang: "en".into(), x: 0.0, y: 1.0 },
            ProjectedPoint { id: "b".into(), lang: "ar".into(), x: 1.0, y: 0.5 },
        ];
        let csv = dir.path().join("p.csv");
        write_projection_csv(&csv, &pts).unwrap();
        assert_eq!(fs::read_to_string(&csv).unwrap(), "id,lang,dim1,dim2\na,en,0,1\nb,ar,1,0.5\n");
        let svg = render_svg(&pts);
        assert_eq!(svg.matches("<circle").count(), 4);
    }
}
