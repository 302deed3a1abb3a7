//! Vietoris–Rips persistent homology from a distance matrix.
//!
//! H₀ comes from Kruskal's algorithm with union-find. Higher dimensions use
//! the standard column reduction of the boundary matrix over GF(2), with
//! the clearing optimization when H₂ is requested.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest point count accepted when `max_dim == 1`.
pub const MAX_POINTS_H1: usize = 512;
/// Largest point count accepted when `max_dim == 2`.
pub const MAX_POINTS_H2: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub dim: usize,
    pub birth: f64,
    /// `f64::INFINITY` for essential classes.
    pub death: f64,
}

impl Feature {
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }

    pub fn is_essential(&self) -> bool {
        self.death.is_infinite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    /// Sorted by `(dim, birth, death)`.
    pub features: Vec<Feature>,
    pub max_dim: usize,
    pub max_radius: f64,
    pub n_points: usize,
}

impl PersistenceDiagram {
    pub fn of_dim(&self, dim: usize) -> impl Iterator<Item = &Feature> + '_ {
        self.features.iter().filter(move |f| f.dim == dim)
    }

    /// Number of `dim`-features alive at radius `r` (`birth ≤ r < death`).
    pub fn betti_at(&self, dim: usize, r: f64) -> usize {
        self.of_dim(dim)
            .filter(|f| f.birth <= r && r < f.death)
            .count()
    }

    /// `dim,birth,death` rows with a commented header recording the
    /// truncation parameters.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# n_points={}", self.n_points);
        let _ = writeln!(s, "# max_dim={}", self.max_dim);
        let _ = writeln!(s, "# max_radius={:.16e}", self.max_radius);
        s.push_str("dim,birth,death\n");
        for f in &self.features {
            if f.is_essential() {
                let _ = writeln!(s, "{},{:.16e},inf", f.dim, f.birth);
            } else {
                let _ = writeln!(s, "{},{:.16e},{:.16e}", f.dim, f.birth, f.death);
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut d = PersistenceDiagram {
            features: Vec::new(),
            max_dim: 0,
            max_radius: f64::INFINITY,
            n_points: 0,
        };
        let parse_err = |line: usize, msg: String| Error::Parse {
            line: line + 1,
            msg,
        };
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line == "dim,birth,death" {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    let bad = |e: String| parse_err(ln, e);
                    match k.trim() {
                        "n_points" => {
                            d.n_points = v.trim().parse().map_err(|e| bad(format!("{e}")))?
                        }
                        "max_dim" => {
                            d.max_dim = v.trim().parse().map_err(|e| bad(format!("{e}")))?
                        }
                        "max_radius" => {
                            d.max_radius = v.trim().parse().map_err(|e| bad(format!("{e}")))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(parse_err(
                    ln,
                    format!("expected 3 columns, got {}", cols.len()),
                ));
            }
            let dim = cols[0].parse().map_err(|e| parse_err(ln, format!("{e}")))?;
            let birth = cols[1].parse().map_err(|e| parse_err(ln, format!("{e}")))?;
            let death = if cols[2] == "inf" {
                f64::INFINITY
            } else {
                cols[2].parse().map_err(|e| parse_err(ln, format!("{e}")))?
            };
            d.features.push(Feature { dim, birth, death });
        }
        Ok(d)
    }

    /// Birth/death scatter with the diagonal; essential classes are drawn
    /// on a line above the finite range.
    pub fn to_svg(&self, title: &str) -> String {
        const SIZE: f64 = 400.0;
        const PAD: f64 = 40.0;
        let finite_max = self
            .features
            .iter()
            .flat_map(|f| [f.birth, if f.is_essential() { f.birth } else { f.death }])
            .fold(0.0f64, f64::max);
        let top = if finite_max > 0.0 {
            finite_max * 1.1
        } else {
            1.0
        };
        let inf_y = top * 1.05;
        let sx = |v: f64| PAD + v / (top * 1.1) * (SIZE - 2.0 * PAD);
        let sy = |v: f64| SIZE - PAD - v / (top * 1.1) * (SIZE - 2.0 * PAD);
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            SIZE / 2.0,
            xml_escape(title)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888"/>"##,
            sx(0.0),
            sy(0.0),
            sx(top),
            sy(top)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ccc" stroke-dasharray="4"/>"##,
            sx(0.0),
            sy(inf_y),
            sx(top),
            sy(inf_y)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10">birth</text><text x="5" y="{:.2}" font-size="10">death</text>"#,
            SIZE / 2.0,
            SIZE - 10.0,
            SIZE / 2.0
        );
        for f in &self.features {
            let y = if f.is_essential() { inf_y } else { f.death };
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"><title>H{} ({:.4}, {})</title></circle>"#,
                sx(f.birth),
                sy(y),
                colors[f.dim.min(colors.len() - 1)],
                f.dim,
                f.birth,
                if f.is_essential() {
                    "inf".to_string()
                } else {
                    format!("{:.4}", f.death)
                }
            );
        }
        for d in 0..=self.max_dim {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{}">H{}</text>"#,
                SIZE - PAD - 20.0,
                SIZE - PAD - 10.0 - 14.0 * d as f64,
                colors[d.min(colors.len() - 1)],
                d
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Features of one dimension ranked by persistence, essential classes first.
pub fn diagram_summary(diag: &PersistenceDiagram, dim: usize) -> Vec<Feature> {
    let mut out: Vec<Feature> = diag.of_dim(dim).copied().collect();
    out.sort_by(|a, b| {
        b.persistence()
            .total_cmp(&a.persistence())
            .then(a.birth.total_cmp(&b.birth))
    });
    out
}

/// `min_i max_j D_ij`: above this radius the Rips complex is a cone.
pub fn enclosing_radius(d: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|i| d[i * n..(i + 1) * n].iter().copied().fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min)
}

fn validate(d: &[f64], n: usize, max_dim: usize) -> Result<()> {
    if d.len() != n * n {
        return Err(Error::Dimension {
            op: "rips_persistence",
            expected: n * n,
            got: d.len(),
        });
    }
    if !(1..=2).contains(&max_dim) {
        return Err(Error::Config(format!(
            "max homology dimension must be 1 or 2, got {max_dim}"
        )));
    }
    let cap = if max_dim == 1 {
        MAX_POINTS_H1
    } else {
        MAX_POINTS_H2
    };
    if n > cap {
        return Err(Error::TooLarge(format!(
            "{n} points exceed the limit of {cap} for H{max_dim}; subsample the point set"
        )));
    }
    let scale = d.iter().copied().fold(0.0f64, |a, b| a.max(b.abs()));
    for i in 0..n {
        if d[i * n + i] != 0.0 {
            return Err(Error::Validation(format!(
                "distance matrix diagonal entry {i} is not zero"
            )));
        }
        for j in 0..i {
            let (a, b) = (d[i * n + j], d[j * n + i]);
            if !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
                return Err(Error::Validation(format!(
                    "distance ({i},{j}) must be finite and non-negative"
                )));
            }
            if (a - b).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::Validation(format!(
                    "distance matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Persistence diagram of the Rips filtration of a dense `n × n` distance
/// matrix, up to homology dimension `max_dim` (1 or 2). Simplices with
/// diameter above `max_radius` (default: the enclosing radius) are left
/// out. Zero-persistence pairs are dropped for dimensions ≥ 1; H₀ always
/// has exactly `n` features.
pub fn rips_persistence(
    d: &[f64],
    n: usize,
    max_dim: usize,
    max_radius: Option<f64>,
) -> Result<PersistenceDiagram> {
    rips_persistence_impl(d, n, max_dim, max_radius, None)
}

struct Simplices<const K: usize> {
    value: Vec<f64>,
    verts: Vec<[u32; K]>,
}

impl<const K: usize> Simplices<K> {
    fn new() -> Self {
        Simplices {
            value: Vec::new(),
            verts: Vec::new(),
        }
    }

    /// Sort by value; ties by vertex tuple, or by a random key when
    /// `shuffle` is given.
    fn sort(&mut self, shuffle: Option<&mut ChaCha8Rng>) {
        let mut idx: Vec<usize> = (0..self.value.len()).collect();
        match shuffle {
            None => idx.sort_by(|&a, &b| {
                self.value[a]
                    .total_cmp(&self.value[b])
                    .then(self.verts[a].cmp(&self.verts[b]))
            }),
            Some(rng) => {
                let keys: Vec<u64> = idx.iter().map(|_| rng.random()).collect();
                idx.sort_by(|&a, &b| {
                    self.value[a]
                        .total_cmp(&self.value[b])
                        .then(keys[a].cmp(&keys[b]))
                });
            }
        }
        self.value = idx.iter().map(|&i| self.value[i]).collect();
        self.verts = idx.iter().map(|&i| self.verts[i]).collect();
    }

    fn len(&self) -> usize {
        self.value.len()
    }
}

const NONE: u32 = u32::MAX;

/// Reduces the columns (boundaries of k-simplices, as sorted row indices)
/// in filtration order. Returns `pivot_of_row[row] = column` for every
/// pair. Columns flagged in `skip` are known to reduce to zero.
fn reduce(
    columns: impl Fn(usize, &mut Vec<u32>),
    n_cols: usize,
    n_rows: usize,
    skip: &[bool],
) -> Vec<u32> {
    let mut pivot_col = vec![NONE; n_rows];
    // reduced columns kept only for those that became pivots
    let mut reduced: Vec<Option<Vec<u32>>> = vec![None; n_cols];
    let mut col = Vec::new();
    let mut scratch = Vec::new();
    for j in 0..n_cols {
        if skip[j] {
            continue;
        }
        col.clear();
        columns(j, &mut col);
        col.sort_unstable();
        while let Some(&low) = col.last() {
            let other = pivot_col[low as usize];
            if other == NONE {
                break;
            }
            let o = reduced[other as usize]
                .as_ref()
                .expect("pivot column stored");
            symmetric_difference(&col, o, &mut scratch);
            std::mem::swap(&mut col, &mut scratch);
        }
        if let Some(&low) = col.last() {
            pivot_col[low as usize] = j as u32;
            reduced[j] = Some(col.clone());
        }
    }
    pivot_col
}

fn symmetric_difference(a: &[u32], b: &[u32], out: &mut Vec<u32>) {
    out.clear();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub(crate) fn rips_persistence_impl(
    d: &[f64],
    n: usize,
    max_dim: usize,
    max_radius: Option<f64>,
    shuffle_seed: Option<u64>,
) -> Result<PersistenceDiagram> {
    validate(d, n, max_dim)?;
    let radius = match max_radius {
        Some(r) if r.is_nan() || r < 0.0 => {
            return Err(Error::Config(format!(
                "max radius must be non-negative, got {r}"
            )));
        }
        Some(r) => r,
        None => enclosing_radius(d, n),
    };
    let mut rng = shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    // the lower triangle is authoritative
    let dist = |i: usize, j: usize| if i > j { d[i * n + j] } else { d[j * n + i] };

    let mut edges = Simplices::<2>::new();
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(i, j);
            if v <= radius {
                edges.value.push(v);
                edges.verts.push([i as u32, j as u32]);
            }
        }
    }
    edges.sort(rng.as_mut());
    let mut edge_index = vec![NONE; n * n];
    for (e, &[a, b]) in edges.verts.iter().enumerate() {
        edge_index[a as usize * n + b as usize] = e as u32;
        edge_index[b as usize * n + a as usize] = e as u32;
    }

    let mut features = Vec::new();

    // H0
    let mut parent: Vec<usize> = (0..n).collect();
    let mut edge_negative = vec![false; edges.len()];
    for (e, &[a, b]) in edges.verts.iter().enumerate() {
        let (ra, rb) = (find(&mut parent, a as usize), find(&mut parent, b as usize));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
            edge_negative[e] = true;
            features.push(Feature {
                dim: 0,
                birth: 0.0,
                death: edges.value[e],
            });
        }
    }
    for v in 0..n {
        if find(&mut parent, v) == v {
            features.push(Feature {
                dim: 0,
                birth: 0.0,
                death: f64::INFINITY,
            });
        }
    }

    // triangles
    let mut tris = Simplices::<3>::new();
    for a in 0..n {
        for b in a + 1..n {
            let ab = dist(a, b);
            if ab > radius {
                continue;
            }
            for c in b + 1..n {
                let v = ab.max(dist(a, c)).max(dist(b, c));
                if v <= radius {
                    tris.value.push(v);
                    tris.verts.push([a as u32, b as u32, c as u32]);
                }
            }
        }
    }
    tris.sort(rng.as_mut());
    let tri_boundary = |t: usize, out: &mut Vec<u32>| {
        let [a, b, c] = tris.verts[t].map(|v| v as usize);
        out.extend([
            edge_index[a * n + b],
            edge_index[a * n + c],
            edge_index[b * n + c],
        ]);
    };

    let mut tri_skip = vec![false; tris.len()];

    if max_dim >= 2 {
        let mut tri_index = vec![NONE; n * n * n];
        for (t, &[a, b, c]) in tris.verts.iter().enumerate() {
            tri_index[(a as usize * n + b as usize) * n + c as usize] = t as u32;
        }
        let mut tets = Simplices::<4>::new();
        for (t, &[a, b, c]) in tris.verts.iter().enumerate() {
            let tv = tris.value[t];
            for e in c as usize + 1..n {
                let v = tv
                    .max(dist(a as usize, e))
                    .max(dist(b as usize, e))
                    .max(dist(c as usize, e));
                if v <= radius {
                    tets.value.push(v);
                    tets.verts.push([a, b, c, e as u32]);
                }
            }
        }
        tets.sort(rng.as_mut());
        let tet_boundary = |t: usize, out: &mut Vec<u32>| {
            let [a, b, c, e] = tets.verts[t].map(|v| v as usize);
            let ti = |x: usize, y: usize, z: usize| tri_index[(x * n + y) * n + z];
            out.extend([ti(a, b, c), ti(a, b, e), ti(a, c, e), ti(b, c, e)]);
        };
        let tet_skip = vec![false; tets.len()];
        let pivots = reduce(tet_boundary, tets.len(), tris.len(), &tet_skip);
        for (t, &col) in pivots.iter().enumerate() {
            if col != NONE {
                // clearing: a paired triangle is positive, its own
                // boundary column reduces to zero
                tri_skip[t] = true;
                let (b, dth) = (tris.value[t], tets.value[col as usize]);
                if dth > b {
                    features.push(Feature {
                        dim: 2,
                        birth: b,
                        death: dth,
                    });
                }
            }
        }
        // essential H2: positive triangles that never die
        let tri_pivots = reduce(&tri_boundary, tris.len(), edges.len(), &tri_skip);
        let mut tri_negative = vec![false; tris.len()];
        for &col in &tri_pivots {
            if col != NONE {
                tri_negative[col as usize] = true;
            }
        }
        for t in 0..tris.len() {
            if !tri_negative[t] && pivots[t] == NONE {
                features.push(Feature {
                    dim: 2,
                    birth: tris.value[t],
                    death: f64::INFINITY,
                });
            }
        }
        push_h1(&mut features, &tri_pivots, &edges, &edge_negative, &tris);
    } else {
        let tri_pivots = reduce(&tri_boundary, tris.len(), edges.len(), &tri_skip);
        push_h1(&mut features, &tri_pivots, &edges, &edge_negative, &tris);
    }

    features.sort_by(|a, b| {
        a.dim
            .cmp(&b.dim)
            .then(a.birth.total_cmp(&b.birth))
            .then(a.death.total_cmp(&b.death))
    });
    Ok(PersistenceDiagram {
        features,
        max_dim,
        max_radius: radius,
        n_points: n,
    })
}

fn push_h1(
    features: &mut Vec<Feature>,
    tri_pivots: &[u32],
    edges: &Simplices<2>,
    edge_negative: &[bool],
    tris: &Simplices<3>,
) {
    for (e, &col) in tri_pivots.iter().enumerate() {
        if edge_negative[e] {
            continue;
        }
        let birth = edges.value[e];
        if col == NONE {
            features.push(Feature {
                dim: 1,
                birth,
                death: f64::INFINITY,
            });
        } else {
            let death = tris.value[col as usize];
            if death > birth {
                features.push(Feature {
                    dim: 1,
                    birth,
                    death,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::{fibonacci_lattice, torus_ring_lattice, ManifoldSpec, TorusGrid};
    use crate::points::{dist2, dot, Points};

    fn euclidean(p: &Points) -> Vec<f64> {
        let n = p.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = dist2(p.row(i), p.row(j)).sqrt();
            }
        }
        d
    }

    fn random_cloud(n: usize, dim: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Points::from_flat(dim, (0..n * dim).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn two_points() {
        let d = [0.0, 0.7, 0.7, 0.0];
        let dg = rips_persistence(&d, 2, 1, Some(10.0)).unwrap();
        assert_eq!(
            dg.features,
            vec![
                Feature {
                    dim: 0,
                    birth: 0.0,
                    death: 0.7
                },
                Feature {
                    dim: 0,
                    birth: 0.0,
                    death: f64::INFINITY
                },
            ]
        );
    }

    #[test]
    fn unit_square_has_one_loop() {
        let p = Points::from_rows(2, &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let dg = rips_persistence(&euclidean(&p), 4, 1, Some(10.0)).unwrap();
        let h1: Vec<_> = dg.of_dim(1).copied().collect();
        assert_eq!(h1.len(), 1);
        assert_eq!(h1[0].birth, 1.0);
        assert!((h1[0].death - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(dg.of_dim(0).count(), 4);
    }

    /// Rank over GF(2) of a set of columns given as sorted row lists.
    fn gf2_rank(mut cols: Vec<Vec<usize>>, n_rows: usize) -> usize {
        let words = n_rows.div_ceil(64);
        let mut rows: Vec<Vec<u64>> = cols
            .drain(..)
            .map(|c| {
                let mut bits = vec![0u64; words];
                for r in c {
                    bits[r / 64] ^= 1 << (r % 64);
                }
                bits
            })
            .collect();
        let mut rank = 0;
        for bit in 0..n_rows {
            let (w, m) = (bit / 64, 1u64 << (bit % 64));
            if let Some(p) = (rank..rows.len()).find(|&i| rows[i][w] & m != 0) {
                rows.swap(rank, p);
                let pivot = rows[rank].clone();
                for (i, row) in rows.iter_mut().enumerate() {
                    if i != rank && row[w] & m != 0 {
                        for (a, b) in row.iter_mut().zip(&pivot) {
                            *a ^= b;
                        }
                    }
                }
                rank += 1;
            }
        }
        rank
    }

    /// Betti numbers of the Rips complex at radius r from ranks of the
    /// boundary matrices, without any filtration.
    fn brute_betti(d: &[f64], n: usize, r: f64, max_dim: usize) -> Vec<usize> {
        let mut simplices: Vec<Vec<Vec<usize>>> = vec![(0..n).map(|v| vec![v]).collect()];
        for k in 1..=max_dim + 1 {
            let mut next = Vec::new();
            for s in &simplices[k - 1] {
                for v in s[k - 1] + 1..n {
                    if s.iter().all(|&u| d[u * n + v] <= r) {
                        let mut t = s.clone();
                        t.push(v);
                        next.push(t);
                    }
                }
            }
            simplices.push(next);
        }
        let rank = |k: usize| -> usize {
            if k == 0 || k > max_dim + 1 {
                return 0;
            }
            let faces = &simplices[k - 1];
            let cols = simplices[k]
                .iter()
                .map(|s| {
                    (0..s.len())
                        .map(|drop| {
                            let f: Vec<usize> = s
                                .iter()
                                .enumerate()
                                .filter(|&(i, _)| i != drop)
                                .map(|(_, &v)| v)
                                .collect();
                            faces.iter().position(|g| *g == f).unwrap()
                        })
                        .collect()
                })
                .collect();
            gf2_rank(cols, faces.len())
        };
        (0..=max_dim)
            .map(|k| simplices[k].len() - rank(k) - rank(k + 1))
            .collect()
    }

    #[test]
    fn matches_brute_force_betti_numbers() {
        for seed in 0..6 {
            let n = 8;
            let dim = if seed % 2 == 0 { 2 } else { 3 };
            let p = random_cloud(n, dim, seed);
            let d = euclidean(&p);
            let max = d.iter().copied().fold(0.0, f64::max);
            let dg = rips_persistence(&d, n, 2, Some(max)).unwrap();
            let mut radii: Vec<f64> = d.clone();
            radii.sort_by(f64::total_cmp);
            radii.dedup();
            for &edge in &radii {
                // probe just after each critical value
                let r = edge + 1e-12;
                let b = brute_betti(&d, n, r, 2);
                for k in 0..=2 {
                    assert_eq!(dg.betti_at(k, r), b[k], "seed {seed} r {r} dim {k}");
                }
            }
        }
    }

    #[test]
    fn truncation_at_small_radius_leaves_components() {
        let p = Points::from_rows(1, &[[0.0], [0.1], [5.0], [5.2]]).unwrap();
        let dg = rips_persistence(&euclidean(&p), 4, 1, Some(1.0)).unwrap();
        assert_eq!(dg.of_dim(0).filter(|f| f.is_essential()).count(), 2);
        assert_eq!(dg.betti_at(0, 0.0), 4);
    }

    #[test]
    fn one_component_above_max_distance() {
        let p = random_cloud(30, 2, 11);
        let dg = rips_persistence(&euclidean(&p), 30, 1, None).unwrap();
        assert_eq!(dg.betti_at(0, 0.0), 30);
        assert_eq!(dg.of_dim(0).filter(|f| f.is_essential()).count(), 1);
        // the complex at the enclosing radius is a cone
        assert_eq!(dg.of_dim(1).filter(|f| f.is_essential()).count(), 0);
    }

    #[test]
    fn invalid_inputs() {
        let asym = [0.0, 1.0, 2.0, 0.0];
        assert!(matches!(
            rips_persistence(&asym, 2, 1, None),
            Err(Error::Validation(_))
        ));
        let neg = [0.0, -1.0, -1.0, 0.0];
        assert!(matches!(
            rips_persistence(&neg, 2, 1, None),
            Err(Error::Validation(_))
        ));
        let big = vec![0.0; 65 * 65];
        assert!(matches!(
            rips_persistence(&big, 65, 2, None),
            Err(Error::TooLarge(_))
        ));
        assert!(rips_persistence(&[0.0], 1, 3, None).is_err());
    }

    fn noisy_circle(n: usize, seed: u64) -> Points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Points::with_capacity(2, n);
        for i in 0..n {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let r = 1.0 + 0.05 * (rng.random::<f64>() - 0.5);
            p.push(&[r * a.cos(), r * a.sin()]).unwrap();
        }
        p
    }

    #[test]
    fn circle_has_one_dominant_loop() {
        let p = noisy_circle(30, 1);
        let dg = rips_persistence(&euclidean(&p), 30, 1, None).unwrap();
        let s = diagram_summary(&dg, 1);
        assert!(!s.is_empty());
        let second = s.get(1).map_or(0.0, |f| f.persistence());
        assert!(s[0].persistence() > 3.0 * second, "{s:?}");
    }

    #[test]
    fn summary_orders_by_persistence() {
        let dg = PersistenceDiagram {
            features: vec![
                Feature {
                    dim: 1,
                    birth: 0.1,
                    death: 0.2,
                },
                Feature {
                    dim: 1,
                    birth: 0.0,
                    death: 1.0,
                },
                Feature {
                    dim: 1,
                    birth: 0.5,
                    death: f64::INFINITY,
                },
                Feature {
                    dim: 0,
                    birth: 0.0,
                    death: 3.0,
                },
            ],
            max_dim: 1,
            max_radius: 1.0,
            n_points: 2,
        };
        let s = diagram_summary(&dg, 1);
        assert!(s[0].is_essential());
        assert_eq!(s[1].death, 1.0);
        assert_eq!(s[2].birth, 0.1);
        let empty = PersistenceDiagram {
            features: vec![],
            ..dg
        };
        assert!(diagram_summary(&empty, 1).is_empty());
    }

    #[test]
    fn small_perturbations_move_features_little() {
        let p = noisy_circle(24, 3);
        let n = p.len();
        let d = euclidean(&p);
        let eps = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut dp = d.clone();
        for i in 0..n {
            for j in 0..i {
                let v = (d[i * n + j] + eps * (2.0 * rng.random::<f64>() - 1.0)).max(0.0);
                dp[i * n + j] = v;
                dp[j * n + i] = v;
            }
        }
        let r = 2.5;
        let a = rips_persistence(&d, n, 1, Some(r)).unwrap();
        let b = rips_persistence(&dp, n, 1, Some(r)).unwrap();
        let h0 = |g: &PersistenceDiagram| {
            let mut v: Vec<f64> = g.of_dim(0).map(|f| f.death).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        for (x, y) in h0(&a).iter().zip(h0(&b)) {
            assert!((x - y).abs() <= eps || (x.is_infinite() && y.is_infinite()));
        }
        let (fa, fb) = (diagram_summary(&a, 1)[0], diagram_summary(&b, 1)[0]);
        assert!((fa.birth - fb.birth).abs() <= eps + 1e-15);
        assert!((fa.death - fb.death).abs() <= eps + 1e-15);
    }

    #[test]
    fn tie_breaking_does_not_change_the_diagram() {
        // integer lattice: many equal distances
        let mut p = Points::new(2);
        for i in 0..4 {
            for j in 0..4 {
                p.push(&[i as f64, j as f64]).unwrap();
            }
        }
        let d = euclidean(&p);
        let base = rips_persistence_impl(&d, 16, 2, Some(2.5), None).unwrap();
        for seed in 0..5 {
            let other = rips_persistence_impl(&d, 16, 2, Some(2.5), Some(seed)).unwrap();
            assert_eq!(base.features, other.features, "seed {seed}");
        }
    }

    #[test]
    fn sphere_has_no_loops_and_one_void() {
        let p = fibonacci_lattice(64);
        let n = p.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d[i * n + j] = dot(p.row(i), p.row(j)).clamp(-1.0, 1.0).acos();
                }
            }
        }
        let dg = rips_persistence(&d, n, 2, None).unwrap();
        let h1 = diagram_summary(&dg, 1);
        let h2 = diagram_summary(&dg, 2);
        // every loop is a lattice artifact, far shorter lived than the void
        let floor = h2[0].persistence() / 3.0;
        assert!(h1.iter().all(|f| f.persistence() < floor), "{h1:?}");
        assert!(h2[0].persistence() > 1.0, "{h2:?}");
        assert!(h2.iter().skip(1).all(|f| f.persistence() < floor));
    }

    #[test]
    fn torus_lattice_has_two_dominant_loops() {
        let m = ManifoldSpec::torus();
        let pts = torus_ring_lattice(&m, 225, None).unwrap();
        let rows = TorusGrid::new(m, 128).unwrap().distance_rows(&pts).unwrap();
        let n = pts.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (rows[i][j] + rows[j][i]);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        let dg = rips_persistence(&d, n, 1, None).unwrap();
        let h1 = diagram_summary(&dg, 1);
        assert!(h1.len() >= 2);
        let third = h1.get(2).map_or(0.0, |f| f.persistence());
        assert!(h1[1].persistence() > 3.0 * third, "{h1:?}");
    }

    #[test]
    fn csv_and_svg_round_trip() {
        let p = noisy_circle(12, 5);
        let dg = rips_persistence(&euclidean(&p), 12, 1, None).unwrap();
        let csv = dg.to_csv();
        assert!(csv.contains(",inf"));
        let back = PersistenceDiagram::from_csv(&csv).unwrap();
        assert_eq!(back, dg);
        let svg = dg.to_svg("circle <H1>");
        assert!(svg.starts_with("<svg") && svg.contains("&lt;H1&gt;"));
        assert_eq!(svg.matches("<circle").count(), dg.features.len());
    }
}
