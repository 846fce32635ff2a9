//! 3D skeletonization, local thickness (largest inscribed sphere) maps,
//! skeleton graph extraction with edge classification, and graph metrics.
//!
//! All geometry below assumes isotropic voxels; physical lengths still use
//! the per-axis spacing.

use std::collections::{BTreeMap, VecDeque};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::volume::BinaryVolume;

/// Tubule diameter floor in micrometres.
pub const DEFAULT_TUBULE_MIN_DIAMETER_UM: f64 = 1.0;
pub const DEFAULT_PRUNE_LENGTH: f64 = 2.0;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 3;
pub const DEFAULT_PRUNE_RADIUS_FACTOR: f64 = 1.0;

const CENTER: u32 = 13;

fn cube_index(dx: i32, dy: i32, dz: i32) -> u32 {
    ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as u32
}

struct Topology {
    adj26: [u32; 27],
    adj6: [u32; 27],
    n18: u32,
    n6: u32,
}

fn topology() -> &'static Topology {
    static T: OnceLock<Topology> = OnceLock::new();
    T.get_or_init(|| {
        let coords = |i: u32| {
            let i = i as i32;
            (i % 3 - 1, (i / 3) % 3 - 1, i / 9 - 1)
        };
        let mut t = Topology { adj26: [0; 27], adj6: [0; 27], n18: 0, n6: 0 };
        for i in 0..27 {
            let (x, y, z) = coords(i);
            let l1 = x.abs() + y.abs() + z.abs();
            if i != CENTER && l1 <= 2 {
                t.n18 |= 1 << i;
            }
            if l1 == 1 {
                t.n6 |= 1 << i;
            }
            for j in 0..27 {
                if i == j || j == CENTER {
                    continue;
                }
                let (a, b, c) = coords(j);
                let d = [(x - a).abs(), (y - b).abs(), (z - c).abs()];
                if d.iter().all(|&v| v <= 1) {
                    t.adj26[i as usize] |= 1 << j;
                }
                if d.iter().sum::<i32>() == 1 {
                    t.adj6[i as usize] |= 1 << j;
                }
            }
        }
        t
    })
}

fn flood(seed: u32, allowed: u32, adj: &[u32; 27]) -> u32 {
    let mut comp = seed;
    loop {
        let mut grown = comp;
        let mut bits = comp;
        while bits != 0 {
            grown |= adj[bits.trailing_zeros() as usize];
            bits &= bits - 1;
        }
        grown &= allowed;
        if grown == comp {
            return comp;
        }
        comp = grown;
    }
}

/// Exact simple-point test on a 3x3x3 occupancy mask (bit 13 is the centre):
/// one 26-connected foreground component in the punctured neighbourhood and
/// one 6-connected background component in the 18-neighbourhood touching a face.
pub fn is_simple(mask: u32) -> bool {
    let t = topology();
    let fg = mask & !(1 << CENTER) & ((1 << 27) - 1);
    if fg == 0 || flood(fg & fg.wrapping_neg(), fg, &t.adj26) != fg {
        return false;
    }
    let bg = !mask & t.n18;
    let faces = bg & t.n6;
    if faces == 0 {
        return false;
    }
    let comp = flood(faces & faces.wrapping_neg(), bg, &t.adj6);
    faces & !comp == 0
}

struct Padded {
    dims: [usize; 3],
    bits: Vec<bool>,
    offsets: [isize; 27],
}

impl Padded {
    fn new(bin: &BinaryVolume) -> Self {
        let [nx, ny, nz] = bin.dims;
        let dims = [nx + 2, ny + 2, nz + 2];
        let mut bits = vec![false; dims[0] * dims[1] * dims[2]];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    bits[(x + 1) + dims[0] * ((y + 1) + dims[1] * (z + 1))] = bin.get(x, y, z);
                }
            }
        }
        let mut offsets = [0isize; 27];
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    offsets[cube_index(dx, dy, dz) as usize] =
                        dx as isize + dims[0] as isize * (dy as isize + dims[1] as isize * dz as isize);
                }
            }
        }
        Padded { dims, bits, offsets }
    }

    fn mask(&self, i: usize) -> u32 {
        let mut m = 0u32;
        for (k, &o) in self.offsets.iter().enumerate() {
            if self.bits[(i as isize + o) as usize] {
                m |= 1 << k;
            }
        }
        m
    }

    fn unpad(&self, bin: &BinaryVolume) -> BinaryVolume {
        let [nx, ny, nz] = bin.dims;
        let mut bits = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    bits.push(self.bits[(x + 1) + self.dims[0] * ((y + 1) + self.dims[1] * (z + 1))]);
                }
            }
        }
        BinaryVolume { dims: bin.dims, spacing: bin.spacing, bits }
    }
}

fn is_endpoint(mask: u32) -> bool {
    (mask & !(1 << CENTER)).count_ones() == 1
}

/// Directional homotopic thinning to a one-voxel-wide centreline.
///
/// Six sub-iterations per pass remove border voxels facing N, S, E, W, U
/// and B. Candidates are collected in raster order and re-tested one by one
/// before removal; voxels with a single neighbour are kept as line ends.
pub fn skeletonize3d(bin: &BinaryVolume) -> BinaryVolume {
    let mut p = Padded::new(bin);
    let [px, py, _] = p.dims;
    let (px, plane) = (px as isize, (px * py) as isize);
    let dirs = [-px, px, 1, -1, plane, -plane];
    let mut fg: Vec<usize> = (0..p.bits.len()).filter(|&i| p.bits[i]).collect();
    loop {
        let mut changed = false;
        for &d in &dirs {
            let candidates: Vec<usize> = fg
                .iter()
                .copied()
                .filter(|&i| {
                    if !p.bits[i] || p.bits[(i as isize + d) as usize] {
                        return false;
                    }
                    let m = p.mask(i);
                    !is_endpoint(m) && is_simple(m)
                })
                .collect();
            for i in candidates {
                let m = p.mask(i);
                if !is_endpoint(m) && is_simple(m) {
                    p.bits[i] = false;
                    changed = true;
                }
            }
        }
        fg.retain(|&i| p.bits[i]);
        if !changed {
            break;
        }
    }
    p.unpad(bin)
}

fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let r = v[k];
            s = (fq - (f[r] + (r * r) as f64)) / (2 * q - 2 * r) as f64;
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let r = v[k];
        *out = (q as f64 - r as f64).powi(2) + f[r];
    }
}

const FAR: f64 = 1e20;

/// Squared Euclidean distance (voxel units) from each voxel to the nearest
/// background voxel; space outside the volume counts as background.
pub fn edt_squared(bin: &BinaryVolume) -> Vec<f64> {
    let [nx, ny, nz] = bin.dims;
    let mut d: Vec<f64> = bin.bits.iter().map(|&b| if b { FAR } else { 0.0 }).collect();
    let longest = nx.max(ny).max(nz);
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut zb = vec![0.0; longest + 1];
    let mut pass = |d: &mut Vec<f64>, n: usize, stride: usize, starts: Vec<usize>| {
        for s in starts {
            for i in 0..n {
                f[i] = d[s + i * stride];
            }
            dt1d(&f[..n], &mut out[..n], &mut v, &mut zb);
            for i in 0..n {
                let border = ((i + 1) * (i + 1)).min((n - i) * (n - i)) as f64;
                d[s + i * stride] = out[i].min(border);
            }
        }
    };
    let xs: Vec<usize> = (0..ny * nz).map(|r| r * nx).collect();
    pass(&mut d, nx, 1, xs);
    let ys: Vec<usize> = (0..nz).flat_map(|z| (0..nx).map(move |x| x + nx * ny * z)).collect();
    pass(&mut d, ny, nx, ys);
    let zs: Vec<usize> = (0..nx * ny).collect();
    pass(&mut d, nz, nx * ny, zs);
    for (x, &b) in d.iter_mut().zip(&bin.bits) {
        if !b {
            *x = 0.0;
        }
    }
    d
}

/// Per-voxel diameter (voxels) of the largest inscribed ball containing the voxel; zero on background.
#[derive(Debug, Clone, PartialEq)]
pub struct DiameterMap {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub values: Vec<f32>,
}

impl DiameterMap {
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    /// Nanometres per voxel used for converting diameters.
    pub fn voxel_nm(&self) -> f64 {
        (self.spacing[0] + self.spacing[1] + self.spacing[2]) / 3.0
    }
}

/// Local thickness from the distance transform.
///
/// A voxel with squared distance `d2` is the centre of the ball
/// `|v - c|^2 < d2`, which lies inside the foreground; its diameter is
/// `2*sqrt(d2) - 1` so that a one-voxel line has diameter 1. Centres whose
/// ball is contained in a neighbour's ball are skipped, which leaves the
/// per-voxel maximum unchanged.
pub fn local_thickness(bin: &BinaryVolume) -> DiameterMap {
    let [nx, ny, nz] = bin.dims;
    let d2 = edt_squared(bin);
    let r: Vec<f64> = d2.iter().map(|v| v.sqrt()).collect();
    let mut centers = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = x + nx * (y + ny * z);
                if !bin.bits[c] {
                    continue;
                }
                let mut redundant = false;
                'n: for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if (dx, dy, dz) == (0, 0, 0)
                                || xx < 0
                                || yy < 0
                                || zz < 0
                                || xx >= nx as i64
                                || yy >= ny as i64
                                || zz >= nz as i64
                            {
                                continue;
                            }
                            let n = xx as usize + nx * (yy as usize + ny * zz as usize);
                            let step = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                            if r[n] >= r[c] + step {
                                redundant = true;
                                break 'n;
                            }
                        }
                    }
                }
                if !redundant {
                    centers.push(c);
                }
            }
        }
    }
    centers.sort_by(|&a, &b| d2[b].total_cmp(&d2[a]).then(a.cmp(&b)));
    let mut values = vec![0f32; bin.bits.len()];
    for c in centers {
        let (cx, cy, cz) = ((c % nx) as i64, ((c / nx) % ny) as i64, (c / (nx * ny)) as i64);
        let rr = d2[c];
        let diameter = (2.0 * r[c] - 1.0) as f32;
        let m = r[c].ceil() as i64;
        for dz in -m..=m {
            let zz = cz + dz;
            if zz < 0 || zz >= nz as i64 {
                continue;
            }
            for dy in -m..=m {
                let yy = cy + dy;
                if yy < 0 || yy >= ny as i64 {
                    continue;
                }
                let rest = rr - (dz * dz + dy * dy) as f64;
                if rest <= 0.0 {
                    continue;
                }
                for dx in -m..=m {
                    if ((dx * dx) as f64) >= rest {
                        continue;
                    }
                    let xx = cx + dx;
                    if xx < 0 || xx >= nx as i64 {
                        continue;
                    }
                    let i = xx as usize + nx * (yy as usize + ny * zz as usize);
                    if values[i] < diameter {
                        values[i] = diameter;
                    }
                }
            }
        }
    }
    DiameterMap { dims: bin.dims, spacing: bin.spacing, values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeClass {
    Tubule,
    Branch,
    Unclassified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    /// Cluster centroid in voxel coordinates.
    pub position: [f64; 3],
    pub voxels: Vec<[usize; 3]>,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: usize,
    pub endpoints: (usize, usize),
    /// Skeleton voxels from the first endpoint to the second.
    pub polyline: Vec<[usize; 3]>,
    pub length_um: f64,
    pub mean_diameter_um: f64,
    pub max_diameter_um: f64,
    pub class: EdgeClass,
    pub self_loop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PorosityGraph {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl PorosityGraph {
    /// `sum(degree) == 2 * edges`.
    pub fn handshake_holds(&self) -> bool {
        self.nodes.iter().map(|n| n.degree).sum::<usize>() == 2 * self.edges.len()
    }

    pub fn degree_count(&self, d: usize) -> usize {
        self.nodes.iter().filter(|n| n.degree == d).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Terminal edges shorter than this (voxels) hanging off a junction are removed.
    pub prune_length: f64,
    /// Terminal edges shorter than this multiple of the junction's inscribed
    /// radius are also removed: they end inside the structure they leave.
    pub prune_radius_factor: f64,
    /// Moving-average window applied to centrelines before measuring length.
    pub smoothing_window: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            prune_length: DEFAULT_PRUNE_LENGTH,
            prune_radius_factor: DEFAULT_PRUNE_RADIUS_FACTOR,
            smoothing_window: DEFAULT_SMOOTHING_WINDOW,
        }
    }
}

struct RawNode {
    voxels: Vec<usize>,
    centroid: [f64; 3],
    /// Largest inscribed radius over the node's voxels.
    radius: f64,
}

struct RawEdge {
    a: usize,
    b: usize,
    pts: Vec<usize>,
}

/// Moving average with a window that shrinks symmetrically near the ends,
/// so the end points stay fixed.
pub fn smooth_polyline(pts: &[[f64; 3]], window: usize) -> Vec<[f64; 3]> {
    let half = window / 2;
    let n = pts.len();
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let mut acc = [0.0; 3];
            for p in &pts[i - h..=i + h] {
                for k in 0..3 {
                    acc[k] += p[k];
                }
            }
            let w = (2 * h + 1) as f64;
            [acc[0] / w, acc[1] / w, acc[2] / w]
        })
        .collect()
}

fn polyline_length(pts: &[[f64; 3]], scale: [f64; 3]) -> f64 {
    pts.windows(2)
        .map(|w| {
            let d: f64 = (0..3).map(|k| ((w[1][k] - w[0][k]) * scale[k]).powi(2)).sum();
            d.sqrt()
        })
        .sum()
}

struct Builder {
    dims: [usize; 3],
    nodes: Vec<Option<RawNode>>,
    edges: Vec<Option<RawEdge>>,
    window: usize,
}

impl Builder {
    fn coords(&self, i: usize) -> [f64; 3] {
        let [nx, ny, _] = self.dims;
        [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64]
    }

    fn points(&self, e: &RawEdge) -> Vec<[f64; 3]> {
        let mut pts = Vec::with_capacity(e.pts.len() + 2);
        pts.push(self.nodes[e.a].as_ref().unwrap().centroid);
        pts.extend(e.pts.iter().map(|&i| self.coords(i)));
        pts.push(self.nodes[e.b].as_ref().unwrap().centroid);
        pts.dedup();
        smooth_polyline(&pts, self.window)
    }

    fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for e in self.edges.iter().flatten() {
            deg[e.a] += 1;
            deg[e.b] += 1;
        }
        deg
    }

    fn prune(&mut self, prune_length: f64, radius_factor: f64) -> bool {
        let deg = self.degrees();
        let mut spurs = Vec::new();
        for (k, e) in self.edges.iter().enumerate() {
            let Some(e) = e else { continue };
            if e.a == e.b {
                continue;
            }
            let (da, db) = (deg[e.a], deg[e.b]);
            let (tip, junction) = if da == 1 && db >= 3 {
                (e.a, e.b)
            } else if db == 1 && da >= 3 {
                (e.b, e.a)
            } else {
                continue;
            };
            let limit = prune_length.max(radius_factor * self.nodes[junction].as_ref().unwrap().radius);
            if polyline_length(&self.points(e), [1.0; 3]) < limit {
                spurs.push((k, tip));
            }
        }
        for &(k, tip) in &spurs {
            self.edges[k] = None;
            self.nodes[tip] = None;
        }
        !spurs.is_empty()
    }

    fn dissolve(&mut self) -> bool {
        let mut any = false;
        for n in 0..self.nodes.len() {
            if self.nodes[n].is_none() {
                continue;
            }
            let incident: Vec<usize> = self
                .edges
                .iter()
                .enumerate()
                .filter_map(|(k, e)| e.as_ref().filter(|e| e.a == n || e.b == n).map(|_| k))
                .collect();
            // a self-loop counts twice towards the degree
            let looped = incident.iter().any(|&k| self.edges[k].as_ref().is_some_and(|e| e.a == e.b));
            if incident.len() != 2 || looped {
                continue;
            }
            let (k1, k2) = (incident[0], incident[1]);
            let mut e1 = self.edges[k1].take().unwrap();
            let mut e2 = self.edges[k2].take().unwrap();
            if e1.b != n {
                std::mem::swap(&mut e1.a, &mut e1.b);
                e1.pts.reverse();
            }
            if e2.a != n {
                std::mem::swap(&mut e2.a, &mut e2.b);
                e2.pts.reverse();
            }
            let mut pts = e1.pts;
            let skip = usize::from(pts.last() == e2.pts.first());
            pts.extend_from_slice(&e2.pts[skip..]);
            self.edges[k1] = Some(RawEdge { a: e1.a, b: e2.b, pts });
            self.nodes[n] = None;
            any = true;
        }
        any
    }
}

/// Builds the skeleton graph: voxels with other than two 26-neighbours are
/// node voxels, adjacent node voxels form one node, and chains of
/// two-neighbour voxels become edges. A closed loop without junctions gets
/// its raster-first voxel as node, carrying a self-loop. Short spurs are
/// pruned and the resulting degree-2 nodes are dissolved.
pub fn extract_graph(skeleton: &BinaryVolume, diameters: &DiameterMap, params: &GraphParams) -> PorosityGraph {
    let [nx, ny, nz] = skeleton.dims;
    let idx = |x: i64, y: i64, z: i64| -> Option<usize> {
        (x >= 0 && y >= 0 && z >= 0 && x < nx as i64 && y < ny as i64 && z < nz as i64)
            .then(|| x as usize + nx * (y as usize + ny * z as usize))
    };
    let neighbours = |i: usize| -> Vec<usize> {
        let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
        let mut out = Vec::with_capacity(26);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    if let Some(j) = idx(x + dx, y + dy, z + dz) {
                        if skeleton.bits[j] {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out
    };
    let skel: Vec<usize> = (0..skeleton.bits.len()).filter(|&i| skeleton.bits[i]).collect();
    let mut nbrs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &skel {
        nbrs.insert(i, neighbours(i));
    }
    let is_node = |i: usize| nbrs[&i].len() != 2;

    let mut builder = Builder {
        dims: skeleton.dims,
        nodes: Vec::new(),
        edges: Vec::new(),
        window: params.smoothing_window.max(1),
    };
    let mut cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &skel {
        if !is_node(i) || cluster.contains_key(&i) {
            continue;
        }
        let id = builder.nodes.len();
        let mut voxels = vec![i];
        cluster.insert(i, id);
        let mut q = VecDeque::from([i]);
        while let Some(c) = q.pop_front() {
            for &j in &nbrs[&c] {
                if is_node(j) && !cluster.contains_key(&j) {
                    cluster.insert(j, id);
                    voxels.push(j);
                    q.push_back(j);
                }
            }
        }
        voxels.sort_unstable();
        let mut centroid = [0.0; 3];
        for &v in &voxels {
            let c = builder.coords(v);
            for k in 0..3 {
                centroid[k] += c[k] / voxels.len() as f64;
            }
        }
        let radius = voxels.iter().map(|&v| diameters.values[v] as f64).fold(0.0, f64::max) / 2.0;
        builder.nodes.push(Some(RawNode { voxels, centroid, radius }));
    }

    let mut visited = vec![false; skeleton.bits.len()];
    let trace = |start: usize, first: usize, visited: &mut Vec<bool>| -> (Vec<usize>, usize) {
        let mut pts = vec![start, first];
        let (mut prev, mut cur) = (start, first);
        visited[first] = true;
        loop {
            let next = nbrs[&cur].iter().copied().find(|&j| j != prev).unwrap_or(prev);
            pts.push(next);
            if next == start || is_node(next) || visited[next] {
                return (pts, next);
            }
            visited[next] = true;
            prev = cur;
            cur = next;
        }
    };
    for &i in &skel {
        if !is_node(i) {
            continue;
        }
        for &s in &nbrs[&i] {
            if is_node(s) || visited[s] {
                continue;
            }
            let (pts, end) = trace(i, s, &mut visited);
            let (a, b) = (cluster[&i], cluster[&end]);
            // two-voxel detours around a single node are thinning artefacts
            if a == b && pts.len() <= 4 {
                continue;
            }
            builder.edges.push(Some(RawEdge { a, b, pts }));
        }
    }
    for &i in &skel {
        if is_node(i) || visited[i] {
            continue;
        }
        visited[i] = true;
        let id = builder.nodes.len();
        builder.nodes.push(Some(RawNode {
            voxels: vec![i],
            centroid: builder.coords(i),
            radius: diameters.values[i] as f64 / 2.0,
        }));
        let first = nbrs[&i][0];
        let (pts, _) = trace(i, first, &mut visited);
        builder.edges.push(Some(RawEdge { a: id, b: id, pts }));
    }

    loop {
        let pruned = builder.prune(params.prune_length, params.prune_radius_factor);
        let dissolved = builder.dissolve();
        if !pruned && !dissolved {
            break;
        }
    }

    let deg = builder.degrees();
    let mut remap = vec![usize::MAX; builder.nodes.len()];
    let mut nodes = Vec::new();
    for (k, n) in builder.nodes.iter().enumerate() {
        let Some(n) = n else { continue };
        remap[k] = nodes.len();
        nodes.push(Node {
            id: nodes.len(),
            position: n.centroid,
            voxels: n
                .voxels
                .iter()
                .map(|&v| [v % nx, (v / nx) % ny, v / (nx * ny)])
                .collect(),
            degree: deg[k],
        });
    }
    let node_radius: Vec<f64> = builder.nodes.iter().map(|n| n.as_ref().map_or(0.0, |n| n.radius)).collect();
    let scale = [
        skeleton.spacing[0] / 1000.0,
        skeleton.spacing[1] / 1000.0,
        skeleton.spacing[2] / 1000.0,
    ];
    let um_per_voxel = diameters.voxel_nm() / 1000.0;
    let mut edges = Vec::new();
    for e in builder.edges.iter().flatten() {
        let pts = builder.points(e);
        let length_um = polyline_length(&pts, scale);
        let inside = |v: usize, n: usize| {
            let c = builder.coords(v);
            let p = builder.nodes[n].as_ref().unwrap().centroid;
            deg[n] >= 3 && (0..3).map(|k| (c[k] - p[k]).powi(2)).sum::<f64>().sqrt() < node_radius[n]
        };
        let mut samples: Vec<f64> = e
            .pts
            .iter()
            .filter(|&&v| !inside(v, e.a) && !inside(v, e.b))
            .map(|&v| diameters.values[v] as f64)
            .collect();
        if samples.is_empty() {
            samples = e.pts.iter().map(|&v| diameters.values[v] as f64).collect();
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let max = samples.iter().copied().fold(0.0, f64::max);
        edges.push(Edge {
            id: edges.len(),
            endpoints: (remap[e.a], remap[e.b]),
            polyline: e.pts.iter().map(|&v| [v % nx, (v / nx) % ny, v / (nx * ny)]).collect(),
            length_um,
            mean_diameter_um: mean * um_per_voxel,
            max_diameter_um: max * um_per_voxel,
            class: EdgeClass::Unclassified,
            self_loop: e.a == e.b,
        });
    }
    PorosityGraph {
        dims: skeleton.dims,
        spacing: skeleton.spacing,
        nodes,
        edges,
    }
}

/// Tubule when the mean diameter reaches `tubule_min_diameter_um` and, if an
/// axis is given, the chord lies within 45 degrees of it; branch otherwise.
pub fn classify_edges(graph: &mut PorosityGraph, tubule_min_diameter_um: f64, axis: Option<[f64; 3]>) {
    let sp = graph.spacing;
    for e in &mut graph.edges {
        let thick = e.mean_diameter_um >= tubule_min_diameter_um;
        let aligned = match axis {
            None => true,
            Some(a) => {
                let (p, q) = (e.polyline[0], e.polyline[e.polyline.len() - 1]);
                let d: Vec<f64> = (0..3).map(|k| (q[k] as f64 - p[k] as f64) * sp[k]).collect();
                let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                let an = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = (0..3).map(|k| d[k] * a[k]).sum();
                dn > 0.0 && an > 0.0 && (dot / (dn * an)).abs() >= std::f64::consts::FRAC_1_SQRT_2
            }
        };
        e.class = if thick && aligned { EdgeClass::Tubule } else { EdgeClass::Branch };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphMetrics {
    pub n_edges_all: usize,
    pub n_edges_tubule: usize,
    pub n_edges_branch: usize,
    pub n_edges_unclassified: usize,
    pub n_nodes_degree_1: usize,
    pub n_nodes_degree_3: usize,
    pub n_nodes_degree_4: usize,
    pub n_nodes_degree_5: usize,
    pub n_nodes_degree_other: usize,
    pub total_length_all: f64,
    pub total_length_tubule: f64,
    pub total_length_branch: f64,
}

impl GraphMetrics {
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("n_edges_all", self.n_edges_all as f64),
            ("n_edges_tubule", self.n_edges_tubule as f64),
            ("n_edges_branch", self.n_edges_branch as f64),
            ("n_nodes_degree_1", self.n_nodes_degree_1 as f64),
            ("n_nodes_degree_3", self.n_nodes_degree_3 as f64),
            ("n_nodes_degree_4", self.n_nodes_degree_4 as f64),
            ("n_nodes_degree_5", self.n_nodes_degree_5 as f64),
            ("total_length_all", self.total_length_all),
            ("total_length_tubule", self.total_length_tubule),
            ("total_length_branch", self.total_length_branch),
        ]
    }
}

pub fn graph_metrics(graph: &PorosityGraph) -> GraphMetrics {
    let mut m = GraphMetrics::default();
    for e in &graph.edges {
        m.n_edges_all += 1;
        m.total_length_all += e.length_um;
        match e.class {
            EdgeClass::Tubule => {
                m.n_edges_tubule += 1;
                m.total_length_tubule += e.length_um;
            }
            EdgeClass::Branch => {
                m.n_edges_branch += 1;
                m.total_length_branch += e.length_um;
            }
            EdgeClass::Unclassified => m.n_edges_unclassified += 1,
        }
    }
    for n in &graph.nodes {
        match n.degree {
            1 => m.n_nodes_degree_1 += 1,
            3 => m.n_nodes_degree_3 += 1,
            4 => m.n_nodes_degree_4 += 1,
            5 => m.n_nodes_degree_5 += 1,
            _ => m.n_nodes_degree_other += 1,
        }
    }
    m
}

/// Generated over GT per field; `None` where the GT value is zero.
pub fn metric_ratios(gen: &GraphMetrics, gt: &GraphMetrics) -> Vec<(&'static str, Option<f64>)> {
    gen.fields()
        .into_iter()
        .zip(gt.fields())
        .map(|((name, g), (_, t))| (name, (t != 0.0).then(|| g / t)))
        .collect()
}

/// Skeleton, thickness, graph and classification of one binary volume.
pub fn analyze(bin: &BinaryVolume, params: &GraphParams, tubule_min_diameter_um: f64) -> (PorosityGraph, GraphMetrics) {
    let skeleton = skeletonize3d(bin);
    let diameters = local_thickness(bin);
    let mut graph = extract_graph(&skeleton, &diameters, params);
    classify_edges(&mut graph, tubule_min_diameter_um, None);
    let metrics = graph_metrics(&graph);
    (graph, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> BinaryVolume {
        let mut bits = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    bits.push(f(x, y, z));
                }
            }
        }
        BinaryVolume::new(dims, [100.0; 3], bits).unwrap()
    }

    #[test]
    fn simple_point_cases() {
        // isolated voxel and interior voxel are not simple
        assert!(!is_simple(1 << CENTER));
        assert!(!is_simple((1 << 27) - 1));
        // line end: one neighbour
        assert!(is_simple((1 << CENTER) | (1 << cube_index(1, 0, 0))));
        // middle of a line: removing it disconnects
        assert!(!is_simple(
            (1 << CENTER) | (1 << cube_index(1, 0, 0)) | (1 << cube_index(-1, 0, 0))
        ));
    }

    #[test]
    fn single_voxel_fixed_point() {
        let v = vol([3, 3, 3], |x, y, z| (x, y, z) == (1, 1, 1));
        assert_eq!(skeletonize3d(&v), v);
    }

    #[test]
    fn bar_thins_to_line() {
        let v = vol([7, 7, 34], |x, y, z| (2..5).contains(&x) && (2..5).contains(&y) && (2..32).contains(&z));
        let s = skeletonize3d(&v);
        assert!(s.count() >= 20 && s.count() <= 30, "{}", s.count());
        for z in 0..34 {
            let n = (0..49).filter(|&i| s.bits[i + 49 * z]).count();
            assert!(n <= 1);
        }
    }

    #[test]
    fn edt_line_and_ball() {
        let line = vol([5, 3, 3], |_, y, z| y == 1 && z == 1);
        let d = edt_squared(&line);
        assert!(d.iter().zip(&line.bits).all(|(&v, &b)| v == if b { 1.0 } else { 0.0 }));
        let t = local_thickness(&line);
        assert!(t.values.iter().zip(&line.bits).all(|(&v, &b)| v == if b { 1.0 } else { 0.0 }));
    }

    #[test]
    fn edt_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dims = [9, 7, 6];
        let v = vol(dims, |_, _, _| rng.gen_bool(0.8));
        let d = edt_squared(&v);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = x + dims[0] * (y + dims[1] * z);
                    if !v.bits[i] {
                        continue;
                    }
                    let mut best = i64::MAX;
                    for zz in -1..=dims[2] as i64 {
                        for yy in -1..=dims[1] as i64 {
                            for xx in -1..=dims[0] as i64 {
                                let outside = xx < 0
                                    || yy < 0
                                    || zz < 0
                                    || xx >= dims[0] as i64
                                    || yy >= dims[1] as i64
                                    || zz >= dims[2] as i64;
                                if outside || !v.get(xx as usize, yy as usize, zz as usize) {
                                    let dd = (xx - x as i64).pow(2) + (yy - y as i64).pow(2) + (zz - z as i64).pow(2);
                                    best = best.min(dd);
                                }
                            }
                        }
                    }
                    assert_eq!(d[i], best as f64, "at {x},{y},{z}");
                }
            }
        }
    }

    #[test]
    fn straight_path_graph() {
        let v = vol([12, 3, 3], |x, y, z| y == 1 && z == 1 && (1..11).contains(&x));
        let t = local_thickness(&v);
        let g = extract_graph(&v, &t, &GraphParams::default());
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.degree_count(1), 2);
        assert!((g.edges[0].length_um - 0.9).abs() < 1e-12);
        assert!((g.edges[0].mean_diameter_um - 0.1).abs() < 1e-9);
    }

    #[test]
    fn y_graph() {
        // arms along -x, +x+y diagonal and +x-y diagonal from (10,10,1)
        let v = vol([21, 21, 3], |x, y, z| {
            let (x, y) = (x as i64 - 10, y as i64 - 10);
            z == 1 && ((y == 0 && (-8..=0).contains(&x)) || (x > 0 && x <= 8 && (y == x || y == -x)))
        });
        let t = local_thickness(&v);
        let g = extract_graph(&v, &t, &GraphParams::default());
        assert_eq!(g.degree_count(3), 1);
        assert_eq!(g.degree_count(1), 3);
        assert_eq!(g.edges.len(), 3);
        assert!(g.handshake_holds());
    }

    #[test]
    fn ring_is_self_loop() {
        let v = vol([9, 9, 3], |x, y, z| {
            z == 1 && (2..=6).contains(&x) && (2..=6).contains(&y) && (x == 2 || x == 6 || y == 2 || y == 6)
        });
        // corners make those voxels have two neighbours only if the ring is 26-thin
        let v = vol([9, 9, 3], |x, y, z| {
            v.get(x, y, z) && !((x == 2 || x == 6) && (y == 2 || y == 6))
        });
        let t = local_thickness(&v);
        let g = extract_graph(&v, &t, &GraphParams::default());
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.edges.len(), 1);
        assert!(g.edges[0].self_loop);
        assert_eq!(g.nodes[0].degree, 2);
        assert!(g.handshake_holds());
    }

    #[test]
    fn ring_with_tail_keeps_its_junction() {
        let v = vol([9, 22, 3], |x, y, z| {
            let ring = (2..=6).contains(&x)
                && (2..=6).contains(&y)
                && (x == 2 || x == 6 || y == 2 || y == 6)
                && !((x == 2 || x == 6) && (y == 2 || y == 6));
            z == 1 && (ring || (x == 4 && (7..=20).contains(&y)))
        });
        let t = local_thickness(&v);
        let g = extract_graph(&v, &t, &GraphParams::default());
        assert_eq!(g.degree_count(3), 1);
        assert_eq!(g.degree_count(1), 1);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.edges.iter().filter(|e| e.self_loop).count(), 1);
        assert!(g.handshake_holds());
    }

    #[test]
    fn classification_threshold() {
        let v = vol([12, 3, 3], |x, y, z| y == 1 && z == 1 && (1..11).contains(&x));
        let t = local_thickness(&v);
        let mut g = extract_graph(&v, &t, &GraphParams::default());
        classify_edges(&mut g, 0.0, None);
        assert_eq!(g.edges[0].class, EdgeClass::Tubule);
        classify_edges(&mut g, 1.0, None);
        assert_eq!(g.edges[0].class, EdgeClass::Branch);
        classify_edges(&mut g, 0.0, Some([0.0, 1.0, 0.0]));
        assert_eq!(g.edges[0].class, EdgeClass::Branch);
    }

    #[test]
    fn ratios_guard_zero() {
        let gt = GraphMetrics { n_edges_branch: 10, ..Default::default() };
        let gen = GraphMetrics { n_edges_branch: 8, ..Default::default() };
        let r = metric_ratios(&gen, &gt);
        assert_eq!(r.iter().find(|(n, _)| *n == "n_edges_branch").unwrap().1, Some(0.8));
        assert_eq!(r.iter().find(|(n, _)| *n == "total_length_tubule").unwrap().1, None);
    }

    #[test]
    fn smoothing_pins_ends() {
        let pts: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, (i % 2) as f64, 0.0]).collect();
        let s = smooth_polyline(&pts, 5);
        assert_eq!(s[0], pts[0]);
        assert_eq!(s[5], pts[5]);
        assert!(s[2][1] > 0.0 && s[2][1] < 1.0);
    }
}
