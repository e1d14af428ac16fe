use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mlp::{dot, Activation, MlpCache, MlpWeights};
use super::{history_features, NnError};
use crate::geometry::Point2;
use crate::rng::Rng;

/// History encoder `f_hist`, projection `W` (`d x d`, row-major), attention
/// vector `a` (`2d`) and velocity head `g` (`2d -> 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GatRepr", into = "GatRepr")]
pub struct GatWeights {
    f_hist: MlpWeights,
    w: Vec<f64>,
    a: Vec<f64>,
    head: MlpWeights,
}

#[derive(Serialize, Deserialize)]
struct GatRepr {
    f_hist: MlpWeights,
    w: Vec<f64>,
    a: Vec<f64>,
    head: MlpWeights,
}

impl TryFrom<GatRepr> for GatWeights {
    type Error = NnError;
    fn try_from(r: GatRepr) -> Result<Self, NnError> {
        GatWeights::new(r.f_hist, r.w, r.a, r.head)
    }
}

impl From<GatWeights> for GatRepr {
    fn from(g: GatWeights) -> Self {
        GatRepr {
            f_hist: g.f_hist,
            w: g.w,
            a: g.a,
            head: g.head,
        }
    }
}

impl GatWeights {
    pub fn new(f_hist: MlpWeights, w: Vec<f64>, a: Vec<f64>, head: MlpWeights) -> Result<Self, NnError> {
        let d = f_hist.output_dim();
        if !f_hist.input_dim().is_multiple_of(2) {
            return Err(NnError::Shape("history encoder input must be 2(H-1)".into()));
        }
        if w.len() != d * d {
            return Err(NnError::Shape(format!("W has {} entries, expected {}", w.len(), d * d)));
        }
        if a.len() != 2 * d {
            return Err(NnError::Shape(format!("a has {} entries, expected {}", a.len(), 2 * d)));
        }
        if head.input_dim() != 2 * d || head.output_dim() != 2 {
            return Err(NnError::Shape(format!(
                "head maps {} -> {}, expected {} -> 2",
                head.input_dim(),
                head.output_dim(),
                2 * d
            )));
        }
        if w.iter().chain(&a).any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("attention parameters"));
        }
        Ok(Self { f_hist, w, a, head })
    }

    pub fn init(
        history_len: usize,
        latent: usize,
        fhist_hidden: &[usize],
        head_hidden: &[usize],
        input_scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut dims = vec![2 * (history_len - 1)];
        dims.extend_from_slice(fhist_hidden);
        dims.push(latent);
        let f_hist = MlpWeights::init(&dims, input_scale, rng);
        let mut dims = vec![2 * latent];
        dims.extend_from_slice(head_hidden);
        dims.push(2);
        let head = MlpWeights::init(&dims, 1.0, rng);
        let nw = Normal::new(0.0, (1.0 / latent as f64).sqrt()).expect("finite std");
        let w = (0..latent * latent).map(|_| nw.sample(rng)).collect();
        let na = Normal::new(0.0, (1.0 / (2 * latent) as f64).sqrt()).expect("finite std");
        let a = (0..2 * latent).map(|_| na.sample(rng)).collect();
        Self { f_hist, w, a, head }
    }

    pub fn f_hist(&self) -> &MlpWeights {
        &self.f_hist
    }

    pub fn head(&self) -> &MlpWeights {
        &self.head
    }

    pub fn projection(&self) -> &[f64] {
        &self.w
    }

    pub fn attention_vector(&self) -> &[f64] {
        &self.a
    }

    pub fn latent(&self) -> usize {
        self.f_hist.output_dim()
    }

    pub fn history_len(&self) -> usize {
        self.f_hist.input_dim() / 2 + 1
    }

    pub fn param_count(&self) -> usize {
        self.f_hist.param_count() + self.w.len() + self.a.len() + self.head.param_count()
    }

    /// Layout: `f_hist`, `W`, `a`, head.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.f_hist.write_params(out);
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.a);
        self.head.write_params(out);
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = self.f_hist.read_params(src);
        let nw = self.w.len();
        self.w.copy_from_slice(&src[k..k + nw]);
        k += nw;
        let na = self.a.len();
        self.a.copy_from_slice(&src[k..k + na]);
        k += na;
        k + self.head.read_params(&src[k..])
    }

    fn project(&self, h: &[f64]) -> Vec<f64> {
        let d = self.latent();
        self.w.chunks_exact(d).map(|row| dot(row, h)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatEncoding {
    /// `z_k = [h_k, c_k]` per agent.
    pub z: Vec<Vec<f64>>,
    /// Agent indices in each neighbourhood, self included, ascending.
    pub neighbors: Vec<Vec<usize>>,
    /// Attention weights aligned with `neighbors`.
    pub attention: Vec<Vec<f64>>,
}

struct Scene {
    f_caches: Vec<MlpCache>,
    h: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    neighbors: Vec<Vec<usize>>,
    pre: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
}

fn neighborhoods(positions: &[Point2], radius: f64) -> Vec<Vec<usize>> {
    positions
        .iter()
        .enumerate()
        .map(|(k, pk)| {
            (0..positions.len())
                .filter(|&j| j == k || pk.distance(&positions[j]) <= radius)
                .collect()
        })
        .collect()
}

fn encode_scene(w: &GatWeights, features: &[Vec<f64>], positions: &[Point2], radius: f64, keep: bool) -> Scene {
    let d = w.latent();
    let mut f_caches = Vec::new();
    let h: Vec<Vec<f64>> = features
        .iter()
        .map(|x| {
            if keep {
                let c = w.f_hist.forward_cached(x);
                let out = c.output.clone();
                f_caches.push(c);
                out
            } else {
                w.f_hist.forward(x)
            }
        })
        .collect();
    let u: Vec<Vec<f64>> = h.iter().map(|hk| w.project(hk)).collect();
    let (a1, a2) = w.a.split_at(d);
    let s: Vec<f64> = u.iter().map(|uk| dot(a1, uk)).collect();
    let t: Vec<f64> = u.iter().map(|uk| dot(a2, uk)).collect();
    let neighbors = neighborhoods(positions, radius);
    let mut pre = Vec::with_capacity(h.len());
    let mut alpha = Vec::with_capacity(h.len());
    let mut z = Vec::with_capacity(h.len());
    for (k, nk) in neighbors.iter().enumerate() {
        let p: Vec<f64> = nk.iter().map(|&j| s[k] + t[j]).collect();
        let e: Vec<f64> = p.iter().map(|&v| Activation::LeakyRelu.apply(v)).collect();
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = ex.iter().sum();
        let al: Vec<f64> = ex.iter().map(|v| v / sum).collect();
        let mut zk = Vec::with_capacity(2 * d);
        zk.extend_from_slice(&h[k]);
        zk.resize(2 * d, 0.0);
        for (&j, &aj) in nk.iter().zip(&al) {
            for (c, uj) in zk[d..].iter_mut().zip(&u[j]) {
                *c += aj * uj;
            }
        }
        pre.push(p);
        alpha.push(al);
        z.push(zk);
    }
    Scene {
        f_caches,
        h,
        u,
        neighbors,
        pre,
        alpha,
        z,
    }
}

fn scene_features<H: AsRef<[Point2]>>(
    histories: &[H],
    positions: &[Point2],
    w: &GatWeights,
) -> Result<Vec<Vec<f64>>, NnError> {
    if histories.is_empty() {
        return Err(NnError::EmptyScene);
    }
    if histories.len() != positions.len() {
        return Err(NnError::Shape(format!(
            "{} histories for {} positions",
            histories.len(),
            positions.len()
        )));
    }
    histories
        .iter()
        .map(|h| {
            let h = h.as_ref();
            if h.len() != w.history_len() {
                return Err(NnError::Shape(format!(
                    "history of length {}, network expects {}",
                    h.len(),
                    w.history_len()
                )));
            }
            Ok(history_features(h, 1.0))
        })
        .collect()
}

/// Social encoding of every agent in a scene. `positions` define the
/// neighbourhoods (`||p_k - p_j|| <= radius`, self included).
pub fn gat_encode<H: AsRef<[Point2]>>(
    histories: &[H],
    positions: &[Point2],
    radius: f64,
    w: &GatWeights,
) -> Result<GatEncoding, NnError> {
    let features = scene_features(histories, positions, w)?;
    let scene = encode_scene(w, &features, positions, radius, false);
    Ok(GatEncoding {
        z: scene.z,
        neighbors: scene.neighbors,
        attention: scene.alpha,
    })
}

/// Next-step velocity of every agent, `g(z_k)`.
pub fn gat_predict<H: AsRef<[Point2]>>(
    histories: &[H],
    positions: &[Point2],
    radius: f64,
    w: &GatWeights,
) -> Result<Vec<[f64; 2]>, NnError> {
    let enc = gat_encode(histories, positions, radius, w)?;
    Ok(enc
        .z
        .iter()
        .map(|z| {
            let y = w.head.forward(z);
            [y[0], y[1]]
        })
        .collect())
}

/// Sum of squared velocity errors over agents with a target, and the
/// gradient of `sum / norm` accumulated into `grad` (layout of
/// [`GatWeights::write_params`]). `features` are raw displacements,
/// `history_features(h, 1.0)`; the encoder applies its own input scale.
pub fn gat_loss_grad(
    w: &GatWeights,
    features: &[Vec<f64>],
    positions: &[Point2],
    radius: f64,
    targets: &[Option<[f64; 2]>],
    norm: f64,
    grad: &mut [f64],
) -> f64 {
    let d = w.latent();
    let sc = encode_scene(w, features, positions, radius, true);
    let n = features.len();
    let nf = w.f_hist.param_count();
    let (g_f, rest) = grad.split_at_mut(nf);
    let (g_w, rest) = rest.split_at_mut(d * d);
    let (g_a, g_head) = rest.split_at_mut(2 * d);

    let mut sse = 0.0;
    let mut dh = vec![vec![0.0; d]; n];
    let mut du = vec![vec![0.0; d]; n];
    let mut ds = vec![0.0; n];
    let mut dt = vec![0.0; n];
    for k in 0..n {
        let Some(target) = targets[k] else { continue };
        let cache = w.head.forward_cached(&sc.z[k]);
        let e = [cache.output[0] - target[0], cache.output[1] - target[1]];
        sse += e[0] * e[0] + e[1] * e[1];
        let dout = [2.0 * e[0] / norm, 2.0 * e[1] / norm];
        let mut dz = vec![0.0; 2 * d];
        w.head.backward(&cache, &dout, g_head, Some(&mut dz));
        for (a, b) in dh[k].iter_mut().zip(&dz[..d]) {
            *a += b;
        }
        let dc = &dz[d..];
        let nk = &sc.neighbors[k];
        let al = &sc.alpha[k];
        let dalpha: Vec<f64> = nk.iter().map(|&j| dot(dc, &sc.u[j])).collect();
        let mean: f64 = al.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
        for (idx, &j) in nk.iter().enumerate() {
            for (g, c) in du[j].iter_mut().zip(dc) {
                *g += al[idx] * c;
            }
            let de = al[idx] * (dalpha[idx] - mean);
            let dp = de * if sc.pre[k][idx] > 0.0 { 1.0 } else { super::LEAKY_SLOPE };
            ds[k] += dp;
            dt[j] += dp;
        }
    }
    let (a1, a2) = w.a.split_at(d);
    for j in 0..n {
        if ds[j] == 0.0 && dt[j] == 0.0 && du[j].iter().all(|v| *v == 0.0) && dh[j].iter().all(|v| *v == 0.0) {
            continue;
        }
        for i in 0..d {
            g_a[i] += ds[j] * sc.u[j][i];
            g_a[d + i] += dt[j] * sc.u[j][i];
            du[j][i] += ds[j] * a1[i] + dt[j] * a2[i];
        }
        for (r, &dur) in du[j].iter().enumerate() {
            if dur == 0.0 {
                continue;
            }
            let row = &w.w[r * d..(r + 1) * d];
            for c in 0..d {
                g_w[r * d + c] += dur * sc.h[j][c];
                dh[j][c] += dur * row[c];
            }
        }
        w.f_hist.backward(&sc.f_caches[j], &dh[j], g_f, None);
    }
    sse
}
