//! Support encoding through the detector's shared weights and the fusion
//! of RoI features with per-class support vectors.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, Axis, Ix2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Graph, ParamId, ParamStore, Var};
use crate::dataset::{AnnotationId, ClassId, SupportImage};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// How RoI features are combined with support vectors before prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Gru,
    Xcorr,
    None,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Gru => "gru",
            Fusion::Xcorr => "xcorr",
            Fusion::None => "none",
        })
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gru" => Ok(Fusion::Gru),
            "xcorr" => Ok(Fusion::Xcorr),
            "none" => Ok(Fusion::None),
            _ => Err(Error::Config(format!("unknown fusion {s:?} (expected gru|xcorr|none)"))),
        }
    }
}

impl Fusion {
    pub fn uses_supports(self) -> bool {
        self != Fusion::None
    }
}

/// Handles of the four relation-GRU matrices inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruWeights {
    /// Reset gate, `d x 2d`.
    pub wr: ParamId,
    /// Update gate, `d x 2d`.
    pub wz: ParamId,
    /// Input transform, `d x d`.
    pub w: ParamId,
    /// Recurrent transform, `d x d`.
    pub u: ParamId,
    pub d: usize,
}

const GRU_NAMES: [&str; 4] = ["saan.gru.wr", "saan.gru.wz", "saan.gru.w", "saan.gru.u"];

impl GruWeights {
    /// Gate matrices uniform in `±1/sqrt(2d)`, `W` and `U` in `±1/sqrt(d)`.
    pub fn init(store: &mut ParamStore<f32>, d: usize, rng: &mut Rng) -> Result<Self> {
        let m = GruMatrices::<f32>::random(d, rng);
        let [wr, wz, w, u] = [m.wr, m.wz, m.w, m.u];
        Ok(GruWeights {
            wr: store.add(GRU_NAMES[0], wr.into_dyn())?,
            wz: store.add(GRU_NAMES[1], wz.into_dyn())?,
            w: store.add(GRU_NAMES[2], w.into_dyn())?,
            u: store.add(GRU_NAMES[3], u.into_dyn())?,
            d,
        })
    }

    /// `None` when the store holds no GRU.
    pub fn bind<T: Float>(store: &ParamStore<T>) -> Result<Option<Self>> {
        let ids: Vec<Option<ParamId>> = GRU_NAMES.iter().map(|n| store.id(n)).collect();
        if ids.iter().all(Option::is_none) {
            return Ok(None);
        }
        let [Some(wr), Some(wz), Some(w), Some(u)] = [ids[0], ids[1], ids[2], ids[3]] else {
            return Err(Error::Checkpoint("incomplete GRU weights".into()));
        };
        let d = store.value(w).shape()[0];
        let weights = GruWeights { wr, wz, w, u, d };
        for (id, shape) in [(wr, [d, 2 * d]), (wz, [d, 2 * d]), (w, [d, d]), (u, [d, d])] {
            if store.value(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}",
                    store.get(id).name,
                    store.value(id).shape()
                )));
            }
        }
        Ok(Some(weights))
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wr, self.wz, self.w, self.u]
    }

    pub fn vars<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> GruVars {
        GruVars {
            wr: g.param(store, self.wr),
            wz: g.param(store, self.wz),
            w: g.param(store, self.w),
            u: g.param(store, self.u),
        }
    }
}

/// GRU matrices bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wr: Var,
    pub wz: Var,
    pub w: Var,
    pub u: Var,
}

/// Plain-value GRU matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GruMatrices<T> {
    pub wr: Array2<T>,
    pub wz: Array2<T>,
    pub w: Array2<T>,
    pub u: Array2<T>,
}

impl<T: Float> GruMatrices<T> {
    pub fn zeros(d: usize) -> Self {
        GruMatrices {
            wr: Array2::zeros((d, 2 * d)),
            wz: Array2::zeros((d, 2 * d)),
            w: Array2::zeros((d, d)),
            u: Array2::zeros((d, d)),
        }
    }

    pub fn random(d: usize, rng: &mut Rng) -> Self {
        let gate = 1.0 / ((2 * d) as f64).sqrt();
        let plain = 1.0 / (d as f64).sqrt();
        let mut fill = |rows: usize, cols: usize, b: f64| {
            Array2::from_shape_fn((rows, cols), |_| T::from_f64(rng.gen_range(-b..=b)).expect("finite"))
        };
        GruMatrices {
            wr: fill(d, 2 * d, gate),
            wz: fill(d, 2 * d, gate),
            w: fill(d, d, plain),
            u: fill(d, d, plain),
        }
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    fn check(&self) -> Result<usize> {
        let d = self.d();
        if self.wr.dim() != (d, 2 * d)
            || self.wz.dim() != (d, 2 * d)
            || self.w.dim() != (d, d)
            || self.u.dim() != (d, d)
        {
            return Err(Error::shape(format!("inconsistent GRU matrices for d={d}")));
        }
        Ok(d)
    }

    fn bind(&self, g: &mut Graph<T>) -> GruVars {
        GruVars {
            wr: g.constant(self.wr.clone().into_dyn()),
            wz: g.constant(self.wz.clone().into_dyn()),
            w: g.constant(self.w.clone().into_dyn()),
            u: g.constant(self.u.clone().into_dyn()),
        }
    }
}

/// Outputs of one cell application, each `n x d`.
#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub hidden: Var,
    pub reset: Var,
    pub update: Var,
    pub candidate: Var,
}

/// One relation-GRU step on row batches `x, h: n x d`:
///
/// ```text
/// R  = sigmoid(W^r [x, h])
/// Z  = sigmoid(W^z [x, h])
/// H' = tanh(W x + U (R * h))
/// H  = Z * h + (1 - Z) * H'
/// ```
pub fn gru_cell_graph<T: Float>(g: &mut Graph<T>, m: GruVars, x: Var, h: Var) -> Result<GruStep> {
    if g.shape(x) != g.shape(h) {
        return Err(Error::shape(format!(
            "GRU input {:?} vs hidden {:?}",
            g.shape(x),
            g.shape(h)
        )));
    }
    let xh = g.concat_cols(x, h)?;
    let r_pre = g.matmul_nt(xh, m.wr)?;
    let reset = g.sigmoid(r_pre);
    let z_pre = g.matmul_nt(xh, m.wz)?;
    let update = g.sigmoid(z_pre);
    let rh = g.mul(reset, h)?;
    let wx = g.matmul_nt(x, m.w)?;
    let urh = g.matmul_nt(rh, m.u)?;
    let pre = g.add(wx, urh)?;
    let candidate = g.tanh(pre);
    // Z*h + (1-Z)*H' = H' + Z*(h - H')
    let diff = g.sub(h, candidate)?;
    let gated = g.mul(update, diff)?;
    let hidden = g.add(candidate, gated)?;
    Ok(GruStep {
        hidden,
        reset,
        update,
        candidate,
    })
}

/// Runs the cell once per support vector, in the given order, starting from
/// the RoI features `rois: n x d`. Each support is `1 x d`.
pub fn fuse_graph<T: Float>(g: &mut Graph<T>, m: GruVars, rois: Var, supports: &[Var]) -> Result<Var> {
    if supports.is_empty() {
        return Err(Error::shape("fusion needs at least one support vector"));
    }
    let n = g.shape(rois)[0];
    let mut h = rois;
    for &s in supports {
        let x = g.broadcast_rows(s, n)?;
        h = gru_cell_graph(g, m, x, h)?.hidden;
    }
    Ok(h)
}

/// Elementwise product of `rois: n x d` with the mean of the support
/// vectors.
pub fn xcorr_graph<T: Float>(g: &mut Graph<T>, rois: Var, supports: &[Var]) -> Result<Var> {
    if supports.is_empty() {
        return Err(Error::shape("fusion needs at least one support vector"));
    }
    let n = g.shape(rois)[0];
    let stacked = g.concat_rows(supports)?;
    let mean = g.mean_rows(stacked)?;
    let s = g.broadcast_rows(mean, n)?;
    g.mul(rois, s)
}

/// Applies `fusion` to a batch of RoI features.
pub fn apply_fusion<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fusion: Fusion,
    gru: Option<&GruWeights>,
    rois: Var,
    supports: &[Var],
) -> Result<Var> {
    match fusion {
        Fusion::None => Ok(rois),
        Fusion::Xcorr => xcorr_graph(g, rois, supports),
        Fusion::Gru => {
            let gru = gru.ok_or_else(|| Error::Config("fusion=gru without GRU weights".into()))?;
            let m = gru.vars(g, store);
            fuse_graph(g, m, rois, supports)
        }
    }
}

/// Hidden state and intermediates of one cell application on vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GruState<T> {
    pub hidden: Array1<T>,
    pub reset: Array1<T>,
    pub update: Array1<T>,
    pub candidate: Array1<T>,
}

fn row<T: Float>(v: ArrayView1<'_, T>) -> ArrayD<T> {
    v.to_owned().insert_axis(Axis(0)).into_dyn()
}

fn first_row<T: Float>(a: &ArrayD<T>) -> Array1<T> {
    a.view().into_dimensionality::<Ix2>().expect("row").row(0).to_owned()
}

/// Vector form of [`gru_cell_graph`].
pub fn relation_gru_cell<T: Float>(
    x: ArrayView1<'_, T>,
    h_prev: ArrayView1<'_, T>,
    m: &GruMatrices<T>,
) -> Result<GruState<T>> {
    let d = m.check()?;
    if x.len() != d || h_prev.len() != d {
        return Err(Error::shape(format!(
            "GRU expects d={d}, got x={} h={}",
            x.len(),
            h_prev.len()
        )));
    }
    let mut g = Graph::new();
    let vars = m.bind(&mut g);
    let xv = g.constant(row(x));
    let hv = g.constant(row(h_prev));
    let step = gru_cell_graph(&mut g, vars, xv, hv)?;
    Ok(GruState {
        hidden: first_row(g.value(step.hidden)),
        reset: first_row(g.value(step.reset)),
        update: first_row(g.value(step.update)),
        candidate: first_row(g.value(step.candidate)),
    })
}

/// Vector form of [`fuse_graph`] over a bank's vectors in its fixed order.
pub fn fuse_roi_with_supports<T: Float>(
    roi: ArrayView1<'_, T>,
    bank: &SupportFeatureBank<T>,
    m: &GruMatrices<T>,
) -> Result<Array1<T>> {
    let d = m.check()?;
    if bank.is_empty() {
        return Err(Error::shape("empty support bank"));
    }
    if roi.len() != d || bank.d() != d {
        return Err(Error::shape(format!("fusion expects d={d}")));
    }
    let mut g = Graph::new();
    let vars = m.bind(&mut g);
    let r = g.constant(row(roi));
    let supports: Vec<Var> = bank.vectors().map(|(_, v)| g.constant(row(v.view()))).collect();
    let out = fuse_graph(&mut g, vars, r, &supports)?;
    Ok(first_row(g.value(out)))
}

/// Elementwise product `roi * support`.
pub fn depthwise_cross_correlation<T: Float>(roi: ArrayView1<'_, T>, support: ArrayView1<'_, T>) -> Result<Array1<T>> {
    if roi.len() != support.len() {
        return Err(Error::shape(format!(
            "xcorr dimensions {} vs {}",
            roi.len(),
            support.len()
        )));
    }
    Ok(&roi * &support)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Single,
    Mean,
}

/// One d-vector per active class, iterated in ascending class id.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportFeatureBank<T> {
    vectors: BTreeMap<ClassId, Array1<T>>,
    provenance: BTreeMap<ClassId, Vec<AnnotationId>>,
    reduction: Reduction,
}

impl<T: Float> SupportFeatureBank<T> {
    pub fn new(
        vectors: BTreeMap<ClassId, Array1<T>>,
        provenance: BTreeMap<ClassId, Vec<AnnotationId>>,
        reduction: Reduction,
    ) -> Result<Self> {
        let mut dims = vectors.values().map(|v| v.len());
        if let Some(d) = dims.next() {
            if dims.any(|x| x != d) {
                return Err(Error::shape("support vectors of different widths"));
            }
        }
        Ok(SupportFeatureBank {
            vectors,
            provenance,
            reduction,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn d(&self) -> usize {
        self.vectors.values().next().map_or(0, |v| v.len())
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.vectors.keys().copied().collect()
    }

    pub fn get(&self, class: ClassId) -> Option<&Array1<T>> {
        self.vectors.get(&class)
    }

    pub fn vectors(&self) -> impl Iterator<Item = (ClassId, &Array1<T>)> {
        self.vectors.iter().map(|(c, v)| (*c, v))
    }

    pub fn provenance(&self) -> &BTreeMap<ClassId, Vec<AnnotationId>> {
        &self.provenance
    }

    pub fn reduction(&self) -> Reduction {
        self.reduction
    }

    /// Binds the vectors into `g` as constants, in bank order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.vectors.values().map(|v| g.constant(row(v.view()))).collect()
    }
}

/// Encodes support images through the shared backbone, adaptive pooling to
/// the RoI grid and the shared RoI head: `N x d`.
pub fn encode_supports_graph<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    detector: &Detector,
    images: &[&SupportImage],
) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::shape("no support images"));
    }
    let mut batch = Vec::with_capacity(images.len());
    for s in images {
        batch.push(detector.preprocess::<T>(&s.raster)?);
    }
    let views: Vec<_> = batch.iter().map(|a| a.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).map_err(|_| Error::shape("support images differ in size"))?;
    let x = g.constant(stacked);
    let feat = detector.backbone_forward(g, store, x)?;
    let pooled = g.adaptive_avg_pool(feat, detector.config.pooled)?;
    detector.roi_head_forward(g, store, pooled)
}

/// Groups encoded rows by class, averaging several rows of one class.
/// Returns one `1 x d` var per class in ascending class order.
pub fn class_vectors<T: Float>(g: &mut Graph<T>, encoded: Var, classes: &[ClassId]) -> Result<BTreeMap<ClassId, Var>> {
    let mut rows: BTreeMap<ClassId, Vec<Var>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        let r = g.select_row(encoded, i)?;
        rows.entry(*c).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (c, rs) in rows {
        let v = if rs.len() == 1 {
            rs[0]
        } else {
            let stacked = g.concat_rows(&rs)?;
            g.mean_rows(stacked)?
        };
        out.insert(c, v);
    }
    Ok(out)
}

/// Builds the bank for `classes`, averaging every support image of a class.
pub fn support_encode<T: Float>(
    detector: &Detector,
    store: &ParamStore<T>,
    supports: &[SupportImage],
    classes: &[ClassId],
) -> Result<SupportFeatureBank<T>> {
    for &c in classes {
        if !supports.iter().any(|s| s.class == c) {
            return Err(Error::MissingSupport(c));
        }
    }
    let chosen: Vec<&SupportImage> = supports.iter().filter(|s| classes.contains(&s.class)).collect();
    let mut g = Graph::new();
    let encoded = encode_supports_graph(&mut g, store, detector, &chosen)?;
    let labels: Vec<ClassId> = chosen.iter().map(|s| s.class).collect();
    let per_class = class_vectors(&mut g, encoded, &labels)?;
    let mut vectors = BTreeMap::new();
    let mut provenance: BTreeMap<ClassId, Vec<AnnotationId>> = BTreeMap::new();
    for s in &chosen {
        provenance.entry(s.class).or_default().push(s.annotation);
    }
    let multi = provenance.values().any(|v| v.len() > 1);
    for (c, v) in per_class {
        vectors.insert(c, first_row(g.value(v)));
    }
    SupportFeatureBank::new(
        vectors,
        provenance,
        if multi { Reduction::Mean } else { Reduction::Single },
    )
}
