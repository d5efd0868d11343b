//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Ops are appended in forward order; `backward` replays them in exact
//! reverse order, accumulating vector-Jacobian products into per-node
//! gradient slots. A tape is confined to one thread; the tensors it returns
//! are plain data and may cross threads freely.

use super::{
    matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_into, sparsemax_rows, sparsemax_support,
    Tensor,
};
use crate::error::{KiwiError, Result};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&[Node], usize, &Tensor, &mut GradAccum)>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

/// Accumulates gradients into per-node slots during the reverse sweep.
pub(crate) struct GradAccum<'a> {
    grads: &'a mut [Option<Tensor>],
    track: &'a [bool],
}

impl GradAccum<'_> {
    fn wants(&self, id: usize) -> bool {
        self.track[id]
    }

    fn add(&mut self, id: usize, delta: Tensor) {
        if !self.track[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }
}

/// Gradients for every node of a tape, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    track: Vec<bool>,
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>, track: bool) -> Var {
        self.nodes.push(Node { value, back });
        self.track.push(track);
        Var(self.nodes.len() - 1)
    }

    /// Tracked input: gradients flow into it and are reported.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None, true)
    }

    /// Untracked input: gradient flow stops here.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(KiwiError::shape("tape add", format!("{sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        let back: BackFn = Box::new(move |_n, _id, g, acc| {
            acc.add(a.0, g.clone());
            acc.add(b.0, g.clone());
        });
        Ok(self.push(out, Some(back), true))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(KiwiError::shape("tape mul", format!("{sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            if acc.wants(a.0) {
                let bv = &nodes[b.0].value;
                let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                acc.add(a.0, Tensor::from_parts(g.shape().to_vec(), d));
            }
            if acc.wants(b.0) {
                let av = &nodes[a.0].value;
                let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc.add(b.0, Tensor::from_parts(g.shape().to_vec(), d));
            }
        });
        Ok(self.push(out, Some(back), true))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = super::scale(self.value(a), c);
        let back: BackFn = Box::new(move |_n, _id, g, acc| {
            acc.add(a.0, super::scale(g, c));
        });
        self.push(out, Some(back), true)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x + c).collect());
        let back: BackFn = Box::new(move |_n, _id, g, acc| {
            acc.add(a.0, g.clone());
        });
        self.push(out, Some(back), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(KiwiError::shape(
                "tape matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = matmul_raw(av, bv);
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            if acc.wants(a.0) {
                acc.add(a.0, matmul_nt_raw(g, &nodes[b.0].value));
            }
            if acc.wants(b.0) {
                acc.add(b.0, matmul_tn_raw(&nodes[a.0].value, g));
            }
        });
        Ok(self.push(out, Some(back), true))
    }

    /// `a * b^T`, with `a: n x k`, `b: m x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(KiwiError::shape(
                "tape matmul_nt",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let out = matmul_nt_raw(av, bv);
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            // C = A B^T: dA = G B, dB = G^T A
            if acc.wants(a.0) {
                acc.add(a.0, matmul_raw(g, &nodes[b.0].value));
            }
            if acc.wants(b.0) {
                acc.add(b.0, matmul_tn_raw(g, &nodes[a.0].value));
            }
        });
        Ok(self.push(out, Some(back), true))
    }

    /// Row gather: `out[i] = src[idx[i]]`. Used for embedding lookup and
    /// row selection (cls, first pieces). Duplicate indices accumulate.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let sv = self.value(src);
        let (rows, cols) = (sv.rows(), sv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(KiwiError::shape(
                "gather_rows",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(sv.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), cols], data);
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            if !acc.wants(src.0) {
                return;
            }
            let sv = &nodes[src.0].value;
            let mut d = Tensor::zeros(sv.rows(), sv.cols());
            let c = sv.cols();
            for (r, &i) in idx.iter().enumerate() {
                let grow = g.row(r);
                let drow = &mut d.data_mut()[i * c..(i + 1) * c];
                for (dj, gj) in drow.iter_mut().zip(grow) {
                    *dj += gj;
                }
            }
            acc.add(src.0, d);
        });
        Ok(self.push(out, Some(back), true))
    }

    /// Adds a `1 x m` bias row to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(KiwiError::shape(
                "add_row_broadcast",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, m) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for (x, y) in av.row(i).iter().zip(bv.row(0)) {
                data.push(x + y);
            }
        }
        let out = Tensor::from_parts(vec![n, m], data);
        let back: BackFn = Box::new(move |_n, _id, g, acc| {
            acc.add(a.0, g.clone());
            if acc.wants(bias.0) {
                let m = g.cols();
                let mut d = vec![0.0; m];
                for i in 0..g.rows() {
                    for (dj, gj) in d.iter_mut().zip(g.row(i)) {
                        *dj += gj;
                    }
                }
                acc.add(bias.0, Tensor::from_parts(vec![1, m], d));
            }
        });
        Ok(self.push(out, Some(back), true))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x.tanh()).collect());
        let back: BackFn = Box::new(move |nodes, id, g, acc| {
            let y = &nodes[id].value;
            let d = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(gi, yi)| gi * (1.0 - yi * yi))
                .collect();
            acc.add(a.0, Tensor::from_parts(g.shape().to_vec(), d));
        });
        self.push(out, Some(back), true)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x.ln()).collect());
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            let x = &nodes[a.0].value;
            let d = g.data().iter().zip(x.data()).map(|(gi, xi)| gi / xi).collect();
            acc.add(a.0, Tensor::from_parts(g.shape().to_vec(), d));
        });
        self.push(out, Some(back), true)
    }

    pub fn softmax_rows(&mut self, z: Var) -> Var {
        let zv = self.value(z);
        let (n, m) = (zv.rows(), zv.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            softmax_into(zv.row(i), &mut data[i * m..(i + 1) * m]);
        }
        let out = Tensor::from_parts(vec![n, m], data);
        let back: BackFn = Box::new(move |nodes, id, g, acc| {
            let y = &nodes[id].value;
            let (n, m) = (y.rows(), y.cols());
            let mut d = vec![0.0; n * m];
            for i in 0..n {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    d[i * m + j] = yr[j] * (gr[j] - dot);
                }
            }
            acc.add(z.0, Tensor::from_parts(vec![n, m], d));
        });
        self.push(out, Some(back), true)
    }

    /// Row-wise sparsemax. The subgradient at support boundaries is taken
    /// from the support set: `dz = s .* (g - mean_S(g))` on support `S`.
    pub fn sparsemax_rows(&mut self, z: Var) -> Var {
        let out = sparsemax_rows(self.value(z));
        let back: BackFn = Box::new(move |nodes, id, g, acc| {
            let y = &nodes[id].value;
            let (n, m) = (y.rows(), y.cols());
            let mut d = vec![0.0; n * m];
            for i in 0..n {
                let support = sparsemax_support(y.row(i));
                if support.is_empty() {
                    continue;
                }
                let gr = g.row(i);
                let mean: f64 = support.iter().map(|&j| gr[j]).sum::<f64>() / support.len() as f64;
                for &j in &support {
                    d[i * m + j] = gr[j] - mean;
                }
            }
            acc.add(z.0, Tensor::from_parts(vec![n, m], d));
        });
        self.push(out, Some(back), true)
    }

    /// Pre-norm style layer normalization over each row, with learnable
    /// `gamma`/`beta` rows.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != [1, m] || bv.shape() != [1, m] {
            return Err(KiwiError::shape(
                "layer_norm_rows",
                format!("gamma {:?} beta {:?} for width {m}", gv.shape(), bv.shape()),
            ));
        }
        let mut data = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut means = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_std[i] = is;
            for j in 0..m {
                data[i * m + j] = (row[j] - mean) * is * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::from_parts(vec![n, m], data);
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            let xv = &nodes[x.0].value;
            let gv = &nodes[gamma.0].value;
            let (n, m) = (xv.rows(), xv.cols());
            let mut dx = vec![0.0; n * m];
            let mut dgamma = vec![0.0; m];
            let mut dbeta = vec![0.0; m];
            for i in 0..n {
                let row = xv.row(i);
                let gr = g.row(i);
                let is = inv_std[i];
                let mean = means[i];
                // ghat = gamma .* g ; dx = is * (ghat - mean(ghat) - xhat * mean(ghat .* xhat))
                let mut mean_gh = 0.0;
                let mut mean_ghx = 0.0;
                for j in 0..m {
                    let xhat = (row[j] - mean) * is;
                    let gh = gv.data()[j] * gr[j];
                    mean_gh += gh;
                    mean_ghx += gh * xhat;
                    dgamma[j] += gr[j] * xhat;
                    dbeta[j] += gr[j];
                }
                mean_gh /= m as f64;
                mean_ghx /= m as f64;
                for j in 0..m {
                    let xhat = (row[j] - mean) * is;
                    let gh = gv.data()[j] * gr[j];
                    dx[i * m + j] = is * (gh - mean_gh - xhat * mean_ghx);
                }
            }
            acc.add(x.0, Tensor::from_parts(vec![n, m], dx));
            acc.add(gamma.0, Tensor::from_parts(vec![1, m], dgamma));
            acc.add(beta.0, Tensor::from_parts(vec![1, m], dbeta));
        });
        Ok(self.push(out, Some(back), true))
    }

    /// Per-row Euclidean norm, `n x d -> n x 1`. Gradient of a zero row is
    /// defined as zero.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let out = super::l2_norm_rows(self.value(a));
        let back: BackFn = Box::new(move |nodes, id, g, acc| {
            let x = &nodes[a.0].value;
            let norms = &nodes[id].value;
            let (n, m) = (x.rows(), x.cols());
            let mut d = vec![0.0; n * m];
            for i in 0..n {
                let nv = norms.data()[i];
                if nv == 0.0 {
                    continue;
                }
                let gi = g.data()[i];
                for j in 0..m {
                    d[i * m + j] = gi * x.row(i)[j] / nv;
                }
            }
            acc.add(a.0, Tensor::from_parts(vec![n, m], d));
        });
        self.push(out, Some(back), true)
    }

    /// Linear combination `sum_k coeffs[offset+k] * terms[k]` where the
    /// coefficients live (flattened) in another node. All terms must share
    /// one shape.
    pub fn lincomb(&mut self, terms: &[Var], coeffs: Var, offset: usize) -> Result<Var> {
        if terms.is_empty() {
            return Err(KiwiError::Contract("lincomb needs at least one term".into()));
        }
        let shape = self.value(terms[0]).shape().to_vec();
        for &t in terms {
            if self.value(t).shape() != shape {
                return Err(KiwiError::shape(
                    "lincomb",
                    format!("{:?} vs {:?}", self.value(t).shape(), shape),
                ));
            }
        }
        let cv = self.value(coeffs);
        if offset + terms.len() > cv.numel() {
            return Err(KiwiError::shape(
                "lincomb",
                format!(
                    "coeff window {}..{} out of range for {} coefficients",
                    offset,
                    offset + terms.len(),
                    cv.numel()
                ),
            ));
        }
        let mut data = vec![0.0; shape.iter().product()];
        for (k, &t) in terms.iter().enumerate() {
            let c = cv.data()[offset + k];
            if c == 0.0 {
                continue;
            }
            for (o, x) in data.iter_mut().zip(self.value(t).data()) {
                *o += c * x;
            }
        }
        let out = Tensor::from_parts(shape, data);
        let terms: Vec<usize> = terms.iter().map(|v| v.0).collect();
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            let cv = &nodes[coeffs.0].value;
            for (k, &t) in terms.iter().enumerate() {
                if acc.wants(t) {
                    acc.add(t, super::scale(g, cv.data()[offset + k]));
                }
            }
            if acc.wants(coeffs.0) {
                let mut d = Tensor::zeros(cv.rows(), cv.cols());
                for (k, &t) in terms.iter().enumerate() {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(nodes[t].value.data())
                        .map(|(a, b)| a * b)
                        .sum();
                    d.data_mut()[offset + k] = dot;
                }
                acc.add(coeffs.0, d);
            }
        });
        Ok(self.push(out, Some(back), true))
    }

    /// Multiply every entry of `a` by a `1x1` node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(KiwiError::shape(
                "mul_scalar_var",
                format!("scalar side has shape {:?}", sv.shape()),
            ));
        }
        let c = sv.data()[0];
        let out = super::scale(self.value(a), c);
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            let c = nodes[s.0].value.data()[0];
            if acc.wants(a.0) {
                acc.add(a.0, super::scale(g, c));
            }
            if acc.wants(s.0) {
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(nodes[a.0].value.data())
                    .map(|(x, y)| x * y)
                    .sum();
                acc.add(s.0, Tensor::scalar(dot));
            }
        });
        Ok(self.push(out, Some(back), true))
    }

    /// Picks entries `(row, col)` into a `1 x k` tensor.
    pub fn select_entries(&mut self, a: Var, entries: Vec<(usize, usize)>) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        if let Some(&(r, c)) = entries.iter().find(|&&(r, c)| r >= n || c >= m) {
            return Err(KiwiError::shape(
                "select_entries",
                format!("entry ({r},{c}) out of range for {n}x{m}"),
            ));
        }
        let data: Vec<f64> = entries.iter().map(|&(r, c)| av.at(r, c)).collect();
        let out = Tensor::from_parts(vec![1, entries.len()], data);
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            if !acc.wants(a.0) {
                return;
            }
            let av = &nodes[a.0].value;
            let m = av.cols();
            let mut d = Tensor::zeros(av.rows(), m);
            for (k, &(r, c)) in entries.iter().enumerate() {
                d.data_mut()[r * m + c] += g.data()[k];
            }
            acc.add(a.0, d);
        });
        Ok(self.push(out, Some(back), true))
    }

    /// Weighted sum of all entries (flattened) with constant coefficients;
    /// yields a scalar node.
    pub fn weighted_sum(&mut self, a: Var, coeffs: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if coeffs.len() != av.numel() {
            return Err(KiwiError::shape(
                "weighted_sum",
                format!("{} coefficients for {} entries", coeffs.len(), av.numel()),
            ));
        }
        let s: f64 = av.data().iter().zip(&coeffs).map(|(x, c)| x * c).sum();
        let out = Tensor::scalar(s);
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            if !acc.wants(a.0) {
                return;
            }
            let av = &nodes[a.0].value;
            let gs = g.data()[0];
            let d = coeffs.iter().map(|c| c * gs).collect();
            acc.add(a.0, Tensor::from_parts(av.shape().to_vec(), d));
        });
        Ok(self.push(out, Some(back), true))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.data().iter().sum());
        let back: BackFn = Box::new(move |nodes, _id, g, acc| {
            let av = &nodes[a.0].value;
            let gs = g.data()[0];
            acc.add(
                a.0,
                Tensor::from_parts(av.shape().to_vec(), vec![gs; av.numel()]),
            );
        });
        self.push(out, Some(back), true)
    }

    /// Reverse sweep from a scalar loss. Visits ops in exact reverse forward
    /// order; returns a gradient slot per node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(KiwiError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                let mut acc = GradAccum {
                    grads: &mut grads,
                    track: &self.track,
                };
                back(&self.nodes, id, &g, &mut acc);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
