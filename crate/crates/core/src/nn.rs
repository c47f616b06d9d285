//! Building blocks shared by the models: affine layers, a GRU cell and the
//! batch layout that moves variable-length sequences between the flat
//! (utterance-major) and time-major row orders.

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Var};
use crate::math::{RngStream, SeqTensor};

/// Xavier-uniform initial weights.
pub fn xavier(rows: usize, cols: usize, rng: &mut RngStream) -> SeqTensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (2.0 * rng.uniform() - 1.0) * a)
        .collect();
    SeqTensor::new(rows, cols, data).expect("finite init")
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self, AutodiffError> {
        let w = store.add(&format!("{name}.w"), xavier(in_dim, out_dim, rng))?;
        let b = store.add(&format!("{name}.b"), SeqTensor::zeros(1, out_dim))?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// Weights and bias start at zero.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self, AutodiffError> {
        let w = store.add(&format!("{name}.w"), SeqTensor::zeros(in_dim, out_dim))?;
        let b = store.add(&format!("{name}.b"), SeqTensor::zeros(1, out_dim))?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// Re-binds to parameters already present in `store`.
    pub fn bind(store: &ParamStore, name: &str) -> Result<Self, AutodiffError> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let (in_dim, out_dim) = store.value(w).shape();
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Gated recurrent cell (reset, update and candidate gates).
#[derive(Debug, Clone)]
pub struct GruCell {
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self, AutodiffError> {
        let wx = store.add(&format!("{name}.wx"), xavier(in_dim, 3 * hidden, rng))?;
        let wh = store.add(&format!("{name}.wh"), xavier(hidden, 3 * hidden, rng))?;
        let bx = store.add(&format!("{name}.bx"), SeqTensor::zeros(1, 3 * hidden))?;
        let bh = store.add(&format!("{name}.bh"), SeqTensor::zeros(1, 3 * hidden))?;
        Ok(Self {
            wx,
            wh,
            bx,
            bh,
            in_dim,
            hidden,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self, AutodiffError> {
        let wx = store.id(&format!("{name}.wx"))?;
        let wh = store.id(&format!("{name}.wh"))?;
        let bx = store.id(&format!("{name}.bx"))?;
        let bh = store.id(&format!("{name}.bh"))?;
        let (in_dim, h3) = store.value(wx).shape();
        Ok(Self {
            wx,
            wh,
            bx,
            bh,
            in_dim,
            hidden: h3 / 3,
        })
    }

    /// Input half of the gate pre-activations, `x · Wx + bx`, for any number
    /// of rows at once.
    pub fn project_inputs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, AutodiffError> {
        let wx = g.param(store, self.wx);
        let bx = g.param(store, self.bx);
        let xw = g.matmul(x, wx)?;
        g.add_row(xw, bx)
    }

    /// One step from projected inputs `xp` (`B × 3H`) and state `h` (`B × H`).
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xp: Var,
        h: Var,
    ) -> Result<Var, AutodiffError> {
        let hd = self.hidden;
        let wh = g.param(store, self.wh);
        let bh = g.param(store, self.bh);
        let hw = g.matmul(h, wh)?;
        let hp = g.add_row(hw, bh)?;
        let x_ru = g.slice_cols(xp, 0, 2 * hd)?;
        let h_ru = g.slice_cols(hp, 0, 2 * hd)?;
        let pre = g.add(x_ru, h_ru)?;
        let gates = g.sigmoid(pre)?;
        let r = g.slice_cols(gates, 0, hd)?;
        let u = g.slice_cols(gates, hd, 2 * hd)?;
        let x_n = g.slice_cols(xp, 2 * hd, 3 * hd)?;
        let h_n = g.slice_cols(hp, 2 * hd, 3 * hd)?;
        let rh = g.mul(r, h_n)?;
        let pre_n = g.add(x_n, rh)?;
        let n = g.tanh(pre_n)?;
        let diff = g.sub(h, n)?;
        let ud = g.mul(u, diff)?;
        g.add(n, ud)
    }

    /// Runs over a batch of sequences stored flat (`layout.total() × in`) and
    /// returns flat hidden states (`layout.total() × H`). Padding rows never
    /// influence real steps, since the recurrence only looks backwards.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_flat: Var,
        layout: &BatchLayout,
    ) -> Result<Var, AutodiffError> {
        let xp = self.project_inputs(g, store, x_flat)?;
        let mut h = g.constant(SeqTensor::zeros(layout.batch(), self.hidden));
        let mut steps = Vec::with_capacity(layout.max_len());
        for t in 0..layout.max_len() {
            let xt = g.gather_rows(xp, &layout.step_rows(t))?;
            h = self.step(g, store, xt, h)?;
            steps.push(h);
        }
        let stacked = g.concat_rows(&steps)?;
        g.gather_rows(stacked, &layout.flat_from_time_major())
    }
}

/// Row bookkeeping for a batch of variable-length sequences.
///
/// Flat order stacks utterance after utterance; time-major order holds step
/// `t` of every utterance in rows `t·B .. t·B + B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    lengths: Vec<usize>,
    offsets: Vec<usize>,
    max_len: usize,
}

impl BatchLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self, AutodiffError> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(AutodiffError::InvalidArgument {
                op: "BatchLayout::new",
                detail: format!("sequence lengths must be non-empty and >= 1: {lengths:?}"),
            });
        }
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &l in &lengths {
            offsets.push(acc);
            acc += l;
        }
        let max_len = *lengths.iter().max().unwrap_or(&0);
        Ok(Self {
            lengths,
            offsets,
            max_len,
        })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Flat row of step `t` of every sequence, `None` past its end.
    pub fn step_rows(&self, t: usize) -> Vec<Option<usize>> {
        self.lengths
            .iter()
            .zip(&self.offsets)
            .map(|(&l, &o)| (t < l).then_some(o + t))
            .collect()
    }

    /// For each flat row, its row in the time-major stack.
    pub fn flat_from_time_major(&self) -> Vec<Option<usize>> {
        let b = self.batch();
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| (0..l).map(move |t| Some(t * b + i)))
            .collect()
    }

    /// For each flat row, the flat row of the previous step in the same
    /// sequence (`None` at sequence starts).
    pub fn prev_rows(&self) -> Vec<Option<usize>> {
        self.shifted(-1)
    }

    /// For each flat row, the flat row of the next step (`None` at ends).
    pub fn next_rows(&self) -> Vec<Option<usize>> {
        self.shifted(1)
    }

    fn shifted(&self, delta: isize) -> Vec<Option<usize>> {
        self.lengths
            .iter()
            .zip(&self.offsets)
            .flat_map(|(&l, &o)| {
                (0..l).map(move |t| {
                    let s = t as isize + delta;
                    (s >= 0 && (s as usize) < l).then(|| o + s as usize)
                })
            })
            .collect()
    }
}
