//! GRU cell and bidirectional GRU encoders.
//!
//! A GRU step is recorded on the tape as one fused node with a hand-written
//! backward rule; the integration tests check it against the same equations
//! composed from primitive tape ops.

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{matmul_acc, matmul_tn_acc, sigmoid_scalar, CustomOp, Tape, Tensor, Var};

thread_local! {
    static GRU_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`gru_step`] calls made on this thread so far.
pub fn gru_step_count() -> u64 {
    GRU_STEPS.with(Cell::get)
}

/// Parameter handles for one GRU direction.
///
/// `w_*` are `[n_h, n_in]`, `u_*` are `[n_h, n_h]`, `b_*` are `[n_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCellParams {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub n_in: usize,
    pub n_h: usize,
}

impl GruCellParams {
    /// Glorot-uniform matrices and zero biases, registered under `prefix`.
    pub fn init<R: Rng + ?Sized>(set: &mut ParamSet, prefix: &str, n_in: usize, n_h: usize, rng: &mut R) -> Self {
        let mut gate = |g: &str| {
            (
                set.add_glorot(format!("{prefix}.w_{g}"), n_h, n_in, rng),
                set.add_glorot(format!("{prefix}.u_{g}"), n_h, n_h, rng),
                set.add_zeros(format!("{prefix}.b_{g}"), vec![n_h]),
            )
        };
        let (w_r, u_r, b_r) = gate("r");
        let (w_z, u_z, b_z) = gate("z");
        let (w_h, u_h, b_h) = gate("h");
        Self {
            w_r,
            u_r,
            b_r,
            w_z,
            u_z,
            b_z,
            w_h,
            u_h,
            b_h,
            n_in,
            n_h,
        }
    }

    /// Checks that all nine arrays in `set` agree on `n_in` and `n_h`.
    pub fn validate(&self, set: &ParamSet) -> Result<()> {
        let (n_in, n_h) = (self.n_in, self.n_h);
        for (id, want) in [
            (self.w_r, vec![n_h, n_in]),
            (self.w_z, vec![n_h, n_in]),
            (self.w_h, vec![n_h, n_in]),
            (self.u_r, vec![n_h, n_h]),
            (self.u_z, vec![n_h, n_h]),
            (self.u_h, vec![n_h, n_h]),
            (self.b_r, vec![n_h]),
            (self.b_z, vec![n_h]),
            (self.b_h, vec![n_h]),
        ] {
            if set.get(id).shape() != want.as_slice() {
                return Err(Error::Dimension {
                    op: "gru params",
                    lhs: set.get(id).shape().to_vec(),
                    rhs: want,
                });
            }
        }
        Ok(())
    }

    /// The nine parameter handles in the order w_r, u_r, b_r, w_z, u_z, b_z, w_h, u_h, b_h.
    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_r, self.u_r, self.b_r, self.w_z, self.u_z, self.b_z, self.w_h, self.u_h, self.b_h,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGruParams {
    pub forward: GruCellParams,
    pub backward: GruCellParams,
    pub n_h: usize,
}

impl BiGruParams {
    pub fn init<R: Rng + ?Sized>(set: &mut ParamSet, prefix: &str, n_in: usize, n_h: usize, rng: &mut R) -> Self {
        Self {
            forward: GruCellParams::init(set, &format!("{prefix}.fwd"), n_in, n_h, rng),
            backward: GruCellParams::init(set, &format!("{prefix}.bwd"), n_in, n_h, rng),
            n_h,
        }
    }

    pub fn n_in(&self) -> usize {
        self.forward.n_in
    }

    pub fn validate(&self, set: &ParamSet) -> Result<()> {
        if self.forward.n_in != self.backward.n_in
            || self.forward.n_h != self.n_h
            || self.backward.n_h != self.n_h
        {
            return Err(Error::Dimension {
                op: "bigru params",
                lhs: vec![self.forward.n_in, self.forward.n_h],
                rhs: vec![self.backward.n_in, self.backward.n_h],
            });
        }
        self.forward.validate(set)?;
        self.backward.validate(set)
    }
}

/// Saved activations of one step, used by the backward rule.
struct GruStepRule {
    n_in: usize,
    n_h: usize,
    r: Vec<f64>,
    z: Vec<f64>,
    cand: Vec<f64>,
    rh: Vec<f64>,
}

impl CustomOp for GruStepRule {
    fn name(&self) -> &'static str {
        "gru_step"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n_in, n_h) = (self.n_in, self.n_h);
        let x = inputs[0].data();
        let h = inputs[1].data();
        let (w_r, u_r) = (inputs[2].data(), inputs[3].data());
        let (w_z, u_z) = (inputs[5].data(), inputs[6].data());
        let (w_h, u_h) = (inputs[8].data(), inputs[9].data());

        let mut dx = vec![0.0; n_in];
        let mut dh = vec![0.0; n_h];
        let mut da_z = vec![0.0; n_h];
        let mut da_h = vec![0.0; n_h];
        for i in 0..n_h {
            let (z, c) = (self.z[i], self.cand[i]);
            dh[i] = g[i] * (1.0 - z);
            da_z[i] = g[i] * (c - h[i]) * z * (1.0 - z);
            da_h[i] = g[i] * z * (1.0 - c * c);
        }
        // d(r ⊙ h) = U_hᵀ da_h
        let mut drh = vec![0.0; n_h];
        matmul_tn_acc(u_h, &da_h, &mut drh, n_h, n_h, 1);
        let mut da_r = vec![0.0; n_h];
        for i in 0..n_h {
            let r = self.r[i];
            dh[i] += drh[i] * r;
            da_r[i] = drh[i] * h[i] * r * (1.0 - r);
        }

        let outer = |a: &[f64], b: &[f64]| -> Vec<f64> {
            let mut m = Vec::with_capacity(a.len() * b.len());
            for &ai in a {
                m.extend(b.iter().map(|bj| ai * bj));
            }
            m
        };
        for (da, w) in [(&da_r, w_r), (&da_z, w_z), (&da_h, w_h)] {
            matmul_tn_acc(w, da, &mut dx, n_h, n_in, 1);
        }
        matmul_tn_acc(u_r, &da_r, &mut dh, n_h, n_h, 1);
        matmul_tn_acc(u_z, &da_z, &mut dh, n_h, n_h, 1);
        vec![
            Some(dx),
            Some(dh),
            Some(outer(&da_r, x)),
            Some(outer(&da_r, h)),
            Some(da_r.clone()),
            Some(outer(&da_z, x)),
            Some(outer(&da_z, h)),
            Some(da_z.clone()),
            Some(outer(&da_h, x)),
            Some(outer(&da_h, &self.rh)),
            Some(da_h),
        ]
    }
}

/// One GRU update:
///
/// ```text
/// r = σ(W_r x + U_r h + b_r)
/// z = σ(W_z x + U_z h + b_z)
/// h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
pub fn gru_step<'p>(tape: &mut Tape<'p>, set: &'p ParamSet, p: &GruCellParams, x: Var, h_prev: Var) -> Result<Var> {
    let (n_in, n_h) = (p.n_in, p.n_h);
    if tape.shape(x) != [n_in] || tape.shape(h_prev) != [n_h] {
        return Err(Error::Dimension {
            op: "gru_step",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(h_prev).to_vec(),
        });
    }
    GRU_STEPS.with(|c| c.set(c.get() + 1));

    let ids = p.ids();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(set, id)).collect();
    let xv = tape.value(x).data();
    let hv = tape.value(h_prev).data();
    let pv = |id: ParamId| set.get(id).data();

    let affine = |w: ParamId, u: ParamId, b: ParamId, hin: &[f64]| {
        let mut a = pv(b).to_vec();
        matmul_acc(pv(w), xv, &mut a, n_h, n_in, 1);
        matmul_acc(pv(u), hin, &mut a, n_h, n_h, 1);
        a
    };
    let r: Vec<f64> = affine(p.w_r, p.u_r, p.b_r, hv).into_iter().map(sigmoid_scalar).collect();
    let z: Vec<f64> = affine(p.w_z, p.u_z, p.b_z, hv).into_iter().map(sigmoid_scalar).collect();
    let rh: Vec<f64> = r.iter().zip(hv).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = affine(p.w_h, p.u_h, p.b_h, &rh).into_iter().map(f64::tanh).collect();
    let out: Vec<f64> = (0..n_h).map(|i| (1.0 - z[i]) * hv[i] + z[i] * cand[i]).collect();

    let mut inputs = vec![x, h_prev];
    inputs.extend(vars);
    let rule = GruStepRule {
        n_in,
        n_h,
        r,
        z,
        cand,
        rh,
    };
    Ok(tape.custom(&inputs, Tensor::vector(out), Box::new(rule)))
}

/// Per-step states of both directions, aligned to input positions.
pub struct BiGruStates {
    /// `forward[i]` has consumed inputs `0..=i`.
    pub forward: Vec<Var>,
    /// `backward[i]` has consumed inputs `T-1` down to `i`.
    pub backward: Vec<Var>,
}

impl BiGruStates {
    /// Forward state after the last input and backward state after the first.
    pub fn finals(&self) -> (Var, Var) {
        (*self.forward.last().expect("nonempty"), self.backward[0])
    }
}

pub fn bigru_states<'p>(tape: &mut Tape<'p>, set: &'p ParamSet, p: &BiGruParams, x: Var, h0: Var) -> Result<BiGruStates> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != p.n_in() {
        return Err(Error::Dimension {
            op: "bigru",
            lhs: shape,
            rhs: vec![p.n_in()],
        });
    }
    let t = shape[1];
    if t == 0 {
        return Err(Error::Parameter("bigru needs a nonempty sequence".into()));
    }
    let cols: Vec<Var> = (0..t).map(|i| tape.column(x, i)).collect::<Result<_>>()?;

    let mut forward = Vec::with_capacity(t);
    let mut h = h0;
    for &c in &cols {
        h = gru_step(tape, set, &p.forward, c, h)?;
        forward.push(h);
    }
    let mut backward = vec![h0; t];
    let mut h = h0;
    for i in (0..t).rev() {
        h = gru_step(tape, set, &p.backward, cols[i], h)?;
        backward[i] = h;
    }
    Ok(BiGruStates { forward, backward })
}

/// Full output `[2·n_h, T]`: column `i` is the forward state at `i` stacked on
/// the backward state aligned to the same position.
pub fn bigru_full<'p>(tape: &mut Tape<'p>, set: &'p ParamSet, p: &BiGruParams, x: Var, h0: Var) -> Result<Var> {
    let states = bigru_states(tape, set, p, x, h0)?;
    let f = tape.stack_columns(&states.forward)?;
    let b = tape.stack_columns(&states.backward)?;
    tape.concat(f, b, 0)
}

/// Column `pos` (0-based) of a full Bi-GRU output.
pub fn bigru_column(tape: &mut Tape<'_>, full: Var, pos: usize) -> Result<Var> {
    tape.column(full, pos)
}
