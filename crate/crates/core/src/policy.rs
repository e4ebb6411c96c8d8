//! Forward and backward policy networks over fingerprint features.
//!
//! Both nets share the trunk shape: `nbits + 1` sparse inputs (fingerprint
//! bits and a normalized step count) through two relu layers to a 128-wide
//! embedding. Building blocks are scored by a dot product between a query
//! and the rows of the building-block matrix, scaled by `1/sqrt(dim)`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chemgraph::Fingerprint;
use crate::mdp::{
    BackwardPolicy, BackwardRollout, EnvConfig, ForwardAction, ForwardPolicy, MdpError, MolRecord,
    State, Trajectory,
};
use crate::numerics::{
    read_checkpoint, write_checkpoint, Matrix, NumericsError, ParamStore, Scalar, SparseRows,
    Tape, Var,
};

pub const HIDDEN: usize = 128;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("checkpoint does not match this environment: {0}")]
    Mismatch(String),
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
}

impl From<PolicyError> for MdpError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Mdp(e) => e,
            PolicyError::Numerics(e) => MdpError::Numerics(e),
            other => MdpError::Config(other.to_string()),
        }
    }
}

/// How building blocks are represented in the partner and first-reactant heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BbMode {
    /// Fixed matrix of building-block fingerprints.
    #[default]
    Fingerprint,
    /// Learnable matrix, one row per building block.
    Embedding,
}

/// Shapes a net was built for; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub env_hash: u64,
    pub nbits: usize,
    pub max_len: usize,
    pub n_uni: usize,
    pub n_bi: usize,
    pub n_bbs: usize,
    pub mode: BbMode,
}

impl NetShape {
    pub fn of(env: &EnvConfig, mode: BbMode) -> Self {
        NetShape {
            env_hash: env.hash(),
            nbits: env.options().fp_nbits,
            max_len: env.max_len(),
            n_uni: env.uni_templates().len(),
            n_bi: env.bi_templates().len(),
            n_bbs: env.num_bbs(),
            mode,
        }
    }
}

fn init_store<T: Scalar>(layers: &[(&str, usize, usize, bool)], seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for &(name, rows, cols, random) in layers {
        let m = if random {
            let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("finite std");
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_f64(rows, cols, &data)
        } else {
            Matrix::zeros(rows, cols)
        };
        store.add(name, m);
    }
    store
}

fn trunk_layers(nbits: usize) -> Vec<(&'static str, usize, usize, bool)> {
    vec![
        ("trunk.w1", nbits + 1, HIDDEN, true),
        ("trunk.b1", 1, HIDDEN, false),
        ("trunk.w2", HIDDEN, HIDDEN, true),
        ("trunk.b2", 1, HIDDEN, false),
        ("trunk.w3", HIDDEN, HIDDEN, true),
        ("trunk.b3", 1, HIDDEN, false),
    ]
}

/// Sparse feature row: fingerprint bits and `count / max_len` in the last column.
pub fn features<T: Scalar>(fp: Option<&Fingerprint>, count: usize, nbits: usize, max_len: usize) -> Vec<(usize, T)> {
    let mut row: Vec<(usize, T)> = fp
        .map(|f| f.on_bits().into_iter().map(|b| (b, T::one())).collect())
        .unwrap_or_default();
    row.push((nbits, T::from_f64(count as f64 / max_len as f64)));
    row
}

/// Trunk variables on a tape.
#[derive(Debug, Clone, Copy)]
struct TrunkVars {
    w: [Var; 3],
    b: [Var; 3],
}

fn put<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str, trainable: bool) -> Var {
    let id = store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    if trainable {
        tape.param(store, id)
    } else {
        tape.constant(store.value(id).clone())
    }
}

fn load_trunk<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> TrunkVars {
    TrunkVars {
        w: ["trunk.w1", "trunk.w2", "trunk.w3"].map(|n| put(tape, store, n, trainable)),
        b: ["trunk.b1", "trunk.b2", "trunk.b3"].map(|n| put(tape, store, n, trainable)),
    }
}

fn run_trunk<T: Scalar>(tape: &mut Tape<T>, v: &TrunkVars, x: SparseRows<T>) -> Result<Var, NumericsError> {
    let h = tape.sparse_matmul(x, v.w[0])?;
    let h = tape.add(h, v.b[0])?;
    let h = tape.relu(h);
    let h = tape.matmul(h, v.w[1])?;
    let h = tape.add(h, v.b[1])?;
    let h = tape.relu(h);
    let h = tape.matmul(h, v.w[2])?;
    tape.add(h, v.b[2])
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Forward policy: stop / uni / bi logits, first-reactant and partner heads.
#[derive(Debug, Clone)]
pub struct ForwardNet<T> {
    pub shape: NetShape,
    pub params: ParamStore<T>,
    /// Building-block matrix; trained only in embedding mode.
    pub bb_matrix: ParamStore<T>,
    fp_rows: SparseRows<T>,
}

/// A forward net placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    trunk: TrunkVars,
    top_w: Var,
    top_b: Var,
    partner_w: Var,
    partner_b: Var,
    /// `H × |BB|` key matrices and `1 × |BB|` biases for the two BB heads.
    first_keys: Var,
    first_bias: Var,
    partner_keys: Var,
    partner_bias: Var,
}

fn fp_matrix_rows<T: Scalar>(env: &EnvConfig) -> SparseRows<T> {
    env.building_blocks()
        .iter()
        .map(|b| b.fp.on_bits().into_iter().map(|i| (i, T::one())).collect())
        .collect()
}

impl<T: Scalar> ForwardNet<T> {
    pub fn new(env: &EnvConfig, mode: BbMode, seed: u64) -> Self {
        let shape = NetShape::of(env, mode);
        let nbits = shape.nbits;
        let mut layers = trunk_layers(nbits);
        layers.extend([
            ("top.w", HIDDEN, 1 + shape.n_uni + shape.n_bi, false),
            ("top.b", 1, 1 + shape.n_uni + shape.n_bi, false),
            ("first.wq", nbits, HIDDEN, false),
            ("first.bq", nbits, 1, false),
            ("partner.w1", HIDDEN + shape.n_bi, HIDDEN, true),
            ("partner.b1", 1, HIDDEN, false),
            ("partner.wq", nbits, HIDDEN, false),
            ("partner.bq", nbits, 1, false),
        ]);
        let params = init_store(&layers, seed);
        let mut bb_matrix = ParamStore::new();
        let m = match mode {
            BbMode::Fingerprint => {
                let mut m = Matrix::zeros(shape.n_bbs, nbits);
                for (r, b) in env.building_blocks().iter().enumerate() {
                    for bit in b.fp.on_bits() {
                        m.set(r, bit, T::one());
                    }
                }
                m
            }
            BbMode::Embedding => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let data: Vec<f64> = (0..shape.n_bbs * nbits).map(|_| normal.sample(&mut rng)).collect();
                Matrix::from_f64(shape.n_bbs, nbits, &data)
            }
        };
        bb_matrix.add("bb_matrix", m);
        ForwardNet {
            fp_rows: fp_matrix_rows(env),
            shape,
            params,
            bb_matrix,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ForwardNet<U> {
        ForwardNet {
            shape: self.shape.clone(),
            params: self.params.cast(),
            bb_matrix: self.bb_matrix.cast(),
            fp_rows: self
                .fp_rows
                .iter()
                .map(|r| r.iter().map(|&(c, v)| (c, U::from_f64(v.as_f64()))).collect())
                .collect(),
        }
    }

    pub fn bb_trainable(&self) -> bool {
        self.shape.mode == BbMode::Embedding
    }

    /// Places the net on `tape`, as parameters when `trainable`.
    pub fn load(&self, tape: &mut Tape<T>, trainable: bool) -> Result<ForwardVars, NumericsError> {
        let p = &self.params;
        let trunk = load_trunk(tape, p, trainable);
        let top_w = put(tape, p, "top.w", trainable);
        let top_b = put(tape, p, "top.b", trainable);
        let partner_w = put(tape, p, "partner.w1", trainable);
        let partner_b = put(tape, p, "partner.b1", trainable);
        let mut keys = |wq: &str, bq: &str| -> Result<(Var, Var), NumericsError> {
            let wq = put(tape, p, wq, trainable);
            let bq = put(tape, p, bq, trainable);
            let (k, b) = match self.shape.mode {
                BbMode::Fingerprint => (
                    tape.sparse_matmul(self.fp_rows.clone(), wq)?,
                    tape.sparse_matmul(self.fp_rows.clone(), bq)?,
                ),
                BbMode::Embedding => {
                    let m = put(tape, &self.bb_matrix, "bb_matrix", trainable);
                    (tape.matmul(m, wq)?, tape.matmul(m, bq)?)
                }
            };
            Ok((tape.transpose(k), tape.transpose(b)))
        };
        let (first_keys, first_bias) = keys("first.wq", "first.bq")?;
        let (partner_keys, partner_bias) = keys("partner.wq", "partner.bq")?;
        Ok(ForwardVars {
            trunk,
            top_w,
            top_b,
            partner_w,
            partner_b,
            first_keys,
            first_bias,
            partner_keys,
            partner_bias,
        })
    }

    fn bb_logits(&self, tape: &mut Tape<T>, q: Var, keys: Var, bias: Var) -> Result<Var, NumericsError> {
        let l = tape.matmul(q, keys)?;
        let l = tape.add(l, bias)?;
        Ok(tape.scale(l, 1.0 / (self.shape.nbits as f64).sqrt()))
    }

    /// Embeddings for a batch of feature rows.
    pub fn embed(&self, tape: &mut Tape<T>, v: &ForwardVars, x: SparseRows<T>) -> Result<Var, NumericsError> {
        run_trunk(tape, &v.trunk, x)
    }

    /// Top-level logits for embeddings `e`.
    pub fn top_logits(&self, tape: &mut Tape<T>, v: &ForwardVars, e: Var) -> Result<Var, NumericsError> {
        linear(tape, e, v.top_w, v.top_b)
    }

    /// First-reactant logits for embeddings `e`.
    pub fn first_logits(&self, tape: &mut Tape<T>, v: &ForwardVars, e: Var) -> Result<Var, NumericsError> {
        self.bb_logits(tape, e, v.first_keys, v.first_bias)
    }

    /// Partner logits for embeddings `e` with bi-template slots `slots` (one per row).
    pub fn partner_logits(
        &self,
        tape: &mut Tape<T>,
        v: &ForwardVars,
        e: Var,
        slots: &[usize],
    ) -> Result<Var, NumericsError> {
        let mut onehot = Matrix::zeros(slots.len(), self.shape.n_bi);
        for (r, &s) in slots.iter().enumerate() {
            onehot.set(r, s, T::one());
        }
        let oh = tape.constant(onehot);
        let x = tape.concat_cols(&[e, oh])?;
        let z = linear(tape, x, v.partner_w, v.partner_b)?;
        let z = tape.relu(z);
        self.bb_logits(tape, z, v.partner_keys, v.partner_bias)
    }

    fn state_row(&self, state: &State) -> Vec<(usize, T)> {
        features(
            state.mol().map(|r| &r.fp),
            state.steps(),
            self.shape.nbits,
            self.shape.max_len,
        )
    }

    /// Per-trajectory `Σ log P_F` as an `n × 1` node, with per-action values.
    pub fn trajectory_logprobs(
        &self,
        tape: &mut Tape<T>,
        v: &ForwardVars,
        env: &EnvConfig,
        trajs: &[&Trajectory],
    ) -> Result<ForwardLogprobs, PolicyError> {
        let n = trajs.len();
        let mut first_at = Vec::with_capacity(n);
        let mut rows: SparseRows<T> = Vec::new();
        let mut masks = Vec::new();
        let mut top_at = Vec::new();
        let mut top_seg = Vec::new();
        let mut partner_src = Vec::new();
        let mut partner_slot = Vec::new();
        let mut partner_mask = Vec::new();
        let mut partner_at = Vec::new();
        let mut partner_seg = Vec::new();
        // (kind, index) per action: 0 first, 1 top, 2 top + partner
        let mut layout: Vec<Vec<(u8, usize)>> = Vec::with_capacity(n);
        for (j, t) in trajs.iter().enumerate() {
            let mut lay = Vec::with_capacity(t.actions.len());
            for (s, a) in t.states.iter().zip(&t.actions) {
                let m = env.forward_mask(s)?;
                if let ForwardAction::AddFirstReactant { bb } = a {
                    if m.first.as_ref().is_none_or(|f| !f[*bb]) {
                        return Err(MdpError::MaskedAction(format!("{a:?} at {s:?}")).into());
                    }
                    lay.push((0, first_at.len()));
                    first_at.push((0, *bb));
                    continue;
                }
                let slot = env.forward_slot(a).expect("not AddFirstReactant");
                if !m.top[slot] {
                    return Err(MdpError::MaskedAction(format!("{a:?} at {s:?}")).into());
                }
                let r = rows.len();
                rows.push(self.state_row(s));
                masks.extend_from_slice(&m.top);
                lay.push((1, top_at.len()));
                top_at.push((r, slot));
                top_seg.push(j);
                if let ForwardAction::ReactBi { template, bb } = a {
                    let pm = env.addreactant_mask(s, *template)?;
                    if !pm[*bb] {
                        return Err(MdpError::MaskedAction(format!("{a:?} at {s:?}")).into());
                    }
                    let p = partner_src.len();
                    partner_src.push(r);
                    partner_slot.push(env.local_index(*template));
                    partner_mask.extend(pm);
                    partner_at.push((p, *bb));
                    partner_seg.push(j);
                    lay.last_mut().expect("pushed").0 = 2;
                }
            }
            layout.push(lay);
        }
        let e0 = self.embed(tape, v, vec![self.state_row(&State::Empty)])?;
        let fl = self.first_logits(tape, v, e0)?;
        let fmask = env.forward_mask(&State::Empty)?.first.expect("s0 mask");
        let flp = tape.masked_log_softmax(fl, &fmask)?;
        let first = tape.pick(flp, &first_at)?;
        let mut total = first;
        let mut top = None;
        let mut partner = None;
        if !rows.is_empty() {
            let e = self.embed(tape, v, rows)?;
            let tl = self.top_logits(tape, v, e)?;
            let tlp = tape.masked_log_softmax(tl, &masks)?;
            let picks = tape.pick(tlp, &top_at)?;
            let sums = tape.segment_sum(picks, &top_seg, n)?;
            total = tape.add(total, sums)?;
            top = Some(picks);
            if !partner_src.is_empty() {
                let pe = tape.gather_rows(e, &partner_src)?;
                let pl = self.partner_logits(tape, v, pe, &partner_slot)?;
                let plp = tape.masked_log_softmax(pl, &partner_mask)?;
                let picks = tape.pick(plp, &partner_at)?;
                let sums = tape.segment_sum(picks, &partner_seg, n)?;
                total = tape.add(total, sums)?;
                partner = Some(picks);
            }
        }
        Ok(ForwardLogprobs {
            total,
            first,
            top,
            partner,
            layout,
        })
    }

    pub fn sampler(&self) -> Result<ForwardSampler<'_, T>, NumericsError> {
        let mut tape = Tape::new();
        let vars = self.load(&mut tape, false)?;
        let base = tape.len();
        Ok(ForwardSampler {
            net: self,
            tape,
            vars,
            base,
        })
    }

    pub fn manifest(&self) -> String {
        serde_json::to_string(&self.shape).expect("serializable")
    }

    /// Named tensors for checkpoints, BB matrix included.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = self
            .params
            .named_values()
            .into_iter()
            .map(|(n, m)| (format!("pf.{n}"), m))
            .collect();
        out.extend(
            self.bb_matrix
                .named_values()
                .into_iter()
                .map(|(n, m)| (format!("pf.{n}"), m)),
        );
        out
    }

    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Matrix<T>>) -> Result<(), PolicyError> {
        let strip = |prefix: &str| -> BTreeMap<String, Matrix<T>> {
            tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        let all = strip("pf.");
        self.params.load_values(&all)?;
        self.bb_matrix.load_values(&all)?;
        Ok(())
    }
}

/// Result of [`ForwardNet::trajectory_logprobs`].
#[derive(Debug, Clone)]
pub struct ForwardLogprobs {
    /// `n × 1` per-trajectory sums.
    pub total: Var,
    first: Var,
    top: Option<Var>,
    partner: Option<Var>,
    layout: Vec<Vec<(u8, usize)>>,
}

impl ForwardLogprobs {
    /// Per-action log-probabilities of each trajectory, summed in f64.
    pub fn per_action<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Vec<f64>> {
        let get = |v: Option<Var>, i: usize| tape.value(v.expect("present")).get(i, 0).as_f64();
        let mut partner_i = 0;
        self.layout
            .iter()
            .map(|lay| {
                lay.iter()
                    .map(|&(kind, i)| match kind {
                        0 => get(Some(self.first), i),
                        1 => get(self.top, i),
                        _ => {
                            let x = get(self.top, i) + get(self.partner, partner_i);
                            partner_i += 1;
                            x
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Inference wrapper over a [`ForwardNet`]; reuses one tape across states.
pub struct ForwardSampler<'a, T> {
    net: &'a ForwardNet<T>,
    tape: Tape<T>,
    vars: ForwardVars,
    base: usize,
}

fn row_out<T: Scalar>(tape: &Tape<T>, v: Var) -> Vec<f32> {
    tape.value(v).row(0).iter().map(|x| x.as_f64() as f32).collect()
}

impl<T: Scalar> ForwardSampler<'_, T> {
    fn with_tape<F>(&mut self, f: F) -> Result<Vec<f32>, MdpError>
    where
        F: FnOnce(&ForwardNet<T>, &mut Tape<T>, &ForwardVars) -> Result<Var, NumericsError>,
    {
        let out = f(self.net, &mut self.tape, &self.vars).map(|v| row_out(&self.tape, v));
        self.tape.truncate(self.base);
        Ok(out?)
    }
}

impl<T: Scalar> ForwardPolicy for ForwardSampler<'_, T> {
    fn top(&mut self, state: &State, mask: &[bool]) -> Result<Vec<f32>, MdpError> {
        let row = self.net.state_row(state);
        self.with_tape(|net, tape, v| {
            let e = net.embed(tape, v, vec![row])?;
            let l = net.top_logits(tape, v, e)?;
            tape.masked_log_softmax(l, mask)
        })
    }

    fn first(&mut self, mask: &[bool]) -> Result<Vec<f32>, MdpError> {
        let row = self.net.state_row(&State::Empty);
        self.with_tape(|net, tape, v| {
            let e = net.embed(tape, v, vec![row])?;
            let l = net.first_logits(tape, v, e)?;
            tape.masked_log_softmax(l, mask)
        })
    }

    fn partner(&mut self, state: &State, slot: usize, mask: &[bool]) -> Result<Vec<f32>, MdpError> {
        let row = self.net.state_row(state);
        self.with_tape(|net, tape, v| {
            let e = net.embed(tape, v, vec![row])?;
            let l = net.partner_logits(tape, v, e, &[slot])?;
            tape.masked_log_softmax(l, mask)
        })
    }
}

/// Backward policy over `[uni.., bi.., remove]`.
#[derive(Debug, Clone)]
pub struct BackwardNet<T> {
    pub shape: NetShape,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardVars {
    trunk: TrunkVars,
    head_w: Var,
    head_b: Var,
}

impl<T: Scalar> BackwardNet<T> {
    pub fn new(env: &EnvConfig, seed: u64) -> Self {
        let shape = NetShape::of(env, BbMode::Fingerprint);
        let width = shape.n_uni + shape.n_bi + 1;
        let mut layers = trunk_layers(shape.nbits);
        layers.extend([("head.w", HIDDEN, width, false), ("head.b", 1, width, false)]);
        BackwardNet {
            params: init_store(&layers, seed),
            shape,
        }
    }

    pub fn cast<U: Scalar>(&self) -> BackwardNet<U> {
        BackwardNet {
            shape: self.shape.clone(),
            params: self.params.cast(),
        }
    }

    pub fn load(&self, tape: &mut Tape<T>, trainable: bool) -> BackwardVars {
        BackwardVars {
            trunk: load_trunk(tape, &self.params, trainable),
            head_w: put(tape, &self.params, "head.w", trainable),
            head_b: put(tape, &self.params, "head.b", trainable),
        }
    }

    fn row(&self, rec: &MolRecord, unwound: usize) -> Vec<(usize, T)> {
        features(Some(&rec.fp), unwound, self.shape.nbits, self.shape.max_len)
    }

    pub fn logits(&self, tape: &mut Tape<T>, v: &BackwardVars, x: SparseRows<T>) -> Result<Var, NumericsError> {
        let e = run_trunk(tape, &v.trunk, x)?;
        linear(tape, e, v.head_w, v.head_b)
    }

    /// `Σ log P_B` per decision sequence. Each step is `(molecule, unwound,
    /// slot, number of parent choices)`; `seg` assigns steps to sequences.
    fn sequence_logprobs(
        &self,
        tape: &mut Tape<T>,
        v: &BackwardVars,
        env: &EnvConfig,
        steps: &[(&MolRecord, usize, usize)],
        seg: &[usize],
        n: usize,
    ) -> Result<Var, PolicyError> {
        let mut rows = Vec::with_capacity(steps.len());
        let mut masks = Vec::new();
        let mut at = Vec::with_capacity(steps.len());
        let mut extra = Vec::with_capacity(n);
        extra.resize(n, 0.0);
        for (r, &(rec, u, slot)) in steps.iter().enumerate() {
            let m = env.backward_mask(rec, u);
            if !m.top[slot] {
                return Err(MdpError::MaskedAction(format!(
                    "backward slot {slot} at {} (unwound {u})",
                    rec.smiles
                ))
                .into());
            }
            rows.push(self.row(rec, u));
            masks.extend_from_slice(&m.top);
            at.push((r, slot));
            extra[seg[r]] -= (m.choices[slot] as f64).ln();
        }
        let extra = tape.constant(Matrix::from_f64(n, 1, &extra));
        if rows.is_empty() {
            return Ok(extra);
        }
        let l = self.logits(tape, v, rows)?;
        let lp = tape.masked_log_softmax(l, &masks)?;
        let picks = tape.pick(lp, &at)?;
        let sums = tape.segment_sum(picks, seg, n)?;
        Ok(tape.add(sums, extra)?)
    }

    /// Per-trajectory `Σ log P_B` of undoing each forward trajectory.
    pub fn trajectory_logprobs(
        &self,
        tape: &mut Tape<T>,
        v: &BackwardVars,
        env: &EnvConfig,
        trajs: &[&Trajectory],
    ) -> Result<Var, PolicyError> {
        let mut steps = Vec::new();
        let mut seg = Vec::new();
        for (j, t) in trajs.iter().enumerate() {
            let k = t.num_reactions();
            for (i, a) in t.actions.iter().enumerate() {
                let (prev, next) = (&t.states[i], &t.states[i + 1]);
                let Some(rev) = env.reverse_of(prev, a, next)? else {
                    continue;
                };
                let rec = next.mol().expect("molecule state");
                steps.push((rec.as_ref(), k - next.steps(), env.backward_slot(&rev)));
                seg.push(j);
            }
        }
        self.sequence_logprobs(tape, v, env, &steps, &seg, trajs.len())
    }

    /// Per-rollout `Σ log P_B` of backward rollouts.
    pub fn rollout_logprobs(
        &self,
        tape: &mut Tape<T>,
        v: &BackwardVars,
        env: &EnvConfig,
        rollouts: &[&BackwardRollout],
    ) -> Result<Var, PolicyError> {
        let mut steps = Vec::new();
        let mut seg = Vec::new();
        for (j, r) in rollouts.iter().enumerate() {
            for ((rec, u), a) in r.states.iter().zip(&r.actions) {
                steps.push((rec.as_ref(), *u, env.backward_slot(a)));
                seg.push(j);
            }
        }
        self.sequence_logprobs(tape, v, env, &steps, &seg, rollouts.len())
    }

    pub fn sampler(&self) -> BackwardSampler<'_, T> {
        let mut tape = Tape::new();
        let vars = self.load(&mut tape, false);
        let base = tape.len();
        BackwardSampler {
            net: self,
            tape,
            vars,
            base,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        self.params
            .named_values()
            .into_iter()
            .map(|(n, m)| (format!("pb.{n}"), m))
            .collect()
    }

    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Matrix<T>>) -> Result<(), PolicyError> {
        let values: BTreeMap<String, Matrix<T>> = tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("pb.").map(|s| (s.to_string(), v.clone())))
            .collect();
        self.params.load_values(&values)?;
        Ok(())
    }
}

pub struct BackwardSampler<'a, T> {
    net: &'a BackwardNet<T>,
    tape: Tape<T>,
    vars: BackwardVars,
    base: usize,
}

impl<T: Scalar> BackwardPolicy for BackwardSampler<'_, T> {
    fn top(&mut self, rec: &MolRecord, unwound: usize, mask: &[bool]) -> Result<Vec<f32>, MdpError> {
        let row = self.net.row(rec, unwound);
        let out = self
            .net
            .logits(&mut self.tape, &self.vars, vec![row])
            .and_then(|l| self.tape.masked_log_softmax(l, mask))
            .map(|v| row_out(&self.tape, v));
        self.tape.truncate(self.base);
        Ok(out?)
    }
}

/// Everything a trained model needs to resume: P_F, P_B, log Z.
#[derive(Debug, Clone)]
pub struct Model {
    pub forward: ForwardNet<f32>,
    pub backward: BackwardNet<f32>,
    pub log_z: ParamStore<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    shape: NetShape,
    step: u64,
    extra: serde_json::Value,
}

impl Model {
    pub fn new(env: &EnvConfig, mode: BbMode, seed: u64) -> Self {
        let mut log_z = ParamStore::new();
        log_z.add("log_z", Matrix::scalar(0.0));
        Model {
            forward: ForwardNet::new(env, mode, seed),
            backward: BackwardNet::new(env, seed.wrapping_add(1)),
            log_z,
        }
    }

    pub fn log_z_value(&self) -> f32 {
        self.log_z.value(self.log_z.id("log_z").expect("log_z")).get(0, 0)
    }

    /// Checkpoint bytes; `extra` is stored verbatim in the manifest.
    pub fn to_bytes(&self, step: u64, extra: serde_json::Value) -> Vec<u8> {
        let manifest = Manifest {
            shape: self.forward.shape.clone(),
            step,
            extra,
        };
        let mut tensors = self.forward.tensors();
        tensors.extend(self.backward.tensors());
        tensors.extend(
            self.log_z
                .named_values()
                .into_iter()
                .map(|(n, m)| (n.to_string(), m)),
        );
        let refs: Vec<(String, &Matrix<f32>)> = tensors;
        write_checkpoint(&serde_json::to_string(&manifest).expect("serializable"), &refs)
    }

    /// Loads a checkpoint into a model built for `env`, refusing mismatches.
    /// Returns the stored step and extra manifest data.
    pub fn from_bytes(env: &EnvConfig, bytes: &[u8]) -> Result<(Self, u64, serde_json::Value), PolicyError> {
        let ck = read_checkpoint(bytes)?;
        let manifest: Manifest =
            serde_json::from_str(&ck.manifest).map_err(|e| PolicyError::Manifest(e.to_string()))?;
        let want = NetShape::of(env, manifest.shape.mode);
        if want != manifest.shape {
            return Err(PolicyError::Mismatch(format!(
                "checkpoint {:?}, environment {:?}",
                manifest.shape, want
            )));
        }
        let mut model = Model::new(env, manifest.shape.mode, 0);
        model.forward.load_tensors(&ck.tensors)?;
        model.backward.load_tensors(&ck.tensors)?;
        model.log_z.load_values(&ck.tensors)?;
        Ok((model, manifest.step, manifest.extra))
    }
}
