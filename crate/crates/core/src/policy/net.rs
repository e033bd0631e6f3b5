use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sim::{Maneuver, Observation, FEATURES, MAX_NEIGHBORS};
use crate::tensor::{Checkpoint, Graph, ParamId, ParamStore, Var};

pub const INPUT_DIM: usize = FEATURES * (MAX_NEIGHBORS + 1);
pub const ACTIONS: usize = Maneuver::COUNT;

const EGO_SCALE: [f64; FEATURES] = [100.0, 10.0, 20.0, 20.0, 1.0, 1.0];
const NEIGHBOR_SCALE: [f64; FEATURES] = [50.0, 20.0, 20.0, 20.0, 1.0, 1.0];

/// Flattened, scaled network input for one observation.
pub fn features(obs: &Observation) -> Vec<f64> {
    let mut out = Vec::with_capacity(INPUT_DIM);
    out.extend(obs.ego.iter().zip(EGO_SCALE).map(|(v, s)| v / s));
    for col in &obs.neighbors {
        out.extend(col.iter().zip(NEIGHBOR_SCALE).map(|(v, s)| v / s));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Teacher encoder plus attention fusion. Off gives a plain actor-critic.
    pub fusion: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: INPUT_DIM,
            hidden: 128,
            heads: 2,
            head_dim: 128,
            fusion: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone)]
struct TeacherPath {
    enc: [Dense; 2],
    pi_hat: Dense,
    q_hat: Dense,
    heads: Vec<Head>,
    out: Dense,
}

#[derive(Debug, Clone)]
pub struct FusionPolicyNet {
    cfg: NetConfig,
    store: ParamStore,
    student: [Dense; 2],
    teacher: Option<TeacherPath>,
    pi: Dense,
    q: Dense,
    v: Dense,
}

/// Graph handles for one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub h_s: Var,
    pub h_t: Option<Var>,
    pub h: Var,
    pub logits: Var,
    pub log_pi: Var,
    pub pi: Var,
    pub q: Var,
    pub v: Var,
    pub teacher_log_pi: Option<Var>,
    pub teacher_q: Option<Var>,
    /// m×2 weights over the (teacher, student) tokens, one per head.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub pi: [f64; ACTIONS],
    pub q_values: [f64; ACTIONS],
    pub v: f64,
    pub teacher_pi_hat: Option<[f64; ACTIONS]>,
    pub teacher_q_hat: Option<[f64; ACTIONS]>,
    pub attention: Vec<[f64; 2]>,
}

impl PolicyOutput {
    pub fn greedy(&self) -> Maneuver {
        let mut best = 0;
        for a in 1..ACTIONS {
            if self.pi[a] > self.pi[best] {
                best = a;
            }
        }
        Maneuver::from_index(best).expect("index < ACTIONS")
    }
}

fn dense(store: &mut ParamStore, name: &str, i: usize, o: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Dense> {
    let w = store.add_weight(&format!("{name}.w"), i, o, rng)?;
    let b = if bias {
        Some(store.add_bias(&format!("{name}.b"), o)?)
    } else {
        None
    };
    Ok(Dense { w, b })
}

fn apply(g: &mut Graph, x: Var, d: &Dense) -> Result<Var> {
    let w = g.param(d.w);
    let y = g.matmul(x, w)?;
    match d.b {
        Some(b) => {
            let b = g.param(b);
            g.add_bias(y, b)
        }
        None => Ok(y),
    }
}

fn row<const N: usize>(v: &[f64]) -> [f64; N] {
    let mut out = [0.0; N];
    out.copy_from_slice(&v[..N]);
    out
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl FusionPolicyNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.hidden == 0 || cfg.heads == 0 || cfg.head_dim == 0 {
            return Err(Error::config("policy", "all network dimensions must be > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (i, h) = (cfg.input_dim, cfg.hidden);
        let student = [
            dense(&mut store, "f_s.0", i, h, true, &mut rng)?,
            dense(&mut store, "f_s.1", h, h, true, &mut rng)?,
        ];
        let teacher = if cfg.fusion {
            let enc = [
                dense(&mut store, "f_t.0", i, h, true, &mut rng)?,
                dense(&mut store, "f_t.1", h, h, true, &mut rng)?,
            ];
            let pi_hat = dense(&mut store, "teacher_pi", h, ACTIONS, true, &mut rng)?;
            let q_hat = dense(&mut store, "teacher_q", h, ACTIONS, true, &mut rng)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for k in 0..cfg.heads {
                heads.push(Head {
                    wq: store.add_weight(&format!("attn.{k}.q"), h, cfg.head_dim, &mut rng)?,
                    wk: store.add_weight(&format!("attn.{k}.k"), h, cfg.head_dim, &mut rng)?,
                    wv: store.add_weight(&format!("attn.{k}.v"), h, cfg.head_dim, &mut rng)?,
                });
            }
            let out = dense(&mut store, "attn.out", cfg.heads * cfg.head_dim, h, false, &mut rng)?;
            Some(TeacherPath {
                enc,
                pi_hat,
                q_hat,
                heads,
                out,
            })
        } else {
            None
        };
        let pi = dense(&mut store, "pi", h, ACTIONS, true, &mut rng)?;
        let q = dense(&mut store, "q", h, ACTIONS, true, &mut rng)?;
        let v = dense(&mut store, "v", h, 1, true, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            student,
            teacher,
            pi,
            q,
            v,
        })
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Hash of the layer layout; checkpoints from another layout are rejected.
    pub fn arch_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let desc = format!(
            "in={};hidden={};heads={};head_dim={};actions={};fusion={}",
            self.cfg.input_dim, self.cfg.hidden, self.cfg.heads, self.cfg.head_dim, ACTIONS, self.cfg.fusion
        );
        h = fnv1a(desc.as_bytes(), h);
        for (_, p) in self.store.iter() {
            h = fnv1a(p.name().as_bytes(), h);
            for d in p.value().shape() {
                h = fnv1a(&(*d as u64).to_le_bytes(), h);
            }
        }
        h
    }

    /// Batched forward pass over an m×input_dim input.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<ForwardVars> {
        let (_, cols) = g.dims(x);
        if cols != self.cfg.input_dim {
            return Err(Error::Shape {
                op: "policy input",
                lhs: vec![g.dims(x).0, cols],
                rhs: vec![self.cfg.input_dim],
            });
        }
        let a = apply(g, x, &self.student[0])?;
        let a = g.tanh(a);
        let a = apply(g, a, &self.student[1])?;
        let h_s = g.tanh(a);

        let (h, h_t, teacher_log_pi, teacher_q, attention) = match &self.teacher {
            None => (h_s, None, None, None, Vec::new()),
            Some(tp) => {
                let b = apply(g, x, &tp.enc[0])?;
                let b = g.tanh(b);
                let b = apply(g, b, &tp.enc[1])?;
                let h_t = g.tanh(b);
                let t_logits = apply(g, h_t, &tp.pi_hat)?;
                let t_log_pi = g.log_softmax(t_logits);
                let t_q = apply(g, h_t, &tp.q_hat)?;

                let scale = 1.0 / (self.cfg.head_dim as f64).sqrt();
                let mut outs: Option<Var> = None;
                let mut attention = Vec::with_capacity(tp.heads.len());
                for head in &tp.heads {
                    let wq = g.param(head.wq);
                    let wk = g.param(head.wk);
                    let wv = g.param(head.wv);
                    let q = g.matmul(h_s, wq)?;
                    let k_t = g.matmul(h_t, wk)?;
                    let k_s = g.matmul(h_s, wk)?;
                    let v_t = g.matmul(h_t, wv)?;
                    let v_s = g.matmul(h_s, wv)?;
                    let s_t = g.row_dot(q, k_t)?;
                    let s_s = g.row_dot(q, k_s)?;
                    let scores = g.concat_cols(s_t, s_s)?;
                    let scores = g.scale(scores, scale);
                    let alpha = g.softmax(scores);
                    let a_t = g.slice_cols(alpha, 0, 1)?;
                    let a_s = g.slice_cols(alpha, 1, 1)?;
                    let o_t = g.mul_col(a_t, v_t)?;
                    let o_s = g.mul_col(a_s, v_s)?;
                    let o = g.add(o_t, o_s)?;
                    outs = Some(match outs {
                        None => o,
                        Some(prev) => g.concat_cols(prev, o)?,
                    });
                    attention.push(alpha);
                }
                let cat = outs.expect("at least one head");
                let fused = apply(g, cat, &tp.out)?;
                let h = g.add(fused, h_s)?;
                (h, Some(h_t), Some(t_log_pi), Some(t_q), attention)
            }
        };

        let logits = apply(g, h, &self.pi)?;
        let log_pi = g.log_softmax(logits);
        let pi = g.softmax(logits);
        let q = apply(g, h, &self.q)?;
        let v = apply(g, h, &self.v)?;
        Ok(ForwardVars {
            h_s,
            h_t,
            h,
            logits,
            log_pi,
            pi,
            q,
            v,
            teacher_log_pi,
            teacher_q,
            attention,
        })
    }

    /// Forward pass for a single flattened, scaled input.
    pub fn forward(&self, input: &[f64]) -> Result<PolicyOutput> {
        let mut g = Graph::new(&self.store);
        let x = g.input(1, input.len(), input.to_vec())?;
        let fv = self.forward_graph(&mut g, x)?;
        let teacher_pi_hat = fv.teacher_log_pi.map(|lp| {
            let mut p = row::<ACTIONS>(g.value(lp));
            p.iter_mut().for_each(|v| *v = v.exp());
            p
        });
        Ok(PolicyOutput {
            pi: row(g.value(fv.pi)),
            q_values: row(g.value(fv.q)),
            v: g.value(fv.v)[0],
            teacher_pi_hat,
            teacher_q_hat: fv.teacher_q.map(|q| row(g.value(q))),
            attention: fv.attention.iter().map(|a| row(g.value(*a))).collect(),
        })
    }

    pub fn forward_obs(&self, obs: &Observation) -> Result<PolicyOutput> {
        self.forward(&features(obs))
    }

    /// State values for a batch of scaled inputs (m×input_dim, row-major).
    pub fn values(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let m = inputs.len() / self.cfg.input_dim;
        let mut g = Graph::new(&self.store);
        let x = g.input(m, self.cfg.input_dim, inputs.to_vec())?;
        let fv = self.forward_graph(&mut g, x)?;
        Ok(g.value(fv.v).to_vec())
    }

    /// Writes parameters, and optionally Adam state, into `ckpt`.
    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint, with_optimizer: bool) {
        for (_, p) in self.store.iter() {
            let shape = p.value().shape().to_vec();
            ckpt.push(format!("param/{}", p.name()), shape.clone(), p.value().data().to_vec());
            if with_optimizer {
                let st = p.adam();
                ckpt.push(format!("adam_m/{}", p.name()), shape.clone(), st.m.clone());
                ckpt.push(format!("adam_v/{}", p.name()), shape, st.v.clone());
                ckpt.push(format!("adam_step/{}", p.name()), vec![1], vec![st.step as f64]);
            }
        }
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        let mut c = Checkpoint::new(self.arch_hash());
        self.write_checkpoint(&mut c, with_optimizer);
        c
    }

    /// Restores parameters (and Adam state when present) from `ckpt`.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let expected = self.arch_hash();
        if ckpt.arch_hash != expected {
            return Err(Error::Architecture {
                expected,
                found: ckpt.arch_hash,
            });
        }
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = self.store.param(id).name().to_string();
            let shape = self.store.param(id).value().shape().to_vec();
            let fetch = |prefix: &str| -> Result<Option<Vec<f64>>> {
                match ckpt.get(&format!("{prefix}/{name}")) {
                    None => Ok(None),
                    Some(e) if e.shape == shape => Ok(Some(e.data.clone())),
                    Some(e) if prefix == "adam_step" && e.data.len() == 1 => Ok(Some(e.data.clone())),
                    Some(e) => Err(Error::Checkpoint(format!(
                        "{prefix}/{name} has shape {:?}, expected {shape:?}",
                        e.shape
                    ))),
                }
            };
            let value = fetch("param")?
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let m = fetch("adam_m")?;
            let v = fetch("adam_v")?;
            let step = fetch("adam_step")?;
            let p = self.store.param_mut(id);
            p.value_mut().data_mut().copy_from_slice(&value);
            if let (Some(m), Some(v), Some(step)) = (m, v, step) {
                let st = p.adam_mut();
                st.m = m;
                st.v = v;
                st.step = step[0] as u64;
            }
        }
        Ok(())
    }

    /// Sets every attention value projection to zero.
    pub fn zero_value_projections(&mut self) {
        if let Some(tp) = &self.teacher {
            let ids: Vec<ParamId> = tp.heads.iter().map(|h| h.wv).collect();
            for id in ids {
                self.store
                    .param_mut(id)
                    .value_mut()
                    .data_mut()
                    .iter_mut()
                    .for_each(|w| *w = 0.0);
            }
        }
    }

    pub fn teacher_head_ids(&self) -> Vec<ParamId> {
        match &self.teacher {
            None => Vec::new(),
            Some(tp) => [&tp.pi_hat, &tp.q_hat]
                .iter()
                .flat_map(|d| std::iter::once(d.w).chain(d.b))
                .collect(),
        }
    }

    pub fn teacher_encoder_ids(&self) -> Vec<ParamId> {
        match &self.teacher {
            None => Vec::new(),
            Some(tp) => tp
                .enc
                .iter()
                .flat_map(|d| std::iter::once(d.w).chain(d.b))
                .collect(),
        }
    }
}
