//! Per-node encoding: feature fusion followed by the gated multi-scale
//! temporal convolution that yields a node's temporal representation `E`.

use rand::Rng;

use crate::error::{GaiaError, Result};
use crate::params::{conv_kernel, xavier, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// One node's inputs as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct NodeVars {
    /// `[T × 1]`
    pub gmv: Var,
    /// `[T × D_T]`
    pub temporal: Var,
    /// `[1 × D_S]`
    pub static_feats: Var,
}

/// Weights of the feature fusion layer.
///
/// Projection matrices are stored input-major (`W_T` is `[D_T × C]`) so that a
/// `[T × D_T]` feature block multiplies on the left. `b_t` and `b_f` hold one
/// bias row per time position.
#[derive(Clone, Debug)]
pub struct FflParams {
    pub w_i: ParamId,
    pub b_i: ParamId,
    pub w_t: ParamId,
    pub b_t: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
}

impl FflParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        t_max: usize,
        d_t: usize,
        d_s: usize,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        FflParams {
            w_i: store.add("ffl.w_i", xavier(&[1, c], 1, c, rng)),
            b_i: store.add("ffl.b_i", Tensor::zeros(&[c])),
            w_t: store.add("ffl.w_t", xavier(&[d_t, c], d_t, c, rng)),
            b_t: store.add("ffl.b_t", Tensor::zeros(&[t_max, c])),
            w_s: store.add("ffl.w_s", xavier(&[d_s, c], d_s, c, rng)),
            b_s: store.add("ffl.b_s", Tensor::zeros(&[c])),
            w_f: store.add("ffl.w_f", xavier(&[3 * c, c], 3 * c, c, rng)),
            b_f: store.add("ffl.b_f", Tensor::zeros(&[t_max, c])),
        }
    }
}

/// The single-projection fallback used when feature fusion is ablated.
#[derive(Clone, Debug)]
pub struct PlainFusionParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl PlainFusionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        d_t: usize,
        d_s: usize,
        rng: &mut R,
    ) -> Self {
        let d_in = 1 + d_t + d_s;
        PlainFusionParams {
            w: store.add("fusion.w", xavier(&[d_in, channels], d_in, channels, rng)),
            b: store.add("fusion.b", Tensor::zeros(&[channels])),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Ffl(FflParams),
    Plain(PlainFusionParams),
}

/// Static features projected once and repeated over every time row.
fn static_rows(tape: &mut Tape, sf: Var, w: Var, b: Var, rows: usize) -> Result<Var> {
    let proj = tape.matmul(sf, w)?;
    let c = tape.shape(proj)[1];
    let proj = tape.reshape(proj, &[c])?;
    let proj = tape.add_row_bias(proj, b)?;
    Ok(tape.broadcast_rows(proj, rows)?)
}

/// Fused per-timestep features `S = W_F [z̃ ‖ f̃_T ‖ f̃_S] + b_F`, shape `[T × C]`.
pub fn ffl_forward(tape: &mut Tape, bound: &Bound, p: &FflParams, x: &NodeVars) -> Result<Var> {
    let t_len = tape.shape(x.gmv)[0];
    let z = tape.matmul(x.gmv, bound.var(p.w_i))?;
    let z = tape.add_row_bias(z, bound.var(p.b_i))?;
    let ft = tape.matmul(x.temporal, bound.var(p.w_t))?;
    let ft = tape.add(ft, bound.var(p.b_t))?;
    let fs = static_rows(tape, x.static_feats, bound.var(p.w_s), bound.var(p.b_s), t_len)?;
    let cat = tape.concat_lastdim(&[z, ft, fs])?;
    let s = tape.matmul(cat, bound.var(p.w_f))?;
    Ok(tape.add(s, bound.var(p.b_f))?)
}

/// Raw features concatenated and projected once with a shared bias.
pub fn plain_fusion_forward(
    tape: &mut Tape,
    bound: &Bound,
    p: &PlainFusionParams,
    x: &NodeVars,
) -> Result<Var> {
    let t_len = tape.shape(x.gmv)[0];
    let d_s = tape.shape(x.static_feats)[1];
    let sf = tape.reshape(x.static_feats, &[d_s])?;
    let sf = tape.broadcast_rows(sf, t_len)?;
    let cat = tape.concat_lastdim(&[x.gmv, x.temporal, sf])?;
    let s = tape.matmul(cat, bound.var(p.w))?;
    Ok(tape.add_row_bias(s, bound.var(p.b))?)
}

pub fn fusion_forward(tape: &mut Tape, bound: &Bound, p: &Fusion, x: &NodeVars) -> Result<Var> {
    match p {
        Fusion::Ffl(p) => ffl_forward(tape, bound, p, x),
        Fusion::Plain(p) => plain_fusion_forward(tape, bound, p, x),
    }
}

/// Coupled capture/denoise kernel groups.
#[derive(Clone, Debug)]
pub struct TelParams {
    pub capture: Vec<ParamId>,
    pub denoise: Vec<ParamId>,
}

impl TelParams {
    /// Kernel group `k = 1..=K` with widths `2^k`, each producing `C/K` channels.
    pub fn new_group<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        groups: usize,
        t_max: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(GaiaError::Config(format!(
                "channels ({channels}) must split evenly into {groups} kernel groups"
            )));
        }
        if groups >= usize::BITS as usize || (1usize << groups) > t_max {
            return Err(GaiaError::Config(format!("widest kernel 2^{groups} exceeds T_max={t_max}")));
        }
        let out = channels / groups;
        let mut capture = Vec::with_capacity(groups);
        let mut denoise = Vec::with_capacity(groups);
        for k in 1..=groups {
            let w = 1 << k;
            capture.push(store.add(format!("tel.capture.{k}"), conv_kernel(w, channels, out, rng)));
            denoise.push(store.add(format!("tel.denoise.{k}"), conv_kernel(w, channels, out, rng)));
        }
        Ok(TelParams { capture, denoise })
    }

    /// One capture and one denoise kernel of the given width, `C` outputs each.
    pub fn new_single<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        TelParams {
            capture: vec![store.add("tel.capture.1", conv_kernel(width, channels, channels, rng))],
            denoise: vec![store.add("tel.denoise.1", conv_kernel(width, channels, channels, rng))],
        }
    }
}

fn conv_group(tape: &mut Tape, bound: &Bound, kernels: &[ParamId], s: Var) -> Result<Var> {
    let outs = kernels
        .iter()
        .map(|&k| tape.conv1d_causal(s, bound.var(k)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    Ok(tape.concat_lastdim(&outs)?)
}

/// `E = ReLU(S^C) ⊙ Sigmoid(S^D)`, shape `[T × C]`.
pub fn tel_forward(tape: &mut Tape, bound: &Bound, p: &TelParams, s: Var) -> Result<Var> {
    let c = tape.shape(s)[1];
    let sc = conv_group(tape, bound, &p.capture, s)?;
    let sd = conv_group(tape, bound, &p.denoise, s)?;
    if tape.shape(sc)[1] != c || tape.shape(sd)[1] != c {
        return Err(GaiaError::Config(format!(
            "kernel group yields {} channels, expected {c}",
            tape.shape(sc)[1]
        )));
    }
    let gate = tape.relu(sc);
    let filt = tape.sigmoid(sd);
    Ok(tape.hadamard(gate, filt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(tape: &mut Tape, t: usize, d_t: usize, d_s: usize, rng: &mut ChaCha8Rng) -> NodeVars {
        NodeVars {
            gmv: tape.constant(Tensor::uniform(&[t, 1], 2.0, rng)),
            temporal: tape.constant(Tensor::uniform(&[t, d_t], 1.0, rng)),
            static_feats: tape.constant(Tensor::uniform(&[1, d_s], 1.0, rng)),
        }
    }

    #[test]
    fn zero_everything_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = FflParams::new(&mut store, 4, 5, 2, 3, &mut rng);
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = NodeVars {
            gmv: tape.constant(Tensor::zeros(&[5, 1])),
            temporal: tape.constant(Tensor::zeros(&[5, 2])),
            static_feats: tape.constant(Tensor::zeros(&[1, 3])),
        };
        let s = ffl_forward(&mut tape, &bound, &p, &x).unwrap();
        assert_eq!(tape.value(s), &Tensor::zeros(&[5, 4]));
    }

    #[test]
    fn block_identity_isolates_gmv_lift() {
        let (c, t) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = FflParams::new(&mut store, c, t, 2, 2, &mut rng);
        let wf = store.get_mut(p.w_f);
        wf.data_mut().fill(0.0);
        for i in 0..c {
            wf.data_mut()[i * c + i] = 1.0;
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = inputs(&mut tape, t, 2, 2, &mut rng);
        let s = ffl_forward(&mut tape, &bound, &p, &x).unwrap();
        let w_i = store.get(p.w_i).data();
        let z = tape.value(x.gmv).data();
        for ti in 0..t {
            for ci in 0..c {
                assert!((tape.value(s).at(ti, ci) - z[ti] * w_i[ci]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sigmoid_half_when_denoise_is_zero() {
        let (c, t) = (4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = TelParams::new_group(&mut store, c, 2, t, &mut rng).unwrap();
        for &d in &p.denoise {
            store.get_mut(d).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let s = tape.constant(Tensor::uniform(&[t, c], 1.0, &mut rng));
        let e = tel_forward(&mut tape, &bound, &p, s).unwrap();
        let sc = {
            let a = tape.conv1d_causal(s, bound.var(p.capture[0])).unwrap();
            let b = tape.conv1d_causal(s, bound.var(p.capture[1])).unwrap();
            tape.concat_lastdim(&[a, b]).unwrap()
        };
        for (ev, sv) in tape.value(e).data().iter().zip(tape.value(sc).data()) {
            assert!((ev - 0.5 * sv.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_capture_kills_output() {
        let (c, t) = (2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = TelParams::new_group(&mut store, c, 2, t, &mut rng).unwrap();
        for &k in &p.capture {
            store.get_mut(k).data_mut().fill(-1.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        // positive inputs through all-negative kernels
        let s = tape.constant(Tensor::full(&[t, c], 0.7));
        let e = tel_forward(&mut tape, &bound, &p, s).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_split_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        assert!(TelParams::new_group(&mut store, 32, 3, 24, &mut rng).is_err());
        assert!(TelParams::new_group(&mut store, 32, 5, 24, &mut rng).is_err());
        let p = TelParams::new_group(&mut store, 32, 4, 24, &mut rng).unwrap();
        assert_eq!(store.get(p.capture[3]).shape(), &[16, 32, 8]);
    }
}
