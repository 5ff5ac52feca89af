//! Float-precision temporal fusion head: a GRU over per-clip embeddings and
//! a sigmoid FC regressor producing normalized eye-center coordinates.
//!
//! The backbone may run fully quantized; this head stays in f32 on purpose
//! (it is executed host-side, not on the integer pipeline).

use crate::error::{Error, Result};

/// Standard GRU gate weights for input size `input_size` (D) and hidden size
/// `hidden` (Hd). `w_*` are Hd x D, `u_*` are Hd x Hd, row-major by hidden
/// unit.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub input_size: usize,
    pub hidden: usize,
    pub w_z: Vec<f32>,
    pub w_r: Vec<f32>,
    pub w_h: Vec<f32>,
    pub u_z: Vec<f32>,
    pub u_r: Vec<f32>,
    pub u_h: Vec<f32>,
    pub b_z: Vec<f32>,
    pub b_r: Vec<f32>,
    pub b_h: Vec<f32>,
}

impl GruWeights {
    /// All-zero weights (useful fixed point: h' = 0.5 * h).
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        GruWeights {
            input_size,
            hidden,
            w_z: vec![0.0; hidden * input_size],
            w_r: vec![0.0; hidden * input_size],
            w_h: vec![0.0; hidden * input_size],
            u_z: vec![0.0; hidden * hidden],
            u_r: vec![0.0; hidden * hidden],
            u_h: vec![0.0; hidden * hidden],
            b_z: vec![0.0; hidden],
            b_r: vec![0.0; hidden],
            b_h: vec![0.0; hidden],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, hd) = (self.input_size, self.hidden);
        if d == 0 || hd == 0 {
            return Err(Error::shape("gru", "zero-sized gru dimensions"));
        }
        for (name, mat, len) in [
            ("w_z", &self.w_z, hd * d),
            ("w_r", &self.w_r, hd * d),
            ("w_h", &self.w_h, hd * d),
            ("u_z", &self.u_z, hd * hd),
            ("u_r", &self.u_r, hd * hd),
            ("u_h", &self.u_h, hd * hd),
            ("b_z", &self.b_z, hd),
            ("b_r", &self.b_r, hd),
            ("b_h", &self.b_h, hd),
        ] {
            if mat.len() != len {
                return Err(Error::shape(
                    "gru",
                    format!("{name} has {} values, expected {len}", mat.len()),
                ));
            }
        }
        Ok(())
    }
}

/// GRU hidden state; zero-initialized at the start of every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub h: Vec<f32>,
}

impl HeadState {
    pub fn zeros(hidden: usize) -> Self {
        HeadState {
            h: vec![0.0; hidden],
        }
    }
}

/// FC regressor: 2 x Hd weight matrix plus bias, squashed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct FcWeights {
    pub hidden: usize,
    pub w: Vec<f32>,
    pub b: [f32; 2],
}

impl FcWeights {
    pub fn zeros(hidden: usize) -> Self {
        FcWeights {
            hidden,
            w: vec![0.0; 2 * hidden],
            b: [0.0; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() != 2 * self.hidden {
            return Err(Error::shape(
                "fc",
                format!("weight has {} values, expected {}", self.w.len(), 2 * self.hidden),
            ));
        }
        Ok(())
    }
}

/// GRU plus FC weights of one model head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub gru: GruWeights,
    pub fc: FcWeights,
}

impl HeadWeights {
    pub fn validate(&self) -> Result<()> {
        self.gru.validate()?;
        self.fc.validate()?;
        if self.fc.hidden != self.gru.hidden {
            return Err(Error::shape("fc", "fc hidden size differs from gru"));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn mat_vec(mat: &[f32], rows: usize, cols: usize, v: &[f32], out: &mut [f32]) {
    for r in 0..rows {
        let row = &mat[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for (w, x) in row.iter().zip(v) {
            acc += w * x;
        }
        out[r] += acc;
    }
}

/// One GRU update:
/// z = sig(W_z x + U_z h + b_z), r = sig(W_r x + U_r h + b_r),
/// h~ = tanh(W_h x + r .* (U_h h) + b_h), h' = (1-z) .* h + z .* h~.
pub fn gru_step(x: &[f32], state: &HeadState, w: &GruWeights) -> Result<HeadState> {
    w.validate()?;
    if x.len() != w.input_size {
        return Err(Error::shape(
            "gru",
            format!("input length {} != {}", x.len(), w.input_size),
        ));
    }
    if state.h.len() != w.hidden {
        return Err(Error::shape(
            "gru",
            format!("state length {} != {}", state.h.len(), w.hidden),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) || state.h.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("non-finite value entering gru_step"));
    }
    let hd = w.hidden;
    let d = w.input_size;

    let mut pre_z = w.b_z.clone();
    mat_vec(&w.w_z, hd, d, x, &mut pre_z);
    mat_vec(&w.u_z, hd, hd, &state.h, &mut pre_z);

    let mut pre_r = w.b_r.clone();
    mat_vec(&w.w_r, hd, d, x, &mut pre_r);
    mat_vec(&w.u_r, hd, hd, &state.h, &mut pre_r);

    // U_h h first, so the reset gate can scale it before the tanh.
    let mut uh = vec![0.0f32; hd];
    mat_vec(&w.u_h, hd, hd, &state.h, &mut uh);
    let mut pre_h = w.b_h.clone();
    mat_vec(&w.w_h, hd, d, x, &mut pre_h);

    let mut h_next = vec![0.0f32; hd];
    for i in 0..hd {
        let z = sigmoid(pre_z[i]);
        let r = sigmoid(pre_r[i]);
        let cand = (pre_h[i] + r * uh[i]).tanh();
        h_next[i] = (1.0 - z) * state.h[i] + z * cand;
    }
    debug_assert!(h_next.iter().all(|v| v.is_finite()));
    Ok(HeadState { h: h_next })
}

/// Regress normalized coordinates (u, v) in [0,1] from the hidden state.
pub fn fc_regress(h: &[f32], fc: &FcWeights) -> Result<(f64, f64)> {
    fc.validate()?;
    if h.len() != fc.hidden {
        return Err(Error::shape(
            "fc",
            format!("hidden length {} != {}", h.len(), fc.hidden),
        ));
    }
    let mut pre = [fc.b[0], fc.b[1]];
    for (r, acc) in pre.iter_mut().enumerate() {
        let row = &fc.w[r * fc.hidden..(r + 1) * fc.hidden];
        for (w, x) in row.iter().zip(h) {
            *acc += w * x;
        }
    }
    Ok((sigmoid(pre[0]) as f64, sigmoid(pre[1]) as f64))
}

/// Scale normalized coordinates to pixels: px = u * width, py = v * height.
pub fn denormalize(u: f64, v: f64, height: u16, width: u16) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::argument(format!(
            "normalized coordinates ({u},{v}) outside [0,1]"
        )));
    }
    Ok((u * width as f64, v * height as f64))
}

/// Which backbone execution the sequence runner uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackbonePath {
    Sparse,
    /// Dense reference execution (full conv work, submanifold-masked).
    Dense,
}

/// Run a clip sequence end to end: backbone embedding per clip, GRU state
/// threaded through in order, one (px, py) prediction per clip. The hidden
/// state starts at zero; resetting between sequences is the caller's choice
/// of where a sequence begins.
pub fn run_sequence(
    model: &crate::model::Model,
    clips: &[crate::tensor::SparseTensor<f32>],
) -> Result<Vec<(f64, f64)>> {
    run_sequence_with(model, clips, BackbonePath::Sparse).map(|(p, _)| p)
}

/// `run_sequence` with an explicit backbone path; also returns the summed
/// backbone MAC count of the chosen path.
pub fn run_sequence_with(
    model: &crate::model::Model,
    clips: &[crate::tensor::SparseTensor<f32>],
    path: BackbonePath,
) -> Result<(Vec<(f64, f64)>, u64)> {
    model.validate()?;
    let mut state = HeadState::zeros(model.head.gru.hidden);
    let mut predictions = Vec::with_capacity(clips.len());
    let mut macs = 0u64;
    for clip in clips {
        let embedding = match path {
            BackbonePath::Sparse => {
                let (e, stats) = crate::engine::run_backbone(model, clip)?;
                macs += stats.total_macs();
                e
            }
            BackbonePath::Dense => {
                let (e, m) = crate::dense::run_backbone_dense(model, clip)?;
                macs += m;
                e
            }
        };
        state = gru_step(&embedding, &state, &model.head.gru)?;
        let (u, v) = fc_regress(&state.h, &model.head.fc)?;
        predictions.push(denormalize(u, v, model.voxel.height, model.voxel.width)?);
    }
    Ok((predictions, macs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_zero_weights_halves_state() {
        let w = GruWeights::zeros(1, 1);
        let state = HeadState { h: vec![0.8] };
        let next = gru_step(&[0.0], &state, &w).unwrap();
        assert!((next.h[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn gru_zero_everything_is_fixed_point() {
        let w = GruWeights::zeros(3, 2);
        let state = HeadState::zeros(2);
        let next = gru_step(&[0.0; 3], &state, &w).unwrap();
        assert_eq!(next.h, vec![0.0, 0.0]);
    }

    #[test]
    fn gru_matches_independent_gate_evaluation() {
        // Oracle: direct f64 evaluation of the three gate equations with a
        // different loop structure.
        let d = 4;
        let hd = 3;
        let mut state = 0xfeed_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        };
        let rand_vec = |n: usize, f: &mut dyn FnMut() -> f64| -> Vec<f32> {
            (0..n).map(|_| f() as f32).collect()
        };
        for _ in 0..50 {
            let w = GruWeights {
                input_size: d,
                hidden: hd,
                w_z: rand_vec(hd * d, &mut next),
                w_r: rand_vec(hd * d, &mut next),
                w_h: rand_vec(hd * d, &mut next),
                u_z: rand_vec(hd * hd, &mut next),
                u_r: rand_vec(hd * hd, &mut next),
                u_h: rand_vec(hd * hd, &mut next),
                b_z: rand_vec(hd, &mut next),
                b_r: rand_vec(hd, &mut next),
                b_h: rand_vec(hd, &mut next),
            };
            let x = rand_vec(d, &mut next);
            let h0 = rand_vec(hd, &mut next);
            let got = gru_step(&x, &HeadState { h: h0.clone() }, &w).unwrap();

            for i in 0..hd {
                let dot = |mat: &[f32], v: &[f32], cols: usize| -> f64 {
                    (0..cols).map(|j| mat[i * cols + j] as f64 * v[j] as f64).sum()
                };
                let z = 1.0 / (1.0 + (-(w.b_z[i] as f64 + dot(&w.w_z, &x, d) + dot(&w.u_z, &h0, hd))).exp());
                let r = 1.0 / (1.0 + (-(w.b_r[i] as f64 + dot(&w.w_r, &x, d) + dot(&w.u_r, &h0, hd))).exp());
                let cand = (w.b_h[i] as f64 + dot(&w.w_h, &x, d) + r * dot(&w.u_h, &h0, hd)).tanh();
                let expect = (1.0 - z) * h0[i] as f64 + z * cand;
                assert!(
                    (got.h[i] as f64 - expect).abs() < 1e-6,
                    "unit {i}: {} vs {expect}",
                    got.h[i]
                );
                assert!((0.0..=1.0).contains(&z) && (0.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn gru_state_stays_bounded() {
        // h' is a convex combination of h and tanh output.
        let w = GruWeights::zeros(2, 2);
        let mut w = w;
        w.b_z = vec![5.0, -5.0];
        w.b_h = vec![3.0, 3.0];
        let state = HeadState { h: vec![0.9, -0.2] };
        let next = gru_step(&[0.1, 0.2], &state, &w).unwrap();
        for (i, v) in next.h.iter().enumerate() {
            assert!(v.abs() <= state.h[i].abs().max(1.0) + 1e-6);
        }
    }

    #[test]
    fn gru_rejects_shape_and_nonfinite() {
        let w = GruWeights::zeros(2, 2);
        assert!(gru_step(&[0.0; 3], &HeadState::zeros(2), &w).is_err());
        assert!(gru_step(&[0.0; 2], &HeadState::zeros(1), &w).is_err());
        assert!(gru_step(&[f32::NAN, 0.0], &HeadState::zeros(2), &w).is_err());
    }

    #[test]
    fn fc_zero_weights_center() {
        let fc = FcWeights::zeros(4);
        let (u, v) = fc_regress(&[0.3, -0.1, 0.0, 0.9], &fc).unwrap();
        assert_eq!((u, v), (0.5, 0.5));
    }

    #[test]
    fn fc_sigmoid_saturation() {
        let fc = FcWeights {
            hidden: 2,
            w: vec![0.0; 4],
            b: [20.0, -20.0],
        };
        let (u, v) = fc_regress(&[0.0, 0.0], &fc).unwrap();
        assert!((u - 1.0).abs() < 1e-8);
        assert!(v < 1e-8);
    }

    #[test]
    fn fc_matches_direct_formula() {
        let fc = FcWeights {
            hidden: 3,
            w: vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.75],
            b: [0.1, -0.2],
        };
        let h = [0.4f32, 0.8, -0.3];
        let (u, v) = fc_regress(&h, &fc).unwrap();
        let pre0 = 0.1 + 0.5 * 0.4 - 1.0 * 0.8 + 0.25 * -0.3;
        let pre1 = -0.2 + 2.0 * 0.4 + 0.0 * 0.8 - 0.75 * -0.3;
        let sig = |x: f32| 1.0 / (1.0 + (-x).exp());
        assert!((u - sig(pre0) as f64).abs() < 1e-9);
        assert!((v - sig(pre1) as f64).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
    }

    #[test]
    fn denormalize_cases() {
        assert_eq!(denormalize(0.5, 0.5, 64, 64).unwrap(), (32.0, 32.0));
        assert_eq!(denormalize(0.0, 0.0, 64, 64).unwrap(), (0.0, 0.0));
        assert_eq!(denormalize(1.0, 1.0, 48, 64).unwrap(), (64.0, 48.0));
        assert!(denormalize(1.2, 0.0, 64, 64).is_err());
        assert!(denormalize(0.0, -0.1, 64, 64).is_err());
    }
}
