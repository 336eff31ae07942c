//! Single-layer LSTM over the rows of an input matrix, recorded on a tape.
//!
//! Gate layout along the `4 * hidden` axis is `[input, forget, cell, output]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w_x = store.add(
            format!("{prefix}.w_x"),
            Tensor::xavier(input, 4 * hidden, rng).with_requires_grad(trainable),
        );
        let w_h = store.add(
            format!("{prefix}.w_h"),
            Tensor::xavier(hidden, 4 * hidden, rng).with_requires_grad(trainable),
        );
        let bias = store.add(
            format!("{prefix}.bias"),
            Tensor::zeros(vec![1, 4 * hidden]).with_requires_grad(trainable),
        );
        Self {
            input,
            hidden,
            w_x,
            w_h,
            bias,
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_x, self.w_h, self.bias]
    }

    /// Runs the recurrence over the rows of `inputs` (`n x input`) and returns
    /// the hidden states as an `n x hidden` matrix indexed by row position.
    /// With `reverse`, rows are consumed from last to first, so row `i` has
    /// seen input rows `i..n`.
    pub fn run<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        inputs: Var,
        reverse: bool,
    ) -> Result<Var, AutodiffError> {
        let n = tape.dims(inputs).0;
        self.run_segments(tape, store, inputs, &[(0, n)], reverse)
    }

    /// [`LstmParams::run`] over several sequences stacked in `inputs`; see
    /// [`Tape::lstm_recurrence_segments`].
    pub fn run_segments<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        inputs: Var,
        segments: &[(usize, usize)],
        reverse: bool,
    ) -> Result<Var, AutodiffError> {
        let (n, d) = tape.dims(inputs);
        if d != self.input {
            return Err(AutodiffError::ShapeMismatch {
                op: "lstm input",
                lhs: vec![n, d],
                rhs: vec![n, self.input],
            });
        }
        let w_x = tape.param(self.w_x, store.get(self.w_x))?;
        let w_h = tape.param(self.w_h, store.get(self.w_h))?;
        let bias = tape.param(self.bias, store.get(self.bias))?;
        let projected = tape.matmul(inputs, w_x)?;
        let projected = tape.add(projected, bias)?;
        tape.lstm_recurrence_segments(projected, w_h, segments, reverse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sigmoid;
    use crate::testutil::{max_grad_error, FD_TOL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar re-derivation of the recurrence, independent of the tape.
    fn hand_lstm(store: &ParamStore, p: &LstmParams, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = p.hidden;
        let wx = store.get(p.w_x).values();
        let wh = store.get(p.w_h).values();
        let b = store.get(p.bias).values();
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut out = Vec::new();
        for x in xs {
            let mut z = b.to_vec();
            for (j, zj) in z.iter_mut().enumerate() {
                for (k, xk) in x.iter().enumerate() {
                    *zj += xk * wx[k * 4 * h + j];
                }
                for (k, hk) in hs.iter().enumerate() {
                    *zj += hk * wh[k * 4 * h + j];
                }
            }
            for u in 0..h {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[h + u]);
                let g = z[2 * h + u].tanh();
                let o = sigmoid(z[3 * h + u]);
                cs[u] = f * cs[u] + i * g;
                hs[u] = o * cs[u].tanh();
            }
            out.push(hs.clone());
        }
        out
    }

    #[test]
    fn matches_hand_stepped_recurrence_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 3, 2, true, &mut rng);
        // non-zero bias so the bias path is exercised
        store
            .get_mut(p.bias)
            .values_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.1 * i as f64 - 0.3);
        let xs = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.2, -0.7], vec![-0.4, 0.9, 0.1]];
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let mut tape = Tape::new();
        let inp = tape.constant(Tensor::matrix(3, 3, flat).unwrap()).unwrap();
        let fwd = p.run(&mut tape, &store, inp, false).unwrap();
        let bwd = p.run(&mut tape, &store, inp, true).unwrap();
        let (fwd, bwd) = (tape.value(fwd).to_vec(), tape.value(bwd).to_vec());
        let expect_f = hand_lstm(&store, &p, &xs);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut expect_b = hand_lstm(&store, &p, &rev);
        expect_b.reverse();
        for t in 0..3 {
            for u in 0..2 {
                assert!((fwd[t * 2 + u] - expect_f[t][u]).abs() < 1e-14);
                assert!((bwd[t * 2 + u] - expect_b[t][u]).abs() < 1e-14);
            }
        }
    }

    /// The same recurrence spelled out with primitive tape ops.
    fn composed_run<'p>(p: &LstmParams, tape: &mut Tape<'p>, store: &'p ParamStore, inputs: Var, reverse: bool) -> Var {
        use crate::autodiff::Axis;
        let h = p.hidden;
        let n = tape.dims(inputs).0;
        let w_x = tape.param(p.w_x, store.get(p.w_x)).unwrap();
        let w_h = tape.param(p.w_h, store.get(p.w_h)).unwrap();
        let bias = tape.param(p.bias, store.get(p.bias)).unwrap();
        let xp = tape.matmul(inputs, w_x).unwrap();
        let xp = tape.add(xp, bias).unwrap();
        let mut hv = tape.constant(Tensor::zeros(vec![1, h])).unwrap();
        let mut cv = tape.constant(Tensor::zeros(vec![1, h])).unwrap();
        let mut states = vec![hv; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let x_t = tape.row(xp, t).unwrap();
            let rec = tape.matmul(hv, w_h).unwrap();
            let z = tape.add(x_t, rec).unwrap();
            let i = tape.slice(z, 0, 1, 0, h).unwrap();
            let f = tape.slice(z, 0, 1, h, h).unwrap();
            let g = tape.slice(z, 0, 1, 2 * h, h).unwrap();
            let o = tape.slice(z, 0, 1, 3 * h, h).unwrap();
            let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
            let fc = tape.mul(f, cv).unwrap();
            let ig = tape.mul(i, g).unwrap();
            cv = tape.add(fc, ig).unwrap();
            let tc = tape.tanh(cv);
            hv = tape.mul(o, tc).unwrap();
            states[t] = hv;
        }
        tape.concat(&states, Axis::Rows).unwrap()
    }

    #[test]
    fn fused_recurrence_matches_composed_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 5, 3, true, &mut rng);
        store.get_mut(p.bias).values_mut().iter_mut().for_each(|v| *v = 0.2);
        let x = store.add("x", Tensor::uniform(6, 5, 2.0, &mut rng).with_requires_grad(true));
        let readout = Tensor::uniform(6, 3, 1.0, &mut rng);
        for reverse in [false, true] {
            let run = |fused: bool| {
                let mut tape = Tape::new();
                let xv = tape.param(x, store.get(x)).unwrap();
                let hs = if fused {
                    p.run(&mut tape, &store, xv, reverse).unwrap()
                } else {
                    composed_run(&p, &mut tape, &store, xv, reverse)
                };
                let r = tape.constant(readout.clone()).unwrap();
                let prod = tape.mul(hs, r).unwrap();
                let loss = tape.sum(prod);
                let value = tape.value(hs).to_vec();
                (value, tape.backward(loss).unwrap())
            };
            let (v1, g1) = run(true);
            let (v2, g2) = run(false);
            assert!(v1.iter().zip(&v2).all(|(a, b)| (a - b).abs() < 1e-13));
            for id in [x, p.w_x, p.w_h, p.bias] {
                let (a, b) = (g1.param(id).unwrap(), g2.param(id).unwrap());
                assert!(
                    a.iter().zip(b).all(|(a, b)| (a - b).abs() < 1e-12),
                    "{}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn segmented_run_equals_separate_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 4, 3, true, &mut rng);
        let x = store.add("x", Tensor::uniform(9, 4, 1.0, &mut rng).with_requires_grad(true));
        let readout = Tensor::uniform(9, 3, 1.0, &mut rng);
        let segments = [(0usize, 2usize), (2, 5), (7, 1), (8, 1)];
        for reverse in [false, true] {
            let together = {
                let mut tape = Tape::new();
                let xv = tape.param(x, store.get(x)).unwrap();
                let hs = p.run_segments(&mut tape, &store, xv, &segments, reverse).unwrap();
                let r = tape.constant(readout.clone()).unwrap();
                let prod = tape.mul(hs, r).unwrap();
                let loss = tape.sum(prod);
                (tape.value(hs).to_vec(), tape.backward(loss).unwrap())
            };
            let mut values = Vec::new();
            let mut grads = crate::autodiff::Gradients::default();
            for &(start, len) in &segments {
                let mut tape = Tape::new();
                let xv = tape.param(x, store.get(x)).unwrap();
                let xs = tape.slice(xv, start, len, 0, 4).unwrap();
                let hs = p.run(&mut tape, &store, xs, reverse).unwrap();
                let r = tape
                    .constant(Tensor::matrix(len, 3, readout.values()[start * 3..(start + len) * 3].to_vec()).unwrap())
                    .unwrap();
                let prod = tape.mul(hs, r).unwrap();
                let loss = tape.sum(prod);
                values.extend_from_slice(tape.value(hs));
                grads.merge(&tape.backward(loss).unwrap());
            }
            assert!(together.0.iter().zip(&values).all(|(a, b)| (a - b).abs() < 1e-13));
            for id in [x, p.w_x, p.w_h, p.bias] {
                let (a, b) = (together.1.param(id).unwrap(), grads.param(id).unwrap());
                assert!(a.iter().zip(b).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 4, 3, false, &mut rng);
        for id in p.ids() {
            store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let inp = tape.constant(Tensor::uniform(5, 4, 3.0, &mut rng)).unwrap();
        let states = p.run(&mut tape, &store, inp, false).unwrap();
        assert!(tape.value(states).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for steps in [1usize, 5] {
            let mut store = ParamStore::new();
            let p = LstmParams::new(&mut store, "l", 3, 4, true, &mut rng);
            let x = store.add("x", Tensor::uniform(steps, 3, 1.5, &mut rng).with_requires_grad(true));
            let readout = store.add("r", Tensor::uniform(4, 1, 1.0, &mut rng).with_requires_grad(true));
            let mut ids = p.ids().to_vec();
            ids.extend([x, readout]);
            let err = max_grad_error(&mut store, &ids, |tape, s| {
                let xv = tape.param(x, s.get(x)).unwrap();
                let r = tape.param(readout, s.get(readout)).unwrap();
                let all = p.run(tape, s, xv, steps > 1).unwrap();
                let proj = tape.matmul(all, r).unwrap();
                let sq = tape.mul(proj, proj).unwrap();
                tape.sum(sq)
            });
            assert!(err < FD_TOL, "steps={steps}: {err}");
        }
    }
}
