use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Scalar;

/// Layout of a two-hidden-layer tanh MLP inside a flat parameter vector.
///
/// Parameter order: `W1 (H×in, row-major), b1, W2 (H×H), b2, W3 (out×H), b3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub offset: usize,
}

impl MlpShape {
    pub fn new(input: usize, hidden: usize, output: usize, offset: usize) -> Self {
        MlpShape {
            input,
            hidden,
            output,
            offset,
        }
    }

    pub fn n_params(&self) -> usize {
        let h = self.hidden;
        h * self.input + h + h * h + h + self.output * h + self.output
    }

    pub fn end(&self) -> usize {
        self.offset + self.n_params()
    }

    pub(crate) fn w1(&self) -> usize {
        self.offset
    }
    pub(crate) fn b1(&self) -> usize {
        self.w1() + self.hidden * self.input
    }
    pub(crate) fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    pub(crate) fn b2(&self) -> usize {
        self.w2() + self.hidden * self.hidden
    }
    pub(crate) fn w3(&self) -> usize {
        self.b2() + self.hidden
    }
    pub(crate) fn b3(&self) -> usize {
        self.w3() + self.output * self.hidden
    }

    /// Hidden weights ~ N(0, 1/fan_in), biases and the output layer zero.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let fill = |params: &mut [f64], start: usize, n: usize, fan_in: usize, rng: &mut R| {
            let sd = 1.0 / (fan_in.max(1) as f64).sqrt();
            for p in &mut params[start..start + n] {
                let g: f64 = StandardNormal.sample(rng);
                *p = sd * g;
            }
        };
        let h = self.hidden;
        fill(params, self.w1(), h * self.input, self.input, rng);
        fill(params, self.w2(), h * h, h, rng);
        for p in &mut params[self.b1()..self.b1() + h] {
            *p = 0.0;
        }
        for p in &mut params[self.b2()..self.b2() + h] {
            *p = 0.0;
        }
        for p in &mut params[self.w3()..self.end()] {
            *p = 0.0;
        }
    }

    pub fn eval<S: Scalar>(&self, params: &[f64], x: &[S]) -> Vec<S> {
        let h1 = dense_tanh(params, self.w1(), self.b1(), self.hidden, x);
        let h2 = dense_tanh(params, self.w2(), self.b2(), self.hidden, &h1);
        dense(params, self.w3(), self.b3(), self.output, &h2)
    }
}

fn dense<S: Scalar>(params: &[f64], w: usize, b: usize, rows: usize, x: &[S]) -> Vec<S> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            let row = &params[w + r * cols..w + (r + 1) * cols];
            let mut acc = S::from_f64(params[b + r]);
            for (wi, &xi) in row.iter().zip(x) {
                acc += xi * *wi;
            }
            acc
        })
        .collect()
}

fn dense_tanh<S: Scalar>(params: &[f64], w: usize, b: usize, rows: usize, x: &[S]) -> Vec<S> {
    dense(params, w, b, rows, x)
        .into_iter()
        .map(|a| a.tanh())
        .collect()
}
