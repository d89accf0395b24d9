//! Central finite-difference verification of reverse-mode gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use crate::autodiff::{Padding, ParamStore, Tape, Var};
use crate::encoders::{
    ConvNConfig, ContrastiveModel, Encoder, EncoderKind, ModelConfig, Projector, ProjectorConfig,
    Spec2DConfig,
};
use crate::rng::{self, domain, Rng};
use crate::tensor::Tensor;
use crate::views::{Format, FormatSpec};
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Largest relative error between `grad(x)` and central differences of `f`
/// at `x`, over every coordinate.
pub fn check_function(f: impl Fn(&[f64]) -> f64, grad: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> f64 {
    let g = grad(x);
    let mut p = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        worst = worst.max(relative_error(g[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// Options of [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub h: f64,
    /// Checks at most this many randomly chosen coordinates per parameter
    /// tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Doubles the backward pass of the named op (harness self-test).
    pub fault: Option<&'static str>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            h: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

/// Compares tape gradients of the scalar built by `build` with central
/// differences taken by perturbing the entries of `store`. Returns the
/// maximum relative error.
pub fn finite_diff_check<F>(build: F, store: &mut ParamStore<f64>, opts: &CheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let l = build(&mut tape, store)?;
        Ok((tape.value(l).data()[0], tape.relu_pattern()))
    };
    store.zero_grad();
    let mut tape = Tape::new();
    if let Some(op) = opts.fault {
        tape.inject_fault(op);
    }
    let l = build(&mut tape, store)?;
    let pattern = tape.relu_pattern();
    tape.backward(l, store)?;

    let mut r = rng::stream(opts.seed, domain::GRADCHECK, 1);
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => index::sample(&mut r, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let analytic = store.get(id).grad[c];
            let orig = store.get(id).value.data()[c];
            // A step that moves some ReLU input across zero measures the
            // kink, not the derivative; shrink it until both sides stay on
            // the same linear piece.
            let mut h = opts.h;
            let numeric = loop {
                store.get_mut(id).value.data_mut()[c] = orig + h;
                let (up, pu) = eval(store)?;
                store.get_mut(id).value.data_mut()[c] = orig - h;
                let (down, pd) = eval(store)?;
                store.get_mut(id).value.data_mut()[c] = orig;
                if (pu == pattern && pd == pattern) || h < opts.h * 1e-3 {
                    break (up - down) / (2.0 * h);
                }
                h /= 10.0;
            };
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    store.zero_grad();
    Ok(worst)
}

/// Result of checking one op on several shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub shapes: Vec<String>,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Store holding random tensors `x0, x1, ...` of the given shapes.
fn store_of(r: &mut Rng, shapes: &[&[usize]]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        s.add(&format!("x{i}"), uniform(r, sh, -1.0, 1.0)).unwrap();
    }
    s
}

fn params(tape: &mut Tape<f64>, store: &ParamStore<f64>) -> Vec<Var> {
    store.ids().map(|id| tape.param(store, id)).collect()
}

/// `sum(y * w)` with fixed random weights, so every output element gets a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, domain::GRADCHECK, 2);
    let w = uniform(&mut r, tape.shape(y), -1.0, 1.0);
    let w = tape.input(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn shape_label(shapes: &[&[usize]]) -> String {
    shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" ")
}

struct Suite {
    opts: CheckOptions,
    reports: Vec<OpReport>,
    r: Rng,
}

impl Suite {
    fn run<F>(&mut self, op: &'static str, shapes: &[&[usize]], extra: &str, build: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut store = store_of(&mut self.r, shapes);
        let seed = self.r.gen::<u64>();
        let err = finite_diff_check(
            |tape, s| {
                let v = params(tape, s);
                let y = build(tape, &v)?;
                if tape.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    weighted_sum(tape, y, seed)
                }
            },
            &mut store,
            &self.opts,
        )?;
        self.record(op, format!("{}{extra}", shape_label(shapes)), err);
        Ok(())
    }

    fn record(&mut self, op: &'static str, shape: String, err: f64) {
        match self.reports.iter_mut().find(|r| r.op == op) {
            Some(rep) => {
                rep.shapes.push(shape);
                rep.max_rel_err = rep.max_rel_err.max(err);
            }
            None => self.reports.push(OpReport {
                op,
                shapes: vec![shape],
                max_rel_err: err,
            }),
        }
    }

    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.r.gen_range(lo..=hi)
    }
}

/// Every differentiable op on three randomized shapes, then the encoders,
/// the projector and the composed encoder + projector + loss.
pub fn run_suite(opts: &CheckOptions) -> Result<Vec<OpReport>> {
    let mut s = Suite {
        opts: *opts,
        reports: Vec::new(),
        r: rng::stream(opts.seed, domain::GRADCHECK, 0),
    };

    for k in 0..3 {
        let (b, ci, co) = if k == 0 { (2, 3, 2) } else { (s.dim(1, 3), s.dim(1, 3), s.dim(1, 4)) };
        let (kk, st) = if k == 0 { (4, 2) } else { (s.dim(1, 5), s.dim(1, 3)) };
        let l = if k == 0 { 17 } else { kk + s.dim(3, 15) };
        s.run("conv1d", &[&[b, ci, l], &[co, ci, kk], &[co]], &format!(" stride {st}"), |t, v| {
            t.conv1d(v[0], v[1], v[2], st)
        })?;
    }
    for k in 0..3 {
        let (b, ci, co) = if k == 0 { (2, 2, 2) } else { (s.dim(1, 2), s.dim(1, 3), s.dim(1, 3)) };
        let (h, w) = if k == 0 { (9, 9) } else { (s.dim(3, 8), s.dim(3, 8)) };
        let pad = if k == 2 { Padding::Valid } else { Padding::Same };
        let label = if pad == Padding::Same { " same" } else { " valid" };
        s.run("conv2d", &[&[b, ci, h, w], &[co, ci, 3, 3], &[co]], label, |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, pad)
        })?;
    }
    {
        let (b, ci, h, w) = (s.dim(1, 2), s.dim(1, 2), s.dim(5, 8), s.dim(5, 8));
        s.run("conv2d", &[&[b, ci, h, w], &[2, ci, 2, 3], &[2]], " valid stride 2", |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, Padding::Valid)
        })?;
    }
    for k in 0..3 {
        let groups = [1, 2, 3][k];
        let c = groups * s.dim(1, 3);
        let mut shape = vec![s.dim(1, 3), c, s.dim(2, 6)];
        if k == 2 {
            shape.push(s.dim(2, 4));
        }
        s.run("group_norm", &[&shape, &[c], &[c]], &format!(" groups {groups}"), |t, v| {
            t.group_norm(v[0], v[1], v[2], groups, 1e-5)
        })?;
    }
    for _ in 0..3 {
        let sh = [s.dim(1, 4), s.dim(1, 6)];
        s.run("relu", &[&sh], "", |t, v| t.relu(v[0]))?;
    }
    for _ in 0..3 {
        let sh = [s.dim(1, 4), s.dim(1, 6)];
        s.run("sigmoid", &[&sh], "", |t, v| t.sigmoid(v[0]))?;
    }
    for _ in 0..3 {
        let sh = [s.dim(1, 4), s.dim(2, 6)];
        s.run("log_softmax", &[&sh], "", |t, v| t.log_softmax(v[0]))?;
    }
    for _ in 0..3 {
        let (n, i, o) = (s.dim(1, 5), s.dim(1, 6), s.dim(1, 6));
        s.run("linear", &[&[n, i], &[o, i], &[o]], "", |t, v| t.linear(v[0], v[1], v[2]))?;
    }
    for k in 0..3 {
        let sh = [s.dim(1, 3), s.dim(1, 3), s.dim(2, 5), s.dim(2, 4)];
        let axes: &'static [usize] = [&[2][..], &[2, 3], &[1, 3]][k];
        s.run("global_avg_pool", &[&sh], &format!(" axes {axes:?}"), |t, v| {
            t.global_avg_pool(v[0], axes)
        })?;
    }
    for _ in 0..3 {
        let sh = [s.dim(1, 2), s.dim(1, 3), s.dim(2, 7), s.dim(2, 7)];
        s.run("avg_pool2d", &[&sh], "", |t, v| t.avg_pool2d(v[0]))?;
    }
    for _ in 0..3 {
        let d = s.dim(1, 5);
        let (a, b) = (s.dim(1, 4), s.dim(1, 4));
        s.run("concat_rows", &[&[a, d], &[b, d]], "", |t, v| t.concat_rows(v[0], v[1]))?;
    }
    for _ in 0..3 {
        let sh = [s.dim(1, 4), s.dim(1, 5)];
        s.run("mul", &[&sh, &sh], "", |t, v| t.mul(v[0], v[1]))?;
    }
    for _ in 0..3 {
        let sh = [s.dim(1, 4), s.dim(1, 5)];
        s.run("sum", &[&sh], "", |t, v| t.sum(v[0]))?;
    }
    for (n, d) in [(2, 4), (3, 16), (s.dim(2, 8), s.dim(2, 8))] {
        let pairing = crate::loss::halves_pairing(n);
        for tau in [0.1, 0.5] {
            s.run("nt_xent", &[&[2 * n, d]], &format!(" tau {tau}"), |t, v| {
                t.nt_xent(v[0], &pairing, tau)
            })?;
        }
    }
    for _ in 0..3 {
        let sh = [s.dim(1, 5), s.dim(1, 6)];
        let n = sh[0] * sh[1];
        let targets: Vec<f64> = (0..n).map(|_| s.r.gen_range(0.0..1.0)).collect();
        s.run("bce_with_logits", &[&sh], "", |t, v| t.bce_with_logits(v[0], &targets))?;
    }
    for _ in 0..3 {
        let sh = [s.dim(1, 5), s.dim(2, 6)];
        let targets: Vec<usize> = (0..sh[0]).map(|_| s.r.gen_range(0..sh[1])).collect();
        s.run("softmax_cross_entropy", &[&sh], "", |t, v| {
            t.softmax_cross_entropy(v[0], &targets)
        })?;
    }

    composites(&mut s)?;
    Ok(s.reports)
}

fn composites(s: &mut Suite) -> Result<()> {
    let sub = CheckOptions {
        max_coords: Some(s.opts.max_coords.unwrap_or(64)),
        ..s.opts
    };

    // encoders: input and every parameter tensor are perturbed
    let convs = [
        (ConvNConfig { n_stride2_layers: 5, channels: 8, groups: 4 }, 4000usize, 2usize),
        (ConvNConfig { n_stride2_layers: 1, channels: 4, groups: 2 }, 60, 3),
        (ConvNConfig { n_stride2_layers: 2, channels: 6, groups: 3 }, 97, 2),
    ];
    for (cfg, len, batch) in convs {
        let mut store = ParamStore::new();
        let enc = Encoder::build(EncoderKind::ConvN(cfg), "enc", &mut store, &mut s.r)?;
        store.add("input", uniform(&mut s.r, &[batch, 1, len], -1.0, 1.0))?;
        let input = store.id("input").unwrap();
        let seed = s.r.gen::<u64>();
        let err = finite_diff_check(
            |t, st| {
                let x = t.param(st, input);
                let y = enc.forward(t, st, x)?;
                weighted_sum(t, y, seed)
            },
            &mut store,
            &sub,
        )?;
        s.record(
            "convn_encoder",
            format!("[{batch}, 1, {len}] n={} c={}", cfg.n_stride2_layers, cfg.channels),
            err,
        );
    }
    let specs = [
        (Spec2DConfig { n_blocks: 2, base_channels: 2, groups: 2, out_channels: None }, 8usize, 6usize),
        (Spec2DConfig { n_blocks: 1, base_channels: 3, groups: 3, out_channels: Some(4) }, 5, 7),
        (Spec2DConfig { n_blocks: 3, base_channels: 2, groups: 2, out_channels: Some(3) }, 9, 8),
    ];
    for (cfg, frames, bins) in specs {
        let mut store = ParamStore::new();
        let enc = Encoder::build(EncoderKind::Spec2D(cfg), "enc", &mut store, &mut s.r)?;
        store.add("input", uniform(&mut s.r, &[2, 1, frames, bins], -1.0, 1.0))?;
        let input = store.id("input").unwrap();
        let seed = s.r.gen::<u64>();
        let err = finite_diff_check(
            |t, st| {
                let x = t.param(st, input);
                let y = enc.forward(t, st, x)?;
                weighted_sum(t, y, seed)
            },
            &mut store,
            &sub,
        )?;
        s.record(
            "spec2d_encoder",
            format!("[2, 1, {frames}, {bins}] blocks={} base={}", cfg.n_blocks, cfg.base_channels),
            err,
        );
    }
    for (n, din, hid, out) in [(3, 4, 5, 2), (2, 8, 3, 6), (5, 2, 7, 3)] {
        let mut store = ParamStore::new();
        let proj = Projector::build(din, ProjectorConfig { hidden_dim: hid, out_dim: out }, "p", &mut store, &mut s.r)?;
        store.add("input", uniform(&mut s.r, &[n, din], -1.0, 1.0))?;
        let input = store.id("input").unwrap();
        let seed = s.r.gen::<u64>();
        let err = finite_diff_check(
            |t, st| {
                let x = t.param(st, input);
                let y = proj.forward(t, st, x)?;
                weighted_sum(t, y, seed)
            },
            &mut store,
            &s.opts,
        )?;
        s.record("projector", format!("[{n}, {din}] -> {hid} -> {out}"), err);
    }

    // full model: two encoders, shared projector, NT-Xent
    let tiny_conv = ConvNConfig { n_stride2_layers: 2, channels: 4, groups: 2 };
    let tiny_spec = Spec2DConfig { n_blocks: 1, base_channels: 2, groups: 2, out_channels: Some(4) };
    let cases = [
        (FormatSpec::new(Format::Waveform, Format::LogMel), 3usize, 120usize, (6usize, 5usize)),
        (FormatSpec::new(Format::Waveform, Format::Waveform), 2, 90, (0, 0)),
        (FormatSpec::new(Format::LogMel, Format::Mfcc), 2, 0, (5, 4)),
    ];
    for (formats, n, len, (frames, bins)) in cases {
        let cfg = ModelConfig {
            formats,
            conv: tiny_conv,
            spec2d: tiny_spec,
            projector: ProjectorConfig { hidden_dim: 16, out_dim: 5 },
        };
        let model = ContrastiveModel::<f64>::new(cfg, s.r.gen())?;
        let input_shape = |f: Format| -> Vec<usize> {
            if f.is_spectral() {
                vec![n, 1, frames, bins]
            } else {
                vec![n, 1, len]
            }
        };
        let xa = uniform(&mut s.r, &input_shape(formats.branch_a), -1.0, 1.0);
        let xb = uniform(&mut s.r, &input_shape(formats.branch_b), -1.0, 1.0);
        let mut store = model.params.clone();
        let err = finite_diff_check(
            |t, st| {
                let mut m = model.clone();
                m.params = st.clone();
                m.loss(t, xa.clone(), xb.clone(), 0.2)
            },
            &mut store,
            &sub,
        )?;
        s.record("encoder_projector_nt_xent", format!("{} N={n}", formats.label()), err);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = [0.5, -2.0, 3.0];
        let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 1.0;
        let g = |_: &[f64]| w.to_vec();
        assert!(check_function(f, g, &[0.1, 0.2, -0.3], 1e-5) < 1e-10);
    }

    #[test]
    fn quadratic_is_within_truncation_bound() {
        let f = |x: &[f64]| x.iter().map(|a| 3.0 * a * a - a).sum::<f64>();
        let g = |x: &[f64]| x.iter().map(|a| 6.0 * a - 1.0).collect();
        assert!(check_function(f, g, &[0.3, -1.7, 2.2], 1e-5) < 1e-8);
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let f = |x: &[f64]| x[0] * x[0];
        let g = |x: &[f64]| vec![4.0 * x[0]];
        let err = check_function(f, g, &[1.0], 1e-5);
        assert!((err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut r = rng::stream(0, 0, 0);
        let mut store = store_of(&mut r, &[&[2, 3, 17], &[2, 3, 4], &[2]]);
        let build = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let v = params(t, s);
            let y = t.conv1d(v[0], v[1], v[2], 2)?;
            weighted_sum(t, y, 1)
        };
        let ok = finite_diff_check(build, &mut store, &CheckOptions::default()).unwrap();
        assert!(ok < TOLERANCE, "{ok}");
        let opts = CheckOptions {
            fault: Some("conv1d"),
            ..CheckOptions::default()
        };
        let bad = finite_diff_check(build, &mut store, &opts).unwrap();
        assert!(bad > 0.1, "{bad}");
    }
}
