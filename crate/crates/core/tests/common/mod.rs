#![allow(dead_code)]

use ecmt_core::autograd::{Graph, Var};
use ecmt_core::slimnet::{InputSpec, LayerKind, SuperNet, WidthConfig};
use ecmt_core::Array;
use rand::Rng;

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_array(rng: &mut impl Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares the reverse-mode gradient of `build` (which must return a
/// scalar) with central differences for every input. Returns the worst
/// norm-wise relative error over inputs.
pub fn gradcheck(inputs: &[Array], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Array]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|a| g.input(a.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.node_grads(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|a| a.data().to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] += h;
            let up = eval(&vals);
            vals[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&vals);
            numeric[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Leading `rows × cols` block of a row-major matrix (or the leading block
/// along every axis of a 4-d kernel), copied with plain indexing.
fn leading_block(full: &Array, extents: &[usize]) -> Vec<f64> {
    let shape = full.shape();
    let mut out = Vec::new();
    match extents.len() {
        1 => out.extend_from_slice(&full.data()[..extents[0]]),
        2 => {
            for r in 0..extents[0] {
                for c in 0..extents[1] {
                    out.push(full.data()[r * shape[1] + c]);
                }
            }
        }
        4 => {
            for o in 0..extents[0] {
                for i in 0..extents[1] {
                    for k in 0..9 {
                        out.push(full.data()[(o * shape[1] + i) * 9 + k]);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

fn active(r: f64, full: usize) -> usize {
    ((r * full as f64 - 1e-9).ceil() as usize).clamp(1, full)
}

/// Plain-loop activations: `batch × channels × h × w` (h = w = 1 for vectors).
#[derive(Clone, Debug)]
pub struct Act {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Act {
    fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((b * self.c + c) * self.h + y) * self.w + x]
    }
}

enum RefLayer {
    Conv { k: Vec<f64>, cin: usize, cout: usize },
    Dense { w: Vec<f64>, bias: Vec<f64>, din: usize, dout: usize },
    Norm { gamma: Vec<f64>, beta: Vec<f64> },
    Relu,
    Pool,
    Flatten,
}

/// A standalone network holding copies of the active weights of one
/// configuration, evaluated with batch statistics.
pub struct ReferenceNet {
    encoder: Vec<RefLayer>,
    decoders: Vec<Vec<RefLayer>>,
    input: InputSpec,
}

impl ReferenceNet {
    pub fn extract(net: &SuperNet, cfg: &WidthConfig) -> Self {
        let arch = net.architecture();
        let mut in_active = match arch.input {
            InputSpec::Image { channels, .. } => channels,
            InputSpec::Vector { dim } => dim,
        };
        let mut spatial = match arch.input {
            InputSpec::Image { height, width, .. } => height * width,
            InputSpec::Vector { .. } => 1,
        };
        let encoder = Self::build(net, "enc", &arch.encoder, &cfg.encoder, &mut in_active, &mut spatial);
        let decoders = arch
            .decoders
            .iter()
            .zip(&cfg.decoders)
            .enumerate()
            .map(|(t, (specs, ratios))| {
                let (mut a, mut s) = (in_active, spatial);
                Self::build(net, &format!("dec{t}"), specs, ratios, &mut a, &mut s)
            })
            .collect();
        Self { encoder, decoders, input: arch.input }
    }

    fn build(
        net: &SuperNet,
        prefix: &str,
        specs: &[ecmt_core::slimnet::LayerSpec],
        ratios: &[f64],
        a_in: &mut usize,
        spatial: &mut usize,
    ) -> Vec<RefLayer> {
        let p = net.params();
        let get = |i: usize, what: &str| p.value(p.find(&format!("{prefix}.{i}.{what}")).unwrap()).clone();
        let mut ri = ratios.iter();
        let mut out = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            match spec.kind {
                LayerKind::Conv2d => {
                    let a_out = if spec.owns_ratio() { active(*ri.next().unwrap(), spec.full_out) } else { spec.full_out };
                    out.push(RefLayer::Conv { k: leading_block(&get(i, "weight"), &[a_out, *a_in, 3, 3]), cin: *a_in, cout: a_out });
                    *a_in = a_out;
                }
                LayerKind::Dense | LayerKind::TaskHead => {
                    let a_out = if spec.owns_ratio() { active(*ri.next().unwrap(), spec.full_out) } else { spec.full_out };
                    out.push(RefLayer::Dense {
                        w: leading_block(&get(i, "weight"), &[*a_in, a_out]),
                        bias: leading_block(&get(i, "bias"), &[a_out]),
                        din: *a_in,
                        dout: a_out,
                    });
                    *a_in = a_out;
                }
                LayerKind::ChanNorm => out.push(RefLayer::Norm {
                    gamma: leading_block(&get(i, "gamma"), &[*a_in]),
                    beta: leading_block(&get(i, "beta"), &[*a_in]),
                }),
                LayerKind::Relu => out.push(RefLayer::Relu),
                LayerKind::AvgPool2 => {
                    *spatial /= 4;
                    out.push(RefLayer::Pool);
                }
                LayerKind::Flatten => {
                    *a_in *= *spatial;
                    *spatial = 1;
                    out.push(RefLayer::Flatten);
                }
            }
        }
        out
    }

    fn run(layers: &[RefLayer], mut x: Act, mults: &mut u64) -> Act {
        for layer in layers {
            x = match layer {
                RefLayer::Conv { k, cin, cout } => {
                    assert_eq!(x.c, *cin);
                    let mut v = vec![0.0; x.b * cout * x.h * x.w];
                    for b in 0..x.b {
                        for o in 0..*cout {
                            for y in 0..x.h {
                                for xx in 0..x.w {
                                    let mut s = 0.0;
                                    for i in 0..*cin {
                                        for dy in 0..3 {
                                            for dx in 0..3 {
                                                // padding taps count as multiplies by zero
                                                *mults += 1;
                                                let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                                if sy >= 0 && sx >= 0 && (sy as usize) < x.h && (sx as usize) < x.w {
                                                    s += k[(o * cin + i) * 9 + dy * 3 + dx] * x.at(b, i, sy as usize, sx as usize);
                                                }
                                            }
                                        }
                                    }
                                    v[((b * cout + o) * x.h + y) * x.w + xx] = s;
                                }
                            }
                        }
                    }
                    Act { c: *cout, v, ..x }
                }
                RefLayer::Dense { w, bias, din, dout } => {
                    let feat = x.c * x.h * x.w;
                    assert_eq!(feat, *din);
                    let mut v = vec![0.0; x.b * dout];
                    for b in 0..x.b {
                        for o in 0..*dout {
                            let mut s = bias[o];
                            for i in 0..*din {
                                *mults += 1;
                                s += x.v[b * feat + i] * w[i * dout + o];
                            }
                            v[b * dout + o] = s;
                        }
                    }
                    Act { b: x.b, c: *dout, h: 1, w: 1, v }
                }
                RefLayer::Norm { gamma, beta } => {
                    let inner = x.h * x.w;
                    let m = (x.b * inner) as f64;
                    let mut v = x.v.clone();
                    for c in 0..x.c {
                        let vals = (0..x.b).flat_map(|b| (0..inner).map(move |k| (b, k)));
                        let mean: f64 = vals.clone().map(|(b, k)| x.v[(b * x.c + c) * inner + k]).sum::<f64>() / m;
                        let var: f64 = vals.clone().map(|(b, k)| (x.v[(b * x.c + c) * inner + k] - mean).powi(2)).sum::<f64>() / m;
                        for (b, k) in vals {
                            let idx = (b * x.c + c) * inner + k;
                            v[idx] = gamma[c] * (x.v[idx] - mean) / (var + 1e-5).sqrt() + beta[c];
                        }
                    }
                    Act { v, ..x }
                }
                RefLayer::Relu => Act { v: x.v.iter().map(|v| v.max(0.0)).collect(), ..x },
                RefLayer::Pool => {
                    let (h, w) = (x.h / 2, x.w / 2);
                    let mut v = vec![0.0; x.b * x.c * h * w];
                    for b in 0..x.b {
                        for c in 0..x.c {
                            for y in 0..h {
                                for xx in 0..w {
                                    let s = x.at(b, c, 2 * y, 2 * xx)
                                        + x.at(b, c, 2 * y + 1, 2 * xx)
                                        + x.at(b, c, 2 * y, 2 * xx + 1)
                                        + x.at(b, c, 2 * y + 1, 2 * xx + 1);
                                    v[((b * x.c + c) * h + y) * w + xx] = s / 4.0;
                                }
                            }
                        }
                    }
                    Act { h, w, v, ..x }
                }
                RefLayer::Flatten => Act { b: x.b, c: x.c * x.h * x.w, h: 1, w: 1, v: x.v },
            };
        }
        x
    }

    /// Encoder feature and one output per task.
    pub fn forward(&self, batch: &Array) -> (Act, Vec<Act>) {
        let (z, outs, _) = self.forward_counting(batch);
        (z, outs)
    }

    /// Like [`Self::forward`], also returning the number of multiplies
    /// performed by conv and dense layers.
    pub fn forward_counting(&self, batch: &Array) -> (Act, Vec<Act>, u64) {
        let b = batch.shape()[0];
        let x = match self.input {
            InputSpec::Image { channels, height, width } => Act { b, c: channels, h: height, w: width, v: batch.data().to_vec() },
            InputSpec::Vector { dim } => Act { b, c: dim, h: 1, w: 1, v: batch.data().to_vec() },
        };
        let mut mults = 0;
        let z = Self::run(&self.encoder, x, &mut mults);
        let outs = self.decoders.iter().map(|d| Self::run(d, z.clone(), &mut mults)).collect();
        (z, outs, mults)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst finite-difference relative error per differentiable op over
/// `instances` random instances each.
pub fn op_gradchecks(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use ecmt_core::autograd::NormInput;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match results.iter_mut().find(|(n, _)| *n == name) {
        Some(r) => r.1 = r.1.max(err),
        None => results.push((name, err)),
    };
    // projects an op output onto a random target so every output entry matters
    fn project(g: &mut Graph, out: Var, target: &Array) -> Var {
        let t = g.input(target.clone());
        g.mse(out, t).unwrap()
    }
    for _ in 0..instances {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        let (b, c, h) = (rng.random_range(2..4), rng.random_range(1..4), 2 * rng.random_range(1..3));

        let t = random_array(&mut rng, &[m, n]);
        let ins = [random_array(&mut rng, &[m, k]), random_array(&mut rng, &[k, n])];
        record("matmul", gradcheck(&ins, |g, v| {
            let o = g.matmul(v[0], v[1]).unwrap();
            project(g, o, &t)
        }));
        let ins = [random_array(&mut rng, &[m, n]), random_array(&mut rng, &[n])];
        record("add_bias", gradcheck(&ins, |g, v| {
            let o = g.add_bias(v[0], v[1]).unwrap();
            project(g, o, &t)
        }));

        let o_ch = rng.random_range(1..4);
        let t4 = random_array(&mut rng, &[b, o_ch, h, h]);
        let ins = [random_array(&mut rng, &[b, c, h, h]), random_array(&mut rng, &[o_ch, c, 3, 3])];
        record("conv2d", gradcheck(&ins, |g, v| {
            let o = g.conv2d(v[0], v[1]).unwrap();
            project(g, o, &t4)
        }));

        let x4 = [random_array(&mut rng, &[b, c, h, h])];
        let tx = random_array(&mut rng, &[b, c, h, h]);
        record("relu", gradcheck(&x4, |g, v| {
            let o = g.relu(v[0]);
            project(g, o, &tx)
        }));
        let tp = random_array(&mut rng, &[b, c, h / 2, h / 2]);
        record("avg_pool2", gradcheck(&x4, |g, v| {
            let o = g.avg_pool2(v[0]).unwrap();
            project(g, o, &tp)
        }));
        let tf = random_array(&mut rng, &[b, c * h * h]);
        record("flatten", gradcheck(&x4, |g, v| {
            let o = g.flatten(v[0]).unwrap();
            project(g, o, &tf)
        }));
        let tr = random_array(&mut rng, &[b * c, h * h]);
        record("reshape", gradcheck(&x4, |g, v| {
            let o = g.reshape(v[0], vec![b * c, h * h]).unwrap();
            project(g, o, &tr)
        }));
        let tm = random_array(&mut rng, &[b, 1, h, h]);
        record("channel_mean", gradcheck(&x4, |g, v| {
            let o = g.channel_mean(v[0]).unwrap();
            project(g, o, &tm)
        }));

        let norm_ins = [random_array(&mut rng, &[b, c, h, h]), random_array(&mut rng, &[c]), random_array(&mut rng, &[c])];
        record("chan_norm/batch", gradcheck(&norm_ins, |g, v| {
            let o = g.chan_norm(v[0], v[1], v[2], NormInput::Batch).unwrap();
            project(g, o, &tx)
        }));
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..2.0)).collect();
        record("chan_norm/fixed", gradcheck(&norm_ins, |g, v| {
            let o = g.chan_norm(v[0], v[1], v[2], NormInput::Fixed { mean: &mean, var: &var }).unwrap();
            project(g, o, &tx)
        }));
        let dense_norm = [random_array(&mut rng, &[b + 1, c]), random_array(&mut rng, &[c]), random_array(&mut rng, &[c])];
        let td = random_array(&mut rng, &[b + 1, c]);
        record("chan_norm/batch", gradcheck(&dense_norm, |g, v| {
            let o = g.chan_norm(v[0], v[1], v[2], NormInput::Batch).unwrap();
            project(g, o, &td)
        }));

        let pair = [random_array(&mut rng, &[m, n]), random_array(&mut rng, &[m, n])];
        record("mse", gradcheck(&pair, |g, v| g.mse(v[0], v[1]).unwrap()));
        record("l1", gradcheck(&pair, |g, v| g.l1(v[0], v[1]).unwrap()));
        record("add", gradcheck(&pair, |g, v| {
            let o = g.add(v[0], v[1]).unwrap();
            project(g, o, &t)
        }));
        let factor = rng.random_range(-2.0..2.0);
        record("scale", gradcheck(&pair[..1], |g, v| {
            let o = g.scale(v[0], factor);
            project(g, o, &t)
        }));
        record("sum", gradcheck(&pair[..1], |g, v| {
            let s = g.sum(v[0]);
            g.scale(s, 0.5)
        }));
        let classes = rng.random_range(2..5);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        let logits = [random_array(&mut rng, &[m, classes])];
        record("softmax_cross_entropy", gradcheck(&logits, |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap()));
    }
    results
}

pub fn shapes_net(widths: ecmt_core::slimnet::WidthList, seed: u64) -> SuperNet {
    SuperNet::new(ecmt_core::slimnet::Architecture::shapes(ecmt_core::data::DatasetSpec::shapes(1).tasks()), widths, seed).unwrap()
}

/// Overwrites every parameter (including norm scale/shift and biases) with
/// random values so slicing mistakes cannot hide behind constant init.
pub fn randomize(net: &mut SuperNet, seed: u64) {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let v = net.params_mut().value_mut(id);
        v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
}

pub fn toy_arch() -> ecmt_core::slimnet::Architecture {
    ecmt_core::slimnet::Architecture {
        input: InputSpec::Image { channels: 2, height: 4, width: 4 },
        encoder: vec![ecmt_core::slimnet::LayerSpec::conv(2, 4), ecmt_core::slimnet::LayerSpec::relu(4), ecmt_core::slimnet::LayerSpec::conv(4, 6)],
        decoders: vec![vec![ecmt_core::slimnet::LayerSpec::flatten(6), ecmt_core::slimnet::LayerSpec::dense(6 * 16, 5), ecmt_core::slimnet::LayerSpec::head(5, 2)]],
        tasks: vec![ecmt_core::task::TaskSpec { name: "t".into(), kind: ecmt_core::task::TaskKind::Classification { classes: 2 } }],
    }
}

pub fn all_configs(net: &SuperNet) -> Vec<WidthConfig> {
    let w = net.widths().ratios();
    let l = net.slimmable_layer_count();
    let mut out = Vec::new();
    for mut k in 0..w.len().pow(l as u32) {
        let mut v = Vec::with_capacity(l);
        for _ in 0..l {
            v.push(w[k % w.len()]);
            k /= w.len();
        }
        out.push(ecmt_core::predictor::decode_config(&v, net.encoder_layer_count(), &net.decoder_layer_counts()).unwrap());
    }
    out
}
