#![allow(dead_code)]

use mpq_core::autodiff::{Graph, Var};
use mpq_core::config::RunConfig;
use mpq_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let up = f(&probe);
        probe.data_mut()[i] = orig - H;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * H);
    }
    out
}

/// Largest entrywise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Gradient check of a graph-built function of several inputs. The scalar
/// is `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
pub type BuildFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: BuildFn,
}

impl OpCase {
    /// Max relative error over every input entry.
    pub fn check(&self, weight_seed: u64) -> f64 {
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = self.inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = (self.build)(&mut g, &vars).unwrap();
            g.value(out).shape().to_vec()
        };
        let r = random(&out_shape, -1.0, 1.0, &mut rng(weight_seed));
        let eval = |inputs: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
            let out = (self.build)(&mut g, &vars).unwrap();
            let rv = g.constant(r.clone());
            let prod = g.mul(out, rv).unwrap();
            let loss = g.sum(prod);
            let value = g.value(loss).item().unwrap();
            if !grads {
                return (value, Vec::new());
            }
            g.backward(loss).unwrap();
            let gs = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            (value, gs)
        };
        let (_, analytic) = eval(&self.inputs, true);
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let numeric = numeric_grad(&self.inputs[i], |x| {
                let mut inputs = self.inputs.clone();
                inputs[i] = x.clone();
                eval(&inputs, false).0
            });
            worst = worst.max(max_rel_err(a, &numeric, 1e-6));
        }
        worst
    }
}

/// Random input tensors away from ReLU kinks and with positive entries
/// where an op needs them.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One randomized case for every differentiable graph operation.
pub fn all_op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let mut t = |shape: &[usize]| random(shape, -1.5, 1.5, &mut r);
    let a = t(&[m, k]);
    let b = t(&[k, n]);
    let c = t(&[m, k]);
    let s = t(&[1]);
    let row = t(&[1, k]);
    let c2 = t(&[m, n]);
    let wide = t(&[m, k + 2]);
    let tall = t(&[m + 2, k]);
    let ln = t(&[m, k + 1]);
    let mut r2 = rng(seed ^ 0x5eed);
    let relu_in = away_from_zero(&[m, k], &mut r2);
    let pos = random(&[m, k], 0.2, 2.0, &mut r2);
    let labels: Vec<usize> = (0..m).map(|_| r2.gen_range(0..k + 1)).collect();
    let logits = random(&[m, k + 1], -2.0, 2.0, &mut r2);
    let idx = r2.gen_range(0..m * k);
    let split = r2.gen_range(0..k + 2);

    vec![
        OpCase { name: "matmul", inputs: vec![a.clone(), b], build: Box::new(|g, v| g.matmul(v[0], v[1])) },
        OpCase { name: "add", inputs: vec![a.clone(), c.clone()], build: Box::new(|g, v| g.add(v[0], v[1])) },
        OpCase { name: "sub", inputs: vec![a.clone(), c.clone()], build: Box::new(|g, v| g.sub(v[0], v[1])) },
        OpCase { name: "mul", inputs: vec![a.clone(), c], build: Box::new(|g, v| g.mul(v[0], v[1])) },
        OpCase { name: "mul_scalar", inputs: vec![s.clone(), a.clone()], build: Box::new(|g, v| g.mul(v[0], v[1])) },
        OpCase { name: "add_scalar", inputs: vec![a.clone(), s], build: Box::new(|g, v| g.add(v[0], v[1])) },
        OpCase { name: "relu", inputs: vec![relu_in], build: Box::new(|g, v| g.relu(v[0])) },
        OpCase { name: "exp", inputs: vec![a.clone()], build: Box::new(|g, v| g.exp(v[0])) },
        OpCase { name: "log", inputs: vec![pos], build: Box::new(|g, v| g.log(v[0])) },
        OpCase { name: "scale", inputs: vec![a.clone()], build: Box::new(|g, v| Ok(g.scale(v[0], -2.5))) },
        OpCase { name: "sum", inputs: vec![a.clone()], build: Box::new(|g, v| Ok(g.sum(v[0]))) },
        OpCase { name: "mean", inputs: vec![a.clone()], build: Box::new(|g, v| Ok(g.mean(v[0]))) },
        OpCase { name: "softmax_rows", inputs: vec![logits.clone()], build: Box::new(|g, v| g.softmax_rows(v[0])) },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: vec![logits],
            build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
        },
        OpCase {
            name: "slice_cols",
            inputs: vec![wide.clone()],
            build: Box::new(move |g, v| g.slice_cols(v[0], split.min(k + 1), k + 2)),
        },
        OpCase { name: "slice_rows", inputs: vec![tall.clone()], build: Box::new(move |g, v| g.slice_rows(v[0], 1, m + 1)) },
        OpCase { name: "concat_cols", inputs: vec![a.clone(), wide], build: Box::new(|g, v| g.concat_cols(&[v[0], v[1]])) },
        OpCase { name: "concat_rows", inputs: vec![a.clone(), tall], build: Box::new(|g, v| g.concat_rows(&[v[0], v[1]])) },
        OpCase { name: "transpose", inputs: vec![c2], build: Box::new(|g, v| g.transpose(v[0])) },
        OpCase { name: "add_row", inputs: vec![a.clone(), row], build: Box::new(|g, v| g.add_row(v[0], v[1])) },
        OpCase { name: "element", inputs: vec![a.clone()], build: Box::new(move |g, v| g.element(v[0], idx)) },
        OpCase { name: "mean_rows", inputs: vec![a], build: Box::new(|g, v| g.mean_rows(v[0])) },
        OpCase { name: "layer_norm_rows", inputs: vec![ln], build: Box::new(|g, v| g.layer_norm_rows(v[0], 1e-5)) },
    ]
}

pub fn reference_config() -> RunConfig {
    RunConfig::from_toml_str(include_str!("../../../../configs/reference.toml")).unwrap()
}

/// The reference config cut down to a few hundred steps.
pub fn quick_config() -> RunConfig {
    let mut cfg = reference_config();
    cfg.schedule.steps_per_epoch = Some(60);
    cfg.schedule.warmup_steps = 40;
    cfg.schedule.block_steps = 60;
    cfg.retrain.steps = 100;
    cfg
}

fn labels_for(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

/// Zero biases can put a pre-activation exactly on the ReLU kink.
fn randomize_biases(model: &mut mpq_core::GroupedModel, rng: &mut impl Rng) {
    for l in &mut model.layers {
        if let Some(b) = &mut l.bias {
            *b = random(b.shape(), -0.5, 0.5, rng);
        }
    }
}

fn set_param(model: &mut mpq_core::GroupedModel, index: usize, value: &Tensor) {
    *model.params_mut()[index] = value.clone();
}

/// Full-precision MLP (4-8-3, 67 parameters): max relative error of the
/// cross-entropy gradient over every parameter.
pub fn mlp_fd_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut model = mpq_core::models::build_mlp(4, &[8], 3, 2, seed).unwrap();
    randomize_biases(&mut model, &mut r);
    let x = random(&[6, 4], -1.0, 1.0, &mut r);
    let labels = labels_for(6, 3, &mut r);
    let loss_of = |m: &mpq_core::GroupedModel, grads: bool| {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, grads);
        let logits = m.forward(&mut g, &bound.weights, &bound.biases, &x, None).unwrap();
        let ce = g.softmax_cross_entropy(logits, &labels).unwrap();
        let v = g.value(ce).item().unwrap();
        if grads {
            g.backward(ce).unwrap();
            (v, m.collect_grads(&g, &bound))
        } else {
            (v, Vec::new())
        }
    };
    let (_, analytic) = loss_of(&model, true);
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    assert!(params.iter().map(Tensor::numel).sum::<usize>() <= 200);
    let mut worst: f64 = 0.0;
    for (i, p) in params.iter().enumerate() {
        let numeric = numeric_grad(p, |x| {
            let mut m = model.clone();
            set_param(&mut m, i, x);
            loss_of(&m, false).0
        });
        worst = worst.max(max_rel_err(&analytic[i], &numeric, 1e-6));
    }
    worst
}

/// Supernet fixture for mixture gradient checks: MLP 4-8-8-3 with two
/// groups per layer, bits {0,1,2,4}, every group unfrozen.
pub struct MixtureFixture {
    pub net: mpq_core::Supernet,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub gumbel: Tensor,
    pub temperature: f64,
    pub objective: mpq_core::SizeObjectiveConfig,
    pub cost: Tensor,
}

impl MixtureFixture {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let model = mpq_core::models::build_mlp(4, &[8, 8], 3, 2, seed).unwrap();
        let mut model = model;
        randomize_biases(&mut model, &mut r);
        let mut net = mpq_core::Supernet::new(model, &[0, 1, 2, 4], 8, None, seed).unwrap();
        for l in 0..net.state.layers() {
            net.state.unfreeze_layer(l, &mut r).unwrap();
        }
        // Spread the logits so the relaxed selection is far from uniform.
        let beta = random(net.state.beta().shape(), -1.0, 1.0, &mut r);
        net.state.set_beta(beta).unwrap();
        let x = random(&[5, 4], -1.0, 1.0, &mut r);
        let labels = labels_for(5, 3, &mut r);
        let gumbel = mpq_core::supernet::sample_gumbel(net.state.rows(), net.state.k(), &mut r);
        let cost = mpq_core::objectives::cost_matrix(&net.state, &net.model);
        // A target far below any reachable size keeps the band fixed under
        // small perturbations.
        let objective = mpq_core::SizeObjectiveConfig::new(1.0, 0.1, 0.7).unwrap();
        MixtureFixture { net, x, labels, gumbel, temperature: 0.7, objective, cost }
    }

    fn val_loss(&self, beta: &Tensor, grads: bool) -> (f64, Option<Tensor>) {
        let mut g = Graph::new();
        let bound = self.net.model.bind(&mut g, false);
        let b = g.leaf(beta.clone(), grads);
        let sel = mpq_core::supernet::gumbel_softmax_var(&mut g, b, &self.gumbel, self.temperature).unwrap();
        let logits = self.net.forward(&mut g, &bound, &self.x, sel).unwrap();
        let val = mpq_core::objectives::validation_loss(&mut g, logits, &self.labels, b, sel, &self.cost, &self.objective)
            .unwrap();
        let v = g.value(val.total).item().unwrap();
        if !grads {
            return (v, None);
        }
        g.backward(val.total).unwrap();
        (v, g.grad(b).cloned())
    }

    /// Max relative error of ∂L_val/∂β against central differences.
    pub fn beta_error(&self) -> f64 {
        let beta = self.net.state.beta().clone();
        let analytic = self.val_loss(&beta, true).1.unwrap();
        let numeric = numeric_grad(&beta, |b| self.val_loss(b, false).0);
        max_rel_err(&analytic, &numeric, 1e-6)
    }

    /// The straight-through surrogate: every fake-quantized branch is
    /// `w + (fq(w₀) - w₀)` with the offset frozen at the current weights.
    /// Built from plain graph ops, independently of the supernet code.
    fn surrogate_loss(&self, params: &[Tensor], selection: &Tensor) -> f64 {
        let model = &self.net.model;
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut next = vars.iter().copied();
        for l in &model.layers {
            weights.push(next.next().unwrap());
            biases.push(l.bias.as_ref().map(|_| next.next().unwrap()));
        }
        let k = self.net.state.k();
        for (sid, &li) in model.searchable_layers().iter().enumerate() {
            let w0 = &model.layers[li].weight;
            let mut parts = Vec::new();
            for spec in &model.groups()[sid] {
                let row = self.net.state.row_index(sid, spec.group_id);
                let w = g.slice_cols(weights[li], spec.col_start, spec.col_end).unwrap();
                let w0g = w0.slice_cols(spec.col_start, spec.col_end).unwrap();
                let mut acc: Option<Var> = None;
                for (ki, &bits) in self.net.state.candidate_bits().iter().enumerate() {
                    let o = selection.data()[row * k + ki];
                    let term = if bits == 0 {
                        g.constant(Tensor::zeros(w0g.shape()))
                    } else {
                        let p = self.net.cache.params(sid, spec.group_id, bits).unwrap();
                        let offset = w0g.map(|a| p.round_trip(a) - a);
                        let c = g.constant(offset);
                        let shifted = g.add(w, c).unwrap();
                        g.scale(shifted, o)
                    };
                    acc = Some(match acc {
                        Some(a) => g.add(a, term).unwrap(),
                        None => term,
                    });
                }
                parts.push(acc.unwrap());
            }
            weights[li] = g.concat_cols(&parts).unwrap();
        }
        let logits = model.forward(&mut g, &weights, &biases, &self.x, None).unwrap();
        let ce = g.softmax_cross_entropy(logits, &self.labels).unwrap();
        g.value(ce).item().unwrap()
    }

    /// Max relative error of ∂CE/∂ω through the mixture against central
    /// differences of the straight-through surrogate.
    pub fn weight_error(&self) -> f64 {
        let selection = mpq_core::supernet::selection_with_noise(&self.net.state, self.temperature, self.gumbel.clone())
            .unwrap()
            .o;
        let mut g = Graph::new();
        let bound = self.net.model.bind(&mut g, true);
        let sel = g.constant(selection.clone());
        let logits = self.net.forward(&mut g, &bound, &self.x, sel).unwrap();
        let ce = g.softmax_cross_entropy(logits, &self.labels).unwrap();
        g.backward(ce).unwrap();
        let analytic = self.net.model.collect_grads(&g, &bound);
        let params: Vec<Tensor> = self.net.model.params().into_iter().cloned().collect();
        let mut worst: f64 = 0.0;
        for (i, p) in params.iter().enumerate() {
            let numeric = numeric_grad(p, |x| {
                let mut ps = params.clone();
                ps[i] = x.clone();
                self.surrogate_loss(&ps, &selection)
            });
            worst = worst.max(max_rel_err(&analytic[i], &numeric, 1e-6));
        }
        worst
    }
}

/// Largest gap between the argmax frequencies of `draws` relaxed samples
/// at temperature `t` and `softmax(beta)`.
pub fn gumbel_frequency_gap(beta: &[f64], t: f64, draws: usize, seed: u64) -> f64 {
    let k = beta.len();
    let mut r = rng(seed);
    let mut counts = vec![0usize; k];
    for _ in 0..draws {
        let g = mpq_core::supernet::sample_gumbel(1, k, &mut r);
        let o = mpq_core::supernet::gumbel_softmax(beta, t, g.data()).unwrap();
        let best = (0..k).max_by(|&a, &b| o[a].total_cmp(&o[b])).unwrap();
        counts[best] += 1;
    }
    let p = mpq_core::autodiff::softmax(beta);
    counts
        .iter()
        .zip(&p)
        .map(|(&c, &p)| (c as f64 / draws as f64 - p).abs())
        .fold(0.0, f64::max)
}
