//! Finite-difference checks shared by the gradient tests and the
//! acceptance run.

use mmdshift::kernels::{mmd2_biased, mmd2_joint, mmd2_multilayer, mixture_gram, KernelSpec};
use mmdshift::models::{
    apply_mask_soft, init_mlp, masker_forward, relaxed_mask_with_noise, uniform_noise, Mlp, MlpSpec,
};
use mmdshift::tensor::{gradient_check, ExpMixture, Matrix, Tape, Var};
use mmdshift::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks are not straddled.
fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Matrix {
    random(rows, cols, seed).mapv(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Contracts a matrix-valued node with fixed random weights.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(out);
    let w = tape.constant(random(r, c, seed));
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

/// Worst relative error per named check.
#[derive(Default)]
pub struct Suite {
    pub results: Vec<(String, f64)>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, x: &Matrix, f: F)
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let err = gradient_check(f, x, STEP).unwrap();
        self.results.push((name.to_string(), err));
    }

    pub fn worst(&self) -> (&str, f64) {
        self.results
            .iter()
            .map(|(n, e)| (n.as_str(), *e))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or(("none", 0.0))
    }
}

pub fn matmul_both_sides(s: &mut Suite) {
    let a = random(3, 4, 1);
    let b = random(4, 2, 2);
    s.check("matmul lhs", &a, |t, x| {
        let bv = t.constant(b.clone());
        let o = t.matmul(x, bv)?;
        contract(t, o, 9)
    });
    s.check("matmul rhs", &b, |t, x| {
        let av = t.constant(a.clone());
        let o = t.matmul(av, x)?;
        contract(t, o, 9)
    });
}

pub fn bias_add_sub_mul(s: &mut Suite) {
    let a = random(3, 4, 3);
    let b = random(3, 4, 4);
    let bias = random(1, 4, 5);
    s.check("bias rows", &a, |t, x| {
        let bv = t.constant(bias.clone());
        let o = t.add_rowvector_bias(x, bv)?;
        contract(t, o, 1)
    });
    s.check("bias vector", &bias, |t, x| {
        let av = t.constant(a.clone());
        let o = t.add_rowvector_bias(av, x)?;
        contract(t, o, 1)
    });
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let apply = move |t: &mut Tape, p: Var, q: Var| match op {
            0 => t.add(p, q),
            1 => t.sub(p, q),
            _ => t.mul(p, q),
        };
        s.check(name, &a, |t, x| {
            let bv = t.constant(b.clone());
            let o = apply(t, x, bv)?;
            contract(t, o, 2)
        });
        s.check(name, &b, |t, x| {
            let av = t.constant(a.clone());
            let o = apply(t, av, x)?;
            contract(t, o, 2)
        });
    }
}

pub fn elementwise_primitives(s: &mut Suite) {
    let x = away_from_zero(4, 3, 6);
    s.check("relu", &x, |t, v| {
        let o = t.relu(v)?;
        contract(t, o, 3)
    });
    s.check("sigmoid", &x, |t, v| {
        let o = t.sigmoid(v)?;
        contract(t, o, 3)
    });
    s.check("softplus", &x, |t, v| {
        let o = t.softplus(v)?;
        contract(t, o, 3)
    });
    s.check("exp", &x, |t, v| {
        let o = t.exp(v)?;
        contract(t, o, 3)
    });
    s.check("negate", &x, |t, v| {
        let o = t.negate(v)?;
        contract(t, o, 3)
    });
    s.check("square", &x, |t, v| {
        let o = t.square(v)?;
        contract(t, o, 3)
    });
    s.check("scalar_mul", &x, |t, v| {
        let o = t.scalar_mul(v, -2.5)?;
        contract(t, o, 3)
    });
    s.check("mean_all", &x, |t, v| {
        let o = t.square(v)?;
        t.mean_all(o)
    });
    s.check("sum_all", &x, |t, v| {
        let o = t.exp(v)?;
        t.sum_all(o)
    });
    let mix = ExpMixture::new(&[0.5, 2.0, 8.0]).unwrap();
    let odd = ExpMixture::new(&[0.3, 1.0, 1.7]).unwrap();
    let pos = x.mapv(f64::abs);
    s.check("exp_mixture", &pos, |t, v| {
        let o = t.exp_mixture(v, &mix)?;
        contract(t, o, 3)
    });
    s.check("exp_mixture generic", &pos, |t, v| {
        let o = t.exp_mixture(v, &odd)?;
        contract(t, o, 3)
    });
}

pub fn structural_primitives(s: &mut Suite) {
    let a = random(3, 2, 7);
    let b = random(3, 4, 8);
    s.check("concat lhs", &a, |t, x| {
        let bv = t.constant(b.clone());
        let o = t.concat_cols(x, bv)?;
        contract(t, o, 4)
    });
    s.check("concat rhs", &b, |t, x| {
        let av = t.constant(a.clone());
        let o = t.concat_cols(av, x)?;
        contract(t, o, 4)
    });
    s.check("gather rows", &b, |t, x| {
        let o = t.gather_rows(x, &[2, 0, 2, 1])?;
        contract(t, o, 4)
    });
    let c = random(5, 4, 9);
    s.check("pairwise lhs", &b, |t, x| {
        let cv = t.constant(c.clone());
        let o = t.pairwise_sq_dist(x, cv)?;
        contract(t, o, 4)
    });
    s.check("pairwise rhs", &c, |t, x| {
        let bv = t.constant(b.clone());
        let o = t.pairwise_sq_dist(bv, x)?;
        contract(t, o, 4)
    });
    s.check("pairwise self", &c, |t, x| {
        let o = t.pairwise_sq_dist(x, x)?;
        contract(t, o, 4)
    });
    let u = uniform_noise(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
    s.check("logistic noise", &b, |t, x| {
        let o = t.logistic_noise_shift(x, &u)?;
        contract(t, o, 4)
    });
}

pub fn mmd_estimators(s: &mut Suite) {
    let spec = KernelSpec::new(vec![0.5, 1.0, 2.0]).unwrap();
    let x = random(6, 3, 10);
    let y = random(5, 3, 11).mapv(|v| v + 0.5);
    s.check("mmd2 x", &x, |t, v| {
        let yv = t.constant(y.clone());
        mmd2_biased(t, v, yv, &spec)
    });
    s.check("mmd2 y", &y, |t, v| {
        let xv = t.constant(x.clone());
        mmd2_biased(t, xv, v, &spec)
    });
    s.check("mmd2 same input", &x, |t, v| {
        let shifted = t.scalar_mul(v, 1.5)?;
        mmd2_biased(t, v, shifted, &spec)
    });
    s.check("gram", &x, |t, v| {
        let yv = t.constant(y.clone());
        let k = mixture_gram(t, v, yv, &spec)?;
        contract(t, k, 5)
    });
    let x2 = random(6, 2, 12);
    let y2 = random(5, 2, 13);
    s.check("joint first layer", &x, |t, v| {
        let (a, b, c) = (t.constant(x2.clone()), t.constant(y.clone()), t.constant(y2.clone()));
        mmd2_joint(t, &[v, a], &[b, c], &spec)
    });
    s.check("joint second layer", &x2, |t, v| {
        let (a, b, c) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(y2.clone()));
        mmd2_joint(t, &[a, v], &[b, c], &spec)
    });
    s.check("multilayer", &x2, |t, v| {
        let (a, b, c) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(y2.clone()));
        mmd2_multilayer(t, &[a, v], &[b, c], &spec)
    });
}

pub fn relaxed_mask_and_masking(s: &mut Suite) {
    let logits = random(4, 3, 14);
    let u = uniform_noise(4, 3, &mut ChaCha8Rng::seed_from_u64(2));
    s.check("relaxed mask", &logits, |t, v| {
        let m = relaxed_mask_with_noise(t, v, &u, 0.7)?;
        contract(t, m, 6)
    });
    let x = random(4, 3, 15);
    let ind = Matrix::from_shape_fn((4, 3), |(i, j)| ((i + j) % 3 == 0) as u8 as f64);
    let mask = random(4, 3, 16).mapv(|v| 0.5 + 0.4 * v);
    let impute = [0.1, -0.2, 0.3];
    s.check("mask soft wrt mask", &mask, |t, m| {
        let (xv, iv) = (t.constant(x.clone()), t.constant(ind.clone()));
        let (xp, ih) = apply_mask_soft(t, xv, iv, m, &impute)?;
        let j = t.concat_cols(xp, ih)?;
        contract(t, j, 7)
    });
    s.check("mask soft wrt x", &x, |t, xv| {
        let (iv, mv) = (t.constant(ind.clone()), t.constant(mask.clone()));
        let (xp, _) = apply_mask_soft(t, xv, iv, mv, &impute)?;
        contract(t, xp, 7)
    });
}

/// Central differences over every network parameter of a loss built from
/// `model`; returns the worst relative error.
fn check_model<F>(model: &mut Mlp, loss: F) -> f64
where
    F: Fn(&Mlp, &mut Tape) -> Result<(Var, mmdshift::models::BoundMlp)>,
{
    let mut tape = Tape::new();
    let (out, bound) = loss(model, &mut tape).unwrap();
    let grads = tape.backward(out).unwrap();
    model.zero_grad();
    model.accumulate_grads(&bound, &grads).unwrap();
    let analytic: Vec<Matrix> = model
        .layers()
        .iter()
        .flat_map(|l| [l.weight.grad().unwrap().clone(), l.bias.grad().unwrap().clone()])
        .collect();
    let value = |m: &Mlp| {
        let mut t = Tape::new();
        let (o, _) = loss(m, &mut t).unwrap();
        t.scalar(o)
    };
    let mut worst = 0.0f64;
    for (p, a) in analytic.iter().enumerate() {
        for (idx, &g) in a.indexed_iter() {
            let mut probe = model.clone();
            let base = probe.params_mut()[p].data()[idx];
            probe.params_mut()[p].data_mut()[idx] = base + STEP;
            let up = value(&probe);
            probe.params_mut()[p].data_mut()[idx] = base - STEP;
            let down = value(&probe);
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max((g - numeric).abs() / g.abs().max(1.0));
        }
    }
    worst
}

pub fn representation_objective(s: &mut Suite) {
    let spec = KernelSpec::default();
    let mut model = init_mlp(&MlpSpec::new(4, vec![6, 5], 1), 3).unwrap();
    let x_tr = random(8, 4, 20);
    let x_te = random(7, 4, 21).mapv(|v| v + 0.3);
    let y: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
    let lambda = 2.0;
    let err = check_model(&mut model, |m, t| {
        let bound = m.bind(t);
        let xv = t.constant(x_tr.clone());
        let (hidden, out) = m.forward(t, &bound, xv)?;
        let yv = t.constant(Matrix::from_shape_vec((8, 1), y.clone()).unwrap());
        let diff = t.sub(out, yv)?;
        let sq = t.square(diff)?;
        let task = t.mean_all(sq)?;
        let tv = t.constant(x_te.clone());
        let th = m.forward_features(t, &bound, tv)?;
        let mmd = mmd2_biased(t, *hidden.last().unwrap(), *th.last().unwrap(), &spec)?;
        let scaled = t.scalar_mul(mmd, lambda)?;
        Ok((t.add(task, scaled)?, bound))
    });
    s.results.push(("representation objective".into(), err));
}

pub fn masking_objective(s: &mut Suite) {
    let spec = KernelSpec::default();
    let d = 3;
    let mut masker = init_mlp(&MlpSpec::new(2 * d, vec![8, 6], d), 4).unwrap();
    let x = random(7, d, 30);
    let ind = Matrix::from_shape_fn((7, d), |(i, j)| (i % 4 == j) as u8 as f64);
    let x_te = random(6, d, 31);
    let ind_te = Matrix::from_shape_fn((6, d), |(i, _)| (i % 2) as f64);
    let test_joint = ndarray::concatenate(ndarray::Axis(1), &[x_te.view(), ind_te.view()]).unwrap();
    let u = uniform_noise(7, d, &mut ChaCha8Rng::seed_from_u64(5));
    let impute = [0.0, 0.2, -0.1];
    let err = check_model(&mut masker, |m, t| {
        let bound = m.bind(t);
        let (xv, iv) = (t.constant(x.clone()), t.constant(ind.clone()));
        let logits = masker_forward(t, m, &bound, xv, iv)?;
        let mask = relaxed_mask_with_noise(t, logits, &u, 0.5)?;
        let (xp, ih) = apply_mask_soft(t, xv, iv, mask, &impute)?;
        let joint = t.concat_cols(xp, ih)?;
        let te = t.constant(test_joint.clone());
        Ok((mmd2_biased(t, joint, te, &spec)?, bound))
    });
    s.results.push(("masking objective".into(), err));
}

/// Every group, in order.
pub fn run_all() -> Suite {
    let mut s = Suite::default();
    matmul_both_sides(&mut s);
    bias_add_sub_mul(&mut s);
    elementwise_primitives(&mut s);
    structural_primitives(&mut s);
    mmd_estimators(&mut s);
    relaxed_mask_and_masking(&mut s);
    representation_objective(&mut s);
    masking_objective(&mut s);
    s
}
