//! Shared test utilities: a finite-difference gradient-check harness that
//! verifies every differentiable op and loss against central differences.

use gcmp::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f32 = 1e-3;
pub const FD_TOL: f32 = 1e-3;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduce an arbitrary tensor to a scalar through a fixed random linear
/// functional so gradient flow through every output element is exercised.
fn scalarize(tape: &Tape, y: &Var, aux_seed: u64) -> Var {
    let n: usize = y.shape().iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(aux_seed ^ 0x5ca1_ab1e);
    let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0) / n as f32).collect();
    let flat = tape.reshape(y, vec![1, n]).unwrap();
    let wv = Var::constant(Tensor::new(vec![n, 1], w).unwrap());
    let s = tape.matmul(&flat, &wv).unwrap();
    tape.reshape(&s, vec![1]).unwrap()
}

type BuildFn = Box<dyn Fn(&Tape, &[Var], u64) -> Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: BuildFn,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&Tape, &[Var], u64) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable op and loss, each expressed as a scalar-valued
/// function of its parameter tensors.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add_broadcast", &[&[2, 3], &[3]], |t, v, s| {
            scalarize(t, &t.add(&v[0], &v[1]).unwrap(), s)
        }),
        case("mul_broadcast", &[&[2, 3], &[1, 3]], |t, v, s| {
            scalarize(t, &t.mul(&v[0], &v[1]).unwrap(), s)
        }),
        case("scale", &[&[2, 3]], |t, v, s| scalarize(t, &t.scale(&v[0], 1.7).unwrap(), s)),
        case("sub", &[&[2, 3], &[2, 3]], |t, v, s| scalarize(t, &t.sub(&v[0], &v[1]).unwrap(), s)),
        case("matmul", &[&[2, 3], &[3, 4]], |t, v, s| {
            scalarize(t, &t.matmul(&v[0], &v[1]).unwrap(), s)
        }),
        case("matmul_batched", &[&[2, 2, 3], &[2, 3, 2]], |t, v, s| {
            scalarize(t, &t.matmul(&v[0], &v[1]).unwrap(), s)
        }),
        case("matmul_shared_b", &[&[2, 2, 3], &[3, 2]], |t, v, s| {
            scalarize(t, &t.matmul(&v[0], &v[1]).unwrap(), s)
        }),
        case("matmul_transb", &[&[2, 3], &[4, 3]], |t, v, s| {
            scalarize(t, &t.matmul_transb(&v[0], &v[1]).unwrap(), s)
        }),
        case("linear", &[&[2, 3], &[4, 3], &[4]], |t, v, s| {
            scalarize(t, &t.linear(&v[0], &v[1], &v[2]).unwrap(), s)
        }),
        case("transpose", &[&[2, 3]], |t, v, s| {
            scalarize(t, &t.transpose(&v[0], 0, 1).unwrap(), s)
        }),
        case("transpose_inner", &[&[2, 3, 2, 2]], |t, v, s| {
            scalarize(t, &t.transpose(&v[0], 1, 2).unwrap(), s)
        }),
        case("reshape", &[&[2, 6]], |t, v, s| {
            scalarize(t, &t.reshape(&v[0], vec![3, 4]).unwrap(), s)
        }),
        case("slice", &[&[2, 5]], |t, v, s| {
            scalarize(t, &t.slice(&v[0], 1, 1, 3).unwrap(), s)
        }),
        case("concat", &[&[2, 2], &[2, 3]], |t, v, s| {
            scalarize(t, &t.concat(&[&v[0], &v[1]], 1).unwrap(), s)
        }),
        case("gather", &[&[5, 3]], |t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            scalarize(t, &t.gather(&v[0], &ids, &[4]).unwrap(), s)
        }),
        case("layer_norm", &[&[3, 4], &[4], &[4]], |t, v, s| {
            scalarize(t, &t.layer_norm(&v[0], &v[1], &v[2], 1e-5).unwrap(), s)
        }),
        case("gelu", &[&[2, 4]], |t, v, s| scalarize(t, &t.gelu(&v[0]).unwrap(), s)),
        case("tanh", &[&[2, 4]], |t, v, s| scalarize(t, &t.tanh(&v[0]).unwrap(), s)),
        case("softmax", &[&[2, 4]], |t, v, s| scalarize(t, &t.softmax(&v[0]).unwrap(), s)),
        case("dropout", &[&[2, 5]], |t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xd20);
            scalarize(t, &t.dropout(&v[0], 0.3, &mut rng).unwrap(), s)
        }),
        case("cross_entropy", &[&[3, 4]], |t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            t.cross_entropy(&v[0], &targets, None).unwrap()
        }),
        case("cross_entropy_weighted", &[&[4, 3]], |t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let mut weights: Vec<f32> = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
            weights[0] = 0.0;
            t.cross_entropy(&v[0], &targets, Some(&weights)).unwrap()
        }),
        case("bce_with_logits", &[&[2, 3]], |t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let targets = rand_tensor(&mut rng, &[2, 3], 0.0, 1.0);
            t.bce_with_logits(&v[0], &targets).unwrap()
        }),
        case("mse", &[&[2, 3]], |t, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let targets = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
            t.mse(&v[0], &targets).unwrap()
        }),
        case("kl_div_both_sides", &[&[2, 3], &[2, 3]], |t, v, _| {
            // probability inputs produced by softmax so perturbed evaluations
            // still satisfy the distribution checks
            let p = t.softmax(&v[0]).unwrap();
            let q = t.softmax(&v[1]).unwrap();
            t.kl_div(&p, &q).unwrap()
        }),
        case(
            "composite_block",
            &[&[2, 3], &[4, 3], &[4], &[4], &[4], &[3, 4], &[3]],
            |t, v, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let targets: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
                let h = t.linear(&v[0], &v[1], &v[2]).unwrap();
                let h = t.gelu(&h).unwrap();
                let h = t.layer_norm(&h, &v[3], &v[4], 1e-5).unwrap();
                let logits = t.linear(&h, &v[5], &v[6]).unwrap();
                t.cross_entropy(&logits, &targets, None).unwrap()
            },
        ),
    ]
}

fn eval(case_: &OpCase, tensors: &[Tensor], aux_seed: u64) -> f32 {
    let tape = Tape::inference();
    let vars: Vec<Var> = tensors.iter().map(|t| Var::param(t.clone())).collect();
    (case_.build)(&tape, &vars, aux_seed).item()
}

/// Run `instances` random finite-difference checks for one op case.
/// Panics with a description of the first failing element.
pub fn fd_check(case_: &OpCase, instances: u64) {
    for inst in 0..instances {
        let seed = 1009 + inst * 7919;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> =
            case_.shapes.iter().map(|s| rand_tensor(&mut rng, s, -1.5, 1.5)).collect();
        let aux_seed = seed ^ 0x00ab_cdef;

        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| Var::param(t.clone())).collect();
        let loss = (case_.build)(&tape, &vars, aux_seed);
        tape.backward(&loss).unwrap();
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(&case_.shapes)
            .map(|(v, s)| v.grad().unwrap_or_else(|| Tensor::zeros(s)))
            .collect();

        for (pi, shape) in case_.shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            for e in 0..n {
                let mut plus = params.clone();
                plus[pi].data_mut()[e] += FD_EPS;
                let fp = eval(case_, &plus, aux_seed);
                let mut minus = params.clone();
                minus[pi].data_mut()[e] -= FD_EPS;
                let fm = eval(case_, &minus, aux_seed);
                let fd = (fp - fm) / (2.0 * FD_EPS);
                let a = grads[pi].data()[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                assert!(
                    rel < FD_TOL,
                    "{}: instance {inst} param {pi} elem {e}: analytic {a} vs fd {fd} (rel {rel})",
                    case_.name
                );
            }
        }
    }
}

/// Gradient-check every op case; returns the number of cases checked.
pub fn fd_check_all(instances: u64) -> usize {
    let cases = op_cases();
    for c in &cases {
        fd_check(c, instances);
    }
    cases.len()
}

pub fn find_case(name: &str) -> OpCase {
    op_cases()
        .into_iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("no op case named {name}"))
}
