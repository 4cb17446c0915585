//! Finite-difference cases for every differentiable op, the block, and the full loss.

use super::{grad_check, random_model, random_tensor, tiny_encoder};
use dld::encoder::{
    block_forward, encoder_forward, encoder_forward_vars, sample_gates, BoundBlock, BoundModel, GateVector, SeqLayout,
};
use dld::losses::{ctc_loss, ctc_loss_mean, kld_loss, CtcTarget, TeacherDist};
use dld::rng::{SeedStream, Stream};
use dld::{Result, Tape, Tensor, Var};

pub const INSTANCES: u64 = 20;
pub const OP_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-5;
pub const E2E_TOL: f64 = 1e-4;

pub struct GradCase {
    pub name: String,
    pub tol: f64,
    pub run: Box<dyn Fn(&mut SeedStream) -> f64>,
}

/// Worst relative error of each case over its random instances.
pub fn worst_errors(cases: &[GradCase]) -> Vec<(&str, f64, f64)> {
    cases
        .iter()
        .map(|c| {
            let worst = (0..INSTANCES).map(|i| (c.run)(&mut rng(i))).fold(0.0, f64::max);
            (c.name.as_str(), c.tol, worst)
        })
        .collect()
}

fn case(name: impl Into<String>, tol: f64, run: impl Fn(&mut SeedStream) -> f64 + 'static) -> GradCase {
    GradCase {
        name: name.into(),
        tol,
        run: Box::new(run),
    }
}

/// Contracts a tensor-valued output with fixed random weights into a scalar.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn rng(i: u64) -> SeedStream {
    SeedStream::new(1000 + i, Stream::Init)
}

fn dims(r: &mut SeedStream) -> (usize, usize, usize) {
    (r.uniform_int(1, 4), r.uniform_int(1, 4), r.uniform_int(1, 4))
}

fn random_target(r: &mut SeedStream, frames: usize, vocab: usize) -> CtcTarget {
    loop {
        let len = r.uniform_int(1, frames.min(4));
        let toks: Vec<u32> = (0..len).map(|_| r.uniform_int(1, vocab - 1) as u32).collect();
        let t = CtcTarget::new(toks).unwrap();
        if t.min_frames() <= frames {
            return t;
        }
    }
}

type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;

pub fn op_cases() -> Vec<GradCase> {
    let mut out = vec![
        case("matmul", OP_TOL, |r| {
            let (m, k, n) = dims(r);
            let w = random_tensor(r, &[m, n], 1.0);
            let ins = [random_tensor(r, &[m, k], 1.0), random_tensor(r, &[k, n], 1.0)];
            grad_check(&ins, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, &w)
            })
        }),
        case("bmm", OP_TOL, |r| {
            let (m, k, n) = dims(r);
            let b = r.uniform_int(1, 3);
            let w = random_tensor(r, &[b, m, n], 1.0);
            let ins = [random_tensor(r, &[b, m, k], 1.0), random_tensor(r, &[b, k, n], 1.0)];
            grad_check(&ins, |t, v| {
                let y = t.bmm(v[0], v[1])?;
                project(t, y, &w)
            })
        }),
    ];
    let binary: [(&str, Binary); 3] = [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul)];
    for (name, op) in binary {
        out.push(case(name, OP_TOL, move |r| {
            let (m, n, _) = dims(r);
            let w = random_tensor(r, &[m, n], 1.0);
            let ins = [random_tensor(r, &[m, n], 1.0), random_tensor(r, &[m, n], 1.0)];
            grad_check(&ins, |t, v| {
                let y = op(t, v[0], v[1])?;
                project(t, y, &w)
            })
        }));
    }
    out.extend([
        case("add_row", OP_TOL, |r| {
            let (m, n, _) = dims(r);
            let w = random_tensor(r, &[m, n], 1.0);
            let ins = [random_tensor(r, &[m, n], 1.0), random_tensor(r, &[n], 1.0)];
            grad_check(&ins, |t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, &w)
            })
        }),
        case("mul_scalar/add_scalar", OP_TOL, |r| {
            let (m, n, _) = dims(r);
            let c = r.standard_normal();
            let w = random_tensor(r, &[m, n], 1.0);
            let ins = [random_tensor(r, &[m, n], 1.0)];
            grad_check(&ins, |t, v| {
                let y = t.mul_scalar(v[0], c)?;
                let y = t.add_scalar(y, c)?;
                let y = t.mul(y, v[0])?;
                project(t, y, &w)
            })
        }),
        case("gelu", OP_TOL, |r| {
            let (m, n, _) = dims(r);
            let w = random_tensor(r, &[m, n], 1.0);
            let ins = [random_tensor(r, &[m, n], 2.0)];
            grad_check(&ins, |t, v| {
                let y = t.gelu(v[0])?;
                project(t, y, &w)
            })
        }),
        case("layer_norm", OP_TOL, |r| {
            let m = r.uniform_int(1, 4);
            let n = r.uniform_int(3, 6);
            let w = random_tensor(r, &[m, n], 1.0);
            let ins = [
                random_tensor(r, &[m, n], 1.0),
                random_tensor(r, &[n], 1.0),
                random_tensor(r, &[n], 1.0),
            ];
            grad_check(&ins, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, &w)
            })
        }),
    ]);
    for axis in 0..3 {
        out.extend([
            case(format!("softmax axis {axis}"), OP_TOL, move |r| {
                let (a, b, c) = dims(r);
                let w = random_tensor(r, &[a, b, c], 1.0);
                let ins = [random_tensor(r, &[a, b, c], 2.0)];
                grad_check(&ins, |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    project(t, y, &w)
                })
            }),
            case(format!("log_softmax axis {axis}"), OP_TOL, move |r| {
                let (a, b, c) = dims(r);
                let w = random_tensor(r, &[a, b, c], 1.0);
                let ins = [random_tensor(r, &[a, b, c], 2.0)];
                grad_check(&ins, |t, v| {
                    let y = t.log_softmax(v[0], axis)?;
                    project(t, y, &w)
                })
            }),
            case(format!("logsumexp axis {axis}"), OP_TOL, move |r| {
                let (a, b, c) = dims(r);
                let mut shape = vec![a, b, c];
                let ins = [random_tensor(r, &shape, 2.0)];
                shape.remove(axis);
                let w = random_tensor(r, &shape, 1.0);
                grad_check(&ins, |t, v| {
                    let y = t.logsumexp(v[0], axis)?;
                    project(t, y, &w)
                })
            }),
        ]);
    }
    out.extend([
        case("sum/mean", OP_TOL, |r| {
            let (m, n, _) = dims(r);
            let ins = [random_tensor(r, &[m, n], 1.0)];
            grad_check(&ins, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq)?;
                let m = t.mean(v[0])?;
                let m2 = t.mul(m, m)?;
                t.add(s, m2)
            })
        }),
        case("gather_rows", OP_TOL, |r| {
            let (m, n, _) = dims(r);
            let k = r.uniform_int(1, 6);
            let idx: Vec<usize> = (0..k).map(|_| r.uniform_int(0, m - 1)).collect();
            let w = random_tensor(r, &[k, n], 1.0);
            let ins = [random_tensor(r, &[m, n], 1.0)];
            grad_check(&ins, |t, v| {
                let y = t.gather_rows(v[0], &idx)?;
                project(t, y, &w)
            })
        }),
        case("transpose/reshape", OP_TOL, |r| {
            let (a, b, c) = dims(r);
            let w = random_tensor(r, &[a * b * c], 1.0);
            let w2 = random_tensor(r, &[c, b], 1.0);
            let ins = [random_tensor(r, &[a, b, c], 1.0), random_tensor(r, &[b, c], 1.0)];
            grad_check(&ins, |t, v| {
                let y = t.transpose(v[0])?;
                let y = t.reshape(y, &[a * b * c])?;
                let l1 = project(t, y, &w)?;
                let z = t.transpose(v[1])?;
                let l2 = project(t, z, &w2)?;
                t.add(l1, l2)
            })
        }),
        case("kld_loss", OP_TOL, |r| {
            let frames = r.uniform_int(1, 6);
            let vocab = r.uniform_int(2, 5);
            let teacher = random_tensor(r, &[frames, vocab], 2.0);
            let mut tp = Tape::new();
            let tv = tp.constant(&teacher);
            let tl = tp.log_softmax(tv, 1).unwrap();
            let teacher = TeacherDist::from_log_probs(&tp.tensor(tl)).unwrap();
            let ins = [random_tensor(r, &[frames, vocab], 2.0)];
            grad_check(&ins, |t, v| {
                let lp = t.log_softmax(v[0], 1)?;
                kld_loss(t, &teacher, lp)
            })
        }),
    ]);
    out
}

pub fn composite_cases() -> Vec<GradCase> {
    vec![
        case("ctc_loss on raw log-probs", BLOCK_TOL, |r| {
            let frames = r.uniform_int(1, 7);
            let vocab = r.uniform_int(2, 5);
            let target = random_target(r, frames, vocab);
            let ins = [random_tensor(r, &[frames, vocab], 1.0)];
            grad_check(&ins, |t, v| ctc_loss(t, v[0], &target))
        }),
        case("ctc_loss through log_softmax", BLOCK_TOL, |r| {
            let frames = r.uniform_int(1, 7);
            let vocab = r.uniform_int(2, 5);
            let target = random_target(r, frames, vocab);
            let ins = [random_tensor(r, &[frames, vocab], 2.0)];
            grad_check(&ins, |t, v| {
                let lp = t.log_softmax(v[0], 1)?;
                ctc_loss(t, lp, &target)
            })
        }),
        case("ctc_loss_mean", BLOCK_TOL, |r| {
            let layout = SeqLayout {
                batch: r.uniform_int(1, 3),
                seq_len: r.uniform_int(2, 6),
            };
            let vocab = r.uniform_int(2, 5);
            let targets: Vec<CtcTarget> = (0..layout.batch).map(|_| random_target(r, layout.seq_len, vocab)).collect();
            let ins = [random_tensor(r, &[layout.frames(), vocab], 2.0)];
            grad_check(&ins, |t, v| {
                let lp = t.log_softmax(v[0], 1)?;
                ctc_loss_mean(t, lp, layout, &targets)
            })
        }),
        case("block_forward", BLOCK_TOL, |r| {
            let config = tiny_encoder(r, 1);
            let model = random_model(&config, r.uniform_int(0, 1 << 20) as u64);
            let layout = SeqLayout {
                batch: r.uniform_int(1, 2),
                seq_len: r.uniform_int(1, 4),
            };
            let d = config.model_dim;
            let w = random_tensor(r, &[layout.frames(), d], 1.0);
            let mut ins: Vec<Tensor> = model.blocks[0].tensors().into_iter().cloned().collect();
            ins.push(random_tensor(r, &[layout.frames(), d], 1.0));
            grad_check(&ins, |t, v| {
                let bound = BoundBlock::from_vars(v[..12].try_into().unwrap());
                let y = block_forward(t, v[12], layout, &bound)?;
                project(t, y, &w)
            })
        }),
    ]
}

/// CTC + KL through a gated two-block encoder, w.r.t. every student parameter.
pub fn end_to_end_case() -> GradCase {
    case("ctc + kld, 2 blocks", E2E_TOL, |r| {
        let config = tiny_encoder(r, 2);
        let student = random_model(&config, r.uniform_int(0, 1 << 20) as u64);
        let reference = random_model(&config, r.uniform_int(0, 1 << 20) as u64);
        let gates = sample_gates(2, 0.3, r).unwrap();
        let layout = SeqLayout {
            batch: r.uniform_int(1, 2),
            seq_len: r.uniform_int(2, 5),
        };
        let targets: Vec<CtcTarget> = (0..layout.batch)
            .map(|_| random_target(r, layout.seq_len, config.vocab_size))
            .collect();
        let x = random_tensor(r, &[layout.frames(), config.input_dim], 1.0);
        let teacher = encoder_forward(&reference, &x, layout, &GateVector::all_on(2)).unwrap();
        let teacher = TeacherDist::from_log_probs(&teacher.log_probs).unwrap();
        let ins: Vec<Tensor> = student.named().into_iter().map(|(_, t)| t.clone()).collect();
        grad_check(&ins, |t, v| {
            let bound = BoundModel::from_vars(&config, v)?;
            let xv = t.constant(&x);
            let out = encoder_forward_vars(t, &bound, xv, layout, &gates)?;
            let ctc = ctc_loss_mean(t, out.log_probs, layout, &targets)?;
            let kld = kld_loss(t, &teacher, out.log_probs)?;
            t.add(ctc, kld)
        })
    })
}

pub fn all_cases() -> Vec<GradCase> {
    let mut c = op_cases();
    c.extend(composite_cases());
    c.push(end_to_end_case());
    c
}
