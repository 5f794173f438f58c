//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use r2q::analysis::{compression_ratio, mse, Method};
use r2q::gemm::{matmul_r2q, matmul_reference};
use r2q::onebit::{brute_force_onebit, closed_form_error, dequantize_onebit};
use r2q::qat::{kd_loss, train, Quantizer, TrainConfig};
use r2q::r2q::{codebook, dequantize, quantize};
use r2q::rtn::{dequantize_rtn, q_max, q_min, quantize_rtn};
use r2q::sampling::{random_matrix, rng, WeightDist};
use r2q::{GroupScheme, Matrix, R2QTensor, RtnTensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const DISTS: [WeightDist; 3] = [WeightDist::Gaussian, WeightDist::Laplace, WeightDist::Uniform];

fn onebit_optimality() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut n = 0;
    for dist in DISTS {
        for g in [4usize, 8, 12] {
            for _ in 0..1000 {
                let w = dist.sample_vec(&mut r, g, 1.0);
                let (_, _, brute) = brute_force_onebit(&w).map_err(|e| e.to_string())?;
                let closed = closed_form_error(&w);
                let rel = (closed - brute).abs() / brute.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                ensure(rel <= 1e-12, || format!("{dist} G={g}: closed {closed} vs brute {brute}"))?;
                n += 1;
            }
        }
    }
    Ok(format!("{n} groups, worst relative gap {worst:.2e}"))
}

fn refinement_never_hurts() -> Outcome {
    let mut n = 0usize;
    let mut seed = 100;
    for dist in DISTS.into_iter().chain([WeightDist::StudentT { dof: 3.0 }]) {
        for g in [2usize, 4, 8, 16, 64, 128] {
            let rows = 25_000 / g.max(8) + 1;
            let cols = g * 4;
            seed += 1;
            let m = random_matrix(dist, rows, cols, 1.0, seed);
            let scheme = GroupScheme::Grouped(g);
            let t = quantize(&m, scheme).map_err(|e| e.to_string())?;
            let coarse = dequantize_onebit(t.coarse());
            let fine = dequantize(&t);
            for (gi, ((w, c), f)) in m
                .as_slice()
                .chunks(g)
                .zip(coarse.as_slice().chunks(g))
                .zip(fine.as_slice().chunks(g))
                .enumerate()
            {
                let (ec, ef) = (sq_err(w, c), sq_err(w, f));
                ensure(ef <= ec * (1.0 + 1e-12), || {
                    format!("{dist} G={g} group {gi}: refined {ef} > coarse {ec}")
                })?;
                n += 1;
            }
        }
    }
    ensure(n >= 100_000, || format!("only {n} groups tested"))?;
    Ok(format!("{n} groups"))
}

fn codebook_membership() -> Outcome {
    let mut r = rng(3);
    let mut values = 0;
    for i in 0..100u64 {
        let g = [1usize, 2, 3, 4, 8, 16][i as usize % 6];
        let rows = r.random_range(1..12);
        let cols = g * r.random_range(1..6);
        let scheme = if i % 4 == 0 { GroupScheme::PerChannel } else { GroupScheme::Grouped(g) };
        let m = random_matrix(DISTS[i as usize % 3], rows, cols, 2.0, 1000 + i);
        let t = quantize(&m, scheme).map_err(|e| e.to_string())?;
        let d = dequantize(&t);
        let gl = t.group_len();
        let gpr = cols / gl;
        for rr in 0..rows {
            for c in 0..cols {
                let book = codebook(&t, rr * gpr + c / gl).map_err(|e| e.to_string())?;
                let v = d.get(rr, c);
                ensure(book.iter().any(|b| b.to_bits() == v.to_bits()), || {
                    format!("matrix {i} ({rr},{c}): {v} not in {book:?}")
                })?;
                values += 1;
            }
        }
    }
    Ok(format!("100 matrices, {values} values"))
}

fn worked_vector() -> Outcome {
    let m = Matrix::new(1, 4, vec![0.5, -1.0, 2.0, 0.1]).unwrap();
    let t = quantize(&m, GroupScheme::PerChannel).map_err(|e| e.to_string())?;
    let (a1, a2) = (t.coarse().alphas()[0], t.refine().alphas()[0]);
    ensure((a1 - 0.9).abs() <= 1e-15, || format!("a1 = {a1}"))?;
    ensure((a2 - 0.6).abs() <= 1e-15, || format!("a2 = {a2}"))?;
    let d = dequantize(&t);
    let want = [0.3, -0.3, 1.5, 0.3];
    for (got, w) in d.as_slice().iter().zip(want) {
        ensure((got - w).abs() <= 1e-15, || {
            format!("a1={a1} a2={a2} ok, reconstruction {:?} != expected {want:?}", d.as_slice())
        })?;
    }
    Ok(format!("a1={a1} a2={a2} reconstruction={:?}", d.as_slice()))
}

fn rtn_fixed_point() -> Outcome {
    let m = Matrix::new(1, 4, vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
    let t = quantize_rtn(&m, GroupScheme::PerChannel, 2).map_err(|e| e.to_string())?;
    ensure(dequantize_rtn(&t) == m, || "worked example not exact".into())?;

    let mut r = rng(5);
    for i in 0..100 {
        let k: u8 = r.random_range(2..=8);
        let (lo, hi) = (q_min(k), q_max(k));
        let g: usize = r.random_range(2..=16);
        let rows: usize = r.random_range(1..8);
        let gpr: usize = r.random_range(1..4);
        let mut data = Vec::with_capacity(rows * g * gpr);
        for _ in 0..rows * gpr {
            let s = 2f64.powi(r.random_range(-10..=4));
            let z: i64 = r.random_range(lo..=hi);
            let mut codes: Vec<i64> = (0..g).map(|_| r.random_range(lo..=hi)).collect();
            let a = r.random_range(0..g);
            let b = (a + 1 + r.random_range(0..g - 1)) % g;
            codes[a] = lo;
            codes[b] = hi;
            data.extend(codes.iter().map(|&c| s * (c - z) as f64));
        }
        let m = Matrix::new(rows, g * gpr, data).unwrap();
        let t = quantize_rtn(&m, GroupScheme::Grouped(g), k).map_err(|e| e.to_string())?;
        let d = dequantize_rtn(&t);
        ensure(d == m, || format!("lattice matrix {i} (k={k}, G={g}) moved"))?;
    }
    Ok("worked example exact, 100 lattice matrices fixed".into())
}

fn synthetic_pair() -> [(WeightDist, Matrix); 2] {
    [
        (WeightDist::Gaussian, random_matrix(WeightDist::Gaussian, 512, 512, 1.0, 6)),
        (WeightDist::Laplace, random_matrix(WeightDist::Laplace, 512, 512, 1.0, 7)),
    ]
}

fn row_mse(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|r| sq_err(a.row(r), b.row(r)) / a.cols() as f64)
        .collect()
}

fn error_ordering() -> Outcome {
    let mut notes = Vec::new();
    for (dist, m) in synthetic_pair() {
        let rq = dequantize(&quantize(&m, GroupScheme::PerChannel).map_err(|e| e.to_string())?);
        let rt = dequantize_rtn(&quantize_rtn(&m, GroupScheme::PerChannel, 2).map_err(|e| e.to_string())?);
        let (a, b) = (row_mse(&m, &rq), row_mse(&m, &rt));
        let wins = a.iter().zip(&b).filter(|(x, y)| x < y).count();
        let share = wins as f64 / a.len() as f64;
        let (ma, mb) = (mse(&m, &rq).unwrap(), mse(&m, &rt).unwrap());
        ensure(share >= 0.95, || format!("{dist}: R2Q better in only {:.1}% of channels", 100.0 * share))?;
        ensure(ma < mb, || format!("{dist}: aggregate {ma} vs {mb}"))?;
        notes.push(format!("{dist}: {:.1}% channels, mse {ma:.4} < {mb:.4}", 100.0 * share));
    }
    Ok(notes.join("; "))
}

fn stability_gap() -> Outcome {
    let mut notes = Vec::new();
    for (dist, m) in synthetic_pair() {
        let gap = |method: Method| -> Result<f64, String> {
            let at = |scheme| -> Result<f64, String> {
                let d = match method {
                    Method::R2Q => dequantize(&quantize(&m, scheme).map_err(|e| e.to_string())?),
                    _ => dequantize_rtn(&quantize_rtn(&m, scheme, 2).map_err(|e| e.to_string())?),
                };
                Ok(mse(&m, &d).unwrap())
            };
            Ok((at(GroupScheme::PerChannel)? - at(GroupScheme::Grouped(64))?).abs())
        };
        let (gr, gt) = (gap(Method::R2Q)?, gap(Method::Rtn { bits: 2 })?);
        ensure(gr < gt, || format!("{dist}: R2Q gap {gr} vs RTN gap {gt}"))?;
        notes.push(format!("{dist}: {gr:.4} < {gt:.4}"));
    }
    Ok(notes.join("; "))
}

fn gemm_equivalence() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let (m, k, n) = if i == 0 {
            (64, 128, 64)
        } else {
            (r.random_range(1..=64), r.random_range(1..=128), r.random_range(1..=64))
        };
        let w = random_matrix(DISTS[i as usize % 3], m, k, 1.0, 2000 + i);
        let x = random_matrix(WeightDist::Gaussian, k, n, 1.0, 3000 + i);
        let t = quantize(&w, GroupScheme::PerChannel).map_err(|e| e.to_string())?;
        let (y, ops) = matmul_r2q(&t, &x).map_err(|e| e.to_string())?;
        let reference = matmul_reference(&dequantize(&t), &x).map_err(|e| e.to_string())?;
        let scale = reference.max_abs().max(f64::MIN_POSITIVE);
        let diff = y
            .as_slice()
            .iter()
            .zip(reference.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff / scale);
        ensure(diff <= 1e-10 * scale, || format!("instance {i} ({m}x{k}x{n}): diff {diff}"))?;
        ensure(ops.float_muls == 2 * (m * n) as u64, || {
            format!("instance {i}: {} muls, expected {}", ops.float_muls, 2 * m * n)
        })?;
    }
    Ok(format!("50 instances, worst relative diff {worst:.2e}, muls = 2MN"))
}

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(9);
    for i in 0..100u64 {
        let g = [1usize, 3, 4, 8, 16, 64][i as usize % 6];
        let rows = r.random_range(1..10);
        let cols = g * r.random_range(1..5);
        let scheme = if i % 3 == 0 { GroupScheme::PerChannel } else { GroupScheme::Grouped(g) };
        let m = random_matrix(DISTS[i as usize % 3], rows, cols, 1.5, 4000 + i);

        let t = quantize(&m, scheme).map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("{i}.r2q"));
        t.save(&p).map_err(|e| e.to_string())?;
        let back = R2QTensor::load(&p).map_err(|e| e.to_string())?;
        let (a, b) = (dequantize(&t), dequantize(&back));
        ensure(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
            format!("R2Q case {i} differs after reload")
        })?;

        let k = r.random_range(2..=8);
        let t = quantize_rtn(&m, scheme, k).map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("{i}.rtn"));
        t.save(&p).map_err(|e| e.to_string())?;
        let back = RtnTensor::load(&p).map_err(|e| e.to_string())?;
        let (a, b) = (dequantize_rtn(&t), dequantize_rtn(&back));
        ensure(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
            format!("RTN case {i} differs after reload")
        })?;
    }
    Ok("100 cases per format bit-identical".into())
}

fn ste_contract() -> Outcome {
    use r2q::qat::ToyModel;
    let mut r = rng(10);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let dims = [r.random_range(2..7), r.random_range(2..7), r.random_range(2..7), r.random_range(2..6)];
        let mut model = ToyModel::random(&mut r, &dims, WeightDist::Gaussian, 1.0, 2.0).map_err(|e| e.to_string())?;
        let q = if i % 2 == 0 { Quantizer::R2Q } else { Quantizer::Rtn { bits: 2 } };
        model.set_quantization(q, GroupScheme::PerChannel).map_err(|e| e.to_string())?;
        let batch = r.random_range(1..5);
        let x = random_matrix(WeightDist::Gaussian, batch, dims[0], 1.0, 5000 + i);
        let target = random_matrix(WeightDist::Gaussian, batch, dims[3], 2.0, 6000 + i);

        let out = model.forward_quantized(&x).map_err(|e| e.to_string())?;
        let w_hat = model.cache().unwrap().effective_weights.clone();
        let (_, g) = kd_loss(&out, &target).map_err(|e| e.to_string())?;
        let grads = model.backward_ste(&g).map_err(|e| e.to_string())?;
        for (a, b) in grads.weights.iter().zip(&grads.effective_weights) {
            ensure(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
                format!("model {i}: shadow gradient differs from quantized-weight gradient")
            })?;
        }

        let loss_at = |ws: &[Matrix], m: &ToyModel| -> f64 {
            let y = m.forward_with_weights(&x, ws).unwrap();
            kd_loss(&y, &target).unwrap().0
        };
        let gmax = grads
            .effective_weights
            .iter()
            .flat_map(|m| m.as_slice())
            .chain(grads.biases.iter().flatten())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let check = |fd: f64, an: f64, what: &str| -> Result<f64, String> {
            let denom = an.abs().max(fd.abs()).max(1e-4 * gmax);
            let rel = (fd - an).abs() / denom;
            ensure(rel <= 1e-5, || format!("model {i} {what}: fd {fd} vs analytic {an}"))?;
            Ok(rel)
        };
        for l in 0..w_hat.len() {
            for e in 0..w_hat[l].len() {
                let mut p = w_hat.clone();
                p[l].as_mut_slice()[e] += h;
                let mut m_ = w_hat.clone();
                m_[l].as_mut_slice()[e] -= h;
                let fd = (loss_at(&p, &model) - loss_at(&m_, &model)) / (2.0 * h);
                worst = worst.max(check(fd, grads.effective_weights[l].as_slice()[e], "weight")?);
            }
            for b in 0..model.layers()[l].bias.len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                // biases enter the forward pass directly
                let bump = |mm: &mut ToyModel, d: f64| {
                    let mut layers = mm.layers().to_vec();
                    layers[l].bias[b] += d;
                    *mm = ToyModel::new(layers).unwrap();
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let fd = (loss_at(&w_hat, &plus) - loss_at(&w_hat, &minus)) / (2.0 * h);
                worst = worst.max(check(fd, grads.biases[l][b], "bias")?);
            }
        }
    }
    Ok(format!("20 models, bit-identical STE, worst relative fd gap {worst:.2e}"))
}

fn qat_ordering() -> Outcome {
    let mut loss = (Vec::new(), Vec::new());
    let mut spread = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let base = TrainConfig {
            steps: 500,
            seed,
            ..TrainConfig::default()
        };
        let rq = train(&TrainConfig { quantizer: Quantizer::R2Q, ..base.clone() }).map_err(|e| e.to_string())?;
        let rt = train(&TrainConfig { quantizer: Quantizer::Rtn { bits: 2 }, ..base }).map_err(|e| e.to_string())?;
        loss.0.push(rq.final_loss());
        loss.1.push(rt.final_loss());
        spread.0.push(rq.grad_norm_std(100));
        spread.1.push(rt.grad_norm_std(100));
    }
    let (lr, lt) = (median(loss.0), median(loss.1));
    let (sr, st) = (median(spread.0), median(spread.1));
    let detail = format!("median final loss {lr:.4e} vs {lt:.4e}, median grad-norm std {sr:.4e} vs {st:.4e}");
    ensure(lr <= lt && sr <= st, || detail.clone())?;
    Ok(detail)
}

fn compression() -> Outcome {
    let cr = compression_ratio(4096, 4096, GroupScheme::PerChannel, Method::R2Q).map_err(|e| e.to_string())?;
    ensure((0.125..=0.13).contains(&cr), || format!("ratio {cr}"))?;
    Ok(format!("ratio {:.4}%", 100.0 * cr))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("1-bit closed form matches exhaustive search", Some(Duration::from_secs(10)), onebit_optimality),
        ("refinement never increases error", Some(Duration::from_secs(10)), refinement_never_hurts),
        ("dequantized values lie in the group codebook", None, codebook_membership),
        ("hand-worked vector", None, worked_vector),
        ("RTN worked example and lattice fixed points", None, rtn_fixed_point),
        ("R2Q beats 2-bit RTN per channel", Some(Duration::from_secs(30)), error_ordering),
        ("R2Q is less sensitive to group size", None, stability_gap),
        ("binary GEMM equivalence and 2MN multiplies", Some(Duration::from_secs(10)), gemm_equivalence),
        ("save/load round trips bit-exactly", None, serialization),
        ("straight-through gradients", None, ste_contract),
        ("QAT loss and gradient-norm ordering", Some(Duration::from_secs(300)), qat_ordering),
        ("compression ratio", None, compression),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {took:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("[PASS] criterion {}: {name} ({detail}; {took:.2?})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {}: {name} ({detail}; {took:.2?})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
