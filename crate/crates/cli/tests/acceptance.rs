//! Acceptance suite: one check per criterion, one PASS/FAIL line each.
//!
//! Run with `cargo test -p flowseg-cli --test acceptance`. The
//! process exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use flowseg_cli::commands::{CKPT_BEST, CKPT_LAST, METRICS_CSV};
use flowseg_cli::{run, EXIT_IO, EXIT_OK, EXIT_USAGE};
use flowseg_core::data::{dataset_load, dataset_to_bytes};
use flowseg_core::diffcore::{grad_check, DiffError, Tape, Tensor, Var};
use flowseg_core::flows::FlowStack;
use flowseg_core::ncvi::{
    digamma, kl_terms, mc_kl, psi_term, update_mu_omega, update_mu_rho, update_mu_upsilon, update_pi, Hyperpriors,
    McEstimate, SmoothnessFields, VariationalState,
};
use flowseg_core::pipeline::{
    checkpoint_from_bytes, checkpoint_to_bytes, forward_tape, sample_loss, ForwardOptions, Model, ModelConfig, Version,
};
use flowseg_core::rng::{seeded, stream};
use flowseg_core::sde::{driftless_path, ou_analytic_moments, replay, OuParams};
use flowseg_core::spatial::{gumbel_softmax, Field2D};
use rand::Rng as _;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within_budget(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure!(
        elapsed.as_secs_f64() < limit_s as f64,
        "took {:.1} s, limit {limit_s} s",
        elapsed.as_secs_f64()
    );
    Ok(())
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// 1. flows

fn perturbed_flow(dim: usize, seed: u64) -> FlowStack {
    let mut rng = seeded(seed);
    let mut f = FlowStack::new(dim, 4, 16, &mut rng).unwrap();
    f.perturb_outputs(0.3, &mut rng);
    f
}

/// log|det J| of `push` from a central-difference Jacobian, by partial-pivot LU.
fn numerical_logdet(f: &FlowStack, u: &[f64]) -> Result<f64, String> {
    let (d, h) = (u.len(), 1e-5);
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let (mut up, mut dn) = (u.to_vec(), u.to_vec());
        up[j] += h;
        dn[j] -= h;
        let (zp, _) = ok(f.push(&up))?;
        let (zm, _) = ok(f.push(&dn))?;
        for i in 0..d {
            jac[i][j] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    let mut logdet = 0.0;
    for c in 0..d {
        let p = (c..d).max_by(|&a, &b| jac[a][c].abs().total_cmp(&jac[b][c].abs())).unwrap();
        jac.swap(c, p);
        let pivot = jac[c][c];
        logdet += pivot.abs().ln();
        for r in c + 1..d {
            let factor = jac[r][c] / pivot;
            for k in c..d {
                jac[r][k] -= factor * jac[c][k];
            }
        }
    }
    Ok(logdet)
}

fn trapezoid_mass(f: &FlowStack, lo: f64, hi: f64, n: usize) -> Result<f64, String> {
    let h = (hi - lo) / n as f64;
    let weight = |i: usize| if i == 0 || i == n { 0.5 } else { 1.0 };
    let at = |i: usize| lo + i as f64 * h;
    let mut mass = 0.0;
    if f.dim() == 1 {
        for i in 0..=n {
            mass += weight(i) * ok(f.log_density(&[at(i)]))?.exp();
        }
        return Ok(mass * h);
    }
    for i in 0..=n {
        for j in 0..=n {
            mass += weight(i) * weight(j) * ok(f.log_density(&[at(i), at(j)]))?.exp();
        }
    }
    Ok(mass * h * h)
}

fn flow_correctness() -> Outcome {
    let start = Instant::now();
    let (mut worst_rt, mut worst_ld) = (0.0f64, 0.0f64);
    for d in [2usize, 4, 8] {
        let f = perturbed_flow(d, 10 + d as u64);
        let mut rng = seeded(d as u64);
        for _ in 0..100 {
            let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let (z, ld) = ok(f.push(&u))?;
            let (back, _) = ok(f.pull(&z))?;
            let rt = u.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let num = numerical_logdet(&f, &u)?;
            // Relative error, with an absolute floor for log-dets near zero.
            let rel = (ld - num).abs() / ld.abs().max(num.abs()).max(1e-4);
            worst_rt = worst_rt.max(rt);
            worst_ld = worst_ld.max(rel);
        }
    }
    ensure!(worst_rt < 1e-6, "round-trip error {worst_rt:e}");
    ensure!(worst_ld < 1e-3, "log-det relative error {worst_ld:e}");
    let m1 = trapezoid_mass(&perturbed_flow(1, 3), -15.0, 15.0, 6000)?;
    let m2 = trapezoid_mass(&perturbed_flow(2, 5), -12.0, 12.0, 480)?;
    ensure!((m1 - 1.0).abs() < 1e-2 && (m2 - 1.0).abs() < 1e-2, "density mass {m1}, {m2}");
    within_budget(start.elapsed(), 30)?;
    Ok(format!(
        "round trip {worst_rt:.1e}, log-det rel {worst_ld:.1e}, mass 1D {m1:.5} 2D {m2:.5}"
    ))
}

// 2. Girsanov martingale

fn girsanov_martingale() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    for (sigma, horizon, n_steps, seed) in [(1.0, 1.0, 8usize, 1u64), (0.5, 1.0, 64, 2)] {
        let p = ok(OuParams::scalar(0.5, sigma, horizon, n_steps))?;
        let mut rng = seeded(seed);
        let mut w = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            w.push(ok(driftless_path(&p, &[0.0], &mut rng))?.log_rn_weight.exp());
        }
        let est = McEstimate::from_samples(&w);
        let z = (est.mean - 1.0) / est.std_error;
        ensure!(z.abs() <= 3.0, "({sigma},{horizon},{n_steps}): mean {} se {}", est.mean, est.std_error);
        notes.push(format!("({sigma},{horizon},{n_steps}) mean {:.4} ({z:+.2} SE)", est.mean));
    }
    within_budget(start.elapsed(), 60)?;
    Ok(notes.join(", "))
}

// 3. OU moments

const PATHS: usize = 100_000;

fn terminal_states(z0: f64, mu: f64, sigma: f64, increments: &[Vec<f64>]) -> Result<Vec<f64>, String> {
    let p = ok(OuParams::new(
        Tensor::full(&[PATHS], mu),
        Tensor::full(&[PATHS], sigma),
        1.0,
        increments.len(),
    ))?;
    Ok(ok(replay(&p, &vec![z0; PATHS], increments))?.pop().unwrap())
}

fn brownian_increments(n_steps: usize, seed: u64) -> Vec<Vec<f64>> {
    let sd = (1.0 / n_steps as f64).sqrt();
    let mut rng = seeded(seed);
    (0..n_steps)
        .map(|_| (0..PATHS).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn ou_moments() -> Outcome {
    let start = Instant::now();
    let (z0, mu, sigma) = (1.5, -0.3, 0.8);
    let z = terminal_states(z0, mu, sigma, &brownian_increments(1024, 7))?;
    let m = McEstimate::from_samples(&z);
    let sq: Vec<f64> = z.iter().map(|x| (x - m.mean).powi(2)).collect();
    let v = McEstimate::from_samples(&sq);
    let (m_true, v_true) = ok(ou_analytic_moments(z0, mu, sigma, 1.0))?;
    let zm = (m.mean - m_true) / m.std_error;
    let zv = (v.mean - v_true) / v.std_error;
    ensure!(zm.abs() <= 3.0 && zv.abs() <= 3.0, "mean {zm:+.2} SE, variance {zv:+.2} SE");

    // Same Brownian paths on grids of 8, 16, 32 and 64 steps.
    let (m_true, _) = ok(ou_analytic_moments(2.0, 0.0, 1.0, 1.0))?;
    let mut incs = brownian_increments(64, 8);
    let mut biases = Vec::new();
    for _ in 0..4 {
        let z = terminal_states(2.0, 0.0, 1.0, &incs)?;
        biases.push((z.iter().sum::<f64>() / PATHS as f64 - m_true).abs());
        incs = incs
            .chunks(2)
            .map(|pair| pair[0].iter().zip(&pair[1]).map(|(a, b)| a + b).collect())
            .collect();
    }
    biases.reverse();
    ensure!(biases.windows(2).all(|w| w[1] < w[0]), "bias not shrinking: {biases:?}");
    within_budget(start.elapsed(), 60)?;
    Ok(format!(
        "mean {zm:+.2} SE, variance {zv:+.2} SE, bias n=8..64 {:?}",
        biases.iter().map(|b| format!("{b:.1e}")).collect::<Vec<_>>()
    ))
}

// 4. MC-KL calibration

fn mc_kl_calibration() -> Outcome {
    let identity = ok(FlowStack::new(4, 4, 8, &mut seeded(0)))?;
    let id = ok(mc_kl(&identity, 1000, &mut seeded(1)))?;
    ensure!(id.mean.abs() <= 3.0 * id.std_error + 1e-12, "identity KL {id:?}");

    let mut shift = ok(FlowStack::new(1, 1, 4, &mut seeded(0)))?;
    let b_out = shift.maf(0).unwrap().b_out;
    ok(shift.store_mut().get_mut(b_out).assign(&[1.0, 0.0]))?;
    let (z, _) = ok(shift.push(&[0.0]))?;
    ensure!(z == [1.0], "flow is not a unit shift: {z:?}");
    let est = ok(mc_kl(&shift, 100_000, &mut seeded(2)))?;
    let zs = (est.mean - 0.5) / est.std_error;
    ensure!(zs.abs() <= 3.0, "unit shift KL {} ({zs:+.2} SE)", est.mean);
    Ok(format!("identity {:.1e}, unit shift {:.4} ({zs:+.2} SE)", id.mean, est.mean))
}

// 5. closed-form updates

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// `psi(x) = -gamma + sum_{n>=0} [1/(n+1) - 1/(n+x)]`, tail past `N` in closed form.
fn digamma_series(x: f64) -> f64 {
    let n_terms = 2_000_000usize;
    let mut s = 0.0;
    for n in (0..n_terms).rev() {
        let n = n as f64;
        s += 1.0 / (n + 1.0) - 1.0 / (n + x);
    }
    let n = n_terms as f64;
    -EULER_GAMMA + s + ((n + x) / (n + 1.0)).ln() - 0.5 / (n + x) + 0.5 / (n + 1.0)
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn closed_form_updates() -> Outcome {
    const K: usize = 3;
    const P: usize = 64;
    let hp = Hyperpriors::default();
    let raw = random(&[K, 8, 8], 0.01, 1.0, 11);
    let mut mu_z = vec![0.0; K * P];
    for px in 0..P {
        let total: f64 = (0..K).map(|k| raw.values()[k * P + px]).sum();
        for k in 0..K {
            mu_z[k * P + px] = raw.values()[k * P + px] / total;
        }
    }
    let mu_z = ok(Tensor::new(vec![K, 8, 8], mu_z))?;
    let r = random(&[8, 8], -2.0, 2.0, 12);
    let gz = random(&[K, 8, 8], 0.0, 0.5, 13);
    let sz = random(&[K, 8, 8], 0.05, 1.0, 14);
    let gx = random(&[8, 8], 0.0, 0.5, 15);
    let sx = random(&[8, 8], 0.05, 1.0, 16);
    let mu_m = random(&[8, 8], -1.0, 1.0, 17);
    let sm = random(&[8, 8], 0.05, 1.0, 18);
    let (r_, z_, gz_, sz_, gx_, sx_) = (r.values(), mu_z.values(), gz.values(), sz.values(), gx.values(), sx.values());

    let mut worst = Vec::new();
    let rho = ok(update_mu_rho(&r, &hp))?;
    let want: Vec<f64> = (0..P).map(|p| (2.0 * hp.gamma_rho + 1.0) / (r_[p] * r_[p] + 2.0 * hp.phi_rho)).collect();
    worst.push(("mu_rho", max_rel_diff(rho.values(), &want)));

    let ups = ok(update_mu_upsilon(&mu_z, &gx, &sx, K, &hp))?;
    let want: Vec<f64> = (0..P)
        .map(|p| {
            let den: f64 = (0..K).map(|k| z_[k * P + p] * (gx_[p] + 2.0 * sx_[p] * sx_[p])).sum();
            (2.0 * hp.gamma_upsilon + K as f64) / (den + 2.0 * hp.phi_upsilon)
        })
        .collect();
    worst.push(("mu_upsilon", max_rel_diff(ups.values(), &want)));

    let pi = ok(update_pi(&mu_z))?;
    let want: Vec<f64> = (0..K).map(|k| (0..P).map(|p| z_[k * P + p]).sum::<f64>() / P as f64).collect();
    worst.push(("pi", max_rel_diff(pi.values(), &want)));

    let omega = ok(update_mu_omega(&pi, &gz, &sz, &hp))?;
    let mut want = Vec::new();
    for k in 0..K {
        for p in 0..P {
            let ev = gz_[k * P + p] + 2.0 * sz_[k * P + p] * sz_[k * P + p];
            want.push((2.0 * hp.gamma_omega + 1.0) / (pi.values()[k] * ev + 2.0 * hp.phi_omega));
        }
    }
    worst.push(("mu_omega", max_rel_diff(omega.values(), &want)));

    let a = ok(Tensor::vector(vec![2.0, 3.5, 0.7]))?;
    let b = ok(Tensor::vector(vec![2.0, 1.2, 4.0]))?;
    let psi = ok(psi_term(&a, &b))?;
    let want: Vec<f64> = (0..3)
        .map(|k| digamma_series(a.values()[k] + b.values()[k]) - digamma_series(b.values()[k]))
        .collect();
    worst.push(("psi_term", max_rel_diff(psi.values(), &want)));

    let fields = SmoothnessFields {
        mu_z: &mu_z,
        grad_sq_mu_z: &gz,
        sigma_z: &sz,
        grad_sq_mu_x: &gx,
        sigma_x: &sx,
    };
    let state = ok(VariationalState::update(rho, &fields, &hp))?;
    let kl = ok(kl_terms(&state, &r, &fields, &mu_m, &sm, &hp))?;
    let (mut y, mut z, mut x, mut m) = (0.0, 0.0, 0.0, 0.0);
    for p in 0..P {
        y += state.mu_rho.values()[p] * r_[p] * r_[p];
        let ev_x = gx_[p] + 2.0 * sx_[p] * sx_[p];
        for k in 0..K {
            let ev_z = gz_[k * P + p] + 2.0 * sz_[k * P + p] * sz_[k * P + p];
            z += state.psi.values()[k] * state.mu_omega.values()[k * P + p] * ev_z;
            x += z_[k * P + p] * state.mu_upsilon.values()[p] * ev_x;
        }
        m += hp.sigma0 * (mu_m.values()[p].powi(2) + sm.values()[p].powi(2));
    }
    worst.push(("kl_terms", max_rel_diff(&[kl.kl_y, kl.kl_z, kl.kl_x, kl.kl_m], &[y, z, x, m])));
    for (what, err) in &worst {
        ensure!(*err <= 1e-9, "{what}: {err:e}");
    }

    let spot_rho = ok(update_mu_rho(&Tensor::scalar(0.0), &hp))?.values()[0];
    let loose = Hyperpriors { phi_rho: 0.5, ..hp };
    let spot_loose = ok(update_mu_rho(&Tensor::scalar(1.0), &loose))?.values()[0];
    let zeros = Tensor::full(&[4], 0.0);
    let spot_ups = ok(update_mu_upsilon(&Tensor::full(&[2, 4], 0.5), &zeros, &zeros, 2, &hp))?.values()[0];
    ensure!(
        spot_rho == 2.5e6 && spot_loose == 2.5 && spot_ups == 3e8,
        "spot values {spot_rho} {spot_loose} {spot_ups}"
    );
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(format!("max oracle diff {max:.1e}; spot values 2.5e6, 2.5, 3e8 exact"))
}

// 6. digamma

fn digamma_checks() -> Outcome {
    let mut worst = 0.0f64;
    for (x, exact) in [(1.0, -EULER_GAMMA), (2.0, 1.0 - EULER_GAMMA)] {
        let d = ok(digamma(x))?;
        let series = digamma_series(x);
        ensure!((d - series).abs() < 1e-9 && (d - exact).abs() < 1e-9, "psi({x}) = {d}, series {series}");
        worst = worst.max((d - series).abs());
    }
    let mut rec = 0.0f64;
    for i in 1..=1000 {
        let x = i as f64 / 100.0;
        rec = rec.max((ok(digamma(x + 1.0))? - ok(digamma(x))? - 1.0 / x).abs());
    }
    ensure!(rec < 1e-10, "recurrence error {rec:e}");
    Ok(format!("series diff {worst:.1e}, recurrence {rec:.1e} on (0,10]"))
}

// 7. autodiff

fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var, DiffError> {
    let shape = tape.shape(v).to_vec();
    let w = random(&shape, -1.0, 1.0, 999);
    let wv = tape.constant(&shape, w.values().to_vec())?;
    let p = tape.mul(v, wv)?;
    tape.sum(p)
}

type Op = Box<dyn Fn(&mut Tape, Var) -> Result<Var, DiffError>>;

fn with_constant(c: Tensor, f: fn(&mut Tape, Var, Var) -> Result<Var, DiffError>) -> Op {
    Box::new(move |t, v| {
        let cv = t.constant(c.shape(), c.values().to_vec())?;
        f(t, v, cv)
    })
}

fn full_forward_error() -> Result<f64, String> {
    let cfg = ModelConfig {
        height: 8,
        width: 8,
        base_channels: 2,
        flow_layers: 2,
        flow_hidden: 4,
        mc_samples: 4,
        batch_size: 2,
        ..ModelConfig::for_version(Version::Ver5)
    };
    let mut model = ok(Model::new(&cfg))?;
    model.flow_mut().perturb_outputs(0.2, &mut seeded(77));
    let ds = ok(flowseg_core::data::gen_dataset(
        &flowseg_core::data::DomainConfig::named("A").unwrap(),
        1,
        8,
        8,
        &mut seeded(3),
    ))?;
    let s = &ds.samples[0];
    let mut target = vec![0.0; 2 * 64];
    for (i, l) in s.mask.iter().enumerate() {
        target[usize::from(*l) * 64 + i] = 1.0;
    }
    let target = ok(Tensor::new(vec![2, 64], target))?;

    let forward = |t: &mut Tape, bound: &_, opts: &ForwardOptions| {
        let img = t.constant(&[1, 8, 8], s.image.clone())?;
        forward_tape(t, &model, bound, img, opts, &mut stream(5, &[1])).map_err(|e| DiffError::Invalid(e.to_string()))
    };
    // Hold the variational state fixed so the loss is a smooth function of the parameters.
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let first = ok(forward(&mut tape, &bound, &ForwardOptions::train(0.7)))?;
    let opts = ForwardOptions {
        frozen_state: Some(first.state.clone()),
        ..ForwardOptions::train(0.7)
    };

    let mut worst = 0.0f64;
    let net: Vec<_> = model.store().ids().map(|i| (false, i)).collect();
    let flow: Vec<_> = model.flow().store().ids().map(|i| (true, i)).collect();
    for (is_flow, id) in net.into_iter().chain(flow) {
        let x = if is_flow { model.flow().store().get(id) } else { model.store().get(id) }.clone();
        let err = ok(grad_check(
            |t, v| {
                let mut bound = model.bind(t);
                if is_flow {
                    bound.flow = bound.flow.with_var(id, v);
                } else {
                    bound.net = bound.net.with_var(id, v);
                }
                let fwd = forward(t, &bound, &opts)?;
                sample_loss(t, &model, &fwd, &target, 1.0)
                    .map(|l| l.total)
                    .map_err(|e| DiffError::Invalid(e.to_string()))
            },
            &x,
            1e-5,
        ))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn autodiff() -> Outcome {
    let x = random(&[8, 8], -1.5, 1.5, 1);
    let pos = random(&[8, 8], 0.2, 3.0, 2);
    let other = random(&[8, 8], 0.5, 2.0, 4);
    let ops: Vec<(&str, &Tensor, Op)> = vec![
        ("neg", &x, Box::new(|t, v| t.neg(v))),
        ("exp", &x, Box::new(|t, v| t.exp(v))),
        ("log", &pos, Box::new(|t, v| t.log(v))),
        ("tanh", &x, Box::new(|t, v| t.tanh(v))),
        ("square", &x, Box::new(|t, v| t.square(v))),
        ("scale", &x, Box::new(|t, v| t.scale(v, -2.5))),
        ("offset", &x, Box::new(|t, v| t.offset(v, 0.75))),
        ("sum", &x, Box::new(|t, v| t.sum(v))),
        ("mean", &x, Box::new(|t, v| t.mean(v))),
        ("sum_axis", &x, Box::new(|t, v| t.sum_axis(v, 1))),
        ("softmax", &x, Box::new(|t, v| t.softmax(v, 0))),
        ("max", &x, Box::new(|t, v| t.max(v, 1))),
        ("reshape", &x, Box::new(|t, v| t.reshape(v, &[4, 16]))),
        ("slice", &x, Box::new(|t, v| t.slice(v, 1, 2, 5))),
        ("add", &x, with_constant(other.clone(), |t, v, c| t.add(v, c))),
        ("sub", &x, with_constant(other.clone(), |t, v, c| t.sub(c, v))),
        ("mul", &x, with_constant(other.clone(), |t, v, c| t.mul(v, c))),
        ("div", &other, with_constant(x.clone(), |t, v, c| t.div(c, v))),
        ("matmul", &x, with_constant(other.clone(), |t, v, c| t.matmul(v, c))),
        ("concat", &x, with_constant(other.clone(), |t, v, c| t.concat(&[c, v], 0))),
        ("broadcast", &x, Box::new(|t, v| {
            let row = t.slice(v, 0, 0, 1)?;
            t.broadcast(row, &[8, 8])
        })),
        ("conv2d", &x, with_constant(random(&[2, 1, 3, 3], -0.5, 0.5, 7), |t, v, k| {
            let img = t.reshape(v, &[1, 8, 8])?;
            t.conv2d(img, k)
        })),
    ];
    let mut worst = (0.0f64, "");
    for (name, input, op) in &ops {
        let err = ok(grad_check(
            |t, v| {
                let out = op(t, v)?;
                weighted_sum(t, out)
            },
            input,
            1e-5,
        ))?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    ensure!(worst.0 < 1e-4, "{}: grad_check error {:e}", worst.1, worst.0);
    let full = full_forward_error()?;
    ensure!(full < 1e-4, "full forward pass: grad_check error {full:e}");
    Ok(format!("{} primitives, worst {:.1e} ({}); full forward {full:.1e}", ops.len(), worst.0, worst.1))
}

// 8. Gumbel-Softmax

fn gumbel() -> Outcome {
    let logits = Field2D::new(3, 8, 8, random(&[3, 8, 8], -2.0, 2.0, 1).values().to_vec()).map_err(|e| e.to_string())?;
    let mut simplex = 0.0f64;
    for tau in [0.1, 0.5, 1.0, 4.0] {
        let y = ok(gumbel_softmax(&logits, tau, &mut seeded(2), false))?;
        ensure!(y.values().iter().all(|v| *v >= 0.0), "negative probability at tau {tau}");
        for px in 0..64 {
            let s: f64 = (0..3).map(|k| y.values()[k * 64 + px]).sum();
            simplex = simplex.max((s - 1.0).abs());
        }
    }
    ensure!(simplex < 1e-9, "simplex error {simplex:e}");

    let n = 100_000;
    let sym = ok(Field2D::new(2, 1, n, vec![0.3; 2 * n]))?;
    let y = ok(gumbel_softmax(&sym, 1.0, &mut seeded(5), true))?;
    let est = McEstimate::from_samples(&y.values()[..n]);
    let zf = (est.mean - 0.5) / est.std_error;
    ensure!(zf.abs() <= 3.0, "symmetric frequency {} ({zf:+.2} SE)", est.mean);

    let n = 10_000;
    let mut vals = vec![5.0; n];
    vals.extend(vec![0.0; n]);
    let peaked = ok(Field2D::new(2, 1, n, vals))?;
    let y = ok(gumbel_softmax(&peaked, 0.01, &mut seeded(6), false))?;
    let conc = y.values()[..n].iter().filter(|v| **v > 0.99).count() as f64 / n as f64;
    ensure!(conc > 0.99, "tau=0.01 concentration {conc}");
    Ok(format!("simplex {simplex:.1e}, frequency {:.4} ({zf:+.2} SE), concentration {conc:.4}", est.mean))
}

// 9-11. end to end through the command line

fn quiet_run(args: &[&str]) -> i32 {
    let mut full = vec!["flowseg"];
    full.extend_from_slice(args);
    run(full)
}

fn gen(dir: &Path, domain: &str, n: usize, seed: u64, name: &str, extra: &[&str]) -> Result<String, String> {
    let out = dir.join(name).display().to_string();
    let (n, seed) = (n.to_string(), seed.to_string());
    let mut args = vec!["gen-data", "--domain", domain, "--n", &n, "--seed", &seed, "--out", &out];
    args.extend_from_slice(extra);
    ensure!(quiet_run(&args) == EXIT_OK, "gen-data {domain} failed");
    Ok(out)
}

fn column(path: &Path, col: usize) -> Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap_or("").parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}

const TOY_EPOCHS: &str = "4";

fn toy_end_to_end(dir: &Path) -> Outcome {
    let train = gen(dir, "A", 200, 1, "toy-train.dbfd", &[])?;
    let val = gen(dir, "A", 50, 2, "toy-val.dbfd", &[])?;
    let out = dir.join("toy").display().to_string();
    let args = |run_name: &'static str, sequential: bool| {
        let mut a = vec![
            "train", "--train", &train, "--val", &val, "--out", &out, "--run-name", run_name, "--version", "ver5",
            "--epochs", TOY_EPOCHS, "--quiet",
        ];
        if sequential {
            a.push("--sequential");
        }
        a.iter().map(|s| s.to_string()).collect::<Vec<_>>()
    };
    let start = Instant::now();
    let code = run(std::iter::once("flowseg".to_string()).chain(args("seq", true)));
    let elapsed = start.elapsed();
    ensure!(code == EXIT_OK, "train exited with {code}");
    within_budget(elapsed, 600)?;

    let metrics = dir.join("toy").join("seq").join(METRICS_CSV);
    let dice = column(&metrics, 2)?;
    let best = dice.iter().copied().fold(0.0, f64::max);
    ensure!(best >= 0.85, "best validation Dice {best:.4} < 0.85");

    let code = run(std::iter::once("flowseg".to_string()).chain(args("par", false)));
    ensure!(code == EXIT_OK, "second train exited with {code}");
    let a = fs::read(&metrics).map_err(|e| e.to_string())?;
    let b = fs::read(dir.join("toy").join("par").join(METRICS_CSV)).map_err(|e| e.to_string())?;
    ensure!(a == b, "metrics differ between identical runs");
    let loss = column(&metrics, 1)?;
    Ok(format!(
        "{TOY_EPOCHS} epochs in {:.0} s single-threaded, val Dice {best:.4}, loss {:.3} -> {:.3}, rerun identical",
        elapsed.as_secs_f64(),
        loss[0],
        loss[loss.len() - 1]
    ))
}

fn ablation(dir: &Path) -> Outcome {
    let train = gen(dir, "A", 100, 3, "abl-a.dbfd", &[])?;
    let val = gen(dir, "A", 30, 4, "abl-a-val.dbfd", &[])?;
    let c = gen(dir, "C", 30, 5, "abl-c.dbfd", &[])?;
    let d = gen(dir, "D", 30, 6, "abl-d.dbfd", &[])?;
    let out = dir.join("abl").display().to_string();
    let code = quiet_run(&[
        "ablate", "--train", &train, "--val", &val, "--target", &c, "--target", &d, "--out", &out, "--epochs", "3",
    ]);
    ensure!(code == EXIT_OK, "ablate exited with {code}");
    let text = fs::read_to_string(dir.join("abl").join("ablate").join("ablation.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    ensure!(rows.len() == 5, "{} rows", rows.len());
    let pattern: Vec<String> = rows.iter().map(|r| r[..4].join(" ")).collect();
    let want = ["ver1 × × ×", "ver2 × ✓ ✓", "ver3 ✓ × ✓", "ver4 ✓ ✓ ×", "ver5 ✓ ✓ ✓"];
    ensure!(pattern == want, "toggle pattern {pattern:?}");
    let num = |r: &[&str], i: usize| r[i].parse::<f64>().map_err(|e| e.to_string());
    let (ver1_a, ver1_c) = (num(&rows[0], 4)?, num(&rows[0], 5)?);
    let drop = ver1_a - ver1_c;
    ensure!(drop >= 0.05, "Ver 1 drop A->C {drop:.4} ({ver1_a:.4} -> {ver1_c:.4})");
    let avg1 = num(&rows[0], 7)?;
    let avg5 = num(&rows[4], 7)?;
    Ok(format!(
        "5 rows, pattern ok; Ver 1 A {ver1_a:.4} C {ver1_c:.4} (drop {drop:.4}); target avg Ver 1 {avg1:.4} Ver 5 {avg5:.4} (not gated)"
    ))
}

fn persistence(dir: &Path) -> Outcome {
    let data = gen(dir, "B", 20, 7, "persist.dbfd", &["--set", "height=16", "--set", "width=16"])?;
    let bytes = fs::read(&data).map_err(|e| e.to_string())?;
    let ds = ok(dataset_load(Path::new(&data)))?;
    ensure!(ok(dataset_to_bytes(&ds))? == bytes, "dataset re-encoding differs");

    let out = dir.join("persist").display().to_string();
    let code = quiet_run(&[
        "train", "--train", &data, "--out", &out, "--run-name", "p", "--epochs", "1", "--quiet", "--set", "height=16",
        "--set", "width=16", "--set", "base_channels=2",
    ]);
    ensure!(code == EXIT_OK, "train exited with {code}");
    let run_dir = dir.join("persist").join("p");
    for f in [CKPT_LAST, CKPT_BEST] {
        let raw = fs::read(run_dir.join(f)).map_err(|e| e.to_string())?;
        ensure!(checkpoint_to_bytes(&ok(checkpoint_from_bytes(&raw))?) == raw, "{f} re-encoding differs");
    }

    let ckpt = fs::read(run_dir.join(CKPT_LAST)).map_err(|e| e.to_string())?;
    let mut damaged = Vec::new();
    for (name, raw, kind) in [("dbfd", &bytes, "dataset"), ("dbfc", &ckpt, "checkpoint")] {
        let mut flipped = raw.clone();
        flipped[raw.len() / 2] ^= 0x04;
        let variants = [("empty", Vec::new()), ("truncated", raw[..raw.len() - 5].to_vec()), ("bitflip", flipped)];
        for (what, content) in variants {
            let p = dir.join(format!("{what}.{name}"));
            fs::write(&p, content).map_err(|e| e.to_string())?;
            damaged.push((format!("{what} {kind}"), kind, p.display().to_string()));
        }
    }
    damaged.push(("missing dataset".into(), "dataset", dir.join("nowhere.dbfd").display().to_string()));
    let good_ckpt = run_dir.join(CKPT_LAST).display().to_string();
    for (label, kind, path) in &damaged {
        let code = if *kind == "dataset" {
            quiet_run(&["eval", "--ckpt", &good_ckpt, "--target", path])
        } else {
            quiet_run(&["eval", "--ckpt", path, "--target", &data])
        };
        ensure!(code == EXIT_IO, "{label}: exit {code}, expected {EXIT_IO}");
    }
    let code = quiet_run(&["gen-data", "--n", "0", "--out", &data]);
    ensure!(code == EXIT_USAGE, "--n 0 exit {code}");
    Ok(format!("dataset and 2 checkpoints byte-identical; {} damaged inputs exit {EXIT_IO}", damaged.len()))
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("flow correctness", Box::new(flow_correctness)),
        ("Girsanov martingale", Box::new(girsanov_martingale)),
        ("OU moments", Box::new(ou_moments)),
        ("MC-KL calibration", Box::new(mc_kl_calibration)),
        ("closed-form updates", Box::new(closed_form_updates)),
        ("digamma", Box::new(digamma_checks)),
        ("autodiff", Box::new(autodiff)),
        ("Gumbel-Softmax", Box::new(gumbel)),
        ("toy end-to-end", Box::new(|| toy_end_to_end(dir.path()))),
        ("ablation harness", Box::new(|| ablation(dir.path()))),
        ("persistence", Box::new(|| persistence(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name} [{secs:.1} s]: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} [{secs:.1} s]: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
