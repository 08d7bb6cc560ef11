use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

const EPS: f32 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f32, b: f32) -> f32 {
    (a - b).abs() / 1.0f32.max(a.abs()).max(b.abs())
}

/// Largest relative error between the reverse-mode gradient of the scalar
/// `f` at `x` and its central finite difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item() as f64)
    };

    let mut worst = 0.0f32;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = ((eval(plus)? - eval(minus)?) / (2.0 * eps as f64)) as f32;
        worst = worst.max(relative_error(analytic.data()[i], fd));
    }
    Ok(worst)
}

/// `mean(w ⊙ y)` with a fixed random weight, so every output entry carries
/// a distinct cotangent.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(g.shape(y), 1.0, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.mean_all(p)
}

/// Runs `grad_check` on `op` composed with a weighted mean.
fn check_unary(
    shape: &[usize],
    seed: u64,
    op: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<f32> {
    let x = Tensor::uniform(shape, 1.0, &mut rng(seed));
    grad_check(
        |g, x| {
            let y = op(g, x)?;
            weighted(g, y, seed + 1000)
        },
        &x,
        EPS,
    )
}

/// Gradient check of every recorded op on seeded random inputs.
///
/// Each op is composed with a randomly weighted mean so that all of its
/// outputs receive distinct cotangents. Returns `(op, relative error)`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f32)>> {
    let other = |shape: &[usize], s: u64| Tensor::uniform(shape, 1.0, &mut rng(s));
    let mut out = Vec::new();
    out.push((
        "matmul.x",
        check_unary(&[2, 3, 4], seed, |g, x| {
            let w = g.constant(other(&[4, 5], seed + 1));
            g.matmul(x, w)
        })?,
    ));
    out.push((
        "matmul.w",
        check_unary(&[4, 5], seed, |g, w| {
            let x = g.constant(other(&[3, 4], seed + 2));
            g.matmul(x, w)
        })?,
    ));
    for trans in [false, true] {
        let bshape: &[usize] = if trans { &[2, 5, 4] } else { &[2, 4, 5] };
        out.push((
            "bmm.a",
            check_unary(&[2, 3, 4], seed, |g, a| {
                let b = g.constant(other(bshape, seed + 3));
                g.bmm(a, b, trans)
            })?,
        ));
        out.push((
            "bmm.b",
            check_unary(bshape, seed, |g, b| {
                let a = g.constant(other(&[2, 3, 4], seed + 4));
                g.bmm(a, b, trans)
            })?,
        ));
    }
    out.push(("transpose", check_unary(&[2, 3, 4], seed, |g, x| g.transpose(x))?));
    out.push((
        "permute",
        check_unary(&[2, 3, 4, 2], seed, |g, x| g.permute(x, &[2, 0, 3, 1]))?,
    ));
    out.push(("reshape", check_unary(&[2, 6], seed, |g, x| g.reshape(x, &[3, 4]))?));
    out.push((
        "concat",
        check_unary(&[2, 3, 2], seed, |g, x| {
            let c = g.constant(other(&[2, 1, 2], seed + 5));
            g.concat(&[c, x, c], 1)
        })?,
    ));
    out.push((
        "split",
        check_unary(&[3, 5], seed, |g, x| {
            let parts = g.split(x, 1, &[2, 3])?;
            let a = g.scale(parts[0], 2.0)?;
            g.concat(&[parts[1], a], 1)
        })?,
    ));
    out.push((
        "add",
        check_unary(&[3, 4], seed, |g, x| {
            let c = g.constant(other(&[3, 4], seed + 6));
            g.add(x, c)
        })?,
    ));
    out.push((
        "sub",
        check_unary(&[3, 4], seed, |g, x| {
            let c = g.constant(other(&[3, 4], seed + 7));
            g.sub(c, x)
        })?,
    ));
    out.push(("mul", check_unary(&[3, 4], seed, |g, x| g.mul(x, x))?));
    out.push((
        "add_bcast.v",
        check_unary(&[4], seed, |g, v| {
            let x = g.constant(other(&[3, 4], seed + 8));
            g.add_bcast(x, v)
        })?,
    ));
    out.push((
        "mul_bcast.x",
        check_unary(&[3, 4], seed, |g, x| {
            let v = g.constant(other(&[4], seed + 9));
            g.mul_bcast(x, v)
        })?,
    ));
    out.push((
        "mul_bcast.v",
        check_unary(&[4], seed, |g, v| {
            let x = g.constant(other(&[2, 3, 4], seed + 10));
            g.mul_bcast(x, v)
        })?,
    ));
    out.push((
        "mul_bcast.scalar",
        check_unary(&[1], seed, |g, v| {
            let x = g.constant(other(&[2, 3], seed + 11));
            g.mul_bcast(x, v)
        })?,
    ));
    out.push(("scale", check_unary(&[5], seed, |g, x| g.scale(x, -1.5))?));
    out.push(("add_scalar", check_unary(&[5], seed, |g, x| g.add_scalar(x, 0.3))?));
    out.push(("mean.0", check_unary(&[3, 4, 2], seed, |g, x| g.mean(x, 0))?));
    out.push(("mean.1", check_unary(&[3, 4, 2], seed, |g, x| g.mean(x, 1))?));
    out.push(("softmax", check_unary(&[3, 5], seed, |g, x| g.softmax(x))?));
    out.push(("log_softmax", check_unary(&[3, 5], seed, |g, x| g.log_softmax(x))?));
    out.push(("layer_norm", check_unary(&[3, 6], seed, |g, x| g.layer_norm(x))?));
    out.push(("gelu", check_unary(&[7], seed, |g, x| g.gelu(x))?));
    out.push(("silu", check_unary(&[7], seed, |g, x| g.silu(x))?));
    out.push(("exp", check_unary(&[7], seed, |g, x| g.exp(x))?));
    out.push(("expand", check_unary(&[2, 3], seed, |g, x| g.expand(x, 4))?));
    out.push((
        "rope",
        check_unary(&[2, 3, 2, 4], seed, |g, x| {
            let angles: Vec<f32> = (0..6).map(|i| 0.37 * i as f32 + 0.1).collect();
            let cos: Vec<f32> = angles.iter().map(|&a| libm::cosf(a)).collect();
            let sin: Vec<f32> = angles.iter().map(|&a| libm::sinf(a)).collect();
            g.rope(x, &cos, &sin)
        })?,
    ));
    out.push((
        "assign_frames.x",
        check_unary(&[4, 3], seed, |g, x| {
            let s = g.constant(other(&[4, 3], seed + 12));
            g.assign_frames(x, s, 2)
        })?,
    ));
    out.push((
        "assign_frames.src",
        check_unary(&[4, 3], seed, |g, s| {
            let x = g.constant(other(&[4, 3], seed + 13));
            g.assign_frames(x, s, 1)
        })?,
    ));
    Ok(out)
}

