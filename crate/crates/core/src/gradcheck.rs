//! Central finite-difference gradient checks.
//!
//! Each check reduces the function output to a scalar with a fixed random
//! projection, runs one backward pass, then perturbs every input element by
//! `±STEP` and compares. The relative error of an element is
//! `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Model, ModelError, ModelKind, ModelSpec};
use crate::nn::{
    positional_encoding, scaled_dot_attention, Bound, DecoderBlock, EncoderBlock, FeedForward, LayerNorm, Linear, Lstm,
    LstmState, MultiHeadAttention, ParamStore, SubLayerKind, LAYER_NORM_EPS,
};
use crate::tensor::{inject_backward_fault, Graph, Mask, OpKind, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor that keeps near-zero gradients from turning rounding
/// noise into huge relative errors.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar input elements compared.
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Projected output value and, when requested, the gradient of each input.
type Evaluation = (f64, Vec<Option<Vec<f64>>>);

fn run<F, E>(inputs: &[Tensor], proj: &mut Option<Tensor>, f: &F, want_grad: bool) -> Result<Evaluation, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    let r = proj.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        Tensor::uniform(&shape, -1.0, 1.0, &mut rng)
    });
    let r = g.constant(r.clone());
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted);
    let value = g.item(loss);
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect()))
}

/// Checks the gradient of `f` with respect to every input that has
/// `requires_grad` set.
pub fn check<F, E>(name: &str, inputs: &[Tensor], f: F) -> Result<CheckResult, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut proj = None;
    let (_, grads) = run(inputs, &mut proj, &f, true)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads[i].as_ref().expect("leaf with requires_grad has a grad");
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let (plus, _) = run(&probe, &mut proj, &f, false)?;
            probe[i].data_mut()[j] = orig - STEP;
            let (minus, _) = run(&probe, &mut proj, &f, false)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let err = (a - numeric).abs() / denom;
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng).with_requires_grad(true)
}

/// Values bounded away from zero, so ReLU's kink is never straddled by the
/// finite-difference step.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = random(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn primitive(kind: OpKind) -> Result<CheckResult, TensorError> {
    let name = format!("op:{}", kind.name());
    let x = random(&[2, 3, 4], 1);
    let y = random(&[2, 3, 4], 2);
    match kind {
        OpKind::Add => check(&name, &[x, random(&[4], 3)], |g, v| g.add(v[0], v[1])),
        OpKind::Sub => check(&name, &[x, y], |g, v| g.sub(v[0], v[1])),
        OpKind::Mul => check(&name, &[x, y], |g, v| g.mul(v[0], v[1])),
        OpKind::Scale => check(&name, &[x], |g, v| Ok(g.scale(v[0], -1.7))),
        OpKind::Tanh => check(&name, &[x], |g, v| Ok(g.tanh(v[0]))),
        OpKind::Sigmoid => check(&name, &[x], |g, v| Ok(g.sigmoid(v[0]))),
        OpKind::Relu => check(&name, &[away_from_zero(&[2, 3, 4], 4)], |g, v| Ok(g.relu(v[0]))),
        OpKind::MatMul => check(&name, &[x, random(&[4, 5], 5)], |g, v| g.matmul(v[0], v[1])),
        OpKind::Transpose => check(&name, &[x], |g, v| g.transpose(v[0])),
        OpKind::Softmax => check(&name, &[x], |g, v| g.softmax(v[0], 1)),
        OpKind::Sum => check(&name, &[x], |g, v| Ok(g.sum(v[0]))),
        OpKind::Mean => check(&name, &[x], |g, v| Ok(g.mean(v[0]))),
        OpKind::Reshape => check(&name, &[x], |g, v| g.reshape(v[0], &[6, 4])),
        OpKind::Narrow => check(&name, &[x], |g, v| g.narrow(v[0], 2, 1, 2)),
        OpKind::Concat => check(&name, &[x, random(&[2, 1, 4], 6)], |g, v| g.concat(&[v[0], v[1]], 1)),
        OpKind::LayerNorm => check(&name, &[x, random(&[4], 7), random(&[4], 8)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)
        }),
    }
}

/// Checks a layer against its input and every one of its parameters.
fn layer<F>(name: &str, inputs: Vec<Tensor>, store: &ParamStore, f: F) -> Result<CheckResult, TensorError>
where
    F: Fn(&mut Graph, &[Var], &Bound) -> Result<Var, TensorError>,
{
    let n = inputs.len();
    let mut all = inputs;
    all.extend(store.tensors().iter().cloned());
    check(name, &all, |g, v| {
        let bound = Bound::new(v[n..].to_vec());
        f(g, &v[..n], &bound)
    })
}

fn layers() -> Result<Vec<CheckResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rng = &mut rng;
    let (d, len) = (4, 3);
    let x = || random(&[2, len, d], 21);
    let mut out = Vec::new();

    let q = random(&[2, len, 2], 22);
    let k = random(&[2, len, 2], 23);
    let v = random(&[2, len, 3], 24);
    out.push(check("layer:attention_head", &[q.clone(), k.clone(), v.clone()], |g, t| {
        scaled_dot_attention(g, t[0], t[1], t[2], None)
    })?);
    let causal = Mask::causal(len);
    out.push(check("layer:attention_head_masked", &[q, k, v], |g, t| {
        scaled_dot_attention(g, t[0], t[1], t[2], Some(&causal))
    })?);

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, rng, "mha", d, 2)?;
    out.push(layer("layer:multi_head_attention", vec![x(), random(&[2, 5, d], 25)], &s, |g, t, p| {
        mha.forward(g, p, t[0], t[1], None)
    })?);

    let mut s = ParamStore::new();
    let ffn = FeedForward::new(&mut s, rng, "ffn", d, 6);
    out.push(layer("layer:feed_forward", vec![x()], &s, |g, t, p| ffn.forward(g, p, t[0]))?);

    let mut s = ParamStore::new();
    let norm = LayerNorm::new(&mut s, "norm", d);
    for t in s.tensors_mut() {
        let noisy = random(t.shape(), 26);
        for (a, b) in t.data_mut().iter_mut().zip(noisy.data()) {
            *a += 0.3 * b;
        }
    }
    out.push(layer("layer:layer_norm", vec![x()], &s, |g, t, p| norm.forward(g, p, t[0]))?);

    let mut s = ParamStore::new();
    let cell = Lstm::new(&mut s, rng, "cell", d, 3, 1);
    let h0 = random(&[2, 3], 27);
    let c0 = random(&[2, 3], 28);
    out.push(layer("layer:lstm_cell", vec![random(&[2, 1, d], 29), h0, c0], &s, |g, t, p| {
        let init = [LstmState { h: t[1], c: t[2] }];
        let (_, states) = cell.forward(g, p, t[0], Some(&init))?;
        g.concat(&[states[0].h, states[0].c], 1)
    })?);

    let mut s = ParamStore::new();
    let stack = Lstm::new(&mut s, rng, "stack", d, 3, 2);
    out.push(layer("layer:lstm_stack", vec![x()], &s, |g, t, p| Ok(stack.forward(g, p, t[0], None)?.0))?);

    let mut s = ParamStore::new();
    let embed = Linear::new(&mut s, rng, "embed", 5, d, true);
    out.push(layer("layer:embedding", vec![random(&[2, len, 5], 30)], &s, |g, t, p| embed.forward(g, p, t[0]))?);
    let pe = positional_encoding(len, d)?;
    out.push(layer("layer:embedding_plus_position", vec![random(&[2, len, 5], 31)], &s, |g, t, p| {
        let e = embed.forward(g, p, t[0])?;
        let table = g.constant(pe.clone());
        g.add(e, table)
    })?);

    for (label, kind) in [("encoder_block", SubLayerKind::FeedForward), ("encoder_block_lstm", SubLayerKind::Lstm)] {
        let mut s = ParamStore::new();
        let block = EncoderBlock::new(&mut s, rng, "enc", d, 2, 6, kind)?;
        out.push(layer(&format!("layer:{label}"), vec![x()], &s, |g, t, p| block.forward(g, p, t[0]))?);
    }
    let mut s = ParamStore::new();
    let block = DecoderBlock::new(&mut s, rng, "dec", d, 2, 6, SubLayerKind::FeedForward)?;
    out.push(layer("layer:decoder_block", vec![x(), random(&[2, 5, d], 32)], &s, |g, t, p| {
        block.forward(g, p, t[0], t[1], &causal)
    })?);
    Ok(out)
}

fn models() -> Result<Vec<CheckResult>, ModelError> {
    let mut out = Vec::new();
    for kind in ModelKind::ALL {
        let spec = ModelSpec {
            kind,
            n_encoders: 1,
            n_decoders: 1,
            n_heads: 2,
            d_model: 4,
            ffn_width: 6,
            lstm_layers: 2,
            input_features: 3,
            output_features: 2,
            window: 4,
            horizon: 3,
            decoder_seed_features: vec![0, 1],
        };
        let model = Model::build(&spec, 3)?;
        let mut inputs = vec![random(&[1, 4, 3], 40).with_requires_grad(false), random(&[1, 3, 2], 41).with_requires_grad(false)];
        inputs.extend(model.params().tensors().iter().cloned());
        let n_params = model.params().len();
        out.push(check(&format!("model:{}", kind.name()), &inputs, |g, v| {
            let p = Bound::new(v[2..2 + n_params].to_vec());
            model.forward_graph(g, &p, v[0], Some(v[1]))
        })?);
    }
    Ok(out)
}

/// Every primitive exactly once, then every layer and every model kind.
/// With `fault`, that primitive's backward rule is corrupted for the
/// duration of the run.
pub fn suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>, ModelError> {
    inject_backward_fault(fault);
    let result = (|| {
        let mut out = OpKind::ALL.iter().map(|&k| primitive(k)).collect::<Result<Vec<_>, _>>()?;
        out.extend(layers()?);
        out.extend(models()?);
        Ok(out)
    })();
    inject_backward_fault(None);
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_and_lists_each_primitive_once() {
        let results = suite(None).unwrap();
        for r in &results {
            assert!(r.passed(), "{} max rel error {}", r.name, r.max_rel_error);
            assert!(r.checked > 0, "{}", r.name);
        }
        for kind in OpKind::ALL {
            let name = format!("op:{}", kind.name());
            assert_eq!(results.iter().filter(|r| r.name == name).count(), 1, "{name}");
        }
        let ops = results.iter().filter(|r| r.name.starts_with("op:")).count();
        assert_eq!(ops, OpKind::ALL.len());
        for kind in ModelKind::ALL {
            assert!(results.iter().any(|r| r.name == format!("model:{}", kind.name())));
        }
    }

    #[test]
    fn every_corrupted_rule_is_caught() {
        for kind in OpKind::ALL {
            inject_backward_fault(Some(kind));
            let r = primitive(kind);
            inject_backward_fault(None);
            let r = r.unwrap();
            assert!(!r.passed(), "{} not detected", kind.name());
        }
    }

    #[test]
    fn corruption_is_reported_by_name_in_the_suite() {
        let results = suite(Some(OpKind::Sigmoid)).unwrap();
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"op:sigmoid"), "{failed:?}");
        assert!(!failed.contains(&"op:tanh"));
        // The hook is cleared afterwards.
        assert!(suite(None).unwrap().iter().all(CheckResult::passed));
    }
}
