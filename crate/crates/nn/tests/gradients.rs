//! Reverse-mode gradients of every parameterized layer against central
//! finite differences at f64.

use motionauth_nn::gradcheck::gradient_check;
use motionauth_nn::{
    Conv1dBlock, Ctx, DecoderLayer, EncoderLayer, FeedForward, Graph, Initializer, LayerNorm, Linear, Mask,
    ModelConfig, MultiHeadAttention, ParamStore, Tensor, Var, BCE_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [11, 23, 47];
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_head: 2,
        d_q: 3,
        d_k: 3,
        d_v: 4,
        d_hidden: 12,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        dropout_rate: 0.0,
    }
}

/// Scalarizes `y` with a fixed random projection.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> motionauth_nn::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(&mut rng, g.shape(y));
    g.dot_const(y, &w)
}

#[test]
fn linear_layer() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut Initializer::new(seed), "lin", 5, 3, true);
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 4, 5]);
        let r = gradient_check(&store, &[x], |g, s, xs| {
            let y = lin.forward(g, s, xs[0])?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "seed {seed}: {r:?}");
    }
}

#[test]
fn input_embedding_with_encodings() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let emb = Linear::new(&mut store, &mut Initializer::new(seed), "embed", 4, 8, true);
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 6, 4]);
        let pe = motionauth_nn::positional_encoding::<f64>(6, 8).unwrap();
        let te = motionauth_nn::temporal_table::<f64>(10, 6, 135, 8).unwrap();
        let r = gradient_check(&store, &[x], |g, s, xs| {
            let e = emb.forward(g, s, xs[0])?;
            let p = g.constant(pe.clone());
            let t = g.constant(te.clone());
            let e = g.add(e, p)?;
            let e = g.add(e, t)?;
            project(g, e, seed)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn multi_head_attention_masked_and_unmasked() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut Initializer::new(seed), "mha", &small_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 5, 8]);
        let c = random(&mut rng, &[2, 4, 8]);
        let mask = Mask::causal_offset(5, 4, 0);
        let r = gradient_check(&store, &[x, c], |g, s, xs| {
            let self_att = mha.forward(g, s, xs[0], xs[0], None)?;
            let cross = mha.forward(g, s, xs[0], xs[1], Some(&mask))?;
            let y = g.add(self_att, cross)?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn layer_norm_layer() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        *store.get_mut(ln.gamma) = random(&mut rng, &[6]);
        *store.get_mut(ln.beta) = random(&mut rng, &[6]);
        let x = random(&mut rng, &[3, 6]);
        let r = gradient_check(&store, &[x], |g, s, xs| {
            let y = ln.forward(g, s, xs[0])?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn feed_forward_layer() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let ff = FeedForward::new(&mut store, &mut Initializer::new(seed), "ff", 6, 10);
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed), &[4, 6]);
        let r = gradient_check(&store, &[x], |g, s, xs| {
            let y = ff.forward(g, s, xs[0])?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn encoder_layer() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let enc = EncoderLayer::new(&mut store, &mut Initializer::new(seed), "enc", &small_cfg());
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 5, 8]);
        let r = gradient_check(&store, &[x], |g, s, xs| {
            let y = enc.forward(g, s, xs[0], &mut Ctx::eval())?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn decoder_layer() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let dec = DecoderLayer::new(&mut store, &mut Initializer::new(seed), "dec", &small_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, 5, 8]);
        let mem = random(&mut rng, &[1, 6, 8]);
        let self_mask = Mask::causal(5);
        let cross_mask = Mask::causal_offset(5, 6, 2);
        let r = gradient_check(&store, &[x, mem], |g, s, xs| {
            let y = dec.forward(g, s, xs[0], xs[1], &self_mask, &cross_mask, &mut Ctx::eval())?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn conv_block_training_and_inference() {
    for seed in SEEDS {
        for training in [true, false] {
            let mut store = ParamStore::new();
            let block = Conv1dBlock::new(&mut store, &mut Initializer::new(seed), "conv", 3, 4, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            *store.get_mut(block.running_mean) = random(&mut rng, &[4]);
            *store.get_mut(block.running_var) = Tensor::from_fn(&[4], |_| rng.gen_range(0.5..2.0));
            let x = random(&mut rng, &[2, 7, 3]);
            let r = gradient_check(&store, &[x], |g, s, xs| {
                let (y, _) = block.forward(g, s, xs[0], training)?;
                project(g, y, seed)
            })
            .unwrap();
            assert!(r.max_rel_error < TOL, "seed {seed} training {training}: {r:?}");
        }
    }
}

#[test]
fn dense_heads_with_softmax_bce_and_sigmoid_mse() {
    for seed in SEEDS {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let cls = Linear::new(&mut store, &mut init, "cls", 6, 2, true);
        let pos = Linear::new(&mut store, &mut init, "pos", 6, 3, true);
        let trig = Linear::new(&mut store, &mut init, "trig", 6, 1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4, 6]);
        let labels = Tensor::new(&[3, 1], vec![1.0, 0.0, 1.0]).unwrap();
        let pos_target = random(&mut rng, &[3, 4, 3]);
        let trig_target = Tensor::from_fn(&[3, 4, 1], |i| (i % 2) as f64);
        let r = gradient_check(&store, &[x], |g, s, xs| {
            let pooled = g.mean_axis(xs[0], 1)?;
            let logits = cls.forward(g, s, pooled)?;
            let probs = g.softmax(logits);
            let genuine = g.slice(probs, 1, 1, 1)?;
            let l_label = g.bce(genuine, &labels, BCE_EPS)?;
            let p = pos.forward(g, s, xs[0])?;
            let l_f = g.mse(p, &pos_target)?;
            let t = trig.forward(g, s, xs[0])?;
            let t = g.sigmoid(t);
            let l_t = g.bce(t, &trig_target, BCE_EPS)?;
            g.weighted_sum(&[(l_label, 1.0), (l_f, 0.5), (l_t, 2.0)])
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn concat_and_slice_paths() {
    let x = random(&mut ChaCha8Rng::seed_from_u64(1), &[2, 5, 4]);
    let y = random(&mut ChaCha8Rng::seed_from_u64(2), &[2, 3, 4]);
    let store = ParamStore::new();
    let r = gradient_check(&store, &[x, y], |g, _s, xs| {
        let c = g.concat(xs[0], xs[1], 1)?;
        let tail = g.slice(c, 1, 3, 4)?;
        let cols = g.slice(tail, 2, 1, 2)?;
        let c2 = g.concat(cols, cols, 2)?;
        project(g, c2, 5)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}
