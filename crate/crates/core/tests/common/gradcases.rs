#![allow(dead_code)]

//! Finite-difference cases for every differentiable primitive and for the
//! composed recurrent, attention and CTC blocks.

use cuedgen::features::FeatureBundle;
use cuedgen::generator::{Generator, GeneratorConfig, LossWeights};
use cuedgen::mat::Mat;
use cuedgen::nn::{bidirectional, CtcItem, Graph, Gru, Lstm, NodeId, ParamStore, SeqLayout};
use cuedgen::recognizer::{Recognizer, RecognizerConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_relative_error, random_matrix};

pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn away_from_zero(v: &mut [f64]) {
    for x in v.iter_mut() {
        if x.abs() < 0.05 {
            *x = if *x >= 0.0 { 0.05 + *x } else { *x - 0.05 };
        }
    }
}

fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_matrix(&mut r, 3, 4, 1.0);
    let b = random_matrix(&mut r, 4, 5, 1.0);
    max_relative_error(&[a, b], &|g: &mut Graph<f64>, x: &[NodeId]| g.matmul(x[0], x[1]).unwrap(), seed)
}

fn elementwise(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_matrix(&mut r, 3, 4, 1.0);
    let b = random_matrix(&mut r, 3, 4, 1.0);
    max_relative_error(
        &[a, b],
        &|g: &mut Graph<f64>, x: &[NodeId]| {
            let s = g.add(x[0], x[1]).unwrap();
            let d = g.sub(s, x[1]).unwrap();
            let m = g.mul(d, x[1]).unwrap();
            let m2 = g.mul(m, x[0]).unwrap();
            g.scale(m2, 0.7)
        },
        seed,
    )
}

fn bias_and_repeat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 6, 3, 1.0);
    let b = random_matrix(&mut r, 1, 3, 1.0);
    let y = random_matrix(&mut r, 2, 3, 1.0);
    max_relative_error(
        &[x, b, y],
        &|g: &mut Graph<f64>, v: &[NodeId]| {
            let a = g.add_bias(v[0], v[1]).unwrap();
            g.add_repeat_rows(a, v[2], 3).unwrap()
        },
        seed,
    )
}

fn activations(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut x = random_matrix(&mut r, 4, 5, 2.0);
    away_from_zero(&mut x.2);
    max_relative_error(
        &[x],
        &|g: &mut Graph<f64>, v: &[NodeId]| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(v[0]);
            let u = g.relu(v[0]);
            let a = g.add(s, t).unwrap();
            let b = g.mul(a, u).unwrap();
            g.add(b, s).unwrap()
        },
        seed,
    )
}

fn softmaxes(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 3, 5, 2.0);
    max_relative_error(
        &[x],
        &|g: &mut Graph<f64>, v: &[NodeId]| {
            let s = g.softmax_rows(v[0], Some(&[5, 3, 1])).unwrap();
            let l = g.log_softmax_rows(v[0]);
            g.add(s, l).unwrap()
        },
        seed,
    )
}

fn structural(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_matrix(&mut r, 4, 3, 1.0);
    let b = random_matrix(&mut r, 4, 2, 1.0);
    max_relative_error(
        &[a, b],
        &|g: &mut Graph<f64>, v: &[NodeId]| {
            let c = g.concat_cols(&[v[0], v[1]]).unwrap();
            let s = g.slice_cols(c, 1, 3).unwrap();
            let rws = g.slice_rows(s, 1, 2).unwrap();
            let cat = g.concat_rows(&[rws, s]).unwrap();
            let gat = g.gather_rows(cat, vec![Some(5), None, Some(0), Some(0), Some(3)]).unwrap();
            let rs = g.reshape(gat, 3, 5).unwrap();
            let t = g.tanh(rs);
            g.sum(t)
        },
        seed,
    )
}

fn conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = SeqLayout {
        steps: 5,
        batch: 2,
        time_major: true,
        lengths: Some(vec![5, 3]),
    };
    let x = random_matrix(&mut r, 10, 3, 1.0);
    let w = random_matrix(&mut r, 4, 3 * 3, 1.0);
    max_relative_error(
        &[x, w],
        &move |g: &mut Graph<f64>, v: &[NodeId]| g.conv1d(v[0], v[1], 3, layout.clone()).unwrap(),
        seed,
    )
}

fn conv_item_major(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = SeqLayout {
        steps: 6,
        batch: 2,
        time_major: false,
        lengths: None,
    };
    let x = random_matrix(&mut r, 12, 2, 1.0);
    let w = random_matrix(&mut r, 3, 2 * 5, 1.0);
    max_relative_error(
        &[x, w],
        &move |g: &mut Graph<f64>, v: &[NodeId]| g.conv1d(v[0], v[1], 5, layout.clone()).unwrap(),
        seed,
    )
}

fn lstm_cell(seed: u64) -> f64 {
    let mut r = rng(seed);
    let gates = random_matrix(&mut r, 2, 12, 1.5);
    let c = random_matrix(&mut r, 2, 3, 1.0);
    max_relative_error(
        &[gates, c],
        &|g: &mut Graph<f64>, v: &[NodeId]| {
            let c2 = g.lstm_cell_c(v[0], v[1]).unwrap();
            let h2 = g.lstm_cell_h(v[0], c2).unwrap();
            g.concat_cols(&[c2, h2]).unwrap()
        },
        seed,
    )
}

fn gru_cell(seed: u64) -> f64 {
    let mut r = rng(seed);
    let gx = random_matrix(&mut r, 2, 9, 1.5);
    let gh = random_matrix(&mut r, 2, 9, 1.5);
    let h = random_matrix(&mut r, 2, 3, 1.0);
    max_relative_error(
        &[gx, gh, h],
        &|g: &mut Graph<f64>, v: &[NodeId]| g.gru_cell(v[0], v[1], v[2]).unwrap(),
        seed,
    )
}

fn attend_context(seed: u64) -> f64 {
    let mut r = rng(seed);
    let w = random_matrix(&mut r, 2, 4, 1.0);
    let m = random_matrix(&mut r, 8, 3, 1.0);
    max_relative_error(
        &[w, m],
        &|g: &mut Graph<f64>, v: &[NodeId]| g.attend_context(v[0], v[1]).unwrap(),
        seed,
    )
}

fn losses(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = random_matrix(&mut r, 4, 3, 1.0);
    let l = random_matrix(&mut r, 4, 1, 3.0);
    let target: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let gate: Vec<f64> = (0..4).map(|i| if i == 2 { 1.0 } else { 0.0 }).collect();
    max_relative_error(
        &[p, l],
        &move |g: &mut Graph<f64>, v: &[NodeId]| {
            let a = g
                .masked_mse(v[0], target.clone(), vec![true, true, false, true])
                .unwrap();
            let b = g
                .bce_with_logits(v[1], gate.clone(), vec![true, true, true, false])
                .unwrap();
            g.add(a, b).unwrap()
        },
        seed,
    )
}

fn ctc(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, 10, 4, 2.0);
    let labels_a: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..4)).collect();
    let labels_b: Vec<usize> = (0..r.random_range(0..=2)).map(|_| r.random_range(1..4)).collect();
    max_relative_error(
        &[x],
        &move |g: &mut Graph<f64>, v: &[NodeId]| {
            let lp = g.log_softmax_rows(v[0]);
            // two interleaved items: rows 0,2,4,6,8 and 1,3,5
            let items = vec![
                CtcItem {
                    rows: vec![0, 2, 4, 6, 8],
                    labels: labels_a.clone(),
                },
                CtcItem {
                    rows: vec![1, 3, 5],
                    labels: labels_b.clone(),
                },
            ];
            g.ctc(lp, items, 0).unwrap()
        },
        seed,
    )
}

pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", run: matmul },
        Case { name: "add/sub/mul/scale", run: elementwise },
        Case { name: "add_bias/add_repeat_rows", run: bias_and_repeat },
        Case { name: "sigmoid/tanh/relu", run: activations },
        Case { name: "softmax/log_softmax", run: softmaxes },
        Case { name: "concat/slice/gather/reshape/sum", run: structural },
        Case { name: "conv1d time-major with lengths", run: conv },
        Case { name: "conv1d item-major", run: conv_item_major },
        Case { name: "lstm cell", run: lstm_cell },
        Case { name: "gru cell", run: gru_cell },
        Case { name: "attend_context", run: attend_context },
        Case { name: "masked mse + bce with logits", run: losses },
        Case { name: "ctc", run: ctc },
    ]
}

/// Relative error between analytic parameter gradients and central
/// differences on up to `samples` random coordinates of `store`.
fn param_error(
    store: &ParamStore<f64>,
    loss: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> NodeId,
    samples: usize,
    seed: u64,
) -> f64 {
    let h = 1e-5;
    let mut s = store.clone();
    s.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, &s);
    g.backward_into(out, &mut s).unwrap();
    let mut coords: Vec<(String, usize)> = s
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.to_string(), i)))
        .collect();
    coords.shuffle(&mut rng(seed ^ 0x77));
    coords.truncate(samples);
    let eval = |name: &str, i: usize, delta: f64| {
        let mut p = store.clone();
        p.get_mut(name).unwrap().data_mut()[i] += delta;
        let mut g = Graph::new();
        let out = loss(&mut g, &p);
        g.scalar(out)
    };
    let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
    for (name, i) in &coords {
        let a = s.get(name).unwrap().grad.as_ref().map_or(0.0, |gr| gr[i.to_owned()]);
        let n = (eval(name, *i, h) - eval(name, *i, -h)) / (2.0 * h);
        diff += (a - n) * (a - n);
        an += a * a;
        nu += n * n;
    }
    let scale = an.sqrt().max(nu.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

fn lstm_sequence(seed: u64) -> f64 {
    let mut r = rng(seed);
    let lstm = Lstm::new("l", 3, 4);
    let mut store = ParamStore::new();
    lstm.init(&mut store, &mut r);
    let x = random_matrix(&mut r, 5 * 2, 3, 1.0).2;
    let proj: Vec<f64> = (0..5 * 2 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
    param_error(
        &store,
        &|g, s| {
            let xi = g.constant(10, 3, x.clone()).unwrap();
            let y = lstm.sequence(g, s, xi, 5, 2).unwrap();
            let p = g.constant(10, 4, proj.clone()).unwrap();
            let m = g.mul(y, p).unwrap();
            g.sum(m)
        },
        400,
        seed,
    )
}

fn bigru_with_lengths(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (f, b) = (Gru::new("f", 3, 4), Gru::new("b", 3, 4));
    let mut store = ParamStore::new();
    f.init(&mut store, &mut r);
    b.init(&mut store, &mut r);
    let x = random_matrix(&mut r, 4 * 2, 3, 1.0).2;
    let proj: Vec<f64> = (0..8 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
    param_error(
        &store,
        &|g, s| {
            let xi = g.constant(8, 3, x.clone()).unwrap();
            let y = bidirectional(g, s, &f, &b, xi, 4, &[4, 2]).unwrap();
            let p = g.constant(8, 8, proj.clone()).unwrap();
            let m = g.mul(y, p).unwrap();
            g.sum(m)
        },
        400,
        seed,
    )
}

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        vocab: 7,
        embedding_dim: 4,
        enc_conv_layers: 1,
        enc_conv_channels: 4,
        enc_conv_kernel: 3,
        enc_lstm_dim: 4,
        enc_dropout: 0.0,
        attention_dim: 4,
        attention_filters: 2,
        attention_kernel: 3,
        prenet_dim: 4,
        prenet_dropout: 0.0,
        decoder_lstm_dim: 5,
        postnet_layers: 1,
        postnet_channels: 3,
        postnet_kernel: 3,
        postnet_dropout: 0.0,
        n_mels: 3,
        mel_offset: -1.0,
        mel_scale: 2.0,
        visual_dim: 4,
        frames_per_step: 1,
        max_decoder_steps: 10,
        gate_threshold: 0.5,
        teacher_forcing_ratio: 1.0,
    }
}

fn bundle(r: &mut ChaCha8Rng, t: usize) -> FeatureBundle {
    let mut m = |cols| Mat::from_fn(t, cols, |_, _| r.random_range(-1.0f32..1.0));
    let (mel, hand, lips) = (m(3), m(2), m(2));
    FeatureBundle {
        mel,
        hand,
        lips,
        gate: cuedgen::features::gate_target(t),
    }
}

/// Encoder, location-sensitive attention, decoder LSTMs, postnet, all five
/// loss terms and the guided-attention prior on a two-item batch.
fn generator_attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let model = Generator::new(tiny_generator()).unwrap();
    let store: ParamStore<f64> = model.init_params(&mut r);
    let ids: Vec<Vec<usize>> = vec![vec![1, 3, 2, 5], vec![4, 6, 1]];
    let bundles = vec![bundle(&mut r, 5), bundle(&mut r, 3)];
    param_error(
        &store,
        &|g, s| {
            let mut dr = rng(0);
            let idr: Vec<&[usize]> = ids.iter().map(|v| &v[..]).collect();
            let mels: Vec<&Mat> = bundles.iter().map(|b| &b.mel).collect();
            let nodes = model.forward_batch(g, s, &idr, &mels, false, &mut dr).unwrap();
            let refs: Vec<&FeatureBundle> = bundles.iter().collect();
            let (total, _) = model.batch_loss(g, &nodes, &refs, &LossWeights::default()).unwrap();
            let ga = model.guided_attention_loss(g, &nodes, 0.3).unwrap();
            g.add(total, ga).unwrap()
        },
        300,
        seed,
    )
}

/// Stream Bi-GRUs, fusion Bi-GRU, output layer and CTC on a two-item batch.
fn recognizer_ctc(seed: u64) -> f64 {
    let mut r = rng(seed);
    let model = Recognizer::new(RecognizerConfig {
        hand_input: 2,
        lips_input: 3,
        stream_hidden: 3,
        fusion_hidden: 3,
        classes: 4,
        input_scale: 2.0,
    })
    .unwrap();
    let store: ParamStore<f64> = model.init_params(&mut r);
    let feats: Vec<(Mat, Mat)> = [5, 4]
        .iter()
        .map(|&t| {
            (
                Mat::from_fn(t, 2, |_, _| r.random_range(-1.0f32..1.0)),
                Mat::from_fn(t, 3, |_, _| r.random_range(-1.0f32..1.0)),
            )
        })
        .collect();
    let labels: Vec<Vec<usize>> = vec![vec![1, 2, 2], vec![3]];
    param_error(
        &store,
        &|g, s| {
            let items: Vec<(&Mat, &Mat)> = feats.iter().map(|(h, l)| (h, l)).collect();
            let nodes = model.forward_batch(g, s, &items, None).unwrap();
            let l: Vec<&[usize]> = labels.iter().map(|v| &v[..]).collect();
            model.batch_loss(g, &nodes, &l).unwrap()
        },
        300,
        seed,
    )
}

pub fn composed_cases() -> Vec<Case> {
    vec![
        Case { name: "lstm sequence parameters", run: lstm_sequence },
        Case { name: "bidirectional gru with lengths", run: bigru_with_lengths },
        Case { name: "generator attention/lstm/postnet/losses", run: generator_attention },
        Case { name: "recognizer bi-gru + ctc", run: recognizer_ctc },
    ]
}
