use auxlat_bench::{bench_model, bench_tasks};
use auxlat_core::advantage::{group_decoupled_advantages, GroupRewards, ADV_EPS};
use auxlat_core::encoding::encode_task;
use auxlat_core::graph::Graph;
use auxlat_core::infer::GenParams;
use auxlat_core::rewards::{total_reward, Response, RewardConfig};
use auxlat_core::rng::rng_for;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use std::hint::black_box;

fn forward_backward(c: &mut Criterion) {
    let model = bench_model();
    let tasks = bench_tasks(1);
    let enc = encode_task(&model.vocab, &tasks[0]).unwrap();
    let prefix = model.encode_image(&tasks[0].question_raster).unwrap();
    let (tokens, layout) = auxlat_core::encoding::assemble_sequence(
        &enc,
        &model.vocab,
        prefix.rows(),
        Some(model.cfg.k_latent),
        true,
    );
    c.bench_function("teacher_forced_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bp = model.bind(&mut g);
            let out = model.forward(&mut g, &bp, &tokens, Some(&prefix)).unwrap();
            let ce = auxlat_core::align::stage3_ce(
                &mut g,
                out.logits,
                &tokens,
                layout.prefix.len(),
                layout.output(),
            )
            .unwrap();
            g.backward(ce).unwrap();
            black_box(g.value(ce).item())
        })
    });
}

fn greedy_generation(c: &mut Criterion) {
    let model = bench_model();
    let tasks = bench_tasks(1);
    let enc = encode_task(&model.vocab, &tasks[0]).unwrap();
    let prefix = model.encode_image(&tasks[0].question_raster).unwrap();
    c.bench_function("greedy_generate_32", |b| {
        b.iter(|| {
            let gen = model
                .generate(&enc.question, Some(&prefix), &GenParams::greedy(32))
                .unwrap();
            black_box(gen.tokens.len())
        })
    });
}

fn advantages(c: &mut Criterion) {
    let mut rng = rng_for(7, &[0]);
    let groups: Vec<GroupRewards> = (0..16)
        .map(|p| GroupRewards {
            prompt_id: p,
            rewards: (0..8)
                .map(|_| {
                    let acc = f64::from(rng.gen_bool(0.5));
                    let lat = if rng.gen_bool(0.8) { 0.5 } else { -0.2 };
                    auxlat_core::rewards::RewardBreakdown {
                        acc,
                        fmt: 0.2,
                        lat,
                        len: 0.0,
                        rep: rng.gen_range(-0.5..0.0),
                        total: 0.0,
                    }
                })
                .collect(),
        })
        .collect();
    c.bench_function("group_decoupled_advantages_16x8", |b| {
        b.iter(|| black_box(group_decoupled_advantages(&groups, ADV_EPS).unwrap()))
    });
}

fn reward_scoring(c: &mut Criterion) {
    let cfg = RewardConfig::default();
    let text = "reflect Q axis then connect P Q <|latent_start|> <|latent_pad|> <|latent_pad|> <|latent_end|> \\boxed{10}";
    c.bench_function("total_reward", |b| {
        b.iter(|| {
            let r = Response::from_text(black_box(text));
            black_box(total_reward(&r, "10", &cfg).unwrap())
        })
    });
}

criterion_group!(benches, forward_backward, greedy_generation, advantages, reward_scoring);
criterion_main!(benches);
