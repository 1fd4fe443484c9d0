//! Independent reference computations and the hand-evaluated examples.

use agman::attention::{attribute_channel_attention, attribute_spatial_attention, channel_attention, spatial_attention};
use agman::backbone::BackboneProfile;
use agman::data::{encode_attribute, generate_synthetic, AttributeSpace, DatasetSplit};
use agman::eval::{
    average_precision, evaluate_map, map_summary, predict_triplet_embeddings, rank, score_triplets, Item,
};
use agman::loss::{
    classification_loss, combined_loss, cosine_similarity, triplet_loss, LossWeights, TripletMode,
};
use agman::model::{AgmanModel, ModelSpec};
use agman::optim::scheduled_lr;
use agman::train::{train, TrainConfig};
use ndarray::{arr1, Array1, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure, Check};

/// Absolute tolerance of the hand-evaluated examples.
pub const EXAMPLE_TOL: f64 = 1e-6;
/// Agreement required between the MAP implementation and the brute-force oracle.
pub const ORACLE_TOL: f64 = 1e-9;

fn close(what: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= EXAMPLE_TOL, || format!("{what}: got {got}, want {want}"))
}

fn err(e: agman::AgmanError) -> String {
    e.to_string()
}

/// A unit vector at `cos = c` from `(1, 0)`.
fn at_cosine(c: f64) -> Array1<f64> {
    arr1(&[c, (1.0 - c * c).sqrt()])
}

/// The worked examples of the loss and evaluation operations.
pub fn unit_examples() -> Check {
    let mut n = 0;
    let mut check = |what: &str, got: f64, want: f64| {
        n += 1;
        close(what, got, want)
    };
    let one = arr1(&[1.0]);
    let cl = |x: f64, y: f64| classification_loss(arr1(&[x]).view(), arr1(&[y]).view(), one.view()).map_err(err);
    check("L_c(0, 1)", cl(0.0, 1.0)?, 0.693147)?;
    check("L_c(0, 0)", cl(0.0, 0.0)?, 0.693147)?;
    let saturated = cl(40.0, 1.0)?;
    ensure(saturated.is_finite() && saturated < 1e-12, || format!("L_c(40, 1) = {saturated}"))?;

    let cos = |u: &[f64], v: &[f64]| cosine_similarity(arr1(u).view(), arr1(v).view()).map_err(err);
    check("cos(u, u)", cos(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0])?, 1.0)?;
    check("cos(e1, e2)", cos(&[1.0, 0.0], &[0.0, 1.0])?, 0.0)?;
    check("cos((1,0),(1,1))", cos(&[1.0, 0.0], &[1.0, 1.0])?, 0.707107)?;
    ensure(cos(&[0.0, 0.0], &[1.0, 0.0]).is_err(), || "zero-norm cosine must fail".into())?;

    let anchor = arr1(&[1.0, 0.0]);
    let tl = |sp: f64, sn: f64, mode| {
        triplet_loss(anchor.view(), at_cosine(sp).view(), at_cosine(sn).view(), 0.2, mode).map_err(err)
    };
    check("corrected (1, -1)", tl(1.0, -1.0, TripletMode::SimilarityCorrected)?, 0.0)?;
    check("corrected tie", tl(0.4, 0.4, TripletMode::SimilarityCorrected)?, 0.2)?;
    check("corrected (0.5, 0.6)", tl(0.5, 0.6, TripletMode::SimilarityCorrected)?, 0.3)?;
    check("as written (0.5, 0.6)", tl(0.5, 0.6, TripletMode::AsWritten)?, 0.1)?;

    let w = |w0: f64, w1: f64| LossWeights { w0, w1, ..LossWeights::initial(1) };
    check("combined at init", combined_loss(1.0, 1.0, &w(0.0, 0.0)), 1.0)?;
    check("combined w0 = ln 2", combined_loss(1.0, 2.0, &w(2f64.ln(), 0.0)), 2.693147)?;
    check("combined zeros", combined_loss(0.0, 0.0, &w(0.0, 0.0)), 0.0)?;

    check("AP [1,1,0]", average_precision(&[true, true, false]).unwrap(), 1.0)?;
    check("AP [0,1,1]", average_precision(&[false, true, true]).unwrap(), 0.583333)?;
    check("AP [1,0,1]", average_precision(&[true, false, true]).unwrap(), 0.833333)?;
    ensure(average_precision(&[false, false]).is_none(), || "AP without relevant items".into())?;

    // perfect separation: same-label candidates point the query's way
    let item = |id: &str, label: usize, v: &[f64]| Item::new(id, label, arr1(v)).unwrap();
    let queries = [item("q0", 0, &[1.0, 0.0]), item("q1", 1, &[0.0, 1.0])];
    let pool = [
        item("c0", 0, &[1.0, 0.1]),
        item("c1", 1, &[0.1, 1.0]),
        item("c2", 0, &[0.9, 0.2]),
        item("c3", 1, &[0.2, 0.9]),
    ];
    check("separable MAP", map_summary(&queries, &pool).map().unwrap(), 1.0)?;
    // one query ranked as [0, 1, 1]
    let single = [item("q", 0, &[1.0, 0.0])];
    let pool = [item("a", 1, &[1.0, 0.0]), item("b", 0, &[1.0, 0.5]), item("c", 0, &[1.0, 1.0])];
    check("single-query MAP", map_summary(&single, &pool).map().unwrap(), 0.583333)?;

    let e = |v: &[f64]| arr1(v);
    let (ok, gap) = predict_triplet_embeddings(e(&[1.0, 0.0]).view(), e(&[1.0, 0.0]).view(), e(&[0.0, 1.0]).view()).map_err(err)?;
    ensure(ok, || "maximal gap must be correct".into())?;
    check("maximal gap", gap, 1.0)?;
    let (ok, gap) = predict_triplet_embeddings(e(&[1.0, 0.0]).view(), e(&[0.3, 0.7]).view(), e(&[0.3, 0.7]).view()).map_err(err)?;
    ensure(!ok, || "equal positive and negative must be wrong".into())?;
    check("tie gap", gap, 0.0)?;
    let (ok, gap) = predict_triplet_embeddings(e(&[1.0, 0.0]).view(), e(&[1.0, 1.0]).view(), e(&[1.0, -1.0]).view()).map_err(err)?;
    ensure(!ok, || "mirrored cosine tie must be wrong".into())?;
    check("mirrored tie gap", gap, 0.0)?;

    let t = |a: Array1<f64>, p: Array1<f64>, n: Array1<f64>| [a, p, n];
    let correct = vec![
        t(e(&[1.0, 0.0]), e(&[1.0, 0.0]), e(&[-1.0, 0.0])),
        t(e(&[0.0, 1.0]), e(&[0.1, 1.0]), e(&[1.0, -0.2])),
    ];
    let (acc, loss) = score_triplets(&correct, 0.2, TripletMode::SimilarityCorrected).map_err(err)?;
    check("all-correct accuracy", acc, 1.0)?;
    check("inactive hinge loss", loss, 0.0)?;
    // hinge terms by hand: 0.2 - 1 + 0 -> 0, 0.2 - 0.5 + 0.6 = 0.3, 0.2 - 0.8 + 0.1 -> 0
    let mixed = vec![
        t(anchor.clone(), at_cosine(1.0), at_cosine(0.0)),
        t(anchor.clone(), at_cosine(0.5), at_cosine(0.6)),
        t(anchor.clone(), at_cosine(0.8), at_cosine(0.1)),
    ];
    let (acc, loss) = score_triplets(&mixed, 0.2, TripletMode::SimilarityCorrected).map_err(err)?;
    check("mixed accuracy", acc, 2.0 / 3.0)?;
    check("mixed average loss", loss, 0.3 / 3.0)?;
    ensure(score_triplets(&[], 0.2, TripletMode::SimilarityCorrected).is_err(), || "empty triplet list".into())?;

    // ranking contracts
    let pool: Vec<Item> = ["d", "b", "c", "a"]
        .iter()
        .zip([[1.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        .map(|(id, v)| item(id, 0, &v))
        .collect();
    let ranked = rank(&item("q", 0, &[1.0, 0.0]), &pool);
    let order: Vec<&str> = ranked.iter().map(|r| r.id.as_str()).collect();
    ensure(order == ["b", "c", "d", "a"], || format!("ranking {order:?}"))?;
    check("identical candidate first", ranked[0].score, 1.0)?;

    for epoch in 0..12 {
        let want = 1e-4 * 0.9f64.powi((epoch / 3) as i32);
        check("scheduled lr", scheduled_lr(1e-4, 0.9, 3, epoch), want)?;
    }
    Ok(format!("{n} values within {EXAMPLE_TOL:e}"))
}

/// Tinynet at 32 pixels with small channel counts.
pub fn small_spec(attributes: usize, seed: u64) -> ModelSpec {
    let mut spec = ModelSpec::for_profile(BackboneProfile::Tinynet, attributes);
    spec.input_size = 32;
    spec.channels = [8, 8, 16, 16];
    spec.embedding_size = 16;
    spec.asa_channels = 8;
    spec.aca_hidden = 8;
    spec.ca_reduction = 4;
    spec.seed = seed;
    spec
}

/// The trainer examples: a short run reduces the loss, zero epochs or a zero
/// learning rate leave the parameters untouched.
pub fn trainer_examples() -> Check {
    let space = AttributeSpace::new(vec!["p".into(), "q".into()], vec![3, 3]).map_err(err)?;
    let split = generate_synthetic(&space, 8, 32, 11).map_err(err)?;
    let config = TrainConfig {
        epochs: 5,
        triplets_per_epoch: 64,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut model = AgmanModel::new(small_spec(2, 3)).map_err(err)?;
    let history = train(&mut model, &split, &space, &config, None).map_err(err)?;
    ensure(history.epochs.len() == 5, || format!("history has {} epochs", history.epochs.len()))?;
    ensure(
        history.epochs.iter().all(|s| [s.l_c, s.l_triplet, s.total, s.w0, s.w1, s.lr].iter().all(|v| v.is_finite())),
        || "non-finite history entry".into(),
    )?;
    let (first, last) = (history.epochs[0], history.epochs[4]);
    ensure(last.total < first.total, || format!("total loss {} -> {}", first.total, last.total))?;

    let initial = AgmanModel::new(small_spec(2, 3)).map_err(err)?;
    for (epochs, lr) in [(0, 1e-4), (2, 0.0)] {
        let mut model = initial.clone();
        let config = TrainConfig {
            epochs,
            learning_rate: lr,
            triplets_per_epoch: 32,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &split, &space, &config, None).map_err(err)?;
        ensure(history.epochs.len() == epochs, || "history length".into())?;
        for id in initial.store().ids() {
            ensure(model.store().get(id) == initial.store().get(id), || {
                format!("epochs {epochs}, lr {lr}: `{}` changed", initial.store().name(id))
            })?;
        }
    }
    Ok(format!("total loss {:.4} -> {:.4} over 5 epochs", first.total, last.total))
}

/// One random draw of the attention invariants: stage shapes, a normalized
/// spatial map and gates strictly inside (0, 1).
pub fn attention_draw(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let attribute = rng.random_range(0..n);
    let mut model = AgmanModel::new(small_spec(n, seed)).map_err(err)?;
    // Weights keep their seeded initialization; gains and biases start at
    // exactly one and zero, so they are moved. Far larger parameters push
    // sigmoid logits past ~37, where f64 rounds the gate to exactly 1.
    let ids: Vec<_> = model
        .store()
        .ids()
        .filter(|&id| {
            let name = model.store().name(id);
            name.contains("bias") || name.contains("gain")
        })
        .collect();
    for id in ids {
        model
            .store_mut()
            .get_mut(id)
            .mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    }
    let image = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(0.0..1.0));
    let a: Vec<f64> = {
        let mut v = vec![0.0; n];
        v[attribute] = 1.0;
        v
    };
    let store = model.store();
    let aga = model.aga();
    let input = model.attention_input(image.view()).map_err(err)?;
    let (x, _) = aga.projection().forward(store, input.data.view());
    let shape = x.dim();
    let in_unit = |v: &f64| *v > 0.0 && *v < 1.0;
    let (x, map, _) = attribute_spatial_attention(x.view(), &a, &aga.asa_weights(store)).map_err(err)?;
    ensure(x.dim() == shape, || format!("ASA output {:?} from {shape:?}", x.dim()))?;
    ensure(map.iter().all(|v| *v >= 0.0), || "negative softmax entry".into())?;
    ensure((map.sum() - 1.0).abs() <= 1e-6, || format!("softmax sums to {}", map.sum()))?;
    let (x, gate, _) = spatial_attention(x.view(), &aga.sa_weights(store)).map_err(err)?;
    ensure(x.dim() == shape, || "SA changed the shape".into())?;
    ensure(gate.iter().all(in_unit), || "SA gate outside (0, 1)".into())?;
    let (x, gate, _) = attribute_channel_attention(x.view(), &a, &aga.aca_weights(store)).map_err(err)?;
    ensure(x.dim() == shape, || "ACA changed the shape".into())?;
    ensure(gate.iter().all(in_unit), || "ACA gate outside (0, 1)".into())?;
    let (x, gate, _) = channel_attention(x.view(), &aga.ca_weights(store)).map_err(err)?;
    ensure(x.dim() == shape, || "CA changed the shape".into())?;
    ensure(gate.iter().all(in_unit), || "CA gate outside (0, 1)".into())?;

    let (embedding, trace) = model.embed(image.view(), attribute).map_err(err)?;
    ensure(embedding.len() == shape.0, || "embedding length".into())?;
    ensure(trace.spatial_softmax_map.as_ref() == Some(&map), || "trace disagrees with the ASA stage".into())?;
    let x_pooled = x.mean_axis(ndarray::Axis(2)).unwrap().mean_axis(ndarray::Axis(1)).unwrap();
    ensure(
        x_pooled.iter().zip(&embedding).all(|(p, e)| (p - e).abs() < 1e-12),
        || "embedding is not the pooled stage chain".into(),
    )?;
    Ok(())
}

pub fn attention_invariants(draws: u64) -> Check {
    for seed in 0..draws {
        attention_draw(seed).map_err(|e| format!("draw {seed}: {e}"))?;
    }
    Ok(format!("{draws} draws"))
}

/// Brute-force AP: cosine from the raw vectors, selection sort by score then
/// id, precision at every relevant rank recounted from the top.
pub fn brute_force_ap(query: &(String, usize, Vec<f64>), candidates: &[(String, usize, Vec<f64>)]) -> Option<f64> {
    let cosine = |u: &[f64], v: &[f64]| {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nu * nv)
    };
    let mut pool: Vec<(f64, &str, bool)> = candidates
        .iter()
        .filter(|c| c.0 != query.0)
        .map(|c| (cosine(&query.2, &c.2), c.0.as_str(), c.1 == query.1))
        .collect();
    let mut ranked = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (s, id, _) = pool[i];
            let (bs, bid, _) = pool[best];
            if s > bs || (s == bs && id < bid) {
                best = i;
            }
        }
        ranked.push(pool.remove(best).2);
    }
    let relevant_ranks: Vec<usize> = (0..ranked.len()).filter(|&k| ranked[k]).collect();
    if relevant_ranks.is_empty() {
        return None;
    }
    let precisions: Vec<f64> = relevant_ranks
        .iter()
        .map(|&k| ranked[..=k].iter().filter(|&&r| r).count() as f64 / (k + 1) as f64)
        .collect();
    Some(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

/// Query-weighted MAP of the brute-force AP; `None` when no query scores.
pub fn brute_force_map(queries: &[(String, usize, Vec<f64>)], candidates: &[(String, usize, Vec<f64>)]) -> Option<f64> {
    let aps: Vec<f64> = queries.iter().filter_map(|q| brute_force_ap(q, candidates)).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

type Raw = (String, usize, Vec<f64>);

fn to_items(raw: &[Raw]) -> Vec<Item> {
    raw.iter()
        .map(|(id, l, v)| Item::new(id.clone(), *l, Array1::from(v.clone())).unwrap())
        .collect()
}

/// Random labeled vectors; roughly a third repeat an earlier vector so that
/// exact score ties occur.
pub fn random_pool(rng: &mut ChaCha8Rng, prefix: &str, count: usize, classes: usize, dim: usize) -> Vec<Raw> {
    let mut out: Vec<Raw> = Vec::with_capacity(count);
    for i in 0..count {
        let v = if !out.is_empty() && rng.random_bool(0.3) {
            out[rng.random_range(0..out.len())].2.clone()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        out.push((format!("{prefix}{i:03}"), rng.random_range(0..classes), v));
    }
    out
}

/// The ranking and AP machinery on raw embeddings with ties, and the full
/// model path on small synthetic splits, against the brute-force oracle.
/// Candidate permutations must reproduce every MAP exactly.
pub fn map_oracle(instances: u64) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let classes = rng.random_range(2..=5);
        let (nq, nc) = (rng.random_range(1..=10), rng.random_range(1..=50));
        let queries = random_pool(&mut rng, "q", nq, classes, 3);
        let candidates = random_pool(&mut rng, "c", nc, classes, 3);
        let want = brute_force_map(&queries, &candidates);
        let got = map_summary(&to_items(&queries), &to_items(&candidates));
        match (got.map(), want) {
            (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
            (None, None) => {}
            (g, w) => return Err(format!("instance {seed}: MAP {g:?}, oracle {w:?}")),
        }
        ensure(worst <= ORACLE_TOL, || format!("instance {seed}: deviation {worst:e}"))?;
        let mut shuffled = candidates.clone();
        shuffled.shuffle(&mut rng);
        let again = map_summary(&to_items(&queries), &to_items(&shuffled));
        ensure(again == got, || format!("instance {seed}: candidate order changed {got:?} to {again:?}"))?;
    }
    for seed in 0..instances {
        let (split, space, model) = model_instance(seed)?;
        let report = evaluate_map(&model, &split, &space).map_err(err)?;
        for a in 0..space.n() {
            let embed_ids = |ids: &[String]| -> Result<Vec<Raw>, String> {
                ids.iter()
                    .filter_map(|id| split.get(id).and_then(|r| r.label(a)).map(|l| (id, l)))
                    .map(|(id, l)| {
                        let r = split.get(id).unwrap();
                        let x = split.pixels(r, &space, model.spec().input_size).map_err(err)?;
                        let (e, _) = model.embed(x.view(), a).map_err(err)?;
                        Ok((id.clone(), l, e.to_vec()))
                    })
                    .collect()
            };
            let want = brute_force_map(&embed_ids(&split.query_ids)?, &embed_ids(&split.candidate_ids)?);
            let got = report.per_attribute[space.name(a)];
            match (got, want) {
                (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                (None, None) => {}
                (g, w) => return Err(format!("model instance {seed}: MAP {g:?}, oracle {w:?}")),
            }
            ensure(worst <= ORACLE_TOL, || format!("model instance {seed}: deviation {worst:e}"))?;
        }
        let mut permuted = split.clone();
        permuted.candidate_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        permuted.records.reverse();
        let again = evaluate_map(&model, &permuted, &space).map_err(err)?;
        ensure(again == report, || format!("model instance {seed}: permuted candidates changed the report"))?;
    }
    Ok(format!("{} instances, max deviation {worst:.1e}", 2 * instances))
}

/// A random small space, split and untrained model with at most 50 candidates.
pub fn model_instance(seed: u64) -> Result<(DatasetSplit, AttributeSpace, AgmanModel), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let counts: Vec<usize> = (0..n).map(|_| rng.random_range(2..=5)).collect();
    let names = (0..n).map(|a| format!("attr{a}")).collect();
    let space = AttributeSpace::new(names, counts.clone()).map_err(err)?;
    let max = *counts.iter().max().unwrap();
    let per_subclass = rng.random_range(2..=(60 / max).min(8));
    let split = generate_synthetic(&space, per_subclass, 32, seed)
        .and_then(|s| s.with_query_partition(0.2, seed))
        .map_err(err)?;
    let model = AgmanModel::new(small_spec(n, seed)).map_err(err)?;
    Ok((split, space, model))
}

/// Expected AP of a uniformly random ranking of `total` candidates of which
/// `relevant` match, estimated by shuffling.
pub fn chance_ap(relevant: usize, total: usize, rounds: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut flags: Vec<bool> = (0..total).map(|i| i < relevant).collect();
    let mut sum = 0.0;
    for _ in 0..rounds {
        flags.shuffle(rng);
        sum += average_precision(&flags).unwrap_or(0.0);
    }
    sum / rounds as f64
}

/// The chance level of each attribute's MAP for the split's exact pool
/// composition.
pub fn chance_map(split: &DatasetSplit, space: &AttributeSpace, rounds: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..space.n())
        .map(|a| {
            let label = |id: &String| split.get(id).and_then(|r| r.label(a));
            let pool: Vec<usize> = split.candidate_ids.iter().filter_map(label).collect();
            let aps: Vec<f64> = split
                .query_ids
                .iter()
                .filter_map(label)
                .map(|l| chance_ap(pool.iter().filter(|&&c| c == l).count(), pool.len(), rounds, &mut rng))
                .collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect()
}

/// One-hot vector of `attribute`.
pub fn one_hot(attribute: usize, space: &AttributeSpace) -> Vec<f64> {
    encode_attribute(attribute, space).unwrap()
}
