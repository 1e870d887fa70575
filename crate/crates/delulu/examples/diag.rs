use delulu::config::RunConfig;
use delulu::encoder::load_checkpoint;
use delulu::pipeline::extract_embeddings;
use std::collections::BTreeMap;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig::load(std::path::Path::new(&args[1])).unwrap();
    let ckpt = load_checkpoint(std::path::Path::new(&args[2])).unwrap();
    let layer = args.get(4).map(|s| s.parse::<usize>().unwrap());
    let recs = delulu::audio::read_manifest(std::path::Path::new(&args[3])).unwrap();
    let table = extract_embeddings(&ckpt.params, &ckpt.config, &recs, true, layer, None).unwrap();
    let _ = &cfg;
    // EER with raw vs mean-centered embeddings
    let utts: Vec<(String, String)> =
        table.entries.iter().map(|(u, e)| (u.clone(), e.speaker_id.clone())).collect();
    let trials = delulu::eval::generate_trials(&utts, 400, 7).unwrap();
    let scores = delulu::eval::score_trials(&table, &trials).unwrap();
    let (eer_raw, _) = delulu::eval::compute_eer(&scores).unwrap();
    let dim = table.entries.values().next().unwrap().vector.len();
    let mut mean = vec![0.0; dim];
    for e in table.entries.values() {
        for (m, v) in mean.iter_mut().zip(&e.vector) {
            *m += v / table.entries.len() as f64;
        }
    }
    let mut centered = table.clone();
    for e in centered.entries.values_mut() {
        for (v, m) in e.vector.iter_mut().zip(&mean) {
            *v -= m;
        }
        let n = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        for v in e.vector.iter_mut() {
            *v /= n;
        }
    }
    let scores_c = delulu::eval::score_trials(&centered, &trials).unwrap();
    let (eer_c, _) = delulu::eval::compute_eer(&scores_c).unwrap();
    println!("EER raw {eer_raw:.3} centered {eer_c:.3}");
    let ids: Vec<&String> = table.entries.keys().collect();
    // mean cosine per speaker pair
    let mut agg: BTreeMap<(String, String), (f64, f64, usize)> = BTreeMap::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let (a, b) = (&table.entries[ids[i]], &table.entries[ids[j]]);
            let s: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
            let key = if a.speaker_id <= b.speaker_id {
                (a.speaker_id.clone(), b.speaker_id.clone())
            } else {
                (b.speaker_id.clone(), a.speaker_id.clone())
            };
            let e = agg.entry(key).or_insert((0.0, f64::NEG_INFINITY, 0));
            e.0 += s;
            e.1 = e.1.max(s);
            e.2 += 1;
        }
    }
    let mut rows: Vec<(f64, f64, String)> = agg
        .into_iter()
        .map(|((a, b), (sum, max, n))| (sum / n as f64, max, format!("{a} vs {b}")))
        .collect();
    rows.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    println!("top cross-speaker pairs by mean cosine:");
    for (mean, max, name) in rows.iter().filter(|(_, _, n)| !n.contains(" vs ") || {
        let parts: Vec<&str> = n.split(" vs ").collect();
        parts[0] != parts[1]
    }).take(8) {
        println!("  {name}: mean {mean:.3} max {max:.3}");
    }
    println!("bottom same-speaker rows:");
    rows.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    for (mean, max, name) in rows.iter().filter(|(_, _, n)| {
        let parts: Vec<&str> = n.split(" vs ").collect();
        parts[0] == parts[1]
    }).take(8) {
        println!("  {name}: mean {mean:.3} max {max:.3}");
    }
}
