use std::time::Instant;

use mobgen_core::autoencoder::TrainConfig;
use mobgen_core::codec::location_embeddings;
use mobgen_core::diffusion::{DiffusionConfig, NoiseSchedule};
use mobgen_core::fixture::{fixture_city, FixtureKind};
use mobgen_core::metrics::{build_report, trajectory_statistics};
use mobgen_core::oracle::{derive_od, generate_epr_corpus, EprConfig, OdWindow};
use mobgen_core::scaling::{day_labels, embed_corpus, generate_corpus, train_stack, LoopConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let users: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(12);
    let lambda: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let smax: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let frac: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let gen_users: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(users);

    let t0 = Instant::now();
    let stage = |name: &str, t: &mut Instant| {
        eprintln!("[{:>6.1}s] {name} (+{:.1}s)", t0.elapsed().as_secs_f64(), t.elapsed().as_secs_f64());
        *t = Instant::now();
    };
    let mut t = Instant::now();

    let city = fixture_city(FixtureKind::A);
    let cfg = EprConfig { n_users: users, n_days: 7, seed: 0, ..Default::default() };
    let corpus = generate_epr_corpus(&city.grid, &city.table, &cfg).unwrap();
    stage("oracle", &mut t);

    let lc = LoopConfig {
        model: DiffusionConfig::preset("small", 0).unwrap(),
        diff_train: TrainConfig { lr: 1e-3, batch: 32, epochs, seed: 0 },
        schedule: NoiseSchedule { sigma_min: 0.02, sigma_max: smax, ddim_steps: steps },
        lambda,
        train_fraction: frac,
        users: gen_users,
        gen_seed: 1,
        ..Default::default()
    };
    let stack = train_stack(&[&city.table], &[&corpus.trajectories[..]], &lc).unwrap();
    stage("train stack (ae+diffusion)", &mut t);

    let days = day_labels(&corpus.trajectories);
    let synth = generate_corpus(&stack, &city.table, &lc.schedule, &corpus.od, lc.users, &days, lc.lambda, lc.gen_seed).unwrap();
    stage("generate+decode", &mut t);

    let od_synth = derive_od(&synth, city.grid.len(), OdWindow::All).unwrap();
    let detail = build_report(&city.grid, &corpus.trajectories, &synth, &corpus.od, &od_synth).unwrap();
    stage("report", &mut t);

    let r = &detail.report;
    println!("radius   ks={:.4} jsd={:.4}", r.radius.ks, r.radius.jsd);
    println!("distance ks={:.4} jsd={:.4}", r.distance.ks, r.distance.jsd);
    println!("duration ks={:.4} jsd={:.4}", r.duration.ks, r.duration.jsd);
    println!("dailyloc ks={:.4} jsd={:.4}", r.daily_loc.ks, r.daily_loc.jsd);
    println!("cpc={:.4} rmse={:.4} motif_jsd={:.4}", r.cpc, r.rmse, r.motif_jsd);
    if let Some(w) = &r.waiting_exponent {
        println!("waiting eps real={:.3} synth={:.3}", w.real, w.synthetic);
    }
    if let Some(z) = &r.zipf_exponent {
        println!("zipf zeta real={:.3} synth={:.3}", z.real, z.synthetic);
    }

    let sr = trajectory_statistics(&corpus.trajectories, &city.grid);
    let ss = trajectory_statistics(&synth, &city.grid);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("stays/day      real={:.2} synth={:.2}", sr.waiting_times.len() as f64 / corpus.trajectories.len() as f64, ss.waiting_times.len() as f64 / synth.len() as f64);
    println!("daily_loc mean real={:.2} synth={:.2}", mean(&sr.daily_locations), mean(&ss.daily_locations));
    println!("daily_km  mean real={:.2} synth={:.2}", mean(&sr.daily_distances), mean(&ss.daily_distances));
    println!("r_g mean       real={:.2} synth={:.2}", mean(&sr.gyration_radii), mean(&ss.gyration_radii));

    // where do the synthetic flows go? overlap of top-200 OD pairs
    let top = |od: &mobgen_core::features::ODMatrix| {
        let mut v: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..od.dim {
            for j in 0..od.dim {
                let f = od.get(i, j);
                if f > 0.0 { v.push((i, j, f)); }
            }
        }
        v.sort_by(|a, b| b.2.total_cmp(&a.2));
        v.truncate(200);
        v.into_iter().map(|(i, j, _)| (i, j)).collect::<std::collections::BTreeSet<_>>()
    };
    let tr = top(&corpus.od);
    let ts = top(&od_synth);
    println!("top200 OD overlap = {}", tr.intersection(&ts).count());
    println!("od totals real={:.0} synth={:.0}", corpus.od.total(), od_synth.total());

    // embedding-space geometry: distance in embedding vs km for random pairs
    let emb = location_embeddings(&stack.ae, &city.table);
    let m = city.grid.len();
    let mut close_km = Vec::new();
    let mut far_km = Vec::new();
    for i in (0..m).step_by(7) {
        for j in (0..m).step_by(11) {
            if i == j { continue; }
            let de: f64 = (0..8).map(|k| (emb[[i, k]] - emb[[j, k]]).powi(2)).sum::<f64>().sqrt();
            let dk = city.grid.distance_km(i as u32, j as u32);
            if de < 0.05 { close_km.push(dk); } else { far_km.push(dk); }
        }
    }
    println!("emb<0.05 pairs: n={} mean_km={:.2}; others mean_km={:.2}",
        close_km.len(), mean(&close_km), mean(&far_km));
}
