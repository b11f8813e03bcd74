use laso_core::eval::perfect_matching;
use laso_core::nets::{load_model, OpKind};
use laso_core::synth::{load_bank, SplitTag};

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[test]
fn probe_unseen_projection() {
    let bank = load_bank("/tmp/t7/bank.lbnk".as_ref()).unwrap();
    let test = bank.split_indices(SplitTag::Test);
    let unseen: Vec<usize> = (0..bank.l).filter(|&k| !bank.seen_mask()[k]).collect();

    // empirical prototype direction per unseen label: mean(with) - mean(without)
    let mut dirs = vec![vec![0.0f64; bank.d]; unseen.len()];
    for (ui, &u) in unseen.iter().enumerate() {
        let (mut with, mut without) = (vec![0.0; bank.d], vec![0.0; bank.d]);
        let (mut nw, mut no) = (0.0, 0.0);
        for &i in &test {
            let tgt = if bank.label_row(i)[u] == 1 {
                nw += 1.0;
                &mut with
            } else {
                no += 1.0;
                &mut without
            };
            for (a, b) in tgt.iter_mut().zip(bank.feature(i)) {
                *a += b;
            }
        }
        for j in 0..bank.d {
            dirs[ui][j] = with[j] / nw - without[j] / no;
        }
        unit(&mut dirs[ui]);
    }

    let (pairs, _) = perfect_matching(&test, 5);
    for model_path in ["/tmp/t7/m/model.laso", "/tmp/t7/s43/model.laso"] {
        let model = load_model(model_path.as_ref()).unwrap();
        println!("-- {model_path} --");
        let mut acc = [[0.0f64; 3]; 2]; // [z_int=0 / orig=1][both, one, none]
        let mut cnt = [0.0f64; 3];
        for &(i, j) in &pairs {
            let fx = bank.feature(i);
            let fy = bank.feature(j);
            let z = model.apply_operator(OpKind::Intersection, fx, fy).unwrap();
            for (ui, &u) in unseen.iter().enumerate() {
                let b = match (bank.label_row(i)[u] == 1, bank.label_row(j)[u] == 1) {
                    (true, true) => 0,
                    (true, false) | (false, true) => 1,
                    (false, false) => 2,
                };
                let pz: f64 = z.iter().zip(&dirs[ui]).map(|(a, b)| a * b).sum();
                let px: f64 = fx.iter().zip(&dirs[ui]).map(|(a, b)| a * b).sum();
                acc[0][b] += pz;
                acc[1][b] += px;
                cnt[b] += 1.0;
            }
        }
        for (tag, row) in [("z_int", acc[0]), ("fx   ", acc[1])] {
            println!(
                "{tag}: both {:7.3} one {:7.3} none {:7.3}  (n={:.0}/{:.0}/{:.0})",
                row[0] / cnt[0],
                row[1] / cnt[1],
                row[2] / cnt[2],
                cnt[0],
                cnt[1],
                cnt[2]
            );
        }
    }
}
