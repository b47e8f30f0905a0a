#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn nomos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nomos"))
        .args(args)
        .env_remove("NOMOS_OUT")
        .output()
        .expect("nomos binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small run file for the end-to-end pipeline: 200 pretraining steps on
/// the fixture corpus, then a few NER epochs.
pub fn smoke_config(dir: &Path) -> PathBuf {
    let fx = fixtures();
    let text = format!(
        r#"output_dir = "{out}"

[paths]
manifest = "{fx}/pretrain/manifest.jsonl"
ner = "{fx}/ner.iob"
classification = "{fx}/classification.jsonl"
hierarchy = "{fx}/hierarchy.tsv"

[corpus]
pack_len = 64

[tokenizer]
vocab_size = 500

[model]
num_layers = 1
hidden_dim = 32
num_heads = 2
ffn_dim = 64
max_positions = 128
dropout = 0.1
init_seed = 3

[pretrain]
steps = 200
batch_size = 8
peak_lr = 2e-3
warmup_steps = 20
seed = 5
log_every = 20

[finetune]
epochs = 3
learning_rate = 2e-3
batch_size = 8
seed = 9
max_len = 128

[grid]
epochs = [1, 2]
learning_rates = [1e-3, 2e-3, 3e-3]
batch_sizes = [8, 16]
"#,
        out = dir.join("runs").display(),
        fx = fx.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Runs normalize → tokenizer-train → pretrain → finetune → evaluate and
/// returns the output root.
pub fn smoke_pipeline(dir: &Path) -> PathBuf {
    let cfg = smoke_config(dir);
    let cfg = cfg.to_str().unwrap();
    let manifest = fixtures().join("pretrain/manifest.jsonl");
    let steps: [Vec<&str>; 5] = [
        vec!["normalize", "--manifest", manifest.to_str().unwrap(), "--config", cfg],
        vec!["tokenizer-train", "--config", cfg],
        vec!["pretrain", "--config", cfg],
        vec!["finetune", "--config", cfg, "--task", "ner"],
        vec!["evaluate", "--config", cfg, "--task", "ner"],
    ];
    for args in &steps {
        let o = nomos(args);
        assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    }
    dir.join("runs")
}

/// Characters representable in UTF-8, Windows-1253 and ISO-8859-7 alike.
pub fn greek_ascii_alphabet() -> Vec<char> {
    let mut v: Vec<char> = (' '..='~').collect();
    v.extend('\u{3b1}'..='\u{3c9}');
    v.extend(('\u{391}'..='\u{3a9}').filter(|&c| c != '\u{3a2}'));
    v.extend("άέήίόύώΆΈΉΊΌΎΏϊϋΐΰΪΫ«»\t\n".chars());
    v
}

pub fn random_text(rng: &mut impl rand::Rng, alphabet: &[char], max_len: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

pub mod oracle {
    use std::collections::BTreeSet;

    use nomos::corpus::Tag;

    /// (type, start, end) triples of every maximal entity, found by testing
    /// every candidate interval.
    pub fn spans(tags: &[Tag]) -> BTreeSet<(String, usize, usize)> {
        let ty = |t: &Tag| t.entity_type().map(str::to_string);
        let continues = |i: usize, t: &str| {
            i > 0 && matches!(&tags[i], Tag::Inside(x) if x == t) && ty(&tags[i - 1]).as_deref() == Some(t)
        };
        let mut out = BTreeSet::new();
        for start in 0..tags.len() {
            let Some(t) = ty(&tags[start]) else { continue };
            if continues(start, &t) {
                continue;
            }
            for end in start + 1..=tags.len() {
                let inner = (start + 1..end).all(|i| continues(i, &t));
                let closed = end == tags.len() || !continues(end, &t);
                if inner && closed {
                    out.insert((t.clone(), start, end));
                }
            }
        }
        out
    }

    pub struct Score {
        pub per_type: Vec<(String, f64, f64, f64, u64)>,
        pub micro: (f64, f64, f64),
        pub macro_f1: f64,
        pub weighted_f1: f64,
    }

    fn prf(tp: usize, npred: usize, ngold: usize) -> (f64, f64, f64) {
        let p = if npred == 0 { 0.0 } else { tp as f64 / npred as f64 };
        let r = if ngold == 0 { 0.0 } else { tp as f64 / ngold as f64 };
        let f = if p == r { p } else if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }

    pub fn score(gold: &[Vec<Tag>], pred: &[Vec<Tag>], types: &[String]) -> Score {
        let collect = |seqs: &[Vec<Tag>]| -> BTreeSet<(usize, String, usize, usize)> {
            seqs.iter()
                .enumerate()
                .flat_map(|(k, s)| spans(s).into_iter().map(move |(t, a, b)| (k, t, a, b)))
                .collect()
        };
        let g = collect(gold);
        let p = collect(pred);
        let mut per_type = Vec::new();
        for t in types {
            let gt: BTreeSet<_> = g.iter().filter(|x| &x.1 == t).collect();
            let pt: BTreeSet<_> = p.iter().filter(|x| &x.1 == t).collect();
            let tp = gt.intersection(&pt).count();
            let (pr, rc, f) = prf(tp, pt.len(), gt.len());
            per_type.push((t.clone(), pr, rc, f, gt.len() as u64));
        }
        let tp = g.intersection(&p).count();
        let micro = prf(tp, p.len(), g.len());
        let macro_f1 = per_type.iter().map(|x| x.3).sum::<f64>() / types.len() as f64;
        let support: u64 = per_type.iter().map(|x| x.4).sum();
        let weighted_f1 = if support == 0 {
            0.0
        } else {
            per_type.iter().map(|x| x.4 as f64 * x.3).sum::<f64>() / support as f64
        };
        Score {
            per_type,
            micro,
            macro_f1,
            weighted_f1,
        }
    }
}
