use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn docflat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docflat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TOY_SRC: &str =
    "<d>\nthe bus left\nit was late\nwe waited\nthen it came\nwe got on\nit was full\n";
const TOY_TGT: &str =
    "<d>\nder bus fuhr\ner war spaet\nwir warteten\ndann kam er\nwir stiegen ein\ner war voll\n";

const TINY: &str = "layers = 1\nd_model = 16\nheads = 2\nffn_dim = 32\ndropout = 0.1\n\
warmup = 5\nmax_updates = 12\nvalid_every = 6\naccumulation = 1\nbatch_size = 8\npeak_lr = 0.003\n";

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let f = dir.join(name);
    fs::write(&f, text).unwrap();
    f
}

#[test]
fn prepare_data_on_toy_document() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "src.txt", TOY_SRC);
    let tgt = write(dir.path(), "tgt.txt", TOY_TGT);
    let out = dir.path().join("data");
    let o = docflat(&[
        "prepare-data",
        "--src",
        p(&src),
        "--tgt",
        p(&tgt),
        "--out",
        p(&out),
        "--context",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("pseudo_documents = 6"));
    assert_eq!(
        fs::read_to_string(out.join("pseudo.txt"))
            .unwrap()
            .lines()
            .count(),
        6
    );
    assert!(out.join("vocab.txt").exists());
    let ids = fs::read_to_string(out.join("train.ids")).unwrap();
    assert_eq!(ids.lines().count(), 7);
    // The last pseudo-document holds three context sentences.
    let last = fs::read_to_string(out.join("pseudo.txt"))
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .to_string();
    assert!(
        last.starts_with("0\t6\t<idx:3> we waited </s> <idx:4>"),
        "{last}"
    );
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&docflat(&["no-such-command"])), 2);
    assert_eq!(code(&docflat(&["bleu", "--hyp", "x"])), 2);
    assert_eq!(
        code(&docflat(&[
            "translate",
            "--ckpt",
            "a",
            "--input",
            "b",
            "--beam",
            "zero"
        ])),
        2
    );
    assert_eq!(code(&docflat(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let o = docflat(&[
        "train",
        "--stage",
        "2",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    let o = docflat(&[
        "train",
        "--stage",
        "1",
        "--variant",
        "doc2doc",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "s.txt", "<d>\na b\nc\n");
    let tgt = write(dir.path(), "t.txt", "<d>\na b\n");
    let o = docflat(&[
        "prepare-data",
        "--src",
        p(&src),
        "--tgt",
        p(&tgt),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 3);
    let o = docflat(&[
        "bleu",
        "--hyp",
        p(&dir.path().join("missing")),
        "--ref",
        p(&src),
    ]);
    assert_eq!(code(&o), 3);
    let o = docflat(&["bleu", "--hyp", p(&src), "--ref", p(&tgt)]);
    assert_eq!(code(&o), 3);
    let bad = write(dir.path(), "bad.cfg", "no_such_key = 1\n");
    let data = prepared(dir.path());
    let o = docflat(&[
        "train",
        "--stage",
        "1",
        "--config",
        p(&bad),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bleu_and_significance() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(
        dir.path(),
        "r.txt",
        "<d>\na b c d e\nf g h i j\n<d>\nk l m n o\n",
    );
    let w = write(
        dir.path(),
        "w.txt",
        "<d>\na b x d e\nf g y i j\n<d>\nk z m n o\n",
    );
    let o = docflat(&["bleu", "--hyp", p(&r), "--ref", p(&r)]);
    assert_eq!(stdout(&o), "BLEU = 100.00\n");
    let o = docflat(&[
        "significance",
        "--hyp-a",
        p(&r),
        "--hyp-b",
        p(&w),
        "--ref",
        p(&r),
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("p_value = 0.0000"));
    let again = docflat(&[
        "significance",
        "--hyp-a",
        p(&r),
        "--hyp-b",
        p(&w),
        "--ref",
        p(&r),
        "--seed",
        "3",
    ]);
    assert_eq!(o.stdout, again.stdout);
}

fn prepared(dir: &Path) -> std::path::PathBuf {
    let syn = dir.join("syn");
    let o = docflat(&[
        "make-synthetic",
        "--out",
        p(&syn),
        "--docs",
        "3",
        "--seed",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = dir.join("data");
    let o = docflat(&[
        "prepare-data",
        "--src",
        p(&syn.join("train.src")),
        "--tgt",
        p(&syn.join("train.tgt")),
        "--out",
        p(&data),
        "--valid-src",
        p(&syn.join("train.src")),
        "--valid-tgt",
        p(&syn.join("train.tgt")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = prepared(d);
    let cfg = write(d, "tiny.cfg", TINY);
    let s1 = d.join("s1");
    let o = docflat(&[
        "train",
        "--stage",
        "1",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&s1),
        "--seed",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(s1.join("train.log.tsv")).unwrap();
    assert!(log.starts_with("step\ttrain_loss\tvalid_loss\tlr\tups\n"));
    let echoed = fs::read_to_string(s1.join("config.txt")).unwrap();
    assert!(echoed.contains("variant = sent2sent") && echoed.contains("seed = 4"));

    let run_stage2 = |out: &Path| {
        let o = docflat(&[
            "train",
            "--stage",
            "2",
            "--variant",
            "docflat_d",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(out),
            "--init",
            p(&s1.join("averaged.dflt")),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (d.join("s2a"), d.join("s2b"));
    run_stage2(&a);
    run_stage2(&b);
    assert_eq!(
        fs::read(a.join("averaged.dflt")).unwrap(),
        fs::read(b.join("averaged.dflt")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("config.txt")).unwrap(),
        fs::read(b.join("config.txt")).unwrap()
    );
    assert!(fs::read_to_string(a.join("config.txt"))
        .unwrap()
        .contains("gamma = 0.5"));
    assert!(a.join("checkpoint_12.dflt").exists());

    let src = d.join("syn").join("train.src");
    let avg = a.join("averaged.dflt");
    let translate = |extra: &[&str]| {
        let mut args = vec![
            "translate",
            "--ckpt",
            p(&avg),
            "--input",
            p(&src),
            "--max-len",
            "8",
        ];
        args.extend_from_slice(extra);
        let o = docflat(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let t1 = translate(&["--sent-ckpt", p(&s1.join("averaged.dflt"))]);
    assert_eq!(
        t1,
        translate(&["--sent-ckpt", p(&s1.join("averaged.dflt"))])
    );
    let src_text = fs::read_to_string(&src).unwrap();
    assert_eq!(t1.lines().count(), src_text.lines().count());
    assert_eq!(t1.lines().filter(|l| *l == "<d>").count(), 3);
    let whole = translate(&[
        "--sent-ckpt",
        p(&s1.join("averaged.dflt")),
        "--whole-sentences",
    ]);
    assert_eq!(whole.lines().count(), t1.lines().count());
    translate(&[]);

    let o = docflat(&[
        "score-contrastive",
        "--ckpt",
        p(&a.join("averaged.dflt")),
        "--testset",
        p(&d.join("syn").join("contrastive.jsonl")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&o);
    assert!(report.starts_with("overall\t"));
    assert!(report.contains("pronoun:er") && report.contains("distance:>3"));

    let map = d.join("map.txt");
    let o = docflat(&[
        "attn-map",
        "--ckpt",
        p(&a.join("averaged.dflt")),
        "--doc",
        p(&src),
        "--sentence",
        "5",
        "--output",
        p(&map),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = fs::read_to_string(&map).unwrap();
    assert_eq!(m.lines().count(), 4);
    assert!(m.lines().all(|l| l.split_whitespace().count() == 4));
    let o = docflat(&[
        "attn-map",
        "--ckpt",
        p(&a.join("averaged.dflt")),
        "--doc",
        p(&src),
        "--side",
        "decoder",
    ]);
    assert_eq!(code(&o), 2);

    let mut bad = fs::read(a.join("averaged.dflt")).unwrap();
    bad.truncate(bad.len() / 2);
    let broken = d.join("broken.dflt");
    fs::write(&broken, bad).unwrap();
    fs::copy(data.join("vocab.txt"), d.join("vocab.txt")).unwrap();
    let o = docflat(&["translate", "--ckpt", p(&broken), "--input", p(&src)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let cfg = write(
        dir.path(),
        "hot.cfg",
        &format!("{TINY}peak_lr = 1e30\nclip_norm = 1e30\n"),
    );
    let o = docflat(&[
        "train",
        "--stage",
        "1",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_prints_tsv() {
    let o = docflat(&[
        "bench",
        "--variants",
        "doc2doc,docflat_c",
        "--docs",
        "1",
        "--steps",
        "3",
        "--warmup",
        "1",
        "--trials",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0],
        "variant\tups\ttokens_per_sec\tinfer_batches_per_sec"
    );
    assert!(lines[1].starts_with("doc2doc\t") && lines[2].starts_with("docflat_c\t"));
    let o = docflat(&[
        "bench",
        "--variants",
        "doc2doc",
        "--steps",
        "2",
        "--warmup",
        "1",
        "--trials",
        "2",
    ]);
    assert_eq!(code(&o), 2);
}
