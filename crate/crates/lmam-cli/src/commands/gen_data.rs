//! `lmam gen-data`: synthesizes a dataset and writes train/val/test JSONL
//! splits plus a manifest. When --val is 0 the held-out --test block is
//! divided 8:2 into test and validation, mirroring the handling of corpora
//! that ship without a validation split.

use lmam_core::synth::{generate_synthetic, GeneratorSpec};

use crate::cli::{parse_dims, parse_f64_triple, GenDataArgs};
use crate::dataset::{split_path, write_manifest, write_split, Manifest, SplitCounts};
use crate::error::CliError;
use crate::report::{OutDir, RunReport};

pub fn run(args: GenDataArgs) -> Result<(), CliError> {
    let mut spec = GeneratorSpec::default();
    if let Some(n) = args.num_classes {
        spec.num_classes = n;
    }
    if let Some(dims) = &args.dims {
        let (d_t, d_a, d_v) = parse_dims(dims)?;
        spec.d_t = d_t;
        spec.d_a = d_a;
        spec.d_v = d_v;
    }
    if let Some(u) = args.utterances {
        spec.utterances = u;
    }
    if let Some(b) = args.beta {
        spec.beta = b;
    }
    if let Some(g) = &args.gamma {
        let (gt, ga, gv) = parse_f64_triple(g)?;
        spec.gamma_t = gt;
        spec.gamma_a = ga;
        spec.gamma_v = gv;
    }
    if let Some(r) = args.rho {
        spec.rho = r;
    }
    if let Some(s) = args.sigma {
        spec.sigma = s;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }

    let (val, test) = if args.val == 0 && args.test > 0 {
        // 8:2 test/val division of the held-out block.
        let val = args.test / 5;
        (val, args.test - val)
    } else {
        (args.val, args.test)
    };
    let counts = SplitCounts { train: args.train, val, test };
    spec.dialogues = counts.train + counts.val + counts.test;

    let dialogues = generate_synthetic(&spec)?;
    let out = OutDir::create(&args.out)?;

    let train = &dialogues[..counts.train];
    let val_slice = &dialogues[counts.train..counts.train + counts.val];
    let test_slice = &dialogues[counts.train + counts.val..];

    let manifest = Manifest {
        num_classes: spec.num_classes,
        d_t: spec.d_t,
        d_a: spec.d_a,
        d_v: spec.d_v,
        generator: spec.clone(),
        seed: spec.seed,
        splits: counts.clone(),
    };
    write_manifest(out.path(), &manifest)?;
    write_split(&split_path(out.path(), "train"), train)?;
    write_split(&split_path(out.path(), "val"), val_slice)?;
    write_split(&split_path(out.path(), "test"), test_slice)?;

    let mut report = RunReport::new("gen-data").with_config(&manifest)?;
    report.seed = Some(spec.seed);
    report.metric("dialogues", spec.dialogues);
    report.artifacts = vec![
        "manifest.json".into(),
        "train.jsonl".into(),
        "val.jsonl".into(),
        "test.jsonl".into(),
    ];
    out.write_report(&report)?;

    println!(
        "wrote {} train / {} val / {} test dialogues (seed {}) to {}",
        counts.train,
        counts.val,
        counts.test,
        spec.seed,
        out.path().display()
    );
    Ok(())
}
