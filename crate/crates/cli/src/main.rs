//! `fine` command line: drives condensation, initialization, training,
//! sampling, benchmarking, and file inspection.
//!
//! Exit codes: 0 success, 2 usage error, 3 file/format error, 4 divergence.

use std::path::PathBuf;

use fine_core::pipeline::{
    run_bench, run_condense, run_init, run_inspect, run_sample, run_train, BenchArgs, CondenseArgs,
    InitArgs, SampleArgs, TrainArgs,
};
use fine_core::Error;

const EXIT_OK: i32 = 0;
const EXIT_USAGE: i32 = 2;
const EXIT_FILE: i32 = 3;
const EXIT_DIVERGED: i32 = 4;

const USAGE: &str = "\
fine - shared-factor initialization toolkit for tiny diffusion transformers

USAGE:
  fine condense --config cfg.toml --out lg.lgne [--aux-out aux.fine]
  fine init --learngene lg.lgne --depth L --dataset shapes-B --out init.fine
            [--fit-steps 300] [--fit-fraction 0.01] [--fit-lr 1e-2]
            [--keep-frozen] [--seed S] [--t-diff 400] [--heads 4]
            [--image-size 8] [--patch-size 2] [--num-classes 2]
            [--width D] [--data-n 2048]
  fine train --from init.fine --steps N --out final.fine [--log curve.csv]
            [--dataset NAME] [--batch 8] [--lr 1e-4] [--seed S] [--data-n 2048]
  fine sample --from final.fine --n 64 --out grid.imgr [--ema]
            [--class K] [--seed S]
  fine bench --recipes he,share,svd,fine --depths 4,6,8 --seeds 3 --out bench.csv
            [--dataset shapes-A] [--steps 6000] [--batch 8] [--t-diff 100]
            [--learngene lg.lgne] [--source aux.fine] [--svd-rank R]
            [--eval-samples 1024] [--fit-steps 300] [--data-n 2048] [--data-seed S]
  fine inspect PATH

Datasets: shapes-A, shapes-B, gauss-mix. Recipes: he, share, svd, fine.
";

struct Flags {
    known: Vec<(String, Option<String>)>,
    positionals: Vec<String>,
}

#[derive(Debug)]
struct UsageError(String);

impl Flags {
    fn parse(args: &[String], boolean_flags: &[&str]) -> Result<Self, UsageError> {
        let mut known = Vec::new();
        let mut positionals = Vec::new();
        let mut it = args.iter().peekable();
        while let Some(arg) = it.next() {
            if let Some(name) = arg.strip_prefix("--") {
                if boolean_flags.contains(&name) {
                    known.push((name.to_string(), None));
                } else {
                    let value = it
                        .next()
                        .ok_or_else(|| UsageError(format!("flag --{name} needs a value")))?;
                    known.push((name.to_string(), Some(value.clone())));
                }
            } else {
                positionals.push(arg.clone());
            }
        }
        Ok(Flags { known, positionals })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.known
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .and_then(|(_, v)| v.as_deref())
    }

    fn has(&self, name: &str) -> bool {
        self.known.iter().any(|(k, _)| k == name)
    }

    fn required(&self, name: &str) -> Result<&str, UsageError> {
        self.get(name).ok_or_else(|| UsageError(format!("missing required flag --{name}")))
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str, default: T) -> Result<T, UsageError> {
        match self.get(name) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| UsageError(format!("flag --{name} has invalid value {raw:?}"))),
        }
    }

    fn required_parsed<T: std::str::FromStr>(&self, name: &str) -> Result<T, UsageError> {
        let raw = self.required(name)?;
        raw.parse()
            .map_err(|_| UsageError(format!("flag --{name} has invalid value {raw:?}")))
    }

    fn reject_unknown(&self, allowed: &[&str]) -> Result<(), UsageError> {
        for (k, _) in &self.known {
            if !allowed.contains(&k.as_str()) {
                return Err(UsageError(format!("unknown flag --{k}")));
            }
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, UsageError> {
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|_| UsageError(format!("bad {what} entry {s:?}"))))
        .collect()
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_FILE,
    }
}

fn dispatch(cmd: &str, rest: &[String]) -> Result<Result<String, Error>, UsageError> {
    match cmd {
        "condense" => {
            let flags = Flags::parse(rest, &[])?;
            flags.reject_unknown(&["config", "out", "aux-out"])?;
            let args = CondenseArgs {
                config: PathBuf::from(flags.required("config")?),
                out: PathBuf::from(flags.required("out")?),
                aux_out: flags.get("aux-out").map(PathBuf::from),
            };
            Ok(run_condense(&args))
        }
        "init" => {
            let flags = Flags::parse(rest, &["keep-frozen"])?;
            flags.reject_unknown(&[
                "learngene",
                "depth",
                "dataset",
                "out",
                "fit-steps",
                "fit-fraction",
                "fit-lr",
                "keep-frozen",
                "seed",
                "t-diff",
                "heads",
                "image-size",
                "patch-size",
                "num-classes",
                "width",
                "data-n",
            ])?;
            check_dataset(flags.required("dataset")?)?;
            let mut args = InitArgs::new(
                PathBuf::from(flags.required("learngene")?),
                flags.required_parsed("depth")?,
                flags.required("dataset")?.to_string(),
                PathBuf::from(flags.required("out")?),
            );
            args.fit.fit_steps = flags.parsed("fit-steps", args.fit.fit_steps)?;
            args.fit.fit_fraction = flags.parsed("fit-fraction", args.fit.fit_fraction)?;
            args.fit.learning_rate = flags.parsed("fit-lr", args.fit.learning_rate)?;
            args.fit.keep_factors_frozen = flags.has("keep-frozen");
            args.seed = flags.parsed("seed", args.seed)?;
            args.t_diff = flags.parsed("t-diff", args.t_diff)?;
            args.heads = flags.parsed("heads", args.heads)?;
            args.image_size = flags.parsed("image-size", args.image_size)?;
            args.patch_size = flags.parsed("patch-size", args.patch_size)?;
            args.num_classes = flags.parsed("num-classes", args.num_classes)?;
            args.data_n = flags.parsed("data-n", args.data_n)?;
            if flags.get("width").is_some() {
                args.width = Some(flags.required_parsed("width")?);
            }
            Ok(run_init(&args))
        }
        "train" => {
            let flags = Flags::parse(rest, &[])?;
            flags.reject_unknown(&["from", "steps", "out", "log", "dataset", "batch", "lr", "seed", "data-n"])?;
            if let Some(ds) = flags.get("dataset") {
                check_dataset(ds)?;
            }
            let mut args = TrainArgs::new(
                PathBuf::from(flags.required("from")?),
                flags.required_parsed("steps")?,
                PathBuf::from(flags.required("out")?),
            );
            args.log = flags.get("log").map(PathBuf::from);
            args.dataset = flags.get("dataset").map(|s| s.to_string());
            args.batch = flags.parsed("batch", args.batch)?;
            args.lr = flags.parsed("lr", args.lr)?;
            args.data_n = flags.parsed("data-n", args.data_n)?;
            if flags.get("seed").is_some() {
                args.seed = Some(flags.required_parsed("seed")?);
            }
            Ok(run_train(&args))
        }
        "sample" => {
            let flags = Flags::parse(rest, &["ema"])?;
            flags.reject_unknown(&["from", "n", "out", "ema", "class", "seed"])?;
            let mut class_id = None;
            if flags.get("class").is_some() {
                class_id = Some(flags.required_parsed("class")?);
            }
            let args = SampleArgs {
                from: PathBuf::from(flags.required("from")?),
                n: flags.required_parsed("n")?,
                out: PathBuf::from(flags.required("out")?),
                use_ema: flags.has("ema"),
                class_id,
                seed: flags.parsed("seed", 0)?,
            };
            Ok(run_sample(&args))
        }
        "bench" => {
            let flags = Flags::parse(rest, &[])?;
            flags.reject_unknown(&[
                "recipes",
                "depths",
                "seeds",
                "out",
                "dataset",
                "steps",
                "batch",
                "t-diff",
                "learngene",
                "source",
                "svd-rank",
                "eval-samples",
                "fit-steps",
                "data-n",
                "data-seed",
            ])?;
            let recipes: Vec<String> = flags
                .required("recipes")?
                .split(',')
                .map(|s| s.trim().to_string())
                .collect();
            for r in &recipes {
                if !["he", "share", "svd", "fine"].contains(&r.as_str()) {
                    return Err(UsageError(format!("unknown recipe {r:?}")));
                }
            }
            let depths: Vec<usize> = parse_list(flags.required("depths")?, "depth")?;
            let seed_count: u64 = flags.required_parsed("seeds")?;
            if seed_count == 0 {
                return Err(UsageError("--seeds must be at least 1".into()));
            }
            let dataset = flags.get("dataset").unwrap_or("shapes-A").to_string();
            check_dataset(&dataset)?;
            let mut args = BenchArgs::new(
                recipes,
                depths,
                (0..seed_count).collect(),
                PathBuf::from(flags.required("out")?),
            );
            args.dataset = dataset;
            args.steps = flags.parsed("steps", args.steps)?;
            args.batch = flags.parsed("batch", args.batch)?;
            args.t_diff = flags.parsed("t-diff", args.t_diff)?;
            args.eval_samples = flags.parsed("eval-samples", args.eval_samples)?;
            args.fit_steps = flags.parsed("fit-steps", args.fit_steps)?;
            args.data_n = flags.parsed("data-n", args.data_n)?;
            args.data_seed = flags.parsed("data-seed", args.data_seed)?;
            args.learngene = flags.get("learngene").map(PathBuf::from);
            args.source = flags.get("source").map(PathBuf::from);
            if flags.get("svd-rank").is_some() {
                args.svd_rank = Some(flags.required_parsed("svd-rank")?);
            }
            Ok(run_bench(&args))
        }
        "inspect" => {
            let flags = Flags::parse(rest, &[])?;
            flags.reject_unknown(&[])?;
            let [path] = &flags.positionals[..] else {
                return Err(UsageError("inspect takes exactly one path".into()));
            };
            Ok(run_inspect(std::path::Path::new(path)))
        }
        other => Err(UsageError(format!("unknown subcommand {other:?}"))),
    }
}

fn check_dataset(name: &str) -> Result<(), UsageError> {
    fine_core::data::DatasetName::parse(name).map(|_| ()).map_err(|e| UsageError(e.to_string()))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help" {
        print!("{USAGE}");
        std::process::exit(if args.is_empty() { EXIT_USAGE } else { EXIT_OK });
    }
    match dispatch(&args[0], &args[1..]) {
        Err(UsageError(msg)) => {
            eprintln!("usage error: {msg}\n");
            eprint!("{USAGE}");
            std::process::exit(EXIT_USAGE);
        }
        Ok(Err(err)) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code_for(&err));
        }
        Ok(Ok(summary)) => {
            println!("{summary}");
            std::process::exit(EXIT_OK);
        }
    }
}
