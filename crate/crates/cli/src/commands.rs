use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bit_core::checkpoint::ParamGroup;
use bit_core::gradcheck::run_suite;
use bit_core::pipeline::{
    check_compatible, imbalance as run_imbalance, train_stage1, train_stage2, EpochLog,
};
use bit_core::retrieval::{encode_gallery, evaluate};
use bit_core::synthdata::generate;
use bit_core::{Checkpoint, Dataset, Error, InferenceConfig, Modality, OpKind, RunConfig, Split};
use serde::Serialize;
use serde_json::json;

use crate::Common;

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config, or input files (exit 2).
    Usage(String),
    /// A check or computation failed (exit 1).
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Dimension { .. } | Error::Domain { .. } => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let cfg = match &common.config {
        Some(path) => {
            RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_out(common: &Common, text: &str) -> CmdResult {
    match &common.out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn required_out(common: &Common, what: &str) -> Result<PathBuf, Failure> {
    common
        .out
        .clone()
        .ok_or_else(|| usage(format!("{what} needs --out PATH")))
}

pub fn gen_data(common: &Common) -> CmdResult {
    let cfg = load_config(common)?;
    let out = required_out(common, "gen-data")?;
    let ds = generate(&cfg.gen)?;
    ds.save(&out)?;
    let summary = json!({
        "path": out.display().to_string(),
        "identities": cfg.gen.num_identities,
        "train_identities": cfg.gen.num_train_identities(),
        "test_identities": cfg.gen.num_identities - cfg.gen.num_train_identities(),
        "samples": ds.samples.len(),
        "train_visible": ds.count(Split::Train, Modality::Visible),
        "train_infrared": ds.count(Split::Train, Modality::Infrared),
        "query": ds.count(Split::Query, Modality::Infrared),
        "gallery": ds.count(Split::Gallery, Modality::Visible),
        "imbalance_ratio": ds.train_imbalance(),
    });
    print!("{}", pretty(&summary));
    Ok(())
}

/// Streams epoch records to a JSON-lines file, keeping the first I/O error.
struct LogSink {
    writer: BufWriter<File>,
    error: Option<std::io::Error>,
    last: Option<EpochLog>,
}

impl LogSink {
    fn create(path: &Path) -> Result<Self, Failure> {
        let file = File::create(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(Self {
            writer: BufWriter::new(file),
            error: None,
            last: None,
        })
    }

    fn record(&mut self, log: &EpochLog) {
        self.last = Some(*log);
        if self.error.is_none() {
            let line = serde_json::to_string(log).expect("log serializes");
            if let Err(e) = writeln!(self.writer, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<Option<EpochLog>, Failure> {
        if let Some(e) = self.error.take() {
            return Err(usage(format!("writing loss log: {e}")));
        }
        self.writer
            .flush()
            .map_err(|e| usage(format!("writing loss log: {e}")))?;
        Ok(self.last)
    }
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

pub fn train(
    common: &Common,
    data: &Path,
    stage: u8,
    checkpoint: Option<&Path>,
    log: Option<PathBuf>,
) -> CmdResult {
    let out = required_out(common, "train")?;
    let log_path = log.unwrap_or_else(|| default_log_path(&out));
    let ds = load_data(data)?;

    let (ck, last) = if stage == 1 {
        if checkpoint.is_some() {
            return Err(usage(
                "stage 1 trains from scratch; --checkpoint is only read by stage 2",
            ));
        }
        let cfg = load_config(common)?;
        check_compatible(&cfg, &ds)?;
        let mut sink = LogSink::create(&log_path)?;
        let encoder = train_stage1(&cfg, &ds, |l| sink.record(l))?;
        (Checkpoint::new(&cfg, &encoder, None), sink.finish()?)
    } else {
        let path = checkpoint.ok_or_else(|| {
            usage("stage 2 needs the stage-1 encoder: pass --checkpoint PATH from a stage-1 run")
        })?;
        let input = load_checkpoint(path)?;
        let cfg = if common.config.is_some() {
            load_config(common)?
        } else {
            match common.seed {
                Some(seed) => input.config.clone().with_seed(seed),
                None => input.config.clone(),
            }
        };
        if cfg.encoder != input.config.encoder {
            return Err(usage(
                "the config's encoder section differs from the one in the checkpoint",
            ));
        }
        check_compatible(&cfg, &ds)?;
        let encoder = input.encoder()?;
        let mut sink = LogSink::create(&log_path)?;
        let matcher = train_stage2(&cfg, &ds, &encoder, |l| sink.record(l))?;
        let ck = Checkpoint::new(&cfg, &encoder, Some(&matcher));
        assert_encoder_frozen(&input, &ck)?;
        (ck, sink.finish()?)
    };
    ck.save(&out)?;
    let summary = json!({
        "stage": stage,
        "checkpoint": out.display().to_string(),
        "log": log_path.display().to_string(),
        "final_epoch": last,
    });
    print!("{}", pretty(&summary));
    Ok(())
}

/// Bitwise comparison of every encoder parameter in two checkpoints.
fn assert_encoder_frozen(before: &Checkpoint, after: &Checkpoint) -> CmdResult {
    let encoder_params = |ck: &Checkpoint| -> Vec<(String, Vec<u64>)> {
        ck.entries
            .iter()
            .zip(&ck.buffers)
            .filter(|(e, _)| e.group == ParamGroup::Encoder)
            .map(|(e, b)| (e.name.clone(), b.iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    let (a, b) = (encoder_params(before), encoder_params(after));
    if a.len() != b.len() {
        return Err(Failure::Check(
            "encoder parameter count changed during stage 2".into(),
        ));
    }
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if x != y {
            return Err(Failure::Check(format!(
                "encoder parameter {name} changed during stage 2"
            )));
        }
    }
    Ok(())
}

pub fn eval(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    top_k: Option<usize>,
    baseline: bool,
) -> CmdResult {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_data(data)?;
    let file_top_k = match &common.config {
        Some(_) => Some(load_config(common)?.top_k),
        None => None,
    };
    let top_k = top_k.or(file_top_k).unwrap_or(ck.config.top_k);
    if top_k == 0 {
        return Err(usage("--top-K must be at least 1"));
    }
    check_compatible(&ck.config, &ds)?;
    let encoder = ck.encoder()?;
    let matcher = if baseline { None } else { Some(ck.matcher()?) };
    let inference = InferenceConfig {
        top_k,
        use_bit_head: !baseline,
    };
    let report = evaluate(&encoder, matcher.as_ref(), &ds, &inference)?;
    write_out(common, &pretty(&report))
}

pub fn imbalance(common: &Common, data: &Path, fractions: &[f64], modality: &str) -> CmdResult {
    let modality = Modality::parse(modality)
        .ok_or_else(|| usage(format!("unknown modality {modality:?}; use vis or ir")))?;
    if fractions.is_empty() {
        return Err(usage("--fractions needs at least one value"));
    }
    let cfg = load_config(common)?;
    let ds = load_data(data)?;
    check_compatible(&cfg, &ds)?;
    let rows = run_imbalance(&cfg, &ds, fractions, modality)?;
    write_out(common, &pretty(&rows))
}

pub fn gradcheck(common: &Common, fault: Option<&str>) -> CmdResult {
    let fault = match fault {
        None => None,
        Some(name) => Some(
            OpKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| usage(format!("no operation named {name:?}")))?,
        ),
    };
    let results = run_suite(fault)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&serde_json::to_string(r).expect("result serializes"));
        text.push('\n');
    }
    write_out(common, &text)?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )))
    }
}

pub fn debug_matches(common: &Common, data: &Path, checkpoint: &Path, query: usize) -> CmdResult {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_data(data)?;
    check_compatible(&ck.config, &ds)?;
    let queries = ds.indices(Split::Query);
    let &qi = queries.get(query).ok_or_else(|| {
        usage(format!(
            "--query {query} out of range; the dataset has {} queries",
            queries.len()
        ))
    })?;
    let encoder = ck.encoder()?;
    let matcher = ck.matcher()?;
    let q = &ds.samples[qi];
    let fq = encoder.encode(q)?;
    let mut text = String::new();
    for g in encode_gallery(&encoder, &ds)? {
        let out = matcher.score(&g.features, &fq)?;
        let record = json!({
            "query": qi,
            "gallery": g.id,
            "same_identity": g.identity == q.identity,
            "mutual": out.matches.mutual,
            "complementary": out.matches.complementary,
            "S_hat": out.s_hat.data(),
            "psi": out.psi,
        });
        text.push_str(&record.to_string());
        text.push('\n');
    }
    write_out(common, &text)
}
