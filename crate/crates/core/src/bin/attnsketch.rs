use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnsketch::engine::{ColumnDiagnostics, RowKind, DEFAULT_K_BLOCK};
use attnsketch::framing::{FrameReader, FrameWriter};
use attnsketch::matf::MatfRowReader;
use attnsketch::oracle::sketched_output;
use attnsketch::report::{evaluate_with, memory_audit, read_sparse_text, write_sparse_text};
use attnsketch::tensor::spectral_norm_upper_from_gram;
use attnsketch::{
    exact_attention, gen_instance, mat_load, mat_store, CrossWeights, DenseMatrix, EngineConfig, Error,
    FeatureConfig, MemoryReport, ProblemParams, Profile, RngSeed, SketchDims, SketchKind, SketchState,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "attnsketch", version, about = "Streaming sketch-based attention approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded Q/K/V instance as MATF files.
    Gen(GenArgs),
    /// Stream Q, K, V through the engine.
    Run(RunArgs),
    /// Cross-attention: stream X2 then X1 through stored weights.
    RunCross(RunCrossArgs),
    /// Recompute the exact output for a finished run and compare.
    Verify(VerifyArgs),
    /// Report engine memory across sequence lengths.
    BenchMemory(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Uniform,
    Spiky,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Uniform => Profile::Uniform,
            ProfileArg::Spiky => Profile::Spiky,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SketchArg {
    Ams,
    Gaussian,
}

impl From<SketchArg> for SketchKind {
    fn from(s: SketchArg) -> Self {
        match s {
            SketchArg::Ams => SketchKind::Ams,
            SketchArg::Gaussian => SketchKind::Gaussian,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    b: f64,
    /// Planted entries per output column (spiky profile).
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, value_enum, default_value_t = ProfileArg::Uniform)]
    profile: ProfileArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the rows as a framed stream (V, then K, then Q).
    #[arg(long)]
    frames: bool,
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Sparsity target k.
    #[arg(long = "k-sparse", default_value_t = 8)]
    k_sparse: usize,
    #[arg(long, default_value_t = 0.5)]
    eps1: f64,
    #[arg(long, default_value_t = 0.1)]
    eps2: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Entry bound on Q and K.
    #[arg(long, default_value_t = 1.0)]
    b: f64,
    /// Taylor degree (even); defaults from the entry bound.
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long, value_enum, default_value_t = SketchArg::Ams)]
    sketch: SketchArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Key rows staged per block update.
    #[arg(long, default_value_t = DEFAULT_K_BLOCK)]
    k_block: usize,
}

impl EngineArgs {
    fn config(&self, n: usize, d: usize) -> Result<EngineConfig, Error> {
        let p = ProblemParams::new(n, d, self.b, self.k_sparse, self.eps1, self.eps2, self.delta)?;
        let degree = match self.degree {
            Some(g) => g,
            None => FeatureConfig::default_degree(self.b)?,
        };
        Ok(EngineConfig::new(p, FeatureConfig::new(d, degree)?, RngSeed(self.seed))
            .with_sketch(self.sketch.into())
            .with_k_block(self.k_block))
    }
}

#[derive(Args)]
struct StreamArgs {
    /// Framed row stream instead of MATF files ("-" reads stdin).
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Sequence length (stream input only).
    #[arg(long)]
    n: Option<usize>,
    /// Head dimension (stream input only).
    #[arg(long)]
    d: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "stream")]
    q: Option<PathBuf>,
    #[arg(long = "k-mat", required_unless_present = "stream")]
    k_mat: Option<PathBuf>,
    #[arg(long, required_unless_present = "stream")]
    v: Option<PathBuf>,
    #[command(flatten)]
    stream: StreamArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Output directory for T.txt and run.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunCrossArgs {
    #[arg(long, required_unless_present = "stream")]
    x1: Option<PathBuf>,
    #[arg(long, required_unless_present = "stream")]
    x2: Option<PathBuf>,
    #[arg(long)]
    wq: PathBuf,
    #[arg(long)]
    wk: PathBuf,
    #[arg(long)]
    wv: PathBuf,
    #[command(flatten)]
    stream: StreamArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleMode {
    /// Exact and kernel-smoothed outputs.
    Exact,
    /// Also the sketched intermediate, with the JL sketch materialized.
    Sketched,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    run_report: PathBuf,
    #[arg(long, value_enum, default_value_t = OracleMode::Exact)]
    oracle_mode: OracleMode,
    /// Where to write the JSON error report (default: next to the run report).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Treat a pass rate below this value as a hard failure.
    #[arg(long)]
    min_pass_rate: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384")]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    degree: usize,
    #[arg(long = "k-sparse", default_value_t = 8)]
    k_sparse: usize,
    #[arg(long, default_value_t = 0.5)]
    eps1: f64,
    #[arg(long, default_value_t = 0.5)]
    eps2: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the sketch dimensions of the largest n for every n.
    #[arg(long)]
    pin_dims: bool,
    /// Stream n rows of each kind through every engine before auditing.
    #[arg(long)]
    stream_rows: bool,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Plain,
    Cross,
}

#[derive(Serialize, Deserialize)]
struct RunReport {
    mode: Mode,
    inputs: BTreeMap<String, PathBuf>,
    config: EngineConfig,
    dims: SketchDims,
    output: PathBuf,
    columns: Vec<ColumnDiagnostics>,
    max_nnz: usize,
    sparsity_ok: bool,
    /// Spectral-norm estimate of the streamed value matrix.
    value_norm: f64,
    value_norm_ok: bool,
    memory: MemoryReport,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::RunCross(a) => cmd_run_cross(a),
        Command::Verify(a) => cmd_verify(a),
        Command::BenchMemory(a) => cmd_bench(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen(a: GenArgs) -> CliResult<bool> {
    let p = ProblemParams::new(a.n, a.d, a.b, a.k, 0.5, 0.5, 0.5)?;
    let inst = gen_instance(&p, RngSeed(a.seed), a.profile.into())?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    mat_store(&inst.q, a.out_dir.join("Q.matf"))?;
    mat_store(&inst.k, a.out_dir.join("K.matf"))?;
    mat_store(&inst.v, a.out_dir.join("V.matf"))?;
    if a.frames {
        let path = a.out_dir.join("stream.frames");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = FrameWriter::new(BufWriter::new(file), a.d);
        for (kind, m) in [(RowKind::V, &inst.v), (RowKind::K, &inst.k), (RowKind::Q, &inst.q)] {
            for (i, row) in m.iter_rows().enumerate() {
                w.write(kind, i as u32, row).map_err(|e| Error::io(&path, e))?;
            }
        }
        w.into_inner().map_err(|e| Error::io(&path, e))?;
    }
    println!("wrote {} x {} instance ({}) to {}", a.n, a.d, Profile::from(a.profile), a.out_dir.display());
    Ok(true)
}

/// Tracks `VᵀV` of the streamed value rows in `d²` numbers.
struct ValueGram {
    d: usize,
    gram: Vec<f64>,
}

impl ValueGram {
    fn new(d: usize) -> Self {
        ValueGram { d, gram: vec![0.0; d * d] }
    }

    fn add(&mut self, row: &[f64]) {
        for (r, &a) in row.iter().enumerate() {
            for (c, &b) in row.iter().enumerate() {
                self.gram[r * self.d + c] += a * b;
            }
        }
    }

    fn norm(&self) -> f64 {
        let g = DenseMatrix::from_vec(self.d, self.d, self.gram.clone()).expect("finite rows");
        spectral_norm_upper_from_gram(&g)
    }
}

fn open_stream(path: &Path, d: usize) -> CliResult<FrameReader<Box<dyn io::BufRead>>> {
    let inner: Box<dyn io::BufRead> = if path == Path::new("-") {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
    };
    Ok(FrameReader::new(inner, d))
}

fn stream_dims(s: &StreamArgs) -> CliResult<(usize, usize)> {
    match (s.n, s.d) {
        (Some(n), Some(d)) => Ok((n, d)),
        _ => Err("--stream requires --n and --d".into()),
    }
}

fn matf_dims(paths: &[&Path]) -> CliResult<(usize, usize)> {
    let first = MatfRowReader::open(paths[0])?;
    let (n, d) = (first.rows(), first.cols());
    for p in &paths[1..] {
        let r = MatfRowReader::open(p)?;
        if (r.rows(), r.cols()) != (n, d) {
            return Err(format!("{} is {} x {}, expected {n} x {d}", p.display(), r.rows(), r.cols()).into());
        }
    }
    Ok((n, d))
}

fn feed_matf(st: &mut SketchState, kind: RowKind, path: &Path, gram: Option<&mut ValueGram>) -> CliResult<()> {
    let mut gram = gram;
    for (i, row) in MatfRowReader::open(path)?.enumerate() {
        let row = row?;
        if let Some(g) = gram.as_deref_mut() {
            g.add(&row);
        }
        st.ingest(kind, i, &row)?;
    }
    Ok(())
}

fn feed_frames(st: &mut SketchState, path: &Path, d: usize, gram: &mut ValueGram, cross: Option<&DenseMatrix>) -> CliResult<()> {
    for frame in open_stream(path, d)? {
        let frame = frame?;
        match (frame.kind, cross) {
            (RowKind::V, None) => gram.add(&frame.row),
            (RowKind::X2, Some(w_v)) => gram.add(&w_v.row_times(&frame.row)?),
            _ => {}
        }
        st.ingest(frame.kind, frame.index as usize, &frame.row)?;
    }
    Ok(())
}

fn finish_run(
    mut st: SketchState,
    cfg: EngineConfig,
    mode: Mode,
    inputs: BTreeMap<String, PathBuf>,
    gram: ValueGram,
    out_dir: &Path,
) -> CliResult<bool> {
    let memory = memory_audit(&st);
    let output = st.finalize()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let t_path = out_dir.join("T.txt");
    let mut w = BufWriter::new(File::create(&t_path).map_err(|e| Error::io(&t_path, e))?);
    write_sparse_text(&output, &mut w).map_err(|e| Error::io(&t_path, e))?;
    w.flush().map_err(|e| Error::io(&t_path, e))?;

    let n = cfg.params.n;
    let value_norm = gram.norm();
    let value_norm_ok = value_norm <= (1.0 + 1e-6) / (n as f64).sqrt();
    if !value_norm_ok {
        log::warn!("value matrix norm {value_norm:.6e} exceeds 1/sqrt(n) = {:.6e}", 1.0 / (n as f64).sqrt());
    }
    let max_nnz = output.columns.iter().map(|c| c.nnz()).max().unwrap_or(0);
    let sparsity_ok = max_nnz <= 2 * cfg.params.k;
    let report = RunReport {
        mode,
        inputs,
        dims: st.dims(),
        config: cfg,
        output: t_path,
        columns: output.diagnostics.clone(),
        max_nnz,
        sparsity_ok,
        value_norm,
        value_norm_ok,
        memory,
    };
    let r_path = out_dir.join("run.json");
    fs::write(&r_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&r_path, e))?;
    println!(
        "n = {n}, d = {}, m1 = {}, m2 = {}, t = {}; max nnz {max_nnz} (limit {}); wrote {}",
        report.dims.d,
        report.dims.m1(),
        report.dims.m2,
        report.dims.t,
        2 * report.config.params.k,
        r_path.display()
    );
    if !sparsity_ok {
        eprintln!("output sparsity exceeds 2k");
    }
    Ok(sparsity_ok)
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn cmd_run(a: RunArgs) -> CliResult<bool> {
    let mut inputs = BTreeMap::new();
    if let Some(stream) = &a.stream.stream {
        let (n, d) = stream_dims(&a.stream)?;
        let cfg = a.engine.config(n, d)?;
        let mut st = SketchState::new(&cfg)?;
        let mut gram = ValueGram::new(d);
        feed_frames(&mut st, stream, d, &mut gram, None)?;
        inputs.insert("stream".into(), absolute(stream));
        return finish_run(st, cfg, Mode::Plain, inputs, gram, &a.out);
    }
    let (q, k, v) = (a.q.unwrap(), a.k_mat.unwrap(), a.v.unwrap());
    let (n, d) = matf_dims(&[&q, &k, &v])?;
    let cfg = a.engine.config(n, d)?;
    let mut st = SketchState::new(&cfg)?;
    let mut gram = ValueGram::new(d);
    feed_matf(&mut st, RowKind::V, &v, Some(&mut gram))?;
    feed_matf(&mut st, RowKind::K, &k, None)?;
    feed_matf(&mut st, RowKind::Q, &q, None)?;
    for (name, p) in [("q", &q), ("k", &k), ("v", &v)] {
        inputs.insert(name.to_string(), absolute(p));
    }
    finish_run(st, cfg, Mode::Plain, inputs, gram, &a.out)
}

fn cmd_run_cross(a: RunCrossArgs) -> CliResult<bool> {
    let weights = CrossWeights::new(mat_load(&a.wq)?, mat_load(&a.wk)?, mat_load(&a.wv)?)?;
    let mut inputs = BTreeMap::new();
    for (name, p) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv)] {
        inputs.insert(name.to_string(), absolute(p));
    }
    let w_v = weights.w_v.clone();
    if let Some(stream) = &a.stream.stream {
        let (n, d) = stream_dims(&a.stream)?;
        let cfg = a.engine.config(n, d)?;
        let mut st = SketchState::new_cross(&cfg, weights)?;
        let mut gram = ValueGram::new(d);
        feed_frames(&mut st, stream, d, &mut gram, Some(&w_v))?;
        inputs.insert("stream".into(), absolute(stream));
        return finish_run(st, cfg, Mode::Cross, inputs, gram, &a.out);
    }
    let (x1, x2) = (a.x1.unwrap(), a.x2.unwrap());
    let (n, d) = matf_dims(&[&x1, &x2])?;
    let cfg = a.engine.config(n, d)?;
    let mut st = SketchState::new_cross(&cfg, weights)?;
    let mut gram = ValueGram::new(d);
    for (i, row) in MatfRowReader::open(&x2)?.enumerate() {
        let row = row?;
        gram.add(&w_v.row_times(&row)?);
        st.ingest_x2_row(i, &row)?;
    }
    feed_matf(&mut st, RowKind::X1, &x1, None)?;
    inputs.insert("x1".into(), absolute(&x1));
    inputs.insert("x2".into(), absolute(&x2));
    finish_run(st, cfg, Mode::Cross, inputs, gram, &a.out)
}

/// Rebuilds `(Q, K, V)` from the inputs recorded in a run report.
fn load_inputs(r: &RunReport) -> CliResult<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let (n, d) = (r.dims.n, r.dims.d);
    let input = |name: &str| r.inputs.get(name).ok_or_else(|| format!("run report lacks input {name:?}"));
    let (a, b, c) = if let Some(stream) = r.inputs.get("stream") {
        let mut rows: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
        for frame in open_stream(stream, d)? {
            let frame = frame?;
            let slot = rows.entry(attnsketch::framing::tag_of(frame.kind)).or_insert_with(|| vec![0.0; n * d]);
            let i = frame.index as usize;
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n }.into());
            }
            slot[i * d..(i + 1) * d].copy_from_slice(&frame.row);
        }
        let mut take = |kind| DenseMatrix::from_vec(n, d, rows.remove(&attnsketch::framing::tag_of(kind)).unwrap_or(vec![0.0; n * d]));
        match r.mode {
            Mode::Plain => (take(RowKind::Q)?, take(RowKind::K)?, take(RowKind::V)?),
            Mode::Cross => {
                let x2 = take(RowKind::X2)?;
                (take(RowKind::X1)?, x2.clone(), x2)
            }
        }
    } else {
        match r.mode {
            Mode::Plain => (mat_load(input("q")?)?, mat_load(input("k")?)?, mat_load(input("v")?)?),
            Mode::Cross => {
                let x2 = mat_load(input("x2")?)?;
                (mat_load(input("x1")?)?, x2.clone(), x2)
            }
        }
    };
    match r.mode {
        Mode::Plain => Ok((a, b, c)),
        Mode::Cross => Ok((
            a.matmul(&mat_load(input("wq")?)?)?,
            b.matmul(&mat_load(input("wk")?)?)?,
            c.matmul(&mat_load(input("wv")?)?)?,
        )),
    }
}

fn cmd_verify(a: VerifyArgs) -> CliResult<bool> {
    let text = fs::read_to_string(&a.run_report).map_err(|e| Error::io(&a.run_report, e))?;
    let run: RunReport = serde_json::from_str(&text)?;
    let (q, k, v) = load_inputs(&run)?;
    let cfg = &run.config;
    let oracle = exact_attention(&q, &k, &v, &cfg.features)?;
    let y_hat = match a.oracle_mode {
        OracleMode::Exact => None,
        OracleMode::Sketched => Some(sketched_output(&q, &k, &v, &cfg.features, &cfg.value_sketcher()?)?),
    };
    let t_file = File::open(&run.output).map_err(|e| Error::io(&run.output, e))?;
    let output = read_sparse_text(BufReader::new(t_file), run.dims.n, run.dims.d)?;
    let report = evaluate_with(&output, &oracle, &cfg.params, y_hat.as_ref())?;

    let out = a.out.clone().unwrap_or_else(|| a.run_report.with_file_name("error_report.json"));
    fs::write(&out, report.to_json()).map_err(|e| Error::io(&out, e))?;
    print!("{}", report.table());
    println!("wrote {}", out.display());

    let mut hard = Vec::new();
    if !report.sparsity_ok {
        hard.push(format!("a column has {} nonzeros, limit {}", report.max_nnz, 2 * cfg.params.k));
    }
    if oracle.row_sum_error > 1e-9 || oracle.row_sum_error_tilde > 1e-9 {
        hard.push("softmax rows do not sum to one".to_string());
    }
    if oracle.d_tilde_diag.iter().any(|&x| x <= 0.0) {
        hard.push("non-positive approximate denominator".to_string());
    }
    if let Some(min) = a.min_pass_rate {
        if report.pass_rate < min {
            hard.push(format!("pass rate {:.4} below {min}", report.pass_rate));
        }
    }
    for h in &hard {
        eprintln!("invariant failed: {h}");
    }
    Ok(hard.is_empty())
}

fn cmd_bench(a: BenchArgs) -> CliResult<bool> {
    let largest = *a.n_list.iter().max().ok_or("--n-list is empty")?;
    let features = FeatureConfig::new(a.d, a.degree)?;
    let config = |n| -> CliResult<EngineConfig> {
        let p = ProblemParams::new(n, a.d, 1.0, a.k_sparse, a.eps1, a.eps2, a.delta)?;
        Ok(EngineConfig::new(p, features, RngSeed(a.seed)))
    };
    let pinned = config(largest)?.dims()?;
    let mut reports = Vec::new();
    for &n in &a.n_list {
        let mut cfg = config(n)?;
        if a.pin_dims {
            cfg = cfg.with_dims(pinned.m2, pinned.recovery);
        }
        let mut st = SketchState::new(&cfg)?;
        if a.stream_rows {
            let mut rng = RngSeed(a.seed ^ n as u64).rng();
            let mut row = vec![0.0; a.d];
            let scale = 1.0 / n as f64;
            for kind in [RowKind::V, RowKind::K, RowKind::Q] {
                for i in 0..n {
                    for x in row.iter_mut() {
                        *x = rng.random_range(-1.0..=1.0) * if kind == RowKind::V { scale } else { 1.0 };
                    }
                    st.ingest(kind, i, &row)?;
                }
            }
        }
        let r = memory_audit(&st);
        print!("{}", r.table());
        reports.push(r);
    }
    let mut ok = true;
    if a.pin_dims {
        let same = reports.windows(2).all(|w| w[0].breakdown == w[1].breakdown);
        println!("pinned dimensions: reports identical across n: {same}");
        ok &= same;
    }
    for r in &reports {
        let b = &r.breakdown;
        if ![b.m1, b.m2, b.t, b.d, DEFAULT_K_BLOCK].contains(&b.largest_dimension) {
            eprintln!("n = {}: largest buffer dimension {} is not a sketch dimension", r.n, b.largest_dimension);
            ok = false;
        }
    }
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&reports)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(ok)
}
