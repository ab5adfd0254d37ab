//! `mvcorr`: one binary exposing every pipeline stage.
//!
//! Failures print a single `error: stage=<cmd> code=<n> msg=<text>` line on
//! stderr and exit with 2 (configuration), 3 (data) or 4 (numeric failure).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;
use mvcorr_core::correspond::build_matches;
use mvcorr_core::eval::{ConfusionMatrix, RunTable};
use mvcorr_core::mesh::{load_mesh, parse_labels, FaceLabels, Texture};
use mvcorr_core::render::{render_view, sample_views, Scene};
use mvcorr_core::synth::{generate_dataset, Family, Manifest, Split, SynthSpec, LABELS_FILE, MESH_FILE, TEXTURE_FILE};
use mvcorr_core::viewio::{read_view, write_rgb_preview, write_view};
use mvcorr_nn::{checkpoint, EmbedNet, SegHead};
use mvcorr_train::config::KEYS;
use mvcorr_train::{finetune, infer_shape, pretrain, Dataset, FewShotProtocol, PipelineConfig, Provenance, TrainError};
use sha2::{Digest, Sha256};

/// Environment variable naming the default root for render caches.
const CACHE_ENV: &str = "MVCORR_CACHE";

#[derive(Parser)]
#[command(name = "mvcorr", version, about = "Multi-view dense-correspondence part segmentation pipeline")]
struct Cli {
    /// Worker threads for rendering and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file; see `mvcorr keys` for every key and default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, TrainError> {
        let mut text = match &self.config {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| TrainError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        for o in &self.overrides {
            text.push('\n');
            text.push_str(o);
        }
        PipelineConfig::parse(&text)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic shape collection.
    Synth {
        /// `furniture` (untextured) or `figure` (textured).
        #[arg(long)]
        family: Family,
        #[arg(long)]
        n: usize,
        /// Unlabeled, train and test counts, e.g. `32,8,8`.
        #[arg(long)]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every camera of one mesh into a view cache.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// OBJ mesh; a `texture.png` next to it is used when the mesh has UVs.
        #[arg(long = "in")]
        input: PathBuf,
        /// Cache directory (default: `$MVCORR_CACHE/<content hash>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the match set of views `I,J`.
        #[arg(long, value_name = "I,J")]
        dump_matches: Option<String>,
    },
    /// Contrastive pre-training on the unlabeled split.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss curve.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an embedding checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Few-shot fine-tuning; one output subdirectory per seed.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained embedding checkpoint (random init when absent).
        #[arg(long)]
        init: Option<PathBuf>,
        /// `k=K,v=V,seed=S` (defaults to the config's protocol).
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict, fuse and fill labels for every shape of a split.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Fine-tuned checkpoint (embedding + head).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted labelings; writes a `category,stat,value` CSV.
    Eval {
        /// Prediction directories (one per run), each `<id>/labels.txt`.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Ground-truth directory holding `<id>/labels.txt`.
        #[arg(long)]
        gt: PathBuf,
        /// Mesh directory holding `<id>/mesh.obj` (defaults to `--gt`).
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List every config key with its default value.
    Keys,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Render { .. } => "render",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Keys => "keys",
        }
    }
}

fn parse_split(s: &str) -> Result<(usize, usize, usize), TrainError> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| TrainError::Config(format!("split `{s}` must be three counts")))?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(TrainError::Config(format!("split `{s}` must be three counts"))),
    }
}

fn keys_text() -> String {
    let defaults = PipelineConfig::default().to_text();
    let mut out = String::from("Config keys (`key = value`, `#` comments):\n");
    for line in defaults.lines() {
        let (k, v) = line.split_once(" = ").unwrap_or((line, ""));
        let doc = KEYS.iter().find(|(n, _)| *n == k).map(|(_, d)| *d).unwrap_or("");
        out.push_str(&format!("  {k:<28} {doc} [default: {v}]\n"));
    }
    out
}

fn load_checkpoint(path: &Path, cfg: &PipelineConfig, head_classes: Option<usize>) -> Result<(EmbedNet<f32>, Option<SegHead<f32>>), TrainError> {
    let mut net = EmbedNet::<f32>::new(cfg.embed_config(), 0)?;
    match head_classes {
        Some(c) => {
            let mut head = SegHead::<f32>::new(cfg.dim, c, 0)?;
            checkpoint::load(path, &mut [&mut net.params, &mut head.params])?;
            Ok((net, Some(head)))
        }
        None => {
            checkpoint::load(path, &mut [&mut net.params])?;
            Ok((net, None))
        }
    }
}

fn render_cmd(cfg: &PipelineConfig, input: &Path, out: Option<PathBuf>, dump: Option<&str>) -> Result<(), TrainError> {
    let (mesh, _) = load_mesh(input, None)?;
    let tex_path = input.with_file_name(TEXTURE_FILE);
    let texture = if mesh.has_uvs() && tex_path.exists() {
        Some(Texture::load_png(&tex_path)?)
    } else {
        None
    };
    let mut h = Sha256::new();
    h.update(cfg.to_text());
    h.update(fs::read(input)?);
    if texture.is_some() {
        h.update(fs::read(&tex_path)?);
    }
    let key = hex::encode(h.finalize());
    let out = match out {
        Some(o) => o,
        None => PathBuf::from(std::env::var_os(CACHE_ENV).ok_or_else(|| {
            TrainError::Config(format!("render needs --out or the {CACHE_ENV} environment variable"))
        })?)
        .join(&key[..16]),
    };
    let key_file = out.join("cache.key");
    let cameras = sample_views(&cfg.views, &mesh)?;
    let view_path = |i: usize| out.join(format!("view_{i:03}.mvdc"));
    let reuse = fs::read_to_string(&key_file).map(|k| k.trim() == key).unwrap_or(false)
        && (0..cameras.len()).all(|i| view_path(i).exists());
    if reuse {
        info!("cache {} is current; reusing {} views", out.display(), cameras.len());
    } else {
        fs::create_dir_all(&out)?;
        let scene = Scene::new(mesh, texture);
        for (i, cam) in cameras.iter().enumerate() {
            let v = render_view(&scene, cam);
            write_view(&view_path(i), &v)?;
            write_rgb_preview(&out.join(format!("view_{i:03}.png")), &v)?;
        }
        fs::write(&key_file, format!("{key}\n"))?;
        Provenance::new("render", cfg, &[input]).write(&out)?;
        info!("rendered {} views into {}", cameras.len(), out.display());
    }
    if let Some(d) = dump {
        let (i, j) = d
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?)))
            .ok_or_else(|| TrainError::Config(format!("--dump-matches expects I,J, got `{d}`")))?;
        if i >= cameras.len() || j >= cameras.len() {
            return Err(TrainError::Config(format!("view index out of range 0..{}", cameras.len())));
        }
        let m = build_matches(&read_view(&view_path(i))?, &read_view(&view_path(j))?, cfg.match_eps)?;
        m.write_dump(&out.join(format!("matches_{i:03}_{j:03}.bin")))?;
        info!("{} matches between views {i} and {j}", m.len());
    }
    Ok(())
}

fn parse_split_name(s: &str) -> Result<Split, TrainError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| TrainError::Config(format!("unknown split `{s}` (unlabeled, train, test)")))
}

fn eval_cmd(preds: &[PathBuf], gt: &Path, mesh_dir: &Path, category: Option<String>, out: &Path) -> Result<(), TrainError> {
    let manifest = Manifest::load(gt).ok();
    let category = category.unwrap_or_else(|| {
        manifest
            .as_ref()
            .map_or_else(|| "all".into(), |m| format!("{:?}", m.family).to_lowercase())
    });
    let n_classes = manifest.map(|m| m.n_classes);
    let mut table = RunTable::default();
    for (idx, pred) in preds.iter().enumerate() {
        let seed = fs::read_to_string(pred.join(mvcorr_train::provenance::FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v["seed"].as_u64())
            .unwrap_or(idx as u64);
        let mut ids: Vec<String> = fs::read_dir(pred)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(LABELS_FILE).exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(TrainError::Data(format!("{} holds no <id>/{LABELS_FILE}", pred.display())));
        }
        // the class count is fixed per category, so read every labeling first
        let mut shapes = Vec::with_capacity(ids.len());
        for id in &ids {
            let (mesh, g) = load_mesh(&mesh_dir.join(id).join(MESH_FILE), Some(&gt.join(id).join(LABELS_FILE)))?;
            let lp = pred.join(id).join(LABELS_FILE);
            let p = parse_labels(&fs::read_to_string(&lp)?, &lp)?;
            shapes.push((mesh, g.expect("labels requested"), p));
        }
        let n = n_classes.unwrap_or_else(|| {
            shapes
                .iter()
                .map(|(_, g, p)| g.n_classes().max(p.iter().max().map_or(0, |&l| l as usize + 1)))
                .max()
                .unwrap_or(0)
        });
        let mut cm = ConfusionMatrix::new(n);
        for (mesh, g, p) in shapes {
            let g = FaceLabels::new(g.labels().to_vec(), n)?;
            cm.accumulate(&g, &FaceLabels::new(p, n)?, &mesh)?;
        }
        let miou = cm.part_miou()?;
        info!("{}: mIoU {miou:.4} over {} shapes", pred.display(), ids.len());
        table.push(&category, seed, miou);
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, table.to_csv())?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), TrainError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| TrainError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Keys => print!("{}", keys_text()),
        Command::Synth {
            family,
            n,
            split,
            seed,
            out,
        } => {
            let m = generate_dataset(&SynthSpec::new(family), n, parse_split(&split)?, seed, &out)?;
            let args = format!("family = {family:?}\nn = {n}\nsplit = {split}\nseed = {seed}\n").to_lowercase();
            Provenance {
                stage: "synth".into(),
                version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
                config_hash: hex::encode(Sha256::digest(args.as_bytes())),
                seed,
                config: args,
                inputs: Vec::new(),
            }
            .write(&out)?;
            info!("wrote {} shapes to {}", m.shapes.len(), out.display());
        }
        Command::Render {
            cfg,
            input,
            out,
            dump_matches,
        } => render_cmd(&cfg.load()?, &input, out, dump_matches.as_deref())?,
        Command::Pretrain { cfg, data, out, init } => {
            let cfg = cfg.load()?;
            let mut ds = Dataset::load(&data, &cfg)?;
            let init = init.map(|p| load_checkpoint(&p, &cfg, None).map(|n| n.0)).transpose()?;
            fs::create_dir_all(&out)?;
            Provenance::new("pretrain", &cfg, &[&data]).write(&out)?;
            let r = pretrain(&mut ds, &cfg, init, Some(&out))?;
            info!("pre-training finished; final loss {:?}", r.curve.last().map(|c| c.loss));
        }
        Command::Finetune {
            cfg,
            data,
            init,
            protocol,
            out,
        } => {
            let cfg = cfg.load()?;
            let protocol = match protocol {
                Some(p) => FewShotProtocol::parse(&p)?,
                None => cfg.protocol.clone(),
            };
            let mut ds = Dataset::load(&data, &cfg)?;
            let init = init.map(|p| load_checkpoint(&p, &cfg, None).map(|n| n.0)).transpose()?;
            let inputs: Vec<&Path> = std::iter::once(data.as_path()).collect();
            for &s in &protocol.seeds {
                let dir = out.join(format!("seed_{s}"));
                fs::create_dir_all(&dir)?;
                let mut p = Provenance::new("finetune", &cfg, &inputs);
                p.seed = s;
                p.write(&dir)?;
                finetune(&mut ds, &cfg, &protocol, s, init.as_ref(), Some(&dir))?;
            }
        }
        Command::Infer {
            cfg,
            data,
            ckpt,
            split,
            out,
        } => {
            let cfg = cfg.load()?;
            let ds = Dataset::load(&data, &cfg)?;
            let (net, head) = load_checkpoint(&ckpt, &cfg, Some(ds.n_classes))?;
            let head = head.expect("head requested");
            let mut prov = Provenance::new("infer", &cfg, &[&data, &ckpt]);
            if let Some(seed) = ckpt
                .parent()
                .and_then(|d| fs::read_to_string(d.join(mvcorr_train::provenance::FILE)).ok())
                .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                .and_then(|v| v["seed"].as_u64())
            {
                prov.seed = seed;
            }
            prov.write(&out)?;
            for s in ds.indices(parse_split_name(&split)?) {
                let p = infer_shape(&ds, s, &net, &head, &cfg)?;
                let dir = out.join(&ds.shapes[s].id);
                fs::create_dir_all(&dir)?;
                p.labels.write(&dir.join(LABELS_FILE))?;
            }
        }
        Command::Eval {
            pred,
            gt,
            mesh,
            category,
            out,
        } => {
            let mesh = mesh.unwrap_or_else(|| gt.clone());
            eval_cmd(&pred, &gt, &mesh, category, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().after_long_help(keys_text()).get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let stage = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: stage={stage} code={} msg={msg}", e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
